use nst_core::data::{make_windows, Dataset, SplitSpec, SplitWindows};
use nst_core::model::{load_checkpoint, ModelConfig, NsTransformer, Variant};
use nst_core::nn::Dropout;
use nst_core::training::{
    ablate, adam_step, evaluate, naive_last_value_mse, train, window_gradients, LossSpace,
    OptimState, TrainConfig,
};
use nst_core::{NstError, ParameterSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scalar_set(values: &[f64]) -> ParameterSet {
    let mut ps = ParameterSet::new();
    for (i, v) in values.iter().enumerate() {
        ps.insert(format!("p{i}"), Tensor::scalar(*v)).unwrap();
    }
    ps
}

#[test]
fn adam_first_steps_match_hand_values() {
    let mut ps = scalar_set(&[1.0]);
    let mut state = OptimState::new(&ps, 0.1);
    adam_step(&mut ps, &[Tensor::scalar(1.0)], &mut state).unwrap();
    // m_hat = v_hat = 1, so the step is lr / (1 + eps)
    let expected = 1.0 - 0.099_999_999;
    assert!((ps.by_name("p0").unwrap().item() - expected).abs() < 1e-15);
    // with a constant gradient the bias-corrected moments stay at one
    adam_step(&mut ps, &[Tensor::scalar(1.0)], &mut state).unwrap();
    assert!((ps.by_name("p0").unwrap().item() - (expected - 0.099_999_999)).abs() < 1e-15);
    assert_eq!(state.step, 2);
}

#[test]
fn zero_gradient_and_zero_lr_leave_parameters() {
    let mut ps = scalar_set(&[0.5, -2.0]);
    let before = ps.clone();
    let mut state = OptimState::new(&ps, 0.1);
    adam_step(
        &mut ps,
        &[Tensor::scalar(0.0), Tensor::scalar(0.0)],
        &mut state,
    )
    .unwrap();
    assert_eq!(ps, before);
    assert_eq!(state.step, 1);

    let mut state = OptimState::new(&ps, 0.0);
    adam_step(
        &mut ps,
        &[Tensor::scalar(3.0), Tensor::scalar(-1.0)],
        &mut state,
    )
    .unwrap();
    assert_eq!(ps, before);
}

#[test]
fn identical_parameters_stay_identical() {
    let mut ps = scalar_set(&[0.3, 0.3]);
    let mut state = OptimState::new(&ps, 0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let g: f64 = rng.random_range(-1.0..1.0);
        adam_step(&mut ps, &[Tensor::scalar(g), Tensor::scalar(g)], &mut state).unwrap();
        assert_eq!(ps.by_name("p0"), ps.by_name("p1"));
    }
}

#[test]
fn nan_gradient_names_parameter_and_changes_nothing() {
    let mut ps = scalar_set(&[1.0, 2.0]);
    let before = ps.clone();
    let mut state = OptimState::new(&ps, 0.1);
    match adam_step(
        &mut ps,
        &[Tensor::scalar(1.0), Tensor::scalar(f64::NAN)],
        &mut state,
    ) {
        Err(NstError::NanGradient(name)) => assert_eq!(name, "p1"),
        other => panic!("{other:?}"),
    }
    assert_eq!(ps, before);
    assert_eq!(state.step, 0);
}

fn tiny(variant: Variant, seed: u64) -> ModelConfig {
    ModelConfig {
        seq_len: 8,
        pred_len: 4,
        channels: 1,
        d_model: 16,
        n_heads: 2,
        e_layers: 1,
        d_layers: 1,
        d_ff: Some(32),
        projector_hidden: 8,
        dropout: 0.0,
        variant,
        seed,
        ..Default::default()
    }
}

fn series(values: Vec<f64>) -> Dataset {
    let n = values.len();
    Dataset::new(
        "test",
        Tensor::new([n, 1], values).unwrap(),
        vec!["x".into()],
    )
    .unwrap()
}

fn noisy_windows(seed: u64, len: usize) -> SplitWindows {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut level = 0.0;
    let values = (0..len)
        .map(|t| {
            level += rng.random_range(-0.5..0.5);
            level + (t as f64 * 0.4).sin()
        })
        .collect();
    make_windows(&series(values), &SplitSpec::default(), 8, 4, 1).unwrap()
}

#[test]
fn patience_zero_stops_at_first_stale_epoch() {
    let windows = noisy_windows(3, 120);
    let frozen = TrainConfig {
        lr: 0.0,
        epochs: 10,
        patience: 0,
        ..Default::default()
    };
    let mut model = NsTransformer::new(tiny(Variant::Both, 0)).unwrap();
    let h = train(&mut model, &windows, &frozen, None).unwrap();
    assert_eq!(h.epochs.len(), 2);
    assert!(h.stopped_early);
    assert_eq!(h.best_epoch, 1);

    let h = train(
        &mut model,
        &windows,
        &TrainConfig {
            patience: 2,
            ..frozen
        },
        None,
    )
    .unwrap();
    assert_eq!(h.epochs.len(), 3);
}

#[test]
fn fixed_seed_reproduces_training() {
    let windows = noisy_windows(5, 150);
    let cfg = TrainConfig {
        epochs: 2,
        lr: 1e-3,
        batch_size: 8,
        seed: 11,
        ..Default::default()
    };
    let run = || {
        let mut m = NsTransformer::new(ModelConfig {
            dropout: 0.1,
            ..tiny(Variant::Both, 4)
        })
        .unwrap();
        let h = train(&mut m, &windows, &cfg, None).unwrap();
        (h, m.params().clone())
    };
    let (h1, p1) = run();
    let (h2, p2) = run();
    assert_eq!(h1, h2);
    assert_eq!(p1, p2);
    let mut other = NsTransformer::new(ModelConfig {
        dropout: 0.1,
        ..tiny(Variant::Both, 4)
    })
    .unwrap();
    let h3 = train(&mut other, &windows, &TrainConfig { seed: 12, ..cfg }, None).unwrap();
    assert_ne!(h1.epochs[0].train_loss, h3.epochs[0].train_loss);
}

#[test]
fn projector_receives_gradient() {
    let windows = noisy_windows(8, 100);
    for variant in [Variant::Both, Variant::TauOnly, Variant::DeltaOnly] {
        let model = NsTransformer::new(tiny(variant, 2)).unwrap();
        let (_, grads) = window_gradients(
            &model,
            &windows.train[0].window,
            LossSpace::Original,
            &mut Dropout::eval(),
        )
        .unwrap();
        let norm: f64 = model
            .params()
            .iter()
            .zip(&grads)
            .filter(|((name, _), _)| name.starts_with("projector."))
            .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum();
        assert!(norm > 0.0, "{variant}: projector gradient is zero");
    }
    let vanilla = NsTransformer::new(tiny(Variant::Vanilla, 2)).unwrap();
    assert_eq!(vanilla.count_parameters().1, 0);
}

#[test]
fn original_space_loss_scales_quadratically() {
    // analytic best constant predictor: its loss is the target variance
    let windows = noisy_windows(9, 200);
    let targets: Vec<f64> = windows
        .train
        .iter()
        .flat_map(|w| w.window.target.as_ref().unwrap().data().to_vec())
        .collect();
    let best_constant = |a: f64| {
        let ys: Vec<f64> = targets.iter().map(|v| a * v).collect();
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / ys.len() as f64
    };
    let base = best_constant(1.0);
    for a in [0.5, 3.0, 40.0] {
        assert!((best_constant(a) / base - a * a).abs() < 1e-9 * a * a);
    }
    // the stationarized model's original-space loss scales the same way
    let model = NsTransformer::new(tiny(Variant::Both, 1)).unwrap();
    let w = &windows.train[3].window;
    let (l1, _) = window_gradients(&model, w, LossSpace::Original, &mut Dropout::eval()).unwrap();
    let scaled = nst_core::stationarization::SeriesWindow::new(
        w.x.scale(7.0),
        w.target.as_ref().map(|t| t.scale(7.0)),
    )
    .unwrap();
    let (l7, _) =
        window_gradients(&model, &scaled, LossSpace::Original, &mut Dropout::eval()).unwrap();
    assert!((l7 / l1 - 49.0).abs() < 1e-6, "{}", l7 / l1);
    // in normalised space the loss is scale free
    let (n1, _) = window_gradients(&model, w, LossSpace::Normalized, &mut Dropout::eval()).unwrap();
    let (n7, _) =
        window_gradients(&model, &scaled, LossSpace::Normalized, &mut Dropout::eval()).unwrap();
    assert!((n7 - n1).abs() < 1e-6 * n1);
}

#[test]
fn learns_noiseless_linear_trend() {
    let ramp = series((0..160).map(|t| 0.25 * t as f64).collect());
    let windows = make_windows(&ramp, &SplitSpec::default(), 8, 4, 1).unwrap();
    let naive = naive_last_value_mse(&windows.train).unwrap();
    let mut model = NsTransformer::new(tiny(Variant::Both, 0)).unwrap();
    let cfg = TrainConfig {
        epochs: 50,
        patience: 50,
        lr: 1e-3,
        batch_size: 8,
        ..Default::default()
    };
    let h = train(&mut model, &windows, &cfg, None).unwrap();
    let best = &h.epochs[h.best_epoch - 1];
    assert!(
        best.train_loss < naive,
        "train {} vs naive {naive}",
        best.train_loss
    );
    // memorisation: the training windows themselves are forecast well
    let report = evaluate(&model, &windows.train).unwrap();
    assert!(report.mse < 0.05 * naive, "{} vs {naive}", report.mse);
}

#[test]
fn evaluation_is_repeatable_and_checks_shapes() {
    let windows = noisy_windows(4, 150);
    let model = NsTransformer::new(tiny(Variant::Both, 6)).unwrap();
    let a = evaluate(&model, &windows.test).unwrap();
    let b = evaluate(&model, &windows.test).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.windows, windows.test.len());
    assert_eq!(a.horizon, 4);
    let wrong = NsTransformer::new(ModelConfig {
        seq_len: 10,
        ..tiny(Variant::Both, 6)
    })
    .unwrap();
    assert!(matches!(
        evaluate(&wrong, &windows.test),
        Err(NstError::Config(_))
    ));
}

#[test]
fn best_checkpoint_is_written_and_restored() {
    let windows = noisy_windows(12, 150);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.ckpt");
    let mut model = NsTransformer::new(tiny(Variant::Both, 3)).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        lr: 1e-3,
        batch_size: 4,
        ..Default::default()
    };
    train(&mut model, &windows, &cfg, Some(&path)).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.params(), model.params());
    assert_eq!(
        evaluate(&loaded, &windows.test).unwrap(),
        evaluate(&model, &windows.test).unwrap()
    );
}

#[test]
fn ablation_reports_every_mode() {
    let windows = noisy_windows(2, 120);
    let cfg = TrainConfig {
        epochs: 1,
        lr: 1e-3,
        ..Default::default()
    };
    let rows = ablate(&tiny(Variant::Both, 0), &cfg, &windows, &Variant::ALL).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.variant.name()).collect();
    assert_eq!(names.len(), 5);
    for v in Variant::ALL {
        assert!(names.contains(&v.name()));
    }
    for r in &rows {
        assert_eq!(r.to_table_row().split(',').count(), 4);
    }
}

#[test]
fn invalid_train_config_rejected() {
    let windows = noisy_windows(1, 100);
    let mut model = NsTransformer::new(tiny(Variant::Both, 0)).unwrap();
    let cfg = TrainConfig {
        batch_size: 0,
        ..Default::default()
    };
    assert!(matches!(
        train(&mut model, &windows, &cfg, None),
        Err(NstError::Config(_))
    ));
}
