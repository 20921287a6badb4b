use nst_core::attention::{destationary_attention, AttentionMode, DestatFactors};
use nst_core::nn::Dropout;
use nst_core::oracle::{
    expansion_identity, multilayer_identity_check, random_instance, raw_attention_map,
    reconstructed_attention_map, shared_variance_project, verify, EmbedActivation, InstanceRanges,
    LinearStack,
};
use nst_core::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Scalar-loop reference for the raw first-layer map.
fn reference_map(stack: &LinearStack, x: &Tensor) -> Vec<Vec<f64>> {
    let (s, c, d) = (x.rows(), x.cols(), stack.d_k());
    let l = &stack.layers[0];
    let mut h = vec![vec![0.0; d]; s];
    for i in 0..s {
        for k in 0..d {
            for j in 0..c {
                h[i][k] += x.at(i, j) * stack.embed.at(j, k);
            }
        }
    }
    let proj = |w: &Tensor| {
        let mut o = vec![vec![0.0; d]; s];
        for i in 0..s {
            for k in 0..d {
                for j in 0..d {
                    o[i][k] += h[i][j] * w.at(j, k);
                }
            }
        }
        o
    };
    let (q, k) = (proj(&l.wq), proj(&l.wk));
    let mut out = vec![vec![0.0; s]; s];
    for i in 0..s {
        let mut row: Vec<f64> = (0..s)
            .map(|j| (0..d).map(|t| q[i][t] * k[j][t]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        for v in row.iter_mut() {
            *v = (*v - m).exp() / z;
        }
        out[i] = row;
    }
    out
}

#[test]
fn raw_map_matches_scalar_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let stack = LinearStack::random(&mut rng, 3, 4, 1);
    let x = Tensor::new(
        [6, 3],
        (0..18).map(|_| rng.random_range(-3.0..3.0)).collect(),
    )
    .unwrap();
    let m = raw_attention_map(&stack, &x).unwrap();
    let r = reference_map(&stack, &x);
    for i in 0..6 {
        for j in 0..6 {
            assert!((m.at(i, j) - r[i][j]).abs() < 1e-12);
        }
    }
}

#[test]
fn identity_holds_on_random_instances() {
    let report = verify(1000, 2024, 1e-6).unwrap();
    println!(
        "max deviation {:.3e}, expansion {:.3e}, drop {:.3e}",
        report.max_deviation, report.max_expansion, report.max_row_constant_drop
    );
    assert!(report.passed(), "worst {:?}", report.worst());
    assert!(report.max_expansion < 1e-9);
    assert!(report.max_row_constant_drop < 1e-10);
}

#[test]
fn floating_point_floor_fails_tiny_tolerance() {
    let report = verify(200, 7, 1e-15).unwrap();
    assert!(!report.passed());
}

#[test]
fn standard_input_needs_no_rescaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let raw = Tensor::new(
        [8, 2],
        (0..16).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    // centre and project: mean 0, unit variance, so x' == x
    let mut x = shared_variance_project(&raw).unwrap();
    for j in 0..2 {
        let m = (0..8).map(|i| x.at(i, j)).sum::<f64>() / 8.0;
        for i in 0..8 {
            let v = x.at(i, j) - m;
            x.set(i, j, v);
        }
    }
    let stack = LinearStack::random(&mut rng, 2, 3, 1);
    let rebuilt = reconstructed_attention_map(&stack, &x).unwrap();
    assert!(rebuilt.max_abs_diff(&raw_attention_map(&stack, &x).unwrap()) < 1e-12);
}

#[test]
fn reconstruction_agrees_with_attention_module() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inst = random_instance(
        &mut rng,
        &InstanceRanges {
            d_k: (4, 4),
            ..Default::default()
        },
    )
    .unwrap();
    let stack = &inst.stack;
    let x = &inst.x;
    let s = x.rows();
    let means: Vec<f64> = (0..x.cols())
        .map(|j| (0..s).map(|i| x.at(i, j)).sum::<f64>() / s as f64)
        .collect();
    let sigma = inst.scale;
    let xn = Tensor::new(
        x.shape().to_vec(),
        x.data()
            .iter()
            .enumerate()
            .map(|(k, v)| (v - means[k % x.cols()]) / sigma)
            .collect(),
    )
    .unwrap();
    let l = &stack.layers[0];
    let h = x.matmul(&stack.embed).unwrap();
    let (q, k, v) = (
        h.matmul(&l.wq).unwrap(),
        h.matmul(&l.wk).unwrap(),
        h.matmul(&l.wv).unwrap(),
    );
    let hn = xn.matmul(&stack.embed).unwrap();
    let (qn, kn, vn) = (
        hn.matmul(&l.wq).unwrap(),
        hn.matmul(&l.wk).unwrap(),
        hn.matmul(&l.wv).unwrap(),
    );
    let mq: Vec<f64> = (0..4)
        .map(|j| (0..s).map(|i| q.at(i, j)).sum::<f64>() / s as f64)
        .collect();
    let delta = k
        .matmul(&Tensor::new([4, 1], mq).unwrap())
        .unwrap()
        .reshape([s])
        .unwrap();
    let f = DestatFactors {
        tau: sigma * sigma,
        delta,
    };

    let mut g = Graph::new();
    let (a, b, c) = (g.constant(qn), g.constant(kn), g.constant(vn.clone()));
    let fv = f.bind(&mut g).unwrap();
    let out = destationary_attention(
        &mut g,
        a,
        b,
        c,
        Some(fv),
        AttentionMode::Both,
        true,
        None,
        &mut Dropout::eval(),
    )
    .unwrap();
    // raw attention output in stationarised units
    let raw_map = raw_attention_map(stack, x).unwrap();
    let expect = raw_map.matmul(&vn).unwrap();
    assert!(g.value(out).max_abs_diff(&expect) < 1e-6);
    let _ = v;
}

#[test]
fn tanh_embedding_breaks_the_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ranges = InstanceRanges {
        seq_len: (8, 16),
        channels: (2, 4),
        d_k: (4, 8),
        scale: (2.0, 20.0),
        ..Default::default()
    };
    let mut broken = 0;
    let n = 100;
    for _ in 0..n {
        let mut inst = random_instance(&mut rng, &ranges).unwrap();
        inst.stack.activation = EmbedActivation::Tanh;
        let d = raw_attention_map(&inst.stack, &inst.x)
            .unwrap()
            .max_abs_diff(&reconstructed_attention_map(&inst.stack, &inst.x).unwrap());
        if d > 1e-3 {
            broken += 1;
        }
    }
    println!("tanh broke {broken}/{n}");
    assert!(broken >= 95, "{broken}");
}

#[test]
fn two_layer_exact_factors_and_sharing_gap() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ranges = InstanceRanges {
        layers: 2,
        seq_len: (4, 16),
        ..Default::default()
    };
    let mut shared_gap = 0.0f64;
    for residual in [false, true] {
        for _ in 0..100 {
            let mut inst = random_instance(&mut rng, &ranges).unwrap();
            inst.stack.residual = residual;
            let r = multilayer_identity_check(&inst.stack, &inst.x, 1e-6).unwrap();
            assert!(r.passed, "{r:?}");
            assert_eq!(r.exact.len(), 2);
            // layer one is the single-layer check under every rule
            assert!(r.shared_first[0] < 1e-6 && r.column_mean[0] < 1e-6);
            shared_gap = shared_gap.max(r.shared_first[1]);
        }
    }
    println!("largest shared-factor deviation at layer 2: {shared_gap:.3e}");
    assert!(shared_gap > 1e-3);
}

#[test]
fn single_layer_stack_matches_map_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inst = random_instance(&mut rng, &InstanceRanges::default()).unwrap();
    let r = multilayer_identity_check(&inst.stack, &inst.x, 1e-6).unwrap();
    let direct = raw_attention_map(&inst.stack, &inst.x)
        .unwrap()
        .max_abs_diff(&reconstructed_attention_map(&inst.stack, &inst.x).unwrap());
    assert_eq!(r.exact.len(), 1);
    assert!((r.exact[0] - direct).abs() < 1e-12);
    let e = expansion_identity(&inst.stack, &inst.x).unwrap();
    assert!(e.expansion < 1e-9);
}
