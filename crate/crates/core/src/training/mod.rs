//! Adam training loop with early stopping, evaluation, and mode ablations.

mod adam;

use std::path::Path;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, OptimState, ADAM_EPSILON, BETA1, BETA2};

use crate::data::{IndexedWindow, SplitWindows};
use crate::error::{NstError, Result};
use crate::metrics::{mse_mae, relative_stationarity, EvalReport};
use crate::model::{save_checkpoint, ModelConfig, NsTransformer, Variant};
use crate::nn::Dropout;
use crate::stationarization::{DenormMode, SeriesWindow, StatVars};
use crate::tensor::{Graph, ParameterSet, Tensor, Var};

const DROPOUT_STREAM: u64 = 0xD1B5_4A32_D192_ED03;

/// Where the training loss is measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSpace {
    /// De-normalised predictions against raw targets.
    #[default]
    Original,
    /// Model-space output against targets mapped through the inverse of
    /// de-normalisation. Falls back to `Original` for variants without
    /// stationarization.
    Normalized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Non-improving epochs tolerated before stopping.
    pub patience: usize,
    pub lr: f64,
    /// Halve the learning rate after every epoch.
    pub lr_decay: bool,
    pub seed: u64,
    pub loss_space: LossSpace,
    /// Use every n-th training window.
    pub train_stride: usize,
    /// Use every n-th validation window.
    pub val_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 10,
            patience: 3,
            lr: 1e-4,
            lr_decay: false,
            seed: 0,
            loss_space: LossSpace::Original,
            train_stride: 1,
            val_stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(NstError::Config(m.into()));
        if self.batch_size == 0 {
            return fail("train.batch_size must be at least 1");
        }
        if self.epochs == 0 {
            return fail("train.epochs must be at least 1");
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return fail("train.lr must be a non-negative number");
        }
        if self.train_stride == 0 || self.val_stride == 0 {
            return fail("train.train_stride and train.val_stride must be at least 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_mae: f64,
    pub lr: f64,
    pub improved: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_mse,val_mae,lr,improved";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.epoch, e.train_loss, e.val_mse, e.val_mae, e.lr, e.improved
            ));
        }
        out
    }
}

fn loss_target(g: &mut Graph, target: Var, stats: StatVars, denorm: DenormMode) -> Result<Var> {
    match denorm {
        DenormMode::Inverse => {
            let centred = g.sub(target, stats.mu)?;
            g.div(centred, stats.sigma)
        }
        DenormMode::Literal => {
            let scaled = g.div(target, stats.sigma)?;
            g.sub(scaled, stats.mu)
        }
    }
}

/// Loss and parameter gradients for one window.
pub fn window_gradients(
    model: &NsTransformer,
    window: &SeriesWindow,
    loss_space: LossSpace,
    dropout: &mut Dropout,
) -> Result<(f64, Vec<Tensor>)> {
    let target = window
        .target
        .as_ref()
        .ok_or_else(|| NstError::Precondition("training window has no target".into()))?;
    let mut g = Graph::new();
    let p = model.params().bind(&mut g);
    let x = g.constant(window.x.clone());
    let t = g.constant(target.clone());
    let out = model.forward_graph(&mut g, &p, x, dropout)?;
    let loss = match (loss_space, out.stats) {
        (LossSpace::Normalized, Some(stats)) => {
            let t_norm = loss_target(&mut g, t, stats, model.config().denorm)?;
            g.mse(out.y_prime, t_norm)?
        }
        _ => g.mse(out.y_hat, t)?,
    };
    let value = g.value(loss).item();
    let grads = g.backward(loss)?;
    Ok((value, p.gradients(&grads)))
}

fn dropout_for(model: &NsTransformer, seed: u64, epoch: usize, index: usize) -> Dropout {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ DROPOUT_STREAM);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    Dropout::train(model.config().dropout, rng)
}

fn check_compatible(model: &NsTransformer, windows: &[IndexedWindow], what: &str) -> Result<()> {
    let cfg = model.config();
    for w in windows.iter().take(1) {
        let target_len = w.window.target.as_ref().map_or(0, |t| t.rows());
        if w.window.seq_len() != cfg.seq_len
            || w.window.channels() != cfg.channels
            || target_len != cfg.pred_len
        {
            return Err(NstError::Config(format!(
                "{what} windows are {}x{} -> {}, model expects {}x{} -> {}",
                w.window.seq_len(),
                w.window.channels(),
                target_len,
                cfg.seq_len,
                cfg.channels,
                cfg.pred_len
            )));
        }
    }
    Ok(())
}

fn strided(windows: &[IndexedWindow], stride: usize) -> Vec<&IndexedWindow> {
    windows.iter().step_by(stride).collect()
}

/// Trains `model` in place and leaves it holding the parameters of the best
/// validation epoch. When `checkpoint` is given, the best model is written
/// there every time validation improves.
pub fn train(
    model: &mut NsTransformer,
    windows: &SplitWindows,
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainHistory> {
    cfg.validate()?;
    let train_set = strided(&windows.train, cfg.train_stride);
    let val_set: Vec<IndexedWindow> = strided(&windows.val, cfg.val_stride)
        .into_iter()
        .cloned()
        .collect();
    if train_set.is_empty() || val_set.is_empty() {
        return Err(NstError::Precondition(
            "training needs train and validation windows".into(),
        ));
    }
    check_compatible(model, &windows.train, "train")?;
    check_compatible(model, &val_set, "validation")?;

    let mut state = OptimState::new(model.params(), cfg.lr);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = TrainHistory {
        best_val_mse: f64::INFINITY,
        ..Default::default()
    };
    let mut best: Option<ParameterSet> = None;
    let mut stale = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc: Option<Vec<Tensor>> = None;
            let mut batch_loss = 0.0;
            for &i in batch {
                let mut dropout = dropout_for(model, cfg.seed, epoch, i);
                let (loss, grads) =
                    window_gradients(model, &train_set[i].window, cfg.loss_space, &mut dropout)?;
                if !loss.is_finite() {
                    return Err(NstError::Diverged {
                        epoch,
                        batch: b,
                        detail: format!(
                            "loss {loss} on window starting at row {}",
                            train_set[i].start
                        ),
                    });
                }
                batch_loss += loss;
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let n = batch.len() as f64;
            let mut grads = acc.expect("non-empty batch");
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v /= n);
            }
            adam_step(model.params_mut(), &grads, &mut state)?;
            loss_sum += batch_loss;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let (val_mse, val_mae) = forecast_errors(model, &val_set)?;
        if !val_mse.is_finite() {
            return Err(NstError::Diverged {
                epoch,
                batch: order.len().div_ceil(cfg.batch_size),
                detail: format!("validation MSE {val_mse}"),
            });
        }
        let improved = val_mse < history.best_val_mse;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_mse,
            val_mae,
            lr: state.lr,
            improved,
        });
        info!("epoch {epoch}: train {train_loss:.6} val mse {val_mse:.6} mae {val_mae:.6}");
        if improved {
            history.best_val_mse = val_mse;
            history.best_epoch = epoch;
            best = Some(model.params().clone());
            stale = 0;
            if let Some(path) = checkpoint {
                save_checkpoint(model, path)?;
            }
        } else {
            stale += 1;
            if stale >= cfg.patience {
                debug!("early stop after epoch {epoch}");
                history.stopped_early = epoch < cfg.epochs;
                break;
            }
        }
        if cfg.lr_decay {
            state.lr *= 0.5;
        }
    }
    if let Some(best) = best {
        *model.params_mut() = best;
    }
    Ok(history)
}

/// Original-space MSE and MAE averaged over `windows`.
pub fn forecast_errors(model: &NsTransformer, windows: &[IndexedWindow]) -> Result<(f64, f64)> {
    let (mut se, mut ae) = (0.0, 0.0);
    for w in windows {
        let target = w
            .window
            .target
            .as_ref()
            .ok_or_else(|| NstError::Precondition("evaluation window has no target".into()))?;
        let pred = model.forward(&w.window)?;
        let (mse, mae) = mse_mae(&pred.y_hat, target)?;
        se += mse;
        ae += mae;
    }
    let n = windows.len().max(1) as f64;
    Ok((se / n, ae / n))
}

/// Forecast errors on every window plus relative stationarity over the
/// chronological concatenation of non-overlapping windows (every
/// `pred_len`-th window from the first).
pub fn evaluate(model: &NsTransformer, windows: &[IndexedWindow]) -> Result<EvalReport> {
    if windows.is_empty() {
        return Err(NstError::Precondition("no evaluation windows".into()));
    }
    check_compatible(model, windows, "evaluation")?;
    let horizon = model.config().pred_len;
    let first = windows[0].start;
    let (mut se, mut ae) = (0.0, 0.0);
    let (mut preds, mut truth) = (Vec::new(), Vec::new());
    for w in windows {
        let target = w
            .window
            .target
            .as_ref()
            .ok_or_else(|| NstError::Precondition("evaluation window has no target".into()))?;
        let pred = model.forward(&w.window)?;
        let (mse, mae) = mse_mae(&pred.y_hat, target)?;
        se += mse;
        ae += mae;
        if (w.start - first).is_multiple_of(horizon) {
            preds.push(pred.y_hat);
            truth.push(target.clone());
        }
    }
    let n = windows.len() as f64;
    let (rel, per) = match stationarity_of(&preds, &truth) {
        Ok(r) => (Some(r.aggregate), r.per_variable),
        Err(e) => {
            warn!("relative stationarity unavailable: {e}");
            (None, Vec::new())
        }
    };
    Ok(EvalReport {
        horizon,
        mse: se / n,
        mae: ae / n,
        relative_stationarity: rel,
        relative_stationarity_per_variable: per,
        windows: windows.len(),
    })
}

fn stationarity_of(
    preds: &[Tensor],
    truth: &[Tensor],
) -> Result<crate::metrics::RelativeStationarity> {
    let p: Vec<&Tensor> = preds.iter().collect();
    let t: Vec<&Tensor> = truth.iter().collect();
    relative_stationarity(&Tensor::concat(&p, 0)?, &Tensor::concat(&t, 0)?)
}

/// MSE of repeating the last input row across the horizon.
pub fn naive_last_value_mse(windows: &[IndexedWindow]) -> Result<f64> {
    if windows.is_empty() {
        return Err(NstError::Precondition("no windows".into()));
    }
    let mut total = 0.0;
    for w in windows {
        let x = &w.window.x;
        let target = w
            .window
            .target
            .as_ref()
            .ok_or_else(|| NstError::Precondition("window has no target".into()))?;
        let last = x.row(x.rows() - 1);
        let rows: Vec<&[f64]> = (0..target.rows()).map(|_| last).collect();
        total += mse_mae(&Tensor::from_rows(&rows)?, target)?.0;
    }
    Ok(total / windows.len() as f64)
}

/// One trained and evaluated variant.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub report: EvalReport,
    pub history: TrainHistory,
}

pub const ABLATION_HEADER: &str = "mode,mse,mae,relative_stationarity";

impl AblationRow {
    pub fn to_table_row(&self) -> String {
        let rel = self
            .report
            .relative_stationarity
            .map(|v| v.to_string())
            .unwrap_or_else(|| "nan".into());
        format!(
            "{},{},{},{}",
            self.variant.name(),
            self.report.mse,
            self.report.mae,
            rel
        )
    }
}

/// Trains and tests each variant from the same base configuration and seed.
pub fn ablate(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    windows: &SplitWindows,
    variants: &[Variant],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut model = NsTransformer::new(ModelConfig {
            variant,
            ..base.clone()
        })?;
        info!("ablation: training {variant}");
        let history =
            train(&mut model, windows, train_cfg, None).map_err(|e| e.in_layer(variant.name()))?;
        let report = evaluate(&model, &windows.test)?;
        rows.push(AblationRow {
            variant,
            report,
            history,
        });
    }
    Ok(rows)
}
