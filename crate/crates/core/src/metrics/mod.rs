//! Forecast errors and stationarity analytics.

mod adf;

pub use adf::{
    adf_statistic, ols, schwert_lag, AdfResult, OlsFit, RANDOM_WALK_P95_T2000,
    WHITE_NOISE_P05_T2000,
};

use serde::Serialize;

use crate::error::{NstError, Result};
use crate::tensor::Tensor;

/// Mean squared and mean absolute error over all entries.
pub fn mse_mae(pred: &Tensor, truth: &Tensor) -> Result<(f64, f64)> {
    if pred.shape() != truth.shape() {
        return Err(NstError::dim("mse_mae", pred.shape(), truth.shape()));
    }
    let n = pred.numel();
    if n == 0 {
        return Err(NstError::EmptyWindow("mse_mae"));
    }
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, t) in pred.data().iter().zip(truth.data()) {
        let d = p - t;
        se += d * d;
        ae += d.abs();
    }
    Ok((se / n as f64, ae / n as f64))
}

/// Ratio of prediction stationarity to ground-truth stationarity.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RelativeStationarity {
    /// `100 * adf(pred) / adf(truth)` per variable.
    pub per_variable: Vec<f64>,
    /// Mean of `per_variable`.
    pub aggregate: f64,
}

/// Compares ADF statistics of chronologically concatenated predictions and
/// ground truth, both `[T', C]`.
pub fn relative_stationarity(preds: &Tensor, truth: &Tensor) -> Result<RelativeStationarity> {
    if preds.shape() != truth.shape() || preds.rank() != 2 {
        return Err(NstError::dim(
            "relative_stationarity",
            preds.shape(),
            truth.shape(),
        ));
    }
    let (t, c) = (preds.rows(), preds.cols());
    let column = |m: &Tensor, j: usize| -> Vec<f64> { (0..t).map(|i| m.at(i, j)).collect() };
    let mut per_variable = Vec::with_capacity(c);
    for j in 0..c {
        let truth_adf = adf_statistic(&column(truth, j), None)?.statistic;
        if truth_adf.abs() < 1e-9 {
            return Err(NstError::Degenerate(format!(
                "ground-truth ADF statistic of variable {j} is zero; ratio undefined"
            )));
        }
        let pred_adf = adf_statistic(&column(preds, j), None)?.statistic;
        per_variable.push(100.0 * (pred_adf / truth_adf));
    }
    let aggregate = per_variable.iter().sum::<f64>() / c as f64;
    Ok(RelativeStationarity {
        per_variable,
        aggregate,
    })
}

/// Mean of per-variable ADF statistics of a `[T, C]` matrix, used to rank
/// datasets by stationarity.
pub fn dataset_adf(values: &Tensor) -> Result<(Vec<AdfResult>, f64)> {
    let (t, c) = (values.rows(), values.cols());
    let mut all = Vec::with_capacity(c);
    for j in 0..c {
        let col: Vec<f64> = (0..t).map(|i| values.at(i, j)).collect();
        all.push(adf_statistic(&col, None).map_err(|e| e.in_layer(format!("variable {j}")))?);
    }
    let mean = all.iter().map(|r| r.statistic).sum::<f64>() / c.max(1) as f64;
    Ok((all, mean))
}

/// Test-set summary for one prediction length.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
    /// Aggregate relative stationarity in percent, when computable.
    pub relative_stationarity: Option<f64>,
    pub relative_stationarity_per_variable: Vec<f64>,
    pub windows: usize,
}

impl EvalReport {
    /// `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let rel = self
            .relative_stationarity
            .map(|v| v.to_string())
            .unwrap_or_else(|| "nan".into());
        let per: Vec<String> = self
            .relative_stationarity_per_variable
            .iter()
            .map(|v| v.to_string())
            .collect();
        format!(
            "horizon={}\nmse={}\nmae={}\nrelative_stationarity={}\nrelative_stationarity_per_variable={}\nwindows={}\n",
            self.horizon,
            self.mse,
            self.mae,
            rel,
            per.join(","),
            self.windows
        )
    }

    pub const TABLE_HEADER: &'static str = "horizon,mse,mae,relative_stationarity,windows";

    pub fn to_table_row(&self) -> String {
        let rel = self
            .relative_stationarity
            .map(|v| v.to_string())
            .unwrap_or_else(|| "nan".into());
        format!(
            "{},{},{},{},{}",
            self.horizon, self.mse, self.mae, rel, self.windows
        )
    }
}
