//! Series stationarization: per-window z-normalisation of the input and
//! restoration of the window statistics on the model output.

use serde::{Deserialize, Serialize};

use crate::error::{NstError, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Default floor applied to the per-variable standard deviation.
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// How model-space outputs are mapped back to the original scale.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenormMode {
    /// `sigma * y' + mu`, the exact inverse of normalisation.
    #[default]
    Inverse,
    /// `sigma * (y' + mu)`, the de-normalisation formula as printed.
    Literal,
}

/// A raw `[S, C]` input window and its optional `[O, C]` target.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesWindow {
    pub x: Tensor,
    pub target: Option<Tensor>,
}

impl SeriesWindow {
    pub fn new(x: Tensor, target: Option<Tensor>) -> Result<Self> {
        if x.rank() != 2 {
            return Err(NstError::dim("SeriesWindow", x.shape(), &[]));
        }
        check_finite(&x)?;
        if let Some(t) = &target {
            if t.rank() != 2 || t.cols() != x.cols() {
                return Err(NstError::dim("SeriesWindow target", x.shape(), t.shape()));
            }
            check_finite(t)?;
        }
        Ok(Self { x, target })
    }

    pub fn seq_len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.x.shape()[1]
    }
}

fn check_finite(t: &Tensor) -> Result<()> {
    let c = t.cols().max(1);
    match t.data().iter().position(|v| !v.is_finite()) {
        Some(k) => Err(NstError::NonFinite {
            row: k / c,
            col: k % c,
        }),
        None => Ok(()),
    }
}

/// Per-variable window mean and floored standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct StationaryStats {
    pub mu: Tensor,
    pub sigma: Tensor,
}

/// Model-space prediction `y'` and its de-normalised counterpart `y_hat`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastBatch {
    pub y_prime: Tensor,
    pub y_hat: Tensor,
}

impl ForecastBatch {
    pub fn pred_len(&self) -> usize {
        self.y_hat.shape()[0]
    }
}

/// Graph handles for the statistics of one window.
#[derive(Clone, Copy, Debug)]
pub struct StatVars {
    pub mu: Var,
    pub sigma: Var,
}

impl StatVars {
    pub fn to_stats(self, g: &Graph) -> StationaryStats {
        StationaryStats {
            mu: g.value(self.mu).clone(),
            sigma: g.value(self.sigma).clone(),
        }
    }
}

/// Differentiable normalisation of an `[S, C]` window recorded on `g`.
///
/// Returns the normalised window and the statistics actually used, with
/// `sigma` already floored at `epsilon`.
pub fn normalize_var(g: &mut Graph, x: Var, epsilon: f64) -> Result<(Var, StatVars)> {
    if !(epsilon > 0.0) {
        return Err(NstError::Config(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let shape = g.shape(x);
    if shape.len() != 2 {
        return Err(NstError::dim("normalize", shape, &[]));
    }
    match shape[0] {
        0 => return Err(NstError::EmptyWindow("normalize")),
        1 => {
            return Err(NstError::Precondition(
                "normalization needs at least two time steps".into(),
            ))
        }
        _ => {}
    }
    check_finite(g.value(x))?;
    let (mu, sd) = g.reduce_mean_std(x)?;
    let sigma = g.clamp_min(sd, epsilon);
    let centred = g.sub(x, mu)?;
    let normed = g.div(centred, sigma)?;
    Ok((normed, StatVars { mu, sigma }))
}

pub fn denormalize_var(g: &mut Graph, y: Var, stats: StatVars, mode: DenormMode) -> Result<Var> {
    let c = g.shape(stats.mu)[0];
    let ys = g.shape(y);
    if ys.len() != 2 || ys[1] != c {
        return Err(NstError::dim("denormalize", ys, &[c]));
    }
    match mode {
        DenormMode::Inverse => {
            let scaled = g.mul(y, stats.sigma)?;
            g.add(scaled, stats.mu)
        }
        DenormMode::Literal => {
            let shifted = g.add(y, stats.mu)?;
            g.mul(shifted, stats.sigma)
        }
    }
}

/// Normalises `window.x` with its own statistics.
pub fn normalize(window: &SeriesWindow, epsilon: f64) -> Result<(Tensor, StationaryStats)> {
    let mut g = Graph::new();
    let x = g.constant(window.x.clone());
    let (n, stats) = normalize_var(&mut g, x, epsilon)?;
    Ok((g.value(n).clone(), stats.to_stats(&g)))
}

pub fn denormalize(y_prime: &Tensor, stats: &StationaryStats, mode: DenormMode) -> Result<Tensor> {
    if stats.mu.shape() != stats.sigma.shape() {
        return Err(NstError::dim(
            "denormalize",
            stats.mu.shape(),
            stats.sigma.shape(),
        ));
    }
    let mut g = Graph::new();
    let y = g.constant(y_prime.clone());
    let sv = StatVars {
        mu: g.constant(stats.mu.clone()),
        sigma: g.constant(stats.sigma.clone()),
    };
    let out = denormalize_var(&mut g, y, sv, mode)?;
    Ok(g.value(out).clone())
}

/// Runs `base_forward` on the normalised window and de-normalises its output
/// with the window's own statistics.
pub fn wrap_model<F>(
    base_forward: F,
    window: &SeriesWindow,
    epsilon: f64,
    mode: DenormMode,
) -> Result<ForecastBatch>
where
    F: FnOnce(&Tensor) -> Result<Tensor>,
{
    let (normed, stats) = normalize(window, epsilon)?;
    let y_prime = base_forward(&normed)?;
    let y_hat = denormalize(&y_prime, &stats, mode)?;
    Ok(ForecastBatch { y_prime, y_hat })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> SeriesWindow {
        let rows: Vec<[f64; 1]> = v.iter().map(|&x| [x]).collect();
        SeriesWindow::new(Tensor::from_rows(&rows).unwrap(), None).unwrap()
    }

    #[test]
    fn one_two_three() {
        // reference values: mu = 2, sigma = sqrt(2/3), x' = (x - 2) / sigma
        let (n, s) = normalize(&col(&[1.0, 2.0, 3.0]), 1e-5).unwrap();
        assert_eq!(s.mu.data(), &[2.0]);
        assert!((s.sigma.item() - 0.816_496_580_927_726).abs() < 1e-12);
        let expect = [-1.224_744_871_391_589, 0.0, 1.224_744_871_391_589];
        for (a, b) in n.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_column_is_floored() {
        let (n, s) = normalize(&col(&[5.0, 5.0, 5.0]), 1e-5).unwrap();
        assert_eq!(n.data(), &[0.0, 0.0, 0.0]);
        assert_eq!(s.mu.item(), 5.0);
        assert_eq!(s.sigma.item(), 1e-5);
    }

    #[test]
    fn standardized_column_is_fixed_point() {
        let v = [-1.0, 1.0, -1.0, 1.0];
        let (n, s) = normalize(&col(&v), 1e-5).unwrap();
        assert!(n.data().iter().zip(v).all(|(a, b)| (a - b).abs() < 1e-9));
        assert_eq!((s.mu.item(), s.sigma.item()), (0.0, 1.0));
    }

    #[test]
    fn non_finite_input_reports_location() {
        let x = Tensor::from_rows(&[[1.0, 2.0], [3.0, f64::NAN]]).unwrap();
        match SeriesWindow::new(x, None) {
            Err(NstError::NonFinite { row, col }) => assert_eq!((row, col), (1, 1)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn short_windows_rejected() {
        let w = col(&[1.0]);
        assert!(matches!(
            normalize(&w, 1e-5),
            Err(NstError::Precondition(_))
        ));
    }

    #[test]
    fn literal_denormalization_of_zero() {
        let stats = StationaryStats {
            mu: Tensor::vector(vec![2.0]),
            sigma: Tensor::vector(vec![3.0]),
        };
        let y = denormalize(&Tensor::zeros([4, 1]), &stats, DenormMode::Literal).unwrap();
        assert!(y.data().iter().all(|&v| v == 6.0));
        let y = denormalize(&Tensor::zeros([4, 1]), &stats, DenormMode::Inverse).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn identity_statistics() {
        let stats = StationaryStats {
            mu: Tensor::vector(vec![0.0, 0.0]),
            sigma: Tensor::vector(vec![1.0, 1.0]),
        };
        let y = Tensor::from_rows(&[[0.3, -1.0], [2.0, 4.0]]).unwrap();
        for mode in [DenormMode::Inverse, DenormMode::Literal] {
            assert_eq!(denormalize(&y, &stats, mode).unwrap(), y);
        }
    }

    #[test]
    fn denormalize_shape_mismatch() {
        let stats = StationaryStats {
            mu: Tensor::vector(vec![0.0]),
            sigma: Tensor::vector(vec![1.0]),
        };
        assert!(denormalize(&Tensor::zeros([2, 3]), &stats, DenormMode::Inverse).is_err());
    }

    #[test]
    fn wrap_with_zero_model_literal() {
        let w = col(&[1.0, 2.0, 3.0]);
        let out = wrap_model(|_| Ok(Tensor::zeros([2, 1])), &w, 1e-5, DenormMode::Literal).unwrap();
        let sigma = (2.0f64 / 3.0).sqrt();
        for v in out.y_hat.data() {
            assert!((v - sigma * 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn wrap_with_copy_model_on_standard_input() {
        let x = Tensor::from_rows(&[[1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [-1.0, 1.0]]).unwrap();
        let w = SeriesWindow::new(x.clone(), None).unwrap();
        let out = wrap_model(|n| n.slice(0, 2, 2), &w, 1e-5, DenormMode::Inverse).unwrap();
        assert!(out.y_hat.max_abs_diff(&x.slice(0, 2, 2).unwrap()) < 1e-12);
        assert_eq!(out.y_prime, out.y_hat);
    }
}
