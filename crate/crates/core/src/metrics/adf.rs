//! Augmented Dickey-Fuller statistic with a constant term.

use serde::Serialize;

use crate::error::{NstError, Result};

/// 95th percentile of the statistic over 500 random walks of length 2000
/// (constant term, 25 lags), computed with an independent reference
/// implementation.
pub const RANDOM_WALK_P95_T2000: f64 = -0.2212284323313035;

/// 5th percentile over 500 white-noise series of length 2000, same setup.
pub const WHITE_NOISE_P05_T2000: f64 = -9.82318732261775;

const MIN_LEN: usize = 20;
const MIN_RESID_DF: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AdfResult {
    /// t-value of the lagged-level coefficient.
    pub statistic: f64,
    pub lag_order: usize,
    pub nobs: usize,
    /// Deterministic terms in the regression; always `"c"`.
    pub regression: &'static str,
}

/// `floor(12 (T/100)^(1/4))`, capped so the regression keeps at least ten
/// residual degrees of freedom.
pub fn schwert_lag(t: usize) -> usize {
    let rule = (12.0 * (t as f64 / 100.0).powf(0.25)).floor() as usize;
    rule.min(max_lag_for(t))
}

fn max_lag_for(t: usize) -> usize {
    // nobs = t - 1 - p, regressors = p + 2
    t.saturating_sub(1 + 2 + MIN_RESID_DF) / 2
}

#[derive(Clone, Debug)]
pub struct OlsFit {
    pub beta: Vec<f64>,
    pub std_err: Vec<f64>,
    pub residuals: Vec<f64>,
    pub rss: f64,
}

/// Least squares for row-major `design` (`n x k`) via equilibrated normal
/// equations, Cholesky, and one step of iterative refinement.
pub fn ols(design: &[Vec<f64>], y: &[f64]) -> Result<OlsFit> {
    let n = design.len();
    let k = design.first().map_or(0, Vec::len);
    if n != y.len() || k == 0 || n <= k {
        return Err(NstError::Precondition(format!(
            "ols needs n > k, got n={n}, k={k}"
        )));
    }
    let mut a = vec![0.0; k * k];
    for row in design {
        for i in 0..k {
            for j in 0..=i {
                a[i * k + j] += row[i] * row[j];
            }
        }
    }
    for i in 0..k {
        for j in 0..i {
            a[j * k + i] = a[i * k + j];
        }
    }
    let mut d = vec![0.0; k];
    for i in 0..k {
        let diag = a[i * k + i];
        if !(diag > 0.0) {
            return Err(NstError::Degenerate(format!(
                "regressor {i} is identically zero"
            )));
        }
        d[i] = 1.0 / diag.sqrt();
    }
    let mut scaled = a.clone();
    for i in 0..k {
        for j in 0..k {
            scaled[i * k + j] *= d[i] * d[j];
        }
    }
    let chol = cholesky(&scaled, k)?;
    let solve = |rhs: &[f64]| -> Vec<f64> {
        let b: Vec<f64> = rhs.iter().zip(&d).map(|(r, s)| r * s).collect();
        let z = chol_solve(&chol, k, &b);
        z.iter().zip(&d).map(|(z, s)| z * s).collect()
    };
    let xty = |r: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; k];
        for (row, &v) in design.iter().zip(r) {
            for j in 0..k {
                out[j] += row[j] * v;
            }
        }
        out
    };
    let residual = |beta: &[f64]| -> Vec<f64> {
        design
            .iter()
            .zip(y)
            .map(|(row, &yi)| yi - row.iter().zip(beta).map(|(x, b)| x * b).sum::<f64>())
            .collect()
    };

    let mut beta = solve(&xty(y));
    let r = residual(&beta);
    let correction = solve(&xty(&r));
    for (b, c) in beta.iter_mut().zip(&correction) {
        *b += c;
    }
    let residuals = residual(&beta);
    let rss: f64 = residuals.iter().map(|e| e * e).sum();
    let s2 = rss / (n - k) as f64;
    let std_err = (0..k)
        .map(|i| {
            let mut e = vec![0.0; k];
            e[i] = 1.0;
            (s2 * solve(&e)[i]).sqrt()
        })
        .collect();
    Ok(OlsFit {
        beta,
        std_err,
        residuals,
        rss,
    })
}

fn cholesky(a: &[f64], k: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..=i {
            let mut s = a[i * k + j];
            for p in 0..j {
                s -= l[i * k + p] * l[j * k + p];
            }
            if i == j {
                // unit diagonal after equilibration, so this is a relative test
                if s <= 1e-12 {
                    return Err(NstError::Degenerate("design matrix is singular".into()));
                }
                l[i * k + i] = s.sqrt();
            } else {
                l[i * k + j] = s / l[j * k + j];
            }
        }
    }
    Ok(l)
}

fn chol_solve(l: &[f64], k: usize, b: &[f64]) -> Vec<f64> {
    let mut z = vec![0.0; k];
    for i in 0..k {
        let mut s = b[i];
        for p in 0..i {
            s -= l[i * k + p] * z[p];
        }
        z[i] = s / l[i * k + i];
    }
    let mut x = vec![0.0; k];
    for i in (0..k).rev() {
        let mut s = z[i];
        for p in i + 1..k {
            s -= l[p * k + i] * x[p];
        }
        x[i] = s / l[i * k + i];
    }
    x
}

/// Regresses `dy_t` on `[y_{t-1}, dy_{t-1}, ..., dy_{t-p}, 1]` and returns
/// the t-value of the `y_{t-1}` coefficient.
pub fn adf_statistic(series: &[f64], max_lag: Option<usize>) -> Result<AdfResult> {
    let t = series.len();
    if t < MIN_LEN {
        return Err(NstError::Precondition(format!(
            "ADF needs at least {MIN_LEN} points, got {t}"
        )));
    }
    if let Some(i) = series.iter().position(|v| !v.is_finite()) {
        return Err(NstError::NonFinite { row: i, col: 0 });
    }
    let p = max_lag
        .unwrap_or_else(|| schwert_lag(t))
        .min(max_lag_for(t));
    let diff: Vec<f64> = series.windows(2).map(|w| w[1] - w[0]).collect();
    let nobs = t - 1 - p;
    let mut design = Vec::with_capacity(nobs);
    let mut target = Vec::with_capacity(nobs);
    // diff[i] = y[i+1] - y[i]; rows use i = p..t-1
    for i in p..diff.len() {
        let mut row = Vec::with_capacity(p + 2);
        row.push(series[i]);
        for lag in 1..=p {
            row.push(diff[i - lag]);
        }
        row.push(1.0);
        design.push(row);
        target.push(diff[i]);
    }
    let fit = ols(&design, &target)?;
    let statistic = fit.beta[0] / fit.std_err[0];
    if !statistic.is_finite() {
        return Err(NstError::Degenerate("ADF statistic is not finite".into()));
    }
    Ok(AdfResult {
        statistic,
        lag_order: p,
        nobs,
        regression: "c",
    })
}
