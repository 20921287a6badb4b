use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{NstError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Sinusoid plus linear trend, scaled by a piecewise-constant deviation.
    #[default]
    TrendSeasonal,
    /// AR(1) noise whose level and scale jump between regimes.
    RegimeScale,
    /// Driftless AR(1).
    Ar1,
    RandomWalk,
    WhiteNoise,
}

/// Parameters for every generator; each kind reads the fields it needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub length: usize,
    pub channels: usize,
    pub seed: u64,
    /// Seasonal period in steps.
    pub period: f64,
    pub amplitude: f64,
    /// Trend increment per step.
    pub slope: f64,
    /// Standard deviation of the innovation noise.
    pub noise: f64,
    /// Number of equal-length regimes.
    pub regimes: usize,
    /// Range of the per-regime scale multiplier.
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Range of the per-regime level (regime_scale only).
    pub level_range: f64,
    /// AR coefficient.
    pub phi: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            kind: SyntheticKind::TrendSeasonal,
            length: 4000,
            channels: 1,
            seed: 0,
            period: 24.0,
            amplitude: 1.0,
            slope: 0.005,
            noise: 0.1,
            regimes: 8,
            sigma_min: 0.5,
            sigma_max: 4.0,
            level_range: 10.0,
            phi: 0.7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(NstError::Config(m.into()));
        if self.length == 0 || self.channels == 0 {
            return fail("synthetic length and channels must be positive");
        }
        if self.noise < 0.0 || !self.noise.is_finite() {
            return fail("synthetic noise must be non-negative");
        }
        match self.kind {
            SyntheticKind::TrendSeasonal | SyntheticKind::RegimeScale => {
                if self.regimes == 0 || self.regimes > self.length {
                    return fail("regimes must lie in 1..=length");
                }
                if !(self.sigma_min > 0.0) || self.sigma_max < self.sigma_min {
                    return fail("need 0 < sigma_min <= sigma_max");
                }
                if self.kind == SyntheticKind::TrendSeasonal && !(self.period > 0.0) {
                    return fail("period must be positive");
                }
            }
            SyntheticKind::Ar1 if self.phi.abs() >= 1.0 => return fail("ar1 needs |phi| < 1"),
            _ => {}
        }
        if self.kind == SyntheticKind::RegimeScale && self.phi.abs() >= 1.0 {
            return fail("regime_scale needs |phi| < 1");
        }
        Ok(())
    }

    fn name(&self) -> &'static str {
        match self.kind {
            SyntheticKind::TrendSeasonal => "trend_seasonal",
            SyntheticKind::RegimeScale => "regime_scale",
            SyntheticKind::Ar1 => "ar1",
            SyntheticKind::RandomWalk => "random_walk",
            SyntheticKind::WhiteNoise => "white_noise",
        }
    }
}

fn regime_of(t: usize, length: usize, regimes: usize) -> usize {
    (t * regimes / length).min(regimes - 1)
}

/// Deterministic series for `spec`. Noise is drawn time-major (all channels
/// of step 0, then step 1, ...), so the AR(1) with `phi = 0` and white noise
/// consume identical draws.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let (t_len, c) = (spec.length, spec.channels);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = vec![0.0; t_len * c];
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

    match spec.kind {
        SyntheticKind::WhiteNoise | SyntheticKind::Ar1 | SyntheticKind::RandomWalk => {
            let phi = match spec.kind {
                SyntheticKind::WhiteNoise => 0.0,
                SyntheticKind::Ar1 => spec.phi,
                _ => 1.0,
            };
            let mut prev = vec![0.0; c];
            for t in 0..t_len {
                for j in 0..c {
                    let e = spec.noise * normal(&mut rng);
                    let v = if t == 0 { e } else { phi * prev[j] + e };
                    prev[j] = v;
                    out[t * c + j] = v;
                }
            }
        }
        SyntheticKind::TrendSeasonal => {
            let phases: Vec<f64> = (0..c)
                .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
                .collect();
            let sigmas: Vec<f64> = (0..spec.regimes * c)
                .map(|_| rng.random_range(spec.sigma_min..=spec.sigma_max))
                .collect();
            for t in 0..t_len {
                let r = regime_of(t, t_len, spec.regimes);
                for j in 0..c {
                    let season = spec.amplitude
                        * (std::f64::consts::TAU * t as f64 / spec.period + phases[j]).sin();
                    let e = spec.noise * normal(&mut rng);
                    out[t * c + j] = spec.slope * t as f64 + sigmas[r * c + j] * (season + e);
                }
            }
        }
        SyntheticKind::RegimeScale => {
            let levels: Vec<f64> = (0..spec.regimes * c)
                .map(|_| rng.random_range(-spec.level_range..=spec.level_range))
                .collect();
            let sigmas: Vec<f64> = (0..spec.regimes * c)
                .map(|_| rng.random_range(spec.sigma_min..=spec.sigma_max))
                .collect();
            let mut prev = vec![0.0; c];
            for t in 0..t_len {
                let r = regime_of(t, t_len, spec.regimes);
                for j in 0..c {
                    let z = spec.phi * prev[j] + spec.noise * normal(&mut rng);
                    prev[j] = z;
                    out[t * c + j] = levels[r * c + j] + sigmas[r * c + j] * z;
                }
            }
        }
    }
    let columns = (0..c).map(|j| format!("x{j}")).collect();
    let mut d = Dataset::new(spec.name(), Tensor::new([t_len, c], out)?, columns)?;
    d.step = Some("synthetic step".into());
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regimes_cover_series() {
        assert_eq!(regime_of(0, 100, 4), 0);
        assert_eq!(regime_of(24, 100, 4), 0);
        assert_eq!(regime_of(25, 100, 4), 1);
        assert_eq!(regime_of(99, 100, 4), 3);
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = SyntheticSpec {
            kind: SyntheticKind::Ar1,
            phi: 1.0,
            ..Default::default()
        };
        assert!(generate_synthetic(&bad).is_err());
        let bad = SyntheticSpec {
            regimes: 0,
            ..Default::default()
        };
        assert!(generate_synthetic(&bad).is_err());
    }
}
