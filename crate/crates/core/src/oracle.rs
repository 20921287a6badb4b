//! Brute-force check that attention on stationarised inputs, rescaled by
//! exact de-stationary factors, reproduces attention on the raw series.
//!
//! With a linear embedding and a scalar window deviation `sigma`, queries and
//! keys of the raw window satisfy `Q = sigma Q' + 1 c_Q^T` and
//! `K = sigma K' + 1 c_K^T`. Expanding `Q K^T` and discarding terms that are
//! constant along each row (softmax ignores them) leaves
//! `sigma^2 Q'K'^T + 1 (K c_Q)^T`, so `tau = sigma^2` and `delta = K c_Q`
//! recover the raw map exactly. In the first layer `c_Q` is the column mean
//! of `Q`; deeper layers carry the offset forward through the attention
//! output because attention rows sum to one.

use rand::Rng;
use serde::Serialize;

use crate::error::{NstError, Result};
use crate::nn::xavier_uniform;
use crate::tensor::Tensor;

/// Default tolerance for map agreement.
pub const DEFAULT_TOLERANCE: f64 = 1e-6;

/// Pointwise map applied after the embedding. `Tanh` deliberately breaks
/// linearity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EmbedActivation {
    #[default]
    Identity,
    Tanh,
}

#[derive(Clone, Debug)]
pub struct ProjectionTriple {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

/// Stack of bias-free linear attention layers on a linear embedding.
#[derive(Clone, Debug)]
pub struct LinearStack {
    /// `[C, d_k]`
    pub embed: Tensor,
    pub layers: Vec<ProjectionTriple>,
    /// Adds the layer input to the attention output (still linear).
    pub residual: bool,
    pub activation: EmbedActivation,
}

impl LinearStack {
    pub fn random<R: Rng>(rng: &mut R, channels: usize, d_k: usize, n_layers: usize) -> Self {
        let embed = xavier_uniform(rng, channels, d_k);
        let layers = (0..n_layers)
            .map(|_| ProjectionTriple {
                wq: xavier_uniform(rng, d_k, d_k),
                wk: xavier_uniform(rng, d_k, d_k),
                wv: xavier_uniform(rng, d_k, d_k),
            })
            .collect();
        Self {
            embed,
            layers,
            residual: false,
            activation: EmbedActivation::Identity,
        }
    }

    pub fn d_k(&self) -> usize {
        self.embed.cols()
    }

    fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let h = x.matmul(&self.embed)?;
        Ok(match self.activation {
            EmbedActivation::Identity => h,
            EmbedActivation::Tanh => h.map(f64::tanh),
        })
    }
}

fn column_means(t: &Tensor) -> Vec<f64> {
    let (s, c) = (t.rows(), t.cols());
    (0..c)
        .map(|j| (0..s).map(|i| t.at(i, j)).sum::<f64>() / s as f64)
        .collect()
}

fn column_stds(t: &Tensor, means: &[f64]) -> Vec<f64> {
    let s = t.rows();
    means
        .iter()
        .enumerate()
        .map(|(j, m)| ((0..s).map(|i| (t.at(i, j) - m).powi(2)).sum::<f64>() / s as f64).sqrt())
        .collect()
}

fn scaled_softmax(scores: Tensor, d_k: usize) -> Result<Tensor> {
    scores.scale(1.0 / (d_k as f64).sqrt()).softmax_rows()
}

/// Rescales each column about its mean to unit population variance, so the
/// window deviation becomes one scalar shared by all variables.
pub fn shared_variance_project(x: &Tensor) -> Result<Tensor> {
    let means = column_means(x);
    let stds = column_stds(x, &means);
    if let Some(j) = stds.iter().position(|&s| !(s > 0.0)) {
        return Err(NstError::Precondition(format!("column {j} is constant")));
    }
    let mut out = x.clone();
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            out.set(i, j, means[j] + (x.at(i, j) - means[j]) / stds[j]);
        }
    }
    Ok(out)
}

/// Window mean vector and the shared scalar deviation.
fn shared_stats(x: &Tensor) -> Result<(Vec<f64>, f64)> {
    let means = column_means(x);
    let stds = column_stds(x, &means);
    let sigma = stds.iter().sum::<f64>() / stds.len() as f64;
    let spread = stds.iter().map(|s| (s - sigma).abs()).fold(0.0, f64::max);
    if !(sigma > 0.0) || spread > 1e-9 * sigma {
        return Err(NstError::Precondition(format!(
            "variables do not share one variance: {stds:?}"
        )));
    }
    Ok((means, sigma))
}

fn normalize_shared(x: &Tensor, means: &[f64], sigma: f64) -> Tensor {
    let mut out = x.clone();
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            out.set(i, j, (x.at(i, j) - means[j]) / sigma);
        }
    }
    out
}

/// Softmax(Q K^T / sqrt(d_k)) of the first layer on the raw window.
pub fn raw_attention_map(stack: &LinearStack, x: &Tensor) -> Result<Tensor> {
    Ok(raw_pass(stack, x)?.swap_remove(0).map)
}

struct RawLayer {
    map: Tensor,
    q: Tensor,
    k: Tensor,
}

fn raw_pass(stack: &LinearStack, x: &Tensor) -> Result<Vec<RawLayer>> {
    if stack.layers.is_empty() {
        return Err(NstError::Config("stack has no layers".into()));
    }
    let d = stack.d_k();
    let mut h = stack.embed(x)?;
    let mut out = Vec::with_capacity(stack.layers.len());
    for l in &stack.layers {
        let q = h.matmul(&l.wq)?;
        let k = h.matmul(&l.wk)?;
        let v = h.matmul(&l.wv)?;
        let map = scaled_softmax(q.matmul(&k.transpose())?, d)?;
        let mut next = map.matmul(&v)?;
        if stack.residual {
            next = next.zip_map(&h, |a, b| a + b)?;
        }
        out.push(RawLayer { map, q, k });
        h = next;
    }
    Ok(out)
}

/// How the shift factor of each layer is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftRule {
    /// `K_l (mu_{Q_l} - sigma mu_{Q'_l})`: exact for every layer.
    Exact,
    /// The first layer's `K_1 mu_{Q_1}` reused by every layer.
    SharedFirst,
    /// `K_l mu_{Q_l}` per layer, the first-layer formula applied verbatim.
    ColumnMean,
}

fn stationary_pass(
    stack: &LinearStack,
    x: &Tensor,
    raw: &[RawLayer],
    rule: ShiftRule,
) -> Result<Vec<f64>> {
    let d = stack.d_k();
    let (means, sigma) = shared_stats(x)?;
    let xn = normalize_shared(x, &means, sigma);
    let mut h = stack.embed(&xn)?;
    let tau = sigma * sigma;
    let first_shift = {
        let mq = column_means(&raw[0].q);
        raw[0].k.matmul(&Tensor::new([d, 1], mq)?)?
    };
    let mut devs = Vec::with_capacity(raw.len());
    for (l, r) in stack.layers.iter().zip(raw) {
        let q = h.matmul(&l.wq)?;
        let k = h.matmul(&l.wk)?;
        let v = h.matmul(&l.wv)?;
        let shift = match rule {
            ShiftRule::SharedFirst => first_shift.clone(),
            ShiftRule::ColumnMean => r.k.matmul(&Tensor::new([d, 1], column_means(&r.q))?)?,
            ShiftRule::Exact => {
                let mq = column_means(&r.q);
                let mqn = column_means(&q);
                let c: Vec<f64> = mq.iter().zip(&mqn).map(|(a, b)| a - sigma * b).collect();
                r.k.matmul(&Tensor::new([d, 1], c)?)?
            }
        };
        let mut scores = q.matmul(&k.transpose())?.scale(tau);
        let s = scores.rows();
        for i in 0..s {
            for j in 0..scores.cols() {
                let v = scores.at(i, j) + shift.data()[j];
                scores.set(i, j, v);
            }
        }
        let map = scaled_softmax(scores, d)?;
        devs.push(map.max_abs_diff(&r.map));
        let mut next = map.matmul(&v)?;
        if stack.residual {
            next = next.zip_map(&h, |a, b| a + b)?;
        }
        h = next;
    }
    Ok(devs)
}

/// First-layer map rebuilt from the stationarised window with
/// `tau = sigma^2` and `delta = K mu_Q`.
pub fn reconstructed_attention_map(stack: &LinearStack, x: &Tensor) -> Result<Tensor> {
    let d = stack.d_k();
    let (means, sigma) = shared_stats(x)?;
    let raw = &raw_pass(stack, x)?[0];
    let xn = normalize_shared(x, &means, sigma);
    let h = stack.embed(&xn)?;
    let l = &stack.layers[0];
    let q = h.matmul(&l.wq)?;
    let k = h.matmul(&l.wk)?;
    let delta = raw.k.matmul(&Tensor::new([d, 1], column_means(&raw.q))?)?;
    let mut scores = q.matmul(&k.transpose())?.scale(sigma * sigma);
    for i in 0..scores.rows() {
        for j in 0..scores.cols() {
            let v = scores.at(i, j) + delta.data()[j];
            scores.set(i, j, v);
        }
    }
    scaled_softmax(scores, d)
}

/// Per-layer deviations between raw and rebuilt maps.
#[derive(Clone, Debug, Serialize)]
pub struct OracleReport {
    /// Exact per-layer shift.
    pub exact: Vec<f64>,
    /// First-layer shift shared by every layer.
    pub shared_first: Vec<f64>,
    /// First-layer formula applied per layer.
    pub column_mean: Vec<f64>,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn multilayer_identity_check(
    stack: &LinearStack,
    x: &Tensor,
    tolerance: f64,
) -> Result<OracleReport> {
    let raw = raw_pass(stack, x)?;
    let exact = stationary_pass(stack, x, &raw, ShiftRule::Exact)?;
    let shared_first = stationary_pass(stack, x, &raw, ShiftRule::SharedFirst)?;
    let column_mean = stationary_pass(stack, x, &raw, ShiftRule::ColumnMean)?;
    let passed = exact.iter().all(|&d| d < tolerance);
    Ok(OracleReport {
        exact,
        shared_first,
        column_mean,
        tolerance,
        passed,
    })
}

/// Residuals of the intermediate algebra on the first layer.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ExpansionCheck {
    /// `Q'K'^T` against the four-term expansion of the raw product.
    pub expansion: f64,
    /// Softmax change from dropping the row-constant terms.
    pub row_constant_drop: f64,
}

pub fn expansion_identity(stack: &LinearStack, x: &Tensor) -> Result<ExpansionCheck> {
    let d = stack.d_k();
    let (means, sigma) = shared_stats(x)?;
    let l = &stack.layers[0];
    let h = stack.embed(x)?;
    let q = h.matmul(&l.wq)?;
    let k = h.matmul(&l.wk)?;
    let hn = stack.embed(&normalize_shared(x, &means, sigma))?;
    let qn = hn.matmul(&l.wq)?;
    let kn = hn.matmul(&l.wk)?;
    let mq = column_means(&q);
    let mk = column_means(&k);
    let (s, dk) = (q.rows(), q.cols());
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mq_mk = dot(&mq, &mk);
    let qk = q.matmul(&k.transpose())?;
    let qnkn = qn.matmul(&kn.transpose())?;

    let mut expansion = 0.0f64;
    let mut full = Tensor::zeros([s, s]);
    let mut kept = Tensor::zeros([s, s]);
    let tau = sigma * sigma;
    for i in 0..s {
        let q_mk = dot(&q.row(i)[..dk], &mk);
        for j in 0..s {
            let mq_k = dot(&mq, &k.row(j)[..dk]);
            let four = (qk.at(i, j) - mq_k - q_mk + mq_mk) / tau;
            expansion = expansion.max((four - qnkn.at(i, j)).abs());
            full.set(i, j, tau * qnkn.at(i, j) + mq_k + q_mk - mq_mk);
            kept.set(i, j, tau * qnkn.at(i, j) + mq_k);
        }
    }
    let drop = scaled_softmax(full, d)?.max_abs_diff(&scaled_softmax(kept, d)?);
    Ok(ExpansionCheck {
        expansion,
        row_constant_drop: drop,
    })
}

/// Sampling ranges for random verification instances.
#[derive(Clone, Debug)]
pub struct InstanceRanges {
    pub seq_len: (usize, usize),
    pub channels: (usize, usize),
    pub d_k: (usize, usize),
    /// Entries of the unscaled window are drawn from `[-v, v]`.
    pub value_range: f64,
    /// Log-uniform range of the multiplier applied after projection.
    pub scale: (f64, f64),
    pub layers: usize,
}

impl Default for InstanceRanges {
    fn default() -> Self {
        Self {
            seq_len: (2, 16),
            channels: (1, 4),
            d_k: (1, 8),
            value_range: 10.0,
            scale: (0.1, 100.0),
            layers: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Instance {
    pub stack: LinearStack,
    pub x: Tensor,
    pub scale: f64,
}

pub fn random_instance<R: Rng>(rng: &mut R, ranges: &InstanceRanges) -> Result<Instance> {
    let s = rng.random_range(ranges.seq_len.0..=ranges.seq_len.1);
    let c = rng.random_range(ranges.channels.0..=ranges.channels.1);
    let d = rng.random_range(ranges.d_k.0..=ranges.d_k.1);
    let v = ranges.value_range;
    let base = loop {
        let data: Vec<f64> = (0..s * c).map(|_| rng.random_range(-v..v)).collect();
        let t = Tensor::new([s, c], data)?;
        if let Ok(p) = shared_variance_project(&t) {
            break p;
        }
    };
    let scale = (rng.random_range(ranges.scale.0.ln()..=ranges.scale.1.ln())).exp();
    let x = base.scale(scale);
    let stack = LinearStack::random(rng, c, d, ranges.layers);
    Ok(Instance { stack, x, scale })
}

#[derive(Clone, Debug, Serialize)]
pub struct InstanceResult {
    pub index: usize,
    pub seq_len: usize,
    pub channels: usize,
    pub d_k: usize,
    pub scale: f64,
    pub deviation: f64,
    pub expansion: f64,
    pub row_constant_drop: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub tolerance: f64,
    pub instances: Vec<InstanceResult>,
    pub max_deviation: f64,
    pub max_expansion: f64,
    pub max_row_constant_drop: f64,
    pub failures: usize,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    pub fn worst(&self) -> Option<&InstanceResult> {
        self.instances
            .iter()
            .max_by(|a, b| a.deviation.total_cmp(&b.deviation))
    }
}

/// Runs the single-layer identity check on `n` random instances.
pub fn verify(n: usize, seed: u64, tolerance: f64) -> Result<VerifyReport> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let ranges = InstanceRanges::default();
    let mut instances = Vec::with_capacity(n);
    for index in 0..n {
        let inst = random_instance(&mut rng, &ranges)?;
        let raw = raw_attention_map(&inst.stack, &inst.x)?;
        let rebuilt = reconstructed_attention_map(&inst.stack, &inst.x)?;
        let deviation = raw.max_abs_diff(&rebuilt);
        let e = expansion_identity(&inst.stack, &inst.x)?;
        instances.push(InstanceResult {
            index,
            seq_len: inst.x.rows(),
            channels: inst.x.cols(),
            d_k: inst.stack.d_k(),
            scale: inst.scale,
            deviation,
            expansion: e.expansion,
            row_constant_drop: e.row_constant_drop,
            passed: deviation < tolerance,
        });
    }
    let fold = |f: fn(&InstanceResult) -> f64| instances.iter().map(f).fold(0.0, f64::max);
    Ok(VerifyReport {
        seed,
        tolerance,
        max_deviation: fold(|r| r.deviation),
        max_expansion: fold(|r| r.expansion),
        max_row_constant_drop: fold(|r| r.row_constant_drop),
        failures: instances.iter().filter(|r| !r.passed).count(),
        instances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_row_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stack = LinearStack::random(&mut rng, 2, 3, 1);
        let m = raw_attention_map(&stack, &Tensor::from_rows(&[[1.0, 2.0]]).unwrap()).unwrap();
        assert_eq!(m.data(), &[1.0]);
    }

    #[test]
    fn identical_rows_give_uniform_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let stack = LinearStack::random(&mut rng, 2, 3, 1);
        let x = Tensor::from_rows(&[[0.5, -1.0]; 4]).unwrap();
        let m = raw_attention_map(&stack, &x).unwrap();
        assert!(m.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn projection_is_idempotent() {
        let x = Tensor::from_rows(&[[1.0, 5.0], [2.0, -3.0], [7.0, 0.5]]).unwrap();
        let p = shared_variance_project(&x).unwrap();
        let means = column_means(&p);
        for s in column_stds(&p, &means) {
            assert!((s * s - 1.0).abs() < 1e-12);
        }
        assert!(shared_variance_project(&p).unwrap().max_abs_diff(&p) < 1e-12);
        let constant = Tensor::from_rows(&[[1.0, 2.0], [1.0, 3.0]]).unwrap();
        assert!(matches!(
            shared_variance_project(&constant),
            Err(NstError::Precondition(_))
        ));
    }

    #[test]
    fn unequal_variances_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let stack = LinearStack::random(&mut rng, 2, 2, 1);
        let x = Tensor::from_rows(&[[0.0, 0.0], [1.0, 3.0]]).unwrap();
        assert!(matches!(
            reconstructed_attention_map(&stack, &x),
            Err(NstError::Precondition(_))
        ));
    }
}
