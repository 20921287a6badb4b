//! De-stationary attention and the projector that learns its factors.
//!
//! Attention scores are `(tau * Q'K'^T + 1 delta^T) / sqrt(d_k)` where `Q'`,
//! `K'` come from the stationarised series and `tau > 0`, `delta` (one entry
//! per key position) are learned from the raw window. The same factors are
//! shared by every head and every layer of a model instance.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NstError, Result};
use crate::nn::{Dropout, Linear};
use crate::stationarization::{StatVars, StationaryStats};
use crate::tensor::{BoundParams, Graph, ParameterSet, Tensor, Var};

/// Additive score for masked positions.
pub const MASK_VALUE: f64 = -1e9;

/// Which de-stationary factors enter the score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    #[default]
    Both,
    TauOnly,
    DeltaOnly,
    Vanilla,
}

impl AttentionMode {
    pub fn uses_tau(self) -> bool {
        matches!(self, AttentionMode::Both | AttentionMode::TauOnly)
    }

    pub fn uses_delta(self) -> bool {
        matches!(self, AttentionMode::Both | AttentionMode::DeltaOnly)
    }
}

/// Which window statistic feeds which factor head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorPairing {
    /// `tau` from `sigma_x`, `delta` from `mu_x`.
    #[default]
    Standard,
    /// `tau` from `mu_x`, `delta` from `sigma_x`.
    Swapped,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    /// Per-head feature width.
    pub d_k: usize,
    pub n_heads: usize,
    pub mode: AttentionMode,
    pub causal_mask: bool,
}

impl AttentionConfig {
    pub fn d_model(&self) -> usize {
        self.d_k * self.n_heads
    }
}

/// Concrete factor values for one window.
#[derive(Clone, Debug, PartialEq)]
pub struct DestatFactors {
    pub tau: f64,
    pub delta: Tensor,
}

impl DestatFactors {
    /// `tau = 1`, `delta = 0`: plain scaled dot-product attention.
    pub fn identity(seq_len: usize) -> Self {
        Self {
            tau: 1.0,
            delta: Tensor::zeros([seq_len]),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> Result<FactorVars> {
        if !(self.tau > 0.0) {
            return Err(NstError::Precondition(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        Ok(FactorVars {
            tau: g.constant(Tensor::scalar(self.tau)),
            delta: g.constant(self.delta.clone()),
        })
    }
}

/// Factor handles on a graph: `tau` has shape `[1]`, `delta` shape `[S]`.
#[derive(Clone, Copy, Debug)]
pub struct FactorVars {
    pub tau: Var,
    pub delta: Var,
}

impl FactorVars {
    pub fn values(&self, g: &Graph) -> DestatFactors {
        DestatFactors {
            tau: g.value(self.tau).item(),
            delta: g.value(self.delta).clone(),
        }
    }
}

/// One projector head: a learned temporal reduction of the raw window
/// (`[S, C] -> [C]`), concatenated with a statistic vector and fed to a
/// two-layer perceptron.
#[derive(Clone, Debug)]
pub struct ProjectorHead {
    pub reduce_w: crate::tensor::ParamId,
    pub reduce_b: crate::tensor::ParamId,
    pub hidden: Linear,
    pub output: Linear,
}

impl ProjectorHead {
    fn init<R: Rng>(
        ps: &mut ParameterSet,
        name: &str,
        seq_len: usize,
        channels: usize,
        hidden: usize,
        out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let limit = 1.0 / (seq_len as f64).sqrt();
        let w: Vec<f64> = (0..seq_len)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        let reduce_w = ps.insert(
            format!("{name}.reduce.weight"),
            Tensor::new([1, seq_len], w)?,
        )?;
        let reduce_b = ps.insert(format!("{name}.reduce.bias"), Tensor::zeros([1]))?;
        let hidden = Linear::init(
            ps,
            &format!("{name}.hidden"),
            2 * channels,
            hidden,
            true,
            rng,
        )?;
        let output = Linear::zeros(ps, &format!("{name}.output"), hidden.out_dim, out)?;
        Ok(Self {
            reduce_w,
            reduce_b,
            hidden,
            output,
        })
    }

    fn forward(&self, g: &mut Graph, p: &BoundParams, raw_x: Var, stat: Var) -> Result<Var> {
        let reduced = g.matmul(p.var(self.reduce_w), raw_x)?; // [1, C]
        let reduced = g.add(reduced, p.var(self.reduce_b))?;
        let c = g.shape(stat)[0];
        let stat_row = g.reshape(stat, &[1, c])?;
        let input = g.concat(&[reduced, stat_row], 1)?;
        let h = self.hidden.forward(g, p, input)?;
        let h = g.relu(h);
        let out = self.output.forward(g, p, h)?;
        let n = g.shape(out)[1];
        g.reshape(out, &[n])
    }
}

/// MLP projector producing `log tau` and `delta` from the raw window and its
/// statistics.
#[derive(Clone, Debug)]
pub struct Projector {
    pub tau_head: ProjectorHead,
    pub delta_head: ProjectorHead,
    pub seq_len: usize,
    pub channels: usize,
    pub hidden: usize,
    pub pairing: FactorPairing,
}

impl Projector {
    /// Registers projector parameters under `prefix`. Output layers start at
    /// zero, so a fresh projector yields `tau = 1`, `delta = 0`.
    pub fn init<R: Rng>(
        ps: &mut ParameterSet,
        prefix: &str,
        seq_len: usize,
        channels: usize,
        hidden: usize,
        pairing: FactorPairing,
        rng: &mut R,
    ) -> Result<Self> {
        if seq_len == 0 || channels == 0 || hidden == 0 {
            return Err(NstError::Config(
                "projector dimensions must be positive".into(),
            ));
        }
        let tau_head = ProjectorHead::init(
            ps,
            &format!("{prefix}.tau"),
            seq_len,
            channels,
            hidden,
            1,
            rng,
        )?;
        let delta_head = ProjectorHead::init(
            ps,
            &format!("{prefix}.delta"),
            seq_len,
            channels,
            hidden,
            seq_len,
            rng,
        )?;
        Ok(Self {
            tau_head,
            delta_head,
            seq_len,
            channels,
            hidden,
            pairing,
        })
    }

    /// Differentiable factor projection from the UN-normalised window.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        raw_x: Var,
        stats: StatVars,
    ) -> Result<FactorVars> {
        let shape = g.shape(raw_x);
        if shape != [self.seq_len, self.channels] {
            return Err(NstError::dim(
                "project_factors",
                shape,
                &[self.seq_len, self.channels],
            ));
        }
        let (tau_stat, delta_stat) = match self.pairing {
            FactorPairing::Standard => (stats.sigma, stats.mu),
            FactorPairing::Swapped => (stats.mu, stats.sigma),
        };
        let log_tau = self.tau_head.forward(g, p, raw_x, tau_stat)?;
        let tau = g.exp(log_tau);
        let delta = self.delta_head.forward(g, p, raw_x, delta_stat)?;
        if g.shape(delta) != [self.seq_len] {
            return Err(NstError::Config(format!(
                "delta head emits {:?} values, expected {}",
                g.shape(delta),
                self.seq_len
            )));
        }
        Ok(FactorVars { tau, delta })
    }

    /// Convenience evaluation on concrete tensors.
    pub fn project(
        &self,
        params: &ParameterSet,
        raw_x: &Tensor,
        stats: &StationaryStats,
    ) -> Result<DestatFactors> {
        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g);
        let x = g.constant(raw_x.clone());
        let sv = StatVars {
            mu: g.constant(stats.mu.clone()),
            sigma: g.constant(stats.sigma.clone()),
        };
        Ok(self.forward(&mut g, &p, x, sv)?.values(&g))
    }
}

/// `[Lq, Lk]` additive mask hiding keys after each query position.
pub fn causal_mask(lq: usize, lk: usize) -> Tensor {
    let mut m = Tensor::zeros([lq, lk]);
    for i in 0..lq {
        for j in (i + 1)..lk {
            m.set(i, j, MASK_VALUE);
        }
    }
    m
}

/// Pre-softmax scores `(tau Q K^T + 1 delta^T) / sqrt(d_k)` followed by the
/// additive mask. `q: [.., Lq, d_k]`, `k: [.., Lk, d_k]`.
///
/// `tau` is applied when the mode uses it; `delta` when the mode uses it
/// and `apply_delta` is set.
pub fn destat_scores(
    g: &mut Graph,
    q: Var,
    k: Var,
    factors: Option<FactorVars>,
    mode: AttentionMode,
    apply_delta: bool,
    mask: Option<&Tensor>,
) -> Result<Var> {
    let d_k = *g.shape(q).last().unwrap_or(&0);
    if d_k == 0 {
        return Err(NstError::dim("destat_scores", g.shape(q), g.shape(k)));
    }
    let kt = g.transpose(k)?;
    let mut s = g.matmul(q, kt)?;
    let lk = *g.shape(s).last().expect("rank >= 2");
    if let Some(f) = factors {
        if mode.uses_tau() {
            let tau = g.value(f.tau).item();
            if !(tau > 0.0) {
                return Err(NstError::Precondition(format!(
                    "tau must be positive, got {tau}"
                )));
            }
            s = g.mul(s, f.tau)?;
        }
        if mode.uses_delta() && apply_delta {
            let dl = g.shape(f.delta);
            if dl != [lk] {
                return Err(NstError::dim("destationary_attention delta", dl, &[lk]));
            }
            s = g.add(s, f.delta)?;
        }
    }
    s = g.scale(s, 1.0 / (d_k as f64).sqrt());
    if let Some(m) = mask {
        let mv = g.constant(m.clone());
        s = g.add(s, mv)?;
    }
    Ok(s)
}

/// Attention weights: softmax of [`destat_scores`].
#[allow(clippy::too_many_arguments)]
pub fn destat_weights(
    g: &mut Graph,
    q: Var,
    k: Var,
    factors: Option<FactorVars>,
    mode: AttentionMode,
    apply_delta: bool,
    mask: Option<&Tensor>,
) -> Result<Var> {
    let s = destat_scores(g, q, k, factors, mode, apply_delta, mask)?;
    g.softmax_rows(s)
}

/// `Softmax((tau Q'K'^T + 1 delta^T) / sqrt(d_k)) V'`.
#[allow(clippy::too_many_arguments)]
pub fn destationary_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    factors: Option<FactorVars>,
    mode: AttentionMode,
    apply_delta: bool,
    mask: Option<&Tensor>,
    dropout: &mut Dropout,
) -> Result<Var> {
    let a = destat_weights(g, q, k, factors, mode, apply_delta, mask)?;
    let a = dropout.apply(g, a)?;
    g.matmul(a, v)
}

/// `[L, H * d_k] -> [H, L, d_k]`
pub fn split_heads(g: &mut Graph, x: Var, n_heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 2 || n_heads == 0 || !s[1].is_multiple_of(n_heads) {
        return Err(NstError::Config(format!(
            "cannot split {s:?} into {n_heads} heads"
        )));
    }
    let r = g.reshape(x, &[s[0], n_heads, s[1] / n_heads])?;
    g.permute(r, &[1, 0, 2])
}

/// `[H, L, d_k] -> [L, H * d_k]`
pub fn merge_heads(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let p = g.permute(x, &[1, 0, 2])?;
    g.reshape(p, &[s[1], s[0] * s[2]])
}

/// Multi-head de-stationary attention on already projected `Q'`, `K'`, `V'`
/// (`[L, d_model]`), followed by the output projection. Every head sees the
/// same `tau` and `delta`.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_destat(
    g: &mut Graph,
    p: &BoundParams,
    q: Var,
    k: Var,
    v: Var,
    out_proj: &Linear,
    factors: Option<FactorVars>,
    config: &AttentionConfig,
    apply_delta: bool,
    mask: Option<&Tensor>,
    dropout: &mut Dropout,
) -> Result<Var> {
    let d_model = g.shape(q)[1];
    if d_model != config.d_model() {
        return Err(NstError::Config(format!(
            "d_model {d_model} is not n_heads {} x d_k {}",
            config.n_heads, config.d_k
        )));
    }
    let qh = split_heads(g, q, config.n_heads)?;
    let kh = split_heads(g, k, config.n_heads)?;
    let vh = split_heads(g, v, config.n_heads)?;
    let o = destationary_attention(
        g,
        qh,
        kh,
        vh,
        factors,
        config.mode,
        apply_delta,
        mask,
        dropout,
    )?;
    let merged = merge_heads(g, o)?;
    out_proj.forward(g, p, merged)
}

/// Query/key/value/output projections around [`multi_head_destat`].
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub config: AttentionConfig,
}

impl MultiHeadAttention {
    pub fn init<R: Rng>(
        ps: &mut ParameterSet,
        name: &str,
        config: AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = config.d_model();
        Ok(Self {
            q: Linear::init(ps, &format!("{name}.query"), d, d, true, rng)?,
            k: Linear::init(ps, &format!("{name}.key"), d, d, true, rng)?,
            v: Linear::init(ps, &format!("{name}.value"), d, d, true, rng)?,
            out: Linear::init(ps, &format!("{name}.out"), d, d, true, rng)?,
            config,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        x_q: Var,
        x_kv: Var,
        factors: Option<FactorVars>,
        apply_delta: bool,
        dropout: &mut Dropout,
    ) -> Result<Var> {
        let q = self.q.forward(g, p, x_q)?;
        let k = self.k.forward(g, p, x_kv)?;
        let v = self.v.forward(g, p, x_kv)?;
        let mask = if self.config.causal_mask {
            Some(causal_mask(g.shape(q)[0], g.shape(k)[0]))
        } else {
            None
        };
        multi_head_destat(
            g,
            p,
            q,
            k,
            v,
            &self.out,
            factors,
            &self.config,
            apply_delta,
            mask.as_ref(),
            dropout,
        )
    }
}
