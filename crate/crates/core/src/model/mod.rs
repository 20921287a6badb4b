//! Encoder-decoder forecaster wrapped by series stationarization, with
//! de-stationary attention in every attention block.

mod checkpoint;

pub use checkpoint::{
    checkpoint_from_str, checkpoint_to_string, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::DestatFactors;
use crate::attention::{
    AttentionConfig, AttentionMode, FactorPairing, FactorVars, MultiHeadAttention, Projector,
};
use crate::error::{NstError, Result};
use crate::nn::{Dropout, LayerNorm, Linear};
use crate::stationarization::{
    denormalize_var, normalize_var, DenormMode, ForecastBatch, SeriesWindow, StatVars,
    StationaryStats, DEFAULT_EPSILON,
};
use crate::tensor::{BoundParams, Graph, ParameterSet, Tensor, Var};

/// Prefix under which projector parameters are registered.
pub const PROJECTOR_PREFIX: &str = "projector";

const PROJECTOR_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;

/// The ablation grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Plain Transformer on raw windows.
    Vanilla,
    /// Normalised inputs, de-normalised outputs, plain attention.
    Stationarized,
    TauOnly,
    DeltaOnly,
    #[default]
    Both,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Vanilla,
        Variant::Stationarized,
        Variant::TauOnly,
        Variant::DeltaOnly,
        Variant::Both,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::Stationarized => "stationarized",
            Variant::TauOnly => "tau_only",
            Variant::DeltaOnly => "delta_only",
            Variant::Both => "both",
        }
    }

    pub fn stationarizes(self) -> bool {
        self != Variant::Vanilla
    }

    pub fn has_projector(self) -> bool {
        matches!(self, Variant::TauOnly | Variant::DeltaOnly | Variant::Both)
    }

    pub fn attention_mode(self) -> AttentionMode {
        match self {
            Variant::Vanilla | Variant::Stationarized => AttentionMode::Vanilla,
            Variant::TauOnly => AttentionMode::TauOnly,
            Variant::DeltaOnly => AttentionMode::DeltaOnly,
            Variant::Both => AttentionMode::Both,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = NstError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| NstError::Config(format!("unknown variant `{s}`")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub seq_len: usize,
    pub pred_len: usize,
    pub channels: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub e_layers: usize,
    pub d_layers: usize,
    /// Feed-forward width; `None` means `4 * d_model`.
    pub d_ff: Option<usize>,
    pub projector_hidden: usize,
    pub epsilon: f64,
    pub dropout: f64,
    pub variant: Variant,
    pub pairing: FactorPairing,
    pub denorm: DenormMode,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seq_len: 96,
            pred_len: 96,
            channels: 7,
            d_model: 512,
            n_heads: 8,
            e_layers: 2,
            d_layers: 1,
            d_ff: None,
            projector_hidden: 128,
            epsilon: DEFAULT_EPSILON,
            dropout: 0.05,
            variant: Variant::Both,
            pairing: FactorPairing::Standard,
            denorm: DenormMode::Inverse,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Decoder warm-start length.
    pub fn label_len(&self) -> usize {
        self.seq_len / 2
    }

    pub fn ffn_width(&self) -> usize {
        self.d_ff.unwrap_or(4 * self.d_model)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Full validation for runnable configurations.
    pub fn validate(&self) -> Result<()> {
        self.validate_shapes()?;
        if self.e_layers == 0 || self.d_layers == 0 {
            return Err(NstError::Config(
                "e_layers and d_layers must be at least 1".into(),
            ));
        }
        if self.pred_len == 0 {
            return Err(NstError::Config("pred_len must be at least 1".into()));
        }
        Ok(())
    }

    /// Shape checks only; zero layer counts are accepted so degenerate
    /// models can be built for inspection.
    pub fn validate_shapes(&self) -> Result<()> {
        let fail = |m: String| Err(NstError::Config(m));
        if self.seq_len < 2 || !self.seq_len.is_multiple_of(2) {
            return fail(format!(
                "seq_len must be even and >= 2, got {}",
                self.seq_len
            ));
        }
        if self.channels == 0 {
            return fail("channels must be at least 1".into());
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.ffn_width() == 0 || self.projector_hidden == 0 {
            return fail("d_ff and projector_hidden must be positive".into());
        }
        if !(self.epsilon > 0.0) {
            return fail(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}

/// `concat(x'[S/2..S], zeros(O, C))`.
pub fn build_decoder_input(x_norm: &Tensor, pred_len: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(x_norm.clone());
    let d = decoder_input_var(&mut g, x, pred_len)?;
    Ok(g.value(d).clone())
}

fn decoder_input_var(g: &mut Graph, x: Var, pred_len: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 || !shape[0].is_multiple_of(2) {
        return Err(NstError::Config(format!(
            "decoder input needs an even-length [S, C] window, got {shape:?}"
        )));
    }
    let (s, c) = (shape[0], shape[1]);
    let tail = g.slice(x, 0, s / 2, s / 2)?;
    if pred_len == 0 {
        return Ok(tail);
    }
    let zeros = g.constant(Tensor::zeros([pred_len, c]));
    g.concat(&[tail, zeros], 0)
}

/// Fixed sinusoidal position table `[len, d]`.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros([len, d]);
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64 * 2.0;
            let angle = pos as f64 / 10000f64.powf(pair / d as f64);
            t.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    fn init(
        ps: &mut ParameterSet,
        name: &str,
        d: usize,
        width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            up: Linear::init(ps, &format!("{name}.up"), d, width, true, rng)?,
            down: Linear::init(ps, &format!("{name}.down"), width, d, true, rng)?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        x: Var,
        dropout: &mut Dropout,
    ) -> Result<Var> {
        let h = self.up.forward(g, p, x)?;
        let h = g.gelu(h);
        let h = dropout.apply(g, h)?;
        let y = self.down.forward(g, p, h)?;
        dropout.apply(g, y)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        x: Var,
        factors: Option<FactorVars>,
        dropout: &mut Dropout,
    ) -> Result<Var> {
        let a = self.attn.forward(g, p, x, x, factors, true, dropout)?;
        let h = g.add(x, a)?;
        let h = self.norm1.forward(g, p, h)?;
        let f = self.ffn.forward(g, p, h, dropout)?;
        let o = g.add(h, f)?;
        self.norm2.forward(g, p, o)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    /// Causal self-attention; the shift factor is never applied here.
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        x: Var,
        memory: Var,
        factors: Option<FactorVars>,
        dropout: &mut Dropout,
    ) -> Result<Var> {
        let a = self
            .self_attn
            .forward(g, p, x, x, factors, false, dropout)?;
        let h = g.add(x, a)?;
        let h = self.norm1.forward(g, p, h)?;
        let c = self
            .cross_attn
            .forward(g, p, h, memory, factors, true, dropout)?;
        let h2 = g.add(h, c)?;
        let h2 = self.norm2.forward(g, p, h2)?;
        let f = self.ffn.forward(g, p, h2, dropout)?;
        let o = g.add(h2, f)?;
        self.norm3.forward(g, p, o)
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// Model-space prediction `[O, C]`.
    pub y_prime: Var,
    /// Prediction on the original scale `[O, C]`.
    pub y_hat: Var,
    pub stats: Option<StatVars>,
    pub factors: Option<FactorVars>,
}

/// Concrete forward results with the intermediate statistics and factors.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub batch: ForecastBatch,
    pub stats: Option<StationaryStats>,
    pub factors: Option<DestatFactors>,
}

#[derive(Clone, Debug)]
pub struct NsTransformer {
    config: ModelConfig,
    params: ParameterSet,
    pub enc_embed: Linear,
    pub dec_embed: Linear,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub head: Linear,
    pub projector: Option<Projector>,
    enc_pe: Tensor,
    dec_pe: Tensor,
}

impl NsTransformer {
    /// Builds a freshly initialised model. Base parameters are drawn from a
    /// stream seeded by `config.seed`; projector parameters come from a
    /// separate stream, so every variant with the same seed shares the same
    /// base weights.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate_shapes()?;
        let mut ps = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let c = config.channels;
        let attn_cfg = |causal| AttentionConfig {
            d_k: config.head_dim(),
            n_heads: config.n_heads,
            mode: config.variant.attention_mode(),
            causal_mask: causal,
        };

        let enc_embed = Linear::init(&mut ps, "encoder.embed", c, d, false, &mut rng)?;
        let dec_embed = Linear::init(&mut ps, "decoder.embed", c, d, false, &mut rng)?;
        let mut encoder = Vec::with_capacity(config.e_layers);
        for i in 0..config.e_layers {
            let n = format!("encoder.layer{i}");
            encoder.push(EncoderLayer {
                attn: MultiHeadAttention::init(
                    &mut ps,
                    &format!("{n}.attn"),
                    attn_cfg(false),
                    &mut rng,
                )?,
                norm1: LayerNorm::init(&mut ps, &format!("{n}.norm1"), d)?,
                ffn: FeedForward::init(
                    &mut ps,
                    &format!("{n}.ffn"),
                    d,
                    config.ffn_width(),
                    &mut rng,
                )?,
                norm2: LayerNorm::init(&mut ps, &format!("{n}.norm2"), d)?,
            });
        }
        let mut decoder = Vec::with_capacity(config.d_layers);
        for i in 0..config.d_layers {
            let n = format!("decoder.layer{i}");
            decoder.push(DecoderLayer {
                self_attn: MultiHeadAttention::init(
                    &mut ps,
                    &format!("{n}.self_attn"),
                    attn_cfg(true),
                    &mut rng,
                )?,
                norm1: LayerNorm::init(&mut ps, &format!("{n}.norm1"), d)?,
                cross_attn: MultiHeadAttention::init(
                    &mut ps,
                    &format!("{n}.cross_attn"),
                    attn_cfg(false),
                    &mut rng,
                )?,
                norm2: LayerNorm::init(&mut ps, &format!("{n}.norm2"), d)?,
                ffn: FeedForward::init(
                    &mut ps,
                    &format!("{n}.ffn"),
                    d,
                    config.ffn_width(),
                    &mut rng,
                )?,
                norm3: LayerNorm::init(&mut ps, &format!("{n}.norm3"), d)?,
            });
        }
        let head = Linear::init(&mut ps, "head", d, c, true, &mut rng)?;

        let projector = if config.variant.has_projector() {
            let mut prng = ChaCha8Rng::seed_from_u64(config.seed ^ PROJECTOR_STREAM);
            Some(Projector::init(
                &mut ps,
                PROJECTOR_PREFIX,
                config.seq_len,
                c,
                config.projector_hidden,
                config.pairing,
                &mut prng,
            )?)
        } else {
            None
        };

        let enc_pe = positional_encoding(config.seq_len, d);
        let dec_pe = positional_encoding(config.label_len() + config.pred_len, d);
        Ok(Self {
            config,
            params: ps,
            enc_embed,
            dec_embed,
            encoder,
            decoder,
            head,
            projector,
            enc_pe,
            dec_pe,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    /// `(base_count, projector_count)` scalar parameter counts.
    pub fn count_parameters(&self) -> (usize, usize) {
        let proj = self
            .params
            .count_with_prefix(&format!("{PROJECTOR_PREFIX}."));
        (self.params.count() - proj, proj)
    }

    /// Sets every projector output layer to zero, so the factors become
    /// `tau = 1`, `delta = 0`.
    pub fn zero_projector_outputs(&mut self) {
        if let Some(p) = &self.projector {
            for lin in [&p.tau_head.output, &p.delta_head.output] {
                for id in std::iter::once(lin.w).chain(lin.b) {
                    self.params.get_mut(id).data_mut().fill(0.0);
                }
            }
        }
    }

    /// Records the forward pass for a raw `[S, C]` window on `g`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        x: Var,
        dropout: &mut Dropout,
    ) -> Result<ForwardVars> {
        let cfg = &self.config;
        let shape = g.shape(x);
        if shape != [cfg.seq_len, cfg.channels] {
            return Err(NstError::dim(
                "model input",
                shape,
                &[cfg.seq_len, cfg.channels],
            ));
        }
        let (x_in, stats) = if cfg.variant.stationarizes() {
            let (n, s) = normalize_var(g, x, cfg.epsilon)?;
            (n, Some(s))
        } else {
            (x, None)
        };
        let factors = match (&self.projector, stats) {
            (Some(proj), Some(s)) => Some(
                proj.forward(g, p, x, s)
                    .map_err(|e| e.in_layer("projector"))?,
            ),
            _ => None,
        };

        let enc_pe = g.constant(self.enc_pe.clone());
        let e = self.enc_embed.forward(g, p, x_in)?;
        let mut h = g.add(e, enc_pe)?;
        for (i, layer) in self.encoder.iter().enumerate() {
            h = layer
                .forward(g, p, h, factors, dropout)
                .map_err(|e| e.in_layer(format!("encoder layer {i}")))?;
        }

        let dec_in = decoder_input_var(g, x_in, cfg.pred_len)?;
        let dec_pe = g.constant(self.dec_pe.clone());
        let e = self.dec_embed.forward(g, p, dec_in)?;
        let mut d = g.add(e, dec_pe)?;
        for (i, layer) in self.decoder.iter().enumerate() {
            d = layer
                .forward(g, p, d, h, factors, dropout)
                .map_err(|e| e.in_layer(format!("decoder layer {i}")))?;
        }

        let out = self.head.forward(g, p, d)?;
        let y_prime = g.slice(out, 0, cfg.label_len(), cfg.pred_len)?;
        let y_hat = match stats {
            Some(s) => denormalize_var(g, y_prime, s, cfg.denorm)?,
            None => y_prime,
        };
        Ok(ForwardVars {
            y_prime,
            y_hat,
            stats,
            factors,
        })
    }

    /// Evaluation-mode forward (no dropout, no gradients).
    pub fn forward(&self, window: &SeriesWindow) -> Result<ForecastBatch> {
        Ok(self.forward_trace(window)?.batch)
    }

    pub fn forward_trace(&self, window: &SeriesWindow) -> Result<ForwardTrace> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.constant(window.x.clone());
        let out = self.forward_graph(&mut g, &p, x, &mut Dropout::eval())?;
        Ok(ForwardTrace {
            batch: ForecastBatch {
                y_prime: g.value(out.y_prime).clone(),
                y_hat: g.value(out.y_hat).clone(),
            },
            stats: out.stats.map(|s| s.to_stats(&g)),
            factors: out.factors.map(|f| f.values(&g)),
        })
    }

    pub(crate) fn from_parts(config: ModelConfig, params: ParameterSet) -> Result<Self> {
        let mut m = Self::new(config)?;
        if params.len() != m.params.len() {
            return Err(NstError::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                m.params.len(),
                params.len()
            )));
        }
        for (name, value) in params.iter() {
            let id = m
                .params
                .id_of(name)
                .ok_or_else(|| NstError::Checkpoint(format!("unexpected parameter {name}")))?;
            let slot = m.params.get_mut(id);
            if slot.shape() != value.shape() {
                return Err(NstError::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value.clone();
        }
        Ok(m)
    }
}
