//! Small parameterised building blocks shared by the projector and the
//! Transformer layers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{BoundParams, Graph, ParamId, ParameterSet, Tensor, Var};

/// Glorot-uniform initialisation for a `[fan_in, fan_out]` matrix.
pub fn xavier_uniform<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Tensor::new([fan_in, fan_out], data).expect("shape matches data")
}

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn init<R: Rng>(
        ps: &mut ParameterSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = ps.insert(
            format!("{name}.weight"),
            xavier_uniform(rng, in_dim, out_dim),
        )?;
        let b = if bias {
            Some(ps.insert(format!("{name}.bias"), Tensor::zeros([out_dim]))?)
        } else {
            None
        };
        Ok(Self {
            w,
            b,
            in_dim,
            out_dim,
        })
    }

    /// A layer whose weight and bias start at exactly zero.
    pub fn zeros(ps: &mut ParameterSet, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let w = ps.insert(format!("{name}.weight"), Tensor::zeros([in_dim, out_dim]))?;
        let b = ps.insert(format!("{name}.bias"), Tensor::zeros([out_dim]))?;
        Ok(Self {
            w,
            b: Some(b),
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        g.linear(x, p.var(self.w), self.b.map(|b| p.var(b)))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn init(ps: &mut ParameterSet, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: ps.insert(format!("{name}.gain"), Tensor::ones([dim]))?,
            bias: ps.insert(format!("{name}.bias"), Tensor::zeros([dim]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gain), p.var(self.bias))
    }
}

/// Dropout source for one forward pass. Without an RNG (evaluation) it is
/// the identity.
#[derive(Debug)]
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn eval() -> Self {
        Self {
            rate: 0.0,
            rng: None,
        }
    }

    pub fn train(rate: f64, rng: ChaCha8Rng) -> Self {
        Self {
            rate,
            rng: Some(rng),
        }
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        match self.rng.as_mut() {
            Some(rng) if self.rate > 0.0 => g.dropout(x, self.rate, rng),
            _ => Ok(x),
        }
    }
}
