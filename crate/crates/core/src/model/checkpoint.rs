//! Plain-text checkpoint format.
//!
//! ```text
//! nst-checkpoint 1
//! config {"seq_len":96,...}
//! param <name> <d0>x<d1>... <v0> <v1> ...
//! ...
//! end
//! ```
//!
//! Values use the shortest decimal form that parses back to the same `f64`,
//! so a save/load cycle is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use super::{ModelConfig, NsTransformer};
use crate::error::{NstError, Result};
use crate::tensor::{ParameterSet, Tensor};

pub const CHECKPOINT_MAGIC: &str = "nst-checkpoint 1";

pub fn checkpoint_to_string(model: &NsTransformer) -> Result<String> {
    let mut out = String::new();
    out.push_str(CHECKPOINT_MAGIC);
    out.push('\n');
    let cfg =
        serde_json::to_string(model.config()).map_err(|e| NstError::Checkpoint(e.to_string()))?;
    writeln!(out, "config {cfg}").expect("string write");
    for (name, t) in model.params().iter() {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        write!(out, "param {name} {}", dims.join("x")).expect("string write");
        for v in t.data() {
            write!(out, " {v}").expect("string write");
        }
        out.push('\n');
    }
    out.push_str("end\n");
    Ok(out)
}

pub fn checkpoint_from_str(text: &str) -> Result<NsTransformer> {
    let bad = |line: usize, msg: &str| NstError::Checkpoint(format!("line {line}: {msg}"));
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l == CHECKPOINT_MAGIC => {}
        _ => return Err(bad(1, "missing `nst-checkpoint 1` header")),
    }
    let config: ModelConfig = match lines.next() {
        Some((n, l)) => {
            let json = l
                .strip_prefix("config ")
                .ok_or_else(|| bad(n, "expected config line"))?;
            serde_json::from_str(json).map_err(|e| bad(n, &e.to_string()))?
        }
        None => return Err(bad(2, "truncated file")),
    };
    let mut params = ParameterSet::new();
    let mut ended = false;
    for (n, line) in lines {
        if line == "end" {
            ended = true;
            break;
        }
        let mut parts = line.split(' ');
        if parts.next() != Some("param") {
            return Err(bad(n, "expected param line"));
        }
        let name = parts.next().ok_or_else(|| bad(n, "missing name"))?;
        let dims = parts.next().ok_or_else(|| bad(n, "missing shape"))?;
        let shape = dims
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad(n, "bad shape"))?;
        let data = parts
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad(n, "bad value"))?;
        let t = Tensor::new(shape, data).map_err(|e| bad(n, &e.to_string()))?;
        params.insert(name, t).map_err(|e| bad(n, &e.to_string()))?;
    }
    if !ended {
        return Err(NstError::Checkpoint("missing `end` marker".into()));
    }
    NsTransformer::from_parts(config, params)
}

pub fn save_checkpoint(model: &NsTransformer, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<NsTransformer> {
    checkpoint_from_str(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            seq_len: 4,
            pred_len: 2,
            channels: 2,
            d_model: 4,
            n_heads: 2,
            e_layers: 1,
            d_layers: 1,
            projector_hidden: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = NsTransformer::new(tiny()).unwrap();
        let text = checkpoint_to_string(&m).unwrap();
        let back = checkpoint_from_str(&text).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.config(), m.config());
    }

    #[test]
    fn corrupt_files_rejected() {
        let m = NsTransformer::new(tiny()).unwrap();
        let text = checkpoint_to_string(&m).unwrap();
        assert!(checkpoint_from_str("garbage").is_err());
        assert!(checkpoint_from_str(text.trim_end_matches("end\n")).is_err());
        let broken = text.replacen("param head.bias 2", "param head.bias 3", 1);
        assert!(checkpoint_from_str(&broken).is_err());
    }
}
