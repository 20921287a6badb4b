//! Declarative run configuration, read from TOML.
//!
//! ```toml
//! version = 1
//! output_dir = "runs/etth1"
//!
//! [data]
//! source = "csv"            # or "synthetic"
//! csv_path = "ETTh1.csv"
//! missing = "strict"        # or "forward_fill"
//! split = { train = 7, val = 2, test = 2 }
//!
//! [data.synthetic]          # used when source = "synthetic"
//! kind = "trend_seasonal"
//! length = 4000
//!
//! [model]                   # any ModelConfig field
//! seq_len = 96
//! pred_len = 96
//! channels = 7
//!
//! [train]                   # any TrainConfig field
//! epochs = 10
//! ```

use std::path::{Path, PathBuf};

use nst_core::data::{
    generate_synthetic, load_csv, make_windows, CsvOptions, Dataset, MissingPolicy, SplitSpec,
    SplitWindows, SyntheticSpec,
};
use nst_core::model::ModelConfig;
use nst_core::training::TrainConfig;
use nst_core::NstError;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Csv,
    #[default]
    Synthetic,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub csv_path: Option<PathBuf>,
    pub missing: MissingPolicy,
    pub split: SplitSpec,
    /// Distance between consecutive window starts.
    pub stride: Option<usize>,
    pub synthetic: SyntheticSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

/// Parses `text`, applies `key=value` overrides and validates the result.
/// Relative paths are resolved against `base`.
pub fn parse_run_config(
    text: &str,
    overrides: &[String],
    base: &Path,
) -> Result<RunConfig, CliError> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let mut cfg: RunConfig =
        RunConfig::deserialize(table).map_err(|e| CliError::Config(e.to_string()))?;
    if cfg.version != CONFIG_VERSION {
        return Err(CliError::Config(format!(
            "version: unsupported config version {}, expected {CONFIG_VERSION}",
            cfg.version
        )));
    }
    if cfg.output_dir.is_relative() {
        cfg.output_dir = base.join(&cfg.output_dir);
    }
    if let Some(p) = &cfg.data.csv_path {
        if p.is_relative() {
            cfg.data.csv_path = Some(base.join(p));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_run_config(path: &Path, overrides: &[String]) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_run_config(&text, overrides, base).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Sets a dotted key such as `train.epochs=3`. The value is read as a TOML
/// value when possible and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!(
            "override key {key:?} is malformed"
        )));
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {key}: {part} is not a table")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn config_err(e: NstError, field: &str) -> CliError {
    match e {
        NstError::Config(m) => CliError::Config(format!("{field}: {m}")),
        other => CliError::Config(format!("{field}: {other}")),
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(|e| config_err(e, "model"))?;
        self.model
            .validate_shapes()
            .map_err(|e| config_err(e, "model"))?;
        self.train.validate().map_err(|e| config_err(e, "train"))?;
        self.data
            .split
            .validate()
            .map_err(|e| config_err(e, "data.split"))?;
        if self.data.stride == Some(0) {
            return Err(CliError::Config("data.stride: must be at least 1".into()));
        }
        match self.data.source {
            DataSource::Csv => {
                let path = self.data.csv_path.as_ref().ok_or_else(|| {
                    CliError::Config("data.csv_path: required when data.source = \"csv\"".into())
                })?;
                if !path.is_file() {
                    return Err(CliError::Config(format!(
                        "data.csv_path: {} does not exist",
                        path.display()
                    )));
                }
            }
            DataSource::Synthetic => {
                self.data
                    .synthetic
                    .validate()
                    .map_err(|e| config_err(e, "data.synthetic"))?;
                if self.data.synthetic.channels != self.model.channels {
                    return Err(CliError::Config(format!(
                        "model.channels: {} does not match data.synthetic.channels {}",
                        self.model.channels, self.data.synthetic.channels
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<Dataset, CliError> {
        let dataset = match self.data.source {
            DataSource::Csv => {
                let path = self.data.csv_path.as_ref().expect("validated");
                load_csv(
                    path,
                    &CsvOptions {
                        missing: self.data.missing,
                    },
                )?
            }
            DataSource::Synthetic => generate_synthetic(&self.data.synthetic)?,
        };
        if dataset.channels() != self.model.channels {
            return Err(CliError::Config(format!(
                "model.channels: {} does not match the {} columns of the dataset",
                self.model.channels,
                dataset.channels()
            )));
        }
        Ok(dataset)
    }

    pub fn windows(&self, dataset: &Dataset) -> Result<SplitWindows, CliError> {
        Ok(make_windows(
            dataset,
            &self.data.split,
            self.model.seq_len,
            self.model.pred_len,
            self.data.stride.unwrap_or(1),
        )?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "version = 1\noutput_dir = \"out\"\n[model]\nchannels = 1\n";

    #[test]
    fn defaults_fill_missing_sections() {
        let cfg = parse_run_config(MINIMAL, &[], Path::new("/tmp")).unwrap();
        assert_eq!(cfg.output_dir, PathBuf::from("/tmp/out"));
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.data.source, DataSource::Synthetic);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let over = vec![
            "train.epochs=3".to_string(),
            "model.variant=vanilla".into(),
            "data.synthetic.kind=ar1".into(),
        ];
        let cfg = parse_run_config(MINIMAL, &over, Path::new(".")).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.model.variant.name(), "vanilla");
        assert_eq!(cfg.data.synthetic.kind, nst_core::data::SyntheticKind::Ar1);
    }

    #[test]
    fn unknown_field_is_named() {
        let err =
            parse_run_config(&format!("{MINIMAL}epohcs = 3\n"), &[], Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("epohcs"), "{err}");
    }

    #[test]
    fn missing_csv_path_is_named() {
        let text = "version = 1\noutput_dir = \"o\"\n[data]\nsource = \"csv\"\n";
        let err = parse_run_config(text, &[], Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("data.csv_path"), "{err}");
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = parse_run_config(MINIMAL, &[], Path::new("/r")).unwrap();
        let again = parse_run_config(&cfg.to_toml(), &[], Path::new("/elsewhere")).unwrap();
        assert_eq!(cfg, again);
    }
}
