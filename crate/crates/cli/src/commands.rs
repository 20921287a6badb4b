use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use nst_core::data::{load_csv, write_csv, CsvOptions, MissingPolicy, SyntheticSpec};
use nst_core::metrics::{dataset_adf, EvalReport};
use nst_core::model::{load_checkpoint, NsTransformer, Variant};
use nst_core::oracle;
use nst_core::training::{ablate, evaluate, train, TrainHistory, ABLATION_HEADER};
use serde::Deserialize;

use crate::config::{apply_override, load_run_config};
use crate::CliError;

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const EVAL_TABLE_FILE: &str = "eval.csv";
pub const EVAL_KV_FILE: &str = "eval.txt";
pub const ABLATION_FILE: &str = "ablation.csv";

/// Refuses to touch existing outputs unless `force` is set.
fn claim_outputs(dir: &Path, files: &[&str], force: bool) -> Result<(), CliError> {
    if !force {
        for f in files {
            let p = dir.join(f);
            if p.exists() {
                return Err(CliError::Config(format!(
                    "output_dir: {} already exists; pass --force to overwrite",
                    p.display()
                )));
            }
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

pub fn cmd_train(config: &Path, overrides: &[String], force: bool) -> Result<(), CliError> {
    let cfg = load_run_config(config, overrides)?;
    let dir = &cfg.output_dir;
    claim_outputs(dir, &[CONFIG_FILE, CHECKPOINT_FILE, HISTORY_FILE], force)?;
    let dataset = cfg.load_dataset()?;
    let windows = cfg.windows(&dataset)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml())?;
    let mut model = NsTransformer::new(cfg.model.clone())?;
    let (base, proj) = model.count_parameters();
    info!(
        "{} windows: {} train, {} val, {} test",
        dataset.name,
        windows.train.len(),
        windows.val.len(),
        windows.test.len()
    );
    println!("parameters: base={base} projector={proj}");
    let history = train(
        &mut model,
        &windows,
        &cfg.train,
        Some(&dir.join(CHECKPOINT_FILE)),
    )?;
    fs::write(dir.join(HISTORY_FILE), history.to_csv())?;
    print_history(&history);
    Ok(())
}

fn print_history(h: &TrainHistory) {
    print!("{}", h.to_csv());
    println!(
        "best_epoch={} best_val_mse={}",
        h.best_epoch, h.best_val_mse
    );
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<(), CliError> {
    fs::write(
        dir.join(EVAL_TABLE_FILE),
        format!("{}\n{}\n", EvalReport::TABLE_HEADER, report.to_table_row()),
    )?;
    fs::write(dir.join(EVAL_KV_FILE), report.to_key_values())?;
    Ok(())
}

pub fn cmd_eval(
    config: &Path,
    overrides: &[String],
    checkpoint: Option<PathBuf>,
    force: bool,
) -> Result<(), CliError> {
    let cfg = load_run_config(config, overrides)?;
    let dir = &cfg.output_dir;
    let ckpt = checkpoint.unwrap_or_else(|| dir.join(CHECKPOINT_FILE));
    if !ckpt.is_file() {
        return Err(CliError::Config(format!(
            "checkpoint {} does not exist",
            ckpt.display()
        )));
    }
    claim_outputs(dir, &[EVAL_TABLE_FILE, EVAL_KV_FILE], force)?;
    let model = load_checkpoint(&ckpt)?;
    let dataset = cfg.load_dataset()?;
    let windows = cfg.windows(&dataset)?;
    let report = evaluate(&model, &windows.test)?;
    write_report(dir, &report)?;
    print!("{}", report.to_key_values());
    Ok(())
}

pub fn cmd_verify(
    instances: usize,
    seed: u64,
    tolerance: f64,
    out: Option<PathBuf>,
) -> Result<bool, CliError> {
    if !(tolerance >= 0.0) {
        return Err(CliError::Config(format!(
            "--tolerance must be non-negative, got {tolerance}"
        )));
    }
    if instances == 0 {
        warn!("no instances requested; nothing to verify");
        println!("instances=0 failures=0");
        return Ok(true);
    }
    let report = oracle::verify(instances, seed, tolerance)?;
    println!(
        "instances={} failures={} tolerance={:e} seed={}",
        report.instances.len(),
        report.failures,
        tolerance,
        seed
    );
    println!("max_deviation={:e}", report.max_deviation);
    println!("max_expansion_error={:e}", report.max_expansion);
    println!(
        "max_row_constant_drop_error={:e}",
        report.max_row_constant_drop
    );
    if let Some(path) = out {
        let mut text = String::from(
            "index,seq_len,channels,d_k,scale,deviation,expansion,row_constant_drop,passed\n",
        );
        for r in &report.instances {
            writeln!(
                text,
                "{},{},{},{},{},{},{},{},{}",
                r.index,
                r.seq_len,
                r.channels,
                r.d_k,
                r.scale,
                r.deviation,
                r.expansion,
                r.row_constant_drop,
                r.passed
            )
            .expect("string write");
        }
        fs::write(path, text)?;
    }
    if !report.passed() {
        if let Some(w) = report.worst() {
            println!(
                "worst instance: {}",
                serde_json::to_string(w).unwrap_or_else(|_| format!("{w:?}"))
            );
        }
        return Ok(false);
    }
    Ok(true)
}

pub fn cmd_stationarity(csv: &Path, missing: MissingPolicy) -> Result<(), CliError> {
    if !csv.is_file() {
        return Err(CliError::Config(format!(
            "{} does not exist",
            csv.display()
        )));
    }
    let data = load_csv(csv, &CsvOptions { missing })?;
    let (per, mean) = dataset_adf(&data.values)?;
    println!("variable,adf_statistic,lag_order,nobs");
    for (name, r) in data.columns.iter().zip(&per) {
        println!("{name},{},{},{}", r.statistic, r.lag_order, r.nobs);
    }
    println!("mean,{mean},,");
    Ok(())
}

pub fn cmd_ablate(
    config: &Path,
    overrides: &[String],
    modes: Option<Vec<Variant>>,
    force: bool,
) -> Result<(), CliError> {
    let cfg = load_run_config(config, overrides)?;
    let dir = &cfg.output_dir;
    claim_outputs(dir, &[CONFIG_FILE, ABLATION_FILE], force)?;
    let dataset = cfg.load_dataset()?;
    let windows = cfg.windows(&dataset)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml())?;
    let modes = modes.unwrap_or_else(|| Variant::ALL.to_vec());
    let rows = ablate(&cfg.model, &cfg.train, &windows, &modes)?;
    let mut table = format!("{ABLATION_HEADER}\n");
    for r in &rows {
        table.push_str(&r.to_table_row());
        table.push('\n');
        fs::write(
            dir.join(format!("history_{}.csv", r.variant.name())),
            r.history.to_csv(),
        )?;
    }
    fs::write(dir.join(ABLATION_FILE), &table)?;
    print!("{table}");
    Ok(())
}

pub fn cmd_gen_synth(
    out: &Path,
    config: Option<&Path>,
    overrides: &[String],
    force: bool,
) -> Result<(), CliError> {
    if out.exists() && !force {
        return Err(CliError::Config(format!(
            "{} already exists; pass --force to overwrite",
            out.display()
        )));
    }
    let mut table = match config {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?
            .parse::<toml::Table>()
            .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let spec = SyntheticSpec::deserialize(table).map_err(|e| CliError::Config(e.to_string()))?;
    spec.validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let data = nst_core::data::generate_synthetic(&spec)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_csv(&data, out)?;
    println!(
        "wrote {} rows x {} columns to {}",
        data.len(),
        data.channels(),
        out.display()
    );
    Ok(())
}
