use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"version = 1
output_dir = "run"

[data]
source = "synthetic"

[data.synthetic]
kind = "trend_seasonal"
length = 300
channels = 1
seed = 4

[model]
seq_len = 16
pred_len = 8
channels = 1
d_model = 16
n_heads = 2
e_layers = 1
d_layers = 1
d_ff = 32
projector_hidden = 8

[train]
epochs = 2
batch_size = 16
lr = 0.001
seed = 9
"#;

fn nst(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nst"))
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn help_lists_every_subcommand() {
    let o = nst(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    for sub in [
        "train",
        "eval",
        "verify",
        "stationarity",
        "ablate",
        "gen-synth",
    ] {
        assert!(text.contains(sub), "missing {sub} in help");
    }
    let o = nst(&["train", "--help"]);
    for flag in ["--config", "--set", "--force"] {
        assert!(stdout(&o).contains(flag));
    }
}

#[test]
fn config_errors_exit_two_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "version = 1\noutput_dir = \"o\"\n[data]\nsource = \"csv\"\n",
    );
    let o = nst(&["train", "-c", &cfg]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("data.csv_path"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), &format!("{TINY}\nbatchsize = 3\n"));
    let o = nst(&["train", "-c", &cfg]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("batchsize"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), TINY);
    let o = nst(&["train", "-c", &cfg, "--set", "train.batch_size=0"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("batch_size"));

    let o = nst(&["train", "-c", &cfg, "--set", "version=2"]);
    assert_eq!(code(&o), 2);
    assert!(
        !dir.path().join("run").exists(),
        "nothing is written before validation"
    );

    let o = nst(&[
        "train",
        "-c",
        dir.path().join("absent.toml").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_eval_cycle_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = dir.path().join("run");

    let o = nst(&["train", "-c", &cfg]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["config.toml", "checkpoint.ckpt", "history.csv"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,val_mse,val_mae,lr,improved\n"));

    // the copied config reproduces the run on its own
    let resolved = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(resolved.contains("version = 1"));

    let o = nst(&["train", "-c", &cfg]);
    assert_eq!(code(&o), 2, "existing outputs need --force");

    let o = nst(&["eval", "-c", &cfg]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let kv = fs::read_to_string(run.join("eval.txt")).unwrap();
    assert!(kv.contains("horizon=8\n") && kv.contains("mse="));
    let table = fs::read_to_string(run.join("eval.csv")).unwrap();
    assert_eq!(table.lines().count(), 2);

    let o = nst(&["train", "-c", &cfg, "--force"]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        fs::read_to_string(run.join("history.csv")).unwrap(),
        history
    );
    let o = nst(&["eval", "-c", &cfg, "--force"]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(run.join("eval.txt")).unwrap(), kv);
}

#[test]
fn eval_without_checkpoint_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = nst(&["eval", "-c", &cfg]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("checkpoint"));
}

#[test]
fn verify_exit_codes() {
    let o = nst(&["verify"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("instances=1000 failures=0"));

    let o = nst(&["verify", "--instances", "50", "--tolerance", "1e-15"]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("worst instance"));

    let o = nst(&["verify", "--instances", "0"]);
    assert_eq!(code(&o), 0);
}

#[test]
fn stationarity_ranks_white_noise_below_random_walk() {
    let dir = tempfile::tempdir().unwrap();
    let wn = dir.path().join("wn.csv");
    let rw = dir.path().join("rw.csv");
    for (path, kind) in [(&wn, "white_noise"), (&rw, "random_walk")] {
        let o = nst(&[
            "gen-synth",
            "--out",
            path.to_str().unwrap(),
            "--set",
            &format!("kind={kind}"),
            "--set",
            "length=2000",
            "--set",
            "noise=1.0",
            "--set",
            "seed=77",
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let mean = |p: &Path| -> f64 {
        let o = nst(&["stationarity", p.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let text = stdout(&o);
        let line = text.lines().find(|l| l.starts_with("mean,")).unwrap();
        line.split(',').nth(1).unwrap().parse().unwrap()
    };
    let (m_wn, m_rw) = (mean(&wn), mean(&rw));
    assert!(m_wn < nst_core::metrics::RANDOM_WALK_P95_T2000, "{m_wn}");
    assert!(m_rw > nst_core::metrics::WHITE_NOISE_P05_T2000, "{m_rw}");
    assert!(m_wn < m_rw);

    let flat = dir.path().join("flat.csv");
    fs::write(&flat, format!("x\n{}", "1.0\n".repeat(50))).unwrap();
    let o = nst(&["stationarity", flat.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("degenerate"), "{}", stderr(&o));
}

#[test]
fn gen_synth_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.csv");
    let args = [
        "gen-synth",
        "--out",
        out.to_str().unwrap(),
        "--set",
        "length=100",
    ];
    assert_eq!(code(&nst(&args)), 0);
    let first = fs::read_to_string(&out).unwrap();
    assert_eq!(code(&nst(&args)), 2);
    let mut forced = args.to_vec();
    forced.push("--force");
    assert_eq!(code(&nst(&forced)), 0);
    assert_eq!(fs::read_to_string(&out).unwrap(), first);
    assert_eq!(
        code(&nst(&["gen-synth", "--out", "x.csv", "--set", "lenght=3"])),
        2
    );
}

#[test]
fn ablation_table_has_one_row_per_mode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = nst(&["ablate", "-c", &cfg, "--set", "train.epochs=1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = fs::read_to_string(dir.path().join("run/ablation.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "mode,mse,mae,relative_stationarity");
    assert_eq!(lines.len(), 6);
    for l in &lines[1..] {
        assert_eq!(l.split(',').count(), 4);
    }
    let o = nst(&["ablate", "-c", &cfg, "--force", "--modes", "vanilla,both"]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        fs::read_to_string(dir.path().join("run/ablation.csv"))
            .unwrap()
            .lines()
            .count(),
        3
    );
}
