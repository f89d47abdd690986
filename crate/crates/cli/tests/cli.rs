use std::path::Path;
use std::process::{Command, Output};

fn polyadapt(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polyadapt"))
        .args(args)
        .env("POLYADAPT_RUN_ROOT", root)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn run_dir(o: &Output) -> std::path::PathBuf {
    stdout(o).lines().next().expect("run dir on first line").into()
}

const TINY: &[&str] = &[
    "--set", "n_languages=2",
    "--set", "n_per_language=20",
    "--set", "d_model=16",
    "--set", "n_layers_encoder=4",
    "--set", "n_layers_decoder=1",
    "--set", "d_ff=32",
    "--set", "max_seq_len=64",
    "--set", "bottleneck_dim=4",
    "--set", "pretrain_steps=3",
    "--set", "pretrain_batch_size=4",
    "--set", "epochs=1",
    "--set", "batch_size=4",
    "--set", "max_steps=2",
    "--set", "eval_per_language=3",
    "--set", "max_decode_len=4",
];

fn with_tiny<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(TINY.iter().copied()).collect()
}

#[test]
fn generate_counts_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a");
    let o = polyadapt(&["generate", "--languages", "4", "--n", "50", "--seed", "3", "--out", out.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let corpus = std::fs::read_to_string(out.join("corpus.jsonl")).unwrap();
    assert_eq!(corpus.lines().count(), 200);
    assert!(out.join("splits.json").exists() && out.join("summary.json").exists() && out.join("summary.md").exists());

    let again = polyadapt(&["generate", "--languages", "4", "--n", "50", "--seed", "3", "--out", out.to_str().unwrap()], dir.path());
    assert!(!again.status.success());
    assert!(stderr(&again).contains("--force"));

    let out_b = dir.path().join("b");
    let o = polyadapt(&["generate", "--languages", "4", "--n", "50", "--seed", "3", "--out", out_b.to_str().unwrap()], dir.path());
    assert!(o.status.success());
    for f in ["corpus.jsonl", "splits.json", "summary.json"] {
        assert_eq!(std::fs::read(out.join(f)).unwrap(), std::fs::read(out_b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn generate_imbalance_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    let o = polyadapt(&["generate", "--languages", "3", "--n", "200", "--imbalance", "10", "--out", out.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let totals: Vec<u64> = summary["languages"].as_array().unwrap().iter().map(|l| l["total"].as_u64().unwrap()).collect();
    let (max, min) = (*totals.iter().max().unwrap(), *totals.iter().min().unwrap());
    assert_eq!(max, 10 * min);
}

#[test]
fn config_errors_list_every_bad_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"epochz": 3, "learning_rat": 0.1, "tuning": "partial", "seed": 1}"#).unwrap();
    let o = polyadapt(&["finetune", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(!o.status.success());
    let err = stderr(&o);
    for key in ["epochz", "learning_rat", "tuning"] {
        assert!(err.contains(key), "{err}");
    }
    assert!(!err.contains("`seed`"));
}

#[test]
fn finetune_eval_probe_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let o = polyadapt(&with_tiny(&["finetune", "--set", "task=search", "--set", "seed=2"]), root);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = run_dir(&o);
    for f in ["model.ckpt", "adapters.ckpt", "metrics.json", "record.json", "report.md"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert!(!run.join("run.lock").exists());

    let ckpt = run.join("model.ckpt");
    let adapters = run.join("adapters.ckpt");
    let base = ["eval", "--checkpoint", ckpt.to_str().unwrap(), "--adapters", adapters.to_str().unwrap(), "--task", "search"];
    let o = polyadapt(&[&base[..], &["--languages", "ruby,javascript"]].concat(), root);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(run_dir(&o).join("metrics.json").exists());

    let o = polyadapt(&[&base[..], &["--languages", ""]].concat(), root);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("at least one language"));

    let o = polyadapt(&["probe", "--checkpoint", ckpt.to_str().unwrap(), "--tasks", "LEN,TYP", "--n", "50"], root);
    assert!(o.status.success(), "{}", stderr(&o));
    let pr = run_dir(&o);
    let csv = std::fs::read_to_string(pr.join("probe_LEN.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5, "header plus 5 layer points for a 4-layer encoder");
    assert!(pr.join("probe_TYP.csv").exists() && pr.join("report.md").exists());
}

#[test]
fn missing_checkpoint_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = polyadapt(&["probe", "--checkpoint", "/nonexistent/model.ckpt"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("/nonexistent/model.ckpt"));
}

#[test]
fn sweep_dim_reports_one_row_per_dim() {
    let dir = tempfile::tempdir().unwrap();
    let o = polyadapt(&with_tiny(&["sweep-dim", "--dims", "2,4,8"]), dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(run_dir(&o).join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rows, ["2", "4", "8"]);
}

#[test]
fn locked_run_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("busy");
    std::fs::create_dir_all(&run).unwrap();
    std::fs::write(run.join("run.lock"), "1").unwrap();
    let o = polyadapt(&with_tiny(&["pretrain", "--run-dir", run.to_str().unwrap()]), dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("in use"));
}

#[test]
fn pretrain_reruns_reproduce_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let a = polyadapt(&with_tiny(&["pretrain", "--run-dir", dir.path().join("a").to_str().unwrap()]), dir.path());
    let b = polyadapt(&with_tiny(&["pretrain", "--run-dir", dir.path().join("b").to_str().unwrap()]), dir.path());
    assert!(a.status.success() && b.status.success(), "{}", stderr(&a));
    for f in ["metrics.json", "base.ckpt"] {
        assert_eq!(std::fs::read(dir.path().join("a").join(f)).unwrap(), std::fs::read(dir.path().join("b").join(f)).unwrap());
    }
}
