use std::path::Path;
use std::process::Command;

use airground::harness::{load_config, read_trace, validate_trace, RunConfig};

fn airground(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_airground")).args(args).output().unwrap()
}

fn repo_config() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn shipped_config_matches_defaults() {
    assert_eq!(load_config(&repo_config()).unwrap(), RunConfig::default());
}

#[test]
fn simulate_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[env]\ntotal_passengers = 40\n");
    let out = dir.path().join("out");
    let o = airground(&["simulate", "--policy", "rule", "--config", &cfg, "--seeds", "0..3", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.csv", "summary.csv", "trace.jsonl", "cdf.csv"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    let cdf = std::fs::read_to_string(out.join("cdf.csv")).unwrap();
    assert_eq!(cdf.lines().count(), 1 + 3 * 40);
    let trace = read_trace(std::io::BufReader::new(std::fs::File::open(out.join("trace.jsonl")).unwrap())).unwrap();
    validate_trace(&trace).unwrap();
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "validate_every = 1\nvalidation_seeds = [7]\n[env]\ntotal_passengers = 20\n\
         [model]\nd_model = 8\nd_ff = 8\nd_out = 8\nlayers = 1\nheads = 2\n\
         [train]\nrollout_len = 40\nminibatch = 20\nepochs = 1\nworkers = 1\n",
    );
    let ck = dir.path().join("ck");
    let o = airground(&["train", "--config", &cfg, "--updates", "2", "--checkpoint", ck.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(ck.join("model.ckpt").is_file());
    let log = std::fs::read_to_string(ck.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let out = dir.path().join("eval");
    let o = airground(&["eval", "--checkpoint", ck.to_str().unwrap(), "--seeds", "1,2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
}

#[test]
fn sweep_and_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seeds = [0]\npolicy = \"qtti\"\n[sweep]\npassengers = [20, 40]\nseats = [3, 4]\n");
    let out = dir.path().join("sweep");
    let o = airground(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 5);

    let o = airground(&["oracle", "--config", &cfg, "--n", "5", "--passengers", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("oracle cost <= every baseline"));
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[env]\nseatz = 3\n");
    let o = airground(&["simulate", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key env.seatz"));
}
