use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn asofed(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asofed")).args(args).current_dir(cwd).output().expect("spawn asofed")
}

fn presets() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../presets")
}

const SMALL: &str = "data.source = synth_classification
model.family = logistic
data.n_clients = 4
sim.max_time = 800
";

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn run_writes_artifacts_and_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "small", SMALL);
    let out = asofed(&["run", "--config", cfg.to_str().unwrap(), "--out", "o", "--dump-first-layer"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = tmp.path().join("o/asofed_seed0");
    for f in ["records.jsonl", "final_params.bin", "first_layer.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert!(tmp.path().join("o/summary.csv").exists());
}

#[test]
fn unknown_key_exits_one_with_suggestion() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad", "client.lamda = 0.5\n");
    let out = asofed(&["run", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("client.lambda"));
}

#[test]
fn out_of_range_value_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad", &format!("{SMALL}client.beta = 1.5\n"));
    let out = asofed(&["run", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_dataset_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "fm", "data.dir = nowhere\n");
    let out = asofed(&["run", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn divergence_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let text = "data.source = synth_regression
model.family = linear
metrics.primary = mae
metrics.target = 0.1
data.n_clients = 3
client.base_lr = 1000
client.dynamic_lr = false
sim.max_time = 5000
";
    let cfg = write(tmp.path(), "div", text);
    let out = asofed(&["run", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn compare_prints_a_row_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "small", &format!("{SMALL}repeat = 2\nmetrics.target = 0.3\n"));
    let out = asofed(
        &["compare", "--config", cfg.to_str().unwrap(), "--strategies", "asofed,fedavg", "--json", "t.json"],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("asofed ") || l.starts_with("fedavg ")).count(), 6);
    assert!(tmp.path().join("t.json").exists());
}

#[test]
fn sweep_creates_one_directory_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "small", SMALL);
    let out = asofed(
        &["sweep", "--config", cfg.to_str().unwrap(), "--param", "client.lambda", "--values", "0.5,1", "--out", "s"],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("s/client.lambda=0.5").is_dir());
    assert!(tmp.path().join("s/client.lambda=1").is_dir());
}

#[test]
fn probes_print_passing_reports() {
    let tmp = tempfile::tempdir().unwrap();
    for (which, preset) in [("lemma1", "probe_lemma1"), ("thm1", "probe_convex"), ("thm2", "probe_nonconvex")] {
        let p = presets().join(preset);
        let out = asofed(&["probe", "--which", which, "--config", p.to_str().unwrap()], tmp.path());
        assert!(out.status.success(), "{which}: {}", String::from_utf8_lossy(&out.stderr));
        let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(v["passed"], serde_json::Value::Bool(true), "{which}");
    }
}

#[test]
fn probe_rejects_invalid_step_fraction() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "p", "probe.step_fraction = 1.5\n");
    let out = asofed(&["probe", "--which", "thm1", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_reference_lists_keys() {
    let out = asofed(&["config-reference"], Path::new("."));
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for key in ["client.lambda", "server.feature_reweight", "sim.dropout_periodic", "probe.seeds"] {
        assert!(text.contains(key), "{key}");
    }
}
