use std::path::PathBuf;

use asofed::client::Algorithm;
use asofed::config::RunConfig;
use asofed::orchestrate::{read_records, run_experiment, DataCache, OutputOptions};

fn presets() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../presets")
}

fn load(name: &str) -> RunConfig {
    let text = std::fs::read_to_string(presets().join(name)).unwrap();
    let mut cfg = RunConfig::default();
    cfg.apply_str(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
    cfg
}

#[test]
fn every_preset_parses_and_validates() {
    let mut n = 0;
    for entry in std::fs::read_dir(presets()).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        load(&name).validate_values().unwrap_or_else(|e| panic!("{name}: {e}"));
        n += 1;
    }
    assert!(n >= 10);
}

#[test]
fn fashion_mnist_setup_values() {
    let c = load("fashion_mnist_noniid");
    assert_eq!(c.strategy, Algorithm::AsoFed);
    assert_eq!(c.data.n_clients, 20);
    assert_eq!((c.client.lambda, c.client.beta, c.client.base_lr), (0.5, 0.001, 0.001));
    assert_eq!((c.sim.delay_min, c.sim.delay_max), (10.0, 100.0));
    assert_eq!(c.server.fedavg_fraction, 0.2);
    assert!(c.server.feature_reweight && c.client.dynamic_lr);
}

#[test]
fn ablations_differ_in_one_switch() {
    let base = load("fashion_mnist_noniid");
    let no_f = load("ablation_noF");
    let no_d = load("ablation_noD");
    assert!(!no_f.server.feature_reweight);
    assert_eq!(RunConfig { server: base.server, ..no_f.clone() }.to_text(), base.to_text());
    assert!(!no_d.client.dynamic_lr);
    assert_eq!(RunConfig { client: base.client, ..no_d.clone() }.to_text(), base.to_text());
}

#[test]
fn repeated_run_is_byte_identical() {
    let mut cfg = RunConfig::default();
    cfg.apply_str("data.source = synth_regression\nmodel.family = linear\nmetrics.primary = mae\nmetrics.target = 1\ndata.n_clients = 5\nsim.max_time = 1500\nsim.dropout_periodic = 0.2\n")
        .unwrap();
    let mut cache = DataCache::default();
    let mut bytes = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let c = RunConfig { output_dir: dir.path().to_path_buf(), ..cfg.clone() };
        let (paths, _) = run_experiment(&c, OutputOptions::default(), &mut cache).unwrap();
        let records = paths.iter().find(|p| p.ends_with("records.jsonl")).unwrap();
        assert!(!read_records(records).unwrap().is_empty());
        bytes.push(std::fs::read(records).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}
