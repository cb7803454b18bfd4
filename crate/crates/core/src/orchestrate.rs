//! Multi-seed runs, sweeps and strategy comparisons with on-disk artifacts.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use crate::client::Algorithm;
use crate::config::{DataSource, RunConfig};
use crate::error::{Error, Result};
use crate::metrics::{final_metric, time_to_target, RunRecord};
use crate::models::{ParamSet, Samples};
use crate::sim::{load_fashion_mnist, run_with, Federation, RunOutput, RunOverrides};

#[derive(Debug, Clone, Copy, Default)]
pub struct OutputOptions {
    pub dump_first_layer: bool,
}

/// One seed's outcome as it appears in summaries.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub strategy: String,
    pub seed: u64,
    pub sim_time_to_target: Option<f64>,
    pub final_metric: Option<f64>,
    pub aggregations: u64,
}

impl RunSummary {
    pub fn from_records(cfg: &RunConfig, records: &[RunRecord]) -> Self {
        Self {
            strategy: cfg.strategy.name().to_string(),
            seed: cfg.seed,
            sim_time_to_target: time_to_target(records, &cfg.metrics.primary, cfg.metrics.target),
            final_metric: final_metric(records, &cfg.metrics.primary),
            aggregations: records.last().map_or(0, |r| r.global_iter),
        }
    }
}

/// Caches the image dataset so multi-run commands parse it once.
#[derive(Debug, Default, Clone)]
pub struct DataCache {
    fashion: Option<(PathBuf, Arc<Samples>)>,
}

impl DataCache {
    pub fn federation(&mut self, cfg: &RunConfig) -> Result<Federation> {
        if cfg.data.source != DataSource::FashionMnist {
            return Federation::build_with(cfg, None);
        }
        let hit = matches!(&self.fashion, Some((dir, _)) if dir == &cfg.data.dir);
        if !hit {
            self.fashion = Some((cfg.data.dir.clone(), load_fashion_mnist(cfg)?));
        }
        let data = self.fashion.as_ref().map(|(_, d)| Arc::clone(d));
        Federation::build_with(cfg, data)
    }

    /// Builds the federation for `cfg` and runs it.
    pub fn run(&mut self, cfg: &RunConfig) -> Result<RunOutput> {
        let fed = self.federation(cfg)?;
        run_with(cfg, &fed, &RunOverrides::default())
    }
}

fn with_context(e: Error, cfg: &RunConfig) -> Error {
    let ctx = format!("strategy {} seed {}", cfg.strategy.name(), cfg.seed);
    match e {
        Error::Divergence { iteration, detail } => Error::Divergence { iteration, detail: format!("{ctx}: {detail}") },
        Error::Consistency(m) => Error::Consistency(format!("{ctx}: {m}")),
        Error::InvalidArgument(m) => Error::InvalidArgument(format!("{ctx}: {m}")),
        other => other,
    }
}

pub fn write_records(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "unreached".to_string(), |x| format!("{x}"))
}

pub fn write_summary(path: &Path, rows: &[RunSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    let io = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["strategy", "seed", "sim_time_to_target", "final_metric", "aggregations"]).map_err(io)?;
    for r in rows {
        w.write_record([
            r.strategy.clone(),
            r.seed.to_string(),
            fmt_opt(r.sim_time_to_target),
            r.final_metric.map_or_else(String::new, |v| v.to_string()),
            r.aggregations.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_first_layer(path: &Path, params: &ParamSet) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    for row in params.first_layer().rows() {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Directory holding one seed's artifacts.
pub fn run_dir(out: &Path, cfg: &RunConfig) -> PathBuf {
    out.join(format!("{}_seed{}", cfg.strategy.name(), cfg.seed))
}

/// Runs `cfg.repeat` consecutive seeds and writes, per seed, `records.jsonl`,
/// `final_params.bin` (and optionally `first_layer.csv`), plus one
/// `summary.csv` in the output directory. Returns the written paths.
pub fn run_experiment(
    cfg: &RunConfig,
    opts: OutputOptions,
    cache: &mut DataCache,
) -> Result<(Vec<PathBuf>, Vec<RunSummary>)> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    let mut paths = Vec::new();
    let mut rows = Vec::new();
    for i in 0..cfg.repeat as u64 {
        let mut c = cfg.clone();
        c.seed = cfg.seed + i;
        let result = cache.run(&c).map_err(|e| with_context(e, &c))?;
        let dir = run_dir(out, &c);
        fs::create_dir_all(&dir)?;
        let rec_path = dir.join("records.jsonl");
        write_records(&rec_path, &result.records)?;
        let param_path = dir.join("final_params.bin");
        result.final_params.write_to(BufWriter::new(File::create(&param_path)?))?;
        paths.push(rec_path);
        paths.push(param_path);
        if opts.dump_first_layer {
            let p = dir.join("first_layer.csv");
            write_first_layer(&p, &result.final_params)?;
            paths.push(p);
        }
        rows.push(RunSummary::from_records(&c, &result.records));
    }
    let summary = out.join("summary.csv");
    write_summary(&summary, &rows)?;
    paths.push(summary);
    Ok((paths, rows))
}

/// Runs `run_experiment` once per value of `param`, each in its own
/// `<output>/<param>=<value>` directory.
pub fn sweep(
    cfg: &RunConfig,
    param: &str,
    values: &[String],
    opts: OutputOptions,
    cache: &mut DataCache,
) -> Result<Vec<(String, Vec<RunSummary>)>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let mut variants = Vec::with_capacity(values.len());
    for v in values {
        let mut c = cfg.clone();
        c.set(param, v)?;
        c.output_dir = cfg.output_dir.join(format!("{param}={v}"));
        c.validate()?;
        variants.push((v.clone(), c));
    }
    let mut out = Vec::new();
    for (v, c) in variants {
        let (_, rows) = run_experiment(&c, opts, cache)?;
        out.push((v, rows));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyMean {
    pub strategy: String,
    /// Mean over seeds that reached the target.
    pub mean_time_to_target: Option<f64>,
    pub reached: usize,
    pub runs: usize,
    pub mean_final_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonTable {
    pub metric: String,
    pub target: f64,
    pub rows: Vec<RunSummary>,
    pub means: Vec<StrategyMean>,
}

impl ComparisonTable {
    pub fn from_rows(metric: &str, target: f64, rows: Vec<RunSummary>) -> Self {
        let mut order: Vec<String> = Vec::new();
        for r in &rows {
            if !order.contains(&r.strategy) {
                order.push(r.strategy.clone());
            }
        }
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let means = order
            .into_iter()
            .map(|s| {
                let mine: Vec<&RunSummary> = rows.iter().filter(|r| r.strategy == s).collect();
                let times: Vec<f64> = mine.iter().filter_map(|r| r.sim_time_to_target).collect();
                let finals: Vec<f64> = mine.iter().filter_map(|r| r.final_metric).collect();
                StrategyMean {
                    strategy: s,
                    mean_time_to_target: mean(&times),
                    reached: times.len(),
                    runs: mine.len(),
                    mean_final_metric: mean(&finals),
                }
            })
            .collect();
        Self { metric: metric.to_string(), target, rows, means }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<10} {:>6} {:>18} {:>14}\n", "strategy", "seed", "time_to_target", self.metric);
        for r in &self.rows {
            s += &format!(
                "{:<10} {:>6} {:>18} {:>14}\n",
                r.strategy,
                r.seed,
                fmt_opt(r.sim_time_to_target),
                r.final_metric.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
            );
        }
        for m in &self.means {
            s += &format!(
                "{:<10} {:>6} {:>18} {:>14}   reached {}/{}\n",
                m.strategy,
                "mean",
                fmt_opt(m.mean_time_to_target),
                m.mean_final_metric.map_or_else(|| "-".to_string(), |v| format!("{v:.4}")),
                m.reached,
                m.runs
            );
        }
        s
    }
}

/// Runs every config over its seeds and tabulates time-to-target and the
/// final metric. Configs must agree on data and seeds so runs are paired.
pub fn compare_strategies(configs: &[RunConfig], cache: &mut DataCache) -> Result<ComparisonTable> {
    if configs.len() < 2 {
        return Err(Error::Config("comparison needs at least two configurations".into()));
    }
    let first = &configs[0];
    for c in configs {
        c.validate()?;
        if c.data != first.data || c.seed != first.seed || c.repeat != first.repeat || c.metrics != first.metrics {
            return Err(Error::Config("compared configurations must share data, seeds and target".into()));
        }
    }
    let mut rows = Vec::new();
    for c in configs {
        for i in 0..c.repeat as u64 {
            let mut ci = c.clone();
            ci.seed = c.seed + i;
            let out = cache.run(&ci).map_err(|e| with_context(e, &ci))?;
            rows.push(RunSummary::from_records(&ci, &out.records));
        }
    }
    Ok(ComparisonTable::from_rows(&first.metrics.primary, first.metrics.target, rows))
}

/// One config per strategy, otherwise identical to `base`.
pub fn strategy_variants(base: &RunConfig, strategies: &[Algorithm]) -> Vec<RunConfig> {
    strategies.iter().map(|&s| RunConfig { strategy: s, ..base.clone() }).collect()
}
