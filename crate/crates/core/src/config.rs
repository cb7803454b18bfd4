//! Flat `section.key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::client::{Algorithm, BalanceOrder, ClientConfig};
use crate::data::idx::fashion_mnist_paths;
use crate::data::StreamSettings;
use crate::error::{Error, Result};
use crate::models::ModelFamily;
use crate::server::{DeltaReference, ReweightAxis, ServerConfig};

pub const DATA_DIR_ENV: &str = "ASOFED_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    FashionMnist,
    SynthRegression,
    SynthClassification,
    SynthQuadratic,
}

impl DataSource {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fashion_mnist" => Some(Self::FashionMnist),
            "synth_regression" => Some(Self::SynthRegression),
            "synth_classification" => Some(Self::SynthClassification),
            "synth_quadratic" => Some(Self::SynthQuadratic),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::FashionMnist => "fashion_mnist",
            Self::SynthRegression => "synth_regression",
            Self::SynthClassification => "synth_classification",
            Self::SynthQuadratic => "synth_quadratic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataConfig {
    pub source: DataSource,
    pub n_clients: usize,
    pub dir: PathBuf,
    pub seed: u64,
    pub stream: StreamSettings,
    /// Optimum shift for synthetic regression.
    pub dissimilarity: f64,
    /// Fraction of a synthetic classification client's samples drawn from its two dominant classes.
    pub label_skew: f64,
    pub synth_dim: usize,
    pub synth_classes: usize,
    pub synth_samples_min: usize,
    pub synth_samples_max: usize,
    pub synth_noise: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimConfig {
    pub max_iter: u64,
    pub max_time: f64,
    pub delay_min: f64,
    pub delay_max: f64,
    pub jitter: f64,
    pub compute_per_sample: f64,
    pub dropout_permanent: f64,
    pub dropout_periodic: f64,
    /// Simulated seconds between test evaluations; 0 evaluates every aggregation.
    pub eval_interval: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelConfig {
    pub family: ModelFamily,
    pub hidden_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsConfig {
    pub primary: String,
    pub target: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeConfig {
    pub dim: usize,
    pub n_clients: usize,
    pub dissimilarity: f64,
    pub seeds: usize,
    pub iterations: usize,
    /// Fraction of the largest admissible step.
    pub step_fraction: f64,
    pub n_points: usize,
    pub n_objectives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub strategy: Algorithm,
    pub data: DataConfig,
    pub client: ClientConfig,
    pub server: ServerConfig,
    pub sim: SimConfig,
    pub model: ModelConfig,
    pub metrics: MetricsConfig,
    pub probe: ProbeConfig,
    pub seed: u64,
    pub repeat: usize,
    pub output_dir: PathBuf,
}

fn default_data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data/fashion-mnist"))
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            strategy: Algorithm::AsoFed,
            data: DataConfig {
                source: DataSource::FashionMnist,
                n_clients: 20,
                dir: default_data_dir(),
                seed: 0,
                stream: StreamSettings::default(),
                dissimilarity: 1.0,
                label_skew: 0.8,
                synth_dim: 10,
                synth_classes: 4,
                synth_samples_min: 200,
                synth_samples_max: 600,
                synth_noise: 0.1,
            },
            client: ClientConfig::default(),
            server: ServerConfig::default(),
            sim: SimConfig {
                max_iter: 1000,
                max_time: 3600.0,
                delay_min: 10.0,
                delay_max: 100.0,
                jitter: 0.1,
                compute_per_sample: 0.0,
                dropout_permanent: 0.0,
                dropout_periodic: 0.0,
                eval_interval: 0.0,
            },
            model: ModelConfig { family: ModelFamily::Mlp1Hidden, hidden_dim: 32 },
            metrics: MetricsConfig { primary: "accuracy".into(), target: 0.7 },
            probe: ProbeConfig {
                dim: 5,
                n_clients: 10,
                dissimilarity: 0.0,
                seeds: 30,
                iterations: 200,
                step_fraction: 0.1,
                n_points: 1000,
                n_objectives: 10,
            },
            seed: 0,
            repeat: 1,
            output_dir: PathBuf::from("runs"),
        }
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "run seed (model init, delays, dropouts, client shuffling)"),
    ("repeat", "number of consecutive seeds starting at `seed`"),
    ("output.dir", "directory receiving run artifacts"),
    ("data.source", "fashion_mnist | synth_regression | synth_classification | synth_quadratic"),
    ("data.dir", "IDX directory for fashion_mnist (env ASOFED_DATA_DIR overrides the default)"),
    ("data.n_clients", "number of clients K"),
    ("data.seed", "partition and synthetic-data seed"),
    ("data.initial_fraction_min", "lower bound of the initially visible train fraction"),
    ("data.initial_fraction_max", "upper bound of the initially visible train fraction"),
    ("data.growth_min", "lower bound of the per-round growth rate"),
    ("data.growth_max", "upper bound of the per-round growth rate"),
    ("data.train_fraction", "fraction of each train split that can ever become visible"),
    ("data.dissimilarity", "optimum shift norm for synthetic regression and quadratics"),
    ("data.label_skew", "dominant-class share for synthetic classification"),
    ("data.synth_dim", "feature dimension of synthetic data"),
    ("data.synth_classes", "class count of synthetic classification"),
    ("data.synth_samples_min", "smallest synthetic client"),
    ("data.synth_samples_max", "largest synthetic client"),
    ("data.synth_noise", "target noise std of synthetic regression"),
    ("server.strategy", "asofed | fedavg | fedprox | fedasync"),
    ("server.feature_reweight", "first-layer feature re-weighting (asofed only)"),
    ("server.reweight_axis", "rows | columns"),
    ("server.delta_reference", "dispatched | current"),
    ("server.fedasync_alpha", "FedAsync mixing weight"),
    ("server.fedasync_a", "FedAsync staleness exponent"),
    ("server.fedavg_fraction", "fraction C of clients per synchronous round"),
    ("client.lambda", "proximal weight (asofed, fedprox)"),
    ("client.beta", "gradient balancer decay"),
    ("client.base_lr", "base local learning rate"),
    ("client.epochs", "local epochs per round"),
    ("client.batch_size", "local mini-batch size"),
    ("client.dynamic_lr", "scale the step by max(1, ln(mean round duration))"),
    ("client.balance_order", "after_update | before_use"),
    ("client.fedasync_rho", "FedAsync proximal weight"),
    ("sim.max_iter", "stop after this many aggregations"),
    ("sim.max_time", "stop at this simulated time (seconds)"),
    ("sim.delay_min", "smallest per-client mean network delay"),
    ("sim.delay_max", "largest per-client mean network delay"),
    ("sim.jitter", "per-round multiplicative delay noise half-width"),
    ("sim.compute_per_sample", "simulated seconds per processed sample"),
    ("sim.dropout_permanent", "fraction of clients silent for the whole run"),
    ("sim.dropout_periodic", "probability a client sits out a round"),
    ("sim.eval_interval", "simulated seconds between test evaluations (0 = every aggregation)"),
    ("model.family", "linear | logistic | mlp"),
    ("model.hidden_dim", "hidden width of the mlp"),
    ("metrics.primary", "metric used for time-to-target and summaries"),
    ("metrics.target", "time-to-target threshold"),
    ("probe.dim", "parameter dimension of probe objectives"),
    ("probe.n_clients", "clients in probe federations"),
    ("probe.dissimilarity", "client optimum shift in probe federations"),
    ("probe.seeds", "Monte-Carlo trajectories per bound check"),
    ("probe.iterations", "trajectory length T"),
    ("probe.step_fraction", "step size as a fraction of the largest admissible one"),
    ("probe.n_points", "random points for the gradient-inequality check"),
    ("probe.n_objectives", "random strongly convex objectives for the gradient-inequality check"),
];

const METRICS: &[&str] = &["accuracy", "f1", "precision", "recall", "balanced_accuracy", "mae", "smape"];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got `{v}`"))),
    }
}

fn bad_choice(key: &str, v: &str, choices: &str) -> Error {
    Error::Config(format!("{key}: `{v}` is not one of {choices}"))
}

/// Nearest accepted key by edit distance.
pub fn nearest_key(key: &str) -> &'static str {
    KEYS.iter().map(|(k, _)| *k).min_by_key(|k| strsim::levenshtein(k, key)).expect("non-empty key table")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "repeat" => self.repeat = parse_num(key, v)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            "data.source" => {
                self.data.source = DataSource::parse(v).ok_or_else(|| {
                    bad_choice(key, v, "fashion_mnist, synth_regression, synth_classification, synth_quadratic")
                })?
            }
            "data.dir" => self.data.dir = PathBuf::from(v),
            "data.n_clients" => self.data.n_clients = parse_num(key, v)?,
            "data.seed" => self.data.seed = parse_num(key, v)?,
            "data.initial_fraction_min" => self.data.stream.initial_fraction_min = parse_num(key, v)?,
            "data.initial_fraction_max" => self.data.stream.initial_fraction_max = parse_num(key, v)?,
            "data.growth_min" => self.data.stream.growth_min = parse_num(key, v)?,
            "data.growth_max" => self.data.stream.growth_max = parse_num(key, v)?,
            "data.train_fraction" => self.data.stream.train_fraction = parse_num(key, v)?,
            "data.dissimilarity" => self.data.dissimilarity = parse_num(key, v)?,
            "data.label_skew" => self.data.label_skew = parse_num(key, v)?,
            "data.synth_dim" => self.data.synth_dim = parse_num(key, v)?,
            "data.synth_classes" => self.data.synth_classes = parse_num(key, v)?,
            "data.synth_samples_min" => self.data.synth_samples_min = parse_num(key, v)?,
            "data.synth_samples_max" => self.data.synth_samples_max = parse_num(key, v)?,
            "data.synth_noise" => self.data.synth_noise = parse_num(key, v)?,
            "server.strategy" => {
                self.strategy =
                    Algorithm::parse(v).ok_or_else(|| bad_choice(key, v, "asofed, fedavg, fedprox, fedasync"))?
            }
            "server.feature_reweight" => self.server.feature_reweight = parse_bool(key, v)?,
            "server.reweight_axis" => {
                self.server.reweight_axis = match v {
                    "rows" => ReweightAxis::Rows,
                    "columns" => ReweightAxis::Columns,
                    _ => return Err(bad_choice(key, v, "rows, columns")),
                }
            }
            "server.delta_reference" => {
                self.server.delta_reference = match v {
                    "dispatched" => DeltaReference::Dispatched,
                    "current" => DeltaReference::Current,
                    _ => return Err(bad_choice(key, v, "dispatched, current")),
                }
            }
            "server.fedasync_alpha" => self.server.fedasync_alpha = parse_num(key, v)?,
            "server.fedasync_a" => self.server.fedasync_a = parse_num(key, v)?,
            "server.fedavg_fraction" => self.server.fedavg_fraction = parse_num(key, v)?,
            "client.lambda" => self.client.lambda = parse_num(key, v)?,
            "client.beta" => self.client.beta = parse_num(key, v)?,
            "client.base_lr" => self.client.base_lr = parse_num(key, v)?,
            "client.epochs" => self.client.epochs = parse_num(key, v)?,
            "client.batch_size" => self.client.batch_size = parse_num(key, v)?,
            "client.dynamic_lr" => self.client.dynamic_lr = parse_bool(key, v)?,
            "client.balance_order" => {
                self.client.balance_order = match v {
                    "after_update" => BalanceOrder::AfterUpdate,
                    "before_use" => BalanceOrder::BeforeUse,
                    _ => return Err(bad_choice(key, v, "after_update, before_use")),
                }
            }
            "client.fedasync_rho" => self.client.fedasync_rho = parse_num(key, v)?,
            "sim.max_iter" => self.sim.max_iter = parse_num(key, v)?,
            "sim.max_time" => self.sim.max_time = parse_num(key, v)?,
            "sim.delay_min" => self.sim.delay_min = parse_num(key, v)?,
            "sim.delay_max" => self.sim.delay_max = parse_num(key, v)?,
            "sim.jitter" => self.sim.jitter = parse_num(key, v)?,
            "sim.compute_per_sample" => self.sim.compute_per_sample = parse_num(key, v)?,
            "sim.dropout_permanent" => self.sim.dropout_permanent = parse_num(key, v)?,
            "sim.dropout_periodic" => self.sim.dropout_periodic = parse_num(key, v)?,
            "sim.eval_interval" => self.sim.eval_interval = parse_num(key, v)?,
            "model.family" => {
                self.model.family = ModelFamily::parse(v).ok_or_else(|| bad_choice(key, v, "linear, logistic, mlp"))?
            }
            "model.hidden_dim" => self.model.hidden_dim = parse_num(key, v)?,
            "metrics.primary" => {
                if !METRICS.contains(&v) {
                    return Err(bad_choice(key, v, &METRICS.join(", ")));
                }
                self.metrics.primary = v.to_string()
            }
            "metrics.target" => self.metrics.target = parse_num(key, v)?,
            "probe.dim" => self.probe.dim = parse_num(key, v)?,
            "probe.n_clients" => self.probe.n_clients = parse_num(key, v)?,
            "probe.dissimilarity" => self.probe.dissimilarity = parse_num(key, v)?,
            "probe.seeds" => self.probe.seeds = parse_num(key, v)?,
            "probe.iterations" => self.probe.iterations = parse_num(key, v)?,
            "probe.step_fraction" => self.probe.step_fraction = parse_num(key, v)?,
            "probe.n_points" => self.probe.n_points = parse_num(key, v)?,
            "probe.n_objectives" => self.probe.n_objectives = parse_num(key, v)?,
            _ => {
                return Err(Error::Config(format!("unknown key `{key}` (did you mean `{}`?)", nearest_key(key))));
            }
        }
        Ok(())
    }

    /// Current value of `key` in config-file syntax.
    pub fn get(&self, key: &str) -> Option<String> {
        let s = match key {
            "seed" => self.seed.to_string(),
            "repeat" => self.repeat.to_string(),
            "output.dir" => self.output_dir.display().to_string(),
            "data.source" => self.data.source.name().into(),
            "data.dir" => self.data.dir.display().to_string(),
            "data.n_clients" => self.data.n_clients.to_string(),
            "data.seed" => self.data.seed.to_string(),
            "data.initial_fraction_min" => self.data.stream.initial_fraction_min.to_string(),
            "data.initial_fraction_max" => self.data.stream.initial_fraction_max.to_string(),
            "data.growth_min" => self.data.stream.growth_min.to_string(),
            "data.growth_max" => self.data.stream.growth_max.to_string(),
            "data.train_fraction" => self.data.stream.train_fraction.to_string(),
            "data.dissimilarity" => self.data.dissimilarity.to_string(),
            "data.label_skew" => self.data.label_skew.to_string(),
            "data.synth_dim" => self.data.synth_dim.to_string(),
            "data.synth_classes" => self.data.synth_classes.to_string(),
            "data.synth_samples_min" => self.data.synth_samples_min.to_string(),
            "data.synth_samples_max" => self.data.synth_samples_max.to_string(),
            "data.synth_noise" => self.data.synth_noise.to_string(),
            "server.strategy" => self.strategy.name().into(),
            "server.feature_reweight" => self.server.feature_reweight.to_string(),
            "server.reweight_axis" => match self.server.reweight_axis {
                ReweightAxis::Rows => "rows".into(),
                ReweightAxis::Columns => "columns".into(),
            },
            "server.delta_reference" => match self.server.delta_reference {
                DeltaReference::Dispatched => "dispatched".into(),
                DeltaReference::Current => "current".into(),
            },
            "server.fedasync_alpha" => self.server.fedasync_alpha.to_string(),
            "server.fedasync_a" => self.server.fedasync_a.to_string(),
            "server.fedavg_fraction" => self.server.fedavg_fraction.to_string(),
            "client.lambda" => self.client.lambda.to_string(),
            "client.beta" => self.client.beta.to_string(),
            "client.base_lr" => self.client.base_lr.to_string(),
            "client.epochs" => self.client.epochs.to_string(),
            "client.batch_size" => self.client.batch_size.to_string(),
            "client.dynamic_lr" => self.client.dynamic_lr.to_string(),
            "client.balance_order" => match self.client.balance_order {
                BalanceOrder::AfterUpdate => "after_update".into(),
                BalanceOrder::BeforeUse => "before_use".into(),
            },
            "client.fedasync_rho" => self.client.fedasync_rho.to_string(),
            "sim.max_iter" => self.sim.max_iter.to_string(),
            "sim.max_time" => self.sim.max_time.to_string(),
            "sim.delay_min" => self.sim.delay_min.to_string(),
            "sim.delay_max" => self.sim.delay_max.to_string(),
            "sim.jitter" => self.sim.jitter.to_string(),
            "sim.compute_per_sample" => self.sim.compute_per_sample.to_string(),
            "sim.dropout_permanent" => self.sim.dropout_permanent.to_string(),
            "sim.dropout_periodic" => self.sim.dropout_periodic.to_string(),
            "sim.eval_interval" => self.sim.eval_interval.to_string(),
            "model.family" => self.model.family.name().into(),
            "model.hidden_dim" => self.model.hidden_dim.to_string(),
            "metrics.primary" => self.metrics.primary.clone(),
            "metrics.target" => self.metrics.target.to_string(),
            "probe.dim" => self.probe.dim.to_string(),
            "probe.n_clients" => self.probe.n_clients.to_string(),
            "probe.dissimilarity" => self.probe.dissimilarity.to_string(),
            "probe.seeds" => self.probe.seeds.to_string(),
            "probe.iterations" => self.probe.iterations.to_string(),
            "probe.step_fraction" => self.probe.step_fraction.to_string(),
            "probe.n_points" => self.probe.n_points.to_string(),
            "probe.n_objectives" => self.probe.n_objectives.to_string(),
            _ => return None,
        };
        Some(s)
    }

    /// Applies `key = value` lines on top of the current values. Blank lines
    /// and `#` comments are ignored; values may be double-quoted.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{}`", lineno + 1, raw.trim()))
            })?;
            let v = v.trim();
            let v = v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v);
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", lineno + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Range checks that do not touch the filesystem.
    pub fn validate_values(&self) -> Result<()> {
        let mut client = self.client;
        client.algorithm = self.strategy;
        client.validate().map_err(to_config)?;
        self.server.validate().map_err(to_config)?;
        let d = &self.data;
        let s = &d.stream;
        let frac = |name: &str, v: f64| -> Result<()> {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} must lie in [0, 1]")))
            }
        };
        if d.n_clients == 0 {
            return Err(Error::Config("data.n_clients must be >= 1".into()));
        }
        frac("data.initial_fraction_min", s.initial_fraction_min)?;
        frac("data.initial_fraction_max", s.initial_fraction_max)?;
        frac("data.growth_min", s.growth_min)?;
        frac("data.growth_max", s.growth_max)?;
        frac("data.label_skew", d.label_skew)?;
        if !(s.train_fraction > 0.0 && s.train_fraction <= 1.0) {
            return Err(Error::Config(format!("data.train_fraction = {} must lie in (0, 1]", s.train_fraction)));
        }
        if s.initial_fraction_min > s.initial_fraction_max || s.growth_min > s.growth_max {
            return Err(Error::Config("data range bounds are inverted (min > max)".into()));
        }
        if !(d.dissimilarity >= 0.0) || !(d.synth_noise >= 0.0) {
            return Err(Error::Config("data.dissimilarity and data.synth_noise must be >= 0".into()));
        }
        if d.synth_dim == 0
            || d.synth_classes < 2
            || d.synth_samples_min < 3
            || d.synth_samples_min > d.synth_samples_max
        {
            return Err(Error::Config(
                "synthetic data needs dim >= 1, >= 2 classes and 3 <= synth_samples_min <= synth_samples_max".into(),
            ));
        }
        let sim = &self.sim;
        if !(sim.delay_min > 0.0 && sim.delay_min <= sim.delay_max && sim.delay_max.is_finite()) {
            return Err(Error::Config(format!(
                "sim.delay_min = {} and sim.delay_max = {} need 0 < min <= max",
                sim.delay_min, sim.delay_max
            )));
        }
        if !(0.0..1.0).contains(&sim.jitter) {
            return Err(Error::Config(format!("sim.jitter = {} must lie in [0, 1)", sim.jitter)));
        }
        if !(sim.compute_per_sample >= 0.0) || !(sim.eval_interval >= 0.0) || !(sim.max_time > 0.0) {
            return Err(Error::Config(
                "sim.compute_per_sample and sim.eval_interval must be >= 0, sim.max_time > 0".into(),
            ));
        }
        frac("sim.dropout_permanent", sim.dropout_permanent)?;
        frac("sim.dropout_periodic", sim.dropout_periodic)?;
        if sim.dropout_periodic >= 1.0 {
            return Err(Error::Config("sim.dropout_periodic must be < 1 or no client ever reports".into()));
        }
        if sim.max_iter == 0 {
            return Err(Error::Config("sim.max_iter must be >= 1".into()));
        }
        if self.model.family == ModelFamily::Mlp1Hidden && self.model.hidden_dim == 0 {
            return Err(Error::Config("model.hidden_dim must be >= 1".into()));
        }
        let regression_source = matches!(d.source, DataSource::SynthRegression | DataSource::SynthQuadratic);
        if regression_source != (self.model.family == ModelFamily::LinearRegression) {
            return Err(Error::Config(format!(
                "model.family = {} does not fit data.source = {}",
                self.model.family.name(),
                d.source.name()
            )));
        }
        let regression_metric = matches!(self.metrics.primary.as_str(), "mae" | "smape");
        if regression_metric != regression_source {
            return Err(Error::Config(format!(
                "metrics.primary = {} does not fit data.source = {}",
                self.metrics.primary,
                d.source.name()
            )));
        }
        if self.repeat == 0 {
            return Err(Error::Config("repeat must be >= 1".into()));
        }
        let p = &self.probe;
        if p.dim == 0 || p.n_clients == 0 || p.seeds < 2 || p.iterations == 0 || p.n_objectives == 0 || p.n_points == 0
        {
            return Err(Error::Config("probe sizes must be >= 1 (probe.seeds >= 2)".into()));
        }
        if !(p.step_fraction > 0.0 && p.step_fraction < 1.0) {
            return Err(Error::Config(format!("probe.step_fraction = {} must lie in (0, 1)", p.step_fraction)));
        }
        Ok(())
    }

    /// Value checks plus existence of referenced files.
    pub fn validate(&self) -> Result<()> {
        self.validate_values()?;
        if self.data.source == DataSource::FashionMnist {
            let (img, lbl) = fashion_mnist_paths(&self.data.dir, true);
            for p in [img, lbl] {
                if !p.is_file() {
                    return Err(Error::Config(format!(
                        "missing dataset file {} (set data.dir or {DATA_DIR_ENV})",
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    /// The client configuration with the run strategy filled in.
    pub fn client_config(&self) -> ClientConfig {
        ClientConfig { algorithm: self.strategy, ..self.client }
    }

    /// Every key with its current value, in config-file syntax.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, _) in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("every listed key is readable"));
        }
        out
    }
}

fn to_config(e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) | Error::InvalidDimension(m) => Error::Config(m),
        other => other,
    }
}

pub fn parse_str(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    cfg.apply_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_str(&text)
}

/// Documentation of every key with its default value.
pub fn config_reference() -> String {
    let cfg = RunConfig::default();
    let mut out = String::from("# key = default    # description\n");
    for (k, doc) in KEYS {
        let _ = writeln!(out, "{k} = {}    # {doc}", cfg.get(k).expect("every listed key is readable"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth(extra: &str) -> Result<RunConfig> {
        parse_str(&format!("data.source = synth_classification\nmodel.family = logistic\n{extra}"))
    }

    #[test]
    fn empty_file_gives_defaults() {
        let mut cfg = RunConfig::default();
        cfg.apply_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate_values().unwrap();
    }

    #[test]
    fn beta_out_of_range() {
        let err = synth("client.beta = 1.5").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.is_validation());
    }

    #[test]
    fn unknown_key_suggests_nearest() {
        let err = synth("client.lamda = 0.5").unwrap_err();
        assert!(err.to_string().contains("client.lambda"), "{err}");
    }

    #[test]
    fn comments_and_quotes() {
        let cfg = synth("# comment\nserver.strategy = \"fedavg\"   # trailing\n\nseed=7").unwrap();
        assert_eq!(cfg.strategy, Algorithm::FedAvg);
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn every_key_roundtrips() {
        let cfg = RunConfig::default();
        let mut again = RunConfig::default();
        again.data.n_clients = 3;
        again.apply_str(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
        for (k, _) in KEYS {
            assert!(cfg.get(k).is_some(), "{k}");
        }
    }

    #[test]
    fn reference_lists_every_key() {
        let r = config_reference();
        for (k, _) in KEYS {
            assert!(r.contains(&format!("{k} = ")), "{k}");
        }
    }

    #[test]
    fn missing_dataset_is_validation_error() {
        let err = parse_str("data.dir = /nonexistent/fm").unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("missing dataset"));
    }

    #[test]
    fn mismatched_model_and_data() {
        assert!(parse_str("data.source = synth_regression\nmodel.family = mlp").is_err());
        assert!(parse_str("data.source = synth_regression\nmodel.family = linear\nmetrics.primary = mae").is_ok());
    }

    #[test]
    fn fraction_ranges_enforced() {
        assert!(synth("sim.dropout_permanent = 1.2").is_err());
        assert!(synth("server.fedavg_fraction = 0").is_err());
        assert!(synth("client.lambda = -1").is_err());
        assert!(synth("server.fedavg_fraction = 1").is_ok());
    }

    #[test]
    fn malformed_line() {
        let err = synth("just words").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }
}
