use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use asofed::client::Algorithm;
use asofed::config::{config_reference, parse_config, RunConfig};
use asofed::orchestrate::{compare_strategies, run_experiment, strategy_variants, sweep, DataCache, OutputOptions};
use asofed::theory;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "asofed", version, about = "Asynchronous online federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProbeKind {
    Lemma1,
    Thm1,
    Thm2,
    Dissimilarity,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration (over `repeat` seeds).
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write each run's first-layer weights as CSV.
        #[arg(long)]
        dump_first_layer: bool,
    },
    /// Run the configuration once per value of one key.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        dump_first_layer: bool,
    },
    /// Tabulate time-to-target and final metric across strategies.
    Compare {
        /// One or more configs; with a single config, `--strategies` varies it.
        #[arg(long, required = true)]
        config: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the table as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Check an analytical bound numerically; prints a JSON report.
    Probe {
        #[arg(long, value_enum)]
        which: ProbeKind,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print every configuration key with its default.
    ConfigReference,
}

/// Failure class used for the exit code.
enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

fn classify(e: asofed::Error) -> Failure {
    if e.is_validation() {
        Failure::Validation(e.into())
    } else {
        Failure::Runtime(e.into())
    }
}

fn load(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<RunConfig, Failure> {
    let mut cfg = parse_config(path).map_err(classify).map_err(|f| match f {
        Failure::Validation(e) => Failure::Validation(e.context(format!("config {}", path.display()))),
        other => other,
    })?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), Failure> {
    let mut cache = DataCache::default();
    match cli.command {
        Command::Run { config, seed, out, dump_first_layer } => {
            let cfg = load(&config, seed, out)?;
            let (paths, rows) =
                run_experiment(&cfg, OutputOptions { dump_first_layer }, &mut cache).map_err(classify)?;
            for r in &rows {
                println!(
                    "{} seed {}: {} aggregations, final {} = {}",
                    r.strategy,
                    r.seed,
                    r.aggregations,
                    cfg.metrics.primary,
                    r.final_metric.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
                );
            }
            for p in paths {
                println!("wrote {}", p.display());
            }
        }
        Command::Sweep { config, param, values, out, dump_first_layer } => {
            let cfg = load(&config, None, out)?;
            let res = sweep(&cfg, &param, &values, OutputOptions { dump_first_layer }, &mut cache).map_err(classify)?;
            for (v, rows) in res {
                for r in rows {
                    println!(
                        "{param}={v} {} seed {}: final {}",
                        r.strategy,
                        r.seed,
                        r.final_metric.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
                    );
                }
            }
        }
        Command::Compare { config, strategies, seed, json } => {
            let mut cfgs = config.iter().map(|p| load(p, seed, None)).collect::<Result<Vec<_>, _>>()?;
            if !strategies.is_empty() {
                if cfgs.len() != 1 {
                    return Err(Failure::Validation(anyhow::anyhow!("--strategies needs exactly one --config")));
                }
                let algs = strategies
                    .iter()
                    .map(|s| Algorithm::parse(s).ok_or_else(|| anyhow::anyhow!("unknown strategy `{s}`")))
                    .collect::<anyhow::Result<Vec<_>>>()
                    .map_err(Failure::Validation)?;
                cfgs = strategy_variants(&cfgs[0], &algs);
            }
            let table = compare_strategies(&cfgs, &mut cache).map_err(classify)?;
            print!("{}", table.to_text());
            if let Some(p) = json {
                let text = serde_json::to_string_pretty(&table).map_err(|e| Failure::Runtime(e.into()))?;
                std::fs::write(&p, text)
                    .with_context(|| format!("writing {}", p.display()))
                    .map_err(Failure::Runtime)?;
            }
        }
        Command::Probe { which, config } => {
            let cfg = match config {
                Some(p) => {
                    let mut c = RunConfig::default();
                    let text = std::fs::read_to_string(&p)
                        .with_context(|| format!("reading {}", p.display()))
                        .map_err(Failure::Validation)?;
                    c.apply_str(&text).map_err(classify)?;
                    c
                }
                None => RunConfig::default(),
            };
            cfg.validate_values().map_err(classify)?;
            let (p, seed) = (&cfg.probe, cfg.seed);
            let report = match which {
                ProbeKind::Lemma1 => theory::lemma1_report(p, seed).map(serde_json::to_value),
                ProbeKind::Thm1 => theory::theorem1_report(p, seed).map(serde_json::to_value),
                ProbeKind::Thm2 => theory::theorem2_report(p, seed).map(serde_json::to_value),
                ProbeKind::Dissimilarity => theory::dissimilarity_report(p, seed).map(serde_json::to_value),
            }
            .map_err(classify)?
            .map_err(|e| Failure::Runtime(e.into()))?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.into()))?);
        }
        Command::ConfigReference => print!("{}", config_reference()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
