use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dnsrec::config::RunConfig;
use dnsrec::data::Purpose;
use dnsrec::experiment::{self, PreparedData};
use dnsrec::flops::FlopsTable;
use dnsrec::io::write_atomic;
use dnsrec::metrics::{evaluate_model, popularity_baseline, MetricsReport};

/// Differentiable FLOPs-constrained architecture search for sequential recommenders.
#[derive(Parser, Debug)]
#[command(name = "dnsrec", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, short = 'c')]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set hidden=16`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run directory (config key `output`).
    #[arg(long, short = 'o')]
    output: Option<PathBuf>,
    /// Interaction file (config key `data`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Use the generated Markov dataset even if the config names a file.
    #[arg(long)]
    synthetic: bool,
    /// Root seed (config key `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Resource penalty weight (config key `lambda`).
    #[arg(long)]
    lambda: Option<f64>,
    /// Layers per data-aware gate (config key `gate_layers`).
    #[arg(long)]
    gate_layers: Option<usize>,
    /// Log verbosity on stderr.
    #[arg(long, default_value = "info")]
    log_level: log::LevelFilter,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Valid,
    Test,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load or generate interactions, split them and write the id map.
    PrepareData(Common),
    /// Run the bilevel search; writes descriptor, log, FLOPs table and checkpoint.
    Search(Common),
    /// Compact the searched architecture and retrain it.
    Retrain {
        #[command(flatten)]
        common: Common,
        /// Architecture descriptor (default: <output>/descriptor.json).
        #[arg(long)]
        descriptor: Option<PathBuf>,
        /// Supernet checkpoint (default: <output>/supernet.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a retrained compact model or the popularity baseline.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Architecture descriptor (default: <output>/descriptor.json).
        #[arg(long)]
        descriptor: Option<PathBuf>,
        /// Compact checkpoint (default: <output>/compact.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Rank by training frequency instead of a model.
        #[arg(long)]
        popularity: bool,
    },
    /// Print the FLOPs table as CSV (candidate, layer, flops).
    FlopsReport(Common),
    /// prepare-data, search, retrain and evaluate in one run directory.
    RunAll(Common),
    /// One search per lambda and seed; reports median selected FLOPs.
    SweepLambda {
        #[command(flatten)]
        common: Common,
        /// Comma-separated lambdas (config key `sweep_lambdas`).
        lambdas: Option<String>,
    },
    /// Search and retrain for each gate depth; reports metrics and FLOPs.
    SweepGateDepth {
        #[command(flatten)]
        common: Common,
        /// Comma-separated gate depths (config key `sweep_gate_layers`).
        depths: Option<String>,
    },
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path).with_context(|| format!("config {}", path.display()))?,
        None => RunConfig::default(),
    };
    for kv in &common.overrides {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(o) = &common.output {
        cfg.output = o.clone();
    }
    if let Some(d) = &common.data {
        cfg.data = Some(d.clone());
    }
    if common.synthetic {
        cfg.data = None;
    }
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if let Some(l) = common.lambda {
        cfg.train.lambda = l;
    }
    if let Some(g) = common.gate_layers {
        cfg.supernet.gate_layers = g;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn prepared(cfg: &RunConfig) -> Result<PreparedData> {
    Ok(experiment::prepare(cfg)?)
}

fn or_default(path: &Option<PathBuf>, dir: &Path, name: &str) -> PathBuf {
    path.clone().unwrap_or_else(|| dir.join(name))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PrepareData(c) => {
            let cfg = resolve(&c)?;
            let data = prepared(&cfg)?;
            experiment::write_prepared(&cfg.output, &cfg, &data)?;
            println!(
                "{} users, {} items, {} interactions -> {}",
                data.dataset.num_users(),
                data.dataset.num_items,
                data.dataset.num_interactions(),
                cfg.output.display()
            );
        }
        Command::Search(c) => {
            let cfg = resolve(&c)?;
            let data = prepared(&cfg)?;
            let art = experiment::run_search(&cfg, &data, &cfg.output)?;
            print_json(&art.result.choice)?;
        }
        Command::Retrain {
            common,
            descriptor,
            checkpoint,
        } => {
            let cfg = resolve(&common)?;
            let data = prepared(&cfg)?;
            let choice = experiment::read_descriptor(&or_default(&descriptor, &cfg.output, experiment::DESCRIPTOR))?;
            let ckpt = or_default(&checkpoint, &cfg.output, experiment::SUPERNET_CKPT);
            let net = experiment::load_supernet(&cfg, &data, &choice, &ckpt)?;
            let (_, art) = experiment::run_retrain(&cfg, &data, &net, &choice, &cfg.output)?;
            print_json(&art.test)?;
        }
        Command::Evaluate {
            common,
            descriptor,
            checkpoint,
            split,
            popularity,
        } => {
            let cfg = resolve(&common)?;
            let data = prepared(&cfg)?;
            let purpose = match split {
                SplitArg::Valid => Purpose::Valid,
                SplitArg::Test => Purpose::Test,
            };
            let eval_cfg = cfg.train.eval_config(cfg.train.retrain_batch.max(256));
            let report: MetricsReport = if popularity {
                evaluate_model(&popularity_baseline(&data.split)?, &data.split, purpose, &eval_cfg)?
            } else {
                let choice = experiment::read_descriptor(&or_default(&descriptor, &cfg.output, experiment::DESCRIPTOR))?;
                let ckpt = or_default(&checkpoint, &cfg.output, experiment::COMPACT_CKPT);
                let model = experiment::load_compact(&cfg, &data, &choice, &ckpt)?;
                evaluate_model(&model, &data.split, purpose, &eval_cfg)?
            };
            print_json(&report)?;
        }
        Command::FlopsReport(c) => {
            let mut cfg = resolve(&c)?;
            cfg.supernet.num_items = cfg.supernet.num_items.max(1);
            let csv = FlopsTable::build(&cfg.supernet)?.to_csv();
            if c.output.is_some() {
                write_atomic(&cfg.output.join(experiment::FLOPS_CSV), csv.as_bytes())?;
            }
            print!("{csv}");
        }
        Command::RunAll(c) => {
            let cfg = resolve(&c)?;
            print_json(&experiment::run_all(&cfg, &cfg.output)?)?;
        }
        Command::SweepLambda { common, lambdas } => {
            let mut cfg = resolve(&common)?;
            if let Some(l) = lambdas {
                cfg.set("sweep_lambdas", &l)?;
            }
            if cfg.sweep_lambdas.is_empty() {
                bail!("no lambdas to sweep");
            }
            let sweep = experiment::sweep_lambda(&cfg, &cfg.output)?;
            for (l, f) in &sweep.medians {
                println!("lambda={l} median_flops={f}");
            }
            println!("non_increasing={}", sweep.non_increasing);
        }
        Command::SweepGateDepth { common, depths } => {
            let mut cfg = resolve(&common)?;
            if let Some(d) = depths {
                cfg.set("sweep_gate_layers", &d)?;
            }
            if cfg.sweep_gate_layers.is_empty() {
                bail!("no gate depths to sweep");
            }
            for p in experiment::sweep_gate_depth(&cfg, &cfg.output)? {
                println!(
                    "gate_layers={} seed={} flops={} reference_flops={} recall={} mrr={} ndcg={}",
                    p.gate_layers, p.seed, p.choice.flops, p.reference_flops, p.test.recall, p.test.mrr, p.test.ndcg
                );
            }
        }
    }
    Ok(())
}

fn level(cli: &Cli) -> log::LevelFilter {
    match &cli.command {
        Command::PrepareData(c) | Command::Search(c) | Command::FlopsReport(c) | Command::RunAll(c) => c.log_level,
        Command::Retrain { common, .. }
        | Command::Evaluate { common, .. }
        | Command::SweepLambda { common, .. }
        | Command::SweepGateDepth { common, .. } => common.log_level,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::new().filter_level(level(&cli)).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", chain.join(": "));
            ExitCode::FAILURE
        }
    }
}
