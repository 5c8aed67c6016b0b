//! `o2o`: generate offline datasets, run pretrain/finetune experiments and
//! tabulate their results.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 when a
//! run fails at runtime.

mod config;
mod report;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use o2o_core::datasets::{self, MediumReplayConfig, Recipe};
use o2o_core::{AgentKind, EnvId, Regime};

#[derive(Debug, Parser)]
#[command(name = "o2o", version, about = "Offline-to-online RL finetuning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate an offline dataset and its JSON sidecar.
    GenerateDataset(GenerateArgs),
    /// Pretrain and finetune every configured seed.
    Run(RunArgs),
    /// Merge run summaries into one table and plot-ready curve files.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    env: EnvId,
    /// `medium` or `medium_replay`.
    #[arg(long)]
    recipe: Recipe,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50_000)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
    /// JSON settings for the medium-replay generator.
    #[arg(long)]
    replay_config: Option<PathBuf>,
    /// Hidden width of the medium-replay agent.
    #[arg(long)]
    hidden: Option<usize>,
    /// Batch size of the medium-replay agent.
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Experiment config (JSON). Flags below override its keys.
    #[arg(long)]
    config: PathBuf,
    /// Output directory. Defaults to `<O2O_OUT_DIR or runs>/<config stem>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of seeds run concurrently.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    #[arg(long, env = "O2O_OUT_DIR", hide_env_values = true)]
    out_root: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    pretrain_agent: Option<AgentKind>,
    #[arg(long)]
    finetune_agent: Option<AgentKind>,
    /// `preload_uniform`, `online_only` or `fixed_ratio:<rho>`.
    #[arg(long, value_parser = parse_regime)]
    regime: Option<Regime>,
    #[arg(long)]
    pretrain_steps: Option<u64>,
    #[arg(long)]
    finetune_steps: Option<u64>,
    #[arg(long)]
    eval_interval: Option<u64>,
    #[arg(long)]
    eval_episodes: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Summary files or directories searched for `summary.json`.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Where to write `table.csv` and the per-curve CSVs.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn parse_regime(s: &str) -> Result<Regime, String> {
    match s {
        "preload_uniform" | "preload" => Ok(Regime::PreloadUniform),
        "online_only" | "online" => Ok(Regime::OnlineOnly),
        _ => {
            let ratio = s
                .strip_prefix("fixed_ratio:")
                .ok_or_else(|| format!("unknown regime '{s}'"))?
                .parse::<f64>()
                .map_err(|e| format!("bad ratio in '{s}': {e}"))?;
            if !(0.0..=1.0).contains(&ratio) {
                return Err(format!("ratio {ratio} outside [0, 1]"));
            }
            Ok(Regime::FixedRatio { ratio })
        }
    }
}

/// A failure and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => m,
        }
    }
}

fn generate(args: GenerateArgs) -> Result<(), Failure> {
    let spec = args.env.spec();
    let dataset = match args.recipe {
        Recipe::Medium => datasets::generate_medium(&spec, args.seed, args.size),
        Recipe::MediumReplay => {
            let mut cfg: MediumReplayConfig = match &args.replay_config {
                Some(path) => config::read_json(path)?,
                None => MediumReplayConfig::default(),
            };
            if let Some(h) = args.hidden {
                cfg.hyper.hidden = h;
            }
            if let Some(b) = args.batch_size {
                cfg.hyper.batch_size = b;
            }
            cfg.hyper.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            datasets::generate_medium_replay(&spec, args.seed, args.size, &cfg)
        }
    };
    let dataset = dataset.map_err(|e| match e {
        o2o_core::Error::InvalidArgument(m) => Failure::Usage(m),
        other => Failure::Runtime(other.to_string()),
    })?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Failure::Runtime(format!("{}: {e}", parent.display())))?;
    }
    datasets::save(&dataset, &args.out).map_err(|e| Failure::Runtime(e.to_string()))?;
    eprintln!(
        "wrote {} transitions to {} (behavior score {})",
        dataset.len(),
        args.out.display(),
        dataset
            .meta
            .behavior
            .as_ref()
            .map(|b| format!("{:.1}", b.score_mean))
            .unwrap_or_else(|| "n/a".into())
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenerateDataset(args) => generate(args),
        Command::Run(args) => run::run(args),
        Command::Report(args) => report::report(&args.inputs, args.out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
