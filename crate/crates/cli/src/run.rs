use std::fs;
use std::path::{Path, PathBuf};

use o2o_core::datasets::{self, OfflineDataset, Recipe};
use o2o_core::harness::{self, RunResult};

use crate::config::{read_json, CliConfig};
use crate::{Failure, RunArgs};

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

/// Applies command-line overrides on top of the config file.
fn effective_config(args: &RunArgs) -> Result<CliConfig, Failure> {
    let mut cfg: CliConfig = read_json(&args.config)?;
    let exp = &mut cfg.experiment;
    if let Some(d) = &args.dataset {
        exp.dataset = Some(d.clone());
    }
    if let Some(s) = &args.seeds {
        exp.seeds = s.clone();
    }
    if let Some(a) = args.pretrain_agent {
        exp.pretrain_agent = a;
    }
    if let Some(a) = args.finetune_agent {
        exp.finetune_agent = a;
    }
    if let Some(r) = args.regime {
        exp.regime = r;
    }
    if let Some(n) = args.pretrain_steps {
        exp.pretrain_steps = n;
    }
    if let Some(n) = args.finetune_steps {
        exp.finetune_steps = n;
    }
    if let Some(n) = args.eval_interval {
        exp.eval_interval = n;
    }
    if let Some(n) = args.eval_episodes {
        exp.eval_episodes = n;
    }
    if let Some(h) = args.hidden {
        exp.hyper.hidden = h;
    }
    if let Some(b) = args.batch_size {
        exp.hyper.batch_size = b;
    }
    exp.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(r) = &cfg.dataset_recipe {
        if r.recipe == Recipe::MediumReplay {
            r.medium_replay.hyper.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        }
    }
    Ok(cfg)
}

fn out_dir(args: &RunArgs, cfg: &CliConfig) -> PathBuf {
    if let Some(o) = &args.out {
        return o.clone();
    }
    if let Some(o) = &cfg.out_dir {
        return o.clone();
    }
    let stem = args
        .config
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    args.out_root.clone().unwrap_or_else(|| PathBuf::from("runs")).join(stem)
}

/// Loads the configured dataset, generating it first if a recipe is given
/// and the file is missing.
fn dataset(cfg: &CliConfig) -> Result<Option<OfflineDataset>, Failure> {
    let Some(path) = &cfg.experiment.dataset else {
        return Ok(None);
    };
    let spec = cfg.experiment.env.spec();
    let d = if path.exists() {
        datasets::load(path).map_err(|e| Failure::Usage(e.to_string()))?
    } else {
        let Some(r) = &cfg.dataset_recipe else {
            return Err(Failure::Usage(format!(
                "dataset {} does not exist and no dataset_recipe is configured",
                path.display()
            )));
        };
        eprintln!("generating {} dataset at {}", r.recipe.as_str(), path.display());
        let d = match r.recipe {
            Recipe::Medium => datasets::generate_medium(&spec, r.seed, r.size),
            Recipe::MediumReplay => datasets::generate_medium_replay(&spec, r.seed, r.size, &r.medium_replay),
        }
        .map_err(runtime)?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(runtime)?;
        }
        datasets::save(&d, path).map_err(runtime)?;
        d
    };
    if d.env_id != spec.id {
        return Err(Failure::Usage(format!(
            "dataset {} was generated for {}, config asks for {}",
            path.display(),
            d.env_id,
            spec.id
        )));
    }
    Ok(Some(d))
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    fs::write(path, text + "\n").map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

pub fn run(args: RunArgs) -> Result<(), Failure> {
    let cfg = effective_config(&args)?;
    let dir = out_dir(&args, &cfg);
    let data = dataset(&cfg)?;
    fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    write_json(&cfg, &dir.join("config.json"))?;

    let exp = &cfg.experiment;
    eprintln!(
        "{}: {} -> {} ({}), {} seeds, writing to {}",
        exp.task_name(),
        exp.pretrain_agent,
        exp.finetune_agent,
        exp.regime.name(),
        exp.seeds.len(),
        dir.display()
    );
    let mut ok: Vec<RunResult> = Vec::new();
    let mut failed = Vec::new();
    for (seed, result) in harness::run_seeds(exp, data.as_ref(), args.parallel) {
        match result {
            Ok(r) => {
                harness::write_metrics_csv(&r.records, &dir.join(format!("seed_{seed}.csv"))).map_err(runtime)?;
                eprintln!(
                    "seed {seed}: offline {:.2} online {:.2} delta {:.2} collapse {:.2}",
                    r.offline_final, r.online_final, r.delta, r.collapse_depth
                );
                ok.push(r);
            }
            Err(e) => {
                eprintln!("seed {seed} failed: {e}");
                failed.push(seed);
            }
        }
    }
    if ok.is_empty() {
        return Err(Failure::Runtime("every seed failed".into()));
    }
    let summary = harness::aggregate(exp, &ok).map_err(runtime)?;
    write_json(&summary, &dir.join("summary.json"))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("seeds {failed:?} failed; summary covers the rest")))
    }
}
