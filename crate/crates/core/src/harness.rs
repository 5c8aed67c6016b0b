//! Pretrain-then-finetune experiments, evaluation records and collapse
//! metrics.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agents::{learner_step, AgentHyper, AgentKind, ParamSet};
use crate::datasets::{mean_std, OfflineDataset};
use crate::envs::{EnvId, ScoreReference};
use crate::numerics::Rng;
use crate::replay::{Regime, ReplayBuffer};
use crate::rollout::{evaluate, Explorer};
use crate::{Error, Result};

/// Number of trailing evaluations averaged into a phase's final score.
pub const FINAL_WINDOW: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvId,
    pub dataset: Option<PathBuf>,
    pub pretrain_agent: AgentKind,
    pub finetune_agent: AgentKind,
    pub regime: Regime,
    pub pretrain_steps: u64,
    pub finetune_steps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub seeds: Vec<u64>,
    /// Fraction of the finetune evaluations searched for the collapse minimum.
    pub collapse_window: f64,
    /// Reset the TD3-C dual to `hyper.initial_dual` when finetuning starts.
    pub reset_dual: bool,
    pub hyper: AgentHyper,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: EnvId::PointMass2D,
            dataset: None,
            pretrain_agent: AgentKind::Td3Bc,
            finetune_agent: AgentKind::Td3,
            regime: Regime::PreloadUniform,
            pretrain_steps: 50_000,
            finetune_steps: 20_000,
            eval_interval: 500,
            eval_episodes: 10,
            seeds: (0..10).collect(),
            collapse_window: 0.1,
            reset_dual: false,
            hyper: AgentHyper::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.eval_interval == 0 || self.eval_episodes == 0 {
            return bad("eval_interval and eval_episodes must be positive".into());
        }
        for (name, steps) in [("pretrain_steps", self.pretrain_steps), ("finetune_steps", self.finetune_steps)] {
            if steps % self.eval_interval != 0 {
                return bad(format!("eval_interval {} does not divide {name} {steps}", self.eval_interval));
            }
        }
        if self.finetune_steps == 0 {
            return bad("finetune_steps must be positive".into());
        }
        if !(self.collapse_window > 0.0 && self.collapse_window <= 1.0) {
            return bad("collapse_window must lie in (0, 1]".into());
        }
        if let Regime::FixedRatio { ratio } = self.regime {
            if !(0.0..=1.0).contains(&ratio) {
                return bad(format!("fixed ratio {ratio} outside [0, 1]"));
            }
        }
        if (self.pretrain_steps > 0 || self.regime.preloads()) && self.dataset.is_none() {
            return bad("a dataset is required for pretraining or a preloading regime".into());
        }
        Ok(())
    }

    /// Short name used in summaries: `<env>-<dataset stem>`, without
    /// repeating the env if the stem already starts with it.
    pub fn task_name(&self) -> String {
        let env = self.env.to_string();
        match self.dataset.as_ref().and_then(|p| p.file_stem()) {
            Some(stem) => {
                let stem = stem.to_string_lossy();
                let rest = stem.strip_prefix(env.as_str()).map(|r| r.trim_start_matches(['-', '_']));
                match rest {
                    Some("") => env,
                    Some(rest) => format!("{env}-{rest}"),
                    None => format!("{env}-{stem}"),
                }
            }
            None => env,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        }
    }
}

/// One evaluation. `learner_step` counts steps within the phase; during
/// finetuning it is the number of environment steps taken. `stddev` is over
/// episode returns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub learner_step: u64,
    pub phase: Phase,
    pub mean_return: f64,
    pub normalized_score: f64,
    pub stddev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub records: Vec<EvalRecord>,
    pub offline_final: f64,
    pub online_final: f64,
    pub delta: f64,
    pub collapse_depth: f64,
    /// Finetune steps until the score is back at `offline_final`; `None`
    /// if it never recovers.
    pub recovery_steps: Option<u64>,
}

/// Per-seed random streams.
struct Streams {
    init: Rng,
    pretrain: Rng,
    finetune: Rng,
    explore: Rng,
    eval: Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let root = Rng::seed_from(seed);
        Self {
            init: root.substream("init"),
            pretrain: root.substream("pretrain"),
            finetune: root.substream("finetune"),
            explore: root.substream("explore"),
            eval: root.substream("eval"),
        }
    }
}

fn eval_record(config: &ExperimentConfig, params: &ParamSet, phase: Phase, step: u64, eval_rng: &Rng) -> Result<EvalRecord> {
    let spec = config.env.spec();
    let (mean_return, stddev) = evaluate(&spec, params, config.eval_episodes, eval_rng)?;
    Ok(EvalRecord {
        learner_step: step,
        phase,
        mean_return,
        normalized_score: ScoreReference::builtin(config.env).normalized_score(mean_return)?,
        stddev,
    })
}

fn check_dataset(config: &ExperimentConfig, dataset: &OfflineDataset) -> Result<()> {
    if dataset.env_id != config.env {
        return Err(Error::Config(format!(
            "dataset was generated on {}, config asks for {}",
            dataset.env_id, config.env
        )));
    }
    Ok(())
}

/// Fresh parameters for `seed`.
pub fn initial_params(config: &ExperimentConfig, seed: u64) -> ParamSet {
    ParamSet::init(&config.env.spec(), &config.hyper, &mut Streams::new(seed).init)
}

/// Offline training on the frozen dataset, evaluated at step 0 and every
/// `eval_interval` steps.
pub fn pretrain(config: &ExperimentConfig, dataset: Option<&OfflineDataset>, seed: u64) -> Result<(ParamSet, Vec<EvalRecord>)> {
    let mut streams = Streams::new(seed);
    let mut params = ParamSet::init(&config.env.spec(), &config.hyper, &mut streams.init);
    let mut records = vec![eval_record(config, &params, Phase::Pretrain, 0, &streams.eval)?];
    if config.pretrain_steps == 0 {
        return Ok((params, records));
    }
    let dataset = dataset.ok_or_else(|| Error::Config("pretraining needs a dataset".into()))?;
    check_dataset(config, dataset)?;
    if dataset.is_empty() {
        return Err(Error::Config("cannot pretrain on an empty dataset".into()));
    }
    let capacity = dataset.len().max(config.hyper.min_replay_size);
    let mut buffer = ReplayBuffer::new(capacity, config.hyper.min_replay_size, Regime::PreloadUniform)?;
    buffer.preload(dataset)?;
    for step in 1..=config.pretrain_steps {
        learner_step(config.pretrain_agent, &mut params, &buffer, &config.hyper, &mut streams.pretrain)?;
        if step % config.eval_interval == 0 {
            records.push(eval_record(config, &params, Phase::Pretrain, step, &streams.eval)?);
        }
    }
    Ok((params, records))
}

/// Online finetuning: one environment step then (once the buffer is ready)
/// one learner step, `finetune_steps` times.
///
/// `pretrain_records` supplies the offline final score; the returned run
/// contains them followed by the finetune evaluations.
pub fn finetune(
    config: &ExperimentConfig,
    mut params: ParamSet,
    dataset: Option<&OfflineDataset>,
    seed: u64,
    pretrain_records: Vec<EvalRecord>,
) -> Result<RunResult> {
    let spec = config.env.spec();
    let mut streams = Streams::new(seed);
    let hyper = &config.hyper;
    if config.reset_dual {
        params.dual = hyper.initial_dual;
    }
    let mut buffer = ReplayBuffer::new(hyper.replay_capacity, hyper.min_replay_size, config.regime)?;
    if config.regime.preloads() {
        let dataset = dataset.ok_or_else(|| Error::Config(format!("regime {} needs a dataset", config.regime.name())))?;
        check_dataset(config, dataset)?;
        buffer.preload(dataset)?;
    }
    let mut explorer = Explorer::new(&spec, streams.explore.clone());
    let mut records = pretrain_records;
    for step in 1..=config.finetune_steps {
        let t = explorer.step(&params, hyper, false)?;
        buffer.push(t)?;
        if buffer.is_ready() {
            learner_step(config.finetune_agent, &mut params, &buffer, hyper, &mut streams.finetune)?;
        }
        if step % config.eval_interval == 0 {
            records.push(eval_record(config, &params, Phase::Finetune, step, &streams.eval)?);
        }
    }
    run_result(seed, records, config.collapse_window)
}

/// Pretraining followed by finetuning for one seed.
pub fn run_seed(config: &ExperimentConfig, dataset: Option<&OfflineDataset>, seed: u64) -> Result<RunResult> {
    let (params, records) = pretrain(config, dataset, seed)?;
    finetune(config, params, dataset, seed, records)
}

/// Runs every configured seed, `parallel` at a time. Failures are reported
/// per seed; the other seeds still run.
pub fn run_seeds(config: &ExperimentConfig, dataset: Option<&OfflineDataset>, parallel: usize) -> Vec<(u64, Result<RunResult>)> {
    let parallel = parallel.max(1);
    let mut out = Vec::with_capacity(config.seeds.len());
    for chunk in config.seeds.chunks(parallel) {
        let results: Vec<_> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&seed| scope.spawn(move || (seed, run_seed(config, dataset, seed))))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("seed worker panicked"))
                .collect()
        });
        out.extend(results);
    }
    out
}

fn tail_mean(scores: &[f64]) -> f64 {
    let tail = &scores[scores.len().saturating_sub(FINAL_WINDOW)..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// Assembles a [`RunResult`] from a full record list.
pub fn run_result(seed: u64, records: Vec<EvalRecord>, window_fraction: f64) -> Result<RunResult> {
    let scores = |phase: Phase| -> Vec<f64> {
        records
            .iter()
            .filter(|r| r.phase == phase)
            .map(|r| r.normalized_score)
            .collect()
    };
    let (pre, post) = (scores(Phase::Pretrain), scores(Phase::Finetune));
    if pre.is_empty() || post.is_empty() {
        return Err(Error::InvalidArgument("run needs pretrain and finetune evaluations".into()));
    }
    let offline_final = tail_mean(&pre);
    let online_final = tail_mean(&post);
    let finetune: Vec<EvalRecord> = records.iter().filter(|r| r.phase == Phase::Finetune).copied().collect();
    let (collapse_depth, recovery_steps) = collapse_metrics(&finetune, offline_final, window_fraction)?;
    Ok(RunResult {
        seed,
        records,
        offline_final,
        online_final,
        delta: online_final - offline_final,
        collapse_depth,
        recovery_steps,
    })
}

/// `collapse_depth = max(0, offline_final - min score over the first
/// window_fraction of the finetune evaluations)`; `recovery_steps` is the
/// first evaluation step whose score is back at `offline_final`.
pub fn collapse_metrics(records: &[EvalRecord], offline_final: f64, window_fraction: f64) -> Result<(f64, Option<u64>)> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no finetune evaluations".into()));
    }
    let window = ((records.len() as f64 * window_fraction).ceil() as usize).clamp(1, records.len());
    let min = records[..window]
        .iter()
        .map(|r| r.normalized_score)
        .fold(f64::INFINITY, f64::min);
    let depth = (offline_final - min).max(0.0);
    let recovery = records
        .iter()
        .find(|r| r.normalized_score >= offline_final)
        .map(|r| r.learner_step);
    Ok((depth, recovery))
}

/// Mean, population standard deviation and median.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let (mean, std) = mean_std(xs);
        Self {
            mean,
            std,
            median: median(xs),
        }
    }
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Per-seed figures kept in the summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub offline: f64,
    pub online: f64,
    pub delta: f64,
    pub collapse_depth: f64,
    pub recovery_steps: Option<u64>,
}

/// One row of a results table, aggregated over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub task: String,
    pub pretrain_agent: AgentKind,
    pub agent: AgentKind,
    pub regime: Regime,
    pub offline: Stat,
    pub online: Stat,
    pub delta: Stat,
    pub collapse_depth: Stat,
    pub seeds: Vec<SeedSummary>,
}

/// Aggregates per-seed results of one configuration.
pub fn aggregate(config: &ExperimentConfig, results: &[RunResult]) -> Result<Summary> {
    if results.is_empty() {
        return Err(Error::InvalidArgument("nothing to aggregate".into()));
    }
    let pick = |f: fn(&RunResult) -> f64| -> Vec<f64> { results.iter().map(f).collect() };
    Ok(Summary {
        task: config.task_name(),
        pretrain_agent: config.pretrain_agent,
        agent: config.finetune_agent,
        regime: config.regime,
        offline: Stat::of(&pick(|r| r.offline_final)),
        online: Stat::of(&pick(|r| r.online_final)),
        delta: Stat::of(&pick(|r| r.delta)),
        collapse_depth: Stat::of(&pick(|r| r.collapse_depth)),
        seeds: results
            .iter()
            .map(|r| SeedSummary {
                seed: r.seed,
                offline: r.offline_final,
                online: r.online_final,
                delta: r.delta,
                collapse_depth: r.collapse_depth,
                recovery_steps: r.recovery_steps,
            })
            .collect(),
    })
}

pub const CSV_HEADER: &str = "learner_step,phase,mean_return,normalized_score,stddev";

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

/// Metrics CSV with header [`CSV_HEADER`], one row per evaluation.
pub fn metrics_csv(records: &[EvalRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    let mut text = String::from_utf8(bytes).expect("csv output is UTF-8");
    if records.is_empty() {
        text = format!("{CSV_HEADER}\n");
    }
    Ok(text)
}

pub fn write_metrics_csv(records: &[EvalRecord], path: &Path) -> Result<()> {
    fs::write(path, metrics_csv(records)?).map_err(|e| Error::io(path, e))
}

/// Parses a file written by [`write_metrics_csv`].
pub fn read_metrics_csv(path: &Path) -> Result<Vec<EvalRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let header = r.headers().map_err(|e| csv_error(path, e))?.iter().collect::<Vec<_>>().join(",");
    if header != CSV_HEADER {
        return Err(Error::Format(format!("{}: unexpected header '{header}'", path.display())));
    }
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

/// One-sided sign test: probability of at least `wins` successes out of
/// `trials` fair coin flips.
pub fn sign_test_p(wins: usize, trials: usize) -> f64 {
    if trials == 0 {
        return 1.0;
    }
    let mut total = 0.0;
    let mut c = 1.0f64;
    for k in 0..=trials {
        if k >= wins {
            total += c;
        }
        c = c * (trials - k) as f64 / (k + 1) as f64;
    }
    total / 2f64.powi(trials as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_names() {
        let named = |path: Option<&str>| ExperimentConfig {
            dataset: path.map(PathBuf::from),
            ..ExperimentConfig::default()
        }
        .task_name();
        assert_eq!(named(None), "pointmass2d");
        assert_eq!(named(Some("data/medium.bin")), "pointmass2d-medium");
        assert_eq!(named(Some("data/pointmass2d-medium.bin")), "pointmass2d-medium");
        assert_eq!(named(Some("pointmass2d_medium_replay.bin")), "pointmass2d-medium_replay");
        assert_eq!(named(Some("pointmass2d.bin")), "pointmass2d");
    }

    fn rec(step: u64, score: f64) -> EvalRecord {
        EvalRecord {
            learner_step: step,
            phase: Phase::Finetune,
            mean_return: score,
            normalized_score: score,
            stddev: 0.0,
        }
    }

    #[test]
    fn collapse_examples() {
        let up: Vec<_> = (1..=10).map(|i| rec(500 * i, 80.0 + i as f64)).collect();
        assert_eq!(collapse_metrics(&up, 80.0, 0.1).unwrap(), (0.0, Some(500)));
        let dip = vec![rec(500, 30.0), rec(1000, 60.0), rec(1500, 85.0)];
        assert_eq!(collapse_metrics(&dip, 80.0, 0.5).unwrap(), (50.0, Some(1500)));
        let never = vec![rec(500, 10.0), rec(1000, 20.0)];
        assert_eq!(collapse_metrics(&never, 80.0, 0.1).unwrap().1, None);
        assert!(collapse_metrics(&[], 1.0, 0.1).is_err());
    }

    #[test]
    fn sign_test_values() {
        assert_eq!(sign_test_p(10, 10), 1.0 / 1024.0);
        assert_eq!(sign_test_p(9, 10), 11.0 / 1024.0);
        assert!(sign_test_p(8, 10) > 0.05);
        assert_eq!(sign_test_p(0, 10), 1.0);
    }

    #[test]
    fn csv_header_and_rows() {
        let text = metrics_csv(&[rec(500, 12.5)]).unwrap();
        assert_eq!(text, format!("{CSV_HEADER}\n500,finetune,12.5,12.5,0.0\n"));
        assert_eq!(metrics_csv(&[]).unwrap(), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn config_validation() {
        let mut c = ExperimentConfig {
            dataset: Some("d.bin".into()),
            ..ExperimentConfig::default()
        };
        c.validate().unwrap();
        c.eval_interval = 300;
        assert!(c.validate().is_err());
        c.eval_interval = 500;
        c.seeds.clear();
        assert!(c.validate().is_err());
        let none = ExperimentConfig::default();
        assert!(none.validate().is_err());
        let json = serde_json::to_string(&c).unwrap();
        assert!(serde_json::from_str::<ExperimentConfig>(&json.replace("\"env\"", "\"envv\"")).is_err());
    }
}
