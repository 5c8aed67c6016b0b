//! Offline datasets ("medium" and "medium-replay" analogues) and their
//! on-disk format.
//!
//! Binary layout, little-endian:
//!
//! ```text
//! header:  "O2OD" | version u32 | env-id len u32 | env-id UTF-8 | recipe u8
//!          | state_dim u32 | action_dim u32 | count u64 | seed u64
//! record:  state f32[state_dim] | action f32[action_dim] | reward f32
//!          | next_state f32[state_dim] | terminal u8
//! ```
//!
//! Values are rounded to `f32` when a dataset is generated, so a save/load
//! round trip is exact. Behavior statistics live in a JSON sidecar next to
//! the binary file (`<file>.json`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agents::{self, AgentHyper, AgentKind, ParamSet};
use crate::envs::{self, EnvId, EnvSpec, ScoreReference, ScriptedPolicy};
use crate::numerics::Rng;
use crate::replay::{Regime, ReplayBuffer};
use crate::rollout::{evaluate, Explorer};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"O2OD";
pub const FORMAT_VERSION: u32 = 1;

/// Where a transition came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Offline,
    Online,
}

/// One environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    /// True only when the episode entered a failure state; step-limit
    /// truncation is not terminal.
    pub terminal: bool,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    Medium,
    MediumReplay,
}

impl Recipe {
    fn code(self) -> u8 {
        match self {
            Recipe::Medium => 0,
            Recipe::MediumReplay => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Recipe::Medium),
            1 => Ok(Recipe::MediumReplay),
            other => Err(Error::Format(format!("unknown recipe code {other}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Recipe::Medium => "medium",
            Recipe::MediumReplay => "medium_replay",
        }
    }
}

impl std::str::FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "medium" => Ok(Recipe::Medium),
            "medium_replay" | "medium-replay" => Ok(Recipe::MediumReplay),
            other => Err(Error::InvalidArgument(format!("unknown recipe '{other}'"))),
        }
    }
}

/// Returns of the complete episodes contained in a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorStats {
    pub episodes: usize,
    pub return_mean: f64,
    pub return_std: f64,
    pub score_mean: f64,
    pub score_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub count: u64,
    pub behavior: Option<BehaviorStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub env_id: EnvId,
    pub recipe: Recipe,
    pub state_dim: usize,
    pub action_dim: usize,
    pub transitions: Vec<Transition>,
    pub meta: DatasetMeta,
}

/// JSON sidecar written next to a binary dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub env_id: EnvId,
    pub recipe: Recipe,
    pub state_dim: usize,
    pub action_dim: usize,
    pub count: u64,
    pub seed: u64,
    pub behavior: Option<BehaviorStats>,
}

impl OfflineDataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn sidecar(&self) -> Sidecar {
        Sidecar {
            env_id: self.env_id,
            recipe: self.recipe,
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            count: self.meta.count,
            seed: self.meta.seed,
            behavior: self.meta.behavior.clone(),
        }
    }

    /// Size in bytes of the binary encoding.
    pub fn encoded_len(&self) -> usize {
        header_len(self.env_id.as_str()) + self.len() * record_len(self.state_dim, self.action_dim)
    }
}

fn q(x: f64) -> f64 {
    x as f32 as f64
}

fn quantized(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| q(x)).collect()
}

fn behavior_stats(env: EnvId, returns: &[f64]) -> Option<BehaviorStats> {
    if returns.is_empty() {
        return None;
    }
    let reference = ScoreReference::builtin(env);
    let scores: Vec<f64> = returns
        .iter()
        .map(|&r| reference.normalized_score(r).expect("builtin reference is valid"))
        .collect();
    let (return_mean, return_std) = mean_std(returns);
    let (score_mean, score_std) = mean_std(&scores);
    Some(BehaviorStats {
        episodes: returns.len(),
        return_mean,
        return_std,
        score_mean,
        score_std,
    })
}

pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Rollouts of the scripted medium policy totalling exactly `n` transitions.
///
/// Episode `k` draws its reset and noise from substream `("medium", k)`.
pub fn generate_medium(spec: &EnvSpec, seed: u64, n: usize) -> Result<OfflineDataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    let root = Rng::seed_from(seed);
    let mut transitions = Vec::with_capacity(n);
    let mut returns = Vec::new();
    let mut episode = 0u64;
    while transitions.len() < n {
        let mut rng = root.substream_indexed("medium", episode);
        episode += 1;
        let mut state = envs::reset(spec, &mut rng);
        let mut total = 0.0;
        while !state.terminal && transitions.len() < n {
            let a = envs::scripted_action(spec, ScriptedPolicy::Medium, &state.observation, &mut rng);
            let out = envs::step(spec, &state, &a)?;
            total += out.reward;
            transitions.push(Transition {
                state: quantized(&state.observation),
                action: quantized(&out.applied_action),
                reward: q(out.reward),
                next_state: quantized(&out.next.observation),
                terminal: out.next.failed,
                provenance: Provenance::Offline,
            });
            state = out.next;
        }
        if state.terminal {
            returns.push(total);
        }
    }
    Ok(OfflineDataset {
        env_id: spec.id,
        recipe: Recipe::Medium,
        state_dim: spec.state_dim,
        action_dim: spec.action_dim,
        meta: DatasetMeta {
            seed,
            count: n as u64,
            behavior: behavior_stats(spec.id, &returns),
        },
        transitions,
    })
}

/// Settings for the medium-replay generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MediumReplayConfig {
    pub hyper: AgentHyper,
    /// Normalized score at which the agent is considered early-stopped.
    pub target_score: f64,
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Uniform-random actions before learning starts.
    pub warmup_steps: usize,
    pub max_env_steps: usize,
}

impl Default for MediumReplayConfig {
    fn default() -> Self {
        Self {
            hyper: AgentHyper::default(),
            target_score: 45.0,
            eval_every: 1000,
            eval_episodes: 10,
            warmup_steps: 25_000,
            max_env_steps: 200_000,
        }
    }
}

/// The replay buffer of a TD3 agent trained online from scratch until its
/// evaluation score first reaches `target_score`.
///
/// The agent's buffer holds the `n` most recent transitions. If the target
/// is reached before `n` transitions exist, the stopped agent keeps acting
/// with exploration noise (no further learning) until the buffer is full.
pub fn generate_medium_replay(spec: &EnvSpec, seed: u64, n: usize, config: &MediumReplayConfig) -> Result<OfflineDataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    let hyper = &config.hyper;
    let reference = ScoreReference::builtin(spec.id);
    let root = Rng::seed_from(seed);
    let mut params = ParamSet::init(spec, hyper, &mut root.substream("init"));
    let mut learner_rng = root.substream("learner");
    let mut buffer = ReplayBuffer::new(n, hyper.batch_size.min(n).max(1), Regime::OnlineOnly)?;
    let mut explorer = Explorer::new(spec, root.substream("explore"));
    let eval_rng = root.substream("eval");

    let mut steps = 0usize;
    let mut scores = Vec::new();
    let reached = loop {
        if steps >= config.max_env_steps {
            break false;
        }
        let random = steps < config.warmup_steps;
        let t = explorer.step(&params, hyper, random)?;
        buffer.push(t)?;
        steps += 1;
        if !random && buffer.len() >= buffer.min_size() {
            agents::learner_step(AgentKind::Td3, &mut params, &buffer, hyper, &mut learner_rng)?;
        }
        if steps.is_multiple_of(config.eval_every) {
            let rec = evaluate(spec, &params, config.eval_episodes, &eval_rng)?;
            let score = reference.normalized_score(rec.0)?;
            scores.push(score);
            if score >= config.target_score {
                break true;
            }
        }
    };
    if !reached {
        return Err(Error::BandNotReached(format!(
            "{} env steps without reaching score {} (evaluation scores: {:?})",
            steps, config.target_score, scores
        )));
    }
    while buffer.len() < n {
        let t = explorer.step(&params, hyper, false)?;
        buffer.push(t)?;
    }

    let mut transitions: Vec<Transition> = buffer
        .iter()
        .map(|t| Transition {
            state: quantized(&t.state),
            action: quantized(&t.action),
            reward: q(t.reward),
            next_state: quantized(&t.next_state),
            terminal: t.terminal,
            provenance: Provenance::Offline,
        })
        .collect();
    transitions.truncate(n);
    let returns = episode_returns(spec, &transitions);
    Ok(OfflineDataset {
        env_id: spec.id,
        recipe: Recipe::MediumReplay,
        state_dim: spec.state_dim,
        action_dim: spec.action_dim,
        meta: DatasetMeta {
            seed,
            count: transitions.len() as u64,
            behavior: behavior_stats(spec.id, &returns),
        },
        transitions,
    })
}

/// Returns of the complete episodes in a transition sequence.
///
/// Episodes are delimited by failure or by a run of `episode_length`
/// consecutive transitions; a partial episode at either end is skipped.
pub fn episode_returns(spec: &EnvSpec, transitions: &[Transition]) -> Vec<f64> {
    let mut returns = Vec::new();
    let mut total = 0.0;
    let mut len = 0usize;
    let mut started_clean = false;
    for (i, t) in transitions.iter().enumerate() {
        if len == 0 {
            // An episode starts where the previous one ended; the first
            // transition of the sequence may be mid-episode.
            started_clean = i > 0;
        }
        total += t.reward;
        len += 1;
        let continues = transitions
            .get(i + 1)
            .map(|n| n.state == t.next_state)
            .unwrap_or(false);
        if t.terminal || len == spec.episode_length || !continues {
            if started_clean && (t.terminal || len == spec.episode_length) {
                returns.push(total);
            }
            total = 0.0;
            len = 0;
        }
    }
    returns
}

/// Per-dimension standard deviation of the stored actions.
pub fn action_stddev(dataset: &OfflineDataset) -> Vec<f64> {
    (0..dataset.action_dim)
        .map(|d| {
            let xs: Vec<f64> = dataset.transitions.iter().map(|t| t.action[d]).collect();
            mean_std(&xs).1
        })
        .collect()
}

/// Mean Euclidean nearest-neighbor distance between states of a uniform
/// subsample (without replacement) of `sample` transitions.
pub fn state_coverage(dataset: &OfflineDataset, sample: usize, seed: u64) -> f64 {
    let n = dataset.len();
    let k = sample.min(n);
    if k < 2 {
        return 0.0;
    }
    let mut rng = Rng::seed_from(seed).substream("coverage");
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + rng.index(n - i);
        idx.swap(i, j);
    }
    let pts: Vec<&[f64]> = idx[..k].iter().map(|&i| dataset.transitions[i].state.as_slice()).collect();
    let mut total = 0.0;
    for (i, a) in pts.iter().enumerate() {
        let mut best = f64::INFINITY;
        for (j, b) in pts.iter().enumerate() {
            if i != j {
                let d: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
                best = best.min(d);
            }
        }
        total += best.sqrt();
    }
    total / k as f64
}

fn header_len(env: &str) -> usize {
    4 + 4 + 4 + env.len() + 1 + 4 + 4 + 8 + 8
}

fn record_len(state_dim: usize, action_dim: usize) -> usize {
    4 * (2 * state_dim + action_dim + 1) + 1
}

/// Binary encoding of a dataset (no sidecar).
pub fn encode(dataset: &OfflineDataset) -> Vec<u8> {
    let env = dataset.env_id.as_str();
    let mut out = Vec::with_capacity(dataset.encoded_len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(env.len() as u32).to_le_bytes());
    out.extend_from_slice(env.as_bytes());
    out.push(dataset.recipe.code());
    out.extend_from_slice(&(dataset.state_dim as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.action_dim as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.transitions.len() as u64).to_le_bytes());
    out.extend_from_slice(&dataset.meta.seed.to_le_bytes());
    let put = |out: &mut Vec<u8>, xs: &[f64]| {
        for &x in xs {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    };
    for t in &dataset.transitions {
        put(&mut out, &t.state);
        put(&mut out, &t.action);
        put(&mut out, &[t.reward]);
        put(&mut out, &t.next_state);
        out.push(t.terminal as u8);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated file: needed {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

/// Parses the binary encoding. Behavior statistics are not part of it.
pub fn decode(bytes: &[u8]) -> Result<OfflineDataset> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let env_len = r.u32()? as usize;
    let env_str = std::str::from_utf8(r.take(env_len)?)
        .map_err(|_| Error::Format("environment id is not UTF-8".into()))?;
    let env_id: EnvId = env_str
        .parse()
        .map_err(|_| Error::Format(format!("unknown environment id '{env_str}'")))?;
    let recipe = Recipe::from_code(r.take(1)?[0])?;
    let state_dim = r.u32()? as usize;
    let action_dim = r.u32()? as usize;
    let spec = env_id.spec();
    if state_dim != spec.state_dim || action_dim != spec.action_dim {
        return Err(Error::Format(format!(
            "dims ({state_dim}, {action_dim}) do not match {env_id} ({}, {})",
            spec.state_dim, spec.action_dim
        )));
    }
    let count = r.u64()?;
    let seed = r.u64()?;
    let body = bytes.len() - r.pos;
    let rec = record_len(state_dim, action_dim);
    if (body as u64) != count.saturating_mul(rec as u64) {
        return Err(Error::Format(format!(
            "body holds {body} bytes, header promises {count} records of {rec} bytes"
        )));
    }
    let mut transitions = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let state = r.f32s(state_dim)?;
        let action = r.f32s(action_dim)?;
        let reward = r.f32s(1)?[0];
        let next_state = r.f32s(state_dim)?;
        let terminal = match r.take(1)?[0] {
            0 => false,
            1 => true,
            other => return Err(Error::Format(format!("terminal flag {other} is not 0/1"))),
        };
        transitions.push(Transition {
            state,
            action,
            reward,
            next_state,
            terminal,
            provenance: Provenance::Offline,
        });
    }
    Ok(OfflineDataset {
        env_id,
        recipe,
        state_dim,
        action_dim,
        transitions,
        meta: DatasetMeta {
            seed,
            count,
            behavior: None,
        },
    })
}

/// Path of the JSON sidecar for a dataset file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the binary file and its JSON sidecar.
pub fn save(dataset: &OfflineDataset, path: &Path) -> Result<()> {
    fs::write(path, encode(dataset)).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&dataset.sidecar())? + "\n";
    fs::write(&side, json).map_err(|e| Error::io(side, e))?;
    Ok(())
}

/// Reads a binary dataset and, when present, its sidecar.
pub fn load(path: &Path) -> Result<OfflineDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut dataset = decode(&bytes)?;
    let side = sidecar_path(path);
    if side.exists() {
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: Sidecar = serde_json::from_str(&text)?;
        if meta.env_id != dataset.env_id
            || meta.recipe != dataset.recipe
            || meta.count != dataset.meta.count
            || meta.seed != dataset.meta.seed
        {
            return Err(Error::Format(format!(
                "sidecar {} disagrees with the binary header",
                side.display()
            )));
        }
        dataset.meta.behavior = meta.behavior;
    }
    Ok(dataset)
}
