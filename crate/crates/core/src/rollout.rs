//! Environment interaction: deterministic evaluation and the exploring
//! actor used during online training.

use crate::agents::{select_action, ActionMode, AgentHyper, ParamSet};
use crate::datasets::{Provenance, Transition};
use crate::envs::{self, EnvSpec, EnvState};
use crate::numerics::{RealArray, Rng};
use crate::Result;

/// Mean and population standard deviation of the returns of `episodes`
/// deterministic episodes.
///
/// Episode `k` is reset from substream `("episode", k)` of `rng`, so two
/// policies evaluated with the same `rng` face the same start states. All
/// episodes advance together through one batched actor pass per step.
pub fn evaluate(spec: &EnvSpec, params: &ParamSet, episodes: usize, rng: &Rng) -> Result<(f64, f64)> {
    let returns = evaluate_returns(spec, params, episodes, rng)?;
    Ok(crate::datasets::mean_std(&returns))
}

pub fn evaluate_returns(spec: &EnvSpec, params: &ParamSet, episodes: usize, rng: &Rng) -> Result<Vec<f64>> {
    let mut states: Vec<EnvState> = (0..episodes)
        .map(|k| envs::reset(spec, &mut rng.substream_indexed("episode", k as u64)))
        .collect();
    let mut returns = vec![0.0; episodes];
    loop {
        let live: Vec<usize> = (0..episodes).filter(|&k| !states[k].terminal).collect();
        if live.is_empty() {
            break;
        }
        let obs: Vec<&[f64]> = live.iter().map(|&k| states[k].observation.as_slice()).collect();
        let actions = params.policy(&RealArray::from_rows(&obs)?)?;
        for (row, &k) in live.iter().enumerate() {
            let out = envs::step(spec, &states[k], actions.row(row))?;
            returns[k] += out.reward;
            states[k] = out.next;
        }
    }
    Ok(returns)
}

/// A single environment driven by an exploring policy, reset automatically
/// at episode end.
#[derive(Debug, Clone)]
pub struct Explorer {
    spec: EnvSpec,
    rng: Rng,
    state: EnvState,
    episode_return: f64,
    completed: Vec<f64>,
}

impl Explorer {
    pub fn new(spec: &EnvSpec, mut rng: Rng) -> Self {
        let state = envs::reset(spec, &mut rng);
        Self {
            spec: spec.clone(),
            rng,
            state,
            episode_return: 0.0,
            completed: Vec::new(),
        }
    }

    /// Takes one step. `random` selects uniform actions over the action box
    /// instead of the exploring policy.
    pub fn step(&mut self, params: &ParamSet, hyper: &AgentHyper, random: bool) -> Result<Transition> {
        let action = if random {
            let b = self.spec.action_bound;
            (0..self.spec.action_dim).map(|_| self.rng.uniform(-b, b)).collect()
        } else {
            select_action(params, hyper, &self.state.observation, ActionMode::Explore, &mut self.rng)?
        };
        let out = envs::step(&self.spec, &self.state, &action)?;
        let t = Transition {
            state: self.state.observation.clone(),
            action: out.applied_action,
            reward: out.reward,
            next_state: out.next.observation.clone(),
            terminal: out.next.failed,
            provenance: Provenance::Online,
        };
        self.episode_return += out.reward;
        if out.next.terminal {
            self.completed.push(self.episode_return);
            self.episode_return = 0.0;
            self.state = envs::reset(&self.spec, &mut self.rng);
        } else {
            self.state = out.next;
        }
        Ok(t)
    }

    /// Returns of the episodes finished so far.
    pub fn completed_returns(&self) -> &[f64] {
        &self.completed
    }
}
