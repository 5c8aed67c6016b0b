//! Deterministic toy continuous-control tasks.
//!
//! # PointMass2D
//!
//! State `(px, py, vx, vy)`, action `(ax, ay)` in `[-1, 1]^2`, unit time step:
//!
//! ```text
//! v' = v + dt * a
//! p' = p + dt * v'
//! ```
//!
//! Position is confined to `[-wall, wall]^2`; hitting a wall clamps the
//! coordinate and zeroes that velocity component. Reward is `-|p' - goal|`.
//! Initial position is uniform in `center ± 0.25` per axis with velocity
//! uniform in `±0.05`. No failure states.
//!
//! The scripted medium policy here is a "settled in the wrong place" agent:
//! the expert controller aimed at `medium_goal = (1, -1)` instead of the
//! origin, plus Gaussian noise. Its mean behavior is itself mediocre, so
//! cloning it does not recover the expert.
//!
//! # Pendulum1D
//!
//! Angle `θ` measured from upright, observation `(cos θ, sin θ, θ̇)`, torque
//! `u` in `[-2, 2]`:
//!
//! ```text
//! θ̇' = θ̇ + (15 sin θ + 3 u) dt        dt = 0.05
//! θ'  = θ + θ̇' dt
//! r   = -(wrap(θ)^2 + 0.1 θ̇^2 + 0.001 u^2)
//! ```
//!
//! If `|θ̇'| > 9` the episode terminates with an extra reward of `-100`
//! (the failure set). The pendulum starts hanging down:
//! `θ = π ± 0.1`, `θ̇ = ±0.1`, both uniform.
//!
//! Both tasks run for 200 steps. Reaching the step limit ends the episode
//! but is not a terminal state for bootstrapping.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::numerics::Rng;
use crate::{Error, Result};

/// Names of the built-in environments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvId {
    #[serde(rename = "pointmass2d")]
    PointMass2D,
    #[serde(rename = "pendulum1d")]
    Pendulum1D,
}

impl EnvId {
    pub const ALL: [EnvId; 2] = [EnvId::PointMass2D, EnvId::Pendulum1D];

    pub fn as_str(&self) -> &'static str {
        match self {
            EnvId::PointMass2D => "pointmass2d",
            EnvId::Pendulum1D => "pendulum1d",
        }
    }

    pub fn spec(&self) -> EnvSpec {
        match self {
            EnvId::PointMass2D => EnvSpec::point_mass_2d(),
            EnvId::Pendulum1D => EnvSpec::pendulum_1d(),
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pointmass2d" => Ok(EnvId::PointMass2D),
            "pendulum1d" => Ok(EnvId::Pendulum1D),
            other => Err(Error::InvalidArgument(format!("unknown environment '{other}'"))),
        }
    }
}

/// Physical constants of each task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Dynamics {
    PointMass {
        dt: f64,
        wall: f64,
        goal: [f64; 2],
        init_center: [f64; 2],
        init_half_width: f64,
        init_speed_half_width: f64,
        /// Point the scripted medium policy steers to.
        medium_goal: [f64; 2],
    },
    Pendulum {
        dt: f64,
        gravity_coef: f64,
        torque_coef: f64,
        max_speed: f64,
        failure_penalty: f64,
        init_angle_half_width: f64,
        init_speed_half_width: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub id: EnvId,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Symmetric action box `[-action_bound, action_bound]`.
    pub action_bound: f64,
    pub episode_length: usize,
    pub dynamics: Dynamics,
    /// Standard deviation of the Gaussian noise the scripted medium policy
    /// adds to its action (tuned once so the medium policy scores in the
    /// 40-70 normalized band).
    pub medium_noise_std: f64,
}

impl EnvSpec {
    pub fn point_mass_2d() -> Self {
        Self {
            id: EnvId::PointMass2D,
            state_dim: 4,
            action_dim: 2,
            action_bound: 1.0,
            episode_length: 200,
            dynamics: Dynamics::PointMass {
                dt: 1.0,
                wall: 3.0,
                goal: [0.0, 0.0],
                init_center: [2.0, 2.0],
                init_half_width: 0.25,
                init_speed_half_width: 0.05,
                medium_goal: [1.0, -1.0],
            },
            medium_noise_std: 0.2,
        }
    }

    pub fn pendulum_1d() -> Self {
        Self {
            id: EnvId::Pendulum1D,
            state_dim: 3,
            action_dim: 1,
            action_bound: 2.0,
            episode_length: 200,
            dynamics: Dynamics::Pendulum {
                dt: 0.05,
                gravity_coef: 15.0,
                torque_coef: 3.0,
                max_speed: 9.0,
                failure_penalty: 100.0,
                init_angle_half_width: 0.1,
                init_speed_half_width: 0.1,
            },
            medium_noise_std: 4.0,
        }
    }
}

/// One point along an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub observation: Vec<f64>,
    pub step: usize,
    /// Episode is over (step limit or failure).
    pub terminal: bool,
    /// Entered the failure set; the only case where bootstrapping stops.
    pub failed: bool,
}

/// Result of [`step`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next: EnvState,
    pub reward: f64,
    /// Action that was actually applied (after clipping to the box).
    pub applied_action: Vec<f64>,
    pub clipped: bool,
}

/// Draws an initial state from the task's initial distribution.
pub fn reset(spec: &EnvSpec, rng: &mut Rng) -> EnvState {
    let observation = match spec.dynamics {
        Dynamics::PointMass {
            init_center,
            init_half_width,
            init_speed_half_width,
            ..
        } => {
            let px = init_center[0] + rng.uniform(-init_half_width, init_half_width);
            let py = init_center[1] + rng.uniform(-init_half_width, init_half_width);
            let vx = rng.uniform(-init_speed_half_width, init_speed_half_width);
            let vy = rng.uniform(-init_speed_half_width, init_speed_half_width);
            vec![px, py, vx, vy]
        }
        Dynamics::Pendulum {
            init_angle_half_width,
            init_speed_half_width,
            ..
        } => {
            let theta =
                std::f64::consts::PI + rng.uniform(-init_angle_half_width, init_angle_half_width);
            let speed = rng.uniform(-init_speed_half_width, init_speed_half_width);
            vec![theta.cos(), theta.sin(), speed]
        }
    };
    EnvState {
        observation,
        step: 0,
        terminal: false,
        failed: false,
    }
}

/// Advances one step. Out-of-box actions are clipped and flagged.
pub fn step(spec: &EnvSpec, state: &EnvState, action: &[f64]) -> Result<StepOutcome> {
    if action.len() != spec.action_dim {
        return Err(Error::ShapeMismatch {
            expected: vec![spec.action_dim],
            actual: vec![action.len()],
        });
    }
    if action.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite("action"));
    }
    if state.terminal {
        return Err(Error::InvalidArgument("step called on a finished episode".into()));
    }
    let bound = spec.action_bound;
    let applied: Vec<f64> = action.iter().map(|a| a.clamp(-bound, bound)).collect();
    let clipped = applied.iter().zip(action).any(|(x, y)| x != y);
    let obs = &state.observation;
    let next_step = state.step + 1;

    let (observation, reward, failed) = match spec.dynamics {
        Dynamics::PointMass { dt, wall, goal, .. } => {
            let mut p = [obs[0], obs[1]];
            let mut v = [obs[2], obs[3]];
            for i in 0..2 {
                v[i] += dt * applied[i];
                p[i] += dt * v[i];
                if p[i].abs() > wall {
                    p[i] = p[i].clamp(-wall, wall);
                    v[i] = 0.0;
                }
            }
            let dist = ((p[0] - goal[0]).powi(2) + (p[1] - goal[1]).powi(2)).sqrt();
            (vec![p[0], p[1], v[0], v[1]], -dist, false)
        }
        Dynamics::Pendulum {
            dt,
            gravity_coef,
            torque_coef,
            max_speed,
            failure_penalty,
            ..
        } => {
            let theta = obs[1].atan2(obs[0]);
            let speed = obs[2];
            let u = applied[0];
            let mut reward = -(theta * theta + 0.1 * speed * speed + 0.001 * u * u);
            let new_speed = speed + (gravity_coef * theta.sin() + torque_coef * u) * dt;
            let new_theta = theta + new_speed * dt;
            let failed = new_speed.abs() > max_speed;
            if failed {
                reward -= failure_penalty;
            }
            (vec![new_theta.cos(), new_theta.sin(), new_speed], reward, failed)
        }
    };

    Ok(StepOutcome {
        next: EnvState {
            observation,
            step: next_step,
            terminal: failed || next_step >= spec.episode_length,
            failed,
        },
        reward,
        applied_action: applied,
        clipped,
    })
}

/// Random and expert returns used to normalize scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReference {
    pub env_id: EnvId,
    pub random_return: f64,
    pub expert_return: f64,
}

impl ScoreReference {
    /// Reference committed under `crates/core/data/`.
    pub fn builtin(id: EnvId) -> Self {
        let text = match id {
            EnvId::PointMass2D => include_str!("../data/pointmass2d.score.json"),
            EnvId::Pendulum1D => include_str!("../data/pendulum1d.score.json"),
        };
        serde_json::from_str(text).expect("builtin score reference is valid JSON")
    }

    /// `100 * (return - random) / (expert - random)`.
    pub fn normalized_score(&self, episodic_return: f64) -> Result<f64> {
        normalized_score(self, episodic_return)
    }
}

/// `100 * (return - random) / (expert - random)`; unbounded on both sides.
pub fn normalized_score(reference: &ScoreReference, episodic_return: f64) -> Result<f64> {
    let span = reference.expert_return - reference.random_return;
    if span == 0.0 || !span.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "score reference for {} has expert == random",
            reference.env_id
        )));
    }
    Ok(100.0 * (episodic_return - reference.random_return) / span)
}

/// Hand-written behavior policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScriptedPolicy {
    Random,
    Medium,
    Expert,
}

/// Action of a scripted policy (before environment clipping).
pub fn scripted_action(spec: &EnvSpec, policy: ScriptedPolicy, obs: &[f64], rng: &mut Rng) -> Vec<f64> {
    let bound = spec.action_bound;
    match policy {
        ScriptedPolicy::Random => (0..spec.action_dim).map(|_| rng.uniform(-bound, bound)).collect(),
        ScriptedPolicy::Expert => expert_action(spec, obs, false),
        ScriptedPolicy::Medium => expert_action(spec, obs, true)
            .into_iter()
            .map(|a| a + spec.medium_noise_std * rng.normal())
            .collect(),
    }
}

fn expert_action(spec: &EnvSpec, obs: &[f64], medium: bool) -> Vec<f64> {
    let bound = spec.action_bound;
    match spec.dynamics {
        Dynamics::PointMass { goal, medium_goal, .. } => {
            let goal = if medium { medium_goal } else { goal };
            // Soft PD controller toward the goal.
            (0..2)
                .map(|i| (-0.2 * (obs[i] - goal[i]) - 0.65 * obs[2 + i]).clamp(-bound, bound))
                .collect()
        }
        Dynamics::Pendulum { gravity_coef, .. } => {
            let theta = obs[1].atan2(obs[0]);
            let speed = obs[2];
            let u = if obs[0] > 0.85 {
                -(12.0 * theta + 2.5 * speed)
            } else {
                // Energy pumping toward the upright rest energy.
                let energy = 0.5 * speed * speed + gravity_coef * obs[0];
                if speed * (gravity_coef - energy) >= 0.0 {
                    bound
                } else {
                    -bound
                }
            };
            vec![u.clamp(-bound, bound)]
        }
    }
}

/// Return of one full episode of a scripted policy.
pub fn scripted_episode_return(spec: &EnvSpec, policy: ScriptedPolicy, rng: &mut Rng) -> f64 {
    let mut state = reset(spec, rng);
    let mut total = 0.0;
    while !state.terminal {
        let a = scripted_action(spec, policy, &state.observation, rng);
        let out = step(spec, &state, &a).expect("scripted actions are finite");
        total += out.reward;
        state = out.next;
    }
    total
}

/// Mean return of `episodes` scripted episodes; episode `k` uses substream
/// `("episode", k)` of `rng`.
pub fn scripted_mean_return(spec: &EnvSpec, policy: ScriptedPolicy, episodes: usize, rng: &Rng) -> f64 {
    let total: f64 = (0..episodes)
        .map(|k| {
            let mut r = rng.substream_indexed("episode", k as u64);
            scripted_episode_return(spec, policy, &mut r)
        })
        .sum();
    total / episodes as f64
}

/// Seed and episode count used to derive the committed score references.
pub const SCORE_REFERENCE_SEED: u64 = 20_221_010;
pub const SCORE_REFERENCE_EPISODES: usize = 1000;

/// Monte-Carlo estimate of the random and expert returns.
pub fn derive_score_reference(spec: &EnvSpec, episodes: usize, seed: u64) -> ScoreReference {
    let root = Rng::seed_from(seed);
    ScoreReference {
        env_id: spec.id,
        random_return: scripted_mean_return(spec, ScriptedPolicy::Random, episodes, &root.substream("random")),
        expert_return: scripted_mean_return(spec, ScriptedPolicy::Expert, episodes, &root.substream("expert")),
    }
}
