//! TD3, TD3-BC and TD3-C on a shared deterministic actor / twin critic.
//!
//! All three agents use the same critic update. They differ only in the
//! actor objective:
//!
//! * TD3 ascends `Q1(s, pi(s))`.
//! * TD3-BC ascends `lambda * Q1(s, pi(s)) - |a - pi(s)|^2` with
//!   `lambda = alpha / mean|Q1(s, a)|`.
//! * TD3-C ascends `Q1(s, pi(s)) - lambda_dual * |pi(s) - pi'(s)|^2` and
//!   takes a clamped ascent step on the dual with `c - epsilon`.

use serde::{Deserialize, Serialize};

use crate::envs::EnvSpec;
use crate::numerics::{
    adam_step, clip_rows_to_unit_norm, ensure_finite, polyak_update, AdamConfig, AdamState,
    MlpGradients, MlpLayout, MlpParams, OutputHead, RealArray, Rng,
};
use crate::replay::ReplayBuffer;
use crate::{Error, Result};

pub use crate::replay::Batch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AgentKind {
    #[serde(rename = "TD3", alias = "td3")]
    Td3,
    #[serde(rename = "TD3BC", alias = "td3bc", alias = "TD3-BC", alias = "td3-bc")]
    Td3Bc,
    #[serde(rename = "TD3C", alias = "td3c", alias = "TD3-C", alias = "td3-c")]
    Td3C,
}

impl AgentKind {
    pub const ALL: [AgentKind; 3] = [AgentKind::Td3, AgentKind::Td3Bc, AgentKind::Td3C];

    pub fn as_str(&self) -> &'static str {
        match self {
            AgentKind::Td3 => "TD3",
            AgentKind::Td3Bc => "TD3BC",
            AgentKind::Td3C => "TD3C",
        }
    }
}

impl std::fmt::Display for AgentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AgentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "td3" => Ok(AgentKind::Td3),
            "td3bc" => Ok(AgentKind::Td3Bc),
            "td3c" => Ok(AgentKind::Td3C),
            _ => Err(Error::InvalidArgument(format!("unknown agent '{s}'"))),
        }
    }
}

/// JSON has no infinity; `null` stands for an unbounded epsilon.
mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Agent hyperparameters. Defaults follow the published TD3 / TD3-BC /
/// TD3-C settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentHyper {
    pub discount: f64,
    pub tau: f64,
    pub policy_delay: u64,
    pub exploration_noise: f64,
    pub target_noise: f64,
    pub target_noise_clip: f64,
    pub batch_size: usize,
    pub bc_alpha: f64,
    #[serde(with = "inf_as_null")]
    pub epsilon: f64,
    /// Step size of the TD3-C dual ascent. The constraint values are of
    /// order `epsilon`, so useful step sizes are large.
    pub dual_lr: f64,
    pub initial_dual: f64,
    pub action_grad_clip: bool,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub hidden: usize,
    pub replay_capacity: usize,
    pub min_replay_size: usize,
}

impl Default for AgentHyper {
    fn default() -> Self {
        Self {
            discount: 0.99,
            tau: 5e-3,
            policy_delay: 2,
            exploration_noise: 0.1,
            target_noise: 0.2,
            target_noise_clip: 0.5,
            batch_size: 256,
            bc_alpha: 2.5,
            epsilon: 1e-5,
            dual_lr: 50.0,
            initial_dual: 0.0,
            action_grad_clip: true,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            hidden: 256,
            replay_capacity: 1_000_000,
            min_replay_size: 1000,
        }
    }
}

impl AgentHyper {
    /// Defaults with a 32-unit network and batch 128: the size at which a
    /// 10-seed experiment matrix fits in under an hour on one CPU core.
    pub fn desk() -> Self {
        Self {
            hidden: 32,
            batch_size: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return bad("discount must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau must lie in [0, 1]");
        }
        if self.policy_delay == 0 {
            return bad("policy_delay must be at least 1");
        }
        if self.exploration_noise < 0.0 || self.target_noise < 0.0 || self.target_noise_clip < 0.0 {
            return bad("noise scales must be non-negative");
        }
        if self.batch_size == 0 || self.hidden == 0 {
            return bad("batch_size and hidden must be positive");
        }
        if self.bc_alpha < 0.0 {
            return bad("bc_alpha must be non-negative");
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad("epsilon must be positive");
        }
        if self.dual_lr < 0.0 || self.initial_dual < 0.0 {
            return bad("dual_lr and initial_dual must be non-negative");
        }
        if self.actor_lr <= 0.0 || self.critic_lr <= 0.0 {
            return bad("learning rates must be positive");
        }
        if self.min_replay_size == 0 || self.min_replay_size > self.replay_capacity {
            return bad("need 0 < min_replay_size <= replay_capacity");
        }
        Ok(())
    }

    fn adam(lr: f64) -> AdamConfig {
        AdamConfig {
            learning_rate: lr,
            ..AdamConfig::default()
        }
    }
}

/// Everything a learner mutates.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub actor: MlpParams,
    pub critic1: MlpParams,
    pub critic2: MlpParams,
    pub actor_target: MlpParams,
    pub critic1_target: MlpParams,
    pub critic2_target: MlpParams,
    pub actor_opt: AdamState,
    pub critic1_opt: AdamState,
    pub critic2_opt: AdamState,
    pub dual: f64,
    /// Learner steps taken so far.
    pub steps: u64,
    pub action_bound: f64,
}

impl ParamSet {
    pub fn init(spec: &EnvSpec, hyper: &AgentHyper, rng: &mut Rng) -> Self {
        let (sd, ad) = (spec.state_dim, spec.action_dim);
        let actor = MlpParams::init(
            MlpLayout::new(sd, hyper.hidden, ad),
            OutputHead::Tanh {
                scale: spec.action_bound,
            },
            true,
            &mut rng.substream("actor"),
        );
        let critic_layout = MlpLayout::new(sd + ad, hyper.hidden, 1);
        let critic1 = MlpParams::init(critic_layout, OutputHead::Linear, false, &mut rng.substream("critic1"));
        let critic2 = MlpParams::init(critic_layout, OutputHead::Linear, false, &mut rng.substream("critic2"));
        Self {
            actor_opt: AdamState::new(actor.len(), AgentHyper::adam(hyper.actor_lr)),
            critic1_opt: AdamState::new(critic1.len(), AgentHyper::adam(hyper.critic_lr)),
            critic2_opt: AdamState::new(critic2.len(), AgentHyper::adam(hyper.critic_lr)),
            actor_target: actor.clone(),
            critic1_target: critic1.clone(),
            critic2_target: critic2.clone(),
            actor,
            critic1,
            critic2,
            dual: hyper.initial_dual,
            steps: 0,
            action_bound: spec.action_bound,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.actor.layout().input
    }

    pub fn action_dim(&self) -> usize {
        self.actor.layout().output
    }

    pub fn is_finite(&self) -> bool {
        [
            &self.actor,
            &self.critic1,
            &self.critic2,
            &self.actor_target,
            &self.critic1_target,
            &self.critic2_target,
        ]
        .iter()
        .all(|p| p.is_finite())
            && self.dual.is_finite()
    }

    fn ensure_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite("agent parameters"))
        }
    }

    /// Deterministic actions for a batch of states.
    pub fn policy(&self, states: &RealArray) -> Result<RealArray> {
        let mut a = self.actor.forward_tape(states)?.into_output();
        clip_all(a.data_mut(), self.action_bound);
        Ok(a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Explore,
    Evaluate,
}

fn clip_all(xs: &mut [f64], bound: f64) {
    for v in xs {
        *v = v.clamp(-bound, bound);
    }
}

/// `pi(s)` clipped to the action box, plus N(0, sigma_e^2) when exploring.
pub fn select_action(
    params: &ParamSet,
    hyper: &AgentHyper,
    state: &[f64],
    mode: ActionMode,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if state.len() != params.state_dim() {
        return Err(Error::ShapeMismatch {
            expected: vec![params.state_dim()],
            actual: vec![state.len()],
        });
    }
    let s = RealArray::from_vec(&[1, state.len()], state.to_vec())?;
    let mut a = params.actor.forward_tape(&s)?.into_output().into_vec();
    if mode == ActionMode::Explore {
        for v in a.iter_mut() {
            *v += hyper.exploration_noise * rng.normal();
        }
    }
    clip_all(&mut a, params.action_bound);
    Ok(a)
}

fn critic_input(states: &RealArray, actions: &RealArray) -> Result<RealArray> {
    RealArray::hstack(states, actions)
}

/// Smoothed target action `clip(pi'(s') + clip(noise, +-c), bounds)`.
pub fn target_actions(params: &ParamSet, hyper: &AgentHyper, next_states: &RealArray, rng: &mut Rng) -> Result<RealArray> {
    let mut a = params.actor_target.forward_tape(next_states)?.into_output();
    let c = hyper.target_noise_clip;
    for v in a.data_mut() {
        let noise = (hyper.target_noise * rng.normal()).clamp(-c, c);
        *v = (*v + noise).clamp(-params.action_bound, params.action_bound);
    }
    Ok(a)
}

/// Bellman targets `r + gamma * (1 - terminal) * min(Q1', Q2')(s', a~')`.
///
/// One noise draw is shared by both target critics.
pub fn critic_target(params: &ParamSet, hyper: &AgentHyper, batch: &Batch, rng: &mut Rng) -> Result<Vec<f64>> {
    let next_a = target_actions(params, hyper, &batch.next_states, rng)?;
    let x = critic_input(&batch.next_states, &next_a)?;
    let q1 = params.critic1_target.forward_tape(&x)?.into_output();
    let q2 = params.critic2_target.forward_tape(&x)?.into_output();
    let y: Vec<f64> = (0..batch.len())
        .map(|i| {
            let q = q1.data()[i].min(q2.data()[i]);
            batch.rewards[i] + hyper.discount * batch.not_done[i] * q
        })
        .collect();
    ensure_finite(&y, "bellman target")?;
    Ok(y)
}

/// Diagnostics from one critic update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticStats {
    pub loss: f64,
}

/// One Adam step on `mean((Q1 - y)^2) + mean((Q2 - y)^2)` with `y` held
/// fixed. Both critics see the same `y`.
pub fn critic_update(params: &mut ParamSet, batch: &Batch, targets: &[f64]) -> Result<CriticStats> {
    let n = batch.len();
    if n == 0 || targets.len() != n {
        return Err(Error::ShapeMismatch {
            expected: vec![n],
            actual: vec![targets.len()],
        });
    }
    let x = critic_input(&batch.states, &batch.actions)?;
    let mut loss = 0.0;
    for (critic, opt) in [
        (&mut params.critic1, &mut params.critic1_opt),
        (&mut params.critic2, &mut params.critic2_opt),
    ] {
        let tape = critic.forward_tape(&x)?;
        let q = tape.output().data();
        let mut cot = vec![0.0; n];
        for i in 0..n {
            let e = q[i] - targets[i];
            loss += e * e / n as f64;
            cot[i] = 2.0 * e / n as f64;
        }
        let cot = RealArray::from_vec(&[n, 1], cot)?;
        let (grads, _) = critic.backward(&tape, &cot, true)?;
        let grads = grads.expect("parameter gradients requested");
        adam_step(opt, critic.as_mut_slice(), grads.as_slice())?;
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("critic loss"));
    }
    Ok(CriticStats { loss })
}

/// Diagnostics from one actor update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActorStats {
    /// `mean Q1(s, pi(s))` before the step.
    pub q_mean: f64,
    /// TD3-BC: `mean |a - pi(s)|^2`. TD3-C: `mean |pi(s) - pi'(s)|^2`.
    pub penalty: f64,
    /// TD3-BC: `lambda`. TD3-C: the dual after its update.
    pub weight: f64,
}

/// Gradient of the actor loss (the negated objective) at the current
/// parameters, together with the statistics it was computed from.
#[derive(Debug, Clone)]
pub struct ActorGradient {
    pub grads: MlpGradients,
    /// `mean Q1(s, pi(s))`.
    pub q_mean: f64,
    /// TD3-BC: `mean |a - pi(s)|^2`. TD3-C: the constraint value
    /// `mean |pi(s) - pi'(s)|^2`. Zero for TD3.
    pub penalty: f64,
    /// TD3-BC: `lambda`. Otherwise zero.
    pub lambda: f64,
}

/// Actor loss gradient for `kind`. Pure: nothing in `params` changes.
pub fn actor_gradient(kind: AgentKind, params: &ParamSet, hyper: &AgentHyper, batch: &Batch) -> Result<ActorGradient> {
    let n = batch.len();
    let (sd, ad) = (params.state_dim(), params.action_dim());
    let actor_tape = params.actor.forward_tape(&batch.states)?;
    let pi = actor_tape.output();
    let x = critic_input(&batch.states, pi)?;
    let q_tape = params.critic1.forward_tape(&x)?;
    let q_mean = q_tape.output().mean();
    let ones = RealArray::from_vec(&[n, 1], vec![1.0; n])?;
    let (_, dx) = params.critic1.backward(&q_tape, &ones, false)?;
    let mut cot = dx.columns(sd, sd + ad);
    if hyper.action_grad_clip {
        clip_rows_to_unit_norm(&mut cot)?;
    }

    let inv_n = 1.0 / n as f64;
    let mut penalty = 0.0;
    let mut lambda = 0.0;
    match kind {
        AgentKind::Td3 => {
            for v in cot.data_mut() {
                *v *= -inv_n;
            }
        }
        AgentKind::Td3Bc => {
            let q_data = params
                .critic1
                .forward_tape(&critic_input(&batch.states, &batch.actions)?)?
                .into_output();
            let mean_abs = q_data.data().iter().map(|q| q.abs()).sum::<f64>() * inv_n;
            lambda = hyper.bc_alpha / mean_abs;
            if !lambda.is_finite() {
                return Err(Error::NonFinite("TD3-BC lambda"));
            }
            let (p, a) = (pi.data(), batch.actions.data());
            for (i, v) in cot.data_mut().iter_mut().enumerate() {
                let diff = p[i] - a[i];
                penalty += diff * diff * inv_n;
                *v = -lambda * *v * inv_n + 2.0 * diff * inv_n;
            }
        }
        AgentKind::Td3C => {
            let pi_old = params.actor_target.forward_tape(&batch.states)?.into_output();
            let dual = params.dual;
            let (p, o) = (pi.data(), pi_old.data());
            for (i, v) in cot.data_mut().iter_mut().enumerate() {
                let diff = p[i] - o[i];
                penalty += diff * diff * inv_n;
                *v *= -inv_n;
                // Skipping the zero-weight term keeps TD3-C bit-identical to
                // TD3 while the dual is zero.
                if dual != 0.0 {
                    *v += dual * 2.0 * diff * inv_n;
                }
            }
        }
    }
    if !q_mean.is_finite() || !penalty.is_finite() {
        return Err(Error::NonFinite("actor objective"));
    }
    let (grads, _) = params.actor.backward(&actor_tape, &cot, true)?;
    Ok(ActorGradient {
        grads: grads.expect("parameter gradients requested"),
        q_mean,
        penalty,
        lambda,
    })
}

/// Clamped dual ascent `max(0, dual + dual_lr * (c - epsilon))`.
pub fn dual_step(dual: f64, constraint: f64, hyper: &AgentHyper) -> f64 {
    (dual + hyper.dual_lr * (constraint - hyper.epsilon)).max(0.0)
}

/// One actor step (and, for TD3-C, one dual step using the constraint
/// value measured before the actor moved).
///
/// Target networks are not touched here; see [`soft_update_targets`].
pub fn actor_update(kind: AgentKind, params: &mut ParamSet, hyper: &AgentHyper, batch: &Batch) -> Result<ActorStats> {
    let g = actor_gradient(kind, params, hyper, batch)?;
    adam_step(&mut params.actor_opt, params.actor.as_mut_slice(), g.grads.as_slice())?;
    let weight = match kind {
        AgentKind::Td3C => {
            params.dual = dual_step(params.dual, g.penalty, hyper);
            assert!(params.dual >= 0.0, "dual variable went negative");
            params.dual
        }
        _ => g.lambda,
    };
    Ok(ActorStats {
        q_mean: g.q_mean,
        penalty: g.penalty,
        weight,
    })
}

/// Polyak-averages all three target networks toward their online copies.
pub fn soft_update_targets(params: &mut ParamSet, tau: f64) -> Result<()> {
    polyak_update(params.actor_target.as_mut_slice(), params.actor.as_slice(), tau)?;
    polyak_update(params.critic1_target.as_mut_slice(), params.critic1.as_slice(), tau)?;
    polyak_update(params.critic2_target.as_mut_slice(), params.critic2.as_slice(), tau)?;
    Ok(())
}

/// Diagnostics from one learner step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub critic: CriticStats,
    pub actor: Option<ActorStats>,
}

/// Critic update on a fresh batch; every `policy_delay`-th call also
/// updates the actor and then the targets.
pub fn learner_step_on_batch(kind: AgentKind, params: &mut ParamSet, batch: &Batch, hyper: &AgentHyper, rng: &mut Rng) -> Result<StepStats> {
    let y = critic_target(params, hyper, batch, rng)?;
    let critic = critic_update(params, batch, &y)?;
    params.steps += 1;
    let actor = if params.steps.is_multiple_of(hyper.policy_delay) {
        let stats = actor_update(kind, params, hyper, batch)?;
        soft_update_targets(params, hyper.tau)?;
        Some(stats)
    } else {
        None
    };
    params.ensure_finite()?;
    Ok(StepStats { critic, actor })
}

/// Samples a batch from `buffer` and runs [`learner_step_on_batch`].
pub fn learner_step(kind: AgentKind, params: &mut ParamSet, buffer: &ReplayBuffer, hyper: &AgentHyper, rng: &mut Rng) -> Result<StepStats> {
    let batch = buffer.sample_batch(hyper.batch_size, rng)?;
    learner_step_on_batch(kind, params, &batch, hyper, rng)
}
