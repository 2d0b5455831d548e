//! Trading policies: buy-and-hold, turtle breakout, DQN and DDPG.
//!
//! The multi-scale agent is DDPG fed a stroke feature matrix; the baseline
//! DDPG sees only the raw bar window. Both run through the same code below
//! and differ only in the `PipelineConfig` used to build `MarketData`.

use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::{
    agent_state, encode_action, Action, EnvConfig, EpisodeMode, MarketData, TradingEnv, PORTFOLIO_FEATURES,
};
use crate::error::{AgentError, NnError};
use crate::features::PipelineConfig;
use crate::metrics::EquityCurve;
use crate::nn::{adam_step, soft_update, Activation, AdamState, Gradients, Mlp, ReplayBuffer, Transition};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentKind {
    BuyAndHold,
    Turtle,
    Dqn,
    Ddpg,
    Mssddpg,
}

impl AgentKind {
    pub const ALL: [AgentKind; 5] = [
        AgentKind::BuyAndHold,
        AgentKind::Turtle,
        AgentKind::Dqn,
        AgentKind::Ddpg,
        AgentKind::Mssddpg,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AgentKind::BuyAndHold => "buy-and-hold",
            AgentKind::Turtle => "turtle",
            AgentKind::Dqn => "dqn",
            AgentKind::Ddpg => "ddpg",
            AgentKind::Mssddpg => "mssddpg",
        }
    }

    /// Label used in report tables.
    pub fn display_name(&self) -> &'static str {
        match self {
            AgentKind::BuyAndHold => "B&H",
            AgentKind::Turtle => "Turtle",
            AgentKind::Dqn => "DQN",
            AgentKind::Ddpg => "DDPG",
            AgentKind::Mssddpg => "MSSDDPG",
        }
    }

    pub fn is_learned(&self) -> bool {
        matches!(self, AgentKind::Dqn | AgentKind::Ddpg | AgentKind::Mssddpg)
    }

    /// Observation pipeline for this agent. Only the multi-scale agent uses
    /// `multi_scale`; the others see a z-scored window of raw bars.
    pub fn pipeline(&self, multi_scale: &PipelineConfig, raw_window: usize) -> PipelineConfig {
        match self {
            AgentKind::Mssddpg => multi_scale.clone(),
            _ => PipelineConfig::raw_window(raw_window),
        }
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AgentKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s) || k.display_name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown agent kind '{s}'"))
    }
}

/// What a policy may look at when deciding at index `t`.
#[derive(Debug, Clone, Copy)]
pub struct DecisionContext<'a> {
    pub t: usize,
    /// Closes up to and including `t`.
    pub closes: &'a [f64],
    /// Observation followed by portfolio weights.
    pub state: &'a [f64],
    /// True at the first decision of an episode.
    pub first: bool,
}

pub trait Policy {
    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<Action, AgentError>;
}

pub const TURTLE_ENTRY: usize = 20;
pub const TURTLE_EXIT: usize = 10;

/// Breakout rule on closes up to `t`: buy everything when the close exceeds
/// the previous 20 closes, sell everything when it drops below the previous
/// 10. The entry rule wins if both fire.
pub fn turtle_decide(closes: &[f64]) -> Action {
    let Some((&today, past)) = closes.split_last() else {
        return Action::HOLD;
    };
    let trailing = |n: usize| &past[past.len() - n..];
    if past.len() >= TURTLE_ENTRY && trailing(TURTLE_ENTRY).iter().all(|&c| today > c) {
        return Action::buy(1.0);
    }
    if past.len() >= TURTLE_EXIT && trailing(TURTLE_EXIT).iter().all(|&c| today < c) {
        return Action::sell(1.0);
    }
    Action::HOLD
}

pub fn buy_and_hold_decide(first: bool) -> Action {
    if first {
        Action::buy(1.0)
    } else {
        Action::HOLD
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BuyAndHold;

impl Policy for BuyAndHold {
    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<Action, AgentError> {
        Ok(buy_and_hold_decide(ctx.first))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Turtle;

impl Policy for Turtle {
    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<Action, AgentError> {
        Ok(turtle_decide(ctx.closes))
    }
}

fn stack_rows<'a>(rows: impl ExactSizeIterator<Item = &'a [f64]>, dim: usize) -> Array2<f64> {
    let n = rows.len();
    let mut out = Array2::zeros((n, dim));
    for (mut dst, src) in out.outer_iter_mut().zip(rows) {
        dst.as_slice_mut().expect("contiguous row").copy_from_slice(src);
    }
    out
}

/// Horizontal concatenation `[states | actions]`.
fn join_columns(states: &Array2<f64>, actions: &Array2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(1), &[states.view(), actions.view()]).expect("row counts match")
}

fn check_common(gamma: f64, batch_size: usize, capacity: usize) -> Result<(), AgentError> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(AgentError::Hyper(format!("gamma {gamma} outside [0, 1)")));
    }
    if batch_size == 0 {
        return Err(AgentError::Hyper("batch_size must be positive".into()));
    }
    if capacity < batch_size {
        return Err(AgentError::Hyper(format!(
            "replay capacity {capacity} smaller than batch size {batch_size}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdpgHyper {
    pub gamma: f64,
    pub tau: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub warmup_steps: usize,
    /// Initial exploration noise standard deviation.
    pub noise_sigma: f64,
    /// Noise standard deviation reached after `noise_decay_steps`.
    pub noise_sigma_final: f64,
    /// Annealing horizon in environment steps; `None` spans the whole run.
    pub noise_decay_steps: Option<usize>,
    pub hidden: Vec<usize>,
    /// Multiplier applied to rewards before they enter critic targets.
    pub reward_scale: f64,
    /// Environment steps between gradient updates.
    pub train_every: usize,
}

impl Default for DdpgHyper {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            lr_actor: 1e-4,
            lr_critic: 1e-3,
            batch_size: 64,
            replay_capacity: 100_000,
            warmup_steps: 1000,
            noise_sigma: 0.2,
            noise_sigma_final: 0.0,
            noise_decay_steps: None,
            hidden: vec![128, 64],
            reward_scale: 1.0,
            train_every: 1,
        }
    }
}

impl DdpgHyper {
    pub fn validate(&self) -> Result<(), AgentError> {
        check_common(self.gamma, self.batch_size, self.replay_capacity)?;
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(AgentError::Hyper(format!("tau {} outside (0, 1]", self.tau)));
        }
        if self.noise_sigma < 0.0 || self.noise_sigma_final < 0.0 {
            return Err(AgentError::Hyper("noise sigma must be non-negative".into()));
        }
        if self.train_every == 0 {
            return Err(AgentError::Hyper("train_every must be positive".into()));
        }
        Ok(())
    }

    /// Linearly annealed noise level after `step` environment steps of a run
    /// planned to last `run_steps`.
    pub fn sigma_at(&self, step: usize, run_steps: usize) -> f64 {
        let horizon = self.noise_decay_steps.unwrap_or(run_steps);
        let frac = if horizon == 0 {
            1.0
        } else {
            (step as f64 / horizon as f64).min(1.0)
        };
        self.noise_sigma + (self.noise_sigma_final - self.noise_sigma) * frac
    }
}

/// Losses reported by one DDPG update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdpgStepStats {
    pub critic_loss: f64,
    /// Mean critic value of the actor's actions before the actor update.
    pub actor_objective: f64,
}

/// Deterministic actor with a state-action critic, both with soft-updated
/// target copies.
#[derive(Debug, Clone)]
pub struct DdpgAgent {
    pub actor: Mlp,
    pub critic: Mlp,
    pub actor_target: Mlp,
    pub critic_target: Mlp,
    actor_opt: AdamState,
    critic_opt: AdamState,
    pub hyper: DdpgHyper,
    pub replay: ReplayBuffer,
    pub updates: usize,
}

impl DdpgAgent {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, hyper: DdpgHyper, rng: &mut R) -> Result<Self, AgentError> {
        hyper.validate()?;
        let mut actor_sizes = vec![state_dim];
        actor_sizes.extend(&hyper.hidden);
        actor_sizes.push(1);
        let mut critic_sizes = vec![state_dim + 1];
        critic_sizes.extend(&hyper.hidden);
        critic_sizes.push(1);
        let actor = Mlp::new(&actor_sizes, Activation::Relu, Activation::Tanh, rng);
        let critic = Mlp::new(&critic_sizes, Activation::Relu, Activation::Identity, rng);
        Self::from_networks(actor, critic, hyper)
    }

    /// Builds an agent around given networks; targets start as copies.
    pub fn from_networks(actor: Mlp, critic: Mlp, hyper: DdpgHyper) -> Result<Self, AgentError> {
        hyper.validate()?;
        if actor.output_dim() != 1 || critic.output_dim() != 1 || critic.input_dim() != actor.input_dim() + 1 {
            return Err(NnError::Shape(format!(
                "actor {:?} and critic {:?} are incompatible",
                actor.sizes(),
                critic.sizes()
            ))
            .into());
        }
        Ok(Self {
            actor_opt: AdamState::new(&actor),
            critic_opt: AdamState::new(&critic),
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            replay: ReplayBuffer::new(hyper.replay_capacity),
            actor,
            critic,
            hyper,
            updates: 0,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.actor.input_dim()
    }

    /// Actor output in `[-1, 1]`, optionally with clamped Gaussian noise.
    pub fn act<R: Rng + ?Sized>(&self, state: &[f64], noise: Option<(f64, &mut R)>) -> Result<f64, AgentError> {
        let a = self.actor.predict(state)?[0];
        Ok(match noise {
            Some((sigma, rng)) if sigma > 0.0 => {
                let z: f64 = StandardNormal.sample(rng);
                (a + sigma * z).clamp(-1.0, 1.0)
            }
            _ => a,
        })
    }

    fn batch_arrays(&self, batch: &[&Transition]) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let dim = self.state_dim();
        let states = stack_rows(batch.iter().map(|t| &t.state[..]), dim);
        let next = stack_rows(batch.iter().map(|t| &t.next_state[..]), dim);
        let actions = stack_rows(batch.iter().map(|t| &t.action[..]), 1);
        (states, actions, next)
    }

    /// Critic regression targets, computed from the target networks only.
    pub fn critic_targets(&self, batch: &[&Transition]) -> Result<Array1<f64>, AgentError> {
        let (_, _, next) = self.batch_arrays(batch);
        self.targets_from(batch, &next)
    }

    fn targets_from(&self, batch: &[&Transition], next: &Array2<f64>) -> Result<Array1<f64>, AgentError> {
        let next_actions = self.actor_target.predict_batch(next.view())?;
        let next_q = self.critic_target.predict_batch(join_columns(next, &next_actions).view())?;
        Ok(batch
            .iter()
            .zip(next_q.column(0))
            .map(|(t, &q)| {
                let bootstrap = if t.done { 0.0 } else { self.hyper.gamma * q };
                t.reward * self.hyper.reward_scale + bootstrap
            })
            .collect())
    }

    /// Mean squared critic error on `batch` and its parameter gradient.
    pub fn critic_gradient(&self, batch: &[&Transition]) -> Result<(f64, Gradients), AgentError> {
        let (states, actions, next) = self.batch_arrays(batch);
        let targets = self.targets_from(batch, &next)?;
        let (q, cache) = self.critic.forward_batch(join_columns(&states, &actions).view())?;
        let n = batch.len() as f64;
        let err = &q.column(0) - &targets;
        let loss = err.dot(&err) / n;
        let upstream = (err * (2.0 / n)).insert_axis(Axis(1));
        let (grads, _) = self.critic.backward(&cache, upstream.view())?;
        Ok((loss, grads))
    }

    /// Gradient of `-mean Q(s, actor(s))` with respect to the actor, plus the
    /// mean Q value itself.
    pub fn actor_gradient(&self, states: ArrayView2<f64>) -> Result<(f64, Gradients), AgentError> {
        let (actions, actor_cache) = self.actor.forward_batch(states)?;
        let input = join_columns(&states.to_owned(), &actions);
        let (q, critic_cache) = self.critic.forward_batch(input.view())?;
        let n = states.nrows() as f64;
        let upstream = Array2::from_elem((states.nrows(), 1), -1.0 / n);
        let (_, input_grad) = self.critic.backward(&critic_cache, upstream.view())?;
        let action_grad = input_grad.slice(ndarray::s![.., self.state_dim()..]).to_owned();
        let (grads, _) = self.actor.backward(&actor_cache, action_grad.view())?;
        Ok((q.mean().unwrap_or(0.0), grads))
    }

    /// One critic update, one actor update and a soft update of both targets.
    pub fn train_step(&mut self, batch: &[&Transition]) -> Result<DdpgStepStats, AgentError> {
        let (critic_loss, critic_grads) = self.critic_gradient(batch)?;
        adam_step(&mut self.critic, &critic_grads, &mut self.critic_opt, self.hyper.lr_critic)?;

        let states = stack_rows(batch.iter().map(|t| &t.state[..]), self.state_dim());
        let (actor_objective, actor_grads) = self.actor_gradient(states.view())?;
        adam_step(&mut self.actor, &actor_grads, &mut self.actor_opt, self.hyper.lr_actor)?;

        soft_update(&mut self.critic_target, &self.critic, self.hyper.tau)?;
        soft_update(&mut self.actor_target, &self.actor, self.hyper.tau)?;
        self.updates += 1;
        Ok(DdpgStepStats {
            critic_loss,
            actor_objective,
        })
    }

    /// Samples a batch and trains, or reports that warm-up is not finished.
    pub fn learn<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<DdpgStepStats, AgentError> {
        let need = self.hyper.warmup_steps.max(self.hyper.batch_size);
        if self.replay.len() < need {
            return Err(NnError::NotReady {
                have: self.replay.len(),
                need,
            }
            .into());
        }
        let replay = std::mem::replace(&mut self.replay, ReplayBuffer::new(1));
        let result = replay
            .sample(self.hyper.batch_size, rng)
            .map_err(AgentError::from)
            .and_then(|batch| self.train_step(&batch));
        self.replay = replay;
        result
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DqnHyper {
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub warmup_steps: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_steps: usize,
    /// Gradient updates between hard copies into the target network.
    pub target_sync_period: usize,
    pub hidden: Vec<usize>,
    pub reward_scale: f64,
    pub train_every: usize,
}

impl Default for DqnHyper {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lr: 1e-3,
            batch_size: 64,
            replay_capacity: 100_000,
            warmup_steps: 1000,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_steps: 10_000,
            target_sync_period: 500,
            hidden: vec![128, 64],
            reward_scale: 1.0,
            train_every: 1,
        }
    }
}

impl DqnHyper {
    pub fn validate(&self) -> Result<(), AgentError> {
        check_common(self.gamma, self.batch_size, self.replay_capacity)?;
        for eps in [self.epsilon_start, self.epsilon_end] {
            if !(0.0..=1.0).contains(&eps) {
                return Err(AgentError::Hyper(format!("epsilon {eps} outside [0, 1]")));
            }
        }
        if self.target_sync_period == 0 || self.train_every == 0 {
            return Err(AgentError::Hyper("sync period and train_every must be positive".into()));
        }
        Ok(())
    }

    pub fn epsilon_at(&self, step: usize) -> f64 {
        let frac = if self.epsilon_decay_steps == 0 {
            1.0
        } else {
            (step as f64 / self.epsilon_decay_steps as f64).min(1.0)
        };
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

/// Discrete trading actions: three sell sizes, hold, three buy sizes.
pub const DQN_ACTIONS: [Action; 7] = [
    Action {
        side: crate::env::Side::Sell,
        fraction: 1.0,
    },
    Action {
        side: crate::env::Side::Sell,
        fraction: 0.5,
    },
    Action {
        side: crate::env::Side::Sell,
        fraction: 0.25,
    },
    Action::HOLD,
    Action {
        side: crate::env::Side::Buy,
        fraction: 0.25,
    },
    Action {
        side: crate::env::Side::Buy,
        fraction: 0.5,
    },
    Action {
        side: crate::env::Side::Buy,
        fraction: 1.0,
    },
];

/// Q network over a discrete action set with a hard-synced target copy.
/// Transitions store the chosen action index as their single action entry.
#[derive(Debug, Clone)]
pub struct DqnAgent {
    pub q: Mlp,
    pub q_target: Mlp,
    opt: AdamState,
    pub hyper: DqnHyper,
    pub replay: ReplayBuffer,
    pub updates: usize,
}

impl DqnAgent {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        n_actions: usize,
        hyper: DqnHyper,
        rng: &mut R,
    ) -> Result<Self, AgentError> {
        let mut sizes = vec![state_dim];
        sizes.extend(&hyper.hidden);
        sizes.push(n_actions);
        Self::from_network(Mlp::new(&sizes, Activation::Relu, Activation::Identity, rng), hyper)
    }

    pub fn from_network(q: Mlp, hyper: DqnHyper) -> Result<Self, AgentError> {
        hyper.validate()?;
        Ok(Self {
            opt: AdamState::new(&q),
            q_target: q.clone(),
            replay: ReplayBuffer::new(hyper.replay_capacity),
            q,
            hyper,
            updates: 0,
        })
    }

    pub fn n_actions(&self) -> usize {
        self.q.output_dim()
    }

    pub fn q_values(&self, state: &[f64]) -> Result<Vec<f64>, AgentError> {
        Ok(self.q.predict(state)?)
    }

    /// Highest-valued action; ties go to the lowest index.
    pub fn greedy(&self, state: &[f64]) -> Result<usize, AgentError> {
        let q = self.q_values(state)?;
        Ok(argmax(&q))
    }

    pub fn act<R: Rng + ?Sized>(&self, state: &[f64], epsilon: f64, rng: &mut R) -> Result<usize, AgentError> {
        if rng.random::<f64>() < epsilon {
            Ok(rng.random_range(0..self.n_actions()))
        } else {
            self.greedy(state)
        }
    }

    /// `r + gamma * max_a Q_target(s', a)`, without bootstrap on terminals.
    pub fn targets(&self, batch: &[&Transition]) -> Result<Array1<f64>, AgentError> {
        let next = stack_rows(batch.iter().map(|t| &t.next_state[..]), self.q.input_dim());
        let next_q = self.q_target.predict_batch(next.view())?;
        Ok(batch
            .iter()
            .zip(next_q.outer_iter())
            .map(|(t, row)| {
                let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let bootstrap = if t.done { 0.0 } else { self.hyper.gamma * best };
                t.reward * self.hyper.reward_scale + bootstrap
            })
            .collect())
    }

    /// One squared-error update on the chosen actions; returns the loss.
    pub fn train_step(&mut self, batch: &[&Transition]) -> Result<f64, AgentError> {
        let targets = self.targets(batch)?;
        let states = stack_rows(batch.iter().map(|t| &t.state[..]), self.q.input_dim());
        let (q, cache) = self.q.forward_batch(states.view())?;
        let n = batch.len() as f64;
        let mut upstream = Array2::zeros(q.dim());
        let mut loss = 0.0;
        for (i, t) in batch.iter().enumerate() {
            let a = t.action[0] as usize;
            if a >= self.n_actions() {
                return Err(NnError::Shape(format!("action index {a} out of range")).into());
            }
            let err = q[[i, a]] - targets[i];
            loss += err * err / n;
            upstream[[i, a]] = 2.0 * err / n;
        }
        let (grads, _) = self.q.backward(&cache, upstream.view())?;
        adam_step(&mut self.q, &grads, &mut self.opt, self.hyper.lr)?;
        self.updates += 1;
        if self.updates.is_multiple_of(self.hyper.target_sync_period) {
            self.q_target = self.q.clone();
        }
        Ok(loss)
    }

    pub fn learn<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<f64, AgentError> {
        let need = self.hyper.warmup_steps.max(self.hyper.batch_size);
        if self.replay.len() < need {
            return Err(NnError::NotReady {
                have: self.replay.len(),
                need,
            }
            .into());
        }
        let replay = std::mem::replace(&mut self.replay, ReplayBuffer::new(1));
        let result = replay
            .sample(self.hyper.batch_size, rng)
            .map_err(AgentError::from)
            .and_then(|batch| self.train_step(&batch));
        self.replay = replay;
        result
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Trained (or rule-based) policy parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum AgentParams {
    BuyAndHold,
    Turtle,
    Dqn { q: Mlp },
    /// Used by both the raw-window and the multi-scale DDPG agents.
    Ddpg { actor: Mlp, critic: Mlp },
}

/// Greedy evaluation policy built from `AgentParams`.
#[derive(Debug, Clone)]
pub struct GreedyPolicy {
    params: AgentParams,
    dead_zone: f64,
}

impl GreedyPolicy {
    pub fn new(params: AgentParams, dead_zone: f64) -> Self {
        Self { params, dead_zone }
    }
}

impl Policy for GreedyPolicy {
    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<Action, AgentError> {
        Ok(match &self.params {
            AgentParams::BuyAndHold => buy_and_hold_decide(ctx.first),
            AgentParams::Turtle => turtle_decide(ctx.closes),
            AgentParams::Dqn { q } => DQN_ACTIONS[argmax(&q.predict(ctx.state)?)],
            AgentParams::Ddpg { actor, .. } => encode_action(actor.predict(ctx.state)?[0], self.dead_zone),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub episodes: usize,
    pub ddpg: DdpgHyper,
    pub dqn: DqnHyper,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            episodes: 100,
            ddpg: DdpgHyper::default(),
            dqn: DqnHyper::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub start: usize,
    pub steps: usize,
    /// Final over initial portfolio value, minus one.
    pub episode_return: f64,
    /// Mean loss over the updates made in this episode, if any.
    pub mean_loss: Option<f64>,
    /// Mean actor objective (DDPG only).
    pub mean_objective: Option<f64>,
    /// Exploration level at the end of the episode.
    pub exploration: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub episodes: Vec<EpisodeLog>,
}

impl TrainLog {
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "episode,start,steps,return,mean_loss,mean_objective,exploration")?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.episodes {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                e.episode,
                e.start,
                e.steps,
                e.episode_return,
                opt(e.mean_loss),
                opt(e.mean_objective),
                e.exploration
            )?;
        }
        Ok(())
    }
}

#[derive(Default)]
struct Running {
    loss: f64,
    objective: f64,
    n: usize,
}

impl Running {
    fn add(&mut self, loss: f64, objective: f64) {
        self.loss += loss;
        self.objective += objective;
        self.n += 1;
    }

    fn means(&self) -> (Option<f64>, Option<f64>) {
        if self.n == 0 {
            (None, None)
        } else {
            let n = self.n as f64;
            (Some(self.loss / n), Some(self.objective / n))
        }
    }
}

enum Learner {
    Dqn(Box<DqnAgent>),
    Ddpg(Box<DdpgAgent>),
}

/// Trains `kind` on `span` of `data`. Rule-based agents return immediately.
/// Episode ends are time truncations, so transitions always bootstrap.
pub fn train(
    kind: AgentKind,
    data: &MarketData,
    span: Range<usize>,
    env_cfg: &EnvConfig,
    opts: &TrainOptions,
    seed: u64,
) -> Result<(AgentParams, TrainLog), AgentError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let state_dim = data.observation_len() + PORTFOLIO_FEATURES;
    let mut learner = match kind {
        AgentKind::BuyAndHold => return Ok((AgentParams::BuyAndHold, TrainLog::default())),
        AgentKind::Turtle => return Ok((AgentParams::Turtle, TrainLog::default())),
        AgentKind::Dqn => Learner::Dqn(Box::new(DqnAgent::new(state_dim, DQN_ACTIONS.len(), opts.dqn.clone(), &mut rng)?)),
        AgentKind::Ddpg | AgentKind::Mssddpg => Learner::Ddpg(Box::new(DdpgAgent::new(state_dim, opts.ddpg.clone(), &mut rng)?)),
    };
    let mut env = TradingEnv::new(data, *env_cfg, span)?;
    let run_steps = opts.episodes * env.steps_per_episode();
    let mut log = TrainLog::default();
    let mut total_steps = 0usize;

    for episode in 0..opts.episodes {
        env.reset(&mut rng);
        let start = env.t();
        let mut state: Arc<[f64]> = env.agent_state().into();
        let mut running = Running::default();
        let mut steps = 0;
        let mut exploration = 0.0;
        while !env.is_done() {
            let (action, stored) = match &learner {
                Learner::Dqn(agent) => {
                    exploration = agent.hyper.epsilon_at(total_steps);
                    let idx = agent.act(&state, exploration, &mut rng)?;
                    (DQN_ACTIONS[idx], idx as f64)
                }
                Learner::Ddpg(agent) => {
                    exploration = agent.hyper.sigma_at(total_steps, run_steps);
                    let raw = agent.act(&state, Some((exploration, &mut rng)))?;
                    (encode_action(raw, env_cfg.dead_zone), raw)
                }
            };
            let outcome = env.step(action)?;
            let next: Arc<[f64]> = env.agent_state().into();
            let transition = Transition {
                state: state.clone(),
                action: vec![stored],
                reward: outcome.reward,
                next_state: next.clone(),
                done: false,
            };
            total_steps += 1;
            steps += 1;
            match &mut learner {
                Learner::Dqn(agent) => {
                    agent.replay.push(transition);
                    if total_steps.is_multiple_of(agent.hyper.train_every)
                        && agent.replay.len() >= agent.hyper.warmup_steps.max(agent.hyper.batch_size)
                    {
                        let loss = agent.learn(&mut rng)?;
                        running.add(loss, 0.0);
                    }
                }
                Learner::Ddpg(agent) => {
                    agent.replay.push(transition);
                    if total_steps.is_multiple_of(agent.hyper.train_every)
                        && agent.replay.len() >= agent.hyper.warmup_steps.max(agent.hyper.batch_size)
                    {
                        let stats = agent.learn(&mut rng)?;
                        running.add(stats.critic_loss, stats.actor_objective);
                    }
                }
            }
            state = next;
        }
        let (mean_loss, mean_objective) = running.means();
        log.episodes.push(EpisodeLog {
            episode,
            start,
            steps,
            episode_return: env.value() / env_cfg.initial_cash - 1.0,
            mean_loss,
            mean_objective: if matches!(learner, Learner::Ddpg(_)) { mean_objective } else { None },
            exploration,
        });
    }

    let params = match learner {
        Learner::Dqn(agent) => AgentParams::Dqn { q: agent.q },
        Learner::Ddpg(agent) => AgentParams::Ddpg {
            actor: agent.actor,
            critic: agent.critic,
        },
    };
    Ok((params, log))
}

/// Runs `policy` greedily over the whole of `span` and records the portfolio
/// value at every bar close, starting with the initial cash.
pub fn run_policy<P: Policy + ?Sized>(
    policy: &mut P,
    data: &MarketData,
    span: Range<usize>,
    env_cfg: &EnvConfig,
) -> Result<EquityCurve, AgentError> {
    let cfg = EnvConfig {
        episode: EpisodeMode::FullSpan,
        ..*env_cfg
    };
    let mut env = TradingEnv::new(data, cfg, span)?;
    // Full-span resets draw nothing from the generator.
    env.reset(&mut ChaCha8Rng::seed_from_u64(0));
    let mut timestamps = vec![data.timestamps()[env.t()]];
    let mut values = vec![env.value()];
    let mut first = true;
    while !env.is_done() {
        let t = env.t();
        let state = agent_state(data.observation(t), env.portfolio(), env.price());
        let ctx = DecisionContext {
            t,
            closes: &data.closes()[..=t],
            state: &state,
            first,
        };
        let action = policy.decide(&ctx)?;
        env.step(action)?;
        first = false;
        timestamps.push(data.timestamps()[env.t()]);
        values.push(env.value());
    }
    EquityCurve::new(timestamps, values).map_err(|e| AgentError::Hyper(e.to_string()))
}

/// Greedy rollout of trained parameters.
pub fn evaluate(
    params: &AgentParams,
    data: &MarketData,
    span: Range<usize>,
    env_cfg: &EnvConfig,
) -> Result<EquityCurve, AgentError> {
    let mut policy = GreedyPolicy::new(params.clone(), env_cfg.dead_zone);
    run_policy(&mut policy, data, span, env_cfg)
}

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";

/// Metadata written next to checkpoint network files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: AgentKind,
    pub seed: u64,
    pub config_hash: String,
    pub state_dim: usize,
    pub hyper: serde_json::Value,
    pub files: Vec<String>,
}

fn checkpoint_files(params: &AgentParams) -> Vec<(&'static str, &Mlp)> {
    match params {
        AgentParams::BuyAndHold | AgentParams::Turtle => Vec::new(),
        AgentParams::Dqn { q } => vec![("q.bin", q)],
        AgentParams::Ddpg { actor, critic } => vec![("actor.bin", actor), ("critic.bin", critic)],
    }
}

/// Writes networks and a manifest into `dir`.
pub fn save_checkpoint(
    dir: &Path,
    params: &AgentParams,
    manifest: &CheckpointManifest,
) -> Result<(), AgentError> {
    fs::create_dir_all(dir)?;
    let mut manifest = manifest.clone();
    manifest.files.clear();
    for (name, net) in checkpoint_files(params) {
        net.save(dir.join(name))?;
        manifest.files.push(name.to_string());
    }
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| AgentError::Checkpoint(e.to_string()))?;
    fs::write(dir.join(CHECKPOINT_MANIFEST), json + "\n")?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(AgentParams, CheckpointManifest), AgentError> {
    let manifest_path: PathBuf = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| AgentError::Checkpoint(format!("{}: {e}", manifest_path.display())))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| AgentError::Checkpoint(format!("{}: {e}", manifest_path.display())))?;
    let load = |name: &str| -> Result<Mlp, AgentError> {
        let path = dir.join(name);
        Mlp::load(&path).map_err(|e| AgentError::Checkpoint(format!("{}: {e}", path.display())))
    };
    let params = match manifest.kind {
        AgentKind::BuyAndHold => AgentParams::BuyAndHold,
        AgentKind::Turtle => AgentParams::Turtle,
        AgentKind::Dqn => AgentParams::Dqn { q: load("q.bin")? },
        AgentKind::Ddpg | AgentKind::Mssddpg => AgentParams::Ddpg {
            actor: load("actor.bin")?,
            critic: load("critic.bin")?,
        },
    };
    Ok((params, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Side;
    use crate::market_data::{synth_series, SynthSpec};
    use crate::nn::Dense;
    use ndarray::array;

    #[test]
    fn turtle_ramp() {
        let closes: Vec<f64> = (0..30).map(|i| 100.0 + i as f64).collect();
        let first_buy = (0..closes.len()).find(|&t| turtle_decide(&closes[..=t]).side == Side::Buy);
        assert_eq!(first_buy, Some(20));
        assert_eq!(turtle_decide(&closes[..=21]), Action::buy(1.0));
    }

    #[test]
    fn turtle_flat_holds() {
        let closes = vec![50.0; 60];
        assert!((0..60).all(|t| turtle_decide(&closes[..=t]) == Action::HOLD));
    }

    #[test]
    fn turtle_breakdown_sells() {
        let mut closes: Vec<f64> = (0..25).map(|i| 100.0 + i as f64).collect();
        // Prior 10 closes span 115..=124, so 114 is a breakdown.
        closes.push(114.0);
        assert_eq!(turtle_decide(&closes), Action::sell(1.0));
        assert_eq!(turtle_decide(&closes[..25]), Action::buy(1.0));
    }

    #[test]
    fn buy_and_hold_rule() {
        assert_eq!(buy_and_hold_decide(true), Action::buy(1.0));
        assert_eq!(buy_and_hold_decide(false), Action::HOLD);
    }

    #[test]
    fn kind_round_trip() {
        for k in AgentKind::ALL {
            assert_eq!(k.as_str().parse::<AgentKind>().unwrap(), k);
            assert_eq!(k.display_name().parse::<AgentKind>().unwrap(), k);
        }
        assert!("ppo".parse::<AgentKind>().is_err());
    }

    fn tiny_ddpg(hyper: DdpgHyper) -> DdpgAgent {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        DdpgAgent::new(3, DdpgHyper { hidden: vec![4], ..hyper }, &mut rng).unwrap()
    }

    fn transition(state: &[f64], action: f64, reward: f64, next: &[f64], done: bool) -> Transition {
        Transition {
            state: state.into(),
            action: vec![action],
            reward,
            next_state: next.into(),
            done,
        }
    }

    #[test]
    fn greedy_action_is_deterministic() {
        let agent = tiny_ddpg(DdpgHyper::default());
        let s = [0.3, -0.2, 0.9];
        let a = agent.act::<ChaCha8Rng>(&s, None).unwrap();
        assert_eq!(a, agent.act::<ChaCha8Rng>(&s, None).unwrap());
        assert!(a.abs() < 1.0);
        let noisy = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            agent.act(&s, Some((0.2, &mut r))).unwrap()
        };
        assert_eq!(noisy(9), noisy(9));
    }

    #[test]
    fn zero_final_layer_gives_zero_action() {
        let mut agent = tiny_ddpg(DdpgHyper::default());
        let last = agent.actor.layers_mut().last_mut().unwrap();
        last.weights.fill(0.0);
        last.bias.fill(0.0);
        assert_eq!(agent.act::<ChaCha8Rng>(&[1.0, 2.0, 3.0], None).unwrap(), 0.0);
    }

    #[test]
    fn terminal_targets_equal_reward() {
        let agent = tiny_ddpg(DdpgHyper::default());
        let a = transition(&[1.0, 0.0, 0.0], 0.5, 0.25, &[0.0, 1.0, 0.0], true);
        let b = transition(&[0.0, 0.0, 1.0], -0.5, -1.5, &[1.0, 1.0, 0.0], true);
        let y = agent.critic_targets(&[&a, &b]).unwrap();
        assert_eq!(y.to_vec(), vec![0.25, -1.5]);
    }

    #[test]
    fn targets_ignore_online_networks() {
        let mut agent = tiny_ddpg(DdpgHyper::default());
        let t = transition(&[1.0, 0.5, 0.0], 0.5, 0.1, &[0.2, 1.0, -0.3], false);
        let before = agent.critic_targets(&[&t]).unwrap();
        for k in 0..agent.actor.param_count() {
            *agent.actor.param_mut(k) += 0.5;
        }
        for k in 0..agent.critic.param_count() {
            *agent.critic.param_mut(k) -= 0.5;
        }
        assert_eq!(agent.critic_targets(&[&t]).unwrap(), before);
        *agent.critic_target.param_mut(0) += 1.0;
        assert_ne!(agent.critic_targets(&[&t]).unwrap(), before);
    }

    #[test]
    fn constant_critic_gives_zero_actor_gradient() {
        let mut agent = tiny_ddpg(DdpgHyper::default());
        for layer in agent.critic.layers_mut() {
            layer.weights.fill(0.0);
        }
        agent.critic.layers_mut().last_mut().unwrap().bias.fill(3.0);
        let states = array![[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]];
        let (objective, grads) = agent.actor_gradient(states.view()).unwrap();
        assert_eq!(objective, 3.0);
        assert_eq!(grads.norm(), 0.0);
    }

    #[test]
    fn hand_sized_critic_loss() {
        // Actor: a = tanh(0.5 s); critic: Q = 2 s + 1 a + 0.5 (linear).
        let actor = Mlp::from_layers(vec![Dense {
            weights: array![[0.5]],
            bias: array![0.0],
            activation: Activation::Tanh,
        }])
        .unwrap();
        let critic = Mlp::from_layers(vec![Dense {
            weights: array![[2.0, 1.0]],
            bias: array![0.5],
            activation: Activation::Identity,
        }])
        .unwrap();
        let hyper = DdpgHyper {
            gamma: 0.9,
            batch_size: 1,
            ..DdpgHyper::default()
        };
        let mut agent = DdpgAgent::from_networks(actor, critic, hyper).unwrap();
        let t = transition(&[1.0], 0.4, 0.3, &[2.0], false);
        // y = 0.3 + 0.9 * (2*2 + tanh(1) + 0.5); Q = 2*1 + 0.4 + 0.5
        let y = 0.3 + 0.9 * (4.0 + 1f64.tanh() + 0.5);
        let q = 2.9;
        let stats = agent.train_step(&[&t]).unwrap();
        assert!((stats.critic_loss - (y - q).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn learn_waits_for_warmup() {
        let mut agent = tiny_ddpg(DdpgHyper {
            warmup_steps: 10,
            batch_size: 4,
            ..DdpgHyper::default()
        });
        let t = transition(&[0.0; 3], 0.0, 0.0, &[0.0; 3], false);
        for _ in 0..9 {
            agent.replay.push(t.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            agent.learn(&mut rng),
            Err(AgentError::Nn(NnError::NotReady { have: 9, need: 10 }))
        ));
        agent.replay.push(t);
        assert!(agent.learn(&mut rng).is_ok());
        assert_eq!(agent.replay.len(), 10);
    }

    #[test]
    fn noise_anneals_linearly() {
        let h = DdpgHyper {
            noise_sigma: 0.2,
            noise_sigma_final: 0.0,
            noise_decay_steps: Some(100),
            ..DdpgHyper::default()
        };
        assert_eq!(h.sigma_at(0, 7), 0.2);
        assert!((h.sigma_at(50, 7) - 0.1).abs() < 1e-15);
        assert_eq!(h.sigma_at(1000, 7), 0.0);
        let whole_run = DdpgHyper::default();
        assert!((whole_run.sigma_at(30, 60) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn dqn_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let agent = DqnAgent::new(
            2,
            3,
            DqnHyper {
                gamma: 0.0,
                hidden: vec![4],
                ..DqnHyper::default()
            },
            &mut rng,
        )
        .unwrap();
        let t = transition(&[1.0, 0.0], 2.0, 0.7, &[0.0, 1.0], false);
        assert_eq!(agent.targets(&[&t]).unwrap()[0], 0.7);

        let agent = DqnAgent::from_network(agent.q.clone(), DqnHyper::default()).unwrap();
        let t = transition(&[1.0, 0.0], 2.0, -0.2, &[0.0, 1.0], true);
        assert_eq!(agent.targets(&[&t]).unwrap()[0], -0.2);
    }

    #[test]
    fn dqn_grid_is_seven_distinct_actions() {
        assert_eq!(DQN_ACTIONS.len(), 7);
        assert_eq!(DQN_ACTIONS.iter().filter(|a| a.side == Side::Hold).count(), 1);
        for (i, a) in DQN_ACTIONS.iter().enumerate() {
            assert!(DQN_ACTIONS[i + 1..].iter().all(|b| b != a));
        }
    }

    fn sine_data() -> MarketData {
        let s = synth_series(&SynthSpec::sine(100.0, 10.0, 50.0, 200, 1)).unwrap();
        MarketData::build(&s, &PipelineConfig::raw_window(10)).unwrap()
    }

    fn small_opts(episodes: usize) -> TrainOptions {
        TrainOptions {
            episodes,
            ddpg: DdpgHyper {
                hidden: vec![8],
                warmup_steps: 32,
                batch_size: 16,
                ..DdpgHyper::default()
            },
            dqn: DqnHyper {
                hidden: vec![8],
                warmup_steps: 32,
                batch_size: 16,
                ..DqnHyper::default()
            },
        }
    }

    fn env_cfg() -> EnvConfig {
        EnvConfig {
            episode: EpisodeMode::RandomWindow { length: 60 },
            ..EnvConfig::default()
        }
    }

    #[test]
    fn zero_episodes_returns_initialization() {
        let data = sine_data();
        let state_dim = data.observation_len() + PORTFOLIO_FEATURES;
        let opts = small_opts(0);
        let (params, log) = train(AgentKind::Ddpg, &data, 0..150, &env_cfg(), &opts, 5).unwrap();
        let fresh = DdpgAgent::new(state_dim, opts.ddpg.clone(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(
            params,
            AgentParams::Ddpg {
                actor: fresh.actor,
                critic: fresh.critic
            }
        );
        assert!(log.episodes.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let data = sine_data();
        for kind in [AgentKind::Ddpg, AgentKind::Dqn] {
            let a = train(kind, &data, 0..150, &env_cfg(), &small_opts(3), 11).unwrap();
            let b = train(kind, &data, 0..150, &env_cfg(), &small_opts(3), 11).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.1.episodes.len(), 3);
            assert!(a.1.episodes.iter().any(|e| e.mean_loss.is_some()));
        }
    }

    #[test]
    fn evaluation_curves() {
        let data = sine_data();
        let fee_free = EnvConfig {
            fee_rate: 0.0,
            ..EnvConfig::default()
        };
        let curve = evaluate(&AgentParams::BuyAndHold, &data, 150..200, &fee_free).unwrap();
        assert_eq!(curve.len(), 50);
        let bh = curve.normalized();
        let closes = &data.closes()[150..200];
        for (v, c) in bh.iter().zip(closes) {
            // Leftover cash from whole-share rounding is below one share.
            assert!((v - c / closes[0]).abs() < closes[0] / 1e6);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut agent = DdpgAgent::new(data.observation_len() + 2, DdpgHyper::default(), &mut rng).unwrap();
        let last = agent.actor.layers_mut().last_mut().unwrap();
        last.weights.fill(0.0);
        last.bias.fill(0.0);
        let params = AgentParams::Ddpg {
            actor: agent.actor,
            critic: agent.critic,
        };
        let curve = evaluate(&params, &data, 150..200, &EnvConfig::default()).unwrap();
        assert!(curve.values().iter().all(|&v| v == 1e6));
    }

    #[test]
    fn checkpoint_round_trip() {
        let data = sine_data();
        let (params, _) = train(AgentKind::Dqn, &data, 0..150, &env_cfg(), &small_opts(1), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = CheckpointManifest {
            kind: AgentKind::Dqn,
            seed: 3,
            config_hash: "abc".into(),
            state_dim: data.observation_len() + 2,
            hyper: serde_json::to_value(&small_opts(1).dqn).unwrap(),
            files: vec![],
        };
        save_checkpoint(dir.path(), &params, &manifest).unwrap();
        let (loaded, m) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded, params);
        assert_eq!(m.files, vec!["q.bin".to_string()]);
        assert!(matches!(
            load_checkpoint(&dir.path().join("missing")),
            Err(AgentError::Checkpoint(_))
        ));
    }
}
