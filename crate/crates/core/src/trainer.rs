//! Control-priority independent PPO.
//!
//! Every agent owns an actor (control means plus a priority logit) and a
//! critic, both fed with its local observation concatenated with the
//! communicated block assembled from the network. One training iteration:
//!
//! 1. For `T` steps: each agent samples `(a_c, a_p)` and records `V(o~)`;
//!    the environment advances on the controls; slots are allocated from
//!    the priorities (or round-robin); the winners broadcast their new
//!    state over the lossy, delayed channel; each agent stores
//!    `r_c - xi * a_p`.
//! 2. GAE over each agent's buffer.
//! 3. `K` epochs of shuffled minibatch updates of actor and critic, for each
//!    agent independently.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::buffer::{RolloutBuffer, Transition};
use crate::comm::{
    assemble_comm_obs, AllocationKind, BandwidthStats, ChannelState, CommMode, CommRecord, Message, NetworkConfig,
};
use crate::env::{EnvConfig, Environment, TraceRow, Vec2, CONTROL_DIM, PAYLOAD_LEN};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, AgentAction, AgentParameters, Checkpoint, GaussianPolicyHead, Mlp};
use crate::ppo::{actor_loss, combined_reward, critic_loss, normalize, ActorBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip_eps: f64,
    /// Weight of the communication penalty.
    pub xi: f64,
    /// Steps collected per rollout.
    pub rollout_len: usize,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub total_steps: u64,
    pub entropy_coef: f64,
    pub hidden_sizes: Vec<usize>,
    pub initial_log_std: f64,
    /// Multiplier on the actor's initial output-layer weights.
    pub actor_output_scale: f64,
    pub normalize_advantages: bool,
    /// Global gradient-norm bound per network; `0` disables clipping.
    pub max_grad_norm: f64,
    /// Evaluate every this many rollouts (the first and last are always
    /// evaluated when `eval_episodes > 0`); `0` evaluates only at the ends.
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// One actor/critic pair for all agents instead of one per agent.
    pub share_parameters: bool,
    /// Keep the per-step communication log in memory.
    pub log_comm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            clip_eps: 0.2,
            xi: 0.05,
            rollout_len: 2048,
            epochs: 10,
            minibatch_size: 256,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            total_steps: 1_000_000,
            entropy_coef: 0.0,
            hidden_sizes: vec![64, 64],
            initial_log_std: 0.5f64.ln(),
            actor_output_scale: 0.01,
            normalize_advantages: true,
            max_grad_norm: 0.5,
            eval_interval: 10,
            eval_episodes: 10,
            share_parameters: false,
            log_comm: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return fail(format!("train.gamma must lie in (0, 1), got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail(format!("train.lambda must lie in [0, 1], got {}", self.lambda));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps.is_finite()) {
            return fail(format!("train.clip_eps must be positive, got {}", self.clip_eps));
        }
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return fail(format!("train.xi must be positive, got {}", self.xi));
        }
        if self.rollout_len == 0 {
            return fail("train.rollout_len must be at least 1".into());
        }
        if self.epochs == 0 {
            return fail("train.epochs must be at least 1".into());
        }
        if self.minibatch_size == 0 || self.minibatch_size > self.rollout_len {
            return fail(format!(
                "train.minibatch_size must lie in [1, rollout_len = {}], got {}",
                self.rollout_len, self.minibatch_size
            ));
        }
        for (name, lr) in [("actor_lr", self.actor_lr), ("critic_lr", self.critic_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return fail(format!("train.{name} must be positive, got {lr}"));
            }
        }
        if !(self.entropy_coef >= 0.0 && self.entropy_coef.is_finite()) {
            return fail("train.entropy_coef must be non-negative".into());
        }
        if self.hidden_sizes.contains(&0) {
            return fail("train.hidden_sizes entries must be positive".into());
        }
        if !self.initial_log_std.is_finite() || !self.actor_output_scale.is_finite() {
            return fail("train.initial_log_std and train.actor_output_scale must be finite".into());
        }
        if !(self.max_grad_norm >= 0.0 && self.max_grad_norm.is_finite()) {
            return fail("train.max_grad_norm must be non-negative".into());
        }
        Ok(())
    }
}

/// Totals of one finished training episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeStats {
    /// Sum of the shared control reward.
    pub control_reward: f64,
    /// Per agent, the sum of its priorities over the episode.
    pub priority_sums: Vec<f64>,
    /// `xi * mean_i(priority_sums[i])`.
    pub penalty: f64,
    /// `control_reward - penalty`: the agents' mean penalised return.
    pub reward: f64,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateStats {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    /// Largest `|ratio - 1|` in the first minibatch of the first epoch.
    pub first_minibatch_ratio_deviation: f64,
}

/// One line of the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub rollout: usize,
    pub env_steps: u64,
    pub episodes: usize,
    pub mean_episode_reward: Option<f64>,
    pub mean_control_reward: Option<f64>,
    pub mean_penalty: Option<f64>,
    /// Mean sampled priority of each agent over the rollout (empty without
    /// priorities).
    pub mean_priority: Vec<f64>,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub entropy: f64,
    pub eval_control_reward: Option<f64>,
}

/// Per-step record of an evaluation episode.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorityTraceRow {
    pub episode: usize,
    pub step: usize,
    pub priorities: Vec<f64>,
    pub selected: Vec<usize>,
    pub kind: AllocationKind,
    pub control_reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub episodes: usize,
    /// Mean over episodes of the summed shared control reward.
    pub mean_control_reward: f64,
    /// Mean over episodes of `xi * mean_i(sum of priorities)`.
    pub mean_penalty: f64,
    pub episode_control_rewards: Vec<f64>,
    pub trace: Vec<PriorityTraceRow>,
    pub env_trace: Vec<TraceRow>,
    pub bandwidth: BandwidthStats,
}

/// Rng stream ids derived from a run seed.
mod streams {
    pub const LANDMARKS: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const CHANNEL: u64 = 3;
    pub const EVAL_ENV: u64 = 4;
    pub const EVAL_CHANNEL: u64 = 5;
    pub const INIT: u64 = 1_000;
    pub const ACTION: u64 = 2_000;
    pub const MINIBATCH: u64 = 3_000;
    pub const SPAWN: u64 = 4_000;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Layer sizes of the actor and critic for a given configuration.
pub fn network_shapes(env: &EnvConfig, net: &NetworkConfig, train: &TrainConfig) -> (Vec<usize>, Vec<usize>) {
    let input = policy_input_dim(env, net);
    let head_dim = CONTROL_DIM + usize::from(net.mode == CommMode::Priority);
    let mut actor = vec![input];
    actor.extend(&train.hidden_sizes);
    actor.push(head_dim);
    let mut critic = vec![input];
    critic.extend(&train.hidden_sizes);
    critic.push(1);
    (actor, critic)
}

/// Local observation plus one payload slot per agent.
pub fn policy_input_dim(env: &EnvConfig, net: &NetworkConfig) -> usize {
    env.obs_dim() + PAYLOAD_LEN * net.n_agents
}

fn check_configs(env: &EnvConfig, net: &NetworkConfig, train: &TrainConfig) -> Result<()> {
    env.validate()?;
    net.validate()?;
    train.validate()?;
    if env.n_agents != net.n_agents {
        return Err(Error::Config(format!(
            "env.n_agents ({}) and network.n_agents ({}) differ",
            env.n_agents, net.n_agents
        )));
    }
    Ok(())
}

/// Check that a checkpoint fits the configuration.
pub fn check_checkpoint(ckpt: &Checkpoint, env: &EnvConfig, net: &NetworkConfig, train: &TrainConfig) -> Result<()> {
    let (actor, critic) = network_shapes(env, net, train);
    let shared = ckpt.agents.len() == 1 && train.share_parameters;
    if ckpt.agents.len() != env.n_agents && !shared {
        return Err(Error::Config(format!(
            "checkpoint holds {} agents, config has {}",
            ckpt.agents.len(),
            env.n_agents
        )));
    }
    for (i, a) in ckpt.agents.iter().enumerate() {
        if a.actor.layer_sizes() != actor.as_slice() || a.critic.layer_sizes() != critic.as_slice() {
            return Err(Error::Config(format!(
                "checkpoint agent {i} has actor {:?} / critic {:?}, config expects {actor:?} / {critic:?}",
                a.actor.layer_sizes(),
                a.critic.layer_sizes()
            )));
        }
        if a.head.with_priority() != (net.mode == CommMode::Priority) {
            return Err(Error::Config(format!(
                "checkpoint agent {i} priority head does not match network mode {}",
                net.mode.as_str()
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct Learner {
    params: AgentParameters,
    actor_opt: AdamState,
    critic_opt: AdamState,
    rng: ChaCha8Rng,
}

impl Learner {
    fn new(env: &EnvConfig, net: &NetworkConfig, train: &TrainConfig, seed: u64, index: usize) -> Result<Self> {
        let (actor_sizes, critic_sizes) = network_shapes(env, net, train);
        let mut init = stream_rng(seed, streams::INIT + index as u64);
        let actor = Mlp::new(&actor_sizes, train.actor_output_scale, &mut init)?;
        let critic = Mlp::new(&critic_sizes, 1.0, &mut init)?;
        let head = GaussianPolicyHead::new(CONTROL_DIM, net.mode == CommMode::Priority, train.initial_log_std)?;
        let mut actor_lens: Vec<usize> = actor.tensors().iter().map(|t| t.len()).collect();
        actor_lens.push(head.dim());
        let critic_lens: Vec<usize> = critic.tensors().iter().map(|t| t.len()).collect();
        Ok(Self {
            actor_opt: AdamState::new(AdamConfig::with_learning_rate(train.actor_lr), &actor_lens),
            critic_opt: AdamState::new(AdamConfig::with_learning_rate(train.critic_lr), &critic_lens),
            params: AgentParameters { actor, head, critic },
            rng: stream_rng(seed, streams::MINIBATCH + index as u64),
        })
    }
}

fn clip_scale(squared_norm: f64, max_norm: f64) -> f64 {
    let norm = squared_norm.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        max_norm / norm
    } else {
        1.0
    }
}

/// Deterministic mean of a slice, `None` when empty.
fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

struct EpisodeAccumulator {
    control: f64,
    priority_sums: Vec<f64>,
    length: usize,
}

impl EpisodeAccumulator {
    fn new(n_agents: usize) -> Self {
        Self {
            control: 0.0,
            priority_sums: vec![0.0; n_agents],
            length: 0,
        }
    }

    fn finish(&mut self, xi: f64) -> EpisodeStats {
        let n = self.priority_sums.len();
        let penalty = xi * self.priority_sums.iter().sum::<f64>() / n as f64;
        let stats = EpisodeStats {
            control_reward: self.control,
            priority_sums: self.priority_sums.clone(),
            penalty,
            reward: self.control - penalty,
            length: self.length,
        };
        *self = Self::new(n);
        stats
    }
}

pub struct Trainer {
    env_config: EnvConfig,
    net_config: NetworkConfig,
    config: TrainConfig,
    seed: u64,
    env: Environment,
    channel: ChannelState,
    learners: Vec<Learner>,
    action_rngs: Vec<ChaCha8Rng>,
    spawn_rngs: Vec<ChaCha8Rng>,
    landmark_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    obs: Vec<Vec<f64>>,
    pending: Vec<Message>,
    clock: u64,
    env_steps: u64,
    buffers: Vec<RolloutBuffer>,
    episode: EpisodeAccumulator,
    finished: Vec<EpisodeStats>,
    rollout_priority_sums: Vec<f64>,
    comm_log: Option<Vec<CommRecord>>,
    bandwidth: BandwidthStats,
}

impl Trainer {
    pub fn new(env_config: EnvConfig, net_config: NetworkConfig, config: TrainConfig, seed: u64) -> Result<Self> {
        check_configs(&env_config, &net_config, &config)?;
        let n = env_config.n_agents;
        let n_learners = if config.share_parameters { 1 } else { n };
        let learners = (0..n_learners)
            .map(|i| Learner::new(&env_config, &net_config, &config, seed, i))
            .collect::<Result<Vec<_>>>()?;
        let input_dim = policy_input_dim(&env_config, &net_config);
        let mut trainer = Self {
            env: Environment::new(env_config.clone())?,
            channel: ChannelState::new(stream_rng(seed, streams::CHANNEL)),
            learners,
            action_rngs: (0..n).map(|i| stream_rng(seed, streams::ACTION + i as u64)).collect(),
            spawn_rngs: (0..n).map(|i| stream_rng(seed, streams::SPAWN + i as u64)).collect(),
            landmark_rng: stream_rng(seed, streams::LANDMARKS),
            noise_rng: stream_rng(seed, streams::NOISE),
            obs: Vec::new(),
            pending: Vec::new(),
            clock: 0,
            env_steps: 0,
            buffers: (0..n)
                .map(|_| RolloutBuffer::new(input_dim, config.rollout_len))
                .collect(),
            episode: EpisodeAccumulator::new(n),
            finished: Vec::new(),
            rollout_priority_sums: vec![0.0; n],
            comm_log: config.log_comm.then(Vec::new),
            bandwidth: BandwidthStats::new(&net_config)?,
            env_config,
            net_config,
            config,
            seed,
        };
        trainer.obs = trainer
            .env
            .reset_per_agent(&mut trainer.landmark_rng, &mut trainer.spawn_rngs);
        Ok(trainer)
    }

    pub fn n_agents(&self) -> usize {
        self.env_config.n_agents
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn buffers(&self) -> &[RolloutBuffer] {
        &self.buffers
    }

    pub fn environment(&self) -> &Environment {
        &self.env
    }

    pub fn comm_log(&self) -> Option<&[CommRecord]> {
        self.comm_log.as_deref()
    }

    pub fn bandwidth(&self) -> &BandwidthStats {
        &self.bandwidth
    }

    /// Episodes finished during the last rollout.
    pub fn finished_episodes(&self) -> &[EpisodeStats] {
        &self.finished
    }

    fn learner_of(&self, agent: usize) -> usize {
        if self.config.share_parameters {
            0
        } else {
            agent
        }
    }

    pub fn agent_parameters(&self, agent: usize) -> &AgentParameters {
        &self.learners[self.learner_of(agent)].params
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            agents: self.learners.iter().map(|l| l.params.clone()).collect(),
        }
    }

    /// Policy input of `agent` for the current step.
    pub fn policy_input(&self, agent: usize) -> Result<Vec<f64>> {
        let mut input = self.obs[agent].clone();
        input.extend(assemble_comm_obs(&self.pending, agent, self.n_agents())?);
        Ok(input)
    }

    /// Relabel the agents: new agent `k` is old agent `perm[k]`. Parameters,
    /// random streams and the world state move with the agent, and the
    /// communicated-block input columns are permuted to match. Only valid
    /// before the first step.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n_agents();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Input(format!("{perm:?} is not a permutation of 0..{n}")));
        }
        if self.env_steps != 0 {
            return Err(Error::Input(
                "agents can only be relabelled before training starts".into(),
            ));
        }
        if self.config.share_parameters {
            return Err(Error::Input("relabelling requires per-agent parameters".into()));
        }
        let local = self.env_config.obs_dim();
        let remap = |mlp: &Mlp| -> Mlp {
            let mut out = mlp.clone();
            let old = mlp.weights()[0].clone();
            let w = out.weights_mut(0);
            for (k, &src) in perm.iter().enumerate() {
                for e in 0..PAYLOAD_LEN {
                    let (dst_col, src_col) = (local + k * PAYLOAD_LEN + e, local + src * PAYLOAD_LEN + e);
                    w.column_mut(dst_col).assign(&old.column(src_col));
                }
            }
            out
        };
        let mut next = Self {
            env_config: self.env_config.clone(),
            net_config: self.net_config.clone(),
            config: self.config.clone(),
            seed: self.seed,
            env: self.env.clone(),
            channel: self.channel.clone(),
            learners: Vec::with_capacity(n),
            action_rngs: perm.iter().map(|&p| self.action_rngs[p].clone()).collect(),
            spawn_rngs: perm.iter().map(|&p| self.spawn_rngs[p].clone()).collect(),
            landmark_rng: self.landmark_rng.clone(),
            noise_rng: self.noise_rng.clone(),
            obs: perm.iter().map(|&p| self.obs[p].clone()).collect(),
            pending: Vec::new(),
            clock: self.clock,
            env_steps: 0,
            buffers: self.buffers.clone(),
            episode: EpisodeAccumulator::new(n),
            finished: Vec::new(),
            rollout_priority_sums: vec![0.0; n],
            comm_log: self.comm_log.clone(),
            bandwidth: self.bandwidth.clone(),
        };
        for &p in perm {
            let mut learner = self.learners[p].clone();
            learner.params.actor = remap(&learner.params.actor);
            learner.params.critic = remap(&learner.params.critic);
            next.learners.push(learner);
        }
        let s = self.env.state();
        let mut state = s.clone();
        state.positions = perm.iter().map(|&p| s.positions[p]).collect();
        state.velocities = perm.iter().map(|&p| s.velocities[p]).collect();
        next.env.set_state(state)?;
        Ok(next)
    }

    /// Run one environment step for all agents and record it.
    fn step(&mut self) -> Result<()> {
        let n = self.n_agents();
        let mut actions: Vec<AgentAction> = Vec::with_capacity(n);
        let mut records = Vec::with_capacity(n);
        for i in 0..n {
            let input = self.policy_input(i)?;
            let learner = &self.learners[self.learner_of(i)];
            let mean_raw = learner.params.actor.forward(&input)?;
            let (action, log_prob) = learner.params.head.sample_action(&mean_raw, &mut self.action_rngs[i])?;
            let value = learner.params.critic.forward(&input)?[0];
            if !value.is_finite() {
                return Err(Error::Numeric(format!("critic value of agent {i} is not finite")));
            }
            actions.push(action.clone());
            records.push((input, action, log_prob, value));
        }

        let controls: Vec<Vec2> = actions.iter().map(|a| [a.control[0], a.control[1]]).collect();
        let outcome = self.env.step(&controls, &mut self.noise_rng)?;

        let priorities: Vec<f64> = match self.net_config.mode {
            CommMode::Priority => actions
                .iter()
                .map(|a| a.priority_value().expect("priority head"))
                .collect(),
            CommMode::RoundRobin => Vec::new(),
        };
        let allocation = self.channel.allocate_slots(&priorities, &self.net_config)?;
        let payloads: Vec<[f64; PAYLOAD_LEN]> = allocation
            .selected
            .iter()
            .map(|&i| self.env.state().broadcast_payload(i))
            .collect();
        let dropped = self
            .channel
            .transmit(&allocation.selected, &payloads, self.clock + 1, &self.net_config)?;
        self.bandwidth.record(&allocation, dropped.len());
        if let Some(log) = &mut self.comm_log {
            log.push(CommRecord {
                step: self.env_steps,
                kind: allocation.kind,
                selected: allocation.selected.clone(),
                dropped,
                priorities: priorities.clone(),
            });
        }

        self.episode.control += outcome.reward;
        self.episode.length += 1;
        for (i, (input, action, log_prob, value)) in records.into_iter().enumerate() {
            let priority = action.priority_value();
            if let Some(p) = priority {
                self.episode.priority_sums[i] += p;
                self.rollout_priority_sums[i] += p;
            }
            let reward = combined_reward(outcome.reward, priority, self.config.xi);
            let penalty = priority.map_or(0.0, |p| self.config.xi * p);
            self.buffers[i].push(Transition {
                input,
                action,
                log_prob,
                value,
                control_reward: outcome.reward,
                penalty,
                reward,
                done: outcome.done,
            })?;
        }

        self.clock += 1;
        self.env_steps += 1;
        if outcome.done {
            self.finished.push(self.episode.finish(self.config.xi));
            self.obs = self.env.reset_per_agent(&mut self.landmark_rng, &mut self.spawn_rngs);
            self.channel.clear_in_flight();
        } else {
            self.obs = outcome.observations;
        }
        self.pending = self.channel.deliver(self.clock);
        Ok(())
    }

    /// Collect `steps` transitions into fresh buffers.
    pub fn collect_rollout(&mut self, steps: usize) -> Result<()> {
        for b in &mut self.buffers {
            b.clear();
        }
        self.finished.clear();
        self.rollout_priority_sums.iter_mut().for_each(|s| *s = 0.0);
        for t in 0..steps {
            self.step().map_err(|e| e.context(format!("step {t} of rollout")))?;
        }
        Ok(())
    }

    /// Advantages and value targets for every agent's buffer.
    pub fn compute_advantages(&mut self) -> Result<()> {
        for i in 0..self.n_agents() {
            let last_done = self.buffers[i].dones().last().copied().unwrap_or(true);
            let bootstrap = if last_done {
                0.0
            } else {
                let input = self.policy_input(i)?;
                self.learners[self.learner_of(i)].params.critic.forward(&input)?[0]
            };
            self.buffers[i].compute_advantages(bootstrap, self.config.gamma, self.config.lambda);
        }
        Ok(())
    }

    /// PPO update of every learner on the current buffers.
    pub fn update(&mut self) -> Result<UpdateStats> {
        if self.buffers.iter().any(|b| !b.has_advantages()) {
            return Err(Error::Config("update called before advantages were computed".into()));
        }
        let mut totals = (0.0, 0.0, 0.0, 0.0, 0usize);
        let mut first_dev = 0.0f64;
        for l in 0..self.learners.len() {
            let agents: Vec<usize> = if self.config.share_parameters {
                (0..self.n_agents()).collect()
            } else {
                vec![l]
            };
            let stats = self
                .update_learner(l, &agents)
                .map_err(|e| e.context(format!("update of agent {l}")))?;
            totals.0 += stats.actor_loss;
            totals.1 += stats.critic_loss;
            totals.2 += stats.entropy;
            totals.3 += stats.clip_fraction;
            totals.4 += 1;
            first_dev = first_dev.max(stats.first_minibatch_ratio_deviation);
        }
        let k = totals.4 as f64;
        Ok(UpdateStats {
            actor_loss: totals.0 / k,
            critic_loss: totals.1 / k,
            entropy: totals.2 / k,
            clip_fraction: totals.3 / k,
            first_minibatch_ratio_deviation: first_dev,
        })
    }

    fn update_learner(&mut self, l: usize, agents: &[usize]) -> Result<UpdateStats> {
        // flatten the data of every agent this learner serves
        let mut index: Vec<(usize, usize)> = Vec::new();
        for &a in agents {
            index.extend((0..self.buffers[a].len()).map(|t| (a, t)));
        }
        let cfg = self.config.clone();
        let learner = &mut self.learners[l];
        let buffers = &self.buffers;
        let input_dim = buffers[agents[0]].input_dim();
        let mut order: Vec<usize> = (0..index.len()).collect();
        let (mut actor_sum, mut critic_sum, mut clip_sum, mut batches) = (0.0, 0.0, 0.0, 0usize);
        let mut first_dev = None;

        let mut actor_names = learner.params.actor.tensor_names();
        actor_names.push("log_std".into());
        let critic_names = learner.params.critic.tensor_names();

        for _epoch in 0..cfg.epochs {
            order.shuffle(&mut learner.rng);
            for chunk in order.chunks(cfg.minibatch_size) {
                let rows: Vec<(usize, usize)> = chunk.iter().map(|&k| index[k]).collect();
                let mut obs = Array2::zeros((rows.len(), input_dim));
                for (mut row, &(a, t)) in obs.rows_mut().into_iter().zip(&rows) {
                    row.as_slice_mut().unwrap().copy_from_slice(buffers[a].input(t));
                }
                let actions: Vec<AgentAction> = rows.iter().map(|&(a, t)| buffers[a].actions()[t].clone()).collect();
                let old_log_probs: Vec<f64> = rows.iter().map(|&(a, t)| buffers[a].log_probs()[t]).collect();
                let raw_adv: Vec<f64> = rows.iter().map(|&(a, t)| buffers[a].advantages()[t]).collect();
                let advantages = if cfg.normalize_advantages && raw_adv.len() > 1 {
                    normalize(&raw_adv)
                } else {
                    raw_adv
                };
                let old_values: Vec<f64> = rows.iter().map(|&(a, t)| buffers[a].values()[t]).collect();
                let targets: Vec<f64> = rows.iter().map(|&(a, t)| buffers[a].targets()[t]).collect();

                let params = &mut learner.params;
                let batch = ActorBatch {
                    obs: obs.view(),
                    actions: &actions,
                    old_log_probs: &old_log_probs,
                    advantages: &advantages,
                };
                let mut a_loss = actor_loss(&params.actor, &params.head, &batch, cfg.clip_eps, cfg.entropy_coef)?;
                if first_dev.is_none() {
                    first_dev = Some(a_loss.ratios.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max));
                }
                let sq = a_loss.grads.squared_norm() + a_loss.log_std_grad.iter().map(|g| g * g).sum::<f64>();
                let s = clip_scale(sq, cfg.max_grad_norm);
                if s != 1.0 {
                    a_loss.grads.scale(s);
                    a_loss.log_std_grad.iter_mut().for_each(|g| *g *= s);
                }
                {
                    let mut grads = a_loss.grads.tensors();
                    grads.push(&a_loss.log_std_grad);
                    let AgentParameters { actor, head, .. } = params;
                    let mut tensors = actor.tensors_mut();
                    tensors.push(head.log_std_mut());
                    learner.actor_opt.update(&mut tensors, &grads, &actor_names)?;
                    head.clamp_log_std();
                }

                let mut c_loss = critic_loss(&params.critic, obs.view(), &old_values, &targets, cfg.clip_eps)?;
                let s = clip_scale(c_loss.grads.squared_norm(), cfg.max_grad_norm);
                if s != 1.0 {
                    c_loss.grads.scale(s);
                }
                let grads = c_loss.grads.tensors();
                learner
                    .critic_opt
                    .update(&mut params.critic.tensors_mut(), &grads, &critic_names)?;

                actor_sum += a_loss.loss;
                critic_sum += c_loss.loss;
                clip_sum += a_loss.clip_fraction;
                batches += 1;
            }
        }
        let b = batches as f64;
        Ok(UpdateStats {
            actor_loss: actor_sum / b,
            critic_loss: critic_sum / b,
            entropy: learner.params.head.entropy(),
            clip_fraction: clip_sum / b,
            first_minibatch_ratio_deviation: first_dev.unwrap_or(0.0),
        })
    }

    /// Evaluate the current parameters with deterministic actions on
    /// episodes seeded from `seed`.
    pub fn evaluate(&self, episodes: usize, seed: u64, record_env: bool) -> Result<EvalReport> {
        let params: Vec<&AgentParameters> = (0..self.n_agents()).map(|i| self.agent_parameters(i)).collect();
        evaluate_policies(
            &params,
            &self.env_config,
            &self.net_config,
            self.config.xi,
            episodes,
            seed,
            record_env,
        )
    }

    fn metrics_row(&self, rollout: usize, steps: usize, stats: &UpdateStats, eval: Option<f64>) -> MetricsRow {
        let mean_priority = match self.net_config.mode {
            CommMode::Priority => self.rollout_priority_sums.iter().map(|s| s / steps as f64).collect(),
            CommMode::RoundRobin => Vec::new(),
        };
        MetricsRow {
            rollout,
            env_steps: self.env_steps,
            episodes: self.finished.len(),
            mean_episode_reward: mean(self.finished.iter().map(|e| e.reward)),
            mean_control_reward: mean(self.finished.iter().map(|e| e.control_reward)),
            mean_penalty: mean(self.finished.iter().map(|e| e.penalty)),
            mean_priority,
            actor_loss: stats.actor_loss,
            critic_loss: stats.critic_loss,
            entropy: stats.entropy,
            eval_control_reward: eval,
        }
    }
}

/// Seed used for the periodic evaluations of a training run.
pub fn eval_seed(run_seed: u64) -> u64 {
    run_seed.wrapping_add(0x9E37_79B9_7F4A_7C15)
}

/// Deterministic-action evaluation of one parameter set per agent.
pub fn evaluate_policies(
    params: &[&AgentParameters],
    env_config: &EnvConfig,
    net_config: &NetworkConfig,
    xi: f64,
    episodes: usize,
    seed: u64,
    record_env: bool,
) -> Result<EvalReport> {
    let n = env_config.n_agents;
    if params.len() != n || net_config.n_agents != n {
        return Err(Error::Config(format!(
            "evaluation got {} parameter sets for {} agents",
            params.len(),
            n
        )));
    }
    let mut env = Environment::new(env_config.clone())?;
    let mut env_rng = stream_rng(seed, streams::EVAL_ENV);
    let mut noise_rng = stream_rng(seed, streams::NOISE);
    let mut channel = ChannelState::new(stream_rng(seed, streams::EVAL_CHANNEL));
    let mut bandwidth = BandwidthStats::new(net_config)?;
    let mut report = EvalReport {
        episodes,
        mean_control_reward: 0.0,
        mean_penalty: 0.0,
        episode_control_rewards: Vec::with_capacity(episodes),
        trace: Vec::new(),
        env_trace: Vec::new(),
        bandwidth: BandwidthStats::default(),
    };
    let mut clock = 0u64;
    let mut penalties = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut obs = env.reset(&mut env_rng);
        channel.clear_in_flight();
        let mut pending: Vec<Message> = Vec::new();
        let mut control_total = 0.0;
        let mut priority_total = 0.0;
        loop {
            let mut actions = Vec::with_capacity(n);
            for i in 0..n {
                let mut input = obs[i].clone();
                input.extend(assemble_comm_obs(&pending, i, n)?);
                let mean_raw = params[i].actor.forward(&input)?;
                actions.push(params[i].head.deterministic_action(&mean_raw)?);
            }
            let controls: Vec<Vec2> = actions.iter().map(|a| [a.control[0], a.control[1]]).collect();
            let step = env.state().step;
            let before = env.state().clone();
            let outcome = env.step(&controls, &mut noise_rng)?;
            let priorities: Vec<f64> = match net_config.mode {
                CommMode::Priority => actions
                    .iter()
                    .map(|a| a.priority_value().expect("priority head"))
                    .collect(),
                CommMode::RoundRobin => Vec::new(),
            };
            let allocation = channel.allocate_slots(&priorities, net_config)?;
            let payloads: Vec<_> = allocation
                .selected
                .iter()
                .map(|&i| env.state().broadcast_payload(i))
                .collect();
            let dropped = channel.transmit(&allocation.selected, &payloads, clock + 1, net_config)?;
            bandwidth.record(&allocation, dropped.len());
            control_total += outcome.reward;
            priority_total += priorities.iter().sum::<f64>() / n as f64;
            if record_env {
                for (i, &action) in controls.iter().enumerate() {
                    report.env_trace.push(TraceRow {
                        episode: ep,
                        step,
                        agent: i,
                        position: before.positions[i],
                        velocity: before.velocities[i],
                        action,
                        reward: outcome.reward,
                    });
                }
            }
            report.trace.push(PriorityTraceRow {
                episode: ep,
                step,
                priorities,
                selected: allocation.selected,
                kind: allocation.kind,
                control_reward: outcome.reward,
            });
            clock += 1;
            pending = channel.deliver(clock);
            obs = outcome.observations;
            if outcome.done {
                break;
            }
        }
        report.episode_control_rewards.push(control_total);
        penalties.push(xi * priority_total);
    }
    report.mean_control_reward = mean(report.episode_control_rewards.iter().copied()).unwrap_or(0.0);
    report.mean_penalty = mean(penalties).unwrap_or(0.0);
    report.bandwidth = bandwidth;
    Ok(report)
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
    pub initial_eval: Option<EvalReport>,
    pub final_eval: Option<EvalReport>,
    pub episodes: Vec<EpisodeStats>,
    pub comm_log: Option<Vec<CommRecord>>,
    pub bandwidth: BandwidthStats,
}

/// Train until `total_steps` environment steps have been collected.
/// `on_rollout` sees every metrics row as soon as it is produced.
pub fn train(
    env_config: &EnvConfig,
    net_config: &NetworkConfig,
    config: &TrainConfig,
    seed: u64,
    mut on_rollout: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(env_config.clone(), net_config.clone(), config.clone(), seed)?;
    let eval_seed = eval_seed(seed);
    let evaluating = config.eval_episodes > 0;
    let initial_eval = if evaluating {
        Some(trainer.evaluate(config.eval_episodes, eval_seed, false)?)
    } else {
        None
    };
    let mut metrics = Vec::new();
    let mut episodes = Vec::new();
    let mut rollout = 0usize;
    let mut final_eval = None;
    while trainer.env_steps() < config.total_steps {
        let remaining = config.total_steps - trainer.env_steps();
        let steps = (config.rollout_len as u64).min(remaining) as usize;
        let ctx = |e: Error| e.context(format!("rollout {rollout}"));
        trainer.collect_rollout(steps).map_err(ctx)?;
        trainer.compute_advantages().map_err(ctx)?;
        let stats = trainer.update().map_err(ctx)?;
        let last = trainer.env_steps() >= config.total_steps;
        let periodic = config.eval_interval > 0 && (rollout + 1).is_multiple_of(config.eval_interval);
        let eval = if evaluating && (last || periodic) {
            let report = trainer.evaluate(config.eval_episodes, eval_seed, false).map_err(ctx)?;
            let value = report.mean_control_reward;
            if last {
                final_eval = Some(report);
            }
            Some(value)
        } else {
            None
        };
        let row = trainer.metrics_row(rollout, steps, &stats, eval);
        on_rollout(&row);
        metrics.push(row);
        episodes.extend(trainer.finished_episodes().iter().cloned());
        rollout += 1;
    }
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        metrics,
        initial_eval,
        final_eval,
        episodes,
        comm_log: trainer.comm_log.take(),
        bandwidth: trainer.bandwidth.clone(),
    })
}

/// Evaluate a saved checkpoint.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    env_config: &EnvConfig,
    net_config: &NetworkConfig,
    train_config: &TrainConfig,
    episodes: usize,
    seed: u64,
    record_env: bool,
) -> Result<EvalReport> {
    check_configs(env_config, net_config, train_config)?;
    check_checkpoint(ckpt, env_config, net_config, train_config)?;
    let params: Vec<&AgentParameters> = (0..env_config.n_agents)
        .map(|i| &ckpt.agents[if ckpt.agents.len() == 1 { 0 } else { i }])
        .collect();
    evaluate_policies(
        &params,
        env_config,
        net_config,
        train_config.xi,
        episodes,
        seed,
        record_env,
    )
}

pub const METRICS_VERSION: u32 = 1;

/// Header line of the metrics CSV for `n_agents` agents.
pub fn metrics_header(n_agents: usize, with_priority: bool) -> String {
    let mut cols = vec![
        "rollout",
        "env_steps",
        "episodes",
        "mean_episode_reward",
        "mean_control_reward",
        "mean_penalty",
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>();
    if with_priority {
        cols.extend((0..n_agents).map(|i| format!("mean_priority_{i}")));
    }
    cols.extend(["actor_loss", "critic_loss", "entropy", "eval_control_reward"].map(String::from));
    cols.join(",")
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let mut fields = vec![
            self.rollout.to_string(),
            self.env_steps.to_string(),
            self.episodes.to_string(),
            opt(self.mean_episode_reward),
            opt(self.mean_control_reward),
            opt(self.mean_penalty),
        ];
        fields.extend(self.mean_priority.iter().map(|p| p.to_string()));
        fields.extend([
            self.actor_loss.to_string(),
            self.critic_loss.to_string(),
            self.entropy.to_string(),
            opt(self.eval_control_reward),
        ]);
        fields.join(",")
    }
}

pub const PRIORITY_TRACE_HEADER: &str = "episode,step,mode_used,selected,highest_priority_agent,control_reward";

/// Per-step evaluation trace. Each agent's raw priority follows in
/// `priority_<i>` columns when priorities exist.
pub fn write_priority_trace<W: std::io::Write>(
    mut out: W,
    n_agents: usize,
    rows: &[PriorityTraceRow],
) -> std::io::Result<()> {
    let with_priority = rows.first().is_some_and(|r| !r.priorities.is_empty());
    writeln!(out, "# priocomm priority-trace v1")?;
    let mut header = PRIORITY_TRACE_HEADER.to_string();
    if with_priority {
        for i in 0..n_agents {
            header.push_str(&format!(",priority_{i}"));
        }
    }
    writeln!(out, "{header}")?;
    for r in rows {
        let selected = r.selected.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";");
        let top = crate::comm::top_priorities(&r.priorities, 1)
            .first()
            .map(|i| i.to_string())
            .unwrap_or_default();
        write!(
            out,
            "{},{},{},{},{},{}",
            r.episode,
            r.step,
            r.kind.as_str(),
            selected,
            top,
            r.control_reward
        )?;
        for p in &r.priorities {
            write!(out, ",{p}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(mode: CommMode) -> (EnvConfig, NetworkConfig, TrainConfig) {
        let env = EnvConfig {
            episode_length: 5,
            ..EnvConfig::coverage(3, 3)
        };
        let net = NetworkConfig {
            n_agents: 3,
            mode,
            ..NetworkConfig::default()
        };
        let train = TrainConfig {
            rollout_len: 8,
            minibatch_size: 4,
            epochs: 2,
            total_steps: 8,
            hidden_sizes: vec![8],
            eval_episodes: 1,
            log_comm: true,
            ..TrainConfig::default()
        };
        (env, net, train)
    }

    #[test]
    fn single_rollout_accounting() {
        let (env, net, train) = tiny(CommMode::Priority);
        let mut trainer = Trainer::new(env, net, train, 0).unwrap();
        trainer.collect_rollout(8).unwrap();
        assert!(trainer.buffers().iter().all(|b| b.len() == 8));
        assert_eq!(trainer.finished_episodes().len(), 1);
        trainer.compute_advantages().unwrap();
        let stats = trainer.update().unwrap();
        assert!(stats.first_minibatch_ratio_deviation < 1e-12);
    }

    #[test]
    fn train_runs_one_update_phase() {
        let (env, net, train) = tiny(CommMode::RoundRobin);
        let out = super::train(&env, &net, &train, 1, |_| {}).unwrap();
        assert_eq!(out.metrics.len(), 1);
        let log = out.comm_log.unwrap();
        let picks: Vec<usize> = log.iter().map(|r| r.selected[0]).collect();
        assert_eq!(picks, vec![0, 1, 2, 0, 1, 2, 0, 1]);
        assert!(out.final_eval.is_some() && out.initial_eval.is_some());
    }

    #[test]
    fn round_robin_has_no_penalty() {
        let (env, net, train) = tiny(CommMode::RoundRobin);
        let mut trainer = Trainer::new(env, net, train, 2).unwrap();
        trainer.collect_rollout(8).unwrap();
        for b in trainer.buffers() {
            assert!(b.penalties().iter().all(|&p| p == 0.0));
            assert_eq!(b.rewards(), b.control_rewards());
            assert!(b.actions().iter().all(|a| a.priority.is_none()));
        }
    }

    #[test]
    fn evaluation_with_zero_episodes_is_empty() {
        let (env, net, train) = tiny(CommMode::Priority);
        let trainer = Trainer::new(env, net, train, 0).unwrap();
        let r = trainer.evaluate(0, 5, false).unwrap();
        assert_eq!(r.episodes, 0);
        assert!(r.trace.is_empty() && r.episode_control_rewards.is_empty());
    }

    #[test]
    fn mismatched_agent_counts_are_rejected() {
        let (env, mut net, train) = tiny(CommMode::Priority);
        net.n_agents = 4;
        assert!(matches!(Trainer::new(env, net, train, 0), Err(Error::Config(_))));
    }

    #[test]
    fn shared_parameters_train() {
        let (env, net, mut train) = tiny(CommMode::Priority);
        train.share_parameters = true;
        let out = super::train(&env, &net, &train, 3, |_| {}).unwrap();
        assert_eq!(out.checkpoint.agents.len(), 1);
    }

    #[test]
    fn metrics_row_matches_header() {
        let row = MetricsRow {
            rollout: 0,
            env_steps: 8,
            episodes: 1,
            mean_episode_reward: Some(-1.0),
            mean_control_reward: Some(-0.9),
            mean_penalty: Some(0.1),
            mean_priority: vec![0.5, 0.4, 0.3],
            actor_loss: 0.0,
            critic_loss: 1.0,
            entropy: 2.0,
            eval_control_reward: None,
        };
        let header = metrics_header(3, true);
        assert_eq!(header.split(',').count(), row.to_csv().split(',').count());
    }
}
