//! Per-agent trajectory storage for one rollout.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::nn::AgentAction;
use crate::ppo::compute_gae;

/// Everything recorded for one agent at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    /// Policy input: local observation followed by the communicated block.
    pub input: Vec<f64>,
    pub action: AgentAction,
    pub log_prob: f64,
    pub value: f64,
    pub control_reward: f64,
    /// Communication penalty `xi * a_p` (zero without a priority).
    pub penalty: f64,
    /// `control_reward - penalty`.
    pub reward: f64,
    /// Episode ended after this step.
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct RolloutBuffer {
    input_dim: usize,
    inputs: Vec<f64>,
    actions: Vec<AgentAction>,
    log_probs: Vec<f64>,
    values: Vec<f64>,
    control_rewards: Vec<f64>,
    penalties: Vec<f64>,
    rewards: Vec<f64>,
    dones: Vec<bool>,
    advantages: Vec<f64>,
    targets: Vec<f64>,
}

impl RolloutBuffer {
    pub fn new(input_dim: usize, capacity: usize) -> Self {
        Self {
            input_dim,
            inputs: Vec::with_capacity(input_dim * capacity),
            actions: Vec::with_capacity(capacity),
            log_probs: Vec::with_capacity(capacity),
            values: Vec::with_capacity(capacity),
            control_rewards: Vec::with_capacity(capacity),
            penalties: Vec::with_capacity(capacity),
            rewards: Vec::with_capacity(capacity),
            dones: Vec::with_capacity(capacity),
            advantages: Vec::new(),
            targets: Vec::new(),
        }
    }

    pub fn clear(&mut self) {
        self.inputs.clear();
        self.actions.clear();
        self.log_probs.clear();
        self.values.clear();
        self.control_rewards.clear();
        self.penalties.clear();
        self.rewards.clear();
        self.dones.clear();
        self.advantages.clear();
        self.targets.clear();
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if t.input.len() != self.input_dim {
            return Err(Error::Config(format!(
                "transition input has length {}, buffer expects {}",
                t.input.len(),
                self.input_dim
            )));
        }
        self.inputs.extend_from_slice(&t.input);
        self.actions.push(t.action);
        self.log_probs.push(t.log_prob);
        self.values.push(t.value);
        self.control_rewards.push(t.control_reward);
        self.penalties.push(t.penalty);
        self.rewards.push(t.reward);
        self.dones.push(t.done);
        self.advantages.clear();
        self.targets.clear();
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn inputs(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.len(), self.input_dim), &self.inputs).expect("consistent layout")
    }

    pub fn input(&self, t: usize) -> &[f64] {
        &self.inputs[t * self.input_dim..(t + 1) * self.input_dim]
    }

    pub fn actions(&self) -> &[AgentAction] {
        &self.actions
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn control_rewards(&self) -> &[f64] {
        &self.control_rewards
    }

    pub fn penalties(&self) -> &[f64] {
        &self.penalties
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn dones(&self) -> &[bool] {
        &self.dones
    }

    /// Empty until [`RolloutBuffer::compute_advantages`] has run.
    pub fn advantages(&self) -> &[f64] {
        &self.advantages
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn has_advantages(&self) -> bool {
        !self.is_empty() && self.advantages.len() == self.len()
    }

    /// Fill advantages and value targets; `bootstrap` is the critic's value
    /// of the state following the last stored step (ignored if that step
    /// ended an episode).
    pub fn compute_advantages(&mut self, bootstrap: f64, gamma: f64, lambda: f64) {
        let (adv, targets) = compute_gae(&self.rewards, &self.values, &self.dones, bootstrap, gamma, lambda);
        self.advantages = adv;
        self.targets = targets;
    }

    /// Copy the rows in `indices` into a dense input matrix.
    pub fn gather_inputs(&self, indices: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((indices.len(), self.input_dim));
        for (mut row, &t) in out.rows_mut().into_iter().zip(indices) {
            row.as_slice_mut()
                .expect("standard layout")
                .copy_from_slice(self.input(t));
        }
        out
    }
}
