//! Adam with bias correction over a list of flat parameter tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::with_learning_rate(3e-4)
    }
}

/// First and second moment accumulators, one pair per tracked tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    /// Fresh state for tensors with the given lengths.
    pub fn new(config: AdamConfig, tensor_lens: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            first: tensor_lens.iter().map(|&n| vec![0.0; n]).collect(),
            second: tensor_lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second
    }

    /// Apply one update. Either every tensor is updated or, on error,
    /// nothing changes (parameters and moments are left untouched).
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], names: &[String]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        let name = |i: usize| names.get(i).cloned().unwrap_or_else(|| format!("tensor{i}"));
        for (i, ((p, g), m)) in params.iter().zip(grads).zip(&self.first).enumerate() {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::Config(format!(
                    "tensor {} has {} parameters and {} gradients, optimizer expects {}",
                    name(i),
                    p.len(),
                    g.len(),
                    m.len()
                )));
            }
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in {} at element {j}",
                    name(i)
                )));
            }
        }

        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step + 1;
        let bc1 = 1.0 - beta1.powi(t as i32);
        let bc2 = 1.0 - beta2.powi(t as i32);

        let mut new_first = self.first.clone();
        let mut new_second = self.second.clone();
        let mut new_params: Vec<Vec<f64>> = Vec::with_capacity(params.len());
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let m = &mut new_first[i];
            let v = &mut new_second[i];
            let mut out = p.to_vec();
            for j in 0..out.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                out[j] -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
            if let Some(j) = out.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "update would make {} element {j} non-finite",
                    name(i)
                )));
            }
            new_params.push(out);
        }
        for (p, new) in params.iter_mut().zip(new_params) {
            p.copy_from_slice(&new);
        }
        self.first = new_first;
        self.second = new_second;
        self.step = t;
        Ok(())
    }
}
