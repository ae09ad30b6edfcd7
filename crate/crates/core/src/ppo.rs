//! PPO building blocks: penalised reward, GAE, clipped actor objective and
//! clipped critic objective, each with analytic gradients.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::nn::{AgentAction, GaussianPolicyHead, Mlp, MlpGradients};

/// Control reward minus the communication penalty `xi * a_p`. Agents without
/// a priority (round-robin baseline) pay nothing.
pub fn combined_reward(control_reward: f64, priority: Option<f64>, xi: f64) -> f64 {
    match priority {
        Some(p) => control_reward - xi * p,
        None => control_reward,
    }
}

/// Generalized advantage estimation by the backward recurrence
/// `A_t = delta_t + gamma * lambda * A_{t+1}`, with
/// `delta_t = r_t + gamma * V_{t+1} - V_t`. A `done` step bootstraps zero
/// and stops the recurrence. `bootstrap` is the value of the state after the
/// last stored step. Returns `(advantages, value_targets)` where
/// `target = advantage + value`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && dones.len() == n, "buffer columns differ in length");
    let mut advantages = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        advantages[t] = next_adv;
        next_value = values[t];
    }
    let targets = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    (advantages, targets)
}

/// Zero-mean, unit-variance copy of `values` (population std, `1e-8` floor).
pub fn normalize(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    values.iter().map(|v| (v - mean) / (std + 1e-8)).collect()
}

/// Per-sample clipped surrogate `min(r A, clip(r, 1-eps, 1+eps) A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    (ratio * advantage).min(clipped * advantage)
}

/// Per-sample critic objective: the smaller of the unclipped and the
/// clipped squared error.
pub fn clipped_value_error(value: f64, old_value: f64, target: f64, clip_eps: f64) -> f64 {
    let clipped = old_value + (value - old_value).clamp(-clip_eps, clip_eps);
    (value - target).powi(2).min((clipped - target).powi(2))
}

pub struct ActorBatch<'a> {
    pub obs: ArrayView2<'a, f64>,
    pub actions: &'a [AgentAction],
    pub old_log_probs: &'a [f64],
    pub advantages: &'a [f64],
}

#[derive(Debug, Clone)]
pub struct ActorLoss {
    pub loss: f64,
    pub grads: MlpGradients,
    pub log_std_grad: Vec<f64>,
    pub entropy: f64,
    pub ratios: Vec<f64>,
    /// Fraction of samples whose ratio lies outside `[1 - eps, 1 + eps]`.
    pub clip_fraction: f64,
}

/// Negative mean clipped surrogate minus `entropy_coef * entropy`, with
/// gradients for the actor network and the head's `log_std`.
pub fn actor_loss(
    actor: &Mlp,
    head: &GaussianPolicyHead,
    batch: &ActorBatch<'_>,
    clip_eps: f64,
    entropy_coef: f64,
) -> Result<ActorLoss> {
    let b = batch.obs.nrows();
    if b == 0 || batch.actions.len() != b || batch.old_log_probs.len() != b || batch.advantages.len() != b {
        return Err(Error::Config(format!(
            "actor batch columns disagree: {} obs, {} actions, {} log-probs, {} advantages",
            b,
            batch.actions.len(),
            batch.old_log_probs.len(),
            batch.advantages.len()
        )));
    }
    let cache = actor.forward_batch(batch.obs)?;
    let means = cache.output();
    let scale = 1.0 / b as f64;
    let mut out_grad = Array2::<f64>::zeros((b, head.dim()));
    let mut log_std_grad = vec![0.0; head.dim()];
    let mut ratios = Vec::with_capacity(b);
    let mut objective = 0.0;
    let mut clipped = 0usize;
    for j in 0..b {
        let mean = means.row(j).to_vec();
        let mean = mean.as_slice();
        let action = &batch.actions[j];
        let (log_prob, _) = head.log_prob_and_entropy(mean, action)?;
        let ratio = (log_prob - batch.old_log_probs[j]).exp();
        if !ratio.is_finite() {
            return Err(Error::Numeric(format!("policy ratio is not finite at sample {j}")));
        }
        let adv = batch.advantages[j];
        let unclipped = ratio * adv;
        let bounded = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * adv;
        objective += unclipped.min(bounded);
        if (ratio - 1.0).abs() > clip_eps {
            clipped += 1;
        }
        // d objective / d log_prob; the clipped branch is constant in theta
        let coef = if unclipped <= bounded { unclipped } else { 0.0 };
        if coef != 0.0 {
            let g = head.log_prob_grad(mean, action)?;
            for (o, d) in out_grad.row_mut(j).iter_mut().zip(&g.mean_raw) {
                *o = -coef * scale * d;
            }
            for (acc, d) in log_std_grad.iter_mut().zip(&g.log_std) {
                *acc -= coef * scale * d;
            }
        }
        ratios.push(ratio);
    }
    let entropy = head.entropy();
    for g in &mut log_std_grad {
        *g -= entropy_coef;
    }
    let grads = actor.backward(&cache, out_grad.view())?;
    Ok(ActorLoss {
        loss: -objective * scale - entropy_coef * entropy,
        grads,
        log_std_grad,
        entropy,
        ratios,
        clip_fraction: clipped as f64 * scale,
    })
}

#[derive(Debug, Clone)]
pub struct CriticLoss {
    pub loss: f64,
    pub grads: MlpGradients,
}

/// Mean over the batch of [`clipped_value_error`], with gradients for the
/// critic network.
pub fn critic_loss(
    critic: &Mlp,
    obs: ArrayView2<'_, f64>,
    old_values: &[f64],
    targets: &[f64],
    clip_eps: f64,
) -> Result<CriticLoss> {
    let b = obs.nrows();
    if b == 0 || old_values.len() != b || targets.len() != b {
        return Err(Error::Config(format!(
            "critic batch columns disagree: {b} obs, {} old values, {} targets",
            old_values.len(),
            targets.len()
        )));
    }
    if critic.output_dim() != 1 {
        return Err(Error::Config("critic must have a single output".into()));
    }
    let cache = critic.forward_batch(obs)?;
    let values = cache.output();
    let scale = 1.0 / b as f64;
    let mut out_grad = Array2::<f64>::zeros((b, 1));
    let mut loss = 0.0;
    for j in 0..b {
        let v = values[[j, 0]];
        let (old, target) = (old_values[j], targets[j]);
        let diff = v - old;
        let v_clipped = old + diff.clamp(-clip_eps, clip_eps);
        let unclipped = (v - target).powi(2);
        let bounded = (v_clipped - target).powi(2);
        loss += unclipped.min(bounded);
        // when the clipped branch wins its value is pinned at old +- eps
        let slope = if unclipped <= bounded { 2.0 * (v - target) } else { 0.0 };
        out_grad[[j, 0]] = slope * scale;
    }
    if !loss.is_finite() {
        return Err(Error::Numeric("critic loss is not finite".into()));
    }
    let grads = critic.backward(&cache, out_grad.view())?;
    Ok(CriticLoss {
        loss: loss * scale,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combined_reward_arithmetic() {
        assert!((combined_reward(-1.0, Some(0.5), 0.1) + 1.05).abs() < 1e-15);
        assert_eq!(combined_reward(-1.0, None, 0.1), -1.0);
        assert!((combined_reward(-1.0, Some(1e-12), 0.1) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn combined_reward_decreases_in_priority() {
        let grid: Vec<f64> = (1..1000).map(|k| k as f64 / 1000.0).collect();
        for w in grid.windows(2) {
            assert!(combined_reward(-0.3, Some(w[1]), 0.05) < combined_reward(-0.3, Some(w[0]), 0.05));
        }
    }

    #[test]
    fn gae_lambda_zero_is_td_error() {
        let r = [1.0, -0.5, 0.25];
        let v = [0.2, 0.4, -0.1];
        let (a, t) = compute_gae(&r, &v, &[false; 3], 0.7, 0.9, 0.0);
        let expected = [1.0 + 0.9 * 0.4 - 0.2, -0.5 + 0.9 * -0.1 - 0.4, 0.25 + 0.9 * 0.7 + 0.1];
        for k in 0..3 {
            assert!((a[k] - expected[k]).abs() < 1e-15);
            assert!((t[k] - (a[k] + v[k])).abs() < 1e-15);
        }
    }

    #[test]
    fn gae_of_zeros_is_zero() {
        let (a, t) = compute_gae(
            &[0.0; 6],
            &[0.0; 6],
            &[false, false, true, false, false, false],
            0.0,
            0.99,
            0.95,
        );
        assert!(a.iter().chain(&t).all(|&x| x == 0.0));
    }

    #[test]
    fn terminal_step_does_not_bootstrap() {
        let (a, _) = compute_gae(&[1.0, 2.0], &[0.5, 3.0], &[true, false], 10.0, 0.9, 0.95);
        assert!((a[0] - 0.5).abs() < 1e-15);
        assert!((a[1] - (2.0 + 9.0 - 3.0)).abs() < 1e-15);
    }

    #[test]
    fn surrogate_clip_cases() {
        assert!((clipped_surrogate(1.5, 1.0, 0.2) - 1.2).abs() < 1e-15);
        assert!((clipped_surrogate(0.5, -1.0, 0.2) + 0.8).abs() < 1e-15);
        assert_eq!(clipped_surrogate(1.0, 0.7, 0.2), 0.7);
    }

    #[test]
    fn value_error_cases() {
        // no movement: both branches equal
        assert!((clipped_value_error(0.3, 0.3, 1.0, 0.2) - 0.49).abs() < 1e-15);
        // exact target: unclipped branch is zero
        assert_eq!(clipped_value_error(1.0, 0.0, 1.0, 0.2), 0.0);
        // moved away from target beyond eps: clipped branch is smaller
        assert!((clipped_value_error(-1.0, 0.0, 1.0, 0.2) - 1.44).abs() < 1e-15);
    }

    #[test]
    fn normalize_has_zero_mean_unit_std() {
        let x = normalize(&[1.0, 2.0, 3.0, 4.0]);
        let mean: f64 = x.iter().sum::<f64>() / 4.0;
        let var: f64 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-15);
        assert!((var - 1.0).abs() < 1e-7);
    }
}
