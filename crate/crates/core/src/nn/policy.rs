//! Diagonal Gaussian policy head producing a control vector and a
//! communication priority.
//!
//! The actor network outputs `m` control means followed (when the head
//! carries a priority) by one pre-squash priority mean. Control dimensions
//! are plain Gaussians. The priority is a Gaussian sample `z` passed through
//! the logistic sigmoid, so its log-density is
//! `log N(z; mu, sigma) - log sigmoid'(z)`.
//!
//! The standard deviations are state independent: one learnable `log_std`
//! per output dimension, kept inside [`LOG_STD_MIN`, `LOG_STD_MAX`].

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Pre-squash priority samples are clamped to this magnitude so the squashed
/// value stays strictly inside (0, 1) in double precision.
pub const PRIORITY_LOGIT_BOUND: f64 = 30.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `log sigmoid'(x) = log sigmoid(x) + log(1 - sigmoid(x))`.
pub fn log_sigmoid_derivative(x: f64) -> f64 {
    -softplus(-x) - softplus(x)
}

/// A communication priority together with the pre-squash sample it came
/// from. Keeping the logit makes density evaluation exact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Priority {
    value: f64,
    logit: f64,
}

impl Priority {
    pub fn from_logit(logit: f64) -> Result<Self> {
        if !logit.is_finite() {
            return Err(Error::Numeric(format!("priority logit {logit} is not finite")));
        }
        let logit = logit.clamp(-PRIORITY_LOGIT_BOUND, PRIORITY_LOGIT_BOUND);
        Ok(Self {
            value: sigmoid(logit),
            logit,
        })
    }

    /// Recover the pre-squash value from a priority in (0, 1).
    pub fn from_value(value: f64) -> Result<Self> {
        if !(value > 0.0 && value < 1.0) {
            return Err(Error::Input(format!(
                "priority {value} must lie strictly inside (0, 1)"
            )));
        }
        Ok(Self {
            value,
            logit: (value / (1.0 - value)).ln(),
        })
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn logit(&self) -> f64 {
        self.logit
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentAction {
    pub control: Vec<f64>,
    pub priority: Option<Priority>,
}

impl AgentAction {
    pub fn priority_value(&self) -> Option<f64> {
        self.priority.map(|p| p.value)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicyHead {
    control_dim: usize,
    with_priority: bool,
    log_std: Vec<f64>,
}

/// Derivatives of a log-density with respect to the head's inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbGrad {
    pub mean_raw: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl GaussianPolicyHead {
    pub fn new(control_dim: usize, with_priority: bool, initial_log_std: f64) -> Result<Self> {
        if control_dim == 0 {
            return Err(Error::Config("control dimension must be positive".into()));
        }
        if !initial_log_std.is_finite() {
            return Err(Error::Config("initial log_std must be finite".into()));
        }
        let dim = control_dim + usize::from(with_priority);
        Ok(Self {
            control_dim,
            with_priority,
            log_std: vec![initial_log_std.clamp(LOG_STD_MIN, LOG_STD_MAX); dim],
        })
    }

    pub fn from_log_std(control_dim: usize, with_priority: bool, log_std: Vec<f64>) -> Result<Self> {
        let mut head = Self::new(control_dim, with_priority, 0.0)?;
        if log_std.len() != head.dim() {
            return Err(Error::Config(format!(
                "log_std has length {}, head expects {}",
                log_std.len(),
                head.dim()
            )));
        }
        if log_std.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("log_std contains non-finite values".into()));
        }
        head.log_std = log_std;
        head.clamp_log_std();
        Ok(head)
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn with_priority(&self) -> bool {
        self.with_priority
    }

    /// Number of raw means the actor network must emit.
    pub fn dim(&self) -> usize {
        self.control_dim + usize::from(self.with_priority)
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn log_std_mut(&mut self) -> &mut [f64] {
        &mut self.log_std
    }

    pub fn clamp_log_std(&mut self) {
        for v in &mut self.log_std {
            *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }

    fn check_mean(&self, mean_raw: &[f64]) -> Result<()> {
        if mean_raw.len() != self.dim() {
            return Err(Error::Config(format!(
                "policy head expects {} raw means, got {}",
                self.dim(),
                mean_raw.len()
            )));
        }
        if mean_raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("policy mean is not finite".into()));
        }
        Ok(())
    }

    /// Draw an action and return it with its joint log-density.
    pub fn sample_action<R: Rng + ?Sized>(&self, mean_raw: &[f64], rng: &mut R) -> Result<(AgentAction, f64)> {
        self.check_mean(mean_raw)?;
        let mut raw = Vec::with_capacity(self.dim());
        for (mu, ls) in mean_raw.iter().zip(&self.log_std) {
            let eps: f64 = rng.sample(StandardNormal);
            raw.push(mu + ls.exp() * eps);
        }
        if let Some(pos) = raw.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("sampled action dimension {pos} is not finite")));
        }
        let priority = if self.with_priority {
            Some(Priority::from_logit(raw[self.control_dim])?)
        } else {
            None
        };
        raw.truncate(self.control_dim);
        let action = AgentAction { control: raw, priority };
        let (log_prob, _) = self.log_prob_and_entropy(mean_raw, &action)?;
        Ok((action, log_prob))
    }

    /// The distribution's mode in control space and the squashed priority
    /// mean; used for evaluation.
    pub fn deterministic_action(&self, mean_raw: &[f64]) -> Result<AgentAction> {
        self.check_mean(mean_raw)?;
        let priority = if self.with_priority {
            Some(Priority::from_logit(mean_raw[self.control_dim])?)
        } else {
            None
        };
        Ok(AgentAction {
            control: mean_raw[..self.control_dim].to_vec(),
            priority,
        })
    }

    fn pre_squash(&self, action: &AgentAction) -> Result<Vec<f64>> {
        if action.control.len() != self.control_dim {
            return Err(Error::Config(format!(
                "action has {} control dims, head expects {}",
                action.control.len(),
                self.control_dim
            )));
        }
        let mut raw = action.control.clone();
        match (self.with_priority, action.priority) {
            (true, Some(p)) => {
                if !(p.value > 0.0 && p.value < 1.0) {
                    return Err(Error::Input(format!(
                        "priority {} must lie strictly inside (0, 1)",
                        p.value
                    )));
                }
                raw.push(p.logit);
            }
            (true, None) => return Err(Error::Config("action is missing its priority".into())),
            (false, _) => {}
        }
        Ok(raw)
    }

    /// Joint log-density of `action` and the entropy of the pre-squash
    /// Gaussian.
    pub fn log_prob_and_entropy(&self, mean_raw: &[f64], action: &AgentAction) -> Result<(f64, f64)> {
        self.check_mean(mean_raw)?;
        let raw = self.pre_squash(action)?;
        let mut log_prob = 0.0;
        for ((x, mu), ls) in raw.iter().zip(mean_raw).zip(&self.log_std) {
            let z = (x - mu) / ls.exp();
            log_prob += -0.5 * z * z - ls - HALF_LN_2PI;
        }
        if self.with_priority {
            log_prob -= log_sigmoid_derivative(raw[self.control_dim]);
        }
        if !log_prob.is_finite() {
            return Err(Error::Numeric("log-probability is not finite".into()));
        }
        Ok((log_prob, self.entropy()))
    }

    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|ls| 0.5 + HALF_LN_2PI + ls).sum()
    }

    /// Gradient of `log_prob` with respect to the raw means and `log_std`.
    /// The sigmoid correction depends on the action only, so it does not
    /// contribute.
    pub fn log_prob_grad(&self, mean_raw: &[f64], action: &AgentAction) -> Result<LogProbGrad> {
        self.check_mean(mean_raw)?;
        let raw = self.pre_squash(action)?;
        let mut d_mean = Vec::with_capacity(raw.len());
        let mut d_log_std = Vec::with_capacity(raw.len());
        for ((x, mu), ls) in raw.iter().zip(mean_raw).zip(&self.log_std) {
            let sigma = ls.exp();
            let z = (x - mu) / sigma;
            d_mean.push(z / sigma);
            d_log_std.push(z * z - 1.0);
        }
        Ok(LogProbGrad {
            mean_raw: d_mean,
            log_std: d_log_std,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degenerate_variance_returns_means() {
        let head = GaussianPolicyHead::new(2, true, -20.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, _) = head.sample_action(&[0.3, -0.7, 0.0], &mut rng).unwrap();
        assert!((a.control[0] - 0.3).abs() < 1e-7);
        assert!((a.control[1] + 0.7).abs() < 1e-7);
        assert!((a.priority_value().unwrap() - 0.5).abs() < 1e-7);
    }

    #[test]
    fn standard_gaussian_density_at_mean() {
        let head = GaussianPolicyHead::new(1, false, 0.0).unwrap();
        let action = AgentAction {
            control: vec![1.25],
            priority: None,
        };
        let (lp, ent) = head.log_prob_and_entropy(&[1.25], &action).unwrap();
        assert!((lp + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
        assert!((ent - (0.5 + HALF_LN_2PI)).abs() < 1e-15);
    }

    #[test]
    fn log_prob_round_trips_exactly() {
        let head = GaussianPolicyHead::new(2, true, 0.5f64.ln()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let mean = [
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-3.0..3.0),
            ];
            let (a, lp) = head.sample_action(&mean, &mut rng).unwrap();
            let (lp2, _) = head.log_prob_and_entropy(&mean, &a).unwrap();
            assert_eq!(lp, lp2);
        }
    }

    #[test]
    fn boundary_priority_is_rejected() {
        assert!(matches!(Priority::from_value(0.0), Err(Error::Input(_))));
        assert!(matches!(Priority::from_value(1.0), Err(Error::Input(_))));
        let head = GaussianPolicyHead::new(1, true, 0.0).unwrap();
        let action = AgentAction {
            control: vec![0.0],
            priority: Some(Priority {
                value: 1.0,
                logit: 40.0,
            }),
        };
        assert!(matches!(
            head.log_prob_and_entropy(&[0.0, 0.0], &action),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn squashed_density_integrates_to_one() {
        // trapezoid rule over (0, 1) on the priority dimension alone
        let head = GaussianPolicyHead::new(1, true, 0.3).unwrap();
        let mean = [0.0, 0.7];
        let n = 200_000;
        let mut total = 0.0;
        let mut prev: Option<(f64, f64)> = None;
        for k in 1..n {
            let u = k as f64 / n as f64;
            let action = AgentAction {
                control: vec![0.0],
                priority: Some(Priority::from_value(u).unwrap()),
            };
            let (lp, _) = head.log_prob_and_entropy(&mean, &action).unwrap();
            // remove the control factor, evaluated at its mean
            let density = (lp + 0.3 + HALF_LN_2PI).exp();
            if let Some((pu, pd)) = prev {
                total += 0.5 * (density + pd) * (u - pu);
            }
            prev = Some((u, density));
        }
        assert!((total - 1.0).abs() < 1e-4, "integral = {total}");
    }

    #[test]
    fn log_prob_gradient_matches_finite_differences() {
        let mut head = GaussianPolicyHead::new(2, true, -0.4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mean = vec![0.2, -0.1, 0.4];
        let (a, _) = head.sample_action(&mean, &mut rng).unwrap();
        let g = head.log_prob_grad(&mean, &a).unwrap();
        let h = 1e-6;
        for d in 0..3 {
            let mut plus = mean.clone();
            let mut minus = mean.clone();
            plus[d] += h;
            minus[d] -= h;
            let fd = (head.log_prob_and_entropy(&plus, &a).unwrap().0
                - head.log_prob_and_entropy(&minus, &a).unwrap().0)
                / (2.0 * h);
            assert!((fd - g.mean_raw[d]).abs() < 1e-6 * fd.abs().max(1.0));
        }
        for d in 0..3 {
            let orig = head.log_std[d];
            head.log_std[d] = orig + h;
            let lp_plus = head.log_prob_and_entropy(&mean, &a).unwrap().0;
            head.log_std[d] = orig - h;
            let lp_minus = head.log_prob_and_entropy(&mean, &a).unwrap().0;
            head.log_std[d] = orig;
            let fd = (lp_plus - lp_minus) / (2.0 * h);
            assert!((fd - g.log_std[d]).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn log_std_is_clamped() {
        let head = GaussianPolicyHead::from_log_std(1, true, vec![-50.0, 9.0]).unwrap();
        assert_eq!(head.log_std(), &[LOG_STD_MIN, LOG_STD_MAX]);
    }
}
