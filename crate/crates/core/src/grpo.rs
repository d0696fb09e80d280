//! Group-relative advantages, the GRPO objective and its KL regularizer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GrpoError {
    #[error("group of size {0} is too small; at least 2 rollouts are needed")]
    GroupTooSmall(usize),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite reward at index {0}")]
    NonFinite(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// Total rewards of the K rollouts sharing one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRewards {
    pub values: Vec<f64>,
}

impl GroupRewards {
    pub fn new(values: Vec<f64>) -> Result<Self, GrpoError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(GrpoError::NonFinite(i));
        }
        Ok(Self { values })
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAdvantages {
    pub values: Vec<f64>,
    pub normalized: bool,
    pub epsilon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub normalize_by_std: bool,
    pub epsilon: f64,
    pub kl_beta: f64,
    pub group_size: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            normalize_by_std: true,
            epsilon: 1e-8,
            kl_beta: 0.0,
            group_size: 8,
            batch_size: 16,
            learning_rate: 0.1,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.group_size < 2 {
            return Err(GrpoError::InvalidConfig(format!("group_size must be >= 2, got {}", self.group_size)));
        }
        if self.batch_size == 0 {
            return Err(GrpoError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(GrpoError::InvalidConfig(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.kl_beta.is_nan() || self.kl_beta < 0.0 {
            return Err(GrpoError::InvalidConfig(format!("kl_beta must be >= 0, got {}", self.kl_beta)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(GrpoError::InvalidConfig(format!(
                "learning_rate must be finite and > 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// `A_i = r_i - mean`, divided by `(population std + epsilon)` when
/// normalization is on.
pub fn group_advantages(rewards: &GroupRewards, cfg: &GrpoConfig) -> Result<GroupAdvantages, GrpoError> {
    let k = rewards.values.len();
    if k < 2 {
        return Err(GrpoError::GroupTooSmall(k));
    }
    let mean = rewards.mean();
    let mut values: Vec<f64> = rewards.values.iter().map(|r| r - mean).collect();
    // One correction pass absorbs the rounding left in the mean.
    let drift = values.iter().sum::<f64>() / k as f64;
    values.iter_mut().for_each(|a| *a -= drift);
    if cfg.normalize_by_std {
        let var = values.iter().map(|a| a * a).sum::<f64>() / k as f64;
        let denom = var.sqrt() + cfg.epsilon;
        values.iter_mut().for_each(|a| *a /= denom);
    }
    Ok(GroupAdvantages {
        values,
        normalized: cfg.normalize_by_std,
        epsilon: cfg.epsilon,
    })
}

/// `(1/K) * sum(A_i * logprob_i)`, to be maximized.
pub fn grpo_objective(advantages: &[f64], sample_logprobs: &[f64]) -> Result<f64, GrpoError> {
    if advantages.len() != sample_logprobs.len() {
        return Err(GrpoError::LengthMismatch(advantages.len(), sample_logprobs.len()));
    }
    if advantages.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = advantages.iter().zip(sample_logprobs).map(|(a, l)| a * l).sum();
    Ok(sum / advantages.len() as f64)
}

/// Per-token non-negative KL estimator
/// `exp(ref - theta) - (ref - theta) - 1`, averaged over tokens.
pub fn kl_estimate(logp_theta: &[f64], logp_ref: &[f64]) -> Result<f64, GrpoError> {
    if logp_theta.len() != logp_ref.len() {
        return Err(GrpoError::LengthMismatch(logp_theta.len(), logp_ref.len()));
    }
    if logp_theta.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = logp_theta.iter().zip(logp_ref).map(|(&t, &r)| k3(r - t)).sum();
    Ok(sum / logp_theta.len() as f64)
}

/// `exp(d) - d - 1` for a log-ratio `d = log ref - log theta`.
pub fn k3(d: f64) -> f64 {
    d.exp_m1() - d
}

pub fn regularized_objective(objective: f64, kl: f64, beta: f64) -> f64 {
    objective - beta * kl
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn cfg(normalize: bool) -> GrpoConfig {
        GrpoConfig {
            normalize_by_std: normalize,
            ..GrpoConfig::default()
        }
    }

    fn adv(r: &[f64], normalize: bool) -> Vec<f64> {
        group_advantages(&GroupRewards::new(r.to_vec()).unwrap(), &cfg(normalize))
            .unwrap()
            .values
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(adv(&[1., 0., 1., 0.], false), vec![0.5, -0.5, 0.5, -0.5]);
        assert_eq!(adv(&[2., 2., 2.], false), vec![0.0; 3]);
        assert_eq!(adv(&[2., 2., 2.], true), vec![0.0; 3]);
        // std of {3, 1} is 1, so A = ±1 / (1 + 1e-8)
        let a = adv(&[3., 1.], true);
        assert_abs_diff_eq!(a[0], 1.0 / (1.0 + 1e-8), epsilon = 1e-15);
        assert_abs_diff_eq!(a[1], -1.0 / (1.0 + 1e-8), epsilon = 1e-15);
        let err = group_advantages(&GroupRewards::new(vec![1.0]).unwrap(), &cfg(true));
        assert_eq!(err, Err(GrpoError::GroupTooSmall(1)));
        assert_eq!(GroupRewards::new(vec![1.0, f64::NAN]), Err(GrpoError::NonFinite(1)));
    }

    #[test]
    fn objective_examples() {
        assert_eq!(grpo_objective(&[0., 0.], &[-1., -3.]).unwrap(), 0.0);
        assert_eq!(grpo_objective(&[1., -1.], &[-1., -2.]).unwrap(), 0.5);
        assert_eq!(grpo_objective(&[1.], &[-1., -2.]), Err(GrpoError::LengthMismatch(1, 2)));
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_estimate(&[-0.3, -1.2], &[-0.3, -1.2]).unwrap(), 0.0);
        let v = kl_estimate(&[0.0], &[std::f64::consts::LN_2]).unwrap();
        assert_abs_diff_eq!(v, 2.0 - std::f64::consts::LN_2 - 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.3069, epsilon = 1e-4);
        assert!(kl_estimate(&[0.0], &[]).is_err());
    }

    #[test]
    fn regularized_examples() {
        assert_eq!(regularized_objective(0.5, 0.3, 0.0), 0.5);
        assert_abs_diff_eq!(regularized_objective(0.5, 0.3, 1.0), 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(regularized_objective(0.5, 0.3, 10.0), -2.5, epsilon = 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(GrpoConfig::default().validate().is_ok());
        assert!(GrpoConfig { group_size: 1, ..GrpoConfig::default() }.validate().is_err());
        assert!(GrpoConfig { epsilon: 0.0, ..GrpoConfig::default() }.validate().is_err());
        assert!(GrpoConfig { kl_beta: -1.0, ..GrpoConfig::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn zero_sum_shift_and_scale(
            r in proptest::collection::vec(-10.0..10.0f64, 2..16),
            shift in -100.0..100.0f64,
            scale in 0.1..10.0f64,
            normalize in any::<bool>(),
        ) {
            let a = adv(&r, normalize);
            prop_assert!(a.iter().sum::<f64>().abs() <= 1e-9);
            let shifted: Vec<f64> = r.iter().map(|x| x + shift).collect();
            let b = adv(&shifted, normalize);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-6);
            }
            let scaled: Vec<f64> = r.iter().map(|x| x * scale).collect();
            let c = adv(&scaled, normalize);
            let spread = r.iter().cloned().fold(f64::MIN, f64::max) - r.iter().cloned().fold(f64::MAX, f64::min);
            if spread > 1e-3 {
                for (x, y) in a.iter().zip(&c) {
                    let expect = if normalize { *x } else { x * scale };
                    prop_assert!((y - expect).abs() < 1e-6 * (1.0 + expect.abs()));
                }
            }
        }

        #[test]
        fn kl_nonnegative(d in proptest::collection::vec(-5.0..5.0f64, 1..20)) {
            let zeros = vec![0.0; d.len()];
            prop_assert!(kl_estimate(&zeros, &d).unwrap() >= 0.0);
        }
    }
}
