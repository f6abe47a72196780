use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tracking kernels over joint positions and velocities plus regularization
/// weights on action rate, joint acceleration and torque.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub w_q: f64,
    pub sigma_q: f64,
    pub w_qd: f64,
    pub sigma_qd: f64,
    pub w_action_rate: f64,
    pub w_joint_acc: f64,
    pub w_torque: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            w_q: 1.0,
            sigma_q: 1.0,
            w_qd: 1.0,
            sigma_qd: 0.2,
            w_action_rate: -0.01,
            w_joint_acc: -2.5e-7,
            w_torque: -1e-5,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w_q < 0.0 || self.w_qd < 0.0 || self.sigma_q < 0.0 || self.sigma_qd < 0.0 {
            return Err(Error::Validation("reward: tracking weights and temperatures must be >= 0".into()));
        }
        if self.w_action_rate > 0.0 || self.w_joint_acc > 0.0 || self.w_torque > 0.0 {
            return Err(Error::Validation("reward: regularization weights must be <= 0".into()));
        }
        Ok(())
    }

    pub fn max_tracking(&self) -> f64 {
        self.w_q + self.w_qd
    }

    pub fn zero() -> Self {
        Self {
            w_q: 0.0,
            w_qd: 0.0,
            w_action_rate: 0.0,
            w_joint_acc: 0.0,
            w_torque: 0.0,
            ..Self::default()
        }
    }
}

/// `exp(-sigma |target - actual|^2)`.
pub fn kernel_reward(sigma: f64, target: &[f64], actual: &[f64]) -> f64 {
    let e: f64 = target.iter().zip(actual).map(|(a, b)| (a - b) * (a - b)).sum();
    (-sigma * e).exp()
}

/// Per-group kernel rewards `(r_q, r_qd)` for joint-space states `[q, qd]`.
pub fn tracking_terms(config: &RewardConfig, target: &[f64], actual: &[f64]) -> Result<(f64, f64)> {
    if target.len() != actual.len() || target.len() % 2 != 0 {
        return Err(Error::shape("tracked state", target.len(), actual.len()));
    }
    let n = target.len() / 2;
    Ok((
        kernel_reward(config.sigma_q, &target[..n], &actual[..n]),
        kernel_reward(config.sigma_qd, &target[n..], &actual[n..]),
    ))
}

/// Weighted sum of the group kernels.
pub fn tracking_reward(config: &RewardConfig, target: &[f64], actual: &[f64]) -> Result<f64> {
    let (rq, rqd) = tracking_terms(config, target, actual)?;
    Ok(config.w_q * rq + config.w_qd * rqd)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `w_ar |a' - a|^2 + w_qa |(qd' - qd) / dt|^2 + w_qT |tau|^2`, where
/// `torque_sq` already holds squared torques per joint.
pub fn regularization_reward(
    config: &RewardConfig,
    prev_action: &[f64],
    action: &[f64],
    prev_qd: &[f64],
    qd: &[f64],
    torque_sq: &[f64],
    dt: f64,
) -> f64 {
    config.w_action_rate * sq_dist(prev_action, action)
        + config.w_joint_acc * sq_dist(prev_qd, qd) / (dt * dt)
        + config.w_torque * torque_sq.iter().sum::<f64>()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn perfect_tracking_gives_one_per_group() {
        let c = RewardConfig::default();
        let s = [0.1, -0.2, 0.3, 1.0, 0.0, -1.0];
        assert_eq!(tracking_terms(&c, &s, &s).unwrap(), (1.0, 1.0));
        assert_eq!(tracking_reward(&c, &s, &s).unwrap(), 2.0);
    }

    #[test]
    fn unit_error_kernel() {
        assert!((kernel_reward(1.0, &[1.0], &[0.0]) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((kernel_reward(1.0, &[1.0], &[0.0]) - 0.3679).abs() < 1e-4);
    }

    #[test]
    fn default_temperatures() {
        let c = RewardConfig::default();
        assert_eq!((c.sigma_q, c.sigma_qd), (1.0, 0.2));
        assert!(c.validate().is_ok());
        assert!(RewardConfig { w_torque: 1.0, ..c }.validate().is_err());
    }

    #[test]
    fn layout_mismatch() {
        assert!(tracking_reward(&RewardConfig::default(), &[0.0; 4], &[0.0; 6]).is_err());
    }

    #[test]
    fn regularization_examples() {
        let c = RewardConfig::default();
        let z = [0.0; 3];
        assert_eq!(regularization_reward(&c, &z, &z, &z, &z, &z, 0.02), 0.0);
        let r = regularization_reward(&c, &[1.0, 0.0, 0.0], &z, &z, &z, &z, 0.02);
        assert!((r + 0.01).abs() < 1e-15);
        let r = regularization_reward(&c, &z, &z, &z, &z, &[1e5, 0.0, 0.0], 0.02);
        assert!((r + 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn tracking_bounds(t in prop::collection::vec(-5.0f64..5.0, 6), s in prop::collection::vec(-5.0f64..5.0, 6)) {
            let c = RewardConfig::default();
            let (rq, rqd) = tracking_terms(&c, &t, &s).unwrap();
            prop_assert!((0.0..=1.0).contains(&rq) && (0.0..=1.0).contains(&rqd));
            let r = tracking_reward(&c, &t, &s).unwrap();
            prop_assert!((0.0..=c.max_tracking()).contains(&r));
        }
    }
}
