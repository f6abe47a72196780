//! Planar torque-limited articulated chain under gravity with PD joint control.
//!
//! Links are massless rods with point masses at their tips, hanging straight
//! down at `q = 0`. Joint angles are relative; link `j` has absolute angle
//! `q_0 + .. + q_j`. Dynamics follow `M(q) q'' + h(q, q') = tau` with a
//! diagonal joint armature added to `M`, integrated by semi-implicit Euler.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub masses: Vec<f64>,
    pub lengths: Vec<f64>,
    /// Rotor inertia added to every diagonal entry of the mass matrix.
    pub armature: f64,
    pub gravity: f64,
    pub torque_limit: Vec<f64>,
    pub velocity_limit: f64,
    pub joint_lower: f64,
    pub joint_upper: f64,
    pub dt: f64,
    /// Integration substeps per control period. One keeps the integrator at
    /// the control rate; the default armature keeps PD damping stable there.
    pub substeps: usize,
    pub kp: f64,
    pub kd: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            masses: vec![1.0, 0.8, 0.5],
            lengths: vec![0.3, 0.25, 0.2],
            armature: 0.1,
            gravity: 9.81,
            torque_limit: vec![20.0; 3],
            velocity_limit: 6.0,
            joint_lower: -2.0,
            joint_upper: 2.0,
            dt: 0.02,
            substeps: 1,
            kp: 30.0,
            kd: 5.0,
        }
    }
}

impl SimConfig {
    pub fn n_joints(&self) -> usize {
        self.masses.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.masses.len();
        if n == 0 || self.lengths.len() != n || self.torque_limit.len() != n {
            return Err(Error::Validation(format!(
                "sim: masses ({n}), lengths ({}) and torque limits ({}) must have equal non-zero length",
                self.lengths.len(),
                self.torque_limit.len()
            )));
        }
        if self.masses.iter().chain(&self.lengths).any(|v| !(*v > 0.0)) {
            return Err(Error::Validation("sim: masses and lengths must be positive".into()));
        }
        if self.torque_limit.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::Validation("sim: torque limits must be positive".into()));
        }
        if !(self.dt > 0.0) || self.substeps == 0 {
            return Err(Error::Validation("sim: dt must be positive and substeps >= 1".into()));
        }
        if !(self.velocity_limit > 0.0) || !(self.joint_lower < self.joint_upper) {
            return Err(Error::Validation("sim: invalid velocity or joint limits".into()));
        }
        if self.kp < 0.0 || self.kd < 0.0 || self.armature < 0.0 {
            return Err(Error::Validation("sim: kp, kd and armature must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    pub time: f64,
}

impl SimState {
    pub fn rest(n: usize) -> Self {
        Self {
            q: vec![0.0; n],
            qd: vec![0.0; n],
            time: 0.0,
        }
    }

    /// Concatenated `(q, q')`, the joint-space motion state layout.
    pub fn to_vec(&self) -> Vec<f64> {
        self.q.iter().chain(&self.qd).copied().collect()
    }
}

/// `clamp(kp (target - q) - kd q', +-tau_max)` per joint.
pub fn pd_torque(config: &SimConfig, q: &[f64], qd: &[f64], target: &[f64]) -> Vec<f64> {
    (0..q.len())
        .map(|j| {
            let lim = config.torque_limit[j];
            (config.kp * (target[j] - q[j]) - config.kd * qd[j]).clamp(-lim, lim)
        })
        .collect()
}

struct Kinematics {
    // absolute link directions (sin, cos) and absolute angular rates
    sin: Vec<f64>,
    cos: Vec<f64>,
    omega: Vec<f64>,
}

fn kinematics(q: &[f64], qd: &[f64]) -> Kinematics {
    let n = q.len();
    let (mut sin, mut cos, mut omega) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let (mut th, mut w) = (0.0, 0.0);
    for j in 0..n {
        th += q[j];
        w += qd[j];
        sin.push(th.sin());
        cos.push(th.cos());
        omega.push(w);
    }
    Kinematics { sin, cos, omega }
}

/// Jacobian of point mass `i` w.r.t. joint `k` (zero for `k > i`).
fn jacobian(config: &SimConfig, kin: &Kinematics, i: usize, k: usize) -> (f64, f64) {
    if k > i {
        return (0.0, 0.0);
    }
    let mut jx = 0.0;
    let mut jy = 0.0;
    for j in k..=i {
        jx += config.lengths[j] * kin.cos[j];
        jy += config.lengths[j] * kin.sin[j];
    }
    (jx, jy)
}

pub fn mass_matrix(config: &SimConfig, q: &[f64]) -> DMatrix<f64> {
    let n = q.len();
    let kin = kinematics(q, &vec![0.0; n]);
    let mut m = DMatrix::<f64>::identity(n, n) * config.armature;
    for i in 0..n {
        for a in 0..=i {
            let ja = jacobian(config, &kin, i, a);
            for b in 0..=i {
                let jb = jacobian(config, &kin, i, b);
                m[(a, b)] += config.masses[i] * (ja.0 * jb.0 + ja.1 * jb.1);
            }
        }
    }
    m
}

/// Velocity-product and gravity generalized forces `h(q, q')`.
pub fn bias_forces(config: &SimConfig, q: &[f64], qd: &[f64]) -> DVector<f64> {
    let n = q.len();
    let kin = kinematics(q, qd);
    let mut h = DVector::<f64>::zeros(n);
    for i in 0..n {
        let (mut ax, mut ay) = (0.0, config.gravity);
        for j in 0..=i {
            let w2 = kin.omega[j] * kin.omega[j];
            ax -= config.lengths[j] * w2 * kin.sin[j];
            ay += config.lengths[j] * w2 * kin.cos[j];
        }
        for k in 0..=i {
            let (jx, jy) = jacobian(config, &kin, i, k);
            h[k] += config.masses[i] * (jx * ax + jy * ay);
        }
    }
    h
}

pub fn inverse_dynamics(config: &SimConfig, q: &[f64], qd: &[f64], qdd: &[f64]) -> Vec<f64> {
    let tau = mass_matrix(config, q) * DVector::from_column_slice(qdd) + bias_forces(config, q, qd);
    tau.iter().copied().collect()
}

/// Solve `M q'' = tau - h` by Cholesky. Returns `None` when `M` is not
/// positive definite, which only happens for non-finite states.
pub fn forward_dynamics(config: &SimConfig, q: &[f64], qd: &[f64], tau: &[f64]) -> Option<Vec<f64>> {
    let m = mass_matrix(config, q);
    let rhs = DVector::from_column_slice(tau) - bias_forces(config, q, qd);
    let chol = m.cholesky()?;
    Some(chol.solve(&rhs).iter().copied().collect())
}

/// Total mechanical energy (kinetic plus gravitational potential).
pub fn energy(config: &SimConfig, state: &SimState) -> f64 {
    let m = mass_matrix(config, &state.q);
    let v = DVector::from_column_slice(&state.qd);
    let kinetic = 0.5 * v.dot(&(&m * &v));
    let kin = kinematics(&state.q, &state.qd);
    let mut y = 0.0;
    let mut potential = 0.0;
    for i in 0..state.q.len() {
        y -= config.lengths[i] * kin.cos[i];
        potential += config.masses[i] * config.gravity * y;
    }
    kinetic + potential
}

fn fault(state: &SimState, detail: &str) -> Error {
    Error::SimFault {
        time: state.time,
        detail: format!("{detail}: q={:?} qd={:?}", state.q, state.qd),
    }
}

fn integrate(config: &SimConfig, state: &mut SimState, tau: &[f64], h: f64) -> Result<()> {
    if state.q.iter().chain(&state.qd).chain(tau).any(|v| !v.is_finite()) {
        return Err(fault(state, "non-finite input"));
    }
    let qdd = forward_dynamics(config, &state.q, &state.qd, tau)
        .ok_or_else(|| fault(state, "singular mass matrix"))?;
    for j in 0..state.q.len() {
        state.qd[j] = (state.qd[j] + h * qdd[j]).clamp(-config.velocity_limit, config.velocity_limit);
        state.q[j] += h * state.qd[j];
        if state.q[j] <= config.joint_lower {
            state.q[j] = config.joint_lower;
            state.qd[j] = 0.0;
        } else if state.q[j] >= config.joint_upper {
            state.q[j] = config.joint_upper;
            state.qd[j] = 0.0;
        }
    }
    state.time += h;
    if state.q.iter().chain(&state.qd).any(|v| !v.is_finite()) {
        return Err(fault(state, "non-finite state"));
    }
    Ok(())
}

fn clamp_torques(config: &SimConfig, torques: &[f64]) -> Vec<f64> {
    torques
        .iter()
        .zip(&config.torque_limit)
        .map(|(t, l)| t.clamp(-l, *l))
        .collect()
}

/// Advance one control period holding `torques` (clamped to the limits).
pub fn step(config: &SimConfig, state: &SimState, torques: &[f64]) -> Result<SimState> {
    let tau = clamp_torques(config, torques);
    let h = config.dt / config.substeps as f64;
    let mut next = state.clone();
    for _ in 0..config.substeps {
        integrate(config, &mut next, &tau, h)?;
    }
    Ok(next)
}

/// Advance one control period with the PD controller recomputed every
/// substep. Returns the next state and the mean squared applied torque per joint.
pub fn step_pd(config: &SimConfig, state: &SimState, targets: &[f64]) -> Result<(SimState, Vec<f64>)> {
    let h = config.dt / config.substeps as f64;
    let mut next = state.clone();
    let mut tau_sq = vec![0.0; state.q.len()];
    for _ in 0..config.substeps {
        let tau = pd_torque(config, &next.q, &next.qd, targets);
        for (acc, t) in tau_sq.iter_mut().zip(&tau) {
            *acc += t * t / config.substeps as f64;
        }
        integrate(config, &mut next, &tau, h)?;
    }
    Ok((next, tau_sq))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViolationKind {
    Torque,
    Velocity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub step: usize,
    pub joint: usize,
    pub kind: ViolationKind,
    /// Required magnitude (|tau| or |q'|), not the excess.
    pub magnitude: f64,
    pub limit: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeasibilityReport {
    pub feasible: bool,
    pub violations: Vec<Violation>,
    pub steps: usize,
    pub max_torque_ratio: f64,
    pub max_velocity_ratio: f64,
}

impl FeasibilityReport {
    /// Mean over steps of the summed relative excess `(|x| - limit) / limit`.
    pub fn violation_magnitude(&self) -> f64 {
        if self.steps == 0 {
            return 0.0;
        }
        self.violations
            .iter()
            .map(|v| (v.magnitude - v.limit) / v.limit)
            .sum::<f64>()
            / self.steps as f64
    }

    /// Fraction of steps with at least one violation.
    pub fn violation_rate(&self) -> f64 {
        if self.steps == 0 {
            return 0.0;
        }
        let mut steps: Vec<usize> = self.violations.iter().map(|v| v.step).collect();
        steps.dedup();
        steps.len() as f64 / self.steps as f64
    }
}

/// Inverse-dynamics check of a joint-space trajectory. Accelerations come
/// from central differences of `qd` (one-sided at the ends).
pub fn feasibility_probe(config: &SimConfig, q: &[Vec<f64>], qd: &[Vec<f64>]) -> FeasibilityReport {
    let steps = q.len().min(qd.len());
    let n = config.n_joints();
    let mut violations = Vec::new();
    let (mut max_tr, mut max_vr) = (0.0f64, 0.0f64);
    for t in 0..steps {
        let qdd: Vec<f64> = (0..n)
            .map(|j| {
                if steps < 2 {
                    0.0
                } else if t == 0 {
                    (qd[1][j] - qd[0][j]) / config.dt
                } else if t == steps - 1 {
                    (qd[t][j] - qd[t - 1][j]) / config.dt
                } else {
                    (qd[t + 1][j] - qd[t - 1][j]) / (2.0 * config.dt)
                }
            })
            .collect();
        let tau = inverse_dynamics(config, &q[t], &qd[t], &qdd);
        for j in 0..n {
            let tl = config.torque_limit[j];
            max_tr = max_tr.max(tau[j].abs() / tl);
            if tau[j].abs() > tl {
                violations.push(Violation {
                    step: t,
                    joint: j,
                    kind: ViolationKind::Torque,
                    magnitude: tau[j].abs(),
                    limit: tl,
                });
            }
            let v = qd[t][j].abs();
            max_vr = max_vr.max(v / config.velocity_limit);
            if v > config.velocity_limit {
                violations.push(Violation {
                    step: t,
                    joint: j,
                    kind: ViolationKind::Velocity,
                    magnitude: v,
                    limit: config.velocity_limit,
                });
            }
        }
    }
    FeasibilityReport {
        feasible: violations.is_empty(),
        violations,
        steps,
        max_torque_ratio: max_tr,
        max_velocity_ratio: max_vr,
    }
}

/// Split a `(q, q')` joint-space state sequence into its halves.
pub fn split_joint_states(states: &[Vec<f64>], n: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    states
        .iter()
        .map(|s| (s[..n].to_vec(), s[n..2 * n].to_vec()))
        .unzip()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    fn pendulum() -> SimConfig {
        SimConfig {
            masses: vec![1.0],
            lengths: vec![0.5],
            armature: 0.0,
            torque_limit: vec![10.0],
            velocity_limit: 100.0,
            joint_lower: -10.0,
            joint_upper: 10.0,
            ..SimConfig::default()
        }
    }

    #[test]
    fn pd_torque_examples() {
        let cfg = SimConfig {
            torque_limit: vec![10.0; 3],
            ..SimConfig::default()
        };
        let q = [0.1, -0.3, 0.0];
        assert_eq!(pd_torque(&cfg, &q, &[0.0; 3], &q), vec![0.0; 3]);
        let tau = pd_torque(&cfg, &[0.0; 3], &[0.0; 3], &[0.1, 0.0, 0.0]);
        assert!((tau[0] - 3.0).abs() < 1e-12);
        let tau = pd_torque(&cfg, &[0.0; 3], &[0.0; 3], &[100.0, -100.0, 0.0]);
        assert_eq!(tau, vec![10.0, -10.0, 0.0]);
    }

    #[test]
    fn equilibrium_without_gravity() {
        let cfg = SimConfig {
            gravity: 0.0,
            ..SimConfig::default()
        };
        let s = SimState {
            q: vec![0.3, -0.2, 0.5],
            qd: vec![0.0; 3],
            time: 0.0,
        };
        let next = step(&cfg, &s, &[0.0; 3]).unwrap();
        assert_eq!(next.q, s.q);
        assert_eq!(next.qd, s.qd);
    }

    #[test]
    fn small_angle_pendulum_frequency() {
        let cfg = pendulum();
        let mut s = SimState {
            q: vec![0.05],
            qd: vec![0.0],
            time: 0.0,
        };
        // count downward zero crossings of q over 20 s
        let mut crossings = Vec::new();
        let mut prev = s.q[0];
        for k in 0..1000 {
            s = step(&cfg, &s, &[0.0]).unwrap();
            if prev > 0.0 && s.q[0] <= 0.0 {
                crossings.push(k as f64 * cfg.dt);
            }
            prev = s.q[0];
        }
        let periods = (crossings.len() - 1) as f64;
        let measured = periods / (crossings.last().unwrap() - crossings[0]);
        let expected = (cfg.gravity / cfg.lengths[0]).sqrt() / TAU;
        assert!((measured - expected).abs() / expected < 0.05, "{measured} vs {expected}");
    }

    fn energy_drift(cfg: &SimConfig, q0: [f64; 3]) -> f64 {
        let mut s = SimState {
            q: q0.to_vec(),
            qd: vec![0.0; 3],
            time: 0.0,
        };
        let rest = energy(cfg, &SimState::rest(3));
        let mut energies = Vec::new();
        for _ in 0..1000 {
            s = step(cfg, &s, &[0.0; 3]).unwrap();
            energies.push(energy(cfg, &s) - rest);
        }
        // mean oscillation energy of the first and last 100 steps
        let first: f64 = energies[..100].iter().sum::<f64>() / 100.0;
        let last: f64 = energies[900..].iter().sum::<f64>() / 100.0;
        (last - first).abs() / first
    }

    #[test]
    fn passive_energy_drift_is_small() {
        let free = SimConfig {
            velocity_limit: 100.0,
            joint_lower: -100.0,
            joint_upper: 100.0,
            ..SimConfig::default()
        };
        let drift = energy_drift(&free, [0.05, -0.04, 0.03]);
        assert!(drift < 0.01, "control rate drift {drift}");
        let sub = SimConfig {
            substeps: 4,
            ..free
        };
        let drift = energy_drift(&sub, [0.2, -0.15, 0.1]);
        assert!(drift < 0.01, "substepped drift {drift}");
    }

    #[test]
    fn inverse_dynamics_matches_forward() {
        let cfg = SimConfig::default();
        let q = [0.3, -0.7, 1.1];
        let qd = [1.0, -2.0, 0.5];
        let tau = [3.0, -1.0, 0.25];
        let qdd = forward_dynamics(&cfg, &q, &qd, &tau).unwrap();
        let back = inverse_dynamics(&cfg, &q, &qd, &qdd);
        for j in 0..3 {
            assert!((back[j] - tau[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn mass_matrix_matches_energy() {
        // 1/2 q'^T M q' must equal the summed point-mass kinetic energy
        let cfg = SimConfig {
            armature: 0.0,
            ..SimConfig::default()
        };
        let q = [0.2, 0.9, -0.4];
        let qd = [0.7, -1.3, 2.1];
        let m = mass_matrix(&cfg, &q);
        let v = DVector::from_column_slice(&qd);
        let ke = 0.5 * v.dot(&(&m * &v));
        let (mut th, mut w) = (0.0, 0.0);
        let (mut vx, mut vy) = (0.0, 0.0);
        let mut direct = 0.0;
        for i in 0..3 {
            th += q[i];
            w += qd[i];
            vx += cfg.lengths[i] * w * th.cos();
            vy += cfg.lengths[i] * w * th.sin();
            direct += 0.5 * cfg.masses[i] * (vx * vx + vy * vy);
        }
        assert!((ke - direct).abs() < 1e-12);
    }

    #[test]
    fn limits_are_enforced() {
        let cfg = SimConfig::default();
        let mut s = SimState::rest(3);
        for _ in 0..200 {
            let (next, tau_sq) = step_pd(&cfg, &s, &[5.0, -5.0, 5.0]).unwrap();
            for (j, t) in tau_sq.iter().enumerate() {
                assert!(t.sqrt() <= cfg.torque_limit[j] + 1e-12);
            }
            s = next;
            assert!(s.qd.iter().all(|v| v.abs() <= cfg.velocity_limit));
            assert!(s.q.iter().all(|v| (cfg.joint_lower..=cfg.joint_upper).contains(v)));
        }
    }

    #[test]
    fn stepping_is_deterministic() {
        let cfg = SimConfig::default();
        let run = || {
            let mut s = SimState::rest(3);
            let mut out = Vec::new();
            for k in 0..100 {
                let tgt = [(k as f64 * 0.1).sin(), 0.3, -0.2];
                s = step_pd(&cfg, &s, &tgt).unwrap().0;
                out.extend(s.to_vec());
            }
            out
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn probe_static_and_fast_trajectories() {
        let cfg = SimConfig::default();
        let q = vec![vec![0.2, -0.1, 0.1]; 50];
        let qd = vec![vec![0.0; 3]; 50];
        assert!(feasibility_probe(&cfg, &q, &qd).feasible);

        // velocity amplitude 2 v_max on joint 2
        let (amp_v, f) = (2.0 * cfg.velocity_limit, 0.5);
        let w = TAU * f;
        let q: Vec<Vec<f64>> = (0..100)
            .map(|t| vec![0.0, 0.0, amp_v / w * (w * t as f64 * cfg.dt).sin()])
            .collect();
        let qd: Vec<Vec<f64>> = (0..100)
            .map(|t| vec![0.0, 0.0, amp_v * (w * t as f64 * cfg.dt).cos()])
            .collect();
        let report = feasibility_probe(&cfg, &q, &qd);
        assert!(!report.feasible);
        assert!(report.violations.iter().any(|v| v.kind == ViolationKind::Velocity));
        assert!(report.violation_magnitude() > 0.0);
    }

    #[test]
    fn fault_on_non_finite() {
        let cfg = SimConfig::default();
        let s = SimState {
            q: vec![f64::NAN, 0.0, 0.0],
            qd: vec![0.0; 3],
            time: 0.0,
        };
        assert!(matches!(step(&cfg, &s, &[0.0; 3]), Err(Error::SimFault { .. })));
    }
}
