use std::f64::consts::TAU;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{Motion, MotionDataset, Trajectory};
use super::layout::StateLayout;
use crate::error::{Error, Result};
use crate::sim::{feasibility_probe, FeasibilityReport, SimConfig};

/// `amplitude * sin(2 pi (frequency t + phase))`, phase in cycles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinusoidTerm {
    pub amplitude: f64,
    pub frequency: f64,
    #[serde(default)]
    pub phase: f64,
}

impl SinusoidTerm {
    pub const fn new(amplitude: f64, frequency: f64, phase: f64) -> Self {
        Self {
            amplitude,
            frequency,
            phase,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSignal {
    #[serde(default)]
    pub offset: f64,
    #[serde(default)]
    pub terms: Vec<SinusoidTerm>,
}

impl JointSignal {
    pub fn position(&self, t: f64) -> f64 {
        self.offset
            + self
                .terms
                .iter()
                .map(|s| s.amplitude * (TAU * (s.frequency * t + s.phase)).sin())
                .sum::<f64>()
    }

    pub fn velocity(&self, t: f64) -> f64 {
        self.terms
            .iter()
            .map(|s| s.amplitude * TAU * s.frequency * (TAU * (s.frequency * t + s.phase)).cos())
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticMotionSpec {
    pub name: String,
    pub joints: Vec<JointSignal>,
    #[serde(default)]
    pub noise_std: f64,
}

impl SyntheticMotionSpec {
    pub fn validate(&self, dt: f64) -> Result<()> {
        let nyquist = 0.5 / dt;
        for (j, joint) in self.joints.iter().enumerate() {
            for term in &joint.terms {
                if !(term.frequency >= 0.0 && term.frequency < nyquist) {
                    return Err(Error::Validation(format!(
                        "motion {} joint {j}: frequency {} Hz is not below Nyquist {nyquist} Hz",
                        self.name, term.frequency
                    )));
                }
                if !(term.amplitude >= 0.0) || !term.phase.is_finite() {
                    return Err(Error::Validation(format!(
                        "motion {} joint {j}: amplitude must be >= 0 and phase finite",
                        self.name
                    )));
                }
            }
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Validation(format!("motion {}: negative noise std", self.name)));
        }
        Ok(())
    }

    /// Noise-free `(q, q')` at steps `0..steps`.
    pub fn clean_states(&self, steps: usize, dt: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        (0..steps)
            .map(|k| {
                let t = k as f64 * dt;
                let q = self.joints.iter().map(|j| j.position(t)).collect();
                let qd = self.joints.iter().map(|j| j.velocity(t)).collect();
                (q, qd)
            })
            .unzip()
    }

    pub fn probe(&self, sim: &SimConfig, steps: usize) -> FeasibilityReport {
        let (q, qd) = self.clean_states(steps, sim.dt);
        feasibility_probe(sim, &q, &qd)
    }
}

/// Sample `n_traj` noisy trajectories of `steps` states per spec in the
/// joint-space layout and flag each motion with the simulator probe run on
/// its noise-free signal.
pub fn generate_synthetic_dataset(
    specs: &[SyntheticMotionSpec],
    n_traj: usize,
    steps: usize,
    horizon: usize,
    seed: u64,
    sim: &SimConfig,
) -> Result<MotionDataset> {
    if specs.is_empty() {
        return Err(Error::Validation("no motion specs given".into()));
    }
    if n_traj == 0 {
        return Err(Error::Validation("need at least one trajectory per motion".into()));
    }
    if steps < horizon {
        return Err(Error::TrajectoryTooShort {
            len: steps,
            required: horizon,
        });
    }
    let n = sim.n_joints();
    let dt = sim.dt;
    for spec in specs {
        spec.validate(dt)?;
        if spec.joints.len() != n {
            return Err(Error::Validation(format!(
                "motion {} has {} joints, simulator has {n}",
                spec.name,
                spec.joints.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut motions = Vec::with_capacity(specs.len());
    for spec in specs {
        let (q, qd) = spec.clean_states(steps, dt);
        let report = feasibility_probe(sim, &q, &qd);
        let noise = Normal::new(0.0, spec.noise_std.max(0.0)).map_err(|e| Error::Validation(e.to_string()))?;
        let mut trajectories = Vec::with_capacity(n_traj);
        for _ in 0..n_traj {
            let mut data = Vec::with_capacity(steps * 2 * n);
            for k in 0..steps {
                for v in q[k].iter().chain(&qd[k]) {
                    let e = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    data.push(v + e);
                }
            }
            trajectories.push(Trajectory::new(2 * n, data)?);
        }
        motions.push(Motion {
            name: spec.name.clone(),
            trajectories,
            feasible: Some(report.feasible),
        });
    }
    MotionDataset::new(StateLayout::joint_space(n), dt, motions, horizon)
}

fn joint(terms: &[SinusoidTerm]) -> JointSignal {
    JointSignal {
        offset: 0.0,
        terms: terms.to_vec(),
    }
}

const T: fn(f64, f64, f64) -> SinusoidTerm = SinusoidTerm::new;

/// Six periodic classes for the three-link chain. `whip` exceeds the
/// velocity limit and `lift` the torque limit; the rest are feasible.
pub fn default_corpus() -> Vec<SyntheticMotionSpec> {
    let noise = 0.02;
    let spec = |name: &str, joints: Vec<JointSignal>| SyntheticMotionSpec {
        name: name.into(),
        joints,
        noise_std: noise,
    };
    vec![
        spec(
            "swing",
            vec![
                joint(&[T(0.4, 0.8, 0.0)]),
                joint(&[T(0.3, 0.8, 0.1)]),
                joint(&[T(0.3, 0.8, 0.2)]),
            ],
        ),
        spec(
            "wave",
            vec![
                joint(&[T(0.2, 1.0, 0.0)]),
                joint(&[T(0.4, 1.0, 0.25)]),
                joint(&[T(0.35, 2.0, 0.0)]),
            ],
        ),
        spec(
            "sway",
            vec![
                joint(&[T(0.3, 0.5, 0.0), T(0.1, 1.0, 0.0)]),
                joint(&[T(0.2, 0.5, 0.5)]),
                joint(&[T(0.2, 0.5, 0.0)]),
            ],
        ),
        spec(
            "pump",
            vec![
                joint(&[T(0.1, 1.2, 0.0)]),
                joint(&[T(0.5, 1.2, 0.25)]),
                joint(&[T(0.4, 1.2, 0.0)]),
            ],
        ),
        spec(
            "whip",
            vec![
                joint(&[T(0.1, 3.0, 0.0)]),
                joint(&[T(0.3, 3.0, 0.1)]),
                joint(&[T(0.5, 3.0, 0.2)]),
            ],
        ),
        spec(
            "lift",
            vec![
                joint(&[T(0.7, 1.3, 0.0)]),
                joint(&[T(0.2, 1.3, 0.0)]),
                joint(&[T(0.1, 1.3, 0.0)]),
            ],
        ),
    ]
}

/// Names of the classes [`default_corpus`] makes infeasible by construction.
pub const DEFAULT_INFEASIBLE: [&str; 2] = ["whip", "lift"];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::ViolationKind;

    fn one_joint_sim() -> SimConfig {
        SimConfig {
            masses: vec![1.0],
            lengths: vec![0.3],
            torque_limit: vec![20.0],
            ..SimConfig::default()
        }
    }

    #[test]
    fn closed_form_single_term() {
        let spec = SyntheticMotionSpec {
            name: "s".into(),
            joints: vec![joint(&[T(1.0, 1.0, 0.0)])],
            noise_std: 0.0,
        };
        let ds = generate_synthetic_dataset(&[spec], 1, 60, 51, 0, &one_joint_sim()).unwrap();
        let t = &ds.motions[0].trajectories[0];
        for k in 0..60 {
            let expected = (TAU * 0.02 * k as f64).sin();
            assert!((t.row(k)[0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let sim = SimConfig::default();
        let a = generate_synthetic_dataset(&default_corpus(), 2, 120, 51, 9, &sim).unwrap();
        let b = generate_synthetic_dataset(&default_corpus(), 2, 120, 51, 9, &sim).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_dataset(&default_corpus(), 2, 120, 51, 10, &sim).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn nyquist_rejected() {
        let spec = SyntheticMotionSpec {
            name: "fast".into(),
            joints: vec![joint(&[T(0.1, 25.0, 0.0)])],
            noise_std: 0.0,
        };
        assert!(matches!(
            generate_synthetic_dataset(&[spec], 1, 60, 51, 0, &one_joint_sim()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn velocity_excess_flagged_infeasible() {
        let sim = one_joint_sim();
        // velocity amplitude 2 pi = 6.28 exceeds 6 rad/s
        let spec = SyntheticMotionSpec {
            name: "v".into(),
            joints: vec![joint(&[T(1.0, 1.0, 0.0)])],
            noise_std: 0.0,
        };
        let report = spec.probe(&sim, 240);
        assert!(report.violations.iter().any(|v| v.kind == ViolationKind::Velocity));
        let ds = generate_synthetic_dataset(&[spec], 1, 240, 51, 0, &sim).unwrap();
        assert_eq!(ds.motions[0].feasible, Some(false));
    }

    #[test]
    fn default_corpus_has_exactly_two_infeasible() {
        let sim = SimConfig::default();
        let ds = generate_synthetic_dataset(&default_corpus(), 3, 240, 51, 0, &sim).unwrap();
        assert_eq!(ds.motions.len(), 6);
        assert_eq!(ds.dim(), 6);
        let infeasible: Vec<&str> = ds
            .motions
            .iter()
            .filter(|m| m.feasible == Some(false))
            .map(|m| m.name.as_str())
            .collect();
        assert_eq!(infeasible, DEFAULT_INFEASIBLE);
        let kinds = |name: &str| -> Vec<ViolationKind> {
            let spec = default_corpus().into_iter().find(|s| s.name == name).unwrap();
            spec.probe(&sim, 240).violations.iter().map(|v| v.kind).collect()
        };
        assert!(kinds("whip").contains(&ViolationKind::Velocity));
        assert!(kinds("lift").contains(&ViolationKind::Torque));
        assert!(!kinds("lift").contains(&ViolationKind::Velocity));
    }
}
