use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::reward::{regularization_reward, tracking_terms, RewardConfig};
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::latent::{sample_episode_target, synthesize_newest, EpisodeLatentState};
use crate::model::{LatentParams, ScaeModel};
use crate::sim::{step_pd, SimConfig, SimState};
use crate::train::LatentSampleBuffer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub episode_seconds: f64,
    /// Gaussian noise std on observed joint positions.
    pub noise_q: f64,
    pub noise_qd: f64,
    pub noise_action: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            episode_seconds: 20.0,
            noise_q: 0.01,
            noise_qd: 0.05,
            noise_action: 0.0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.episode_seconds > 0.0) || self.noise_q < 0.0 || self.noise_qd < 0.0 || self.noise_action < 0.0 {
            return Err(Error::Validation("env: episode length must be positive and noise levels >= 0".into()));
        }
        Ok(())
    }
}

/// Widths of the observation blocks: `[q, qd, last action, sin phi, cos phi, f, a, b]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ObservationLayout {
    pub joints: usize,
    pub channels: usize,
}

impl ObservationLayout {
    pub fn width(&self) -> usize {
        3 * self.joints + 5 * self.channels
    }

    /// Start of the latent block.
    pub fn latent_start(&self) -> usize {
        3 * self.joints
    }

    /// Write one observation into `out`; noise touches only the first three blocks.
    pub fn fill<R: Rng + ?Sized>(
        &self,
        state: &SimState,
        last_action: &[f64],
        latent: &LatentParams,
        noise: &EnvConfig,
        rng: &mut R,
        out: &mut [f64],
    ) {
        let n = self.joints;
        let mut noisy = |v: f64, std: f64| if std > 0.0 { v + std * rng.sample::<f64, _>(StandardNormal) } else { v };
        for j in 0..n {
            out[j] = noisy(state.q[j], noise.noise_q);
        }
        for j in 0..n {
            out[n + j] = noisy(state.qd[j], noise.noise_qd);
        }
        for j in 0..n {
            out[2 * n + j] = noisy(last_action[j], noise.noise_action);
        }
        let c = self.channels;
        let base = self.latent_start();
        for ch in 0..c {
            let ph = std::f64::consts::TAU * latent.phase[ch];
            out[base + ch] = ph.sin();
            out[base + c + ch] = ph.cos();
            out[base + 2 * c + ch] = latent.frequency[ch];
            out[base + 3 * c + ch] = latent.amplitude[ch];
            out[base + 4 * c + ch] = latent.offset[ch];
        }
    }
}

struct Slot {
    state: SimState,
    latent: EpisodeLatentState,
    target: Vec<f64>,
    last_action: Vec<f64>,
    step: usize,
    episode: usize,
    rng: ChaCha8Rng,
}

/// Latent command, decoded target and realized state after one step.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayPair {
    pub env: usize,
    pub episode: usize,
    pub step: usize,
    pub motion: Option<usize>,
    pub params: LatentParams,
    /// Target `s_hat` used for the reward, physical units.
    pub target: Vec<f64>,
    /// Realized `[q, qd]`.
    pub state: Vec<f64>,
}

/// Per-env results of one vectorized step.
#[derive(Clone, Debug, Default)]
pub struct StepOutput {
    pub rewards: Vec<f64>,
    pub tracking: Vec<f64>,
    pub regularization: Vec<f64>,
    pub sq_error: Vec<f64>,
    pub dones: Vec<bool>,
    /// Observation of envs cut by the time limit, before their reset.
    pub truncated: Vec<(usize, Vec<f64>)>,
    pub pairs: Vec<ReplayPair>,
}

/// Batched tracking environments driven by latent commands.
pub struct TrackingEnv {
    pub normalization: Normalization,
    pub buffer: LatentSampleBuffer,
    pub sim: SimConfig,
    pub reward: RewardConfig,
    pub config: EnvConfig,
    pub layout: ObservationLayout,
    slots: Vec<Slot>,
    max_steps: usize,
    pub incidents: Vec<String>,
    pub record_pairs: bool,
}

impl TrackingEnv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: &ScaeModel,
        normalization: Normalization,
        buffer: LatentSampleBuffer,
        sim: SimConfig,
        reward: RewardConfig,
        config: EnvConfig,
        num_envs: usize,
        seed: u64,
    ) -> Result<Self> {
        sim.validate()?;
        reward.validate()?;
        config.validate()?;
        let n = sim.n_joints();
        if model.dim != 2 * n {
            return Err(Error::shape("tracked state layout", 2 * n, model.dim));
        }
        if buffer.entries.is_empty() {
            return Err(Error::Validation("latent sample buffer is empty".into()));
        }
        let layout = ObservationLayout {
            joints: n,
            channels: model.config.channels,
        };
        let max_steps = (config.episode_seconds / sim.dt).round().max(1.0) as usize;
        let first = crate::latent::LatentTheta::from(&buffer.entries[0].params);
        let mut env = Self {
            normalization,
            buffer,
            sim,
            reward,
            config,
            layout,
            slots: Vec::with_capacity(num_envs),
            max_steps,
            incidents: Vec::new(),
            record_pairs: false,
        };
        for e in 0..num_envs {
            let rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(e as u64));
            let mut slot = Slot {
                state: SimState::rest(n),
                latent: EpisodeLatentState::new(first.clone(), vec![0.0; layout.channels], None)?,
                target: Vec::new(),
                last_action: vec![0.0; n],
                step: 0,
                episode: 0,
                rng,
            };
            env.reset_slot(model, &mut slot, false)?;
            env.slots.push(slot);
        }
        Ok(env)
    }

    pub fn num_envs(&self) -> usize {
        self.slots.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.layout.width()
    }

    pub fn act_dim(&self) -> usize {
        self.layout.joints
    }

    pub fn max_steps(&self) -> usize {
        self.max_steps
    }

    fn reset_slot(&self, model: &ScaeModel, slot: &mut Slot, next_episode: bool) -> Result<()> {
        slot.latent = sample_episode_target(&self.buffer, &mut slot.rng)?;
        slot.target = synthesize_newest(model, &self.normalization, std::slice::from_ref(&slot.latent)).remove(0);
        let n = self.layout.joints;
        let v = self.sim.velocity_limit;
        slot.state = SimState {
            q: slot.target[..n].iter().map(|q| q.clamp(self.sim.joint_lower, self.sim.joint_upper)).collect(),
            qd: slot.target[n..].iter().map(|qd| qd.clamp(-v, v)).collect(),
            time: 0.0,
        };
        slot.last_action = slot.state.q.clone();
        slot.step = 0;
        if next_episode {
            slot.episode += 1;
        }
        Ok(())
    }

    /// Current target state of every env, physical units.
    pub fn targets(&self) -> Vec<&[f64]> {
        self.slots.iter().map(|s| s.target.as_slice()).collect()
    }

    pub fn states(&self) -> Vec<&SimState> {
        self.slots.iter().map(|s| &s.state).collect()
    }

    /// Current observations, row per env.
    pub fn observations(&mut self) -> Vec<f64> {
        let w = self.layout.width();
        let mut out = vec![0.0; w * self.slots.len()];
        for (slot, row) in self.slots.iter_mut().zip(out.chunks_exact_mut(w)) {
            let p = slot.latent.params();
            self.layout.fill(&slot.state, &slot.last_action, &p, &self.config, &mut slot.rng, row);
        }
        out
    }

    /// Apply joint targets (clamped to the joint range) for one control step;
    /// `model` decodes the next targets.
    pub fn step(&mut self, model: &ScaeModel, actions: &[f64]) -> Result<StepOutput> {
        let n = self.layout.joints;
        let envs = self.slots.len();
        if actions.len() != envs * n {
            return Err(Error::shape("actions", envs * n, actions.len()));
        }
        let mut out = StepOutput {
            rewards: vec![0.0; envs],
            tracking: vec![0.0; envs],
            regularization: vec![0.0; envs],
            sq_error: vec![0.0; envs],
            dones: vec![false; envs],
            ..StepOutput::default()
        };
        let mut faulted = vec![false; envs];
        let mut torque_sq = vec![Vec::new(); envs];
        let mut prev_qd = vec![Vec::new(); envs];
        for (e, slot) in self.slots.iter_mut().enumerate() {
            let targets: Vec<f64> = actions[e * n..(e + 1) * n]
                .iter()
                .map(|a| a.clamp(self.sim.joint_lower, self.sim.joint_upper))
                .collect();
            prev_qd[e] = slot.state.qd.clone();
            match step_pd(&self.sim, &slot.state, &targets) {
                Ok((s, tau)) => {
                    slot.state = s;
                    torque_sq[e] = tau;
                }
                Err(err) => {
                    self.incidents.push(format!("env {e} episode {} step {}: {err}", slot.episode, slot.step));
                    faulted[e] = true;
                }
            }
            slot.latent.step_phase(self.sim.dt);
            slot.step += 1;
        }
        let latents: Vec<EpisodeLatentState> = self.slots.iter().map(|s| s.latent.clone()).collect();
        let targets = synthesize_newest(model, &self.normalization, &latents);
        for (e, (slot, target)) in self.slots.iter_mut().zip(targets).enumerate() {
            slot.target = target;
            if faulted[e] {
                out.dones[e] = true;
                continue;
            }
            let actual = slot.state.to_vec();
            let (rq, rqd) = tracking_terms(&self.reward, &slot.target, &actual)?;
            let tracking = self.reward.w_q * rq + self.reward.w_qd * rqd;
            let action = &actions[e * n..(e + 1) * n];
            let reg = regularization_reward(&self.reward, &slot.last_action, action, &prev_qd[e], &slot.state.qd, &torque_sq[e], self.sim.dt);
            slot.last_action = action.to_vec();
            out.tracking[e] = tracking;
            out.regularization[e] = reg;
            out.rewards[e] = tracking + reg;
            out.sq_error[e] = slot.target.iter().zip(&actual).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / actual.len() as f64;
            if self.record_pairs {
                out.pairs.push(ReplayPair {
                    env: e,
                    episode: slot.episode,
                    step: slot.step,
                    motion: slot.latent.source.map(|i| self.buffer.entries[i].motion),
                    params: slot.latent.params(),
                    target: slot.target.clone(),
                    state: actual,
                });
            }
            if slot.step >= self.max_steps {
                out.dones[e] = true;
                let mut row = vec![0.0; self.layout.width()];
                let p = slot.latent.params();
                self.layout.fill(&slot.state, &slot.last_action, &p, &self.config, &mut slot.rng, &mut row);
                out.truncated.push((e, row));
            }
        }
        let mut slots = std::mem::take(&mut self.slots);
        for (e, slot) in slots.iter_mut().enumerate() {
            if out.dones[e] {
                self.reset_slot(model, slot, true)?;
            }
        }
        self.slots = slots;
        Ok(out)
    }

    /// Uniform joint targets within the joint range.
    pub fn random_actions<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.slots.len() * self.layout.joints)
            .map(|_| rng.gen_range(self.sim.joint_lower..=self.sim.joint_upper))
            .collect()
    }
}
