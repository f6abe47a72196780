//! Per-episode latent commands: sampling, phase propagation, target synthesis
//! and interpolation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Normalization, TrajectorySegment};
use crate::diff::wrap_phase;
use crate::error::{Error, Result};
use crate::model::{LatentParams, ScaeModel};
use crate::train::LatentSampleBuffer;

/// Frequency, amplitude and offset of every channel; the phase lives apart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentTheta {
    pub frequency: Vec<f64>,
    pub amplitude: Vec<f64>,
    pub offset: Vec<f64>,
}

impl LatentTheta {
    pub fn channels(&self) -> usize {
        self.frequency.len()
    }

    pub fn with_phase(&self, phase: Vec<f64>) -> LatentParams {
        LatentParams {
            phase,
            frequency: self.frequency.clone(),
            amplitude: self.amplitude.clone(),
            offset: self.offset.clone(),
        }
    }
}

impl From<&LatentParams> for LatentTheta {
    fn from(p: &LatentParams) -> Self {
        Self {
            frequency: p.frequency.clone(),
            amplitude: p.amplitude.clone(),
            offset: p.offset.clone(),
        }
    }
}

/// Latent command of one episode. `theta` is fixed at reset; only the phase moves.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeLatentState {
    theta: LatentTheta,
    phase: Vec<f64>,
    /// Buffer entry `theta` came from, if any.
    pub source: Option<usize>,
}

impl EpisodeLatentState {
    pub fn new(theta: LatentTheta, phase: Vec<f64>, source: Option<usize>) -> Result<Self> {
        let state = Self {
            phase: phase.into_iter().map(wrap_phase).collect(),
            theta,
            source,
        };
        state.params().validate()?;
        Ok(state)
    }

    pub fn from_params(params: &LatentParams, source: Option<usize>) -> Result<Self> {
        Self::new(LatentTheta::from(params), params.phase.clone(), source)
    }

    pub fn theta(&self) -> &LatentTheta {
        &self.theta
    }

    pub fn phase(&self) -> &[f64] {
        &self.phase
    }

    pub fn params(&self) -> LatentParams {
        self.theta.with_phase(self.phase.clone())
    }

    /// `phi <- wrap(phi + f dt)` per channel.
    pub fn step_phase(&mut self, dt: f64) {
        debug_assert!(dt > 0.0, "step_phase needs a positive dt");
        for (p, f) in self.phase.iter_mut().zip(&self.theta.frequency) {
            *p = wrap_phase(*p + f * dt);
        }
    }

    pub fn stepped(mut self, dt: f64) -> Self {
        self.step_phase(dt);
        self
    }
}

/// Uniform buffer entry for `theta`, phase uniform on `[-0.5, 0.5)` per channel.
pub fn sample_episode_target<R: Rng + ?Sized>(buffer: &LatentSampleBuffer, rng: &mut R) -> Result<EpisodeLatentState> {
    if buffer.entries.is_empty() {
        return Err(Error::Validation("latent sample buffer is empty".into()));
    }
    let idx = rng.gen_range(0..buffer.entries.len());
    let entry = &buffer.entries[idx].params;
    let phase = (0..entry.channels()).map(|_| rng.gen::<f64>() - 0.5).collect();
    EpisodeLatentState::new(LatentTheta::from(entry), phase, Some(idx))
}

/// Decoded window `tau_hat_t` and newest state `s_hat_t`, both in physical units.
pub fn synthesize_target(
    model: &ScaeModel,
    normalization: &Normalization,
    state: &EpisodeLatentState,
) -> Result<(TrajectorySegment, Vec<f64>)> {
    let zhat = model.reconstruct(&[state.params()]);
    let out = model.decode(&zhat)?;
    let (d, h) = (model.dim, model.config.window);
    let mut data = out.data().to_vec();
    let mut column = vec![0.0; d];
    for j in 0..h {
        for (i, v) in column.iter_mut().enumerate() {
            *v = data[i * h + j];
        }
        normalization.denormalize_row(&mut column);
        for (i, v) in column.iter().enumerate() {
            data[i * h + j] = *v;
        }
    }
    let segment = TrajectorySegment {
        dim: d,
        h,
        dt: model.config.dt,
        data,
    };
    let newest = segment.column(h - 1);
    Ok((segment, newest))
}

/// Newest target state of each episode in physical units, decoding only the
/// receptive field of the last column.
pub fn synthesize_newest(model: &ScaeModel, normalization: &Normalization, states: &[EpisodeLatentState]) -> Vec<Vec<f64>> {
    let params: Vec<LatentParams> = states.iter().map(EpisodeLatentState::params).collect();
    let mut out = model.decode_newest(&params);
    for row in &mut out {
        normalization.denormalize_row(row);
    }
    out
}

/// Elementwise `(1 - lambda) A + lambda B` of frequency, amplitude and offset.
pub fn interpolate_latents(a: &LatentTheta, b: &LatentTheta, lambda: f64) -> Result<LatentTheta> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Validation(format!("interpolation weight {lambda} outside [0, 1]")));
    }
    if a.channels() != b.channels() {
        return Err(Error::shape("interpolated latent", [a.channels()], [b.channels()]));
    }
    let lerp = |x: &[f64], y: &[f64]| -> Vec<f64> {
        x.iter()
            .zip(y)
            .map(|(x, y)| if lambda == 1.0 { *y } else { x + lambda * (y - x) })
            .collect()
    };
    Ok(LatentTheta {
        frequency: lerp(&a.frequency, &b.frequency),
        amplitude: lerp(&a.amplitude, &b.amplitude),
        offset: lerp(&a.offset, &b.offset),
    })
}
