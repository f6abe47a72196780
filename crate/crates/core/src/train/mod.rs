//! Multi-step FLD / SCAE training, evaluation and the latent sample buffer.

mod buffer;
mod loss;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::data::{window_refs, MotionDataset, Trajectory, WindowRef};
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::model::{scae_container, scae_from_container, Mode, ScaeModel, Trainable};
use crate::optim::Adam;

pub use buffer::{active_channels, amplitude_sparsity, export_manifold, pca_2d, LatentSample, LatentSampleBuffer, ManifoldRow, MotionSparsity};
pub use loss::{build_losses, decay_sum, fld_loss, scae_loss, LossNodes, WindowBatch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_iters: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs_per_iter: usize,
    pub minibatches: usize,
    /// Windows drawn per epoch; 0 uses every window.
    pub windows_per_epoch: usize,
    pub window_stride: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_iters: 5000,
            lr: 1e-4,
            weight_decay: 5e-4,
            epochs_per_iter: 5,
            minibatches: 4,
            windows_per_epoch: 0,
            window_stride: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Fewer iterations over 16-window minibatches with a larger step size.
    pub fn desk() -> Self {
        Self {
            max_iters: 60,
            lr: 3e-3,
            windows_per_epoch: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Validation("train: lr must be positive and weight decay non-negative".into()));
        }
        if self.epochs_per_iter == 0 || self.minibatches == 0 || self.window_stride == 0 {
            return Err(Error::Validation("train: epochs, minibatches and stride must be positive".into()));
        }
        Ok(())
    }
}

/// Means over one iteration's minibatch steps.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterRecord {
    pub iter: usize,
    /// Motion loss normalized by `sum_i alpha^i` (a per-entry MSE).
    pub motion_recon_mse: f64,
    pub latent_recon_mse: f64,
    pub loss: f64,
    pub lr: f64,
    pub wallclock: f64,
    /// Objective of every minibatch step.
    pub step_losses: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<IterRecord>,
}

impl TrainLog {
    pub const HEADER: &'static str = "iter,motion_recon_mse,latent_recon_mse,lr,wallclock";

    pub fn csv_row(r: &IterRecord) -> String {
        format!("{},{},{},{},{}", r.iter, r.motion_recon_mse, r.latent_recon_mse, r.lr, r.wallclock)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(s, "{}", Self::csv_row(r));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn step_losses(&self) -> Vec<f64> {
        self.records.iter().flat_map(|r| r.step_losses.iter().copied()).collect()
    }
}

/// Eval-mode reconstruction errors over a window set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub motion_recon_mse: f64,
    pub latent_recon_mse: f64,
    pub windows: usize,
}

/// Eval-mode motion and latent reconstruction MSE over windows of `dataset`
/// spaced by `stride`, using the model's horizon.
pub fn evaluate(model: &ScaeModel, dataset: &MotionDataset, stride: usize) -> Result<EvalMetrics> {
    let cfg = &model.config;
    let refs = window_refs(dataset, cfg.window, cfg.horizon, stride)?;
    let normalized = dataset.normalized();
    let norm = decay_sum(cfg.alpha, cfg.horizon);
    let (mut motion, mut latent) = (0.0, 0.0);
    for chunk in refs.chunks(32) {
        let batch = WindowBatch::gather(&normalized, chunk, cfg.window, cfg.horizon)?;
        let mut bound = model.bind(Trainable::NONE, Mode::Eval);
        let nodes = build_losses(&mut bound, &batch, cfg.alpha, 0.0)?;
        let w = chunk.len() as f64;
        motion += w * bound.graph.value(nodes.motion).data()[0];
        latent += w * bound.graph.value(nodes.latent).data()[0];
    }
    let n = refs.len() as f64;
    Ok(EvalMetrics {
        motion_recon_mse: motion / n / norm,
        latent_recon_mse: latent / n / norm,
        windows: refs.len(),
    })
}

pub const TRAIN_STATE_KIND: &str = "scae-train-state";

/// Resumable trainer: model, optimizer moments, sampling RNG and iteration count.
pub struct Trainer {
    pub model: ScaeModel,
    pub config: TrainConfig,
    pub adam: Adam,
    pub iteration: usize,
    rng: ChaCha8Rng,
    refs: Vec<WindowRef>,
    normalized: Vec<Vec<Trajectory>>,
    started: Instant,
}

impl Trainer {
    pub fn new(model: ScaeModel, dataset: &MotionDataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if dataset.dim() != model.dim {
            return Err(Error::shape("dataset dimension", [model.dim], [dataset.dim()]));
        }
        let refs = window_refs(dataset, model.config.window, model.config.horizon, config.window_stride)?;
        let per_step = epoch_size(&config, refs.len()) / config.minibatches;
        if per_step < 2 {
            return Err(Error::Validation(format!(
                "train: {} windows per epoch over {} minibatches leaves fewer than 2 per batch",
                epoch_size(&config, refs.len()),
                config.minibatches
            )));
        }
        Ok(Self {
            adam: Adam::new(config.lr, config.weight_decay),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            iteration: 0,
            refs,
            normalized: dataset.normalized(),
            model,
            config,
            started: Instant::now(),
        })
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.max_iters
    }

    fn step(&mut self, refs: &[WindowRef]) -> Result<(f64, f64, f64)> {
        let cfg = self.model.config.clone();
        let batch = WindowBatch::gather(&self.normalized, refs, cfg.window, cfg.horizon)?;
        let (values, grads, stats) = {
            let mut bound = self.model.bind(Trainable::ALL, Mode::Train);
            let nodes = build_losses(&mut bound, &batch, cfg.alpha, cfg.beta)?;
            let val = |id| bound.graph.value(id).data()[0];
            let values = (val(nodes.total), val(nodes.motion), val(nodes.latent));
            if !values.0.is_finite() {
                return Err(Error::Divergence {
                    iteration: self.iteration,
                    detail: format!(
                        "non-finite loss {} (motion {}, latent {}) at optimizer step {}",
                        values.0, values.1, values.2, self.adam.steps
                    ),
                });
            }
            let g = bound.graph.backward(nodes.total)?;
            let grads: Vec<Option<Vec<f64>>> = bound.params.iter().map(|id| g.get(*id).map(<[f64]>::to_vec)).collect();
            (values, grads, bound.batch_statistics())
        };
        let grad_refs: Vec<Option<&[f64]>> = grads.iter().map(|g| g.as_deref()).collect();
        let mut params = self.model.parameters_mut();
        let mut slices: Vec<&mut [f64]> = params.iter_mut().map(|t| t.data_mut()).collect();
        self.adam.step(&mut slices, &grad_refs);
        self.model.update_running_stats(&stats);
        Ok(values)
    }

    /// Run one iteration: `epochs_per_iter` passes, each split into `minibatches` steps.
    pub fn run_iteration(&mut self) -> Result<IterRecord> {
        let n_epoch = epoch_size(&self.config, self.refs.len());
        let per_step = n_epoch / self.config.minibatches;
        let norm = decay_sum(self.model.config.alpha, self.model.config.horizon);
        let mut step_losses = Vec::new();
        let (mut motion, mut latent) = (0.0, 0.0);
        for _ in 0..self.config.epochs_per_iter {
            let mut order: Vec<usize> = (0..self.refs.len()).collect();
            order.shuffle(&mut self.rng);
            order.truncate(n_epoch);
            for mb in order.chunks_exact(per_step) {
                let refs: Vec<WindowRef> = mb.iter().map(|&i| self.refs[i]).collect();
                let (total, m, l) = self.step(&refs)?;
                step_losses.push(total);
                motion += m;
                latent += l;
            }
        }
        let steps = step_losses.len() as f64;
        let record = IterRecord {
            iter: self.iteration,
            motion_recon_mse: motion / steps / norm,
            latent_recon_mse: latent / steps / norm,
            loss: step_losses.iter().sum::<f64>() / steps,
            lr: self.adam.lr,
            wallclock: self.started.elapsed().as_secs_f64(),
            step_losses,
        };
        self.iteration += 1;
        Ok(record)
    }

    /// Save everything needed to continue bit-identically.
    pub fn save_state(&self, path: &Path, dataset: &MotionDataset) -> Result<()> {
        let mut c = scae_container(TRAIN_STATE_KIND, &self.model, &dataset.normalization, &dataset.layout)?;
        c.set_meta("iteration", self.iteration);
        c.set_meta("rng.word_pos", self.rng.get_word_pos());
        c.set_meta("train_config", serde_json::to_string(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?);
        c.set_meta("adam.steps", self.adam.steps);
        for (i, (m, v)) in self.adam.m.iter().zip(&self.adam.v).enumerate() {
            c.push(format!("adam.m.{i}"), Tensor::new(vec![m.len()], m.clone())?);
            c.push(format!("adam.v.{i}"), Tensor::new(vec![v.len()], v.clone())?);
        }
        c.save(path)
    }

    pub fn load_state(path: &Path, dataset: &MotionDataset) -> Result<Self> {
        let c = Container::load_kind(path, TRAIN_STATE_KIND)?;
        let art = scae_from_container(&c)?;
        let config: TrainConfig = serde_json::from_str(c.meta("train_config")?)
            .map_err(|e| Error::Checkpoint(format!("train_config: {e}")))?;
        let mut t = Trainer::new(art.model, dataset, config)?;
        t.iteration = c.meta_parse("iteration")?;
        t.rng.set_word_pos(c.meta_parse::<u128>("rng.word_pos")?);
        t.adam.steps = c.meta_parse("adam.steps")?;
        let n = t.model.parameters().len();
        if t.adam.steps > 0 {
            for i in 0..n {
                t.adam.m.push(c.tensor(&format!("adam.m.{i}"))?.data().to_vec());
                t.adam.v.push(c.tensor(&format!("adam.v.{i}"))?.data().to_vec());
            }
        }
        Ok(t)
    }
}

fn epoch_size(config: &TrainConfig, available: usize) -> usize {
    if config.windows_per_epoch == 0 {
        available
    } else {
        config.windows_per_epoch.min(available)
    }
}

/// Result of a complete training run.
pub struct TrainOutcome {
    pub model: ScaeModel,
    pub log: TrainLog,
    pub buffer: LatentSampleBuffer,
}

/// Train to `config.max_iters`, then fill the latent buffer with an eval-mode
/// pass over every training segment.
pub fn train(model: ScaeModel, dataset: &MotionDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model, dataset, config.clone())?;
    let mut log = TrainLog::default();
    while !trainer.is_done() {
        log.records.push(trainer.run_iteration()?);
    }
    let buffer = LatentSampleBuffer::collect(&trainer.model, dataset, 1)?;
    Ok(TrainOutcome {
        model: trainer.model,
        log,
        buffer,
    })
}

#[cfg(test)]
mod tests;
