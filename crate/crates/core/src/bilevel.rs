//! Alternating policy and decoder optimization. The decoder is pulled toward
//! realized robot states while a re-encoding term keeps its outputs close to
//! the sampled latent embedding.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::diff::{NodeId, Tensor};
use crate::error::{Error, Result};
use crate::latent::{synthesize_newest, EpisodeLatentState};
use crate::model::{Bound, LatentNodes, LatentParams, Mode, ParamKind, ScaeModel, Trainable};
use crate::optim::Adam;
use crate::policy::{ActorCritic, PolicyTrainer, ReplayPair, TrackingEnv};
use crate::sim::{feasibility_probe, split_joint_states, SimConfig};
use crate::train::LatentSampleBuffer;

/// Rows per graph when accumulating decoder gradients.
const CHUNK: usize = 256;

/// How the lower level acts during fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LowerLevel {
    /// Warm-started PPO.
    Ppo,
    /// Uniform random joint targets, no policy updates.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BmiConfig {
    /// Weight of the latent re-encoding term.
    pub beta_ft: f64,
    pub decoder_lr: f64,
    pub decoder_minibatches: usize,
    pub decoder_epochs: usize,
    /// Outer iterations `K`.
    pub outer_iters: usize,
    /// Rollouts (and PPO updates) per outer iteration.
    pub inner_iters: usize,
    /// Pairs drawn from the buffer for each decoder update, 0 for all.
    pub decoder_samples: usize,
    /// Match the whole decoded window against the last `H` realized states
    /// instead of the newest state only.
    pub full_segment: bool,
    pub lower_level: LowerLevel,
    /// Admit `beta_ft = 0`.
    pub ablation: bool,
    /// Motions whose decoded targets are probed; empty for all.
    pub probe_motions: Vec<String>,
    pub probe_samples: usize,
    pub probe_steps: usize,
}

impl Default for BmiConfig {
    fn default() -> Self {
        Self {
            beta_ft: 200.0,
            decoder_lr: 1e-5,
            decoder_minibatches: 2,
            decoder_epochs: 1,
            outer_iters: 50,
            inner_iters: 20,
            decoder_samples: 0,
            full_segment: false,
            lower_level: LowerLevel::Ppo,
            ablation: false,
            probe_motions: Vec::new(),
            probe_samples: 8,
            probe_steps: 100,
        }
    }
}

impl BmiConfig {
    /// Single-core scale: fewer PPO iterations per outer step and a
    /// subsampled decoder buffer.
    pub fn desk() -> Self {
        Self {
            inner_iters: 5,
            decoder_samples: 4096,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.beta_ft.is_finite() || self.beta_ft < 0.0 {
            return Err(Error::Validation(format!("bmi: beta_ft {} must be finite and >= 0", self.beta_ft)));
        }
        if self.beta_ft == 0.0 && !self.ablation {
            return Err(Error::Validation("bmi: beta_ft must be > 0 (set ablation = true to study beta_ft = 0)".into()));
        }
        if !(self.decoder_lr > 0.0 && self.decoder_lr.is_finite()) {
            return Err(Error::Validation(format!("bmi: decoder_lr {} must be > 0", self.decoder_lr)));
        }
        if self.decoder_minibatches == 0 || self.decoder_epochs == 0 || self.inner_iters == 0 {
            return Err(Error::Validation("bmi: decoder_minibatches, decoder_epochs and inner_iters must be >= 1".into()));
        }
        if self.probe_samples == 0 || self.probe_steps < 3 {
            return Err(Error::Validation("bmi: probe needs at least 1 sample and 3 steps".into()));
        }
        Ok(())
    }

    /// The decoder must move slower than it did during auto-encoder training.
    pub fn check_decoder_lr(&self, scae_lr: f64) -> Result<()> {
        if self.decoder_lr >= scae_lr {
            return Err(Error::Validation(format!(
                "bmi: decoder_lr {} must be below the auto-encoder lr {scae_lr}",
                self.decoder_lr
            )));
        }
        Ok(())
    }
}

/// Latent commands paired with the states the robot reached under them,
/// for one outer iteration.
#[derive(Clone, Debug, Default)]
pub struct RolloutBuffer {
    pub pairs: Vec<ReplayPair>,
    index: HashMap<(usize, usize, usize), usize>,
}

impl RolloutBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn clear(&mut self) {
        self.pairs.clear();
        self.index.clear();
    }

    pub fn extend(&mut self, pairs: impl IntoIterator<Item = ReplayPair>) {
        for p in pairs {
            self.index.insert((p.env, p.episode, p.step), self.pairs.len());
            self.pairs.push(p);
        }
    }

    /// Buffer indices of the `h` consecutive steps ending at pair `i`, oldest
    /// first, when all of them are present.
    pub fn segment(&self, i: usize, h: usize) -> Option<Vec<usize>> {
        let p = self.pairs.get(i)?;
        let first = (p.step + 1).checked_sub(h)?;
        (first..=p.step)
            .map(|s| self.index.get(&(p.env, p.episode, s)).copied())
            .collect()
    }

    /// Pairs usable as decoder targets: all of them, or with `window = Some(h)`
    /// those whose full `h`-step history is present.
    pub fn eligible(&self, window: Option<usize>) -> Vec<usize> {
        match window {
            None => (0..self.pairs.len()).collect(),
            Some(h) => (0..self.pairs.len()).filter(|&i| self.segment(i, h).is_some()).collect(),
        }
    }

    /// Latent commands and realized states (normalized) of the given pairs.
    pub fn batch(&self, indices: &[usize], norm: &Normalization, window: Option<usize>) -> Result<DecoderBatch> {
        let d = norm.dim();
        let b = indices.len();
        let mut params = Vec::with_capacity(b);
        let mut states = Vec::with_capacity(b * d * window.unwrap_or(1));
        for &i in indices {
            let p = self
                .pairs
                .get(i)
                .ok_or_else(|| Error::Contract(format!("pair {i} is not in the rollout buffer")))?;
            if p.state.len() != d {
                return Err(Error::shape("realized state", d, p.state.len()));
            }
            params.push(p.params.clone());
            match window {
                None => {
                    let mut row = p.state.clone();
                    norm.normalize_row(&mut row);
                    states.extend(row);
                }
                Some(h) => {
                    let seg = self
                        .segment(i, h)
                        .ok_or_else(|| Error::Contract(format!("pair {i} lacks a {h}-step history")))?;
                    let rows: Vec<Vec<f64>> = seg
                        .iter()
                        .map(|&j| {
                            let mut r = self.pairs[j].state.clone();
                            norm.normalize_row(&mut r);
                            r
                        })
                        .collect();
                    for k in 0..d {
                        states.extend(rows.iter().map(|r| r[k]));
                    }
                }
            }
        }
        let shape = match window {
            None => vec![b, d],
            Some(h) => vec![b, d, h],
        };
        Ok(DecoderBatch {
            params,
            states: Tensor::new(shape, states)?,
        })
    }
}

/// Latent commands with the realized states they should decode to.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBatch {
    pub params: Vec<LatentParams>,
    /// `[B, d]` newest states or `[B, d, H]` windows, normalized.
    pub states: Tensor,
}

impl DecoderBatch {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

/// Values of the decoder objective over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct DecoderTerms {
    pub total: f64,
    /// Mean squared error against the realized states.
    pub state: f64,
    /// Mean squared latent re-encoding error.
    pub latent: f64,
    /// Mean absolute latent re-encoding error.
    pub drift: f64,
}

struct DecoderNodes {
    total: NodeId,
    state: NodeId,
    latent: NodeId,
    zhat: NodeId,
    zbar: NodeId,
}

fn check_frozen(trainable: Trainable) -> Result<()> {
    if trainable.encoder || trainable.phase_head || trainable.bn_affine {
        return Err(Error::Contract(
            "decoder fine-tuning requires a frozen encoder, phase head and batch norm".into(),
        ));
    }
    Ok(())
}

fn latent_constants(bound: &mut Bound, params: &[LatentParams]) -> Result<LatentNodes> {
    let b = params.len();
    let c = params.first().map_or(0, LatentParams::channels);
    let mut node = |f: &dyn Fn(&LatentParams) -> &[f64]| -> Result<NodeId> {
        let data: Vec<f64> = params.iter().flat_map(|p| f(p).iter().copied()).collect();
        Ok(bound.graph.constant(Tensor::new(vec![b, c], data)?))
    };
    Ok(LatentNodes {
        phase: node(&|p| &p.phase)?,
        frequency: node(&|p| &p.frequency)?,
        amplitude: node(&|p| &p.amplitude)?,
        offset: node(&|p| &p.offset)?,
    })
}

/// Squared-error weights are `1 / (denom * entries)` so that chunks of one
/// minibatch sum to its mean.
fn build_decoder_loss(bound: &mut Bound, batch: &DecoderBatch, beta: f64, denom: usize) -> Result<DecoderNodes> {
    let b = batch.len();
    let lat = latent_constants(bound, &batch.params)?;
    let zhat = bound.reconstruct(&lat)?;
    let decoded = bound.decode(zhat, false)?;
    let s = bound.graph.value(decoded).shape().to_vec();
    let (d, h) = (s[1], s[2]);
    let target = bound.graph.constant(batch.states.clone());
    let state = match batch.states.shape().len() {
        2 => {
            let newest = bound.graph.select_column(decoded, h - 1)?;
            bound.graph.weighted_sq_error(newest, target, vec![1.0 / (denom * d) as f64; b])?
        }
        _ => bound.graph.weighted_sq_error(decoded, target, vec![1.0 / (denom * d * h) as f64; b])?,
    };
    let z = bound.encode(decoded, false)?;
    let pbar = bound.parameterize(z)?;
    let zbar = bound.reconstruct(&pbar)?;
    let c = bound.graph.value(zhat).shape()[1];
    let latent = bound
        .graph
        .weighted_sq_error(zbar, zhat, vec![1.0 / (denom * c * h) as f64; b])?;
    let total = if beta == 0.0 {
        state
    } else {
        bound.graph.add_scaled(state, latent, beta)?
    };
    Ok(DecoderNodes {
        total,
        state,
        latent,
        zhat,
        zbar,
    })
}

fn read_terms(bound: &Bound, nodes: &DecoderNodes, denom: usize) -> DecoderTerms {
    let val = |id: NodeId| bound.graph.value(id).data()[0];
    let (zh, zb) = (bound.graph.value(nodes.zhat).data(), bound.graph.value(nodes.zbar).data());
    let per_row = zh.len() / bound.graph.value(nodes.zhat).shape()[0];
    let abs: f64 = zh.iter().zip(zb).map(|(a, b)| (a - b).abs()).sum();
    DecoderTerms {
        total: val(nodes.total),
        state: val(nodes.state),
        latent: val(nodes.latent),
        drift: abs / (denom * per_row) as f64,
    }
}

/// Newest-state (or window) error against the realized states plus
/// `beta` times the latent re-encoding error, in eval mode.
pub fn decoder_loss(model: &ScaeModel, batch: &DecoderBatch, beta: f64, trainable: Trainable) -> Result<DecoderTerms> {
    check_frozen(trainable)?;
    if batch.is_empty() {
        return Err(Error::Validation("empty decoder batch".into()));
    }
    let mut bound = model.bind(trainable, Mode::Eval);
    let nodes = build_decoder_loss(&mut bound, batch, beta, batch.len())?;
    Ok(read_terms(&bound, &nodes, batch.len()))
}

type Grads = Vec<Option<Vec<f64>>>;

/// Objective and decoder-conv gradients over `indices`, accumulated in chunks.
fn decoder_pass(
    model: &ScaeModel,
    buffer: &RolloutBuffer,
    indices: &[usize],
    norm: &Normalization,
    window: Option<usize>,
    beta: f64,
    with_grads: bool,
) -> Result<(DecoderTerms, Option<Grads>)> {
    let denom = indices.len();
    let mut terms = DecoderTerms::default();
    let mut grads: Option<Grads> = None;
    for chunk in indices.chunks(CHUNK) {
        let batch = buffer.batch(chunk, norm, window)?;
        let trainable = if with_grads { Trainable::DECODER_CONV } else { Trainable::NONE };
        let mut bound = model.bind(trainable, Mode::Eval);
        let nodes = build_decoder_loss(&mut bound, &batch, beta, denom)?;
        let t = read_terms(&bound, &nodes, denom);
        terms.total += t.total;
        terms.state += t.state;
        terms.latent += t.latent;
        terms.drift += t.drift;
        if with_grads {
            let g = bound.graph.backward(nodes.total)?;
            let acc = grads.get_or_insert_with(|| vec![None; bound.params.len()]);
            for (slot, id) in acc.iter_mut().zip(&bound.params) {
                if let Some(gi) = g.get(*id) {
                    match slot {
                        Some(s) => s.iter_mut().zip(gi).for_each(|(a, b)| *a += b),
                        None => *slot = Some(gi.to_vec()),
                    }
                }
            }
        }
    }
    Ok((terms, grads))
}

/// Every sampled pair must decode, under the current decoder, to exactly the
/// target it was rewarded against.
pub fn audit_alignment(model: &ScaeModel, norm: &Normalization, buffer: &RolloutBuffer, indices: &[usize]) -> Result<()> {
    for chunk in indices.chunks(512) {
        let params: Vec<LatentParams> = chunk.iter().map(|&i| buffer.pairs[i].params.clone()).collect();
        let rows = model.decode_newest(&params);
        for (&i, mut row) in chunk.iter().zip(rows) {
            norm.denormalize_row(&mut row);
            let p = &buffer.pairs[i];
            if row.iter().zip(&p.target).any(|(a, b)| a.to_bits() != b.to_bits()) {
                return Err(Error::Contract(format!(
                    "pair env {} episode {} step {}: latent command does not reproduce its target",
                    p.env, p.episode, p.step
                )));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DecoderUpdate {
    /// Objective over the sampled pairs before the update.
    pub before: DecoderTerms,
    /// Objective over the same pairs afterwards.
    pub after: DecoderTerms,
    pub samples: usize,
    pub steps: usize,
    /// Rate used by this update.
    pub lr: f64,
    pub reverted: bool,
    pub incident: Option<String>,
}

/// `decoder_epochs` passes over `decoder_minibatches` splits of the sampled
/// pairs. Only decoder convolutions change. A non-finite loss or gradient
/// restores the decoder and halves the rate.
pub fn update_decoder<R: Rng + ?Sized>(
    model: &mut ScaeModel,
    buffer: &RolloutBuffer,
    norm: &Normalization,
    config: &BmiConfig,
    adam: &mut Adam,
    rng: &mut R,
) -> Result<DecoderUpdate> {
    let window = config.full_segment.then_some(model.config.window);
    let mut idx = buffer.eligible(window);
    if idx.is_empty() {
        return Err(Error::Validation("rollout buffer holds no usable pairs".into()));
    }
    if config.decoder_samples > 0 && idx.len() > config.decoder_samples {
        let mut pick = rand::seq::index::sample(rng, idx.len(), config.decoder_samples).into_vec();
        pick.sort_unstable();
        idx = pick.into_iter().map(|k| idx[k]).collect();
    }
    audit_alignment(model, norm, buffer, &idx)?;
    let beta = config.beta_ft;
    let (before, _) = decoder_pass(model, buffer, &idx, norm, window, beta, false)?;
    let snapshot = model.decoder.clone();
    let mut out = DecoderUpdate {
        before,
        after: before,
        samples: idx.len(),
        lr: adam.lr,
        ..DecoderUpdate::default()
    };
    let per = idx.len().div_ceil(config.decoder_minibatches);
    for _ in 0..config.decoder_epochs {
        let mut order = idx.clone();
        order.shuffle(rng);
        for mb in order.chunks(per) {
            let (terms, grads) = decoder_pass(model, buffer, mb, norm, window, beta, true)?;
            let grads = grads.unwrap_or_default();
            let finite = terms.total.is_finite() && grads.iter().flatten().flatten().all(|g| g.is_finite());
            if !finite {
                model.decoder = snapshot;
                adam.lr *= 0.5;
                out.reverted = true;
                out.incident = Some(format!(
                    "non-finite decoder loss {} at step {}; decoder restored, lr halved to {}",
                    terms.total, out.steps, adam.lr
                ));
                return Ok(out);
            }
            let grad_refs: Vec<Option<&[f64]>> = grads.iter().map(|g| g.as_deref()).collect();
            let mut params = model.parameters_mut();
            let mut slices: Vec<&mut [f64]> = params.iter_mut().map(|t| t.data_mut()).collect();
            adam.step(&mut slices, &grad_refs);
            out.steps += 1;
        }
    }
    out.after = decoder_pass(model, buffer, &idx, norm, window, beta, false)?.0;
    Ok(out)
}

/// Hash of everything that must stay frozen during fine-tuning: encoder,
/// phase head, batch-norm affine parameters and running statistics.
pub fn frozen_fingerprint(model: &ScaeModel) -> u64 {
    let mut h = DefaultHasher::new();
    for (name, kind, t) in model.parameters() {
        if kind != ParamKind::DecoderConv {
            name.hash(&mut h);
            t.data().iter().for_each(|v| v.to_bits().hash(&mut h));
        }
    }
    for (name, bn) in model.bn_states() {
        name.hash(&mut h);
        bn.running_mean.iter().chain(&bn.running_var).for_each(|v| v.to_bits().hash(&mut h));
    }
    h.finish()
}

/// Decoded newest states (physical units) along `steps` phase-propagated steps
/// from `params`.
pub fn decoded_motion(model: &ScaeModel, norm: &Normalization, params: &LatentParams, steps: usize, dt: f64) -> Result<Vec<Vec<f64>>> {
    let mut state = EpisodeLatentState::from_params(params, None)?;
    let mut rows = Vec::with_capacity(steps);
    for _ in 0..steps {
        rows.push(synthesize_newest(model, norm, std::slice::from_ref(&state)).remove(0));
        state.step_phase(dt);
    }
    Ok(rows)
}

/// Feasibility and amplitude of the decoded targets of one motion.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TargetProbe {
    pub motion: String,
    pub violation_magnitude: f64,
    pub violation_rate: f64,
    /// Mean amplitude of the re-encoded decoded windows.
    pub amplitude: f64,
}

/// Evenly spaced buffer entries of motion `mi`, at most `samples`.
pub fn probe_entries(buffer: &LatentSampleBuffer, mi: usize, samples: usize) -> Vec<&LatentParams> {
    let all: Vec<&LatentParams> = buffer.of_motion(mi).map(|e| &e.params).collect();
    let n = samples.min(all.len());
    (0..n).map(|k| all[k * all.len() / n]).collect()
}

/// Probe decoded targets of each listed motion (all motions when empty):
/// inverse-dynamics violations of `steps`-step rollouts from evenly spaced
/// buffer entries, and the mean amplitude of `parameterize(encode(decode))`.
pub fn probe_decoded_targets(
    model: &ScaeModel,
    norm: &Normalization,
    buffer: &LatentSampleBuffer,
    sim: &SimConfig,
    motions: &[String],
    samples: usize,
    steps: usize,
) -> Result<Vec<TargetProbe>> {
    let names: Vec<String> = if motions.is_empty() { buffer.motions.clone() } else { motions.to_vec() };
    let n = sim.n_joints();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let mi = buffer
            .motions
            .iter()
            .position(|m| *m == name)
            .ok_or_else(|| Error::Validation(format!("probe motion {name:?} is not in the latent buffer")))?;
        let entries = probe_entries(buffer, mi, samples);
        if entries.is_empty() {
            return Err(Error::Validation(format!("latent buffer has no entries for {name:?}")));
        }
        let (mut mag, mut rate) = (0.0, 0.0);
        for p in &entries {
            let rows = decoded_motion(model, norm, p, steps, sim.dt)?;
            let (q, qd) = split_joint_states(&rows, n);
            let report = feasibility_probe(sim, &q, &qd);
            mag += report.violation_magnitude();
            rate += report.violation_rate();
        }
        let params: Vec<LatentParams> = entries.iter().map(|p| (*p).clone()).collect();
        let decoded = model.decode(&model.reconstruct(&params))?;
        let re = model.encode_params(&decoded)?;
        let amp: f64 = re.iter().flat_map(|p| p.amplitude.iter()).sum();
        let k = entries.len() as f64;
        out.push(TargetProbe {
            motion: name,
            violation_magnitude: mag / k,
            violation_rate: rate / k,
            amplitude: amp / (k * model.config.channels as f64),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BmiIterRecord {
    pub outer_iter: usize,
    /// Mean per-entry squared error between decoded targets and realized states.
    pub tracking_mse: f64,
    /// Mean `|z_bar - z_hat|` after the decoder update.
    pub latent_drift: f64,
    pub violation_rate: f64,
    pub reward: f64,
    pub violation_magnitude: f64,
    pub amplitude: f64,
    pub state_term: f64,
    pub latent_term: f64,
    pub decoder_lr: f64,
    pub reverted: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BmiReport {
    pub records: Vec<BmiIterRecord>,
    /// Probes before fine-tuning and after the last outer iteration.
    pub probe_before: Vec<TargetProbe>,
    pub probe_after: Vec<TargetProbe>,
    pub incidents: Vec<String>,
}

impl BmiReport {
    pub const HEADER: &'static str = "outer_iter,tracking_mse,latent_drift,violation_rate,reward";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.outer_iter, r.tracking_mse, r.latent_drift, r.violation_rate, r.reward
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

pub struct BmiOutcome {
    pub policy: ActorCritic,
    pub model: ScaeModel,
    pub report: BmiReport,
}

struct RolloutSummary {
    tracking_mse: f64,
    reward: f64,
}

fn random_rollout<R: Rng + ?Sized>(
    env: &mut TrackingEnv,
    model: &ScaeModel,
    steps: usize,
    rng: &mut R,
    buffer: Option<&mut RolloutBuffer>,
) -> Result<RolloutSummary> {
    let (mut mse, mut reward) = (0.0, 0.0);
    let mut pairs = Vec::new();
    for _ in 0..steps {
        let a = env.random_actions(rng);
        let out = env.step(model, &a)?;
        mse += out.sq_error.iter().sum::<f64>();
        reward += out.rewards.iter().sum::<f64>();
        pairs.extend(out.pairs);
    }
    if let Some(b) = buffer {
        b.extend(pairs);
    }
    let n = (steps * env.num_envs()) as f64;
    Ok(RolloutSummary {
        tracking_mse: mse / n,
        reward: reward / n,
    })
}

fn lower_level_rollout(
    trainer: &mut PolicyTrainer,
    model: &ScaeModel,
    config: &BmiConfig,
    rng: &mut ChaCha8Rng,
    buffer: Option<&mut RolloutBuffer>,
    update: bool,
) -> Result<RolloutSummary> {
    match config.lower_level {
        LowerLevel::Random => {
            let steps = trainer.config.steps_per_iter;
            random_rollout(&mut trainer.env, model, steps, rng, buffer)
        }
        LowerLevel::Ppo => {
            let roll = if update {
                trainer.iterate(model)?.1
            } else {
                trainer.collect(model)?
            };
            if let Some(b) = buffer {
                b.extend(roll.pairs);
            }
            Ok(RolloutSummary {
                tracking_mse: roll.tracking_mse,
                reward: roll.mean_reward,
            })
        }
    }
}

fn mean_of(probes: &[TargetProbe], f: impl Fn(&TargetProbe) -> f64) -> f64 {
    probes.iter().map(f).sum::<f64>() / probes.len().max(1) as f64
}

/// `K` outer iterations of: `inner_iters` rollouts (with PPO updates) filling
/// the buffer, then one decoder update. Row 0 of the report is a baseline
/// taken before any parameter changes.
pub fn run_bmi(mut trainer: PolicyTrainer, mut model: ScaeModel, config: &BmiConfig, seed: u64) -> Result<BmiOutcome> {
    config.validate()?;
    let frozen = frozen_fingerprint(&model);
    let norm = trainer.env.normalization.clone();
    let pz = trainer.env.buffer.clone();
    let sim = trainer.env.sim.clone();
    let probe = |m: &ScaeModel| {
        probe_decoded_targets(m, &norm, &pz, &sim, &config.probe_motions, config.probe_samples, config.probe_steps)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(config.decoder_lr, 0.0);
    let mut report = BmiReport::default();
    trainer.env.record_pairs = true;

    let mut buffer = RolloutBuffer::new();
    let base = lower_level_rollout(&mut trainer, &model, config, &mut rng, Some(&mut buffer), false)?;
    let window = config.full_segment.then_some(model.config.window);
    let idx = buffer.eligible(window);
    let drift = if idx.is_empty() {
        f64::NAN
    } else {
        decoder_pass(&model, &buffer, &idx, &norm, window, config.beta_ft, false)?.0.drift
    };
    report.probe_before = probe(&model)?;
    report.records.push(BmiIterRecord {
        outer_iter: 0,
        tracking_mse: base.tracking_mse,
        latent_drift: drift,
        violation_rate: mean_of(&report.probe_before, |p| p.violation_rate),
        reward: base.reward,
        violation_magnitude: mean_of(&report.probe_before, |p| p.violation_magnitude),
        amplitude: mean_of(&report.probe_before, |p| p.amplitude),
        state_term: f64::NAN,
        latent_term: f64::NAN,
        decoder_lr: adam.lr,
        reverted: false,
    });
    report.probe_after = report.probe_before.clone();

    for k in 1..=config.outer_iters {
        buffer.clear();
        let (mut mse, mut reward) = (0.0, 0.0);
        for _ in 0..config.inner_iters {
            let s = lower_level_rollout(&mut trainer, &model, config, &mut rng, Some(&mut buffer), true)?;
            mse += s.tracking_mse;
            reward += s.reward;
        }
        let upd = update_decoder(&mut model, &buffer, &norm, config, &mut adam, &mut rng)?;
        if let Some(msg) = &upd.incident {
            report.incidents.push(format!("outer iteration {k}: {msg}"));
        }
        if frozen_fingerprint(&model) != frozen {
            return Err(Error::Contract(format!("frozen parameters changed during outer iteration {k}")));
        }
        report.probe_after = probe(&model)?;
        let inner = config.inner_iters as f64;
        report.records.push(BmiIterRecord {
            outer_iter: k,
            tracking_mse: mse / inner,
            latent_drift: upd.after.drift,
            violation_rate: mean_of(&report.probe_after, |p| p.violation_rate),
            reward: reward / inner,
            violation_magnitude: mean_of(&report.probe_after, |p| p.violation_magnitude),
            amplitude: mean_of(&report.probe_after, |p| p.amplitude),
            state_term: upd.after.state,
            latent_term: upd.after.latent,
            decoder_lr: upd.lr,
            reverted: upd.reverted,
        });
    }
    report.incidents.extend(trainer.env.incidents.iter().cloned());
    Ok(BmiOutcome {
        policy: trainer.policy,
        model,
        report,
    })
}

#[cfg(test)]
mod tests;
