//! Periodic autoencoder: convolutional encoder, spectral parametrization with
//! an atan2 phase head, sinusoidal latent reconstruction and convolutional
//! decoder, plus multi-step phase propagation.

mod checkpoint;

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::kernels::{conv1d_forward, elu};
use crate::diff::{wrap_phase, BnMode, Graph, NodeId, Tensor};
use crate::error::{Error, Result};

pub use checkpoint::{load_scae, save_scae, scae_container, scae_from_container, ScaeArtifact, SCAE_KIND};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScaeConfig {
    /// Latent channels `c`.
    pub channels: usize,
    /// Window length `H` (odd).
    pub window: usize,
    pub dt: f64,
    /// Multi-step prediction length `N`.
    pub horizon: usize,
    pub alpha: f64,
    pub beta: f64,
    pub hidden: usize,
    pub kernel: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Batch norm and ELU on the last decoder stage too.
    pub decoder_output_activation: bool,
}

impl Default for ScaeConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            window: 51,
            dt: 0.02,
            horizon: 50,
            alpha: 1.0,
            beta: 1.0,
            hidden: 64,
            kernel: 51,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            decoder_output_activation: false,
        }
    }
}

impl ScaeConfig {
    /// Reduced width, kernel and horizon that train in minutes on one core.
    pub fn desk() -> Self {
        Self {
            hidden: 16,
            kernel: 9,
            horizon: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.channels == 0 || self.hidden == 0 {
            return bad("channels and hidden width must be positive".into());
        }
        if self.window < 3 || self.window % 2 == 0 {
            return bad(format!("window {} must be odd and at least 3", self.window));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return bad(format!("kernel {} must be odd", self.kernel));
        }
        if !(self.dt > 0.0) {
            return bad(format!("dt {} must be positive", self.dt));
        }
        if !(self.alpha > 0.0) || !(self.beta >= 0.0) {
            return bad(format!("alpha {} must be positive and beta {} non-negative", self.alpha, self.beta));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) || !(self.bn_eps > 0.0) {
            return bad("batch-norm momentum must lie in (0, 1] and eps be positive".into());
        }
        Ok(())
    }

    /// Symmetric time grid `[-(H-1)/2 dt, .., (H-1)/2 dt]`.
    pub fn time_grid(&self) -> Vec<f64> {
        let half = (self.window - 1) as f64 / 2.0;
        (0..self.window).map(|n| (n as f64 - half) * self.dt).collect()
    }
}

/// Per-channel phase (cycles), frequency (Hz), amplitude and offset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentParams {
    pub phase: Vec<f64>,
    pub frequency: Vec<f64>,
    pub amplitude: Vec<f64>,
    pub offset: Vec<f64>,
}

impl LatentParams {
    pub fn channels(&self) -> usize {
        self.phase.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.phase.len();
        if self.frequency.len() != c || self.amplitude.len() != c || self.offset.len() != c {
            return Err(Error::shape(
                "latent params",
                [c; 4],
                [self.phase.len(), self.frequency.len(), self.amplitude.len(), self.offset.len()],
            ));
        }
        let all = self.phase.iter().chain(&self.frequency).chain(&self.amplitude).chain(&self.offset);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::Validation("latent params must be finite".into()));
        }
        if self.amplitude.iter().chain(&self.frequency).any(|v| *v < 0.0) {
            return Err(Error::Validation("latent amplitude and frequency must be non-negative".into()));
        }
        if self.phase.iter().any(|p| !(-0.5..0.5).contains(p)) {
            return Err(Error::Validation("latent phase must lie in [-0.5, 0.5)".into()));
        }
        Ok(())
    }

    /// Phase advanced by `steps * f * dt`, wrapped.
    pub fn advanced(&self, steps: f64, dt: f64) -> LatentParams {
        LatentParams {
            phase: self
                .phase
                .iter()
                .zip(&self.frequency)
                .map(|(p, f)| wrap_phase(p + steps * f * dt))
                .collect(),
            ..self.clone()
        }
    }
}

/// `a sin(2 pi (f t + phase)) + b` over `grid`, one row per channel. The
/// phase is wrapped first so whole-cycle shifts reproduce the same samples.
pub fn reconstruct_latent(params: &LatentParams, grid: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(params.channels() * grid.len());
    for ch in 0..params.channels() {
        let (p, f, a, b) = (params.phase[ch], params.frequency[ch], params.amplitude[ch], params.offset[ch]);
        let p = wrap_phase(p);
        out.extend(grid.iter().map(|t| a * (TAU * (f * t + p)).sin() + b));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormState {
    fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(vec![channels], 1.0),
            beta: Tensor::zeros(vec![channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    fn inv_std(&self, eps: f64) -> Vec<f64> {
        self.running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvStage {
    /// `[c_out, c_in, K]`.
    pub weight: Tensor,
    pub bias: Tensor,
    /// Batch norm followed by ELU when present.
    pub bn: Option<BatchNormState>,
}

impl ConvStage {
    fn init(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, k: usize, normalized: bool) -> Self {
        let bound = 1.0 / ((c_in * k) as f64).sqrt();
        Self {
            weight: Tensor::from_fn(vec![c_out, c_in, k], |_| rng.gen_range(-bound..bound)),
            bias: Tensor::from_fn(vec![c_out], |_| rng.gen_range(-bound..bound)),
            bn: normalized.then(|| BatchNormState::new(c_out)),
        }
    }

    fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    fn k(&self) -> usize {
        self.weight.shape()[2]
    }
}

/// Role of a parameter tensor, used for freezing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    EncoderConv,
    PhaseHead,
    DecoderConv,
    BnAffine,
}

/// Which parameter kinds receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub encoder: bool,
    pub phase_head: bool,
    pub decoder: bool,
    pub bn_affine: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable {
        encoder: true,
        phase_head: true,
        decoder: true,
        bn_affine: true,
    };
    pub const NONE: Trainable = Trainable {
        encoder: false,
        phase_head: false,
        decoder: false,
        bn_affine: false,
    };
    /// Decoder convolutions only.
    pub const DECODER_CONV: Trainable = Trainable {
        encoder: false,
        phase_head: false,
        decoder: true,
        bn_affine: false,
    };

    pub fn allows(&self, kind: ParamKind) -> bool {
        match kind {
            ParamKind::EncoderConv => self.encoder,
            ParamKind::PhaseHead => self.phase_head,
            ParamKind::DecoderConv => self.decoder,
            ParamKind::BnAffine => self.bn_affine,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaeModel {
    pub config: ScaeConfig,
    /// State dimension `d`.
    pub dim: usize,
    pub encoder: Vec<ConvStage>,
    /// `[c, 2, H]`.
    pub phase_weight: Tensor,
    /// `[c, 2]`.
    pub phase_bias: Tensor,
    pub decoder: Vec<ConvStage>,
}

impl ScaeModel {
    pub fn new(config: ScaeConfig, dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if dim < 2 {
            return Err(Error::Validation(format!("state dimension {dim} is below 2")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, h, k, w) = (config.channels, config.window, config.kernel, config.hidden);
        let encoder = vec![
            ConvStage::init(&mut rng, dim, w, k, true),
            ConvStage::init(&mut rng, w, w, k, true),
            ConvStage::init(&mut rng, w, c, k, true),
        ];
        let bound = 1.0 / (h as f64).sqrt();
        let phase_weight = Tensor::from_fn(vec![c, 2, h], |_| rng.gen_range(-bound..bound));
        let phase_bias = Tensor::from_fn(vec![c, 2], |_| rng.gen_range(-bound..bound));
        let decoder = vec![
            ConvStage::init(&mut rng, c, w, k, true),
            ConvStage::init(&mut rng, w, w, k, true),
            ConvStage::init(&mut rng, w, dim, k, config.decoder_output_activation),
        ];
        Ok(Self {
            config,
            dim,
            encoder,
            phase_weight,
            phase_bias,
            decoder,
        })
    }

    pub fn time_grid(&self) -> Vec<f64> {
        self.config.time_grid()
    }

    /// Every parameter tensor with its name and kind, in a fixed order.
    pub fn parameters(&self) -> Vec<(String, ParamKind, &Tensor)> {
        let mut out = Vec::new();
        push_stages("encoder", &self.encoder, ParamKind::EncoderConv, &mut out);
        out.push(("phase.weight".into(), ParamKind::PhaseHead, &self.phase_weight));
        out.push(("phase.bias".into(), ParamKind::PhaseHead, &self.phase_bias));
        push_stages("decoder", &self.decoder, ParamKind::DecoderConv, &mut out);
        out
    }

    /// Mutable parameter tensors in the order of [`ScaeModel::parameters`].
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for s in self.encoder.iter_mut() {
            out.push(&mut s.weight);
            out.push(&mut s.bias);
            if let Some(bn) = s.bn.as_mut() {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out.push(&mut self.phase_weight);
        out.push(&mut self.phase_bias);
        for s in self.decoder.iter_mut() {
            out.push(&mut s.weight);
            out.push(&mut s.bias);
            if let Some(bn) = s.bn.as_mut() {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    /// Batch-norm states in stage order: encoder stages, then decoder stages.
    pub fn bn_states(&self) -> Vec<(String, &BatchNormState)> {
        let enc = self.encoder.iter().enumerate().map(|(i, s)| (format!("encoder.{i}.bn"), s));
        let dec = self.decoder.iter().enumerate().map(|(i, s)| (format!("decoder.{i}.bn"), s));
        enc.chain(dec)
            .filter_map(|(n, s)| s.bn.as_ref().map(|bn| (n, bn)))
            .collect()
    }

    fn stage_mut(&mut self, slot: StageSlot) -> &mut ConvStage {
        match slot {
            StageSlot::Encoder(i) => &mut self.encoder[i],
            StageSlot::Decoder(i) => &mut self.decoder[i],
        }
    }

    /// Momentum update of the running statistics, in order. Variance is unbiased.
    pub fn update_running_stats(&mut self, stats: &[BatchStatistics]) {
        let momentum = self.config.bn_momentum;
        for st in stats {
            let n = st.count as f64;
            let correction = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let bn = self.stage_mut(st.slot).bn.as_mut().expect("recorded stage has batch norm");
            for ch in 0..st.mean.len() {
                bn.running_mean[ch] = (1.0 - momentum) * bn.running_mean[ch] + momentum * st.mean[ch];
                bn.running_var[ch] = (1.0 - momentum) * bn.running_var[ch] + momentum * st.var[ch] * correction;
            }
        }
    }

    /// Place every parameter in a fresh graph as a leaf.
    pub fn bind(&self, trainable: Trainable, mode: Mode) -> Bound<'_> {
        let mut graph = Graph::new();
        let mut ids = Vec::new();
        for (_, kind, t) in self.parameters() {
            ids.push(graph.leaf(t.clone(), trainable.allows(kind)));
        }
        let mut cursor = 0;
        let encoder = stage_ids(&self.encoder, &ids, &mut cursor);
        let phase = (ids[cursor], ids[cursor + 1]);
        cursor += 2;
        let decoder = stage_ids(&self.decoder, &ids, &mut cursor);
        Bound {
            model: self,
            graph,
            params: ids,
            encoder,
            phase,
            decoder,
            mode,
            bn_records: Vec::new(),
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let s = x.shape();
        if s.len() != 3 || s[1] != self.dim || s[2] != self.config.window {
            return Err(Error::shape("trajectory segment", [0, self.dim, self.config.window], s));
        }
        Ok(s[0])
    }

    /// `[B, d, H] -> [B, c, H]`, eval mode.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut b = self.bind(Trainable::NONE, Mode::Eval);
        let xi = b.graph.constant(x.clone());
        let z = b.encode(xi, false)?;
        Ok(b.graph.value(z).clone())
    }

    /// Spectral parameters and phase of `[B, c, H]` embeddings.
    pub fn parameterize(&self, z: &Tensor) -> Result<Vec<LatentParams>> {
        let c = self.config.channels;
        if z.shape().len() != 3 || z.shape()[1] != c || z.shape()[2] != self.config.window {
            return Err(Error::shape("latent embedding", [0, c, self.config.window], z.shape()));
        }
        let mut b = self.bind(Trainable::NONE, Mode::Eval);
        let zi = b.graph.constant(z.clone());
        let p = b.parameterize(zi)?;
        Ok(p.to_params(&b.graph))
    }

    /// `[B, c, H]` from latent parameters.
    pub fn reconstruct(&self, params: &[LatentParams]) -> Tensor {
        let grid = self.time_grid();
        let data = params.iter().flat_map(|p| reconstruct_latent(p, &grid)).collect();
        Tensor::new(vec![params.len(), self.config.channels, grid.len()], data).expect("shape matches")
    }

    /// `[B, c, H] -> [B, d, H]`, eval mode.
    pub fn decode(&self, zhat: &Tensor) -> Result<Tensor> {
        let c = self.config.channels;
        if zhat.shape().len() != 3 || zhat.shape()[1] != c || zhat.shape()[2] != self.config.window {
            return Err(Error::shape("latent embedding", [0, c, self.config.window], zhat.shape()));
        }
        let mut b = self.bind(Trainable::NONE, Mode::Eval);
        let zi = b.graph.constant(zhat.clone());
        let out = b.decode(zi, false)?;
        Ok(b.graph.value(out).clone())
    }

    /// Encode once, advance phase by `i f dt`, reconstruct and decode.
    /// Returns `(z_hat', tau_hat')`, each batched.
    pub fn predict_forward(&self, x: &Tensor, i: usize) -> Result<(Tensor, Tensor)> {
        if i > self.config.horizon {
            return Err(Error::Contract(format!(
                "prediction step {i} exceeds horizon {}",
                self.config.horizon
            )));
        }
        self.check_input(x)?;
        let mut b = self.bind(Trainable::NONE, Mode::Eval);
        let xi = b.graph.constant(x.clone());
        let z = b.encode(xi, false)?;
        let p = b.parameterize(z)?;
        let p = b.advance(&p, &[i])?;
        let zhat = b.reconstruct(&p)?;
        let out = b.decode(zhat, false)?;
        Ok((b.graph.value(zhat).clone(), b.graph.value(out).clone()))
    }

    /// Latent parameters of `[B, d, H]` segments, eval mode.
    pub fn encode_params(&self, x: &Tensor) -> Result<Vec<LatentParams>> {
        self.check_input(x)?;
        let mut b = self.bind(Trainable::NONE, Mode::Eval);
        let xi = b.graph.constant(x.clone());
        let z = b.encode(xi, false)?;
        let p = b.parameterize(z)?;
        Ok(p.to_params(&b.graph))
    }

    /// Receptive-field column ranges of the decoder for the newest output
    /// column: the first input column each stage must see.
    fn decoder_column_starts(&self) -> Vec<usize> {
        let h = self.config.window;
        let mut lo = h - 1;
        let mut starts = vec![lo];
        for s in self.decoder.iter().rev() {
            lo = lo.saturating_sub((s.k() - 1) / 2);
            starts.push(lo);
        }
        starts.reverse();
        starts
    }

    /// Newest decoded column (normalized units) for each parameter set, in
    /// eval mode, computing only the columns inside its receptive field.
    pub fn decode_newest(&self, params: &[LatentParams]) -> Vec<Vec<f64>> {
        let h = self.config.window;
        let starts = self.decoder_column_starts();
        let grid = self.time_grid();
        let batch = params.len();
        let c = self.config.channels;
        let lo = starts[0];
        let mut width = h - lo;
        let mut x = Vec::with_capacity(batch * c * width);
        for p in params {
            for ch in 0..c {
                let (ph, f, a, b) = (p.phase[ch], p.frequency[ch], p.amplitude[ch], p.offset[ch]);
                let ph = wrap_phase(ph);
                x.extend(grid[lo..].iter().map(|t| a * (TAU * (f * t + ph)).sin() + b));
            }
        }
        for (si, stage) in self.decoder.iter().enumerate() {
            let out_lo = starts[si + 1] - starts[si];
            let mut y = conv1d_forward(
                &x,
                batch,
                stage.c_in(),
                width,
                stage.weight.data(),
                stage.bias.data(),
                stage.c_out(),
                stage.k(),
                out_lo,
            );
            width -= out_lo;
            if let Some(bn) = &stage.bn {
                let inv = bn.inv_std(self.config.bn_eps);
                for (row, v) in y.chunks_mut(width).enumerate() {
                    let ch = row % stage.c_out();
                    let (g, bt, m) = (bn.gamma.data()[ch], bn.beta.data()[ch], bn.running_mean[ch]);
                    for e in v {
                        *e = elu(g * ((*e - m) * inv[ch]) + bt);
                    }
                }
            }
            x = y;
        }
        x.chunks(self.dim).map(<[f64]>::to_vec).collect()
    }
}

fn stage_ids(stages: &[ConvStage], ids: &[NodeId], cursor: &mut usize) -> Vec<StageIds> {
    stages
        .iter()
        .map(|s| {
            let (w, b) = (ids[*cursor], ids[*cursor + 1]);
            *cursor += 2;
            let bn = s.bn.as_ref().map(|_| {
                *cursor += 2;
                (ids[*cursor - 2], ids[*cursor - 1])
            });
            StageIds { w, b, bn }
        })
        .collect()
}

fn push_stages<'a>(
    prefix: &str,
    stages: &'a [ConvStage],
    conv: ParamKind,
    out: &mut Vec<(String, ParamKind, &'a Tensor)>,
) {
    for (i, s) in stages.iter().enumerate() {
        out.push((format!("{prefix}.{i}.weight"), conv, &s.weight));
        out.push((format!("{prefix}.{i}.bias"), conv, &s.bias));
        if let Some(bn) = &s.bn {
            out.push((format!("{prefix}.{i}.bn.gamma"), ParamKind::BnAffine, &bn.gamma));
            out.push((format!("{prefix}.{i}.bn.beta"), ParamKind::BnAffine, &bn.beta));
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum StageSlot {
    Encoder(usize),
    Decoder(usize),
}

#[derive(Clone, Copy, Debug)]
struct StageIds {
    w: NodeId,
    b: NodeId,
    bn: Option<(NodeId, NodeId)>,
}

/// Batch statistics of one train-mode batch-norm node.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStatistics {
    slot: StageSlot,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Clone, Copy, Debug)]
struct BnRecord {
    slot: StageSlot,
    node: NodeId,
    /// Elements per channel that produced the statistics.
    count: usize,
}

/// Latent parameter nodes, each `[B, c]`.
#[derive(Clone, Copy, Debug)]
pub struct LatentNodes {
    pub phase: NodeId,
    pub frequency: NodeId,
    pub amplitude: NodeId,
    pub offset: NodeId,
}

impl LatentNodes {
    pub fn to_params(&self, graph: &Graph) -> Vec<LatentParams> {
        let c = graph.value(self.phase).shape()[1];
        let rows = |id: NodeId| -> Vec<Vec<f64>> { graph.value(id).data().chunks(c).map(<[f64]>::to_vec).collect() };
        let (p, f, a, b) = (rows(self.phase), rows(self.frequency), rows(self.amplitude), rows(self.offset));
        (0..p.len())
            .map(|i| LatentParams {
                phase: p[i].iter().map(|v| wrap_phase(*v)).collect(),
                frequency: f[i].clone(),
                amplitude: a[i].clone(),
                offset: b[i].clone(),
            })
            .collect()
    }
}

/// A model bound into an operator graph, with builders for each pipeline stage.
pub struct Bound<'m> {
    model: &'m ScaeModel,
    pub graph: Graph,
    /// Parameter leaves in the order of [`ScaeModel::parameters`].
    pub params: Vec<NodeId>,
    encoder: Vec<StageIds>,
    phase: (NodeId, NodeId),
    decoder: Vec<StageIds>,
    mode: Mode,
    bn_records: Vec<BnRecord>,
}

impl Bound<'_> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Statistics of every recorded train-mode batch-norm node, in build order.
    pub fn batch_statistics(&self) -> Vec<BatchStatistics> {
        self.bn_records
            .iter()
            .filter_map(|r| {
                self.graph.batch_stats(r.node).map(|(m, v)| BatchStatistics {
                    slot: r.slot,
                    mean: m.to_vec(),
                    var: v.to_vec(),
                    count: r.count,
                })
            })
            .collect()
    }

    fn stages(&mut self, x: NodeId, decoder: bool, record: bool) -> Result<NodeId> {
        let (ids, states) = if decoder {
            (&self.decoder, &self.model.decoder)
        } else {
            (&self.encoder, &self.model.encoder)
        };
        let ids = ids.clone();
        let eps = self.model.config.bn_eps;
        let mut h = x;
        for (i, (sid, stage)) in ids.iter().zip(states).enumerate() {
            h = self.graph.conv1d_same(h, sid.w, sid.b)?;
            if let (Some((g, bt)), Some(bn)) = (sid.bn, &stage.bn) {
                let mode = match self.mode {
                    Mode::Train => BnMode::Train,
                    Mode::Eval => BnMode::Eval {
                        mean: bn.running_mean.clone(),
                        var: bn.running_var.clone(),
                    },
                };
                h = self.graph.batch_norm(h, g, bt, mode, eps)?;
                if record && self.mode == Mode::Train {
                    let s = self.graph.value(h).shape();
                    self.bn_records.push(BnRecord {
                        slot: if decoder { StageSlot::Decoder(i) } else { StageSlot::Encoder(i) },
                        node: h,
                        count: s[0] * s[2],
                    });
                }
                h = self.graph.elu(h);
            }
        }
        Ok(h)
    }

    /// `[B, d, H] -> [B, c, H]`. Train-mode batch statistics feed the running
    /// averages only when `record` is set.
    pub fn encode(&mut self, x: NodeId, record: bool) -> Result<NodeId> {
        self.stages(x, false, record)
    }

    /// `[B, c, H] -> [B, d, H]`.
    pub fn decode(&mut self, zhat: NodeId, record: bool) -> Result<NodeId> {
        self.stages(zhat, true, record)
    }

    pub fn parameterize(&mut self, z: NodeId) -> Result<LatentNodes> {
        let spectrum = self.graph.real_dft(z)?;
        let offset = self.graph.dft_offset(spectrum)?;
        let amplitude = self.graph.dft_amplitude(spectrum)?;
        let frequency = self.graph.dft_frequency(spectrum, self.model.config.dt)?;
        let pair = self.graph.channel_linear(z, self.phase.0, self.phase.1)?;
        let phase = self.graph.atan2_phase(pair)?;
        Ok(LatentNodes {
            phase,
            frequency,
            amplitude,
            offset,
        })
    }

    /// Stack copies of `p` with phase advanced by `i f dt` for each `i` in
    /// `steps`, step-major (row `k * B + b` holds step `steps[k]`).
    pub fn advance(&mut self, p: &LatentNodes, steps: &[usize]) -> Result<LatentNodes> {
        let dt = self.model.config.dt;
        let shifts = steps.iter().map(|&i| i as f64 * dt).collect();
        let phase = self.graph.phase_advance(p.phase, p.frequency, shifts)?;
        let n = steps.len();
        Ok(LatentNodes {
            phase,
            frequency: self.graph.repeat(p.frequency, n),
            amplitude: self.graph.repeat(p.amplitude, n),
            offset: self.graph.repeat(p.offset, n),
        })
    }

    pub fn reconstruct(&mut self, p: &LatentNodes) -> Result<NodeId> {
        self.graph
            .sinusoid(p.phase, p.frequency, p.amplitude, p.offset, self.model.time_grid())
    }
}
