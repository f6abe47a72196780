//! Operator graph with analytic reverse-mode gradients.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and every input id precedes its consumer. Each node
//! keeps the operator description needed to recompute its value, which the
//! finite-difference checker uses to replay the forward pass after
//! perturbing a leaf.

use std::f64::consts::TAU;
use std::sync::Arc;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm behavior for one application of the layer.
#[derive(Clone, Debug)]
pub enum BnMode {
    /// Normalize with batch statistics (population variance).
    Train,
    /// Normalize with fixed running statistics.
    Eval { mean: Vec<f64>, var: Vec<f64> },
}

#[derive(Debug)]
pub(crate) struct DftTables {
    h: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv1dSame {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BnMode,
        eps: f64,
    },
    Elu {
        input: NodeId,
    },
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    ChannelLinear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Atan2Phase {
        input: NodeId,
    },
    RealDft {
        input: NodeId,
        tables: Arc<DftTables>,
    },
    DftOffset {
        dft: NodeId,
    },
    DftAmplitude {
        dft: NodeId,
    },
    DftFrequency {
        dft: NodeId,
        dt: f64,
    },
    PhaseAdvance {
        phase: NodeId,
        freq: NodeId,
        shifts: Vec<f64>,
    },
    Repeat {
        input: NodeId,
        times: usize,
    },
    Sinusoid {
        phase: NodeId,
        freq: NodeId,
        amp: NodeId,
        offset: NodeId,
        grid: Vec<f64>,
    },
    SelectColumn {
        input: NodeId,
        col: usize,
    },
    WeightedSqError {
        a: NodeId,
        b: NodeId,
        row_weights: Vec<f64>,
    },
    AddScaled {
        a: NodeId,
        b: NodeId,
        scale: f64,
    },
}

#[derive(Clone, Debug, Default)]
enum Saved {
    #[default]
    None,
    BatchStats {
        mean: Vec<f64>,
        var: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    saved: Saved,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn split_rows(shape: &[usize]) -> (usize, usize) {
    let rows = shape.first().copied().unwrap_or(1);
    let inner: usize = shape.iter().skip(1).product();
    (rows, inner)
}

/// View a `[B, C]` or `[B, C, L]` shape as `(B, C, L)`.
fn bcl(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape {
        [b, c] => Some((*b, *c, 1)),
        [b, c, l] => Some((*b, *c, *l)),
        _ => None,
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf)
    }

    /// Ids of every leaf that requires a gradient, in creation order.
    pub fn trainable_leaves(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf) && n.requires_grad)
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    /// Batch mean and population variance recorded by a train-mode batch-norm node.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id.0].saved {
            Saved::BatchStats { mean, var, .. } => Some((mean, var)),
            Saved::None => None,
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            saved: Saved::None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    fn push(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let (value, saved) = eval(&op, &self.nodes)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            saved,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Same-length cross-correlation; input `[B, c_in, H]`, weight `[c_out, c_in, K]`, K odd.
    pub fn conv1d_same(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        if xs.len() != 3 {
            return Err(Error::shape("conv1d input", "[B, c_in, H]", xs));
        }
        if ws.len() != 3 || ws[1] != xs[1] || ws[2] % 2 == 0 {
            return Err(Error::shape(
                "conv1d weight",
                format!("[c_out, {}, odd K]", xs[1]),
                ws,
            ));
        }
        if bs != [ws[0]] {
            return Err(Error::shape("conv1d bias", [ws[0]], bs));
        }
        self.push(Op::Conv1dSame { input, weight, bias }, &[input, weight, bias])
    }

    /// Per-channel normalization over batch and time axes of `[B, C]` or `[B, C, L]`.
    pub fn batch_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BnMode,
        eps: f64,
    ) -> Result<NodeId> {
        let xs = self.value(input).shape().to_vec();
        let Some((b, c, _)) = bcl(&xs) else {
            return Err(Error::shape("batch_norm input", "[B, C] or [B, C, L]", xs));
        };
        if self.value(gamma).shape() != [c] {
            return Err(Error::shape("batch_norm gamma", [c], self.value(gamma).shape()));
        }
        if self.value(beta).shape() != [c] {
            return Err(Error::shape("batch_norm beta", [c], self.value(beta).shape()));
        }
        match &mode {
            BnMode::Train if b < 2 => {
                return Err(Error::Contract(
                    "batch_norm in train mode needs a batch of at least 2".into(),
                ))
            }
            BnMode::Eval { mean, var } if mean.len() != c || var.len() != c => {
                return Err(Error::shape("batch_norm running stats", c, mean.len()));
            }
            _ => {}
        }
        self.push(
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mode,
                eps,
            },
            &[input, gamma, beta],
        )
    }

    pub fn elu(&mut self, input: NodeId) -> NodeId {
        self.push(Op::Elu { input }, &[input])
            .expect("elu is total")
    }

    /// Affine map over the last axis: `[.., n] -> [.., m]` with weight `[m, n]`.
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        let n = *xs.last().ok_or_else(|| Error::shape("linear input", "[.., n]", &xs))?;
        if ws.len() != 2 || ws[1] != n {
            return Err(Error::shape("linear weight", format!("[m, {n}]"), ws));
        }
        if self.value(bias).shape() != [ws[0]] {
            return Err(Error::shape("linear bias", [ws[0]], self.value(bias).shape()));
        }
        self.push(Op::Linear { input, weight, bias }, &[input, weight, bias])
    }

    /// Independent affine map per channel: `[B, c, H] -> [B, c, m]`,
    /// weight `[c, m, H]`, bias `[c, m]`.
    pub fn channel_linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        if xs.len() != 3 {
            return Err(Error::shape("channel_linear input", "[B, c, H]", xs));
        }
        if ws.len() != 3 || ws[0] != xs[1] || ws[2] != xs[2] {
            return Err(Error::shape(
                "channel_linear weight",
                format!("[{}, m, {}]", xs[1], xs[2]),
                ws,
            ));
        }
        if self.value(bias).shape() != [ws[0], ws[1]] {
            return Err(Error::shape(
                "channel_linear bias",
                [ws[0], ws[1]],
                self.value(bias).shape(),
            ));
        }
        self.push(Op::ChannelLinear { input, weight, bias }, &[input, weight, bias])
    }

    /// `[.., 2]` pairs `(y, x)` to phase in cycles, `atan2(y, x) / 2pi` wrapped to `[-0.5, 0.5)`.
    pub fn atan2_phase(&mut self, input: NodeId) -> Result<NodeId> {
        let xs = self.value(input).shape();
        if xs.last() != Some(&2) {
            return Err(Error::shape("atan2_phase input", "[.., 2]", xs));
        }
        self.push(Op::Atan2Phase { input }, &[input])
    }

    /// Unnormalized real DFT over the last axis: `[.., H] -> [.., 2, H/2 + 1]`
    /// holding real parts then imaginary parts.
    pub fn real_dft(&mut self, input: NodeId) -> Result<NodeId> {
        let h = *self
            .value(input)
            .shape()
            .last()
            .ok_or_else(|| Error::shape("real_dft input", "[.., H]", "[]"))?;
        let (cos, sin) = kernels::dft_tables(h);
        let tables = Arc::new(DftTables { h, cos, sin });
        self.push(Op::RealDft { input, tables }, &[input])
    }

    fn check_dft(&self, dft: NodeId) -> Result<()> {
        let s = self.value(dft).shape();
        if s.len() < 3 || s[s.len() - 2] != 2 {
            return Err(Error::shape("spectrum", "[.., 2, bins]", s));
        }
        Ok(())
    }

    /// Offset `Re(X_0) / H` from a real DFT node.
    pub fn dft_offset(&mut self, dft: NodeId) -> Result<NodeId> {
        self.check_dft(dft)?;
        self.push(Op::DftOffset { dft }, &[dft])
    }

    /// Amplitude `(2 / H) sqrt(sum_{k>=1} |X_k|^2)`.
    pub fn dft_amplitude(&mut self, dft: NodeId) -> Result<NodeId> {
        self.check_dft(dft)?;
        self.push(Op::DftAmplitude { dft }, &[dft])
    }

    /// Power-weighted mean frequency over bins `k >= 1` with `nu_k = k / (H dt)`;
    /// zero when the AC spectrum vanishes.
    pub fn dft_frequency(&mut self, dft: NodeId, dt: f64) -> Result<NodeId> {
        self.check_dft(dft)?;
        self.push(Op::DftFrequency { dft, dt }, &[dft])
    }

    /// Stack `shifts.len()` copies of `phase + shift * freq` along the batch axis,
    /// replica-major: row `r * B + b`.
    pub fn phase_advance(&mut self, phase: NodeId, freq: NodeId, shifts: Vec<f64>) -> Result<NodeId> {
        if self.value(phase).shape() != self.value(freq).shape() {
            return Err(Error::shape(
                "phase_advance freq",
                self.value(phase).shape(),
                self.value(freq).shape(),
            ));
        }
        self.push(Op::PhaseAdvance { phase, freq, shifts }, &[phase, freq])
    }

    /// Tile along the batch axis, replica-major.
    pub fn repeat(&mut self, input: NodeId, times: usize) -> NodeId {
        self.push(Op::Repeat { input, times }, &[input])
            .expect("repeat is total")
    }

    /// `amp * sin(2pi (freq * t + phase)) + offset` over the time grid:
    /// `[B, c]` parameters to `[B, c, grid.len()]`.
    pub fn sinusoid(
        &mut self,
        phase: NodeId,
        freq: NodeId,
        amp: NodeId,
        offset: NodeId,
        grid: Vec<f64>,
    ) -> Result<NodeId> {
        let s = self.value(phase).shape().to_vec();
        for (name, id) in [("sinusoid freq", freq), ("sinusoid amp", amp), ("sinusoid offset", offset)] {
            if self.value(id).shape() != s.as_slice() {
                return Err(Error::shape(name, &s, self.value(id).shape()));
            }
        }
        if s.len() != 2 {
            return Err(Error::shape("sinusoid phase", "[B, c]", s));
        }
        self.push(
            Op::Sinusoid {
                phase,
                freq,
                amp,
                offset,
                grid,
            },
            &[phase, freq, amp, offset],
        )
    }

    /// `[B, d, H] -> [B, d]` taking column `col`.
    pub fn select_column(&mut self, input: NodeId, col: usize) -> Result<NodeId> {
        let s = self.value(input).shape();
        if s.len() != 3 || col >= s[2] {
            return Err(Error::shape("select_column input", format!("[B, d, >{col}]"), s));
        }
        self.push(Op::SelectColumn { input, col }, &[input])
    }

    /// Scalar `sum_r w_r * sum_e (a[r, e] - b[r, e])^2` over leading-axis rows.
    pub fn weighted_sq_error(&mut self, a: NodeId, b: NodeId, row_weights: Vec<f64>) -> Result<NodeId> {
        let sa = self.value(a).shape();
        if sa != self.value(b).shape() {
            return Err(Error::shape("squared error rhs", sa, self.value(b).shape()));
        }
        if sa.first() != Some(&row_weights.len()) {
            return Err(Error::shape("squared error row weights", sa.first(), row_weights.len()));
        }
        self.push(Op::WeightedSqError { a, b, row_weights }, &[a, b])
    }

    /// `a + scale * b` for equal shapes.
    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, scale: f64) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape("add_scaled rhs", self.value(a).shape(), self.value(b).shape()));
        }
        self.push(Op::AddScaled { a, b, scale }, &[a, b])
    }

    /// Overwrite one entry of a leaf. Call [`Graph::recompute`] afterwards.
    pub fn set_leaf_entry(&mut self, id: NodeId, index: usize, value: f64) {
        assert!(self.is_leaf(id), "set_leaf_entry on a non-leaf node");
        self.nodes[id.0].value.data_mut()[index] = value;
    }

    /// Replay every operator in order from the current leaf values.
    pub fn recompute(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let (value, saved) = eval(&node.op, before)?;
            node.value = value;
            node.saved = saved;
        }
        Ok(())
    }

    /// Reverse-mode sweep from a scalar node.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let Some(dout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad && !matches!(node.op, Op::Leaf) {
                backprop(node, &self.nodes, &dout, &mut grads);
            }
            grads[i] = Some(dout);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId) -> Option<&'a mut Vec<f64>> {
    if !nodes[id.0].requires_grad {
        return None;
    }
    let len = nodes[id.0].value.len();
    Some(grads[id.0].get_or_insert_with(|| vec![0.0; len]))
}

fn eval(op: &Op, nodes: &[Node]) -> Result<(Tensor, Saved)> {
    let v = |id: NodeId| &nodes[id.0].value;
    let out = match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::Conv1dSame { input, weight, bias } => {
            let (x, w) = (v(*input), v(*weight));
            let (b, c_in, h) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (c_out, k) = (w.shape()[0], w.shape()[2]);
            let data = kernels::conv1d_forward(x.data(), b, c_in, h, w.data(), v(*bias).data(), c_out, k, 0);
            Tensor::new(vec![b, c_out, h], data)?
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            mode,
            eps,
        } => {
            let x = v(*input);
            let (b, c, l) = bcl(x.shape()).expect("validated at construction");
            let mut data = x.data().to_vec();
            let (mean, var) = match mode {
                BnMode::Train => kernels::channel_stats(&data, b, c, l),
                BnMode::Eval { mean, var } => (mean.clone(), var.clone()),
            };
            let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
            kernels::channel_affine(&mut data, b, c, l, &mean, &inv_std, v(*gamma).data(), v(*beta).data());
            let t = Tensor::new(x.shape().to_vec(), data)?;
            return Ok((t, Saved::BatchStats { mean, var, inv_std }));
        }
        Op::Elu { input } => {
            let x = v(*input);
            Tensor::new(x.shape().to_vec(), x.data().iter().map(|&e| kernels::elu(e)).collect())?
        }
        Op::Linear { input, weight, bias } => {
            let (x, w, bs) = (v(*input), v(*weight), v(*bias));
            let (m, n) = (w.shape()[0], w.shape()[1]);
            let rows = x.len() / n;
            let mut out = Vec::with_capacity(rows * m);
            for _ in 0..rows {
                out.extend_from_slice(bs.data());
            }
            kernels::gemm(rows, n, m, 1.0, x.data(), n, 1, w.data(), 1, n, 1.0, &mut out, m, 1);
            let mut shape = x.shape().to_vec();
            *shape.last_mut().expect("non-empty") = m;
            Tensor::new(shape, out)?
        }
        Op::ChannelLinear { input, weight, bias } => {
            let (x, w, bs) = (v(*input), v(*weight), v(*bias));
            let (b, c, h) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let m = w.shape()[1];
            let mut out = vec![0.0; b * c * m];
            for bi in 0..b {
                for ch in 0..c {
                    let xr = &x.data()[(bi * c + ch) * h..(bi * c + ch + 1) * h];
                    for j in 0..m {
                        let wr = &w.data()[(ch * m + j) * h..(ch * m + j + 1) * h];
                        let dot: f64 = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
                        out[(bi * c + ch) * m + j] = dot + bs.data()[ch * m + j];
                    }
                }
            }
            Tensor::new(vec![b, c, m], out)?
        }
        Op::Atan2Phase { input } => {
            let x = v(*input);
            let mut out = Vec::with_capacity(x.len() / 2);
            for (row, pair) in x.data().chunks(2).enumerate() {
                let (y, xx) = (pair[0], pair[1]);
                if y == 0.0 && xx == 0.0 {
                    return Err(Error::DegeneratePhase { row });
                }
                out.push(wrap_phase(y.atan2(xx) / TAU));
            }
            let s = x.shape();
            Tensor::new(s[..s.len() - 1].to_vec(), out)?
        }
        Op::RealDft { input, tables } => {
            let x = v(*input);
            let h = tables.h;
            let bins = h / 2 + 1;
            let rows = x.len() / h;
            let mut out = vec![0.0; rows * 2 * bins];
            for r in 0..rows {
                let xr = &x.data()[r * h..(r + 1) * h];
                for k in 0..bins {
                    let (mut re, mut im) = (0.0, 0.0);
                    let cr = &tables.cos[k * h..(k + 1) * h];
                    let sr = &tables.sin[k * h..(k + 1) * h];
                    for n in 0..h {
                        re += xr[n] * cr[n];
                        im -= xr[n] * sr[n];
                    }
                    out[r * 2 * bins + k] = re;
                    out[r * 2 * bins + bins + k] = im;
                }
            }
            let mut shape = x.shape().to_vec();
            shape.pop();
            shape.extend([2, bins]);
            Tensor::new(shape, out)?
        }
        Op::DftOffset { dft } => {
            let x = v(*dft);
            let (shape, bins, h) = spectrum_dims(x.shape());
            let out = x.data().chunks(2 * bins).map(|r| r[0] / h as f64).collect();
            Tensor::new(shape, out)?
        }
        Op::DftAmplitude { dft } => {
            let x = v(*dft);
            let (shape, bins, h) = spectrum_dims(x.shape());
            let out = x
                .data()
                .chunks(2 * bins)
                .map(|r| 2.0 / h as f64 * ac_power(r, bins).sqrt())
                .collect();
            Tensor::new(shape, out)?
        }
        Op::DftFrequency { dft, dt } => {
            let x = v(*dft);
            let (shape, bins, h) = spectrum_dims(x.shape());
            let out = x
                .data()
                .chunks(2 * bins)
                .map(|r| {
                    let p = ac_power(r, bins);
                    if !negligible_ac(p, r[0]) {
                        (1..bins)
                            .map(|k| bin_freq(k, h, *dt) * (r[k] * r[k] + r[bins + k] * r[bins + k]))
                            .sum::<f64>()
                            / p
                    } else {
                        0.0
                    }
                })
                .collect();
            Tensor::new(shape, out)?
        }
        Op::PhaseAdvance { phase, freq, shifts } => {
            let (p, f) = (v(*phase), v(*freq));
            let mut out = Vec::with_capacity(p.len() * shifts.len());
            for s in shifts {
                out.extend(p.data().iter().zip(f.data()).map(|(a, b)| a + s * b));
            }
            let mut shape = p.shape().to_vec();
            shape[0] *= shifts.len();
            Tensor::new(shape, out)?
        }
        Op::Repeat { input, times } => {
            let x = v(*input);
            let mut out = Vec::with_capacity(x.len() * times);
            for _ in 0..*times {
                out.extend_from_slice(x.data());
            }
            let mut shape = x.shape().to_vec();
            shape[0] *= times;
            Tensor::new(shape, out)?
        }
        Op::Sinusoid {
            phase,
            freq,
            amp,
            offset,
            grid,
        } => {
            let (p, f, a, o) = (v(*phase), v(*freq), v(*amp), v(*offset));
            let h = grid.len();
            let mut out = Vec::with_capacity(p.len() * h);
            for i in 0..p.len() {
                let (pi, fi, ai, oi) = (p.data()[i], f.data()[i], a.data()[i], o.data()[i]);
                let pi = wrap_phase(pi);
                out.extend(grid.iter().map(|t| ai * (TAU * (fi * t + pi)).sin() + oi));
            }
            let mut shape = p.shape().to_vec();
            shape.push(h);
            Tensor::new(shape, out)?
        }
        Op::SelectColumn { input, col } => {
            let x = v(*input);
            let h = x.shape()[2];
            let out = x.data().chunks(h).map(|r| r[*col]).collect();
            Tensor::new(x.shape()[..2].to_vec(), out)?
        }
        Op::WeightedSqError { a, b, row_weights } => {
            let (xa, xb) = (v(*a), v(*b));
            let (_, inner) = split_rows(xa.shape());
            let mut total = 0.0;
            for (r, w) in row_weights.iter().enumerate() {
                let ra = &xa.data()[r * inner..(r + 1) * inner];
                let rb = &xb.data()[r * inner..(r + 1) * inner];
                let s: f64 = ra.iter().zip(rb).map(|(p, q)| (p - q) * (p - q)).sum();
                total += w * s;
            }
            Tensor::scalar(total)
        }
        Op::AddScaled { a, b, scale } => {
            let (xa, xb) = (v(*a), v(*b));
            let out = xa.data().iter().zip(xb.data()).map(|(p, q)| p + scale * q).collect();
            Tensor::new(xa.shape().to_vec(), out)?
        }
    };
    Ok((out, Saved::None))
}

/// AC power at rounding level relative to the DC bin, as left by a constant
/// signal; the frequency is then defined as zero.
fn negligible_ac(power: f64, dc: f64) -> bool {
    power <= 1e-24 * (1.0 + dc * dc)
}

/// Wrap a phase in cycles to `[-0.5, 0.5)`.
pub fn wrap_phase(p: f64) -> f64 {
    let w = p - (p + 0.5).floor();
    if w >= 0.5 {
        w - 1.0
    } else {
        w
    }
}

fn spectrum_dims(shape: &[usize]) -> (Vec<usize>, usize, usize) {
    let bins = shape[shape.len() - 1];
    // odd H is the supported configuration; 2 * (bins - 1) + 1 recovers it
    let h = 2 * (bins - 1) + 1;
    (shape[..shape.len() - 2].to_vec(), bins, h)
}

fn ac_power(row: &[f64], bins: usize) -> f64 {
    (1..bins).map(|k| row[k] * row[k] + row[bins + k] * row[bins + k]).sum()
}

fn bin_freq(k: usize, h: usize, dt: f64) -> f64 {
    k as f64 / (h as f64 * dt)
}

fn backprop(node: &Node, nodes: &[Node], dout: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let v = |id: NodeId| &nodes[id.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::Conv1dSame { input, weight, bias } => {
            let (x, w) = (v(*input), v(*weight));
            let (b, c_in, h) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (c_out, k) = (w.shape()[0], w.shape()[2]);
            let mut dx = accumulate(grads, nodes, *input).map(std::mem::take);
            let mut dw = accumulate(grads, nodes, *weight).map(std::mem::take);
            let mut db = accumulate(grads, nodes, *bias).map(std::mem::take);
            kernels::conv1d_backward(
                x.data(),
                b,
                c_in,
                h,
                w.data(),
                c_out,
                k,
                dout,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
            );
            for (id, g) in [(*input, dx), (*weight, dw), (*bias, db)] {
                if let Some(g) = g {
                    grads[id.0] = Some(g);
                }
            }
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            mode,
            ..
        } => {
            let x = v(*input);
            let g = v(*gamma).data();
            let (b, c, l) = bcl(x.shape()).expect("validated");
            let Saved::BatchStats { mean, inv_std, .. } = &node.saved else {
                unreachable!("batch norm always saves stats")
            };
            let n = (b * l) as f64;
            let mut sum_dy = vec![0.0; c];
            let mut sum_dy_xhat = vec![0.0; c];
            for bi in 0..b {
                for ch in 0..c {
                    let off = (bi * c + ch) * l;
                    for j in 0..l {
                        let xhat = (x.data()[off + j] - mean[ch]) * inv_std[ch];
                        sum_dy[ch] += dout[off + j];
                        sum_dy_xhat[ch] += dout[off + j] * xhat;
                    }
                }
            }
            if let Some(dg) = accumulate(grads, nodes, *gamma) {
                for ch in 0..c {
                    dg[ch] += sum_dy_xhat[ch];
                }
            }
            if let Some(dbt) = accumulate(grads, nodes, *beta) {
                for ch in 0..c {
                    dbt[ch] += sum_dy[ch];
                }
            }
            if let Some(dx) = accumulate(grads, nodes, *input) {
                let train = matches!(mode, BnMode::Train);
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * l;
                        let scale = g[ch] * inv_std[ch];
                        for j in 0..l {
                            let dy = dout[off + j];
                            dx[off + j] += if train {
                                let xhat = (x.data()[off + j] - mean[ch]) * inv_std[ch];
                                scale * (dy - sum_dy[ch] / n - xhat * sum_dy_xhat[ch] / n)
                            } else {
                                scale * dy
                            };
                        }
                    }
                }
            }
        }
        Op::Elu { input } => {
            let x = v(*input).data();
            let y = node.value.data();
            if let Some(dx) = accumulate(grads, nodes, *input) {
                for i in 0..x.len() {
                    dx[i] += dout[i] * if x[i] > 0.0 { 1.0 } else { y[i] + 1.0 };
                }
            }
        }
        Op::Linear { input, weight, bias } => {
            let (x, w) = (v(*input), v(*weight));
            let (m, n) = (w.shape()[0], w.shape()[1]);
            let rows = x.len() / n;
            if let Some(dx) = accumulate(grads, nodes, *input) {
                kernels::gemm(rows, m, n, 1.0, dout, m, 1, w.data(), n, 1, 1.0, dx, n, 1);
            }
            if let Some(dw) = accumulate(grads, nodes, *weight) {
                kernels::gemm(m, rows, n, 1.0, dout, 1, m, x.data(), n, 1, 1.0, dw, n, 1);
            }
            if let Some(db) = accumulate(grads, nodes, *bias) {
                for r in dout.chunks(m) {
                    for (d, g) in db.iter_mut().zip(r) {
                        *d += g;
                    }
                }
            }
        }
        Op::ChannelLinear { input, weight, bias } => {
            let (x, w) = (v(*input), v(*weight));
            let (b, c, h) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let m = w.shape()[1];
            if let Some(dx) = accumulate(grads, nodes, *input) {
                for bi in 0..b {
                    for ch in 0..c {
                        for j in 0..m {
                            let g = dout[(bi * c + ch) * m + j];
                            let wr = &w.data()[(ch * m + j) * h..(ch * m + j + 1) * h];
                            let dr = &mut dx[(bi * c + ch) * h..(bi * c + ch + 1) * h];
                            for (d, wv) in dr.iter_mut().zip(wr) {
                                *d += g * wv;
                            }
                        }
                    }
                }
            }
            if let Some(dw) = accumulate(grads, nodes, *weight) {
                for bi in 0..b {
                    for ch in 0..c {
                        let xr = &x.data()[(bi * c + ch) * h..(bi * c + ch + 1) * h];
                        for j in 0..m {
                            let g = dout[(bi * c + ch) * m + j];
                            let dr = &mut dw[(ch * m + j) * h..(ch * m + j + 1) * h];
                            for (d, xv) in dr.iter_mut().zip(xr) {
                                *d += g * xv;
                            }
                        }
                    }
                }
            }
            if let Some(db) = accumulate(grads, nodes, *bias) {
                for (i, g) in dout.iter().enumerate() {
                    db[i % (c * m)] += g;
                }
            }
        }
        Op::Atan2Phase { input } => {
            let x = v(*input).data();
            if let Some(dx) = accumulate(grads, nodes, *input) {
                for (r, g) in dout.iter().enumerate() {
                    let (y, xx) = (x[2 * r], x[2 * r + 1]);
                    let r2 = TAU * (xx * xx + y * y);
                    dx[2 * r] += g * xx / r2;
                    dx[2 * r + 1] -= g * y / r2;
                }
            }
        }
        Op::RealDft { input, tables } => {
            let h = tables.h;
            let bins = h / 2 + 1;
            if let Some(dx) = accumulate(grads, nodes, *input) {
                for (r, dr) in dx.chunks_mut(h).enumerate() {
                    let g = &dout[r * 2 * bins..(r + 1) * 2 * bins];
                    for k in 0..bins {
                        let (gre, gim) = (g[k], g[bins + k]);
                        let cr = &tables.cos[k * h..(k + 1) * h];
                        let sr = &tables.sin[k * h..(k + 1) * h];
                        for n in 0..h {
                            dr[n] += gre * cr[n] - gim * sr[n];
                        }
                    }
                }
            }
        }
        Op::DftOffset { dft } => {
            let (_, bins, h) = spectrum_dims(v(*dft).shape());
            if let Some(dx) = accumulate(grads, nodes, *dft) {
                for (r, g) in dout.iter().enumerate() {
                    dx[r * 2 * bins] += g / h as f64;
                }
            }
        }
        Op::DftAmplitude { dft } => {
            let x = v(*dft).data();
            let (_, bins, h) = spectrum_dims(v(*dft).shape());
            if let Some(dx) = accumulate(grads, nodes, *dft) {
                for (r, g) in dout.iter().enumerate() {
                    let row = &x[r * 2 * bins..(r + 1) * 2 * bins];
                    let p = ac_power(row, bins);
                    if p <= 0.0 {
                        continue;
                    }
                    let s = g * 2.0 / h as f64 / p.sqrt();
                    for k in 1..bins {
                        dx[r * 2 * bins + k] += s * row[k];
                        dx[r * 2 * bins + bins + k] += s * row[bins + k];
                    }
                }
            }
        }
        Op::DftFrequency { dft, dt } => {
            let x = v(*dft).data();
            let (_, bins, h) = spectrum_dims(v(*dft).shape());
            let f = node.value.data();
            if let Some(dx) = accumulate(grads, nodes, *dft) {
                for (r, g) in dout.iter().enumerate() {
                    let row = &x[r * 2 * bins..(r + 1) * 2 * bins];
                    let p = ac_power(row, bins);
                    if negligible_ac(p, row[0]) {
                        continue;
                    }
                    for k in 1..bins {
                        let s = g * 2.0 * (bin_freq(k, h, *dt) - f[r]) / p;
                        dx[r * 2 * bins + k] += s * row[k];
                        dx[r * 2 * bins + bins + k] += s * row[bins + k];
                    }
                }
            }
        }
        Op::PhaseAdvance { phase, freq, shifts } => {
            let n = v(*phase).len();
            if let Some(dp) = accumulate(grads, nodes, *phase) {
                for r in 0..shifts.len() {
                    for i in 0..n {
                        dp[i] += dout[r * n + i];
                    }
                }
            }
            if let Some(df) = accumulate(grads, nodes, *freq) {
                for (r, s) in shifts.iter().enumerate() {
                    for i in 0..n {
                        df[i] += s * dout[r * n + i];
                    }
                }
            }
        }
        Op::Repeat { input, .. } => {
            let n = v(*input).len();
            if let Some(dx) = accumulate(grads, nodes, *input) {
                for (i, g) in dout.iter().enumerate() {
                    dx[i % n] += g;
                }
            }
        }
        Op::Sinusoid {
            phase,
            freq,
            amp,
            offset,
            grid,
        } => {
            let (p, f, a) = (v(*phase).data(), v(*freq).data(), v(*amp).data());
            let h = grid.len();
            let n = p.len();
            let mut dp = vec![0.0; n];
            let mut df = vec![0.0; n];
            let mut da = vec![0.0; n];
            let mut doff = vec![0.0; n];
            for i in 0..n {
                let g = &dout[i * h..(i + 1) * h];
                let pi = wrap_phase(p[i]);
                for (t, gi) in grid.iter().zip(g) {
                    let th = TAU * (f[i] * t + pi);
                    let (s, c) = th.sin_cos();
                    da[i] += gi * s;
                    doff[i] += gi;
                    let dth = gi * a[i] * c * TAU;
                    dp[i] += dth;
                    df[i] += dth * t;
                }
            }
            for (id, g) in [(*phase, dp), (*freq, df), (*amp, da), (*offset, doff)] {
                if let Some(acc) = accumulate(grads, nodes, id) {
                    for (x, y) in acc.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
        }
        Op::SelectColumn { input, col } => {
            let h = v(*input).shape()[2];
            if let Some(dx) = accumulate(grads, nodes, *input) {
                for (r, g) in dout.iter().enumerate() {
                    dx[r * h + col] += g;
                }
            }
        }
        Op::WeightedSqError { a, b, row_weights } => {
            let (xa, xb) = (v(*a), v(*b));
            let (_, inner) = split_rows(xa.shape());
            let g = dout[0];
            let diff: Vec<f64> = xa
                .data()
                .iter()
                .zip(xb.data())
                .enumerate()
                .map(|(i, (p, q))| 2.0 * g * row_weights[i / inner] * (p - q))
                .collect();
            if let Some(da) = accumulate(grads, nodes, *a) {
                for (x, d) in da.iter_mut().zip(&diff) {
                    *x += d;
                }
            }
            if let Some(db) = accumulate(grads, nodes, *b) {
                for (x, d) in db.iter_mut().zip(&diff) {
                    *x -= d;
                }
            }
        }
        Op::AddScaled { a, b, scale } => {
            if let Some(da) = accumulate(grads, nodes, *a) {
                for (x, g) in da.iter_mut().zip(dout) {
                    *x += g;
                }
            }
            if let Some(db) = accumulate(grads, nodes, *b) {
                for (x, g) in db.iter_mut().zip(dout) {
                    *x += scale * g;
                }
            }
        }
    }
}
