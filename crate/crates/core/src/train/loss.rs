use crate::data::{Trajectory, WindowRef};
use crate::diff::{NodeId, Tensor};
use crate::error::{Error, Result};
use crate::model::{Bound, Mode, ScaeModel, Trainable};

/// Input segments and their multi-step targets for a batch of windows.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    pub batch: usize,
    /// Prediction steps `N`; targets hold `N + 1` segments per window.
    pub horizon: usize,
    /// `[B, d, H]` segments at `t`.
    pub inputs: Tensor,
    /// `[(N + 1) B, d, H]`, step-major: row `i * B + b` is window `b` at `t + i`.
    pub targets: Tensor,
}

impl WindowBatch {
    /// Gather normalized windows. Every window must fit inside its trajectory.
    pub fn gather(trajectories: &[Vec<Trajectory>], refs: &[WindowRef], h: usize, horizon: usize) -> Result<Self> {
        let b = refs.len();
        let d = trajectories
            .first()
            .and_then(|m| m.first())
            .map(Trajectory::dim)
            .ok_or_else(|| Error::Validation("no trajectories to gather from".into()))?;
        let mut targets = vec![0.0; (horizon + 1) * b * d * h];
        for (bi, r) in refs.iter().enumerate() {
            let traj = trajectories
                .get(r.motion)
                .and_then(|m| m.get(r.trajectory))
                .ok_or_else(|| Error::Contract(format!("window {r:?} names a missing trajectory")))?;
            if r.start + h + horizon > traj.len() {
                return Err(Error::Contract(format!(
                    "window at {} with {} steps crosses the end of a {}-step trajectory",
                    r.start,
                    h + horizon,
                    traj.len()
                )));
            }
            for i in 0..=horizon {
                let at = (i * b + bi) * d * h;
                traj.window_into(r.start + i, h, &mut targets[at..at + d * h]);
            }
        }
        let inputs = targets[..b * d * h].to_vec();
        Ok(Self {
            batch: b,
            horizon,
            inputs: Tensor::new(vec![b, d, h], inputs)?,
            targets: Tensor::new(vec![(horizon + 1) * b, d, h], targets)?,
        })
    }
}

/// Loss nodes of one multi-step pass.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    /// Objective: motion term plus `beta` times the latent term.
    pub total: NodeId,
    /// `sum_i alpha^i mean((tau_hat' - tau)^2)`.
    pub motion: NodeId,
    /// `sum_i alpha^i mean((z_bar' - z_hat')^2)`.
    pub latent: NodeId,
}

/// Per-step weights `alpha^i / (B * entries)` for step-major rows.
fn step_weights(alpha: f64, horizon: usize, batch: usize, entries: usize) -> Vec<f64> {
    let mut w = Vec::with_capacity((horizon + 1) * batch);
    for i in 0..=horizon {
        let wi = alpha.powi(i as i32) / (batch * entries) as f64;
        w.extend(std::iter::repeat(wi).take(batch));
    }
    w
}

/// Sum of the per-step weights `sum_i alpha^i`.
pub fn decay_sum(alpha: f64, horizon: usize) -> f64 {
    (0..=horizon).map(|i| alpha.powi(i as i32)).sum()
}

/// Build the multi-step prediction and both loss terms. When `beta == 0` the
/// total is the motion node itself, so the latent branch carries no gradient.
/// Only the encoder pass over real data records batch-norm statistics.
pub fn build_losses(bound: &mut Bound, batch: &WindowBatch, alpha: f64, beta: f64) -> Result<LossNodes> {
    let b = batch.batch;
    let n = batch.horizon;
    let shape = batch.inputs.shape();
    let (d, h) = (shape[1], shape[2]);
    let x = bound.graph.constant(batch.inputs.clone());
    let target = bound.graph.constant(batch.targets.clone());
    let z = bound.encode(x, true)?;
    let p = bound.parameterize(z)?;
    let steps: Vec<usize> = (0..=n).collect();
    let adv = bound.advance(&p, &steps)?;
    let zhat = bound.reconstruct(&adv)?;
    let decoded = bound.decode(zhat, true)?;
    let motion = bound
        .graph
        .weighted_sq_error(decoded, target, step_weights(alpha, n, b, d * h))?;
    let zbar_raw = bound.encode(decoded, false)?;
    let pbar = bound.parameterize(zbar_raw)?;
    let zbar = bound.reconstruct(&pbar)?;
    let c = bound.graph.value(zhat).shape()[1];
    let latent = bound
        .graph
        .weighted_sq_error(zbar, zhat, step_weights(alpha, n, b, c * h))?;
    let total = if beta == 0.0 {
        motion
    } else {
        bound.graph.add_scaled(motion, latent, beta)?
    };
    Ok(LossNodes { total, motion, latent })
}

fn check_horizon(model: &ScaeModel, batch: &WindowBatch) -> Result<()> {
    if batch.horizon > model.config.horizon {
        return Err(Error::Contract(format!(
            "batch horizon {} exceeds model horizon {}",
            batch.horizon, model.config.horizon
        )));
    }
    Ok(())
}

/// Multi-step motion reconstruction loss.
pub fn fld_loss(model: &ScaeModel, batch: &WindowBatch, mode: Mode) -> Result<f64> {
    check_horizon(model, batch)?;
    let mut bound = model.bind(Trainable::NONE, mode);
    let nodes = build_losses(&mut bound, batch, model.config.alpha, 0.0)?;
    Ok(bound.graph.value(nodes.motion).data()[0])
}

/// Motion loss plus `beta` times the latent reconstruction loss of the
/// re-encoded predictions.
pub fn scae_loss(model: &ScaeModel, batch: &WindowBatch, mode: Mode, beta: f64) -> Result<f64> {
    check_horizon(model, batch)?;
    let mut bound = model.bind(Trainable::NONE, mode);
    let nodes = build_losses(&mut bound, batch, model.config.alpha, beta)?;
    let g = &mut bound.graph;
    // always through add_scaled so beta = 0 exercises the same expression
    let total = g.add_scaled(nodes.motion, nodes.latent, beta)?;
    Ok(g.value(total).data()[0])
}
