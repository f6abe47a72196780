use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{window_refs, MotionDataset};
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::model::{reconstruct_latent, LatentParams, ScaeModel};

/// Latent parameters of one training segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentSample {
    pub motion: usize,
    pub trajectory: usize,
    pub start: usize,
    pub params: LatentParams,
}

/// Eval-mode latent parameters of every training segment, tagged by motion.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatentSampleBuffer {
    pub motions: Vec<String>,
    pub entries: Vec<LatentSample>,
}

impl LatentSampleBuffer {
    pub fn collect(model: &ScaeModel, dataset: &MotionDataset, stride: usize) -> Result<Self> {
        let h = model.config.window;
        let d = dataset.dim();
        let refs = window_refs(dataset, h, 0, stride)?;
        let normalized = dataset.normalized();
        let mut entries = Vec::with_capacity(refs.len());
        for chunk in refs.chunks(64) {
            let mut x = vec![0.0; chunk.len() * d * h];
            for (r, out) in chunk.iter().zip(x.chunks_exact_mut(d * h)) {
                normalized[r.motion][r.trajectory].window_into(r.start, h, out);
            }
            let params = model.encode_params(&Tensor::new(vec![chunk.len(), d, h], x)?)?;
            entries.extend(chunk.iter().zip(params).map(|(r, params)| LatentSample {
                motion: r.motion,
                trajectory: r.trajectory,
                start: r.start,
                params,
            }));
        }
        Ok(Self {
            motions: dataset.motion_names().into_iter().map(String::from).collect(),
            entries,
        })
    }

    pub fn of_motion(&self, motion: usize) -> impl Iterator<Item = &LatentSample> {
        self.entries.iter().filter(move |e| e.motion == motion)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let json = serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

/// Mean number of active channels per segment of each motion.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MotionSparsity {
    pub motion: String,
    pub mean_active: f64,
    pub segments: usize,
}

/// A channel is active when its amplitude exceeds `threshold` times the
/// largest amplitude of the same segment.
pub fn active_channels(params: &LatentParams, threshold: f64) -> usize {
    let max = params.amplitude.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return 0;
    }
    params.amplitude.iter().filter(|a| **a > threshold * max).count()
}

/// Mean active-channel count per motion at the 10% relative threshold.
pub fn amplitude_sparsity(buffer: &LatentSampleBuffer) -> Vec<MotionSparsity> {
    buffer
        .motions
        .iter()
        .enumerate()
        .map(|(mi, name)| {
            let counts: Vec<usize> = buffer.of_motion(mi).map(|e| active_channels(&e.params, 0.1)).collect();
            let n = counts.len();
            MotionSparsity {
                motion: name.clone(),
                mean_active: if n == 0 { 0.0 } else { counts.iter().sum::<usize>() as f64 / n as f64 },
                segments: n,
            }
        })
        .collect()
}

/// Projection of the rows onto their two leading principal components.
/// Each component's sign is fixed so its largest-magnitude entry is positive.
pub fn pca_2d(rows: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = rows.len();
    let dim = rows.first().map_or(0, Vec::len);
    if n < 2 || dim < 2 {
        return Err(Error::Validation(format!("pca needs at least 2 rows of dimension >= 2, got {n} x {dim}")));
    }
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Validation("pca rows differ in length".into()));
    }
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let x = DMatrix::from_fn(n, dim, |i, j| rows[i][j] - mean[j]);
    let cov = x.transpose() * &x / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
    let mut comps = Vec::with_capacity(2);
    for &k in &order[..2] {
        let mut v = eig.eigenvectors.column(k).into_owned();
        let lead = v.iter().copied().fold(0.0_f64, |acc, e| if e.abs() > acc.abs() { e } else { acc });
        if lead < 0.0 {
            v.neg_mut();
        }
        comps.push(v);
    }
    Ok((0..n)
        .map(|i| {
            let row = x.row(i);
            [row.dot(&comps[0].transpose()), row.dot(&comps[1].transpose())]
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ManifoldRow {
    pub x: f64,
    pub y: f64,
    pub motion: String,
    pub trajectory: usize,
    pub t: usize,
}

/// 2-D PCA embedding of the reconstructed latent trajectories `z_hat`.
pub fn export_manifold(buffer: &LatentSampleBuffer, grid: &[f64]) -> Result<Vec<ManifoldRow>> {
    let rows: Vec<Vec<f64>> = buffer.entries.iter().map(|e| reconstruct_latent(&e.params, grid)).collect();
    let xy = pca_2d(&rows)?;
    Ok(buffer
        .entries
        .iter()
        .zip(xy)
        .map(|(e, [x, y])| ManifoldRow {
            x,
            y,
            motion: buffer.motions[e.motion].clone(),
            trajectory: e.trajectory,
            t: e.start,
        })
        .collect())
}
