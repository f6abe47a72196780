use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::layout::StateLayout;
use crate::error::{Error, Result};

pub const DEFAULT_DT: f64 = 0.02;
pub const MANIFEST_FILE: &str = "manifest.txt";
const FORMAT_NAME: &str = "bmi-motion";
const FORMAT_VERSION: u32 = 1;

/// Row-major `[len, dim]` state sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    dim: usize,
    data: Vec<f64>,
}

impl Trajectory {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::Validation(format!(
                "trajectory buffer of {} values is not a multiple of dimension {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(i) = rows.iter().position(|r| r.len() != dim) {
            return Err(Error::Parse {
                file: String::new(),
                row: i,
                message: format!("row width {} differs from {dim}", rows[i].len()),
            });
        }
        Self::new(dim, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim)
    }

    /// Copy steps `start..start + h` transposed into `out[dim, h]`.
    pub fn window_into(&self, start: usize, h: usize, out: &mut [f64]) {
        for j in 0..h {
            let row = self.row(start + j);
            for (i, v) in row.iter().enumerate() {
                out[i * h + j] = *v;
            }
        }
    }

    pub fn select_columns(&self, columns: &[usize]) -> Trajectory {
        let data = self
            .rows()
            .flat_map(|r| columns.iter().map(move |&c| r[c]))
            .collect();
        Trajectory {
            dim: columns.len(),
            data,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Motion {
    pub name: String,
    pub trajectories: Vec<Trajectory>,
    /// Physical feasibility under the toy simulator, when known.
    pub feasible: Option<bool>,
}

/// Per-dimension z-scoring statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Degenerate dimensions below this std are left unscaled.
    pub const MIN_STD: f64 = 1e-8;

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn fit<'a>(dim: usize, trajectories: impl IntoIterator<Item = &'a Trajectory>) -> Self {
        let mut n = 0usize;
        let mut mean = vec![0.0; dim];
        let mut m2 = vec![0.0; dim];
        // Welford over every step of every trajectory
        for traj in trajectories {
            for row in traj.rows() {
                n += 1;
                for i in 0..dim {
                    let delta = row[i] - mean[i];
                    mean[i] += delta / n as f64;
                    m2[i] += delta * (row[i] - mean[i]);
                }
            }
        }
        let std = m2
            .iter()
            .map(|v| {
                let s = if n > 0 { (v / n as f64).sqrt() } else { 0.0 };
                if s > Self::MIN_STD {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize_row(&self, row: &mut [f64]) {
        for (i, v) in row.iter_mut().enumerate() {
            *v = (*v - self.mean[i]) / self.std[i];
        }
    }

    pub fn denormalize_row(&self, row: &mut [f64]) {
        for (i, v) in row.iter_mut().enumerate() {
            *v = *v * self.std[i] + self.mean[i];
        }
    }

    pub fn normalize(&self, traj: &Trajectory) -> Trajectory {
        let mut out = traj.clone();
        for row in out.data.chunks_mut(out.dim) {
            self.normalize_row(row);
        }
        out
    }

    /// Undo normalization on a `[dim, h]` column-major window.
    pub fn denormalize_window(&self, window: &mut [f64], h: usize) {
        for (i, chunk) in window.chunks_mut(h).enumerate() {
            for v in chunk {
                *v = *v * self.std[i] + self.mean[i];
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionDataset {
    pub layout: StateLayout,
    pub dt: f64,
    pub motions: Vec<Motion>,
    pub normalization: Normalization,
}

impl MotionDataset {
    /// Validate shapes and fit normalization over all trajectories.
    pub fn new(layout: StateLayout, dt: f64, motions: Vec<Motion>, horizon: usize) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::Validation(format!("dt must be positive, got {dt}")));
        }
        if motions.is_empty() {
            return Err(Error::Validation("dataset has no motions".into()));
        }
        let d = layout.dim();
        for m in &motions {
            if m.trajectories.is_empty() {
                return Err(Error::Validation(format!("motion {} has no trajectories", m.name)));
            }
            for t in &m.trajectories {
                if t.dim() != d {
                    return Err(Error::shape("trajectory", [d], [t.dim()]));
                }
                if t.len() < horizon {
                    return Err(Error::TrajectoryTooShort {
                        len: t.len(),
                        required: horizon,
                    });
                }
                if let Some(i) = t.data().iter().position(|v| !v.is_finite()) {
                    return Err(Error::Validation(format!(
                        "motion {} has a non-finite value at flat index {i}",
                        m.name
                    )));
                }
            }
        }
        let normalization = Normalization::fit(d, motions.iter().flat_map(|m| &m.trajectories));
        Ok(Self {
            layout,
            dt,
            motions,
            normalization,
        })
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn motion(&self, name: &str) -> Option<&Motion> {
        self.motions.iter().find(|m| m.name == name)
    }

    pub fn motion_names(&self) -> Vec<&str> {
        self.motions.iter().map(|m| m.name.as_str()).collect()
    }

    /// Restrict every trajectory to the named layout slices and refit normalization.
    pub fn select(&self, names: &[&str]) -> Result<MotionDataset> {
        let (layout, columns) = self.layout.select(names)?;
        let motions = self
            .motions
            .iter()
            .map(|m| Motion {
                name: m.name.clone(),
                trajectories: m.trajectories.iter().map(|t| t.select_columns(&columns)).collect(),
                feasible: m.feasible,
            })
            .collect();
        MotionDataset::new(layout, self.dt, motions, 0)
    }

    pub fn min_len(&self) -> usize {
        self.motions
            .iter()
            .flat_map(|m| &m.trajectories)
            .map(Trajectory::len)
            .min()
            .unwrap_or(0)
    }

    /// All trajectories normalized with the dataset statistics, per motion.
    pub fn normalized(&self) -> Vec<Vec<Trajectory>> {
        self.motions
            .iter()
            .map(|m| m.trajectories.iter().map(|t| self.normalization.normalize(t)).collect())
            .collect()
    }
}

/// A `dim x h` window, columns ordered oldest to newest.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySegment {
    pub dim: usize,
    pub h: usize,
    pub dt: f64,
    /// Row-major `[dim, h]`.
    pub data: Vec<f64>,
}

impl TrajectorySegment {
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.dim).map(|i| self.data[i * self.h + j]).collect()
    }
}

/// Position of a training window within the dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowRef {
    pub motion: usize,
    pub trajectory: usize,
    pub start: usize,
}

/// Starts of windows spanning `h + extra` steps, never straddling trajectories.
pub fn window_refs(dataset: &MotionDataset, h: usize, extra: usize, stride: usize) -> Result<Vec<WindowRef>> {
    if stride == 0 {
        return Err(Error::Validation("segment stride must be at least 1".into()));
    }
    if h == 0 || h % 2 == 0 {
        return Err(Error::Validation(format!("segment length {h} must be odd")));
    }
    let span = h + extra;
    let mut refs = Vec::new();
    for (mi, m) in dataset.motions.iter().enumerate() {
        for (ti, t) in m.trajectories.iter().enumerate() {
            if t.len() < span {
                return Err(Error::TrajectoryTooShort {
                    len: t.len(),
                    required: span,
                });
            }
            for start in (0..=t.len() - span).step_by(stride) {
                refs.push(WindowRef {
                    motion: mi,
                    trajectory: ti,
                    start,
                });
            }
        }
    }
    Ok(refs)
}

/// Sliding normalized windows of length `h` over every trajectory.
pub fn slice_segments(dataset: &MotionDataset, h: usize, stride: usize) -> Result<Vec<TrajectorySegment>> {
    let refs = window_refs(dataset, h, 0, stride)?;
    let normalized = dataset.normalized();
    let d = dataset.dim();
    Ok(refs
        .iter()
        .map(|r| {
            let mut data = vec![0.0; d * h];
            normalized[r.motion][r.trajectory].window_into(r.start, h, &mut data);
            TrajectorySegment {
                dim: d,
                h,
                dt: dataset.dt,
                data,
            }
        })
        .collect())
}

fn parse_rows(text: &str, width: usize, file: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row_index = rows.len();
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        if fields.len() != width {
            return Err(Error::Parse {
                file: file.to_string(),
                row: row_index,
                message: format!("expected {width} values, found {}", fields.len()),
            });
        }
        let row = fields
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|e| Error::Parse {
                    file: file.to_string(),
                    row: row_index,
                    message: format!("'{f}': {e}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn read_trajectory(path: &Path, width: usize) -> Result<Trajectory> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows = parse_rows(&text, width, &path.display().to_string())?;
    Trajectory::new(width, rows.concat())
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut text = String::with_capacity(traj.data().len() * 20);
    for row in traj.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parsed `key=value` manifest.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: BTreeMap<String, String>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                file: MANIFEST_FILE.into(),
                row: i,
                message: "expected key=value".into(),
            })?;
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

/// Load a dataset directory (`<motion>/<trajectory>.csv`, optional manifest)
/// or a single trajectory file as a one-motion dataset.
///
/// A manifest, when present, supplies `dt`, the motion order and per-motion
/// feasibility. Its layout must match `layout`.
pub fn load_dataset(path: &Path, layout: &StateLayout, horizon: usize) -> Result<MotionDataset> {
    let width = layout.dim();
    if path.is_file() {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "motion".into());
        let traj = read_trajectory(path, width)?;
        let motion = Motion {
            name,
            trajectories: vec![traj],
            feasible: None,
        };
        return MotionDataset::new(layout.clone(), DEFAULT_DT, vec![motion], horizon);
    }
    if !path.is_dir() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let manifest_path = path.join(MANIFEST_FILE);
    let manifest = if manifest_path.is_file() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        Some(Manifest::parse(&text)?)
    } else {
        None
    };
    let mut dt = DEFAULT_DT;
    let mut names: Vec<String> = Vec::new();
    if let Some(m) = &manifest {
        if let Some(l) = m.get("layout") {
            let stored = StateLayout::parse(l)?;
            if &stored != layout {
                return Err(Error::Validation(format!(
                    "dataset layout {stored} does not match requested {layout}"
                )));
            }
        }
        if let Some(v) = m.get("dt") {
            dt = v
                .parse()
                .map_err(|_| Error::Validation(format!("manifest dt '{v}' is not a number")))?;
        }
        if let Some(v) = m.get("motions") {
            names = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
        }
    }
    if names.is_empty() {
        let entries = fs::read_dir(path).map_err(|e| Error::io(path, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(path, e))?;
            if entry.path().is_dir() {
                names.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        names.sort();
    }
    let mut motions = Vec::new();
    for name in names {
        let dir = path.join(&name);
        let mut files: Vec<_> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv" || x == "txt"))
            .collect();
        files.sort();
        let trajectories = files
            .iter()
            .map(|f| read_trajectory(f, width))
            .collect::<Result<Vec<_>>>()?;
        let feasible = manifest
            .as_ref()
            .and_then(|m| m.get(&format!("motion.{name}.feasible")))
            .and_then(|v| v.parse().ok());
        motions.push(Motion {
            name,
            trajectories,
            feasible,
        });
    }
    MotionDataset::new(layout.clone(), dt, motions, horizon)
}

/// Write the dataset as a directory with a manifest. Values use the shortest
/// decimal form that parses back to the same `f64`.
pub fn write_dataset(dataset: &MotionDataset, path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    let mut manifest = Manifest::default();
    let mut put = |k: &str, v: String| {
        manifest.entries.insert(k.to_string(), v);
    };
    put("format", FORMAT_NAME.into());
    put("version", FORMAT_VERSION.to_string());
    put("layout", dataset.layout.to_string());
    put("d", dataset.dim().to_string());
    put("dt", format!("{}", dataset.dt));
    put("motions", dataset.motion_names().join(","));
    for m in &dataset.motions {
        let v = m.feasible.map_or("unknown".to_string(), |f| f.to_string());
        put(&format!("motion.{}.feasible", m.name), v);
    }
    for m in &dataset.motions {
        let dir = path.join(&m.name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (i, t) in m.trajectories.iter().enumerate() {
            write_trajectory(&dir.join(format!("traj_{i:03}.csv")), t)?;
        }
    }
    let mp = path.join(MANIFEST_FILE);
    fs::write(&mp, manifest.render()).map_err(|e| Error::io(&mp, e))
}
