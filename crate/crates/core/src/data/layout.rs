use std::fmt;
use std::ops::Range;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutSlice {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

impl LayoutSlice {
    pub fn new(name: impl Into<String>, start: usize, end: usize) -> Self {
        Self {
            name: name.into(),
            start,
            end,
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }
}

/// Named contiguous slices that tile `[0, d)` in order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StateLayout {
    slices: Vec<LayoutSlice>,
}

impl StateLayout {
    pub fn new(slices: Vec<LayoutSlice>) -> Result<Self> {
        let mut cursor = 0;
        for s in &slices {
            if s.start != cursor || s.end <= s.start {
                return Err(Error::Validation(format!(
                    "layout slice {} = {}:{} does not continue at {cursor}",
                    s.name, s.start, s.end
                )));
            }
            if slices.iter().filter(|o| o.name == s.name).count() > 1 {
                return Err(Error::Validation(format!("duplicate layout slice {}", s.name)));
            }
            cursor = s.end;
        }
        if cursor < 2 {
            return Err(Error::Validation(format!("layout dimension {cursor} is below 2")));
        }
        Ok(Self { slices })
    }

    /// `joint_pos[0..n], joint_vel[n..2n]`, the toy chain's state.
    pub fn joint_space(n: usize) -> Self {
        Self::new(vec![
            LayoutSlice::new("joint_pos", 0, n),
            LayoutSlice::new("joint_vel", n, 2 * n),
        ])
        .expect("joint-space layout is valid for n >= 1")
    }

    /// Full 52-column humanoid row layout.
    pub fn humanoid() -> Self {
        let spec = [
            ("base_pos", 3),
            ("base_rot", 4),
            ("base_lin_vel", 3),
            ("base_ang_vel", 3),
            ("projected_gravity", 3),
            ("joint_pos", 18),
            ("joint_vel", 18),
        ];
        let mut slices = Vec::new();
        let mut at = 0;
        for (name, n) in spec {
            slices.push(LayoutSlice::new(name, at, at + n));
            at += n;
        }
        Self::new(slices).expect("humanoid layout is valid")
    }

    /// Slices of [`StateLayout::humanoid`] consumed by the latent dynamics model.
    pub const HUMANOID_DYNAMICS: [&'static str; 4] =
        ["base_lin_vel", "base_ang_vel", "projected_gravity", "joint_pos"];

    /// Parse `name:start:end,name:start:end,...`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut slices = Vec::new();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let fields: Vec<&str> = part.split(':').collect();
            let bad = || Error::Validation(format!("malformed layout slice '{part}'"));
            if fields.len() != 3 {
                return Err(bad());
            }
            let start = fields[1].parse().map_err(|_| bad())?;
            let end = fields[2].parse().map_err(|_| bad())?;
            slices.push(LayoutSlice::new(fields[0], start, end));
        }
        Self::new(slices)
    }

    pub fn dim(&self) -> usize {
        self.slices.last().map_or(0, |s| s.end)
    }

    pub fn slices(&self) -> &[LayoutSlice] {
        &self.slices
    }

    pub fn slice(&self, name: &str) -> Option<&LayoutSlice> {
        self.slices.iter().find(|s| s.name == name)
    }

    /// Sub-layout made of the named slices, re-packed from 0, plus the source
    /// column of every selected dimension.
    pub fn select(&self, names: &[&str]) -> Result<(StateLayout, Vec<usize>)> {
        let mut slices = Vec::new();
        let mut columns = Vec::new();
        for name in names {
            let s = self
                .slice(name)
                .ok_or_else(|| Error::Validation(format!("layout has no slice named {name}")))?;
            let at = columns.len();
            slices.push(LayoutSlice::new(s.name.clone(), at, at + s.len()));
            columns.extend(s.range());
        }
        Ok((StateLayout::new(slices)?, columns))
    }
}

impl fmt::Display for StateLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .slices
            .iter()
            .map(|s| format!("{}:{}:{}", s.name, s.start, s.end))
            .collect();
        write!(f, "{}", parts.join(","))
    }
}

/// A single state vector checked against a layout.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionState {
    values: Vec<f64>,
}

impl MotionState {
    pub fn new(values: Vec<f64>, layout: &StateLayout) -> Result<Self> {
        if values.len() != layout.dim() {
            return Err(Error::shape("motion state", [layout.dim()], [values.len()]));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("motion state entry {i} is not finite")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn slice<'a>(&'a self, layout: &StateLayout, name: &str) -> Option<&'a [f64]> {
        layout.slice(name).map(|s| &self.values[s.range()])
    }
}
