use super::graph::{Graph, NodeId};
use crate::error::{Error, Result};

/// Floor on the denominator of the relative error so that entries whose true
/// gradient is zero are judged by absolute error instead; at eps = 1e-5 the
/// central difference of an O(1) loss carries roundoff near 1e-10.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub leaf: NodeId,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compare reverse-mode gradients of a scalar node against central finite
/// differences for every entry of every leaf that requires a gradient.
/// Leaves with `requires_grad == false` are not probed.
///
/// `max_entries_per_leaf` bounds the cost on large leaves by probing an evenly
/// strided subset of entries.
pub fn check_gradients(
    graph: &mut Graph,
    output: NodeId,
    eps: f64,
    tol: f64,
    max_entries_per_leaf: Option<usize>,
) -> Result<GradCheckReport> {
    if graph.value(output).len() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar output, got shape {:?}",
            graph.value(output).shape()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::Validation(format!("eps must be positive, got {eps}")));
    }
    for leaf in graph.trainable_leaves() {
        if !graph.value(leaf).all_finite() {
            return Err(Error::Validation(format!("leaf {} has non-finite values", leaf.index())));
        }
    }
    let grads = graph.backward(output)?;
    let mut entries = Vec::new();
    for leaf in graph.trainable_leaves() {
        let len = graph.value(leaf).len();
        let analytic: Vec<f64> = grads
            .get(leaf)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; len]);
        let stride = match max_entries_per_leaf {
            Some(m) if m > 0 && len > m => len.div_ceil(m),
            _ => 1,
        };
        for index in (0..len).step_by(stride) {
            let orig = graph.value(leaf).data()[index];
            graph.set_leaf_entry(leaf, index, orig + eps);
            graph.recompute()?;
            let plus = graph.value(output).data()[0];
            graph.set_leaf_entry(leaf, index, orig - eps);
            graph.recompute()?;
            let minus = graph.value(output).data()[0];
            graph.set_leaf_entry(leaf, index, orig);
            let numeric = (plus - minus) / (2.0 * eps);
            entries.push(GradCheckEntry {
                leaf,
                index,
                analytic: analytic[index],
                numeric,
                rel_error: relative_error(analytic[index], numeric),
            });
        }
    }
    graph.recompute()?;
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error <= tol,
        entries,
        max_rel_error,
        tol,
    })
}
