use std::path::Path;

use super::{ScaeConfig, ScaeModel};
use crate::checkpoint::Container;
use crate::data::{Normalization, StateLayout};
use crate::diff::Tensor;
use crate::error::{Error, Result};

pub const SCAE_KIND: &str = "scae";

/// A trained model with the data statistics and layout it was fitted on.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaeArtifact {
    pub model: ScaeModel,
    pub normalization: Normalization,
    pub layout: StateLayout,
}

pub fn save_scae(path: &Path, model: &ScaeModel, normalization: &Normalization, layout: &StateLayout) -> Result<()> {
    scae_container(SCAE_KIND, model, normalization, layout)?.save(path)
}

/// Model, running statistics, normalization and layout in a container of `kind`.
pub fn scae_container(kind: &str, model: &ScaeModel, normalization: &Normalization, layout: &StateLayout) -> Result<Container> {
    let mut c = Container::new(kind);
    let config = serde_json::to_string(&model.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    c.set_meta("config", config);
    c.set_meta("dim", model.dim);
    c.set_meta("layout", layout);
    for (name, _, t) in model.parameters() {
        c.push(name, t.clone());
    }
    for (name, bn) in model.bn_states() {
        let n = bn.running_mean.len();
        c.push(format!("{name}.running_mean"), Tensor::new(vec![n], bn.running_mean.clone())?);
        c.push(format!("{name}.running_var"), Tensor::new(vec![n], bn.running_var.clone())?);
    }
    let d = normalization.dim();
    c.push("normalization.mean", Tensor::new(vec![d], normalization.mean.clone())?);
    c.push("normalization.std", Tensor::new(vec![d], normalization.std.clone())?);
    Ok(c)
}

pub fn load_scae(path: &Path) -> Result<ScaeArtifact> {
    scae_from_container(&Container::load_kind(path, SCAE_KIND)?)
}

pub fn scae_from_container(c: &Container) -> Result<ScaeArtifact> {
    let config: ScaeConfig =
        serde_json::from_str(c.meta("config")?).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let dim: usize = c.meta_parse("dim")?;
    let layout = StateLayout::parse(c.meta("layout")?)?;
    let mut model = ScaeModel::new(config, dim, 0)?;
    let names: Vec<(String, Vec<usize>)> = model
        .parameters()
        .iter()
        .map(|(n, _, t)| (n.clone(), t.shape().to_vec()))
        .collect();
    for ((name, shape), slot) in names.iter().zip(model.parameters_mut()) {
        *slot = c.tensor_shaped(name, shape)?.clone();
    }
    let stats: Vec<(String, usize)> = model
        .bn_states()
        .iter()
        .map(|(n, bn)| (n.clone(), bn.running_mean.len()))
        .collect();
    let mut states = model
        .encoder
        .iter_mut()
        .chain(model.decoder.iter_mut())
        .filter_map(|s| s.bn.as_mut());
    for (name, n) in stats {
        let bn = states.next().expect("same stage order");
        bn.running_mean = c.tensor_shaped(&format!("{name}.running_mean"), &[n])?.data().to_vec();
        bn.running_var = c.tensor_shaped(&format!("{name}.running_var"), &[n])?.data().to_vec();
    }
    let d = layout.dim();
    let normalization = Normalization {
        mean: c.tensor_shaped("normalization.mean", &[d])?.data().to_vec(),
        std: c.tensor_shaped("normalization.std", &[d])?.data().to_vec(),
    };
    Ok(ScaeArtifact {
        model,
        normalization,
        layout,
    })
}
