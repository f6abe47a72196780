//! Run configuration: one TOML document with a section per stage.

use std::fs;
use std::path::{Path, PathBuf};

use bmi_core::bilevel::BmiConfig;
use bmi_core::data::SyntheticMotionSpec;
use bmi_core::model::ScaeConfig;
use bmi_core::policy::{EnvConfig, PpoConfig, RewardConfig};
use bmi_core::sim::SimConfig;
use bmi_core::train::TrainConfig;
use bmi_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Environment variables `BMI__<SECTION>__<KEY>=<value>` override config
/// entries; the value is read as a TOML value, falling back to a string.
pub const ENV_PREFIX: &str = "BMI__";

pub const RESOLVED_FILE: &str = "config.resolved.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Import this dataset directory instead of generating one.
    pub import: Option<PathBuf>,
    pub trajectories: usize,
    pub steps: usize,
    /// Synthetic motion classes; empty for the built-in corpus.
    pub motions: Vec<SyntheticMotionSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            import: None,
            trajectories: 2,
            steps: 250,
            motions: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Latent loss weights to train; empty trains `model.beta` only.
    pub betas: Vec<f64>,
    /// Iterations between resumable state snapshots.
    pub checkpoint_every: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            betas: Vec::new(),
            checkpoint_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Trained model used by pre-training, fine-tuning and evaluation.
    pub scae: String,
    /// Comparison model for evaluation; empty to skip.
    pub baseline: String,
    /// Pre-train on motions the dataset marks feasible.
    pub feasible_only: bool,
    /// Control steps for random-baseline and policy tracking evaluation.
    pub eval_steps: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            scae: "beta_1".into(),
            baseline: "fld".into(),
            feasible_only: true,
            eval_steps: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Window stride for reconstruction metrics.
    pub stride: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { stride: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Zero wall-clock columns so that logs of identical runs match byte for byte.
    pub deterministic: bool,
    pub pipeline: PipelineConfig,
    pub model: ScaeConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
    pub sim: SimConfig,
    pub reward: RewardConfig,
    pub env: EnvConfig,
    pub ppo: PpoConfig,
    pub bmi: BmiConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            deterministic: false,
            pipeline: PipelineConfig::default(),
            model: ScaeConfig::desk(),
            train: TrainConfig::desk(),
            sweep: SweepConfig::default(),
            sim: SimConfig::default(),
            reward: RewardConfig::default(),
            env: EnvConfig::default(),
            ppo: PpoConfig {
                num_envs: 256,
                max_iters: 300,
                ..PpoConfig::default()
            },
            bmi: BmiConfig::desk(),
            eval: EvalConfig::default(),
            data: DataConfig::default(),
        }
    }
}

/// Directory label of a trained model: `fld` for `beta = 0`, else `beta_<beta>`.
pub fn beta_label(beta: f64) -> String {
    if beta == 0.0 {
        "fld".into()
    } else {
        format!("beta_{beta}")
    }
}

fn set_path(root: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().ok_or_else(|| Error::Config("empty override key".into()))?;
    let mut table = root;
    for p in parents {
        let entry = table
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path {} crosses a non-table", path.join("."))))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

/// Merge `over` into `base`: tables merge key by key, anything else replaces.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

impl RunConfig {
    /// Parse a document over the defaults, then apply `overrides` as
    /// `(dotted.key, raw value)`. Keys missing from a section keep the
    /// `RunConfig::default()` value.
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let mut table = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut table, user);
        for (key, raw) in overrides {
            let path: Vec<String> = key.split('.').map(str::to_string).collect();
            set_path(&mut table, &path, parse_value(raw))?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::Config(format!("config file {} not found", p.display())),
                _ => Error::Config(format!("{}: {e}", p.display())),
            })?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    /// `BMI__SECTION__KEY=value` pairs from the process environment.
    pub fn env_overrides() -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = std::env::vars()
            .filter_map(|(k, v)| {
                k.strip_prefix(ENV_PREFIX)
                    .map(|rest| (rest.split("__").map(str::to_lowercase).collect::<Vec<_>>().join("."), v))
            })
            .collect();
        out.sort();
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.sim.validate()?;
        self.reward.validate()?;
        self.env.validate()?;
        self.ppo.validate()?;
        self.bmi.validate()?;
        self.bmi.check_decoder_lr(self.train.lr)?;
        if (self.model.dt - self.sim.dt).abs() > 1e-12 {
            return Err(Error::Validation(format!(
                "model dt {} differs from simulator dt {}",
                self.model.dt, self.sim.dt
            )));
        }
        if self.sweep.checkpoint_every == 0 || self.eval.stride == 0 || self.pipeline.eval_steps == 0 {
            return Err(Error::Validation("checkpoint_every, eval stride and eval_steps must be >= 1".into()));
        }
        if self.sweep.betas.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(Error::Validation("sweep betas must be finite and >= 0".into()));
        }
        if self.data.trajectories == 0 || self.data.steps < self.model.window + self.model.horizon {
            return Err(Error::Validation(format!(
                "data: need >= 1 trajectory of at least window + horizon = {} steps",
                self.model.window + self.model.horizon
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Write the resolved config into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
        let path = dir.join(RESOLVED_FILE);
        fs::write(&path, self.to_toml()?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}
