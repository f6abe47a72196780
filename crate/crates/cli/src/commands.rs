//! Pipeline stages behind the CLI verbs. Every stage reads and writes under
//! the run's output directory:
//!
//! ```text
//! data/                  dataset in motion-data format
//! scae/<label>/          checkpoint, resumable state, logs, latent buffer
//! policy/                pre-trained policy, log, summary
//! bmi/                   fine-tuned policy and model, report, decoded dumps
//! eval/                  metrics JSON and plot CSVs
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use bmi_core::bilevel::{decoded_motion, probe_entries, run_bmi};
use bmi_core::data::{
    default_corpus, generate_synthetic_dataset, load_dataset, write_dataset, Motion, MotionDataset, Normalization,
    StateLayout, Trajectory,
};
use bmi_core::model::{load_scae, save_scae, ScaeArtifact, ScaeModel};
use bmi_core::policy::{evaluate_policy, load_policy, random_baseline, save_policy, PolicyLog, PolicyTrainer, TrackingEnv};
use bmi_core::train::{amplitude_sparsity, evaluate, export_manifold, LatentSampleBuffer, MotionSparsity, TrainLog, Trainer};
use bmi_core::{Error, Result};
use serde_json::json;

use crate::config::{beta_label, RunConfig};

pub const CHECKPOINT: &str = "checkpoint.bin";
pub const STATE: &str = "state.bin";
pub const BUFFER: &str = "buffer.json";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const STEP_LOSSES: &str = "step_losses.csv";
pub const POLICY: &str = "policy.bin";
pub const STEP_LOSSES_HEADER: &str = "iter,step,loss";

pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    pub fn new(cfg: &RunConfig) -> Self {
        Self { root: cfg.out.clone() }
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn scae(&self, label: &str) -> PathBuf {
        self.root.join("scae").join(label)
    }
    pub fn policy(&self) -> PathBuf {
        self.root.join("policy")
    }
    pub fn bmi(&self) -> PathBuf {
        self.root.join("bmi")
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Checkpoint(e.to_string()))?;
    write(path, text + "\n")
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Error::Checkpoint(e.to_string()))
}

fn layout(cfg: &RunConfig) -> StateLayout {
    StateLayout::joint_space(cfg.sim.n_joints())
}

fn min_len(cfg: &RunConfig) -> usize {
    cfg.model.window + cfg.model.horizon
}

pub fn load_data(cfg: &RunConfig) -> Result<MotionDataset> {
    load_dataset(&Paths::new(cfg).data(), &layout(cfg), min_len(cfg))
}

/// Generate the synthetic corpus (or import `data.import`) into `out/data`.
pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let dir = Paths::new(cfg).data();
    let ds = match &cfg.data.import {
        Some(src) => load_dataset(src, &layout(cfg), min_len(cfg))?,
        None => {
            let specs = if cfg.data.motions.is_empty() {
                default_corpus()
            } else {
                cfg.data.motions.clone()
            };
            generate_synthetic_dataset(&specs, cfg.data.trajectories, cfg.data.steps, min_len(cfg), cfg.seed, &cfg.sim)?
        }
    };
    write_dataset(&ds, &dir)?;
    cfg.write_resolved(&dir)?;
    for m in &ds.motions {
        let flag = match m.feasible {
            Some(true) => "feasible",
            Some(false) => "infeasible",
            None => "unknown",
        };
        println!("{:<12} {} trajectories  {flag}", m.name, m.trajectories.len());
    }
    println!("dataset written to {}", dir.display());
    Ok(())
}

/// Keep the header and the rows of `path` whose leading `iter` is below `upto`.
fn csv_prefix(path: &Path, header: &str, upto: usize) -> Result<String> {
    let mut out = format!("{header}\n");
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let iter = line.split(',').next().and_then(|v| v.parse::<usize>().ok());
            if matches!(iter, Some(i) if i < upto) {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    Ok(out)
}

/// Train one model per sweep beta into `out/scae/<label>`. With `resume`,
/// continue from the saved state of each label.
pub fn train_scae(cfg: &RunConfig, resume: bool) -> Result<()> {
    let ds = load_data(cfg)?;
    let paths = Paths::new(cfg);
    let betas = if cfg.sweep.betas.is_empty() {
        vec![cfg.model.beta]
    } else {
        cfg.sweep.betas.clone()
    };
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.seed;
    for beta in betas {
        let label = beta_label(beta);
        let dir = paths.scae(&label);
        mkdir(&dir)?;
        let mut model_cfg = cfg.model.clone();
        model_cfg.beta = beta;
        let mut run_cfg = cfg.clone();
        run_cfg.model = model_cfg.clone();
        run_cfg.write_resolved(&dir)?;

        let state_path = dir.join(STATE);
        let mut trainer = if resume && state_path.is_file() {
            let mut t = Trainer::load_state(&state_path, &ds)?;
            if t.model.config != model_cfg {
                return Err(Error::Validation(format!(
                    "{}: saved state was trained with a different model config",
                    state_path.display()
                )));
            }
            t.config.max_iters = train_cfg.max_iters;
            println!("{label}: resuming at iteration {}", t.iteration);
            t
        } else {
            Trainer::new(ScaeModel::new(model_cfg, ds.dim(), cfg.seed)?, &ds, train_cfg.clone())?
        };
        let start = trainer.iteration;
        let mut log = csv_prefix(&dir.join(TRAIN_LOG), TrainLog::HEADER, start)?;
        let mut steps = csv_prefix(&dir.join(STEP_LOSSES), STEP_LOSSES_HEADER, start)?;
        let flush = |log: &str, steps: &str| -> Result<()> {
            write(&dir.join(TRAIN_LOG), log)?;
            write(&dir.join(STEP_LOSSES), steps)
        };
        while !trainer.is_done() {
            let mut rec = trainer.run_iteration()?;
            if cfg.deterministic {
                rec.wallclock = 0.0;
            }
            for (k, l) in rec.step_losses.iter().enumerate() {
                let _ = writeln!(steps, "{},{k},{l}", rec.iter);
            }
            let row = TrainLog { records: vec![rec] }.to_csv();
            log.push_str(row.lines().nth(1).unwrap_or_default());
            log.push('\n');
            if trainer.iteration % cfg.sweep.checkpoint_every == 0 {
                trainer.save_state(&state_path, &ds)?;
                flush(&log, &steps)?;
            }
            if trainer.iteration % 10 == 0 {
                println!("{label}: iteration {} of {}", trainer.iteration, trainer.config.max_iters);
            }
        }
        trainer.save_state(&state_path, &ds)?;
        flush(&log, &steps)?;
        save_scae(&dir.join(CHECKPOINT), &trainer.model, &ds.normalization, &ds.layout)?;
        LatentSampleBuffer::collect(&trainer.model, &ds, 1)?.save(&dir.join(BUFFER))?;
        let m = evaluate(&trainer.model, &ds, cfg.eval.stride)?;
        println!(
            "{label}: motion_recon_mse {:.6} latent_recon_mse {:.6} -> {}",
            m.motion_recon_mse,
            m.latent_recon_mse,
            dir.display()
        );
    }
    Ok(())
}

fn load_model(cfg: &RunConfig, label: &str) -> Result<(ScaeArtifact, LatentSampleBuffer)> {
    let dir = Paths::new(cfg).scae(label);
    let art = load_scae(&dir.join(CHECKPOINT))?;
    let buffer = LatentSampleBuffer::load(&dir.join(BUFFER))?;
    Ok((art, buffer))
}

fn make_env(cfg: &RunConfig, model: &ScaeModel, norm: &Normalization, buffer: LatentSampleBuffer, seed: u64) -> Result<TrackingEnv> {
    TrackingEnv::new(
        model,
        norm.clone(),
        buffer,
        cfg.sim.clone(),
        cfg.reward.clone(),
        cfg.env.clone(),
        cfg.ppo.num_envs,
        seed,
    )
}

fn infeasible_motions(ds: &MotionDataset) -> Vec<String> {
    ds.motions
        .iter()
        .filter(|m| m.feasible == Some(false))
        .map(|m| m.name.clone())
        .collect()
}

/// PPO pre-training on decoded targets of the selected model.
pub fn pretrain(cfg: &RunConfig) -> Result<()> {
    let ds = load_data(cfg)?;
    let (art, mut buffer) = load_model(cfg, &cfg.pipeline.scae)?;
    if cfg.pipeline.feasible_only {
        let skip = infeasible_motions(&ds);
        buffer.entries.retain(|e| !skip.contains(&buffer.motions[e.motion]));
        if buffer.entries.is_empty() {
            return Err(Error::Validation("no feasible motions left for pre-training".into()));
        }
    }
    let dir = Paths::new(cfg).policy();
    mkdir(&dir)?;
    cfg.write_resolved(&dir)?;
    let mut baseline_env = make_env(cfg, &art.model, &art.normalization, buffer.clone(), cfg.seed + 2)?;
    let random = random_baseline(&mut baseline_env, &art.model, cfg.pipeline.eval_steps, cfg.seed)?;
    let env = make_env(cfg, &art.model, &art.normalization, buffer, cfg.seed + 1)?;
    let mut trainer = PolicyTrainer::new(env, cfg.ppo.clone(), cfg.seed)?;
    let mut log = PolicyLog::default();
    for _ in 0..cfg.ppo.max_iters {
        let (rec, _) = trainer.iterate(&art.model)?;
        if rec.iter % 10 == 0 {
            println!("iteration {} tracking_reward {:.4} lr {:.2e}", rec.iter, rec.tracking_reward, rec.lr);
        }
        log.records.push(rec);
    }
    log.write_csv(&dir.join("log.csv"))?;
    save_policy(&dir.join(POLICY), &trainer.policy)?;
    let (eval_reward, eval_mse) = trainer.evaluate(&art.model, cfg.pipeline.eval_steps)?;
    let last = log.records.last().map_or(f64::NAN, |r| r.tracking_reward);
    write_json(
        &dir.join("summary.json"),
        &json!({
            "iterations": log.records.len(),
            "random_baseline": random,
            "final_tracking_reward": last,
            "eval_tracking_reward": eval_reward,
            "eval_tracking_mse": eval_mse,
            "ratio_to_random": eval_reward / random,
            "incidents": trainer.env.incidents,
        }),
    )?;
    println!("random baseline {random:.4}, policy {eval_reward:.4} -> {}", dir.display());
    Ok(())
}

fn decoded_dump(
    cfg: &RunConfig,
    model: &ScaeModel,
    norm: &Normalization,
    buffer: &LatentSampleBuffer,
    dir: &Path,
) -> Result<()> {
    let steps = cfg.bmi.probe_steps;
    let mut motions = Vec::new();
    for (mi, name) in buffer.motions.iter().enumerate() {
        let mut trajectories = Vec::new();
        for p in probe_entries(buffer, mi, cfg.bmi.probe_samples) {
            let rows = decoded_motion(model, norm, p, steps, cfg.sim.dt)?;
            trajectories.push(Trajectory::from_rows(&rows)?);
        }
        if !trajectories.is_empty() {
            motions.push(Motion {
                name: name.clone(),
                trajectories,
                feasible: None,
            });
        }
    }
    let ds = MotionDataset::new(layout(cfg), cfg.sim.dt, motions, 1)?;
    write_dataset(&ds, dir)
}

/// Bi-level fine-tuning of the pre-trained policy and the decoder.
pub fn bmi(cfg: &RunConfig) -> Result<()> {
    let ds = load_data(cfg)?;
    let paths = Paths::new(cfg);
    let (art, buffer) = load_model(cfg, &cfg.pipeline.scae)?;
    let policy = load_policy(&paths.policy().join(POLICY))?;
    let mut bcfg = cfg.bmi.clone();
    if bcfg.probe_motions.is_empty() {
        bcfg.probe_motions = infeasible_motions(&ds);
    }
    let dir = paths.bmi();
    mkdir(&dir)?;
    let mut run_cfg = cfg.clone();
    run_cfg.bmi = bcfg.clone();
    run_cfg.write_resolved(&dir)?;

    let env = make_env(cfg, &art.model, &art.normalization, buffer.clone(), cfg.seed + 3)?;
    let trainer = PolicyTrainer::warm(env, policy.clone(), cfg.ppo.clone(), cfg.seed + 4)?;
    let out = run_bmi(trainer, art.model.clone(), &bcfg, cfg.seed)?;
    for r in &out.report.records {
        println!(
            "outer {} tracking_mse {:.4} drift {:.5} violation_rate {:.4} reward {:.4}",
            r.outer_iter, r.tracking_mse, r.latent_drift, r.violation_rate, r.reward
        );
    }
    let steps = cfg.pipeline.eval_steps;
    let mut env_a = make_env(cfg, &art.model, &art.normalization, buffer.clone(), cfg.seed + 5)?;
    let before = evaluate_policy(&policy, &mut env_a, &art.model, steps)?;
    let mut env_b = make_env(cfg, &out.model, &art.normalization, buffer.clone(), cfg.seed + 5)?;
    let after = evaluate_policy(&out.policy, &mut env_b, &out.model, steps)?;

    out.report.write_csv(&dir.join("report.csv"))?;
    write_json(
        &dir.join("report.json"),
        &json!({
            "records": to_json(&out.report.records)?,
            "probe_before": to_json(&out.report.probe_before)?,
            "probe_after": to_json(&out.report.probe_after)?,
            "incidents": out.report.incidents,
            "tracking_before": { "tracking_reward": before.0, "tracking_mse": before.1 },
            "tracking_after": { "tracking_reward": after.0, "tracking_mse": after.1 },
        }),
    )?;
    save_policy(&dir.join(POLICY), &out.policy)?;
    save_scae(&dir.join(CHECKPOINT), &out.model, &art.normalization, &art.layout)?;
    decoded_dump(cfg, &art.model, &art.normalization, &buffer, &dir.join("decoded_before"))?;
    decoded_dump(cfg, &out.model, &art.normalization, &buffer, &dir.join("decoded_after"))?;
    println!(
        "tracking mse {:.4} -> {:.4}; outputs in {}",
        before.1,
        after.1,
        dir.display()
    );
    Ok(())
}

struct ModelEval {
    label: String,
    art: ScaeArtifact,
    buffer: LatentSampleBuffer,
    motion_recon_mse: f64,
    latent_recon_mse: f64,
    sparsity: Vec<MotionSparsity>,
}

fn eval_model(cfg: &RunConfig, ds: &MotionDataset, label: &str) -> Result<ModelEval> {
    let (art, buffer) = load_model(cfg, label)?;
    let m = evaluate(&art.model, ds, cfg.eval.stride)?;
    Ok(ModelEval {
        label: label.to_string(),
        sparsity: amplitude_sparsity(&buffer),
        art,
        buffer,
        motion_recon_mse: m.motion_recon_mse,
        latent_recon_mse: m.latent_recon_mse,
    })
}

/// Metrics JSON plus plot CSVs for the selected model and, when configured,
/// the comparison model.
pub fn eval(cfg: &RunConfig) -> Result<()> {
    let ds = load_data(cfg)?;
    let paths = Paths::new(cfg);
    let main = eval_model(cfg, &ds, &cfg.pipeline.scae)?;
    let base = match cfg.pipeline.baseline.as_str() {
        "" => None,
        b if b == main.label => None,
        b => Some(eval_model(cfg, &ds, b)?),
    };
    let dir = paths.eval();
    mkdir(&dir)?;
    cfg.write_resolved(&dir)?;
    let models: Vec<&ModelEval> = std::iter::once(&main).chain(base.as_ref()).collect();

    let mut recon = String::from("model,iter,motion_recon_mse,latent_recon_mse\n");
    let mut sparsity = String::from("model,motion,mean_active,segments\n");
    let mut manifold = String::from("model,motion,trajectory,t,x,y\n");
    let mut phase = String::from("model,motion,channel,amplitude,phase\n");
    for m in &models {
        if let Ok(text) = fs::read_to_string(paths.scae(&m.label).join(TRAIN_LOG)) {
            for line in text.lines().skip(1) {
                let cells: Vec<&str> = line.split(',').take(3).collect();
                let _ = writeln!(recon, "{},{}", m.label, cells.join(","));
            }
        }
        for s in &m.sparsity {
            let _ = writeln!(sparsity, "{},{},{},{}", m.label, s.motion, s.mean_active, s.segments);
        }
        for r in export_manifold(&m.buffer, &m.art.model.time_grid())? {
            let _ = writeln!(manifold, "{},{},{},{},{},{}", m.label, r.motion, r.trajectory, r.t, r.x, r.y);
        }
        // one representative segment per motion: the middle buffer entry
        for (mi, name) in m.buffer.motions.iter().enumerate() {
            let entries: Vec<_> = m.buffer.of_motion(mi).collect();
            if let Some(e) = entries.get(entries.len() / 2) {
                for ch in 0..e.params.channels() {
                    let _ = writeln!(
                        phase,
                        "{},{name},{ch},{},{}",
                        m.label, e.params.amplitude[ch], e.params.phase[ch]
                    );
                }
            }
        }
    }
    write(&dir.join("reconstruction.csv"), recon)?;
    write(&dir.join("sparsity.csv"), sparsity)?;
    write(&dir.join("manifold.csv"), manifold)?;
    write(&dir.join("phase_circle.csv"), phase)?;

    let mut tracking = String::from("stage,tracking_reward,tracking_mse\n");
    let mut tracking_json = Vec::new();
    let stages = [
        ("pretrain", paths.policy().join(POLICY), None),
        ("bmi", paths.bmi().join(POLICY), Some(paths.bmi().join(CHECKPOINT))),
    ];
    for (stage, policy_path, model_path) in stages {
        if !policy_path.is_file() {
            continue;
        }
        let policy = load_policy(&policy_path)?;
        let model = match model_path {
            Some(p) => load_scae(&p)?.model,
            None => main.art.model.clone(),
        };
        let mut env = make_env(cfg, &model, &main.art.normalization, main.buffer.clone(), cfg.seed + 5)?;
        let (r, mse) = evaluate_policy(&policy, &mut env, &model, cfg.pipeline.eval_steps)?;
        let _ = writeln!(tracking, "{stage},{r},{mse}");
        tracking_json.push(json!({ "stage": stage, "tracking_reward": r, "tracking_mse": mse }));
    }
    write(&dir.join("tracking.csv"), tracking)?;

    let summary = |m: &ModelEval| -> Result<serde_json::Value> {
        Ok(json!({
            "model": m.label,
            "motion_recon_mse": m.motion_recon_mse,
            "latent_recon_mse": m.latent_recon_mse,
            "sparsity": to_json(&m.sparsity)?,
        }))
    };
    let comparison = match &base {
        Some(b) => json!({
            "baseline": b.label,
            "latent_ratio": main.latent_recon_mse / b.latent_recon_mse,
            "motion_ratio": main.motion_recon_mse / b.motion_recon_mse,
            "sparsity_lower_on_every_motion": main
                .sparsity
                .iter()
                .zip(&b.sparsity)
                .all(|(s, f)| s.mean_active < f.mean_active),
        }),
        None => serde_json::Value::Null,
    };
    write_json(
        &dir.join("metrics.json"),
        &json!({
            "model": main.label,
            "motion_recon_mse": main.motion_recon_mse,
            "latent_recon_mse": main.latent_recon_mse,
            "sparsity": to_json(&main.sparsity)?,
            "baseline": match &base { Some(b) => summary(b)?, None => serde_json::Value::Null },
            "comparison": comparison,
            "tracking": tracking_json,
        }),
    )?;
    println!(
        "{}: motion_recon_mse {:.6} latent_recon_mse {:.6} -> {}",
        main.label,
        main.motion_recon_mse,
        main.latent_recon_mse,
        dir.display()
    );
    Ok(())
}
