//! PPO tracking policy driven by decoded latent targets.

mod env;
mod mlp;
mod ppo;
mod reward;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::Container;
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::model::ScaeModel;
use crate::optim::Adam;

pub use env::{EnvConfig, ObservationLayout, ReplayPair, StepOutput, TrackingEnv};
pub use mlp::{Dense, Mlp, MlpCache};
pub use ppo::{
    adapt_lr, gae, gaussian_kl, gaussian_log_prob, normalize_advantages, ppo_loss, ppo_update, ActorCritic, PpoBatch, PpoConfig,
    PpoStats, LOG_STD_MAX, LOG_STD_MIN,
};
pub use reward::{kernel_reward, regularization_reward, tracking_reward, tracking_terms, RewardConfig};

/// Transitions and summary statistics of one rollout.
#[derive(Clone, Debug, Default)]
pub struct Rollout {
    pub batch: PpoBatch,
    pub mean_reward: f64,
    pub tracking_reward: f64,
    pub reg_reward: f64,
    /// Mean per-entry squared error between decoded targets and realized states.
    pub tracking_mse: f64,
    pub pairs: Vec<ReplayPair>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PolicyIterRecord {
    pub iter: usize,
    pub mean_reward: f64,
    pub tracking_reward: f64,
    pub reg_reward: f64,
    pub kl: f64,
    pub lr: f64,
    pub tracking_mse: f64,
    pub skipped: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PolicyLog {
    pub records: Vec<PolicyIterRecord>,
}

impl PolicyLog {
    pub const HEADER: &'static str = "iter,mean_reward,tracking_reward,reg_reward,kl,lr";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.iter, r.mean_reward, r.tracking_reward, r.reg_reward, r.kl, r.lr);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Policy, optimizer and environments of one training run.
pub struct PolicyTrainer {
    pub env: TrackingEnv,
    pub policy: ActorCritic,
    pub adam: Adam,
    pub config: PpoConfig,
    pub iteration: usize,
    rng: ChaCha8Rng,
    obs: Vec<f64>,
}

impl PolicyTrainer {
    pub fn new(env: TrackingEnv, config: PpoConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = ActorCritic::new(env.obs_dim(), env.act_dim(), &config.hidden, config.init_log_std, &mut rng);
        Self::with_policy(env, policy, config, rng)
    }

    /// Continue from an existing policy, e.g. a pre-trained one.
    pub fn warm(env: TrackingEnv, policy: ActorCritic, config: PpoConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Self::with_policy(env, policy, config, ChaCha8Rng::seed_from_u64(seed))
    }

    fn with_policy(mut env: TrackingEnv, policy: ActorCritic, config: PpoConfig, rng: ChaCha8Rng) -> Result<Self> {
        if policy.obs_dim() != env.obs_dim() || policy.act_dim() != env.act_dim() {
            return Err(Error::shape("policy io", [env.obs_dim(), env.act_dim()], [policy.obs_dim(), policy.act_dim()]));
        }
        if env.num_envs() != config.num_envs {
            return Err(Error::Validation(format!(
                "env count {} differs from ppo num_envs {}",
                env.num_envs(),
                config.num_envs
            )));
        }
        let obs = env.observations();
        Ok(Self {
            adam: Adam::new(config.lr, 0.0),
            env,
            policy,
            config,
            iteration: 0,
            rng,
            obs,
        })
    }

    /// Step every env `steps_per_iter` times with sampled actions and compute
    /// GAE advantages, bootstrapping through time-limit cuts.
    pub fn collect(&mut self, model: &ScaeModel) -> Result<Rollout> {
        let envs = self.env.num_envs();
        let (od, ad) = (self.env.obs_dim(), self.env.act_dim());
        let t_len = self.config.steps_per_iter;
        let mut batch = PpoBatch {
            obs_dim: od,
            act_dim: ad,
            old_log_std: self.policy.log_std.clone(),
            ..PpoBatch::default()
        };
        let mut rewards = Vec::with_capacity(t_len);
        let mut values = Vec::with_capacity(t_len);
        let mut dones = Vec::with_capacity(t_len);
        let mut roll = Rollout::default();
        let mut mse = 0.0;
        for _ in 0..t_len {
            let mean = self.policy.mean(&self.obs, envs);
            let value = self.policy.value(&self.obs, envs);
            let actions = self.policy.sample(&mean, &mut self.rng);
            let logp = self.policy.log_prob(&mean, &actions);
            let out = self.env.step(model, &actions)?;
            let mut r = out.rewards.clone();
            if !out.truncated.is_empty() {
                let rows: Vec<f64> = out.truncated.iter().flat_map(|(_, o)| o.iter().copied()).collect();
                let v = self.policy.value(&rows, out.truncated.len());
                for ((e, _), v) in out.truncated.iter().zip(v) {
                    r[*e] += self.config.gamma * v;
                }
            }
            roll.mean_reward += out.rewards.iter().sum::<f64>();
            roll.tracking_reward += out.tracking.iter().sum::<f64>();
            roll.reg_reward += out.regularization.iter().sum::<f64>();
            mse += out.sq_error.iter().sum::<f64>();
            roll.pairs.extend(out.pairs);
            batch.obs.extend_from_slice(&self.obs);
            batch.actions.extend_from_slice(&actions);
            batch.old_log_prob.extend(logp);
            batch.old_mean.extend(mean);
            rewards.push(r);
            values.push(value);
            dones.push(out.dones);
            self.obs = self.env.observations();
        }
        let last = self.policy.value(&self.obs, envs);
        let (adv, ret) = gae(&rewards, &values, &dones, &last, self.config.gamma, self.config.lambda);
        batch.advantages = adv.into_iter().flatten().collect();
        batch.returns = ret.into_iter().flatten().collect();
        normalize_advantages(&mut batch.advantages);
        let n = (t_len * envs) as f64;
        roll.mean_reward /= n;
        roll.tracking_reward /= n;
        roll.reg_reward /= n;
        roll.tracking_mse = mse / n;
        roll.batch = batch;
        Ok(roll)
    }

    /// One rollout plus one PPO update.
    pub fn iterate(&mut self, model: &ScaeModel) -> Result<(PolicyIterRecord, Rollout)> {
        let roll = self.collect(model)?;
        let stats = ppo_update(&mut self.policy, &mut self.adam, &roll.batch, &self.config, &mut self.rng)?;
        if !self.policy.is_finite() {
            return Err(Error::Divergence {
                iteration: self.iteration,
                detail: "policy parameters became non-finite".into(),
            });
        }
        let record = PolicyIterRecord {
            iter: self.iteration,
            mean_reward: roll.mean_reward,
            tracking_reward: roll.tracking_reward,
            reg_reward: roll.reg_reward,
            kl: stats.kl,
            lr: stats.lr,
            tracking_mse: roll.tracking_mse,
            skipped: stats.skipped,
        };
        self.iteration += 1;
        Ok((record, roll))
    }

    /// Mean per-step tracking reward and tracking MSE of the deterministic
    /// (mean-action) policy over `steps` control steps.
    pub fn evaluate(&mut self, model: &ScaeModel, steps: usize) -> Result<(f64, f64)> {
        let out = evaluate_policy(&self.policy, &mut self.env, model, steps)?;
        self.obs = self.env.observations();
        Ok(out)
    }
}

/// Mean per-step tracking reward and tracking MSE of `policy` under mean
/// actions over `steps` control steps of `env`.
pub fn evaluate_policy(policy: &ActorCritic, env: &mut TrackingEnv, model: &ScaeModel, steps: usize) -> Result<(f64, f64)> {
    let envs = env.num_envs();
    let (mut reward, mut mse) = (0.0, 0.0);
    for _ in 0..steps {
        let obs = env.observations();
        let mean = policy.mean(&obs, envs);
        let out = env.step(model, &mean)?;
        reward += out.tracking.iter().sum::<f64>();
        mse += out.sq_error.iter().sum::<f64>();
    }
    let n = (steps * envs) as f64;
    Ok((reward / n, mse / n))
}

/// Mean per-step tracking reward of uniformly random joint targets.
pub fn random_baseline(env: &mut TrackingEnv, model: &ScaeModel, steps: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..steps {
        let a = env.random_actions(&mut rng);
        total += env.step(model, &a)?.tracking.iter().sum::<f64>();
    }
    Ok(total / (steps * env.num_envs()) as f64)
}

/// Run PPO for `config.max_iters` iterations.
pub fn pretrain(model: &ScaeModel, env: TrackingEnv, config: &PpoConfig, seed: u64) -> Result<(ActorCritic, PolicyLog)> {
    let mut trainer = PolicyTrainer::new(env, config.clone(), seed)?;
    let mut log = PolicyLog::default();
    for _ in 0..config.max_iters {
        log.records.push(trainer.iterate(model)?.0);
    }
    Ok((trainer.policy, log))
}

pub const POLICY_KIND: &str = "policy";

fn push_mlp(c: &mut Container, prefix: &str, m: &Mlp) -> Result<()> {
    for (i, l) in m.layers.iter().enumerate() {
        c.push(format!("{prefix}.{i}.weight"), Tensor::new(vec![l.n_out, l.n_in], l.weight.clone())?);
        c.push(format!("{prefix}.{i}.bias"), Tensor::new(vec![l.n_out], l.bias.clone())?);
    }
    Ok(())
}

fn read_mlp(c: &Container, prefix: &str, layers: usize) -> Result<Mlp> {
    let mut out = Vec::with_capacity(layers);
    for i in 0..layers {
        let w = c.tensor(&format!("{prefix}.{i}.weight"))?;
        if w.shape().len() != 2 {
            return Err(Error::Checkpoint(format!("{prefix}.{i}.weight is not a matrix")));
        }
        let (n_out, n_in) = (w.shape()[0], w.shape()[1]);
        let b = c.tensor_shaped(&format!("{prefix}.{i}.bias"), &[n_out])?;
        out.push(Dense {
            n_in,
            n_out,
            weight: w.data().to_vec(),
            bias: b.data().to_vec(),
        });
    }
    for pair in out.windows(2) {
        if pair[0].n_out != pair[1].n_in {
            return Err(Error::Checkpoint(format!("{prefix}: layer widths do not chain")));
        }
    }
    Ok(Mlp { layers: out })
}

pub fn save_policy(path: &Path, policy: &ActorCritic) -> Result<()> {
    let mut c = Container::new(POLICY_KIND);
    c.set_meta("actor.layers", policy.actor.layers.len());
    c.set_meta("critic.layers", policy.critic.layers.len());
    push_mlp(&mut c, "actor", &policy.actor)?;
    push_mlp(&mut c, "critic", &policy.critic)?;
    c.push("log_std", Tensor::new(vec![policy.log_std.len()], policy.log_std.clone())?);
    c.save(path)
}

pub fn load_policy(path: &Path) -> Result<ActorCritic> {
    let c = Container::load_kind(path, POLICY_KIND)?;
    let actor = read_mlp(&c, "actor", c.meta_parse("actor.layers")?)?;
    let critic = read_mlp(&c, "critic", c.meta_parse("critic.layers")?)?;
    let log_std = c.tensor_shaped("log_std", &[actor.n_out()])?.data().to_vec();
    if critic.n_in() != actor.n_in() || critic.n_out() != 1 {
        return Err(Error::Checkpoint("critic does not match actor input or is not scalar".into()));
    }
    Ok(ActorCritic { actor, critic, log_std })
}
