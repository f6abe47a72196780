use std::f64::consts::{E, PI, TAU};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::mlp::Mlp;
use crate::error::{Error, Result};
use crate::optim::{clip_grad_norm, Adam};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub lr: f64,
    pub kl_target: f64,
    pub lr_min: f64,
    pub lr_max: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub steps_per_iter: usize,
    pub epochs: usize,
    pub minibatches: usize,
    pub num_envs: usize,
    pub max_iters: usize,
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            kl_target: 0.01,
            lr_min: 1e-6,
            lr_max: 1e-2,
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            entropy_coef: 0.01,
            value_coef: 1.0,
            max_grad_norm: 1.0,
            steps_per_iter: 24,
            epochs: 5,
            minibatches: 4,
            num_envs: 256,
            max_iters: 3000,
            hidden: vec![128, 128, 128],
            init_log_std: -1.0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.kl_target > 0.0
            && self.lr_min > 0.0
            && self.lr_min <= self.lr_max
            && (0.0..=1.0).contains(&self.gamma)
            && (0.0..=1.0).contains(&self.lambda)
            && self.clip > 0.0
            && self.clip < 1.0
            && self.entropy_coef >= 0.0
            && self.value_coef >= 0.0
            && self.max_grad_norm > 0.0
            && self.steps_per_iter > 0
            && self.epochs > 0
            && self.minibatches > 0
            && self.num_envs > 0
            && !self.hidden.is_empty()
            && self.hidden.iter().all(|h| *h > 0)
            && (LOG_STD_MIN..=LOG_STD_MAX).contains(&self.init_log_std);
        if !ok {
            return Err(Error::Validation(format!("invalid ppo config: {self:?}")));
        }
        if self.steps_per_iter * self.num_envs < self.minibatches {
            return Err(Error::Validation("ppo: fewer transitions than minibatches".into()));
        }
        Ok(())
    }
}

/// Gaussian actor with a state-independent log-std and a scalar critic.
#[derive(Clone, Debug, PartialEq)]
pub struct ActorCritic {
    pub actor: Mlp,
    pub critic: Mlp,
    pub log_std: Vec<f64>,
}

impl ActorCritic {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, act_dim: usize, hidden: &[usize], init_log_std: f64, rng: &mut R) -> Self {
        let sizes = |out: usize| [&[obs_dim][..], hidden, &[out]].concat();
        Self {
            actor: Mlp::new(&sizes(act_dim), rng),
            critic: Mlp::new(&sizes(1), rng),
            log_std: vec![init_log_std; act_dim],
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.actor.n_in()
    }

    pub fn act_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn mean(&self, obs: &[f64], batch: usize) -> Vec<f64> {
        self.actor.forward(obs, batch)
    }

    pub fn value(&self, obs: &[f64], batch: usize) -> Vec<f64> {
        self.critic.forward(obs, batch)
    }

    pub fn sample<R: Rng + ?Sized>(&self, mean: &[f64], rng: &mut R) -> Vec<f64> {
        let n = self.act_dim();
        mean.iter()
            .enumerate()
            .map(|(i, m)| m + self.log_std[i % n].exp() * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    pub fn log_prob(&self, mean: &[f64], actions: &[f64]) -> Vec<f64> {
        gaussian_log_prob(mean, &self.log_std, actions)
    }

    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|s| s + 0.5 * (TAU * E).ln()).sum()
    }

    /// Actor buffers, critic buffers, then the log-std.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut p = self.actor.params();
        p.extend(self.critic.params());
        p.push(&self.log_std);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.actor.params_mut();
        p.extend(self.critic.params_mut());
        p.push(&mut self.log_std);
        p
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }
}

/// Row-wise diagonal Gaussian log-density.
pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], actions: &[f64]) -> Vec<f64> {
    let n = log_std.len();
    mean.chunks_exact(n)
        .zip(actions.chunks_exact(n))
        .map(|(m, a)| {
            (0..n)
                .map(|j| {
                    let z = (a[j] - m[j]) / log_std[j].exp();
                    -0.5 * z * z - log_std[j] - 0.5 * (2.0 * PI).ln()
                })
                .sum()
        })
        .collect()
}

/// Mean `KL(old || new)` between diagonal Gaussians.
pub fn gaussian_kl(old_mean: &[f64], old_log_std: &[f64], new_mean: &[f64], new_log_std: &[f64]) -> f64 {
    let n = old_log_std.len();
    let rows = old_mean.len() / n;
    let mut total = 0.0;
    for (mo, mn) in old_mean.chunks_exact(n).zip(new_mean.chunks_exact(n)) {
        for j in 0..n {
            let (so, sn) = (old_log_std[j].exp(), new_log_std[j].exp());
            total += new_log_std[j] - old_log_std[j] + (so * so + (mo[j] - mn[j]).powi(2)) / (2.0 * sn * sn) - 0.5;
        }
    }
    total / rows as f64
}

/// Generalized advantage estimates and returns over `[T][E]` arrays.
/// `dones[t][e]` marks the last step of an episode.
pub fn gae(
    rewards: &[Vec<f64>],
    values: &[Vec<f64>],
    dones: &[Vec<bool>],
    last_values: &[f64],
    gamma: f64,
    lambda: f64,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let t_len = rewards.len();
    let envs = last_values.len();
    let mut adv = vec![vec![0.0; envs]; t_len];
    let mut running = vec![0.0; envs];
    for t in (0..t_len).rev() {
        for e in 0..envs {
            let not_done = if dones[t][e] { 0.0 } else { 1.0 };
            let next_v = if t + 1 < t_len { values[t + 1][e] } else { last_values[e] };
            let delta = rewards[t][e] + gamma * not_done * next_v - values[t][e];
            running[e] = delta + gamma * lambda * not_done * running[e];
            adv[t][e] = running[e];
        }
    }
    let returns = adv
        .iter()
        .zip(values)
        .map(|(a, v)| a.iter().zip(v).map(|(a, v)| a + v).collect())
        .collect();
    (adv, returns)
}

/// Shift to mean 0 and scale to std 1; constant input maps to zeros.
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len() as f64;
    if adv.is_empty() {
        return;
    }
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a = if std > 1e-12 { (*a - mean) / std } else { 0.0 };
    }
}

/// Halve above twice the target, grow by 1.5 below half of it, clamp.
pub fn adapt_lr(lr: f64, kl: f64, config: &PpoConfig) -> f64 {
    let next = if kl > 2.0 * config.kl_target {
        lr / 2.0
    } else if kl < config.kl_target / 2.0 {
        lr * 1.5
    } else {
        lr
    };
    next.clamp(config.lr_min, config.lr_max)
}

/// Flattened transitions of one rollout, row `t * E + e`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PpoBatch {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub obs: Vec<f64>,
    pub actions: Vec<f64>,
    pub old_log_prob: Vec<f64>,
    pub old_mean: Vec<f64>,
    pub old_log_std: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl PpoBatch {
    pub fn len(&self) -> usize {
        self.old_log_prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn gather(&self, idx: &[usize]) -> PpoBatch {
        let pick = |src: &[f64], w: usize| -> Vec<f64> { idx.iter().flat_map(|&i| src[i * w..(i + 1) * w].iter().copied()).collect() };
        PpoBatch {
            obs_dim: self.obs_dim,
            act_dim: self.act_dim,
            obs: pick(&self.obs, self.obs_dim),
            actions: pick(&self.actions, self.act_dim),
            old_log_prob: pick(&self.old_log_prob, 1),
            old_mean: pick(&self.old_mean, self.act_dim),
            old_log_std: self.old_log_std.clone(),
            advantages: pick(&self.advantages, 1),
            returns: pick(&self.returns, 1),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct PpoStats {
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub lr: f64,
    /// Minibatches dropped for a non-finite loss or gradient.
    pub skipped: usize,
}

/// PPO objective on one minibatch and its gradient per parameter buffer.
pub fn ppo_loss(ac: &ActorCritic, mb: &PpoBatch, config: &PpoConfig) -> (f64, Vec<Vec<f64>>, PpoStats) {
    let b = mb.len();
    let n = ac.act_dim();
    let (mean, actor_cache) = ac.actor.forward_cached(&mb.obs, b);
    let (value, critic_cache) = ac.critic.forward_cached(&mb.obs, b);
    let logp = ac.log_prob(&mean, &mb.actions);
    let inv_b = 1.0 / b as f64;
    let mut surrogate = 0.0;
    let mut clipped = 0usize;
    let mut d_mean = vec![0.0; b * n];
    let mut d_log_std = vec![0.0; n];
    for i in 0..b {
        let ratio = (logp[i] - mb.old_log_prob[i]).exp();
        let adv = mb.advantages[i];
        let lo = 1.0 - config.clip;
        let hi = 1.0 + config.clip;
        let unclipped = ratio * adv;
        let clipped_term = ratio.clamp(lo, hi) * adv;
        surrogate -= unclipped.min(clipped_term) * inv_b;
        if !(lo..=hi).contains(&ratio) {
            clipped += 1;
        }
        let active = !((adv > 0.0 && ratio > hi) || (adv < 0.0 && ratio < lo));
        if active {
            let d_logp = -adv * ratio * inv_b;
            for j in 0..n {
                let var = (2.0 * ac.log_std[j]).exp();
                let diff = mb.actions[i * n + j] - mean[i * n + j];
                d_mean[i * n + j] += d_logp * diff / var;
                d_log_std[j] += d_logp * (diff * diff / var - 1.0);
            }
        }
    }
    let mut value_loss = 0.0;
    let mut d_value = vec![0.0; b];
    for i in 0..b {
        let e = value[i] - mb.returns[i];
        value_loss += e * e * inv_b;
        d_value[i] = 2.0 * config.value_coef * e * inv_b;
    }
    let entropy = ac.entropy();
    for g in &mut d_log_std {
        *g -= config.entropy_coef;
    }
    let mut grads = ac.actor.zero_grads();
    ac.actor.backward(&actor_cache, &d_mean, &mut grads);
    let mut critic_grads = ac.critic.zero_grads();
    ac.critic.backward(&critic_cache, &d_value, &mut critic_grads);
    grads.extend(critic_grads);
    grads.push(d_log_std);
    let loss = surrogate + config.value_coef * value_loss - config.entropy_coef * entropy;
    let stats = PpoStats {
        surrogate,
        value_loss,
        entropy,
        kl: gaussian_kl(&mb.old_mean, &mb.old_log_std, &mean, &ac.log_std),
        clip_fraction: clipped as f64 / b as f64,
        lr: 0.0,
        skipped: 0,
    };
    (loss, grads, stats)
}

/// `epochs` passes over shuffled minibatches of Adam steps. The KL between
/// the rollout policy and the updated one then sets the next iteration's rate
/// in `adam.lr`; the returned `lr` is the rate this update used.
pub fn ppo_update<R: Rng + ?Sized>(ac: &mut ActorCritic, adam: &mut Adam, batch: &PpoBatch, config: &PpoConfig, rng: &mut R) -> Result<PpoStats> {
    if batch.is_empty() {
        return Err(Error::Validation("ppo update on an empty batch".into()));
    }
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let per = batch.len() / config.minibatches;
    let mut acc = PpoStats::default();
    let mut count = 0usize;
    for _ in 0..config.epochs {
        order.shuffle(rng);
        for idx in order.chunks_exact(per.max(1)).take(config.minibatches) {
            let mb = batch.gather(idx);
            let (loss, mut grads, stats) = ppo_loss(ac, &mb, config);
            let finite = loss.is_finite() && grads.iter().flatten().all(|g| g.is_finite());
            if !finite {
                acc.skipped += 1;
                continue;
            }
            clip_grad_norm(&mut grads, config.max_grad_norm);
            let refs: Vec<Option<&[f64]>> = grads.iter().map(|g| Some(g.as_slice())).collect();
            adam.step(&mut ac.params_mut(), &refs);
            for s in &mut ac.log_std {
                *s = s.clamp(LOG_STD_MIN, LOG_STD_MAX);
            }
            acc.surrogate += stats.surrogate;
            acc.value_loss += stats.value_loss;
            acc.entropy += stats.entropy;
            acc.clip_fraction += stats.clip_fraction;
            count += 1;
        }
    }
    if count > 0 {
        let c = count as f64;
        acc.surrogate /= c;
        acc.value_loss /= c;
        acc.entropy /= c;
        acc.clip_fraction /= c;
    }
    let mean = ac.mean(&batch.obs, batch.len());
    acc.kl = gaussian_kl(&batch.old_mean, &batch.old_log_std, &mean, &ac.log_std);
    acc.lr = adam.lr;
    if acc.kl.is_finite() {
        adam.lr = adapt_lr(adam.lr, acc.kl, config);
    }
    Ok(acc)
}
