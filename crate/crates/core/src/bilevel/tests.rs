use super::*;
use crate::model::ScaeConfig;
use crate::policy::{EnvConfig, PpoConfig, RewardConfig};
use crate::train::LatentSample;

fn fixture() -> (ScaeModel, Normalization, LatentSampleBuffer) {
    let cfg = ScaeConfig {
        channels: 2,
        window: 9,
        hidden: 4,
        kernel: 3,
        horizon: 1,
        ..ScaeConfig::default()
    };
    let model = ScaeModel::new(cfg, 6, 0).unwrap();
    let norm = Normalization {
        mean: vec![0.05; 6],
        std: vec![0.3; 6],
    };
    let entries = (0..6)
        .map(|i| LatentSample {
            motion: i % 2,
            trajectory: 0,
            start: i,
            params: LatentParams {
                phase: vec![0.1 * i as f64, -0.2],
                frequency: vec![1.0, 0.5 + 0.1 * i as f64],
                amplitude: vec![0.4, 0.2 + 0.05 * i as f64],
                offset: vec![0.0, 0.1],
            },
        })
        .collect();
    let buffer = LatentSampleBuffer {
        motions: vec!["a".into(), "b".into()],
        entries,
    };
    (model, norm, buffer)
}

fn trainer(m: &ScaeModel, n: &Normalization, b: &LatentSampleBuffer, envs: usize) -> PolicyTrainer {
    let env = TrackingEnv::new(m, n.clone(), b.clone(), SimConfig::default(), RewardConfig::default(), EnvConfig::default(), envs, 2).unwrap();
    let ppo = PpoConfig {
        num_envs: envs,
        hidden: vec![8, 8],
        steps_per_iter: 16,
        ..PpoConfig::default()
    };
    PolicyTrainer::new(env, ppo, 0).unwrap()
}

/// Buffer of recorded pairs from `rollouts` random-action rollouts.
fn filled(m: &ScaeModel, n: &Normalization, b: &LatentSampleBuffer, envs: usize, rollouts: usize) -> RolloutBuffer {
    let mut t = trainer(m, n, b, envs);
    t.env.record_pairs = true;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut buf = RolloutBuffer::new();
    for _ in 0..rollouts {
        random_rollout(&mut t.env, m, 16, &mut rng, Some(&mut buf)).unwrap();
    }
    buf
}

fn small_config() -> BmiConfig {
    BmiConfig {
        decoder_lr: 1e-3,
        outer_iters: 2,
        inner_iters: 1,
        probe_samples: 2,
        probe_steps: 20,
        ..BmiConfig::default()
    }
}

#[test]
fn defaults_match_fine_tuning_table() {
    let c = BmiConfig::default();
    assert_eq!(c.beta_ft, 200.0);
    assert_eq!(c.decoder_lr, 1e-5);
    assert_eq!((c.decoder_minibatches, c.decoder_epochs, c.outer_iters), (2, 1, 50));
    assert_eq!(c.inner_iters, 20);
    assert!(c.validate().is_ok());
    assert!(c.check_decoder_lr(1e-3).is_ok());
    assert!(c.check_decoder_lr(1e-5).is_err());
    let zero = BmiConfig { beta_ft: 0.0, ..c.clone() };
    assert!(zero.validate().is_err());
    assert!(BmiConfig { ablation: true, ..zero }.validate().is_ok());
}

#[test]
fn segments_follow_env_episode_and_step() {
    let (m, n, b) = fixture();
    let buf = filled(&m, &n, &b, 3, 1);
    assert_eq!(buf.len(), 48);
    let last = buf.len() - 1;
    let seg = buf.segment(last, 9).unwrap();
    assert_eq!(seg.len(), 9);
    let p = &buf.pairs[last];
    for (k, &j) in seg.iter().enumerate() {
        let q = &buf.pairs[j];
        assert_eq!((q.env, q.episode, q.step), (p.env, p.episode, p.step + k - 8));
    }
    // steps 1..8 lack a full history
    assert_eq!(buf.eligible(Some(9)).len(), 3 * 8);
    assert_eq!(buf.eligible(None).len(), 48);
    let full = buf.batch(&buf.eligible(Some(9)), &n, Some(9)).unwrap();
    assert_eq!(full.states.shape(), &[24, 6, 9]);
    // newest column of a window is the pair's own state
    let i = buf.eligible(Some(9))[0];
    let mut s = buf.pairs[i].state.clone();
    n.normalize_row(&mut s);
    for (k, v) in s.iter().enumerate() {
        assert_eq!(full.states.data()[k * 9 + 8], *v);
    }
}

#[test]
fn beta_zero_is_pure_state_error() {
    let (m, n, b) = fixture();
    let buf = filled(&m, &n, &b, 2, 1);
    let batch = buf.batch(&buf.eligible(None), &n, None).unwrap();
    let t = decoder_loss(&m, &batch, 0.0, Trainable::DECODER_CONV).unwrap();
    assert_eq!(t.total.to_bits(), t.state.to_bits());
    assert!(t.latent > 0.0);
    let t200 = decoder_loss(&m, &batch, 200.0, Trainable::DECODER_CONV).unwrap();
    assert!((t200.total - (t.state + 200.0 * t.latent)).abs() < 1e-12 * t200.total.max(1.0));
}

#[test]
fn state_term_matches_independent_decode() {
    let (m, n, b) = fixture();
    let buf = filled(&m, &n, &b, 2, 1);
    let idx = buf.eligible(None);
    let batch = buf.batch(&idx, &n, None).unwrap();
    let t = decoder_loss(&m, &batch, 1.0, Trainable::NONE).unwrap();
    // oracle: full decode through the model API, newest column, plain mean
    let d = m.dim;
    let h = m.config.window;
    let out = m.decode(&m.reconstruct(&batch.params)).unwrap();
    let mut se = 0.0;
    for (bi, &i) in idx.iter().enumerate() {
        let mut s = buf.pairs[i].state.clone();
        n.normalize_row(&mut s);
        for k in 0..d {
            let e = out.data()[(bi * d + k) * h + h - 1] - s[k];
            se += e * e;
        }
    }
    let oracle = se / (idx.len() * d) as f64;
    assert!((t.state - oracle).abs() < 1e-12, "{} vs {oracle}", t.state);
    // latent oracle through encode_params and the closed-form sinusoid
    let re = m.encode_params(&out).unwrap();
    let grid = m.time_grid();
    let mut le = 0.0;
    let mut ae = 0.0;
    for (p, q) in batch.params.iter().zip(&re) {
        let a = crate::model::reconstruct_latent(p, &grid);
        let bb = crate::model::reconstruct_latent(q, &grid);
        le += a.iter().zip(&bb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        ae += a.iter().zip(&bb).map(|(x, y)| (x - y).abs()).sum::<f64>();
    }
    let entries = (idx.len() * m.config.channels * h) as f64;
    assert!((t.latent - le / entries).abs() < 1e-9, "{} vs {}", t.latent, le / entries);
    assert!((t.drift - ae / entries).abs() < 1e-9);
}

#[test]
fn exact_targets_give_zero_state_error() {
    let (m, n, b) = fixture();
    let mut buf = filled(&m, &n, &b, 2, 1);
    for p in &mut buf.pairs {
        p.state = p.target.clone();
    }
    let batch = buf.batch(&buf.eligible(None), &n, None).unwrap();
    let t = decoder_loss(&m, &batch, 0.0, Trainable::DECODER_CONV).unwrap();
    assert!(t.total < 1e-24, "{}", t.total);
}

#[test]
fn unfrozen_encoder_is_rejected() {
    let (m, n, b) = fixture();
    let buf = filled(&m, &n, &b, 2, 1);
    let batch = buf.batch(&buf.eligible(None), &n, None).unwrap();
    for t in [
        Trainable::ALL,
        Trainable { encoder: true, ..Trainable::NONE },
        Trainable { bn_affine: true, ..Trainable::DECODER_CONV },
    ] {
        assert!(matches!(decoder_loss(&m, &batch, 1.0, t), Err(Error::Contract(_))));
    }
}

#[test]
fn chunked_gradients_match_finite_differences() {
    let (m, n, b) = fixture();
    // 2 envs x 16 steps x 9 rollouts = 288 pairs, two chunks
    let buf = filled(&m, &n, &b, 2, 9);
    let idx = buf.eligible(None);
    assert!(idx.len() > CHUNK);
    let (_, grads) = decoder_pass(&m, &buf, &idx, &n, None, 5.0, true).unwrap();
    let grads = grads.unwrap();
    let kinds: Vec<ParamKind> = m.parameters().into_iter().map(|(_, k, _)| k).collect();
    for (g, k) in grads.iter().zip(&kinds) {
        assert_eq!(g.is_some(), *k == ParamKind::DecoderConv);
    }
    let batch = buf.batch(&idx, &n, None).unwrap();
    let pi = kinds.iter().position(|k| *k == ParamKind::DecoderConv).unwrap();
    let eps = 1e-5;
    for e in [0, 3, 7] {
        let mut mp = m.clone();
        mp.parameters_mut()[pi].data_mut()[e] += eps;
        let mut mm = m.clone();
        mm.parameters_mut()[pi].data_mut()[e] -= eps;
        let lp = decoder_loss(&mp, &batch, 5.0, Trainable::NONE).unwrap().total;
        let lm = decoder_loss(&mm, &batch, 5.0, Trainable::NONE).unwrap().total;
        let fd = (lp - lm) / (2.0 * eps);
        let an = grads[pi].as_ref().unwrap()[e];
        assert!((fd - an).abs() <= 1e-4 * fd.abs().max(1e-3), "entry {e}: fd {fd} analytic {an}");
    }
}

#[test]
fn zero_lr_leaves_decoder_bit_identical() {
    let (m, n, b) = fixture();
    let buf = filled(&m, &n, &b, 2, 1);
    let mut model = m.clone();
    let mut adam = Adam::new(0.0, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let upd = update_decoder(&mut model, &buf, &n, &small_config(), &mut adam, &mut rng).unwrap();
    assert_eq!(upd.steps, 2);
    assert_eq!(model, m);
}

#[test]
fn full_batch_step_does_not_increase_loss() {
    let (m, n, b) = fixture();
    let buf = filled(&m, &n, &b, 4, 2);
    for beta in [0.0, 1.0, 200.0] {
        let cfg = BmiConfig {
            beta_ft: beta,
            ablation: true,
            decoder_minibatches: 1,
            ..small_config()
        };
        let mut model = m.clone();
        let mut adam = Adam::new(1e-5, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let upd = update_decoder(&mut model, &buf, &n, &cfg, &mut adam, &mut rng).unwrap();
        assert_eq!(upd.steps, 1);
        assert!(upd.after.total <= upd.before.total, "beta {beta}: {:?}", upd);
        assert_ne!(model.decoder, m.decoder);
        assert_eq!(model.encoder, m.encoder);
        assert_eq!((&model.phase_weight, &model.phase_bias), (&m.phase_weight, &m.phase_bias));
        assert_eq!(frozen_fingerprint(&model), frozen_fingerprint(&m));
    }
}

#[test]
fn full_segment_mode_updates() {
    let (m, n, b) = fixture();
    let buf = filled(&m, &n, &b, 2, 1);
    let cfg = BmiConfig {
        full_segment: true,
        decoder_minibatches: 1,
        ..small_config()
    };
    let mut model = m.clone();
    let mut adam = Adam::new(1e-5, 0.0);
    let upd = update_decoder(&mut model, &buf, &n, &cfg, &mut adam, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(upd.samples, 2 * 8);
    assert!(upd.after.total <= upd.before.total);
}

#[test]
fn non_finite_loss_reverts_and_halves_lr() {
    let (m, n, b) = fixture();
    let mut buf = filled(&m, &n, &b, 2, 1);
    buf.pairs[3].state[0] = f64::NAN;
    let mut model = m.clone();
    let mut adam = Adam::new(1e-3, 0.0);
    let upd = update_decoder(&mut model, &buf, &n, &small_config(), &mut adam, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(upd.reverted);
    assert!(upd.incident.is_some());
    assert_eq!(adam.lr, 5e-4);
    assert_eq!(model, m);
}

#[test]
fn misaligned_pair_fails_audit() {
    let (m, n, b) = fixture();
    let mut buf = filled(&m, &n, &b, 2, 1);
    let idx = buf.eligible(None);
    assert!(audit_alignment(&m, &n, &buf, &idx).is_ok());
    let other = buf.pairs[0].params.clone();
    buf.pairs[5].params = other;
    assert!(matches!(audit_alignment(&m, &n, &buf, &idx), Err(Error::Contract(_))));
}

#[test]
fn subsampling_caps_decoder_batch() {
    let (m, n, b) = fixture();
    let buf = filled(&m, &n, &b, 4, 1);
    let cfg = BmiConfig {
        decoder_samples: 10,
        ..small_config()
    };
    let mut model = m.clone();
    let mut adam = Adam::new(1e-5, 0.0);
    let upd = update_decoder(&mut model, &buf, &n, &cfg, &mut adam, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(upd.samples, 10);
}

#[test]
fn zero_outer_iterations_is_identity() {
    let (m, n, b) = fixture();
    let t = trainer(&m, &n, &b, 4);
    let policy = t.policy.clone();
    let cfg = BmiConfig {
        outer_iters: 0,
        ..small_config()
    };
    let out = run_bmi(t, m.clone(), &cfg, 0).unwrap();
    assert_eq!(out.policy, policy);
    assert_eq!(out.model, m);
    assert_eq!(out.report.records.len(), 1);
    assert_eq!(out.report.records[0].outer_iter, 0);
    assert_eq!(out.report.probe_before, out.report.probe_after);
}

#[test]
fn short_run_keeps_frozen_parts_and_logs_rows() {
    let (m, n, b) = fixture();
    for lower in [LowerLevel::Ppo, LowerLevel::Random] {
        let cfg = BmiConfig {
            lower_level: lower,
            ..small_config()
        };
        let out = run_bmi(trainer(&m, &n, &b, 4), m.clone(), &cfg, 0).unwrap();
        assert_eq!(out.report.records.len(), 3);
        assert_eq!(frozen_fingerprint(&out.model), frozen_fingerprint(&m));
        assert_ne!(out.model.decoder, m.decoder);
        let csv = out.report.to_csv();
        assert!(csv.starts_with(BmiReport::HEADER));
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(out.report.probe_after.len(), 2);
    }
}

#[test]
fn run_is_deterministic() {
    let (m, n, b) = fixture();
    let run = || run_bmi(trainer(&m, &n, &b, 4), m.clone(), &small_config(), 7).unwrap();
    let (a, c) = (run(), run());
    assert_eq!(format!("{:?}", a.report), format!("{:?}", c.report));
    assert_eq!(a.model, c.model);
}

#[test]
fn probe_reports_each_requested_motion() {
    let (m, n, b) = fixture();
    let sim = SimConfig::default();
    let all = probe_decoded_targets(&m, &n, &b, &sim, &[], 2, 20).unwrap();
    assert_eq!(all.iter().map(|p| p.motion.as_str()).collect::<Vec<_>>(), ["a", "b"]);
    let one = probe_decoded_targets(&m, &n, &b, &sim, &["b".into()], 2, 20).unwrap();
    assert_eq!(one[0], all[1]);
    assert!(probe_decoded_targets(&m, &n, &b, &sim, &["zz".into()], 2, 20).is_err());
    assert!(all.iter().all(|p| p.amplitude >= 0.0 && (0.0..=1.0).contains(&p.violation_rate)));
    assert_eq!(probe_entries(&b, 0, 2).len(), 2);
}

#[test]
fn decoded_motion_starts_at_the_sample_phase() {
    let (m, n, b) = fixture();
    let p = &b.entries[2].params;
    let rows = decoded_motion(&m, &n, p, 3, 0.02).unwrap();
    let mut first = m.decode_newest(std::slice::from_ref(p)).remove(0);
    n.denormalize_row(&mut first);
    assert_eq!(rows[0], first);
    assert_eq!(rows.len(), 3);
}
