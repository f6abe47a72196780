use std::f64::consts::TAU;

use super::*;
use crate::data::{default_corpus, generate_synthetic_dataset};
use crate::model::{LatentParams, ScaeConfig};
use crate::sim::SimConfig;

fn tiny_config(beta: f64) -> ScaeConfig {
    ScaeConfig {
        channels: 3,
        window: 11,
        horizon: 2,
        hidden: 4,
        kernel: 3,
        beta,
        ..ScaeConfig::default()
    }
}

fn tiny_dataset() -> MotionDataset {
    let corpus: Vec<_> = default_corpus().into_iter().take(2).collect();
    generate_synthetic_dataset(&corpus, 1, 40, 13, 3, &SimConfig::default()).unwrap()
}

fn tiny_train(iters: usize) -> TrainConfig {
    TrainConfig {
        max_iters: iters,
        lr: 3e-3,
        epochs_per_iter: 1,
        minibatches: 2,
        windows_per_epoch: 16,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn batch_of(ds: &MotionDataset, cfg: &ScaeConfig, n: usize) -> WindowBatch {
    let refs = window_refs(ds, cfg.window, cfg.horizon, 3).unwrap();
    WindowBatch::gather(&ds.normalized(), &refs[..n], cfg.window, cfg.horizon).unwrap()
}

#[test]
fn gather_is_step_major() {
    let ds = tiny_dataset();
    let cfg = tiny_config(1.0);
    let b = batch_of(&ds, &cfg, 3);
    let norm = ds.normalized();
    let (d, h) = (ds.dim(), cfg.window);
    let refs = window_refs(&ds, h, cfg.horizon, 3).unwrap();
    for i in 0..=cfg.horizon {
        for bi in 0..3 {
            let row = &b.targets.data()[(i * 3 + bi) * d * h..][..d * h];
            let r = refs[bi];
            for ch in 0..d {
                for j in 0..h {
                    assert_eq!(row[ch * h + j], norm[r.motion][r.trajectory].row(r.start + i + j)[ch]);
                }
            }
        }
    }
    assert_eq!(&b.targets.data()[..3 * d * h], b.inputs.data());
}

#[test]
fn window_past_trajectory_end_is_contract_error() {
    let ds = tiny_dataset();
    let bad = [WindowRef {
        motion: 0,
        trajectory: 0,
        start: 30,
    }];
    assert!(matches!(WindowBatch::gather(&ds.normalized(), &bad, 11, 2), Err(Error::Contract(_))));
}

#[test]
fn decay_sum_matches_geometric_series() {
    assert_eq!(decay_sum(1.0, 50), 51.0);
    let a: f64 = 0.9;
    assert!((decay_sum(a, 4) - (1.0 - a.powi(5)) / (1.0 - a)).abs() < 1e-12);
}

#[test]
fn beta_zero_scae_equals_fld_bitwise() {
    let ds = tiny_dataset();
    let cfg = tiny_config(0.0);
    let model = ScaeModel::new(cfg.clone(), ds.dim(), 1).unwrap();
    let b = batch_of(&ds, &cfg, 4);
    for mode in [Mode::Train, Mode::Eval] {
        let f = fld_loss(&model, &b, mode).unwrap();
        let s = scae_loss(&model, &b, mode, 0.0).unwrap();
        assert_eq!(f.to_bits(), s.to_bits());
    }
}

#[test]
fn loss_matches_direct_oracle() {
    // motion term from predict_forward per step, averaged with alpha^i weights
    let ds = tiny_dataset();
    let cfg = ScaeConfig {
        alpha: 0.8,
        ..tiny_config(1.0)
    };
    let model = ScaeModel::new(cfg.clone(), ds.dim(), 2).unwrap();
    let b = batch_of(&ds, &cfg, 3);
    let n = 3 * ds.dim() * cfg.window;
    let mut expected = 0.0;
    for i in 0..=cfg.horizon {
        let (_, out) = model.predict_forward(&b.inputs, i).unwrap();
        let tgt = &b.targets.data()[i * n..][..n];
        let mse = out.data().iter().zip(tgt).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n as f64;
        expected += 0.8f64.powi(i as i32) * mse;
    }
    let got = fld_loss(&model, &b, Mode::Eval).unwrap();
    assert!((got - expected).abs() < 1e-10 * expected.max(1.0), "{got} vs {expected}");
}

#[test]
fn batch_horizon_beyond_model_is_rejected() {
    let ds = tiny_dataset();
    let cfg = tiny_config(1.0);
    let model = ScaeModel::new(ScaeConfig { horizon: 1, ..cfg.clone() }, ds.dim(), 0).unwrap();
    let b = batch_of(&ds, &cfg, 2);
    assert!(matches!(fld_loss(&model, &b, Mode::Eval), Err(Error::Contract(_))));
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let ds = tiny_dataset();
    let run = || {
        let model = ScaeModel::new(tiny_config(1.0), ds.dim(), 4).unwrap();
        let mut t = Trainer::new(model, &ds, tiny_train(30)).unwrap();
        let before = evaluate(&t.model, &ds, 2).unwrap();
        let mut log = TrainLog::default();
        while !t.is_done() {
            log.records.push(t.run_iteration().unwrap());
        }
        (before, evaluate(&t.model, &ds, 2).unwrap(), log)
    };
    let (before, after, log) = run();
    let (_, _, log2) = run();
    let bits = |l: &TrainLog| l.step_losses().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&log), bits(&log2));
    assert_eq!(log.records.len(), 30);
    assert_eq!(log.step_losses().len(), 60);
    assert!(after.motion_recon_mse < 0.7 * before.motion_recon_mse, "{before:?} -> {after:?}");
    let csv = log.to_csv();
    assert!(csv.starts_with(TrainLog::HEADER));
    assert_eq!(csv.lines().count(), 31);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let ds = tiny_dataset();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.bin");
    let fresh = || Trainer::new(ScaeModel::new(tiny_config(1.0), ds.dim(), 8).unwrap(), &ds, tiny_train(6)).unwrap();

    let mut full = fresh();
    let mut full_losses = Vec::new();
    while !full.is_done() {
        full_losses.extend(full.run_iteration().unwrap().step_losses);
    }

    let mut first = fresh();
    let mut losses = Vec::new();
    for _ in 0..3 {
        losses.extend(first.run_iteration().unwrap().step_losses);
    }
    first.save_state(&path, &ds).unwrap();
    drop(first);
    let mut resumed = Trainer::load_state(&path, &ds).unwrap();
    assert_eq!(resumed.iteration, 3);
    while !resumed.is_done() {
        losses.extend(resumed.run_iteration().unwrap().step_losses);
    }
    assert_eq!(losses.len(), full_losses.len());
    for (a, b) in losses.iter().zip(&full_losses) {
        assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }
    for ((_, _, a), (_, _, b)) in resumed.model.parameters().iter().zip(full.model.parameters().iter()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-9);
        }
    }
}

#[test]
fn trainer_rejects_too_few_windows() {
    let ds = tiny_dataset();
    let model = ScaeModel::new(tiny_config(1.0), ds.dim(), 0).unwrap();
    let cfg = TrainConfig {
        windows_per_epoch: 3,
        minibatches: 2,
        ..tiny_train(1)
    };
    assert!(matches!(Trainer::new(model, &ds, cfg), Err(Error::Validation(_))));
}

#[test]
fn train_fills_buffer_with_every_segment() {
    let ds = tiny_dataset();
    let model = ScaeModel::new(tiny_config(1.0), ds.dim(), 0).unwrap();
    let out = train(model, &ds, &tiny_train(2)).unwrap();
    assert_eq!(out.log.records.len(), 2);
    assert_eq!(out.buffer.entries.len(), 2 * (40 - 11 + 1));
    assert_eq!(out.buffer.motions, ds.motion_names());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("buf.json");
    out.buffer.save(&p).unwrap();
    assert_eq!(LatentSampleBuffer::load(&p).unwrap(), out.buffer);
    assert!(matches!(
        LatentSampleBuffer::load(&dir.path().join("none.json")),
        Err(Error::MissingArtifact(_))
    ));
}

#[test]
fn buffer_segments_decode_close_to_training_error() {
    let ds = tiny_dataset();
    let cfg = tiny_config(1.0);
    let model = ScaeModel::new(cfg.clone(), ds.dim(), 0).unwrap();
    let out = train(model, &ds, &tiny_train(40)).unwrap();
    let final_err = out.log.records.last().unwrap().motion_recon_mse;
    let normalized = ds.normalized();
    let (d, h) = (ds.dim(), cfg.window);
    let params: Vec<LatentParams> = out.buffer.entries.iter().map(|e| e.params.clone()).collect();
    let decoded = out.model.decode(&out.model.reconstruct(&params)).unwrap();
    let mut window = vec![0.0; d * h];
    let mut sq = 0.0;
    for (e, row) in out.buffer.entries.iter().zip(decoded.data().chunks_exact(d * h)) {
        normalized[e.motion][e.trajectory].window_into(e.start, h, &mut window);
        sq += row.iter().zip(&window).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    let buffer_err = sq / (out.buffer.entries.len() * d * h) as f64;
    assert!(buffer_err <= 2.0 * final_err, "buffer {buffer_err} vs training {final_err}");
}

fn params_with_amplitudes(a: &[f64]) -> LatentParams {
    let c = a.len();
    LatentParams {
        phase: vec![0.0; c],
        frequency: vec![1.0; c],
        amplitude: a.to_vec(),
        offset: vec![0.0; c],
    }
}

#[test]
fn active_channel_examples() {
    assert_eq!(active_channels(&params_with_amplitudes(&[1.0, 0.5, 0.05, 0.1]), 0.1), 2);
    assert_eq!(active_channels(&params_with_amplitudes(&[0.0, 0.0]), 0.1), 0);
    assert_eq!(active_channels(&params_with_amplitudes(&[2.0, 2.0, 2.0]), 0.1), 3);
    let buffer = LatentSampleBuffer {
        motions: vec!["a".into(), "b".into()],
        entries: vec![
            LatentSample {
                motion: 0,
                trajectory: 0,
                start: 0,
                params: params_with_amplitudes(&[1.0, 0.0, 0.0]),
            },
            LatentSample {
                motion: 0,
                trajectory: 0,
                start: 1,
                params: params_with_amplitudes(&[1.0, 1.0, 0.0]),
            },
            LatentSample {
                motion: 1,
                trajectory: 0,
                start: 0,
                params: params_with_amplitudes(&[1.0, 1.0, 1.0]),
            },
        ],
    };
    let s = amplitude_sparsity(&buffer);
    assert_eq!(s[0].mean_active, 1.5);
    assert_eq!(s[1].mean_active, 3.0);
    assert_eq!(s[1].segments, 1);
}

#[test]
fn pca_recovers_planar_circle() {
    // points on a circle embedded in 5-D along two orthonormal directions
    let u = [0.6, 0.8, 0.0, 0.0, 0.0];
    let v = [0.0, 0.0, 0.0, 1.0, 0.0];
    let rows: Vec<Vec<f64>> = (0..40)
        .map(|k| {
            let th = TAU * k as f64 / 40.0;
            (0..5).map(|j| 3.0 * th.cos() * u[j] + th.sin() * v[j] + 1.0).collect()
        })
        .collect();
    let xy = pca_2d(&rows).unwrap();
    for (k, p) in xy.iter().enumerate() {
        let th = TAU * k as f64 / 40.0;
        // first component carries the larger spread
        assert!((p[0].abs() - 3.0 * th.cos().abs()).abs() < 1e-9);
        assert!((p[1].abs() - th.sin().abs()).abs() < 1e-9);
    }
    assert!(pca_2d(&rows[..1]).is_err());
}

#[test]
fn manifold_rows_follow_buffer() {
    let grid = tiny_config(1.0).time_grid();
    let entries = (0..10)
        .map(|k| LatentSample {
            motion: k % 2,
            trajectory: 0,
            start: k,
            params: LatentParams {
                phase: vec![k as f64 / 10.0 - 0.5, 0.0],
                frequency: vec![1.0, 2.0],
                amplitude: vec![1.0, 0.5 * k as f64],
                offset: vec![0.0, 0.1],
            },
        })
        .collect();
    let buffer = LatentSampleBuffer {
        motions: vec!["a".into(), "b".into()],
        entries,
    };
    let rows = export_manifold(&buffer, &grid).unwrap();
    assert_eq!(rows.len(), 10);
    assert_eq!(rows[3].motion, "b");
    assert_eq!(rows[3].t, 3);
    assert!(rows.iter().all(|r| r.x.is_finite() && r.y.is_finite()));
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig::desk().validate().is_ok());
    assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { minibatches: 0, ..TrainConfig::default() }.validate().is_err());
}
