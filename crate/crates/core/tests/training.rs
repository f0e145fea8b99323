mod common;

use handseg::checkpoint::Checkpoint;
use handseg::network::{Network, NetworkSpec};
use handseg::optim::{adam_step, AdamConfig, AdamState, PlateauSchedule};
use handseg::preprocess::{Sample, ThresholdParams};
use handseg::synth::SynthConfig;
use handseg::train::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Textbook Adam on one scalar, in f64.
fn adam_scalar(p: f64, g: f64, m: f64, v: f64, t: u64, lr: f64, cfg: &AdamConfig) -> (f64, f64, f64) {
    let m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    let v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
    let m_hat = m / (1.0 - cfg.beta1.powi(t as i32));
    let v_hat = v / (1.0 - cfg.beta2.powi(t as i32));
    (p - lr * m_hat / (v_hat.sqrt() + cfg.eps), m, v)
}

#[test]
fn adam_matches_scalar_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = AdamConfig::default();
    for _ in 0..200 {
        let n = rng.random_range(1..50);
        let mut p: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g: Vec<f32> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut state = AdamState::new([n]);
        state.t = rng.random_range(0..200);
        state.m[0] = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        state.v[0] = (0..n).map(|_| rng.random_range(0.0..0.5)).collect();
        let before = (p.clone(), state.clone());
        let lr = rng.random_range(1e-5..1e-3);
        adam_step(&mut [&mut p], &[&g], &mut state, lr, &cfg).unwrap();
        for j in 0..n {
            let (bp, bs) = (&before.0, &before.1);
            let (wp, wm, wv) = adam_scalar(bp[j] as f64, g[j] as f64, bs.m[0][j] as f64, bs.v[0][j] as f64, bs.t + 1, lr, &cfg);
            assert!((p[j] as f64 - wp).abs() <= 1e-7, "param {j}: {} vs {wp}", p[j]);
            assert!((state.m[0][j] as f64 - wm).abs() <= 1e-7);
            assert!((state.v[0][j] as f64 - wv).abs() <= 1e-7);
        }
    }
}

#[test]
fn adam_first_step_is_lr_times_sign() {
    let cfg = AdamConfig::default();
    for g in [3e-3f32, -0.25, 7.0] {
        let mut p = [1.0f32];
        let mut s = AdamState::new([1]);
        adam_step(&mut [&mut p], &[&[g]], &mut s, 1e-3, &cfg).unwrap();
        let want = 1.0 - 1e-3 * g as f64 / (g.abs() as f64 + cfg.eps);
        assert!((p[0] as f64 - want).abs() < 1e-7);
    }
}

#[test]
fn adam_constant_gradient_steps_approach_lr() {
    let cfg = AdamConfig::default();
    let lr = 1e-3;
    for g in [0.01f32, -5.0] {
        let mut p = [0.0f32];
        let mut s = AdamState::new([1]);
        let mut prev = 0.0f64;
        for _ in 0..1000 {
            prev = p[0] as f64;
            adam_step(&mut [&mut p], &[&[g]], &mut s, lr, &cfg).unwrap();
        }
        let last = p[0] as f64 - prev;
        assert!((last + lr * g.signum() as f64).abs() <= 0.01 * lr, "{last}");
    }
}

#[test]
fn schedule_stays_within_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut s = PlateauSchedule::new(1e-3, 1e-5, 0.5, 5, 2).unwrap();
    for i in 0..5000 {
        let loss = 1.0 + (i as f64) * 1e-4 + rng.random_range(0.0..0.5);
        let lr = s.observe(loss);
        assert!((1e-5..=1e-3).contains(&lr));
    }
    assert_eq!(s.lr(), 1e-5);
}

fn overfit_data() -> Vec<Sample> {
    synthetic_samples(&SynthConfig::default(), 77, 0..4, &ThresholdParams::default(), 32).unwrap()
}

fn overfit_config(steps: u64) -> TrainConfig {
    TrainConfig {
        budget: Budget::Steps(steps),
        augment: None,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn overfits_four_samples() {
    let data = overfit_data();
    let net = Network::build(NetworkSpec::desk_scale(), 1).unwrap();
    let mut t = Trainer::new(net, overfit_config(300)).unwrap();
    let mut hit = None;
    for step in 0..300 {
        let rec = t.train_step(&data).unwrap();
        if rec.loss_total < 0.05 {
            hit = Some(step);
            break;
        }
    }
    let losses: Vec<f64> = t.history().iter().map(|r| r.loss_total).collect();
    let Some(hit) = hit else { panic!("loss still {:.4} after 300 steps", losses.last().unwrap()) };
    let smooth: Vec<f64> = losses.windows(20).map(|w| w.iter().sum::<f64>() / 20.0).collect();
    assert!(hit < 20 || smooth.windows(2).all(|w| w[1] < w[0]), "smoothed loss rose: {smooth:?}");
}

#[test]
fn same_seed_same_history() {
    let data = overfit_data();
    let run = || {
        let mut t = Trainer::new(Network::build(common::tiny_spec(), 2).unwrap(), overfit_config(15)).unwrap();
        t.run(&data, |_| {}).unwrap();
        (t.history().to_vec(), Checkpoint::from_network(t.network()).to_bytes())
    };
    assert_eq!(run(), run());
}

#[test]
fn resume_from_file_is_bit_identical() {
    let data = synthetic_samples(&SynthConfig::default(), 6, 0..10, &ThresholdParams::default(), 32).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        ..overfit_config(12)
    };
    let mut straight = Trainer::new(Network::build(common::tiny_spec(), 3).unwrap(), cfg.clone()).unwrap();
    straight.run(&data, |_| {}).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    let mut first = Trainer::new(Network::build(common::tiny_spec(), 3).unwrap(), cfg.clone()).unwrap();
    for _ in 0..5 {
        first.train_step(&data).unwrap();
    }
    first.checkpoint().save(&path).unwrap();
    let mut second = Trainer::resume(&Checkpoint::load(&path).unwrap(), cfg).unwrap();
    second.run(&data, |_| {}).unwrap();
    assert_eq!(&straight.history()[5..], second.history());
    assert_eq!(Checkpoint::from_network(straight.network()).to_bytes(), Checkpoint::from_network(second.network()).to_bytes());
}
