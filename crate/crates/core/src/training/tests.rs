use rand::Rng as _;

use super::*;
use crate::decoding::log_softmax;
use crate::rng::seeded;
use crate::tensor::Tensor;

#[test]
fn default_schedule() {
    let c = TrainConfig::default();
    assert_eq!((c.xe_epochs, c.scst_epochs, c.batch_size), (9, 4, 40));
    assert_eq!(lr_schedule(&c, Phase::Xe, 1).unwrap(), 3e-5);
    assert_eq!(lr_schedule(&c, Phase::Xe, 7).unwrap(), 3e-5);
    assert_eq!(lr_schedule(&c, Phase::Xe, 8).unwrap(), 1.5e-5);
    assert_eq!(lr_schedule(&c, Phase::Xe, 9).unwrap(), 1.5e-5);
    assert_eq!(lr_schedule(&c, Phase::Scst, 2).unwrap(), 7.5e-6);
    assert_eq!(lr_schedule(&c, Phase::Scst, 3).unwrap(), 3.75e-6);
    assert_eq!(lr_schedule(&c, Phase::Scst, 4).unwrap(), 3.75e-6);
    assert!(lr_schedule(&c, Phase::Xe, 0).is_err());
    assert!(lr_schedule(&c, Phase::Scst, 5).is_err());
    assert_eq!(c.adam(), AdamParams::default());
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig::toy().validate().is_ok());
    for bad in [
        TrainConfig { xe_lr: 0.0, ..Default::default() },
        TrainConfig { decay_factor: 1.5, ..Default::default() },
        TrainConfig { decay_factor: 0.0, ..Default::default() },
        TrainConfig { batch_size: 0, ..Default::default() },
        TrainConfig { grad_clip: Some(-1.0), ..Default::default() },
    ] {
        assert!(bad.validate().is_err());
    }
}

fn logits(b: usize, t: usize, v: usize, data: Vec<f64>) -> (Tape<f64>, Var) {
    let mut tape = Tape::new();
    let l = tape.param(Tensor::new(vec![b, t, v], data).unwrap());
    (tape, l)
}

#[test]
fn xe_uniform_logits() {
    let (mut tape, l) = logits(1, 4, 7, vec![0.3; 28]);
    let loss = xe_loss(&mut tape, l, &[1, 2, 3, 0], &[true, true, true, false]).unwrap();
    assert!((tape.value(loss).item() - 3.0 * 7f64.ln()).abs() < 1e-12);
}

#[test]
fn xe_confident_correct_is_near_zero() {
    let mut data = vec![0.0; 2 * 3];
    data[1] = 60.0;
    data[3 + 2] = 60.0;
    let (mut tape, l) = logits(1, 2, 3, data);
    let loss = xe_loss(&mut tape, l, &[1, 2], &[true, true]).unwrap();
    assert!(tape.value(loss).item() < 1e-20);
}

#[test]
fn xe_hand_two_steps() {
    let data = vec![1.0, 2.0, 0.5, -1.0, 0.0, 3.0];
    let (mut tape, l) = logits(1, 2, 3, data.clone());
    let loss = xe_loss(&mut tape, l, &[0, 2], &[true, true]).unwrap();
    let expect = -(log_softmax(&data[..3])[0] + log_softmax(&data[3..])[2]);
    assert!((tape.value(loss).item() - expect).abs() < 1e-6);
    assert!(xe_loss(&mut tape, l, &[0], &[true]).is_err());
}

#[test]
fn adam_zero_gradient_keeps_parameters() {
    let mut p = vec![Tensor::<f64>::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
    let before = p.clone();
    let mut st = OptimizerState::new(&p);
    let g = vec![Tensor::zeros(vec![3]).unwrap()];
    adam_step(&mut p, &g, &["w"], &mut st, 0.1, AdamParams::default()).unwrap();
    assert_eq!(p, before);
    assert_eq!(st.step, 1);
}

#[test]
fn adam_first_step_is_lr_times_sign() {
    let mut p = vec![Tensor::<f64>::new(vec![4], vec![0.0; 4]).unwrap()];
    let mut st = OptimizerState::new(&p);
    let g = vec![Tensor::new(vec![4], vec![3.0, -0.01, 250.0, -7.0]).unwrap()];
    adam_step(&mut p, &g, &["w"], &mut st, 1e-3, AdamParams::default()).unwrap();
    for (x, s) in p[0].data().iter().zip([-1.0, 1.0, -1.0, 1.0]) {
        assert!((x - s * 1e-3).abs() < 1e-8, "{x}");
    }
}

#[test]
fn adam_converges_on_quadratic() {
    let mut p = vec![Tensor::<f64>::new(vec![1], vec![1.0]).unwrap()];
    let mut st = OptimizerState::new(&p);
    for _ in 0..50 {
        let g = vec![Tensor::new(vec![1], vec![2.0 * p[0].data()[0]]).unwrap()];
        adam_step(&mut p, &g, &["x"], &mut st, 0.1, AdamParams::default()).unwrap();
    }
    assert!(p[0].data()[0].abs() < 0.1, "{:?}", p[0].data());
}

#[test]
fn adam_rejects_nan_gradient_by_name() {
    let mut p = vec![Tensor::<f64>::new(vec![1], vec![1.0]).unwrap(), Tensor::new(vec![1], vec![1.0]).unwrap()];
    let before = p.clone();
    let mut st = OptimizerState::new(&p);
    let g = vec![Tensor::new(vec![1], vec![1.0]).unwrap(), Tensor::new(vec![1], vec![f64::NAN]).unwrap()];
    let err = adam_step(&mut p, &g, &["a", "b.weight"], &mut st, 0.1, AdamParams::default()).unwrap_err();
    assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "b.weight"));
    assert_eq!(p, before);
    assert_eq!(st.step, 0);
}

#[test]
fn clipping_scales_to_limit() {
    let mut g = vec![Tensor::<f64>::new(vec![2], vec![3.0, 4.0]).unwrap()];
    assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
    assert!((g[0].data()[0] - 0.6).abs() < 1e-12);
    let mut small = vec![Tensor::<f64>::new(vec![1], vec![0.5]).unwrap()];
    clip_global_norm(&mut small, 1.0);
    assert_eq!(small[0].data(), &[0.5]);
}

#[test]
fn caption_batch_layout() {
    let b = CaptionBatch::new(vec![0, 1], &[&[5, 6, 7], &[8]], 10).unwrap();
    assert_eq!(b.len, 4);
    assert_eq!(b.inputs, vec![1, 5, 6, 7, 1, 8, 0, 0]);
    assert_eq!(b.targets, vec![5, 6, 7, 2, 8, 2, 0, 0]);
    assert_eq!(b.mask, vec![true, true, true, true, true, true, false, false]);
    assert_eq!(b.n_tokens(), 6);
    let t = CaptionBatch::new(vec![0], &[&[5, 6, 7, 8]], 3).unwrap();
    assert_eq!(t.inputs, vec![1, 5, 6]);
    assert_eq!(t.targets, vec![5, 6, 2]);
}

#[test]
fn zero_advantage_gives_zero_gradient() {
    let (mut tape, l) = logits(2, 2, 3, (0..12).map(|i| i as f64 * 0.1).collect());
    let s = scst_surrogate(&mut tape, l, &[1, 2, 0, 1], &[true, true, true, false], &[0.0, 0.0]).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.get(l).unwrap().data().iter().all(|&v| v == 0.0));
}

/// Two-token bandit: logits `[θ, 0]`, reward 1 for token 0 and 0 for token 1,
/// constant baseline 0.5. The expected surrogate gradient in θ is `−p₀p₁`.
#[test]
fn reinforce_bandit_gradient_sign() {
    let theta = 0.3f64;
    let p0 = 1.0 / (1.0 + (-theta).exp());
    let mut rng = seeded(5);
    let n = 10_000;
    let mut grads = Vec::with_capacity(n);
    for _ in 0..n {
        let tok = if rng.random::<f64>() < p0 { 0 } else { 1 };
        let a = if tok == 0 { 1.0 } else { 0.0 } - 0.5;
        let (mut tape, l) = logits(1, 1, 2, vec![theta, 0.0]);
        let s = scst_surrogate(&mut tape, l, &[tok], &[true], &[a]).unwrap();
        let g = tape.backward(s).unwrap();
        grads.push(g.get(l).unwrap().data()[0]);
    }
    let mean = grads.iter().sum::<f64>() / n as f64;
    let var = grads.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    let expect = -p0 * (1.0 - p0);
    assert!(mean + 3.0 * se < 0.0, "mean {mean} se {se}");
    assert!((mean - expect).abs() < 3.0 * se, "mean {mean} expect {expect} se {se}");
}
