use qfd_core::distill::{
    feature_kd_loss, logit_kd_loss, qfd_loss, quantize_teacher_feature, softmax_rows,
    DistillConfig, Regime,
};
use qfd_core::quantizer::{QuantMode, QuantParams};
use qfd_core::tensor::{Tape, Tensor};
use qfd_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Independent scalar reference for cross-entropy of one batch.
fn ce_ref(logits: &Tensor<f64>, labels: &[usize]) -> f64 {
    let c = logits.shape()[1];
    let mut total = 0.0;
    for (row, &y) in logits.data().chunks(c).zip(labels) {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        total += z.ln() - row[y];
    }
    total / labels.len() as f64
}

fn mse_ref(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / a.len() as f64
}

struct Case {
    fs: Tensor<f64>,
    ft: Tensor<f64>,
    logits: Tensor<f64>,
    labels: Vec<usize>,
}

fn case() -> Case {
    Case {
        fs: random(&[4, 5], 1),
        ft: random(&[4, 5], 2),
        logits: random(&[4, 3], 3),
        labels: vec![0, 2, 1, 2],
    }
}

fn qfd_value(c: &Case, lambda: f64) -> f64 {
    let mut tape = Tape::new();
    let fs = tape.leaf(c.fs.clone());
    let ft = tape.constant(c.ft.clone());
    let p = tape.leaf(c.logits.clone());
    let parts = qfd_loss(&mut tape, fs, ft, p, &c.labels, lambda).unwrap();
    tape.value(parts.total).item()
}

#[test]
fn qfd_endpoints_and_mix() {
    let c = case();
    let ce = ce_ref(&c.logits, &c.labels);
    let mse = mse_ref(&c.fs, &c.ft);
    assert!((qfd_value(&c, 0.0) - ce).abs() < 1e-14);
    assert!((qfd_value(&c, 1.0) - mse).abs() < 1e-14);
    assert!((qfd_value(&c, 0.3) - (0.3 * mse + 0.7 * ce)).abs() < 1e-14);
    // arithmetic of the weighting: MSE 0.2, CE 1.0 -> 0.6
    assert!((0.5f64 * 0.2 + 0.5 * 1.0 - 0.6).abs() < 1e-15);
}

#[test]
fn qfd_rejects_bad_inputs() {
    let c = case();
    let mut tape = Tape::new();
    let fs = tape.leaf(c.fs.clone());
    let ft = tape.constant(random(&[4, 6], 0));
    let p = tape.leaf(c.logits.clone());
    assert!(matches!(
        qfd_loss(&mut tape, fs, ft, p, &c.labels, 0.5),
        Err(Error::Shape { .. })
    ));
    let ft = tape.constant(c.ft.clone());
    assert!(matches!(
        qfd_loss(&mut tape, fs, ft, p, &c.labels, 1.5),
        Err(Error::Config(_))
    ));
}

#[test]
fn gradients_reach_only_the_student() {
    let c = case();
    let mut tape = Tape::new();
    let fs = tape.leaf(c.fs.clone());
    // even a target that requires grad is detached
    let ft = tape.leaf(c.ft.clone());
    let p = tape.leaf(c.logits.clone());
    let parts = qfd_loss(&mut tape, fs, ft, p, &c.labels, 0.5).unwrap();
    let grads = tape.backward(parts.total).unwrap();
    assert!(grads
        .get(ft)
        .is_none_or(|g| g.data().iter().all(|&v| v == 0.0)));
    let gf = grads.get(fs).unwrap();
    let n = c.fs.len() as f64;
    for ((g, a), b) in gf.data().iter().zip(c.fs.data()).zip(c.ft.data()) {
        assert!((g - 0.5 * 2.0 * (a - b) / n).abs() < 1e-14);
    }
}

#[test]
fn mse_term_is_symmetric() {
    let c = case();
    let swapped = Case {
        fs: c.ft.clone(),
        ft: c.fs.clone(),
        logits: c.logits.clone(),
        labels: c.labels.clone(),
    };
    for lambda in [0.1, 0.5, 1.0] {
        assert_eq!(qfd_value(&c, lambda), qfd_value(&swapped, lambda));
    }
}

#[test]
fn feature_kd_matches_qfd_and_self_distillation() {
    let c = case();
    let mut tape = Tape::new();
    let fs = tape.leaf(c.fs.clone());
    let p = tape.leaf(c.logits.clone());
    let ft = quantize_teacher_feature(&c.ft, None).unwrap();
    assert_eq!(ft, c.ft);
    let ftv = tape.constant(ft);
    let a = feature_kd_loss(&mut tape, fs, ftv, p, &c.labels, 0.5).unwrap();
    let b = qfd_loss(&mut tape, fs, ftv, p, &c.labels, 0.5).unwrap();
    assert_eq!(tape.value(a.total), tape.value(b.total));

    let same = tape.constant(c.fs.clone());
    let d = feature_kd_loss(&mut tape, fs, same, p, &c.labels, 0.5).unwrap();
    let ce = ce_ref(&c.logits, &c.labels);
    assert!((tape.value(d.total).item() - 0.5 * ce).abs() < 1e-14);
}

#[test]
fn teacher_feature_quantization() {
    let f = random(&[8, 16], 5).map(|v| (v + 1.0) / 2.0);
    let one = QuantParams::new(1, QuantMode::Feature);
    let q = quantize_teacher_feature(&f, Some(&one)).unwrap();
    assert!(q.data().iter().all(|&v| v == 0.0 || v == 1.0));
    let four = QuantParams::new(4, QuantMode::Feature);
    let mut levels: Vec<u64> = quantize_teacher_feature(&f, Some(&four))
        .unwrap()
        .data()
        .iter()
        .map(|v| v.to_bits())
        .collect();
    levels.sort_unstable();
    levels.dedup();
    assert!(levels.len() <= 16);
    let weight = QuantParams::new(4, QuantMode::Weight);
    assert!(matches!(
        quantize_teacher_feature(&f, Some(&weight)),
        Err(Error::QuantParams(_))
    ));
}

fn kd_value(ps: &Tensor<f64>, pt: &Tensor<f64>, labels: &[usize], lambda: f64, temp: f64) -> f64 {
    let mut tape = Tape::new();
    let p = tape.leaf(ps.clone());
    let parts = logit_kd_loss(&mut tape, p, pt, labels, lambda, temp).unwrap();
    tape.value(parts.total).item()
}

#[test]
fn logit_kd_identical_logits_leaves_ce() {
    let c = case();
    let v = kd_value(&c.logits, &c.logits, &c.labels, 0.5, 4.0);
    assert!((v - 0.5 * ce_ref(&c.logits, &c.labels)).abs() < 1e-12);
}

#[test]
fn logit_kd_high_temperature_vanishes() {
    let c = case();
    let pt = random(&[4, 3], 9);
    let v = kd_value(&c.logits, &pt, &c.labels, 1.0, 1e4);
    // T^2 * KL tends to (variance of logit differences) / (2 C), which is
    // small but not zero; the KL itself must vanish
    assert!(v / 1e8 < 1e-4);
    let mut tape = Tape::new();
    let p = tape.leaf(c.logits.clone());
    let soft = tape.mul_scalar(p, 1e-4);
    let kl = tape
        .soft_target_kl(soft, &softmax_rows(&pt, 1e4).unwrap())
        .unwrap();
    assert!(tape.value(kl).item() < 1e-4);
}

#[test]
fn logit_kd_two_class_hand_case() {
    let pt = t(&[1, 2], &[1.0, 0.0]);
    let ps = t(&[1, 2], &[0.0, 1.0]);
    // independent evaluation: q = softmax(pt), r = softmax(ps)
    let (e1, e0) = (1.0f64.exp(), 1.0f64);
    let q = [e1 / (e1 + e0), e0 / (e1 + e0)];
    let r = [q[1], q[0]];
    let kl = q[0] * (q[0] / r[0]).ln() + q[1] * (q[1] / r[1]).ln();
    let ce = -r[0].ln();
    let expected = 0.5 * kl + 0.5 * ce;
    assert!((kd_value(&ps, &pt, &[0], 0.5, 1.0) - expected).abs() < 1e-14);
}

#[test]
fn logit_kd_rejects_nonpositive_temperature() {
    let c = case();
    let mut tape = Tape::new();
    let p = tape.leaf(c.logits.clone());
    assert!(logit_kd_loss(&mut tape, p, &c.logits, &c.labels, 0.5, 0.0).is_err());
}

#[test]
fn config_defaults() {
    let cfg: DistillConfig = serde_json::from_str(r#"{"regime": "qfd"}"#).unwrap();
    assert_eq!(cfg.lambda, 0.5);
    assert_eq!(cfg.kd_temperature, 4.0);
    assert_eq!(u8::from(cfg.teacher_feature_bits), 1);
    assert!(cfg.validate().is_ok());
    assert!(serde_json::from_str::<DistillConfig>(r#"{"regime": "qfd", "lamda": 0.1}"#).is_err());
    assert!(!Regime::Baseline.needs_teacher());
}
