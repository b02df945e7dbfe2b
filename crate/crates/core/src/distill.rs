//! Training objectives: plain QAT, feature KD, logit KD and quantized
//! feature distillation (QFD), plus teacher feature-quantization warmup.
//!
//! The teacher always runs on its own tape in evaluation mode and its
//! outputs enter the student's tape as constants, so no gradient can reach
//! teacher parameters.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::quantizer::{fake_quant_forward, BitWidth, QuantMode, QuantParams};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::train::{evaluate, train_one, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Baseline,
    FeatureKd,
    LogitKd,
    Qfd,
}

impl Regime {
    pub fn needs_teacher(self) -> bool {
        self != Regime::Baseline
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Baseline => "baseline",
            Regime::FeatureKd => "feature_kd",
            Regime::LogitKd => "logit_kd",
            Regime::Qfd => "qfd",
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const DEFAULT_LAMBDA: f64 = 0.5;
pub const DEFAULT_KD_TEMPERATURE: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub regime: Regime,
    /// Weight of the distillation term; `1 - lambda` weights cross-entropy.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Bit width of the teacher feature for QFD; 32 means full precision.
    #[serde(default = "default_teacher_bits")]
    pub teacher_feature_bits: BitWidth,
    #[serde(default = "default_temperature")]
    pub kd_temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_checkpoint: Option<PathBuf>,
    /// Teachers below this eval top-1 trigger a warning before warmup.
    #[serde(default = "default_teacher_floor")]
    pub teacher_min_top1: f64,
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

fn default_teacher_bits() -> BitWidth {
    BitWidth::Bits(1)
}

fn default_temperature() -> f64 {
    DEFAULT_KD_TEMPERATURE
}

fn default_teacher_floor() -> f64 {
    50.0
}

impl DistillConfig {
    pub fn new(regime: Regime) -> Self {
        Self {
            regime,
            lambda: DEFAULT_LAMBDA,
            teacher_feature_bits: match regime {
                Regime::Qfd => default_teacher_bits(),
                _ => BitWidth::Fp,
            },
            kd_temperature: DEFAULT_KD_TEMPERATURE,
            teacher_checkpoint: None,
            teacher_min_top1: default_teacher_floor(),
        }
    }

    pub fn baseline() -> Self {
        Self::new(Regime::Baseline)
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_teacher_bits(mut self, bits: BitWidth) -> Self {
        self.teacher_feature_bits = bits;
        self
    }

    /// Teacher feature precision actually used by the regime.
    pub fn effective_teacher_bits(&self) -> BitWidth {
        match self.regime {
            Regime::Qfd => self.teacher_feature_bits,
            _ => BitWidth::Fp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "distill.lambda must be in [0, 1], got {}",
                self.lambda
            )));
        }
        if !matches!(u8::from(self.teacher_feature_bits), 1 | 2 | 4 | 8 | 32) {
            return Err(Error::Config(format!(
                "distill.teacher_feature_bits must be one of 1, 2, 4, 8, 32, got {}",
                self.teacher_feature_bits
            )));
        }
        if !(self.kd_temperature > 0.0) || !self.kd_temperature.is_finite() {
            return Err(Error::Config(format!(
                "distill.kd_temperature must be positive, got {}",
                self.kd_temperature
            )));
        }
        Ok(())
    }
}

/// Total loss plus its two weighted components (which sum to it).
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    /// `lambda * distill`, absent when the term is skipped.
    pub distill: Option<Var>,
    /// `(1 - lambda) * CE`, absent when `lambda == 1`.
    pub ce: Option<Var>,
}

impl LossParts {
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> (f64, f64, f64) {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item().as_f64());
        (
            tape.value(self.total).item().as_f64(),
            get(self.distill),
            get(self.ce),
        )
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "lambda must be in [0, 1], got {lambda}"
        )))
    }
}

/// `lambda * term + (1 - lambda) * CE`; a zero-weighted side is not built.
fn combine<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    lambda: f64,
    term: impl FnOnce(&mut Tape<T>) -> Result<Var>,
) -> Result<LossParts> {
    check_lambda(lambda)?;
    let distill = if lambda > 0.0 {
        let d = term(tape)?;
        Some(if lambda == 1.0 {
            d
        } else {
            tape.mul_scalar(d, T::lit(lambda))
        })
    } else {
        None
    };
    let ce = if lambda < 1.0 {
        let c = tape.softmax_cross_entropy(logits, labels)?;
        Some(if lambda == 0.0 {
            c
        } else {
            tape.mul_scalar(c, T::lit(1.0 - lambda))
        })
    } else {
        None
    };
    let total = match (distill, ce) {
        (Some(d), Some(c)) => tape.add(d, c)?,
        (Some(v), None) | (None, Some(v)) => v,
        (None, None) => unreachable!("lambda is either > 0 or < 1"),
    };
    Ok(LossParts { total, distill, ce })
}

/// The regression target as a tape constant, detached from any graph.
fn detached<T: Scalar>(tape: &mut Tape<T>, f: Var) -> Var {
    if tape.requires_grad(f) {
        tape.constant(tape.value(f).clone())
    } else {
        f
    }
}

/// `lambda * MSE(f_s, f_t_bar) + (1 - lambda) * CE(y, p_s)`.
pub fn qfd_loss<T: Scalar>(
    tape: &mut Tape<T>,
    f_s: Var,
    f_t_bar: Var,
    logits: Var,
    labels: &[usize],
    lambda: f64,
) -> Result<LossParts> {
    if tape.shape(f_s) != tape.shape(f_t_bar) {
        return Err(Error::shape(
            "qfd_loss",
            tape.shape(f_s),
            tape.shape(f_t_bar),
        ));
    }
    let target = detached(tape, f_t_bar);
    combine(tape, logits, labels, lambda, |t| t.mse(f_s, target))
}

/// Feature distillation against the full-precision teacher feature.
pub fn feature_kd_loss<T: Scalar>(
    tape: &mut Tape<T>,
    f_s: Var,
    f_t: Var,
    logits: Var,
    labels: &[usize],
    lambda: f64,
) -> Result<LossParts> {
    qfd_loss(tape, f_s, f_t, logits, labels, lambda)
}

/// Row-wise `softmax(logits / temperature)`.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    let &[n, c] = logits.shape() else {
        return Err(Error::shape("softmax_rows", logits.shape(), &[0, 0]));
    };
    let t = T::lit(temperature);
    let mut out = Vec::with_capacity(n * c);
    for row in logits.data().chunks_exact(c) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b / t));
        let e: Vec<T> = row.iter().map(|&v| (v / t - m).exp()).collect();
        let z: T = e.iter().copied().sum();
        out.extend(e.into_iter().map(|v| v / z));
    }
    Tensor::new(&[n, c], out)
}

/// `lambda * T^2 * KL(softmax(p_t / T) ‖ softmax(p_s / T)) + (1 - lambda) * CE(y, p_s)`.
pub fn logit_kd_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    teacher_logits: &Tensor<T>,
    labels: &[usize],
    lambda: f64,
    temperature: f64,
) -> Result<LossParts> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Config(format!(
            "kd temperature must be positive, got {temperature}"
        )));
    }
    if tape.shape(logits) != teacher_logits.shape() {
        return Err(Error::shape(
            "logit_kd_loss",
            tape.shape(logits),
            teacher_logits.shape(),
        ));
    }
    combine(tape, logits, labels, lambda, |tape| {
        let target = softmax_rows(teacher_logits, temperature)?;
        let soft = tape.mul_scalar(logits, T::lit(1.0 / temperature));
        let kl = tape.soft_target_kl(soft, &target)?;
        Ok(tape.mul_scalar(kl, T::lit(temperature * temperature)))
    })
}

/// Fake-quantizes a teacher feature; `None` (32-bit) passes it through.
pub fn quantize_teacher_feature<T: Scalar>(
    f_t: &Tensor<T>,
    q: Option<&QuantParams>,
) -> Result<Tensor<T>> {
    match q {
        None => Ok(f_t.clone()),
        Some(q) if q.mode != QuantMode::Feature => Err(Error::QuantParams(format!(
            "teacher feature quantizer must be in feature mode, got {:?}",
            q.mode
        ))),
        Some(q) => fake_quant_forward(f_t, q),
    }
}

/// Teacher outputs for one student batch.
pub struct TeacherTargets {
    /// Pooled feature, already quantized when the bundle has a feature quantizer.
    pub feature: Tensor<f32>,
    pub logits: Tensor<f32>,
}

/// Frozen teacher whose pooled feature is optionally fake-quantized.
///
/// The feature quantizer lives inside the model (between pooling and the
/// classifier), so checkpoints of the bundle carry its scalars.
#[derive(Clone, Debug)]
pub struct TeacherBundle {
    model: Model<f32>,
}

impl TeacherBundle {
    /// Wraps a trained model; its feature quantizer (if any) must be calibrated.
    pub fn new(model: Model<f32>) -> Result<Self> {
        if let Some(site) = model.feature_quantizer() {
            if !site.calibrated {
                return Err(Error::Config(
                    "teacher feature quantizer was never calibrated".into(),
                ));
            }
        }
        Ok(Self { model })
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn feature_bits(&self) -> BitWidth {
        self.model.spec().feature_bits
    }

    pub fn feature_quant(&self) -> Option<&QuantParams> {
        self.model.feature_quantizer().map(|s| &s.params)
    }

    /// Evaluation-mode teacher forward on its own tape.
    pub fn targets(&self, x: &Tensor<f32>) -> Result<TeacherTargets> {
        let (feature, logits) = self.model.infer(x)?;
        Ok(TeacherTargets { feature, logits })
    }
}

/// Builds the regime's loss for one batch on the student tape.
pub fn regime_loss(
    tape: &mut Tape<f32>,
    cfg: &DistillConfig,
    feature: Var,
    logits: Var,
    labels: &[usize],
    teacher: Option<&TeacherTargets>,
) -> Result<LossParts> {
    let need = || {
        teacher.ok_or_else(|| Error::Config(format!("regime {} requires a teacher", cfg.regime)))
    };
    match cfg.regime {
        Regime::Baseline => combine(tape, logits, labels, 0.0, |_| {
            unreachable!("baseline has no distill term")
        }),
        Regime::FeatureKd | Regime::Qfd => {
            let t = need()?;
            let target = tape.constant(t.feature.clone());
            qfd_loss(tape, feature, target, logits, labels, cfg.lambda)
        }
        Regime::LogitKd => {
            let t = need()?;
            logit_kd_loss(
                tape,
                logits,
                &t.logits,
                labels,
                cfg.lambda,
                cfg.kd_temperature,
            )
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupReport {
    pub bits: BitWidth,
    pub epochs: usize,
    pub top1_before: f64,
    pub top1_after: f64,
}

/// Number of warmup epochs: `ceil(total_epochs * warmup_fraction)`.
pub fn warmup_epochs(cfg: &TrainConfig) -> usize {
    ((cfg.epochs as f64 * cfg.warmup_fraction).ceil() as usize).max(1)
}

/// Inserts a feature-mode quantizer after the teacher's pooled feature and
/// fine-tunes the whole teacher (weights and quantizer) with cross-entropy
/// through the quantized feature. `bits = 32` returns the teacher unchanged.
pub fn teacher_warmup(
    teacher: Model<f32>,
    train: &Dataset,
    eval: &Dataset,
    bits: BitWidth,
    cfg: &TrainConfig,
    min_top1: f64,
) -> Result<(TeacherBundle, WarmupReport)> {
    let before = evaluate(&teacher, eval, cfg.eval_batch_size)?.top1;
    if before < min_top1 {
        log::warn!("teacher top-1 {before:.2} is below the configured floor {min_top1:.2}");
    }
    if bits.is_fp() {
        let mut model = teacher;
        model.set_feature_quantizer(BitWidth::Fp);
        let report = WarmupReport {
            bits,
            epochs: 0,
            top1_before: before,
            top1_after: before,
        };
        return Ok((TeacherBundle::new(model)?, report));
    }
    let mut model = teacher;
    model.set_feature_quantizer(bits);
    let epochs = warmup_epochs(cfg);
    let warm_cfg = TrainConfig {
        epochs,
        ..cfg.clone()
    };
    let run = train_one(
        &DistillConfig::baseline(),
        model,
        None,
        train,
        eval,
        &warm_cfg,
        None,
    )?;
    let report = WarmupReport {
        bits,
        epochs,
        top1_before: before,
        top1_after: run.last_top1,
    };
    Ok((TeacherBundle::new(run.model)?, report))
}
