//! Optimizer, schedules, the training/evaluation loops and the regime
//! comparison driver.

mod compare;
mod metrics;
mod optim;

pub use compare::{
    copy_weights, run_comparison, CellResult, ComparisonReport, SuiteConfig, SummaryRow,
    COMPARISON_COLUMNS,
};
pub use metrics::{MetricsRecord, MetricsWriter};
pub use optim::{lr_at, sgd_step, Schedule, SgdState};

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentPolicy, Dataset, Split};
use crate::distill::{regime_loss, DistillConfig, TeacherBundle};
use crate::error::{Error, Result};
use crate::models::{checkpoint, Mode, Model, ModelGrads};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub seed: u64,
    /// Share of `epochs` spent on teacher feature warmup.
    #[serde(default = "d_warmup")]
    pub warmup_fraction: f64,
    /// Learning-rate multiplier for quantizer scalars.
    #[serde(default = "d_one")]
    pub quantizer_lr_scale: f64,
    #[serde(default)]
    pub augment: AugmentPolicy,
    /// Global L2 gradient-norm clip; off unless set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    #[serde(default = "d_eval_batch")]
    pub eval_batch_size: usize,
}

fn d_batch() -> usize {
    64
}
fn d_lr() -> f64 {
    0.004
}
fn d_momentum() -> f64 {
    0.9
}
fn d_wd() -> f64 {
    5e-4
}
fn d_warmup() -> f64 {
    0.1
}
fn d_one() -> f64 {
    1.0
}
fn d_eval_batch() -> usize {
    256
}

impl TrainConfig {
    pub fn new(epochs: usize) -> Self {
        Self {
            epochs,
            batch_size: d_batch(),
            lr: d_lr(),
            momentum: d_momentum(),
            weight_decay: d_wd(),
            schedule: Schedule::default(),
            seed: 0,
            warmup_fraction: d_warmup(),
            quantizer_lr_scale: d_one(),
            augment: AugmentPolicy::default(),
            grad_clip: None,
            eval_batch_size: d_eval_batch(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(Error::Config(format!("train.{field} {msg}")));
        if self.epochs == 0 {
            return fail("epochs", "must be >= 1".into());
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return fail("batch_size", "must be >= 1".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return fail("lr", format!("must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(
                "momentum",
                format!("must be in [0, 1), got {}", self.momentum),
            );
        }
        if !(self.weight_decay >= 0.0) {
            return fail(
                "weight_decay",
                format!("must be >= 0, got {}", self.weight_decay),
            );
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction <= 0.5) {
            return fail(
                "warmup_fraction",
                format!("must be in (0, 0.5], got {}", self.warmup_fraction),
            );
        }
        if !(self.quantizer_lr_scale >= 0.0) {
            return fail(
                "quantizer_lr_scale",
                format!("must be >= 0, got {}", self.quantizer_lr_scale),
            );
        }
        if !(0.0..=1.0).contains(&self.augment.flip_p) {
            return fail(
                "augment.flip_p",
                format!("must be in [0, 1], got {}", self.augment.flip_p),
            );
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return fail("grad_clip", format!("must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub top1: f64,
    pub loss: f64,
}

/// Evaluation-mode top-1 accuracy (percent) and mean cross-entropy.
pub fn evaluate(model: &Model<f32>, data: &Dataset, batch_size: usize) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::Empty(format!("{} split", data.split)));
    }
    let (mut correct, mut loss) = (0usize, 0.0f64);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk);
        let (_, logits) = model.infer(&x)?;
        correct += count_correct(&logits, &y);
        let mut tape = Tape::new();
        let l = tape.constant(logits);
        let ce = tape.softmax_cross_entropy(l, &y)?;
        loss += f64::from(tape.value(ce).item()) * chunk.len() as f64;
    }
    Ok(EvalResult {
        top1: 100.0 * correct as f64 / data.len() as f64,
        loss: loss / data.len() as f64,
    })
}

/// Rows whose first maximal logit equals the label.
pub fn count_correct(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks_exact(c)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
            best == y
        })
        .count()
}

pub struct RunOutput {
    pub model: Model<f32>,
    pub records: Vec<MetricsRecord>,
    /// Total loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub best_top1: f64,
    pub best_epoch: usize,
    pub last_top1: f64,
}

fn clip_gradients(grads: &mut ModelGrads<f32>, max_norm: f64) {
    let sq: f64 = grads
        .params
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|&v| f64::from(v) * f64::from(v))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.params.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

fn check_compatible(model: &Model<f32>, data: &Dataset) -> Result<()> {
    let mut shape = vec![1];
    shape.extend(data.sample_shape());
    model.spec().arch.check_input(&shape)?;
    if data.classes != model.spec().arch.classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes, model predicts {}",
            data.classes,
            model.spec().arch.classes()
        )));
    }
    Ok(())
}

/// Trains `model` under one regime.
///
/// Each epoch shuffles the training set with a generator seeded from
/// `cfg.seed`, runs forward / regime loss / backward / SGD per minibatch,
/// then evaluates. Uncalibrated quantizers are initialized from the first
/// batch before the first step. With `out_dir`, metrics are streamed to
/// `metrics.csv` / `metrics.jsonl` and `best` / `last` checkpoints written.
pub fn train_one(
    distill: &DistillConfig,
    mut model: Model<f32>,
    teacher: Option<&TeacherBundle>,
    train: &Dataset,
    eval: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<RunOutput> {
    cfg.validate()?;
    distill.validate()?;
    check_compatible(&model, train)?;
    check_compatible(&model, eval)?;
    match (distill.regime.needs_teacher(), teacher) {
        (true, None) => {
            return Err(Error::Config(format!(
                "regime {} requires a teacher",
                distill.regime
            )))
        }
        (false, Some(_)) => return Err(Error::Config("baseline regime takes no teacher".into())),
        (true, Some(t)) => {
            if t.feature_bits() != distill.effective_teacher_bits() {
                return Err(Error::Config(format!(
                    "teacher feature is {}-bit but the regime expects {}-bit",
                    t.feature_bits(),
                    distill.effective_teacher_bits()
                )));
            }
            if t.model().spec().arch.feature_dim() != model.spec().arch.feature_dim() {
                return Err(Error::Config(
                    "teacher and student feature widths differ".into(),
                ));
            }
            check_compatible(t.model(), train)?;
        }
        (false, None) => {}
    }
    if !train.is_image() && !cfg.augment.is_identity() {
        return Err(Error::Config("train.augment requires image data".into()));
    }

    let start = Instant::now();
    let mut writer = out_dir.map(MetricsWriter::create).transpose()?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(1);
    let mut state = SgdState::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::new();
    let mut step_losses = Vec::new();
    let (mut best_top1, mut best_epoch, mut last_top1) = (f64::NEG_INFINITY, 0, 0.0);

    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg, epoch);
        order.shuffle(&mut shuffle_rng);
        let (mut sum_loss, mut sum_distill, mut sum_ce, mut correct) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train.batch(chunk);
            let x = if cfg.augment.is_identity() {
                x
            } else {
                augment(&x, &cfg.augment, &mut aug_rng)?
            };
            if !model.is_calibrated() {
                model.calibrate(&x)?;
            }
            let targets = teacher.map(|t| t.targets(&x)).transpose()?;

            let mut tape = Tape::new();
            let bind = model.bind(&mut tape, true);
            let xv = tape.constant(x);
            let out = model.forward(&mut tape, &bind, xv, Mode::Train)?;
            let parts = regime_loss(
                &mut tape,
                distill,
                out.feature,
                out.logits,
                &y,
                targets.as_ref(),
            )?;
            let (total, d, c) = parts.values(&tape);
            if !total.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss is {total} at epoch {epoch}"
                )));
            }
            let grads = tape.backward(parts.total)?;
            let mut mg = bind.collect(&grads);
            if let Some(max) = cfg.grad_clip {
                clip_gradients(&mut mg, max);
            }
            correct += count_correct(tape.value(out.logits), &y);
            drop(tape);
            sgd_step(&mut model, &mg, &mut state, cfg, lr)?;
            model.update_running_stats(&out.bn_stats);

            let n = chunk.len() as f64;
            step_losses.push(total);
            sum_loss += total * n;
            sum_distill += d * n;
            sum_ce += c * n;
        }
        let n = train.len() as f64;
        let wall = start.elapsed().as_secs_f64();
        let train_rec = MetricsRecord {
            epoch,
            split: Split::Train,
            loss: sum_loss / n,
            top1: 100.0 * correct as f64 / n,
            distill_loss_component: sum_distill / n,
            ce_component: sum_ce / n,
            lr,
            wall_time_s: wall,
        };
        let ev = evaluate(&model, eval, cfg.eval_batch_size)?;
        let eval_rec = MetricsRecord {
            epoch,
            split: Split::Eval,
            loss: ev.loss,
            top1: ev.top1,
            distill_loss_component: 0.0,
            ce_component: ev.loss,
            lr,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch:>3}  lr {lr:.5}  train loss {:.4} top1 {:.2}  eval loss {:.4} top1 {:.2}",
            train_rec.loss,
            train_rec.top1,
            ev.loss,
            ev.top1
        );
        for rec in [train_rec, eval_rec] {
            if let Some(w) = writer.as_mut() {
                w.write(&rec)?;
            }
            records.push(rec);
        }
        last_top1 = ev.top1;
        if ev.top1 > best_top1 {
            best_top1 = ev.top1;
            best_epoch = epoch;
            if let Some(dir) = out_dir {
                let meta =
                    serde_json::json!({"epoch": epoch, "eval_top1": ev.top1, "kind": "best"});
                checkpoint::save(&model, dir, "best", meta)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        let meta =
            serde_json::json!({"epoch": cfg.epochs - 1, "eval_top1": last_top1, "kind": "last"});
        checkpoint::save(&model, dir, "last", meta)?;
    }
    if !model.all_finite() {
        return Err(Error::Numerical(
            "model parameters became non-finite".into(),
        ));
    }
    Ok(RunOutput {
        model,
        records,
        step_losses,
        best_top1,
        best_epoch,
        last_top1,
    })
}
