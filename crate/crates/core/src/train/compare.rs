use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, train_one, TrainConfig};
use crate::data::Dataset;
use crate::distill::{
    teacher_warmup, DistillConfig, Regime, TeacherBundle, WarmupReport, DEFAULT_KD_TEMPERATURE,
};
use crate::error::{Error, Result};
use crate::models::{build_model, BitPair, Model, ModelSpec, QuantPolicy};
use crate::quantizer::BitWidth;

/// Column order of `comparison.csv`.
pub const COMPARISON_COLUMNS: [&str; 10] = [
    "regime",
    "bits",
    "teacher_feature_bits",
    "lambda",
    "runs",
    "failed",
    "mean_top1",
    "std_top1",
    "mean_best_top1",
    "std_best_top1",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    #[serde(default)]
    pub regimes: Vec<Regime>,
    #[serde(default)]
    pub bits: Vec<BitPair>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Teacher feature widths swept by QFD cells.
    #[serde(default = "d_teacher_bits")]
    pub teacher_feature_bits: Vec<BitWidth>,
    /// Distillation weights swept by every distillation regime.
    #[serde(default = "d_lambdas")]
    pub lambdas: Vec<f64>,
    #[serde(default = "d_temperature")]
    pub kd_temperature: f64,
    /// Start every student from the full-precision teacher's weights.
    #[serde(default = "d_true")]
    pub init_from_teacher: bool,
    /// Epochs for training the full-precision teacher; defaults to the
    /// student schedule length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_epochs: Option<usize>,
    /// Learning rate of the teacher feature warmup; defaults to `train.lr`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_lr: Option<f64>,
    #[serde(default)]
    pub teacher_seed: u64,
}

fn d_teacher_bits() -> Vec<BitWidth> {
    vec![BitWidth::Bits(1)]
}
fn d_lambdas() -> Vec<f64> {
    vec![0.5]
}
fn d_temperature() -> f64 {
    DEFAULT_KD_TEMPERATURE
}
fn d_true() -> bool {
    true
}

impl SuiteConfig {
    pub fn new(regimes: Vec<Regime>, bits: Vec<BitPair>, seeds: Vec<u64>) -> Self {
        Self {
            regimes,
            bits,
            seeds,
            teacher_feature_bits: d_teacher_bits(),
            lambdas: d_lambdas(),
            kd_temperature: d_temperature(),
            init_from_teacher: true,
            teacher_epochs: None,
            warmup_lr: None,
            teacher_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for &lambda in &self.lambdas {
            DistillConfig::new(Regime::Qfd)
                .with_lambda(lambda)
                .validate()?;
        }
        for &b in &self.teacher_feature_bits {
            DistillConfig::new(Regime::Qfd)
                .with_teacher_bits(b)
                .validate()?;
        }
        if let Some(lr) = self.warmup_lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!(
                    "compare.warmup_lr must be positive, got {lr}"
                )));
            }
        }
        if self.teacher_epochs == Some(0) {
            return Err(Error::Config("compare.teacher_epochs must be >= 1".into()));
        }
        Ok(())
    }

    /// All cells in deterministic order.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::new();
        for &regime in &self.regimes {
            for &bits in &self.bits {
                let variants: Vec<(Option<BitWidth>, Option<f64>)> = match regime {
                    Regime::Baseline => vec![(None, None)],
                    Regime::Qfd => self
                        .teacher_feature_bits
                        .iter()
                        .flat_map(|&t| self.lambdas.iter().map(move |&l| (Some(t), Some(l))))
                        .collect(),
                    Regime::FeatureKd | Regime::LogitKd => self
                        .lambdas
                        .iter()
                        .map(|&l| (Some(BitWidth::Fp), Some(l)))
                        .collect(),
                };
                for (teacher_bits, lambda) in variants {
                    for &seed in &self.seeds {
                        out.push(CellKey {
                            regime,
                            bits,
                            teacher_feature_bits: teacher_bits,
                            lambda,
                            seed,
                        });
                    }
                }
            }
        }
        out
    }

    fn distill_config(&self, key: &CellKey) -> DistillConfig {
        let mut cfg = DistillConfig::new(key.regime);
        cfg.kd_temperature = self.kd_temperature;
        if let Some(l) = key.lambda {
            cfg.lambda = l;
        }
        if let Some(b) = key.teacher_feature_bits {
            cfg.teacher_feature_bits = b;
        }
        cfg
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub regime: Regime,
    pub bits: BitPair,
    pub teacher_feature_bits: Option<BitWidth>,
    pub lambda: Option<f64>,
    pub seed: u64,
}

impl CellKey {
    fn dir_name(&self) -> String {
        let mut s = format!("{}_w{}a{}", self.regime, self.bits.weight, self.bits.act);
        if let Some(t) = self.teacher_feature_bits {
            s += &format!("_t{t}");
        }
        if let Some(l) = self.lambda {
            s += &format!("_l{l}");
        }
        s + &format!("_s{}", self.seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    #[serde(flatten)]
    pub key: CellKey,
    pub last_top1: Option<f64>,
    pub best_top1: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub regime: Regime,
    pub bits: BitPair,
    pub teacher_feature_bits: Option<BitWidth>,
    pub lambda: Option<f64>,
    pub runs: usize,
    pub failed: usize,
    pub mean_top1: f64,
    pub std_top1: f64,
    pub mean_best_top1: f64,
    pub std_best_top1: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub teacher_top1: Option<f64>,
    pub warmups: Vec<WarmupReport>,
    pub cells: Vec<CellResult>,
    pub summary: Vec<SummaryRow>,
}

impl ComparisonReport {
    pub fn row(
        &self,
        regime: Regime,
        teacher_bits: Option<BitWidth>,
        lambda: Option<f64>,
    ) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| {
            r.regime == regime && r.teacher_feature_bits == teacher_bits && r.lambda == lambda
        })
    }

    /// Writes `comparison.csv` (columns as in [`COMPARISON_COLUMNS`]) and
    /// `comparison.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("comparison.csv"))?;
        w.write_record(COMPARISON_COLUMNS)?;
        for r in &self.summary {
            w.write_record([
                r.regime.to_string(),
                r.bits.to_string(),
                r.teacher_feature_bits
                    .map(|b| b.to_string())
                    .unwrap_or_default(),
                r.lambda.map(|l| l.to_string()).unwrap_or_default(),
                r.runs.to_string(),
                r.failed.to_string(),
                format!("{:.4}", r.mean_top1),
                format!("{:.4}", r.std_top1),
                format!("{:.4}", r.mean_best_top1),
                format!("{:.4}", r.std_best_top1),
            ])?;
        }
        w.flush()?;
        std::fs::write(
            dir.join("comparison.json"),
            serde_json::to_vec_pretty(self)?,
        )?;
        Ok(())
    }
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn summarize(cells: &[CellResult]) -> Vec<SummaryRow> {
    type Key = (Regime, BitPair, Option<BitWidth>, Option<u64>);
    let mut groups: BTreeMap<Key, Vec<&CellResult>> = BTreeMap::new();
    let mut order: Vec<Key> = Vec::new();
    for c in cells {
        let k = (
            c.key.regime,
            c.key.bits,
            c.key.teacher_feature_bits,
            c.key.lambda.map(f64::to_bits),
        );
        if !groups.contains_key(&k) {
            order.push(k);
        }
        groups.entry(k).or_default().push(c);
    }
    order
        .into_iter()
        .map(|k| {
            let g = &groups[&k];
            let last: Vec<f64> = g.iter().filter_map(|c| c.last_top1).collect();
            let best: Vec<f64> = g.iter().filter_map(|c| c.best_top1).collect();
            let (mean_top1, std_top1) = mean_std(&last);
            let (mean_best_top1, std_best_top1) = mean_std(&best);
            SummaryRow {
                regime: k.0,
                bits: k.1,
                teacher_feature_bits: k.2,
                lambda: k.3.map(f64::from_bits),
                runs: g.len(),
                failed: g.iter().filter(|c| c.error.is_some()).count(),
                mean_top1,
                std_top1,
                mean_best_top1,
                std_best_top1,
            }
        })
        .collect()
}

/// Worker count for comparison cells: `QFD_THREADS` if set, else all cores.
pub fn comparison_threads() -> usize {
    std::env::var("QFD_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Copies every parameter and buffer of `src` into `dst` by name.
pub fn copy_weights(dst: &mut Model<f32>, src: &Model<f32>) -> Result<()> {
    for p in dst.params_mut() {
        let s = src
            .param(&p.name)
            .ok_or_else(|| Error::Config(format!("teacher has no parameter {}", p.name)))?;
        if s.value.shape() != p.value.shape() {
            return Err(Error::shape(
                "copy_weights",
                s.value.shape(),
                p.value.shape(),
            ));
        }
        p.value = s.value.clone();
    }
    let src_buffers = src.buffers();
    for b in dst.buffers_mut() {
        if let Some(s) = src_buffers.iter().find(|s| s.name == b.name) {
            b.value = s.value.clone();
        }
    }
    Ok(())
}

/// Runs every cell of `suite`.
///
/// A full-precision teacher is trained first (unless `teacher` is given),
/// then warmed up once per distinct teacher feature width; all cells that
/// share a width share that bundle. Cells run on a pool of
/// [`comparison_threads`] workers, each fully isolated, and results are
/// joined in cell order. A failing cell is recorded and the suite goes on.
pub fn run_comparison(
    suite: &SuiteConfig,
    student_spec: &ModelSpec,
    train: &Dataset,
    eval: &Dataset,
    cfg: &TrainConfig,
    teacher: Option<Model<f32>>,
    out_dir: Option<&Path>,
) -> Result<ComparisonReport> {
    suite.validate()?;
    cfg.validate()?;
    let cells = suite.cells();
    if cells.is_empty() {
        let report = ComparisonReport::default();
        if let Some(dir) = out_dir {
            report.write(dir)?;
        }
        return Ok(report);
    }
    let needs_teacher = suite.init_from_teacher || cells.iter().any(|c| c.regime.needs_teacher());
    // warmup length is a fraction of the teacher's own schedule
    let teacher_cfg = TrainConfig {
        epochs: suite.teacher_epochs.unwrap_or(cfg.epochs),
        seed: suite.teacher_seed,
        ..cfg.clone()
    };
    let warm_cfg = TrainConfig {
        lr: suite.warmup_lr.unwrap_or(cfg.lr),
        ..teacher_cfg.clone()
    };
    let teacher = match (teacher, needs_teacher) {
        (Some(t), _) => Some(t),
        (None, false) => None,
        (None, true) => {
            let spec = ModelSpec::new(student_spec.arch.clone(), QuantPolicy::full_precision());
            let model = build_model(&spec, suite.teacher_seed)?;
            let dir = out_dir.map(|d| d.join("teacher"));
            log::info!(
                "training full-precision teacher for {} epochs",
                teacher_cfg.epochs
            );
            let run = train_one(
                &DistillConfig::baseline(),
                model,
                None,
                train,
                eval,
                &teacher_cfg,
                dir.as_deref(),
            )?;
            Some(run.model)
        }
    };
    let teacher_top1 = teacher
        .as_ref()
        .map(|t| evaluate(t, eval, cfg.eval_batch_size))
        .transpose()?
        .map(|r| r.top1);

    let mut widths: Vec<BitWidth> = cells
        .iter()
        .filter_map(|c| c.teacher_feature_bits)
        .collect();
    widths.sort();
    widths.dedup();
    let mut bundles: BTreeMap<BitWidth, TeacherBundle> = BTreeMap::new();
    let mut warmups = Vec::new();
    if let Some(t) = &teacher {
        for w in widths {
            log::info!("teacher feature warmup at {w} bits");
            let (bundle, report) = teacher_warmup(t.clone(), train, eval, w, &warm_cfg, 0.0)?;
            bundles.insert(w, bundle);
            warmups.push(report);
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(comparison_threads())
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let run_cell = |key: &CellKey| -> Result<(f64, f64)> {
        let mut spec = student_spec.clone();
        spec.policy.bits = key.bits;
        let mut student: Model<f32> = build_model(&spec, key.seed)?;
        if suite.init_from_teacher {
            copy_weights(
                &mut student,
                teacher.as_ref().expect("teacher is trained when needed"),
            )?;
        }
        let bundle = key.teacher_feature_bits.map(|w| &bundles[&w]);
        let dcfg = suite.distill_config(key);
        let ccfg = TrainConfig {
            seed: key.seed,
            ..cfg.clone()
        };
        let dir = out_dir.map(|d| d.join("cells").join(key.dir_name()));
        let run = train_one(&dcfg, student, bundle, train, eval, &ccfg, dir.as_deref())?;
        Ok((run.last_top1, run.best_top1))
    };
    let results: Vec<CellResult> = pool.install(|| {
        cells
            .par_iter()
            .map(|key| {
                let r = run_cell(key);
                if let Err(e) = &r {
                    log::warn!("cell {} failed: {e}", key.dir_name());
                }
                CellResult {
                    key: *key,
                    last_top1: r.as_ref().ok().map(|v| v.0),
                    best_top1: r.as_ref().ok().map(|v| v.1),
                    error: r.err().map(|e| e.to_string()),
                }
            })
            .collect()
    });
    let report = ComparisonReport {
        teacher_top1,
        warmups,
        summary: summarize(&results),
        cells: results,
    };
    if let Some(dir) = out_dir {
        report.write(dir)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_bookkeeping() {
        let bits: BitPair = "2/2".parse().unwrap();
        let suite = SuiteConfig::new(
            vec![Regime::Baseline, Regime::Qfd],
            vec![bits],
            (0..5).collect(),
        );
        let cells = suite.cells();
        assert_eq!(cells.len(), 10);
        let fake: Vec<CellResult> = cells
            .iter()
            .map(|k| CellResult {
                key: *k,
                last_top1: Some(k.seed as f64),
                best_top1: Some(k.seed as f64),
                error: None,
            })
            .collect();
        let rows = summarize(&fake);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].regime, Regime::Baseline);
        assert_eq!(rows[1].runs, 5);
        assert_eq!(rows[1].mean_top1, 2.0);
        assert!((rows[1].std_top1 - 2.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn teacher_bit_sweep_adds_cells() {
        let mut suite = SuiteConfig::new(vec![Regime::Qfd], vec!["2/2".parse().unwrap()], vec![0]);
        suite.teacher_feature_bits = vec![BitWidth::Bits(1), BitWidth::Fp];
        let widths: Vec<_> = suite
            .cells()
            .iter()
            .map(|c| c.teacher_feature_bits)
            .collect();
        assert_eq!(widths, [Some(BitWidth::Bits(1)), Some(BitWidth::Fp)]);
    }
}
