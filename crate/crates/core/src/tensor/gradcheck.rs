//! Central finite-difference checks of tape gradients.
//!
//! The analytic side comes from one [`Tape::backward`]; the numeric side only
//! ever evaluates the forward pass. Probes whose perturbation flips a ReLU
//! or quantizer cell are skipped since the function is not differentiable
//! across them.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;

use super::{Tape, Tensor, Var};

/// Below this magnitude both gradients are treated as zero when forming the
/// relative error.
pub const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug)]
pub struct GradcheckConfig {
    pub eps: f64,
    pub tolerance: f64,
    /// Upper bound on probed elements; every element is probed when the
    /// inputs are smaller than this.
    pub probes: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            tolerance: 1e-3,
            probes: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub probes: usize,
    pub skipped: usize,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.probes > 0 && self.max_rel_err <= self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares the tape gradient of `f` with respect to every tensor in `inputs`
/// against central differences.
///
/// `f` receives the inputs as leaves on a fresh tape and must return a scalar.
pub fn check<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    mut f: F,
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let base_sig = tape.kink_signature();
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();
    drop(tape);

    let offsets: Vec<usize> = inputs
        .iter()
        .scan(0, |acc, t| {
            let start = *acc;
            *acc += t.len();
            Some(start)
        })
        .collect();
    let total: usize = inputs.iter().map(|t| t.len()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut picks: Vec<usize> = if total <= cfg.probes {
        (0..total).collect()
    } else {
        sample(&mut rng, total, cfg.probes).into_vec()
    };
    picks.sort_unstable();

    let mut eval = |inputs: &[Tensor<f64>]| -> Result<(f64, Vec<i64>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok((tape.value(loss).item(), tape.kink_signature()))
    };

    let mut report = GradcheckReport {
        name: name.to_string(),
        max_rel_err: 0.0,
        probes: 0,
        skipped: 0,
        tolerance: cfg.tolerance,
    };
    let mut work = inputs.to_vec();
    for flat in picks {
        let which = offsets.partition_point(|&o| o <= flat) - 1;
        let idx = flat - offsets[which];
        let orig = work[which].data()[idx];
        work[which].data_mut()[idx] = orig + cfg.eps;
        let (plus, sig_plus) = eval(&work)?;
        work[which].data_mut()[idx] = orig - cfg.eps;
        let (minus, sig_minus) = eval(&work)?;
        work[which].data_mut()[idx] = orig;
        if sig_plus != base_sig || sig_minus != base_sig {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * cfg.eps);
        let err = relative_error(analytic[which].data()[idx], numeric);
        report.max_rel_err = report.max_rel_err.max(err);
        report.probes += 1;
    }
    Ok(report)
}
