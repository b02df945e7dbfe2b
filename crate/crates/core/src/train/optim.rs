use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::models::{Model, ModelGrads, ParamKind};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
    Step,
    Constant,
}

/// Learning rate for `epoch` in `[0, epochs)`.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    let (e, total) = (epoch as f64, cfg.epochs as f64);
    match cfg.schedule {
        Schedule::Constant => cfg.lr,
        Schedule::Cosine => cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * e / total).cos()),
        Schedule::Step => {
            let frac = e / total;
            let decays = usize::from(frac >= 0.5) + usize::from(frac >= 0.75);
            cfg.lr * 0.1f64.powi(decays as i32)
        }
    }
}

/// Momentum buffers, created lazily on the first step.
#[derive(Clone, Debug, Default)]
pub struct SgdState {
    params: Vec<Vec<f32>>,
    /// `[lower, upper, alpha]` per quantizer.
    quant: Vec<[f64; 3]>,
}

impl SgdState {
    pub fn new() -> Self {
        Self::default()
    }
}

fn finite_or_abort(model: &Model<f32>, grads: &ModelGrads<f32>) -> Result<()> {
    for (p, g) in model.params().iter().zip(&grads.params) {
        if let Some(g) = g {
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient {} at {}[{i}]",
                    g.data()[i],
                    p.name
                )));
            }
        }
    }
    for (site, g) in model.quantizers().iter().zip(&grads.quant) {
        if !g.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite quantizer gradient at {}: {g:?}",
                site.name
            )));
        }
    }
    Ok(())
}

/// One momentum-SGD step: `m = mu * m + g + wd * theta; theta -= lr * m`.
///
/// Weight decay skips norm parameters and quantizer scalars. Quantizers use
/// `lr * quantizer_lr_scale` and are projected back onto their feasible set
/// afterwards. A non-finite gradient aborts before anything is modified.
pub fn sgd_step(
    model: &mut Model<f32>,
    grads: &ModelGrads<f32>,
    state: &mut SgdState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    finite_or_abort(model, grads)?;
    if state.params.is_empty() {
        state.params = model
            .params()
            .iter()
            .map(|p| vec![0.0; p.value.len()])
            .collect();
        state.quant = vec![[0.0; 3]; model.quantizers().len()];
    }
    let (mu, lr32) = (cfg.momentum as f32, lr as f32);
    for ((p, g), m) in model
        .params_mut()
        .iter_mut()
        .zip(&grads.params)
        .zip(&mut state.params)
    {
        let wd = if p.kind == ParamKind::Norm {
            0.0
        } else {
            cfg.weight_decay as f32
        };
        let g = g.as_ref().map(|g| g.data());
        for (i, (theta, m)) in p.value.data_mut().iter_mut().zip(m.iter_mut()).enumerate() {
            let gi = g.map_or(0.0, |g| g[i]);
            *m = mu * *m + gi + wd * *theta;
            *theta -= lr32 * *m;
        }
    }
    let qlr = lr * cfg.quantizer_lr_scale;
    for ((site, g), m) in model
        .quantizers_mut()
        .iter_mut()
        .zip(&grads.quant)
        .zip(&mut state.quant)
    {
        let q = &mut site.params;
        let has_alpha = q.mode.has_alpha();
        let gs = [g.lower, g.upper, if has_alpha { g.alpha } else { 0.0 }];
        for (k, (m, gk)) in m.iter_mut().zip(gs).enumerate() {
            *m = cfg.momentum * *m + gk;
            let step = qlr * *m;
            match k {
                0 => q.lower -= step,
                1 => q.upper -= step,
                _ if has_alpha => q.alpha -= step,
                _ => {}
            }
        }
        q.project();
    }
    Ok(())
}
