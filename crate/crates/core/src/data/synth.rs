use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SynthShape {
    /// Gaussian clusters in `dim` dimensions.
    Flat { dim: usize },
    /// Class-conditional gratings plus noise, clipped to `[0, 1]`.
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_per_class: usize,
    pub classes: usize,
    pub shape: SynthShape,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Fraction of each class that goes to the training split.
const TRAIN_FRACTION: f64 = 0.8;

struct Grating {
    fy: f64,
    fx: f64,
    color: Vec<f64>,
}

/// Generates a deterministic, stratified 80/20 train/eval pair.
///
/// Flat samples are `center_k + sigma * N(0, I)` with centers drawn from
/// `N(0, I)`. Image samples are a sinusoidal grating whose spatial frequency
/// and per-channel color weights depend on the class; phase and contrast are
/// drawn per sample, and Gaussian pixel noise of scale `sigma` is added
/// before clipping.
pub fn synth_blobs(cfg: &SynthConfig) -> Result<(Dataset, Dataset)> {
    if cfg.classes < 2 {
        return Err(Error::Config(format!(
            "synthetic task needs >= 2 classes, got {}",
            cfg.classes
        )));
    }
    if !(cfg.noise_sigma >= 0.0) || !cfg.noise_sigma.is_finite() {
        return Err(Error::Config(format!(
            "noise_sigma must be >= 0, got {}",
            cfg.noise_sigma
        )));
    }
    let n_train = (cfg.n_per_class as f64 * TRAIN_FRACTION).round() as usize;
    if n_train == 0 || n_train == cfg.n_per_class {
        return Err(Error::Config(format!(
            "n_per_class = {} leaves an empty split",
            cfg.n_per_class
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let (sample_shape, sample): (Vec<usize>, Box<dyn Fn(usize, &mut ChaCha8Rng) -> Vec<f32>>) =
        match &cfg.shape {
            SynthShape::Flat { dim } => {
                if *dim == 0 {
                    return Err(Error::Config("flat synthetic dim must be positive".into()));
                }
                let centers: Vec<Vec<f64>> = (0..cfg.classes)
                    .map(|_| (0..*dim).map(|_| normal.sample(&mut rng)).collect())
                    .collect();
                let sigma = cfg.noise_sigma;
                (
                    vec![*dim],
                    Box::new(move |k, rng| {
                        centers[k]
                            .iter()
                            .map(|&c| (c + sigma * normal.sample(rng)) as f32)
                            .collect()
                    }),
                )
            }
            SynthShape::Image {
                channels,
                height,
                width,
            } => {
                if *channels == 0 || *height == 0 || *width == 0 {
                    return Err(Error::Config(
                        "synthetic image dims must be positive".into(),
                    ));
                }
                let gratings = class_gratings(cfg.classes, *channels, &mut rng);
                let (c, h, w, sigma) = (*channels, *height, *width, cfg.noise_sigma);
                (
                    vec![c, h, w],
                    Box::new(move |k, rng| {
                        let g = &gratings[k];
                        let phase = rng.random_range(0.0..2.0 * PI);
                        let contrast = rng.random_range(0.25..0.45);
                        let mut out = Vec::with_capacity(c * h * w);
                        for ch in 0..c {
                            for y in 0..h {
                                for x in 0..w {
                                    let t = 2.0
                                        * PI
                                        * (g.fy * y as f64 / h as f64 + g.fx * x as f64 / w as f64);
                                    let v = 0.5
                                        + contrast * g.color[ch] * (t + phase).sin()
                                        + sigma * normal.sample(rng);
                                    out.push(v.clamp(0.0, 1.0) as f32);
                                }
                            }
                        }
                        out
                    }),
                )
            }
        };

    let n_eval = cfg.n_per_class - n_train;
    let per = sample_shape.iter().product::<usize>();
    let mut train = (Vec::with_capacity(cfg.classes * n_train * per), Vec::new());
    let mut eval = (Vec::with_capacity(cfg.classes * n_eval * per), Vec::new());
    for k in 0..cfg.classes {
        for i in 0..cfg.n_per_class {
            let x = sample(k, &mut rng);
            let dst = if i < n_train { &mut train } else { &mut eval };
            dst.0.extend(x);
            dst.1.push(k);
        }
    }
    let make = |(data, labels): (Vec<f32>, Vec<usize>), split| {
        let mut shape = vec![labels.len()];
        shape.extend(&sample_shape);
        Dataset::new(Tensor::new(&shape, data)?, labels, cfg.classes, split)
    };
    Ok((make(train, Split::Train)?, make(eval, Split::Eval)?))
}

/// Distinct (frequency, orientation) per class with random channel weights.
fn class_gratings(classes: usize, channels: usize, rng: &mut ChaCha8Rng) -> Vec<Grating> {
    let mut freqs: Vec<(f64, f64)> = Vec::new();
    for f in 1..=4 {
        for (fy, fx) in [(0, f), (f, 0), (f, f), (f, -f)] {
            freqs.push((fy as f64, fx as f64));
        }
    }
    // more classes than frequency pairs fall back to fractional frequencies
    let mut extra = 0.5;
    while freqs.len() < classes {
        freqs.push((extra, extra + 0.25));
        extra += 0.5;
    }
    (0..classes)
        .map(|k| {
            let (fy, fx) = freqs[k];
            Grating {
                fy,
                fx,
                color: (0..channels).map(|_| rng.random_range(0.5..1.0)).collect(),
            }
        })
        .collect()
}
