//! TOML experiment configuration.
//!
//! ```toml
//! out_dir = "runs/mlp"
//!
//! [dataset]
//! source = "synth"
//! n_per_class = 100
//! classes = 4
//! noise_sigma = 0.5
//! seed = 0
//! shape = { kind = "flat", dim = 16 }
//!
//! [model]
//! arch = { kind = "mlp", dims = [16, 32, 4] }
//! bits = "2/2"
//!
//! [train]
//! epochs = 10
//!
//! [distill]
//! regime = "baseline"
//! ```
//!
//! Relative paths are resolved against the directory holding the config file.

use std::fmt;
use std::path::{Path, PathBuf};

use qfd_core::data::{
    load_cifar_binary, load_idx, synth_blobs, Dataset, Split, SynthConfig, SynthShape,
};
use qfd_core::distill::{DistillConfig, Regime};
use qfd_core::models::{ArchSpec, BitPair, LayerOverride, ModelSpec, QuantPolicy, VitScope};
use qfd_core::quantizer::BitWidth;
use qfd_core::train::{SuiteConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// Problems with the configuration itself: unreadable file, syntax, or a
/// field outside its valid range. Maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default = "DistillConfig::baseline")]
    pub distill: DistillConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<SuiteConfig>,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synth {
        n_per_class: usize,
        classes: usize,
        shape: SynthShape,
        noise_sigma: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        normalize: bool,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        eval_images: PathBuf,
        eval_labels: PathBuf,
        #[serde(default)]
        normalize: bool,
    },
    Cifar {
        train: Vec<PathBuf>,
        eval: Vec<PathBuf>,
        #[serde(default)]
        normalize: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: ArchSpec,
    pub bits: BitPair,
    #[serde(default = "yes")]
    pub skip_first: bool,
    #[serde(default = "yes")]
    pub skip_last: bool,
    #[serde(default)]
    pub vit_scope: VitScope,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overrides: Vec<LayerOverride>,
    /// Seed for weight initialization.
    #[serde(default)]
    pub seed: u64,
    /// Start from these weights instead of a fresh initialization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    pub fn spec(&self) -> ModelSpec {
        ModelSpec::new(
            self.arch.clone(),
            QuantPolicy {
                bits: self.bits,
                skip_first: self.skip_first,
                skip_last: self.skip_last,
                vit_scope: self.vit_scope,
                overrides: self.overrides.clone(),
            },
        )
    }
}

impl ExperimentConfig {
    /// Reads, resolves and validates a config file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg =
            Self::parse(&text).map_err(|e| ConfigError(format!("{}: {}", path.display(), e.0)))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        match &mut self.dataset {
            DatasetConfig::Synth { .. } => {}
            DatasetConfig::Idx {
                train_images,
                train_labels,
                eval_images,
                eval_labels,
                ..
            } => {
                for p in [train_images, train_labels, eval_images, eval_labels] {
                    fix(p);
                }
            }
            DatasetConfig::Cifar { train, eval, .. } => {
                train.iter_mut().chain(eval.iter_mut()).for_each(fix)
            }
        }
        if let Some(p) = &mut self.model.init_checkpoint {
            fix(p);
        }
        if let Some(p) = &mut self.distill.teacher_checkpoint {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let wrap = |field: &str, r: qfd_core::Result<()>| -> Result<(), ConfigError> {
            r.map_err(|e| {
                let msg = e.to_string();
                let msg = msg
                    .strip_prefix("invalid configuration: ")
                    .unwrap_or(&msg)
                    .to_string();
                if msg.starts_with(field) {
                    ConfigError(msg)
                } else {
                    ConfigError(format!("{field}: {msg}"))
                }
            })
        };
        wrap("model.arch", self.model.arch.validate())?;
        if let DatasetConfig::Synth {
            n_per_class,
            classes,
            noise_sigma,
            shape,
            normalize,
            ..
        } = &self.dataset
        {
            if *classes < 2 {
                return config_err(format!("dataset.classes must be >= 2, got {classes}"));
            }
            if *n_per_class < 2 {
                return config_err(format!(
                    "dataset.n_per_class must be >= 2, got {n_per_class}"
                ));
            }
            if !(*noise_sigma >= 0.0) {
                return config_err(format!(
                    "dataset.noise_sigma must be >= 0, got {noise_sigma}"
                ));
            }
            if *normalize && !matches!(shape, SynthShape::Image { .. }) {
                return config_err("dataset.normalize requires image data");
            }
            if *classes != self.model.arch.classes() {
                return config_err(format!(
                    "model.arch predicts {} classes but dataset.classes is {classes}",
                    self.model.arch.classes()
                ));
            }
            let sample = match shape {
                SynthShape::Flat { dim } => vec![1, *dim],
                SynthShape::Image {
                    channels,
                    height,
                    width,
                } => vec![1, *channels, *height, *width],
            };
            if let Err(e) = self.model.arch.check_input(&sample) {
                return config_err(format!("dataset.shape does not fit model.arch: {e}"));
            }
        }
        wrap("train", self.train.validate())?;
        wrap("distill", self.distill.validate())?;
        if let Some(c) = &self.compare {
            wrap("compare", c.validate())?;
        }
        Ok(())
    }

    /// TOML text of the config with every default filled in.
    pub fn resolved_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// The distill section with the teacher feature width forced to full
    /// precision for regimes other than QFD.
    pub fn distill(&self) -> DistillConfig {
        let mut d = self.distill.clone();
        if d.regime != Regime::Qfd {
            d.teacher_feature_bits = BitWidth::Fp;
        }
        d
    }
}

impl DatasetConfig {
    pub fn load(&self) -> qfd_core::Result<(Dataset, Dataset)> {
        let (mut train, mut eval, normalize) = match self {
            DatasetConfig::Synth {
                n_per_class,
                classes,
                shape,
                noise_sigma,
                seed,
                normalize,
            } => {
                let (t, e) = synth_blobs(&SynthConfig {
                    n_per_class: *n_per_class,
                    classes: *classes,
                    shape: shape.clone(),
                    noise_sigma: *noise_sigma,
                    seed: *seed,
                })?;
                (t, e, *normalize)
            }
            DatasetConfig::Idx {
                train_images,
                train_labels,
                eval_images,
                eval_labels,
                normalize,
            } => {
                let mut t = load_idx(train_images, train_labels)?;
                let mut e = load_idx(eval_images, eval_labels)?;
                t.split = Split::Train;
                e.split = Split::Eval;
                // both splits must agree on the class count
                let classes = t.classes.max(e.classes);
                t.classes = classes;
                e.classes = classes;
                (t, e, *normalize)
            }
            DatasetConfig::Cifar {
                train,
                eval,
                normalize,
            } => {
                let mut t = load_cifar_binary(train)?;
                let mut e = load_cifar_binary(eval)?;
                t.split = Split::Train;
                e.split = Split::Eval;
                (t, e, *normalize)
            }
        };
        if normalize {
            let (mean, std) = channel_stats(&train);
            train.normalize_channels(&mean, &std)?;
            eval.normalize_channels(&mean, &std)?;
        }
        Ok((train, eval))
    }
}

/// Per-channel mean and standard deviation of `[N, C, H, W]` training images.
fn channel_stats(data: &Dataset) -> (Vec<f32>, Vec<f32>) {
    let shape = data.images.shape();
    if shape.len() != 4 {
        return (Vec::new(), Vec::new());
    }
    let (n, c, inner) = (shape[0], shape[1], shape[2] * shape[3]);
    let x = data.images.data();
    let mut mean = vec![0f64; c];
    let mut sq = vec![0f64; c];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * inner;
            for &v in &x[base..base + inner] {
                mean[ch] += f64::from(v);
                sq[ch] += f64::from(v) * f64::from(v);
            }
        }
    }
    let count = (n * inner) as f64;
    let mean: Vec<f64> = mean.iter().map(|m| m / count).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| ((s / count - m * m).max(0.0).sqrt().max(1e-6)) as f32)
        .collect();
    (mean.iter().map(|&m| m as f32).collect(), std)
}
