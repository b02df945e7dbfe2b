//! Datasets: a seeded synthetic task plus IDX and CIFAR-10 binary loaders.
//!
//! Image datasets are `[N, C, H, W]` with pixels in `[0, 1]`; flat
//! synthetic datasets are `[N, D]`.

mod augment;
mod files;
mod synth;

pub use augment::{augment, hflip, AugmentPolicy};
pub use files::{load_cifar_binary, load_idx, CIFAR_CLASSES, CIFAR_RECORD};
pub use synth::{synth_blobs, SynthConfig, SynthShape};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Eval => "eval",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    /// Validates label range and count before wrapping.
    pub fn new(
        images: Tensor<f32>,
        labels: Vec<usize>,
        classes: usize,
        split: Split,
    ) -> Result<Self> {
        let n = images.shape().first().copied().unwrap_or(0);
        if n != labels.len() {
            return Err(Error::CountMismatch {
                images: n,
                labels: labels.len(),
            });
        }
        if n == 0 {
            return Err(Error::Empty(format!("{split} split")));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape (everything after the batch axis).
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn is_image(&self) -> bool {
        self.images.shape().len() == 4
    }

    /// Rows `idx` as a batch.
    pub fn batch(&self, idx: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        (
            self.images.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// First `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.batch(&idx);
        Dataset {
            images,
            labels,
            classes: self.classes,
            split: self.split,
        }
    }

    /// Per-channel `(x - mean) / std` for image data. Off by default; pixels
    /// are otherwise left in `[0, 1]`.
    pub fn normalize_channels(&mut self, mean: &[f32], std: &[f32]) -> Result<()> {
        let shape = self.images.shape().to_vec();
        if shape.len() != 4 || mean.len() != shape[1] || std.len() != shape[1] {
            return Err(Error::shape(
                "normalize_channels",
                &shape,
                &[mean.len(), std.len()],
            ));
        }
        let plane = shape[2] * shape[3];
        for (i, v) in self.images.data_mut().iter_mut().enumerate() {
            let c = (i / plane) % shape[1];
            *v = (*v - mean[c]) / std[c];
        }
        Ok(())
    }
}
