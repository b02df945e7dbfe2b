use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    /// Probability of a horizontal flip per sample.
    #[serde(default)]
    pub flip_p: f64,
    /// Reflect-pad by `pad` pixels, then crop back at a random offset.
    #[serde(default)]
    pub pad_crop: bool,
    #[serde(default = "default_pad")]
    pub pad: usize,
}

fn default_pad() -> usize {
    4
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            flip_p: 0.0,
            pad_crop: false,
            pad: default_pad(),
        }
    }
}

impl AugmentPolicy {
    pub fn standard() -> Self {
        Self {
            flip_p: 0.5,
            pad_crop: true,
            pad: default_pad(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.flip_p <= 0.0 && !self.pad_crop
    }
}

/// Mirror index into `0..n` without repeating the edge (numpy "reflect").
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Mirrors every image of `[N, C, H, W]` left to right.
pub fn hflip(batch: &Tensor<f32>) -> Result<Tensor<f32>> {
    let shape = image_shape(batch)?;
    let w = shape[3];
    let mut out = batch.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    Ok(out)
}

fn image_shape(batch: &Tensor<f32>) -> Result<[usize; 4]> {
    match *batch.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(Error::shape(
            "augment (expects [N, C, H, W])",
            s,
            &[0, 0, 0, 0],
        )),
    }
}

/// Random flip then pad-and-crop, drawing all randomness from `rng` in
/// sample order.
pub fn augment<R: Rng>(
    batch: &Tensor<f32>,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    if policy.is_identity() {
        return Ok(batch.clone());
    }
    let [n, c, h, w] = image_shape(batch)?;
    let plane = h * w;
    let mut out = vec![0.0f32; batch.len()];
    let src = batch.data();
    for s in 0..n {
        let flip = policy.flip_p > 0.0 && rng.random::<f64>() < policy.flip_p;
        let (dy, dx) = if policy.pad_crop {
            let p = policy.pad as i64;
            (
                rng.random_range(-p..=p) as isize,
                rng.random_range(-p..=p) as isize,
            )
        } else {
            (0, 0)
        };
        for ch in 0..c {
            let base = (s * c + ch) * plane;
            for y in 0..h {
                let sy = reflect(y as isize + dy, h);
                for x in 0..w {
                    let fx = if flip { w - 1 - x } else { x };
                    let sx = reflect(fx as isize + dx, w);
                    out[base + y * w + x] = src[base + sy * w + sx];
                }
            }
        }
    }
    Tensor::new(batch.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_matches_numpy() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, [3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }
}
