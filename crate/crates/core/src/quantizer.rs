//! Uniform fake-quantizer with learnable interval bounds and output scale.
//!
//! A value `v` is clipped and normalized into `[0, 1]` using the interval `[l, u]`,
//! rounded onto `2^b - 1` equal steps, and mapped back:
//!
//! ```text
//! v̂ = clip((v - l) / (u - l), 0, 1)
//! ṽ = round((2^b - 1) · v̂) / (2^b - 1)
//! weight:              v̄ = 2 (ṽ - 0.5)
//! activation/feature:  v̄ = α · ṽ
//! ```
//!
//! The backward pass treats `round` as the identity (straight-through) and
//! differentiates the clip exactly: saturated inputs pass no gradient to `v`,
//! `l` or `u`. The output scale `α` always receives `ṽ` times the upstream
//! gradient.
//!
//! Per-element math runs in `f64` regardless of the tensor element type, so the
//! learnable scalars keep full precision and the scalar kernels can be checked
//! against closed forms at tight tolerances.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Smallest admissible quantization interval `u - l`.
pub const MIN_INTERVAL: f64 = 1e-4;
/// Smallest admissible output scale.
pub const MIN_ALPHA: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    Weight,
    Activation,
    Feature,
}

impl QuantMode {
    pub fn has_alpha(self) -> bool {
        !matches!(self, QuantMode::Weight)
    }
}

/// Bit width of a tensor: either quantized to `1..=8` bits or left in full precision.
///
/// Serialized as an integer; `32` denotes full precision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum BitWidth {
    Bits(u8),
    Fp,
}

impl BitWidth {
    pub fn bits(self) -> Option<u8> {
        match self {
            BitWidth::Bits(b) => Some(b),
            BitWidth::Fp => None,
        }
    }

    pub fn is_fp(self) -> bool {
        matches!(self, BitWidth::Fp)
    }
}

impl TryFrom<u8> for BitWidth {
    type Error = String;

    fn try_from(value: u8) -> std::result::Result<Self, Self::Error> {
        match value {
            32 => Ok(BitWidth::Fp),
            1..=8 => Ok(BitWidth::Bits(value)),
            other => Err(format!("bit width must be 1..=8 or 32, got {other}")),
        }
    }
}

impl From<BitWidth> for u8 {
    fn from(value: BitWidth) -> Self {
        match value {
            BitWidth::Bits(b) => b,
            BitWidth::Fp => 32,
        }
    }
}

impl fmt::Display for BitWidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

/// Learnable state of one quantizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub lower: f64,
    pub upper: f64,
    /// Output scale; ignored in weight mode.
    pub alpha: f64,
    pub bits: u8,
    pub mode: QuantMode,
}

/// Gradients of one element with respect to the input and the quantizer scalars.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ScalarGrads {
    pub v: f64,
    pub lower: f64,
    pub upper: f64,
    pub alpha: f64,
}

impl QuantParams {
    /// Default parameters used before calibration.
    pub fn new(bits: u8, mode: QuantMode) -> Self {
        let (lower, upper) = match mode {
            QuantMode::Weight => (-1.0, 1.0),
            _ => (0.0, 1.0),
        };
        Self {
            lower,
            upper,
            alpha: 1.0,
            bits,
            mode,
        }
    }

    pub fn with_bounds(mut self, lower: f64, upper: f64) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.bits) {
            return Err(Error::QuantParams(format!(
                "bits must be in 1..=8, got {}",
                self.bits
            )));
        }
        if !self.lower.is_finite() || !self.upper.is_finite() {
            return Err(Error::QuantParams(format!(
                "non-finite interval [{}, {}]",
                self.lower, self.upper
            )));
        }
        if self.upper - self.lower < MIN_INTERVAL {
            return Err(Error::QuantParams(format!(
                "degenerate interval [{}, {}]",
                self.lower, self.upper
            )));
        }
        if self.mode.has_alpha() && !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::QuantParams(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Restores `u - l >= MIN_INTERVAL` and `alpha >= MIN_ALPHA` after an update.
    pub fn project(&mut self) {
        if self.upper - self.lower < MIN_INTERVAL {
            let mut upper = self.lower + MIN_INTERVAL;
            while upper - self.lower < MIN_INTERVAL {
                upper = upper.next_up();
            }
            self.upper = upper;
        }
        if self.mode.has_alpha() && self.alpha < MIN_ALPHA {
            self.alpha = MIN_ALPHA;
        }
    }

    /// Number of rounding steps, `2^b - 1`.
    #[inline]
    pub fn steps(&self) -> f64 {
        steps(self.bits)
    }

    #[inline]
    fn scale(&self) -> f64 {
        match self.mode {
            QuantMode::Weight => 2.0,
            _ => self.alpha,
        }
    }

    /// Clip-normalize one value into `[0, 1]`.
    #[inline]
    pub fn normalize(&self, v: f64) -> f64 {
        ((v - self.lower) / (self.upper - self.lower)).clamp(0.0, 1.0)
    }

    /// Map a grid point `ṽ ∈ [0, 1]` to the output domain.
    #[inline]
    pub fn dequantize_level(&self, vtilde: f64) -> f64 {
        match self.mode {
            QuantMode::Weight => 2.0 * (vtilde - 0.5),
            _ => self.alpha * vtilde,
        }
    }

    #[inline]
    pub fn forward_scalar(&self, v: f64) -> f64 {
        self.dequantize_level(round_level(self.normalize(v), self.bits))
    }

    /// Straight-through gradients of one element for upstream gradient `upstream`.
    ///
    /// Inputs on or outside the interval boundary take the saturated branch.
    pub fn backward_scalar(&self, upstream: f64, v: f64) -> ScalarGrads {
        let width = self.upper - self.lower;
        let vtilde = round_level(self.normalize(v), self.bits);
        let alpha = if self.mode.has_alpha() {
            upstream * vtilde
        } else {
            0.0
        };
        if v <= self.lower || v >= self.upper {
            return ScalarGrads {
                alpha,
                ..ScalarGrads::default()
            };
        }
        let s = self.scale();
        ScalarGrads {
            v: upstream * s / width,
            lower: upstream * s * (v - self.upper) / (width * width),
            upper: upstream * s * (self.lower - v) / (width * width),
            alpha,
        }
    }
}

#[inline]
fn steps(bits: u8) -> f64 {
    ((1u32 << bits) - 1) as f64
}

/// `round((2^b - 1) · v̂) / (2^b - 1)` with ties rounded away from zero.
#[inline]
pub fn round_level(vhat: f64, bits: u8) -> f64 {
    let n = steps(bits);
    (n * vhat).round() / n
}

/// The finite set of values a quantizer can emit.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantGrid {
    pub levels: Vec<f64>,
}

impl QuantGrid {
    pub fn new(q: &QuantParams) -> Self {
        let n = (1u32 << q.bits) - 1;
        let levels = (0..=n)
            .map(|k| q.dequantize_level(k as f64 / n as f64))
            .collect();
        Self { levels }
    }

    /// Distance from `x` to the nearest level.
    pub fn distance(&self, x: f64) -> f64 {
        self.levels
            .iter()
            .map(|l| (l - x).abs())
            .fold(f64::INFINITY, f64::min)
    }
}

fn check_bits(bits: u8) -> Result<()> {
    if bits < 1 {
        return Err(Error::QuantParams("bits must be at least 1".into()));
    }
    if bits > 16 {
        return Err(Error::QuantParams(format!("bits too large: {bits}")));
    }
    Ok(())
}

pub fn normalize_clip<T: Scalar>(v: &Tensor<T>, q: &QuantParams) -> Result<Tensor<T>> {
    if q.upper - q.lower < MIN_INTERVAL || !(q.upper - q.lower).is_finite() {
        return Err(Error::QuantParams(format!(
            "degenerate interval [{}, {}]",
            q.lower, q.upper
        )));
    }
    Ok(v.map(|x| T::lit(q.normalize(x.as_f64()))))
}

pub fn round_quantize<T: Scalar>(vhat: &Tensor<T>, bits: u8) -> Result<Tensor<T>> {
    check_bits(bits)?;
    Ok(vhat.map(|x| T::lit(round_level(x.as_f64(), bits))))
}

pub fn dequantize<T: Scalar>(vtilde: &Tensor<T>, q: &QuantParams) -> Tensor<T> {
    vtilde.map(|x| T::lit(q.dequantize_level(x.as_f64())))
}

/// Normalize, round and de-quantize in one pass.
pub fn fake_quant_forward<T: Scalar>(v: &Tensor<T>, q: &QuantParams) -> Result<Tensor<T>> {
    q.validate()?;
    Ok(v.map(|x| T::lit(q.forward_scalar(x.as_f64()))))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FakeQuantGrads<T> {
    pub v: Tensor<T>,
    pub lower: f64,
    pub upper: f64,
    pub alpha: f64,
}

/// Straight-through backward of [`fake_quant_forward`] over a whole tensor.
///
/// Scalar gradients are summed over all elements in index order.
pub fn fake_quant_backward<T: Scalar>(
    upstream: &Tensor<T>,
    v: &Tensor<T>,
    q: &QuantParams,
) -> Result<FakeQuantGrads<T>> {
    if upstream.shape() != v.shape() {
        return Err(Error::shape(
            "fake_quant_backward",
            upstream.shape(),
            v.shape(),
        ));
    }
    q.validate()?;
    let mut grad_v = Vec::with_capacity(v.len());
    let (mut lower, mut upper, mut alpha) = (0.0, 0.0, 0.0);
    for (&g, &x) in upstream.data().iter().zip(v.data()) {
        let s = q.backward_scalar(g.as_f64(), x.as_f64());
        grad_v.push(T::lit(s.v));
        lower += s.lower;
        upper += s.upper;
        alpha += s.alpha;
    }
    Ok(FakeQuantGrads {
        v: Tensor::new(v.shape(), grad_v)?,
        lower,
        upper,
        alpha,
    })
}

/// Linear-interpolated percentile (`p` in `[0, 100]`) of a sample.
pub fn percentile(samples: &[f64], p: f64) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Data-driven initialization of a quantizer's interval.
///
/// Weights get the symmetric range `[-max|x|, max|x|]`; activations and features
/// get `[0, p99.9]` with `alpha = u`. Samples without usable range fall back to the
/// default interval.
pub fn init_bounds_from_stats<T: Scalar>(
    samples: &Tensor<T>,
    q: &QuantParams,
) -> Result<QuantParams> {
    if samples.is_empty() {
        return Err(Error::QuantParams(
            "cannot calibrate on an empty sample".into(),
        ));
    }
    let mut out = QuantParams::new(q.bits, q.mode);
    match q.mode {
        QuantMode::Weight => {
            let m = samples
                .data()
                .iter()
                .map(|v| v.as_f64().abs())
                .fold(0.0, f64::max);
            if m > 0.0 && m.is_finite() {
                out.lower = -m;
                out.upper = m;
            }
        }
        QuantMode::Activation | QuantMode::Feature => {
            let values: Vec<f64> = samples.data().iter().map(|v| v.as_f64()).collect();
            let u = percentile(&values, 99.9);
            if u > 0.0 && u.is_finite() {
                out.upper = u;
                out.alpha = u;
            }
        }
    }
    out.project();
    Ok(out)
}
