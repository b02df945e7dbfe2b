use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::BitWidth;

/// Which linear layers of a transformer block are quantized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VitScope {
    #[default]
    All,
    AttentionOnly,
    MlpOnly,
}

/// Weight / activation bit widths, written `"W/A"` (e.g. `"2/2"`, `"32/32"`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BitPair {
    pub weight: BitWidth,
    pub act: BitWidth,
}

impl BitPair {
    pub const FP: BitPair = BitPair {
        weight: BitWidth::Fp,
        act: BitWidth::Fp,
    };

    pub fn uniform(bits: u8) -> Result<Self> {
        let b = BitWidth::try_from(bits).map_err(Error::Config)?;
        Ok(Self { weight: b, act: b })
    }
}

impl FromStr for BitPair {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (w, a) = s
            .split_once('/')
            .ok_or_else(|| Error::Config(format!("bit pair must look like \"W/A\", got {s:?}")))?;
        let parse = |part: &str| -> Result<BitWidth> {
            let n: u8 = part
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid bit width {part:?} in {s:?}")))?;
            BitWidth::try_from(n).map_err(Error::Config)
        };
        Ok(Self {
            weight: parse(w)?,
            act: parse(a)?,
        })
    }
}

impl TryFrom<String> for BitPair {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        value.parse()
    }
}

impl From<BitPair> for String {
    fn from(value: BitPair) -> Self {
        value.to_string()
    }
}

impl fmt::Display for BitPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.weight, self.act)
    }
}

/// Bit widths for one named layer, overriding the global pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerOverride {
    pub layer: String,
    pub bits: BitPair,
}

/// Declarative per-layer quantization assignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantPolicy {
    pub bits: BitPair,
    /// Keep the first conv/linear (the layer reading raw input) in full precision.
    #[serde(default = "yes")]
    pub skip_first: bool,
    /// Keep the final classifier in full precision.
    #[serde(default = "yes")]
    pub skip_last: bool,
    #[serde(default)]
    pub vit_scope: VitScope,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overrides: Vec<LayerOverride>,
}

fn yes() -> bool {
    true
}

/// Where a layer sits in the network, as far as the policy is concerned.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum LayerRole {
    First,
    Last,
    Body,
    Attention,
    Mlp,
}

impl QuantPolicy {
    pub fn new(bits: BitPair) -> Self {
        Self {
            bits,
            skip_first: true,
            skip_last: true,
            vit_scope: VitScope::All,
            overrides: Vec::new(),
        }
    }

    pub fn full_precision() -> Self {
        Self::new(BitPair::FP)
    }

    pub fn with_scope(mut self, scope: VitScope) -> Self {
        self.vit_scope = scope;
        self
    }

    pub fn is_full_precision(&self) -> bool {
        self.bits == BitPair::FP && self.overrides.iter().all(|o| o.bits == BitPair::FP)
    }

    /// Bits applied to `layer`'s weight and input activation.
    pub(crate) fn resolve(&self, layer: &str, role: LayerRole) -> BitPair {
        let skipped = match role {
            LayerRole::First => self.skip_first,
            LayerRole::Last => self.skip_last,
            LayerRole::Attention => self.vit_scope == VitScope::MlpOnly,
            LayerRole::Mlp => self.vit_scope == VitScope::AttentionOnly,
            LayerRole::Body => false,
        };
        if skipped {
            return BitPair::FP;
        }
        self.overrides
            .iter()
            .rev()
            .find(|o| o.layer == layer)
            .map(|o| o.bits)
            .unwrap_or(self.bits)
    }
}
