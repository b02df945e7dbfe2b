//! Model families with per-layer fake quantization.
//!
//! Three architectures share one parameter store and one forward interface:
//! a plain MLP, a residual CNN (stem + stages of basic blocks) and a small
//! pre-norm vision transformer. Each returns the pooled pre-classifier
//! feature alongside the logits so distillation can attach to it.
//!
//! Quantizers are attached by a [`QuantPolicy`]: every quantized conv/linear
//! layer owns one weight quantizer and reads its input through an activation
//! quantizer. Layers that read the same tensor (q/k/v projections, a residual
//! shortcut next to the first conv of its block) share that input quantizer.

pub mod checkpoint;
pub mod policy;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::{init_bounds_from_stats, BitWidth, QuantMode, QuantParams};
use crate::tensor::{
    BatchStats, Gradients, QVar, QuantGrads, RunningStats, Scalar, Tape, Tensor, Var, BN_MOMENTUM,
};

use policy::LayerRole;
pub use policy::{BitPair, LayerOverride, QuantPolicy, VitScope};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArchSpec {
    /// Fully connected stack; `dims = [input, hidden..., classes]`.
    Mlp { dims: Vec<usize> },
    /// Stem conv followed by `widths.len()` stages of basic blocks; every
    /// stage after the first halves the resolution.
    MiniResnet {
        in_channels: usize,
        widths: Vec<usize>,
        blocks_per_stage: usize,
        classes: usize,
    },
    /// Patch embedding, `depth` pre-norm transformer blocks, token-mean pooling.
    MiniVit {
        in_channels: usize,
        image_size: usize,
        patch: usize,
        dim: usize,
        depth: usize,
        heads: usize,
        mlp_hidden: usize,
        classes: usize,
    },
}

impl ArchSpec {
    pub fn mini_resnet(in_channels: usize, classes: usize) -> Self {
        ArchSpec::MiniResnet {
            in_channels,
            widths: vec![16, 32, 64],
            blocks_per_stage: 2,
            classes,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            ArchSpec::Mlp { dims } => *dims.last().unwrap_or(&0),
            ArchSpec::MiniResnet { classes, .. } | ArchSpec::MiniVit { classes, .. } => *classes,
        }
    }

    /// Dimensionality of the pooled feature.
    pub fn feature_dim(&self) -> usize {
        match self {
            ArchSpec::Mlp { dims } => dims[dims.len().saturating_sub(2)],
            ArchSpec::MiniResnet { widths, .. } => *widths.last().unwrap_or(&0),
            ArchSpec::MiniVit { dim, .. } => *dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match self {
            ArchSpec::Mlp { dims } => {
                if dims.len() < 2 || dims.contains(&0) {
                    return bad(format!(
                        "mlp dims must have >= 2 positive entries, got {dims:?}"
                    ));
                }
            }
            ArchSpec::MiniResnet {
                in_channels,
                widths,
                blocks_per_stage,
                classes,
            } => {
                if *in_channels == 0
                    || widths.is_empty()
                    || widths.contains(&0)
                    || *blocks_per_stage == 0
                {
                    return bad(format!(
                        "invalid mini_resnet dims: channels {in_channels}, widths {widths:?}, blocks {blocks_per_stage}"
                    ));
                }
                if *classes < 2 {
                    return bad(format!("classes must be >= 2, got {classes}"));
                }
            }
            ArchSpec::MiniVit {
                in_channels,
                image_size,
                patch,
                dim,
                depth,
                heads,
                mlp_hidden,
                classes,
            } => {
                if *in_channels == 0 || *patch == 0 || *image_size == 0 || image_size % patch != 0 {
                    return bad(format!(
                        "image size {image_size} not divisible into {patch}x{patch} patches"
                    ));
                }
                if *heads == 0 || *dim == 0 || dim % heads != 0 {
                    return bad(format!("dim {dim} not divisible by {heads} heads"));
                }
                if *depth == 0 || *mlp_hidden == 0 || *classes < 2 {
                    return bad("mini_vit needs depth, mlp_hidden >= 1 and classes >= 2".into());
                }
            }
        }
        Ok(())
    }

    /// Checks a batch shape `[N, ...]` against the architecture.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let ok = match self {
            ArchSpec::Mlp { dims } => shape.len() == 2 && shape[1] == dims[0],
            ArchSpec::MiniResnet { in_channels, .. } => {
                shape.len() == 4 && shape[1] == *in_channels && shape[2] > 0 && shape[3] > 0
            }
            ArchSpec::MiniVit {
                in_channels,
                image_size,
                ..
            } => {
                shape.len() == 4
                    && shape[1] == *in_channels
                    && shape[2] == *image_size
                    && shape[3] == *image_size
            }
        };
        if !ok || shape.first() == Some(&0) {
            return Err(Error::shape("model input", shape, &self.expected_input()));
        }
        Ok(())
    }

    fn expected_input(&self) -> Vec<usize> {
        match self {
            ArchSpec::Mlp { dims } => vec![0, dims[0]],
            ArchSpec::MiniResnet { in_channels, .. } => vec![0, *in_channels, 0, 0],
            ArchSpec::MiniVit {
                in_channels,
                image_size,
                ..
            } => vec![0, *in_channels, *image_size, *image_size],
        }
    }
}

/// Architecture plus quantization assignment; enough to rebuild a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub arch: ArchSpec,
    pub policy: QuantPolicy,
    /// Quantizer on the pooled feature; full precision unless a teacher has
    /// been warmed up.
    #[serde(default = "fp")]
    pub feature_bits: BitWidth,
}

fn fp() -> BitWidth {
    BitWidth::Fp
}

impl ModelSpec {
    pub fn new(arch: ArchSpec, policy: QuantPolicy) -> Self {
        Self {
            arch,
            policy,
            feature_bits: BitWidth::Fp,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    Embedding,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

/// Named quantizer attached to one weight tensor or one activation.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantSite {
    pub name: String,
    pub params: QuantParams,
    /// Set once the interval has been initialized from data.
    pub calibrated: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
struct Linear {
    weight: usize,
    bias: usize,
    weight_q: Option<usize>,
    input_q: Option<usize>,
}

#[derive(Clone, Debug)]
struct Conv {
    weight: usize,
    weight_q: Option<usize>,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug)]
struct Bn {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Debug)]
struct Ln {
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Debug)]
struct BasicBlock {
    input_q: Option<usize>,
    conv1: Conv,
    bn1: Bn,
    mid_q: Option<usize>,
    conv2: Conv,
    bn2: Bn,
    shortcut: Option<(Conv, Bn)>,
}

#[derive(Clone, Debug)]
struct VitBlock {
    ln1: Ln,
    attn_in_q: Option<usize>,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ln2: Ln,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
enum Layout {
    Mlp {
        layers: Vec<Linear>,
    },
    Resnet {
        stem: Conv,
        stem_bn: Bn,
        blocks: Vec<BasicBlock>,
        fc: Linear,
    },
    Vit {
        patch_embed: Linear,
        pos: usize,
        blocks: Vec<VitBlock>,
        norm: Ln,
        head: Linear,
    },
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    spec: ModelSpec,
    params: Vec<Param<T>>,
    buffers: Vec<Param<T>>,
    quantizers: Vec<QuantSite>,
    feature_q: Option<usize>,
    layout: Layout,
}

/// Tape handles for one model instance.
pub struct Bindings {
    pub params: Vec<Var>,
    pub quant: Vec<QVar>,
}

/// Gradients of every parameter and quantizer of a model.
pub struct ModelGrads<T: Scalar = f32> {
    pub params: Vec<Option<Tensor<T>>>,
    pub quant: Vec<QuantGrads>,
}

impl Bindings {
    pub fn collect<T: Scalar>(&self, grads: &Gradients<T>) -> ModelGrads<T> {
        ModelGrads {
            params: self.params.iter().map(|v| grads.get(*v).cloned()).collect(),
            quant: self.quant.iter().map(|q| grads.quant(*q)).collect(),
        }
    }
}

pub struct ForwardOut<T: Scalar> {
    /// Pooled pre-classifier feature `[N, D]`.
    pub feature: Var,
    /// Classifier output `[N, C]`.
    pub logits: Var,
    /// Batch statistics for each batch-norm layer (training mode only),
    /// keyed by the running-mean buffer index.
    pub bn_stats: Vec<(usize, BatchStats<T>)>,
}

struct Builder<'p, T: Scalar> {
    rng: ChaCha8Rng,
    policy: &'p QuantPolicy,
    params: Vec<Param<T>>,
    buffers: Vec<Param<T>>,
    quantizers: Vec<QuantSite>,
}

impl<T: Scalar> Builder<'_, T> {
    fn param(&mut self, name: String, value: Tensor<T>, kind: ParamKind) -> usize {
        self.params.push(Param { name, value, kind });
        self.params.len() - 1
    }

    fn he_uniform(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let bound = (6.0 / fan_in as f64).sqrt();
        let rng = &mut self.rng;
        let value = Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)));
        self.param(name, value, ParamKind::Weight)
    }

    fn site(&mut self, name: String, bits: BitWidth, mode: QuantMode) -> Option<usize> {
        let bits = bits.bits()?;
        self.quantizers.push(QuantSite {
            name,
            params: QuantParams::new(bits, mode),
            calibrated: false,
        });
        Some(self.quantizers.len() - 1)
    }

    fn linear(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        role: LayerRole,
        input_site: bool,
    ) -> Linear {
        let bits = self.policy.resolve(name, role);
        let input_q = if input_site {
            self.site(format!("{name}.input_q"), bits.act, QuantMode::Activation)
        } else {
            None
        };
        let weight = self.he_uniform(format!("{name}.weight"), &[fan_in, fan_out], fan_in);
        let bias = self.param(
            format!("{name}.bias"),
            Tensor::zeros(&[fan_out]),
            ParamKind::Bias,
        );
        let weight_q = self.site(format!("{name}.weight_q"), bits.weight, QuantMode::Weight);
        Linear {
            weight,
            bias,
            weight_q,
            input_q,
        }
    }

    /// Conv layer plus, when `input_site` is set, the quantizer on its input.
    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        role: LayerRole,
        input_site: bool,
    ) -> (Conv, Option<usize>) {
        let bits = self.policy.resolve(name, role);
        let input_q = if input_site {
            self.site(format!("{name}.input_q"), bits.act, QuantMode::Activation)
        } else {
            None
        };
        let weight = self.he_uniform(format!("{name}.weight"), &[c_out, c_in, k, k], c_in * k * k);
        let weight_q = self.site(format!("{name}.weight_q"), bits.weight, QuantMode::Weight);
        let conv = Conv {
            weight,
            weight_q,
            stride,
            pad: k / 2,
        };
        (conv, input_q)
    }

    fn bn(&mut self, name: &str, c: usize) -> Bn {
        let gamma = self.param(
            format!("{name}.gamma"),
            Tensor::full(&[c], T::one()),
            ParamKind::Norm,
        );
        let beta = self.param(format!("{name}.beta"), Tensor::zeros(&[c]), ParamKind::Norm);
        self.buffers.push(Param {
            name: format!("{name}.running_mean"),
            value: Tensor::zeros(&[c]),
            kind: ParamKind::Norm,
        });
        self.buffers.push(Param {
            name: format!("{name}.running_var"),
            value: Tensor::full(&[c], T::one()),
            kind: ParamKind::Norm,
        });
        let mean = self.buffers.len() - 2;
        Bn {
            gamma,
            beta,
            mean,
            var: mean + 1,
        }
    }

    fn ln(&mut self, name: &str, d: usize) -> Ln {
        let gamma = self.param(
            format!("{name}.gamma"),
            Tensor::full(&[d], T::one()),
            ParamKind::Norm,
        );
        let beta = self.param(format!("{name}.beta"), Tensor::zeros(&[d]), ParamKind::Norm);
        Ln { gamma, beta }
    }
}

/// Builds a model with deterministic He-uniform initialization from `seed`.
///
/// Quantizers start at their default intervals; [`Model::calibrate`] sets
/// them from a data batch.
pub fn build_model<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<Model<T>> {
    spec.arch.validate()?;
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        policy: &spec.policy,
        params: Vec::new(),
        buffers: Vec::new(),
        quantizers: Vec::new(),
    };
    let layout = match &spec.arch {
        ArchSpec::Mlp { dims } => {
            let last = dims.len() - 2;
            let layers = (0..=last)
                .map(|i| {
                    let role = if i == 0 {
                        LayerRole::First
                    } else if i == last {
                        LayerRole::Last
                    } else {
                        LayerRole::Body
                    };
                    b.linear(&format!("fc{i}"), dims[i], dims[i + 1], role, true)
                })
                .collect();
            Layout::Mlp { layers }
        }
        ArchSpec::MiniResnet {
            in_channels,
            widths,
            blocks_per_stage,
            classes,
        } => {
            let (stem, _) = b.conv(
                "stem",
                *in_channels,
                widths[0],
                3,
                1,
                LayerRole::First,
                false,
            );
            let stem_bn = b.bn("stem.bn", widths[0]);
            let mut blocks = Vec::new();
            let mut c_in = widths[0];
            for (s, &width) in widths.iter().enumerate() {
                for i in 0..*blocks_per_stage {
                    let stride = if s > 0 && i == 0 { 2 } else { 1 };
                    let name = format!("stage{s}.block{i}");
                    let (conv1, input_q) = b.conv(
                        &format!("{name}.conv1"),
                        c_in,
                        width,
                        3,
                        stride,
                        LayerRole::Body,
                        true,
                    );
                    let bn1 = b.bn(&format!("{name}.bn1"), width);
                    let (conv2, mid_q) = b.conv(
                        &format!("{name}.conv2"),
                        width,
                        width,
                        3,
                        1,
                        LayerRole::Body,
                        true,
                    );
                    let bn2 = b.bn(&format!("{name}.bn2"), width);
                    let shortcut = (stride != 1 || c_in != width).then(|| {
                        let (conv, _) = b.conv(
                            &format!("{name}.shortcut"),
                            c_in,
                            width,
                            1,
                            stride,
                            LayerRole::Body,
                            false,
                        );
                        (conv, b.bn(&format!("{name}.shortcut.bn"), width))
                    });
                    blocks.push(BasicBlock {
                        input_q,
                        conv1,
                        bn1,
                        mid_q,
                        conv2,
                        bn2,
                        shortcut,
                    });
                    c_in = width;
                }
            }
            let fc = b.linear("fc", c_in, *classes, LayerRole::Last, true);
            Layout::Resnet {
                stem,
                stem_bn,
                blocks,
                fc,
            }
        }
        ArchSpec::MiniVit {
            in_channels,
            image_size,
            patch,
            dim,
            depth,
            heads: _,
            mlp_hidden,
            classes,
        } => {
            let tokens = (image_size / patch).pow(2);
            let patch_dim = in_channels * patch * patch;
            let patch_embed = b.linear("patch_embed", patch_dim, *dim, LayerRole::First, true);
            let pos_value = {
                let rng = &mut b.rng;
                Tensor::from_fn(&[tokens, *dim], |_| T::lit(rng.random_range(-0.02..0.02)))
            };
            let pos = b.param("pos_embed".into(), pos_value, ParamKind::Embedding);
            let blocks = (0..*depth)
                .map(|i| {
                    let name = format!("block{i}");
                    let ln1 = b.ln(&format!("{name}.ln1"), *dim);
                    let attn_bits = b
                        .policy
                        .resolve(&format!("{name}.attn.q"), LayerRole::Attention);
                    let attn_in_q = b.site(
                        format!("{name}.attn.input_q"),
                        attn_bits.act,
                        QuantMode::Activation,
                    );
                    let q = b.linear(
                        &format!("{name}.attn.q"),
                        *dim,
                        *dim,
                        LayerRole::Attention,
                        false,
                    );
                    let k = b.linear(
                        &format!("{name}.attn.k"),
                        *dim,
                        *dim,
                        LayerRole::Attention,
                        false,
                    );
                    let v = b.linear(
                        &format!("{name}.attn.v"),
                        *dim,
                        *dim,
                        LayerRole::Attention,
                        false,
                    );
                    let out = b.linear(
                        &format!("{name}.attn.out"),
                        *dim,
                        *dim,
                        LayerRole::Attention,
                        true,
                    );
                    let ln2 = b.ln(&format!("{name}.ln2"), *dim);
                    let fc1 = b.linear(
                        &format!("{name}.mlp.fc1"),
                        *dim,
                        *mlp_hidden,
                        LayerRole::Mlp,
                        true,
                    );
                    let fc2 = b.linear(
                        &format!("{name}.mlp.fc2"),
                        *mlp_hidden,
                        *dim,
                        LayerRole::Mlp,
                        true,
                    );
                    VitBlock {
                        ln1,
                        attn_in_q,
                        q,
                        k,
                        v,
                        out,
                        ln2,
                        fc1,
                        fc2,
                    }
                })
                .collect();
            let norm = b.ln("norm", *dim);
            let head = b.linear("head", *dim, *classes, LayerRole::Last, true);
            Layout::Vit {
                patch_embed,
                pos,
                blocks,
                norm,
                head,
            }
        }
    };
    let mut model = Model {
        spec: spec.clone(),
        params: b.params,
        buffers: b.buffers,
        quantizers: b.quantizers,
        feature_q: None,
        layout,
    };
    if let Some(bits) = spec.feature_bits.bits() {
        model.push_feature_quantizer(bits);
    }
    Ok(model)
}

struct Ctx<'a, T: Scalar> {
    tape: &'a mut Tape<T>,
    model: &'a Model<T>,
    bind: &'a Bindings,
    mode: Mode,
    calibrate: bool,
    calibrated: Vec<(usize, QuantParams)>,
    bn_stats: Vec<(usize, BatchStats<T>)>,
}

impl<T: Scalar> Ctx<'_, T> {
    fn p(&self, index: usize) -> Var {
        self.bind.params[index]
    }

    fn quant(&mut self, x: Var, site: Option<usize>) -> Result<Var> {
        let Some(i) = site else {
            return Ok(x);
        };
        let q = if self.calibrate && !self.model.quantizers[i].calibrated {
            let params =
                init_bounds_from_stats(self.tape.value(x), &self.model.quantizers[i].params)?;
            self.calibrated.push((i, params));
            self.tape.quant_constant(params)
        } else {
            self.bind.quant[i]
        };
        self.tape.fake_quant(x, q)
    }

    fn linear(&mut self, x: Var, l: &Linear) -> Result<Var> {
        let x = self.quant(x, l.input_q)?;
        self.linear_raw(x, l)
    }

    /// Linear layer on an input that is already quantized (or shared).
    fn linear_raw(&mut self, x: Var, l: &Linear) -> Result<Var> {
        let w = self.quant(self.p(l.weight), l.weight_q)?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add_rows(y, self.p(l.bias))
    }

    fn conv(&mut self, x: Var, c: &Conv) -> Result<Var> {
        let w = self.quant(self.p(c.weight), c.weight_q)?;
        self.tape.conv2d(x, w, c.stride, c.pad)
    }

    fn bn(&mut self, x: Var, bn: &Bn) -> Result<Var> {
        let (gamma, beta) = (self.p(bn.gamma), self.p(bn.beta));
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batch_norm(x, gamma, beta, None)?;
                if let Some(stats) = stats {
                    self.bn_stats.push((bn.mean, stats));
                }
                Ok(y)
            }
            Mode::Eval => {
                let running = RunningStats {
                    mean: self.model.buffers[bn.mean].value.data(),
                    var: self.model.buffers[bn.var].value.data(),
                };
                Ok(self.tape.batch_norm(x, gamma, beta, Some(running))?.0)
            }
        }
    }

    fn ln(&mut self, x: Var, ln: &Ln) -> Result<Var> {
        self.tape.layer_norm(x, self.p(ln.gamma), self.p(ln.beta))
    }

    fn basic_block(&mut self, x: Var, blk: &BasicBlock) -> Result<Var> {
        let xq = self.quant(x, blk.input_q)?;
        let h = self.conv(xq, &blk.conv1)?;
        let h = self.bn(h, &blk.bn1)?;
        let h = self.tape.relu(h);
        let h = self.quant(h, blk.mid_q)?;
        let h = self.conv(h, &blk.conv2)?;
        let h = self.bn(h, &blk.bn2)?;
        let shortcut = match &blk.shortcut {
            Some((conv, bn)) => {
                let s = self.conv(xq, conv)?;
                self.bn(s, bn)?
            }
            None => x,
        };
        let y = self.tape.add(h, shortcut)?;
        Ok(self.tape.relu(y))
    }

    /// `x + MHA(LN(x))`, then `+ MLP(LN(·))` on token rows `[batch * T, D]`.
    fn vit_block(&mut self, x: Var, blk: &VitBlock, batch: usize, heads: usize) -> Result<Var> {
        let h = self.ln(x, &blk.ln1)?;
        let h = self.quant(h, blk.attn_in_q)?;
        let q = self.linear_raw(h, &blk.q)?;
        let k = self.linear_raw(h, &blk.k)?;
        let v = self.linear_raw(h, &blk.v)?;
        let a = self.tape.attention(q, k, v, batch, heads)?;
        let a = self.linear(a, &blk.out)?;
        let x = self.tape.add(x, a)?;
        let h = self.ln(x, &blk.ln2)?;
        let h = self.linear(h, &blk.fc1)?;
        let h = self.tape.gelu(h);
        let h = self.linear(h, &blk.fc2)?;
        self.tape.add(x, h)
    }

    /// Applies the optional feature quantizer and the classifier.
    fn head(&mut self, feature: Var, classifier: &Linear) -> Result<(Var, Var)> {
        let feature = self.quant(feature, self.model.feature_q)?;
        let logits = self.linear(feature, classifier)?;
        Ok((feature, logits))
    }

    fn run(&mut self, input: Var) -> Result<(Var, Var)> {
        let model = self.model;
        match &model.layout {
            Layout::Mlp { layers } => {
                let mut x = input;
                let (last, body) = layers.split_last().expect("mlp has at least one layer");
                for l in body {
                    let y = self.linear(x, l)?;
                    x = self.tape.relu(y);
                }
                self.head(x, last)
            }
            Layout::Resnet {
                stem,
                stem_bn,
                blocks,
                fc,
            } => {
                let x = self.conv(input, stem)?;
                let x = self.bn(x, stem_bn)?;
                let mut x = self.tape.relu(x);
                for blk in blocks {
                    x = self.basic_block(x, blk)?;
                }
                let s = self.tape.shape(x).to_vec();
                let x = self.tape.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
                let f = self.tape.mean_axis(x, 2)?;
                self.head(f, fc)
            }
            Layout::Vit {
                patch_embed,
                pos,
                blocks,
                norm,
                head,
            } => {
                let ArchSpec::MiniVit { patch, heads, .. } = &model.spec.arch else {
                    unreachable!("vit layout with non-vit spec")
                };
                let shape = self.tape.shape(input).to_vec();
                let (n, c, s) = (shape[0], shape[1], shape[2]);
                let (index, tokens) = patch_index(n, c, s, *patch);
                let patches = self
                    .tape
                    .gather(input, index, &[n * tokens, c * patch * patch])?;
                let x = self.linear(patches, patch_embed)?;
                let mut x = self.tape.add_rows(x, self.p(*pos))?;
                for blk in blocks {
                    x = self.vit_block(x, blk, n, *heads)?;
                }
                let x = self.ln(x, norm)?;
                let d = self.tape.shape(x)[1];
                let x = self.tape.reshape(x, &[n, tokens, d])?;
                let f = self.tape.mean_axis(x, 1)?;
                self.head(f, head)
            }
        }
    }
}

/// Flat gather indices turning `[n, c, s, s]` images into `[n * T, c * p * p]`
/// patch rows (token-major, then channel, row, column).
fn patch_index(n: usize, c: usize, s: usize, p: usize) -> (Vec<usize>, usize) {
    let per_side = s / p;
    let tokens = per_side * per_side;
    let mut index = Vec::with_capacity(n * c * s * s);
    for img in 0..n {
        for ty in 0..per_side {
            for tx in 0..per_side {
                for ch in 0..c {
                    for py in 0..p {
                        for px in 0..p {
                            index.push(((img * c + ch) * s + ty * p + py) * s + tx * p + px);
                        }
                    }
                }
            }
        }
    }
    (index, tokens)
}

impl<T: Scalar> Model<T> {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn buffers(&self) -> &[Param<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Param<T>] {
        &mut self.buffers
    }

    pub fn quantizers(&self) -> &[QuantSite] {
        &self.quantizers
    }

    pub fn quantizers_mut(&mut self) -> &mut [QuantSite] {
        &mut self.quantizers
    }

    pub fn feature_quantizer(&self) -> Option<&QuantSite> {
        self.feature_q.map(|i| &self.quantizers[i])
    }

    pub fn is_calibrated(&self) -> bool {
        self.quantizers.iter().all(|q| q.calibrated)
    }

    fn push_feature_quantizer(&mut self, bits: u8) {
        self.quantizers.push(QuantSite {
            name: "feature_q".into(),
            params: QuantParams::new(bits, QuantMode::Feature),
            calibrated: false,
        });
        self.feature_q = Some(self.quantizers.len() - 1);
        self.spec.feature_bits = BitWidth::Bits(bits);
    }

    /// Inserts (or replaces) a feature-mode quantizer between the pooled
    /// feature and the classifier. `Fp` removes it.
    pub fn set_feature_quantizer(&mut self, bits: BitWidth) {
        if let Some(i) = self.feature_q.take() {
            self.quantizers.remove(i);
        }
        self.spec.feature_bits = BitWidth::Fp;
        if let Some(b) = bits.bits() {
            self.push_feature_quantizer(b);
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bindings {
        let params = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        let quant = self
            .quantizers
            .iter()
            .map(|q| {
                if trainable {
                    tape.quant(q.params)
                } else {
                    tape.quant_constant(q.params)
                }
            })
            .collect();
        Bindings { params, quant }
    }

    /// Bindings over caller-provided parameter vars (in [`Model::params`]
    /// order); quantizers are bound as constants.
    pub fn bind_params(&self, tape: &mut Tape<T>, params: Vec<Var>) -> Result<Bindings> {
        if params.len() != self.params.len() {
            return Err(Error::shape(
                "bind_params",
                &[params.len()],
                &[self.params.len()],
            ));
        }
        let quant = self
            .quantizers
            .iter()
            .map(|q| tape.quant_constant(q.params))
            .collect();
        Ok(Bindings { params, quant })
    }

    fn ctx<'a>(&'a self, tape: &'a mut Tape<T>, bind: &'a Bindings, mode: Mode) -> Ctx<'a, T> {
        Ctx {
            tape,
            model: self,
            bind,
            mode,
            calibrate: false,
            calibrated: Vec::new(),
            bn_stats: Vec::new(),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bind: &Bindings,
        input: Var,
        mode: Mode,
    ) -> Result<ForwardOut<T>> {
        self.spec.arch.check_input(tape.shape(input))?;
        let mut ctx = self.ctx(tape, bind, mode);
        let (feature, logits) = ctx.run(input)?;
        Ok(ForwardOut {
            feature,
            logits,
            bn_stats: ctx.bn_stats,
        })
    }

    /// Evaluation-mode features and logits of a batch.
    pub fn infer(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let bind = self.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let out = self.forward(&mut tape, &bind, x, Mode::Eval)?;
        Ok((
            tape.value(out.feature).clone(),
            tape.value(out.logits).clone(),
        ))
    }

    /// Initializes every uncalibrated quantizer from one training-mode
    /// forward of `input`, in forward order.
    pub fn calibrate(&mut self, input: &Tensor<T>) -> Result<()> {
        if self.is_calibrated() {
            return Ok(());
        }
        let mut tape = Tape::new();
        let bind = self.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        self.spec.arch.check_input(input.shape())?;
        let updates = {
            let mut ctx = self.ctx(&mut tape, &bind, Mode::Train);
            ctx.calibrate = true;
            ctx.run(x)?;
            ctx.calibrated
        };
        for (i, params) in updates {
            self.quantizers[i].params = params;
            self.quantizers[i].calibrated = true;
        }
        Ok(())
    }

    /// Folds batch statistics into the running estimates (momentum 0.1).
    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats<T>)]) {
        let m = T::lit(BN_MOMENTUM);
        for (mean_idx, s) in stats {
            for (dst, src) in [(*mean_idx, &s.mean), (*mean_idx + 1, &s.var)] {
                for (r, &b) in self.buffers[dst].value.data_mut().iter_mut().zip(src) {
                    *r = (T::one() - m) * *r + m * b;
                }
            }
        }
    }

    /// Forward of residual block `index` alone (training-mode batch norm).
    pub fn resnet_block_forward(
        &self,
        tape: &mut Tape<T>,
        bind: &Bindings,
        index: usize,
        x: Var,
    ) -> Result<Var> {
        let Layout::Resnet { blocks, .. } = &self.layout else {
            return Err(Error::Config("not a residual network".into()));
        };
        let blk = blocks
            .get(index)
            .ok_or_else(|| Error::Config(format!("no residual block {index}")))?;
        self.ctx(tape, bind, Mode::Train).basic_block(x, blk)
    }

    /// Forward of transformer block `index` alone on token rows `[batch * T, D]`.
    pub fn vit_block_forward(
        &self,
        tape: &mut Tape<T>,
        bind: &Bindings,
        index: usize,
        x: Var,
        batch: usize,
    ) -> Result<Var> {
        let (Layout::Vit { blocks, .. }, ArchSpec::MiniVit { heads, .. }) =
            (&self.layout, &self.spec.arch)
        else {
            return Err(Error::Config("not a vision transformer".into()));
        };
        let blk = blocks
            .get(index)
            .ok_or_else(|| Error::Config(format!("no transformer block {index}")))?;
        self.ctx(tape, bind, Mode::Train)
            .vit_block(x, blk, batch, *heads)
    }

    /// Same model with every tensor converted to another element type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let conv = |ps: &[Param<T>]| {
            ps.iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    kind: p.kind,
                })
                .collect()
        };
        Model {
            spec: self.spec.clone(),
            params: conv(&self.params),
            buffers: conv(&self.buffers),
            quantizers: self.quantizers.clone(),
            feature_q: self.feature_q,
            layout: self.layout.clone(),
        }
    }

    /// True when every parameter, buffer and quantizer scalar is finite.
    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .chain(&self.buffers)
            .all(|p| p.value.all_finite())
            && self.quantizers.iter().all(|q| {
                q.params.lower.is_finite()
                    && q.params.upper.is_finite()
                    && q.params.alpha.is_finite()
            })
    }
}
