use crate::error::{Error, Result};
use crate::quantizer::QuantParams;

use super::{Scalar, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Handle to a quantizer's learnable scalars recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct QVar(pub(crate) usize);

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnGeom {
    pub batch: usize,
    pub tokens: usize,
    pub heads: usize,
    pub dim: usize,
}

/// Reduction layout shared by batch and layer normalization: element
/// `(o, c, i)` lives at `(o * channels + c) * inner + i` and statistics are
/// taken over `o` and `i` for each `c`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct NormGeom {
    pub outer: usize,
    pub channels: usize,
    pub inner: usize,
}

pub(crate) enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddRows {
        x: Var,
        bias: Var,
    },
    MulScalar {
        x: Var,
        s: T,
    },
    Relu {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    Sum {
        x: Var,
    },
    MeanAxis {
        x: Var,
        outer: usize,
        axis: usize,
        inner: usize,
    },
    Reshape {
        x: Var,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        geom: NormGeom,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        dim: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        geom: AttnGeom,
        probs: Vec<T>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    SoftTargetKl {
        logits: Var,
        target: Vec<T>,
        probs: Vec<T>,
    },
    Mse {
        a: Var,
        b: Var,
    },
    FakeQuant {
        x: Var,
        q: QVar,
    },
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

pub(crate) struct QuantLeaf {
    pub params: QuantParams,
    pub requires_grad: bool,
}

/// Accumulated gradients of a quantizer's scalars.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct QuantGrads {
    pub lower: f64,
    pub upper: f64,
    pub alpha: f64,
}

impl QuantGrads {
    pub fn is_finite(&self) -> bool {
        self.lower.is_finite() && self.upper.is_finite() && self.alpha.is_finite()
    }
}

/// Records operations in execution order. A tape is single-use: build it,
/// run [`Tape::backward`] once or several times, then drop it.
pub struct Tape<T: Scalar = f32> {
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) quants: Vec<QuantLeaf>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            quants: Vec::new(),
        }
    }

    /// Trainable input; receives a gradient from [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn quant(&mut self, params: QuantParams) -> QVar {
        self.push_quant(params, true)
    }

    pub fn quant_constant(&mut self, params: QuantParams) -> QVar {
        self.push_quant(params, false)
    }

    fn push_quant(&mut self, params: QuantParams, requires_grad: bool) -> QVar {
        self.quants.push(QuantLeaf {
            params,
            requires_grad,
        });
        QVar(self.quants.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn quant_params(&self, q: QVar) -> &QuantParams {
        &self.quants[q.0].params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Nodes are visited once each, in reverse recording order, and gradients
    /// are accumulated in that fixed order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut store = GradStore {
            nodes: &self.nodes,
            grads: (0..=loss.0).map(|_| None).collect(),
            quant: vec![QuantGrads::default(); self.quants.len()],
        };
        if self.nodes[loss.0].requires_grad {
            store.grads[loss.0] = Some(vec![T::one()]);
        }
        let mut leaves: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for id in (0..=loss.0).rev() {
            let Some(grad) = store.grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if let Op::Leaf = node.op {
                leaves[id] = Some(Tensor::new(node.value.shape(), grad)?);
                continue;
            }
            self.backward_node(id, &grad, &mut store);
        }
        Ok(Gradients {
            tensors: leaves,
            quant: store.quant,
        })
    }

    /// Sign pattern of every piecewise-linear switch point on the tape (ReLU inputs,
    /// quantizer clip and rounding cells). Finite differences are only valid when
    /// this pattern is unchanged by the perturbation.
    pub fn kink_signature(&self) -> Vec<i64> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Relu { x } => sig.extend(
                    self.nodes[x.0]
                        .value
                        .data()
                        .iter()
                        .map(|&v| (v > T::zero()) as i64),
                ),
                Op::FakeQuant { x, q } => {
                    let p = &self.quants[q.0].params;
                    sig.extend(self.nodes[x.0].value.data().iter().map(|&v| {
                        let vhat = p.normalize(v.as_f64());
                        (vhat * p.steps()).round() as i64
                    }))
                }
                _ => {}
            }
        }
        sig
    }
}

pub(crate) struct GradStore<'a, T> {
    pub nodes: &'a [Node<T>],
    pub grads: Vec<Option<Vec<T>>>,
    pub quant: Vec<QuantGrads>,
}

impl<T: Scalar> GradStore<'_, T> {
    /// Mutable gradient buffer for `v`, or `None` when `v` does not need one.
    pub fn slot(&mut self, v: Var) -> Option<&mut [T]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }
}

pub struct Gradients<T: Scalar = f32> {
    tensors: Vec<Option<Tensor<T>>>,
    quant: Vec<QuantGrads>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf, or `None` when it is a constant or unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.tensors.get(v.0).and_then(|t| t.as_ref())
    }

    pub fn quant(&self, q: QVar) -> QuantGrads {
        self.quant[q.0]
    }
}
