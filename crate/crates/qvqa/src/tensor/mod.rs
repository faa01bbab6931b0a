//! Minimal reverse-mode tensor engine.
//!
//! Forward passes build a [`Tape`] of operations over row-major tensors;
//! [`Tape::backward`] replays the tape in reverse and accumulates gradients
//! into a [`Params`] registry. The op catalog is exactly what the model
//! needs: matmul, elementwise arithmetic, axis mean, concat/slice, stabilized
//! softmax / log-sum-exp / cross-entropy, layer norm, GELU (tanh form),
//! embedding lookup, additive score masking, cosine similarity and a few
//! scalar reductions.
//!
//! No broadcasting beyond scalar-times-tensor and the explicit row-bias op;
//! every other shape must match exactly, and mismatches are reported with
//! both shapes. Single-threaded and bit-deterministic for a fixed seed.

mod io;
mod ops;

pub mod gradcheck;

pub use gradcheck::{grad_check, GradCheckReport};
pub use io::{load_checkpoint, load_tensor, save_checkpoint, save_tensor, QVT_MAGIC};

use rand::Rng;

use crate::error::{Error, Result};

/// Element type: `f32` by default, `f64` with the `f64` feature for tight
/// gradient verification.
#[cfg(not(feature = "f64"))]
pub type S = f32;
#[cfg(feature = "f64")]
pub type S = f64;

/// Additive mask value for disallowed attention scores. Large enough to zero
/// the softmax weight, small enough not to overflow in `exp` after the
/// row-max subtraction.
pub const MASK_NEG: S = -1.0e9;

const NORM_EPS: S = 1.0e-8;
const LN_EPS: S = 1.0e-5;

/// Dense row-major tensor. Plain data; gradients live in [`Params`] and on
/// the tape, not here.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "shape {:?} (numel {}) does not match data length {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn scalar(v: S) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn vector(data: Vec<S>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// I.i.d. normal entries scaled by `std`.
    pub fn randn<R: Rng>(shape: &[usize], std: S, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| gauss(rng) * std).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count / column count for rank-2 tensors; a vector is one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn item(&self) -> S {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }
}

/// Box–Muller, so we only depend on the core RNG and stay identical across
/// rand versions.
fn gauss<R: Rng>(rng: &mut R) -> S {
    loop {
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        if u1 > 1e-300 {
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            return z as S;
        }
    }
}

/// Handle to a named trainable tensor in a [`Params`] registry.
pub type ParamId = usize;

/// Registry of named parameters with same-shape gradient accumulators.
/// Names are unique; iteration order is registration order, which fixes the
/// optimizer update order and keeps runs bit-reproducible.
#[derive(Debug, Clone, Default)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name:?}"
        );
        let grad = Tensor::zeros(value.shape());
        self.names.push(name.to_string());
        self.values.push(value);
        self.grads.push(grad);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        0..self.names.len()
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }
}

/// Node index on a [`Tape`].
pub type Ix = usize;

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Const,
    Param(ParamId),
    Matmul(Ix, Ix),
    Transpose(Ix),
    Add(Ix, Ix),
    Sub(Ix, Ix),
    Mul(Ix, Ix),
    Scale(Ix, S),
    /// Multiply every element of `x` by scalar node `s`.
    MulScalarNode { x: Ix, s: Ix },
    /// Divide every element of `x` by scalar node `s`.
    DivScalarNode { x: Ix, s: Ix },
    /// Matrix plus a row vector added to every row.
    AddRow { mat: Ix, row: Ix },
    MeanAxis0(Ix),
    MeanAll(Ix),
    ConcatRows(Vec<Ix>),
    ConcatCols(Vec<Ix>),
    SliceRows { x: Ix, start: usize, end: usize },
    SliceCols { x: Ix, start: usize, end: usize },
    /// Row-stabilized softmax; backward reads the node's own output.
    SoftmaxRows(Ix),
    Log(Ix),
    Exp(Ix),
    LayerNorm { x: Ix, gain: Ix, bias: Ix },
    Gelu(Ix),
    Embedding { table: Ix, ids: Vec<usize> },
    /// Adds `MASK_NEG` where `allowed` is false; identity gradient.
    AddMask { x: Ix },
    CosineSim(Ix, Ix),
    CrossEntropy { logits: Ix, targets: Vec<usize>, mask: Vec<bool> },
    StackScalars(Vec<Ix>),
    /// Max of a vector; subgradient routes to the first argmax.
    ReduceMax(Ix),
    /// Stabilized log-sum-exp of a vector.
    LogSumExp(Ix),
    Clamp { x: Ix, lo: S, hi: S },
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
}

/// Operation tape for one forward pass. Build nodes with the op methods,
/// then call [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, ix: Ix) -> &Tensor {
        &self.nodes[ix].value
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Ix {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    /// Leaf that never receives parameter gradient (inputs, buffered
    /// negatives, masks rendered as data).
    pub fn constant(&mut self, value: Tensor) -> Ix {
        self.push(value, Op::Const)
    }

    /// Leaf whose gradient accumulates into `params` on backward. The same
    /// parameter may be registered on a tape any number of times (shared
    /// weights); contributions add.
    pub fn param(&mut self, params: &Params, id: ParamId) -> Ix {
        self.push(params.value(id).clone(), Op::Param(id))
    }

    /// Reverse-mode sweep from scalar node `loss`, adding parameter
    /// gradients into `params`. Returns the full per-node gradient table
    /// (entries are `None` for nodes the loss does not depend on).
    pub fn backward(&self, loss: Ix, params: &mut Params) -> Vec<Option<Tensor>> {
        let grads = self.backward_nodes(loss);
        for (ix, node) in self.nodes.iter().enumerate().take(loss + 1) {
            if let (Op::Param(pid), Some(g)) = (&node.op, &grads[ix]) {
                let acc = params.grad_mut(*pid);
                for (a, b) in acc.data.iter_mut().zip(&g.data) {
                    *a += *b;
                }
            }
        }
        grads
    }

    /// Reverse sweep without touching any registry; used by diagnostics that
    /// inspect gradients on constants.
    pub fn backward_nodes(&self, loss: Ix) -> Vec<Option<Tensor>> {
        assert_eq!(
            self.nodes[loss].value.numel(),
            1,
            "backward from non-scalar node"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::scalar(1.0));
        for ix in (0..=loss).rev() {
            if grads[ix].is_none() {
                continue;
            }
            self.vjp(ix, &mut grads);
        }
        grads
    }
}

pub(crate) fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], add: impl FnOnce(&mut [S])) {
    if slot.is_none() {
        *slot = Some(Tensor::zeros(shape));
    }
    add(&mut slot.as_mut().unwrap().data);
}

pub(crate) fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}
