//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records each primitive application together with its input
//! node ids. Values are stored on the tape and addressed through copyable
//! [`Var`] handles, so model code reads like ordinary expression code:
//!
//! ```
//! use priormap_core::autodiff::Tape;
//! use priormap_core::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let f = tape.sum(sq).unwrap();
//! let grads = tape.backward(f).unwrap();
//! assert_eq!(grads.get(x).data(), &[2.0, 4.0]);
//! ```
//!
//! There is no implicit broadcasting. Shapes are aligned with explicit
//! [`Op::Expand`] and [`Op::Reshape`] nodes.

mod kernels;

pub use kernels::PE_TEMPERATURE;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Clamp margin for [`Op::InvSigmoid`].
pub const INV_SIGMOID_EPS: f64 = 1e-6;

/// A primitive that the tape knows how to run forward and backward.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Trainable input.
    Leaf,
    /// Input that never receives a gradient.
    Constant,
    Add,
    Sub,
    Mul,
    /// `[n,k] × [k,m] → [n,m]`
    MatMul,
    /// `[B,n,k] × [B,k,m] → [B,n,m]`; with `transpose_rhs` the right operand
    /// is stored `[B,m,k]`.
    BatchMatMul {
        transpose_rhs: bool,
    },
    Softmax {
        axis: usize,
    },
    Relu,
    Sigmoid,
    /// Log-odds after clamping the input into `[eps, 1 - eps]`.
    InvSigmoid {
        eps: f64,
    },
    Abs,
    /// `max(0, x)²`
    SquaredHinge,
    /// Normalization over the last axis, no affine part.
    LayerNorm {
        eps: f64,
    },
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    /// Sum over one axis (removed) or everything (scalar result).
    Sum {
        axis: Option<usize>,
    },
    Mean {
        axis: Option<usize>,
    },
    /// `scale · x + shift`
    Affine {
        scale: f64,
        shift: f64,
    },
    Reshape {
        shape: Vec<usize>,
    },
    Permute {
        perm: Vec<usize>,
    },
    /// Repeats an extent-1 axis `times` times.
    Expand {
        axis: usize,
        times: usize,
    },
    /// Selects rows along axis 0.
    Gather {
        indices: Vec<usize>,
    },
    /// Euclidean norm over the last axis (removed).
    Norm,
    /// `grid C×h×w`, `points K×2` → `K×C`.
    BilinearSample,
    /// `grid C×h×w`, `points B×S×2`, `weights B×S` → `B×C`, the
    /// weight-summed bilinear samples of each row.
    WeightedSample,
    /// `refs Q×2`, `offsets (Q·H)×S×2`, `weights (Q·H)×S`, `w_value H×C×D`,
    /// then one channel-last `h×w×C` grid per level → `Q×(H·D)`.
    ///
    /// Row `q·H + h` sums its weighted bilinear samples and projects the sum
    /// by `w_value[h]`. Sample `s` reads level `s / points` at
    /// `refs[q] + offsets / (h, w)`, so offsets are in cells of their level.
    DeformableAttend {
        heads: usize,
        points: usize,
    },
    /// `Q×2` normalized coordinates → `Q×channels`.
    SinusoidalPe {
        channels: usize,
    },
    /// Elementwise sigmoid focal loss of logits against targets.
    SigmoidFocal {
        alpha: f64,
        gamma: f64,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add => "add",
            Op::Sub => "subtract",
            Op::Mul => "multiply",
            Op::MatMul => "matmul",
            Op::BatchMatMul { .. } => "batch-matmul",
            Op::Softmax { .. } => "softmax",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::InvSigmoid { .. } => "inverse-sigmoid",
            Op::Abs => "abs",
            Op::SquaredHinge => "squared-hinge",
            Op::LayerNorm { .. } => "layer-normalize",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum { .. } => "reduce-sum",
            Op::Mean { .. } => "reduce-mean",
            Op::Affine { .. } => "affine",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Expand { .. } => "expand",
            Op::Gather { .. } => "gather",
            Op::Norm => "l2-norm",
            Op::BilinearSample => "bilinear-sample",
            Op::WeightedSample => "weighted-sample",
            Op::DeformableAttend { .. } => "deformable-attend",
            Op::SinusoidalPe { .. } => "sinusoidal-pe",
            Op::SigmoidFocal { .. } => "sigmoid-focal",
        }
    }
}

/// Runs one primitive outside of any tape.
pub fn primitive_forward(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    kernels::forward(op, inputs)
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
///
/// Nodes are appended in evaluation order, so every node's inputs precede
/// it. A tape built with [`Tape::inference`] stores values only and cannot
/// be differentiated.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), recording: true }
    }

    /// A tape that evaluates without recording backward structure.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`. Handles to dropped
    /// nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, inputs, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let rg = self.recording;
        self.push(Op::Leaf, Vec::new(), value, rg)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, Vec::new(), value, false)
    }

    /// Copies a value into a new constant node, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Applies `op` to `inputs`, recording a node when recording is on.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        if matches!(op, Op::Leaf | Op::Constant) {
            return Err(Error::contract("Tape::apply", "leaves are created with leaf/constant"));
        }
        let value = {
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            kernels::forward(&op, &vals)?
        };
        if !self.recording {
            return Ok(self.push(Op::Constant, Vec::new(), value, false));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(op, inputs.iter().map(|v| v.0).collect(), value, requires_grad))
    }

    /// Gradients of the scalar node `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Result<GradMap> {
        if !self.recording {
            return Err(Error::contract("backward", "tape was built without recording"));
        }
        let out = &self.nodes[output.0];
        if out.value.numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("output must be scalar, got shape {:?}", out.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(out.value.shape(), 1.0));
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&i| self.nodes[i].requires_grad).collect();
            let parts = kernels::backward(&node.op, &inputs, &node.value, &g, &needs);
            for (&input, part) in node.inputs.iter().zip(parts) {
                let Some(part) = part else { continue };
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.data_mut().iter_mut().zip(part.data()).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(part),
                }
            }
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(GradMap { grads, shapes })
    }

    /// Re-evaluates every recorded node from its inputs' stored values and
    /// checks the result matches the stored output bit for bit.
    pub fn replay_matches(&self) -> Result<bool> {
        for node in &self.nodes {
            if node.inputs.is_empty() {
                continue;
            }
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let again = kernels::forward(&node.op, &inputs)?;
            let same = again.shape() == node.value.shape()
                && again.data().iter().zip(node.value.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn bmm(&mut self, a: Var, b: Var, transpose_rhs: bool) -> Result<Var> {
        self.apply(Op::BatchMatMul { transpose_rhs }, &[a, b])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Softmax { axis }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Relu, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[x])
    }

    pub fn inv_sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::InvSigmoid { eps: INV_SIGMOID_EPS }, &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Abs, &[x])
    }

    pub fn squared_hinge(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::SquaredHinge, &[x])
    }

    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::LayerNorm { eps: 1e-5 }, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat { axis }, xs)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(Op::Slice { axis, start, end }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sum { axis: None }, &[x])
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Sum { axis: Some(axis) }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Mean { axis: None }, &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Mean { axis: Some(axis) }, &[x])
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.apply(Op::Affine { scale, shift: 0.0 }, &[x])
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.apply(Op::Affine { scale, shift }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(x) == shape {
            return Ok(x);
        }
        self.apply(Op::Reshape { shape: shape.to_vec() }, &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        self.apply(Op::Permute { perm: perm.to_vec() }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    pub fn expand(&mut self, x: Var, axis: usize, times: usize) -> Result<Var> {
        self.apply(Op::Expand { axis, times }, &[x])
    }

    pub fn gather(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        self.apply(Op::Gather { indices }, &[x])
    }

    pub fn norm(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Norm, &[x])
    }

    pub fn bilinear_sample(&mut self, grid: Var, pts: Var) -> Result<Var> {
        self.apply(Op::BilinearSample, &[grid, pts])
    }

    pub fn weighted_sample(&mut self, grid: Var, pts: Var, weights: Var) -> Result<Var> {
        self.apply(Op::WeightedSample, &[grid, pts, weights])
    }

    #[allow(clippy::too_many_arguments)]
    pub fn deformable_attend(
        &mut self,
        refs: Var,
        offsets: Var,
        weights: Var,
        w_value: Var,
        grids: &[Var],
        heads: usize,
        points: usize,
    ) -> Result<Var> {
        let mut inputs = vec![refs, offsets, weights, w_value];
        inputs.extend_from_slice(grids);
        self.apply(Op::DeformableAttend { heads, points }, &inputs)
    }

    pub fn sinusoidal_pe(&mut self, coords: Var, channels: usize) -> Result<Var> {
        self.apply(Op::SinusoidalPe { channels }, &[coords])
    }

    pub fn sigmoid_focal(&mut self, logits: Var, targets: Var, alpha: f64, gamma: f64) -> Result<Var> {
        self.apply(Op::SigmoidFocal { alpha, gamma }, &[logits, targets])
    }

    /// `x · w + b` for `x: [n, i]`, `w: [i, o]`, `b: [o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        let n = self.shape(x)[0];
        let o = self.shape(b)[0];
        let b2 = self.reshape(b, &[1, o])?;
        let bias = self.expand(b2, 0, n)?;
        self.add(xw, bias)
    }
}

/// Gradients keyed by node.
#[derive(Debug)]
pub struct GradMap {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl GradMap {
    /// Gradient for `v`; zeros when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Tensor {
        self.grads.get(v.0).and_then(|g| g.clone()).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn try_get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Maximum relative disagreement between analytic and central-difference
/// gradients of a scalar function over every input coordinate.
///
/// The relative error of one coordinate is
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`. Any error or
/// non-finite value along the way yields `f64::INFINITY`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_coords(f, inputs, eps, None)
}

/// [`grad_check`] restricted to a subset of `(input, coordinate)` pairs.
pub fn grad_check_coords<F>(f: F, inputs: &[Tensor], eps: f64, coords: Option<&[(usize, usize)]>) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        log::warn!("grad_check step {eps} outside [1e-7, 1e-3]");
        return f64::INFINITY;
    }
    let eval = |xs: &[Tensor]| -> Option<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars).ok()?;
        let v = tape.value(out);
        (v.numel() == 1 && v.item().is_finite()).then(|| v.item())
    };
    let analytic: Vec<Tensor> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let Ok(out) = f(&mut tape, &vars) else {
            return f64::INFINITY;
        };
        let Ok(grads) = tape.backward(out) else {
            return f64::INFINITY;
        };
        vars.iter().map(|&v| grads.get(v)).collect()
    };
    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs.iter().enumerate().flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j))).collect();
            &all
        }
    };
    let mut xs: Vec<Tensor> = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for &(i, j) in coords {
        let orig = xs[i].data()[j];
        xs[i].data_mut()[j] = orig + eps;
        let plus = eval(&xs);
        xs[i].data_mut()[j] = orig - eps;
        let minus = eval(&xs);
        xs[i].data_mut()[j] = orig;
        let (Some(plus), Some(minus)) = (plus, minus) else {
            return f64::INFINITY;
        };
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i].data()[j];
        if !a.is_finite() {
            return f64::INFINITY;
        }
        let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(rel);
    }
    worst
}
