//! A small reverse-mode autodiff engine covering exactly the operations the
//! reconstruction network needs.
//!
//! Values live on a [`Tape`] in execution order; [`Tape::backward`] walks the
//! nodes once, in reverse, accumulating adjoints. Ops are recorded through
//! tape methods and referenced by lightweight [`Var`] handles.

mod conv;
mod gradcheck;
mod optim;

pub use gradcheck::{check_gradient, spread_coords, GradCheckReport};
pub use optim::RmsProp;

use crate::error::{Error, Result};
use std::cell::RefCell;
use std::rc::Rc;

/// Tensor shape. Activations are channels x height x width; convolution
/// kernels carry their own 4D variant; losses are scalars.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Chw(usize, usize, usize),
    Kernel(usize, usize, usize, usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Scalar => 1,
            Shape::Chw(c, h, w) => c * h * w,
            Shape::Kernel(co, ci, kh, kw) => co * ci * kh * kw,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Position on the tape (oldest node first).
    pub fn index(&self) -> usize {
        self.0
    }
}

/// A linear map that equals its own adjoint. The tape's residual op applies
/// it in the forward pass and re-applies it (negated) to the incoming
/// gradient in the backward pass; correctness of that rule is exactly
/// self-adjointness.
pub trait SelfAdjointMap {
    fn apply(&self, x: &[f64]) -> Vec<f64>;
}

enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var, dims: conv::ConvDims },
    LeakyRelu { input: Var, slope: f64 },
    Upsample2x { input: Var },
    AvgPool2x { input: Var },
    ConcatChannels { a: Var, b: Var },
    Add { a: Var, b: Var },
    Scale { input: Var, factor: f64 },
    Sum { input: Var },
    HuberLoss { input: Var, delta: f64 },
    Residual { input: Var, map: Rc<dyn SelfAdjointMap> },
}

struct Node {
    shape: Shape,
    value: Rc<Vec<f64>>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed operations, sufficient to replay adjoints.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Handle for the `idx`-th recorded node (oldest first), for structural
    /// inspection in tests and audits.
    pub fn var_at(&self, idx: usize) -> Var {
        assert!(idx < self.len(), "var_at({idx}) out of range");
        Var(idx)
    }

    fn push(&self, shape: Shape, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        self.push_shared(shape, Rc::new(value), requires_grad, op)
    }

    fn push_shared(&self, shape: Shape, value: Rc<Vec<f64>>, requires_grad: bool, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { shape, value, grad: None, requires_grad, op });
        Var(nodes.len() - 1)
    }

    pub fn leaf(&self, shape: Shape, data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        self.leaf_shared(shape, Rc::new(data), requires_grad)
    }

    /// Leaf whose storage is shared with the caller (used for network
    /// parameters, which persist across per-iteration tapes).
    pub fn leaf_shared(&self, shape: Shape, data: Rc<Vec<f64>>, requires_grad: bool) -> Result<Var> {
        if data.len() != shape.len() {
            return Err(Error::DimensionMismatch(format!(
                "leaf data has {} values, shape {:?} needs {}",
                data.len(),
                shape,
                shape.len()
            )));
        }
        Ok(self.push_shared(shape, data, requires_grad, Op::Leaf))
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.push(Shape::Scalar, vec![v], false, Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes.borrow()[v.0].shape
    }

    pub fn value(&self, v: Var) -> Rc<Vec<f64>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn value_scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value[0]
    }

    /// Gradient filled in by the latest [`Tape::backward`] call. `None` for
    /// nodes that do not require gradients.
    pub fn grad(&self, v: Var) -> Option<Vec<f64>> {
        self.nodes.borrow()[v.0].grad.clone()
    }

    /// Op name per node, oldest first. Used by structural tests (wiring
    /// audits, "no node for the RBP update" checks).
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes
            .borrow()
            .iter()
            .map(|n| match n.op {
                Op::Leaf => "leaf",
                Op::Conv2d { .. } => "conv2d",
                Op::LeakyRelu { .. } => "leaky_relu",
                Op::Upsample2x { .. } => "upsample2x",
                Op::AvgPool2x { .. } => "avg_pool2x",
                Op::ConcatChannels { .. } => "concat_channels",
                Op::Add { .. } => "add",
                Op::Scale { .. } => "scale",
                Op::Sum { .. } => "sum",
                Op::HuberLoss { .. } => "huber_loss",
                Op::Residual { .. } => "residual",
            })
            .collect()
    }

    /// Direct inputs of a node, for structural tests.
    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        match self.nodes.borrow()[v.0].op {
            Op::Leaf => vec![],
            Op::Conv2d { input, kernel, bias, .. } => vec![input, kernel, bias],
            Op::LeakyRelu { input, .. }
            | Op::Upsample2x { input }
            | Op::AvgPool2x { input }
            | Op::Scale { input, .. }
            | Op::Sum { input }
            | Op::HuberLoss { input, .. }
            | Op::Residual { input, .. } => vec![input],
            Op::ConcatChannels { a, b } | Op::Add { a, b } => vec![a, b],
        }
    }

    fn chw(&self, v: Var, ctx: &str) -> Result<(usize, usize, usize)> {
        match self.shape(v) {
            Shape::Chw(c, h, w) => Ok((c, h, w)),
            other => {
                Err(Error::InvalidInput(format!("{ctx}: expected CHW tensor, got {other:?}")))
            }
        }
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Standard cross-correlation with zero padding.
    pub fn conv2d(&self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (ci, h, w) = self.chw(input, "conv2d input")?;
        let (co, kci, kh, kw) = match self.shape(kernel) {
            Shape::Kernel(co, ci, kh, kw) => (co, ci, kh, kw),
            other => {
                return Err(Error::InvalidInput(format!("conv2d kernel: expected 4D, got {other:?}")))
            }
        };
        let (bc, bh, bw) = self.chw(bias, "conv2d bias")?;
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidInput(format!("conv2d kernel must be odd, got {kh}x{kw}")));
        }
        if kci != ci {
            return Err(Error::DimensionMismatch(format!(
                "conv2d: input has {ci} channels, kernel expects {kci}"
            )));
        }
        if (bc, bh, bw) != (co, 1, 1) {
            return Err(Error::DimensionMismatch(format!(
                "conv2d: bias shape ({bc},{bh},{bw}) must be ({co},1,1)"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidInput("conv2d stride must be >= 1".into()));
        }
        let oh = conv::out_dim(h, kh, stride, padding)
            .ok_or_else(|| Error::DimensionMismatch("conv2d: kernel larger than padded input".into()))?;
        let ow = conv::out_dim(w, kw, stride, padding)
            .ok_or_else(|| Error::DimensionMismatch("conv2d: kernel larger than padded input".into()))?;
        let dims = conv::ConvDims { ci, h, w, co, kh, kw, stride, pad: padding, oh, ow };
        let out = conv::forward(&dims, &self.value(input), &self.value(kernel), &self.value(bias));
        let rg = self.requires(input) || self.requires(kernel) || self.requires(bias);
        Ok(self.push(Shape::Chw(co, oh, ow), out, rg, Op::Conv2d { input, kernel, bias, dims }))
    }

    /// Elementwise `max(x, slope*x)`; the subgradient at 0 is taken as `slope`.
    pub fn leaky_relu(&self, input: Var, slope: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&slope) {
            return Err(Error::InvalidInput(format!("leaky_relu slope must be in [0,1), got {slope}")));
        }
        let value = self.value(input);
        let out: Vec<f64> = value.iter().map(|&x| x.max(slope * x)).collect();
        Ok(self.push(self.shape(input), out, self.requires(input), Op::LeakyRelu { input, slope }))
    }

    /// Nearest-neighbor 2x spatial upsample.
    pub fn upsample2x(&self, input: Var) -> Result<Var> {
        let (c, h, w) = self.chw(input, "upsample2x")?;
        let value = self.value(input);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = value[(ch * h + y) * w + x];
                    let base = ch * oh * ow;
                    out[base + (2 * y) * ow + 2 * x] = v;
                    out[base + (2 * y) * ow + 2 * x + 1] = v;
                    out[base + (2 * y + 1) * ow + 2 * x] = v;
                    out[base + (2 * y + 1) * ow + 2 * x + 1] = v;
                }
            }
        }
        Ok(self.push(Shape::Chw(c, oh, ow), out, self.requires(input), Op::Upsample2x { input }))
    }

    /// 2x2 average pooling (even spatial dims required).
    pub fn avg_pool2x(&self, input: Var) -> Result<Var> {
        let (c, h, w) = self.chw(input, "avg_pool2x")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::DimensionMismatch(format!("avg_pool2x needs even dims, got {h}x{w}")));
        }
        let value = self.value(input);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let base = (ch * h + 2 * y) * w + 2 * x;
                    out[(ch * oh + y) * ow + x] =
                        0.25 * (value[base] + value[base + 1] + value[base + w] + value[base + w + 1]);
                }
            }
        }
        Ok(self.push(Shape::Chw(c, oh, ow), out, self.requires(input), Op::AvgPool2x { input }))
    }

    /// Channel-stacked tensor; the backward pass splits the gradient.
    pub fn concat_channels(&self, a: Var, b: Var) -> Result<Var> {
        let (ca, ha, wa) = self.chw(a, "concat_channels lhs")?;
        let (cb, hb, wb) = self.chw(b, "concat_channels rhs")?;
        if (ha, wa) != (hb, wb) {
            return Err(Error::DimensionMismatch(format!(
                "concat_channels: spatial {ha}x{wa} vs {hb}x{wb}"
            )));
        }
        let mut out = Vec::with_capacity((ca + cb) * ha * wa);
        out.extend_from_slice(&self.value(a));
        out.extend_from_slice(&self.value(b));
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Shape::Chw(ca + cb, ha, wa), out, rg, Op::ConcatChannels { a, b }))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::DimensionMismatch(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let va = self.value(a);
        let vb = self.value(b);
        let out: Vec<f64> = va.iter().zip(vb.iter()).map(|(x, y)| x + y).collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(self.shape(a), out, rg, Op::Add { a, b }))
    }

    pub fn scale(&self, input: Var, factor: f64) -> Result<Var> {
        let value = self.value(input);
        let out: Vec<f64> = value.iter().map(|&x| factor * x).collect();
        Ok(self.push(self.shape(input), out, self.requires(input), Op::Scale { input, factor }))
    }

    pub fn sum(&self, input: Var) -> Result<Var> {
        let total: f64 = self.value(input).iter().sum();
        Ok(self.push(Shape::Scalar, vec![total], self.requires(input), Op::Sum { input }))
    }

    /// Mean Huber penalty: `0.5 x^2` for `|x| <= delta`, else
    /// `delta (|x| - 0.5 delta)`, averaged over elements. The gradient of
    /// each element is clamped to `+-delta / N`.
    pub fn huber_loss(&self, input: Var, delta: f64) -> Result<Var> {
        if !(delta > 0.0) {
            return Err(Error::InvalidInput(format!("huber delta must be > 0, got {delta}")));
        }
        let value = self.value(input);
        if value.is_empty() {
            return Err(Error::InvalidInput("huber_loss on empty tensor".into()));
        }
        let n = value.len() as f64;
        let total: f64 = value
            .iter()
            .map(|&x| {
                let a = x.abs();
                if a <= delta {
                    0.5 * x * x
                } else {
                    delta * (a - 0.5 * delta)
                }
            })
            .sum();
        Ok(self.push(
            Shape::Scalar,
            vec![total / n],
            self.requires(input),
            Op::HuberLoss { input, delta },
        ))
    }

    /// `offset - M(input)` for a self-adjoint `M`; the normal-equation
    /// residual when `offset = A^T g` and `M = A^T A`.
    pub fn residual(&self, input: Var, offset: &[f64], map: Rc<dyn SelfAdjointMap>) -> Result<Var> {
        let mapped = map.apply(&self.value(input));
        if mapped.len() != offset.len() || mapped.len() != self.shape(input).len() {
            return Err(Error::DimensionMismatch(format!(
                "residual: map produced {} values, offset has {}, input has {}",
                mapped.len(),
                offset.len(),
                self.shape(input).len()
            )));
        }
        let out: Vec<f64> = offset.iter().zip(&mapped).map(|(b, q)| b - q).collect();
        Ok(self.push(self.shape(input), out, self.requires(input), Op::Residual { input, map }))
    }

    /// Populate gradients of every grad-requiring node reachable from `loss`.
    ///
    /// Nodes are visited exactly once, newest to oldest (creation order is a
    /// topological order). Gradients are reset first, so repeated calls over
    /// the same tape produce identical results.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let nodes = &mut *self.nodes.borrow_mut();
        if nodes[loss.0].shape != Shape::Scalar {
            return Err(Error::InvalidInput(format!(
                "backward: loss must be scalar, got {:?}",
                nodes[loss.0].shape
            )));
        }
        for node in nodes.iter_mut() {
            node.grad = node.requires_grad.then(|| vec![0.0; node.shape.len()]);
        }
        if !nodes[loss.0].requires_grad {
            return Ok(()); // nothing depends on any gradient leaf
        }
        nodes[loss.0].grad = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if nodes[idx].grad.is_none() {
                continue;
            }
            let g = nodes[idx].grad.take().expect("checked above");
            Self::propagate(nodes, idx, &g);
            nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn propagate(nodes: &mut [Node], idx: usize, g: &[f64]) {
        fn add_into(nodes: &mut [Node], target: Var, contrib: &[f64]) {
            if let Some(gt) = nodes[target.0].grad.as_mut() {
                for (a, b) in gt.iter_mut().zip(contrib) {
                    *a += *b;
                }
            }
        }

        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, dims } => {
                let (input, kernel, bias, dims) = (*input, *kernel, *bias, *dims);
                let need_gin = nodes[input.0].grad.is_some();
                let need_gker = nodes[kernel.0].grad.is_some();
                let inp = nodes[input.0].value.clone();
                let ker = nodes[kernel.0].value.clone();
                let (gin, gker, gbias) = conv::backward(&dims, &inp, &ker, g, need_gin, need_gker);
                if let Some(gin) = gin {
                    add_into(nodes, input, &gin);
                }
                if let Some(gker) = gker {
                    add_into(nodes, kernel, &gker);
                }
                add_into(nodes, bias, &gbias);
            }
            Op::LeakyRelu { input, slope } => {
                let (input, slope) = (*input, *slope);
                let x = nodes[input.0].value.clone();
                let contrib: Vec<f64> = x
                    .iter()
                    .zip(g)
                    .map(|(&xi, &gi)| if xi > 0.0 { gi } else { slope * gi })
                    .collect();
                add_into(nodes, input, &contrib);
            }
            Op::Upsample2x { input } => {
                let input = *input;
                let (c, h, w) = match nodes[input.0].shape {
                    Shape::Chw(c, h, w) => (c, h, w),
                    _ => unreachable!("validated at forward"),
                };
                let (oh, ow) = (2 * h, 2 * w);
                let mut contrib = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let base = ch * oh * ow;
                            contrib[(ch * h + y) * w + x] = g[base + (2 * y) * ow + 2 * x]
                                + g[base + (2 * y) * ow + 2 * x + 1]
                                + g[base + (2 * y + 1) * ow + 2 * x]
                                + g[base + (2 * y + 1) * ow + 2 * x + 1];
                        }
                    }
                }
                add_into(nodes, input, &contrib);
            }
            Op::AvgPool2x { input } => {
                let input = *input;
                let (c, h, w) = match nodes[input.0].shape {
                    Shape::Chw(c, h, w) => (c, h, w),
                    _ => unreachable!("validated at forward"),
                };
                let (oh, ow) = (h / 2, w / 2);
                let mut contrib = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for x in 0..ow {
                            let q = 0.25 * g[(ch * oh + y) * ow + x];
                            let base = (ch * h + 2 * y) * w + 2 * x;
                            contrib[base] = q;
                            contrib[base + 1] = q;
                            contrib[base + w] = q;
                            contrib[base + w + 1] = q;
                        }
                    }
                }
                add_into(nodes, input, &contrib);
            }
            Op::ConcatChannels { a, b } => {
                let (a, b) = (*a, *b);
                let na = nodes[a.0].shape.len();
                add_into(nodes, a, &g[..na]);
                add_into(nodes, b, &g[na..]);
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                add_into(nodes, a, g);
                add_into(nodes, b, g);
            }
            Op::Scale { input, factor } => {
                let (input, factor) = (*input, *factor);
                let contrib: Vec<f64> = g.iter().map(|&gi| factor * gi).collect();
                add_into(nodes, input, &contrib);
            }
            Op::Sum { input } => {
                let input = *input;
                let contrib = vec![g[0]; nodes[input.0].shape.len()];
                add_into(nodes, input, &contrib);
            }
            Op::HuberLoss { input, delta } => {
                let (input, delta) = (*input, *delta);
                let x = nodes[input.0].value.clone();
                let n = x.len() as f64;
                let contrib: Vec<f64> = x
                    .iter()
                    .map(|&xi| {
                        let d = if xi.abs() <= delta { xi } else { delta * xi.signum() };
                        g[0] * d / n
                    })
                    .collect();
                add_into(nodes, input, &contrib);
            }
            Op::Residual { input, map } => {
                let input = *input;
                let map = map.clone();
                let mapped = map.apply(g);
                let contrib: Vec<f64> = mapped.iter().map(|&v| -v).collect();
                add_into(nodes, input, &contrib);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let tape = Tape::new();
        let x = tape.leaf(Shape::Chw(1, 3, 4), rand_vec(12, 1), true).unwrap();
        let k = tape.leaf(Shape::Kernel(1, 1, 1, 1), vec![1.0], true).unwrap();
        let b = tape.leaf(Shape::Chw(1, 1, 1), vec![0.0], true).unwrap();
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(*tape.value(y), *tape.value(x));
    }

    #[test]
    fn conv_zero_kernel_broadcasts_bias() {
        let tape = Tape::new();
        let x = tape.leaf(Shape::Chw(2, 4, 4), rand_vec(32, 2), false).unwrap();
        let k = tape.leaf(Shape::Kernel(3, 2, 3, 3), vec![0.0; 54], false).unwrap();
        let b = tape.leaf(Shape::Chw(3, 1, 1), vec![0.25, -1.0, 2.0], false).unwrap();
        let y = tape.conv2d(x, k, b, 1, 1).unwrap();
        let vals = tape.value(y);
        for (c, expect) in [0.25, -1.0, 2.0].iter().enumerate() {
            assert!(vals[c * 16..(c + 1) * 16].iter().all(|v| v == expect));
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let tape = Tape::new();
        let x = tape.leaf(Shape::Chw(2, 4, 4), vec![0.0; 32], false).unwrap();
        let k = tape.leaf(Shape::Kernel(1, 3, 3, 3), vec![0.0; 27], false).unwrap();
        let b = tape.leaf(Shape::Chw(1, 1, 1), vec![0.0], false).unwrap();
        assert!(tape.conv2d(x, k, b, 1, 1).is_err());
    }

    #[test]
    fn conv_rejects_even_kernel() {
        let tape = Tape::new();
        let x = tape.leaf(Shape::Chw(1, 4, 4), vec![0.0; 16], false).unwrap();
        let k = tape.leaf(Shape::Kernel(1, 1, 2, 2), vec![0.0; 4], false).unwrap();
        let b = tape.leaf(Shape::Chw(1, 1, 1), vec![0.0], false).unwrap();
        assert!(tape.conv2d(x, k, b, 1, 1).is_err());
    }

    /// Finite differences for conv2d w.r.t. input, kernel, and bias, on a
    /// random 2-channel 5x5 input including a strided case.
    #[test]
    fn conv_gradients_match_finite_differences() {
        for (stride, pad, seed) in [(1usize, 1usize, 10u64), (2, 1, 11)] {
            let x0 = rand_vec(2 * 5 * 5, seed);
            let k0 = rand_vec(3 * 2 * 3 * 3, seed + 1);
            let b0 = rand_vec(3, seed + 2);

            let build = |xv: &[f64], kv: &[f64], bv: &[f64]| -> (Tape, Var, Var, Var, Var) {
                let tape = Tape::new();
                let x = tape.leaf(Shape::Chw(2, 5, 5), xv.to_vec(), true).unwrap();
                let k = tape.leaf(Shape::Kernel(3, 2, 3, 3), kv.to_vec(), true).unwrap();
                let b = tape.leaf(Shape::Chw(3, 1, 1), bv.to_vec(), true).unwrap();
                let y = tape.conv2d(x, k, b, stride, pad).unwrap();
                // huber of the output: nonlinear, so kernel grads depend on input
                let loss = tape.huber_loss(y, 0.7).unwrap();
                (tape, x, k, b, loss)
            };

            let (tape, x, k, b, loss) = build(&x0, &k0, &b0);
            tape.backward(loss).unwrap();
            let (gx, gk, gb) = (
                tape.grad(x).unwrap(),
                tape.grad(k).unwrap(),
                tape.grad(b).unwrap(),
            );

            let rx = check_gradient(
                |v| {
                    let (t, _, _, _, l) = build(v, &k0, &b0);
                    t.value_scalar(l)
                },
                &x0,
                &gx,
                &spread_coords(x0.len(), 25),
                1e-6,
                1e-6,
            );
            assert!(rx.passes(1e-5), "input grad: {rx:?}");
            let rk = check_gradient(
                |v| {
                    let (t, _, _, _, l) = build(&x0, v, &b0);
                    t.value_scalar(l)
                },
                &k0,
                &gk,
                &spread_coords(k0.len(), 25),
                1e-6,
                1e-6,
            );
            assert!(rk.passes(1e-5), "kernel grad: {rk:?}");
            let rb = check_gradient(
                |v| {
                    let (t, _, _, _, l) = build(&x0, &k0, v);
                    t.value_scalar(l)
                },
                &b0,
                &gb,
                &spread_coords(b0.len(), 3),
                1e-6,
                1e-6,
            );
            assert!(rb.passes(1e-5), "bias grad: {rb:?}");
        }
    }

    #[test]
    fn leaky_relu_values() {
        let tape = Tape::new();
        let x = tape.leaf(Shape::Chw(1, 1, 3), vec![2.0, -1.0, 0.0], false).unwrap();
        let y = tape.leaky_relu(x, 0.1).unwrap();
        assert_eq!(*tape.value(y), vec![2.0, -0.1, 0.0]);
    }

    #[test]
    fn leaky_relu_gradient_matches_finite_differences_away_from_kink() {
        let x0: Vec<f64> = rand_vec(40, 20).iter().map(|v| v + 0.3 * v.signum()).collect();
        let build = |xv: &[f64]| {
            let tape = Tape::new();
            let x = tape.leaf(Shape::Chw(1, 5, 8), xv.to_vec(), true).unwrap();
            let y = tape.leaky_relu(x, 0.1).unwrap();
            let loss = tape.huber_loss(y, 0.5).unwrap();
            (tape, x, loss)
        };
        let (tape, x, loss) = build(&x0);
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        let r = check_gradient(
            |v| {
                let (t, _, l) = build(v);
                t.value_scalar(l)
            },
            &x0,
            &g,
            &spread_coords(x0.len(), 40),
            1e-4,
            1e-6,
        );
        assert!(r.passes(1e-6), "{r:?}");
    }

    #[test]
    fn upsample_of_single_value_is_constant_block() {
        let tape = Tape::new();
        let x = tape.leaf(Shape::Chw(1, 1, 1), vec![0.7], false).unwrap();
        let y = tape.upsample2x(x).unwrap();
        assert_eq!(tape.shape(y), Shape::Chw(1, 2, 2));
        assert_eq!(*tape.value(y), vec![0.7; 4]);
    }

    #[test]
    fn upsample_then_avg_pool_is_identity() {
        let tape = Tape::new();
        let x0 = rand_vec(2 * 3 * 4, 30);
        let x = tape.leaf(Shape::Chw(2, 3, 4), x0.clone(), false).unwrap();
        let y = tape.avg_pool2x(tape.upsample2x(x).unwrap()).unwrap();
        for (a, b) in tape.value(y).iter().zip(&x0) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn upsample_gradient_matches_finite_differences() {
        let x0 = rand_vec(2 * 3 * 3, 31);
        let build = |xv: &[f64]| {
            let tape = Tape::new();
            let x = tape.leaf(Shape::Chw(2, 3, 3), xv.to_vec(), true).unwrap();
            let y = tape.upsample2x(x).unwrap();
            let loss = tape.huber_loss(y, 0.4).unwrap();
            (tape, x, loss)
        };
        let (tape, x, loss) = build(&x0);
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        let r = check_gradient(
            |v| {
                let (t, _, l) = build(v);
                t.value_scalar(l)
            },
            &x0,
            &g,
            &spread_coords(x0.len(), 18),
            1e-4,
            1e-6,
        );
        assert!(r.passes(1e-6), "{r:?}");
    }

    #[test]
    fn concat_stacks_channels() {
        let tape = Tape::new();
        let a = tape.leaf(Shape::Chw(1, 4, 4), vec![1.0; 16], false).unwrap();
        let b = tape.leaf(Shape::Chw(2, 4, 4), vec![2.0; 32], false).unwrap();
        let y = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.shape(y), Shape::Chw(3, 4, 4));
        let v = tape.value(y);
        assert!(v[..16].iter().all(|&x| x == 1.0));
        assert!(v[16..].iter().all(|&x| x == 2.0));
    }

    #[test]
    fn concat_with_empty_channel_tensor_is_identity() {
        let tape = Tape::new();
        let a = tape.leaf(Shape::Chw(0, 4, 4), vec![], false).unwrap();
        let b0 = rand_vec(2 * 4 * 4, 33);
        let b = tape.leaf(Shape::Chw(2, 4, 4), b0.clone(), false).unwrap();
        let y = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.shape(y), Shape::Chw(2, 4, 4));
        assert_eq!(*tape.value(y), b0);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let tape = Tape::new();
        let a = tape.leaf(Shape::Chw(1, 4, 4), vec![0.0; 16], false).unwrap();
        let b = tape.leaf(Shape::Chw(1, 2, 2), vec![0.0; 4], false).unwrap();
        assert!(tape.concat_channels(a, b).is_err());
    }

    #[test]
    fn concat_routes_gradients_elementwise() {
        let a0 = rand_vec(1 * 3 * 3, 34);
        let b0 = rand_vec(2 * 3 * 3, 35);
        let build = |av: &[f64], bv: &[f64]| {
            let tape = Tape::new();
            let a = tape.leaf(Shape::Chw(1, 3, 3), av.to_vec(), true).unwrap();
            let b = tape.leaf(Shape::Chw(2, 3, 3), bv.to_vec(), true).unwrap();
            let y = tape.concat_channels(a, b).unwrap();
            let loss = tape.huber_loss(y, 0.6).unwrap();
            (tape, a, b, loss)
        };
        let (tape, a, b, loss) = build(&a0, &b0);
        tape.backward(loss).unwrap();
        let (ga, gb) = (tape.grad(a).unwrap(), tape.grad(b).unwrap());
        let ra = check_gradient(
            |v| {
                let (t, _, _, l) = build(v, &b0);
                t.value_scalar(l)
            },
            &a0,
            &ga,
            &spread_coords(a0.len(), 9),
            1e-4,
            1e-6,
        );
        let rb = check_gradient(
            |v| {
                let (t, _, _, l) = build(&a0, v);
                t.value_scalar(l)
            },
            &b0,
            &gb,
            &spread_coords(b0.len(), 18),
            1e-4,
            1e-6,
        );
        assert!(ra.passes(1e-6) && rb.passes(1e-6), "{ra:?} {rb:?}");
    }

    #[test]
    fn huber_branch_values() {
        let tape = Tape::new();
        let quad = tape.leaf(Shape::Chw(1, 1, 1), vec![0.5], false).unwrap();
        assert_eq!(tape.value_scalar(tape.huber_loss(quad, 1.0).unwrap()), 0.125);
        let lin = tape.leaf(Shape::Chw(1, 1, 1), vec![2.0], false).unwrap();
        assert_eq!(tape.value_scalar(tape.huber_loss(lin, 1.0).unwrap()), 1.5);
    }

    #[test]
    fn huber_rejects_nonpositive_delta() {
        let tape = Tape::new();
        let x = tape.leaf(Shape::Chw(1, 1, 1), vec![0.5], false).unwrap();
        assert!(tape.huber_loss(x, 0.0).is_err());
        assert!(tape.huber_loss(x, -1.0).is_err());
    }

    #[test]
    fn huber_gradient_matches_finite_differences_and_is_bounded() {
        // Residuals kept away from |x| = delta, where the kink breaks FD.
        let delta = 0.5;
        let x0: Vec<f64> = rand_vec(50, 40)
            .iter()
            .map(|v| {
                let v = 2.0 * v;
                if (v.abs() - delta).abs() < 0.05 {
                    v + 0.2 * v.signum()
                } else {
                    v
                }
            })
            .collect();
        let build = |xv: &[f64]| {
            let tape = Tape::new();
            let x = tape.leaf(Shape::Chw(1, 5, 10), xv.to_vec(), true).unwrap();
            let loss = tape.huber_loss(x, delta).unwrap();
            (tape, x, loss)
        };
        let (tape, x, loss) = build(&x0);
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        // The loss is piecewise quadratic, so central differences are exact
        // up to rounding; a moderate h keeps cancellation noise down.
        let r = check_gradient(
            |v| {
                let (t, _, l) = build(v);
                t.value_scalar(l)
            },
            &x0,
            &g,
            &spread_coords(x0.len(), 50),
            1e-4,
            1e-6,
        );
        assert!(r.passes(1e-6), "{r:?}");
        let bound = delta / x0.len() as f64;
        assert!(g.iter().all(|gi| gi.abs() <= bound + 1e-18), "gradient exceeds delta/N");
    }

    #[test]
    fn backward_of_sum_is_ones_and_unrelated_leaves_get_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Shape::Chw(1, 2, 3), rand_vec(6, 50), true).unwrap();
        let unrelated = tape.leaf(Shape::Chw(1, 2, 2), rand_vec(4, 51), true).unwrap();
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), vec![1.0; 6]);
        assert_eq!(tape.grad(unrelated).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::new();
        let x = tape.leaf(Shape::Chw(1, 2, 2), vec![0.0; 4], true).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn backward_twice_yields_identical_grads() {
        let tape = Tape::new();
        let x = tape.leaf(Shape::Chw(1, 4, 4), rand_vec(16, 60), true).unwrap();
        let y = tape.leaky_relu(x, 0.1).unwrap();
        let s = tape.scale(y, 1.7).unwrap();
        let loss = tape.huber_loss(s, 0.8).unwrap();
        tape.backward(loss).unwrap();
        let g1 = tape.grad(x).unwrap();
        tape.backward(loss).unwrap();
        let g2 = tape.grad(x).unwrap();
        let bits = |g: &[f64]| g.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&g1), bits(&g2));
    }

    /// The residual op against a tiny explicit symmetric matrix.
    struct DenseSym {
        n: usize,
        m: Vec<f64>,
    }

    impl SelfAdjointMap for DenseSym {
        fn apply(&self, x: &[f64]) -> Vec<f64> {
            (0..self.n)
                .map(|i| (0..self.n).map(|j| self.m[i * self.n + j] * x[j]).sum())
                .collect()
        }
    }

    #[test]
    fn residual_forward_and_backward_use_the_same_map() {
        let n = 4;
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v = ((i * 3 + j * 7) as f64).sin();
                m[i * n + j] = v;
                m[j * n + i] = v;
            }
        }
        let map = Rc::new(DenseSym { n, m });
        let offset = rand_vec(n, 70);
        let x0 = rand_vec(n, 71);

        let build = |xv: &[f64]| {
            let tape = Tape::new();
            let x = tape.leaf(Shape::Chw(1, 1, n), xv.to_vec(), true).unwrap();
            let r = tape.residual(x, &offset, map.clone()).unwrap();
            let loss = tape.huber_loss(r, 0.9).unwrap();
            (tape, x, r, loss)
        };
        let (tape, x, r, loss) = build(&x0);
        let expect: Vec<f64> =
            offset.iter().zip(map.apply(&x0)).map(|(b, q)| b - q).collect();
        assert_eq!(*tape.value(r), expect);

        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        let rep = check_gradient(
            |v| {
                let (t, _, _, l) = build(v);
                t.value_scalar(l)
            },
            &x0,
            &g,
            &spread_coords(n, n),
            1e-5,
            1e-6,
        );
        assert!(rep.passes(1e-6), "{rep:?}");
    }

    #[test]
    fn strided_conv_halves_even_dims_with_same_padding() {
        let tape = Tape::new();
        let x = tape.leaf(Shape::Chw(1, 8, 8), rand_vec(64, 80), false).unwrap();
        let k = tape.leaf(Shape::Kernel(1, 1, 3, 3), rand_vec(9, 81), false).unwrap();
        let b = tape.leaf(Shape::Chw(1, 1, 1), vec![0.0], false).unwrap();
        let y = tape.conv2d(x, k, b, 2, 1).unwrap();
        assert_eq!(tape.shape(y), Shape::Chw(1, 4, 4));
    }
}
