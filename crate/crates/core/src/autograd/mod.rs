//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every backward rule is written in terms of [`Var`] operations, so the
//! gradients returned by [`Var::backward_with_graph`] are themselves
//! differentiable. That is what the gradient penalty of the segmentation
//! critic needs: a loss on an input gradient, differentiated again with
//! respect to the critic weights.

pub mod kernels;

use ndarray::{ArrayD, Axis, IxDyn};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

pub type Tensor = ArrayD<f64>;

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

#[derive(Clone)]
pub struct Var(Rc<Node>);

struct Node {
    id: usize,
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Tanh(Var),
    Sigmoid(Var),
    Sqrt(Var),
    /// y = x ⊙ mask with a constant mask (relu, leaky relu, abs, clamps).
    MaskMul(Var, Rc<Tensor>),
    SumTo(Var),
    BroadcastTo(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    MatMul(Var, Var),
    Conv(Var, Var, usize),
    ConvInputGrad(Var, Var, usize),
    ConvWeightGrad(Var, Var, usize),
    SumPool(Var, usize),
    Upsample(Var, usize),
    Subsample(Var, usize),
    ZeroUpsample(Var, usize),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Pad(Var, usize, usize),
    /// Forward value is supplied externally; backward passes `scale · grad`.
    StraightThrough(Var, f64),
}

impl Op {
    fn parents(&self) -> Vec<&Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![a, b],
            Conv(a, b, _) | ConvInputGrad(a, b, _) | ConvWeightGrad(a, b, _) => vec![a, b],
            Neg(a) | Scale(a, _) | AddScalar(a) | Exp(a) | Ln(a) | Tanh(a) | Sigmoid(a)
            | Sqrt(a) | MaskMul(a, _) | SumTo(a) | BroadcastTo(a) | Reshape(a)
            | Permute(a, _) | SumPool(a, _) | Upsample(a, _) | Subsample(a, _)
            | ZeroUpsample(a, _) | Slice(a, _, _) | Pad(a, _, _) | StraightThrough(a, _) => {
                vec![a]
            }
            Concat(xs, _) => xs.iter().collect(),
        }
    }
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

/// Gradients of a scalar with respect to every graph node that required them.
pub struct Gradients {
    map: HashMap<usize, Var>,
}

impl Gradients {
    pub fn get(&self, v: &Var) -> Option<&Var> {
        self.map.get(&v.0.id)
    }

    /// Gradient value for `v`; zeros if `v` did not influence the output.
    pub fn wrt(&self, v: &Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.value().clone(),
            None => Tensor::zeros(IxDyn(v.shape())),
        }
    }
}

/// Reduce `t` by summation down to `shape` (the inverse of broadcasting).
fn sum_to_value(t: &Tensor, shape: &[usize]) -> Tensor {
    let mut out = t.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (ax, &d) in shape.iter().enumerate() {
        if d == 1 && out.shape()[ax] != 1 {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    assert_eq!(out.shape(), shape, "sum_to: cannot reduce {:?} to {:?}", t.shape(), shape);
    out
}

impl Var {
    fn from_op(value: Tensor, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|p| p.0.requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value: Rc::new(value),
            op,
            requires_grad,
        }))
    }

    /// A constant: never receives gradients.
    pub fn constant(value: Tensor) -> Var {
        Self::leaf(value, false)
    }

    /// A trainable leaf.
    pub fn param(value: Tensor) -> Var {
        Self::leaf(value, true)
    }

    pub fn leaf(value: Tensor, requires_grad: bool) -> Var {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
        }))
    }

    pub fn scalar(v: f64) -> Var {
        Self::constant(ndarray::arr0(v).into_dyn())
    }

    pub fn full(shape: &[usize], v: f64) -> Var {
        Self::constant(Tensor::from_elem(IxDyn(shape), v))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.0.value.len(), 1, "item() on tensor of shape {:?}", self.shape());
        *self.0.value.iter().next().unwrap()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value: self.0.value.clone(),
            op: Op::Leaf,
            requires_grad: false,
        }))
    }

    // ---- elementwise ----

    pub fn add(&self, o: &Var) -> Var {
        let v = &*self.0.value + &*o.0.value;
        Self::from_op(v, Op::Add(self.clone(), o.clone()))
    }

    pub fn sub(&self, o: &Var) -> Var {
        let v = &*self.0.value - &*o.0.value;
        Self::from_op(v, Op::Sub(self.clone(), o.clone()))
    }

    pub fn mul(&self, o: &Var) -> Var {
        let v = &*self.0.value * &*o.0.value;
        Self::from_op(v, Op::Mul(self.clone(), o.clone()))
    }

    pub fn div(&self, o: &Var) -> Var {
        let v = &*self.0.value / &*o.0.value;
        Self::from_op(v, Op::Div(self.clone(), o.clone()))
    }

    pub fn neg(&self) -> Var {
        Self::from_op(-&*self.0.value, Op::Neg(self.clone()))
    }

    pub fn scale(&self, c: f64) -> Var {
        Self::from_op(&*self.0.value * c, Op::Scale(self.clone(), c))
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        Self::from_op(&*self.0.value + c, Op::AddScalar(self.clone()))
    }

    pub fn exp(&self) -> Var {
        Self::from_op(self.0.value.mapv(f64::exp), Op::Exp(self.clone()))
    }

    pub fn ln(&self) -> Var {
        Self::from_op(self.0.value.mapv(f64::ln), Op::Ln(self.clone()))
    }

    pub fn tanh(&self) -> Var {
        Self::from_op(self.0.value.mapv(f64::tanh), Op::Tanh(self.clone()))
    }

    pub fn sigmoid(&self) -> Var {
        let v = self.0.value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        Self::from_op(v, Op::Sigmoid(self.clone()))
    }

    pub fn sqrt(&self) -> Var {
        Self::from_op(self.0.value.mapv(f64::sqrt), Op::Sqrt(self.clone()))
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    /// Multiply by a constant tensor of the same shape.
    pub fn mask_mul(&self, mask: Tensor) -> Var {
        assert_eq!(mask.shape(), self.shape(), "mask_mul shape mismatch");
        let v = &*self.0.value * &mask;
        Self::from_op(v, Op::MaskMul(self.clone(), Rc::new(mask)))
    }

    pub fn relu(&self) -> Var {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let mask = self.0.value.mapv(|x| if x > 0.0 { 1.0 } else { slope });
        self.mask_mul(mask)
    }

    /// |x|, with subgradient 0 at 0.
    pub fn abs(&self) -> Var {
        let mask = self.0.value.mapv(|x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        self.mask_mul(mask)
    }

    /// min(x, 0).
    pub fn min_zero(&self) -> Var {
        let mask = self.0.value.mapv(|x| if x < 0.0 { 1.0 } else { 0.0 });
        self.mask_mul(mask)
    }

    /// Elementwise max(x, floor) where the floor branch carries no gradient.
    pub fn clamp_min(&self, floor: f64) -> Var {
        let mask = self.0.value.mapv(|x| if x >= floor { 1.0 } else { 0.0 });
        let fill = self.0.value.mapv(|x| if x >= floor { 0.0 } else { floor });
        self.mask_mul(mask).add(&Var::constant(fill))
    }

    // ---- reductions / shape ----

    /// Sum down to `shape`, which must be broadcast-compatible with ours.
    pub fn sum_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        Self::from_op(sum_to_value(&self.0.value, shape), Op::SumTo(self.clone()))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        let v = self
            .0
            .value
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", self.shape(), shape))
            .to_owned();
        Self::from_op(v, Op::BroadcastTo(self.clone()))
    }

    pub fn sum(&self) -> Var {
        let ones = vec![1; self.shape().len()];
        self.sum_to(&ones).reshape(&[])
    }

    pub fn mean(&self) -> Var {
        let n = self.0.value.len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axes`, keeping them as size-1 dims.
    pub fn sum_axes_keep(&self, axes: &[usize]) -> Var {
        let mut shape = self.shape().to_vec();
        for &a in axes {
            shape[a] = 1;
        }
        self.sum_to(&shape)
    }

    pub fn mean_axes_keep(&self, axes: &[usize]) -> Var {
        let n: usize = axes.iter().map(|&a| self.shape()[a]).product();
        self.sum_axes_keep(axes).scale(1.0 / n.max(1) as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        let v = self
            .0
            .value
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|_| panic!("cannot reshape {:?} to {:?}", self.shape(), shape));
        Self::from_op(v, Op::Reshape(self.clone()))
    }

    pub fn permute(&self, axes: &[usize]) -> Var {
        let v = self
            .0
            .value
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        Self::from_op(v, Op::Permute(self.clone(), axes.to_vec()))
    }

    /// 2-D transpose.
    pub fn t(&self) -> Var {
        assert_eq!(self.shape().len(), 2, "t() expects a matrix");
        self.permute(&[1, 0])
    }

    pub fn matmul(&self, o: &Var) -> Var {
        let a = self.0.value.view().into_dimensionality::<ndarray::Ix2>().expect("matmul lhs must be 2-D");
        let b = o.0.value.view().into_dimensionality::<ndarray::Ix2>().expect("matmul rhs must be 2-D");
        let v = a.dot(&b).into_dyn();
        Self::from_op(v, Op::MatMul(self.clone(), o.clone()))
    }

    // ---- spatial ----

    pub fn conv2d(&self, w: &Var, pad: usize) -> Var {
        let v = kernels::conv2d(&self.0.value, &w.0.value, pad);
        Self::from_op(v, Op::Conv(self.clone(), w.clone(), pad))
    }

    /// Input gradient of a conv whose input had spatial size `in_hw`.
    pub fn conv2d_input_grad(&self, w: &Var, pad: usize, in_hw: (usize, usize)) -> Var {
        let v = kernels::conv2d_input_grad(&self.0.value, &w.0.value, pad, in_hw);
        Self::from_op(v, Op::ConvInputGrad(self.clone(), w.clone(), pad))
    }

    /// `self` is the conv input x, `gy` the output gradient.
    pub fn conv2d_weight_grad(&self, gy: &Var, pad: usize, k: usize) -> Var {
        let v = kernels::conv2d_weight_grad(&self.0.value, &gy.0.value, pad, k);
        Self::from_op(v, Op::ConvWeightGrad(self.clone(), gy.clone(), pad))
    }

    pub fn sum_pool(&self, f: usize) -> Var {
        Self::from_op(kernels::sum_pool(&self.0.value, f), Op::SumPool(self.clone(), f))
    }

    pub fn avg_pool(&self, f: usize) -> Var {
        self.sum_pool(f).scale(1.0 / (f * f) as f64)
    }

    pub fn upsample(&self, f: usize) -> Var {
        if f == 1 {
            return self.clone();
        }
        Self::from_op(kernels::upsample_nearest(&self.0.value, f), Op::Upsample(self.clone(), f))
    }

    pub fn subsample(&self, f: usize) -> Var {
        if f == 1 {
            return self.clone();
        }
        Self::from_op(kernels::subsample(&self.0.value, f), Op::Subsample(self.clone(), f))
    }

    pub fn zero_upsample(&self, f: usize) -> Var {
        if f == 1 {
            return self.clone();
        }
        Self::from_op(kernels::zero_upsample(&self.0.value, f), Op::ZeroUpsample(self.clone(), f))
    }

    pub fn concat(xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let views: Vec<_> = xs.iter().map(|x| x.0.value.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        Self::from_op(v, Op::Concat(xs.to_vec(), axis))
    }

    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Var {
        let v = self
            .0
            .value
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        Self::from_op(v, Op::Slice(self.clone(), axis, start))
    }

    /// Zero-pad along `axis` so that `self` sits at `start` inside `total`.
    pub fn pad_axis(&self, axis: usize, start: usize, total: usize) -> Var {
        let mut shape = self.shape().to_vec();
        let len = shape[axis];
        assert!(start + len <= total, "pad_axis out of range");
        shape[axis] = total;
        let mut v = Tensor::zeros(IxDyn(&shape));
        v.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len))
            .assign(&*self.0.value);
        Self::from_op(v, Op::Pad(self.clone(), axis, start))
    }

    /// Node whose forward value is `forward` and whose gradient flows to
    /// `self` multiplied by `grad_scale`.
    pub fn straight_through(&self, forward: Tensor, grad_scale: f64) -> Var {
        assert_eq!(forward.shape(), self.shape(), "straight_through shape mismatch");
        Self::from_op(forward, Op::StraightThrough(self.clone(), grad_scale))
    }

    // ---- composites ----

    /// Softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Var {
        self.log_softmax(axis).exp()
    }

    pub fn log_softmax(&self, axis: usize) -> Var {
        let m = self
            .0
            .value
            .map_axis(Axis(axis), |r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .insert_axis(Axis(axis));
        let shifted = self.sub(&Var::constant(m));
        let lse = shifted.exp().sum_axes_keep(&[axis]).ln();
        shifted.sub(&lse)
    }

    // ---- backprop ----

    /// Gradients of this scalar; the returned gradients are constants.
    pub fn backward(&self) -> Gradients {
        self.backprop(false)
    }

    /// Gradients of this scalar that are themselves differentiable.
    pub fn backward_with_graph(&self) -> Gradients {
        self.backprop(true)
    }

    fn backprop(&self, create_graph: bool) -> Gradients {
        assert_eq!(self.0.value.len(), 1, "backward() needs a scalar, got {:?}", self.shape());
        let mut map: HashMap<usize, Var> = HashMap::new();
        if !self.0.requires_grad {
            return Gradients { map };
        }
        let order = self.topo_order();
        map.insert(self.0.id, Var::constant(Tensor::ones(IxDyn(self.shape()))));
        for node in order.iter().rev() {
            let Some(g) = map.get(&node.0.id).cloned() else { continue };
            if matches!(node.0.op, Op::Leaf) {
                continue;
            }
            let g = if create_graph { g } else { g.detach() };
            for (parent, pg) in node.grad_rule(&g, create_graph) {
                if !parent.0.requires_grad {
                    continue;
                }
                let entry = map.remove(&parent.0.id);
                let acc = match entry {
                    Some(prev) => prev.add(&pg),
                    None => pg,
                };
                let acc = if create_graph { acc } else { acc.detach() };
                map.insert(parent.0.id, acc);
            }
        }
        Gradients { map }
    }

    fn topo_order(&self) -> Vec<Var> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        // iterative post-order DFS
        let mut stack: Vec<(Var, bool)> = vec![(self.clone(), false)];
        while let Some((v, expanded)) = stack.pop() {
            if expanded {
                order.push(v);
                continue;
            }
            if !seen.insert(v.0.id) {
                continue;
            }
            stack.push((v.clone(), true));
            for p in v.0.op.parents() {
                if p.0.requires_grad && !seen.contains(&p.0.id) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }

    fn grad_rule(&self, g: &Var, create_graph: bool) -> Vec<(Var, Var)> {
        let p = |v: &Var| if create_graph { v.clone() } else { v.detach() };
        let out = || p(self);
        use Op::*;
        match &self.0.op {
            Leaf => vec![],
            Add(a, b) => vec![(a.clone(), g.sum_to(a.shape())), (b.clone(), g.sum_to(b.shape()))],
            Sub(a, b) => vec![
                (a.clone(), g.sum_to(a.shape())),
                (b.clone(), g.neg().sum_to(b.shape())),
            ],
            Mul(a, b) => vec![
                (a.clone(), g.mul(&p(b)).sum_to(a.shape())),
                (b.clone(), g.mul(&p(a)).sum_to(b.shape())),
            ],
            Div(a, b) => {
                let (pa, pb) = (p(a), p(b));
                let ga = g.div(&pb).sum_to(a.shape());
                let gb = g.mul(&pa).div(&pb.square()).neg().sum_to(b.shape());
                vec![(a.clone(), ga), (b.clone(), gb)]
            }
            Neg(a) => vec![(a.clone(), g.neg())],
            Scale(a, c) => vec![(a.clone(), g.scale(*c))],
            AddScalar(a) => vec![(a.clone(), g.clone())],
            Exp(a) => vec![(a.clone(), g.mul(&out()))],
            Ln(a) => vec![(a.clone(), g.div(&p(a)))],
            Tanh(a) => {
                let y = out();
                vec![(a.clone(), g.mul(&y.square().neg().add_scalar(1.0)))]
            }
            Sigmoid(a) => {
                let y = out();
                vec![(a.clone(), g.mul(&y.mul(&y.neg().add_scalar(1.0))))]
            }
            Sqrt(a) => vec![(a.clone(), g.div(&out()).scale(0.5))],
            MaskMul(a, m) => vec![(a.clone(), g.mask_mul((**m).clone()))],
            SumTo(a) => vec![(a.clone(), g.broadcast_to(a.shape()))],
            BroadcastTo(a) => vec![(a.clone(), g.sum_to(a.shape()))],
            Reshape(a) => vec![(a.clone(), g.reshape(a.shape()))],
            Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                vec![(a.clone(), g.permute(&inv))]
            }
            MatMul(a, b) => vec![
                (a.clone(), g.matmul(&p(b).t())),
                (b.clone(), p(a).t().matmul(g)),
            ],
            Conv(x, w, pad) => {
                let hw = (x.shape()[2], x.shape()[3]);
                let k = w.shape()[2];
                vec![
                    (x.clone(), g.conv2d_input_grad(&p(w), *pad, hw)),
                    (w.clone(), p(x).conv2d_weight_grad(g, *pad, k)),
                ]
            }
            ConvInputGrad(gy, w, pad) => {
                // out = conv^T(gy; w): adjoint pairs give both rules
                let k = w.shape()[2];
                vec![
                    (gy.clone(), g.conv2d(&p(w), *pad)),
                    (w.clone(), g.conv2d_weight_grad(&p(gy), *pad, k)),
                ]
            }
            ConvWeightGrad(x, gy, pad) => {
                let hw = (x.shape()[2], x.shape()[3]);
                vec![
                    (x.clone(), p(gy).conv2d_input_grad(g, *pad, hw)),
                    (gy.clone(), p(x).conv2d(g, *pad)),
                ]
            }
            SumPool(a, f) => vec![(a.clone(), g.upsample(*f))],
            Upsample(a, f) => vec![(a.clone(), g.sum_pool(*f))],
            Subsample(a, f) => vec![(a.clone(), g.zero_upsample(*f))],
            ZeroUpsample(a, f) => vec![(a.clone(), g.subsample(*f))],
            Concat(xs, axis) => {
                let mut start = 0;
                xs.iter()
                    .map(|x| {
                        let len = x.shape()[*axis];
                        let r = (x.clone(), g.slice_axis(*axis, start, len));
                        start += len;
                        r
                    })
                    .collect()
            }
            Slice(a, axis, start) => vec![(a.clone(), g.pad_axis(*axis, *start, a.shape()[*axis]))],
            Pad(a, axis, start) => vec![(a.clone(), g.slice_axis(*axis, *start, a.shape()[*axis]))],
            StraightThrough(a, scale) => {
                if *scale == 1.0 {
                    vec![(a.clone(), g.clone())]
                } else {
                    vec![(a.clone(), g.scale(*scale))]
                }
            }
        }
    }
}

/// Central finite-difference gradient of `f` at `x`.
pub fn numeric_grad<F>(x: &Tensor, h: f64, mut f: F) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    let mut g = Tensor::zeros(x.raw_dim());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.as_slice_mut().unwrap()[i];
        probe.as_slice_mut().unwrap()[i] = orig + h;
        let up = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig - h;
        let down = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig;
        g.as_slice_mut().unwrap()[i] = (up - down) / (2.0 * h);
    }
    g
}

/// max |a-b| / max(|a|, |b|, floor) over all entries.
pub fn max_rel_err(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
