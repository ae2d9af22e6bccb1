//! Elementwise, reduction, shape, and matmul ops with their adjoints.

use std::ops::{Add, Div, Mul, Neg, Sub};

use ndarray::{ArrayD, Axis, Ix2, IxDyn, Zip};

use super::{nn, Graph, Node, NodeId, Op, Scalar, Tensor};

/// NumPy-style broadcast shape of two shapes.
fn bcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast: {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

fn broadcast_binary<F: Scalar>(
    a: &ArrayD<F>,
    b: &ArrayD<F>,
    f: impl Fn(F, F) -> F,
) -> ArrayD<F> {
    if a.shape() == b.shape() {
        return Zip::from(a).and(b).map_collect(|&x, &y| f(x, y));
    }
    let shape = bcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("broadcast lhs");
    let bv = b.broadcast(IxDyn(&shape)).expect("broadcast rhs");
    Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y))
}

/// Repack into standard layout if an op produced permuted strides.
pub(crate) fn standardize<F: Scalar>(a: ArrayD<F>) -> ArrayD<F> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Sum `g` down to `target` shape, inverting a broadcast.
pub(crate) fn reduce_to_shape<F: Scalar>(mut g: ArrayD<F>, target: &[usize]) -> ArrayD<F> {
    while g.ndim() > target.len() {
        g = g.sum_axis(Axis(0));
    }
    for ax in 0..target.len() {
        if target[ax] == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

fn stable_sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn stable_softplus<F: Scalar>(x: F) -> F {
    // max(x, 0) + ln(1 + exp(-|x|))
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

impl<'g, F: Scalar> Tensor<'g, F> {
    fn binary(self, rhs: Self, make: impl Fn(NodeId, NodeId) -> Op<F>, f: impl Fn(F, F) -> F) -> Self {
        let (av, bv) = (self.value(), rhs.value());
        let out = broadcast_binary(&av, &bv, f);
        let req = self.requires_grad() || rhs.requires_grad();
        self.graph.push(out, make(self.id, rhs.id), req)
    }

    fn unary(self, op: Op<F>, f: impl Fn(F) -> F) -> Self {
        let out = self.value().mapv(f);
        self.graph.push(out, op, self.requires_grad())
    }

    pub fn scale(self, c: F) -> Self {
        self.unary(Op::Scale(self.id, c), |x| x * c)
    }

    pub fn add_scalar(self, c: F) -> Self {
        self.unary(Op::AddScalar(self.id, c), |x| x + c)
    }

    pub fn exp(self) -> Self {
        self.unary(Op::Exp(self.id), |x| x.exp())
    }

    pub fn ln(self) -> Self {
        self.unary(Op::Ln(self.id), |x| x.ln())
    }

    pub fn sqrt(self) -> Self {
        self.unary(Op::Sqrt(self.id), |x| x.sqrt())
    }

    pub fn relu(self) -> Self {
        self.unary(Op::Relu(self.id), |x| x.max(F::zero()))
    }

    pub fn leaky_relu(self, slope: F) -> Self {
        self.unary(Op::LeakyRelu(self.id, slope), |x| {
            if x > F::zero() {
                x
            } else {
                x * slope
            }
        })
    }

    pub fn softplus(self) -> Self {
        self.unary(Op::Softplus(self.id), stable_softplus)
    }

    pub fn sigmoid(self) -> Self {
        self.unary(Op::Sigmoid(self.id), stable_sigmoid)
    }

    pub fn clamp_min(self, lo: F) -> Self {
        self.unary(Op::ClampMin(self.id, lo), |x| x.max(lo))
    }

    pub fn clamp(self, lo: F, hi: F) -> Self {
        self.unary(Op::Clamp(self.id, lo, hi), |x| x.max(lo).min(hi))
    }

    /// Sum of all elements as a 0-d tensor.
    pub fn sum(self) -> Self {
        let total: F = self.value().iter().copied().sum();
        self.graph.push(
            ArrayD::from_elem(IxDyn(&[]), total),
            Op::Sum(self.id),
            self.requires_grad(),
        )
    }

    /// Mean of all elements as a 0-d tensor.
    pub fn mean(self) -> Self {
        let n = self.value().len();
        self.sum().scale(F::one() / F::from_usize(n).unwrap())
    }

    /// Sum over `axes`, keeping them as size-1 dims.
    pub fn sum_axes(self, axes: &[usize]) -> Self {
        let v = self.value();
        let mut out = v.as_ref().clone();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        for &ax in sorted.iter().rev() {
            out = out.sum_axis(Axis(ax));
        }
        for &ax in sorted.iter() {
            out = out.insert_axis(Axis(ax));
        }
        self.graph
            .push(out, Op::SumAxes(self.id), self.requires_grad())
    }

    /// 2-D matrix product.
    pub fn matmul(self, rhs: Self) -> Self {
        let a = self.value();
        let b = rhs.value();
        let a2 = a.view().into_dimensionality::<Ix2>().expect("matmul lhs 2-D");
        let b2 = b.view().into_dimensionality::<Ix2>().expect("matmul rhs 2-D");
        let out = a2.dot(&b2).into_dyn();
        let req = self.requires_grad() || rhs.requires_grad();
        self.graph.push(out, Op::Matmul(self.id, rhs.id), req)
    }

    pub fn reshape(self, shape: &[usize]) -> Self {
        let v = self.value();
        assert_eq!(
            v.len(),
            shape.iter().product::<usize>(),
            "reshape element count mismatch"
        );
        let out = v
            .as_ref()
            .clone()
            .into_shape(IxDyn(shape))
            .expect("reshape");
        self.graph.push(out, Op::Reshape(self.id), self.requires_grad())
    }

    pub fn permute(self, axes: &[usize]) -> Self {
        // as_standard_layout: a permuted view keeps its strides under
        // to_owned, which would poison reshape later in the chain.
        let out = self
            .value()
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        self.graph
            .push(out, Op::Permute(self.id, axes.to_vec()), self.requires_grad())
    }

    pub fn slice_axis(self, axis: usize, start: usize, end: usize) -> Self {
        let v = self.value();
        let out = v
            .slice_axis(Axis(axis), ndarray::Slice::from(start..end))
            .to_owned();
        self.graph.push(
            out,
            Op::Slice {
                x: self.id,
                axis,
                start,
                end,
            },
            self.requires_grad(),
        )
    }

    /// Value passthrough that blocks gradient flow.
    pub fn detach(self) -> Self {
        let out = self.value().as_ref().clone();
        self.graph.push(out, Op::Detach, false)
    }
}

impl<F: Scalar> Graph<F> {
    pub fn concat<'g>(&'g self, parts: &[Tensor<'g, F>], axis: usize) -> Tensor<'g, F> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let values: Vec<_> = parts.iter().map(|t| t.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = standardize(ndarray::concatenate(Axis(axis), &views).expect("concat shapes"));
        let req = parts.iter().any(|t| t.requires_grad());
        self.push(out, Op::Concat(parts.iter().map(|t| t.id).collect(), axis), req)
    }
}

impl<'g, F: Scalar> Add for Tensor<'g, F> {
    type Output = Tensor<'g, F>;
    fn add(self, rhs: Self) -> Self::Output {
        self.binary(rhs, Op::Add, |x, y| x + y)
    }
}

impl<'g, F: Scalar> Sub for Tensor<'g, F> {
    type Output = Tensor<'g, F>;
    fn sub(self, rhs: Self) -> Self::Output {
        self.binary(rhs, Op::Sub, |x, y| x - y)
    }
}

impl<'g, F: Scalar> Mul for Tensor<'g, F> {
    type Output = Tensor<'g, F>;
    fn mul(self, rhs: Self) -> Self::Output {
        self.binary(rhs, Op::Mul, |x, y| x * y)
    }
}

impl<'g, F: Scalar> Div for Tensor<'g, F> {
    type Output = Tensor<'g, F>;
    fn div(self, rhs: Self) -> Self::Output {
        self.binary(rhs, Op::Div, |x, y| x / y)
    }
}

impl<'g, F: Scalar> Neg for Tensor<'g, F> {
    type Output = Tensor<'g, F>;
    fn neg(self) -> Self::Output {
        self.unary(Op::Neg(self.id), |x| -x)
    }
}

fn accum<F: Scalar>(
    nodes: &[Node<F>],
    grads: &mut [Option<ArrayD<F>>],
    id: NodeId,
    g: ArrayD<F>,
) {
    if !nodes[id].requires_grad {
        return;
    }
    debug_assert_eq!(g.shape(), nodes[id].value.shape(), "gradient shape mismatch");
    match &mut grads[id] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Propagate `grad` of node `id` onto its parents.
pub(crate) fn backward_step<F: Scalar>(
    nodes: &[Node<F>],
    id: NodeId,
    grad: &ArrayD<F>,
    grads: &mut [Option<ArrayD<F>>],
) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf | Op::Detach => {}
        Op::Add(a, b) => {
            let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
            accum(nodes, grads, *a, reduce_to_shape(grad.clone(), sa));
            accum(nodes, grads, *b, reduce_to_shape(grad.clone(), sb));
        }
        Op::Sub(a, b) => {
            let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
            accum(nodes, grads, *a, reduce_to_shape(grad.clone(), sa));
            accum(nodes, grads, *b, reduce_to_shape(-grad.clone(), sb));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            if nodes[*a].requires_grad {
                let ga = broadcast_binary(grad, bv, |g, y| g * y);
                accum(nodes, grads, *a, reduce_to_shape(ga, av.shape()));
            }
            if nodes[*b].requires_grad {
                let gb = broadcast_binary(grad, av, |g, x| g * x);
                accum(nodes, grads, *b, reduce_to_shape(gb, bv.shape()));
            }
        }
        Op::Div(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            if nodes[*a].requires_grad {
                let ga = broadcast_binary(grad, bv, |g, y| g / y);
                accum(nodes, grads, *a, reduce_to_shape(ga, av.shape()));
            }
            if nodes[*b].requires_grad {
                // d(a/b)/db = -a / b^2
                let quot = broadcast_binary(av, bv, |x, y| x / (y * y));
                let gb = broadcast_binary(grad, &quot, |g, q| -g * q);
                accum(nodes, grads, *b, reduce_to_shape(gb, bv.shape()));
            }
        }
        Op::Neg(a) => accum(nodes, grads, *a, -grad.clone()),
        Op::Scale(a, c) => accum(nodes, grads, *a, grad.mapv(|g| g * *c)),
        Op::AddScalar(a, _) => accum(nodes, grads, *a, grad.clone()),
        Op::Exp(a) => {
            let g = Zip::from(grad).and(&*node.value).map_collect(|&g, &y| g * y);
            accum(nodes, grads, *a, g);
        }
        Op::Ln(a) => {
            let g = Zip::from(grad)
                .and(&*nodes[*a].value)
                .map_collect(|&g, &x| g / x);
            accum(nodes, grads, *a, g);
        }
        Op::Sqrt(a) => {
            let half = F::of_f64(0.5);
            let g = Zip::from(grad)
                .and(&*node.value)
                .map_collect(|&g, &y| g * half / y);
            accum(nodes, grads, *a, g);
        }
        Op::Relu(a) => {
            let g = Zip::from(grad)
                .and(&*nodes[*a].value)
                .map_collect(|&g, &x| if x > F::zero() { g } else { F::zero() });
            accum(nodes, grads, *a, g);
        }
        Op::LeakyRelu(a, slope) => {
            let g = Zip::from(grad)
                .and(&*nodes[*a].value)
                .map_collect(|&g, &x| if x > F::zero() { g } else { g * *slope });
            accum(nodes, grads, *a, g);
        }
        Op::Softplus(a) => {
            let g = Zip::from(grad)
                .and(&*nodes[*a].value)
                .map_collect(|&g, &x| g * stable_sigmoid(x));
            accum(nodes, grads, *a, g);
        }
        Op::Sigmoid(a) => {
            let g = Zip::from(grad)
                .and(&*node.value)
                .map_collect(|&g, &y| g * y * (F::one() - y));
            accum(nodes, grads, *a, g);
        }
        Op::ClampMin(a, lo) => {
            let g = Zip::from(grad)
                .and(&*nodes[*a].value)
                .map_collect(|&g, &x| if x >= *lo { g } else { F::zero() });
            accum(nodes, grads, *a, g);
        }
        Op::Clamp(a, lo, hi) => {
            let g = Zip::from(grad)
                .and(&*nodes[*a].value)
                .map_collect(|&g, &x| if x >= *lo && x <= *hi { g } else { F::zero() });
            accum(nodes, grads, *a, g);
        }
        Op::Sum(a) => {
            let gv = *grad.iter().next().expect("scalar grad");
            let shape = nodes[*a].value.shape().to_vec();
            accum(nodes, grads, *a, ArrayD::from_elem(IxDyn(&shape), gv));
        }
        Op::SumAxes(a) => {
            let shape = nodes[*a].value.shape().to_vec();
            let g = grad
                .broadcast(IxDyn(&shape))
                .expect("sum_axes grad broadcast")
                .to_owned();
            accum(nodes, grads, *a, g);
        }
        Op::Matmul(a, b) => {
            let av = nodes[*a].value.view().into_dimensionality::<Ix2>().unwrap();
            let bv = nodes[*b].value.view().into_dimensionality::<Ix2>().unwrap();
            let gv = grad.view().into_dimensionality::<Ix2>().unwrap();
            if nodes[*a].requires_grad {
                accum(nodes, grads, *a, gv.dot(&bv.t()).into_dyn());
            }
            if nodes[*b].requires_grad {
                accum(nodes, grads, *b, av.t().dot(&gv).into_dyn());
            }
        }
        Op::Reshape(a) => {
            let shape = nodes[*a].value.shape().to_vec();
            accum(
                nodes,
                grads,
                *a,
                grad.clone().into_shape(IxDyn(&shape)).expect("reshape grad"),
            );
        }
        Op::Permute(a, axes) => {
            let mut inverse = vec![0usize; axes.len()];
            for (i, &ax) in axes.iter().enumerate() {
                inverse[ax] = i;
            }
            let g = grad
                .view()
                .permuted_axes(IxDyn(&inverse))
                .as_standard_layout()
                .into_owned();
            accum(nodes, grads, *a, g);
        }
        Op::Concat(parts, axis) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.shape()[*axis];
                let g = grad
                    .slice_axis(Axis(*axis), ndarray::Slice::from(offset..offset + len))
                    .to_owned();
                accum(nodes, grads, p, g);
                offset += len;
            }
        }
        Op::Slice { x, axis, start, end } => {
            let shape = nodes[*x].value.shape().to_vec();
            let mut g = ArrayD::zeros(IxDyn(&shape));
            g.slice_axis_mut(Axis(*axis), ndarray::Slice::from(*start..*end))
                .assign(grad);
            accum(nodes, grads, *x, g);
        }
        Op::Conv2d { x, w, b, pad } => {
            nn::conv2d_backward(nodes, grads, grad, *x, *w, *b, *pad, &accum);
        }
        Op::MaxPool2(a, idx) => {
            let g = nn::maxpool2_backward(grad, &nodes[*a].value, idx);
            accum(nodes, grads, *a, g);
        }
        Op::UpsampleBilinear2(a) => {
            let g = nn::upsample_bilinear2_backward(grad, nodes[*a].value.shape());
            accum(nodes, grads, *a, g);
        }
        Op::AdaptiveAvgPool(a, grid) => {
            let g = nn::adaptive_avg_pool_backward(grad, nodes[*a].value.shape(), *grid);
            accum(nodes, grads, *a, g);
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            saved,
        } => {
            nn::batchnorm_backward(nodes, grads, grad, *x, *gamma, *beta, saved, &accum);
        }
    }
}
