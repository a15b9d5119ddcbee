//! Minimal reverse-mode autodiff over `ndarray` tensors.
//!
//! A [`Tape`] is an append-only graph built per optimization step. Nodes hold
//! their forward values; [`Tape::backward`] returns per-node gradients.
//! Binary ops broadcast numpy-style (right-aligned, size-1 axes stretch).
//! The tape is generic over `f32`/`f64` so gradient checks can run in f64
//! while training runs in f32.

pub mod kernels;

use ndarray::{ArrayD, Axis, IxDyn, Zip};

/// Element type the tape can differentiate.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::AddAssign
    + Send
    + Sync
    + 'static
{
    fn from_f64_c(v: f64) -> Self;
    fn to_f64_c(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64_c(v: f64) -> Self {
        v as f32
    }
    fn to_f64_c(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64_c(v: f64) -> Self {
        v
    }
    fn to_f64_c(self) -> f64 {
        self
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, T),
    AddScalar(Var, T),
    Sum {
        x: Var,
        axes: Vec<usize>,
        keep: bool,
    },
    Reshape(Var),
    SliceChannels {
        x: Var,
        start: usize,
    },
    ConcatChannels(Var, Var),
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Sigmoid(Var),
    Sqrt(Var),
    Ln(Var),
    Exp(Var),
    Abs(Var),
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    UpsampleNearest2x(Var),
    UpsampleBilinear2x(Var),
}

struct Node<T: Scalar> {
    value: ArrayD<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the backward root with respect to `v`, if it was reached.
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Broadcast result shape of two shapes, numpy rules.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast shapes {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

/// Sum `g` down to `shape` (inverse of broadcasting).
fn reduce_to_shape<T: Scalar>(g: ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    let mut g = g;
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (i, &s) in shape.iter().enumerate() {
        if s == 1 && g.shape()[i] > 1 {
            g = g.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    g
}

/// Append-only autodiff graph.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input (parameters, features under test).
    pub fn leaf(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input (data, labels, masks).
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// 0-dim constant.
    pub fn scalar_constant(&mut self, v: T) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    /// Read a node that holds a single element.
    pub fn scalar(&self, v: Var) -> T {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        *val.iter().next().unwrap()
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let shape = broadcast_shape(self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        let av = self.nodes[a.0].value.broadcast(IxDyn(&shape)).unwrap();
        let bv = self.nodes[b.0].value.broadcast(IxDyn(&shape)).unwrap();
        let mut out = ArrayD::zeros(IxDyn(&shape));
        Zip::from(&mut out).and(&av).and(&bv).for_each(|o, &x, &y| *o = f(x, y));
        let needs = self.ng(a) || self.ng(b);
        self.push(out, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(|e| -e);
        let needs = self.ng(x);
        self.push(v, Op::Neg(x), needs)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.nodes[x.0].value.mapv(|e| e * c);
        let needs = self.ng(x);
        self.push(v, Op::Scale(x, c), needs)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let v = self.nodes[x.0].value.mapv(|e| e + c);
        let needs = self.ng(x);
        self.push(v, Op::AddScalar(x, c), needs)
    }

    /// Sum over all elements down to a 0-dim scalar node.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.nodes[x.0].value.ndim()).collect();
        self.sum_axes(x, &axes, false)
    }

    /// Sum over the given axes; `keep` retains them with size 1.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize], keep: bool) -> Var {
        let mut sorted: Vec<usize> = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut v = self.nodes[x.0].value.clone();
        for &ax in sorted.iter().rev() {
            v = v.sum_axis(Axis(ax));
            if keep {
                v = v.insert_axis(Axis(ax));
            }
        }
        let needs = self.ng(x);
        self.push(
            v,
            Op::Sum {
                x,
                axes: sorted,
                keep,
            },
            needs,
        )
    }

    /// Mean over all elements.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len();
        let s = self.sum_all(x);
        self.scale(s, T::one() / T::from_f64_c(n as f64))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.nodes[x.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        let needs = self.ng(x);
        self.push(v, Op::Reshape(x), needs)
    }

    /// Narrow along axis 1 (channels): keeps `[start, start+len)`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.nodes[x.0]
            .value
            .slice_axis(Axis(1), ndarray::Slice::from(start..start + len))
            .to_owned();
        let needs = self.ng(x);
        self.push(v, Op::SliceChannels { x, start }, needs)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::concatenate(
            Axis(1),
            &[self.nodes[a.0].value.view(), self.nodes[b.0].value.view()],
        )
        .expect("concat shape mismatch");
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::ConcatChannels(a, b), needs)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let v = self.nodes[x.0]
            .value
            .mapv(|e| if e > T::zero() { e } else { e * slope });
        let needs = self.ng(x);
        self.push(v, Op::LeakyRelu { x, slope }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, T::zero())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let one = T::one();
        let v = self.nodes[x.0].value.mapv(|e| one / (one + (-e).exp()));
        let needs = self.ng(x);
        self.push(v, Op::Sigmoid(x), needs)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(|e| e.sqrt());
        let needs = self.ng(x);
        self.push(v, Op::Sqrt(x), needs)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(|e| e.ln());
        let needs = self.ng(x);
        self.push(v, Op::Ln(x), needs)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(|e| e.exp());
        let needs = self.ng(x);
        self.push(v, Op::Exp(x), needs)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(|e| e.abs());
        let needs = self.ng(x);
        self.push(v, Op::Abs(x), needs)
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let v = self.nodes[x.0].value.mapv(|e| e.max(lo).min(hi));
        let needs = self.ng(x);
        self.push(v, Op::Clamp { x, lo, hi }, needs)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let v = kernels::conv2d_forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
            stride,
            pad,
        );
        let needs = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(v, Op::Conv2d { x, w, b, stride, pad }, needs)
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Var {
        let v = kernels::upsample_nearest2x_forward(&self.nodes[x.0].value);
        let needs = self.ng(x);
        self.push(v, Op::UpsampleNearest2x(x), needs)
    }

    pub fn upsample_bilinear2x(&mut self, x: Var) -> Var {
        let v = kernels::upsample_bilinear2x_forward(&self.nodes[x.0].value);
        let needs = self.ng(x);
        self.push(v, Op::UpsampleBilinear2x(x), needs)
    }

    /// Reverse pass from a single-element `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<ArrayD<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::from_elem(
            self.nodes[root.0].value.raw_dim(),
            T::one(),
        ));

        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.accumulate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn bump(&self, grads: &mut [Option<ArrayD<T>>], v: Var, add: ArrayD<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let add = reduce_to_shape(add, self.nodes[v.0].value.shape());
        match &mut grads[v.0] {
            Some(g) => *g += &add,
            slot @ None => *slot = Some(add),
        }
    }

    fn accumulate(&self, idx: usize, g: &ArrayD<T>, grads: &mut [Option<ArrayD<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.bump(grads, *a, g.clone());
                self.bump(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.bump(grads, *a, g.clone());
                self.bump(grads, *b, g.mapv(|e| -e));
            }
            Op::Mul(a, b) => {
                let shape = node.value.shape();
                if self.ng(*a) {
                    let bv = self.nodes[b.0].value.broadcast(IxDyn(shape)).unwrap();
                    self.bump(grads, *a, g * &bv);
                }
                if self.ng(*b) {
                    let av = self.nodes[a.0].value.broadcast(IxDyn(shape)).unwrap();
                    self.bump(grads, *b, g * &av);
                }
            }
            Op::Div(a, b) => {
                let shape = node.value.shape();
                let bv = self.nodes[b.0].value.broadcast(IxDyn(shape)).unwrap();
                if self.ng(*a) {
                    self.bump(grads, *a, g / &bv);
                }
                if self.ng(*b) {
                    let av = self.nodes[a.0].value.broadcast(IxDyn(shape)).unwrap();
                    let mut gb = ArrayD::zeros(IxDyn(shape));
                    Zip::from(&mut gb)
                        .and(g)
                        .and(&av)
                        .and(&bv)
                        .for_each(|o, &gg, &x, &y| *o = -gg * x / (y * y));
                    self.bump(grads, *b, gb);
                }
            }
            Op::Neg(x) => self.bump(grads, *x, g.mapv(|e| -e)),
            Op::Scale(x, c) => self.bump(grads, *x, g.mapv(|e| e * *c)),
            Op::AddScalar(x, _) => self.bump(grads, *x, g.clone()),
            Op::Sum { x, axes, keep } => {
                let xshape = self.nodes[x.0].value.shape().to_vec();
                let mut gv = g.clone();
                if !keep {
                    for &ax in axes.iter() {
                        gv = gv.insert_axis(Axis(ax));
                    }
                }
                let gb = gv.broadcast(IxDyn(&xshape)).unwrap().to_owned();
                self.bump(grads, *x, gb);
            }
            Op::Reshape(x) => {
                let xshape = self.nodes[x.0].value.shape().to_vec();
                let gr = g
                    .clone()
                    .into_shape_with_order(IxDyn(&xshape))
                    .expect("reshape grad");
                self.bump(grads, *x, gr);
            }
            Op::SliceChannels { x, start } => {
                let mut gx = ArrayD::zeros(self.nodes[x.0].value.raw_dim());
                let len = node.value.shape()[1];
                gx.slice_axis_mut(Axis(1), ndarray::Slice::from(*start..*start + len))
                    .assign(g);
                self.bump(grads, *x, gx);
            }
            Op::ConcatChannels(a, b) => {
                let ca = self.nodes[a.0].value.shape()[1];
                let cb = self.nodes[b.0].value.shape()[1];
                let ga = g
                    .slice_axis(Axis(1), ndarray::Slice::from(0..ca))
                    .to_owned();
                let gb = g
                    .slice_axis(Axis(1), ndarray::Slice::from(ca..ca + cb))
                    .to_owned();
                self.bump(grads, *a, ga);
                self.bump(grads, *b, gb);
            }
            Op::LeakyRelu { x, slope } => {
                let xv = &self.nodes[x.0].value;
                let mut gx = g.clone();
                Zip::from(&mut gx).and(xv).for_each(|o, &e| {
                    if e <= T::zero() {
                        *o = *o * *slope;
                    }
                });
                self.bump(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let one = T::one();
                let mut gx = g.clone();
                Zip::from(&mut gx).and(y).for_each(|o, &s| *o = *o * s * (one - s));
                self.bump(grads, *x, gx);
            }
            Op::Sqrt(x) => {
                let y = &node.value;
                let half = T::from_f64_c(0.5);
                let mut gx = g.clone();
                Zip::from(&mut gx).and(y).for_each(|o, &s| {
                    *o = if s > T::zero() { *o * half / s } else { T::zero() };
                });
                self.bump(grads, *x, gx);
            }
            Op::Ln(x) => {
                let xv = &self.nodes[x.0].value;
                self.bump(grads, *x, g / xv);
            }
            Op::Exp(x) => {
                let y = &node.value;
                self.bump(grads, *x, g * y);
            }
            Op::Abs(x) => {
                let xv = &self.nodes[x.0].value;
                let mut gx = g.clone();
                Zip::from(&mut gx).and(xv).for_each(|o, &e| {
                    *o = if e > T::zero() {
                        *o
                    } else if e < T::zero() {
                        -*o
                    } else {
                        T::zero()
                    };
                });
                self.bump(grads, *x, gx);
            }
            Op::Clamp { x, lo, hi } => {
                let xv = &self.nodes[x.0].value;
                let mut gx = g.clone();
                Zip::from(&mut gx).and(xv).for_each(|o, &e| {
                    if e <= *lo || e >= *hi {
                        *o = T::zero();
                    }
                });
                self.bump(grads, *x, gx);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let need_gx = self.ng(*x);
                let (gx, gw, gb) = kernels::conv2d_backward(
                    &self.nodes[x.0].value,
                    &self.nodes[w.0].value,
                    g,
                    *stride,
                    *pad,
                    need_gx,
                );
                if let Some(gx) = gx {
                    self.bump(grads, *x, gx);
                }
                self.bump(grads, *w, gw);
                self.bump(grads, *b, gb);
            }
            Op::UpsampleNearest2x(x) => {
                self.bump(grads, *x, kernels::upsample_nearest2x_backward(g));
            }
            Op::UpsampleBilinear2x(x) => {
                self.bump(grads, *x, kernels::upsample_bilinear2x_backward(g));
            }
        }
    }
}
