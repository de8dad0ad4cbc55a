use std::cell::{Ref, RefCell};

use super::kernels::{self, ConvGeom};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Deliberate corruption of one backward rule. Only used to prove that the
/// gradient checker catches a broken derivative.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fault {
    ScaleReluGrad(f64),
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Square(usize),
    Sqrt(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        input: usize,
        weight: usize,
        geom: ConvGeom,
    },
    AddBias {
        x: usize,
        bias: usize,
    },
    Upsample2x {
        x: usize,
        dims: [usize; 4],
    },
    Softmax(usize),
    LogSoftmax(usize),
    SumLast(usize),
    NormLast(usize),
    MulRows {
        x: usize,
        s: usize,
    },
    Sum(usize),
    Mean(usize),
    GatherRows {
        x: usize,
        idx: Vec<usize>,
    },
    Pick {
        x: usize,
        idx: Vec<usize>,
    },
    Reshape(usize),
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match *self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![a, b],
            Scale(a, _)
            | AddScalar(a)
            | Square(a)
            | Sqrt(a)
            | Exp(a)
            | Log(a)
            | Relu(a)
            | Softmax(a)
            | LogSoftmax(a)
            | SumLast(a)
            | NormLast(a)
            | Sum(a)
            | Mean(a)
            | Reshape(a) => vec![a],
            MatMul { a, b, .. } => vec![a, b],
            Conv2d { input, weight, .. } => vec![input, weight],
            AddBias { x, bias } => vec![x, bias],
            Upsample2x { x, .. } | GatherRows { x, .. } | Pick { x, .. } => vec![x],
            MulRows { x, s } => vec![x, s],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    is_param: bool,
    name: Option<String>,
    grad: Option<Tensor<T>>,
}

/// Records primitive operations in topological order for one backward pass.
///
/// A tape is single-threaded; use one per training step (or per thread).
pub struct Tape<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
    fault: Option<Fault>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Element> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Element> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let d = shape.last().copied().unwrap_or(1);
    let n: usize = shape.iter().product();
    (if d == 0 { 0 } else { n / d }, d)
}

fn same_shape(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{op}: {a:?} vs {b:?}")));
    }
    Ok(())
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Fault) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            fault: Some(fault),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Smallest |input| over every recorded relu, None if there are none.
    /// Finite differences are unreliable when this is near zero.
    pub fn min_relu_margin(&self) -> Option<f64> {
        let nodes = self.nodes.borrow();
        nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => nodes[a]
                    .value
                    .data()
                    .iter()
                    .map(|v| v.as_f64().abs())
                    .reduce(f64::min),
                _ => None,
            })
            .reduce(f64::min)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = op.parents().iter().any(|&p| nodes[p].needs_grad);
        nodes.push(Node {
            value,
            op,
            needs_grad,
            is_param: false,
            name: None,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push_leaf(&self, value: Tensor<T>, requires_grad: bool, name: Option<String>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
            is_param: requires_grad,
            name,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A named leaf that requires a gradient.
    pub fn param(&self, name: impl Into<String>, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, true, Some(name.into()))
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, false, None)
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(value))
    }

    fn with_value<R>(&self, id: usize, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.nodes.borrow()[id].value)
    }

    fn with_values<R>(&self, a: usize, b: usize, f: impl FnOnce(&Tensor<T>, &Tensor<T>) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a].value, &nodes[b].value)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Populates the grad of every node reachable from the loss that depends
    /// on a parameter, and fails if a parameter leaf received none.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss belongs to a different tape".into()));
        }
        let mut nodes = self.nodes.borrow_mut();
        let loss_len = nodes[loss.id].value.len();
        if loss_len != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        for node in nodes.iter_mut() {
            node.grad = None;
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }

        for (id, node) in nodes.iter_mut().enumerate() {
            if node.needs_grad {
                if let Some(g) = grads[id].take() {
                    node.grad = Some(Tensor::new(node.value.shape(), g)?);
                }
            }
        }
        if let Some((id, node)) = nodes
            .iter()
            .enumerate()
            .find(|(_, n)| n.is_param && n.grad.is_none())
        {
            return Err(Error::Detached {
                id,
                name: node.name.clone().unwrap_or_default(),
            });
        }
        Ok(())
    }

    fn propagate(&self, nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &nodes[id];
        let y = node.value.data();
        let val = |p: usize| nodes[p].value.data();
        let wants = |p: usize| nodes[p].needs_grad;
        // Lazily zero-initialised accumulator for parent `p`.
        fn acc<'g, T: Element>(
            grads: &'g mut [Option<Vec<T>>],
            nodes: &[Node<T>],
            p: usize,
        ) -> &'g mut Vec<T> {
            grads[p].get_or_insert_with(|| vec![T::zero(); nodes[p].value.len()])
        }

        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for p in [a, b] {
                    if wants(p) {
                        acc(grads, nodes, p)
                            .iter_mut()
                            .zip(g)
                            .for_each(|(d, &gv)| *d += gv);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    acc(grads, nodes, a)
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, &gv)| *d += gv);
                }
                if wants(b) {
                    acc(grads, nodes, b)
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, &gv)| *d -= gv);
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    let bv = val(b);
                    for ((d, &gv), &x) in acc(grads, nodes, a).iter_mut().zip(g).zip(bv) {
                        *d += gv * x;
                    }
                }
                if wants(b) {
                    let av = val(a);
                    for ((d, &gv), &x) in acc(grads, nodes, b).iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(a), val(b));
                if wants(a) {
                    for ((d, &gv), &x) in acc(grads, nodes, a).iter_mut().zip(g).zip(bv) {
                        *d += gv / x;
                    }
                }
                if wants(b) {
                    let gb = acc(grads, nodes, b);
                    for i in 0..gb.len() {
                        gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                }
            }
            Op::Scale(a, c) => {
                for (d, &gv) in acc(grads, nodes, a).iter_mut().zip(g) {
                    *d += gv * c;
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                acc(grads, nodes, a)
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, &gv)| *d += gv);
            }
            Op::Square(a) => {
                let two = T::from_f64(2.0);
                let av = val(a);
                for ((d, &gv), &x) in acc(grads, nodes, a).iter_mut().zip(g).zip(av) {
                    *d += two * x * gv;
                }
            }
            Op::Sqrt(a) => {
                let two = T::from_f64(2.0);
                for ((d, &gv), &yv) in acc(grads, nodes, a).iter_mut().zip(g).zip(y) {
                    *d += gv / (two * yv);
                }
            }
            Op::Exp(a) => {
                for ((d, &gv), &yv) in acc(grads, nodes, a).iter_mut().zip(g).zip(y) {
                    *d += gv * yv;
                }
            }
            Op::Log(a) => {
                let av = val(a);
                for ((d, &gv), &x) in acc(grads, nodes, a).iter_mut().zip(g).zip(av) {
                    *d += gv / x;
                }
            }
            Op::Relu(a) => {
                let scale = match self.fault {
                    Some(Fault::ScaleReluGrad(s)) => T::from_f64(s),
                    None => T::one(),
                };
                let av = val(a);
                for ((d, &gv), &x) in acc(grads, nodes, a).iter_mut().zip(g).zip(av) {
                    if x > T::zero() {
                        *d += gv * scale;
                    }
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                if wants(a) {
                    let bv = val(b);
                    kernels::matmul_grad_a(g, bv, acc(grads, nodes, a), m, k, n);
                }
                if wants(b) {
                    let av = val(a);
                    kernels::matmul_grad_b(av, g, acc(grads, nodes, b), m, k, n);
                }
            }
            Op::Conv2d {
                input,
                weight,
                geom,
            } => {
                let (xv, wv) = (val(input), val(weight));
                // Split the borrow: the two parents are distinct nodes.
                let mut gi = if wants(input) {
                    grads[input]
                        .take()
                        .or_else(|| Some(vec![T::zero(); xv.len()]))
                } else {
                    None
                };
                let mut gw = if wants(weight) {
                    grads[weight]
                        .take()
                        .or_else(|| Some(vec![T::zero(); wv.len()]))
                } else {
                    None
                };
                kernels::conv2d_backward(&geom, xv, wv, g, gi.as_deref_mut(), gw.as_deref_mut());
                if gi.is_some() {
                    grads[input] = gi;
                }
                if gw.is_some() {
                    grads[weight] = gw;
                }
            }
            Op::AddBias { x, bias } => {
                if wants(x) {
                    acc(grads, nodes, x)
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, &gv)| *d += gv);
                }
                if wants(bias) {
                    let gb = acc(grads, nodes, bias);
                    let c = gb.len();
                    for row in g.chunks(c) {
                        for (d, &gv) in gb.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Upsample2x {
                x,
                dims: [b, h, w, c],
            } => {
                kernels::upsample2x_backward(g, acc(grads, nodes, x), b, h, w, c);
            }
            Op::Softmax(a) => {
                let d = node.value.last_dim();
                let ga = acc(grads, nodes, a);
                for ((gr, yr), dr) in g.chunks(d).zip(y.chunks(d)).zip(ga.chunks_mut(d)) {
                    let dot: T = gr.iter().zip(yr).map(|(&gv, &yv)| gv * yv).sum();
                    for j in 0..d {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let d = node.value.last_dim();
                let ga = acc(grads, nodes, a);
                for ((gr, yr), dr) in g.chunks(d).zip(y.chunks(d)).zip(ga.chunks_mut(d)) {
                    let total: T = gr.iter().copied().sum();
                    for j in 0..d {
                        dr[j] += gr[j] - yr[j].exp() * total;
                    }
                }
            }
            Op::SumLast(a) => {
                let d = nodes[a].value.last_dim();
                for (dr, &gv) in acc(grads, nodes, a).chunks_mut(d).zip(g) {
                    dr.iter_mut().for_each(|x| *x += gv);
                }
            }
            Op::NormLast(a) => {
                let d = nodes[a].value.last_dim();
                let av = val(a);
                let ga = acc(grads, nodes, a);
                for (r, (&gv, &nv)) in g.iter().zip(y).enumerate() {
                    if nv > T::zero() {
                        for j in 0..d {
                            ga[r * d + j] += gv * av[r * d + j] / nv;
                        }
                    }
                }
            }
            Op::MulRows { x, s } => {
                let d = node.value.last_dim();
                if wants(x) {
                    let sv = val(s);
                    for (r, (dr, gr)) in acc(grads, nodes, x)
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .enumerate()
                    {
                        for (dv, &gv) in dr.iter_mut().zip(gr) {
                            *dv += gv * sv[r];
                        }
                    }
                }
                if wants(s) {
                    let xv = val(x);
                    let gs = acc(grads, nodes, s);
                    for (r, (xr, gr)) in xv.chunks(d).zip(g.chunks(d)).enumerate() {
                        gs[r] += xr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    }
                }
            }
            Op::Sum(a) => {
                let gv = g[0];
                acc(grads, nodes, a).iter_mut().for_each(|d| *d += gv);
            }
            Op::Mean(a) => {
                let n = T::from_f64(nodes[a].value.len() as f64);
                let gv = g[0] / n;
                acc(grads, nodes, a).iter_mut().for_each(|d| *d += gv);
            }
            Op::GatherRows { x, ref idx } => {
                let d = node.value.last_dim();
                let gx = acc(grads, nodes, x);
                for (i, &src) in idx.iter().enumerate() {
                    for j in 0..d {
                        gx[src * d + j] += g[i * d + j];
                    }
                }
            }
            Op::Pick { x, ref idx } => {
                let d = nodes[x].value.last_dim();
                let gx = acc(grads, nodes, x);
                for (r, &col) in idx.iter().enumerate() {
                    gx[r * d + col] += g[r];
                }
            }
        }
    }
}

impl<'t, T: Element> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_value(self.id, |t| t.shape().to_vec())
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> Result<T> {
        self.tape.with_value(self.id, |t| t.item())
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    fn check_same(&self, other: &Var<'t, T>, op: &str) -> Result<()> {
        if !std::ptr::eq(self.tape, other.tape) {
            return Err(Error::Contract(format!(
                "{op}: operands on different tapes"
            )));
        }
        self.tape.with_values(self.id, other.id, |a, b| {
            same_shape(op, a.shape(), b.shape())
        })
    }

    fn zip_map(&self, other: &Var<'t, T>, op: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.check_same(other, op)?;
        Ok(self.tape.with_values(self.id, other.id, |a, b| {
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(a.shape(), data).expect("same shape")
        }))
    }

    fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        self.tape.with_value(self.id, |a| a.map(f))
    }

    pub fn add(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.zip_map(&other, "add", |a, b| a + b)?;
        Ok(self.tape.push(v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.zip_map(&other, "sub", |a, b| a - b)?;
        Ok(self.tape.push(v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.zip_map(&other, "mul", |a, b| a * b)?;
        Ok(self.tape.push(v, Op::Mul(self.id, other.id)))
    }

    pub fn div(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.zip_map(&other, "div", |a, b| a / b)?;
        Ok(self.tape.push(v, Op::Div(self.id, other.id)))
    }

    pub fn scale(&self, c: T) -> Var<'t, T> {
        let v = self.map(|x| x * c);
        self.tape.push(v, Op::Scale(self.id, c))
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    pub fn add_scalar(&self, c: T) -> Var<'t, T> {
        let v = self.map(|x| x + c);
        self.tape.push(v, Op::AddScalar(self.id))
    }

    /// Element-wise (Hadamard) square.
    pub fn square(&self) -> Var<'t, T> {
        let v = self.map(|x| x * x);
        self.tape.push(v, Op::Square(self.id))
    }

    pub fn sqrt(&self) -> Var<'t, T> {
        let v = self.map(|x| x.sqrt());
        self.tape.push(v, Op::Sqrt(self.id))
    }

    pub fn exp(&self) -> Var<'t, T> {
        let v = self.map(|x| x.exp());
        self.tape.push(v, Op::Exp(self.id))
    }

    pub fn ln(&self) -> Var<'t, T> {
        let v = self.map(|x| x.ln());
        self.tape.push(v, Op::Log(self.id))
    }

    /// `max(x, 0)`; the gradient at exactly zero is zero.
    pub fn relu(&self) -> Var<'t, T> {
        let v = self.map(|x| if x > T::zero() { x } else { T::zero() });
        self.tape.push(v, Op::Relu(self.id))
    }

    /// `[m, k] x [k, n]` matrix product.
    pub fn matmul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = self.tape.with_values(self.id, other.id, |a, b| {
            kernels::matmul(a.data(), b.data(), m, k, n)
        });
        let v = Tensor::new(&[m, n], data)?;
        Ok(self.tape.push(
            v,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
        ))
    }

    /// NHWC convolution with an `[kh, kw, cin, cout]` kernel, no bias.
    pub fn conv2d(&self, weight: Var<'t, T>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[3] != ws[2] || stride == 0 {
            return Err(Error::Shape(format!("conv2d: input {xs:?}, kernel {ws:?}")));
        }
        if xs[1] + 2 * pad < ws[0] || xs[2] + 2 * pad < ws[1] {
            return Err(Error::Shape(format!(
                "conv2d: kernel {ws:?} larger than padded input {xs:?}"
            )));
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_h: xs[1],
            in_w: xs[2],
            cin: xs[3],
            kh: ws[0],
            kw: ws[1],
            cout: ws[3],
            stride,
            pad,
        };
        let data = self.tape.with_values(self.id, weight.id, |x, w| {
            kernels::conv2d_forward(&geom, x.data(), w.data())
        });
        let v = Tensor::new(&[geom.batch, geom.out_h(), geom.out_w(), geom.cout], data)?;
        Ok(self.tape.push(
            v,
            Op::Conv2d {
                input: self.id,
                weight: weight.id,
                geom,
            },
        ))
    }

    /// Adds a per-channel bias along the trailing axis.
    pub fn add_bias(&self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let (xs, bs) = (self.shape(), bias.shape());
        if bs.len() != 1 || xs.last() != Some(&bs[0]) {
            return Err(Error::Shape(format!("add_bias: {xs:?} + {bs:?}")));
        }
        let v = self.tape.with_values(self.id, bias.id, |x, b| {
            let c = b.len();
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(c) {
                for (o, &bv) in row.iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
            out
        });
        Ok(self.tape.push(
            v,
            Op::AddBias {
                x: self.id,
                bias: bias.id,
            },
        ))
    }

    /// Nearest-neighbor 2x spatial upsample of an NHWC tensor.
    pub fn upsample2x(&self) -> Result<Var<'t, T>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("upsample2x: {s:?}")));
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let data = self.tape.with_value(self.id, |x| {
            kernels::upsample2x(x.data(), dims[0], dims[1], dims[2], dims[3])
        });
        let v = Tensor::new(&[s[0], 2 * s[1], 2 * s[2], s[3]], data)?;
        Ok(self.tape.push(v, Op::Upsample2x { x: self.id, dims }))
    }

    fn softmax_rows(&self, log: bool) -> Tensor<T> {
        self.tape.with_value(self.id, |x| {
            let d = x.last_dim();
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(d) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for v in row.iter_mut() {
                    *v -= max;
                    total += v.exp();
                }
                if log {
                    let lz = total.ln();
                    row.iter_mut().for_each(|v| *v -= lz);
                } else {
                    row.iter_mut().for_each(|v| *v = v.exp() / total);
                }
            }
            out
        })
    }

    /// Softmax over the trailing axis (max-subtracted).
    pub fn softmax(&self) -> Var<'t, T> {
        let v = self.softmax_rows(false);
        self.tape.push(v, Op::Softmax(self.id))
    }

    /// Log-softmax over the trailing axis (max-subtracted).
    pub fn log_softmax(&self) -> Var<'t, T> {
        let v = self.softmax_rows(true);
        self.tape.push(v, Op::LogSoftmax(self.id))
    }

    fn reduce_last(&self, f: impl Fn(&[T]) -> T) -> Tensor<T> {
        self.tape.with_value(self.id, |x| {
            let shape = &x.shape()[..x.rank().saturating_sub(1)];
            let data = x.data().chunks(x.last_dim()).map(f).collect();
            Tensor::new(shape, data).expect("row count")
        })
    }

    /// Sum over the trailing axis.
    pub fn sum_last(&self) -> Var<'t, T> {
        let v = self.reduce_last(|r| r.iter().copied().sum());
        self.tape.push(v, Op::SumLast(self.id))
    }

    /// L2 norm over the trailing axis. The gradient at a zero row is zero.
    pub fn norm_last(&self) -> Var<'t, T> {
        let v = self.reduce_last(|r| r.iter().map(|&x| x * x).sum::<T>().sqrt());
        self.tape.push(v, Op::NormLast(self.id))
    }

    /// Scales row `r` of `self` (viewed as `[rows, d]`) by `s[r]`.
    pub fn mul_rows(&self, s: Var<'t, T>) -> Result<Var<'t, T>> {
        let (xs, ss) = (self.shape(), s.shape());
        let (rows, d) = rows_of(&xs);
        if s.value().len() != rows {
            return Err(Error::Shape(format!("mul_rows: {xs:?} by {ss:?}")));
        }
        let v = self.tape.with_values(self.id, s.id, |x, sv| {
            let mut out = x.clone();
            for (row, &k) in out.data_mut().chunks_mut(d).zip(sv.data()) {
                row.iter_mut().for_each(|v| *v *= k);
            }
            out
        });
        Ok(self.tape.push(
            v,
            Op::MulRows {
                x: self.id,
                s: s.id,
            },
        ))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let v = self
            .tape
            .with_value(self.id, |x| Tensor::scalar(x.data().iter().copied().sum()));
        self.tape.push(v, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t, T> {
        let v = self.tape.with_value(self.id, |x| {
            let n = T::from_f64(x.len() as f64);
            Tensor::scalar(x.data().iter().copied().sum::<T>() / n)
        });
        self.tape.push(v, Op::Mean(self.id))
    }

    /// Selects rows of `self` viewed as `[rows, d]`; output `[idx.len(), d]`.
    pub fn gather_rows(&self, idx: Vec<usize>) -> Result<Var<'t, T>> {
        let (rows, d) = rows_of(&self.shape());
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape(format!(
                "gather_rows: index {bad} out of {rows} rows"
            )));
        }
        let v = self.tape.with_value(self.id, |x| {
            let mut data = Vec::with_capacity(idx.len() * d);
            for &i in &idx {
                data.extend_from_slice(x.row(i));
            }
            Tensor::new(&[idx.len(), d], data).expect("gather")
        });
        Ok(self.tape.push(v, Op::GatherRows { x: self.id, idx }))
    }

    /// Picks one column per row: `out[r] = self[r, idx[r]]`.
    pub fn pick(&self, idx: Vec<usize>) -> Result<Var<'t, T>> {
        let (rows, d) = rows_of(&self.shape());
        if idx.len() != rows || idx.iter().any(|&c| c >= d) {
            return Err(Error::Shape(format!(
                "pick: {} indices for [{rows}, {d}]",
                idx.len()
            )));
        }
        let v = self.tape.with_value(self.id, |x| {
            let data = idx
                .iter()
                .enumerate()
                .map(|(r, &c)| x.data()[r * d + c])
                .collect();
            Tensor::new(&[rows], data).expect("pick")
        });
        Ok(self.tape.push(v, Op::Pick { x: self.id, idx }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = self
            .tape
            .with_value(self.id, |x| x.clone().reshape(shape))?;
        Ok(self.tape.push(v, Op::Reshape(self.id)))
    }
}
