use std::sync::Arc;

use super::bank::BankOp;
use super::tensor::Tensor;
use super::{conv, spectral};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Marker for scatter targets that are dropped.
pub const DROP: usize = usize::MAX;

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    AddConst(Var),
    MulConst(Var, f64),
    Scale(Var, Var),
    Pow(Var, Var),
    Exp(Var),
    Log(Var),
    Sin(Var),
    Cos(Var),
    Sqrt(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Sum(Var),
    SumAxis { x: Var, axis: usize },
    L1(Var, Var),
    Slice { x: Var, axis: usize, start: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Transpose(Var),
    Reshape(Var),
    Tile(Var),
    Gather { x: Var, index: Arc<[usize]> },
    ScatterAdd { x: Var, index: Arc<[usize]> },
    Part { x: Var, offset: usize },
    MatMul(Var, Var),
    Affine { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var },
    Rfft { x: Var, n: usize },
    Irfft { re: Var, im: Var, n: usize },
    Bank(Box<BankOp>),
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Append-only record of a define-by-run computation.
///
/// Every primitive evaluates eagerly and pushes one node holding its value.
/// Node inputs always precede the node, so reverse insertion order is a valid
/// topological order for [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    pins: PinMode,
}

/// Branch patterns of the non-smooth primitives (ReLU and L1), in the order
/// they were evaluated. Replaying them on another tape evaluates the smooth
/// piece the recorded point lies on, which is what the tape gradient
/// differentiates; finite differences taken that way never straddle a kink.
#[derive(Clone, Debug, Default)]
pub struct Pins(Arc<Vec<Vec<i8>>>);

#[derive(Default)]
enum PinMode {
    #[default]
    Off,
    Record(Vec<Vec<i8>>),
    Replay(Arc<Vec<Vec<i8>>>, usize),
}

fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// Gradients produced by [`Tape::backward`], one slot per tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// (outer, extent, inner) decomposition of `shape` around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that records the branch taken by every ReLU and L1 primitive.
    pub fn recording_pins() -> Self {
        Self {
            nodes: Vec::new(),
            pins: PinMode::Record(Vec::new()),
        }
    }

    /// A tape whose ReLU and L1 primitives follow `pins` instead of the sign
    /// of their inputs. Primitives beyond the recorded ones (or with another
    /// size) evaluate normally.
    pub fn replaying(pins: &Pins) -> Self {
        Self {
            nodes: Vec::new(),
            pins: PinMode::Replay(pins.0.clone(), 0),
        }
    }

    /// Patterns recorded so far; empty unless built by [`Tape::recording_pins`].
    pub fn pins(&self) -> Pins {
        match &self.pins {
            PinMode::Record(p) => Pins(Arc::new(p.clone())),
            _ => Pins::default(),
        }
    }

    /// Stores the pattern computed by `pattern` when recording, or returns
    /// the next replayed pattern if its size is `len`.
    fn pin(&mut self, len: usize, pattern: impl FnOnce(&Self) -> Vec<i8>) -> Option<Vec<i8>> {
        if let PinMode::Record(_) = self.pins {
            let p = pattern(self);
            if let PinMode::Record(all) = &mut self.pins {
                all.push(p);
            }
            return None;
        }
        match &mut self.pins {
            PinMode::Replay(all, next) => {
                let p = all.get(*next).filter(|p| p.len() == len).cloned();
                *next += 1;
                p
            }
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same(name, ta, tb)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(value, op, &[a, b]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddConst(x))
    }

    pub fn mul_const(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::MulConst(x, c))
    }

    /// Multiplies every element of `x` by the single-element tensor `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(Error::shape("scale", self.shape(x), sv.shape()));
        }
        let c = sv.data()[0];
        let value = self.value(x).map(|v| v * c);
        Ok(self.push(value, Op::Scale(x, s), &[x, s]))
    }

    /// Elementwise `x^a`. The exponent shape must be a prefix of the base
    /// shape; each exponent entry applies to the trailing block it indexes.
    ///
    /// The base gradient at `x == 0` is taken as 0 (a subgradient choice that
    /// avoids infinities for `a < 1`), and the exponent gradient there is 0,
    /// the limit of `x^a ln x` for `a > 0`.
    pub fn pow(&mut self, x: Var, a: Var) -> Result<Var> {
        let (tx, ta) = (self.value(x), self.value(a));
        if ta.ndim() > tx.ndim() || tx.shape()[..ta.ndim()] != *ta.shape() {
            return Err(Error::shape("pow", tx.shape(), ta.shape()));
        }
        let inner = tx.len() / ta.len().max(1);
        let mut data = Vec::with_capacity(tx.len());
        for (j, &e) in ta.data().iter().enumerate() {
            let integral = e.fract() == 0.0;
            for &b in &tx.data()[j * inner..(j + 1) * inner] {
                if b < 0.0 && !integral {
                    return Err(Error::Domain {
                        op: "pow",
                        msg: format!("negative base {b} with non-integer exponent {e}"),
                    });
                }
                data.push(if b == 0.0 && e > 0.0 { 0.0 } else { b.powf(e) });
            }
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(value, Op::Pow(x, a), &[x, a]))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, f64::sin, Op::Sin(x))
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, f64::cos, Op::Cos(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let len = self.value(x).len();
        match self.pin(len, |t| {
            t.value(x).data().iter().map(|&v| (v > 0.0) as i8).collect()
        }) {
            Some(p) => {
                let t = self.value(x);
                let data = t
                    .data()
                    .iter()
                    .zip(&p)
                    .map(|(&v, &k)| if k == 1 { v } else { 0.0 })
                    .collect();
                let value = Tensor::from_parts(t.shape().to_vec(), data);
                self.push(value, Op::Relu(x), &[x])
            }
            None => self.unary(x, |v| v.max(0.0), Op::Relu(x)),
        }
    }

    /// GeLU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Sum of all elements as a shape-`[]` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.mul_const(s, 1.0 / n)
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.ndim() {
            return Err(Error::invalid(format!(
                "sum_axis: axis {axis} out of range for shape {:?}",
                t.shape()
            )));
        }
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let d = t.data();
        for o in 0..outer {
            for k in 0..n {
                let src = &d[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::SumAxis { x, axis },
            &[x],
        ))
    }

    /// Mean absolute difference between two equally shaped tensors.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same("l1", ta, tb)?;
        let n = ta.len().max(1) as f64;
        let len = ta.len();
        let pinned = self.pin(len, |t| {
            let (ta, tb) = (t.value(a), t.value(b));
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| sign(x - y))
                .collect()
        });
        let (ta, tb) = (self.value(a), self.value(b));
        let s: f64 = match pinned {
            Some(p) => ta
                .data()
                .iter()
                .zip(tb.data())
                .zip(&p)
                .map(|((x, y), &k)| k as f64 * (x - y))
                .sum(),
            None => ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| (x - y).abs())
                .sum(),
        };
        Ok(self.push(Tensor::scalar(s / n), Op::L1(a, b), &[a, b]))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.ndim() || start > end || end > t.shape()[axis] {
            return Err(Error::invalid(format!(
                "slice: range {start}..{end} on axis {axis} invalid for shape {:?}",
                t.shape()
            )));
        }
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let m = end - start;
        let mut out = Vec::with_capacity(outer * m * inner);
        for o in 0..outer {
            out.extend_from_slice(&t.data()[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = m;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Slice { x, axis, start },
            &[x],
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat: no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat: axis out of range"));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let n = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 2 {
            return Err(Error::shape("transpose", t.shape(), &[0, 0]));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let out = transpose_data(t.data(), r, c);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Stacks `reps` copies of `x` along a new leading axis.
    pub fn tile(&mut self, x: Var, reps: usize) -> Var {
        let t = self.value(x);
        let mut data = Vec::with_capacity(t.len() * reps);
        for _ in 0..reps {
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![reps];
        shape.extend_from_slice(t.shape());
        self.push(Tensor::from_parts(shape, data), Op::Tile(x), &[x])
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::shape("gather", shape, &[index.len()]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= t.len()) {
            return Err(Error::invalid(format!(
                "gather: index {bad} out of range for {} elements",
                t.len()
            )));
        }
        let data = index.iter().map(|&i| t.data()[i]).collect();
        Ok(self.push(
            Tensor::from_parts(shape.to_vec(), data),
            Op::Gather { x, index },
            &[x],
        ))
    }

    /// `out.flat[index[i]] += x.flat[i]`; entries equal to [`DROP`] are discarded.
    pub fn scatter_add(&mut self, x: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.len() != index.len() {
            return Err(Error::shape("scatter_add", t.shape(), &[index.len()]));
        }
        let n: usize = shape.iter().product();
        let mut out = vec![0.0; n];
        for (&i, &v) in index.iter().zip(t.data()) {
            if i == DROP {
                continue;
            }
            if i >= n {
                return Err(Error::invalid(format!(
                    "scatter_add: index {i} out of range for {n} elements"
                )));
            }
            out[i] += v;
        }
        Ok(self.push(
            Tensor::from_parts(shape.to_vec(), out),
            Op::ScatterAdd { x, index },
            &[x],
        ))
    }

    /// Contiguous sub-block of `x` starting at flat `offset`, viewed as `shape`.
    pub(crate) fn part(&mut self, x: Var, offset: usize, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        let data = self.value(x).data()[offset..offset + n].to_vec();
        self.push(
            Tensor::from_parts(shape.to_vec(), data),
            Op::Part { x, offset },
            &[x],
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Backward("empty tape".into()));
        }
        let lt = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Backward("loss is not on this tape".into()))?;
        if lt.value.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                lt.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|d| Tensor::from_parts(n.value.shape().to_vec(), d))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot => *slot = Some(g),
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Vec<f64>>],
        v: Var,
        f: impl Fn(usize, f64) -> f64,
        g: &[f64],
    ) {
        if !self.wants(v) {
            return;
        }
        let contrib = g.iter().enumerate().map(|(i, &gi)| f(i, gi)).collect();
        self.accumulate(grads, v, contrib);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate_with(grads, *b, |_, gi| -gi, g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.accumulate_with(grads, *a, |i, gi| gi * vb[i], g);
                self.accumulate_with(grads, *b, |i, gi| gi * va[i], g);
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                self.accumulate_with(grads, *a, |i, gi| gi / vb[i], g);
                self.accumulate_with(grads, *b, |i, gi| -gi * out[i] / vb[i], g);
            }
            Op::Neg(x) => self.accumulate_with(grads, *x, |_, gi| -gi, g),
            Op::AddConst(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::MulConst(x, c) => self.accumulate_with(grads, *x, |_, gi| gi * c, g),
            Op::Scale(x, s) => {
                let c = val(*s)[0];
                self.accumulate_with(grads, *x, |_, gi| gi * c, g);
                if self.wants(*s) {
                    let vx = val(*x);
                    let gs: f64 = g.iter().zip(vx).map(|(a, b)| a * b).sum();
                    self.accumulate(grads, *s, vec![gs]);
                }
            }
            Op::Pow(x, a) => {
                let (vx, va) = (val(*x), val(*a));
                let inner = vx.len() / va.len().max(1);
                self.accumulate_with(
                    grads,
                    *x,
                    |i, gi| {
                        let b = vx[i];
                        if b == 0.0 {
                            0.0
                        } else {
                            gi * va[i / inner] * out[i] / b
                        }
                    },
                    g,
                );
                if self.wants(*a) {
                    let ga = (0..va.len())
                        .map(|j| {
                            (j * inner..(j + 1) * inner)
                                .filter(|&i| vx[i] > 0.0)
                                .map(|i| g[i] * out[i] * vx[i].ln())
                                .sum()
                        })
                        .collect();
                    self.accumulate(grads, *a, ga);
                }
            }
            Op::Exp(x) => self.accumulate_with(grads, *x, |i, gi| gi * out[i], g),
            Op::Log(x) => {
                let vx = val(*x);
                self.accumulate_with(grads, *x, |i, gi| gi / vx[i], g)
            }
            Op::Sin(x) => {
                let vx = val(*x);
                self.accumulate_with(grads, *x, |i, gi| gi * vx[i].cos(), g)
            }
            Op::Cos(x) => {
                let vx = val(*x);
                self.accumulate_with(grads, *x, |i, gi| -gi * vx[i].sin(), g)
            }
            Op::Sqrt(x) => self.accumulate_with(
                grads,
                *x,
                |i, gi| {
                    if out[i] > 0.0 {
                        gi / (2.0 * out[i])
                    } else {
                        0.0
                    }
                },
                g,
            ),
            Op::Relu(x) => {
                let vx = val(*x);
                self.accumulate_with(grads, *x, |i, gi| if vx[i] > 0.0 { gi } else { 0.0 }, g)
            }
            Op::Gelu(x) => {
                let vx = val(*x);
                self.accumulate_with(grads, *x, |i, gi| gi * gelu_grad(vx[i]), g)
            }
            Op::Sigmoid(x) => {
                self.accumulate_with(grads, *x, |i, gi| gi * out[i] * (1.0 - out[i]), g)
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::SumAxis { x, axis } => {
                let shape = self.nodes[x.0].value.shape();
                let (outer, n, inner) = axis_split(shape, *axis);
                let mut gx = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    for _ in 0..n {
                        gx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::L1(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let n = va.len().max(1) as f64;
                let sign = |i: usize| {
                    let d = va[i] - vb[i];
                    if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                let g0 = g[0] / n;
                if self.wants(*a) {
                    self.accumulate(grads, *a, (0..va.len()).map(|i| g0 * sign(i)).collect());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, (0..va.len()).map(|i| -g0 * sign(i)).collect());
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.nodes[x.0].value.shape();
                let (outer, n, inner) = axis_split(shape, *axis);
                let m = node.value.shape()[*axis];
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    gx[(o * n + start) * inner..(o * n + start + m) * inner]
                        .copy_from_slice(&g[o * m * inner..(o + 1) * m * inner]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Concat { inputs, axis } => {
                let total = node.value.shape()[*axis];
                let (outer, _, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let n = self.nodes[v.0].value.shape()[*axis];
                    if self.wants(v) {
                        let mut gv = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[base..base + n * inner]);
                        }
                        self.accumulate(grads, v, gv);
                    }
                    offset += n;
                }
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                self.accumulate(grads, *x, transpose_data(g, s[0], s[1]));
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Tile(x) => {
                let n = self.nodes[x.0].value.len();
                let mut gx = vec![0.0; n];
                for chunk in g.chunks(n) {
                    gx.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Gather { x, index } => {
                let mut gx = vec![0.0; self.nodes[x.0].value.len()];
                for (&i, &gi) in index.iter().zip(g) {
                    gx[i] += gi;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ScatterAdd { x, index } => {
                let gx = index
                    .iter()
                    .map(|&i| if i == DROP { 0.0 } else { g[i] })
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Part { x, offset } => {
                let mut gx = vec![0.0; self.nodes[x.0].value.len()];
                gx[*offset..offset + g.len()].copy_from_slice(g);
                self.accumulate(grads, *x, gx);
            }
            Op::MatMul(a, b) => conv::matmul_backward(self, *a, *b, g, grads),
            Op::Affine { x, w, b } => conv::affine_backward(self, *x, *w, *b, g, grads),
            Op::Conv2d { x, w, b } => conv::conv2d_backward(self, *x, *w, *b, g, grads),
            Op::Rfft { x, n } => spectral::rfft_backward(self, *x, *n, g, grads),
            Op::Irfft { re, im, n } => spectral::irfft_backward(self, *re, *im, *n, g, grads),
            Op::Bank(op) => op.backward(self, g, grads)?,
        }
        Ok(())
    }
}

pub(crate) fn transpose_data(d: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; d.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = d[r * cols + c];
        }
    }
    out
}
