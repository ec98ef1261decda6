//! Array-valued reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive as it is evaluated. Nodes are appended in
//! evaluation order, so the tape is topologically sorted by construction and
//! [`Tape::backward`] is a single reverse sweep.

use super::ops;
use super::Array;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a smaller operand is repeated across a larger one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    /// The operand matches the trailing axes, e.g. a `[d]` bias on `[n×d]` rows.
    Trailing,
    /// The operand matches the leading axes, e.g. a `[c]` scale on `[c×h×w]`.
    Leading,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Abs,
    Square,
    Sqrt,
    Atan,
    Neg,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    BroadcastAdd(Var, Var, Broadcast),
    BroadcastMul(Var, Var, Broadcast),
    Scale(Var, f64),
    Offset(Var, f64),
    Unary(Var, Unary),
    Max(Var, Var),
    Min(Var, Var),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var, Vec<usize>),
    Softmax {
        x: Var,
        axis: usize,
        mask: Option<Array>,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
    },
    AvgPool(Var),
    Upsample(Var, usize),
    LayerNorm(Var, f64),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    Gather(Var, Vec<usize>),
    Detach(Var),
}

struct Node {
    op: Op,
    value: Array,
}

/// Recorded computation. Single owner while recording.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every node of a tape.
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &Array) -> Array {
        self.get(v).cloned().unwrap_or_else(|| Array::zeros(like.shape()))
    }
}

fn broadcast_index(b: Broadcast, i: usize, big: usize, small: usize) -> usize {
    match b {
        Broadcast::Trailing => i % small,
        Broadcast::Leading => i / (big / small),
    }
}

fn check_broadcast(x: &Array, b: &Array, how: Broadcast) -> Result<()> {
    let (xs, bs) = (x.shape(), b.shape());
    let ok = match how {
        _ if b.len() == 1 => true,
        Broadcast::Trailing => bs.len() <= xs.len() && xs[xs.len() - bs.len()..] == *bs,
        Broadcast::Leading => bs.len() <= xs.len() && xs[..bs.len()] == *bs,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Dimension {
            op: "broadcast",
            lhs: xs.to_vec(),
            rhs: bs.to_vec(),
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn unary_forward(f: Unary, x: f64) -> f64 {
    match f {
        Unary::Relu => x.max(0.0),
        Unary::Sigmoid => sigmoid(x),
        Unary::Softplus => softplus(x),
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Abs => x.abs(),
        Unary::Square => x * x,
        Unary::Sqrt => x.sqrt(),
        Unary::Atan => x.atan(),
        Unary::Neg => -x,
    }
}

fn unary_derivative(f: Unary, x: f64, y: f64) -> f64 {
    match f {
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Softplus => sigmoid(x),
        Unary::Exp => y,
        Unary::Log => 1.0 / x,
        Unary::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Unary::Square => 2.0 * x,
        Unary::Sqrt => 0.5 / y,
        Unary::Atan => 1.0 / (1.0 + x * x),
        Unary::Neg => -1.0,
    }
}

/// Evaluates one operation given the values of all earlier nodes.
fn eval<'a>(op: &Op, vals: &dyn Fn(Var) -> &'a Array) -> Result<Array> {
    Ok(match op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::Add(a, b) => vals(*a).zip_map(vals(*b), "add", |x, y| x + y)?,
        Op::Sub(a, b) => vals(*a).zip_map(vals(*b), "sub", |x, y| x - y)?,
        Op::Mul(a, b) => vals(*a).zip_map(vals(*b), "mul", |x, y| x * y)?,
        Op::Div(a, b) => vals(*a).zip_map(vals(*b), "div", |x, y| x / y)?,
        Op::BroadcastAdd(a, b, how) | Op::BroadcastMul(a, b, how) => {
            let (x, bv) = (vals(*a), vals(*b));
            check_broadcast(x, bv, *how)?;
            let add = matches!(op, Op::BroadcastAdd(..));
            let (n, m) = (x.len(), bv.len());
            Array::from_fn(x.shape(), |i| {
                let s = bv.data()[broadcast_index(*how, i, n, m)];
                if add {
                    x.data()[i] + s
                } else {
                    x.data()[i] * s
                }
            })
        }
        Op::Scale(a, c) => vals(*a).map(|x| x * c),
        Op::Offset(a, c) => vals(*a).map(|x| x + c),
        Op::Unary(a, f) => vals(*a).map(|x| unary_forward(*f, x)),
        Op::Max(a, b) => vals(*a).zip_map(vals(*b), "maximum", f64::max)?,
        Op::Min(a, b) => vals(*a).zip_map(vals(*b), "minimum", f64::min)?,
        Op::Clamp(a, lo, hi) => vals(*a).map(|x| x.clamp(*lo, *hi)),
        Op::MatMul(a, b) => ops::matmul(vals(*a), vals(*b))?,
        Op::Transpose(a) => ops::transpose(vals(*a))?,
        Op::Reshape(a, shape) => vals(*a).reshape(shape)?,
        Op::Softmax { x, axis, mask } => ops::masked_softmax(vals(*x), *axis, mask.as_ref())?,
        Op::Conv2d {
            x,
            kernel,
            stride,
            pad,
        } => ops::conv2d(vals(*x), vals(*kernel), *stride, *pad)?,
        Op::AvgPool(a) => ops::global_avg_pool(vals(*a))?,
        Op::Upsample(a, f) => ops::bilinear_upsample(vals(*a), *f)?,
        Op::LayerNorm(a, eps) => ops::layer_norm_rows(vals(*a), *eps),
        Op::Sum(a) => Array::scalar(vals(*a).sum()),
        Op::Mean(a) => {
            let v = vals(*a);
            Array::scalar(v.sum() / v.len() as f64)
        }
        Op::Concat(parts) => {
            let arrays: Vec<&Array> = parts.iter().map(|&p| vals(p)).collect();
            ops::concat0(&arrays)?
        }
        Op::Slice(a, s, e) => ops::slice0(vals(*a), *s, *e)?,
        Op::Gather(a, idx) => {
            let v = vals(*a);
            if let Some(&bad) = idx.iter().find(|&&i| i >= v.len()) {
                return Err(Error::Shape(format!(
                    "gather index {bad} out of range for {} elements",
                    v.len()
                )));
            }
            Array::new(vec![idx.len()], idx.iter().map(|&i| v.data()[i]).collect())?
        }
        Op::Detach(a) => vals(*a).clone(),
    })
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    /// Records an input (parameter, data or constant).
    pub fn leaf(&mut self, value: Array) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Array::scalar(value))
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let value = {
            let nodes = &self.nodes;
            eval(&op, &|v: Var| &nodes[v.0].value)?
        };
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Div(a, b))
    }

    pub fn add_broadcast(&mut self, x: Var, b: Var, how: Broadcast) -> Result<Var> {
        self.record(Op::BroadcastAdd(x, b, how))
    }

    pub fn mul_broadcast(&mut self, x: Var, b: Var, how: Broadcast) -> Result<Var> {
        self.record(Op::BroadcastMul(x, b, how))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.record(Op::Scale(x, c))
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        self.record(Op::Offset(x, c))
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Result<Var> {
        self.record(Op::Unary(x, f))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Softplus)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Abs)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sqrt)
    }

    pub fn atan(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Atan)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Neg)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Max(a, b))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Min(a, b))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.record(Op::Clamp(x, lo, hi))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.record(Op::Reshape(a, shape.to_vec()))
    }

    pub fn masked_softmax(&mut self, x: Var, axis: usize, mask: Option<Array>) -> Result<Var> {
        self.record(Op::Softmax { x, axis, mask })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.masked_softmax(x, axis, None)
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        self.record(Op::Conv2d {
            x,
            kernel,
            stride,
            pad,
        })
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.record(Op::AvgPool(x))
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        self.record(Op::Upsample(x, factor))
    }

    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.record(Op::LayerNorm(x, eps))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Mean(x))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.record(Op::Concat(parts.to_vec()))
    }

    /// Leading-axis range `start..end`.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.record(Op::Slice(x, start, end))
    }

    /// Flat-index gather producing a 1-D array.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        self.record(Op::Gather(x, indices.to_vec()))
    }

    /// Passes the value through and blocks the gradient.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Detach(x))
    }

    /// Re-evaluates every recorded node from the leaf values.
    pub fn replay(&self) -> Result<Vec<Array>> {
        self.replay_with(&[])
    }

    /// Re-evaluates the recorded operations with some leaves replaced.
    /// Constants captured at record time (gather indices, detached
    /// coefficients) stay as recorded.
    pub fn replay_with(&self, overrides: &[(Var, &Array)]) -> Result<Vec<Array>> {
        let mut out: Vec<Array> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let v = match node.op {
                Op::Leaf => match overrides.iter().find(|(v, _)| v.0 == i) {
                    Some((_, value)) if value.shape() == node.value.shape() => (*value).clone(),
                    Some((_, value)) => {
                        return Err(Error::Dimension {
                            op: "replay",
                            lhs: node.value.shape().to_vec(),
                            rhs: value.shape().to_vec(),
                        })
                    }
                    None => node.value.clone(),
                },
                ref op => eval(op, &|v: Var| &out[v.0])?,
            };
            out.push(v);
        }
        Ok(out)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let seed = &self.nodes[output.0].value;
        if seed.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                seed.shape()
            )));
        }
        let mut grads: Vec<Option<Array>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Array::full(seed.shape(), 1.0));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let y = &node.value;
            let val = |v: Var| &self.nodes[v.0].value;
            let mut push = |v: Var, d: Array| accumulate(&mut grads, v, d);
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    push(*a, g.clone());
                    push(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    push(*a, g.clone());
                    push(*b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    push(*a, g.zip_map(val(*b), "mul", |x, y| x * y)?);
                    push(*b, g.zip_map(val(*a), "mul", |x, y| x * y)?);
                }
                Op::Div(a, b) => {
                    let bv = val(*b);
                    push(*a, g.zip_map(bv, "div", |x, y| x / y)?);
                    let t = g.zip_map(y, "div", |x, q| x * q)?;
                    push(*b, t.zip_map(bv, "div", |x, d| -x / d)?);
                }
                Op::BroadcastAdd(a, b, how) | Op::BroadcastMul(a, b, how) => {
                    let (x, bv) = (val(*a), val(*b));
                    let (n, m) = (x.len(), bv.len());
                    let add = matches!(node.op, Op::BroadcastAdd(..));
                    let mut db = vec![0.0; m];
                    let mut dx = Vec::with_capacity(n);
                    for (k, &gk) in g.data().iter().enumerate() {
                        let j = broadcast_index(*how, k, n, m);
                        if add {
                            dx.push(gk);
                            db[j] += gk;
                        } else {
                            dx.push(gk * bv.data()[j]);
                            db[j] += gk * x.data()[k];
                        }
                    }
                    push(*a, Array::from_parts(x.shape().to_vec(), dx));
                    push(*b, Array::from_parts(bv.shape().to_vec(), db));
                }
                Op::Scale(a, c) => push(*a, g.map(|v| v * c)),
                Op::Offset(a, _) => push(*a, g.clone()),
                Op::Detach(_) => {}
                Op::Unary(a, f) => {
                    let x = val(*a);
                    let d = Array::from_fn(x.shape(), |k| {
                        g.data()[k] * unary_derivative(*f, x.data()[k], y.data()[k])
                    });
                    push(*a, d);
                }
                Op::Max(a, b) | Op::Min(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let is_max = matches!(node.op, Op::Max(..));
                    let pick_a = |k: usize| {
                        if is_max {
                            av.data()[k] >= bv.data()[k]
                        } else {
                            av.data()[k] <= bv.data()[k]
                        }
                    };
                    let da = Array::from_fn(av.shape(), |k| if pick_a(k) { g.data()[k] } else { 0.0 });
                    let db = Array::from_fn(bv.shape(), |k| if pick_a(k) { 0.0 } else { g.data()[k] });
                    push(*a, da);
                    push(*b, db);
                }
                Op::Clamp(a, lo, hi) => {
                    let x = val(*a);
                    push(
                        *a,
                        Array::from_fn(x.shape(), |k| {
                            let v = x.data()[k];
                            if v >= *lo && v <= *hi {
                                g.data()[k]
                            } else {
                                0.0
                            }
                        }),
                    );
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    push(*a, ops::matmul(&g, &ops::transpose(bv)?)?);
                    push(*b, ops::matmul(&ops::transpose(av)?, &g)?);
                }
                Op::Transpose(a) => push(*a, ops::transpose(&g)?),
                Op::Reshape(a, _) => push(*a, g.reshape(val(*a).shape())?),
                Op::Softmax { x, axis, .. } => push(*x, ops::softmax_backward(y, &g, *axis)?),
                Op::Conv2d {
                    x,
                    kernel,
                    stride,
                    pad,
                } => {
                    let (dx, dk) = ops::conv2d_backward(val(*x), val(*kernel), *stride, *pad, &g)?;
                    push(*x, dx);
                    push(*kernel, dk);
                }
                Op::AvgPool(a) => {
                    let x = val(*a);
                    let hw = x.shape()[1] * x.shape()[2];
                    push(
                        *a,
                        Array::from_fn(x.shape(), |k| g.data()[k / hw] / hw as f64),
                    );
                }
                Op::Upsample(a, f) => {
                    push(*a, ops::bilinear_upsample_backward(val(*a).shape(), *f, &g)?)
                }
                Op::LayerNorm(a, eps) => push(*a, ops::layer_norm_backward(val(*a), y, &g, *eps)),
                Op::Sum(a) => {
                    let x = val(*a);
                    push(*a, Array::full(x.shape(), g.data()[0]));
                }
                Op::Mean(a) => {
                    let x = val(*a);
                    push(*a, Array::full(x.shape(), g.data()[0] / x.len() as f64));
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = val(p).len();
                        let piece = g.data()[offset..offset + n].to_vec();
                        push(p, Array::from_parts(val(p).shape().to_vec(), piece));
                        offset += n;
                    }
                }
                Op::Slice(a, s, _) => {
                    let x = val(*a);
                    let stride = x.len() / x.shape()[0];
                    let mut d = vec![0.0; x.len()];
                    d[s * stride..s * stride + g.len()].copy_from_slice(g.data());
                    push(*a, Array::from_parts(x.shape().to_vec(), d));
                }
                Op::Gather(a, idx) => {
                    let x = val(*a);
                    let mut d = vec![0.0; x.len()];
                    for (&i, &gv) in idx.iter().zip(g.data()) {
                        d[i] += gv;
                    }
                    push(*a, Array::from_parts(x.shape().to_vec(), d));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Array>], v: Var, d: Array) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(d.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(d),
    }
}
