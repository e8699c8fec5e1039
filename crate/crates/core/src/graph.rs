//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node that owns its forward
//! value. Nodes are appended in evaluation order, so parents always have
//! smaller indices than their children and walking the node list backwards
//! is a valid reverse topological order.
//!
//! [`Graph::backward`] does not mutate the graph: it returns a fresh
//! [`Gradients`] table each time, so calling it twice on the same loss
//! yields identical gradients.
//!
//! Every operation checks its output for NaN/Inf and fails with
//! [`Error::NonFinite`] instead of letting bad values propagate.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Softplus(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    Sum(Var),
    Mean(Var),
    Square(Var),
    Sqrt(Var),
    L2Norm(Var),
    GatherRows(Var, Vec<usize>),
    SegmentMean(Var, Vec<usize>),
    MeanRows(Var),
    Pick(Var, Vec<usize>),
    Reshape(Var),
    Clamp(Var, f32, f32),
    MaxScalar(Var, f32),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
    needs_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar loss with respect to every node of a graph.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    dims: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; all zeros when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.dims[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.dims[v.0]),
        }
    }
}

fn same_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn is_scalar(t: &Tensor) -> bool {
    t.len() == 1
}

/// Broadcast rule for elementwise binary ops: equal dims, or either side a
/// single element. Returns the dims of the result.
fn broadcast_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.dims() == b.dims() || is_scalar(b) {
        Ok(a.dims().to_vec())
    } else if is_scalar(a) {
        Ok(b.dims().to_vec())
    } else {
        Err(shape_err(op, format!("{:?} vs {:?}", a.dims(), b.dims())))
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, dims: Vec<usize>, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let data: Vec<f32> = if a.dims() == b.dims() {
        a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect()
    } else if is_scalar(b) {
        let y = b.data()[0];
        a.data().iter().map(|x| f(*x, y)).collect()
    } else {
        let x = a.data()[0];
        b.data().iter().map(|y| f(x, *y)).collect()
    };
    Tensor::new(dims, data).expect("broadcast dims are consistent")
}

/// Reduce a gradient to the operand's dims (sums out scalar broadcast).
fn unbroadcast(grad: Tensor, target: &Tensor) -> Tensor {
    if grad.dims() == target.dims() {
        grad
    } else {
        let s = grad.sum_f64() as f32;
        Tensor::new(target.dims().to_vec(), vec![s]).expect("scalar operand")
    }
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let (r, c) = x.as_rows();
    let mut out = vec![0.0f32; r * c];
    for i in 0..r {
        let row = x.row(i);
        let m = row.iter().fold(f32::NEG_INFINITY, |a, b| a.max(*b));
        let exps: Vec<f64> = row.iter().map(|v| libm::exp((*v - m) as f64)).collect();
        let s: f64 = exps.iter().sum();
        for (o, e) in out[i * c..(i + 1) * c].iter_mut().zip(&exps) {
            *o = (e / s) as f32;
        }
    }
    Tensor::new(x.dims().to_vec(), out).expect("same dims")
}

fn lse_rows(x: &Tensor) -> Vec<f32> {
    let (r, _) = x.as_rows();
    (0..r)
        .map(|i| {
            let row = x.row(i);
            let m = row.iter().fold(f32::NEG_INFINITY, |a, b| a.max(*b)) as f64;
            let s: f64 = row.iter().map(|v| libm::exp(*v as f64 - m)).sum();
            (m + libm::log(s)) as f32
        })
        .collect()
}

fn leading_dims(x: &Tensor) -> Vec<usize> {
    let d = x.dims();
    if d.len() <= 1 {
        Vec::new()
    } else {
        d[..d.len() - 1].to_vec()
    }
}

fn check_rows(op: &'static str, x: &Tensor) -> Result<(usize, usize)> {
    if x.rank() == 0 {
        return Err(shape_err(op, "rank-0 operand"));
    }
    Ok(x.as_rows())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    /// Scalar value of `v`.
    pub fn item(&self, v: Var) -> Result<f32> {
        self.value(v).item()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, trainable: false, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, trainable: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node { value, op: Op::Leaf, trainable, needs_grad: trainable });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable input.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Input that gradients do not flow into.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: f32) -> Result<Var> {
        self.constant(Tensor::scalar(v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let dims = broadcast_dims("add", x, y)?;
        let out = zip_broadcast(x, y, dims, |p, q| p + q);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let dims = broadcast_dims("sub", x, y)?;
        let out = zip_broadcast(x, y, dims, |p, q| p - q);
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let dims = broadcast_dims("mul", x, y)?;
        let out = zip_broadcast(x, y, dims, |p, q| p * q);
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// `x[.., c] + bias[c]` for every leading index.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (r, c) = check_rows("add_bias", xv)?;
        if bv.len() != c || bv.rank() != 1 {
            return Err(shape_err("add_bias", format!("bias {:?} for input {:?}", bv.dims(), xv.dims())));
        }
        let mut out = xv.data().to_vec();
        for i in 0..r {
            for (o, b) in out[i * c..(i + 1) * c].iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let out = Tensor::new(xv.dims().to_vec(), out)?;
        self.push("add_bias", out, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        let out = self.value(a).map(|v| v * c);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Result<Var> {
        let out = self.value(a).map(|v| v + c);
        self.push("add_scalar", out, Op::AddScalar(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(libm::expf);
        self.push("exp", out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.data().iter().any(|v| *v < 0.0) {
            return Err(Error::Domain { op: "log" });
        }
        let out = x.map(libm::logf);
        self.push("log", out, Op::Log(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(libm::tanhf);
        self.push("tanh", out, Op::Tanh(a), &[a])
    }

    /// `log(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| {
            let v = v as f64;
            (v.max(0.0) + libm::log1p(libm::exp(-libm::fabs(v)))) as f32
        });
        self.push("softplus", out, Op::Softplus(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        check_rows("softmax", self.value(a))?;
        let out = softmax_rows(self.value(a));
        self.push("softmax", out, Op::Softmax(a), &[a])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (_, c) = check_rows("log_softmax", x)?;
        let lse = lse_rows(x);
        let mut out = x.data().to_vec();
        for (i, l) in lse.iter().enumerate() {
            out[i * c..(i + 1) * c].iter_mut().for_each(|v| *v -= l);
        }
        let out = Tensor::new(x.dims().to_vec(), out)?;
        self.push("log_softmax", out, Op::LogSoftmax(a), &[a])
    }

    /// Log-sum-exp over the last axis; drops that axis.
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        check_rows("log_sum_exp", x)?;
        let out = Tensor::new(leading_dims(x), lse_rows(x))?;
        self.push("log_sum_exp", out, Op::LogSumExp(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum_f64() as f32;
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let s = (x.sum_f64() / x.len() as f64) as f32;
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v * v);
        self.push("square", out, Op::Square(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.data().iter().any(|v| *v < 0.0) {
            return Err(Error::Domain { op: "sqrt" });
        }
        let out = x.map(libm::sqrtf);
        self.push("sqrt", out, Op::Sqrt(a), &[a])
    }

    /// Euclidean norm of all entries. The gradient at the origin is taken
    /// to be zero.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let ss: f64 = self.value(a).data().iter().map(|v| (*v as f64) * (*v as f64)).sum();
        let out = Tensor::scalar(libm::sqrt(ss) as f32);
        self.push("l2_norm", out, Op::L2Norm(a), &[a])
    }

    /// Rows `idx` of `a` (last axis = columns), stacked into `[idx.len(), cols]`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = check_rows("gather_rows", x)?;
        if idx.is_empty() {
            return Err(shape_err("gather_rows", "empty index list"));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(shape_err("gather_rows", format!("row {i} out of range for {r} rows")));
            }
            out.extend_from_slice(x.row(i));
        }
        let out = Tensor::new(vec![idx.len(), c], out)?;
        self.push("gather_rows", out, Op::GatherRows(a, idx.to_vec()), &[a])
    }

    /// Mean of consecutive row segments of lengths `lens`: `[len(lens), cols]`.
    pub fn segment_mean(&mut self, a: Var, lens: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = check_rows("segment_mean", x)?;
        if lens.is_empty() || lens.contains(&0) || lens.iter().sum::<usize>() != r {
            return Err(shape_err("segment_mean", format!("segments {lens:?} do not tile {r} rows")));
        }
        let mut out = Vec::with_capacity(lens.len() * c);
        let mut acc = vec![0.0f64; c];
        let mut start = 0;
        for &l in lens {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for i in start..start + l {
                for (s, v) in acc.iter_mut().zip(x.row(i)) {
                    *s += *v as f64;
                }
            }
            out.extend(acc.iter().map(|s| (*s / l as f64) as f32));
            start += l;
        }
        let out = Tensor::new(vec![lens.len(), c], out)?;
        self.push("segment_mean", out, Op::SegmentMean(a, lens.to_vec()), &[a])
    }

    /// Column means over all rows: `[cols]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = check_rows("mean_rows", x)?;
        let mut acc = vec![0.0f64; c];
        for i in 0..r {
            for (s, v) in acc.iter_mut().zip(x.row(i)) {
                *s += *v as f64;
            }
        }
        let out = Tensor::new(vec![c], acc.iter().map(|s| (*s / r as f64) as f32).collect())?;
        self.push("mean_rows", out, Op::MeanRows(a), &[a])
    }

    /// `a[i, idx[i]]` for every row `i`: `[rows]`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = check_rows("pick", x)?;
        if idx.len() != r {
            return Err(shape_err("pick", format!("{} indices for {r} rows", idx.len())));
        }
        let mut out = Vec::with_capacity(r);
        for (i, &j) in idx.iter().enumerate() {
            if j >= c {
                return Err(shape_err("pick", format!("column {j} out of range for {c} columns")));
            }
            out.push(x.row(i)[j]);
        }
        let out = Tensor::new(vec![r], out)?;
        self.push("pick", out, Op::Pick(a, idx.to_vec()), &[a])
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(dims)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Result<Var> {
        let out = self.value(a).map(|v| v.clamp(lo, hi));
        self.push("clamp", out, Op::Clamp(a, lo, hi), &[a])
    }

    /// Elementwise `max(a, c)`.
    pub fn max_scalar(&mut self, a: Var, c: f32) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(c));
        self.push("max_scalar", out, Op::MaxScalar(a, c), &[a])
    }

    /// Gradient of scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                lv.dims()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::new(lv.dims().to_vec(), vec![1.0])?);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let y = &node.value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].needs_grad {
                        let da = g.matmul(&bv.transpose()?)?;
                        self.accumulate(&mut grads, *a, da)?;
                    }
                    if self.nodes[b.0].needs_grad {
                        let db = av.transpose()?.matmul(&g)?;
                        self.accumulate(&mut grads, *b, db)?;
                    }
                }
                Op::Add(a, b) => {
                    let da = unbroadcast(g.clone(), self.value(*a));
                    let db = unbroadcast(g, self.value(*b));
                    self.accumulate(&mut grads, *a, da)?;
                    self.accumulate(&mut grads, *b, db)?;
                }
                Op::Sub(a, b) => {
                    let da = unbroadcast(g.clone(), self.value(*a));
                    let db = unbroadcast(g.map(|v| -v), self.value(*b));
                    self.accumulate(&mut grads, *a, da)?;
                    self.accumulate(&mut grads, *b, db)?;
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let dims = g.dims().to_vec();
                    let ga = zip_broadcast(&g, bv, dims.clone(), |p, q| p * q);
                    let gb = zip_broadcast(&g, av, dims, |p, q| p * q);
                    self.accumulate(&mut grads, *a, unbroadcast(ga, av))?;
                    self.accumulate(&mut grads, *b, unbroadcast(gb, bv))?;
                }
                Op::AddBias(x, b) => {
                    let (r, c) = g.as_rows();
                    let mut acc = vec![0.0f64; c];
                    for i in 0..r {
                        for (s, v) in acc.iter_mut().zip(g.row(i)) {
                            *s += *v as f64;
                        }
                    }
                    let db = Tensor::new(vec![c], acc.iter().map(|v| *v as f32).collect())?;
                    self.accumulate(&mut grads, *b, db)?;
                    self.accumulate(&mut grads, *x, g)?;
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    self.accumulate(&mut grads, *a, g.map(|v| v * c))?;
                }
                Op::AddScalar(a) => self.accumulate(&mut grads, *a, g)?,
                Op::Exp(a) => {
                    let d = zip_broadcast(&g, y, g.dims().to_vec(), |p, q| p * q);
                    self.accumulate(&mut grads, *a, d)?;
                }
                Op::Log(a) => {
                    let d = zip_broadcast(&g, self.value(*a), g.dims().to_vec(), |p, q| p / q);
                    self.accumulate(&mut grads, *a, d)?;
                }
                Op::Tanh(a) => {
                    let d = zip_broadcast(&g, y, g.dims().to_vec(), |p, t| p * (1.0 - t * t));
                    self.accumulate(&mut grads, *a, d)?;
                }
                Op::Softplus(a) => {
                    let d = zip_broadcast(&g, self.value(*a), g.dims().to_vec(), |p, x| {
                        p * (1.0 / (1.0 + libm::exp(-(x as f64)))) as f32
                    });
                    self.accumulate(&mut grads, *a, d)?;
                }
                Op::Softmax(a) => {
                    let (r, c) = y.as_rows();
                    let mut d = vec![0.0f32; r * c];
                    for i in 0..r {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| *p as f64 * *q as f64).sum();
                        for j in 0..c {
                            d[i * c + j] = (yr[j] as f64 * (gr[j] as f64 - dot)) as f32;
                        }
                    }
                    self.accumulate(&mut grads, *a, Tensor::new(y.dims().to_vec(), d)?)?;
                }
                Op::LogSoftmax(a) => {
                    let (r, c) = y.as_rows();
                    let mut d = vec![0.0f32; r * c];
                    for i in 0..r {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let gs: f64 = gr.iter().map(|v| *v as f64).sum();
                        for j in 0..c {
                            d[i * c + j] = (gr[j] as f64 - libm::exp(yr[j] as f64) * gs) as f32;
                        }
                    }
                    self.accumulate(&mut grads, *a, Tensor::new(y.dims().to_vec(), d)?)?;
                }
                Op::LogSumExp(a) => {
                    let x = self.value(*a);
                    let sm = softmax_rows(x);
                    let (r, c) = x.as_rows();
                    let mut d = sm.into_data();
                    for i in 0..r {
                        let gi = g.data()[i];
                        d[i * c..(i + 1) * c].iter_mut().for_each(|v| *v *= gi);
                    }
                    self.accumulate(&mut grads, *a, Tensor::new(x.dims().to_vec(), d)?)?;
                }
                Op::Sum(a) => {
                    let gv = g.data()[0];
                    let d = Tensor::full(self.value(*a).dims(), gv);
                    self.accumulate(&mut grads, *a, d)?;
                }
                Op::Mean(a) => {
                    let x = self.value(*a);
                    let gv = g.data()[0] / x.len() as f32;
                    self.accumulate(&mut grads, *a, Tensor::full(x.dims(), gv))?;
                }
                Op::Square(a) => {
                    let d = zip_broadcast(&g, self.value(*a), g.dims().to_vec(), |p, x| 2.0 * p * x);
                    self.accumulate(&mut grads, *a, d)?;
                }
                Op::Sqrt(a) => {
                    let d = zip_broadcast(&g, y, g.dims().to_vec(), |p, s| if s > 0.0 { p / (2.0 * s) } else { 0.0 });
                    self.accumulate(&mut grads, *a, d)?;
                }
                Op::L2Norm(a) => {
                    let norm = y.data()[0];
                    let gv = g.data()[0];
                    let x = self.value(*a);
                    let d = if norm > 0.0 { x.map(|v| gv * v / norm) } else { Tensor::zeros(x.dims()) };
                    self.accumulate(&mut grads, *a, d)?;
                }
                Op::GatherRows(a, idx) => {
                    let x = self.value(*a);
                    let (_, c) = x.as_rows();
                    let mut d = vec![0.0f32; x.len()];
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, v) in d[i * c..(i + 1) * c].iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    self.accumulate(&mut grads, *a, Tensor::new(x.dims().to_vec(), d)?)?;
                }
                Op::SegmentMean(a, lens) => {
                    let x = self.value(*a);
                    let (_, c) = x.as_rows();
                    let mut d = vec![0.0f32; x.len()];
                    let mut start = 0;
                    for (s, &l) in lens.iter().enumerate() {
                        let inv = 1.0 / l as f32;
                        for i in start..start + l {
                            for (o, v) in d[i * c..(i + 1) * c].iter_mut().zip(g.row(s)) {
                                *o = v * inv;
                            }
                        }
                        start += l;
                    }
                    self.accumulate(&mut grads, *a, Tensor::new(x.dims().to_vec(), d)?)?;
                }
                Op::MeanRows(a) => {
                    let x = self.value(*a);
                    let (r, c) = x.as_rows();
                    let inv = 1.0 / r as f32;
                    let mut d = vec![0.0f32; x.len()];
                    for i in 0..r {
                        for (o, v) in d[i * c..(i + 1) * c].iter_mut().zip(g.data()) {
                            *o = v * inv;
                        }
                    }
                    self.accumulate(&mut grads, *a, Tensor::new(x.dims().to_vec(), d)?)?;
                }
                Op::Pick(a, idx) => {
                    let x = self.value(*a);
                    let (_, c) = x.as_rows();
                    let mut d = vec![0.0f32; x.len()];
                    for (i, &j) in idx.iter().enumerate() {
                        d[i * c + j] = g.data()[i];
                    }
                    self.accumulate(&mut grads, *a, Tensor::new(x.dims().to_vec(), d)?)?;
                }
                Op::Reshape(a) => {
                    let d = g.reshape(self.value(*a).dims())?;
                    self.accumulate(&mut grads, *a, d)?;
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let d = zip_broadcast(&g, self.value(*a), g.dims().to_vec(), |p, x| {
                        if x >= lo && x <= hi {
                            p
                        } else {
                            0.0
                        }
                    });
                    self.accumulate(&mut grads, *a, d)?;
                }
                Op::MaxScalar(a, c) => {
                    let c = *c;
                    let d = zip_broadcast(&g, self.value(*a), g.dims().to_vec(), |p, x| if x > c { p } else { 0.0 });
                    self.accumulate(&mut grads, *a, d)?;
                }
            }
        }
        let dims = self.nodes.iter().map(|n| n.value.dims().to_vec()).collect();
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].trainable {
                *g = None;
            } else if let Some(t) = g {
                if !t.is_finite() {
                    return Err(Error::NonFinite { op: "backward" });
                }
            }
        }
        Ok(Gradients { grads, dims })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.axpy(1.0, &g)?,
            slot @ None => {
                same_dims("backward", &g, self.value(v))?;
                *slot = Some(g);
            }
        }
        Ok(())
    }
}
