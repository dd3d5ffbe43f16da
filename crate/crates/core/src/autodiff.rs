//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of a forward pass as a node holding its
//! output value. Nodes are appended in evaluation order, so the node list is
//! already a topological order and [`Graph::backward`] is a single reverse
//! sweep. Graphs are cheap and meant to be rebuilt for every training step.
//!
//! Trainable tensors live in a [`ParamStore`] outside the graph; a graph only
//! references them by [`ParamId`], and the gradient map is keyed the same way.
//!
//! Binary element-wise ops broadcast rank-2 operands along any axis of size 1,
//! so a `[1, n]` bias row can be added to a `[batch, n]` activation.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform Glorot initialization on `[-sqrt(6/(fan_in+fan_out)), +sqrt(...)]`.
    pub fn insert_glorot<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        let t = Tensor::matrix(fan_in, fan_out, data).expect("glorot shape");
        self.insert(name, t)
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.insert(name, Tensor::zeros(rows, cols))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn total_size(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Gradients of a scalar output with respect to every parameter reached.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(Tensor::is_finite)
    }

    /// Element-wise average of several gradient maps over the same parameters.
    pub fn mean(parts: &[Gradients]) -> Result<Gradients> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("mean of zero gradient maps".into()))?;
        let mut map = first.map.clone();
        for g in &parts[1..] {
            for (id, acc) in map.iter_mut() {
                let other = g.map.get(id).ok_or_else(|| {
                    Error::Contract(format!("gradient for parameter {} missing", id.0))
                })?;
                for (a, b) in acc.data_mut().iter_mut().zip(other.data()) {
                    *a += b;
                }
            }
        }
        let inv = 1.0 / parts.len() as f64;
        for t in map.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= inv);
        }
        Ok(Gradients { map })
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Concat(NodeId, NodeId),
    Scale(NodeId, f64),
    Square(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Recip(NodeId),
    Tanh(NodeId),
    Softplus(NodeId),
    ClampMin(NodeId, f64),
    Sum(NodeId),
    Rows(NodeId, Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// A recorded forward computation.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.is_rank2() {
        Ok((t.rows(), t.cols()))
    } else {
        Err(Error::shape(
            op,
            format!("expected rank-2 operand, got {:?}", t.shape()),
        ))
    }
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let (ra, ca) = rank2(op, a)?;
    let (rb, cb) = rank2(op, b)?;
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(ra, rb), dim(ca, cb)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::shape(
            op,
            format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()),
        )),
    }
}

fn broadcast_zip(
    a: &Tensor,
    b: &Tensor,
    rows: usize,
    cols: usize,
    f: impl Fn(f64, f64) -> f64,
) -> Tensor {
    let (ra, ca) = (a.rows(), a.cols());
    let (rb, cb) = (b.rows(), b.cols());
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let ia = if ra == 1 { 0 } else { i };
        let ib = if rb == 1 { 0 } else { i };
        for j in 0..cols {
            let ja = if ca == 1 { 0 } else { j };
            let jb = if cb == 1 { 0 } else { j };
            out.push(f(a.data()[ia * ca + ja], b.data()[ib * cb + jb]));
        }
    }
    Tensor::matrix(rows, cols, out).expect("broadcast shape")
}

/// Sum a `[rows, cols]` gradient down to the shape of a broadcast operand.
fn reduce_to(grad: &Tensor, rows: usize, cols: usize) -> Tensor {
    if grad.rows() == rows && grad.cols() == cols {
        return grad.clone();
    }
    let mut out = Tensor::zeros(rows, cols);
    for i in 0..grad.rows() {
        let oi = if rows == 1 { 0 } else { i };
        for j in 0..grad.cols() {
            let oj = if cols == 1 { 0 } else { j };
            let v = out.get(oi, oj) + grad.get(i, j);
            out.set(oi, oj, v);
        }
    }
    out
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, op: Op, value: Tensor) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "{name} produced a non-finite value"
            )));
        }
        Ok(self.push(op, value))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(Op::Param(id), store.get(id).clone())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (r, c) = broadcast_shape("add", va, vb)?;
        let out = broadcast_zip(va, vb, r, c, |x, y| x + y);
        self.push_checked("add", Op::Add(a, b), out)
    }

    /// `a - b`, recorded as `a + (-1)·b`.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, neg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (r, c) = broadcast_shape("mul", va, vb)?;
        let out = broadcast_zip(va, vb, r, c, |x, y| x * y);
        self.push_checked("mul", Op::Mul(a, b), out)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push_checked("matmul", Op::MatMul(a, b), out)
    }

    /// Column-wise concatenation `[a | b]`; a single-row operand is repeated
    /// to match the other's row count.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (ra, ca) = rank2("concat", va)?;
        let (rb, cb) = rank2("concat", vb)?;
        let rows = match (ra, rb) {
            _ if ra == rb => ra,
            (1, r) | (r, 1) => r,
            _ => {
                return Err(Error::shape(
                    "concat",
                    format!("row counts differ: {:?} vs {:?}", va.shape(), vb.shape()),
                ))
            }
        };
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for i in 0..rows {
            data.extend_from_slice(va.row_slice(if ra == 1 { 0 } else { i }));
            data.extend_from_slice(vb.row_slice(if rb == 1 { 0 } else { i }));
        }
        let out = Tensor::matrix(rows, ca + cb, data)?;
        Ok(self.push(Op::Concat(a, b), out))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let out = self.value(a).map(|x| x * factor);
        self.push_checked("scale", Op::Scale(a, factor), out)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(|x| x * x);
        self.push_checked("square", Op::Square(a), out)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(f64::exp);
        self.push_checked("exp", Op::Exp(a), out)
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Numerical("ln of a non-positive value".into()));
        }
        let out = self.value(a).map(f64::ln);
        self.push_checked("ln", Op::Ln(a), out)
    }

    /// Square root; the derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(Error::Numerical("sqrt of a negative value".into()));
        }
        let out = self.value(a).map(f64::sqrt);
        self.push_checked("sqrt", Op::Sqrt(a), out)
    }

    pub fn recip(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(|x| 1.0 / x);
        self.push_checked("recip", Op::Recip(a), out)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(f64::tanh);
        self.push_checked("tanh", Op::Tanh(a), out)
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(softplus);
        self.push_checked("softplus", Op::Softplus(a), out)
    }

    /// `max(a, floor)`; no gradient flows where the floor is active.
    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> Result<NodeId> {
        let out = self.value(a).map(|x| x.max(floor));
        self.push_checked("clamp_min", Op::ClampMin(a, floor), out)
    }

    /// Sum of all elements as a `[1, 1]` scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().sum();
        self.push_checked("sum", Op::Sum(a), Tensor::scalar(s))
    }

    /// Gather rows of `table` (embedding lookup).
    pub fn rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        let (r, c) = rank2("rows", t)?;
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(Error::Index {
                    what: "table rows",
                    index: i,
                    size: r,
                });
            }
            data.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor::matrix(indices.len(), c, data)?;
        Ok(self.push(Op::Rows(table, indices.to_vec()), out))
    }

    /// Affine map `x·W + b` with a row-broadcast bias.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = self.value(output);
        if out.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::new(out.shape().to_vec(), vec![1.0])?);
        let mut params = Gradients::default();

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut acc = |id: NodeId, contrib: Tensor| match &mut grads[id.0] {
                Some(existing) => {
                    for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(pid) => match params.map.get_mut(pid) {
                    Some(existing) => {
                        for (e, c) in existing.data_mut().iter_mut().zip(g.data()) {
                            *e += c;
                        }
                    }
                    None => {
                        params.map.insert(*pid, g);
                    }
                },
                Op::Add(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    acc(*a, reduce_to(&g, va.rows(), va.cols()));
                    acc(*b, reduce_to(&g, vb.rows(), vb.cols()));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (r, c) = (g.rows(), g.cols());
                    let ga = broadcast_zip(&g, vb, r, c, |x, y| x * y);
                    let gb = broadcast_zip(&g, va, r, c, |x, y| x * y);
                    acc(*a, reduce_to(&ga, va.rows(), va.cols()));
                    acc(*b, reduce_to(&gb, vb.rows(), vb.cols()));
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    acc(*a, g.matmul(&vb.transpose())?);
                    acc(*b, va.transpose().matmul(&g)?);
                }
                Op::Concat(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (ca, cb) = (va.cols(), vb.cols());
                    let rows = g.rows();
                    let mut ga = Vec::with_capacity(rows * ca);
                    let mut gb = Vec::with_capacity(rows * cb);
                    for i in 0..rows {
                        let r = g.row_slice(i);
                        ga.extend_from_slice(&r[..ca]);
                        gb.extend_from_slice(&r[ca..]);
                    }
                    let ga = Tensor::matrix(rows, ca, ga)?;
                    let gb = Tensor::matrix(rows, cb, gb)?;
                    acc(*a, reduce_to(&ga, va.rows(), ca));
                    acc(*b, reduce_to(&gb, vb.rows(), cb));
                }
                Op::Scale(a, f) => acc(*a, g.map(|x| x * f)),
                Op::Square(a) => acc(*a, zip(&g, self.value(*a), |g, x| 2.0 * x * g)),
                Op::Exp(a) => acc(*a, zip(&g, &node.value, |g, y| g * y)),
                Op::Ln(a) => acc(*a, zip(&g, self.value(*a), |g, x| g / x)),
                Op::Sqrt(a) => acc(
                    *a,
                    zip(
                        &g,
                        &node.value,
                        |g, y| if y > 0.0 { 0.5 * g / y } else { 0.0 },
                    ),
                ),
                Op::Recip(a) => acc(*a, zip(&g, &node.value, |g, y| -g * y * y)),
                Op::Tanh(a) => acc(*a, zip(&g, &node.value, |g, y| g * (1.0 - y * y))),
                Op::Softplus(a) => acc(*a, zip(&g, self.value(*a), |g, x| g * sigmoid(x))),
                Op::ClampMin(a, floor) => {
                    let floor = *floor;
                    acc(
                        *a,
                        zip(&g, self.value(*a), |g, x| if x > floor { g } else { 0.0 }),
                    )
                }
                Op::Sum(a) => {
                    let va = self.value(*a);
                    let s = g.data()[0];
                    acc(*a, Tensor::new(va.shape().to_vec(), vec![s; va.numel()])?);
                }
                Op::Rows(table, indices) => {
                    let vt = self.value(*table);
                    let mut gt = Tensor::zeros(vt.rows(), vt.cols());
                    let c = vt.cols();
                    for (r, &i) in indices.iter().enumerate() {
                        let src = g.row_slice(r);
                        let dst = &mut gt.data_mut()[i * c..(i + 1) * c];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    acc(*table, gt);
                }
            }
        }
        Ok(params)
    }
}

fn zip(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g
        .data()
        .iter()
        .zip(x.data())
        .map(|(&a, &b)| f(a, b))
        .collect();
    Tensor::new(g.shape().to_vec(), data).expect("same shape")
}

/// Compare autodiff gradients with central finite differences.
///
/// For each parameter tensor the error is
/// `max_i |analytic_i - numeric_i| / (max_i |numeric_i| + 1e-12)`; the
/// maximum over tensors is returned. `f` must rebuild its graph from the
/// supplied store and be deterministic.
pub fn grad_check<F>(f: F, params: &ParamStore, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    if !(step > 0.0) {
        return Err(Error::Contract(format!(
            "finite-difference step {step} must be > 0"
        )));
    }
    let mut g = Graph::new();
    let out = f(&mut g, params)?;
    let analytic = g.backward(out)?;

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        g.value(out).item()
    };

    let mut worst = 0.0_f64;
    let mut work = params.clone();
    for id in params.ids() {
        let n = params.get(id).numel();
        let zeros = Tensor::new(params.get(id).shape().to_vec(), vec![0.0; n])?;
        let a = analytic.get(id).unwrap_or(&zeros);
        let mut max_diff = 0.0_f64;
        let mut max_num = 0.0_f64;
        for i in 0..n {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + step;
            let fp = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - step;
            let fm = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let num = (fp - fm) / (2.0 * step);
            max_diff = max_diff.max((a.data()[i] - num).abs());
            max_num = max_num.max(num.abs());
        }
        worst = worst.max(max_diff / (max_num + 1e-12));
    }
    Ok(worst)
}

/// Plain gradient descent `p <- p - lr * g` over every parameter.
pub fn sgd_step(params: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::Contract(format!(
            "learning rate {lr} must be finite and >= 0"
        )));
    }
    for id in params.ids() {
        let g = grads.get(id).ok_or_else(|| {
            Error::Contract(format!("no gradient for parameter '{}'", params.name(id)))
        })?;
        if g.shape() != params.get(id).shape() {
            return Err(Error::shape(
                "sgd_step",
                format!(
                    "gradient {:?} vs parameter {:?} for '{}'",
                    g.shape(),
                    params.get(id).shape(),
                    params.name(id)
                ),
            ));
        }
    }
    if lr == 0.0 {
        return Ok(());
    }
    for id in params.ids() {
        let g = grads.get(id).expect("checked above");
        for (p, d) in params.get_mut(id).data_mut().iter_mut().zip(g.data()) {
            *p -= lr * d;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_store(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("x", Tensor::scalar(v));
        (s, id)
    }

    #[test]
    fn forward_values() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::identity(2));
        let v = g.constant(Tensor::column(vec![3.0, 4.0]));
        let y = g.matmul(i2, v).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0]);

        let z = g.constant(Tensor::scalar(0.0));
        let sp = g.softplus(z).unwrap();
        assert!((g.value(sp).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
        let th = g.tanh(z).unwrap();
        assert_eq!(g.value(th).data()[0], 0.0);
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(2, 3));
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        let c = g.constant(Tensor::zeros(3, 2));
        let err = g.add(a, c).unwrap_err();
        assert!(err.to_string().contains("add"), "{err}");
    }

    #[test]
    fn square_gradient() {
        let (s, x) = scalar_store(3.0);
        let mut g = Graph::new();
        let xn = g.param(&s, x);
        let y = g.square(xn).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data()[0], 6.0);
    }

    #[test]
    fn softplus_gradient_at_zero() {
        let (s, x) = scalar_store(0.0);
        let mut g = Graph::new();
        let xn = g.param(&s, x);
        let y = g.softplus(xn).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data()[0], 0.5);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 2));
        assert!(matches!(g.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn reused_parameter_accumulates() {
        // f = x * x via mul (both operands the same node) + x
        let (s, x) = scalar_store(2.0);
        let mut g = Graph::new();
        let a = g.param(&s, x);
        let b = g.param(&s, x);
        let p = g.mul(a, b).unwrap();
        let y = g.add(p, a).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data()[0], 5.0);
    }

    #[test]
    fn sqrt_gradient_is_zero_at_zero() {
        let (s, x) = scalar_store(0.0);
        let mut g = Graph::new();
        let xn = g.param(&s, x);
        let y = g.sqrt(xn).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data()[0], 0.0);
    }

    #[test]
    fn ln_rejects_non_positive() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(0.0));
        assert!(matches!(g.ln(a), Err(Error::Numerical(_))));
    }

    #[test]
    fn linear_function_grad_check_exact() {
        let mut s = ParamStore::new();
        let w = s.insert("w", Tensor::matrix(2, 1, vec![0.3, -1.2]).unwrap());
        let x = Tensor::matrix(3, 2, vec![1.0, 2.0, -1.0, 0.5, 0.0, 4.0]).unwrap();
        for step in [1e-2, 1e-5, 1.0] {
            let err = grad_check(
                |g, st| {
                    let xn = g.constant(x.clone());
                    let wn = g.param(st, w);
                    let y = g.matmul(xn, wn)?;
                    g.sum(y)
                },
                &s,
                step,
            )
            .unwrap();
            assert!(err < 1e-10, "step {step}: {err}");
        }
    }

    #[test]
    fn quadratic_form_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        let x = s.insert_glorot("x", 4, 1, &mut rng);
        let a = Tensor::matrix(
            4,
            4,
            vec![
                2.0, 0.5, 0.0, 0.1, 0.5, 3.0, 0.2, 0.0, 0.0, 0.2, 1.0, 0.3, 0.1, 0.0, 0.3, 4.0,
            ],
        )
        .unwrap();
        let err = grad_check(
            |g, st| {
                let xn = g.param(st, x);
                let an = g.constant(a.clone());
                let ax = g.matmul(an, xn)?;
                let xax = g.mul(xn, ax)?;
                g.sum(xax)
            },
            &s,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn sgd_arithmetic() {
        let (mut s, x) = scalar_store(1.0);
        let mut grads = Gradients::default();
        grads.map.insert(x, Tensor::scalar(2.0));
        sgd_step(&mut s, &grads, 0.1).unwrap();
        assert!((s.get(x).data()[0] - 0.8).abs() < 1e-15);

        grads.map.insert(x, Tensor::scalar(0.0));
        sgd_step(&mut s, &grads, 0.1).unwrap();
        assert!((s.get(x).data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_missing_gradient_is_contract_error() {
        let (mut s, _) = scalar_store(1.0);
        s.insert("y", Tensor::scalar(1.0));
        let mut grads = Gradients::default();
        grads.map.insert(ParamId(0), Tensor::scalar(1.0));
        assert!(matches!(
            sgd_step(&mut s, &grads, 0.1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn sgd_on_convex_quadratic_approaches_minimizer() {
        // f(x) = sum((x - c)^2), minimizer x = c.
        let c = Tensor::row(vec![1.5, -2.0, 0.25]);
        let mut s = ParamStore::new();
        let x = s.insert("x", Tensor::row(vec![0.0, 0.0, 0.0]));
        let dist = |s: &ParamStore| {
            s.get(x)
                .data()
                .iter()
                .zip(c.data())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let mut prev = dist(&s);
        for _ in 0..100 {
            let mut g = Graph::new();
            let xn = g.param(&s, x);
            let cn = g.constant(c.clone());
            let d = g.sub(xn, cn).unwrap();
            let sq = g.square(d).unwrap();
            let f = g.sum(sq).unwrap();
            let grads = g.backward(f).unwrap();
            sgd_step(&mut s, &grads, 0.1).unwrap();
            let now = dist(&s);
            assert!(now < prev);
            prev = now;
        }
        assert!(prev < 1e-8);
    }

    #[test]
    fn broadcast_gradients_reduce() {
        let mut s = ParamStore::new();
        let b = s.insert("b", Tensor::row(vec![0.1, 0.2]));
        let col = s.insert("c", Tensor::column(vec![1.0, 2.0, 3.0]));
        let x = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let err = grad_check(
            |g, st| {
                let xn = g.constant(x.clone());
                let bn = g.param(st, b);
                let cn = g.param(st, col);
                let y = g.add(xn, bn)?;
                let y = g.mul(y, cn)?;
                let y = g.tanh(y)?;
                g.sum(y)
            },
            &s,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
