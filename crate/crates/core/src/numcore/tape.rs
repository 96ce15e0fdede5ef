//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value. Nodes are tracked when
//! any input is tracked; `backward` walks the tape in reverse and only visits
//! tracked nodes. Untracked constants are recorded so their values stay
//! addressable, but never receive gradients.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Below this total incoming weight a node's neighbor mean is the zero vector.
pub const MIN_NEIGHBOR_WEIGHT: f64 = 1e-12;

/// Rows whose L2 norm falls below this cannot be normalized.
pub const MIN_ROW_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    GroupMeanRows(Var, usize),
    Softmax(Var),
    LogSoftmaxRows(Var),
    L2NormalizeRows(Var, Vec<f64>),
    Gather(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    NeighborMean {
        h: Var,
        w: Var,
        src: Vec<usize>,
        dst: Vec<usize>,
        totals: Vec<f64>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    tracked: bool,
}

/// Gradient map produced by a backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn cols_of(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn rows_of(shape: &[usize]) -> usize {
    match shape.len() {
        0 | 1 => 1,
        n => shape[..n - 1].iter().product(),
    }
}

/// `c (m x n) += a (m x k) * b (k x n)` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices sized for the stated dims and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, tracked: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Record a tensor. It participates in backward iff `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let tracked = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, tracked)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// Bind a stored parameter; repeated calls return the same variable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let t = store.get(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    /// Add every bound parameter's gradient into the store, in parameter order.
    pub fn accumulate_into(&self, grads: &Gradients, store: &mut ParamStore) {
        for (p, g) in self.param_grads(grads) {
            store.accumulate(p, &g);
        }
    }

    /// Gradients of the bound parameters, sorted by parameter.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Vec<f64>)> {
        let mut bound: Vec<_> = self.params.iter().map(|(p, v)| (*p, *v)).collect();
        bound.sort_by_key(|(p, _)| *p);
        bound
            .into_iter()
            .filter_map(|(p, v)| grads.get(v).map(|g| (p, g.to_vec())))
            .collect()
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            k as isize,
            1,
            self.value(b),
            n as isize,
            1,
            &mut out,
            0.0,
        );
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), tracked))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let x = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let tracked = self.tracked(a);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), tracked))
    }

    // ---- elementwise binary ----

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let tracked = self.tracked(a) || self.tracked(b);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `x [.., n] + b` with `b` holding `n` values, added to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = cols_of(self.shape(x));
        if self.value(b).len() != n {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(b)));
        }
        let bias = self.value(b);
        let out = self.value(x).iter().enumerate().map(|(i, v)| v + bias[i % n]).collect();
        let tracked = self.tracked(x) || self.tracked(b);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::AddBias(x, b), tracked))
    }

    /// Multiply by a one-element variable.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("scale_by", self.shape(x), self.shape(s)));
        }
        let k = self.value(s)[0];
        let out = self.value(x).iter().map(|v| v * k).collect();
        let tracked = self.tracked(x) || self.tracked(s);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::ScaleBy(x, s), tracked))
    }

    // ---- elementwise unary ----

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).iter().map(|x| f(*x)).collect();
        let tracked = self.tracked(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op, tracked)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, Op::Log(a), f64::ln)
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    // ---- structural ----

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::shape("concat_cols", sa, sb));
        }
        let (m, p, q) = (sa[0], sa[1], sb[1]);
        let (xa, xb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            out.extend_from_slice(&xa[i * p..(i + 1) * p]);
            out.extend_from_slice(&xb[i * q..(i + 1) * q]);
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(vec![m, p + q], out, Op::ConcatCols(a, b), tracked))
    }

    /// Stack 2-D blocks with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        let c = cols_of(self.shape(first));
        let mut out = Vec::new();
        let mut rows = 0;
        let mut tracked = false;
        for &p in parts {
            let s = self.shape(p);
            if cols_of(s) != c {
                return Err(Error::shape("concat_rows", self.shape(first), s));
            }
            rows += rows_of(s);
            tracked |= self.tracked(p);
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(vec![rows, c], out, Op::ConcatRows(parts.to_vec()), tracked))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        let tracked = self.tracked(a);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), tracked))
    }

    /// Flat element gather: `out[i] = x[idx[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if shape.iter().product::<usize>() != idx.len() {
            return Err(Error::shape("gather", shape, &[idx.len()]));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("gather index {bad} out of {n}")));
        }
        let xv = self.value(x);
        let out = idx.iter().map(|&i| xv[i]).collect();
        let tracked = self.tracked(x);
        Ok(self.push(shape.to_vec(), out, Op::Gather(x, idx), tracked))
    }

    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let s = self.shape(x);
        let (r, c) = (rows_of(s), cols_of(s));
        if let Some(bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::invalid(format!("gather_rows index {bad} out of {r}")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in &rows {
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let tracked = self.tracked(x);
        Ok(self.push(vec![rows.len(), c], out, Op::GatherRows(x, rows), tracked))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let tracked = self.tracked(a);
        self.push(vec![1], vec![s], Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let tracked = self.tracked(a);
        self.push(vec![1], vec![s], Op::Mean(a), tracked)
    }

    /// Column means `[m, n] -> [1, n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let (m, n) = (rows_of(s), cols_of(s));
        if m == 0 {
            return Err(Error::invalid("mean_rows over zero rows"));
        }
        let x = self.value(a);
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += x[i * n + j];
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let tracked = self.tracked(a);
        Ok(self.push(vec![1, n], out, Op::MeanRows(a), tracked))
    }

    /// Mean over consecutive groups of `g` rows: `[m, n] -> [m / g, n]`.
    pub fn group_mean_rows(&mut self, a: Var, g: usize) -> Result<Var> {
        let s = self.shape(a);
        let (m, n) = (rows_of(s), cols_of(s));
        if g == 0 || m % g != 0 {
            return Err(Error::shape("group_mean_rows", s, &[g]));
        }
        let x = self.value(a);
        let mut out = vec![0.0; (m / g) * n];
        for i in 0..m {
            let o = (i / g) * n;
            for j in 0..n {
                out[o + j] += x[i * n + j];
            }
        }
        let inv = 1.0 / g as f64;
        for o in &mut out {
            *o *= inv;
        }
        let tracked = self.tracked(a);
        Ok(self.push(vec![m / g, n], out, Op::GroupMeanRows(a, g), tracked))
    }

    // ---- normalizations ----

    /// Softmax over all elements.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax(self.value(a));
        let tracked = self.tracked(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Softmax(a), tracked)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        let n = cols_of(&s);
        let x = self.value(a);
        let mut out = vec![0.0; x.len()];
        for (xr, or) in x.chunks(n).zip(out.chunks_mut(n)) {
            let mx = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + xr.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for (o, v) in or.iter_mut().zip(xr) {
                *o = v - lse;
            }
        }
        let tracked = self.tracked(a);
        self.push(s, out, Op::LogSoftmaxRows(a), tracked)
    }

    /// Divide each row by its L2 norm. Rows with norm below [`MIN_ROW_NORM`] are an error.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let n = cols_of(&s);
        let x = self.value(a);
        let mut norms = Vec::with_capacity(rows_of(&s));
        let mut out = vec![0.0; x.len()];
        for (i, (xr, or)) in x.chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm.is_nan() || norm < MIN_ROW_NORM {
                return Err(Error::invalid(format!("l2_normalize_rows: row {i} has norm {norm:e}")));
            }
            for (o, v) in or.iter_mut().zip(xr) {
                *o = v / norm;
            }
            norms.push(norm);
        }
        let tracked = self.tracked(a);
        Ok(self.push(s, out, Op::L2NormalizeRows(a, norms), tracked))
    }

    /// Weighted mean of incoming neighbor rows.
    ///
    /// Directed edge `e` carries `h[src[e]]` into node `dst[e]` with weight
    /// `w[e]`. Nodes whose total incoming weight is below
    /// [`MIN_NEIGHBOR_WEIGHT`] get the zero vector.
    pub fn neighbor_mean(&mut self, h: Var, w: Var, src: Vec<usize>, dst: Vec<usize>) -> Result<Var> {
        let s = self.shape(h).to_vec();
        let (n, d) = (rows_of(&s), cols_of(&s));
        if src.len() != dst.len() || self.value(w).len() != src.len() {
            return Err(Error::shape("neighbor_mean", &[src.len(), dst.len()], self.shape(w)));
        }
        if let Some(bad) = src.iter().chain(&dst).find(|&&i| i >= n) {
            return Err(Error::invalid(format!("neighbor_mean: node {bad} out of {n}")));
        }
        let (hv, wv) = (self.value(h), self.value(w));
        let mut totals = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for e in 0..src.len() {
            let (u, v, we) = (src[e], dst[e], wv[e]);
            totals[v] += we;
            for k in 0..d {
                out[v * d + k] += we * hv[u * d + k];
            }
        }
        for v in 0..n {
            let row = &mut out[v * d..(v + 1) * d];
            if totals[v] < MIN_NEIGHBOR_WEIGHT {
                row.fill(0.0);
            } else {
                for x in row {
                    *x /= totals[v];
                }
            }
        }
        let tracked = self.tracked(h) || self.tracked(w);
        Ok(self.push(s, out, Op::NeighborMean { h, w, src, dst, totals }, tracked))
    }

    // ---- backward ----

    /// Gradients of a scalar loss with respect to every tracked node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.shape
            )));
        }
        self.backward_seeded(&[(loss, vec![1.0])])
    }

    /// Backward pass from explicit upstream gradients on several outputs.
    pub fn backward_seeded(&self, seeds: &[(Var, Vec<f64>)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut start = 0;
        for (v, g) in seeds {
            let node = &self.nodes[v.0];
            if g.len() != node.value.len() {
                return Err(Error::shape("backward seed", &node.shape, &[g.len()]));
            }
            if !node.tracked {
                continue;
            }
            acc(&mut grads, *v, g);
            start = start.max(v.0 + 1);
        }
        for id in (0..start).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = &node.value;
        let send = |grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>| {
            if self.nodes[v.0].tracked {
                acc(grads, v, &contrib);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.tracked(*a) {
                    // dA = dC * B^T
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, n as isize, 1, self.value(*b), 1, n as isize, &mut da, 0.0);
                    send(grads, *a, da);
                }
                if self.tracked(*b) {
                    // dB = A^T * dC
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a), 1, k as isize, g, n as isize, 1, &mut db, 0.0);
                    send(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                send(grads, *a, g.to_vec());
                send(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(grads, *a, g.to_vec());
                send(grads, *b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.value(*a), self.value(*b));
                send(grads, *a, g.iter().zip(xb).map(|(g, y)| g * y).collect());
                send(grads, *b, g.iter().zip(xa).map(|(g, x)| g * x).collect());
            }
            Op::AddBias(x, b) => {
                send(grads, *x, g.to_vec());
                let n = self.value(*b).len();
                let mut db = vec![0.0; n];
                for (i, gi) in g.iter().enumerate() {
                    db[i % n] += gi;
                }
                send(grads, *b, db);
            }
            Op::Scale(a, c) => send(grads, *a, g.iter().map(|x| c * x).collect()),
            Op::AddScalar(a) => send(grads, *a, g.to_vec()),
            Op::ScaleBy(x, s) => {
                let k = self.value(*s)[0];
                send(grads, *x, g.iter().map(|v| v * k).collect());
                let ds = g.iter().zip(self.value(*x)).map(|(g, x)| g * x).sum();
                send(grads, *s, vec![ds]);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = g.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
                send(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect();
                send(grads, *a, d);
            }
            Op::Exp(a) => send(grads, *a, g.iter().zip(y).map(|(g, e)| g * e).collect()),
            Op::Log(a) => {
                let x = self.value(*a);
                send(grads, *a, g.iter().zip(x).map(|(g, x)| g / x).collect());
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(g, x)| if x >= lo && x <= hi { *g } else { 0.0 })
                    .collect();
                send(grads, *a, d);
            }
            Op::ConcatCols(a, b) => {
                let p = self.nodes[a.0].shape[1];
                let q = self.nodes[b.0].shape[1];
                let m = node.shape[0];
                let mut da = Vec::with_capacity(m * p);
                let mut db = Vec::with_capacity(m * q);
                for row in g.chunks(p + q) {
                    da.extend_from_slice(&row[..p]);
                    db.extend_from_slice(&row[p..]);
                }
                send(grads, *a, da);
                send(grads, *b, db);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    send(grads, *p, g[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (node.shape[0], node.shape[1]);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] = g[i * c + j];
                    }
                }
                send(grads, *a, d);
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.len();
                send(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len();
                send(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::MeanRows(a) => {
                let s = &self.nodes[a.0].shape;
                let (m, n) = (rows_of(s), cols_of(s));
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] = g[j] / m as f64;
                    }
                }
                send(grads, *a, d);
            }
            Op::GroupMeanRows(a, gsize) => {
                let s = &self.nodes[a.0].shape;
                let (m, n) = (rows_of(s), cols_of(s));
                let inv = 1.0 / *gsize as f64;
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let o = (i / gsize) * n;
                    for j in 0..n {
                        d[i * n + j] = g[o + j] * inv;
                    }
                }
                send(grads, *a, d);
            }
            Op::Softmax(a) => {
                let dot: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
                send(grads, *a, g.iter().zip(y).map(|(g, y)| y * (g - dot)).collect());
            }
            Op::LogSoftmaxRows(a) => {
                let n = cols_of(&node.shape);
                let mut d = vec![0.0; g.len()];
                for ((gr, yr), dr) in g.chunks(n).zip(y.chunks(n)).zip(d.chunks_mut(n)) {
                    let gs: f64 = gr.iter().sum();
                    for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *dv = gv - yv.exp() * gs;
                    }
                }
                send(grads, *a, d);
            }
            Op::L2NormalizeRows(a, norms) => {
                let n = cols_of(&node.shape);
                let mut d = vec![0.0; g.len()];
                for (i, ((gr, yr), dr)) in g.chunks(n).zip(y.chunks(n)).zip(d.chunks_mut(n)).enumerate() {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *dv = (gv - yv * dot) / norms[i];
                    }
                }
                send(grads, *a, d);
            }
            Op::Gather(x, idx) => {
                let mut d = vec![0.0; self.nodes[x.0].value.len()];
                for (gi, &i) in g.iter().zip(idx) {
                    d[i] += gi;
                }
                send(grads, *x, d);
            }
            Op::GatherRows(x, rows) => {
                let c = cols_of(&node.shape);
                let mut d = vec![0.0; self.nodes[x.0].value.len()];
                for (r, &i) in rows.iter().enumerate() {
                    for k in 0..c {
                        d[i * c + k] += g[r * c + k];
                    }
                }
                send(grads, *x, d);
            }
            Op::Reshape(a) => send(grads, *a, g.to_vec()),
            Op::NeighborMean { h, w, src, dst, totals } => {
                let d = cols_of(&node.shape);
                let hv = self.value(*h);
                let wv = self.value(*w);
                let mut dh = vec![0.0; hv.len()];
                let mut dw = vec![0.0; wv.len()];
                for e in 0..src.len() {
                    let (u, v) = (src[e], dst[e]);
                    let tot = totals[v];
                    if tot < MIN_NEIGHBOR_WEIGHT {
                        continue;
                    }
                    let gv = &g[v * d..(v + 1) * d];
                    let yv = &y[v * d..(v + 1) * d];
                    let hu = &hv[u * d..(u + 1) * d];
                    let scale = wv[e] / tot;
                    let mut dot = 0.0;
                    for k in 0..d {
                        dh[u * d + k] += scale * gv[k];
                        dot += gv[k] * (hu[k] - yv[k]);
                    }
                    dw[e] += dot / tot;
                }
                send(grads, *h, dh);
                send(grads, *w, dw);
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(cur) => {
            for (c, x) in cur.iter_mut().zip(g) {
                *c += x;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
