//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its variables and replays
//! them backwards in [`Tape::backward`]. Parameters are borrowed from a
//! [`ParameterStore`] rather than copied, so building a tape per sample is
//! cheap.
//!
//! Non-smooth operations (absolute value, rectifiers, clamps, minima, max
//! pooling) and any externally computed combinatorial structure (for example
//! persistence pairings) record the branch they took in a decision log. A tape
//! created with [`Tape::replaying`] re-uses a recorded log, which evaluates the
//! function on the same smooth piece. Finite-difference checks rely on this.
//!
//! Every reduction across the vertex axis sums its terms in sorted order, so
//! results depend only on the multiset of summands.

use std::any::Any;
use std::sync::Arc;

use super::params::{Gradients, ParamId, ParameterStore};
use super::tensor::{canonical_sum, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    /// Handle to the `i`-th node of a tape.
    pub fn from_index(i: usize) -> Self {
        Var(i)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Reduce over rows (one result per column).
    Rows,
    /// Reduce over columns (one result per row).
    Cols,
}

/// A branch decision recorded by a non-smooth operation.
#[derive(Clone)]
pub enum Decision {
    Mask(Vec<bool>),
    Index(Vec<usize>),
    Ternary(Vec<u8>),
    Opaque(Arc<dyn Any + Send + Sync>),
}

impl std::fmt::Debug for Decision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Decision::Mask(m) => write!(f, "Mask({})", m.len()),
            Decision::Index(m) => write!(f, "Index({})", m.len()),
            Decision::Ternary(m) => write!(f, "Ternary({})", m.len()),
            Decision::Opaque(_) => write!(f, "Opaque"),
        }
    }
}

enum Log {
    Record(Vec<Decision>),
    Replay { log: Arc<Vec<Decision>>, cursor: usize },
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Recip(Var),
    Sqrt(Var),
    /// Piecewise-linear unary op: y = x * slope(x) with the slope frozen per element.
    Piecewise(Var, Vec<f64>),
    Clamp(Var, Vec<u8>),
    Minimum(Var, Var, Vec<bool>),
    SumAll(Var),
    Sum(Var, Axis),
    MaxRows(Var, Vec<usize>),
    Softmax(Var, Axis),
    LogSoftmaxCols(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    SegmentSoftmax(Var, Vec<usize>),
    PlaceBlocks(Var, Vec<(usize, usize, usize)>),
    GatherElems(Var, Vec<Option<usize>>),
    BlockScale(Var, Var, usize),
    BlockCombine(Var, Var, usize),
    BatchedRowMatmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    /// Whether any parameter reaches this node.
    needs: bool,
}

pub struct Tape<'s> {
    store: &'s ParameterStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    log: Log,
}

fn bcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

#[inline]
fn bidx(r: usize, c: usize, rows: usize, cols: usize) -> usize {
    let rr = if rows == 1 { 0 } else { r };
    let cc = if cols == 1 { 0 } else { c };
    rr * cols + cc
}

/// Lexicographic order of two rows under `total_cmp`. Summing rows in this
/// order makes the sum depend only on the multiset of rows.
fn row_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aik = a[i * k + p];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParameterStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(512),
            param_vars: vec![None; store.len()],
            log: Log::Record(Vec::new()),
        }
    }

    /// A tape that re-uses the branch decisions recorded by another tape.
    pub fn replaying(store: &'s ParameterStore, log: Arc<Vec<Decision>>) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(512),
            param_vars: vec![None; store.len()],
            log: Log::Replay { log, cursor: 0 },
        }
    }

    pub fn store(&self) -> &'s ParameterStore {
        self.store
    }

    /// The decisions recorded so far (empty for a replaying tape).
    pub fn decisions(&self) -> Vec<Decision> {
        match &self.log {
            Log::Record(v) => v.clone(),
            Log::Replay { log, .. } => log.as_ref().clone(),
        }
    }

    pub fn is_replaying(&self) -> bool {
        matches!(self.log, Log::Replay { .. })
    }

    /// Returns the recorded decision when replaying, otherwise computes,
    /// records and returns a fresh one.
    pub fn decide(&mut self, compute: impl FnOnce() -> Decision) -> Decision {
        match &mut self.log {
            Log::Record(v) => {
                let d = compute();
                v.push(d.clone());
                d
            }
            Log::Replay { log, cursor } => {
                let d = log
                    .get(*cursor)
                    .cloned()
                    .expect("decision log exhausted during replay");
                *cursor += 1;
                d
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.tensor(*id),
            _ => unreachable!("node without value"),
        }
    }

    #[inline]
    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs
    }

    fn op_needs(&self, op: &Op) -> bool {
        match op {
            Op::Leaf => false,
            Op::Param(_) => true,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Minimum(a, b, _)
            | Op::BlockScale(a, b, _)
            | Op::BlockCombine(a, b, _)
            | Op::BatchedRowMatmul(a, b) => self.needs(*a) || self.needs(*b),
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.iter().any(|&p| self.needs(p)),
            Op::Neg(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Square(x)
            | Op::Recip(x)
            | Op::Sqrt(x)
            | Op::Piecewise(x, _)
            | Op::Clamp(x, _)
            | Op::SumAll(x)
            | Op::Sum(x, _)
            | Op::MaxRows(x, _)
            | Op::Softmax(x, _)
            | Op::LogSoftmaxCols(x)
            | Op::SliceCols(x, _)
            | Op::SliceRows(x, _)
            | Op::GatherRows(x, _)
            | Op::ScatterAddRows(x, _)
            | Op::SegmentSoftmax(x, _)
            | Op::PlaceBlocks(x, _)
            | Op::GatherElems(x, _)
            | Op::Transpose(x)
            | Op::Reshape(x) => self.needs(*x),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs = self.op_needs(&op);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id] = Some(v);
        v
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(Error::shape(format!("matmul {n}x{k} by {k2}x{m}")));
        }
        let mut out = vec![0.0; n * m];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        Ok(self.push(Tensor::new(n, m, out)?, Op::MatMul(a, b)))
    }

    /// `x W + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    fn binary(&mut self, a: Var, b: Var, kind: u8) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        let (r, c) = match (bcast_dim(ra, rb), bcast_dim(ca, cb)) {
            (Some(r), Some(c)) => (r, c),
            _ => {
                return Err(Error::shape(format!(
                    "cannot broadcast {ra}x{ca} with {rb}x{cb}"
                )))
            }
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let f = |x: f64, y: f64| match kind {
            0 => x + y,
            1 => x - y,
            _ => x * y,
        };
        let data: Vec<f64> = if ra == rb && ca == cb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut d = Vec::with_capacity(r * c);
            for i in 0..r {
                for j in 0..c {
                    d.push(f(av[bidx(i, j, ra, ca)], bv[bidx(i, j, rb, cb)]));
                }
            }
            d
        };
        let op = match kind {
            0 => Op::Add(a, b),
            1 => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        Ok(self.push(Tensor::new(r, c, data)?, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 1)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 2)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let (r, c) = t.shape();
        self.push(Tensor::new(r, c, data).expect("shape preserved"), op)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / v, Op::Recip(x))
    }

    /// Square root with a zero subgradient at the origin.
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0).sqrt(), Op::Sqrt(x))
    }

    fn piecewise(&mut self, x: Var, slope_of: impl Fn(f64) -> f64) -> Var {
        let n = self.value(x).len();
        let vals: Vec<f64> = self.value(x).data().to_vec();
        let d = self.decide(|| Decision::Mask(vals.iter().map(|&v| v >= 0.0).collect()));
        let mask = match d {
            Decision::Mask(m) if m.len() == n => m,
            other => panic!("decision mismatch in piecewise op: {other:?}"),
        };
        let slopes: Vec<f64> = mask
            .iter()
            .map(|&pos| slope_of(if pos { 1.0 } else { -1.0 }))
            .collect();
        let t = self.value(x);
        let (r, c) = t.shape();
        let data = t.data().iter().zip(&slopes).map(|(v, s)| v * s).collect();
        self.push(Tensor::new(r, c, data).expect("shape"), Op::Piecewise(x, slopes))
    }

    pub fn leaky_relu(&mut self, x: Var, negative_slope: f64) -> Var {
        self.piecewise(x, |sign| if sign > 0.0 { 1.0 } else { negative_slope })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.piecewise(x, |sign| if sign > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.piecewise(x, |sign| sign)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let vals: Vec<f64> = self.value(x).data().to_vec();
        let d = self.decide(|| {
            Decision::Ternary(
                vals.iter()
                    .map(|&v| if v < lo { 0 } else if v > hi { 2 } else { 1 })
                    .collect(),
            )
        });
        let state = match d {
            Decision::Ternary(s) if s.len() == vals.len() => s,
            other => panic!("decision mismatch in clamp: {other:?}"),
        };
        let (r, c) = self.shape(x);
        let data = vals
            .iter()
            .zip(&state)
            .map(|(&v, &s)| match s {
                0 => lo,
                2 => hi,
                _ => v,
            })
            .collect();
        self.push(Tensor::new(r, c, data).expect("shape"), Op::Clamp(x, state))
    }

    /// Element-wise minimum of two equally shaped tensors.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("minimum needs equal shapes"));
        }
        let av = self.value(a).data().to_vec();
        let bv = self.value(b).data().to_vec();
        let d = self.decide(|| Decision::Mask(av.iter().zip(&bv).map(|(x, y)| x <= y).collect()));
        let mask = match d {
            Decision::Mask(m) if m.len() == av.len() => m,
            other => panic!("decision mismatch in minimum: {other:?}"),
        };
        let (r, c) = self.shape(a);
        let data = mask
            .iter()
            .zip(av.iter().zip(&bv))
            .map(|(&m, (&x, &y))| if m { x } else { y })
            .collect();
        Ok(self.push(Tensor::new(r, c, data)?, Op::Minimum(a, b, mask)))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut vals = self.value(x).data().to_vec();
        let s = canonical_sum(&mut vals);
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    pub fn sum(&mut self, x: Var, axis: Axis) -> Var {
        let t = self.value(x);
        let (r, c) = t.shape();
        let out = match axis {
            Axis::Rows => {
                let mut buf = vec![0.0; r];
                let data = (0..c)
                    .map(|j| {
                        for i in 0..r {
                            buf[i] = t.get(i, j);
                        }
                        canonical_sum(&mut buf)
                    })
                    .collect();
                Tensor::new(1, c, data).expect("shape")
            }
            Axis::Cols => {
                let data = (0..r).map(|i| t.row(i).iter().sum()).collect();
                Tensor::new(r, 1, data).expect("shape")
            }
        };
        self.push(out, Op::Sum(x, axis))
    }

    /// Column-wise maximum over rows, producing a `1 x c` row.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if r == 0 {
            return Err(Error::shape("max over zero rows"));
        }
        let t = self.value(x).clone();
        let d = self.decide(|| {
            Decision::Index(
                (0..c)
                    .map(|j| {
                        let mut best = 0;
                        for i in 1..r {
                            if t.get(i, j) > t.get(best, j) {
                                best = i;
                            }
                        }
                        best
                    })
                    .collect(),
            )
        });
        let arg = match d {
            Decision::Index(a) if a.len() == c => a,
            other => panic!("decision mismatch in max_rows: {other:?}"),
        };
        let data = (0..c).map(|j| t.get(arg[j], j)).collect();
        Ok(self.push(Tensor::new(1, c, data)?, Op::MaxRows(x, arg)))
    }

    pub fn softmax(&mut self, x: Var, axis: Axis) -> Var {
        let t = self.value(x).clone();
        let out = softmax_tensor(&t, axis);
        self.push(out, Op::Softmax(x, axis))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_cols(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = t.shape();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = t.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|v| v - lse));
        }
        self.push(Tensor::new(r, c, data).expect("shape"), Op::LogSoftmaxCols(x))
    }

    // ---- structural -----------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.shape(parts[0]).0;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pr != r {
                return Err(Error::shape(format!("concat_cols rows {pr} vs {r}")));
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        Ok(self.push(Tensor::new(r, total, data)?, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.shape(parts[0]).1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pc != c {
                return Err(Error::shape(format!("concat_rows cols {pc} vs {c}")));
            }
            rows += pr;
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Tensor::new(rows, c, data)?, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + len > c {
            return Err(Error::shape(format!("slice_cols {start}+{len} of {c}")));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        Ok(self.push(Tensor::new(r, len, data)?, Op::SliceCols(x, start)))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + len > r {
            return Err(Error::shape(format!("slice_rows {start}+{len} of {r}")));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        Ok(self.push(Tensor::new(len, c, data)?, Op::SliceRows(x, start)))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, _) = self.shape(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape(format!("gather row {bad} of {r}")));
        }
        let out = self.value(x).select_rows(idx);
        Ok(self.push(out, Op::GatherRows(x, idx.to_vec())))
    }

    /// Sums row `i` of `x` into row `idx[i]` of an `n`-row output.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], n: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if idx.len() != r || idx.iter().any(|&i| i >= n) {
            return Err(Error::shape("scatter_add_rows index mismatch"));
        }
        let t = self.value(x);
        let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, &d) in idx.iter().enumerate() {
            buckets[d].push(i);
        }
        let mut data = vec![0.0; n * c];
        for (d, members) in buckets.iter_mut().enumerate() {
            if members.len() > 2 {
                members.sort_unstable_by(|&x, &y| row_cmp(t.row(x), t.row(y)));
            }
            let dst = &mut data[d * c..(d + 1) * c];
            for &i in members.iter() {
                for (o, v) in dst.iter_mut().zip(t.row(i)) {
                    *o += v;
                }
            }
        }
        Ok(self.push(Tensor::new(n, c, data)?, Op::ScatterAddRows(x, idx.to_vec())))
    }

    /// Softmax of a column vector within the groups given by `seg`.
    pub fn segment_softmax(&mut self, x: Var, seg: &[usize], n: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if c != 1 || seg.len() != r || seg.iter().any(|&s| s >= n) {
            return Err(Error::shape("segment_softmax expects an E x 1 input"));
        }
        let t = self.value(x).data().to_vec();
        let mut maxes = vec![f64::NEG_INFINITY; n];
        for (v, &s) in t.iter().zip(seg) {
            maxes[s] = maxes[s].max(*v);
        }
        let ex: Vec<f64> = t.iter().zip(seg).map(|(v, &s)| (v - maxes[s]).exp()).collect();
        let mut groups: Vec<Vec<f64>> = vec![Vec::new(); n];
        for (e, &s) in ex.iter().zip(seg) {
            groups[s].push(*e);
        }
        let denom: Vec<f64> = groups.iter_mut().map(|g| canonical_sum(g)).collect();
        let data = ex.iter().zip(seg).map(|(e, &s)| e / denom[s]).collect();
        Ok(self.push(Tensor::new(r, 1, data)?, Op::SegmentSoftmax(x, seg.to_vec())))
    }

    /// Writes rows of `src` into a zero `rows x cols` output: each entry
    /// `(src_row, dst_row, dst_col)` adds the whole source row at that offset.
    pub fn place_blocks(
        &mut self,
        src: Var,
        entries: &[(usize, usize, usize)],
        rows: usize,
        cols: usize,
    ) -> Result<Var> {
        let (sr, w) = self.shape(src);
        for &(s, d, off) in entries {
            if s >= sr || d >= rows || off + w > cols {
                return Err(Error::shape("place_blocks entry out of range"));
            }
        }
        let t = self.value(src);
        let mut by_row: Vec<Vec<(usize, usize)>> = vec![Vec::new(); rows];
        for &(s, d, off) in entries {
            by_row[d].push((off, s));
        }
        let mut data = vec![0.0; rows * cols];
        let mut buf = Vec::new();
        for (d, group) in by_row.iter_mut().enumerate() {
            group.sort_unstable();
            let mut i = 0;
            while i < group.len() {
                let off = group[i].0;
                let mut j = i;
                while j < group.len() && group[j].0 == off {
                    j += 1;
                }
                buf.clear();
                buf.extend(group[i..j].iter().map(|&(_, s)| s));
                if buf.len() > 2 {
                    buf.sort_unstable_by(|&x, &y| row_cmp(t.row(x), t.row(y)));
                }
                let dst = &mut data[d * cols + off..d * cols + off + w];
                for &s in &buf {
                    for (o, v) in dst.iter_mut().zip(t.row(s)) {
                        *o += v;
                    }
                }
                i = j;
            }
        }
        Ok(self.push(
            Tensor::new(rows, cols, data)?,
            Op::PlaceBlocks(src, entries.to_vec()),
        ))
    }

    /// Builds a `rows x cols` tensor whose elements are picked from the
    /// flattened `src` (or equal `fill` where the pick is `None`).
    pub fn gather_elems(
        &mut self,
        src: Var,
        picks: &[Option<usize>],
        fill: f64,
        rows: usize,
        cols: usize,
    ) -> Result<Var> {
        let n = self.value(src).len();
        if picks.len() != rows * cols || picks.iter().flatten().any(|&p| p >= n) {
            return Err(Error::shape("gather_elems picks mismatch"));
        }
        let s = self.value(src).data();
        let data = picks.iter().map(|p| p.map_or(fill, |i| s[i])).collect();
        Ok(self.push(Tensor::new(rows, cols, data)?, Op::GatherElems(src, picks.to_vec())))
    }

    /// `out[j, p*d + c] = s[j, p] * x[j, p*d + c]`.
    pub fn block_scale(&mut self, x: Var, s: Var, d: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        let (sr, p) = self.shape(s);
        if sr != r || p * d != c {
            return Err(Error::shape(format!("block_scale {r}x{c} by {sr}x{p} blocks of {d}")));
        }
        let xv = self.value(x).data();
        let sv = self.value(s).data();
        let mut data = Vec::with_capacity(r * c);
        for j in 0..r {
            for b in 0..p {
                let f = sv[j * p + b];
                data.extend(xv[j * c + b * d..j * c + (b + 1) * d].iter().map(|v| v * f));
            }
        }
        Ok(self.push(Tensor::new(r, c, data)?, Op::BlockScale(x, s, d)))
    }

    /// `out[j, c] = sum_p w[0, p] * y[j, p*d + c]`.
    pub fn block_combine(&mut self, y: Var, w: Var, d: usize) -> Result<Var> {
        let (r, c) = self.shape(y);
        let (wr, p) = self.shape(w);
        if wr != 1 || p * d != c {
            return Err(Error::shape("block_combine shape mismatch"));
        }
        let yv = self.value(y).data();
        let wv = self.value(w).data();
        let mut data = vec![0.0; r * d];
        for j in 0..r {
            for b in 0..p {
                let f = wv[b];
                for k in 0..d {
                    data[j * d + k] += f * yv[j * c + b * d + k];
                }
            }
        }
        Ok(self.push(Tensor::new(r, d, data)?, Op::BlockCombine(y, w, d)))
    }

    /// Row `p` of `x` (`P x k`) multiplies block `p` of `w` (`k x P*m`).
    pub fn batched_row_matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (p, k) = self.shape(x);
        let (k2, pm) = self.shape(w);
        if k != k2 || p == 0 || pm % p != 0 {
            return Err(Error::shape("batched_row_matmul shape mismatch"));
        }
        let m = pm / p;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut data = vec![0.0; p * m];
        for b in 0..p {
            for i in 0..k {
                let xi = xv[b * k + i];
                let wrow = &wv[i * pm + b * m..i * pm + (b + 1) * m];
                for (o, wv) in data[b * m..(b + 1) * m].iter_mut().zip(wrow) {
                    *o += xi * wv;
                }
            }
        }
        Ok(self.push(Tensor::new(p, m, data)?, Op::BatchedRowMatmul(x, w)))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x).transpose();
        self.push(t, Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(x);
        if t.len() != rows * cols {
            return Err(Error::shape(format!("reshape {:?} to {rows}x{cols}", t.shape())));
        }
        let t = Tensor::new(rows, cols, t.data().to_vec())?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    // ---- backward -------------------------------------------------------

    /// Back-propagates from the scalar `loss` and adds parameter gradients
    /// into `grads`.
    pub fn backward_into(&self, loss: Var, grads: &mut Gradients) -> Result<()> {
        let all = self.backward_all(loss)?;
        for (id, slot) in self.param_vars.iter().enumerate() {
            if let Some(v) = slot {
                if let Some(g) = &all[v.0] {
                    for (a, b) in grads.get_mut(id).iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let mut g = Gradients::zeros_like(self.store);
        self.backward_into(loss, &mut g)?;
        Ok(g)
    }

    /// Gradient of `loss` with respect to every node (None when unreached).
    pub fn backward_all(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::shape("backward needs a 1x1 loss"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = self.value(Var(i));
        let (r, c) = out.shape();
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].needs {
                    let n = self.value(v).len();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.shape(*a);
                let m = c;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = acc!(*a) {
                    for ii in 0..n {
                        let grow = &g[ii * m..(ii + 1) * m];
                        let garow = &mut ga[ii * k..(ii + 1) * k];
                        for (p, gap) in garow.iter_mut().enumerate() {
                            let brow = &bv[p * m..(p + 1) * m];
                            *gap += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                let Some(gb) = acc!(*b) else { return };
                for ii in 0..n {
                    let grow = &g[ii * m..(ii + 1) * m];
                    for p in 0..k {
                        let aik = av[ii * k + p];
                        if aik == 0.0 {
                            continue;
                        }
                        for (o, gv) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                            *o += aik * gv;
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (ra, ca) = self.shape(*a);
                let (rb, cb) = self.shape(*b);
                let kind = match node.op {
                    Op::Add(..) => 0,
                    Op::Sub(..) => 1,
                    _ => 2,
                };
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if (ra, ca) == (rb, cb) {
                    if let Some(ga) = acc!(*a) {
                        match kind {
                            2 => ga.iter_mut().zip(g).zip(bv).for_each(|((o, gv), y)| *o += gv * y),
                            _ => ga.iter_mut().zip(g).for_each(|(o, gv)| *o += gv),
                        }
                    }
                    let Some(gb) = acc!(*b) else { return };
                    match kind {
                        0 => gb.iter_mut().zip(g).for_each(|(o, gv)| *o += gv),
                        1 => gb.iter_mut().zip(g).for_each(|(o, gv)| *o -= gv),
                        _ => gb.iter_mut().zip(g).zip(av).for_each(|((o, gv), x)| *o += gv * x),
                    }
                    return;
                }
                if let Some(ga) = acc!(*a) {
                    for ii in 0..r {
                        for j in 0..c {
                            let gv = g[ii * c + j];
                            let d = if kind == 2 { bv[bidx(ii, j, rb, cb)] } else { 1.0 };
                            ga[bidx(ii, j, ra, ca)] += gv * d;
                        }
                    }
                }
                let Some(gb) = acc!(*b) else { return };
                for ii in 0..r {
                    for j in 0..c {
                        let gv = g[ii * c + j];
                        let d = match kind {
                            0 => 1.0,
                            1 => -1.0,
                            _ => av[bidx(ii, j, ra, ca)],
                        };
                        gb[bidx(ii, j, rb, cb)] += gv * d;
                    }
                }
            }
            Op::Neg(x) => {
                let Some(gx) = acc!(*x) else { return };
                for (a, b) in gx.iter_mut().zip(g) {
                    *a -= b;
                }
            }
            Op::Scale(x, s) => {
                let Some(gx) = acc!(*x) else { return };
                for (a, b) in gx.iter_mut().zip(g) {
                    *a += b * s;
                }
            }
            Op::AddScalar(x) => {
                let Some(gx) = acc!(*x) else { return };
                for (a, b) in gx.iter_mut().zip(g) {
                    *a += b;
                }
            }
            Op::Tanh(x) => {
                let y = out.data();
                let Some(gx) = acc!(*x) else { return };
                for k in 0..g.len() {
                    gx[k] += g[k] * (1.0 - y[k] * y[k]);
                }
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                let Some(gx) = acc!(*x) else { return };
                for k in 0..g.len() {
                    gx[k] += g[k] * y[k] * (1.0 - y[k]);
                }
            }
            Op::Exp(x) => {
                let y = out.data();
                let Some(gx) = acc!(*x) else { return };
                for k in 0..g.len() {
                    gx[k] += g[k] * y[k];
                }
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                let Some(gx) = acc!(*x) else { return };
                for k in 0..g.len() {
                    gx[k] += g[k] / xv[k];
                }
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                let Some(gx) = acc!(*x) else { return };
                for k in 0..g.len() {
                    gx[k] += 2.0 * g[k] * xv[k];
                }
            }
            Op::Recip(x) => {
                let y = out.data();
                let Some(gx) = acc!(*x) else { return };
                for k in 0..g.len() {
                    gx[k] -= g[k] * y[k] * y[k];
                }
            }
            Op::Sqrt(x) => {
                let y = out.data();
                let Some(gx) = acc!(*x) else { return };
                for k in 0..g.len() {
                    if y[k] > 0.0 {
                        gx[k] += g[k] * 0.5 / y[k];
                    }
                }
            }
            Op::Piecewise(x, slopes) => {
                let Some(gx) = acc!(*x) else { return };
                for k in 0..g.len() {
                    gx[k] += g[k] * slopes[k];
                }
            }
            Op::Clamp(x, state) => {
                let Some(gx) = acc!(*x) else { return };
                for k in 0..g.len() {
                    if state[k] == 1 {
                        gx[k] += g[k];
                    }
                }
            }
            Op::Minimum(a, b, mask) => {
                if let Some(ga) = acc!(*a) {
                    for k in 0..g.len() {
                        if mask[k] {
                            ga[k] += g[k];
                        }
                    }
                }
                let Some(gb) = acc!(*b) else { return };
                for k in 0..g.len() {
                    if !mask[k] {
                        gb[k] += g[k];
                    }
                }
            }
            Op::SumAll(x) => {
                let Some(gx) = acc!(*x) else { return };
                for a in gx.iter_mut() {
                    *a += g[0];
                }
            }
            Op::Sum(x, axis) => {
                let (xr, xc) = self.shape(*x);
                let Some(gx) = acc!(*x) else { return };
                for ii in 0..xr {
                    for j in 0..xc {
                        gx[ii * xc + j] += match axis {
                            Axis::Rows => g[j],
                            Axis::Cols => g[ii],
                        };
                    }
                }
            }
            Op::MaxRows(x, arg) => {
                let xc = self.shape(*x).1;
                let Some(gx) = acc!(*x) else { return };
                for (j, &ai) in arg.iter().enumerate() {
                    gx[ai * xc + j] += g[j];
                }
            }
            Op::Softmax(x, axis) => {
                let y = out;
                let Some(gx) = acc!(*x) else { return };
                match axis {
                    Axis::Cols => {
                        for ii in 0..r {
                            let dot: f64 = (0..c).map(|j| g[ii * c + j] * y.get(ii, j)).sum();
                            for j in 0..c {
                                gx[ii * c + j] += y.get(ii, j) * (g[ii * c + j] - dot);
                            }
                        }
                    }
                    Axis::Rows => {
                        for j in 0..c {
                            let dot: f64 = (0..r).map(|ii| g[ii * c + j] * y.get(ii, j)).sum();
                            for ii in 0..r {
                                gx[ii * c + j] += y.get(ii, j) * (g[ii * c + j] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmaxCols(x) => {
                let y = out;
                let Some(gx) = acc!(*x) else { return };
                for ii in 0..r {
                    let gs: f64 = (0..c).map(|j| g[ii * c + j]).sum();
                    for j in 0..c {
                        gx[ii * c + j] += g[ii * c + j] - y.get(ii, j).exp() * gs;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.shape(p).1;
                    let Some(gp) = acc!(p) else {
                        off += pc;
                        continue;
                    };
                    for ii in 0..r {
                        for j in 0..pc {
                            gp[ii * pc + j] += g[ii * c + off + j];
                        }
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let Some(gp) = acc!(p) else {
                        off += n;
                        continue;
                    };
                    for k in 0..n {
                        gp[k] += g[off + k];
                    }
                    off += n;
                }
            }
            Op::SliceCols(x, start) => {
                let xc = self.shape(*x).1;
                let Some(gx) = acc!(*x) else { return };
                for ii in 0..r {
                    for j in 0..c {
                        gx[ii * xc + start + j] += g[ii * c + j];
                    }
                }
            }
            Op::SliceRows(x, start) => {
                let Some(gx) = acc!(*x) else { return };
                let off = start * c;
                for k in 0..g.len() {
                    gx[off + k] += g[k];
                }
            }
            Op::GatherRows(x, idx) => {
                let Some(gx) = acc!(*x) else { return };
                for (ii, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        gx[src * c + j] += g[ii * c + j];
                    }
                }
            }
            Op::ScatterAddRows(x, idx) => {
                let Some(gx) = acc!(*x) else { return };
                for (ii, &dst) in idx.iter().enumerate() {
                    for j in 0..c {
                        gx[ii * c + j] += g[dst * c + j];
                    }
                }
            }
            Op::SegmentSoftmax(x, seg) => {
                let y = out.data();
                let n = seg.iter().copied().max().map_or(0, |m| m + 1);
                let mut dots = vec![0.0; n];
                for (k, &s) in seg.iter().enumerate() {
                    dots[s] += g[k] * y[k];
                }
                let Some(gx) = acc!(*x) else { return };
                for (k, &s) in seg.iter().enumerate() {
                    gx[k] += y[k] * (g[k] - dots[s]);
                }
            }
            Op::PlaceBlocks(src, entries) => {
                let w = self.shape(*src).1;
                let Some(gs) = acc!(*src) else { return };
                for &(s, d, off) in entries {
                    for k in 0..w {
                        gs[s * w + k] += g[d * c + off + k];
                    }
                }
            }
            Op::GatherElems(src, picks) => {
                let Some(gs) = acc!(*src) else { return };
                for (k, p) in picks.iter().enumerate() {
                    if let Some(i) = p {
                        gs[*i] += g[k];
                    }
                }
            }
            Op::BlockScale(x, s, d) => {
                let p = self.shape(*s).1;
                let xv = self.value(*x).data();
                let sv = self.value(*s).data();
                if let Some(gx) = acc!(*x) {
                    for j in 0..r {
                        for b in 0..p {
                            for k in 0..*d {
                                let idx = j * c + b * d + k;
                                gx[idx] += g[idx] * sv[j * p + b];
                            }
                        }
                    }
                }
                let Some(gsv) = acc!(*s) else { return };
                for j in 0..r {
                    for b in 0..p {
                        let mut acc_v = 0.0;
                        for k in 0..*d {
                            let idx = j * c + b * d + k;
                            acc_v += g[idx] * xv[idx];
                        }
                        gsv[j * p + b] += acc_v;
                    }
                }
            }
            Op::BlockCombine(y, w, d) => {
                let yc = self.shape(*y).1;
                let p = self.shape(*w).1;
                let yv = self.value(*y).data();
                let wv = self.value(*w).data();
                if let Some(gy) = acc!(*y) {
                    for j in 0..r {
                        for b in 0..p {
                            for k in 0..*d {
                                gy[j * yc + b * d + k] += wv[b] * g[j * d + k];
                            }
                        }
                    }
                }
                let Some(gw) = acc!(*w) else { return };
                for j in 0..r {
                    for b in 0..p {
                        let mut s = 0.0;
                        for k in 0..*d {
                            s += g[j * d + k] * yv[j * yc + b * d + k];
                        }
                        gw[b] += s;
                    }
                }
            }
            Op::BatchedRowMatmul(x, w) => {
                let (p, k) = self.shape(*x);
                let pm = self.shape(*w).1;
                let m = pm / p;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if let Some(gx) = acc!(*x) {
                    for b in 0..p {
                        for i2 in 0..k {
                            let mut s = 0.0;
                            for j in 0..m {
                                s += g[b * m + j] * wv[i2 * pm + b * m + j];
                            }
                            gx[b * k + i2] += s;
                        }
                    }
                }
                let Some(gw) = acc!(*w) else { return };
                for b in 0..p {
                    for i2 in 0..k {
                        let xi = xv[b * k + i2];
                        for j in 0..m {
                            gw[i2 * pm + b * m + j] += xi * g[b * m + j];
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let Some(gx) = acc!(*x) else { return };
                // out is r x c, x is c x r
                for ii in 0..r {
                    for j in 0..c {
                        gx[j * r + ii] += g[ii * c + j];
                    }
                }
            }
            Op::Reshape(x) => {
                let Some(gx) = acc!(*x) else { return };
                for k in 0..g.len() {
                    gx[k] += g[k];
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax. Reductions over rows use sorted summation.
pub fn softmax_tensor(t: &Tensor, axis: Axis) -> Tensor {
    let (r, c) = t.shape();
    let mut out = Tensor::zeros(r, c);
    match axis {
        Axis::Cols => {
            for i in 0..r {
                let row = t.row(i);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                let s = canonical_sum(&mut ex.clone());
                for (j, e) in ex.iter().enumerate() {
                    out.set(i, j, e / s);
                }
            }
        }
        Axis::Rows => {
            for j in 0..c {
                let m = (0..r).map(|i| t.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = (0..r).map(|i| (t.get(i, j) - m).exp()).collect();
                let s = canonical_sum(&mut ex.clone());
                for (i, e) in ex.iter().enumerate() {
                    out.set(i, j, e / s);
                }
            }
        }
    }
    out
}
