use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gemm, numel, MatView, Result, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct MatMulPlan {
    m: usize,
    n: usize,
    a_rows: usize,
    a_cols: usize,
    b_rows: usize,
    b_cols: usize,
    ta: bool,
    tb: bool,
    /// (a offset, b offset) per output batch entry; a single entry when folded.
    pairs: Vec<(usize, usize)>,
    /// Rows of `a` across all batch entries stacked into one GEMM.
    folded_rows: Option<usize>,
}

enum Op<S> {
    Leaf,
    MatMul { a: Var, b: Var, plan: Box<MatMulPlan> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: S },
    Relu { a: Var },
    Gelu { a: Var },
    Softmax { a: Var, outer: usize, len: usize, inner: usize },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<S> },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, coef: Vec<S>, probs: Vec<S> },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Dropout { a: Var, mask: Vec<S> },
    Sum { a: Var },
}

struct Node<S> {
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
    op: Op<S>,
}

/// Records operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order of the graph.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    backward_done: bool,
    check_finite: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn op_name<S>(op: &Op<S>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Add { .. } => "add",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::Relu { .. } => "relu",
        Op::Gelu { .. } => "gelu",
        Op::Softmax { .. } => "softmax",
        Op::RmsNorm { .. } => "rms_norm",
        Op::Embedding { .. } => "embedding",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Reshape { .. } => "reshape",
        Op::Permute { .. } => "permute",
        Op::Dropout { .. } => "dropout",
        Op::Sum { .. } => "sum",
    }
}

fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let dim = |s: &[usize], i: usize| if i + s.len() >= rank { s[i + s.len() - rank] } else { 1 };
    (0..rank)
        .map(|i| match (dim(a, i), dim(b, i)) {
            (x, y) if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(TensorError::ShapeMismatch { op, left: a.to_vec(), right: b.to_vec() }),
        })
        .collect()
}

/// Row-major strides of `shape` right-aligned against `out`; 0 on broadcast dims.
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let off = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut s = 1;
    for d in (0..shape.len()).rev() {
        strides[d + off] = if shape[d] == 1 { 0 } else { s };
        s *= shape[d];
    }
    strides
}

/// Visit every output position in row-major order with the matching offsets
/// into two strided inputs.
fn walk2(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    if numel(out) == 0 {
        return;
    }
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let last = out[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob, mut o) = (0usize, 0usize, 0usize);
    loop {
        for j in 0..last {
            f(o + j, oa + j * la, ob + j * lb);
        }
        o += last;
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn permute_source_strides(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut s = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = s;
        s *= shape[d];
    }
    perm.iter().map(|&p| strides[p]).collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu<S: Scalar>(x: S) -> S {
    let half = S::of(0.5);
    let u = S::of(GELU_C) * (x + S::of(GELU_K) * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let half = S::of(0.5);
    let u = S::of(GELU_C) * (x + S::of(GELU_K) * x * x * x);
    let t = u.tanh();
    let du = S::of(GELU_C) * (S::one() + S::of(3.0 * GELU_K) * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * du
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), backward_done: false, check_finite: true }
    }

    /// Whether each op output is scanned for NaN/Inf (on by default).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated into a leaf by [`backward`](Self::backward).
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<S>> {
        self.nodes[v.0].grad.take()
    }

    /// Clear all gradients so that `backward` may run again.
    pub fn reset(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    /// Drop every node created after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn push(&mut self, value: Tensor<S>, inputs: &[Var], op: Op<S>) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name(&op) });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Batched matrix product `a · b` over the last two axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Batched product with optional transposition of either operand's last
    /// two axes. Leading (batch) axes broadcast when equal or 1.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || TensorError::ShapeMismatch { op: "matmul", left: sa.clone(), right: sb.clone() };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (a_rows, a_cols) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (b_rows, b_cols) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if ta { (a_cols, a_rows) } else { (a_rows, a_cols) };
        let (k2, n) = if tb { (b_cols, b_rows) } else { (b_rows, b_cols) };
        if k != k2 {
            return Err(mismatch());
        }
        let a_batch = &sa[..sa.len() - 2];
        let b_batch = &sb[..sb.len() - 2];
        let out_batch = broadcast_shapes("matmul", a_batch, b_batch).map_err(|_| mismatch())?;
        let batch_count = numel(&out_batch);
        let folded_rows = (!ta && numel(b_batch) == 1 && numel(a_batch) == batch_count && batch_count > 1)
            .then_some(batch_count * a_rows);
        let pairs = if folded_rows.is_some() {
            vec![(0, 0)]
        } else {
            let st_a = aligned_strides(a_batch, &out_batch);
            let st_b = aligned_strides(b_batch, &out_batch);
            let mut pairs = Vec::with_capacity(batch_count);
            walk2(&out_batch, &st_a, &st_b, |_, ia, ib| pairs.push((ia * a_rows * a_cols, ib * b_rows * b_cols)));
            pairs
        };
        let plan = MatMulPlan { m, n, a_rows, a_cols, b_rows, b_cols, ta, tb, pairs, folded_rows };
        let mut out_shape = out_batch;
        out_shape.extend([m, n]);
        let mut out = vec![S::zero(); numel(&out_shape)];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for (va, vb, vc) in plan.views() {
                gemm(S::one(), av, va, bv, vb, S::zero(), &mut out, vc);
            }
        }
        let value = Tensor::new(out_shape, out)?;
        self.push(value, &[a, b], Op::MatMul { a, b, plan: Box::new(plan) })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, false)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, true)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(S, S) -> S, is_mul: bool) -> Result<Var> {
        let ta = self.value(a);
        let tb = self.value(b);
        let out_shape = broadcast_shapes(name, ta.shape(), tb.shape())?;
        let mut out = vec![S::zero(); numel(&out_shape)];
        if ta.shape() == tb.shape() {
            for ((o, &x), &y) in out.iter_mut().zip(ta.data()).zip(tb.data()) {
                *o = f(x, y);
            }
        } else {
            let sa = aligned_strides(ta.shape(), &out_shape);
            let sb = aligned_strides(tb.shape(), &out_shape);
            let (da, db) = (ta.data(), tb.data());
            walk2(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(da[ia], db[ib]));
        }
        let value = Tensor::new(out_shape, out)?;
        let op = if is_mul { Op::Mul { a, b } } else { Op::Add { a, b } };
        self.push(value, &[a, b], op)
    }

    pub fn scale(&mut self, a: Var, factor: S) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x * factor).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(value, &[a], Op::Scale { a, factor })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| if x > S::zero() { x } else { S::zero() }).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(value, &[a], Op::Relu { a })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| gelu(x)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(value, &[a], Op::Gelu { a })
    }

    /// Softmax along `axis`, stabilised by subtracting the maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis { axis, rank: shape.len() });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = t.data();
        let mut out = vec![S::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = S::neg_infinity();
                for j in 0..len {
                    max = max.max(x[base + j * inner]);
                }
                let mut total = S::zero();
                for j in 0..len {
                    let e = (x[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    total += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(value, &[a], Op::Softmax { a, outer, len, inner })
    }

    /// `gain ⊙ x / sqrt(mean(x²) + eps)` over the last axis.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: S) -> Result<Var> {
        let tx = self.value(x);
        let tg = self.value(gain);
        let d = *tx.shape().last().ok_or(TensorError::InvalidAxis { axis: 0, rank: 0 })?;
        if tg.numel() != d || tg.rank() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "rms_norm",
                left: tx.shape().to_vec(),
                right: tg.shape().to_vec(),
            });
        }
        let rows = tx.numel().checked_div(d).unwrap_or(0);
        let (xd, gd) = (tx.data(), tg.data());
        let mut out = vec![S::zero(); xd.len()];
        let mut inv_rms = Vec::with_capacity(rows);
        let dn = S::of(d as f64);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let ms = row.iter().map(|&v| v * v).sum::<S>() / dn;
            let inv = S::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for j in 0..d {
                out[r * d + j] = gd[j] * row[j] * inv;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(value, &[x, gain], Op::RmsNorm { x, gain, inv_rms })
    }

    /// Gather rows of a `[V, d]` table; the result is `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(TensorError::Invalid(format!("embedding table must be rank 2, got {:?}", t.shape())));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for (position, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(TensorError::IndexOutOfRange { what: "token id", index: id, bound: v, position });
            }
            out.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        self.push(value, &[table], Op::Embedding { table, ids: ids.to_vec() })
    }

    /// Mean negative log-likelihood over rows whose target is not `ignore_id`.
    /// `logits` is `[.., V]`; `targets` has one entry per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_id: usize) -> Result<Var> {
        self.weighted_cross_entropy(logits, targets, ignore_id, None)
    }

    /// Like [`cross_entropy`](Self::cross_entropy) with a per-row weight; the
    /// result is `Σ wᵢ·nllᵢ / Σ wᵢ` over non-ignored rows.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore_id: usize,
        weights: Option<&[S]>,
    ) -> Result<Var> {
        let t = self.value(logits);
        let v = *t.shape().last().ok_or(TensorError::InvalidAxis { axis: 0, rank: 0 })?;
        let rows = t.numel().checked_div(v).unwrap_or(0);
        if targets.len() != rows || weights.is_some_and(|w| w.len() != rows) {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: t.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut coef = vec![S::zero(); rows];
        let mut total_weight = S::zero();
        for (position, &tgt) in targets.iter().enumerate() {
            if tgt == ignore_id {
                continue;
            }
            if tgt >= v {
                return Err(TensorError::IndexOutOfRange { what: "target", index: tgt, bound: v, position });
            }
            let w = weights.map_or(S::one(), |w| w[position]);
            coef[position] = w;
            total_weight += w;
        }
        if total_weight <= S::zero() {
            return Err(TensorError::AllIgnored);
        }
        for c in &mut coef {
            *c /= total_weight;
        }
        let x = t.data();
        let mut probs = vec![S::zero(); x.len()];
        let mut loss = S::zero();
        for r in 0..rows {
            let row = &x[r * v..(r + 1) * v];
            let max = row.iter().fold(S::neg_infinity(), |m, &z| m.max(z));
            let mut total = S::zero();
            for (p, &z) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (z - max).exp();
                total += *p;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p /= total;
            }
            if coef[r] > S::zero() {
                let lse = max + total.ln();
                loss += coef[r] * (lse - row[targets[r]]);
            }
        }
        let value = Tensor::scalar(loss);
        self.push(value, &[logits], Op::CrossEntropy { logits, targets: targets.to_vec(), coef, probs })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if numel(shape) != t.numel() {
            return Err(TensorError::ShapeMismatch { op: "reshape", left: t.shape().to_vec(), right: shape.to_vec() });
        }
        let value = Tensor::new(shape.to_vec(), t.data().to_vec())?;
        self.push(value, &[a], Op::Reshape { a })
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let rank = t.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Invalid(format!("{perm:?} is not a permutation of rank {rank}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
        let src = permute_source_strides(t.shape(), perm);
        let zeros = vec![0; rank];
        let x = t.data();
        let mut out = vec![S::zero(); x.len()];
        walk2(&out_shape, &src, &zeros, |o, i, _| out[o] = x[i]);
        let value = Tensor::new(out_shape, out)?;
        self.push(value, &[a], Op::Permute { a, perm: perm.to_vec() })
    }

    /// Inverted dropout with an explicit seed; `rate == 0` is the identity.
    pub fn dropout(&mut self, a: Var, rate: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        let t = self.value(a);
        let keep = S::of(1.0 / (1.0 - rate));
        let mask: Vec<S> = if rate == 0.0 {
            vec![S::one(); t.numel()]
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..t.numel()).map(|_| if rng.random::<f64>() < rate { S::zero() } else { keep }).collect()
        };
        let data = t.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(value, &[a], Op::Dropout { a, mask })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().copied().sum::<S>();
        self.push(Tensor::scalar(total), &[a], Op::Sum { a })
    }

    /// Populate gradients of every `requires_grad` leaf from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let shape = self.shape(loss).to_vec();
        if numel(&shape) != 1 {
            return Err(TensorError::NonScalarLoss { shape });
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let contributions = self.local_grads(i, &g);
            for (var, delta) in contributions {
                let node = &mut self.nodes[var.0];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += *d),
                    None => node.grad = Some(delta),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, i: usize, g: &[S]) -> Vec<(Var, Vec<S>)> {
        let node = &self.nodes[i];
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, plan } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = self.needs(*a).then(|| vec![S::zero(); va.len()]);
                let mut gb = self.needs(*b).then(|| vec![S::zero(); vb.len()]);
                for (av, bv, cv) in plan.views() {
                    if let Some(ga) = ga.as_mut() {
                        gemm(S::one(), g, cv, vb, bv.t(), S::one(), ga, av);
                    }
                    if let Some(gb) = gb.as_mut() {
                        gemm(S::one(), va, av.t(), g, cv, S::one(), gb, bv);
                    }
                }
                out.extend(ga.map(|x| (*a, x)));
                out.extend(gb.map(|x| (*b, x)));
            }
            Op::Add { a, b } | Op::Mul { a, b } => {
                let is_mul = matches!(node.op, Op::Mul { .. });
                let out_shape = node.value.shape();
                let (ta, tb) = (self.value(*a), self.value(*b));
                let sa = aligned_strides(ta.shape(), out_shape);
                let sb = aligned_strides(tb.shape(), out_shape);
                for (target, other, s_t, s_o) in [(*a, tb, &sa, &sb), (*b, ta, &sb, &sa)] {
                    if !self.needs(target) {
                        continue;
                    }
                    let mut acc = vec![S::zero(); self.value(target).numel()];
                    let od = other.data();
                    walk2(out_shape, s_t, s_o, |o, it, io| {
                        acc[it] += if is_mul { g[o] * od[io] } else { g[o] };
                    });
                    out.push((target, acc));
                }
            }
            Op::Scale { a, factor } => out.push((*a, g.iter().map(|&x| x * *factor).collect())),
            Op::Relu { a } => {
                let x = self.value(*a).data();
                out.push((*a, g.iter().zip(x).map(|(&gi, &xi)| if xi > S::zero() { gi } else { S::zero() }).collect()));
            }
            Op::Gelu { a } => {
                let x = self.value(*a).data();
                out.push((*a, g.iter().zip(x).map(|(&gi, &xi)| gi * gelu_grad(xi)).collect()));
            }
            Op::Softmax { a, outer, len, inner } => {
                let y = node.value.data();
                let mut dx = vec![S::zero(); y.len()];
                for o in 0..*outer {
                    for k in 0..*inner {
                        let base = o * len * inner + k;
                        let dot: S = (0..*len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                        for j in 0..*len {
                            let p = base + j * inner;
                            dx[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                out.push((*a, dx));
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (xd, gd) = (self.value(*x).data(), self.value(*gain).data());
                let d = gd.len();
                let dn = S::of(d as f64);
                let mut dx = self.needs(*x).then(|| vec![S::zero(); xd.len()]);
                let mut dg = self.needs(*gain).then(|| vec![S::zero(); d]);
                for (r, &inv) in inv_rms.iter().enumerate() {
                    let row = &xd[r * d..(r + 1) * d];
                    let gy = &g[r * d..(r + 1) * d];
                    if let Some(dg) = dg.as_mut() {
                        for j in 0..d {
                            dg[j] += gy[j] * row[j] * inv;
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dot: S = (0..d).map(|j| gd[j] * gy[j] * row[j]).sum();
                        let k = inv * inv * inv * dot / dn;
                        for j in 0..d {
                            dx[r * d + j] = inv * gd[j] * gy[j] - row[j] * k;
                        }
                    }
                }
                out.extend(dx.map(|v| (*x, v)));
                out.extend(dg.map(|v| (*gain, v)));
            }
            Op::Embedding { table, ids } => {
                let t = self.value(*table);
                let d = t.shape()[1];
                let mut acc = vec![S::zero(); t.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        acc[id * d + j] += g[r * d + j];
                    }
                }
                out.push((*table, acc));
            }
            Op::CrossEntropy { logits, targets, coef, probs } => {
                let v = *self.value(*logits).shape().last().unwrap_or(&0);
                let mut acc = vec![S::zero(); probs.len()];
                for (r, (&c, &tgt)) in coef.iter().zip(targets).enumerate() {
                    if c == S::zero() {
                        continue;
                    }
                    let scale = g[0] * c;
                    for j in 0..v {
                        acc[r * v + j] = scale * probs[r * v + j];
                    }
                    acc[r * v + tgt] -= scale;
                }
                out.push((*logits, acc));
            }
            Op::Reshape { a } => out.push((*a, g.to_vec())),
            Op::Permute { a, perm } => {
                let t = self.value(*a);
                let src = permute_source_strides(t.shape(), perm);
                let zeros = vec![0; perm.len()];
                let mut acc = vec![S::zero(); t.numel()];
                walk2(node.value.shape(), &src, &zeros, |o, i, _| acc[i] += g[o]);
                out.push((*a, acc));
            }
            Op::Dropout { a, mask } => out.push((*a, g.iter().zip(mask).map(|(&x, &m)| x * m).collect())),
            Op::Sum { a } => out.push((*a, vec![g[0]; self.value(*a).numel()])),
        }
        out.retain(|(v, _)| self.needs(*v));
        out
    }
}

impl MatMulPlan {
    /// (a view, b view, output view) per GEMM, with transposition applied.
    fn views(&self) -> impl Iterator<Item = (MatView, MatView, MatView)> + '_ {
        let (m, n) = (self.m, self.n);
        self.pairs.iter().enumerate().map(move |(bi, &(ao, bo))| {
            let (av, cv) = match self.folded_rows {
                Some(rows) => (MatView::row_major(0, rows, self.a_cols), MatView::row_major(0, rows, n)),
                None => (
                    MatView::row_major(ao, self.a_rows, self.a_cols).t_if(self.ta),
                    MatView::row_major(bi * m * n, m, n),
                ),
            };
            let bv = MatView::row_major(bo, self.b_rows, self.b_cols).t_if(self.tb);
            (av, bv, cv)
        })
    }
}
