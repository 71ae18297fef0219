use std::borrow::Cow;

use super::{gemm, MatRef, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds understood by the tape. Every kind has a backward rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    AddRow,
    Mul,
    Scale,
    MatMul,
    Transpose,
    Reshape,
    LayerNorm,
    Gelu,
    Softmax,
    Gather,
    Slice,
    Concat,
    CrossEntropy,
    Sum,
}

impl OpKind {
    pub const ALL: [OpKind; 16] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::AddRow,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::LayerNorm,
        OpKind::Gelu,
        OpKind::Softmax,
        OpKind::Gather,
        OpKind::Slice,
        OpKind::Concat,
        OpKind::CrossEntropy,
        OpKind::Sum,
    ];

    /// Primitives the transformer decoder is built from.
    pub const DECODER: [OpKind; 12] = [
        OpKind::Add,
        OpKind::AddRow,
        OpKind::Scale,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::LayerNorm,
        OpKind::Gelu,
        OpKind::Softmax,
        OpKind::Gather,
        OpKind::Slice,
        OpKind::Concat,
        OpKind::CrossEntropy,
    ];

    /// Whether reverse-mode differentiation is defined for this kind.
    pub fn has_backward(self) -> bool {
        // The match is exhaustive: adding a kind without a rule fails to compile
        // in `Tape::backward`, so every listed kind is covered.
        matches!(
            self,
            OpKind::Leaf
                | OpKind::Add
                | OpKind::AddRow
                | OpKind::Mul
                | OpKind::Scale
                | OpKind::MatMul
                | OpKind::Transpose
                | OpKind::Reshape
                | OpKind::LayerNorm
                | OpKind::Gelu
                | OpKind::Softmax
                | OpKind::Gather
                | OpKind::Slice
                | OpKind::Concat
                | OpKind::CrossEntropy
                | OpKind::Sum
        )
    }
}

enum Op<S> {
    Leaf,
    Add(Var, Var),
    AddRow {
        x: Var,
        row: Var,
        only: Option<Vec<usize>>,
    },
    Mul(Var, Var),
    Scale(Var, S),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<S>,
        rstd: Vec<S>,
    },
    Gelu(Var),
    Softmax(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<S>,
    },
    Sum(Var),
}

impl<S> Op<S> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::AddRow { .. } => OpKind::AddRow,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Reshape(..) => OpKind::Reshape,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Softmax(..) => OpKind::Softmax,
            Op::Gather { .. } => OpKind::Gather,
            Op::Slice { .. } => OpKind::Slice,
            Op::Concat { .. } => OpKind::Concat,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Sum(..) => OpKind::Sum,
        }
    }
}

struct Node<'a, S: Scalar> {
    shape: Vec<usize>,
    value: Cow<'a, [S]>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to the leaves that asked for them.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for a leaf, or `None` when the leaf did not require one.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Single-threaded record of a computation, replayed in reverse by
/// [`Tape::backward`]. Constant leaves may borrow their storage.
pub struct Tape<'a, S: Scalar> {
    nodes: Vec<Node<'a, S>>,
}

impl<S: Scalar> Default for Tape<'_, S> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let rows = shape.iter().product::<usize>() / cols.max(1);
    (rows, cols)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

impl<'a, S: Scalar> Tape<'a, S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, op: Op<S>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<S> {
        Tensor {
            shape: self.nodes[v.0].shape.clone(),
            data: self.nodes[v.0].value.to_vec(),
        }
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Records an owned leaf.
    pub fn leaf(&mut self, t: Tensor<S>, requires_grad: bool) -> Var {
        self.push(t.shape, t.data, Op::Leaf, requires_grad)
    }

    /// Records a constant leaf that borrows its storage for the tape's lifetime.
    pub fn constant(&mut self, t: &'a Tensor<S>) -> Var {
        self.borrowed(t, false)
    }

    /// Records a borrowed leaf, optionally differentiable.
    pub fn borrowed(&mut self, t: &'a Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape: t.shape.clone(),
            value: Cow::Borrowed(&t.data),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("add", format!("{sa:?} vs {sb:?}")));
        }
        let shape = sa.to_vec();
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, value, Op::Add(a, b), rg))
    }

    /// Adds a length-`n` vector to every row (last axis `n`) of `x`, or only to
    /// the listed rows.
    pub fn add_row(&mut self, x: Var, row: Var, only: Option<Vec<usize>>) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        let rn: usize = self.shape(row).iter().product();
        if rn != cols {
            return Err(Error::shape(
                "add_row",
                format!("row of {rn} values vs tensor {:?}", self.shape(x)),
            ));
        }
        if let Some(sel) = &only {
            if let Some(&bad) = sel.iter().find(|&&r| r >= rows) {
                return Err(Error::shape(
                    "add_row",
                    format!("row index {bad} outside {rows} rows"),
                ));
            }
        }
        let mut value = self.value(x).to_vec();
        let b = self.value(row);
        let mut apply = |r: usize| {
            for (v, &bv) in value[r * cols..(r + 1) * cols].iter_mut().zip(b) {
                *v += bv;
            }
        };
        match &only {
            None => (0..rows).for_each(&mut apply),
            Some(sel) => sel.iter().for_each(|&r| apply(r)),
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(shape, value, Op::AddRow { x, row, only }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("mul", format!("{sa:?} vs {sb:?}")));
        }
        let shape = sa.to_vec();
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let shape = self.shape(x).to_vec();
        let value = self.value(x).iter().map(|&v| v * c).collect();
        let rg = self.rg(x);
        self.push(shape, value, Op::Scale(x, c), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut value = vec![S::zero(); m * n];
        gemm(
            MatRef::row_major(self.value(a), m, k),
            MatRef::row_major(self.value(b), k, n),
            S::zero(),
            &mut value,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("rank-2 input required, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(x);
        let mut value = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                value[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c, r], value, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), rg))
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        let gn: usize = self.shape(gamma).iter().product();
        let bn: usize = self.shape(beta).iter().product();
        if gn != cols || bn != cols {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {:?} with gamma {:?} and beta {:?}",
                    self.shape(x),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let eps = S::of(eps);
        let n = S::of(cols as f64);
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut value = vec![S::zero(); rows * cols];
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mu = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() / n;
            let rs = S::one() / (var + eps).sqrt();
            for (j, out) in value[r * cols..(r + 1) * cols].iter_mut().enumerate() {
                *out = (row[j] - mu) * rs * g[j] + b[j];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            shape,
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            rg,
        ))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let half = S::of(0.5);
        let inv_sqrt2 = S::of(std::f64::consts::FRAC_1_SQRT_2);
        let value = self
            .value(x)
            .iter()
            .map(|&v| half * v * (S::one() + (v * inv_sqrt2).erf()))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, value, Op::Gelu(x), rg)
    }

    /// Softmax over the last axis. With `causal`, the trailing two axes are a
    /// query×key score matrix and keys after each query are excluded.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, cols) = rows_cols(&shape);
        let tq = if shape.len() >= 2 { shape[shape.len() - 2] } else { 1 };
        if causal && (shape.len() < 2 || tq > cols) {
            return Err(Error::shape(
                "softmax",
                format!("causal mask needs a [.., q, k] input with q <= k, got {shape:?}"),
            ));
        }
        let offset = cols.saturating_sub(tq);
        let xv = self.value(x);
        let mut value = vec![S::zero(); rows * cols];
        for r in 0..rows {
            let limit = if causal { (r % tq) + offset + 1 } else { cols };
            let row = &xv[r * cols..r * cols + limit];
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let out = &mut value[r * cols..r * cols + limit];
            let mut z = S::zero();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - mx).exp();
                z += *o;
            }
            out.iter_mut().for_each(|o| *o = *o / z);
        }
        let rg = self.rg(x);
        Ok(self.push(shape, value, Op::Softmax(x), rg))
    }

    /// Selects rows of a `[vocab, d]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::shape("gather", format!("table must be rank 2, got {s:?}")));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape("gather", format!("id {bad} outside table of {v} rows")));
        }
        if ids.is_empty() {
            return Err(Error::shape("gather", "empty id list"));
        }
        let t = self.value(table);
        let mut value = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            value.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), d],
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("axis {axis} range {start}..{} of {shape:?}", start + len),
            ));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.value(x);
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            value.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(out_shape, value, Op::Slice { x, axis, start }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base_shape = self.shape(*first).to_vec();
        if axis >= base_shape.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {base_shape:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{base_shape:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base_shape, axis);
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let d = self.shape(p)[axis];
                value.extend_from_slice(&self.value(p)[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            shape,
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {s:?} with {} targets", targets.len()),
            ));
        }
        let (t, v) = (s[0], s[1]);
        if let Some(&bad) = targets.iter().find(|&&id| id >= v) {
            return Err(Error::TargetOutOfRange { id: bad, vocab: v });
        }
        let lv = self.value(logits);
        let mut probs = vec![S::zero(); t * v];
        let mut total = 0.0f64;
        for r in 0..t {
            let row = &lv[r * v..(r + 1) * v];
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            let p = &mut probs[r * v..(r + 1) * v];
            for (o, &x) in p.iter_mut().zip(row) {
                *o = (x - mx).exp();
                z += *o;
            }
            p.iter_mut().for_each(|o| *o = *o / z);
            let lse = mx.as_f64() + z.as_f64().ln();
            total += lse - row[targets[r]].as_f64();
        }
        let loss = S::of(total / t as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![total], Op::Sum(x), rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<S>>> = vec![None; n];
        let mut leaf_grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    leaf_grads[i] = Some(Tensor {
                        shape: node.shape.clone(),
                        data: g,
                    });
                }
                Op::Add(a, b) => {
                    for x in [*a, *b] {
                        if self.rg(x) {
                            axpy(self.acc(&mut grads, x), &g);
                        }
                    }
                }
                Op::AddRow { x, row, only } => {
                    if self.rg(*x) {
                        axpy(self.acc(&mut grads, *x), &g);
                    }
                    if self.rg(*row) {
                        let (rows, cols) = rows_cols(&node.shape);
                        let gb = self.acc(&mut grads, *row);
                        let mut add = |r: usize| {
                            for (o, &v) in gb.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                                *o += v;
                            }
                        };
                        match only {
                            None => (0..rows).for_each(&mut add),
                            Some(sel) => sel.iter().for_each(|&r| add(r)),
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let bv = self.value(*b);
                        let ga = self.acc(&mut grads, *a);
                        for ((o, &gv), &y) in ga.iter_mut().zip(&g).zip(bv) {
                            *o += gv * y;
                        }
                    }
                    if self.rg(*b) {
                        let av = self.value(*a);
                        let gb = self.acc(&mut grads, *b);
                        for ((o, &gv), &y) in gb.iter_mut().zip(&g).zip(av) {
                            *o += gv * y;
                        }
                    }
                }
                Op::Scale(x, c) => {
                    let gx = self.acc(&mut grads, *x);
                    for (o, &v) in gx.iter_mut().zip(&g) {
                        *o += v * *c;
                    }
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (m, k, nn) = (sa[0], sa[1], sb[1]);
                    let gm = MatRef::row_major(&g, m, nn);
                    if self.rg(*a) {
                        let bm = MatRef::row_major(self.value(*b), k, nn);
                        let ga = self.acc(&mut grads, *a);
                        gemm(gm, bm.t(), S::one(), ga);
                    }
                    if self.rg(*b) {
                        let am = MatRef::row_major(self.value(*a), m, k);
                        let gb = self.acc(&mut grads, *b);
                        gemm(am.t(), gm, S::one(), gb);
                    }
                }
                Op::Transpose(x) => {
                    let (r, c) = (node.shape[1], node.shape[0]);
                    let gx = self.acc(&mut grads, *x);
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
                Op::Reshape(x) => axpy(self.acc(&mut grads, *x), &g),
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    rstd,
                } => {
                    let (rows, cols) = rows_cols(&node.shape);
                    let xv = self.value(*x);
                    let gam = self.value(*gamma);
                    let xhat = |r: usize, j: usize| (xv[r * cols + j] - mean[r]) * rstd[r];
                    if self.rg(*gamma) {
                        let gg = self.acc(&mut grads, *gamma);
                        for r in 0..rows {
                            for j in 0..cols {
                                gg[j] += g[r * cols + j] * xhat(r, j);
                            }
                        }
                    }
                    if self.rg(*beta) {
                        let gb = self.acc(&mut grads, *beta);
                        for r in 0..rows {
                            for j in 0..cols {
                                gb[j] += g[r * cols + j];
                            }
                        }
                    }
                    if self.rg(*x) {
                        let nf = S::of(cols as f64);
                        let gx = self.acc(&mut grads, *x);
                        for r in 0..rows {
                            let mut s1 = S::zero();
                            let mut s2 = S::zero();
                            for j in 0..cols {
                                let dy = g[r * cols + j] * gam[j];
                                s1 += dy;
                                s2 += dy * xhat(r, j);
                            }
                            let (m1, m2) = (s1 / nf, s2 / nf);
                            for j in 0..cols {
                                let dy = g[r * cols + j] * gam[j];
                                gx[r * cols + j] += rstd[r] * (dy - m1 - xhat(r, j) * m2);
                            }
                        }
                    }
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let inv_sqrt2 = S::of(std::f64::consts::FRAC_1_SQRT_2);
                    let half = S::of(0.5);
                    let pdf_scale = S::of(std_normal_pdf(0.0));
                    let gx = self.acc(&mut grads, *x);
                    for ((o, &gv), &v) in gx.iter_mut().zip(&g).zip(xv) {
                        let cdf = half * (S::one() + (v * inv_sqrt2).erf());
                        let pdf = pdf_scale * (-(half * v * v)).exp();
                        *o += gv * (cdf + v * pdf);
                    }
                }
                Op::Softmax(x) => {
                    let (rows, cols) = rows_cols(&node.shape);
                    let y = &node.value;
                    let gx = self.acc(&mut grads, *x);
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            gx[r * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::Gather { table, ids } => {
                    let d = node.shape[1];
                    let gt = self.acc(&mut grads, *table);
                    for (t, &id) in ids.iter().enumerate() {
                        for (o, &v) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[t * d..(t + 1) * d])
                        {
                            *o += v;
                        }
                    }
                }
                Op::Slice { x, axis, start } => {
                    let in_shape = self.shape(*x).to_vec();
                    let (outer, dim, inner) = split_axis(&in_shape, *axis);
                    let len = node.shape[*axis];
                    let gx = self.acc(&mut grads, *x);
                    for o in 0..outer {
                        let base = (o * dim + start) * inner;
                        axpy(
                            &mut gx[base..base + len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                }
                Op::Concat { parts, axis } => {
                    let (outer, total, inner) = split_axis(&node.shape, *axis);
                    let mut offset = 0;
                    for &p in parts {
                        let d = self.shape(p)[*axis];
                        if self.rg(p) {
                            let gp = self.acc(&mut grads, p);
                            for o in 0..outer {
                                let src = (o * total + offset) * inner;
                                axpy(
                                    &mut gp[o * d * inner..(o + 1) * d * inner],
                                    &g[src..src + d * inner],
                                );
                            }
                        }
                        offset += d;
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let v = self.shape(*logits)[1];
                    let scale = g[0] / S::of(targets.len() as f64);
                    let gl = self.acc(&mut grads, *logits);
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let onehot = if j == t { S::one() } else { S::zero() };
                            gl[r * v + j] += (probs[r * v + j] - onehot) * scale;
                        }
                    }
                }
                Op::Sum(x) => {
                    let gx = self.acc(&mut grads, *x);
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<S>>], v: Var) -> &'g mut Vec<S> {
        let len = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![S::zero(); len])
    }
}

fn axpy<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
