//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its variables. Calling
//! [`Tape::backward`] on a scalar walks the record in reverse and leaves a
//! gradient on every reachable variable that depends on a parameter.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{self, kernel, Scalar, Tensor};

/// Additive bias applied to masked key columns before a softmax.
pub const MASK_BIAS: f64 = -1e9;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Column validity for masked softmax.
///
/// `valid` holds one row of `cols` flags per sequence; batch item `i` of the
/// softmax input uses validity row `i / group`, so per-head items of the same
/// sequence share a row.
#[derive(Clone, Debug)]
pub struct KeyMask {
    valid: Vec<bool>,
    cols: usize,
    group: usize,
}

impl KeyMask {
    pub fn new(valid: Vec<bool>, cols: usize, group: usize) -> Result<Self> {
        if cols == 0 || group == 0 || !valid.len().is_multiple_of(cols) {
            return Err(Error::Input(format!(
                "key mask of {} flags does not tile rows of {cols}",
                valid.len()
            )));
        }
        Ok(Self { valid, cols, group })
    }

    pub fn sequences(&self) -> usize {
        self.valid.len() / self.cols
    }

    pub fn is_valid(&self, seq: usize, col: usize) -> bool {
        self.valid[seq * self.cols + col]
    }

    fn bias<T: Scalar>(&self) -> Vec<T> {
        let masked = T::lit(MASK_BIAS);
        self.valid.iter().map(|&v| if v { T::zero() } else { masked }).collect()
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    AddRowBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Softmax {
        x: Var,
        scale: T,
    },
    L2Normalize {
        x: Var,
        div: Vec<T>,
        clamped: Vec<bool>,
        eps: T,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    SplitHeads {
        x: Var,
        seq: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        seq: usize,
        heads: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    SumGroups {
        x: Var,
        group: usize,
    },
    Reshape(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of a computation; one tape per forward/backward pass.
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
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf; receives a gradient on backward.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        let t = &mut self.nodes[v.0].value;
        let g = t.grad().map(<[T]>::to_vec);
        t.clear_grad();
        g
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, value: Tensor<T>, op: Op<T>) -> Var {
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    // -- operations ---------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// Product of `op(a)` and `op(b)` with optional transposes; see [`tensor::matmul_ex`].
    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let value = tensor::matmul_ex(self.value(a), self.value(b), ta, tb)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::add(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let value = tensor::add_row_bias(self.value(a), self.value(bias))?;
        let rg = self.rg(&[a, bias]);
        Ok(self.push(value, Op::AddRowBias(a, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return shape_err("mul", x.shape(), y.shape());
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let value = Tensor::new(x.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = tensor::scale(self.value(x), s);
        self.unary(x, value, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = tensor::relu(self.value(x));
        self.unary(x, value, Op::Relu(x))
    }

    /// Row-wise `softmax(scale * x + mask_bias)`.
    pub fn softmax(&mut self, x: Var, scale: T, mask: Option<&KeyMask>) -> Result<Var> {
        let mut value = self.value(x).clone();
        value.clear_grad();
        let (batch, rows, cols) = value.as_batched();
        let bias = match mask {
            Some(m) => {
                if m.cols != cols || m.sequences() * m.group != batch {
                    return shape_err("masked softmax", value.shape(), &[m.sequences(), m.group, m.cols]);
                }
                Some(m.bias::<T>())
            }
            None => None,
        };
        for (bi, item) in value.data_mut().chunks_mut(rows * cols).enumerate() {
            let b = bias.as_ref().map(|b| {
                let s = bi / mask.unwrap().group;
                &b[s * cols..(s + 1) * cols]
            });
            for row in item.chunks_mut(cols) {
                kernel::softmax_row(row, scale, b);
            }
        }
        Ok(self.unary(x, value, Op::Softmax { x, scale }))
    }

    pub fn l2_normalize(&mut self, x: Var, eps: T) -> Var {
        let src = self.value(x);
        let c = src.cols();
        let mut out = vec![T::zero(); src.numel()];
        let mut div = Vec::with_capacity(src.rows());
        let mut clamped = Vec::with_capacity(src.rows());
        for (row, o) in src.data().chunks(c).zip(out.chunks_mut(c)) {
            let d = kernel::l2_normalize_row(row, eps, o);
            clamped.push(d <= eps);
            div.push(d);
        }
        let value = Tensor::new(src.shape(), out).expect("shape preserved");
        self.unary(x, value, Op::L2Normalize { x, div, clamped, eps })
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let src = self.value(x);
        let d = src.cols();
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.numel() != d || b.numel() != d {
            return shape_err("layer_norm", src.shape(), g.shape());
        }
        let mut xhat = vec![T::zero(); src.numel()];
        let mut rstd = Vec::with_capacity(src.rows());
        for (row, o) in src.data().chunks(d).zip(xhat.chunks_mut(d)) {
            rstd.push(kernel::standardize_row(row, eps, o));
        }
        let mut out = xhat.clone();
        for row in out.chunks_mut(d) {
            for ((v, &gj), &bj) in row.iter_mut().zip(g.data()).zip(b.data()) {
                *v = *v * gj + bj;
            }
        }
        let value = Tensor::new(src.shape(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// `[S·seq, h·dh]` → `[S·h, seq, dh]`, item `s·h + i` holding head `i` of sequence `s`.
    pub fn split_heads(&mut self, x: Var, seq: usize, heads: usize) -> Result<Var> {
        let src = self.value(x);
        let (rows, d) = (src.rows(), src.cols());
        if src.rank() != 2 || rows % seq != 0 || d % heads != 0 {
            return shape_err("split_heads", src.shape(), &[seq, heads]);
        }
        let mut out = vec![T::zero(); src.numel()];
        permute_heads(src.data(), &mut out, rows / seq, seq, heads, d / heads, true);
        let value = Tensor::new(&[rows / seq * heads, seq, d / heads], out)?;
        Ok(self.unary(x, value, Op::SplitHeads { x, seq, heads }))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, seq: usize, heads: usize) -> Result<Var> {
        let src = self.value(x);
        let (b, r, dh) = src.as_batched();
        if src.rank() != 3 || r != seq || b % heads != 0 {
            return shape_err("merge_heads", src.shape(), &[seq, heads]);
        }
        let mut out = vec![T::zero(); src.numel()];
        permute_heads(src.data(), &mut out, b / heads, seq, heads, dh, false);
        let value = Tensor::new(&[b / heads * seq, heads * dh], out)?;
        Ok(self.unary(x, value, Op::MergeHeads { x, seq, heads }))
    }

    /// Selects rows (last-axis vectors) of `x` by flat row index and shapes the result as `shape`.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let c = src.cols();
        if index.iter().any(|&i| i >= src.rows()) {
            return Err(Error::Input(format!("gather index out of range for {:?}", src.shape())));
        }
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in &index {
            out.extend_from_slice(src.row(i));
        }
        let value = Tensor::new(shape, out)?;
        if value.cols() != c {
            return shape_err("gather_rows", src.shape(), shape);
        }
        Ok(self.unary(x, value, Op::GatherRows { x, index }))
    }

    /// Sums consecutive groups of `group` batch items: `[B·g, r, c]` → `[B, r, c]`.
    pub fn sum_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let src = self.value(x);
        let (b, r, c) = src.as_batched();
        if src.rank() != 3 || b % group != 0 {
            return shape_err("sum_groups", src.shape(), &[group]);
        }
        let item = r * c;
        let mut out = vec![T::zero(); b / group * item];
        for (i, chunk) in src.data().chunks(item).enumerate() {
            let dst = &mut out[(i / group) * item..(i / group + 1) * item];
            for (d, &v) in dst.iter_mut().zip(chunk) {
                *d += v;
            }
        }
        let value = Tensor::new(&[b / group, r, c], out)?;
        Ok(self.unary(x, value, Op::SumGroups { x, group }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.unary(x, value, Op::Reshape(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = tensor::transpose(self.value(x));
        self.unary(x, value, Op::Transpose(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = tensor::concat_cols(&tensors)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(tensor::sum(self.value(x)));
        self.unary(x, value, Op::Sum(x))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let src = self.value(logits);
        let v = src.cols();
        if src.rows() != targets.len() || targets.is_empty() {
            return shape_err("cross_entropy", src.shape(), &[targets.len()]);
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Input(format!("target id {t} outside vocabulary of {v}")));
        }
        let mut probs = src.data().to_vec();
        let mut total = T::zero();
        for (row, &t) in probs.chunks_mut(v).zip(targets) {
            kernel::softmax_row(row, T::one(), None);
            total -= row[t].max(T::min_positive_value()).ln();
        }
        let n = T::from_usize(targets.len()).unwrap();
        let value = Tensor::scalar(total / n);
        Ok(self.unary(
            logits,
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    // -- reverse pass -------------------------------------------------------

    /// Back-propagates from a scalar `loss`. Gradients are kept on trainable
    /// leaves only; intermediate buffers are released as soon as they are used.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            } else {
                self.propagate(i, g, &mut grads)?;
            }
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            match g {
                Some(g) if node.requires_grad => node.value.set_grad(g)?,
                _ => node.value.clear_grad(),
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, mut g: Vec<T>, grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (ta, tb) = (*ta, *tb);
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ba, ra, ca) = av.as_batched();
                let (bb, rb, cb) = bv.as_batched();
                let (batch, m, n) = out.as_batched();
                let k = if ta { ra } else { ca };
                if self.needs(*a) {
                    let da = slot(grads, *a, av.numel());
                    for it in 0..batch {
                        let (ai, bi) = (it % ba, it % bb);
                        let dc = &g[it * m * n..(it + 1) * m * n];
                        let bs = &bv.data()[bi * rb * cb..(bi + 1) * rb * cb];
                        let dst = &mut da[ai * ra * ca..(ai + 1) * ra * ca];
                        if ta {
                            kernel::gemm(k, n, m, bs, tb, dc, true, dst, true);
                        } else {
                            kernel::gemm(m, n, k, dc, false, bs, !tb, dst, true);
                        }
                    }
                }
                if self.needs(*b) {
                    let db = slot(grads, *b, bv.numel());
                    for it in 0..batch {
                        let (ai, bi) = (it % ba, it % bb);
                        let dc = &g[it * m * n..(it + 1) * m * n];
                        let as_ = &av.data()[ai * ra * ca..(ai + 1) * ra * ca];
                        let dst = &mut db[bi * rb * cb..(bi + 1) * rb * cb];
                        if tb {
                            kernel::gemm(n, m, k, dc, true, as_, ta, dst, true);
                        } else {
                            kernel::gemm(k, m, n, as_, !ta, dc, false, dst, true);
                        }
                    }
                }
            }
            Op::Add(a, b) => match (self.needs(*a), self.needs(*b)) {
                (true, true) => {
                    accumulate(grads, *a, g.clone());
                    accumulate(grads, *b, g);
                }
                (true, false) => accumulate(grads, *a, g),
                (false, true) => accumulate(grads, *b, g),
                (false, false) => {}
            },
            Op::AddRowBias(a, bias) => {
                if self.needs(*bias) {
                    let c = out.cols();
                    let db = slot(grads, *bias, c);
                    for row in g.chunks(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
                if self.needs(*a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    accumulate(grads, *a, g.iter().zip(bv.data()).map(|(&x, &y)| x * y).collect());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.iter().zip(av.data()).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Scale(x, s) => {
                g.iter_mut().for_each(|v| *v *= *s);
                accumulate(grads, *x, g);
            }
            Op::Relu(x) => {
                for (d, &y) in g.iter_mut().zip(out.data()) {
                    if y <= T::zero() {
                        *d = T::zero();
                    }
                }
                accumulate(grads, *x, g);
            }
            Op::Softmax { x, scale } => {
                let c = out.cols();
                for (y, d) in out.data().chunks(c).zip(g.chunks_mut(c)) {
                    let dot: T = y.iter().zip(d.iter()).map(|(&a, &b)| a * b).sum();
                    for (dj, &yj) in d.iter_mut().zip(y) {
                        *dj = *scale * yj * (*dj - dot);
                    }
                }
                accumulate(grads, *x, g);
            }
            Op::L2Normalize { x, div, clamped, eps } => {
                let c = out.cols();
                for (r, (y, d)) in out.data().chunks(c).zip(g.chunks_mut(c)).enumerate() {
                    if clamped[r] {
                        d.iter_mut().for_each(|v| *v /= *eps);
                    } else {
                        let dot: T = y.iter().zip(d.iter()).map(|(&a, &b)| a * b).sum();
                        for (dj, &yj) in d.iter_mut().zip(y) {
                            *dj = (*dj - yj * dot) / div[r];
                        }
                    }
                }
                accumulate(grads, *x, g);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = out.cols();
                let gv = self.value(*gamma).data();
                let dn = T::from_usize(d).unwrap();
                if self.needs(*gamma) {
                    let dg = slot(grads, *gamma, d);
                    for (dy, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += dy[j] * xh[j];
                        }
                    }
                }
                if self.needs(*beta) {
                    let db = slot(grads, *beta, d);
                    for dy in g.chunks(d) {
                        for (b, &v) in db.iter_mut().zip(dy) {
                            *b += v;
                        }
                    }
                }
                if self.needs(*x) {
                    for (r, (dy, xh)) in g.chunks_mut(d).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..d {
                            let v = dy[j] * gv[j];
                            mean_d += v;
                            mean_dx += v * xh[j];
                        }
                        mean_d /= dn;
                        mean_dx /= dn;
                        for j in 0..d {
                            dy[j] = rstd[r] * (dy[j] * gv[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    accumulate(grads, *x, g);
                }
            }
            Op::SplitHeads { x, seq, heads } => {
                let (b, _, dh) = out.as_batched();
                let mut dx = vec![T::zero(); g.len()];
                permute_heads(&g, &mut dx, b / heads, *seq, *heads, dh, false);
                accumulate(grads, *x, dx);
            }
            Op::MergeHeads { x, seq, heads } => {
                let dh = out.cols() / heads;
                let seqs = out.rows() / seq;
                let mut dx = vec![T::zero(); g.len()];
                permute_heads(&g, &mut dx, seqs, *seq, *heads, dh, true);
                accumulate(grads, *x, dx);
            }
            Op::GatherRows { x, index } => {
                let src = self.value(*x);
                let c = src.cols();
                let dx = slot(grads, *x, src.numel());
                for (row, &ix) in g.chunks(c).zip(index) {
                    for (d, &v) in dx[ix * c..(ix + 1) * c].iter_mut().zip(row) {
                        *d += v;
                    }
                }
            }
            Op::SumGroups { x, group } => {
                let item = out.numel() / out.as_batched().0;
                let n_in = self.value(*x).numel();
                let dx = slot(grads, *x, n_in);
                for (i, chunk) in dx.chunks_mut(item).enumerate() {
                    for (d, &v) in chunk.iter_mut().zip(&g[(i / group) * item..(i / group + 1) * item]) {
                        *d += v;
                    }
                }
            }
            Op::Reshape(x) => accumulate(grads, *x, g),
            Op::Transpose(x) => {
                let gt = Tensor::new(out.shape(), g)?;
                accumulate(grads, *x, tensor::transpose(&gt).into_data());
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.needs(p) {
                        let dp = g
                            .chunks(total)
                            .flat_map(|row| row[offset..offset + c].iter().copied())
                            .collect();
                        accumulate(grads, p, dp);
                    }
                    offset += c;
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = self.value(*logits).cols();
                let s = g[0] / T::from_usize(targets.len()).unwrap();
                let dx = slot(grads, *logits, probs.len());
                for ((row, p), &t) in dx.chunks_mut(v).zip(probs.chunks(v)).zip(targets) {
                    for (j, (d, &pj)) in row.iter_mut().zip(p).enumerate() {
                        let target = if j == t { T::one() } else { T::zero() };
                        *d += s * (pj - target);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Adds `contribution` into the gradient slot of `v`, taking ownership when
/// the slot is still empty.
fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, contribution: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

/// Gradient slot of `v` for in-place accumulation, zero-filled on first use.
fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

/// Moves data between `[S·seq, h·dh]` (merged) and `[S·h, seq, dh]` (split) layouts.
fn permute_heads<T: Scalar>(src: &[T], dst: &mut [T], seqs: usize, seq: usize, heads: usize, dh: usize, split: bool) {
    let d = heads * dh;
    for s in 0..seqs {
        for t in 0..seq {
            for h in 0..heads {
                let merged = (s * seq + t) * d + h * dh;
                let split_ix = ((s * heads + h) * seq + t) * dh;
                if split {
                    dst[split_ix..split_ix + dh].copy_from_slice(&src[merged..merged + dh]);
                } else {
                    dst[merged..merged + dh].copy_from_slice(&src[split_ix..split_ix + dh]);
                }
            }
        }
    }
}
