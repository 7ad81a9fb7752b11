//! Multi-head self-attention: the standard softmax form and the anchored fast form.
//!
//! The anchored form replaces the `n×n` query-key similarity with the product
//! of a query-anchor matrix `S1` (`n×m`) and an anchor-key matrix `S2` (`m×n`),
//! where the anchors are `m` sampled rows of the unit-normalized queries:
//!
//! ```text
//! S1 = softmax(Qn·Aᵀ · √dk)      S2 = softmax(A·Kᵀ)      S̃ = S1·S2
//! FastAtt(Q, K, V; A) = S1·(S2·V)
//! FastMHA(X) = Σ_i S1_i·(S2_i·V_i·Wo_i)
//! ```
//!
//! Evaluating `S2·V` first keeps the cost linear in sequence length.

use crate::autograd::{KeyMask, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::{self, matmul, matmul_nt, softmax_rows_scaled, Scalar, Tensor};

/// Floor for query normalization; all-zero query rows are divided by this instead of 0.
pub const NORMALIZE_EPS: f64 = 1e-12;

/// Projection weights for `h` heads. `wq`, `wk`, `wv` are `d×d` with head `i`
/// occupying columns `i·d'..(i+1)·d'`; `wo` is `d×d` with head `i` owning rows
/// `i·d'..(i+1)·d'`, so stacking the per-head slices reproduces it.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T = f32> {
    pub heads: usize,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn new(heads: usize, wq: Tensor<T>, wk: Tensor<T>, wv: Tensor<T>, wo: Tensor<T>) -> Result<Self> {
        let p = Self { heads, wq, wk, wv, wo };
        p.validate()?;
        Ok(p)
    }

    /// Truncated-normal initialization with standard deviation `std`.
    pub fn init(hidden: usize, heads: usize, std: f64, rng: &mut Rng) -> Result<Self> {
        let mut w = || Tensor::from_fn(&[hidden, hidden], |_| T::lit(rng.truncated_normal(std)));
        Self::new(heads, w(), w(), w(), w())
    }

    pub fn hidden(&self) -> usize {
        self.wq.cols()
    }

    pub fn head_dim(&self) -> usize {
        self.hidden() / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.wq.cols();
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden size {d} is not divisible by {} heads",
                self.heads
            )));
        }
        for w in [&self.wq, &self.wk, &self.wv, &self.wo] {
            if w.shape() != [d, d] {
                return shape_err("attention params", w.shape(), &[d, d]);
            }
            if !w.all_finite() {
                return Err(Error::Input("non-finite attention weight".into()));
            }
        }
        Ok(())
    }

    fn head_cols(&self, w: &Tensor<T>, i: usize) -> Result<Tensor<T>> {
        let dh = self.head_dim();
        tensor::slice_cols(w, i * dh, (i + 1) * dh)
    }

    pub fn query_proj(&self, i: usize) -> Result<Tensor<T>> {
        self.head_cols(&self.wq, i)
    }

    pub fn key_proj(&self, i: usize) -> Result<Tensor<T>> {
        self.head_cols(&self.wk, i)
    }

    pub fn value_proj(&self, i: usize) -> Result<Tensor<T>> {
        self.head_cols(&self.wv, i)
    }

    /// Row block `Wo_i` (`d'×d`).
    pub fn output_slice(&self, i: usize) -> Result<Tensor<T>> {
        let dh = self.head_dim();
        tensor::slice_rows(&self.wo, i * dh, (i + 1) * dh)
    }
}

/// Anchors drawn from one head's queries.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet<T = f32> {
    /// Distinct zero-based query positions.
    pub indices: Vec<usize>,
    /// The matching rows of the unit-normalized query matrix (`m×d'`).
    pub vectors: Tensor<T>,
}

impl<T: Scalar> AnchorSet<T> {
    /// Anchors at explicitly chosen positions of `q`.
    pub fn at(q: &Tensor<T>, indices: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; q.rows()];
        for &i in &indices {
            if i >= q.rows() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Input(format!("anchor position {i} is out of range or repeated")));
            }
        }
        if indices.is_empty() {
            return Err(Error::Input("anchor count must be at least 1".into()));
        }
        let qn = tensor::row_l2_normalize(q, T::lit(NORMALIZE_EPS));
        let vectors = tensor::gather_rows(&qn, &indices)?;
        Ok(Self { indices, vectors })
    }
}

// ---------------------------------------------------------------------------
// single-sequence forms
// ---------------------------------------------------------------------------

fn inv_sqrt<T: Scalar>(dk: usize) -> T {
    T::one() / T::from_usize(dk).unwrap().sqrt()
}

/// `S = softmax(Q·Kᵀ/√dk)`.
pub fn query_key_similarity<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
    if q.cols() != k.cols() {
        return shape_err("query_key_similarity", q.shape(), k.shape());
    }
    Ok(softmax_rows_scaled(&matmul_nt(q, k)?, inv_sqrt(q.cols())))
}

pub fn standard_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    if k.rows() != v.rows() || q.rank() != 2 {
        return shape_err("standard_attention", k.shape(), v.shape());
    }
    matmul(&query_key_similarity(q, k)?, v)
}

fn check_width<T: Scalar>(x: &Tensor<T>, params: &AttentionParams<T>) -> Result<()> {
    params.validate()?;
    if x.rank() != 2 || x.cols() != params.hidden() {
        return shape_err("attention input", x.shape(), params.wq.shape());
    }
    Ok(())
}

/// `Concat(Z_1..Z_h)·Wo` with `Z_i = Att(X·Wq_i, X·Wk_i, X·Wv_i)`.
pub fn multi_head_attention<T: Scalar>(x: &Tensor<T>, params: &AttentionParams<T>) -> Result<Tensor<T>> {
    check_width(x, params)?;
    let mut heads = Vec::with_capacity(params.heads);
    for i in 0..params.heads {
        let q = matmul(x, &params.query_proj(i)?)?;
        let k = matmul(x, &params.key_proj(i)?)?;
        let v = matmul(x, &params.value_proj(i)?)?;
        heads.push(standard_attention(&q, &k, &v)?);
    }
    let refs: Vec<&Tensor<T>> = heads.iter().collect();
    matmul(&tensor::concat_cols(&refs)?, &params.wo)
}

/// Samples `m` distinct anchor positions uniformly without replacement.
///
/// `valid` optionally marks non-pad positions; only those are eligible. `m` is
/// clamped to the number of eligible positions.
pub fn select_anchors<T: Scalar>(
    q: &Tensor<T>,
    m: usize,
    valid: Option<&[bool]>,
    rng: &mut Rng,
) -> Result<AnchorSet<T>> {
    if m == 0 {
        return Err(Error::Input("anchor count must be at least 1".into()));
    }
    let n = q.rows();
    let eligible: Vec<usize> = match valid {
        Some(v) if v.len() != n => return shape_err("select_anchors", q.shape(), &[v.len()]),
        Some(v) => (0..n).filter(|&i| v[i]).collect(),
        None => (0..n).collect(),
    };
    if eligible.is_empty() {
        return Err(Error::Input("no non-pad positions to sample anchors from".into()));
    }
    let indices: Vec<usize> = rng
        .sample_distinct(eligible.len(), m)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    let qn = tensor::row_l2_normalize(q, T::lit(NORMALIZE_EPS));
    let vectors = tensor::gather_rows(&qn, &indices)?;
    Ok(AnchorSet { indices, vectors })
}

/// `S1 = softmax(Qn·Aᵀ·√dk)` for unit-normalized queries and anchors.
pub fn query_anchor_similarity<T: Scalar>(qn: &Tensor<T>, anchors: &Tensor<T>) -> Result<Tensor<T>> {
    if qn.cols() != anchors.cols() {
        return shape_err("query_anchor_similarity", qn.shape(), anchors.shape());
    }
    let scale = T::from_usize(qn.cols()).unwrap().sqrt();
    Ok(softmax_rows_scaled(&matmul_nt(qn, anchors)?, scale))
}

/// `S2 = softmax(A·Kᵀ)`; keys are used as-is.
pub fn anchor_key_similarity<T: Scalar>(anchors: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
    if anchors.cols() != k.cols() {
        return shape_err("anchor_key_similarity", anchors.shape(), k.shape());
    }
    Ok(softmax_rows_scaled(&matmul_nt(anchors, k)?, T::one()))
}

/// `S̃ = S1·S2`: each row is the `S1`-weighted average of the anchor-key rows.
pub fn approx_similarity<T: Scalar>(s1: &Tensor<T>, s2: &Tensor<T>) -> Result<Tensor<T>> {
    matmul(s1, s2)
}

/// `S1·(S2·V)`, evaluated right to left.
pub fn fast_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    anchors: &AnchorSet<T>,
) -> Result<Tensor<T>> {
    if k.rows() != v.rows() || q.cols() != k.cols() {
        return shape_err("fast_attention", k.shape(), v.shape());
    }
    let qn = tensor::row_l2_normalize(q, T::lit(NORMALIZE_EPS));
    let s1 = query_anchor_similarity(&qn, &anchors.vectors)?;
    let s2 = anchor_key_similarity(&anchors.vectors, k)?;
    matmul(&s1, &matmul(&s2, v)?)
}

/// Fast multi-head attention in merged form `Σ_i S1_i·(S2_i·V_i·Wo_i)`,
/// sampling one anchor set per head from `rng`.
pub fn fast_multi_head_attention<T: Scalar>(
    x: &Tensor<T>,
    params: &AttentionParams<T>,
    m: usize,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    Ok(fast_multi_head_attention_traced(x, params, m, rng)?.0)
}

/// As [`fast_multi_head_attention`], also returning the sampled anchor sets.
pub fn fast_multi_head_attention_traced<T: Scalar>(
    x: &Tensor<T>,
    params: &AttentionParams<T>,
    m: usize,
    rng: &mut Rng,
) -> Result<(Tensor<T>, Vec<AnchorSet<T>>)> {
    check_width(x, params)?;
    let mut out = Tensor::zeros(&[x.rows(), params.hidden()]);
    let mut sets = Vec::with_capacity(params.heads);
    for i in 0..params.heads {
        let q = matmul(x, &params.query_proj(i)?)?;
        let k = matmul(x, &params.key_proj(i)?)?;
        let v = matmul(x, &params.value_proj(i)?)?;
        let anchors = select_anchors(&q, m, None, rng)?;
        let qn = tensor::row_l2_normalize(&q, T::lit(NORMALIZE_EPS));
        let s1 = query_anchor_similarity(&qn, &anchors.vectors)?;
        let s2 = anchor_key_similarity(&anchors.vectors, &k)?;
        let phi = matmul(&matmul(&s2, &v)?, &params.output_slice(i)?)?;
        out = tensor::add(&out, &matmul(&s1, &phi)?)?;
        sets.push(anchors);
    }
    Ok((out, sets))
}

// ---------------------------------------------------------------------------
// batched forms on a tape
// ---------------------------------------------------------------------------

/// Tape handles for one layer's projections.
#[derive(Clone, Copy, Debug)]
pub struct AttnVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Anchor positions for every `(sequence, head)` item of a batch.
///
/// Items are ordered `sequence·heads + head`. Items whose sequence has fewer
/// valid positions than requested carry fewer anchors; the batched tensors are
/// padded to `width` and the padded anchor columns are masked out of `S1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnchorPlan {
    items: Vec<Vec<usize>>,
    width: usize,
}

impl AnchorPlan {
    /// Samples anchors for each item. `valid` is `batch×seq` non-pad flags;
    /// `rng_for(sequence, head)` supplies each item's stream.
    pub fn sample(
        valid: &[bool],
        seq: usize,
        heads: usize,
        m: usize,
        mut rng_for: impl FnMut(usize, usize) -> Rng,
    ) -> Result<Self> {
        if m == 0 {
            return Err(Error::Input("anchor count must be at least 1".into()));
        }
        if seq == 0 || !valid.len().is_multiple_of(seq) {
            return shape_err("anchor plan", &[valid.len()], &[seq]);
        }
        let batch = valid.len() / seq;
        let mut items = Vec::with_capacity(batch * heads);
        for s in 0..batch {
            let eligible: Vec<usize> = (0..seq).filter(|&t| valid[s * seq + t]).collect();
            if eligible.is_empty() {
                return Err(Error::Input(format!("sequence {s} has no non-pad positions")));
            }
            for h in 0..heads {
                let mut rng = rng_for(s, h);
                items.push(
                    rng.sample_distinct(eligible.len(), m)
                        .into_iter()
                        .map(|i| eligible[i])
                        .collect(),
                );
            }
        }
        let width = items.iter().map(Vec::len).max().unwrap_or(1);
        Ok(Self { items, width })
    }

    pub fn from_items(items: Vec<Vec<usize>>) -> Result<Self> {
        if items.iter().any(Vec::is_empty) || items.is_empty() {
            return Err(Error::Input("every anchor item needs at least one anchor".into()));
        }
        let width = items.iter().map(Vec::len).max().unwrap();
        Ok(Self { items, width })
    }

    pub fn items(&self) -> &[Vec<usize>] {
        &self.items
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of anchor sets (one per item).
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Per-head Q, K, V in split layout `[B·h, n, d']`.
fn project_heads<T: Scalar>(tape: &mut Tape<T>, x: Var, w: &AttnVars, heads: usize, seq: usize) -> Result<[Var; 3]> {
    let mut out = [x; 3];
    for (slot, wm) in out.iter_mut().zip([w.wq, w.wk, w.wv]) {
        let p = tape.matmul(x, wm)?;
        *slot = tape.split_heads(p, seq, heads)?;
    }
    Ok(out)
}

/// Standard multi-head attention over a batch laid out as `[B·n, d]`.
pub fn mha_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: &AttnVars,
    heads: usize,
    seq: usize,
    key_mask: &KeyMask,
) -> Result<Var> {
    mha_tape_traced(tape, x, w, heads, seq, key_mask).map(|(_, out)| out)
}

/// As [`mha_tape`], also returning the `[B·h, n, n]` attention probabilities.
pub fn mha_tape_traced<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: &AttnVars,
    heads: usize,
    seq: usize,
    key_mask: &KeyMask,
) -> Result<(Var, Var)> {
    let [q, k, v] = project_heads(tape, x, w, heads, seq)?;
    let dh = tape.value(q).cols();
    let scores = tape.matmul_ex(q, k, false, true)?;
    let s = tape.softmax(scores, inv_sqrt(dh), Some(key_mask))?;
    let z = tape.matmul(s, v)?;
    let merged = tape.merge_heads(z, seq, heads)?;
    Ok((s, tape.matmul(merged, w.wo)?))
}

/// Intermediate similarity matrices of one fast attention evaluation.
#[derive(Clone, Copy, Debug)]
pub struct FastAttnTrace {
    pub s1: Var,
    pub s2: Var,
    pub out: Var,
}

/// Fast multi-head attention (merged form) over a batch laid out as `[B·n, d]`.
pub fn fast_mha_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: &AttnVars,
    heads: usize,
    seq: usize,
    key_mask: &KeyMask,
    plan: &AnchorPlan,
) -> Result<FastAttnTrace> {
    let [q, k, v] = project_heads(tape, x, w, heads, seq)?;
    let (items, _, dh) = tape.value(q).as_batched();
    if plan.len() != items {
        return shape_err("anchor plan", &[plan.len()], &[items]);
    }
    let width = plan.width();
    let mut index = Vec::with_capacity(items * width);
    let mut anchor_valid = Vec::with_capacity(items * width);
    for (it, anchors) in plan.items().iter().enumerate() {
        for j in 0..width {
            let pos = anchors.get(j).copied().unwrap_or(anchors[0]);
            if pos >= seq {
                return Err(Error::Input(format!("anchor position {pos} outside sequence of {seq}")));
            }
            index.push(it * seq + pos);
            anchor_valid.push(j < anchors.len());
        }
    }
    let anchor_mask = KeyMask::new(anchor_valid, width, 1)?;
    let d = tape.value(w.wo).cols();

    let qn = tape.l2_normalize(q, T::lit(NORMALIZE_EPS));
    let a = tape.gather_rows(qn, index, &[items, width, dh])?;
    let qa = tape.matmul_ex(qn, a, false, true)?;
    let s1 = tape.softmax(qa, T::from_usize(dh).unwrap().sqrt(), Some(&anchor_mask))?;
    let ak = tape.matmul_ex(a, k, false, true)?;
    let s2 = tape.softmax(ak, T::one(), Some(key_mask))?;
    let u = tape.matmul(s2, v)?;
    let wo_heads = tape.reshape(w.wo, &[heads, dh, d])?;
    let phi = tape.matmul(u, wo_heads)?;
    let gamma = tape.matmul(s1, phi)?;
    let summed = tape.sum_groups(gamma, heads)?;
    let out = tape.reshape(summed, &[items / heads * seq, d])?;
    Ok(FastAttnTrace { s1, s2, out })
}
