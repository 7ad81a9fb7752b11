//! Direct 64-bit evaluations on nested `Vec`s, written without the library's
//! kernels so they can serve as independent references.

use corebert::{Scalar, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn mat<T: Scalar>(t: &Tensor<T>) -> Mat {
    let c = t.cols();
    t.data()
        .chunks(c)
        .map(|r| r.iter().map(|v| v.f64()).collect())
        .collect()
}

pub fn vector<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.f64()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let inner = b.len();
    let cols = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| {
            assert_eq!(row.len(), inner, "oracle matmul shape");
            (0..cols).map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum()).collect()
        })
        .collect()
}

pub fn transpose(a: &Mat) -> Mat {
    let cols = a.first().map_or(0, Vec::len);
    (0..cols).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn softmax_rows(a: &Mat, scale: f64) -> Mat {
    a.iter()
        .map(|row| {
            let max = row.iter().map(|v| v * scale).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v * scale - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

pub fn normalize_rows(a: &Mat, eps: f64) -> Mat {
    a.iter()
        .map(|row| {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            row.iter().map(|v| v / n).collect()
        })
        .collect()
}

pub fn cols(a: &Mat, start: usize, end: usize) -> Mat {
    a.iter().map(|r| r[start..end].to_vec()).collect()
}

pub fn rows(a: &Mat, idx: &[usize]) -> Mat {
    idx.iter().map(|&i| a[i].clone()).collect()
}

pub fn hconcat(parts: &[Mat]) -> Mat {
    (0..parts[0].len())
        .map(|i| parts.iter().flat_map(|p| p[i].iter().copied()).collect())
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn add_bias(a: &Mat, b: &[f64]) -> Mat {
    a.iter()
        .map(|r| r.iter().zip(b).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn relu(a: &Mat) -> Mat {
    a.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect()
}

/// `softmax(Q·Kᵀ/√dk)·V`.
pub fn attention(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let dk = q[0].len() as f64;
    matmul(&softmax_rows(&matmul(q, &transpose(k)), 1.0 / dk.sqrt()), v)
}

/// Multi-head attention with head `i` reading column block `i` of each projection.
pub fn multi_head(x: &Mat, wq: &Mat, wk: &Mat, wv: &Mat, wo: &Mat, heads: usize) -> Mat {
    let dh = wq[0].len() / heads;
    let (q, k, v) = (matmul(x, wq), matmul(x, wk), matmul(x, wv));
    let z: Vec<Mat> = (0..heads)
        .map(|i| {
            let (a, b) = (i * dh, (i + 1) * dh);
            attention(&cols(&q, a, b), &cols(&k, a, b), &cols(&v, a, b))
        })
        .collect();
    matmul(&hconcat(&z), wo)
}

/// `S1 = softmax(Qn·Aᵀ·√dk)` and `S2 = softmax(A·Kᵀ)` with anchors at `idx`.
pub fn anchored(q: &Mat, k: &Mat, idx: &[usize]) -> (Mat, Mat) {
    let dk = q[0].len() as f64;
    let qn = normalize_rows(q, 1e-12);
    let a = rows(&qn, idx);
    let s1 = softmax_rows(&matmul(&qn, &transpose(&a)), dk.sqrt());
    let s2 = softmax_rows(&matmul(&a, &transpose(k)), 1.0);
    (s1, s2)
}

/// Fast attention evaluated in the reassociated order `(S1·S2)·V`.
pub fn fast_attention(q: &Mat, k: &Mat, v: &Mat, idx: &[usize]) -> Mat {
    let (s1, s2) = anchored(q, k, idx);
    matmul(&matmul(&s1, &s2), v)
}

/// `Concat(Z_i)·Wo` with `Z_i` the fast attention of head `i`.
pub fn fast_multi_head(x: &Mat, wq: &Mat, wk: &Mat, wv: &Mat, wo: &Mat, heads: usize, idx: &[Vec<usize>]) -> Mat {
    let dh = wq[0].len() / heads;
    let (q, k, v) = (matmul(x, wq), matmul(x, wk), matmul(x, wv));
    let z: Vec<Mat> = (0..heads)
        .map(|i| {
            let (a, b) = (i * dh, (i + 1) * dh);
            fast_attention(&cols(&q, a, b), &cols(&k, a, b), &cols(&v, a, b), &idx[i])
        })
        .collect();
    matmul(&hconcat(&z), wo)
}

pub fn ffn(x: &Mat, w1: &Mat, b1: &[f64], w2: &Mat, b2: &[f64]) -> Mat {
    add_bias(&matmul(&relu(&add_bias(&matmul(x, w1), b1)), w2), b2)
}

pub fn layer_norm(x: &Mat, gamma: &[f64], beta: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + eps).sqrt() * gamma[j] + beta[j])
                .collect()
        })
        .collect()
}

/// `‖a − b‖_F / max(‖b‖_F, 1e-12)`.
pub fn rel_err(a: &Mat, b: &Mat) -> f64 {
    let mut diff = 0.0;
    let mut norm = 0.0;
    for (ra, rb) in a.iter().zip(b) {
        assert_eq!(ra.len(), rb.len(), "oracle comparison shape");
        for (x, y) in ra.iter().zip(rb) {
            diff += (x - y) * (x - y);
            norm += y * y;
        }
    }
    assert_eq!(a.len(), b.len(), "oracle comparison shape");
    diff.sqrt() / norm.sqrt().max(1e-12)
}

/// Mean over rows of `½‖a_i − b_i‖₁`.
pub fn mean_tv(a: &Mat, b: &Mat) -> f64 {
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| 0.5 * x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum::<f64>())
        .sum();
    total / a.len() as f64
}
