//! Measurement routines behind the acceptance checks. Each returns the measured
//! quantities; callers decide how to assert or report them.

use std::path::Path;

use corebert::attention::{
    anchor_key_similarity, approx_similarity, fast_attention, fast_multi_head_attention_traced, multi_head_attention,
    query_anchor_similarity, query_key_similarity, select_anchors, standard_attention, AnchorSet, AttentionParams,
    NORMALIZE_EPS,
};
use corebert::checkpoint::{self, Phase};
use corebert::feedforward::{ffn_forward, FfnParams};
use corebert::model::{init_model, recover_full, Mode, ModelConfig, ModelState};
use corebert::tensor::{row_l2_normalize, scale};
use corebert::{Rng, Scalar, Tensor};

use super::oracle::{self, mat, vector};

pub fn uniform<T: Scalar>(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.uniform(lo, hi)))
}

fn between(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// Smallest entry and largest row-sum deviation, with sums taken in 64-bit.
pub fn stochastic_stats<T: Scalar>(s: &Tensor<T>) -> (f64, f64) {
    let c = s.cols();
    let min = s.data().iter().map(|v| v.f64()).fold(f64::INFINITY, f64::min);
    let dev = s
        .data()
        .chunks(c)
        .map(|r| (r.iter().map(|v| v.f64()).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    (min, dev)
}

#[derive(Clone, Debug)]
pub struct Measured {
    pub name: &'static str,
    pub value: f64,
    pub second: f64,
}

/// Random 32-bit instances of `S`, `S2`, `S1` and `S1·S2`; reports the minimum
/// entry (`value`) and worst row-sum deviation (`second`) per matrix.
pub fn stochasticity(instances: usize, seed: u64) -> Vec<Measured> {
    let mut rng = Rng::new(seed);
    let names = ["query-key S", "anchor-key S2", "query-anchor S1", "approximate S1*S2"];
    let mut worst: Vec<(f64, f64)> = vec![(f64::INFINITY, 0.0); 4];
    for _ in 0..instances {
        let n = between(&mut rng, 1, 64);
        let dk = between(&mut rng, 1, 32);
        let m = between(&mut rng, 1, n.min(16));
        let spread = rng.uniform(0.1, 10.0);
        let q: Tensor<f32> = uniform(&mut rng, &[n, dk], -spread, spread);
        let k: Tensor<f32> = uniform(&mut rng, &[n, dk], -spread, spread);
        let anchors = select_anchors(&q, m, None, &mut rng).unwrap();
        let qn = row_l2_normalize(&q, NORMALIZE_EPS as f32);
        let s = query_key_similarity(&q, &k).unwrap();
        let s2 = anchor_key_similarity(&anchors.vectors, &k).unwrap();
        let s1 = query_anchor_similarity(&qn, &anchors.vectors).unwrap();
        let approx = approx_similarity(&s1, &s2).unwrap();
        for (w, t) in worst.iter_mut().zip([&s, &s2, &s1, &approx]) {
            let (mn, dev) = stochastic_stats(t);
            w.0 = w.0.min(mn);
            w.1 = w.1.max(dev);
        }
    }
    names
        .iter()
        .zip(worst)
        .map(|(&name, (value, second))| Measured { name, value, second })
        .collect()
}

/// Random 32-bit instances with `n ≤ 8`, `d ≤ 8`, each compared with the
/// 64-bit oracle; reports the worst relative error per operation.
pub fn oracle_equivalence(instances: usize, seed: u64) -> Vec<Measured> {
    let mut rng = Rng::new(seed);
    let mut worst = [0.0f64; 6];
    for _ in 0..instances {
        let n = between(&mut rng, 1, 8);
        let dk = between(&mut rng, 1, 8);
        let dv = between(&mut rng, 1, 8);
        let q: Tensor<f32> = uniform(&mut rng, &[n, dk], -1.5, 1.5);
        let k: Tensor<f32> = uniform(&mut rng, &[n, dk], -1.5, 1.5);
        let v: Tensor<f32> = uniform(&mut rng, &[n, dv], -1.5, 1.5);
        let got = standard_attention(&q, &k, &v).unwrap();
        worst[0] = worst[0].max(oracle::rel_err(
            &mat(&got),
            &oracle::attention(&mat(&q), &mat(&k), &mat(&v)),
        ));

        let m = between(&mut rng, 1, n);
        let anchors = select_anchors(&q, m, None, &mut rng).unwrap();
        let got = fast_attention(&q, &k, &v, &anchors).unwrap();
        let want = oracle::fast_attention(&mat(&q), &mat(&k), &mat(&v), &anchors.indices);
        worst[1] = worst[1].max(oracle::rel_err(&mat(&got), &want));

        let d = between(&mut rng, 1, 8);
        let divisors: Vec<usize> = (1..=d).filter(|h| d.is_multiple_of(*h)).collect();
        let heads = divisors[rng.below(divisors.len())];
        let x: Tensor<f32> = uniform(&mut rng, &[n, d], -1.5, 1.5);
        let mut w = || uniform::<f32>(&mut rng, &[d, d], -1.0, 1.0);
        let p = AttentionParams::new(heads, w(), w(), w(), w()).unwrap();
        let (wq, wk, wv, wo) = (mat(&p.wq), mat(&p.wk), mat(&p.wv), mat(&p.wo));
        let got = multi_head_attention(&x, &p).unwrap();
        let want = oracle::multi_head(&mat(&x), &wq, &wk, &wv, &wo, heads);
        worst[2] = worst[2].max(oracle::rel_err(&mat(&got), &want));

        let m = between(&mut rng, 1, n);
        let (got, sets) = fast_multi_head_attention_traced(&x, &p, m, &mut rng).unwrap();
        let idx: Vec<Vec<usize>> = sets.into_iter().map(|s| s.indices).collect();
        let want = oracle::fast_multi_head(&mat(&x), &wq, &wk, &wv, &wo, heads, &idx);
        worst[3] = worst[3].max(oracle::rel_err(&mat(&got), &want));

        let d_f = between(&mut rng, 1, 8);
        let d_r = between(&mut rng, 1, d.min(d_f));
        let mut standard = FfnParams::<f32>::init_standard(d, d_f, 0.5, &mut rng);
        let mut factorized = FfnParams::<f32>::init_factorized(d, d_f, d_r, 0.5, &mut rng);
        for p in [&mut standard, &mut factorized] {
            randomize_biases(p, &mut rng);
        }
        if let FfnParams::Standard { w1, b1, w2, b2 } = &standard {
            let want = oracle::ffn(&mat(&x), &mat(w1), &vector(b1), &mat(w2), &vector(b2));
            worst[4] = worst[4].max(oracle::rel_err(&mat(&ffn_forward(&x, &standard).unwrap()), &want));
        }
        if let FfnParams::Factorized {
            w1a,
            w1b,
            w2a,
            w2b,
            b1,
            b2,
        } = &factorized
        {
            let w1 = oracle::matmul(&mat(w1a), &mat(w1b));
            let w2 = oracle::matmul(&mat(w2a), &mat(w2b));
            let want = oracle::ffn(&mat(&x), &w1, &vector(b1), &w2, &vector(b2));
            worst[5] = worst[5].max(oracle::rel_err(&mat(&ffn_forward(&x, &factorized).unwrap()), &want));
        }
    }
    let names = [
        "standard_attention",
        "fast_attention",
        "multi_head_attention",
        "fast_multi_head_attention",
        "ffn_forward standard",
        "ffn_forward factorized",
    ];
    names
        .iter()
        .zip(worst)
        .map(|(&name, value)| Measured {
            name,
            value,
            second: 0.0,
        })
        .collect()
}

fn randomize_biases(p: &mut FfnParams<f32>, rng: &mut Rng) {
    let (b1, b2) = match p {
        FfnParams::Standard { b1, b2, .. } | FfnParams::Factorized { b1, b2, .. } => (b1, b2),
    };
    *b1 = uniform(rng, b1.shape(), -0.5, 0.5);
    *b2 = uniform(rng, b2.shape(), -0.5, 0.5);
}

/// A relaxed model at desk dimensions whose weights have moved away from init.
pub fn perturbed_relaxed(vocab: usize, seed: u64) -> ModelState<f32> {
    let cfg = ModelConfig::desk(vocab, Mode::Relaxed, seed);
    let mut state: ModelState<f32> = init_model(&cfg, &mut Rng::new(seed)).unwrap();
    let mut rng = Rng::new(seed ^ 0x5eed);
    for p in state.params_mut() {
        for v in p.data_mut() {
            *v += rng.uniform(-0.05, 0.05) as f32;
        }
    }
    state
}

pub struct RecoveryReport {
    /// Largest FFN output difference over all layers and inputs.
    pub ffn_max_abs: f64,
    /// Names of carried-over arrays that are not bitwise equal.
    pub changed: Vec<String>,
    pub carried_over: usize,
}

pub fn recovery_exactness(inputs: usize, seed: u64) -> RecoveryReport {
    let relaxed = perturbed_relaxed(512, seed);
    let full = recover_full(&relaxed).unwrap();
    let mut rng = Rng::new(seed + 1);
    let d = relaxed.config.hidden;
    let mut ffn_max_abs: f64 = 0.0;
    for i in 0..inputs {
        let layer = i % relaxed.layers.len();
        let x: Tensor<f32> = uniform(&mut rng, &[16, d], -2.0, 2.0);
        let a = ffn_forward(&x, &relaxed.layers[layer].ffn).unwrap();
        let b = ffn_forward(&x, &full.layers[layer].ffn).unwrap();
        ffn_max_abs = ffn_max_abs.max(a.max_abs_diff(&b) as f64);
    }
    let full_params: std::collections::HashMap<String, &Tensor<f32>> = full.named_params().into_iter().collect();
    let mut changed = Vec::new();
    let mut carried_over = 0;
    for (name, t) in relaxed.named_params() {
        let factor = [".w1a", ".w1b", ".w2a", ".w2b"].iter().any(|s| name.ends_with(s));
        if factor {
            continue;
        }
        carried_over += 1;
        let same = full_params.get(&name).is_some_and(|u| {
            u.shape() == t.shape() && u.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits())
        });
        if !same {
            changed.push(name);
        }
    }
    RecoveryReport {
        ffn_max_abs,
        changed,
        carried_over,
    }
}

/// Queries in `m` clusters on the unit sphere, each query within chord
/// distance `radius` of its cluster centre, with one anchor per cluster.
/// Returns the mean row total-variation distance from `S1·S2` to the
/// unit-temperature similarity `softmax(Qn·Kᵀ)` (`value`) and to the
/// `1/√dk`-scaled similarity (`second`).
pub fn clustered_fidelity(radius: f64, instances: usize, seed: u64) -> Measured {
    let (n, m, dk) = (128, 8, 128);
    let mut rng = Rng::new(seed);
    let (mut matched, mut literal) = (0.0, 0.0);
    for _ in 0..instances {
        let centres = orthonormal_rows(m, dk, &mut rng);
        let mut q = Tensor::<f64>::zeros(&[n, dk]);
        for i in 0..n {
            let c = &centres[i % m];
            // The first member of each cluster sits on its centre and is the anchor.
            let delta = if i < m { 0.0 } else { radius * rng.uniform(0.0, 1.0) };
            let theta = 2.0 * (delta / 2.0).asin();
            let u = tangent(c, &mut rng);
            for j in 0..dk {
                q.data_mut()[i * dk + j] = theta.cos() * c[j] + theta.sin() * u[j];
            }
        }
        let k = Tensor::<f64>::from_fn(&[n, dk], |_| rng.normal());
        let anchors = AnchorSet::at(&q, (0..m).collect()).unwrap();
        let qn = row_l2_normalize(&q, NORMALIZE_EPS);
        let s1 = query_anchor_similarity(&qn, &anchors.vectors).unwrap();
        let s2 = anchor_key_similarity(&anchors.vectors, &k).unwrap();
        let approx = mat(&approx_similarity(&s1, &s2).unwrap());
        let unit = query_key_similarity(&scale(&qn, (dk as f64).sqrt()), &k).unwrap();
        matched += oracle::mean_tv(&mat(&unit), &approx);
        literal += oracle::mean_tv(&mat(&query_key_similarity(&q, &k).unwrap()), &approx);
    }
    Measured {
        name: "clustered fidelity",
        value: matched / instances as f64,
        second: literal / instances as f64,
    }
}

fn orthonormal_rows(m: usize, d: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(m);
    while out.len() < m {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for u in &out {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            out.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    out
}

/// Random unit vector orthogonal to the unit vector `c`.
fn tangent(c: &[f64], rng: &mut Rng) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..c.len()).map(|_| rng.normal()).collect();
        let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|a| a / norm).collect();
        }
    }
}

pub struct CountReport {
    pub closed_form: [usize; 2],
    pub enumerated: [usize; 2],
    pub ffn: [usize; 2],
}

/// Closed-form parameter counts against the array sizes listed in saved
/// checkpoints, for `[relaxed, full]` at desk defaults.
pub fn parameter_counts(dir: &Path, vocab: usize) -> CountReport {
    let mut report = CountReport {
        closed_form: [0; 2],
        enumerated: [0; 2],
        ffn: [0; 2],
    };
    for (i, mode) in [Mode::Relaxed, Mode::Full].into_iter().enumerate() {
        let cfg = ModelConfig::desk(vocab, mode, 1);
        let state: ModelState<f32> = init_model(&cfg, &mut Rng::new(1)).unwrap();
        let path = dir.join(format!("{mode}.ckpt"));
        checkpoint::save(&path, &state, 0, Phase::Coarse).unwrap();
        let header = checkpoint::read_header(&path).unwrap();
        report.closed_form[i] = cfg.param_count(mode);
        report.enumerated[i] = header.arrays.iter().map(|a| a.shape.iter().product::<usize>()).sum();
        report.ffn[i] = cfg.ffn_param_count(mode);
    }
    report
}
