//! Timing sweeps and analytic operation counts for the attention and
//! feed-forward variants.

use std::fs;
use std::hint::black_box;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{fast_multi_head_attention, multi_head_attention, AttentionParams};
use crate::error::{Error, Result};
use crate::feedforward::{ffn_forward, FfnParams};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MIN_REPS: usize = 5;
pub const MIN_WARMUP: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    StandardMha,
    FastMha,
    StandardFfn,
    FactorizedFfn,
}

impl Mechanism {
    pub fn tag(self) -> &'static str {
        match self {
            Mechanism::StandardMha => "standard_mha",
            Mechanism::FastMha => "fast_mha",
            Mechanism::StandardFfn => "standard_ffn",
            Mechanism::FactorizedFfn => "factorized_ffn",
        }
    }
}

/// Problem sizes. `m` only matters for fast attention, `d_f`/`d_r` only for the FFNs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sizes {
    pub n: usize,
    pub d: usize,
    pub h: usize,
    pub m: usize,
    pub d_f: usize,
    pub d_r: usize,
}

impl Sizes {
    fn check(&self, mech: Mechanism) -> Result<()> {
        let needed: &[(&str, usize)] = match mech {
            Mechanism::StandardMha => &[("n", self.n), ("d", self.d), ("h", self.h)],
            Mechanism::FastMha => &[("n", self.n), ("d", self.d), ("h", self.h), ("m", self.m)],
            Mechanism::StandardFfn => &[("n", self.n), ("d", self.d), ("d_f", self.d_f)],
            Mechanism::FactorizedFfn => &[("n", self.n), ("d", self.d), ("d_f", self.d_f), ("d_r", self.d_r)],
        };
        if let Some((name, _)) = needed.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Input(format!("{} needs a non-zero {name}", mech.tag())));
        }
        if matches!(mech, Mechanism::StandardMha | Mechanism::FastMha) && !self.d.is_multiple_of(self.h) {
            return Err(Error::Input(format!("d {} is not divisible by h {}", self.d, self.h)));
        }
        Ok(())
    }
}

/// Multiply-accumulate counts for one forward pass over a single sequence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FlopCount {
    /// Every matrix product the implementation performs.
    pub exact: u128,
    /// Products that form the similarity matrices (`Q·Kᵀ`, or `Qn·Aᵀ` and `A·Kᵀ`); zero for FFNs.
    pub similarity: u128,
    /// Asymptotic terms: `n²d + nd²` for standard and `mnd + md²` for fast
    /// attention; equal to `exact` for FFNs.
    pub leading_order: u128,
}

pub fn count_flops(mech: Mechanism, s: &Sizes) -> Result<FlopCount> {
    s.check(mech)?;
    let (n, d, h, m, d_f, d_r) = (
        s.n as u128,
        s.d as u128,
        s.h as u128,
        s.m as u128,
        s.d_f as u128,
        s.d_r as u128,
    );
    Ok(match mech {
        Mechanism::StandardMha => FlopCount {
            // Q, K, V and output projections, Q·Kᵀ and S·V.
            exact: 4 * n * d * d + 2 * n * n * d,
            similarity: n * n * d,
            leading_order: n * n * d + n * d * d,
        },
        Mechanism::FastMha => FlopCount {
            // Q, K, V projections; Qn·Aᵀ, A·Kᵀ and S2·V per head; U·Wo_i per head;
            // S1·(U·Wo_i) per head at full width d.
            exact: 3 * n * d * d + 3 * n * m * d + m * d * d + h * n * m * d,
            similarity: 2 * n * m * d,
            leading_order: m * n * d + m * d * d,
        },
        Mechanism::StandardFfn => {
            let c = 2 * n * d * d_f;
            FlopCount {
                exact: c,
                similarity: 0,
                leading_order: c,
            }
        }
        Mechanism::FactorizedFfn => {
            let c = 2 * n * d_r * (d + d_f);
            FlopCount {
                exact: c,
                similarity: 0,
                leading_order: c,
            }
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchResult {
    pub mechanism: Mechanism,
    pub n: usize,
    pub d: usize,
    pub h: usize,
    pub m: usize,
    pub d_r: usize,
    pub reps: usize,
    pub median_ns: f64,
    /// Log-log slope of median time against `n` over the whole sweep.
    pub slope: f64,
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 || xs.iter().chain(ys).any(|&v| v.is_nan() || v <= 0.0) {
        return Err(Error::Input("slope fit needs at least two positive points".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

enum Prepared {
    Attention(AttentionParams<f32>),
    Ffn(FfnParams<f32>),
}

/// One timed configuration: fixed weights, with inputs redrawn per repetition
/// from seeded streams.
struct Workload {
    mech: Mechanism,
    sizes: Sizes,
    seed: u64,
    prepared: Prepared,
}

impl Workload {
    fn new(mech: Mechanism, sizes: &Sizes, seed: u64) -> Result<Self> {
        sizes.check(mech)?;
        let mut prng = Rng::derive(seed, &[sizes.n as u64, sizes.d as u64, 1]);
        let std = 1.0 / (sizes.d as f64).sqrt();
        let prepared = match mech {
            Mechanism::StandardMha | Mechanism::FastMha => {
                Prepared::Attention(AttentionParams::init(sizes.d, sizes.h, std, &mut prng)?)
            }
            Mechanism::StandardFfn => Prepared::Ffn(FfnParams::init_standard(sizes.d, sizes.d_f, std, &mut prng)),
            Mechanism::FactorizedFfn => Prepared::Ffn(FfnParams::init_factorized(
                sizes.d, sizes.d_f, sizes.d_r, std, &mut prng,
            )),
        };
        Ok(Self {
            mech,
            sizes: *sizes,
            seed,
            prepared,
        })
    }

    /// Wall time (ns) of the forward call for repetition `rep`.
    fn time(&self, rep: usize) -> Result<f64> {
        let s = &self.sizes;
        let mut rng = Rng::derive(self.seed, &[s.n as u64, s.d as u64, 2, rep as u64]);
        let x = Tensor::from_fn(&[s.n, s.d], |_| rng.uniform(-1.0, 1.0) as f32);
        let t0 = Instant::now();
        let out = match (&self.prepared, self.mech) {
            (Prepared::Attention(p), Mechanism::FastMha) => fast_multi_head_attention(&x, p, s.m, &mut rng)?,
            (Prepared::Attention(p), _) => multi_head_attention(&x, p)?,
            (Prepared::Ffn(p), _) => ffn_forward(&x, p)?,
        };
        let ns = t0.elapsed().as_nanos() as f64;
        black_box(out);
        Ok(ns)
    }
}

fn check_reps(reps: usize, warmup: usize) -> Result<()> {
    if reps < MIN_REPS || warmup < MIN_WARMUP {
        return Err(Error::Input(format!(
            "timing needs at least {MIN_REPS} repetitions and {MIN_WARMUP} warmup iterations"
        )));
    }
    Ok(())
}

/// Median forward wall time (ns) of `mech` at `sizes` over `reps` timed
/// repetitions after `warmup` untimed ones.
pub fn time_forward(mech: Mechanism, sizes: &Sizes, reps: usize, warmup: usize, seed: u64) -> Result<f64> {
    check_reps(reps, warmup)?;
    let w = Workload::new(mech, sizes, seed)?;
    for rep in 0..warmup {
        w.time(rep)?;
    }
    let times = (warmup..warmup + reps)
        .map(|rep| w.time(rep))
        .collect::<Result<Vec<_>>>()?;
    Ok(median(times))
}

/// Times `mech` at each sequence length and fits the scaling exponent.
///
/// `n_list` must be strictly increasing with at least four points spanning a
/// factor of eight or more. Timed repetitions run in rounds over all lengths so
/// slow drifts in machine load spread evenly across the sweep.
pub fn sweep_seq_len(
    mech: Mechanism,
    n_list: &[usize],
    fixed: &Sizes,
    reps: usize,
    warmup: usize,
    seed: u64,
) -> Result<Vec<BenchResult>> {
    if n_list.len() < 4 {
        return Err(Error::Input(format!(
            "sweep needs at least 4 lengths, got {}",
            n_list.len()
        )));
    }
    if n_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Input("sweep lengths must be strictly increasing".into()));
    }
    if n_list[0] == 0 || n_list[n_list.len() - 1] < 8 * n_list[0] {
        return Err(Error::Input("sweep lengths must span at least a factor of 8".into()));
    }
    check_reps(reps, warmup)?;
    let workloads = n_list
        .iter()
        .map(|&n| Workload::new(mech, &Sizes { n, ..*fixed }, seed))
        .collect::<Result<Vec<_>>>()?;
    for w in &workloads {
        for rep in 0..warmup {
            w.time(rep)?;
        }
    }
    let mut times = vec![Vec::with_capacity(reps); workloads.len()];
    for rep in warmup..warmup + reps {
        for (w, t) in workloads.iter().zip(&mut times) {
            t.push(w.time(rep)?);
        }
    }
    let medians: Vec<f64> = times.into_iter().map(median).collect();
    let xs: Vec<f64> = n_list.iter().map(|&n| n as f64).collect();
    let slope = fit_loglog_slope(&xs, &medians)?;
    Ok(n_list
        .iter()
        .zip(medians)
        .map(|(&n, median_ns)| BenchResult {
            mechanism: mech,
            n,
            d: fixed.d,
            h: fixed.h,
            m: fixed.m,
            d_r: fixed.d_r,
            reps,
            median_ns,
            slope,
        })
        .collect())
}

pub const CSV_HEADER: &str = "mechanism,n,d,h,m,reps,median_ns,slope";

pub fn write_csv(path: &Path, results: &[BenchResult]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "{CSV_HEADER}")?;
    for r in results {
        writeln!(
            f,
            "{},{},{},{},{},{},{:.0},{:.4}",
            r.mechanism.tag(),
            r.n,
            r.d,
            r.h,
            r.m,
            r.reps,
            r.median_ns,
            r.slope
        )?;
    }
    f.flush()?;
    Ok(())
}

/// A benchmark job as read from JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSpec {
    pub mechanisms: Vec<Mechanism>,
    pub n_list: Vec<usize>,
    pub d: usize,
    pub h: usize,
    pub m: usize,
    #[serde(default)]
    pub d_f: Option<usize>,
    #[serde(default)]
    pub d_r: Option<usize>,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_reps() -> usize {
    MIN_REPS
}

fn default_warmup() -> usize {
    MIN_WARMUP
}

impl BenchSpec {
    pub fn sizes(&self) -> Sizes {
        Sizes {
            n: self.n_list.first().copied().unwrap_or(0),
            d: self.d,
            h: self.h,
            m: self.m,
            d_f: self.d_f.unwrap_or(4 * self.d),
            d_r: self.d_r.unwrap_or((self.d / 8).max(1)),
        }
    }

    pub fn run(&self) -> Result<Vec<BenchResult>> {
        let mut out = Vec::new();
        for &mech in &self.mechanisms {
            out.extend(sweep_seq_len(
                mech,
                &self.n_list,
                &self.sizes(),
                self.reps,
                self.warmup,
                self.seed,
            )?);
        }
        Ok(out)
    }
}
