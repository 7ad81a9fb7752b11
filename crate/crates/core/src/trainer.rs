//! AdamW optimization, learning-rate schedules, plateau detection and the
//! two-phase training controller.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Phase};
use crate::data::MlmBatch;
use crate::error::{Error, Result};
use crate::model::{self, init_model, recover_full, Mode, ModelConfig, ModelState, Pass, PathCounters};
use crate::rng::Rng;
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay applied to rank-2 weights only.
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Adam moments for a list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Scalar = f32> {
    pub cfg: OptimConfig,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: OptimConfig, sizes: &[usize]) -> Self {
        Self {
            cfg,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            step: 0,
        }
    }

    pub fn for_model(cfg: OptimConfig, state: &ModelState<T>) -> Self {
        let sizes: Vec<usize> = state.named_params().iter().map(|(_, t)| t.numel()).collect();
        Self::new(cfg, &sizes)
    }

    /// One update at learning rate `lr`. `params` yields `(name, rank, values)`.
    /// Returns the gradient norm before clipping.
    pub fn update(&mut self, params: Vec<(String, usize, &mut [T])>, grads: &[Vec<T>], lr: f64) -> Result<f64> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        let mut sq = 0.0f64;
        for ((name, _, p), g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(Error::Contract(format!("gradient for {name} has the wrong length")));
            }
            for &x in g {
                let x = x.f64();
                if !x.is_finite() {
                    return Err(Error::Training(format!("non-finite gradient in {name}")));
                }
                sq += x * x;
            }
        }
        let norm = sq.sqrt();
        let clip = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (b1t, b2t, clip_t) = (T::lit(b1), T::lit(b2), T::lit(clip));
        let (one_b1, one_b2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
        let step_size = T::lit(lr / c1);
        let inv_c2 = T::lit(1.0 / c2);
        let eps = T::lit(self.cfg.eps);
        for (i, ((_, rank, p), g)) in params.into_iter().zip(grads).enumerate() {
            let decay = if rank == 2 {
                T::lit(lr * self.cfg.weight_decay)
            } else {
                T::zero()
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g[j] * clip_t;
                m[j] = b1t * m[j] + one_b1 * gj;
                v[j] = b2t * v[j] + one_b2 * gj * gj;
                let denom = (v[j] * inv_c2).sqrt() + eps;
                p[j] -= step_size * m[j] / denom + decay * p[j];
            }
        }
        Ok(norm)
    }

    /// Updates every parameter of `state` in [`ModelState::named_params`] order.
    pub fn step_model(&mut self, state: &mut ModelState<T>, grads: &[Vec<T>], lr: f64) -> Result<f64> {
        let names: Vec<String> = state.named_params().into_iter().map(|(n, _)| n).collect();
        let params = state
            .params_mut()
            .into_iter()
            .zip(names)
            .map(|(t, n)| {
                let rank = t.rank();
                (n, rank, t.data_mut())
            })
            .collect();
        self.update(params, grads, lr)
    }
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then linear decay to 0 at `budget`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub warmup: u64,
    pub budget: u64,
}

impl Schedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup {
            self.peak * step as f64 / self.warmup as f64
        } else if step >= self.budget {
            0.0
        } else {
            self.peak * (self.budget - step) as f64 / (self.budget - self.warmup) as f64
        }
    }
}

pub fn lr_at(step: u64, schedule: &Schedule) -> f64 {
    schedule.lr_at(step)
}

/// Plateau heuristic: fires when the mean of the latest `window` losses improves
/// on the mean of the `window` before it by less than `min_rel_improvement`.
pub fn detect_plateau(history: &[f64], window: usize, min_rel_improvement: f64) -> bool {
    if window == 0 || history.len() < 2 * window {
        return false;
    }
    let n = history.len();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let prev = mean(&history[n - 2 * window..n - window]);
    let latest = mean(&history[n - window..]);
    (prev - latest) / prev < min_rel_improvement
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoSwitch {
    pub window: usize,
    pub min_rel_improvement: f64,
    /// Hard cap on the coarse phase as a fraction of `total_steps`; it is also
    /// the horizon of the coarse-phase learning-rate decay.
    #[serde(default = "default_max_phase1_fraction")]
    pub max_phase1_fraction: f64,
}

fn default_max_phase1_fraction() -> f64 {
    0.5
}

impl AutoSwitch {
    /// Window of 5% of the run and a 0.5% improvement threshold.
    pub fn defaults(total_steps: u64) -> Self {
        Self {
            window: ((total_steps as f64 * 0.05).round() as usize).max(1),
            min_rel_improvement: 0.005,
            max_phase1_fraction: default_max_phase1_fraction(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SwitchRule {
    /// Number of coarse-phase steps; 0 trains a full model from scratch.
    Fixed(u64),
    Auto(AutoSwitch),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhasePlan {
    pub total_steps: u64,
    pub switch: SwitchRule,
    pub warmup_steps: u64,
    /// Refined-phase warmup as a fraction of its budget.
    #[serde(default = "default_rewarm")]
    pub rewarm_fraction: f64,
}

fn default_rewarm() -> f64 {
    0.1
}

impl PhasePlan {
    pub fn fixed(total_steps: u64, phase1_steps: u64, warmup_steps: u64) -> Self {
        Self {
            total_steps,
            switch: SwitchRule::Fixed(phase1_steps),
            warmup_steps,
            rewarm_fraction: default_rewarm(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.rewarm_fraction) {
            return Err(Error::Config("rewarm_fraction must lie in [0, 1]".into()));
        }
        match &self.switch {
            SwitchRule::Fixed(p) if *p >= self.total_steps => Err(Error::Config(format!(
                "phase1_steps {p} must be below total_steps {}",
                self.total_steps
            ))),
            SwitchRule::Auto(a) if a.window == 0 => Err(Error::Config("plateau window must be at least 1".into())),
            SwitchRule::Auto(a) if !(a.max_phase1_fraction > 0.0 && a.max_phase1_fraction < 1.0) => {
                Err(Error::Config("max_phase1_fraction must lie in (0, 1)".into()))
            }
            _ => Ok(()),
        }
    }

    /// Latest step at which the coarse phase may end (0 when there is none).
    pub fn phase1_cap(&self) -> u64 {
        match &self.switch {
            SwitchRule::Fixed(p) => *p,
            SwitchRule::Auto(a) => {
                ((self.total_steps as f64 * a.max_phase1_fraction).round() as u64).clamp(1, self.total_steps - 1)
            }
        }
    }

    pub fn coarse_schedule(&self, peak: f64) -> Schedule {
        let budget = self.phase1_cap();
        Schedule {
            peak,
            warmup: self.warmup_steps.min(budget),
            budget,
        }
    }

    /// Refined-phase schedule given the step at which the coarse phase ended.
    pub fn refined_schedule(&self, peak: f64, switch_step: u64) -> Schedule {
        let budget = self.total_steps - switch_step;
        let warmup = if switch_step == 0 {
            self.warmup_steps
        } else {
            (self.rewarm_fraction * budget as f64).round() as u64
        };
        Schedule {
            peak,
            warmup: warmup.min(budget),
            budget,
        }
    }
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: u64,
    pub phase: Phase,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
    pub anchors_resampled: u64,
}

pub const METRICS_HEADER: &str = "step,phase,loss,lr,wall_ms,anchors_resampled";

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{:.8},{:.8e},{:.3},{}",
            self.step, self.phase, self.loss, self.lr, self.wall_ms, self.anchors_resampled
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalPoint {
    pub step: u64,
    pub phase: Phase,
    pub wall_ms: f64,
    pub loss: f64,
}

/// Held-out losses on both sides of the recovery.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SwitchReport {
    pub step: u64,
    /// Relaxed model, fast attention.
    pub pre_loss: f64,
    /// Recovered model, standard attention.
    pub post_loss: f64,
    pub detected_by_plateau: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PhaseTotals {
    pub steps: u64,
    pub wall_ms: f64,
    pub counters: PathCounters,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub total_steps: u64,
    pub switch_step: Option<u64>,
    pub final_train_loss: f64,
    pub final_eval_loss: Option<f64>,
    pub wall_ms_total: f64,
    pub coarse: PhaseTotals,
    pub refined: PhaseTotals,
    pub recoveries: u64,
    pub switch: Option<SwitchReport>,
}

pub struct RunReport {
    pub state: ModelState<f32>,
    pub rows: Vec<MetricsRow>,
    pub evals: Vec<EvalPoint>,
    pub summary: RunSummary,
}

/// Where and how often a run reports.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Evaluate on the held-out batches every this many steps (0 disables periodic evaluation).
    pub eval_every: u64,
    /// Metrics CSV, evaluation CSV and checkpoints go here when set.
    pub out_dir: Option<PathBuf>,
}

/// Mean held-out loss. Fast-attention anchors are drawn from a fixed evaluation key.
pub fn evaluate(state: &ModelState<f32>, batches: &[MlmBatch]) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::Input("no evaluation batches".into()));
    }
    let pass = Pass::for_model(&state.config, u64::MAX);
    let mut total = 0.0;
    for b in batches {
        total += model::eval_loss(state, b, &pass)?;
    }
    Ok(total / batches.len() as f64)
}

struct Sink {
    metrics: Option<BufWriter<fs::File>>,
    evals: Option<BufWriter<fs::File>>,
    dir: Option<PathBuf>,
}

impl Sink {
    fn open(dir: Option<&Path>) -> Result<Self> {
        let Some(dir) = dir else {
            return Ok(Self {
                metrics: None,
                evals: None,
                dir: None,
            });
        };
        fs::create_dir_all(dir)?;
        let mut metrics = BufWriter::new(fs::File::create(dir.join("metrics.csv"))?);
        writeln!(metrics, "{METRICS_HEADER}")?;
        let mut evals = BufWriter::new(fs::File::create(dir.join("eval.csv"))?);
        writeln!(evals, "step,phase,wall_ms,loss")?;
        Ok(Self {
            metrics: Some(metrics),
            evals: Some(evals),
            dir: Some(dir.to_path_buf()),
        })
    }

    fn row(&mut self, r: &MetricsRow) -> Result<()> {
        if let Some(f) = &mut self.metrics {
            writeln!(f, "{}", r.csv())?;
        }
        Ok(())
    }

    fn eval(&mut self, e: &EvalPoint) -> Result<()> {
        if let Some(f) = &mut self.evals {
            writeln!(f, "{},{},{:.3},{:.8}", e.step, e.phase, e.wall_ms, e.loss)?;
        }
        Ok(())
    }

    fn checkpoint(&self, name: &str, state: &ModelState<f32>, step: u64, phase: Phase) -> Result<()> {
        if let Some(d) = &self.dir {
            checkpoint::save(&d.join(name), state, step, phase)?;
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        for f in [&mut self.metrics, &mut self.evals].into_iter().flatten() {
            f.flush()?;
        }
        Ok(())
    }
}

/// Runs the two-phase schedule: relaxed training, recovery, full training.
///
/// With a fixed switch of 0 this is plain full-model training from scratch and
/// never touches the relaxed code paths. Wall time covers batch preparation,
/// forward/backward, optimizer steps and recovery, but not evaluation.
pub fn run_core(
    cfg: &ModelConfig,
    plan: &PhasePlan,
    optim: &OptimConfig,
    data: &mut dyn Iterator<Item = MlmBatch>,
    heldout: &[MlmBatch],
    opts: &RunOptions,
) -> Result<RunReport> {
    plan.validate()?;
    optim.validate()?;
    let mut model_cfg = cfg.clone();
    let coarse_steps = plan.phase1_cap();
    model_cfg.mode = if coarse_steps > 0 { Mode::Relaxed } else { Mode::Full };
    model_cfg.validate()?;
    let mut sink = Sink::open(opts.out_dir.as_deref())?;

    let mut state: ModelState<f32> = init_model(&model_cfg, &mut Rng::derive(model_cfg.seed, &[0x1417]))?;
    let mut adam = Adam::for_model(optim.clone(), &state);
    let mut phase = if coarse_steps > 0 {
        Phase::Coarse
    } else {
        Phase::Refined
    };
    let mut schedule = if coarse_steps > 0 {
        plan.coarse_schedule(optim.lr)
    } else {
        plan.refined_schedule(optim.lr, 0)
    };
    let mut phase_start = 0u64;
    let mut coarse = PhaseTotals::default();
    let mut refined = PhaseTotals::default();
    let mut history = Vec::new();
    let mut rows = Vec::with_capacity(plan.total_steps as usize);
    let mut evals = Vec::new();
    let mut switch = None;
    let mut recoveries = 0;
    let mut wall_ms = 0.0;

    for step in 1..=plan.total_steps {
        let t0 = Instant::now();
        let batch = data
            .next()
            .ok_or_else(|| Error::Training(format!("data stream exhausted at step {step}")))?;
        let pass = Pass::for_model(&state.config, step);
        let lg = model::loss_and_grads(&state, &batch, &pass)?;
        if !lg.loss.is_finite() {
            return Err(Error::Training(format!("non-finite loss at step {step}")));
        }
        let lr = schedule.lr_at(step - phase_start);
        adam.step_model(&mut state, &lg.grads, lr)?;
        let dt = t0.elapsed().as_secs_f64() * 1e3;
        wall_ms += dt;
        let totals = if phase == Phase::Coarse {
            &mut coarse
        } else {
            &mut refined
        };
        totals.steps += 1;
        totals.wall_ms += dt;
        totals.counters += lg.counters;

        let row = MetricsRow {
            step,
            phase,
            loss: lg.loss,
            lr,
            wall_ms,
            anchors_resampled: lg.counters.anchor_sets,
        };
        sink.row(&row)?;
        rows.push(row);
        history.push(lg.loss);

        if opts.eval_every > 0 && step % opts.eval_every == 0 && !heldout.is_empty() {
            let e = EvalPoint {
                step,
                phase,
                wall_ms,
                loss: evaluate(&state, heldout)?,
            };
            sink.eval(&e)?;
            evals.push(e);
        }

        if phase == Phase::Coarse {
            let plateau = match &plan.switch {
                SwitchRule::Auto(a) => detect_plateau(&history, a.window, a.min_rel_improvement),
                SwitchRule::Fixed(_) => false,
            };
            if plateau || step == coarse_steps {
                let pre_loss = if heldout.is_empty() {
                    f64::NAN
                } else {
                    evaluate(&state, heldout)?
                };
                sink.checkpoint("switch_relaxed.ckpt", &state, step, Phase::Coarse)?;
                let t1 = Instant::now();
                state = recover_full(&state)?;
                adam = Adam::for_model(optim.clone(), &state);
                let dt = t1.elapsed().as_secs_f64() * 1e3;
                wall_ms += dt;
                coarse.wall_ms += dt;
                recoveries += 1;
                let post_loss = if heldout.is_empty() {
                    f64::NAN
                } else {
                    evaluate(&state, heldout)?
                };
                switch = Some(SwitchReport {
                    step,
                    pre_loss,
                    post_loss,
                    detected_by_plateau: plateau && step != coarse_steps,
                });
                phase = Phase::Refined;
                phase_start = step;
                schedule = plan.refined_schedule(optim.lr, step);
            }
        }
    }
    sink.checkpoint("final.ckpt", &state, plan.total_steps, phase)?;
    sink.finish()?;
    let final_eval_loss = if heldout.is_empty() {
        None
    } else {
        Some(evaluate(&state, heldout)?)
    };
    let summary = RunSummary {
        total_steps: plan.total_steps,
        switch_step: switch.as_ref().map(|s| s.step),
        final_train_loss: history.last().copied().unwrap_or(f64::NAN),
        final_eval_loss,
        wall_ms_total: wall_ms,
        coarse,
        refined,
        recoveries,
        switch,
    };
    if let Some(d) = &opts.out_dir {
        fs::write(d.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(RunReport {
        state,
        rows,
        evals,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{self, synthetic_corpus, Vocab};

    #[test]
    fn zero_gradients_leave_parameters() {
        let mut adam = Adam::<f64>::new(OptimConfig::default(), &[3]);
        let mut p = vec![1.0, -2.0, 0.5];
        adam.update(vec![("b".into(), 1, &mut p)], &[vec![0.0; 3]], 0.1)
            .unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn single_scalar_step() {
        let cfg = OptimConfig {
            clip_norm: None,
            ..OptimConfig::default()
        };
        let mut adam = Adam::<f64>::new(cfg.clone(), &[1]);
        let mut p = vec![0.0];
        adam.update(vec![("s".into(), 0, &mut p)], &[vec![1.0]], 0.1).unwrap();
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps).
        assert!((p[0] + 0.1 / (1.0 + cfg.eps)).abs() < 1e-15);
    }

    #[test]
    fn decay_only_touches_matrices() {
        let mut adam = Adam::<f64>::new(OptimConfig::default(), &[1, 1]);
        let (mut w, mut b) = (vec![1.0], vec![1.0]);
        adam.update(
            vec![("w".into(), 2, &mut w), ("b".into(), 1, &mut b)],
            &[vec![0.0], vec![0.0]],
            0.5,
        )
        .unwrap();
        assert!((w[0] - (1.0 - 0.5 * 0.01)).abs() < 1e-15);
        assert_eq!(b[0], 1.0);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut adam = Adam::<f32>::new(OptimConfig::default(), &[2]);
        let mut p = vec![0.0f32; 2];
        let err = adam
            .update(
                vec![("layers.0.attn.wq".into(), 2, &mut p)],
                &[vec![0.0, f32::NAN]],
                0.1,
            )
            .unwrap_err();
        assert!(matches!(err, Error::Training(ref m) if m.contains("layers.0.attn.wq")));
    }

    #[test]
    fn clipping_caps_the_effective_gradient() {
        let cfg = OptimConfig {
            clip_norm: Some(1.0),
            ..OptimConfig::default()
        };
        let mut adam = Adam::<f64>::new(cfg, &[2]);
        let mut p = vec![0.0, 0.0];
        let norm = adam
            .update(vec![("w".into(), 1, &mut p)], &[vec![30.0, 40.0]], 0.1)
            .unwrap();
        assert_eq!(norm, 50.0);
        assert!((adam.m[0][0] - 0.1 * 0.6).abs() < 1e-12);
    }

    #[test]
    fn schedule_endpoints() {
        let s = Schedule {
            peak: 1e-3,
            warmup: 10,
            budget: 100,
        };
        assert_eq!(lr_at(0, &s), 0.0);
        assert_eq!(lr_at(10, &s), 1e-3);
        assert_eq!(lr_at(100, &s), 0.0);
        assert!((lr_at(5, &s) - 5e-4).abs() < 1e-18);
        assert!((lr_at(55, &s) - 5e-4).abs() < 1e-18);
    }

    #[test]
    fn plateau_examples() {
        let geometric: Vec<f64> = (0..200).map(|i| 10.0 * 0.97f64.powi(i)).collect();
        assert!(!detect_plateau(&geometric, 10, 1e-6));
        let flat = vec![2.0; 19];
        assert!(!detect_plateau(&flat, 10, 0.005));
        assert!(detect_plateau(&[2.0; 20], 10, 0.005));
    }

    #[test]
    fn plan_validation() {
        assert!(PhasePlan::fixed(10, 10, 1).validate().is_err());
        assert!(PhasePlan::fixed(10, 0, 1).validate().is_ok());
        let mut p = PhasePlan::fixed(10, 5, 1);
        p.switch = SwitchRule::Auto(AutoSwitch {
            window: 0,
            min_rel_improvement: 0.1,
            max_phase1_fraction: 0.5,
        });
        assert!(p.validate().is_err());
        let rs = PhasePlan::fixed(1000, 500, 50).refined_schedule(1.0, 500);
        assert_eq!((rs.warmup, rs.budget), (50, 500));
    }

    fn tiny_setup() -> (ModelConfig, Vec<Vec<u32>>, usize) {
        let text = synthetic_corpus(40_000, 2);
        let vocab = Vocab::from_text(&text, 400).unwrap();
        let seqs = data::pack_sequences(&text, &vocab, 16).unwrap();
        let cfg = ModelConfig {
            layers: 1,
            hidden: 16,
            heads: 2,
            ffn_inner: None,
            factor_rank: 2,
            anchors: 4,
            max_seq_len: 16,
            vocab_size: vocab.len(),
            mode: Mode::Relaxed,
            seed: 11,
        };
        (cfg, seqs, vocab.len())
    }

    fn run(plan: &PhasePlan) -> RunReport {
        let (cfg, seqs, v) = tiny_setup();
        let held = data::fixed_batches(&seqs[..8], v, 16, 4, 2, 0.15, 5).unwrap();
        let mut stream = data::make_batches(seqs, v, 16, 4, 0.15, Rng::new(3)).unwrap();
        let optim = OptimConfig {
            lr: 1e-3,
            ..OptimConfig::default()
        };
        run_core(&cfg, plan, &optim, &mut stream, &held, &RunOptions::default()).unwrap()
    }

    #[test]
    fn baseline_never_touches_relaxed_paths() {
        let r = run(&PhasePlan::fixed(6, 0, 2));
        let s = &r.summary;
        assert_eq!(s.recoveries, 0);
        assert_eq!(s.coarse.steps, 0);
        assert_eq!(s.refined.counters.fast_attention + s.refined.counters.factorized_ffn, 0);
        assert!(r
            .rows
            .iter()
            .all(|row| row.anchors_resampled == 0 && row.phase == Phase::Refined));
        assert_eq!(r.state.mode(), Mode::Full);
    }

    #[test]
    fn fixed_switch_recovers_once() {
        let r = run(&PhasePlan::fixed(8, 4, 1));
        let s = &r.summary;
        assert_eq!(s.switch_step, Some(4));
        assert_eq!((s.coarse.steps, s.refined.steps, s.recoveries), (4, 4, 1));
        assert!(r.rows[..4].iter().all(|row| row.anchors_resampled > 0));
        assert!(r.rows[4..].iter().all(|row| row.anchors_resampled == 0));
        let sw = s.switch.as_ref().unwrap();
        assert!(sw.pre_loss.is_finite() && sw.post_loss.is_finite());
    }

    #[test]
    fn runs_are_reproducible() {
        let plan = PhasePlan::fixed(6, 3, 1);
        let a = run(&plan);
        let b = run(&plan);
        let strip = |r: &RunReport| {
            r.rows
                .iter()
                .map(|x| (x.step, x.loss.to_bits(), x.lr.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn exhausted_stream_is_training_error() {
        let (cfg, seqs, v) = tiny_setup();
        let stream = data::make_batches(seqs, v, 16, 4, 0.15, Rng::new(3)).unwrap();
        let mut short = stream.take(2);
        let err = run_core(
            &cfg,
            &PhasePlan::fixed(5, 0, 1),
            &OptimConfig::default(),
            &mut short,
            &[],
            &RunOptions::default(),
        )
        .err()
        .unwrap();
        assert!(matches!(err, Error::Training(ref m) if m.contains("exhausted")));
    }

    #[test]
    fn scripted_plateau_fires_within_one_window() {
        // Linear approach to a floor at step F with a per-window relative drop of 1.5·τ, then flat.
        let (w, tau, f) = (10usize, 0.005, 100usize);
        let r = 1.5 * tau / w as f64;
        let losses: Vec<f64> = (0..300).map(|i| 2.0 * (1.0 + r * f.saturating_sub(i) as f64)).collect();
        let fired = (1..=losses.len())
            .find(|&k| detect_plateau(&losses[..k], w, tau))
            .unwrap();
        assert!(fired > f && fired <= f + w, "{fired}");
    }

    fn oracle_first_plateau(losses: &[f64], w: usize, tau: f64) -> Option<usize> {
        (2 * w..=losses.len()).find(|&k| {
            let prev: f64 = losses[k - 2 * w..k - w].iter().sum::<f64>() / w as f64;
            let last: f64 = losses[k - w..k].iter().sum::<f64>() / w as f64;
            (prev - last) / prev < tau
        })
    }

    #[test]
    fn auto_switch_matches_windowed_oracle() {
        let mut plan = PhasePlan::fixed(24, 0, 2);
        plan.switch = SwitchRule::Auto(AutoSwitch {
            window: 3,
            min_rel_improvement: 0.02,
            max_phase1_fraction: 0.75,
        });
        let r = run(&plan);
        let coarse: Vec<f64> = r
            .rows
            .iter()
            .filter(|x| x.phase == Phase::Coarse)
            .map(|x| x.loss)
            .collect();
        let expected = oracle_first_plateau(&coarse, 3, 0.02).map_or(18, |k| k.min(18)) as u64;
        assert_eq!(r.summary.switch_step, Some(expected));
        assert_eq!(coarse.len() as u64, expected);
    }
}
