//! Command implementations behind the `corebert` binary.
//!
//! Each command writes its human-readable report to the supplied writer and
//! returns a structured result, so tests can drive them without a subprocess.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use corebert::bench::{self, BenchResult, BenchSpec};
use corebert::checkpoint::{self, Phase};
use corebert::config::{resolve_output, RunConfig};
use corebert::data::{self, Vocab};
use corebert::model::{self, attention_probe, probe_inputs, recover_full, Inputs, Mode, Pass};
use corebert::trainer::{self, RunOptions, RunSummary};
use corebert::{Error, Result};

/// Mask rate and seed used to corrupt held-out text for `eval`.
pub const EVAL_MASK_RATE: f64 = 0.15;
pub const EVAL_SEED: u64 = 0xE7A1;

/// Trains per the config and writes `config.json`, `vocab.tsv`, `metrics.csv`,
/// `eval.csv`, checkpoints and `summary.json` to the output directory.
pub fn train(config: &Path, overrides: &[String], out: &mut dyn Write) -> Result<(PathBuf, RunSummary)> {
    let cfg = RunConfig::load(config, overrides)?;
    let dir = cfg.resolved_output_dir();
    fs::create_dir_all(&dir)?;
    let seq_len = cfg.model.max_seq_len;
    let prepared = cfg.data.prepare(seq_len)?;
    prepared.vocab.export(&dir.join("vocab.tsv"))?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    writeln!(
        out,
        "corpus: {} bytes, vocab {}, {} train / {} held-out sequences",
        prepared.corpus_bytes,
        prepared.vocab.len(),
        prepared.train.len(),
        prepared.heldout.len()
    )?;

    let model_cfg = cfg.model.to_config(prepared.vocab.len(), Mode::Relaxed, cfg.seed);
    let mut stream = prepared.stream(&cfg.data, seq_len, cfg.seed)?;
    let heldout = prepared.eval_batches(&cfg.data, seq_len, cfg.seed)?;
    let opts = RunOptions {
        eval_every: cfg.eval_every,
        out_dir: Some(dir.clone()),
    };
    let report = trainer::run_core(&model_cfg, &cfg.plan, &cfg.optim, &mut stream, &heldout, &opts)?;
    let s = report.summary;
    writeln!(out, "steps: {} coarse + {} refined", s.coarse.steps, s.refined.steps)?;
    if let Some(sw) = &s.switch {
        writeln!(
            out,
            "switch at step {}: held-out loss {:.4} relaxed, {:.4} recovered",
            sw.step, sw.pre_loss, sw.post_loss
        )?;
    }
    writeln!(out, "final train loss: {:.4}", s.final_train_loss)?;
    if let Some(l) = s.final_eval_loss {
        writeln!(out, "final held-out loss: {l:.4}")?;
    }
    writeln!(
        out,
        "wall time: {:.1} s (coarse {:.1} s, refined {:.1} s)",
        s.wall_ms_total / 1e3,
        s.coarse.wall_ms / 1e3,
        s.refined.wall_ms / 1e3
    )?;
    writeln!(out, "outputs: {}", dir.display())?;
    Ok((dir, s))
}

/// Parameter counts on both sides of a recovery.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecoverCounts {
    pub relaxed: usize,
    pub full: usize,
}

/// Converts a relaxed checkpoint into a full one.
pub fn recover(input: &Path, output: &Path, out: &mut dyn Write) -> Result<RecoverCounts> {
    let ckpt = checkpoint::load(input)?;
    let full = recover_full(&ckpt.state)?;
    let output = resolve_output(output);
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    checkpoint::save(&output, &full, ckpt.step, Phase::Refined)?;
    let counts = RecoverCounts {
        relaxed: ckpt.state.param_count(),
        full: full.param_count(),
    };
    writeln!(out, "parameters before: {}", counts.relaxed)?;
    writeln!(out, "parameters after:  {}", counts.full)?;
    writeln!(out, "wrote {}", output.display())?;
    Ok(counts)
}

/// Runs the sweeps of a bench spec and writes them as CSV.
pub fn bench(spec: &Path, csv: &Path, out: &mut dyn Write) -> Result<Vec<BenchResult>> {
    let text = fs::read_to_string(spec)
        .map_err(|e| Error::Config(format!("cannot read bench spec {}: {e}", spec.display())))?;
    let spec: BenchSpec = serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid bench spec: {e}")))?;
    let results = spec.run()?;
    let csv = resolve_output(csv);
    if let Some(parent) = csv.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    bench::write_csv(&csv, &results)?;
    for r in &results {
        writeln!(
            out,
            "{:<15} n={:<5} median {:>12.0} ns",
            r.mechanism.tag(),
            r.n,
            r.median_ns
        )?;
    }
    for &mech in &spec.mechanisms {
        if let Some(r) = results.iter().find(|r| r.mechanism == mech) {
            writeln!(out, "{} slope: {:.3}", mech.tag(), r.slope)?;
        }
    }
    writeln!(out, "wrote {}", csv.display())?;
    Ok(results)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOutcome {
    pub loss: f64,
    pub perplexity: f64,
    pub batches: usize,
}

/// Held-out MLM loss of a checkpoint on a text file. The vocabulary defaults
/// to `vocab.tsv` beside the checkpoint.
pub fn eval(
    ckpt: &Path,
    corpus: &Path,
    vocab: Option<&Path>,
    batches: usize,
    out: &mut dyn Write,
) -> Result<EvalOutcome> {
    let loaded = checkpoint::load(ckpt)?;
    let cfg = &loaded.state.config;
    let vocab_path = match vocab {
        Some(p) => p.to_path_buf(),
        None => ckpt.parent().unwrap_or(Path::new(".")).join("vocab.tsv"),
    };
    let vocab = Vocab::load(&vocab_path)?;
    if vocab.len() != cfg.vocab_size {
        return Err(Error::Input(format!(
            "vocabulary {} has {} entries but the model expects {}",
            vocab_path.display(),
            vocab.len(),
            cfg.vocab_size
        )));
    }
    let text = fs::read_to_string(corpus)
        .map_err(|e| Error::Input(format!("cannot read corpus {}: {e}", corpus.display())))?;
    let seqs = data::pack_sequences(&text, &vocab, cfg.max_seq_len)?;
    let held = data::fixed_batches(
        &seqs,
        cfg.vocab_size,
        cfg.max_seq_len,
        32,
        batches,
        EVAL_MASK_RATE,
        EVAL_SEED,
    )?;
    let loss = trainer::evaluate(&loaded.state, &held)?;
    let outcome = EvalOutcome {
        loss,
        perplexity: loss.exp(),
        batches: held.len(),
    };
    writeln!(out, "mode: {}", cfg.mode)?;
    writeln!(out, "batches: {}", outcome.batches)?;
    writeln!(out, "loss: {:.6}", outcome.loss)?;
    writeln!(out, "perplexity: {:.3}", outcome.perplexity)?;
    Ok(outcome)
}

/// Prints a checkpoint's config, phase, array shapes and an attention
/// stochasticity probe.
pub fn inspect(ckpt: &Path, out: &mut dyn Write) -> Result<()> {
    let header = checkpoint::read_header(ckpt)?;
    let loaded = checkpoint::load(ckpt)?;
    writeln!(out, "config: {}", serde_json::to_string(&header.config)?)?;
    writeln!(
        out,
        "step: {}  phase: {}  mode: {}",
        header.step, header.phase, header.config.mode
    )?;
    writeln!(out, "parameters: {}", loaded.state.param_count())?;
    for a in &header.arrays {
        writeln!(out, "  {:<24} {:?}", a.name, a.shape)?;
    }
    let cfg = &loaded.state.config;
    let (ids, pad) = probe_inputs(cfg, 32);
    let inputs = Inputs::new(&ids, &pad, 1, ids.len())?;
    let checks = attention_probe(&loaded.state, &inputs, &Pass::for_model(cfg, 0))?;
    writeln!(out, "stochastic check on a {}-token probe:", ids.len())?;
    for c in &checks {
        writeln!(
            out,
            "  layer {} {:<5} min entry {:.3e}  max row-sum deviation {:.3e}",
            c.layer, c.matrix, c.min_entry, c.max_row_sum_dev
        )?;
    }
    let logits = model::forward(&loaded.state, &inputs, &Pass::for_model(cfg, 0))?;
    if logits.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("probe logits are not finite".into()));
    }
    Ok(())
}

/// Writes a deterministic synthetic corpus of at least `bytes` bytes.
pub fn synth_corpus(path: &Path, bytes: usize, seed: u64, out: &mut dyn Write) -> Result<()> {
    let path = resolve_output(path);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let text = data::synthetic_corpus(bytes, seed);
    fs::write(&path, &text)?;
    writeln!(out, "wrote {} bytes to {}", text.len(), path.display())?;
    Ok(())
}
