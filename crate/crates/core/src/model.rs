//! Encoder model: configuration, parameters, forward passes, MLM loss and the
//! relaxed-to-full recovery transformation.

use serde::{Deserialize, Serialize};

use crate::attention::{self, AnchorPlan, AttentionParams, AttnVars};
use crate::autograd::{KeyMask, Tape, Var};
use crate::data::{MlmBatch, CLS, IGNORE, RESERVED};
use crate::error::{Error, Result};
use crate::feedforward::{self, FfnParams, FfnVars};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Standard deviation of every truncated-normal weight initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Fast attention with factorized feed-forward layers.
    Relaxed,
    /// Standard attention with full feed-forward layers.
    Full,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Relaxed => "relaxed",
            Mode::Full => "full",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Feed-forward inner width; `4·hidden` when absent.
    #[serde(default)]
    pub ffn_inner: Option<usize>,
    pub factor_rank: usize,
    pub anchors: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub mode: Mode,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults: 4 layers, width 128, 4 heads, rank 16, 8 anchors, length 128.
    pub fn desk(vocab_size: usize, mode: Mode, seed: u64) -> Self {
        Self {
            layers: 4,
            hidden: 128,
            heads: 4,
            ffn_inner: None,
            factor_rank: 16,
            anchors: 8,
            max_seq_len: 128,
            vocab_size,
            mode,
            seed,
        }
    }

    pub fn d_f(&self) -> usize {
        self.ffn_inner.unwrap_or(4 * self.hidden)
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads.max(1)
    }

    /// Fails with every violated constraint listed.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, v) in [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn_inner", self.d_f()),
            ("max_seq_len", self.max_seq_len),
            ("vocab_size", self.vocab_size),
        ] {
            if v == 0 {
                bad.push(format!("{name} must be at least 1"));
            }
        }
        if self.heads > 0 && !self.hidden.is_multiple_of(self.heads) {
            bad.push(format!(
                "hidden {} mod heads {} = {} (must be 0)",
                self.hidden,
                self.heads,
                self.hidden % self.heads
            ));
        }
        if self.mode == Mode::Relaxed {
            if self.factor_rank == 0 {
                bad.push("relaxed mode requires factor_rank >= 1".into());
            }
            if self.anchors == 0 {
                bad.push("relaxed mode requires anchors >= 1".into());
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    fn embedding_params(&self) -> usize {
        (self.vocab_size + self.max_seq_len) * self.hidden
    }

    fn head_params(&self) -> usize {
        self.hidden * self.vocab_size + self.vocab_size
    }

    fn layer_params(&self, mode: Mode) -> usize {
        let d = self.hidden;
        let ffn = match mode {
            Mode::Full => feedforward::standard_param_count(d, self.d_f()),
            Mode::Relaxed => feedforward::factorized_param_count(d, self.d_f(), self.factor_rank),
        };
        4 * d * d + 4 * d + ffn
    }

    /// Closed-form parameter count of a model of this shape in `mode`.
    pub fn param_count(&self, mode: Mode) -> usize {
        self.embedding_params() + self.layers * self.layer_params(mode) + self.head_params()
    }

    /// Closed-form parameter count of all feed-forward sub-layers in `mode`.
    pub fn ffn_param_count(&self, mode: Mode) -> usize {
        let d = self.hidden;
        self.layers
            * match mode {
                Mode::Full => feedforward::standard_param_count(d, self.d_f()),
                Mode::Relaxed => feedforward::factorized_param_count(d, self.d_f(), self.factor_rank),
            }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<T = f32> {
    pub attn: AttentionParams<T>,
    pub ffn: FfnParams<T>,
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T = f32> {
    pub config: ModelConfig,
    pub token_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub layers: Vec<EncoderLayer<T>>,
    pub mlm_weight: Tensor<T>,
    pub mlm_bias: Tensor<T>,
}

pub fn init_model<T: Scalar>(cfg: &ModelConfig, rng: &mut Rng) -> Result<ModelState<T>> {
    cfg.validate()?;
    let d = cfg.hidden;
    let w = |rng: &mut Rng, r: usize, c: usize| Tensor::from_fn(&[r, c], |_| T::lit(rng.truncated_normal(INIT_STD)));
    let token_emb = w(rng, cfg.vocab_size, d);
    let pos_emb = w(rng, cfg.max_seq_len, d);
    let mut layers = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        let attn = AttentionParams::init(d, cfg.heads, INIT_STD, rng)?;
        let ffn = match cfg.mode {
            Mode::Full => FfnParams::init_standard(d, cfg.d_f(), INIT_STD, rng),
            Mode::Relaxed => FfnParams::init_factorized(d, cfg.d_f(), cfg.factor_rank, INIT_STD, rng),
        };
        layers.push(EncoderLayer {
            attn,
            ffn,
            ln1_gamma: Tensor::full(&[d], T::one()),
            ln1_beta: Tensor::zeros(&[d]),
            ln2_gamma: Tensor::full(&[d], T::one()),
            ln2_beta: Tensor::zeros(&[d]),
        });
    }
    let mlm_weight = w(rng, d, cfg.vocab_size);
    Ok(ModelState {
        config: cfg.clone(),
        token_emb,
        pos_emb,
        layers,
        mlm_weight,
        mlm_bias: Tensor::zeros(&[cfg.vocab_size]),
    })
}

impl<T: Scalar> ModelState<T> {
    /// Every parameter with its stable name, in storage order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("embeddings.token".to_string(), &self.token_emb),
            ("embeddings.position".to_string(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layers.{i}");
            out.push((format!("{p}.attn.wq"), &l.attn.wq));
            out.push((format!("{p}.attn.wk"), &l.attn.wk));
            out.push((format!("{p}.attn.wv"), &l.attn.wv));
            out.push((format!("{p}.attn.wo"), &l.attn.wo));
            out.push((format!("{p}.ln1.gamma"), &l.ln1_gamma));
            out.push((format!("{p}.ln1.beta"), &l.ln1_beta));
            for (n, t) in ffn_names(&l.ffn).into_iter().zip(l.ffn.tensors()) {
                out.push((format!("{p}.ffn.{n}"), t));
            }
            out.push((format!("{p}.ln2.gamma"), &l.ln2_gamma));
            out.push((format!("{p}.ln2.beta"), &l.ln2_beta));
        }
        out.push(("mlm.weight".to_string(), &self.mlm_weight));
        out.push(("mlm.bias".to_string(), &self.mlm_bias));
        out
    }

    /// Mutable view in the same order as [`Self::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.token_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend([&mut l.attn.wq, &mut l.attn.wk, &mut l.attn.wv, &mut l.attn.wo]);
            out.extend([&mut l.ln1_gamma, &mut l.ln1_beta]);
            match &mut l.ffn {
                FfnParams::Standard { w1, b1, w2, b2 } => out.extend([w1, b1, w2, b2]),
                FfnParams::Factorized {
                    w1a,
                    w1b,
                    w2a,
                    w2b,
                    b1,
                    b2,
                } => out.extend([w1a, w1b, w2a, w2b, b1, b2]),
            }
            out.extend([&mut l.ln2_gamma, &mut l.ln2_beta]);
        }
        out.extend([&mut self.mlm_weight, &mut self.mlm_bias]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        let ffn = |f: &FfnParams<T>| match f {
            FfnParams::Standard { w1, b1, w2, b2 } => FfnParams::Standard {
                w1: w1.cast(),
                b1: b1.cast(),
                w2: w2.cast(),
                b2: b2.cast(),
            },
            FfnParams::Factorized {
                w1a,
                w1b,
                w2a,
                w2b,
                b1,
                b2,
            } => FfnParams::Factorized {
                w1a: w1a.cast(),
                w1b: w1b.cast(),
                w2a: w2a.cast(),
                w2b: w2b.cast(),
                b1: b1.cast(),
                b2: b2.cast(),
            },
        };
        ModelState {
            config: self.config.clone(),
            token_emb: self.token_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| EncoderLayer {
                    attn: AttentionParams {
                        heads: l.attn.heads,
                        wq: l.attn.wq.cast(),
                        wk: l.attn.wk.cast(),
                        wv: l.attn.wv.cast(),
                        wo: l.attn.wo.cast(),
                    },
                    ffn: ffn(&l.ffn),
                    ln1_gamma: l.ln1_gamma.cast(),
                    ln1_beta: l.ln1_beta.cast(),
                    ln2_gamma: l.ln2_gamma.cast(),
                    ln2_beta: l.ln2_beta.cast(),
                })
                .collect(),
            mlm_weight: self.mlm_weight.cast(),
            mlm_bias: self.mlm_bias.cast(),
        }
    }

    /// Checks layer count, widths and the mode/FFN-variant correspondence.
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        let d = cfg.hidden;
        if self.layers.len() != cfg.layers {
            return Err(Error::Contract(format!(
                "model has {} layers, config says {}",
                self.layers.len(),
                cfg.layers
            )));
        }
        let check = |name: &str, t: &Tensor<T>, shape: &[usize]| {
            if t.shape() != shape {
                Err(Error::Contract(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )))
            } else {
                Ok(())
            }
        };
        check("embeddings.token", &self.token_emb, &[cfg.vocab_size, d])?;
        check("embeddings.position", &self.pos_emb, &[cfg.max_seq_len, d])?;
        check("mlm.weight", &self.mlm_weight, &[d, cfg.vocab_size])?;
        check("mlm.bias", &self.mlm_bias, &[cfg.vocab_size])?;
        for (i, l) in self.layers.iter().enumerate() {
            l.attn.validate()?;
            l.ffn.validate()?;
            if l.attn.heads != cfg.heads || l.attn.hidden() != d || l.ffn.dims() != (d, cfg.d_f()) {
                return Err(Error::Contract(format!("layer {i} widths disagree with the config")));
            }
            if l.ffn.is_factorized() != (cfg.mode == Mode::Relaxed) {
                return Err(Error::Contract(format!(
                    "layer {i} feed-forward variant does not match {} mode",
                    cfg.mode
                )));
            }
            for (n, t) in [
                ("ln1", &l.ln1_gamma),
                ("ln1", &l.ln1_beta),
                ("ln2", &l.ln2_gamma),
                ("ln2", &l.ln2_beta),
            ] {
                check(&format!("layers.{i}.{n}"), t, &[d])?;
            }
        }
        Ok(())
    }
}

fn ffn_names<T>(f: &FfnParams<T>) -> Vec<&'static str> {
    match f {
        FfnParams::Standard { .. } => vec!["w1", "b1", "w2", "b2"],
        FfnParams::Factorized { .. } => vec!["w1a", "w1b", "w2a", "w2b", "b1", "b2"],
    }
}

/// Turns a trained relaxed model into a full model: feed-forward factors are
/// multiplied back, everything else is copied.
pub fn recover_full<T: Scalar>(relaxed: &ModelState<T>) -> Result<ModelState<T>> {
    if relaxed.config.mode != Mode::Relaxed {
        return Err(Error::Contract(format!(
            "mode mismatch: recovery needs a relaxed model, got {}",
            relaxed.config.mode
        )));
    }
    let mut full = relaxed.clone();
    full.config.mode = Mode::Full;
    for l in &mut full.layers {
        l.ffn = l.ffn.recover()?;
    }
    Ok(full)
}

// ---------------------------------------------------------------------------
// forward passes
// ---------------------------------------------------------------------------

/// Token ids and padding flags for a `batch×seq_len` input.
#[derive(Clone, Copy, Debug)]
pub struct Inputs<'a> {
    pub token_ids: &'a [u32],
    /// `true` at padding positions.
    pub pad_mask: &'a [bool],
    pub batch: usize,
    pub seq_len: usize,
}

impl<'a> Inputs<'a> {
    pub fn new(token_ids: &'a [u32], pad_mask: &'a [bool], batch: usize, seq_len: usize) -> Result<Self> {
        let n = batch * seq_len;
        if n == 0 || token_ids.len() != n || pad_mask.len() != n {
            return Err(Error::Input(format!(
                "inputs hold {} ids and {} pad flags for a {batch}×{seq_len} batch",
                token_ids.len(),
                pad_mask.len()
            )));
        }
        Ok(Self {
            token_ids,
            pad_mask,
            batch,
            seq_len,
        })
    }

    pub fn from_batch(b: &'a MlmBatch) -> Result<Self> {
        Self::new(&b.token_ids, &b.pad_mask, b.batch, b.seq_len)
    }
}

/// Which attention sub-layer a pass evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionPath {
    Standard,
    Fast,
}

/// Attention path plus the key that seeds anchor sampling.
///
/// Anchors for layer `l`, sequence `s`, head `h` come from a stream derived from
/// `(anchor_seed, step, l, s, h)`, so equal passes see equal anchors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pass {
    pub attention: AttentionPath,
    pub anchor_seed: u64,
    pub step: u64,
}

impl Pass {
    /// The path dictated by the model's mode.
    pub fn for_model(cfg: &ModelConfig, step: u64) -> Self {
        Self {
            attention: match cfg.mode {
                Mode::Relaxed => AttentionPath::Fast,
                Mode::Full => AttentionPath::Standard,
            },
            anchor_seed: cfg.seed,
            step,
        }
    }

    pub fn with_attention(mut self, attention: AttentionPath) -> Self {
        self.attention = attention;
        self
    }
}

/// Which code paths a pass exercised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathCounters {
    pub standard_attention: u64,
    pub fast_attention: u64,
    pub standard_ffn: u64,
    pub factorized_ffn: u64,
    /// Number of anchor sets sampled (one per layer, sequence and head).
    pub anchor_sets: u64,
}

impl std::ops::AddAssign for PathCounters {
    fn add_assign(&mut self, o: Self) {
        self.standard_attention += o.standard_attention;
        self.fast_attention += o.fast_attention;
        self.standard_ffn += o.standard_ffn;
        self.factorized_ffn += o.factorized_ffn;
        self.anchor_sets += o.anchor_sets;
    }
}

/// Attention probability matrices recorded during a pass, one entry per layer.
#[derive(Clone, Debug)]
pub enum AttentionProbe {
    Standard { s: Var },
    Fast { s1: Var, s2: Var },
}

struct LayerVars {
    attn: AttnVars,
    ffn: FfnVars,
    ln1: (Var, Var),
    ln2: (Var, Var),
}

/// The model's parameters registered on a tape.
pub struct ModelVars {
    token_emb: Var,
    pos_emb: Var,
    layers: Vec<LayerVars>,
    mlm_weight: Var,
    mlm_bias: Var,
    /// Same order as [`ModelState::named_params`].
    pub all: Vec<Var>,
}

impl ModelVars {
    /// Registers every parameter; `trainable` selects leaves that receive gradients.
    pub fn register<T: Scalar>(tape: &mut Tape<T>, state: &ModelState<T>, trainable: bool) -> Self {
        let mut all = Vec::new();
        let mut add = |tape: &mut Tape<T>, t: &Tensor<T>| {
            let v = if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            all.push(v);
            v
        };
        let token_emb = add(tape, &state.token_emb);
        let pos_emb = add(tape, &state.pos_emb);
        let mut layers = Vec::with_capacity(state.layers.len());
        for l in &state.layers {
            let attn = AttnVars {
                wq: add(tape, &l.attn.wq),
                wk: add(tape, &l.attn.wk),
                wv: add(tape, &l.attn.wv),
                wo: add(tape, &l.attn.wo),
            };
            let ln1 = (add(tape, &l.ln1_gamma), add(tape, &l.ln1_beta));
            let ffn = match &l.ffn {
                FfnParams::Standard { w1, b1, w2, b2 } => FfnVars::Standard {
                    w1: add(tape, w1),
                    b1: add(tape, b1),
                    w2: add(tape, w2),
                    b2: add(tape, b2),
                },
                FfnParams::Factorized {
                    w1a,
                    w1b,
                    w2a,
                    w2b,
                    b1,
                    b2,
                } => FfnVars::Factorized {
                    w1a: add(tape, w1a),
                    w1b: add(tape, w1b),
                    w2a: add(tape, w2a),
                    w2b: add(tape, w2b),
                    b1: add(tape, b1),
                    b2: add(tape, b2),
                },
            };
            let ln2 = (add(tape, &l.ln2_gamma), add(tape, &l.ln2_beta));
            layers.push(LayerVars { attn, ffn, ln1, ln2 });
        }
        let mlm_weight = add(tape, &state.mlm_weight);
        let mlm_bias = add(tape, &state.mlm_bias);
        Self {
            token_emb,
            pos_emb,
            layers,
            mlm_weight,
            mlm_bias,
            all,
        }
    }
}

/// Final hidden states `[B·n, d]` plus what the pass touched.
pub struct Encoded {
    pub hidden: Var,
    pub counters: PathCounters,
    pub probes: Vec<AttentionProbe>,
}

fn check_inputs(cfg: &ModelConfig, inputs: &Inputs<'_>) -> Result<()> {
    if inputs.seq_len > cfg.max_seq_len {
        return Err(Error::Input(format!(
            "sequence length {} exceeds the model maximum {}",
            inputs.seq_len, cfg.max_seq_len
        )));
    }
    if let Some(&t) = inputs.token_ids.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Input(format!(
            "token id {t} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

/// Runs the embedding layer and every encoder layer on `tape`.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    cfg: &ModelConfig,
    inputs: &Inputs<'_>,
    pass: &Pass,
) -> Result<Encoded> {
    check_inputs(cfg, inputs)?;
    let (b, n, d, h) = (inputs.batch, inputs.seq_len, cfg.hidden, cfg.heads);
    let tok = tape.gather_rows(
        vars.token_emb,
        inputs.token_ids.iter().map(|&t| t as usize).collect(),
        &[b * n, d],
    )?;
    let pos = tape.gather_rows(vars.pos_emb, (0..b * n).map(|i| i % n).collect(), &[b * n, d])?;
    let mut x = tape.add(tok, pos)?;

    let valid: Vec<bool> = inputs.pad_mask.iter().map(|&p| !p).collect();
    let key_mask = KeyMask::new(valid.clone(), n, h)?;
    let mut counters = PathCounters::default();
    let mut probes = Vec::with_capacity(vars.layers.len());
    for (li, lv) in vars.layers.iter().enumerate() {
        let attn_out = match pass.attention {
            AttentionPath::Standard => {
                counters.standard_attention += 1;
                let (s, out) = attention::mha_tape_traced(tape, x, &lv.attn, h, n, &key_mask)?;
                probes.push(AttentionProbe::Standard { s });
                out
            }
            AttentionPath::Fast => {
                if cfg.anchors == 0 {
                    return Err(Error::Config("fast attention requires anchors >= 1".into()));
                }
                let plan = AnchorPlan::sample(&valid, n, h, cfg.anchors, |s, hd| {
                    Rng::derive(pass.anchor_seed, &[pass.step, li as u64, s as u64, hd as u64])
                })?;
                counters.fast_attention += 1;
                counters.anchor_sets += plan.len() as u64;
                let tr = attention::fast_mha_tape(tape, x, &lv.attn, h, n, &key_mask, &plan)?;
                probes.push(AttentionProbe::Fast { s1: tr.s1, s2: tr.s2 });
                tr.out
            }
        };
        x = feedforward::add_norm_tape(tape, x, attn_out, lv.ln1.0, lv.ln1.1)?;
        match lv.ffn {
            FfnVars::Standard { .. } => counters.standard_ffn += 1,
            FfnVars::Factorized { .. } => counters.factorized_ffn += 1,
        }
        let f = feedforward::ffn_tape(tape, x, &lv.ffn)?;
        x = feedforward::add_norm_tape(tape, x, f, lv.ln2.0, lv.ln2.1)?;
    }
    Ok(Encoded {
        hidden: x,
        counters,
        probes,
    })
}

/// Logits `[b, n, vocab]` for every position.
pub fn forward<T: Scalar>(state: &ModelState<T>, inputs: &Inputs<'_>, pass: &Pass) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = ModelVars::register(&mut tape, state, false);
    let enc = encode(&mut tape, &vars, &state.config, inputs, pass)?;
    let logits = tape.matmul(enc.hidden, vars.mlm_weight)?;
    let logits = tape.add_row_bias(logits, vars.mlm_bias)?;
    tape.value(logits)
        .clone()
        .reshape(&[inputs.batch, inputs.seq_len, state.config.vocab_size])
}

/// Mean cross-entropy over positions whose label is not [`IGNORE`].
///
/// `logits` is `[b, n, vocab]` (or `[b·n, vocab]`); `labels` has `b·n` entries.
pub fn mlm_loss<T: Scalar>(logits: &Tensor<T>, labels: &[i32]) -> Result<T> {
    let v = logits.cols();
    if logits.numel() != labels.len() * v {
        return Err(Error::Shape {
            op: "mlm_loss",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let (mut total, mut count) = (0.0f64, 0usize);
    for (row, &l) in logits.data().chunks(v).zip(labels) {
        if l == IGNORE {
            continue;
        }
        let t = usize::try_from(l)
            .ok()
            .filter(|&t| t < v)
            .ok_or_else(|| Error::Input(format!("label {l} outside vocabulary of {v}")))?;
        let mx = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x.f64()));
        let lse = mx + row.iter().map(|&x| (x.f64() - mx).exp()).sum::<f64>().ln();
        total += lse - row[t].f64();
        count += 1;
    }
    if count == 0 {
        return Err(Error::Input("no masked positions in batch".into()));
    }
    Ok(T::lit(total / count as f64))
}

fn masked_targets(labels: &[i32]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        if l != IGNORE {
            rows.push(i);
            targets.push(usize::try_from(l).map_err(|_| Error::Input(format!("invalid label {l}")))?);
        }
    }
    if rows.is_empty() {
        return Err(Error::Input("no masked positions in batch".into()));
    }
    Ok((rows, targets))
}

/// Builds the MLM loss on `tape`, projecting only the masked rows to the vocabulary.
pub fn mlm_loss_tape<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    cfg: &ModelConfig,
    batch: &MlmBatch,
    pass: &Pass,
) -> Result<(Var, Encoded)> {
    let (rows, targets) = masked_targets(&batch.labels)?;
    let enc = encode(tape, vars, cfg, &Inputs::from_batch(batch)?, pass)?;
    let sel = tape.gather_rows(enc.hidden, rows.clone(), &[rows.len(), cfg.hidden])?;
    let logits = tape.matmul(sel, vars.mlm_weight)?;
    let logits = tape.add_row_bias(logits, vars.mlm_bias)?;
    let loss = tape.cross_entropy(logits, &targets)?;
    Ok((loss, enc))
}

/// Loss, per-parameter gradients (ordered as [`ModelState::named_params`]) and path counters.
pub struct LossAndGrads<T> {
    pub loss: f64,
    pub grads: Vec<Vec<T>>,
    pub counters: PathCounters,
}

pub fn loss_and_grads<T: Scalar>(state: &ModelState<T>, batch: &MlmBatch, pass: &Pass) -> Result<LossAndGrads<T>> {
    let mut tape = Tape::new();
    let vars = ModelVars::register(&mut tape, state, true);
    let (loss, enc) = mlm_loss_tape(&mut tape, &vars, &state.config, batch, pass)?;
    let value = tape.value(loss).data()[0].f64();
    tape.backward(loss)?;
    let grads = vars
        .all
        .iter()
        .zip(state.named_params())
        .map(|(&v, (_, p))| tape.take_grad(v).unwrap_or_else(|| vec![T::zero(); p.numel()]))
        .collect();
    Ok(LossAndGrads {
        loss: value,
        grads,
        counters: enc.counters,
    })
}

/// MLM loss without gradients.
pub fn eval_loss<T: Scalar>(state: &ModelState<T>, batch: &MlmBatch, pass: &Pass) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = ModelVars::register(&mut tape, state, false);
    let (loss, _) = mlm_loss_tape(&mut tape, &vars, &state.config, batch, pass)?;
    Ok(tape.value(loss).data()[0].f64())
}

/// Row-stochasticity summary of one attention matrix family at one layer.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StochasticCheck {
    pub layer: usize,
    pub matrix: String,
    pub min_entry: f64,
    pub max_row_sum_dev: f64,
}

/// Evaluates `inputs` and reports min entry / row-sum deviation of every
/// attention probability matrix (`S` for standard; `S1`, `S2`, `S1·S2` for fast).
pub fn attention_probe<T: Scalar>(
    state: &ModelState<T>,
    inputs: &Inputs<'_>,
    pass: &Pass,
) -> Result<Vec<StochasticCheck>> {
    let mut tape = Tape::new();
    let vars = ModelVars::register(&mut tape, state, false);
    let enc = encode(&mut tape, &vars, &state.config, inputs, pass)?;
    let mut out = Vec::new();
    let mut push = |layer: usize, name: &str, t: &Tensor<T>| {
        let (mn, dev) = t.stochastic_stats();
        out.push(StochasticCheck {
            layer,
            matrix: name.into(),
            min_entry: mn.f64(),
            max_row_sum_dev: dev.f64(),
        });
    };
    for (layer, p) in enc.probes.iter().enumerate() {
        match *p {
            AttentionProbe::Standard { s } => push(layer, "S", tape.value(s)),
            AttentionProbe::Fast { s1, s2 } => {
                let approx = crate::tensor::matmul_ex(tape.value(s1), tape.value(s2), false, false)?;
                push(layer, "S1", tape.value(s1));
                push(layer, "S2", tape.value(s2));
                push(layer, "S1*S2", &approx);
            }
        }
    }
    Ok(out)
}

/// A single-sequence probe input of `n` ordinary tokens after `[CLS]`.
pub fn probe_inputs(cfg: &ModelConfig, n: usize) -> (Vec<u32>, Vec<bool>) {
    let n = n.clamp(1, cfg.max_seq_len);
    let v = cfg.vocab_size as u32;
    let ids = (0..n)
        .map(|i| {
            if i == 0 {
                CLS.min(v - 1)
            } else {
                (RESERVED as u32 + i as u32 * 7) % v
            }
        })
        .collect();
    (ids, vec![false; n])
}
