//! Corpus ingestion, word-level vocabulary, and masked-LM batch generation.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const MASK: u32 = 2;
pub const CLS: u32 = 3;
pub const SEP: u32 = 4;
pub const RESERVED: usize = 5;
/// Label value at positions that do not contribute to the loss.
pub const IGNORE: i32 = -100;

const RESERVED_TOKENS: [&str; RESERVED] = ["[PAD]", "[UNK]", "[MASK]", "[CLS]", "[SEP]"];

/// Lowercased words, with each punctuation character split into its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if ch.is_alphanumeric() {
                cur.extend(ch.to_lowercase());
            } else {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Frequency-ranked vocabulary of at most `cap` non-reserved tokens; ties
    /// are broken lexicographically.
    pub fn from_text(text: &str, cap: usize) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for tok in tokenize(text) {
            *counts.entry(tok).or_default() += 1;
        }
        if counts.is_empty() {
            return Err(Error::Input("corpus contains no tokens".into()));
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(cap);
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t))
    }

    fn from_tokens(words: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn build(corpus_path: &Path, cap: usize) -> Result<Self> {
        Self::from_text(&fs::read_to_string(corpus_path)?, cap)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Writes `token<TAB>id` lines in id order.
    pub fn export(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(f, "{t}\t{i}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = BufReader::new(fs::File::open(path)?);
        let mut tokens = Vec::new();
        for (ln, line) in f.lines().enumerate() {
            let line = line?;
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Input(format!("vocab line {} lacks a tab", ln + 1)))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::Input(format!("vocab line {} has a bad id", ln + 1)))?;
            if id != tokens.len() {
                return Err(Error::Input(format!("vocab ids out of order at line {}", ln + 1)));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < RESERVED || tokens[..RESERVED] != RESERVED_TOKENS {
            return Err(Error::Input("vocab file lacks the reserved tokens".into()));
        }
        Self::from_tokens(tokens.into_iter().skip(RESERVED))
    }
}

/// Packs text into `[CLS] body [SEP]` sequences of at most `seq_len` ids.
///
/// Consecutive lines share a sequence until the next one would overflow it; a
/// blank line always closes the current sequence. Lines longer than the body
/// capacity are split. Bodies shorter than two tokens are dropped.
pub fn pack_sequences(text: &str, vocab: &Vocab, seq_len: usize) -> Result<Vec<Vec<u32>>> {
    if seq_len < 4 {
        return Err(Error::Input(format!(
            "sequence length {seq_len} leaves no room for tokens"
        )));
    }
    let cap = seq_len - 2;
    let mut out = Vec::new();
    let mut body: Vec<u32> = Vec::new();
    let flush = |body: &mut Vec<u32>, out: &mut Vec<Vec<u32>>| {
        if body.len() >= 2 {
            let mut s = Vec::with_capacity(body.len() + 2);
            s.push(CLS);
            s.extend_from_slice(body);
            s.push(SEP);
            out.push(s);
        }
        body.clear();
    };
    for line in text.lines() {
        let ids = vocab.encode(line);
        if ids.is_empty() {
            flush(&mut body, &mut out);
            continue;
        }
        if body.len() + ids.len() > cap {
            flush(&mut body, &mut out);
        }
        for chunk in ids.chunks(cap) {
            if body.len() + chunk.len() > cap {
                flush(&mut body, &mut out);
            }
            body.extend_from_slice(chunk);
        }
    }
    flush(&mut body, &mut out);
    Ok(out)
}

/// Train and held-out sequences.
pub type Split = (Vec<Vec<u32>>, Vec<Vec<u32>>);

/// Splits off the trailing `fraction` of sequences as a held-out set.
pub fn split_heldout(mut seqs: Vec<Vec<u32>>, fraction: f64) -> Result<Split> {
    let held = ((seqs.len() as f64) * fraction).round() as usize;
    if held == 0 || held >= seqs.len() {
        return Err(Error::Input(format!(
            "cannot hold out {fraction} of {} sequences",
            seqs.len()
        )));
    }
    let tail = seqs.split_off(seqs.len() - held);
    Ok((seqs, tail))
}

/// A masked-LM batch laid out row-major as `batch×seq_len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlmBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub token_ids: Vec<u32>,
    /// Original id at corrupted positions, [`IGNORE`] elsewhere.
    pub labels: Vec<i32>,
    /// `true` at padding positions.
    pub pad_mask: Vec<bool>,
}

impl MlmBatch {
    pub fn valid(&self) -> Vec<bool> {
        self.pad_mask.iter().map(|&p| !p).collect()
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] != IGNORE).collect()
    }

    pub fn masked_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE).count()
    }

    /// Checks the structural invariants: CLS first, labels only on corrupted
    /// non-pad positions, and no `[MASK]` id equal to its own label.
    pub fn validate(&self) -> Result<()> {
        let n = self.batch * self.seq_len;
        if self.token_ids.len() != n || self.labels.len() != n || self.pad_mask.len() != n {
            return Err(Error::Input("batch arrays disagree with batch×seq_len".into()));
        }
        for s in 0..self.batch {
            if self.token_ids[s * self.seq_len] != CLS {
                return Err(Error::Input(format!("sequence {s} does not start with [CLS]")));
            }
        }
        for i in 0..n {
            if self.pad_mask[i] && (self.labels[i] != IGNORE || self.token_ids[i] != PAD) {
                return Err(Error::Input(format!("pad position {i} is labelled or non-pad")));
            }
            if self.token_ids[i] == MASK && self.labels[i] == MASK as i32 {
                return Err(Error::Input(format!("label leak at position {i}")));
            }
        }
        Ok(())
    }
}

/// Masked-LM corruption settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskingConfig {
    pub rate: f64,
    pub vocab_size: usize,
}

impl MaskingConfig {
    pub fn new(rate: f64, vocab_size: usize) -> Result<Self> {
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(Error::Input(format!(
                "mask rate {rate} leaves no learnable positions or exceeds 1"
            )));
        }
        if vocab_size <= RESERVED {
            return Err(Error::Input("vocabulary has no ordinary tokens".into()));
        }
        Ok(Self { rate, vocab_size })
    }
}

/// Writes one padded, corrupted sequence into the batch slot slices.
///
/// `round(rate · candidates)` (at least one) ordinary positions are selected;
/// each becomes `[MASK]` with probability 0.8, a random ordinary token with
/// probability 0.1, and stays unchanged otherwise.
fn corrupt_into(
    seq: &[u32],
    cfg: &MaskingConfig,
    rng: &mut Rng,
    ids: &mut [u32],
    labels: &mut [i32],
    pad: &mut [bool],
) {
    let n = ids.len();
    ids.fill(PAD);
    labels.fill(IGNORE);
    pad.fill(true);
    let len = seq.len().min(n);
    ids[..len].copy_from_slice(&seq[..len]);
    pad[..len].fill(false);
    let candidates: Vec<usize> = (0..len)
        .filter(|&i| seq[i] as usize >= RESERVED || seq[i] == UNK)
        .collect();
    if candidates.is_empty() {
        return;
    }
    let count = ((cfg.rate * candidates.len() as f64).round() as usize).clamp(1, candidates.len());
    for pick in rng.sample_distinct(candidates.len(), count) {
        let pos = candidates[pick];
        labels[pos] = ids[pos] as i32;
        let r = rng.uniform(0.0, 1.0);
        if r < 0.8 {
            ids[pos] = MASK;
        } else if r < 0.9 {
            ids[pos] = (RESERVED + rng.below(cfg.vocab_size - RESERVED)) as u32;
        }
    }
}

fn assemble(seqs: &[&[u32]], seq_len: usize, cfg: &MaskingConfig, rng: &mut Rng) -> MlmBatch {
    let b = seqs.len();
    let mut token_ids = vec![PAD; b * seq_len];
    let mut labels = vec![IGNORE; b * seq_len];
    let mut pad_mask = vec![true; b * seq_len];
    for (s, seq) in seqs.iter().enumerate() {
        let r = s * seq_len..(s + 1) * seq_len;
        corrupt_into(
            seq,
            cfg,
            rng,
            &mut token_ids[r.clone()],
            &mut labels[r.clone()],
            &mut pad_mask[r],
        );
    }
    MlmBatch {
        batch: b,
        seq_len,
        token_ids,
        labels,
        pad_mask,
    }
}

/// Endless stream of masked batches; sequences are reshuffled every epoch and
/// re-masked every time they are served.
#[derive(Clone, Debug)]
pub struct BatchStream {
    seqs: Vec<Vec<u32>>,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
    batch: usize,
    seq_len: usize,
    masking: MaskingConfig,
    rng: Rng,
}

impl BatchStream {
    pub fn new(seqs: Vec<Vec<u32>>, seq_len: usize, batch: usize, masking: MaskingConfig, rng: Rng) -> Result<Self> {
        if seq_len < 2 || batch == 0 {
            return Err(Error::Input(format!("invalid batch geometry {batch}×{seq_len}")));
        }
        let seqs: Vec<Vec<u32>> = seqs
            .into_iter()
            .filter(|s| s.len() >= 2)
            .map(|mut s| {
                s.truncate(seq_len);
                s
            })
            .collect();
        if seqs.is_empty() {
            return Err(Error::Input("no sequences of at least two tokens".into()));
        }
        let mut stream = Self {
            order: (0..seqs.len()).collect(),
            seqs,
            cursor: 0,
            epoch: 0,
            batch,
            seq_len,
            masking,
            rng,
        };
        stream.rng.shuffle(&mut stream.order);
        Ok(stream)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn len_sequences(&self) -> usize {
        self.seqs.len()
    }

    pub fn next_batch(&mut self) -> MlmBatch {
        let mut picked = Vec::with_capacity(self.batch);
        while picked.len() < self.batch {
            if self.cursor == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.cursor = 0;
                self.epoch += 1;
            }
            picked.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        let refs: Vec<&[u32]> = picked.iter().map(|&i| self.seqs[i].as_slice()).collect();
        assemble(&refs, self.seq_len, &self.masking, &mut self.rng)
    }
}

impl Iterator for BatchStream {
    type Item = MlmBatch;

    fn next(&mut self) -> Option<MlmBatch> {
        Some(self.next_batch())
    }
}

/// Builds the cycling training stream.
pub fn make_batches(
    seqs: Vec<Vec<u32>>,
    vocab_size: usize,
    seq_len: usize,
    batch: usize,
    mask_rate: f64,
    rng: Rng,
) -> Result<BatchStream> {
    BatchStream::new(seqs, seq_len, batch, MaskingConfig::new(mask_rate, vocab_size)?, rng)
}

/// Deterministically masked batches over the first sequences of `seqs`, for evaluation.
pub fn fixed_batches(
    seqs: &[Vec<u32>],
    vocab_size: usize,
    seq_len: usize,
    batch: usize,
    count: usize,
    mask_rate: f64,
    seed: u64,
) -> Result<Vec<MlmBatch>> {
    let masking = MaskingConfig::new(mask_rate, vocab_size)?;
    let usable: Vec<&[u32]> = seqs
        .iter()
        .filter(|s| s.len() >= 2)
        .map(|s| &s[..s.len().min(seq_len)])
        .collect();
    if usable.is_empty() {
        return Err(Error::Input("no sequences available for evaluation".into()));
    }
    let mut rng = Rng::new(seed);
    Ok(usable
        .chunks(batch)
        .take(count.max(1))
        .map(|c| assemble(c, seq_len, &masking, &mut rng))
        .collect())
}

// ---------------------------------------------------------------------------
// pipeline
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum CorpusSource {
    /// A UTF-8 plain-text file.
    Path(std::path::PathBuf),
    /// Text from [`synthetic_corpus`].
    Synthetic { bytes: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub corpus: CorpusSource,
    #[serde(default = "default_vocab_cap")]
    pub vocab_cap: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_mask_rate")]
    pub mask_rate: f64,
    #[serde(default = "default_heldout")]
    pub heldout_fraction: f64,
    /// Number of fixed held-out batches used for evaluation.
    #[serde(default = "default_eval_batches")]
    pub eval_batches: usize,
}

fn default_vocab_cap() -> usize {
    8000 - RESERVED
}
fn default_batch() -> usize {
    32
}
fn default_mask_rate() -> f64 {
    0.15
}
fn default_heldout() -> f64 {
    0.02
}
fn default_eval_batches() -> usize {
    4
}

/// A tokenized corpus split for training and evaluation.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub vocab: Vocab,
    pub train: Vec<Vec<u32>>,
    pub heldout: Vec<Vec<u32>>,
    pub corpus_bytes: usize,
}

impl DataConfig {
    pub fn load_text(&self) -> Result<String> {
        match &self.corpus {
            CorpusSource::Path(p) => {
                fs::read_to_string(p).map_err(|e| Error::Input(format!("cannot read corpus {}: {e}", p.display())))
            }
            CorpusSource::Synthetic { bytes, seed } => Ok(synthetic_corpus(*bytes, *seed)),
        }
    }

    pub fn prepare(&self, seq_len: usize) -> Result<PreparedData> {
        let text = self.load_text()?;
        let vocab = Vocab::from_text(&text, self.vocab_cap)?;
        let seqs = pack_sequences(&text, &vocab, seq_len)?;
        let (train, heldout) = split_heldout(seqs, self.heldout_fraction)?;
        Ok(PreparedData {
            vocab,
            train,
            heldout,
            corpus_bytes: text.len(),
        })
    }
}

impl PreparedData {
    pub fn stream(&self, cfg: &DataConfig, seq_len: usize, seed: u64) -> Result<BatchStream> {
        make_batches(
            self.train.clone(),
            self.vocab.len(),
            seq_len,
            cfg.batch_size,
            cfg.mask_rate,
            Rng::derive(seed, &[0xDA7A]),
        )
    }

    pub fn eval_batches(&self, cfg: &DataConfig, seq_len: usize, seed: u64) -> Result<Vec<MlmBatch>> {
        fixed_batches(
            &self.heldout,
            self.vocab.len(),
            seq_len,
            cfg.batch_size,
            cfg.eval_batches,
            cfg.mask_rate,
            Rng::derive(seed, &[0xE7A1]).next_u64(),
        )
    }
}

// ---------------------------------------------------------------------------
// synthetic corpus
// ---------------------------------------------------------------------------

/// Generates a deterministic English-like text of at least `bytes` bytes.
///
/// Paragraphs follow a per-paragraph topic (nouns, verbs, adjectives and places
/// drawn from topic-specific lists), enforce subject-verb number agreement, and
/// re-mention a small cast of names, so masked tokens are predictable from
/// context as well as from frequency.
pub fn synthetic_corpus(bytes: usize, seed: u64) -> String {
    let mut rng = Rng::new(seed);
    let lex = Lexicon::generate(&mut rng);
    let mut out = String::with_capacity(bytes + 1024);
    while out.len() < bytes {
        lex.paragraph(&mut rng, &mut out);
        out.push_str("\n\n");
    }
    out
}

struct Topic {
    nouns: Vec<String>,
    verbs: Vec<String>,
    adjectives: Vec<String>,
    places: Vec<String>,
}

struct Lexicon {
    topics: Vec<Topic>,
    names: Vec<String>,
}

const NUMBERS: [&str; 6] = ["two", "three", "four", "five", "six", "many"];

impl Lexicon {
    fn generate(rng: &mut Rng) -> Self {
        const ONSETS: [&str; 16] = [
            "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "t", "v", "z", "sh", "br", "tr",
        ];
        const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];
        let mut seen = std::collections::HashSet::new();
        let mut word = |rng: &mut Rng| loop {
            let syllables = 2 + rng.below(2);
            let w: String = (0..syllables)
                .map(|_| format!("{}{}", ONSETS[rng.below(ONSETS.len())], VOWELS[rng.below(VOWELS.len())]))
                .collect();
            if seen.insert(w.clone()) {
                return w;
            }
        };
        let topics = (0..24)
            .map(|_| Topic {
                nouns: (0..40).map(|_| word(rng)).collect(),
                verbs: (0..15).map(|_| word(rng)).collect(),
                adjectives: (0..15).map(|_| word(rng)).collect(),
                places: (0..8).map(|_| word(rng)).collect(),
            })
            .collect();
        let names = (0..200)
            .map(|_| {
                let mut n = word(rng);
                n.push('n');
                n
            })
            .collect();
        Self { topics, names }
    }

    fn paragraph(&self, rng: &mut Rng, out: &mut String) {
        let topic = &self.topics[rng.below(self.topics.len())];
        let cast = [
            &self.names[rng.below(self.names.len())],
            &self.names[rng.below(self.names.len())],
        ];
        // Zipf-like preference for the head of each list.
        let pick = |rng: &mut Rng, list: &[String]| -> String {
            let u = rng.uniform(0.0, 1.0);
            list[((u * u) * list.len() as f64) as usize].clone()
        };
        let sentences = 7 + rng.below(6);
        for s in 0..sentences {
            if s > 0 {
                out.push(' ');
            }
            let plural = rng.bernoulli(0.4);
            let noun = pick(rng, &topic.nouns);
            let noun_form = if plural { format!("{noun}s") } else { noun.clone() };
            let verb = pick(rng, &topic.verbs);
            let verb_form = if plural { verb.clone() } else { format!("{verb}s") };
            let obj = pick(rng, &topic.nouns);
            let adj = pick(rng, &topic.adjectives);
            let place = pick(rng, &topic.places);
            let name = cast[rng.below(2)];
            let sentence = match rng.below(5) {
                0 => format!("the {adj} {noun_form} {verb_form} the {obj} ."),
                1 => format!("{name} said that the {noun_form} {verb}d near the {place} ."),
                2 => {
                    if plural {
                        let num = NUMBERS[rng.below(NUMBERS.len())];
                        format!("there are {num} {adj} {noun_form} in the {place} .")
                    } else {
                        format!("there is one {adj} {noun} in the {place} .")
                    }
                }
                3 => format!("{} and {} {verb} the {adj} {obj} .", cast[0], cast[1]),
                _ => format!("in the {place} , {name} {verb}s a {adj} {noun} ."),
            };
            out.push_str(&sentence);
        }
    }
}
