//! Corpora, synthetic generators, and deterministic next-token batching.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use thiserror::Error;

use crate::tokenizer::Vocabulary;
use crate::transformer::TokenBatch;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error("no documents")]
    NoDocuments,
    #[error("invalid generator parameter: {0}")]
    InvalidParameter(String),
    #[error("validation ratio {0} outside [0, 1)")]
    Ratio(f64),
    #[error("sequence length {0} below 2")]
    SeqLen(usize),
    #[error("batch size must be positive")]
    BatchSize,
    #[error("no trainable positions in any window")]
    NoTargets,
    #[error("cannot read corpus: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

pub const DEFAULT_VAL_RATIO: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
        }
    }
}

/// Documents with a seeded, disjoint train/validation partition.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    docs: Vec<String>,
    val_ratio: f64,
    seed: u64,
    train: Vec<usize>,
    validation: Vec<usize>,
}

impl Corpus {
    /// Shuffles document indices with `seed` and assigns the first
    /// `round(n · val_ratio)` of them to validation (at least one when the
    /// ratio is positive and there are two or more documents).
    pub fn new(docs: Vec<String>, val_ratio: f64, seed: u64) -> Result<Self> {
        if docs.is_empty() {
            return Err(DataError::NoDocuments);
        }
        if !(0.0..1.0).contains(&val_ratio) {
            return Err(DataError::Ratio(val_ratio));
        }
        let n = docs.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut n_val = (n as f64 * val_ratio).round() as usize;
        if val_ratio > 0.0 && n >= 2 {
            n_val = n_val.max(1);
        }
        let n_val = n_val.min(n - 1);
        let mut validation = order[..n_val].to_vec();
        let mut train = order[n_val..].to_vec();
        validation.sort_unstable();
        train.sort_unstable();
        Ok(Corpus {
            docs,
            val_ratio,
            seed,
            train,
            validation,
        })
    }

    /// One document per blank-line-separated block; surrounding blank lines
    /// are dropped.
    pub fn from_text(text: &str, val_ratio: f64, seed: u64) -> Result<Self> {
        let mut docs = Vec::new();
        let mut current: Vec<&str> = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                if !current.is_empty() {
                    docs.push(current.join("\n"));
                    current.clear();
                }
            } else {
                current.push(line);
            }
        }
        if !current.is_empty() {
            docs.push(current.join("\n"));
        }
        Self::new(docs, val_ratio, seed)
    }

    pub fn from_file(path: impl AsRef<Path>, val_ratio: f64, seed: u64) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?, val_ratio, seed)
    }

    pub fn documents(&self) -> &[String] {
        &self.docs
    }

    pub fn val_ratio(&self) -> f64 {
        self.val_ratio
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn split(&self, split: Split) -> Vec<&str> {
        let idx = match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
        };
        idx.iter().map(|&i| self.docs[i].as_str()).collect()
    }

    pub fn train(&self) -> Vec<&str> {
        self.split(Split::Train)
    }

    pub fn validation(&self) -> Vec<&str> {
        self.split(Split::Validation)
    }

    /// The same documents under a different partition.
    pub fn resplit(&self, val_ratio: f64, seed: u64) -> Result<Self> {
        Self::new(self.docs.clone(), val_ratio, seed)
    }
}

/// Seeded order-`order` Markov text over `alphabet`.
///
/// Each context gets its own next-character distribution drawn from a sparse
/// Dirichlet (concentration 0.3), so transitions are far from uniform.
pub fn gen_markov(
    seed: u64,
    n_docs: usize,
    doc_len: usize,
    order: usize,
    alphabet: &str,
) -> Result<Corpus> {
    let symbols: Vec<char> = alphabet.chars().collect();
    let k = symbols.len();
    if order == 0 {
        return Err(DataError::InvalidParameter(
            "order must be at least 1".into(),
        ));
    }
    if k < 2 {
        return Err(DataError::InvalidParameter(
            "alphabet needs at least two symbols".into(),
        ));
    }
    let contexts = u32::try_from(order)
        .ok()
        .and_then(|o| k.checked_pow(o))
        .filter(|&c| c <= 1 << 20)
        .ok_or_else(|| DataError::InvalidParameter(format!("{k}^{order} contexts is too many")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::new(0.3, 1.0).expect("valid gamma parameters");
    // cumulative transition rows
    let table: Vec<Vec<f64>> = (0..contexts)
        .map(|_| {
            let w: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng) + 1e-6).collect();
            let total: f64 = w.iter().sum();
            w.iter()
                .scan(0.0, |acc, x| {
                    *acc += x / total;
                    Some(*acc)
                })
                .collect()
        })
        .collect();
    let docs = (0..n_docs)
        .map(|_| {
            let mut idx: Vec<usize> = Vec::with_capacity(doc_len);
            while idx.len() < doc_len {
                let next = if idx.len() < order {
                    rng.gen_range(0..k)
                } else {
                    let ctx = idx[idx.len() - order..].iter().fold(0, |c, &s| c * k + s);
                    let u: f64 = rng.gen();
                    table[ctx].iter().position(|&c| u < c).unwrap_or(k - 1)
                };
                idx.push(next);
            }
            idx.into_iter().map(|i| symbols[i]).collect()
        })
        .collect();
    Corpus::new(docs, DEFAULT_VAL_RATIO, seed)
}

/// Documents that are single lines `a+b=c\n` with `a, b` uniform in
/// `0..=max_operand`.
pub fn gen_arithmetic(seed: u64, n_docs: usize, max_operand: u64) -> Result<Corpus> {
    if max_operand == 0 {
        return Err(DataError::InvalidParameter(
            "max_operand must be at least 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let docs = (0..n_docs)
        .map(|_| {
            let a = rng.gen_range(0..=max_operand);
            let b = rng.gen_range(0..=max_operand);
            format!("{a}+{b}={}\n", a + b)
        })
        .collect();
    Corpus::new(docs, DEFAULT_VAL_RATIO, seed)
}

/// A token sequence whose targets count toward the loss from index
/// `loss_from` on (earlier targets are masked, as for a prompt).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub ids: Vec<usize>,
    pub loss_from: usize,
}

/// `BOS + encode(doc) + EOS` for each document, every target counted.
pub fn encode_documents(docs: &[&str], vocab: &Vocabulary) -> Vec<Example> {
    docs.iter()
        .map(|d| Example {
            ids: wrap(vocab, vocab.encode(d)),
            loss_from: 1,
        })
        .collect()
}

/// `BOS + prompt + completion + EOS`, counting only completion targets
/// (including the closing EOS).
pub fn encode_pairs(pairs: &[(String, String)], vocab: &Vocabulary) -> Vec<Example> {
    pairs
        .iter()
        .map(|(prompt, completion)| {
            let p = vocab.encode(prompt);
            let loss_from = 1 + p.len();
            let mut body = p;
            body.extend(vocab.encode(completion));
            Example {
                ids: wrap(vocab, body),
                loss_from,
            }
        })
        .collect()
}

fn wrap(vocab: &Vocabulary, body: Vec<usize>) -> Vec<usize> {
    let mut ids = Vec::with_capacity(body.len() + 2);
    ids.push(vocab.bos());
    ids.extend(body);
    ids.push(vocab.eos());
    ids
}

/// One training window of next-token pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

/// Cuts each example into windows of `seq_len` inputs with targets shifted
/// by one; consecutive windows overlap by one token so every target appears
/// exactly once. Short tails are padded with PAD and masked. Windows with no
/// counted target are dropped.
pub fn windows(examples: &[Example], seq_len: usize, pad: usize) -> Result<Vec<Window>> {
    if seq_len < 2 {
        return Err(DataError::SeqLen(seq_len));
    }
    let mut out = Vec::new();
    for ex in examples {
        let mut start = 0;
        while start + 1 < ex.ids.len() {
            let mut tokens = vec![pad; seq_len];
            let mut targets = vec![pad; seq_len];
            let mut mask = vec![false; seq_len];
            for t in 0..seq_len {
                let i = start + t;
                if i + 1 >= ex.ids.len() {
                    break;
                }
                tokens[t] = ex.ids[i];
                targets[t] = ex.ids[i + 1];
                mask[t] = i + 1 >= ex.loss_from;
            }
            if mask.iter().any(|&m| m) {
                out.push(Window {
                    tokens,
                    targets,
                    mask,
                });
            }
            start += seq_len;
        }
    }
    Ok(out)
}

/// A batch of windows flattened in row-major position order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub tokens: TokenBatch,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Batch {
    pub fn from_windows(ws: &[&Window]) -> Batch {
        let seq = ws[0].tokens.len();
        let mut ids = Vec::with_capacity(ws.len() * seq);
        let mut targets = Vec::with_capacity(ws.len() * seq);
        let mut mask = Vec::with_capacity(ws.len() * seq);
        for w in ws {
            ids.extend_from_slice(&w.tokens);
            targets.extend_from_slice(&w.targets);
            mask.extend_from_slice(&w.mask);
        }
        Batch {
            tokens: TokenBatch {
                batch: ws.len(),
                seq,
                ids,
            },
            targets,
            mask,
        }
    }

    pub fn counted(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Endless seeded stream of training batches. Windows are reshuffled at
/// every epoch boundary; a batch may straddle two epochs.
#[derive(Clone, Debug)]
pub struct Batcher {
    windows: Vec<Window>,
    batch: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
}

impl Batcher {
    pub fn new(
        examples: &[Example],
        pad: usize,
        batch: usize,
        seq_len: usize,
        seed: u64,
    ) -> Result<Self> {
        if batch == 0 {
            return Err(DataError::BatchSize);
        }
        let windows = windows(examples, seq_len, pad)?;
        if windows.is_empty() {
            return Err(DataError::NoTargets);
        }
        let mut b = Batcher {
            order: (0..windows.len()).collect(),
            windows,
            batch,
            rng: ChaCha8Rng::seed_from_u64(seed),
            cursor: 0,
            epoch: 0,
        };
        b.order.shuffle(&mut b.rng);
        Ok(b)
    }

    pub fn n_windows(&self) -> usize {
        self.windows.len()
    }

    /// Batches needed to visit every window once.
    pub fn steps_per_epoch(&self) -> usize {
        self.windows.len().div_ceil(self.batch)
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Batch {
        let mut picked = Vec::with_capacity(self.batch);
        while picked.len() < self.batch {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
                self.epoch += 1;
            }
            picked.push(&self.windows[self.order[self.cursor]]);
            self.cursor += 1;
        }
        Batch::from_windows(&picked)
    }
}

impl Iterator for Batcher {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        Some(self.next_batch())
    }
}

/// The training stream for one corpus split.
pub fn batches(
    corpus: &Corpus,
    split: Split,
    vocab: &Vocabulary,
    batch: usize,
    seq_len: usize,
    seed: u64,
) -> Result<Batcher> {
    let docs = corpus.split(split);
    if docs.is_empty() {
        return Err(DataError::EmptySplit(split.name()));
    }
    Batcher::new(
        &encode_documents(&docs, vocab),
        vocab.pad(),
        batch,
        seq_len,
        seed,
    )
}

/// Every window of a split exactly once, in document order, grouped into
/// batches of at most `batch`.
pub fn eval_batches(
    corpus: &Corpus,
    split: Split,
    vocab: &Vocabulary,
    batch: usize,
    seq_len: usize,
) -> Result<Vec<Batch>> {
    let docs = corpus.split(split);
    if docs.is_empty() {
        return Err(DataError::EmptySplit(split.name()));
    }
    example_batches(&encode_documents(&docs, vocab), vocab.pad(), batch, seq_len)
}

pub fn example_batches(
    examples: &[Example],
    pad: usize,
    batch: usize,
    seq_len: usize,
) -> Result<Vec<Batch>> {
    if batch == 0 {
        return Err(DataError::BatchSize);
    }
    let ws = windows(examples, seq_len, pad)?;
    if ws.is_empty() {
        return Err(DataError::NoTargets);
    }
    Ok(ws
        .chunks(batch)
        .map(|c| Batch::from_windows(&c.iter().collect::<Vec<_>>()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let docs: Vec<String> = (0..50).map(|i| format!("doc {i}")).collect();
        let a = Corpus::new(docs.clone(), 0.2, 7).unwrap();
        let b = Corpus::new(docs.clone(), 0.2, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.validation().len(), 10);
        let train: HashSet<&str> = a.train().into_iter().collect();
        assert!(a.validation().iter().all(|d| !train.contains(d)));
        assert_eq!(train.len() + a.validation().len(), 50);
        let c = Corpus::new(docs, 0.2, 8).unwrap();
        assert_ne!(a.validation(), c.validation());
    }

    #[test]
    fn small_corpora_keep_a_training_document() {
        let c = Corpus::new(vec!["x".into(), "y".into()], 0.9, 1).unwrap();
        assert_eq!(c.train().len(), 1);
        assert_eq!(c.validation().len(), 1);
        let c = Corpus::new(vec!["x".into()], 0.5, 1).unwrap();
        assert_eq!(c.train(), vec!["x"]);
        assert!(Corpus::new(vec![], 0.1, 1).is_err());
        assert!(Corpus::new(vec!["x".into()], 1.0, 1).is_err());
    }

    #[test]
    fn text_ingestion_splits_on_blank_lines() {
        let c = Corpus::from_text("\n\nfirst line\nsecond\n\n  \nthird\n", 0.0, 0).unwrap();
        assert_eq!(c.documents(), &["first line\nsecond", "third"]);
    }

    #[test]
    fn markov_corpus_shape_and_determinism() {
        let a = gen_markov(3, 20, 50, 2, "abcde").unwrap();
        assert_eq!(a, gen_markov(3, 20, 50, 2, "abcde").unwrap());
        assert_ne!(a, gen_markov(4, 20, 50, 2, "abcde").unwrap());
        assert_eq!(a.documents().len(), 20);
        for d in a.documents() {
            assert_eq!(d.chars().count(), 50);
            assert!(d.chars().all(|c| "abcde".contains(c)));
        }
        assert!(gen_markov(3, 1, 5, 0, "ab").is_err());
        assert!(gen_markov(3, 1, 5, 1, "a").is_err());
    }

    #[test]
    fn markov_transitions_are_not_uniform() {
        let c = gen_markov(11, 200, 200, 1, "abcd").unwrap();
        let mut counts = [[0usize; 4]; 4];
        for d in c.documents() {
            let b = d.as_bytes();
            for w in b.windows(2) {
                counts[(w[0] - b'a') as usize][(w[1] - b'a') as usize] += 1;
            }
        }
        // conditional entropy well below log2(4) = 2 bits
        let mut h = 0.0;
        let total: usize = counts.iter().flatten().sum();
        for row in &counts {
            let n: usize = row.iter().sum();
            for &x in row {
                if x > 0 {
                    let p = x as f64 / n as f64;
                    h -= (n as f64 / total as f64) * p * p.log2();
                }
            }
        }
        assert!(h < 1.7, "conditional entropy {h}");
    }

    #[test]
    fn arithmetic_lines_are_correct() {
        let c = gen_arithmetic(5, 100, 99).unwrap();
        assert_eq!(c, gen_arithmetic(5, 100, 99).unwrap());
        for d in c.documents() {
            assert!(d
                .chars()
                .all(|ch| ch.is_ascii_digit() || "+=\n".contains(ch)));
            let line = d.strip_suffix('\n').unwrap();
            let (lhs, sum) = line.split_once('=').unwrap();
            let (a, b) = lhs.split_once('+').unwrap();
            let (a, b, s): (u64, u64, u64) =
                (a.parse().unwrap(), b.parse().unwrap(), sum.parse().unwrap());
            assert_eq!(a + b, s);
            assert!(a <= 99 && b <= 99);
        }
        assert!(gen_arithmetic(5, 1, 0).is_err());
    }

    #[test]
    fn windows_shift_targets_and_mask_padding() {
        let v = Vocabulary::char();
        let ex = encode_documents(&["abcdefg"], &v);
        let ws = windows(&ex, 4, v.pad()).unwrap();
        // 9 ids: bos a b c d e f g eos → 8 targets → windows of 4 and 4
        assert_eq!(ws.len(), 2);
        let all: Vec<usize> = ex[0].ids.clone();
        for (k, w) in ws.iter().enumerate() {
            for t in 0..4 {
                if w.mask[t] {
                    assert_eq!(w.targets[t], all[k * 4 + t + 1]);
                    assert_eq!(w.tokens[t], all[k * 4 + t]);
                }
            }
        }
        let ws = windows(&encode_documents(&["ab"], &v), 6, v.pad()).unwrap();
        assert_eq!(ws[0].mask, vec![true, true, true, false, false, false]);
        for (t, m) in ws[0].mask.iter().enumerate() {
            assert_eq!(!*m, ws[0].targets[t] == v.pad());
        }
        assert!(windows(&ex, 1, v.pad()).is_err());
    }

    #[test]
    fn prompt_targets_are_masked() {
        let v = Vocabulary::char();
        let ex = encode_pairs(&[("ab".into(), "cd".into())], &v);
        let ws = windows(&ex, 8, v.pad()).unwrap();
        // inputs bos a b c d → targets a b c d eos; only c d eos count
        assert_eq!(&ws[0].mask[..6], &[false, false, true, true, true, false]);
        assert_eq!(ws[0].targets[2], v.encode("c")[0]);
    }

    #[test]
    fn batch_stream_is_seeded() {
        let c = gen_markov(1, 30, 40, 1, "abc").unwrap();
        let v = Vocabulary::char();
        let take = |seed| {
            batches(&c, Split::Train, &v, 4, 8, seed)
                .unwrap()
                .take(30)
                .collect::<Vec<_>>()
        };
        assert_eq!(take(9), take(9));
        assert_ne!(take(9), take(10));
        for b in take(9) {
            assert_eq!(b.tokens.ids.len(), 32);
            for i in 0..32 {
                assert_eq!(b.mask[i], b.targets[i] != v.pad());
            }
        }
    }

    #[test]
    fn validation_documents_never_reach_training_batches() {
        let docs: Vec<String> = (0..40)
            .map(|i| format!("{i:02}{}", "x".repeat(i % 7)))
            .collect();
        let c = Corpus::new(docs, 0.25, 3).unwrap();
        let v = Vocabulary::char();
        let val_prefixes: HashSet<Vec<usize>> = c
            .validation()
            .iter()
            .map(|d| {
                let mut p = vec![v.bos()];
                p.extend(v.encode(&d[..2]));
                p
            })
            .collect();
        for b in batches(&c, Split::Train, &v, 3, 16, 0).unwrap().take(100) {
            for row in b.tokens.ids.chunks(16) {
                assert!(!val_prefixes.contains(&row[..3]));
            }
        }
    }

    #[test]
    fn eval_batches_cover_each_window_once() {
        let c = gen_markov(2, 10, 30, 1, "ab").unwrap();
        let v = Vocabulary::char();
        let eb = eval_batches(&c, Split::Train, &v, 4, 8).unwrap();
        let n: usize = eb.iter().map(|b| b.tokens.batch).sum();
        let expected: usize = c.train().iter().map(|d| (d.len() + 1).div_ceil(8)).sum();
        assert_eq!(n, expected);
        let counted: usize = eb.iter().map(Batch::counted).sum();
        let tokens: usize = c.train().iter().map(|d| d.len() + 1).sum();
        assert_eq!(counted, tokens);
    }
}
