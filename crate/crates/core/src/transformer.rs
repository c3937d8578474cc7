//! Decoder-only causal transformer.
//!
//! Pre-LayerNorm residual blocks (`x + attn(ln1(x))`, then `x + ffn(ln2(x))`),
//! learned absolute positions, a final LayerNorm and an LM head that is the
//! transposed token embedding when tied. The attention inner width
//! `n_heads · head_dim` is independent of `d_model`.
//!
//! Parameters live in a [`ParamSet`] under canonical names; the name set and
//! every shape are a pure function of [`ModelConfig`] (see [`param_shapes`]).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Float, Tape, Tensor, TensorError, Var};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("parameter {name} has shape {got:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("unexpected parameter {0}")]
    UnexpectedParam(String),
    #[error("sampling temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("prompt must contain at least one token")]
    EmptyPrompt,
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Structural description of a decoder-only transformer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_tied")]
    pub tied_lm_head: bool,
}

fn default_tied() -> bool {
    true
}

impl ModelConfig {
    pub fn inner_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, value) in fields {
            if value == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be ≥ 1")));
            }
        }
        Ok(())
    }

    /// Same head_dim, vocabulary and context length.
    pub fn compatible_with(&self, other: &ModelConfig) -> bool {
        self.head_dim == other.head_dim
            && self.vocab_size == other.vocab_size
            && self.max_seq_len == other.max_seq_len
            && self.tied_lm_head == other.tied_lm_head
    }

    /// Component-wise `≤` on depth, heads and widths between compatible
    /// configs.
    pub fn structurally_le(&self, other: &ModelConfig) -> bool {
        self.compatible_with(other)
            && self.n_layers <= other.n_layers
            && self.n_heads <= other.n_heads
            && self.d_model <= other.d_model
            && self.d_ff <= other.d_ff
    }

    pub fn param_count(&self) -> usize {
        count_params(self)
    }
}

/// The SLM presets of the reference experiments, keyed by nominal size in
/// millions of parameters (GPT-2 vocabulary and context, tied head).
pub fn slm_presets() -> Vec<(u32, ModelConfig)> {
    [
        (138, 14, 12, 768, 3072),
        (220, 18, 14, 896, 3584),
        (277, 24, 14, 896, 3584),
        (380, 26, 16, 1024, 4096),
        (537, 30, 18, 1152, 4608),
    ]
    .into_iter()
    .map(|(p, n_layers, n_heads, d_model, d_ff)| {
        (
            p,
            ModelConfig {
                n_layers,
                n_heads,
                head_dim: 64,
                d_model,
                d_ff,
                vocab_size: 50257,
                max_seq_len: 1024,
                tied_lm_head: true,
            },
        )
    })
    .collect()
}

pub fn layer_prefix(layer: usize) -> String {
    format!("L{layer}.")
}

/// Canonical parameter names and shapes, sorted by name.
pub fn param_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let inner = config.inner_dim();
    let ff = config.d_ff;
    let mut shapes = vec![
        ("embed.tok".to_string(), vec![config.vocab_size, d]),
        ("embed.pos".to_string(), vec![config.max_seq_len, d]),
        ("final.ln.g".to_string(), vec![d]),
        ("final.ln.b".to_string(), vec![d]),
    ];
    if !config.tied_lm_head {
        shapes.push(("lm_head.w".to_string(), vec![d, config.vocab_size]));
    }
    for i in 0..config.n_layers {
        let p = layer_prefix(i);
        let layer = [
            ("ln1.g", vec![d]),
            ("ln1.b", vec![d]),
            ("attn.wq", vec![d, inner]),
            ("attn.wk", vec![d, inner]),
            ("attn.wv", vec![d, inner]),
            ("attn.bq", vec![inner]),
            ("attn.bk", vec![inner]),
            ("attn.bv", vec![inner]),
            ("attn.wo", vec![inner, d]),
            ("attn.bo", vec![d]),
            ("ln2.g", vec![d]),
            ("ln2.b", vec![d]),
            ("ffn.w1", vec![d, ff]),
            ("ffn.b1", vec![ff]),
            ("ffn.w2", vec![ff, d]),
            ("ffn.b2", vec![d]),
        ];
        shapes.extend(layer.into_iter().map(|(n, s)| (format!("{p}{n}"), s)));
    }
    shapes.sort_by(|a, b| a.0.cmp(&b.0));
    shapes
}

/// Exact parameter count implied by [`param_shapes`].
pub fn count_params(config: &ModelConfig) -> usize {
    param_shapes(config)
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// Named tensors of one model.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<F> {
    tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Float> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.tensors
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    /// Tensors in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn bits_eq(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, ta), (nb, tb))| na == nb && ta.bits_eq(tb))
    }

    pub fn cast<G: Float>(&self) -> ParamSet<G> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Checks the name set and every shape against `config`.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        config.validate()?;
        let expected = param_shapes(config);
        for (name, shape) in &expected {
            let t = self.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    got: t.shape().to_vec(),
                });
            }
        }
        if self.tensors.len() != expected.len() {
            let extra = self
                .tensors
                .keys()
                .find(|k| !expected.iter().any(|(n, _)| n == *k))
                .cloned()
                .unwrap_or_default();
            return Err(ModelError::UnexpectedParam(extra));
        }
        Ok(())
    }
}

impl<F> FromIterator<(String, Tensor<F>)> for ParamSet<F> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<F>)>>(iter: I) -> Self {
        ParamSet {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// `weights ~ N(0, 0.02)`, biases and LayerNorm betas zero, gammas one.
pub fn init_random<F: Float>(config: &ModelConfig, seed: u64) -> ParamSet<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    param_shapes(config)
        .into_iter()
        .map(|(name, shape)| {
            let t = match ParamRole::of(&name) {
                ParamRole::Gain => Tensor::full(&shape, F::one()),
                ParamRole::Bias => Tensor::zeros(&shape),
                ParamRole::Weight => Tensor::from_fn(&shape, |_| F::of(normal.sample(&mut rng))),
            };
            (name, t)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    Gain,
}

impl ParamRole {
    pub fn of(name: &str) -> ParamRole {
        let leaf = name.rsplit('.').next().unwrap_or(name);
        match leaf {
            "g" => ParamRole::Gain,
            "b" | "bq" | "bk" | "bv" | "bo" | "b1" | "b2" => ParamRole::Bias,
            _ => ParamRole::Weight,
        }
    }
}

/// A `[batch, seq]` matrix of token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<usize>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, ids: Vec<usize>) -> Result<Self> {
        if batch == 0 || seq == 0 || ids.len() != batch * seq {
            return Err(ModelError::InvalidConfig(format!(
                "token batch {batch}x{seq} with {} ids",
                ids.len()
            )));
        }
        Ok(TokenBatch { batch, seq, ids })
    }

    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let seq = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != seq) {
            return Err(ModelError::InvalidConfig("ragged token rows".into()));
        }
        Self::new(rows.len(), seq, rows.concat())
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.seq..(b + 1) * self.seq]
    }
}

fn check_tokens(config: &ModelConfig, tokens: &TokenBatch) -> Result<()> {
    if tokens.seq > config.max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: tokens.seq,
            max: config.max_seq_len,
        });
    }
    if let Some(&bad) = tokens.ids.iter().find(|&&t| t >= config.vocab_size) {
        return Err(ModelError::TokenOutOfRange {
            token: bad,
            vocab: config.vocab_size,
        });
    }
    Ok(())
}

/// Parameters placed on a tape, by canonical name.
pub struct BoundParams<'t, F: Float> {
    vars: BTreeMap<String, Var<'t, F>>,
}

impl<'t, F: Float> BoundParams<'t, F> {
    /// Binds every tensor as a trainable leaf (`trainable`) or a constant.
    pub fn bind(tape: &'t Tape<F>, params: &ParamSet<F>, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var<'t, F>)>) -> Self {
        BoundParams {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, F>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'t, F>)> {
        self.vars.iter()
    }
}

/// Records the forward pass on `tape`, returning logits `[batch·seq, vocab]`.
pub fn forward_on_tape<'t, F: Float>(
    config: &ModelConfig,
    params: &BoundParams<'t, F>,
    tokens: &TokenBatch,
) -> Result<Var<'t, F>> {
    check_tokens(config, tokens)?;
    let eps = F::of(LN_EPS);
    let positions: Vec<usize> = (0..tokens.batch).flat_map(|_| 0..tokens.seq).collect();
    let tok_table = params.get("embed.tok")?;
    let mut x = tok_table
        .embedding(&tokens.ids)?
        .add(params.get("embed.pos")?.embedding(&positions)?)?;

    for i in 0..config.n_layers {
        let p = layer_prefix(i);
        let w = |n: &str| params.get(&format!("{p}{n}"));

        let h = x.layer_norm(w("ln1.g")?, w("ln1.b")?, eps)?;
        let q = h.matmul(w("attn.wq")?)?.add_row(w("attn.bq")?)?;
        let k = h.matmul(w("attn.wk")?)?.add_row(w("attn.bk")?)?;
        let v = h.matmul(w("attn.wv")?)?.add_row(w("attn.bv")?)?;
        let a = q.causal_attention(
            k,
            v,
            tokens.batch,
            tokens.seq,
            config.n_heads,
            config.head_dim,
        )?;
        let o = a.matmul(w("attn.wo")?)?.add_row(w("attn.bo")?)?;
        x = x.add(o)?;

        let h = x.layer_norm(w("ln2.g")?, w("ln2.b")?, eps)?;
        let f = h
            .matmul(w("ffn.w1")?)?
            .add_row(w("ffn.b1")?)?
            .gelu()?
            .matmul(w("ffn.w2")?)?
            .add_row(w("ffn.b2")?)?;
        x = x.add(f)?;
    }

    let x = x.layer_norm(params.get("final.ln.g")?, params.get("final.ln.b")?, eps)?;
    let logits = if config.tied_lm_head {
        x.matmul_nt(tok_table)?
    } else {
        x.matmul(params.get("lm_head.w")?)?
    };
    Ok(logits)
}

/// Logits `[batch, seq, vocab]` for `tokens`.
pub fn forward<F: Float>(
    config: &ModelConfig,
    params: &ParamSet<F>,
    tokens: &TokenBatch,
) -> Result<Tensor<F>> {
    let tape = Tape::new();
    let bound = BoundParams::bind(&tape, params, false);
    let logits = forward_on_tape(config, &bound, tokens)?;
    let out = (*logits.value()).clone();
    Ok(out.reshape(&[tokens.batch, tokens.seq, config.vocab_size])?)
}

/// Mean negative log-likelihood over positions where `mask` is set.
///
/// `logits` has the vocabulary on its last axis; `targets` and `mask` are
/// flattened in row-major position order.
pub fn loss_ce<F: Float>(logits: &Tensor<F>, targets: &[usize], mask: &[bool]) -> Result<F> {
    let tape = Tape::new();
    let l = tape.constant(logits.clone()).cross_entropy(targets, mask)?;
    Ok(l.value().item()?)
}

/// How [`sample`] picks each next token.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoding {
    /// The zero-temperature limit: always the arg-max token.
    Greedy,
    /// Multinomial draw from `softmax(logits / t)`.
    Temperature(f64),
}

/// Autoregressive continuation of `prompt`.
///
/// Generates up to `max_new` tokens, stopping early after `stop` (which is
/// included in the output) or when the context is full. Deterministic given
/// `seed`.
pub fn sample<F: Float>(
    config: &ModelConfig,
    params: &ParamSet<F>,
    prompt: &[usize],
    decoding: Decoding,
    max_new: usize,
    seed: u64,
    stop: Option<usize>,
) -> Result<Vec<usize>> {
    if let Decoding::Temperature(t) = decoding {
        if !(t > 0.0 && t.is_finite()) {
            return Err(ModelError::Temperature(t));
        }
    }
    if prompt.is_empty() {
        return Err(ModelError::EmptyPrompt);
    }
    if prompt.len() > config.max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: prompt.len(),
            max: config.max_seq_len,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    let vocab = config.vocab_size;
    let mut probs = vec![0.0f64; vocab];
    while out.len() < max_new && seq.len() < config.max_seq_len {
        let batch = TokenBatch::new(1, seq.len(), seq.clone())?;
        let logits = forward(config, params, &batch)?;
        let last = &logits.data()[(seq.len() - 1) * vocab..seq.len() * vocab];
        let next = match decoding {
            Decoding::Greedy => argmax(last),
            Decoding::Temperature(t) => {
                let max = last
                    .iter()
                    .map(|v| v.f64())
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for (p, v) in probs.iter_mut().zip(last) {
                    *p = ((v.f64() - max) / t).exp();
                    total += *p;
                }
                let mut u = rng.gen::<f64>() * total;
                let mut pick = vocab - 1;
                for (i, &p) in probs.iter().enumerate() {
                    if u < p {
                        pick = i;
                        break;
                    }
                    u -= p;
                }
                pick
            }
        };
        seq.push(next);
        out.push(next);
        if stop == Some(next) {
            break;
        }
    }
    Ok(out)
}

fn argmax<F: Float>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(tied: bool) -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 1,
            head_dim: 1,
            d_model: 1,
            d_ff: 1,
            vocab_size: 2,
            max_seq_len: 2,
            tied_lm_head: tied,
        }
    }

    fn small() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            head_dim: 4,
            d_model: 8,
            d_ff: 16,
            vocab_size: 11,
            max_seq_len: 12,
            tied_lm_head: true,
        }
    }

    #[test]
    fn count_params_by_hand_on_unit_config() {
        // tok 2·1 + pos 2·1 + final ln 2 + per layer: ln1 2, wq/wk/wv 3,
        // bq/bk/bv 3, wo 1, bo 1, ln2 2, w1 1, b1 1, w2 1, b2 1 = 16
        assert_eq!(count_params(&tiny(true)), 2 + 2 + 2 + 16);
        assert_eq!(param_shapes(&tiny(true)).len(), 4 + 16);
    }

    #[test]
    fn tied_and_untied_differ_by_head() {
        for cfg in [tiny(true), small()] {
            let untied = ModelConfig {
                tied_lm_head: false,
                ..cfg
            };
            assert_eq!(
                count_params(&untied) - count_params(&cfg),
                cfg.d_model * cfg.vocab_size
            );
        }
    }

    #[test]
    fn preset_138m_matches_reported_size() {
        let (_, cfg) = slm_presets()[0];
        let count = count_params(&cfg) as f64;
        assert!((count / 138e6 - 1.0).abs() < 0.02, "{count}");
    }

    #[test]
    fn all_presets_match_reported_sizes() {
        for (millions, cfg) in slm_presets() {
            let count = count_params(&cfg) as f64;
            assert!(
                (count / (millions as f64 * 1e6) - 1.0).abs() < 0.02,
                "{millions}M preset counts {count}"
            );
        }
    }

    #[test]
    fn init_random_is_seeded_and_consistent() {
        let cfg = small();
        let a = init_random::<f32>(&cfg, 7);
        let b = init_random::<f32>(&cfg, 7);
        let c = init_random::<f32>(&cfg, 8);
        assert!(a.bits_eq(&b));
        assert!(!a.bits_eq(&c));
        a.validate(&cfg).unwrap();
        assert_eq!(a.numel(), count_params(&cfg));
        assert!(a.get("L0.ln1.g").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(a
            .get("L1.attn.bo")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(a
            .get("final.ln.b")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn init_std_is_close_to_target() {
        let cfg = ModelConfig {
            vocab_size: 4096,
            d_model: 64,
            ..small()
        };
        let p = init_random::<f64>(&cfg, 3);
        let w = p.get("embed.tok").unwrap().data();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let std = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std / INIT_STD - 1.0).abs() < 0.05, "{std}");
    }

    #[test]
    fn zero_weight_model_gives_uniform_logits() {
        let cfg = small();
        let mut p = init_random::<f32>(&cfg, 1);
        for (name, t) in p.iter_mut() {
            let fill = if ParamRole::of(name) == ParamRole::Gain {
                1.0
            } else {
                0.0
            };
            t.data_mut().iter_mut().for_each(|v| *v = fill);
        }
        let tokens = TokenBatch::from_rows(&[vec![1, 2, 3], vec![4, 5, 6]]).unwrap();
        let logits = forward(&cfg, &p, &tokens).unwrap();
        assert_eq!(logits.shape(), &[2, 3, 11]);
        for row in logits.data().chunks(11) {
            assert!(row.iter().all(|&v| v == row[0]));
        }
    }

    #[test]
    fn identical_rows_give_identical_logits() {
        let cfg = small();
        let p = init_random::<f32>(&cfg, 2);
        let tokens = TokenBatch::from_rows(&[vec![3, 1, 4, 1], vec![3, 1, 4, 1]]).unwrap();
        let logits = forward(&cfg, &p, &tokens).unwrap();
        let (a, b) = logits.data().split_at(4 * 11);
        assert_eq!(a, b);
    }

    #[test]
    fn perturbing_later_tokens_keeps_earlier_logits_bitwise() {
        let cfg = small();
        let p = init_random::<f32>(&cfg, 5);
        let base = vec![1, 7, 2, 9, 4, 4, 0];
        let ref_logits = forward(
            &cfg,
            &p,
            &TokenBatch::from_rows(std::slice::from_ref(&base)).unwrap(),
        )
        .unwrap();
        for t in 0..base.len() {
            let mut alt = base.clone();
            for x in alt.iter_mut().skip(t) {
                *x = (*x + 3) % 11;
            }
            let out = forward(&cfg, &p, &TokenBatch::from_rows(&[alt]).unwrap()).unwrap();
            let n = t * 11;
            assert!(out.data()[..n]
                .iter()
                .zip(&ref_logits.data()[..n])
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let cfg = small();
        let p = init_random::<f32>(&cfg, 5);
        let oob = TokenBatch::from_rows(&[vec![11]]).unwrap();
        assert!(matches!(
            forward(&cfg, &p, &oob),
            Err(ModelError::TokenOutOfRange { token: 11, .. })
        ));
        let long = TokenBatch::new(1, 13, vec![0; 13]).unwrap();
        assert!(matches!(
            forward(&cfg, &p, &long),
            Err(ModelError::SequenceTooLong { len: 13, max: 12 })
        ));
    }

    #[test]
    fn loss_ce_examples() {
        let uniform = Tensor::<f64>::zeros(&[1, 2, 5]);
        let l = loss_ce(&uniform, &[0, 4], &[true, true]).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);

        let confident =
            Tensor::<f64>::from_fn(&[2, 3], |i| if i % 3 == i / 3 { 40.0 } else { 0.0 });
        assert!(loss_ce(&confident, &[0, 1], &[true, true]).unwrap() < 1e-12);

        // logits [2, 1, 0], target 1:  −ln(e¹ / (e² + e¹ + e⁰))
        let l = Tensor::<f64>::new(vec![1, 3], vec![2.0, 1.0, 0.0]).unwrap();
        let expected = -(1f64.exp() / (2f64.exp() + 1f64.exp() + 1.0)).ln();
        assert!((loss_ce(&l, &[1], &[true]).unwrap() - expected).abs() < 1e-12);

        assert!(loss_ce(&l, &[1], &[false]).is_err());
    }

    #[test]
    fn sampling_is_seeded() {
        let cfg = small();
        let p = init_random::<f32>(&cfg, 5);
        let a = sample(&cfg, &p, &[1, 2], Decoding::Temperature(1.0), 6, 9, None).unwrap();
        let b = sample(&cfg, &p, &[1, 2], Decoding::Temperature(1.0), 6, 9, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        let capped = sample(&cfg, &p, &[1; 10], Decoding::Greedy, 6, 9, None).unwrap();
        assert_eq!(capped.len(), 2);
    }

    #[test]
    fn greedy_equals_argmax_decoding() {
        let cfg = small();
        let p = init_random::<f32>(&cfg, 6);
        let out = sample(&cfg, &p, &[3], Decoding::Greedy, 4, 0, None).unwrap();
        let mut seq = vec![3];
        for &tok in &out {
            let logits =
                forward(&cfg, &p, &TokenBatch::from_rows(&[seq.clone()]).unwrap()).unwrap();
            let last = &logits.data()[(seq.len() - 1) * 11..];
            assert_eq!(tok, argmax(last));
            seq.push(tok);
        }
        // a tiny temperature behaves like the greedy limit
        let cold = sample(&cfg, &p, &[3], Decoding::Temperature(1e-6), 4, 1, None).unwrap();
        assert_eq!(cold, out);
    }

    #[test]
    fn forced_token_model_repeats_it() {
        let cfg = small();
        let mut p = init_random::<f32>(&cfg, 6);
        let untied = ModelConfig {
            tied_lm_head: false,
            ..cfg
        };
        // the final LN emits e₀ regardless of input; the head maps e₀ to token 7
        let mut head = Tensor::zeros(&[8, 11]);
        head.data_mut()[7] = 500.0;
        p.insert("lm_head.w", head);
        p.insert("final.ln.g", Tensor::zeros(&[8]));
        let mut beta = Tensor::zeros(&[8]);
        beta.data_mut()[0] = 1.0;
        p.insert("final.ln.b", beta);
        let out = sample(&untied, &p, &[0], Decoding::Temperature(1.0), 5, 3, None).unwrap();
        assert_eq!(out, vec![7; 5]);
    }

    #[test]
    fn sample_rejects_bad_arguments() {
        let cfg = small();
        let p = init_random::<f32>(&cfg, 6);
        assert!(sample(&cfg, &p, &[1], Decoding::Temperature(0.0), 3, 0, None).is_err());
        assert!(sample(&cfg, &p, &[1; 13], Decoding::Greedy, 3, 0, None).is_err());
        let stopped = sample(&cfg, &p, &[1], Decoding::Greedy, 5, 0, None).unwrap();
        let first = stopped[0];
        let out = sample(&cfg, &p, &[1], Decoding::Greedy, 5, 0, Some(first)).unwrap();
        assert_eq!(out, vec![first]);
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            head_dim: 8,
            d_model: 16,
            d_ff: 32,
            vocab_size: 13,
            max_seq_len: 8,
            tied_lm_head: true,
        };
        let mut params = init_random::<f64>(&cfg, 11);
        // widen the weights so every gradient entry is well above round-off
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (_, t) in params.iter_mut() {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.gen_range(-0.3..0.3));
        }
        let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
        let tensors: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
        let tokens = TokenBatch::from_rows(&[vec![1, 5, 2, 12, 0], vec![7, 7, 3, 9, 4]]).unwrap();
        let targets = vec![5, 2, 12, 0, 3, 7, 3, 9, 4, 1];
        let mask = vec![true, true, true, false, true, true, true, true, true, false];
        let err = crate::tensor::grad_check_sampled(
            |_, vars| {
                let bound =
                    BoundParams::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
                let logits = forward_on_tape(&cfg, &bound, &tokens).map_err(|e| match e {
                    ModelError::Tensor(t) => t,
                    other => panic!("{other}"),
                })?;
                logits.cross_entropy(&targets, &mask)
            },
            &tensors,
            1e-5,
            24,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn validate_detects_shape_and_name_errors() {
        let cfg = small();
        let mut p = init_random::<f32>(&cfg, 6);
        p.insert("L0.ffn.b1", Tensor::zeros(&[3]));
        assert!(matches!(
            p.validate(&cfg),
            Err(ModelError::ParamShape { .. })
        ));
        let mut p = init_random::<f32>(&cfg, 6);
        p.insert("extra", Tensor::zeros(&[3]));
        assert!(matches!(
            p.validate(&cfg),
            Err(ModelError::UnexpectedParam(_))
        ));
    }
}
