//! Distillation losses, the Adam optimizer, and the chain, direct and
//! bridge training pipelines.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, Meta, Stage};
use crate::data::{self, Batch, Batcher, Corpus, DataError, Split};
use crate::eval;
use crate::surgery::{apply_transform, plan_subset, SurgeryError};
use crate::tensor::{DivergenceKind, Float, Tape, Tensor, TensorError};
use crate::tokenizer::{TokenizerKind, Vocabulary};
use crate::transformer::{
    count_params, forward_on_tape, init_random, sample, BoundParams, Decoding, ModelConfig,
    ModelError, ParamSet,
};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("edge {index} ({teacher} -> {student}) failed: {source}")]
    Edge {
        index: usize,
        teacher: String,
        student: String,
        #[source]
        source: Box<DistillError>,
    },
    #[error("empty prompt list")]
    NoPrompts,
    #[error("gradient/parameter mismatch: {0}")]
    GradMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Surgery(#[from] SurgeryError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tokenizer(#[from] crate::tokenizer::TokenizerError),
}

pub type Result<T> = std::result::Result<T, DistillError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    ReverseKl,
    ForwardKl,
    Ce,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::ReverseKl => "reverse_kl",
            LossKind::ForwardKl => "forward_kl",
            LossKind::Ce => "ce",
        }
    }
}

/// How the student of an edge is initialized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    /// Subset transform of the teacher.
    #[default]
    Subset,
    /// Fresh random weights seeded by the edge seed.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

fn default_steps() -> usize {
    500
}
fn default_batch() -> usize {
    8
}
fn default_seq_len() -> usize {
    32
}
fn default_lr() -> f64 {
    1e-3
}
fn default_temperature() -> f64 {
    1.0
}
fn default_clip() -> Option<f64> {
    Some(1.0)
}
fn default_sft() -> usize {
    1
}

/// Hyperparameters of one training run (an edge, a bridge, or a recipe).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub loss_kind: LossKind,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default = "default_clip")]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_sft")]
    pub sft_warm_epochs: usize,
    #[serde(default)]
    pub init: StudentInit,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            steps: default_steps(),
            batch: default_batch(),
            seq_len: default_seq_len(),
            lr: default_lr(),
            temperature: default_temperature(),
            loss_kind: LossKind::default(),
            adam: AdamConfig::default(),
            grad_clip: default_clip(),
            seed: 0,
            sft_warm_epochs: default_sft(),
            init: StudentInit::default(),
        }
    }
}

impl DistillConfig {
    /// Checks scalar ranges and that `seq_len` fits every listed model.
    pub fn validate(&self, models: &[&ModelConfig]) -> Result<()> {
        let bad = |m: String| Err(DistillError::InvalidConfig(m));
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if self.seq_len < 2 {
            return bad(format!("seq_len {} below 2", self.seq_len));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        let a = self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad(format!("adam parameters {a:?} out of range"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("grad_clip {c} must be positive"));
            }
        }
        for m in models {
            if self.seq_len > m.max_seq_len {
                return bad(format!(
                    "seq_len {} exceeds max_seq_len {}",
                    self.seq_len, m.max_seq_len
                ));
            }
        }
        Ok(())
    }
}

/// Mean over unmasked rows of `Σ_v S_v (ln S_v − ln T_v)`.
pub fn reverse_kl_loss<F: Float>(
    student_logits: &Tensor<F>,
    teacher_logits: &Tensor<F>,
    mask: &[bool],
) -> Result<F> {
    divergence_value(
        student_logits,
        teacher_logits,
        mask,
        DivergenceKind::Reverse,
    )
}

/// Mean over unmasked rows of `Σ_v T_v (ln T_v − ln S_v)`.
pub fn forward_kl_loss<F: Float>(
    student_logits: &Tensor<F>,
    teacher_logits: &Tensor<F>,
    mask: &[bool],
) -> Result<F> {
    divergence_value(
        student_logits,
        teacher_logits,
        mask,
        DivergenceKind::Forward,
    )
}

fn divergence_value<F: Float>(
    student: &Tensor<F>,
    teacher: &Tensor<F>,
    mask: &[bool],
    kind: DivergenceKind,
) -> Result<F> {
    let tape = Tape::new();
    let l = tape
        .constant(student.clone())
        .divergence(teacher, mask, F::one(), kind)?;
    Ok(l.value().item()?)
}

/// First and second moment estimates, one buffer per parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new<F: Float>(params: &ParamSet<F>) -> Self {
        let zeros: BTreeMap<String, Vec<f64>> = params
            .iter()
            .map(|(n, t)| (n.clone(), vec![0.0; t.numel()]))
            .collect();
        AdamState {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<F: Float>(
    params: &mut ParamSet<F>,
    grads: &ParamSet<F>,
    state: &mut AdamState,
    lr: f64,
    adam: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(DistillError::GradMismatch(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - adam.beta1.powi(t);
    let c2 = 1.0 - adam.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads
            .get(name)
            .map_err(|_| DistillError::GradMismatch(format!("no gradient for {name}")))?;
        let (m, v) = match (state.m.get_mut(name), state.v.get_mut(name)) {
            (Some(m), Some(v)) if m.len() == p.numel() => (m, v),
            _ => {
                return Err(DistillError::GradMismatch(format!(
                    "no optimizer state for {name}"
                )))
            }
        };
        if g.shape() != p.shape() {
            return Err(DistillError::GradMismatch(format!(
                "{name}: gradient {:?} vs parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        for (((x, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let gi = gi.f64();
            *mi = adam.beta1 * *mi + (1.0 - adam.beta1) * gi;
            *vi = adam.beta2 * *vi + (1.0 - adam.beta2) * gi * gi;
            let update = lr * (*mi / c1) / ((*vi / c2).sqrt() + adam.eps);
            *x = F::of(x.f64() - update);
        }
    }
    Ok(())
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm<F: Float>(grads: &mut ParamSet<F>, max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|v| v.f64() * v.f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, t) in grads.iter_mut() {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = F::of(v.f64() * s));
        }
    }
    norm
}

/// Teacher logits `[batch·seq, vocab]` for a batch.
pub fn teacher_logits<F: Float>(teacher: &Checkpoint<F>, batch: &Batch) -> Result<Tensor<F>> {
    let tape = Tape::new();
    let bound = BoundParams::bind(&tape, &teacher.params, false);
    let logits = forward_on_tape(&teacher.config, &bound, &batch.tokens)?;
    let out = (*logits.value()).clone();
    Ok(out)
}

enum Objective<'a, F: Float> {
    Ce,
    Distill {
        teacher: &'a Checkpoint<F>,
        kind: DivergenceKind,
    },
}

fn diverged(step: usize, e: impl std::fmt::Display) -> DistillError {
    DistillError::Diverged {
        step,
        detail: e.to_string(),
    }
}

fn is_non_finite(e: &DistillError) -> bool {
    matches!(
        e,
        DistillError::Tensor(TensorError::NonFinite { .. })
            | DistillError::Model(ModelError::Tensor(TensorError::NonFinite { .. }))
    )
}

/// Loss value and gradients for one batch.
fn loss_and_grads<F: Float>(
    config: &ModelConfig,
    params: &ParamSet<F>,
    batch: &Batch,
    objective: &Objective<'_, F>,
    temperature: f64,
) -> Result<(f64, ParamSet<F>)> {
    let target = match objective {
        Objective::Ce => None,
        Objective::Distill { teacher, .. } => Some(teacher_logits(teacher, batch)?),
    };
    let tape = Tape::new();
    let bound = BoundParams::bind(&tape, params, true);
    let logits = forward_on_tape(config, &bound, &batch.tokens)?;
    let loss = match (objective, &target) {
        (Objective::Distill { kind, .. }, Some(t)) => {
            logits.divergence(t, &batch.mask, F::of(temperature), *kind)?
        }
        _ => logits.cross_entropy(&batch.targets, &batch.mask)?,
    };
    let value = loss.value().item()?.f64();
    let mut grads = tape.backward(loss)?;
    let g = bound
        .iter()
        .map(|(name, v)| {
            let t = grads.take(*v).unwrap_or_else(|| Tensor::zeros(&v.shape()));
            (name.clone(), t)
        })
        .collect();
    Ok((value, g))
}

/// Called with the number of completed steps and the current parameters,
/// once before the first step and after every step.
pub type StepHook<'h, F> = &'h mut dyn FnMut(usize, &ParamSet<F>) -> Result<()>;

fn optimize<F: Float>(
    config: &ModelConfig,
    params: &mut ParamSet<F>,
    cfg: &DistillConfig,
    steps: usize,
    batcher: &mut Batcher,
    objective: &Objective<'_, F>,
) -> Result<Vec<f64>> {
    optimize_with(
        config,
        params,
        cfg,
        steps,
        batcher,
        objective,
        &mut |_, _| Ok(()),
    )
}

/// Runs `steps` optimizer steps, returning the per-step training loss.
fn optimize_with<F: Float>(
    config: &ModelConfig,
    params: &mut ParamSet<F>,
    cfg: &DistillConfig,
    steps: usize,
    batcher: &mut Batcher,
    objective: &Objective<'_, F>,
    hook: StepHook<'_, F>,
) -> Result<Vec<f64>> {
    let mut state = AdamState::new(params);
    let mut curve = Vec::with_capacity(steps);
    hook(0, params)?;
    for step in 0..steps {
        let batch = batcher.next_batch();
        let (loss, mut grads) = loss_and_grads(config, params, &batch, objective, cfg.temperature)
            .map_err(|e| {
                if is_non_finite(&e) {
                    diverged(step, e)
                } else {
                    e
                }
            })?;
        if !loss.is_finite() {
            return Err(diverged(step, format!("loss {loss}")));
        }
        if let Some(c) = cfg.grad_clip {
            let norm = clip_global_norm(&mut grads, c);
            if !norm.is_finite() {
                return Err(diverged(step, "non-finite gradient norm"));
            }
        }
        adam_step(params, &grads, &mut state, cfg.lr, &cfg.adam)?;
        curve.push(loss);
        hook(step + 1, params)?;
    }
    Ok(curve)
}

fn check_vocab(vocab: &Vocabulary, configs: &[&ModelConfig]) -> Result<()> {
    for c in configs {
        if c.vocab_size != vocab.size() {
            return Err(DistillError::VocabMismatch(format!(
                "model vocabulary {} vs {} tokenizer of {}",
                c.vocab_size,
                vocab.kind(),
                vocab.size()
            )));
        }
    }
    Ok(())
}

/// Short architecture label, e.g. `L2-H2-D32-F128`.
pub fn arch_label(c: &ModelConfig) -> String {
    format!("L{}-H{}-D{}-F{}", c.n_layers, c.n_heads, c.d_model, c.d_ff)
}

/// CE training on the training split of `corpus`. Appends one lineage
/// stage holding the loss curve.
pub fn train_ce<F: Float>(
    model: Checkpoint<F>,
    corpus: &Corpus,
    vocab: &Vocabulary,
    cfg: &DistillConfig,
) -> Result<Checkpoint<F>> {
    train_ce_with(model, corpus, vocab, cfg, &mut |_, _| Ok(()))
}

/// [`train_ce`] with a progress hook.
pub fn train_ce_with<F: Float>(
    model: Checkpoint<F>,
    corpus: &Corpus,
    vocab: &Vocabulary,
    cfg: &DistillConfig,
    hook: StepHook<'_, F>,
) -> Result<Checkpoint<F>> {
    check_vocab(vocab, &[&model.config])?;
    cfg.validate(&[&model.config])?;
    let mut batcher = data::batches(
        corpus,
        Split::Train,
        vocab,
        cfg.batch,
        cfg.seq_len,
        cfg.seed,
    )?;
    let mut model = model;
    let curve = optimize_with(
        &model.config,
        &mut model.params,
        cfg,
        cfg.steps,
        &mut batcher,
        &Objective::Ce,
        hook,
    )?;
    model.meta.step += cfg.steps as u64;
    model.meta.tokenizer = Some(vocab.kind());
    model.meta.lineage.push(Stage::with_curve(
        format!(
            "trained ce steps={} lr={} batch={} seq_len={} seed={}",
            cfg.steps, cfg.lr, cfg.batch, cfg.seq_len, cfg.seed
        ),
        curve,
    ));
    Ok(model)
}

/// A source model trained from scratch on the chain corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRecipe {
    pub config: ModelConfig,
    pub tokenizer: TokenizerKind,
    pub train: DistillConfig,
    #[serde(default)]
    pub init_seed: u64,
}

pub fn train_from_recipe<F: Float>(
    recipe: &TrainRecipe,
    corpus: &Corpus,
    name: &str,
) -> Result<Checkpoint<F>> {
    let meta = Meta {
        name: name.to_string(),
        seed: recipe.init_seed,
        tokenizer: Some(recipe.tokenizer),
        ..Meta::default()
    };
    let model = Checkpoint::new(
        recipe.config,
        init_random(&recipe.config, recipe.init_seed),
        meta,
    )?;
    let vocab = Vocabulary::new(recipe.tokenizer);
    train_ce(model, corpus, &vocab, &recipe.train)
}

/// Distills `teacher` into a new model of `student_config`.
///
/// The student starts as the subset transform of the teacher (or random
/// weights under [`StudentInit::Random`]), takes `sft_warm_epochs` epochs of
/// CE on the training split, then `steps` steps of `loss_kind`. The teacher
/// is only read. The result's lineage is the teacher's plus one stage
/// carrying the distillation loss curve.
pub fn distill_edge<F: Float>(
    teacher: &Checkpoint<F>,
    student_config: &ModelConfig,
    corpus: &Corpus,
    vocab: &Vocabulary,
    cfg: &DistillConfig,
) -> Result<Checkpoint<F>> {
    check_vocab(vocab, &[&teacher.config, student_config])?;
    cfg.validate(&[&teacher.config, student_config])?;
    let mut student = match cfg.init {
        StudentInit::Subset => {
            let mut s = apply_transform(teacher, &plan_subset(&teacher.config, student_config)?)?;
            s.meta.lineage.pop();
            s
        }
        StudentInit::Random => Checkpoint::new(
            *student_config,
            init_random(student_config, cfg.seed),
            Meta {
                lineage: teacher.meta.lineage.clone(),
                ..Meta::default()
            },
        )?,
    };
    student.meta.name = arch_label(student_config);
    student.meta.seed = cfg.seed;
    student.meta.tokenizer = Some(vocab.kind());
    if cfg.init == StudentInit::Random {
        student.meta.step = 0;
    }
    if cfg.steps == 0 && cfg.sft_warm_epochs == 0 {
        return Ok(student);
    }

    let mut batcher = data::batches(
        corpus,
        Split::Train,
        vocab,
        cfg.batch,
        cfg.seq_len,
        cfg.seed,
    )?;
    let sft_steps = cfg.sft_warm_epochs * batcher.steps_per_epoch();
    if sft_steps > 0 {
        optimize(
            student_config,
            &mut student.params,
            cfg,
            sft_steps,
            &mut batcher,
            &Objective::Ce,
        )?;
    }
    let objective = match cfg.loss_kind {
        LossKind::Ce => Objective::Ce,
        LossKind::ReverseKl => Objective::Distill {
            teacher,
            kind: DivergenceKind::Reverse,
        },
        LossKind::ForwardKl => Objective::Distill {
            teacher,
            kind: DivergenceKind::Forward,
        },
    };
    let curve = optimize(
        student_config,
        &mut student.params,
        cfg,
        cfg.steps,
        &mut batcher,
        &objective,
    )
    .map_err(|e| match e {
        DistillError::Diverged { step, detail } => DistillError::Diverged {
            step: sft_steps + step,
            detail,
        },
        other => other,
    })?;
    student.meta.step += (sft_steps + cfg.steps) as u64;
    student.meta.lineage.push(Stage::with_curve(
        format!(
            "distilled {} from {} init={} sft_steps={sft_steps} steps={} lr={} temperature={} seed={}",
            cfg.loss_kind.as_str(),
            teacher.meta.name,
            match cfg.init {
                StudentInit::Subset => "subset",
                StudentInit::Random => "random",
            },
            cfg.steps,
            cfg.lr,
            cfg.temperature,
            cfg.seed
        ),
        curve,
    ));
    Ok(student)
}

/// One distillation edge straight from the source to the target.
pub fn run_direct_distill<F: Float>(
    source: &Checkpoint<F>,
    target_config: &ModelConfig,
    corpus: &Corpus,
    vocab: &Vocabulary,
    cfg: &DistillConfig,
) -> Result<Checkpoint<F>> {
    distill_edge(source, target_config, corpus, vocab, cfg)
}

/// SeqKD stage producing "anchor zero" from a source with another
/// tokenizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeSpec {
    pub source_tokenizer: TokenizerKind,
    pub bridge_tokenizer: TokenizerKind,
    pub bridge_config: ModelConfig,
    pub n_samples: usize,
    /// Characters of corpus text used as each prompt.
    pub prompt_len: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub greedy: bool,
    pub max_len: usize,
    #[serde(default)]
    pub seed: u64,
}

impl BridgeSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DistillError::InvalidConfig(m));
        if self.source_tokenizer == self.bridge_tokenizer {
            return bad(format!(
                "bridge tokenizer must differ from the source tokenizer ({})",
                self.source_tokenizer
            ));
        }
        self.bridge_config.validate()?;
        if self.bridge_config.vocab_size != Vocabulary::new(self.bridge_tokenizer).size() {
            return bad(format!(
                "bridge vocab_size {} does not match the {} tokenizer",
                self.bridge_config.vocab_size, self.bridge_tokenizer
            ));
        }
        if self.n_samples == 0 || self.prompt_len == 0 || self.max_len == 0 {
            return bad("n_samples, prompt_len and max_len must be positive".into());
        }
        if !self.greedy && !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!(
                "generation temperature {} must be positive",
                self.temperature
            ));
        }
        Ok(())
    }

    pub fn decoding(&self) -> Decoding {
        if self.greedy {
            Decoding::Greedy
        } else {
            Decoding::Temperature(self.temperature)
        }
    }
}

fn prompt_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Samples one completion per prompt, decoded back to text. Prompt `i` is
/// generated with a seed derived from `seed` and `i`; generation stops at
/// EOS or after `max_len` tokens.
pub fn seqkd_generate<F: Float>(
    teacher: &Checkpoint<F>,
    vocab: &Vocabulary,
    prompts: &[String],
    decoding: Decoding,
    max_len: usize,
    seed: u64,
) -> Result<Vec<(String, String)>> {
    if prompts.is_empty() {
        return Err(DistillError::NoPrompts);
    }
    check_vocab(vocab, &[&teacher.config])?;
    prompts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut ids = vec![vocab.bos()];
            ids.extend(vocab.encode(p));
            let out = sample(
                &teacher.config,
                &teacher.params,
                &ids,
                decoding,
                max_len,
                prompt_seed(seed, i),
                Some(vocab.eos()),
            )?;
            Ok((p.clone(), vocab.decode(&out)?))
        })
        .collect()
}

/// Seeded prompts: `prompt_len`-character slices of random training
/// documents at random offsets.
pub fn draw_prompts(
    corpus: &Corpus,
    n: usize,
    prompt_len: usize,
    seed: u64,
) -> Result<Vec<String>> {
    let docs = corpus.train();
    if docs.is_empty() {
        return Err(DataError::EmptySplit("train").into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let chars: Vec<char> = docs[rng.gen_range(0..docs.len())].chars().collect();
            let start = rng.gen_range(0..=chars.len().saturating_sub(prompt_len));
            chars[start..(start + prompt_len).min(chars.len())]
                .iter()
                .collect()
        })
        .collect())
}

/// Everything the bridge stage produced.
#[derive(Clone, Debug)]
pub struct BridgeOutcome<F> {
    pub bridge: Checkpoint<F>,
    pub pairs: Vec<(String, String)>,
    /// Mean CE over every completion target of the re-encoded pairs, before
    /// and after training.
    pub ce_before: f64,
    pub ce_after: f64,
}

/// Generates `(prompt, completion)` pairs with the source, re-encodes them
/// with the bridge tokenizer and trains a randomly initialized bridge on
/// `−log P(completion | prompt)`.
pub fn run_bridge<F: Float>(
    spec: &BridgeSpec,
    source: &Checkpoint<F>,
    corpus: &Corpus,
    cfg: &DistillConfig,
) -> Result<BridgeOutcome<F>> {
    spec.validate()?;
    let src_vocab = Vocabulary::new(spec.source_tokenizer);
    let bridge_vocab = Vocabulary::new(spec.bridge_tokenizer);
    check_vocab(&src_vocab, &[&source.config])?;
    cfg.validate(&[&spec.bridge_config])?;

    let prompts = draw_prompts(corpus, spec.n_samples, spec.prompt_len, spec.seed)?;
    let pairs = seqkd_generate(
        source,
        &src_vocab,
        &prompts,
        spec.decoding(),
        spec.max_len,
        spec.seed,
    )?;
    let examples = data::encode_pairs(&pairs, &bridge_vocab);
    let eval_set = data::example_batches(&examples, bridge_vocab.pad(), cfg.batch, cfg.seq_len)?;
    let mut batcher = Batcher::new(
        &examples,
        bridge_vocab.pad(),
        cfg.batch,
        cfg.seq_len,
        cfg.seed,
    )?;

    let config = spec.bridge_config;
    let mut params = init_random(&config, cfg.seed);
    let ce_before = eval::mean_ce(&config, &params, &eval_set)?;
    let curve = optimize(
        &config,
        &mut params,
        cfg,
        cfg.steps,
        &mut batcher,
        &Objective::Ce,
    )?;
    let ce_after = eval::mean_ce(&config, &params, &eval_set)?;
    let meta = Meta {
        name: "anchor-0".into(),
        lineage: vec![Stage::with_curve(
            format!(
                "seqkd bridge from {} ({} -> {} tokenizer) samples={} steps={} seed={}",
                source.meta.name,
                spec.source_tokenizer,
                spec.bridge_tokenizer,
                spec.n_samples,
                cfg.steps,
                cfg.seed
            ),
            curve,
        )],
        seed: cfg.seed,
        step: cfg.steps as u64,
        tokenizer: Some(spec.bridge_tokenizer),
    };
    Ok(BridgeOutcome {
        bridge: Checkpoint::new(config, params, meta)?,
        pairs,
        ce_before,
        ce_after,
    })
}

/// Where a chain's source model comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceSpec {
    Path(PathBuf),
    Recipe(TrainRecipe),
}

/// Optional bridge stage with its own training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeStage {
    pub spec: BridgeSpec,
    pub train: DistillConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSpec {
    pub source: SourceSpec,
    pub anchors: Vec<ModelConfig>,
    pub edges: Vec<DistillConfig>,
    #[serde(default)]
    pub bridge: Option<BridgeStage>,
}

impl ChainSpec {
    /// Structural checks that need no source weights.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DistillError::InvalidConfig(m));
        if self.anchors.is_empty() {
            return bad("at least one anchor is required".into());
        }
        if self.edges.len() != self.anchors.len() {
            return bad(format!(
                "{} edges for {} anchors",
                self.edges.len(),
                self.anchors.len()
            ));
        }
        for (i, a) in self.anchors.iter().enumerate() {
            a.validate()
                .map_err(|e| DistillError::InvalidConfig(format!("anchors[{i}]: {e}")))?;
        }
        for (i, w) in self.anchors.windows(2).enumerate() {
            if count_params(&w[1]) >= count_params(&w[0]) {
                return bad(format!(
                    "anchors[{}] has {} parameters, not fewer than anchors[{i}] with {}",
                    i + 1,
                    count_params(&w[1]),
                    count_params(&w[0])
                ));
            }
            if !(w[1].compatible_with(&w[0]) && w[1].structurally_le(&w[0])) {
                return bad(format!("anchors[{}] is not nested in anchors[{i}]", i + 1));
            }
        }
        for (i, e) in self.edges.iter().enumerate() {
            if e.steps == 0 {
                return bad(format!("edges[{i}].steps must be at least 1"));
            }
            e.validate(&[&self.anchors[i]])
                .map_err(|err| DistillError::InvalidConfig(format!("edges[{i}]: {err}")))?;
        }
        if let Some(b) = &self.bridge {
            b.spec
                .validate()
                .map_err(|err| DistillError::InvalidConfig(format!("bridge: {err}")))?;
            b.train
                .validate(&[&b.spec.bridge_config])
                .map_err(|err| DistillError::InvalidConfig(format!("bridge.train: {err}")))?;
        }
        if let SourceSpec::Recipe(r) = &self.source {
            r.config.validate()?;
            r.train.validate(&[&r.config]).map_err(|err| {
                DistillError::InvalidConfig(format!("source.recipe.train: {err}"))
            })?;
        }
        Ok(())
    }

    /// Tokenizer of the homogeneous part of the chain.
    pub fn chain_tokenizer(&self, source: Option<TokenizerKind>) -> Option<TokenizerKind> {
        match (&self.bridge, &self.source) {
            (Some(b), _) => Some(b.spec.bridge_tokenizer),
            (None, SourceSpec::Recipe(r)) => Some(r.tokenizer),
            (None, SourceSpec::Path(_)) => source,
        }
    }
}

/// Distills each anchor from its predecessor, starting from `teacher`.
/// Anchors are named `anchor-1`, `anchor-2`, ….
pub fn run_stepwise_chain<F: Float>(
    teacher: &Checkpoint<F>,
    anchors: &[ModelConfig],
    edges: &[DistillConfig],
    corpus: &Corpus,
    vocab: &Vocabulary,
) -> Result<Vec<Checkpoint<F>>> {
    if anchors.len() != edges.len() || anchors.is_empty() {
        return Err(DistillError::InvalidConfig(format!(
            "{} anchors and {} edges",
            anchors.len(),
            edges.len()
        )));
    }
    let mut out: Vec<Checkpoint<F>> = Vec::with_capacity(anchors.len());
    for (i, (cfg, edge)) in anchors.iter().zip(edges).enumerate() {
        let prev = out.last().unwrap_or(teacher);
        if count_params(cfg) >= count_params(&prev.config) {
            return Err(DistillError::InvalidConfig(format!(
                "anchor {} is not smaller than its teacher",
                i + 1
            )));
        }
        let mut student =
            distill_edge(prev, cfg, corpus, vocab, edge).map_err(|e| DistillError::Edge {
                index: i,
                teacher: prev.meta.name.clone(),
                student: arch_label(cfg),
                source: Box::new(e),
            })?;
        student.meta.name = format!("anchor-{}", i + 1);
        out.push(student);
    }
    Ok(out)
}

/// Output of a full chain run.
#[derive(Clone, Debug)]
pub struct ChainOutcome<F> {
    pub bridge: Option<BridgeOutcome<F>>,
    pub anchors: Vec<Checkpoint<F>>,
}

/// Bridge stage (when configured) followed by the stepwise chain.
pub fn run_chain_spec<F: Float>(
    spec: &ChainSpec,
    source: &Checkpoint<F>,
    corpus: &Corpus,
) -> Result<ChainOutcome<F>> {
    spec.validate()?;
    let bridge = match &spec.bridge {
        Some(b) => Some(run_bridge(&b.spec, source, corpus, &b.train)?),
        None => None,
    };
    let teacher = bridge.as_ref().map_or(source, |b| &b.bridge);
    let kind = spec
        .chain_tokenizer(teacher.meta.tokenizer)
        .or_else(|| infer_tokenizer(teacher.config.vocab_size))
        .ok_or_else(|| {
            DistillError::VocabMismatch(format!(
                "no tokenizer has vocabulary size {}",
                teacher.config.vocab_size
            ))
        })?;
    let vocab = Vocabulary::new(kind);
    let anchors = run_stepwise_chain(teacher, &spec.anchors, &spec.edges, corpus, &vocab)?;
    Ok(ChainOutcome { bridge, anchors })
}

/// The built-in tokenizer whose vocabulary has `size` entries.
pub fn infer_tokenizer(size: usize) -> Option<TokenizerKind> {
    [TokenizerKind::Byte, TokenizerKind::Char]
        .into_iter()
        .find(|&k| Vocabulary::new(k).size() == size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_markov;
    use crate::tensor::grad_check;

    fn tiny(n_layers: usize, n_heads: usize, d_model: usize) -> ModelConfig {
        ModelConfig {
            n_layers,
            n_heads,
            head_dim: 8,
            d_model,
            d_ff: 2 * d_model,
            vocab_size: 100,
            max_seq_len: 16,
            tied_lm_head: true,
        }
    }

    fn fresh(c: ModelConfig, seed: u64) -> Checkpoint<f32> {
        let meta = Meta {
            name: "source".into(),
            tokenizer: Some(TokenizerKind::Char),
            ..Meta::default()
        };
        Checkpoint::new(c, init_random(&c, seed), meta).unwrap()
    }

    fn quick(steps: usize) -> DistillConfig {
        DistillConfig {
            steps,
            batch: 4,
            seq_len: 12,
            lr: 3e-3,
            sft_warm_epochs: 0,
            ..DistillConfig::default()
        }
    }

    fn corpus() -> Corpus {
        gen_markov(5, 40, 60, 1, "abcdef").unwrap()
    }

    fn logits2(a: f64, b: f64) -> Tensor<f64> {
        Tensor::new(vec![1, 2], vec![a, b]).unwrap()
    }

    #[test]
    fn two_class_kl_values_match_scalar_oracle() {
        // logits ln p give softmax p exactly
        let s = logits2(0.9f64.ln(), 0.1f64.ln());
        let t = logits2(0.5f64.ln(), 0.5f64.ln());
        let rev = reverse_kl_loss(&s, &t, &[true]).unwrap();
        let oracle = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        assert!((rev - oracle).abs() < 1e-12);
        assert!((rev - 0.368064).abs() < 1e-6);
        let fwd = forward_kl_loss(&s, &t, &[true]).unwrap();
        let f_oracle = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((fwd - f_oracle).abs() < 1e-12);
        assert!((fwd - 0.510826).abs() < 1e-6);
        assert!((fwd - rev).abs() > 0.1);
    }

    #[test]
    fn kl_is_zero_at_equality_and_rejects_shape_mismatch() {
        let a = Tensor::from_fn(&[3, 5], |i| (i as f64 * 0.37).sin());
        assert!(reverse_kl_loss(&a, &a, &[true; 3]).unwrap().abs() <= 1e-10);
        assert!(forward_kl_loss(&a, &a, &[true; 3]).unwrap().abs() <= 1e-10);
        let b = Tensor::<f64>::zeros(&[3, 4]);
        assert!(reverse_kl_loss(&a, &b, &[true; 3]).is_err());
    }

    #[test]
    fn reverse_kl_gradient_matches_finite_differences() {
        let teacher = Tensor::from_fn(&[4, 6], |i| ((i * 7) % 5) as f64 * 0.4 - 1.0);
        let student = Tensor::from_fn(&[4, 6], |i| ((i * 3) % 7) as f64 * 0.3 - 0.8);
        let mask = [true, false, true, true];
        let err = grad_check(
            |_, p| p[0].divergence(&teacher, &mask, 1.0, DivergenceKind::Reverse),
            &[student],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn adam_first_step_moves_each_coordinate_by_lr() {
        let mut params: ParamSet<f64> = [(
            "w".to_string(),
            Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(),
        )]
        .into_iter()
        .collect();
        let grads: ParamSet<f64> = [(
            "w".to_string(),
            Tensor::new(vec![3], vec![0.3, -4.0, 0.0]).unwrap(),
        )]
        .into_iter()
        .collect();
        let mut state = AdamState::new(&params);
        let adam = AdamConfig::default();
        adam_step(&mut params, &grads, &mut state, 0.01, &adam).unwrap();
        let w = params.get("w").unwrap().data();
        // at t = 1 the corrected moments are g and g², so the step is lr·g/(|g|+ε)
        let expect = |x: f64, g: f64| x - 0.01 * g / (g.abs() + 1e-8);
        assert!((w[0] - expect(1.0, 0.3)).abs() < 1e-15);
        assert!((w[1] - expect(-2.0, -4.0)).abs() < 1e-15);
        assert_eq!(w[2], 0.5);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut params: ParamSet<f32> = [("a".to_string(), Tensor::full(&[2, 2], 0.7))]
            .into_iter()
            .collect();
        let before = params.clone();
        let grads: ParamSet<f32> = [("a".to_string(), Tensor::zeros(&[2, 2]))]
            .into_iter()
            .collect();
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, 0.1, &AdamConfig::default()).unwrap();
        assert!(params.bits_eq(&before));
        assert_eq!(state.t, 1);
        let wrong: ParamSet<f32> = [("a".to_string(), Tensor::zeros(&[4]))]
            .into_iter()
            .collect();
        assert!(adam_step(&mut params, &wrong, &mut state, 0.1, &AdamConfig::default()).is_err());
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut g: ParamSet<f64> = [
            (
                "a".to_string(),
                Tensor::new(vec![2], vec![3.0, 0.0]).unwrap(),
            ),
            ("b".to_string(), Tensor::new(vec![1], vec![4.0]).unwrap()),
        ]
        .into_iter()
        .collect();
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g.get("a").unwrap().data()[0] - 0.6).abs() < 1e-15);
        assert!((g.get("b").unwrap().data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_step_edge_returns_the_initialized_student() {
        let teacher = fresh(tiny(2, 2, 16), 1);
        let c = corpus();
        let v = Vocabulary::char();
        let s = distill_edge(&teacher, &tiny(1, 1, 8), &c, &v, &quick(0)).unwrap();
        let init = apply_transform(
            &teacher,
            &plan_subset(&teacher.config, &tiny(1, 1, 8)).unwrap(),
        )
        .unwrap();
        assert!(s.params.bits_eq(&init.params));
    }

    #[test]
    fn edge_leaves_teacher_untouched_and_records_curve() {
        let teacher = fresh(tiny(2, 2, 16), 1);
        let copy = teacher.clone();
        let s = distill_edge(
            &teacher,
            &tiny(1, 2, 16),
            &corpus(),
            &Vocabulary::char(),
            &quick(5),
        )
        .unwrap();
        assert!(teacher.bits_eq(&copy));
        assert_eq!(s.meta.lineage.len(), 1);
        assert_eq!(s.meta.lineage[0].loss_curve.len(), 5);
        assert!(s.meta.lineage[0]
            .descriptor
            .starts_with("distilled reverse_kl from source"));
    }

    #[test]
    fn self_distillation_starts_at_zero() {
        let teacher = fresh(tiny(1, 2, 16), 3);
        let s = distill_edge(
            &teacher,
            &teacher.config,
            &corpus(),
            &Vocabulary::char(),
            &quick(10),
        )
        .unwrap();
        let curve = &s.meta.lineage[0].loss_curve;
        assert!(curve[0].abs() < 1e-9);
        assert!(curve.iter().all(|&l| l <= 1e-3), "{curve:?}");
    }

    #[test]
    fn vocab_mismatch_is_rejected() {
        let teacher = fresh(tiny(1, 1, 8), 0);
        let err = distill_edge(
            &teacher,
            &tiny(1, 1, 8),
            &corpus(),
            &Vocabulary::byte(),
            &quick(1),
        );
        assert!(matches!(err, Err(DistillError::VocabMismatch(_))));
    }

    #[test]
    fn divergence_reports_step() {
        let teacher = fresh(tiny(2, 2, 16), 0);
        let cfg = DistillConfig {
            lr: 1e30,
            grad_clip: None,
            loss_kind: LossKind::Ce,
            ..quick(20)
        };
        match distill_edge(
            &teacher,
            &tiny(1, 1, 8),
            &corpus(),
            &Vocabulary::char(),
            &cfg,
        ) {
            Err(DistillError::Diverged { step, .. }) => assert!((1..20).contains(&step)),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn chain_is_deterministic_with_growing_lineage() {
        let teacher = fresh(tiny(3, 2, 16), 2);
        let anchors = [tiny(2, 2, 16), tiny(1, 1, 8)];
        let edges = [quick(3), quick(3)];
        let run = || {
            run_stepwise_chain(&teacher, &anchors, &edges, &corpus(), &Vocabulary::char()).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].meta.lineage.len(), 1);
        assert_eq!(a[1].meta.lineage.len(), 2);
        assert_eq!(a[1].meta.name, "anchor-2");
        for (x, y) in a.iter().zip(&b) {
            assert!(x.bits_eq(y));
        }
    }

    #[test]
    fn single_anchor_chain_equals_direct() {
        let teacher = fresh(tiny(2, 2, 16), 2);
        let c = corpus();
        let v = Vocabulary::char();
        let chain = run_stepwise_chain(&teacher, &[tiny(1, 1, 8)], &[quick(4)], &c, &v).unwrap();
        let direct = run_direct_distill(&teacher, &tiny(1, 1, 8), &c, &v, &quick(4)).unwrap();
        assert!(chain[0].params.bits_eq(&direct.params));
    }

    #[test]
    fn chain_edge_failures_name_the_edge() {
        let teacher = fresh(tiny(2, 2, 16), 2);
        let bad = DistillConfig {
            seq_len: 64,
            ..quick(1)
        };
        let err = run_stepwise_chain(
            &teacher,
            &[tiny(1, 2, 16), tiny(1, 1, 8)],
            &[quick(1), bad],
            &corpus(),
            &Vocabulary::char(),
        )
        .unwrap_err();
        assert!(matches!(err, DistillError::Edge { index: 1, .. }), "{err}");
    }

    #[test]
    fn seqkd_generation_is_seeded() {
        let teacher = fresh(tiny(1, 1, 8), 4);
        let v = Vocabulary::char();
        let prompts: Vec<String> = vec!["ab".into(), "cd".into(), "e".into()];
        let a = seqkd_generate(&teacher, &v, &prompts, Decoding::Temperature(1.0), 6, 1).unwrap();
        let b = seqkd_generate(&teacher, &v, &prompts, Decoding::Temperature(1.0), 6, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert!(seqkd_generate(&teacher, &v, &[], Decoding::Greedy, 6, 1).is_err());
    }

    #[test]
    fn greedy_seqkd_matches_argmax_sampling() {
        let teacher = fresh(tiny(1, 1, 8), 4);
        let v = Vocabulary::char();
        let pairs =
            seqkd_generate(&teacher, &v, &["abc".to_string()], Decoding::Greedy, 5, 0).unwrap();
        let mut ids = vec![v.bos()];
        ids.extend(v.encode("abc"));
        let direct = sample(
            &teacher.config,
            &teacher.params,
            &ids,
            Decoding::Greedy,
            5,
            99,
            Some(v.eos()),
        )
        .unwrap();
        assert_eq!(pairs[0].1, v.decode(&direct).unwrap());
    }

    #[test]
    fn bridge_requires_distinct_tokenizers() {
        let spec = BridgeSpec {
            source_tokenizer: TokenizerKind::Char,
            bridge_tokenizer: TokenizerKind::Char,
            bridge_config: tiny(1, 1, 8),
            n_samples: 2,
            prompt_len: 3,
            temperature: 1.0,
            greedy: false,
            max_len: 4,
            seed: 0,
        };
        let src = fresh(tiny(1, 1, 8), 0);
        assert!(matches!(
            run_bridge(&spec, &src, &corpus(), &quick(1)),
            Err(DistillError::InvalidConfig(_))
        ));
    }

    #[test]
    fn chain_spec_validation() {
        let spec = ChainSpec {
            source: SourceSpec::Path("src.cbdc".into()),
            anchors: vec![tiny(2, 2, 16), tiny(1, 1, 8)],
            edges: vec![quick(1), quick(1)],
            bridge: None,
        };
        assert!(spec.validate().is_ok());
        let mut s = spec.clone();
        s.edges.pop();
        assert!(s.validate().is_err());
        let mut s = spec.clone();
        s.anchors.swap(0, 1);
        assert!(s.validate().is_err());
        let mut s = spec;
        s.edges[0].steps = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn distill_config_json_defaults() {
        let c: DistillConfig =
            serde_json::from_str(r#"{"steps": 7, "loss_kind": "forward_kl"}"#).unwrap();
        assert_eq!(c.steps, 7);
        assert_eq!(c.loss_kind, LossKind::ForwardKl);
        assert_eq!(c.grad_clip, Some(1.0));
        assert_eq!(c.sft_warm_epochs, 1);
        assert!(serde_json::from_str::<DistillConfig>(r#"{"stepz": 7}"#).is_err());
    }
}
