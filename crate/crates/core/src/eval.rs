//! Metrics, convergence tracking, reports, and the comparison protocols.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::data::{self, Batch, Corpus, DataError, Split};
use crate::distill::{self, DistillConfig, DistillError};
use crate::surgery::{self, apply_transform, interpolate, plan_expand, SurgeryError};
use crate::tensor::{DivergenceKind, Float, Tape};
use crate::tokenizer::Vocabulary;
use crate::transformer::{
    count_params, forward_on_tape, init_random, BoundParams, ModelConfig, ModelError, ParamSet,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("curve {0:?} never reaches the target loss {1}")]
    TargetNotReached(String, f64),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("vocabulary mismatch: model has {model}, tokenizer has {tokenizer}")]
    VocabMismatch { model: usize, tokenizer: usize },
    #[error("malformed report: {0}")]
    Report(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Surgery(#[from] SurgeryError),
    #[error(transparent)]
    Distill(#[from] DistillError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn log_sum_exp<F: Float>(row: &[F]) -> f64 {
    let max = row
        .iter()
        .map(|v| v.f64())
        .fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v.f64() - max).exp()).sum::<f64>().ln()
}

fn batch_logits<F: Float>(
    config: &ModelConfig,
    params: &ParamSet<F>,
    batch: &Batch,
) -> std::result::Result<crate::tensor::Tensor<F>, ModelError> {
    let tape = Tape::new();
    let bound = BoundParams::bind(&tape, params, false);
    let logits = forward_on_tape(config, &bound, &batch.tokens)?;
    let out = (*logits.value()).clone();
    Ok(out)
}

/// Token-weighted mean cross-entropy (nats) over every counted target of
/// `batches`, accumulated in f64.
pub fn mean_ce<F: Float>(
    config: &ModelConfig,
    params: &ParamSet<F>,
    batches: &[Batch],
) -> std::result::Result<f64, ModelError> {
    let vocab = config.vocab_size;
    let (mut total, mut count) = (0.0f64, 0usize);
    for b in batches {
        let logits = batch_logits(config, params, b)?;
        for (r, row) in logits.data().chunks(vocab).enumerate() {
            if b.mask[r] {
                total += log_sum_exp(row) - row[b.targets[r]].f64();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(ModelError::InvalidConfig(
            "no counted positions to evaluate".into(),
        ));
    }
    Ok(total / count as f64)
}

/// Token-weighted mean KL between student and teacher over `batches`.
pub fn mean_divergence<F: Float>(
    student: &Checkpoint<F>,
    teacher: &Checkpoint<F>,
    batches: &[Batch],
    kind: DivergenceKind,
    temperature: f64,
) -> std::result::Result<f64, DistillError> {
    let (mut total, mut count) = (0.0f64, 0usize);
    for b in batches {
        let s = batch_logits(&student.config, &student.params, b)?;
        let t = distill::teacher_logits(teacher, b)?;
        let tape = Tape::new();
        let l = tape
            .constant(s)
            .divergence(&t, &b.mask, F::of(temperature), kind)?;
        let n = b.counted();
        total += l.value().item()?.f64() * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

/// Validation-style evaluation windows for one split.
pub fn split_batches(
    corpus: &Corpus,
    split: Split,
    vocab: &Vocabulary,
    seq_len: usize,
) -> Result<Vec<Batch>> {
    Ok(data::eval_batches(corpus, split, vocab, 16, seq_len)?)
}

fn check_vocab<F: Float>(ckpt: &Checkpoint<F>, vocab: &Vocabulary) -> Result<()> {
    if ckpt.config.vocab_size != vocab.size() {
        return Err(EvalError::VocabMismatch {
            model: ckpt.config.vocab_size,
            tokenizer: vocab.size(),
        });
    }
    Ok(())
}

/// Mean CE of `ckpt` on a corpus split.
pub fn split_loss<F: Float>(
    ckpt: &Checkpoint<F>,
    corpus: &Corpus,
    split: Split,
    vocab: &Vocabulary,
    seq_len: usize,
) -> Result<f64> {
    check_vocab(ckpt, vocab)?;
    let batches = split_batches(corpus, split, vocab, seq_len.min(ckpt.config.max_seq_len))?;
    Ok(mean_ce(&ckpt.config, &ckpt.params, &batches)?)
}

/// `exp` of the mean CE over unmasked positions.
pub fn perplexity<F: Float>(
    ckpt: &Checkpoint<F>,
    corpus: &Corpus,
    split: Split,
    vocab: &Vocabulary,
    seq_len: usize,
) -> Result<f64> {
    Ok(split_loss(ckpt, corpus, split, vocab, seq_len)?.exp())
}

/// Fraction of exact matches.
pub fn accuracy<T: PartialEq>(predictions: &[T], labels: &[T]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch(predictions.len(), labels.len()));
    }
    if labels.is_empty() {
        return Err(EvalError::Empty("accuracy labels"));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Longest common subsequence length by the O(n·m) dynamic program.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure `(1+β²)PR / (R + β²P)` with `P = LCS/|candidate|` and
/// `R = LCS/|reference|`.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T], beta: f64) -> Result<f64> {
    if reference.is_empty() {
        return Err(EvalError::Empty("rouge_l reference"));
    }
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return Ok(0.0);
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let b2 = beta * beta;
    Ok((1.0 + b2) * p * r / (r + b2 * p))
}

/// [`rouge_l`] over whitespace-separated words with β = 1.
pub fn rouge_l_text(candidate: &str, reference: &str) -> Result<f64> {
    let c: Vec<&str> = candidate.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    rouge_l(&c, &r, 1.0)
}

/// One loss value per recorded step.
pub type Curve = Vec<(usize, f64)>;

/// Step of the first point whose loss is at or below `target`.
pub fn steps_to_target(curve: &[(usize, f64)], target: f64) -> Option<usize> {
    curve.iter().find(|(_, l)| *l <= target).map(|(s, _)| *s)
}

/// Per-step curve from a plain loss list (step = index).
pub fn indexed(losses: &[f64]) -> Curve {
    losses.iter().copied().enumerate().collect()
}

/// `steps_to_target(b) / steps_to_target(a)`: how many times faster `a`
/// reaches the target. A curve already at the target at step 0 counts as
/// one step.
pub fn speedup(curve_a: &[(usize, f64)], curve_b: &[(usize, f64)], target: f64) -> Result<f64> {
    let a = steps_to_target(curve_a, target)
        .ok_or_else(|| EvalError::TargetNotReached("a".into(), target))?;
    let b = steps_to_target(curve_b, target)
        .ok_or_else(|| EvalError::TargetNotReached("b".into(), target))?;
    Ok(b.max(1) as f64 / a.max(1) as f64)
}

/// Population standard deviation of the last `n` values.
pub fn tail_std(values: &[f64], n: usize) -> f64 {
    let tail = &values[values.len().saturating_sub(n)..];
    if tail.is_empty() {
        return 0.0;
    }
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    (tail.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / tail.len() as f64).sqrt()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    /// Lineage descriptors of the evaluated checkpoint(s).
    pub lineage: Vec<String>,
    pub seeds: BTreeMap<String, u64>,
}

/// Curves plus scalar results of one evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub name: String,
    pub curves: BTreeMap<String, Curve>,
    pub metrics: BTreeMap<String, f64>,
    pub steps_to_target: Option<usize>,
    pub speedup: Option<f64>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Summary {
    name: String,
    metrics: BTreeMap<String, f64>,
    steps_to_target: Option<usize>,
    speedup: Option<f64>,
    provenance: Provenance,
}

impl EvalReport {
    pub fn new(name: impl Into<String>) -> Self {
        EvalReport {
            name: name.into(),
            ..EvalReport::default()
        }
    }

    /// `run,step,loss` rows, runs in name order, steps ascending.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("run,step,loss\n");
        for (run, curve) in &self.curves {
            for (step, loss) in curve {
                out.push_str(&format!("{run},{step},{loss}\n"));
            }
        }
        out
    }

    /// JSON summary of everything except the curves.
    pub fn to_json(&self) -> String {
        let s = Summary {
            name: self.name.clone(),
            metrics: self.metrics.clone(),
            steps_to_target: self.steps_to_target,
            speedup: self.speedup,
            provenance: self.provenance.clone(),
        };
        serde_json::to_string_pretty(&s).expect("summary serializes")
    }

    pub fn from_parts(csv: &str, json: &str) -> Result<Self> {
        let s: Summary =
            serde_json::from_str(json).map_err(|e| EvalError::Report(e.to_string()))?;
        let mut lines = csv.lines();
        if lines.next() != Some("run,step,loss") {
            return Err(EvalError::Report("missing run,step,loss header".into()));
        }
        let mut curves: BTreeMap<String, Curve> = BTreeMap::new();
        for (i, line) in lines.enumerate() {
            let bad = || EvalError::Report(format!("csv line {}: {line:?}", i + 2));
            let mut f = line.split(',');
            let (run, step, loss) = match (f.next(), f.next(), f.next(), f.next()) {
                (Some(r), Some(s), Some(l), None) => (r, s, l),
                _ => return Err(bad()),
            };
            let step: usize = step.parse().map_err(|_| bad())?;
            let loss: f64 = loss.parse().map_err(|_| bad())?;
            let curve = curves.entry(run.to_string()).or_default();
            if curve.last().is_some_and(|(s, _)| *s >= step) {
                return Err(EvalError::Report(format!(
                    "csv line {}: steps not increasing",
                    i + 2
                )));
            }
            curve.push((step, loss));
        }
        Ok(EvalReport {
            name: s.name,
            curves,
            metrics: s.metrics,
            steps_to_target: s.steps_to_target,
            speedup: s.speedup,
            provenance: s.provenance,
        })
    }

    /// Run names become CSV fields, so they must not contain commas or
    /// newlines.
    pub fn add_curve(&mut self, run: impl Into<String>, curve: Curve) -> Result<()> {
        let run = run.into();
        if run.contains([',', '\n']) || run.is_empty() {
            return Err(EvalError::Report(format!("invalid run name {run:?}")));
        }
        if curve.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(EvalError::Report(format!("curve {run} is not step-sorted")));
        }
        self.curves.insert(run, curve);
        Ok(())
    }
}

/// Both runs of [`compare_init`].
#[derive(Clone, Debug, PartialEq)]
pub struct InitComparison {
    pub cbd: EvalReport,
    pub rand: EvalReport,
    pub step_zero_gap: f64,
}

impl InitComparison {
    /// One report holding both curves and all metrics.
    pub fn combined(&self) -> EvalReport {
        let mut r = EvalReport::new("compare-init");
        for rep in [&self.cbd, &self.rand] {
            r.curves.extend(rep.curves.clone());
            for (k, v) in &rep.metrics {
                r.metrics.insert(format!("{}.{k}", rep.name), *v);
            }
            r.provenance
                .lineage
                .extend(rep.provenance.lineage.iter().cloned());
            r.provenance.seeds.extend(rep.provenance.seeds.clone());
        }
        r.metrics.insert("step_zero_gap".into(), self.step_zero_gap);
        r.steps_to_target = self.cbd.steps_to_target;
        r.speedup = self.cbd.speedup;
        r
    }
}

/// Validation-loss curve of CE training with an evaluation every
/// `eval_every` steps (and at the first and last step).
pub fn train_tracked<F: Float>(
    model: Checkpoint<F>,
    corpus: &Corpus,
    vocab: &Vocabulary,
    cfg: &DistillConfig,
    eval_every: usize,
) -> Result<(Checkpoint<F>, Curve)> {
    check_vocab(&model, vocab)?;
    let val = split_batches(corpus, Split::Validation, vocab, cfg.seq_len)?;
    let config = model.config;
    let every = eval_every.max(1);
    let mut curve = Curve::new();
    let trained = distill::train_ce_with(model, corpus, vocab, cfg, &mut |step, params| {
        if step % every == 0 || step == cfg.steps {
            curve.push((step, mean_ce(&config, params, &val)?));
        }
        Ok(())
    })?;
    Ok((trained, curve))
}

/// Trains `cbd` and `rand` identically and records their validation
/// curves. The target loss for convergence is the random run's final loss.
pub fn compare_init<F: Float>(
    cbd: &Checkpoint<F>,
    rand: &Checkpoint<F>,
    corpus: &Corpus,
    vocab: &Vocabulary,
    cfg: &DistillConfig,
    eval_every: usize,
) -> Result<InitComparison> {
    if cbd.config != rand.config {
        return Err(EvalError::ConfigMismatch(
            "compare_init needs two checkpoints of the same config".into(),
        ));
    }
    let (_, cbd_curve) = train_tracked(cbd.clone(), corpus, vocab, cfg, eval_every)?;
    let (_, rand_curve) = train_tracked(rand.clone(), corpus, vocab, cfg, eval_every)?;
    let target = rand_curve
        .last()
        .map(|p| p.1)
        .expect("curve has the step-0 point");
    let report = |name: &str, ck: &Checkpoint<F>, curve: &Curve| -> Result<EvalReport> {
        let mut r = EvalReport::new(name);
        r.metrics.insert("step0_loss".into(), curve[0].1);
        r.metrics
            .insert("final_loss".into(), curve.last().expect("nonempty").1);
        r.metrics.insert("target_loss".into(), target);
        r.steps_to_target = steps_to_target(curve, target);
        r.provenance.lineage = ck
            .meta
            .lineage
            .iter()
            .map(|s| s.descriptor.clone())
            .collect();
        r.provenance
            .seeds
            .insert(format!("{name}.init"), ck.meta.seed);
        r.provenance.seeds.insert("train".into(), cfg.seed);
        r.add_curve(name, curve.clone())?;
        Ok(r)
    };
    let mut cbd_report = report("cbd", cbd, &cbd_curve)?;
    let rand_report = report("rand", rand, &rand_curve)?;
    cbd_report.speedup = speedup(&cbd_curve, &rand_curve, target).ok();
    Ok(InitComparison {
        step_zero_gap: rand_curve[0].1 - cbd_curve[0].1,
        cbd: cbd_report,
        rand: rand_report,
    })
}

/// Metric key for one α of a sweep.
pub fn alpha_key(alpha: f64) -> String {
    format!("loss@alpha={alpha}")
}

/// Step-0 validation loss of the interpolated target for each α, in the
/// given order, plus `best_alpha` (first minimum).
pub fn alpha_sweep<F: Float>(
    small: &Checkpoint<F>,
    large: &Checkpoint<F>,
    dst: &ModelConfig,
    alphas: &[f64],
    corpus: &Corpus,
    vocab: &Vocabulary,
    seq_len: usize,
) -> Result<EvalReport> {
    if alphas.is_empty() {
        return Err(EvalError::Empty("alpha list"));
    }
    let mut report = EvalReport::new("alpha-sweep");
    let mut best: Option<(f64, f64)> = None;
    for &a in alphas {
        let target = interpolate(small, large, dst, a)?;
        let loss = split_loss(&target, corpus, Split::Validation, vocab, seq_len)?;
        report.metrics.insert(alpha_key(a), loss);
        if best.is_none_or(|(_, l)| loss < l) {
            best = Some((a, loss));
        }
    }
    let (ba, bl) = best.expect("nonempty");
    report.metrics.insert("best_alpha".into(), ba);
    report.metrics.insert("best_loss".into(), bl);
    report.provenance.lineage = vec![small.meta.name.clone(), large.meta.name.clone()];
    Ok(report)
}

/// Initializes `dst` from the chain: the adjacent anchor pair combined at
/// the default α. Returns the checkpoint and α.
pub fn cbd_init<F: Float>(
    anchors: &[Checkpoint<F>],
    dst: &ModelConfig,
) -> Result<(Checkpoint<F>, f64)> {
    let (small, large) = surgery::select_adjacent_anchors(anchors, count_params(dst))?;
    let alpha = if small.config == large.config {
        1.0
    } else {
        surgery::default_alpha(small.param_count(), large.param_count(), count_params(dst))?
    };
    Ok((interpolate(small, large, dst, alpha)?, alpha))
}

/// The baseline that expands only the smallest anchor.
pub fn single_expansion<F: Float>(
    anchors: &[Checkpoint<F>],
    dst: &ModelConfig,
) -> Result<Checkpoint<F>> {
    let smallest = anchors.last().ok_or(EvalError::Empty("anchor list"))?;
    Ok(apply_transform(
        smallest,
        &plan_expand(&smallest.config, dst)?,
    )?)
}

/// Step-0 loss of CBD initialization from progressively sparser chains
/// (every anchor, every second, …; the largest and smallest anchors are
/// always kept), next to the single-expansion baseline.
pub fn chain_density<F: Float>(
    anchors: &[Checkpoint<F>],
    dst: &ModelConfig,
    corpus: &Corpus,
    vocab: &Vocabulary,
    seq_len: usize,
) -> Result<EvalReport> {
    if anchors.is_empty() {
        return Err(EvalError::Empty("anchor list"));
    }
    let mut report = EvalReport::new("chain-density");
    for stride in 1..anchors.len().max(2) {
        let mut kept: Vec<Checkpoint<F>> = anchors.iter().step_by(stride).cloned().collect();
        if kept.last().map(|c| c.config) != anchors.last().map(|c| c.config) {
            kept.push(anchors.last().expect("nonempty").clone());
        }
        let (init, alpha) = cbd_init(&kept, dst)?;
        let loss = split_loss(&init, corpus, Split::Validation, vocab, seq_len)?;
        report.metrics.insert(format!("loss@stride={stride}"), loss);
        report
            .metrics
            .insert(format!("alpha@stride={stride}"), alpha);
        report
            .metrics
            .insert(format!("anchors@stride={stride}"), kept.len() as f64);
    }
    let base = single_expansion(anchors, dst)?;
    report.metrics.insert(
        "loss@single_expansion".into(),
        split_loss(&base, corpus, Split::Validation, vocab, seq_len)?,
    );
    Ok(report)
}

/// Random-init twin of a config, for comparisons.
pub fn random_checkpoint<F: Float>(
    config: &ModelConfig,
    seed: u64,
    vocab: &Vocabulary,
) -> Checkpoint<F> {
    let meta = crate::checkpoint::Meta {
        name: "rand".into(),
        seed,
        tokenizer: Some(vocab.kind()),
        ..Default::default()
    };
    Checkpoint::new(*config, init_random(config, seed), meta).expect("init matches config")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_markov;
    use crate::tensor::Tensor;
    use crate::transformer::loss_ce;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&["a", "b"], &["c", "d"]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 5]).unwrap(), 0.75);
        assert!(matches!(
            accuracy(&[1], &[1, 2]),
            Err(EvalError::LengthMismatch(1, 2))
        ));
        assert!(matches!(accuracy::<u8>(&[], &[]), Err(EvalError::Empty(_))));
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l_text("a b c", "a b c").unwrap(), 1.0);
        // LCS 2, P = 2/3, R = 1 → 2·(2/3)/(5/3)
        let f = rouge_l_text("the cat sat", "the cat").unwrap();
        assert!((f - 0.8).abs() < 1e-12);
        assert_eq!(rouge_l_text("x y", "a b").unwrap(), 0.0);
        assert!(rouge_l_text("x", "  ").is_err());
        assert_eq!(rouge_l_text("", "a").unwrap(), 0.0);
    }

    #[test]
    fn steps_and_speedup() {
        let c = indexed(&[3.0, 2.0, 2.5, 1.9]);
        assert_eq!(steps_to_target(&c, 2.0), Some(1));
        assert_eq!(steps_to_target(&c, 1.0), None);
        assert_eq!(speedup(&c, &c, 2.0).unwrap(), 1.0);
        let a = vec![(0, 5.0), (140, 1.0)];
        let b = vec![(0, 5.0), (30500, 1.0)];
        assert!((speedup(&a, &b, 1.0).unwrap() - 217.857).abs() < 1e-3);
        assert!(matches!(
            speedup(&a, &[(0, 5.0)], 1.0),
            Err(EvalError::TargetNotReached(..))
        ));
    }

    #[test]
    fn report_round_trips() {
        let mut r = EvalReport::new("demo");
        r.add_curve("cbd", vec![(0, 1.0 / 3.0), (10, 0.1 + 0.2)])
            .unwrap();
        r.add_curve("rand", vec![(0, 4.605170185988091), (10, 1e-300)])
            .unwrap();
        r.metrics
            .insert("step_zero_gap".into(), std::f64::consts::PI);
        r.steps_to_target = Some(10);
        r.speedup = Some(2.5);
        r.provenance.seeds.insert("train".into(), u64::MAX);
        r.provenance.lineage.push("distilled reverse_kl".into());
        let back = EvalReport::from_parts(&r.to_csv(), &r.to_json()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.to_csv(), r.to_csv());
        assert!(r.clone().add_curve("a,b", vec![]).is_err());
        assert!(r.clone().add_curve("x", vec![(2, 1.0), (1, 1.0)]).is_err());
        assert!(EvalReport::from_parts("run,step,loss\ncbd,x,1\n", &r.to_json()).is_err());
    }

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 1,
            head_dim: 4,
            d_model: 4,
            d_ff: 8,
            vocab_size: 100,
            max_seq_len: 16,
            tied_lm_head: true,
        }
    }

    #[test]
    fn uniform_model_has_perplexity_vocab_size() {
        let c = cfg();
        let mut params: ParamSet<f64> = init_random(&c, 0);
        for (_, t) in params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let ck = Checkpoint::new(c, params, Default::default()).unwrap();
        let corpus = gen_markov(1, 20, 30, 1, "abc").unwrap();
        let p = perplexity(&ck, &corpus, Split::Validation, &Vocabulary::char(), 16).unwrap();
        assert!((p - 100.0).abs() < 1e-3, "{p}");
    }

    #[test]
    fn perplexity_agrees_with_loss_ce() {
        let c = cfg();
        let ck: Checkpoint<f64> = random_checkpoint(&c, 3, &Vocabulary::char());
        let corpus = gen_markov(1, 20, 30, 1, "abc").unwrap();
        let v = Vocabulary::char();
        let batches = split_batches(&corpus, Split::Validation, &v, 16).unwrap();
        let mut total = 0.0;
        let mut n = 0;
        for b in &batches {
            let logits = batch_logits(&c, &ck.params, b).unwrap();
            total += loss_ce(&logits, &b.targets, &b.mask).unwrap() * b.counted() as f64;
            n += b.counted();
        }
        let p = perplexity(&ck, &corpus, Split::Validation, &v, 16).unwrap();
        assert!((p - (total / n as f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn perfect_predictor_has_unit_perplexity() {
        // a bigram table realized through the logits of a one-hot embedding
        let c = ModelConfig {
            n_layers: 0,
            ..cfg()
        };
        assert!(c.validate().is_err() || c.n_layers == 0);
        let v = Vocabulary::char();
        let docs = vec!["aaaa".to_string(); 4];
        let corpus = Corpus::new(docs, 0.5, 0).unwrap();
        let batches = split_batches(&corpus, Split::Validation, &v, 8).unwrap();
        // deterministic text: every target scored with a huge margin
        let total: f64 = batches
            .iter()
            .map(|b| {
                let rows = b.targets.len();
                let logits = Tensor::from_fn(&[rows, 100], |i| {
                    if i % 100 == b.targets[i / 100] {
                        50.0
                    } else {
                        0.0
                    }
                });
                loss_ce(&logits, &b.targets, &b.mask).unwrap()
            })
            .sum::<f64>();
        assert!((total.exp() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn compare_init_with_identical_inputs_gives_identical_curves() {
        let c = cfg();
        let v = Vocabulary::char();
        let corpus = gen_markov(2, 30, 30, 1, "abcd").unwrap();
        let ck: Checkpoint<f32> = random_checkpoint(&c, 1, &v);
        let train = DistillConfig {
            steps: 6,
            batch: 2,
            seq_len: 8,
            ..DistillConfig::default()
        };
        let cmp = compare_init(&ck, &ck, &corpus, &v, &train, 2).unwrap();
        assert_eq!(cmp.step_zero_gap, 0.0);
        assert_eq!(cmp.cbd.curves["cbd"], cmp.rand.curves["rand"]);
        assert_eq!(
            cmp.cbd.curves["cbd"]
                .iter()
                .map(|p| p.0)
                .collect::<Vec<_>>(),
            vec![0, 2, 4, 6]
        );
        let combined = cmp.combined();
        assert_eq!(combined.curves.len(), 2);
        assert_eq!(
            combined.metrics["cbd.step0_loss"],
            cmp.cbd.curves["cbd"][0].1
        );
        let other = random_checkpoint::<f32>(&ModelConfig { d_ff: 4, ..c }, 1, &v);
        assert!(compare_init(&ck, &other, &corpus, &v, &train, 2).is_err());
    }

    #[test]
    fn alpha_sweep_boundaries_match_transforms() {
        let v = Vocabulary::char();
        let small_c = cfg();
        let large_c = ModelConfig {
            n_layers: 3,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            ..cfg()
        };
        let dst = ModelConfig {
            n_layers: 2,
            d_model: 6,
            d_ff: 12,
            ..cfg()
        };
        let small: Checkpoint<f64> = random_checkpoint(&small_c, 1, &v);
        let large: Checkpoint<f64> = random_checkpoint(&large_c, 2, &v);
        let corpus = gen_markov(3, 20, 20, 1, "abc").unwrap();
        let r = alpha_sweep(&small, &large, &dst, &[0.0, 1.0], &corpus, &v, 16).unwrap();
        let e = apply_transform(&small, &plan_expand(&small_c, &dst).unwrap()).unwrap();
        let s = apply_transform(&large, &surgery::plan_subset(&large_c, &dst).unwrap()).unwrap();
        assert_eq!(
            r.metrics[&alpha_key(1.0)],
            split_loss(&e, &corpus, Split::Validation, &v, 16).unwrap()
        );
        assert_eq!(
            r.metrics[&alpha_key(0.0)],
            split_loss(&s, &corpus, Split::Validation, &v, 16).unwrap()
        );
        let one = alpha_sweep(&small, &large, &dst, &[0.5], &corpus, &v, 16).unwrap();
        assert_eq!(
            one.metrics
                .keys()
                .filter(|k| k.starts_with("loss@"))
                .count(),
            1
        );
    }
}
