//! Structural transforms between nested model configurations and the
//! anchor interpolation built on them.
//!
//! Widths follow one rule in both directions: expansion keeps the source
//! block in the leading slots of each axis and zero-fills the tail,
//! subsetting keeps the leading slots. Attention heads are contiguous
//! `head_dim` blocks of the inner axis, so head padding and pruning are the
//! same prefix rule on that axis. Depth uses a layer map (expansion) or a
//! list of kept layers (subsetting).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, Stage};
use crate::tensor::{Float, Tensor};
use crate::transformer::{count_params, layer_prefix, ModelConfig, ModelError, ParamSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurgeryError {
    #[error("configs are not nested: {0}")]
    NotNested(String),
    #[error("interpolation coefficient {0} outside [0, 1]")]
    AlphaOutOfRange(f64),
    #[error("anchors have equal parameter counts ({0})")]
    DegenerateAnchors(usize),
    #[error("target of {target} parameters outside the chain range [{min}, {max}]")]
    TargetOutOfRange {
        target: usize,
        min: usize,
        max: usize,
    },
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("checkpoint config does not match the plan source: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, SurgeryError>;

/// How repeated layers are filled during depth expansion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplicationMode {
    /// Every replica is a full copy of its source layer.
    #[default]
    Copy,
    /// Replicas after the first have their residual output projections
    /// (`attn.wo`, `attn.bo`, `ffn.w2`, `ffn.b2`) zeroed, so they pass the
    /// residual stream through unchanged.
    Identity,
}

impl std::fmt::Display for ReplicationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ReplicationMode::Copy => "copy",
            ReplicationMode::Identity => "identity",
        })
    }
}

impl std::str::FromStr for ReplicationMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "copy" => Ok(ReplicationMode::Copy),
            "identity" => Ok(ReplicationMode::Identity),
            other => Err(format!("unknown replication mode {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerMap {
    /// Source layer index for every target layer.
    Expand { layer_map: Vec<usize> },
    /// Source layers kept, in order.
    Subset { kept: Vec<usize> },
}

/// A deterministic index-level mapping between two nested configs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformPlan {
    pub src: ModelConfig,
    pub dst: ModelConfig,
    pub layers: LayerMap,
    #[serde(default)]
    pub mode: ReplicationMode,
}

impl TransformPlan {
    pub fn is_expansion(&self) -> bool {
        matches!(self.layers, LayerMap::Expand { .. })
    }

    pub fn with_mode(mut self, mode: ReplicationMode) -> Self {
        self.mode = mode;
        self
    }

    /// Source layer feeding each target layer.
    pub fn source_layers(&self) -> &[usize] {
        match &self.layers {
            LayerMap::Expand { layer_map } => layer_map,
            LayerMap::Subset { kept } => kept,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (src, dst) = (&self.src, &self.dst);
        src.validate()?;
        dst.validate()?;
        match &self.layers {
            LayerMap::Expand { layer_map } => {
                if !src.structurally_le(dst) {
                    return Err(SurgeryError::InvalidPlan(
                        "expansion needs src ≤ dst on every axis".into(),
                    ));
                }
                if layer_map.len() != dst.n_layers {
                    return Err(SurgeryError::InvalidPlan(format!(
                        "layer_map has {} entries for {} target layers",
                        layer_map.len(),
                        dst.n_layers
                    )));
                }
                let non_decreasing = layer_map.windows(2).all(|w| w[0] <= w[1]);
                let covers = layer_map.first() == Some(&0)
                    && layer_map.windows(2).all(|w| w[1] - w[0] <= 1)
                    && layer_map.last() == Some(&(src.n_layers - 1));
                if !non_decreasing || !covers {
                    return Err(SurgeryError::InvalidPlan(format!(
                        "layer_map {layer_map:?} must be non-decreasing and onto 0..{}",
                        src.n_layers
                    )));
                }
            }
            LayerMap::Subset { kept } => {
                if !dst.structurally_le(src) {
                    return Err(SurgeryError::InvalidPlan(
                        "subsetting needs dst ≤ src on every axis".into(),
                    ));
                }
                let increasing = kept.windows(2).all(|w| w[0] < w[1]);
                let in_range = kept.iter().all(|&k| k < src.n_layers);
                if kept.len() != dst.n_layers || !increasing || !in_range {
                    return Err(SurgeryError::InvalidPlan(format!(
                        "kept layers {kept:?} must be {} strictly increasing indices below {}",
                        dst.n_layers, src.n_layers
                    )));
                }
            }
        }
        Ok(())
    }
}

fn describe(c: &ModelConfig) -> String {
    format!("L{}/H{}/D{}/F{}", c.n_layers, c.n_heads, c.d_model, c.d_ff)
}

fn check_nested(small: &ModelConfig, large: &ModelConfig) -> Result<()> {
    if !small.compatible_with(large) {
        return Err(SurgeryError::NotNested(format!(
            "head_dim/vocab/max_seq_len/tying differ between {} and {}",
            describe(small),
            describe(large)
        )));
    }
    if !small.structurally_le(large) {
        return Err(SurgeryError::NotNested(format!(
            "{} is not ≤ {} on every axis",
            describe(small),
            describe(large)
        )));
    }
    Ok(())
}

/// Expansion plan: target layer `i` copies source layer
/// `⌊i · src_layers / dst_layers⌋`; widths are tail-zero-padded.
pub fn plan_expand(src: &ModelConfig, dst: &ModelConfig) -> Result<TransformPlan> {
    check_nested(src, dst)?;
    let layer_map = (0..dst.n_layers)
        .map(|i| i * src.n_layers / dst.n_layers)
        .collect();
    Ok(TransformPlan {
        src: *src,
        dst: *dst,
        layers: LayerMap::Expand { layer_map },
        mode: ReplicationMode::Copy,
    })
}

/// Subset plan: keeps `round(j · (src−1)/(dst−1))` for each target layer `j`,
/// i.e. evenly spaced layers including both ends; a single target layer keeps
/// layer 0. Widths keep their prefix.
pub fn plan_subset(src: &ModelConfig, dst: &ModelConfig) -> Result<TransformPlan> {
    check_nested(dst, src)?;
    let kept = if dst.n_layers == 1 {
        vec![0]
    } else {
        let span = src.n_layers - 1;
        let steps = dst.n_layers - 1;
        // round-half-up of j·span/steps in integer arithmetic
        (0..dst.n_layers)
            .map(|j| (2 * j * span + steps) / (2 * steps))
            .collect()
    };
    Ok(TransformPlan {
        src: *src,
        dst: *dst,
        layers: LayerMap::Subset { kept },
        mode: ReplicationMode::Copy,
    })
}

/// The subset plan that undoes `plan`: for each source layer keep the first
/// target layer that copied it.
pub fn invert_expand(plan: &TransformPlan) -> Result<TransformPlan> {
    let LayerMap::Expand { layer_map } = &plan.layers else {
        return Err(SurgeryError::InvalidPlan(
            "only expansion plans can be inverted".into(),
        ));
    };
    let kept = (0..plan.src.n_layers)
        .map(|j| {
            layer_map
                .iter()
                .position(|&s| s == j)
                .ok_or_else(|| SurgeryError::InvalidPlan(format!("source layer {j} unused")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TransformPlan {
        src: plan.dst,
        dst: plan.src,
        layers: LayerMap::Subset { kept },
        mode: ReplicationMode::Copy,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Axis {
    Fixed,
    Model,
    Inner,
    Hidden,
}

fn axes_of(name: &str) -> &'static [Axis] {
    use Axis::*;
    let leaf = name.split_once('.').map_or(name, |(head, rest)| {
        if head.starts_with('L') && head[1..].chars().all(|c| c.is_ascii_digit()) {
            rest
        } else {
            name
        }
    });
    match leaf {
        "embed.tok" | "embed.pos" => &[Fixed, Model],
        "lm_head.w" => &[Model, Fixed],
        "attn.wq" | "attn.wk" | "attn.wv" => &[Model, Inner],
        "attn.bq" | "attn.bk" | "attn.bv" => &[Inner],
        "attn.wo" => &[Inner, Model],
        "ffn.w1" => &[Model, Hidden],
        "ffn.b1" => &[Hidden],
        "ffn.w2" => &[Hidden, Model],
        // LayerNorm gains/biases, attn.bo, ffn.b2
        _ => &[Model],
    }
}

fn axis_len(c: &ModelConfig, axis: Axis, fixed: usize) -> usize {
    match axis {
        Axis::Fixed => fixed,
        Axis::Model => c.d_model,
        Axis::Inner => c.inner_dim(),
        Axis::Hidden => c.d_ff,
    }
}

/// Copies the overlapping leading block of `src` into a zero tensor of the
/// target shape.
fn resize<F: Float>(name: &str, src: &Tensor<F>, dst_cfg: &ModelConfig) -> Tensor<F> {
    let axes = axes_of(name);
    let shape: Vec<usize> = axes
        .iter()
        .zip(src.shape())
        .map(|(&a, &n)| axis_len(dst_cfg, a, n))
        .collect();
    if shape == src.shape() {
        return src.clone();
    }
    let mut out = Tensor::zeros(&shape);
    match (src.shape(), shape.as_slice()) {
        (&[n], &[m]) => {
            let k = n.min(m);
            out.data_mut()[..k].copy_from_slice(&src.data()[..k]);
        }
        (&[r, c], &[r2, c2]) => {
            let cols = c.min(c2);
            for row in 0..r.min(r2) {
                out.data_mut()[row * c2..row * c2 + cols]
                    .copy_from_slice(&src.data()[row * c..row * c + cols]);
            }
        }
        _ => unreachable!("parameters are vectors or matrices"),
    }
    out
}

const RESIDUAL_OUTPUTS: [&str; 4] = ["attn.wo", "attn.bo", "ffn.w2", "ffn.b2"];

fn transform_params<F: Float>(params: &ParamSet<F>, plan: &TransformPlan) -> Result<ParamSet<F>> {
    let mut out = ParamSet::new();
    for (name, t) in params.iter() {
        if !name.starts_with('L') {
            out.insert(name.clone(), resize(name, t, &plan.dst));
        }
    }
    let sources = plan.source_layers();
    let layer_names: Vec<String> = params
        .iter()
        .filter_map(|(n, _)| n.strip_prefix("L0.").map(str::to_string))
        .collect();
    for (i, &s) in sources.iter().enumerate() {
        let silence = plan.is_expansion()
            && plan.mode == ReplicationMode::Identity
            && i > 0
            && sources[i - 1] == s;
        let (src_p, dst_p) = (layer_prefix(s), layer_prefix(i));
        for suffix in &layer_names {
            let t = params.get(&format!("{src_p}{suffix}"))?;
            let name = format!("{dst_p}{suffix}");
            let mut r = resize(&name, t, &plan.dst);
            if silence && RESIDUAL_OUTPUTS.contains(&suffix.as_str()) {
                r.data_mut().iter_mut().for_each(|v| *v = F::zero());
            }
            out.insert(name, r);
        }
    }
    out.validate(&plan.dst)?;
    Ok(out)
}

/// Applies `plan` to a checkpoint whose config is `plan.src`, appending a
/// lineage entry.
pub fn apply_transform<F: Float>(
    ckpt: &Checkpoint<F>,
    plan: &TransformPlan,
) -> Result<Checkpoint<F>> {
    if ckpt.config != plan.src {
        return Err(SurgeryError::ConfigMismatch(format!(
            "checkpoint is {}, plan expects {}",
            describe(&ckpt.config),
            describe(&plan.src)
        )));
    }
    plan.validate()?;
    let params = transform_params(&ckpt.params, plan)?;
    let descriptor = match &plan.layers {
        LayerMap::Expand { layer_map } => format!(
            "expanded mode={} {} -> {} layer_map={layer_map:?}",
            plan.mode,
            describe(&plan.src),
            describe(&plan.dst)
        ),
        LayerMap::Subset { kept } => format!(
            "subset {} -> {} kept={kept:?}",
            describe(&plan.src),
            describe(&plan.dst)
        ),
    };
    let mut meta = ckpt.meta.clone();
    meta.lineage.push(Stage::new(descriptor));
    Ok(Checkpoint {
        config: plan.dst,
        params,
        meta,
    })
}

/// `α = (p_large − p_target) / (p_large − p_small)` clamped to `[0, 1]`;
/// α weights the smaller anchor.
pub fn default_alpha(p_small: usize, p_large: usize, p_target: usize) -> Result<f64> {
    if p_small == p_large {
        return Err(SurgeryError::DegenerateAnchors(p_small));
    }
    if p_small > p_large {
        return Err(SurgeryError::NotNested(format!(
            "small anchor has {p_small} parameters, large has {p_large}"
        )));
    }
    let alpha = (p_large as f64 - p_target as f64) / (p_large as f64 - p_small as f64);
    Ok(alpha.clamp(0.0, 1.0))
}

/// `α · expand(small → dst) + (1 − α) · subset(large → dst)` over every
/// tensor.
pub fn interpolate<F: Float>(
    small: &Checkpoint<F>,
    large: &Checkpoint<F>,
    dst: &ModelConfig,
    alpha: f64,
) -> Result<Checkpoint<F>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(SurgeryError::AlphaOutOfRange(alpha));
    }
    check_nested(&small.config, dst)?;
    check_nested(dst, &large.config)?;
    let expanded = transform_params(&small.params, &plan_expand(&small.config, dst)?)?;
    let subset = transform_params(&large.params, &plan_subset(&large.config, dst)?)?;
    let params = if alpha == 1.0 {
        expanded
    } else if alpha == 0.0 {
        subset
    } else {
        let a = F::of(alpha);
        let b = F::of(1.0 - alpha);
        expanded
            .iter()
            .zip(subset.iter())
            .map(|((name, e), (_, s))| {
                let data = e
                    .data()
                    .iter()
                    .zip(s.data())
                    .map(|(&x, &y)| a * x + b * y)
                    .collect();
                let t = Tensor::new(e.shape().to_vec(), data).expect("same shape");
                (name.clone(), t)
            })
            .collect()
    };
    let mut meta = small.meta.clone();
    meta.lineage.push(Stage::new(format!(
        "interpolated alpha={alpha} between {},{} -> {}",
        small.meta.name,
        large.meta.name,
        describe(dst)
    )));
    Ok(Checkpoint {
        config: *dst,
        params,
        meta,
    })
}

/// Indices `(small, large)` of the tightest anchors bracketing `target`
/// in a list sorted by descending parameter count. An exact match returns
/// the same index twice.
pub fn select_adjacent(counts: &[usize], target: usize) -> Result<(usize, usize)> {
    if counts.is_empty() {
        return Err(SurgeryError::InvalidPlan("empty anchor list".into()));
    }
    if counts.windows(2).any(|w| w[0] <= w[1]) {
        return Err(SurgeryError::InvalidPlan(
            "anchors must be sorted by strictly decreasing parameter count".into(),
        ));
    }
    let (max, min) = (counts[0], counts[counts.len() - 1]);
    if target > max || target < min {
        return Err(SurgeryError::TargetOutOfRange { target, min, max });
    }
    if let Some(i) = counts.iter().position(|&c| c == target) {
        return Ok((i, i));
    }
    let small = counts
        .iter()
        .position(|&c| c < target)
        .expect("target ≥ min and not equal to any count");
    Ok((small, small - 1))
}

/// The adjacent anchor pair `(small, large)` for a target parameter count.
pub fn select_adjacent_anchors<F: Float>(
    anchors: &[Checkpoint<F>],
    target_params: usize,
) -> Result<(&Checkpoint<F>, &Checkpoint<F>)> {
    let counts: Vec<usize> = anchors.iter().map(|a| count_params(&a.config)).collect();
    let (s, l) = select_adjacent(&counts, target_params)?;
    Ok((&anchors[s], &anchors[l]))
}
