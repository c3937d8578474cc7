//! The fixed tiny checkpoint behind the golden file.
#![allow(dead_code)]

use std::path::PathBuf;

use cbd::checkpoint::{Checkpoint, Meta, Stage};
use cbd::tensor::Tensor;
use cbd::transformer::{ModelConfig, ParamSet};

pub fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden_tiny.cbdc")
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 1,
        head_dim: 2,
        d_model: 2,
        d_ff: 3,
        vocab_size: 5,
        max_seq_len: 3,
        tied_lm_head: true,
    }
}

/// Names and shapes written out by hand, in sorted order.
pub fn tiny_shapes() -> Vec<(&'static str, Vec<usize>)> {
    vec![
        ("L0.attn.bk", vec![2]),
        ("L0.attn.bo", vec![2]),
        ("L0.attn.bq", vec![2]),
        ("L0.attn.bv", vec![2]),
        ("L0.attn.wk", vec![2, 2]),
        ("L0.attn.wo", vec![2, 2]),
        ("L0.attn.wq", vec![2, 2]),
        ("L0.attn.wv", vec![2, 2]),
        ("L0.ffn.b1", vec![3]),
        ("L0.ffn.b2", vec![2]),
        ("L0.ffn.w1", vec![2, 3]),
        ("L0.ffn.w2", vec![3, 2]),
        ("L0.ln1.b", vec![2]),
        ("L0.ln1.g", vec![2]),
        ("L0.ln2.b", vec![2]),
        ("L0.ln2.g", vec![2]),
        ("embed.pos", vec![3, 2]),
        ("embed.tok", vec![5, 2]),
        ("final.ln.b", vec![2]),
        ("final.ln.g", vec![2]),
    ]
}

/// Exactly representable values, distinct per tensor and element.
pub fn value(tensor: usize, i: usize) -> f32 {
    tensor as f32 * 0.5 - (i as f32) * 0.125
}

pub fn tiny_meta() -> Meta {
    Meta {
        name: "golden".into(),
        lineage: vec![Stage::new("init formula")],
        seed: 0,
        step: 0,
        tokenizer: None,
    }
}

pub fn tiny_checkpoint() -> Checkpoint<f32> {
    let mut params = ParamSet::new();
    for (ti, (name, shape)) in tiny_shapes().into_iter().enumerate() {
        params.insert(name, Tensor::from_fn(&shape, |i| value(ti, i)));
    }
    Checkpoint::new(tiny_config(), params, tiny_meta()).unwrap()
}
