use cbd::checkpoint::{Checkpoint, Meta};
use cbd::surgery::{
    apply_transform, interpolate, invert_expand, plan_expand, plan_subset, ReplicationMode,
};
use cbd::transformer::{count_params, init_random, ModelConfig};
use proptest::prelude::*;

fn ckpt(config: ModelConfig, seed: u64) -> Checkpoint<f64> {
    let meta = Meta {
        name: format!("m{seed}"),
        seed,
        ..Meta::default()
    };
    Checkpoint::new(config, init_random(&config, seed), meta).unwrap()
}

/// A source config and a component-wise larger compatible one.
fn nested_pair() -> impl Strategy<Value = (ModelConfig, ModelConfig)> {
    (
        1usize..4,
        1usize..3,
        2usize..7,
        2usize..9,
        0usize..3,
        0usize..3,
        0usize..5,
        0usize..7,
    )
        .prop_map(|(l, h, d, f, dl, dh, dd, df)| {
            let small = ModelConfig {
                n_layers: l,
                n_heads: h,
                head_dim: 2,
                d_model: d,
                d_ff: f,
                vocab_size: 7,
                max_seq_len: 4,
                tied_lm_head: true,
            };
            let large = ModelConfig {
                n_layers: l + dl,
                n_heads: h + dh,
                d_model: d + dd,
                d_ff: f + df,
                ..small
            };
            (small, large)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn inverse_plan_recovers_source((small, large) in nested_pair(), seed in 0u64..1000, identity in any::<bool>()) {
        let src = ckpt(small, seed);
        let mode = if identity { ReplicationMode::Identity } else { ReplicationMode::Copy };
        let plan = plan_expand(&small, &large).unwrap().with_mode(mode);
        let grown = apply_transform(&src, &plan).unwrap();
        let back = apply_transform(&grown, &invert_expand(&plan).unwrap()).unwrap();
        prop_assert_eq!(back.config, small);
        prop_assert!(back.params.bits_eq(&src.params));
    }

    #[test]
    fn interpolation_is_affine_in_alpha((small, large) in nested_pair(), seed in 0u64..1000, alpha in 0.0f64..=1.0) {
        let (s, l) = (ckpt(small, seed), ckpt(large, seed + 1));
        let mid = ModelConfig { n_layers: large.n_layers, ..small };
        let out = interpolate(&s, &l, &mid, alpha).unwrap();
        let up = apply_transform(&s, &plan_expand(&small, &mid).unwrap()).unwrap();
        let down = apply_transform(&l, &plan_subset(&large, &mid).unwrap()).unwrap();
        for (name, t) in out.params.iter() {
            let a = up.params.get(name).unwrap().data();
            let b = down.params.get(name).unwrap().data();
            for (i, &v) in t.data().iter().enumerate() {
                let expected = alpha * a[i] + (1.0 - alpha) * b[i];
                prop_assert!((v - expected).abs() <= 1e-12, "{} [{}]: {} vs {}", name, i, v, expected);
            }
        }
    }

    #[test]
    fn param_count_is_monotone_under_nesting((small, large) in nested_pair()) {
        prop_assert!(count_params(&small) <= count_params(&large));
        prop_assert_eq!(count_params(&small) == count_params(&large), small == large);
    }
}
