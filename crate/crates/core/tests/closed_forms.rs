//! Closed-form cost columns against instrumented runs on random specs.

use latent_attn_core::costmodel::{conformance, eval_table2, measure};
use latent_attn_core::spec::sample_spec;
use latent_attn_core::{AttnSpec, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FAMILIES: [Variant; 5] = [Variant::Mha, Variant::Gqa, Variant::Mla, Variant::Cca, Variant::Ccgqa];

#[test]
fn twenty_random_specs_per_family_conform() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for v in FAMILIES {
        for i in 0..20 {
            let spec = sample_spec(v, &mut rng);
            let bad = conformance(&spec, 1 + i % 2, 3 + i % 5, i as u64).unwrap();
            assert!(bad.is_empty(), "{spec:?}: {bad:?}");
        }
    }
}

#[test]
fn cache_column_exact_at_several_lengths() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for v in FAMILIES {
        for _ in 0..4 {
            let spec = sample_spec(v, &mut rng);
            for s in [1, 7, 64] {
                let m = measure(&spec, 2, s, 1).unwrap();
                assert_eq!(m.kv_elements, eval_table2(&spec, 2, s as u64).unwrap().kv_elements, "{spec:?} S={s}");
            }
        }
    }
}

#[test]
fn costs_grow_with_length_and_shrink_with_compression() {
    let e = 2048;
    for spec in [AttnSpec::mha(e, 16), AttnSpec::gqa(e, 16, 4), AttnSpec::mla(e, 16, 2, 4), AttnSpec::cca(e, 4, 8)] {
        let mut last = eval_table2(&spec, 1, 512).unwrap();
        for s in [1024, 2048, 4096] {
            let r = eval_table2(&spec, 1, s).unwrap();
            assert!(r.prefill_flops > last.prefill_flops && r.decode_flops > last.decode_flops);
            assert!(r.kv_elements > last.kv_elements);
            last = r;
        }
    }
    let at = |c| eval_table2(&AttnSpec::cca(e, c, 8), 1, 4096).unwrap();
    for (lo, hi) in [(1, 2), (2, 4), (4, 8)] {
        assert!(at(hi).prefill_flops < at(lo).prefill_flops);
        assert!(at(hi).kv_elements < at(lo).kv_elements);
        assert!(at(hi).params < at(lo).params);
    }
}
