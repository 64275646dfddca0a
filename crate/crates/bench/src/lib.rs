//! Fixtures shared by the criterion benches: the desk-scale grid and
//! deterministic weights and inputs.

use latent_attn_core::decode::decode_weights;
use latent_attn_core::{AttnSpec, NdArray, WeightSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const EMBED: usize = 256;
pub const HEADS: usize = 4;
pub const SEQ_GRID: [usize; 3] = [128, 256, 512];

pub fn variants() -> Vec<AttnSpec> {
    vec![
        AttnSpec::mha(EMBED, HEADS),
        AttnSpec::gqa(EMBED, HEADS, 2),
        AttnSpec::mla(EMBED, HEADS, 2, 4),
        AttnSpec::cca(EMBED, 4, HEADS),
        AttnSpec::ccgqa(EMBED, 4, 8, HEADS, 2),
    ]
}

/// Decode-form weights and a `[s, 1, E]` input.
pub fn fixture(spec: &AttnSpec, s: usize, seed: u64) -> (WeightSet, NdArray) {
    let w = decode_weights(&WeightSet::init(spec, seed).expect("valid bench spec")).expect("decode weights");
    let x = NdArray::randn(&[s, 1, spec.embed_dim()], 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 1));
    (w, x)
}
