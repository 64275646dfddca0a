//! Token-by-token generation with variant-specific caches.
//!
//! [`prefill`] runs the causal forward over a prompt and materializes a
//! [`DecodeState`]; [`decode_step`] then emits one row at a time, reading only
//! the state. For CCA the state also carries the last `k_seq + k_ch − 2`
//! packed pre-conv rows (enough to recompute the two stacked causal convs for
//! the newest row) and the previous raw input row for the value shift.
//!
//! MLA decodes in whichever form its weights are in: raw weights re-expand the
//! latent cache into per-head keys and values each step, merged weights score
//! directly against the latent.

use std::collections::VecDeque;

use crate::baselines::{
    grouped_qkv, heads_output, mla_absorbed_q, mla_attend, mla_latents, mla_merge_projections, mla_up_kv,
    mla_up_q, seq_batch, HeadLayout,
};
use crate::cca::{cca_forward_parts, conv_stack, normalize_and_temper, qk_mean, split_packed, value_heads, CcaWeights};
use crate::error::{shape_err, Error, Result};
use crate::ndcore::{attend_views, flops, AttentionInput, Backend, Eager, HeadsView, NdArray, Real};
use crate::rope::rope_apply;
use crate::spec::{AttnSpec, MlaMode};
use crate::weights::{WeightKind, WeightSet};

/// Append-only cache rows, laid out `[position][batch][..]`.
#[derive(Debug, Clone, PartialEq)]
pub enum KvCache<F> {
    /// Explicit key and value heads.
    Heads { heads: usize, dim: usize, keys: Vec<F>, values: Vec<F> },
    /// MLA latent rows plus the shared rotated rope-key rows.
    Latent { width: usize, rope_width: usize, latent: Vec<F>, rope_keys: Vec<F> },
}

impl<F> KvCache<F> {
    pub fn elements(&self) -> usize {
        match self {
            Self::Heads { keys, values, .. } => keys.len() + values.len(),
            Self::Latent { latent, rope_keys, .. } => latent.len() + rope_keys.len(),
        }
    }

    fn row_elements(&self, batch: usize) -> usize {
        match self {
            Self::Heads { heads, dim, .. } => 2 * batch * heads * dim,
            Self::Latent { width, rope_width, .. } => batch * (width + rope_width),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeState<F: Real = f64> {
    spec: AttnSpec,
    kind: WeightKind,
    batch: usize,
    position: usize,
    kv_cache: KvCache<F>,
    /// Packed pre-conv rows, each `[B·P]`, oldest first (CCA only).
    conv_ring: VecDeque<Vec<F>>,
    /// Last raw input row `[B·E]` (CCA only).
    prev_x: Option<Vec<F>>,
}

impl<F: Real> DecodeState<F> {
    fn empty<G: Real>(w: &WeightSet<G>, batch: usize) -> Result<Self> {
        let spec = w.spec().clone();
        let kv_cache = match (&spec, w.kind()) {
            (AttnSpec::Mha(_) | AttnSpec::Gqa(_), _) => {
                let lay = HeadLayout::of(&spec)?;
                KvCache::Heads { heads: lay.kv_heads, dim: lay.head_dim, keys: vec![], values: vec![] }
            }
            (AttnSpec::Mla(p), _) => {
                KvCache::Latent { width: p.kv_latent(), rope_width: p.rope_dim(), latent: vec![], rope_keys: vec![] }
            }
            (AttnSpec::Cca(p) | AttnSpec::Ccgqa(p), _) => {
                KvCache::Heads { heads: p.kv_heads, dim: p.head_dim(), keys: vec![], values: vec![] }
            }
        };
        Ok(Self { spec, kind: w.kind(), batch, position: 0, kv_cache, conv_ring: VecDeque::new(), prev_x: None })
    }

    pub fn spec(&self) -> &AttnSpec {
        &self.spec
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Index of the next token.
    pub fn position(&self) -> usize {
        self.position
    }

    pub fn kv_cache(&self) -> &KvCache<F> {
        &self.kv_cache
    }

    pub fn conv_ring_len(&self) -> usize {
        self.conv_ring.len()
    }

    pub fn has_prev_x(&self) -> bool {
        self.prev_x.is_some()
    }

    /// Cache length, ring length and prev-row presence all agree with
    /// `position`.
    pub fn check_invariants(&self) -> Result<()> {
        let per_row = self.kv_cache.row_elements(self.batch);
        if self.kv_cache.elements() != per_row * self.position {
            return Err(Error::StateCorrupt(format!(
                "cache holds {} elements, expected {} rows of {per_row}",
                self.kv_cache.elements(),
                self.position
            )));
        }
        let (ring, prev) = match self.spec.cca_params() {
            Some(p) => (self.position.min(p.ring_len()), self.position > 0),
            None => (0, false),
        };
        if self.conv_ring.len() != ring || self.prev_x.is_some() != prev {
            return Err(Error::StateCorrupt(format!(
                "conv ring {} rows (expected {ring}), prev row present: {}",
                self.conv_ring.len(),
                self.prev_x.is_some()
            )));
        }
        Ok(())
    }
}

/// Weights in the form decode uses by default: MLA specs in MQA mode get
/// merged projections, everything else is returned as is.
pub fn decode_weights<F: Real>(w: &WeightSet<F>) -> Result<WeightSet<F>> {
    match (w.spec(), w.kind()) {
        (AttnSpec::Mla(p), WeightKind::Mla) if p.mode == MlaMode::Mqa => mla_merge_projections(w),
        _ => Ok(w.clone()),
    }
}

/// Causal forward over any variant; dispatches on the spec and weight layout.
pub fn forward<F: Real>(x: &NdArray<F>, w: &WeightSet<F>, causal: bool) -> Result<NdArray<F>> {
    match (w.spec(), w.kind()) {
        (AttnSpec::Mha(_), _) => crate::baselines::mha_forward(x, w, causal),
        (AttnSpec::Gqa(_), _) => crate::baselines::gqa_forward(x, w, causal),
        (AttnSpec::Mla(_), WeightKind::MlaMerged) => crate::baselines::mla_forward_mqa(x, w, causal),
        (AttnSpec::Mla(_), _) => crate::baselines::mla_forward(x, w, causal),
        (AttnSpec::Cca(p) | AttnSpec::Ccgqa(p), _) => {
            let cw = CcaWeights::from_set(w)?;
            crate::cca::cca_forward(&Eager::<F>::new(), x, &cw, p, causal)
        }
    }
}

fn rows_of<F: Real>(a: &NdArray<F>) -> Vec<F> {
    a.data().to_vec()
}

/// Causal forward over the prompt plus the state positioned after it.
pub fn prefill<F: Real>(x: &NdArray<F>, w: &WeightSet<F>) -> Result<(NdArray<F>, DecodeState<F>)> {
    let (s, b) = seq_batch(x, w.spec().embed_dim())?;
    let mut state = DecodeState::empty(w, b)?;
    let positions: Vec<usize> = (0..s).collect();
    let out = match w.spec() {
        AttnSpec::Mha(_) | AttnSpec::Gqa(_) => {
            let out = forward(x, w, true)?;
            let lay = HeadLayout::of(w.spec())?;
            let (_, k, v) = grouped_qkv(x, w, &lay, &positions)?;
            state.kv_cache = match state.kv_cache {
                KvCache::Heads { heads, dim, .. } => KvCache::Heads { heads, dim, keys: rows_of(&k), values: rows_of(&v) },
                other => other,
            };
            out
        }
        AttnSpec::Mla(p) => {
            let out = forward(x, w, true)?;
            let lat = mla_latents(x, w, p, &positions)?;
            let rope_keys = lat.rope.as_ref().map(|(_, kr)| rows_of(kr)).unwrap_or_default();
            state.kv_cache = KvCache::Latent {
                width: p.kv_latent(),
                rope_width: p.rope_dim(),
                latent: rows_of(&lat.c_kv),
                rope_keys,
            };
            out
        }
        AttnSpec::Cca(p) | AttnSpec::Ccgqa(p) => {
            let cw = CcaWeights::from_set(w)?;
            let parts = cca_forward_parts(&Eager::<F>::new(), x, &cw, p, true)?;
            state.kv_cache = KvCache::Heads {
                heads: p.kv_heads,
                dim: p.head_dim(),
                keys: rows_of(&parts.keys),
                values: rows_of(&parts.values),
            };
            let row = b * p.packed_width();
            let keep = s.min(p.ring_len());
            state.conv_ring =
                parts.packed.data()[(s - keep) * row..].chunks(row.max(1)).take(keep).map(<[F]>::to_vec).collect();
            if s > 0 {
                let xr = b * p.embed_dim;
                state.prev_x = Some(x.data()[(s - 1) * xr..].to_vec());
            }
            parts.out
        }
    };
    state.position = s;
    Ok((out, state))
}

fn cache_view<F: Real>(data: &[F], seq: usize, batch: usize, heads: usize, dim: usize) -> HeadsView<'_, F> {
    HeadsView { data, seq, batch, heads, dim }
}

/// Emit the output row for `x_t: [1, B, E]` and advance the state by one.
pub fn decode_step<F: Real>(state: &mut DecodeState<F>, x_t: &NdArray<F>, w: &WeightSet<F>) -> Result<NdArray<F>> {
    if w.spec() != &state.spec || w.kind() != state.kind {
        return Err(Error::StateCorrupt("weights do not match the state's spec".into()));
    }
    state.check_invariants()?;
    let (s, b) = seq_batch(x_t, state.spec.embed_dim())?;
    if s != 1 || b != state.batch {
        return shape_err("decode_step", x_t.shape(), &[1, state.batch, state.spec.embed_dim()]);
    }
    let t = state.position;
    let spec = state.spec.clone();
    let out = match &spec {
        AttnSpec::Mha(_) | AttnSpec::Gqa(_) => {
            let lay = HeadLayout::of(&spec)?;
            let (q, k, v) = grouped_qkv(x_t, w, &lay, &[t])?;
            let KvCache::Heads { keys, values, .. } = &mut state.kv_cache else {
                return Err(Error::StateCorrupt("cache kind".into()));
            };
            keys.extend_from_slice(k.data());
            values.extend_from_slice(v.data());
            let inp = AttentionInput {
                q: HeadsView::of(&q)?,
                k: cache_view(keys, t + 1, b, lay.kv_heads, lay.head_dim),
                v: cache_view(values, t + 1, b, lay.kv_heads, lay.head_dim),
                rope: None,
                scale: F::of(lay.scale()),
                causal: true,
            };
            let o = NdArray::from_vec(&[1, b, lay.heads, lay.head_dim], attend_views(&inp)?)?;
            heads_output(o, w.get("w_o")?)?
        }
        AttnSpec::Mla(p) => {
            let lat = mla_latents(x_t, w, p, &[t])?;
            let KvCache::Latent { latent, rope_keys, .. } = &mut state.kv_cache else {
                return Err(Error::StateCorrupt("cache kind".into()));
            };
            latent.extend_from_slice(lat.c_kv.data());
            if let Some((_, kr)) = &lat.rope {
                rope_keys.extend_from_slice(kr.data());
            }
            let (lkv, r, h) = (p.kv_latent(), p.rope_dim(), p.heads);
            match state.kind {
                WeightKind::MlaMerged => {
                    let q = mla_absorbed_q(&lat.c_q, w, p)?;
                    let inp = AttentionInput {
                        q: HeadsView::of(&q)?,
                        k: cache_view(latent, t + 1, b, 1, lkv),
                        v: cache_view(latent, t + 1, b, 1, lkv),
                        rope: match &lat.rope {
                            Some((qr, _)) => Some((HeadsView::of(qr)?, cache_view(rope_keys, t + 1, b, 1, r))),
                            None => None,
                        },
                        scale: F::of(p.scale()),
                        causal: true,
                    };
                    let o = NdArray::from_vec(&[1, b, h, lkv], attend_views(&inp)?)?;
                    heads_output(o, w.get("w_o_absorbed")?)?
                }
                _ => {
                    let q = mla_up_q(&lat.c_q, w, p)?;
                    let c_kv = NdArray::from_vec(&[t + 1, b, lkv], latent.clone())?;
                    let (k, v) = mla_up_kv(&c_kv, w, p)?;
                    let kr = NdArray::from_vec(&[t + 1, b, 1, r], rope_keys.clone())?;
                    let rope = lat.rope.as_ref().map(|(qr, _)| (qr, &kr));
                    let o = mla_attend(&q, &k, &v, rope, p.scale(), true)?;
                    heads_output(o, w.get("w_o")?)?
                }
            }
        }
        AttnSpec::Cca(p) | AttnSpec::Ccgqa(p) => cca_step(state, x_t, w, p, t, b)?,
    };
    state.position += 1;
    Ok(out)
}

fn cca_step<F: Real>(
    state: &mut DecodeState<F>,
    x_t: &NdArray<F>,
    w: &WeightSet<F>,
    p: &crate::spec::CcaParams,
    t: usize,
    b: usize,
) -> Result<NdArray<F>> {
    let eg = Eager::<F>::new();
    let cw = CcaWeights::from_set(w)?;
    let pw = p.packed_width();
    let packed_t = eg.matmul(x_t, &cw.w_qk)?;

    let window = p.ring_len() + 1;
    let mut rows = vec![F::zero(); (window - 1 - state.conv_ring.len()) * b * pw];
    for r in &state.conv_ring {
        rows.extend_from_slice(r);
    }
    rows.extend_from_slice(packed_t.data());
    let convolved = conv_stack(&eg, &NdArray::from_vec(&[window, b, pw], rows)?, &cw, p)?.slice_axis0(window - 1, 1)?;

    let (q_conv, k_conv) = split_packed(&eg, &convolved, p, 1, b)?;
    let (q_pre, k_pre) = split_packed(&eg, &packed_t, p, 1, b)?;
    let (q, k) = qk_mean(&eg, &q_conv, &k_conv, &q_pre, &k_pre, p.group_size())?;
    let prev = match &state.prev_x {
        Some(row) => NdArray::from_vec(&[1, b, p.embed_dim], row.clone())?,
        None => NdArray::zeros(&[1, b, p.embed_dim]),
    };
    let v = value_heads(&eg, x_t, &prev, &cw, p)?;
    let (qn, kn) = normalize_and_temper(&eg, &q, &k, &cw, p)?;
    let rope = p.rope();
    let qr = rope_apply(&qn, &[t], &rope)?;
    let kr = rope_apply(&kn, &[t], &rope)?;

    let KvCache::Heads { keys, values, .. } = &mut state.kv_cache else {
        return Err(Error::StateCorrupt("cache kind".into()));
    };
    keys.extend_from_slice(kr.data());
    values.extend_from_slice(v.data());
    let dh = p.head_dim();
    let inp = AttentionInput {
        q: HeadsView::of(&qr)?,
        k: cache_view(keys, t + 1, b, p.kv_heads, dh),
        v: cache_view(values, t + 1, b, p.kv_heads, dh),
        rope: None,
        scale: F::of(1.0 / (dh as f64).sqrt()),
        causal: true,
    };
    let o = NdArray::from_vec(&[1, b, p.q_width()], attend_views(&inp)?)?;
    let out = eg.matmul(&o, &cw.w_o)?;

    state.conv_ring.push_back(packed_t.into_vec());
    if state.conv_ring.len() > p.ring_len() {
        state.conv_ring.pop_front();
    }
    state.prev_x = Some(x_t.data().to_vec());
    Ok(out)
}

/// Decode every row of `x` from an empty state; returns all rows stacked
/// `[S, B, E]`.
pub fn decode_sequence<F: Real>(x: &NdArray<F>, w: &WeightSet<F>) -> Result<NdArray<F>> {
    let (s, b) = seq_batch(x, w.spec().embed_dim())?;
    let (empty, mut state) = prefill(&NdArray::zeros(&[0, b, w.spec().embed_dim()]), w)?;
    if s == 0 {
        return Ok(empty);
    }
    let mut rows = Vec::with_capacity(s);
    for t in 0..s {
        rows.push(decode_step(&mut state, &x.slice_axis0(t, 1)?, w)?);
    }
    NdArray::concat_axis0(&rows.iter().collect::<Vec<_>>())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheReport {
    pub elements: u64,
    pub bytes: u64,
    /// MHA cache elements at the same batch, length and width.
    pub mha_elements: u64,
}

impl CacheReport {
    /// Compression versus MHA.
    pub fn ratio(&self) -> f64 {
        self.mha_elements as f64 / self.elements as f64
    }
}

pub fn cache_report<F: Real>(state: &DecodeState<F>, element_bytes: u64) -> CacheReport {
    let elements = state.kv_cache.elements() as u64;
    CacheReport {
        elements,
        bytes: elements * element_bytes,
        mha_elements: 2 * (state.batch * state.position * state.spec.embed_dim()) as u64,
    }
}

/// FLOPs of one decode step that attends over `cache_len` keys
/// (the new row included), by category.
pub fn measure_decode_step<F: Real>(w: &WeightSet<F>, batch: usize, cache_len: usize, seed: u64) -> Result<flops::FlopCount> {
    use rand::SeedableRng;
    let e = w.spec().embed_dim();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let prompt = NdArray::<f64>::randn(&[cache_len.saturating_sub(1), batch, e], 1.0, &mut rng).cast::<F>();
    let (_, mut state) = prefill(&prompt, w)?;
    let x_t = NdArray::<f64>::randn(&[1, batch, e], 1.0, &mut rng).cast::<F>();
    let (r, n) = flops::instrument_flops(|| decode_step(&mut state, &x_t, w));
    r?;
    Ok(n)
}
