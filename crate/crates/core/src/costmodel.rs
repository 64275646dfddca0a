//! Closed-form parameter, cache and FLOP counts, plus a roofline classifier.
//!
//! All counts are exact integers with one multiply-add = 2 FLOPs. Causal
//! masking is ignored (full `S²` score terms). Closed forms are evaluated
//! through latent widths (`E/C`, `E/G`, ...) which the spec validation
//! guarantees to be integral.
//!
//! For CCA and CCGQA the conv term is carried twice: the closed form
//! (`2ẽ·k_seq + ẽ²/h·k_ch`, with `ẽ → E/C1 + E/C2` and `h → hq + hk` for CCGQA)
//! and the count implied by the actual kernel shapes
//! (`P·k_seq + P·dh·k_ch`). They differ; neither is adjusted to match the
//! other.

use serde::Serialize;

use crate::decode::{decode_weights, measure_decode_step, prefill};
use crate::error::Result;
use crate::ndcore::{FlopCount, NdArray};
use crate::spec::{AttnSpec, MlaMode};
use crate::weights::{ParamRole, WeightSet};

pub use crate::ndcore::flops::instrument_flops;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ConvTerm {
    pub closed_form_params: u64,
    pub measured_params: u64,
    pub closed_form_prefill_flops: u64,
    pub measured_prefill_flops: u64,
    /// One new row through both convs.
    pub closed_form_decode_flops: u64,
    pub measured_decode_flops: u64,
}

impl ConvTerm {
    pub fn params_delta(&self) -> i64 {
        self.measured_params as i64 - self.closed_form_params as i64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub label: String,
    pub batch: u64,
    pub seq: u64,
    /// Parameter column, conv term per the closed form.
    pub params: u64,
    /// Parameter column without the conv term.
    pub projection_params: u64,
    /// Decoupled rotary projections (MLA); not part of the parameter column.
    pub rope_params: u64,
    /// Per-head temperatures (CCA); not part of the parameter column.
    pub temperature_params: u64,
    pub kv_elements: u64,
    pub prefill_flops: u64,
    pub prefill_projection_flops: u64,
    pub prefill_attention_flops: u64,
    /// One step attending over `seq` cached rows.
    pub decode_flops: u64,
    pub decode_projection_flops: u64,
    pub decode_attention_flops: u64,
    pub conv: Option<ConvTerm>,
    pub notes: Vec<&'static str>,
}

/// Evaluate the closed forms for `spec` at batch `b` and length `s`.
pub fn eval_table2(spec: &AttnSpec, b: u64, s: u64) -> Result<CostReport> {
    spec.validate()?;
    let e = spec.embed_dim() as u64;
    let mut notes = vec![];
    let mut rope_params = 0;
    let mut temperature_params = 0;
    let mut conv = None;
    // (params, kv, prefill proj, prefill attn, decode proj, decode attn)
    let (params, kv, pp, pa, dp, da) = match spec {
        AttnSpec::Mha(_) => (4 * e * e, 2 * b * s * e, 8 * b * s * e * e, 4 * b * e * s * s, 8 * b * e * e, 4 * b * e * s),
        AttnSpec::Gqa(p) => {
            let kvw = p.kv_width() as u64;
            (
                2 * e * e + 2 * e * kvw,
                2 * b * s * kvw,
                4 * b * s * e * (e + kvw),
                4 * b * e * s * s,
                4 * b * e * (e + kvw),
                4 * b * e * s,
            )
        }
        AttnSpec::Mla(p) => {
            let (lq, lkv, r, h) = (p.q_latent() as u64, p.kv_latent() as u64, p.rope_dim() as u64, p.heads as u64);
            rope_params = lq * h * r + e * r;
            notes.push("rope-head projections omitted from params and FLOPs");
            if p.mode == MlaMode::Mha {
                notes.push("decode column assumes merged (MQA-mode) projections");
            }
            (
                e * e + 3 * e * lkv + 2 * e * lq,
                b * s * lkv + b * s * r,
                2 * b * s * e * e + 4 * b * s * e * lq + 6 * b * s * e * lkv,
                4 * b * e * s * s,
                2 * b * e * lkv + 2 * b * h * e * lkv + 2 * b * h * lq * lkv + 2 * b * e * lq,
                4 * b * s * h * lkv,
            )
        }
        AttnSpec::Cca(p) | AttnSpec::Ccgqa(p) => {
            let (q, kvw) = (p.q_width() as u64, p.kv_width() as u64);
            let (ks, kc) = (p.k_seq as u64, p.k_ch as u64);
            let pw = q + kvw;
            let dh = p.head_dim() as u64;
            let heads = (p.q_heads + p.kv_heads) as u64;
            let conv_closed = match spec {
                // ẽ = E/C, h = heads
                AttnSpec::Cca(_) => 2 * q * ks + q * q / p.q_heads as u64 * kc,
                // ē = E/C1 + E/C2, h = hq + hk
                _ => 2 * pw * ks + pw * pw / heads * kc,
            };
            let measured = pw * ks + pw * dh * kc;
            conv = Some(ConvTerm {
                closed_form_params: conv_closed,
                measured_params: measured,
                closed_form_prefill_flops: 2 * b * s * conv_closed,
                measured_prefill_flops: 2 * b * s * measured,
                closed_form_decode_flops: 2 * b * conv_closed,
                measured_decode_flops: 2 * b * measured,
            });
            temperature_params = p.kv_heads as u64;
            notes.push("conv term: closed form; kernel-shape count attached");
            (
                2 * e * q + 2 * e * kvw,
                2 * b * s * kvw,
                4 * b * s * e * (q + kvw),
                4 * b * s * s * q,
                4 * b * e * (q + kvw),
                4 * b * s * q,
            )
        }
    };
    let (conv_p, conv_pf, conv_df) =
        conv.map_or((0, 0, 0), |c| (c.closed_form_params, c.closed_form_prefill_flops, c.closed_form_decode_flops));
    Ok(CostReport {
        label: spec.label(),
        batch: b,
        seq: s,
        params: params + conv_p,
        projection_params: params,
        rope_params,
        temperature_params,
        kv_elements: kv,
        prefill_flops: pp + pa + conv_pf,
        prefill_projection_flops: pp,
        prefill_attention_flops: pa,
        decode_flops: dp + da + conv_df,
        decode_projection_flops: dp,
        decode_attention_flops: da,
        conv,
        notes,
    })
}

/// Counts taken from the implementations themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasuredCosts {
    pub projection_params: u64,
    pub conv_params: u64,
    pub rope_params: u64,
    pub temperature_params: u64,
    pub kv_elements: u64,
    /// Non-causal forward over `[S, B, E]`.
    pub prefill: FlopCount,
    /// One decode step attending over `S` rows, on decode-form weights.
    pub decode: FlopCount,
}

/// Build weights, run an instrumented forward and decode step, and read the
/// cache after a prefill of length `s`.
pub fn measure(spec: &AttnSpec, b: usize, s: usize, seed: u64) -> Result<MeasuredCosts> {
    use rand::SeedableRng;
    let w = WeightSet::init(spec, seed)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = NdArray::randn(&[s, b, spec.embed_dim()], 1.0, &mut rng);
    let (r, prefill_flops) = instrument_flops(|| crate::decode::forward(&x, &w, false));
    r?;
    let dw = match spec {
        AttnSpec::Mla(_) => crate::baselines::mla_merge_projections(&w)?,
        _ => decode_weights(&w)?,
    };
    let decode = measure_decode_step(&dw, b, s.max(1), seed)?;
    let (_, state) = prefill(&x, &dw)?;
    Ok(MeasuredCosts {
        projection_params: w.count(ParamRole::Projection),
        conv_params: w.count(ParamRole::Conv),
        rope_params: w.count(ParamRole::RopeHead),
        temperature_params: w.count(ParamRole::Temperature),
        kv_elements: state.kv_cache().elements() as u64,
        prefill: prefill_flops,
        decode,
    })
}

/// One disagreement between a closed-form column and its measured value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Mismatch {
    pub label: String,
    pub field: &'static str,
    pub closed_form: u64,
    pub measured: u64,
}

/// Compare every exact column of [`eval_table2`] against [`measure`] at
/// `(b, s)`. An empty result means full agreement.
pub fn conformance(spec: &AttnSpec, b: usize, s: usize, seed: u64) -> Result<Vec<Mismatch>> {
    let r = eval_table2(spec, b as u64, s as u64)?;
    let m = measure(spec, b, s, seed)?;
    let mut pairs = vec![
        ("projection_params", r.projection_params, m.projection_params),
        ("rope_params", r.rope_params, m.rope_params),
        ("temperature_params", r.temperature_params, m.temperature_params),
        ("kv_elements", r.kv_elements, m.kv_elements),
        ("prefill_projection_flops", r.prefill_projection_flops, m.prefill.projection),
        ("prefill_attention_flops", r.prefill_attention_flops, m.prefill.attention),
        ("decode_projection_flops", r.decode_projection_flops, m.decode.projection),
        ("decode_attention_flops", r.decode_attention_flops, m.decode.attention),
    ];
    if let Some(c) = r.conv {
        pairs.push(("conv_params", c.measured_params, m.conv_params));
        pairs.push(("conv_prefill_flops", c.measured_prefill_flops, m.prefill.conv));
    }
    Ok(pairs
        .into_iter()
        .filter(|(_, a, b)| a != b)
        .map(|(field, closed_form, measured)| Mismatch { label: spec.label(), field, closed_form, measured })
        .collect())
}

/// Decode-time FLOPs per byte of cache read, in units of the element width:
/// how many query heads reuse each cached row.
pub fn arithmetic_intensity(spec: &AttnSpec) -> f64 {
    match spec {
        AttnSpec::Mha(_) => 1.0,
        AttnSpec::Gqa(p) => p.group_size as f64,
        AttnSpec::Mla(p) => match p.mode {
            MlaMode::Mqa => 2.0 * p.heads as f64,
            MlaMode::Mha => 1.0,
        },
        AttnSpec::Cca(p) | AttnSpec::Ccgqa(p) => (p.q_heads / p.kv_heads) as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HardwareSpec {
    pub name: String,
    pub peak_flops_per_s: f64,
    pub mem_bandwidth_bytes_per_s: f64,
}

impl HardwareSpec {
    /// Dense BF16 peak and HBM3 bandwidth of an H100 SXM.
    pub fn h100_bf16() -> Self {
        Self { name: "h100-bf16".into(), peak_flops_per_s: 989.4e12, mem_bandwidth_bytes_per_s: 3.35e12 }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "h100" | "h100-bf16" => Some(Self::h100_bf16()),
            _ => None,
        }
    }

    pub fn custom(peak_flops_per_s: f64, mem_bandwidth_bytes_per_s: f64) -> Result<Self> {
        if !(peak_flops_per_s > 0.0 && mem_bandwidth_bytes_per_s > 0.0) {
            return Err(crate::error::Error::InvalidSpec("hardware rates must be positive".into()));
        }
        Ok(Self { name: "custom".into(), peak_flops_per_s, mem_bandwidth_bytes_per_s })
    }

    /// FLOPs per byte where the compute and bandwidth roofs meet.
    pub fn ridge(&self) -> f64 {
        self.peak_flops_per_s / self.mem_bandwidth_bytes_per_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Bound {
    Memory,
    Compute,
}

/// Relative distance from the ridge within which a point is flagged near it.
pub const NEAR_RIDGE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RooflinePosition {
    pub intensity: f64,
    pub ridge: f64,
    pub bound: Bound,
    pub near_ridge: bool,
}

/// Compute-bound iff intensity ≥ ridge (ties go to compute).
pub fn roofline_position(spec: &AttnSpec, hw: &HardwareSpec) -> RooflinePosition {
    classify(arithmetic_intensity(spec), hw.ridge())
}

pub fn classify(intensity: f64, ridge: f64) -> RooflinePosition {
    RooflinePosition {
        intensity,
        ridge,
        bound: if intensity >= ridge { Bound::Compute } else { Bound::Memory },
        near_ridge: (intensity - ridge).abs() / ridge <= NEAR_RIDGE,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::MlaParams;

    #[test]
    fn mha_params_and_prefill() {
        let r = eval_table2(&AttnSpec::mha(2048, 16), 1, 16384).unwrap();
        assert_eq!(r.params, 16_777_216);
        assert_eq!(r.prefill_flops, 2_748_779_069_440);
    }

    #[test]
    fn cca_prefill_ratio_near_compression() {
        let m = eval_table2(&AttnSpec::mha(2048, 16), 1, 16384).unwrap();
        let c = eval_table2(&AttnSpec::cca(2048, 4, 8), 1, 16384).unwrap();
        let ratio = m.prefill_flops as f64 / c.prefill_flops as f64;
        assert!((ratio - 4.0).abs() < 0.04, "{ratio}");
    }

    #[test]
    fn cca_at_unit_compression_is_mha_plus_conv() {
        let m = eval_table2(&AttnSpec::mha(64, 4), 2, 33).unwrap();
        let c = eval_table2(&AttnSpec::cca(64, 1, 4), 2, 33).unwrap();
        let conv = c.conv.unwrap();
        assert_eq!(c.prefill_flops, m.prefill_flops + conv.closed_form_prefill_flops);
        assert_eq!(c.params, m.params + conv.closed_form_params);
    }

    #[test]
    fn cache_columns() {
        let at = |spec: AttnSpec| eval_table2(&spec, 1, 1024).unwrap().kv_elements;
        assert_eq!(at(AttnSpec::mha(2048, 16)), 4_194_304);
        assert_eq!(at(AttnSpec::gqa(2048, 16, 4)), 1_048_576);
        assert_eq!(at(AttnSpec::cca(2048, 4, 8)), 1_048_576);
        assert_eq!(at(AttnSpec::ccgqa(2048, 4, 8, 8, 4)), 524_288);
    }

    #[test]
    fn conv_closed_form_vs_kernel_shapes() {
        // CCA: the closed form counts the grouped conv at half the kernel size
        let c = eval_table2(&AttnSpec::cca(64, 2, 4), 1, 1).unwrap().conv.unwrap();
        // P = 64, dh = 8
        assert_eq!(c.measured_params, 64 * 4 + 64 * 8 * 4);
        assert_eq!(c.closed_form_params, 2 * 32 * 4 + 32 * 32 / 4 * 4);
        // CCGQA: the closed form doubles the depthwise conv
        let c = eval_table2(&AttnSpec::ccgqa(64, 2, 4, 4, 2), 1, 1).unwrap().conv.unwrap();
        assert_eq!(c.measured_params, 48 * 4 + 48 * 8 * 4);
        assert_eq!(c.closed_form_params, 2 * 48 * 4 + 48 * 48 / 6 * 4);
    }

    #[test]
    fn intensity_examples() {
        let mla = AttnSpec::Mla(MlaParams { heads: 128, ..mla_base() });
        assert_eq!(arithmetic_intensity(&mla), 256.0);
        assert_eq!(arithmetic_intensity(&AttnSpec::gqa(2048, 16, 16)), 16.0);
        assert_eq!(arithmetic_intensity(&AttnSpec::ccgqa(64, 2, 8, 8, 2)), 4.0);
    }

    fn mla_base() -> MlaParams {
        match AttnSpec::mla(16384, 128, 4, 8) {
            AttnSpec::Mla(p) => p,
            _ => unreachable!(),
        }
    }

    #[test]
    fn roofline_examples() {
        let hw = HardwareSpec::h100_bf16();
        assert!((hw.ridge() - 295.3).abs() < 0.1);
        let mla = roofline_position(&AttnSpec::Mla(mla_base()), &hw);
        assert_eq!((mla.intensity, mla.bound, mla.near_ridge), (256.0, Bound::Memory, true));
        let g = roofline_position(&AttnSpec::gqa(2048, 16, 16), &hw);
        assert_eq!((g.bound, g.near_ridge), (Bound::Memory, false));
        assert_eq!(classify(295.0, 295.0).bound, Bound::Compute);
        let low = HardwareSpec::custom(8.0, 1.0).unwrap();
        assert_eq!(roofline_position(&AttnSpec::gqa(2048, 16, 16), &low).bound, Bound::Compute);
        assert!(HardwareSpec::custom(0.0, 1.0).is_err());
    }

    #[test]
    fn measured_matches_closed_form_for_small_specs() {
        for spec in [
            AttnSpec::mha(16, 4),
            AttnSpec::gqa(16, 4, 2),
            AttnSpec::mla(16, 4, 2, 4),
            AttnSpec::cca(16, 2, 2),
            AttnSpec::ccgqa(16, 2, 4, 4, 2),
        ] {
            let (b, s) = (2, 7);
            let r = eval_table2(&spec, b as u64, s as u64).unwrap();
            let m = measure(&spec, b, s, 3).unwrap();
            let label = spec.label();
            assert_eq!(m.prefill.projection, r.prefill_projection_flops, "{label}");
            assert_eq!(m.prefill.attention, r.prefill_attention_flops, "{label}");
            assert_eq!(m.decode.projection, r.decode_projection_flops, "{label}");
            assert_eq!(m.decode.attention, r.decode_attention_flops, "{label}");
            assert_eq!(m.projection_params, r.projection_params, "{label}");
            assert_eq!(m.kv_elements, r.kv_elements, "{label}");
            if let Some(c) = r.conv {
                assert_eq!(m.conv_params, c.measured_params);
                assert_eq!(m.prefill.conv, c.measured_prefill_flops);
            }
        }
    }
}
