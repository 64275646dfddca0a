//! Reference MHA, GQA and MLA.
//!
//! Every forward takes `x: [S, B, E]` and returns `[S, B, E]`. The pieces
//! (projections, output maps) are exposed crate-wide so the streaming decoder
//! runs the exact same arithmetic one row at a time.

use crate::error::{shape_err, Error, Result};
use crate::ndcore::flops::{with_category, Category};
use crate::ndcore::{attend, attend_with_rope, ops, NdArray, Real};
use crate::rope::{rope_apply, RopeParams};
use crate::spec::{AttnSpec, MlaParams};
use crate::weights::{WeightKind, WeightSet};

pub(crate) fn seq_batch<F: Real>(x: &NdArray<F>, e: usize) -> Result<(usize, usize)> {
    match *x.shape() {
        [s, b, width] if width == e => Ok((s, b)),
        _ => shape_err("input", x.shape(), &[0, 0, e]),
    }
}

/// Head geometry shared by MHA and GQA.
#[derive(Debug, Clone, Copy)]
pub(crate) struct HeadLayout {
    pub embed_dim: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub rope: Option<RopeParams>,
}

impl HeadLayout {
    pub fn of(spec: &AttnSpec) -> Result<Self> {
        spec.validate()?;
        match spec {
            AttnSpec::Mha(p) => Ok(Self {
                embed_dim: p.embed_dim,
                heads: p.heads,
                kv_heads: p.heads,
                head_dim: p.head_dim(),
                rope: p.rope.then(|| RopeParams::new(p.head_dim())),
            }),
            AttnSpec::Gqa(p) => Ok(Self {
                embed_dim: p.embed_dim,
                heads: p.heads,
                kv_heads: p.kv_heads(),
                head_dim: p.head_dim(),
                rope: p.rope.then(|| RopeParams::new(p.head_dim())),
            }),
            _ => Err(Error::InvalidSpec(format!("{} is not a multi-head layout", spec.label()))),
        }
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }
}

/// Rotated `q [S,B,H,d]` and `k, v [S,B,Hk,d]` for rows at `positions`.
pub(crate) fn grouped_qkv<F: Real>(
    x: &NdArray<F>,
    w: &WeightSet<F>,
    lay: &HeadLayout,
    positions: &[usize],
) -> Result<(NdArray<F>, NdArray<F>, NdArray<F>)> {
    let (s, b) = seq_batch(x, lay.embed_dim)?;
    let (h, hk, d) = (lay.heads, lay.kv_heads, lay.head_dim);
    let mut q = ops::matmul(x, w.get("w_q")?)?.into_shape(&[s, b, h, d])?;
    let mut k = ops::matmul(x, w.get("w_k")?)?.into_shape(&[s, b, hk, d])?;
    let v = ops::matmul(x, w.get("w_v")?)?.into_shape(&[s, b, hk, d])?;
    if let Some(r) = &lay.rope {
        q = rope_apply(&q, positions, r)?;
        k = rope_apply(&k, positions, r)?;
    }
    Ok((q, k, v))
}

/// `o [S,B,H,d] → o_flat @ w_o`.
pub(crate) fn heads_output<F: Real>(o: NdArray<F>, w_o: &NdArray<F>) -> Result<NdArray<F>> {
    let (s, b) = (o.dim(0), o.dim(1));
    let width: usize = o.shape()[2..].iter().product();
    ops::matmul(&o.into_shape(&[s, b, width])?, w_o)
}

fn require_kind<F: Real>(w: &WeightSet<F>, kinds: &[WeightKind]) -> Result<()> {
    if kinds.contains(&w.kind()) {
        Ok(())
    } else {
        Err(Error::InvalidSpec(format!("weights of kind {:?} where {kinds:?} expected", w.kind())))
    }
}

fn grouped_forward<F: Real>(x: &NdArray<F>, w: &WeightSet<F>, causal: bool) -> Result<NdArray<F>> {
    let lay = HeadLayout::of(w.spec())?;
    let positions: Vec<usize> = (0..x.dim(0)).collect();
    let (q, k, v) = grouped_qkv(x, w, &lay, &positions)?;
    let o = with_category(Category::Attention, || attend(&q, &k, &v, F::of(lay.scale()), causal))?;
    heads_output(o, w.get("w_o")?)
}

pub fn mha_forward<F: Real>(x: &NdArray<F>, w: &WeightSet<F>, causal: bool) -> Result<NdArray<F>> {
    require_kind(w, &[WeightKind::Mha])?;
    grouped_forward(x, w, causal)
}

/// Shares its code path with [`mha_forward`]; with `group_size = 1` the two
/// are bitwise identical.
pub fn gqa_forward<F: Real>(x: &NdArray<F>, w: &WeightSet<F>, causal: bool) -> Result<NdArray<F>> {
    require_kind(w, &[WeightKind::Gqa])?;
    grouped_forward(x, w, causal)
}

pub(crate) fn mla_params<F: Real>(w: &WeightSet<F>) -> Result<&MlaParams> {
    match w.spec() {
        AttnSpec::Mla(p) => Ok(p),
        other => Err(Error::InvalidSpec(format!("{} is not MLA", other.label()))),
    }
}

/// Low-rank latents of MLA for rows at `positions`.
pub(crate) struct MlaLatents<F> {
    /// `[S, B, Lq]`
    pub c_q: NdArray<F>,
    /// `[S, B, Lkv]`
    pub c_kv: NdArray<F>,
    /// Rotated query rope heads `[S, B, H, r]` and the single shared rotated
    /// key rope head `[S, B, 1, r]`; absent when `r = 0`.
    pub rope: Option<(NdArray<F>, NdArray<F>)>,
}

pub(crate) fn mla_latents<F: Real>(
    x: &NdArray<F>,
    w: &WeightSet<F>,
    p: &MlaParams,
    positions: &[usize],
) -> Result<MlaLatents<F>> {
    let (s, b) = seq_batch(x, p.embed_dim)?;
    let c_q = ops::matmul(x, w.get("w_dq")?)?;
    let c_kv = ops::matmul(x, w.get("w_dkv")?)?;
    let r = p.rope_dim();
    let rope = if r > 0 {
        let rp = p.rope();
        let pair = with_category(Category::RopeExtra, || -> Result<_> {
            let qr = ops::matmul(&c_q, w.get("w_uqr")?)?.into_shape(&[s, b, p.heads, r])?;
            let kr = ops::matmul(x, w.get("w_kr")?)?.into_shape(&[s, b, 1, r])?;
            Ok((rope_apply(&qr, positions, &rp)?, rope_apply(&kr, positions, &rp)?))
        })?;
        Some(pair)
    } else {
        None
    };
    Ok(MlaLatents { c_q, c_kv, rope })
}

pub(crate) fn mla_attend<F: Real>(
    q: &NdArray<F>,
    k: &NdArray<F>,
    v: &NdArray<F>,
    rope: Option<(&NdArray<F>, &NdArray<F>)>,
    scale: f64,
    causal: bool,
) -> Result<NdArray<F>> {
    with_category(Category::Attention, || match rope {
        Some((qr, kr)) => attend_with_rope(q, k, v, qr, kr, F::of(scale), causal),
        None => attend(q, k, v, F::of(scale), causal),
    })
}

/// Explicit up-projection of the kv latent into `n_h` key and value heads.
pub(crate) fn mla_up_kv<F: Real>(c_kv: &NdArray<F>, w: &WeightSet<F>, p: &MlaParams) -> Result<(NdArray<F>, NdArray<F>)> {
    let (s, b) = (c_kv.dim(0), c_kv.dim(1));
    let (h, d) = (p.heads, p.head_dim());
    let k = ops::matmul(c_kv, w.get("w_uk")?)?.into_shape(&[s, b, h, d])?;
    let v = ops::matmul(c_kv, w.get("w_uv")?)?.into_shape(&[s, b, h, d])?;
    Ok((k, v))
}

pub(crate) fn mla_up_q<F: Real>(c_q: &NdArray<F>, w: &WeightSet<F>, p: &MlaParams) -> Result<NdArray<F>> {
    let (s, b) = (c_q.dim(0), c_q.dim(1));
    ops::matmul(c_q, w.get("w_uq")?)?.into_shape(&[s, b, p.heads, p.head_dim()])
}

/// Absorbed queries `[S, B, H, Lkv]` that score directly against the latent.
pub(crate) fn mla_absorbed_q<F: Real>(c_q: &NdArray<F>, w: &WeightSet<F>, p: &MlaParams) -> Result<NdArray<F>> {
    let (s, b) = (c_q.dim(0), c_q.dim(1));
    ops::matmul(c_q, w.get("w_q_absorbed")?)?.into_shape(&[s, b, p.heads, p.kv_latent()])
}

/// MLA with explicit per-head up-projections (raw weights).
pub fn mla_forward<F: Real>(x: &NdArray<F>, w: &WeightSet<F>, causal: bool) -> Result<NdArray<F>> {
    require_kind(w, &[WeightKind::Mla])?;
    let p = mla_params(w)?;
    let positions: Vec<usize> = (0..x.dim(0)).collect();
    let lat = mla_latents(x, w, p, &positions)?;
    let q = mla_up_q(&lat.c_q, w, p)?;
    let (k, v) = mla_up_kv(&lat.c_kv, w, p)?;
    let o = mla_attend(&q, &k, &v, lat.rope.as_ref().map(|(a, b)| (a, b)), p.scale(), causal)?;
    heads_output(o, w.get("w_o")?)
}

/// MLA on merged weights: one shared latent key/value head.
pub fn mla_forward_mqa<F: Real>(x: &NdArray<F>, w: &WeightSet<F>, causal: bool) -> Result<NdArray<F>> {
    require_kind(w, &[WeightKind::MlaMerged])?;
    let p = mla_params(w)?;
    let positions: Vec<usize> = (0..x.dim(0)).collect();
    let lat = mla_latents(x, w, p, &positions)?;
    let q = mla_absorbed_q(&lat.c_q, w, p)?;
    let (s, b) = (x.dim(0), x.dim(1));
    let kv = lat.c_kv.reshape(&[s, b, 1, p.kv_latent()])?;
    let o = mla_attend(&q, &kv, &kv, lat.rope.as_ref().map(|(a, b)| (a, b)), p.scale(), causal)?;
    heads_output(o, w.get("w_o_absorbed")?)
}

fn columns<F: Real>(m: &NdArray<F>, start: usize, len: usize) -> Result<NdArray<F>> {
    ops::slice_last(m, start, len)
}

/// Fold the per-head up-projections into the query and output maps:
/// `w_q_absorbed[:, h] = w_uq[:, h] · w_uk[:, h]ᵀ` and
/// `w_o_absorbed[h] = w_uv[:, h] · w_o[h]`.
pub fn mla_merge_projections<F: Real>(w: &WeightSet<F>) -> Result<WeightSet<F>> {
    require_kind(w, &[WeightKind::Mla])?;
    let p = mla_params(w)?;
    let (h, d) = (p.heads, p.head_dim());
    let (w_uq, w_uk, w_uv, w_o) = (w.get("w_uq")?, w.get("w_uk")?, w.get("w_uv")?, w.get("w_o")?);
    let mut q_abs: Option<NdArray<F>> = None;
    let mut o_parts = Vec::with_capacity(h);
    for head in 0..h {
        let uq = columns(w_uq, head * d, d)?;
        let uk = columns(w_uk, head * d, d)?;
        let qa = ops::matmul_ex(&uq, false, &uk, true)?;
        q_abs = Some(match q_abs {
            Some(acc) => ops::concat_last(&acc, &qa)?,
            None => qa,
        });
        let uv = columns(w_uv, head * d, d)?;
        o_parts.push(ops::matmul(&uv, &w_o.slice_axis0(head * d, d)?)?);
    }
    let o_abs = NdArray::concat_axis0(&o_parts.iter().collect::<Vec<_>>())?;
    let mut tensors = w.clone().into_tensors();
    for name in ["w_uq", "w_uk", "w_uv", "w_o"] {
        tensors.remove(name);
    }
    tensors.insert("w_q_absorbed".into(), q_abs.expect("at least one head"));
    tensors.insert("w_o_absorbed".into(), o_abs);
    WeightSet::from_tensors(w.spec(), WeightKind::MlaMerged, tensors)
}
