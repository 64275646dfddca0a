//! Named learnable tensors of one attention variant.
//!
//! | variant | tensors |
//! |---|---|
//! | MHA / GQA | `w_q [E,E]`, `w_k`, `w_v [E,kv]`, `w_o [E,E]` |
//! | MLA | `w_dq [E,Lq]`, `w_dkv [E,Lkv]`, `w_uq [Lq,E]`, `w_uk`, `w_uv [Lkv,E]`, `w_o [E,E]`, `w_uqr [Lq,H·r]`, `w_kr [E,r]` |
//! | MLA merged | `w_dq`, `w_dkv`, `w_q_absorbed [Lq,H·Lkv]`, `w_o_absorbed [H·Lkv,E]`, `w_uqr`, `w_kr` |
//! | CCA / CCGQA | `w_qk [E,P]`, `conv1 [P,1,k_seq]`, `conv2 [P,dh,k_ch]`, `w_v`, `w_v_prev [E,kv/2]`, `w_o [q,E]`, `beta [Hk]` |
//!
//! The rotary tensors are omitted when the rope width is zero.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ndcore::{NdArray, Real};
use crate::spec::AttnSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightKind {
    Mha,
    Gqa,
    Mla,
    /// MLA with up-projections folded into the query and output maps.
    MlaMerged,
    Cca,
}

/// How a tensor is accounted in parameter totals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Projection,
    /// Decoupled rotary projections (MLA), outside the headline count.
    RopeHead,
    Conv,
    Temperature,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSlot {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub role: ParamRole,
}

fn slot(name: &'static str, shape: &[usize], role: ParamRole) -> TensorSlot {
    TensorSlot { name, shape: shape.to_vec(), role }
}

/// The natural weight layout for a spec.
pub fn default_kind(spec: &AttnSpec) -> WeightKind {
    match spec {
        AttnSpec::Mha(_) => WeightKind::Mha,
        AttnSpec::Gqa(_) => WeightKind::Gqa,
        AttnSpec::Mla(_) => WeightKind::Mla,
        AttnSpec::Cca(_) | AttnSpec::Ccgqa(_) => WeightKind::Cca,
    }
}

/// Every tensor `kind` requires under `spec`, with exact shapes.
pub fn expected_slots(spec: &AttnSpec, kind: WeightKind) -> Result<Vec<TensorSlot>> {
    use ParamRole::*;
    spec.validate()?;
    let e = spec.embed_dim();
    let slots = match (spec, kind) {
        (AttnSpec::Mha(_), WeightKind::Mha) => vec![
            slot("w_q", &[e, e], Projection),
            slot("w_k", &[e, e], Projection),
            slot("w_v", &[e, e], Projection),
            slot("w_o", &[e, e], Projection),
        ],
        (AttnSpec::Gqa(p), WeightKind::Gqa) => vec![
            slot("w_q", &[e, e], Projection),
            slot("w_k", &[e, p.kv_width()], Projection),
            slot("w_v", &[e, p.kv_width()], Projection),
            slot("w_o", &[e, e], Projection),
        ],
        (AttnSpec::Mla(p), WeightKind::Mla | WeightKind::MlaMerged) => {
            let (lq, lkv, r, h) = (p.q_latent(), p.kv_latent(), p.rope_dim(), p.heads);
            let mut v = vec![slot("w_dq", &[e, lq], Projection), slot("w_dkv", &[e, lkv], Projection)];
            if kind == WeightKind::Mla {
                v.extend([
                    slot("w_uq", &[lq, e], Projection),
                    slot("w_uk", &[lkv, e], Projection),
                    slot("w_uv", &[lkv, e], Projection),
                    slot("w_o", &[e, e], Projection),
                ]);
            } else {
                v.extend([
                    slot("w_q_absorbed", &[lq, h * lkv], Projection),
                    slot("w_o_absorbed", &[h * lkv, e], Projection),
                ]);
            }
            if r > 0 {
                v.extend([slot("w_uqr", &[lq, h * r], RopeHead), slot("w_kr", &[e, r], RopeHead)]);
            }
            v
        }
        (AttnSpec::Cca(p) | AttnSpec::Ccgqa(p), WeightKind::Cca) => {
            let pw = p.packed_width();
            vec![
                slot("w_qk", &[e, pw], Projection),
                slot("conv1", &[pw, 1, p.k_seq], Conv),
                slot("conv2", &[pw, p.head_dim(), p.k_ch], Conv),
                slot("w_v", &[e, p.kv_width() / 2], Projection),
                slot("w_v_prev", &[e, p.kv_width() / 2], Projection),
                slot("w_o", &[p.q_width(), e], Projection),
                slot("beta", &[p.kv_heads], Temperature),
            ]
        }
        _ => {
            return Err(Error::InvalidSpec(format!("weight layout {kind:?} does not fit {}", spec.label())));
        }
    };
    Ok(slots)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet<F: Real = f64> {
    spec: AttnSpec,
    kind: WeightKind,
    tensors: BTreeMap<String, NdArray<F>>,
}

impl WeightSet<f64> {
    /// Gaussian init with std `1/√fan_in` (conv fan-in is `in_channels · width`);
    /// temperatures start at zero.
    pub fn init(spec: &AttnSpec, seed: u64) -> Result<Self> {
        let kind = default_kind(spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for s in expected_slots(spec, kind)? {
            let t = match s.role {
                ParamRole::Temperature => NdArray::zeros(&s.shape),
                ParamRole::Conv => {
                    let fan_in = (s.shape[1] * s.shape[2]).max(1);
                    NdArray::randn(&s.shape, 1.0 / (fan_in as f64).sqrt(), &mut rng)
                }
                _ => NdArray::randn(&s.shape, 1.0 / (s.shape[0].max(1) as f64).sqrt(), &mut rng),
            };
            tensors.insert(s.name.to_string(), t);
        }
        Ok(Self { spec: spec.clone(), kind, tensors })
    }
}

impl<F: Real> WeightSet<F> {
    /// Checks that `tensors` holds exactly the slots of `kind`, shapes included.
    pub fn from_tensors(spec: &AttnSpec, kind: WeightKind, mut tensors: BTreeMap<String, NdArray<F>>) -> Result<Self> {
        let mut out = BTreeMap::new();
        for s in expected_slots(spec, kind)? {
            let t = tensors.remove(s.name).ok_or_else(|| Error::MissingWeight(s.name.to_string()))?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::ShapeMismatch { op: s.name, lhs: t.shape().to_vec(), rhs: s.shape });
            }
            out.insert(s.name.to_string(), t);
        }
        if let Some(extra) = tensors.into_keys().next() {
            return Err(Error::UnexpectedWeight(extra));
        }
        Ok(Self { spec: spec.clone(), kind, tensors: out })
    }

    pub fn spec(&self) -> &AttnSpec {
        &self.spec
    }

    pub fn kind(&self) -> WeightKind {
        self.kind
    }

    pub fn get(&self, name: &str) -> Result<&NdArray<F>> {
        self.tensors.get(name).ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    /// Mutable access for in-place edits; the shape must be left unchanged.
    pub fn get_mut(&mut self, name: &str) -> Result<&mut NdArray<F>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &NdArray<F>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn into_tensors(self) -> BTreeMap<String, NdArray<F>> {
        self.tensors
    }

    pub fn cast<G: Real>(&self) -> WeightSet<G> {
        WeightSet {
            spec: self.spec.clone(),
            kind: self.kind,
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Element count over tensors of one role.
    pub fn count(&self, role: ParamRole) -> u64 {
        expected_slots(&self.spec, self.kind)
            .expect("validated at construction")
            .iter()
            .filter(|s| s.role == role)
            .map(|s| self.tensors[s.name].len() as u64)
            .sum()
    }

    pub fn param_count(&self) -> u64 {
        self.tensors.values().map(|t| t.len() as u64).sum()
    }
}
