//! Static configuration of one attention variant.
//!
//! Specs are plain serde data, tagged by `variant` in JSON:
//!
//! ```json
//! {"variant": "gqa", "embed_dim": 64, "heads": 8, "group_size": 4}
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rope::{RopeParams, DEFAULT_THETA};

fn yes() -> bool {
    true
}

fn default_theta() -> f64 {
    DEFAULT_THETA
}

fn default_kernel() -> usize {
    4
}

fn default_eps() -> f64 {
    1e-6
}

fn divides(what: &str, n: usize, d: usize) -> Result<()> {
    if d == 0 || !n.is_multiple_of(d) {
        return Err(Error::InvalidSpec(format!("{what}: {n} is not divisible by {d}")));
    }
    Ok(())
}

fn positive(what: &str, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidSpec(format!("{what} must be positive")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MhaParams {
    pub embed_dim: usize,
    pub heads: usize,
    /// Rotary embedding over the full head dim.
    #[serde(default = "yes")]
    pub rope: bool,
}

impl MhaParams {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// Grouped-query attention. `group_size` query heads share each key/value
/// head, so there are `heads / group_size` kv heads; `group_size = 1` is MHA
/// and `group_size = heads` is MQA.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GqaParams {
    pub embed_dim: usize,
    pub heads: usize,
    pub group_size: usize,
    #[serde(default = "yes")]
    pub rope: bool,
}

impl GqaParams {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn kv_heads(&self) -> usize {
        self.heads / self.group_size
    }

    pub fn kv_width(&self) -> usize {
        self.kv_heads() * self.head_dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MlaMode {
    /// Explicit per-head up-projections.
    Mha,
    /// Up-projections absorbed into the query and output maps; keys and
    /// values are the latent itself.
    #[default]
    Mqa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlaParams {
    pub embed_dim: usize,
    pub heads: usize,
    pub q_compression: usize,
    pub kv_compression: usize,
    /// Width of the decoupled rotary heads; `None` means half the head dim.
    #[serde(default)]
    pub rope_dim: Option<usize>,
    #[serde(default)]
    pub mode: MlaMode,
    #[serde(default = "default_theta")]
    pub rope_theta: f64,
}

impl MlaParams {
    pub fn new(embed_dim: usize, heads: usize, q_compression: usize, kv_compression: usize) -> Self {
        Self {
            embed_dim,
            heads,
            q_compression,
            kv_compression,
            rope_dim: None,
            mode: MlaMode::Mqa,
            rope_theta: DEFAULT_THETA,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn q_latent(&self) -> usize {
        self.embed_dim / self.q_compression
    }

    pub fn kv_latent(&self) -> usize {
        self.embed_dim / self.kv_compression
    }

    pub fn rope_dim(&self) -> usize {
        self.rope_dim.unwrap_or(self.head_dim() / 2)
    }

    pub fn rope(&self) -> RopeParams {
        RopeParams { theta_base: self.rope_theta, rotary_dim: self.rope_dim() }
    }

    /// `1 / √(head_dim + rope_dim)`.
    pub fn scale(&self) -> f64 {
        1.0 / ((self.head_dim() + self.rope_dim()) as f64).sqrt()
    }
}

/// Shared by CCA (`q_compression == kv_compression`, `q_heads == kv_heads`)
/// and CCGQA.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CcaParams {
    pub embed_dim: usize,
    pub q_compression: usize,
    pub kv_compression: usize,
    pub q_heads: usize,
    pub kv_heads: usize,
    /// Depthwise sequence conv width.
    #[serde(default = "default_kernel")]
    pub k_seq: usize,
    /// Grouped (per-head) conv width.
    #[serde(default = "default_kernel")]
    pub k_ch: usize,
    #[serde(default = "default_theta")]
    pub rope_theta: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

impl CcaParams {
    pub fn new(embed_dim: usize, q_compression: usize, kv_compression: usize, q_heads: usize, kv_heads: usize) -> Self {
        Self {
            embed_dim,
            q_compression,
            kv_compression,
            q_heads,
            kv_heads,
            k_seq: default_kernel(),
            k_ch: default_kernel(),
            rope_theta: DEFAULT_THETA,
            eps: default_eps(),
        }
    }

    pub fn q_width(&self) -> usize {
        self.embed_dim / self.q_compression
    }

    pub fn kv_width(&self) -> usize {
        self.embed_dim / self.kv_compression
    }

    /// Channels of the packed q‖k latent.
    pub fn packed_width(&self) -> usize {
        self.q_width() + self.kv_width()
    }

    pub fn head_dim(&self) -> usize {
        self.q_width() / self.q_heads
    }

    pub fn group_size(&self) -> usize {
        self.q_heads / self.kv_heads
    }

    pub fn rope(&self) -> RopeParams {
        RopeParams { theta_base: self.rope_theta, rotary_dim: self.head_dim() }
    }

    /// Packed pre-conv rows a streaming decoder must remember.
    pub fn ring_len(&self) -> usize {
        self.k_seq + self.k_ch - 2
    }

    pub fn validate(&self) -> Result<()> {
        positive("embed_dim", self.embed_dim)?;
        positive("q_heads", self.q_heads)?;
        positive("kv_heads", self.kv_heads)?;
        positive("k_seq", self.k_seq)?;
        positive("k_ch", self.k_ch)?;
        divides("embed_dim / q_compression", self.embed_dim, self.q_compression)?;
        divides("embed_dim / kv_compression", self.embed_dim, self.kv_compression)?;
        divides("query latent / q_heads", self.q_width(), self.q_heads)?;
        divides("kv latent / kv_heads", self.kv_width(), self.kv_heads)?;
        divides("q_heads / kv_heads", self.q_heads, self.kv_heads)?;
        if self.kv_width() / self.kv_heads != self.head_dim() {
            return Err(Error::InvalidSpec(format!(
                "query head dim {} differs from kv head dim {}",
                self.head_dim(),
                self.kv_width() / self.kv_heads
            )));
        }
        if !self.kv_heads.is_multiple_of(2) {
            return Err(Error::OddKvHeads(self.kv_heads));
        }
        if self.eps <= 0.0 || !self.eps.is_finite() {
            return Err(Error::InvalidSpec(format!("eps must be positive, got {}", self.eps)));
        }
        self.rope().validate(self.head_dim())
    }
}

/// Draw a small valid spec of the given family; dimensions stay below 100 so
/// instrumented runs remain cheap.
pub fn sample_spec(variant: Variant, rng: &mut impl rand::Rng) -> AttnSpec {
    const DIMS: [usize; 6] = [8, 16, 24, 32, 48, 64];
    loop {
        let e = DIMS[rng.random_range(0..DIMS.len())];
        let pick = |rng: &mut dyn rand::RngCore, opts: &[usize]| opts[rng.next_u32() as usize % opts.len()];
        let spec = match variant {
            Variant::Mha => AttnSpec::Mha(MhaParams { embed_dim: e, heads: pick(rng, &[1, 2, 4, 8]), rope: rng.random() }),
            Variant::Gqa => AttnSpec::Gqa(GqaParams {
                embed_dim: e,
                heads: pick(rng, &[2, 4, 8]),
                group_size: pick(rng, &[1, 2, 4, 8]),
                rope: rng.random(),
            }),
            Variant::Mla => AttnSpec::Mla(MlaParams {
                rope_dim: Some(pick(rng, &[0, 2, 4])),
                mode: if rng.random() { MlaMode::Mqa } else { MlaMode::Mha },
                ..MlaParams::new(e, pick(rng, &[1, 2, 4]), pick(rng, &[1, 2, 4]), pick(rng, &[1, 2, 4, 8]))
            }),
            Variant::Cca => {
                let c = pick(rng, &[1, 2, 4]);
                let mut p = CcaParams::new(e, c, c, pick(rng, &[2, 4]), 0);
                p.kv_heads = p.q_heads;
                p.k_seq = pick(rng, &[1, 2, 3, 4]);
                p.k_ch = pick(rng, &[1, 2, 4]);
                AttnSpec::Cca(p)
            }
            Variant::Ccgqa => {
                let mut p = CcaParams::new(e, pick(rng, &[1, 2, 4]), pick(rng, &[1, 2, 4, 8]), pick(rng, &[2, 4, 8]), pick(rng, &[2, 4]));
                p.k_seq = pick(rng, &[1, 2, 3, 4]);
                p.k_ch = pick(rng, &[1, 2, 4]);
                AttnSpec::Ccgqa(p)
            }
        };
        if spec.validate().is_ok() {
            return spec;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase")]
pub enum AttnSpec {
    Mha(MhaParams),
    Gqa(GqaParams),
    Mla(MlaParams),
    Cca(CcaParams),
    Ccgqa(CcaParams),
}

/// Variant family without dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Mha,
    Gqa,
    Mla,
    Cca,
    Ccgqa,
}

impl Variant {
    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "mha" => Ok(Self::Mha),
            "gqa" => Ok(Self::Gqa),
            "mla" => Ok(Self::Mla),
            "cca" => Ok(Self::Cca),
            "ccgqa" => Ok(Self::Ccgqa),
            _ => Err(Error::UnknownVariant(name.to_string())),
        }
    }
}

impl AttnSpec {
    pub fn mha(embed_dim: usize, heads: usize) -> Self {
        Self::Mha(MhaParams { embed_dim, heads, rope: true })
    }

    pub fn gqa(embed_dim: usize, heads: usize, group_size: usize) -> Self {
        Self::Gqa(GqaParams { embed_dim, heads, group_size, rope: true })
    }

    pub fn mla(embed_dim: usize, heads: usize, q_compression: usize, kv_compression: usize) -> Self {
        Self::Mla(MlaParams::new(embed_dim, heads, q_compression, kv_compression))
    }

    pub fn cca(embed_dim: usize, compression: usize, heads: usize) -> Self {
        Self::Cca(CcaParams::new(embed_dim, compression, compression, heads, heads))
    }

    pub fn ccgqa(embed_dim: usize, q_compression: usize, kv_compression: usize, q_heads: usize, kv_heads: usize) -> Self {
        Self::Ccgqa(CcaParams::new(embed_dim, q_compression, kv_compression, q_heads, kv_heads))
    }

    pub fn variant(&self) -> Variant {
        match self {
            Self::Mha(_) => Variant::Mha,
            Self::Gqa(_) => Variant::Gqa,
            Self::Mla(_) => Variant::Mla,
            Self::Cca(_) => Variant::Cca,
            Self::Ccgqa(_) => Variant::Ccgqa,
        }
    }

    pub fn embed_dim(&self) -> usize {
        match self {
            Self::Mha(p) => p.embed_dim,
            Self::Gqa(p) => p.embed_dim,
            Self::Mla(p) => p.embed_dim,
            Self::Cca(p) | Self::Ccgqa(p) => p.embed_dim,
        }
    }

    /// Query heads.
    pub fn heads(&self) -> usize {
        match self {
            Self::Mha(p) => p.heads,
            Self::Gqa(p) => p.heads,
            Self::Mla(p) => p.heads,
            Self::Cca(p) | Self::Ccgqa(p) => p.q_heads,
        }
    }

    pub fn cca_params(&self) -> Option<&CcaParams> {
        match self {
            Self::Cca(p) | Self::Ccgqa(p) => Some(p),
            _ => None,
        }
    }

    /// Short human label, e.g. `GQA-4`, `CCA-4x`, `CCGQA-4x/8x`.
    pub fn label(&self) -> String {
        match self {
            Self::Mha(_) => "MHA".into(),
            Self::Gqa(p) => format!("GQA-{}", p.group_size),
            Self::Mla(p) => match p.mode {
                MlaMode::Mqa => "MLA".into(),
                MlaMode::Mha => "MLA-mha".into(),
            },
            Self::Cca(p) => format!("CCA-{}x", p.q_compression),
            Self::Ccgqa(p) => format!("CCGQA-{}x/{}x", p.q_compression, p.kv_compression),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Mha(p) => {
                positive("embed_dim", p.embed_dim)?;
                divides("embed_dim / heads", p.embed_dim, p.heads)?;
                if p.rope {
                    RopeParams::new(p.head_dim()).validate(p.head_dim())?;
                }
                Ok(())
            }
            Self::Gqa(p) => {
                positive("embed_dim", p.embed_dim)?;
                divides("embed_dim / heads", p.embed_dim, p.heads)?;
                divides("heads / group_size", p.heads, p.group_size)?;
                if p.rope {
                    RopeParams::new(p.head_dim()).validate(p.head_dim())?;
                }
                Ok(())
            }
            Self::Mla(p) => {
                positive("embed_dim", p.embed_dim)?;
                divides("embed_dim / heads", p.embed_dim, p.heads)?;
                divides("embed_dim / q_compression", p.embed_dim, p.q_compression)?;
                divides("embed_dim / kv_compression", p.embed_dim, p.kv_compression)?;
                let r = p.rope_dim();
                if r % 2 != 0 {
                    return Err(Error::OddRotaryDim(r));
                }
                Ok(())
            }
            Self::Cca(p) => {
                if p.q_compression != p.kv_compression || p.q_heads != p.kv_heads {
                    return Err(Error::InvalidSpec(
                        "cca needs equal compressions and head counts; use ccgqa otherwise".into(),
                    ));
                }
                p.validate()
            }
            Self::Ccgqa(p) => p.validate(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_defaults() {
        let s: AttnSpec = serde_json::from_str(r#"{"variant":"ccgqa","embed_dim":64,"q_compression":2,"kv_compression":4,"q_heads":4,"kv_heads":2}"#).unwrap();
        let p = s.cca_params().unwrap();
        assert_eq!((p.k_seq, p.k_ch, p.eps), (4, 4, 1e-6));
        assert_eq!(p.head_dim(), 8);
        let back: AttnSpec = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn unknown_fields_rejected() {
        let r: std::result::Result<AttnSpec, _> =
            serde_json::from_str(r#"{"variant":"mha","embed_dim":8,"heads":2,"bogus":1}"#);
        assert!(r.is_err());
        let r: std::result::Result<AttnSpec, _> = serde_json::from_str(r#"{"variant":"xyz","embed_dim":8}"#);
        assert!(r.is_err());
    }

    #[test]
    fn validation() {
        assert!(AttnSpec::gqa(32, 4, 3).validate().is_err());
        assert!(AttnSpec::gqa(32, 4, 4).validate().is_ok());
        assert_eq!(AttnSpec::ccgqa(32, 2, 4, 2, 1).validate(), Err(Error::OddKvHeads(1)));
        assert!(AttnSpec::cca(16, 2, 2).validate().is_ok());
        // 16/2 = 8 query channels over 2 heads (4 wide) vs 16/4 = 4 kv channels over 2 heads (2 wide)
        assert!(AttnSpec::ccgqa(16, 2, 4, 2, 2).validate().is_err());
        assert_eq!(Variant::parse("Bogus"), Err(Error::UnknownVariant("Bogus".into())));
    }

    #[test]
    fn labels() {
        assert_eq!(AttnSpec::gqa(2048, 16, 4).label(), "GQA-4");
        assert_eq!(AttnSpec::cca(2048, 4, 8).label(), "CCA-4x");
        assert_eq!(AttnSpec::ccgqa(2048, 4, 8, 8, 4).label(), "CCGQA-4x/8x");
    }
}
