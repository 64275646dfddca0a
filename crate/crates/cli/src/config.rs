//! JSON run configuration. Every section has defaults, so `{"schema_version": 1}`
//! is a complete config; unknown fields anywhere are rejected.

use std::path::Path;

use latent_attn_core::costmodel::HardwareSpec;
use latent_attn_core::AttnSpec;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Bytes per cached element when reporting cache sizes.
    #[serde(default = "default_element_bytes")]
    pub element_bytes: u64,
    #[serde(default)]
    pub plot: bool,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub cost_curves: CostCurvesConfig,
    #[serde(default)]
    pub bench: BenchConfig,
    #[serde(default)]
    pub roofline: RooflineConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub causality_trials: usize,
    pub gradient_seeds: usize,
    /// Random specs drawn per variant family for the cost-column check.
    pub cost_model_specs: usize,
    /// Negative control: decode with slightly different weights than prefill.
    pub inject_decode_perturbation: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { causality_trials: 200, gradient_seeds: 3, cost_model_specs: 20, inject_decode_perturbation: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostCurvesConfig {
    pub batch: u64,
    pub seq_grid: Vec<u64>,
    pub variants: Vec<AttnSpec>,
}

impl Default for CostCurvesConfig {
    fn default() -> Self {
        Self { batch: 1, seq_grid: default_seq_grid(), variants: reference_variants(2048) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub seq_grid: Vec<usize>,
    pub variants: Vec<AttnSpec>,
    pub batch: usize,
    pub warmup: usize,
    pub repetitions: usize,
    pub decode_steps: usize,
    pub threads: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seq_grid: vec![128, 256, 512, 1024],
            variants: vec![AttnSpec::mha(256, 4), AttnSpec::cca(256, 4, 4)],
            batch: 1,
            warmup: 1,
            repetitions: 9,
            decode_steps: 16,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HardwareChoice {
    Preset(String),
    Custom { peak_flops_per_s: f64, mem_bandwidth_bytes_per_s: f64 },
}

impl HardwareChoice {
    pub fn resolve(&self) -> CliResult<HardwareSpec> {
        match self {
            Self::Preset(name) => HardwareSpec::preset(name).ok_or_else(|| CliError::UnknownPreset(name.clone())),
            Self::Custom { peak_flops_per_s, mem_bandwidth_bytes_per_s } => {
                HardwareSpec::custom(*peak_flops_per_s, *mem_bandwidth_bytes_per_s)
                    .map_err(|e| CliError::Config(e.to_string()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RooflineConfig {
    pub hardware: HardwareChoice,
    pub variants: Vec<AttnSpec>,
}

impl Default for RooflineConfig {
    fn default() -> Self {
        let mut variants = reference_variants(2048);
        variants.push(AttnSpec::gqa(2048, 16, 16));
        variants.push(AttnSpec::mla(2048, 128, 2, 4));
        Self { hardware: HardwareChoice::Preset("h100".into()), variants }
    }
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_element_bytes() -> u64 {
    2
}

/// 512 through 16384 in powers of two.
pub fn default_seq_grid() -> Vec<u64> {
    (9..=14).map(|p| 1 << p).collect()
}

/// MHA, GQA-4, MLA, CCA-4x and CCGQA-4x/8x at width `e` with 16 heads
/// (8 for the compressed variants).
pub fn reference_variants(e: usize) -> Vec<AttnSpec> {
    vec![
        AttnSpec::mha(e, 16),
        AttnSpec::gqa(e, 16, 4),
        AttnSpec::mla(e, 16, 2, 4),
        AttnSpec::cca(e, 4, 8),
        AttnSpec::ccgqa(e, 4, 8, 8, 4),
    ]
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seeds: default_seeds(),
            element_bytes: default_element_bytes(),
            plot: false,
            verify: VerifyConfig::default(),
            cost_curves: CostCurvesConfig::default(),
            bench: BenchConfig::default(),
            roofline: RooflineConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("schema_version {} unsupported (expected {SCHEMA_VERSION})", self.schema_version));
        }
        if self.seeds.is_empty() {
            return bad("seeds must be nonempty".into());
        }
        if self.element_bytes == 0 {
            return bad("element_bytes must be positive".into());
        }
        if self.cost_curves.seq_grid.is_empty() || self.cost_curves.seq_grid.contains(&0) || self.cost_curves.batch == 0 {
            return bad("cost_curves grid and batch must be nonempty and positive".into());
        }
        let b = &self.bench;
        if b.seq_grid.is_empty() || b.seq_grid.contains(&0) || b.batch == 0 || b.repetitions == 0 || b.threads == 0 {
            return bad("bench grid, batch, repetitions and threads must be nonempty and positive".into());
        }
        let v = &self.verify;
        if v.causality_trials == 0 || v.gradient_seeds == 0 || v.cost_model_specs == 0 {
            return bad("verify trial counts must be positive".into());
        }
        for spec in self.cost_curves.variants.iter().chain(&b.variants).chain(&self.roofline.variants) {
            spec.validate().map_err(|e| CliError::Config(format!("{}: {e}", spec.label())))?;
        }
        self.roofline.hardware.resolve()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = RunConfig::from_json(r#"{"schema_version": 1}"#).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.cost_curves.seq_grid, vec![512, 1024, 2048, 4096, 8192, 16384]);
    }

    #[test]
    fn default_round_trips() {
        let text = serde_json::to_string(&RunConfig::default()).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), RunConfig::default());
    }

    #[test]
    fn rejects_unknown_fields_and_bad_values() {
        for text in [
            r#"{"schema_version": 1, "colour": 3}"#,
            r#"{"schema_version": 1, "bench": {"reps": 3}}"#,
            r#"{"schema_version": 2}"#,
            r#"{"schema_version": 1, "seeds": []}"#,
            r#"{"schema_version": 1, "cost_curves": {"seq_grid": [0]}}"#,
            r#"{"schema_version": 1, "roofline": {"hardware": "tpu"}}"#,
            r#"{"schema_version": 1, "bench": {"variants": [{"variant": "mha", "embed_dim": 10, "heads": 4}]}}"#,
        ] {
            let err = RunConfig::from_json(text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
    }

    #[test]
    fn shipped_default_config_matches_builtin() {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.json");
        if std::env::var_os("WRITE_DEFAULT_CONFIG").is_some() {
            std::fs::write(path, serde_json::to_string_pretty(&RunConfig::default()).unwrap() + "\n").unwrap();
        }
        assert_eq!(RunConfig::load(Path::new(path)).unwrap(), RunConfig::default());
    }

    #[test]
    fn custom_hardware() {
        let cfg = RunConfig::from_json(
            r#"{"schema_version": 1, "roofline": {"hardware": {"peak_flops_per_s": 8.0, "mem_bandwidth_bytes_per_s": 1.0}}}"#,
        )
        .unwrap();
        assert_eq!(cfg.roofline.hardware.resolve().unwrap().ridge(), 8.0);
    }
}
