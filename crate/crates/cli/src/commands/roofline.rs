//! Decode-time arithmetic intensity of each variant against a hardware roofline.

use latent_attn_core::costmodel::{eval_table2, roofline_position, Bound, HardwareSpec};
use latent_attn_core::AttnSpec;
use serde::Serialize;

use crate::error::CliResult;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RooflineRow {
    pub variant: String,
    pub intensity: f64,
    pub ridge: f64,
    pub bound: Bound,
    pub near_ridge: bool,
    /// Cache bytes added per token per sequence.
    pub kv_bytes_per_token: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RooflineReport {
    pub hardware: HardwareSpec,
    pub rows: Vec<RooflineRow>,
}

pub fn report(variants: &[AttnSpec], hw: &HardwareSpec, element_bytes: u64) -> CliResult<RooflineReport> {
    let rows = variants
        .iter()
        .map(|spec| {
            let pos = roofline_position(spec, hw);
            Ok(RooflineRow {
                variant: format!("{} h{}", spec.label(), spec.heads()),
                intensity: pos.intensity,
                ridge: pos.ridge,
                bound: pos.bound,
                near_ridge: pos.near_ridge,
                kv_bytes_per_token: eval_table2(spec, 1, 1)?.kv_elements * element_bytes,
            })
        })
        .collect::<CliResult<_>>()?;
    Ok(RooflineReport { hardware: hw.clone(), rows })
}

impl RooflineReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("{} ridge {:.1} FLOP/B\n", self.hardware.name, self.hardware.ridge());
        s += &format!("{:<18} {:>10} {:>8} {:>6} {:>12}\n", "variant", "intensity", "bound", "near", "kv B/token");
        for r in &self.rows {
            let bound = match r.bound {
                Bound::Memory => "memory",
                Bound::Compute => "compute",
            };
            s += &format!(
                "{:<18} {:>10.1} {:>8} {:>6} {:>12}\n",
                r.variant,
                r.intensity,
                bound,
                if r.near_ridge { "yes" } else { "no" },
                r.kv_bytes_per_token
            );
        }
        s
    }
}
