//! Closed-form cost columns over a sequence-length grid.

use std::path::{Path, PathBuf};

use latent_attn_core::costmodel::eval_table2;
use serde::Serialize;

use crate::config::CostCurvesConfig;
use crate::error::CliResult;
use crate::svg::{LineChart, Series};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CurveRow {
    pub variant: String,
    #[serde(rename = "S")]
    pub s: u64,
    pub params: u64,
    pub kv_elements: u64,
    pub prefill_flops: u64,
    pub decode_flops: u64,
}

pub fn rows(cfg: &CostCurvesConfig) -> CliResult<Vec<CurveRow>> {
    let mut out = Vec::with_capacity(cfg.variants.len() * cfg.seq_grid.len());
    for spec in &cfg.variants {
        for &s in &cfg.seq_grid {
            let r = eval_table2(spec, cfg.batch, s)?;
            out.push(CurveRow {
                variant: r.label,
                s,
                params: r.params,
                kv_elements: r.kv_elements,
                prefill_flops: r.prefill_flops,
                decode_flops: r.decode_flops,
            });
        }
    }
    Ok(out)
}

pub fn write_csv(rows: &[CurveRow], path: &Path) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

type Column = (&'static str, &'static str, fn(&CurveRow) -> u64);

/// One chart per cost column, x = S on a log axis.
pub fn write_plots(rows: &[CurveRow], dir: &Path) -> CliResult<Vec<PathBuf>> {
    let columns: [Column; 4] = [
        ("prefill_flops", "prefill FLOPs", |r| r.prefill_flops),
        ("decode_flops", "decode FLOPs per token", |r| r.decode_flops),
        ("kv_elements", "KV-cache elements", |r| r.kv_elements),
        ("params", "parameters", |r| r.params),
    ];
    let mut labels: Vec<&str> = rows.iter().map(|r| r.variant.as_str()).collect();
    labels.dedup();
    let mut paths = vec![];
    for (file, title, col) in columns {
        let series = labels
            .iter()
            .map(|&l| Series {
                name: l.to_string(),
                points: rows.iter().filter(|r| r.variant == l).map(|r| (r.s as f64, col(r) as f64)).collect(),
            })
            .collect();
        let chart = LineChart { title: title.into(), x_label: "sequence length".into(), y_label: title.into(), series, log_x: true, log_y: true };
        let path = dir.join(format!("cost_{file}.svg"));
        std::fs::write(&path, chart.render())?;
        paths.push(path);
    }
    Ok(paths)
}
