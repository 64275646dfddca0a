//! Wall-clock latencies of prefill and a decode loop at desk scale.

use std::path::Path;
use std::time::{Duration, Instant};

use latent_attn_core::decode::{decode_step, decode_weights, forward, prefill};
use latent_attn_core::ndcore::instrument_flops;
use latent_attn_core::{AttnSpec, NdArray, Real, WeightSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::BenchConfig;
use crate::error::CliResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    PrefillCausal,
    PrefillNoncausal,
    /// `decode_steps` tokens after a prefill of length S.
    Decode,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub variant: String,
    #[serde(rename = "S")]
    pub s: usize,
    pub mode: Mode,
    pub median_us: f64,
    pub p90_us: f64,
    pub flops: u64,
}

/// Timings of one cell plus the FLOP count of a single run.
pub struct Sample {
    pub times: Vec<Duration>,
    pub flops: u64,
}

impl Sample {
    fn quantile_us(&self, q: f64) -> f64 {
        let mut t: Vec<f64> = self.times.iter().map(|d| d.as_secs_f64() * 1e6).collect();
        t.sort_by(f64::total_cmp);
        let idx = ((t.len() - 1) as f64 * q).round() as usize;
        t[idx]
    }

    pub fn median_us(&self) -> f64 {
        self.quantile_us(0.5)
    }

    pub fn p90_us(&self) -> f64 {
        self.quantile_us(0.9)
    }
}

fn timed<T>(warmup: usize, reps: usize, mut f: impl FnMut() -> T) -> Vec<Duration> {
    for _ in 0..warmup {
        std::hint::black_box(f());
    }
    (0..reps)
        .map(|_| {
            let t0 = Instant::now();
            std::hint::black_box(f());
            t0.elapsed()
        })
        .collect()
}

fn fixtures<F: Real>(spec: &AttnSpec, s: usize, batch: usize, seed: u64) -> CliResult<(WeightSet<F>, NdArray<F>)> {
    let w = decode_weights(&WeightSet::init(spec, seed)?)?.cast::<F>();
    let x = NdArray::<f64>::randn(&[s, batch, spec.embed_dim()], 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xbe4c)).cast::<F>();
    Ok((w, x))
}

pub fn time_prefill<F: Real>(spec: &AttnSpec, s: usize, cfg: &BenchConfig, seed: u64, causal: bool) -> CliResult<Sample> {
    let (w, x) = fixtures::<F>(spec, s, cfg.batch, seed)?;
    let (r, flops) = instrument_flops(|| forward(&x, &w, causal));
    r?;
    let times = timed(cfg.warmup, cfg.repetitions, || forward(&x, &w, causal));
    Ok(Sample { times, flops: flops.total() })
}

pub fn time_decode<F: Real>(spec: &AttnSpec, s: usize, cfg: &BenchConfig, seed: u64) -> CliResult<Sample> {
    let (w, x) = fixtures::<F>(spec, s + cfg.decode_steps, cfg.batch, seed)?;
    let prompt = x.slice_axis0(0, s)?;
    let (_, state) = prefill(&prompt, &w)?;
    let tokens: Vec<NdArray<F>> = (s..s + cfg.decode_steps).map(|t| x.slice_axis0(t, 1)).collect::<Result<_, _>>()?;
    let run = || -> latent_attn_core::Result<()> {
        let mut st = state.clone();
        for tok in &tokens {
            decode_step(&mut st, tok, &w)?;
        }
        Ok(())
    };
    let (r, flops) = instrument_flops(run);
    r?;
    let times = timed(cfg.warmup, cfg.repetitions, run);
    Ok(Sample { times, flops: flops.total() })
}

/// Causal prefill of two variants with repetitions interleaved, so slow
/// drift on the machine lands on both samples alike.
pub fn compare_prefill(a: &AttnSpec, b: &AttnSpec, s: usize, cfg: &BenchConfig, seed: u64) -> CliResult<(Sample, Sample)> {
    let (wa, xa) = fixtures::<f64>(a, s, cfg.batch, seed)?;
    let (wb, xb) = fixtures::<f64>(b, s, cfg.batch, seed)?;
    let (ra, fa) = instrument_flops(|| forward(&xa, &wa, true));
    let (rb, fb) = instrument_flops(|| forward(&xb, &wb, true));
    ra?;
    rb?;
    let mut ta = vec![];
    let mut tb = vec![];
    for rep in 0..cfg.warmup + cfg.repetitions {
        let t = timed(0, 1, || forward(&xa, &wa, true))[0];
        let u = timed(0, 1, || forward(&xb, &wb, true))[0];
        if rep >= cfg.warmup {
            ta.push(t);
            tb.push(u);
        }
    }
    Ok((Sample { times: ta, flops: fa.total() }, Sample { times: tb, flops: fb.total() }))
}

fn row(spec: &AttnSpec, s: usize, mode: Mode, sample: Sample) -> BenchRow {
    BenchRow { variant: spec.label(), s, mode, median_us: sample.median_us(), p90_us: sample.p90_us(), flops: sample.flops }
}

fn run_typed<F: Real>(cfg: &BenchConfig, seed: u64) -> CliResult<Vec<BenchRow>> {
    let mut out = vec![];
    for spec in &cfg.variants {
        for &s in &cfg.seq_grid {
            out.push(row(spec, s, Mode::PrefillCausal, time_prefill::<F>(spec, s, cfg, seed, true)?));
            out.push(row(spec, s, Mode::PrefillNoncausal, time_prefill::<F>(spec, s, cfg, seed, false)?));
            out.push(row(spec, s, Mode::Decode, time_decode::<F>(spec, s, cfg, seed)?));
        }
    }
    Ok(out)
}

/// Every (variant, S, mode) cell inside a pool of `cfg.threads` threads.
pub fn run(cfg: &BenchConfig, seed: u64, single_precision: bool) -> CliResult<Vec<BenchRow>> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build()?;
    pool.install(|| if single_precision { run_typed::<f32>(cfg, seed) } else { run_typed::<f64>(cfg, seed) })
}

pub fn write_csv(rows: &[BenchRow], path: &Path) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BenchConfig {
        BenchConfig {
            seq_grid: vec![4, 8],
            variants: vec![AttnSpec::mha(16, 2), AttnSpec::cca(16, 2, 2)],
            warmup: 0,
            repetitions: 3,
            decode_steps: 2,
            ..BenchConfig::default()
        }
    }

    #[test]
    fn schema_and_flop_determinism() {
        let cfg = tiny();
        let a = run(&cfg, 1, false).unwrap();
        let b = run(&cfg, 1, false).unwrap();
        assert_eq!(a.len(), 2 * 2 * 3);
        let flops = |rows: &[BenchRow]| rows.iter().map(|r| r.flops).collect::<Vec<_>>();
        assert_eq!(flops(&a), flops(&b));
        assert!(a.iter().all(|r| r.flops > 0 && r.p90_us >= r.median_us));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.csv");
        write_csv(&a, &path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text.lines().next(), Some("variant,S,mode,median_us,p90_us,flops"));
        assert!(text.contains(",prefill_causal,") && text.contains(",decode,"));
    }

    #[test]
    fn single_precision_runs() {
        let rows = run(&tiny(), 0, true).unwrap();
        assert_eq!(rows.len(), 12);
    }
}
