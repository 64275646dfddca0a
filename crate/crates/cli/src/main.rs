use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use latent_attn::commands::{bench, cost_curves, roofline, verify};
use latent_attn::{CliError, CliResult, RunConfig};

#[derive(Parser)]
#[command(name = "latent-attn", version, about = "Compressed convolutional attention: checks, cost curves, roofline, latency")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Base seed; verify uses this and the following seeds, as many as the config lists.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Also write SVG charts (cost-curves).
    #[arg(long, global = true)]
    plot: bool,
    /// Worker threads for bench and the bench-direction check.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run the latency bench in 32-bit floats.
    #[arg(long, global = true)]
    f32: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Run every acceptance check; exit 1 if any fails.
    Verify,
    /// Closed-form params, cache and FLOPs over the S grid as CSV.
    CostCurves,
    /// Median and p90 latencies of prefill and decode as CSV.
    Bench,
    /// Arithmetic intensity and bound per variant.
    Roofline,
}

fn load(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(base) = cli.seed {
        let n = cfg.seeds.len() as u64;
        cfg.seeds = (base..base + n).collect();
    }
    if let Some(t) = cli.threads {
        cfg.bench.threads = t;
    }
    cfg.plot |= cli.plot;
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("output dir {}: {e}", dir.display())))
}

fn run(cli: &Cli) -> CliResult<ExitCode> {
    let cfg = load(cli)?;
    out_dir(&cli.out)?;
    match cli.command {
        Command::Verify => {
            let report = verify::run(&cfg);
            for c in &report.checks {
                println!("{}", c.line());
            }
            let path = cli.out.join("verify.json");
            verify::write_json(&report, &path)?;
            println!("report: {}", path.display());
            if report.passed {
                return Ok(ExitCode::SUCCESS);
            }
            eprintln!("failed checks: {}", report.failed.join(", "));
            Ok(ExitCode::from(1))
        }
        Command::CostCurves => {
            let rows = cost_curves::rows(&cfg.cost_curves)?;
            let path = cli.out.join("cost_curves.csv");
            cost_curves::write_csv(&rows, &path)?;
            println!("{} rows -> {}", rows.len(), path.display());
            if cfg.plot {
                for p in cost_curves::write_plots(&rows, &cli.out)? {
                    println!("plot -> {}", p.display());
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench => {
            let rows = bench::run(&cfg.bench, cfg.seeds[0], cli.f32)?;
            for r in &rows {
                println!("{:<12} S={:<6} {:<18} median {:>12.1}us p90 {:>12.1}us", r.variant, r.s, format!("{:?}", r.mode), r.median_us, r.p90_us);
            }
            let path = cli.out.join("bench.csv");
            bench::write_csv(&rows, &path)?;
            println!("{} rows -> {}", rows.len(), path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Roofline => {
            let hw = cfg.roofline.hardware.resolve()?;
            let report = roofline::report(&cfg.roofline.variants, &hw, cfg.element_bytes)?;
            print!("{}", report.to_text());
            let path = cli.out.join("roofline.json");
            std::fs::write(&path, serde_json::to_string_pretty(&report).map_err(CliError::from)?)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
