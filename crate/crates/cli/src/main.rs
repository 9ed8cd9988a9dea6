use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use revformer::analytics;
use revformer::bench;
use revformer::config::{Precision, RunConfig};
use revformer::train;
use revformer::verify::{self, Status};
use revformer::zoo;

#[derive(Parser)]
#[command(
    name = "revformer",
    version,
    about = "Reversible transformer training engine"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for reports and checkpoints.
    #[arg(long, default_value = "revformer-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run the verification suites; exits 1 if any check fails.
    Verify(Common),
    /// Train on the synthetic mixture and save a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint; model, data and optimizer come from it.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sweep depth, width and schedule; write bench.csv.
    Bench(Common),
    /// Print the analytic cost report of a preset or configured model.
    Info {
        /// Preset name, used when no --config is given.
        preset: Option<String>,
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> Result<RunConfig> {
    let Some(path) = &common.config else {
        bail!("--config <path> is required");
    };
    let mut cfg = RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn si(v: u64) -> String {
    let v = v as f64;
    match v {
        v if v >= 1e9 => format!("{:.2}G", v / 1e9),
        v if v >= 1e6 => format!("{:.2}M", v / 1e6),
        v if v >= 1e3 => format!("{:.2}K", v / 1e3),
        v => format!("{v}"),
    }
}

fn info(out: &mut impl Write, name: &str, cfg: &RunConfig) -> Result<()> {
    let bytes = match cfg.train.precision {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };
    let r = analytics::cost_report(&cfg.model, bytes)?;
    let mb = |b: u64| b as f64 / (1024.0 * 1024.0);
    writeln!(out, "model            {name} ({})", cfg.model.arch())?;
    writeln!(out, "blocks           {}", cfg.model.depth())?;
    writeln!(out, "params           {} ({})", si(r.params), r.params)?;
    writeln!(
        out,
        "flops            {} MACs/img ({})",
        si(r.flops),
        r.flops
    )?;
    writeln!(out, "act mem cached   {:.2} MB/img", mb(r.act_mem_cached))?;
    writeln!(
        out,
        "act mem rev      {:.2} MB/img",
        mb(r.act_mem_reversible)
    )?;
    writeln!(
        out,
        "memory saving    {:.1}x",
        r.act_mem_cached as f64 / r.act_mem_reversible as f64
    )?;
    writeln!(
        out,
        "recompute        {} MACs/img ({})",
        si(r.recompute_flops),
        r.recompute_flops
    )?;
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::Verify(common) => {
            let cfg = load(&common)?;
            let report = verify::cmd_verify(&cfg, Some(&common.out))?;
            for c in &report.checks {
                let s = if c.status == Status::Pass {
                    "PASS"
                } else {
                    "FAIL"
                };
                writeln!(
                    out,
                    "{s} {:<22} {:<44} value={:.3e} threshold={:.3e} {}",
                    c.suite, c.case, c.value, c.threshold, c.detail
                )?;
            }
            for (suite, status, n) in report.summary() {
                writeln!(out, "suite {suite}: {status:?} ({n} checks)")?;
            }
            writeln!(
                out,
                "report: {}",
                common.out.join(verify::REPORT_FILE).display()
            )?;
            Ok(if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Command::Train { common, resume } => {
            let cfg = load(&common)?;
            let s = train::cmd_train(&cfg, &common.out, resume.as_deref())?;
            writeln!(out, "steps            {}", s.steps)?;
            writeln!(out, "last batch loss  {:.6}", s.final_loss)?;
            writeln!(out, "train loss       {:.6}", s.train_loss)?;
            writeln!(out, "train accuracy   {:.4}", s.train_accuracy)?;
            writeln!(out, "log              {}", s.log.display())?;
            writeln!(out, "checkpoint       {}", s.checkpoint.display())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench(common) => {
            let cfg = load(&common)?;
            let rows = bench::cmd_bench(&cfg, &common.out)?;
            for r in &rows {
                writeln!(
                    out,
                    "{:<10} D={:<3} d={:<4} {:<10} {:>8.2} steps/s  peak {:>10} B (est {:>10} B)",
                    r.arch,
                    r.depth,
                    r.dim,
                    r.schedule.to_string(),
                    r.steps_per_s,
                    r.peak_act_bytes_measured,
                    r.peak_act_bytes_estimated
                )?;
            }
            writeln!(
                out,
                "report: {}",
                common.out.join(bench::REPORT_FILE).display()
            )?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Info { preset, common } => {
            let (name, cfg) = match (&preset, &common.config) {
                (_, Some(_)) => {
                    let cfg = load(&common)?;
                    let name = common
                        .config
                        .as_deref()
                        .map(Path::display)
                        .map(|d| d.to_string())
                        .unwrap_or_default();
                    (name, cfg)
                }
                (Some(p), None) => (p.clone(), RunConfig::from_preset(p)?),
                (None, None) => bail!(
                    "give a preset ({}) or --config <path>",
                    zoo::PRESETS.join(", ")
                ),
            };
            info(&mut out, &name, &cfg)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e)
            if e.downcast_ref::<std::io::Error>()
                .is_some_and(|e| e.kind() == std::io::ErrorKind::BrokenPipe) =>
        {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
