//! Depth, width and schedule sweeps of training-step throughput and memory.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::Serialize;

use crate::analytics::{self, measure_step};
use crate::config::{Precision, RunConfig};
use crate::error::{Error, Result};
use crate::rev::{Schedule, StepContext};
use crate::rng;
use crate::tensor::Scalar;
use crate::zoo::ModelConfig;

pub const REPORT_FILE: &str = "bench.csv";
pub const THREADS_ENV: &str = "REVFORMER_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub arch: String,
    pub depth: usize,
    pub dim: usize,
    pub schedule: Schedule,
    pub steps_per_s: f64,
    pub peak_act_bytes_measured: u64,
    pub peak_act_bytes_estimated: u64,
    /// Forward MACs per sample.
    pub flops: u64,
    pub params: u64,
}

/// Worker cap from `REVFORMER_THREADS`, else the machine's parallelism.
pub fn thread_cap() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

#[derive(Debug, Clone)]
struct Point {
    model: ModelConfig,
    schedule: Schedule,
}

fn run_point<T: Scalar>(p: &Point, cfg: &RunConfig) -> Result<BenchRow> {
    let b = &cfg.bench;
    let m = &p.model;
    let mut net = m.build::<T>(cfg.seed)?;
    let s = m.image_size();
    let images = rng::normal::<T>(
        &[b.batch, s, s, m.in_chans()],
        1.0,
        &mut rng::rng_from(cfg.seed),
    );
    let labels: Vec<usize> = (0..b.batch).map(|i| i % m.num_classes()).collect();
    for step in 0..b.warmup {
        measure_step(
            &mut net,
            &images,
            &labels,
            &StepContext::train(cfg.seed, step as u64),
            p.schedule,
        )?;
    }
    let mut peak = 0usize;
    let start = Instant::now();
    for step in 0..b.steps {
        let ctx = StepContext::train(cfg.seed, (b.warmup + step) as u64);
        let (_, meas) = measure_step(&mut net, &images, &labels, &ctx, p.schedule)?;
        peak = peak.max(meas.peak_bytes);
    }
    let secs = start.elapsed().as_secs_f64();
    let report = analytics::cost_report(m, std::mem::size_of::<T>())?;
    Ok(BenchRow {
        arch: m.arch().to_string(),
        depth: m.depth(),
        dim: m.dim(),
        schedule: p.schedule,
        steps_per_s: b.steps as f64 / secs.max(f64::MIN_POSITIVE),
        peak_act_bytes_measured: peak as u64,
        peak_act_bytes_estimated: analytics::estimate_activation_memory(
            m,
            p.schedule,
            b.batch,
            std::mem::size_of::<T>(),
        )?,
        flops: report.flops,
        params: report.params,
    })
}

/// Runs the sweep on up to `threads` workers, each point with its own model.
/// Rows come back in sweep order.
pub fn run_sweep(cfg: &RunConfig, threads: usize) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let b = &cfg.bench;
    let dims = if b.dims.is_empty() {
        vec![cfg.model.dim()]
    } else {
        b.dims.clone()
    };
    let mut points = Vec::new();
    for &dim in &dims {
        for &depth in &b.depths {
            let model = cfg.model.resized(depth, dim)?;
            for &schedule in &b.schedules {
                points.push(Point {
                    model: model.clone(),
                    schedule,
                });
            }
        }
    }
    let results: Mutex<Vec<Option<Result<BenchRow>>>> =
        Mutex::new((0..points.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = threads.clamp(1, points.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(p) = points.get(i) else { break };
                let row = match b.precision {
                    Precision::F32 => run_point::<f32>(p, cfg),
                    Precision::F64 => run_point::<f64>(p, cfg),
                };
                results.lock().expect("no worker panicked")[i] = Some(row);
            });
        }
    });
    results
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every point ran"))
        .collect()
}

pub fn write_csv(rows: &[BenchRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_bench(cfg: &RunConfig, out: &Path) -> Result<Vec<BenchRow>> {
    let rows = run_sweep(cfg, thread_cap()?)?;
    std::fs::create_dir_all(out)?;
    write_csv(&rows, &out.join(REPORT_FILE))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut cfg = RunConfig::from_preset("rev_vit_tiny").unwrap();
        cfg.bench.depths = vec![1, 3];
        cfg.bench.dims = vec![16];
        cfg.bench.steps = 1;
        cfg.bench.warmup = 0;
        cfg.bench.batch = 2;
        cfg
    }

    #[test]
    fn sweep_order_and_content() {
        let rows = run_sweep(&small(), 3).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!((rows[0].depth, rows[0].schedule), (1, Schedule::Reversible));
        assert_eq!((rows[3].depth, rows[3].schedule), (3, Schedule::Cached));
        for r in &rows {
            assert_eq!(r.dim, 16);
            assert!(r.steps_per_s > 0.0);
            assert!(r.peak_act_bytes_estimated <= r.peak_act_bytes_measured);
        }
    }

    #[test]
    fn single_thread_matches_memory_of_parallel() {
        let a = run_sweep(&small(), 1).unwrap();
        let b = run_sweep(&small(), 4).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.peak_act_bytes_measured, y.peak_act_bytes_measured);
        }
    }

    #[test]
    fn csv_header_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.csv");
        write_csv(&run_sweep(&small(), 2).unwrap()[..1], &p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "arch,depth,dim,schedule,steps_per_s,peak_act_bytes_measured,peak_act_bytes_estimated,flops,params"
        );
    }
}
