//! Verification suites run by `revformer verify`.

use std::path::Path;

use serde::Serialize;

use crate::analytics::{self, measure_live_memory, measure_step};
use crate::config::{Precision, RunConfig};
use crate::error::Result;
use crate::gradcheck;
use crate::kernels::Grid;
use crate::model::RevNet;
use crate::mvit::reduction_pair;
use crate::nn::Module;
use crate::rev::{self, Schedule, Segment, StepContext, StreamGrads, TwoStreamState};
use crate::rng;
use crate::tensor::{max_abs_diff, rel_err, Scalar, Tensor};
use crate::vit::vit_block;
use crate::zoo::ModelConfig;

pub const REPORT_FILE: &str = "verify.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
}

/// One check. `value` is the measured error or ratio, `threshold` the bound
/// it was held to.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub case: String,
    pub status: Status,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl Check {
    fn new(
        suite: &'static str,
        case: impl Into<String>,
        ok: bool,
        value: f64,
        threshold: f64,
        detail: impl Into<String>,
    ) -> Self {
        Self {
            suite,
            case: case.into(),
            status: if ok { Status::Pass } else { Status::Fail },
            value,
            threshold,
            detail: detail.into(),
        }
    }

    /// Passes when `value < threshold`; NaN fails.
    fn below(suite: &'static str, case: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self::new(suite, case, value < threshold, value, threshold, "")
    }

    fn passed(&self) -> bool {
        self.status == Status::Pass
    }
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for c in &self.checks {
            w.serialize(c)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Overall status and check count per suite, in run order.
    pub fn summary(&self) -> Vec<(&'static str, Status, usize)> {
        let mut out: Vec<(&'static str, Status, usize)> = Vec::new();
        for c in &self.checks {
            match out.iter_mut().find(|(s, _, _)| *s == c.suite) {
                Some(e) => {
                    e.2 += 1;
                    if !c.passed() {
                        e.1 = Status::Fail;
                    }
                }
                None => out.push((c.suite, c.status, 1)),
            }
        }
        out
    }
}

fn random_batch<T: Scalar>(
    model: &ModelConfig,
    batch: usize,
    seed: u64,
) -> (Tensor<T>, Vec<usize>) {
    let s = model.image_size();
    let mut r = rng::rng_from(seed);
    let images = rng::normal::<T>(&[batch, s, s, model.in_chans()], 1.0, &mut r);
    (
        images,
        (0..batch).map(|i| i % model.num_classes()).collect(),
    )
}

/// Max abs error of `inverse(forward(x))` over a Rev-ViT block stack with
/// drop-path active.
pub fn vit_stack_inversion_error<T: Scalar>(
    width: usize,
    depth: usize,
    tokens: usize,
    seed: u64,
) -> Result<f64> {
    let mut r = rng::rng_from(seed);
    let heads = (width / 64).max(1);
    let blocks = (0..depth)
        .map(|i| vit_block::<T>(i, width, heads, 4 * width, 0.1, &mut r))
        .collect::<Result<Vec<_>>>()?;
    let segs = vec![Segment::Reversible(blocks)];
    let i1 = rng::normal::<T>(&[2, tokens, width], 1.0, &mut r);
    let i2 = rng::normal::<T>(&[2, tokens, width], 1.0, &mut r);
    let start = TwoStreamState::new(i1.clone(), i2.clone())?;
    let pass = rev::stack_forward(
        &segs,
        start,
        &StepContext::train(seed, 0),
        Schedule::Reversible,
    )?;
    let back = rev::stack_inverse(&segs, pass.state)?;
    Ok(max_abs_diff(&back.i1, &i1).max(max_abs_diff(&back.i2, &i2)))
}

/// Max abs error reconstructing the input of every reversible segment of a
/// full model from that segment's output.
pub fn model_inversion_error<T: Scalar>(
    net: &RevNet<T>,
    images: &Tensor<T>,
    ctx: &StepContext,
) -> Result<f64> {
    let mut state = TwoStreamState::initiate(net.stem.forward(images, None)?);
    let mut worst = 0.0f64;
    for seg in &net.segments {
        let seg = std::slice::from_ref(seg);
        let (i1, i2) = (state.i1.clone(), state.i2.clone());
        let out = rev::stack_forward(seg, state, ctx, Schedule::Reversible)?.state;
        if let Segment::Reversible(_) = seg[0] {
            let back = rev::stack_inverse(seg, out.clone())?;
            worst = worst
                .max(max_abs_diff(&back.i1, &i1))
                .max(max_abs_diff(&back.i2, &i2));
        }
        state = out;
    }
    Ok(worst)
}

fn invertibility(cfg: &RunConfig) -> Result<Vec<Check>> {
    let v = &cfg.verify;
    let mut out = Vec::new();
    for &p in &v.precisions {
        let tol = match p {
            Precision::F64 => v.invert_tol_f64,
            Precision::F32 => v.invert_tol_f32,
        };
        let tag = format!("{p:?}").to_lowercase();
        for &w in &v.invert_widths {
            for &d in &v.invert_depths {
                let e = match p {
                    Precision::F64 => vit_stack_inversion_error::<f64>(w, d, 8, cfg.seed)?,
                    Precision::F32 => vit_stack_inversion_error::<f32>(w, d, 8, cfg.seed)?,
                };
                out.push(Check::below(
                    "invertibility",
                    format!("{tag} vit_blocks d={w} D={d}"),
                    e,
                    tol,
                ));
            }
        }
        let ctx = StepContext::train(cfg.seed, 0);
        let e = match p {
            Precision::F64 => {
                let net = cfg.model.build::<f64>(cfg.seed)?;
                model_inversion_error(&net, &random_batch(&cfg.model, v.batch, cfg.seed).0, &ctx)?
            }
            Precision::F32 => {
                let net = cfg.model.build::<f32>(cfg.seed)?;
                model_inversion_error(&net, &random_batch(&cfg.model, v.batch, cfg.seed).0, &ctx)?
            }
        };
        out.push(Check::below(
            "invertibility",
            format!("{tag} model {}", cfg.model.arch()),
            e,
            tol,
        ));
    }
    Ok(out)
}

fn with_drop_path(model: &ModelConfig, rate: f64) -> ModelConfig {
    let mut m = model.clone();
    match &mut m {
        ModelConfig::RevVit(c) | ModelConfig::CachedVit(c) => c.drop_path_rate = rate,
        ModelConfig::RevMvit(c) => c.drop_path_rate = rate,
    }
    m
}

/// Gradients below this fraction of the largest gradient anywhere are
/// treated as analytically zero (e.g. key biases under softmax) and measured
/// on that global scale instead of their own rounding noise.
pub const ZERO_GRAD_FLOOR: f64 = 1e-8;

/// Worst per-tensor max-norm relative error between two named gradient sets,
/// each tensor's scale floored at `ZERO_GRAD_FLOOR` of the global scale.
pub fn param_grad_error<T: Scalar>(a: &[(String, Tensor<T>)], b: &[(String, Tensor<T>)]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient sets differ in length");
    let global = a
        .iter()
        .chain(b)
        .fold(0.0f64, |m, (_, t)| m.max(t.max_abs().as_f64()));
    let floor = ZERO_GRAD_FLOOR * global;
    a.iter()
        .zip(b)
        .map(|((na, x), (nb, y))| {
            assert_eq!(na, nb, "gradient names differ");
            let scale = x.max_abs().as_f64().max(y.max_abs().as_f64()).max(floor);
            if scale == 0.0 {
                0.0
            } else {
                max_abs_diff(x, y) / scale
            }
        })
        .fold(0.0, f64::max)
}

/// Worst relative error between reversible and cached parameter gradients of
/// a full training step, and between their stream-input gradients.
pub fn gradient_equivalence_error(
    model: &ModelConfig,
    batch: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let (images, labels) = random_batch::<f64>(model, batch, seed);
    let ctx = StepContext::train(seed, 1);
    let mut a = model.build::<f64>(seed)?;
    let mut b = model.build::<f64>(seed)?;
    a.zero_grad();
    b.zero_grad();
    a.backprop(&images, &labels, &ctx, Schedule::Reversible)?;
    b.backprop(&images, &labels, &ctx, Schedule::Cached)?;
    let params = param_grad_error(&a.named_grads(), &b.named_grads());

    let tokens = a.stem.forward(&images, None)?;
    let mut r = rng::rng_from(seed ^ 0x5eed);
    let run = |net: &mut RevNet<f64>,
               schedule,
               r: &mut rand_chacha::ChaCha8Rng|
     -> Result<StreamGrads<f64>> {
        let pass = rev::stack_forward(
            &net.segments,
            TwoStreamState::initiate(tokens.clone()),
            &ctx,
            schedule,
        )?;
        let shape = pass.state.i1.shape().to_vec();
        let g = StreamGrads {
            d1: rng::normal(&shape, 1.0, r),
            d2: rng::normal(&shape, 1.0, r),
        };
        Ok(rev::stack_backward(&mut net.segments, pass, g)?.1)
    };
    let ga = run(&mut a, Schedule::Reversible, &mut r.clone())?;
    let gb = run(&mut b, Schedule::Cached, &mut r)?;
    let inputs = rel_err(&ga.d1, &gb.d1).max(rel_err(&ga.d2, &gb.d2));
    Ok((params, inputs))
}

fn gradient_equivalence(cfg: &RunConfig) -> Result<Vec<Check>> {
    let v = &cfg.verify;
    let mut out = Vec::new();
    for rate in [0.0, v.drop_path_rate] {
        let model = with_drop_path(&cfg.model, rate);
        let (p, i) = gradient_equivalence_error(&model, v.batch, cfg.seed)?;
        out.push(Check::below(
            "gradient_equivalence",
            format!("params drop_path={rate}"),
            p,
            v.grad_tol,
        ));
        out.push(Check::below(
            "gradient_equivalence",
            format!("inputs drop_path={rate}"),
            i,
            v.grad_tol,
        ));
    }
    Ok(out)
}

fn finite_difference(cfg: &RunConfig) -> Result<Vec<Check>> {
    let v = &cfg.verify;
    Ok(gradcheck::run_audit(cfg.seed, v.corrupt_kernel.as_deref())?
        .into_iter()
        .map(|k| {
            let ok = k.max_rel_err < v.fd_tol;
            let detail = if ok {
                String::new()
            } else {
                format!("VJP of {} disagrees with central differences", k.name)
            };
            Check::new(
                "finite_difference",
                k.name,
                ok,
                k.max_rel_err,
                v.fd_tol,
                detail,
            )
        })
        .collect())
}

fn shapes(cfg: &RunConfig) -> Result<Vec<Check>> {
    let m = &cfg.model;
    let b = cfg.verify.batch;
    let net = m.build::<f32>(cfg.seed)?;
    let (images, _) = random_batch::<f32>(m, b, cfg.seed);
    let logits = net.forward(&images, &StepContext::eval())?;
    let want = [b, m.num_classes()];
    let mut out = vec![Check::new(
        "shape",
        "logits",
        logits.shape() == want,
        0.0,
        0.0,
        format!("{:?} vs {:?}", logits.shape(), want),
    )];
    let analytic = analytics::count_params(m)?;
    let built = net.param_count() as u64;
    out.push(Check::new(
        "shape",
        "param_count",
        analytic == built,
        built as f64,
        analytic as f64,
        "built vs analytic",
    ));
    let tokens = net.stem.forward(&images, None)?;
    let pass = rev::stack_forward(
        &net.segments,
        TwoStreamState::initiate(tokens),
        &StepContext::train(cfg.seed, 0),
        Schedule::Reversible,
    )?;
    let want = 2 * net.num_transitions();
    out.push(Check::new(
        "shape",
        "retained_after_forward",
        pass.retained_tensors() == want && pass.state.seeds.len() == net.num_blocks(),
        pass.retained_tensors() as f64,
        want as f64,
        format!("{} seed records", pass.state.seeds.len()),
    ));
    Ok(out)
}

/// Least-squares R² of `y` against `x`.
pub fn r_squared(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if syy == 0.0 || sxx == 0.0 {
        return 0.0;
    }
    sxy * sxy / (sxx * syy)
}

/// Peak activation bytes of one training step, per depth and schedule.
#[derive(Debug, Clone)]
pub struct MemoryPoint {
    pub depth: usize,
    pub schedule: Schedule,
    pub measured: usize,
    pub estimated: u64,
}

pub fn memory_sweep(
    model: &ModelConfig,
    depths: &[usize],
    dim: usize,
    batch: usize,
    seed: u64,
) -> Result<Vec<MemoryPoint>> {
    let mut out = Vec::new();
    for &depth in depths {
        let m = model.resized(depth, dim)?;
        let mut net = m.build::<f32>(seed)?;
        let (images, labels) = random_batch::<f32>(&m, batch, seed);
        for schedule in [Schedule::Reversible, Schedule::Cached] {
            let (_, meas) = measure_step(
                &mut net,
                &images,
                &labels,
                &StepContext::train(seed, 0),
                schedule,
            )?;
            out.push(MemoryPoint {
                depth,
                schedule,
                measured: meas.peak_bytes,
                estimated: analytics::estimate_activation_memory(&m, schedule, batch, 4)?,
            });
        }
    }
    Ok(out)
}

fn memory_trend(cfg: &RunConfig) -> Result<Vec<Check>> {
    let v = &cfg.verify;
    let pts = memory_sweep(
        &cfg.model,
        &v.memory_depths,
        v.memory_dim,
        v.batch,
        cfg.seed,
    )?;
    let series = |s: Schedule| pts.iter().filter(|p| p.schedule == s).collect::<Vec<_>>();
    let (rev, cached) = (series(Schedule::Reversible), series(Schedule::Cached));
    let ratio =
        |xs: &[&MemoryPoint]| xs.last().expect("depths").measured as f64 / xs[0].measured as f64;
    let (lo, hi) = (v.memory_depths[0], *v.memory_depths.last().expect("depths"));
    let mut out = vec![
        Check::below(
            "memory_trend",
            format!("reversible peak D={hi}/D={lo}"),
            ratio(&rev),
            v.memory_flat_ratio,
        ),
        {
            let r = ratio(&cached);
            Check::new(
                "memory_trend",
                format!("cached peak D={hi}/D={lo}"),
                r > v.memory_cached_ratio,
                r,
                v.memory_cached_ratio,
                "must exceed threshold",
            )
        },
    ];
    let xs: Vec<f64> = cached.iter().map(|p| p.depth as f64).collect();
    let ys: Vec<f64> = cached.iter().map(|p| p.estimated as f64).collect();
    let r2 = r_squared(&xs, &ys);
    out.push(Check::new(
        "memory_trend",
        "cached estimate linear in depth (R^2)",
        r2 > 0.99,
        r2,
        0.99,
        "must exceed threshold",
    ));
    for p in &pts {
        let gap = (p.measured as f64 - p.estimated as f64) / p.measured as f64;
        out.push(Check::new(
            "memory_trend",
            format!("estimate vs meter {} D={}", p.schedule, p.depth),
            (0.0..=v.estimate_tolerance).contains(&gap),
            gap,
            v.estimate_tolerance,
            format!("estimated {} measured {}", p.estimated, p.measured),
        ));
    }
    Ok(out)
}

/// Counter and MAC evidence that reversible backward recomputes each
/// sub-block exactly once.
#[derive(Debug, Clone)]
pub struct RecomputeEvidence {
    pub forward_calls: (u64, u64),
    pub train_calls: (u64, u64),
    pub extra_macs: u64,
    /// Forward MACs of the reversible blocks for this batch.
    pub block_forward_macs: u64,
    /// Forward MACs of everything recomputed: blocks and checkpointed transitions.
    pub recompute_macs: u64,
}

pub fn recompute_evidence(
    model: &ModelConfig,
    batch: usize,
    seed: u64,
) -> Result<RecomputeEvidence> {
    let mut net = model.build::<f32>(seed)?;
    let (images, labels) = random_batch::<f32>(model, batch, seed);
    net.reset_calls();
    let _ = measure_live_memory(|| net.forward(&images, &StepContext::eval()));
    let forward_calls = net.calls();
    net.reset_calls();
    let ctx = StepContext::train(seed, 0);
    let (_, rev) = measure_step(&mut net, &images, &labels, &ctx, Schedule::Reversible)?;
    let train_calls = net.calls();
    let (_, cached) = measure_step(&mut net, &images, &labels, &ctx, Schedule::Cached)?;
    let b = analytics::breakdown(model)?;
    let n = batch as u64;
    Ok(RecomputeEvidence {
        forward_calls,
        train_calls,
        extra_macs: rev.macs - cached.macs,
        block_forward_macs: n * b.blocks().map(|u| u.f.macs + u.g.macs).sum::<u64>(),
        recompute_macs: n * analytics::cost_report(model, 4)?.recompute_flops,
    })
}

fn recompute(cfg: &RunConfig) -> Result<Vec<Check>> {
    let e = recompute_evidence(&cfg.model, cfg.verify.batch, cfg.seed)?;
    let (f, g) = e.forward_calls;
    let calls_ok = e.train_calls == (2 * f, 2 * g) && f > 0;
    let rel = (e.extra_macs as f64 - e.recompute_macs as f64).abs() / e.recompute_macs as f64;
    Ok(vec![
        Check::new(
            "recompute",
            "sub-block calls per step",
            calls_ok,
            (e.train_calls.0 + e.train_calls.1) as f64 / (f + g).max(1) as f64,
            2.0,
            format!(
                "forward {:?}, training step {:?}",
                e.forward_calls, e.train_calls
            ),
        ),
        Check::new(
            "recompute",
            "extra backward MACs",
            rel <= 0.05,
            rel,
            0.05,
            format!(
                "extra {} vs recomputed forward {} (blocks alone {})",
                e.extra_macs, e.recompute_macs, e.block_forward_macs
            ),
        ),
    ])
}

/// Relative output error between a stage-preserving block with identity
/// pooling and the Rev-ViT block sharing its weights.
pub fn reduction_error(grid: Grid, dim: usize, heads: usize, seed: u64) -> Result<f64> {
    let (m, v) = reduction_pair::<f64>(grid, dim, heads, seed)?;
    let mut r = rng::rng_from(seed ^ 1);
    let shape = [2, grid.tokens(), dim];
    let i1 = rng::normal::<f64>(&shape, 1.0, &mut r);
    let i2 = rng::normal::<f64>(&shape, 1.0, &mut r);
    let ctx = StepContext::eval();
    let a = rev::rev_forward(&m, TwoStreamState::new(i1.clone(), i2.clone())?, &ctx)?;
    let b = rev::rev_forward(&v, TwoStreamState::new(i1, i2)?, &ctx)?;
    Ok(rel_err(&a.i1, &b.i1).max(rel_err(&a.i2, &b.i2)))
}

fn reduction(cfg: &RunConfig) -> Result<Vec<Check>> {
    let e = reduction_error(Grid::square(4), 16, 2, cfg.seed)?;
    Ok(vec![Check::below(
        "reduction",
        "identity-pool mvit block vs vit block",
        e,
        1e-12,
    )])
}

pub type Suite = fn(&RunConfig) -> Result<Vec<Check>>;

pub const SUITES: &[(&str, Suite)] = &[
    ("invertibility", invertibility),
    ("gradient_equivalence", gradient_equivalence),
    ("finite_difference", finite_difference),
    ("shape", shapes),
    ("memory_trend", memory_trend),
    ("recompute", recompute),
    ("reduction", reduction),
];

/// Runs every suite. A suite that errors is recorded as a failing check.
pub fn run_suites(cfg: &RunConfig) -> VerifyReport {
    let mut checks = Vec::new();
    for (name, suite) in SUITES {
        match suite(cfg) {
            Ok(c) => checks.extend(c),
            Err(e) => checks.push(Check::new(
                name_static(name),
                "error",
                false,
                f64::NAN,
                f64::NAN,
                e.to_string(),
            )),
        }
    }
    VerifyReport { checks }
}

fn name_static(name: &str) -> &'static str {
    SUITES
        .iter()
        .map(|(n, _)| *n)
        .find(|n| *n == name)
        .unwrap_or("unknown")
}

/// Runs all suites and writes the report to `out` when given.
pub fn cmd_verify(cfg: &RunConfig, out: Option<&Path>) -> Result<VerifyReport> {
    cfg.validate()?;
    let report = run_suites(cfg);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        report.write_csv(&dir.join(REPORT_FILE))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::from_preset("rev_vit_tiny").unwrap();
        c.verify.invert_widths = vec![16];
        c.verify.invert_depths = vec![2];
        c.verify.memory_depths = vec![1, 2];
        c.verify.memory_dim = 16;
        c
    }

    #[test]
    fn r_squared_of_a_line() {
        assert!((r_squared(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
        assert!(r_squared(&[1.0, 2.0, 3.0], &[1.0, 3.0, 1.0]) < 0.5);
    }

    #[test]
    fn core_suites_pass_on_tiny_vit() {
        let cfg = tiny();
        for suite in [
            invertibility as Suite,
            gradient_equivalence,
            shapes,
            recompute,
            reduction,
        ] {
            for c in suite(&cfg).unwrap() {
                assert!(c.passed(), "{c:?}");
            }
        }
    }

    #[test]
    fn zero_gradients_are_judged_on_the_global_scale() {
        let t = |v: &[f64]| Tensor::<f64>::from_f64(&[v.len()], v).unwrap();
        let a = vec![
            ("w".to_string(), t(&[1.0, -2.0])),
            ("k.bias".to_string(), t(&[1e-20, 0.0])),
        ];
        let b = vec![
            ("w".to_string(), t(&[1.0, -2.0])),
            ("k.bias".to_string(), t(&[-3e-20, 0.0])),
        ];
        assert!(param_grad_error(&a, &b) < 1e-11);
        let c = vec![
            ("w".to_string(), t(&[1.0, -2.001])),
            ("k.bias".to_string(), t(&[1e-20, 0.0])),
        ];
        assert!(param_grad_error(&a, &c) > 1e-4);
    }

    #[test]
    fn mvit_gradients_match_with_drop_path() {
        let m = with_drop_path(&crate::zoo::preset("rev_mvit_tiny").unwrap(), 0.3);
        let (p, i) = gradient_equivalence_error(&m, 2, 4).unwrap();
        assert!(p < 1e-9 && i < 1e-9, "{p} {i}");
    }

    #[test]
    fn corrupt_kernel_is_named() {
        let mut cfg = tiny();
        cfg.verify.corrupt_kernel = Some("gelu".into());
        let checks = finite_difference(&cfg).unwrap();
        let failed: Vec<_> = checks.iter().filter(|c| !c.passed()).collect();
        assert_eq!(failed.len(), 1);
        assert_eq!(failed[0].case, "gelu");
        assert!(failed[0].detail.contains("gelu"));
    }

    #[test]
    fn summary_groups_by_suite() {
        let r = VerifyReport {
            checks: vec![
                Check::below("a", "x", 0.0, 1.0),
                Check::below("a", "y", 2.0, 1.0),
                Check::below("b", "z", 0.0, 1.0),
            ],
        };
        assert_eq!(
            r.summary(),
            vec![("a", Status::Fail, 2), ("b", Status::Pass, 1)]
        );
        assert!(!r.passed());
    }
}
