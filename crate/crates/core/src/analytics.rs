//! Analytic parameter, MAC and activation-memory accounting.
//!
//! Costs are derived from a [`ModelConfig`] alone, so full-size models are
//! never instantiated. Tape sizes mirror exactly what each layer saves for its
//! backward pass; tests cross-check every figure against built tiny models and
//! the allocation meter.
//!
//! Conventions: one FLOP is one multiply-accumulate; LayerNorm, softmax, GELU
//! and elementwise work are not counted; memory counts activation tensors only.

use std::ops::{Add, AddAssign, Mul};

use serde::Serialize;

use crate::error::Result;
use crate::kernels::Grid;
use crate::meter::PeakProbe;
use crate::model::Termination;
use crate::model::{RevNet, StepStats};
use crate::mvit::{FusionStrategy, FusionVariant, MViTConfig};
use crate::nn::Module;
use crate::rev::{Schedule, SeedRecord, StepContext};
use crate::tensor::{Scalar, Tensor};
use crate::vit::ViTConfig;
use crate::zoo::ModelConfig;

/// Per-sample cost of a component.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct Cost {
    pub params: u64,
    pub macs: u64,
    /// Scalars saved for backward.
    pub tape: u64,
    /// Widest transient gradient buffer during backward. Combines by max.
    pub work: u64,
}

impl Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost {
            params: self.params + o.params,
            macs: self.macs + o.macs,
            tape: self.tape + o.tape,
            work: self.work.max(o.work),
        }
    }
}

impl AddAssign for Cost {
    fn add_assign(&mut self, o: Cost) {
        *self = *self + o;
    }
}

impl Mul<u64> for Cost {
    type Output = Cost;
    fn mul(self, k: u64) -> Cost {
        Cost {
            params: self.params * k,
            macs: self.macs * k,
            tape: self.tape * k,
            work: self.work,
        }
    }
}

fn u(x: usize) -> u64 {
    x as u64
}

pub fn linear(n: usize, d_in: usize, d_out: usize) -> Cost {
    Cost {
        params: u(d_in * d_out + d_out),
        macs: u(n * d_in * d_out),
        tape: u(n * d_in),
        work: 0,
    }
}

pub fn layer_norm(n: usize, d: usize) -> Cost {
    Cost {
        params: u(2 * d),
        macs: 0,
        tape: u(n * d + n),
        work: 0,
    }
}

pub fn perceptron(n: usize, d_in: usize, hidden: usize, d_out: usize) -> Cost {
    linear(n, d_in, hidden)
        + linear(n, hidden, d_out)
        + Cost {
            tape: u(n * hidden),
            work: u(n * hidden),
            ..Cost::default()
        }
}

pub fn attention(n: usize, d: usize, heads: usize) -> Cost {
    layer_norm(n, d)
        + linear(n, d, 3 * d)
        + linear(n, d, d)
        + Cost {
            params: 0,
            macs: u(2 * n * n * d),
            tape: u(3 * n * d + heads * n * n),
            work: u((3 * n * d).max(heads * n * n)),
        }
}

pub fn mlp(n: usize, d: usize, hidden: usize) -> Cost {
    layer_norm(n, d) + perceptron(n, d, hidden, d)
}

pub fn pool(n_out: usize, d: usize, kernel: usize, norm: bool) -> Cost {
    let conv = Cost {
        params: u(kernel * kernel * d),
        macs: u(n_out * kernel * kernel * d),
        tape: 0,
        work: 0,
    };
    if norm {
        conv + layer_norm(n_out, d)
    } else {
        conv
    }
}

#[allow(clippy::too_many_arguments)]
pub fn pooling_attention(
    n_in: usize,
    nq: usize,
    nk: usize,
    d_in: usize,
    d_out: usize,
    heads: usize,
    kernel: usize,
    norm: bool,
) -> Cost {
    layer_norm(n_in, d_in)
        + Cost {
            tape: u(n_in * d_in),
            ..Cost::default()
        }
        + pool(nq, d_in, kernel, norm)
        + pool(nk, d_in, kernel, norm) * 2
        + linear(nq, d_in, d_out)
        + linear(nk, d_in, d_out) * 2
        + linear(nq, d_out, d_out)
        + Cost {
            params: 0,
            macs: u(2 * nq * nk * d_out),
            tape: u(nq * d_out + 2 * nk * d_out + heads * nq * nk),
            work: u((nq * d_out + 2 * nk * d_out).max(heads * nq * nk)),
        }
}

pub fn fusion(n: usize, d: usize, strategy: &FusionStrategy) -> Cost {
    let norms = if strategy.norm {
        layer_norm(n, d) * 2
    } else {
        Cost::default()
    };
    let mix = match strategy.variant {
        FusionVariant::Max => Cost {
            tape: u(2 * n * d),
            ..Cost::default()
        },
        FusionVariant::Concat => linear(n, 2 * d, d),
        FusionVariant::Mlp2x | FusionVariant::Mlp4x => {
            perceptron(n, 2 * d, strategy.hidden(d).expect("mlp variant"), d)
        }
    };
    norms + mix
}

pub fn stem(n: usize, kernel: usize, in_chans: usize, d: usize) -> Cost {
    linear(n, kernel * kernel * in_chans, d)
        + Cost {
            params: u(n * d),
            ..Cost::default()
        }
}

pub fn head(n: usize, d: usize, classes: usize, termination: Termination) -> Cost {
    let norms = match termination {
        Termination::NormConcat => layer_norm(n, d) * 2,
        Termination::ConcatNorm => layer_norm(n, 2 * d),
    };
    norms + linear(1, 2 * d, classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitKind {
    /// Reversible block with sub-functions `F` and `G`.
    Block,
    /// Checkpointed stage transition; its whole cost sits in `f`.
    Transition,
}

#[derive(Debug, Clone, Copy)]
pub struct Unit {
    pub kind: UnitKind,
    pub f: Cost,
    pub g: Cost,
    /// Elements of one input stream per sample.
    pub stream_in: u64,
    pub stream_out: u64,
}

/// Component-wise costs in stack order.
#[derive(Debug, Clone)]
pub struct Breakdown {
    pub stem: Cost,
    pub units: Vec<Unit>,
    pub head: Cost,
    /// Elements of one stream reaching the head, per sample.
    pub final_stream: u64,
}

impl Breakdown {
    pub fn total(&self) -> Cost {
        self.units
            .iter()
            .fold(self.stem + self.head, |acc, b| acc + b.f + b.g)
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Unit> {
        self.units.iter().filter(|b| b.kind == UnitKind::Block)
    }
}

fn vit_breakdown(c: &ViTConfig) -> Breakdown {
    let n = c.tokens();
    let d = c.embed_dim;
    let stream = u(n * d);
    let block = Unit {
        kind: UnitKind::Block,
        f: attention(n, d, c.num_heads),
        g: mlp(n, d, c.hidden()),
        stream_in: stream,
        stream_out: stream,
    };
    Breakdown {
        stem: stem(n, c.patch_size, c.in_chans, d),
        units: vec![block; c.depth],
        head: head(n, d, c.num_classes, Termination::NormConcat),
        final_stream: stream,
    }
}

fn mvit_breakdown(c: &MViTConfig) -> Result<Breakdown> {
    let grids = c.stage_grids()?;
    let k = c.pool_kernel;
    let kv = |g: Grid, s: usize| g.pooled((s, s)).tokens();
    let mut units = Vec::new();
    for (s, st) in c.stages.iter().enumerate() {
        let n = grids[s].tokens();
        let d = st.embed_dim;
        if s > 0 {
            let prev = &c.stages[s - 1];
            let n_in = grids[s - 1].tokens();
            let nk = kv(grids[s - 1], st.kv_pool_stride);
            let cost = fusion(n_in, prev.embed_dim, &c.fusion)
                + pooling_attention(n_in, n, nk, prev.embed_dim, d, st.num_heads, k, c.pool_norm)
                + mlp(n, d, st.mlp_ratio * d);
            units.push(Unit {
                kind: UnitKind::Transition,
                f: cost,
                g: Cost::default(),
                stream_in: u(n_in * prev.embed_dim),
                stream_out: u(n * d),
            });
        }
        let nk = kv(grids[s], st.kv_pool_stride);
        let block = Unit {
            kind: UnitKind::Block,
            f: pooling_attention(n, n, nk, d, d, st.num_heads, k, c.pool_norm),
            g: mlp(n, d, st.mlp_ratio * d),
            stream_in: u(n * d),
            stream_out: u(n * d),
        };
        units.extend(std::iter::repeat_n(block, st.depth));
    }
    let last = c.stages.last().expect("validated");
    let n_last = grids.last().expect("validated").tokens();
    let n0 = grids[0].tokens();
    Ok(Breakdown {
        stem: stem(n0, c.stem.kernel, c.in_chans, c.stem.out_chans),
        units,
        head: head(n_last, last.embed_dim, c.num_classes, c.termination),
        final_stream: u(n_last * last.embed_dim),
    })
}

pub fn breakdown(cfg: &ModelConfig) -> Result<Breakdown> {
    cfg.validate()?;
    match cfg {
        ModelConfig::RevVit(c) | ModelConfig::CachedVit(c) => Ok(vit_breakdown(c)),
        ModelConfig::RevMvit(c) => mvit_breakdown(c),
    }
}

pub fn count_params(cfg: &ModelConfig) -> Result<u64> {
    Ok(breakdown(cfg)?.total().params)
}

/// Parameters of a built model.
pub fn count_params_of<T: Scalar>(model: &impl Module<T>) -> u64 {
    model.param_count() as u64
}

/// Forward MACs per sample at the configured input size.
pub fn count_flops(cfg: &ModelConfig) -> Result<u64> {
    Ok(breakdown(cfg)?.total().macs)
}

/// Bytes of seed bookkeeping for `blocks` reversible blocks.
pub fn seed_bytes(blocks: usize) -> u64 {
    u(blocks * std::mem::size_of::<SeedRecord>())
}

/// Activation elements per sample that a backward pass must have available.
///
/// Cached: every tape, the output streams and the last unit's backward buffer.
/// Reversible: stem tape, checkpoint inputs, and the larger of the head-time
/// and the worst single-unit recompute working sets. A unit holds six streams
/// (outputs, cotangents, recomputed branch and reconstructed input) plus one
/// sub-block tape and its backward buffer. A transition holds its output
/// cotangents and their sum beside its recompute tape. The result is a lower
/// bound: parameter-gradient scratch and finer transients are not counted.
pub fn activation_elements(b: &Breakdown, schedule: Schedule) -> u64 {
    match schedule {
        Schedule::Cached => {
            let tapes: u64 = b.units.iter().map(|x| x.f.tape + x.g.tape).sum();
            let last = b.units.last().map_or(0, |x| x.f.work.max(x.g.work));
            b.stem.tape + tapes + b.head.tape + 2 * b.final_stream + last
        }
        Schedule::Reversible => {
            let checkpoints: u64 = b
                .units
                .iter()
                .filter(|x| x.kind == UnitKind::Transition)
                .map(|x| 2 * x.stream_in)
                .sum();
            let at_head = b.head.tape + 2 * b.final_stream;
            let worst_unit = b
                .units
                .iter()
                .map(|x| match x.kind {
                    UnitKind::Block => {
                        6 * x.stream_in + (x.f.tape + x.f.work).max(x.g.tape + x.g.work)
                    }
                    UnitKind::Transition => 3 * x.stream_out + x.f.tape,
                })
                .max()
                .unwrap_or(0);
            b.stem.tape + checkpoints + at_head.max(worst_unit)
        }
    }
}

pub fn estimate_activation_memory(
    cfg: &ModelConfig,
    schedule: Schedule,
    batch: usize,
    element_bytes: usize,
) -> Result<u64> {
    let b = breakdown(cfg)?;
    let per = activation_elements(&b, schedule) * u(element_bytes) * u(batch);
    Ok(match schedule {
        Schedule::Cached => per,
        Schedule::Reversible => per + seed_bytes(b.blocks().count()),
    })
}

/// Cost summary for one model at batch size 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub params: u64,
    /// Forward MACs per sample.
    pub flops: u64,
    /// Activation bytes per sample under cached backprop.
    pub act_mem_cached: u64,
    /// Activation bytes per sample under reversible backprop.
    pub act_mem_reversible: u64,
    /// Extra MACs per sample spent recomputing during backward.
    pub recompute_flops: u64,
}

pub fn cost_report(cfg: &ModelConfig, element_bytes: usize) -> Result<CostReport> {
    let b = breakdown(cfg)?;
    let total = b.total();
    Ok(CostReport {
        params: total.params,
        flops: total.macs,
        act_mem_cached: estimate_activation_memory(cfg, Schedule::Cached, 1, element_bytes)?,
        act_mem_reversible: estimate_activation_memory(
            cfg,
            Schedule::Reversible,
            1,
            element_bytes,
        )?,
        recompute_flops: b.units.iter().map(|x| x.f.macs + x.g.macs).sum(),
    })
}

/// What the allocation meter observed while running a closure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Measurement {
    pub peak_bytes: usize,
    pub retained_bytes: usize,
    pub macs: u64,
}

/// Runs `f` under a fresh peak probe on this thread.
pub fn measure_live_memory<R>(f: impl FnOnce() -> R) -> (R, Measurement) {
    let probe = PeakProbe::start();
    let out = f();
    let m = Measurement {
        peak_bytes: probe.peak_bytes(),
        retained_bytes: probe.retained_bytes(),
        macs: probe.macs(),
    };
    (out, m)
}

/// One training step under the meter. Gradients are zeroed first.
pub fn measure_step<T: Scalar>(
    net: &mut RevNet<T>,
    images: &Tensor<T>,
    labels: &[usize],
    ctx: &StepContext,
    schedule: Schedule,
) -> Result<(StepStats, Measurement)> {
    net.zero_grad();
    let (stats, m) = measure_live_memory(|| net.backprop(images, labels, ctx, schedule));
    Ok((stats?, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::zoo;

    fn batch(cfg: &ModelConfig, b: usize) -> (Tensor<f32>, Vec<usize>) {
        let s = cfg.image_size();
        let mut r = rng::rng_from(7);
        let images = rng::normal::<f32>(&[b, s, s, cfg.in_chans()], 1.0, &mut r);
        (images, (0..b).map(|i| i % cfg.num_classes()).collect())
    }

    #[test]
    fn meter_macs_match_analytic_forward() {
        for name in ["rev_vit_tiny", "rev_mvit_tiny"] {
            let cfg = zoo::preset(name).unwrap();
            let net = cfg.build::<f32>(1).unwrap();
            let (images, _) = batch(&cfg, 2);
            let (_, m) =
                measure_live_memory(|| net.forward(&images, &StepContext::eval()).unwrap());
            assert_eq!(m.macs, 2 * count_flops(&cfg).unwrap(), "{name}");
        }
    }

    #[test]
    fn recompute_macs_match_meter() {
        for name in ["rev_vit_tiny", "rev_mvit_tiny"] {
            let cfg = zoo::preset(name).unwrap();
            let mut net = cfg.build::<f32>(1).unwrap();
            let (images, labels) = batch(&cfg, 2);
            let ctx = StepContext::train(3, 0);
            let (_, rev) =
                measure_step(&mut net, &images, &labels, &ctx, Schedule::Reversible).unwrap();
            let (_, cached) =
                measure_step(&mut net, &images, &labels, &ctx, Schedule::Cached).unwrap();
            let report = cost_report(&cfg, 4).unwrap();
            assert_eq!(rev.macs - cached.macs, 2 * report.recompute_flops, "{name}");
        }
    }

    #[test]
    fn memory_estimates_bound_the_meter() {
        for name in ["rev_vit_tiny", "rev_vit_tiny_train", "rev_mvit_tiny"] {
            let cfg = zoo::preset(name).unwrap();
            let mut net = cfg.build::<f32>(1).unwrap();
            let (images, labels) = batch(&cfg, 4);
            let ctx = StepContext::train(3, 0);
            for schedule in [Schedule::Cached, Schedule::Reversible] {
                let (_, m) = measure_step(&mut net, &images, &labels, &ctx, schedule).unwrap();
                let est = estimate_activation_memory(&cfg, schedule, 4, 4).unwrap() as f64;
                let measured = m.peak_bytes as f64;
                assert!(
                    est <= measured && est >= 0.7 * measured,
                    "{name} {schedule}: {est} vs {measured}"
                );
            }
        }
    }

    #[test]
    fn single_linear() {
        assert_eq!(linear(1, 3, 2).params, 8);
    }

    #[test]
    fn matmul_macs_by_definition() {
        assert_eq!(linear(196, 768, 768).macs, 196 * 768 * 768);
    }

    #[test]
    fn analytic_params_match_built_models() {
        for name in ["rev_vit_tiny", "rev_vit_tiny_train", "rev_mvit_tiny"] {
            let cfg = zoo::preset(name).unwrap();
            let net = cfg.build::<f32>(0).unwrap();
            assert_eq!(count_params(&cfg).unwrap(), count_params_of(&net), "{name}");
        }
    }

    #[test]
    fn cached_estimate_is_linear_in_depth() {
        let at = |depth| {
            let cfg = ModelConfig::RevVit(ViTConfig {
                depth,
                ..zoo::rev_vit_b()
            });
            estimate_activation_memory(&cfg, Schedule::Cached, 1, 4).unwrap() as i64
        };
        assert_eq!(at(8) - at(4), at(12) - at(8));
        assert!(at(8) > at(4));
    }

    #[test]
    fn reversible_estimate_is_flat_in_depth() {
        let at = |depth| {
            let cfg = ModelConfig::RevVit(ViTConfig {
                depth,
                ..zoo::rev_vit_b()
            });
            estimate_activation_memory(&cfg, Schedule::Reversible, 1, 4).unwrap() as f64
        };
        assert!(at(24) / at(12) < 1.05);
    }

    #[test]
    fn deeper_models_save_more() {
        let ratio = |c: ViTConfig| {
            let cfg = ModelConfig::RevVit(c);
            let r = cost_report(&cfg, 4).unwrap();
            r.act_mem_cached as f64 / r.act_mem_reversible as f64
        };
        assert!(ratio(zoo::rev_vit_l()) > ratio(zoo::rev_vit_s()));
    }
}

#[cfg(test)]
mod presets {
    use super::*;
    use crate::zoo;

    #[test]
    #[ignore]
    fn print_presets() {
        for name in zoo::PRESETS {
            let cfg = zoo::preset(name).unwrap();
            let r = cost_report(&cfg, 4).unwrap();
            eprintln!("{name}: {r:?}");
        }
    }
}
