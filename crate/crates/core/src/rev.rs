//! Reversible two-stream blocks and the caching-free backward pass.
//!
//! A block maps `(I1, I2)` to
//!
//! ```text
//! O2 = I2 + F(I1)
//! O1 = I1 + G(O2)
//! ```
//!
//! and is inverted by `I1 = O1 − G(O2)`, `I2 = O2 − F(I1)`. The backward pass
//! walks the stack from the top, rebuilding each block's inputs from its
//! outputs while it back-propagates, so no per-block activation survives the
//! forward pass. Non-invertible stage transitions run as checkpoint segments:
//! they keep their input and recompute themselves during backward.
//!
//! A cached reference path (`Schedule::Cached`) runs the same blocks the
//! conventional way, keeping every sub-block tape alive until backward.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Module, Param, Tape};
use crate::rng::{self, Role};
use crate::tensor::{Scalar, Tensor};

/// An equidimensional function usable as `F` or `G` of a reversible block.
///
/// `forward` must be deterministic: the backward pass re-evaluates it and
/// subtracts the result from block outputs.
pub trait SubBlock<T: Scalar>: Module<T> + Send + Sync {
    fn forward(&self, x: &Tensor<T>, tape: Option<&mut Tape<T>>) -> Result<Tensor<T>>;

    /// Consumes the tape written by a `forward` call, accumulates parameter
    /// gradients and returns the input cotangent.
    fn backward(&mut self, tape: &mut Tape<T>, dy: &Tensor<T>) -> Result<Tensor<T>>;

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>>;
}

/// A non-invertible fusion of both streams into one tensor, e.g. a stage
/// transition that changes resolution and width.
pub trait Transition<T: Scalar>: Module<T> + Send + Sync {
    fn index(&self) -> usize;

    fn forward(
        &self,
        i1: &Tensor<T>,
        i2: &Tensor<T>,
        seed: &SeedRecord,
        tape: Option<&mut Tape<T>>,
    ) -> Result<Tensor<T>>;

    /// Returns the cotangents of both input streams.
    fn backward(
        &mut self,
        tape: &mut Tape<T>,
        seed: &SeedRecord,
        dy: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)>;

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>>;
}

/// Identifies one training (or inference) step for RNG keying.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepContext {
    pub seed: u64,
    pub step: u64,
    pub training: bool,
}

impl StepContext {
    pub fn train(seed: u64, step: u64) -> Self {
        Self {
            seed,
            step,
            training: true,
        }
    }

    pub fn eval() -> Self {
        Self {
            seed: 0,
            step: 0,
            training: false,
        }
    }

    pub fn record(&self, block: usize) -> SeedRecord {
        let key = |role| rng::stream_seed(self.seed, self.step, block as u64, role);
        SeedRecord {
            block,
            f: key(Role::Attention),
            g: key(Role::Mlp),
            fusion: key(Role::Fusion),
            training: self.training,
        }
    }
}

/// RNG keys a block used during forward, kept so backward can replay them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub block: usize,
    pub f: u64,
    pub g: u64,
    pub fusion: u64,
    pub training: bool,
}

/// The paired residual streams flowing through a reversible stack.
#[derive(Debug, Clone)]
pub struct TwoStreamState<T: Scalar> {
    pub i1: Tensor<T>,
    pub i2: Tensor<T>,
    pub seeds: Vec<SeedRecord>,
}

impl<T: Scalar> TwoStreamState<T> {
    pub fn new(i1: Tensor<T>, i2: Tensor<T>) -> Result<Self> {
        check_streams(&i1, &i2)?;
        Ok(Self {
            i1,
            i2,
            seeds: Vec::new(),
        })
    }

    /// Both streams start as copies of the same tokens.
    pub fn initiate(tokens: Tensor<T>) -> Self {
        Self {
            i1: tokens.clone(),
            i2: tokens,
            seeds: Vec::new(),
        }
    }

    fn pop_seed(&mut self, block: usize) -> Result<SeedRecord> {
        match self.seeds.pop() {
            Some(rec) if rec.block == block => Ok(rec),
            Some(rec) => Err(Error::Replay {
                block,
                reason: format!("top recorded seed belongs to block {}", rec.block),
            }),
            None => Err(Error::Replay {
                block,
                reason: "no recorded seed".into(),
            }),
        }
    }
}

fn check_streams<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Invariant(format!(
            "stream shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "drop rate must lie in [0, 1), got {rate}"
        )));
    }
    Ok(())
}

/// Per-sample scale factors: `0` for dropped samples, `1/(1 − rate)` for kept ones.
pub fn keep_scales(batch: usize, rate: f64, seed: u64) -> Vec<f64> {
    use rand::Rng;
    let mut r = rng::rng_from(seed);
    let keep = 1.0 / (1.0 - rate);
    (0..batch)
        .map(|_| if r.random::<f64>() >= rate { keep } else { 0.0 })
        .collect()
}

/// Stochastic depth: zeroes whole samples (leading axis) with probability
/// `rate` and rescales the survivors. The mask depends only on `seed`.
pub fn drop_path<T: Scalar>(
    x: &Tensor<T>,
    rate: f64,
    seed: u64,
    training: bool,
) -> Result<Tensor<T>> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let batch = x.shape()[0];
    let per = x.numel() / batch;
    let scales = keep_scales(batch, rate, seed);
    let mut out = x.clone();
    for (chunk, &s) in out.data_mut().chunks_exact_mut(per).zip(&scales) {
        let s = T::of(s);
        chunk.iter_mut().for_each(|v| *v *= s);
    }
    Ok(out)
}

/// Drop-path is linear in `x`, so its VJP applies the same mask.
pub fn drop_path_vjp<T: Scalar>(
    dy: &Tensor<T>,
    rate: f64,
    seed: u64,
    training: bool,
) -> Result<Tensor<T>> {
    drop_path(dy, rate, seed, training)
}

/// Inverted elementwise dropout keyed by `seed`.
pub fn dropout<T: Scalar>(
    x: &Tensor<T>,
    rate: f64,
    seed: u64,
    training: bool,
) -> Result<Tensor<T>> {
    use rand::Rng;
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mut r = rng::rng_from(seed);
    let keep = T::of(1.0 / (1.0 - rate));
    Ok(Tensor::from_fn(x.shape(), |i| {
        if r.random::<f64>() >= rate {
            x.data()[i] * keep
        } else {
            T::zero()
        }
    }))
}

pub fn dropout_vjp<T: Scalar>(
    dy: &Tensor<T>,
    rate: f64,
    seed: u64,
    training: bool,
) -> Result<Tensor<T>> {
    dropout(dy, rate, seed, training)
}

/// A reversible unit with attention-type `f` and MLP-type `g`.
///
/// Neither sub-function has its own skip connection; the residual signal
/// crosses between streams through the coupling above.
pub struct RevBlock<T: Scalar> {
    index: usize,
    pub f: Box<dyn SubBlock<T>>,
    pub g: Box<dyn SubBlock<T>>,
    drop_path_rate: f64,
    f_calls: AtomicU64,
    g_calls: AtomicU64,
}

impl<T: Scalar> RevBlock<T> {
    /// Builds a block and checks that both sub-functions preserve `probe_shape`.
    pub fn new(
        index: usize,
        f: Box<dyn SubBlock<T>>,
        g: Box<dyn SubBlock<T>>,
        drop_path_rate: f64,
        probe_shape: &[usize],
    ) -> Result<Self> {
        check_rate(drop_path_rate)?;
        for (name, sub) in [("F", &f), ("G", &g)] {
            let out = sub.output_shape(probe_shape)?;
            if out != probe_shape {
                return Err(Error::Invariant(format!(
                    "block {index}: {name} is not equidimensional ({probe_shape:?} -> {out:?})"
                )));
            }
        }
        Ok(Self {
            index,
            f,
            g,
            drop_path_rate,
            f_calls: AtomicU64::new(0),
            g_calls: AtomicU64::new(0),
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn drop_path_rate(&self) -> f64 {
        self.drop_path_rate
    }

    /// `(F evaluations, G evaluations)` since construction or the last reset.
    pub fn calls(&self) -> (u64, u64) {
        (
            self.f_calls.load(Ordering::Relaxed),
            self.g_calls.load(Ordering::Relaxed),
        )
    }

    pub fn reset_calls(&self) {
        self.f_calls.store(0, Ordering::Relaxed);
        self.g_calls.store(0, Ordering::Relaxed);
    }

    fn apply_f(
        &self,
        x: &Tensor<T>,
        rec: &SeedRecord,
        tape: Option<&mut Tape<T>>,
    ) -> Result<Tensor<T>> {
        self.f_calls.fetch_add(1, Ordering::Relaxed);
        let y = self.f.forward(x, tape)?;
        self.mask(y, rec.f, rec.training)
    }

    fn apply_g(
        &self,
        x: &Tensor<T>,
        rec: &SeedRecord,
        tape: Option<&mut Tape<T>>,
    ) -> Result<Tensor<T>> {
        self.g_calls.fetch_add(1, Ordering::Relaxed);
        let y = self.g.forward(x, tape)?;
        self.mask(y, rec.g, rec.training)
    }

    fn mask(&self, y: Tensor<T>, seed: u64, training: bool) -> Result<Tensor<T>> {
        if training && self.drop_path_rate > 0.0 {
            drop_path(&y, self.drop_path_rate, seed, training)
        } else {
            Ok(y)
        }
    }

    fn f_backward(
        &mut self,
        tape: &mut Tape<T>,
        rec: &SeedRecord,
        dy: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let dy = drop_path_vjp(dy, self.drop_path_rate, rec.f, rec.training)?;
        self.f.backward(tape, &dy)
    }

    fn g_backward(
        &mut self,
        tape: &mut Tape<T>,
        rec: &SeedRecord,
        dy: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let dy = drop_path_vjp(dy, self.drop_path_rate, rec.g, rec.training)?;
        self.g.backward(tape, &dy)
    }
}

impl<T: Scalar> Module<T> for RevBlock<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.f.visit_params(&join(prefix, "f"), f);
        self.g.visit_params(&join(prefix, "g"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.f.visit_params_mut(&join(prefix, "f"), f);
        self.g.visit_params_mut(&join(prefix, "g"), f);
    }
}

/// `O2 = I2 + F(I1)`, `O1 = I1 + G(O2)`. Records the block's seeds in the state.
pub fn rev_forward<T: Scalar>(
    block: &RevBlock<T>,
    state: TwoStreamState<T>,
    ctx: &StepContext,
) -> Result<TwoStreamState<T>> {
    check_streams(&state.i1, &state.i2)?;
    let rec = ctx.record(block.index);
    let TwoStreamState { i1, i2, mut seeds } = state;
    let f_out = block.apply_f(&i1, &rec, None)?;
    let mut o2 = i2;
    o2.add_assign(&f_out)?;
    drop(f_out);
    let g_out = block.apply_g(&o2, &rec, None)?;
    let mut o1 = i1;
    o1.add_assign(&g_out)?;
    seeds.push(rec);
    Ok(TwoStreamState {
        i1: o1,
        i2: o2,
        seeds,
    })
}

/// `I1 = O1 − G(O2)`, `I2 = O2 − F(I1)`, replaying the recorded seeds.
pub fn rev_inverse<T: Scalar>(
    block: &RevBlock<T>,
    state: TwoStreamState<T>,
) -> Result<TwoStreamState<T>> {
    check_streams(&state.i1, &state.i2)?;
    let TwoStreamState {
        i1: o1,
        i2: o2,
        mut seeds,
    } = state;
    let mut tmp = TwoStreamState {
        i1: Tensor::scalar(T::zero()),
        i2: Tensor::scalar(T::zero()),
        seeds: std::mem::take(&mut seeds),
    };
    let rec = tmp.pop_seed(block.index)?;
    let g_out = block.apply_g(&o2, &rec, None)?;
    let mut i1 = o1;
    i1.sub_assign(&g_out)?;
    drop(g_out);
    let f_out = block.apply_f(&i1, &rec, None)?;
    let mut i2 = o2;
    i2.sub_assign(&f_out)?;
    Ok(TwoStreamState {
        i1,
        i2,
        seeds: tmp.seeds,
    })
}

/// Cotangents flowing into a block's inputs.
#[derive(Debug)]
pub struct StreamGrads<T: Scalar> {
    pub d1: Tensor<T>,
    pub d2: Tensor<T>,
}

/// Reconstructs a block's inputs from its outputs and back-propagates through
/// it in one sweep. Parameter gradients are added to the block's buffers.
///
/// Returns the reconstructed input state and the input cotangents.
pub fn rev_backward<T: Scalar>(
    block: &mut RevBlock<T>,
    state: TwoStreamState<T>,
    grads: StreamGrads<T>,
) -> Result<(TwoStreamState<T>, StreamGrads<T>)> {
    check_streams(&state.i1, &state.i2)?;
    check_streams(&grads.d1, &grads.d2)?;
    let TwoStreamState {
        i1: o1,
        i2: o2,
        seeds,
    } = state;
    let mut state_seeds = TwoStreamState {
        i1: Tensor::scalar(T::zero()),
        i2: Tensor::scalar(T::zero()),
        seeds,
    };
    let rec = state_seeds.pop_seed(block.index)?;
    let StreamGrads { d1: do1, d2: do2 } = grads;

    // G half: rebuild I1 and push dO1 through G.
    let mut tape = Tape::new();
    let g_out = block.apply_g(&o2, &rec, Some(&mut tape))?;
    let mut i1 = o1;
    i1.sub_assign(&g_out)?;
    drop(g_out);
    let dg = block.g_backward(&mut tape, &rec, &do1)?;
    debug_assert!(tape.is_empty());
    let mut do2_total = do2;
    do2_total.add_assign(&dg)?;
    drop(dg);

    // F half: rebuild I2 and push the accumulated dO2 through F.
    let f_out = block.apply_f(&i1, &rec, Some(&mut tape))?;
    let mut i2 = o2;
    i2.sub_assign(&f_out)?;
    drop(f_out);
    let df = block.f_backward(&mut tape, &rec, &do2_total)?;
    let mut di1 = do1;
    di1.add_assign(&df)?;

    if !di1.is_finite() || !do2_total.is_finite() {
        return Err(Error::Numeric { block: block.index });
    }
    Ok((
        TwoStreamState {
            i1,
            i2,
            seeds: state_seeds.seeds,
        },
        StreamGrads {
            d1: di1,
            d2: do2_total,
        },
    ))
}

/// Tapes a cached forward keeps for one block.
#[derive(Debug)]
pub struct BlockTape<T: Scalar> {
    pub f: Tape<T>,
    pub g: Tape<T>,
    pub seed: SeedRecord,
}

/// Conventional forward that keeps every sub-block activation.
pub fn cached_forward<T: Scalar>(
    block: &RevBlock<T>,
    state: TwoStreamState<T>,
    ctx: &StepContext,
) -> Result<(TwoStreamState<T>, BlockTape<T>)> {
    check_streams(&state.i1, &state.i2)?;
    let rec = ctx.record(block.index);
    let TwoStreamState { i1, i2, seeds } = state;
    let mut tf = Tape::new();
    let f_out = block.apply_f(&i1, &rec, Some(&mut tf))?;
    let mut o2 = i2;
    o2.add_assign(&f_out)?;
    drop(f_out);
    let mut tg = Tape::new();
    let g_out = block.apply_g(&o2, &rec, Some(&mut tg))?;
    let mut o1 = i1;
    o1.add_assign(&g_out)?;
    Ok((
        TwoStreamState {
            i1: o1,
            i2: o2,
            seeds,
        },
        BlockTape {
            f: tf,
            g: tg,
            seed: rec,
        },
    ))
}

/// Backward through one block from its cached tapes.
pub fn cached_backward<T: Scalar>(
    block: &mut RevBlock<T>,
    mut tape: BlockTape<T>,
    grads: StreamGrads<T>,
) -> Result<StreamGrads<T>> {
    let StreamGrads { d1: do1, d2: do2 } = grads;
    let dg = block.g_backward(&mut tape.g, &tape.seed, &do1)?;
    let mut do2_total = do2;
    do2_total.add_assign(&dg)?;
    let df = block.f_backward(&mut tape.f, &tape.seed, &do2_total)?;
    let mut di1 = do1;
    di1.add_assign(&df)?;
    if !di1.is_finite() || !do2_total.is_finite() {
        return Err(Error::Numeric { block: block.index });
    }
    Ok(StreamGrads {
        d1: di1,
        d2: do2_total,
    })
}

/// How activations are made available to the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Rebuild activations from block outputs; keep nothing per block.
    Reversible,
    /// Keep every activation from forward (conventional backprop).
    Cached,
}

impl std::fmt::Display for Schedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Schedule::Reversible => "reversible",
            Schedule::Cached => "cached",
        })
    }
}

/// A run of the stack handled uniformly by forward and backward.
pub enum Segment<T: Scalar> {
    Reversible(Vec<RevBlock<T>>),
    Checkpoint(Box<dyn Transition<T>>),
}

impl<T: Scalar> Segment<T> {
    pub fn blocks(&self) -> &[RevBlock<T>] {
        match self {
            Segment::Reversible(blocks) => blocks,
            Segment::Checkpoint(_) => &[],
        }
    }
}

impl<T: Scalar> Module<T> for Segment<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        match self {
            Segment::Reversible(blocks) => {
                for b in blocks {
                    b.visit_params(&join(prefix, &format!("blocks.{}", b.index())), f);
                }
            }
            Segment::Checkpoint(t) => {
                t.visit_params(&join(prefix, &format!("transitions.{}", t.index())), f)
            }
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        match self {
            Segment::Reversible(blocks) => {
                for b in blocks {
                    let name = join(prefix, &format!("blocks.{}", b.index()));
                    b.visit_params_mut(&name, f);
                }
            }
            Segment::Checkpoint(t) => {
                let name = join(prefix, &format!("transitions.{}", t.index()));
                t.visit_params_mut(&name, f)
            }
        }
    }
}

/// What a segment kept alive after forward.
#[derive(Debug)]
pub enum SegmentRecord<T: Scalar> {
    /// Nothing but the seeds already stored in the state.
    Reversible,
    /// The transition's input streams.
    Checkpoint {
        i1: Tensor<T>,
        i2: Tensor<T>,
        seed: SeedRecord,
    },
    CachedBlocks(Vec<BlockTape<T>>),
    CachedTransition {
        tape: Tape<T>,
        seed: SeedRecord,
    },
}

impl<T: Scalar> SegmentRecord<T> {
    pub fn tensors(&self) -> usize {
        match self {
            SegmentRecord::Reversible => 0,
            SegmentRecord::Checkpoint { .. } => 2,
            SegmentRecord::CachedBlocks(tapes) => tapes.iter().map(|t| t.f.len() + t.g.len()).sum(),
            SegmentRecord::CachedTransition { tape, .. } => tape.len(),
        }
    }

    pub fn bytes(&self) -> usize {
        match self {
            SegmentRecord::Reversible => 0,
            SegmentRecord::Checkpoint { i1, i2, .. } => i1.size_bytes() + i2.size_bytes(),
            SegmentRecord::CachedBlocks(tapes) => {
                tapes.iter().map(|t| t.f.bytes() + t.g.bytes()).sum()
            }
            SegmentRecord::CachedTransition { tape, .. } => tape.bytes(),
        }
    }
}

pub fn segment_forward<T: Scalar>(
    seg: &Segment<T>,
    state: TwoStreamState<T>,
    ctx: &StepContext,
    schedule: Schedule,
) -> Result<(TwoStreamState<T>, SegmentRecord<T>)> {
    match (seg, schedule) {
        (Segment::Reversible(blocks), Schedule::Reversible) => {
            let mut state = state;
            for b in blocks {
                state = rev_forward(b, state, ctx)?;
            }
            Ok((state, SegmentRecord::Reversible))
        }
        (Segment::Reversible(blocks), Schedule::Cached) => {
            let mut state = state;
            let mut tapes = Vec::with_capacity(blocks.len());
            for b in blocks {
                let (next, tape) = cached_forward(b, state, ctx)?;
                state = next;
                tapes.push(tape);
            }
            Ok((state, SegmentRecord::CachedBlocks(tapes)))
        }
        (Segment::Checkpoint(t), schedule) => {
            check_streams(&state.i1, &state.i2)?;
            let seed = ctx.record(t.index());
            let TwoStreamState { i1, i2, seeds } = state;
            let (y, record) = match schedule {
                Schedule::Reversible => {
                    let y = t.forward(&i1, &i2, &seed, None)?;
                    (y, SegmentRecord::Checkpoint { i1, i2, seed })
                }
                Schedule::Cached => {
                    let mut tape = Tape::new();
                    let y = t.forward(&i1, &i2, &seed, Some(&mut tape))?;
                    (y, SegmentRecord::CachedTransition { tape, seed })
                }
            };
            let mut out = TwoStreamState::initiate(y);
            out.seeds = seeds;
            Ok((out, record))
        }
    }
}

/// Backward through one segment. `state` is the segment's output state, which
/// reversible and checkpoint records need; cached records ignore it and
/// return `None`.
pub fn segment_backward<T: Scalar>(
    seg: &mut Segment<T>,
    record: SegmentRecord<T>,
    state: Option<TwoStreamState<T>>,
    grads: StreamGrads<T>,
) -> Result<(Option<TwoStreamState<T>>, StreamGrads<T>)> {
    match (seg, record) {
        (Segment::Reversible(blocks), SegmentRecord::Reversible) => {
            let mut state = state.ok_or_else(|| {
                Error::Invariant("reversible backward needs the output state".into())
            })?;
            let mut grads = grads;
            for b in blocks.iter_mut().rev() {
                let (prev, g) = rev_backward(b, state, grads)?;
                state = prev;
                grads = g;
            }
            Ok((Some(state), grads))
        }
        (Segment::Reversible(blocks), SegmentRecord::CachedBlocks(tapes)) => {
            if tapes.len() != blocks.len() {
                return Err(Error::Invariant(
                    "cached tape count does not match block count".into(),
                ));
            }
            let mut grads = grads;
            for (b, tape) in blocks.iter_mut().zip(tapes).rev() {
                grads = cached_backward(b, tape, grads)?;
            }
            Ok((None, grads))
        }
        (Segment::Checkpoint(t), SegmentRecord::Checkpoint { i1, i2, seed }) => {
            let dy = crate::kernels::add(&grads.d1, &grads.d2)?;
            drop(grads);
            let mut tape = Tape::new();
            t.forward(&i1, &i2, &seed, Some(&mut tape))?;
            let (d1, d2) = t.backward(&mut tape, &seed, &dy)?;
            if !d1.is_finite() || !d2.is_finite() {
                return Err(Error::Numeric { block: t.index() });
            }
            let seeds = state.map(|s| s.seeds).unwrap_or_default();
            Ok((
                Some(TwoStreamState { i1, i2, seeds }),
                StreamGrads { d1, d2 },
            ))
        }
        (Segment::Checkpoint(t), SegmentRecord::CachedTransition { mut tape, seed }) => {
            let dy = crate::kernels::add(&grads.d1, &grads.d2)?;
            drop(grads);
            let (d1, d2) = t.backward(&mut tape, &seed, &dy)?;
            if !d1.is_finite() || !d2.is_finite() {
                return Err(Error::Numeric { block: t.index() });
            }
            Ok((None, StreamGrads { d1, d2 }))
        }
        _ => Err(Error::Invariant(
            "segment record does not match segment kind".into(),
        )),
    }
}

/// Output of a stack forward: the final streams plus whatever the schedule
/// kept for backward.
#[derive(Debug)]
pub struct ForwardPass<T: Scalar> {
    pub state: TwoStreamState<T>,
    pub records: Vec<SegmentRecord<T>>,
    pub schedule: Schedule,
}

impl<T: Scalar> ForwardPass<T> {
    /// Activation tensors retained beyond the two output streams.
    pub fn retained_tensors(&self) -> usize {
        self.records.iter().map(SegmentRecord::tensors).sum()
    }

    pub fn retained_bytes(&self) -> usize {
        self.records.iter().map(SegmentRecord::bytes).sum()
    }
}

pub fn stack_forward<T: Scalar>(
    segments: &[Segment<T>],
    state: TwoStreamState<T>,
    ctx: &StepContext,
    schedule: Schedule,
) -> Result<ForwardPass<T>> {
    let mut state = state;
    let mut records = Vec::with_capacity(segments.len());
    for seg in segments {
        let (next, rec) = segment_forward(seg, state, ctx, schedule)?;
        state = next;
        records.push(rec);
    }
    Ok(ForwardPass {
        state,
        records,
        schedule,
    })
}

/// Backward through a whole stack, last segment first.
///
/// Under the reversible schedule the returned state is the stack input
/// rebuilt from the outputs.
pub fn stack_backward<T: Scalar>(
    segments: &mut [Segment<T>],
    pass: ForwardPass<T>,
    grads: StreamGrads<T>,
) -> Result<(Option<TwoStreamState<T>>, StreamGrads<T>)> {
    let ForwardPass {
        state,
        records,
        schedule,
    } = pass;
    if records.len() != segments.len() {
        return Err(Error::Invariant(
            "record count does not match segment count".into(),
        ));
    }
    let mut state = match schedule {
        Schedule::Reversible => Some(state),
        Schedule::Cached => None,
    };
    let mut grads = grads;
    for (seg, rec) in segments.iter_mut().zip(records).rev() {
        let (prev, g) = segment_backward(seg, rec, state, grads)?;
        state = prev;
        grads = g;
    }
    Ok((state, grads))
}

/// Inverts a whole reversible stack from its output state.
pub fn stack_inverse<T: Scalar>(
    segments: &[Segment<T>],
    state: TwoStreamState<T>,
) -> Result<TwoStreamState<T>> {
    let mut state = state;
    for seg in segments.iter().rev() {
        match seg {
            Segment::Reversible(blocks) => {
                for b in blocks.iter().rev() {
                    state = rev_inverse(b, state)?;
                }
            }
            Segment::Checkpoint(t) => {
                return Err(Error::Invariant(format!(
                    "transition {} is not invertible; its input must be cached",
                    t.index()
                )))
            }
        }
    }
    Ok(state)
}

/// Sums `(F calls, G calls)` over every reversible block.
pub fn total_calls<T: Scalar>(segments: &[Segment<T>]) -> (u64, u64) {
    segments
        .iter()
        .flat_map(|s| s.blocks())
        .map(RevBlock::calls)
        .fold((0, 0), |(f, g), (a, b)| (f + a, g + b))
}

pub fn reset_calls<T: Scalar>(segments: &[Segment<T>]) {
    segments
        .iter()
        .flat_map(|s| s.blocks())
        .for_each(RevBlock::reset_calls);
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `y = a·x + c` with learnable scalar `a`.
    struct Affine {
        a: Param<f64>,
        c: f64,
    }

    impl Affine {
        fn boxed(a: f64, c: f64) -> Box<dyn SubBlock<f64>> {
            Box::new(Self {
                a: Param::new(Tensor::scalar(a)),
                c,
            })
        }
    }

    impl Module<f64> for Affine {
        fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<f64>)) {
            f(&join(prefix, "a"), &self.a);
        }
        fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
            f(&join(prefix, "a"), &mut self.a);
        }
    }

    impl SubBlock<f64> for Affine {
        fn forward(&self, x: &Tensor<f64>, tape: Option<&mut Tape<f64>>) -> Result<Tensor<f64>> {
            if let Some(t) = tape {
                t.push(x.clone());
            }
            let a = self.a.value.data()[0];
            Ok(x.map(|v| a * v + self.c))
        }
        fn backward(&mut self, tape: &mut Tape<f64>, dy: &Tensor<f64>) -> Result<Tensor<f64>> {
            let x = tape.pop()?;
            let da: f64 = x.data().iter().zip(dy.data()).map(|(x, g)| x * g).sum();
            self.a.accumulate(&Tensor::scalar(da))?;
            let a = self.a.value.data()[0];
            Ok(dy.map(|g| a * g))
        }
        fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
            Ok(input.to_vec())
        }
    }

    fn s(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    fn block(a: f64, fc: f64, b: f64, gc: f64) -> RevBlock<f64> {
        RevBlock::new(0, Affine::boxed(a, fc), Affine::boxed(b, gc), 0.0, &[1]).unwrap()
    }

    #[test]
    fn scalar_forward_and_inverse() {
        let blk = block(2.0, 0.0, 1.0, 3.0);
        let out = rev_forward(
            &blk,
            TwoStreamState::new(s(1.0), s(5.0)).unwrap(),
            &StepContext::eval(),
        )
        .unwrap();
        assert_eq!((out.i1.data()[0], out.i2.data()[0]), (11.0, 7.0));
        let back = rev_inverse(&blk, out).unwrap();
        assert_eq!((back.i1.data()[0], back.i2.data()[0]), (1.0, 5.0));
        assert!(back.seeds.is_empty());
    }

    #[test]
    fn zero_functions_give_identity() {
        let blk = block(0.0, 0.0, 0.0, 0.0);
        let out = rev_forward(
            &blk,
            TwoStreamState::new(s(-2.5), s(4.0)).unwrap(),
            &StepContext::eval(),
        )
        .unwrap();
        assert_eq!((out.i1.data()[0], out.i2.data()[0]), (-2.5, 4.0));
    }

    #[test]
    fn scalar_backward_by_hand() {
        let mut blk = block(2.0, 0.0, 3.0, 0.0);
        let out = rev_forward(
            &blk,
            TwoStreamState::new(s(1.0), s(5.0)).unwrap(),
            &StepContext::eval(),
        )
        .unwrap();
        let (inp, g) = rev_backward(
            &mut blk,
            out,
            StreamGrads {
                d1: s(1.0),
                d2: s(1.0),
            },
        )
        .unwrap();
        assert_eq!((g.d1.data()[0], g.d2.data()[0]), (9.0, 4.0));
        assert_eq!((inp.i1.data()[0], inp.i2.data()[0]), (1.0, 5.0));
        let mut grads = Vec::new();
        blk.visit_params("", &mut |n, p| {
            grads.push((n.to_string(), p.grad.data()[0]))
        });
        assert_eq!(grads, [("f.a".to_string(), 4.0), ("g.a".to_string(), 7.0)]);
    }

    #[test]
    fn each_function_runs_once_in_inverse_and_twice_per_step() {
        let mut blk = block(0.5, 0.1, -0.3, 0.2);
        let out = rev_forward(
            &blk,
            TwoStreamState::new(s(1.0), s(2.0)).unwrap(),
            &StepContext::eval(),
        )
        .unwrap();
        assert_eq!(blk.calls(), (1, 1));
        let back = rev_inverse(&blk, out.clone()).unwrap();
        assert_eq!(blk.calls(), (2, 2));
        drop(back);
        blk.reset_calls();
        let out = rev_forward(
            &blk,
            TwoStreamState::new(s(1.0), s(2.0)).unwrap(),
            &StepContext::eval(),
        )
        .unwrap();
        rev_backward(
            &mut blk,
            out,
            StreamGrads {
                d1: s(1.0),
                d2: s(1.0),
            },
        )
        .unwrap();
        assert_eq!(blk.calls(), (2, 2));
    }

    #[test]
    fn missing_or_foreign_seed_is_a_replay_error() {
        let blk = block(1.0, 0.0, 1.0, 0.0);
        let st = TwoStreamState::new(s(1.0), s(2.0)).unwrap();
        assert!(matches!(
            rev_inverse(&blk, st),
            Err(Error::Replay { block: 0, .. })
        ));
        let other = RevBlock::new(
            4,
            Affine::boxed(1.0, 0.0),
            Affine::boxed(1.0, 0.0),
            0.0,
            &[1],
        )
        .unwrap();
        let out = rev_forward(
            &other,
            TwoStreamState::new(s(1.0), s(2.0)).unwrap(),
            &StepContext::eval(),
        )
        .unwrap();
        assert!(matches!(
            rev_inverse(&blk, out),
            Err(Error::Replay { block: 0, .. })
        ));
    }

    #[test]
    fn stream_shape_mismatch_is_rejected() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[3, 2]);
        assert!(matches!(
            TwoStreamState::new(a, b),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn non_equidimensional_block_is_rejected() {
        struct Widen;
        impl Module<f64> for Widen {
            fn visit_params(&self, _: &str, _: &mut dyn FnMut(&str, &Param<f64>)) {}
            fn visit_params_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param<f64>)) {}
        }
        impl SubBlock<f64> for Widen {
            fn forward(&self, x: &Tensor<f64>, _: Option<&mut Tape<f64>>) -> Result<Tensor<f64>> {
                Ok(x.clone())
            }
            fn backward(&mut self, _: &mut Tape<f64>, dy: &Tensor<f64>) -> Result<Tensor<f64>> {
                Ok(dy.clone())
            }
            fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
                Ok(vec![input[0], 2 * input[1]])
            }
        }
        let r = RevBlock::new(0, Box::new(Widen), Affine::boxed(1.0, 0.0), 0.0, &[4, 8]);
        assert!(matches!(r, Err(Error::Invariant(_))));
    }

    #[test]
    fn drop_path_contract() {
        let x = Tensor::<f64>::from_fn(&[8, 3], |i| i as f64 + 1.0);
        assert!(drop_path(&x, 0.0, 9, true).unwrap().bit_eq(&x));
        assert!(drop_path(&x, 0.5, 9, false).unwrap().bit_eq(&x));
        let a = drop_path(&x, 0.5, 9, true).unwrap();
        assert!(a.bit_eq(&drop_path(&x, 0.5, 9, true).unwrap()));
        for (row, orig) in a.data().chunks(3).zip(x.data().chunks(3)) {
            let kept = row.iter().zip(orig).all(|(r, o)| *r == 2.0 * o);
            let dropped = row.iter().all(|&r| r == 0.0);
            assert!(kept || dropped);
        }
        assert!(matches!(drop_path(&x, 1.0, 9, true), Err(Error::Config(_))));
        assert!(matches!(
            drop_path(&x, -0.1, 9, true),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn drop_path_is_unbiased() {
        let rate = 0.3;
        let n = 100_000u64;
        let mean = (0..n).map(|s| keep_scales(1, rate, s)[0]).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn empty_segment_is_identity() {
        let segs = vec![Segment::<f64>::Reversible(Vec::new())];
        let st = TwoStreamState::new(s(1.0), s(2.0)).unwrap();
        let pass = stack_forward(&segs, st, &StepContext::eval(), Schedule::Reversible).unwrap();
        assert_eq!(
            (pass.state.i1.data()[0], pass.state.i2.data()[0]),
            (1.0, 2.0)
        );
    }
}
