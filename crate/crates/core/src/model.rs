//! Stem, classifier head and the network wrapper shared by Rev-ViT and Rev-MViT.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, Grid, PatchGeometry};
use crate::nn::{join, LayerNorm, Linear, Module, Param, Tape, INIT_STD};
use crate::rev::{self, ForwardPass, Schedule, Segment, StepContext, StreamGrads, TwoStreamState};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

/// Convolutional patch embedding: a dense `k×k` convolution lowered to
/// patches plus a linear map, followed by a learned position table.
#[derive(Debug, Clone)]
pub struct ConvStem<T: Scalar> {
    pub geometry: PatchGeometry,
    pub image_size: usize,
    pub in_chans: usize,
    pub proj: Linear<T>,
    pub pos: Param<T>,
    grid: Grid,
}

impl<T: Scalar> ConvStem<T> {
    pub fn init(
        image_size: usize,
        in_chans: usize,
        dim: usize,
        geometry: PatchGeometry,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let side = geometry.output_side(image_size)?;
        let grid = Grid::square(side);
        let proj = Linear::init(geometry.kernel * geometry.kernel * in_chans, dim, rng);
        let pos = Param::new(rng::trunc_normal(&[grid.tokens(), dim], INIT_STD, rng));
        Ok(Self {
            geometry,
            image_size,
            in_chans,
            proj,
            pos,
            grid,
        })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.proj.d_out()
    }

    /// Images `[B, H, W, C]` to tokens `[B, N, d]`.
    pub fn forward(&self, images: &Tensor<T>, tape: Option<&mut Tape<T>>) -> Result<Tensor<T>> {
        let s = images.shape();
        if s.len() != 4
            || s[1] != self.image_size
            || s[2] != self.image_size
            || s[3] != self.in_chans
        {
            return Err(Error::dim(
                "stem",
                s,
                &[0, self.image_size, self.image_size, self.in_chans],
            ));
        }
        let (cols, _) = kernels::im2col(images, self.geometry)?;
        let t = self.proj.forward(&cols, tape)?;
        kernels::add_broadcast(&t, &self.pos.value)
    }

    /// Accumulates stem parameter gradients. Image gradients are not needed.
    pub fn backward(&mut self, tape: &mut Tape<T>, dtokens: &Tensor<T>) -> Result<()> {
        let dpos = kernels::add_broadcast_vjp(dtokens, self.pos.value.shape())?;
        self.pos.accumulate(&dpos)?;
        self.proj.backward(tape, dtokens)?;
        Ok(())
    }
}

impl<T: Scalar> Module<T> for ConvStem<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.proj.visit_params(&join(prefix, "proj"), f);
        f(&join(prefix, "pos"), &self.pos);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.proj.visit_params_mut(&join(prefix, "proj"), f);
        f(&join(prefix, "pos"), &mut self.pos);
    }
}

/// Normalizes each stream, concatenates them on channels and mean-pools tokens.
pub fn terminate_streams<T: Scalar>(
    state: &TwoStreamState<T>,
    norm1: &LayerNorm<T>,
    norm2: &LayerNorm<T>,
    mut tape: Option<&mut Tape<T>>,
) -> Result<Tensor<T>> {
    if state.i1.shape() != state.i2.shape() {
        return Err(Error::Invariant(format!(
            "stream shapes differ at termination: {:?} vs {:?}",
            state.i1.shape(),
            state.i2.shape()
        )));
    }
    let a = norm1.forward(&state.i1, tape.as_deref_mut())?;
    let b = norm2.forward(&state.i2, tape)?;
    kernels::mean_pool(&kernels::concat(&[&a, &b])?)
}

/// How the two streams are normalized before the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// LayerNorm each stream, then concatenate.
    #[default]
    NormConcat,
    /// Concatenate, then one LayerNorm over `2d` channels.
    ConcatNorm,
}

#[derive(Debug, Clone)]
pub enum HeadNorm<T: Scalar> {
    PerStream(LayerNorm<T>, LayerNorm<T>),
    Joint(LayerNorm<T>),
}

/// Termination plus a linear classifier over the `2d` features.
#[derive(Debug, Clone)]
pub struct Head<T: Scalar> {
    pub norm: HeadNorm<T>,
    pub fc: Linear<T>,
}

impl<T: Scalar> Head<T> {
    pub fn init(dim: usize, num_classes: usize, rng: &mut impl Rng) -> Self {
        Self::with_termination(dim, num_classes, Termination::NormConcat, rng)
    }

    pub fn with_termination(
        dim: usize,
        num_classes: usize,
        termination: Termination,
        rng: &mut impl Rng,
    ) -> Self {
        let norm = match termination {
            Termination::NormConcat => {
                HeadNorm::PerStream(LayerNorm::new(dim), LayerNorm::new(dim))
            }
            Termination::ConcatNorm => HeadNorm::Joint(LayerNorm::new(2 * dim)),
        };
        Self {
            norm,
            fc: Linear::init(2 * dim, num_classes, rng),
        }
    }

    /// Pooled `[B, 2d]` features.
    pub fn features(
        &self,
        state: &TwoStreamState<T>,
        tape: Option<&mut Tape<T>>,
    ) -> Result<Tensor<T>> {
        match &self.norm {
            HeadNorm::PerStream(n1, n2) => terminate_streams(state, n1, n2, tape),
            HeadNorm::Joint(n) => {
                if state.i1.shape() != state.i2.shape() {
                    return Err(Error::Invariant(
                        "stream shapes differ at termination".into(),
                    ));
                }
                let cat = kernels::concat(&[&state.i1, &state.i2])?;
                let h = n.forward(&cat, tape)?;
                kernels::mean_pool(&h)
            }
        }
    }

    pub fn forward(
        &self,
        state: &TwoStreamState<T>,
        mut tape: Option<&mut Tape<T>>,
    ) -> Result<Tensor<T>> {
        let feats = self.features(state, tape.as_deref_mut())?;
        self.fc.forward(&feats, tape)
    }

    /// Returns the cotangents of both streams; `tokens` is the stream length.
    pub fn backward(
        &mut self,
        tape: &mut Tape<T>,
        dlogits: &Tensor<T>,
        tokens: usize,
    ) -> Result<StreamGrads<T>> {
        let dfeat = self.fc.backward(tape, dlogits)?;
        let dcat = kernels::mean_pool_vjp(&dfeat, tokens)?;
        let d = dcat.last_dim() / 2;
        match &mut self.norm {
            HeadNorm::PerStream(n1, n2) => {
                let mut halves = kernels::split(&dcat, &[d, d])?;
                let db = halves.pop().expect("two halves");
                let da = halves.pop().expect("two halves");
                let d2 = n2.backward(tape, &db)?;
                let d1 = n1.backward(tape, &da)?;
                Ok(StreamGrads { d1, d2 })
            }
            HeadNorm::Joint(n) => {
                let dh = n.backward(tape, &dcat)?;
                let mut halves = kernels::split(&dh, &[d, d])?;
                let d2 = halves.pop().expect("two halves");
                let d1 = halves.pop().expect("two halves");
                Ok(StreamGrads { d1, d2 })
            }
        }
    }
}

impl<T: Scalar> Module<T> for Head<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        match &self.norm {
            HeadNorm::PerStream(n1, n2) => {
                n1.visit_params(&join(prefix, "norm1"), f);
                n2.visit_params(&join(prefix, "norm2"), f);
            }
            HeadNorm::Joint(n) => n.visit_params(&join(prefix, "norm"), f),
        }
        self.fc.visit_params(&join(prefix, "fc"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        match &mut self.norm {
            HeadNorm::PerStream(n1, n2) => {
                n1.visit_params_mut(&join(prefix, "norm1"), f);
                n2.visit_params_mut(&join(prefix, "norm2"), f);
            }
            HeadNorm::Joint(n) => n.visit_params_mut(&join(prefix, "norm"), f),
        }
        self.fc.visit_params_mut(&join(prefix, "fc"), f);
    }
}

/// Loss and accuracy of one minibatch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub batch: usize,
}

impl StepStats {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.batch as f64
    }
}

/// Stem, a stack of reversible and checkpoint segments, and a head.
pub struct RevNet<T: Scalar> {
    pub stem: ConvStem<T>,
    pub segments: Vec<Segment<T>>,
    pub head: Head<T>,
}

impl<T: Scalar> RevNet<T> {
    /// Token count reaching the head.
    pub fn final_tokens(&self, batch: usize) -> Result<usize> {
        let mut shape = vec![batch, self.stem.grid().tokens(), self.stem.dim()];
        for seg in &self.segments {
            if let Segment::Checkpoint(t) = seg {
                shape = t.output_shape(&shape)?;
            }
        }
        Ok(shape[1])
    }

    pub fn forward(&self, images: &Tensor<T>, ctx: &StepContext) -> Result<Tensor<T>> {
        let tokens = self.stem.forward(images, None)?;
        let pass = rev::stack_forward(
            &self.segments,
            TwoStreamState::initiate(tokens),
            ctx,
            Schedule::Reversible,
        )?;
        let ForwardPass { state, records, .. } = pass;
        drop(records);
        self.head.forward(&state, None)
    }

    /// Runs forward and backward on one minibatch, adding parameter gradients
    /// into the gradient buffers. Callers zero gradients between steps.
    pub fn backprop(
        &mut self,
        images: &Tensor<T>,
        labels: &[usize],
        ctx: &StepContext,
        schedule: Schedule,
    ) -> Result<StepStats> {
        let mut stem_tape = Tape::new();
        let tokens = self.stem.forward(images, Some(&mut stem_tape))?;
        let pass = rev::stack_forward(
            &self.segments,
            TwoStreamState::initiate(tokens),
            ctx,
            schedule,
        )?;
        let mut head_tape = Tape::new();
        let logits = self.head.forward(&pass.state, Some(&mut head_tape))?;
        let n = pass.state.i1.shape()[1];
        let (loss, dlogits, correct) = kernels::softmax_cross_entropy(&logits, labels)?;
        drop(logits);
        let grads = self.head.backward(&mut head_tape, &dlogits, n)?;
        drop(dlogits);
        let (_, grads) = rev::stack_backward(&mut self.segments, pass, grads)?;
        let dtokens = kernels::add(&grads.d1, &grads.d2)?;
        drop(grads);
        self.stem.backward(&mut stem_tape, &dtokens)?;
        Ok(StepStats {
            loss: loss.as_f64(),
            correct,
            batch: labels.len(),
        })
    }

    /// Mean loss without touching gradients.
    pub fn loss(&self, images: &Tensor<T>, labels: &[usize], ctx: &StepContext) -> Result<f64> {
        let logits = self.forward(images, ctx)?;
        Ok(kernels::softmax_cross_entropy(&logits, labels)?.0.as_f64())
    }

    pub fn num_blocks(&self) -> usize {
        self.segments.iter().map(|s| s.blocks().len()).sum()
    }

    pub fn num_transitions(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| matches!(s, Segment::Checkpoint(_)))
            .count()
    }

    /// `(F calls, G calls)` summed over all reversible blocks.
    pub fn calls(&self) -> (u64, u64) {
        rev::total_calls(&self.segments)
    }

    pub fn reset_calls(&self) {
        rev::reset_calls(&self.segments)
    }

    /// All parameter values keyed by name, in visiting order.
    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |n, p| out.push((n.to_string(), p.value.clone())));
        out
    }

    pub fn named_grads(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |n, p| out.push((n.to_string(), p.grad.clone())));
        out
    }
}

impl<T: Scalar> Module<T> for RevNet<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.stem.visit_params(&join(prefix, "stem"), f);
        for seg in &self.segments {
            seg.visit_params(prefix, f);
        }
        self.head.visit_params(&join(prefix, "head"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.stem.visit_params_mut(&join(prefix, "stem"), f);
        for seg in &mut self.segments {
            seg.visit_params_mut(prefix, f);
        }
        self.head.visit_params_mut(&join(prefix, "head"), f);
    }
}
