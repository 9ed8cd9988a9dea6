//! Rev-MViT: reversible stage-preserving blocks built on pooling attention,
//! separated by non-reversible stage transitions that fuse the two streams,
//! halve the token grid and double the channels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, Grid, PatchGeometry};
use crate::model::{ConvStem, Head, RevNet, Termination};
use crate::nn::{join, save, LayerNorm, Linear, Module, Param, Perceptron, Tape};
use crate::rev::{self, RevBlock, SeedRecord, Segment, SubBlock, Transition, TwoStreamState};
use crate::rng;
use crate::tensor::{Scalar, Tensor};
use crate::vit::{drop_path_schedule, Attention, Mlp};

fn default_in_chans() -> usize {
    3
}
fn default_mlp_ratio() -> usize {
    4
}
fn default_q_stride() -> usize {
    2
}
fn default_pool_kernel() -> usize {
    3
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemConfig {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_chans: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    /// Stage-preserving blocks in this stage.
    pub depth: usize,
    pub kv_pool_stride: usize,
    /// Query stride of the transition entering this stage; unused for stage 0.
    #[serde(default = "default_q_stride")]
    pub q_pool_stride: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    /// Elementwise maximum of the streams.
    Max,
    /// Channel concat, then a linear map `2d → d`.
    Concat,
    /// Channel concat, then a perceptron with hidden width `2·(2d)`.
    Mlp2x,
    /// As `Mlp2x` with hidden width `4·(2d)`.
    Mlp4x,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionStrategy {
    pub variant: FusionVariant,
    /// LayerNorm each stream before fusing.
    #[serde(default)]
    pub norm: bool,
    #[serde(default)]
    pub dropout: f64,
}

impl Default for FusionStrategy {
    fn default() -> Self {
        Self {
            variant: FusionVariant::Mlp2x,
            norm: false,
            dropout: 0.0,
        }
    }
}

impl FusionStrategy {
    /// Hidden width of the MLP variants for streams of width `d`.
    pub fn hidden(&self, d: usize) -> Option<usize> {
        match self.variant {
            FusionVariant::Mlp2x => Some(2 * 2 * d),
            FusionVariant::Mlp4x => Some(4 * 2 * d),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MViTConfig {
    pub image_size: usize,
    #[serde(default = "default_in_chans")]
    pub in_chans: usize,
    pub stem: StemConfig,
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub fusion: FusionStrategy,
    #[serde(default)]
    pub termination: Termination,
    #[serde(default = "default_pool_kernel")]
    pub pool_kernel: usize,
    /// LayerNorm after each Q/K/V pooling.
    #[serde(default = "default_true")]
    pub pool_norm: bool,
    #[serde(default)]
    pub drop_path_rate: f64,
    pub num_classes: usize,
}

impl MViTConfig {
    pub fn stem_geometry(&self) -> PatchGeometry {
        PatchGeometry {
            kernel: self.stem.kernel,
            stride: self.stem.stride,
            padding: self.stem.padding,
        }
    }

    pub fn pool(&self) -> PoolSpec {
        PoolSpec {
            kernel: self.pool_kernel,
            norm: self.pool_norm,
        }
    }

    /// Token grid entering each stage.
    pub fn stage_grids(&self) -> Result<Vec<Grid>> {
        let mut grid = Grid::square(self.stem_geometry().output_side(self.image_size)?);
        let mut out = Vec::with_capacity(self.stages.len());
        for (i, s) in self.stages.iter().enumerate() {
            if i > 0 {
                grid = grid.pooled((s.q_pool_stride, s.q_pool_stride));
            }
            out.push(grid);
        }
        Ok(out)
    }

    pub fn num_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.depth).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let Some(first) = self.stages.first() else {
            return fail("at least one stage is required".into());
        };
        if self.stem.out_chans != first.embed_dim {
            return fail(format!(
                "stem width {} differs from first stage width {}",
                self.stem.out_chans, first.embed_dim
            ));
        }
        self.stem_geometry().output_side(self.image_size)?;
        for (i, s) in self.stages.iter().enumerate() {
            if s.num_heads == 0 || s.embed_dim % s.num_heads != 0 {
                return fail(format!(
                    "stage {i}: width {} not divisible by {} heads",
                    s.embed_dim, s.num_heads
                ));
            }
            if s.kv_pool_stride == 0 || s.q_pool_stride == 0 || s.mlp_ratio == 0 {
                return fail(format!("stage {i}: strides and mlp_ratio must be positive"));
            }
            if i > 0 && s.embed_dim != 2 * self.stages[i - 1].embed_dim {
                return fail(format!(
                    "stage {i}: width {} is not double the previous {}",
                    s.embed_dim,
                    self.stages[i - 1].embed_dim
                ));
            }
        }
        if self.pool_kernel == 0 || self.pool_kernel.is_multiple_of(2) {
            return fail(format!("pool kernel {} must be odd", self.pool_kernel));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) || !(0.0..1.0).contains(&self.fusion.dropout)
        {
            return fail("drop rates must lie in [0, 1)".into());
        }
        if self.num_classes == 0 || self.in_chans == 0 {
            return fail("num_classes and in_chans must be positive".into());
        }
        Ok(())
    }
}

/// Shape of the Q/K/V pooling operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: usize,
    pub norm: bool,
}

/// Depthwise strided convolution over the token grid, optionally normalized.
#[derive(Debug, Clone)]
pub struct Pool<T: Scalar> {
    pub kernel: Param<T>,
    pub stride: usize,
    pub norm: Option<LayerNorm<T>>,
}

impl<T: Scalar> Pool<T> {
    /// Kernel weights uniform in `±1/k` (fan-in `k²`).
    pub fn init(dim: usize, spec: PoolSpec, stride: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / spec.kernel as f64;
        Self {
            kernel: Param::new(rng::uniform(
                &[spec.kernel, spec.kernel, dim],
                -bound,
                bound,
                rng,
            )),
            stride,
            norm: spec.norm.then(|| LayerNorm::new(dim)),
        }
    }

    /// Unit-impulse kernel: stride-1 pooling with it is the identity.
    pub fn set_delta(&mut self) {
        let [kh, kw, c] = *self.kernel.value.shape() else {
            unreachable!("pool kernels are rank 3")
        };
        let centre = (kh / 2) * kw + kw / 2;
        let data = self.kernel.value.data_mut();
        data.fill(T::zero());
        data[centre * c..(centre + 1) * c].fill(T::one());
    }

    fn forward(
        &self,
        h: &Tensor<T>,
        grid: Grid,
        tape: Option<&mut Tape<T>>,
    ) -> Result<(Tensor<T>, Grid)> {
        let (p, g) =
            kernels::depthwise_conv_pool(h, grid, &self.kernel.value, (self.stride, self.stride))?;
        match &self.norm {
            Some(n) => Ok((n.forward(&p, tape)?, g)),
            None => Ok((p, g)),
        }
    }

    /// Undoes the optional norm; the conv VJP runs later once `h` is popped.
    fn backward_norm(&mut self, tape: &mut Tape<T>, dy: Tensor<T>) -> Result<Tensor<T>> {
        match &mut self.norm {
            Some(n) => n.backward(tape, &dy),
            None => Ok(dy),
        }
    }

    fn backward_conv(&mut self, h: &Tensor<T>, grid: Grid, dp: &Tensor<T>) -> Result<Tensor<T>> {
        let (dh, dk) = kernels::depthwise_conv_pool_vjp(
            h,
            grid,
            &self.kernel.value,
            (self.stride, self.stride),
            dp,
        )?;
        self.kernel.accumulate(&dk)?;
        Ok(dh)
    }
}

impl<T: Scalar> Module<T> for Pool<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "kernel"), &self.kernel);
        if let Some(n) = &self.norm {
            n.visit_params(&join(prefix, "norm"), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "kernel"), &mut self.kernel);
        if let Some(n) = &mut self.norm {
            n.visit_params_mut(&join(prefix, "norm"), f);
        }
    }
}

/// Attention with pooled queries, keys and values:
/// `proj(MHA(Wq·pool_q(h), Wk·pool_k(h), Wv·pool_v(h)))` with `h = LN(x)`.
///
/// `d_out > d_in` upsamples channels inside the Q/K/V projections.
#[derive(Debug, Clone)]
pub struct PoolingAttention<T: Scalar> {
    pub norm: LayerNorm<T>,
    pub pool_q: Pool<T>,
    pub pool_k: Pool<T>,
    pub pool_v: Pool<T>,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub proj: Linear<T>,
    pub heads: usize,
    pub grid: Grid,
}

impl<T: Scalar> PoolingAttention<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        grid: Grid,
        d_in: usize,
        d_out: usize,
        heads: usize,
        q_stride: usize,
        kv_stride: usize,
        pool: PoolSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !d_out.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "width {d_out} is not divisible into {heads} heads"
            )));
        }
        Ok(Self {
            norm: LayerNorm::new(d_in),
            pool_q: Pool::init(d_in, pool, q_stride, rng),
            pool_k: Pool::init(d_in, pool, kv_stride, rng),
            pool_v: Pool::init(d_in, pool, kv_stride, rng),
            q: Linear::init(d_in, d_out, rng),
            k: Linear::init(d_in, d_out, rng),
            v: Linear::init(d_in, d_out, rng),
            proj: Linear::init(d_out, d_out, rng),
            heads,
            grid,
        })
    }

    pub fn d_in(&self) -> usize {
        self.q.d_in()
    }

    pub fn d_out(&self) -> usize {
        self.q.d_out()
    }

    pub fn output_grid(&self) -> Grid {
        self.grid.pooled((self.pool_q.stride, self.pool_q.stride))
    }

    pub fn kv_grid(&self) -> Grid {
        self.grid.pooled((self.pool_k.stride, self.pool_k.stride))
    }
}

impl<T: Scalar> Module<T> for PoolingAttention<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.norm.visit_params(&join(prefix, "norm"), f);
        self.pool_q.visit_params(&join(prefix, "pool_q"), f);
        self.pool_k.visit_params(&join(prefix, "pool_k"), f);
        self.pool_v.visit_params(&join(prefix, "pool_v"), f);
        self.q.visit_params(&join(prefix, "q"), f);
        self.k.visit_params(&join(prefix, "k"), f);
        self.v.visit_params(&join(prefix, "v"), f);
        self.proj.visit_params(&join(prefix, "proj"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.norm.visit_params_mut(&join(prefix, "norm"), f);
        self.pool_q.visit_params_mut(&join(prefix, "pool_q"), f);
        self.pool_k.visit_params_mut(&join(prefix, "pool_k"), f);
        self.pool_v.visit_params_mut(&join(prefix, "pool_v"), f);
        self.q.visit_params_mut(&join(prefix, "q"), f);
        self.k.visit_params_mut(&join(prefix, "k"), f);
        self.v.visit_params_mut(&join(prefix, "v"), f);
        self.proj.visit_params_mut(&join(prefix, "proj"), f);
    }
}

impl<T: Scalar> SubBlock<T> for PoolingAttention<T> {
    fn forward(&self, x: &Tensor<T>, mut tape: Option<&mut Tape<T>>) -> Result<Tensor<T>> {
        let h = self.norm.forward(x, tape.as_deref_mut())?;
        save(&mut tape, &h);
        let (pq, _) = self.pool_q.forward(&h, self.grid, tape.as_deref_mut())?;
        let q = self.q.forward(&pq, tape.as_deref_mut())?;
        drop(pq);
        let (pk, _) = self.pool_k.forward(&h, self.grid, tape.as_deref_mut())?;
        let k = self.k.forward(&pk, tape.as_deref_mut())?;
        drop(pk);
        let (pv, _) = self.pool_v.forward(&h, self.grid, tape.as_deref_mut())?;
        let v = self.v.forward(&pv, tape.as_deref_mut())?;
        drop((pv, h));
        let (o, probs) = kernels::multi_head_attention(&q, &k, &v, self.heads)?;
        if let Some(t) = tape.as_deref_mut() {
            t.push(q);
            t.push(k);
            t.push(v);
            t.push(probs);
        }
        self.proj.forward(&o, tape)
    }

    fn backward(&mut self, tape: &mut Tape<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let d_o = self.proj.backward(tape, dy)?;
        let probs = tape.pop()?;
        let v = tape.pop()?;
        let k = tape.pop()?;
        let q = tape.pop()?;
        let (dq, dk, dv) = kernels::multi_head_attention_vjp(&q, &k, &v, &probs, self.heads, &d_o)?;
        drop((q, k, v, probs, d_o));
        let dpv = self.v.backward(tape, &dv)?;
        let dpv = self.pool_v.backward_norm(tape, dpv)?;
        let dpk = self.k.backward(tape, &dk)?;
        let dpk = self.pool_k.backward_norm(tape, dpk)?;
        let dpq = self.q.backward(tape, &dq)?;
        let dpq = self.pool_q.backward_norm(tape, dpq)?;
        let h = tape.pop()?;
        let mut dh = self.pool_q.backward_conv(&h, self.grid, &dpq)?;
        dh.add_assign(&self.pool_k.backward_conv(&h, self.grid, &dpk)?)?;
        dh.add_assign(&self.pool_v.backward_conv(&h, self.grid, &dpv)?)?;
        self.norm.backward(tape, &dh)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *input {
            [b, n, d] if n == self.grid.tokens() && d == self.d_in() => {
                Ok(vec![b, self.output_grid().tokens(), self.d_out()])
            }
            _ => Err(Error::dim(
                "pool_attention",
                input,
                &[0, self.grid.tokens(), self.d_in()],
            )),
        }
    }
}

#[derive(Debug, Clone)]
enum Mixer<T: Scalar> {
    Max,
    Linear(Linear<T>),
    Mlp(Perceptron<T>),
}

/// Merges the two streams into one tensor of the stream width.
#[derive(Debug, Clone)]
pub struct Fusion<T: Scalar> {
    pub strategy: FusionStrategy,
    norms: Option<(LayerNorm<T>, LayerNorm<T>)>,
    mixer: Mixer<T>,
}

impl<T: Scalar> Fusion<T> {
    pub fn init(dim: usize, strategy: FusionStrategy, rng: &mut impl Rng) -> Self {
        let mixer = match strategy.variant {
            FusionVariant::Max => Mixer::Max,
            FusionVariant::Concat => Mixer::Linear(Linear::init(2 * dim, dim, rng)),
            FusionVariant::Mlp2x | FusionVariant::Mlp4x => Mixer::Mlp(Perceptron::init(
                2 * dim,
                strategy.hidden(dim).expect("mlp variant"),
                dim,
                rng,
            )),
        };
        Self {
            strategy,
            norms: strategy
                .norm
                .then(|| (LayerNorm::new(dim), LayerNorm::new(dim))),
            mixer,
        }
    }

    /// Concat reduction that copies stream 1 and ignores stream 2.
    pub fn set_select_first(&mut self) -> Result<()> {
        let Mixer::Linear(l) = &mut self.mixer else {
            return Err(Error::Config(
                "select-first needs the concat variant".into(),
            ));
        };
        let d = l.d_out();
        let w = l.weight.value.data_mut();
        w.fill(T::zero());
        for i in 0..d {
            w[i * d + i] = T::one();
        }
        l.bias.value.fill(T::zero());
        Ok(())
    }

    pub fn forward(
        &self,
        i1: &Tensor<T>,
        i2: &Tensor<T>,
        seed: &SeedRecord,
        mut tape: Option<&mut Tape<T>>,
    ) -> Result<Tensor<T>> {
        if i1.shape() != i2.shape() {
            return Err(Error::Invariant(format!(
                "fusing streams of different shapes: {:?} vs {:?}",
                i1.shape(),
                i2.shape()
            )));
        }
        let normed;
        let (a, b) = match &self.norms {
            Some((n1, n2)) => {
                normed = (
                    n1.forward(i1, tape.as_deref_mut())?,
                    n2.forward(i2, tape.as_deref_mut())?,
                );
                (&normed.0, &normed.1)
            }
            None => (i1, i2),
        };
        let y = match &self.mixer {
            Mixer::Max => {
                save(&mut tape, a);
                save(&mut tape, b);
                kernels::maximum(a, b)?
            }
            Mixer::Linear(l) => l.forward(&kernels::concat(&[a, b])?, tape)?,
            Mixer::Mlp(m) => m.forward(&kernels::concat(&[a, b])?, tape)?,
        };
        rev::dropout(&y, self.strategy.dropout, seed.fusion, seed.training)
    }

    pub fn backward(
        &mut self,
        tape: &mut Tape<T>,
        seed: &SeedRecord,
        dy: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let dy = rev::dropout_vjp(dy, self.strategy.dropout, seed.fusion, seed.training)?;
        let d = dy.last_dim();
        let (da, db) = match &mut self.mixer {
            Mixer::Max => {
                let b = tape.pop()?;
                let a = tape.pop()?;
                kernels::maximum_vjp(&a, &b, &dy)?
            }
            Mixer::Linear(l) => split_pair(&l.backward(tape, &dy)?, d)?,
            Mixer::Mlp(m) => split_pair(&m.backward(tape, &dy)?, d)?,
        };
        match &mut self.norms {
            Some((n1, n2)) => {
                let db = n2.backward(tape, &db)?;
                let da = n1.backward(tape, &da)?;
                Ok((da, db))
            }
            None => Ok((da, db)),
        }
    }
}

fn split_pair<T: Scalar>(x: &Tensor<T>, d: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut parts = kernels::split(x, &[d, d])?;
    let b = parts.pop().expect("two parts");
    let a = parts.pop().expect("two parts");
    Ok((a, b))
}

impl<T: Scalar> Module<T> for Fusion<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        if let Some((n1, n2)) = &self.norms {
            n1.visit_params(&join(prefix, "norm1"), f);
            n2.visit_params(&join(prefix, "norm2"), f);
        }
        match &self.mixer {
            Mixer::Max => {}
            Mixer::Linear(l) => l.visit_params(&join(prefix, "reduce"), f),
            Mixer::Mlp(m) => m.visit_params(prefix, f),
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        if let Some((n1, n2)) = &mut self.norms {
            n1.visit_params_mut(&join(prefix, "norm1"), f);
            n2.visit_params_mut(&join(prefix, "norm2"), f);
        }
        match &mut self.mixer {
            Mixer::Max => {}
            Mixer::Linear(l) => l.visit_params_mut(&join(prefix, "reduce"), f),
            Mixer::Mlp(m) => m.visit_params_mut(prefix, f),
        }
    }
}

/// Applies a fusion to a two-stream state.
pub fn lateral_fuse<T: Scalar>(
    state: &TwoStreamState<T>,
    fusion: &Fusion<T>,
    seed: &SeedRecord,
) -> Result<Tensor<T>> {
    fusion.forward(&state.i1, &state.i2, seed, None)
}

/// Fusion, then pooling attention with query stride and channel upsampling,
/// then an MLP at the new width. No internal residuals.
pub struct StageTransition<T: Scalar> {
    index: usize,
    pub fusion: Fusion<T>,
    pub attn: PoolingAttention<T>,
    pub mlp: Mlp<T>,
}

impl<T: Scalar> StageTransition<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        index: usize,
        grid: Grid,
        d_in: usize,
        next: &StageConfig,
        fusion: FusionStrategy,
        pool: PoolSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d_out = next.embed_dim;
        Ok(Self {
            index,
            fusion: Fusion::init(d_in, fusion, rng),
            attn: PoolingAttention::init(
                grid,
                d_in,
                d_out,
                next.num_heads,
                next.q_pool_stride,
                next.kv_pool_stride,
                pool,
                rng,
            )?,
            mlp: Mlp::init(d_out, next.mlp_ratio * d_out, rng),
        })
    }
}

impl<T: Scalar> Module<T> for StageTransition<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.fusion.visit_params(&join(prefix, "fusion"), f);
        self.attn.visit_params(&join(prefix, "attn"), f);
        self.mlp.visit_params(&join(prefix, "mlp"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.fusion.visit_params_mut(&join(prefix, "fusion"), f);
        self.attn.visit_params_mut(&join(prefix, "attn"), f);
        self.mlp.visit_params_mut(&join(prefix, "mlp"), f);
    }
}

impl<T: Scalar> Transition<T> for StageTransition<T> {
    fn index(&self) -> usize {
        self.index
    }

    fn forward(
        &self,
        i1: &Tensor<T>,
        i2: &Tensor<T>,
        seed: &SeedRecord,
        mut tape: Option<&mut Tape<T>>,
    ) -> Result<Tensor<T>> {
        let z = self.fusion.forward(i1, i2, seed, tape.as_deref_mut())?;
        let a = self.attn.forward(&z, tape.as_deref_mut())?;
        drop(z);
        self.mlp.forward(&a, tape)
    }

    fn backward(
        &mut self,
        tape: &mut Tape<T>,
        seed: &SeedRecord,
        dy: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let da = self.mlp.backward(tape, dy)?;
        let dz = self.attn.backward(tape, &da)?;
        self.fusion.backward(tape, seed, &dz)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let out = self.attn.output_shape(input)?;
        self.mlp.output_shape(&out)
    }
}

/// A reversible block whose `F` is equidimensional pooling attention.
pub fn stage_preserving_block<T: Scalar>(
    index: usize,
    grid: Grid,
    stage: &StageConfig,
    pool: PoolSpec,
    drop_path_rate: f64,
    rng: &mut impl Rng,
) -> Result<RevBlock<T>> {
    let d = stage.embed_dim;
    let f = PoolingAttention::init(
        grid,
        d,
        d,
        stage.num_heads,
        1,
        stage.kv_pool_stride,
        pool,
        rng,
    )?;
    let g = Mlp::init(d, stage.mlp_ratio * d, rng);
    RevBlock::new(
        index,
        Box::new(f),
        Box::new(g),
        drop_path_rate,
        &[1, grid.tokens(), d],
    )
}

/// The Rev-ViT attention computing the same function as `attn`, which must
/// have unit strides, delta pooling kernels, no pool norms and `d_in = d_out`.
pub fn as_vit_attention<T: Scalar>(attn: &PoolingAttention<T>) -> Result<Attention<T>> {
    let pools = [&attn.pool_q, &attn.pool_k, &attn.pool_v];
    let mut delta = pools[0].clone();
    delta.set_delta();
    for p in pools {
        if p.stride != 1 || p.norm.is_some() || !p.kernel.value.bit_eq(&delta.kernel.value) {
            return Err(Error::Config(
                "reduction needs unit strides, delta kernels and no pool norm".into(),
            ));
        }
    }
    if attn.d_in() != attn.d_out() {
        return Err(Error::Config("reduction needs d_in = d_out".into()));
    }
    let w = kernels::concat(&[
        &attn.q.weight.value,
        &attn.k.weight.value,
        &attn.v.weight.value,
    ])?;
    let b = kernels::concat(&[&attn.q.bias.value, &attn.k.bias.value, &attn.v.bias.value])?;
    Ok(Attention {
        norm: attn.norm.clone(),
        qkv: Linear::from_tensors(w, b),
        proj: attn.proj.clone(),
        heads: attn.heads,
    })
}

/// A stage-preserving block with identity pooling and the Rev-ViT block
/// sharing its weights. Norm affines are randomized so they matter.
pub fn reduction_pair<T: Scalar>(
    grid: Grid,
    dim: usize,
    heads: usize,
    seed: u64,
) -> Result<(RevBlock<T>, RevBlock<T>)> {
    let mut r = rng::rng_from(seed);
    let mut attn = PoolingAttention::init(
        grid,
        dim,
        dim,
        heads,
        1,
        1,
        PoolSpec {
            kernel: 3,
            norm: false,
        },
        &mut r,
    )?;
    for p in [&mut attn.pool_q, &mut attn.pool_k, &mut attn.pool_v] {
        p.set_delta();
    }
    let mut mlp = Mlp::init(dim, 4 * dim, &mut r);
    let mut jitter = |p: &mut Param<T>| {
        let noise = rng::uniform::<T>(p.value.shape(), -0.5, 0.5, &mut r);
        p.value.add_assign(&noise).expect("same shape");
    };
    attn.norm.visit_params_mut("", &mut |_, p| jitter(p));
    mlp.norm.visit_params_mut("", &mut |_, p| jitter(p));
    let vit = as_vit_attention(&attn)?;
    let probe = [1, grid.tokens(), dim];
    let m = RevBlock::new(0, Box::new(attn), Box::new(mlp.clone()), 0.0, &probe)?;
    let v = RevBlock::new(0, Box::new(vit), Box::new(mlp), 0.0, &probe)?;
    Ok((m, v))
}

/// Rev-MViT with parameters drawn from `seed`. Blocks and transitions share
/// one index sequence in stack order.
pub fn build_rev_mvit<T: Scalar>(cfg: &MViTConfig, seed: u64) -> Result<RevNet<T>> {
    cfg.validate()?;
    let mut r = rng::rng_from(seed);
    let stem = ConvStem::init(
        cfg.image_size,
        cfg.in_chans,
        cfg.stem.out_chans,
        cfg.stem_geometry(),
        &mut r,
    )?;
    let grids = cfg.stage_grids()?;
    let mut rates = drop_path_schedule(cfg.drop_path_rate, cfg.num_blocks()).into_iter();
    let mut segments = Vec::new();
    let mut index = 0;
    for (s, stage) in cfg.stages.iter().enumerate() {
        if s > 0 {
            let prev = &cfg.stages[s - 1];
            let t = StageTransition::init(
                index,
                grids[s - 1],
                prev.embed_dim,
                stage,
                cfg.fusion,
                cfg.pool(),
                &mut r,
            )?;
            index += 1;
            segments.push(Segment::Checkpoint(Box::new(t)));
        }
        let mut blocks = Vec::with_capacity(stage.depth);
        for _ in 0..stage.depth {
            let rate = rates.next().expect("one rate per block");
            blocks.push(stage_preserving_block(
                index,
                grids[s],
                stage,
                cfg.pool(),
                rate,
                &mut r,
            )?);
            index += 1;
        }
        if !blocks.is_empty() {
            segments.push(Segment::Reversible(blocks));
        }
    }
    let last = cfg.stages.last().expect("validated").embed_dim;
    let head = Head::with_termination(last, cfg.num_classes, cfg.termination, &mut r);
    Ok(RevNet {
        stem,
        segments,
        head,
    })
}
