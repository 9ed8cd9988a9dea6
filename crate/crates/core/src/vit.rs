//! Rev-ViT: a patch stem, `depth` reversible blocks with attention `F` and
//! MLP `G`, and a two-stream termination head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, PatchGeometry};
use crate::model::{ConvStem, Head, RevNet};
use crate::nn::{join, LayerNorm, Linear, Module, Param, Perceptron, Tape};
use crate::rev::{RevBlock, Segment, SubBlock, TwoStreamState};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

fn default_in_chans() -> usize {
    3
}

fn default_mlp_ratio() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "default_in_chans")]
    pub in_chans: usize,
    pub embed_dim: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub depth: usize,
    pub num_heads: usize,
    #[serde(default)]
    pub drop_path_rate: f64,
    pub num_classes: usize,
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0
            || self.image_size == 0
            || !self.image_size.is_multiple_of(self.patch_size)
        {
            return fail(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_heads == 0
            || self.embed_dim == 0
            || !self.embed_dim.is_multiple_of(self.num_heads)
        {
            return fail(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.depth == 0 {
            return fail("depth must be at least 1".into());
        }
        if self.mlp_ratio == 0 || self.num_classes == 0 || self.in_chans == 0 {
            return fail("mlp_ratio, num_classes and in_chans must be positive".into());
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return fail(format!(
                "drop_path_rate {} outside [0, 1)",
                self.drop_path_rate
            ));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn hidden(&self) -> usize {
        self.mlp_ratio * self.embed_dim
    }

    pub fn stem_geometry(&self) -> PatchGeometry {
        PatchGeometry {
            kernel: self.patch_size,
            stride: self.patch_size,
            padding: 0,
        }
    }
}

/// Linearly increasing stochastic-depth rates, `0` at the first block and
/// `max_rate` at the last.
pub fn drop_path_schedule(max_rate: f64, blocks: usize) -> Vec<f64> {
    match blocks {
        0 => Vec::new(),
        1 => vec![max_rate],
        n => (0..n)
            .map(|i| max_rate * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Multi-head self-attention without a residual:
/// `proj(MHA(split(qkv(LN(x)))))`.
#[derive(Debug, Clone)]
pub struct Attention<T: Scalar> {
    pub norm: LayerNorm<T>,
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub heads: usize,
}

impl<T: Scalar> Attention<T> {
    pub fn init(dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "width {dim} is not divisible into {heads} heads"
            )));
        }
        Ok(Self {
            norm: LayerNorm::new(dim),
            qkv: Linear::init(dim, 3 * dim, rng),
            proj: Linear::init(dim, dim, rng),
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.proj.d_out()
    }
}

impl<T: Scalar> Module<T> for Attention<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.norm.visit_params(&join(prefix, "norm"), f);
        self.qkv.visit_params(&join(prefix, "qkv"), f);
        self.proj.visit_params(&join(prefix, "proj"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.norm.visit_params_mut(&join(prefix, "norm"), f);
        self.qkv.visit_params_mut(&join(prefix, "qkv"), f);
        self.proj.visit_params_mut(&join(prefix, "proj"), f);
    }
}

impl<T: Scalar> SubBlock<T> for Attention<T> {
    fn forward(&self, x: &Tensor<T>, mut tape: Option<&mut Tape<T>>) -> Result<Tensor<T>> {
        let d = self.dim();
        let h = self.norm.forward(x, tape.as_deref_mut())?;
        let qkv = self.qkv.forward(&h, tape.as_deref_mut())?;
        drop(h);
        let mut parts = kernels::split(&qkv, &[d, d, d])?;
        drop(qkv);
        let v = parts.pop().expect("three parts");
        let k = parts.pop().expect("three parts");
        let q = parts.pop().expect("three parts");
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
        drop((q, k, v, probs));
        let dqkv = kernels::concat(&[&dq, &dk, &dv])?;
        let dh = self.qkv.backward(tape, &dqkv)?;
        self.norm.backward(tape, &dh)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match input {
            [_, _, d] if *d == self.dim() => Ok(input.to_vec()),
            _ => Err(Error::dim("attention", input, &[0, 0, self.dim()])),
        }
    }
}

/// Position-wise MLP without a residual: `fc2(gelu(fc1(LN(x))))`.
#[derive(Debug, Clone)]
pub struct Mlp<T: Scalar> {
    pub norm: LayerNorm<T>,
    pub mlp: Perceptron<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn init(dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm: LayerNorm::new(dim),
            mlp: Perceptron::init(dim, hidden, dim, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.mlp.fc2.d_out()
    }
}

impl<T: Scalar> Module<T> for Mlp<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.norm.visit_params(&join(prefix, "norm"), f);
        self.mlp.visit_params(prefix, f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.norm.visit_params_mut(&join(prefix, "norm"), f);
        self.mlp.visit_params_mut(prefix, f);
    }
}

impl<T: Scalar> SubBlock<T> for Mlp<T> {
    fn forward(&self, x: &Tensor<T>, mut tape: Option<&mut Tape<T>>) -> Result<Tensor<T>> {
        let h = self.norm.forward(x, tape.as_deref_mut())?;
        self.mlp.forward(&h, tape)
    }

    fn backward(&mut self, tape: &mut Tape<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let dh = self.mlp.backward(tape, dy)?;
        self.norm.backward(tape, &dh)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match input.last() {
            Some(&d) if d == self.dim() && d == self.mlp.fc1.d_in() => Ok(input.to_vec()),
            _ => Err(Error::dim("mlp", input, &[self.dim()])),
        }
    }
}

/// Duplicates tokens into both streams.
pub fn initiate_streams<T: Scalar>(tokens: Tensor<T>) -> TwoStreamState<T> {
    TwoStreamState::initiate(tokens)
}

/// Builds one Rev-ViT block at `index`.
pub fn vit_block<T: Scalar>(
    index: usize,
    dim: usize,
    heads: usize,
    hidden: usize,
    drop_path_rate: f64,
    rng: &mut impl Rng,
) -> Result<RevBlock<T>> {
    let f = Attention::init(dim, heads, rng)?;
    let g = Mlp::init(dim, hidden, rng);
    RevBlock::new(
        index,
        Box::new(f),
        Box::new(g),
        drop_path_rate,
        &[1, 1, dim],
    )
}

/// Rev-ViT with parameters drawn from `seed`.
pub fn build_rev_vit<T: Scalar>(cfg: &ViTConfig, seed: u64) -> Result<RevNet<T>> {
    cfg.validate()?;
    let mut r = rng::rng_from(seed);
    let stem = ConvStem::init(
        cfg.image_size,
        cfg.in_chans,
        cfg.embed_dim,
        cfg.stem_geometry(),
        &mut r,
    )?;
    let rates = drop_path_schedule(cfg.drop_path_rate, cfg.depth);
    let blocks = rates
        .iter()
        .enumerate()
        .map(|(i, &rate)| vit_block(i, cfg.embed_dim, cfg.num_heads, cfg.hidden(), rate, &mut r))
        .collect::<Result<Vec<_>>>()?;
    let head = Head::init(cfg.embed_dim, cfg.num_classes, &mut r);
    Ok(RevNet {
        stem,
        segments: vec![Segment::Reversible(blocks)],
        head,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rev::{rev_forward, StepContext};

    fn cfg(image: usize, patch: usize, d: usize) -> ViTConfig {
        ViTConfig {
            image_size: image,
            patch_size: patch,
            in_chans: 3,
            embed_dim: d,
            mlp_ratio: 4,
            depth: 1,
            num_heads: 2,
            drop_path_rate: 0.0,
            num_classes: 4,
        }
    }

    #[test]
    fn patchify_shapes() {
        let net = build_rev_vit::<f64>(&cfg(32, 16, 8), 0).unwrap();
        let img = Tensor::<f64>::zeros(&[1, 32, 32, 3]);
        assert_eq!(net.stem.forward(&img, None).unwrap().shape(), [1, 4, 8]);
    }

    #[test]
    fn zero_image_and_table_give_zero_tokens() {
        let mut net = build_rev_vit::<f64>(&cfg(32, 16, 8), 0).unwrap();
        net.stem.pos.value.fill(0.0);
        let img = Tensor::<f64>::zeros(&[2, 32, 32, 3]);
        let t = net.stem.forward(&img, None).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn config_checks() {
        assert!(cfg(30, 16, 8).validate().is_err());
        assert!(cfg(32, 16, 7).validate().is_err());
        let mut c = cfg(32, 16, 8);
        c.depth = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn streams_are_duplicated() {
        let t = Tensor::<f64>::from_fn(&[1, 3, 2], |i| i as f64);
        let s = initiate_streams(t.clone());
        assert!(s.i1.bit_eq(&t) && s.i2.bit_eq(&t));
    }

    #[test]
    fn attention_on_one_token_is_value_projection() {
        let mut r = rng::rng_from(5);
        let att = Attention::<f64>::init(4, 2, &mut r).unwrap();
        let x = rng::uniform::<f64>(&[1, 1, 4], -1.0, 1.0, &mut r);
        let y = att.forward(&x, None).unwrap();
        let h = att.norm.forward(&x, None).unwrap();
        let qkv = att.qkv.forward(&h, None).unwrap();
        let v = kernels::split(&qkv, &[4, 4, 4]).unwrap().pop().unwrap();
        let expect = att.proj.forward(&v, None).unwrap();
        assert!(crate::tensor::max_abs_diff(&y, &expect) < 1e-15);
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let mut r = rng::rng_from(6);
        let att = Attention::<f64>::init(4, 2, &mut r).unwrap();
        let x = rng::uniform::<f64>(&[1, 3, 4], -1.0, 1.0, &mut r);
        let perm = [2usize, 0, 1];
        let px = Tensor::from_fn(&[1, 3, 4], |i| x.data()[perm[i / 4] * 4 + i % 4]);
        let y = att.forward(&x, None).unwrap();
        let py = att.forward(&px, None).unwrap();
        for (t, &src) in perm.iter().enumerate() {
            for c in 0..4 {
                assert!((py.data()[t * 4 + c] - y.data()[src * 4 + c]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn mlp_with_zero_weights_outputs_zero() {
        let mut r = rng::rng_from(7);
        let mut m = Mlp::<f64>::init(4, 16, &mut r);
        m.mlp.fc1.weight.value.fill(0.0);
        m.mlp.fc2.weight.value.fill(0.0);
        let x = rng::uniform::<f64>(&[2, 3, 4], -5.0, 5.0, &mut r);
        assert!(m
            .forward(&x, None)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn zero_attention_leaves_second_stream_unchanged() {
        let mut r = rng::rng_from(8);
        let mut blk = vit_block::<f64>(0, 8, 2, 32, 0.0, &mut r).unwrap();
        blk.visit_params_mut("", &mut |n, p| {
            if n.starts_with("f.proj") {
                p.value.fill(0.0);
            }
        });
        let i1 = rng::uniform::<f64>(&[2, 3, 8], -1.0, 1.0, &mut r);
        let i2 = rng::uniform::<f64>(&[2, 3, 8], -1.0, 1.0, &mut r);
        let out = rev_forward(
            &blk,
            TwoStreamState::new(i1, i2.clone()).unwrap(),
            &StepContext::eval(),
        )
        .unwrap();
        assert!(out.i2.bit_eq(&i2));
    }

    #[test]
    fn termination_swaps_halves_and_zeroes_constants() {
        let mut r = rng::rng_from(9);
        let head = Head::<f64>::init(4, 3, &mut r);
        let a = rng::uniform::<f64>(&[1, 5, 4], -1.0, 1.0, &mut r);
        let b = rng::uniform::<f64>(&[1, 5, 4], -1.0, 1.0, &mut r);
        let term = |x: &Tensor<f64>, y: &Tensor<f64>| {
            let st = TwoStreamState::new(x.clone(), y.clone()).unwrap();
            head.features(&st, None).unwrap()
        };
        let ab = term(&a, &b);
        let ba = term(&b, &a);
        assert_eq!(ab.shape(), [1, 8]);
        assert_eq!(&ab.data()[..4], &ba.data()[4..]);
        assert_eq!(&ab.data()[4..], &ba.data()[..4]);
        let c = Tensor::<f64>::full(&[1, 5, 4], 3.0);
        assert!(term(&c, &c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn schedule_is_linear() {
        assert_eq!(drop_path_schedule(0.3, 4).len(), 4);
        let s = drop_path_schedule(0.3, 4);
        assert_eq!(s[0], 0.0);
        assert!((s[3] - 0.3).abs() < 1e-15);
    }
}
