//! Parameterised layers built from the kernels, plus the tape that carries
//! saved activations from a forward call to its backward call.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels;
use crate::rng;
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

/// A trainable tensor and its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    /// Adds `g` into the gradient buffer.
    pub fn accumulate(&mut self, g: &Tensor<T>) -> Result<()> {
        self.grad.add_assign(g)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Anything that owns named parameters.
pub trait Module<T: Scalar> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.value.numel());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.zero_grad());
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Stack of tensors saved by forward calls for the matching backward calls.
///
/// Backward pops in reverse order of the pushes.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar> {
    saved: Vec<Tensor<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { saved: Vec::new() }
    }

    pub fn push(&mut self, t: Tensor<T>) {
        self.saved.push(t);
    }

    pub fn pop(&mut self) -> Result<Tensor<T>> {
        self.saved
            .pop()
            .ok_or_else(|| Error::Invariant("backward popped an empty tape".into()))
    }

    pub fn len(&self) -> usize {
        self.saved.len()
    }

    pub fn is_empty(&self) -> bool {
        self.saved.is_empty()
    }

    pub fn elements(&self) -> usize {
        self.saved.iter().map(Tensor::numel).sum()
    }

    pub fn bytes(&self) -> usize {
        self.saved.iter().map(Tensor::size_bytes).sum()
    }
}

/// Pushes onto the tape only when one is present.
pub(crate) fn save<T: Scalar>(tape: &mut Option<&mut Tape<T>>, t: &Tensor<T>) {
    if let Some(tape) = tape.as_deref_mut() {
        tape.push(t.clone());
    }
}

/// Affine map over the trailing axis.
#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    /// Truncated-normal weights (σ = 0.02), zero bias.
    pub fn init(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self::from_tensors(
            rng::trunc_normal(&[d_in, d_out], INIT_STD, rng),
            Tensor::zeros(&[d_out]),
        )
    }

    pub fn from_tensors(weight: Tensor<T>, bias: Tensor<T>) -> Self {
        Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<T>, mut tape: Option<&mut Tape<T>>) -> Result<Tensor<T>> {
        let y = kernels::linear(x, &self.weight.value, &self.bias.value)?;
        save(&mut tape, x);
        Ok(y)
    }

    pub fn backward(&mut self, tape: &mut Tape<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = tape.pop()?;
        let g = kernels::linear_vjp(&x, &self.weight.value, dy)?;
        self.weight.accumulate(&g.dw)?;
        self.bias.accumulate(&g.db)?;
        Ok(g.dx)
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Layer normalization with learned affine, initialised to identity.
#[derive(Debug, Clone)]
pub struct LayerNorm<T: Scalar> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::full(&[d], T::one())),
            beta: Param::new(Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, tape: Option<&mut Tape<T>>) -> Result<Tensor<T>> {
        let (y, stats) =
            kernels::layer_norm_with_stats(x, &self.gamma.value, &self.beta.value, LN_EPS)?;
        if let Some(tape) = tape {
            tape.push(stats.xhat);
            tape.push(stats.rstd);
        }
        Ok(y)
    }

    pub fn backward(&mut self, tape: &mut Tape<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let rstd = tape.pop()?;
        let xhat = tape.pop()?;
        let stats = kernels::LayerNormStats { xhat, rstd };
        let (dx, dg, db) = kernels::layer_norm_vjp(&stats, &self.gamma.value, dy)?;
        self.gamma.accumulate(&dg)?;
        self.beta.accumulate(&db)?;
        Ok(dx)
    }
}

impl<T: Scalar> Module<T> for LayerNorm<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// Two-layer perceptron `fc2(gelu(fc1(x)))`.
#[derive(Debug, Clone)]
pub struct Perceptron<T: Scalar> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> Perceptron<T> {
    pub fn init(d_in: usize, hidden: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::init(d_in, hidden, rng),
            fc2: Linear::init(hidden, d_out, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mut tape: Option<&mut Tape<T>>) -> Result<Tensor<T>> {
        let h = self.fc1.forward(x, tape.as_deref_mut())?;
        let a = kernels::gelu(&h);
        save(&mut tape, &h);
        drop(h);
        self.fc2.forward(&a, tape)
    }

    pub fn backward(&mut self, tape: &mut Tape<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let da = self.fc2.backward(tape, dy)?;
        let h = tape.pop()?;
        let dh = kernels::gelu_vjp(&h, &da)?;
        self.fc1.backward(tape, &dh)
    }
}

impl<T: Scalar> Module<T> for Perceptron<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.fc1.visit_params_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_params_mut(&join(prefix, "fc2"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tape_underflow_is_an_error() {
        let mut tape = Tape::<f64>::new();
        assert!(matches!(tape.pop(), Err(Error::Invariant(_))));
    }

    #[test]
    fn linear_param_count_includes_bias() {
        let mut rng = rng::rng_from(0);
        let l = Linear::<f64>::init(3, 2, &mut rng);
        assert_eq!(l.param_count(), 8);
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let mut rng = rng::rng_from(3);
        let mut l = Linear::<f64>::init(3, 2, &mut rng);
        let x = rng::uniform::<f64>(&[4, 3], -1.0, 1.0, &mut rng);
        let dy = rng::uniform::<f64>(&[4, 2], -1.0, 1.0, &mut rng);
        for _ in 0..2 {
            let mut tape = Tape::new();
            l.forward(&x, Some(&mut tape)).unwrap();
            l.backward(&mut tape, &dy).unwrap();
        }
        let twice = l.weight.grad.clone();
        l.zero_grad();
        let mut tape = Tape::new();
        l.forward(&x, Some(&mut tape)).unwrap();
        l.backward(&mut tape, &dy).unwrap();
        for (a, b) in twice.data().iter().zip(l.weight.grad.data()) {
            assert!((a - 2.0 * b).abs() < 1e-14);
        }
    }
}
