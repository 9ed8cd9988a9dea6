use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// GELU in its exact form `0.5·x·(1 + erf(x/√2))`.
///
/// The tanh approximation is never used: forward, recompute and
/// finite-difference checks all go through this one definition.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let half = T::of(0.5);
    let k = T::of(FRAC_1_SQRT_2);
    x.map(|v| half * v * (T::one() + (v * k).erf()))
}

/// VJP of [`gelu`]: `dy · (Φ(x) + x·φ(x))`.
pub fn gelu_vjp<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let half = T::of(0.5);
    let k = T::of(FRAC_1_SQRT_2);
    let norm = T::of(1.0 / (2.0 * PI).sqrt());
    x.zip_map(dy, "gelu_vjp", |v, g| {
        let cdf = half * (T::one() + (v * k).erf());
        let pdf = norm * (-half * v * v).exp();
        g * (cdf + v * pdf)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_values() {
        let x = Tensor::<f64>::from_f64(&[2], &[0.0, 1.0]).unwrap();
        let y = gelu(&x);
        assert_eq!(y.data()[0], 0.0);
        // Φ(1) = 0.841344746068543
        assert!((y.data()[1] - 0.841_344_746_068_543).abs() < 1e-12);
    }

    #[test]
    fn odd_part_is_identity() {
        let xs: Vec<f64> = (-40..=40).map(|i| i as f64 * 0.137).collect();
        let pos = gelu(&Tensor::<f64>::from_f64(&[xs.len()], &xs).unwrap());
        let neg_in: Vec<f64> = xs.iter().map(|v| -v).collect();
        let neg = gelu(&Tensor::<f64>::from_f64(&[xs.len()], &neg_in).unwrap());
        for ((p, n), x) in pos.data().iter().zip(neg.data()).zip(&xs) {
            assert!((p - n - x).abs() < 1e-12);
        }
    }
}
