use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::matmul::{gemm_nn, gemm_nt, gemm_tn};

/// Gradients of [`linear`].
#[derive(Debug, Clone)]
pub struct LinearGrads<T: Scalar> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

fn check<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    op: &'static str,
) -> Result<(usize, usize, usize)> {
    let [d_in, d_out] = w.shape() else {
        return Err(Error::dim(op, x.shape(), w.shape()));
    };
    if x.last_dim() != *d_in {
        return Err(Error::dim(op, x.shape(), w.shape()));
    }
    Ok((x.rows(), *d_in, *d_out))
}

fn out_shape(x_shape: &[usize], d_out: usize) -> Vec<usize> {
    let mut s = x_shape.to_vec();
    *s.last_mut().expect("non-empty shape") = d_out;
    s
}

/// `y = x·W + b` applied over the trailing axis of `x`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, d_in, d_out) = check(x, w, "linear")?;
    if b.numel() != d_out {
        return Err(Error::dim("linear", b.shape(), &[d_out]));
    }
    let mut data = Vec::with_capacity(rows * d_out);
    for _ in 0..rows {
        data.extend_from_slice(b.data());
    }
    gemm_nn(rows, d_in, d_out, x.data(), w.data(), &mut data);
    Ok(Tensor::from_parts(out_shape(x.shape(), d_out), data))
}

/// VJP of [`linear`]: `dx = dy·Wᵀ`, `dW = xᵀ·dy` summed over rows, `db = Σ_rows dy`.
pub fn linear_vjp<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let (rows, d_in, d_out) = check(x, w, "linear_vjp")?;
    if dy.shape() != out_shape(x.shape(), d_out).as_slice() {
        return Err(Error::dim(
            "linear_vjp",
            dy.shape(),
            &out_shape(x.shape(), d_out),
        ));
    }
    let mut dx = Tensor::zeros(x.shape());
    gemm_nt(rows, d_out, d_in, dy.data(), w.data(), dx.data_mut());
    let mut dw = Tensor::zeros(&[d_in, d_out]);
    gemm_tn(d_in, rows, d_out, x.data(), dy.data(), dw.data_mut());
    let mut db = Tensor::zeros(&[d_out]);
    {
        let acc = db.data_mut();
        for row in dy.data().chunks_exact(d_out) {
            for (a, &g) in acc.iter_mut().zip(row) {
                *a += g;
            }
        }
    }
    Ok(LinearGrads { dx, dw, db })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_layer_gradients() {
        let x = Tensor::<f64>::scalar(1.0).reshape(&[1, 1]).unwrap();
        let w = Tensor::<f64>::scalar(2.0).reshape(&[1, 1]).unwrap();
        let b = Tensor::<f64>::scalar(0.0);
        let dy = Tensor::<f64>::scalar(4.0).reshape(&[1, 1]).unwrap();
        assert_eq!(linear(&x, &w, &b).unwrap().data(), &[2.0]);
        let g = linear_vjp(&x, &w, &dy).unwrap();
        assert_eq!(g.dw.data(), &[4.0]);
        assert_eq!(g.dx.data(), &[8.0]);
        assert_eq!(g.db.data(), &[4.0]);
    }

    #[test]
    fn identity_weight_zero_bias_is_identity() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64 * 0.5 - 3.0);
        let w = Tensor::<f64>::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
        let b = Tensor::<f64>::zeros(&[4]);
        assert_eq!(linear(&x, &w, &b).unwrap(), x);
    }

    #[test]
    fn rejects_wrong_input_width() {
        let x = Tensor::<f64>::zeros(&[3, 5]);
        let w = Tensor::<f64>::zeros(&[4, 2]);
        let b = Tensor::<f64>::zeros(&[2]);
        assert!(matches!(linear(&x, &w, &b), Err(Error::Dimension { .. })));
    }
}
