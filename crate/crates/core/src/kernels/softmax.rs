use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Splits `shape` around `axis` into `(outer, axis_len, inner)`.
fn lanes(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim("softmax", shape, &[axis]));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Max-subtracted softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = lanes(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(src[at(j)]);
            }
            let mut total = T::zero();
            for j in 0..len {
                let e = (src[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            let inv = total.recip();
            for j in 0..len {
                out[at(j)] *= inv;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// VJP of [`softmax`] given its output `y`: `dx = y ⊙ (dy − Σ_axis dy ⊙ y)`.
pub fn softmax_vjp<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    y.expect_same_shape(dy, "softmax_vjp")?;
    let (outer, len, inner) = lanes(y.shape(), axis)?;
    let (ys, gs) = (y.data(), dy.data());
    let mut out = vec![T::zero(); y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut dot = T::zero();
            for j in 0..len {
                dot += ys[at(j)] * gs[at(j)];
            }
            for j in 0..len {
                out[at(j)] = ys[at(j)] * (gs[at(j)] - dot);
            }
        }
    }
    Ok(Tensor::from_parts(y.shape().to_vec(), out))
}

/// Row-wise softmax of a contiguous `rows × len` buffer, in place.
pub(crate) fn softmax_rows_in_place<T: Scalar>(buf: &mut [T], len: usize) {
    for row in buf.chunks_exact_mut(len) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        let inv = total.recip();
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_and_overflow_safe() {
        let x = Tensor::<f64>::from_f64(&[2, 2], &[0.0, 0.0, 1000.0, 0.0]).unwrap();
        let y = softmax(&x, 1).unwrap();
        assert_eq!(&y.data()[..2], &[0.5, 0.5]);
        assert_eq!(y.data()[2], 1.0);
        assert!(y.data()[3] >= 0.0 && y.data()[3] < 1e-300);
        assert!(y.is_finite());
    }

    #[test]
    fn leading_axis() {
        let x = Tensor::<f64>::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap();
        let y = softmax(&x, 0).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn in_place_rows_match_axis_version() {
        let x = Tensor::<f64>::from_fn(&[3, 5], |i| (i as f64 * 0.7).sin() * 4.0);
        let y = softmax(&x, 1).unwrap();
        let mut buf = x.data().to_vec();
        softmax_rows_in_place(&mut buf, 5);
        assert_eq!(buf.as_slice(), y.data());
    }
}
