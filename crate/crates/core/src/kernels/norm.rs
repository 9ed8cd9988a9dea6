use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Statistics a layer-norm backward needs: the normalized input and the
/// reciprocal standard deviation of every row.
#[derive(Debug, Clone)]
pub struct LayerNormStats<T: Scalar> {
    pub xhat: Tensor<T>,
    pub rstd: Tensor<T>,
}

fn check<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<usize> {
    let d = x.last_dim();
    if gamma.numel() != d || beta.numel() != d {
        return Err(Error::dim("layer_norm", x.shape(), gamma.shape()));
    }
    Ok(d)
}

/// Layer normalization over the trailing axis.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    layer_norm_with_stats(x, gamma, beta, eps).map(|(y, _)| y)
}

pub fn layer_norm_with_stats<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, LayerNormStats<T>)> {
    if eps <= 0.0 {
        return Err(Error::Config(format!(
            "layer_norm eps must be positive, got {eps}"
        )));
    }
    let d = check(x, gamma, beta)?;
    let rows = x.rows();
    let inv_d = T::of(1.0 / d as f64);
    let eps = T::of(eps);
    let mut y = Vec::with_capacity(x.numel());
    let mut xhat = Vec::with_capacity(x.numel());
    let mut rstd = Vec::with_capacity(rows);
    for row in x.data().chunks_exact(d) {
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        mean *= inv_d;
        let mut var = T::zero();
        for &v in row {
            var += (v - mean) * (v - mean);
        }
        var *= inv_d;
        let r = (var + eps).sqrt().recip();
        rstd.push(r);
        for ((&v, &g), &b) in row.iter().zip(gamma.data()).zip(beta.data()) {
            let h = (v - mean) * r;
            xhat.push(h);
            y.push(g * h + b);
        }
    }
    let mut rstd_shape = x.shape().to_vec();
    *rstd_shape.last_mut().expect("non-empty") = 1;
    Ok((
        Tensor::from_parts(x.shape().to_vec(), y),
        LayerNormStats {
            xhat: Tensor::from_parts(x.shape().to_vec(), xhat),
            rstd: Tensor::from_parts(rstd_shape, rstd),
        },
    ))
}

/// VJP of [`layer_norm`]; returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_vjp<T: Scalar>(
    stats: &LayerNormStats<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    stats.xhat.expect_same_shape(dy, "layer_norm_vjp")?;
    let d = dy.last_dim();
    if gamma.numel() != d {
        return Err(Error::dim("layer_norm_vjp", dy.shape(), gamma.shape()));
    }
    let inv_d = T::of(1.0 / d as f64);
    let mut dx = Vec::with_capacity(dy.numel());
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    for ((dy_row, xh_row), &r) in dy
        .data()
        .chunks_exact(d)
        .zip(stats.xhat.data().chunks_exact(d))
        .zip(stats.rstd.data())
    {
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for j in 0..d {
            dgamma[j] += dy_row[j] * xh_row[j];
            dbeta[j] += dy_row[j];
            dxhat[j] = dy_row[j] * gamma.data()[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh_row[j];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        for j in 0..d {
            dx.push(r * (dxhat[j] - mean_dxhat - xh_row[j] * mean_dxhat_xhat));
        }
    }
    Ok((
        Tensor::from_parts(dy.shape().to_vec(), dx),
        Tensor::from_parts(vec![d], dgamma),
        Tensor::from_parts(vec![d], dbeta),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_affine(d: usize) -> (Tensor<f64>, Tensor<f64>) {
        (Tensor::full(&[d], 1.0), Tensor::zeros(&[d]))
    }

    #[test]
    fn normalizes_small_row() {
        let x = Tensor::<f64>::from_f64(&[1, 3], &[1.0, 2.0, 3.0]).unwrap();
        let (g, b) = unit_affine(3);
        let y = layer_norm(&x, &g, &b, 1e-12).unwrap();
        let expect = [-1.2247, 0.0, 1.2247];
        for (v, e) in y.data().iter().zip(expect) {
            assert!((v - e).abs() < 1e-3, "{v} vs {e}");
        }
    }

    #[test]
    fn constant_row_maps_to_zero() {
        let x = Tensor::<f64>::full(&[2, 3], 7.5);
        let (g, b) = unit_affine(3);
        let y = layer_norm(&x, &g, &b, 1e-6).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_eps_and_width() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        let (g, b) = unit_affine(3);
        assert!(matches!(layer_norm(&x, &g, &b, 0.0), Err(Error::Config(_))));
        let (g4, b4) = unit_affine(4);
        assert!(matches!(
            layer_norm(&x, &g4, &b4, 1e-6),
            Err(Error::Dimension { .. })
        ));
    }
}
