use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, "add", |x, y| x + y)
}

/// VJP of [`add`]: the cotangent flows to both inputs unchanged.
pub fn add_vjp<T: Scalar>(dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    (dy.clone(), dy.clone())
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, "sub", |x, y| x - y)
}

pub fn scale<T: Scalar>(x: &Tensor<T>, s: T) -> Tensor<T> {
    x.map(|v| v * s)
}

pub fn scale_vjp<T: Scalar>(dy: &Tensor<T>, s: T) -> Tensor<T> {
    dy.map(|v| v * s)
}

/// `x[B, ...] + table[...]`, broadcasting `table` over the leading axis.
pub fn add_broadcast<T: Scalar>(x: &Tensor<T>, table: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape().len() < 2 || x.shape()[1..] != *table.shape() {
        return Err(Error::dim("add_broadcast", x.shape(), table.shape()));
    }
    let n = table.numel();
    let mut out = x.clone();
    for chunk in out.data_mut().chunks_exact_mut(n) {
        for (v, &t) in chunk.iter_mut().zip(table.data()) {
            *v += t;
        }
    }
    Ok(out)
}

/// VJP of [`add_broadcast`] with respect to the table: sum over the leading axis.
pub fn add_broadcast_vjp<T: Scalar>(dy: &Tensor<T>, table_shape: &[usize]) -> Result<Tensor<T>> {
    if dy.shape().len() < 2 || dy.shape()[1..] != *table_shape {
        return Err(Error::dim("add_broadcast_vjp", dy.shape(), table_shape));
    }
    let mut acc = Tensor::zeros(table_shape);
    let n = acc.numel();
    for chunk in dy.data().chunks_exact(n) {
        for (a, &g) in acc.data_mut().iter_mut().zip(chunk) {
            *a += g;
        }
    }
    Ok(acc)
}

/// Concatenates along the trailing axis; leading extents must agree.
pub fn concat<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Invariant("concat of zero tensors".into()))?;
    let lead = &first.shape()[..first.ndim() - 1];
    for p in parts {
        if &p.shape()[..p.ndim() - 1] != lead {
            return Err(Error::dim("concat", first.shape(), p.shape()));
        }
    }
    let widths: Vec<usize> = parts.iter().map(|p| p.last_dim()).collect();
    let total: usize = widths.iter().sum();
    let rows = first.rows();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (p, &w) in parts.iter().zip(&widths) {
            data.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Ok(Tensor::from_parts(shape, data))
}

/// Splits along the trailing axis into pieces of the given widths.
/// Exact inverse of [`concat`], and therefore also its VJP.
pub fn split<T: Scalar>(x: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let d = x.last_dim();
    if widths.iter().sum::<usize>() != d || widths.contains(&0) {
        return Err(Error::dim("split", x.shape(), widths));
    }
    let rows = x.rows();
    let mut outs: Vec<Vec<T>> = widths
        .iter()
        .map(|w| Vec::with_capacity(rows * w))
        .collect();
    for row in x.data().chunks_exact(d) {
        let mut at = 0;
        for (out, &w) in outs.iter_mut().zip(widths) {
            out.extend_from_slice(&row[at..at + w]);
            at += w;
        }
    }
    Ok(outs
        .into_iter()
        .zip(widths)
        .map(|(data, &w)| {
            let mut shape = x.shape().to_vec();
            *shape.last_mut().expect("non-empty") = w;
            Tensor::from_parts(shape, data)
        })
        .collect())
}

/// Averages `[B, N, d]` over the token axis, giving `[B, d]`.
pub fn mean_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, n, d] = *x.shape() else {
        return Err(Error::dim("mean_pool", x.shape(), &[0, 0, 0]));
    };
    let inv = T::of(1.0 / n as f64);
    let mut out = vec![T::zero(); b * d];
    for (bi, sample) in x.data().chunks_exact(n * d).enumerate() {
        let acc = &mut out[bi * d..(bi + 1) * d];
        for row in sample.chunks_exact(d) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        for a in acc.iter_mut() {
            *a *= inv;
        }
    }
    Ok(Tensor::from_parts(vec![b, d], out))
}

/// VJP of [`mean_pool`]: spreads `dy[B, d]` evenly over `n` tokens.
pub fn mean_pool_vjp<T: Scalar>(dy: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    let [b, d] = *dy.shape() else {
        return Err(Error::dim("mean_pool_vjp", dy.shape(), &[0, 0]));
    };
    let inv = T::of(1.0 / n as f64);
    let mut out = Vec::with_capacity(b * n * d);
    for g in dy.data().chunks_exact(d) {
        for _ in 0..n {
            out.extend(g.iter().map(|&v| v * inv));
        }
    }
    Ok(Tensor::from_parts(vec![b, n, d], out))
}

/// Elementwise maximum; ties resolve to `a`.
pub fn maximum<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, "maximum", |x, y| if x >= y { x } else { y })
}

/// VJP of [`maximum`]: routes each cotangent to the selected input.
pub fn maximum_vjp<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    a.expect_same_shape(b, "maximum_vjp")?;
    a.expect_same_shape(dy, "maximum_vjp")?;
    let mut da = Tensor::zeros(a.shape());
    let mut db = Tensor::zeros(a.shape());
    for i in 0..a.numel() {
        if a.data()[i] >= b.data()[i] {
            da.data_mut()[i] = dy.data()[i];
        } else {
            db.data_mut()[i] = dy.data()[i];
        }
    }
    Ok((da, db))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_inverts_concat() {
        let a = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        let b = Tensor::<f64>::from_fn(&[2, 3, 2], |i| -(i as f64) - 0.25);
        let c = concat(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 3, 6]);
        let parts = split(&c, &[4, 2]).unwrap();
        assert!(parts[0].bit_eq(&a));
        assert!(parts[1].bit_eq(&b));
    }

    #[test]
    fn concat_rejects_mismatched_leading_extents() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[3, 3]);
        assert!(matches!(concat(&[&a, &b]), Err(Error::Dimension { .. })));
        assert!(split(&a, &[2, 2]).is_err());
    }

    #[test]
    fn mean_pool_of_identical_rows() {
        let row = [1.5, -2.0, 0.25];
        let x = Tensor::<f64>::from_fn(&[1, 5, 3], |i| row[i % 3]);
        assert_eq!(mean_pool(&x).unwrap().data(), &row);
    }

    #[test]
    fn add_vjp_passes_cotangent_through() {
        let dy = Tensor::<f64>::from_fn(&[3], |i| i as f64 + 1.0);
        let (da, db) = add_vjp(&dy);
        assert_eq!(da, dy);
        assert_eq!(db, dy);
    }

    #[test]
    fn maximum_is_idempotent() {
        let a = Tensor::<f64>::from_fn(&[4], |i| i as f64 - 1.5);
        assert_eq!(maximum(&a, &a).unwrap(), a);
    }

    #[test]
    fn broadcast_table_grad_sums_batch() {
        let dy = Tensor::<f64>::full(&[3, 2, 2], 1.0);
        let g = add_broadcast_vjp(&dy, &[2, 2]).unwrap();
        assert!(g.data().iter().all(|&v| v == 3.0));
    }
}
