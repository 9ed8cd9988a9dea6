use crate::error::{Error, Result};
use crate::meter;
use crate::tensor::{Scalar, Tensor};

// Raw GEMM loops. Every output element accumulates over the inner index in
// ascending order, so results are bit-reproducible.

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    meter::add_macs((m * k * n) as u64);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    meter::add_macs((m * k * n) as u64);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    meter::add_macs((m * k * n) as u64);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            let c_row = &mut c[i * n..(i + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_pi * b_pj;
            }
        }
    }
}

fn matrix_dims<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::dim(op, other, &[0, 0])),
    }
}

/// `C = A·B` for 2-D operands.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = matrix_dims(a, "matmul")?;
    let (k2, n) = matrix_dims(b, "matmul")?;
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut c = Tensor::zeros(&[m, n]);
    gemm_nn(m, k, n, a.data(), b.data(), c.data_mut());
    Ok(c)
}

/// Vector-Jacobian product of [`matmul`]: `(dC·Bᵀ, Aᵀ·dC)`.
pub fn matmul_vjp<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dc: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, k) = matrix_dims(a, "matmul_vjp")?;
    let (k2, n) = matrix_dims(b, "matmul_vjp")?;
    if k != k2 {
        return Err(Error::dim("matmul_vjp", a.shape(), b.shape()));
    }
    if dc.shape() != [m, n] {
        return Err(Error::dim("matmul_vjp", dc.shape(), &[m, n]));
    }
    let mut da = Tensor::zeros(&[m, k]);
    gemm_nt(m, n, k, dc.data(), b.data(), da.data_mut());
    let mut db = Tensor::zeros(&[k, n]);
    gemm_tn(k, m, n, a.data(), dc.data(), db.data_mut());
    Ok((da, db))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_leaves_operand_unchanged() {
        let eye = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::<f64>::from_f64(&[2, 2], &[3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(matmul(&eye, &b).unwrap(), b);
    }

    #[test]
    fn row_times_column() {
        let a = Tensor::<f64>::from_f64(&[1, 2], &[1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::from_f64(&[2, 1], &[3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        match matmul(&a, &b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn gemm_variants_agree() {
        // aᵀ and bᵀ laid out explicitly
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2×3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3×2
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0]; // 2×3
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]; // 3×2
        let mut c1 = [0.0f64; 4];
        let mut c2 = [0.0f64; 4];
        let mut c3 = [0.0f64; 4];
        gemm_nn(2, 3, 2, &a, &b, &mut c1);
        gemm_nt(2, 3, 2, &a, &bt, &mut c2);
        gemm_tn(2, 3, 2, &at, &b, &mut c3);
        assert_eq!(c1, [58.0, 64.0, 139.0, 154.0]);
        assert_eq!(c1, c2);
        assert_eq!(c1, c3);
    }
}
