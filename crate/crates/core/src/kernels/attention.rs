use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::matmul::{gemm_nn, gemm_nt, gemm_tn};
use super::softmax::softmax_rows_in_place;

struct Dims {
    batch: usize,
    nq: usize,
    nk: usize,
    d: usize,
    heads: usize,
    dh: usize,
}

fn dims<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, heads: usize) -> Result<Dims> {
    let [batch, nq, d] = *q.shape() else {
        return Err(Error::dim("attention", q.shape(), k.shape()));
    };
    let [kb, nk, kd] = *k.shape() else {
        return Err(Error::dim("attention", q.shape(), k.shape()));
    };
    if kb != batch || kd != d || k.shape() != v.shape() {
        return Err(Error::dim("attention", q.shape(), k.shape()));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "width {d} is not divisible into {heads} heads"
        )));
    }
    Ok(Dims {
        batch,
        nq,
        nk,
        d,
        heads,
        dh: d / heads,
    })
}

/// Copies head `h` of sample `b` out of a `[B, N, d]` buffer into `[N, dh]`.
fn gather<T: Scalar>(src: &[T], b: usize, n: usize, d: usize, h: usize, dh: usize, dst: &mut [T]) {
    for t in 0..n {
        let s = (b * n + t) * d + h * dh;
        dst[t * dh..(t + 1) * dh].copy_from_slice(&src[s..s + dh]);
    }
}

fn scatter<T: Scalar>(src: &[T], b: usize, n: usize, d: usize, h: usize, dh: usize, dst: &mut [T]) {
    for t in 0..n {
        let s = (b * n + t) * d + h * dh;
        dst[s..s + dh].copy_from_slice(&src[t * dh..(t + 1) * dh]);
    }
}

/// Scaled dot-product attention over `heads` equal channel groups.
///
/// `q` is `[B, Nq, d]`, `k` and `v` are `[B, Nk, d]`. Returns the attended
/// values `[B, Nq, d]` and the attention weights `[B, heads, Nq, Nk]`, which
/// the VJP consumes. Scores are scaled by `1/√(d/heads)`.
pub fn multi_head_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = dims(q, k, v, heads)?;
    let scale = T::of(1.0 / (g.dh as f64).sqrt());
    let mut out = vec![T::zero(); g.batch * g.nq * g.d];
    let mut probs = vec![T::zero(); g.batch * g.heads * g.nq * g.nk];
    let mut qh = vec![T::zero(); g.nq * g.dh];
    let mut kh = vec![T::zero(); g.nk * g.dh];
    let mut vh = vec![T::zero(); g.nk * g.dh];
    let mut oh = vec![T::zero(); g.nq * g.dh];
    for b in 0..g.batch {
        for h in 0..g.heads {
            gather(q.data(), b, g.nq, g.d, h, g.dh, &mut qh);
            gather(k.data(), b, g.nk, g.d, h, g.dh, &mut kh);
            gather(v.data(), b, g.nk, g.d, h, g.dh, &mut vh);
            let p =
                &mut probs[(b * g.heads + h) * g.nq * g.nk..(b * g.heads + h + 1) * g.nq * g.nk];
            gemm_nt(g.nq, g.dh, g.nk, &qh, &kh, p);
            for s in p.iter_mut() {
                *s *= scale;
            }
            softmax_rows_in_place(p, g.nk);
            oh.fill(T::zero());
            gemm_nn(g.nq, g.nk, g.dh, p, &vh, &mut oh);
            scatter(&oh, b, g.nq, g.d, h, g.dh, &mut out);
        }
    }
    Ok((
        Tensor::from_parts(vec![g.batch, g.nq, g.d], out),
        Tensor::from_parts(vec![g.batch, g.heads, g.nq, g.nk], probs),
    ))
}

/// VJP of [`multi_head_attention`]; returns `(dq, dk, dv)`.
pub fn multi_head_attention_vjp<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &Tensor<T>,
    heads: usize,
    dout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = dims(q, k, v, heads)?;
    if probs.shape() != [g.batch, g.heads, g.nq, g.nk] {
        return Err(Error::dim(
            "attention_vjp",
            probs.shape(),
            &[g.batch, g.heads, g.nq, g.nk],
        ));
    }
    q.expect_same_shape(dout, "attention_vjp")?;
    let scale = T::of(1.0 / (g.dh as f64).sqrt());
    let mut dq = vec![T::zero(); q.numel()];
    let mut dk = vec![T::zero(); k.numel()];
    let mut dv = vec![T::zero(); v.numel()];
    let mut qh = vec![T::zero(); g.nq * g.dh];
    let mut kh = vec![T::zero(); g.nk * g.dh];
    let mut vh = vec![T::zero(); g.nk * g.dh];
    let mut doh = vec![T::zero(); g.nq * g.dh];
    let mut dp = vec![T::zero(); g.nq * g.nk];
    let mut dqh = vec![T::zero(); g.nq * g.dh];
    let mut dkh = vec![T::zero(); g.nk * g.dh];
    let mut dvh = vec![T::zero(); g.nk * g.dh];
    for b in 0..g.batch {
        for h in 0..g.heads {
            gather(q.data(), b, g.nq, g.d, h, g.dh, &mut qh);
            gather(k.data(), b, g.nk, g.d, h, g.dh, &mut kh);
            gather(v.data(), b, g.nk, g.d, h, g.dh, &mut vh);
            gather(dout.data(), b, g.nq, g.d, h, g.dh, &mut doh);
            let p =
                &probs.data()[(b * g.heads + h) * g.nq * g.nk..(b * g.heads + h + 1) * g.nq * g.nk];

            dp.fill(T::zero());
            gemm_nt(g.nq, g.dh, g.nk, &doh, &vh, &mut dp);
            dvh.fill(T::zero());
            gemm_tn(g.nk, g.nq, g.dh, p, &doh, &mut dvh);

            // softmax backward, row by row, folded with the score scale
            for (p_row, dp_row) in p.chunks_exact(g.nk).zip(dp.chunks_exact_mut(g.nk)) {
                let mut dot = T::zero();
                for (&pi, &gi) in p_row.iter().zip(dp_row.iter()) {
                    dot += pi * gi;
                }
                for (&pi, gi) in p_row.iter().zip(dp_row.iter_mut()) {
                    *gi = pi * (*gi - dot) * scale;
                }
            }

            dqh.fill(T::zero());
            gemm_nn(g.nq, g.nk, g.dh, &dp, &kh, &mut dqh);
            dkh.fill(T::zero());
            gemm_tn(g.nk, g.nq, g.dh, &dp, &qh, &mut dkh);

            scatter(&dqh, b, g.nq, g.d, h, g.dh, &mut dq);
            scatter(&dkh, b, g.nk, g.d, h, g.dh, &mut dk);
            scatter(&dvh, b, g.nk, g.d, h, g.dh, &mut dv);
        }
    }
    Ok((
        Tensor::from_parts(q.shape().to_vec(), dq),
        Tensor::from_parts(k.shape().to_vec(), dk),
        Tensor::from_parts(v.shape().to_vec(), dv),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_key_returns_its_value() {
        let q = Tensor::<f64>::from_fn(&[1, 3, 4], |i| i as f64 * 0.3);
        let k = Tensor::<f64>::from_fn(&[1, 1, 4], |i| 1.0 - i as f64);
        let v = Tensor::<f64>::from_f64(&[1, 1, 4], &[2.0, -1.0, 0.5, 7.0]).unwrap();
        let (out, probs) = multi_head_attention(&q, &k, &v, 2).unwrap();
        assert!(probs.data().iter().all(|&p| p == 1.0));
        for row in out.data().chunks(4) {
            assert_eq!(row, v.data());
        }
    }

    #[test]
    fn rows_of_weights_sum_to_one() {
        let q = Tensor::<f64>::from_fn(&[2, 5, 6], |i| (i as f64 * 0.41).sin());
        let k = Tensor::<f64>::from_fn(&[2, 3, 6], |i| (i as f64 * 0.13).cos());
        let (_, probs) = multi_head_attention(&q, &k, &k, 3).unwrap();
        for row in probs.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn head_count_must_divide_width() {
        let q = Tensor::<f64>::zeros(&[1, 2, 6]);
        assert!(matches!(
            multi_head_attention(&q, &q, &q, 4),
            Err(Error::Config(_))
        ));
    }
}
