//! Central finite-difference audit of every kernel VJP.
//!
//! Each check draws random 64-bit inputs and a random cotangent `w`, forms the
//! scalar `L = Σ w ⊙ f(x)`, and compares the analytic VJP with
//! `(L(x + h·e_i) − L(x − h·e_i)) / 2h` for every input element.

use rand::Rng;

use crate::error::Result;
use crate::kernels::{self, Grid, PatchGeometry};
use crate::rng;
use crate::tensor::{rel_err, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-5;

type Forward<'a> = dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>> + 'a;
type Vjp<'a> = dyn Fn(&[Tensor<f64>], &Tensor<f64>) -> Result<Vec<Tensor<f64>>> + 'a;

/// Central-difference gradient of a scalar function.
pub fn central_difference(
    x: &Tensor<f64>,
    h: f64,
    mut f: impl FnMut(&Tensor<f64>) -> Result<f64>,
) -> Result<Tensor<f64>> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Largest relative error over all inputs between the analytic VJP and
/// central differences. `corrupt` perturbs the analytic result first.
pub fn audit(
    inputs: &[Tensor<f64>],
    forward: &Forward<'_>,
    vjp: &Vjp<'_>,
    seed: u64,
    corrupt: bool,
) -> Result<f64> {
    let y = forward(inputs)?;
    let mut r = rng::rng_from(seed ^ 0xC07A);
    let w: Tensor<f64> = rng::uniform(y.shape(), -1.0, 1.0, &mut r);
    let mut analytic = vjp(inputs, &w)?;
    if corrupt {
        let g = &mut analytic[0];
        let bump = 1e-2 * (1.0 + g.max_abs());
        g.data_mut()[0] += bump;
    }
    let mut worst = 0.0f64;
    for (k, grad) in analytic.iter().enumerate() {
        let numeric = central_difference(&inputs[k], FD_STEP, |xk| {
            let mut probe = inputs.to_vec();
            probe[k] = xk.clone();
            Ok(dot(&forward(&probe)?, &w))
        })?;
        worst = worst.max(rel_err(grad, &numeric));
    }
    Ok(worst)
}

/// A named kernel audit.
#[derive(Clone, Copy)]
pub struct KernelCheck {
    pub name: &'static str,
    pub check: fn(seed: u64, corrupt: bool) -> Result<f64>,
}

#[derive(Debug, Clone)]
pub struct KernelReport {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    rng::uniform(shape, -1.0, 1.0, &mut rng::rng_from(seed))
}

fn check_matmul(seed: u64, corrupt: bool) -> Result<f64> {
    let inputs = [rand(&[5, 7], seed), rand(&[7, 3], seed + 1)];
    audit(
        &inputs,
        &|x| kernels::matmul(&x[0], &x[1]),
        &|x, dy| {
            let (da, db) = kernels::matmul_vjp(&x[0], &x[1], dy)?;
            Ok(vec![da, db])
        },
        seed,
        corrupt,
    )
}

fn check_linear(seed: u64, corrupt: bool) -> Result<f64> {
    let inputs = [
        rand(&[3, 5], seed),
        rand(&[5, 2], seed + 1),
        rand(&[2], seed + 2),
    ];
    audit(
        &inputs,
        &|x| kernels::linear(&x[0], &x[1], &x[2]),
        &|x, dy| {
            let g = kernels::linear_vjp(&x[0], &x[1], dy)?;
            Ok(vec![g.dx, g.dw, g.db])
        },
        seed,
        corrupt,
    )
}

fn check_layer_norm(seed: u64, corrupt: bool) -> Result<f64> {
    let inputs = [
        rand(&[3, 6], seed),
        rand(&[6], seed + 1),
        rand(&[6], seed + 2),
    ];
    let eps = 1e-6;
    audit(
        &inputs,
        &|x| kernels::layer_norm(&x[0], &x[1], &x[2], eps),
        &|x, dy| {
            let (_, stats) = kernels::layer_norm_with_stats(&x[0], &x[1], &x[2], eps)?;
            let (dx, dg, db) = kernels::layer_norm_vjp(&stats, &x[1], dy)?;
            Ok(vec![dx, dg, db])
        },
        seed,
        corrupt,
    )
}

fn check_gelu(seed: u64, corrupt: bool) -> Result<f64> {
    let inputs = [rand(&[4, 5], seed).map(|v| 3.0 * v)];
    audit(
        &inputs,
        &|x| Ok(kernels::gelu(&x[0])),
        &|x, dy| Ok(vec![kernels::gelu_vjp(&x[0], dy)?]),
        seed,
        corrupt,
    )
}

fn check_softmax(seed: u64, corrupt: bool) -> Result<f64> {
    let inputs = [rand(&[3, 4, 5], seed).map(|v| 2.0 * v)];
    let mut worst = 0.0f64;
    for axis in 0..3 {
        let e = audit(
            &inputs,
            &|x| kernels::softmax(&x[0], axis),
            &|x, dy| {
                let y = kernels::softmax(&x[0], axis)?;
                Ok(vec![kernels::softmax_vjp(&y, dy, axis)?])
            },
            seed + axis as u64,
            corrupt,
        )?;
        worst = worst.max(e);
    }
    Ok(worst)
}

fn check_depthwise_conv_pool(seed: u64, corrupt: bool) -> Result<f64> {
    let grid = Grid::square(8);
    let inputs = [rand(&[1, 64, 3], seed), rand(&[3, 3, 3], seed + 1)];
    audit(
        &inputs,
        &|x| Ok(kernels::depthwise_conv_pool(&x[0], grid, &x[1], (2, 2))?.0),
        &|x, dy| {
            let (dx, dk) = kernels::depthwise_conv_pool_vjp(&x[0], grid, &x[1], (2, 2), dy)?;
            Ok(vec![dx, dk])
        },
        seed,
        corrupt,
    )
}

fn check_im2col(seed: u64, corrupt: bool) -> Result<f64> {
    let geo = PatchGeometry {
        kernel: 3,
        stride: 2,
        padding: 1,
    };
    let inputs = [rand(&[2, 5, 5, 2], seed)];
    audit(
        &inputs,
        &|x| Ok(kernels::im2col(&x[0], geo)?.0),
        &|x, dy| Ok(vec![kernels::im2col_vjp(x[0].shape(), geo, dy)?]),
        seed,
        corrupt,
    )
}

fn check_attention(seed: u64, corrupt: bool) -> Result<f64> {
    let inputs = [
        rand(&[2, 3, 4], seed),
        rand(&[2, 5, 4], seed + 1),
        rand(&[2, 5, 4], seed + 2),
    ];
    audit(
        &inputs,
        &|x| Ok(kernels::multi_head_attention(&x[0], &x[1], &x[2], 2)?.0),
        &|x, dy| {
            let (_, probs) = kernels::multi_head_attention(&x[0], &x[1], &x[2], 2)?;
            let (dq, dk, dv) =
                kernels::multi_head_attention_vjp(&x[0], &x[1], &x[2], &probs, 2, dy)?;
            Ok(vec![dq, dk, dv])
        },
        seed,
        corrupt,
    )
}

fn check_add(seed: u64, corrupt: bool) -> Result<f64> {
    let inputs = [rand(&[3, 4], seed), rand(&[3, 4], seed + 1)];
    audit(
        &inputs,
        &|x| kernels::add(&x[0], &x[1]),
        &|_, dy| {
            let (a, b) = kernels::add_vjp(dy);
            Ok(vec![a, b])
        },
        seed,
        corrupt,
    )
}

fn check_scale(seed: u64, corrupt: bool) -> Result<f64> {
    let inputs = [rand(&[3, 4], seed)];
    audit(
        &inputs,
        &|x| Ok(kernels::scale(&x[0], 1.7)),
        &|_, dy| Ok(vec![kernels::scale_vjp(dy, 1.7)]),
        seed,
        corrupt,
    )
}

fn check_add_broadcast(seed: u64, corrupt: bool) -> Result<f64> {
    let inputs = [rand(&[3, 4, 2], seed), rand(&[4, 2], seed + 1)];
    audit(
        &inputs,
        &|x| kernels::add_broadcast(&x[0], &x[1]),
        &|x, dy| {
            Ok(vec![
                dy.clone(),
                kernels::add_broadcast_vjp(dy, x[1].shape())?,
            ])
        },
        seed,
        corrupt,
    )
}

fn check_concat(seed: u64, corrupt: bool) -> Result<f64> {
    let inputs = [rand(&[2, 3, 2], seed), rand(&[2, 3, 4], seed + 1)];
    audit(
        &inputs,
        &|x| kernels::concat(&[&x[0], &x[1]]),
        &|_, dy| kernels::split(dy, &[2, 4]),
        seed,
        corrupt,
    )
}

fn check_split(seed: u64, corrupt: bool) -> Result<f64> {
    let inputs = [rand(&[2, 3, 5], seed)];
    audit(
        &inputs,
        &|x| Ok(kernels::split(&x[0], &[2, 3])?.swap_remove(1)),
        &|_, dy| {
            let pad = Tensor::zeros(&[2, 3, 2]);
            Ok(vec![kernels::concat(&[&pad, dy])?])
        },
        seed,
        corrupt,
    )
}

fn check_mean_pool(seed: u64, corrupt: bool) -> Result<f64> {
    let inputs = [rand(&[2, 5, 3], seed)];
    audit(
        &inputs,
        &|x| kernels::mean_pool(&x[0]),
        &|_, dy| Ok(vec![kernels::mean_pool_vjp(dy, 5)?]),
        seed,
        corrupt,
    )
}

fn check_maximum(seed: u64, corrupt: bool) -> Result<f64> {
    // Keep every pair at least 0.1 apart so ±h never crosses a kink.
    let a = rand(&[3, 4], seed);
    let mut r = rng::rng_from(seed + 1);
    let b = Tensor::from_fn(a.shape(), |i| {
        let off = r.random_range(0.1..1.0);
        if r.random::<bool>() {
            a.data()[i] + off
        } else {
            a.data()[i] - off
        }
    });
    audit(
        &[a, b],
        &|x| kernels::maximum(&x[0], &x[1]),
        &|x, dy| {
            let (da, db) = kernels::maximum_vjp(&x[0], &x[1], dy)?;
            Ok(vec![da, db])
        },
        seed,
        corrupt,
    )
}

fn check_cross_entropy(seed: u64, corrupt: bool) -> Result<f64> {
    let labels = [0usize, 3, 1];
    let inputs = [rand(&[3, 4], seed).map(|v| 2.0 * v)];
    audit(
        &inputs,
        &|x| {
            Ok(Tensor::scalar(
                kernels::softmax_cross_entropy(&x[0], &labels)?.0,
            ))
        },
        &|x, dy| {
            let (_, g, _) = kernels::softmax_cross_entropy(&x[0], &labels)?;
            Ok(vec![kernels::scale(&g, dy.data()[0])])
        },
        seed,
        corrupt,
    )
}

fn check_drop_path(seed: u64, corrupt: bool) -> Result<f64> {
    let inputs = [rand(&[6, 3, 2], seed)];
    let key = seed.wrapping_mul(31);
    audit(
        &inputs,
        &|x| crate::rev::drop_path(&x[0], 0.4, key, true),
        &|_, dy| Ok(vec![crate::rev::drop_path_vjp(dy, 0.4, key, true)?]),
        seed,
        corrupt,
    )
}

/// Every kernel with a VJP, in audit order.
pub fn registry() -> Vec<KernelCheck> {
    macro_rules! checks {
        ($($name:literal => $f:ident),* $(,)?) => {
            vec![$(KernelCheck { name: $name, check: $f }),*]
        };
    }
    checks![
        "matmul" => check_matmul,
        "linear" => check_linear,
        "layer_norm" => check_layer_norm,
        "gelu" => check_gelu,
        "softmax" => check_softmax,
        "depthwise_conv_pool" => check_depthwise_conv_pool,
        "im2col" => check_im2col,
        "multi_head_attention" => check_attention,
        "add" => check_add,
        "scale" => check_scale,
        "add_broadcast" => check_add_broadcast,
        "concat" => check_concat,
        "split" => check_split,
        "mean_pool" => check_mean_pool,
        "maximum" => check_maximum,
        "softmax_cross_entropy" => check_cross_entropy,
        "drop_path" => check_drop_path,
    ]
}

/// Runs every check. `corrupt` names a kernel whose VJP output is perturbed
/// before comparison, for fault-injection runs.
pub fn run_audit(seed: u64, corrupt: Option<&str>) -> Result<Vec<KernelReport>> {
    registry()
        .into_iter()
        .map(|k| {
            let e = (k.check)(seed, corrupt == Some(k.name))?;
            Ok(KernelReport {
                name: k.name,
                max_rel_err: e,
                passed: e < FD_TOLERANCE,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_kernel_passes() {
        for r in run_audit(11, None).unwrap() {
            assert!(r.passed, "{} rel err {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn corruption_is_attributed_to_the_kernel() {
        let reports = run_audit(11, Some("layer_norm")).unwrap();
        let failed: Vec<_> = reports
            .iter()
            .filter(|r| !r.passed)
            .map(|r| r.name)
            .collect();
        assert_eq!(failed, ["layer_norm"]);
    }

    #[test]
    fn difference_of_a_quadratic_is_exact() {
        let x = Tensor::from_f64(&[2], &[1.5, -2.0]).unwrap();
        let g = central_difference(&x, 1e-3, |t| Ok(t.data().iter().map(|v| v * v).sum())).unwrap();
        assert!((g.data()[0] - 3.0).abs() < 1e-9);
        assert!((g.data()[1] + 4.0).abs() < 1e-9);
    }
}
