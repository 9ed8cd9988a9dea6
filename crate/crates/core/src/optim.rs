//! SGD with momentum and AdamW, both with decoupled weight decay.
//!
//! Weight decay applies to tensors with two or more dimensions only.

use crate::config::{OptimizerKind, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::{Scalar, Tensor};

pub struct Optimizer<T: Scalar> {
    cfg: TrainConfig,
    /// First moment (or momentum buffer), keyed by parameter name.
    m: Vec<(String, Tensor<T>)>,
    /// Second moment; empty for SGD.
    v: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: &TrainConfig, model: &impl Module<T>) -> Self {
        let mut m = Vec::new();
        model.visit_params("", &mut |n, p| {
            m.push((n.to_string(), Tensor::zeros(p.value.shape())))
        });
        let v = match cfg.optimizer {
            OptimizerKind::Adamw => m
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
            OptimizerKind::Sgd => Vec::new(),
        };
        Self {
            cfg: cfg.clone(),
            m,
            v,
        }
    }

    /// Learning rate for a zero-based step, with linear warmup.
    pub fn lr_at(&self, step: u64) -> f64 {
        let w = self.cfg.warmup_steps;
        if w > 0 && step < w {
            self.cfg.lr * (step + 1) as f64 / w as f64
        } else {
            self.cfg.lr
        }
    }

    /// Applies one update for zero-based `step` using accumulated gradients.
    pub fn step(&mut self, model: &mut impl Module<T>, step: u64) -> Result<()> {
        let lr = self.lr_at(step);
        let c = &self.cfg;
        let t = (step + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let mut i = 0;
        let mut err = None;
        model.visit_params_mut("", &mut |name, p| {
            if err.is_some() {
                return;
            }
            let Some((mname, m)) = self.m.get_mut(i) else {
                err = Some(Error::Invariant(format!(
                    "optimizer has no state for {name}"
                )));
                return;
            };
            if mname != name || m.shape() != p.value.shape() {
                err = Some(Error::Invariant(format!(
                    "optimizer state {mname} does not match {name}"
                )));
                return;
            }
            let decay = if p.value.ndim() >= 2 {
                c.weight_decay
            } else {
                0.0
            };
            let g = p.grad.data();
            let w = p.value.data_mut();
            let m = m.data_mut();
            match c.optimizer {
                OptimizerKind::Sgd => {
                    for k in 0..w.len() {
                        let mk = c.momentum * m[k].as_f64() + g[k].as_f64();
                        m[k] = T::of(mk);
                        let wk = w[k].as_f64();
                        w[k] = T::of(wk - lr * (mk + decay * wk));
                    }
                }
                OptimizerKind::Adamw => {
                    let v = self.v[i].1.data_mut();
                    for k in 0..w.len() {
                        let gk = g[k].as_f64();
                        let mk = c.beta1 * m[k].as_f64() + (1.0 - c.beta1) * gk;
                        let vk = c.beta2 * v[k].as_f64() + (1.0 - c.beta2) * gk * gk;
                        m[k] = T::of(mk);
                        v[k] = T::of(vk);
                        let wk = w[k].as_f64();
                        let update = (mk / bc1) / ((vk / bc2).sqrt() + c.eps);
                        w[k] = T::of(wk - lr * (update + decay * wk));
                    }
                }
            }
            i += 1;
        });
        match err {
            Some(e) => Err(e),
            None if i != self.m.len() => {
                Err(Error::Invariant("optimizer state has extra entries".into()))
            }
            None => Ok(()),
        }
    }

    /// Moment tensors named `m.<param>` and `v.<param>`.
    pub fn state(&self) -> Vec<(String, Tensor<T>)> {
        let tag = |p: &str, list: &[(String, Tensor<T>)]| {
            list.iter()
                .map(|(n, t)| (format!("{p}.{n}"), t.clone()))
                .collect::<Vec<_>>()
        };
        let mut out = tag("m", &self.m);
        out.extend(tag("v", &self.v));
        out
    }

    pub fn load_state(&mut self, state: &[(String, Tensor<T>)]) -> Result<()> {
        let expected = self.m.len() + self.v.len();
        if state.len() != expected {
            return Err(Error::Checkpoint(format!(
                "optimizer state has {} tensors, expected {expected}",
                state.len()
            )));
        }
        let (ms, vs) = state.split_at(self.m.len());
        for (dst, prefix, src) in [(&mut self.m, "m", ms), (&mut self.v, "v", vs)] {
            for ((name, t), (sname, s)) in dst.iter_mut().zip(src) {
                if *sname != format!("{prefix}.{name}") || s.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!(
                        "optimizer state {sname} does not match {prefix}.{name}"
                    )));
                }
                *t = s.clone();
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Linear, Param};

    struct Quad(Param<f64>);

    impl Module<f64> for Quad {
        fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<f64>)) {
            f(&format!("{prefix}w"), &self.0);
        }
        fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
            f(&format!("{prefix}w"), &mut self.0);
        }
    }

    fn minimise(kind: OptimizerKind) -> f64 {
        let cfg = TrainConfig {
            optimizer: kind,
            lr: 0.05,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut q = Quad(Param::new(Tensor::from_f64(&[2], &[3.0, -2.0]).unwrap()));
        let mut opt = Optimizer::new(&cfg, &q);
        for s in 0..400 {
            let w = q.0.value.clone();
            q.0.grad = w.map(|x| 2.0 * x);
            opt.step(&mut q, s).unwrap();
        }
        q.0.value.max_abs()
    }

    #[test]
    fn both_optimizers_descend() {
        assert!(minimise(OptimizerKind::Sgd) < 1e-3);
        assert!(minimise(OptimizerKind::Adamw) < 1e-2);
    }

    #[test]
    fn first_adam_step_is_lr_sized() {
        let cfg = TrainConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut q = Quad(Param::new(Tensor::from_f64(&[1], &[1.0]).unwrap()));
        q.0.grad = Tensor::from_f64(&[1], &[123.0]).unwrap();
        let mut opt = Optimizer::new(&cfg, &q);
        opt.step(&mut q, 0).unwrap();
        assert!((q.0.value.data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn decay_skips_vectors() {
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            lr: 0.1,
            weight_decay: 0.5,
            ..TrainConfig::default()
        };
        let mut lin: Linear<f64> =
            Linear::from_tensors(Tensor::full(&[2, 2], 1.0), Tensor::full(&[2], 1.0));
        let mut opt = Optimizer::new(&cfg, &lin);
        opt.step(&mut lin, 0).unwrap();
        let mut seen = Vec::new();
        lin.visit_params("", &mut |n, p| {
            seen.push((n.to_string(), p.value.data()[0]))
        });
        assert!(seen.iter().any(|(_, v)| (*v - 0.95).abs() < 1e-12));
        assert!(seen.iter().any(|(_, v)| *v == 1.0));
    }

    #[test]
    fn warmup_ramps() {
        let cfg = TrainConfig {
            lr: 1.0,
            warmup_steps: 4,
            ..TrainConfig::default()
        };
        let q = Quad(Param::new(Tensor::zeros(&[1])));
        let opt: Optimizer<f64> = Optimizer::new(&cfg, &q);
        assert_eq!(opt.lr_at(0), 0.25);
        assert_eq!(opt.lr_at(3), 1.0);
        assert_eq!(opt.lr_at(10), 1.0);
    }
}
