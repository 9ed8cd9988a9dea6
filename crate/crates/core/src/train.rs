//! Desk-scale training on the synthetic mixture.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint::{self, Checkpoint, RngState};
use crate::config::{Precision, RunConfig};
use crate::data::SyntheticDataset;
use crate::error::{Error, Result};
use crate::model::RevNet;
use crate::nn::Module;
use crate::optim::Optimizer;
use crate::rev::{Schedule, StepContext};
use crate::tensor::{DType, Scalar, Tensor};

pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.rvt";

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainRecord {
    /// Steps completed, starting at 1.
    pub step: u64,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

pub struct Trainer<T: Scalar> {
    cfg: RunConfig,
    net: RevNet<T>,
    opt: Optimizer<T>,
    data: SyntheticDataset<T>,
    schedule: Schedule,
    step: u64,
}

/// Copies named tensors into a model, checking names and shapes.
pub fn load_params<T: Scalar>(
    net: &mut impl Module<T>,
    params: &[(String, Tensor<T>)],
) -> Result<()> {
    let mut i = 0;
    let mut err = None;
    net.visit_params_mut("", &mut |name, p| {
        if err.is_some() {
            return;
        }
        match params.get(i) {
            Some((n, t)) if n == name && t.shape() == p.value.shape() => p.value = t.clone(),
            Some((n, t)) => {
                err = Some(Error::Checkpoint(format!(
                    "parameter {i} is {n} {:?}, model expects {name} {:?}",
                    t.shape(),
                    p.value.shape()
                )))
            }
            None => err = Some(Error::Checkpoint(format!("missing parameter {name}"))),
        }
        i += 1;
    });
    match err {
        Some(e) => Err(e),
        None if i != params.len() => Err(Error::Checkpoint(format!(
            "{} unexpected parameters",
            params.len() - i
        ))),
        None => Ok(()),
    }
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let net = cfg.model.build::<T>(cfg.seed)?;
        let data = SyntheticDataset::generate(
            &cfg.train.data,
            cfg.model.image_size(),
            cfg.model.in_chans(),
            cfg.model.num_classes(),
            cfg.seed,
        )?;
        let opt = Optimizer::new(&cfg.train, &net);
        Ok(Self {
            cfg: cfg.clone(),
            net,
            opt,
            data,
            schedule: cfg.schedule(),
            step: 0,
        })
    }

    /// Rebuilds a trainer from a checkpoint using its embedded configuration.
    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        let cfg = RunConfig::parse(&ck.config)?;
        if ck.rng.seed != cfg.seed || ck.rng.counter != ck.step {
            return Err(Error::Checkpoint(
                "rng state disagrees with config seed or step".into(),
            ));
        }
        let mut t = Self::new(&cfg)?;
        load_params(&mut t.net, &ck.params)?;
        t.opt.load_state(&ck.optimizer)?;
        t.step = ck.step;
        Ok(t)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn net(&self) -> &RevNet<T> {
        &self.net
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn set_schedule(&mut self, schedule: Schedule) {
        self.schedule = schedule;
    }

    pub fn step(&mut self) -> Result<TrainRecord> {
        let (images, labels) = self.data.batch(self.step, self.cfg.train.batch);
        let ctx = StepContext::train(self.cfg.seed, self.step);
        self.net.zero_grad();
        let stats = self.net.backprop(&images, &labels, &ctx, self.schedule)?;
        let lr = self.opt.lr_at(self.step);
        self.opt.step(&mut self.net, self.step)?;
        self.step += 1;
        Ok(TrainRecord {
            step: self.step,
            loss: stats.loss,
            accuracy: stats.accuracy(),
            lr,
        })
    }

    /// Steps until `until` steps are done, reporting every record.
    pub fn run_until(
        &mut self,
        until: u64,
        mut on_step: impl FnMut(&TrainRecord) -> Result<()>,
    ) -> Result<Vec<TrainRecord>> {
        let mut out = Vec::new();
        while self.step < until {
            let r = self.step()?;
            on_step(&r)?;
            out.push(r);
        }
        Ok(out)
    }

    /// Mean loss and accuracy over the whole training set in eval mode.
    pub fn evaluate(&self) -> Result<(f64, f64)> {
        let ctx = StepContext::eval();
        let (mut loss, mut correct, mut n) = (0.0, 0usize, 0usize);
        for (images, labels) in self.data.chunks(self.cfg.train.batch) {
            let logits = self.net.forward(&images, &ctx)?;
            let (l, _, c) = crate::kernels::softmax_cross_entropy(&logits, &labels)?;
            loss += l.as_f64() * labels.len() as f64;
            correct += c;
            n += labels.len();
        }
        Ok((loss / n as f64, correct as f64 / n as f64))
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: self.cfg.to_toml(),
            step: self.step,
            rng: RngState {
                seed: self.cfg.seed,
                counter: self.step,
            },
            params: self.net.named_params(),
            optimizer: self.opt.state(),
        }
    }
}

/// Outcome of a training command.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_loss: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub log: PathBuf,
    pub checkpoint: PathBuf,
}

fn run<T: Scalar>(mut trainer: Trainer<T>, steps: u64, out: &Path) -> Result<TrainSummary> {
    std::fs::create_dir_all(out)?;
    let log = out.join(LOG_FILE);
    let mut w = csv::Writer::from_path(&log)?;
    let records = trainer.run_until(steps, |r| Ok(w.serialize(r)?))?;
    w.flush()?;
    let ck = out.join(CHECKPOINT_FILE);
    trainer.checkpoint().save(&ck)?;
    let (train_loss, train_accuracy) = trainer.evaluate()?;
    Ok(TrainSummary {
        steps: trainer.steps_done(),
        final_loss: records.last().map_or(f64::NAN, |r| r.loss),
        train_loss,
        train_accuracy,
        log,
        checkpoint: ck,
    })
}

/// Trains from scratch, or from `resume`, until `cfg.train.steps` steps are
/// done. On resume the model, data and optimizer come from the checkpoint.
pub fn cmd_train(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    let steps = cfg.train.steps;
    match resume {
        None => match cfg.train.precision {
            Precision::F32 => run(Trainer::<f32>::new(cfg)?, steps, out),
            Precision::F64 => run(Trainer::<f64>::new(cfg)?, steps, out),
        },
        Some(path) => match checkpoint::peek_dtype(path)? {
            Some(DType::F64) => run(
                Trainer::<f64>::from_checkpoint(&Checkpoint::load(path)?)?,
                steps,
                out,
            ),
            _ => run(
                Trainer::<f32>::from_checkpoint(&Checkpoint::load(path)?)?,
                steps,
                out,
            ),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(steps: u64) -> RunConfig {
        let mut cfg = RunConfig::from_preset("rev_vit_tiny").unwrap();
        cfg.train.steps = steps;
        cfg.train.batch = 8;
        cfg.train.data.samples = 64;
        cfg
    }

    #[test]
    fn loss_decreases() {
        let mut t = Trainer::<f32>::new(&tiny(30)).unwrap();
        let log = t.run_until(30, |_| Ok(())).unwrap();
        let first: f64 = log[..5].iter().map(|r| r.loss).sum();
        let last: f64 = log[25..].iter().map(|r| r.loss).sum();
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn resume_is_bit_exact() {
        let cfg = tiny(6);
        let mut straight = Trainer::<f32>::new(&cfg).unwrap();
        straight.run_until(6, |_| Ok(())).unwrap();

        let mut first = Trainer::<f32>::new(&cfg).unwrap();
        first.run_until(3, |_| Ok(())).unwrap();
        let bytes = first.checkpoint().to_bytes().unwrap();
        let ck = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        let mut resumed = Trainer::from_checkpoint(&ck).unwrap();
        resumed.run_until(6, |_| Ok(())).unwrap();

        assert_eq!(resumed.checkpoint(), straight.checkpoint());
    }

    #[test]
    fn load_params_checks_names() {
        let cfg = tiny(1);
        let mut t = Trainer::<f32>::new(&cfg).unwrap();
        let mut params = t.net().named_params();
        params[0].0 = "wrong".into();
        assert!(matches!(
            load_params(&mut t.net, &params),
            Err(Error::Checkpoint(_))
        ));
        params.pop();
        assert!(load_params(&mut t.net, &params).is_err());
    }
}
