//! Teacher pretraining with the noise-prediction objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{loss_simple, sample_train_points, ScoreNet};
use crate::optim::{AdamW, AdamWConfig};
use crate::schedule::NoiseSchedule;
use crate::seed;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub updates: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: AdamWConfig,
    /// Learning rate decays linearly to this fraction of its initial value.
    #[serde(default = "default_final_lr")]
    pub final_lr_fraction: f32,
    #[serde(default)]
    pub seed: u64,
}

fn default_batch() -> usize {
    256
}
fn default_optimizer() -> AdamWConfig {
    AdamWConfig::with_lr(2e-3)
}
fn default_final_lr() -> f32 {
    0.05
}

impl TrainConfig {
    pub fn new(updates: usize, seed: u64) -> Self {
        Self {
            updates,
            batch_size: default_batch(),
            optimizer: default_optimizer(),
            final_lr_fraction: default_final_lr(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be > 0, got {}", self.optimizer.lr)));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::config("final_lr_fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Training state that can be stepped, inspected, and resumed.
pub struct TeacherTrainer<'a> {
    pub net: ScoreNet,
    pub opt: AdamW,
    sched: &'a NoiseSchedule,
    data: &'a Tensor,
    cfg: TrainConfig,
    tape: Tape,
}

impl<'a> TeacherTrainer<'a> {
    pub fn new(net: ScoreNet, sched: &'a NoiseSchedule, data: &'a Tensor, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if net.branches() != 1 {
            return Err(Error::config("teachers are single-branch networks"));
        }
        if data.cols() != net.channels() {
            return Err(Error::dim("teacher data", &[net.channels()], &[data.cols()]));
        }
        Ok(Self {
            net,
            opt: AdamW::new(cfg.optimizer),
            sched,
            data,
            cfg,
            tape: Tape::new(),
        })
    }

    /// Continues from a saved optimizer state.
    pub fn with_optimizer(mut self, opt: AdamW) -> Self {
        self.opt = opt;
        self
    }

    /// Updates applied so far.
    pub fn done(&self) -> usize {
        self.opt.steps_taken() as usize
    }

    /// One optimizer update; returns the batch loss.
    pub fn step(&mut self) -> Result<f64> {
        let u = self.done();
        let mut rng = seed::stream(self.cfg.seed, &format!("teacher/update{u}"));
        let b = self.cfg.batch_size;
        let idx: Vec<usize> = (0..b).map(|_| rng.gen_range(0..self.data.rows())).collect();
        let x0 = self.data.gather_rows(&idx)?;
        let eps = Tensor::randn(&[b, self.net.channels()], &mut rng)?;
        let points = sample_train_points(self.sched, b, &mut rng)?;

        let frac = u as f32 / self.cfg.updates.max(1) as f32;
        self.opt.config.lr = self.cfg.optimizer.lr * (1.0 - (1.0 - self.cfg.final_lr_fraction) * frac.min(1.0));

        self.tape.clear();
        let (loss, bound) = loss_simple(&mut self.tape, &self.net, &x0, &eps, &points, None)?;
        let value = self.tape.value(loss).item()? as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("teacher loss {value} at update {u}")));
        }
        self.tape.backward(loss)?;
        self.net.zero_grad();
        self.net.accumulate_grads(&self.tape, &bound)?;
        self.opt.step(&mut self.net.params_mut())?;
        Ok(value)
    }

    /// Runs until `cfg.updates` updates have been applied in total.
    pub fn run(&mut self) -> Result<Vec<f64>> {
        let mut losses = Vec::with_capacity(self.cfg.updates.saturating_sub(self.done()));
        while self.done() < self.cfg.updates {
            losses.push(self.step()?);
        }
        Ok(losses)
    }
}

/// Trains `net` from its current parameters for `cfg.updates` updates.
pub fn train_teacher(net: ScoreNet, sched: &NoiseSchedule, data: &Tensor, cfg: &TrainConfig) -> Result<(ScoreNet, Vec<f64>)> {
    let mut trainer = TeacherTrainer::new(net, sched, data, cfg.clone())?;
    let losses = trainer.run()?;
    Ok((trainer.net, losses))
}

/// Centered moving average with window `w` (shrunk at the edges).
pub fn smooth(values: &[f64], w: usize) -> Vec<f64> {
    let half = w / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}
