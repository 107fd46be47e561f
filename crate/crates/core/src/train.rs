//! Mini-batch training and batch evaluation.
//!
//! Per-sample gradients are computed independently (in parallel when
//! enabled) and merged in batch order, so both execution modes produce
//! bit-identical parameters.

use std::sync::Arc;

use r3d_tensor::{adamw_step, AdamWConfig, Checkpoint, GradBuffer, LrSchedule};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::{evaluate, MetricsReport, Prediction};
use crate::model::{Example, PreparedScene, Reason3D};
use crate::losses::LossReport;
use crate::synthdata::{Dataset, Sample};

pub const STEP_META: &str = "step";

/// Accuracy thresholds reported by evaluation.
pub const IOU_THRESHOLDS: [f64; 2] = [0.25, 0.5];

/// Sample order for `epoch`: a permutation drawn from `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Indices of the batch consumed at global `step`. Each epoch is split into
/// `ceil(n / batch)` batches; the last may be short.
pub fn batch_at(seed: u64, step: u64, n: usize, batch: usize) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch) as u64;
    let epoch = step / per_epoch;
    let pos = (step % per_epoch) as usize;
    let order = epoch_order(seed, epoch, n);
    order[pos * batch..((pos + 1) * batch).min(n)].to_vec()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepReport {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub grad_norm: f64,
    #[serde(flatten)]
    pub loss: LossReport,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Reason3D,
    pub schedule: LrSchedule,
    pub optimizer: AdamWConfig,
    pub exec: Execution,
    /// Updates applied so far.
    pub step: u64,
}

impl Trainer {
    pub fn new(model: Reason3D, exec: Execution) -> Result<Self> {
        let c = &model.config;
        let schedule = LrSchedule::new(c.warmup_steps, c.lr_start, c.lr_peak, c.total_steps)?;
        let optimizer = AdamWConfig {
            beta1: c.beta1,
            beta2: c.beta2,
            weight_decay: c.weight_decay,
            eps: c.adam_eps,
        };
        Ok(Self {
            model,
            schedule,
            optimizer,
            exec,
            step: 0,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(mut self, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.digest != self.model.digest() {
            return Err(Error::Config(format!(
                "checkpoint digest {} does not match config digest {}",
                ckpt.digest,
                self.model.digest()
            )));
        }
        ckpt.restore_into(&mut self.model.store)?;
        let step = ckpt
            .meta(STEP_META)
            .ok_or_else(|| Error::Schema("checkpoint has no step record".into()))?;
        self.step = step as u64;
        Ok(self)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.model.checkpoint();
        ckpt.set_meta(STEP_META, self.step as f64);
        ckpt
    }

    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.model.config.batch_size) as u64
    }

    pub fn finished(&self) -> bool {
        self.step >= self.model.config.total_steps
    }

    /// Mean gradient and loss over `batch`, merged in batch order.
    pub fn batch_gradients(&self, batch: &[&Example]) -> Result<(GradBuffer, LossReport)> {
        let results = self.exec.map(batch, |ex| self.model.gradients(ex));
        let mut grads = GradBuffer::for_store(&self.model.store);
        let mut loss = LossReport::default();
        for r in results {
            let (g, l) = r?;
            grads.merge(&g)?;
            loss.add(&l);
        }
        let inv = 1.0 / batch.len() as f64;
        grads.scale(inv);
        loss.scale(inv);
        Ok((grads, loss))
    }

    /// Applies one update using the batch scheduled for the current step.
    pub fn train_step(&mut self, examples: &[Example]) -> Result<StepReport> {
        if examples.is_empty() {
            return Err(Error::Invalid("no training examples".into()));
        }
        if self.finished() {
            return Err(Error::Invalid(format!("run already finished at step {}", self.step)));
        }
        let cfg = &self.model.config;
        let idx = batch_at(cfg.seed, self.step, examples.len(), cfg.batch_size);
        let batch: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
        let (grads, loss) = self.batch_gradients(&batch)?;
        let lr = self.schedule.lr_at(self.step)?;
        adamw_step(&mut self.model.store, &grads, lr, &self.optimizer)?;
        let report = StepReport {
            step: self.step,
            epoch: self.step / self.steps_per_epoch(examples.len()),
            lr,
            grad_norm: grads.norm(),
            loss,
        };
        self.step += 1;
        Ok(report)
    }

    /// Runs to `total_steps`, calling `on_step` after every update.
    pub fn run(&mut self, examples: &[Example], mut on_step: impl FnMut(&Self, &StepReport) -> Result<()>) -> Result<()> {
        while !self.finished() {
            let report = self.train_step(examples)?;
            on_step(self, &report)?;
        }
        Ok(())
    }
}

/// Loads every sample of `samples` with its prepared scene.
pub fn load_examples(model: &Reason3D, dataset: &Dataset, samples: &[&Sample], exec: Execution) -> Result<Vec<Example>> {
    exec.map(samples, |s| {
        let cloud = dataset.load_points(s)?;
        let scene = Arc::new(PreparedScene::new(cloud, &model.config)?);
        Example::new(s, scene, &model.vocab, &model.config)
    })
    .into_iter()
    .collect()
}

/// Point-level prediction for one example; a missing prompt token or a
/// failed generation counts as a failed prediction.
pub fn predict(model: &Reason3D, ex: &Example) -> Result<Prediction> {
    match model.infer(&ex.scene, ex.task, &ex.instruction) {
        Ok(inf) => Ok(Prediction::Mask(inf.point_mask)),
        Err(Error::NoSegToken | Error::NoLocToken) => Ok(Prediction::Failed),
        Err(e) => Err(e),
    }
}

pub fn predict_all(model: &Reason3D, examples: &[Example], exec: Execution) -> Result<Vec<Prediction>> {
    exec.map(examples, |ex| predict(model, ex)).into_iter().collect()
}

pub fn evaluate_examples(model: &Reason3D, examples: &[Example], exec: Execution) -> Result<MetricsReport> {
    let preds = predict_all(model, examples, exec)?;
    let gts: Vec<Vec<bool>> = examples.iter().map(|e| e.point_gt.clone()).collect();
    evaluate(&preds, &gts, &IOU_THRESHOLDS, &model.digest())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch_once() {
        let n = 10;
        let mut seen: Vec<usize> = (0..4).flat_map(|s| batch_at(3, s, n, 3)).collect();
        seen.sort();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
        assert_eq!(batch_at(3, 3, n, 3).len(), 1);
        assert_ne!(epoch_order(3, 0, n), epoch_order(3, 1, n));
    }
}
