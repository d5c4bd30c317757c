//! Epoch training with mask pinning, and test-set evaluation.

use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, RngState};
use super::config::ExperimentConfig;
use crate::datasets::{augment, BatchPlan, Dataset, DatasetPair};
use crate::error::{Error, Result};
use crate::models::{LayerMask, Mode, Model, ModelSpec};
use crate::numerics::{par, LrSchedule, OptimizerState, Tensor};
use crate::rng::{derive_seed, stream, Purpose};

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub schedule: LrSchedule,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn fresh(cfg: &ExperimentConfig) -> Result<Self> {
        let seed = cfg.experiment.seed;
        let model = Model::init(ModelSpec::build(cfg.experiment.model, seed));
        let optimizer = OptimizerState::new(
            cfg.optimizer(),
            cfg.train.weight_decay.unwrap_or(0.0),
            &model.param_shapes(),
        );
        Ok(Self {
            model,
            optimizer,
            schedule: cfg.schedule()?,
            rng: stream(seed, Purpose::Augment),
        })
    }

    /// Completed epochs.
    pub fn epoch(&self) -> u32 {
        self.schedule.position
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            epoch: self.epoch(),
            schedule_position: self.schedule.position,
            names: self.model.param_names(),
            params: self.model.params.clone(),
            optimizer: self.optimizer.clone(),
            rng: RngState::capture(&self.rng),
        }
    }

    /// Replaces weights, optimizer state, schedule position and RNG with the
    /// checkpoint's.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.restore_position(ckpt)?;
        self.model.params = ckpt.params.clone();
        self.optimizer = ckpt.optimizer.clone();
        Ok(())
    }

    /// Only the schedule position and RNG come from the checkpoint; the
    /// optimizer state is zeroed and the weights are left alone.
    pub fn restore_position(&mut self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.expect_shapes(&self.model.param_shapes())?;
        self.schedule.rewind_to(ckpt.schedule_position);
        self.rng = ckpt.rng.restore();
        self.optimizer.reset();
        Ok(())
    }
}

/// Zeroes every element of `params` whose mask entry is 0.
pub fn pin_masked(params: &mut [Tensor], masks: &[LayerMask]) {
    for (wl, m) in masks.iter().enumerate() {
        for (p, mask) in [(2 * wl, &m.weight), (2 * wl + 1, &m.bias)] {
            for (v, &keep) in params[p].data_mut().iter_mut().zip(mask.data()) {
                if keep == 0.0 {
                    *v = 0.0;
                }
            }
        }
    }
}

pub struct Trainer<'a> {
    pub data: &'a DatasetPair,
    plan: BatchPlan,
    augment: bool,
    eval_batch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &ExperimentConfig, data: &'a DatasetPair) -> Result<Self> {
        let seed = derive_seed(cfg.experiment.seed, Purpose::BatchOrder);
        Ok(Self {
            data,
            plan: BatchPlan::new(seed, cfg.batch_size(), data.train.len())?,
            augment: cfg.augment(),
            eval_batch: cfg.train.eval_batch_size,
        })
    }

    /// One optimizer step on a batch. Masked parameters stay exactly 0.
    pub fn step(
        &self,
        st: &mut TrainState,
        x: Tensor,
        labels: &[usize],
        masks: Option<&[LayerMask]>,
        lr: f64,
    ) -> Result<f32> {
        let fwd = st.model.forward(x, masks, Mode::Train, false)?;
        let mut tape = fwd.tape;
        let loss = tape.softmax_xent(fwd.logits, labels)?;
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "loss is {value} at epoch {} step {}",
                st.epoch(),
                st.optimizer.step
            )));
        }
        let mut grads = tape.backward(loss)?;
        let mut g: Vec<Tensor> = fwd.params.iter().map(|&v| grads.take_or_zeros(v)).collect();
        if let Some(m) = masks {
            pin_masked(&mut g, m);
        }
        st.optimizer.step(&mut st.model.params, &g, lr)?;
        if let Some(m) = masks {
            pin_masked(&mut st.model.params, m);
        }
        Ok(value)
    }

    /// Trains one full epoch at the schedule's current rate and advances the
    /// schedule. Returns the mean training loss.
    pub fn train_epoch(&self, st: &mut TrainState, masks: Option<&[LayerMask]>) -> Result<f64> {
        let lr = st.schedule.current()?;
        let epoch = st.epoch();
        let mut total = 0.0f64;
        let batches = self.plan.batches(epoch);
        for idx in &batches {
            let (mut x, labels) = self.data.train.gather(idx)?;
            if self.augment {
                x = augment(&x, &mut st.rng)?;
            }
            total += f64::from(self.step(st, x, &labels, masks, lr)?);
        }
        st.schedule.advance();
        let mean = total / batches.len() as f64;
        log::debug!("epoch {} lr {lr} loss {mean:.5}", epoch + 1);
        Ok(mean)
    }

    /// Top-1 accuracy (percent) on the test split.
    pub fn evaluate(&self, model: &Model, masks: Option<&[LayerMask]>) -> Result<f64> {
        evaluate(model, &self.data.test, masks, self.eval_batch)
    }
}

/// Top-1 accuracy (percent) of `model` on `ds`, evaluated in chunks of
/// `chunk` images (in parallel when enabled).
pub fn evaluate(model: &Model, ds: &Dataset, masks: Option<&[LayerMask]>, chunk: usize) -> Result<f64> {
    let n = ds.len();
    if n == 0 {
        return Err(Error::Usage("evaluation on an empty dataset".into()));
    }
    let parts = par::map_ranges(n, chunk, |r| -> Result<usize> {
        let idx: Vec<usize> = r.collect();
        let (x, labels) = ds.gather(&idx)?;
        let fwd = model.forward(x, masks, Mode::Eval, false)?;
        let logits = fwd.tape.value(fwd.logits);
        let classes = logits.shape()[1];
        let correct = logits
            .data()
            .chunks(classes)
            .zip(&labels)
            .filter(|(row, &y)| argmax(row) == y)
            .count();
        Ok(correct)
    });
    let correct: usize = parts.into_iter().sum::<Result<usize>>()?;
    Ok(100.0 * correct as f64 / n as f64)
}

/// Index of the largest value (first on ties).
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_first_tie() {
        assert_eq!(argmax(&[0.0, 2.0, 2.0, 1.0]), 1);
        assert_eq!(argmax(&[5.0]), 0);
    }
}
