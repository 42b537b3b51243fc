//! Optimizer and training loop, shared between full-model pre-training and
//! adapter-only recovery fine-tuning via the `Trainable` trait.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, TransformerModel};
use crate::rng;
use crate::tape::{Tape, TapeError, ValueId};
use crate::tensor::{ParamId, Scalar, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error("example {index}: {got} weights for a sequence of {len} tokens")]
    BadExample { index: usize, got: usize, len: usize },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("no trainable parameter named {0}")]
    UnknownParam(ParamId),
}

/// Which next-token positions carry loss during recovery fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMask {
    /// Only answer tokens are weighted; prompt boilerplate is free.
    AnswerOnly,
    /// Every position trains (ablation flag and pre-training default).
    AllPositions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Linear ramp 0 -> lr over this many steps; longer schedules than the
    /// run itself simply never reach full rate.
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps; `Some(0)` runs no steps at all.
    pub max_steps: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 100,
            batch_size: 64,
            epochs: 3,
            max_steps: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults sized for desk-scale datasets (a 50-shot pool cannot fill a
    /// batch of 64).
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 8,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::BadConfig(m));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return err(format!("learning rate {} must be positive", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return err(format!("{name} {b} must lie in [0, 1)"));
            }
        }
        if !(self.epsilon > 0.0) {
            return err("epsilon must be positive".into());
        }
        if self.weight_decay < 0.0 {
            return err("weight decay must be nonnegative".into());
        }
        if self.batch_size == 0 {
            return err("batch size must be at least 1".into());
        }
        if self.epochs == 0 {
            return err("epochs must be at least 1".into());
        }
        Ok(())
    }

    /// Effective learning rate at 1-based step `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        if self.warmup_steps == 0 {
            return self.learning_rate;
        }
        self.learning_rate * (t as f64 / self.warmup_steps as f64).min(1.0)
    }
}

/// One training sequence with per-position loss weights
/// (`weights[t]` weights the prediction of `ids[t + 1]`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainExample {
    pub ids: Vec<usize>,
    pub weights: Vec<f64>,
}

impl TrainExample {
    pub fn all_positions(ids: Vec<usize>) -> Self {
        let weights = vec![1.0; ids.len().saturating_sub(1)];
        TrainExample { ids, weights }
    }

    pub fn masked(ids: Vec<usize>, weights: Vec<f64>) -> Self {
        TrainExample { ids, weights }
    }
}

/// Anything the loop can optimize: exposes its trainable tensors and records
/// a per-sequence loss on a tape.
pub trait Trainable<E: Scalar> {
    fn trainable_ids(&self) -> Vec<ParamId>;
    fn trainable_mut(&mut self, id: &ParamId) -> Result<&mut Tensor<E>, TrainError>;
    fn sequence_loss(
        &self,
        tape: &mut Tape<E>,
        example: &TrainExample,
    ) -> Result<ValueId, TrainError>;
}

impl<E: Scalar> Trainable<E> for TransformerModel<E> {
    fn trainable_ids(&self) -> Vec<ParamId> {
        self.param_ids().cloned().collect()
    }

    fn trainable_mut(&mut self, id: &ParamId) -> Result<&mut Tensor<E>, TrainError> {
        Ok(self.param_mut(id)?)
    }

    fn sequence_loss(
        &self,
        tape: &mut Tape<E>,
        example: &TrainExample,
    ) -> Result<ValueId, TrainError> {
        Ok(self.weighted_loss_on_tape(tape, &example.ids, &example.weights)?)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<TrainLogEntry>,
}

impl TrainLog {
    pub fn initial_loss(&self) -> Option<f64> {
        self.entries.first().map(|e| e.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.entries.last().map(|e| e.loss)
    }

    pub fn steps(&self) -> usize {
        self.entries.len()
    }
}

/// Decoupled-weight-decay adaptive-moment optimizer with bias correction.
struct Adam<E: Scalar> {
    m: BTreeMap<ParamId, Tensor<E>>,
    v: BTreeMap<ParamId, Tensor<E>>,
    t: usize,
}

impl<E: Scalar> Adam<E> {
    fn new() -> Self {
        Adam {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    fn step<T: Trainable<E>>(
        &mut self,
        target: &mut T,
        ids: &[ParamId],
        grads: &BTreeMap<ParamId, Tensor<E>>,
        lr: f64,
        cfg: &TrainConfig,
    ) -> Result<(), TrainError> {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for id in ids {
            let g = grads.get(id).ok_or_else(|| TrainError::UnknownParam(id.clone()))?;
            let m = self
                .m
                .entry(id.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(id.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let w = target.trainable_mut(id)?;
            for ((wi, mi), (vi, gi)) in w
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut().iter_mut().zip(g.data()))
            {
                let gf = gi.as_f64();
                let mf = b1 * mi.as_f64() + (1.0 - b1) * gf;
                let vf = b2 * vi.as_f64() + (1.0 - b2) * gf * gf;
                *mi = E::of_f64(mf);
                *vi = E::of_f64(vf);
                let update = (mf / bc1) / ((vf / bc2).sqrt() + cfg.epsilon);
                let decayed = wi.as_f64() * (1.0 - lr * cfg.weight_decay);
                *wi = E::of_f64(decayed - lr * update);
            }
        }
        Ok(())
    }
}

/// Run the configured number of epochs (or until `max_steps`) of batched
/// optimization over `dataset`, logging loss and effective rate per step.
pub fn train<E: Scalar, T: Trainable<E>>(
    target: &mut T,
    dataset: &[TrainExample],
    config: &TrainConfig,
) -> Result<TrainLog, TrainError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    for (index, ex) in dataset.iter().enumerate() {
        if ex.ids.len() < 2 || ex.weights.len() != ex.ids.len() - 1 {
            return Err(TrainError::BadExample {
                index,
                got: ex.weights.len(),
                len: ex.ids.len(),
            });
        }
    }

    let ids = target.trainable_ids();
    let mut opt = Adam::new();
    let mut log = TrainLog::default();
    let mut rng = rng::seeded(config.seed);
    let mut step = 0usize;
    'epochs: for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|cap| step >= cap) {
                break 'epochs;
            }
            step += 1;
            let lr = config.lr_at(step);

            let mut tape = Tape::new();
            let mut total: Option<ValueId> = None;
            for &i in chunk {
                let loss = target.sequence_loss(&mut tape, &dataset[i])?;
                total = Some(match total {
                    Some(acc) => tape.add(acc, loss)?,
                    None => loss,
                });
            }
            let mean = tape.scale(total.expect("chunk is nonempty"), 1.0 / chunk.len() as f64)?;
            let loss_value = tape.value(mean).item().expect("loss is scalar").as_f64();
            if !loss_value.is_finite() {
                return Err(TrainError::NonFiniteLoss { step });
            }
            let grads = tape.grad(mean, &ids)?;
            opt.step(target, &ids, &grads, lr, config)?;
            log.entries.push(TrainLogEntry {
                step,
                epoch,
                loss: loss_value,
                lr,
            });
        }
    }
    Ok(log)
}
