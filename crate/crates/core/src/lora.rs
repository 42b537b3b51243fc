//! Low-rank recovery adapters: every per-layer linear projection gains a
//! trainable pair of factors while the dense base stays frozen, and the pair
//! folds back into the dense weight once fine-tuning is done.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::importance::prunable_param_ids;
use crate::model::{self, ModelError, TransformerModel};
use crate::rng;
use crate::tape::{Tape, ValueId};
use crate::tensor::{ParamId, Scalar, Tensor, TensorError};
use crate::train::{TrainError, Trainable, TrainExample};

#[derive(Debug, Error)]
pub enum LoRAError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("adapter rank must be at least 1")]
    ZeroRank,
    #[error("rank {rank} exceeds the smallest dimension {limit} of {target}")]
    RankTooLarge {
        target: ParamId,
        rank: usize,
        limit: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoRAConfig {
    pub rank: usize,
    /// Net adapter scale is alpha / rank; `None` means alpha = rank, i.e. 1.
    pub alpha: Option<f64>,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for LoRAConfig {
    fn default() -> Self {
        LoRAConfig {
            rank: 8,
            alpha: None,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl LoRAConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha.unwrap_or(self.rank as f64) / self.rank as f64
    }
}

/// One adapter pair: `left` (out x r, Gaussian) times `right` (r x in, zero)
/// is the additive weight update for `target`.
#[derive(Debug, Clone)]
pub struct Adapter<E: Scalar> {
    pub target: ParamId,
    pub left: Tensor<E>,
    pub right: Tensor<E>,
}

impl<E: Scalar> Adapter<E> {
    pub fn left_id(&self) -> ParamId {
        ParamId::new(format!("{}.lora_left", self.target))
    }

    pub fn right_id(&self) -> ParamId {
        ParamId::new(format!("{}.lora_right", self.target))
    }

    /// Dense update scaling * left * right, accumulated in 64-bit.
    pub fn delta(&self, scaling: f64) -> Tensor<E> {
        let (out, rank) = (self.left.rows(), self.left.cols());
        let cols = self.right.cols();
        let mut data = Vec::with_capacity(out * cols);
        for i in 0..out {
            for j in 0..cols {
                let mut acc = 0.0f64;
                for k in 0..rank {
                    acc += self.left.at2(i, k).as_f64() * self.right.at2(k, j).as_f64();
                }
                data.push(E::of_f64(scaling * acc));
            }
        }
        Tensor::matrix(out, cols, data).expect("dimensions agree by construction")
    }
}

/// A frozen base model plus trainable adapters on its seven projection kinds.
#[derive(Debug, Clone)]
pub struct AdaptedModel<E: Scalar> {
    base: TransformerModel<E>,
    config: LoRAConfig,
    adapters: BTreeMap<ParamId, Adapter<E>>,
}

/// The projections that receive adapters, in deterministic id order.
pub fn adapter_targets<E: Scalar>(model: &TransformerModel<E>) -> Vec<ParamId> {
    prunable_param_ids(model)
}

impl<E: Scalar> AdaptedModel<E> {
    /// Attach zero-update adapters to every projection of `base`.
    pub fn attach(base: TransformerModel<E>, config: LoRAConfig) -> Result<Self, LoRAError> {
        if config.rank == 0 {
            return Err(LoRAError::ZeroRank);
        }
        let targets = adapter_targets(&base);
        for target in &targets {
            let w = base.param(target)?;
            let limit = w.rows().min(w.cols());
            if config.rank > limit {
                return Err(LoRAError::RankTooLarge {
                    target: target.clone(),
                    rank: config.rank,
                    limit,
                });
            }
        }
        let mut rng = rng::seeded(config.seed);
        let adapters = targets
            .into_iter()
            .map(|target| {
                let w = base.param(&target).expect("target validated above");
                let adapter = Adapter {
                    left: model::gaussian(&mut rng, &[w.rows(), config.rank], config.init_std),
                    right: Tensor::zeros(&[config.rank, w.cols()]),
                    target: target.clone(),
                };
                (target, adapter)
            })
            .collect();
        Ok(AdaptedModel {
            base,
            config,
            adapters,
        })
    }

    pub fn base(&self) -> &TransformerModel<E> {
        &self.base
    }

    pub fn config(&self) -> &LoRAConfig {
        &self.config
    }

    pub fn adapters(&self) -> impl Iterator<Item = &Adapter<E>> {
        self.adapters.values()
    }

    /// Total elements across all adapter factors.
    pub fn trainable_param_count(&self) -> usize {
        self.adapters
            .values()
            .map(|a| a.left.elem_count() + a.right.elem_count())
            .sum()
    }

    /// Forward pass with the adapter path added at each hooked projection.
    pub fn logits_on_tape(
        &self,
        tape: &mut Tape<E>,
        ids: &[usize],
    ) -> Result<ValueId, ModelError> {
        let scaling = self.config.scaling();
        let adapters = &self.adapters;
        self.base.forward_with(tape, ids, &mut |tape, pid, x, y| {
            let Some(a) = adapters.get(pid) else {
                return Ok(y);
            };
            let right = match tape.param_value(&a.right_id()) {
                Some(v) => v,
                None => tape.leaf(a.right.clone().with_tag(a.right_id()))?,
            };
            let left = match tape.param_value(&a.left_id()) {
                Some(v) => v,
                None => tape.leaf(a.left.clone().with_tag(a.left_id()))?,
            };
            let h = tape.matmul_nt(x, right)?;
            let update = tape.matmul_nt(h, left)?;
            let scaled = tape.scale(update, scaling)?;
            tape.add(y, scaled)
        })
    }

    pub fn logits(&self, ids: &[usize]) -> Result<Tensor<E>, ModelError> {
        let mut tape = Tape::new();
        let out = self.logits_on_tape(&mut tape, ids)?;
        Ok(tape.value(out).clone())
    }

    pub fn weighted_loss_on_tape(
        &self,
        tape: &mut Tape<E>,
        ids: &[usize],
        weights: &[f64],
    ) -> Result<ValueId, ModelError> {
        let logits = self.logits_on_tape(tape, ids)?;
        model::loss_from_logits(tape, logits, ids, weights)
    }

    /// Fold every adapter into its dense target and return the plain model.
    /// Consuming the adapted form makes a second merge unrepresentable.
    pub fn merge(self) -> Result<TransformerModel<E>, LoRAError> {
        let AdaptedModel {
            mut base,
            config,
            adapters,
        } = self;
        let scaling = config.scaling();
        for (target, adapter) in adapters {
            let delta = adapter.delta(scaling);
            base.param_mut(&target)?.add_assign(&delta)?;
        }
        Ok(base)
    }
}

impl<E: Scalar> Trainable<E> for AdaptedModel<E> {
    fn trainable_ids(&self) -> Vec<ParamId> {
        self.adapters
            .values()
            .flat_map(|a| [a.left_id(), a.right_id()])
            .collect()
    }

    fn trainable_mut(&mut self, id: &ParamId) -> Result<&mut Tensor<E>, TrainError> {
        let name = id.to_string();
        let (target, is_left) = if let Some(t) = name.strip_suffix(".lora_left") {
            (t, true)
        } else if let Some(t) = name.strip_suffix(".lora_right") {
            (t, false)
        } else {
            return Err(TrainError::UnknownParam(id.clone()));
        };
        let adapter = self
            .adapters
            .get_mut(&ParamId::new(target))
            .ok_or_else(|| TrainError::UnknownParam(id.clone()))?;
        Ok(if is_left {
            &mut adapter.left
        } else {
            &mut adapter.right
        })
    }

    fn sequence_loss(
        &self,
        tape: &mut Tape<E>,
        example: &TrainExample,
    ) -> Result<ValueId, TrainError> {
        Ok(self.weighted_loss_on_tape(tape, &example.ids, &example.weights)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::train::{train, TrainConfig};

    fn base() -> TransformerModel<f32> {
        TransformerModel::build(ModelConfig {
            vocab_size: 259,
            embed_dim: 16,
            n_layers: 2,
            n_heads: 2,
            head_dim: 8,
            ffn_dim: 12,
            max_seq_len: 32,
            rope_base: 10_000.0,
            rng_seed: 5,
        })
        .unwrap()
    }

    fn probes() -> Vec<Vec<usize>> {
        let mut rng = rng::seeded(11);
        (0..10)
            .map(|_| {
                use rand::Rng;
                let len = rng.gen_range(3..=10);
                (0..len).map(|_| rng.gen_range(0..256usize)).collect()
            })
            .collect()
    }

    fn max_abs_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (f64::from(*x) - f64::from(*y)).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn zero_init_is_exactly_behavior_preserving() {
        let plain = base();
        let adapted = AdaptedModel::attach(plain.clone(), LoRAConfig::default()).unwrap();
        for ids in probes() {
            let a = plain.logits(&ids).unwrap();
            let b = adapted.logits(&ids).unwrap();
            assert!(max_abs_diff(&a, &b) <= 1e-6, "zero-init drifted on {ids:?}");
        }
        // 64-bit: exact.
        let plain64 = base().cast::<f64>();
        let adapted64 = AdaptedModel::attach(plain64.clone(), LoRAConfig::default()).unwrap();
        let ids = vec![257, 1, 2, 3];
        assert_eq!(
            plain64.logits(&ids).unwrap().data(),
            adapted64.logits(&ids).unwrap().data()
        );
    }

    #[test]
    fn trainable_count_matches_closed_form() {
        let plain = base();
        let rank = 4;
        let expected: usize = adapter_targets(&plain)
            .iter()
            .map(|t| {
                let w = plain.param(t).unwrap();
                rank * (w.rows() + w.cols())
            })
            .sum();
        let adapted = AdaptedModel::attach(
            plain,
            LoRAConfig {
                rank,
                ..LoRAConfig::default()
            },
        )
        .unwrap();
        assert_eq!(adapted.trainable_param_count(), expected);
        assert_eq!(adapted.trainable_ids().len(), 2 * 7 * 2); // two factors, seven kinds, two layers
    }

    #[test]
    fn oversized_rank_is_rejected() {
        let err = AdaptedModel::attach(
            base(),
            LoRAConfig {
                rank: 13, // down_proj is 16 x 12, so the limit is 12
                ..LoRAConfig::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, LoRAError::RankTooLarge { limit: 12, .. }));
        assert!(matches!(
            AdaptedModel::attach(
                base(),
                LoRAConfig {
                    rank: 0,
                    ..LoRAConfig::default()
                }
            ),
            Err(LoRAError::ZeroRank)
        ));
    }

    #[test]
    fn merge_right_after_attach_changes_nothing() {
        let plain = base();
        let before = plain.checksum();
        let merged = AdaptedModel::attach(plain, LoRAConfig::default())
            .unwrap()
            .merge()
            .unwrap();
        assert_eq!(merged.checksum(), before);
    }

    #[test]
    fn merged_logits_match_adapter_form_after_training() {
        let mut adapted = AdaptedModel::attach(base(), LoRAConfig::default()).unwrap();
        let dataset = vec![
            TrainExample::all_positions(vec![257, 104, 105, 32, 104, 105]),
            TrainExample::all_positions(vec![257, 111, 107, 32, 111, 107]),
        ];
        let cfg = TrainConfig {
            learning_rate: 5e-3,
            warmup_steps: 0,
            batch_size: 2,
            epochs: 30,
            seed: 2,
            ..TrainConfig::default()
        };
        train(&mut adapted, &dataset, &cfg).unwrap();
        let inputs = probes();
        let adapter_logits: Vec<_> = inputs.iter().map(|ids| adapted.logits(ids).unwrap()).collect();
        let merged = adapted.merge().unwrap();
        for (ids, before) in inputs.iter().zip(&adapter_logits) {
            let after = merged.logits(ids).unwrap();
            assert!(
                max_abs_diff(before, &after) <= 1e-5,
                "merge drifted by {} on {ids:?}",
                max_abs_diff(before, &after)
            );
        }
    }

    #[test]
    fn base_weights_stay_frozen_through_training() {
        let mut adapted = AdaptedModel::attach(base(), LoRAConfig::default()).unwrap();
        let before = adapted.base().checksum();
        let dataset = vec![TrainExample::all_positions(vec![257, 97, 98, 99, 97, 98])];
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            warmup_steps: 10,
            batch_size: 1,
            epochs: 100,
            max_steps: Some(100),
            seed: 9,
            ..TrainConfig::default()
        };
        let log = train(&mut adapted, &dataset, &cfg).unwrap();
        assert_eq!(log.steps(), 100);
        assert_eq!(adapted.base().checksum(), before, "base weights moved");
        assert!(log.final_loss().unwrap() < log.initial_loss().unwrap());
    }

    #[test]
    fn merged_parameter_count_equals_the_plain_count() {
        let plain = base();
        let n = plain.param_count();
        let adapted = AdaptedModel::attach(plain, LoRAConfig::default()).unwrap();
        assert!(adapted.trainable_param_count() > 0);
        assert_eq!(adapted.merge().unwrap().param_count(), n);
    }

    #[test]
    fn attach_is_deterministic_per_seed() {
        let a = AdaptedModel::attach(base(), LoRAConfig::default()).unwrap();
        let b = AdaptedModel::attach(base(), LoRAConfig::default()).unwrap();
        for (x, y) in a.adapters().zip(b.adapters()) {
            assert_eq!(x.left.data(), y.left.data());
        }
        let c = AdaptedModel::attach(
            base(),
            LoRAConfig {
                seed: 1,
                ..LoRAConfig::default()
            },
        )
        .unwrap();
        let differs = a
            .adapters()
            .zip(c.adapters())
            .any(|(x, y)| x.left.data() != y.left.data());
        assert!(differs, "different seeds produced identical factors");
    }
}
