//! Structural removal of selected groups. Pruning rebuilds compact dense
//! tensors — no masks — so the result is a genuinely smaller model that
//! passes the same shape validation as a freshly built one.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::depgraph::{PruningGroup, SliceAxis, StructureKind};
use crate::importance::SelectionPolicy;
use crate::model::{ModelError, TransformerModel};
use crate::tensor::{ParamId, Scalar, TensorError};

#[derive(Debug, Error)]
pub enum PruneError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("plan addresses layer {layer}, model has {n_layers}")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("layer {layer} has no {kind:?} unit {unit} (width {width})")]
    UnitOutOfRange {
        layer: usize,
        kind: StructureKind,
        unit: usize,
        width: usize,
    },
    #[error("unit {unit} of layer {layer} listed twice")]
    DuplicateUnit { layer: usize, unit: usize },
    #[error("plan would remove every {kind:?} unit of layer {layer}")]
    EmptiesLayer { layer: usize, kind: StructureKind },
}

/// Units to remove, aggregated per (layer, structure kind).
#[derive(Debug, Clone, Serialize)]
pub struct PlanEntry {
    pub layer: usize,
    pub kind: StructureKind,
    pub units: Vec<usize>,
}

/// The realized outcome of a selection round, ready to apply.
#[derive(Debug, Clone, Serialize)]
pub struct PruningPlan {
    pub removals: Vec<PlanEntry>,
    pub ratio: f64,
    pub policy: SelectionPolicy,
}

impl PruningPlan {
    pub fn from_groups(
        groups: &[PruningGroup],
        ratio: f64,
        policy: SelectionPolicy,
    ) -> Result<Self, PruneError> {
        let mut by_bucket: BTreeMap<(usize, StructureKind), Vec<usize>> = BTreeMap::new();
        for g in groups {
            by_bucket
                .entry((g.layer(), g.kind()))
                .or_default()
                .push(g.unit());
        }
        let mut removals = Vec::with_capacity(by_bucket.len());
        for ((layer, kind), mut units) in by_bucket {
            units.sort_unstable();
            if let Some(dup) = units.windows(2).find(|w| w[0] == w[1]) {
                return Err(PruneError::DuplicateUnit {
                    layer,
                    unit: dup[0],
                });
            }
            removals.push(PlanEntry { layer, kind, units });
        }
        Ok(PruningPlan {
            removals,
            ratio,
            policy,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.removals.iter().all(|e| e.units.is_empty())
    }

    pub fn groups_removed(&self) -> usize {
        self.removals.iter().map(|e| e.units.len()).sum()
    }
}

/// Remove every planned head and channel, returning a fresh, smaller model.
/// Unaffected weights are carried over bitwise.
pub fn apply_pruning<E: Scalar>(
    model: &TransformerModel<E>,
    plan: &PruningPlan,
) -> Result<TransformerModel<E>, PruneError> {
    let hd = model.config().head_dim;
    let mut params = model.params().clone();
    let mut dims = model.layer_dims().to_vec();

    let shrink = |id: ParamId,
                      params: &mut BTreeMap<ParamId, crate::tensor::Tensor<E>>,
                      axis: SliceAxis,
                      block: usize,
                      units: &[usize]|
     -> Result<(), PruneError> {
        let t = params.get(&id).ok_or_else(|| ModelError::UnknownParam(id.clone()))?;
        let shrunk = match axis {
            SliceAxis::Rows => t.remove_row_blocks(block, units)?,
            SliceAxis::Columns => t.remove_col_blocks(block, units)?,
        };
        params.insert(id.clone(), shrunk.with_tag(id));
        Ok(())
    };

    for entry in &plan.removals {
        if entry.units.is_empty() {
            continue;
        }
        if entry.layer >= dims.len() {
            return Err(PruneError::LayerOutOfRange {
                layer: entry.layer,
                n_layers: dims.len(),
            });
        }
        let width = match entry.kind {
            StructureKind::Head => dims[entry.layer].n_heads,
            StructureKind::Channel => dims[entry.layer].ffn_dim,
        };
        if let Some(&unit) = entry.units.iter().find(|&&u| u >= width) {
            return Err(PruneError::UnitOutOfRange {
                layer: entry.layer,
                kind: entry.kind,
                unit,
                width,
            });
        }
        if entry.units.len() >= width {
            return Err(PruneError::EmptiesLayer {
                layer: entry.layer,
                kind: entry.kind,
            });
        }
        match entry.kind {
            StructureKind::Head => {
                for suffix in ["q_proj", "k_proj", "v_proj"] {
                    shrink(
                        ParamId::layer(entry.layer, suffix),
                        &mut params,
                        SliceAxis::Rows,
                        hd,
                        &entry.units,
                    )?;
                }
                shrink(
                    ParamId::layer(entry.layer, "o_proj"),
                    &mut params,
                    SliceAxis::Columns,
                    hd,
                    &entry.units,
                )?;
                dims[entry.layer].n_heads -= entry.units.len();
            }
            StructureKind::Channel => {
                for suffix in ["gate_proj", "up_proj"] {
                    shrink(
                        ParamId::layer(entry.layer, suffix),
                        &mut params,
                        SliceAxis::Rows,
                        1,
                        &entry.units,
                    )?;
                }
                shrink(
                    ParamId::layer(entry.layer, "down_proj"),
                    &mut params,
                    SliceAxis::Columns,
                    1,
                    &entry.units,
                )?;
                dims[entry.layer].ffn_dim -= entry.units.len();
            }
        }
    }
    Ok(TransformerModel::from_parts(
        model.config().clone(),
        dims,
        params,
    )?)
}

/// Zero every weight a group's members slice. Pruning a group zeroed this
/// way must leave all logits unchanged — the oracle behind the removal code.
pub fn zero_group_weights<E: Scalar>(
    model: &mut TransformerModel<E>,
    group: &PruningGroup,
) -> Result<(), PruneError> {
    let hd = model.config().head_dim;
    for node in &group.members {
        let block = match node.role.kind() {
            StructureKind::Head => hd,
            StructureKind::Channel => 1,
        };
        let start = node.unit * block;
        let t = model.param_mut(&node.param_id())?;
        let cols = t.cols();
        match node.role.axis() {
            SliceAxis::Rows => {
                t.data_mut()[start * cols..(start + block) * cols]
                    .iter_mut()
                    .for_each(|x| *x = E::zero());
            }
            SliceAxis::Columns => {
                for i in 0..t.rows() {
                    t.data_mut()[i * cols + start..i * cols + start + block]
                        .iter_mut()
                        .for_each(|x| *x = E::zero());
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerCompression {
    pub layer: usize,
    pub heads_before: usize,
    pub heads_after: usize,
    pub ffn_before: usize,
    pub ffn_after: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompressionReport {
    pub original_params: usize,
    pub pruned_params: usize,
    pub reduction: f64,
    pub per_layer: Vec<LayerCompression>,
}

/// Fraction of parameters removed: 1 - pruned / original.
pub fn reduction_fraction(original: f64, pruned: f64) -> f64 {
    1.0 - pruned / original
}

pub fn compression_report<E: Scalar>(
    original: &TransformerModel<E>,
    pruned: &TransformerModel<E>,
) -> CompressionReport {
    let per_layer = original
        .layer_dims()
        .iter()
        .zip(pruned.layer_dims())
        .enumerate()
        .map(|(layer, (before, after))| LayerCompression {
            layer,
            heads_before: before.n_heads,
            heads_after: after.n_heads,
            ffn_before: before.ffn_dim,
            ffn_after: after.ffn_dim,
        })
        .collect();
    let original_params = original.param_count();
    let pruned_params = pruned.param_count();
    CompressionReport {
        original_params,
        pruned_params,
        reduction: reduction_fraction(original_params as f64, pruned_params as f64),
        per_layer,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depgraph::{DependencyGraph, ParamNode, Role};
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    fn config(n_layers: usize, n_heads: usize, head_dim: usize, ffn_dim: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: 61,
            embed_dim: n_heads * head_dim,
            n_layers,
            n_heads,
            head_dim,
            ffn_dim,
            max_seq_len: 32,
            rope_base: 10_000.0,
            rng_seed: 17,
        }
    }

    fn head_group(model: &TransformerModel<f32>, layer: usize, unit: usize) -> PruningGroup {
        DependencyGraph::for_model(model)
            .propagate_from_trigger(ParamNode::new(layer, Role::Query, unit))
            .unwrap()
    }

    #[test]
    fn removing_one_of_two_heads_shrinks_the_expected_axes() {
        let m = TransformerModel::<f32>::build(config(1, 2, 8, 4)).unwrap();
        let plan =
            PruningPlan::from_groups(&[head_group(&m, 0, 1)], 0.5, SelectionPolicy::PerLayer)
                .unwrap();
        let pruned = apply_pruning(&m, &plan).unwrap();
        let q = pruned.param(&ParamId::layer(0, "q_proj")).unwrap();
        let o = pruned.param(&ParamId::layer(0, "o_proj")).unwrap();
        assert_eq!(q.rows(), 8);
        assert_eq!(o.cols(), 8);
        assert_eq!(pruned.layer_dims()[0].n_heads, 1);
        // Surviving head 0 keeps its exact weights.
        let q0 = m.param(&ParamId::layer(0, "q_proj")).unwrap();
        assert!(q
            .data()
            .iter()
            .zip(&q0.data()[..8 * q0.cols()])
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn empty_plan_is_the_identity() {
        let m = TransformerModel::<f32>::build(config(2, 2, 4, 6)).unwrap();
        let plan = PruningPlan::from_groups(&[], 0.0, SelectionPolicy::PerLayer).unwrap();
        assert!(plan.is_empty());
        let out = apply_pruning(&m, &plan).unwrap();
        assert_eq!(out.checksum(), m.checksum());
    }

    #[test]
    fn pruning_a_zeroed_group_leaves_logits_unchanged() {
        let inputs: Vec<Vec<usize>> = (0..10)
            .map(|i| vec![57, (i * 3) % 61, (i * 7 + 1) % 61, (i * 11 + 2) % 61, 5])
            .collect();
        for (layer, unit, role) in [(0, 1, Role::Query), (1, 2, Role::Down), (0, 0, Role::Gate)] {
            let mut m = TransformerModel::<f32>::build(config(2, 3, 4, 5)).unwrap();
            let group = DependencyGraph::for_model(&m)
                .propagate_from_trigger(ParamNode::new(layer, role, unit))
                .unwrap();
            zero_group_weights(&mut m, &group).unwrap();
            let plan =
                PruningPlan::from_groups(&[group], 0.0, SelectionPolicy::PerLayer).unwrap();
            let pruned = apply_pruning(&m, &plan).unwrap();
            for ids in &inputs {
                let before = m.logits(ids).unwrap();
                let after = pruned.logits(ids).unwrap();
                assert!(before.max_abs_diff(&after).unwrap() <= 1e-6);
            }
        }
    }

    #[test]
    fn zeroed_group_invariance_tightens_at_f64() {
        let mut m = TransformerModel::<f64>::build(config(1, 2, 4, 4)).unwrap();
        let group = DependencyGraph::for_model(&m)
            .propagate_from_trigger(ParamNode::new(0, Role::Key, 0))
            .unwrap();
        zero_group_weights(&mut m, &group).unwrap();
        let plan = PruningPlan::from_groups(&[group], 0.0, SelectionPolicy::PerLayer).unwrap();
        let pruned = apply_pruning(&m, &plan).unwrap();
        let ids = vec![57usize, 3, 9, 27, 20];
        let diff = m
            .logits(&ids)
            .unwrap()
            .max_abs_diff(&pruned.logits(&ids).unwrap())
            .unwrap();
        assert!(diff <= 1e-10, "f64 invariance violated: {diff}");
    }

    #[test]
    fn parameter_count_strictly_decreases() {
        let m = TransformerModel::<f32>::build(config(2, 2, 4, 6)).unwrap();
        let plan =
            PruningPlan::from_groups(&[head_group(&m, 1, 0)], 0.5, SelectionPolicy::PerLayer)
                .unwrap();
        let pruned = apply_pruning(&m, &plan).unwrap();
        assert!(pruned.param_count() < m.param_count());
    }

    #[test]
    fn plan_validation_rejects_bad_requests() {
        let m = TransformerModel::<f32>::build(config(1, 2, 4, 4)).unwrap();
        let out_of_range = PruningPlan {
            removals: vec![PlanEntry {
                layer: 0,
                kind: StructureKind::Head,
                units: vec![2],
            }],
            ratio: 0.5,
            policy: SelectionPolicy::PerLayer,
        };
        assert!(matches!(
            apply_pruning(&m, &out_of_range),
            Err(PruneError::UnitOutOfRange { .. })
        ));

        let empties = PruningPlan {
            removals: vec![PlanEntry {
                layer: 0,
                kind: StructureKind::Head,
                units: vec![0, 1],
            }],
            ratio: 1.0,
            policy: SelectionPolicy::PerLayer,
        };
        assert!(matches!(
            apply_pruning(&m, &empties),
            Err(PruneError::EmptiesLayer { .. })
        ));

        let wrong_layer = PruningPlan {
            removals: vec![PlanEntry {
                layer: 3,
                kind: StructureKind::Channel,
                units: vec![0],
            }],
            ratio: 0.1,
            policy: SelectionPolicy::PerLayer,
        };
        assert!(matches!(
            apply_pruning(&m, &wrong_layer),
            Err(PruneError::LayerOutOfRange { .. })
        ));

        let g = head_group(&m, 0, 0);
        assert!(matches!(
            PruningPlan::from_groups(&[g.clone(), g], 0.5, SelectionPolicy::PerLayer),
            Err(PruneError::DuplicateUnit { .. })
        ));
    }

    #[test]
    fn compression_report_examples() {
        let m = TransformerModel::<f32>::build(config(2, 2, 4, 6)).unwrap();
        let same = compression_report(&m, &m);
        assert_eq!(same.reduction, 0.0);

        // Remove half the FFN channels in every layer.
        let graph = DependencyGraph::for_model(&m);
        let groups: Vec<PruningGroup> = (0..2)
            .flat_map(|l| {
                (0..3).map(move |c| (l, c))
            })
            .map(|(l, c)| {
                graph
                    .propagate_from_trigger(ParamNode::new(l, Role::Down, c))
                    .unwrap()
            })
            .collect();
        let plan = PruningPlan::from_groups(&groups, 0.5, SelectionPolicy::PerLayer).unwrap();
        let pruned = apply_pruning(&m, &plan).unwrap();
        let report = compression_report(&m, &pruned);
        // Closed-form share: each removed channel drops a gate row, an up
        // row and a down column, all of width embed_dim.
        let removed = 2 * 3 * 3 * m.config().embed_dim;
        assert_eq!(report.original_params - report.pruned_params, removed);
        let want = removed as f64 / report.original_params as f64;
        assert!((report.reduction - want).abs() < 1e-12);
        assert_eq!(report.per_layer[0].ffn_after, 3);
    }

    #[test]
    fn published_scale_reduction_rounds_to_printed_fraction() {
        // 6.7e9 down to 5.4e9 parameters is a 0.194 reduction as printed.
        let f = reduction_fraction(6.7e9, 5.4e9);
        assert!((f - 0.194).abs() < 5e-4, "{f}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn random_plans_keep_shapes_valid(
            n_layers in 1usize..3,
            n_heads in 2usize..4,
            ffn_dim in 3usize..7,
            seed in 0u64..500,
        ) {
            let m = TransformerModel::<f32>::build(config(n_layers, n_heads, 4, ffn_dim)).unwrap();
            let graph = DependencyGraph::for_model(&m);
            let groups = graph.enumerate_groups();
            let mut rng = crate::rng::seeded(seed);
            let chosen: Vec<PruningGroup> = groups
                .into_iter()
                .filter(|_| rand::Rng::gen_bool(&mut rng, 0.4))
                .collect();
            let plan = PruningPlan::from_groups(&chosen, 0.4, SelectionPolicy::PerLayer).unwrap();
            match apply_pruning(&m, &plan) {
                Ok(pruned) => {
                    prop_assert!(pruned.validate_shapes().is_ok());
                    prop_assert!(pruned.param_count() <= m.param_count());
                }
                Err(PruneError::EmptiesLayer { .. }) => {
                    // A random draw may legitimately empty a bucket.
                }
                Err(e) => prop_assert!(false, "unexpected error: {e}"),
            }
        }
    }
}
