//! Group importance: first-order saliency |gᵀw| over the slice a group
//! would remove, accumulated on a small calibration set, plus ranking and
//! prune-set selection.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::depgraph::{DependencyGraph, ParamNode, PruningGroup, SliceAxis, StructureKind};
use crate::model::{ModelError, TransformerModel};
use crate::rng;
use crate::tape::{Tape, TapeError};
use crate::tensor::{ParamId, Scalar, Tensor};
use crate::tokenizer;

#[derive(Debug, Error)]
pub enum ImportanceError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("calibration sequence {index} has length {len}; need 2..={max}")]
    BadSequence { index: usize, len: usize, max: usize },
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("non-finite loss on calibration sequence {sequence}")]
    NonFiniteLoss { sequence: usize },
    #[error("non-finite gradient for {param} on calibration sequence {sequence}")]
    NonFiniteGradient { sequence: usize, param: ParamId },
    #[error("shape mismatch between weight {a:?} and gradient {b:?}")]
    ShapeMismatch { a: Vec<usize>, b: Vec<usize> },
    #[error("gradient store has no entry for {0}")]
    MemberMissing(ParamId),
    #[error("slice of {node} lies outside its parameter")]
    SliceOutOfRange { node: ParamNode },
    #[error("taylor scoring needs calibration gradients")]
    MissingGradients,
    #[error("no scores to select from")]
    EmptyScores,
    #[error("pruning ratio {0} must lie in [0, 1)")]
    BadRatio(f64),
    #[error("ratio would leave layer {layer} without any {kind:?} groups")]
    EmptiesLayer { layer: usize, kind: StructureKind },
}

/// Token sequences used only to compute scoring gradients.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub sequences: Vec<Vec<usize>>,
    pub source: String,
    pub seed: u64,
}

impl CalibrationSet {
    pub fn from_sequences(
        sequences: Vec<Vec<usize>>,
        source: impl Into<String>,
        seed: u64,
        max_seq_len: usize,
    ) -> Result<Self, ImportanceError> {
        if sequences.is_empty() {
            return Err(ImportanceError::EmptyCalibration);
        }
        for (index, s) in sequences.iter().enumerate() {
            if s.len() < 2 || s.len() > max_seq_len {
                return Err(ImportanceError::BadSequence {
                    index,
                    len: s.len(),
                    max: max_seq_len,
                });
            }
        }
        Ok(CalibrationSet {
            sequences,
            source: source.into(),
            seed,
        })
    }

    /// Draw `count` windows of `len` tokens (a leading beginning-of-sequence
    /// marker plus `len - 1` corpus bytes) at seeded offsets.
    pub fn from_corpus(
        text: &str,
        count: usize,
        len: usize,
        seed: u64,
        source: impl Into<String>,
        max_seq_len: usize,
    ) -> Result<Self, ImportanceError> {
        let toks = tokenizer::tokenize(text);
        let body = len.saturating_sub(1);
        if count == 0 || len < 2 || toks.len() < body {
            return Err(ImportanceError::EmptyCalibration);
        }
        let mut rng = rng::seeded(seed);
        let sequences = (0..count)
            .map(|_| {
                let start = if toks.len() == body {
                    0
                } else {
                    rand::Rng::gen_range(&mut rng, 0..=toks.len() - body)
                };
                let mut seq = Vec::with_capacity(len);
                seq.push(tokenizer::BOS);
                seq.extend_from_slice(&toks[start..start + body]);
                seq
            })
            .collect();
        Self::from_sequences(sequences, source, seed, max_seq_len)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

/// Per-parameter gradients summed over every calibration sequence.
#[derive(Debug, Clone)]
pub struct GradientStore<E: Scalar> {
    grads: BTreeMap<ParamId, Tensor<E>>,
    pub sequences_used: usize,
}

impl<E: Scalar> GradientStore<E> {
    pub fn grad(&self, id: &ParamId) -> Result<&Tensor<E>, ImportanceError> {
        self.grads
            .get(id)
            .ok_or_else(|| ImportanceError::MemberMissing(id.clone()))
    }

    pub fn params(&self) -> impl Iterator<Item = &ParamId> {
        self.grads.keys()
    }
}

/// Parameter ids covered by the dependency graph: the seven projections of
/// every layer.
pub fn prunable_param_ids<E: Scalar>(model: &TransformerModel<E>) -> Vec<ParamId> {
    let suffixes = [
        "q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj",
    ];
    (0..model.config().n_layers)
        .flat_map(|l| suffixes.iter().map(move |s| ParamId::layer(l, s)))
        .collect()
}

/// Backpropagate the mean next-token loss of every calibration sequence and
/// sum the per-parameter gradients.
pub fn accumulate_calibration_gradients<E: Scalar>(
    model: &TransformerModel<E>,
    calib: &CalibrationSet,
) -> Result<GradientStore<E>, ImportanceError> {
    if calib.is_empty() {
        return Err(ImportanceError::EmptyCalibration);
    }
    let ids = prunable_param_ids(model);
    let mut grads: BTreeMap<ParamId, Tensor<E>> = BTreeMap::new();
    for (s, seq) in calib.sequences.iter().enumerate() {
        let mut tape = Tape::new();
        let loss = model.next_token_loss_on_tape(&mut tape, seq)?;
        if !tape.value(loss).item().expect("loss is scalar").is_finite() {
            return Err(ImportanceError::NonFiniteLoss { sequence: s });
        }
        let step = tape.grad(loss, &ids)?;
        for (id, g) in step {
            if g.check_finite().is_err() {
                return Err(ImportanceError::NonFiniteGradient {
                    sequence: s,
                    param: id,
                });
            }
            match grads.get_mut(&id) {
                Some(acc) => acc.add_assign(&g).expect("gradient shapes are stable"),
                None => {
                    grads.insert(id, g);
                }
            }
        }
    }
    Ok(GradientStore {
        grads,
        sequences_used: calib.len(),
    })
}

/// Copy the rows or columns a node stands for out of its parameter tensor.
pub fn node_slice<E: Scalar>(
    tensor: &Tensor<E>,
    node: &ParamNode,
    head_dim: usize,
) -> Result<Tensor<E>, ImportanceError> {
    let block = match node.role.kind() {
        StructureKind::Head => head_dim,
        StructureKind::Channel => 1,
    };
    let start = node.unit * block;
    let out_of_range = ImportanceError::SliceOutOfRange { node: *node };
    match node.role.axis() {
        SliceAxis::Rows => {
            if start + block > tensor.rows() {
                return Err(out_of_range);
            }
            let cols = tensor.cols();
            let data = tensor.data()[start * cols..(start + block) * cols].to_vec();
            Ok(Tensor::matrix(block, cols, data).expect("slice extents agree"))
        }
        SliceAxis::Columns => {
            if start + block > tensor.cols() {
                return Err(out_of_range);
            }
            let rows = tensor.rows();
            let mut data = Vec::with_capacity(rows * block);
            for i in 0..rows {
                let row = tensor.row(i);
                data.extend_from_slice(&row[start..start + block]);
            }
            Ok(Tensor::matrix(rows, block, data).expect("slice extents agree"))
        }
    }
}

/// First-order saliency of one slice: |Σ g·w|, accumulated in f64.
pub fn element_importance<E: Scalar>(
    weight_slice: &Tensor<E>,
    grad_slice: &Tensor<E>,
) -> Result<f64, ImportanceError> {
    if weight_slice.shape() != grad_slice.shape() {
        return Err(ImportanceError::ShapeMismatch {
            a: weight_slice.shape().to_vec(),
            b: grad_slice.shape().to_vec(),
        });
    }
    let inner: f64 = weight_slice
        .data()
        .iter()
        .zip(grad_slice.data())
        .map(|(w, g)| w.as_f64() * g.as_f64())
        .sum();
    Ok(inner.abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMethod {
    /// |gᵀw| over the removed slice (needs calibration gradients).
    Taylor,
    /// Euclidean norm of the removed slice; gradient-free baseline.
    Magnitude,
}

#[derive(Debug, Clone, Serialize)]
pub struct MemberScore {
    pub node: ParamNode,
    pub importance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupScore {
    pub group: PruningGroup,
    pub importance: f64,
    pub breakdown: Vec<MemberScore>,
}

/// Score one group by summing member saliencies.
pub fn group_importance<E: Scalar>(
    group: &PruningGroup,
    model: &TransformerModel<E>,
    store: &GradientStore<E>,
) -> Result<GroupScore, ImportanceError> {
    let head_dim = model.config().head_dim;
    let mut breakdown = Vec::with_capacity(group.members.len());
    let mut total = 0.0;
    for node in &group.members {
        let id = node.param_id();
        let w = node_slice(model.param(&id)?, node, head_dim)?;
        let g = node_slice(store.grad(&id)?, node, head_dim)?;
        let importance = element_importance(&w, &g)?;
        total += importance;
        breakdown.push(MemberScore {
            node: *node,
            importance,
        });
    }
    Ok(GroupScore {
        group: group.clone(),
        importance: total,
        breakdown,
    })
}

/// Score every group of the graph. `Taylor` needs a gradient store;
/// `Magnitude` ignores it.
pub fn score_groups<E: Scalar>(
    model: &TransformerModel<E>,
    graph: &DependencyGraph,
    method: ScoreMethod,
    store: Option<&GradientStore<E>>,
) -> Result<Vec<GroupScore>, ImportanceError> {
    let head_dim = model.config().head_dim;
    graph
        .enumerate_groups()
        .into_iter()
        .map(|group| match method {
            ScoreMethod::Taylor => {
                let store = store.ok_or(ImportanceError::MissingGradients)?;
                group_importance(&group, model, store)
            }
            ScoreMethod::Magnitude => {
                let mut breakdown = Vec::with_capacity(group.members.len());
                let mut total = 0.0;
                for node in &group.members {
                    let w = node_slice(model.param(&node.param_id())?, node, head_dim)?;
                    let importance = w
                        .data()
                        .iter()
                        .map(|x| x.as_f64() * x.as_f64())
                        .sum::<f64>()
                        .sqrt();
                    total += importance;
                    breakdown.push(MemberScore {
                        node: *node,
                        importance,
                    });
                }
                Ok(GroupScore {
                    group,
                    importance: total,
                    breakdown,
                })
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionPolicy {
    /// Rank within each (layer, structure kind) bucket; default.
    PerLayer,
    /// Rank model-wide; may concentrate removals in few layers.
    Global,
}

/// Pick the groups to prune. Ties are broken by (layer, kind, unit)
/// ascending; protected layers are never selected. Selection counts are
/// floor(ratio x bucket size) per bucket under `PerLayer`, floor(ratio x
/// total) under `Global` — which errors out rather than empty a bucket.
pub fn select_groups(
    scores: &[GroupScore],
    ratio: f64,
    policy: SelectionPolicy,
    protected_layers: &[usize],
) -> Result<Vec<PruningGroup>, ImportanceError> {
    if scores.is_empty() {
        return Err(ImportanceError::EmptyScores);
    }
    if !(0.0..1.0).contains(&ratio) || !ratio.is_finite() {
        return Err(ImportanceError::BadRatio(ratio));
    }
    let eligible: Vec<&GroupScore> = scores
        .iter()
        .filter(|s| !protected_layers.contains(&s.group.layer()))
        .collect();

    let sort_key = |s: &GroupScore| (s.group.layer(), s.group.kind(), s.group.unit());
    let mut selected: Vec<PruningGroup> = Vec::new();
    match policy {
        SelectionPolicy::PerLayer => {
            let mut buckets: BTreeMap<(usize, StructureKind), Vec<&GroupScore>> = BTreeMap::new();
            for s in &eligible {
                buckets.entry((s.group.layer(), s.group.kind())).or_default().push(s);
            }
            for ((_, _), mut bucket) in buckets {
                let take = (ratio * bucket.len() as f64).floor() as usize;
                bucket.sort_by(|a, b| {
                    a.importance
                        .total_cmp(&b.importance)
                        .then_with(|| sort_key(a).cmp(&sort_key(b)))
                });
                selected.extend(bucket.into_iter().take(take).map(|s| s.group.clone()));
            }
        }
        SelectionPolicy::Global => {
            let take = (ratio * eligible.len() as f64).floor() as usize;
            let mut ranked = eligible.clone();
            ranked.sort_by(|a, b| {
                a.importance
                    .total_cmp(&b.importance)
                    .then_with(|| sort_key(a).cmp(&sort_key(b)))
            });
            let chosen: Vec<&GroupScore> = ranked.into_iter().take(take).collect();
            // A bucket emptied model-wide is an error, not a silent collapse.
            let mut left: BTreeMap<(usize, StructureKind), usize> = BTreeMap::new();
            for s in &eligible {
                *left.entry((s.group.layer(), s.group.kind())).or_default() += 1;
            }
            for s in &chosen {
                let k = (s.group.layer(), s.group.kind());
                let survivors = left.get_mut(&k).expect("chosen from eligible");
                *survivors -= 1;
                if *survivors == 0 {
                    return Err(ImportanceError::EmptiesLayer {
                        layer: k.0,
                        kind: k.1,
                    });
                }
            }
            selected.extend(chosen.into_iter().map(|s| s.group.clone()));
        }
    }
    selected.sort_by_key(|g| (g.layer(), g.kind(), g.unit()));
    Ok(selected)
}
