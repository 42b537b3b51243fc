//! Pipeline configuration file: one JSON document that drives `prunelab run`.
//! Every seed is explicit; the `PRUNELAB_SEED` environment variable, when
//! set, replaces the top-level seed (and with it every derived stream).

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use prunelab::importance::{ScoreMethod, SelectionPolicy};
use prunelab::lora::LoRAConfig;
use prunelab::model::ModelConfig;
use prunelab::train::{LossMask, TrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives pretraining data, calibration, shot selection, and evaluation
    /// streams. The model's own init seed stays in `model.rng_seed`.
    pub seed: u64,
    pub workdir: PathBuf,
    pub model: ModelConfig,
    pub pretrain: PretrainStage,
    pub pruning: PruningStage,
    pub recovery: RecoveryStage,
    pub evaluation: EvalStage,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workdir: PathBuf::from("out"),
            model: desk_model(),
            pretrain: PretrainStage::default(),
            pruning: PruningStage::default(),
            recovery: RecoveryStage::default(),
            evaluation: EvalStage::default(),
        }
    }
}

/// A model small enough that the full pipeline runs in minutes on one core.
pub fn desk_model() -> ModelConfig {
    ModelConfig {
        vocab_size: 259,
        embed_dim: 32,
        n_layers: 2,
        n_heads: 4,
        head_dim: 8,
        ffn_dim: 64,
        max_seq_len: 256,
        rope_base: 10_000.0,
        rng_seed: 0,
    }
}

/// Base-model training on one synthetic task before any pruning.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainStage {
    pub task: String,
    pub examples: usize,
    pub mask: LossMask,
    pub train: TrainConfig,
}

impl Default for PretrainStage {
    fn default() -> Self {
        PretrainStage {
            task: "copyfield".into(),
            examples: 200,
            mask: LossMask::AnswerOnly,
            train: TrainConfig {
                learning_rate: 3e-3,
                warmup_steps: 20,
                batch_size: 8,
                epochs: 10,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruningStage {
    pub ratio: f64,
    pub policy: SelectionPolicy,
    pub method: ScoreMethod,
    pub protected_layers: Vec<usize>,
    pub calibration: CalibrationSpec,
}

impl Default for PruningStage {
    fn default() -> Self {
        PruningStage {
            ratio: 0.5,
            policy: SelectionPolicy::PerLayer,
            method: ScoreMethod::Taylor,
            protected_layers: vec![],
            calibration: CalibrationSpec::default(),
        }
    }
}

/// How many gradient sequences to draw, and how long each window is.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSpec {
    pub sequences: usize,
    pub length: usize,
    /// Lines of generated held-out text when no corpus file is given.
    pub corpus_lines: usize,
    pub corpus_file: Option<PathBuf>,
}

impl Default for CalibrationSpec {
    fn default() -> Self {
        CalibrationSpec {
            sequences: 20,
            length: 128,
            corpus_lines: 60,
            corpus_file: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecoveryStage {
    pub shots: usize,
    pub rank: usize,
    pub alpha: Option<f64>,
    pub mask: LossMask,
    pub train: TrainConfig,
}

impl Default for RecoveryStage {
    fn default() -> Self {
        RecoveryStage {
            shots: 50,
            rank: 8,
            alpha: None,
            mask: LossMask::AnswerOnly,
            train: TrainConfig {
                batch_size: 8,
                ..TrainConfig::default()
            },
        }
    }
}

impl RecoveryStage {
    pub fn lora(&self, seed: u64) -> LoRAConfig {
        LoRAConfig {
            rank: self.rank,
            alpha: self.alpha,
            seed,
            ..LoRAConfig::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalStage {
    /// Task ids to evaluate; defaults to the fine-tuned task only.
    pub tasks: Vec<String>,
    /// Shots shown in each eval prompt (not the fine-tuning K).
    pub eval_shots: usize,
    pub window: usize,
    pub corpus_lines: usize,
    /// Also emit the template x task matrix report.
    pub matrix: bool,
    /// Shot counts for an optional sweep report; empty disables it.
    pub sweep_k: Vec<usize>,
}

impl Default for EvalStage {
    fn default() -> Self {
        EvalStage {
            tasks: vec!["copyfield".into()],
            eval_shots: 0,
            window: 64,
            corpus_lines: 40,
            matrix: false,
            sweep_k: vec![],
        }
    }
}

/// Stream indices for deriving per-stage seeds from the run seed.
pub mod streams {
    pub const PRETRAIN: u64 = 1;
    pub const CALIBRATION: u64 = 2;
    pub const RECOVERY: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const ADAPTER: u64 = 5;
    pub const SHUFFLE: u64 = 6;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_and_rejects_unknown_keys() {
        let cfg = RunConfig::default();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back.seed, cfg.seed);
        assert_eq!(back.pruning.ratio, cfg.pruning.ratio);

        let bad = r#"{ "sede": 3 }"#;
        assert!(serde_json::from_str::<RunConfig>(bad).is_err());
    }

    #[test]
    fn partial_configs_fill_in_defaults() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{ "seed": 9, "pruning": { "ratio": 0.2 } }"#).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.pruning.ratio, 0.2);
        assert_eq!(cfg.recovery.shots, 50);
        assert_eq!(cfg.recovery.rank, 8);
        assert_eq!(cfg.pretrain.task, "copyfield");
        assert_eq!(cfg.evaluation.window, 64);
    }
}
