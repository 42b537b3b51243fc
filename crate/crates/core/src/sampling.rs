//! Autoregressive decoding with temperature and top-k restriction.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, TransformerModel};
use crate::rng;
use crate::tensor::Scalar;
use crate::tokenizer;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("temperature {0} must be finite and nonnegative")]
    BadTemperature(f64),
    #[error("top_k must be at least 1")]
    ZeroTopK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub max_tokens: usize,
    pub temperature: f64,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            max_tokens: 64,
            temperature: 1.0,
            top_k: 50,
            seed: 0,
        }
    }
}

impl SampleConfig {
    fn validate(&self) -> Result<(), SampleError> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(SampleError::BadTemperature(self.temperature));
        }
        if self.top_k == 0 {
            return Err(SampleError::ZeroTopK);
        }
        Ok(())
    }

    fn greedy(&self) -> bool {
        self.temperature == 0.0 || self.top_k == 1
    }
}

/// Continue `prompt_ids` autoregressively; returns only the newly sampled ids
/// (eos, if reached, is not included). Stops at eos, `max_tokens`, or the
/// model's context capacity.
pub fn generate_ids<E: Scalar>(
    model: &TransformerModel<E>,
    prompt_ids: &[usize],
    config: &SampleConfig,
) -> Result<Vec<usize>, SampleError> {
    config.validate()?;
    let mut rng = rng::seeded(config.seed);
    let mut ids = prompt_ids.to_vec();
    let mut out = Vec::new();
    let capacity = model.config().max_seq_len;
    while out.len() < config.max_tokens && ids.len() < capacity {
        let logits = model.logits(&ids)?;
        let last: Vec<f64> = (0..logits.cols())
            .map(|j| logits.at2(logits.rows() - 1, j).as_f64())
            .collect();
        let next = if config.greedy() {
            argmax(&last)
        } else {
            sample_top_k(&last, config.temperature, config.top_k, &mut rng)
        };
        if next == tokenizer::EOS {
            break;
        }
        ids.push(next);
        out.push(next);
    }
    Ok(out)
}

/// Text-in/text-out decoding: the prompt is tokenized behind a bos marker and
/// the sampled continuation is returned as text.
pub fn generate<E: Scalar>(
    model: &TransformerModel<E>,
    prompt: &str,
    config: &SampleConfig,
) -> Result<String, SampleError> {
    let mut ids = vec![tokenizer::BOS];
    ids.extend(tokenizer::tokenize_bytes(prompt.as_bytes()));
    let out = generate_ids(model, &ids, config)?;
    Ok(tokenizer::detokenize_text(&out))
}

/// Lowest index wins ties, so greedy decoding is fully deterministic.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_top_k(logits: &[f64], temperature: f64, top_k: usize, rng: &mut impl Rng) -> usize {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    // Descending by logit, lowest index first among equals.
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(top_k);
    let scaled: Vec<f64> = order.iter().map(|&i| logits[i] / temperature).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|&s| (s - m).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (&idx, &w) in order.iter().zip(&weights) {
        if u < w {
            return idx;
        }
        u -= w;
    }
    *order.last().expect("top_k >= 1")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::train::{train, TrainConfig, TrainExample};

    fn tiny() -> TransformerModel<f32> {
        TransformerModel::build(ModelConfig {
            vocab_size: 259,
            embed_dim: 16,
            n_layers: 1,
            n_heads: 2,
            head_dim: 8,
            ffn_dim: 8,
            max_seq_len: 48,
            rope_base: 10_000.0,
            rng_seed: 21,
        })
        .unwrap()
    }

    #[test]
    fn defaults_are_temperature_one_top_k_fifty() {
        let d = SampleConfig::default();
        assert_eq!(d.temperature, 1.0);
        assert_eq!(d.top_k, 50);
    }

    #[test]
    fn top_k_one_ignores_the_seed() {
        let m = tiny();
        let mk = |seed| SampleConfig {
            max_tokens: 12,
            top_k: 1,
            seed,
            ..SampleConfig::default()
        };
        let a = generate(&m, "ab", &mk(0)).unwrap();
        let b = generate(&m, "ab", &mk(12345)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn greedy_output_is_invariant_to_positive_temperature() {
        let m = tiny();
        let mk = |temperature| SampleConfig {
            max_tokens: 10,
            top_k: 1,
            temperature,
            ..SampleConfig::default()
        };
        let base = generate(&m, "xy", &mk(1.0)).unwrap();
        for t in [0.0, 0.25, 3.0] {
            assert_eq!(generate(&m, "xy", &mk(t)).unwrap(), base, "temperature {t}");
        }
    }

    #[test]
    fn fixed_seed_reproduces_sampled_output() {
        let m = tiny();
        let cfg = SampleConfig {
            max_tokens: 20,
            seed: 77,
            ..SampleConfig::default()
        };
        assert_eq!(
            generate(&m, "hello", &cfg).unwrap(),
            generate(&m, "hello", &cfg).unwrap()
        );
    }

    #[test]
    fn respects_max_tokens_and_context_capacity() {
        let m = tiny();
        let cfg = SampleConfig {
            max_tokens: 5,
            ..SampleConfig::default()
        };
        let ids = generate_ids(&m, &[tokenizer::BOS, 97], &cfg).unwrap();
        assert!(ids.len() <= 5);
        let long = SampleConfig {
            max_tokens: 10_000,
            ..SampleConfig::default()
        };
        let prompt = vec![tokenizer::BOS; 2];
        let ids = generate_ids(&m, &prompt, &long).unwrap();
        assert!(prompt.len() + ids.len() <= m.config().max_seq_len);
    }

    #[test]
    fn stops_at_eos_once_the_model_learns_to_emit_it() {
        let mut m = tiny();
        let data = vec![TrainExample::all_positions(vec![
            tokenizer::BOS,
            97,
            tokenizer::EOS,
        ])];
        train(
            &mut m,
            &data,
            &TrainConfig {
                learning_rate: 5e-3,
                warmup_steps: 0,
                batch_size: 1,
                epochs: 120,
                seed: 1,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let cfg = SampleConfig {
            max_tokens: 8,
            top_k: 1,
            ..SampleConfig::default()
        };
        let out = generate(&m, "a", &cfg).unwrap();
        assert!(out.is_empty(), "expected immediate eos, got {out:?}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let m = tiny();
        let bad_t = SampleConfig {
            temperature: -1.0,
            ..SampleConfig::default()
        };
        assert!(matches!(
            generate(&m, "a", &bad_t),
            Err(SampleError::BadTemperature(_))
        ));
        let bad_k = SampleConfig {
            top_k: 0,
            ..SampleConfig::default()
        };
        assert!(matches!(generate(&m, "a", &bad_k), Err(SampleError::ZeroTopK)));
    }
}
