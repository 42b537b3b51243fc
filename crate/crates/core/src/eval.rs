//! Task evaluation: length-normalized option scoring, accuracy with per-item
//! resampled shots, windowed perplexity, the prompt x task accuracy matrix,
//! recovery rate, and the shot-count sweep.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lora::{AdaptedModel, LoRAConfig, LoRAError};
use crate::model::{ModelError, TransformerModel};
use crate::rng;
use crate::tasks::{assemble_few_shot, ClassItem, PromptTemplate, TaskDataset, TaskError};
use crate::tensor::Scalar;
use crate::tokenizer;
use crate::train::{train, LossMask, TrainConfig, TrainError, TrainExample};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Adapter(#[from] LoRAError),
    #[error("no options to score")]
    NoOptions,
    #[error("option {index} tokenizes to zero tokens")]
    EmptyOption { index: usize },
    #[error("task {task}: eval split is empty")]
    EmptyEvalSplit { task: String },
    #[error("{k} shots requested but the train pool holds {pool}")]
    ShotsExceedPool { k: usize, pool: usize },
    #[error("corpus tokenizes to {got} tokens; need at least 2")]
    CorpusTooShort { got: usize },
    #[error("window must be at least 1")]
    ZeroWindow,
    #[error("no templates given")]
    NoTemplates,
    #[error("no tasks given")]
    NoTasks,
    #[error("accuracy lists are empty")]
    EmptyAccuracies,
    #[error("accuracy list has {left} entries but the baseline has {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("baseline mean must be positive")]
    ZeroBaseline,
}

/// Per-option log-likelihood breakdown.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptionScore {
    pub index: usize,
    pub log_likelihood: f64,
    pub tokens: usize,
    /// log_likelihood / tokens — the ranking key.
    pub normalized: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub predicted: usize,
    pub scores: Vec<OptionScore>,
}

/// Negative log-likelihood of each next token, in 64-bit regardless of the
/// model element type: `out[t]` scores the prediction of `ids[t + 1]`.
fn token_nlls<E: Scalar>(
    model: &TransformerModel<E>,
    ids: &[usize],
) -> Result<Vec<f64>, EvalError> {
    let logits = model.logits(ids)?;
    let cols = logits.cols();
    let mut out = Vec::with_capacity(ids.len() - 1);
    for t in 1..ids.len() {
        let row: Vec<f64> = (0..cols).map(|j| logits.at2(t - 1, j).as_f64()).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        out.push(lse - row[ids[t]]);
    }
    Ok(out)
}

/// Score each option's tokens conditioned on the assembled prompt; highest
/// length-normalized log-likelihood wins, ties going to the lowest index.
pub fn score_classification<E: Scalar>(
    model: &TransformerModel<E>,
    prompt: &str,
    options: &[String],
) -> Result<Prediction, EvalError> {
    if options.is_empty() {
        return Err(EvalError::NoOptions);
    }
    let mut prompt_ids = vec![tokenizer::BOS];
    prompt_ids.extend(tokenizer::tokenize(prompt));
    let mut scores = Vec::with_capacity(options.len());
    for (index, option) in options.iter().enumerate() {
        let option_ids = tokenizer::tokenize(option);
        if option_ids.is_empty() {
            return Err(EvalError::EmptyOption { index });
        }
        let mut ids = prompt_ids.clone();
        ids.extend(&option_ids);
        let nlls = token_nlls(model, &ids)?;
        let log_likelihood: f64 = -nlls[prompt_ids.len() - 1..].iter().sum::<f64>();
        scores.push(OptionScore {
            index,
            log_likelihood,
            tokens: option_ids.len(),
            normalized: log_likelihood / option_ids.len() as f64,
        });
    }
    let mut predicted = 0;
    for s in &scores[1..] {
        if s.normalized > scores[predicted].normalized {
            predicted = s.index;
        }
    }
    Ok(Prediction { predicted, scores })
}

/// Accuracy over the eval split; each item's `k` shots are drawn from the
/// train pool with a seed derived from the item id, so item order is
/// irrelevant and runs replay exactly.
pub fn evaluate_accuracy<E: Scalar>(
    model: &TransformerModel<E>,
    task: &TaskDataset,
    template: &PromptTemplate,
    k: usize,
    seed: u64,
) -> Result<f64, EvalError> {
    if task.eval.is_empty() {
        return Err(EvalError::EmptyEvalSplit {
            task: task.id.clone(),
        });
    }
    if k > task.train.len() {
        return Err(EvalError::ShotsExceedPool {
            k,
            pool: task.train.len(),
        });
    }
    let mut correct = 0usize;
    for item in &task.eval {
        let mut item_rng = rng::derived(seed, item.id as u64);
        let picks = rng::sample_indices(&mut item_rng, task.train.len(), k);
        let shots: Vec<&ClassItem> = picks.iter().map(|&i| &task.train[i]).collect();
        let prompt = assemble_few_shot(template, &task.question, &shots, item)?;
        let prediction = score_classification(model, &prompt, &item.options)?;
        if prediction.predicted == item.gold {
            correct += 1;
        }
    }
    Ok(correct as f64 / task.eval.len() as f64)
}

/// Exp of the mean next-token negative log-likelihood over non-overlapping
/// windows of `window` tokens, each led by a bos marker.
pub fn evaluate_perplexity<E: Scalar>(
    model: &TransformerModel<E>,
    corpus: &str,
    window: usize,
) -> Result<f64, EvalError> {
    if window == 0 {
        return Err(EvalError::ZeroWindow);
    }
    let ids = tokenizer::tokenize(corpus);
    if ids.len() < 2 {
        return Err(EvalError::CorpusTooShort { got: ids.len() });
    }
    let window = window.min(model.config().max_seq_len - 1);
    let mut total_nll = 0.0f64;
    let mut total_tokens = 0usize;
    for chunk in ids.chunks(window) {
        let mut seq = vec![tokenizer::BOS];
        seq.extend(chunk);
        let nlls = token_nlls(model, &seq)?;
        total_nll += nlls.iter().sum::<f64>();
        total_tokens += nlls.len();
    }
    Ok((total_nll / total_tokens as f64).exp())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptTaskMatrix {
    pub template_ids: Vec<String>,
    pub task_ids: Vec<String>,
    /// `cells[i][j]` is template i's accuracy on task j.
    pub cells: Vec<Vec<f64>>,
    /// Per task, the id of the best template (ties to the lowest id).
    pub best_template_per_task: Vec<String>,
    pub mean_accuracy_per_template: Vec<f64>,
}

/// Accuracy of every template on every task.
pub fn prompt_task_matrix<E: Scalar>(
    model: &TransformerModel<E>,
    templates: &[PromptTemplate],
    tasks: &[TaskDataset],
    k: usize,
    seed: u64,
) -> Result<PromptTaskMatrix, EvalError> {
    if templates.is_empty() {
        return Err(EvalError::NoTemplates);
    }
    if tasks.is_empty() {
        return Err(EvalError::NoTasks);
    }
    let mut cells = Vec::with_capacity(templates.len());
    for template in templates {
        let row = tasks
            .iter()
            .map(|task| evaluate_accuracy(model, task, template, k, seed))
            .collect::<Result<Vec<_>, _>>()?;
        cells.push(row);
    }
    let best_template_per_task = (0..tasks.len())
        .map(|j| {
            let best = cells.iter().map(|row| row[j]).fold(f64::NEG_INFINITY, f64::max);
            templates
                .iter()
                .zip(&cells)
                .filter(|(_, row)| row[j] == best)
                .map(|(t, _)| t.id.clone())
                .min()
                .expect("at least one template")
        })
        .collect();
    let mean_accuracy_per_template = cells
        .iter()
        .map(|row| row.iter().sum::<f64>() / row.len() as f64)
        .collect();
    Ok(PromptTaskMatrix {
        template_ids: templates.iter().map(|t| t.id.clone()).collect(),
        task_ids: tasks.iter().map(|t| t.id.clone()).collect(),
        cells,
        best_template_per_task,
        mean_accuracy_per_template,
    })
}

/// 100 x mean(accuracies) / mean(baseline).
pub fn recovery_rate(accuracies: &[f64], baseline: &[f64]) -> Result<f64, EvalError> {
    if accuracies.is_empty() {
        return Err(EvalError::EmptyAccuracies);
    }
    if accuracies.len() != baseline.len() {
        return Err(EvalError::LengthMismatch {
            left: accuracies.len(),
            right: baseline.len(),
        });
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let base = mean(baseline);
    if base <= 0.0 {
        return Err(EvalError::ZeroBaseline);
    }
    Ok(100.0 * mean(accuracies) / base)
}

/// Build `k` fine-tuning sequences from the train pool: each picked item is
/// rendered as instruction + solved body, and under `AnswerOnly` masking only
/// the answer tokens (plus the closing eos) carry loss.
pub fn training_examples(
    template: &PromptTemplate,
    task: &TaskDataset,
    k: usize,
    seed: u64,
    mask: LossMask,
) -> Result<Vec<TrainExample>, EvalError> {
    if k > task.train.len() {
        return Err(EvalError::ShotsExceedPool {
            k,
            pool: task.train.len(),
        });
    }
    let mut rng = rng::seeded(seed);
    let picks = rng::sample_indices(&mut rng, task.train.len(), k);
    let mut out = Vec::with_capacity(k);
    for i in picks {
        let item = &task.train[i];
        let prompt = assemble_few_shot(template, &task.question, &[], item)?;
        let mut ids = vec![tokenizer::BOS];
        ids.extend(tokenizer::tokenize(&prompt));
        let prompt_len = ids.len();
        ids.extend(tokenizer::tokenize(item.gold_text()));
        ids.push(tokenizer::EOS);
        let weights = match mask {
            LossMask::AllPositions => vec![1.0; ids.len() - 1],
            LossMask::AnswerOnly => (0..ids.len() - 1)
                .map(|t| if t + 1 >= prompt_len { 1.0 } else { 0.0 })
                .collect(),
        };
        out.push(TrainExample::masked(ids, weights));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub perplexity: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    pub k_list: Vec<usize>,
    /// Shots shown in eval prompts (independent of the fine-tuning k).
    pub eval_shots: usize,
    pub window: usize,
    pub mask: LossMask,
    pub lora: LoRAConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

/// For each shot count, fine-tune a fresh adapter copy of `base` on that many
/// examples, merge, and measure held-out accuracy and perplexity.
pub fn shots_sweep<E: Scalar>(
    base: &TransformerModel<E>,
    task: &TaskDataset,
    template: &PromptTemplate,
    corpus: &str,
    config: &SweepConfig,
) -> Result<Vec<SweepRow>, EvalError> {
    let mut ks = config.k_list.clone();
    ks.sort_unstable();
    ks.dedup();
    let mut rows = Vec::with_capacity(ks.len());
    for k in ks {
        let examples = training_examples(template, task, k, config.seed, config.mask)?;
        let mut adapted = AdaptedModel::attach(base.clone(), config.lora.clone())?;
        train(&mut adapted, &examples, &config.train)?;
        let merged = adapted.merge()?;
        rows.push(SweepRow {
            k,
            perplexity: evaluate_perplexity(&merged, corpus, config.window)?,
            accuracy: evaluate_accuracy(&merged, task, template, config.eval_shots, config.seed)?,
        });
    }
    Ok(rows)
}
