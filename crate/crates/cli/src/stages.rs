//! One function per subcommand. Each owns a stage name that every error in
//! it is tagged with.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Serialize;

use prunelab::depgraph::DependencyGraph;
use prunelab::eval::{
    evaluate_accuracy, evaluate_perplexity, prompt_task_matrix, recovery_rate, shots_sweep,
    training_examples, SweepConfig, SweepRow,
};
use prunelab::importance::{
    accumulate_calibration_gradients, score_groups, select_groups, CalibrationSet, ScoreMethod,
    SelectionPolicy,
};
use prunelab::lora::{AdaptedModel, LoRAConfig};
use prunelab::model::{checkpoint, ModelConfig, TransformerModel};
use prunelab::pruner::{apply_pruning, compression_report, PruningPlan};
use prunelab::report::{
    render_matrix, render_reference_table, render_summary, render_sweep, EvalReport,
};
use prunelab::rng;
use prunelab::sampling::{generate, SampleConfig};
use prunelab::tasks::{load_corpus, synth, PromptTemplate, TaskDataset};
use prunelab::train::{train, LossMask, TrainConfig, TrainLog};

use crate::config::{desk_model, streams, RunConfig};
use crate::error::{CliError, CliResult, StageCtx};
use crate::io;

/// Synthetic datasets are fixed artifacts: always built from the same seed,
/// like a downloaded benchmark would be. Run seeds vary sampling, not data.
const TASK_SEED: u64 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MaskArg {
    AnswerOnly,
    AllPositions,
}

impl From<MaskArg> for LossMask {
    fn from(m: MaskArg) -> LossMask {
        match m {
            MaskArg::AnswerOnly => LossMask::AnswerOnly,
            MaskArg::AllPositions => LossMask::AllPositions,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    PerLayer,
    Global,
}

impl From<PolicyArg> for SelectionPolicy {
    fn from(p: PolicyArg) -> SelectionPolicy {
        match p {
            PolicyArg::PerLayer => SelectionPolicy::PerLayer,
            PolicyArg::Global => SelectionPolicy::Global,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Taylor,
    Magnitude,
}

impl From<MethodArg> for ScoreMethod {
    fn from(m: MethodArg) -> ScoreMethod {
        match m {
            MethodArg::Taylor => ScoreMethod::Taylor,
            MethodArg::Magnitude => ScoreMethod::Magnitude,
        }
    }
}

/// `PRUNELAB_SEED`, if set, replaces any seed given by flag or config.
fn env_seed(stage: &str) -> CliResult<Option<u64>> {
    match std::env::var("PRUNELAB_SEED") {
        Ok(s) => s
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| CliError::new(stage, format!("PRUNELAB_SEED must be a u64, got {s:?}"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(CliError::new(stage, e)),
    }
}

fn effective_seed(stage: &str, flag: u64) -> CliResult<u64> {
    Ok(env_seed(stage)?.unwrap_or(flag))
}

fn load_model(stage: &str, path: &Path) -> CliResult<TransformerModel<f32>> {
    checkpoint::load(path)
        .map_err(|e| CliError::new(stage, format!("{}: {e}", path.display())))
}

fn save_model(stage: &str, model: &TransformerModel<f32>, path: &Path) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).stage(stage)?;
        }
    }
    checkpoint::save(model, path).stage(stage)
}

fn find_task(stage: &str, id: &str) -> CliResult<(TaskDataset, PromptTemplate)> {
    synth::suite(TASK_SEED)
        .into_iter()
        .find(|(d, _)| d.id == id)
        .ok_or_else(|| {
            CliError::new(
                stage,
                format!("unknown task {id:?}; available: pattern, copyfield, paritymark, keyqa"),
            )
        })
}

fn corpus_text(stage: &str, file: Option<&Path>, lines: usize) -> CliResult<(String, String)> {
    match file {
        Some(path) => {
            let reader = BufReader::new(File::open(path).stage(stage)?);
            let text = load_corpus(reader).stage(stage)?;
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "corpus".into());
            Ok((text, name))
        }
        None => Ok((synth::corpus(TASK_SEED, lines), "held-out".into())),
    }
}

// ---------------------------------------------------------------- build ----

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Output checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Model architecture JSON; defaults to the desk-scale architecture.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Weight-init seed (overrides the config's rng_seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Synthetic task to train the fresh model on; no training when absent.
    #[arg(long)]
    pub pretrain_task: Option<String>,
    #[arg(long, default_value_t = 200)]
    pub pretrain_examples: usize,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 20)]
    pub warmup: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long, value_enum, default_value_t = MaskArg::AnswerOnly)]
    pub mask: MaskArg,
    /// Where to write the training log JSON.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct BuildReport {
    config: ModelConfig,
    param_count: usize,
    checksum: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pretrain: Option<TrainSummary>,
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    steps: usize,
    initial_loss: Option<f64>,
    final_loss: Option<f64>,
}

impl TrainSummary {
    fn of(log: &TrainLog) -> Self {
        TrainSummary {
            steps: log.steps(),
            initial_loss: log.initial_loss(),
            final_loss: log.final_loss(),
        }
    }
}

pub fn cmd_build(args: &BuildArgs) -> CliResult<()> {
    const STAGE: &str = "build";
    let mut config = match &args.config {
        Some(path) => io::read_json::<ModelConfig>(STAGE, path)?,
        None => desk_model(),
    };
    if let Some(seed) = env_seed(STAGE)?.or(args.seed) {
        config.rng_seed = seed;
    }
    let mut model = TransformerModel::<f32>::build(config).stage(STAGE)?;
    let mut log = None;
    if let Some(task_id) = &args.pretrain_task {
        let (task, template) = find_task(STAGE, task_id)?;
        let data_seed = rng::mix(model.config().rng_seed, streams::PRETRAIN);
        let examples = training_examples(
            &template,
            &task,
            args.pretrain_examples,
            data_seed,
            args.mask.into(),
        )
        .stage(STAGE)?;
        let train_cfg = TrainConfig {
            learning_rate: args.lr,
            warmup_steps: args.warmup,
            batch_size: args.batch_size,
            epochs: args.epochs,
            max_steps: args.max_steps,
            seed: rng::mix(model.config().rng_seed, streams::SHUFFLE),
            ..TrainConfig::default()
        };
        log = Some(train(&mut model, &examples, &train_cfg).stage(STAGE)?);
    }
    save_model(STAGE, &model, &args.out)?;
    if let (Some(path), Some(log)) = (&args.log, &log) {
        io::write_json(STAGE, path, log)?;
    }
    let report = BuildReport {
        config: model.config().clone(),
        param_count: model.param_count(),
        checksum: format!("{:016x}", model.checksum()),
        pretrain: log.as_ref().map(TrainSummary::of),
    };
    io::write_json(STAGE, &args.out.with_extension("build.json"), &report)?;
    println!(
        "wrote {} ({} parameters)",
        args.out.display(),
        report.param_count
    );
    Ok(())
}

// ---------------------------------------------------------------- graph ----

#[derive(Debug, Args)]
pub struct GraphArgs {
    /// Input checkpoint.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Emit the full graph (nodes, edges, groups) as JSON.
    #[arg(long)]
    pub dump: bool,
    /// Dump destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_graph(args: &GraphArgs) -> CliResult<()> {
    const STAGE: &str = "graph";
    let model = load_model(STAGE, &args.input)?;
    let graph = DependencyGraph::for_model(&model);
    if args.dump {
        let dump = graph.dump();
        match &args.out {
            Some(path) => io::write_json(STAGE, path, &dump)?,
            None => println!("{}", serde_json::to_string_pretty(&dump).stage(STAGE)?),
        }
    } else {
        println!(
            "{} nodes, {} edges, {} groups",
            graph.node_count(),
            graph.edge_count(),
            graph.enumerate_groups().len()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------- prune ----

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Fraction of groups to remove, in [0, 1).
    #[arg(long)]
    pub ratio: f64,
    #[arg(long, value_enum, default_value_t = PolicyArg::PerLayer)]
    pub policy: PolicyArg,
    #[arg(long, value_enum, default_value_t = MethodArg::Taylor)]
    pub method: MethodArg,
    /// Layers exempt from pruning (comma-separated indices).
    #[arg(long, value_delimiter = ',')]
    pub protect: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    pub calib_sequences: usize,
    #[arg(long, default_value_t = 128)]
    pub calib_len: usize,
    /// Calibration sampling seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON-lines {text} corpus; generated text when absent.
    #[arg(long)]
    pub calib_corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 60)]
    pub corpus_lines: usize,
    /// Where to write all group scores and the selected set.
    #[arg(long)]
    pub scores_out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct ScoresReport<'a> {
    method: ScoreMethod,
    policy: SelectionPolicy,
    ratio: f64,
    scores: &'a [prunelab::importance::GroupScore],
    selected: Vec<String>,
}

pub fn cmd_prune(args: &PruneArgs) -> CliResult<()> {
    const STAGE: &str = "prune";
    let model = load_model(STAGE, &args.input)?;
    let seed = effective_seed(STAGE, args.seed)?;
    let graph = DependencyGraph::for_model(&model);
    let (text, source) = corpus_text(STAGE, args.calib_corpus.as_deref(), args.corpus_lines)?;
    let max_len = model.config().max_seq_len;
    let calib = CalibrationSet::from_corpus(
        &text,
        args.calib_sequences,
        args.calib_len.min(max_len),
        rng::mix(seed, streams::CALIBRATION),
        source,
        max_len,
    )
    .stage(STAGE)?;
    let method: ScoreMethod = args.method.into();
    let store = match method {
        ScoreMethod::Taylor => {
            Some(accumulate_calibration_gradients(&model, &calib).stage(STAGE)?)
        }
        ScoreMethod::Magnitude => None,
    };
    let scores = score_groups(&model, &graph, method, store.as_ref()).stage(STAGE)?;
    let policy: SelectionPolicy = args.policy.into();
    let selected = select_groups(&scores, args.ratio, policy, &args.protect).stage(STAGE)?;
    if let Some(path) = &args.scores_out {
        let report = ScoresReport {
            method,
            policy,
            ratio: args.ratio,
            scores: &scores,
            selected: selected.iter().map(|g| g.label.clone()).collect(),
        };
        io::write_json(STAGE, path, &report)?;
    }
    let plan = PruningPlan::from_groups(&selected, args.ratio, policy).stage(STAGE)?;
    let pruned = apply_pruning(&model, &plan).stage(STAGE)?;
    save_model(STAGE, &pruned, &args.out)?;
    let compression = compression_report(&model, &pruned);
    io::write_json(STAGE, &args.out.with_extension("compression.json"), &compression)?;
    println!(
        "wrote {} ({} -> {} parameters, {} groups removed)",
        args.out.display(),
        model.param_count(),
        pruned.param_count(),
        plan.groups_removed()
    );
    Ok(())
}

// ------------------------------------------------------------- finetune ----

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Task whose train pool provides the shots.
    #[arg(long)]
    pub task: String,
    #[arg(long, default_value_t = 50)]
    pub shots: usize,
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub rank: usize,
    /// Adapter scale numerator; equals the rank when absent.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 100)]
    pub warmup: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long, value_enum, default_value_t = MaskArg::AnswerOnly)]
    pub mask: MaskArg,
    #[arg(long)]
    pub log: Option<PathBuf>,
}

pub fn cmd_finetune(args: &FinetuneArgs) -> CliResult<()> {
    const STAGE: &str = "finetune";
    let model = load_model(STAGE, &args.input)?;
    let seed = effective_seed(STAGE, args.seed)?;
    let (task, template) = find_task(STAGE, &args.task)?;
    let examples = training_examples(
        &template,
        &task,
        args.shots,
        rng::mix(seed, streams::RECOVERY),
        args.mask.into(),
    )
    .stage(STAGE)?;
    let lora = LoRAConfig {
        rank: args.rank,
        alpha: args.alpha,
        seed: rng::mix(seed, streams::ADAPTER),
        ..LoRAConfig::default()
    };
    let mut adapted = AdaptedModel::attach(model, lora).stage(STAGE)?;
    let train_cfg = TrainConfig {
        learning_rate: args.lr,
        warmup_steps: args.warmup,
        batch_size: args.batch_size,
        epochs: args.epochs,
        max_steps: args.max_steps,
        seed: rng::mix(seed, streams::SHUFFLE),
        ..TrainConfig::default()
    };
    let log = train(&mut adapted, &examples, &train_cfg).stage(STAGE)?;
    let merged = adapted.merge().stage(STAGE)?;
    save_model(STAGE, &merged, &args.out)?;
    if let Some(path) = &args.log {
        io::write_json(STAGE, path, &log)?;
    }
    println!(
        "wrote {} ({} steps, loss {} -> {})",
        args.out.display(),
        log.steps(),
        log.initial_loss().map(|l| format!("{l:.4}")).unwrap_or_default(),
        log.final_loss().map(|l| format!("{l:.4}")).unwrap_or_default(),
    );
    Ok(())
}

// ----------------------------------------------------------------- eval ----

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Comma-separated task ids.
    #[arg(long, value_delimiter = ',', default_value = "pattern,copyfield,paritymark,keyqa")]
    pub tasks: Vec<String>,
    /// Shots shown in each eval prompt.
    #[arg(long, default_value_t = 0)]
    pub shots: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub window: usize,
    /// JSON-lines {text} corpus for perplexity; generated text when absent.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 40)]
    pub corpus_lines: usize,
    /// Earlier eval report; enables the recovery-rate line.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn eval_report(
    stage: &str,
    model: &TransformerModel<f32>,
    task_ids: &[String],
    shots: usize,
    seed: u64,
    corpus: &(String, String),
    window: usize,
) -> CliResult<EvalReport> {
    let mut report = EvalReport::default();
    for id in task_ids {
        let (task, template) = find_task(stage, id)?;
        let acc = evaluate_accuracy(model, &task, &template, shots, seed).stage(stage)?;
        report.task_accuracy.insert(id.clone(), acc);
    }
    report.mean_accuracy = report.task_accuracy.values().sum::<f64>()
        / report.task_accuracy.len().max(1) as f64;
    let ppl = evaluate_perplexity(model, &corpus.0, window).stage(stage)?;
    report.perplexity.insert(corpus.1.clone(), ppl);
    report.validate().stage(stage)?;
    Ok(report)
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    const STAGE: &str = "eval";
    let model = load_model(STAGE, &args.input)?;
    let seed = rng::mix(effective_seed(STAGE, args.seed)?, streams::EVAL);
    let corpus = corpus_text(STAGE, args.corpus.as_deref(), args.corpus_lines)?;
    let mut report = eval_report(
        STAGE,
        &model,
        &args.tasks,
        args.shots,
        seed,
        &corpus,
        args.window,
    )?;
    if let Some(path) = &args.baseline {
        let baseline: EvalReport = io::read_json(STAGE, path)?;
        let mut ours = Vec::new();
        let mut theirs = Vec::new();
        for (task, &acc) in &report.task_accuracy {
            let base = baseline.task_accuracy.get(task).ok_or_else(|| {
                CliError::new(STAGE, format!("baseline report lacks task {task:?}"))
            })?;
            ours.push(acc);
            theirs.push(*base);
        }
        report.recovery_rate = Some(recovery_rate(&ours, &theirs).stage(STAGE)?);
    }
    println!("{}", render_summary(&report));
    if let Some(path) = &args.out {
        io::write_json(STAGE, path, &report)?;
    }
    Ok(())
}

// -------------------------------------------------------- prompt-matrix ----

#[derive(Debug, Args)]
pub struct MatrixArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub shots: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_matrix(args: &MatrixArgs) -> CliResult<()> {
    const STAGE: &str = "prompt-matrix";
    let model = load_model(STAGE, &args.input)?;
    let seed = rng::mix(effective_seed(STAGE, args.seed)?, streams::EVAL);
    let suite = synth::suite(TASK_SEED);
    let templates: Vec<PromptTemplate> = suite.iter().map(|(_, t)| t.clone()).collect();
    let tasks: Vec<TaskDataset> = suite.into_iter().map(|(d, _)| d).collect();
    let matrix = prompt_task_matrix(&model, &templates, &tasks, args.shots, seed).stage(STAGE)?;
    println!("{}", render_matrix(&matrix));
    if let Some(path) = &args.out {
        io::write_json(STAGE, path, &matrix)?;
    }
    Ok(())
}

// ---------------------------------------------------------- sweep-shots ----

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub task: String,
    /// Shot counts to fine-tune at (comma-separated).
    #[arg(long = "k-list", value_delimiter = ',', default_value = "10,20,50")]
    pub k_list: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub eval_shots: usize,
    #[arg(long, default_value_t = 64)]
    pub window: usize,
    #[arg(long, default_value_t = 40)]
    pub corpus_lines: usize,
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 100)]
    pub warmup: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 8)]
    pub rank: usize,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = MaskArg::AnswerOnly)]
    pub mask: MaskArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_sweep(args: &SweepArgs) -> CliResult<()> {
    const STAGE: &str = "sweep-shots";
    let model = load_model(STAGE, &args.input)?;
    let seed = effective_seed(STAGE, args.seed)?;
    let (task, template) = find_task(STAGE, &args.task)?;
    let corpus = synth::corpus(TASK_SEED, args.corpus_lines);
    let config = SweepConfig {
        k_list: args.k_list.clone(),
        eval_shots: args.eval_shots,
        window: args.window,
        mask: args.mask.into(),
        lora: LoRAConfig {
            rank: args.rank,
            alpha: args.alpha,
            seed: rng::mix(seed, streams::ADAPTER),
            ..LoRAConfig::default()
        },
        train: TrainConfig {
            learning_rate: args.lr,
            warmup_steps: args.warmup,
            batch_size: args.batch_size,
            epochs: args.epochs,
            seed: rng::mix(seed, streams::SHUFFLE),
            ..TrainConfig::default()
        },
        seed: rng::mix(seed, streams::EVAL),
    };
    let rows = shots_sweep(&model, &task, &template, &corpus, &config).stage(STAGE)?;
    println!("{}", render_sweep(&rows));
    if let Some(path) = &args.out {
        io::write_json(STAGE, path, &rows)?;
    }
    Ok(())
}

// ------------------------------------------------------------- generate ----

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub prompt: String,
    #[arg(long, default_value_t = 64)]
    pub max_tokens: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long = "top-k", default_value_t = 50)]
    pub top_k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn cmd_generate(args: &GenerateArgs) -> CliResult<()> {
    const STAGE: &str = "generate";
    let model = load_model(STAGE, &args.input)?;
    let config = SampleConfig {
        max_tokens: args.max_tokens,
        temperature: args.temperature,
        top_k: args.top_k,
        seed: effective_seed(STAGE, args.seed)?,
    };
    let text = generate(&model, &args.prompt, &config).stage(STAGE)?;
    println!("{text}");
    Ok(())
}

// --------------------------------------------------------------- report ----

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Print the published full-scale recovery table with recomputed rates.
    #[arg(long, conflicts_with = "from")]
    pub published: bool,
    /// Render a stored report (eval, matrix, or sweep JSON) as text.
    #[arg(long)]
    pub from: Option<PathBuf>,
}

pub fn cmd_report(args: &ReportArgs) -> CliResult<()> {
    const STAGE: &str = "report";
    if args.published {
        println!("{}", render_reference_table());
        return Ok(());
    }
    let path = args
        .from
        .as_ref()
        .ok_or_else(|| CliError::new(STAGE, "pass --published or --from FILE"))?;
    let value: serde_json::Value = io::read_json(STAGE, path)?;
    if value.get("cells").is_some() {
        let matrix = serde_json::from_value(value).stage(STAGE)?;
        println!("{}", render_matrix(&matrix));
    } else if value.is_array() {
        let rows: Vec<SweepRow> = serde_json::from_value(value).stage(STAGE)?;
        println!("{}", render_sweep(&rows));
    } else {
        let report: EvalReport = serde_json::from_value(value).stage(STAGE)?;
        report.validate().stage(STAGE)?;
        println!("{}", render_summary(&report));
        if let Some(matrix) = &report.matrix {
            println!("\n{}", render_matrix(matrix));
        }
        if !report.sweep.is_empty() {
            println!("\n{}", render_sweep(&report.sweep));
        }
    }
    Ok(())
}

// ------------------------------------------------------------------ run ----

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Pipeline configuration JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Reuse an existing base checkpoint.
    #[arg(long)]
    pub skip_build: bool,
    /// Reuse an existing pruned checkpoint.
    #[arg(long)]
    pub skip_prune: bool,
    /// Reuse an existing recovered checkpoint.
    #[arg(long)]
    pub skip_finetune: bool,
    /// Do not evaluate.
    #[arg(long)]
    pub skip_eval: bool,
}

#[derive(Debug, Serialize)]
struct PipelineEvalReport {
    baseline: EvalReport,
    pruned: EvalReport,
    recovered: EvalReport,
    recovery_rate_pruned: f64,
    recovery_rate_recovered: f64,
}

fn paired_recovery(stage: &str, ours: &EvalReport, base: &EvalReport) -> CliResult<f64> {
    let a: Vec<f64> = ours.task_accuracy.values().copied().collect();
    let b: Vec<f64> = base.task_accuracy.values().copied().collect();
    recovery_rate(&a, &b).stage(stage)
}

pub fn cmd_run(args: &RunArgs) -> CliResult<()> {
    let mut config: RunConfig = io::read_json("run", &args.config)?;
    if let Some(seed) = env_seed("run")? {
        config.seed = seed;
    }
    let dir = &config.workdir;
    std::fs::create_dir_all(dir).stage("run")?;
    let base_ckpt = dir.join("base.ckpt");
    let pruned_ckpt = dir.join("pruned.ckpt");
    let recovered_ckpt = dir.join("recovered.ckpt");

    if !args.skip_build {
        const STAGE: &str = "build";
        let mut model = TransformerModel::<f32>::build(config.model.clone()).stage(STAGE)?;
        let (task, template) = find_task(STAGE, &config.pretrain.task)?;
        let examples = training_examples(
            &template,
            &task,
            config.pretrain.examples,
            rng::mix(config.seed, streams::PRETRAIN),
            config.pretrain.mask,
        )
        .stage(STAGE)?;
        let train_cfg = TrainConfig {
            seed: rng::mix(config.seed, streams::SHUFFLE),
            ..config.pretrain.train.clone()
        };
        let log = train(&mut model, &examples, &train_cfg).stage(STAGE)?;
        save_model(STAGE, &model, &base_ckpt)?;
        let report = BuildReport {
            config: model.config().clone(),
            param_count: model.param_count(),
            checksum: format!("{:016x}", model.checksum()),
            pretrain: Some(TrainSummary::of(&log)),
        };
        io::write_json(STAGE, &dir.join("build.json"), &report)?;
        println!("[build] {} parameters, {} steps", report.param_count, log.steps());
    }

    if !args.skip_prune {
        const STAGE: &str = "prune";
        let model = load_model(STAGE, &base_ckpt)?;
        let graph = DependencyGraph::for_model(&model);
        let spec = &config.pruning.calibration;
        let (text, source) =
            corpus_text(STAGE, spec.corpus_file.as_deref(), spec.corpus_lines)?;
        let max_len = model.config().max_seq_len;
        let calib = CalibrationSet::from_corpus(
            &text,
            spec.sequences,
            spec.length.min(max_len),
            rng::mix(config.seed, streams::CALIBRATION),
            source,
            max_len,
        )
        .stage(STAGE)?;
        let store = match config.pruning.method {
            ScoreMethod::Taylor => {
                Some(accumulate_calibration_gradients(&model, &calib).stage(STAGE)?)
            }
            ScoreMethod::Magnitude => None,
        };
        let scores =
            score_groups(&model, &graph, config.pruning.method, store.as_ref()).stage(STAGE)?;
        let selected = select_groups(
            &scores,
            config.pruning.ratio,
            config.pruning.policy,
            &config.pruning.protected_layers,
        )
        .stage(STAGE)?;
        let report = ScoresReport {
            method: config.pruning.method,
            policy: config.pruning.policy,
            ratio: config.pruning.ratio,
            scores: &scores,
            selected: selected.iter().map(|g| g.label.clone()).collect(),
        };
        io::write_json(STAGE, &dir.join("scores.json"), &report)?;
        let plan = PruningPlan::from_groups(&selected, config.pruning.ratio, config.pruning.policy)
            .stage(STAGE)?;
        let pruned = apply_pruning(&model, &plan).stage(STAGE)?;
        save_model(STAGE, &pruned, &pruned_ckpt)?;
        io::write_json(STAGE, &dir.join("compression.json"), &compression_report(&model, &pruned))?;
        println!(
            "[prune] {} -> {} parameters ({} groups)",
            model.param_count(),
            pruned.param_count(),
            plan.groups_removed()
        );
    }

    if !args.skip_finetune {
        const STAGE: &str = "finetune";
        let model = load_model(STAGE, &pruned_ckpt)?;
        let (task, template) = find_task(STAGE, &config.pretrain.task)?;
        let examples = training_examples(
            &template,
            &task,
            config.recovery.shots,
            rng::mix(config.seed, streams::RECOVERY),
            config.recovery.mask,
        )
        .stage(STAGE)?;
        let lora = config
            .recovery
            .lora(rng::mix(config.seed, streams::ADAPTER));
        let mut adapted = AdaptedModel::attach(model, lora).stage(STAGE)?;
        let train_cfg = TrainConfig {
            seed: rng::mix(config.seed, streams::SHUFFLE),
            ..config.recovery.train.clone()
        };
        let log = train(&mut adapted, &examples, &train_cfg).stage(STAGE)?;
        let merged = adapted.merge().stage(STAGE)?;
        save_model(STAGE, &merged, &recovered_ckpt)?;
        io::write_json(STAGE, &dir.join("train_log.json"), &log)?;
        println!("[finetune] {} steps", log.steps());
    }

    if !args.skip_eval {
        const STAGE: &str = "eval";
        let corpus = (
            synth::corpus(TASK_SEED, config.evaluation.corpus_lines),
            "held-out".to_string(),
        );
        let seed = rng::mix(config.seed, streams::EVAL);
        let shots = config.evaluation.eval_shots;
        let window = config.evaluation.window;
        let tasks = &config.evaluation.tasks;
        let baseline_model = load_model(STAGE, &base_ckpt)?;
        let pruned_model = load_model(STAGE, &pruned_ckpt)?;
        let recovered_model = load_model(STAGE, &recovered_ckpt)?;
        let baseline = eval_report(STAGE, &baseline_model, tasks, shots, seed, &corpus, window)?;
        let pruned = eval_report(STAGE, &pruned_model, tasks, shots, seed, &corpus, window)?;
        let recovered =
            eval_report(STAGE, &recovered_model, tasks, shots, seed, &corpus, window)?;
        let report = PipelineEvalReport {
            recovery_rate_pruned: paired_recovery(STAGE, &pruned, &baseline)?,
            recovery_rate_recovered: paired_recovery(STAGE, &recovered, &baseline)?,
            baseline,
            pruned,
            recovered,
        };
        io::write_json(STAGE, &dir.join("eval.json"), &report)?;
        println!(
            "[eval] baseline {} pruned {} recovered {} (recovery {})",
            prunelab::report::fmt_pct(report.baseline.mean_accuracy),
            prunelab::report::fmt_pct(report.pruned.mean_accuracy),
            prunelab::report::fmt_pct(report.recovered.mean_accuracy),
            prunelab::report::fmt2(report.recovery_rate_recovered),
        );

        if config.evaluation.matrix {
            let model = load_model(STAGE, &recovered_ckpt)?;
            let suite = synth::suite(TASK_SEED);
            let templates: Vec<PromptTemplate> =
                suite.iter().map(|(_, t)| t.clone()).collect();
            let datasets: Vec<TaskDataset> = suite.into_iter().map(|(d, _)| d).collect();
            let matrix =
                prompt_task_matrix(&model, &templates, &datasets, shots, seed).stage(STAGE)?;
            io::write_json(STAGE, &dir.join("matrix.json"), &matrix)?;
        }
        if !config.evaluation.sweep_k.is_empty() {
            let model = load_model(STAGE, &pruned_ckpt)?;
            let (task, template) = find_task(STAGE, &config.pretrain.task)?;
            let sweep_cfg = SweepConfig {
                k_list: config.evaluation.sweep_k.clone(),
                eval_shots: shots,
                window,
                mask: config.recovery.mask,
                lora: config.recovery.lora(rng::mix(config.seed, streams::ADAPTER)),
                train: TrainConfig {
                    seed: rng::mix(config.seed, streams::SHUFFLE),
                    ..config.recovery.train.clone()
                },
                seed: rng::mix(config.seed, streams::RECOVERY),
            };
            let rows = shots_sweep(&model, &task, &template, &corpus.0, &sweep_cfg).stage(STAGE)?;
            io::write_json(STAGE, &dir.join("sweep.json"), &rows)?;
        }
    }
    Ok(())
}
