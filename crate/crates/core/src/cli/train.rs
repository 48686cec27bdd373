//! The `train` command: experiment directories, data sources, the epoch
//! loop, evaluation and checkpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser};
use rand::distr::{Alphanumeric, SampleString};
use serde::Serialize;

use super::{config, parse_bool, runtime, CliError};
use crate::dataset::{
    eval_prefixes, generate_example, read_examples, write_example, ExampleSet, Sampler,
    SamplerConfig, SamplerMode, Source,
};
use crate::evaluator::{evaluate_dataset, EvalConfig, ExportLevel, PredictionSink};
use crate::generators::{Operation, RngStream, Split, TaskSpec};
use crate::model::{
    Activation, Architecture, InitScheme, ModelConfig, Positional, StackConfig, Transformer,
};
use crate::scalar::{DType, Scalar};
use crate::tokenizer::Vocabulary;
use crate::trainer::checkpoint::Checkpoint;
use crate::trainer::log::{metrics_line, Logger};
use crate::trainer::optim::{parse_optimizer, OptimizerConfig};
use crate::trainer::{
    load_parameters, parse_stopping_criterion, parse_validation_metrics, streams, MetricTracker,
    StopDecision, TrainConfig, TrainData, Trainer, WorkerPool,
};

/// Every `train` flag. Booleans take an explicit value (`--cpu true`) or
/// none (`--cpu`).
#[derive(Debug, Clone, PartialEq, Args, Serialize)]
#[command(rename_all = "snake_case")]
pub struct TrainArgs {
    // Experiment
    #[arg(long, default_value = "./dumped")]
    pub dump_path: String,
    #[arg(long, default_value = "debug")]
    pub exp_name: String,
    /// Random 10-character id when empty.
    #[arg(long, default_value = "")]
    pub exp_id: String,
    #[arg(long, default_value = "")]
    pub reload_checkpoint: String,
    #[arg(long, default_value = "")]
    pub reload_model: String,
    #[arg(long, default_value_t = 0)]
    pub save_periodic: usize,
    #[arg(long, default_value = "")]
    pub validation_metrics: String,
    #[arg(long, default_value = "")]
    pub stopping_criterion: String,
    #[arg(long, alias = "max_epochs", default_value_t = 100_000)]
    pub max_epoch: usize,
    #[arg(long, default_value_t = 300_000)]
    pub epoch_size: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value = "adam,lr=0.0001")]
    pub optimizer: String,
    /// Zero disables clipping.
    #[arg(long, default_value_t = 5.0)]
    pub clip_grad_norm: f64,
    #[arg(long, default_value_t = 1)]
    pub accumulate_gradients: usize,
    #[arg(long, default_value_t = 200)]
    pub report_loss_every: u64,
    /// Negative seeds draw from OS entropy.
    #[arg(long, alias = "base_env_seed", default_value_t = -1, allow_negative_numbers = true)]
    pub env_base_seed: i64,
    #[arg(long, default_value_t = 1)]
    pub num_workers: usize,
    /// Single in-process data stream and a fixed seed.
    #[arg(long, default_value_t = false, value_parser = parse_bool, num_args = 0..=1, default_missing_value = "true", action = ArgAction::Set)]
    pub deterministic: bool,
    #[arg(long, default_value = "f64", value_parser = ["f64", "f32"])]
    pub dtype: String,
    /// Examples with a longer input or output are skipped; -1 disables.
    #[arg(long, default_value_t = 512, allow_negative_numbers = true)]
    pub max_len: i64,

    // Task
    #[arg(long, default_value = "gcd")]
    pub operation: String,
    #[arg(long, default_value_t = 1000)]
    pub base: u64,
    #[arg(long, default_value_t = 1, allow_negative_numbers = true)]
    pub minint: i64,
    #[arg(long, default_value_t = 1_000_000, allow_negative_numbers = true)]
    pub maxint: i64,
    #[arg(long, alias = "modulus", default_value_t = 67)]
    pub modulo: i64,
    #[arg(long, default_value_t = 5)]
    pub dim1: usize,
    #[arg(long, default_value_t = 5)]
    pub dim2: usize,
    #[arg(long, default_value_t = 100)]
    pub max_class: i64,

    // Data files
    #[arg(long, default_value = "")]
    pub train_data: String,
    /// Comma-separated; the first is `valid`, then `test`, `test2`, …
    #[arg(long, default_value = "")]
    pub eval_data: String,
    #[arg(long, default_value_t = -1, allow_negative_numbers = true)]
    pub reload_data_size: i64,
    #[arg(long, default_value_t = -1, allow_negative_numbers = true)]
    pub eval_data_size: i64,
    #[arg(long, default_value_t = false, value_parser = parse_bool, num_args = 0..=1, default_missing_value = "true", action = ArgAction::Set)]
    pub batch_load: bool,
    #[arg(long, default_value_t = 100_000, allow_negative_numbers = true)]
    pub reload_size: i64,
    #[arg(long, default_value_t = false, value_parser = parse_bool, num_args = 0..=1, default_missing_value = "true", action = ArgAction::Set)]
    pub two_classes: bool,
    #[arg(long, default_value_t = 0)]
    pub first_class_size: usize,
    #[arg(long, default_value_t = 0.5)]
    pub first_class_prob: f64,
    #[arg(long, default_value_t = false, value_parser = parse_bool, num_args = 0..=1, default_missing_value = "true", action = ArgAction::Set)]
    pub export_data: bool,

    // Evaluation
    #[arg(long, default_value_t = 10_000)]
    pub eval_size: usize,
    #[arg(long, default_value_t = 128)]
    pub batch_size_eval: usize,
    #[arg(long, default_value_t = false, value_parser = parse_bool, num_args = 0..=1, default_missing_value = "true", action = ArgAction::Set)]
    pub beam_search: bool,
    #[arg(long, default_value_t = 1)]
    pub beam_size: usize,
    #[arg(long, default_value_t = 512)]
    pub max_output_len: usize,
    #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u8).range(0..=2))]
    pub eval_verbose: u8,
    #[arg(long, default_value_t = false, value_parser = parse_bool, num_args = 0..=1, default_missing_value = "true", action = ArgAction::Set)]
    pub eval_verbose_print: bool,
    #[arg(long, default_value_t = false, value_parser = parse_bool, num_args = 0..=1, default_missing_value = "true", action = ArgAction::Set)]
    pub export_pred: bool,
    #[arg(long, default_value_t = false, value_parser = parse_bool, num_args = 0..=1, default_missing_value = "true", action = ArgAction::Set)]
    pub eval_only: bool,
    #[arg(long, default_value = "")]
    pub eval_from_exp: String,

    // Model
    #[arg(long, default_value = "encoder_decoder", value_parser = ["encoder_decoder", "encoder_only"])]
    pub architecture: String,
    #[arg(long, default_value_t = 4)]
    pub n_enc_layers: usize,
    #[arg(long, default_value_t = 4)]
    pub n_dec_layers: usize,
    #[arg(long, default_value_t = 256)]
    pub enc_emb_dim: usize,
    #[arg(long, default_value_t = 256)]
    pub dec_emb_dim: usize,
    #[arg(long, default_value_t = 8)]
    pub n_enc_heads: usize,
    #[arg(long, default_value_t = 8)]
    pub n_dec_heads: usize,
    #[arg(long, alias = "n_enc_hidden_layer", default_value_t = 1)]
    pub n_enc_hidden_layers: usize,
    #[arg(long, alias = "n_dec_hidden_layer", default_value_t = 1)]
    pub n_dec_hidden_layers: usize,
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
    #[arg(long, default_value_t = 0.0)]
    pub attention_dropout: f64,
    #[arg(long, default_value_t = true, value_parser = parse_bool, num_args = 0..=1, default_missing_value = "true", action = ArgAction::Set)]
    pub share_inout_emb: bool,
    #[arg(long, default_value_t = false, value_parser = parse_bool, num_args = 0..=1, default_missing_value = "true", action = ArgAction::Set)]
    pub sinusoidal_embeddings: bool,
    #[arg(long, default_value_t = true, value_parser = parse_bool, num_args = 0..=1, default_missing_value = "true", action = ArgAction::Set)]
    pub enc_has_pos_emb: bool,
    #[arg(long, default_value_t = true, value_parser = parse_bool, num_args = 0..=1, default_missing_value = "true", action = ArgAction::Set)]
    pub dec_has_pos_emb: bool,
    #[arg(long, default_value_t = false, value_parser = parse_bool, num_args = 0..=1, default_missing_value = "true", action = ArgAction::Set)]
    pub xav_init: bool,
    #[arg(long, default_value_t = false, value_parser = parse_bool, num_args = 0..=1, default_missing_value = "true", action = ArgAction::Set)]
    pub gelu_activation: bool,
    #[arg(long, default_value_t = -1, allow_negative_numbers = true)]
    pub enc_loop_idx: i64,
    #[arg(long, default_value_t = -1, allow_negative_numbers = true)]
    pub dec_loop_idx: i64,
    #[arg(long, default_value_t = 1)]
    pub enc_loops: usize,
    #[arg(long, default_value_t = 1)]
    pub dec_loops: usize,
    /// Learned position table size; -1 sizes it from max_len and max_output_len.
    #[arg(long, default_value_t = -1, allow_negative_numbers = true)]
    pub max_positions: i64,

    // Accepted for compatibility; execution is CPU only.
    #[arg(long, default_value_t = false, value_parser = parse_bool, num_args = 0..=1, default_missing_value = "true", action = ArgAction::Set)]
    pub cpu: bool,
    #[arg(long, default_value_t = 0, allow_negative_numbers = true)]
    pub local_gpu: i64,
    #[arg(long, default_value_t = -1, allow_negative_numbers = true)]
    pub local_rank: i64,
    #[arg(long, default_value_t = false, value_parser = parse_bool, num_args = 0..=1, default_missing_value = "true", action = ArgAction::Set)]
    pub fp16: bool,
    #[arg(long, default_value_t = -1, allow_negative_numbers = true)]
    pub amp: i64,
}

#[derive(Parser)]
#[command(name = "train", rename_all = "snake_case")]
struct TrainOnly {
    #[command(flatten)]
    args: TrainArgs,
}

impl Default for TrainArgs {
    fn default() -> Self {
        TrainOnly::parse_from(["train"]).args
    }
}

impl TrainArgs {
    /// Parses flags given without the program or subcommand name.
    pub fn from_flags<S: AsRef<str>>(flags: &[S]) -> Result<Self, clap::Error> {
        let argv = std::iter::once("train").chain(flags.iter().map(AsRef::as_ref));
        TrainOnly::try_parse_from(argv).map(|t| t.args)
    }

    /// `--key value` per line, keys sorted. Feeding the lines back through
    /// [`TrainArgs::from_params`] reproduces the configuration.
    pub fn params_text(&self) -> String {
        let v = serde_json::to_value(self).expect("flags serialize");
        let map: BTreeMap<String, serde_json::Value> = v
            .as_object()
            .expect("struct")
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let mut out = String::new();
        for (k, v) in map {
            let s = match v {
                serde_json::Value::String(s) => s,
                other => other.to_string(),
            };
            out.push_str(&format!("--{k} {s}\n"));
        }
        out
    }

    pub fn from_params(text: &str) -> Result<Self, clap::Error> {
        let mut flags = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once(' ').unwrap_or((line, ""));
            flags.push(k.to_string());
            flags.push(v.to_string());
        }
        Self::from_flags(&flags)
    }

    pub fn data_mode(&self) -> bool {
        self.operation == "data"
    }

    pub fn task(&self) -> Result<Option<TaskSpec>, CliError> {
        if self.data_mode() {
            return Ok(None);
        }
        let op: Operation = self.operation.parse().map_err(config)?;
        let mut t = TaskSpec::new(op);
        t.base = self.base;
        t.min_int = self.minint;
        t.max_int = self.maxint;
        t.modulo = self.modulo;
        t.dim1 = self.dim1;
        t.dim2 = self.dim2;
        t.max_class = self.max_class;
        t.validate().map_err(config)?;
        Ok(Some(t))
    }

    fn positional(&self, has: bool) -> Positional {
        match (has, self.sinusoidal_embeddings) {
            (false, _) => Positional::None,
            (true, true) => Positional::Sinusoidal,
            (true, false) => Positional::Learned,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig, CliError> {
        let mut c = ModelConfig::new(vocab_size);
        c.architecture = self.architecture.parse::<Architecture>().map_err(config)?;
        c.encoder = StackConfig {
            n_layers: self.n_enc_layers,
            emb_dim: self.enc_emb_dim,
            n_heads: self.n_enc_heads,
            n_hidden_layers: self.n_enc_hidden_layers,
            positional: self.positional(self.enc_has_pos_emb),
            loop_idx: self.enc_loop_idx,
            loops: self.enc_loops,
        };
        c.decoder = StackConfig {
            n_layers: self.n_dec_layers,
            emb_dim: self.dec_emb_dim,
            n_heads: self.n_dec_heads,
            n_hidden_layers: self.n_dec_hidden_layers,
            positional: self.positional(self.dec_has_pos_emb),
            loop_idx: self.dec_loop_idx,
            loops: self.dec_loops,
        };
        c.activation = if self.gelu_activation {
            Activation::Gelu
        } else {
            Activation::Relu
        };
        c.init = if self.xav_init {
            InitScheme::Xavier
        } else {
            InitScheme::KaimingUniform
        };
        c.dropout = self.dropout;
        c.attention_dropout = self.attention_dropout;
        c.share_inout_emb = self.share_inout_emb;
        c.max_positions = if self.max_positions > 0 {
            self.max_positions as usize
        } else {
            let longest = if self.max_len > 0 {
                self.max_len as usize
            } else {
                1024
            };
            longest.max(self.max_output_len) + 2
        };
        c.validate().map_err(config)?;
        Ok(c)
    }

    pub fn optimizer_config(&self) -> Result<OptimizerConfig, CliError> {
        parse_optimizer(&self.optimizer).map_err(config)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epoch_size: self.epoch_size,
            batch_size: self.batch_size,
            accumulate_gradients: self.accumulate_gradients,
            clip_grad_norm: self.clip_grad_norm,
            report_loss_every: self.report_loss_every,
            max_len: self.max_len,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            batch_size: self.batch_size_eval,
            beam_search: self.beam_search,
            beam_size: self.beam_size,
            max_output_len: self.max_output_len,
            export: ExportLevel::from_verbosity(self.eval_verbose),
            print_predictions: self.eval_verbose_print,
            export_pred: self.export_pred,
            max_class: self.max_class,
        }
    }

    /// Checks everything that can be checked before touching the disk.
    pub fn validate(&self) -> Result<(), CliError> {
        let task = self.task()?;
        self.model_config(16)?;
        self.optimizer_config()?;
        parse_stopping_criterion(&self.stopping_criterion).map_err(config)?;
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        if self.batch_size == 0 || self.accumulate_gradients == 0 || self.batch_size_eval == 0 {
            return bad("batch sizes and accumulate_gradients must be positive");
        }
        if self.epoch_size == 0 {
            return bad("epoch_size must be positive");
        }
        if self.max_output_len < 3 {
            return bad("max_output_len must be at least 3");
        }
        if self.beam_size == 0 {
            return bad("beam_size must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.attention_dropout) {
            return bad("dropout rates must lie in [0, 1)");
        }
        if self.deterministic && self.env_base_seed < 0 {
            return bad("--deterministic needs a nonnegative --env_base_seed");
        }
        if self.batch_load && self.two_classes {
            return bad("--batch_load and --two_classes are exclusive");
        }
        if self.two_classes && !(self.first_class_prob > 0.0 && self.first_class_prob < 1.0) {
            return bad("--first_class_prob must lie in (0, 1)");
        }
        let has_train_file = !self.train_data.is_empty();
        if task.is_none() && !has_train_file && !self.eval_only && self.eval_from_exp.is_empty() {
            return bad("--operation data needs --train_data");
        }
        if task.is_none() && self.export_data {
            return bad("--export_data needs a generated task");
        }
        if self.batch_load && self.reload_size == 0 {
            return bad("--reload_size must be nonzero");
        }
        if self.architecture == "encoder_only"
            && task.as_ref().is_some_and(|t| !t.outputs_fit_inputs())
        {
            return bad(
                "encoder_only needs every solution to fit within its problem; use encoder_decoder",
            );
        }
        Ok(())
    }

    fn generation_seed(&self) -> i64 {
        self.env_base_seed
    }
}

/// One finished epoch of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub exp_dir: PathBuf,
    pub exp_id: String,
    pub num_parameters: usize,
    /// Epochs run by this invocation (one evaluation-only record with
    /// `--eval_only`).
    pub epochs: Vec<EpochRecord>,
    /// Mean training loss of every epoch of the run, including resumed ones.
    pub epoch_losses: Vec<f64>,
    pub resumed: bool,
}

fn random_exp_id() -> String {
    Alphanumeric
        .sample_string(&mut rand::rng(), 10)
        .to_lowercase()
}

/// Runs `train` end to end.
pub fn cmd_train(input: &TrainArgs) -> Result<RunSummary, CliError> {
    input.validate()?;
    let mut args = input.clone();
    if args.exp_id.is_empty() {
        args.exp_id = random_exp_id();
    }
    let exp_dir = Path::new(&args.dump_path)
        .join(&args.exp_name)
        .join(&args.exp_id);
    fs::create_dir_all(&exp_dir).map_err(|e| runtime(format!("{}: {e}", exp_dir.display())))?;
    let params = args.params_text();
    fs::write(exp_dir.join("params.txt"), &params).map_err(runtime)?;
    let mut logger = Logger::new(Some(&exp_dir.join("train.log")), true).map_err(runtime)?;
    for (flag, set) in [
        ("--cpu", args.cpu),
        ("--fp16", args.fp16),
        ("--amp", args.amp >= 0),
        ("--local_rank", args.local_rank >= 0),
        ("--local_gpu", args.local_gpu != 0),
    ] {
        if set {
            logger.info(&format!(
                "{flag} has no effect: this build runs on the CPU only"
            ));
        }
    }
    logger.info("============ Initialized logger ============");
    logger.info(
        &params
            .lines()
            .map(|l| l.trim_start_matches("--").replacen(' ', ": ", 1))
            .collect::<Vec<_>>()
            .join("\n"),
    );
    logger.info(&format!(
        "The experiment will be stored in {}",
        exp_dir.display()
    ));
    if args.export_data {
        return export_data(&args, &exp_dir, &mut logger);
    }
    let result = match args.dtype.parse::<DType>().map_err(config)? {
        DType::F64 => run::<f64>(&args, &exp_dir, &params, &mut logger),
        DType::F32 => run::<f32>(&args, &exp_dir, &params, &mut logger),
    };
    if let Err(e) = &result {
        logger.info(&format!("ERROR: {e}"));
    }
    logger.flush();
    result
}

fn export_data(
    args: &TrainArgs,
    exp_dir: &Path,
    logger: &mut Logger,
) -> Result<RunSummary, CliError> {
    let task = args.task()?.expect("validated");
    let path = exp_dir.join("data.prefix");
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(runtime)?;
    let mut out = BufWriter::new(file);
    let mut data = if args.num_workers > 1 && !args.deterministic {
        TrainData::Workers(WorkerPool::spawn(
            &task,
            args.num_workers,
            args.generation_seed(),
            1024,
        ))
    } else {
        TrainData::generated(task, args.generation_seed())
    };
    let mut total = 0usize;
    for epoch in 0..args.max_epoch {
        let mut written = 0;
        while written < args.epoch_size {
            let ex = data.next_example().map_err(runtime)?;
            if ex.fits(args.max_len) {
                out.write_all(write_example(&ex.input, &ex.output).as_bytes())
                    .map_err(runtime)?;
                written += 1;
            }
        }
        out.flush().map_err(runtime)?;
        total += written;
        logger.info(&format!(
            "Epoch {epoch}: exported {written} examples to {} ({total} total)",
            path.display()
        ));
    }
    Ok(RunSummary {
        exp_dir: exp_dir.to_owned(),
        exp_id: args.exp_id.clone(),
        num_parameters: 0,
        epochs: Vec::new(),
        epoch_losses: Vec::new(),
        resumed: false,
    })
}

fn scan_tokens(path: &Path, into: &mut BTreeSet<String>) -> Result<(), CliError> {
    let f = File::open(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    for line in BufReader::new(f).lines() {
        let line = line.map_err(runtime)?;
        into.extend(
            line.split(['\t', ' '])
                .filter(|t| !t.is_empty())
                .map(str::to_string),
        );
    }
    Ok(())
}

/// The task vocabulary (or the base-`B` default one in data mode), plus any
/// further tokens found in the corpus files, in sorted order.
fn vocabulary(
    args: &TrainArgs,
    task: Option<&TaskSpec>,
    loaded: &[&ExampleSet],
    streamed: Option<&Path>,
) -> Result<(Vocabulary, usize), CliError> {
    let base = match task {
        Some(t) => t.vocabulary(),
        None => {
            let mut t = TaskSpec::new(Operation::Gcd);
            t.base = args.base;
            t.vocabulary()
        }
    };
    let mut seen = BTreeSet::new();
    for s in loaded {
        for ex in &s.examples {
            seen.extend(ex.input.tokens().iter().chain(ex.output.tokens()).cloned());
        }
    }
    if let Some(p) = streamed {
        scan_tokens(p, &mut seen)?;
    }
    let extra: Vec<String> = seen.into_iter().filter(|t| !base.contains(t)).collect();
    let n = extra.len();
    Ok((
        Vocabulary::from_tokens(base.tokens().iter().cloned().chain(extra)),
        n,
    ))
}

fn load_file(
    path: &str,
    limit: i64,
    max_len: i64,
    logger: &mut Logger,
) -> Result<ExampleSet, CliError> {
    let r = read_examples(Path::new(path), limit, max_len).map_err(runtime)?;
    logger.info(&format!(
        "Loaded {} examples from {path} ({} malformed and {} over-long lines skipped)",
        r.set.len(),
        r.malformed.len(),
        r.too_long
    ));
    for (line, reason) in r.malformed.iter().take(5) {
        logger.info(&format!("  line {line}: {reason}"));
    }
    if r.set.is_empty() {
        return Err(runtime(format!("{path} contains no usable examples")));
    }
    Ok(r.set)
}

/// `n` freshly generated examples that fit `max_len`.
pub fn generate_eval_set(
    task: &TaskSpec,
    n: usize,
    rng: &mut RngStream,
    max_len: i64,
) -> Result<ExampleSet, CliError> {
    let mut examples = Vec::with_capacity(n);
    let mut rejected = 0usize;
    while examples.len() < n {
        let ex = generate_example(task, rng, Split::Valid).map_err(runtime)?;
        if ex.fits(max_len) {
            examples.push(ex);
        } else {
            rejected += 1;
            if rejected > 100 * n.max(100) {
                return Err(runtime("generated examples almost never fit --max_len"));
            }
        }
    }
    Ok(ExampleSet {
        examples,
        source: Source::Generated(task.operation.name().to_string()),
    })
}

/// Path of the model `--eval_from_exp` should load.
fn eval_from_exp_path(args: &TrainArgs) -> PathBuf {
    let dir = Path::new(&args.eval_from_exp);
    parse_validation_metrics(&args.validation_metrics)
        .iter()
        .map(|t| dir.join(format!("best-{}", t.label())))
        .find(|p| p.exists())
        .unwrap_or_else(|| dir.join("checkpoint"))
}

fn check_vocabulary(ckpt: &Checkpoint, vocab: &Vocabulary, path: &Path) -> Result<(), CliError> {
    if ckpt.vocabulary != vocab.tokens() {
        return Err(runtime(format!(
            "{}: checkpoint vocabulary differs from this run's",
            path.display()
        )));
    }
    Ok(())
}

struct EvalSets {
    prefixes: Vec<String>,
    files: Vec<ExampleSet>,
}

fn evaluate_all<T: Scalar>(
    args: &TrainArgs,
    trainer: &mut Trainer<T>,
    task: Option<&TaskSpec>,
    sets: &EvalSets,
    epoch: usize,
    exp_dir: &Path,
    logger: &mut Logger,
) -> Result<BTreeMap<String, f64>, CliError> {
    let cfg = args.eval_config();
    let mut metrics = BTreeMap::new();
    for (i, prefix) in sets.prefixes.iter().enumerate() {
        let generated;
        let set = match sets.files.get(i) {
            Some(s) => s,
            None => {
                let t = task.expect("generated evaluation needs a task");
                let mut rng =
                    RngStream::purpose(args.env_base_seed, streams::EVAL + i as u64, epoch as u64);
                generated = generate_eval_set(t, args.eval_size, &mut rng, args.max_len)?;
                &generated
            }
        };
        logger.info(&format!(
            "====== Evaluating {prefix} set ({} examples) ======",
            set.len()
        ));
        let mut file = if cfg.export != ExportLevel::Off {
            let p = exp_dir.join(format!("eval.{prefix}.{epoch}"));
            Some(BufWriter::new(
                File::create(&p).map_err(|e| runtime(format!("{}: {e}", p.display())))?,
            ))
        } else {
            None
        };
        let sink = file.as_mut().map(|f| f as &mut dyn PredictionSink);
        let vocab = trainer.vocab.clone();
        let report = evaluate_dataset(
            &mut trainer.model,
            set,
            prefix,
            &vocab,
            task,
            &cfg,
            &mut |l| logger.info(l),
            sink,
        )
        .map_err(runtime)?;
        if let Some(mut f) = file {
            f.flush().map_err(runtime)?;
        }
        if cfg.export_pred {
            let p = exp_dir.join(format!("pred_hist.{prefix}.{epoch}.csv"));
            fs::write(&p, report.histogram.to_csv(cfg.max_class)).map_err(runtime)?;
        }
        metrics.extend(report.metrics());
    }
    Ok(metrics)
}

fn run<T: Scalar>(
    args: &TrainArgs,
    exp_dir: &Path,
    params: &str,
    logger: &mut Logger,
) -> Result<RunSummary, CliError> {
    let task = args.task()?;
    let seed = args.env_base_seed;
    let training = !(args.eval_only || !args.eval_from_exp.is_empty());

    // Files first: they can extend the vocabulary.
    let streamed = (training && args.batch_load && !args.train_data.is_empty())
        .then(|| Path::new(&args.train_data));
    let train_set = if training && !args.batch_load && !args.train_data.is_empty() {
        Some(load_file(
            &args.train_data,
            args.reload_data_size,
            args.max_len,
            logger,
        )?)
    } else {
        None
    };
    let eval_paths: Vec<&str> = args
        .eval_data
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    let mut files = Vec::new();
    for p in &eval_paths {
        files.push(load_file(p, args.eval_data_size, args.max_len, logger)?);
    }
    let n_sets = if eval_paths.is_empty() {
        usize::from(task.is_some())
    } else {
        eval_paths.len()
    };
    let sets = EvalSets {
        prefixes: eval_prefixes(n_sets),
        files,
    };
    let loaded: Vec<&ExampleSet> = train_set.iter().chain(sets.files.iter()).collect();
    let (vocab, extra) = vocabulary(args, task.as_ref(), &loaded, streamed)?;
    if extra > 0 {
        logger.info(&format!(
            "{extra} corpus tokens were added to the default vocabulary"
        ));
    }
    logger.info(&format!(
        "Vocabulary ({} tokens): {}",
        vocab.len(),
        vocab.tokens().join(" ")
    ));

    let mc = args.model_config(vocab.len())?;
    let mut init_rng = RngStream::purpose(seed, streams::MODEL_INIT, 0);
    let mut model = Transformer::<T>::new(mc, &mut init_rng).map_err(config)?;
    logger.info(&format!("Number of parameters: {}", model.num_parameters()));

    let reload_model = if !args.eval_from_exp.is_empty() {
        Some(eval_from_exp_path(args))
    } else if !args.reload_model.is_empty() {
        Some(PathBuf::from(&args.reload_model))
    } else {
        None
    };
    if let Some(p) = &reload_model {
        logger.info(&format!("Reloading model from {}", p.display()));
        let ckpt = Checkpoint::load(p).map_err(runtime)?;
        check_vocabulary(&ckpt, &vocab, p)?;
        load_parameters(&mut model, &ckpt).map_err(runtime)?;
    }
    let num_parameters = model.num_parameters();
    let mut trainer = Trainer::new(
        model,
        args.optimizer_config()?,
        args.train_config(),
        vocab,
        seed,
    );
    trainer.state.best = parse_validation_metrics(&args.validation_metrics);
    trainer.state.stopping = parse_stopping_criterion(&args.stopping_criterion).map_err(config)?;

    let mut summary = RunSummary {
        exp_dir: exp_dir.to_owned(),
        exp_id: args.exp_id.clone(),
        num_parameters,
        epochs: Vec::new(),
        epoch_losses: Vec::new(),
        resumed: false,
    };

    if !training {
        let epoch = 0;
        let metrics = evaluate_all(
            args,
            &mut trainer,
            task.as_ref(),
            &sets,
            epoch,
            exp_dir,
            logger,
        )?;
        logger.info(&metrics_line(epoch, &metrics));
        summary.epochs.push(EpochRecord {
            epoch,
            mean_loss: f64::NAN,
            metrics,
        });
        return Ok(summary);
    }

    let mut data = if let Some(set) = train_set {
        let sc = if args.two_classes {
            SamplerConfig {
                mode: SamplerMode::TwoClass,
                first_class_size: args.first_class_size,
                first_class_prob: args.first_class_prob,
            }
        } else {
            SamplerConfig::uniform()
        };
        let sampler = Sampler::new(sc, set.len()).map_err(config)?;
        TrainData::memory(set, sampler, seed)
    } else if let Some(p) = streamed {
        let chunk = if args.reload_size < 0 {
            usize::MAX / 2
        } else {
            args.reload_size as usize
        };
        TrainData::chunked(p, chunk, args.max_len).map_err(runtime)?
    } else {
        let t = task
            .clone()
            .expect("validated: generated data needs a task");
        if args.num_workers > 1 && !args.deterministic {
            let cap = 4 * args.batch_size * args.accumulate_gradients;
            TrainData::Workers(WorkerPool::spawn(&t, args.num_workers, seed, cap))
        } else {
            TrainData::generated(t, seed)
        }
    };

    let resume_from = if !args.reload_checkpoint.is_empty() {
        Some(PathBuf::from(&args.reload_checkpoint))
    } else {
        Some(exp_dir.join("checkpoint")).filter(|p| p.exists())
    };
    if let Some(p) = &resume_from {
        logger.info(&format!("Reloading checkpoint from {}", p.display()));
        let ckpt = Checkpoint::load(p).map_err(runtime)?;
        check_vocabulary(&ckpt, &trainer.vocab, p)?;
        trainer.restore(&ckpt, Some(&mut data)).map_err(runtime)?;
        // Flags may change between runs; trackers keep their history.
        let fresh_best = parse_validation_metrics(&args.validation_metrics);
        let old = std::mem::take(&mut trainer.state.best);
        trainer.state.best = fresh_best
            .into_iter()
            .map(|t| {
                old.iter()
                    .find(|o| o.label() == t.label())
                    .cloned()
                    .unwrap_or(t)
            })
            .collect();
        let fresh_stop = parse_stopping_criterion(&args.stopping_criterion).map_err(config)?;
        trainer.state.stopping = match (fresh_stop, trainer.state.stopping.take()) {
            (Some(f), Some(o)) if f.label() == o.label() => Some(MetricTracker {
                patience: f.patience,
                ..o
            }),
            (f, _) => f,
        };
        summary.resumed = true;
        logger.info(&format!(
            "Resuming at epoch {} (step {})",
            trainer.state.epoch, trainer.state.step
        ));
    }

    while trainer.state.epoch < args.max_epoch {
        let epoch = trainer.state.epoch;
        logger.info(&format!(
            "============ Starting epoch {epoch} ... ============"
        ));
        let stats = trainer.train_epoch(&mut data, logger).map_err(runtime)?;
        logger.info(&format!(
            "============ End of epoch {epoch} ({} steps, {:.1}s, mean loss {:.4}) ============",
            stats.steps, stats.seconds, stats.mean_loss
        ));
        let metrics = evaluate_all(
            args,
            &mut trainer,
            task.as_ref(),
            &sets,
            epoch,
            exp_dir,
            logger,
        )?;
        logger.info(&metrics_line(epoch, &metrics));
        let (improved, decision) = trainer
            .state
            .update(&metrics, args.max_epoch)
            .map_err(config)?;
        let ckpt = trainer.checkpoint(params, Some(&data));
        for label in &improved {
            let name = label.trim_start_matches('_');
            logger.info(&format!("New best value for {name}: {}", metrics[name]));
            ckpt.save(&exp_dir.join(format!("best-{label}")))
                .map_err(runtime)?;
        }
        ckpt.save(&exp_dir.join("checkpoint")).map_err(runtime)?;
        if args.save_periodic > 0 && trainer.state.epoch % args.save_periodic == 0 {
            ckpt.save(&exp_dir.join(format!("checkpoint-{}", trainer.state.epoch)))
                .map_err(runtime)?;
        }
        logger.flush();
        summary.epochs.push(EpochRecord {
            epoch,
            mean_loss: stats.mean_loss,
            metrics,
        });
        if decision == StopDecision::Stop {
            if trainer.state.epoch < args.max_epoch {
                logger.info("Stopping criterion reached: stopping the experiment");
            }
            break;
        }
    }
    summary.epoch_losses = trainer.state.epoch_losses.clone();
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_flags_parse() {
        let a = TrainArgs::from_flags(&[
            "--dump_path",
            "/tmp/x/",
            "--exp_name",
            "my_first_experiment",
            "--exp_id",
            "1",
            "--operation",
            "gcd",
            "--cpu",
            "true",
            "--env_base_seed",
            "-1",
            "--modulus",
            "13",
            "--max_epochs",
            "3",
            "--n_enc_hidden_layer",
            "2",
            "--local_rank",
            "0",
            "--amp",
            "1",
        ])
        .unwrap();
        assert_eq!(a.modulo, 13);
        assert_eq!(a.max_epoch, 3);
        assert_eq!(a.n_enc_hidden_layers, 2);
        assert!(a.cpu);
        assert!(TrainArgs::from_flags(&["--frobnicate", "1"]).is_err());
    }

    #[test]
    fn defaults() {
        let a = TrainArgs::default();
        assert_eq!(a.epoch_size, 300_000);
        assert_eq!(a.batch_size, 32);
        assert_eq!(a.max_epoch, 100_000);
        assert_eq!(a.eval_size, 10_000);
        assert_eq!(a.batch_size_eval, 128);
        assert_eq!(a.report_loss_every, 200);
        assert_eq!(a.optimizer_config().unwrap().lr, 1e-4);
        assert!(a.validate().is_ok());
    }

    #[test]
    fn params_text_round_trips() {
        let a = TrainArgs::from_flags(&[
            "--exp_id",
            "abc",
            "--minint",
            "-5",
            "--dropout",
            "0.05",
            "--train_data",
            "",
        ])
        .unwrap();
        let text = a.params_text();
        assert!(text.lines().any(|l| l == "--minint -5"));
        let keys: Vec<&str> = text.lines().map(|l| l.split(' ').next().unwrap()).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert_eq!(TrainArgs::from_params(&text).unwrap(), a);
    }

    #[test]
    fn inter_flag_constraints() {
        let bad = |f: &[&str]| {
            matches!(
                TrainArgs::from_flags(f).unwrap().validate(),
                Err(CliError::Config(_))
            )
        };
        assert!(bad(&["--enc_emb_dim", "30", "--n_enc_heads", "4"]));
        assert!(bad(&["--optimizer", "frobnicate,lr=1"]));
        assert!(bad(&["--operation", "nope"]));
        assert!(bad(&["--operation", "data"]));
        assert!(bad(&["--stopping_criterion", "valid_arithmetic_acc"]));
        assert!(bad(&["--deterministic", "true"]));
        assert!(bad(&["--two_classes", "true", "--first_class_prob", "1.5"]));
        assert!(!bad(&[
            "--architecture",
            "encoder_only",
            "--operation",
            "gcd"
        ]));
        for op in crate::generators::Operation::ALL {
            let flags = ["--architecture", "encoder_only", "--operation", op.name()];
            let task = TrainArgs::from_flags(&flags)
                .unwrap()
                .task()
                .unwrap()
                .unwrap();
            assert_eq!(bad(&flags), !task.outputs_fit_inputs(), "{}", op.name());
        }
    }

    #[test]
    fn exp_ids_are_ten_alphanumerics() {
        let id = random_exp_id();
        assert_eq!(id.len(), 10);
        assert!(id.chars().all(|c| c.is_ascii_alphanumeric()));
    }
}
