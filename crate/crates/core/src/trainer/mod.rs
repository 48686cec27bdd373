//! The optimization loop: training data sources, epochs, stopping and
//! checkpoint state.

pub mod checkpoint;
pub mod log;
pub mod optim;

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{make_batch, Batch, ChunkedReader, DataError, Example, ExampleSet, Sampler};
use crate::generators::{RngState, RngStream, Split, TaskSpec};
use crate::model::{ModelError, Transformer};
use crate::scalar::Scalar;
use crate::tokenizer::{TokenError, Vocabulary};

use checkpoint::{Checkpoint, CheckpointError, NamedArray};
use log::Logger;
use optim::{clip_gradients, Optimizer, OptimizerConfig, ParseError};

/// Reserved random stream purposes.
pub mod streams {
    pub const MODEL_INIT: u64 = 1;
    pub const DROPOUT: u64 = 2;
    pub const SAMPLER: u64 = 3;
    /// Evaluation set `i` uses `EVAL + i`.
    pub const EVAL: u64 = 16;
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("data worker failed: {0}")]
    Worker(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epoch_size: usize,
    pub batch_size: usize,
    pub accumulate_gradients: usize,
    /// Non-positive disables clipping.
    pub clip_grad_norm: f64,
    pub report_loss_every: u64,
    /// Non-positive disables the length filter.
    pub max_len: i64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epoch_size: 300_000,
            batch_size: 32,
            accumulate_gradients: 1,
            clip_grad_norm: 0.0,
            report_loss_every: 200,
            max_len: 512,
        }
    }
}

impl TrainConfig {
    /// Optimizer updates per epoch: full accumulation windows covering
    /// `epoch_size` examples.
    pub fn steps_per_epoch(&self) -> u64 {
        let window = (self.batch_size * self.accumulate_gradients).max(1);
        self.epoch_size.div_ceil(window) as u64
    }
}

/// Tracks one metric for best-model saves or early stopping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTracker {
    pub metric: String,
    pub lower_is_better: bool,
    pub patience: Option<usize>,
    pub best: Option<f64>,
    pub epochs_since_improvement: usize,
}

impl MetricTracker {
    /// `name` may carry a leading `_` for lower-is-better metrics.
    pub fn new(name: &str, patience: Option<usize>) -> Self {
        let (metric, lower) = match name.strip_prefix('_') {
            Some(m) => (m.to_string(), true),
            None => (name.to_string(), false),
        };
        Self {
            metric,
            lower_is_better: lower,
            patience,
            best: None,
            epochs_since_improvement: 0,
        }
    }

    /// The name as written on the command line.
    pub fn label(&self) -> String {
        if self.lower_is_better {
            format!("_{}", self.metric)
        } else {
            self.metric.clone()
        }
    }

    /// Records this epoch's value; true when it is a new best.
    pub fn observe(&mut self, metrics: &BTreeMap<String, f64>) -> Result<bool, ParseError> {
        let v = *metrics.get(&self.metric).ok_or_else(|| ParseError {
            spec: self.label(),
            reason: format!(
                "unknown metric (available: {})",
                metrics.keys().cloned().collect::<Vec<_>>().join(", ")
            ),
        })?;
        let better = match self.best {
            None => true,
            Some(b) if self.lower_is_better => v < b,
            Some(b) => v > b,
        };
        if better {
            self.best = Some(v);
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
        }
        Ok(better)
    }

    pub fn exhausted(&self) -> bool {
        self.patience
            .is_some_and(|p| self.epochs_since_improvement >= p)
    }
}

/// `"valid_arithmetic_acc,100"`; empty means no criterion.
pub fn parse_stopping_criterion(spec: &str) -> Result<Option<MetricTracker>, ParseError> {
    let spec = spec.trim();
    if spec.is_empty() {
        return Ok(None);
    }
    let err = |reason: &str| ParseError {
        spec: spec.to_string(),
        reason: reason.to_string(),
    };
    let (name, patience) = spec
        .split_once(',')
        .ok_or_else(|| err("expected metric,patience"))?;
    let patience: usize = patience
        .trim()
        .parse()
        .map_err(|_| err("patience must be a non-negative integer"))?;
    if name.trim().trim_start_matches('_').is_empty() {
        return Err(err("empty metric name"));
    }
    Ok(Some(MetricTracker::new(name.trim(), Some(patience))))
}

/// Comma-separated metric names for best-model saves.
pub fn parse_validation_metrics(spec: &str) -> Vec<MetricTracker> {
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| MetricTracker::new(s, None))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Counters and trackers carried across epochs and checkpoints.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer updates performed.
    pub step: u64,
    pub examples: u64,
    pub words: u64,
    pub skipped: u64,
    /// Mean training loss of every completed epoch.
    pub epoch_losses: Vec<f64>,
    pub best: Vec<MetricTracker>,
    pub stopping: Option<MetricTracker>,
}

impl TrainerState {
    /// Feeds one epoch's metrics to the trackers. Returns the labels of the
    /// best-metric trackers that improved and whether to stop.
    pub fn update(
        &mut self,
        metrics: &BTreeMap<String, f64>,
        max_epoch: usize,
    ) -> Result<(Vec<String>, StopDecision), ParseError> {
        let mut improved = Vec::new();
        for t in &mut self.best {
            if t.observe(metrics)? {
                improved.push(t.label());
            }
        }
        let mut stop = self.epoch >= max_epoch;
        if let Some(t) = &mut self.stopping {
            t.observe(metrics)?;
            stop |= t.exhausted();
        }
        Ok((
            improved,
            if stop {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            },
        ))
    }
}

/// Background generators feeding a bounded queue.
pub struct WorkerPool {
    rx: Option<crossbeam_channel::Receiver<Result<Example, String>>>,
    handles: Vec<JoinHandle<()>>,
    stop: Arc<AtomicBool>,
}

impl WorkerPool {
    pub fn spawn(task: &TaskSpec, workers: usize, base_seed: i64, capacity: usize) -> Self {
        let (tx, rx) = crossbeam_channel::bounded(capacity.max(1));
        let stop = Arc::new(AtomicBool::new(false));
        let handles = (0..workers.max(1))
            .map(|w| {
                let (tx, task, stop) = (tx.clone(), task.clone(), stop.clone());
                std::thread::spawn(move || {
                    let mut rng = RngStream::new(base_seed, w as u64, 0);
                    while !stop.load(Ordering::Relaxed) {
                        let ex = crate::dataset::generate_example(&task, &mut rng, Split::Train);
                        if tx.send(ex.map_err(|e| e.to_string())).is_err() {
                            break;
                        }
                    }
                })
            })
            .collect();
        Self {
            rx: Some(rx),
            handles,
            stop,
        }
    }

    fn recv(&self) -> Result<Example, TrainError> {
        let rx = self.rx.as_ref().expect("pool is live");
        rx.recv()
            .map_err(|_| TrainError::Worker("all workers exited".into()))?
            .map_err(TrainError::Worker)
    }
}

impl Drop for WorkerPool {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        // Dropping the receiver unblocks senders waiting on a full queue.
        self.rx = None;
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

/// Where training examples come from.
pub enum TrainData {
    /// Generated on the calling thread; reproducible and resumable.
    Generated { task: TaskSpec, rng: RngStream },
    /// Generated by background workers; throughput over reproducibility.
    Workers(WorkerPool),
    /// A file loaded in memory, sampled uniformly or with two classes.
    Memory {
        set: ExampleSet,
        sampler: Sampler,
        rng: RngStream,
    },
    /// A file streamed in order, `reload_size` examples at a time.
    Chunked {
        reader: ChunkedReader,
        buffer: VecDeque<Example>,
        chunk_start: u64,
        consumed: usize,
    },
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct DataState {
    rng: Option<RngState>,
    cursor: Option<usize>,
    chunk_start: Option<u64>,
    consumed: Option<usize>,
}

impl TrainData {
    pub fn generated(task: TaskSpec, base_seed: i64) -> Self {
        TrainData::Generated {
            task,
            rng: RngStream::new(base_seed, 0, 0),
        }
    }

    pub fn memory(set: ExampleSet, sampler: Sampler, base_seed: i64) -> Self {
        TrainData::Memory {
            set,
            sampler,
            rng: RngStream::purpose(base_seed, streams::SAMPLER, 0),
        }
    }

    pub fn chunked(path: &Path, reload_size: usize, max_len: i64) -> Result<Self, DataError> {
        let reader = ChunkedReader::open(path, reload_size, max_len)?;
        Ok(TrainData::Chunked {
            reader,
            buffer: VecDeque::new(),
            chunk_start: 0,
            consumed: 0,
        })
    }

    pub fn next_example(&mut self) -> Result<Example, TrainError> {
        match self {
            TrainData::Generated { task, rng } => {
                Ok(crate::dataset::generate_example(task, rng, Split::Train)?)
            }
            TrainData::Workers(pool) => pool.recv(),
            TrainData::Memory { set, sampler, rng } => {
                let i = sampler.next_index(set.len(), rng);
                Ok(set.examples[i].clone())
            }
            TrainData::Chunked {
                reader,
                buffer,
                chunk_start,
                consumed,
            } => {
                if buffer.is_empty() {
                    *chunk_start = reader.position()?;
                    *consumed = 0;
                    buffer.extend(reader.next_chunk()?);
                }
                *consumed += 1;
                Ok(buffer
                    .pop_front()
                    .expect("next_chunk never returns an empty chunk"))
            }
        }
    }

    /// Resumable position, or `Null` for worker pools.
    pub fn state(&self) -> serde_json::Value {
        let s = match self {
            TrainData::Generated { rng, .. } => DataState {
                rng: Some(rng.state()),
                ..Default::default()
            },
            TrainData::Workers(_) => return serde_json::Value::Null,
            TrainData::Memory { sampler, rng, .. } => DataState {
                rng: Some(rng.state()),
                cursor: Some(sampler.cursor()),
                ..Default::default()
            },
            TrainData::Chunked {
                buffer,
                chunk_start,
                consumed,
                ..
            } => DataState {
                chunk_start: Some(*chunk_start),
                consumed: Some(if buffer.is_empty() { 0 } else { *consumed }),
                ..Default::default()
            },
        };
        serde_json::to_value(s).expect("data state serializes")
    }

    pub fn restore(&mut self, v: &serde_json::Value) -> Result<(), TrainError> {
        if v.is_null() {
            return Ok(());
        }
        let s: DataState = serde_json::from_value(v.clone())
            .map_err(|e| CheckpointError::Incompatible(format!("data state: {e}")))?;
        match self {
            TrainData::Generated { rng, .. } => {
                if let Some(r) = &s.rng {
                    *rng = RngStream::from_state(r);
                }
            }
            TrainData::Workers(_) => {}
            TrainData::Memory { sampler, rng, .. } => {
                if let Some(r) = &s.rng {
                    *rng = RngStream::from_state(r);
                }
                if let Some(c) = s.cursor {
                    sampler.set_cursor(c);
                }
            }
            TrainData::Chunked {
                reader,
                buffer,
                chunk_start,
                consumed,
            } => {
                let start = s.chunk_start.unwrap_or(0);
                let used = s.consumed.unwrap_or(0);
                reader.seek(start)?;
                buffer.clear();
                *chunk_start = start;
                *consumed = 0;
                if used > 0 {
                    buffer.extend(reader.next_chunk()?);
                    for _ in 0..used.min(buffer.len()) {
                        buffer.pop_front();
                    }
                    *consumed = used;
                }
            }
        }
        Ok(())
    }
}

/// Summary of one training epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub steps: u64,
    pub examples: u64,
    pub mean_loss: f64,
    pub seconds: f64,
}

/// Owns the model and optimizer and runs epochs.
pub struct Trainer<T: Scalar> {
    pub model: Transformer<T>,
    pub optimizer: Optimizer<T>,
    pub config: TrainConfig,
    pub state: TrainerState,
    pub vocab: Vocabulary,
    dropout_rng: RngStream,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(
        model: Transformer<T>,
        optimizer: OptimizerConfig,
        config: TrainConfig,
        vocab: Vocabulary,
        base_seed: i64,
    ) -> Self {
        let optimizer = Optimizer::new(optimizer, &model.params);
        Self {
            model,
            optimizer,
            config,
            state: TrainerState::default(),
            vocab,
            dropout_rng: RngStream::purpose(base_seed, streams::DROPOUT, 0),
        }
    }

    fn uses_dropout(&self) -> bool {
        let c = self.model.config();
        c.dropout > 0.0 || c.attention_dropout > 0.0
    }

    fn next_window(&mut self, data: &mut TrainData) -> Result<Vec<Example>, TrainError> {
        let n = self.config.batch_size * self.config.accumulate_gradients;
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let ex = data.next_example()?;
            if ex.fits(self.config.max_len) {
                out.push(ex);
            } else {
                self.state.skipped += 1;
            }
        }
        Ok(out)
    }

    /// One optimizer update over `accumulate_gradients` batches. Returns the
    /// window's mean token loss and its word count.
    pub fn train_step(&mut self, data: &mut TrainData) -> Result<(f64, usize), TrainError> {
        let window = self.next_window(data)?;
        let batches: Vec<Batch> = window
            .chunks(self.config.batch_size)
            .map(|c| make_batch(c, &self.vocab))
            .collect::<Result<_, _>>()?;
        let tokens: usize = batches.iter().map(Batch::target_tokens).sum();
        let scale = T::lit(1.0 / tokens.max(1) as f64);
        let mut stats = crate::model::LossStats::default();
        let dropout = self.uses_dropout();
        for b in &batches {
            let rng = if dropout {
                Some(&mut self.dropout_rng)
            } else {
                None
            };
            stats.add(self.model.accumulate_gradients(b, scale, rng)?);
        }
        self.model.finish_gradients();
        if self.config.clip_grad_norm > 0.0 {
            clip_gradients(&mut self.model.params, self.config.clip_grad_norm);
        }
        self.optimizer.update(&mut self.model.params);
        let words: usize = batches.iter().map(Batch::word_count).sum();
        self.state.step += 1;
        self.state.examples += window.len() as u64;
        self.state.words += words as u64;
        Ok((stats.mean(), words))
    }

    /// Runs one epoch, logging every `report_loss_every` updates.
    pub fn train_epoch(
        &mut self,
        data: &mut TrainData,
        logger: &mut Logger,
    ) -> Result<EpochStats, TrainError> {
        let steps = self.config.steps_per_epoch();
        let start = Instant::now();
        let mut last = Instant::now();
        let (mut rep_loss, mut rep_n, mut rep_ex, mut rep_words) = (0.0, 0u64, 0usize, 0usize);
        let mut epoch_loss = 0.0;
        self.model.zero_grads();
        for _ in 0..steps {
            let lr = self.optimizer.next_lr();
            let (loss, words) = self.train_step(data)?;
            epoch_loss += loss;
            rep_loss += loss;
            rep_n += 1;
            rep_ex += self.config.batch_size * self.config.accumulate_gradients;
            rep_words += words;
            let every = self.config.report_loss_every.max(1);
            if self.state.step % every == 0 {
                let dt = last.elapsed().as_secs_f64().max(1e-9);
                logger.info(&log::step_line(
                    self.state.step,
                    rep_ex as f64 / dt,
                    rep_words as f64 / dt,
                    rep_loss / rep_n as f64,
                    lr,
                ));
                (rep_loss, rep_n, rep_ex, rep_words) = (0.0, 0, 0, 0);
                last = Instant::now();
            }
        }
        let mean_loss = if steps == 0 {
            0.0
        } else {
            epoch_loss / steps as f64
        };
        self.state.epoch_losses.push(mean_loss);
        self.state.epoch += 1;
        let window = (self.config.batch_size * self.config.accumulate_gradients) as u64;
        Ok(EpochStats {
            steps,
            examples: steps * window,
            mean_loss,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Everything needed to continue this run.
    pub fn checkpoint(&self, run_config: &str, data: Option<&TrainData>) -> Checkpoint {
        let p = &self.model.params;
        let mut arrays = Vec::new();
        for (i, meta) in p.metas().iter().enumerate() {
            arrays.push(NamedArray::from_values(
                format!("param/{}", meta.name),
                &meta.shape,
                &p.values[i],
            ));
        }
        for (i, m) in self.optimizer.m.iter().enumerate() {
            arrays.push(NamedArray::from_values(
                format!("opt_m/{}", p.metas()[i].name),
                &[m.len()],
                m,
            ));
        }
        for (i, v) in self.optimizer.v.iter().enumerate() {
            arrays.push(NamedArray::from_values(
                format!("opt_v/{}", p.metas()[i].name),
                &[v.len()],
                v,
            ));
        }
        let state = serde_json::json!({
            "trainer": self.state,
            "optimizer_step": self.optimizer.step,
            "dropout_rng": self.dropout_rng.state(),
            "data": data.map_or(serde_json::Value::Null, TrainData::state),
        });
        Checkpoint {
            run_config: run_config.to_string(),
            vocabulary: self.vocab.tokens().to_vec(),
            state,
            arrays,
        }
    }

    /// Restores parameters, optimizer moments, counters and (if given) the
    /// data position.
    pub fn restore(
        &mut self,
        ckpt: &Checkpoint,
        data: Option<&mut TrainData>,
    ) -> Result<(), TrainError> {
        load_parameters(&mut self.model, ckpt)?;
        let names: Vec<String> = self
            .model
            .params
            .metas()
            .iter()
            .map(|m| m.name.clone())
            .collect();
        let load_moments =
            |prefix: &str, target: &mut Vec<Vec<T>>| -> Result<(), CheckpointError> {
                for (i, name) in names.iter().enumerate() {
                    if i >= target.len() {
                        break;
                    }
                    let a = ckpt.array(&format!("{prefix}/{name}")).ok_or_else(|| {
                        CheckpointError::Incompatible(format!("missing optimizer state for {name}"))
                    })?;
                    if a.numel() != target[i].len() {
                        return Err(CheckpointError::Incompatible(format!(
                            "optimizer state shape for {name}"
                        )));
                    }
                    target[i] = a.values();
                }
                Ok(())
            };
        load_moments("opt_m", &mut self.optimizer.m)?;
        load_moments("opt_v", &mut self.optimizer.v)?;
        let bad = |what: &str, e: serde_json::Error| {
            CheckpointError::Incompatible(format!("{what}: {e}"))
        };
        let st = &ckpt.state;
        self.state =
            serde_json::from_value(st["trainer"].clone()).map_err(|e| bad("trainer state", e))?;
        self.optimizer.step = st["optimizer_step"].as_u64().unwrap_or(self.state.step);
        if !st["dropout_rng"].is_null() {
            let r: RngState = serde_json::from_value(st["dropout_rng"].clone())
                .map_err(|e| bad("dropout rng", e))?;
            self.dropout_rng = RngStream::from_state(&r);
        }
        if let Some(d) = data {
            d.restore(&st["data"])?;
        }
        Ok(())
    }
}

/// Copies the `param/*` arrays of a checkpoint into a model of the same
/// shape, converting precision if needed.
pub fn load_parameters<T: Scalar>(
    model: &mut Transformer<T>,
    ckpt: &Checkpoint,
) -> Result<(), CheckpointError> {
    let metas: Vec<(String, Vec<usize>)> = model
        .params
        .metas()
        .iter()
        .map(|m| (m.name.clone(), m.shape.clone()))
        .collect();
    for (i, (name, shape)) in metas.iter().enumerate() {
        let a = ckpt
            .array(&format!("param/{name}"))
            .ok_or_else(|| CheckpointError::Incompatible(format!("missing parameter {name}")))?;
        if &a.shape != shape {
            return Err(CheckpointError::Incompatible(format!(
                "parameter {name} has shape {:?}, model expects {shape:?}",
                a.shape
            )));
        }
        model.params.values[i] = a.values();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::Operation;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    fn metrics(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn default_epoch_has_9375_updates() {
        assert_eq!(TrainConfig::default().steps_per_epoch(), 9375);
        let c = TrainConfig {
            epoch_size: 100,
            batch_size: 16,
            accumulate_gradients: 4,
            ..Default::default()
        };
        assert_eq!(c.steps_per_epoch(), 2);
    }

    #[test]
    fn stopping_after_flat_patience() {
        let mut st = TrainerState {
            stopping: parse_stopping_criterion("valid_arithmetic_acc,100").unwrap(),
            ..Default::default()
        };
        let m = metrics(&[("valid_arithmetic_acc", 0.5)]);
        for e in 1..=100 {
            st.epoch = e;
            let (_, d) = st.update(&m, 100_000).unwrap();
            assert_eq!(d, StopDecision::Continue, "epoch {e}");
        }
        st.epoch = 101;
        assert_eq!(st.update(&m, 100_000).unwrap().1, StopDecision::Stop);
    }

    #[test]
    fn improving_run_continues_and_lower_is_better() {
        let mut st = TrainerState {
            stopping: parse_stopping_criterion("_valid_arithmetic_xe_loss,3").unwrap(),
            best: parse_validation_metrics("valid_arithmetic_acc,_valid_arithmetic_xe_loss"),
            ..Default::default()
        };
        for e in 1..=4 {
            st.epoch = e;
            let m = metrics(&[
                ("valid_arithmetic_acc", 0.1 * e as f64),
                ("valid_arithmetic_xe_loss", 1.0 / e as f64),
            ]);
            let (improved, d) = st.update(&m, 100).unwrap();
            assert_eq!(d, StopDecision::Continue);
            assert_eq!(
                improved,
                vec!["valid_arithmetic_acc", "_valid_arithmetic_xe_loss"]
            );
        }
        st.epoch = 5;
        let m = metrics(&[
            ("valid_arithmetic_acc", 0.0),
            ("valid_arithmetic_xe_loss", 0.0),
        ]);
        assert_eq!(
            st.update(&m, 100).unwrap().0,
            vec!["_valid_arithmetic_xe_loss"]
        );
        assert_eq!(st.update(&m, 5).unwrap().1, StopDecision::Stop);
    }

    #[test]
    fn unknown_metric_and_bad_criteria_are_errors() {
        let mut st = TrainerState {
            stopping: parse_stopping_criterion("nope,3").unwrap(),
            ..Default::default()
        };
        assert!(st
            .update(&metrics(&[("valid_arithmetic_acc", 1.0)]), 10)
            .is_err());
        assert!(parse_stopping_criterion("valid_arithmetic_acc").is_err());
        assert!(parse_stopping_criterion("valid_arithmetic_acc,x").is_err());
        assert!(parse_stopping_criterion("").unwrap().is_none());
    }

    proptest! {
        #[test]
        fn patience_counts_epochs_without_improvement(values in proptest::collection::vec(0u8..5, 1..40), p in 1usize..6) {
            let mut t = MetricTracker::new("m", Some(p));
            let mut best: Option<u8> = None;
            let mut since = 0;
            for v in values {
                t.observe(&metrics(&[("m", f64::from(v))])).unwrap();
                if best.is_none_or(|b| v > b) { best = Some(v); since = 0; } else { since += 1; }
                prop_assert_eq!(t.epochs_since_improvement, since);
                prop_assert_eq!(t.exhausted(), since >= p);
            }
        }
    }

    fn small_trainer(seed: i64) -> (Trainer<f64>, TrainData) {
        let mut task = TaskSpec::new(Operation::Gcd);
        task.base = 10;
        task.max_int = 100;
        let vocab = task.vocabulary();
        let mut mc = ModelConfig::new(vocab.len());
        for s in [&mut mc.encoder, &mut mc.decoder] {
            s.n_layers = 1;
            s.emb_dim = 16;
            s.n_heads = 2;
        }
        mc.max_positions = 32;
        let mut rng = RngStream::purpose(seed, streams::MODEL_INIT, 0);
        let model = Transformer::new(mc, &mut rng).unwrap();
        let cfg = TrainConfig {
            epoch_size: 64,
            batch_size: 8,
            report_loss_every: 4,
            ..Default::default()
        };
        let opt = optim::parse_optimizer("adam,lr=1e-3").unwrap();
        (
            Trainer::new(model, opt, cfg, vocab, seed),
            TrainData::generated(task, seed),
        )
    }

    #[test]
    fn epoch_counts_steps_and_examples() {
        let (mut t, mut d) = small_trainer(3);
        let s = t.train_epoch(&mut d, &mut Logger::silent()).unwrap();
        assert_eq!(s.steps, 8);
        assert_eq!(t.state.step, 8);
        assert_eq!(t.optimizer.step, 8);
        assert_eq!(t.state.examples, 64);
        assert!(s.mean_loss.is_finite() && s.mean_loss > 0.0);
    }

    #[test]
    fn checkpoint_resume_continues_identically() {
        let (mut a, mut da) = small_trainer(5);
        a.train_epoch(&mut da, &mut Logger::silent()).unwrap();
        let bytes = a.checkpoint("--x 1\n", Some(&da)).to_bytes();
        a.train_epoch(&mut da, &mut Logger::silent()).unwrap();

        let (mut b, mut db) = small_trainer(99);
        b.restore(&Checkpoint::from_bytes(&bytes).unwrap(), Some(&mut db))
            .unwrap();
        b.train_epoch(&mut db, &mut Logger::silent()).unwrap();
        assert_eq!(a.state.epoch_losses, b.state.epoch_losses);
        assert_eq!(a.model.params.values, b.model.params.values);
    }

    #[test]
    fn chunked_source_resumes_mid_chunk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train");
        let body: String = (0..10).map(|i| format!("+ {i}\t+ {i}\n")).collect();
        std::fs::write(&p, body).unwrap();
        let mut d = TrainData::chunked(&p, 4, -1).unwrap();
        let first: Vec<String> = (0..6)
            .map(|_| d.next_example().unwrap().input.to_string())
            .collect();
        assert_eq!(first, ["+ 0", "+ 1", "+ 2", "+ 3", "+ 4", "+ 5"]);
        let saved = d.state();
        let rest: Vec<String> = (0..7)
            .map(|_| d.next_example().unwrap().input.to_string())
            .collect();
        assert_eq!(rest, ["+ 6", "+ 7", "+ 8", "+ 9", "+ 0", "+ 1", "+ 2"]);
        let mut e = TrainData::chunked(&p, 4, -1).unwrap();
        e.restore(&saved).unwrap();
        let again: Vec<String> = (0..7)
            .map(|_| e.next_example().unwrap().input.to_string())
            .collect();
        assert_eq!(again, rest);
    }

    #[test]
    fn worker_pool_produces_and_shuts_down() {
        let mut task = TaskSpec::new(Operation::Gcd);
        task.base = 10;
        let mut d = TrainData::Workers(WorkerPool::spawn(&task, 2, 1, 8));
        for _ in 0..50 {
            let ex = d.next_example().unwrap();
            assert!(!ex.output.is_empty());
        }
        drop(d);
    }
}
