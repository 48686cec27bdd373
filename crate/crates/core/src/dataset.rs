//! Corpus files, padded batches and training-set samplers.
//!
//! A corpus file holds one example per line: input tokens, a tab, output
//! tokens, tokens separated by single spaces, LF line endings.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Seek, SeekFrom};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::generators::{RngStream, Split, TaskError, TaskSpec};
use crate::tokenizer::{TokenError, TokenSeq, Vocabulary};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("invalid sampler: {0}")]
    Sampler(String),
    #[error("{0} contains no usable examples")]
    Empty(String),
}

fn file_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::File {
        path: path.to_owned(),
        source,
    }
}

/// A tokenized (input, output) pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub input: TokenSeq,
    pub output: TokenSeq,
    pub class_id: Option<i64>,
}

impl Example {
    pub fn new(input: TokenSeq, output: TokenSeq) -> Self {
        Self {
            input,
            output,
            class_id: None,
        }
    }

    /// Parses one corpus line (without its terminating newline). The line is
    /// split at the first tab.
    pub fn from_line(line: &str) -> Result<Self, String> {
        let line = line.strip_suffix('\r').unwrap_or(line);
        let (inp, out) = line.split_once('\t').ok_or("no tab separator")?;
        if inp.is_empty() || out.is_empty() {
            return Err("empty input or output".into());
        }
        let input = TokenSeq::parse(inp);
        let output = TokenSeq::parse(out);
        if input
            .tokens()
            .iter()
            .chain(output.tokens())
            .any(String::is_empty)
        {
            return Err("empty token (repeated or trailing space)".into());
        }
        Ok(Self::new(input, output))
    }

    pub fn fits(&self, max_len: i64) -> bool {
        max_len <= 0 || (self.input.len() as i64 <= max_len && self.output.len() as i64 <= max_len)
    }
}

/// Serializes one example as a newline-terminated corpus line.
pub fn write_example(input: &TokenSeq, output: &TokenSeq) -> String {
    format!("{input}\t{output}\n")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source {
    File(PathBuf),
    Generated(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExampleSet {
    pub examples: Vec<Example>,
    pub source: Source,
}

impl ExampleSet {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn to_corpus(&self) -> String {
        self.examples
            .iter()
            .map(|e| write_example(&e.input, &e.output))
            .collect()
    }
}

/// Outcome of reading a corpus file.
#[derive(Debug, Clone)]
pub struct ReadReport {
    pub set: ExampleSet,
    /// `(line number, reason)` of every skipped malformed line.
    pub malformed: Vec<(usize, String)>,
    /// Lines dropped because one side exceeded `max_len`.
    pub too_long: usize,
}

/// Reads at most `limit` examples (`limit < 0` for all) from a corpus file.
/// Malformed lines and lines with a side longer than `max_len` (when
/// positive) are skipped and counted.
pub fn read_examples(path: &Path, limit: i64, max_len: i64) -> Result<ReadReport, DataError> {
    let file = File::open(path).map_err(file_err(path))?;
    let reader = BufReader::new(file);
    let mut examples = Vec::new();
    let mut malformed = Vec::new();
    let mut too_long = 0;
    for (i, line) in reader.lines().enumerate() {
        if limit >= 0 && examples.len() as i64 >= limit {
            break;
        }
        let line = line.map_err(file_err(path))?;
        match Example::from_line(&line) {
            Ok(ex) if ex.fits(max_len) => examples.push(ex),
            Ok(_) => too_long += 1,
            Err(reason) => malformed.push((i + 1, reason)),
        }
    }
    Ok(ReadReport {
        set: ExampleSet {
            examples,
            source: Source::File(path.to_owned()),
        },
        malformed,
        too_long,
    })
}

/// Padded id arrays for one group of examples. Output rows are framed as
/// `<s> tokens <s>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub size: usize,
    pub input_ids: Vec<u32>,
    pub input_width: usize,
    pub input_lengths: Vec<usize>,
    pub output_ids: Vec<u32>,
    pub output_width: usize,
    pub output_lengths: Vec<usize>,
    pub pad_id: u32,
}

impl Batch {
    pub fn input_row(&self, b: usize) -> &[u32] {
        &self.input_ids[b * self.input_width..(b + 1) * self.input_width]
    }

    pub fn output_row(&self, b: usize) -> &[u32] {
        &self.output_ids[b * self.output_width..(b + 1) * self.output_width]
    }

    /// Non-pad target tokens (each output row predicts `length - 1` tokens).
    pub fn target_tokens(&self) -> usize {
        self.output_lengths.iter().map(|l| l - 1).sum()
    }

    /// Input plus output tokens, the "words" of throughput reports.
    pub fn word_count(&self) -> usize {
        self.input_lengths.iter().sum::<usize>() + self.output_lengths.iter().sum::<usize>()
    }
}

/// Packs examples into a padded batch.
pub fn make_batch<'a, I>(examples: I, vocab: &Vocabulary) -> Result<Batch, TokenError>
where
    I: IntoIterator<Item = &'a Example>,
{
    let pad = vocab.pad_id();
    let eos = vocab.eos_id();
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    for ex in examples {
        inputs.push(vocab.tokens_to_ids(ex.input.tokens())?);
        let mut out = Vec::with_capacity(ex.output.len() + 2);
        out.push(eos);
        out.extend(vocab.tokens_to_ids(ex.output.tokens())?);
        out.push(eos);
        outputs.push(out);
    }
    assert!(!inputs.is_empty(), "make_batch needs at least one example");
    let input_width = inputs.iter().map(Vec::len).max().unwrap_or(0);
    let output_width = outputs.iter().map(Vec::len).max().unwrap_or(0);
    let pack = |rows: &[Vec<u32>], width: usize| {
        let mut flat = Vec::with_capacity(rows.len() * width);
        for r in rows {
            flat.extend_from_slice(r);
            flat.extend(std::iter::repeat(pad).take(width - r.len()));
        }
        flat
    };
    Ok(Batch {
        size: inputs.len(),
        input_ids: pack(&inputs, input_width),
        input_width,
        input_lengths: inputs.iter().map(Vec::len).collect(),
        output_ids: pack(&outputs, output_width),
        output_width,
        output_lengths: outputs.iter().map(Vec::len).collect(),
        pad_id: pad,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerMode {
    Uniform,
    TwoClass,
    Sequential,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    pub first_class_size: usize,
    pub first_class_prob: f64,
}

impl SamplerConfig {
    pub fn uniform() -> Self {
        Self {
            mode: SamplerMode::Uniform,
            first_class_size: 0,
            first_class_prob: 0.0,
        }
    }

    pub fn validate(&self, dataset_size: usize) -> Result<(), DataError> {
        if dataset_size == 0 {
            return Err(DataError::Sampler("empty training set".into()));
        }
        if self.mode == SamplerMode::TwoClass {
            if self.first_class_size == 0 || self.first_class_size >= dataset_size {
                return Err(DataError::Sampler(format!(
                    "first_class_size {} must lie in (0, {dataset_size})",
                    self.first_class_size
                )));
            }
            if !(self.first_class_prob > 0.0 && self.first_class_prob < 1.0) {
                return Err(DataError::Sampler(format!(
                    "first_class_prob {} must lie in (0, 1)",
                    self.first_class_prob
                )));
            }
        }
        Ok(())
    }
}

/// Picks training example indices from an in-memory set.
#[derive(Debug, Clone)]
pub struct Sampler {
    config: SamplerConfig,
    cursor: usize,
}

impl Sampler {
    pub fn new(config: SamplerConfig, dataset_size: usize) -> Result<Self, DataError> {
        config.validate(dataset_size)?;
        Ok(Self { config, cursor: 0 })
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn set_cursor(&mut self, cursor: usize) {
        self.cursor = cursor;
    }

    pub fn next_index(&mut self, n: usize, rng: &mut RngStream) -> usize {
        match self.config.mode {
            SamplerMode::Uniform => rng.index(n),
            SamplerMode::TwoClass => {
                let k = self.config.first_class_size;
                if rng.bernoulli(self.config.first_class_prob) {
                    rng.index(k)
                } else {
                    k + rng.index(n - k)
                }
            }
            SamplerMode::Sequential => {
                let i = self.cursor % n;
                self.cursor = (i + 1) % n;
                i
            }
        }
    }

    pub fn next_indices(&mut self, count: usize, n: usize, rng: &mut RngStream) -> Vec<usize> {
        (0..count).map(|_| self.next_index(n, rng)).collect()
    }
}

/// Draws one batch from an in-memory example set.
pub fn next_training_batch(
    sampler: &mut Sampler,
    set: &ExampleSet,
    rng: &mut RngStream,
    batch_size: usize,
    vocab: &Vocabulary,
) -> Result<Batch, TokenError> {
    let idx = sampler.next_indices(batch_size, set.len(), rng);
    make_batch(idx.iter().map(|&i| &set.examples[i]), vocab)
}

/// Generates and tokenizes one example.
pub fn generate_example(
    task: &TaskSpec,
    rng: &mut RngStream,
    split: Split,
) -> Result<Example, DataError> {
    let (problem, solution) = task.generate(rng, split)?;
    let input = task.encode_problem(&problem)?;
    let output = task.encode_solution(&solution)?;
    Ok(Example {
        class_id: task.code_class(&problem, &solution),
        input,
        output,
    })
}

/// `count` freshly generated examples drawn from `rng`.
pub fn stream_generated<'a>(
    task: &'a TaskSpec,
    rng: &'a mut RngStream,
    count: usize,
    split: Split,
) -> impl Iterator<Item = Result<Example, DataError>> + 'a {
    (0..count).map(move |_| generate_example(task, rng, split))
}

/// Streams a corpus file in order, `reload_size` examples at a time,
/// restarting from the top after the last line.
#[derive(Debug)]
pub struct ChunkedReader {
    path: PathBuf,
    reader: BufReader<File>,
    reload_size: usize,
    max_len: i64,
    line_no: usize,
    pub skipped: usize,
}

impl ChunkedReader {
    pub fn open(path: &Path, reload_size: usize, max_len: i64) -> Result<Self, DataError> {
        let file = File::open(path).map_err(file_err(path))?;
        Ok(Self {
            path: path.to_owned(),
            reader: BufReader::new(file),
            reload_size: reload_size.max(1),
            max_len,
            line_no: 0,
            skipped: 0,
        })
    }

    /// Byte offset of the next unread line, for checkpointing.
    pub fn position(&mut self) -> Result<u64, DataError> {
        let path = self.path.clone();
        self.reader.stream_position().map_err(file_err(&path))
    }

    pub fn seek(&mut self, offset: u64) -> Result<(), DataError> {
        let path = self.path.clone();
        self.reader
            .seek(SeekFrom::Start(offset))
            .map_err(file_err(&path))?;
        Ok(())
    }

    pub fn next_chunk(&mut self) -> Result<Vec<Example>, DataError> {
        let mut out = Vec::with_capacity(self.reload_size);
        let mut wrapped_empty = false;
        let mut line = String::new();
        while out.len() < self.reload_size {
            line.clear();
            let n = self
                .reader
                .read_line(&mut line)
                .map_err(file_err(&self.path))?;
            if n == 0 {
                if wrapped_empty {
                    return Err(DataError::Empty(self.path.display().to_string()));
                }
                wrapped_empty = out.is_empty();
                self.seek(0)?;
                self.line_no = 0;
                if !out.is_empty() {
                    break;
                }
                continue;
            }
            self.line_no += 1;
            let text = line.strip_suffix('\n').unwrap_or(&line);
            match Example::from_line(text) {
                Ok(ex) if ex.fits(self.max_len) => {
                    wrapped_empty = false;
                    out.push(ex);
                }
                _ => self.skipped += 1,
            }
        }
        Ok(out)
    }
}

/// Metric prefixes for evaluation sets in order: `valid`, `test`, `test2`, …
pub fn eval_prefixes(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| match i {
            0 => "valid".to_owned(),
            1 => "test".to_owned(),
            k => format!("test{k}"),
        })
        .collect()
}
