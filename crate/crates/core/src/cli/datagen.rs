//! The `datagen` command: corpus generation and the
//! concat / shuffle / dedupe / split pipeline.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Subcommand};
use rand::seq::SliceRandom;

use super::{config, runtime, CliError};
use crate::dataset::{generate_example, write_example};
use crate::generators::{Operation, RngStream, Split, TaskSpec};

/// Stream purpose of the shuffle permutation.
const SHUFFLE_STREAM: u64 = 5;

#[derive(Debug, Args)]
pub struct DatagenArgs {
    #[command(subcommand)]
    pub step: DatagenStep,
}

#[derive(Debug, Subcommand)]
#[command(rename_all = "snake_case")]
pub enum DatagenStep {
    /// Generate examples into one corpus file.
    Generate(GenerateArgs),
    /// Concatenate corpus files.
    Concat(ConcatArgs),
    /// Apply a seeded random permutation to the lines of a file.
    Shuffle(ShuffleArgs),
    /// Drop repeated lines, keeping first occurrences.
    Dedupe(DedupeArgs),
    /// Split into valid (first lines), test (last lines) and train (the rest).
    Split(SplitArgs),
    /// generate, concat, shuffle, dedupe and split in one go.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Clone, Args)]
#[command(rename_all = "snake_case")]
pub struct TaskFlags {
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
    #[arg(long, default_value_t = 512, allow_negative_numbers = true)]
    pub max_len: i64,
}

impl TaskFlags {
    pub fn task(&self) -> Result<TaskSpec, CliError> {
        let op: Operation = self.operation.parse().map_err(config)?;
        let mut t = TaskSpec::new(op);
        t.base = self.base;
        t.min_int = self.minint;
        t.max_int = self.maxint;
        t.modulo = self.modulo;
        t.dim1 = self.dim1;
        t.dim2 = self.dim2;
        t.validate().map_err(config)?;
        Ok(t)
    }
}

#[derive(Debug, Clone, Args)]
#[command(rename_all = "snake_case")]
pub struct GenerateArgs {
    #[command(flatten)]
    pub task: TaskFlags,
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub num_workers: usize,
    #[arg(
        long,
        alias = "base_env_seed",
        default_value_t = 0,
        allow_negative_numbers = true
    )]
    pub env_base_seed: i64,
}

#[derive(Debug, Clone, Args)]
#[command(rename_all = "snake_case")]
pub struct ConcatArgs {
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Args)]
#[command(rename_all = "snake_case")]
pub struct ShuffleArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: i64,
}

#[derive(Debug, Clone, Args)]
#[command(rename_all = "snake_case")]
pub struct DedupeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Args)]
#[command(rename_all = "snake_case")]
pub struct SplitArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Writes `<prefix>.valid`, `<prefix>.test`, `<prefix>.train`.
    #[arg(long)]
    pub output_prefix: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub valid_size: usize,
    #[arg(long, default_value_t = 10_000)]
    pub test_size: usize,
}

#[derive(Debug, Clone, Args)]
#[command(rename_all = "snake_case")]
pub struct PipelineArgs {
    #[command(flatten)]
    pub task: TaskFlags,
    /// Examples generated by each worker.
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 1)]
    pub num_workers: usize,
    #[arg(
        long,
        alias = "base_env_seed",
        default_value_t = 0,
        allow_negative_numbers = true
    )]
    pub env_base_seed: i64,
    #[arg(long)]
    pub output_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: i64,
    #[arg(long, default_value_t = true, value_parser = super::parse_bool, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub dedupe: bool,
    #[arg(long, default_value_t = 10_000)]
    pub valid_size: usize,
    #[arg(long, default_value_t = 10_000)]
    pub test_size: usize,
}

/// Generates `count` examples for one worker stream.
pub fn generate_lines(
    task: &TaskSpec,
    count: usize,
    seed: i64,
    worker: u64,
    max_len: i64,
) -> Result<Vec<String>, CliError> {
    let mut rng = RngStream::new(seed, worker, 0);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let ex = generate_example(task, &mut rng, Split::Train).map_err(runtime)?;
        if ex.fits(max_len) {
            let mut line = write_example(&ex.input, &ex.output);
            line.pop();
            out.push(line);
        }
    }
    Ok(out)
}

/// `count` examples from `workers` parallel streams, merged in worker order.
pub fn generate_corpus(
    task: &TaskSpec,
    count: usize,
    workers: usize,
    seed: i64,
    max_len: i64,
) -> Result<Vec<String>, CliError> {
    let workers = workers.max(1);
    let shares: Vec<usize> = (0..workers)
        .map(|w| count / workers + usize::from(w < count % workers))
        .collect();
    let parts = std::thread::scope(|s| {
        let handles: Vec<_> = shares
            .iter()
            .enumerate()
            .map(|(w, &n)| s.spawn(move || generate_lines(task, n, seed, w as u64, max_len)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("generator thread panicked"))
            .collect::<Vec<_>>()
    });
    let mut out = Vec::with_capacity(count);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn read_lines(path: &Path) -> Result<Vec<String>, CliError> {
    let f = File::open(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    BufReader::new(f)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(|e| runtime(format!("{}: {e}", path.display())))
}

pub fn write_lines(path: &Path, lines: &[String]) -> Result<(), CliError> {
    let err = |e: std::io::Error| runtime(format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(err)?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(err)?);
    for l in lines {
        w.write_all(l.as_bytes()).map_err(err)?;
        w.write_all(b"\n").map_err(err)?;
    }
    w.flush().map_err(err)
}

/// A deterministic permutation for a given seed.
pub fn shuffle_lines(lines: &mut [String], seed: i64) {
    let mut rng = RngStream::purpose(seed, SHUFFLE_STREAM, 0);
    lines.shuffle(&mut rng);
}

/// Keeps the first occurrence of every line.
pub fn dedupe_lines(lines: Vec<String>) -> Vec<String> {
    let mut seen = HashSet::with_capacity(lines.len());
    lines
        .into_iter()
        .filter(|l| seen.insert(l.clone()))
        .collect()
}

pub struct SplitCorpus {
    pub valid: Vec<String>,
    pub test: Vec<String>,
    pub train: Vec<String>,
}

/// First `valid` lines, last `test` lines, and everything between.
pub fn split_lines(
    mut lines: Vec<String>,
    valid: usize,
    test: usize,
) -> Result<SplitCorpus, CliError> {
    if valid + test > lines.len() {
        return Err(runtime(format!(
            "insufficient data: {} lines cannot provide {valid} validation and {test} test examples",
            lines.len()
        )));
    }
    let test_lines = lines.split_off(lines.len() - test);
    let train = lines.split_off(valid);
    Ok(SplitCorpus {
        valid: lines,
        test: test_lines,
        train,
    })
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn write_split(prefix: &Path, s: &SplitCorpus) -> Result<(), CliError> {
    write_lines(&with_suffix(prefix, "valid"), &s.valid)?;
    write_lines(&with_suffix(prefix, "test"), &s.test)?;
    write_lines(&with_suffix(prefix, "train"), &s.train)?;
    eprintln!(
        "valid: {}, test: {}, train: {} lines",
        s.valid.len(),
        s.test.len(),
        s.train.len()
    );
    Ok(())
}

pub fn cmd_datagen(args: &DatagenArgs) -> Result<(), CliError> {
    match &args.step {
        DatagenStep::Generate(a) => {
            let task = a.task.task()?;
            let lines = generate_corpus(
                &task,
                a.count,
                a.num_workers,
                a.env_base_seed,
                a.task.max_len,
            )?;
            write_lines(&a.output, &lines)
        }
        DatagenStep::Concat(a) => {
            let mut all = Vec::new();
            for p in &a.inputs {
                all.extend(read_lines(p)?);
            }
            write_lines(&a.output, &all)
        }
        DatagenStep::Shuffle(a) => {
            let mut lines = read_lines(&a.input)?;
            shuffle_lines(&mut lines, a.seed);
            write_lines(&a.output, &lines)
        }
        DatagenStep::Dedupe(a) => {
            let lines = read_lines(&a.input)?;
            let n = lines.len();
            let kept = dedupe_lines(lines);
            eprintln!("kept {} of {n} lines", kept.len());
            write_lines(&a.output, &kept)
        }
        DatagenStep::Split(a) => {
            let s = split_lines(read_lines(&a.input)?, a.valid_size, a.test_size)?;
            write_split(&a.output_prefix, &s)
        }
        DatagenStep::Pipeline(a) => pipeline(a),
    }
}

/// Per-worker `data.prefix` files, then `data.raw`, `data.shuf`,
/// `data.uniq` and the `data.valid` / `data.test` / `data.train` split.
pub fn pipeline(a: &PipelineArgs) -> Result<(), CliError> {
    let task = a.task.task()?;
    let dir = &a.output_dir;
    let workers = a.num_workers.max(1);
    let mut parts = Vec::with_capacity(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let task = &task;
                s.spawn(move || {
                    generate_lines(task, a.count, a.env_base_seed, w as u64, a.task.max_len)
                })
            })
            .collect();
        for h in handles {
            parts.push(h.join().expect("generator thread panicked"));
        }
    });
    let mut raw = Vec::new();
    for (w, p) in parts.into_iter().enumerate() {
        let lines = p?;
        write_lines(&dir.join(format!("worker{w}")).join("data.prefix"), &lines)?;
        raw.extend(lines);
    }
    write_lines(&dir.join("data.raw"), &raw)?;
    shuffle_lines(&mut raw, a.seed);
    write_lines(&dir.join("data.shuf"), &raw)?;
    let corpus = if a.dedupe {
        let uniq = dedupe_lines(raw);
        write_lines(&dir.join("data.uniq"), &uniq)?;
        uniq
    } else {
        raw
    };
    let s = split_lines(corpus, a.valid_size, a.test_size)?;
    write_split(&dir.join("data"), &s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gcd10() -> TaskSpec {
        let mut t = TaskSpec::new(Operation::Gcd);
        t.base = 10;
        t.max_int = 1000;
        t
    }

    #[test]
    fn generated_lines_parse() {
        let lines = generate_corpus(&gcd10(), 1000, 3, 4, -1).unwrap();
        assert_eq!(lines.len(), 1000);
        for l in &lines {
            assert!(crate::dataset::Example::from_line(l).is_ok(), "{l}");
        }
        assert_eq!(lines, generate_corpus(&gcd10(), 1000, 3, 4, -1).unwrap());
    }

    #[test]
    fn split_counts_and_errors() {
        let lines: Vec<String> = (0..30).map(|i| i.to_string()).collect();
        let s = split_lines(lines.clone(), 10, 10).unwrap();
        assert_eq!((s.valid.len(), s.test.len(), s.train.len()), (10, 10, 10));
        assert_eq!(s.valid[0], "0");
        assert_eq!(s.test[9], "29");
        assert_eq!(s.train[0], "10");
        assert!(split_lines(lines, 20, 11).is_err());
    }

    #[test]
    fn shuffle_is_a_seeded_permutation() {
        let lines: Vec<String> = (0..100).map(|i| i.to_string()).collect();
        let (mut a, mut b, mut c) = (lines.clone(), lines.clone(), lines.clone());
        shuffle_lines(&mut a, 7);
        shuffle_lines(&mut b, 7);
        shuffle_lines(&mut c, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        a.sort();
        let mut sorted = lines;
        sorted.sort();
        assert_eq!(a, sorted);
    }

    proptest! {
        #[test]
        fn dedupe_is_idempotent(v in proptest::collection::vec(0u8..20, 0..60)) {
            let lines: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            let once = dedupe_lines(lines.clone());
            prop_assert_eq!(dedupe_lines(once.clone()), once.clone());
            let set: HashSet<&String> = lines.iter().collect();
            prop_assert_eq!(once.len(), set.len());
        }
    }
}
