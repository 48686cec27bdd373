//! The `logparse` command: per-epoch metric tables, step-loss tables and
//! learning curves from `train.log` files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;

use super::{runtime, CliError};
use crate::trainer::log::METRICS_TAG;

#[derive(Debug, Clone, Args)]
#[command(rename_all = "snake_case")]
pub struct LogparseArgs {
    /// `train.log` files or experiment directories containing one.
    #[arg(required = true)]
    pub paths: Vec<PathBuf>,
    /// Metric table destination (stdout when absent).
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Step-loss table destination.
    #[arg(long)]
    pub steps: Option<PathBuf>,
    /// SVG learning curve of `--metric`.
    #[arg(long)]
    pub plot: Option<PathBuf>,
    /// Print a text learning curve of `--metric` to stdout.
    #[arg(long, default_value_t = false, value_parser = super::parse_bool, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub ascii: bool,
    #[arg(long, default_value = "valid_arithmetic_acc")]
    pub metric: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub examples_per_s: f64,
    pub words_per_s: f64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedLog {
    pub steps: Vec<StepRecord>,
    /// `(epoch, metrics)` in log order.
    pub epochs: Vec<(i64, BTreeMap<String, f64>)>,
    /// `(line number, problem)` of lines that looked relevant but did not
    /// parse.
    pub warnings: Vec<(usize, String)>,
}

/// The message part of an `INFO - date - elapsed - message` line.
fn message(line: &str) -> Option<&str> {
    let mut parts = line.splitn(4, " - ");
    (parts.next()? == "INFO").then_some(())?;
    parts.next()?;
    parts.next()?;
    parts.next()
}

fn parse_step(msg: &str) -> Result<Option<StepRecord>, String> {
    if !msg.contains(" examples/s - ") || !msg.contains("ARITHMETIC:") {
        return Ok(None);
    }
    let f: Vec<&str> = msg.split(" - ").map(str::trim).collect();
    if f.len() != 5 {
        return Err(format!("expected 5 fields, found {}", f.len()));
    }
    let num = |s: &str, what: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| format!("bad {what}: {s:?}"))
    };
    let strip = |s: &'static str, v: &str| v.strip_suffix(s).map(str::to_string);
    let step = f[0]
        .parse::<u64>()
        .map_err(|_| format!("bad step: {:?}", f[0]))?;
    let ex = num(
        &strip(" examples/s", f[1]).ok_or("missing examples/s")?,
        "examples/s",
    )?;
    let words = num(
        &strip(" words/s", f[2]).ok_or("missing words/s")?,
        "words/s",
    )?;
    let loss = num(
        f[3].strip_prefix("ARITHMETIC:").ok_or("missing loss")?,
        "loss",
    )?;
    let lr = num(f[4].strip_prefix("LR:").ok_or("missing LR")?, "LR")?;
    Ok(Some(StepRecord {
        step,
        examples_per_s: ex,
        words_per_s: words,
        loss,
        lr,
    }))
}

fn parse_metrics(json: &str) -> Result<(i64, BTreeMap<String, f64>), String> {
    let v: serde_json::Value = serde_json::from_str(json).map_err(|e| e.to_string())?;
    let obj = v.as_object().ok_or("metrics are not a JSON object")?;
    let epoch = obj
        .get("epoch")
        .and_then(serde_json::Value::as_i64)
        .ok_or("missing epoch")?;
    let mut m = BTreeMap::new();
    for (k, v) in obj {
        if k == "epoch" {
            continue;
        }
        let x = match v {
            serde_json::Value::Number(n) => n.as_f64().ok_or("non-finite metric")?,
            serde_json::Value::Null => f64::NAN,
            _ => return Err(format!("metric {k} is not a number")),
        };
        m.insert(k.clone(), x);
    }
    Ok((epoch, m))
}

/// Extracts step lines and epoch metric lines; everything else is ignored.
pub fn parse_log(text: &str) -> ParsedLog {
    let mut out = ParsedLog::default();
    for (i, line) in text.lines().enumerate() {
        let Some(msg) = message(line) else { continue };
        if let Some(json) = msg.strip_prefix(METRICS_TAG) {
            match parse_metrics(json) {
                Ok(e) => out.epochs.push(e),
                Err(w) => out.warnings.push((i + 1, w)),
            }
            continue;
        }
        match parse_step(msg) {
            Ok(Some(s)) => out.steps.push(s),
            Ok(None) => {}
            Err(w) => out.warnings.push((i + 1, w)),
        }
    }
    out
}

/// Splits `valid_arithmetic_acc_1` into (`valid`, `acc_1`).
fn split_key(k: &str) -> (&str, &str) {
    k.split_once("_arithmetic_").unwrap_or(("", k))
}

fn column_order(a: &str, b: &str) -> std::cmp::Ordering {
    const FIRST: [&str; 4] = ["xe_loss", "acc", "perfect", "correct"];
    let rank = |s: &str| FIRST.iter().position(|f| *f == s).unwrap_or(FIRST.len());
    let class = |s: &str| s.strip_prefix("acc_").and_then(|c| c.parse::<i64>().ok());
    rank(a)
        .cmp(&rank(b))
        .then_with(|| match (class(a), class(b)) {
            (Some(x), Some(y)) => x.cmp(&y),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => a.cmp(b),
        })
}

/// One row per (experiment, epoch, metric prefix). Values use the shortest
/// representation that parses back to the same float.
pub fn metrics_table(logs: &[(String, ParsedLog)]) -> String {
    let mut cols = BTreeSet::new();
    for (_, log) in logs {
        for (_, m) in &log.epochs {
            cols.extend(m.keys().map(|k| split_key(k).1.to_string()));
        }
    }
    let mut cols: Vec<String> = cols.into_iter().collect();
    cols.sort_by(|a, b| column_order(a, b));
    let mut out = String::from("exp_id,epoch,prefix");
    for c in &cols {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for (exp, log) in logs {
        for (epoch, m) in &log.epochs {
            let mut by_prefix: BTreeMap<&str, BTreeMap<&str, f64>> = BTreeMap::new();
            for (k, v) in m {
                let (p, c) = split_key(k);
                by_prefix.entry(p).or_default().insert(c, *v);
            }
            for (p, vals) in by_prefix {
                let _ = write!(out, "{exp},{epoch},{p}");
                for c in &cols {
                    out.push(',');
                    if let Some(v) = vals.get(c.as_str()) {
                        let _ = write!(out, "{v:?}");
                    }
                }
                out.push('\n');
            }
        }
    }
    out
}

/// Reads a metrics table back into `(exp_id, epoch) → metrics`.
pub fn read_metrics_table(csv: &str) -> BTreeMap<(String, i64), BTreeMap<String, f64>> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines
        .next()
        .map(|h| h.split(',').collect())
        .unwrap_or_default();
    let mut out: BTreeMap<(String, i64), BTreeMap<String, f64>> = BTreeMap::new();
    for l in lines {
        let f: Vec<&str> = l.split(',').collect();
        if f.len() < 3 {
            continue;
        }
        let Ok(epoch) = f[1].parse::<i64>() else {
            continue;
        };
        let entry = out.entry((f[0].to_string(), epoch)).or_default();
        for (name, v) in header.iter().zip(&f).skip(3) {
            if let Ok(x) = v.parse::<f64>() {
                let key = if f[2].is_empty() {
                    name.to_string()
                } else {
                    format!("{}_arithmetic_{name}", f[2])
                };
                entry.insert(key, x);
            }
        }
    }
    out
}

pub fn steps_table(logs: &[(String, ParsedLog)]) -> String {
    let mut out = String::from("exp_id,step,examples_per_s,words_per_s,loss,lr\n");
    for (exp, log) in logs {
        for s in &log.steps {
            let _ = writeln!(
                out,
                "{exp},{},{:?},{:?},{:?},{:?}",
                s.step, s.examples_per_s, s.words_per_s, s.loss, s.lr
            );
        }
    }
    out
}

fn series<'a>(logs: &'a [(String, ParsedLog)], metric: &str) -> Vec<(&'a str, Vec<(f64, f64)>)> {
    logs.iter()
        .map(|(exp, log)| {
            let pts = log
                .epochs
                .iter()
                .filter_map(|(e, m)| {
                    m.get(metric)
                        .filter(|v| v.is_finite())
                        .map(|v| (*e as f64, *v))
                })
                .collect();
            (exp.as_str(), pts)
        })
        .collect()
}

fn bounds(all: &[(&str, Vec<(f64, f64)>)]) -> Option<(f64, f64, f64, f64)> {
    let pts: Vec<&(f64, f64)> = all.iter().flat_map(|(_, p)| p.iter()).collect();
    if pts.is_empty() {
        return None;
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &&(x, y) in &pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    Some((x0, x1, y0, y1))
}

/// A line chart, one polyline per experiment.
pub fn svg_plot(logs: &[(String, ParsedLog)], metric: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    const COLORS: [&str; 6] = [
        "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
    ];
    let data = series(logs, metric);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\">{metric}</text>\n",
        W / 2.0
    );
    let _ = writeln!(
        s,
        "<line x1=\"{M}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        H - M,
        W - M,
        H - M
    );
    let _ = writeln!(
        s,
        "<line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{}\" stroke=\"black\"/>",
        H - M
    );
    if let Some((x0, x1, y0, y1)) = bounds(&data) {
        let px = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
        let py = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
        let label = |x: f64, y: f64, anchor: &str, t: String| {
            format!("<text x=\"{x:.1}\" y=\"{y:.1}\" text-anchor=\"{anchor}\" font-size=\"11\" font-family=\"sans-serif\">{t}</text>\n")
        };
        s += &label(M - 4.0, H - M, "end", format!("{y0:.4}"));
        s += &label(M - 4.0, M + 4.0, "end", format!("{y1:.4}"));
        s += &label(M, H - M + 16.0, "middle", format!("{x0}"));
        s += &label(W - M, H - M + 16.0, "middle", format!("{x1}"));
        s += &label(W / 2.0, H - 10.0, "middle", "epoch".to_string());
        for (i, (exp, pts)) in data.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let path: Vec<String> = pts
                .iter()
                .map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y)))
                .collect();
            let _ = writeln!(
                s,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
                path.join(" ")
            );
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" fill=\"{color}\" font-size=\"12\" font-family=\"sans-serif\">{exp}</text>",
                W - M + 4.0,
                M + 14.0 * i as f64
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// A text chart: one symbol per experiment on a fixed grid.
pub fn ascii_plot(logs: &[(String, ParsedLog)], metric: &str) -> String {
    const W: usize = 60;
    const H: usize = 16;
    const SYMBOLS: [char; 6] = ['*', 'o', '+', 'x', '#', '@'];
    let data = series(logs, metric);
    let Some((x0, x1, y0, y1)) = bounds(&data) else {
        return format!("{metric}: no data\n");
    };
    let mut grid = vec![vec![' '; W]; H];
    for (i, (_, pts)) in data.iter().enumerate() {
        for &(x, y) in pts {
            let c = ((x - x0) / (x1 - x0) * (W - 1) as f64).round() as usize;
            let r = ((y1 - y) / (y1 - y0) * (H - 1) as f64).round() as usize;
            grid[r][c] = SYMBOLS[i % SYMBOLS.len()];
        }
    }
    let mut out = format!("{metric}\n");
    for (r, row) in grid.iter().enumerate() {
        let tick = match r {
            0 => format!("{y1:>10.4}"),
            r if r == H - 1 => format!("{y0:>10.4}"),
            _ => " ".repeat(10),
        };
        let _ = writeln!(out, "{tick} |{}", row.iter().collect::<String>());
    }
    let _ = writeln!(out, "{} +{}", " ".repeat(10), "-".repeat(W));
    let _ = writeln!(
        out,
        "{} {:<w$}{}",
        " ".repeat(10),
        x0,
        x1,
        w = W - x1.to_string().len()
    );
    for (i, (exp, _)) in data.iter().enumerate() {
        let _ = writeln!(out, "  {} {exp}", SYMBOLS[i % SYMBOLS.len()]);
    }
    out
}

/// `(exp_id, log file)`: a directory stands for its `train.log`, and the
/// experiment id is the name of the directory holding the log.
fn resolve(path: &Path) -> (String, PathBuf) {
    let file = if path.is_dir() {
        path.join("train.log")
    } else {
        path.to_owned()
    };
    let id = file
        .parent()
        .and_then(Path::file_name)
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| file.display().to_string());
    (id, file)
}

pub fn load_logs(paths: &[PathBuf]) -> Result<Vec<(String, ParsedLog)>, CliError> {
    let mut logs = Vec::new();
    for p in paths {
        let (id, file) = resolve(p);
        let text =
            fs::read_to_string(&file).map_err(|e| runtime(format!("{}: {e}", file.display())))?;
        let parsed = parse_log(&text);
        for (line, w) in &parsed.warnings {
            eprintln!("warning: {}:{line}: {w}", file.display());
        }
        logs.push((id, parsed));
    }
    Ok(logs)
}

pub fn cmd_logparse(args: &LogparseArgs) -> Result<(), CliError> {
    let logs = load_logs(&args.paths)?;
    let table = metrics_table(&logs);
    match &args.output {
        Some(p) => fs::write(p, &table).map_err(runtime)?,
        None => print!("{table}"),
    }
    if let Some(p) = &args.steps {
        fs::write(p, steps_table(&logs)).map_err(runtime)?;
    }
    if let Some(p) = &args.plot {
        fs::write(p, svg_plot(&logs, &args.metric)).map_err(runtime)?;
    }
    if args.ascii {
        print!("{}", ascii_plot(&logs, &args.metric));
    }
    Ok(())
}
