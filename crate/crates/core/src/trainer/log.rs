use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::Path;
use std::time::{Duration, Instant};

/// Prefix of the line carrying an epoch's metrics as JSON.
pub const METRICS_TAG: &str = "__log__:";

/// `1.0000e-04`: four decimals, signed two-digit exponent.
pub fn sci4(x: f64) -> String {
    let s = format!("{x:.4e}");
    match s.split_once('e') {
        Some((m, e)) => {
            let (sign, digits) = match e.strip_prefix('-') {
                Some(d) => ('-', d),
                None => ('+', e),
            };
            format!("{m}e{sign}{digits:0>2}")
        }
        None => s,
    }
}

/// `H:MM:SS`.
pub fn elapsed(d: Duration) -> String {
    let s = d.as_secs();
    format!("{}:{:02}:{:02}", s / 3600, (s / 60) % 60, s % 60)
}

/// The periodic training line body (everything after the time prefix).
pub fn step_line(step: u64, examples_per_s: f64, words_per_s: f64, loss: f64, lr: f64) -> String {
    format!(
        "{step:>7} - {examples_per_s:>7.2} examples/s - {words_per_s:>8.2} words/s - ARITHMETIC: {loss:>7.4} - LR: {}",
        sci4(lr)
    )
}

/// `__log__:{...}` with keys sorted and the epoch included.
pub fn metrics_line(epoch: usize, metrics: &BTreeMap<String, f64>) -> String {
    let mut m = serde_json::Map::new();
    m.insert("epoch".into(), serde_json::Value::from(epoch));
    for (k, v) in metrics {
        let v = serde_json::Number::from_f64(*v)
            .map_or(serde_json::Value::Null, serde_json::Value::Number);
        m.insert(k.clone(), v);
    }
    format!("{METRICS_TAG}{}", serde_json::Value::Object(m))
}

/// Writes `INFO - date - elapsed - message` lines to a file and,
/// optionally, to stderr.
pub struct Logger {
    file: Option<File>,
    start: Instant,
    echo: bool,
}

impl Logger {
    pub fn new(path: Option<&Path>, echo: bool) -> io::Result<Self> {
        let file = match path {
            Some(p) => Some(OpenOptions::new().create(true).append(true).open(p)?),
            None => None,
        };
        Ok(Self {
            file,
            start: Instant::now(),
            echo,
        })
    }

    pub fn silent() -> Self {
        Self {
            file: None,
            start: Instant::now(),
            echo: false,
        }
    }

    pub fn line(&self, msg: &str) -> String {
        let now = chrono::Local::now().format("%m/%d/%y %H:%M:%S");
        format!("INFO - {now} - {} - {msg}", elapsed(self.start.elapsed()))
    }

    pub fn info(&mut self, msg: &str) {
        for part in msg.split('\n') {
            let line = self.line(part);
            if self.echo {
                eprintln!("{line}");
            }
            if let Some(f) = self.file.as_mut() {
                // A failing log write must not abort training.
                let _ = writeln!(f, "{line}");
            }
        }
    }

    pub fn flush(&mut self) {
        if let Some(f) = self.file.as_mut() {
            let _ = f.flush();
        }
    }
}
