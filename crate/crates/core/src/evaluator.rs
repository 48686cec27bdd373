//! Decoding and end-of-epoch evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use crate::dataset::{make_batch, Example, ExampleSet};
use crate::generators::TaskSpec;
use crate::model::{Architecture, ModelError, Transformer};
use crate::scalar::Scalar;
use crate::tokenizer::{TokenSeq, Vocabulary};

/// A decoded output: solution token ids without the framing markers.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    /// Sum of token log-probabilities, end marker included.
    pub score: f64,
    /// Whether the end marker was produced before the length cap.
    pub finished: bool,
}

impl Hypothesis {
    /// Generated tokens counted for normalization (end marker included).
    pub fn generated(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }

    /// Score divided by the number of generated tokens.
    pub fn normalized(&self) -> f64 {
        self.score / self.generated().max(1) as f64
    }
}

fn log_softmax_f64<T: Scalar>(row: &[T]) -> Vec<f64> {
    let x: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    let mx = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + x.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    x.into_iter().map(|v| v - lse).collect()
}

fn argmax(lp: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in lp.iter().enumerate() {
        if v > lp[best] {
            best = i;
        }
    }
    best
}

/// Padded encoder inputs for decoding.
#[derive(Debug, Clone, Copy)]
pub struct Inputs<'a> {
    pub ids: &'a [u32],
    pub batch: usize,
    pub width: usize,
    pub lengths: &'a [usize],
}

/// Autoregressive argmax decoding. Every sequence starts from `eos` and
/// holds at most `max_output_len` tokens including both markers.
pub fn greedy_decode<T: Scalar>(
    model: &Transformer<T>,
    inputs: Inputs<'_>,
    eos: u32,
    max_output_len: usize,
) -> Result<Vec<Hypothesis>, ModelError> {
    let enc = model.encode(inputs.ids, inputs.batch, inputs.width, inputs.lengths)?;
    if model.config().architecture == Architecture::EncoderOnly {
        let v = model.config().vocab_size;
        let logits = model.encoder_logits(&enc);
        let cap = max_output_len.saturating_sub(1);
        return Ok((0..inputs.batch)
            .map(|b| {
                let mut h = Hypothesis {
                    tokens: Vec::new(),
                    score: 0.0,
                    finished: false,
                };
                for t in 0..inputs.lengths[b].min(cap) {
                    let row = (b * inputs.width + t) * v;
                    let lp = log_softmax_f64(&logits[row..row + v]);
                    let tok = argmax(&lp);
                    h.score += lp[tok];
                    if tok as u32 == eos {
                        h.finished = true;
                        break;
                    }
                    h.tokens.push(tok as u32);
                }
                h
            })
            .collect());
    }
    let mut hyps: Vec<Hypothesis> = vec![
        Hypothesis {
            tokens: Vec::new(),
            score: 0.0,
            finished: false
        };
        inputs.batch
    ];
    let mut state = model.start_decoding(&enc)?;
    let mut active: Vec<usize> = (0..inputs.batch).collect();
    let mut feed = vec![eos; inputs.batch];
    let v = model.config().vocab_size;
    let mut len = 1;
    while !active.is_empty() && len < max_output_len {
        let logits = model.decode_step(&mut state, &feed)?;
        // The last slot can only hold the end marker.
        let last = len + 1 == max_output_len;
        let mut keep = Vec::with_capacity(active.len());
        feed.clear();
        for (k, &r) in active.iter().enumerate() {
            let lp = log_softmax_f64(&logits[k * v..(k + 1) * v]);
            let tok = argmax(&lp) as u32;
            if tok == eos {
                hyps[r].finished = true;
                hyps[r].score += lp[tok as usize];
            } else if !last {
                hyps[r].tokens.push(tok);
                hyps[r].score += lp[tok as usize];
                keep.push(k);
                feed.push(tok);
            }
        }
        if keep.len() < active.len() {
            state = state.select(&keep);
            active = keep.iter().map(|&k| active[k]).collect();
        }
        len += 1;
    }
    Ok(hyps)
}

/// Beam search over one input. Candidates are ranked by cumulative
/// log-probability; an end marker closes a hypothesis when its candidate
/// ranks within the beam, and search stops once `beam_size` hypotheses are
/// closed. Returned hypotheses are sorted by normalized score (closed ones
/// first), unfinished beams fill up to `beam_size` when the cap is hit.
pub fn beam_search<T: Scalar>(
    model: &Transformer<T>,
    input: &[u32],
    eos: u32,
    beam_size: usize,
    max_output_len: usize,
) -> Result<Vec<Hypothesis>, ModelError> {
    let beam_size = beam_size.max(1);
    let enc = model.encode(input, 1, input.len(), &[input.len()])?;
    let v = model.config().vocab_size;
    let mut state = model.start_decoding(&enc)?;
    let mut live: Vec<(Vec<u32>, f64)> = vec![(vec![eos], 0.0)];
    let mut done: Vec<Hypothesis> = Vec::new();
    let mut len = 1;
    while len < max_output_len && done.len() < beam_size {
        let feed: Vec<u32> = live.iter().map(|(s, _)| s[s.len() - 1]).collect();
        let logits = model.decode_step(&mut state, &feed)?;
        // (total, token log-prob, beam, token)
        let mut cands: Vec<(f64, f64, usize, usize)> = Vec::with_capacity(live.len() * v);
        for (b, (_, score)) in live.iter().enumerate() {
            let lp = log_softmax_f64(&logits[b * v..(b + 1) * v]);
            cands.extend(lp.iter().enumerate().map(|(t, &l)| (score + l, l, b, t)));
        }
        cands.sort_by(|x, y| {
            y.0.total_cmp(&x.0)
                .then(y.1.total_cmp(&x.1))
                .then(x.2.cmp(&y.2))
                .then(x.3.cmp(&y.3))
        });
        let last = len + 1 == max_output_len;
        let mut next = Vec::with_capacity(beam_size);
        let mut parents = Vec::with_capacity(beam_size);
        let mut closed = Vec::new();
        for (rank, &(total, _, b, t)) in cands.iter().take(2 * beam_size).enumerate() {
            if t as u32 == eos {
                if rank < beam_size {
                    done.push(Hypothesis {
                        tokens: live[b].0[1..].to_vec(),
                        score: total,
                        finished: true,
                    });
                    closed.push(b);
                }
            } else if !last {
                let mut s = live[b].0.clone();
                s.push(t as u32);
                next.push((s, total));
                parents.push(b);
            }
            if next.len() == beam_size {
                break;
            }
        }
        if last {
            // Beams that could not close stay unfinished at their last length.
            live = live
                .into_iter()
                .enumerate()
                .filter(|(b, _)| !closed.contains(b))
                .map(|(_, x)| x)
                .collect();
            break;
        }
        live = next;
        state = state.select(&parents);
        len += 1;
        if live.is_empty() {
            break;
        }
    }
    let by_norm = |a: &Hypothesis, b: &Hypothesis| b.normalized().total_cmp(&a.normalized());
    done.sort_by(by_norm);
    done.truncate(beam_size);
    if done.len() < beam_size {
        let mut open: Vec<Hypothesis> = live
            .into_iter()
            .map(|(s, score)| Hypothesis {
                tokens: s[1..].to_vec(),
                score,
                finished: false,
            })
            .collect();
        open.sort_by(by_norm);
        done.extend(open.into_iter().take(beam_size - done.len()));
    }
    Ok(done)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Perfect,
    /// Well-formed, not token-identical, accepted by the verifier.
    Correct,
    /// Well-formed but rejected.
    Wrong,
    /// Unparseable or unterminated.
    Malformed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub outcome: Outcome,
    pub eval_metrics: Vec<f64>,
    pub error_metrics: Vec<f64>,
}

impl Check {
    fn plain(outcome: Outcome) -> Self {
        Self {
            outcome,
            eval_metrics: Vec::new(),
            error_metrics: Vec::new(),
        }
    }
}

/// Classifies a prediction. Without a task (file-based data) anything but
/// an exact match counts as wrong.
pub fn check_prediction(
    predicted: &[String],
    finished: bool,
    reference: &[String],
    problem: &[String],
    task: Option<&TaskSpec>,
) -> Check {
    if !finished {
        return Check::plain(Outcome::Malformed);
    }
    let Some(task) = task else {
        return Check::plain(if predicted == reference {
            Outcome::Perfect
        } else {
            Outcome::Wrong
        });
    };
    let Ok(pred) = task.parse_solution(predicted) else {
        return Check::plain(Outcome::Malformed);
    };
    let (Ok(prob), Ok(sol)) = (task.parse_problem(problem), task.parse_solution(reference)) else {
        return Check::plain(if predicted == reference {
            Outcome::Perfect
        } else {
            Outcome::Wrong
        });
    };
    let verdict = task.evaluate(&prob, &sol, &pred);
    let outcome = if predicted == reference {
        Outcome::Perfect
    } else if verdict.base == 1 {
        Outcome::Correct
    } else {
        Outcome::Wrong
    };
    Check {
        outcome,
        eval_metrics: verdict.eval_metrics,
        error_metrics: verdict.error_metrics,
    }
}

/// Evaluation class of an example: the task's class, or for file-based
/// data a reference made of one nonnegative integer token.
pub fn example_class(ex: &Example, task: Option<&TaskSpec>, max_class: i64) -> Option<i64> {
    match task {
        Some(t) => {
            let p = t.parse_problem(ex.input.tokens()).ok()?;
            let s = t.parse_solution(ex.output.tokens()).ok()?;
            t.code_class(&p, &s)
        }
        None => match ex.output.tokens() {
            [one] => one
                .parse::<i64>()
                .ok()
                .filter(|v| *v >= 0)
                .map(|v| v.min(max_class)),
            _ => None,
        },
    }
}

fn prediction_class(
    tokens: &[String],
    ex: &Example,
    task: Option<&TaskSpec>,
    max_class: i64,
) -> Option<i64> {
    let guess = Example::new(ex.input.clone(), TokenSeq(tokens.to_vec()));
    if tokens.is_empty() {
        return None;
    }
    example_class(&guess, task, max_class)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportLevel {
    Off,
    /// Beams are written for non-perfect predictions only.
    WithoutPerfectBeam,
    /// Beams are written for every prediction.
    WithPerfectBeam,
}

impl ExportLevel {
    pub fn from_verbosity(v: u8) -> Self {
        match v {
            0 => ExportLevel::Off,
            1 => ExportLevel::WithoutPerfectBeam,
            _ => ExportLevel::WithPerfectBeam,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub batch_size: usize,
    pub beam_search: bool,
    pub beam_size: usize,
    pub max_output_len: usize,
    pub export: ExportLevel,
    pub print_predictions: bool,
    pub export_pred: bool,
    pub max_class: i64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            beam_search: false,
            beam_size: 1,
            max_output_len: 512,
            export: ExportLevel::Off,
            print_predictions: false,
            export_pred: false,
            max_class: 100,
        }
    }
}

/// Per-class tallies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassCount {
    pub total: usize,
    pub correct: usize,
}

/// Reference class × predicted class counts; `None` predictions land in the
/// "other" column.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredHistogram {
    pub counts: BTreeMap<i64, BTreeMap<Option<i64>, usize>>,
}

impl PredHistogram {
    pub fn add(&mut self, reference: i64, predicted: Option<i64>) {
        *self
            .counts
            .entry(reference)
            .or_default()
            .entry(predicted)
            .or_default() += 1;
    }

    pub fn row_total(&self, reference: i64) -> usize {
        self.counts.get(&reference).map_or(0, |r| r.values().sum())
    }

    /// Comma-separated table with one row per reference class and one
    /// column per predicted class up to `max_class`, plus "other".
    pub fn to_csv(&self, max_class: i64) -> String {
        let mut s = String::from("class");
        for c in 0..=max_class {
            let _ = write!(s, ",{c}");
        }
        s.push_str(",other\n");
        for (r, row) in &self.counts {
            let _ = write!(s, "{r}");
            for c in 0..=max_class {
                let _ = write!(s, ",{}", row.get(&Some(c)).copied().unwrap_or(0));
            }
            let other: usize = row
                .iter()
                .filter(|(k, _)| !matches!(k, Some(c) if (0..=max_class).contains(c)))
                .map(|(_, v)| v)
                .sum();
            let _ = writeln!(s, ",{other}");
        }
        s
    }
}

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub prefix: String,
    pub total: usize,
    pub perfect: usize,
    pub correct: usize,
    pub malformed: usize,
    pub loss_sum: f64,
    pub loss_tokens: usize,
    pub classes: BTreeMap<i64, ClassCount>,
    pub eval_metric_sums: Vec<f64>,
    pub error_metric_sums: Vec<f64>,
    pub histogram: PredHistogram,
}

impl EvalReport {
    pub fn solved(&self) -> usize {
        self.perfect + self.correct
    }

    /// Named metrics, keyed `<prefix>_arithmetic_<name>`.
    pub fn metrics(&self) -> BTreeMap<String, f64> {
        let p = &self.prefix;
        let n = self.total.max(1) as f64;
        let mut m = BTreeMap::new();
        let xe = if self.loss_tokens == 0 {
            0.0
        } else {
            self.loss_sum / self.loss_tokens as f64
        };
        m.insert(format!("{p}_arithmetic_xe_loss"), xe);
        m.insert(format!("{p}_arithmetic_perfect"), self.perfect as f64 / n);
        m.insert(format!("{p}_arithmetic_correct"), self.correct as f64 / n);
        m.insert(format!("{p}_arithmetic_acc"), self.solved() as f64 / n);
        for (c, cc) in &self.classes {
            m.insert(
                format!("{p}_arithmetic_acc_{c}"),
                cc.correct as f64 / cc.total.max(1) as f64,
            );
        }
        for (i, s) in self.eval_metric_sums.iter().enumerate() {
            m.insert(format!("{p}_arithmetic_acc_eval{}", i + 1), s / n);
        }
        for (i, s) in self.error_metric_sums.iter().enumerate() {
            m.insert(format!("{p}_arithmetic_acc_error{}", i + 1), s / n);
        }
        m
    }

    /// The summary lines printed after a set is evaluated.
    pub fn summary_lines(&self) -> Vec<String> {
        let mut out = vec![format!(
            "{}/{} ({:.2}%) examples were evaluated correctly.",
            self.solved(),
            self.total,
            100.0 * self.solved() as f64 / self.total.max(1) as f64
        )];
        for (c, cc) in &self.classes {
            out.push(format!(
                "{c}: {} / {} ({:.2}%)",
                cc.correct,
                cc.total,
                100.0 * cc.correct as f64 / cc.total.max(1) as f64
            ));
        }
        out
    }
}

/// Where prediction records go.
pub trait PredictionSink {
    fn record(&mut self, line: &str) -> std::io::Result<()>;
}

impl<W: Write> PredictionSink for W {
    fn record(&mut self, line: &str) -> std::io::Result<()> {
        self.write_all(line.as_bytes())?;
        self.write_all(b"\n")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Token(#[from] crate::tokenizer::TokenError),
    #[error("cannot write predictions: {0}")]
    Io(#[from] std::io::Error),
}

fn outcome_name(o: Outcome) -> &'static str {
    match o {
        Outcome::Perfect => "perfect",
        Outcome::Correct => "correct",
        Outcome::Wrong => "wrong",
        Outcome::Malformed => "malformed",
    }
}

/// Evaluates one set. Batch progress and the summary go to `log`; the
/// model is only read.
pub fn evaluate_dataset<T: Scalar>(
    model: &mut Transformer<T>,
    set: &ExampleSet,
    prefix: &str,
    vocab: &Vocabulary,
    task: Option<&TaskSpec>,
    cfg: &EvalConfig,
    log: &mut dyn FnMut(&str),
    mut sink: Option<&mut dyn PredictionSink>,
) -> Result<EvalReport, EvalError> {
    let eos = vocab.eos_id();
    let mut rep = EvalReport {
        prefix: prefix.to_string(),
        ..Default::default()
    };
    if let Some(t) = task {
        rep.eval_metric_sums = vec![0.0; t.n_eval_metrics];
        rep.error_metric_sums = vec![0.0; t.n_error_metrics];
    }
    let total = set.len();
    let use_beam = cfg.beam_search && cfg.beam_size > 1;
    for chunk in set.examples.chunks(cfg.batch_size.max(1)) {
        let batch = make_batch(chunk, vocab)?;
        let loss = model.loss(&batch)?;
        rep.loss_sum += loss.loss_sum;
        rep.loss_tokens += loss.tokens;
        let inputs = Inputs {
            ids: &batch.input_ids,
            batch: batch.size,
            width: batch.input_width,
            lengths: &batch.input_lengths,
        };
        let top = greedy_decode(model, inputs, eos, cfg.max_output_len)?;
        let mut n_perfect = 0;
        let mut n_solved = 0;
        for (i, ex) in chunk.iter().enumerate() {
            let beams = if use_beam {
                let row = &batch.input_row(i)[..batch.input_lengths[i]];
                beam_search(model, row, eos, cfg.beam_size, cfg.max_output_len)?
            } else {
                vec![top[i].clone()]
            };
            let first = &beams[0];
            let first_tokens = vocab.ids_to_tokens(&first.tokens)?;
            let ref_t = ex.output.tokens();
            let inp = ex.input.tokens();
            let top_check =
                check_prediction(first_tokens.tokens(), first.finished, ref_t, inp, task);
            let mut outcome = top_check.outcome;
            let mut chosen = top_check.clone();
            if outcome != Outcome::Perfect && use_beam {
                for h in &beams[1..] {
                    let toks = vocab.ids_to_tokens(&h.tokens)?;
                    let c = check_prediction(toks.tokens(), h.finished, ref_t, inp, task);
                    if matches!(c.outcome, Outcome::Perfect | Outcome::Correct) {
                        outcome = Outcome::Correct;
                        chosen = Check { outcome, ..c };
                        break;
                    }
                }
            }
            match outcome {
                Outcome::Perfect => {
                    rep.perfect += 1;
                    n_perfect += 1;
                }
                Outcome::Correct => rep.correct += 1,
                Outcome::Malformed => rep.malformed += 1,
                Outcome::Wrong => {}
            }
            let solved = matches!(outcome, Outcome::Perfect | Outcome::Correct);
            n_solved += usize::from(solved);
            for (acc, v) in rep.eval_metric_sums.iter_mut().zip(&chosen.eval_metrics) {
                *acc += v;
            }
            for (acc, v) in rep.error_metric_sums.iter_mut().zip(&chosen.error_metrics) {
                *acc += v;
            }
            let class = example_class(ex, task, cfg.max_class);
            if let Some(c) = class {
                let cc = rep.classes.entry(c).or_default();
                cc.total += 1;
                cc.correct += usize::from(solved);
                if cfg.export_pred {
                    let pc = if first.finished {
                        prediction_class(first_tokens.tokens(), ex, task, cfg.max_class)
                    } else {
                        None
                    };
                    rep.histogram.add(c, pc);
                }
            }
            if cfg.export != ExportLevel::Off || cfg.print_predictions {
                let mut line = format!(
                    "{}\t{}\t{}\t{}",
                    ex.input,
                    ex.output,
                    first_tokens,
                    outcome_name(outcome)
                );
                let with_beam = use_beam
                    && (cfg.export == ExportLevel::WithPerfectBeam
                        || (cfg.export == ExportLevel::WithoutPerfectBeam
                            && outcome != Outcome::Perfect));
                if with_beam {
                    for h in &beams {
                        let toks = vocab.ids_to_tokens(&h.tokens)?;
                        let _ = write!(line, "\t{:.6} {}", h.normalized(), toks);
                    }
                }
                if cfg.print_predictions {
                    log(&line);
                }
                if cfg.export != ExportLevel::Off {
                    if let Some(s) = sink.as_mut() {
                        s.record(&line)?;
                    }
                }
            }
        }
        rep.total += chunk.len();
        log(&format!(
            "({}/{}) Found {}/{} valid top-1 predictions. Generating solutions ...",
            rep.total,
            total,
            n_perfect,
            chunk.len()
        ));
        log(&format!(
            "    Found {}/{} solutions in beam hypotheses.",
            n_solved,
            chunk.len()
        ));
    }
    for line in rep.summary_lines() {
        log(&line);
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::{Operation, RngStream};
    use crate::model::{ModelConfig, StackConfig};

    fn toks(s: &str) -> Vec<String> {
        TokenSeq::parse(s).0
    }

    #[test]
    fn check_outcomes() {
        let mut t = TaskSpec::new(Operation::Gcd);
        t.base = 10;
        let p = toks("+ 1 0 + 1 2");
        assert_eq!(
            check_prediction(&toks("+ 2"), true, &toks("+ 2"), &p, Some(&t)).outcome,
            Outcome::Perfect
        );
        assert_eq!(
            check_prediction(&toks("+ 4"), true, &toks("+ 2"), &p, Some(&t)).outcome,
            Outcome::Wrong
        );
        assert_eq!(
            check_prediction(&toks("+ + 1 -"), true, &toks("+ 2"), &p, Some(&t)).outcome,
            Outcome::Malformed
        );
        assert_eq!(
            check_prediction(&toks("+ 2"), false, &toks("+ 2"), &p, Some(&t)).outcome,
            Outcome::Malformed
        );
        assert_eq!(
            check_prediction(&toks("3"), true, &toks("2"), &toks("+ 1"), None).outcome,
            Outcome::Wrong
        );
    }

    #[test]
    fn data_classes_and_histogram() {
        let ex = Example::new(TokenSeq::parse("+ 1 + 0"), TokenSeq::parse("2"));
        assert_eq!(example_class(&ex, None, 100), Some(2));
        let ex = Example::new(TokenSeq::parse("+ 1"), TokenSeq::parse("+ 2"));
        assert_eq!(example_class(&ex, None, 100), None);
        let mut h = PredHistogram::default();
        h.add(1, Some(1));
        h.add(1, None);
        h.add(2, Some(7));
        assert_eq!(h.row_total(1), 2);
        let csv = h.to_csv(2);
        assert_eq!(csv, "class,0,1,2,other\n1,0,1,0,1\n2,0,0,0,1\n");
    }

    fn tiny(vocab: usize) -> Transformer<f64> {
        let mut c = ModelConfig::new(vocab);
        c.encoder = StackConfig::new(1, 16, 2);
        c.decoder = StackConfig::new(1, 16, 2);
        c.max_positions = 32;
        Transformer::new(c, &mut RngStream::new(2, 0, 0)).unwrap()
    }

    #[test]
    fn greedy_respects_length_cap() {
        let m = tiny(12);
        let ids = [3u32, 5, 6, 3, 7];
        let inp = Inputs {
            ids: &ids,
            batch: 1,
            width: 5,
            lengths: &[5],
        };
        let h = &greedy_decode(&m, inp, 1, 3).unwrap()[0];
        assert!(h.tokens.len() <= 1);
        assert!(h.tokens.len() + usize::from(h.finished) <= 2);
    }

    #[test]
    fn beam_one_is_greedy_and_beams_are_distinct() {
        let m = tiny(12);
        let mut rng = RngStream::new(8, 0, 0);
        for _ in 0..30 {
            let n = 2 + rng.index(6);
            let ids: Vec<u32> = (0..n).map(|_| 3 + rng.index(9) as u32).collect();
            let inp = Inputs {
                ids: &ids,
                batch: 1,
                width: n,
                lengths: &[n],
            };
            let g = greedy_decode(&m, inp, 1, 8).unwrap().remove(0);
            let b = beam_search(&m, &ids, 1, 1, 8).unwrap();
            assert_eq!(b.len(), 1);
            assert_eq!(b[0].tokens, g.tokens);
            assert_eq!(b[0].finished, g.finished);
            let b4 = beam_search(&m, &ids, 1, 4, 8).unwrap();
            for i in 0..b4.len() {
                for j in i + 1..b4.len() {
                    assert_ne!(b4[i].tokens, b4[j].tokens);
                }
            }
        }
    }

    #[test]
    fn beam_three_top_score_not_below_greedy() {
        let m = tiny(12);
        let mut rng = RngStream::new(9, 0, 0);
        let mut below = 0;
        for _ in 0..200 {
            let n = 2 + rng.index(6);
            let ids: Vec<u32> = (0..n).map(|_| 3 + rng.index(9) as u32).collect();
            let inp = Inputs {
                ids: &ids,
                batch: 1,
                width: n,
                lengths: &[n],
            };
            let g = greedy_decode(&m, inp, 1, 8).unwrap().remove(0);
            let b = beam_search(&m, &ids, 1, 3, 8).unwrap();
            if g.finished && b[0].normalized() < g.normalized() - 1e-12 {
                below += 1;
            }
        }
        assert_eq!(below, 0);
    }
}
