//! Accuracy metrics, inference-time-multiplier arithmetic and the
//! ontology-inflation latency benchmark.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::{BeliefState, FrequencyTables};
use crate::data::{Corpus, OntologyStats};
use crate::embeddings::{EmbeddingError, EmbeddingSource, Vocabulary};
use crate::hiergen::{StateFeed, Tracker};
use crate::model::{Model, ModelError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{preds} predictions for {golds} gold states")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("statistic {0} is zero in the reference corpus")]
    ZeroDenominator(&'static str),
    #[error("inflation level {requested} is below the {base} slots already registered")]
    Inflation { requested: usize, base: usize },
    #[error("decode-call count changed across repeats at inflation level {0}")]
    UnstableCalls(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Joint domain, domain-slot and goal accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub jd: f64,
    pub jds: f64,
    pub jg: f64,
    pub turns: usize,
}

/// Exact-match accuracies over aligned turns. States compare as sets, so
/// ordering never affects the result.
pub fn metrics(preds: &[BeliefState], golds: &[BeliefState]) -> Result<MetricsReport, EvalError> {
    if preds.len() != golds.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    let (mut jd, mut jds, mut jg) = (0usize, 0usize, 0usize);
    for (p, g) in preds.iter().zip(golds) {
        if p.domain_set() == g.domain_set() {
            jd += 1;
            if p.domain_slot_set() == g.domain_slot_set() {
                jds += 1;
                if p == g {
                    jg += 1;
                }
            }
        }
    }
    let n = preds.len() as f64;
    let report = MetricsReport {
        jd: jd as f64 / n,
        jds: jds as f64 / n,
        jg: jg as f64 / n,
        turns: preds.len(),
    };
    assert!(report.jg <= report.jds && report.jds <= report.jd);
    Ok(report)
}

/// Predicts every turn of `corpus` and scores it against the gold labels.
pub fn evaluate(
    tracker: &Tracker<'_>,
    corpus: &Corpus,
    feed: StateFeed,
) -> Result<(MetricsReport, Vec<BeliefState>), EvalError> {
    let mut preds = Vec::with_capacity(corpus.num_turns());
    for d in &corpus.dialogues {
        for p in tracker.track_dialogue(&d.turns, feed)? {
            preds.push(p.state);
        }
    }
    let golds: Vec<BeliefState> = corpus.labels().cloned().collect();
    Ok((metrics(&preds, &golds)?, preds))
}

/// How inference count grows with the ontology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ItcClass {
    /// O(1): independent of slots and values.
    #[serde(rename = "o1")]
    Constant,
    /// O(n): one inference per slot.
    #[serde(rename = "on")]
    Linear,
    /// O(mn): one inference per slot-value pair.
    #[serde(rename = "omn")]
    Product,
}

/// Dataset quantities entering the multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItmInputs {
    pub t: f64,
    pub s: f64,
    pub n: f64,
    pub m: f64,
}

pub const WOZ2_STATS: ItmInputs = ItmInputs {
    t: 7.45,
    s: 11.24,
    n: 3.0,
    m: 99.0,
};

pub const MULTIWOZ_STATS: ItmInputs = ItmInputs {
    t: 13.68,
    s: 13.18,
    n: 35.0,
    m: 4510.0,
};

impl From<&OntologyStats> for ItmInputs {
    fn from(s: &OntologyStats) -> Self {
        ItmInputs {
            t: s.t,
            s: s.s,
            n: s.n_combined as f64,
            m: s.m as f64,
        }
    }
}

/// `K = h(t) h(s) h(n) h(m)` for moving from `d1` to `d2`.
pub fn itm(d1: &ItmInputs, d2: &ItmInputs, itc: ItcClass) -> Result<f64, EvalError> {
    let ratio = |name: &'static str, a: f64, b: f64| {
        if a == 0.0 {
            Err(EvalError::ZeroDenominator(name))
        } else {
            Ok(b / a)
        }
    };
    let mut k = ratio("t", d1.t, d2.t)? * ratio("s", d1.s, d2.s)?;
    if matches!(itc, ItcClass::Linear | ItcClass::Product) {
        k *= ratio("n", d1.n, d2.n)?;
    }
    if itc == ItcClass::Product {
        k *= ratio("m", d1.m, d2.m)?;
    }
    Ok(k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Registered slot counts to measure.
    pub inflation: Vec<usize>,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            inflation: vec![3, 35],
            repeats: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub slots: usize,
    pub table_size: usize,
    /// Mean per-turn latency over the repeats, in milliseconds.
    pub mean_ms: f64,
    pub std_ms: f64,
    /// `mean_ms` relative to the smallest inflation level.
    pub ratio: f64,
    /// Decode calls per full pass over the dialogues.
    pub decode_calls: usize,
    pub turns: usize,
    /// Per-turn latency averaged over the repeats.
    pub per_turn_ms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub repeats: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:>6} {:>6} {:>10} {:>10} {:>7} {:>7}\n",
            "slots", "table", "mean_ms", "std_ms", "ratio", "calls"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>6} {:>6} {:>10.3} {:>10.3} {:>7.3} {:>7}",
                r.slots, r.table_size, r.mean_ms, r.std_ms, r.ratio, r.decode_calls
            );
        }
        out
    }

    /// One row per (level, turn).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("slots,turn,latency_ms\n");
        for r in &self.rows {
            for (i, ms) in r.per_turn_ms.iter().enumerate() {
                let _ = writeln!(out, "{},{},{}", r.slots, i, ms);
            }
        }
        out
    }
}

/// Name of the `k`-th placeholder slot.
pub fn dummy_slot(k: usize) -> String {
    format!("dummy slot {k}")
}

/// `vocab` with placeholder slots added until `n` slots are registered.
pub fn inflate(vocab: &Vocabulary, n: usize) -> Result<Vocabulary, EvalError> {
    let base = vocab.slots.len();
    if n < base {
        return Err(EvalError::Inflation { requested: n, base });
    }
    let mut out = vocab.clone();
    let mut k = 0;
    while out.slots.len() < n {
        out.slots.insert(dummy_slot(k));
        k += 1;
    }
    Ok(out)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Per-turn latency at each inflation level, batch size 1, predicted-state
/// feed. One warm-up pass per level is excluded from the statistics.
pub fn benchmark_inference(
    model: &Model,
    vocab: &Vocabulary,
    source: &EmbeddingSource,
    freq: &FrequencyTables,
    corpus: &Corpus,
    cfg: &BenchConfig,
) -> Result<BenchReport, EvalError> {
    if corpus.num_turns() == 0 || cfg.inflation.is_empty() || cfg.repeats == 0 {
        return Err(EvalError::Empty);
    }
    let mut rows = Vec::with_capacity(cfg.inflation.len());
    for &n in &cfg.inflation {
        let table = inflate(vocab, n)?.build_table(source)?;
        let tracker = Tracker::new(model, &table, freq);
        let run = |timings: &mut Vec<f64>| -> Result<usize, EvalError> {
            let mut calls = 0;
            for d in &corpus.dialogues {
                let mut previous = BeliefState::new();
                for turn in &d.turns {
                    let inp = crate::hiergen::TurnInput::from_turn(turn, previous);
                    let start = Instant::now();
                    let pred = tracker.predict_turn(&inp)?;
                    timings.push(start.elapsed().as_secs_f64() * 1e3);
                    calls += pred.decode_calls();
                    previous = pred.state;
                }
            }
            Ok(calls)
        };
        let mut scratch = Vec::new();
        let decode_calls = run(&mut scratch)?;
        let turns = scratch.len();
        let mut run_means = Vec::with_capacity(cfg.repeats);
        let mut per_turn = vec![0.0; turns];
        for _ in 0..cfg.repeats {
            let mut timings = Vec::with_capacity(turns);
            if run(&mut timings)? != decode_calls {
                return Err(EvalError::UnstableCalls(n));
            }
            for (acc, t) in per_turn.iter_mut().zip(&timings) {
                *acc += t / cfg.repeats as f64;
            }
            run_means.push(timings.iter().sum::<f64>() / turns as f64);
        }
        let (mean_ms, std_ms) = mean_std(&run_means);
        rows.push(BenchRow {
            slots: n,
            table_size: table.len(),
            mean_ms,
            std_ms,
            ratio: 1.0,
            decode_calls,
            turns,
            per_turn_ms: per_turn,
        });
    }
    let smallest = rows
        .iter()
        .min_by_key(|r| r.slots)
        .map(|r| r.mean_ms)
        .unwrap_or(1.0);
    for r in &mut rows {
        r.ratio = r.mean_ms / smallest;
    }
    Ok(BenchReport {
        repeats: cfg.repeats,
        rows,
    })
}

#[cfg(test)]
mod tests;
