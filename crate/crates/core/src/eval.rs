//! Exact-match evaluation and score comparison.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interventions::MaskSpec;
use crate::model::{Capture, Model};
use crate::taskgen::{Example, Split, Task};
use crate::workers::par_map;

pub const METRIC: &str = "exact_match";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: u64,
    pub predicted: u32,
    pub gold: u32,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub model_digest: String,
    pub task_id: String,
    pub task_digest: String,
    pub split: Split,
    pub metric: String,
    pub mask_k: Option<usize>,
    pub score: f64,
    pub n_examples: usize,
    pub per_example: Option<Vec<ExampleRecord>>,
    pub seed: u64,
    pub timestamp: Option<String>,
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub workers: usize,
    pub seed: u64,
    pub record_examples: bool,
    /// Omit the timestamp so reports are byte-reproducible.
    pub deterministic: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { workers: 1, seed: 0, record_examples: true, deterministic: true }
    }
}

/// Greedy answer restricted to `answer_vocab` (ties go to the earlier entry).
pub fn predict(
    model: &Model,
    example: &Example,
    answer_vocab: &[u32],
    mask: Option<MaskSpec>,
) -> Result<u32> {
    let trace = model.forward_prompt(&example.prompt, mask, Capture::NONE)?;
    Ok(pick_answer(trace.last_logits(), answer_vocab))
}

pub(crate) fn pick_answer(logits: &[f32], answer_vocab: &[u32]) -> u32 {
    let mut best = answer_vocab[0];
    for &t in answer_vocab {
        if logits[t as usize] > logits[best as usize] {
            best = t;
        }
    }
    best
}

/// Predictions for every example, in input order.
pub fn predictions(
    model: &Model,
    examples: &[Example],
    answer_vocab: &[u32],
    mask: Option<MaskSpec>,
    workers: usize,
) -> Result<Vec<u32>> {
    if answer_vocab.is_empty() {
        return Err(Error::Eval("empty answer vocabulary".into()));
    }
    par_map(workers, examples, |e| predict(model, e, answer_vocab, mask))
        .into_iter()
        .collect()
}

pub fn accuracy(
    model: &Model,
    examples: &[Example],
    answer_vocab: &[u32],
    mask: Option<MaskSpec>,
    workers: usize,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Eval("empty split".into()));
    }
    let preds = predictions(model, examples, answer_vocab, mask, workers)?;
    let correct = preds.iter().zip(examples).filter(|(p, e)| **p == e.answer).count();
    Ok(correct as f64 / examples.len() as f64)
}

fn now_string() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    format!("{secs}")
}

pub fn evaluate(
    model: &Model,
    model_id: &str,
    model_digest: &str,
    task: &Task,
    split: Split,
    mask: Option<MaskSpec>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    task.check_compatible(model.config())?;
    let examples = task.split(split);
    if examples.is_empty() {
        return Err(Error::Eval(format!("split {split} of {} is empty", task.id)));
    }
    let preds = predictions(model, examples, &task.answer_vocab, mask, opts.workers)?;
    let records: Vec<ExampleRecord> = preds
        .iter()
        .zip(examples)
        .map(|(p, e)| ExampleRecord { id: e.id, predicted: *p, gold: e.answer, correct: *p == e.answer })
        .collect();
    let correct = records.iter().filter(|r| r.correct).count();
    Ok(EvalReport {
        model_id: model_id.to_string(),
        model_digest: model_digest.to_string(),
        task_id: task.id.clone(),
        task_digest: task.split_digest(split),
        split,
        metric: METRIC.to_string(),
        mask_k: mask.map(|m| m.cut_layer),
        score: correct as f64 / examples.len() as f64,
        n_examples: examples.len(),
        per_example: opts.record_examples.then_some(records),
        seed: opts.seed,
        timestamp: (!opts.deterministic).then(now_string),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model_id: String,
    pub model_digest: String,
    pub score: f64,
    pub delta: f64,
    pub best: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub task_id: String,
    pub split: Split,
    pub baseline: String,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model_id,score,delta,best\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.model_id, r.score, r.delta, r.best));
        }
        out
    }
}

/// Deltas of every report against the one whose `model_id` is `baseline`.
pub fn compare(reports: &[EvalReport], baseline: &str) -> Result<Comparison> {
    let first = reports.first().ok_or_else(|| Error::Eval("no reports to compare".into()))?;
    for r in reports {
        if r.task_id != first.task_id || r.split != first.split {
            return Err(Error::Eval(format!(
                "mixed tasks/splits: {}/{} vs {}/{}",
                r.task_id, r.split, first.task_id, first.split
            )));
        }
        if r.task_digest != first.task_digest {
            return Err(Error::DigestMismatch(format!(
                "report `{}` was computed on different data",
                r.model_id
            )));
        }
    }
    let base = reports
        .iter()
        .find(|r| r.model_id == baseline)
        .ok_or_else(|| Error::Eval(format!("baseline `{baseline}` not among reports")))?;
    let best = reports.iter().map(|r| r.score).fold(f64::NEG_INFINITY, f64::max);
    let rows = reports
        .iter()
        .map(|r| ComparisonRow {
            model_id: r.model_id.clone(),
            model_digest: r.model_digest.clone(),
            score: r.score,
            delta: r.score - base.score,
            best: r.score == best,
        })
        .collect();
    Ok(Comparison { task_id: first.task_id.clone(), split: first.split, baseline: baseline.into(), rows })
}
