//! Depth-controlled vision-token masking.
//!
//! With cut layer `k`, layers `l < k` attend normally; layers `l >= k` never
//! attend to a key at a vision position. Vision rows still run as queries;
//! nothing downstream reads them. `k = L + 1` disables the mask.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::layout::{Prompt, SequenceLayout};
use crate::model::{check_mask, logits_of, run_layers, Capture, ForwardTrace, KvCache, Model};
use crate::taskgen::Example;
use crate::tensor::AttnMask;
use crate::workers::par_map;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskSpec {
    pub cut_layer: usize,
}

impl MaskSpec {
    pub fn new(cut_layer: usize) -> Self {
        MaskSpec { cut_layer }
    }

    /// The no-op mask for an `num_layers`-layer model.
    pub fn none(num_layers: usize) -> Self {
        MaskSpec { cut_layer: num_layers + 1 }
    }

    /// Whether vision keys are banned at (1-based) layer `l`.
    pub fn bans(&self, layer: usize) -> bool {
        layer >= self.cut_layer
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.cut_layer == 0 || self.cut_layer > num_layers + 1 {
            return Err(Error::CutLayer { k: self.cut_layer, max: num_layers + 1 });
        }
        Ok(())
    }
}

/// Attention mask of layer `layer` for a full sequence of length `n`.
pub fn apply_mask(layout: &SequenceLayout, n: usize, mask: MaskSpec, layer: usize) -> AttnMask {
    let pos: Vec<usize> = (0..n).collect();
    AttnMask::from_positions(&pos, &pos, |p| mask.bans(layer) && layout.is_vision(p))
}

/// Masked forward computed by dropping vision rows entirely from layer `k`
/// on. Returns logits for the non-vision positions only.
pub fn prune_equivalent_forward(
    model: &Model,
    prompt: &Prompt,
    mask: MaskSpec,
) -> Result<ForwardTrace> {
    let cfg = model.config();
    check_mask(cfg, Some(mask))?;
    if mask.cut_layer > cfg.num_layers {
        return Err(Error::CutLayer { k: mask.cut_layer, max: cfg.num_layers });
    }
    let (x0, layout) = model.embed(prompt)?;
    let n = x0.rows();
    let all: Vec<usize> = (0..n).collect();
    let mut cache = KvCache::new(cfg.num_layers);
    let k = mask.cut_layer;
    let early = run_layers(
        cfg,
        model.params(),
        x0,
        &all,
        &mut cache,
        &layout,
        Some(mask),
        1..k,
        Capture::NONE,
        None,
    )?;
    let keep = layout.non_vision(n);
    let kept_rows: Vec<usize> = keep.clone();
    let survivors = early.x.select_rows(&kept_rows);
    let late = run_layers(
        cfg,
        model.params(),
        survivors,
        &keep,
        &mut cache,
        &layout,
        Some(mask),
        k..cfg.num_layers + 1,
        Capture::NONE,
        None,
    )?;
    Ok(ForwardTrace {
        positions: keep,
        logits: logits_of(model.params(), &late.x)?,
        attention: None,
        key_positions: None,
        hidden_norms: None,
    })
}

/// Max absolute logit difference at non-vision positions between the
/// canonical masked forward and the pruned forward. Errors beyond `tol`.
pub fn verify_prune_equivalence(
    model: &Model,
    prompt: &Prompt,
    mask: MaskSpec,
    tol: f64,
) -> Result<f64> {
    let canonical = model.forward_prompt(prompt, Some(mask), Capture::NONE)?;
    let pruned = prune_equivalent_forward(model, prompt, mask)?;
    let mut worst = 0.0f64;
    for (i, &p) in pruned.positions.iter().enumerate() {
        let c = canonical.logits_at(p).expect("canonical covers every position");
        for (a, b) in c.iter().zip(pruned.logits.row(i)) {
            worst = worst.max((*a as f64 - *b as f64).abs());
        }
    }
    if worst >= tol {
        return Err(Error::PruneMismatch { k: mask.cut_layer, diff: worst });
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub k: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepProfile {
    pub model_id: String,
    pub task_id: String,
    pub metric: String,
    pub num_layers: usize,
    pub seeds: Vec<u64>,
    pub points: Vec<SweepPoint>,
    /// False when some cut layer failed to evaluate.
    pub complete: bool,
    pub failure: Option<String>,
}

impl SweepProfile {
    pub fn score_at(&self, k: usize) -> Option<f64> {
        self.points.iter().find(|p| p.k == k).map(|p| p.score)
    }

    pub fn scores(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.score).collect()
    }

    /// True when there is exactly one point for every k in `1..=L+1`.
    pub fn is_dense(&self) -> bool {
        self.complete
            && self.points.len() == self.num_layers + 1
            && self.points.iter().enumerate().all(|(i, p)| p.k == i + 1)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,score\n");
        for p in &self.points {
            out.push_str(&format!("{},{}\n", p.k, p.score));
        }
        out
    }

    /// JSON sidecar for the CSV (everything but the points).
    pub fn sidecar(&self) -> serde_json::Value {
        serde_json::json!({
            "model_id": self.model_id,
            "task_id": self.task_id,
            "metric": self.metric,
            "num_layers": self.num_layers,
            "seeds": self.seeds,
            "complete": self.complete,
            "failure": self.failure,
        })
    }

    /// Rebuilds a profile from CSV rows plus its sidecar.
    pub fn from_csv(csv: &str, sidecar: &serde_json::Value) -> Result<Self> {
        let mut points = Vec::new();
        for (i, line) in csv.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let (k, s) = line
                .split_once(',')
                .ok_or_else(|| Error::Parse { line: i + 1, msg: "expected k,score".into() })?;
            let parse_err = |_| Error::Parse { line: i + 1, msg: format!("bad row `{line}`") };
            points.push(SweepPoint {
                k: k.trim().parse().map_err(parse_err)?,
                score: s.trim().parse().map_err(|_| Error::Parse {
                    line: i + 1,
                    msg: format!("bad row `{line}`"),
                })?,
            });
        }
        let field = |k: &str| sidecar.get(k).cloned().unwrap_or(serde_json::Value::Null);
        Ok(SweepProfile {
            model_id: field("model_id").as_str().unwrap_or_default().to_string(),
            task_id: field("task_id").as_str().unwrap_or_default().to_string(),
            metric: field("metric").as_str().unwrap_or(crate::eval::METRIC).to_string(),
            num_layers: field("num_layers")
                .as_u64()
                .map(|v| v as usize)
                .unwrap_or(points.len().saturating_sub(1)),
            seeds: serde_json::from_value(field("seeds")).unwrap_or_default(),
            complete: field("complete").as_bool().unwrap_or(true),
            failure: field("failure").as_str().map(str::to_string),
            points,
        })
    }
}

/// Cut layers `1, 1+stride, …` plus `L+1`.
pub fn sweep_k_values(num_layers: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    let mut ks: Vec<usize> = (1..=num_layers).step_by(stride).collect();
    ks.push(num_layers + 1);
    ks
}

#[derive(Clone, Debug)]
pub struct SweepRequest<'a> {
    pub model_id: &'a str,
    pub task_id: &'a str,
    pub examples: &'a [Example],
    pub answer_vocab: &'a [u32],
    pub k_values: Vec<usize>,
    pub seeds: Vec<u64>,
    pub workers: usize,
}

/// Scores `examples` once per cut layer. Evaluation failures stop the sweep
/// and return the points gathered so far with `complete = false`.
pub fn mask_sweep(model: &Model, req: &SweepRequest<'_>) -> Result<SweepProfile> {
    if req.examples.is_empty() {
        return Err(Error::Eval("sweep needs a nonempty split".into()));
    }
    let num_layers = model.config().num_layers;
    for &k in &req.k_values {
        MaskSpec::new(k).validate(num_layers)?;
    }
    let results = par_map(req.workers, &req.k_values, |&k| {
        accuracy(model, req.examples, req.answer_vocab, Some(MaskSpec::new(k)), 1)
    });
    let mut points = Vec::new();
    let mut failure = None;
    for (k, r) in req.k_values.iter().zip(results) {
        match r {
            Ok(score) => points.push(SweepPoint { k: *k, score }),
            Err(e) => {
                failure = Some(format!("k={k}: {e}"));
                break;
            }
        }
    }
    Ok(SweepProfile {
        model_id: req.model_id.to_string(),
        task_id: req.task_id.to_string(),
        metric: crate::eval::METRIC.to_string(),
        num_layers,
        seeds: req.seeds.clone(),
        complete: failure.is_none(),
        failure,
        points,
    })
}
