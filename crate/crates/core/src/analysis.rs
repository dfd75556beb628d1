//! Attention-mass profiles and vision-token heatmaps.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interventions::MaskSpec;
use crate::layout::{Prompt, SequenceLayout};
use crate::model::{Capture, ForwardTrace, Model};
use crate::taskgen::{Example, GridParams};
use crate::tensor::Tensor;
use crate::workers::par_map;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prefill,
    Decode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Ins,
    Res,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Vis,
    PrePlusIns,
    Res,
}

impl Source {
    pub const ALL: [Source; 3] = [Source::Vis, Source::PrePlusIns, Source::Res];
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Vis => "vis",
            Source::PrePlusIns => "pre_plus_ins",
            Source::Res => "res",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MassMode {
    /// Targets are the instruction tokens of the prompt pass.
    PrefillIns,
    /// Targets are generated tokens, one step at a time.
    DecodeRes,
}

/// Positions of `source` in a sequence whose last position is `last`.
pub fn source_positions(layout: &SequenceLayout, source: Source, last: usize) -> Vec<usize> {
    let upto = |r: Range<usize>| r.start..r.end.min(last + 1);
    match source {
        Source::Vis => upto(layout.vis_span.clone()).collect(),
        Source::PrePlusIns => upto(layout.pre_span.clone()).chain(upto(layout.ins_span.clone())).collect(),
        Source::Res => (layout.res_start..=last).collect(),
    }
}

/// Head-averaged mass that `target_rows` direct at `source_cols` of one
/// `[heads, rows, keys]` weight tensor, normalized by the number of targets.
pub fn mass_from_weights(weights: &Tensor, target_rows: &[usize], source_cols: &[usize]) -> Result<f64> {
    if target_rows.is_empty() {
        return Err(Error::Eval("empty target set".into()));
    }
    let shape = weights.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("attention weights {:?}, expected [heads, rows, keys]", shape)));
    }
    let (heads, rows, keys) = (shape[0], shape[1], shape[2]);
    if target_rows.iter().any(|&r| r >= rows) || source_cols.iter().any(|&c| c >= keys) {
        return Err(Error::Shape("target/source index outside attention grid".into()));
    }
    let mut total = 0.0f64;
    for h in 0..heads {
        for &r in target_rows {
            let row = &weights.data()[(h * rows + r) * keys..(h * rows + r + 1) * keys];
            for &c in source_cols {
                total += row[c] as f64;
            }
        }
    }
    Ok(total / heads as f64 / target_rows.len() as f64)
}

/// Mass from the target positions to the source positions at (1-based)
/// `layer`. Source positions the targets could not attend to contribute 0.
pub fn attention_mass(
    trace: &ForwardTrace,
    layer: usize,
    targets: &[usize],
    sources: &[usize],
) -> Result<f64> {
    let (attn, keys) = match (&trace.attention, &trace.key_positions) {
        (Some(a), Some(k)) => (a, k),
        _ => return Err(Error::Eval("attention was not captured".into())),
    };
    if layer == 0 || layer > attn.len() {
        return Err(Error::Eval(format!("layer {layer} outside 1..={}", attn.len())));
    }
    let rows = targets
        .iter()
        .map(|p| {
            trace
                .positions
                .iter()
                .position(|q| q == p)
                .ok_or_else(|| Error::Eval(format!("target position {p} not among trace queries")))
        })
        .collect::<Result<Vec<_>>>()?;
    let key_pos = &keys[layer - 1];
    let cols: Vec<usize> = sources
        .iter()
        .filter_map(|p| key_pos.iter().position(|k| k == p))
        .collect();
    mass_from_weights(&attn[layer - 1], &rows, &cols)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceProfile {
    pub source: Source,
    /// Per layer; for decode mode the mean over steps.
    pub per_layer: Vec<f64>,
    /// Decode mode only: `[step][layer]`.
    pub per_step: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MassProfile {
    pub stage: Stage,
    pub target: Target,
    pub sources: Vec<SourceProfile>,
}

impl MassProfile {
    pub fn source(&self, s: Source) -> Option<&SourceProfile> {
        self.sources.iter().find(|p| p.source == s)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,source,value,step\n");
        for sp in &self.sources {
            for (l, v) in sp.per_layer.iter().enumerate() {
                out.push_str(&format!("{},{},{},\n", l + 1, sp.source, v));
            }
            if let Some(steps) = &sp.per_step {
                for (t, row) in steps.iter().enumerate() {
                    for (l, v) in row.iter().enumerate() {
                        out.push_str(&format!("{},{},{},{}\n", l + 1, sp.source, v, t + 1));
                    }
                }
            }
        }
        out
    }

    pub fn sidecar(&self) -> serde_json::Value {
        serde_json::json!({
            "stage": self.stage,
            "target": self.target,
            "sources": self.sources.iter().map(|s| s.source.to_string()).collect::<Vec<_>>(),
            "num_layers": self.sources.first().map_or(0, |s| s.per_layer.len()),
        })
    }
}

/// Layer-wise attention mass for one prompt.
pub fn mass_profile(
    model: &Model,
    prompt: &Prompt,
    mode: MassMode,
    sources: &[Source],
    mask: Option<MaskSpec>,
    max_new: usize,
) -> Result<MassProfile> {
    let layout = prompt.layout();
    let num_layers = model.config().num_layers;
    match mode {
        MassMode::PrefillIns => {
            if layout.ins_span.is_empty() {
                return Err(Error::Eval("prompt has no instruction tokens".into()));
            }
            let trace = model.forward_prompt(prompt, mask, Capture::ATTENTION)?;
            let targets: Vec<usize> = layout.ins_span.clone().collect();
            let last = layout.prompt_len() - 1;
            let sources = sources
                .iter()
                .map(|&s| {
                    let src = source_positions(&layout, s, last);
                    let per_layer = (1..=num_layers)
                        .map(|l| attention_mass(&trace, l, &targets, &src))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(SourceProfile { source: s, per_layer, per_step: None })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(MassProfile { stage: Stage::Prefill, target: Target::Ins, sources })
        }
        MassMode::DecodeRes => {
            if max_new == 0 {
                return Err(Error::Eval("decode mode needs at least one generated token".into()));
            }
            let decoded = model.decode_greedy(prompt, mask, max_new, Capture::ATTENTION)?;
            let sources = sources
                .iter()
                .map(|&s| {
                    let per_step = decoded
                        .steps
                        .iter()
                        .map(|step| {
                            let pos = step.positions[0];
                            let src = source_positions(&layout, s, pos);
                            (1..=num_layers)
                                .map(|l| attention_mass(step, l, &[pos], &src))
                                .collect::<Result<Vec<_>>>()
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let steps = per_step.len() as f64;
                    let per_layer = (0..num_layers)
                        .map(|l| per_step.iter().map(|r| r[l]).sum::<f64>() / steps)
                        .collect();
                    Ok(SourceProfile { source: s, per_layer, per_step: Some(per_step) })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(MassProfile { stage: Stage::Decode, target: Target::Res, sources })
        }
    }
}

/// Attention received by each vision token, laid out on the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub rows: usize,
    pub cols: usize,
    pub layer: usize,
    pub head: Option<usize>,
    /// Raw mass per cell, row-major.
    pub values: Vec<f64>,
    /// `values` divided by their maximum (all zeros if the maximum is 0).
    pub normalized: Vec<f64>,
}

impl Heatmap {
    /// Cell with the largest value; ties go to the first in row-major order.
    pub fn argmax_cell(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        (best / self.cols, best % self.cols)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..self.rows {
            let row: Vec<String> =
                self.normalized[r * self.cols..(r + 1) * self.cols].iter().map(|v| format!("{v}")).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Plain-text PGM (P2) image with each cell drawn as a `scale × scale` block.
    pub fn to_pgm(&self, scale: usize) -> String {
        let scale = scale.max(1);
        let (w, h) = (self.cols * scale, self.rows * scale);
        let mut out = format!("P2\n{w} {h}\n255\n");
        for y in 0..h {
            let line: Vec<String> = (0..w)
                .map(|x| {
                    let v = self.normalized[(y / scale) * self.cols + x / scale];
                    format!("{}", (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                })
                .collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Heatmap of attention from `query_positions` to the vision span at
/// `layer`, for one head or averaged over heads.
pub fn vision_heatmap(
    trace: &ForwardTrace,
    layout: &SequenceLayout,
    layer: usize,
    head: Option<usize>,
    query_positions: &[usize],
    grid: (usize, usize),
) -> Result<Heatmap> {
    let (rows, cols) = grid;
    if layout.num_vision() == 0 {
        return Err(Error::Eval("no vision tokens".into()));
    }
    if rows * cols != layout.num_vision() {
        return Err(Error::Shape(format!(
            "grid {rows}x{cols} does not match {} vision tokens",
            layout.num_vision()
        )));
    }
    let attn = trace
        .attention
        .as_ref()
        .ok_or_else(|| Error::Eval("attention was not captured".into()))?;
    if layer == 0 || layer > attn.len() {
        return Err(Error::Eval(format!("layer {layer} outside 1..={}", attn.len())));
    }
    let w = &attn[layer - 1];
    let (heads, nq, nk) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if let Some(h) = head {
        if h >= heads {
            return Err(Error::Eval(format!("head {h} outside 0..{heads}")));
        }
    }
    if query_positions.is_empty() {
        return Err(Error::Eval("empty query set".into()));
    }
    let keys = &trace.key_positions.as_ref().expect("captured with attention")[layer - 1];
    let q_rows = query_positions
        .iter()
        .map(|p| {
            trace
                .positions
                .iter()
                .position(|q| q == p)
                .ok_or_else(|| Error::Eval(format!("query position {p} not in trace")))
        })
        .collect::<Result<Vec<_>>>()?;
    let head_set: Vec<usize> = match head {
        Some(h) => vec![h],
        None => (0..heads).collect(),
    };
    let values: Vec<f64> = layout
        .vis_span
        .clone()
        .map(|p| match keys.iter().position(|k| *k == p) {
            None => 0.0,
            Some(c) => {
                let mut sum = 0.0;
                for &h in &head_set {
                    for &r in &q_rows {
                        sum += w.data()[(h * nq + r) * nk + c] as f64;
                    }
                }
                sum / head_set.len() as f64 / q_rows.len() as f64
            }
        })
        .collect();
    let max = values.iter().copied().fold(0.0, f64::max);
    let normalized = values.iter().map(|v| if max > 0.0 { v / max } else { 0.0 }).collect();
    Ok(Heatmap { rows, cols, layer, head, values, normalized })
}

/// Head- and layer-averaged heatmap of the instruction tokens' attention to
/// the grid, over `layers`.
pub fn grounded_heatmap(model: &Model, example: &Example, grid: &GridParams, layers: Range<usize>) -> Result<Heatmap> {
    let trace = model.forward_prompt(&example.prompt, None, Capture::ATTENTION)?;
    let layout = example.prompt.layout();
    let queries: Vec<usize> = layout.ins_span.clone().collect();
    if layers.is_empty() {
        return Err(Error::Eval("empty layer range".into()));
    }
    let mut acc: Option<Heatmap> = None;
    let n = layers.len() as f64;
    for l in layers.clone() {
        let m = vision_heatmap(&trace, &layout, l, None, &queries, (grid.grid_size, grid.grid_size))?;
        match acc.as_mut() {
            None => acc = Some(m),
            Some(a) => a.values.iter_mut().zip(&m.values).for_each(|(x, y)| *x += y),
        }
    }
    let mut out = acc.expect("nonempty range");
    out.values.iter_mut().for_each(|v| *v /= n);
    let max = out.values.iter().copied().fold(0.0, f64::max);
    out.normalized = out.values.iter().map(|v| if max > 0.0 { v / max } else { 0.0 }).collect();
    out.layer = layers.start;
    Ok(out)
}

/// Fraction of grounded examples whose heatmap argmax is the queried cell.
pub fn localization_rate(
    model: &Model,
    examples: &[Example],
    grid: &GridParams,
    layers: Range<usize>,
    workers: usize,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Eval("empty split".into()));
    }
    let hits = par_map(workers, examples, |e| -> Result<bool> {
        let cell = e.query_cell.ok_or_else(|| Error::Eval("example has no query cell".into()))?;
        Ok(grounded_heatmap(model, e, grid, layers.clone())?.argmax_cell() == cell)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / examples.len() as f64)
}

/// Mean over `examples` of the prefill instruction-to-vision mass averaged
/// over `layers`; also returns per-example correctness for subsetting.
pub fn late_vision_mass(
    model: &Model,
    examples: &[Example],
    answer_vocab: &[u32],
    layers: Range<usize>,
    workers: usize,
) -> Result<Vec<(f64, bool)>> {
    if layers.is_empty() || layers.start == 0 || layers.end > model.config().num_layers + 1 {
        return Err(Error::Eval(format!("bad layer range {layers:?}")));
    }
    par_map(workers, examples, |e| -> Result<(f64, bool)> {
        let trace = model.forward_prompt(&e.prompt, None, Capture::ATTENTION)?;
        let layout = e.prompt.layout();
        let targets: Vec<usize> = layout.ins_span.clone().collect();
        let src: Vec<usize> = layout.vis_span.clone().collect();
        let mut total = 0.0;
        for l in layers.clone() {
            total += attention_mass(&trace, l, &targets, &src)?;
        }
        let pred = crate::eval::pick_answer(trace.last_logits(), answer_vocab);
        Ok((total / layers.len() as f64, pred == e.answer))
    })
    .into_iter()
    .collect()
}
