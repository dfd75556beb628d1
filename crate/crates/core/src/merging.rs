//! Layer-range interpolation of base-LM and MLLM weights, the coefficient
//! grid search, and the end-to-end plateau-guided pipeline.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::analysis::{late_vision_mass, localization_rate};
use crate::checkpoint::{layer_name, Checkpoint, CheckpointKind, Params, ATTN_SLOTS, LAYER_SLOTS};
use crate::ckpt_io::digest;
use crate::error::{Error, Result};
use crate::eval::{accuracy, pick_answer, predictions};
use crate::interventions::{mask_sweep, sweep_k_values, SweepProfile, SweepRequest};
use crate::model::{embed_generic, logits_of, run_layers, Capture, KvCache, Model};
use crate::plateau::{detect_from_profile, k0_candidates, PlateauConfig, PlateauReport};
use crate::runconfig::RunConfig;
use crate::taskgen::{Example, Task, TaskKind};
use crate::tensor::Tensor;
use crate::workers::par_map;

pub const LAMBDA_MAX: f64 = 1.5;

/// Default family-wise significance for replacing the unmerged vlm with a merge.
pub const DEFAULT_GUARD_ALPHA: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeSubset {
    /// Q/K/V/O projections only.
    AttnQkvo,
    /// Every per-layer tensor.
    AllBackbone,
}

impl MergeSubset {
    pub fn slots(self) -> &'static [&'static str] {
        match self {
            MergeSubset::AttnQkvo => &ATTN_SLOTS,
            MergeSubset::AllBackbone => &LAYER_SLOTS,
        }
    }
}

impl fmt::Display for MergeSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MergeSubset::AttnQkvo => "attn_qkvo",
            MergeSubset::AllBackbone => "all_backbone",
        })
    }
}

impl FromStr for MergeSubset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attn_qkvo" => Ok(MergeSubset::AttnQkvo),
            "all_backbone" => Ok(MergeSubset::AllBackbone),
            other => Err(Error::MergeSpec(format!("unknown subset `{other}`"))),
        }
    }
}

/// `W = λ₁·W_lm + λ₂·W_vlm` on layers `start..=end` for the tensors of `subset`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeSpec {
    pub start: usize,
    pub end: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub subset: MergeSubset,
}

impl MergeSpec {
    /// Merge of layers `k0..=L`.
    pub fn from_k0(k0: usize, num_layers: usize, lambda1: f64, lambda2: f64, subset: MergeSubset) -> Self {
        MergeSpec { start: k0, end: num_layers, lambda1, lambda2, subset }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.start == 0 || self.start > self.end || self.end > num_layers {
            return Err(Error::MergeSpec(format!(
                "layer range {}..={} not within 1..={num_layers}",
                self.start, self.end
            )));
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(0.0..=LAMBDA_MAX).contains(&v) {
                return Err(Error::MergeSpec(format!("{name} = {v} outside [0, {LAMBDA_MAX}]")));
            }
        }
        Ok(())
    }

    pub fn contains_layer(&self, layer: usize) -> bool {
        (self.start..=self.end).contains(&layer)
    }

    /// Whether tensor `name` is interpolated under this spec.
    pub fn merges(&self, name: &str) -> bool {
        match crate::checkpoint::parse_layer_name(name) {
            Some((l, slot)) => self.contains_layer(l) && self.subset.slots().contains(&slot),
            None => false,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.lambda1 == 0.0 && self.lambda2 == 1.0
    }

    pub fn to_run_config(&self) -> RunConfig {
        let mut c = RunConfig::new();
        c.set("merge.start", self.start);
        c.set("merge.end", self.end);
        c.set("merge.lambda1", self.lambda1);
        c.set("merge.lambda2", self.lambda2);
        c.set("merge.subset", self.subset);
        c
    }

    pub fn from_run_config(c: &RunConfig) -> Result<Self> {
        let req = |k: &str| c.get(k).ok_or_else(|| Error::MergeSpec(format!("missing key `{k}`")));
        let num = |k: &str| -> Result<f64> {
            req(k)?.parse().map_err(|_| Error::MergeSpec(format!("`{k}` is not a number")))
        };
        let int = |k: &str| -> Result<usize> {
            req(k)?.parse().map_err(|_| Error::MergeSpec(format!("`{k}` is not an integer")))
        };
        Ok(MergeSpec {
            start: int("merge.start")?,
            end: int("merge.end")?,
            lambda1: num("merge.lambda1")?,
            lambda2: num("merge.lambda2")?,
            subset: req("merge.subset")?.parse()?,
        })
    }
}

impl fmt::Display for MergeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "layers {}..={} {} lambda1={} lambda2={}",
            self.start, self.end, self.subset, self.lambda1, self.lambda2
        )
    }
}

/// `λ₁·a + λ₂·b`; a zero coefficient drops its term so identity and swap
/// coefficients reproduce the input bit for bit.
pub fn interpolate(a: f32, b: f32, lambda1: f32, lambda2: f32) -> f32 {
    if lambda1 == 0.0 {
        lambda2 * b
    } else if lambda2 == 0.0 {
        lambda1 * a
    } else {
        lambda1 * a + lambda2 * b
    }
}

fn check_pair(base: &Checkpoint, vlm: &Checkpoint) -> Result<()> {
    if base.config != vlm.config {
        return Err(Error::MergeSpec("base and vlm configs differ".into()));
    }
    if !vlm.has_projector() {
        return Err(Error::MergeSpec("vlm checkpoint has no projector".into()));
    }
    for (name, t) in &base.tensors {
        if name == "projector" {
            continue;
        }
        let v = vlm.tensor(name).map_err(|_| Error::MergeSpec(format!("`{name}` missing from vlm")))?;
        if v.shape() != t.shape() {
            return Err(Error::MergeSpec(format!("`{name}` shapes differ: {:?} vs {:?}", t.shape(), v.shape())));
        }
    }
    Ok(())
}

/// Interpolated copy of `vlm`. Tensors outside the spec (projector,
/// embeddings, unembedding, untouched layers and slots) are copied from `vlm`.
pub fn merge(base: &Checkpoint, vlm: &Checkpoint, spec: &MergeSpec) -> Result<Checkpoint> {
    spec.validate(vlm.config.num_layers)?;
    check_pair(base, vlm)?;
    let (l1, l2) = (spec.lambda1 as f32, spec.lambda2 as f32);
    let mut out = vlm.clone();
    out.kind = CheckpointKind::Merged;
    for l in spec.start..=spec.end {
        for slot in spec.subset.slots() {
            let name = layer_name(l, slot);
            let a = base.tensor(&name).map_err(|_| Error::MergeSpec(format!("`{name}` missing from base")))?;
            let t = out.tensor_mut(&name)?;
            for (w, x) in t.data_mut().iter_mut().zip(a.data()) {
                *w = interpolate(*x, *w, l1, l2);
            }
        }
    }
    out.meta.insert("base_digest".into(), digest(base)?);
    out.meta.insert("vlm_digest".into(), digest(vlm)?);
    out.meta.insert("merge_spec".into(), spec.to_string());
    Ok(out)
}

/// Coefficient pairs on a `0.1` lattice over `[0, max]`, optionally limited
/// to a band of `λ₁ + λ₂`. The identity pair is always kept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaGrid {
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub sum_range: Option<(f64, f64)>,
}

impl LambdaGrid {
    pub fn lattice(max_tenths: u32) -> Vec<f64> {
        (0..=max_tenths).map(|i| i as f64 / 10.0).collect()
    }

    /// Both coefficients over `[0, 1.5]` in steps of `0.1`.
    pub fn full() -> Self {
        LambdaGrid { lambda1: Self::lattice(15), lambda2: Self::lattice(15), sum_range: None }
    }

    pub fn single(lambda1: f64, lambda2: f64) -> Self {
        LambdaGrid { lambda1: vec![lambda1], lambda2: vec![lambda2], sum_range: None }
    }

    pub fn with_sum_range(mut self, lo: f64, hi: f64) -> Self {
        self.sum_range = Some((lo, hi));
        self
    }

    pub fn cells(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for &a in &self.lambda1 {
            for &b in &self.lambda2 {
                let keep = match self.sum_range {
                    None => true,
                    Some((lo, hi)) => {
                        let s = a + b;
                        (a == 0.0 && b == 1.0) || (s >= lo - 1e-9 && s <= hi + 1e-9)
                    }
                };
                if keep {
                    out.push((a, b));
                }
            }
        }
        out
    }

    pub fn contains_identity(&self) -> bool {
        self.cells().contains(&(0.0, 1.0))
    }
}

/// Scores a merge spec on a fixed set of examples.
pub trait CellEvaluator: Sync {
    /// Per-example correctness, in example order.
    fn correct(&self, spec: &MergeSpec) -> Result<Vec<bool>>;

    fn score(&self, spec: &MergeSpec) -> Result<f64> {
        let c = self.correct(spec)?;
        if c.is_empty() {
            return Err(Error::Eval("empty split".into()));
        }
        Ok(c.iter().filter(|x| **x).count() as f64 / c.len() as f64)
    }
}

/// Builds the merged checkpoint and evaluates it from scratch.
pub struct FullEvaluator<'a> {
    pub base: &'a Checkpoint,
    pub vlm: &'a Checkpoint,
    pub examples: &'a [Example],
    pub answer_vocab: &'a [u32],
}

impl CellEvaluator for FullEvaluator<'_> {
    fn correct(&self, spec: &MergeSpec) -> Result<Vec<bool>> {
        let merged = merge(self.base, self.vlm, spec)?;
        let preds = predictions(&Model::new(&merged)?, self.examples, self.answer_vocab, None, 1)?;
        Ok(preds.iter().zip(self.examples).map(|(p, e)| *p == e.answer).collect())
    }
}

/// Exploits that layers below `spec.start` are untouched: the vlm hidden
/// states at every layer boundary are computed once per example, and each
/// cell only runs the merged layers. Results are bitwise identical to
/// [`FullEvaluator`].
pub struct PrefixCachedEvaluator<'a> {
    base: Params<f32>,
    vlm: Params<f32>,
    config: crate::config::ModelConfig,
    answer_vocab: &'a [u32],
    /// `[example][boundary]` hidden states; boundary `b` is the input of layer `b + 1`.
    boundaries: Vec<Vec<Tensor>>,
    golds: Vec<u32>,
}

impl<'a> PrefixCachedEvaluator<'a> {
    pub fn new(
        base: &Checkpoint,
        vlm: &Checkpoint,
        examples: &[Example],
        answer_vocab: &'a [u32],
        workers: usize,
    ) -> Result<Self> {
        check_pair(base, vlm)?;
        let config = vlm.config;
        let base_params = base_params_for(base, vlm)?;
        let vlm_params: Params<f32> = Params::from_checkpoint(vlm)?;
        let boundaries = par_map(workers, examples, |e| -> Result<Vec<Tensor>> {
            let (mut x, layout) = embed_generic(&config, &vlm_params, &e.prompt, &[])?;
            let pos: Vec<usize> = (0..x.rows()).collect();
            let mut cache = KvCache::new(config.num_layers);
            let mut out = Vec::with_capacity(config.num_layers);
            for l in 1..=config.num_layers {
                out.push(x.clone());
                x = run_layers(&config, &vlm_params, x, &pos, &mut cache, &layout, None, l..l + 1, Capture::NONE, None)?.x;
            }
            Ok(out)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(PrefixCachedEvaluator {
            base: base_params,
            vlm: vlm_params,
            config,
            answer_vocab,
            boundaries,
            golds: examples.iter().map(|e| e.answer).collect(),
        })
    }

    fn merged_params(&self, spec: &MergeSpec) -> Params<f32> {
        let mut p = self.vlm.clone();
        let (l1, l2) = (spec.lambda1 as f32, spec.lambda2 as f32);
        for l in spec.start..=spec.end {
            let (dst, src) = (&mut p.layers[l - 1], &self.base.layers[l - 1]);
            let pairs: Vec<(&mut Tensor, &Tensor)> = match spec.subset {
                MergeSubset::AttnQkvo => vec![(&mut dst.q, &src.q), (&mut dst.k, &src.k), (&mut dst.v, &src.v), (&mut dst.o, &src.o)],
                MergeSubset::AllBackbone => vec![
                    (&mut dst.q, &src.q),
                    (&mut dst.k, &src.k),
                    (&mut dst.v, &src.v),
                    (&mut dst.o, &src.o),
                    (&mut dst.up, &src.up),
                    (&mut dst.down, &src.down),
                    (&mut dst.norm_attn, &src.norm_attn),
                    (&mut dst.norm_ffn, &src.norm_ffn),
                ],
            };
            for (d, s) in pairs {
                for (w, x) in d.data_mut().iter_mut().zip(s.data()) {
                    *w = interpolate(*x, *w, l1, l2);
                }
            }
        }
        p
    }

    /// Last-position logits of example `i` under the merged model.
    pub fn logits(&self, spec: &MergeSpec, i: usize) -> Result<Vec<f32>> {
        spec.validate(self.config.num_layers)?;
        let params = self.merged_params(spec);
        self.logits_with(&params, spec.start, i)
    }

    fn logits_with(&self, params: &Params<f32>, start: usize, i: usize) -> Result<Vec<f32>> {
        let x = self.boundaries[i][start - 1].clone();
        let n = x.rows();
        let pos: Vec<usize> = (0..n).collect();
        let mut cache = KvCache::new(self.config.num_layers);
        // Layout only matters for masking, which is off here.
        let layout = crate::layout::SequenceLayout::new(n, 0, 0);
        let out = run_layers(
            &self.config,
            params,
            x,
            &pos,
            &mut cache,
            &layout,
            None,
            start..self.config.num_layers + 1,
            Capture::NONE,
            None,
        )?;
        Ok(logits_of(params, &out.x)?.row(n - 1).to_vec())
    }
}

impl CellEvaluator for PrefixCachedEvaluator<'_> {
    fn correct(&self, spec: &MergeSpec) -> Result<Vec<bool>> {
        spec.validate(self.config.num_layers)?;
        let params = self.merged_params(spec);
        self.golds
            .iter()
            .enumerate()
            .map(|(i, gold)| Ok(pick_answer(&self.logits_with(&params, spec.start, i)?, self.answer_vocab) == *gold))
            .collect()
    }
}

/// Base parameters aligned with the vlm (the base may lack a projector).
fn base_params_for(base: &Checkpoint, vlm: &Checkpoint) -> Result<Params<f32>> {
    let mut aligned = base.clone();
    aligned.kind = vlm.kind;
    if !aligned.has_projector() {
        aligned.tensors.insert("projector".into(), vlm.tensor("projector")?.clone());
    }
    Params::from_checkpoint(&aligned)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub k0: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub score: Option<f64>,
    /// Examples this cell gets right and the unmerged vlm gets wrong.
    pub wins: Option<usize>,
    /// Examples the unmerged vlm gets right and this cell gets wrong.
    pub losses: Option<usize>,
    /// One-sided exact sign-test p-value of wins against losses.
    pub p_value: Option<f64>,
    /// Whether the cell passed the significance guard.
    pub eligible: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub best: MergeSpec,
    pub best_score: f64,
    /// Score of the unmerged vlm on the same examples.
    pub reference_score: f64,
    pub guard_alpha: Option<f64>,
    /// Non-identity cells the guard corrects for.
    pub comparisons: usize,
    pub table: Vec<GridCell>,
}

impl GridSearchResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k0,lambda1,lambda2,score,wins,losses,p_value,eligible,error\n");
        let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        for c in &self.table {
            let score = c.score.map(|s| s.to_string()).unwrap_or_default();
            let err = c.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                c.k0,
                c.lambda1,
                c.lambda2,
                score,
                opt(c.wins),
                opt(c.losses),
                c.p_value.map(|p| p.to_string()).unwrap_or_default(),
                c.eligible,
                err
            ));
        }
        out
    }

    pub fn cell(&self, k0: usize, lambda1: f64, lambda2: f64) -> Option<&GridCell> {
        self.table.iter().find(|c| c.k0 == k0 && c.lambda1 == lambda1 && c.lambda2 == lambda2)
    }

    /// Best score reached per k0 candidate.
    pub fn best_per_k0(&self) -> Vec<(usize, Option<f64>)> {
        let mut ks: Vec<usize> = self.table.iter().map(|c| c.k0).collect();
        ks.dedup();
        ks.into_iter()
            .map(|k| {
                let best = self
                    .table
                    .iter()
                    .filter(|c| c.k0 == k)
                    .filter_map(|c| c.score)
                    .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.max(s))));
                (k, best)
            })
            .collect()
    }
}

/// Whether cell `a` is preferred over `b`: higher score, then larger k0,
/// smaller λ₁, λ₂ closer to 1, smaller λ₂.
fn preferred(a: (f64, usize, f64, f64), b: (f64, usize, f64, f64)) -> bool {
    let key = |(s, k, l1, l2): (f64, usize, f64, f64)| (s, k as f64, -l1, -(l2 - 1.0).abs(), -l2);
    key(a).partial_cmp(&key(b)) == Some(std::cmp::Ordering::Greater)
}

/// One-sided exact sign test: probability of at least `wins` successes in
/// `wins + losses` fair coin flips.
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if wins == 0 || n == 0 {
        return 1.0;
    }
    Binomial::new(0.5, n as u64).expect("valid binomial").sf(wins as u64 - 1)
}

/// Paired guard against the reference: more wins than losses, significant at
/// `alpha` after a Bonferroni correction over `comparisons` cells.
pub fn passes_guard(wins: usize, losses: usize, alpha: f64, comparisons: usize) -> bool {
    wins > losses && sign_test_p(wins, losses) * comparisons.max(1) as f64 <= alpha
}

/// Joint search over merge start layers and coefficient pairs.
///
/// Every cell is compared example by example with the unmerged vlm. With
/// `guard_alpha` set, only cells passing [`passes_guard`] compete with the
/// identity cell; otherwise the plain argmax is taken.
pub fn grid_search(
    num_layers: usize,
    k0_candidates: &[usize],
    grid: &LambdaGrid,
    subset: MergeSubset,
    evaluator: &dyn CellEvaluator,
    guard_alpha: Option<f64>,
    workers: usize,
) -> Result<GridSearchResult> {
    let cells = grid.cells();
    if k0_candidates.is_empty() || cells.is_empty() {
        return Err(Error::MergeSpec("empty search grid".into()));
    }
    let identity_k0 = *k0_candidates.iter().max().expect("nonempty");
    let identity = MergeSpec::from_k0(identity_k0, num_layers, 0.0, 1.0, subset);
    let reference = evaluator.correct(&identity)?;
    if reference.is_empty() {
        return Err(Error::Eval("empty split".into()));
    }
    let reference_score = reference.iter().filter(|x| **x).count() as f64 / reference.len() as f64;
    let specs: Vec<MergeSpec> = k0_candidates
        .iter()
        .flat_map(|&k0| cells.iter().map(move |&(a, b)| MergeSpec::from_k0(k0, num_layers, a, b, subset)))
        .collect();
    let results = par_map(workers, &specs, |s| evaluator.correct(s));
    let mut table: Vec<GridCell> = specs
        .iter()
        .zip(results)
        .map(|(spec, r)| {
            let mut cell = GridCell {
                k0: spec.start,
                lambda1: spec.lambda1,
                lambda2: spec.lambda2,
                score: None,
                wins: None,
                losses: None,
                p_value: None,
                eligible: false,
                error: None,
            };
            match r {
                Ok(c) => {
                    let wins = c.iter().zip(&reference).filter(|(a, b)| **a && !**b).count();
                    let losses = c.iter().zip(&reference).filter(|(a, b)| !**a && **b).count();
                    cell.score = Some(c.iter().filter(|x| **x).count() as f64 / c.len().max(1) as f64);
                    cell.wins = Some(wins);
                    cell.losses = Some(losses);
                    cell.p_value = Some(sign_test_p(wins, losses));
                }
                Err(e) => cell.error = Some(e.to_string()),
            }
            cell
        })
        .collect();
    let comparisons = specs.iter().zip(&table).filter(|(s, c)| !s.is_identity() && c.score.is_some()).count();
    let mut best: Option<(f64, MergeSpec)> = None;
    for (spec, cell) in specs.iter().zip(table.iter_mut()) {
        let Some(s) = cell.score else { continue };
        let (w, l) = (cell.wins.unwrap_or(0), cell.losses.unwrap_or(0));
        cell.eligible = spec.is_identity() || guard_alpha.is_none_or(|a| passes_guard(w, l, a, comparisons));
        if cell.eligible {
            let cand = (s, spec.start, spec.lambda1, spec.lambda2);
            if best.is_none_or(|(bs, b)| preferred(cand, (bs, b.start, b.lambda1, b.lambda2))) {
                best = Some((s, *spec));
            }
        }
    }
    // The identity merge is always admissible, even when it is not on the grid.
    let (best_score, best) = match best {
        Some(b) if b.0 >= reference_score => b,
        _ => (reference_score, identity),
    };
    Ok(GridSearchResult { best, best_score, reference_score, guard_alpha, comparisons, table })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub plateau: PlateauConfig,
    pub radius: usize,
    pub grid: LambdaGrid,
    pub subset: MergeSubset,
    /// Family-wise significance required of a merge's gain over the unmerged vlm.
    pub guard_alpha: Option<f64>,
    /// Validation examples used for the sweep and the grid search.
    pub val_subsample: usize,
    pub workers: usize,
    /// Compute attention-mass and heatmap statistics for the report.
    pub analysis: bool,
    /// Test examples used for the attention statistics.
    pub analysis_examples: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            plateau: PlateauConfig::default(),
            radius: 3,
            grid: LambdaGrid::full(),
            subset: MergeSubset::AttnQkvo,
            guard_alpha: Some(DEFAULT_GUARD_ALPHA),
            val_subsample: 256,
            workers: 1,
            analysis: true,
            analysis_examples: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitScores {
    pub val: Option<f64>,
    pub test: Option<f64>,
    /// Test accuracy on the text-only task, when one was supplied.
    pub text_test: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MassSummary {
    /// Layers over which mass is averaged (`k0..=L`).
    pub layers: (usize, usize),
    pub vlm_all: f64,
    pub merged_all: f64,
    pub vlm_correct: Option<f64>,
    pub merged_correct: Option<f64>,
    pub vlm_localization: f64,
    pub merged_localization: f64,
    pub n_examples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub base_digest: String,
    pub vlm_digest: String,
    pub merged_digest: String,
    pub task_id: String,
    pub val_digest: String,
    pub test_digest: String,
    pub config: PipelineConfig,
    pub sweep: SweepProfile,
    pub plateau: PlateauReport,
    pub k0_candidates: Vec<(usize, Option<f64>)>,
    pub grid_cells: usize,
    pub best: MergeSpec,
    pub best_val_score: f64,
    pub identity_val_score: Option<f64>,
    pub base: SplitScores,
    pub vlm: SplitScores,
    pub merged: SplitScores,
    pub mass: Option<MassSummary>,
}

pub struct PipelineOutput {
    pub merged: Checkpoint,
    pub report: PipelineReport,
    pub grid: GridSearchResult,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Sweep, plateau detection, joint `(k0, λ)` search, merge and evaluation.
pub fn plam_pipeline(
    base: &Checkpoint,
    vlm: &Checkpoint,
    task: &Task,
    text_task: Option<&Task>,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput> {
    base.validate()?;
    vlm.validate()?;
    let base_digest = digest(base)?;
    let vlm_digest = digest(vlm)?;
    if let Some(recorded) = vlm.meta.get("base_digest") {
        if *recorded != base_digest && base_digest != vlm_digest {
            return Err(Error::DigestMismatch(format!(
                "vlm was fine-tuned from {recorded}, but the supplied base is {base_digest}"
            )));
        }
    }
    task.check_compatible(&vlm.config)?;
    let grid_geom = match &task.kind {
        TaskKind::Grounded { grid } => Some(*grid),
        TaskKind::Text { .. } => None,
    };
    if task.val.is_empty() || task.test.is_empty() {
        return Err(Error::Eval("pipeline needs nonempty val and test splits".into()));
    }
    let num_layers = vlm.config.num_layers;
    let val = &task.val[..cfg.val_subsample.clamp(1, task.val.len())];
    let vlm_model = Model::new(vlm)?;

    let sweep = mask_sweep(
        &vlm_model,
        &SweepRequest {
            model_id: &vlm_digest,
            task_id: &task.id,
            examples: val,
            answer_vocab: &task.answer_vocab,
            k_values: sweep_k_values(num_layers, 1),
            seeds: vec![task.seed],
            workers: cfg.workers,
        },
    )?;
    let outcome = detect_from_profile(&sweep, &cfg.plateau)?;
    let plateau = outcome.report(num_layers, &cfg.plateau);
    let candidates = k0_candidates(plateau.k_star, cfg.radius, num_layers);

    let evaluator = PrefixCachedEvaluator::new(base, vlm, val, &task.answer_vocab, cfg.workers)?;
    let grid = grid_search(num_layers, &candidates, &cfg.grid, cfg.subset, &evaluator, cfg.guard_alpha, cfg.workers)?;
    let identity_val_score = candidates
        .iter()
        .filter_map(|&k| grid.cell(k, 0.0, 1.0).and_then(|c| c.score))
        .next();

    let merged = merge(base, vlm, &grid.best)?;
    let merged_model = Model::new(&merged)?;
    let acc = |m: &Model, ex: &[Example], vocab: &[u32]| accuracy(m, ex, vocab, None, cfg.workers);
    let text_acc = |m: &Model| -> Result<Option<f64>> {
        match text_task {
            Some(t) if !t.test.is_empty() => Ok(Some(acc(m, &t.test, &t.answer_vocab)?)),
            _ => Ok(None),
        }
    };
    let base_model = Model::new(base)?;
    let base_scores = SplitScores { val: None, test: None, text_test: text_acc(&base_model)? };
    let vlm_scores = SplitScores {
        val: Some(acc(&vlm_model, &task.val, &task.answer_vocab)?),
        test: Some(acc(&vlm_model, &task.test, &task.answer_vocab)?),
        text_test: text_acc(&vlm_model)?,
    };
    let merged_scores = SplitScores {
        val: Some(acc(&merged_model, &task.val, &task.answer_vocab)?),
        test: Some(acc(&merged_model, &task.test, &task.answer_vocab)?),
        text_test: text_acc(&merged_model)?,
    };

    let mass = if cfg.analysis {
        let ex = &task.test[..cfg.analysis_examples.clamp(1, task.test.len())];
        let layers = grid.best.start..num_layers + 1;
        let v = late_vision_mass(&vlm_model, ex, &task.answer_vocab, layers.clone(), cfg.workers)?;
        let m = late_vision_mass(&merged_model, ex, &task.answer_vocab, layers.clone(), cfg.workers)?;
        let (vloc, mloc) = match &grid_geom {
            Some(g) => (
                localization_rate(&vlm_model, ex, g, layers.clone(), cfg.workers)?,
                localization_rate(&merged_model, ex, g, layers.clone(), cfg.workers)?,
            ),
            None => (0.0, 0.0),
        };
        Some(MassSummary {
            layers: (grid.best.start, num_layers),
            vlm_all: mean(v.iter().map(|x| x.0)).unwrap_or(0.0),
            merged_all: mean(m.iter().map(|x| x.0)).unwrap_or(0.0),
            vlm_correct: mean(v.iter().filter(|x| x.1).map(|x| x.0)),
            merged_correct: mean(m.iter().filter(|x| x.1).map(|x| x.0)),
            vlm_localization: vloc,
            merged_localization: mloc,
            n_examples: ex.len(),
        })
    } else {
        None
    };

    let report = PipelineReport {
        base_digest,
        vlm_digest,
        merged_digest: digest(&merged)?,
        task_id: task.id.clone(),
        val_digest: task.split_digest(crate::taskgen::Split::Val),
        test_digest: task.split_digest(crate::taskgen::Split::Test),
        config: cfg.clone(),
        sweep,
        plateau,
        k0_candidates: grid.best_per_k0(),
        grid_cells: grid.table.len(),
        best: grid.best,
        best_val_score: grid.best_score,
        identity_val_score,
        base: base_scores,
        vlm: vlm_scores,
        merged: merged_scores,
        mass,
    };
    Ok(PipelineOutput { merged, report, grid })
}
