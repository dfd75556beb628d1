//! Plateau-onset detection on mask-sweep curves and the neighborhood search
//! for the merge start layer.
//!
//! Curves are indexed by cut layer `k = 1..=L+1`. Internally index `i`
//! corresponds to `k = i + 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interventions::SweepProfile;

/// Comparison slack for ties and sign tests on normalized curves.
const TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    /// Centered moving-average window (odd).
    pub window: usize,
    /// Minimum number of curve points from the onset to the end.
    pub min_plateau_len: usize,
    /// Plateau mean slope must not exceed this fraction of the mid-stage slope.
    pub slope_tol_frac: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig { window: 3, min_plateau_len: 2, slope_tol_frac: 0.1 }
    }
}

impl PlateauConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::Config(format!("smoothing window must be odd, got {}", self.window)));
        }
        if self.min_plateau_len < 2 {
            return Err(Error::Config("min_plateau_len must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.slope_tol_frac) {
            return Err(Error::Config("slope_tol_frac must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Offset of the second-difference stencil. A window-`w` average flattens
    /// a corner over `w` points, so the stencil straddles the smoothed span.
    pub fn curvature_step(&self) -> usize {
        self.window / 2 + 1
    }
}

/// Early / mid / plateau split of a sweep curve, in cut-layer units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSegmentation {
    pub early_end: usize,
    pub mid_end: usize,
    pub k_star: usize,
    pub curve_smoothed: Vec<f64>,
    pub mid_slope: f64,
    pub plateau_slope: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum PlateauOutcome {
    Found(StageSegmentation),
    NoPlateau { reason: String, curve_smoothed: Vec<f64> },
}

impl PlateauOutcome {
    pub fn segmentation(&self) -> Option<&StageSegmentation> {
        match self {
            PlateauOutcome::Found(s) => Some(s),
            PlateauOutcome::NoPlateau { .. } => None,
        }
    }

    pub fn is_fallback(&self) -> bool {
        self.segmentation().is_none()
    }

    /// Detected onset, or `⌈2L/3⌉` when no plateau was found.
    pub fn k_star(&self, num_layers: usize) -> usize {
        match self {
            PlateauOutcome::Found(s) => s.k_star,
            PlateauOutcome::NoPlateau { .. } => fallback_k_star(num_layers),
        }
    }

    pub fn report(&self, num_layers: usize, config: &PlateauConfig) -> PlateauReport {
        let seg = self.segmentation();
        PlateauReport {
            k_star: self.k_star(num_layers),
            early_end: seg.map(|s| s.early_end),
            mid_end: seg.map(|s| s.mid_end),
            fallback: self.is_fallback(),
            reason: match self {
                PlateauOutcome::NoPlateau { reason, .. } => Some(reason.clone()),
                PlateauOutcome::Found(_) => None,
            },
            num_layers,
            window: config.window,
            min_plateau_len: config.min_plateau_len,
            slope_tol_frac: config.slope_tol_frac,
            mid_slope: seg.map(|s| s.mid_slope),
            plateau_slope: seg.map(|s| s.plateau_slope),
            curve_smoothed: match self {
                PlateauOutcome::Found(s) => s.curve_smoothed.clone(),
                PlateauOutcome::NoPlateau { curve_smoothed, .. } => curve_smoothed.clone(),
            },
        }
    }
}

/// JSON form of a detection result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauReport {
    pub k_star: usize,
    pub early_end: Option<usize>,
    pub mid_end: Option<usize>,
    pub fallback: bool,
    pub reason: Option<String>,
    pub num_layers: usize,
    pub window: usize,
    pub min_plateau_len: usize,
    pub slope_tol_frac: f64,
    pub mid_slope: Option<f64>,
    pub plateau_slope: Option<f64>,
    pub curve_smoothed: Vec<f64>,
}

pub fn fallback_k_star(num_layers: usize) -> usize {
    (2 * num_layers).div_ceil(3)
}

/// Half-sample reflection of an index into `0..n`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - 1 - j;
    }
    j as usize
}

/// Centered moving average with reflected boundaries.
pub fn smooth(curve: &[f64], window: usize) -> Vec<f64> {
    let half = (window / 2) as isize;
    let n = curve.len();
    (0..n as isize)
        .map(|i| {
            let sum: f64 = (-half..=half).map(|o| curve[reflect(i + o, n)]).sum();
            sum / window as f64
        })
        .collect()
}

/// `s[i+h] - 2 s[i] + s[i-h]` with reflected boundaries.
pub fn second_difference(s: &[f64], h: usize) -> Vec<f64> {
    let n = s.len();
    let h = h as isize;
    (0..n as isize)
        .map(|i| s[reflect(i + h, n)] - 2.0 * s[i as usize] + s[reflect(i - h, n)])
        .collect()
}

/// Finds the knee where a rising curve levels off.
///
/// Scores are min-max normalized first, which makes the result independent
/// of positive affine rescaling. A point qualifies as onset when the
/// remaining curve is flat relative to the rise leading into it.
pub fn detect_plateau_onset(scores: &[f64], config: &PlateauConfig) -> Result<PlateauOutcome> {
    config.validate()?;
    let n = scores.len();
    if n < 2 * config.min_plateau_len {
        return Err(Error::Config(format!(
            "curve has {n} points; need at least {} for min_plateau_len {}",
            2 * config.min_plateau_len,
            config.min_plateau_len
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("sweep scores".into()));
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let smoothed_raw = smooth(scores, config.window);
    if hi - lo <= 0.0 {
        return Ok(PlateauOutcome::NoPlateau {
            reason: "constant curve".into(),
            curve_smoothed: smoothed_raw,
        });
    }
    let norm: Vec<f64> = scores.iter().map(|s| (s - lo) / (hi - lo)).collect();
    let s = smooth(&norm, config.window);
    let d = second_difference(&s, config.curvature_step());

    let mut best: Option<(usize, usize, f64, f64)> = None;
    for c in 1..=n - config.min_plateau_len {
        if d[c] >= -TOL {
            continue;
        }
        // Start of the rise: strongest positive curvature before c.
        let mut e = 0;
        let mut e_val = TOL;
        for (j, &v) in d.iter().enumerate().take(c) {
            if v > e_val + TOL {
                e = j;
                e_val = v;
            }
        }
        let mid = (s[c] - s[e]) / (c - e) as f64;
        if mid <= TOL {
            continue;
        }
        let plateau = if c + 1 < n { (s[n - 1] - s[c]) / (n - 1 - c) as f64 } else { 0.0 };
        if plateau > config.slope_tol_frac * mid + TOL {
            continue;
        }
        let better = match best {
            None => true,
            Some((bc, ..)) => -d[c] > -d[bc] + TOL,
        };
        if better {
            best = Some((c, e, mid, plateau));
        }
    }

    let smoothed_scores: Vec<f64> = s.iter().map(|v| lo + v * (hi - lo)).collect();
    Ok(match best {
        Some((c, e, mid, plateau)) => PlateauOutcome::Found(StageSegmentation {
            early_end: e + 1,
            mid_end: c + 1,
            k_star: c + 1,
            curve_smoothed: smoothed_scores,
            mid_slope: mid * (hi - lo),
            plateau_slope: plateau * (hi - lo),
        }),
        None => PlateauOutcome::NoPlateau {
            reason: "no point is followed by a flat enough tail".into(),
            curve_smoothed: smoothed_scores,
        },
    })
}

/// Detection on a dense sweep profile.
pub fn detect_from_profile(profile: &SweepProfile, config: &PlateauConfig) -> Result<PlateauOutcome> {
    if !profile.is_dense() {
        return Err(Error::Config(format!(
            "sweep profile must cover every k in 1..={} (complete: {})",
            profile.num_layers + 1,
            profile.complete
        )));
    }
    detect_plateau_onset(&profile.scores(), config)
}

/// Candidate merge start layers `k* - r ..= k* + r` clipped to `[2, L]`.
pub fn k0_candidates(k_star: usize, radius: usize, num_layers: usize) -> Vec<usize> {
    let lo = k_star.saturating_sub(radius).max(2);
    let hi = (k_star + radius).min(num_layers);
    if lo > hi {
        return vec![k_star.clamp(2, num_layers.max(2))];
    }
    (lo..=hi).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub k0: usize,
    pub score: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborSearch {
    pub k0: usize,
    pub score: f64,
    pub table: Vec<CandidateScore>,
}

/// Best-scoring candidate near `k_star`; ties go to the larger `k0`.
pub fn neighbor_search_k0<F>(
    k_star: usize,
    radius: usize,
    num_layers: usize,
    eval_fn: F,
) -> Result<NeighborSearch>
where
    F: Fn(usize) -> Result<f64>,
{
    let mut table = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    for k0 in k0_candidates(k_star, radius, num_layers) {
        match eval_fn(k0) {
            Ok(score) => {
                if best.is_none_or(|(_, b)| score >= b) {
                    best = Some((k0, score));
                }
                table.push(CandidateScore { k0, score: Some(score), error: None });
            }
            Err(e) => table.push(CandidateScore { k0, score: None, error: Some(e.to_string()) }),
        }
    }
    let (k0, score) =
        best.ok_or_else(|| Error::Eval("every k0 candidate failed to evaluate".into()))?;
    Ok(NeighborSearch { k0, score, table })
}
