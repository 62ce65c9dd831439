//! Pools, observations, thresholds and level-set partitions.
//!
//! Boundary convention used everywhere in this crate: a point belongs to the
//! super-level set when its value is strictly greater than the resolved
//! threshold, and to the sub-level set otherwise (`<=`).

use std::collections::HashSet;

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LseError, Result};

/// The finite domain: `n` points in `d` dimensions, optionally with the
/// hidden noiseless function value at every point.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    points: Array2<f64>,
    bounds: Vec<(f64, f64)>,
    truth: Option<Array1<f64>>,
}

impl CandidatePool {
    pub fn new(
        points: Array2<f64>,
        bounds: Vec<(f64, f64)>,
        truth: Option<Array1<f64>>,
    ) -> Result<Self> {
        let (n, d) = points.dim();
        if n == 0 || d == 0 {
            return Err(LseError::invalid(
                "pool needs at least one point and one dimension",
            ));
        }
        if bounds.len() != d {
            return Err(LseError::invalid(format!(
                "expected {d} bounds, got {}",
                bounds.len()
            )));
        }
        for (k, &(lo, hi)) in bounds.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(LseError::invalid(format!(
                    "bad bounds ({lo}, {hi}) in dimension {k}"
                )));
            }
        }
        for (i, row) in points.outer_iter().enumerate() {
            for (k, &v) in row.iter().enumerate() {
                let (lo, hi) = bounds[k];
                if !(v >= lo && v <= hi) {
                    return Err(LseError::invalid(format!(
                        "point {i} coordinate {k} = {v} outside [{lo}, {hi}]"
                    )));
                }
            }
        }
        if let Some(t) = &truth {
            if t.len() != n {
                return Err(LseError::invalid(format!(
                    "truth has length {}, pool has {n} points",
                    t.len()
                )));
            }
            if let Some(i) = t.iter().position(|v| !v.is_finite()) {
                return Err(LseError::invalid(format!("non-finite truth value at {i}")));
            }
        }
        Ok(Self {
            points,
            bounds,
            truth,
        })
    }

    /// Builds a pool whose bounds are the per-column min/max of `points`.
    pub fn from_points(points: Array2<f64>, truth: Option<Array1<f64>>) -> Result<Self> {
        let bounds = points
            .columns()
            .into_iter()
            .map(|c| {
                c.iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                        (lo.min(v), hi.max(v))
                    })
            })
            .collect();
        Self::new(points, bounds, truth)
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn point(&self, index: usize) -> ArrayView1<'_, f64> {
        self.points.row(index)
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn truth(&self) -> Option<&Array1<f64>> {
        self.truth.as_ref()
    }

    /// Coordinates rescaled to `[0, 1]` per dimension using the pool bounds.
    /// Zero-width dimensions map to 0.
    pub fn normalized(&self) -> Array2<f64> {
        let mut out = self.points.clone();
        for (k, mut col) in out.columns_mut().into_iter().enumerate() {
            let (lo, hi) = self.bounds[k];
            let span = if hi > lo { hi - lo } else { 1.0 };
            col.mapv_inplace(|v| (v - lo) / span);
        }
        out
    }
}

/// Observed `(pool index, noisy value)` pairs. Indices are unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObservationSet {
    entries: Vec<(usize, f64)>,
    seen: HashSet<usize>,
    pool_size: usize,
}

impl ObservationSet {
    pub fn new(pool_size: usize) -> Self {
        Self {
            entries: Vec::new(),
            seen: HashSet::new(),
            pool_size,
        }
    }

    pub fn insert(&mut self, index: usize, y: f64) -> Result<()> {
        if index >= self.pool_size {
            return Err(LseError::invalid(format!(
                "index {index} out of range for pool of {}",
                self.pool_size
            )));
        }
        if !y.is_finite() {
            return Err(LseError::invalid(format!(
                "non-finite observation at {index}"
            )));
        }
        if !self.seen.insert(index) {
            return Err(LseError::invalid(format!("index {index} already observed")));
        }
        self.entries.push((index, y));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn pool_size(&self) -> usize {
        self.pool_size
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn contains(&self, index: usize) -> bool {
        self.seen.contains(&index)
    }

    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|&(i, _)| i).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|&(_, y)| y).collect()
    }

    /// `mask[i]` is true when pool index `i` has been observed.
    pub fn mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.pool_size];
        for &(i, _) in &self.entries {
            mask[i] = true;
        }
        mask
    }

    /// Subset restricted to the given positions of `entries()`.
    pub fn subset(&self, positions: &[usize]) -> Self {
        let mut out = Self::new(self.pool_size);
        for &p in positions {
            let (i, y) = self.entries[p];
            out.entries.push((i, y));
            out.seen.insert(i);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ThresholdSpec {
    /// Fixed level `h`.
    Explicit(f64),
    /// Fraction `l` of the maximum, `0 <= l <= 1`.
    Implicit(f64),
}

impl ThresholdSpec {
    pub fn implicit(ratio: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(LseError::invalid(format!(
                "implicit ratio {ratio} outside [0, 1]"
            )));
        }
        Ok(ThresholdSpec::Implicit(ratio))
    }

    /// The scalar compared against for a given value vector.
    pub fn resolve(&self, values: &[f64]) -> f64 {
        match *self {
            ThresholdSpec::Explicit(h) => h,
            ThresholdSpec::Implicit(l) => l * max_value(values),
        }
    }
}

/// Partition of the pool into the estimated super- and sub-level sets.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSetEstimate {
    in_super: Vec<bool>,
    resolved_threshold: f64,
}

impl LevelSetEstimate {
    pub fn from_membership(in_super: Vec<bool>, resolved_threshold: f64) -> Self {
        Self {
            in_super,
            resolved_threshold,
        }
    }

    pub fn len(&self) -> usize {
        self.in_super.len()
    }

    pub fn is_empty(&self) -> bool {
        self.in_super.is_empty()
    }

    pub fn resolved_threshold(&self) -> f64 {
        self.resolved_threshold
    }

    pub fn membership(&self) -> &[bool] {
        &self.in_super
    }

    pub fn is_super(&self, index: usize) -> bool {
        self.in_super[index]
    }

    pub fn super_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.in_super[i]).collect()
    }

    pub fn sub_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.in_super[i]).collect()
    }

    pub fn super_count(&self) -> usize {
        self.in_super.iter().filter(|&&b| b).count()
    }

    /// The same partition with class labels swapped.
    pub fn flipped(&self) -> Self {
        Self {
            in_super: self.in_super.iter().map(|b| !b).collect(),
            resolved_threshold: self.resolved_threshold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub f1_super: f64,
    pub f1_sub: f64,
    pub precision_super: f64,
    pub recall_super: f64,
    pub precision_sub: f64,
    pub recall_sub: f64,
}

pub(crate) fn max_value(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub fn classify(values: &[f64], spec: ThresholdSpec) -> Result<LevelSetEstimate> {
    if values.is_empty() {
        return Err(LseError::invalid("cannot classify an empty value vector"));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(LseError::invalid(format!("non-finite value at {i}")));
    }
    if let ThresholdSpec::Implicit(l) = spec {
        if !(0.0..=1.0).contains(&l) {
            return Err(LseError::invalid(format!(
                "implicit ratio {l} outside [0, 1]"
            )));
        }
    }
    let threshold = spec.resolve(values);
    Ok(LevelSetEstimate {
        in_super: values.iter().map(|&v| v > threshold).collect(),
        resolved_threshold: threshold,
    })
}

fn precision_recall_f1(tp: usize, predicted: usize, actual: usize) -> (f64, f64, f64) {
    // Nothing predicted and nothing there: perfect agreement on this class.
    if predicted == 0 && actual == 0 {
        return (1.0, 1.0, 1.0);
    }
    let precision = if predicted == 0 {
        0.0
    } else {
        tp as f64 / predicted as f64
    };
    let recall = if actual == 0 {
        0.0
    } else {
        tp as f64 / actual as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

pub fn f1_scores(estimate: &LevelSetEstimate, truth: &LevelSetEstimate) -> Result<F1Report> {
    if estimate.len() != truth.len() {
        return Err(LseError::invalid(format!(
            "partitions cover {} and {} points",
            estimate.len(),
            truth.len()
        )));
    }
    let (mut tp_super, mut tp_sub, mut pred_super, mut true_super) = (0, 0, 0, 0);
    for (&p, &t) in estimate.in_super.iter().zip(&truth.in_super) {
        pred_super += p as usize;
        true_super += t as usize;
        tp_super += (p && t) as usize;
        tp_sub += (!p && !t) as usize;
    }
    let n = estimate.len();
    let (precision_super, recall_super, f1_super) =
        precision_recall_f1(tp_super, pred_super, true_super);
    let (precision_sub, recall_sub, f1_sub) =
        precision_recall_f1(tp_sub, n - pred_super, n - true_super);
    Ok(F1Report {
        f1_super,
        f1_sub,
        precision_super,
        recall_super,
        precision_sub,
        recall_sub,
    })
}

/// Latin hypercube design: along every dimension each of the `n` equal-width
/// bins holds exactly one sample.
pub fn latin_hypercube(n: usize, bounds: &[(f64, f64)], seed: u64) -> Result<Array2<f64>> {
    if n == 0 {
        return Err(LseError::invalid("latin hypercube needs n >= 1"));
    }
    if bounds.is_empty() {
        return Err(LseError::invalid(
            "latin hypercube needs at least one dimension",
        ));
    }
    for &(lo, hi) in bounds {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(LseError::invalid(format!("degenerate bounds ({lo}, {hi})")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Array2::zeros((n, bounds.len()));
    let mut perm: Vec<usize> = (0..n).collect();
    for (k, &(lo, hi)) in bounds.iter().enumerate() {
        perm.shuffle(&mut rng);
        for (i, &bin) in perm.iter().enumerate() {
            let u: f64 = rng.gen();
            let x = lo + (hi - lo) * (bin as f64 + u) / n as f64;
            // guard against rounding past the upper edge
            out[[i, k]] = x.min(hi);
        }
    }
    Ok(out)
}

/// Maps each continuous design point to its nearest free pool point, using
/// Euclidean distance on bound-normalized coordinates. Ties go to the lower
/// index; every returned index is distinct and outside `excluded`.
pub fn snap_to_pool(
    points: &Array2<f64>,
    pool: &CandidatePool,
    excluded: &HashSet<usize>,
) -> Result<Vec<usize>> {
    let k = points.nrows();
    let n = pool.len();
    if points.ncols() != pool.dim() {
        return Err(LseError::invalid(format!(
            "points have {} columns, pool has dimension {}",
            points.ncols(),
            pool.dim()
        )));
    }
    let free = n - excluded.iter().filter(|&&i| i < n).count();
    if k > free {
        return Err(LseError::Capacity {
            requested: k,
            available: free,
        });
    }
    let spans: Vec<(f64, f64)> = pool
        .bounds()
        .iter()
        .map(|&(lo, hi)| (lo, if hi > lo { hi - lo } else { 1.0 }))
        .collect();
    let normalized_pool = pool.normalized();
    let mut taken = vec![false; n];
    for &i in excluded {
        if i < n {
            taken[i] = true;
        }
    }
    let mut chosen = Vec::with_capacity(k);
    for row in points.outer_iter() {
        let query: Vec<f64> = row
            .iter()
            .zip(&spans)
            .map(|(&v, &(lo, span))| (v - lo) / span)
            .collect();
        let mut best: Option<(usize, f64)> = None;
        for (i, cand) in normalized_pool.outer_iter().enumerate() {
            if taken[i] {
                continue;
            }
            let dist: f64 = cand
                .iter()
                .zip(&query)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if best.is_none_or(|(_, bd)| dist < bd) {
                best = Some((i, dist));
            }
        }
        let (idx, _) = best.expect("capacity checked above");
        taken[idx] = true;
        chosen.push(idx);
    }
    Ok(chosen)
}

/// Threshold that leaves at most `floor(super_fraction * n)` values strictly
/// above it: the smallest sample value with that property. With fraction 1
/// the result sits just below the minimum so every point is super.
pub fn calibrate_threshold(values: &[f64], super_fraction: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(LseError::invalid(
            "cannot calibrate on an empty value vector",
        ));
    }
    if !(0.0..=1.0).contains(&super_fraction) {
        return Err(LseError::invalid(format!(
            "super fraction {super_fraction} outside [0, 1]"
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(LseError::invalid("non-finite value in calibration sample"));
    }
    let n = values.len();
    let allowed = (super_fraction * n as f64).floor() as usize;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    if allowed >= n {
        return Ok(sorted[0].next_down());
    }
    // count(> v) is non-increasing in v, so the first qualifying sorted value wins
    let above = |v: f64| n - sorted.partition_point(|&s| s <= v);
    let pos = sorted.partition_point(|&v| above(v) > allowed);
    Ok(sorted[pos])
}

/// Ratio `l` such that `l * max(values)` reproduces the explicit threshold
/// `h`. Values outside `[0, 1]` are clamped with a warning.
pub fn implicit_ratio_from_h(values: &[f64], h: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(LseError::invalid("empty value vector"));
    }
    let max = max_value(values);
    if max == 0.0 {
        return Err(LseError::Division("maximum of values is zero".into()));
    }
    let mut ratio = h / max;
    if max > 0.0 {
        // Nudge up so that ratio * max does not land below h after rounding.
        while ratio * max < h && ratio < 1.0 {
            ratio = ratio.next_up();
        }
    }
    if !(0.0..=1.0).contains(&ratio) {
        log::warn!("implicit ratio {ratio} outside [0, 1], clamping");
        ratio = ratio.clamp(0.0, 1.0);
    }
    Ok(ratio)
}
