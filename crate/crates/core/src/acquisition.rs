//! Acquisition scores over the whole pool and greedy batch selection.
//!
//! Explicit threshold: the mutual information between the super-level
//! indicator of a point and the network weights, estimated from the MC
//! passes. With hard per-pass indicators the expected conditional entropy
//! vanishes and the score is the binary entropy of the fraction of passes
//! above the threshold.
//!
//! Implicit threshold: for a candidate `x`, pass `j` substitutes its own
//! prediction `v_j = passes[j][x]` for the mean at `x`, recomputes the
//! threshold `tau_j = l * max(v_j, max_{x' != x} mu(x'))` and counts the
//! points above it, giving `q_j`. The score is the mutual information of the
//! resulting cardinality distribution. Counting uses a sorted copy of the
//! mean and the top-2 maxima, so each `(x, j)` costs one binary search.

use std::io::Write;

use ndarray::Array2;
use rayon::prelude::*;

use crate::domain::max_value;
use crate::error::{LseError, Result};
use crate::surrogate::PredictionEnsemble;

/// Scores closer than this are considered tied during batch selection.
pub const SCORE_TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionScores {
    pub scores: Vec<f64>,
    /// Size of the intersection of all sampled super-level sets, used to
    /// break ties among equal implicit scores (smaller first).
    pub tie_cards: Option<Vec<usize>>,
}

impl AcquisitionScores {
    pub fn new(scores: Vec<f64>) -> Self {
        Self {
            scores,
            tie_cards: None,
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// How a single pass turns a prediction into a class probability.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum IndicatorMode {
    /// Probability 1 when the pass predicts above the threshold, else 0.
    #[default]
    Hard,
    /// Extension: `Phi((y - h) / noise_std)` per pass.
    Soft { noise_std: f64 },
}

/// `-p ln p - (1-p) ln(1-p)` with `0 ln 0 = 0`.
pub fn binary_entropy(p: f64) -> f64 {
    xlogx(p) + xlogx(1.0 - p)
}

fn xlogx(p: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        -p * p.ln()
    }
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Per-point pieces of the explicit mutual information.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplicitTerms {
    /// Averaged class-1 probability over passes.
    pub probability: Vec<f64>,
    /// Entropy of the averaged probability.
    pub predictive_entropy: Vec<f64>,
    /// Mean over passes of the per-pass entropy.
    pub expected_entropy: Vec<f64>,
}

pub fn explicit_terms(
    ensemble: &PredictionEnsemble,
    h: f64,
    mode: IndicatorMode,
) -> Result<ExplicitTerms> {
    let passes = ensemble.passes();
    let (m, n) = passes.dim();
    let mut prob_sum = vec![0.0; n];
    let mut ent_sum = vec![0.0; n];
    match mode {
        IndicatorMode::Hard => {
            for row in passes.outer_iter() {
                for ((acc, ent), &y) in prob_sum.iter_mut().zip(ent_sum.iter_mut()).zip(row) {
                    let p = if y > h { 1.0 } else { 0.0 };
                    *acc += p;
                    *ent += binary_entropy(p);
                }
            }
        }
        IndicatorMode::Soft { noise_std } => {
            if !(noise_std > 0.0) {
                return Err(LseError::invalid(
                    "soft indicator needs a positive noise level",
                ));
            }
            for row in passes.outer_iter() {
                for ((acc, ent), &y) in prob_sum.iter_mut().zip(ent_sum.iter_mut()).zip(row) {
                    let p = normal_cdf((y - h) / noise_std);
                    *acc += p;
                    *ent += binary_entropy(p);
                }
            }
        }
    }
    let inv = 1.0 / m as f64;
    let probability: Vec<f64> = prob_sum.iter().map(|s| s * inv).collect();
    Ok(ExplicitTerms {
        predictive_entropy: probability.iter().map(|&p| binary_entropy(p)).collect(),
        expected_entropy: ent_sum.iter().map(|s| s * inv).collect(),
        probability,
    })
}

pub fn acq_explicit_mi(ensemble: &PredictionEnsemble, h: f64) -> AcquisitionScores {
    acq_explicit_mi_with(ensemble, h, IndicatorMode::Hard).expect("hard mode is infallible")
}

pub fn acq_explicit_mi_with(
    ensemble: &PredictionEnsemble,
    h: f64,
    mode: IndicatorMode,
) -> Result<AcquisitionScores> {
    let t = explicit_terms(ensemble, h, mode)?;
    Ok(AcquisitionScores::new(
        t.predictive_entropy
            .iter()
            .zip(&t.expected_entropy)
            .map(|(a, b)| (a - b).max(0.0))
            .collect(),
    ))
}

/// Predictive entropy only.
pub fn acq_explicit_entropy(ensemble: &PredictionEnsemble, h: f64) -> AcquisitionScores {
    let t = explicit_terms(ensemble, h, IndicatorMode::Hard).expect("hard mode is infallible");
    AcquisitionScores::new(t.predictive_entropy)
}

/// Variation ratio `1 - max(p, 1 - p)`.
pub fn acq_explicit_varratio(ensemble: &PredictionEnsemble, h: f64) -> AcquisitionScores {
    let t = explicit_terms(ensemble, h, IndicatorMode::Hard).expect("hard mode is infallible");
    AcquisitionScores::new(
        t.probability
            .iter()
            .map(|&p| 1.0 - p.max(1.0 - p))
            .collect(),
    )
}

/// Sampled super-level-set cardinalities for one candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct GSample {
    pub q_values: Vec<usize>,
    pub thresholds: Vec<f64>,
}

/// Precomputed view of the ensemble mean for implicit scoring.
struct MeanIndex<'a> {
    mean: &'a [f64],
    sorted: Vec<f64>,
    top_index: usize,
    top: f64,
    second: f64,
    ratio: f64,
}

impl<'a> MeanIndex<'a> {
    fn new(mean: &'a [f64], ratio: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(LseError::invalid(format!(
                "implicit ratio {ratio} outside [0, 1]"
            )));
        }
        let mut sorted = mean.to_vec();
        sorted.sort_by(f64::total_cmp);
        let (mut top_index, mut top, mut second) = (0, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (i, &v) in mean.iter().enumerate() {
            if v > top {
                second = top;
                top = v;
                top_index = i;
            } else if v > second {
                second = v;
            }
        }
        Ok(Self {
            mean,
            sorted,
            top_index,
            top,
            second,
            ratio,
        })
    }

    fn max_excluding(&self, x: usize) -> f64 {
        if x == self.top_index {
            self.second
        } else {
            self.top
        }
    }

    /// Number of `x' != x` with `mu(x') > tau`.
    fn count_others_above(&self, x: usize, tau: f64) -> usize {
        let all = self.sorted.len() - self.sorted.partition_point(|&m| m <= tau);
        all - (self.mean[x] > tau) as usize
    }

    fn sample(&self, x: usize, column: impl Iterator<Item = f64>) -> GSample {
        let others_max = self.max_excluding(x);
        let mut q_values = Vec::new();
        let mut thresholds = Vec::new();
        for v in column {
            let tau = self.ratio * v.max(others_max);
            q_values.push(self.count_others_above(x, tau) + (v > tau) as usize);
            thresholds.push(tau);
        }
        GSample {
            q_values,
            thresholds,
        }
    }

    /// `|intersection of all sampled super-level sets|`.
    fn tie_card(&self, x: usize, column: &[f64], sample: &GSample) -> usize {
        let max_tau = max_value(&sample.thresholds);
        let self_in_all = column
            .iter()
            .zip(&sample.thresholds)
            .map(|(v, t)| v - t)
            .fold(f64::INFINITY, f64::min)
            > 0.0;
        self.count_others_above(x, max_tau) + self_in_all as usize
    }
}

pub fn implicit_g_values(ensemble: &PredictionEnsemble, ratio: f64, x: usize) -> Result<GSample> {
    if x >= ensemble.num_points() {
        return Err(LseError::invalid(format!("point {x} out of range")));
    }
    let mean = ensemble.mean().as_slice().expect("contiguous mean");
    let index = MeanIndex::new(mean, ratio)?;
    Ok(index.sample(x, ensemble.passes().column(x).iter().copied()))
}

/// Per-point pieces of the implicit mutual information.
#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitTerms {
    pub predictive_entropy: Vec<f64>,
    pub expected_entropy: Vec<f64>,
    /// Largest empirical probability of any cardinality value.
    pub mode_probability: Vec<f64>,
    pub tie_cards: Vec<usize>,
}

/// Entropy of the empirical distribution of `values`.
fn empirical_entropy(values: &mut [usize]) -> (f64, f64) {
    values.sort_unstable();
    let m = values.len() as f64;
    let mut entropy = 0.0;
    let mut mode = 0usize;
    let mut start = 0;
    while start < values.len() {
        let mut end = start + 1;
        while end < values.len() && values[end] == values[start] {
            end += 1;
        }
        let count = end - start;
        mode = mode.max(count);
        entropy += xlogx(count as f64 / m);
        start = end;
    }
    (entropy, mode as f64 / m)
}

/// Each pass yields a single cardinality, so its conditional distribution
/// is a point mass and contributes `-1 ln 1` to the expected entropy.
fn point_mass_entropy() -> f64 {
    xlogx(1.0) + 0.0
}

pub fn implicit_terms(ensemble: &PredictionEnsemble, ratio: f64) -> Result<ImplicitTerms> {
    let mean = ensemble.mean().as_slice().expect("contiguous mean");
    let index = MeanIndex::new(mean, ratio)?;
    let columns: Array2<f64> = ensemble.passes().t().as_standard_layout().into_owned();
    let m = ensemble.num_passes();

    let per_point: Vec<(f64, f64, f64, usize)> = (0..ensemble.num_points())
        .into_par_iter()
        .map(|x| {
            let column = columns.row(x);
            let column = column.as_slice().expect("standard layout");
            let sample = index.sample(x, column.iter().copied());
            let tie_card = index.tie_card(x, column, &sample);
            let mut q = sample.q_values;
            let (predictive, mode) = empirical_entropy(&mut q);
            let expected = (0..m).map(|_| point_mass_entropy()).sum::<f64>() / m as f64;
            debug_assert_eq!(expected, 0.0);
            (predictive, expected, mode, tie_card)
        })
        .collect();

    let mut terms = ImplicitTerms {
        predictive_entropy: Vec::with_capacity(per_point.len()),
        expected_entropy: Vec::with_capacity(per_point.len()),
        mode_probability: Vec::with_capacity(per_point.len()),
        tie_cards: Vec::with_capacity(per_point.len()),
    };
    for (p, e, mode, t) in per_point {
        terms.predictive_entropy.push(p);
        terms.expected_entropy.push(e);
        terms.mode_probability.push(mode);
        terms.tie_cards.push(t);
    }
    Ok(terms)
}

pub fn acq_implicit_mi(ensemble: &PredictionEnsemble, ratio: f64) -> Result<AcquisitionScores> {
    let t = implicit_terms(ensemble, ratio)?;
    Ok(AcquisitionScores {
        scores: t
            .predictive_entropy
            .iter()
            .zip(&t.expected_entropy)
            .map(|(a, b)| a - b)
            .collect(),
        tie_cards: Some(t.tie_cards),
    })
}

pub fn acq_implicit_entropy(
    ensemble: &PredictionEnsemble,
    ratio: f64,
) -> Result<AcquisitionScores> {
    let t = implicit_terms(ensemble, ratio)?;
    Ok(AcquisitionScores {
        scores: t.predictive_entropy,
        tie_cards: Some(t.tie_cards),
    })
}

pub fn acq_implicit_varratio(
    ensemble: &PredictionEnsemble,
    ratio: f64,
) -> Result<AcquisitionScores> {
    let t = implicit_terms(ensemble, ratio)?;
    Ok(AcquisitionScores {
        scores: t.mode_probability.iter().map(|p| 1.0 - p).collect(),
        tie_cards: Some(t.tie_cards),
    })
}

/// Top-`k` unobserved candidates ordered by score (descending), then tie
/// cardinality (ascending, when present), then index. Scores within
/// [`SCORE_TIE_TOLERANCE`] of a group's leader count as tied.
pub fn select_batch(scores: &AcquisitionScores, k: usize, excluded: &[bool]) -> Result<Vec<usize>> {
    let n = scores.len();
    if excluded.len() != n {
        return Err(LseError::invalid(format!(
            "exclusion mask has {} entries for {n} scores",
            excluded.len()
        )));
    }
    if let Some(t) = &scores.tie_cards {
        if t.len() != n {
            return Err(LseError::invalid(
                "tie cardinalities and scores differ in length",
            ));
        }
    }
    let mut candidates: Vec<usize> = (0..n).filter(|&i| !excluded[i]).collect();
    if k > candidates.len() {
        return Err(LseError::Capacity {
            requested: k,
            available: candidates.len(),
        });
    }
    let s = &scores.scores;
    candidates.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));

    let tie = |i: usize| scores.tie_cards.as_ref().map_or(0, |t| t[i]);
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    while out.len() < k {
        let leader = s[candidates[start]];
        let mut end = start + 1;
        while end < candidates.len() && s[candidates[end]] >= leader - SCORE_TIE_TOLERANCE {
            end += 1;
        }
        let group = &mut candidates[start..end];
        group.sort_by_key(|&i| (tie(i), i));
        out.extend(group.iter().take(k - out.len()));
        start = end;
    }
    Ok(out)
}

pub fn write_scores_csv<W: Write>(scores: &AcquisitionScores, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "score", "tie_card"])?;
    for (i, s) in scores.scores.iter().enumerate() {
        let tie = scores
            .tie_cards
            .as_ref()
            .map(|t| t[i].to_string())
            .unwrap_or_default();
        w.write_record([i.to_string(), s.to_string(), tie])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use std::f64::consts::LN_2;

    fn single_point(values: &[f64]) -> PredictionEnsemble {
        PredictionEnsemble::from_passes(
            Array2::from_shape_vec((values.len(), 1), values.to_vec()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn explicit_mi_at_half() {
        let ens = single_point(&[1.2, 0.8, 1.5, 0.7]);
        let s = acq_explicit_mi(&ens, 1.0);
        assert!((s.scores[0] - LN_2).abs() < 1e-15);
        assert!((s.scores[0] - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn explicit_mi_certain_point() {
        let ens = single_point(&[2.0, 3.0, 4.0]);
        assert_eq!(acq_explicit_mi(&ens, 1.0).scores[0], 0.0);
        assert_eq!(acq_explicit_entropy(&ens, 1.0).scores[0], 0.0);
        assert_eq!(acq_explicit_varratio(&ens, 1.0).scores[0], 0.0);
        let below = single_point(&[-2.0, -3.0]);
        assert_eq!(acq_explicit_entropy(&below, 1.0).scores[0], 0.0);
    }

    #[test]
    fn explicit_three_quarters() {
        // reference: -(0.75 ln 0.75 + 0.25 ln 0.25)
        let reference = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        assert!((reference - 0.562335).abs() < 1e-6);
        let ens = single_point(&[2.0, 2.0, 2.0, 0.0]);
        assert!((acq_explicit_mi(&ens, 1.0).scores[0] - reference).abs() < 1e-15);
        assert!((acq_explicit_entropy(&ens, 1.0).scores[0] - reference).abs() < 1e-15);
        assert_eq!(acq_explicit_varratio(&ens, 1.0).scores[0], 0.25);
        let quarter = single_point(&[2.0, 0.0, 0.0, 0.0]);
        assert!((acq_explicit_entropy(&quarter, 1.0).scores[0] - reference).abs() < 1e-15);
    }

    #[test]
    fn entropy_matches_mi_in_hard_mode() {
        let ens = PredictionEnsemble::from_passes(array![
            [1.2, 0.1, 3.0],
            [0.8, 0.2, 3.0],
            [1.5, 1.3, 3.0],
            [0.7, 0.4, 0.0]
        ])
        .unwrap();
        assert_eq!(acq_explicit_mi(&ens, 1.0), acq_explicit_entropy(&ens, 1.0));
        let v = acq_explicit_varratio(&ens, 1.0).scores;
        assert_eq!(v, vec![0.5, 0.25, 0.25]);
    }

    #[test]
    fn soft_mode_is_bounded_and_nonnegative() {
        let ens = single_point(&[1.2, 0.8, 1.5, 0.7, 1.0]);
        let s = acq_explicit_mi_with(&ens, 1.0, IndicatorMode::Soft { noise_std: 0.3 }).unwrap();
        assert!(s.scores[0] >= 0.0 && s.scores[0] <= LN_2);
        assert!(acq_explicit_mi_with(&ens, 1.0, IndicatorMode::Soft { noise_std: 0.0 }).is_err());
    }

    fn worked_example() -> PredictionEnsemble {
        // mean of the other points is [_, 2, 4]; passes at x = 0 are [1, 5]
        PredictionEnsemble::from_passes(array![[1.0, 2.0, 4.0], [5.0, 2.0, 4.0]]).unwrap()
    }

    #[test]
    fn g_values_worked_example() {
        let g = implicit_g_values(&worked_example(), 0.5, 0).unwrap();
        assert_eq!(g.thresholds, vec![2.0, 2.5]);
        assert_eq!(g.q_values, vec![1, 2]);
    }

    #[test]
    fn implicit_mi_worked_example() {
        let s = acq_implicit_mi(&worked_example(), 0.5).unwrap();
        assert!((s.scores[0] - LN_2).abs() < 1e-15);
        assert_eq!(s.tie_cards.as_ref().unwrap()[0], 1);
    }

    #[test]
    fn zero_ratio_counts_everything() {
        let ens =
            PredictionEnsemble::from_passes(array![[1.0, 2.0, 3.0], [0.5, 2.5, 3.5]]).unwrap();
        for x in 0..3 {
            assert_eq!(
                implicit_g_values(&ens, 0.0, x).unwrap().q_values,
                vec![3, 3]
            );
        }
    }

    #[test]
    fn identical_passes_give_zero_scores() {
        let ens =
            PredictionEnsemble::from_passes(array![[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]).unwrap();
        let g = implicit_g_values(&ens, 0.7, 1).unwrap();
        assert!(g.q_values.windows(2).all(|w| w[0] == w[1]));
        assert!(acq_implicit_mi(&ens, 0.7)
            .unwrap()
            .scores
            .iter()
            .all(|&s| s == 0.0));
        let single = PredictionEnsemble::from_passes(array![[1.0, 5.0, 3.0]]).unwrap();
        assert!(acq_implicit_mi(&single, 0.7)
            .unwrap()
            .scores
            .iter()
            .all(|&s| s == 0.0));
    }

    #[test]
    fn implicit_rejects_bad_ratio() {
        assert!(acq_implicit_mi(&worked_example(), 1.5).is_err());
    }

    #[test]
    fn implicit_variants() {
        let ens = worked_example();
        let e = acq_implicit_entropy(&ens, 0.5).unwrap();
        assert_eq!(e, acq_implicit_mi(&ens, 0.5).unwrap());
        let v = acq_implicit_varratio(&ens, 0.5).unwrap();
        assert_eq!(v.scores[0], 0.5);
    }

    #[test]
    fn batch_ordering_with_ties() {
        let scores = AcquisitionScores {
            scores: vec![0.3, 0.9, 0.9, 0.1],
            tie_cards: Some(vec![0, 5, 2, 0]),
        };
        assert_eq!(select_batch(&scores, 2, &[false; 4]).unwrap(), vec![2, 1]);
    }

    #[test]
    fn batch_argmax_and_permutation() {
        let scores = AcquisitionScores::new(vec![0.3, 0.1, 0.7, 0.5]);
        assert_eq!(select_batch(&scores, 1, &[false; 4]).unwrap(), vec![2]);
        let mut all = select_batch(&scores, 4, &[false; 4]).unwrap();
        assert_eq!(all, vec![2, 3, 0, 1]);
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
    }

    #[test]
    fn batch_tolerance_and_exclusion() {
        let scores = AcquisitionScores::new(vec![0.5, 0.5 + 5e-10, 0.9]);
        // 0 and 1 tie within tolerance, so the lower index wins
        assert_eq!(
            select_batch(&scores, 3, &[false; 3]).unwrap(),
            vec![2, 0, 1]
        );
        assert_eq!(
            select_batch(&scores, 1, &[false, false, true]).unwrap(),
            vec![0]
        );
        assert!(matches!(
            select_batch(&scores, 3, &[false, false, true]),
            Err(LseError::Capacity {
                requested: 3,
                available: 2
            })
        ));
    }

    #[test]
    fn scores_csv() {
        let scores = AcquisitionScores {
            scores: vec![0.5, 0.25],
            tie_cards: Some(vec![3, 1]),
        };
        let mut buf = Vec::new();
        write_scores_csv(&scores, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "index,score,tie_card\n0,0.5,3\n1,0.25,1\n"
        );
    }
}
