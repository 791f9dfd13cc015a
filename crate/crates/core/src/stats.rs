//! Membership-inference endpoints from score lists: ROC, AUC, TPR at fixed
//! FPR, DeLong and bootstrap intervals, and Holm–Bonferroni.
//!
//! Every function takes member and nonmember scores separately. Scores are
//! oriented "higher ⇒ member" and classified with `score > θ`, so all
//! samples sharing a score flip together.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::diffusion::Split;
use crate::ledger::ComputeLedger;
use crate::rng::{mix64, GaussianStream};

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("need at least {need} member and {need} nonmember scores (got {members}/{nonmembers})")]
    ClassSize { need: usize, members: usize, nonmembers: usize },
    #[error("non-finite score for {0}")]
    NonFiniteScore(String),
    #[error("dev-nonmember clip {0} must not be scored")]
    DevSplit(String),
    #[error("p-value {0} outside [0, 1]")]
    PValueRange(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// One scored clip under one attack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub split: Split,
    pub attack: String,
    pub score: f64,
    pub repetitions: usize,
    pub t: usize,
    #[serde(default)]
    pub saturated: bool,
    pub ledger: ComputeLedger,
    #[serde(default)]
    pub precheck_ledger: ComputeLedger,
    /// Degradation per metric kind at the returned budget.
    #[serde(default)]
    pub secondary: BTreeMap<String, f64>,
}

impl ScoreRecord {
    pub fn validate(&self) -> Result<(), StatsError> {
        if self.split == Split::DevNonmember {
            return Err(StatsError::DevSplit(self.sample_id.clone()));
        }
        if !self.score.is_finite() {
            return Err(StatsError::NonFiniteScore(self.sample_id.clone()));
        }
        Ok(())
    }
}

/// Member and nonmember scores of a record set.
pub fn split_scores(records: &[ScoreRecord]) -> Result<(Vec<f64>, Vec<f64>), StatsError> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for r in records {
        r.validate()?;
        match r.split {
            Split::Member => pos.push(r.score),
            _ => neg.push(r.score),
        }
    }
    Ok((pos, neg))
}

fn check(pos: &[f64], neg: &[f64], need: usize) -> Result<(), StatsError> {
    if pos.len() < need || neg.len() < need {
        return Err(StatsError::ClassSize {
            need,
            members: pos.len(),
            nonmembers: neg.len(),
        });
    }
    if let Some(v) = pos.iter().chain(neg).find(|v| !v.is_finite()) {
        return Err(StatsError::NonFiniteScore(format!("{v}")));
    }
    Ok(())
}

/// 1-based midranks of `v` (ties share the average rank).
fn midranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Structural components `(V10, V01)`: for each member the fraction of
/// nonmembers it beats, and for each nonmember the fraction of members
/// beating it, ties counted ½.
fn structural_components(pos: &[f64], neg: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (m, n) = (pos.len(), neg.len());
    let all: Vec<f64> = pos.iter().chain(neg).copied().collect();
    let rz = midranks(&all);
    let rx = midranks(pos);
    let ry = midranks(neg);
    let v10 = (0..m).map(|i| (rz[i] - rx[i]) / n as f64).collect();
    let v01 = (0..n).map(|j| 1.0 - (rz[m + j] - ry[j]) / m as f64).collect();
    (v10, v01)
}

/// Mann–Whitney AUC: `P(member > nonmember) + ½·P(tie)`.
pub fn auc(pos: &[f64], neg: &[f64]) -> Result<f64, StatsError> {
    check(pos, neg, 1)?;
    let all: Vec<f64> = pos.iter().chain(neg).copied().collect();
    let rz = midranks(&all);
    let rx = midranks(pos);
    // Half-integer pair count, exact in f64; one rounding at the division.
    let u: f64 = (0..pos.len()).map(|i| rz[i] - rx[i]).sum();
    Ok(u / (pos.len() * neg.len()) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `thresholds[i]` is the smallest score classified as member at point
    /// `i + 1`; point 0 is `(0, 0)`.
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
}

pub fn roc(pos: &[f64], neg: &[f64]) -> Result<RocCurve, StatsError> {
    check(pos, neg, 1)?;
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (m, n) = (pos.len() as f64, neg.len() as f64);
    let mut curve = RocCurve {
        thresholds: Vec::new(),
        fpr: vec![0.0],
        tpr: vec![0.0],
    };
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.thresholds.push(s);
        curve.fpr.push(fp as f64 / n);
        curve.tpr.push(tp as f64 / m);
    }
    Ok(curve)
}

/// Largest TPR over thresholds whose empirical FPR is at most `target`.
pub fn tpr_at_fpr(pos: &[f64], neg: &[f64], target: f64) -> Result<f64, StatsError> {
    if !(0.0..=1.0).contains(&target) {
        return Err(StatsError::InvalidArgument(format!("FPR target {target}")));
    }
    let c = roc(pos, neg)?;
    Ok(c
        .fpr
        .iter()
        .zip(&c.tpr)
        .filter(|(f, _)| **f <= target + 1e-12)
        .map(|(_, t)| *t)
        .fold(0.0, f64::max))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntervalMethod {
    Delong,
    BootstrapPercentile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalEstimate {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub method: IntervalMethod,
    pub level: f64,
    /// Zero-variance estimate (e.g. perfect separation).
    #[serde(default)]
    pub degenerate: bool,
}

fn check_level(level: f64) -> Result<(), StatsError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(StatsError::InvalidArgument(format!("confidence level {level}")));
    }
    Ok(())
}

fn sample_variance(v: &[f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

/// DeLong variance of the AUC: `S10/m + S01/n`.
pub fn delong_variance(pos: &[f64], neg: &[f64]) -> Result<f64, StatsError> {
    check(pos, neg, 2)?;
    let (v10, v01) = structural_components(pos, neg);
    Ok(sample_variance(&v10) / pos.len() as f64 + sample_variance(&v01) / neg.len() as f64)
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

/// Normal-approximation AUC interval with DeLong's variance, clipped to
/// `[0, 1]`.
pub fn delong_ci(pos: &[f64], neg: &[f64], level: f64) -> Result<IntervalEstimate, StatsError> {
    check_level(level)?;
    let var = delong_variance(pos, neg)?;
    let point = auc(pos, neg)?;
    let z = std_normal().inverse_cdf(0.5 + level / 2.0);
    let half = z * var.max(0.0).sqrt();
    Ok(IntervalEstimate {
        point,
        lower: (point - half).clamp(0.0, 1.0),
        upper: (point + half).clamp(0.0, 1.0),
        method: IntervalMethod::Delong,
        level,
        degenerate: var <= 0.0,
    })
}

/// One-sided DeLong p-value for `H₀: AUC ≤ 0.5`.
pub fn delong_p_value(pos: &[f64], neg: &[f64]) -> Result<f64, StatsError> {
    let var = delong_variance(pos, neg)?;
    let a = auc(pos, neg)?;
    if var <= 0.0 {
        return Ok(if a > 0.5 { 0.0 } else { 1.0 });
    }
    Ok(1.0 - std_normal().cdf((a - 0.5) / var.sqrt()))
}

/// `⌈q·len⌉`-th smallest value (nearest rank), `q ∈ (0, 1]`.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let k = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[k - 1]
}

/// Percentile bootstrap with members and nonmembers resampled
/// independently. Resample `i` draws from a stream seeded by `(seed, i)`, so
/// the interval does not depend on thread count.
///
/// The interval is widened to contain the point estimate when the
/// percentile bounds miss it, which happens for step-like statistics such as
/// TPR at tiny FPR.
pub fn bootstrap_ci<F>(
    pos: &[f64],
    neg: &[f64],
    statistic: F,
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<IntervalEstimate, StatsError>
where
    F: Fn(&[f64], &[f64]) -> Result<f64, StatsError> + Sync,
{
    check_level(level)?;
    check(pos, neg, 1)?;
    if resamples == 0 {
        return Err(StatsError::InvalidArgument("resamples must be ≥ 1".into()));
    }
    let point = statistic(pos, neg)?;
    let mut values: Vec<f64> = (0..resamples)
        .into_par_iter()
        .map(|i| {
            let mut rng = GaussianStream::new(mix64(seed ^ mix64(i as u64)));
            let p: Vec<f64> = (0..pos.len()).map(|_| pos[rng.below(pos.len())]).collect();
            let n: Vec<f64> = (0..neg.len()).map(|_| neg[rng.below(neg.len())]).collect();
            statistic(&p, &n)
        })
        .collect::<Result<_, _>>()?;
    values.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let lower = if tail * resamples as f64 >= 1.0 { nearest_rank(&values, tail) } else { values[0] };
    let upper = nearest_rank(&values, 1.0 - tail);
    Ok(IntervalEstimate {
        point,
        lower: lower.min(point),
        upper: upper.max(point),
        method: IntervalMethod::BootstrapPercentile,
        level,
        degenerate: values[0] == values[values.len() - 1],
    })
}

/// Holm's step-down procedure; flags are returned in input order.
pub fn holm_bonferroni(p_values: &[f64], alpha: f64) -> Result<Vec<bool>, StatsError> {
    if let Some(&p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(StatsError::PValueRange(p));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
    let mut reject = vec![false; m];
    for (i, &k) in order.iter().enumerate() {
        if p_values[k] <= alpha / (m - i) as f64 {
            reject[k] = true;
        } else {
            break;
        }
    }
    Ok(reject)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_auc(pos: &[f64], neg: &[f64]) -> f64 {
        let mut s = 0.0;
        for p in pos {
            for n in neg {
                s += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
            }
        }
        s / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.2], &[0.8, 0.1]).unwrap(), 0.75);
        assert_eq!(auc(&[0.5; 3], &[0.5; 4]).unwrap(), 0.5);
        assert!(matches!(auc(&[], &[1.0]), Err(StatsError::ClassSize { .. })));
    }

    #[test]
    fn auc_matches_pair_counting_with_ties() {
        let mut rng = GaussianStream::new(1);
        for _ in 0..50 {
            let m = 1 + rng.below(30);
            let n = 1 + rng.below(30);
            let pos: Vec<f64> = (0..m).map(|_| (rng.normal() * 3.0).round()).collect();
            let neg: Vec<f64> = (0..n).map(|_| (rng.normal() * 3.0).round()).collect();
            assert!((auc(&pos, &neg).unwrap() - brute_auc(&pos, &neg)).abs() < 1e-12);
            let swapped = auc(&neg, &pos).unwrap();
            assert!((auc(&pos, &neg).unwrap() + swapped - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn roc_endpoints_and_monotonicity() {
        let c = roc(&[0.9, 0.5, 0.5], &[0.5, 0.1]).unwrap();
        assert_eq!((c.fpr[0], c.tpr[0]), (0.0, 0.0));
        assert_eq!((*c.fpr.last().unwrap(), *c.tpr.last().unwrap()), (1.0, 1.0));
        assert!(c.fpr.windows(2).all(|w| w[0] <= w[1]) && c.tpr.windows(2).all(|w| w[0] <= w[1]));
        // The tie at 0.5 flips one member pair and one nonmember together.
        assert_eq!(c.thresholds, vec![0.9, 0.5, 0.1]);
        assert_eq!(c.tpr, vec![0.0, 1.0 / 3.0, 1.0, 1.0]);
    }

    #[test]
    fn tpr_at_fpr_examples() {
        let (pos, neg) = ([0.9, 0.7, 0.4], [0.8, 0.3, 0.2, 0.1]);
        // Threshold 0.3 admits 0.8 only among nonmembers (FPR 1/4) and all
        // three members.
        assert_eq!(tpr_at_fpr(&pos, &neg, 0.25).unwrap(), 1.0);
        assert_eq!(tpr_at_fpr(&pos, &neg, 0.2).unwrap(), 1.0 / 3.0);
        assert_eq!(tpr_at_fpr(&[3.0, 4.0], &[1.0, 2.0], 0.001).unwrap(), 1.0);
    }

    #[test]
    fn delong_hand_computation() {
        // V10 = (1, ½), V01 = (½, 1): S10 = S01 = 1/8, var = 1/16 + 1/16.
        let v = delong_variance(&[0.9, 0.2], &[0.8, 0.1]).unwrap();
        assert!((v - 0.125).abs() < 1e-15);
        let ci = delong_ci(&[0.9, 0.8], &[0.1, 0.2], 0.95).unwrap();
        assert!(ci.degenerate && ci.lower == 1.0 && ci.upper == 1.0);
        assert!(delong_ci(&[0.9], &[0.1, 0.2], 0.95).is_err());
    }

    #[test]
    fn holm_examples() {
        assert_eq!(holm_bonferroni(&[0.01, 0.04, 0.03], 0.05).unwrap(), vec![true, false, false]);
        assert_eq!(holm_bonferroni(&[1.0, 1.0], 0.05).unwrap(), vec![false, false]);
        assert_eq!(holm_bonferroni(&[0.04], 0.05).unwrap(), vec![true]);
        assert!(holm_bonferroni(&[1.2], 0.05).is_err());
    }

    #[test]
    fn bootstrap_is_seeded_and_degenerate_on_constant_scores() {
        let stat = |p: &[f64], n: &[f64]| tpr_at_fpr(p, n, 0.01);
        let ci = bootstrap_ci(&[0.5; 5], &[0.5; 5], stat, 500, 0.95, 3).unwrap();
        assert!(ci.lower == ci.point && ci.upper == ci.point && ci.degenerate);
        let mut rng = GaussianStream::new(2);
        let pos: Vec<f64> = (0..30).map(|_| rng.normal() + 1.0).collect();
        let neg: Vec<f64> = (0..30).map(|_| rng.normal()).collect();
        let a = bootstrap_ci(&pos, &neg, stat, 1000, 0.95, 9).unwrap();
        let b = bootstrap_ci(&pos, &neg, stat, 1000, 0.95, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn record_validation() {
        let mut r = ScoreRecord {
            sample_id: "x".into(),
            split: Split::DevNonmember,
            attack: "a".into(),
            score: 1.0,
            repetitions: 1,
            t: 1,
            saturated: false,
            ledger: ComputeLedger::default(),
            precheck_ledger: ComputeLedger::default(),
            secondary: BTreeMap::new(),
        };
        assert!(matches!(split_scores(std::slice::from_ref(&r)), Err(StatsError::DevSplit(_))));
        r.split = Split::Member;
        r.score = f64::NAN;
        assert!(matches!(r.validate(), Err(StatsError::NonFiniteScore(_))));
    }
}
