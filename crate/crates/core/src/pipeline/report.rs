//! Endpoint evaluation and the run report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{PipelineError, ARTIFACT_VERSION};
use crate::attack::ATTACK_NAME;
use crate::ledger::ComputeLedger;
use crate::stats::{
    bootstrap_ci, delong_ci, delong_p_value, roc, split_scores, tpr_at_fpr, IntervalEstimate, RocCurve, ScoreRecord,
};

/// Attacks listed in the report without scores.
pub const NOT_IMPLEMENTED: &[&str] = &["secmi"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TprEstimate {
    pub fpr: f64,
    pub tpr: IntervalEstimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackEvaluation {
    pub attack: String,
    pub members: usize,
    pub nonmembers: usize,
    pub auc: IntervalEstimate,
    /// One-sided DeLong p-value for `AUC > 0.5`.
    pub auc_p_value: f64,
    pub tpr: Vec<TprEstimate>,
    pub median_member: f64,
    pub median_nonmember: f64,
    pub saturation_rate: f64,
    pub ledger: ComputeLedger,
    pub precheck_ledger: ComputeLedger,
    /// Mean model calls per scored clip, pre-check included.
    pub model_calls_per_sample: f64,
    pub roc: RocCurve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub artifact_version: u32,
    pub config_fingerprint: String,
    pub attacks: Vec<AttackEvaluation>,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len();
    if k % 2 == 1 {
        s[k / 2]
    } else {
        (s[k / 2 - 1] + s[k / 2]) / 2.0
    }
}

pub fn evaluate_records(
    attack: &str,
    records: &[ScoreRecord],
    config: &super::EvaluationConfig,
) -> Result<AttackEvaluation, PipelineError> {
    if records.is_empty() {
        return Err(PipelineError::Artifact(format!("no records for {attack}")));
    }
    let (pos, neg) = split_scores(records)?;
    let auc = delong_ci(&pos, &neg, config.level)?;
    let auc_p_value = delong_p_value(&pos, &neg)?;
    let mut tpr = Vec::new();
    for &fpr in &config.fpr_targets {
        let est = bootstrap_ci(
            &pos,
            &neg,
            |p, n| tpr_at_fpr(p, n, fpr),
            config.bootstrap_resamples,
            config.level,
            config.bootstrap_seed,
        )?;
        tpr.push(TprEstimate { fpr, tpr: est });
    }
    let ledger: ComputeLedger = records.iter().map(|r| r.ledger.counts_only()).sum();
    let precheck_ledger: ComputeLedger = records.iter().map(|r| r.precheck_ledger.counts_only()).sum();
    Ok(AttackEvaluation {
        attack: attack.to_string(),
        members: pos.len(),
        nonmembers: neg.len(),
        auc,
        auc_p_value,
        tpr,
        median_member: median(&pos),
        median_nonmember: median(&neg),
        saturation_rate: records.iter().filter(|r| r.saturated).count() as f64 / records.len() as f64,
        model_calls_per_sample: (ledger.model_calls() + precheck_ledger.model_calls()) as f64 / records.len() as f64,
        ledger,
        precheck_ledger,
        roc: roc(&pos, &neg)?,
    })
}

/// `ours − max(baselines)`; `None` without baselines.
pub fn delta_vs_best(ours: f64, baselines: &[f64]) -> Option<f64> {
    baselines.iter().copied().reduce(f64::max).map(|best| ours - best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub attack: String,
    pub auc: Option<IntervalEstimate>,
    pub tpr: Vec<TprEstimate>,
    pub saturation_rate: Option<f64>,
    pub model_calls_per_sample: Option<f64>,
    pub implemented: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub artifact_version: u32,
    pub config_fingerprint: String,
    pub calibration_fingerprint: Option<String>,
    pub tau: Option<f64>,
    pub rows: Vec<ReportRow>,
    /// Probe minus best baseline, per endpoint: `"auc"`, `"tpr@<fpr>"`.
    pub delta_vs_best_baseline: BTreeMap<String, f64>,
    pub ledgers: BTreeMap<String, ComputeLedger>,
    pub roc: BTreeMap<String, RocCurve>,
}

impl RunReport {
    pub fn build(
        evaluation: &Evaluation,
        calibration_fingerprint: Option<String>,
        tau: Option<f64>,
    ) -> Result<Self, PipelineError> {
        let mut rows: Vec<ReportRow> = evaluation
            .attacks
            .iter()
            .map(|a| ReportRow {
                attack: a.attack.clone(),
                auc: Some(a.auc.clone()),
                tpr: a.tpr.clone(),
                saturation_rate: Some(a.saturation_rate),
                model_calls_per_sample: Some(a.model_calls_per_sample),
                implemented: true,
            })
            .collect();
        rows.extend(NOT_IMPLEMENTED.iter().map(|name| ReportRow {
            attack: name.to_string(),
            auc: None,
            tpr: Vec::new(),
            saturation_rate: None,
            model_calls_per_sample: None,
            implemented: false,
        }));

        let mut delta = BTreeMap::new();
        if let Some(ours) = evaluation.attacks.iter().find(|a| a.attack == ATTACK_NAME) {
            let others: Vec<&_> = evaluation.attacks.iter().filter(|a| a.attack != ATTACK_NAME).collect();
            let aucs: Vec<f64> = others.iter().map(|a| a.auc.point).collect();
            if let Some(d) = delta_vs_best(ours.auc.point, &aucs) {
                delta.insert("auc".to_string(), d);
            }
            for (i, t) in ours.tpr.iter().enumerate() {
                let theirs: Vec<f64> = others.iter().filter_map(|a| a.tpr.get(i)).map(|x| x.tpr.point).collect();
                if let Some(d) = delta_vs_best(t.tpr.point, &theirs) {
                    delta.insert(format!("tpr@{}", t.fpr), d);
                }
            }
        }
        Ok(RunReport {
            artifact_version: ARTIFACT_VERSION,
            config_fingerprint: evaluation.config_fingerprint.clone(),
            calibration_fingerprint,
            tau,
            rows,
            delta_vs_best_baseline: delta,
            ledgers: evaluation.attacks.iter().map(|a| (a.attack.clone(), a.ledger + a.precheck_ledger)).collect(),
            roc: evaluation.attacks.iter().map(|a| (a.attack.clone(), a.roc.clone())).collect(),
        })
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "config {}", &self.config_fingerprint[..12.min(self.config_fingerprint.len())]);
        if let (Some(fp), Some(tau)) = (&self.calibration_fingerprint, self.tau) {
            let _ = writeln!(s, "calibration {fp}  tau={tau:.6e}");
        }
        let fprs: Vec<f64> = self.rows.iter().find(|r| r.implemented).map(|r| r.tpr.iter().map(|t| t.fpr).collect()).unwrap_or_default();
        let _ = write!(s, "\n{:<26} {:>24}", "attack", "AUC [CI]");
        for f in &fprs {
            let _ = write!(s, " {:>24}", format!("TPR@{}% [CI]", f * 100.0));
        }
        let _ = writeln!(s, " {:>9} {:>12}", "saturated", "calls/clip");
        for r in &self.rows {
            let _ = write!(s, "{:<26}", r.attack);
            if !r.implemented {
                let _ = writeln!(s, " not implemented");
                continue;
            }
            let cell = |e: &IntervalEstimate| format!("{:.3} [{:.3}, {:.3}]", e.point, e.lower, e.upper);
            let _ = write!(s, " {:>24}", r.auc.as_ref().map(cell).unwrap_or_default());
            for t in &r.tpr {
                let _ = write!(s, " {:>24}", cell(&t.tpr));
            }
            let _ = writeln!(
                s,
                " {:>8.1}% {:>12.0}",
                r.saturation_rate.unwrap_or(0.0) * 100.0,
                r.model_calls_per_sample.unwrap_or(0.0)
            );
        }
        if !self.delta_vs_best_baseline.is_empty() {
            let _ = writeln!(s, "\ndelta (ours - best baseline)");
            for (k, v) in &self.delta_vs_best_baseline {
                let _ = writeln!(s, "  {k:<12} {v:+.3}");
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::Split;
    use crate::pipeline::EvaluationConfig;

    #[test]
    fn delta_uses_best_baseline() {
        // TPR@1% on the DiffWave / MAESTRO row: 0.20 against a best of 0.12.
        let d = delta_vs_best(0.20, &[0.10, 0.12, 0.07]).unwrap();
        assert!((d - 0.08).abs() < 1e-12);
        let d = delta_vs_best(0.67, &[0.63]).unwrap();
        assert!((d - 0.04).abs() < 1e-12);
        assert_eq!(delta_vs_best(0.5, &[]), None);
    }

    fn records(attack: &str, member: &[f64], non: &[f64]) -> Vec<ScoreRecord> {
        let mk = |i: usize, split, score| ScoreRecord {
            sample_id: format!("c{i}"),
            split,
            attack: attack.into(),
            score,
            repetitions: 1,
            t: 60,
            saturated: false,
            ledger: ComputeLedger { network_calls: 10, ..Default::default() },
            precheck_ledger: ComputeLedger::default(),
            secondary: BTreeMap::new(),
        };
        member
            .iter()
            .enumerate()
            .map(|(i, &s)| mk(i, Split::Member, s))
            .chain(non.iter().enumerate().map(|(i, &s)| mk(100 + i, Split::EvalNonmember, s)))
            .collect()
    }

    #[test]
    fn empty_records_error_and_report_marks_secmi() {
        let cfg = EvaluationConfig { bootstrap_resamples: 50, ..Default::default() };
        let err = evaluate_records("x", &[], &cfg).unwrap_err();
        assert!(err.to_string().contains("no records"));

        let ours = evaluate_records(ATTACK_NAME, &records(ATTACK_NAME, &[3.0, 4.0, 5.0], &[1.0, 2.0, 3.5]), &cfg).unwrap();
        let loss = evaluate_records("loss-at-t", &records("loss-at-t", &[3.0, 1.0, 5.0], &[1.0, 2.0, 3.5]), &cfg).unwrap();
        assert_eq!(ours.auc.point, 8.0 / 9.0);
        assert_eq!(ours.median_member, 4.0);
        assert_eq!(ours.model_calls_per_sample, 10.0);
        let ev = Evaluation { artifact_version: 1, config_fingerprint: "abc".into(), attacks: vec![ours.clone(), loss.clone()] };
        let r = RunReport::build(&ev, None, None).unwrap();
        assert_eq!(r.delta_vs_best_baseline["auc"], ours.auc.point - loss.auc.point);
        assert!(r.rows.iter().any(|r| r.attack == "secmi" && !r.implemented));
        assert!(r.render().contains("not implemented"));
    }
}
