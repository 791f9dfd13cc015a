//! Ablation grids over the timestep ratio, the budget ceiling and the
//! distance metric, with Holm correction across every cell.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stages::{probe_context, prober};
use super::{write_json, ExperimentConfig, PipelineError, RunDir, ARTIFACT_VERSION};
use crate::attack::{AttackConfig, ProbeContext};
use crate::calibration::{calibrate_tau, CalibrationConfig, CalibrationResult};
use crate::diffusion::{Clip, Split, TimestepChoice};
use crate::distances::{Metric, MetricKind};
use crate::stats::{delong_ci, delong_p_value, holm_bonferroni, IntervalEstimate};

/// Bisection bracket of one clip in one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bracket {
    pub sample_id: String,
    pub split: Split,
    pub lower: f64,
    pub upper: f64,
    pub saturated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    /// `"t_ratio"`, `"eta_max"` or `"metric"`.
    pub axis: String,
    pub value: String,
    pub t: usize,
    pub metric: MetricKind,
    pub eta_max: f64,
    pub tau: f64,
    pub auc: IntervalEstimate,
    pub p_value: f64,
    pub holm_reject: bool,
    pub saturation_rate: f64,
    /// Every bracket satisfies `0 ≤ l ≤ u ≤ η_max` with width at most
    /// `η_max·2^−B`, or is saturated at `η_max`.
    pub brackets_valid: bool,
    pub brackets: Vec<Bracket>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub artifact_version: u32,
    pub config_fingerprint: String,
    pub alpha: f64,
    pub clips_per_split: usize,
    pub cells: Vec<SweepCell>,
}

fn bracket_ok(b: &Bracket, eta_max: f64, steps: usize) -> bool {
    let ordered = 0.0 <= b.lower && b.lower <= b.upper && b.upper <= eta_max;
    let width = eta_max * 0.5f64.powi(steps as i32);
    ordered && (b.saturated && b.lower == eta_max || b.upper - b.lower <= width * (1.0 + 1e-12))
}

fn take(clips: &[Clip], split: Split, k: Option<usize>) -> Vec<Clip> {
    clips.iter().filter(|c| c.split == split).take(k.unwrap_or(usize::MAX)).cloned().collect()
}

struct Grid<'a> {
    config: &'a ExperimentConfig,
    ctx: &'a ProbeContext,
    dev: Vec<Clip>,
    scored: Vec<Clip>,
    calibrations: BTreeMap<(usize, MetricKind), CalibrationResult>,
}

impl Grid<'_> {
    fn calibration(&mut self, timestep: TimestepChoice, metric: MetricKind) -> Result<CalibrationResult, PipelineError> {
        let t = self.ctx.op.schedule().resolve(timestep)?;
        if let Some(c) = self.calibrations.get(&(t, metric)) {
            return Ok(c.clone());
        }
        let cfg = CalibrationConfig {
            timestep,
            metric,
            ..self.config.effective_calibration()
        };
        let m = Metric::new(metric, &self.config.metric)?;
        let result = calibrate_tau(&self.dev, self.ctx, &m, &cfg)?;
        self.calibrations.insert((t, metric), result.clone());
        Ok(result)
    }

    fn cell(&mut self, axis: &str, value: String, attack: AttackConfig) -> Result<SweepCell, PipelineError> {
        let calibration = self.calibration(attack.timestep, attack.metric)?;
        let prober = prober(self.ctx.clone(), self.config, &attack, &calibration)?;
        let t = prober.timestep()?;
        let results: Vec<_> = self
            .scored
            .par_iter()
            .map(|c| prober.cost(c, 0).map(|(r, _)| (c, r)))
            .collect::<Result<_, _>>()?;
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        let mut brackets = Vec::new();
        for (clip, r) in &results {
            if clip.split == Split::Member {
                pos.push(r.c_adv);
            } else {
                neg.push(r.c_adv);
            }
            brackets.push(Bracket {
                sample_id: clip.id.clone(),
                split: clip.split,
                lower: r.lower,
                upper: r.upper,
                saturated: r.saturated_low,
            });
        }
        Ok(SweepCell {
            axis: axis.to_string(),
            value,
            t,
            metric: attack.metric,
            eta_max: attack.eta_max,
            tau: calibration.tau,
            auc: delong_ci(&pos, &neg, self.config.evaluation.level)?,
            p_value: delong_p_value(&pos, &neg)?,
            holm_reject: false,
            saturation_rate: brackets.iter().filter(|b| b.saturated).count() as f64 / brackets.len() as f64,
            brackets_valid: brackets.iter().all(|b| bracket_ok(b, attack.eta_max, attack.bisection_steps)),
            brackets,
        })
    }
}

pub fn sweep(run: &RunDir, config: &ExperimentConfig) -> Result<SweepReport, PipelineError> {
    let started = Instant::now();
    let (ctx, clips) = probe_context(run, config)?;
    let s = &config.sweep;
    let k = s.clips_per_split;
    let mut scored = take(&clips, Split::Member, k);
    scored.extend(take(&clips, Split::EvalNonmember, k));
    let mut base = config.attack.clone();
    base.steps = s.steps.unwrap_or(base.steps);
    base.restarts = s.restarts.unwrap_or(base.restarts);
    base.bisection_steps = s.bisection_steps.unwrap_or(base.bisection_steps);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| PipelineError::Config(format!("worker pool: {e}")))?;
    let mut cells = pool.install(|| -> Result<Vec<SweepCell>, PipelineError> {
        let mut grid = Grid {
            config,
            ctx: &ctx,
            dev: take(&clips, Split::DevNonmember, k),
            scored,
            calibrations: BTreeMap::new(),
        };
        let mut cells = Vec::new();
        for &r in &s.t_ratios {
            let a = AttackConfig { timestep: TimestepChoice::TRatio(r), ..base.clone() };
            cells.push(grid.cell("t_ratio", r.to_string(), a)?);
        }
        for &eta in &s.eta_grid {
            let a = AttackConfig { eta_max: eta, ..base.clone() };
            cells.push(grid.cell("eta_max", eta.to_string(), a)?);
        }
        for &m in &s.metrics {
            let a = AttackConfig { metric: m, ..base.clone() };
            cells.push(grid.cell("metric", m.to_string(), a)?);
        }
        Ok(cells)
    })?;
    let p: Vec<f64> = cells.iter().map(|c| c.p_value).collect();
    for (cell, reject) in cells.iter_mut().zip(holm_bonferroni(&p, config.evaluation.alpha)?) {
        cell.holm_reject = reject;
    }
    let report = SweepReport {
        artifact_version: ARTIFACT_VERSION,
        config_fingerprint: config.fingerprint(),
        alpha: config.evaluation.alpha,
        clips_per_split: k.unwrap_or(config.corpus.members.min(config.corpus.eval_nonmembers)),
        cells,
    };
    write_json(&run.sweep(), &report)?;
    let path = run.timing();
    let mut map: BTreeMap<String, f64> = super::read_json(&path).unwrap_or_default();
    map.insert("sweep".into(), started.elapsed().as_secs_f64());
    write_json(&path, &map)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bracket_validity() {
        let b = |lower, upper, saturated| Bracket { sample_id: "x".into(), split: Split::Member, lower, upper, saturated };
        assert!(bracket_ok(&b(0.4, 0.4 + 0.8 / 1024.0, false), 0.8, 10));
        assert!(!bracket_ok(&b(0.4, 0.41, false), 0.8, 10));
        assert!(!bracket_ok(&b(0.5, 0.4, false), 0.8, 10));
        assert!(bracket_ok(&b(0.8, 0.8, true), 0.8, 10));
        assert!(!bracket_ok(&b(0.0, 0.9, false), 0.8, 1));
    }
}
