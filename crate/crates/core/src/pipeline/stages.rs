//! Stage runners. Each stage reads earlier artifacts from the run directory
//! and refuses to continue when they were produced for a different setup.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::report::{evaluate_records, Evaluation, RunReport};
use super::{load_scores, persist_scores, read_json, write_json, ExperimentConfig, PipelineError, RunDir, ARTIFACT_VERSION};
use crate::attack::{AttackConfig, ProbeContext, Prober, ATTACK_NAME};
use crate::baselines::{match_compute, run_baseline, unit_cost};
use crate::calibration::{calibrate_tau, CalibrationResult, Fingerprint};
use crate::corpus::{load_corpus, write_corpus, Manifest};
use crate::denoiser::{load_checkpoint_for, save_checkpoint, train as fit, ArchDescriptor, MlpDenoiser, TrainConfig};
use crate::diffusion::{Clip, NoiseSchedule, Split};
use crate::distances::{Metric, MetricKind};
use crate::ledger::ComputeLedger;
use crate::reverse::{LatentCodec, ReverseOperator};
use crate::rng::SeedPolicy;
use crate::stats::ScoreRecord;

fn pool(config: &ExperimentConfig) -> Result<rayon::ThreadPool, PipelineError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| PipelineError::Config(format!("worker pool: {e}")))
}

fn write_config(run: &RunDir, config: &ExperimentConfig) -> Result<(), PipelineError> {
    std::fs::create_dir_all(&run.root).map_err(|e| PipelineError::io(&run.root, e))?;
    std::fs::write(run.config(), config.to_toml()).map_err(|e| PipelineError::io(&run.config(), e))
}

/// Wall-clock per stage; the only artifact allowed to differ between runs.
fn record_timing(run: &RunDir, stage: &str, started: Instant) -> Result<(), PipelineError> {
    let path = run.timing();
    let mut map: BTreeMap<String, f64> = read_json(&path).unwrap_or_default();
    map.insert(stage.to_string(), started.elapsed().as_secs_f64());
    write_json(&path, &map)
}

fn corpus_fingerprint(manifest: &Manifest) -> String {
    let mut h = Sha256::new();
    for e in &manifest.clips {
        h.update(e.id.as_bytes());
        h.update(e.sha256.as_bytes());
    }
    hex::encode(h.finalize())
}

pub fn gen_data(run: &RunDir, config: &ExperimentConfig) -> Result<Manifest, PipelineError> {
    let started = Instant::now();
    write_config(run, config)?;
    let manifest = write_corpus(&run.corpus(), &config.effective_corpus())?;
    record_timing(run, "gen-data", started)?;
    Ok(manifest)
}

fn load_clips(run: &RunDir, config: &ExperimentConfig) -> Result<(Manifest, Vec<Clip>), PipelineError> {
    let (manifest, clips) = load_corpus(&run.corpus())?;
    if manifest.config != config.effective_corpus() {
        return Err(PipelineError::Artifact(
            "corpus on disk was generated from a different corpus config; rerun gen-data".into(),
        ));
    }
    Ok((manifest, clips))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub artifact_version: u32,
    pub arch: ArchDescriptor,
    pub schedule_fingerprint: String,
    pub corpus_fingerprint: String,
    pub latent_dim: Option<usize>,
    pub train: TrainConfig,
    /// Weighted training loss, every tenth step.
    pub loss_trace: Vec<f64>,
    pub final_loss: f64,
    /// Mean ε-MSE over a timestep grid, members and eval nonmembers.
    pub member_loss: f64,
    pub nonmember_loss: f64,
}

fn codec(config: &ExperimentConfig) -> Result<Option<Arc<LatentCodec>>, PipelineError> {
    config
        .denoiser
        .latent_dim
        .map(|m| LatentCodec::dct(config.corpus.clip_len, m).map(Arc::new))
        .transpose()
        .map_err(|e| PipelineError::Config(e.to_string()))
}

fn context(config: &ExperimentConfig, schedule: Arc<NoiseSchedule>, model: MlpDenoiser) -> Result<ProbeContext, PipelineError> {
    Ok(ProbeContext {
        op: ReverseOperator::new(schedule, Arc::new(model), config.reverse),
        codec: codec(config)?,
        seeds: SeedPolicy::new(config.probe_seed()),
    })
}

/// Mean ε-prediction MSE over ten evenly spaced timesteps and `reps` noise
/// draws per timestep.
pub fn denoising_loss(ctx: &ProbeContext, clips: &[Clip], reps: usize) -> Result<f64, PipelineError> {
    let steps = ctx.op.schedule().steps();
    let ts: Vec<usize> = (1..=10).map(|k| (k * steps / 10).max(1)).collect();
    let mut total = 0.0;
    for clip in clips {
        for &t in &ts {
            let mut scratch = ComputeLedger::default();
            total -= crate::baselines::loss_score(ctx, clip, t, reps, &mut scratch)?;
        }
    }
    Ok(total / (clips.len() * ts.len()) as f64)
}

pub fn train(run: &RunDir, config: &ExperimentConfig) -> Result<TrainSummary, PipelineError> {
    let started = Instant::now();
    write_config(run, config)?;
    let (manifest, clips) = load_clips(run, config)?;
    let schedule = Arc::new(config.schedule.build()?);
    let arch = config.denoiser.arch(config.corpus.clip_len);
    let codec = codec(config)?;
    let members: Vec<&Clip> = clips.iter().filter(|c| c.split == Split::Member).collect();
    let data: Vec<Vec<f64>> = members
        .iter()
        .map(|c| match &codec {
            Some(k) => k.encode_value(&c.samples).map_err(|e| PipelineError::Config(e.to_string())),
            None => Ok(c.samples.clone()),
        })
        .collect::<Result<_, _>>()?;
    let train_cfg = config.effective_train();
    let init = MlpDenoiser::init(arch.clone(), config.init_seed())?;
    let outcome = fit(init, &data, &schedule, &train_cfg)?;
    let path = run.checkpoint();
    std::fs::create_dir_all(path.parent().unwrap()).map_err(|e| PipelineError::io(&path, e))?;
    save_checkpoint(&outcome.model, &path)?;

    let ctx = context(config, schedule.clone(), outcome.model)?;
    let pick = |split| clips.iter().filter(|c| c.split == split).cloned().collect::<Vec<_>>();
    let summary = TrainSummary {
        artifact_version: ARTIFACT_VERSION,
        arch,
        schedule_fingerprint: schedule.fingerprint(),
        corpus_fingerprint: corpus_fingerprint(&manifest),
        latent_dim: config.denoiser.latent_dim,
        final_loss: outcome.loss_trace.last().copied().unwrap_or(f64::NAN),
        loss_trace: outcome.loss_trace.iter().step_by(10).copied().collect(),
        train: train_cfg,
        member_loss: denoising_loss(&ctx, &pick(Split::Member), 4)?,
        nonmember_loss: denoising_loss(&ctx, &pick(Split::EvalNonmember), 4)?,
    };
    write_json(&run.train_summary(), &summary)?;
    record_timing(run, "train", started)?;
    Ok(summary)
}

/// Loads the corpus and trained denoiser, checking both belong to `config`.
pub fn probe_context(run: &RunDir, config: &ExperimentConfig) -> Result<(ProbeContext, Vec<Clip>), PipelineError> {
    let (manifest, clips) = load_clips(run, config)?;
    let summary: TrainSummary = read_json(&run.train_summary())?;
    let schedule = Arc::new(config.schedule.build()?);
    if summary.schedule_fingerprint != schedule.fingerprint() {
        return Err(PipelineError::Artifact(format!(
            "checkpoint was trained with schedule {}, config has {}",
            &summary.schedule_fingerprint[..12],
            &schedule.fingerprint()[..12]
        )));
    }
    if summary.corpus_fingerprint != corpus_fingerprint(&manifest) {
        return Err(PipelineError::Artifact("checkpoint was trained on a different corpus".into()));
    }
    let model = load_checkpoint_for(&run.checkpoint(), &config.denoiser.arch(config.corpus.clip_len))?;
    Ok((context(config, schedule, model)?, clips))
}

fn of_split(clips: &[Clip], split: Split) -> Vec<Clip> {
    clips.iter().filter(|c| c.split == split).cloned().collect()
}

/// Members then eval nonmembers, in manifest order.
fn scored_clips(clips: &[Clip]) -> Vec<Clip> {
    clips.iter().filter(|c| c.split != Split::DevNonmember).cloned().collect()
}

pub fn calibrate(run: &RunDir, config: &ExperimentConfig) -> Result<CalibrationResult, PipelineError> {
    let started = Instant::now();
    write_config(run, config)?;
    let (ctx, clips) = probe_context(run, config)?;
    let metric = Metric::new(config.calibration.metric, &config.metric)?;
    let dev = of_split(&clips, Split::DevNonmember);
    let result = pool(config)?.install(|| calibrate_tau(&dev, &ctx, &metric, &config.effective_calibration()))?;
    write_json(&run.calibration(), &result)?;
    record_timing(run, "calibrate", started)?;
    Ok(result)
}

/// The prober for `config`, with `τ` from the calibration artifact.
pub(crate) fn prober(
    ctx: ProbeContext,
    config: &ExperimentConfig,
    attack: &AttackConfig,
    calibration: &CalibrationResult,
) -> Result<Prober, PipelineError> {
    let t = ctx.op.schedule().resolve(attack.timestep)?;
    calibration.fingerprint.ensure_matches(&Fingerprint::of(&ctx, attack.metric, t))?;
    if !calibration.valid {
        return Err(PipelineError::Numerical(format!(
            "calibrated threshold τ={} cannot separate anything; raise calibration.eta_ref",
            calibration.tau
        )));
    }
    Ok(Prober {
        metric: Metric::new(attack.metric, &config.metric)?,
        secondary: MetricKind::ALL.iter().map(|&k| Metric::new(k, &config.metric)).collect::<Result<_, _>>()?,
        config: AttackConfig {
            tau: Some(calibration.tau),
            ..attack.clone()
        },
        ctx,
    })
}

pub fn attack(run: &RunDir, config: &ExperimentConfig) -> Result<Vec<ScoreRecord>, PipelineError> {
    let started = Instant::now();
    write_config(run, config)?;
    let (ctx, clips) = probe_context(run, config)?;
    let calibration: CalibrationResult = read_json(&run.calibration())?;
    let prober = prober(ctx, config, &config.attack, &calibration)?;
    let targets = scored_clips(&clips);
    let records: Vec<ScoreRecord> =
        pool(config)?.install(|| targets.par_iter().map(|c| prober.score_sample(c)).collect::<Result<_, _>>())?;
    std::fs::create_dir_all(run.scores_dir()).map_err(|e| PipelineError::io(&run.scores_dir(), e))?;
    persist_scores(&records, &run.scores(ATTACK_NAME))?;
    record_timing(run, "attack", started)?;
    Ok(records)
}

/// How a baseline's repetition count was matched to the probe's compute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParityRecord {
    pub attack: String,
    pub matched: bool,
    /// Mean probe model calls per clip, pre-check included.
    pub target_calls: f64,
    pub unit_calls: f64,
    pub repetitions: usize,
    pub achieved_calls: f64,
    pub relative_error: f64,
}

fn mean_calls(records: &[ScoreRecord]) -> f64 {
    records
        .iter()
        .map(|r| (r.ledger.model_calls() + r.precheck_ledger.model_calls()) as f64)
        .sum::<f64>()
        / records.len().max(1) as f64
}

pub fn baseline(run: &RunDir, config: &ExperimentConfig) -> Result<Vec<ParityRecord>, PipelineError> {
    let started = Instant::now();
    write_config(run, config)?;
    let (ctx, clips) = probe_context(run, config)?;
    let metric = Metric::new(config.attack.metric, &config.metric)?;
    let targets = scored_clips(&clips);
    let warmup = clips
        .iter()
        .find(|c| c.split == Split::DevNonmember)
        .ok_or_else(|| PipelineError::Artifact("no dev clip for the warm-up batch".into()))?;
    let target = if config.baselines.iter().any(|b| b.match_compute) {
        let probe = load_scores(&run.scores(ATTACK_NAME))?;
        if probe.is_empty() {
            return Err(PipelineError::Artifact("no records in the probe score file".into()));
        }
        mean_calls(&probe)
    } else {
        0.0
    };
    let pool = pool(config)?;
    std::fs::create_dir_all(run.scores_dir()).map_err(|e| PipelineError::io(&run.scores_dir(), e))?;
    let mut parity = Vec::new();
    for b in &config.baselines {
        let unit = unit_cost(&ctx, &metric, warmup, b)?.model_calls() as f64;
        let reps = if b.match_compute { match_compute(target, unit)? } else { b.repetitions };
        let records: Vec<ScoreRecord> =
            pool.install(|| targets.par_iter().map(|c| run_baseline(&ctx, &metric, c, b, reps)).collect::<Result<_, _>>())?;
        let achieved = mean_calls(&records);
        let relative_error = if target > 0.0 { (achieved - target).abs() / target } else { 0.0 };
        if b.match_compute && relative_error > 0.05 {
            return Err(PipelineError::Config(format!(
                "{}: achieved {achieved:.0} calls against a target of {target:.0}",
                b.kind.as_str()
            )));
        }
        persist_scores(&records, &run.scores(b.kind.as_str()))?;
        parity.push(ParityRecord {
            attack: b.kind.as_str().to_string(),
            matched: b.match_compute,
            target_calls: target,
            unit_calls: unit,
            repetitions: reps,
            achieved_calls: achieved,
            relative_error,
        });
    }
    write_json(&run.parity(), &parity)?;
    record_timing(run, "baseline", started)?;
    Ok(parity)
}

/// Score files in the run, probe first, then baselines in name order.
fn score_files(run: &RunDir) -> Result<Vec<(String, std::path::PathBuf)>, PipelineError> {
    let dir = run.scores_dir();
    let entries = std::fs::read_dir(&dir)
        .map_err(|e| PipelineError::Artifact(format!("missing {} ({e}); run attack first", dir.display())))?;
    let mut files: Vec<(String, std::path::PathBuf)> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .map(|p| (p.file_stem().unwrap().to_string_lossy().into_owned(), p))
        .collect();
    files.sort_by_key(|(name, _)| (name != ATTACK_NAME, name.clone()));
    if files.is_empty() {
        return Err(PipelineError::Artifact(format!("no score files in {}", dir.display())));
    }
    Ok(files)
}

pub fn evaluate(run: &RunDir, config: &ExperimentConfig) -> Result<Evaluation, PipelineError> {
    let started = Instant::now();
    let mut attacks = Vec::new();
    for (name, path) in score_files(run)? {
        let records = load_scores(&path)?;
        if records.is_empty() {
            return Err(PipelineError::Artifact(format!("no records in {}", path.display())));
        }
        attacks.push(evaluate_records(&name, &records, &config.evaluation)?);
    }
    let evaluation = Evaluation {
        artifact_version: ARTIFACT_VERSION,
        config_fingerprint: config.fingerprint(),
        attacks,
    };
    write_json(&run.evaluation(), &evaluation)?;
    record_timing(run, "evaluate", started)?;
    Ok(evaluation)
}

pub fn report(run: &RunDir, _config: &ExperimentConfig) -> Result<RunReport, PipelineError> {
    let evaluation: Evaluation = read_json(&run.evaluation())?;
    let calibration: Option<CalibrationResult> = read_json(&run.calibration()).ok();
    let report = RunReport::build(
        &evaluation,
        calibration.as_ref().map(|c| c.fingerprint.to_string()),
        calibration.as_ref().map(|c| c.tau),
    )?;
    write_json(&run.report_json(), &report)?;
    let text = report.render();
    std::fs::write(run.report_text(), &text).map_err(|e| PipelineError::io(&run.report_text(), e))?;
    Ok(report)
}

/// Every stage but the sweep, in order.
pub fn run_all(run: &RunDir, config: &ExperimentConfig) -> Result<RunReport, PipelineError> {
    gen_data(run, config)?;
    train(run, config)?;
    calibrate(run, config)?;
    attack(run, config)?;
    if !config.baselines.is_empty() {
        baseline(run, config)?;
    }
    evaluate(run, config)?;
    report(run, config)
}
