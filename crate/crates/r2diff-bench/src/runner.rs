//! Experiment execution: regenerate held-out episodes, run inference per
//! episode (parallel, with per-episode RNG streams), aggregate into report
//! rows with a deterministic ordered reduction.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use r2diff_core::tasks::{final_position_error, wall_clearance};
use r2diff_core::{
    derive_seed, evaluate_success, generate_dataset, infer, DenoiserModel, DistanceWeights,
    Episode, FamilyKind, InferenceConfig, InitMode, MotionDataset, NoiseSchedule, TaskFamily,
};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::formats;
use crate::report::{ExperimentReport, ReportRow, TraceRow};

/// Regenerate the held-out episodes a dataset was published with: the
/// generator's per-episode streams are keyed by (seed, index), so episodes
/// J..J+n are recoverable from the dataset header alone.
pub fn episodes_for_dataset(ds: &MotionDataset, n_test: usize) -> Result<Vec<Episode>> {
    let kind = FamilyKind::from_id(ds.meta.family_id)?;
    let family = TaskFamily::new(kind);
    let (_, episodes) = generate_dataset(
        &family,
        ds.len(),
        n_test,
        ds.meta.t_len,
        (ds.meta.height, ds.meta.width, ds.meta.channels),
        ds.meta.seed,
    )?;
    Ok(episodes)
}

/// Per-episode outcome of one condition.
#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub success: bool,
    pub final_err: f64,
    /// Index into the training set, or -1 for random initialization.
    pub retrieved_index: i64,
    pub retrieval_score: f64,
    /// Minimum wall distance, for collision diagnostics (wall families only).
    pub wall_clearance: Option<f64>,
}

/// Evaluate one (mode, schedule, n_start) condition over a family's held-out
/// episodes. Episode i draws from a stream seeded by
/// `derive_seed(infer_seed, i)`; the reduction is ordered, so results do not
/// depend on thread scheduling.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_condition(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    ds: &MotionDataset,
    episodes: &[Episode],
    mode: InitMode,
    n_start: usize,
    weights: DistanceWeights,
    infer_seed: u64,
) -> Result<Vec<EpisodeOutcome>> {
    let cfg = InferenceConfig {
        mode,
        n_start,
        weights,
    };
    episodes
        .par_iter()
        .enumerate()
        .map(|(i, ep)| {
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(infer_seed, i as u64));
            let gt = match mode {
                InitMode::RetCheat => Some(&ep.gt_motion),
                _ => None,
            };
            let out = infer(model, schedule, &ep.scene, ds, &cfg, gt, &mut rng)?;
            let success = evaluate_success(&out.motion, ep)?;
            let (idx, score) = out
                .retrieval
                .map(|r| (r.index as i64, r.score))
                .unwrap_or((-1, 0.0));
            Ok(EpisodeOutcome {
                success,
                final_err: final_position_error(&out.motion, ep),
                retrieved_index: idx,
                retrieval_score: score,
                wall_clearance: wall_clearance(&out.motion, ep),
            })
        })
        .collect()
}

pub fn success_rate(outcomes: &[EpisodeOutcome]) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    100.0 * outcomes.iter().filter(|o| o.success).count() as f64 / outcomes.len() as f64
}

pub fn mean_final_err(outcomes: &[EpisodeOutcome]) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    outcomes.iter().map(|o| o.final_err).sum::<f64>() / outcomes.len() as f64
}

/// Run the full condition grid of a config and assemble the report.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let weights = cfg.params.weights()?;

    struct FamilyArtifacts {
        name: String,
        ds: MotionDataset,
        episodes: Vec<Episode>,
        schedules: BTreeMap<String, NoiseSchedule>,
        models: BTreeMap<String, DenoiserModel>,
    }

    // labels actually referenced by the condition grid
    let labels: std::collections::BTreeSet<&String> =
        cfg.conditions.iter().map(|c| &c.schedule).collect();

    let mut families = Vec::new();
    for fam in &cfg.families {
        let ds = formats::read_dataset(&fam.dataset)
            .with_context(|| format!("family '{}'", fam.name))?;
        let kind = fam.kind()?;
        if ds.meta.family_id != kind.id() {
            bail!(
                "family '{}': dataset {} was generated for family '{}'",
                fam.name,
                fam.dataset.display(),
                FamilyKind::from_id(ds.meta.family_id)
                    .map(|k| k.name())
                    .unwrap_or("?")
            );
        }
        let episodes = episodes_for_dataset(&ds, cfg.experiment.episodes)?;
        let mut schedules = BTreeMap::new();
        let mut models = BTreeMap::new();
        for label in &labels {
            let spath = &fam.schedules[*label];
            let mpath = &fam.models[*label];
            schedules.insert(
                (*label).clone(),
                formats::read_schedule(spath)
                    .with_context(|| format!("family '{}' schedule '{label}'", fam.name))?,
            );
            let model = formats::read_model(mpath)
                .with_context(|| format!("family '{}' model '{label}'", fam.name))?;
            if model.config().feat_dim != ds.meta.channels {
                bail!(
                    "family '{}': model {} expects {} feature channels but dataset has {}",
                    fam.name,
                    mpath.display(),
                    model.config().feat_dim,
                    ds.meta.channels
                );
            }
            models.insert((*label).clone(), model);
        }
        families.push(FamilyArtifacts {
            name: fam.name.clone(),
            ds,
            episodes,
            schedules,
            models,
        });
    }

    let mut report = ExperimentReport::default();
    let mut traced: std::collections::BTreeSet<(String, String)> = Default::default();
    for cond in &cfg.conditions {
        let mode = cond.init_mode()?;
        for fam in &families {
            let schedule = &fam.schedules[&cond.schedule];
            let model = &fam.models[&cond.schedule];
            let outcomes = evaluate_condition(
                model,
                schedule,
                &fam.ds,
                &fam.episodes,
                mode,
                cond.n_start,
                weights,
                cfg.experiment.infer_seed,
            )?;
            report.rows.push(ReportRow {
                condition_id: cond.id.clone(),
                mode: mode.tag().into(),
                schedule: cond.schedule.clone(),
                rank: cond.rank.unwrap_or(cfg.params.rank),
                n_start: if mode == InitMode::Rand {
                    schedule.len()
                } else {
                    cond.n_start
                },
                n_steps: schedule.len(),
                family: fam.name.clone(),
                success_rate: success_rate(&outcomes),
                mean_final_err: mean_final_err(&outcomes),
                episodes: outcomes.len(),
            });
            // retrieval is independent of n_start/schedule, so trace each
            // (family, method) pair once
            if mode != InitMode::Rand
                && traced.insert((fam.name.clone(), mode.tag().to_string()))
            {
                for (i, o) in outcomes.iter().enumerate() {
                    report.trace.push(TraceRow {
                        family: fam.name.clone(),
                        query_id: i,
                        method: mode.tag().trim_start_matches("ret-").into(),
                        retrieved_id: o.retrieved_index as usize,
                        score: o.retrieval_score,
                    });
                }
            }
        }
    }
    Ok(report)
}

/// `run_experiment` plus artifact emission: report CSV, retrieval trace CSV,
/// summary text, and the success bar chart.
pub fn run_and_write(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentReport> {
    let report = run_experiment(cfg)?;
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))?;
    report.write_csv(&out_dir.join("report.csv"))?;
    report.write_trace_csvs(out_dir)?;
    std::fs::write(out_dir.join("summary.txt"), report.summary())?;
    std::fs::write(
        out_dir.join("success.svg"),
        crate::svg::success_bar_chart(&report, &cfg.experiment.name),
    )?;
    Ok(report)
}
