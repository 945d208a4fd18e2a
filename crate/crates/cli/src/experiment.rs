//! Grid × seed execution with order-deterministic merging.

use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use sega_core::config::{Assertion, ExperimentConfig, GridPoint, Metric};
use sega_core::diagnostics::{distribution_report, mask_report, DistributionReport, MaskReport};
use sega_core::diffusion::{run_guided, NoiseEstimator, RunOptions};
use sega_core::guidance::{GuidanceConfig, StepMasks};
use sega_core::stats::{mean, spearman};
use sega_core::Latent;

use crate::Result;

/// One grid axis set to one value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assignment {
    pub axis: String,
    pub value: Value,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub point: usize,
    pub seed: u64,
    /// Posterior of the target tag under the data distribution.
    pub target_posterior: Option<f64>,
    /// L2 distance from the same seed's run with the concept list cleared.
    pub displacement: f64,
    pub final_sample: Vec<f64>,
}

/// Seed-averaged trajectory statistics for one sampler step.
#[derive(Debug, Clone, Serialize)]
pub struct StepSummary {
    /// Steps taken; `0` is the initial noise.
    pub step: usize,
    /// Diffusion time of the latent after `step` steps.
    pub t: usize,
    pub mean_target_posterior: Option<f64>,
    pub mean_norm: f64,
    /// Per concept; empty at `step = 0`.
    pub mask_fraction: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PointSummary {
    pub point: usize,
    pub assignments: Vec<Assignment>,
    pub target: Option<String>,
    pub seeds: usize,
    pub mean_target_posterior: Option<f64>,
    pub std_target_posterior: Option<f64>,
    pub mean_displacement: f64,
    pub std_displacement: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PointOutcome {
    pub summary: PointSummary,
    pub runs: Vec<RunRecord>,
    pub steps: Vec<StepSummary>,
    /// Mask structure of the first seed's run; absent without concepts.
    pub mask_report: Option<MaskReport>,
    /// Pooled final-sample coordinates across seeds.
    pub final_distribution: Option<DistributionReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AssertionOutcome {
    pub assertion: usize,
    pub axis: String,
    pub metric: Metric,
    /// Values of the other axes identifying this group.
    pub group: Vec<Assignment>,
    pub rho: f64,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Experiment {
    pub axes: Vec<String>,
    pub seeds: Vec<u64>,
    pub points: Vec<PointOutcome>,
    pub assertions: Vec<AssertionOutcome>,
}

impl Experiment {
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }
}

struct SeedRun {
    final_sample: Latent,
    target_posterior: Option<f64>,
    step_posteriors: Vec<Option<f64>>,
    step_norms: Vec<f64>,
    step_masks: Vec<Vec<f64>>,
    masks: Option<Vec<StepMasks>>,
}

fn run_seed(
    estimator: &dyn NoiseEstimator,
    point: &GridPoint,
    target: Option<&str>,
    seed: u64,
    keep_masks: bool,
) -> Result<SeedRun> {
    let cfg = &point.config;
    let options = RunOptions {
        record_trajectory: true,
        record_masks: !cfg.guidance.concepts().is_empty(),
        ..Default::default()
    };
    let out = run_guided(estimator, &cfg.schedule, &cfg.guidance, seed, options)?;
    let steps = cfg.schedule.steps();
    let mut step_posteriors = Vec::with_capacity(steps + 1);
    let mut step_norms = Vec::with_capacity(steps + 1);
    for (k, z) in out.trajectory.iter().enumerate() {
        step_posteriors.push(match target {
            Some(tag) => Some(estimator.posterior(z, steps - k, tag)?),
            None => None,
        });
        step_norms.push(z.norm());
    }
    let masks = out
        .state
        .mask_log()
        .map(<[StepMasks]>::to_vec)
        .unwrap_or_default();
    let step_masks = masks
        .iter()
        .map(|step| {
            step.iter()
                .map(|m| m.iter().filter(|&&b| b).count() as f64 / m.len().max(1) as f64)
                .collect()
        })
        .collect();
    Ok(SeedRun {
        target_posterior: *step_posteriors.last().expect("trajectory is never empty"),
        final_sample: out.final_sample,
        step_posteriors,
        step_norms,
        step_masks,
        masks: (keep_masks && !masks.is_empty()).then_some(masks),
    })
}

fn std_dev(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}

fn option_mean(values: &[Option<f64>]) -> Option<f64> {
    let present: Option<Vec<f64>> = values.iter().copied().collect();
    present.filter(|v| !v.is_empty()).map(|v| mean(&v))
}

/// Runs every grid point for every seed on a pool of `jobs` workers. Output
/// order (points, then seeds) does not depend on `jobs`.
pub fn execute(config: &ExperimentConfig, jobs: usize) -> Result<Experiment> {
    let axes: Vec<String> = config.grid.keys().cloned().collect();
    let points = config.grid_points()?;
    let seeds = config.seed_list();
    let estimators = points
        .iter()
        .map(|p| p.config.model.estimator(&p.config.schedule))
        .collect::<Result<Vec<_>, _>>()?;

    // Baselines (concept list cleared) are shared by points that differ only
    // in their concepts.
    let mut keys: Vec<String> = Vec::new();
    let mut baselines: Vec<(usize, GuidanceConfig)> = Vec::new();
    let mut baseline_of = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let cleared = p.config.guidance.clone().with_concepts(Vec::new());
        let key = serde_json::to_string(&(&p.config.model, &p.config.schedule, &cleared))
            .expect("config serializes");
        let slot = match keys.iter().position(|k| *k == key) {
            Some(j) => j,
            None => {
                keys.push(key);
                baselines.push((i, cleared));
                keys.len() - 1
            }
        };
        baseline_of.push(slot);
    }

    let targets: Vec<Option<String>> = points.iter().map(|p| p.config.target_tag()).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()?;
    let (baseline_finals, runs) = pool.install(|| {
        let baseline_tasks: Vec<(usize, u64)> = (0..baselines.len())
            .flat_map(|b| seeds.iter().map(move |&s| (b, s)))
            .collect();
        let finals = baseline_tasks
            .par_iter()
            .map(|&(b, seed)| {
                let (p, cfg) = &baselines[b];
                let schedule = &points[*p].config.schedule;
                Ok(
                    run_guided(&*estimators[*p], schedule, cfg, seed, RunOptions::default())?
                        .final_sample,
                )
            })
            .collect::<Result<Vec<Latent>>>();
        let run_tasks: Vec<(usize, usize)> = (0..points.len())
            .flat_map(|p| (0..seeds.len()).map(move |s| (p, s)))
            .collect();
        let runs = run_tasks
            .par_iter()
            .map(|&(p, s)| {
                run_seed(
                    &*estimators[p],
                    &points[p],
                    targets[p].as_deref(),
                    seeds[s],
                    s == 0,
                )
            })
            .collect::<Result<Vec<SeedRun>>>();
        (finals, runs)
    });
    let baseline_finals = baseline_finals?;
    let mut runs = runs?.into_iter();

    let mut outcomes = Vec::with_capacity(points.len());
    for (p, point) in points.iter().enumerate() {
        let seed_runs: Vec<SeedRun> = runs.by_ref().take(seeds.len()).collect();
        let mut records = Vec::with_capacity(seeds.len());
        for (s, run) in seed_runs.iter().enumerate() {
            let baseline = &baseline_finals[baseline_of[p] * seeds.len() + s];
            records.push(RunRecord {
                point: p,
                seed: seeds[s],
                target_posterior: run.target_posterior,
                displacement: run.final_sample.sub(baseline)?.norm(),
                final_sample: run.final_sample.data().to_vec(),
            });
        }
        outcomes.push(summarize(
            point,
            &axes,
            targets[p].clone(),
            &seed_runs,
            records,
        )?);
    }

    let assertions = evaluate_assertions(config, &axes, &outcomes);
    Ok(Experiment {
        axes,
        seeds,
        points: outcomes,
        assertions,
    })
}

fn summarize(
    point: &GridPoint,
    axes: &[String],
    target: Option<String>,
    seed_runs: &[SeedRun],
    runs: Vec<RunRecord>,
) -> Result<PointOutcome> {
    let posteriors: Vec<Option<f64>> = runs.iter().map(|r| r.target_posterior).collect();
    let displacements: Vec<f64> = runs.iter().map(|r| r.displacement).collect();
    let present: Option<Vec<f64>> = posteriors.iter().copied().collect();

    let steps = point.config.schedule.steps();
    let concepts = point.config.guidance.concepts().len();
    let step_summaries = (0..=steps)
        .map(|k| {
            let at_k: Vec<Option<f64>> = seed_runs.iter().map(|r| r.step_posteriors[k]).collect();
            let norms: Vec<f64> = seed_runs.iter().map(|r| r.step_norms[k]).collect();
            let mask_fraction = if k == 0 || concepts == 0 {
                Vec::new()
            } else {
                (0..concepts)
                    .map(|c| {
                        mean(
                            &seed_runs
                                .iter()
                                .map(|r| r.step_masks[k - 1][c])
                                .collect::<Vec<_>>(),
                        )
                    })
                    .collect()
            };
            StepSummary {
                step: k,
                t: steps - k,
                mean_target_posterior: option_mean(&at_k),
                mean_norm: mean(&norms),
                mask_fraction,
            }
        })
        .collect();

    let mask_report = match seed_runs.first().and_then(|r| r.masks.as_ref()) {
        Some(m) => Some(mask_report(m)?),
        None => None,
    };
    let pooled: Vec<f64> = runs
        .iter()
        .flat_map(|r| r.final_sample.iter().copied())
        .collect();
    let final_distribution = if pooled.len() >= 2 {
        Some(distribution_report(&pooled, None)?)
    } else {
        None
    };

    Ok(PointOutcome {
        summary: PointSummary {
            point: point.index,
            assignments: axes
                .iter()
                .zip(&point.assignments)
                .map(|(axis, (_, value))| Assignment {
                    axis: axis.clone(),
                    value: value.clone(),
                })
                .collect(),
            target,
            seeds: runs.len(),
            mean_target_posterior: present.as_deref().map(mean),
            std_target_posterior: present.as_deref().map(std_dev),
            mean_displacement: mean(&displacements),
            std_displacement: std_dev(&displacements),
        },
        runs,
        steps: step_summaries,
        mask_report,
        final_distribution,
    })
}

/// Value of `metric` at a grid point (NaN when the metric is undefined).
pub fn metric_value(summary: &PointSummary, metric: Metric) -> f64 {
    match metric {
        Metric::TargetPosterior => summary.mean_target_posterior.unwrap_or(f64::NAN),
        Metric::Displacement => summary.mean_displacement,
    }
}

fn evaluate_assertions(
    config: &ExperimentConfig,
    axes: &[String],
    points: &[PointOutcome],
) -> Vec<AssertionOutcome> {
    let mut outcomes = Vec::new();
    for (i, assertion) in config.assertions.iter().enumerate() {
        let Assertion::Spearman {
            axis,
            metric,
            min,
            max,
        } = assertion;
        let a = axes.iter().position(|k| k == axis).expect("validated axis");
        let values = &config.grid[axis];
        let mut groups: Vec<(Vec<Assignment>, Vec<f64>, Vec<f64>)> = Vec::new();
        for p in points {
            let s = &p.summary;
            let others: Vec<Assignment> = s
                .assignments
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != a)
                .map(|(_, v)| v.clone())
                .collect();
            let v = &s.assignments[a].value;
            let x = v
                .as_f64()
                .unwrap_or_else(|| values.iter().position(|u| u == v).unwrap_or(0) as f64);
            let y = metric_value(s, *metric);
            match groups.iter_mut().find(|(g, _, _)| *g == others) {
                Some((_, xs, ys)) => {
                    xs.push(x);
                    ys.push(y);
                }
                None => groups.push((others, vec![x], vec![y])),
            }
        }
        for (group, xs, ys) in groups {
            let rho = if ys.iter().any(|y| y.is_nan()) {
                f64::NAN
            } else {
                spearman(&xs, &ys)
            };
            let passed =
                !rho.is_nan() && min.is_none_or(|m| rho >= m) && max.is_none_or(|m| rho <= m);
            outcomes.push(AssertionOutcome {
                assertion: i,
                axis: axis.clone(),
                metric: *metric,
                group,
                rho,
                min: *min,
                max: *max,
                passed,
            });
        }
    }
    outcomes
}

/// Reads and validates a config file.
pub fn load(path: &std::path::Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| crate::Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(ExperimentConfig::from_json(&text)?)
}

/// Applies command-line overrides: `--grid` axes replace or extend the
/// config's grid, and `seeds` (flag or environment) replaces its seed list.
pub fn apply_overrides(
    mut config: ExperimentConfig,
    grid: &[String],
    seeds: Option<&str>,
) -> Result<ExperimentConfig> {
    for arg in grid {
        let (key, values) = sega_core::config::parse_grid_arg(arg)?;
        config.grid.insert(key, values);
    }
    if let Some(text) = seeds {
        config.seeds = sega_core::config::SeedSpec::parse(text)?;
    }
    config.validate()?;
    Ok(config)
}
