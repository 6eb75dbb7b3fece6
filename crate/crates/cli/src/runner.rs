//! Executes an [`ExperimentConfig`]: per-seed data and calibration, then
//! every (run × seed) pair on a worker pool, then the paired SDE runs.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use sgdlab_core::calibrate::{balanced_dln, gd_stability_edge, sgd_stability_edge};
use sgdlab_core::datagen::{self, GroundTruth};
use sgdlab_core::sde::{fit_noise_constant, log_loss_gap, run_sde, windowed_log_loss_gap};
use sgdlab_core::trajectory::write_json;
use sgdlab_core::{Arch, Dataset, MetricSpec, ModelState, Optimizer, RngStream, RunConfig, Schedule, SdeConfig, TrajectoryLog};

use crate::analysis::{median, plateau_median};
use crate::config::{Calibration, DatasetSpec, EdgeBase, ExperimentConfig, ModelSpec, RunSpec, Search};
use crate::error::{CliError, Result};
use crate::report::{Manifest, ManifestEntry};

/// Everything a run of one seed needs.
#[derive(Clone, Debug)]
pub struct SeedContext {
    pub seed: u64,
    pub data: Dataset,
    pub init: ModelState,
    pub metrics: MetricSpec,
}

/// Builds the dataset, initial model and evaluation sets for `seed`.
///
/// Test samples and then rank inputs are drawn, in that order, from the
/// stream `split(77)` of the seed.
pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<SeedContext> {
    let mut student = None;
    let data = match cfg.dataset {
        DatasetSpec::SparseRegression { n, d, r } => datagen::sparse_regression(seed, n, d, r)?,
        DatasetSpec::Regression1d { target_scale } => {
            let mut ds = datagen::regression_1d(seed);
            ds.y.iter_mut().for_each(|y| *y *= target_scale);
            ds
        }
        DatasetSpec::TeacherStudent { depth, teacher_width, student_width, n, d, init_scale } => {
            let (ds, st) = datagen::teacher_student(seed, depth, teacher_width, student_width, n, d, init_scale)?;
            student = Some(st);
            ds
        }
        DatasetSpec::Quadratic1d { n, a, b, theta_star } => datagen::quadratic_1d(seed, n, a, b, theta_star)?,
    };
    let d = data.d();
    let mut init_rng = RngStream::new(seed).split(2);
    let init = match cfg.model {
        ModelSpec::DiagonalLinear { init } => ModelState::diagonal_linear(d, init),
        ModelSpec::TwoLayerRelu { width, bias, init_scale } => {
            ModelState::gaussian_init(Arch::TwoLayerRelu { d, width, bias }, init_scale, &mut init_rng)
        }
        ModelSpec::ThreeLayerRelu { width1, width2, bias, init_scale } => {
            ModelState::gaussian_init(Arch::ThreeLayerRelu { d, width1, width2, bias }, init_scale, &mut init_rng)
        }
        ModelSpec::Student => student.ok_or_else(|| CliError::Config("student model needs a teacher_student dataset".into()))?,
        ModelSpec::Quadratic1d { theta0 } => ModelState::new(Arch::Quadratic1D, vec![theta0])?,
    };
    let mut rng = RngStream::new(seed).split(77);
    let test = if cfg.test_samples > 0 { data.fresh(cfg.test_samples, &mut rng) } else { None };
    let rank_inputs = cfg.rank_samples.map(|k| data.fresh_inputs(k, &mut rng));
    let metrics = MetricSpec { rank_inputs, test, thresholds: cfg.thresholds };
    Ok(SeedContext { seed, data, init, metrics })
}

#[derive(Clone, Debug, Serialize)]
pub struct CalibrationResult {
    pub base_edge: f64,
    pub multiplier: f64,
    /// `base_edge × multiplier`: the unit of every relative step size.
    pub step: f64,
    /// `(multiplier, score)` per probe; lower is better for plateau
    /// searches, 1/0 for fit / no fit.
    pub probes: Vec<(f64, f64)>,
}

fn base_edge(base: EdgeBase, ctx: &SeedContext) -> Result<f64> {
    let teacher = || match &ctx.data.truth {
        Some(GroundTruth::SparseLinear { beta }) => Ok(balanced_dln(beta)),
        _ => Err(CliError::Config("teacher edges need a sparse ground truth".into())),
    };
    Ok(match base {
        EdgeBase::One => 1.0,
        EdgeBase::SgdEdgeTeacher => sgd_stability_edge(&teacher()?, &ctx.data)?,
        EdgeBase::GdEdgeTeacher => gd_stability_edge(&teacher()?, &ctx.data, ctx.seed)?,
        EdgeBase::SgdEdgeInit => sgd_stability_edge(&ctx.init, &ctx.data)?,
    })
}

fn quiet(cfg: &RunConfig) -> RunConfig {
    RunConfig { metric_every: usize::MAX, metric_per_octave: 0, ..cfg.clone() }
}

/// Picks the per-seed reference step of calibration `name`.
pub fn calibrate(cfg: &ExperimentConfig, ctx: &SeedContext, name: &str, cal: &Calibration) -> Result<CalibrationResult> {
    let edge = base_edge(cal.base, ctx)?;
    let runs: Vec<&RunSpec> = cfg.runs.iter().filter(|r| r.relative_to.as_deref() == Some(name)).collect();
    let none = MetricSpec { rank_inputs: None, test: None, thresholds: cfg.thresholds };
    let (multiplier, probes) = match &cal.search {
        Search::Fixed { multiplier } => (*multiplier, Vec::new()),
        Search::Plateau { grid, target_log10, probe_log_every } => {
            let decays: Vec<usize> = runs
                .iter()
                .filter_map(|r| r.schedule.build(1.0, cfg.iterations).decay_point())
                .collect();
            let horizon = decays.iter().copied().max().unwrap_or(cfg.iterations);
            let peak = runs.iter().map(|r| r.schedule.eta_max.unwrap_or(r.schedule.eta0)).fold(0.0, f64::max);
            let probes: Vec<(f64, f64)> = grid
                .par_iter()
                .map(|&g| {
                    let mut rc = RunConfig::new(Schedule::constant(g * edge * peak, horizon), horizon, ctx.seed);
                    rc.log_every = *probe_log_every;
                    let score = match sgdlab_core::optim::run(&quiet(&rc), &ctx.init, &ctx.data, Optimizer::Sgd, &none) {
                        Ok(log) => decays
                            .iter()
                            .map(|&dp| plateau_median(&log, dp).map_or(f64::INFINITY, |m| (m.log10() - target_log10).abs()))
                            .fold(0.0, f64::max),
                        Err(_) => f64::INFINITY,
                    };
                    (g, score)
                })
                .collect();
            let best = probes.iter().fold((f64::INFINITY, grid[0]), |b, &(g, s)| if s < b.0 { (s, g) } else { b });
            (best.1, probes)
        }
        Search::LargestFitting { grid, fit_loss } => {
            let decaying: Vec<&RunSpec> =
                runs.iter().copied().filter(|r| r.schedule.build(1.0, cfg.iterations).decay_point().is_some()).collect();
            let probes: Vec<(f64, f64)> = grid
                .par_iter()
                .map(|&g| {
                    let fits = decaying.iter().all(|r| {
                        let mut rc = RunConfig::new(r.schedule.build(g * edge, cfg.iterations), cfg.iterations, ctx.seed);
                        rc.log_every = cfg.iterations;
                        rc.batch = r.batch;
                        sgdlab_core::optim::run(&quiet(&rc), &ctx.init, &ctx.data, r.optimizer, &none)
                            .map(|log| log.last().is_some_and(|l| l.train_loss <= *fit_loss))
                            .unwrap_or(false)
                    });
                    (g, if fits { 1.0 } else { 0.0 })
                })
                .collect();
            let smallest = grid.iter().copied().fold(f64::INFINITY, f64::min);
            let best = probes.iter().filter(|p| p.1 > 0.0).map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
            (if best.is_finite() { best } else { smallest }, probes)
        }
    };
    Ok(CalibrationResult { base_edge: edge, multiplier, step: edge * multiplier, probes })
}

#[derive(Debug)]
pub struct RunOutcome {
    pub label: String,
    pub seed: u64,
    pub schedule: Schedule,
    pub log: TrajectoryLog,
    /// Set when the run stopped early; `log` then holds the partial record.
    pub error: Option<String>,
}

impl RunOutcome {
    pub fn diverged(&self) -> bool {
        self.error.is_some()
    }

    /// Parameters at the last snapshot (the final iterate for completed runs).
    pub fn final_theta(&self) -> Option<&[f64]> {
        self.log.snapshots.last().map(|s| s.theta.as_slice())
    }
}

#[derive(Debug)]
pub struct SdeOutcome {
    pub seed: u64,
    /// `(c, mean log gap on the fitting prefix)` per grid value.
    pub fit: Vec<(f64, f64)>,
    pub c: f64,
    pub fitted: RunOutcome,
    pub ablation: Option<RunOutcome>,
    pub mean_gap: f64,
    pub windowed_gap: f64,
}

#[derive(Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub calibrations: BTreeMap<String, CalibrationResult>,
    pub runs: Vec<RunOutcome>,
    pub sde: Option<SdeOutcome>,
}

impl SeedOutcome {
    pub fn run(&self, label: &str) -> Option<&RunOutcome> {
        self.runs.iter().find(|r| r.label == label)
    }
}

#[derive(Debug)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedOutcome>,
}

impl ExperimentResult {
    pub fn diverged(&self) -> usize {
        let sde = |s: &SeedOutcome| {
            s.sde.as_ref().map_or(0, |o| o.fitted.diverged() as usize + o.ablation.as_ref().map_or(0, |a| a.diverged() as usize))
        };
        self.seeds.iter().map(|s| s.runs.iter().filter(|r| r.diverged()).count() + sde(s)).sum()
    }

    /// Outcomes of run `label` across seeds, in seed order.
    pub fn runs_of(&self, label: &str) -> Vec<&RunOutcome> {
        self.seeds.iter().filter_map(|s| s.run(label)).collect()
    }
}

/// Which parts of the config to execute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Every training run; the SDE section is skipped.
    Train,
    /// The SDE reference run and the SDE runs paired with it.
    Sde,
    /// Everything.
    All,
}

fn execute(cfg: &ExperimentConfig, ctx: &SeedContext, run: &RunSpec, scale: f64) -> RunOutcome {
    let schedule = run.schedule.build(scale, cfg.iterations);
    let mut rc = RunConfig::new(schedule.clone(), cfg.iterations, ctx.seed);
    rc.batch = run.batch;
    rc.log_every = cfg.log_every;
    rc.metric_every = cfg.metric_every;
    rc.metric_per_octave = run.metric_per_octave.unwrap_or(cfg.metric_per_octave);
    rc.snapshot_linear = 1;
    let (mut log, error) = match sgdlab_core::optim::run(&rc, &ctx.init, &ctx.data, run.optimizer, &ctx.metrics) {
        Ok(log) => (log, None),
        Err(f) => (f.partial, Some(f.error.to_string())),
    };
    log.set("experiment", &cfg.name);
    log.set("label", &run.label);
    log.set("step_scale", scale);
    RunOutcome { label: run.label.clone(), seed: ctx.seed, schedule, log, error }
}

fn sde_outcome(label: &str, seed: u64, schedule: &Schedule, r: sgdlab_core::optim::RunResult<f64>) -> RunOutcome {
    let (log, error) = match r {
        Ok(log) => (log, None),
        Err(f) => (f.partial, Some(f.error.to_string())),
    };
    RunOutcome { label: label.to_owned(), seed, schedule: schedule.clone(), log, error }
}

fn run_seed(cfg: &ExperimentConfig, seed: u64, mode: Mode) -> Result<SeedOutcome> {
    let ctx = prepare(cfg, seed)?;
    let sde_ref = cfg.sde.as_ref().map(|s| s.reference.as_str());
    let wanted: Vec<&RunSpec> = cfg
        .runs
        .iter()
        .filter(|r| match mode {
            Mode::Sde => Some(r.label.as_str()) == sde_ref,
            _ => true,
        })
        .collect();
    let mut calibrations = BTreeMap::new();
    for (name, cal) in &cfg.calibration {
        if wanted.iter().any(|r| r.relative_to.as_deref() == Some(name.as_str())) {
            calibrations.insert(name.clone(), calibrate(cfg, &ctx, name, cal)?);
        }
    }
    let runs: Vec<RunOutcome> = wanted
        .par_iter()
        .map(|r| {
            let scale = r.relative_to.as_ref().map_or(1.0, |c| calibrations[c].step);
            let mut out = execute(cfg, &ctx, r, scale);
            if let Some(c) = r.relative_to.as_ref() {
                out.log.set("calibration", serde_json::json!({ "name": c, "result": &calibrations[c] }));
            }
            out
        })
        .collect();
    let sde = match (&cfg.sde, mode) {
        (Some(spec), Mode::Sde | Mode::All) => {
            let reference = runs.iter().find(|r| r.label == spec.reference).expect("validated reference");
            if reference.diverged() {
                None
            } else {
                Some(run_paired_sde(cfg, &ctx, spec, reference)?)
            }
        }
        _ => None,
    };
    Ok(SeedOutcome { seed, calibrations, runs, sde })
}

fn run_paired_sde(
    cfg: &ExperimentConfig,
    ctx: &SeedContext,
    spec: &crate::config::SdeSpec,
    reference: &RunOutcome,
) -> Result<SdeOutcome> {
    let unit = 2.0 / ctx.data.n() as f64;
    let grid: Vec<f64> = spec.c_grid.iter().map(|c| c * unit).collect();
    let mut base = SdeConfig::new(0.0, ctx.seed);
    base.gamma_ratio = spec.gamma_ratio;
    base.horizon_mult = spec.horizon_mult;
    base.log_every = cfg.log_every * spec.horizon_mult;
    base.metric_every = cfg.metric_every * spec.horizon_mult;
    let prefix = ((spec.fit_frac * cfg.iterations as f64) as usize).max(1);
    let (fit, best) = fit_noise_constant(&grid, &base, &ctx.init, &ctx.data, &reference.schedule, &reference.log, prefix)?;
    let c = fit[best].0;
    let mut cs = vec![c];
    if spec.ablation {
        cs.push(0.0);
    }
    let mut outs: Vec<RunOutcome> = cs
        .par_iter()
        .map(|&c| {
            let sc = SdeConfig { c, ..base.clone() };
            let label = if c == 0.0 { "sde_ablation" } else { "sde_fitted" };
            let mut out = sde_outcome(label, ctx.seed, &reference.schedule, run_sde(&sc, &ctx.init, &ctx.data, &reference.schedule, &reference.log, &ctx.metrics));
            out.log.set("experiment", &cfg.name);
            out.log.set("label", label);
            out.log.set("reference", &spec.reference);
            out.log.set("c_unit", unit);
            out
        })
        .collect();
    let ablation = if spec.ablation { outs.pop() } else { None };
    let mut fitted = outs.pop().expect("fitted run");
    fitted.log.set("c_fit", &fit);
    let mean_gap = log_loss_gap(&fitted.log, &reference.log, spec.horizon_mult);
    let windowed_gap = windowed_log_loss_gap(&fitted.log, &reference.log, spec.horizon_mult, spec.windows);
    Ok(SdeOutcome { seed: ctx.seed, fit, c, fitted, ablation, mean_gap, windowed_gap })
}

/// Runs `cfg` on a pool of `threads` workers (0: one per core).
pub fn run_experiment(cfg: &ExperimentConfig, mode: Mode, threads: usize) -> Result<ExperimentResult> {
    cfg.validate()?;
    if mode == Mode::Sde && cfg.sde.is_none() {
        return Err(CliError::Config(format!("{} has no [sde] section", cfg.name)));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let seeds = pool.install(|| cfg.seeds.par_iter().map(|&s| run_seed(cfg, s, mode)).collect::<Result<Vec<_>>>())?;
    Ok(ExperimentResult { config: cfg.clone(), seeds })
}

/// File stem of a run inside a bundle.
pub fn run_stem(label: &str, seed: u64) -> String {
    format!("{label}_s{seed}")
}

#[derive(Serialize)]
struct RunSummary {
    label: String,
    seeds: Vec<u64>,
    diverged: usize,
    median_final_train_loss: Option<f64>,
    median_final_test_loss: Option<f64>,
    median_final_rank: Option<f64>,
    median_final_l0: Option<f64>,
    median_final_sparsity_l1: Option<f64>,
    median_final_sparsity_l2: Option<f64>,
}

fn summarise(label: &str, outs: &[&RunOutcome]) -> RunSummary {
    let fin = |f: &dyn Fn(&sgdlab_core::MetricRecord) -> Option<f64>| {
        median(outs.iter().filter(|o| !o.diverged()).filter_map(|o| o.log.last().and_then(f)).collect())
    };
    RunSummary {
        label: label.to_owned(),
        seeds: outs.iter().map(|o| o.seed).collect(),
        diverged: outs.iter().filter(|o| o.diverged()).count(),
        median_final_train_loss: fin(&|r| Some(r.train_loss)),
        median_final_test_loss: fin(&|r| r.test_loss),
        median_final_rank: fin(&|r| r.jacobian_rank.map(|v| v as f64)),
        median_final_l0: fin(&|r| r.l0_beta.map(|v| v as f64)),
        median_final_sparsity_l1: fin(&|r| r.feature_sparsity_l1),
        median_final_sparsity_l2: fin(&|r| r.feature_sparsity_l2),
    }
}

/// Writes the bundle: resolved config, one CSV + JSON header per run,
/// calibration choices, a manifest of the runs and a summary of final
/// metrics.
pub fn write_bundle(res: &ExperimentResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("runs"))?;
    std::fs::write(dir.join("config.toml"), res.config.to_toml()?)?;
    let mut calib = BTreeMap::new();
    let mut summary = Vec::new();
    let mut manifest = Manifest { experiment: res.config.name.clone(), runs: Vec::new() };
    for s in &res.seeds {
        calib.insert(format!("s{}", s.seed), &s.calibrations);
        let mut all: Vec<&RunOutcome> = s.runs.iter().collect();
        if let Some(o) = &s.sde {
            all.push(&o.fitted);
            all.extend(o.ablation.as_ref());
        }
        for r in all {
            let stem = run_stem(&r.label, r.seed);
            r.log.save(&dir.join("runs").join(&stem))?;
            manifest.runs.push(ManifestEntry { label: r.label.clone(), seed: r.seed, csv: format!("runs/{stem}.csv") });
        }
    }
    let mut labels: Vec<String> = res.config.runs.iter().map(|r| r.label.clone()).collect();
    labels.extend(["sde_fitted".to_owned(), "sde_ablation".to_owned()]);
    for label in &labels {
        let outs: Vec<&RunOutcome> = res
            .seeds
            .iter()
            .flat_map(|s| {
                s.runs.iter().chain(s.sde.iter().flat_map(|o| std::iter::once(&o.fitted).chain(o.ablation.iter())))
            })
            .filter(|r| &r.label == label)
            .collect();
        if !outs.is_empty() {
            summary.push(summarise(label, &outs));
        }
    }
    write_json(&dir.join("calibration.json"), &calib)?;
    write_json(&dir.join("manifest.json"), &manifest)?;
    let sde: Vec<serde_json::Value> = res
        .seeds
        .iter()
        .filter_map(|s| s.sde.as_ref())
        .map(|o| serde_json::json!({ "seed": o.seed, "c": o.c, "fit": o.fit, "mean_log_gap": o.mean_gap, "windowed_log_gap": o.windowed_gap }))
        .collect();
    write_json(
        &dir.join("summary.json"),
        &serde_json::json!({ "experiment": res.config.name, "diverged": res.diverged(), "runs": summary, "sde": sde }),
    )?;
    Ok(())
}

/// Writes the dataset of every seed under `dir/data`.
pub fn write_datasets(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("data"))?;
    for &seed in &cfg.seeds {
        let ctx = prepare(cfg, seed)?;
        let meta = serde_json::json!({ "experiment": cfg.name, "seed": seed, "dataset": cfg.dataset });
        ctx.data.save(&dir.join("data").join(format!("s{seed}")), &meta)?;
    }
    Ok(())
}
