//! Experiment configuration: one TOML file per experiment.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sgdlab_core::schedules::{ScheduleKind, WarmupUnit};
use sgdlab_core::{Optimizer, Schedule, Thresholds};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub iterations: usize,
    pub seeds: Vec<u64>,
    pub log_every: usize,
    pub metric_every: usize,
    /// Extra expensive records per doubling of the iteration count.
    #[serde(default)]
    pub metric_per_octave: usize,
    /// Fresh labelled samples for the test loss; 0 disables it.
    #[serde(default)]
    pub test_samples: usize,
    /// Fresh inputs for the Jacobian rank; `None` skips the rank.
    #[serde(default)]
    pub rank_samples: Option<usize>,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    /// Named per-seed reference step sizes; see [`Calibration`].
    #[serde(default)]
    pub calibration: BTreeMap<String, Calibration>,
    pub runs: Vec<RunSpec>,
    #[serde(default)]
    pub sde: Option<SdeSpec>,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    SparseRegression { n: usize, d: usize, r: usize },
    /// The committed 12-point set; `target_scale` multiplies every label.
    Regression1d {
        #[serde(default = "one")]
        target_scale: f64,
    },
    TeacherStudent { depth: usize, teacher_width: usize, student_width: usize, n: usize, d: usize, init_scale: f64 },
    Quadratic1d { n: usize, a: f64, b: f64, theta_star: f64 },
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// `u = u0·1`, `v = 0`.
    DiagonalLinear { init: f64 },
    TwoLayerRelu { width: usize, bias: bool, init_scale: f64 },
    ThreeLayerRelu { width1: usize, width2: usize, bias: bool, init_scale: f64 },
    /// The student drawn together with a teacher-student dataset.
    Student,
    Quadratic1d { theta0: f64 },
}

/// Where the reference step of a seed comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeBase {
    /// 1: steps are absolute.
    One,
    /// SGD edge at the balanced factorisation of the sparse ground truth.
    SgdEdgeTeacher,
    /// GD edge at the balanced factorisation of the sparse ground truth.
    GdEdgeTeacher,
    /// SGD edge at the initial model.
    SgdEdgeInit,
}

/// How the multiplier on the base edge is picked per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "search", rename_all = "snake_case", deny_unknown_fields)]
pub enum Search {
    Fixed {
        multiplier: f64,
    },
    /// Multiplier whose constant-step run keeps the median train loss in the
    /// second half of every pre-decay window closest to `10^target_log10`.
    Plateau {
        grid: Vec<f64>,
        target_log10: f64,
        #[serde(default = "probe_log_every")]
        probe_log_every: usize,
    },
    /// Largest multiplier for which every relative, decaying run ends with
    /// train loss at most `fit_loss`.
    LargestFitting { grid: Vec<f64>, fit_loss: f64 },
}

fn probe_log_every() -> usize {
    500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub base: EdgeBase,
    #[serde(flatten)]
    pub search: Search,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub eta0: f64,
    #[serde(default)]
    pub eta_max: Option<f64>,
    #[serde(default = "one")]
    pub decay_frac: f64,
    #[serde(default = "ten")]
    pub decay_factor: f64,
    #[serde(default)]
    pub rho: Option<f64>,
    /// Warmup length as a fraction of the horizon; defaults to the decay point.
    #[serde(default)]
    pub warmup_frac: Option<f64>,
    #[serde(default)]
    pub warmup_unit: WarmupUnit,
    #[serde(default)]
    pub epoch_len: Option<usize>,
}

fn ten() -> f64 {
    10.0
}

impl ScheduleSpec {
    /// Concrete schedule over `horizon` steps with every step size
    /// multiplied by `scale`.
    pub fn build(&self, scale: f64, horizon: usize) -> Schedule {
        Schedule {
            kind: self.kind,
            eta0: self.eta0 * scale,
            eta_max: self.eta_max.map(|e| e * scale),
            decay_frac: self.decay_frac,
            decay_factor: self.decay_factor,
            rho: self.rho,
            warmup_len: self.warmup_frac.map(|f| ((f * horizon as f64).ceil() as usize).max(1)),
            warmup_unit: self.warmup_unit,
            epoch_len: self.epoch_len,
            horizon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub label: String,
    pub optimizer: Optimizer,
    #[serde(default = "one_usize")]
    pub batch: usize,
    pub schedule: ScheduleSpec,
    /// Name of a [`Calibration`]; step sizes are then multiples of it.
    #[serde(default)]
    pub relative_to: Option<String>,
    /// Overrides the experiment-wide `metric_per_octave`.
    #[serde(default)]
    pub metric_per_octave: Option<usize>,
}

fn one_usize() -> usize {
    1
}

/// Euler–Maruyama runs paired with one SGD run of the experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeSpec {
    pub reference: String,
    #[serde(default = "gamma_ratio")]
    pub gamma_ratio: f64,
    #[serde(default = "horizon_mult")]
    pub horizon_mult: usize,
    /// Candidate `c` values in units of `2/n`.
    pub c_grid: Vec<f64>,
    /// Fraction of the reference horizon used to fit `c`.
    pub fit_frac: f64,
    /// Also run the driftless-noise ablation `c = 0`.
    #[serde(default)]
    pub ablation: bool,
    /// Window count for the windowed loss gap written to the summary.
    #[serde(default = "windows")]
    pub windows: usize,
}

fn gamma_ratio() -> f64 {
    0.1
}

fn horizon_mult() -> usize {
    10
}

fn windows() -> usize {
    20
}

/// Canonical configurations shipped with the binary.
pub const BUNDLED: [(&str, &str); 6] = [
    ("dln_fig2", include_str!("../configs/dln_fig2.toml")),
    ("dln_gd_fig7", include_str!("../configs/dln_gd_fig7.toml")),
    ("relu1d_fig4", include_str!("../configs/relu1d_fig4.toml")),
    ("teacher3_fig5", include_str!("../configs/teacher3_fig5.toml")),
    ("dln_sde_fig9", include_str!("../configs/dln_sde_fig9.toml")),
    ("teacher2_fig13", include_str!("../configs/teacher2_fig13.toml")),
];

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// A bundled config by name.
    pub fn bundled(name: &str) -> Result<Self> {
        match BUNDLED.iter().find(|(n, _)| *n == name) {
            Some((_, text)) => Self::parse(text),
            None => Err(CliError::Config(format!(
                "no bundled config {name:?}; available: {}",
                BUNDLED.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ")
            ))),
        }
    }

    /// A bundled name or a path to a TOML file.
    pub fn load(name_or_path: &str) -> Result<Self> {
        let p = Path::new(name_or_path);
        if p.exists() {
            let text = std::fs::read_to_string(p)?;
            return Self::parse(&text);
        }
        Self::bundled(name_or_path)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.runs.is_empty() {
            return bad("at least one run is required".into());
        }
        if self.iterations == 0 || self.log_every == 0 || self.metric_every == 0 {
            return bad("iterations, log_every and metric_every must be positive".into());
        }
        let mut labels = std::collections::BTreeSet::new();
        for r in &self.runs {
            let file_safe = |c: char| c.is_ascii_alphanumeric() || c == '_' || c == '-';
            if r.label.is_empty() || !r.label.chars().all(file_safe) || r.label.starts_with("sde_") {
                return bad(format!("run label {:?} must be [A-Za-z0-9_-]+ and not start with sde_", r.label));
            }
            if !labels.insert(r.label.as_str()) {
                return bad(format!("duplicate run label {:?}", r.label));
            }
            if r.batch == 0 {
                return bad(format!("run {:?}: batch must be at least 1", r.label));
            }
            if let Some(c) = &r.relative_to {
                if !self.calibration.contains_key(c) {
                    return bad(format!("run {:?} refers to unknown calibration {c:?}", r.label));
                }
            }
            r.schedule.build(1.0, self.iterations).validate().map_err(|e| CliError::Config(format!("run {:?}: {e}", r.label)))?;
        }
        for (name, c) in &self.calibration {
            let grid = match &c.search {
                Search::Fixed { multiplier } => std::slice::from_ref(multiplier),
                Search::Plateau { grid, .. } | Search::LargestFitting { grid, .. } => grid.as_slice(),
            };
            if grid.is_empty() || grid.iter().any(|g| !(*g > 0.0)) {
                return bad(format!("calibration {name:?}: multipliers must be positive and non-empty"));
            }
            let teacher_edge = matches!(c.base, EdgeBase::SgdEdgeTeacher | EdgeBase::GdEdgeTeacher);
            if teacher_edge && !matches!(self.dataset, DatasetSpec::SparseRegression { .. }) {
                return bad(format!("calibration {name:?}: teacher edges need a sparse_regression dataset"));
            }
        }
        match (&self.dataset, &self.model) {
            (DatasetSpec::SparseRegression { .. }, ModelSpec::DiagonalLinear { .. }) => {}
            (DatasetSpec::TeacherStudent { depth, .. }, ModelSpec::Student) if (2..=3).contains(depth) => {}
            (DatasetSpec::TeacherStudent { .. }, ModelSpec::Student) => return bad("teacher depth must be 2 or 3".into()),
            (DatasetSpec::Quadratic1d { .. }, ModelSpec::Quadratic1d { .. }) => {}
            (DatasetSpec::Regression1d { .. }, ModelSpec::TwoLayerRelu { .. } | ModelSpec::ThreeLayerRelu { .. }) => {}
            (DatasetSpec::SparseRegression { .. }, ModelSpec::TwoLayerRelu { .. } | ModelSpec::ThreeLayerRelu { .. }) => {}
            (d, m) => return bad(format!("model {m:?} does not fit dataset {d:?}")),
        }
        if let Some(s) = &self.sde {
            if !self.runs.iter().any(|r| r.label == s.reference && r.optimizer == Optimizer::Sgd) {
                return bad(format!("sde reference {:?} is not an SGD run", s.reference));
            }
            if s.c_grid.is_empty() || s.c_grid.iter().any(|c| !(*c >= 0.0)) {
                return bad("sde c_grid must be non-empty and non-negative".into());
            }
            if !(s.fit_frac > 0.0 && s.fit_frac <= 1.0) || s.horizon_mult == 0 || !(s.gamma_ratio > 0.0) {
                return bad("sde needs fit_frac in (0, 1], horizon_mult >= 1 and gamma_ratio > 0".into());
            }
        }
        Ok(())
    }

    /// Output directory of this experiment under `root`.
    pub fn bundle_dir(&self, root: &Path) -> PathBuf {
        root.join(&self.name)
    }
}
