//! SGD, full-batch GD, label-noise GD and the training loop.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{invalid, Error, Result};
use crate::linalg::{axpy, RngStream};
use crate::metrics::{evaluate, MetricSpec};
use crate::models::ModelState;
use crate::schedules::Schedule;
use crate::scalar::Real;
use crate::trajectory::{geometric_grid, snapshot_grid, Snapshot, TrajectoryLog};

/// Replayable i.i.d. uniform sample indices.
#[derive(Clone, Debug)]
pub struct SampleIndexStream {
    rng: RngStream,
    n: usize,
    batch: usize,
}

impl SampleIndexStream {
    pub fn new(rng: RngStream, n: usize, batch: usize) -> Result<Self> {
        if n == 0 || batch == 0 {
            return invalid("index stream needs n >= 1 and batch >= 1");
        }
        Ok(Self { rng, n, batch })
    }

    #[inline]
    pub fn next_index(&mut self) -> usize {
        self.rng.index(self.n)
    }

    /// Next batch, drawn with replacement.
    pub fn next_batch(&mut self, out: &mut Vec<usize>) {
        out.clear();
        for _ in 0..self.batch {
            out.push(self.rng.index(self.n));
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Gd,
    LabelNoiseGd,
}

impl Optimizer {
    pub fn name(&self) -> &'static str {
        match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Gd => "gd",
            Optimizer::LabelNoiseGd => "label_noise_gd",
        }
    }
}

/// `ξ_i = r_i (1 − n·1{i = i_t})`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelNoiseVector<T> {
    pub xi: Vec<T>,
}

/// Reusable per-step buffers.
#[derive(Clone, Debug)]
pub struct Workspace<T> {
    grad: Vec<T>,
    acc: Vec<T>,
    resid: Vec<T>,
}

impl<T: Real> Workspace<T> {
    pub fn new(p: usize, n: usize) -> Self {
        Self { grad: vec![T::zero(); p], acc: vec![T::zero(); p], resid: vec![T::zero(); n] }
    }

    fn fit(&mut self, p: usize, n: usize) {
        self.grad.resize(p, T::zero());
        self.acc.resize(p, T::zero());
        self.resid.resize(n, T::zero());
    }
}

fn check_update<T: Real>(m: &ModelState<T>) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { iteration: 0, reason: "non-finite parameter after update".into() })
    }
}

/// `θ ← θ − η (h(x_i) − y_i) ∇h(x_i)`.
pub fn sgd_step<T: Real>(m: &mut ModelState<T>, ds: &Dataset<T>, i: usize, eta: T) -> Result<()> {
    let mut ws = Workspace::new(m.num_params(), ds.n());
    sgd_step_with(&mut ws, m, ds, i, eta)
}

pub fn sgd_step_with<T: Real>(ws: &mut Workspace<T>, m: &mut ModelState<T>, ds: &Dataset<T>, i: usize, eta: T) -> Result<()> {
    if i >= ds.n() {
        return invalid(format!("sample index {i} out of range for n={}", ds.n()));
    }
    ws.fit(m.num_params(), ds.n());
    let r = m.eval(ds.x.row(i), Some(&mut ws.grad)) - ds.y[i];
    axpy(-eta * r, &ws.grad, &mut m.theta);
    check_update(m)
}

/// Averages the single-sample updates over `batch` (indices may repeat).
pub fn minibatch_step<T: Real>(m: &mut ModelState<T>, ds: &Dataset<T>, batch: &[usize], eta: T) -> Result<()> {
    let mut ws = Workspace::new(m.num_params(), ds.n());
    minibatch_step_with(&mut ws, m, ds, batch, eta)
}

pub fn minibatch_step_with<T: Real>(
    ws: &mut Workspace<T>,
    m: &mut ModelState<T>,
    ds: &Dataset<T>,
    batch: &[usize],
    eta: T,
) -> Result<()> {
    if batch.is_empty() {
        return invalid("empty batch");
    }
    if batch.len() == 1 {
        return sgd_step_with(ws, m, ds, batch[0], eta);
    }
    ws.fit(m.num_params(), ds.n());
    ws.acc.iter_mut().for_each(|a| *a = T::zero());
    for &i in batch {
        if i >= ds.n() {
            return invalid(format!("sample index {i} out of range for n={}", ds.n()));
        }
        let r = m.eval(ds.x.row(i), Some(&mut ws.grad)) - ds.y[i];
        axpy(r, &ws.grad, &mut ws.acc);
    }
    let scale = eta / T::from_usize_lossy(batch.len());
    axpy(-scale, &ws.acc, &mut m.theta);
    check_update(m)
}

/// `θ ← θ − (η/n) Σ_i c_i ∇h(x_i)` with `c_i` supplied per residual.
fn full_batch_with<T: Real>(
    ws: &mut Workspace<T>,
    m: &mut ModelState<T>,
    ds: &Dataset<T>,
    eta: T,
    coeff: impl Fn(usize, T) -> T,
) -> Result<()> {
    ws.fit(m.num_params(), ds.n());
    ws.acc.iter_mut().for_each(|a| *a = T::zero());
    for i in 0..ds.n() {
        let r = m.eval(ds.x.row(i), Some(&mut ws.grad)) - ds.y[i];
        let c = coeff(i, r);
        if c != T::zero() {
            axpy(c, &ws.grad, &mut ws.acc);
        }
    }
    axpy(-eta / T::from_usize_lossy(ds.n()), &ws.acc, &mut m.theta);
    check_update(m)
}

pub fn gd_step<T: Real>(m: &mut ModelState<T>, ds: &Dataset<T>, eta: T) -> Result<()> {
    let mut ws = Workspace::new(m.num_params(), ds.n());
    gd_step_with(&mut ws, m, ds, eta)
}

pub fn gd_step_with<T: Real>(ws: &mut Workspace<T>, m: &mut ModelState<T>, ds: &Dataset<T>, eta: T) -> Result<()> {
    full_batch_with(ws, m, ds, eta, |_, r| r)
}

pub fn label_noise_vector<T: Real>(m: &ModelState<T>, ds: &Dataset<T>, i_t: usize) -> Result<LabelNoiseVector<T>> {
    if i_t >= ds.n() {
        return invalid(format!("sample index {i_t} out of range for n={}", ds.n()));
    }
    let n = T::from_usize_lossy(ds.n());
    let r = crate::metrics::residuals(m, ds)?;
    let xi = r
        .into_iter()
        .enumerate()
        .map(|(i, ri)| if i == i_t { ri * (T::one() - n) } else { ri })
        .collect();
    Ok(LabelNoiseVector { xi })
}

/// Full-batch GD on the perturbed targets `y + ξ`.
pub fn label_noise_gd_step<T: Real>(m: &mut ModelState<T>, ds: &Dataset<T>, xi: &LabelNoiseVector<T>, eta: T) -> Result<()> {
    let mut ws = Workspace::new(m.num_params(), ds.n());
    label_noise_gd_step_with(&mut ws, m, ds, xi, eta)
}

pub fn label_noise_gd_step_with<T: Real>(
    ws: &mut Workspace<T>,
    m: &mut ModelState<T>,
    ds: &Dataset<T>,
    xi: &LabelNoiseVector<T>,
    eta: T,
) -> Result<()> {
    if xi.xi.len() != ds.n() {
        return invalid("label noise length differs from sample count");
    }
    full_batch_with(ws, m, ds, eta, |i, r| r - xi.xi[i])
}

/// Abort thresholds for a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
pub struct DivergenceGuard<T> {
    pub max_theta_norm: T,
    pub max_loss: T,
}

impl<T: Real> Default for DivergenceGuard<T> {
    fn default() -> Self {
        Self { max_theta_norm: T::lit(1e8), max_loss: T::lit(1e12) }
    }
}

impl<T: Real> DivergenceGuard<T> {
    pub fn check_theta(&self, m: &ModelState<T>, iteration: usize) -> Result<()> {
        let nrm = m.theta_norm();
        if !nrm.is_finite() || nrm > self.max_theta_norm {
            return Err(Error::Diverged { iteration, reason: format!("parameter norm {nrm} exceeds guard") });
        }
        Ok(())
    }

    pub fn check_loss(&self, loss: T, iteration: usize) -> Result<()> {
        if !loss.is_finite() || loss > self.max_loss {
            return Err(Error::Diverged { iteration, reason: format!("train loss {loss} exceeds guard") });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
pub struct RunConfig<T> {
    pub schedule: Schedule<T>,
    pub iterations: usize,
    pub seed: u64,
    #[serde(default = "one_usize")]
    pub batch: usize,
    /// Iterations between cheap records (losses, ℓ0).
    pub log_every: usize,
    /// Iterations between expensive records (rank, sparsity, column norms).
    pub metric_every: usize,
    /// Also take expensive records on a geometric grid with this many points
    /// per doubling; 0 disables it.
    #[serde(default)]
    pub metric_per_octave: usize,
    #[serde(default)]
    pub snapshot_geometric: bool,
    #[serde(default)]
    pub snapshot_linear: usize,
    #[serde(default)]
    pub guard: DivergenceGuard<T>,
}

fn one_usize() -> usize {
    1
}

impl<T: Real> RunConfig<T> {
    pub fn new(schedule: Schedule<T>, iterations: usize, seed: u64) -> Self {
        Self {
            schedule,
            iterations,
            seed,
            batch: 1,
            log_every: (iterations / 100).max(1),
            metric_every: (iterations / 10).max(1),
            metric_per_octave: 0,
            snapshot_geometric: false,
            snapshot_linear: 0,
            guard: DivergenceGuard::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.log_every == 0 || self.metric_every == 0 {
            return invalid("cadences must be at least 1");
        }
        if self.batch == 0 {
            return invalid("batch size must be at least 1");
        }
        self.schedule.validate()
    }
}

/// A run that stopped early; carries everything logged up to the failure.
#[derive(Debug)]
pub struct RunFailure<T> {
    pub error: Error,
    pub partial: TrajectoryLog<T>,
}

impl<T> fmt::Display for RunFailure<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.error)
    }
}

impl<T: fmt::Debug> std::error::Error for RunFailure<T> {}

pub type RunResult<T> = std::result::Result<TrajectoryLog<T>, Box<RunFailure<T>>>;

/// Seed of the index stream for a run seed (kept apart from data/init streams).
pub fn index_stream_seed(seed: u64) -> RngStream {
    RngStream::new(seed).split(0x1d)
}

/// Iterates the chosen rule for `cfg.iterations` steps from `init`.
///
/// `Sgd` and `LabelNoiseGd` consume the same index stream, so with equal
/// seeds they are coupled step for step.
pub fn run<T: Real>(
    cfg: &RunConfig<T>,
    init: &ModelState<T>,
    ds: &Dataset<T>,
    opt: Optimizer,
    metrics: &MetricSpec<T>,
) -> RunResult<T> {
    let mut log = TrajectoryLog::default();
    log.set("optimizer", opt.name());
    log.set("arch", init.arch);
    log.set("seed", cfg.seed);
    log.set("iterations", cfg.iterations);
    log.set("batch", cfg.batch);
    log.set("schedule", &cfg.schedule);
    log.set("thresholds", metrics.thresholds);
    log.set("guard", cfg.guard);
    let fail = |error: Error, log: TrajectoryLog<T>| Box::new(RunFailure { error, partial: log });
    if let Err(e) = cfg.validate() {
        return Err(fail(e, log));
    }
    let mut idx = match SampleIndexStream::new(index_stream_seed(cfg.seed), ds.n(), cfg.batch) {
        Ok(s) => s,
        Err(e) => return Err(fail(e, log)),
    };
    let grid = snapshot_grid(cfg.iterations, cfg.snapshot_geometric, cfg.snapshot_linear);
    let mut m = init.clone();
    let mut ws = Workspace::new(m.num_params(), ds.n());
    let mut batch = Vec::with_capacity(cfg.batch);
    let eta_at = |t: usize| cfg.schedule.eval(t.min(cfg.iterations.saturating_sub(1)));

    let geo = geometric_grid(cfg.iterations, cfg.metric_per_octave);
    let record = |m: &ModelState<T>, t: usize, log: &mut TrajectoryLog<T>| -> Result<()> {
        let full = t % cfg.metric_every == 0 || t == cfg.iterations || geo.contains(&t);
        let mut rec = evaluate(m, ds, metrics, full)?;
        rec.iteration = t;
        rec.step_size = eta_at(t);
        cfg.guard.check_loss(rec.train_loss, t)?;
        log.records.push(rec);
        Ok(())
    };

    if grid.contains(&0) {
        log.snapshots.push(Snapshot { iteration: 0, theta: m.theta.clone() });
    }
    if let Err(e) = record(&m, 0, &mut log) {
        return Err(fail(e, log));
    }
    for t in 0..cfg.iterations {
        let eta = cfg.schedule.eval(t);
        let step = match opt {
            Optimizer::Sgd => {
                idx.next_batch(&mut batch);
                minibatch_step_with(&mut ws, &mut m, ds, &batch, eta)
            }
            Optimizer::Gd => gd_step_with(&mut ws, &mut m, ds, eta),
            Optimizer::LabelNoiseGd => {
                idx.next_batch(&mut batch);
                label_noise_batch_step(&mut ws, &mut m, ds, &batch, eta)
            }
        };
        let done = t + 1;
        let checked = step
            .map_err(|e| match e {
                Error::Diverged { reason, .. } => Error::Diverged { iteration: done, reason },
                e => e,
            })
            .and_then(|_| cfg.guard.check_theta(&m, done));
        if let Err(e) = checked {
            return Err(fail(e, log));
        }
        if grid.contains(&done) {
            log.snapshots.push(Snapshot { iteration: done, theta: m.theta.clone() });
        }
        if done % cfg.log_every == 0 || done == cfg.iterations || geo.contains(&done) {
            if let Err(e) = record(&m, done, &mut log) {
                return Err(fail(e, log));
            }
        }
    }
    Ok(log)
}

/// Label-noise GD whose noise is built from the sampled batch: the batch
/// generalisation of `ξ_i = r_i(1 − n·1{i=i_t})` uses the empirical batch
/// frequencies, so the update equals the mini-batch SGD step.
fn label_noise_batch_step<T: Real>(
    ws: &mut Workspace<T>,
    m: &mut ModelState<T>,
    ds: &Dataset<T>,
    batch: &[usize],
    eta: T,
) -> Result<()> {
    let n = ds.n();
    ws.fit(m.num_params(), n);
    let mut counts = vec![0usize; n];
    for &i in batch {
        counts[i] += 1;
    }
    let nb = T::from_usize_lossy(n) / T::from_usize_lossy(batch.len());
    let mut xi = vec![T::zero(); n];
    for i in 0..n {
        let r = m.eval(ds.x.row(i), None) - ds.y[i];
        xi[i] = r * (T::one() - nb * T::from_usize_lossy(counts[i]));
    }
    label_noise_gd_step_with(ws, m, ds, &LabelNoiseVector { xi }, eta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::models::Arch;

    fn tiny() -> (ModelState<f64>, Dataset<f64>) {
        let m = ModelState::new(Arch::DiagonalLinear { d: 1 }, vec![2.0, 1.0]).unwrap();
        let ds = Dataset::new(Matrix::from_vec(1, 1, vec![3.0]).unwrap(), vec![5.0], None).unwrap();
        (m, ds)
    }

    #[test]
    fn sgd_hand_example() {
        let (mut m, ds) = tiny();
        sgd_step(&mut m, &ds, 0, 0.1).unwrap();
        assert!((m.theta[0] - 1.7).abs() < 1e-15);
        assert!((m.theta[1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn zero_residual_or_step_is_fixed_point() {
        let (mut m, mut ds) = tiny();
        let before = m.clone();
        sgd_step(&mut m, &ds, 0, 0.0).unwrap();
        assert_eq!(m, before);
        ds.y[0] = 6.0;
        sgd_step(&mut m, &ds, 0, 0.3).unwrap();
        gd_step(&mut m, &ds, 0.3).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn gd_on_one_sample_is_sgd() {
        let (mut a, ds) = tiny();
        let mut b = a.clone();
        sgd_step(&mut a, &ds, 0, 0.05).unwrap();
        gd_step(&mut b, &ds, 0.05).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn label_noise_examples() {
        // Quadratic model with θ = 1 on x = 1 predicts 1, so residual = 1 − y.
        let m = ModelState::new(Arch::Quadratic1D, vec![1.0]).unwrap();
        let x = Matrix::from_vec(3, 1, vec![1.0, 1.0, 1.0]).unwrap();
        let ds = Dataset::new(x, vec![0.0, 3.0, 0.5], None).unwrap();
        let xi = label_noise_vector(&m, &ds, 1).unwrap();
        assert_eq!(xi.xi, vec![1.0, 4.0, 0.5]);
        let ds0 = Dataset::new(ds.x.clone(), vec![1.0; 3], None).unwrap();
        assert!(label_noise_vector(&m, &ds0, 0).unwrap().xi.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn label_noise_zero_is_gd() {
        let (mut a, ds) = tiny();
        let mut b = a.clone();
        label_noise_gd_step(&mut a, &ds, &LabelNoiseVector { xi: vec![0.0] }, 0.05).unwrap();
        gd_step(&mut b, &ds, 0.05).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn divergence_is_reported_with_iteration() {
        let (m, ds) = tiny();
        let cfg = RunConfig::new(Schedule::constant(10.0, 50), 50, 0);
        let err = run(&cfg, &m, &ds, Optimizer::Sgd, &MetricSpec::default()).unwrap_err();
        assert!(matches!(err.error, Error::Diverged { iteration, .. } if iteration > 0));
        assert!(!err.partial.records.is_empty());
    }

    #[test]
    fn zero_iterations_logs_initial_state() {
        let (m, ds) = tiny();
        let mut cfg = RunConfig::new(Schedule::constant(0.1, 1), 0, 0);
        cfg.log_every = 1;
        let log = run(&cfg, &m, &ds, Optimizer::Sgd, &MetricSpec::default()).unwrap();
        assert_eq!(log.records.len(), 1);
        assert_eq!(log.records[0].iteration, 0);
    }
}
