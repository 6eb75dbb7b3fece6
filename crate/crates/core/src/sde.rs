//! Euler–Maruyama surrogate of the SGD dynamics with multiplicative noise:
//!
//! `θ ← θ − γ∇L(θ) + √γ·√(ηδ)·φ_θ(X)ᵀ z`, `z ~ N(0, I_n)`,
//!
//! driven by the step sizes of a reference SGD run and a noise intensity
//! `δ_t = c · L_ref(⌊t/M⌋)` read off that run's loss curve.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{invalid, Error, Result};
use crate::linalg::{axpy, RngStream};
use crate::metrics::{column_norms, evaluate, MetricSpec};
use crate::models::ModelState;
use crate::optim::{DivergenceGuard, RunFailure, RunResult};
use crate::scalar::Real;
use crate::schedules::Schedule;
use crate::trajectory::TrajectoryLog;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
pub struct SdeConfig<T> {
    /// `γ_t = gamma_ratio · η_t`.
    pub gamma_ratio: T,
    /// SDE steps per reference SGD step.
    pub horizon_mult: usize,
    /// Noise constant `c` in `δ_t = c·L_ref`.
    pub c: T,
    pub seed: u64,
    pub log_every: usize,
    pub metric_every: usize,
    #[serde(default)]
    pub guard: DivergenceGuard<T>,
}

impl<T: Real> SdeConfig<T> {
    pub fn new(c: T, seed: u64) -> Self {
        Self {
            gamma_ratio: T::lit(0.1),
            horizon_mult: 10,
            c,
            seed,
            log_every: 1000,
            metric_every: 10_000,
            guard: DivergenceGuard::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_ratio > T::zero()) || self.horizon_mult == 0 {
            return invalid("gamma_ratio and horizon_mult must be positive");
        }
        if self.c < T::zero() || !self.c.is_finite() {
            return invalid("noise constant c must be finite and non-negative");
        }
        if self.log_every == 0 || self.metric_every == 0 {
            return invalid("cadences must be at least 1");
        }
        Ok(())
    }
}

/// Reusable buffers for [`sde_step`].
#[derive(Clone, Debug)]
pub struct SdeWorkspace<T> {
    grad: Vec<T>,
    acc: Vec<T>,
}

impl<T: Real> SdeWorkspace<T> {
    pub fn new(p: usize) -> Self {
        Self { grad: vec![T::zero(); p], acc: vec![T::zero(); p] }
    }
}

/// One Euler–Maruyama step. Drift and diffusion are both linear combinations
/// of per-sample gradients, so `φᵀz` is accumulated without forming `φ`.
pub fn sde_step<T: Real>(m: &mut ModelState<T>, ds: &Dataset<T>, gamma: T, eta: T, delta: T, z: &[T]) -> Result<()> {
    let mut ws = SdeWorkspace::new(m.num_params());
    sde_step_with(&mut ws, m, ds, gamma, eta, delta, z)
}

pub fn sde_step_with<T: Real>(
    ws: &mut SdeWorkspace<T>,
    m: &mut ModelState<T>,
    ds: &Dataset<T>,
    gamma: T,
    eta: T,
    delta: T,
    z: &[T],
) -> Result<()> {
    if z.len() != ds.n() {
        return invalid(format!("noise has length {}, expected n={}", z.len(), ds.n()));
    }
    if !(gamma > T::zero() && eta > T::zero()) || delta < T::zero() {
        return invalid("need gamma > 0, eta > 0 and delta >= 0");
    }
    let p = m.num_params();
    ws.grad.resize(p, T::zero());
    ws.acc.clear();
    ws.acc.resize(p, T::zero());
    let drift = gamma / T::from_usize_lossy(ds.n());
    let diff = (gamma * eta * delta).sqrt();
    for i in 0..ds.n() {
        let r = m.eval(ds.x.row(i), Some(&mut ws.grad)) - ds.y[i];
        let c = drift * r - diff * z[i];
        if c != T::zero() {
            axpy(c, &ws.grad, &mut ws.acc);
        }
    }
    axpy(-T::one(), &ws.acc, &mut m.theta);
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { iteration: 0, reason: "non-finite parameter after SDE step".into() })
    }
}

/// Reference loss `L_ref(s)`: piecewise constant between recorded points.
pub fn reference_loss<T: Real>(reference: &TrajectoryLog<T>, s: usize) -> Option<T> {
    reference.record_at(s).map(|r| r.train_loss)
}

/// Simulates `horizon_mult × T_ref` steps against a paired SGD run with
/// schedule `schedule` and log `reference`.
pub fn run_sde<T: Real>(
    cfg: &SdeConfig<T>,
    init: &ModelState<T>,
    ds: &Dataset<T>,
    schedule: &Schedule<T>,
    reference: &TrajectoryLog<T>,
    metrics: &MetricSpec<T>,
) -> RunResult<T> {
    run_sde_prefix(cfg, init, ds, schedule, reference, metrics, None)
}

/// As [`run_sde`], stopping after `ref_steps` reference iterations if given.
pub fn run_sde_prefix<T: Real>(
    cfg: &SdeConfig<T>,
    init: &ModelState<T>,
    ds: &Dataset<T>,
    schedule: &Schedule<T>,
    reference: &TrajectoryLog<T>,
    metrics: &MetricSpec<T>,
    ref_steps: Option<usize>,
) -> RunResult<T> {
    let mut log = TrajectoryLog::default();
    log.set("optimizer", "sde");
    log.set("arch", init.arch);
    log.set("seed", cfg.seed);
    log.set("c", cfg.c);
    log.set("gamma_rule", format!("gamma_t = {} * eta_t", cfg.gamma_ratio));
    log.set("horizon_mult", cfg.horizon_mult);
    log.set("thresholds", metrics.thresholds);
    let fail = |error: Error, log: TrajectoryLog<T>| Box::new(RunFailure { error, partial: log });
    if let Err(e) = cfg.validate() {
        return Err(fail(e, log));
    }
    let Some(ref_last) = reference.last().map(|r| r.iteration) else {
        return Err(fail(Error::InvalidInput("reference log is empty".into()), log));
    };
    let ref_len = ref_steps.unwrap_or(ref_last).min(ref_last);
    let total = ref_len * cfg.horizon_mult;
    log.set("iterations", total);
    let mut rng = RngStream::new(cfg.seed).split(0x5de);
    let mut m = init.clone();
    let mut ws = SdeWorkspace::new(m.num_params());
    let mut z = vec![T::zero(); ds.n()];
    let eta_ref = |s: usize| schedule.eval(s.min(ref_last.saturating_sub(1)));

    let record = |m: &ModelState<T>, t: usize, log: &mut TrajectoryLog<T>| -> Result<()> {
        let full = t % cfg.metric_every == 0 || t == total;
        let mut rec = evaluate(m, ds, metrics, full)?;
        rec.iteration = t;
        rec.step_size = cfg.gamma_ratio * eta_ref(t / cfg.horizon_mult);
        cfg.guard.check_loss(rec.train_loss, t)?;
        log.records.push(rec);
        Ok(())
    };
    if let Err(e) = record(&m, 0, &mut log) {
        return Err(fail(e, log));
    }
    for t in 0..total {
        let s = t / cfg.horizon_mult;
        let eta = eta_ref(s);
        let gamma = cfg.gamma_ratio * eta;
        let delta = if cfg.c == T::zero() {
            T::zero()
        } else {
            cfg.c * reference_loss(reference, s).unwrap_or(T::zero())
        };
        if delta > T::zero() {
            rng.fill_gaussian(&mut z);
        }
        let done = t + 1;
        let checked = sde_step_with(&mut ws, &mut m, ds, gamma, eta, delta, &z)
            .map_err(|e| match e {
                Error::Diverged { reason, .. } => Error::Diverged { iteration: done, reason },
                e => e,
            })
            .and_then(|_| cfg.guard.check_theta(&m, done));
        if let Err(e) = checked {
            return Err(fail(e, log));
        }
        if done % cfg.log_every == 0 || done == total {
            if let Err(e) = record(&m, done, &mut log) {
                return Err(fail(e, log));
            }
        }
    }
    Ok(log)
}

/// Mean absolute log10 gap between an SDE log and its reference, compared at
/// matched horizon fractions (SDE iteration `t` ↔ reference `t / mult`).
pub fn log_loss_gap<T: Real>(sde: &TrajectoryLog<T>, reference: &TrajectoryLog<T>, mult: usize) -> T {
    let mut acc = T::zero();
    let mut k = 0usize;
    for r in &sde.records {
        if let Some(rr) = reference.record_at(r.iteration / mult.max(1)) {
            let floor = T::lit(1e-300);
            acc += (r.train_loss.max(floor).log10() - rr.train_loss.max(floor).log10()).abs();
            k += 1;
        }
    }
    if k == 0 {
        T::infinity()
    } else {
        acc / T::from_usize_lossy(k)
    }
}

/// Largest absolute log10 gap at matched horizon fractions.
pub fn max_log_loss_gap<T: Real>(sde: &TrajectoryLog<T>, reference: &TrajectoryLog<T>, mult: usize) -> T {
    let floor = T::lit(1e-300);
    sde.records
        .iter()
        .filter_map(|r| {
            reference
                .record_at(r.iteration / mult.max(1))
                .map(|rr| (r.train_loss.max(floor).log10() - rr.train_loss.max(floor).log10()).abs())
        })
        .fold(T::zero(), T::max)
}

/// Largest absolute log10 gap between window medians. The horizon is cut
/// into `windows` equal slices of reference time; each slice compares the
/// median SDE loss with the median reference loss recorded inside it.
pub fn windowed_log_loss_gap<T: Real>(
    sde: &TrajectoryLog<T>,
    reference: &TrajectoryLog<T>,
    mult: usize,
    windows: usize,
) -> T {
    let Some(horizon) = reference.last().map(|r| r.iteration) else { return T::infinity() };
    let mult = mult.max(1);
    let windows = windows.max(1);
    let floor = T::lit(1e-300);
    let mut worst = T::zero();
    for w in 0..windows {
        let (lo, hi) = (horizon * w / windows, horizon * (w + 1) / windows);
        let pick = |log: &TrajectoryLog<T>, scale: usize| -> Vec<T> {
            log.records
                .iter()
                .filter(|r| r.iteration > lo * scale && r.iteration <= hi * scale)
                .map(|r| r.train_loss.max(floor).log10())
                .collect()
        };
        let (a, b) = (pick(sde, mult), pick(reference, 1));
        match (median(a), median(b)) {
            (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
            _ => return T::infinity(),
        }
    }
    worst
}

fn median<T: Real>(mut v: Vec<T>) -> Option<T> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let k = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[k] } else { (v[k - 1] + v[k]) / T::lit(2.0) })
}

/// Picks `c` from `grid` minimising [`log_loss_gap`] over the first
/// `ref_steps` reference iterations. Returns `(c, gap)` per grid value and the
/// index of the winner; diverged candidates get an infinite gap.
pub fn fit_noise_constant<T: Real>(
    grid: &[T],
    base: &SdeConfig<T>,
    init: &ModelState<T>,
    ds: &Dataset<T>,
    schedule: &Schedule<T>,
    reference: &TrajectoryLog<T>,
    ref_steps: usize,
) -> Result<(Vec<(T, T)>, usize)> {
    if grid.is_empty() {
        return invalid("empty c grid");
    }
    let quiet = MetricSpec { rank_inputs: None, test: None, thresholds: Default::default() };
    let gaps: Vec<(T, T)> = grid
        .par_iter()
        .map(|&c| {
            let cfg = SdeConfig { c, metric_every: usize::MAX, ..base.clone() };
            let gap = match run_sde_prefix(&cfg, init, ds, schedule, reference, &quiet, Some(ref_steps)) {
                Ok(log) => log_loss_gap(&log, reference, cfg.horizon_mult),
                Err(_) => T::infinity(),
            };
            (c, gap)
        })
        .collect();
    let best = gaps
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.partial_cmp(&b.1 .1).unwrap_or(std::cmp::Ordering::Equal))
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok((gaps, best))
}

/// Analytic per-coordinate second moment of the diffusion term,
/// `γηδ‖φ_{:,j}‖²`.
pub fn noise_second_moment<T: Real>(m: &ModelState<T>, ds: &Dataset<T>, gamma: T, eta: T, delta: T) -> Result<Vec<T>> {
    let phi = m.jacobian(&ds.x)?;
    Ok(column_norms(&phi).into_iter().map(|c| gamma * eta * delta * c * c).collect())
}

/// Empirical variance of `⟨v, B_t⟩` with `B_t` built from `steps` Brownian
/// increments, over `trials` independent paths. Trials are split into
/// chunks, each on its own sub-stream of `seed`.
pub fn brownian_projection_check<T: Real>(v: &[T], t: T, trials: usize, steps: usize, seed: u64) -> Result<T> {
    if trials < 1000 {
        return invalid("brownian projection check needs at least 1000 trials");
    }
    if steps == 0 || !(t >= T::zero()) {
        return invalid("need steps >= 1 and t >= 0");
    }
    let root = RngStream::new(seed);
    let chunks = 64usize;
    let dt = (t / T::from_usize_lossy(steps)).sqrt();
    let per: Vec<(f64, f64, usize)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let lo = trials * c / chunks;
            let hi = trials * (c + 1) / chunks;
            let mut rng = root.split(c as u64);
            let (mut s1, mut s2) = (0.0f64, 0.0f64);
            for _ in lo..hi {
                let mut proj = T::zero();
                for _ in 0..steps {
                    for &vj in v {
                        proj += vj * dt * T::lit(rng.normal());
                    }
                }
                let p = proj.as_f64();
                s1 += p;
                s2 += p * p;
            }
            (s1, s2, hi - lo)
        })
        .collect();
    let (s1, s2, n) = per.iter().fold((0.0, 0.0, 0usize), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    let nf = n as f64;
    let mean = s1 / nf;
    Ok(T::lit((s2 - nf * mean * mean) / (nf - 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::models::Arch;
    use crate::optim::gd_step;

    #[test]
    fn hand_example() {
        let mut m = ModelState::new(Arch::DiagonalLinear { d: 1 }, vec![2.0, 1.0]).unwrap();
        let ds = Dataset::new(Matrix::from_vec(1, 1, vec![3.0]).unwrap(), vec![6.0], None).unwrap();
        sde_step(&mut m, &ds, 1.0, 1.0, 1.0, &[1.0]).unwrap();
        assert_eq!(m.theta, vec![5.0, 7.0]);
    }

    #[test]
    fn no_noise_is_gd() {
        let m0 = ModelState::new(Arch::DiagonalLinear { d: 2 }, vec![0.5, -0.2, 0.3, 0.9]).unwrap();
        let ds = Dataset::new(Matrix::from_vec(2, 2, vec![1.0, 2.0, -1.0, 0.5]).unwrap(), vec![0.3, -0.7], None).unwrap();
        let mut a = m0.clone();
        let mut b = m0.clone();
        let mut c = m0.clone();
        sde_step(&mut a, &ds, 0.05, 0.5, 0.0, &[0.4, -1.0]).unwrap();
        sde_step(&mut b, &ds, 0.05, 0.5, 2.0, &[0.0, 0.0]).unwrap();
        gd_step(&mut c, &ds, 0.05).unwrap();
        assert_eq!(a, c);
        assert_eq!(b, c);
    }

    fn loss_log(points: &[(usize, f64)]) -> TrajectoryLog<f64> {
        let records = points
            .iter()
            .map(|&(iteration, train_loss)| crate::metrics::MetricRecord { iteration, train_loss, ..Default::default() })
            .collect();
        TrajectoryLog { records, ..Default::default() }
    }

    #[test]
    fn windowed_gap_compares_medians() {
        let reference = loss_log(&[(0, 1.0), (1, 1.0), (2, 1.0), (3, 1e-2), (4, 1e-2)]);
        // A single spike per window does not move the median.
        let sde = loss_log(&[(0, 1.0), (10, 1.0), (15, 1e3), (20, 1.0), (30, 1e-2), (35, 1e-6), (40, 1e-3)]);
        let gap = windowed_log_loss_gap(&sde, &reference, 10, 2);
        assert!((gap - 1.0).abs() < 1e-12, "{gap}");
        assert!(max_log_loss_gap(&sde, &reference, 10) > 2.9);
        assert_eq!(windowed_log_loss_gap(&loss_log(&[]), &reference, 10, 2), f64::INFINITY);
    }

    #[test]
    fn zero_vector_has_zero_variance() {
        assert_eq!(brownian_projection_check(&[0.0f64; 3], 1.0, 1000, 2, 0).unwrap(), 0.0);
        assert!(brownian_projection_check(&[1.0f64], 1.0, 10, 2, 0).is_err());
    }
}
