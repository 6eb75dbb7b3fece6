//! SGD on the scalar quadratic parameterization `h_θ(x) = xθ²` with targets
//! `y = xθ*²`, and an auditor for its bouncing regime.
//!
//! After rescaling `θ ← θ/θ*` one SGD step is `θ ← h_γ(θ) = θ + γθ(1 − θ²)`
//! with `γ = ηθ*²x²`. For `η ∈ ((θ*x_min)⁻², 1.25(θ*x_max)⁻²)` every `γ` lies
//! in `(1, 1.25)`; the iterates then stay in `(0, 1.162)` and eventually
//! alternate between `(0.65, 1−ε_o)` and `(1+ε_o, 1.162)`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::RngStream;
use crate::scalar::Real;

/// Upper edge of the bounded region for rescaled iterates.
pub const BOUND: f64 = 1.162;
/// Lower edge of the region visited by below-target iterates.
pub const LOW_EDGE: f64 = 0.65;
/// Upper end of the admissible rescaled step range.
pub const GAMMA_CAP: f64 = 1.25;
/// Upper end of the loss band, in units of θ*².
pub const BAND_HIGH: f64 = 0.17;
/// Consecutive alternations that mark the end of the transient.
pub const TRANSIENT_RUN: usize = 200;

/// `h_γ(θ) = θ + γθ(1 − θ²)`.
#[inline]
pub fn quad_step<T: Real>(theta: T, gamma: T) -> T {
    theta + gamma * theta * (T::one() - theta * theta)
}

/// Maximiser of `h_γ` on `(0, 1]`: `√((1+γ)/(3γ))`.
pub fn peak_location<T: Real>(gamma: T) -> T {
    ((T::one() + gamma) / (T::lit(3.0) * gamma)).sqrt()
}

/// `max_{θ∈(0,1]} h_γ(θ) = 2(1+γ)^{3/2} / (3√(3γ))`.
pub fn peak_value<T: Real>(gamma: T) -> T {
    let two = T::lit(2.0);
    let three = T::lit(3.0);
    two * (T::one() + gamma).powf(T::lit(1.5)) / (three * (three * gamma).sqrt())
}

/// Two-step envelope at `θ`: `(h_{γmax}∘h_{γmax}(θ), h_{γmin}∘h_{γmin}(θ))`.
pub fn envelope_bounds<T: Real>(gamma_min: T, gamma_max: T, theta: T) -> (T, T) {
    (quad_step(quad_step(theta, gamma_max), gamma_max), quad_step(quad_step(theta, gamma_min), gamma_min))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
pub struct QuadParams<T> {
    pub theta_star: T,
    pub x_min: T,
    pub x_max: T,
    pub eta: T,
    pub theta0: T,
}

/// Support bounds of the rescaled step `γ = ηθ*²x²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
pub struct RescaledGamma<T> {
    pub gamma_min: T,
    pub gamma_max: T,
}

impl<T: Real> RescaledGamma<T> {
    pub fn admissible(&self) -> bool {
        self.gamma_min > T::one() && self.gamma_max < T::lit(GAMMA_CAP)
    }
}

impl<T: Real> QuadParams<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_star > T::zero()) {
            return invalid("theta_star must be positive");
        }
        if !(self.x_min > T::zero() && self.x_max >= self.x_min) {
            return invalid("need 0 < x_min <= x_max");
        }
        if !(self.eta > T::zero()) {
            return invalid("eta must be positive");
        }
        if !(self.theta0 > T::zero() && self.theta0 < self.theta_star) {
            return invalid("theta0 must lie in (0, theta_star)");
        }
        Ok(())
    }

    pub fn gamma(&self, x: T) -> T {
        self.eta * self.theta_star * self.theta_star * x * x
    }

    pub fn gamma_bounds(&self) -> RescaledGamma<T> {
        RescaledGamma { gamma_min: self.gamma(self.x_min), gamma_max: self.gamma(self.x_max) }
    }

    /// `η ∈ ((θ*x_min)⁻², 1.25(θ*x_max)⁻²)`.
    pub fn admissible(&self) -> bool {
        self.gamma_bounds().admissible()
    }

    /// `ε_o = min((η(θ*x_min)² − 1)/3, 0.02)`.
    pub fn epsilon_o(&self) -> T {
        ((self.gamma(self.x_min) - T::one()) / T::lit(3.0)).min(T::lit(0.02))
    }

    /// Admissible parameters from rescaled step bounds in `(1, 1.25)`.
    pub fn from_gamma_range(theta_star: T, x_min: T, x_max: T, gamma_lo: T, theta0: T) -> Self {
        let eta = gamma_lo / (theta_star * theta_star * x_min * x_min);
        Self { theta_star, x_min, x_max, eta, theta0 }
    }
}

/// Trajectory of one simulation plus the envelope audit done along the way.
#[derive(Clone, Debug, PartialEq)]
pub struct Simulation<T> {
    /// Iterates `θ_0..θ_steps` (raw for [`simulate`], rescaled for
    /// [`simulate_rescaled`]).
    pub theta: Vec<T>,
    /// Two-step transitions from `(0.65, 1)` that fell outside the envelope.
    pub envelope_violations: usize,
    /// Number of two-step transitions audited.
    pub envelope_checks: usize,
}

fn draws<T: Real>(p: &QuadParams<T>, steps: usize, seed: u64) -> impl Iterator<Item = T> {
    let mut rng = RngStream::new(seed);
    let (lo, hi) = (p.x_min, p.x_max);
    (0..steps).map(move |_| rng.uniform_in(lo, hi))
}

fn audit_envelope<T: Real>(p: &QuadParams<T>, rescaled: &[T]) -> (usize, usize) {
    if !p.admissible() {
        return (0, 0);
    }
    let g = p.gamma_bounds();
    let slack = T::lit(1e-12);
    let mut bad = 0;
    let mut checks = 0;
    for w in rescaled.windows(3) {
        if w[0] > T::lit(LOW_EDGE) && w[0] < T::one() {
            let (lo, hi) = envelope_bounds(g.gamma_min, g.gamma_max, w[0]);
            checks += 1;
            if w[2] < lo - slack || w[2] > hi + slack {
                bad += 1;
            }
        }
    }
    (bad, checks)
}

/// SGD on the raw scale: `θ ← θ + ηθx(y − xθ²)`, `x ~ U[x_min, x_max]`.
pub fn simulate<T: Real>(p: &QuadParams<T>, steps: usize, seed: u64) -> Result<Simulation<T>> {
    p.validate()?;
    if steps == 0 {
        return invalid("steps must be at least 1");
    }
    let ts2 = p.theta_star * p.theta_star;
    let mut theta = Vec::with_capacity(steps + 1);
    let mut th = p.theta0;
    theta.push(th);
    for (t, x) in draws(p, steps, seed).enumerate() {
        let y = x * ts2;
        th = th + p.eta * th * x * (y - x * th * th);
        if !th.is_finite() || th.abs() > T::lit(1e8) {
            return Err(Error::Diverged { iteration: t + 1, reason: format!("iterate {th}") });
        }
        theta.push(th);
    }
    let rescaled: Vec<T> = theta.iter().map(|&v| v / p.theta_star).collect();
    let (envelope_violations, envelope_checks) = audit_envelope(p, &rescaled);
    Ok(Simulation { theta, envelope_violations, envelope_checks })
}

/// The same draws pushed through the rescaled map `θ ← h_γ(θ)`.
pub fn simulate_rescaled<T: Real>(p: &QuadParams<T>, steps: usize, seed: u64) -> Result<Simulation<T>> {
    p.validate()?;
    if steps == 0 {
        return invalid("steps must be at least 1");
    }
    let mut theta = Vec::with_capacity(steps + 1);
    let mut th = p.theta0 / p.theta_star;
    theta.push(th);
    for (t, x) in draws(p, steps, seed).enumerate() {
        th = quad_step(th, p.gamma(x));
        if !th.is_finite() || th.abs() > T::lit(1e8) {
            return Err(Error::Diverged { iteration: t + 1, reason: format!("iterate {th}") });
        }
        theta.push(th);
    }
    let (envelope_violations, envelope_checks) = audit_envelope(p, &theta);
    Ok(Simulation { theta, envelope_violations, envelope_checks })
}

/// Loss of the rescaled problem in units of θ*²: `θ*²(1 − (θ/θ*)²)²/4`.
pub fn rescaled_loss<T: Real>(theta: T, theta_star: T) -> T {
    let r = theta / theta_star;
    let g = T::one() - r * r;
    theta_star * theta_star * g * g / T::lit(4.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
pub struct StabilityReport<T> {
    /// False when η is outside the admissible range; flags are then not audited.
    pub applicable: bool,
    /// Every rescaled iterate in `(0, 1.162)`.
    pub bounded: bool,
    /// Rescaled loss inside `(ε_o²θ*², 0.17θ*²)` after the transient.
    pub loss_band: bool,
    /// After the transient, iterates alternate sides of θ* with the lower ones
    /// in `(0.65θ*, (1−ε_o)θ*)` and the upper ones in `((1+ε_o)θ*, 1.162θ*)`.
    pub bouncing: bool,
    pub epsilon_o: T,
    pub transient_end: Option<usize>,
    pub out_of_bounds: usize,
    pub band_violations: usize,
    pub bounce_violations: usize,
    /// Band violations before the transient, reported but not failing.
    pub pre_transient_band_violations: usize,
    pub audited_tail: usize,
}

impl<T: Real> StabilityReport<T> {
    pub fn all_pass(&self) -> bool {
        self.applicable && self.bounded && self.loss_band && self.bouncing
    }
}

/// First index from which `TRANSIENT_RUN` consecutive steps alternate sides
/// of 1 while inside `(0.65, 1.162)`.
pub fn detect_transient<T: Real>(rescaled: &[T]) -> Option<usize> {
    let inside = |v: T| v > T::lit(LOW_EDGE) && v < T::lit(BOUND);
    let mut start = 0usize;
    let mut run = 0usize;
    for t in 0..rescaled.len() {
        let ok = inside(rescaled[t])
            && (run == 0 || (rescaled[t] > T::one()) != (rescaled[t - 1] > T::one()))
            && rescaled[t] != T::one();
        if ok {
            if run == 0 {
                start = t;
            }
            run += 1;
            if run > TRANSIENT_RUN {
                return Some(start);
            }
        } else {
            run = usize::from(inside(rescaled[t]) && rescaled[t] != T::one());
            start = t;
        }
    }
    None
}

/// Audits a raw trajectory (as returned by [`simulate`]).
pub fn verify<T: Real>(p: &QuadParams<T>, trajectory: &[T]) -> Result<StabilityReport<T>> {
    if trajectory.is_empty() {
        return invalid("empty trajectory");
    }
    p.validate()?;
    let eps = p.epsilon_o();
    let mut rep = StabilityReport {
        applicable: p.admissible(),
        bounded: false,
        loss_band: false,
        bouncing: false,
        epsilon_o: eps,
        transient_end: None,
        out_of_bounds: 0,
        band_violations: 0,
        bounce_violations: 0,
        pre_transient_band_violations: 0,
        audited_tail: 0,
    };
    if !rep.applicable {
        return Ok(rep);
    }
    let ts = p.theta_star;
    let r: Vec<T> = trajectory.iter().map(|&v| v / ts).collect();
    rep.out_of_bounds = r.iter().filter(|&&v| !(v > T::zero() && v < T::lit(BOUND))).count();
    rep.bounded = rep.out_of_bounds == 0;

    let lo_band = eps * eps * ts * ts;
    let hi_band = T::lit(BAND_HIGH) * ts * ts;
    let margin = T::lit(1e-12);
    let in_band = |v: T| {
        let f = rescaled_loss(v * ts, ts);
        f > lo_band + margin && f < hi_band
    };
    rep.transient_end = detect_transient(&r);
    let Some(t0) = rep.transient_end else {
        return Ok(rep);
    };
    rep.pre_transient_band_violations = r[..t0].iter().filter(|&&v| !in_band(v)).count();
    rep.band_violations = r[t0..].iter().filter(|&&v| !in_band(v)).count();
    rep.loss_band = rep.band_violations == 0;
    let below = |v: T| v > T::lit(LOW_EDGE) && v < T::one() - eps;
    let above = |v: T| v > T::one() + eps && v < T::lit(BOUND);
    let mut bad = 0usize;
    for t in t0..r.len() {
        let side_ok = below(r[t]) || above(r[t]);
        let alt_ok = t == t0 || (r[t] > T::one()) != (r[t - 1] > T::one());
        if !(side_ok && alt_ok) {
            bad += 1;
        }
    }
    rep.bounce_violations = bad;
    rep.bouncing = bad == 0;
    rep.audited_tail = r.len() - t0;
    Ok(rep)
}
