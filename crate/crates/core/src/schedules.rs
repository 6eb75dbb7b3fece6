//! Step-size schedules.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Constant,
    Piecewise,
    LinearWarmup,
    ExpWarmup,
}

/// Whether warmup advances every step or once per pass over the data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WarmupUnit {
    #[default]
    Step,
    Epoch,
}

/// `t ↦ η_t` over a horizon of `horizon` iterations.
///
/// * constant: `η₀` throughout.
/// * piecewise: `η₀` before `⌈fT⌉`, `η₀/k` afterwards.
/// * linear-warmup: `η₀ → η_max` linearly over `warmup_len` steps (default
///   `⌈fT⌉`), held at `η_max`, then `η_max/k` from `⌈fT⌉` if `f < 1`.
/// * exp-warmup: `min(η₀ρᵗ, η_max)`, then `η_max/k` from `⌈fT⌉` if `f < 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
pub struct Schedule<T> {
    pub kind: ScheduleKind,
    pub eta0: T,
    #[serde(default)]
    pub eta_max: Option<T>,
    #[serde(default = "one")]
    pub decay_frac: T,
    #[serde(default = "ten")]
    pub decay_factor: T,
    #[serde(default)]
    pub rho: Option<T>,
    #[serde(default)]
    pub warmup_len: Option<usize>,
    #[serde(default)]
    pub warmup_unit: WarmupUnit,
    /// Samples per epoch, used only with [`WarmupUnit::Epoch`].
    #[serde(default)]
    pub epoch_len: Option<usize>,
    pub horizon: usize,
}

fn one<T: Real>() -> T {
    T::one()
}

fn ten<T: Real>() -> T {
    T::lit(10.0)
}

impl<T: Real> Schedule<T> {
    fn base(kind: ScheduleKind, eta0: T, horizon: usize) -> Self {
        Self {
            kind,
            eta0,
            eta_max: None,
            decay_frac: T::one(),
            decay_factor: T::lit(10.0),
            rho: None,
            warmup_len: None,
            warmup_unit: WarmupUnit::Step,
            epoch_len: None,
            horizon,
        }
    }

    pub fn constant(eta: T, horizon: usize) -> Self {
        Self::base(ScheduleKind::Constant, eta, horizon)
    }

    pub fn piecewise(eta0: T, decay_frac: T, decay_factor: T, horizon: usize) -> Self {
        Self { decay_frac, decay_factor, ..Self::base(ScheduleKind::Piecewise, eta0, horizon) }
    }

    /// Linear warmup that ends exactly at the decay point.
    pub fn linear_warmup(eta0: T, eta_max: T, decay_frac: T, decay_factor: T, horizon: usize) -> Self {
        Self { eta_max: Some(eta_max), decay_frac, decay_factor, ..Self::base(ScheduleKind::LinearWarmup, eta0, horizon) }
    }

    pub fn exp_warmup(eta0: T, rho: T, eta_max: T, decay_frac: T, decay_factor: T, horizon: usize) -> Self {
        Self {
            eta_max: Some(eta_max),
            rho: Some(rho),
            decay_frac,
            decay_factor,
            ..Self::base(ScheduleKind::ExpWarmup, eta0, horizon)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta0 > T::zero()) {
            return invalid("eta0 must be positive");
        }
        if !(self.decay_frac > T::zero() && self.decay_frac <= T::one()) {
            return invalid("decay_frac must lie in (0, 1]");
        }
        if self.decay_frac < T::one() && !(self.decay_factor > T::one()) {
            return invalid("decay_factor must exceed 1");
        }
        match self.kind {
            ScheduleKind::LinearWarmup | ScheduleKind::ExpWarmup => {
                let Some(m) = self.eta_max else {
                    return invalid("warmup schedules need eta_max");
                };
                if m < self.eta0 {
                    return invalid("eta_max must be at least eta0");
                }
            }
            _ => {}
        }
        if self.kind == ScheduleKind::ExpWarmup && !matches!(self.rho, Some(r) if r > T::one()) {
            return invalid("exp-warmup needs rho > 1");
        }
        if self.warmup_unit == WarmupUnit::Epoch && !matches!(self.epoch_len, Some(e) if e > 0) {
            return invalid("epoch warmup needs epoch_len >= 1");
        }
        Ok(())
    }

    /// First decayed iteration, `⌈fT⌉`; `None` when the schedule never decays.
    pub fn decay_point(&self) -> Option<usize> {
        if self.kind == ScheduleKind::Constant || self.decay_frac >= T::one() {
            return None;
        }
        let p = (self.decay_frac * T::from_usize_lossy(self.horizon)).ceil();
        Some(p.to_usize().unwrap_or(self.horizon))
    }

    pub fn step_size(&self, t: usize) -> Result<T> {
        if t >= self.horizon {
            return invalid(format!("iteration {t} outside horizon {}", self.horizon));
        }
        Ok(self.eval(t))
    }

    /// Unchecked evaluation; valid for any `t`.
    pub fn eval(&self, t: usize) -> T {
        let decayed = self.decay_point().is_some_and(|p| t >= p);
        let tw = match (self.warmup_unit, self.epoch_len) {
            (WarmupUnit::Epoch, Some(e)) if e > 0 => (t / e) * e,
            _ => t,
        };
        match self.kind {
            ScheduleKind::Constant => self.eta0,
            ScheduleKind::Piecewise => {
                if decayed {
                    self.eta0 / self.decay_factor
                } else {
                    self.eta0
                }
            }
            ScheduleKind::LinearWarmup => {
                let max = self.eta_max.unwrap_or(self.eta0);
                if decayed {
                    return max / self.decay_factor;
                }
                let len = self.warmup_len.or(self.decay_point()).unwrap_or(self.horizon).max(1);
                if tw >= len {
                    max
                } else {
                    let frac = T::from_usize_lossy(tw) / T::from_usize_lossy(len);
                    self.eta0 + (max - self.eta0) * frac
                }
            }
            ScheduleKind::ExpWarmup => {
                let max = self.eta_max.unwrap_or(self.eta0);
                if decayed {
                    return max / self.decay_factor;
                }
                let rho = self.rho.unwrap_or(T::one());
                let e = self.eta0 * rho.powi(tw.min(i32::MAX as usize) as i32);
                if e.is_finite() {
                    e.min(max)
                } else {
                    max
                }
            }
        }
    }

    pub fn effective_step(&self, t: usize, batch: usize) -> Result<T> {
        if batch == 0 {
            return invalid("batch size must be at least 1");
        }
        Ok(self.step_size(t)? / T::from_usize_lossy(batch))
    }
}
