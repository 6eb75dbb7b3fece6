//! Step-size calibration at an interpolating solution.
//!
//! Near a global minimum `θ*` with zero residuals, one SGD step on sample `i`
//! acts on the error `e = θ − θ*` as `e ← (I − η g_i g_iᵀ) e` with
//! `g_i = ∇h_{θ*}(x_i)`. Along `g_i` the squared error is multiplied by
//! `(1 − η‖g_i‖²)²`; averaging over `i` and asking for contraction in mean
//! square gives the edge `η < 2 E‖g‖² / E‖g‖⁴`. For full-batch GD the edge is
//! `2/λ_max(φᵀφ/n)`.

use crate::datagen::Dataset;
use crate::error::{invalid, Result};
use crate::linalg::{dot, norm, RngStream};
use crate::models::{Arch, ModelState};
use crate::scalar::Real;

/// Balanced diagonal-network factorisation of `β`: `u = √|β|`,
/// `v = sign(β)√|β|`.
pub fn balanced_dln<T: Real>(beta: &[T]) -> ModelState<T> {
    let d = beta.len();
    let mut theta = vec![T::zero(); 2 * d];
    for (j, &b) in beta.iter().enumerate() {
        let r = b.abs().sqrt();
        theta[j] = r;
        theta[d + j] = if b < T::zero() { -r } else { r };
    }
    ModelState { arch: Arch::DiagonalLinear { d }, theta }
}

/// `2 E‖g‖² / E‖g‖⁴` over the training samples.
pub fn sgd_stability_edge<T: Real>(m: &ModelState<T>, ds: &Dataset<T>) -> Result<T> {
    if ds.n() == 0 {
        return invalid("empty dataset");
    }
    let (mut s2, mut s4) = (T::zero(), T::zero());
    let mut g = vec![T::zero(); m.num_params()];
    for i in 0..ds.n() {
        m.eval(ds.x.row(i), Some(&mut g));
        let q = dot(&g, &g);
        s2 += q;
        s4 += q * q;
    }
    if s4 == T::zero() {
        return invalid("all per-sample gradients vanish");
    }
    Ok(T::lit(2.0) * s2 / s4)
}

/// `2/λ_max(φᵀφ/n)`, with `λ_max` from power iteration.
pub fn gd_stability_edge<T: Real>(m: &ModelState<T>, ds: &Dataset<T>, seed: u64) -> Result<T> {
    let phi = m.jacobian(&ds.x)?;
    let mut rng = RngStream::new(seed);
    let mut v: Vec<T> = rng.gaussian(phi.cols());
    let mut lambda = T::zero();
    for _ in 0..500 {
        let nv = norm(&v);
        if nv == T::zero() {
            return invalid("power iteration collapsed");
        }
        v.iter_mut().for_each(|x| *x /= nv);
        let w = phi.tr_matvec(&phi.matvec(&v));
        let next = dot(&w, &v) / T::from_usize_lossy(ds.n());
        let done = (next - lambda).abs() <= T::lit(1e-12) * next.abs();
        lambda = next;
        v = w;
        if done {
            break;
        }
    }
    if !(lambda > T::zero()) {
        return invalid("Jacobian is zero at the calibration point");
    }
    Ok(T::lit(2.0) / lambda)
}
