//! Diagnostics: losses, Jacobian rank, feature sparsity, predictor sparsity,
//! column norms, trajectory projection and teacher alignment.

use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{invalid, Error, Result};
use crate::linalg::{dot, norm, pearson, svd_singular_values, Matrix};
use crate::models::{Arch, ModelState};
use crate::scalar::Real;

/// Residuals `h(x_i) − y_i`.
pub fn residuals<T: Real>(m: &ModelState<T>, ds: &Dataset<T>) -> Result<Vec<T>> {
    let pred = m.predict_batch(&ds.x)?;
    if pred.len() != ds.y.len() {
        return invalid("prediction/target length mismatch");
    }
    Ok(pred.into_iter().zip(&ds.y).map(|(h, &y)| h - y).collect())
}

/// `(1/2n) Σ (h(x_i) − y_i)²`.
pub fn loss<T: Real>(m: &ModelState<T>, ds: &Dataset<T>) -> Result<T> {
    let r = residuals(m, ds)?;
    Ok(half_mean_square(&r))
}

pub(crate) fn half_mean_square<T: Real>(r: &[T]) -> T {
    if r.is_empty() {
        return T::zero();
    }
    dot(r, r) / T::from_usize_lossy(2 * r.len())
}

/// Number of singular values with `σ_k/σ_1 > τ`; 0 for the zero matrix.
pub fn jacobian_rank<T: Real>(phi: &Matrix<T>, tau: T) -> Result<usize> {
    if !(tau > T::zero() && tau < T::one()) {
        return invalid("rank threshold must lie in (0, 1)");
    }
    let s = svd_singular_values(phi)?;
    Ok(rank_from_singular_values(&s, tau))
}

pub fn rank_from_singular_values<T: Real>(s: &[T], tau: T) -> usize {
    match s.first() {
        Some(&s1) if s1 > T::zero() => s.iter().filter(|&&v| v / s1 > tau).count(),
        _ => 0,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsityDenominator {
    /// Divide by the total number of units (merged duplicates lower the value).
    #[default]
    Units,
    /// Divide by the number of clusters.
    Clusters,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
pub struct SparsityOptions<T> {
    /// Correlation at or above which two units are merged.
    pub rho: T,
    /// Activation strictly above this counts as active.
    pub eps: T,
    /// Compare `|r|` instead of the signed coefficient.
    #[serde(default)]
    pub absolute: bool,
    #[serde(default)]
    pub denominator: SparsityDenominator,
}

impl<T: Real> Default for SparsityOptions<T> {
    fn default() -> Self {
        Self { rho: T::lit(0.95), eps: T::lit(1e-8), absolute: false, denominator: SparsityDenominator::Units }
    }
}

/// Greedy correlation clustering of activation columns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterAssignment {
    /// Cluster id per unit; `None` for units never active.
    pub cluster_of: Vec<Option<usize>>,
    /// Representative unit per cluster.
    pub representatives: Vec<usize>,
}

/// Scans units in index order; each active unit joins the first cluster whose
/// representative correlates at least `rho` with it, otherwise it founds a
/// new cluster. Constant nonzero columns cannot be correlated with varying
/// ones, so they only ever share a cluster with other constant columns.
pub fn cluster_units<T: Real>(a: &Matrix<T>, opts: &SparsityOptions<T>) -> Result<ClusterAssignment> {
    if a.rows() < 2 {
        return invalid("feature sparsity needs at least two samples");
    }
    let cols: Vec<Vec<T>> = (0..a.cols()).map(|j| a.col(j)).collect();
    let mut cluster_of = vec![None; a.cols()];
    let mut representatives: Vec<usize> = Vec::new();
    for (j, col) in cols.iter().enumerate() {
        if !col.iter().any(|&v| v > opts.eps) {
            continue;
        }
        let mut home = None;
        for (c, &rep) in representatives.iter().enumerate() {
            let joined = match pearson(&cols[rep], col)? {
                Some(r) => {
                    let r = if opts.absolute { r.abs() } else { r };
                    r >= opts.rho
                }
                None => is_constant(&cols[rep]) && is_constant(col),
            };
            if joined {
                home = Some(c);
                break;
            }
        }
        let c = home.unwrap_or_else(|| {
            representatives.push(j);
            representatives.len() - 1
        });
        cluster_of[j] = Some(c);
    }
    Ok(ClusterAssignment { cluster_of, representatives })
}

fn is_constant<T: Real>(c: &[T]) -> bool {
    c.iter().all(|&v| v == c[0])
}

/// Average over samples of the number of active cluster representatives,
/// divided by the unit count (or cluster count, per `opts.denominator`).
pub fn feature_sparsity<T: Real>(a: &Matrix<T>, opts: &SparsityOptions<T>) -> Result<T> {
    let cl = cluster_units(a, opts)?;
    let mut active = 0usize;
    for i in 0..a.rows() {
        active += cl.representatives.iter().filter(|&&r| a.get(i, r) > opts.eps).count();
    }
    let denom = match opts.denominator {
        SparsityDenominator::Units => a.cols(),
        SparsityDenominator::Clusters => cl.representatives.len(),
    };
    if denom == 0 {
        return Ok(T::zero());
    }
    Ok(T::from_usize_lossy(active) / T::from_usize_lossy(a.rows() * denom))
}

/// `#{i : |β_i| > rel · max_j |β_j|}` for a diagonal linear network.
pub fn l0_beta<T: Real>(m: &ModelState<T>, rel: T) -> Result<usize> {
    let Some(beta) = m.beta() else {
        return invalid(format!("l0_beta needs a diagonal linear network, got {}", m.arch.name()));
    };
    Ok(l0_of(&beta, rel))
}

pub fn l0_of<T: Real>(beta: &[T], rel: T) -> usize {
    let max = beta.iter().fold(T::zero(), |m, b| m.max(b.abs()));
    if max == T::zero() {
        return 0;
    }
    beta.iter().filter(|b| b.abs() > rel * max).count()
}

/// Euclidean norm of every column.
pub fn column_norms<T: Real>(phi: &Matrix<T>) -> Vec<T> {
    let mut acc = vec![T::zero(); phi.cols()];
    for i in 0..phi.rows() {
        for (a, &v) in acc.iter_mut().zip(phi.row(i)) {
            *a += v * v;
        }
    }
    acc.into_iter().map(T::sqrt).collect()
}

/// Coordinates of `θ_t − w_init` in the Gram–Schmidt basis of
/// `(w_star − w_init, w_flow − w_init)`.
pub fn project_trajectory<T: Real>(
    snapshots: &[Vec<T>],
    w_star: &[T],
    w_flow: &[T],
    w_init: &[T],
) -> Result<Vec<[T; 2]>> {
    let p = w_init.len();
    if w_star.len() != p || w_flow.len() != p || snapshots.iter().any(|s| s.len() != p) {
        return invalid("all vectors must have the same length");
    }
    let a: Vec<T> = w_star.iter().zip(w_init).map(|(&s, &i)| s - i).collect();
    let b: Vec<T> = w_flow.iter().zip(w_init).map(|(&f, &i)| f - i).collect();
    let na = norm(&a);
    let nb = norm(&b);
    if na == T::zero() || nb == T::zero() {
        return Err(Error::DegenerateBasis);
    }
    let e1: Vec<T> = a.iter().map(|&x| x / na).collect();
    let c = dot(&b, &e1);
    let mut r: Vec<T> = b.iter().zip(&e1).map(|(&x, &e)| x - c * e).collect();
    let nr = norm(&r);
    if nr <= T::lit(1e-12) * nb {
        return Err(Error::DegenerateBasis);
    }
    r.iter_mut().for_each(|x| *x /= nr);
    Ok(snapshots
        .iter()
        .map(|s| {
            let dlt: Vec<T> = s.iter().zip(w_init).map(|(&x, &i)| x - i).collect();
            [dot(&dlt, &e1), dot(&dlt, &r)]
        })
        .collect())
}

/// Per student neuron: best cosine to any teacher neuron, and its norm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Alignment<T> {
    pub cosine: T,
    pub norm: T,
    pub teacher: Option<usize>,
}

pub fn teacher_alignment<T: Real>(student: &ModelState<T>, teacher: &ModelState<T>) -> Result<Vec<Alignment<T>>> {
    let (Some(sw), Some(tw)) = (student.hidden_weights(), teacher.hidden_weights()) else {
        return invalid("teacher alignment needs two-layer ReLU networks");
    };
    if student.input_dim() != teacher.input_dim() {
        return invalid("student and teacher input dimensions differ");
    }
    Ok(sw
        .iter()
        .map(|w| {
            let nw = norm(w);
            if nw == T::zero() {
                return Alignment { cosine: T::zero(), norm: nw, teacher: None };
            }
            let mut best = (T::neg_infinity(), None);
            for (k, t) in tw.iter().enumerate() {
                let nt = norm(t);
                let c = if nt == T::zero() { T::zero() } else { dot(w, t) / (nw * nt) };
                if c > best.0 {
                    best = (c, Some(k));
                }
            }
            Alignment { cosine: best.0, norm: nw, teacher: best.1 }
        })
        .collect())
}

/// Thresholds recorded with every log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
pub struct Thresholds<T> {
    pub tau: T,
    pub l0_rel: T,
    #[serde(flatten)]
    pub sparsity: SparsityOptions<T>,
}

impl<T: Real> Default for Thresholds<T> {
    fn default() -> Self {
        Self { tau: T::lit(1e-3), l0_rel: T::lit(1e-2), sparsity: SparsityOptions::default() }
    }
}

/// What to measure at each record.
#[derive(Clone, Debug)]
pub struct MetricSpec<T> {
    /// Fresh inputs on which the Jacobian rank is measured.
    pub rank_inputs: Option<Matrix<T>>,
    pub test: Option<Dataset<T>>,
    pub thresholds: Thresholds<T>,
}

impl<T: Real> Default for MetricSpec<T> {
    fn default() -> Self {
        Self { rank_inputs: None, test: None, thresholds: Thresholds::default() }
    }
}

/// One row of a trajectory log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
pub struct MetricRecord<T> {
    pub iteration: usize,
    pub step_size: T,
    pub train_loss: T,
    pub test_loss: Option<T>,
    pub jacobian_rank: Option<usize>,
    pub feature_sparsity_l1: Option<T>,
    pub feature_sparsity_l2: Option<T>,
    pub l0_beta: Option<usize>,
    pub max_col_norm: Option<T>,
    #[serde(skip)]
    pub mean_col_norm: Option<T>,
}

/// Cheap metrics always; rank, sparsity and column norms when `full`.
pub fn evaluate<T: Real>(
    m: &ModelState<T>,
    train: &Dataset<T>,
    spec: &MetricSpec<T>,
    full: bool,
) -> Result<MetricRecord<T>> {
    let th = &spec.thresholds;
    let mut rec = MetricRecord { train_loss: loss(m, train)?, ..Default::default() };
    if let Some(test) = &spec.test {
        rec.test_loss = Some(loss(m, test)?);
    }
    if let Arch::DiagonalLinear { .. } = m.arch {
        rec.l0_beta = Some(l0_beta(m, th.l0_rel)?);
    }
    if !full {
        return Ok(rec);
    }
    if let Some(xr) = &spec.rank_inputs {
        rec.jacobian_rank = Some(jacobian_rank(&m.jacobian(xr)?, th.tau)?);
    }
    let layers = m.arch.hidden_layers();
    if layers >= 1 && train.n() >= 2 {
        rec.feature_sparsity_l1 = Some(feature_sparsity(&m.activations(&train.x, 1)?, &th.sparsity)?);
    }
    if layers >= 2 && train.n() >= 2 {
        rec.feature_sparsity_l2 = Some(feature_sparsity(&m.activations(&train.x, 2)?, &th.sparsity)?);
    }
    let norms = column_norms(&m.jacobian(&train.x)?);
    if !norms.is_empty() {
        rec.max_col_norm = Some(norms.iter().fold(T::zero(), |a, &b| a.max(b)));
        rec.mean_col_norm = Some(norms.iter().copied().sum::<T>() / T::from_usize_lossy(norms.len()));
    }
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[Vec<f64>]) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn loss_cases() {
        let m = ModelState::new(Arch::Quadratic1D, vec![3f64.sqrt()]).unwrap();
        let ds = Dataset::new(mat(&[vec![1.0]]), vec![1.0], None).unwrap();
        assert!((loss(&m, &ds).unwrap() - 2.0).abs() < 1e-14);
        let ds = Dataset::new(mat(&[vec![1.0]]), vec![3.0], None).unwrap();
        assert!(loss(&m, &ds).unwrap() < 1e-15);
    }

    #[test]
    fn rank_cases() {
        assert_eq!(jacobian_rank(&Matrix::<f64>::identity(3), 1e-3).unwrap(), 3);
        assert_eq!(jacobian_rank(&mat(&[vec![1.0, 2.0], vec![2.0, 4.0]]), 1e-3).unwrap(), 1);
        assert_eq!(jacobian_rank(&Matrix::<f64>::zeros(2, 3), 1e-3).unwrap(), 0);
        assert!(jacobian_rank(&Matrix::<f64>::identity(2), 1.5).is_err());
    }

    #[test]
    fn sparsity_cases() {
        let o = SparsityOptions::default();
        assert_eq!(feature_sparsity(&Matrix::<f64>::zeros(3, 4), &o).unwrap(), 0.0);
        assert_eq!(feature_sparsity(&mat(&[vec![1.0, 1.0], vec![2.0, 2.0]]), &o).unwrap(), 0.5);
        let uncorrelated = mat(&[vec![1.0, 2.0, 1.0], vec![2.0, 1.0, 1.0], vec![1.0, 1.0, 2.0]]);
        assert_eq!(feature_sparsity(&uncorrelated, &o).unwrap(), 1.0);
        assert!(feature_sparsity(&mat(&[vec![1.0]]), &o).is_err());
    }

    #[test]
    fn anticorrelated_units_stay_distinct_unless_absolute() {
        let a = mat(&[vec![1.0, 3.0], vec![2.0, 2.0], vec![3.0, 1.0]]);
        let signed = SparsityOptions::default();
        assert_eq!(cluster_units(&a, &signed).unwrap().representatives.len(), 2);
        let abs = SparsityOptions { absolute: true, ..signed };
        assert_eq!(cluster_units(&a, &abs).unwrap().representatives.len(), 1);
    }

    #[test]
    fn cluster_denominator_mode() {
        let a = mat(&[vec![1.0, 1.0], vec![2.0, 2.0]]);
        let o = SparsityOptions { denominator: SparsityDenominator::Clusters, ..Default::default() };
        assert_eq!(feature_sparsity(&a, &o).unwrap(), 1.0);
    }

    #[test]
    fn l0_cases() {
        let zero = ModelState::<f64>::diagonal_linear(3, 0.1);
        assert_eq!(l0_beta(&zero, 1e-2).unwrap(), 0);
        let m = ModelState::new(Arch::DiagonalLinear { d: 2 }, vec![1.0, 1.0, 1.0, 1e-6]).unwrap();
        assert_eq!(l0_beta(&m, 1e-2).unwrap(), 1);
        assert!(l0_beta(&ModelState::new(Arch::Quadratic1D, vec![1.0]).unwrap(), 1e-2).is_err());
    }

    #[test]
    fn column_norm_cases() {
        assert_eq!(column_norms(&Matrix::<f64>::identity(3)), vec![1.0; 3]);
        assert_eq!(column_norms(&mat(&[vec![0.0, 3.0], vec![0.0, 4.0]])), vec![0.0, 5.0]);
    }

    #[test]
    fn projection_cases() {
        let init = vec![1.0, 1.0, 1.0];
        let star = vec![2.0, 1.0, 1.0];
        let flow = vec![2.0, 2.0, 1.0];
        let pts = project_trajectory(&[init.clone(), vec![1.0, 1.0, 5.0], flow.clone()], &star, &flow, &init).unwrap();
        assert_eq!(pts[0], [0.0, 0.0]);
        assert_eq!(pts[1], [0.0, 0.0]);
        assert_eq!(pts[2], [1.0, 1.0]);
        assert!(matches!(
            project_trajectory(&[], &star, &[3.0, 1.0, 1.0], &init),
            Err(Error::DegenerateBasis)
        ));
    }

    #[test]
    fn alignment_cases() {
        let arch = Arch::TwoLayerRelu { d: 2, width: 2, bias: false };
        let t = ModelState::<f64>::new(arch, vec![1.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let al = teacher_alignment(&t, &t).unwrap();
        assert!(al.iter().all(|a| (a.cosine - 1.0).abs() < 1e-15));
        let s = ModelState::new(arch, vec![1.0, 1.0, -1.0, 0.0, 0.0, 0.0]).unwrap();
        let al = teacher_alignment(&s, &t).unwrap();
        assert_eq!(al[0].cosine, 0.0);
        assert_eq!(al[1].cosine, 0.0);
        assert_eq!(al[1].teacher, None);
    }
}
