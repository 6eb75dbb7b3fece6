//! Deterministic dataset generators and CSV/JSON persistence.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{Matrix, RngStream};
use crate::models::{Arch, ModelState};
use crate::scalar::Real;

/// Generating law behind a dataset, kept so labels can be regenerated and
/// fresh samples drawn from the same distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GroundTruth<T> {
    SparseLinear { beta: Vec<T> },
    Teacher { model: ModelState<T> },
    Quadratic { theta_star: T, a: T, b: T },
    Fixed1d,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub x: Matrix<T>,
    pub y: Vec<T>,
    pub truth: Option<GroundTruth<T>>,
}

impl<T: Real> Dataset<T> {
    pub fn new(x: Matrix<T>, y: Vec<T>, truth: Option<GroundTruth<T>>) -> Result<Self> {
        if x.rows() != y.len() {
            return invalid(format!("{} inputs but {} targets", x.rows(), y.len()));
        }
        Ok(Self { x, y, truth })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.y.len()
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.x.cols()
    }

    /// Labels for `x` under the ground truth, if there is one that defines
    /// labels away from the stored points.
    pub fn label(&self, x: &Matrix<T>) -> Option<Vec<T>> {
        match self.truth.as_ref()? {
            GroundTruth::SparseLinear { beta } => Some(x.matvec(beta)),
            GroundTruth::Teacher { model } => model.predict_batch(x).ok(),
            GroundTruth::Quadratic { theta_star, .. } => {
                Some((0..x.rows()).map(|i| x.get(i, 0) * *theta_star * *theta_star).collect())
            }
            GroundTruth::Fixed1d => None,
        }
    }

    /// Labels regenerated from the ground truth for the stored inputs.
    pub fn regenerate(&self) -> Option<Vec<T>> {
        self.label(&self.x)
    }

    /// Fresh inputs drawn from the dataset's input law.
    pub fn fresh_inputs(&self, count: usize, rng: &mut RngStream) -> Matrix<T> {
        let d = self.d();
        match &self.truth {
            Some(GroundTruth::Quadratic { a, b, .. }) => {
                Matrix::from_fn(count, 1, |_, _| rng.uniform_in(*a, *b))
            }
            Some(GroundTruth::Fixed1d) => Matrix::from_fn(count, 1, |_, _| rng.uniform_in(-T::one(), T::one())),
            _ => gaussian_matrix(count, d, rng),
        }
    }

    /// Fresh labelled samples from the same law; `None` without a ground truth.
    pub fn fresh(&self, count: usize, rng: &mut RngStream) -> Option<Dataset<T>> {
        let x = self.fresh_inputs(count, rng);
        let y = self.label(&x)?;
        Some(Dataset { x, y, truth: self.truth.clone() })
    }

    /// Writes `<stem>.csv` (header `x_0..x_{d-1},y`) and `<stem>.json`.
    pub fn save(&self, stem: &Path, meta: &serde_json::Value) -> Result<()> {
        let mut w = csv::Writer::from_path(stem.with_extension("csv"))?;
        let mut header: Vec<String> = (0..self.d()).map(|j| format!("x_{j}")).collect();
        header.push("y".into());
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec: Vec<String> = self.x.row(i).iter().map(|v| format!("{v:e}")).collect();
            rec.push(format!("{:e}", self.y[i]));
            w.write_record(&rec)?;
        }
        w.flush()?;
        let side = Sidecar { n: self.n(), d: self.d(), truth: self.truth.clone(), meta: meta.clone() };
        let mut f = BufWriter::new(File::create(stem.with_extension("json"))?);
        serde_json::to_writer_pretty(&mut f, &side)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(stem.with_extension("csv"))?;
        let d = r.headers()?.len().saturating_sub(1);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            for j in 0..d {
                xs.push(parse_field(&rec[j])?);
            }
            ys.push(parse_field(&rec[d])?);
        }
        let side: Sidecar<T> = serde_json::from_reader(File::open(stem.with_extension("json"))?)?;
        if side.n != ys.len() || side.d != d {
            return invalid("dataset sidecar does not match csv shape");
        }
        Dataset::new(Matrix::from_vec(ys.len(), d, xs)?, ys, side.truth)
    }
}

fn parse_field<T: Real>(s: &str) -> Result<T> {
    s.trim()
        .parse::<f64>()
        .map(T::lit)
        .map_err(|e| crate::error::Error::InvalidInput(format!("bad number {s:?}: {e}")))
}

#[derive(Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
struct Sidecar<T> {
    n: usize,
    d: usize,
    truth: Option<GroundTruth<T>>,
    #[serde(default)]
    meta: serde_json::Value,
}

pub fn gaussian_matrix<T: Real>(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| T::lit(rng.normal()))
}

/// Gaussian design with an r-sparse Rademacher ground truth on a uniformly
/// random support; `y = Xβ*`.
pub fn sparse_regression<T: Real>(seed: u64, n: usize, d: usize, r: usize) -> Result<Dataset<T>> {
    if r > d {
        return invalid(format!("sparsity r={r} exceeds dimension d={d}"));
    }
    let root = RngStream::new(seed);
    let x = gaussian_matrix(n, d, &mut root.split(0));
    let mut rng = root.split(1);
    let mut beta = vec![T::zero(); d];
    for j in rng.choose(d, r)? {
        beta[j] = rng.rademacher();
    }
    let y = x.matvec(&beta);
    Dataset::new(x, y, Some(GroundTruth::SparseLinear { beta }))
}

/// Inputs of the fixed 1D regression set: 12 equispaced points on [-1, 1].
pub const REGRESSION_1D_X: [f64; 12] = [
    -1.0,
    -0.818_181_818_181_818_2,
    -0.636_363_636_363_636_4,
    -0.454_545_454_545_454_5,
    -0.272_727_272_727_272_7,
    -0.090_909_090_909_090_9,
    0.090_909_090_909_090_9,
    0.272_727_272_727_272_7,
    0.454_545_454_545_454_5,
    0.636_363_636_363_636_4,
    0.818_181_818_181_818_2,
    1.0,
];

/// Targets of the fixed 1D regression set: a piecewise-linear curve with
/// two kinks sampled at [`REGRESSION_1D_X`].
pub const REGRESSION_1D_Y: [f64; 12] = [
    0.7, 0.3061, -0.0879, -0.4818, -0.4, -0.1143, 0.1714, 0.4571, 0.3455, 0.1636, -0.0182, -0.2,
];

/// The committed 12-point 1D regression set. The point set is fixed so every
/// run sees bit-identical data; `seed` is accepted for interface uniformity
/// and does not change it.
pub fn regression_1d<T: Real>(_seed: u64) -> Dataset<T> {
    let x = Matrix::from_fn(12, 1, |i, _| T::lit(REGRESSION_1D_X[i]));
    let y = REGRESSION_1D_Y.iter().map(|&v| T::lit(v)).collect();
    Dataset { x, y, truth: Some(GroundTruth::Fixed1d) }
}

/// Teacher/student pair. The teacher has unit-Gaussian weights and no
/// biases; the student is a fresh Gaussian init of the same depth with
/// standard deviation `init_scale/√fan_in`.
///
/// Teacher draws in which some hidden unit is active on fewer than 10% or
/// more than 90% of the training inputs are rejected and redrawn from the
/// same stream, so the target never degenerates to a constant or a purely
/// linear function.
pub fn teacher_student<T: Real>(
    seed: u64,
    depth: usize,
    teacher_width: usize,
    student_width: usize,
    n: usize,
    d: usize,
    init_scale: T,
) -> Result<(Dataset<T>, ModelState<T>)> {
    if teacher_width == 0 || student_width == 0 || d == 0 {
        return invalid("widths and input dimension must be at least 1");
    }
    let arch = |w: usize| match depth {
        2 => Ok(Arch::TwoLayerRelu { d, width: w, bias: false }),
        3 => Ok(Arch::ThreeLayerRelu { d, width1: w, width2: w, bias: false }),
        _ => invalid(format!("teacher depth must be 2 or 3, got {depth}")),
    };
    let root = RngStream::new(seed);
    let tarch = arch(teacher_width)?;
    let mut trng = root.split(0);
    let x = gaussian_matrix(n, d, &mut root.split(1));
    let mut teacher = ModelState { arch: tarch, theta: trng.gaussian(tarch.num_params()) };
    let mut tries = 1;
    while !teacher_is_generic(&teacher, &x)? {
        if tries == MAX_TEACHER_DRAWS {
            return invalid(format!("no generic teacher in {MAX_TEACHER_DRAWS} draws"));
        }
        teacher.theta = trng.gaussian(tarch.num_params());
        tries += 1;
    }
    let y = teacher.predict_batch(&x)?;
    let student = ModelState::gaussian_init(arch(student_width)?, init_scale, &mut root.split(2));
    Ok((Dataset::new(x, y, Some(GroundTruth::Teacher { model: teacher }))?, student))
}

const MAX_TEACHER_DRAWS: usize = 1000;

fn teacher_is_generic<T: Real>(teacher: &ModelState<T>, x: &Matrix<T>) -> Result<bool> {
    if x.rows() == 0 {
        return Ok(true);
    }
    for layer in 1..=teacher.arch.hidden_layers() {
        let a = teacher.activations(x, layer)?;
        for j in 0..a.cols() {
            let frac = (0..a.rows()).filter(|&i| a.get(i, j) > T::zero()).count() as f64 / a.rows() as f64;
            if !(0.1..=0.9).contains(&frac) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// `x_i ~ U[a, b]`, `y_i = x_i θ*²`.
pub fn quadratic_1d<T: Real>(seed: u64, n: usize, a: T, b: T, theta_star: T) -> Result<Dataset<T>> {
    if a <= T::zero() || b <= a {
        return invalid("quadratic_1d needs 0 < a < b");
    }
    let mut rng = RngStream::new(seed);
    let x = Matrix::from_fn(n, 1, |_, _| rng.uniform_in(a, b));
    let y = (0..n).map(|i| x.get(i, 0) * theta_star * theta_star).collect();
    Dataset::new(x, y, Some(GroundTruth::Quadratic { theta_star, a, b }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparse_defaults() {
        let ds = sparse_regression::<f64>(0, 80, 200, 20).unwrap();
        let Some(GroundTruth::SparseLinear { beta }) = &ds.truth else { panic!() };
        assert_eq!(beta.iter().filter(|b| **b != 0.0).count(), 20);
        assert!(beta.iter().all(|b| *b == 0.0 || b.abs() == 1.0));
        assert_eq!(ds.regenerate().unwrap(), ds.y);
    }

    #[test]
    fn sparse_zero_and_oversized() {
        let ds = sparse_regression::<f64>(1, 10, 5, 0).unwrap();
        assert!(ds.y.iter().all(|&y| y == 0.0));
        assert!(sparse_regression::<f64>(1, 10, 5, 6).is_err());
    }

    #[test]
    fn one_d_set_shape() {
        let ds = regression_1d::<f64>(0);
        assert_eq!(ds.n(), 12);
        assert!(ds.x.col(0).windows(2).all(|w| w[0] < w[1]));
        assert!(ds.y.iter().all(|y| y.abs() <= 1.0));
        assert!(ds.y.iter().any(|&y| y > 0.0) && ds.y.iter().any(|&y| y < 0.0));
        assert_eq!(ds, regression_1d::<f64>(7));
    }

    #[test]
    fn quadratic_checks() {
        assert!(quadratic_1d::<f64>(0, 10, 1.0, 1.0, 1.0).is_err());
        assert!(quadratic_1d::<f64>(0, 10, 0.0, 1.0, 1.0).is_err());
        let ds = quadratic_1d::<f64>(0, 50, 0.5, 2.0, 1.0).unwrap();
        assert_eq!(ds.x.col(0), ds.y);
    }

    #[test]
    fn teacher_at_student_init_fits() {
        let (ds, _) = teacher_student::<f64>(4, 2, 3, 3, 20, 2, 1.0).unwrap();
        let Some(GroundTruth::Teacher { model }) = &ds.truth else { panic!() };
        let pred = model.predict_batch(&ds.x).unwrap();
        assert_eq!(pred, ds.y);
        assert!(teacher_student::<f64>(4, 4, 3, 3, 20, 2, 1.0).is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sparse_regression::<f64>(3, 6, 4, 2).unwrap();
        let stem = dir.path().join("data");
        ds.save(&stem, &serde_json::json!({"seed": 3})).unwrap();
        let back = Dataset::<f64>::load(&stem).unwrap();
        assert_eq!(back, ds);
    }
}
