//! Dense matrices, one-sided Jacobi SVD, Pearson correlation and the seeded
//! random streams shared by every other module.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Real;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    /// Builds a matrix from row-major entries, rejecting wrong lengths and
    /// non-finite values.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return invalid(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            ));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return invalid("matrix contains a non-finite entry");
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return invalid("ragged rows");
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn col(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn scaled(&self, s: T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| x * s).collect() }
    }

    /// Keeps the listed rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self { rows: idx.len(), cols: self.cols, data }
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `selfᵀ · y`.
    pub fn tr_matvec(&self, y: &[T]) -> Vec<T> {
        assert_eq!(y.len(), self.rows, "tr_matvec dimension mismatch");
        let mut out = vec![T::zero(); self.cols];
        for (i, &yi) in y.iter().enumerate() {
            axpy(yi, self.row(i), &mut out);
        }
        out
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a != T::zero() {
                    axpy(a, other.row(k), dst);
                }
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> T {
        norm(&self.data)
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
pub fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// `y += alpha * x`.
#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Thin singular value decomposition `m = u · diag(s) · vt`.
#[derive(Clone, Debug)]
pub struct Svd<T> {
    /// rows × k with orthonormal columns (columns for zero singular values are zero).
    pub u: Matrix<T>,
    /// k = min(rows, cols) values in descending order.
    pub s: Vec<T>,
    /// k × cols with orthonormal rows.
    pub vt: Matrix<T>,
}

impl<T: Real> Svd<T> {
    pub fn reconstruct(&self) -> Matrix<T> {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, &s) in self.s.iter().enumerate() {
                let v = us.get(i, j) * s;
                us.set(i, j, v);
            }
        }
        us.matmul(&self.vt)
    }
}

/// Singular values of `m`, descending.
pub fn svd_singular_values<T: Real>(m: &Matrix<T>) -> Result<Vec<T>> {
    Ok(jacobi(m, false)?.1)
}

/// Full thin SVD by one-sided Jacobi rotations.
pub fn svd<T: Real>(m: &Matrix<T>) -> Result<Svd<T>> {
    let (cols, s, v, transposed) = jacobi(m, true)?;
    let v = v.expect("vectors requested");
    let k = s.len();
    // `cols` holds the rotated columns U·Σ of the working matrix (length `len`).
    let len = cols.len() / k.max(1);
    let mut left = Matrix::zeros(len, k);
    for (j, &sj) in s.iter().enumerate() {
        if sj > T::zero() {
            for i in 0..len {
                left.set(i, j, cols[j * len + i] / sj);
            }
        }
    }
    // v is k × k in working coordinates, stored column-major (column j = right vector j).
    let right = Matrix::from_fn(k, k, |i, j| v[j * k + i]);
    if transposed {
        // Worked on mᵀ = L Σ Rᵀ, so m = R Σ Lᵀ.
        Ok(Svd { u: right, s, vt: left.transpose() })
    } else {
        Ok(Svd { u: left, s, vt: right.transpose() })
    }
}

type JacobiOut<T> = (Vec<T>, Vec<T>, Option<Vec<T>>, bool);

fn jacobi<T: Real>(m: &Matrix<T>, want_vectors: bool) -> Result<JacobiOut<T>> {
    if !m.is_finite() {
        return invalid("svd input has a non-finite entry");
    }
    if m.rows() == 0 || m.cols() == 0 {
        return invalid("svd input must have at least one row and one column");
    }
    // Orthogonalize the shorter side: k columns of length `len`, column-major.
    let transposed = m.rows() < m.cols();
    let (len, k) = if transposed { (m.cols(), m.rows()) } else { (m.rows(), m.cols()) };
    let mut a = vec![T::zero(); len * k];
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            let (r, c) = if transposed { (j, i) } else { (i, j) };
            a[c * len + r] = m.get(i, j);
        }
    }
    let mut v = want_vectors.then(|| {
        let mut v = vec![T::zero(); k * k];
        for j in 0..k {
            v[j * k + j] = T::one();
        }
        v
    });

    let tol = T::epsilon() * T::from_usize_lossy(len.max(8));
    let mut norms2: Vec<T> = (0..k).map(|j| dot(&a[j * len..(j + 1) * len], &a[j * len..(j + 1) * len])).collect();
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..k {
            for q in p + 1..k {
                let alpha = norms2[p];
                let beta = norms2[q];
                if alpha == T::zero() || beta == T::zero() {
                    continue;
                }
                let (lo, hi) = a.split_at_mut(q * len);
                let ap = &mut lo[p * len..(p + 1) * len];
                let aq = &mut hi[..len];
                let gamma = dot(ap, aq);
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (gamma + gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                for (x, y) in ap.iter_mut().zip(aq.iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
                norms2[p] = alpha - t * gamma;
                norms2[q] = beta + t * gamma;
                if let Some(v) = v.as_mut() {
                    let (lo, hi) = v.split_at_mut(q * k);
                    let vp = &mut lo[p * k..(p + 1) * k];
                    let vq = &mut hi[..k];
                    for (x, y) in vp.iter_mut().zip(vq.iter_mut()) {
                        let (xp, yq) = (*x, *y);
                        *x = c * xp - s * yq;
                        *y = s * xp + c * yq;
                    }
                }
            }
        }
        // Refresh cached norms so update drift never accumulates across sweeps.
        for (j, n2) in norms2.iter_mut().enumerate() {
            let col = &a[j * len..(j + 1) * len];
            *n2 = dot(col, col);
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| norms2[j].partial_cmp(&norms2[i]).unwrap_or(std::cmp::Ordering::Equal));
    let s: Vec<T> = order.iter().map(|&j| norms2[j].max(T::zero()).sqrt()).collect();
    let mut cols = Vec::with_capacity(len * k);
    for &j in &order {
        cols.extend_from_slice(&a[j * len..(j + 1) * len]);
    }
    let v = v.map(|v| {
        let mut out = Vec::with_capacity(k * k);
        for &j in &order {
            out.extend_from_slice(&v[j * k..(j + 1) * k]);
        }
        out
    });
    Ok((cols, s, v, transposed))
}

/// Sample Pearson correlation. `Ok(None)` when either column has zero variance.
pub fn pearson<T: Real>(a: &[T], b: &[T]) -> Result<Option<T>> {
    if a.len() != b.len() {
        return invalid(format!("pearson length mismatch: {} vs {}", a.len(), b.len()));
    }
    if a.len() < 2 {
        return invalid("pearson needs at least two samples");
    }
    let n = T::from_usize_lossy(a.len());
    let ma = a.iter().copied().sum::<T>() / n;
    let mb = b.iter().copied().sum::<T>() / n;
    let (mut sab, mut saa, mut sbb) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == T::zero() || sbb == T::zero() {
        return Ok(None);
    }
    let r = sab / (saa.sqrt() * sbb.sqrt());
    Ok(Some(r.max(-T::one()).min(T::one())))
}

/// Counter-based Gaussian/uniform stream.
///
/// Every draw consumes exactly one 128-bit slot of a ChaCha8 keystream keyed
/// by `seed`, so the state is fully described by `(seed, counter)` and any
/// position can be reconstructed without replaying earlier draws.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    counter: u64,
    core: ChaCha8Rng,
}

const WORDS_PER_DRAW: u128 = 4;

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::at(seed, 0)
    }

    /// Stream positioned at draw index `counter`.
    pub fn at(seed: u64, counter: u64) -> Self {
        let mut core = ChaCha8Rng::seed_from_u64(seed);
        core.set_word_pos(counter as u128 * WORDS_PER_DRAW);
        Self { seed, counter, core }
    }

    /// Independent child stream; children with distinct keys never overlap.
    pub fn split(&self, key: u64) -> Self {
        Self::new(splitmix64(splitmix64(self.seed) ^ splitmix64(key.wrapping_add(0x5851_f42d_4c95_7f2d))))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    #[inline]
    fn draw(&mut self) -> (u64, u64) {
        self.counter += 1;
        (self.core.next_u64(), self.core.next_u64())
    }

    /// Uniform on [0, 1).
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        let (a, _) = self.draw();
        (a >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on [lo, hi).
    pub fn uniform_in<T: Real>(&mut self, lo: T, hi: T) -> T {
        lo + (hi - lo) * T::lit(self.uniform())
    }

    /// Uniform index in `0..n` (multiply-shift; bias below 2⁻⁴⁰ for n < 2²⁴).
    #[inline]
    pub fn index(&mut self, n: usize) -> usize {
        let (a, _) = self.draw();
        ((a as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box–Muller (cosine branch only, one value per draw).
    #[inline]
    pub fn normal(&mut self) -> f64 {
        let (a, b) = self.draw();
        let u1 = ((a >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (b >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn gaussian<T: Real>(&mut self, count: usize) -> Vec<T> {
        (0..count).map(|_| T::lit(self.normal())).collect()
    }

    pub fn fill_gaussian<T: Real>(&mut self, out: &mut [T]) {
        for x in out {
            *x = T::lit(self.normal());
        }
    }

    pub fn rademacher<T: Real>(&mut self) -> T {
        if self.uniform() < 0.5 {
            -T::one()
        } else {
            T::one()
        }
    }

    /// `k` distinct indices from `0..n`, uniformly at random.
    pub fn choose(&mut self, n: usize, k: usize) -> Result<Vec<usize>> {
        if k > n {
            return Err(Error::InvalidInput(format!("cannot choose {k} of {n}")));
        }
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.index(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        Ok(pool)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
