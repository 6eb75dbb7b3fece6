//! Prediction functions with closed-form per-sample gradients.
//!
//! Parameter layout of the flat vector θ, per architecture:
//!
//! | arch              | layout                                                   |
//! |-------------------|----------------------------------------------------------|
//! | `DiagonalLinear`  | `u (d) · v (d)`                                          |
//! | `TwoLayerRelu`    | `a (m) · W (m×d, row-major) · b (m, if bias)`            |
//! | `ThreeLayerRelu`  | `a (m2) · W2 (m2×m1) · W1 (m1×d) · b2 (m2) · b1 (m1)`    |
//! | `Quadratic1D`     | `θ`                                                      |
//!
//! Biases of the three-layer net are present only when `bias` is set.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{dot, Matrix, RngStream};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arch {
    DiagonalLinear { d: usize },
    TwoLayerRelu { d: usize, width: usize, bias: bool },
    ThreeLayerRelu { d: usize, width1: usize, width2: usize, bias: bool },
    Quadratic1D,
}

impl Arch {
    pub fn input_dim(&self) -> usize {
        match *self {
            Arch::DiagonalLinear { d } | Arch::TwoLayerRelu { d, .. } | Arch::ThreeLayerRelu { d, .. } => d,
            Arch::Quadratic1D => 1,
        }
    }

    pub fn num_params(&self) -> usize {
        match *self {
            Arch::DiagonalLinear { d } => 2 * d,
            Arch::TwoLayerRelu { d, width, bias } => width * (d + 1) + if bias { width } else { 0 },
            Arch::ThreeLayerRelu { d, width1, width2, bias } => {
                width2 + width2 * width1 + width1 * d + if bias { width1 + width2 } else { 0 }
            }
            Arch::Quadratic1D => 1,
        }
    }

    /// Number of hidden ReLU layers (0 for the linear-type models).
    pub fn hidden_layers(&self) -> usize {
        match self {
            Arch::TwoLayerRelu { .. } => 1,
            Arch::ThreeLayerRelu { .. } => 2,
            _ => 0,
        }
    }

    /// Width of hidden layer `layer` (1-based).
    pub fn layer_width(&self, layer: usize) -> Option<usize> {
        match (*self, layer) {
            (Arch::TwoLayerRelu { width, .. }, 1) => Some(width),
            (Arch::ThreeLayerRelu { width1, .. }, 1) => Some(width1),
            (Arch::ThreeLayerRelu { width2, .. }, 2) => Some(width2),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Arch::DiagonalLinear { .. } => "diagonal_linear",
            Arch::TwoLayerRelu { .. } => "two_layer_relu",
            Arch::ThreeLayerRelu { .. } => "three_layer_relu",
            Arch::Quadratic1D => "quadratic_1d",
        }
    }
}

/// Architecture plus flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState<T> {
    pub arch: Arch,
    pub theta: Vec<T>,
}

#[inline]
fn relu<T: Real>(z: T) -> T {
    if z > T::zero() {
        z
    } else {
        T::zero()
    }
}

impl<T: Real> ModelState<T> {
    pub fn new(arch: Arch, theta: Vec<T>) -> Result<Self> {
        if theta.len() != arch.num_params() {
            return invalid(format!(
                "{} expects {} parameters, got {}",
                arch.name(),
                arch.num_params(),
                theta.len()
            ));
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return invalid("non-finite parameter");
        }
        Ok(Self { arch, theta })
    }

    /// `u = u0·1`, `v = 0`.
    pub fn diagonal_linear(d: usize, u0: T) -> Self {
        let mut theta = vec![T::zero(); 2 * d];
        theta[..d].iter_mut().for_each(|x| *x = u0);
        Self { arch: Arch::DiagonalLinear { d }, theta }
    }

    /// Centered Gaussian weights and biases with standard deviation
    /// `scale/√fan_in`, where a bias shares the fan-in of its layer.
    pub fn gaussian_init(arch: Arch, scale: T, rng: &mut RngStream) -> Self {
        let mut theta = vec![T::zero(); arch.num_params()];
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, theta: &mut Vec<T>| {
            let sd = scale / T::from_usize_lossy(fan_in.max(1)).sqrt();
            for x in &mut theta[range] {
                *x = sd * T::lit(rng.normal());
            }
        };
        match arch {
            Arch::DiagonalLinear { .. } => fill(0..theta.len(), 1, &mut theta),
            Arch::TwoLayerRelu { d, width, bias } => {
                fill(0..width, width, &mut theta);
                fill(width..width + width * d, d, &mut theta);
                if bias {
                    let s = width + width * d;
                    fill(s..s + width, d, &mut theta);
                }
            }
            Arch::ThreeLayerRelu { d, width1, width2, bias } => {
                let (a, w2, w1) = (width2, width2 * width1, width1 * d);
                fill(0..a, width2, &mut theta);
                fill(a..a + w2, width1, &mut theta);
                fill(a + w2..a + w2 + w1, d, &mut theta);
                if bias {
                    let s = a + w2 + w1;
                    fill(s..s + width2, width1, &mut theta);
                    fill(s + width2..s + width2 + width1, d, &mut theta);
                }
            }
            Arch::Quadratic1D => fill(0..1, 1, &mut theta),
        }
        Self { arch, theta }
    }

    #[inline]
    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.arch.input_dim()
    }

    fn check_x(&self, x: &[T]) -> Result<()> {
        if x.len() != self.input_dim() {
            return invalid(format!("input has length {}, model expects {}", x.len(), self.input_dim()));
        }
        Ok(())
    }

    fn check_matrix(&self, x: &Matrix<T>) -> Result<()> {
        if x.cols() != self.input_dim() {
            return invalid(format!("inputs have {} columns, model expects {}", x.cols(), self.input_dim()));
        }
        Ok(())
    }

    /// Effective linear predictor `β = u ⊙ v`; `None` for other architectures.
    pub fn beta(&self) -> Option<Vec<T>> {
        match self.arch {
            Arch::DiagonalLinear { d } => {
                Some(self.theta[..d].iter().zip(&self.theta[d..]).map(|(&u, &v)| u * v).collect())
            }
            _ => None,
        }
    }

    pub fn predict(&self, x: &[T]) -> Result<T> {
        self.check_x(x)?;
        Ok(self.eval(x, None))
    }

    pub fn per_sample_gradient(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_x(x)?;
        let mut g = vec![T::zero(); self.num_params()];
        self.eval(x, Some(&mut g));
        Ok(g)
    }

    /// Prediction, optionally writing `∇_θ h(x)` into `grad`. Unchecked: `x`
    /// must have the input dimension and `grad` the parameter count.
    pub fn eval(&self, x: &[T], grad: Option<&mut [T]>) -> T {
        let th = &self.theta;
        match self.arch {
            Arch::DiagonalLinear { d } => {
                let (u, v) = th.split_at(d);
                let mut h = T::zero();
                for j in 0..d {
                    h += u[j] * v[j] * x[j];
                }
                if let Some(g) = grad {
                    let (gu, gv) = g.split_at_mut(d);
                    for j in 0..d {
                        gu[j] = v[j] * x[j];
                        gv[j] = u[j] * x[j];
                    }
                }
                h
            }
            Arch::TwoLayerRelu { d, width: m, bias } => {
                let a = &th[..m];
                let w = &th[m..m + m * d];
                let b = bias.then(|| &th[m + m * d..]);
                let mut h = T::zero();
                match grad {
                    None => {
                        for k in 0..m {
                            let mut z = dot(&w[k * d..(k + 1) * d], x);
                            if let Some(b) = b {
                                z += b[k];
                            }
                            h += a[k] * relu(z);
                        }
                    }
                    Some(g) => {
                        let (ga, rest) = g.split_at_mut(m);
                        let (gw, gb) = rest.split_at_mut(m * d);
                        for k in 0..m {
                            let mut z = dot(&w[k * d..(k + 1) * d], x);
                            if let Some(b) = b {
                                z += b[k];
                            }
                            let s = relu(z);
                            h += a[k] * s;
                            ga[k] = s;
                            let on = if z > T::zero() { a[k] } else { T::zero() };
                            for (gi, &xi) in gw[k * d..(k + 1) * d].iter_mut().zip(x) {
                                *gi = on * xi;
                            }
                            if bias {
                                gb[k] = on;
                            }
                        }
                    }
                }
                h
            }
            Arch::ThreeLayerRelu { d, width1: m1, width2: m2, bias } => {
                let (a, rest) = th.split_at(m2);
                let (w2, rest) = rest.split_at(m2 * m1);
                let (w1, rest) = rest.split_at(m1 * d);
                let (b2, b1) = if bias { rest.split_at(m2) } else { (&[][..], &[][..]) };
                let mut z1 = vec![T::zero(); m1];
                let mut s1 = vec![T::zero(); m1];
                for j in 0..m1 {
                    z1[j] = dot(&w1[j * d..(j + 1) * d], x) + if bias { b1[j] } else { T::zero() };
                    s1[j] = relu(z1[j]);
                }
                let mut z2 = vec![T::zero(); m2];
                let mut h = T::zero();
                for k in 0..m2 {
                    z2[k] = dot(&w2[k * m1..(k + 1) * m1], &s1) + if bias { b2[k] } else { T::zero() };
                    h += a[k] * relu(z2[k]);
                }
                if let Some(g) = grad {
                    let (ga, rest) = g.split_at_mut(m2);
                    let (gw2, rest) = rest.split_at_mut(m2 * m1);
                    let (gw1, rest) = rest.split_at_mut(m1 * d);
                    let mut g1 = vec![T::zero(); m1];
                    for k in 0..m2 {
                        ga[k] = relu(z2[k]);
                        let g2 = if z2[k] > T::zero() { a[k] } else { T::zero() };
                        for j in 0..m1 {
                            gw2[k * m1 + j] = g2 * s1[j];
                            g1[j] += g2 * w2[k * m1 + j];
                        }
                        if bias {
                            rest[k] = g2;
                        }
                    }
                    for j in 0..m1 {
                        if z1[j] <= T::zero() {
                            g1[j] = T::zero();
                        }
                        for (gi, &xi) in gw1[j * d..(j + 1) * d].iter_mut().zip(x) {
                            *gi = g1[j] * xi;
                        }
                        if bias {
                            rest[m2 + j] = g1[j];
                        }
                    }
                }
                h
            }
            Arch::Quadratic1D => {
                let t = th[0];
                if let Some(g) = grad {
                    g[0] = (t + t) * x[0];
                }
                x[0] * t * t
            }
        }
    }

    /// Predictions on every row of `x`.
    pub fn predict_batch(&self, x: &Matrix<T>) -> Result<Vec<T>> {
        self.check_matrix(x)?;
        Ok((0..x.rows()).map(|i| self.eval(x.row(i), None)).collect())
    }

    /// The n × p matrix whose rows are per-sample gradients.
    pub fn jacobian(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_matrix(x)?;
        let p = self.num_params();
        let mut j = Matrix::zeros(x.rows(), p);
        for i in 0..x.rows() {
            self.eval(x.row(i), Some(j.row_mut(i)));
        }
        Ok(j)
    }

    /// Post-ReLU values of hidden layer `layer` (1-based) for every row of `x`.
    pub fn activations(&self, x: &Matrix<T>, layer: usize) -> Result<Matrix<T>> {
        self.check_matrix(x)?;
        let Some(width) = self.arch.layer_width(layer) else {
            return invalid(format!("{} has no hidden layer {layer}", self.arch.name()));
        };
        let th = &self.theta;
        let mut out = Matrix::zeros(x.rows(), width);
        for i in 0..x.rows() {
            let xi = x.row(i);
            match self.arch {
                Arch::TwoLayerRelu { d, width: m, bias } => {
                    let w = &th[m..m + m * d];
                    for k in 0..m {
                        let b = if bias { th[m + m * d + k] } else { T::zero() };
                        out.set(i, k, relu(dot(&w[k * d..(k + 1) * d], xi) + b));
                    }
                }
                Arch::ThreeLayerRelu { d, width1: m1, width2: m2, bias } => {
                    let w2 = &th[m2..m2 + m2 * m1];
                    let w1 = &th[m2 + m2 * m1..m2 + m2 * m1 + m1 * d];
                    let off = m2 + m2 * m1 + m1 * d;
                    let s1: Vec<T> = (0..m1)
                        .map(|j| relu(dot(&w1[j * d..(j + 1) * d], xi) + if bias { th[off + m2 + j] } else { T::zero() }))
                        .collect();
                    if layer == 1 {
                        out.row_mut(i).copy_from_slice(&s1);
                    } else {
                        for k in 0..m2 {
                            let b = if bias { th[off + k] } else { T::zero() };
                            out.set(i, k, relu(dot(&w2[k * m1..(k + 1) * m1], &s1) + b));
                        }
                    }
                }
                _ => unreachable!("layer_width is None for non-ReLU models"),
            }
        }
        Ok(out)
    }

    /// Input weight vectors of the hidden neurons of a two-layer net.
    pub fn hidden_weights(&self) -> Option<Vec<&[T]>> {
        match self.arch {
            Arch::TwoLayerRelu { d, width, .. } => {
                Some((0..width).map(|k| &self.theta[width + k * d..width + (k + 1) * d]).collect())
            }
            _ => None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|x| x.is_finite())
    }

    pub fn theta_norm(&self) -> T {
        crate::linalg::norm(&self.theta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_layer() -> ModelState<f64> {
        ModelState::new(Arch::TwoLayerRelu { d: 1, width: 2, bias: false }, vec![1.0, -1.0, 1.0, -1.0]).unwrap()
    }

    #[test]
    fn dln_predict_and_gradient() {
        let m = ModelState::new(Arch::DiagonalLinear { d: 2 }, vec![1.0, 2.0, 3.0, 0.0]).unwrap();
        assert_eq!(m.predict(&[1.0, 1.0]).unwrap(), 3.0);
        let m = ModelState::new(Arch::DiagonalLinear { d: 1 }, vec![2.0, 1.0]).unwrap();
        assert_eq!(m.per_sample_gradient(&[3.0]).unwrap(), vec![3.0, 6.0]);
        let j = m.jacobian(&Matrix::from_vec(1, 1, vec![3.0]).unwrap()).unwrap();
        assert_eq!(j.as_slice(), &[3.0, 6.0]);
    }

    #[test]
    fn two_layer_cases() {
        let m = two_layer();
        assert_eq!(m.predict(&[2.0]).unwrap(), 2.0);
        assert_eq!(m.per_sample_gradient(&[2.0]).unwrap(), vec![2.0, 0.0, 2.0, 0.0]);
        let act = m.activations(&Matrix::from_vec(1, 1, vec![2.0]).unwrap(), 1).unwrap();
        assert_eq!(act.as_slice(), &[2.0, 0.0]);
        assert!(m.activations(&Matrix::from_vec(1, 1, vec![2.0]).unwrap(), 2).is_err());
    }

    #[test]
    fn all_negative_preactivations_give_zero_row() {
        let m = ModelState::new(Arch::TwoLayerRelu { d: 1, width: 2, bias: false }, vec![1.0, 1.0, 1.0, 2.0]).unwrap();
        let act = m.activations(&Matrix::from_vec(1, 1, vec![-1.0]).unwrap(), 1).unwrap();
        assert_eq!(act.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn quadratic_predict() {
        let m = ModelState::new(Arch::Quadratic1D, vec![0.5]).unwrap();
        assert_eq!(m.predict(&[3.0]).unwrap(), 0.75);
    }

    #[test]
    fn dimension_checks() {
        let m = two_layer();
        assert!(m.predict(&[1.0, 2.0]).is_err());
        assert!(ModelState::<f64>::new(Arch::Quadratic1D, vec![1.0, 2.0]).is_err());
        assert!(ModelState::<f64>::new(Arch::Quadratic1D, vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn param_counts() {
        assert_eq!(Arch::ThreeLayerRelu { d: 3, width1: 4, width2: 5, bias: true }.num_params(), 5 + 20 + 12 + 9);
        assert_eq!(Arch::TwoLayerRelu { d: 1, width: 100, bias: true }.num_params(), 300);
    }

    #[test]
    fn works_in_single_precision() {
        let m = ModelState::<f32>::new(Arch::DiagonalLinear { d: 1 }, vec![2.0, 1.0]).unwrap();
        assert_eq!(m.per_sample_gradient(&[3.0]).unwrap(), vec![3.0f32, 6.0]);
    }
}
