//! Analytic per-sample gradients against central finite differences, with an
//! independent forward pass written out here from the documented layouts.

use sgdlab_core::models::{Arch, ModelState};
use sgdlab_core::RngStream;

const STEP: f64 = 1e-5;
const KINK_GAP: f64 = 1e-4;
const PROBES: usize = 100;

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// Forward pass plus the smallest |pre-activation| seen.
fn reference_forward(arch: &Arch, th: &[f64], x: &[f64]) -> (f64, f64) {
    match *arch {
        Arch::DiagonalLinear { d } => ((0..d).map(|j| th[j] * th[d + j] * x[j]).sum(), f64::INFINITY),
        Arch::Quadratic1D => (x[0] * th[0] * th[0], f64::INFINITY),
        Arch::TwoLayerRelu { d, width: m, bias } => {
            let (a, w) = (&th[..m], &th[m..m + m * d]);
            let mut out = 0.0;
            let mut gap = f64::INFINITY;
            for j in 0..m {
                let mut pre: f64 = (0..d).map(|k| w[j * d + k] * x[k]).sum();
                if bias {
                    pre += th[m + m * d + j];
                }
                gap = gap.min(pre.abs());
                out += a[j] * relu(pre);
            }
            (out, gap)
        }
        Arch::ThreeLayerRelu { d, width1: m1, width2: m2, bias } => {
            let a = &th[..m2];
            let w2 = &th[m2..m2 + m2 * m1];
            let w1 = &th[m2 + m2 * m1..m2 + m2 * m1 + m1 * d];
            let off = m2 + m2 * m1 + m1 * d;
            let mut gap = f64::INFINITY;
            let h1: Vec<f64> = (0..m1)
                .map(|i| {
                    let mut pre: f64 = (0..d).map(|k| w1[i * d + k] * x[k]).sum();
                    if bias {
                        pre += th[off + m2 + i];
                    }
                    gap = gap.min(pre.abs());
                    relu(pre)
                })
                .collect();
            let mut out = 0.0;
            for j in 0..m2 {
                let mut pre: f64 = (0..m1).map(|i| w2[j * m1 + i] * h1[i]).sum();
                if bias {
                    pre += th[off + j];
                }
                gap = gap.min(pre.abs());
                out += a[j] * relu(pre);
            }
            (out, gap)
        }
    }
}

fn architectures() -> Vec<Arch> {
    vec![
        Arch::DiagonalLinear { d: 7 },
        Arch::TwoLayerRelu { d: 3, width: 6, bias: false },
        Arch::TwoLayerRelu { d: 1, width: 8, bias: true },
        Arch::ThreeLayerRelu { d: 4, width1: 5, width2: 3, bias: false },
        Arch::ThreeLayerRelu { d: 2, width1: 4, width2: 4, bias: true },
        Arch::Quadratic1D,
    ]
}

#[test]
fn forward_pass_matches_reference() {
    let mut rng = RngStream::new(11);
    for arch in architectures() {
        for _ in 0..20 {
            let m = ModelState::gaussian_init(arch, 1.0, &mut rng);
            let x: Vec<f64> = rng.gaussian(arch.input_dim());
            let (want, _) = reference_forward(&arch, &m.theta, &x);
            let got = m.predict(&x).unwrap();
            assert!((got - want).abs() <= 1e-12 * (1.0 + want.abs()), "{arch:?}: {got} vs {want}");
        }
    }
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let mut rng = RngStream::new(2024);
    for arch in architectures() {
        let mut accepted = 0;
        let mut worst = 0.0f64;
        while accepted < PROBES {
            let m = ModelState::gaussian_init(arch, 1.0, &mut rng);
            let x: Vec<f64> = rng.gaussian(arch.input_dim());
            if reference_forward(&arch, &m.theta, &x).1 < KINK_GAP {
                continue;
            }
            let g = m.per_sample_gradient(&x).unwrap();
            let mut fd = vec![0.0; g.len()];
            let mut th = m.theta.clone();
            for k in 0..th.len() {
                let orig = th[k];
                th[k] = orig + STEP;
                let up = reference_forward(&arch, &th, &x).0;
                th[k] = orig - STEP;
                let down = reference_forward(&arch, &th, &x).0;
                th[k] = orig;
                fd[k] = (up - down) / (2.0 * STEP);
            }
            let diff: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = g.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            worst = worst.max(diff / scale);
            accepted += 1;
        }
        assert!(worst <= 1e-6, "{arch:?}: worst relative error {worst:e}");
    }
}

#[test]
fn jacobian_rows_are_per_sample_gradients() {
    let mut rng = RngStream::new(5);
    let arch = Arch::ThreeLayerRelu { d: 3, width1: 4, width2: 2, bias: true };
    let m = ModelState::gaussian_init(arch, 1.0, &mut rng);
    let x = sgdlab_core::datagen::gaussian_matrix::<f64>(6, 3, &mut rng);
    let phi = m.jacobian(&x).unwrap();
    for i in 0..6 {
        assert_eq!(phi.row(i), &m.per_sample_gradient(x.row(i)).unwrap()[..]);
    }
}
