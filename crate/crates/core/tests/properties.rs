use proptest::prelude::*;

use sgdlab_core::datagen::Dataset;
use sgdlab_core::linalg::{pearson, Matrix};
use sgdlab_core::metrics::{feature_sparsity, jacobian_rank, loss, SparsityDenominator, SparsityOptions};
use sgdlab_core::models::{Arch, ModelState};
use sgdlab_core::schedules::Schedule;
use sgdlab_core::RngStream;

/// A product of two Gaussian factors: rank `k` almost surely, with a clear
/// spectral gap below it.
fn low_rank(seed: u64, rows: usize, cols: usize, k: usize) -> Matrix<f64> {
    let mut rng = RngStream::new(seed);
    let a = sgdlab_core::datagen::gaussian_matrix::<f64>(rows, k, &mut rng);
    let b = sgdlab_core::datagen::gaussian_matrix::<f64>(k, cols, &mut rng);
    a.matmul(&b)
}

/// ReLU-like activation table: each entry is either 0 or at least 1e-3.
fn activations() -> impl Strategy<Value = Matrix<f64>> {
    (2usize..9, 1usize..7).prop_flat_map(|(n, m)| {
        prop::collection::vec(prop_oneof![Just(0.0), 1e-3f64..5.0], n * m)
            .prop_map(move |v| Matrix::from_vec(n, m, v).unwrap())
    })
}

fn with_column(a: &Matrix<f64>, col: &[f64]) -> Matrix<f64> {
    Matrix::from_fn(a.rows(), a.cols() + 1, |i, j| if j < a.cols() { a.get(i, j) } else { col[i] })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn rank_is_scale_invariant(seed in any::<u64>(), rows in 2usize..9, cols in 2usize..9, k in 1usize..4, e in -3.0f64..3.0) {
        let k = k.min(rows).min(cols);
        let m = low_rank(seed, rows, cols, k);
        let c = 10f64.powf(e);
        let r = jacobian_rank(&m, 1e-3).unwrap();
        prop_assert_eq!(r, jacobian_rank(&m.scaled(c), 1e-3).unwrap());
        prop_assert_eq!(r, jacobian_rank(&m.scaled(-c), 1e-3).unwrap());
    }

    #[test]
    fn duplicating_a_unit_never_raises_sparsity(a in activations(), pick in any::<prop::sample::Index>()) {
        let opts = SparsityOptions::default();
        let j = pick.index(a.cols());
        let bigger = with_column(&a, &a.col(j));
        let before = feature_sparsity(&a, &opts).unwrap();
        let after = feature_sparsity(&bigger, &opts).unwrap();
        prop_assert!(after <= before + 1e-15, "{} -> {}", before, after);
        let by_cluster = SparsityOptions { denominator: SparsityDenominator::Clusters, ..opts };
        let c0 = feature_sparsity(&a, &by_cluster).unwrap();
        let c1 = feature_sparsity(&bigger, &by_cluster).unwrap();
        prop_assert!((c0 - c1).abs() <= 1e-15);
    }

    #[test]
    fn sparsity_ignores_positive_column_scaling(a in activations(), scales in prop::collection::vec(0.1f64..10.0, 6)) {
        let opts = SparsityOptions::default();
        let scaled = Matrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) * scales[j % scales.len()]);
        let x = feature_sparsity(&a, &opts).unwrap();
        let y = feature_sparsity(&scaled, &opts).unwrap();
        prop_assert!((x - y).abs() <= 1e-12, "{} vs {}", x, y);
    }

    #[test]
    fn loss_is_non_negative(seed in any::<u64>(), n in 1usize..12, kind in 0usize..4) {
        let mut rng = RngStream::new(seed);
        let arch = match kind {
            0 => Arch::DiagonalLinear { d: 3 },
            1 => Arch::TwoLayerRelu { d: 3, width: 4, bias: true },
            2 => Arch::ThreeLayerRelu { d: 3, width1: 3, width2: 2, bias: false },
            _ => Arch::Quadratic1D,
        };
        let d = arch.input_dim();
        let m = ModelState::gaussian_init(arch, 2.0, &mut rng);
        let x = sgdlab_core::datagen::gaussian_matrix::<f64>(n, d, &mut rng);
        let y: Vec<f64> = rng.gaussian(n);
        let ds = Dataset::new(x, y, None).unwrap();
        let l = loss(&m, &ds).unwrap();
        prop_assert!(l >= 0.0 && l.is_finite());
    }

    #[test]
    fn pearson_symmetric_and_affine(v in prop::collection::vec(-10.0f64..10.0, 3..20), alpha in 0.1f64..5.0, beta in -5.0f64..5.0, neg in any::<bool>()) {
        let alpha = if neg { -alpha } else { alpha };
        let w: Vec<f64> = v.iter().map(|x| alpha * x + beta).collect();
        let u: Vec<f64> = v.iter().rev().cloned().collect();
        if let Some(r) = pearson(&v, &w).unwrap() {
            prop_assert!((r - alpha.signum()).abs() < 1e-9);
        }
        prop_assert_eq!(pearson(&v, &u).unwrap(), pearson(&u, &v).unwrap());
    }

    #[test]
    fn piecewise_schedule_takes_two_values(eta in 1e-4f64..10.0, f in 0.01f64..0.99, k in 1.5f64..100.0, horizon in 1usize..500) {
        let s = Schedule::piecewise(eta, f, k, horizon);
        let p = s.decay_point().unwrap();
        for t in 0..horizon {
            let e = s.step_size(t).unwrap();
            prop_assert_eq!(e, if t < p { eta } else { eta / k });
        }
    }
}
