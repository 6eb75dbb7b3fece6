//! The eleven acceptance criteria, run in order inside one test so the
//! timed criteria are not measured against concurrently running sweeps.
//! Each criterion writes one PASS/FAIL line to stdout; the test fails if any
//! criterion does.

use std::io::Write;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use sgdlab::analysis::{adjacent_inversions, full_record_at, median, plateau_median, stabilization_onset, support_coverage};
use sgdlab::runner::{prepare, ExperimentResult, RunOutcome};
use sgdlab::verify::{admissible_configs, audit_quadratic, brownian_law, coupling, gradients, moments};
use sgdlab::{run_experiment, ExperimentConfig, Mode};
use sgdlab_core::datagen::{gaussian_matrix, GroundTruth};
use sgdlab_core::metrics::{feature_sparsity, jacobian_rank, loss, SparsityOptions};
use sgdlab_core::{Arch, Dataset, Matrix, ModelState, RngStream};

struct Verdict {
    id: usize,
    title: &'static str,
    pass: bool,
    detail: String,
}

fn emit(v: &Verdict) {
    let line = format!("criterion {:>2} {} {}: {}\n", v.id, if v.pass { "PASS" } else { "FAIL" }, v.title, v.detail);
    let mut out = std::io::stdout();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn final_train(o: &RunOutcome) -> f64 {
    if o.diverged() {
        f64::INFINITY
    } else {
        o.log.last().map_or(f64::INFINITY, |r| r.train_loss)
    }
}

fn final_test(o: &RunOutcome) -> f64 {
    if o.diverged() {
        f64::INFINITY
    } else {
        o.log.last().and_then(|r| r.test_loss).unwrap_or(f64::INFINITY)
    }
}

fn final_l0(o: &RunOutcome) -> f64 {
    o.log.last().and_then(|r| r.l0_beta).map_or(f64::INFINITY, |v| v as f64)
}

fn decay_point(o: &RunOutcome) -> usize {
    o.schedule.decay_point().expect("decaying schedule")
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed().as_secs_f64())
}

fn criterion1() -> Verdict {
    let (c, secs) = timed(|| coupling(10, 5, 10_000, 7).unwrap());
    Verdict {
        id: 1,
        title: "SGD / label-noise GD coupling",
        pass: c.pass && secs < 1.0,
        detail: format!("max deviation {:.2e} (tol 1e-9) in {secs:.2}s (limit 1s)", c.value),
    }
}

fn criterion2() -> Verdict {
    let (c, secs) = timed(|| moments(5, 10, 10, 100_000, 4).unwrap());
    Verdict {
        id: 2,
        title: "label-noise moments",
        pass: c.pass && secs < 10.0,
        detail: format!("{} in {secs:.2}s (limit 10s)", c.detail),
    }
}

fn criterion3() -> Verdict {
    let (checks, secs) = timed(|| {
        admissible_configs(20, 99)
            .iter()
            .enumerate()
            .map(|(k, p)| audit_quadratic(&format!("config_{k}"), p, 100_000, k as u64).unwrap())
            .collect::<Vec<_>>()
    });
    let violations: f64 = checks.iter().map(|c| c.value).sum();
    let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
    Verdict {
        id: 3,
        title: "bouncing regime of the quadratic model",
        pass: failed.is_empty() && secs < 30.0,
        detail: format!("20 configs x 1e5 steps, {violations} violations, failing {failed:?}, {secs:.1}s (limit 30s)"),
    }
}

fn criterion4(fig2: &ExperimentResult) -> Verdict {
    let cfg = &fig2.config;
    let (lo, hi) = (10f64.powf(-2.5), 10f64.powf(-0.5));
    let mut plateaus_ok = fig2.diverged() == 0;
    let mut plateau_text = Vec::new();
    for label in ["decay10", "decay30", "decay50"] {
        let mut p = Vec::new();
        for o in fig2.runs_of(label) {
            let m = plateau_median(&o.log, decay_point(o)).unwrap_or(f64::NAN);
            plateaus_ok &= m >= lo && m <= hi;
            p.push(m.log10());
        }
        plateau_text.push(format!("{label} log10 {}", fmt(&p)));
    }

    let small = fig2.runs_of("small");
    let late = fig2.runs_of("decay50");
    let l0_ratio: Vec<f64> = small.iter().zip(&late).map(|(s, l)| final_l0(l) / final_l0(s)).collect();
    let mut coverage = Vec::new();
    for o in &late {
        let ctx = prepare(cfg, o.seed).unwrap();
        let Some(GroundTruth::SparseLinear { beta }) = &ctx.data.truth else { panic!("sparse truth") };
        let theta = o.final_theta().expect("final snapshot").to_vec();
        let est = ModelState::new(Arch::DiagonalLinear { d: beta.len() }, theta).unwrap().beta().unwrap();
        coverage.push(support_coverage(&est, beta, cfg.thresholds.l0_rel));
    }
    let l0_med = median(l0_ratio.clone()).unwrap();
    let cov_med = median(coverage.clone()).unwrap();
    let b_ok = l0_med <= 0.5 && cov_med >= 0.9;

    let tests: Vec<f64> = ["small", "decay10", "decay30", "decay50"]
        .iter()
        .map(|l| median(fig2.runs_of(l).iter().map(|o| final_test(o)).collect()).unwrap())
        .collect();
    let inversions = adjacent_inversions(&tests);
    let c_ok = inversions <= 1;

    let mut rank_ratio = Vec::new();
    for o in &late {
        let dp = decay_point(o);
        let level = plateau_median(&o.log, dp).unwrap_or(f64::NAN);
        let onset = stabilization_onset(&o.log, level).unwrap_or(0);
        let at_onset = full_record_at(&o.log, onset).and_then(|r| r.jacobian_rank);
        let at_decay = full_record_at(&o.log, dp).and_then(|r| r.jacobian_rank);
        rank_ratio.push(match (at_onset, at_decay) {
            (Some(a), Some(b)) if a > 0 => b as f64 / a as f64,
            _ => f64::INFINITY,
        });
    }
    let rank_med = median(rank_ratio.clone()).unwrap();
    let d_ok = rank_med <= 0.6;
    Verdict {
        id: 4,
        title: "dln_fig2",
        pass: plateaus_ok && b_ok && c_ok && d_ok,
        detail: format!(
            "(a) {} plateaus in [1e-2.5, 1e-0.5]: {}; (b) {} median l0 ratio 50%/small {l0_med:.3} {}, median support coverage {cov_med:.2} {}; \
             (c) {} median test [small,10,30,50] {} with {inversions} inversion(s); (d) {} median rank ratio decay/onset {rank_med:.3} {}",
            ok(plateaus_ok),
            plateau_text.join("; "),
            ok(b_ok),
            fmt(&l0_ratio),
            fmt(&coverage),
            ok(c_ok),
            fmt(&tests),
            ok(d_ok),
            fmt(&rank_ratio),
        ),
    }
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "FAIL"
    }
}

fn criterion5(fig2: &ExperimentResult) -> Verdict {
    let gd = run_experiment(&ExperimentConfig::bundled("dln_gd_fig7").unwrap(), Mode::Train, 0).unwrap();
    let mut wins = 0;
    let mut rows = Vec::new();
    for (g, s) in gd.runs_of("gd_decay50").iter().zip(fig2.runs_of("decay50")) {
        assert_eq!(g.seed, s.seed);
        let better = !g.diverged() && !s.diverged() && final_l0(g) > final_l0(s) && final_test(g) > final_test(s);
        wins += better as usize;
        rows.push(format!(
            "s{}: l0 {}/{} test {:.2e}/{:.2e}",
            g.seed,
            final_l0(g),
            final_l0(s),
            final_test(g),
            final_test(s)
        ));
    }
    Verdict {
        id: 5,
        title: "GD control (dln_gd_fig7 vs dln_fig2 decay50)",
        pass: wins >= 4,
        detail: format!("GD sparser-and-worse on {wins}/5 seeds (need 4); GD/SGD {}", rows.join(", ")),
    }
}

fn criterion6() -> Verdict {
    let res = run_experiment(&ExperimentConfig::bundled("relu1d_fig4").unwrap(), Mode::Train, 0).unwrap();
    let early = res.runs_of("warm2");
    let late = res.runs_of("warm50");
    let fits: Vec<f64> = early.iter().chain(&late).map(|o| final_train(o)).collect();
    let fit_ok = fits.iter().all(|&l| l <= 1e-3);
    let ratio: Vec<f64> = early
        .iter()
        .zip(&late)
        .map(|(e, l)| {
            let fs = |o: &RunOutcome| o.log.last().and_then(|r| r.feature_sparsity_l1).unwrap_or(f64::NAN);
            fs(l) / fs(e)
        })
        .collect();
    let ratio_med = median(ratio.clone()).unwrap();
    let fs_ok = ratio_med <= 0.7;
    let plateaus: Vec<f64> =
        late.iter().map(|o| plateau_median(&o.log, decay_point(o)).unwrap_or(f64::NAN).log10()).collect();
    let plateau_ok = plateaus.iter().all(|p| (p + 0.5).abs() <= 1.0);
    Verdict {
        id: 6,
        title: "relu1d_fig4",
        pass: fit_ok && fs_ok && plateau_ok,
        detail: format!(
            "{} final train [warm2 x5, warm50 x5] {}; {} median FS ratio 50%/2% {ratio_med:.3} {}; {} warm50 plateau log10 {} (need within 1 of -0.5)",
            ok(fit_ok),
            fmt(&fits),
            ok(fs_ok),
            fmt(&ratio),
            ok(plateau_ok),
            fmt(&plateaus)
        ),
    }
}

fn criterion7() -> Verdict {
    let res = run_experiment(&ExperimentConfig::bundled("teacher3_fig5").unwrap(), Mode::Train, 0).unwrap();
    let labels = ["const", "warm10", "warm30", "warm50"];
    let fits: Vec<f64> = labels.iter().flat_map(|l| res.runs_of(l)).map(final_train).collect();
    let fit_ok = fits.iter().all(|&l| l <= 1e-3);
    let tests: Vec<f64> =
        labels.iter().map(|l| median(res.runs_of(l).iter().map(|o| final_test(o)).collect()).unwrap()).collect();
    let inversions = adjacent_inversions(&tests);
    let order_ok = inversions <= 1;
    let (mut d1, mut d2) = (Vec::new(), Vec::new());
    for o in res.runs_of("warm50") {
        let dp = decay_point(o);
        let start = o.log.records.first().expect("initial record");
        let end = o.log.records.iter().find(|r| r.iteration == dp).expect("record at the decay point");
        d1.push(end.feature_sparsity_l1.unwrap() - start.feature_sparsity_l1.unwrap());
        d2.push(end.feature_sparsity_l2.unwrap() - start.feature_sparsity_l2.unwrap());
    }
    let (m1, m2) = (median(d1.clone()).unwrap(), median(d2.clone()).unwrap());
    let fs_ok = m1 < 0.0 && m2 < 0.0;
    Verdict {
        id: 7,
        title: "teacher3_fig5",
        pass: fit_ok && order_ok && fs_ok,
        detail: format!(
            "{} max final train {:.2e} (need <= 1e-3 on all 20 runs); {} median test [const,10,30,50] {} with {inversions} inversion(s); \
             {} warm50 median FS change start->decay layer1 {m1:+.3} {} layer2 {m2:+.3} {}",
            ok(fit_ok),
            fits.iter().copied().fold(0.0, f64::max),
            ok(order_ok),
            fmt(&tests),
            ok(fs_ok),
            fmt(&d1),
            fmt(&d2)
        ),
    }
}

fn criterion8() -> Verdict {
    let res = run_experiment(&ExperimentConfig::bundled("dln_sde_fig9").unwrap(), Mode::Sde, 0).unwrap();
    let mut pass = res.diverged() == 0;
    let mut rows = Vec::new();
    for s in &res.seeds {
        let Some(sde) = &s.sde else {
            pass = false;
            rows.push(format!("s{}: no SDE run", s.seed));
            continue;
        };
        let sgd = s.run("sgd").unwrap();
        let ablation = sde.ablation.as_ref().expect("ablation run");
        let rank = |o: &RunOutcome| full_record_at(&o.log, usize::MAX).and_then(|r| r.jacobian_rank);
        let l0 = |o: &RunOutcome| full_record_at(&o.log, usize::MAX).and_then(|r| r.l0_beta);
        let gap_ok = sde.windowed_gap <= 1.0;
        let no_sparsification = rank(ablation) >= rank(sgd) && l0(ablation) >= l0(sgd) && rank(sgd).is_some();
        pass &= gap_ok && no_sparsification;
        rows.push(format!(
            "s{}: c={:.3e} windowed gap {:.2} {}, rank sgd/c0 {:?}/{:?}, l0 sgd/c0 {:?}/{:?} {}",
            s.seed,
            sde.c,
            sde.windowed_gap,
            ok(gap_ok),
            rank(sgd),
            rank(ablation),
            l0(sgd),
            l0(ablation),
            ok(no_sparsification)
        ));
    }
    Verdict { id: 8, title: "dln_sde_fig9", pass, detail: rows.join("; ") }
}

fn criterion9() -> Verdict {
    let checks = gradients(100, 2024).unwrap();
    let worst = checks.iter().map(|c| c.value).fold(0.0, f64::max);
    Verdict {
        id: 9,
        title: "finite-difference gradients",
        pass: checks.iter().all(|c| c.pass),
        detail: format!("{} architectures x 100 probes, worst relative error {worst:.2e} (tol 1e-6)", checks.len()),
    }
}

fn criterion10() -> Verdict {
    let c = brownian_law(10, 100_000, 21).unwrap();
    Verdict {
        id: 10,
        title: "Brownian projection variance",
        pass: c.pass,
        detail: format!("worst relative error {:.2e} (tol 5e-2), {}", c.value, c.detail),
    }
}

fn low_rank(seed: u64, rows: usize, cols: usize, k: usize) -> Matrix {
    let mut rng = RngStream::new(seed);
    gaussian_matrix(rows, k, &mut rng).matmul(&gaussian_matrix(k, cols, &mut rng))
}

fn activations() -> impl Strategy<Value = Matrix> {
    (2usize..9, 1usize..7).prop_flat_map(|(n, m)| {
        prop::collection::vec(prop_oneof![Just(0.0), 1e-3f64..5.0], n * m).prop_map(move |v| Matrix::from_vec(n, m, v).unwrap())
    })
}

fn runner() -> TestRunner {
    let cfg = Config { cases: 1000, failure_persistence: None, ..Config::default() };
    TestRunner::new_with_rng(cfg, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn criterion11() -> Verdict {
    let mut results = Vec::new();

    let r = runner().run(&(any::<u64>(), 2usize..9, 2usize..9, 1usize..4, -3.0f64..3.0), |(seed, rows, cols, k, e)| {
        let m = low_rank(seed, rows, cols, k.min(rows).min(cols));
        let c = 10f64.powf(e);
        let base = jacobian_rank(&m, 1e-3).unwrap();
        prop_assert_eq!(base, jacobian_rank(&m.scaled(c), 1e-3).unwrap());
        prop_assert_eq!(base, jacobian_rank(&m.scaled(-c), 1e-3).unwrap());
        Ok(())
    });
    results.push(("rank scale invariance", r.map_err(|e| e.to_string())));

    let r = runner().run(&(activations(), any::<prop::sample::Index>()), |(a, pick)| {
        let opts = SparsityOptions::default();
        let j = pick.index(a.cols());
        let bigger = Matrix::from_fn(a.rows(), a.cols() + 1, |i, k| a.get(i, if k < a.cols() { k } else { j }));
        let before = feature_sparsity(&a, &opts).unwrap();
        let after = feature_sparsity(&bigger, &opts).unwrap();
        prop_assert!(after <= before + 1e-15);
        Ok(())
    });
    results.push(("sparsity duplicate monotonicity", r.map_err(|e| e.to_string())));

    let r = runner().run(&(activations(), prop::collection::vec(0.1f64..10.0, 6)), |(a, scales)| {
        let opts = SparsityOptions::default();
        let scaled = Matrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) * scales[j % scales.len()]);
        let x = feature_sparsity(&a, &opts).unwrap();
        let y = feature_sparsity(&scaled, &opts).unwrap();
        prop_assert!((x - y).abs() <= 1e-12);
        Ok(())
    });
    results.push(("sparsity column-scale invariance", r.map_err(|e| e.to_string())));

    let r = runner().run(&(any::<u64>(), 1usize..12, 0usize..4), |(seed, n, kind)| {
        let mut rng = RngStream::new(seed);
        let arch = match kind {
            0 => Arch::DiagonalLinear { d: 3 },
            1 => Arch::TwoLayerRelu { d: 3, width: 4, bias: true },
            2 => Arch::ThreeLayerRelu { d: 3, width1: 3, width2: 2, bias: false },
            _ => Arch::Quadratic1D,
        };
        let m = ModelState::gaussian_init(arch, 2.0, &mut rng);
        let x = gaussian_matrix(n, arch.input_dim(), &mut rng);
        let ds = Dataset::new(x, rng.gaussian(n), None).unwrap();
        let l = loss(&m, &ds).unwrap();
        prop_assert!(l >= 0.0 && l.is_finite());
        Ok(())
    });
    results.push(("loss non-negativity", r.map_err(|e| e.to_string())));

    let failed: Vec<String> = results.iter().filter_map(|(n, r)| r.as_ref().err().map(|e| format!("{n}: {e}"))).collect();
    Verdict {
        id: 11,
        title: "metric properties",
        pass: failed.is_empty(),
        detail: if failed.is_empty() {
            format!("{} properties x 1000 cases passed", results.len())
        } else {
            failed.join("; ")
        },
    }
}

#[test]
fn acceptance_criteria() {
    let mut verdicts = Vec::new();
    let mut record = |v: Verdict| {
        emit(&v);
        verdicts.push((v.id, v.pass));
    };
    record(criterion1());
    record(criterion2());
    record(criterion3());
    let fig2 = run_experiment(&ExperimentConfig::bundled("dln_fig2").unwrap(), Mode::Train, 0).unwrap();
    record(criterion4(&fig2));
    record(criterion5(&fig2));
    drop(fig2);
    record(criterion6());
    record(criterion7());
    record(criterion8());
    record(criterion9());
    record(criterion10());
    record(criterion11());
    let failed: Vec<usize> = verdicts.iter().filter(|v| !v.1).map(|v| v.0).collect();
    assert!(failed.is_empty(), "failing acceptance criteria: {failed:?}");
}
