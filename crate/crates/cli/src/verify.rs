//! Invariant suites behind `sgdlab verify`. Every suite runs at fixed seeds,
//! so verdicts are deterministic.

use std::io::Write;
use std::path::Path;

use serde::Serialize;
use sgdlab_core::datagen::gaussian_matrix;
use sgdlab_core::dynamics1d::{simulate, verify as audit};
use sgdlab_core::metrics::loss;
use sgdlab_core::optim::{index_stream_seed, label_noise_gd_step, label_noise_vector, sgd_step, SampleIndexStream};
use sgdlab_core::sde::{brownian_projection_check, noise_second_moment, sde_step};
use sgdlab_core::{Arch, Dataset, ModelState, QuadParams, RngStream};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    /// The measured quantity the verdict rests on.
    pub value: f64,
    pub tolerance: f64,
    #[serde(skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, value: f64, tolerance: f64, pass: bool) -> Self {
        Self { name: name.into(), pass, value, tolerance, detail: String::new() }
    }

    fn detail(mut self, d: impl Into<String>) -> Self {
        self.detail = d.into();
        self
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub pass: bool,
    pub checks: Vec<Check>,
}

pub const SUITES: [&str; 4] = ["prop1", "prop2", "sde", "gradients"];

pub fn run_suite(name: &str) -> Result<SuiteReport> {
    let checks = match name {
        "prop1" => vec![coupling(10, 5, 10_000, 7)?, moments(5, 10, 10, 100_000, 4)?],
        "prop2" => prop2()?,
        "sde" => sde_suite()?,
        "gradients" => gradients(100, 2024)?,
        _ => return Err(CliError::Config(format!("unknown suite {name:?}; expected one of {}", SUITES.join(", ")))),
    };
    Ok(SuiteReport { suite: name.to_owned(), pass: checks.iter().all(|c| c.pass), checks })
}

fn gaussian_instance(seed: u64, n: usize, d: usize) -> Result<Dataset> {
    let mut rng = RngStream::new(seed);
    let x = gaussian_matrix(n, d, &mut rng);
    Ok(Dataset::new(x, rng.gaussian(n), None)?)
}

/// SGD and label-noise GD fed the same indices stay together to rounding.
pub fn coupling(d: usize, n: usize, steps: usize, seed: u64) -> Result<Check> {
    let ds = gaussian_instance(seed, n, d)?;
    let init = ModelState::diagonal_linear(d, 0.5);
    let (mut a, mut b) = (init.clone(), init);
    let mut stream = SampleIndexStream::new(index_stream_seed(seed), n, 1)?;
    let eta = 0.02;
    let mut worst = 0.0f64;
    for _ in 0..steps {
        let i = stream.next_index();
        let xi = label_noise_vector(&b, &ds, i)?;
        sgd_step(&mut a, &ds, i, eta)?;
        label_noise_gd_step(&mut b, &ds, &xi, eta)?;
        worst = a.theta.iter().zip(&b.theta).fold(worst, |w, (p, q)| w.max((p - q).abs()));
    }
    Ok(Check::new("sgd_label_noise_coupling", worst, 1e-9, worst <= 1e-9)
        .detail(format!("diagonal network d={d}, n={n}, {steps} steps")))
}

/// At `states` random states: every coordinate of `ξ` is centred within
/// four standard errors, and `mean‖ξ‖²/(n(n−1))` is within 1% of `2L`.
pub fn moments(n: usize, d: usize, states: usize, draws: usize, seed: u64) -> Result<Check> {
    let ds = gaussian_instance(seed, n, d)?;
    let mut rng = RngStream::new(seed + 1);
    let (mut worst_z, mut worst_rel) = (0.0f64, 0.0f64);
    for _ in 0..states {
        let m = ModelState::new(Arch::DiagonalLinear { d }, rng.gaussian(2 * d))?;
        let table = (0..n).map(|i| label_noise_vector(&m, &ds, i).map(|v| v.xi)).collect::<sgdlab_core::Result<Vec<_>>>()?;
        let (mut s1, mut s2, mut sq) = (vec![0.0; n], vec![0.0; n], 0.0);
        for _ in 0..draws {
            let xi = &table[rng.index(n)];
            for k in 0..n {
                s1[k] += xi[k];
                s2[k] += xi[k] * xi[k];
            }
            sq += xi.iter().map(|v| v * v).sum::<f64>();
        }
        let nd = draws as f64;
        for k in 0..n {
            let mean = s1[k] / nd;
            let se = ((s2[k] / nd - mean * mean) / nd).sqrt();
            worst_z = worst_z.max(if se > 0.0 { mean.abs() / se } else { 0.0 });
        }
        let two_l = 2.0 * loss(&m, &ds)?;
        worst_rel = worst_rel.max((sq / nd / (n * (n - 1)) as f64 - two_l).abs() / two_l);
    }
    Ok(Check::new("label_noise_moments", worst_rel, 0.01, worst_z <= 4.0 && worst_rel <= 0.01)
        .detail(format!("max |mean|/se = {worst_z:.3}; max relative second-moment error = {worst_rel:.2e}")))
}

/// Bundled admissible configuration of the scalar quadratic model.
pub const QUAD_CONFIG: &str = include_str!("../configs/quad_prop2.toml");

/// `count` admissible configurations drawn from `seed`.
pub fn admissible_configs(count: usize, seed: u64) -> Vec<QuadParams> {
    let mut rng = RngStream::new(seed);
    (0..count)
        .map(|_| {
            let theta_star: f64 = rng.uniform_in(0.3, 3.0);
            let x_min: f64 = rng.uniform_in(0.5, 2.0);
            let gamma_lo: f64 = rng.uniform_in(1.01, 1.2);
            let x_max = x_min * rng.uniform_in(1.0, (1.249 / gamma_lo).sqrt());
            let theta0 = theta_star * rng.uniform_in(0.05, 0.95);
            QuadParams::from_gamma_range(theta_star, x_min, x_max, gamma_lo, theta0)
        })
        .collect()
}

/// Audits one configuration over `steps` steps; the value counts every
/// violation found (bounds, loss band, bouncing, envelope).
pub fn audit_quadratic(name: &str, p: &QuadParams, steps: usize, seed: u64) -> Result<Check> {
    let sim = simulate(p, steps, seed)?;
    let rep = audit(p, &sim.theta)?;
    let bad = rep.out_of_bounds + rep.band_violations + rep.bounce_violations + sim.envelope_violations;
    Ok(Check::new(name, bad as f64, 0.0, rep.all_pass() && sim.envelope_violations == 0)
        .detail(format!("transient ends at {:?}, eps_o = {:.4}", rep.transient_end, rep.epsilon_o)))
}

#[derive(Clone, Debug, serde::Deserialize)]
pub struct QuadFile {
    pub params: QuadParams,
    pub steps: usize,
    pub seed: u64,
}

pub fn bundled_quad() -> Result<QuadFile> {
    toml::from_str(QUAD_CONFIG).map_err(|e| CliError::Config(e.to_string()))
}

/// Writes the trajectory of the bundled configuration (`prop2_trajectory.csv`)
/// and its audit (`prop2_stability.json`) under `dir`.
pub fn write_prop2_trace(dir: &Path) -> Result<()> {
    let f = bundled_quad()?;
    let sim = simulate(&f.params, f.steps, f.seed)?;
    let rep = audit(&f.params, &sim.theta)?;
    std::fs::create_dir_all(dir)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join("prop2_trajectory.csv"))?);
    writeln!(w, "step,theta")?;
    for (t, th) in sim.theta.iter().enumerate() {
        writeln!(w, "{t},{th:e}")?;
    }
    w.flush()?;
    let report = serde_json::json!({ "params": f.params, "steps": f.steps, "seed": f.seed, "report": rep, "envelope_violations": sim.envelope_violations });
    std::fs::write(dir.join("prop2_stability.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

fn prop2() -> Result<Vec<Check>> {
    let f = bundled_quad()?;
    let mut checks = vec![audit_quadratic("bundled_admissible_config", &f.params, f.steps, f.seed)?];
    for (k, p) in admissible_configs(20, 99).iter().enumerate() {
        checks.push(audit_quadratic(&format!("random_admissible_{k}"), p, 100_000, k as u64)?);
    }
    Ok(checks)
}

/// Empirical `Var⟨v, B_t⟩` against `‖v‖²t` for `count` random `v`.
pub fn brownian_law(count: usize, trials: usize, seed: u64) -> Result<Check> {
    let mut rng = RngStream::new(seed);
    let mut worst = 0.0f64;
    for k in 0..count {
        let v: Vec<f64> = rng.gaussian(5);
        let t = rng.uniform_in(0.2, 3.0);
        let want = v.iter().map(|x| x * x).sum::<f64>() * t;
        let got = brownian_projection_check(&v, t, trials, 4, 100 + k as u64)?;
        worst = worst.max((got - want).abs() / want);
    }
    Ok(Check::new("brownian_projection_variance", worst, 0.05, worst <= 0.05)
        .detail(format!("{count} directions, {trials} paths each")))
}

fn sde_suite() -> Result<Vec<Check>> {
    let ds = gaussian_instance(22, 6, 3)?;
    let mut rng = RngStream::new(23);
    let m = ModelState::new(Arch::DiagonalLinear { d: 3 }, rng.gaussian(6))?;
    let (gamma, eta, delta) = (0.01, 0.1, 0.3);
    let mut drift = m.clone();
    sde_step(&mut drift, &ds, gamma, eta, delta, &[0.0; 6])?;
    let want = noise_second_moment(&m, &ds, gamma, eta, delta)?;
    let trials = 40_000;
    let mut acc = [0.0; 6];
    for _ in 0..trials {
        let z: Vec<f64> = rng.gaussian(6);
        let mut s = m.clone();
        sde_step(&mut s, &ds, gamma, eta, delta, &z)?;
        for j in 0..6 {
            acc[j] += (s.theta[j] - drift.theta[j]).powi(2);
        }
    }
    let worst = (0..6).map(|j| (acc[j] / trials as f64 - want[j]).abs() / want[j]).fold(0.0, f64::max);
    let mut gd = m.clone();
    sgdlab_core::optim::gd_step(&mut gd, &ds, gamma)?;
    let mut quiet = m.clone();
    sde_step(&mut quiet, &ds, gamma, eta, 0.0, &[1.0; 6])?;
    let gap = gd.theta.iter().zip(&quiet.theta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(vec![
        brownian_law(10, 100_000, 21)?,
        Check::new("diffusion_second_moment", worst, 0.05, worst <= 0.05).detail(format!("{trials} increments")),
        Check::new("noiseless_step_is_gd", gap, 0.0, gap == 0.0),
    ])
}

/// ReLU on/off pattern of every hidden layer at one input.
fn pattern(m: &ModelState, x: &sgdlab_core::Matrix) -> Result<Vec<bool>> {
    let mut out = Vec::new();
    for layer in 1..=m.arch.hidden_layers() {
        let a = m.activations(x, layer)?;
        out.extend((0..a.cols()).map(|j| a.get(0, j) > 0.0));
    }
    Ok(out)
}

pub const GRADIENT_ARCHS: [Arch; 6] = [
    Arch::DiagonalLinear { d: 7 },
    Arch::TwoLayerRelu { d: 3, width: 6, bias: false },
    Arch::TwoLayerRelu { d: 1, width: 8, bias: true },
    Arch::ThreeLayerRelu { d: 4, width1: 5, width2: 3, bias: false },
    Arch::ThreeLayerRelu { d: 2, width1: 4, width2: 4, bias: true },
    Arch::Quadratic1D,
];

/// Central differences with step 1e-5 against the analytic gradient at
/// `probes` random (θ, x) per architecture. Probes whose difference stencil
/// changes a ReLU pattern are redrawn.
pub fn gradients(probes: usize, seed: u64) -> Result<Vec<Check>> {
    const STEP: f64 = 1e-5;
    let mut rng = RngStream::new(seed);
    let mut checks = Vec::new();
    for arch in GRADIENT_ARCHS {
        let (mut accepted, mut skipped, mut worst) = (0, 0, 0.0f64);
        while accepted < probes {
            let m = ModelState::gaussian_init(arch, 1.0, &mut rng);
            let x: Vec<f64> = rng.gaussian(arch.input_dim());
            let xm = sgdlab_core::Matrix::from_vec(1, x.len(), x.clone())?;
            let base = pattern(&m, &xm)?;
            let g = m.per_sample_gradient(&x)?;
            let mut fd = vec![0.0; g.len()];
            let mut shifted = m.clone();
            let mut crosses = false;
            for k in 0..g.len() {
                let orig = m.theta[k];
                shifted.theta[k] = orig + STEP;
                let up = shifted.predict(&x)?;
                crosses |= pattern(&shifted, &xm)? != base;
                shifted.theta[k] = orig - STEP;
                let down = shifted.predict(&x)?;
                crosses |= pattern(&shifted, &xm)? != base;
                shifted.theta[k] = orig;
                fd[k] = (up - down) / (2.0 * STEP);
            }
            if crosses {
                skipped += 1;
                continue;
            }
            let diff = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = g.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            worst = worst.max(diff / scale);
            accepted += 1;
        }
        checks.push(
            Check::new(format!("finite_differences_{}", arch.name()), worst, 1e-6, worst <= 1e-6)
                .detail(format!("{arch:?}: {probes} probes, {skipped} redrawn near a kink")),
        );
    }
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_suite_is_a_usage_error() {
        assert!(matches!(run_suite("prop3"), Err(CliError::Config(_))));
    }

    #[test]
    fn bundled_quadratic_config_is_admissible() {
        let f = bundled_quad().unwrap();
        assert!(f.params.admissible());
    }

    #[test]
    fn small_gradient_suite_passes() {
        assert!(gradients(5, 1).unwrap().iter().all(|c| c.pass));
    }
}
