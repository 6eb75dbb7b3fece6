//! Charts and a final-metrics table regenerated from the CSVs of a bundle.

use std::fmt::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sgdlab_core::{MetricRecord, TrajectoryLog};

use crate::analysis::median;
use crate::error::{CliError, Result};
use crate::svg::{Chart, Series};

/// Runs present in a bundle, in the order they were written.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    pub runs: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub label: String,
    pub seed: u64,
    /// Path of the CSV relative to the bundle root.
    pub csv: String,
}

struct Loaded {
    label: String,
    seed: u64,
    records: Vec<MetricRecord>,
}

fn load(dir: &Path) -> Result<(Manifest, Vec<Loaded>)> {
    let mpath = dir.join("manifest.json");
    if !mpath.exists() {
        return Err(CliError::MissingFiles(vec![mpath.display().to_string()]));
    }
    let manifest: Manifest = serde_json::from_reader(std::fs::File::open(&mpath)?)?;
    let missing: Vec<String> =
        manifest.runs.iter().map(|e| dir.join(&e.csv)).filter(|p| !p.exists()).map(|p| p.display().to_string()).collect();
    if !missing.is_empty() {
        return Err(CliError::MissingFiles(missing));
    }
    let mut runs = Vec::new();
    for e in &manifest.runs {
        runs.push(Loaded { label: e.label.clone(), seed: e.seed, records: TrajectoryLog::read_csv(&dir.join(&e.csv))? });
    }
    Ok((manifest, runs))
}

type Pick = fn(&MetricRecord) -> Option<f64>;

const METRICS: [(&str, &str, bool, Pick); 6] = [
    ("train_loss", "train loss", true, |r| Some(r.train_loss)),
    ("test_loss", "test loss", true, |r| r.test_loss),
    ("rank", "Jacobian rank", false, |r| r.jacobian_rank.map(|v| v as f64)),
    ("l0", "l0 of beta", false, |r| r.l0_beta.map(|v| v as f64)),
    ("sparsity_l1", "feature sparsity, layer 1", false, |r| r.feature_sparsity_l1),
    ("sparsity_l2", "feature sparsity, layer 2", false, |r| r.feature_sparsity_l2),
];

/// Writes `charts/s<seed>_<metric>.svg` for every metric with data and
/// `summary.md`; returns the written paths.
pub fn report(dir: &Path) -> Result<Vec<PathBuf>> {
    let (manifest, runs) = load(dir)?;
    let charts = dir.join("charts");
    std::fs::create_dir_all(&charts)?;
    let mut written = Vec::new();
    let mut seeds: Vec<u64> = runs.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    for &seed in &seeds {
        for (key, title, log_y, pick) in METRICS {
            let series: Vec<Series> = runs
                .iter()
                .filter(|r| r.seed == seed)
                .map(|r| Series {
                    name: r.label.clone(),
                    points: r.records.iter().filter_map(|rec| pick(rec).map(|v| (rec.iteration as f64, v))).collect(),
                })
                .filter(|s| !s.points.is_empty())
                .collect();
            let chart = Chart {
                title: format!("{}: {title} (seed {seed})", manifest.experiment),
                x_label: "iteration".into(),
                y_label: title.into(),
                log_x: true,
                log_y,
                series,
            };
            if chart.has_data() {
                let p = charts.join(format!("s{seed}_{key}.svg"));
                std::fs::write(&p, chart.render())?;
                written.push(p);
            }
        }
    }
    let p = dir.join("summary.md");
    std::fs::write(&p, summary_table(&manifest, &runs))?;
    written.push(p);
    Ok(written)
}

fn cell(v: Option<f64>) -> String {
    match v {
        None => "-".into(),
        Some(v) if v.fract() == 0.0 && v.abs() < 1e6 => format!("{v}"),
        Some(v) => format!("{v:.3e}"),
    }
}

fn summary_table(manifest: &Manifest, runs: &[Loaded]) -> String {
    let mut labels: Vec<&str> = Vec::new();
    for r in runs {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    let mut s = format!("# {}\n\nMedians over seeds of the final record of each run.\n\n", manifest.experiment);
    s.push_str("| run | seeds | train loss | test loss | rank | l0 | sparsity L1 | sparsity L2 |\n");
    s.push_str("|---|---|---|---|---|---|---|---|\n");
    for label in labels {
        let finals: Vec<&MetricRecord> = runs.iter().filter(|r| r.label == label).filter_map(|r| r.records.last()).collect();
        let col = |pick: Pick| cell(median(finals.iter().filter_map(|r| pick(r)).collect()));
        let _ = writeln!(
            s,
            "| {label} | {} | {} | {} | {} | {} | {} | {} |",
            finals.len(),
            col(METRICS[0].3),
            col(METRICS[1].3),
            col(METRICS[2].3),
            col(METRICS[3].3),
            col(METRICS[4].3),
            col(METRICS[5].3),
        );
    }
    s
}
