//! Trajectory logs: metric rows, parameter snapshots and a JSON header.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{invalid, Result};
use crate::metrics::MetricRecord;
use crate::scalar::Real;

pub const CSV_COLUMNS: [&str; 9] = [
    "iteration",
    "step_size",
    "train_loss",
    "test_loss",
    "jacobian_rank",
    "feature_sparsity_l1",
    "feature_sparsity_l2",
    "l0_beta",
    "max_col_norm",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
pub struct Snapshot<T> {
    pub iteration: usize,
    pub theta: Vec<T>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryLog<T> {
    pub header: Map<String, Value>,
    pub records: Vec<MetricRecord<T>>,
    pub snapshots: Vec<Snapshot<T>>,
}

impl<T: Real> TrajectoryLog<T> {
    pub fn last(&self) -> Option<&MetricRecord<T>> {
        self.records.last()
    }

    /// Last record with `iteration ≤ t`.
    pub fn record_at(&self, t: usize) -> Option<&MetricRecord<T>> {
        let k = self.records.partition_point(|r| r.iteration <= t);
        k.checked_sub(1).map(|k| &self.records[k])
    }

    pub fn set(&mut self, key: &str, v: impl Serialize) {
        self.header.insert(key.to_owned(), serde_json::to_value(v).unwrap_or(Value::Null));
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(CSV_COLUMNS)?;
        for r in &self.records {
            let opt = |v: Option<T>| v.map_or(String::new(), |x| format!("{x:e}"));
            let opt_n = |v: Option<usize>| v.map_or(String::new(), |x| x.to_string());
            w.write_record([
                r.iteration.to_string(),
                format!("{:e}", r.step_size),
                format!("{:e}", r.train_loss),
                opt(r.test_loss),
                opt_n(r.jacobian_rank),
                opt(r.feature_sparsity_l1),
                opt(r.feature_sparsity_l2),
                opt_n(r.l0_beta),
                opt(r.max_col_norm),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Vec<MetricRecord<T>>> {
        let mut r = csv::Reader::from_path(path)?;
        let headers: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
        if headers != CSV_COLUMNS {
            return invalid(format!("{} does not have the trajectory columns", path.display()));
        }
        let mut out = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let f = |i: usize| -> Result<Option<f64>> {
                let s = rec[i].trim();
                if s.is_empty() {
                    return Ok(None);
                }
                s.parse::<f64>()
                    .map(Some)
                    .map_err(|e| crate::error::Error::InvalidInput(format!("bad number {s:?}: {e}")))
            };
            let req = |i: usize| -> Result<f64> {
                f(i)?.ok_or_else(|| crate::error::Error::InvalidInput(format!("missing {}", CSV_COLUMNS[i])))
            };
            out.push(MetricRecord {
                iteration: req(0)? as usize,
                step_size: T::lit(req(1)?),
                train_loss: T::lit(req(2)?),
                test_loss: f(3)?.map(T::lit),
                jacobian_rank: f(4)?.map(|v| v as usize),
                feature_sparsity_l1: f(5)?.map(T::lit),
                feature_sparsity_l2: f(6)?.map(T::lit),
                l0_beta: f(7)?.map(|v| v as usize),
                max_col_norm: f(8)?.map(T::lit),
                mean_col_norm: None,
            });
        }
        Ok(out)
    }

    /// Writes `<stem>.csv`, `<stem>.json` (header) and, if there are
    /// snapshots, `<stem>.snapshots.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        self.write_csv(&stem.with_extension("csv"))?;
        write_json(&stem.with_extension("json"), &Value::Object(self.header.clone()))?;
        if !self.snapshots.is_empty() {
            write_json(&stem.with_extension("snapshots.json"), &self.snapshots)?;
        }
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let records = Self::read_csv(&stem.with_extension("csv"))?;
        let header = match serde_json::from_reader(File::open(stem.with_extension("json"))?)? {
            Value::Object(m) => m,
            _ => return invalid("log header is not a JSON object"),
        };
        let snap = stem.with_extension("snapshots.json");
        let snapshots = if snap.exists() { serde_json::from_reader(File::open(snap)?)? } else { Vec::new() };
        Ok(Self { header, records, snapshots })
    }
}

pub fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, v)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Iterations at which θ is stored: 0, powers of two up to `horizon` when
/// `geometric`, plus `linear` evenly spaced points ending at `horizon`.
pub fn snapshot_grid(horizon: usize, geometric: bool, linear: usize) -> BTreeSet<usize> {
    let mut g = BTreeSet::new();
    if !geometric && linear == 0 {
        return g;
    }
    g.insert(0);
    if geometric {
        let mut t = 1usize;
        while t <= horizon {
            g.insert(t);
            t = t.saturating_mul(2);
        }
    }
    for k in 1..=linear {
        g.insert(horizon * k / linear);
    }
    g
}

/// `{round(2^(k/per_octave))} ∩ [1, horizon]`; empty when `per_octave = 0`.
pub fn geometric_grid(horizon: usize, per_octave: usize) -> BTreeSet<usize> {
    let mut g = BTreeSet::new();
    if per_octave == 0 {
        return g;
    }
    for k in 0.. {
        let t = 2f64.powf(k as f64 / per_octave as f64).round();
        if t > horizon as f64 {
            break;
        }
        g.insert(t as usize);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometric_grid_half_octaves() {
        let g: Vec<usize> = geometric_grid(10, 2).into_iter().collect();
        assert_eq!(g, vec![1, 2, 3, 4, 6, 8]);
        assert!(geometric_grid(10, 0).is_empty());
    }

    #[test]
    fn grid_contents() {
        let g = snapshot_grid(10, true, 2);
        assert_eq!(g.into_iter().collect::<Vec<_>>(), vec![0, 1, 2, 4, 5, 8, 10]);
        assert!(snapshot_grid(10, false, 0).is_empty());
    }

    #[test]
    fn csv_roundtrip_keeps_blanks() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = TrajectoryLog::<f64>::default();
        log.records.push(MetricRecord { iteration: 0, step_size: 0.1, train_loss: 1.5, ..Default::default() });
        log.records.push(MetricRecord {
            iteration: 10,
            step_size: 0.1,
            train_loss: 0.25,
            test_loss: Some(0.5),
            jacobian_rank: Some(3),
            l0_beta: Some(7),
            ..Default::default()
        });
        log.set("seed", 4);
        let stem = dir.path().join("run");
        log.save(&stem).unwrap();
        let back = TrajectoryLog::<f64>::load(&stem).unwrap();
        assert_eq!(back.records, log.records);
        assert_eq!(back.header["seed"], 4);
        assert_eq!(log.record_at(9).unwrap().iteration, 0);
        assert_eq!(log.record_at(10).unwrap().iteration, 10);
    }
}
