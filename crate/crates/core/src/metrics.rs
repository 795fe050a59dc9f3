//! `metrics.csv`, `summary.json` and multi-seed aggregation.
//!
//! Column order of `metrics.csv`, with `N` the number of agents:
//!
//! ```text
//! m, F_est, min_G_est, G_est_1..G_est_N, mu_1..mu_N, h_bar_norm, g_bar_norm,
//! mu_consensus_err, theta_consensus_err, mu_hat_max, eta_theta, eta_mu,
//! cap_events, bound_violations
//! ```
//!
//! Floats are written in Rust's shortest round-trip form, so equal records
//! give byte-identical files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dspd::IterationRecord;
use crate::error::{Error, Result};

pub fn metrics_header(n: usize) -> Vec<String> {
    let mut h: Vec<String> = vec!["m".into(), "F_est".into(), "min_G_est".into()];
    h.extend((1..=n).map(|i| format!("G_est_{i}")));
    h.extend((1..=n).map(|i| format!("mu_{i}")));
    h.extend(
        [
            "h_bar_norm",
            "g_bar_norm",
            "mu_consensus_err",
            "theta_consensus_err",
            "mu_hat_max",
            "eta_theta",
            "eta_mu",
            "cap_events",
            "bound_violations",
        ]
        .map(String::from),
    );
    h
}

fn row(r: &IterationRecord) -> Vec<String> {
    let mut v = vec![r.m.to_string(), r.f_est.to_string(), r.min_g_est().to_string()];
    v.extend(r.g_est.iter().map(f64::to_string));
    v.extend(r.mu.iter().map(f64::to_string));
    v.extend(
        [
            r.h_bar_norm,
            r.g_bar_norm,
            r.mu_consensus_err,
            r.theta_consensus_err,
            r.mu_hat_max,
            r.eta_theta,
            r.eta_mu,
        ]
        .map(|x| x.to_string()),
    );
    v.push(r.cap_events.to_string());
    v.push(r.bound_violations.to_string());
    v
}

pub fn write_metrics_csv(path: &Path, records: &[IterationRecord], n: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(metrics_header(n))?;
    for r in records {
        w.write_record(row(r))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub iterations: usize,
    pub final_f: Option<f64>,
    pub final_g: Vec<f64>,
    pub thresholds: Vec<f64>,
    /// Share of the last 10% of iterations with every `G_i ≥ c_i`.
    pub constraint_satisfaction_fraction: Option<f64>,
    pub peak_mu_hat: f64,
    pub cap_events: usize,
    pub bound_violations: usize,
    pub failure: Option<String>,
}

pub fn summarize(records: &[IterationRecord], thresholds: &[f64], failure: Option<String>) -> Summary {
    let tail = records.len().div_ceil(10);
    let last = &records[records.len() - tail..];
    let ok = last
        .iter()
        .filter(|r| r.g_est.iter().zip(thresholds).all(|(g, c)| g >= c))
        .count();
    Summary {
        iterations: records.len(),
        final_f: records.last().map(|r| r.f_est),
        final_g: records.last().map(|r| r.g_est.clone()).unwrap_or_default(),
        thresholds: thresholds.to_vec(),
        constraint_satisfaction_fraction: (tail > 0).then(|| ok as f64 / tail as f64),
        peak_mu_hat: records.iter().map(|r| r.mu_hat_max).fold(0.0, f64::max),
        cap_events: records.iter().map(|r| r.cap_events).sum(),
        bound_violations: records.iter().map(|r| r.bound_violations).sum(),
        failure,
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `metrics.csv` and `summary.json` into `dir`.
pub fn emit_metrics(
    dir: &Path,
    records: &[IterationRecord],
    thresholds: &[f64],
    failure: Option<String>,
) -> Result<Summary> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_metrics_csv(&dir.join("metrics.csv"), records, thresholds.len())?;
    let summary = summarize(records, thresholds, failure);
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// A parsed metrics file.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl MetricsTable {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }
}

pub fn read_metrics_csv(path: &Path) -> Result<MetricsTable> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parsed = rec
            .iter()
            .map(|x| {
                x.parse::<f64>()
                    .map_err(|e| Error::Config(format!("{}: bad number {x:?}: {e}", path.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(parsed);
    }
    Ok(MetricsTable { header, rows })
}

/// Per-row mean and population variance across runs. Runs must share a
/// header; rows beyond the shortest run are dropped. The `m` column is
/// copied, every other column `X` becomes `X_mean, X_var`.
pub fn aggregate(tables: &[MetricsTable]) -> Result<MetricsTable> {
    let first = tables
        .first()
        .ok_or_else(|| Error::Contract("aggregate over zero runs".into()))?;
    if tables.iter().any(|t| t.header != first.header) {
        return Err(Error::Contract("runs have different metrics columns".into()));
    }
    let len = tables.iter().map(|t| t.rows.len()).min().unwrap_or(0);
    let mut header = vec!["m".to_string(), "runs".to_string()];
    for h in first.header.iter().skip(1) {
        header.push(format!("{h}_mean"));
        header.push(format!("{h}_var"));
    }
    let k = tables.len() as f64;
    let rows = (0..len)
        .map(|r| {
            let mut out = vec![first.rows[r][0], k];
            for c in 1..first.header.len() {
                let xs: Vec<f64> = tables.iter().map(|t| t.rows[r][c]).collect();
                let mean = xs.iter().sum::<f64>() / k;
                let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / k;
                out.push(mean);
                out.push(var);
            }
            out
        })
        .collect();
    Ok(MetricsTable { header, rows })
}

pub fn write_table(path: &Path, table: &MetricsTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&table.header)?;
    for r in &table.rows {
        w.write_record(r.iter().map(f64::to_string))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
