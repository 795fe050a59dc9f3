//! Config-driven runs and their output directories.
//!
//! A run directory holds `metrics.csv`, `summary.json`, `checkpoint.json` and
//! `run_meta.json`. [`multi_seed`] puts one such directory per seed under
//! `seed-<s>/` and adds `aggregate.csv` and `multi_seed.json`.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ModelKind, RunConfig};
use crate::dspd::{run_dspd, DspdConfig};
use crate::error::{Error, Result};
use crate::graph::TimeVaryingSchedule;
use crate::gridworld::GridWorld;
use crate::metrics::{aggregate, emit_metrics, read_metrics_csv, write_json, write_table, Summary};
use crate::model::{CmarlModel, TableModel};
use crate::pushsum::EstimateBank;

pub const CHECKPOINT_VERSION: u32 = 1;

pub fn version_string() -> String {
    format!("dspd v{}", env!("CARGO_PKG_VERSION"))
}

pub fn build_model(cfg: &RunConfig) -> Result<Box<dyn CmarlModel>> {
    Ok(match cfg.model {
        ModelKind::Gridworld5x5 => Box::new(GridWorld::new(cfg.gridworld.clone())?),
        ModelKind::Table => {
            let path = cfg
                .table_model_path()
                .ok_or_else(|| Error::Config("table_model: required when model is \"table\"".into()))?;
            Box::new(TableModel::load(path)?)
        }
    })
}

pub fn build_schedule(cfg: &RunConfig, n: usize) -> Result<TimeVaryingSchedule> {
    cfg.learning.schedule(n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub seed: u64,
    pub iterations_completed: usize,
    pub theta: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
    pub bank: EstimateBank,
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "{}: checkpoint version {} is not supported",
            path.display(),
            ck.version
        )));
    }
    if ck.config.base_dir.is_none() {
        ck.config.base_dir = path.parent().map(Path::to_path_buf);
    }
    Ok(ck)
}

#[derive(Debug, Clone, Serialize)]
struct RunMeta<'a> {
    version: String,
    seed: u64,
    model: &'a str,
    g_reading: Option<crate::gridworld::GReading>,
    chi_self_inclusive: Option<bool>,
    conventions: Conventions,
    warnings: &'a [String],
    config: &'a RunConfig,
}

#[derive(Debug, Clone, Serialize)]
struct Conventions {
    horizons: &'static str,
    push_sum: &'static str,
    evaluation: &'static str,
    variance: &'static str,
}

const CONVENTIONS: Conventions = Conventions {
    horizons: "T counts failures before the first success; a horizon-T trajectory holds steps 0..=T",
    push_sum: "weights advance once per learning-graph round",
    evaluation: "F_est and G_est use the true parameters before the iteration's update",
    variance: "aggregate variances divide by the number of runs",
};

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub summary: Summary,
    pub warnings: Vec<String>,
}

/// One seed of `cfg`, written to `dir`.
pub fn execute_run(cfg: &RunConfig, seed: u64, dir: &Path) -> Result<RunOutput> {
    let model = build_model(cfg)?;
    let schedule = build_schedule(cfg, model.num_agents())?;
    let dcfg = DspdConfig {
        seed,
        ..cfg.dspd.clone()
    };
    let run = run_dspd(&dcfg, model.as_ref(), &schedule)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let summary = emit_metrics(dir, &run.records, model.thresholds(), run.failure.clone())?;
    // The checkpoint may be read from elsewhere, so pin the table path.
    let mut saved = cfg.clone();
    if let Some(p) = cfg.table_model_path() {
        let abs = std::fs::canonicalize(&p).map_err(|e| Error::io(&p, e))?;
        saved.table_model = Some(abs.to_string_lossy().into_owned());
    }
    let ck = Checkpoint {
        version: CHECKPOINT_VERSION,
        config: saved,
        seed,
        iterations_completed: run.records.len(),
        theta: run.theta,
        mu: run.mu,
        bank: run.bank,
    };
    write_json(&dir.join("checkpoint.json"), &ck)?;
    let grid = cfg.model == ModelKind::Gridworld5x5;
    let meta = RunMeta {
        version: version_string(),
        seed,
        model: match cfg.model {
            ModelKind::Gridworld5x5 => "gridworld5x5",
            ModelKind::Table => "table",
        },
        g_reading: grid.then_some(cfg.gridworld.g_reading),
        chi_self_inclusive: grid.then_some(cfg.gridworld.chi_self_inclusive),
        conventions: CONVENTIONS,
        warnings: &run.warnings,
        config: cfg,
    };
    write_json(&dir.join("run_meta.json"), &meta)?;
    Ok(RunOutput {
        dir: dir.to_path_buf(),
        summary,
        warnings: run.warnings,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiSeedReport {
    pub seeds: Vec<u64>,
    pub succeeded: Vec<u64>,
    pub failed: Vec<SeedFailure>,
    /// Set when the aggregate covers only part of the seeds.
    pub partial: bool,
}

/// Runs every seed in parallel and aggregates the successful ones. Repeated
/// seeds run once.
pub fn multi_seed(cfg: &RunConfig, seeds: &[u64], dir: &Path) -> Result<MultiSeedReport> {
    if seeds.is_empty() {
        return Err(Error::Config("multi-seed needs at least one seed".into()));
    }
    let mut unique = Vec::with_capacity(seeds.len());
    for &s in seeds {
        if !unique.contains(&s) {
            unique.push(s);
        }
    }
    let seeds = &unique[..];
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let outcomes: Vec<(u64, Result<RunOutput>)> = seeds
        .par_iter()
        .map(|&s| (s, execute_run(cfg, s, &dir.join(format!("seed-{s}")))))
        .collect();
    let mut succeeded = Vec::new();
    let mut failed = Vec::new();
    let mut tables = Vec::new();
    for (s, out) in outcomes {
        match out.and_then(|o| read_metrics_csv(&o.dir.join("metrics.csv"))) {
            Ok(t) => {
                succeeded.push(s);
                tables.push(t);
            }
            Err(e) => failed.push(SeedFailure {
                seed: s,
                error: e.to_string(),
            }),
        }
    }
    if !tables.is_empty() {
        write_table(&dir.join("aggregate.csv"), &aggregate(&tables)?)?;
    }
    let report = MultiSeedReport {
        seeds: seeds.to_vec(),
        partial: !failed.is_empty(),
        succeeded,
        failed,
    };
    write_json(&dir.join("multi_seed.json"), &report)?;
    Ok(report)
}
