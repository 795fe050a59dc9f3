//! Run configuration files.
//!
//! A run config is a JSON object:
//!
//! ```json
//! {
//!   "model": "gridworld5x5",
//!   "gridworld": { "g_reading": "neighbors" },
//!   "learning": { "graphs": ["1 2\n2 3", "3 4\n4 1"] },
//!   "dspd": { "iterations": 500, "learning_rate": { "mode": "constant", "eta_theta": 1e-3, "eta_mu": 1e-2 } },
//!   "seeds": [1, 2, 3]
//! }
//! ```
//!
//! `"preset": "paper-gridworld"` starts from [`RunConfig::paper_gridworld`]
//! and applies the remaining keys on top. Validation reports every problem
//! it finds, each prefixed with its key path.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::dspd::{DspdConfig, LearningRateMode};
use crate::graph::{DirectedGraph, ScheduleKind, TimeVaryingSchedule};
use crate::gridworld::GridWorldSpec;

pub const PAPER_PRESET: &str = "paper-gridworld";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "gridworld5x5")]
    Gridworld5x5,
    #[serde(rename = "table")]
    Table,
}

/// Learning graphs as one-based `"j i"` edge lists. No graphs means the
/// directed ring `1 → 2 → … → N → 1` split into two alternating halves,
/// which for four agents is `{1→2, 2→3}` / `{3→4, 4→1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningSpec {
    pub graphs: Vec<String>,
    pub kind: ScheduleKind,
    /// Connectivity window. Defaults to the number of graphs.
    pub window: Option<usize>,
}

impl Default for LearningSpec {
    fn default() -> Self {
        Self {
            graphs: Vec::new(),
            kind: ScheduleKind::Cyclic,
            window: None,
        }
    }
}

/// Ring halves used when no learning graphs are given.
pub fn alternating_ring(n: usize) -> Vec<String> {
    let edges: Vec<String> = (0..n).map(|j| format!("{} {}", j + 1, (j + 1) % n + 1)).collect();
    if n < 2 {
        return vec![String::new()];
    }
    let half = n / 2;
    vec![edges[..half].join("\n"), edges[half..].join("\n")]
}

impl LearningSpec {
    pub fn schedule(&self, n: usize) -> crate::Result<TimeVaryingSchedule> {
        let texts = if self.graphs.is_empty() {
            alternating_ring(n)
        } else {
            self.graphs.clone()
        };
        let graphs = texts
            .iter()
            .map(|t| DirectedGraph::parse_edge_list(n, t))
            .collect::<crate::Result<Vec<_>>>()?;
        let window = self.window.unwrap_or(graphs.len());
        TimeVaryingSchedule::new(graphs, self.kind, window)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default)]
    pub gridworld: GridWorldSpec,
    /// Path of a table-model JSON file, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table_model: Option<String>,
    #[serde(default)]
    pub learning: LearningSpec,
    #[serde(default)]
    pub dspd: DspdConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    /// Directory of the config file, for resolving `table_model`.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// All problems found in a config document.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigErrors(pub Vec<String>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid run config:")?;
        for e in &self.0 {
            writeln!(f, "  - {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

impl RunConfig {
    /// The gridworld experiment: 2500 iterations, 20 dual and 40 primal
    /// batches, κ = κp = 1, five seeds.
    pub fn paper_gridworld() -> Self {
        Self {
            model: ModelKind::Gridworld5x5,
            preset: Some(PAPER_PRESET.into()),
            gridworld: GridWorldSpec::default(),
            table_model: None,
            learning: LearningSpec::default(),
            dspd: DspdConfig {
                iterations: 2500,
                k_mu: 20,
                k_theta: 40,
                kappa: 1,
                kappa_p: 1,
                mu_max: 10.0,
                learning_rate: LearningRateMode::Harmonic {
                    c_theta: 0.5,
                    c_mu: 1.0,
                    offset: 250.0,
                },
                ..DspdConfig::default()
            },
            seeds: vec![1, 2, 3, 4, 5],
            output_dir: None,
            base_dir: None,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        (name == PAPER_PRESET).then(Self::paper_gridworld)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn table_model_path(&self) -> Option<PathBuf> {
        let p = Path::new(self.table_model.as_ref()?);
        Some(match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        })
    }
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<RunConfig, ConfigErrors> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigErrors(vec![format!("{}: {e}", path.display())]))?;
    let mut cfg = parse_config_str(&text)?;
    cfg.base_dir = path.parent().map(Path::to_path_buf);
    Ok(cfg)
}

pub fn parse_config_str(text: &str) -> Result<RunConfig, ConfigErrors> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| ConfigErrors(vec![format!("not valid JSON: {e}")]))?;
    parse_config_value(value)
}

const TOP_KEYS: [&str; 8] = [
    "model",
    "preset",
    "gridworld",
    "table_model",
    "learning",
    "dspd",
    "seeds",
    "output_dir",
];

pub fn parse_config_value(value: Value) -> Result<RunConfig, ConfigErrors> {
    let mut errs = Vec::new();
    let Value::Object(user) = value else {
        return Err(ConfigErrors(vec!["top level: expected a JSON object".into()]));
    };

    let mut doc = Map::new();
    if let Some(p) = user.get("preset") {
        match p.as_str().and_then(RunConfig::preset) {
            Some(base) => match serde_json::to_value(base) {
                Ok(Value::Object(m)) => doc = m,
                _ => errs.push("preset: could not expand".into()),
            },
            None => errs.push(format!("preset: unknown preset {p}, expected \"{PAPER_PRESET}\"")),
        }
    }
    for (k, v) in &user {
        if !TOP_KEYS.contains(&k.as_str()) {
            errs.push(format!("{k}: unknown key"));
            continue;
        }
        match (doc.get_mut(k), v) {
            (Some(Value::Object(base)), Value::Object(over)) if !over.contains_key("mode") => {
                merge(base, over);
            }
            _ => {
                doc.insert(k.clone(), v.clone());
            }
        }
    }

    let model = match doc.get("model") {
        None => {
            errs.push("model: required key is missing (\"gridworld5x5\" or \"table\")".into());
            None
        }
        Some(v) => serde_json::from_value::<ModelKind>(v.clone())
            .map_err(|e| errs.push(format!("model: {e}")))
            .ok(),
    };
    let grid = check_section::<GridWorldSpec>("gridworld", doc.get("gridworld"), &mut errs);
    let learning = check_section::<LearningSpec>("learning", doc.get("learning"), &mut errs);
    let dspd = check_section::<DspdConfig>("dspd", doc.get("dspd"), &mut errs);
    for (key, check) in [
        ("table_model", Value::is_string as fn(&Value) -> bool),
        ("output_dir", Value::is_string),
    ] {
        if let Some(v) = doc.get(key) {
            if !check(v) {
                errs.push(format!("{key}: expected a string"));
            }
        }
    }
    if let Some(v) = doc.get("seeds") {
        match serde_json::from_value::<Vec<u64>>(v.clone()) {
            Ok(s) if s.is_empty() => errs.push("seeds: need at least one seed".into()),
            Ok(_) => {}
            Err(e) => errs.push(format!("seeds: {e}")),
        }
    }
    // Semantic checks run on whatever parsed, so one pass reports everything.
    if let Some(d) = dspd {
        errs.extend(d.validate().into_iter().map(|e| format!("dspd.{e}")));
    }
    if let (Some(ModelKind::Gridworld5x5), Some(g)) = (model, grid) {
        errs.extend(g.validate());
    }
    if model == Some(ModelKind::Table) && doc.get("table_model").is_none() {
        errs.push("table_model: required when model is \"table\"".into());
    }
    if learning.is_some_and(|l| l.window == Some(0)) {
        errs.push("learning.window: must be at least 1".into());
    }
    if !errs.is_empty() {
        return Err(ConfigErrors(errs));
    }
    serde_json::from_value(Value::Object(doc)).map_err(|e| ConfigErrors(vec![e.to_string()]))
}

/// Deep merge. Tagged objects (those with a `mode` key) are replaced whole.
fn merge(base: &mut Map<String, Value>, over: &Map<String, Value>) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(Value::Object(b)), Value::Object(o)) if !o.contains_key("mode") => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// Reports unknown and ill-typed keys of one section and returns the section
/// built from its valid keys over the defaults.
fn check_section<T>(name: &str, section: Option<&Value>, errs: &mut Vec<String>) -> Option<T>
where
    T: Default + Serialize + DeserializeOwned,
{
    let Some(section) = section else {
        return Some(T::default());
    };
    let Value::Object(fields) = section else {
        errs.push(format!("{name}: expected an object"));
        return None;
    };
    let Ok(Value::Object(defaults)) = serde_json::to_value(T::default()) else {
        return None;
    };
    let mut valid = defaults.clone();
    for (k, v) in fields {
        if !defaults.contains_key(k) {
            errs.push(format!("{name}.{k}: unknown key"));
            continue;
        }
        let mut probe = defaults.clone();
        probe.insert(k.clone(), v.clone());
        match serde_json::from_value::<T>(Value::Object(probe)) {
            Ok(_) => {
                valid.insert(k.clone(), v.clone());
            }
            Err(e) => errs.push(format!("{name}.{k}: {e}")),
        }
    }
    serde_json::from_value(Value::Object(valid)).ok()
}
