//! Command-line front end: loads system definitions, runs experiments and
//! writes reports.

pub mod bench;
pub mod experiments;
pub mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use qctl_core::devices::DelayMode;
use qctl_core::experiment::ExperimentError;
use qctl_core::rb::RbError;
use qctl_core::system::{System, SystemDefinition, SystemError};
use serde::Serialize;
use thiserror::Error;

pub const STAQ_SIM: &str = include_str!("../systems/staq_sim.toml");
pub const RC_SIM: &str = include_str!("../systems/rc_sim.toml");

/// Names of the bundled system definitions.
pub const BUNDLED: [&str; 2] = ["staq_sim", "rc_sim"];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    System(#[from] SystemError),
    #[error("bad override {key}: {message}")]
    Override { key: String, message: String },
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Rb(#[from] RbError),
    #[error("reports describe different scans: {0}")]
    ShapeMismatch(String),
    #[error("malformed report: {0}")]
    Report(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "io",
            CliError::System(SystemError::Parse(_)) => "parse",
            CliError::System(_) => "validation",
            CliError::Override { .. } => "override",
            CliError::Experiment(_) => "experiment",
            CliError::Rb(_) => "experiment",
            CliError::ShapeMismatch(_) => "shape_mismatch",
            CliError::Report(_) => "report",
        }
    }

    /// Machine-readable form printed on failure.
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": { "kind": self.kind(), "message": self.to_string() } })
            .to_string()
    }
}

fn io_err(path: &Path, e: impl ToString) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Text of a bundled definition by name, or of the file at `name_or_path`.
pub fn definition_text(name_or_path: &str) -> Result<String, CliError> {
    match name_or_path {
        "staq_sim" => Ok(STAQ_SIM.to_string()),
        "rc_sim" => Ok(RC_SIM.to_string()),
        path => fs::read_to_string(path).map_err(|e| io_err(Path::new(path), e)),
    }
}

/// Parses and applies `section.field=value` overrides to a definition.
/// Sections are `core`, `policy`, `noise`, `drive`, `timing` and
/// `datasets` (whose remainder is the full dataset key).
pub fn apply_overrides(
    text: &str,
    overrides: &[(String, String)],
) -> Result<SystemDefinition, CliError> {
    let mut doc: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| SystemError::Parse(e.to_string()))?;
    for (key, raw) in overrides {
        let bad = |message: &str| CliError::Override {
            key: key.clone(),
            message: message.to_string(),
        };
        let Some((section, field)) = key.split_once('.') else {
            return Err(bad("expected section.field"));
        };
        if !["core", "policy", "noise", "drive", "timing", "datasets"].contains(&section) {
            return Err(bad("unknown section"));
        }
        let value = parse_value(raw);
        let table = doc
            .entry(section)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| bad("section is not a table"))?;
        if section == "datasets" {
            table.insert(field.to_string(), value);
            continue;
        }
        let mut target = table;
        let parts: Vec<&str> = field.split('.').collect();
        for p in &parts[..parts.len() - 1] {
            target = target
                .entry(*p)
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| bad("path crosses a non-table value"))?;
        }
        target.insert(parts[parts.len() - 1].to_string(), value);
    }
    let def: SystemDefinition = toml::Value::Table(doc)
        .try_into()
        .map_err(|e: toml::de::Error| SystemError::Parse(e.to_string()))?;
    Ok(def)
}

/// A TOML literal if `raw` parses as one, otherwise a string.
pub fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Loads and validates a system by bundled name or path.
pub fn load_system(name_or_path: &str, seed: u64) -> Result<System, CliError> {
    let text = definition_text(name_or_path)?;
    Ok(System::from_toml(&text, seed)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ExperimentId {
    Rabi,
    Ramsey,
    PiTrain,
    DirectRb,
    OverheadBench,
}

impl ExperimentId {
    pub fn label(self) -> &'static str {
        match self {
            ExperimentId::Rabi => "rabi",
            ExperimentId::Ramsey => "ramsey",
            ExperimentId::PiTrain => "pi_train",
            ExperimentId::DirectRb => "direct_rb",
            ExperimentId::OverheadBench => "overhead_bench",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub system: String,
    pub experiment: ExperimentId,
    pub seed: u64,
    pub buffer: Option<usize>,
    pub policy: Option<DelayMode>,
    /// `key=value` pairs; `exp.*` keys are experiment parameters, the rest
    /// override the system definition.
    pub overrides: Vec<(String, String)>,
    #[serde(skip)]
    pub out_dir: PathBuf,
}

impl RunManifest {
    pub fn new(system: &str, experiment: ExperimentId, seed: u64, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            system: system.to_string(),
            experiment,
            seed,
            buffer: None,
            policy: None,
            overrides: Vec::new(),
            out_dir: out_dir.into(),
        }
    }

    pub fn with_override(mut self, key: &str, value: &str) -> Self {
        self.overrides.push((key.to_string(), value.to_string()));
        self
    }

    fn split_overrides(&self) -> (Vec<(String, String)>, BTreeMap<String, toml::Value>) {
        let mut system = Vec::new();
        let mut params = BTreeMap::new();
        for (k, v) in &self.overrides {
            match k.strip_prefix("exp.") {
                Some(p) => {
                    params.insert(p.to_string(), parse_value(v));
                }
                None => system.push((k.clone(), v.clone())),
            }
        }
        (system, params)
    }

    /// The system this manifest runs on, with overrides and policy applied.
    pub fn load(&self) -> Result<System, CliError> {
        let (system_overrides, _) = self.split_overrides();
        let text = definition_text(&self.system)?;
        let mut def = apply_overrides(&text, &system_overrides)?;
        if let Some(mode) = self.policy {
            def.policy.mode = mode;
        }
        Ok(System::from_definition(def, self.seed)?)
    }

    pub fn params(&self) -> Params {
        Params(self.split_overrides().1)
    }
}

/// Experiment parameters from `exp.*` overrides.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params(pub BTreeMap<String, toml::Value>);

impl Params {
    fn bad(key: &str, want: &str) -> CliError {
        CliError::Override {
            key: format!("exp.{key}"),
            message: format!("expected {want}"),
        }
    }

    pub fn usize(&self, key: &str, default: usize) -> Result<usize, CliError> {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_integer()
                .and_then(|i| usize::try_from(i).ok())
                .ok_or_else(|| Self::bad(key, "a non-negative integer")),
        }
    }

    pub fn i64(&self, key: &str, default: i64) -> Result<i64, CliError> {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v.as_integer().ok_or_else(|| Self::bad(key, "an integer")),
        }
    }

    pub fn f64(&self, key: &str, default: f64) -> Result<f64, CliError> {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_float()
                .or_else(|| v.as_integer().map(|i| i as f64))
                .ok_or_else(|| Self::bad(key, "a number")),
        }
    }

    pub fn str<'a>(&'a self, key: &str, default: &'a str) -> Result<&'a str, CliError> {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v.as_str().ok_or_else(|| Self::bad(key, "a string")),
        }
    }

    pub fn usize_list(&self, key: &str, default: Vec<usize>) -> Result<Vec<usize>, CliError> {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_array()
                .and_then(|a| {
                    a.iter()
                        .map(|x| x.as_integer().and_then(|i| usize::try_from(i).ok()))
                        .collect::<Option<Vec<_>>>()
                })
                .ok_or_else(|| Self::bad(key, "a list of non-negative integers")),
        }
    }

    pub fn check_known(&self, known: &[&str]) -> Result<(), CliError> {
        match self.0.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(CliError::Override {
                key: format!("exp.{k}"),
                message: "unknown experiment parameter".into(),
            }),
            None => Ok(()),
        }
    }
}

/// Result files of one run, keyed by file name.
pub type RunFiles = BTreeMap<String, Vec<u8>>;

pub fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializable");
    v.push(b'\n');
    v
}

/// Runs the manifest's experiment and returns its result files.
pub fn execute(manifest: &RunManifest) -> Result<RunFiles, CliError> {
    let mut system = manifest.load()?;
    let params = manifest.params();
    let mut files = experiments::run_experiment(manifest, &params, &mut system)?;
    files.insert("manifest.json".into(), to_json_bytes(manifest));
    files.insert(
        "datasets.json".into(),
        format!("{}\n", system.datasets().to_json()).into_bytes(),
    );
    Ok(files)
}

/// Runs the manifest and writes its files into `manifest.out_dir`.
pub fn run(manifest: &RunManifest) -> Result<Vec<PathBuf>, CliError> {
    let files = execute(manifest)?;
    fs::create_dir_all(&manifest.out_dir).map_err(|e| io_err(&manifest.out_dir, e))?;
    let mut written = Vec::new();
    for (name, bytes) in files {
        let path = manifest.out_dir.join(name);
        fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
