//! Experiment runner behind the `gpgh` binary.
//!
//! A run resolves its parameters, computes every table in memory, writes the
//! CSV files and finally `manifest.json`.  A directory without a manifest,
//! or with a manifest whose `status` is not `"ok"`, holds no valid results.
//! Starting a run deletes the previous manifest and the files it listed.

pub mod config;
pub mod datasets;
pub mod experiments;
pub mod output;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;

use gpgh::Execution;

use config::{ConfigError, ConfigFile, Params};
use experiments::{find, schema, ExperimentDef, RunError};
use output::{write_json, IoError};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical error: {0}")]
    Numeric(String),
    #[error("I/O error: {0}")]
    Io(#[from] IoError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.0)
    }
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(m) => CliError::Config(m),
            RunError::Numeric(e) => CliError::Numeric(e.to_string()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunRequest {
    pub experiment: String,
    pub config: Option<PathBuf>,
    pub overrides: Vec<(String, String)>,
    pub seed: u64,
    pub out: PathBuf,
    pub exec: Execution,
}

pub fn lookup(name: &str) -> Result<&'static ExperimentDef, CliError> {
    find(name).ok_or_else(|| {
        let known: Vec<&str> = experiments::EXPERIMENTS.iter().map(|e| e.name).collect();
        CliError::Config(format!("unknown experiment `{name}` (known: {})", known.join(", ")))
    })
}

pub fn resolve_params(req: &RunRequest) -> Result<(&'static ExperimentDef, Params), CliError> {
    let def = lookup(&req.experiment)?;
    let file = match &req.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| IoError::new(path, e))?;
            Some(ConfigFile::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?)
        }
        None => None,
    };
    let params = Params::resolve(def.name, def.params, file.as_ref(), &req.overrides, &schema)
        .map_err(|e| match &req.config {
            Some(p) => CliError::Config(format!("{}: {e}", p.display())),
            None => CliError::Config(e.0),
        })?;
    Ok((def, params))
}

/// Runs one experiment and returns the manifest that was written.
pub fn run(req: &RunRequest) -> Result<serde_json::Value, CliError> {
    let (def, params) = resolve_params(req)?;
    fs::create_dir_all(&req.out).map_err(|e| IoError::new(&req.out, e))?;
    let manifest_path = req.out.join(MANIFEST);
    // A stale manifest would vouch for outputs this run has not produced.
    if manifest_path.exists() {
        remove_all(&previous_outputs(&req.out, &manifest_path));
        fs::remove_file(&manifest_path).map_err(|e| IoError::new(&manifest_path, e))?;
    }
    let start = Instant::now();
    let mut manifest = json!({
        "experiment": def.name,
        "figure": def.figure,
        "seed": req.seed,
        "config_file": req.config.as_ref().map(|p| p.display().to_string()),
        "overrides": req.overrides.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>(),
        "parameters": params.to_json(),
        "library_version": gpgh::VERSION,
        "runner_version": env!("CARGO_PKG_VERSION"),
        "execution": if req.exec.is_parallel() { "parallel" } else { "sequential" },
        "jitter_policy": "jitter is added to the kernel diagonal only when the noise variance is 0",
    });

    let outcome = match (def.run)(&params, req.seed, req.exec) {
        Ok(o) => o,
        Err(e) => {
            let err = CliError::from(e);
            fail(&manifest_path, &mut manifest, &[], &err, start);
            return Err(err);
        }
    };

    let mut written: Vec<PathBuf> = Vec::new();
    let mut files = Vec::new();
    for (name, table) in &outcome.tables {
        let path = req.out.join(name);
        if let Err(e) = table.write(&path) {
            let err = CliError::Io(e);
            fail(&manifest_path, &mut manifest, &written, &err, start);
            return Err(err);
        }
        written.push(path);
        files.push(json!({ "file": name, "rows": table.len(), "columns": table.header }));
    }
    manifest["status"] = json!("ok");
    manifest["derived"] = serde_json::Value::Object(outcome.derived);
    manifest["outputs"] = json!(files);
    manifest["duration_seconds"] = json!(start.elapsed().as_secs_f64());
    if let Err(e) = write_json(&manifest_path, &manifest) {
        remove_all(&written);
        return Err(CliError::Io(e));
    }
    Ok(manifest)
}

/// Files listed by an earlier manifest in `dir`.  Only bare file names are
/// honoured so a hand-edited manifest cannot point outside the directory.
fn previous_outputs(dir: &Path, manifest: &Path) -> Vec<PathBuf> {
    let Ok(text) = fs::read_to_string(manifest) else {
        return Vec::new();
    };
    let Ok(v) = serde_json::from_str::<serde_json::Value>(&text) else {
        return Vec::new();
    };
    v["outputs"]
        .as_array()
        .into_iter()
        .flatten()
        .filter_map(|o| o["file"].as_str())
        .filter(|f| Path::new(f).file_name().is_some_and(|n| n == *f))
        .map(|f| dir.join(f))
        .collect()
}

fn remove_all(paths: &[PathBuf]) {
    for p in paths {
        let _ = fs::remove_file(p);
    }
}

fn fail(path: &Path, manifest: &mut serde_json::Value, written: &[PathBuf], err: &CliError, start: Instant) {
    remove_all(written);
    manifest["status"] = json!("failed");
    manifest["error"] = json!(err.to_string());
    manifest["exit_code"] = json!(err.exit_code());
    manifest["outputs"] = json!([]);
    manifest["duration_seconds"] = json!(start.elapsed().as_secs_f64());
    let _ = write_json(path, manifest);
}

/// Text printed by `gpgh list`.
pub fn listing() -> String {
    let mut out = String::new();
    for e in experiments::EXPERIMENTS {
        out.push_str(&format!("{}  [{}]\n    {}\n", e.name, e.figure, e.about));
        for p in e.params {
            out.push_str(&format!("    {:<20} {:<11} {:<32} {}\n", p.name, p.kind.to_string(), p.default, p.help));
        }
        out.push('\n');
    }
    out
}
