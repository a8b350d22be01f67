//! Configuration, experiment dispatch, reproducible RNG and persistence.
//!
//! Every run writes its artifacts plus `manifest.toml` (config hash, seed,
//! grid, version, per-file SHA-256 and the resolved config) into a staging
//! directory next to the output, which replaces the output directory only
//! once everything has been written.

pub mod config;
pub mod experiments;
pub mod models;
pub mod rng;

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;
use toml::{Table, Value};

pub use config::{
    load_config, load_config_as, validate_config, validate_config_as, validate_config_with,
    ConfigError, ExperimentConfig, ExperimentKind,
};
pub use experiments::{run_experiment, Artifacts};
pub use models::ModelRegistry;

pub const MANIFEST_NAME: &str = "manifest.toml";
/// Environment variable overriding the worker count from the config.
pub const WORKERS_ENV: &str = "VMV_WORKERS";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Validation(Vec<String>),
    #[error("{0}")]
    Runtime(String),
    #[error("memory estimate {required} bytes exceeds the budget of {limit} bytes")]
    Budget { required: u64, limit: u64 },
    #[error("i/o: {0}")]
    Io(String),
}

impl HarnessError {
    /// 1 validation, 2 runtime, 3 budget guard.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Validation(_) => 1,
            Self::Runtime(_) | Self::Io(_) => 2,
            Self::Budget { .. } => 3,
        }
    }
}

impl From<ConfigError> for HarnessError {
    fn from(e: ConfigError) -> Self {
        Self::Validation(e.messages())
    }
}

fn io(context: &str, e: std::io::Error) -> HarnessError {
    HarnessError::Io(format!("{context}: {e}"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Parsed `manifest.toml`.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub version: String,
    pub kind: String,
    pub seed: u64,
    pub horizon: f64,
    pub n_steps: usize,
    pub config_sha256: String,
    /// `(file name, sha256)` in write order.
    pub files: Vec<(String, String)>,
    pub config: String,
}

impl Manifest {
    fn build(cfg: &ExperimentConfig, artifacts: &Artifacts) -> Self {
        let config = cfg.to_toml();
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            kind: cfg.kind.name().to_string(),
            seed: cfg.run.seed,
            horizon: cfg.grid.horizon,
            n_steps: cfg.grid.n_steps,
            config_sha256: sha256_hex(config.as_bytes()),
            files: artifacts
                .files
                .iter()
                .map(|(name, body)| (name.clone(), sha256_hex(body.as_bytes())))
                .collect(),
            config,
        }
    }

    pub fn to_toml(&self) -> String {
        let mut root = Table::new();
        root.insert("version".into(), self.version.as_str().into());
        root.insert("kind".into(), self.kind.as_str().into());
        root.insert("seed".into(), self.seed.to_string().into());
        root.insert("T".into(), self.horizon.into());
        root.insert("n_steps".into(), (self.n_steps as i64).into());
        root.insert("config_sha256".into(), self.config_sha256.as_str().into());
        root.insert("config".into(), self.config.as_str().into());
        let order: Vec<Value> = self
            .files
            .iter()
            .map(|(n, _)| Value::from(n.as_str()))
            .collect();
        root.insert("file_order".into(), Value::Array(order));
        let mut files = Table::new();
        for (name, hash) in &self.files {
            files.insert(name.clone(), hash.as_str().into());
        }
        root.insert("files".into(), files.into());
        toml::to_string(&root).expect("manifest tables always serialize")
    }

    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let bad = |m: &str| HarnessError::Validation(vec![format!("manifest: {m}")]);
        let root: Table = toml::from_str(text).map_err(|e| bad(e.message()))?;
        let string = |k: &str| -> Result<String, HarnessError> {
            root.get(k)
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| bad(&format!("missing {k}")))
        };
        let seed = string("seed")?
            .parse()
            .map_err(|_| bad("seed is not a 64-bit integer"))?;
        let horizon = root
            .get("T")
            .and_then(Value::as_float)
            .ok_or_else(|| bad("missing T"))?;
        let n_steps = root
            .get("n_steps")
            .and_then(Value::as_integer)
            .ok_or_else(|| bad("missing n_steps"))? as usize;
        let table = root
            .get("files")
            .and_then(Value::as_table)
            .ok_or_else(|| bad("missing files"))?;
        let order = root
            .get("file_order")
            .and_then(Value::as_array)
            .ok_or_else(|| bad("missing file_order"))?;
        let mut files = Vec::with_capacity(order.len());
        for name in order {
            let name = name
                .as_str()
                .ok_or_else(|| bad("file_order entries must be strings"))?;
            let hash = table
                .get(name)
                .and_then(Value::as_str)
                .ok_or_else(|| bad(&format!("no hash for {name}")))?;
            files.push((name.to_string(), hash.to_string()));
        }
        Ok(Self {
            version: string("version")?,
            kind: string("kind")?,
            seed,
            horizon,
            n_steps,
            config_sha256: string("config_sha256")?,
            files,
            config: string("config")?,
        })
    }
}

/// Worker count: explicit value, then [`WORKERS_ENV`], then the config.
pub fn resolve_workers(
    cli: Option<usize>,
    cfg: &ExperimentConfig,
) -> Result<Option<usize>, HarnessError> {
    if let Some(w) = cli {
        return Ok(Some(w));
    }
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        return match v.trim().parse::<usize>() {
            Ok(w) if w >= 1 => Ok(Some(w)),
            _ => Err(HarnessError::Validation(vec![format!(
                "{WORKERS_ENV}={v} must be a positive integer"
            )])),
        };
    }
    Ok(cfg.run.workers)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub out_dir: PathBuf,
    pub manifest: Manifest,
    pub artifacts: Artifacts,
}

/// Runs the experiment and persists it into `cfg.output_dir`.
pub fn execute(
    cfg: &ExperimentConfig,
    registry: &ModelRegistry,
    workers: Option<usize>,
) -> Result<RunReport, HarnessError> {
    if workers == Some(0) {
        return Err(HarnessError::Validation(vec![
            "workers must be at least 1".into()
        ]));
    }
    let artifacts = run_experiment(cfg, registry, workers)?;
    let manifest = Manifest::build(cfg, &artifacts);
    promote(&cfg.output_dir, &artifacts, &manifest)?;
    Ok(RunReport {
        out_dir: cfg.output_dir.clone(),
        manifest,
        artifacts,
    })
}

/// Writes everything into a sibling staging directory, then swaps it in.
fn promote(out: &Path, artifacts: &Artifacts, manifest: &Manifest) -> Result<(), HarnessError> {
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| io(&format!("creating {}", parent.display()), e))?;
    if out.exists() && !out.is_dir() {
        return Err(HarnessError::Io(format!(
            "{} exists and is not a directory",
            out.display()
        )));
    }
    let staging = tempfile::Builder::new()
        .prefix(".vmv-staging-")
        .tempdir_in(&parent)
        .map_err(|e| io("creating staging directory", e))?;
    for (name, body) in &artifacts.files {
        fs::write(staging.path().join(name), body)
            .map_err(|e| io(&format!("writing {name}"), e))?;
    }
    fs::write(staging.path().join(MANIFEST_NAME), manifest.to_toml())
        .map_err(|e| io("writing manifest", e))?;
    if out.exists() {
        // rename over an empty directory replaces it, so park the old output there
        let old = tempfile::Builder::new()
            .prefix(".vmv-old-")
            .tempdir_in(&parent)
            .map_err(|e| io("creating swap directory", e))?;
        fs::rename(out, old.path())
            .map_err(|e| io(&format!("moving aside {}", out.display()), e))?;
        if let Err(e) = fs::rename(staging.path(), out) {
            let _ = fs::rename(old.path(), out);
            return Err(io(&format!("promoting into {}", out.display()), e));
        }
        let _ = staging.keep();
    } else {
        let path = staging.keep();
        fs::rename(&path, out).map_err(|e| io(&format!("promoting into {}", out.display()), e))?;
    }
    Ok(())
}

/// Outcome of replaying a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct RerunReport {
    pub report: RunReport,
    /// Files whose hash differs from the manifest.
    pub mismatched: Vec<String>,
}

impl RerunReport {
    pub fn identical(&self) -> bool {
        self.mismatched.is_empty()
    }
}

/// Re-runs the resolved config embedded in a manifest and compares hashes.
pub fn rerun(
    manifest_path: &Path,
    out: Option<&Path>,
    registry: &ModelRegistry,
    workers: Option<usize>,
) -> Result<RerunReport, HarnessError> {
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| io(&format!("reading {}", manifest_path.display()), e))?;
    let manifest = Manifest::parse(&text)?;
    if sha256_hex(manifest.config.as_bytes()) != manifest.config_sha256 {
        return Err(HarnessError::Validation(vec![
            "manifest: embedded config does not match its hash".into(),
        ]));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut cfg = validate_config_with(&manifest.config, registry, base)?;
    cfg.output_dir = match out {
        Some(o) => o.to_path_buf(),
        None => base.join("rerun"),
    };
    let workers = resolve_workers(workers, &cfg)?;
    let report = execute(&cfg, registry, workers)?;
    let mut mismatched = Vec::new();
    for (name, hash) in &manifest.files {
        match report.manifest.files.iter().find(|(n, _)| n == name) {
            Some((_, h)) if h == hash => {}
            _ => mismatched.push(name.clone()),
        }
    }
    for (name, _) in &report.manifest.files {
        if !manifest.files.iter().any(|(n, _)| n == name) {
            mismatched.push(name.clone());
        }
    }
    Ok(RerunReport { report, mismatched })
}
