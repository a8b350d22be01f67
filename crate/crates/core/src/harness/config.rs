//! Experiment configuration: TOML text in, validated [`ExperimentConfig`] out.
//!
//! Validation walks the whole document and collects every problem with its
//! field path before giving up, so one run shows all mistakes.

use std::fmt;
use std::path::{Path, PathBuf};

use toml::{Table, Value};

use crate::kernels::{default_steps, Kernel, KernelError, TabulatedKernel};

use super::models::ModelRegistry;

pub const KINDS: [&str; 9] = [
    "simulate",
    "limit",
    "clt",
    "ldp-rate",
    "mdp-rate",
    "rate-min",
    "tail-probe",
    "resolvent",
    "kernel-probe",
];

pub const KERNEL_FAMILIES: [&str; 5] =
    ["constant", "power", "fbm", "riemann_liouville", "tabulated"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Simulate,
    Limit,
    Clt,
    LdpRate,
    MdpRate,
    RateMin,
    TailProbe,
    Resolvent,
    KernelProbe,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        KINDS[self as usize]
    }

    pub fn parse(s: &str) -> Option<Self> {
        use ExperimentKind::*;
        let all = [
            Simulate,
            Limit,
            Clt,
            LdpRate,
            MdpRate,
            RateMin,
            TailProbe,
            Resolvent,
            KernelProbe,
        ];
        all.into_iter().find(|k| k.name() == s)
    }

    /// Kinds that simulate particle systems and fall under the memory guard.
    pub fn simulates(self) -> bool {
        matches!(self, Self::Simulate | Self::Clt | Self::TailProbe)
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum KernelSpec {
    Constant { c: f64 },
    Power { hurst: f64, scale: f64 },
    Fbm { hurst: f64, scale: f64 },
    RiemannLiouville { alpha: f64, scale: f64 },
    Tabulated { path: PathBuf, scale: f64 },
}

impl KernelSpec {
    pub fn build(&self) -> Result<Kernel, KernelError> {
        Ok(match self {
            Self::Constant { c } => Kernel::constant(*c),
            Self::Power { hurst, scale } => Kernel::power(*hurst)?.scaled(*scale),
            Self::Fbm { hurst, scale } => Kernel::fbm(*hurst)?.scaled(*scale),
            Self::RiemannLiouville { alpha, scale } => {
                Kernel::riemann_liouville(*alpha)?.scaled(*scale)
            }
            Self::Tabulated { path, scale } => {
                Kernel::tabulated(TabulatedKernel::from_csv_path(path)?).scaled(*scale)
            }
        })
    }

    fn to_table(&self) -> Table {
        let mut t = Table::new();
        let mut put = |k: &str, v: Value| {
            t.insert(k.into(), v);
        };
        match self {
            Self::Constant { c } => {
                put("family", "constant".into());
                put("c", (*c).into());
            }
            Self::Power { hurst, scale } => {
                put("family", "power".into());
                put("hurst", (*hurst).into());
                put("scale", (*scale).into());
            }
            Self::Fbm { hurst, scale } => {
                put("family", "fbm".into());
                put("hurst", (*hurst).into());
                put("scale", (*scale).into());
            }
            Self::RiemannLiouville { alpha, scale } => {
                put("family", "riemann_liouville".into());
                put("alpha", (*alpha).into());
                put("scale", (*scale).into());
            }
            Self::Tabulated { path, scale } => {
                put("family", "tabulated".into());
                put("path", path.display().to_string().into());
                put("scale", (*scale).into());
            }
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    /// `b = A x + B mean(μ)`, `σ = σ0 + σ1 · x`, all row-major.
    Linear {
        d: usize,
        m: usize,
        a: Vec<f64>,
        b: Vec<f64>,
        sigma0: Vec<f64>,
        sigma1: Option<Vec<f64>>,
    },
    /// Coefficients looked up in a [`ModelRegistry`].
    Custom { key: String, d: usize, m: usize },
}

impl ModelSpec {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            Self::Linear { d, m, .. } | Self::Custom { d, m, .. } => (*d, *m),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelsSpec {
    pub k1: KernelSpec,
    pub k2: KernelSpec,
    pub kc: Option<KernelSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub horizon: f64,
    pub n_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub n_particles: usize,
    pub seed: u64,
    pub eps: Vec<f64>,
    pub xi: Vec<f64>,
    /// Standard deviation of a Gaussian initial law around `xi`; 0 is deterministic.
    pub xi_std: f64,
    pub p: Vec<f64>,
    /// `h(ε) = ε^{-h_beta}` in the moderate regime.
    pub h_beta: f64,
    pub workers: Option<usize>,
    pub memory_budget: u64,
    pub write_ensemble: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TargetSpec {
    /// `φ_t = ξ + slope · t` (LDP) or `ψ_t = slope · t` (MDP).
    Line { slope: Vec<f64> },
    /// Skeleton of a constant control.
    Pushed { control: Vec<f64> },
    /// Columns `t, x1, ..., xd` on the grid nodes.
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventMode {
    Ldp,
    Mdp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventSpec {
    pub mode: EventMode,
    pub normal: Vec<f64>,
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSpec {
    /// `triangular` or `descent`.
    pub solver: String,
    pub descent_max_iter: usize,
    pub descent_tol: f64,
    pub regularization: f64,
    pub max_iter: usize,
    pub step: f64,
    pub stages: usize,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    /// `direct` or `series`.
    pub resolvent: String,
    pub series_max_terms: usize,
    pub series_tol: f64,
    /// `stepping` or `picard`.
    pub limit: String,
    pub picard_max_iter: usize,
    pub picard_tol: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            solver: "triangular".into(),
            descent_max_iter: 20_000,
            descent_tol: 1e-12,
            regularization: 0.0,
            max_iter: 200,
            step: 1.0,
            stages: 8,
            initial_penalty: 1.0,
            penalty_growth: 10.0,
            resolvent: "direct".into(),
            series_max_terms: 200,
            series_tol: 1e-10,
            limit: "stepping".into(),
            picard_max_iter: 1000,
            picard_tol: 1e-13,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSpec {
    pub t: f64,
    pub steps: Vec<f64>,
    pub class_k_times: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub model: ModelSpec,
    pub kernels: KernelsSpec,
    pub grid: GridSpec,
    pub run: RunSpec,
    pub target: TargetSpec,
    pub event: EventSpec,
    pub optimizer: OptimizerSpec,
    pub probe: ProbeSpec,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    Invalid(Vec<String>),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Parse {
                line,
                column,
                message,
            } => {
                write!(f, "parse error at line {line}, column {column}: {message}")
            }
            Self::Invalid(list) => {
                for (i, e) in list.iter().enumerate() {
                    if i > 0 {
                        writeln!(f)?;
                    }
                    write!(f, "{e}")?;
                }
                Ok(())
            }
        }
    }
}

impl std::error::Error for ConfigError {}

impl ConfigError {
    pub fn messages(&self) -> Vec<String> {
        match self {
            Self::Parse { .. } => vec![self.to_string()],
            Self::Invalid(list) => list.clone(),
        }
    }
}

/// Validates against the built-in model registry; relative paths resolve
/// against the working directory.
pub fn validate_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    validate_config_with(text, &ModelRegistry::builtin(), Path::new("."))
}

/// Reads and validates a config file; relative paths inside resolve against
/// the file's directory.
pub fn load_config(path: &Path, registry: &ModelRegistry) -> Result<ExperimentConfig, ConfigError> {
    load_config_as(path, registry, None)
}

pub fn load_config_as(
    path: &Path,
    registry: &ModelRegistry,
    expected: Option<ExperimentKind>,
) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        ConfigError::Invalid(vec![format!("cannot read config {}: {e}", path.display())])
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    validate_config_as(&text, registry, base, expected)
}

pub fn validate_config_with(
    text: &str,
    registry: &ModelRegistry,
    base_dir: &Path,
) -> Result<ExperimentConfig, ConfigError> {
    validate_config_as(text, registry, base_dir, None)
}

/// Like [`validate_config_with`] for a fixed experiment kind: a missing
/// `kind` defaults to it and a different one is an error.
pub fn validate_config_as(
    text: &str,
    registry: &ModelRegistry,
    base_dir: &Path,
    expected: Option<ExperimentKind>,
) -> Result<ExperimentConfig, ConfigError> {
    let root: Table = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((1, 1), |s| line_col(text, s.start));
        ConfigError::Parse {
            line,
            column,
            message: e.message().to_string(),
        }
    })?;
    let mut w = Walker {
        errors: Vec::new(),
        base_dir: base_dir.to_path_buf(),
        expected,
    };
    let cfg = w.document(&root, registry);
    if w.errors.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError::Invalid(w.errors))
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let head = &text[..offset.min(text.len())];
    let line = head.matches('\n').count() + 1;
    let column = head.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

const SECTIONS: [&str; 10] = [
    "kind",
    "model",
    "kernels",
    "grid",
    "run",
    "target",
    "event",
    "optimizer",
    "probe",
    "output",
];

struct Walker {
    errors: Vec<String>,
    base_dir: PathBuf,
    expected: Option<ExperimentKind>,
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

impl Walker {
    fn err(&mut self, msg: String) {
        self.errors.push(msg);
    }

    fn keys(&mut self, table: &Table, path: &str, allowed: &[&str]) {
        for k in table.keys() {
            if !allowed.contains(&k.as_str()) {
                self.err(format!(
                    "{} is not a recognised key (allowed: {})",
                    join(path, k),
                    allowed.join(", ")
                ));
            }
        }
    }

    fn section<'a>(&mut self, root: &'a Table, name: &str, allowed: &[&str]) -> Option<&'a Table> {
        match root.get(name) {
            None => None,
            Some(Value::Table(t)) => {
                self.keys(t, name, allowed);
                Some(t)
            }
            Some(_) => {
                self.err(format!("{name} must be a table"));
                None
            }
        }
    }

    fn float(&mut self, t: Option<&Table>, path: &str, key: &str, default: f64) -> f64 {
        match t.and_then(|t| t.get(key)) {
            None => default,
            Some(v) => match as_f64(v) {
                Some(x) if x.is_finite() => x,
                _ => {
                    self.err(format!("{} must be a finite number", join(path, key)));
                    default
                }
            },
        }
    }

    fn integer(&mut self, t: Option<&Table>, path: &str, key: &str, default: u64) -> u64 {
        match t.and_then(|t| t.get(key)) {
            None => default,
            Some(Value::Integer(i)) if *i >= 0 => *i as u64,
            Some(_) => {
                self.err(format!("{} must be a nonnegative integer", join(path, key)));
                default
            }
        }
    }

    fn string(
        &mut self,
        t: Option<&Table>,
        path: &str,
        key: &str,
        default: &str,
        allowed: &[&str],
    ) -> String {
        match t.and_then(|t| t.get(key)) {
            None => default.to_string(),
            Some(Value::String(s)) if allowed.is_empty() || allowed.contains(&s.as_str()) => {
                s.clone()
            }
            Some(Value::String(s)) => {
                self.err(format!(
                    "{} must be one of {} (got '{s}')",
                    join(path, key),
                    allowed.join(", ")
                ));
                default.to_string()
            }
            Some(_) => {
                self.err(format!("{} must be a string", join(path, key)));
                default.to_string()
            }
        }
    }

    /// A scalar or an array of numbers; `None` when absent.
    fn floats(&mut self, t: Option<&Table>, path: &str, key: &str) -> Option<Vec<f64>> {
        let v = t.and_then(|t| t.get(key))?;
        let p = join(path, key);
        match v {
            Value::Array(items) => {
                let mut out = Vec::with_capacity(items.len());
                for (i, item) in items.iter().enumerate() {
                    match as_f64(item) {
                        Some(x) if x.is_finite() => out.push(x),
                        _ => self.err(format!("{p}[{i}] must be a finite number")),
                    }
                }
                (out.len() == items.len()).then_some(out)
            }
            other => match as_f64(other) {
                Some(x) if x.is_finite() => Some(vec![x]),
                _ => {
                    self.err(format!(
                        "{p} must be a finite number or an array of numbers"
                    ));
                    None
                }
            },
        }
    }

    /// Vector of length `len`, broadcasting a single value.
    fn vector(
        &mut self,
        t: Option<&Table>,
        path: &str,
        key: &str,
        len: usize,
        default: f64,
    ) -> Vec<f64> {
        match self.floats(t, path, key) {
            None => vec![default; len],
            Some(v) if v.len() == len => v,
            Some(v) if v.len() == 1 => vec![v[0]; len],
            Some(v) => {
                self.err(format!(
                    "{} has {} entries, expected 1 or {len}",
                    join(path, key),
                    v.len()
                ));
                vec![default; len]
            }
        }
    }

    fn document(&mut self, root: &Table, registry: &ModelRegistry) -> ExperimentConfig {
        for k in root.keys() {
            if !SECTIONS.contains(&k.as_str()) {
                self.err(format!(
                    "{k} is not a recognised section (allowed: {})",
                    SECTIONS.join(", ")
                ));
            }
        }
        let kind = match root.get("kind") {
            None if self.expected.is_some() => self.expected.unwrap(),
            None => {
                self.err(format!("kind is required (one of {})", KINDS.join(", ")));
                ExperimentKind::Simulate
            }
            Some(Value::String(s)) => ExperimentKind::parse(s).unwrap_or_else(|| {
                self.err(format!(
                    "kind must be one of {} (got '{s}')",
                    KINDS.join(", ")
                ));
                ExperimentKind::Simulate
            }),
            Some(_) => {
                self.err("kind must be a string".into());
                ExperimentKind::Simulate
            }
        };

        if let Some(expected) = self.expected {
            if expected != kind && root.contains_key("kind") {
                self.err(format!(
                    "kind '{kind}' does not match the requested experiment '{expected}'"
                ));
            }
        }
        let model = self.model(root, registry);
        let (d, m) = model.dims();
        let kernels = self.kernels(root);
        let grid = self.grid(root);
        let run = self.run(root, d);
        let target = self.target(root, d, m);
        let event = self.event(root, d);
        let optimizer = self.optimizer(root);
        let probe = self.probe(root, grid.horizon);
        let output = self.section(root, "output", &["dir"]);
        let output_dir = PathBuf::from(self.string(output, "output", "dir", "out", &[]));

        if kind == ExperimentKind::Clt && run.xi_std != 0.0 {
            self.err("run.xi_std must be 0 for clt (the limit needs a deterministic start)".into());
        }
        if kind == ExperimentKind::TailProbe && event.mode == EventMode::Mdp && run.xi_std != 0.0 {
            self.err("run.xi_std must be 0 for a moderate tail probe".into());
        }
        if matches!(
            kind,
            ExperimentKind::Limit
                | ExperimentKind::LdpRate
                | ExperimentKind::MdpRate
                | ExperimentKind::RateMin
        ) && run.xi_std != 0.0
        {
            self.err(format!("run.xi_std must be 0 for {kind}"));
        }

        ExperimentConfig {
            kind,
            model,
            kernels,
            grid,
            run,
            target,
            event,
            optimizer,
            probe,
            output_dir,
        }
    }

    fn model(&mut self, root: &Table, registry: &ModelRegistry) -> ModelSpec {
        let t = self.section(
            root,
            "model",
            &["name", "key", "d", "m", "a", "b", "sigma0", "sigma1"],
        );
        let name = self.string(t, "model", "name", "linear", &["linear", "custom"]);
        if name == "custom" {
            for k in ["d", "m", "a", "b", "sigma0", "sigma1"] {
                if t.is_some_and(|t| t.contains_key(k)) {
                    self.err(format!("model.{k} does not apply to a custom model"));
                }
            }
            let key = self.string(t, "model", "key", "", &[]);
            if key.is_empty() {
                self.err("model.key is required for a custom model".into());
                return ModelSpec::Custom { key, d: 1, m: 1 };
            }
            return match registry.get(&key) {
                Some(c) => {
                    let (d, m) = c.dims();
                    ModelSpec::Custom { key, d, m }
                }
                None => {
                    self.err(format!(
                        "model.key '{key}' is not registered (known: {})",
                        registry.keys().join(", ")
                    ));
                    ModelSpec::Custom { key, d: 1, m: 1 }
                }
            };
        }
        if t.is_some_and(|t| t.contains_key("key")) {
            self.err("model.key only applies to a custom model".into());
        }
        let dim = |w: &mut Self, key: &str, default: u64| -> usize {
            let v = w.integer(t, "model", key, default);
            if v == 0 {
                w.err(format!("model.{key} must be at least 1"));
                1
            } else {
                v as usize
            }
        };
        let d = dim(self, "d", 1);
        let m = dim(self, "m", d as u64);
        let a = self.matrix(t, "a", d, d, 0.0);
        let b = self.matrix(t, "b", d, d, 0.0);
        let sigma0 = self.matrix(t, "sigma0", d, m, 1.0);
        let sigma1 = match self.floats(t, "model", "sigma1") {
            None => None,
            Some(v) if v.len() == d * m * d => Some(v),
            Some(v) if v.len() == 1 && d == 1 && m == 1 => Some(v),
            Some(v) => {
                self.err(format!(
                    "model.sigma1 has {} entries, expected {}",
                    v.len(),
                    d * m * d
                ));
                None
            }
        };
        ModelSpec::Linear {
            d,
            m,
            a,
            b,
            sigma0,
            sigma1,
        }
    }

    /// Row-major `rows × cols`; a scalar means that multiple of the identity.
    fn matrix(
        &mut self,
        t: Option<&Table>,
        key: &str,
        rows: usize,
        cols: usize,
        default: f64,
    ) -> Vec<f64> {
        let eye = |c: f64| -> Vec<f64> {
            (0..rows * cols)
                .map(|k| if k / cols == k % cols { c } else { 0.0 })
                .collect()
        };
        match self.floats(t, "model", key) {
            None => eye(default),
            Some(v) if v.len() == rows * cols => v,
            Some(v) if v.len() == 1 && rows == cols => eye(v[0]),
            Some(v) if v.len() == 1 => {
                self.err(format!(
                    "model.{key} is {rows}x{cols}; a scalar only works when it is square"
                ));
                eye(default)
            }
            Some(v) => {
                self.err(format!(
                    "model.{key} has {} entries, expected {}",
                    v.len(),
                    rows * cols
                ));
                eye(default)
            }
        }
    }

    fn kernels(&mut self, root: &Table) -> KernelsSpec {
        let t = self.section(root, "kernels", &["k1", "k2", "kc"]);
        let one = KernelSpec::Constant { c: 1.0 };
        let k1 = self.kernel(t, "k1").unwrap_or(one.clone());
        let k2 = self.kernel(t, "k2").unwrap_or(one);
        let kc = self.kernel(t, "kc");
        KernelsSpec { k1, k2, kc }
    }

    fn kernel(&mut self, t: Option<&Table>, key: &str) -> Option<KernelSpec> {
        let path = format!("kernels.{key}");
        let spec = match t?.get(key)? {
            Value::Table(k) => k,
            Value::String(family) => {
                self.err(format!(
                    "{path} must be a table such as {{ family = \"{family}\", ... }}"
                ));
                return None;
            }
            _ => {
                self.err(format!("{path} must be a table with a family key"));
                return None;
            }
        };
        let family = match spec.get("family") {
            Some(Value::String(f)) => f.as_str(),
            Some(_) => {
                self.err(format!("{path}.family must be a string"));
                return None;
            }
            None => {
                self.err(format!(
                    "{path}.family is required (one of {})",
                    KERNEL_FAMILIES.join(", ")
                ));
                return None;
            }
        };
        let s = Some(spec);
        let scale = |w: &mut Self| w.float(s, &path, "scale", 1.0);
        let unit = |w: &mut Self, name: &str, lo: f64, hi: f64, hi_open: bool| -> f64 {
            let v = w.float(s, &path, name, f64::NAN);
            if v.is_nan() {
                if !spec.contains_key(name) {
                    w.err(format!("{path}.{name} is required for the {family} family"));
                }
                return 0.5;
            }
            let ok = v > lo && if hi_open { v < hi } else { v <= hi };
            if !ok {
                let close = if hi_open { ')' } else { ']' };
                w.err(format!("{path}.{name} must lie in ({lo},{hi}{close}"));
            }
            v
        };
        let out = match family {
            "constant" => {
                self.keys(spec, &path, &["family", "c"]);
                KernelSpec::Constant {
                    c: self.float(s, &path, "c", 1.0),
                }
            }
            "power" => {
                self.keys(spec, &path, &["family", "hurst", "scale"]);
                KernelSpec::Power {
                    hurst: unit(self, "hurst", 0.0, 1.0, true),
                    scale: scale(self),
                }
            }
            "fbm" => {
                self.keys(spec, &path, &["family", "hurst", "scale"]);
                KernelSpec::Fbm {
                    hurst: unit(self, "hurst", 0.0, 1.0, true),
                    scale: scale(self),
                }
            }
            "riemann_liouville" => {
                self.keys(spec, &path, &["family", "alpha", "scale"]);
                KernelSpec::RiemannLiouville {
                    alpha: unit(self, "alpha", 0.5, 1.0, false),
                    scale: scale(self),
                }
            }
            "tabulated" => {
                self.keys(spec, &path, &["family", "path", "scale"]);
                let file = self.string(s, &path, "path", "", &[]);
                if file.is_empty() {
                    self.err(format!("{path}.path is required for the tabulated family"));
                }
                let full = self.base_dir.join(&file);
                if !file.is_empty() && !full.is_file() {
                    self.err(format!("{path}.path '{}' does not exist", full.display()));
                }
                KernelSpec::Tabulated {
                    path: full,
                    scale: scale(self),
                }
            }
            other => {
                self.err(format!(
                    "{path}.family must be one of {} (got '{other}')",
                    KERNEL_FAMILIES.join(", ")
                ));
                return None;
            }
        };
        Some(out)
    }

    fn grid(&mut self, root: &Table) -> GridSpec {
        let t = self.section(root, "grid", &["T", "n_steps"]);
        let mut horizon = self.float(t, "grid", "T", 1.0);
        if horizon <= 0.0 {
            self.err("grid.T must be positive".into());
            horizon = 1.0;
        }
        let mut n_steps = self.integer(t, "grid", "n_steps", 100) as usize;
        if n_steps < 2 {
            self.err("grid.n_steps must be at least 2".into());
            n_steps = 2;
        }
        GridSpec { horizon, n_steps }
    }

    fn run(&mut self, root: &Table, d: usize) -> RunSpec {
        let allowed = [
            "n_particles",
            "seed",
            "eps",
            "xi",
            "xi_std",
            "p",
            "h_beta",
            "workers",
            "memory_budget",
            "write_ensemble",
        ];
        let t = self.section(root, "run", &allowed);
        let n_particles = self.integer(t, "run", "n_particles", 1000) as usize;
        if n_particles == 0 {
            self.err("run.n_particles must be at least 1".into());
        }
        let seed = match t.and_then(|t| t.get("seed")) {
            None => 0,
            Some(v) => parse_seed(v).unwrap_or_else(|| {
                self.err(
                    "run.seed must be a nonnegative integer or a decimal/0x-hex string below 2^64"
                        .into(),
                );
                0
            }),
        };
        let eps = self
            .floats(t, "run", "eps")
            .unwrap_or_else(|| vec![1e-1, 1e-2, 1e-3, 1e-4]);
        if eps.is_empty() {
            self.err("run.eps must not be empty".into());
        }
        for (i, e) in eps.iter().enumerate() {
            if !(*e > 0.0 && *e <= 1.0) {
                self.err(format!("run.eps[{i}] must lie in (0,1]"));
            }
        }
        for i in 1..eps.len() {
            if eps[..i].contains(&eps[i]) {
                self.err(format!("run.eps[{i}] repeats an earlier value"));
            }
        }
        let xi = self.vector(t, "run", "xi", d, 0.0);
        let xi_std = self.float(t, "run", "xi_std", 0.0);
        if xi_std < 0.0 {
            self.err("run.xi_std must be nonnegative".into());
        }
        let p = self.floats(t, "run", "p").unwrap_or_else(|| vec![2.0, 4.0]);
        if p.is_empty() {
            self.err("run.p must not be empty".into());
        }
        for (i, v) in p.iter().enumerate() {
            if *v < 1.0 {
                self.err(format!("run.p[{i}] must be at least 1"));
            }
        }
        let h_beta = self.float(t, "run", "h_beta", 0.25);
        if !(h_beta > 0.0 && h_beta < 0.5) {
            self.err("run.h_beta must lie in (0,0.5)".into());
        }
        let workers = t
            .and_then(|t| t.get("workers"))
            .map(|_| self.integer(t, "run", "workers", 1) as usize);
        if workers == Some(0) {
            self.err("run.workers must be at least 1".into());
        }
        let memory_budget = self.integer(
            t,
            "run",
            "memory_budget",
            crate::volterra::DEFAULT_MEMORY_BUDGET,
        );
        if memory_budget == 0 {
            self.err("run.memory_budget must be positive".into());
        }
        let write_ensemble = match t.and_then(|t| t.get("write_ensemble")) {
            None => false,
            Some(Value::Boolean(b)) => *b,
            Some(_) => {
                self.err("run.write_ensemble must be a boolean".into());
                false
            }
        };
        RunSpec {
            n_particles,
            seed,
            eps,
            xi,
            xi_std,
            p,
            h_beta,
            workers,
            memory_budget,
            write_ensemble,
        }
    }

    fn target(&mut self, root: &Table, d: usize, m: usize) -> TargetSpec {
        let t = self.section(root, "target", &["type", "slope", "control", "path"]);
        let kind = self.string(t, "target", "type", "line", &["line", "pushed", "csv"]);
        let stray = |w: &mut Self, keys: &[&str]| {
            for k in keys {
                if t.is_some_and(|t| t.contains_key(*k)) {
                    w.err(format!("target.{k} does not apply to target type '{kind}'"));
                }
            }
        };
        match kind.as_str() {
            "pushed" => {
                stray(self, &["slope", "path"]);
                TargetSpec::Pushed {
                    control: self.vector(t, "target", "control", m, 1.0),
                }
            }
            "csv" => {
                stray(self, &["slope", "control"]);
                let file = self.string(t, "target", "path", "", &[]);
                if file.is_empty() {
                    self.err("target.path is required for a csv target".into());
                }
                let full = self.base_dir.join(&file);
                if !file.is_empty() && !full.is_file() {
                    self.err(format!("target.path '{}' does not exist", full.display()));
                }
                TargetSpec::Csv { path: full }
            }
            _ => {
                stray(self, &["control", "path"]);
                TargetSpec::Line {
                    slope: self.vector(t, "target", "slope", d, 1.0),
                }
            }
        }
    }

    fn event(&mut self, root: &Table, d: usize) -> EventSpec {
        let t = self.section(root, "event", &["mode", "normal", "level"]);
        let mode = match self
            .string(t, "event", "mode", "ldp", &["ldp", "mdp"])
            .as_str()
        {
            "mdp" => EventMode::Mdp,
            _ => EventMode::Ldp,
        };
        let normal = self.vector(t, "event", "normal", d, 1.0);
        if normal.iter().all(|v| *v == 0.0) {
            self.err("event.normal must not be zero".into());
        }
        let level = self.float(t, "event", "level", 1.0);
        EventSpec {
            mode,
            normal,
            level,
        }
    }

    fn optimizer(&mut self, root: &Table) -> OptimizerSpec {
        let allowed = [
            "solver",
            "descent_max_iter",
            "descent_tol",
            "regularization",
            "max_iter",
            "step",
            "stages",
            "initial_penalty",
            "penalty_growth",
            "resolvent",
            "series_max_terms",
            "series_tol",
            "limit",
            "picard_max_iter",
            "picard_tol",
        ];
        let t = self.section(root, "optimizer", &allowed);
        let d = OptimizerSpec::default();
        let p = "optimizer";
        let o = OptimizerSpec {
            solver: self.string(t, p, "solver", &d.solver, &["triangular", "descent"]),
            descent_max_iter: self.integer(t, p, "descent_max_iter", d.descent_max_iter as u64)
                as usize,
            descent_tol: self.float(t, p, "descent_tol", d.descent_tol),
            regularization: self.float(t, p, "regularization", d.regularization),
            max_iter: self.integer(t, p, "max_iter", d.max_iter as u64) as usize,
            step: self.float(t, p, "step", d.step),
            stages: self.integer(t, p, "stages", d.stages as u64) as usize,
            initial_penalty: self.float(t, p, "initial_penalty", d.initial_penalty),
            penalty_growth: self.float(t, p, "penalty_growth", d.penalty_growth),
            resolvent: self.string(t, p, "resolvent", &d.resolvent, &["direct", "series"]),
            series_max_terms: self.integer(t, p, "series_max_terms", d.series_max_terms as u64)
                as usize,
            series_tol: self.float(t, p, "series_tol", d.series_tol),
            limit: self.string(t, p, "limit", &d.limit, &["stepping", "picard"]),
            picard_max_iter: self.integer(t, p, "picard_max_iter", d.picard_max_iter as u64)
                as usize,
            picard_tol: self.float(t, p, "picard_tol", d.picard_tol),
        };
        for (name, v) in [
            ("descent_tol", o.descent_tol),
            ("step", o.step),
            ("initial_penalty", o.initial_penalty),
            ("series_tol", o.series_tol),
            ("picard_tol", o.picard_tol),
        ] {
            if v <= 0.0 {
                self.err(format!("optimizer.{name} must be positive"));
            }
        }
        if o.regularization < 0.0 {
            self.err("optimizer.regularization must be nonnegative".into());
        }
        if o.penalty_growth <= 1.0 {
            self.err("optimizer.penalty_growth must exceed 1".into());
        }
        for (name, v) in [
            ("descent_max_iter", o.descent_max_iter),
            ("stages", o.stages),
            ("series_max_terms", o.series_max_terms),
            ("picard_max_iter", o.picard_max_iter),
        ] {
            if v == 0 {
                self.err(format!("optimizer.{name} must be at least 1"));
            }
        }
        o
    }

    fn probe(&mut self, root: &Table, horizon: f64) -> ProbeSpec {
        let t = self.section(root, "probe", &["t", "steps", "class_k_times"]);
        let at = self.float(t, "probe", "t", 0.5 * horizon);
        let steps = self
            .floats(t, "probe", "steps")
            .unwrap_or_else(default_steps);
        if !(at >= 0.0 && at < horizon) {
            self.err("probe.t must lie in [0,T)".into());
        }
        if steps.len() < 4 {
            self.err("probe.steps needs at least 4 entries".into());
        }
        for (i, h) in steps.iter().enumerate() {
            if !(*h > 0.0 && at + h <= horizon) {
                self.err(format!("probe.steps[{i}] must be positive with t + h <= T"));
            }
        }
        let class_k_times = self.integer(t, "probe", "class_k_times", 16) as usize;
        if class_k_times < 2 {
            self.err("probe.class_k_times must be at least 2".into());
        }
        ProbeSpec {
            t: at,
            steps,
            class_k_times,
        }
    }
}

fn as_f64(v: &Value) -> Option<f64> {
    match v {
        Value::Float(x) => Some(*x),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

fn parse_seed(v: &Value) -> Option<u64> {
    match v {
        Value::Integer(i) if *i >= 0 => Some(*i as u64),
        Value::String(s) => {
            let s = s.trim();
            match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
                Some(hex) => u64::from_str_radix(&hex.replace('_', ""), 16).ok(),
                None => s.replace('_', "").parse().ok(),
            }
        }
        _ => None,
    }
}

fn floats(v: &[f64]) -> Value {
    Value::Array(v.iter().map(|x| Value::Float(*x)).collect())
}

impl ExperimentConfig {
    /// Fully resolved TOML, every default spelled out. Validating the output
    /// reproduces `self`.
    pub fn to_toml(&self) -> String {
        let mut root = Table::new();
        root.insert("kind".into(), self.kind.name().into());

        let mut model = Table::new();
        match &self.model {
            ModelSpec::Linear {
                d,
                m,
                a,
                b,
                sigma0,
                sigma1,
            } => {
                model.insert("name".into(), "linear".into());
                model.insert("d".into(), (*d as i64).into());
                model.insert("m".into(), (*m as i64).into());
                model.insert("a".into(), floats(a));
                model.insert("b".into(), floats(b));
                model.insert("sigma0".into(), floats(sigma0));
                if let Some(s1) = sigma1 {
                    model.insert("sigma1".into(), floats(s1));
                }
            }
            ModelSpec::Custom { key, .. } => {
                model.insert("name".into(), "custom".into());
                model.insert("key".into(), key.as_str().into());
            }
        }
        root.insert("model".into(), model.into());

        let mut kernels = Table::new();
        kernels.insert("k1".into(), self.kernels.k1.to_table().into());
        kernels.insert("k2".into(), self.kernels.k2.to_table().into());
        if let Some(kc) = &self.kernels.kc {
            kernels.insert("kc".into(), kc.to_table().into());
        }
        root.insert("kernels".into(), kernels.into());

        let mut grid = Table::new();
        grid.insert("T".into(), self.grid.horizon.into());
        grid.insert("n_steps".into(), (self.grid.n_steps as i64).into());
        root.insert("grid".into(), grid.into());

        let r = &self.run;
        let mut run = Table::new();
        run.insert("n_particles".into(), (r.n_particles as i64).into());
        let seed: Value = match i64::try_from(r.seed) {
            Ok(s) => s.into(),
            Err(_) => r.seed.to_string().into(),
        };
        run.insert("seed".into(), seed);
        run.insert("eps".into(), floats(&r.eps));
        run.insert("xi".into(), floats(&r.xi));
        run.insert("xi_std".into(), r.xi_std.into());
        run.insert("p".into(), floats(&r.p));
        run.insert("h_beta".into(), r.h_beta.into());
        if let Some(w) = r.workers {
            run.insert("workers".into(), (w as i64).into());
        }
        run.insert(
            "memory_budget".into(),
            (r.memory_budget.min(i64::MAX as u64) as i64).into(),
        );
        run.insert("write_ensemble".into(), r.write_ensemble.into());
        root.insert("run".into(), run.into());

        let mut target = Table::new();
        match &self.target {
            TargetSpec::Line { slope } => {
                target.insert("type".into(), "line".into());
                target.insert("slope".into(), floats(slope));
            }
            TargetSpec::Pushed { control } => {
                target.insert("type".into(), "pushed".into());
                target.insert("control".into(), floats(control));
            }
            TargetSpec::Csv { path } => {
                target.insert("type".into(), "csv".into());
                target.insert("path".into(), path.display().to_string().into());
            }
        }
        root.insert("target".into(), target.into());

        let mut event = Table::new();
        let mode = match self.event.mode {
            EventMode::Ldp => "ldp",
            EventMode::Mdp => "mdp",
        };
        event.insert("mode".into(), mode.into());
        event.insert("normal".into(), floats(&self.event.normal));
        event.insert("level".into(), self.event.level.into());
        root.insert("event".into(), event.into());

        let o = &self.optimizer;
        let mut opt = Table::new();
        opt.insert("solver".into(), o.solver.as_str().into());
        opt.insert(
            "descent_max_iter".into(),
            (o.descent_max_iter as i64).into(),
        );
        opt.insert("descent_tol".into(), o.descent_tol.into());
        opt.insert("regularization".into(), o.regularization.into());
        opt.insert("max_iter".into(), (o.max_iter as i64).into());
        opt.insert("step".into(), o.step.into());
        opt.insert("stages".into(), (o.stages as i64).into());
        opt.insert("initial_penalty".into(), o.initial_penalty.into());
        opt.insert("penalty_growth".into(), o.penalty_growth.into());
        opt.insert("resolvent".into(), o.resolvent.as_str().into());
        opt.insert(
            "series_max_terms".into(),
            (o.series_max_terms as i64).into(),
        );
        opt.insert("series_tol".into(), o.series_tol.into());
        opt.insert("limit".into(), o.limit.as_str().into());
        opt.insert("picard_max_iter".into(), (o.picard_max_iter as i64).into());
        opt.insert("picard_tol".into(), o.picard_tol.into());
        root.insert("optimizer".into(), opt.into());

        let mut probe = Table::new();
        probe.insert("t".into(), self.probe.t.into());
        probe.insert("steps".into(), floats(&self.probe.steps));
        probe.insert(
            "class_k_times".into(),
            (self.probe.class_k_times as i64).into(),
        );
        root.insert("probe".into(), probe.into());

        let mut output = Table::new();
        output.insert("dir".into(), self.output_dir.display().to_string().into());
        root.insert("output".into(), output.into());

        toml::to_string(&root).expect("config tables always serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_columns() {
        assert_eq!(line_col("ab\ncd", 4), (2, 2));
        assert_eq!(line_col("x", 0), (1, 1));
    }

    #[test]
    fn seeds() {
        assert_eq!(parse_seed(&Value::String("0xff".into())), Some(255));
        assert_eq!(
            parse_seed(&Value::String("18446744073709551615".into())),
            Some(u64::MAX)
        );
        assert_eq!(parse_seed(&Value::Integer(-1)), None);
    }
}
