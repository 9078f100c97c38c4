//! Experiment configuration: a TOML document with one table per module,
//! plus `section.key=value` overrides from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use deq_core::model::{SolverConfig, SIGMA_W2_MAX};
use deq_core::train::{AssertMode, Eta, TrainConfig};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Synthetic,
    Csv,
    Mnist,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub kind: DataKind,
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub x_path: Option<PathBuf>,
    pub y_path: Option<PathBuf>,
    pub images_path: Option<PathBuf>,
    pub labels_path: Option<PathBuf>,
    pub batch_path: Option<PathBuf>,
    pub classes: [u8; 2],
    pub per_class: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            kind: DataKind::Synthetic,
            n: 1000,
            d: 1000,
            seed: 0,
            x_path: None,
            y_path: None,
            images_path: None,
            labels_path: None,
            batch_path: None,
            classes: [0, 1],
            per_class: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub m: usize,
    pub sigma_w2: f64,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            m: 2000,
            sigma_w2: 0.08,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        let s = SolverConfig::default();
        Self {
            tol: s.tol,
            max_iter: s.max_iter,
        }
    }
}

impl SolverSection {
    pub fn to_solver(&self) -> SolverConfig {
        SolverConfig {
            tol: self.tol,
            max_iter: self.max_iter,
        }
    }
}

/// `"auto"` or a positive number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EtaSetting {
    Value(f64),
    Keyword(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub eta: EtaSetting,
    pub steps: usize,
    pub monitor_every: Option<usize>,
    /// `"record"` or `"fail-fast"`.
    pub assert_mode: String,
    pub checkpoint_every: Option<usize>,
    pub resume_from: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            eta: EtaSetting::Keyword("auto".into()),
            steps: 500,
            monitor_every: None,
            assert_mode: "record".into(),
            checkpoint_every: None,
            resume_from: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelSection {
    pub l_max: usize,
    pub tol: f64,
    pub width_constant: f64,
    pub depth_constant: f64,
    pub failure_prob: f64,
}

impl Default for KernelSection {
    fn default() -> Self {
        Self {
            l_max: 30,
            tol: deq_core::kernel::FIXED_POINT_TOL,
            width_constant: 1.0,
            depth_constant: 1.0,
            failure_prob: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConcentrationSection {
    pub experiments: Vec<String>,
    pub m_list: Vec<usize>,
    pub l: usize,
    pub l_max: usize,
    pub trials: usize,
    pub base_seed: u64,
}

pub const EXPERIMENTS: [&str; 4] = ["kernel_depth_decay", "equilibrium_depth_decay", "tied_vs_population", "lambda0_vs_width"];

impl Default for ConcentrationSection {
    fn default() -> Self {
        Self {
            experiments: EXPERIMENTS.iter().map(|s| s.to_string()).collect(),
            m_list: vec![100, 400, 1600],
            l: 6,
            l_max: 30,
            trials: 20,
            base_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckSection {
    pub m: usize,
    pub n: usize,
    pub d: usize,
    pub sigma_w2: f64,
    pub seed: u64,
    pub step: f64,
    pub solver_tol: f64,
    pub kink_tol: f64,
    pub rel_tol: f64,
    /// Multiplies `W` after initialization; values making `‖W‖₂ ≥ 1` exercise the error path.
    pub w_scale: f64,
}

impl Default for GradCheckSection {
    fn default() -> Self {
        Self {
            m: 30,
            n: 5,
            d: 8,
            sigma_w2: 0.08,
            seed: 0,
            step: 1e-5,
            solver_tol: 1e-12,
            kink_tol: 1e-7,
            rel_tol: 1e-4,
            w_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub directory: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { directory: "out".into() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub solver: SolverSection,
    pub train: TrainSection,
    pub kernel: KernelSection,
    pub concentration: ConcentrationSection,
    pub grad_check: GradCheckSection,
    pub output: OutputSection,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Parses the right-hand side of an override: a TOML value if it parses as
/// one, a bare string otherwise.
fn parse_override_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, value) = spec.split_once('=').ok_or_else(|| config_err(format!("override {spec:?} is not of the form section.key=value")))?;
    let (section, field) = key
        .trim()
        .split_once('.')
        .ok_or_else(|| config_err(format!("override key {key:?} must be section.key")))?;
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let sect = entry
        .as_table_mut()
        .ok_or_else(|| config_err(format!("{section} is not a table")))?;
    sect.insert(field.to_string(), parse_override_value(value.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Parses a document, applies overrides, validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut table: toml::Table = text.parse().map_err(|e| config_err(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| config_err(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form. The
    /// output directory does not take part: it does not change any result.
    pub fn hash(&self) -> String {
        let canonical = ExperimentConfig {
            output: OutputSection::default(),
            ..self.clone()
        };
        let digest = Sha256::digest(canonical.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn eta(&self) -> Result<Eta, CliError> {
        match &self.train.eta {
            EtaSetting::Value(v) if *v > 0.0 && v.is_finite() => Ok(Eta::Fixed(*v)),
            EtaSetting::Value(v) => Err(config_err(format!("train.eta must be positive, got {v}"))),
            EtaSetting::Keyword(k) if k == "auto" => Ok(Eta::Auto),
            EtaSetting::Keyword(k) => Err(config_err(format!("train.eta must be a number or \"auto\", got {k:?}"))),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let assert_mode = match self.train.assert_mode.as_str() {
            "record" => AssertMode::Record,
            "fail-fast" => AssertMode::FailFast,
            other => return Err(config_err(format!("train.assert_mode must be \"record\" or \"fail-fast\", got {other:?}"))),
        };
        Ok(TrainConfig {
            eta: self.eta()?,
            steps: self.train.steps,
            monitor_every: self.train.monitor_every,
            solver: self.solver.to_solver(),
            assert_mode,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let d = &self.data;
        let need = |p: &Option<PathBuf>, key: &str| -> Result<(), CliError> {
            match p {
                None => Err(config_err(format!("data.{key} is required for data.kind = {:?}", d.kind))),
                Some(path) if !path.exists() => Err(config_err(format!("data.{key}: {} does not exist", path.display()))),
                Some(_) => Ok(()),
            }
        };
        match d.kind {
            DataKind::Synthetic => {
                if d.n == 0 || d.d < 2 {
                    return Err(config_err(format!("synthetic data needs n >= 1 and d >= 2, got n={}, d={}", d.n, d.d)));
                }
            }
            DataKind::Csv => {
                need(&d.x_path, "x_path")?;
                need(&d.y_path, "y_path")?;
            }
            DataKind::Mnist => {
                need(&d.images_path, "images_path")?;
                need(&d.labels_path, "labels_path")?;
            }
            DataKind::Cifar10 => need(&d.batch_path, "batch_path")?,
        }
        if matches!(d.kind, DataKind::Mnist | DataKind::Cifar10) && (d.classes[0] == d.classes[1] || d.per_class == 0) {
            return Err(config_err("data.classes must be two distinct labels and data.per_class >= 1"));
        }

        let m = &self.model;
        if m.m == 0 {
            return Err(config_err("model.m must be at least 1"));
        }
        if !(m.sigma_w2 > 0.0 && m.sigma_w2 < SIGMA_W2_MAX) {
            return Err(config_err(format!("model.sigma_w2 must lie in (0, 1/8), got {}", m.sigma_w2)));
        }
        self.solver.to_solver().validate().map_err(|e| config_err(format!("solver: {e}")))?;
        self.train_config()?.validate().map_err(|e| config_err(format!("train: {e}")))?;
        if self.train.checkpoint_every == Some(0) {
            return Err(config_err("train.checkpoint_every must be at least 1"));
        }
        if let Some(p) = &self.train.resume_from {
            if !p.exists() {
                return Err(config_err(format!("train.resume_from: {} does not exist", p.display())));
            }
        }

        let k = &self.kernel;
        if k.l_max == 0 || !(k.tol > 0.0) || !(k.width_constant > 0.0) || !(k.depth_constant > 0.0) {
            return Err(config_err("kernel: l_max >= 1 and positive tol and constants are required"));
        }
        if !(k.failure_prob > 0.0 && k.failure_prob < 1.0) {
            return Err(config_err(format!("kernel.failure_prob must lie in (0, 1), got {}", k.failure_prob)));
        }

        let c = &self.concentration;
        if c.m_list.is_empty() {
            return Err(config_err("concentration.m_list must not be empty"));
        }
        if c.m_list.contains(&0) || c.m_list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config_err(format!("concentration.m_list must be positive and strictly ascending, got {:?}", c.m_list)));
        }
        if c.l == 0 || c.l_max == 0 {
            return Err(config_err("concentration.l and concentration.l_max must be at least 1"));
        }
        if c.trials < deq_core::lab::MIN_TRIALS {
            return Err(config_err(format!("concentration.trials must be at least {}", deq_core::lab::MIN_TRIALS)));
        }
        if let Some(bad) = c.experiments.iter().find(|e| !EXPERIMENTS.contains(&e.as_str())) {
            return Err(config_err(format!("unknown concentration experiment {bad:?}; choose from {EXPERIMENTS:?}")));
        }

        let g = &self.grad_check;
        if g.m == 0 || g.n == 0 || g.d < 2 || !(g.step > 0.0) || !(g.rel_tol > 0.0) || !(g.solver_tol > 0.0) || !(g.kink_tol >= 0.0) {
            return Err(config_err("grad_check: sizes must be positive and tolerances positive"));
        }
        if !(g.sigma_w2 > 0.0 && g.sigma_w2 < SIGMA_W2_MAX) {
            return Err(config_err(format!("grad_check.sigma_w2 must lie in (0, 1/8), got {}", g.sigma_w2)));
        }
        if !(g.w_scale.is_finite()) {
            return Err(config_err("grad_check.w_scale must be finite"));
        }
        Ok(())
    }
}
