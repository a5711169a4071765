use std::fs;
use std::path::{Path, PathBuf};

use blindtrace_core::defenses::DefenseConfig;
use blindtrace_core::generator::AttackConfig;
use blindtrace_core::models::{Arch, ArchParams, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;
pub const OUT_ENV: &str = "BLINDTRACE_OUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Data,
    Model,
    Attack,
    Eval,
    Defense,
    Transfer,
    Sweep,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Self::Data => "data",
            Self::Model => "model",
            Self::Attack => "attack",
            Self::Eval => "eval",
            Self::Defense => "defense",
            Self::Transfer => "transfer",
            Self::Sweep => "sweep",
        }
    }

    /// Tag mixed into the global seed for this stage.
    pub fn seed_tag(self) -> u64 {
        self as u64 + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Flows,
    Pairs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Trace file to load instead of synthesising flows.
    pub input: Option<PathBuf>,
    pub classes: usize,
    pub per_class: usize,
    pub length_min: usize,
    pub length_max: usize,
    pub fixed_length: usize,
    pub validation: f64,
    pub test: f64,
    pub connections: usize,
    pub negatives: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::Flows,
            input: None,
            classes: 10,
            per_class: 200,
            length_min: 300,
            length_max: 700,
            fixed_length: 500,
            validation: 0.15,
            test: 0.25,
            connections: 800,
            negatives: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub train: TrainConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::DirectionCnn,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub trigger_seed: u64,
    /// False-positive rates reported for pair scorers.
    pub fp_grid: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            trigger_seed: 0,
            fp_grid: vec![1e-3, 1e-2, 1e-1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    /// Architecture of the independently trained original model.
    pub arch: Arch,
    pub params: Option<ArchParams>,
    /// Injection budgets as fractions of the input length.
    pub fractions: Vec<f64>,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            arch: Arch::DirectionCnn,
            params: None,
            fractions: vec![0.02, 0.1, 0.2],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Attack parameter to vary, as a dotted path (`timing.sigma`) or one
    /// of the aliases `alpha`, `sigma`, `mu`.
    pub axis: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    /// Output directory, resolved against `$BLINDTRACE_OUT` when relative.
    pub output: PathBuf,
    pub stages: Vec<Stage>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub attack: AttackConfig,
    pub eval: EvalConfig,
    pub defense: DefenseConfig,
    pub transfer: TransferConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            output: PathBuf::from("blindtrace-out"),
            stages: vec![Stage::Data, Stage::Model, Stage::Attack, Stage::Eval],
            data: DataConfig::default(),
            model: ModelConfig::default(),
            attack: AttackConfig::default(),
            eval: EvalConfig::default(),
            defense: DefenseConfig::default(),
            transfer: TransferConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `dotted.key = value` in a TOML table, creating tables as needed.
pub fn set_path(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Validation(format!("override `{assignment}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Validation(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Validation(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Reads `path` (or starts from defaults), applies `key=value`
    /// overrides and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            set_path(&mut table, o)?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Validation(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Validation(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("config version {} is not supported (expected {CONFIG_VERSION})", self.version));
        }
        if self.stages.windows(2).any(|w| w[0] >= w[1]) {
            let names: Vec<&str> = self.stages.iter().map(|s| s.name()).collect();
            return bad(format!(
                "stages [{}] must be distinct and ordered data, model, attack, eval, defense, transfer, sweep",
                names.join(", ")
            ));
        }
        let d = &self.data;
        if d.fixed_length == 0 {
            return bad("data.fixed_length must be positive".into());
        }
        if d.length_min == 0 || d.length_min > d.length_max {
            return bad("data.length_min must be in 1..=length_max".into());
        }
        if !(d.validation > 0.0 && d.test > 0.0 && d.validation + d.test < 1.0) {
            return bad("data.validation and data.test must be positive and sum below 1".into());
        }
        match d.kind {
            DataKind::Flows if d.input.is_none() && (d.classes < 2 || d.per_class < 2) => {
                return bad("data needs at least 2 classes and 2 traces per class".into())
            }
            DataKind::Pairs if d.input.is_some() => return bad("data.input is only supported for flows".into()),
            DataKind::Pairs if d.connections < 8 || d.negatives == 0 => {
                return bad("pair data needs at least 8 connections and 1 negative per flow".into())
            }
            _ => {}
        }
        if (d.kind == DataKind::Pairs) != self.model.arch.is_pair() {
            return bad(format!("model.arch {} does not match data.kind", self.model.arch));
        }
        if self.eval.fp_grid.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return bad("eval.fp_grid entries must lie in (0, 1)".into());
        }
        if self.transfer.fractions.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return bad("transfer.fractions entries must lie in (0, 1)".into());
        }
        Ok(())
    }

    /// Output directory after applying `$BLINDTRACE_OUT`.
    pub fn output_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_ENV) {
            Some(root) if self.output.is_relative() => PathBuf::from(root).join(&self.output),
            _ => self.output.clone(),
        }
    }
}
