//! Experiment configuration files.
//!
//! A config is TOML. The `model` and `hardware` tables name a preset and
//! may override any of its fields; nested tables merge key by key.
//!
//! ```toml
//! [model]
//! preset = "qwen3-30b-a3b"
//!
//! [hardware]
//! preset = "qwen3-30b-a3b"
//! dram = { kind = "ssd" }
//!
//! [trace.generate]
//! seed = 7
//! n_tokens = 8192
//!
//! [run]
//! method = "c"
//! seq_len = 256
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::hwmodel::{DramKind, HardwareSpec};
use crate::model::ModelSpec;
use crate::placement::AllocationMode;
use crate::sim::{RunConfig, SweepSpec};
use crate::trace::{generate_trace, read_trace, RoutingTrace, TraceError, TraceGenConfig};

/// Environment variable that overrides the configured output directory.
pub const OUT_DIR_ENV: &str = "MOECHIP_OUT_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceSource {
    Generate(TraceGenConfig),
    File(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            other => Err(format!("unknown format `{other}` (expected json or csv)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlacementConfig {
    pub allocation: AllocationMode,
    /// Directory of saved per-layer layouts to use instead of placing.
    pub layout_dir: Option<PathBuf>,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        PlacementConfig {
            allocation: AllocationMode::Exact,
            layout_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub formats: Vec<Format>,
    /// Also write the event timeline of `simulate` as CSV.
    pub timeline: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("out"),
            formats: vec![Format::Json, Format::Csv],
            timeline: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub hardware: HardwareSpec,
    pub trace: TraceSource,
    pub run: RunConfig,
    pub placement: PlacementConfig,
    pub sweep: SweepSpec,
    pub output: OutputConfig,
}

const SECTIONS: [&str; 7] = [
    "model",
    "hardware",
    "trace",
    "run",
    "placement",
    "sweep",
    "output",
];

/// Recursively overlays `over` onto `base`.
pub fn deep_merge(base: &mut Table, over: &Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => deep_merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

fn decode<T: DeserializeOwned>(section: &str, table: Table) -> Result<T, ConfigError> {
    Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| invalid(format!("[{section}]: {}", e.message())))
}

fn table_of(root: &Table, key: &str) -> Result<Option<Table>, ConfigError> {
    match root.get(key) {
        None => Ok(None),
        Some(Value::Table(t)) => Ok(Some(t.clone())),
        Some(_) => Err(invalid(format!("`{key}` must be a table"))),
    }
}

/// Splits off `preset = "..."` and merges the rest over that preset.
fn with_preset<T: Serialize + DeserializeOwned>(
    section: &str,
    mut table: Table,
    fallback: Option<&str>,
    preset: impl Fn(&str) -> Result<T, String>,
) -> Result<T, ConfigError> {
    let name = match table.remove("preset") {
        Some(Value::String(s)) => Some(s),
        Some(_) => return Err(invalid(format!("[{section}] preset must be a string"))),
        None => fallback.map(str::to_string),
    };
    match name {
        Some(name) => {
            let base = preset(&name).map_err(|e| invalid(format!("[{section}]: {e}")))?;
            let mut merged = match Value::try_from(&base) {
                Ok(Value::Table(t)) => t,
                _ => unreachable!("presets serialize to tables"),
            };
            deep_merge(&mut merged, &table);
            decode(section, merged)
        }
        None => decode(section, table),
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    /// Parses config text; relative paths inside resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let root: Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Parse {
                path: "<text>".into(),
                message: e.to_string(),
            })?;
        if let Some(k) = root.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            return Err(invalid(format!(
                "unknown section `{k}` (expected one of {})",
                SECTIONS.join(", ")
            )));
        }

        let model_table =
            table_of(&root, "model")?.ok_or_else(|| invalid("missing [model] section"))?;
        let model_preset = match model_table.get("preset") {
            Some(Value::String(s)) => Some(s.clone()),
            _ => None,
        };
        let model: ModelSpec = with_preset("model", model_table, None, |n| {
            ModelSpec::preset(n).map_err(|e| e.to_string())
        })?;
        model
            .validate()
            .map_err(|e| invalid(format!("[model]: {e}")))?;

        let hw_table = table_of(&root, "hardware")?.unwrap_or_default();
        let fallback = if hw_table.contains_key("preset") {
            None
        } else {
            model_preset
                .as_deref()
                .filter(|n| HardwareSpec::preset_names().contains(n))
        };
        if fallback.is_none() && !hw_table.contains_key("preset") && hw_table.is_empty() {
            return Err(invalid(
                "missing [hardware] section (no preset matches the model)",
            ));
        }
        let kind_only = match hw_table.get("dram") {
            Some(Value::Table(d)) => {
                d.contains_key("kind") && !d.contains_key("bandwidth_bytes_per_s")
            }
            _ => false,
        };
        let mut hardware: HardwareSpec = with_preset("hardware", hw_table, fallback, |n| {
            HardwareSpec::preset(n).map_err(|e| e.to_string())
        })?;
        if kind_only {
            hardware.dram.bandwidth_bytes_per_s = hardware.dram.kind.default_bandwidth();
        }
        hardware
            .validate()
            .map_err(|e| invalid(format!("[hardware]: {e}")))?;

        let trace = Self::parse_trace(table_of(&root, "trace")?, base_dir)?;
        let run: RunConfig = decode("run", table_of(&root, "run")?.unwrap_or_default())?;
        run.validate().map_err(|e| invalid(e.to_string()))?;
        let mut placement: PlacementConfig = decode(
            "placement",
            table_of(&root, "placement")?.unwrap_or_default(),
        )?;
        if let Some(dir) = placement.layout_dir.as_mut() {
            if dir.is_relative() {
                *dir = base_dir.join(&*dir);
            }
        }
        let sweep: SweepSpec = decode("sweep", table_of(&root, "sweep")?.unwrap_or_default())?;
        if sweep.seq_lens.is_empty() || sweep.drams.is_empty() || sweep.methods.is_empty() {
            return Err(invalid(
                "[sweep]: seq_lens, drams and methods must be non-empty",
            ));
        }
        if sweep.seq_lens.contains(&0) {
            return Err(invalid("[sweep]: seq_lens must be positive"));
        }
        let mut output: OutputConfig =
            decode("output", table_of(&root, "output")?.unwrap_or_default())?;
        if output.dir.is_relative() {
            output.dir = base_dir.join(&output.dir);
        }

        Ok(ExperimentConfig {
            model,
            hardware,
            trace,
            run,
            placement,
            sweep,
            output,
        })
    }

    fn parse_trace(table: Option<Table>, base_dir: &Path) -> Result<TraceSource, ConfigError> {
        let mut t = table.ok_or_else(|| invalid("missing [trace] section"))?;
        let generate = t.remove("generate");
        let file = t.remove("file");
        if let Some(k) = t.keys().next() {
            return Err(invalid(format!(
                "[trace]: unknown key `{k}` (expected `generate` or `file`)"
            )));
        }
        match (generate, file) {
            (Some(Value::Table(g)), None) => {
                let cfg: TraceGenConfig = decode("trace.generate", g)?;
                cfg.validate()
                    .map_err(|e| invalid(format!("[trace.generate]: {e}")))?;
                Ok(TraceSource::Generate(cfg))
            }
            (None, Some(Value::String(p))) => {
                let p = PathBuf::from(p);
                Ok(TraceSource::File(if p.is_relative() {
                    base_dir.join(p)
                } else {
                    p
                }))
            }
            (Some(_), Some(_)) => Err(invalid("[trace]: give exactly one of `generate` or `file`")),
            (None, None) => Err(invalid("[trace]: give one of `generate` or `file`")),
            _ => Err(invalid(
                "[trace]: `generate` must be a table and `file` a string",
            )),
        }
    }

    /// Replaces the generator seed (no effect for trace files).
    pub fn set_seed(&mut self, seed: u64) {
        if let TraceSource::Generate(cfg) = &mut self.trace {
            cfg.seed = seed;
        }
    }

    /// Switches memory technology, resetting bandwidth to its default.
    pub fn set_dram(&mut self, kind: DramKind) {
        self.hardware = self.hardware.clone().with_dram(kind);
    }

    /// Generates or reads the routing trace and checks it against the model.
    pub fn load_trace(&self) -> Result<RoutingTrace, TraceError> {
        let trace = match &self.trace {
            TraceSource::Generate(cfg) => generate_trace(&self.model, cfg)?,
            TraceSource::File(p) => read_trace(p)?,
        };
        trace.check_model(&self.model)?;
        Ok(trace)
    }
}
