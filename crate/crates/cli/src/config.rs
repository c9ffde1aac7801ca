//! Layered run configuration: built-in defaults, then a TOML file, then
//! `--set key=value` overrides, then `--seed`.

use std::fs;
use std::path::Path;

use toml::{Table, Value};
use vqlab::experiment::ExperimentConfig;

use crate::CliError;

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(value.to_string()))
}

/// Applies one dotted `key=value` override to `root`.
pub fn apply_override(root: &mut Table, assignment: &str) -> Result<(), CliError> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override {assignment:?} has an empty key segment")));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut table = root;
    for (i, part) in parents.iter().enumerate() {
        let entry = table.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {key}: {} is not a table", parts[..=i].join("."))))?;
    }
    table.insert(last.to_string(), parse_value(value.trim()));
    Ok(())
}

/// Resolves the run configuration. Unknown keys are rejected with their
/// dotted path.
pub fn resolve(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let mut root = match file {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
            toml::from_str::<Table>(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => Table::new(),
    };
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(Value::Table(root)).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner().to_string();
        let message = inner.lines().next().unwrap_or_default().to_string();
        if path == "." {
            CliError::Config(message)
        } else {
            CliError::Config(format!("{path}: {message}"))
        }
    })?;
    if let Some(seed) = seed {
        cfg.synthgen.seed = seed;
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn to_toml(cfg: &ExperimentConfig) -> Result<String, CliError> {
    toml::to_string(cfg).map_err(|e| CliError::Config(format!("cannot serialize the resolved config: {e}")))
}
