use std::path::Path;

use ebsa_core::ebsa::SolverConfig;

use crate::args::ParamFlags;
use crate::CliError;

/// Parses a flat `key = value` file. Blank lines and `#` comments are
/// skipped; keys are the flag names without the leading dashes.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected `key = value`", n + 1)))?;
        out.push((k.trim().trim_start_matches("--").to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Defaults, then the config file, then flags.
pub fn build_config(file: Option<&Path>, flags: &ParamFlags) -> Result<SolverConfig, CliError> {
    let mut cfg = SolverConfig::default();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        for (k, v) in parse_config_text(&text)? {
            cfg.set(&k, &v).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        }
    }
    for (k, v) in flags.pairs() {
        cfg.set(k, v).map_err(|e| CliError::Usage(format!("--{}: {e}", k.replace('_', "-"))))?;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}
