//! Pipeline configuration file: JSON defaults that individual flags
//! override. Flags always win.

use crate::error::CliError;
use serde::Deserialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub template: Option<PathBuf>,
    pub camera: Option<PathBuf>,
    pub views: Option<usize>,
    pub samples_per_edge: Option<usize>,
    pub margin: Option<f64>,
    /// Structure-aware loss width; part of the config contract for
    /// external estimator heads, not consumed by the built-in commands.
    #[allow(dead_code)]
    pub sigma: Option<f64>,
    pub bins: Option<usize>,
    pub az_step: Option<f64>,
    pub elevations: Option<Vec<f64>>,
    pub tilts: Option<Vec<f64>>,
    pub seed: Option<u64>,
    pub dim: Option<usize>,
    pub noise: Option<f64>,
    pub negatives: Option<usize>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::usage(format!("cannot read config {}: {e}", path.display()))
        })?;
        let config: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::format(format!("config {}: {e}", path.display())))?;
        for referenced in [&config.template, &config.camera].into_iter().flatten() {
            if !referenced.exists() {
                return Err(CliError::usage(format!(
                    "config references missing file {}",
                    referenced.display()
                )));
            }
        }
        Ok(config)
    }
}

/// Flag-over-config-over-default resolution.
pub fn resolve<T: Clone>(flag: Option<T>, config: Option<T>, default: T) -> T {
    flag.or(config).unwrap_or(default)
}

/// Flag-over-config resolution for values without a default.
pub fn resolve_required<T: Clone>(
    flag: Option<T>,
    config: Option<T>,
    name: &str,
) -> Result<T, CliError> {
    flag.or(config)
        .ok_or_else(|| CliError::usage(format!("missing required option --{name}")))
}
