//! Optional TOML run configuration. Command-line flags take precedence.
//!
//! ```toml
//! workers = 4
//! lenient = false
//!
//! [frequency]
//! threshold = 0.7
//!
//! [trend]
//! bins = 20
//!
//! [curate]
//! outlier_fraction = 0.05
//! phash_hamming_threshold = 10
//! ```

use std::path::Path;

use anyhow::{Context, Result};
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub workers: Option<usize>,
    pub lenient: Option<bool>,
    #[serde(default)]
    pub frequency: ThresholdSection,
    #[serde(default)]
    pub misalignment: ThresholdSection,
    #[serde(default)]
    pub trend: TrendSection,
    #[serde(default)]
    pub tail: TailSection,
    #[serde(default)]
    pub curate: CurateSection,
    #[serde(default)]
    pub cmc: CmcSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdSection {
    pub threshold: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrendSection {
    pub bins: Option<usize>,
    pub field: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TailSection {
    pub k: Option<usize>,
    pub field: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurateSection {
    pub outlier_fraction: Option<f64>,
    pub dedup_threshold_common: Option<f64>,
    pub dedup_threshold_finegrained: Option<f64>,
    pub phash_hamming_threshold: Option<u32>,
    pub target_per_class: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CmcSection {
    pub k: Option<Vec<usize>>,
}

pub fn load(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}
