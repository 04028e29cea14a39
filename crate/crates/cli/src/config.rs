//! The run configuration: one JSON file covering every subcommand, with
//! command-line flags taking precedence over file values.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sketchret_core::data::{FeatureRecord, Split, SyntheticSpec};
use sketchret_core::retrieval::EvalOptions;
use sketchret_core::semantics::{CombinerConfig, HierarchyMeasure};
use sketchret_core::trainer::TrainConfig;

use crate::CliError;

/// Semantic-table construction settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    pub measure: HierarchyMeasure,
    pub combiner: CombinerConfig,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            measure: HierarchyMeasure::Path,
            combiner: CombinerConfig::default(),
        }
    }
}

/// Input/output locations. Unset entries resolve to default file names
/// under the output directory.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub features: Option<PathBuf>,
    pub taxonomy: Option<PathBuf>,
    pub text_embeddings: Option<PathBuf>,
    pub text_embeddings_alt: Option<PathBuf>,
    pub semantic_table: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub train_log: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub synthetic: SyntheticSpec,
    pub embed: EmbedConfig,
    pub metric: EvalOptions,
    pub paths: PathsConfig,
    /// Empty means: derive the unseen classes from the feature file's
    /// split column (classes that only occur in test records).
    pub unseen_classes: Vec<String>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }
}

/// Resolves a configured path or falls back to `out_dir/name`.
pub fn resolve(configured: &Option<PathBuf>, out_dir: &Path, name: &str) -> PathBuf {
    configured.clone().unwrap_or_else(|| out_dir.join(name))
}

pub fn require_input(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingInput(path.to_path_buf()))
    }
}

/// Unseen classes: the configured list, or the classes appearing only in
/// test-split records when the list is empty.
pub fn unseen_classes(config: &RunConfig, records: &[FeatureRecord]) -> Result<BTreeSet<String>, CliError> {
    if !config.unseen_classes.is_empty() {
        return Ok(config.unseen_classes.iter().cloned().collect());
    }
    let mut seen_in_train = BTreeSet::new();
    let mut all = BTreeSet::new();
    for r in records {
        all.insert(r.class.clone());
        if r.split == Split::Train {
            seen_in_train.insert(r.class.clone());
        }
    }
    let derived: BTreeSet<String> = all.difference(&seen_in_train).cloned().collect();
    if derived.is_empty() {
        return Err(CliError::Config(
            "unseen_classes is empty and no class is test-only; configure unseen_classes explicitly".into(),
        ));
    }
    Ok(derived)
}
