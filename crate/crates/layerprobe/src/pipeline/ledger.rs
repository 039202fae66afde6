//! The run ledger: one cell per (model, language, task, layer, seed, variant)
//! probe training, with idempotent planning against completed artifacts.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{sanitize_component, ExperimentConfig};
use super::PipelineError;
use crate::metrics::TaskType;

/// What a cell measures: the linguistic task itself, its control relabeling,
/// or a random-baseline encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Task,
    Control,
    Baseline,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Task => "task",
            Variant::Control => "control",
            Variant::Baseline => "baseline",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub model: String,
    pub language: String,
    pub task: TaskType,
    pub layer: usize,
    pub seed: u64,
    pub variant: Variant,
}

impl CellKey {
    pub fn fragment_file_name(&self) -> String {
        format!(
            "{}__{}__{}__{}__L{:02}__s{}.json",
            sanitize_component(&self.model),
            sanitize_component(&self.language),
            self.task,
            self.variant,
            self.layer,
            self.seed
        )
    }

    pub fn fragment_path(&self, output_dir: &Path) -> PathBuf {
        output_dir.join("cells").join(self.fragment_file_name())
    }
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, layer {}, seed {}, {})",
            self.model, self.language, self.task, self.layer, self.seed, self.variant
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Pending,
    Cached,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellState {
    pub status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<u64>,
}

/// The result fragment a completed cell leaves on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFragment {
    pub cell: CellKey,
    pub config_hash: String,
    /// `accuracy` or `span_f1`, depending on task and variant.
    pub metric_kind: String,
    pub metric: f64,
    pub selected_epoch: usize,
    pub epochs_run: usize,
    pub toolkit_version: String,
}

impl CellFragment {
    /// Reads a fragment, returning `None` when it is missing, unparsable, or
    /// from a different config.
    pub fn read_valid(path: &Path, config_hash: &str) -> Option<CellFragment> {
        let text = std::fs::read_to_string(path).ok()?;
        let fragment: CellFragment = serde_json::from_str(&text).ok()?;
        (fragment.config_hash == config_hash).then_some(fragment)
    }

    /// Atomic write: fragments never exist half-written.
    pub fn write(&self, path: &Path) -> Result<(), PipelineError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let json = crate::metrics::to_canonical_json(self)?;
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, json)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}

/// Planned cells with their statuses.
#[derive(Debug, Clone)]
pub struct RunLedger {
    pub cells: BTreeMap<CellKey, CellState>,
    pub config_hash: String,
}

impl RunLedger {
    pub fn count(&self, status: CellStatus) -> usize {
        self.cells.values().filter(|s| s.status == status).count()
    }

    pub fn pending(&self) -> Vec<CellKey> {
        self.cells
            .iter()
            .filter(|(_, s)| s.status == CellStatus::Pending)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn failed(&self) -> Vec<CellKey> {
        self.cells
            .iter()
            .filter(|(_, s)| s.status == CellStatus::Failed)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn mark(&mut self, key: &CellKey, status: CellStatus, diagnostics: Option<String>) {
        self.mark_timed(key, status, diagnostics, None);
    }

    pub fn mark_timed(
        &mut self,
        key: &CellKey,
        status: CellStatus,
        diagnostics: Option<String>,
        elapsed_ms: Option<u64>,
    ) {
        if let Some(state) = self.cells.get_mut(key) {
            state.status = status;
            state.diagnostics = diagnostics;
            state.elapsed_ms = elapsed_ms;
        }
    }
}

/// Enumerates every probe cell the config implies, marking cells whose valid
/// fragment already exists as `cached`. Planning twice over the same outputs
/// is idempotent.
pub fn plan(config: &ExperimentConfig) -> Result<RunLedger, PipelineError> {
    config.validate()?;
    let config_hash = config.config_hash();
    let mut cells = BTreeMap::new();
    for model in &config.models {
        let layers = config.layers_for(model);
        for language in &config.languages {
            for &task in &config.tasks {
                let mut push = |layer: usize, seed: u64, variant: Variant| {
                    cells.insert(
                        CellKey {
                            model: model.id.clone(),
                            language: language.clone(),
                            task,
                            layer,
                            seed,
                            variant,
                        },
                        CellState {
                            status: CellStatus::Pending,
                            diagnostics: None,
                            elapsed_ms: None,
                        },
                    );
                };
                let baseline = config.baseline_kind(task);
                for &seed in &config.seeds {
                    for &layer in &layers {
                        push(layer, seed, Variant::Task);
                        if task == TaskType::Pos {
                            push(layer, seed, Variant::Control);
                        }
                        if baseline == Some(crate::pipeline::BaselineKind::Reinit) {
                            push(layer, seed, Variant::Baseline);
                        }
                    }
                    if baseline == Some(crate::pipeline::BaselineKind::Randctx) {
                        // The random contextual encoder has a single
                        // contextual layer.
                        push(1, seed, Variant::Baseline);
                    }
                }
            }
        }
    }

    let mut ledger = RunLedger { cells, config_hash };
    for (key, state) in ledger.cells.iter_mut() {
        let path = key.fragment_path(&config.output_dir);
        if CellFragment::read_valid(&path, &ledger.config_hash).is_some() {
            state.status = CellStatus::Cached;
        }
    }
    Ok(ledger)
}
