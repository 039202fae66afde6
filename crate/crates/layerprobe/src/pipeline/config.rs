//! Experiment configuration: a single TOML tree covering models, languages,
//! tasks, dataset paths, layers, seeds, probe training, and control settings.
//!
//! Relative paths in the file resolve against the config file's directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::baselines::ModelRegistry;
use crate::corpus::Scope;
use crate::extraction::{
    ChunkTokenizer, EncoderKind, PoolingStrategy, SubwordTokenizer, TransformerConfig,
    TransformerEncoder,
};
use crate::metrics::{Coverage, TaskType};
use crate::probe::{ProbeConfig, TrainingHyperparams, DEFAULT_HIDDEN_DIM};

/// Environment variable naming the directory relative model weights paths
/// resolve against.
pub const MODEL_ROOT_ENV: &str = "LAYERPROBE_MODEL_ROOT";

/// Which layers to sweep: every layer the encoder has (embedding output
/// included), or an explicit contiguous prefix `[0, 1, ..., k]`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum LayerSelection {
    #[default]
    All,
    Explicit(Vec<usize>),
}

impl Serialize for LayerSelection {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            LayerSelection::All => serializer.serialize_str("all"),
            LayerSelection::Explicit(layers) => layers.serialize(serializer),
        }
    }
}

impl<'de> Deserialize<'de> for LayerSelection {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            List(Vec<usize>),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Text(s) if s == "all" => Ok(LayerSelection::All),
            Raw::Text(s) => Err(serde::de::Error::custom(format!(
                "layers must be \"all\" or a list of indices, got {s:?}"
            ))),
            Raw::List(layers) => Ok(LayerSelection::Explicit(layers)),
        }
    }
}

/// Where a model's weights come from.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSource {
    /// Weights sampled by the architecture's native scheme under this seed.
    RandomInit { seed: u64 },
    /// Weights loaded from a file written by `save_weights`.
    WeightsFile { path: PathBuf },
}

fn default_heads() -> usize {
    2
}
fn default_max_len() -> usize {
    512
}
fn default_vocab() -> usize {
    4096
}
fn default_chunk_len() -> usize {
    3
}

/// One probed model: architecture dimensions, weight source, tokenizer
/// settings, and per-language coverage annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub id: String,
    pub layers: usize,
    pub hidden: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_max_len")]
    pub max_sequence_length: usize,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    /// Seed for random initialization; ignored when `weights` is set.
    #[serde(default)]
    pub seed: u64,
    /// Path to a weights file; when present the model is `pretrained`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    #[serde(default = "default_chunk_len")]
    pub chunk_len: usize,
    /// Language coverage legend entries echoed into the aggregate table.
    #[serde(default)]
    pub coverage: BTreeMap<String, Coverage>,
}

impl ModelSpec {
    pub fn source(&self) -> ModelSource {
        match &self.weights {
            Some(path) => ModelSource::WeightsFile { path: path.clone() },
            None => ModelSource::RandomInit { seed: self.seed },
        }
    }

    pub fn architecture(&self) -> TransformerConfig {
        TransformerConfig::new(self.layers, self.hidden, self.heads)
            .with_max_sequence_length(self.max_sequence_length)
            .with_vocab_size(self.vocab_size)
    }

    pub fn tokenizer(&self) -> ChunkTokenizer {
        ChunkTokenizer::new(self.chunk_len, self.vocab_size)
    }

    pub fn tokenizer_id(&self) -> String {
        self.tokenizer().tokenizer_id().to_string()
    }

    /// Builds the encoder this spec describes.
    pub fn build_encoder(&self) -> Result<TransformerEncoder, PipelineError> {
        let encoder = match self.source() {
            ModelSource::RandomInit { seed } => TransformerEncoder::random(
                self.id.clone(),
                self.architecture(),
                Box::new(self.tokenizer()),
                seed,
                EncoderKind::Reinitialized,
            )?,
            ModelSource::WeightsFile { path } => TransformerEncoder::from_weights_file(
                self.id.clone(),
                path,
                Box::new(self.tokenizer()),
            )?,
        };
        Ok(encoder)
    }
}

fn default_learning_rate() -> f64 {
    1e-3
}
fn default_batch_size() -> usize {
    64
}
fn default_max_epochs() -> usize {
    50
}
fn default_patience() -> usize {
    5
}
fn default_hidden_dim() -> usize {
    DEFAULT_HIDDEN_DIM
}

/// Probe training settings (seeds come from the sweep).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSettings {
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub l2_weight: f64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings {
            hidden_dim: default_hidden_dim(),
            learning_rate: default_learning_rate(),
            batch_size: default_batch_size(),
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            l2_weight: 0.0,
        }
    }
}

impl ProbeSettings {
    /// Fills a [`ProbeConfig`] for one probe training cell.
    pub fn probe_config(&self, input_dim: usize, num_classes: usize, seed: u64) -> ProbeConfig {
        ProbeConfig::new(input_dim, num_classes)
            .with_hidden_dim(self.hidden_dim)
            .with_training(TrainingHyperparams {
                learning_rate: self.learning_rate,
                batch_size: self.batch_size,
                max_epochs: self.max_epochs,
                patience: self.patience,
                seed,
                l2_weight: self.l2_weight,
            })
    }
}

/// Which random baseline contextualizes a task's probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// The probed architecture with freshly sampled weights, per layer.
    Reinit,
    /// The untrained bidirectional recurrent encoder (one layer).
    Randctx,
}

/// Per-task baseline choices. Defaults mirror the standard pairing
/// (re-initialization for NER, random contextual for NTC); overriding them
/// crosses the baselines for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineSettings {
    #[serde(default = "default_ner_baseline")]
    pub ner: BaselineKind,
    #[serde(default = "default_ntc_baseline")]
    pub ntc: BaselineKind,
}

fn default_ner_baseline() -> BaselineKind {
    BaselineKind::Reinit
}
fn default_ntc_baseline() -> BaselineKind {
    BaselineKind::Randctx
}

impl Default for BaselineSettings {
    fn default() -> Self {
        BaselineSettings {
            ner: default_ner_baseline(),
            ntc: default_ntc_baseline(),
        }
    }
}

fn default_scope() -> Scope {
    Scope::FullDataset
}

/// Control-task settings for token-level probing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSettings {
    #[serde(default = "default_scope")]
    pub scope: Scope,
    /// Mapping seeds, paired index-wise with the sweep seeds; defaults to the
    /// sweep seeds themselves.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
}

impl Default for ControlSettings {
    fn default() -> Self {
        ControlSettings {
            scope: default_scope(),
            seeds: None,
        }
    }
}

fn default_pooling() -> PoolingStrategy {
    PoolingStrategy::FirstSubword
}

/// The experiment sweep definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    #[serde(default = "default_pooling")]
    pub pooling: PoolingStrategy,
    #[serde(default)]
    pub layers: LayerSelection,
    pub seeds: Vec<u64>,
    pub tasks: Vec<TaskType>,
    pub languages: Vec<String>,
    #[serde(default)]
    pub probe: ProbeSettings,
    #[serde(default)]
    pub control: ControlSettings,
    #[serde(default)]
    pub baselines: BaselineSettings,
    pub models: Vec<ModelSpec>,
    /// `datasets.<language>.<task> = <path>`.
    pub datasets: BTreeMap<String, BTreeMap<TaskType, PathBuf>>,
}

impl ExperimentConfig {
    /// Parses a TOML config file, resolving relative paths against its
    /// directory, and validates it.
    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentConfig, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::ConfigFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut config: ExperimentConfig =
            toml::from_str(&text).map_err(|e| PipelineError::ConfigFile {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut self.output_dir);
        // Relative weights paths resolve against the model repository root
        // when `LAYERPROBE_MODEL_ROOT` is set, else against the config dir.
        let model_root = std::env::var_os(MODEL_ROOT_ENV).map(PathBuf::from);
        for model in &mut self.models {
            if let Some(w) = &mut model.weights {
                if w.is_relative() {
                    match &model_root {
                        Some(root) => *w = root.join(&*w),
                        None => resolve(w),
                    }
                }
            }
        }
        for tasks in self.datasets.values_mut() {
            for path in tasks.values_mut() {
                resolve(path);
            }
        }
    }

    /// Validates the whole tree, reporting every violation at once.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let mut violations = Vec::new();
        if self.seeds.is_empty() {
            violations.push("seeds must be non-empty".to_string());
        }
        if self.tasks.is_empty() {
            violations.push("tasks must be non-empty".to_string());
        }
        if self.languages.is_empty() {
            violations.push("languages must be non-empty".to_string());
        }
        if self.models.is_empty() {
            violations.push("models must be non-empty".to_string());
        }
        let mut ids = BTreeSet::new();
        for model in &self.models {
            if !ids.insert(&model.id) {
                violations.push(format!("duplicate model id {:?}", model.id));
            }
            if model.layers < 1 || model.hidden < 1 {
                violations.push(format!(
                    "model {:?}: layers and hidden must be at least 1",
                    model.id
                ));
            }
            if model.heads == 0 || model.hidden % model.heads.max(1) != 0 {
                violations.push(format!(
                    "model {:?}: hidden {} must divide evenly into {} heads",
                    model.id, model.hidden, model.heads
                ));
            }
            if model.max_sequence_length < 3 {
                violations.push(format!(
                    "model {:?}: max_sequence_length must be at least 3",
                    model.id
                ));
            }
            if let Some(weights) = &model.weights {
                if !weights.is_file() {
                    violations.push(format!(
                        "model {:?}: weights file {} does not exist",
                        model.id,
                        weights.display()
                    ));
                }
            }
        }
        for language in &self.languages {
            for task in &self.tasks {
                match self.datasets.get(language).and_then(|m| m.get(task)) {
                    Some(path) if path.exists() => {}
                    Some(path) => violations.push(format!(
                        "dataset for ({language}, {task}) does not exist: {}",
                        path.display()
                    )),
                    None => violations
                        .push(format!("no dataset path configured for ({language}, {task})")),
                }
            }
        }
        if let LayerSelection::Explicit(layers) = &self.layers {
            let contiguous = layers.iter().enumerate().all(|(i, &l)| i == l);
            if layers.is_empty() || !contiguous {
                violations.push(format!(
                    "explicit layer selection must be contiguous from 0, got {layers:?}"
                ));
            }
        }
        if let Some(control_seeds) = &self.control.seeds {
            if control_seeds.len() != self.seeds.len() {
                violations.push(format!(
                    "control.seeds has {} entries but seeds has {}; they pair index-wise",
                    control_seeds.len(),
                    self.seeds.len()
                ));
            }
        }
        if self.probe.batch_size == 0 || self.probe.max_epochs == 0 {
            violations.push("probe batch_size and max_epochs must be positive".to_string());
        }
        if self.probe.learning_rate.is_nan() || self.probe.learning_rate <= 0.0 {
            violations.push("probe learning_rate must be positive".to_string());
        }
        if self.probe.l2_weight < 0.0 {
            violations.push("probe l2_weight must be non-negative".to_string());
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(PipelineError::InvalidConfig { violations })
        }
    }

    pub fn model(&self, id: &str) -> Option<&ModelSpec> {
        self.models.iter().find(|m| m.id == id)
    }

    pub fn dataset_path(&self, language: &str, task: TaskType) -> Option<&PathBuf> {
        self.datasets.get(language)?.get(&task)
    }

    /// The layer indices probed for a model: `0..=L`, clipped to an explicit
    /// selection when one is configured.
    pub fn layers_for(&self, model: &ModelSpec) -> Vec<usize> {
        match &self.layers {
            LayerSelection::All => (0..=model.layers).collect(),
            LayerSelection::Explicit(layers) => layers
                .iter()
                .copied()
                .filter(|&l| l <= model.layers)
                .collect(),
        }
    }

    /// The baseline encoder kind backing a task's baseline cells; `None` for
    /// tasks contextualized by a control task instead.
    pub fn baseline_kind(&self, task: TaskType) -> Option<BaselineKind> {
        match task {
            TaskType::Pos => None,
            TaskType::Ner => Some(self.baselines.ner),
            TaskType::Ntc => Some(self.baselines.ntc),
        }
    }

    /// Mapping seed paired with the sweep seed at `index`.
    pub fn control_seed(&self, index: usize) -> u64 {
        match &self.control.seeds {
            Some(seeds) => seeds[index],
            None => self.seeds[index],
        }
    }

    /// SHA-256 over the canonical JSON form; embedded in fragments, reports,
    /// and the aggregate table. The output directory is excluded: where
    /// artifacts land does not change what the experiment is.
    pub fn config_hash(&self) -> String {
        let mut normalized = self.clone();
        normalized.output_dir = PathBuf::new();
        let json = crate::metrics::to_canonical_json(&normalized).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        crate::corpus::hex_digest(hasher)
    }

    /// Coverage annotations keyed model → language.
    pub fn coverage_map(&self) -> CoverageMap {
        self.models
            .iter()
            .map(|m| (m.id.clone(), m.coverage.clone()))
            .collect()
    }
}

pub type CoverageMap = BTreeMap<String, BTreeMap<String, Coverage>>;

impl ModelRegistry for ExperimentConfig {
    fn architecture(&self, model_id: &str) -> Option<TransformerConfig> {
        self.model(model_id).map(|m| m.architecture())
    }

    fn tokenizer(&self, model_id: &str) -> Option<Box<dyn SubwordTokenizer>> {
        self.model(model_id)
            .map(|m| Box::new(m.tokenizer()) as Box<dyn SubwordTokenizer>)
    }
}

/// Replaces filesystem-hostile characters so ids can name directories.
pub fn sanitize_component(raw: &str) -> String {
    raw.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

impl fmt::Display for LayerSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSelection::All => f.write_str("all"),
            LayerSelection::Explicit(layers) => write!(f, "{layers:?}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    pub(crate) const TOY_CONFIG: &str = r#"
output_dir = "out"
pooling = "first_subword"
layers = "all"
seeds = [1]
tasks = ["pos"]
languages = ["synthetic"]

[probe]
learning_rate = 0.05
max_epochs = 10

[control]
scope = "full_dataset"

[[models]]
id = "toy-2l"
layers = 2
hidden = 32
heads = 2
max_sequence_length = 128
vocab_size = 512
seed = 42

[models.coverage]
synthetic = "full"

[datasets.synthetic]
pos = "data/pos"
"#;

    fn write_toy_dataset(dir: &Path) {
        let data = dir.join("data/pos");
        fs::create_dir_all(&data).unwrap();
        for split in ["train", "validation", "test"] {
            fs::write(data.join(format!("{split}.conll")), "a\tX\nb\tY\n\n").unwrap();
        }
    }

    #[test]
    fn parses_and_resolves_toy_config() {
        let dir = tempfile::tempdir().unwrap();
        write_toy_dataset(dir.path());
        let config_path = dir.path().join("experiment.toml");
        fs::write(&config_path, TOY_CONFIG).unwrap();
        let config = ExperimentConfig::load(&config_path).unwrap();
        assert_eq!(config.models[0].id, "toy-2l");
        assert!(config.output_dir.starts_with(dir.path()));
        assert_eq!(config.layers_for(&config.models[0]), vec![0, 1, 2]);
        assert_eq!(
            config.models[0].coverage["synthetic"],
            Coverage::Full
        );
    }

    #[test]
    fn validation_reports_every_violation() {
        let dir = tempfile::tempdir().unwrap();
        // No dataset on disk, empty seeds, bad layer selection.
        let bad = TOY_CONFIG
            .replace("seeds = [1]", "seeds = []")
            .replace("layers = \"all\"", "layers = [1, 2]");
        let config_path = dir.path().join("experiment.toml");
        fs::write(&config_path, bad).unwrap();
        match ExperimentConfig::load(&config_path).unwrap_err() {
            PipelineError::InvalidConfig { violations } => {
                assert!(violations.len() >= 3, "got {violations:?}");
                assert!(violations.iter().any(|v| v.contains("seeds")));
                assert!(violations.iter().any(|v| v.contains("contiguous")));
                assert!(violations.iter().any(|v| v.contains("dataset")));
            }
            other => panic!("expected invalid config, got {other}"),
        }
    }

    #[test]
    fn config_hash_is_stable_and_input_sensitive() {
        let dir = tempfile::tempdir().unwrap();
        write_toy_dataset(dir.path());
        let config_path = dir.path().join("experiment.toml");
        fs::write(&config_path, TOY_CONFIG).unwrap();
        let a = ExperimentConfig::load(&config_path).unwrap();
        let b = ExperimentConfig::load(&config_path).unwrap();
        assert_eq!(a.config_hash(), b.config_hash());
        fs::write(&config_path, TOY_CONFIG.replace("seeds = [1]", "seeds = [2]")).unwrap();
        let c = ExperimentConfig::load(&config_path).unwrap();
        assert_ne!(a.config_hash(), c.config_hash());
    }

    #[test]
    fn sanitize_strips_separators() {
        assert_eq!(sanitize_component("reinit:toy/2l:7"), "reinit_toy_2l_7");
    }
}
