//! Task metrics (span-level F1 over BIO tags, best-layer selection) and the
//! layer-wise report structures feeding plots and aggregate tables.
//!
//! Everything here is a pure function over immutable inputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("unknown tag {0:?}: expected `O`, `B-<type>`, or `I-<type>`")]
    UnknownTag(String),
    #[error("report for ({model}, {language}, {task}) has no layers")]
    EmptyReport {
        model: String,
        language: String,
        task: TaskType,
    },
    #[error("report layers are not contiguous from 0: {0:?}")]
    NonContiguousLayers(Vec<usize>),
    #[error("derived metric inconsistent at layer {layer}: {derived} vs recomputed {expected}")]
    InconsistentDerived {
        layer: usize,
        derived: f64,
        expected: f64,
    },
    #[error("duplicate report cell ({model}, {language}, {task})")]
    DuplicateCell {
        model: String,
        language: String,
        task: TaskType,
    },
    #[error("refusing to aggregate: config hash {found} does not match {expected}")]
    ProvenanceMismatch { expected: String, found: String },
    #[error("no usable layer values in report")]
    NoLayerValues,
}

/// The three probing tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskType {
    Pos,
    Ner,
    Ntc,
}

impl TaskType {
    pub fn name(self) -> &'static str {
        match self {
            TaskType::Pos => "pos",
            TaskType::Ner => "ner",
            TaskType::Ntc => "ntc",
        }
    }

    pub fn parse(name: &str) -> Option<TaskType> {
        match name {
            "pos" => Some(TaskType::Pos),
            "ner" => Some(TaskType::Ner),
            "ntc" => Some(TaskType::Ntc),
            _ => None,
        }
    }

    /// Human-readable metric row label, Table-style.
    pub fn metric_label(self) -> &'static str {
        match self {
            TaskType::Pos => "POS selectivity",
            TaskType::Ner => "NER gain",
            TaskType::Ntc => "NTC accuracy",
        }
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// An entity span: word indices are inclusive on both ends.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub sentence_id: String,
    pub start: usize,
    pub end: usize,
    pub entity: String,
}

/// A set of entity spans over a sentence universe, decoded from BIO tags.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SpanLabeling {
    spans: BTreeSet<Span>,
}

impl SpanLabeling {
    pub fn new() -> SpanLabeling {
        SpanLabeling::default()
    }

    /// Decodes each `(sentence_id, tags)` pair and collects the spans.
    pub fn from_sentences<'a, I, S>(sentences: I) -> Result<SpanLabeling, MetricsError>
    where
        I: IntoIterator<Item = (&'a str, &'a [S])>,
        S: AsRef<str> + 'a,
    {
        let mut spans = BTreeSet::new();
        for (id, tags) in sentences {
            for (start, end, entity) in decode_bio(tags)? {
                spans.insert(Span {
                    sentence_id: id.to_string(),
                    start,
                    end,
                    entity,
                });
            }
        }
        Ok(SpanLabeling { spans })
    }

    pub fn insert(&mut self, span: Span) {
        self.spans.insert(span);
    }

    pub fn spans(&self) -> &BTreeSet<Span> {
        &self.spans
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }
}

/// Decodes BIO tags into maximal spans `(start, end inclusive, entity type)`.
///
/// Decoding is lenient: an `I-T` with no open span of type `T` immediately
/// before it starts a new span of type `T`. This policy is fixed; scores are
/// only comparable under it.
pub fn decode_bio<S: AsRef<str>>(tags: &[S]) -> Result<Vec<(usize, usize, String)>, MetricsError> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, String)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let tag = tag.as_ref();
        if tag == "O" {
            if let Some((start, entity)) = open.take() {
                spans.push((start, i - 1, entity));
            }
        } else if let Some(entity) = tag.strip_prefix("B-") {
            if let Some((start, prev)) = open.take() {
                spans.push((start, i - 1, prev));
            }
            open = Some((i, entity.to_string()));
        } else if let Some(entity) = tag.strip_prefix("I-") {
            match &open {
                Some((_, prev)) if prev == entity => {}
                _ => {
                    if let Some((start, prev)) = open.take() {
                        spans.push((start, i - 1, prev));
                    }
                    open = Some((i, entity.to_string()));
                }
            }
        } else {
            return Err(MetricsError::UnknownTag(tag.to_string()));
        }
    }
    if let Some((start, entity)) = open {
        spans.push((start, tags.len() - 1, entity));
    }
    Ok(spans)
}

/// Emits canonical BIO tags for a set of spans over a sentence of `len` words.
/// Spans must be non-overlapping and within bounds.
pub fn encode_bio(len: usize, spans: &[(usize, usize, String)]) -> Vec<String> {
    let mut tags = vec!["O".to_string(); len];
    for (start, end, entity) in spans {
        for i in *start..=*end {
            tags[i] = if i == *start {
                format!("B-{entity}")
            } else {
                format!("I-{entity}")
            };
        }
    }
    tags
}

/// Micro-averaged precision, recall, and F1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecallF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Entity-level exact-match micro F1: a predicted span is a true positive iff
/// boundaries and type both match a gold span. Empty-set ratios are defined as
/// 0, and F1 = 0 when P + R = 0.
pub fn span_f1(predicted: &SpanLabeling, gold: &SpanLabeling) -> PrecisionRecallF1 {
    let tp = predicted.spans.intersection(&gold.spans).count() as f64;
    let precision = if predicted.spans.is_empty() {
        0.0
    } else {
        tp / predicted.spans.len() as f64
    };
    let recall = if gold.spans.is_empty() {
        0.0
    } else {
        tp / gold.spans.len() as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    PrecisionRecallF1 {
        precision,
        recall,
        f1,
    }
}

/// Per-layer metric values for one (model, language, task) triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub layer: usize,
    /// Task metric (accuracy or span F1) averaged over seeds; absent when
    /// every seed failed.
    pub raw_metric: Option<f64>,
    /// Control accuracy (pos), re-initialized-architecture F1 (ner), or the
    /// random contextual baseline accuracy (ntc, constant across layers).
    pub baseline_metric: Option<f64>,
    /// Selectivity (pos), gain (ner), or accuracy in percentage points (ntc).
    pub derived_metric: Option<f64>,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failed_seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_seed_raw: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_seed_baseline: BTreeMap<String, f64>,
}

/// Report provenance; reports with mismatched config hashes refuse to
/// aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub toolkit_version: String,
    /// Majority-class metric on the evaluation split, reported for context.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub majority_accuracy: Option<f64>,
    /// How the derived metric is computed, for report readers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derived_metric_note: Option<String>,
}

/// Layer-wise curve for one (model, language, task) triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub model_id: String,
    pub language: String,
    pub task: TaskType,
    pub records: Vec<LayerRecord>,
    pub provenance: Provenance,
}

const DERIVED_TOLERANCE: f64 = 1e-9;

impl LayerReport {
    /// Recomputes the layer's derived metric from its operands.
    pub fn expected_derived(task: TaskType, raw: f64, baseline: f64) -> f64 {
        match task {
            TaskType::Pos | TaskType::Ner => 100.0 * (raw - baseline),
            TaskType::Ntc => 100.0 * raw,
        }
    }

    /// Checks layer contiguity from 0 and derived-metric consistency (1e-9).
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.records.is_empty() {
            return Err(MetricsError::EmptyReport {
                model: self.model_id.clone(),
                language: self.language.clone(),
                task: self.task,
            });
        }
        let layers: Vec<usize> = self.records.iter().map(|r| r.layer).collect();
        if layers.iter().enumerate().any(|(i, &l)| i != l) {
            return Err(MetricsError::NonContiguousLayers(layers));
        }
        for record in &self.records {
            if let (Some(raw), Some(derived)) = (record.raw_metric, record.derived_metric) {
                let baseline = record.baseline_metric.unwrap_or(0.0);
                let expected = Self::expected_derived(self.task, raw, baseline);
                if (derived - expected).abs() > DERIVED_TOLERANCE {
                    return Err(MetricsError::InconsistentDerived {
                        layer: record.layer,
                        derived,
                        expected,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn to_canonical_json(&self) -> serde_json::Result<String> {
        to_canonical_json(self)
    }

    /// CSV with one row per layer.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,raw_metric,baseline_metric,derived_metric\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.layer,
                csv_opt(r.raw_metric),
                csv_opt(r.baseline_metric),
                csv_opt(r.derived_metric),
            ));
        }
        out
    }
}

fn csv_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Serializes any value as sorted-key pretty JSON (the on-disk report form).
pub fn to_canonical_json<T: Serialize>(value: &T) -> serde_json::Result<String> {
    // serde_json's default map is a BTreeMap, so round-tripping through Value
    // sorts every object's keys.
    let value = serde_json::to_value(value)?;
    let mut out = serde_json::to_string_pretty(&value)?;
    out.push('\n');
    Ok(out)
}

/// Best layer by derived metric; ties break toward the lowest layer index.
pub fn best_layer(report: &LayerReport) -> Result<(usize, f64), MetricsError> {
    if report.records.is_empty() {
        return Err(MetricsError::EmptyReport {
            model: report.model_id.clone(),
            language: report.language.clone(),
            task: report.task,
        });
    }
    let mut best: Option<(usize, f64)> = None;
    for record in &report.records {
        if let Some(value) = record.derived_metric {
            match best {
                Some((_, bv)) if value <= bv => {}
                _ => best = Some((record.layer, value)),
            }
        }
    }
    best.ok_or(MetricsError::NoLayerValues)
}

/// Language-coverage annotation, mirroring a pretraining-coverage legend:
/// not included at all, included in the base model only, or included in
/// pretraining/adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coverage {
    None,
    BaseOnly,
    Full,
}

impl Coverage {
    pub fn stars(self) -> &'static str {
        match self {
            Coverage::None => "\u{2606}\u{2606}",
            Coverage::BaseOnly => "\u{2605}\u{2606}",
            Coverage::Full => "\u{2605}\u{2605}",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Coverage::None => "none",
            Coverage::BaseOnly => "base_only",
            Coverage::Full => "full",
        }
    }
}

/// One (model, task) row of the aggregate table: best-layer values per
/// language, `None` where the grid has a gap.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateRow {
    pub model_id: String,
    pub task: TaskType,
    pub metric_label: String,
    pub values: BTreeMap<String, Option<f64>>,
    pub best_layers: BTreeMap<String, Option<usize>>,
}

/// Cross-language per-layer mean of the derived metric for one (task, model).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeanCurve {
    pub task: TaskType,
    pub model_id: String,
    pub languages: Vec<String>,
    /// One mean per layer; `None` where no language contributed a value.
    pub values: Vec<Option<f64>>,
}

/// Best-layer values arranged as (model × metric) rows and language columns,
/// plus per-task cross-language mean curves.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateTable {
    pub languages: Vec<String>,
    pub models: Vec<String>,
    pub rows: Vec<AggregateRow>,
    pub coverage: BTreeMap<String, BTreeMap<String, Coverage>>,
    pub mean_curves: Vec<MeanCurve>,
    pub config_hash: String,
}

/// Builds the aggregate table from per-triple reports.
///
/// All reports must share a config hash; duplicate (model, language, task)
/// cells are an error; missing cells render as explicit gaps, never zero.
pub fn aggregate_results(
    reports: &[LayerReport],
    coverage: &BTreeMap<String, BTreeMap<String, Coverage>>,
) -> Result<AggregateTable, MetricsError> {
    let mut config_hash = String::new();
    let mut seen = BTreeSet::new();
    let mut languages = BTreeSet::new();
    let mut models = Vec::new();
    let mut tasks = BTreeSet::new();
    for report in reports {
        report.validate()?;
        if config_hash.is_empty() {
            config_hash = report.provenance.config_hash.clone();
        } else if report.provenance.config_hash != config_hash {
            return Err(MetricsError::ProvenanceMismatch {
                expected: config_hash,
                found: report.provenance.config_hash.clone(),
            });
        }
        let key = (
            report.model_id.clone(),
            report.language.clone(),
            report.task,
        );
        if !seen.insert(key) {
            return Err(MetricsError::DuplicateCell {
                model: report.model_id.clone(),
                language: report.language.clone(),
                task: report.task,
            });
        }
        languages.insert(report.language.clone());
        if !models.contains(&report.model_id) {
            models.push(report.model_id.clone());
        }
        tasks.insert(report.task);
    }
    let languages: Vec<String> = languages.into_iter().collect();

    let mut rows = Vec::new();
    for model in &models {
        for task in &tasks {
            let mut values = BTreeMap::new();
            let mut best_layers = BTreeMap::new();
            for language in &languages {
                let cell = reports.iter().find(|r| {
                    &r.model_id == model && &r.language == language && r.task == *task
                });
                let best = cell.and_then(|r| best_layer(r).ok());
                values.insert(language.clone(), best.map(|(_, v)| v));
                best_layers.insert(language.clone(), best.map(|(l, _)| l));
            }
            rows.push(AggregateRow {
                model_id: model.clone(),
                task: *task,
                metric_label: task.metric_label().to_string(),
                values,
                best_layers,
            });
        }
    }

    let mut mean_curves = Vec::new();
    for model in &models {
        for task in &tasks {
            let cells: Vec<&LayerReport> = reports
                .iter()
                .filter(|r| &r.model_id == model && r.task == *task)
                .collect();
            if cells.is_empty() {
                continue;
            }
            let depth = cells.iter().map(|r| r.records.len()).max().unwrap_or(0);
            let mut values = Vec::with_capacity(depth);
            for layer in 0..depth {
                let contributions: Vec<f64> = cells
                    .iter()
                    .filter_map(|r| r.records.get(layer).and_then(|rec| rec.derived_metric))
                    .collect();
                if contributions.is_empty() {
                    values.push(None);
                } else {
                    values.push(Some(
                        contributions.iter().sum::<f64>() / contributions.len() as f64,
                    ));
                }
            }
            let mut langs: Vec<String> = cells.iter().map(|r| r.language.clone()).collect();
            langs.sort();
            mean_curves.push(MeanCurve {
                task: *task,
                model_id: model.clone(),
                languages: langs,
                values,
            });
        }
    }

    Ok(AggregateTable {
        languages,
        models,
        rows,
        coverage: coverage.clone(),
        mean_curves,
        config_hash,
    })
}

const GAP_MARKER: &str = "--";

impl AggregateTable {
    pub fn to_canonical_json(&self) -> serde_json::Result<String> {
        to_canonical_json(self)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,metric");
        for language in &self.languages {
            out.push(',');
            out.push_str(language);
        }
        out.push('\n');
        for model in &self.models {
            if let Some(cov) = self.coverage.get(model) {
                out.push_str(&format!("{model},coverage"));
                for language in &self.languages {
                    out.push(',');
                    if let Some(c) = cov.get(language) {
                        out.push_str(c.name());
                    }
                }
                out.push('\n');
            }
            for row in self.rows.iter().filter(|r| &r.model_id == model) {
                out.push_str(&format!("{},{}", row.model_id, row.metric_label));
                for language in &self.languages {
                    out.push(',');
                    if let Some(Some(v)) = row.values.get(language) {
                        out.push_str(&format!("{v:.2}"));
                    }
                }
                out.push('\n');
            }
        }
        out
    }

    /// Aligned plain-text rendering: rows grouped by model, one metric line
    /// per task, coverage stars echoed from config.
    pub fn to_text(&self) -> String {
        let model_width = self
            .models
            .iter()
            .map(|m| m.len())
            .chain(["Model".len()])
            .max()
            .unwrap_or(8)
            + 2;
        let metric_width = self
            .rows
            .iter()
            .map(|r| r.metric_label.len())
            .chain(["Language coverage".len()])
            .max()
            .unwrap_or(12)
            + 2;
        let col_width = self
            .languages
            .iter()
            .map(|l| l.len())
            .chain([9])
            .max()
            .unwrap_or(9)
            + 2;

        let mut out = String::new();
        out.push_str(&format!("{:model_width$}{:metric_width$}", "Model", ""));
        for language in &self.languages {
            out.push_str(&format!("{language:>col_width$}"));
        }
        out.push('\n');
        let rule_len = model_width + metric_width + col_width * self.languages.len();
        out.push_str(&"-".repeat(rule_len));
        out.push('\n');
        for model in &self.models {
            let mut first = true;
            if let Some(cov) = self.coverage.get(model) {
                out.push_str(&format!("{model:model_width$}"));
                first = false;
                out.push_str(&format!("{:metric_width$}", "Language coverage"));
                for language in &self.languages {
                    let cell = cov.get(language).map(|c| c.stars()).unwrap_or(GAP_MARKER);
                    out.push_str(&format!("{cell:>col_width$}"));
                }
                out.push('\n');
            }
            for row in self.rows.iter().filter(|r| &r.model_id == model) {
                if first {
                    out.push_str(&format!("{model:model_width$}"));
                    first = false;
                } else {
                    out.push_str(&" ".repeat(model_width));
                }
                out.push_str(&format!("{:metric_width$}", row.metric_label));
                for language in &self.languages {
                    let cell = match row.values.get(language) {
                        Some(Some(v)) => format!("{v:.2}"),
                        _ => GAP_MARKER.to_string(),
                    };
                    out.push_str(&format!("{cell:>col_width$}"));
                }
                out.push('\n');
            }
        }
        out
    }
}
