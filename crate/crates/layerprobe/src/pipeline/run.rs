//! Sweep execution: extraction jobs (deduplicated, cached), probe cells on a
//! work queue, then single-threaded report, table, and plot emission.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use ndarray::Array2;

use super::config::{sanitize_component, BaselineKind, ExperimentConfig, ModelSpec};
use super::ledger::{CellFragment, CellKey, CellStatus, RunLedger, Variant};
use super::plot::{line_chart_svg, series_csv, Series};
use super::PipelineError;
use crate::baselines::{
    build_random_contextual_encoder, reinitialize_encoder, RandomContextualSpec, ReinitSpec,
    DEFAULT_RANDCTX_MAX_LEN,
};
use crate::control::{apply_control_mapping, build_control_mapping, ControlMapping};
use crate::corpus::{
    load_text_corpus, load_token_corpus, ConllOptions, LabeledCorpus, Split, TaskKind,
};
use crate::extraction::{
    extract_sequence_representations, extract_token_representations, CacheEntry, CacheManifest,
    Encoder, PoolingStrategy, RepresentationCache,
};
use crate::metrics::{
    aggregate_results, LayerRecord, LayerReport, Provenance, SpanLabeling, TaskType,
};
use crate::probe::{evaluate_token_accuracy, train_probe, ProbeData};

/// What a finished (or resumed) run produced.
#[derive(Debug)]
pub struct RunOutcome {
    pub failed: Vec<CellKey>,
    pub report_paths: Vec<PathBuf>,
    pub aggregate_paths: Vec<PathBuf>,
    pub plot_paths: Vec<PathBuf>,
}

impl RunOutcome {
    pub fn all_succeeded(&self) -> bool {
        self.failed.is_empty()
    }
}

/// Restricts which (model, language, task) triples are extracted.
#[derive(Debug, Default, Clone)]
pub struct ExtractionFilter {
    pub model: Option<String>,
    pub language: Option<String>,
    pub task: Option<TaskType>,
}

impl ExtractionFilter {
    fn admits(&self, model: &str, language: &str, task: TaskType) -> bool {
        self.model.as_deref().is_none_or(|m| m == model)
            && self.language.as_deref().is_none_or(|l| l == language)
            && self.task.is_none_or(|t| t == task)
    }
}

/// The encoder an extraction job builds.
#[derive(Debug, Clone)]
enum EncoderRecipe {
    Model(ModelSpec),
    Reinit { source: ModelSpec, seed: u64 },
    RandCtx { source: ModelSpec, seed: u64 },
}

impl EncoderRecipe {
    fn encoder_id(&self) -> String {
        match self {
            EncoderRecipe::Model(spec) => spec.id.clone(),
            EncoderRecipe::Reinit { source, seed } => ReinitSpec {
                source_model_id: source.id.clone(),
                seed: *seed,
            }
            .encoder_id(),
            EncoderRecipe::RandCtx { source, seed } => {
                RandomContextualSpec::matched_to(&source.tokenizer_id(), source.hidden, *seed)
                    .encoder_id()
            }
        }
    }

    fn tokenizer_id(&self) -> String {
        match self {
            EncoderRecipe::Model(spec) | EncoderRecipe::Reinit { source: spec, .. } => {
                spec.tokenizer_id()
            }
            EncoderRecipe::RandCtx { source, .. } => source.tokenizer_id(),
        }
    }

    fn max_sequence_length(&self) -> usize {
        match self {
            EncoderRecipe::Model(spec) | EncoderRecipe::Reinit { source: spec, .. } => {
                spec.max_sequence_length
            }
            EncoderRecipe::RandCtx { .. } => DEFAULT_RANDCTX_MAX_LEN,
        }
    }

    fn build(&self, config: &ExperimentConfig) -> Result<Box<dyn Encoder>, PipelineError> {
        match self {
            EncoderRecipe::Model(spec) => Ok(Box::new(spec.build_encoder()?)),
            EncoderRecipe::Reinit { source, seed } => {
                let spec = ReinitSpec {
                    source_model_id: source.id.clone(),
                    seed: *seed,
                };
                Ok(Box::new(reinitialize_encoder(&spec, config)?))
            }
            EncoderRecipe::RandCtx { source, seed } => {
                let spec =
                    RandomContextualSpec::matched_to(&source.tokenizer_id(), source.hidden, *seed);
                let tokenizer = Box::new(source.tokenizer());
                Ok(Box::new(build_random_contextual_encoder(spec, tokenizer)?))
            }
        }
    }
}

#[derive(Debug, Clone)]
struct ExtractionJob {
    recipe: EncoderRecipe,
    language: String,
    task: TaskType,
    layers: BTreeSet<usize>,
    pooling: PoolingStrategy,
    cache_dir: PathBuf,
    cache_key: String,
}

type CorpusMap = BTreeMap<(String, TaskType), Arc<LabeledCorpus>>;

fn load_corpora(config: &ExperimentConfig) -> Result<CorpusMap, PipelineError> {
    let mut corpora = BTreeMap::new();
    for language in &config.languages {
        for &task in &config.tasks {
            let path = config
                .dataset_path(language, task)
                .expect("validated config has every dataset path");
            let corpus = match task {
                TaskType::Pos | TaskType::Ner => {
                    load_token_corpus(path, ConllOptions::default())?
                }
                TaskType::Ntc => load_text_corpus(path)?,
            };
            corpora.insert((language.clone(), task), Arc::new(corpus));
        }
    }
    Ok(corpora)
}

/// Pooling recorded for a job: word pooling for token tasks, the sentence
/// convention marker for sentence tasks.
fn pooling_for(config: &ExperimentConfig, task: TaskType) -> PoolingStrategy {
    match task {
        TaskType::Pos | TaskType::Ner => config.pooling,
        TaskType::Ntc => PoolingStrategy::SpecialToken,
    }
}

fn job_for(
    config: &ExperimentConfig,
    recipe: EncoderRecipe,
    language: &str,
    task: TaskType,
    layers: BTreeSet<usize>,
    corpus: &LabeledCorpus,
) -> ExtractionJob {
    let pooling = pooling_for(config, task);
    let encoder_id = recipe.encoder_id();
    let layer_list: Vec<usize> = layers.iter().copied().collect();
    let cache_key = CacheManifest::compute_key(
        &encoder_id,
        &corpus.content_hash(),
        &recipe.tokenizer_id(),
        pooling,
        recipe.max_sequence_length(),
        &layer_list,
    );
    let dir_name = format!(
        "{}__{}__{}__{}",
        sanitize_component(&encoder_id),
        task,
        sanitize_component(language),
        &cache_key[..8]
    );
    let cache_dir = config.output_dir.join("cache").join(dir_name);
    ExtractionJob {
        recipe,
        language: language.to_string(),
        task,
        layers,
        pooling,
        cache_dir,
        cache_key,
    }
}

fn enumerate_jobs(
    config: &ExperimentConfig,
    corpora: &CorpusMap,
    filter: &ExtractionFilter,
) -> Vec<ExtractionJob> {
    let mut jobs: BTreeMap<PathBuf, ExtractionJob> = BTreeMap::new();
    for model in &config.models {
        let layers: BTreeSet<usize> = config.layers_for(model).into_iter().collect();
        for language in &config.languages {
            for &task in &config.tasks {
                if !filter.admits(&model.id, language, task) {
                    continue;
                }
                let corpus = &corpora[&(language.clone(), task)];
                let mut add = |recipe: EncoderRecipe, layers: BTreeSet<usize>| {
                    let job = job_for(config, recipe, language, task, layers, corpus);
                    jobs.entry(job.cache_dir.clone()).or_insert(job);
                };
                add(EncoderRecipe::Model(model.clone()), layers.clone());
                match config.baseline_kind(task) {
                    None => {}
                    Some(BaselineKind::Reinit) => {
                        for &seed in &config.seeds {
                            add(
                                EncoderRecipe::Reinit {
                                    source: model.clone(),
                                    seed,
                                },
                                layers.clone(),
                            );
                        }
                    }
                    Some(BaselineKind::Randctx) => {
                        for &seed in &config.seeds {
                            add(
                                EncoderRecipe::RandCtx {
                                    source: model.clone(),
                                    seed,
                                },
                                BTreeSet::from([1]),
                            );
                        }
                    }
                }
            }
        }
    }
    jobs.into_values().collect()
}

fn job_is_cached(job: &ExtractionJob) -> bool {
    match RepresentationCache::read_manifest(&job.cache_dir) {
        Ok(manifest) => manifest.cache_key == job.cache_key,
        Err(_) => false,
    }
}

fn execute_job(
    config: &ExperimentConfig,
    job: &ExtractionJob,
    corpora: &CorpusMap,
) -> Result<(), PipelineError> {
    let corpus = &corpora[&(job.language.clone(), job.task)];
    let encoder = job.recipe.build(config)?;
    let cache = match job.task {
        TaskType::Pos | TaskType::Ner => {
            extract_token_representations(encoder.as_ref(), corpus, job.pooling, &job.layers)?
        }
        TaskType::Ntc => {
            extract_sequence_representations(encoder.as_ref(), corpus, &job.layers)?
        }
    };
    cache.write_to_dir(&job.cache_dir)?;
    Ok(())
}

/// Runs (or resumes) every extraction the config implies, returning the cache
/// directories. Completed caches are recognized by their content key and
/// skipped.
pub fn run_extractions(
    config: &ExperimentConfig,
    workers: usize,
    filter: &ExtractionFilter,
) -> Result<Vec<PathBuf>, PipelineError> {
    config.validate()?;
    std::fs::create_dir_all(config.output_dir.join("cache"))?;
    let corpora = load_corpora(config)?;
    let jobs = enumerate_jobs(config, &corpora, filter);
    let pending: Vec<ExtractionJob> = jobs.iter().filter(|j| !job_is_cached(j)).cloned().collect();
    log::info!(
        "extraction: {} jobs total, {} cached, {} to run",
        jobs.len(),
        jobs.len() - pending.len(),
        pending.len()
    );
    let results = parallel_for_each(pending, workers, |job| {
        execute_job(config, job, &corpora).map_err(|e| e.to_string())
    });
    for (job, result) in &results {
        if let Err(message) = result {
            return Err(PipelineError::ConfigFile {
                path: job.cache_dir.display().to_string(),
                message: format!("extraction failed: {message}"),
            });
        }
    }
    Ok(jobs.into_iter().map(|j| j.cache_dir).collect())
}

fn parallel_for_each<T, R, F>(items: Vec<T>, workers: usize, f: F) -> Vec<(T, R)>
where
    T: Send,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    if items.is_empty() {
        return Vec::new();
    }
    let queue = Mutex::new(VecDeque::from(items));
    let results = Mutex::new(Vec::new());
    let workers = workers.max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let item = queue.lock().unwrap().pop_front();
                match item {
                    Some(item) => {
                        let result = f(&item);
                        results.lock().unwrap().push((item, result));
                    }
                    None => break,
                }
            });
        }
    });
    results.into_inner().unwrap()
}

/// Caches loaded representation caches so sibling cells share them.
struct CacheStore {
    map: Mutex<BTreeMap<PathBuf, Arc<RepresentationCache>>>,
}

impl CacheStore {
    fn new() -> CacheStore {
        CacheStore {
            map: Mutex::new(BTreeMap::new()),
        }
    }

    fn get(&self, dir: &Path) -> Result<Arc<RepresentationCache>, String> {
        if let Some(cache) = self.map.lock().unwrap().get(dir) {
            return Ok(cache.clone());
        }
        let cache = RepresentationCache::read_from_dir(dir)
            .map_err(|e| format!("cache {}: {e}", dir.display()))?;
        let cache = Arc::new(cache);
        self.map
            .lock()
            .unwrap()
            .entry(dir.to_path_buf())
            .or_insert_with(|| cache.clone());
        Ok(cache)
    }
}

/// Everything shared across cell executions.
struct RunContext<'a> {
    config: &'a ExperimentConfig,
    corpora: &'a CorpusMap,
    mappings: BTreeMap<(String, u64), Arc<ControlMapping>>,
    /// sentence id → surfaces, per token-level corpus; lets control cells
    /// resolve item ids without scanning the corpus.
    surfaces: BTreeMap<(String, TaskType), BTreeMap<String, Vec<String>>>,
    caches: CacheStore,
    config_hash: String,
}

fn surface_index(corpora: &CorpusMap) -> BTreeMap<(String, TaskType), BTreeMap<String, Vec<String>>> {
    let mut index = BTreeMap::new();
    for ((language, task), corpus) in corpora {
        if corpus.task_kind() != TaskKind::TokenLevel {
            continue;
        }
        let mut by_id = BTreeMap::new();
        for sentence in corpus.sentences() {
            by_id.insert(
                sentence.id.clone(),
                sentence.tokens.iter().map(|t| t.surface.clone()).collect(),
            );
        }
        index.insert((language.clone(), *task), by_id);
    }
    index
}

impl<'a> RunContext<'a> {
    /// The cache directory a cell's representations live in.
    fn cell_cache_dir(&self, cell: &CellKey) -> Result<PathBuf, String> {
        let model = self
            .config
            .model(&cell.model)
            .ok_or_else(|| format!("unknown model {}", cell.model))?;
        let recipe = match cell.variant {
            Variant::Task | Variant::Control => EncoderRecipe::Model(model.clone()),
            Variant::Baseline => match self.config.baseline_kind(cell.task) {
                Some(BaselineKind::Reinit) => EncoderRecipe::Reinit {
                    source: model.clone(),
                    seed: cell.seed,
                },
                Some(BaselineKind::Randctx) => EncoderRecipe::RandCtx {
                    source: model.clone(),
                    seed: cell.seed,
                },
                None => {
                    return Err(format!(
                        "no {} variant is defined for {}",
                        cell.variant, cell.task
                    ))
                }
            },
        };
        let corpus = &self.corpora[&(cell.language.clone(), cell.task)];
        let layers: BTreeSet<usize> = match &recipe {
            EncoderRecipe::RandCtx { .. } => BTreeSet::from([1]),
            _ => self.config.layers_for(model).into_iter().collect(),
        };
        let job = job_for(self.config, recipe, &cell.language, cell.task, layers, corpus);
        Ok(job.cache_dir)
    }

    fn probe_data(
        &self,
        cell: &CellKey,
        entry: &CacheEntry,
        corpus: &LabeledCorpus,
    ) -> Result<ProbeData, String> {
        let features = Array2::from_shape_vec(
            (entry.len(), entry.width),
            entry.data.iter().map(|&v| v as f64).collect(),
        )
        .map_err(|e| e.to_string())?;
        let labels: Vec<usize> = match cell.variant {
            Variant::Task | Variant::Baseline => {
                entry.labels.iter().map(|&l| l as usize).collect()
            }
            Variant::Control => {
                let mapping = self
                    .mappings
                    .get(&(cell.language.clone(), cell.seed))
                    .ok_or_else(|| format!("no control mapping for {}", cell.language))?;
                let surfaces = self
                    .surfaces
                    .get(&(cell.language.clone(), cell.task))
                    .ok_or_else(|| format!("no surface index for {}", cell.language))?;
                let mut labels = Vec::with_capacity(entry.len());
                for item_id in &entry.item_ids {
                    let (sentence_id, word_idx) = parse_item_id(item_id)?;
                    let surface = surfaces
                        .get(sentence_id)
                        .and_then(|words| words.get(word_idx))
                        .ok_or_else(|| format!("item id {item_id} not found in corpus"))?;
                    let tag = mapping
                        .tag_for(surface)
                        .ok_or_else(|| format!("word {surface:?} missing from mapping"))?;
                    let index = corpus
                        .tag_index(tag)
                        .ok_or_else(|| format!("tag {tag:?} missing from tagset"))?;
                    labels.push(index as usize);
                }
                labels
            }
        };
        ProbeData::new(features, labels).map_err(|e| e.to_string())
    }
}

fn parse_item_id(item_id: &str) -> Result<(&str, usize), String> {
    let (sentence_id, word_idx) = item_id
        .rsplit_once('#')
        .ok_or_else(|| format!("malformed item id {item_id}"))?;
    let word_idx = word_idx
        .parse()
        .map_err(|_| format!("malformed item id {item_id}"))?;
    Ok((sentence_id, word_idx))
}

/// Trains and evaluates one probe cell, returning its fragment.
fn execute_cell(ctx: &RunContext<'_>, cell: &CellKey) -> Result<CellFragment, String> {
    let cache_dir = ctx.cell_cache_dir(cell)?;
    let cache = ctx.caches.get(&cache_dir)?;
    let corpus = &ctx.corpora[&(cell.language.clone(), cell.task)];

    let entry_of = |split: Split| -> Result<&CacheEntry, String> {
        cache.entry(cell.layer, split).ok_or_else(|| {
            format!(
                "cache {} has no (layer {}, {split}) entry; is the {split} split present?",
                cache_dir.display(),
                cell.layer
            )
        })
    };
    let train_entry = entry_of(Split::Train)?;
    let validation_entry = entry_of(Split::Validation)?;
    let test_entry = entry_of(Split::Test)?;

    let train = ctx.probe_data(cell, train_entry, corpus)?;
    let validation = ctx.probe_data(cell, validation_entry, corpus)?;
    let test = ctx.probe_data(cell, test_entry, corpus)?;

    let num_classes = cache.manifest.tagset.len();
    let probe_config =
        ctx.config
            .probe
            .probe_config(train_entry.width, num_classes, cell.seed);
    let probe = train_probe(&train, &validation, &probe_config).map_err(|e| e.to_string())?;

    let (metric_kind, metric) = match (cell.task, cell.variant) {
        (TaskType::Ner, Variant::Task | Variant::Baseline) => {
            let f1 = span_f1_on_test(&probe, &test, test_entry, corpus, &cache.manifest.tagset)?;
            ("span_f1", f1)
        }
        _ => {
            let accuracy = evaluate_token_accuracy(&probe, &test).map_err(|e| e.to_string())?;
            ("accuracy", accuracy)
        }
    };

    Ok(CellFragment {
        cell: cell.clone(),
        config_hash: ctx.config_hash.clone(),
        metric_kind: metric_kind.to_string(),
        metric,
        selected_epoch: probe.selected_epoch,
        epochs_run: probe.training_log.len(),
        toolkit_version: crate::VERSION.to_string(),
    })
}

/// Entity-level micro F1 of probe predictions against the gold test tags.
/// Items excluded at extraction predict `O`.
fn span_f1_on_test(
    probe: &crate::probe::TrainedProbe,
    test: &ProbeData,
    entry: &CacheEntry,
    corpus: &LabeledCorpus,
    tagset: &[String],
) -> Result<f64, String> {
    let predictions = probe
        .predict(&test.features.view())
        .map_err(|e| e.to_string())?;
    let mut predicted_tags: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    let mut gold: Vec<(&str, Vec<String>)> = Vec::new();
    for sentence in corpus.split(Split::Test) {
        let tags: Vec<String> = sentence.tokens.iter().map(|t| t.tag.clone()).collect();
        predicted_tags.insert(&sentence.id, vec!["O".to_string(); tags.len()]);
        gold.push((&sentence.id, tags));
    }
    for (item_id, &class) in entry.item_ids.iter().zip(&predictions) {
        let (sentence_id, word_idx) = parse_item_id(item_id)?;
        let tags = predicted_tags
            .get_mut(sentence_id)
            .ok_or_else(|| format!("sentence {sentence_id} not in test split"))?;
        let tag = tagset
            .get(class)
            .ok_or_else(|| format!("class {class} outside the tagset"))?;
        tags[word_idx] = tag.clone();
    }
    let predicted = SpanLabeling::from_sentences(
        predicted_tags
            .iter()
            .map(|(id, tags)| (*id, tags.as_slice())),
    )
    .map_err(|e| e.to_string())?;
    let gold = SpanLabeling::from_sentences(gold.iter().map(|(id, tags)| (*id, tags.as_slice())))
        .map_err(|e| e.to_string())?;
    Ok(crate::metrics::span_f1(&predicted, &gold).f1)
}

/// Executes a planned ledger: extraction, probe cells, reports, aggregate
/// table, and plots. Cell failures are isolated and reported in the outcome.
pub fn run(
    config: &ExperimentConfig,
    ledger: &mut RunLedger,
    workers: usize,
) -> Result<RunOutcome, PipelineError> {
    for sub in ["cells", "reports", "plots", "mappings", "cache"] {
        std::fs::create_dir_all(config.output_dir.join(sub))?;
    }
    run_extractions(config, workers, &ExtractionFilter::default())?;
    let corpora = load_corpora(config)?;

    // Control mappings, one per (language, sweep-seed index), persisted as
    // TSV artifacts.
    let mut mappings = BTreeMap::new();
    if config.tasks.contains(&TaskType::Pos) {
        for language in &config.languages {
            let corpus = &corpora[&(language.clone(), TaskType::Pos)];
            for (index, &seed) in config.seeds.iter().enumerate() {
                let control_seed = config.control_seed(index);
                let mapping =
                    build_control_mapping(corpus, control_seed, config.control.scope)?;
                let tsv = config.output_dir.join("mappings").join(format!(
                    "{}__pos__seed{}__{}.tsv",
                    sanitize_component(language),
                    control_seed,
                    config.control.scope
                ));
                mapping.save_tsv(&tsv)?;
                // Relabeled corpus artifact, emitted in CoNLL form.
                let relabeled = apply_control_mapping(corpus, &mapping)?;
                let corpus_dir = config.output_dir.join("mappings").join(format!(
                    "{}__pos__seed{}__{}_corpus",
                    sanitize_component(language),
                    control_seed,
                    config.control.scope
                ));
                crate::corpus::save_token_corpus(&relabeled, &corpus_dir)?;
                mappings.insert((language.clone(), seed), Arc::new(mapping));
            }
        }
    }

    let ctx = RunContext {
        config,
        corpora: &corpora,
        mappings,
        surfaces: surface_index(&corpora),
        caches: CacheStore::new(),
        config_hash: ledger.config_hash.clone(),
    };

    let pending = ledger.pending();
    log::info!(
        "probing: {} cells pending, {} cached",
        pending.len(),
        ledger.count(CellStatus::Cached)
    );
    let results = parallel_for_each(pending, workers, |cell| {
        let start = std::time::Instant::now();
        let result = execute_cell(&ctx, cell).and_then(|fragment| {
            fragment
                .write(&cell.fragment_path(&config.output_dir))
                .map_err(|e| e.to_string())?;
            Ok(fragment)
        });
        (result, start.elapsed().as_millis() as u64)
    });
    for (cell, (result, elapsed_ms)) in results {
        match result {
            Ok(_) => ledger.mark_timed(&cell, CellStatus::Done, None, Some(elapsed_ms)),
            Err(message) => {
                log::warn!("cell {cell} failed: {message}");
                ledger.mark_timed(&cell, CellStatus::Failed, Some(message), Some(elapsed_ms));
            }
        }
    }

    let reports = build_reports(config, &corpora, &ledger.config_hash)?;
    let mut report_paths = Vec::new();
    for report in &reports {
        report.validate()?;
        let base = format!(
            "{}__{}__{}",
            sanitize_component(&report.model_id),
            sanitize_component(&report.language),
            report.task
        );
        let json_path = config.output_dir.join("reports").join(format!("{base}.json"));
        std::fs::write(&json_path, report.to_canonical_json()?)?;
        let csv_path = config.output_dir.join("reports").join(format!("{base}.csv"));
        std::fs::write(&csv_path, report.to_csv())?;
        report_paths.push(json_path);
    }

    let table = aggregate_results(&reports, &config.coverage_map())?;
    let mut aggregate_paths = Vec::new();
    for (name, contents) in [
        ("aggregate.json", table.to_canonical_json()?),
        ("aggregate.csv", table.to_csv()),
        ("aggregate.txt", table.to_text()),
    ] {
        let path = config.output_dir.join("reports").join(name);
        std::fs::write(&path, contents)?;
        aggregate_paths.push(path);
    }

    let plot_paths = emit_plots(config, &reports, &table)?;

    Ok(RunOutcome {
        failed: ledger.failed(),
        report_paths,
        aggregate_paths,
        plot_paths,
    })
}

/// Mean over values, or `None` when empty.
fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Majority-class fraction over the test split.
fn majority_accuracy(corpus: &LabeledCorpus) -> Option<f64> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut total = 0usize;
    for sentence in corpus.split(Split::Test) {
        match corpus.task_kind() {
            TaskKind::TokenLevel => {
                for token in &sentence.tokens {
                    *counts.entry(&token.tag).or_default() += 1;
                    total += 1;
                }
            }
            TaskKind::SentenceLevel => {
                if let Some(label) = &sentence.label {
                    *counts.entry(label).or_default() += 1;
                    total += 1;
                }
            }
        }
    }
    if total == 0 {
        return None;
    }
    counts.values().max().map(|&n| n as f64 / total as f64)
}

fn derived_note(task: TaskType) -> &'static str {
    match task {
        TaskType::Pos => "selectivity: 100*(task_accuracy - control_accuracy), per layer",
        TaskType::Ner => "gain: 100*(task_f1 - reinitialized_f1), per layer",
        TaskType::Ntc => {
            "accuracy in percentage points; baseline_metric is the random contextual encoder"
        }
    }
}

/// Assembles per-(model, language, task) layer reports from on-disk
/// fragments. Only fragments matching the config hash count.
pub fn build_reports(
    config: &ExperimentConfig,
    corpora: &CorpusMap,
    config_hash: &str,
) -> Result<Vec<LayerReport>, PipelineError> {
    let read = |cell: &CellKey| -> Option<CellFragment> {
        CellFragment::read_valid(&cell.fragment_path(&config.output_dir), config_hash)
    };
    let mut reports = Vec::new();
    for model in &config.models {
        let layers = config.layers_for(model);
        for language in &config.languages {
            for &task in &config.tasks {
                let mut records = Vec::with_capacity(layers.len());
                for &layer in &layers {
                    let mut raws = Vec::new();
                    let mut baselines = Vec::new();
                    let mut seeds_used = Vec::new();
                    let mut failed_seeds = Vec::new();
                    let mut per_seed_raw = BTreeMap::new();
                    let mut per_seed_baseline = BTreeMap::new();
                    for &seed in &config.seeds {
                        let key = |variant: Variant, layer: usize| CellKey {
                            model: model.id.clone(),
                            language: language.clone(),
                            task,
                            layer,
                            seed,
                            variant,
                        };
                        let task_fragment = read(&key(Variant::Task, layer));
                        let baseline_fragment = match config.baseline_kind(task) {
                            None => read(&key(Variant::Control, layer)),
                            Some(BaselineKind::Reinit) => read(&key(Variant::Baseline, layer)),
                            Some(BaselineKind::Randctx) => read(&key(Variant::Baseline, 1)),
                        };
                        match (task_fragment, baseline_fragment) {
                            (Some(t), Some(b)) => {
                                seeds_used.push(seed);
                                per_seed_raw.insert(seed.to_string(), t.metric);
                                per_seed_baseline.insert(seed.to_string(), b.metric);
                                raws.push(t.metric);
                                baselines.push(b.metric);
                            }
                            _ => failed_seeds.push(seed),
                        }
                    }
                    let raw_metric = mean(&raws);
                    let baseline_metric = mean(&baselines);
                    let derived_metric = match (raw_metric, baseline_metric) {
                        (Some(raw), Some(baseline)) => {
                            Some(LayerReport::expected_derived(task, raw, baseline))
                        }
                        _ => None,
                    };
                    records.push(LayerRecord {
                        layer,
                        raw_metric,
                        baseline_metric,
                        derived_metric,
                        seeds: seeds_used,
                        failed_seeds,
                        per_seed_raw,
                        per_seed_baseline,
                    });
                }
                let corpus = &corpora[&(language.clone(), task)];
                reports.push(LayerReport {
                    model_id: model.id.clone(),
                    language: language.clone(),
                    task,
                    records,
                    provenance: Provenance {
                        config_hash: config_hash.to_string(),
                        toolkit_version: crate::VERSION.to_string(),
                        majority_accuracy: majority_accuracy(corpus),
                        derived_metric_note: Some(derived_note(task).to_string()),
                    },
                });
            }
        }
    }
    Ok(reports)
}

fn plot_y_label(task: TaskType) -> &'static str {
    match task {
        TaskType::Pos => "selectivity (percentage points)",
        TaskType::Ner => "gain (percentage points)",
        TaskType::Ntc => "accuracy (%)",
    }
}

fn emit_plots(
    config: &ExperimentConfig,
    reports: &[LayerReport],
    table: &crate::metrics::AggregateTable,
) -> Result<Vec<PathBuf>, PipelineError> {
    let plots_dir = config.output_dir.join("plots");
    let mut paths = Vec::new();
    let mut write_pair = |name: &str, title: &str, y: &str, series: &[Series]| -> Result<(), PipelineError> {
        let svg_path = plots_dir.join(format!("{name}.svg"));
        std::fs::write(&svg_path, line_chart_svg(title, y, series))?;
        let csv_path = plots_dir.join(format!("{name}.csv"));
        std::fs::write(&csv_path, series_csv(series))?;
        paths.push(svg_path);
        paths.push(csv_path);
        Ok(())
    };

    for &task in &config.tasks {
        for language in &config.languages {
            let mut series = Vec::new();
            for model in &config.models {
                let report = reports.iter().find(|r| {
                    r.model_id == model.id && &r.language == language && r.task == task
                });
                let Some(report) = report else { continue };
                series.push(Series {
                    name: model.id.clone(),
                    values: report.records.iter().map(|r| r.derived_metric).collect(),
                    dashed: false,
                });
                if task == TaskType::Ntc {
                    series.push(Series {
                        name: format!("{} (random baseline)", model.id),
                        values: report
                            .records
                            .iter()
                            .map(|r| r.baseline_metric.map(|b| 100.0 * b))
                            .collect(),
                        dashed: true,
                    });
                }
            }
            write_pair(
                &format!("{task}__{}", sanitize_component(language)),
                &format!("{} probing: {language}", task.metric_label()),
                plot_y_label(task),
                &series,
            )?;
        }

        // Cross-language mean curves, one series per model.
        let mut mean_series = Vec::new();
        for model in &config.models {
            if let Some(curve) = table
                .mean_curves
                .iter()
                .find(|c| c.task == task && c.model_id == model.id)
            {
                mean_series.push(Series {
                    name: model.id.clone(),
                    values: curve.values.clone(),
                    dashed: false,
                });
            }
        }
        write_pair(
            &format!("{task}__mean"),
            &format!("{} probing: cross-language mean", task.metric_label()),
            plot_y_label(task),
            &mean_series,
        )?;
    }
    Ok(paths)
}
