//! Runs corpora through an encoder and materializes per-layer pooled
//! representations aligned to labels.

pub mod align;
pub mod cache;
pub mod encoder;
pub mod tokenizer;
pub mod transformer;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use align::align_subwords;
pub use cache::{CacheEntry, CacheManifest, ExclusionCounts, RepresentationCache};
pub use encoder::{
    EncodedSentence, Encoder, EncoderKind, EncoderMeta, SequenceConvention, StubEncoder,
};
pub use tokenizer::{CharSpan, ChunkTokenizer, Subword, SubwordTokenizer};
pub use transformer::{TransformerConfig, TransformerEncoder};

use crate::corpus::{LabeledCorpus, Split, TaskKind};

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("tokenizer contract violated: {0}")]
    TokenizerContract(String),
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("extraction requires a {expected} corpus, got {actual}")]
    WrongTask {
        expected: TaskKind,
        actual: TaskKind,
    },
    #[error("pooling {0} is not valid for this task")]
    InvalidPooling(PoolingStrategy),
    #[error("cache corrupt: {0}")]
    CacheCorrupt(String),
    #[error("tag {0:?} missing from the corpus tagset")]
    UnknownTag(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How a word (or sentence) vector is read off the subword states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingStrategy {
    FirstSubword,
    LastSubword,
    MeanSubword,
    SpecialToken,
}

impl PoolingStrategy {
    pub fn name(self) -> &'static str {
        match self {
            PoolingStrategy::FirstSubword => "first_subword",
            PoolingStrategy::LastSubword => "last_subword",
            PoolingStrategy::MeanSubword => "mean_subword",
            PoolingStrategy::SpecialToken => "special_token",
        }
    }

    pub fn parse(name: &str) -> Option<PoolingStrategy> {
        match name {
            "first_subword" => Some(PoolingStrategy::FirstSubword),
            "last_subword" => Some(PoolingStrategy::LastSubword),
            "mean_subword" => Some(PoolingStrategy::MeanSubword),
            "special_token" => Some(PoolingStrategy::SpecialToken),
            _ => None,
        }
    }
}

impl std::fmt::Display for PoolingStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Pools the encoder positions of one word into a single vector.
fn pool_positions(
    state: &ndarray::Array2<f32>,
    positions: &[usize],
    pooling: PoolingStrategy,
) -> Vec<f32> {
    match pooling {
        PoolingStrategy::FirstSubword => state.row(positions[0]).to_vec(),
        PoolingStrategy::LastSubword => state.row(*positions.last().unwrap()).to_vec(),
        PoolingStrategy::MeanSubword => {
            let width = state.ncols();
            let mut acc = vec![0f32; width];
            for &pos in positions {
                for (a, v) in acc.iter_mut().zip(state.row(pos).iter()) {
                    *a += v;
                }
            }
            let n = positions.len() as f32;
            for a in acc.iter_mut() {
                *a /= n;
            }
            acc
        }
        PoolingStrategy::SpecialToken => unreachable!("special_token is not a word pooling"),
    }
}

/// Extracts one pooled vector per (layer, non-truncated word), labeled with
/// the word's tag and a stable `sentence_id#word_index` item id.
///
/// Words whose subwords all fall beyond the encoder's content budget are
/// excluded and counted in the manifest; so are words the tokenizer yields no
/// subwords for.
pub fn extract_token_representations(
    encoder: &dyn Encoder,
    corpus: &LabeledCorpus,
    pooling: PoolingStrategy,
    layers: &BTreeSet<usize>,
) -> Result<RepresentationCache, ExtractionError> {
    if corpus.task_kind() != TaskKind::TokenLevel {
        return Err(ExtractionError::WrongTask {
            expected: TaskKind::TokenLevel,
            actual: corpus.task_kind(),
        });
    }
    if pooling == PoolingStrategy::SpecialToken {
        return Err(ExtractionError::InvalidPooling(pooling));
    }
    let layers = validate_layers(encoder, layers)?;

    let mut entries: BTreeMap<(usize, Split), CacheEntry> = BTreeMap::new();
    let mut exclusions = ExclusionCounts::default();
    let budget = encoder.content_budget();

    for (split, sentences) in corpus.splits() {
        for sentence in sentences {
            let text = sentence.encoding_text();
            let word_boundaries = tokenizer::word_spans(&text);
            debug_assert_eq!(word_boundaries.len(), sentence.tokens.len());
            let subwords = encoder.tokenizer().tokenize(&text);
            let full_alignment = {
                let spans: Vec<CharSpan> = subwords.iter().map(|s| s.span).collect();
                align_subwords(&word_boundaries, &spans)?
            };
            let kept = subwords.len().min(budget);
            if kept < subwords.len() {
                *exclusions
                    .truncated_sentences
                    .entry(split)
                    .or_default() += 1;
            }
            let kept_spans: Vec<CharSpan> = subwords[..kept].iter().map(|s| s.span).collect();
            let alignment = align_subwords(&word_boundaries, &kept_spans)?;
            let content_ids: Vec<u32> = subwords[..kept].iter().map(|s| s.id).collect();
            let encoded = encoder.encode(&content_ids)?;

            for (word_idx, indices) in alignment.iter().enumerate() {
                if indices.is_empty() {
                    if full_alignment[word_idx].is_empty() {
                        log::warn!(
                            "sentence {:?}: word {} produced no subwords; excluded",
                            sentence.id,
                            word_idx
                        );
                        *exclusions.skipped_words.entry(split).or_default() += 1;
                    } else {
                        *exclusions.truncated_words.entry(split).or_default() += 1;
                    }
                    continue;
                }
                let positions: Vec<usize> = indices
                    .iter()
                    .map(|&i| i + encoded.content_offset)
                    .collect();
                let tag = &sentence.tokens[word_idx].tag;
                let label = corpus
                    .tag_index(tag)
                    .ok_or_else(|| ExtractionError::UnknownTag(tag.clone()))?;
                let item_id = format!("{}#{}", sentence.id, word_idx);
                for &layer in &layers {
                    let state = &encoded.states[layer];
                    let row = pool_positions(state, &positions, pooling);
                    let entry = entries
                        .entry((layer, split))
                        .or_insert_with(|| CacheEntry::new(row.len()));
                    entry.push(&row, label, item_id.clone());
                }
            }
        }
    }

    build_cache(encoder, corpus, pooling, layers, entries, exclusions)
}

/// Extracts one vector per (layer, sentence) at the encoder's sentence
/// representation: the sequence-classification token position, or the mean of
/// per-position outputs for encoders defining mean pooling.
///
/// Inputs longer than the content budget are truncated to their leading
/// window before encoding; the manifest counts them.
pub fn extract_sequence_representations(
    encoder: &dyn Encoder,
    corpus: &LabeledCorpus,
    layers: &BTreeSet<usize>,
) -> Result<RepresentationCache, ExtractionError> {
    if corpus.task_kind() != TaskKind::SentenceLevel {
        return Err(ExtractionError::WrongTask {
            expected: TaskKind::SentenceLevel,
            actual: corpus.task_kind(),
        });
    }
    let convention = encoder.sequence_convention().ok_or_else(|| {
        ExtractionError::Configuration(format!(
            "encoder {} has no sequence-classification convention",
            encoder.meta().model_id
        ))
    })?;
    let layers = validate_layers(encoder, layers)?;

    let mut entries: BTreeMap<(usize, Split), CacheEntry> = BTreeMap::new();
    let mut exclusions = ExclusionCounts::default();
    let budget = encoder.content_budget();

    for (split, sentences) in corpus.splits() {
        for sentence in sentences {
            let text = sentence.encoding_text();
            let subwords = encoder.tokenizer().tokenize(&text);
            let kept = subwords.len().min(budget);
            if kept < subwords.len() {
                *exclusions
                    .truncated_sentences
                    .entry(split)
                    .or_default() += 1;
            }
            let content_ids: Vec<u32> = subwords[..kept].iter().map(|s| s.id).collect();
            if content_ids.is_empty() && matches!(convention, SequenceConvention::MeanPool) {
                log::warn!(
                    "sentence {:?} has no subwords; excluded from mean-pooled extraction",
                    sentence.id
                );
                *exclusions.skipped_sentences.entry(split).or_default() += 1;
                continue;
            }
            let encoded = encoder.encode(&content_ids)?;
            let label_str = sentence.label.as_deref().unwrap_or_default();
            let label = corpus
                .tag_index(label_str)
                .ok_or_else(|| ExtractionError::UnknownTag(label_str.to_string()))?;
            for &layer in &layers {
                let state = &encoded.states[layer];
                let row: Vec<f32> = match convention {
                    SequenceConvention::SpecialToken { position } => state.row(position).to_vec(),
                    SequenceConvention::MeanPool => {
                        transformer::mean_rows(state).to_vec()
                    }
                };
                let entry = entries
                    .entry((layer, split))
                    .or_insert_with(|| CacheEntry::new(row.len()));
                entry.push(&row, label, sentence.id.clone());
            }
        }
    }

    build_cache(
        encoder,
        corpus,
        PoolingStrategy::SpecialToken,
        layers,
        entries,
        exclusions,
    )
}

fn validate_layers(
    encoder: &dyn Encoder,
    layers: &BTreeSet<usize>,
) -> Result<Vec<usize>, ExtractionError> {
    let max = encoder.meta().num_layers;
    if layers.is_empty() {
        return Err(ExtractionError::Configuration(
            "no layers requested".to_string(),
        ));
    }
    for &layer in layers {
        if layer > max {
            return Err(ExtractionError::Configuration(format!(
                "layer {layer} out of range: encoder {} has layers 0..={max}",
                encoder.meta().model_id
            )));
        }
    }
    Ok(layers.iter().copied().collect())
}

fn build_cache(
    encoder: &dyn Encoder,
    corpus: &LabeledCorpus,
    pooling: PoolingStrategy,
    requested_layers: Vec<usize>,
    entries: BTreeMap<(usize, Split), CacheEntry>,
    exclusions: ExclusionCounts,
) -> Result<RepresentationCache, ExtractionError> {
    let meta = encoder.meta();
    let corpus_hash = corpus.content_hash();
    // The key covers the request; the listed layers/splits cover what
    // actually materialized (a fully skipped split leaves no entry files).
    let cache_key = CacheManifest::compute_key(
        &meta.model_id,
        &corpus_hash,
        encoder.tokenizer().tokenizer_id(),
        pooling,
        meta.max_sequence_length,
        &requested_layers,
    );
    let layers: Vec<usize> = entries
        .keys()
        .map(|(layer, _)| *layer)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let splits: Vec<Split> = entries
        .keys()
        .map(|(_, split)| *split)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let manifest = CacheManifest {
        model_id: meta.model_id.clone(),
        corpus_hash,
        tokenizer_id: encoder.tokenizer().tokenizer_id().to_string(),
        pooling,
        max_sequence_length: meta.max_sequence_length,
        layers,
        splits,
        tagset: corpus.tagset().to_vec(),
        exclusions,
        cache_key,
        toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let cache = RepresentationCache { manifest, entries };
    cache.validate()?;
    Ok(cache)
}
