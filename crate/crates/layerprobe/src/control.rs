//! Control tasks for token-level probing: seeded random word-type→tag
//! behavior matching the empirical tag distribution, deterministic corpus
//! re-annotation, and the selectivity metric.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{
    label_distribution, vocabulary, CorpusError, LabelDistribution, LabeledCorpus, Scope, Sentence,
    TaskKind,
};

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("control tasks require a token_level corpus, got {0}")]
    WrongTask(TaskKind),
    #[error("word type {0:?} is not covered by the mapping")]
    Coverage(String),
    #[error("{name} must be in [0, 1], got {value}")]
    Domain { name: &'static str, value: f64 },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: std::path::PathBuf,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A pure word-type→tag function: every occurrence of a word type receives the
/// same tag, but the assignment is independent of the word's linguistic role.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlMapping {
    assignments: BTreeMap<String, String>,
    seed: u64,
    scope: Scope,
    source_distribution: LabelDistribution,
}

impl ControlMapping {
    pub fn assignments(&self) -> &BTreeMap<String, String> {
        &self.assignments
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn scope(&self) -> Scope {
        self.scope
    }

    pub fn source_distribution(&self) -> &LabelDistribution {
        &self.source_distribution
    }

    pub fn tag_for(&self, word: &str) -> Option<&str> {
        self.assignments.get(word).map(String::as_str)
    }

    /// Type-weighted tag frequencies of the mapping itself (each word type
    /// counts once).
    pub fn type_distribution(&self) -> LabelDistribution {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for tag in self.assignments.values() {
            *counts.entry(tag.clone()).or_default() += 1;
        }
        LabelDistribution::from_counts(counts).expect("mapping is never empty")
    }

    /// Serializes as TSV: a `# seed=<n> scope=<scope>` header line followed by
    /// `word<TAB>tag` lines in word order.
    pub fn save_tsv(&self, path: impl AsRef<Path>) -> Result<(), ControlError> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        writeln!(out, "# seed={} scope={}", self.seed, self.scope)?;
        for (word, tag) in &self.assignments {
            writeln!(out, "{word}\t{tag}")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Loads a serialized mapping, bypassing regeneration. The source
    /// distribution is recomputed from the stored assignments (type-weighted).
    pub fn load_tsv(path: impl AsRef<Path>) -> Result<ControlMapping, ControlError> {
        let path = path.as_ref();
        let reader = BufReader::new(fs::File::open(path)?);
        let mut lines = reader.lines().enumerate();
        let (seed, scope) = match lines.next() {
            Some((_, Ok(header))) => parse_header(&header).ok_or_else(|| ControlError::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("expected `# seed=<n> scope=<scope>`, got {header:?}"),
            })?,
            Some((_, Err(e))) => return Err(e.into()),
            None => {
                return Err(ControlError::Parse {
                    path: path.to_path_buf(),
                    line: 1,
                    message: "empty mapping file".to_string(),
                })
            }
        };
        let mut assignments = BTreeMap::new();
        for (idx, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (word, tag) = line.split_once('\t').ok_or_else(|| ControlError::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: format!("expected `word<TAB>tag`, got {line:?}"),
            })?;
            assignments.insert(word.to_string(), tag.to_string());
        }
        if assignments.is_empty() {
            return Err(ControlError::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: "mapping has no assignments".to_string(),
            });
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for tag in assignments.values() {
            *counts.entry(tag.clone()).or_default() += 1;
        }
        Ok(ControlMapping {
            assignments,
            seed,
            scope,
            source_distribution: LabelDistribution::from_counts(counts)?,
        })
    }
}

fn parse_header(header: &str) -> Option<(u64, Scope)> {
    let rest = header.strip_prefix("# ")?;
    let mut seed = None;
    let mut scope = None;
    for field in rest.split_whitespace() {
        if let Some(v) = field.strip_prefix("seed=") {
            seed = v.parse().ok();
        } else if let Some(v) = field.strip_prefix("scope=") {
            scope = Scope::parse(v);
        }
    }
    Some((seed?, scope?))
}

/// Assigns every word type in the vocabulary a tag drawn independently from
/// the corpus's empirical tag distribution under a seeded generator. Identical
/// `(corpus, seed, scope)` always produce the identical mapping.
pub fn build_control_mapping(
    corpus: &LabeledCorpus,
    seed: u64,
    scope: Scope,
) -> Result<ControlMapping, ControlError> {
    if corpus.task_kind() != TaskKind::TokenLevel {
        return Err(ControlError::WrongTask(corpus.task_kind()));
    }
    let distribution = label_distribution(corpus, scope)?;
    let vocab = vocabulary(corpus)?;
    let tags: Vec<&str> = distribution.labels().collect();
    let mut cumulative = Vec::with_capacity(tags.len());
    let mut acc = 0.0;
    for tag in &tags {
        acc += distribution.probability(tag);
        cumulative.push(acc);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = BTreeMap::new();
    // Vocabulary order is deterministic, so the sequence of draws is the
    // canonical one for this (corpus, seed, scope).
    for word in vocab {
        let u: f64 = rng.random();
        let pick = cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(tags.len() - 1);
        assignments.insert(word, tags[pick].to_string());
    }
    Ok(ControlMapping {
        assignments,
        seed,
        scope,
        source_distribution: distribution,
    })
}

/// Re-annotates a corpus with the mapping's tags: surfaces, sentence order,
/// and split membership are untouched; every token's tag becomes
/// `mapping[surface]`. The input corpus is not modified.
pub fn apply_control_mapping(
    corpus: &LabeledCorpus,
    mapping: &ControlMapping,
) -> Result<LabeledCorpus, ControlError> {
    if corpus.task_kind() != TaskKind::TokenLevel {
        return Err(ControlError::WrongTask(corpus.task_kind()));
    }
    let mut splits = BTreeMap::new();
    for (split, sentences) in corpus.splits() {
        let mut relabeled = Vec::with_capacity(sentences.len());
        for sentence in sentences {
            let mut tokens = Vec::with_capacity(sentence.tokens.len());
            for token in &sentence.tokens {
                let tag = mapping
                    .tag_for(&token.surface)
                    .ok_or_else(|| ControlError::Coverage(token.surface.clone()))?;
                tokens.push(crate::corpus::Token::new(token.surface.clone(), tag));
            }
            relabeled.push(Sentence::token_level(sentence.id.clone(), tokens));
        }
        splits.insert(split, relabeled);
    }
    Ok(LabeledCorpus::new_token_level(splits)?)
}

/// Linguistic-task accuracy minus control-task accuracy, in percentage points.
pub fn selectivity(task_accuracy: f64, control_accuracy: f64) -> Result<f64, ControlError> {
    check_fraction("task_accuracy", task_accuracy)?;
    check_fraction("control_accuracy", control_accuracy)?;
    Ok(100.0 * (task_accuracy - control_accuracy))
}

pub(crate) fn check_fraction(name: &'static str, value: f64) -> Result<(), ControlError> {
    if !(0.0..=1.0).contains(&value) || value.is_nan() {
        return Err(ControlError::Domain { name, value });
    }
    Ok(())
}
