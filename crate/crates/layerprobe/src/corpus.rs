//! Corpus ingestion: token-labeled (CoNLL) and sentence-labeled (TSV) datasets,
//! split partitioning, vocabularies, and empirical label distributions.
//!
//! Corpora are immutable after load and safe to share across threads.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// The seven topic labels accepted for sentence-level (news topic) corpora.
pub const NEWS_TOPICS: [&str; 7] = [
    "business",
    "entertainment",
    "health",
    "politics",
    "religion",
    "sports",
    "technology",
];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: corpus is empty")]
    EmptyCorpus { path: PathBuf },
    #[error("record {id:?}: unknown topic label {label:?}")]
    UnknownTopic { id: String, label: String },
    #[error("duplicate sentence id {id:?}")]
    DuplicateSentenceId { id: String },
    #[error("operation requires a {expected} corpus, got {actual}")]
    WrongTask { expected: TaskKind, actual: TaskKind },
    #[error("invalid {what}: {message}")]
    Invalid {
        what: &'static str,
        message: String,
    },
    #[error("no split files found under {path}")]
    NoSplitFiles { path: PathBuf },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Whether labels attach to individual tokens or to whole sentences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    TokenLevel,
    SentenceLevel,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::TokenLevel => write!(f, "token_level"),
            TaskKind::SentenceLevel => write!(f, "sentence_level"),
        }
    }
}

/// Standard dataset partitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    /// Parses a split name; `dev` is accepted as an alias for `validation`.
    pub fn parse(name: &str) -> Option<Split> {
        match name {
            "train" => Some(Split::Train),
            "validation" | "dev" => Some(Split::Validation),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which portion of the corpus an empirical distribution is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    FullDataset,
    TrainOnly,
}

impl Scope {
    pub fn name(self) -> &'static str {
        match self {
            Scope::FullDataset => "full_dataset",
            Scope::TrainOnly => "train_only",
        }
    }

    pub fn parse(name: &str) -> Option<Scope> {
        match name {
            "full_dataset" => Some(Scope::FullDataset),
            "train_only" => Some(Scope::TrainOnly),
            _ => None,
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A surface form paired with its categorical tag (POS tag or BIO entity tag).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub surface: String,
    pub tag: String,
}

impl Token {
    pub fn new(surface: impl Into<String>, tag: impl Into<String>) -> Token {
        Token {
            surface: surface.into(),
            tag: tag.into(),
        }
    }
}

/// One labeled unit: a token sequence (token-level tasks) or a raw text with a
/// topic label (sentence-level tasks).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    /// Stable identifier, unique across splits.
    pub id: String,
    /// Tokens with tags; empty for sentence-level corpora.
    pub tokens: Vec<Token>,
    /// Raw text body; present only for sentence-level corpora (kept untokenized,
    /// the subword tokenizer handles it downstream).
    pub text: Option<String>,
    /// Sentence-level topic label; present only for sentence-level corpora.
    pub label: Option<String>,
}

impl Sentence {
    pub fn token_level(id: impl Into<String>, tokens: Vec<Token>) -> Sentence {
        Sentence {
            id: id.into(),
            tokens,
            text: None,
            label: None,
        }
    }

    pub fn sentence_level(
        id: impl Into<String>,
        text: impl Into<String>,
        label: impl Into<String>,
    ) -> Sentence {
        Sentence {
            id: id.into(),
            tokens: Vec::new(),
            text: Some(text.into()),
            label: Some(label.into()),
        }
    }

    /// The text handed to a subword tokenizer: raw body for sentence-level
    /// sentences, space-joined surfaces for token-level ones.
    pub fn encoding_text(&self) -> String {
        match &self.text {
            Some(t) => t.clone(),
            None => {
                let surfaces: Vec<&str> = self.tokens.iter().map(|t| t.surface.as_str()).collect();
                surfaces.join(" ")
            }
        }
    }
}

/// Options for CoNLL ingestion.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConllOptions {
    /// When true, lines with more than two tab-separated columns are rejected.
    /// The default reads columns 1 and 2 and ignores the rest, tolerating
    /// dataset variants.
    pub strict_columns: bool,
}

/// Split-partitioned sentences with a shared tagset.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCorpus {
    splits: BTreeMap<Split, Vec<Sentence>>,
    tagset: Vec<String>,
    task_kind: TaskKind,
}

impl LabeledCorpus {
    /// Builds a token-level corpus, deriving the tagset from observed tags.
    pub fn new_token_level(
        splits: BTreeMap<Split, Vec<Sentence>>,
    ) -> Result<LabeledCorpus, CorpusError> {
        let mut tags = BTreeSet::new();
        let mut seen_ids = BTreeSet::new();
        for sentences in splits.values() {
            for sentence in sentences {
                if !seen_ids.insert(sentence.id.clone()) {
                    return Err(CorpusError::DuplicateSentenceId {
                        id: sentence.id.clone(),
                    });
                }
                if sentence.tokens.is_empty() {
                    return Err(CorpusError::Invalid {
                        what: "sentence",
                        message: format!("token-level sentence {:?} has no tokens", sentence.id),
                    });
                }
                for token in &sentence.tokens {
                    validate_token(token)?;
                    tags.insert(token.tag.clone());
                }
            }
        }
        if tags.len() > u16::MAX as usize {
            return Err(CorpusError::Invalid {
                what: "tagset",
                message: format!("{} tags exceed the u16 label index space", tags.len()),
            });
        }
        Ok(LabeledCorpus {
            splits,
            tagset: tags.into_iter().collect(),
            task_kind: TaskKind::TokenLevel,
        })
    }

    /// Builds a sentence-level corpus, validating topic labels against the
    /// seven-topic set.
    pub fn new_sentence_level(
        splits: BTreeMap<Split, Vec<Sentence>>,
    ) -> Result<LabeledCorpus, CorpusError> {
        let mut labels = BTreeSet::new();
        let mut seen_ids = BTreeSet::new();
        for sentences in splits.values() {
            for sentence in sentences {
                if !seen_ids.insert(sentence.id.clone()) {
                    return Err(CorpusError::DuplicateSentenceId {
                        id: sentence.id.clone(),
                    });
                }
                let label = sentence.label.as_deref().ok_or(CorpusError::Invalid {
                    what: "sentence",
                    message: format!("sentence {:?} has no topic label", sentence.id),
                })?;
                if !NEWS_TOPICS.contains(&label) {
                    return Err(CorpusError::UnknownTopic {
                        id: sentence.id.clone(),
                        label: label.to_string(),
                    });
                }
                labels.insert(label.to_string());
            }
        }
        Ok(LabeledCorpus {
            splits,
            tagset: labels.into_iter().collect(),
            task_kind: TaskKind::SentenceLevel,
        })
    }

    pub fn task_kind(&self) -> TaskKind {
        self.task_kind
    }

    /// Tags (or topic labels) observed anywhere in the corpus, sorted.
    pub fn tagset(&self) -> &[String] {
        &self.tagset
    }

    pub fn tag_index(&self, tag: &str) -> Option<u16> {
        self.tagset
            .binary_search_by(|t| t.as_str().cmp(tag))
            .ok()
            .map(|i| i as u16)
    }

    pub fn split(&self, split: Split) -> &[Sentence] {
        self.splits.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn has_split(&self, split: Split) -> bool {
        !self.split(split).is_empty()
    }

    pub fn splits(&self) -> impl Iterator<Item = (Split, &[Sentence])> {
        self.splits.iter().map(|(s, v)| (*s, v.as_slice()))
    }

    pub fn sentences(&self) -> impl Iterator<Item = &Sentence> {
        self.splits.values().flatten()
    }

    /// Total token count across all splits (0 for sentence-level corpora).
    pub fn token_count(&self) -> usize {
        self.sentences().map(|s| s.tokens.len()).sum()
    }

    pub fn sentence_count(&self) -> usize {
        self.sentences().count()
    }

    /// Content digest over split membership, ids, surfaces, tags, texts, and
    /// labels; used to key representation caches.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update([match self.task_kind {
            TaskKind::TokenLevel => 0u8,
            TaskKind::SentenceLevel => 1u8,
        }]);
        for (split, sentences) in &self.splits {
            hasher.update(split.name().as_bytes());
            hasher.update([0xff]);
            for sentence in sentences {
                hasher.update(sentence.id.as_bytes());
                hasher.update([0x1f]);
                for token in &sentence.tokens {
                    hasher.update(token.surface.as_bytes());
                    hasher.update([0x1e]);
                    hasher.update(token.tag.as_bytes());
                    hasher.update([0x1e]);
                }
                if let Some(text) = &sentence.text {
                    hasher.update(text.as_bytes());
                }
                hasher.update([0x1f]);
                if let Some(label) = &sentence.label {
                    hasher.update(label.as_bytes());
                }
                hasher.update([0x1d]);
            }
        }
        hex_digest(hasher)
    }
}

fn validate_token(token: &Token) -> Result<(), CorpusError> {
    if token.surface.is_empty() {
        return Err(CorpusError::Invalid {
            what: "token",
            message: "empty surface".to_string(),
        });
    }
    if token.surface.chars().any(char::is_whitespace) {
        return Err(CorpusError::Invalid {
            what: "token",
            message: format!("surface {:?} contains whitespace", token.surface),
        });
    }
    if token.tag.is_empty() {
        return Err(CorpusError::Invalid {
            what: "token",
            message: format!("token {:?} has an empty tag", token.surface),
        });
    }
    Ok(())
}

pub(crate) fn hex_digest(hasher: Sha256) -> String {
    let bytes = hasher.finalize();
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Loads a token-level corpus from a CoNLL file or a directory of split files
/// (`train.conll`, `validation.conll`/`dev.conll`, `test.conll`; `.txt` also
/// accepted). A single file is loaded into the train split.
pub fn load_token_corpus(
    path: impl AsRef<Path>,
    options: ConllOptions,
) -> Result<LabeledCorpus, CorpusError> {
    let path = path.as_ref();
    let mut splits = BTreeMap::new();
    if path.is_dir() {
        for split in Split::ALL {
            if let Some(file) = find_split_file(path, split, &["conll", "txt"]) {
                splits.insert(split, parse_conll_file(&file, split, options)?);
            }
        }
        if splits.is_empty() {
            return Err(CorpusError::NoSplitFiles {
                path: path.to_path_buf(),
            });
        }
    } else {
        splits.insert(
            Split::Train,
            parse_conll_file(path, Split::Train, options)?,
        );
    }
    LabeledCorpus::new_token_level(splits)
}

/// Writes a token-level corpus as one CoNLL file per split under `dir`.
pub fn save_token_corpus(corpus: &LabeledCorpus, dir: impl AsRef<Path>) -> Result<(), CorpusError> {
    if corpus.task_kind != TaskKind::TokenLevel {
        return Err(CorpusError::WrongTask {
            expected: TaskKind::TokenLevel,
            actual: corpus.task_kind,
        });
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (split, sentences) in corpus.splits() {
        let mut out = BufWriter::new(fs::File::create(
            dir.join(format!("{}.conll", split.name())),
        )?);
        for sentence in sentences {
            for token in &sentence.tokens {
                writeln!(out, "{}\t{}", token.surface, token.tag)?;
            }
            writeln!(out)?;
        }
        out.flush()?;
    }
    Ok(())
}

/// Loads a sentence-level corpus from a labeled-text TSV file or a directory
/// of split files (`train.tsv`, `validation.tsv`/`dev.tsv`, `test.tsv`).
pub fn load_text_corpus(path: impl AsRef<Path>) -> Result<LabeledCorpus, CorpusError> {
    let path = path.as_ref();
    let mut splits = BTreeMap::new();
    if path.is_dir() {
        for split in Split::ALL {
            if let Some(file) = find_split_file(path, split, &["tsv"]) {
                splits.insert(split, parse_tsv_file(&file)?);
            }
        }
        if splits.is_empty() {
            return Err(CorpusError::NoSplitFiles {
                path: path.to_path_buf(),
            });
        }
    } else {
        splits.insert(Split::Train, parse_tsv_file(path)?);
    }
    LabeledCorpus::new_sentence_level(splits)
}

/// Writes a sentence-level corpus as one TSV file per split under `dir`.
pub fn save_text_corpus(corpus: &LabeledCorpus, dir: impl AsRef<Path>) -> Result<(), CorpusError> {
    if corpus.task_kind != TaskKind::SentenceLevel {
        return Err(CorpusError::WrongTask {
            expected: TaskKind::SentenceLevel,
            actual: corpus.task_kind,
        });
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (split, sentences) in corpus.splits() {
        let mut out = BufWriter::new(fs::File::create(dir.join(format!("{}.tsv", split.name())))?);
        writeln!(out, "id\ttext\tlabel")?;
        for sentence in sentences {
            let text = sentence.text.as_deref().unwrap_or("");
            if text.contains('\n') {
                return Err(CorpusError::Invalid {
                    what: "text",
                    message: format!("record {:?} contains a newline", sentence.id),
                });
            }
            writeln!(
                out,
                "{}\t{}\t{}",
                sentence.id,
                text,
                sentence.label.as_deref().unwrap_or("")
            )?;
        }
        out.flush()?;
    }
    Ok(())
}

fn find_split_file(dir: &Path, split: Split, extensions: &[&str]) -> Option<PathBuf> {
    let mut names: Vec<String> = Vec::new();
    for ext in extensions {
        names.push(format!("{}.{ext}", split.name()));
        if split == Split::Validation {
            names.push(format!("dev.{ext}"));
        }
    }
    names.into_iter().map(|n| dir.join(n)).find(|p| p.is_file())
}

fn parse_conll_file(
    path: &Path,
    split: Split,
    options: ConllOptions,
) -> Result<Vec<Sentence>, CorpusError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut sentences: Vec<Sentence> = Vec::new();
    let mut tokens: Vec<Token> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            if tokens.is_empty() {
                if !sentences.is_empty() {
                    log::warn!("{}:{}: skipping empty sentence", path.display(), lineno);
                }
            } else {
                let id = format!("{}-{:06}", split.name(), sentences.len());
                sentences.push(Sentence::token_level(id, std::mem::take(&mut tokens)));
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 {
            return Err(CorpusError::Parse {
                path: path.to_path_buf(),
                line: lineno,
                message: format!("expected `surface<TAB>tag`, got {:?}", line),
            });
        }
        if options.strict_columns && fields.len() > 2 {
            return Err(CorpusError::Parse {
                path: path.to_path_buf(),
                line: lineno,
                message: format!("expected exactly 2 columns, got {}", fields.len()),
            });
        }
        let token = Token::new(fields[0], fields[1]);
        validate_token(&token).map_err(|e| CorpusError::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        })?;
        tokens.push(token);
    }
    if !tokens.is_empty() {
        let id = format!("{}-{:06}", split.name(), sentences.len());
        sentences.push(Sentence::token_level(id, tokens));
    }
    if sentences.is_empty() {
        return Err(CorpusError::EmptyCorpus {
            path: path.to_path_buf(),
        });
    }
    Ok(sentences)
}

fn parse_tsv_file(path: &Path) -> Result<Vec<Sentence>, CorpusError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines().enumerate();
    match lines.next() {
        Some((_, Ok(header))) if header.trim_end() == "id\ttext\tlabel" => {}
        Some((_, Ok(header))) => {
            return Err(CorpusError::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("expected header `id<TAB>text<TAB>label`, got {:?}", header),
            })
        }
        Some((_, Err(e))) => return Err(e.into()),
        None => {
            return Err(CorpusError::EmptyCorpus {
                path: path.to_path_buf(),
            })
        }
    }
    let mut sentences = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        // The text body may itself contain tabs: the id is everything before
        // the first tab, the label everything after the last.
        let (id, rest) = line.split_once('\t').ok_or_else(|| CorpusError::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message: "expected `id<TAB>text<TAB>label`".to_string(),
        })?;
        let (text, label) = rest.rsplit_once('\t').ok_or_else(|| CorpusError::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message: "expected `id<TAB>text<TAB>label`".to_string(),
        })?;
        if id.is_empty() {
            return Err(CorpusError::Parse {
                path: path.to_path_buf(),
                line: lineno,
                message: "empty record id".to_string(),
            });
        }
        if !NEWS_TOPICS.contains(&label) {
            return Err(CorpusError::UnknownTopic {
                id: id.to_string(),
                label: label.to_string(),
            });
        }
        sentences.push(Sentence::sentence_level(id, text, label));
    }
    if sentences.is_empty() {
        return Err(CorpusError::EmptyCorpus {
            path: path.to_path_buf(),
        });
    }
    Ok(sentences)
}

/// Empirical label frequencies; values sum to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution {
    probabilities: BTreeMap<String, f64>,
}

impl LabelDistribution {
    pub fn from_counts(counts: BTreeMap<String, usize>) -> Result<LabelDistribution, CorpusError> {
        let total: usize = counts.values().sum();
        if total == 0 {
            return Err(CorpusError::Invalid {
                what: "distribution",
                message: "no labeled items to count".to_string(),
            });
        }
        let probabilities = counts
            .into_iter()
            .map(|(label, n)| (label, n as f64 / total as f64))
            .collect();
        Ok(LabelDistribution { probabilities })
    }

    pub fn probabilities(&self) -> &BTreeMap<String, f64> {
        &self.probabilities
    }

    pub fn probability(&self, label: &str) -> f64 {
        self.probabilities.get(label).copied().unwrap_or(0.0)
    }

    /// Labels in sorted order, the canonical order for seeded sampling.
    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.probabilities.keys().map(String::as_str)
    }

    pub fn total_variation_distance(&self, other: &LabelDistribution) -> f64 {
        let keys: BTreeSet<&String> = self
            .probabilities
            .keys()
            .chain(other.probabilities.keys())
            .collect();
        0.5 * keys
            .into_iter()
            .map(|k| (self.probability(k) - other.probability(k)).abs())
            .sum::<f64>()
    }

    /// The label with the highest frequency (lowest label on ties) and its
    /// fraction.
    pub fn majority(&self) -> (&str, f64) {
        let mut best: Option<(&str, f64)> = None;
        for (label, p) in &self.probabilities {
            match best {
                Some((_, bp)) if *p <= bp => {}
                _ => best = Some((label, *p)),
            }
        }
        best.expect("distribution is never empty")
    }
}

/// Label frequencies over the requested scope: token-weighted tag frequencies
/// for token-level corpora, sentence-label frequencies for sentence-level ones.
pub fn label_distribution(
    corpus: &LabeledCorpus,
    scope: Scope,
) -> Result<LabelDistribution, CorpusError> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let splits: Vec<Split> = match scope {
        Scope::FullDataset => Split::ALL.to_vec(),
        Scope::TrainOnly => vec![Split::Train],
    };
    for split in splits {
        for sentence in corpus.split(split) {
            match corpus.task_kind {
                TaskKind::TokenLevel => {
                    for token in &sentence.tokens {
                        *counts.entry(token.tag.clone()).or_default() += 1;
                    }
                }
                TaskKind::SentenceLevel => {
                    if let Some(label) = &sentence.label {
                        *counts.entry(label.clone()).or_default() += 1;
                    }
                }
            }
        }
    }
    LabelDistribution::from_counts(counts)
}

/// The deterministic (lexicographic, code-point order) vocabulary of word
/// types over all splits. Type identity is exact surface match: no case
/// folding, no Unicode normalization.
pub fn vocabulary(corpus: &LabeledCorpus) -> Result<Vec<String>, CorpusError> {
    if corpus.task_kind() != TaskKind::TokenLevel {
        return Err(CorpusError::WrongTask {
            expected: TaskKind::TokenLevel,
            actual: corpus.task_kind(),
        });
    }
    let types: BTreeSet<String> = corpus
        .sentences()
        .flat_map(|s| s.tokens.iter().map(|t| t.surface.clone()))
        .collect();
    Ok(types.into_iter().collect())
}
