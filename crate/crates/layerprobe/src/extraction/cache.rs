//! On-disk representation cache: one directory per (model, task, language)
//! with a JSON manifest and one binary file per (layer, split).
//!
//! Binary entry layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes   b"LPCACHE1"
//! version   u32       1
//! width     u32       vector width
//! n_rows    u64
//! data      n_rows × width × f32      row-major pooled vectors
//! labels    n_rows × u16              indices into the manifest tagset
//! item_ids  n_rows × (u32 len + utf-8 bytes)
//! ```
//!
//! The manifest is written last: a directory without a readable manifest is
//! not a cache.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ExtractionError, PoolingStrategy};
use crate::corpus::Split;

const ENTRY_MAGIC: &[u8; 8] = b"LPCACHE1";
const ENTRY_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Pooled vectors aligned with labels and item ids for one (layer, split).
#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub width: usize,
    /// Row-major `len × width` data.
    pub data: Vec<f32>,
    pub labels: Vec<u16>,
    pub item_ids: Vec<String>,
}

impl CacheEntry {
    pub fn new(width: usize) -> CacheEntry {
        CacheEntry {
            width,
            data: Vec::new(),
            labels: Vec::new(),
            item_ids: Vec::new(),
        }
    }

    pub fn push(&mut self, row: &[f32], label: u16, item_id: String) {
        debug_assert_eq!(row.len(), self.width);
        self.data.extend_from_slice(row);
        self.labels.push(label);
        self.item_ids.push(item_id);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    /// Row/label/item-id counts agree and the data length matches.
    pub fn validate(&self) -> Result<(), ExtractionError> {
        if self.labels.len() != self.item_ids.len()
            || self.data.len() != self.labels.len() * self.width
        {
            return Err(ExtractionError::CacheCorrupt(format!(
                "entry misaligned: {} labels, {} ids, {} floats at width {}",
                self.labels.len(),
                self.item_ids.len(),
                self.data.len(),
                self.width
            )));
        }
        Ok(())
    }
}

/// Per-split counts of items excluded during extraction.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExclusionCounts {
    /// Words whose subwords all fell beyond the truncation horizon.
    #[serde(default)]
    pub truncated_words: BTreeMap<Split, usize>,
    /// Words the tokenizer produced no subwords for.
    #[serde(default)]
    pub skipped_words: BTreeMap<Split, usize>,
    /// Sentences whose subword sequence was cut to the budget.
    #[serde(default)]
    pub truncated_sentences: BTreeMap<Split, usize>,
    /// Sentence-level items skipped entirely (no subwords at all).
    #[serde(default)]
    pub skipped_sentences: BTreeMap<Split, usize>,
}

/// Cache metadata; the commit point of a cache directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub model_id: String,
    pub corpus_hash: String,
    pub tokenizer_id: String,
    pub pooling: PoolingStrategy,
    pub max_sequence_length: usize,
    pub layers: Vec<usize>,
    pub splits: Vec<Split>,
    pub tagset: Vec<String>,
    pub exclusions: ExclusionCounts,
    /// Content key over everything that determines the representations; a
    /// mismatch means the cache is stale.
    pub cache_key: String,
    pub toolkit_version: String,
}

impl CacheManifest {
    /// Derives the cache key from the inputs that determine representations.
    pub fn compute_key(
        model_id: &str,
        corpus_hash: &str,
        tokenizer_id: &str,
        pooling: PoolingStrategy,
        max_sequence_length: usize,
        layers: &[usize],
    ) -> String {
        let mut hasher = Sha256::new();
        hasher.update(model_id.as_bytes());
        hasher.update([0]);
        hasher.update(corpus_hash.as_bytes());
        hasher.update([0]);
        hasher.update(tokenizer_id.as_bytes());
        hasher.update([0]);
        hasher.update(pooling.name().as_bytes());
        hasher.update([0]);
        hasher.update(max_sequence_length.to_le_bytes());
        for layer in layers {
            hasher.update(layer.to_le_bytes());
        }
        crate::corpus::hex_digest(hasher)
    }
}

/// In-memory representation cache for one (model, corpus, pooling) extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationCache {
    pub manifest: CacheManifest,
    pub entries: BTreeMap<(usize, Split), CacheEntry>,
}

impl RepresentationCache {
    pub fn entry(&self, layer: usize, split: Split) -> Option<&CacheEntry> {
        self.entries.get(&(layer, split))
    }

    pub fn validate(&self) -> Result<(), ExtractionError> {
        for entry in self.entries.values() {
            entry.validate()?;
        }
        Ok(())
    }

    fn entry_file_name(layer: usize, split: Split) -> String {
        format!("L{layer:02}_{}.bin", split.name())
    }

    /// Persists all entries, then the manifest (committing the cache).
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<(), ExtractionError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for ((layer, split), entry) in &self.entries {
            entry.validate()?;
            let path = dir.join(Self::entry_file_name(*layer, *split));
            let mut out = BufWriter::new(fs::File::create(path)?);
            out.write_all(ENTRY_MAGIC)?;
            out.write_u32::<LittleEndian>(ENTRY_VERSION)?;
            out.write_u32::<LittleEndian>(entry.width as u32)?;
            out.write_u64::<LittleEndian>(entry.len() as u64)?;
            for v in &entry.data {
                out.write_f32::<LittleEndian>(*v)?;
            }
            for label in &entry.labels {
                out.write_u16::<LittleEndian>(*label)?;
            }
            for id in &entry.item_ids {
                out.write_u32::<LittleEndian>(id.len() as u32)?;
                out.write_all(id.as_bytes())?;
            }
            out.flush()?;
        }
        let manifest_json = crate::metrics::to_canonical_json(&self.manifest)
            .map_err(|e| ExtractionError::CacheCorrupt(e.to_string()))?;
        // Write-then-rename so a torn write never looks committed.
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&tmp, manifest_json)?;
        fs::rename(tmp, dir.join(MANIFEST_FILE))?;
        Ok(())
    }

    /// Reads a committed cache directory.
    pub fn read_from_dir(dir: impl AsRef<Path>) -> Result<RepresentationCache, ExtractionError> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(MANIFEST_FILE);
        let manifest: CacheManifest =
            serde_json::from_str(&fs::read_to_string(&manifest_path).map_err(|e| {
                ExtractionError::CacheCorrupt(format!(
                    "{}: manifest unreadable: {e}",
                    dir.display()
                ))
            })?)
            .map_err(|e| ExtractionError::CacheCorrupt(format!("bad manifest: {e}")))?;
        let mut entries = BTreeMap::new();
        for &layer in &manifest.layers {
            for &split in &manifest.splits {
                let path = dir.join(Self::entry_file_name(layer, split));
                entries.insert((layer, split), read_entry(&path)?);
            }
        }
        let cache = RepresentationCache { manifest, entries };
        cache.validate()?;
        Ok(cache)
    }

    /// Reads just the manifest, for cheap staleness checks.
    pub fn read_manifest(dir: impl AsRef<Path>) -> Result<CacheManifest, ExtractionError> {
        let manifest_path = dir.as_ref().join(MANIFEST_FILE);
        serde_json::from_str(&fs::read_to_string(manifest_path)?)
            .map_err(|e| ExtractionError::CacheCorrupt(format!("bad manifest: {e}")))
    }
}

fn read_entry(path: &Path) -> Result<CacheEntry, ExtractionError> {
    let mut reader = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 8];
    reader.read_exact(&mut magic)?;
    if &magic != ENTRY_MAGIC {
        return Err(ExtractionError::CacheCorrupt(format!(
            "{}: bad magic",
            path.display()
        )));
    }
    let version = reader.read_u32::<LittleEndian>()?;
    if version != ENTRY_VERSION {
        return Err(ExtractionError::CacheCorrupt(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let width = reader.read_u32::<LittleEndian>()? as usize;
    let n_rows = reader.read_u64::<LittleEndian>()? as usize;
    let mut data = vec![0f32; n_rows * width];
    for v in data.iter_mut() {
        *v = reader.read_f32::<LittleEndian>()?;
    }
    let mut labels = vec![0u16; n_rows];
    for v in labels.iter_mut() {
        *v = reader.read_u16::<LittleEndian>()?;
    }
    let mut item_ids = Vec::with_capacity(n_rows);
    for _ in 0..n_rows {
        let len = reader.read_u32::<LittleEndian>()? as usize;
        let mut buf = vec![0u8; len];
        reader.read_exact(&mut buf)?;
        item_ids.push(String::from_utf8(buf).map_err(|e| {
            ExtractionError::CacheCorrupt(format!("{}: non-utf8 item id: {e}", path.display()))
        })?);
    }
    Ok(CacheEntry {
        width,
        data,
        labels,
        item_ids,
    })
}
