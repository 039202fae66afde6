//! Subword tokenization behind a trait, with character spans so words can be
//! aligned back to subword positions.

use std::fmt;

/// A half-open character-offset range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CharSpan {
    pub start: usize,
    pub end: usize,
}

impl CharSpan {
    pub fn new(start: usize, end: usize) -> CharSpan {
        CharSpan { start, end }
    }

    pub fn overlaps(&self, other: &CharSpan) -> bool {
        self.start.max(other.start) < self.end.min(other.end)
    }
}

impl fmt::Display for CharSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

/// One subword: a vocabulary id plus the character span it covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Subword {
    pub id: u32,
    pub span: CharSpan,
}

/// Reserved vocabulary slots shared by all tokenizers in this crate.
pub const BOS_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const PAD_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const FIRST_CONTENT_ID: u32 = 4;

/// Splits text into subwords over a fixed-size id space.
pub trait SubwordTokenizer: Send + Sync {
    /// Stable identifier recorded in cache manifests.
    fn tokenizer_id(&self) -> &str;

    fn vocab_size(&self) -> usize;

    /// Content subwords with character spans; special tokens are the
    /// encoder's business.
    fn tokenize(&self, text: &str) -> Vec<Subword>;
}

/// Whitespace-delimited word spans of a text, in character offsets.
pub fn word_spans(text: &str) -> Vec<CharSpan> {
    let mut spans = Vec::new();
    let mut start = None;
    let mut i = 0;
    for ch in text.chars() {
        if ch.is_whitespace() {
            if let Some(s) = start.take() {
                spans.push(CharSpan::new(s, i));
            }
        } else if start.is_none() {
            start = Some(i);
        }
        i += 1;
    }
    if let Some(s) = start {
        spans.push(CharSpan::new(s, i));
    }
    spans
}

/// A deterministic toy subword tokenizer: each whitespace word is cut into
/// chunks of at most `chunk_len` characters, and each chunk hashes into the
/// content id range. Serves desk-scale encoders; real-model tokenizers plug
/// in behind the same trait.
#[derive(Debug, Clone)]
pub struct ChunkTokenizer {
    chunk_len: usize,
    vocab_size: usize,
    id: String,
}

impl ChunkTokenizer {
    pub fn new(chunk_len: usize, vocab_size: usize) -> ChunkTokenizer {
        assert!(chunk_len >= 1, "chunk_len must be at least 1");
        assert!(
            vocab_size > FIRST_CONTENT_ID as usize,
            "vocab must hold the reserved ids plus content"
        );
        ChunkTokenizer {
            chunk_len,
            vocab_size,
            id: format!("chunk{chunk_len}-v{vocab_size}"),
        }
    }

    fn chunk_id(&self, chunk: &str) -> u32 {
        let content_slots = self.vocab_size as u64 - FIRST_CONTENT_ID as u64;
        FIRST_CONTENT_ID + (fnv1a64(chunk.as_bytes()) % content_slots) as u32
    }
}

impl SubwordTokenizer for ChunkTokenizer {
    fn tokenizer_id(&self) -> &str {
        &self.id
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn tokenize(&self, text: &str) -> Vec<Subword> {
        let mut subwords = Vec::new();
        for word in word_spans(text) {
            let chars: Vec<char> = text
                .chars()
                .skip(word.start)
                .take(word.end - word.start)
                .collect();
            let mut offset = 0;
            while offset < chars.len() {
                let len = self.chunk_len.min(chars.len() - offset);
                let chunk: String = chars[offset..offset + len].iter().collect();
                subwords.push(Subword {
                    id: self.chunk_id(&chunk),
                    span: CharSpan::new(word.start + offset, word.start + offset + len),
                });
                offset += len;
            }
        }
        subwords
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}
