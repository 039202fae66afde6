//! The encoder abstraction: anything that turns subword ids into per-layer
//! hidden states, plus a position-identifying stub used to validate pooling
//! end to end.

use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::tokenizer::SubwordTokenizer;
use super::ExtractionError;

/// How an encoder came to have its weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Weights were loaded from a file, not sampled.
    Pretrained,
    /// The architecture's native initialization under a recorded seed.
    Reinitialized,
    /// Untrained bidirectional recurrent encoder over subword embeddings.
    RandomContextual,
    /// Deterministic test encoder with analytically known outputs.
    Stub,
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            EncoderKind::Pretrained => "pretrained",
            EncoderKind::Reinitialized => "reinitialized",
            EncoderKind::RandomContextual => "random_contextual",
            EncoderKind::Stub => "stub",
        };
        f.write_str(name)
    }
}

/// Static description of an encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderMeta {
    pub model_id: String,
    /// Contextual layer count L; valid layer indices are 0 (embedding output)
    /// through L.
    pub num_layers: usize,
    /// Width of the contextual layers, i.e. the probe input width.
    pub hidden_size: usize,
    pub max_sequence_length: usize,
    pub kind: EncoderKind,
}

impl EncoderMeta {
    pub fn validate(&self) -> Result<(), ExtractionError> {
        if self.num_layers < 1 || self.hidden_size < 1 {
            return Err(ExtractionError::Configuration(format!(
                "encoder {} must have at least one layer and one hidden unit",
                self.model_id
            )));
        }
        Ok(())
    }
}

/// How a sentence-level representation is read off the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SequenceConvention {
    /// The hidden state at a fixed sequence-classification token position.
    SpecialToken { position: usize },
    /// The arithmetic mean of per-position outputs.
    MeanPool,
}

/// Hidden states for one encoded sentence.
#[derive(Debug, Clone)]
pub struct EncodedSentence {
    /// One `(positions × width)` matrix per layer: index 0 is the embedding
    /// output, 1..=L the contextual layers. Widths may differ between the
    /// embedding layer and contextual layers.
    pub states: Vec<Array2<f32>>,
    /// Position of the first content subword within each state matrix.
    pub content_offset: usize,
}

/// A model that encodes subword id sequences into layer-wise hidden states.
pub trait Encoder: Send + Sync {
    fn meta(&self) -> &EncoderMeta;

    fn tokenizer(&self) -> &dyn SubwordTokenizer;

    /// The sentence-representation convention, if the architecture has one.
    fn sequence_convention(&self) -> Option<SequenceConvention>;

    /// How many content subwords fit once special tokens are accounted for.
    fn content_budget(&self) -> usize;

    /// Encodes content subword ids (no special tokens; the encoder adds its
    /// own). `content_ids.len()` must be within `content_budget`.
    fn encode(&self, content_ids: &[u32]) -> Result<EncodedSentence, ExtractionError>;
}

/// A stub encoder whose layer-ℓ hidden state at position p is exactly the
/// vector (ℓ, p). Pooling outputs over it are analytically known, which makes
/// it the oracle for alignment and pooling tests.
pub struct StubEncoder {
    meta: EncoderMeta,
    tokenizer: Box<dyn SubwordTokenizer>,
    /// When true the stub mimics transformer-style wrapping: a special token
    /// at position 0 (and one after the content), so content starts at 1.
    prepend_special: bool,
}

impl StubEncoder {
    pub fn new(
        num_layers: usize,
        max_sequence_length: usize,
        tokenizer: Box<dyn SubwordTokenizer>,
        prepend_special: bool,
    ) -> StubEncoder {
        StubEncoder {
            meta: EncoderMeta {
                model_id: format!("stub-{num_layers}l"),
                num_layers,
                hidden_size: 2,
                max_sequence_length,
                kind: EncoderKind::Stub,
            },
            tokenizer,
            prepend_special,
        }
    }
}

impl Encoder for StubEncoder {
    fn meta(&self) -> &EncoderMeta {
        &self.meta
    }

    fn tokenizer(&self) -> &dyn SubwordTokenizer {
        self.tokenizer.as_ref()
    }

    fn sequence_convention(&self) -> Option<SequenceConvention> {
        Some(SequenceConvention::SpecialToken { position: 0 })
    }

    fn content_budget(&self) -> usize {
        if self.prepend_special {
            self.meta.max_sequence_length.saturating_sub(2)
        } else {
            self.meta.max_sequence_length
        }
    }

    fn encode(&self, content_ids: &[u32]) -> Result<EncodedSentence, ExtractionError> {
        if content_ids.len() > self.content_budget() {
            return Err(ExtractionError::Configuration(format!(
                "sentence of {} subwords exceeds the content budget {}",
                content_ids.len(),
                self.content_budget()
            )));
        }
        let (len, offset) = if self.prepend_special {
            (content_ids.len() + 2, 1)
        } else {
            (content_ids.len(), 0)
        };
        let states = (0..=self.meta.num_layers)
            .map(|layer| {
                Array2::from_shape_fn((len, 2), |(pos, dim)| {
                    if dim == 0 {
                        layer as f32
                    } else {
                        pos as f32
                    }
                })
            })
            .collect();
        Ok(EncodedSentence {
            states,
            content_offset: offset,
        })
    }
}
