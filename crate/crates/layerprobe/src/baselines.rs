//! Random baselines for probe interpretation: re-initialized encoder
//! architectures (word-level tasks) and an untrained bidirectional LSTM with
//! mean pooling (sentence-level tasks), plus the gain metric.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::control::check_fraction;
use crate::extraction::{
    EncodedSentence, Encoder, EncoderKind, EncoderMeta, ExtractionError, SequenceConvention,
    SubwordTokenizer, TransformerConfig, TransformerEncoder,
};

/// Default sequence budget for the recurrent baseline, which has no special
/// tokens or position table of its own.
pub const DEFAULT_RANDCTX_MAX_LEN: usize = 4096;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("cannot resolve source model {0:?}")]
    UnresolvableSource(String),
    #[error("{name} must be in [0, 1], got {value}")]
    Domain { name: &'static str, value: f64 },
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
}

/// Recipe for re-initializing a known architecture under a seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReinitSpec {
    pub source_model_id: String,
    pub seed: u64,
}

impl ReinitSpec {
    /// The id such encoders carry in manifests and reports.
    pub fn encoder_id(&self) -> String {
        format!("reinit:{}:{}", self.source_model_id, self.seed)
    }
}

/// Resolves model ids to architectures and tokenizers; implemented by the
/// experiment configuration.
pub trait ModelRegistry {
    fn architecture(&self, model_id: &str) -> Option<TransformerConfig>;
    fn tokenizer(&self, model_id: &str) -> Option<Box<dyn SubwordTokenizer>>;
}

/// Builds an encoder with the source's architecture, tokenizer, and sequence
/// budget but freshly sampled weights (the architecture's native scheme under
/// the spec's seed).
pub fn reinitialize_encoder(
    spec: &ReinitSpec,
    registry: &dyn ModelRegistry,
) -> Result<TransformerEncoder, BaselineError> {
    let config = registry
        .architecture(&spec.source_model_id)
        .ok_or_else(|| BaselineError::UnresolvableSource(spec.source_model_id.clone()))?;
    let tokenizer = registry
        .tokenizer(&spec.source_model_id)
        .ok_or_else(|| BaselineError::UnresolvableSource(spec.source_model_id.clone()))?;
    Ok(TransformerEncoder::random(
        spec.encoder_id(),
        config,
        tokenizer,
        spec.seed,
        EncoderKind::Reinitialized,
    )?)
}

/// Recipe for the untrained bidirectional recurrent encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RandomContextualSpec {
    /// Tokenizer id the encoder's vocabulary comes from.
    pub vocab_source: String,
    pub embedding_dim: usize,
    pub recurrent_hidden_dim_per_direction: usize,
    pub seed: u64,
}

impl RandomContextualSpec {
    /// Dimensions matched to a probed encoder so probe capacity is held
    /// constant: embeddings at the model's hidden size, half that per
    /// direction.
    pub fn matched_to(tokenizer_id: &str, hidden_size: usize, seed: u64) -> RandomContextualSpec {
        RandomContextualSpec {
            vocab_source: tokenizer_id.to_string(),
            embedding_dim: hidden_size,
            recurrent_hidden_dim_per_direction: (hidden_size / 2).max(1),
            seed,
        }
    }

    pub fn encoder_id(&self) -> String {
        format!("randctx:{}:{}", self.vocab_source, self.seed)
    }

    /// Output width: both directions concatenated.
    pub fn output_dim(&self) -> usize {
        2 * self.recurrent_hidden_dim_per_direction
    }
}

/// One direction's LSTM parameters. Gate order is input, forget, cell,
/// output. Weights are sampled U(-1/√h, 1/√h) and never trained.
struct LstmDirection {
    w_input: Array2<f32>,
    w_hidden: Array2<f32>,
    bias: Array1<f32>,
}

impl LstmDirection {
    fn random(embedding_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> LstmDirection {
        let bound = 1.0 / (hidden as f64).sqrt();
        let uniform = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            Array2::from_shape_fn((rows, cols), |_| {
                let u: f64 = rng.random();
                ((u * 2.0 - 1.0) * bound) as f32
            })
        };
        LstmDirection {
            w_input: uniform(4 * hidden, embedding_dim, rng),
            w_hidden: uniform(4 * hidden, hidden, rng),
            bias: Array1::zeros(4 * hidden),
        }
    }

    /// Runs the cell over `inputs` (rows = time steps) and returns the hidden
    /// state at every step.
    fn run(&self, inputs: &Array2<f32>, reversed: bool) -> Array2<f32> {
        let steps = inputs.nrows();
        let hidden = self.w_hidden.ncols();
        let mut h = Array1::<f32>::zeros(hidden);
        let mut c = Array1::<f32>::zeros(hidden);
        let mut outputs = Array2::<f32>::zeros((steps, hidden));
        let order: Vec<usize> = if reversed {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            let x = inputs.row(t);
            let gates = self.w_input.dot(&x) + self.w_hidden.dot(&h) + &self.bias;
            let (i_gate, rest) = gates.view().split_at(Axis(0), hidden);
            let (f_gate, rest) = rest.split_at(Axis(0), hidden);
            let (g_gate, o_gate) = rest.split_at(Axis(0), hidden);
            for j in 0..hidden {
                let i = sigmoid(i_gate[j]);
                let f = sigmoid(f_gate[j]);
                let g = g_gate[j].tanh();
                let o = sigmoid(o_gate[j]);
                c[j] = f * c[j] + i * g;
                h[j] = o * c[j].tanh();
            }
            outputs.row_mut(t).assign(&h);
        }
        outputs
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Untrained single-layer bidirectional LSTM over subword embeddings. Exposes
/// one contextual layer; its sentence vector is the arithmetic mean of
/// per-position outputs.
pub struct BiLstmEncoder {
    meta: EncoderMeta,
    spec: RandomContextualSpec,
    tokenizer: Box<dyn SubwordTokenizer>,
    embeddings: Array2<f32>,
    forward: LstmDirection,
    backward: LstmDirection,
}

impl BiLstmEncoder {
    pub fn spec(&self) -> &RandomContextualSpec {
        &self.spec
    }
}

/// Builds the random contextual encoder. Embeddings are i.i.d. zero-mean
/// Gaussian with variance `1/embedding_dim`; all recurrent weights are
/// sampled, none trained. Deterministic per seed.
pub fn build_random_contextual_encoder(
    spec: RandomContextualSpec,
    tokenizer: Box<dyn SubwordTokenizer>,
) -> Result<BiLstmEncoder, BaselineError> {
    if spec.embedding_dim < 1 || spec.recurrent_hidden_dim_per_direction < 1 {
        return Err(BaselineError::InvalidSpec(
            "embedding and recurrent dims must be at least 1".to_string(),
        ));
    }
    if tokenizer.tokenizer_id() != spec.vocab_source {
        return Err(BaselineError::InvalidSpec(format!(
            "tokenizer {} does not match vocab_source {}",
            tokenizer.tokenizer_id(),
            spec.vocab_source
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let std = (1.0 / spec.embedding_dim as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    let embeddings = Array2::from_shape_fn(
        (tokenizer.vocab_size(), spec.embedding_dim),
        |_| normal.sample(&mut rng) as f32,
    );
    let hidden = spec.recurrent_hidden_dim_per_direction;
    let forward = LstmDirection::random(spec.embedding_dim, hidden, &mut rng);
    let backward = LstmDirection::random(spec.embedding_dim, hidden, &mut rng);
    let meta = EncoderMeta {
        model_id: spec.encoder_id(),
        num_layers: 1,
        hidden_size: spec.output_dim(),
        max_sequence_length: DEFAULT_RANDCTX_MAX_LEN,
        kind: EncoderKind::RandomContextual,
    };
    Ok(BiLstmEncoder {
        meta,
        spec,
        tokenizer,
        embeddings,
        forward,
        backward,
    })
}

impl Encoder for BiLstmEncoder {
    fn meta(&self) -> &EncoderMeta {
        &self.meta
    }

    fn tokenizer(&self) -> &dyn SubwordTokenizer {
        self.tokenizer.as_ref()
    }

    fn sequence_convention(&self) -> Option<SequenceConvention> {
        Some(SequenceConvention::MeanPool)
    }

    fn content_budget(&self) -> usize {
        self.meta.max_sequence_length
    }

    fn encode(&self, content_ids: &[u32]) -> Result<EncodedSentence, ExtractionError> {
        if content_ids.is_empty() {
            return Err(ExtractionError::Configuration(
                "recurrent encoder needs at least one subword".to_string(),
            ));
        }
        if content_ids.len() > self.content_budget() {
            return Err(ExtractionError::Configuration(format!(
                "sentence of {} subwords exceeds the content budget {}",
                content_ids.len(),
                self.content_budget()
            )));
        }
        let steps = content_ids.len();
        let mut inputs = Array2::<f32>::zeros((steps, self.spec.embedding_dim));
        for (t, &id) in content_ids.iter().enumerate() {
            if id as usize >= self.embeddings.nrows() {
                return Err(ExtractionError::Configuration(format!(
                    "subword id {id} outside the vocab of size {}",
                    self.embeddings.nrows()
                )));
            }
            inputs.row_mut(t).assign(&self.embeddings.row(id as usize));
        }
        let fwd = self.forward.run(&inputs, false);
        let bwd = self.backward.run(&inputs, true);
        let hidden = self.spec.recurrent_hidden_dim_per_direction;
        let mut outputs = Array2::<f32>::zeros((steps, 2 * hidden));
        outputs.slice_mut(ndarray::s![.., ..hidden]).assign(&fwd);
        outputs.slice_mut(ndarray::s![.., hidden..]).assign(&bwd);
        Ok(EncodedSentence {
            states: vec![inputs, outputs],
            content_offset: 0,
        })
    }
}

/// Pretrained-probe F1 minus random-baseline F1, in percentage points.
pub fn gain(f1_plm: f64, f1_random: f64) -> Result<f64, BaselineError> {
    check_fraction("f1_plm", f1_plm).map_err(domain_from_control)?;
    check_fraction("f1_random", f1_random).map_err(domain_from_control)?;
    Ok(100.0 * (f1_plm - f1_random))
}

fn domain_from_control(err: crate::control::ControlError) -> BaselineError {
    match err {
        crate::control::ControlError::Domain { name, value } => {
            BaselineError::Domain { name, value }
        }
        other => BaselineError::InvalidSpec(other.to_string()),
    }
}
