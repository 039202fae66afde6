//! A compact masked-LM-style transformer encoder: token + position embeddings
//! with layer norm, then post-norm blocks of multi-head self-attention and a
//! GELU feed-forward. Weights are either sampled under a seed (the
//! architecture's native scheme: N(0, 0.02) matrices, zero biases, unit layer
//! norms) or loaded from a weights file.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::encoder::{EncodedSentence, Encoder, EncoderKind, EncoderMeta, SequenceConvention};
use super::tokenizer::{SubwordTokenizer, BOS_ID, EOS_ID};
use super::ExtractionError;

const INIT_STD: f64 = 0.02;

/// Architecture of a [`TransformerEncoder`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub max_sequence_length: usize,
    pub vocab_size: usize,
    pub layer_norm_eps: f32,
}

impl TransformerConfig {
    pub fn new(num_layers: usize, hidden_size: usize, num_heads: usize) -> TransformerConfig {
        TransformerConfig {
            num_layers,
            hidden_size,
            num_heads,
            ffn_size: hidden_size * 4,
            max_sequence_length: 512,
            vocab_size: 4096,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn with_max_sequence_length(mut self, max: usize) -> TransformerConfig {
        self.max_sequence_length = max;
        self
    }

    pub fn with_vocab_size(mut self, vocab: usize) -> TransformerConfig {
        self.vocab_size = vocab;
        self
    }

    fn validate(&self) -> Result<(), ExtractionError> {
        if self.num_layers < 1 || self.hidden_size < 1 {
            return Err(ExtractionError::Configuration(
                "transformer needs at least one layer and one hidden unit".to_string(),
            ));
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(ExtractionError::Configuration(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if self.max_sequence_length < 3 {
            return Err(ExtractionError::Configuration(
                "max_sequence_length must cover the special tokens plus content".to_string(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LayerNorm {
    gamma: Array1<f32>,
    beta: Array1<f32>,
}

impl LayerNorm {
    fn unit(size: usize) -> LayerNorm {
        LayerNorm {
            gamma: Array1::ones(size),
            beta: Array1::zeros(size),
        }
    }

    fn apply(&self, x: &Array2<f32>, eps: f32) -> Array2<f32> {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let mean = row.sum() / row.len() as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / row.len() as f32;
            let denom = (var + eps).sqrt();
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) / denom * self.gamma[i] + self.beta[i];
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
struct TransformerBlock {
    wq: Array2<f32>,
    bq: Array1<f32>,
    wk: Array2<f32>,
    bk: Array1<f32>,
    wv: Array2<f32>,
    bv: Array1<f32>,
    wo: Array2<f32>,
    bo: Array1<f32>,
    ln_attn: LayerNorm,
    ffn_w1: Array2<f32>,
    ffn_b1: Array1<f32>,
    ffn_w2: Array2<f32>,
    ffn_b2: Array1<f32>,
    ln_ffn: LayerNorm,
}

#[derive(Debug, Clone)]
struct TransformerWeights {
    token_embeddings: Array2<f32>,
    position_embeddings: Array2<f32>,
    ln_embed: LayerNorm,
    blocks: Vec<TransformerBlock>,
}

fn sample_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    Array2::from_shape_fn((rows, cols), |_| normal.sample(rng) as f32)
}

impl TransformerWeights {
    fn random(config: &TransformerConfig, seed: u64) -> TransformerWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden_size;
        let token_embeddings = sample_matrix(config.vocab_size, h, &mut rng);
        let position_embeddings = sample_matrix(config.max_sequence_length, h, &mut rng);
        let blocks = (0..config.num_layers)
            .map(|_| TransformerBlock {
                wq: sample_matrix(h, h, &mut rng),
                bq: Array1::zeros(h),
                wk: sample_matrix(h, h, &mut rng),
                bk: Array1::zeros(h),
                wv: sample_matrix(h, h, &mut rng),
                bv: Array1::zeros(h),
                wo: sample_matrix(h, h, &mut rng),
                bo: Array1::zeros(h),
                ln_attn: LayerNorm::unit(h),
                ffn_w1: sample_matrix(h, config.ffn_size, &mut rng),
                ffn_b1: Array1::zeros(config.ffn_size),
                ffn_w2: sample_matrix(config.ffn_size, h, &mut rng),
                ffn_b2: Array1::zeros(h),
                ln_ffn: LayerNorm::unit(h),
            })
            .collect();
        TransformerWeights {
            token_embeddings,
            position_embeddings,
            ln_embed: LayerNorm::unit(h),
            blocks,
        }
    }

    fn tensors(&self) -> Vec<&Array2<f32>> {
        let mut out = vec![&self.token_embeddings, &self.position_embeddings];
        for b in &self.blocks {
            out.extend([&b.wq, &b.wk, &b.wv, &b.wo, &b.ffn_w1, &b.ffn_w2]);
        }
        out
    }

    fn vectors(&self) -> Vec<&Array1<f32>> {
        let mut out = vec![&self.ln_embed.gamma, &self.ln_embed.beta];
        for b in &self.blocks {
            out.extend([
                &b.bq,
                &b.bk,
                &b.bv,
                &b.bo,
                &b.ln_attn.gamma,
                &b.ln_attn.beta,
                &b.ffn_b1,
                &b.ffn_b2,
                &b.ln_ffn.gamma,
                &b.ln_ffn.beta,
            ]);
        }
        out
    }
}

fn gelu(x: f32) -> f32 {
    // tanh approximation
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

fn softmax_rows_inplace(m: &mut Array2<f32>) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// A seeded or file-loaded transformer encoder with its tokenizer.
pub struct TransformerEncoder {
    config: TransformerConfig,
    meta: EncoderMeta,
    tokenizer: Box<dyn SubwordTokenizer>,
    weights: TransformerWeights,
    init_seed: Option<u64>,
}

impl TransformerEncoder {
    /// Builds an encoder with freshly sampled weights (the native scheme under
    /// `seed`).
    pub fn random(
        model_id: impl Into<String>,
        config: TransformerConfig,
        tokenizer: Box<dyn SubwordTokenizer>,
        seed: u64,
        kind: EncoderKind,
    ) -> Result<TransformerEncoder, ExtractionError> {
        config.validate()?;
        if tokenizer.vocab_size() > config.vocab_size {
            return Err(ExtractionError::Configuration(format!(
                "tokenizer vocab {} exceeds embedding table {}",
                tokenizer.vocab_size(),
                config.vocab_size
            )));
        }
        let weights = TransformerWeights::random(&config, seed);
        let meta = EncoderMeta {
            model_id: model_id.into(),
            num_layers: config.num_layers,
            hidden_size: config.hidden_size,
            max_sequence_length: config.max_sequence_length,
            kind,
        };
        meta.validate()?;
        Ok(TransformerEncoder {
            config,
            meta,
            tokenizer,
            weights,
            init_seed: Some(seed),
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn init_seed(&self) -> Option<u64> {
        self.init_seed
    }

    /// SHA-256 over the little-endian byte stream of all weights.
    pub fn weights_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for tensor in self.weights.tensors() {
            for v in tensor.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        for vector in self.weights.vectors() {
            for v in vector.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        crate::corpus::hex_digest(hasher)
    }

    /// Writes config and weights to a binary file (`LPTW0001` header, config
    /// as JSON block, then f32 LE tensors in declaration order).
    pub fn save_weights(&self, path: impl AsRef<Path>) -> Result<(), ExtractionError> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        out.write_all(b"LPTW0001")?;
        let config_json = serde_json::to_vec(&self.config).map_err(|e| {
            ExtractionError::Configuration(format!("unserializable config: {e}"))
        })?;
        out.write_u32::<LittleEndian>(config_json.len() as u32)?;
        out.write_all(&config_json)?;
        for tensor in self.weights.tensors() {
            for v in tensor.iter() {
                out.write_f32::<LittleEndian>(*v)?;
            }
        }
        for vector in self.weights.vectors() {
            for v in vector.iter() {
                out.write_f32::<LittleEndian>(*v)?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Loads an encoder whose weights come from a file; its kind is
    /// `pretrained`.
    pub fn from_weights_file(
        model_id: impl Into<String>,
        path: impl AsRef<Path>,
        tokenizer: Box<dyn SubwordTokenizer>,
    ) -> Result<TransformerEncoder, ExtractionError> {
        let path = path.as_ref();
        let mut reader = BufReader::new(fs::File::open(path)?);
        let mut magic = [0u8; 8];
        reader.read_exact(&mut magic)?;
        if &magic != b"LPTW0001" {
            return Err(ExtractionError::Configuration(format!(
                "{}: not a transformer weights file",
                path.display()
            )));
        }
        let config_len = reader.read_u32::<LittleEndian>()? as usize;
        let mut config_json = vec![0u8; config_len];
        reader.read_exact(&mut config_json)?;
        let config: TransformerConfig = serde_json::from_slice(&config_json).map_err(|e| {
            ExtractionError::Configuration(format!("{}: bad config block: {e}", path.display()))
        })?;
        config.validate()?;

        // Rebuild the weight containers at the right shapes, then fill them in
        // the order save_weights wrote them.
        let mut weights = TransformerWeights::random(&config, 0);
        {
            let mut fill = |target: &mut [f32]| -> Result<(), ExtractionError> {
                for v in target.iter_mut() {
                    *v = reader.read_f32::<LittleEndian>()?;
                }
                Ok(())
            };
            fill(weights.token_embeddings.as_slice_mut().unwrap())?;
            fill(weights.position_embeddings.as_slice_mut().unwrap())?;
            for b in &mut weights.blocks {
                for tensor in [
                    &mut b.wq,
                    &mut b.wk,
                    &mut b.wv,
                    &mut b.wo,
                    &mut b.ffn_w1,
                    &mut b.ffn_w2,
                ] {
                    fill(tensor.as_slice_mut().unwrap())?;
                }
            }
            fill(weights.ln_embed.gamma.as_slice_mut().unwrap())?;
            fill(weights.ln_embed.beta.as_slice_mut().unwrap())?;
            for b in &mut weights.blocks {
                for vector in [
                    &mut b.bq,
                    &mut b.bk,
                    &mut b.bv,
                    &mut b.bo,
                    &mut b.ln_attn.gamma,
                    &mut b.ln_attn.beta,
                    &mut b.ffn_b1,
                    &mut b.ffn_b2,
                    &mut b.ln_ffn.gamma,
                    &mut b.ln_ffn.beta,
                ] {
                    fill(vector.as_slice_mut().unwrap())?;
                }
            }
        }

        let meta = EncoderMeta {
            model_id: model_id.into(),
            num_layers: config.num_layers,
            hidden_size: config.hidden_size,
            max_sequence_length: config.max_sequence_length,
            kind: EncoderKind::Pretrained,
        };
        Ok(TransformerEncoder {
            config,
            meta,
            tokenizer,
            weights,
            init_seed: None,
        })
    }

    fn attention(&self, block: &TransformerBlock, x: &Array2<f32>) -> Array2<f32> {
        let len = x.nrows();
        let h = self.config.hidden_size;
        let heads = self.config.num_heads;
        let head_dim = h / heads;
        let scale = 1.0 / (head_dim as f32).sqrt();

        let q = x.dot(&block.wq) + &block.bq;
        let k = x.dot(&block.wk) + &block.bk;
        let v = x.dot(&block.wv) + &block.bv;

        let mut context = Array2::<f32>::zeros((len, h));
        for head in 0..heads {
            let cols = head * head_dim..(head + 1) * head_dim;
            let qh = q.slice(ndarray::s![.., cols.clone()]);
            let kh = k.slice(ndarray::s![.., cols.clone()]);
            let vh = v.slice(ndarray::s![.., cols.clone()]);
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|s| s * scale);
            softmax_rows_inplace(&mut scores);
            let out = scores.dot(&vh);
            context.slice_mut(ndarray::s![.., cols]).assign(&out);
        }
        context.dot(&block.wo) + &block.bo
    }
}

impl Encoder for TransformerEncoder {
    fn meta(&self) -> &EncoderMeta {
        &self.meta
    }

    fn tokenizer(&self) -> &dyn SubwordTokenizer {
        self.tokenizer.as_ref()
    }

    fn sequence_convention(&self) -> Option<SequenceConvention> {
        // The sequence-classification token is the leading special token.
        Some(SequenceConvention::SpecialToken { position: 0 })
    }

    fn content_budget(&self) -> usize {
        self.config.max_sequence_length - 2
    }

    fn encode(&self, content_ids: &[u32]) -> Result<EncodedSentence, ExtractionError> {
        if content_ids.len() > self.content_budget() {
            return Err(ExtractionError::Configuration(format!(
                "sentence of {} subwords exceeds the content budget {}",
                content_ids.len(),
                self.content_budget()
            )));
        }
        let mut ids = Vec::with_capacity(content_ids.len() + 2);
        ids.push(BOS_ID);
        ids.extend_from_slice(content_ids);
        ids.push(EOS_ID);
        for &id in &ids {
            if id as usize >= self.config.vocab_size {
                return Err(ExtractionError::Configuration(format!(
                    "subword id {id} outside the vocab of size {}",
                    self.config.vocab_size
                )));
            }
        }

        let len = ids.len();
        let h = self.config.hidden_size;
        let eps = self.config.layer_norm_eps;
        let mut x = Array2::<f32>::zeros((len, h));
        for (pos, &id) in ids.iter().enumerate() {
            let emb = &self.weights.token_embeddings.row(id as usize)
                + &self.weights.position_embeddings.row(pos);
            x.row_mut(pos).assign(&emb);
        }
        x = self.weights.ln_embed.apply(&x, eps);

        let mut states = Vec::with_capacity(self.config.num_layers + 1);
        states.push(x.clone());
        for block in &self.weights.blocks {
            let attn = self.attention(block, &x);
            x = block.ln_attn.apply(&(&x + &attn), eps);
            let inner = (x.dot(&block.ffn_w1) + &block.ffn_b1).mapv(gelu);
            let ffn = inner.dot(&block.ffn_w2) + &block.ffn_b2;
            x = block.ln_ffn.apply(&(&x + &ffn), eps);
            states.push(x.clone());
        }
        Ok(EncodedSentence {
            states,
            content_offset: 1,
        })
    }
}

/// Mean over axis 0, used by mean-pooling consumers.
pub fn mean_rows(m: &Array2<f32>) -> Array1<f32> {
    m.mean_axis(Axis(0)).expect("non-empty matrix")
}
