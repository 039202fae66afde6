//! The probe classifier: a one-hidden-layer MLP (ReLU hidden, softmax output)
//! trained on frozen representations by seeded mini-batch gradient descent
//! with validation-accuracy early stopping.
//!
//! Parameters are held at f64 so analytic gradients can be checked against
//! central finite differences; serialized parameters are f32.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default hidden width; overriding it is recorded in the config.
pub const DEFAULT_HIDDEN_DIM: usize = 50;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("input width {got} does not match probe input_dim {expected}")]
    Shape { expected: usize, got: usize },
    #[error("label {label} appears in {split} but not in the training data")]
    LabelSpace { label: usize, split: &'static str },
    #[error("label {label} is outside the configured {num_classes} classes")]
    LabelRange { label: usize, num_classes: usize },
    #[error("training diverged: loss became non-finite at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("evaluation set is empty")]
    EmptyEvaluation,
    #[error("dataset is empty or feature/label lengths disagree")]
    MalformedDataset,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: not a probe file ({reason})")]
    Format { path: std::path::PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Training hyperparameters; none are prescribed by the probed-model side, so
/// all are explicit and echoed into reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHyperparams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub l2_weight: f64,
}

impl Default for TrainingHyperparams {
    fn default() -> Self {
        TrainingHyperparams {
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            l2_weight: 0.0,
        }
    }
}

/// Probe architecture plus training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    /// Set when hidden_dim was explicitly changed from the 50-unit default.
    pub hidden_dim_overridden: bool,
    pub training: TrainingHyperparams,
}

impl ProbeConfig {
    pub fn new(input_dim: usize, num_classes: usize) -> ProbeConfig {
        ProbeConfig {
            input_dim,
            hidden_dim: DEFAULT_HIDDEN_DIM,
            num_classes,
            hidden_dim_overridden: false,
            training: TrainingHyperparams::default(),
        }
    }

    pub fn with_hidden_dim(mut self, hidden_dim: usize) -> ProbeConfig {
        self.hidden_dim_overridden = hidden_dim != DEFAULT_HIDDEN_DIM;
        self.hidden_dim = hidden_dim;
        self
    }

    pub fn with_training(mut self, training: TrainingHyperparams) -> ProbeConfig {
        self.training = training;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> ProbeConfig {
        self.training.seed = seed;
        self
    }

    fn validate(&self) -> Result<(), ProbeError> {
        if self.num_classes < 2 {
            return Err(ProbeError::Config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(ProbeError::Config("zero-sized layer".to_string()));
        }
        if self.training.batch_size == 0 || self.training.max_epochs == 0 {
            return Err(ProbeError::Config(
                "batch_size and max_epochs must be positive".to_string(),
            ));
        }
        if self.training.learning_rate.is_nan() || self.training.learning_rate <= 0.0 {
            return Err(ProbeError::Config(format!(
                "learning_rate must be positive, got {}",
                self.training.learning_rate
            )));
        }
        if self.training.l2_weight < 0.0 {
            return Err(ProbeError::Config(format!(
                "l2_weight must be non-negative, got {}",
                self.training.l2_weight
            )));
        }
        Ok(())
    }

    /// Total trainable parameter count: `m*n + m + k*m + k`.
    pub fn parameter_count(&self) -> usize {
        let (n, m, k) = (self.input_dim, self.hidden_dim, self.num_classes);
        m * n + m + k * m + k
    }
}

/// MLP parameters: hidden layer `(w1, b1)` and output layer `(w2, b2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl ProbeParams {
    /// Seeded uniform Glorot initialization; the draw order is fixed, so a
    /// seed fully determines the parameters.
    pub fn init(config: &ProbeConfig, rng: &mut ChaCha8Rng) -> ProbeParams {
        let (n, m, k) = (config.input_dim, config.hidden_dim, config.num_classes);
        let sample = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                let u: f64 = rand::Rng::random(rng);
                data.push((u * 2.0 - 1.0) * bound);
            }
            Array2::from_shape_vec((rows, cols), data).expect("shape matches data")
        };
        let w1 = sample(m, n, rng);
        let w2 = sample(k, m, rng);
        ProbeParams {
            w1,
            b1: Array1::zeros(m),
            w2,
            b2: Array1::zeros(k),
        }
    }

    pub fn zeros(config: &ProbeConfig) -> ProbeParams {
        ProbeParams {
            w1: Array2::zeros((config.hidden_dim, config.input_dim)),
            b1: Array1::zeros(config.hidden_dim),
            w2: Array2::zeros((config.num_classes, config.hidden_dim)),
            b2: Array1::zeros(config.num_classes),
        }
    }
}

/// A frozen-representation dataset: one row per item.
#[derive(Debug, Clone)]
pub struct ProbeData {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl ProbeData {
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<ProbeData, ProbeError> {
        if features.nrows() != labels.len() || labels.is_empty() {
            return Err(ProbeError::MalformedDataset);
        }
        Ok(ProbeData { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Numerically safe row-wise softmax (max subtraction guards overflow).
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn params_finite(params: &ProbeParams) -> bool {
    params
        .w1
        .iter()
        .chain(params.b1.iter())
        .chain(params.w2.iter())
        .chain(params.b2.iter())
        .all(|v| v.is_finite())
}

/// Floors a probability for the log, without masking NaN: a NaN probability
/// must surface as a NaN loss so divergence is detected.
fn clamp_probability(p: f64) -> f64 {
    if p < f64::MIN_POSITIVE {
        f64::MIN_POSITIVE
    } else {
        p
    }
}

fn forward_hidden(params: &ProbeParams, x: &ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
    let pre = x.dot(&params.w1.t()) + &params.b1;
    let hidden = pre.mapv(|v| v.max(0.0));
    let logits = hidden.dot(&params.w2.t()) + &params.b2;
    (hidden, logits)
}

/// Mean cross-entropy over the batch plus an L2 penalty
/// `(l2/2)·(‖W1‖² + ‖W2‖²)` on the weight matrices (biases unpenalized).
pub fn loss_value(params: &ProbeParams, x: &ArrayView2<f64>, y: &[usize], l2_weight: f64) -> f64 {
    let (_, logits) = forward_hidden(params, x);
    let probs = softmax_rows(&logits);
    let n = y.len() as f64;
    let mut loss = 0.0;
    for (i, &label) in y.iter().enumerate() {
        loss -= clamp_probability(probs[(i, label)]).ln();
    }
    loss /= n;
    if l2_weight > 0.0 {
        let sq = params.w1.iter().map(|v| v * v).sum::<f64>()
            + params.w2.iter().map(|v| v * v).sum::<f64>();
        loss += 0.5 * l2_weight * sq;
    }
    loss
}

/// Loss together with analytic gradients for every parameter.
pub fn loss_and_gradients(
    params: &ProbeParams,
    x: &ArrayView2<f64>,
    y: &[usize],
    l2_weight: f64,
) -> (f64, ProbeParams) {
    let (hidden, logits) = forward_hidden(params, x);
    let probs = softmax_rows(&logits);
    let n = y.len() as f64;

    let mut loss = 0.0;
    for (i, &label) in y.iter().enumerate() {
        loss -= clamp_probability(probs[(i, label)]).ln();
    }
    loss /= n;

    // d loss / d logits = (softmax - onehot) / n
    let mut dlogits = probs;
    for (i, &label) in y.iter().enumerate() {
        dlogits[(i, label)] -= 1.0;
    }
    dlogits.mapv_inplace(|v| v / n);

    let mut dw2 = dlogits.t().dot(&hidden);
    let db2 = dlogits.sum_axis(Axis(0));
    let dhidden = dlogits.dot(&params.w2);
    // ReLU gate: zero where the pre-activation was non-positive.
    let dpre = &dhidden * &hidden.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let mut dw1 = dpre.t().dot(x);
    let db1 = dpre.sum_axis(Axis(0));

    if l2_weight > 0.0 {
        let sq = params.w1.iter().map(|v| v * v).sum::<f64>()
            + params.w2.iter().map(|v| v * v).sum::<f64>();
        loss += 0.5 * l2_weight * sq;
        dw1 += &(l2_weight * &params.w1);
        dw2 += &(l2_weight * &params.w2);
    }

    (
        loss,
        ProbeParams {
            w1: dw1,
            b1: db1,
            w2: dw2,
            b2: db2,
        },
    )
}

/// Per-epoch training log entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub validation_loss: f64,
    pub validation_accuracy: f64,
}

/// A trained probe: parameters from the best validation epoch plus the full
/// training log.
#[derive(Debug, Clone)]
pub struct TrainedProbe {
    pub params: ProbeParams,
    pub config: ProbeConfig,
    pub training_log: Vec<EpochStats>,
    /// Index into `training_log` of the epoch whose parameters were kept
    /// (maximum validation accuracy, earliest on ties).
    pub selected_epoch: usize,
}

impl TrainedProbe {
    /// Class probabilities for a single input vector.
    pub fn forward(&self, x: ArrayView1<f64>) -> Result<Array1<f64>, ProbeError> {
        probe_forward(self, x)
    }

    /// Argmax class per row (lowest index on ties).
    pub fn predict(&self, x: &ArrayView2<f64>) -> Result<Vec<usize>, ProbeError> {
        if x.ncols() != self.config.input_dim {
            return Err(ProbeError::Shape {
                expected: self.config.input_dim,
                got: x.ncols(),
            });
        }
        let (_, logits) = forward_hidden(&self.params, x);
        Ok(logits
            .rows()
            .into_iter()
            .map(|row| argmax(row.iter().cloned()))
            .collect())
    }
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_value {
            best = i;
            best_value = v;
        }
    }
    best
}

/// Softmax class probabilities `softmax(W2·relu(W1·x + b1) + b2)`.
pub fn probe_forward(probe: &TrainedProbe, x: ArrayView1<f64>) -> Result<Array1<f64>, ProbeError> {
    if x.len() != probe.config.input_dim {
        return Err(ProbeError::Shape {
            expected: probe.config.input_dim,
            got: x.len(),
        });
    }
    let x2 = x.insert_axis(Axis(0));
    let (_, logits) = forward_hidden(&probe.params, &x2);
    let probs = softmax_rows(&logits);
    Ok(probs.row(0).to_owned())
}

fn accuracy_of(params: &ProbeParams, data: &ProbeData) -> f64 {
    let (_, logits) = forward_hidden(params, &data.features.view());
    let mut correct = 0usize;
    for (i, &label) in data.labels.iter().enumerate() {
        if argmax(logits.row(i).iter().cloned()) == label {
            correct += 1;
        }
    }
    correct as f64 / data.labels.len() as f64
}

/// Trains the probe on `(train, validation)` and returns the parameters from
/// the best validation epoch. Deterministic for a fixed seed.
pub fn train_probe(
    train: &ProbeData,
    validation: &ProbeData,
    config: &ProbeConfig,
) -> Result<TrainedProbe, ProbeError> {
    config.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(ProbeError::MalformedDataset);
    }
    for data in [train, validation] {
        if data.dim() != config.input_dim {
            return Err(ProbeError::Shape {
                expected: config.input_dim,
                got: data.dim(),
            });
        }
    }
    for &label in train.labels.iter().chain(&validation.labels) {
        if label >= config.num_classes {
            return Err(ProbeError::LabelRange {
                label,
                num_classes: config.num_classes,
            });
        }
    }
    let train_labels: BTreeSet<usize> = train.labels.iter().copied().collect();
    for &label in &validation.labels {
        if !train_labels.contains(&label) {
            return Err(ProbeError::LabelSpace {
                label,
                split: "validation",
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.training.seed);
    let mut params = ProbeParams::init(config, &mut rng);
    let mut best_params = params.clone();
    let mut best_accuracy = f64::NEG_INFINITY;
    let mut selected_epoch = 0;
    let mut epochs_since_improvement = 0;
    let mut training_log = Vec::new();
    let mut indices: Vec<usize> = (0..train.len()).collect();
    let lr = config.training.learning_rate;
    let l2 = config.training.l2_weight;

    for epoch in 0..config.training.max_epochs {
        indices.shuffle(&mut rng);
        for batch in indices.chunks(config.training.batch_size) {
            let x = train.features.select(Axis(0), batch);
            let y: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let (loss, grads) = loss_and_gradients(&params, &x.view(), &y, l2);
            if !loss.is_finite() {
                return Err(ProbeError::Divergence { epoch });
            }
            params.w1 -= &(lr * &grads.w1);
            params.b1 -= &(lr * &grads.b1);
            params.w2 -= &(lr * &grads.w2);
            params.b2 -= &(lr * &grads.b2);
            // A step that blows parameters up is divergence even while the
            // saturated softmax still reports a finite loss.
            if !params_finite(&params) {
                return Err(ProbeError::Divergence { epoch });
            }
        }

        let train_loss = loss_value(&params, &train.features.view(), &train.labels, l2);
        let validation_loss =
            loss_value(&params, &validation.features.view(), &validation.labels, l2);
        if !train_loss.is_finite() || !validation_loss.is_finite() {
            return Err(ProbeError::Divergence { epoch });
        }
        let stats = EpochStats {
            epoch,
            train_loss,
            train_accuracy: accuracy_of(&params, train),
            validation_loss,
            validation_accuracy: accuracy_of(&params, validation),
        };
        let improved = stats.validation_accuracy > best_accuracy;
        if improved {
            best_accuracy = stats.validation_accuracy;
            best_params = params.clone();
            selected_epoch = epoch;
            epochs_since_improvement = 0;
        } else {
            epochs_since_improvement += 1;
        }
        training_log.push(stats);
        if epochs_since_improvement >= config.training.patience {
            break;
        }
    }

    Ok(TrainedProbe {
        params: best_params,
        config: config.clone(),
        training_log,
        selected_epoch,
    })
}

/// Fraction of items whose argmax class equals the gold label.
pub fn evaluate_token_accuracy(probe: &TrainedProbe, test: &ProbeData) -> Result<f64, ProbeError> {
    if test.is_empty() {
        return Err(ProbeError::EmptyEvaluation);
    }
    if test.dim() != probe.config.input_dim {
        return Err(ProbeError::Shape {
            expected: probe.config.input_dim,
            got: test.dim(),
        });
    }
    Ok(accuracy_of(&probe.params, test))
}

const PROBE_MAGIC: &[u8; 8] = b"LPPROBE1";

/// Sidecar content written next to the parameter file.
#[derive(Debug, Serialize, Deserialize)]
struct ProbeSidecar {
    config: ProbeConfig,
    training_log: Vec<EpochStats>,
    selected_epoch: usize,
}

impl TrainedProbe {
    /// Writes the parameters as a binary file (shape header + f32 data) and
    /// the config/log as a `.training.json` sidecar.
    ///
    /// Layout: magic `LPPROBE1`, then `n`, `m`, `k` as u32 LE, then W1
    /// (m×n, row-major), b1, W2 (k×m), b2 as f32 LE.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ProbeError> {
        let path = path.as_ref();
        let mut out = BufWriter::new(fs::File::create(path)?);
        out.write_all(PROBE_MAGIC)?;
        out.write_u32::<LittleEndian>(self.config.input_dim as u32)?;
        out.write_u32::<LittleEndian>(self.config.hidden_dim as u32)?;
        out.write_u32::<LittleEndian>(self.config.num_classes as u32)?;
        for v in self
            .params
            .w1
            .iter()
            .chain(self.params.b1.iter())
            .chain(self.params.w2.iter())
            .chain(self.params.b2.iter())
        {
            out.write_f32::<LittleEndian>(*v as f32)?;
        }
        out.flush()?;
        drop(out);

        let sidecar = ProbeSidecar {
            config: self.config.clone(),
            training_log: self.training_log.clone(),
            selected_epoch: self.selected_epoch,
        };
        let json = crate::metrics::to_canonical_json(&sidecar)?;
        fs::write(sidecar_path(path), json)?;
        Ok(())
    }

    /// Loads a probe saved by [`TrainedProbe::save`]. Parameters come back at
    /// f32 precision.
    pub fn load(path: impl AsRef<Path>) -> Result<TrainedProbe, ProbeError> {
        let path = path.as_ref();
        let mut reader = BufReader::new(fs::File::open(path)?);
        let mut magic = [0u8; 8];
        reader.read_exact(&mut magic)?;
        if &magic != PROBE_MAGIC {
            return Err(ProbeError::Format {
                path: path.to_path_buf(),
                reason: "bad magic".to_string(),
            });
        }
        let n = reader.read_u32::<LittleEndian>()? as usize;
        let m = reader.read_u32::<LittleEndian>()? as usize;
        let k = reader.read_u32::<LittleEndian>()? as usize;
        let mut read_matrix = |rows: usize, cols: usize| -> Result<Array2<f64>, ProbeError> {
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(reader.read_f32::<LittleEndian>()? as f64);
            }
            Ok(Array2::from_shape_vec((rows, cols), data).expect("shape matches data"))
        };
        let w1 = read_matrix(m, n)?;
        let b1 = read_matrix(1, m)?.row(0).to_owned();
        let w2 = read_matrix(k, m)?;
        let b2 = read_matrix(1, k)?.row(0).to_owned();

        let sidecar: ProbeSidecar =
            serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
        if sidecar.config.input_dim != n
            || sidecar.config.hidden_dim != m
            || sidecar.config.num_classes != k
        {
            return Err(ProbeError::Format {
                path: path.to_path_buf(),
                reason: "sidecar shape disagrees with binary header".to_string(),
            });
        }
        Ok(TrainedProbe {
            params: ProbeParams { w1, b1, w2, b2 },
            config: sidecar.config,
            training_log: sidecar.training_log,
            selected_epoch: sidecar.selected_epoch,
        })
    }
}

/// Path of the JSON sidecar for a probe parameter file.
pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".training.json");
    std::path::PathBuf::from(os)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn zero_probe(n: usize, m: usize, k: usize) -> TrainedProbe {
        let config = ProbeConfig::new(n, k).with_hidden_dim(m);
        TrainedProbe {
            params: ProbeParams::zeros(&config),
            config,
            training_log: vec![],
            selected_epoch: 0,
        }
    }

    #[test]
    fn zero_probe_is_uniform() {
        let probe = zero_probe(4, 3, 3);
        let out = probe.forward(array![1.0, -2.0, 0.5, 9.0].view()).unwrap();
        for v in out.iter() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    // Closed-form softmax check: b2 = (10, 0) with zero weights gives the
    // logistic value 1/(1+e^-10) for class 0.
    #[test]
    fn bias_only_probe_matches_closed_form() {
        let mut probe = zero_probe(2, 3, 2);
        probe.params.b2 = array![10.0, 0.0];
        let out = probe.forward(array![0.3, 0.7].view()).unwrap();
        let expected = 1.0 / (1.0 + (-10.0f64).exp());
        assert_abs_diff_eq!(out[0], expected, epsilon = 1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut probe = zero_probe(2, 3, 4);
        probe.params.b2 = array![1.0, -2.0, 0.5, 3.0];
        let a = probe.forward(array![0.0, 0.0].view()).unwrap();
        probe.params.b2 += 7.5;
        let b = probe.forward(array![0.0, 0.0].view()).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
        }
    }

    #[test]
    fn forward_rejects_width_mismatch() {
        let probe = zero_probe(4, 3, 2);
        assert!(matches!(
            probe.forward(array![1.0, 2.0].view()),
            Err(ProbeError::Shape { .. })
        ));
    }

    #[test]
    fn parameter_count_formula() {
        let config = ProbeConfig::new(1024, 17);
        assert_eq!(config.hidden_dim, 50);
        assert_eq!(config.parameter_count(), 50 * 1024 + 50 + 50 * 17 + 17);
    }

    /// Central finite differences of `loss_value` — the independent route the
    /// analytic gradients are checked against.
    fn numeric_gradients(
        params: &ProbeParams,
        x: &ArrayView2<f64>,
        y: &[usize],
        l2: f64,
    ) -> ProbeParams {
        let h = 1e-6;
        let mut grads = ProbeParams {
            w1: Array2::zeros(params.w1.raw_dim()),
            b1: Array1::zeros(params.b1.raw_dim()),
            w2: Array2::zeros(params.w2.raw_dim()),
            b2: Array1::zeros(params.b2.raw_dim()),
        };
        let mut work = params.clone();
        macro_rules! central_diff {
            ($field:ident) => {
                for idx in 0..params.$field.len() {
                    let orig = work.$field.as_slice_mut().unwrap()[idx];
                    work.$field.as_slice_mut().unwrap()[idx] = orig + h;
                    let plus = loss_value(&work, x, y, l2);
                    work.$field.as_slice_mut().unwrap()[idx] = orig - h;
                    let minus = loss_value(&work, x, y, l2);
                    work.$field.as_slice_mut().unwrap()[idx] = orig;
                    grads.$field.as_slice_mut().unwrap()[idx] = (plus - minus) / (2.0 * h);
                }
            };
        }
        central_diff!(w1);
        central_diff!(b1);
        central_diff!(w2);
        central_diff!(b2);
        grads
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let config = ProbeConfig::new(7, 3).with_hidden_dim(5);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let params = ProbeParams::init(&config, &mut rng);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let x = Array2::from_shape_fn((5, 7), |_| normal.sample(&mut rng));
        let y = vec![0, 2, 1, 1, 0];
        for l2 in [0.0, 0.01] {
            let (_, analytic) = loss_and_gradients(&params, &x.view(), &y, l2);
            let numeric = numeric_gradients(&params, &x.view(), &y, l2);
            for (a, n) in [
                (&analytic.w1, &numeric.w1),
                (&analytic.w2, &numeric.w2),
            ] {
                for (av, nv) in a.iter().zip(n.iter()) {
                    let denom = av.abs().max(nv.abs()).max(1e-8);
                    assert!(
                        (av - nv).abs() / denom <= 1e-4,
                        "gradient mismatch: {av} vs {nv}"
                    );
                }
            }
            for (a, n) in [
                (&analytic.b1, &numeric.b1),
                (&analytic.b2, &numeric.b2),
            ] {
                for (av, nv) in a.iter().zip(n.iter()) {
                    let denom = av.abs().max(nv.abs()).max(1e-8);
                    assert!(
                        (av - nv).abs() / denom <= 1e-4,
                        "bias gradient mismatch: {av} vs {nv}"
                    );
                }
            }
        }
    }

    /// Two 16-d Gaussian blobs separated by 6σ along a random direction, with
    /// a margin check certifying linear separability before any training.
    pub(crate) fn separable_blobs(
        n_train: usize,
        n_val: usize,
        seed: u64,
    ) -> (ProbeData, ProbeData) {
        let dim = 16;
        let sigma = 1.0f64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma).unwrap();
        let mut direction = Array1::from_shape_fn(dim, |_| normal.sample(&mut rng));
        let norm = direction.dot(&direction).sqrt();
        direction.mapv_inplace(|v| v / norm);
        let offset = &direction * 3.0; // centers at ±3σ → 6σ apart

        let make = |count: usize, rng: &mut ChaCha8Rng| {
            let mut rows = Vec::with_capacity(count * dim);
            let mut labels = Vec::with_capacity(count);
            for i in 0..count {
                let label = i % 2;
                let center = if label == 0 { -&offset } else { offset.clone() };
                // Rejection-sample the rare tail points that would cross the
                // midplane, so the blobs are separable by construction.
                loop {
                    let sample: Vec<f64> =
                        (0..dim).map(|d| center[d] + normal.sample(rng)).collect();
                    let projection: f64 = sample
                        .iter()
                        .zip(direction.iter())
                        .map(|(x, d)| x * d)
                        .sum();
                    let signed = if label == 0 { -projection } else { projection };
                    if signed > 0.5 {
                        rows.extend(sample);
                        break;
                    }
                }
                labels.push(label);
            }
            ProbeData::new(
                Array2::from_shape_vec((count, dim), rows).unwrap(),
                labels,
            )
            .unwrap()
        };
        let train = make(n_train, &mut rng);
        let val = make(n_val, &mut rng);

        // Margin check: every point is on its class's side of the separating
        // hyperplane through the origin.
        for data in [&train, &val] {
            for (i, &label) in data.labels.iter().enumerate() {
                let projection = data.features.row(i).dot(&direction);
                let signed = if label == 0 { -projection } else { projection };
                assert!(signed > 0.0, "blob sample {i} violates the margin");
            }
        }
        (train, val)
    }

    #[test]
    fn learns_separable_blobs() {
        let (train, val) = separable_blobs(500, 100, 7);
        let mut config = ProbeConfig::new(16, 2);
        config.training.learning_rate = 0.1;
        config.training.seed = 3;
        let probe = train_probe(&train, &val, &config).unwrap();
        let acc = probe.training_log[probe.selected_epoch].validation_accuracy;
        assert!(acc >= 0.99, "validation accuracy {acc} below 0.99");
    }

    #[test]
    fn shuffled_labels_score_at_chance() {
        let dim = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let features = Array2::from_shape_fn((400, dim), |_| normal.sample(&mut rng));
        let labels: Vec<usize> = (0..400).map(|i| i % 4).collect();
        let train = ProbeData::new(features.slice(ndarray::s![..300, ..]).to_owned(),
                                   labels[..300].to_vec()).unwrap();
        let val = ProbeData::new(features.slice(ndarray::s![300.., ..]).to_owned(),
                                 labels[300..].to_vec()).unwrap();
        let mut config = ProbeConfig::new(dim, 4);
        config.training.learning_rate = 0.05;
        config.training.seed = 5;
        let probe = train_probe(&train, &val, &config).unwrap();
        let acc = probe.training_log[probe.selected_epoch].validation_accuracy;
        assert!(
            (0.15..=0.35).contains(&acc),
            "accuracy {acc} outside binomial bounds around chance 0.25"
        );
    }

    #[test]
    fn training_is_deterministic() {
        let (train, val) = separable_blobs(120, 40, 9);
        let mut config = ProbeConfig::new(16, 2);
        config.training.seed = 21;
        config.training.max_epochs = 8;
        let a = train_probe(&train, &val, &config).unwrap();
        let b = train_probe(&train, &val, &config).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.training_log, b.training_log);
        assert_eq!(a.selected_epoch, b.selected_epoch);
    }

    #[test]
    fn exploding_learning_rate_reports_divergence() {
        // Shuffled labels keep gradients nonzero even once the softmax
        // saturates, so an absurd step size must blow the parameters up.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let features = Array2::from_shape_fn((96, 8), |_| normal.sample(&mut rng));
        let labels: Vec<usize> = (0..96).map(|i| i % 4).collect();
        let train = ProbeData::new(features.clone(), labels.clone()).unwrap();
        let val = ProbeData::new(features, labels).unwrap();
        let mut config = ProbeConfig::new(8, 4);
        config.training.learning_rate = 1e12;
        assert!(matches!(
            train_probe(&train, &val, &config),
            Err(ProbeError::Divergence { .. })
        ));
    }

    #[test]
    fn validation_only_label_is_rejected() {
        let train = ProbeData::new(Array2::zeros((4, 3)), vec![0, 1, 0, 1]).unwrap();
        let val = ProbeData::new(Array2::zeros((2, 3)), vec![0, 2]).unwrap();
        let config = ProbeConfig::new(3, 3);
        assert!(matches!(
            train_probe(&train, &val, &config),
            Err(ProbeError::LabelSpace { label: 2, .. })
        ));
    }

    #[test]
    fn evaluation_counts_correct_argmax() {
        let probe = {
            let mut p = zero_probe(2, 3, 2);
            // Logit of class 1 follows feature 0: w2·relu(w1·x).
            p.params.w1 = array![[1.0, 0.0], [0.0, 0.0], [0.0, 0.0]];
            p.params.w2 = array![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
            p.params.b2 = array![0.5, 0.0];
            p
        };
        // Class 1 wins iff relu(x0) > 0.5.
        let test = ProbeData::new(
            array![[1.0, 0.0], [2.0, 0.0], [0.0, 0.0], [1.0, 0.0]],
            vec![1, 1, 0, 0],
        )
        .unwrap();
        assert_eq!(evaluate_token_accuracy(&probe, &test).unwrap(), 0.75);

        // Gold-everywhere labels score exactly 1.0.
        let gold = probe.predict(&test.features.view()).unwrap();
        let perfect = ProbeData::new(test.features.clone(), gold).unwrap();
        assert_eq!(evaluate_token_accuracy(&probe, &perfect).unwrap(), 1.0);
    }

    #[test]
    fn constant_probe_scores_majority_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let labels: Vec<usize> = (0..200)
            .map(|_| if rand::Rng::random::<f64>(&mut rng) < 0.7 { 0 } else { 1 })
            .collect();
        // Majority-count oracle.
        let majority = labels.iter().filter(|&&l| l == 0).count() as f64 / 200.0;
        let mut probe = zero_probe(4, 3, 2);
        probe.params.b2 = array![5.0, 0.0]; // always predicts class 0
        let test = ProbeData::new(Array2::zeros((200, 4)), labels).unwrap();
        assert_eq!(evaluate_token_accuracy(&probe, &test).unwrap(), majority);
    }

    #[test]
    fn empty_evaluation_is_an_error() {
        let probe = zero_probe(2, 3, 2);
        let empty = ProbeData {
            features: Array2::zeros((0, 2)),
            labels: vec![],
        };
        assert!(matches!(
            evaluate_token_accuracy(&probe, &empty),
            Err(ProbeError::EmptyEvaluation)
        ));
    }

    #[test]
    fn save_load_roundtrip_at_f32() {
        let (train, val) = separable_blobs(60, 20, 17);
        let mut config = ProbeConfig::new(16, 2);
        config.training.max_epochs = 3;
        let probe = train_probe(&train, &val, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probe.bin");
        probe.save(&path).unwrap();
        let loaded = TrainedProbe::load(&path).unwrap();
        assert_eq!(loaded.config, probe.config);
        assert_eq!(loaded.training_log, probe.training_log);
        assert_eq!(loaded.selected_epoch, probe.selected_epoch);
        for (a, b) in probe.params.w1.iter().zip(loaded.params.w1.iter()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    proptest! {
        // Softmax output is a probability vector for inputs spanning the
        // overflow-prone range.
        #[test]
        fn softmax_normalizes(
            logits in proptest::collection::vec(-50.0f64..50.0, 2..12),
        ) {
            let k = logits.len();
            let row = Array2::from_shape_vec((1, k), logits).unwrap();
            let probs = softmax_rows(&row);
            let sum: f64 = probs.row(0).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
            prop_assert!(probs.iter().all(|&p| p >= 0.0));
        }
    }
}
