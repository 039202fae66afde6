//! Layer-wise probing toolkit for masked language models.
//!
//! Probes are small MLP classifiers trained on frozen per-layer hidden
//! representations. The toolkit loads token- and sentence-labeled corpora,
//! extracts pooled representations into an on-disk cache, trains probes with
//! seeded determinism, and contextualizes accuracies with control tasks
//! (selectivity) and random baselines (gain), emitting layer-curve reports,
//! plots, and aggregate tables.

pub mod baselines;
pub mod control;
pub mod corpus;
pub mod extraction;
pub mod metrics;
pub mod pipeline;
pub mod probe;

pub use baselines::{
    build_random_contextual_encoder, gain, reinitialize_encoder, BiLstmEncoder, RandomContextualSpec,
    ReinitSpec,
};
pub use control::{apply_control_mapping, build_control_mapping, selectivity, ControlMapping};
pub use corpus::{
    label_distribution, load_text_corpus, load_token_corpus, save_text_corpus, save_token_corpus,
    vocabulary, LabelDistribution, LabeledCorpus, Scope, Sentence, Split, TaskKind, Token,
};
pub use extraction::{
    align_subwords, extract_sequence_representations, extract_token_representations,
    PoolingStrategy, RepresentationCache,
};
pub use metrics::{
    aggregate_results, best_layer, decode_bio, encode_bio, span_f1, LayerRecord, LayerReport,
    SpanLabeling, TaskType,
};
pub use probe::{
    evaluate_token_accuracy, probe_forward, train_probe, ProbeConfig, ProbeData, TrainedProbe,
};

/// Toolkit version embedded in manifests and reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
