//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its runtime (run with `--nocapture` to see them). Criterion 8 is optional
//! and network-scale; it is `#[ignore]`d and documented below.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use layerprobe::control::{apply_control_mapping, build_control_mapping, selectivity};
use layerprobe::corpus::{LabeledCorpus, Scope, Sentence, Split, Token};
use layerprobe::extraction::{
    extract_sequence_representations, extract_token_representations, CharSpan, PoolingStrategy,
    StubEncoder, Subword, SubwordTokenizer,
};
use layerprobe::metrics::{span_f1, LayerReport, SpanLabeling};
use layerprobe::probe::{
    loss_and_gradients, loss_value, train_probe, ProbeConfig, ProbeData, ProbeParams,
};
use layerprobe::{baselines, label_distribution};

fn finish(name: &str, start: Instant, limit: Duration) {
    let elapsed = start.elapsed();
    assert!(
        elapsed <= limit,
        "{name}: runtime {elapsed:?} exceeds limit {limit:?}"
    );
    println!("{name}: PASS in {elapsed:.2?}");
}

// ---------------------------------------------------------------------------
// Criterion 1: control-task laws on a synthetic 10,000-token corpus with a
// (0.4, 0.3, 0.2, 0.1) tag distribution.
// ---------------------------------------------------------------------------

fn four_tag_corpus() -> LabeledCorpus {
    // Token i carries a tag by i mod 10 (4/3/2/1 shares) and the word type
    // cycles over 2,000 types, so types recur across all three splits.
    const TAGS: [&str; 10] = [
        "NOUN", "NOUN", "NOUN", "NOUN", "VERB", "VERB", "VERB", "ADJ", "ADJ", "ADV",
    ];
    let mut sentences = Vec::new();
    for s in 0..1000usize {
        let tokens: Vec<Token> = (0..10)
            .map(|j| {
                let i = s * 10 + j;
                Token::new(format!("w{:04}", i % 2000), TAGS[i % 10])
            })
            .collect();
        sentences.push((s, tokens));
    }
    let mut splits = BTreeMap::new();
    splits.insert(
        Split::Train,
        sentences[..800]
            .iter()
            .map(|(s, t)| Sentence::token_level(format!("train-{s}"), t.clone()))
            .collect(),
    );
    splits.insert(
        Split::Validation,
        sentences[800..900]
            .iter()
            .map(|(s, t)| Sentence::token_level(format!("validation-{s}"), t.clone()))
            .collect(),
    );
    splits.insert(
        Split::Test,
        sentences[900..]
            .iter()
            .map(|(s, t)| Sentence::token_level(format!("test-{s}"), t.clone()))
            .collect(),
    );
    LabeledCorpus::new_token_level(splits).unwrap()
}

#[test]
fn criterion_1_control_task_laws() {
    let start = Instant::now();
    let corpus = four_tag_corpus();
    assert_eq!(corpus.token_count(), 10_000);
    let source = label_distribution(&corpus, Scope::FullDataset).unwrap();
    assert_eq!(source.probability("NOUN"), 0.4);
    assert_eq!(source.probability("VERB"), 0.3);
    assert_eq!(source.probability("ADJ"), 0.2);
    assert_eq!(source.probability("ADV"), 0.1);

    // (a) identical across two runs.
    let mapping = build_control_mapping(&corpus, 20260809, Scope::FullDataset).unwrap();
    let again = build_control_mapping(&corpus, 20260809, Scope::FullDataset).unwrap();
    assert_eq!(mapping, again, "seeded mapping differs across runs");

    // (b) every occurrence of each word type relabeled identically across
    // all splits.
    let relabeled = apply_control_mapping(&corpus, &mapping).unwrap();
    let mut tags_per_type: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for sentence in relabeled.sentences() {
        for token in &sentence.tokens {
            tags_per_type
                .entry(&token.surface)
                .or_default()
                .insert(&token.tag);
        }
    }
    assert_eq!(tags_per_type.len(), 2000);
    assert!(
        tags_per_type.values().all(|tags| tags.len() == 1),
        "some word type carries more than one tag"
    );

    // (c) type-level frequencies within total-variation distance 0.05.
    let tvd = mapping
        .type_distribution()
        .total_variation_distance(&source);
    assert!(tvd <= 0.05, "type-level TVD {tvd} exceeds 0.05");

    finish("criterion 1 (control-task laws)", start, Duration::from_secs(5));
}

// ---------------------------------------------------------------------------
// Criterion 2: selectivity/gain arithmetic.
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_selectivity_gain_arithmetic() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let x: f64 = rng.random();
        assert_eq!(selectivity(x, x).unwrap(), 0.0, "selectivity({x}, {x}) != 0");
        assert_eq!(baselines::gain(x, x).unwrap(), 0.0, "gain({x}, {x}) != 0");
    }
    let value = selectivity(0.9, 0.7361).unwrap();
    assert!(
        (value - 16.39).abs() <= 1e-9,
        "selectivity(0.9, 0.7361) = {value}, expected 16.39 +/- 1e-9"
    );
    finish(
        "criterion 2 (selectivity/gain arithmetic)",
        start,
        Duration::from_secs(1),
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: probe correctness — gradients vs central finite differences,
// separable blobs, chance-level shuffled labels, seeded determinism.
// ---------------------------------------------------------------------------

/// Central finite differences of the loss, the independent route the
/// analytic gradients are checked against.
fn finite_difference_grads(
    params: &ProbeParams,
    x: &ndarray::ArrayView2<f64>,
    y: &[usize],
    l2: f64,
) -> ProbeParams {
    let h = 1e-6;
    let mut work = params.clone();
    let mut grads = ProbeParams {
        w1: Array2::zeros(params.w1.raw_dim()),
        b1: Array1::zeros(params.b1.raw_dim()),
        w2: Array2::zeros(params.w2.raw_dim()),
        b2: Array1::zeros(params.b2.raw_dim()),
    };
    macro_rules! diff {
        ($field:ident) => {
            for i in 0..params.$field.len() {
                let orig = work.$field.as_slice_mut().unwrap()[i];
                work.$field.as_slice_mut().unwrap()[i] = orig + h;
                let plus = loss_value(&work, x, y, l2);
                work.$field.as_slice_mut().unwrap()[i] = orig - h;
                let minus = loss_value(&work, x, y, l2);
                work.$field.as_slice_mut().unwrap()[i] = orig;
                grads.$field.as_slice_mut().unwrap()[i] = (plus - minus) / (2.0 * h);
            }
        };
    }
    diff!(w1);
    diff!(b1);
    diff!(w2);
    diff!(b2);
    grads
}

fn max_relative_error(analytic: &ProbeParams, numeric: &ProbeParams) -> f64 {
    let mut worst: f64 = 0.0;
    let pairs = analytic
        .w1
        .iter()
        .zip(numeric.w1.iter())
        .chain(analytic.b1.iter().zip(numeric.b1.iter()))
        .chain(analytic.w2.iter().zip(numeric.w2.iter()))
        .chain(analytic.b2.iter().zip(numeric.b2.iter()));
    for (a, n) in pairs {
        let denom = a.abs().max(n.abs()).max(1e-8);
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}

/// Two 16-d Gaussian blobs with centers 6 sigma apart; tail samples crossing
/// the midplane are rejected, and separability is then verified by an
/// explicit margin check.
fn margin_verified_blobs(n_train: usize, n_val: usize, seed: u64) -> (ProbeData, ProbeData) {
    let dim = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, 1.0).unwrap();
    let mut direction = Array1::from_shape_fn(dim, |_| normal.sample(&mut rng));
    let norm = direction.dot(&direction).sqrt();
    direction.mapv_inplace(|v| v / norm);
    let offset = &direction * 3.0;

    let make = |count: usize, rng: &mut ChaCha8Rng| {
        let mut rows = Vec::with_capacity(count * dim);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let label = i % 2;
            let center = if label == 0 { -&offset } else { offset.clone() };
            loop {
                let sample: Vec<f64> = (0..dim).map(|d| center[d] + normal.sample(rng)).collect();
                let projection: f64 = sample.iter().zip(direction.iter()).map(|(a, b)| a * b).sum();
                let signed = if label == 0 { -projection } else { projection };
                if signed > 0.25 {
                    rows.extend(sample);
                    labels.push(label);
                    break;
                }
            }
        }
        ProbeData::new(Array2::from_shape_vec((count, dim), rows).unwrap(), labels).unwrap()
    };
    let train = make(n_train, &mut rng);
    let val = make(n_val, &mut rng);

    // Margin check before any training touches the data.
    for data in [&train, &val] {
        for (i, &label) in data.labels.iter().enumerate() {
            let projection = data.features.row(i).dot(&direction);
            let signed = if label == 0 { -projection } else { projection };
            assert!(signed > 0.0, "blob point {i} is not separable");
        }
    }
    (train, val)
}

#[test]
fn criterion_3_probe_correctness() {
    let start = Instant::now();

    // Gradient check on a 5-point batch at f64.
    let config = ProbeConfig::new(9, 3).with_hidden_dim(6);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let params = ProbeParams::init(&config, &mut rng);
    let normal = Normal::new(0.0f64, 1.0).unwrap();
    let x = Array2::from_shape_fn((5, 9), |_| normal.sample(&mut rng));
    let y = vec![2, 0, 1, 2, 1];
    for l2 in [0.0, 0.02] {
        let (_, analytic) = loss_and_gradients(&params, &x.view(), &y, l2);
        let numeric = finite_difference_grads(&params, &x.view(), &y, l2);
        let err = max_relative_error(&analytic, &numeric);
        assert!(
            err <= 1e-4,
            "gradient relative error {err} exceeds 1e-4 (l2={l2})"
        );
    }

    // Separable blobs: >= 99% validation accuracy.
    let (train, val) = margin_verified_blobs(500, 100, 7);
    let mut config = ProbeConfig::new(16, 2);
    config.training.learning_rate = 0.1;
    config.training.seed = 3;
    let probe = train_probe(&train, &val, &config).unwrap();
    let blob_accuracy = probe.training_log[probe.selected_epoch].validation_accuracy;
    assert!(
        blob_accuracy >= 0.99,
        "blob validation accuracy {blob_accuracy} below 0.99"
    );

    // Label-shuffled data: chance-level within binomial bounds at n=100.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let features = Array2::from_shape_fn((400, 16), |_| normal.sample(&mut rng));
    let labels: Vec<usize> = (0..400).map(|i| i % 4).collect();
    let train = ProbeData::new(
        features.slice(ndarray::s![..300, ..]).to_owned(),
        labels[..300].to_vec(),
    )
    .unwrap();
    let val = ProbeData::new(
        features.slice(ndarray::s![300.., ..]).to_owned(),
        labels[300..].to_vec(),
    )
    .unwrap();
    let mut config = ProbeConfig::new(16, 4);
    config.training.learning_rate = 0.05;
    config.training.seed = 5;
    let probe = train_probe(&train, &val, &config).unwrap();
    let chance_accuracy = probe.training_log[probe.selected_epoch].validation_accuracy;
    assert!(
        (0.15..=0.35).contains(&chance_accuracy),
        "shuffled-label accuracy {chance_accuracy} outside [0.15, 0.35]"
    );

    // Fixed seeds give bit-identical parameters.
    let (train, val) = margin_verified_blobs(200, 50, 17);
    let mut config = ProbeConfig::new(16, 2);
    config.training.seed = 99;
    config.training.max_epochs = 10;
    let a = train_probe(&train, &val, &config).unwrap();
    let b = train_probe(&train, &val, &config).unwrap();
    let bits = |array: &Array2<f64>| -> Vec<u64> { array.iter().map(|v| v.to_bits()).collect() };
    assert_eq!(bits(&a.params.w1), bits(&b.params.w1));
    assert_eq!(bits(&a.params.w2), bits(&b.params.w2));
    assert_eq!(
        a.params.b1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.params.b1.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(
        a.params.b2.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.params.b2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );

    finish("criterion 3 (probe correctness)", start, Duration::from_secs(30));
}

// ---------------------------------------------------------------------------
// Criterion 4: pooling/alignment oracle with the position-identifying stub
// encoder over randomized tokenizations.
// ---------------------------------------------------------------------------

/// Splits each word into pseudo-random chunks; deterministic per
/// (instance seed, text).
struct RandomSplitTokenizer {
    seed: u64,
    id: String,
}

impl RandomSplitTokenizer {
    fn new(seed: u64) -> RandomSplitTokenizer {
        RandomSplitTokenizer {
            seed,
            id: format!("randomsplit-{seed}"),
        }
    }
}

impl SubwordTokenizer for RandomSplitTokenizer {
    fn tokenizer_id(&self) -> &str {
        &self.id
    }

    fn vocab_size(&self) -> usize {
        256
    }

    fn tokenize(&self, text: &str) -> Vec<Subword> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.seed ^ common::fnv1a64(text.as_bytes()));
        let mut subwords = Vec::new();
        for word in layerprobe::extraction::tokenizer::word_spans(text) {
            let mut offset = word.start;
            while offset < word.end {
                let len = rng.random_range(1..=3usize).min(word.end - offset);
                let id = 4 + (rng.random::<u64>() % 252) as u32;
                subwords.push(Subword {
                    id,
                    span: CharSpan::new(offset, offset + len),
                });
                offset += len;
            }
        }
        subwords
    }
}

/// Independent alignment oracle: quadratic scan over every (word, subword)
/// pair.
fn alignment_oracle(words: &[CharSpan], subwords: &[CharSpan]) -> Vec<Vec<usize>> {
    words
        .iter()
        .map(|w| {
            subwords
                .iter()
                .enumerate()
                .filter(|(_, s)| w.start.max(s.start) < w.end.min(s.end))
                .map(|(i, _)| i)
                .collect()
        })
        .collect()
}

#[test]
fn criterion_4_pooling_alignment_oracle() {
    let start = Instant::now();
    let layers: BTreeSet<usize> = (0..=3).collect();
    let max_lens = [4usize, 6, 10, 64];

    for iteration in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(iteration);
        let n_words = rng.random_range(3..=8);
        let words: Vec<String> = (0..n_words)
            .map(|_| {
                let len = rng.random_range(1..=7);
                (0..len)
                    .map(|_| (b'a' + rng.random_range(0..26u8)) as char)
                    .collect()
            })
            .collect();
        let tokens: Vec<Token> = words
            .iter()
            .enumerate()
            .map(|(i, w)| Token::new(w.clone(), if i % 2 == 0 { "X" } else { "Y" }))
            .collect();
        let mut splits = BTreeMap::new();
        splits.insert(
            Split::Train,
            vec![Sentence::token_level("s0", tokens.clone())],
        );
        let corpus = LabeledCorpus::new_token_level(splits).unwrap();
        let text = corpus.split(Split::Train)[0].encoding_text();

        let max_len = max_lens[(iteration % 4) as usize];
        let tokenizer = RandomSplitTokenizer::new(iteration);
        let budget = max_len - 2;

        // Oracle-side tokenization, truncation, and alignment.
        let subwords = tokenizer.tokenize(&text);
        let word_boundaries = layerprobe::extraction::tokenizer::word_spans(&text);
        let kept: Vec<CharSpan> = subwords
            .iter()
            .take(budget)
            .map(|s| s.span)
            .collect();
        let expected_alignment = alignment_oracle(&word_boundaries, &kept);

        let stub = StubEncoder::new(3, max_len, Box::new(RandomSplitTokenizer::new(iteration)), true);
        for pooling in [
            PoolingStrategy::FirstSubword,
            PoolingStrategy::LastSubword,
            PoolingStrategy::MeanSubword,
        ] {
            let cache = extract_token_representations(&stub, &corpus, pooling, &layers).unwrap();
            let included: Vec<usize> = (0..n_words)
                .filter(|&w| !expected_alignment[w].is_empty())
                .collect();
            for &layer in &layers {
                let entry = cache
                    .entry(layer, Split::Train)
                    .unwrap_or_else(|| panic!("iteration {iteration}: no entry layer {layer}"));
                assert_eq!(
                    entry.len(),
                    included.len(),
                    "iteration {iteration}, layer {layer}: row count mismatch"
                );
                for (row, &word_idx) in included.iter().enumerate() {
                    assert_eq!(
                        entry.item_ids[row],
                        format!("s0#{word_idx}"),
                        "iteration {iteration}: item order mismatch"
                    );
                    // Stub positions include the leading special token.
                    let positions: Vec<f32> = expected_alignment[word_idx]
                        .iter()
                        .map(|&i| (i + 1) as f32)
                        .collect();
                    let expected_pos = match pooling {
                        PoolingStrategy::FirstSubword => positions[0],
                        PoolingStrategy::LastSubword => *positions.last().unwrap(),
                        PoolingStrategy::MeanSubword => {
                            let mut acc = 0f32;
                            for &p in &positions {
                                acc += p;
                            }
                            acc / positions.len() as f32
                        }
                        PoolingStrategy::SpecialToken => unreachable!(),
                    };
                    let got = entry.row(row);
                    assert_eq!(
                        got,
                        &[layer as f32, expected_pos][..],
                        "iteration {iteration}, layer {layer}, word {word_idx}, {pooling}"
                    );
                }
            }
        }

        // Special-token extraction over a sentence-level corpus built from
        // the same text: always exactly (layer, 0).
        let mut splits = BTreeMap::new();
        splits.insert(
            Split::Train,
            vec![Sentence::sentence_level("a0", text.clone(), "sports")],
        );
        let news = LabeledCorpus::new_sentence_level(splits).unwrap();
        let cache = extract_sequence_representations(&stub, &news, &layers).unwrap();
        for &layer in &layers {
            let entry = cache.entry(layer, Split::Train).unwrap();
            assert_eq!(entry.len(), 1);
            assert_eq!(entry.row(0), &[layer as f32, 0.0][..]);
        }
    }

    finish(
        "criterion 4 (pooling/alignment oracle)",
        start,
        Duration::from_secs(5),
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: span-F1 equivalence against a brute-force oracle on random
// BIO sequences.
// ---------------------------------------------------------------------------

/// Brute-force span decoder: scan for start positions, then extend while the
/// continuation holds. Structured independently of the production decoder.
fn oracle_decode(tags: &[String]) -> BTreeSet<(usize, usize, String)> {
    let mut spans = BTreeSet::new();
    let n = tags.len();
    let entity_of = |t: &str| -> Option<String> {
        t.strip_prefix("B-")
            .or_else(|| t.strip_prefix("I-"))
            .map(|e| e.to_string())
    };
    for i in 0..n {
        let Some(entity) = entity_of(&tags[i]) else { continue };
        // A position starts a span iff it is B-, or an I- that cannot attach
        // to an identical-type span right before it.
        let starts = if tags[i].starts_with("B-") {
            true
        } else {
            i == 0 || entity_of(&tags[i - 1]).as_deref() != Some(entity.as_str())
        };
        if !starts {
            continue;
        }
        let mut end = i;
        while end + 1 < n && tags[end + 1] == format!("I-{entity}") {
            end += 1;
        }
        spans.insert((i, end, entity));
    }
    spans
}

fn oracle_f1(
    pred: &BTreeSet<(usize, usize, String)>,
    gold: &BTreeSet<(usize, usize, String)>,
) -> (f64, f64, f64) {
    let mut tp = 0usize;
    for p in pred {
        for g in gold {
            if p == g {
                tp += 1;
            }
        }
    }
    let precision = if pred.is_empty() {
        0.0
    } else {
        tp as f64 / pred.len() as f64
    };
    let recall = if gold.is_empty() {
        0.0
    } else {
        tp as f64 / gold.len() as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

#[test]
fn criterion_5_span_f1_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let alphabet = [
        "O", "B-E0", "I-E0", "B-E1", "I-E1", "B-E2", "I-E2",
    ];
    for iteration in 0..500 {
        let len = rng.random_range(1..=10);
        let random_tags = |rng: &mut ChaCha8Rng| -> Vec<String> {
            (0..len)
                .map(|_| alphabet[rng.random_range(0..alphabet.len())].to_string())
                .collect()
        };
        let pred_tags = random_tags(&mut rng);
        let gold_tags = random_tags(&mut rng);

        let production = {
            let pred = SpanLabeling::from_sentences([("s", pred_tags.as_slice())]).unwrap();
            let gold = SpanLabeling::from_sentences([("s", gold_tags.as_slice())]).unwrap();
            span_f1(&pred, &gold)
        };
        let (precision, recall, f1) =
            oracle_f1(&oracle_decode(&pred_tags), &oracle_decode(&gold_tags));
        assert_eq!(
            (production.precision, production.recall, production.f1),
            (precision, recall, f1),
            "iteration {iteration}: pred={pred_tags:?} gold={gold_tags:?}"
        );
    }
    finish(
        "criterion 5 (span-F1 oracle equivalence)",
        start,
        Duration::from_secs(5),
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: end-to-end desk-scale selectivity signal on a toy transformer
// and a context-carrying synthetic corpus.
// ---------------------------------------------------------------------------

fn check_pos_report(out: &Path) -> LayerReport {
    let report_path = out.join("reports/toy-2l__synthetic__pos.json");
    let report: LayerReport =
        serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    report.validate().unwrap();
    let layers: Vec<usize> = report.records.iter().map(|r| r.layer).collect();
    assert_eq!(layers, vec![0, 1, 2], "curve must cover every layer from 0");
    for record in &report.records {
        let task = record.raw_metric.expect("task accuracy present");
        let control = record.baseline_metric.expect("control accuracy present");
        assert!((0.0..=1.0).contains(&task), "task accuracy {task}");
        assert!((0.0..=1.0).contains(&control), "control accuracy {control}");
        assert!(record.derived_metric.is_some());
    }
    report
}

#[test]
fn criterion_6_end_to_end_desk_scale() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let pos = common::write_context_pos_dataset(dir.path(), 5000, 6);
    let out = dir.path().join("out");
    let config_path = common::write_toy_config(
        &dir.path().join("experiment.toml"),
        &out,
        &[("pos", &pos)],
        &[1],
    );

    let status = Command::new(env!("CARGO_BIN_EXE_layerprobe"))
        .args(["run", "--workers", "2", "--config"])
        .arg(&config_path)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0), "pipeline must exit 0");

    check_pos_report(&out);
    assert!(out.join("plots/pos__synthetic.svg").is_file());
    assert!(out.join("reports/aggregate.json").is_file());

    finish(
        "criterion 6 (end-to-end desk scale)",
        start,
        Duration::from_secs(300),
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: resumability — killing the run after extraction and
// restarting yields byte-identical final JSON reports.
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_resumability() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let pos = common::write_context_pos_dataset(dir.path(), 5000, 6);
    let binary = env!("CARGO_BIN_EXE_layerprobe");

    // Uninterrupted run.
    let out_a = dir.path().join("out_a");
    let config_a = common::write_toy_config(
        &dir.path().join("experiment_a.toml"),
        &out_a,
        &[("pos", &pos)],
        &[1],
    );
    let status = Command::new(binary)
        .args(["run", "--workers", "2", "--config"])
        .arg(&config_a)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));

    // "Killed after extraction": materialize caches only, then restart the
    // full run on top of them.
    let out_b = dir.path().join("out_b");
    let config_b = common::write_toy_config(
        &dir.path().join("experiment_b.toml"),
        &out_b,
        &[("pos", &pos)],
        &[1],
    );
    let status = Command::new(binary)
        .args(["extract", "--config"])
        .arg(&config_b)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(out_b.join("cache").is_dir());
    assert!(!out_b.join("reports").exists(), "no reports yet at the kill point");
    let status = Command::new(binary)
        .args(["run", "--workers", "2", "--config"])
        .arg(&config_b)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));

    // Byte-identical final JSON reports (and, since they derive from the
    // reports, byte-identical plots).
    for name in ["toy-2l__synthetic__pos.json", "aggregate.json"] {
        let a = fs::read(out_a.join("reports").join(name)).unwrap();
        let b = fs::read(out_b.join("reports").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between interrupted and clean runs");
    }
    for name in ["pos__synthetic.svg", "pos__synthetic.csv"] {
        let a = fs::read(out_a.join("plots").join(name)).unwrap();
        let b = fs::read(out_b.join("plots").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between interrupted and clean runs");
    }
    check_pos_report(&out_b);

    finish("criterion 7 (resumability)", start, Duration::from_secs(300));
}

// ---------------------------------------------------------------------------
// Criterion 8 (OPTIONAL, networked, hours-scale): qualitative reproduction
// with a real pretrained encoder on real POS data.
//
// This test is ignored by default. Running it needs two prepared assets:
//   LAYERPROBE_C8_WEIGHTS  — encoder weights converted to the toolkit's
//                            weights format (see README), with a tokenizer
//                            compatible with the `SubwordTokenizer` trait;
//   LAYERPROBE_C8_POS_DIR  — a Swahili POS split directory
//                            (train/validation/test .conll).
// It then checks that best-layer selectivity is positive and that the
// per-layer selectivity curve rises over layers 0..=8 (positive Spearman
// rank correlation), reporting the achieved values without a hard tolerance.
// ---------------------------------------------------------------------------

fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(values: &[f64]) -> Vec<f64> {
        let mut indexed: Vec<(usize, f64)> =
            values.iter().copied().enumerate().collect();
        indexed.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        let mut ranks = vec![0.0; values.len()];
        for (rank, (index, _)) in indexed.iter().enumerate() {
            ranks[*index] = rank as f64;
        }
        ranks
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mean = (n - 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (a, b) in rx.iter().zip(ry.iter()) {
        cov += (a - mean) * (b - mean);
        var_x += (a - mean) * (a - mean);
        var_y += (b - mean) * (b - mean);
    }
    cov / (var_x.sqrt() * var_y.sqrt())
}

#[test]
#[ignore = "optional networked criterion: needs converted pretrained weights and MasakhaPOS data"]
fn criterion_8_qualitative_reproduction() {
    let start = Instant::now();
    let weights = std::env::var("LAYERPROBE_C8_WEIGHTS")
        .expect("set LAYERPROBE_C8_WEIGHTS to a toolkit-format weights file");
    let pos_dir = std::env::var("LAYERPROBE_C8_POS_DIR")
        .expect("set LAYERPROBE_C8_POS_DIR to a POS split directory");

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let config_path = dir.path().join("experiment.toml");
    fs::write(
        &config_path,
        format!(
            r#"output_dir = "{out}"
seeds = [1]
tasks = ["pos"]
languages = ["swahili"]

[probe]
learning_rate = 0.001

[[models]]
id = "pretrained-base"
layers = 12
hidden = 768
heads = 12
max_sequence_length = 512
vocab_size = 250002
weights = "{weights}"

[datasets.swahili]
pos = "{pos}"
"#,
            out = out.display(),
            weights = weights,
            pos = pos_dir,
        ),
    )
    .unwrap();

    let status = Command::new(env!("CARGO_BIN_EXE_layerprobe"))
        .args(["run", "--workers", "4", "--config"])
        .arg(&config_path)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));

    let report: LayerReport = serde_json::from_str(
        &fs::read_to_string(out.join("reports/pretrained-base__swahili__pos.json")).unwrap(),
    )
    .unwrap();
    let (best_layer, best) = layerprobe::best_layer(&report).unwrap();
    let early: Vec<f64> = report
        .records
        .iter()
        .take(9)
        .filter_map(|r| r.derived_metric)
        .collect();
    let layers: Vec<f64> = (0..early.len()).map(|l| l as f64).collect();
    let rho = spearman(&layers, &early);
    println!(
        "criterion 8: best-layer selectivity {best:.2} at layer {best_layer}, \
         Spearman(layer, selectivity) over layers 0..=8 = {rho:.3}"
    );
    assert!(best > 0.0, "best-layer selectivity not positive: {best}");
    assert!(rho > 0.0, "selectivity does not rise over early layers: {rho}");
    finish("criterion 8 (qualitative reproduction)", start, Duration::from_secs(24 * 3600));
}
