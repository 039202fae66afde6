//! Shared fixtures: synthetic datasets and experiment configs for
//! integration tests.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// A POS-style corpus where each word's tag is a deterministic function of
/// its left neighbor, so the task needs context. Splits 80/10/10 by sentence.
/// Returns the dataset directory.
pub fn write_context_pos_dataset(dir: &Path, total_tokens: usize, seed: u64) -> PathBuf {
    const TAGS: [&str; 4] = ["ADJ", "NOUN", "PRON", "VERB"];
    let vocab: Vec<String> = (0..150).map(|i| format!("w{i:03}")).collect();
    let tag_after = |prev: &str| TAGS[(fnv1a64(prev.as_bytes()) % 4) as usize];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sentences: Vec<Vec<(String, &str)>> = Vec::new();
    let mut emitted = 0;
    while emitted < total_tokens {
        let len = rng.random_range(8..=12).min(total_tokens - emitted).max(1);
        let mut prev = "<s>".to_string();
        let mut sentence = Vec::with_capacity(len);
        for _ in 0..len {
            let word = vocab[rng.random_range(0..vocab.len())].clone();
            let tag = tag_after(&prev);
            prev = word.clone();
            sentence.push((word, tag));
        }
        emitted += sentence.len();
        sentences.push(sentence);
    }

    let data_dir = dir.join("pos");
    fs::create_dir_all(&data_dir).unwrap();
    let n = sentences.len();
    let cut_train = n * 8 / 10;
    let cut_val = n * 9 / 10;
    for (name, range) in [
        ("train", 0..cut_train),
        ("validation", cut_train..cut_val),
        ("test", cut_val..n),
    ] {
        let mut body = String::new();
        for sentence in &sentences[range] {
            for (word, tag) in sentence {
                body.push_str(word);
                body.push('\t');
                body.push_str(tag);
                body.push('\n');
            }
            body.push('\n');
        }
        fs::write(data_dir.join(format!("{name}.conll")), body).unwrap();
    }
    data_dir
}

/// A BIO-tagged corpus with PER and LOC spans. Every split starts with fixed
/// sentences so each tag appears in train, validation, and test.
#[allow(dead_code)]
pub fn write_ner_dataset(dir: &Path, sentences_per_split: usize, seed: u64) -> PathBuf {
    let filler: Vec<String> = (0..80).map(|i| format!("f{i:02}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data_dir = dir.join("ner");
    fs::create_dir_all(&data_dir).unwrap();
    for name in ["train", "validation", "test"] {
        let mut body = String::new();
        // Coverage sentences: every tag present in every split.
        body.push_str("kofi\tB-PER\nannan\tI-PER\nvisited\tO\naccra\tB-LOC\ncity\tI-LOC\n\n");
        for _ in 0..sentences_per_split {
            let len = rng.random_range(5..=9);
            for position in 0..len {
                let roll: f64 = rng.random();
                if position + 1 < len && roll < 0.15 {
                    body.push_str("kofi\tB-PER\nannan\tI-PER\n");
                } else if roll < 0.25 {
                    body.push_str("accra\tB-LOC\n");
                } else {
                    let word = &filler[rng.random_range(0..filler.len())];
                    body.push_str(word);
                    body.push_str("\tO\n");
                }
            }
            body.push('\n');
        }
        fs::write(data_dir.join(format!("{name}.conll")), body).unwrap();
    }
    data_dir
}

/// A topic-labeled text corpus over three topics, with topic-specific
/// keywords so the labels are learnable in principle.
#[allow(dead_code)]
pub fn write_ntc_dataset(dir: &Path, records_per_split: usize, seed: u64) -> PathBuf {
    const TOPICS: [(&str, [&str; 4]); 3] = [
        ("sports", ["goal", "match", "league", "coach"]),
        ("health", ["clinic", "vaccine", "doctor", "malaria"]),
        ("politics", ["election", "senate", "minister", "ballot"]),
    ];
    let shared: Vec<String> = (0..40).map(|i| format!("s{i:02}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data_dir = dir.join("ntc");
    fs::create_dir_all(&data_dir).unwrap();
    let mut record = 0usize;
    for name in ["train", "validation", "test"] {
        let mut body = String::from("id\ttext\tlabel\n");
        for i in 0..records_per_split.max(TOPICS.len()) {
            let (topic, keywords) = TOPICS[i % TOPICS.len()];
            let len = rng.random_range(6..=12);
            let mut words = Vec::with_capacity(len);
            for _ in 0..len {
                if rng.random::<f64>() < 0.5 {
                    words.push(keywords[rng.random_range(0..keywords.len())].to_string());
                } else {
                    words.push(shared[rng.random_range(0..shared.len())].clone());
                }
            }
            body.push_str(&format!("r{record:05}\t{}\t{topic}\n", words.join(" ")));
            record += 1;
        }
        fs::write(data_dir.join(format!("{name}.tsv")), body).unwrap();
    }
    data_dir
}

/// Writes an experiment config for the toy 2-layer transformer over the given
/// dataset paths. `tasks` entries are (task name, dataset dir).
pub fn write_toy_config(
    path: &Path,
    output_dir: &Path,
    tasks: &[(&str, &Path)],
    seeds: &[u64],
) -> PathBuf {
    let task_names: Vec<String> = tasks.iter().map(|(t, _)| format!("\"{t}\"")).collect();
    let seed_list: Vec<String> = seeds.iter().map(|s| s.to_string()).collect();
    let mut text = format!(
        r#"output_dir = "{out}"
pooling = "first_subword"
layers = "all"
seeds = [{seeds}]
tasks = [{tasks}]
languages = ["synthetic"]

[probe]
learning_rate = 0.05
batch_size = 64
max_epochs = 12
patience = 4

[control]
scope = "full_dataset"

[[models]]
id = "toy-2l"
layers = 2
hidden = 32
heads = 2
max_sequence_length = 128
vocab_size = 512
seed = 42

[models.coverage]
synthetic = "full"

[datasets.synthetic]
"#,
        out = output_dir.display(),
        seeds = seed_list.join(", "),
        tasks = task_names.join(", "),
    );
    for (task, data_dir) in tasks {
        text.push_str(&format!("{task} = \"{}\"\n", data_dir.display()));
    }
    fs::write(path, text).unwrap();
    path.to_path_buf()
}
