#![allow(dead_code)]

use std::path::{Path, PathBuf};

use navparse::dataset::{generate, load_paraphrases, load_templates, save_examples, split};
use navparse::mention::MentionConfig;
use navparse::schema::load_site_schema;
use navparse::training::train_all;
use navparse::{ModelBundle, SiteSchema, TrainingConfig};

pub fn site_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/site1")
}

pub fn tiny_config() -> TrainingConfig {
    TrainingConfig {
        epochs_action: 1,
        epochs_mention: 1,
        epochs_value: 1,
        dim: 8,
        char_dim: 4,
        learning_rate: 0.01,
        mention: MentionConfig {
            embedding_dim: 8,
            hidden: 8,
            layers: 1,
            ..MentionConfig::default()
        },
        ..TrainingConfig::default()
    }
}

/// Writes schema.json and train/valid/test JSONL for a small toy set.
pub fn write_data(dir: &Path, count: usize) -> SiteSchema {
    let site = site_dir();
    let schema = load_site_schema(site.join("schema.json")).unwrap();
    let templates = load_templates(site.join("templates.jsonl")).unwrap();
    let para = load_paraphrases(site.join("paraphrases.json")).unwrap();
    let parts = split(&generate(&schema, &templates, &para, count, 5).unwrap(), (0.8, 0.1, 0.1), 5).unwrap();
    std::fs::create_dir_all(dir).unwrap();
    std::fs::copy(site.join("schema.json"), dir.join("schema.json")).unwrap();
    save_examples(&parts.train, dir.join("train.jsonl")).unwrap();
    save_examples(&parts.valid, dir.join("valid.jsonl")).unwrap();
    save_examples(&parts.test, dir.join("test.jsonl")).unwrap();
    schema
}

/// Trains a deliberately small bundle into `dir/bundle`.
pub fn tiny_bundle(dir: &Path) -> (SiteSchema, ModelBundle) {
    let data = dir.join("data");
    let schema = write_data(&data, 150);
    let train = navparse::dataset::load_examples(data.join("train.jsonl"), Some(&schema)).unwrap();
    let valid = navparse::dataset::load_examples(data.join("valid.jsonl"), Some(&schema)).unwrap();
    let bundle = train_all(&schema, &train, &valid, &tiny_config(), |_| {}).unwrap();
    bundle.save(&dir.join("bundle")).unwrap();
    (schema, bundle)
}
