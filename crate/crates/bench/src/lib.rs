//! Fixtures shared by the benchmarks.

use std::path::Path;

use navparse::dataset::{generate, load_paraphrases, load_templates, split, Split};
use navparse::schema::load_site_schema;
use navparse::training::train_all;
use navparse::{ModelBundle, SiteSchema, TrainingConfig};

/// The bundled toy site split 80/10/10.
pub fn toy_site(count: usize) -> (SiteSchema, Split) {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/site1");
    let schema = load_site_schema(dir.join("schema.json")).expect("toy schema");
    let templates = load_templates(dir.join("templates.jsonl")).expect("toy templates");
    let para = load_paraphrases(dir.join("paraphrases.json")).expect("toy paraphrases");
    let examples = generate(&schema, &templates, &para, count, 1).expect("generation");
    (schema, split(&examples, (0.8, 0.1, 0.1), 2).expect("split"))
}

/// One epoch per component at the given width.
pub fn quick_bundle(schema: &SiteSchema, data: &Split, dim: usize) -> ModelBundle {
    let config = TrainingConfig {
        epochs_action: 1,
        epochs_mention: 1,
        epochs_value: 1,
        dim,
        learning_rate: 0.01,
        ..TrainingConfig::default()
    };
    train_all(schema, &data.train, &data.valid, &config, |_| {}).expect("training")
}
