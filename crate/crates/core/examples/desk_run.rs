//! Trains on the bundled toy site and reports held-out and cross-site
//! metrics.
//!
//! cargo run --release -p navparse-core --example desk_run -- data

use std::path::PathBuf;
use std::time::Instant;

use navparse::dataset::{generate, load_paraphrases, load_templates, split};
use navparse::evaluation::{evaluate, EvalReport};
use navparse::schema::load_site_schema;
use navparse::training::{predict, train_all, tune_inference};
use navparse::TrainingConfig;

fn main() -> navparse::Result<()> {
    env_logger::init();
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "data".into()));
    let config: TrainingConfig = serde_json::from_str(&std::fs::read_to_string(root.join("desk.json")).unwrap())?;
    let site = |name: &str| -> navparse::Result<_> {
        let dir = root.join(name);
        let schema = load_site_schema(dir.join("schema.json"))?;
        let templates = load_templates(dir.join("templates.jsonl"))?;
        let para = load_paraphrases(dir.join("paraphrases.json"))?;
        Ok((schema, templates, para))
    };
    let (s1, t1, p1) = site("site1")?;
    let data = split(&generate(&s1, &t1, &p1, 2000, 1)?, (0.8, 0.1, 0.1), 2)?;
    let start = Instant::now();
    let bundle = train_all(&s1, &data.train, &data.valid, &config, |r| {
        println!("{}", serde_json::to_string(r).unwrap());
    })?;
    println!("trained in {:.1}s", start.elapsed().as_secs_f64());

    println!("{}", EvalReport::table_header());
    let preds = predict(&bundle.models, &s1, &data.test, &bundle.inference)?;
    let rep = evaluate(&s1, &data.test, &preds)?;
    println!("{}", rep.table_row("test default"));
    print!("{}", rep.error_table());
    let rhos: Vec<f64> = (0..=20).map(|i| i as f64 * 0.05).chain([0.67]).collect();
    let alphas: Vec<f64> = (0..=10).map(|i| i as f64 * 0.1).chain([0.4]).collect();
    let (tuned, _) = tune_inference(&bundle.models, &s1, &data.valid, &rhos, &alphas, &bundle.inference)?;
    let preds = predict(&bundle.models, &s1, &data.test, &tuned)?;
    let rep = evaluate(&s1, &data.test, &preds)?;
    println!("{}", rep.table_row(&format!("test rho={:.2} a={:.1}", tuned.rho, tuned.alpha)));
    print!("{}", rep.error_table());

    let (s2, t2, p2) = site("site2")?;
    let other = generate(&s2, &t2, &p2, 500, 3)?;
    let preds = predict(&bundle.models, &s2, &other, &bundle.inference)?;
    println!("{}", evaluate(&s2, &other, &preds)?.table_row("cross-site"));
    Ok(())
}
