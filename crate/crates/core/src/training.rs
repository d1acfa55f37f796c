//! Per-domain training runs, bundles and (ρ, α) tuning.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::action_scorer::{build_vocab, train_action_scorer, ActionScorer, ActionScorerConfig};
use crate::dataset::{examples_to_jsonl, Example, NavigationInstruction};
use crate::error::{read_to_string, write_file, Error, Result};
use crate::evaluation::{evaluate, EvalReport};
use crate::inference::{analyze, decide, InferenceConfig, Models, ScoredPrediction, Scorers};
use crate::mention::{mention_records, train_mention_extractor, MentionConfig, SpanExtractor, SubwordTokenizer};
use crate::schema::SiteSchema;
use crate::value_scorer::{
    build_char_vocab, train_value_scorer, value_records, LexicalMode, ValueScorer, ValueScorerConfig,
};

/// Optimizer settings shared by the three component trainers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub n_negatives: usize,
    pub seed: u64,
}

/// One line of training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub component: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_metric: f64,
    pub skipped: usize,
}

impl EpochRecord {
    pub fn new(component: &str, epoch: usize, train_loss: f64, valid_metric: f64, skipped: usize) -> Self {
        EpochRecord {
            component: component.to_owned(),
            epoch,
            train_loss,
            valid_metric,
            skipped,
        }
    }
}

fn default_char_dim() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub epochs_action: usize,
    pub epochs_mention: usize,
    pub epochs_value: usize,
    pub n_negatives: usize,
    pub dropout: f64,
    /// Word embedding and per-direction hidden size of both matchers.
    pub dim: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
    #[serde(default = "default_char_dim")]
    pub char_dim: usize,
    /// Per-component learning rates; `learning_rate` when absent.
    #[serde(default)]
    pub learning_rate_action: Option<f64>,
    #[serde(default)]
    pub learning_rate_mention: Option<f64>,
    #[serde(default)]
    pub learning_rate_value: Option<f64>,
    #[serde(default)]
    pub mention: MentionConfig,
    #[serde(default)]
    pub lexical_mode: LexicalMode,
    #[serde(default)]
    pub inference: InferenceConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 50,
            epochs_action: 7,
            epochs_mention: 3,
            epochs_value: 22,
            n_negatives: 1,
            dropout: 0.1,
            dim: 300,
            learning_rate: 1e-4,
            l2: 0.001,
            seed: 0,
            char_dim: default_char_dim(),
            learning_rate_action: None,
            learning_rate_mention: None,
            learning_rate_value: None,
            mention: MentionConfig::default(),
            lexical_mode: LexicalMode::default(),
            inference: InferenceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Action,
    Mention,
    Value,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Action, Component::Mention, Component::Value];

    pub fn name(self) -> &'static str {
        match self {
            Component::Action => "action",
            Component::Mention => "mention",
            Component::Value => "value",
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("batch_size", self.batch_size),
            ("epochs_action", self.epochs_action),
            ("epochs_mention", self.epochs_mention),
            ("epochs_value", self.epochs_value),
            ("n_negatives", self.n_negatives),
            ("dim", self.dim),
            ("char_dim", self.char_dim),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Validation(format!("{name} must be positive")));
            }
        }
        for lr in [Some(self.learning_rate), self.learning_rate_action, self.learning_rate_mention, self.learning_rate_value]
            .into_iter()
            .flatten()
        {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Validation(format!("learning rate must be positive, got {lr}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.mention.dropout) {
            return Err(Error::Validation("dropout must lie in [0, 1)".into()));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::Validation("l2 must be non-negative".into()));
        }
        self.inference.validate()
    }

    pub fn options(&self, component: Component) -> TrainOptions {
        let (epochs, lr, salt) = match component {
            Component::Action => (self.epochs_action, self.learning_rate_action, 11),
            Component::Mention => (self.epochs_mention, self.learning_rate_mention, 13),
            Component::Value => (self.epochs_value, self.learning_rate_value, 17),
        };
        TrainOptions {
            epochs,
            batch_size: self.batch_size,
            learning_rate: lr.unwrap_or(self.learning_rate),
            l2: self.l2,
            n_negatives: self.n_negatives,
            seed: component_seed(self.seed, salt),
        }
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

fn component_seed(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub dataset_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(config: &TrainingConfig, schema: &SiteSchema, train: &[Example], valid: &[Example]) -> Result<Self> {
        let mut h = Sha256::new();
        for part in [schema.to_json_string()?, examples_to_jsonl(train)?, examples_to_jsonl(valid)?] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        Ok(Provenance {
            config_hash: config.hash(),
            dataset_hash: hex::encode(h.finalize()),
            seed: config.seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetManifest {
    site_id: String,
    n_train: usize,
    n_valid: usize,
    #[serde(flatten)]
    provenance: Provenance,
}

/// Three trained components plus the decoding settings.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub models: Models,
    pub inference: InferenceConfig,
    pub provenance: Provenance,
}

pub fn checkpoint_dir(run: &Path, component: Component) -> PathBuf {
    run.join(component.name()).join("checkpoint")
}

const COMPLETE: &str = "COMPLETE";

fn is_complete(run: &Path, component: Component) -> bool {
    checkpoint_dir(run, component).join(COMPLETE).is_file()
}

fn mark_complete(run: &Path, component: Component) -> Result<()> {
    write_file(&checkpoint_dir(run, component).join(COMPLETE), "")
}

impl ModelBundle {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.models.action.save(&checkpoint_dir(dir, Component::Action))?;
        mark_complete(dir, Component::Action)?;
        self.models.mention.save(&checkpoint_dir(dir, Component::Mention))?;
        mark_complete(dir, Component::Mention)?;
        self.models.value.save(&checkpoint_dir(dir, Component::Value))?;
        mark_complete(dir, Component::Value)?;
        write_file(&dir.join("provenance.json"), serde_json::to_string_pretty(&self.provenance)?)?;
        self.save_inference(dir)
    }

    pub fn save_inference(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join("inference.json"), serde_json::to_string_pretty(&self.inference)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        for c in Component::ALL {
            if !is_complete(dir, c) {
                return Err(Error::Checkpoint(format!(
                    "{} has no complete {} checkpoint",
                    dir.display(),
                    c.name()
                )));
            }
        }
        let models = Models {
            action: ActionScorer::load(&checkpoint_dir(dir, Component::Action))?,
            mention: SpanExtractor::load(&checkpoint_dir(dir, Component::Mention))?,
            value: ValueScorer::load(&checkpoint_dir(dir, Component::Value))?,
        };
        let inference: InferenceConfig = serde_json::from_str(&read_to_string(&dir.join("inference.json"))?)?;
        inference.validate()?;
        let provenance = serde_json::from_str(&read_to_string(&dir.join("provenance.json"))?)?;
        Ok(ModelBundle {
            models,
            inference,
            provenance,
        })
    }

    pub fn parse(&self, schema: &SiteSchema, page_id: &str, command: &str) -> Result<Option<ScoredPrediction>> {
        crate::inference::parse(&self.models, schema, page_id, command, &self.inference)
    }
}

/// What a run should do with components that already have a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    /// Train every component that has no complete checkpoint yet.
    Resume,
    /// Retrain only this component; load the others if present.
    Only(Component),
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// Present once all three components are available.
    pub bundle: Option<ModelBundle>,
    pub history: Vec<EpochRecord>,
}

/// Trains action, mention and value components in that order, each kept at
/// its best-valid epoch. Without a run directory nothing is written.
pub fn train_all(
    schema: &SiteSchema,
    train: &[Example],
    valid: &[Example],
    config: &TrainingConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<ModelBundle> {
    let out = run(schema, train, valid, config, None, RunMode::Resume, on_epoch)?;
    Ok(out.bundle.expect("a fresh run trains every component"))
}

/// Like [`train_all`] but persisting into `dir`: config.json,
/// dataset-manifest.json, `{action,mention,value}/checkpoint`,
/// inference.json and history.jsonl. Finished components survive a later
/// failure and are picked up again by [`RunMode::Resume`].
pub fn train_run(
    schema: &SiteSchema,
    train: &[Example],
    valid: &[Example],
    config: &TrainingConfig,
    dir: &Path,
    mode: RunMode,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<RunOutcome> {
    run(schema, train, valid, config, Some(dir), mode, on_epoch)
}

fn run(
    schema: &SiteSchema,
    train: &[Example],
    valid: &[Example],
    config: &TrainingConfig,
    dir: Option<&Path>,
    mode: RunMode,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<RunOutcome> {
    config.validate()?;
    schema.validate()?;
    if train.is_empty() {
        return Err(Error::Training("training split is empty".into()));
    }
    if valid.is_empty() {
        return Err(Error::Training("validation split is empty".into()));
    }
    for e in train.iter().chain(valid) {
        e.validate_against(schema)?;
    }
    let provenance = Provenance::new(config, schema, train, valid)?;

    if let Some(dir) = dir {
        let config_path = dir.join("config.json");
        if config_path.is_file() {
            let previous: TrainingConfig = serde_json::from_str(&read_to_string(&config_path)?)?;
            let manifest: DatasetManifest = serde_json::from_str(&read_to_string(&dir.join("dataset-manifest.json"))?)?;
            if previous != *config || manifest.provenance != provenance {
                return Err(Error::Training(format!(
                    "{} holds a run with a different config or dataset",
                    dir.display()
                )));
            }
        } else {
            write_file(&config_path, serde_json::to_string_pretty(config)?)?;
            let manifest = DatasetManifest {
                site_id: schema.site_id.clone(),
                n_train: train.len(),
                n_valid: valid.len(),
                provenance: provenance.clone(),
            };
            write_file(&dir.join("dataset-manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
            write_file(&dir.join("provenance.json"), serde_json::to_string_pretty(&provenance)?)?;
        }
    }

    let mut history = Vec::new();
    let mut log_epoch = |r: &EpochRecord| -> Result<()> {
        on_epoch(r);
        if let Some(dir) = dir {
            let path = dir.join("history.jsonl");
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    };
    // Ok(None): skip; Ok(Some(..)): load from disk
    let decide_step = |c: Component| -> Option<bool> {
        let done = dir.is_some_and(|d| is_complete(d, c));
        match mode {
            RunMode::Resume => Some(!done),
            RunMode::Only(x) if x == c => Some(true),
            RunMode::Only(_) => done.then_some(false),
        }
    };

    let action = match decide_step(Component::Action) {
        Some(true) => {
            let vocab = build_vocab(train, schema);
            let cfg = ActionScorerConfig {
                dim: config.dim,
                dropout: config.dropout,
            };
            let mut scorer = ActionScorer::new(vocab, cfg, component_seed(config.seed, 1))?;
            info!("training action scorer on {} examples", train.len());
            let mut err = Ok(());
            let h = train_action_scorer(&mut scorer, train, valid, schema, &config.options(Component::Action), |r| {
                if err.is_ok() {
                    err = log_epoch(r);
                }
            })?;
            err?;
            history.extend(h);
            if let Some(dir) = dir {
                scorer.save(&checkpoint_dir(dir, Component::Action))?;
                mark_complete(dir, Component::Action)?;
            }
            Some(scorer)
        }
        Some(false) => {
            info!("loading finished action scorer");
            Some(ActionScorer::load(&checkpoint_dir(dir.expect("loading needs a run dir"), Component::Action))?)
        }
        None => None,
    };

    let mention = match decide_step(Component::Mention) {
        Some(true) => {
            let texts = train
                .iter()
                .map(|e| e.command.as_str())
                .chain(schema.actions().flat_map(|a| a.parameters.iter().map(|p| p.name.as_str())));
            let tokenizer = SubwordTokenizer::build(texts);
            let mut extractor = SpanExtractor::new(tokenizer, config.mention.clone(), component_seed(config.seed, 2))?;
            let (tr, va) = (mention_records(train, schema)?, mention_records(valid, schema)?);
            info!("training mention extractor on {} records", tr.len());
            let mut err = Ok(());
            let h = train_mention_extractor(&mut extractor, &tr, &va, &config.options(Component::Mention), |r| {
                if err.is_ok() {
                    err = log_epoch(r);
                }
            })?;
            err?;
            history.extend(h);
            if let Some(dir) = dir {
                extractor.save(&checkpoint_dir(dir, Component::Mention))?;
                mark_complete(dir, Component::Mention)?;
            }
            Some(extractor)
        }
        Some(false) => Some(SpanExtractor::load(&checkpoint_dir(dir.expect("run dir"), Component::Mention))?),
        None => None,
    };

    let value = match decide_step(Component::Value) {
        Some(true) => {
            let vocab = match &action {
                Some(a) => a.vocab().clone(),
                None => build_vocab(train, schema),
            };
            if action.is_none() {
                warn!("no action scorer available; value scorer word embeddings start random");
            }
            let domain_texts: Vec<&str> = schema
                .actions()
                .flat_map(|a| a.parameters.iter().flat_map(|p| p.domain.iter().map(String::as_str)))
                .collect();
            let chars = build_char_vocab(train.iter().map(|e| e.command.as_str()).chain(domain_texts));
            let vcfg = ValueScorerConfig {
                dim: config.dim,
                char_dim: config.char_dim,
                dropout: config.dropout,
                lexical_mode: config.lexical_mode,
            };
            let shared = action.as_ref().map(|a| a.word_embedding());
            let mut scorer = ValueScorer::new(vocab, chars, shared, vcfg, component_seed(config.seed, 3))?;
            let (tr, va) = (value_records(train, schema)?, value_records(valid, schema)?);
            info!("training value scorer on {} records", tr.len());
            let mut err = Ok(());
            let h = train_value_scorer(&mut scorer, &tr, &va, &config.options(Component::Value), |r| {
                if err.is_ok() {
                    err = log_epoch(r);
                }
            })?;
            err?;
            history.extend(h);
            if let Some(dir) = dir {
                scorer.save(&checkpoint_dir(dir, Component::Value))?;
                mark_complete(dir, Component::Value)?;
            }
            Some(scorer)
        }
        Some(false) => Some(ValueScorer::load(&checkpoint_dir(dir.expect("run dir"), Component::Value))?),
        None => None,
    };

    let bundle = match (action, mention, value) {
        (Some(action), Some(mention), Some(value)) => {
            let inference = match dir.map(|d| d.join("inference.json")).filter(|p| p.is_file()) {
                Some(p) => serde_json::from_str(&read_to_string(&p)?)?,
                None => config.inference,
            };
            let bundle = ModelBundle {
                models: Models { action, mention, value },
                inference,
                provenance,
            };
            if let Some(dir) = dir {
                bundle.save_inference(dir)?;
            }
            Some(bundle)
        }
        _ => None,
    };
    Ok(RunOutcome { bundle, history })
}

/// Parses every example on its own page.
pub fn predict(
    scorers: &impl Scorers,
    schema: &SiteSchema,
    examples: &[Example],
    config: &InferenceConfig,
) -> Result<Vec<Option<NavigationInstruction>>> {
    examples
        .iter()
        .map(|e| {
            let a = analyze(scorers, schema, &e.page_id, &e.command)?;
            Ok(decide(&a, config).map(|p| p.instruction))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub rho: f64,
    pub alpha: f64,
    pub report: EvalReport,
}

/// Grid search over (ρ, α) maximizing valid EMA. Ties go to higher PA-100,
/// then lower ρ, then lower α. Other fields of `base` are kept.
pub fn tune_inference(
    scorers: &impl Scorers,
    schema: &SiteSchema,
    valid: &[Example],
    rho_grid: &[f64],
    alpha_grid: &[f64],
    base: &InferenceConfig,
) -> Result<(InferenceConfig, Vec<GridCell>)> {
    if valid.is_empty() {
        return Err(Error::Empty("validation set for tuning"));
    }
    if rho_grid.is_empty() || alpha_grid.is_empty() {
        return Err(Error::Validation("tuning grids must be non-empty".into()));
    }
    for &v in rho_grid.iter().chain(alpha_grid) {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Validation(format!("grid value {v} outside [0, 1]")));
        }
    }
    let analyses = valid
        .iter()
        .map(|e| analyze(scorers, schema, &e.page_id, &e.command))
        .collect::<Result<Vec<_>>>()?;
    let mut cells = Vec::new();
    let mut best: Option<usize> = None;
    for &rho in rho_grid {
        for &alpha in alpha_grid {
            let cfg = InferenceConfig { rho, alpha, ..*base };
            let preds: Vec<_> = analyses.iter().map(|a| decide(a, &cfg).map(|p| p.instruction)).collect();
            let report = evaluate(schema, valid, &preds)?;
            let better = best.is_none_or(|b| {
                let c: &GridCell = &cells[b];
                let key = (report.ema, report.pa100, -rho, -alpha);
                let old = (c.report.ema, c.report.pa100, -c.rho, -c.alpha);
                key.partial_cmp(&old) == Some(std::cmp::Ordering::Greater)
            });
            if better {
                best = Some(cells.len());
            }
            cells.push(GridCell { rho, alpha, report });
        }
    }
    let b = &cells[best.expect("grids are non-empty")];
    if b.rho >= 1.0 {
        warn!("selected rho = 1 rejects every closed-domain value below a perfect score");
    }
    Ok((InferenceConfig { rho: b.rho, alpha: b.alpha, ..*base }, cells))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_hyperparameters() {
        let c = TrainingConfig::default();
        assert_eq!(
            (c.batch_size, c.epochs_action, c.epochs_mention, c.epochs_value, c.n_negatives, c.dim),
            (50, 7, 3, 22, 1, 300)
        );
        assert_eq!((c.dropout, c.learning_rate, c.l2), (0.1, 1e-4, 0.001));
        assert_eq!((c.inference.rho, c.inference.alpha), (0.67, 0.4));
        c.validate().unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            TrainingConfig {
                batch_size: 0,
                ..Default::default()
            },
            TrainingConfig {
                learning_rate: -1.0,
                ..Default::default()
            },
            TrainingConfig {
                dropout: 1.0,
                ..Default::default()
            },
            TrainingConfig {
                learning_rate_value: Some(0.0),
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn config_hash_tracks_every_field() {
        let a = TrainingConfig::default();
        assert_eq!(a.hash(), TrainingConfig::default().hash());
        assert_ne!(a.hash(), TrainingConfig { seed: 1, ..a.clone() }.hash());
        assert_ne!(a.hash(), TrainingConfig { dim: 32, ..a.clone() }.hash());
    }

    #[test]
    fn config_json_accepts_partial_files() {
        let c: TrainingConfig = serde_json::from_str(
            r#"{"batch_size":50,"epochs_action":7,"epochs_mention":3,"epochs_value":22,
                "n_negatives":1,"dropout":0.1,"dim":32,"learning_rate":0.001,"l2":0.001,"seed":7}"#,
        )
        .unwrap();
        assert_eq!(c.dim, 32);
        assert_eq!(c.mention, MentionConfig::default());
        assert!(serde_json::from_str::<TrainingConfig>(r#"{"bogus":1}"#).is_err());
    }

    #[test]
    fn component_options_use_overrides() {
        let c = TrainingConfig {
            learning_rate_value: Some(0.5),
            ..Default::default()
        };
        assert_eq!(c.options(Component::Value).learning_rate, 0.5);
        assert_eq!(c.options(Component::Action).learning_rate, 1e-4);
        assert_eq!(c.options(Component::Mention).epochs, 3);
        assert_ne!(c.options(Component::Action).seed, c.options(Component::Value).seed);
    }
}
