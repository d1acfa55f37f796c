//! Mention-to-value scoring for closed-domain parameters: word-level and
//! character-level semantic similarity plus two lexical scores.

use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action_scorer::{argmax, score_from_cosine};
use crate::dataset::Example;
use crate::error::{read_to_string, write_file, Error, Result};
use crate::nn::{dropout_mask, Adam, BiLstm, Gradients, Graph, Lstm, NodeId, ParamId, ParamStore, Tensor};
use crate::schema::{ParameterSpec, SiteSchema};
use crate::text::{normalize, whitespace_words, word_tokens, Vocab};
use crate::training::{EpochRecord, TrainOptions};

pub const MAX_WORD_CHARS: usize = 32;
pub const MAX_WORDS: usize = 64;

/// How the two lexical scores enter the net score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LexicalMode {
    /// `mean(word, char, mean(fuzzy, value_match))`
    #[default]
    Collapsed,
    /// `mean(word, char, fuzzy, value_match)`
    Separate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueScorerConfig {
    pub dim: usize,
    pub char_dim: usize,
    pub dropout: f64,
    #[serde(default)]
    pub lexical_mode: LexicalMode,
}

/// Component and net similarity of one (mention, value) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueScore {
    pub word: f64,
    pub char: f64,
    pub lex: (f64, f64),
    pub net: f64,
}

pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            cur[j] = (prev[j] + 1).min(cur[j - 1] + 1).min(prev[j - 1] + cost);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - lev(m, v) / max(|m|, |v|)` over normalized text.
pub fn fuzzy(mention: &str, value: &str) -> f64 {
    let (m, v) = (normalize(mention), normalize(value));
    let longest = m.chars().count().max(v.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein(&m, &v) as f64 / longest as f64
}

/// Fraction of the distinct words of `value` that occur in `mention`.
pub fn value_match(mention: &str, value: &str) -> f64 {
    let value_words: std::collections::BTreeSet<String> = whitespace_words(value).into_iter().collect();
    if value_words.is_empty() {
        return 0.0;
    }
    let mention_words: std::collections::BTreeSet<String> = whitespace_words(mention).into_iter().collect();
    value_words.intersection(&mention_words).count() as f64 / value_words.len() as f64
}

/// `(fuzzy, value_match)`.
pub fn lexical_similarity(mention: &str, value: &str) -> (f64, f64) {
    (fuzzy(mention, value), value_match(mention, value))
}

pub fn net_score(word: f64, char: f64, lex: (f64, f64), mode: LexicalMode) -> f64 {
    match mode {
        LexicalMode::Collapsed => (word + char + (lex.0 + lex.1) / 2.0) / 3.0,
        LexicalMode::Separate => (word + char + lex.0 + lex.1) / 4.0,
    }
}

/// Printable ASCII plus every character of the given texts.
pub fn build_char_vocab<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vocab {
    let mut chars: Vec<String> = (0x20u8..0x7f).map(|b| (b as char).to_string()).collect();
    for t in texts {
        chars.extend(normalize(t).chars().map(|c| c.to_string()));
    }
    Vocab::from_tokens(chars)
}

#[derive(Debug, Clone, Copy)]
struct Layers {
    word_embedding: ParamId,
    word_encoder: BiLstm,
    char_embedding: ParamId,
    char_word: Lstm,
    char_encoder: BiLstm,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ValueScorerConfig,
    vocab: Vocab,
    char_vocab: Vocab,
}

#[derive(Debug, Clone)]
pub struct ValueScorer {
    config: ValueScorerConfig,
    vocab: Vocab,
    char_vocab: Vocab,
    store: ParamStore,
    layers: Layers,
}

/// The parts of a mention or value shared by every pair it takes part in.
#[derive(Clone, Copy)]
struct Encoded {
    word: NodeId,
    char: NodeId,
}

impl ValueScorer {
    /// `word_embedding`, when given, seeds the word table (shared with the
    /// action scorer) and must be `|vocab| x dim`.
    pub fn new(
        vocab: Vocab,
        char_vocab: Vocab,
        word_embedding: Option<&Tensor>,
        config: ValueScorerConfig,
        seed: u64,
    ) -> Result<Self> {
        if config.dim == 0 || config.char_dim == 0 {
            return Err(Error::Model("dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let (d, c) = (config.dim, config.char_dim);
        let word_embedding = match word_embedding {
            Some(t) if (t.rows, t.cols) == (vocab.len(), d) => store.add("word_embedding", t.clone()),
            Some(t) => {
                return Err(Error::Model(format!(
                    "shared word embedding is {}x{}, expected {}x{d}",
                    t.rows,
                    t.cols,
                    vocab.len()
                )))
            }
            None => store.add_uniform("word_embedding", vocab.len(), d, 0.1, &mut rng),
        };
        let layers = Layers {
            word_embedding,
            word_encoder: BiLstm::register(&mut store, "word_encoder", d, d, &mut rng),
            char_embedding: store.add_uniform("char_embedding", char_vocab.len(), c, 0.1, &mut rng),
            char_word: Lstm::register(&mut store, "char_word", c, d, &mut rng),
            char_encoder: BiLstm::register(&mut store, "char_encoder", d, d, &mut rng),
        };
        Ok(ValueScorer {
            config,
            vocab,
            char_vocab,
            store,
            layers,
        })
    }

    pub fn config(&self) -> &ValueScorerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check(text: &str) -> Result<()> {
        if text.trim().is_empty() {
            return Err(Error::Model("cannot score an empty string".into()));
        }
        Ok(())
    }

    fn drop(&self, g: &mut Graph, v: NodeId, rng: Option<&mut ChaCha8Rng>) -> NodeId {
        match rng {
            Some(rng) if self.config.dropout > 0.0 => {
                let mask = dropout_mask(g.value(v).len(), self.config.dropout, rng);
                g.mask(v, mask)
            }
            _ => v,
        }
    }

    fn word_node(&self, g: &mut Graph, text: &str, rng: Option<&mut ChaCha8Rng>) -> Result<NodeId> {
        let mut tokens = word_tokens(text);
        if tokens.is_empty() {
            return Err(Error::Model(format!("`{text}` has no tokens")));
        }
        if tokens.len() > MAX_WORDS {
            warn!("truncating `{text}` to {MAX_WORDS} words");
            tokens.truncate(MAX_WORDS);
        }
        let inputs: Vec<NodeId> = tokens
            .iter()
            .map(|t| g.embed(self.layers.word_embedding, self.vocab.id(t)))
            .collect();
        let v = self.layers.word_encoder.encode(g, &inputs);
        Ok(self.drop(g, v, rng))
    }

    fn char_node(&self, g: &mut Graph, text: &str, rng: Option<&mut ChaCha8Rng>) -> Result<NodeId> {
        let mut words = whitespace_words(text);
        if words.is_empty() {
            return Err(Error::Model(format!("`{text}` has no words")));
        }
        if words.len() > MAX_WORDS {
            warn!("truncating `{text}` to {MAX_WORDS} words");
            words.truncate(MAX_WORDS);
        }
        let mut word_vectors = Vec::with_capacity(words.len());
        for w in &words {
            let chars: Vec<char> = w.chars().collect();
            if chars.len() > MAX_WORD_CHARS {
                warn!("truncating word `{w}` to {MAX_WORD_CHARS} characters");
            }
            let inputs: Vec<NodeId> = chars
                .iter()
                .take(MAX_WORD_CHARS)
                .map(|c| g.embed(self.layers.char_embedding, self.char_vocab.id(&c.to_string())))
                .collect();
            let states = self.layers.char_word.run(g, inputs);
            word_vectors.push(*states.last().expect("words are non-empty"));
        }
        let v = self.layers.char_encoder.encode(g, &word_vectors);
        Ok(self.drop(g, v, rng))
    }

    fn encode(&self, g: &mut Graph, text: &str, mut rng: Option<&mut ChaCha8Rng>) -> Result<Encoded> {
        Self::check(text)?;
        Ok(Encoded {
            word: self.word_node(g, text, rng.as_deref_mut())?,
            char: self.char_node(g, text, rng)?,
        })
    }

    /// Net score node plus the two semantic components.
    fn pair(&self, g: &mut Graph, m: Encoded, v: Encoded, lex: (f64, f64)) -> (NodeId, NodeId, NodeId) {
        let cw = g.cosine(m.word, v.word);
        let word = score_from_cosine(g, cw);
        let cc = g.cosine(m.char, v.char);
        let char = score_from_cosine(g, cc);
        let net = match self.config.lexical_mode {
            LexicalMode::Collapsed => {
                let sum = g.add(word, char);
                g.affine(sum, 1.0 / 3.0, (lex.0 + lex.1) / 6.0)
            }
            LexicalMode::Separate => {
                let sum = g.add(word, char);
                g.affine(sum, 0.25, (lex.0 + lex.1) / 4.0)
            }
        };
        (net, word, char)
    }

    pub fn word_similarity(&self, mention: &str, value: &str) -> Result<f64> {
        Self::check(mention)?;
        Self::check(value)?;
        let mut g = Graph::new(&self.store);
        let m = self.word_node(&mut g, mention, None)?;
        let v = self.word_node(&mut g, value, None)?;
        let cos = g.cosine(m, v);
        let s = score_from_cosine(&mut g, cos);
        Ok(g.scalar(s))
    }

    pub fn char_similarity(&self, mention: &str, value: &str) -> Result<f64> {
        Self::check(mention)?;
        Self::check(value)?;
        let mut g = Graph::new(&self.store);
        let m = self.char_node(&mut g, mention, None)?;
        let v = self.char_node(&mut g, value, None)?;
        let cos = g.cosine(m, v);
        let s = score_from_cosine(&mut g, cos);
        Ok(g.scalar(s))
    }

    pub fn net_value_score(&self, mention: &str, value: &str) -> Result<ValueScore> {
        Ok(self.score_values(mention, std::slice::from_ref(&value.to_owned()))?[0])
    }

    /// Scores `mention` against each value, encoding the mention once.
    pub fn score_values(&self, mention: &str, values: &[String]) -> Result<Vec<ValueScore>> {
        let mut g = Graph::new(&self.store);
        let m = self.encode(&mut g, mention, None)?;
        values
            .iter()
            .map(|value| {
                let v = self.encode(&mut g, value, None)?;
                let lex = lexical_similarity(mention, value);
                let (net, word, char) = self.pair(&mut g, m, v, lex);
                Ok(ValueScore {
                    word: g.scalar(word),
                    char: g.scalar(char),
                    lex,
                    net: g.scalar(net),
                })
            })
            .collect()
    }

    fn loss_node(
        &self,
        g: &mut Graph,
        mention: &str,
        positive: &str,
        negatives: &[&str],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Option<NodeId>> {
        if negatives.is_empty() {
            return Ok(None);
        }
        let m = self.encode(g, mention, rng.as_deref_mut())?;
        let p = self.encode(g, positive, rng.as_deref_mut())?;
        let (pos, _, _) = self.pair(g, m, p, lexical_similarity(mention, positive));
        let mut terms = Vec::with_capacity(negatives.len());
        for neg in negatives {
            let n = self.encode(g, neg, rng.as_deref_mut())?;
            let (s, _, _) = self.pair(g, m, n, lexical_similarity(mention, neg));
            let diff = g.sub(s, pos);
            let shifted = g.affine(diff, 1.0, 1.0);
            terms.push(g.relu(shifted));
        }
        Ok(Some(g.sum(&terms)))
    }

    /// `sum_{v-} max(S_p(m, v-) - S_p(m, v+) + 1, 0)` over net scores.
    pub fn value_ranking_loss(&self, mention: &str, positive: &str, negatives: &[&str]) -> Result<f64> {
        Ok(self.loss_and_gradients(mention, positive, negatives)?.0)
    }

    pub fn loss_and_gradients(&self, mention: &str, positive: &str, negatives: &[&str]) -> Result<(f64, Gradients)> {
        let mut g = Graph::new(&self.store);
        match self.loss_node(&mut g, mention, positive, negatives, None)? {
            Some(loss) => Ok((g.scalar(loss), g.backward(loss))),
            None => {
                warn!("value ranking loss with no negatives for `{mention}`");
                Ok((0.0, Gradients::new(&self.store)))
            }
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = Meta {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            char_vocab: self.char_vocab.clone(),
        };
        write_file(&dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        write_file(&dir.join("chars.json"), serde_json::to_string(&self.char_vocab)?)?;
        self.store.save(&dir.join("weights.bin"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: Meta = serde_json::from_str(&read_to_string(&dir.join("meta.json"))?)?;
        let store = ParamStore::load(&dir.join("weights.bin"))?;
        let (d, c) = (meta.config.dim, meta.config.char_dim);
        let layers = Layers {
            word_embedding: store.expect("word_embedding", meta.vocab.len(), d)?,
            word_encoder: BiLstm::lookup(&store, "word_encoder", d, d)?,
            char_embedding: store.expect("char_embedding", meta.char_vocab.len(), c)?,
            char_word: Lstm::lookup(&store, "char_word", c, d)?,
            char_encoder: BiLstm::lookup(&store, "char_encoder", d, d)?,
        };
        Ok(ValueScorer {
            config: meta.config,
            vocab: meta.vocab,
            char_vocab: meta.char_vocab,
            store,
            layers,
        })
    }
}

/// A closed-domain assignment with its mention, for value-scorer training.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueRecord {
    pub mention: String,
    pub parameter: ParameterSpec,
    pub gold: usize,
}

pub fn value_records(examples: &[Example], schema: &SiteSchema) -> Result<Vec<ValueRecord>> {
    let mut out = Vec::new();
    for e in examples {
        let action = schema.action(&e.page_id, &e.gold.action)?;
        for a in &e.gold.assignments {
            let Some(spec) = action.parameter(&a.parameter) else {
                return Err(Error::Training(format!("unknown parameter `{}`", a.parameter)));
            };
            if !spec.is_closed() {
                continue;
            }
            let Some(m) = e.mention_of(&a.parameter) else { continue };
            let key = normalize(&a.value);
            let gold = spec
                .domain
                .iter()
                .position(|v| normalize(v) == key)
                .ok_or_else(|| Error::Training(format!("`{}` is not in the domain of `{}`", a.value, spec.name)))?;
            out.push(ValueRecord {
                mention: m.text.clone(),
                parameter: spec.clone(),
                gold,
            });
        }
    }
    Ok(out)
}

/// Top-1 accuracy of the net score over each record's full domain.
pub fn value_accuracy(scorer: &ValueScorer, records: &[ValueRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("no value records to evaluate"));
    }
    let mut correct = 0;
    for r in records {
        let scores: Vec<f64> = scorer
            .score_values(&r.mention, &r.parameter.domain)?
            .iter()
            .map(|s| s.net)
            .collect();
        if argmax(&scores) == Some(r.gold) {
            correct += 1;
        }
    }
    Ok(correct as f64 / records.len() as f64)
}

pub fn train_value_scorer(
    scorer: &mut ValueScorer,
    train: &[ValueRecord],
    valid: &[ValueRecord],
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    if train.is_empty() {
        return Err(Error::Training("empty value training set".into()));
    }
    if valid.is_empty() {
        return Err(Error::Training("empty value validation set".into()));
    }
    let skipped = train.iter().filter(|r| r.parameter.domain.len() < 2).count();
    if skipped > 0 {
        warn!("{skipped} value records have a single-value domain and no negatives");
    }
    let usable: Vec<&ValueRecord> = train.iter().filter(|r| r.parameter.domain.len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::Training("no value record has a negative value".into()));
    }
    let mut adam = Adam::new(&scorer.store, opts.learning_rate, opts.l2);
    let mut best: Option<(f64, ParamStore)> = None;
    let mut history = Vec::new();
    for epoch in 1..=opts.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_mul(2_000_003).wrapping_add(epoch as u64));
        let mut order: Vec<usize> = (0..usable.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(opts.batch_size.max(1)) {
            let grads = {
                let mut g = Graph::new(&scorer.store);
                let mut losses = Vec::new();
                for &i in batch {
                    let r = usable[i];
                    let domain = &r.parameter.domain;
                    let mut negatives: Vec<&str> = Vec::new();
                    for _ in 0..opts.n_negatives.min(domain.len() - 1) {
                        // uniform over dom(p) \ {gold}, without replacement
                        loop {
                            let k = rng.gen_range(0..domain.len());
                            if k != r.gold && !negatives.contains(&domain[k].as_str()) {
                                negatives.push(&domain[k]);
                                break;
                            }
                        }
                    }
                    if let Some(l) = scorer.loss_node(&mut g, &r.mention, &domain[r.gold], &negatives, Some(&mut rng))? {
                        losses.push(l);
                    }
                }
                let sum = g.sum(&losses);
                total += g.scalar(sum);
                let mut grads = g.backward(sum);
                grads.scale(1.0 / batch.len() as f64);
                grads
            };
            adam.step(&mut scorer.store, &grads);
        }
        if !scorer.store.all_finite() {
            return Err(Error::Training("value scorer weights diverged".into()));
        }
        let acc = value_accuracy(scorer, valid)?;
        let record = EpochRecord::new("value", epoch, total / usable.len() as f64, acc, skipped);
        on_epoch(&record);
        history.push(record);
        if best.as_ref().is_none_or(|(b, _)| acc > *b) {
            best = Some((acc, scorer.store.clone()));
        }
    }
    if let Some((_, store)) = best {
        scorer.store = store;
    }
    Ok(history)
}
