//! Dual-encoder action scoring: a command and an (action name, parameter
//! names) pair are encoded with a shared BiLSTM and compared by cosine.

use std::path::Path;

use log::warn;
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Example;
use crate::error::{read_to_string, write_file, Error, Result};
use crate::nn::{dropout_mask, Adam, BiLstm, Gradients, Graph, Linear, NodeId, ParamId, ParamStore, Tensor};
use crate::schema::{ActionSchema, SiteSchema};
use crate::text::{word_tokens, Vocab};
use crate::training::{EpochRecord, TrainOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionScorerConfig {
    /// Embedding size and per-direction hidden size.
    pub dim: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone, Copy)]
struct Layers {
    embedding: ParamId,
    encoder: BiLstm,
    combine: Linear,
}

impl Layers {
    fn register(store: &mut ParamStore, vocab: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Layers {
            embedding: store.add_uniform("word_embedding", vocab, dim, 0.1, rng),
            encoder: BiLstm::register(store, "encoder", dim, dim, rng),
            combine: Linear::register(store, "combine", 4 * dim, 2 * dim, rng),
        }
    }

    fn lookup(store: &ParamStore, vocab: usize, dim: usize) -> Result<Self> {
        Ok(Layers {
            embedding: store.expect("word_embedding", vocab, dim)?,
            encoder: BiLstm::lookup(store, "encoder", dim, dim)?,
            combine: Linear::lookup(store, "combine", 4 * dim, 2 * dim)?,
        })
    }
}

/// The 2d-dimensional command representation `[h_fwd_R ; h_bwd_1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedCommand {
    pub v_c: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ActionScorer {
    config: ActionScorerConfig,
    vocab: Vocab,
    store: ParamStore,
    layers: Layers,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ActionScorerConfig,
    vocab: Vocab,
}

/// Word vocabulary over commands, action names, parameter names and
/// closed-domain values.
pub fn build_vocab<'a>(examples: impl IntoIterator<Item = &'a Example>, schema: &SiteSchema) -> Vocab {
    let mut tokens: Vec<String> = examples.into_iter().flat_map(|e| word_tokens(&e.command)).collect();
    for action in schema.actions() {
        tokens.extend(word_tokens(&action.name));
        for p in &action.parameters {
            tokens.extend(word_tokens(&p.name));
            tokens.extend(p.domain.iter().flat_map(|v| word_tokens(v)));
        }
    }
    Vocab::from_tokens(tokens)
}

pub(crate) fn score_from_cosine(g: &mut Graph, cos: NodeId) -> NodeId {
    g.affine(cos, 0.5, 0.5)
}

impl ActionScorer {
    pub fn new(vocab: Vocab, config: ActionScorerConfig, seed: u64) -> Result<Self> {
        if config.dim == 0 {
            return Err(Error::Model("dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let layers = Layers::register(&mut store, vocab.len(), config.dim, &mut rng);
        Ok(ActionScorer {
            config,
            vocab,
            store,
            layers,
        })
    }

    pub fn config(&self) -> &ActionScorerConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn word_embedding(&self) -> &Tensor {
        self.store.get(self.layers.embedding)
    }

    fn token_ids(&self, text: &str) -> Result<Vec<usize>> {
        let ids: Vec<usize> = word_tokens(text).iter().map(|t| self.vocab.id(t)).collect();
        if ids.is_empty() {
            return Err(Error::Model(format!("`{text}` has no tokens")));
        }
        Ok(ids)
    }

    fn encode_text(&self, g: &mut Graph, text: &str, rng: Option<&mut ChaCha8Rng>) -> Result<NodeId> {
        let inputs: Vec<NodeId> = self
            .token_ids(text)?
            .into_iter()
            .map(|id| g.embed(self.layers.embedding, id))
            .collect();
        let v = self.layers.encoder.encode(g, &inputs);
        Ok(match rng {
            Some(rng) if self.config.dropout > 0.0 => {
                let mask = dropout_mask(2 * self.config.dim, self.config.dropout, rng);
                g.mask(v, mask)
            }
            _ => v,
        })
    }

    fn action_node(&self, g: &mut Graph, action: &ActionSchema, mut rng: Option<&mut ChaCha8Rng>) -> Result<NodeId> {
        let v_a = self.encode_text(g, &action.name, rng.as_deref_mut())?;
        let v_p = if action.parameters.is_empty() {
            g.zeros(2 * self.config.dim)
        } else {
            let params = action
                .parameters
                .iter()
                .map(|p| self.encode_text(g, &p.name, rng.as_deref_mut()))
                .collect::<Result<Vec<_>>>()?;
            g.mean(&params)
        };
        let joined = g.concat(&[v_a, v_p]);
        let lin = self.layers.combine.forward(g, joined);
        Ok(g.tanh(lin))
    }

    fn score_node(&self, g: &mut Graph, v_c: NodeId, v_ap: NodeId) -> NodeId {
        let cos = g.cosine(v_c, v_ap);
        score_from_cosine(g, cos)
    }

    pub fn encode_command(&self, command: &str) -> Result<EncodedCommand> {
        let mut g = Graph::new(&self.store);
        let v = self.encode_text(&mut g, command, None)?;
        Ok(EncodedCommand {
            v_c: g.value(v).data.clone(),
        })
    }

    /// `tanh(W_a [v_a ; mean(v_p)] + b_a)`; the parameter mean is the zero
    /// vector for unparametrized actions.
    pub fn encode_action(&self, action: &ActionSchema) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let v = self.action_node(&mut g, action, None)?;
        Ok(g.value(v).data.clone())
    }

    pub fn score_action(&self, command: &str, action: &ActionSchema) -> Result<f64> {
        Ok(self.score_actions(command, std::slice::from_ref(action))?[0])
    }

    /// Scores every action against one encoding of `command`.
    pub fn score_actions(&self, command: &str, actions: &[ActionSchema]) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let v_c = self.encode_text(&mut g, command, None)?;
        actions
            .iter()
            .map(|a| {
                let v_ap = self.action_node(&mut g, a, None)?;
                let s = self.score_node(&mut g, v_c, v_ap);
                Ok(g.scalar(s))
            })
            .collect()
    }

    fn loss_node(
        &self,
        g: &mut Graph,
        command: &str,
        positives: &[&ActionSchema],
        negatives: &[&ActionSchema],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Option<NodeId>> {
        if positives.is_empty() {
            return Err(Error::Model("ranking loss needs at least one positive".into()));
        }
        if negatives.is_empty() {
            return Ok(None);
        }
        let v_c = self.encode_text(g, command, rng.as_deref_mut())?;
        let mut score = |g: &mut Graph, a: &ActionSchema| -> Result<NodeId> {
            let v_ap = self.action_node(g, a, rng.as_deref_mut())?;
            Ok(self.score_node(g, v_c, v_ap))
        };
        let pos = positives.iter().map(|a| score(g, a)).collect::<Result<Vec<_>>>()?;
        let neg = negatives.iter().map(|a| score(g, a)).collect::<Result<Vec<_>>>()?;
        let mut terms = Vec::with_capacity(pos.len() * neg.len());
        for &p in &pos {
            for &n in &neg {
                let diff = g.sub(n, p);
                let shifted = g.affine(diff, 1.0, 1.0);
                terms.push(g.relu(shifted));
            }
        }
        Ok(Some(g.sum(&terms)))
    }

    /// Hinge ranking loss `sum_{q+} sum_{q-} max(S(q-) - S(q+) + 1, 0)`.
    pub fn action_ranking_loss(&self, command: &str, positives: &[&ActionSchema], negatives: &[&ActionSchema]) -> Result<f64> {
        Ok(self.loss_and_gradients(command, positives, negatives)?.0)
    }

    /// Loss and its gradient with respect to every weight, without dropout.
    pub fn loss_and_gradients(
        &self,
        command: &str,
        positives: &[&ActionSchema],
        negatives: &[&ActionSchema],
    ) -> Result<(f64, Gradients)> {
        let mut g = Graph::new(&self.store);
        match self.loss_node(&mut g, command, positives, negatives, None)? {
            Some(loss) => Ok((g.scalar(loss), g.backward(loss))),
            None => {
                warn!("action ranking loss with no negatives for `{command}`");
                Ok((0.0, Gradients::new(&self.store)))
            }
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = Meta {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
        };
        write_file(&dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        self.store.save(&dir.join("weights.bin"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: Meta = serde_json::from_str(&read_to_string(&dir.join("meta.json"))?)?;
        let store = ParamStore::load(&dir.join("weights.bin"))?;
        let layers = Layers::lookup(&store, meta.vocab.len(), meta.config.dim)?;
        Ok(ActionScorer {
            config: meta.config,
            vocab: meta.vocab,
            store,
            layers,
        })
    }
}

struct ActionRecord<'a> {
    command: &'a str,
    actions: &'a [ActionSchema],
    gold: usize,
}

fn records<'a>(examples: &'a [Example], schema: &'a SiteSchema) -> Result<Vec<ActionRecord<'a>>> {
    examples
        .iter()
        .map(|e| {
            let actions = schema.actions_of(&e.page_id)?;
            let key = crate::text::normalize(&e.gold.action);
            let gold = actions.iter().position(|a| a.key() == key).ok_or_else(|| {
                Error::Training(format!("gold action `{}` is not on page `{}`", e.gold.action, e.page_id))
            })?;
            Ok(ActionRecord {
                command: &e.command,
                actions,
                gold,
            })
        })
        .collect()
}

/// Index of the highest score; ties go to the earlier entry.
pub(crate) fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        if best.is_none_or(|b| *s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Fraction of examples whose gold action scores highest on its page.
pub fn action_accuracy(scorer: &ActionScorer, examples: &[Example], schema: &SiteSchema) -> Result<f64> {
    let recs = records(examples, schema)?;
    if recs.is_empty() {
        return Err(Error::Empty("no examples to evaluate"));
    }
    let mut correct = 0;
    for r in &recs {
        if argmax(&scorer.score_actions(r.command, r.actions)?) == Some(r.gold) {
            correct += 1;
        }
    }
    Ok(correct as f64 / recs.len() as f64)
}

/// Minimizes the ranking loss with Adam, resampling negatives each epoch
/// and keeping the weights of the epoch with the best valid accuracy.
pub fn train_action_scorer(
    scorer: &mut ActionScorer,
    train: &[Example],
    valid: &[Example],
    schema: &SiteSchema,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    if train.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    if valid.is_empty() {
        return Err(Error::Training("empty validation set".into()));
    }
    let recs = records(train, schema)?;
    records(valid, schema)?;
    let skipped = recs.iter().filter(|r| r.actions.len() < 2).count();
    if skipped > 0 {
        warn!("{skipped} training examples are on single-action pages and contribute no negatives");
    }
    let usable: Vec<&ActionRecord> = recs.iter().filter(|r| r.actions.len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::Training("no training example has a negative action".into()));
    }

    let mut adam = Adam::new(&scorer.store, opts.learning_rate, opts.l2);
    let mut best: Option<(f64, ParamStore)> = None;
    let mut history = Vec::new();
    for epoch in 1..=opts.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64));
        let mut order: Vec<usize> = (0..usable.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(opts.batch_size.max(1)) {
            let grads = {
                let mut g = Graph::new(&scorer.store);
                let mut losses = Vec::new();
                for &i in batch {
                    let r = usable[i];
                    let others: Vec<&ActionSchema> =
                        r.actions.iter().enumerate().filter(|(k, _)| *k != r.gold).map(|(_, a)| a).collect();
                    let n = opts.n_negatives.min(others.len());
                    let negatives: Vec<&ActionSchema> =
                        index::sample(&mut rng, others.len(), n).into_iter().map(|k| others[k]).collect();
                    if let Some(l) = scorer.loss_node(&mut g, r.command, &[&r.actions[r.gold]], &negatives, Some(&mut rng))? {
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
            return Err(Error::Training("action scorer weights diverged".into()));
        }
        let acc = action_accuracy(scorer, valid, schema)?;
        let record = EpochRecord::new("action", epoch, total / usable.len() as f64, acc, skipped);
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::ParameterSpec;

    fn scorer(dim: usize) -> ActionScorer {
        let vocab = Vocab::from_tokens(["find", "a", "table", "for", "people", "time", "sign", "in", "go"]);
        ActionScorer::new(vocab, ActionScorerConfig { dim, dropout: 0.0 }, 3).unwrap()
    }

    fn book() -> ActionSchema {
        ActionSchema::new(
            "find a table",
            vec![ParameterSpec::closed("people", ["2 people"]), ParameterSpec::open("time")],
        )
    }

    #[test]
    fn command_encoding_is_deterministic_and_sized() {
        let s = scorer(4);
        let a = s.encode_command("find a table for me").unwrap();
        let b = s.encode_command("find a table for me").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.v_c.len(), 8);
        assert!(s.encode_command("   ").is_err());
    }

    #[test]
    fn out_of_vocabulary_token_uses_unk_embedding() {
        let s = scorer(4);
        // manual lookup of the <unk> row through the same encoder
        let mut g = Graph::new(&s.store);
        let x = g.embed(s.layers.embedding, s.vocab.unk_id());
        let v = s.layers.encoder.encode(&mut g, &[x]);
        let expected = g.value(v).data.clone();
        assert_eq!(s.encode_command("zebra").unwrap().v_c, expected);
        assert_eq!(s.encode_command("quokka").unwrap().v_c, expected);
    }

    #[test]
    fn single_word_command_joins_first_states() {
        let s = scorer(3);
        let mut g = Graph::new(&s.store);
        let x = g.embed(s.layers.embedding, s.vocab.id("go"));
        let f = s.layers.encoder.fwd.run(&mut g, [x]);
        let b = s.layers.encoder.bwd.run(&mut g, [x]);
        let mut expected = g.value(f[0]).data.clone();
        expected.extend_from_slice(&g.value(b[0]).data);
        assert_eq!(s.encode_command("go").unwrap().v_c, expected);
    }

    #[test]
    fn action_encoding_properties() {
        let s = scorer(4);
        let v = s.encode_action(&book()).unwrap();
        assert!(v.iter().all(|x| x.abs() < 1.0));
        let mut swapped = book();
        swapped.parameters.reverse();
        assert_eq!(v, s.encode_action(&swapped).unwrap());

        // empty parameter set feeds a zero mean vector
        let bare = ActionSchema::new("sign in", vec![]);
        let mut g = Graph::new(&s.store);
        let v_a = s.encode_text(&mut g, "sign in", None).unwrap();
        let zero = g.zeros(8);
        let joined = g.concat(&[v_a, zero]);
        let lin = s.layers.combine.forward(&mut g, joined);
        let out = g.tanh(lin);
        assert_eq!(s.encode_action(&bare).unwrap(), g.value(out).data);

        // a single parameter's vector is its own mean
        let one = ActionSchema::new("go", vec![ParameterSpec::open("time")]);
        let mut g = Graph::new(&s.store);
        let v_a = s.encode_text(&mut g, "go", None).unwrap();
        let v_p = s.encode_text(&mut g, "time", None).unwrap();
        let joined = g.concat(&[v_a, v_p]);
        let lin = s.layers.combine.forward(&mut g, joined);
        let out = g.tanh(lin);
        assert_eq!(s.encode_action(&one).unwrap(), g.value(out).data);
    }

    #[test]
    fn scores_lie_in_unit_interval() {
        let s = scorer(4);
        let score = s.score_action("find a table for two", &book()).unwrap();
        assert!((0.0..=1.0).contains(&score));
    }

    #[test]
    fn hinge_terms_follow_the_margin() {
        let mut store = ParamStore::default();
        let p = store.add("p", Tensor::vector(vec![1.0, 0.5, 0.5, 0.9]));
        let mut g = Graph::new(&store);
        let v = g.param(p);
        let s = |g: &mut Graph, k| g.slice(v, k, 1);
        let hinge = |g: &mut Graph, pos, neg| {
            let d = g.sub(neg, pos);
            let d = g.affine(d, 1.0, 1.0);
            g.relu(d)
        };
        let (one, half_a, half_b) = (s(&mut g, 0), s(&mut g, 1), s(&mut g, 2));
        let zero = g.zeros(1);
        let t0 = hinge(&mut g, one, zero);
        let t1 = hinge(&mut g, half_a, half_b);
        assert_eq!(g.scalar(t0), 0.0);
        assert_eq!(g.scalar(t1), 1.0);
    }

    #[test]
    fn loss_sums_all_positive_negative_pairs() {
        let s = scorer(4);
        let pos = [book(), ActionSchema::new("go", vec![])];
        let neg = [
            ActionSchema::new("sign in", vec![]),
            ActionSchema::new("table", vec![ParameterSpec::open("time")]),
        ];
        let cmd = "find a table for two people";
        let sp: Vec<f64> = pos.iter().map(|a| s.score_action(cmd, a).unwrap()).collect();
        let sn: Vec<f64> = neg.iter().map(|a| s.score_action(cmd, a).unwrap()).collect();
        let expected = (sn[0] - sp[0] + 1.0).max(0.0)
            + (sn[1] - sp[0] + 1.0).max(0.0)
            + (sn[0] - sp[1] + 1.0).max(0.0)
            + (sn[1] - sp[1] + 1.0).max(0.0);
        let loss = s.action_ranking_loss(cmd, &[&pos[0], &pos[1]], &[&neg[0], &neg[1]]).unwrap();
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
        assert_eq!(s.action_ranking_loss(cmd, &[&pos[0]], &[]).unwrap(), 0.0);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let s = scorer(4);
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path()).unwrap();
        let back = ActionScorer::load(dir.path()).unwrap();
        assert_eq!(back.store, s.store);
        let cmd = "find a table";
        assert_eq!(
            back.score_action(cmd, &book()).unwrap().to_bits(),
            s.score_action(cmd, &book()).unwrap().to_bits()
        );
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax(&[0.2, 0.7, 0.7]), Some(1));
        assert_eq!(argmax(&[]), None);
    }
}
