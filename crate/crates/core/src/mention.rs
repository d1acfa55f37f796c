//! Parameter mention extraction as span prediction: the parameter name is
//! the question, the command is the passage, and the `[CLS]` position
//! stands for "not mentioned".

use std::path::Path;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Example, MentionSpan};
use crate::error::{read_to_string, write_file, Error, Result};
use crate::nn::{dropout_mask, Adam, BiLstm, Gradients, Graph, NodeId, ParamId, ParamStore};
use crate::nn::graph_softmax as softmax;
use crate::schema::SiteSchema;
use crate::text::{char_slice, Vocab};
use crate::training::{EpochRecord, TrainOptions};

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

/// A subword with its character span in the original text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Piece {
    pub id: usize,
    pub start: usize,
    pub end: usize,
}

/// Greedy longest-match-first subword tokenizer. Continuation pieces carry
/// a `##` prefix; words with an unknown character become one `<unk>` piece.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubwordTokenizer {
    vocab: Vocab,
}

/// Lowercased words and punctuation marks with their character offsets.
fn pretokenize(text: &str) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut start = 0;
    let mut pos = 0;
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            if cur.is_empty() {
                start = pos;
            }
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push((std::mem::take(&mut cur), start, pos));
            }
            if !ch.is_whitespace() {
                out.push((ch.to_lowercase().collect(), pos, pos + 1));
            }
        }
        pos += 1;
    }
    if !cur.is_empty() {
        out.push((cur, start, pos));
    }
    out
}

impl SubwordTokenizer {
    /// Whole words of `texts` plus every character as an initial and a
    /// continuation piece.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut pieces = vec![CLS.to_owned(), SEP.to_owned()];
        for text in texts {
            for (word, _, _) in pretokenize(text) {
                for c in word.chars() {
                    pieces.push(c.to_string());
                    pieces.push(format!("##{c}"));
                }
                pieces.push(word);
            }
        }
        SubwordTokenizer {
            vocab: Vocab::from_tokens(pieces),
        }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn id(&self, piece: &str) -> usize {
        self.vocab.id(piece)
    }

    pub fn tokenize(&self, text: &str) -> Vec<Piece> {
        let mut out = Vec::new();
        for (word, start, end) in pretokenize(text) {
            let chars: Vec<char> = word.chars().collect();
            // lowercasing can change the length; fall back to one piece then
            if chars.len() != end - start {
                out.push(Piece {
                    id: self.vocab.get(&word).unwrap_or(self.vocab.unk_id()),
                    start,
                    end,
                });
                continue;
            }
            let mut pieces = Vec::new();
            let mut i = 0;
            while i < chars.len() {
                let mut found = None;
                for j in (i + 1..=chars.len()).rev() {
                    let sub: String = chars[i..j].iter().collect();
                    let key = if i == 0 { sub } else { format!("##{sub}") };
                    if let Some(id) = self.vocab.get(&key) {
                        found = Some((id, j));
                        break;
                    }
                }
                match found {
                    Some((id, j)) => {
                        pieces.push(Piece {
                            id,
                            start: start + i,
                            end: start + j,
                        });
                        i = j;
                    }
                    None => {
                        pieces = vec![Piece {
                            id: self.vocab.unk_id(),
                            start,
                            end,
                        }];
                        break;
                    }
                }
            }
            out.extend(pieces);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MentionConfig {
    /// Identifier of the contextual encoder the span heads sit on.
    pub encoder: String,
    pub embedding_dim: usize,
    /// Per-direction hidden size; the contextual width is twice this.
    pub hidden: usize,
    pub layers: usize,
    pub max_seq_len: usize,
    pub span_max_len: usize,
    pub dropout: f64,
}

impl Default for MentionConfig {
    fn default() -> Self {
        MentionConfig {
            encoder: "bilstm-scratch".into(),
            embedding_dim: 32,
            hidden: 32,
            layers: 2,
            max_seq_len: 64,
            span_max_len: 20,
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
struct Layers {
    token_embedding: ParamId,
    segment_embedding: ParamId,
    encoder: Vec<BiLstm>,
    start: ParamId,
    end: ParamId,
}

/// Start/end distributions over the candidate positions: `[CLS]` first,
/// then each command piece.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanDistributions {
    pub pieces: Vec<Piece>,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MentionPrediction {
    pub span: Option<MentionSpan>,
    pub start_prob: f64,
    pub end_prob: f64,
}

#[derive(Debug, Clone)]
pub struct SpanExtractor {
    config: MentionConfig,
    tokenizer: SubwordTokenizer,
    store: ParamStore,
    layers: Layers,
}

/// A packed `[CLS] p [SEP] c` input.
struct Packed {
    ids: Vec<usize>,
    segments: Vec<usize>,
    /// Command pieces kept after truncation.
    pieces: Vec<Piece>,
    /// Offset of the first command piece in `ids`.
    offset: usize,
}

impl SpanExtractor {
    pub fn new(tokenizer: SubwordTokenizer, config: MentionConfig, seed: u64) -> Result<Self> {
        if config.layers == 0 || config.hidden == 0 || config.embedding_dim == 0 {
            return Err(Error::Model("mention encoder dimensions must be positive".into()));
        }
        if config.max_seq_len < 4 {
            return Err(Error::Model("max_seq_len must be at least 4".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let (e, h) = (config.embedding_dim, config.hidden);
        let token_embedding = store.add_uniform("token_embedding", tokenizer.vocab.len(), e, 0.1, &mut rng);
        let segment_embedding = store.add_uniform("segment_embedding", 2, e, 0.1, &mut rng);
        let encoder = (0..config.layers)
            .map(|l| BiLstm::register(&mut store, &format!("encoder/{l}"), if l == 0 { e } else { 2 * h }, h, &mut rng))
            .collect();
        let bound = 1.0 / ((2 * h) as f64).sqrt();
        let start = store.add_uniform("span/start", 2 * h, 1, bound, &mut rng);
        let end = store.add_uniform("span/end", 2 * h, 1, bound, &mut rng);
        Ok(SpanExtractor {
            config,
            tokenizer,
            store,
            layers: Layers {
                token_embedding,
                segment_embedding,
                encoder,
                start,
                end,
            },
        })
    }

    pub fn config(&self) -> &MentionConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn tokenizer(&self) -> &SubwordTokenizer {
        &self.tokenizer
    }

    fn pack(&self, parameter: &str, command: &str) -> Result<Packed> {
        if command.trim().is_empty() {
            return Err(Error::Model("command is empty".into()));
        }
        let param_pieces = self.tokenizer.tokenize(parameter);
        let mut pieces = self.tokenizer.tokenize(command);
        if pieces.is_empty() {
            return Err(Error::Model("command has no tokens".into()));
        }
        let mut ids = vec![self.tokenizer.id(CLS)];
        ids.extend(param_pieces.iter().map(|p| p.id));
        // keep at least one command piece
        ids.truncate(self.config.max_seq_len - 2);
        ids.push(self.tokenizer.id(SEP));
        let offset = ids.len();
        let room = self.config.max_seq_len - offset;
        if pieces.len() > room {
            warn!("truncating command `{command}` to {room} subwords");
            pieces.truncate(room);
        }
        ids.extend(pieces.iter().map(|p| p.id));
        let segments = (0..ids.len()).map(|i| usize::from(i >= offset)).collect();
        Ok(Packed {
            ids,
            segments,
            pieces,
            offset,
        })
    }

    /// Start and end logits over `[CLS]` followed by the command pieces.
    fn logits(&self, g: &mut Graph, packed: &Packed, mut rng: Option<&mut ChaCha8Rng>) -> (NodeId, NodeId) {
        let mut states: Vec<NodeId> = packed
            .ids
            .iter()
            .zip(&packed.segments)
            .map(|(&id, &seg)| {
                let t = g.embed(self.layers.token_embedding, id);
                let s = g.embed(self.layers.segment_embedding, seg);
                g.add(t, s)
            })
            .collect();
        for layer in &self.layers.encoder {
            states = layer.states(g, &states);
            if let Some(rng) = rng.as_deref_mut() {
                if self.config.dropout > 0.0 {
                    states = states
                        .into_iter()
                        .map(|s| {
                            let mask = dropout_mask(2 * self.config.hidden, self.config.dropout, rng);
                            g.mask(s, mask)
                        })
                        .collect();
                }
            }
        }
        let candidates: Vec<NodeId> = std::iter::once(states[0])
            .chain(states[packed.offset..].iter().copied())
            .collect();
        let (s, e) = (g.param(self.layers.start), g.param(self.layers.end));
        let start: Vec<NodeId> = candidates.iter().map(|&t| g.dot(s, t)).collect();
        let end: Vec<NodeId> = candidates.iter().map(|&t| g.dot(e, t)).collect();
        (g.concat(&start), g.concat(&end))
    }

    pub fn distributions(&self, parameter: &str, command: &str) -> Result<SpanDistributions> {
        let packed = self.pack(parameter, command)?;
        let mut g = Graph::new(&self.store);
        let (s, e) = self.logits(&mut g, &packed, None);
        Ok(SpanDistributions {
            start: softmax(&g.value(s).data),
            end: softmax(&g.value(e).data),
            pieces: packed.pieces,
        })
    }

    /// Most probable span, or `None` when `[CLS]` wins the start position.
    pub fn extract_mention(&self, parameter: &str, command: &str) -> Result<MentionPrediction> {
        let d = self.distributions(parameter, command)?;
        let start = crate::action_scorer::argmax(&d.start).expect("non-empty candidates");
        if start == 0 {
            return Ok(MentionPrediction {
                span: None,
                start_prob: d.start[0],
                end_prob: d.end[0],
            });
        }
        let last = (start + self.config.span_max_len).min(d.pieces.len());
        let mut end = start;
        for j in start..=last {
            if d.end[j] > d.end[end] {
                end = j;
            }
        }
        let (cs, ce) = (d.pieces[start - 1].start, d.pieces[end - 1].end);
        let text = char_slice(command, cs, ce).expect("piece offsets lie in the command").to_owned();
        Ok(MentionPrediction {
            span: Some(MentionSpan {
                parameter: parameter.to_owned(),
                start: cs,
                end: ce,
                text,
            }),
            start_prob: d.start[start],
            end_prob: d.end[end],
        })
    }

    /// Candidate indices of a gold character span, snapped outward to
    /// piece boundaries. `Ok(None)` if the span was truncated away.
    fn gold_positions(&self, packed: &Packed, span: Option<(usize, usize)>) -> Option<(usize, usize, bool)> {
        let Some((cs, ce)) = span else {
            return Some((0, 0, true));
        };
        let first = packed.pieces.iter().position(|p| p.end > cs)?;
        let last = packed.pieces.iter().rposition(|p| p.start < ce)?;
        if last < first {
            return None;
        }
        let exact = packed.pieces[first].start == cs && packed.pieces[last].end == ce;
        Some((first + 1, last + 1, exact))
    }

    fn loss_node(&self, g: &mut Graph, record: &MentionRecord, rng: Option<&mut ChaCha8Rng>) -> Result<Option<NodeId>> {
        let packed = self.pack(&record.parameter, &record.command)?;
        let Some((s, e, _)) = self.gold_positions(&packed, record.span) else {
            return Ok(None);
        };
        let (sl, el) = self.logits(g, &packed, rng);
        let ls = g.nll(sl, s);
        let le = g.nll(el, e);
        Ok(Some(g.add(ls, le)))
    }

    /// Negative log-likelihood of the gold start and end positions.
    pub fn loss_and_gradients(&self, record: &MentionRecord) -> Result<(f64, Gradients)> {
        let mut g = Graph::new(&self.store);
        match self.loss_node(&mut g, record, None)? {
            Some(l) => Ok((g.scalar(l), g.backward(l))),
            None => Ok((0.0, Gradients::new(&self.store))),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join("config.json"), serde_json::to_string_pretty(&self.config)?)?;
        write_file(&dir.join("tokenizer.json"), serde_json::to_string(&self.tokenizer)?)?;
        self.store.save(&dir.join("weights.bin"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config: MentionConfig = serde_json::from_str(&read_to_string(&dir.join("config.json"))?)?;
        let tokenizer: SubwordTokenizer = serde_json::from_str(&read_to_string(&dir.join("tokenizer.json"))?)?;
        let store = ParamStore::load(&dir.join("weights.bin"))?;
        let (e, h) = (config.embedding_dim, config.hidden);
        let encoder = (0..config.layers)
            .map(|l| BiLstm::lookup(&store, &format!("encoder/{l}"), if l == 0 { e } else { 2 * h }, h))
            .collect::<Result<Vec<_>>>()?;
        let layers = Layers {
            token_embedding: store.expect("token_embedding", tokenizer.vocab.len(), e)?,
            segment_embedding: store.expect("segment_embedding", 2, e)?,
            encoder,
            start: store.expect("span/start", 2 * h, 1)?,
            end: store.expect("span/end", 2 * h, 1)?,
        };
        Ok(SpanExtractor {
            config,
            tokenizer,
            store,
            layers,
        })
    }
}

/// One (parameter, command) training pair; `span` is `None` for "not
/// mentioned".
#[derive(Debug, Clone, PartialEq)]
pub struct MentionRecord {
    pub parameter: String,
    pub command: String,
    pub span: Option<(usize, usize)>,
}

/// A record per parameter of each gold action: its mention span if it has
/// one, otherwise a no-mention record.
pub fn mention_records(examples: &[Example], schema: &SiteSchema) -> Result<Vec<MentionRecord>> {
    let mut out = Vec::new();
    for e in examples {
        let action = schema.action(&e.page_id, &e.gold.action)?;
        for p in &action.parameters {
            out.push(MentionRecord {
                parameter: p.name.clone(),
                command: e.command.clone(),
                span: e.mention_of(&p.name).map(|m| (m.start, m.end)),
            });
        }
    }
    Ok(out)
}

/// Fraction of records whose predicted span (or absence) matches exactly.
pub fn span_accuracy(extractor: &SpanExtractor, records: &[MentionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("no mention records to evaluate"));
    }
    let mut correct = 0;
    for r in records {
        let pred = extractor.extract_mention(&r.parameter, &r.command)?;
        if pred.span.map(|s| (s.start, s.end)) == r.span {
            correct += 1;
        }
    }
    Ok(correct as f64 / records.len() as f64)
}

pub fn train_mention_extractor(
    extractor: &mut SpanExtractor,
    train: &[MentionRecord],
    valid: &[MentionRecord],
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    if train.is_empty() {
        return Err(Error::Training("empty mention training set".into()));
    }
    if valid.is_empty() {
        return Err(Error::Training("empty mention validation set".into()));
    }
    let mut snapped = 0;
    let mut dropped = 0;
    for r in train {
        match extractor.gold_positions(&extractor.pack(&r.parameter, &r.command)?, r.span) {
            Some((_, _, false)) => snapped += 1,
            None => dropped += 1,
            _ => {}
        }
    }
    if snapped > 0 {
        warn!("{snapped} gold spans snapped outward to subword boundaries");
    }
    if dropped > 0 {
        warn!("{dropped} gold spans lost to truncation; those records are skipped");
    }

    let mut adam = Adam::new(&extractor.store, opts.learning_rate, opts.l2);
    let mut best: Option<(f64, ParamStore)> = None;
    let mut history = Vec::new();
    for epoch in 1..=opts.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_mul(3_000_017).wrapping_add(epoch as u64));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(opts.batch_size.max(1)) {
            let grads = {
                let mut g = Graph::new(&extractor.store);
                let mut losses = Vec::new();
                for &i in batch {
                    if let Some(l) = extractor.loss_node(&mut g, &train[i], Some(&mut rng))? {
                        losses.push(l);
                    }
                }
                if losses.is_empty() {
                    continue;
                }
                let sum = g.sum(&losses);
                total += g.scalar(sum);
                let mut grads = g.backward(sum);
                grads.scale(1.0 / batch.len() as f64);
                grads
            };
            adam.step(&mut extractor.store, &grads);
        }
        if !extractor.store.all_finite() {
            return Err(Error::Training("mention extractor weights diverged".into()));
        }
        let acc = span_accuracy(extractor, valid)?;
        debug!("mention epoch {epoch}: span accuracy {acc:.4}");
        let record = EpochRecord::new("mention", epoch, total / train.len() as f64, acc, dropped);
        on_epoch(&record);
        history.push(record);
        if best.as_ref().is_none_or(|(b, _)| acc > *b) {
            best = Some((acc, extractor.store.clone()));
        }
    }
    if let Some((_, store)) = best {
        extractor.store = store;
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn extractor(max_seq_len: usize) -> SpanExtractor {
        let tok = SubwordTokenizer::build(["find a table for me and my friend at 7", "people time"]);
        let config = MentionConfig {
            embedding_dim: 6,
            hidden: 4,
            max_seq_len,
            ..MentionConfig::default()
        };
        SpanExtractor::new(tok, config, 1).unwrap()
    }

    #[test]
    fn tokenizer_tracks_character_offsets() {
        let tok = SubwordTokenizer::build(["italian food"]);
        let text = "Italiano  FOOD!";
        let pieces = tok.tokenize(text);
        let surface: Vec<&str> = pieces.iter().map(|p| char_slice(text, p.start, p.end).unwrap()).collect();
        assert_eq!(surface, ["Italian", "o", "FOOD", "!"]);
        assert_eq!(tok.vocab().token(pieces[1].id), "##o");
        assert_eq!(pieces[3].id, tok.vocab().unk_id());
        // a word with an unseen character collapses to one unknown piece
        let pieces = tok.tokenize("italiane");
        assert_eq!(pieces.len(), 1);
        assert_eq!(pieces[0].id, tok.vocab().unk_id());
    }

    #[test]
    fn distributions_are_normalized_over_candidates() {
        let x = extractor(64);
        let d = x.distributions("people", "find a table for me and my friend at 7").unwrap();
        assert_eq!(d.start.len(), d.pieces.len() + 1);
        assert!((d.start.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((d.end.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn predicted_spans_are_substrings() {
        let x = extractor(64);
        for p in ["people", "time", "zzz"] {
            let cmd = "Find a table for me and my friend at 7";
            let pred = x.extract_mention(p, cmd).unwrap();
            if let Some(s) = pred.span {
                assert!(s.start < s.end);
                assert_eq!(char_slice(cmd, s.start, s.end), Some(s.text.as_str()));
            }
            assert!((0.0..=1.0).contains(&pred.start_prob));
        }
        assert!(x.extract_mention("people", "  ").is_err());
    }

    #[test]
    fn long_commands_are_truncated() {
        let x = extractor(8);
        let d = x.distributions("people", "find a table for me and my friend at 7").unwrap();
        assert_eq!(d.pieces.len(), 8 - 3);
    }

    #[test]
    fn no_mention_gold_targets_cls() {
        let x = extractor(64);
        let packed = x.pack("people", "find a table").unwrap();
        assert_eq!(x.gold_positions(&packed, None), Some((0, 0, true)));
        // "able" snaps outward to the whole "table" piece
        let packed = x.pack("people", "find a table").unwrap();
        assert_eq!(x.gold_positions(&packed, Some((8, 12))), Some((3, 3, false)));
        assert_eq!(x.gold_positions(&packed, Some((7, 12))), Some((3, 3, true)));
    }

    #[test]
    fn training_learns_a_fixed_template() {
        let mut x = extractor(64);
        let records: Vec<MentionRecord> = ["me", "my friend", "7", "friend"]
            .iter()
            .flat_map(|m| {
                let cmd = format!("table for {m} please");
                vec![
                    MentionRecord {
                        parameter: "people".into(),
                        command: cmd.clone(),
                        span: Some((10, 10 + m.chars().count())),
                    },
                    MentionRecord {
                        parameter: "time".into(),
                        command: cmd,
                        span: None,
                    },
                ]
            })
            .collect();
        let opts = TrainOptions {
            epochs: 60,
            batch_size: 4,
            learning_rate: 0.02,
            l2: 0.0,
            n_negatives: 1,
            seed: 3,
        };
        let hist = train_mention_extractor(&mut x, &records, &records, &opts, |_| {}).unwrap();
        assert_eq!(hist.len(), 60);
        assert_eq!(span_accuracy(&x, &records).unwrap(), 1.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let x = extractor(64);
        let dir = tempfile::tempdir().unwrap();
        x.save(dir.path()).unwrap();
        let back = SpanExtractor::load(dir.path()).unwrap();
        let cmd = "find a table for me";
        assert_eq!(back.distributions("people", cmd).unwrap(), x.distributions("people", cmd).unwrap());
        let cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
        assert_eq!(cfg["max_seq_len"], 64);
        assert_eq!(cfg["span_max_len"], 20);
    }
}
