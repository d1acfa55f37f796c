//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs the full desk-scale training twice, so expect several minutes on
//! one CPU core.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use navparse::action_scorer::{ActionScorer, ActionScorerConfig};
use navparse::dataset::{generate, load_paraphrases, load_templates, split, Example, ValueAssignment};
use navparse::evaluation::{evaluate, per_example_pr, report};
use navparse::inference::{analyze, decide, parse, ConfidenceMean, InferenceConfig, Scorers};
use navparse::mention::{MentionConfig, SpanExtractor, SubwordTokenizer};
use navparse::nn::{Gradients, ParamStore};
use navparse::schema::load_site_schema;
use navparse::text::Vocab;
use navparse::training::{predict, train_all, tune_inference, EpochRecord};
use navparse::value_scorer::{
    build_char_vocab, fuzzy, lexical_similarity, value_match, LexicalMode, ValueScorer, ValueScorerConfig,
};
use navparse::{ActionSchema, ModelBundle, NavigationInstruction, ParameterSpec, SiteSchema, TrainingConfig};
use num_rational::Rational64 as Q;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn ins(action: &str, kv: &[(&str, &str)]) -> NavigationInstruction {
    NavigationInstruction::new(action, kv.iter().map(|(k, v)| ValueAssignment::new(*k, *v)).collect())
}

fn q(n: i64, d: i64) -> Q {
    Q::new(n, d)
}

fn to_f64(r: Q) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

// 1 -----------------------------------------------------------------------

fn metrics_oracle() -> Outcome {
    let start = Instant::now();
    let g2 = || ins("a", &[("p1", "x"), ("p2", "y")]);
    // (gold, prediction, precision, recall, action ok, exact), worked out by hand
    let fixture: Vec<(NavigationInstruction, Option<NavigationInstruction>, Q, Q, bool, bool)> = vec![
        (g2(), Some(g2()), q(1, 1), q(1, 1), true, true),
        (g2(), Some(ins("a", &[("p1", "x")])), q(1, 1), q(1, 2), true, false),
        (g2(), Some(ins("a", &[("p1", "x"), ("p2", "z")])), q(1, 2), q(1, 2), true, false),
        (ins("a", &[("p1", "x")]), Some(ins("b", &[("p1", "x")])), q(0, 1), q(0, 1), false, false),
        (ins("a", &[("p1", "x")]), None, q(0, 1), q(0, 1), false, false),
        (ins("b", &[]), Some(ins("b", &[])), q(1, 1), q(1, 1), true, true),
        (
            ins("a", &[("p1", "x"), ("p2", "y"), ("p3", "w")]),
            Some(ins("a", &[("p3", "w"), ("p1", "x")])),
            q(1, 1),
            q(2, 3),
            true,
            false,
        ),
        (ins("a", &[("p1", "x")]), Some(ins("a", &[])), q(1, 1), q(0, 1), true, false),
        (ins("b", &[]), Some(ins("b", &[("p1", "q")])), q(0, 1), q(1, 1), true, false),
        (g2(), Some(ins("a", &[("p2", "y"), ("p1", "x")])), q(1, 1), q(1, 1), true, true),
    ];
    let n = Q::from_integer(fixture.len() as i64);
    let mut per_example_ok = true;
    let (mut sp, mut sr, mut acc, mut ema, mut pa) = (Q::from(0), Q::from(0), 0i64, 0i64, 0i64);
    for (gold, pred, p, r, ok, exact) in &fixture {
        per_example_ok &= per_example_pr(gold, pred.as_ref()) == (to_f64(*p), to_f64(*r));
        sp += p;
        sr += r;
        acc += i64::from(*ok);
        ema += i64::from(*exact);
        pa += i64::from(*ok && *p == Q::from(1));
    }
    let (mp, mr) = (sp / n, sr / n);
    let f1 = Q::from(2) * mp * mr / (mp + mr);
    let pairs: Vec<_> = fixture.iter().map(|f| (f.0.clone(), f.1.clone())).collect();
    let rep = report(&pairs).expect("non-empty fixture");
    let close = |a: f64, b: Q| (a - to_f64(b)).abs() < 1e-12;
    let metrics_ok = close(rep.a_acc, q(acc, 10))
        && close(rep.ema, q(ema, 10))
        && close(rep.pa100, q(pa, 10))
        && close(rep.mean_precision, mp)
        && close(rep.mean_recall, mr)
        && close(rep.p_f1, f1);
    let elapsed = start.elapsed();
    outcome(
        per_example_ok && metrics_ok && elapsed < Duration::from_secs(1),
        format!(
            "A-acc {} EMA {} PA-100 {} P-F1 {:.6} (oracle {f1}) in {elapsed:.1?}",
            rep.a_acc, rep.ema, rep.pa100, rep.p_f1
        ),
    )
}

// 2, 8 ----------------------------------------------------------------------

/// Scores looked up in fixed tables.
struct TableScorers {
    actions: BTreeMap<String, f64>,
    mentions: BTreeMap<String, Option<String>>,
    values: BTreeMap<(String, String), f64>,
}

impl Scorers for TableScorers {
    fn action_scores(&self, _: &str, actions: &[ActionSchema]) -> navparse::Result<Vec<f64>> {
        Ok(actions.iter().map(|a| self.actions[&a.name]).collect())
    }
    fn mention(&self, p: &ParameterSpec, _: &str) -> navparse::Result<Option<String>> {
        Ok(self.mentions[&p.name].clone())
    }
    fn value_scores(&self, m: &str, values: &[String]) -> navparse::Result<Vec<f64>> {
        Ok(values.iter().map(|v| self.values[&(m.to_owned(), v.clone())]).collect())
    }
}

fn draw_score(rng: &mut ChaCha8Rng) -> f64 {
    const GRID: [f64; 6] = [0.0, 0.25, 0.5, 0.67, 0.75, 1.0];
    if rng.gen_bool(0.5) {
        GRID[rng.gen_range(0..GRID.len())]
    } else {
        rng.gen()
    }
}

fn random_case(rng: &mut ChaCha8Rng) -> (SiteSchema, TableScorers) {
    let names = ["p0", "p1", "p2", "p3", "p4"];
    let mut actions = Vec::new();
    let mut scorers = TableScorers {
        actions: BTreeMap::new(),
        mentions: BTreeMap::new(),
        values: BTreeMap::new(),
    };
    for a in 0..rng.gen_range(1..=5) {
        let k = rng.gen_range(0..=3);
        let chosen: Vec<&str> = names.choose_multiple(rng, k).copied().collect();
        let mut params = Vec::new();
        for p in chosen {
            if rng.gen_bool(0.3) {
                params.push(serde_json::json!({"name": p, "kind": "open"}));
            } else {
                let domain: Vec<String> = (0..rng.gen_range(1..=10)).map(|i| format!("v{i}")).collect();
                params.push(serde_json::json!({"name": p, "kind": "closed", "domain": domain}));
            }
        }
        actions.push(serde_json::json!({"name": format!("a{a}"), "parameters": params}));
        scorers.actions.insert(format!("a{a}"), draw_score(rng));
    }
    for p in names {
        let m = rng.gen_bool(0.8).then(|| format!("mention of {p}"));
        if let Some(m) = &m {
            for i in 0..10 {
                scorers.values.insert((m.clone(), format!("v{i}")), draw_score(rng));
            }
        }
        scorers.mentions.insert(p.to_owned(), m);
    }
    let json = serde_json::json!({"site_id": "rand", "domain_tag": "other", "pages": {"page": actions}});
    (SiteSchema::from_json_str(&json.to_string()).expect("valid random schema"), scorers)
}

type Best = (String, Vec<(String, String)>, f64);

/// Independent enumeration of every candidate and its score.
fn brute_force(schema: &SiteSchema, t: &TableScorers, cfg: &InferenceConfig) -> Option<Best> {
    let mut cands = Vec::new();
    for (idx, action) in schema.actions_of("page").unwrap().iter().enumerate() {
        let sa = t.actions[&action.name];
        let mut confs = Vec::new();
        let mut rejected = 0usize;
        let mut assigned = Vec::new();
        for p in &action.parameters {
            let Some(m) = &t.mentions[&p.name] else { continue };
            if !p.is_closed() {
                confs.push(1.0);
                assigned.push((p.name.clone(), m.clone()));
                continue;
            }
            let mut best = (0usize, f64::NEG_INFINITY);
            for (i, v) in p.domain.iter().enumerate() {
                let s = t.values[&(m.clone(), v.clone())];
                if s > best.1 {
                    best = (i, s);
                }
            }
            if best.1 >= cfg.rho {
                confs.push(best.1);
                assigned.push((p.name.clone(), p.domain[best.0].clone()));
            } else {
                rejected += 1;
            }
        }
        let total = if action.parameters.is_empty() {
            sa
        } else if confs.is_empty() {
            continue;
        } else {
            let extra = if cfg.confidence_mean == ConfidenceMean::CountRejectedAsZero { rejected } else { 0 };
            cfg.alpha * sa + (1.0 - cfg.alpha) * confs.iter().sum::<f64>() / (confs.len() + extra) as f64
        };
        cands.push((total, sa, idx, action.name.clone(), assigned));
    }
    cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(y.1.total_cmp(&x.1)).then(x.2.cmp(&y.2)));
    cands.into_iter().next().map(|c| (c.3, c.4, c.0))
}

fn inference_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let trials = 2000;
    let (mut mismatches, mut predicted) = (0, 0);
    for _ in 0..trials {
        let (schema, scorers) = random_case(&mut rng);
        let rho = [0.0, 0.5, 0.67, 1.0, rng.gen()][rng.gen_range(0..5)];
        let alpha = [0.0, 0.4, 0.5, 1.0, rng.gen()][rng.gen_range(0..5)];
        let confidence_mean = if rng.gen_bool(0.5) {
            ConfidenceMean::AssignedOnly
        } else {
            ConfidenceMean::CountRejectedAsZero
        };
        let cfg = InferenceConfig {
            rho,
            alpha,
            confidence_mean,
        };
        let got = parse(&scorers, &schema, "page", "a command", &cfg).expect("parse");
        let want = brute_force(&schema, &scorers, &cfg);
        let same = match (&got, &want) {
            (None, None) => true,
            (Some(g), Some((action, assigned, total))) => {
                let ga: Vec<(String, String)> =
                    g.instruction.assignments.iter().map(|a| (a.parameter.clone(), a.value.clone())).collect();
                g.instruction.action == *action && ga == *assigned && (g.total - total).abs() < 1e-12
            }
            _ => false,
        };
        predicted += usize::from(got.is_some());
        mismatches += usize::from(!same);
    }
    let elapsed = start.elapsed();
    outcome(
        mismatches == 0 && elapsed < Duration::from_secs(30),
        format!("{trials} trials ({predicted} with a prediction), {mismatches} mismatches in {elapsed:.1?}"),
    )
}

fn threshold_sweep() -> Outcome {
    let schema = SiteSchema::from_json_str(
        r#"{"site_id":"fx","domain_tag":"restaurants","pages":{"home":[
            {"name":"let's go","parameters":[
                {"name":"time","kind":"closed","domain":["7:00 PM","8:00 PM"]},
                {"name":"people","kind":"closed","domain":["1 person","2 people"]},
                {"name":"date","kind":"closed","domain":["today","tomorrow"]},
                {"name":"location, restaurant, or cuisine","kind":"open"}]},
            {"name":"sign in","parameters":[]}]}}"#,
    )
    .unwrap();
    let open = "location, restaurant, or cuisine";
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let fixtures: Vec<TableScorers> = (0..50)
        .map(|_| {
            let mut t = TableScorers {
                actions: BTreeMap::from([("let's go".into(), 0.9), ("sign in".into(), 0.2)]),
                mentions: BTreeMap::new(),
                values: BTreeMap::new(),
            };
            for p in ["time", "people", "date", open] {
                let m = rng.gen_bool(0.8).then(|| format!("{p} mention"));
                if let Some(m) = &m {
                    for v in ["7:00 PM", "8:00 PM", "1 person", "2 people", "today", "tomorrow"] {
                        // closed scores stay strictly below 1
                        t.values.insert((m.clone(), v.into()), rng.gen_range(0.0..0.999));
                    }
                }
                t.mentions.insert(p.into(), m);
            }
            t
        })
        .collect();
    let mut sets = Vec::new();
    let mut only_open = true;
    for rho in [0.0, 0.67, 1.0] {
        let cfg = InferenceConfig { rho, ..Default::default() };
        let mut set = BTreeSet::new();
        for (i, t) in fixtures.iter().enumerate() {
            let d = decide(&analyze(t, &schema, "home", "cmd").unwrap(), &cfg).unwrap();
            for c in &d.trace {
                for p in &c.parameters {
                    if let Some((v, _)) = p.outcome.assignment() {
                        set.insert((i, c.action.clone(), p.parameter.clone(), v.to_owned()));
                        only_open &= rho < 1.0 || p.parameter == open;
                    }
                }
            }
        }
        sets.push(set);
    }
    let shrinking = sets[1].is_subset(&sets[0]) && sets[2].is_subset(&sets[1]);
    outcome(
        shrinking && only_open,
        format!(
            "assignments at rho 0 / 0.67 / 1: {} / {} / {}; rho=1 assigns open parameters only: {only_open}",
            sets[0].len(),
            sets[1].len(),
            sets[2].len()
        ),
    )
}

// 3 -----------------------------------------------------------------------

const WORDS: [&str; 18] = [
    "find", "a", "table", "for", "two", "people", "at", "7", "pm", "sort", "by", "price", "sign", "in", "italian",
    "tonight", "cheap", "newest",
];

fn random_text(rng: &mut ChaCha8Rng, max_words: usize) -> String {
    let n = rng.gen_range(1..=max_words);
    (0..n)
        .map(|_| {
            if rng.gen_bool(0.1) {
                // out-of-vocabulary word
                (0..rng.gen_range(1..6)).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
            } else {
                WORDS[rng.gen_range(0..WORDS.len())].to_owned()
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn small_vocab() -> Vocab {
    Vocab::from_tokens(WORDS)
}

fn random_action(rng: &mut ChaCha8Rng) -> ActionSchema {
    let params = (0..rng.gen_range(0..3)).map(|_| ParameterSpec::open(random_text(rng, 2))).collect();
    ActionSchema::new(random_text(rng, 3), params)
}

fn value_config(dim: usize, char_dim: usize) -> ValueScorerConfig {
    ValueScorerConfig {
        dim,
        char_dim,
        dropout: 0.0,
        lexical_mode: LexicalMode::Collapsed,
    }
}

fn score_ranges() -> Outcome {
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let action = ActionScorer::new(small_vocab(), ActionScorerConfig { dim: 8, dropout: 0.0 }, 1).unwrap();
    let value = ValueScorer::new(small_vocab(), build_char_vocab(WORDS), None, value_config(8, 4), 2).unwrap();
    let mention_config = MentionConfig {
        embedding_dim: 8,
        hidden: 8,
        ..MentionConfig::default()
    };
    let mention = SpanExtractor::new(SubwordTokenizer::build(WORDS), mention_config, 4).unwrap();
    let unit = |x: &f64| (0.0..=1.0).contains(x);
    let mut bad = 0;
    let mut worst_norm: f64 = 0.0;
    for _ in 0..n {
        let cmd = random_text(&mut rng, 10);
        let a = random_action(&mut rng);
        bad += usize::from(!unit(&action.score_action(&cmd, &a).unwrap()));
        let (m, v) = (random_text(&mut rng, 4), random_text(&mut rng, 3));
        let s = value.net_value_score(&m, &v).unwrap();
        let (f, vm) = lexical_similarity(&m, &v);
        bad += [s.word, s.char, f, vm, s.lex.0, s.lex.1, s.net].iter().filter(|x| !unit(x)).count();
        let d = mention.distributions(&random_text(&mut rng, 2), &cmd).unwrap();
        worst_norm = worst_norm
            .max((d.start.iter().sum::<f64>() - 1.0).abs())
            .max((d.end.iter().sum::<f64>() - 1.0).abs());
        bad += d.start.iter().chain(&d.end).filter(|p| !unit(p)).count();
    }
    outcome(
        bad == 0 && worst_norm <= 1e-5,
        format!("{n} inputs, {bad} out-of-range scores, max |sum - 1| = {worst_norm:.1e}"),
    )
}

// 4 -----------------------------------------------------------------------

/// Largest relative error between analytic gradients and a five-point
/// finite-difference estimate over every weight of `model`.
fn max_rel_error<M>(
    model: &mut M,
    store: impl Fn(&mut M) -> &mut ParamStore,
    loss: impl Fn(&M) -> f64,
    analytic: &Gradients,
) -> f64 {
    let eps = 1e-5;
    let ids: Vec<_> = store(model).ids().collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        for k in 0..store(model).get(id).data.len() {
            let orig = store(model).get(id).data[k];
            let mut at = |delta: f64| {
                store(model).get_mut(id).data[k] = orig + delta;
                let l = loss(model);
                store(model).get_mut(id).data[k] = orig;
                l
            };
            let numeric = (8.0 * (at(eps) - at(-eps)) - (at(2.0 * eps) - at(-2.0 * eps))) / (12.0 * eps);
            let a = analytic.get(id).map_or(0.0, |t| t.data[k]);
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
    }
    worst
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let vocab = small_vocab();
    let (mut worst_a, mut worst_p): (f64, f64) = (0.0, 0.0);
    let configs = 100;
    for c in 0..configs {
        let mut scorer = ActionScorer::new(vocab.clone(), ActionScorerConfig { dim: 4, dropout: 0.0 }, c).unwrap();
        let cmd = random_text(&mut rng, 6);
        let pos = random_action(&mut rng);
        let negs: Vec<ActionSchema> = (0..rng.gen_range(1..=2)).map(|_| random_action(&mut rng)).collect();
        let negs: Vec<&ActionSchema> = negs.iter().collect();
        let (_, grads) = scorer.loss_and_gradients(&cmd, &[&pos], &negs).unwrap();
        let err = max_rel_error(
            &mut scorer,
            ActionScorer::params_mut,
            |s| s.action_ranking_loss(&cmd, &[&pos], &negs).unwrap(),
            &grads,
        );
        worst_a = worst_a.max(err);

        let mut value = ValueScorer::new(vocab.clone(), build_char_vocab(WORDS), None, value_config(4, 3), 1000 + c).unwrap();
        let mention = random_text(&mut rng, 3);
        let gold = random_text(&mut rng, 2);
        let others: Vec<String> = (0..rng.gen_range(1..=2)).map(|_| random_text(&mut rng, 2)).collect();
        let others: Vec<&str> = others.iter().map(String::as_str).collect();
        let (_, grads) = value.loss_and_gradients(&mention, &gold, &others).unwrap();
        let err = max_rel_error(
            &mut value,
            ValueScorer::params_mut,
            |s| s.value_ranking_loss(&mention, &gold, &others).unwrap(),
            &grads,
        );
        worst_p = worst_p.max(err);
    }
    outcome(
        worst_a <= 1e-3 && worst_p <= 1e-3 && vocab.len() == 20,
        format!(
            "{configs} configs at d=4, |V|={}: max rel err L_a {worst_a:.2e}, L_p {worst_p:.2e}",
            vocab.len()
        ),
    )
}

// 5 -----------------------------------------------------------------------

fn lexical_formulas() -> Outcome {
    let vm = value_match("at 7 pm", "7:00 PM");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let alphabet: Vec<char> = "abcxyz 0179:é ñ-PM".chars().collect();
    let rand_str = |rng: &mut ChaCha8Rng| -> String {
        (0..rng.gen_range(0..12)).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect()
    };
    let mut failures = 0;
    for _ in 0..1000 {
        let (a, b) = (rand_str(&mut rng), rand_str(&mut rng));
        failures += usize::from(fuzzy(&a, &a) != 1.0 || fuzzy(&a, &b) != fuzzy(&b, &a));
    }
    outcome(
        vm == 0.5 && failures == 0,
        format!("value_match(\"at 7 pm\", \"7:00 PM\") = {vm}; 1000 random pairs, {failures} failures"),
    )
}

// 6, 7, 9 ------------------------------------------------------------------

struct Trained {
    bundle: ModelBundle,
    history: Vec<EpochRecord>,
    tuned: InferenceConfig,
    elapsed: Duration,
}

fn desk_site() -> (SiteSchema, Vec<Example>, Vec<Example>, Vec<Example>) {
    let dir = data_dir().join("site1");
    let schema = load_site_schema(dir.join("schema.json")).unwrap();
    let templates = load_templates(dir.join("templates.jsonl")).unwrap();
    let para = load_paraphrases(dir.join("paraphrases.json")).unwrap();
    let parts = split(&generate(&schema, &templates, &para, 2000, 1).unwrap(), (0.8, 0.1, 0.1), 2).unwrap();
    (schema, parts.train, parts.valid, parts.test)
}

fn desk_config() -> TrainingConfig {
    let text = std::fs::read_to_string(data_dir().join("desk.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn train_desk(schema: &SiteSchema, train: &[Example], valid: &[Example]) -> Trained {
    let start = Instant::now();
    let mut history = Vec::new();
    let bundle = train_all(schema, train, valid, &desk_config(), |r| history.push(r.clone())).unwrap();
    let rhos: Vec<f64> = (0..=20).map(|i| i as f64 * 0.05).chain([0.67]).collect();
    let alphas: Vec<f64> = (0..=10).map(|i| i as f64 * 0.1).collect();
    let (tuned, _) = tune_inference(&bundle.models, schema, valid, &rhos, &alphas, &bundle.inference).unwrap();
    Trained {
        bundle,
        history,
        tuned,
        elapsed: start.elapsed(),
    }
}

fn end_to_end(run: &Trained, schema: &SiteSchema, test: &[Example]) -> Outcome {
    let rep = evaluate(schema, test, &predict(&run.bundle.models, schema, test, &run.tuned).unwrap()).unwrap();
    let base = InferenceConfig::default();
    let def = evaluate(schema, test, &predict(&run.bundle.models, schema, test, &base).unwrap()).unwrap();
    outcome(
        rep.ema >= 0.80 && rep.a_acc >= 0.95 && rep.pa100 >= 0.85 && run.elapsed <= Duration::from_secs(7200),
        format!(
            "test n={}, valid-tuned rho={:.2} alpha={:.1}: A-acc {:.3} P-F1 {:.3} EMA {:.3} PA-100 {:.3} \
             | rho=0.67 alpha=0.4: A-acc {:.3} P-F1 {:.3} EMA {:.3} PA-100 {:.3} | trained in {:.0?}",
            rep.n,
            run.tuned.rho,
            run.tuned.alpha,
            rep.a_acc,
            rep.p_f1,
            rep.ema,
            rep.pa100,
            def.a_acc,
            def.p_f1,
            def.ema,
            def.pa100,
            run.elapsed
        ),
    )
}

fn cross_site(run: &Trained) -> Outcome {
    let dir = data_dir().join("site2");
    let schema = load_site_schema(dir.join("schema.json")).unwrap();
    let templates = load_templates(dir.join("templates.jsonl")).unwrap();
    let para = load_paraphrases(dir.join("paraphrases.json")).unwrap();
    let other = generate(&schema, &templates, &para, 500, 3).unwrap();
    let preds = predict(&run.bundle.models, &schema, &other, &run.tuned).unwrap();
    let rep = evaluate(&schema, &other, &preds).unwrap();
    outcome(
        rep.a_acc >= 0.70,
        format!("site 2 n={}: A-acc {:.3} P-F1 {:.3} EMA {:.3} PA-100 {:.3}", rep.n, rep.a_acc, rep.p_f1, rep.ema, rep.pa100),
    )
}

fn determinism(a: &Trained, b: &Trained, schema: &SiteSchema, test: &[Example]) -> Outcome {
    let histories = a.history.len() == b.history.len()
        && a.history.iter().zip(&b.history).all(|(x, y)| {
            x.component == y.component
                && x.epoch == y.epoch
                && (x.valid_metric - y.valid_metric).abs() <= 1e-4
                && (x.train_loss - y.train_loss).abs() <= 1e-4
        });
    let mut preds = a.tuned == b.tuned;
    for e in test {
        let pa = parse(&a.bundle.models, schema, &e.page_id, &e.command, &a.tuned).unwrap();
        let pb = parse(&b.bundle.models, schema, &e.page_id, &e.command, &b.tuned).unwrap();
        preds &= match (pa, pb) {
            (Some(x), Some(y)) => x.instruction == y.instruction && (x.total - y.total).abs() <= 1e-4,
            (None, None) => true,
            _ => false,
        };
    }
    outcome(
        histories && preds,
        format!(
            "{} epoch records agree: {histories}; {} test predictions agree: {preds}",
            a.history.len(),
            test.len()
        ),
    )
}

fn main() {
    let mut results: Vec<(u8, bool)> = Vec::new();
    let mut record = |id: u8, name: &str, o: Outcome| {
        println!("{} [{id}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, o.pass));
    };
    record(1, "metrics oracle", metrics_oracle());
    record(2, "inference oracle", inference_oracle());
    record(3, "score ranges and normalization", score_ranges());
    record(4, "gradient checks", gradient_checks());
    record(5, "lexical formulas", lexical_formulas());

    let (schema, train, valid, test) = desk_site();
    let run = train_desk(&schema, &train, &valid);
    record(6, "end-to-end desk run", end_to_end(&run, &schema, &test));
    record(7, "cross-site generalization", cross_site(&run));
    record(8, "threshold behavior", threshold_sweep());
    let again = train_desk(&schema, &train, &valid);
    record(9, "determinism", determinism(&run, &again, &schema, &test));

    let failed: Vec<u8> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    println!("acceptance: {}/{} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
