//! Instruction-level metrics and error classes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{Example, NavigationInstruction};
use crate::error::{Error, Result};
use crate::schema::SiteSchema;
use crate::text::normalize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    ActionNotPredicted,
    ActionMispredicted,
    ClosedParamMissed,
    ClosedValueMispredicted,
    OpenValueMispredicted,
}

impl ErrorClass {
    pub const ALL: [ErrorClass; 5] = [
        ErrorClass::ActionNotPredicted,
        ErrorClass::ActionMispredicted,
        ErrorClass::ClosedParamMissed,
        ErrorClass::ClosedValueMispredicted,
        ErrorClass::OpenValueMispredicted,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub a_acc: f64,
    pub p_f1: f64,
    pub ema: f64,
    pub pa100: f64,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub n: usize,
    pub error_counts: BTreeMap<ErrorClass, usize>,
}

fn canonical(i: &NavigationInstruction) -> BTreeSet<(String, String)> {
    i.assignments
        .iter()
        .map(|a| (normalize(&a.parameter), normalize(&a.value)))
        .collect()
}

fn same_action(gold: &NavigationInstruction, pred: &NavigationInstruction) -> bool {
    normalize(&gold.action) == normalize(&pred.action)
}

/// Parameter precision and recall of one prediction. An empty side counts
/// as vacuously correct; a wrong or missing action scores (0, 0).
pub fn per_example_pr(gold: &NavigationInstruction, pred: Option<&NavigationInstruction>) -> (f64, f64) {
    let Some(pred) = pred.filter(|p| same_action(gold, p)) else {
        return (0.0, 0.0);
    };
    let (g, p) = (canonical(gold), canonical(pred));
    let hit = g.intersection(&p).count() as f64;
    let precision = if p.is_empty() { 1.0 } else { hit / p.len() as f64 };
    let recall = if g.is_empty() { 1.0 } else { hit / g.len() as f64 };
    (precision, recall)
}

pub fn exact_match(gold: &NavigationInstruction, pred: Option<&NavigationInstruction>) -> bool {
    pred.is_some_and(|p| same_action(gold, p) && canonical(gold) == canonical(p))
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Aggregate metrics; `error_counts` is left at zero.
pub fn report(pairs: &[(NavigationInstruction, Option<NavigationInstruction>)]) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("no (gold, prediction) pairs to evaluate"));
    }
    let n = pairs.len() as f64;
    let (mut acc, mut ema, mut pa100, mut sp, mut sr) = (0usize, 0usize, 0usize, 0.0, 0.0);
    for (gold, pred) in pairs {
        let pred = pred.as_ref();
        let correct = pred.is_some_and(|p| same_action(gold, p));
        let (p, r) = per_example_pr(gold, pred);
        acc += usize::from(correct);
        pa100 += usize::from(correct && p == 1.0);
        ema += usize::from(exact_match(gold, pred));
        sp += p;
        sr += r;
    }
    let (mp, mr) = (sp / n, sr / n);
    Ok(EvalReport {
        a_acc: acc as f64 / n,
        p_f1: f1(mp, mr),
        ema: ema as f64 / n,
        pa100: pa100 as f64 / n,
        mean_precision: mp,
        mean_recall: mr,
        n: pairs.len(),
        error_counts: ErrorClass::ALL.iter().map(|&c| (c, 0)).collect(),
    })
}

pub fn classify_errors(
    gold: &NavigationInstruction,
    pred: Option<&NavigationInstruction>,
    schema: &SiteSchema,
    page_id: &str,
) -> Result<BTreeSet<ErrorClass>> {
    let mut out = BTreeSet::new();
    let Some(pred) = pred else {
        out.insert(ErrorClass::ActionNotPredicted);
        return Ok(out);
    };
    if !same_action(gold, pred) {
        out.insert(ErrorClass::ActionMispredicted);
        return Ok(out);
    }
    let action = schema.action(page_id, &gold.action)?;
    for a in &gold.assignments {
        let spec = action
            .parameter(&a.parameter)
            .ok_or_else(|| Error::Validation(format!("`{}` is not a parameter of `{}`", a.parameter, action.name)))?;
        let predicted = pred
            .assignments
            .iter()
            .find(|p| normalize(&p.parameter) == normalize(&a.parameter))
            .map(|p| normalize(&p.value));
        let ok = predicted.as_deref() == Some(normalize(&a.value).as_str());
        match (spec.is_closed(), predicted.is_some(), ok) {
            (_, _, true) => {}
            (true, false, _) => {
                out.insert(ErrorClass::ClosedParamMissed);
            }
            (true, true, _) => {
                out.insert(ErrorClass::ClosedValueMispredicted);
            }
            (false, _, _) => {
                out.insert(ErrorClass::OpenValueMispredicted);
            }
        }
    }
    Ok(out)
}

/// Metrics plus error breakdown over predictions aligned with `examples`.
pub fn evaluate(
    schema: &SiteSchema,
    examples: &[Example],
    predictions: &[Option<NavigationInstruction>],
) -> Result<EvalReport> {
    if examples.len() != predictions.len() {
        return Err(Error::Validation(format!(
            "{} examples but {} predictions",
            examples.len(),
            predictions.len()
        )));
    }
    let pairs: Vec<_> = examples.iter().map(|e| e.gold.clone()).zip(predictions.iter().cloned()).collect();
    let mut rep = report(&pairs)?;
    for (e, pred) in examples.iter().zip(predictions) {
        for class in classify_errors(&e.gold, pred.as_ref(), schema, &e.page_id)? {
            *rep.error_counts.entry(class).or_default() += 1;
        }
    }
    Ok(rep)
}

impl EvalReport {
    pub fn table_header() -> String {
        format!("{:<20} {:>7} {:>7} {:>7} {:>7}", "model", "A-acc", "P-F1", "EMA", "PA-100")
    }

    pub fn table_row(&self, label: &str) -> String {
        format!(
            "{:<20} {:>7.3} {:>7.3} {:>7.3} {:>7.3}",
            label, self.a_acc, self.p_f1, self.ema, self.pa100
        )
    }

    pub fn error_table(&self) -> String {
        let mut out = String::new();
        for (class, count) in &self.error_counts {
            let name = serde_json::to_value(class).expect("enum serializes");
            let _ = writeln!(out, "{:<28} {count}", name.as_str().unwrap_or_default());
        }
        out
    }
}
