//! Combines action scores, extracted mentions and value scores into one
//! navigation instruction per command.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::action_scorer::ActionScorer;
use crate::dataset::{NavigationInstruction, ValueAssignment};
use crate::error::{Error, Result};
use crate::mention::SpanExtractor;
use crate::schema::{ActionSchema, ParameterSpec, SiteSchema};
use crate::value_scorer::ValueScorer;

pub const PREDICTION_VERSION: u32 = 1;

/// How rejected closed-domain parameters enter the average confidence.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceMean {
    #[default]
    AssignedOnly,
    CountRejectedAsZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub rho: f64,
    pub alpha: f64,
    #[serde(default)]
    pub confidence_mean: ConfidenceMean,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            rho: 0.67,
            alpha: 0.4,
            confidence_mean: ConfidenceMean::AssignedOnly,
        }
    }
}

impl InferenceConfig {
    pub fn new(rho: f64, alpha: f64) -> Result<Self> {
        let cfg = InferenceConfig {
            rho,
            alpha,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("rho", self.rho), ("alpha", self.alpha)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// The three scoring components as seen by the decoder.
pub trait Scorers {
    fn action_scores(&self, command: &str, actions: &[ActionSchema]) -> Result<Vec<f64>>;
    /// Mention text for `parameter`, or `None` if it is not mentioned.
    fn mention(&self, parameter: &ParameterSpec, command: &str) -> Result<Option<String>>;
    fn value_scores(&self, mention: &str, values: &[String]) -> Result<Vec<f64>>;
}

/// Trained components, immutable once loaded.
#[derive(Debug, Clone)]
pub struct Models {
    pub action: ActionScorer,
    pub mention: SpanExtractor,
    pub value: ValueScorer,
}

impl Scorers for Models {
    fn action_scores(&self, command: &str, actions: &[ActionSchema]) -> Result<Vec<f64>> {
        self.action.score_actions(command, actions)
    }

    fn mention(&self, parameter: &ParameterSpec, command: &str) -> Result<Option<String>> {
        Ok(self.mention.extract_mention(&parameter.name, command)?.span.map(|s| s.text))
    }

    fn value_scores(&self, mention: &str, values: &[String]) -> Result<Vec<f64>> {
        Ok(self.value.score_values(mention, values)?.into_iter().map(|s| s.net).collect())
    }
}

/// Threshold-independent evidence for one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterEvidence {
    pub parameter: String,
    pub closed: bool,
    pub mention: Option<String>,
    /// Best domain value and its net score (closed parameters only).
    pub best: Option<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionEvidence {
    pub action: String,
    pub action_score: f64,
    pub parameters: Vec<ParameterEvidence>,
}

/// Everything the decoder needs for one command; reusable across (ρ, α).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandAnalysis {
    pub command: String,
    pub page_id: String,
    pub actions: Vec<ActionEvidence>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ParameterOutcome {
    NoMention,
    Assigned { mention: String, value: String, confidence: f64 },
    Rejected { mention: String, best_value: String, score: f64 },
}

impl ParameterOutcome {
    pub fn assignment(&self) -> Option<(&str, f64)> {
        match self {
            ParameterOutcome::Assigned { value, confidence, .. } => Some((value, *confidence)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterTrace {
    pub parameter: String,
    #[serde(flatten)]
    pub outcome: ParameterOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateTrace {
    pub action: String,
    pub action_score: f64,
    pub parameters: Vec<ParameterTrace>,
    /// Average confidence; `None` for unparametrized actions.
    pub param_score: Option<f64>,
    /// `None` when the candidate was discarded.
    pub total: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub instruction: NavigationInstruction,
    pub action_score: f64,
    pub param_score: Option<f64>,
    pub total: f64,
    pub confidences: IndexMap<String, f64>,
    pub trace: Vec<CandidateTrace>,
}

/// Closed values are kept only when their best score reaches ρ; open
/// parameters take the mention verbatim with confidence 1.
pub fn assign_parameter(evidence: &ParameterEvidence, rho: f64) -> ParameterOutcome {
    let Some(mention) = &evidence.mention else {
        return ParameterOutcome::NoMention;
    };
    if !evidence.closed {
        return ParameterOutcome::Assigned {
            mention: mention.clone(),
            value: mention.clone(),
            confidence: 1.0,
        };
    }
    match &evidence.best {
        Some((value, score)) if *score >= rho => ParameterOutcome::Assigned {
            mention: mention.clone(),
            value: value.clone(),
            confidence: *score,
        },
        Some((value, score)) => ParameterOutcome::Rejected {
            mention: mention.clone(),
            best_value: value.clone(),
            score: *score,
        },
        None => ParameterOutcome::NoMention,
    }
}

/// Average confidence and total, or `None` if a parametrized action lost
/// all of its parameters.
pub fn score_candidate(
    action_score: f64,
    parametrized: bool,
    outcomes: &[ParameterOutcome],
    config: &InferenceConfig,
) -> Option<(Option<f64>, f64)> {
    if !parametrized {
        return Some((None, action_score));
    }
    let assigned: Vec<f64> = outcomes.iter().filter_map(|o| o.assignment().map(|(_, c)| c)).collect();
    if assigned.is_empty() {
        return None;
    }
    let rejected = match config.confidence_mean {
        ConfidenceMean::AssignedOnly => 0,
        ConfidenceMean::CountRejectedAsZero => {
            outcomes.iter().filter(|o| matches!(o, ParameterOutcome::Rejected { .. })).count()
        }
    };
    let mean = assigned.iter().sum::<f64>() / (assigned.len() + rejected) as f64;
    Some((Some(mean), config.alpha * action_score + (1.0 - config.alpha) * mean))
}

/// Runs every scorer once per action and parameter on `page_id`. Mentions
/// are shared between actions whose parameters have the same name.
pub fn analyze(scorers: &impl Scorers, schema: &SiteSchema, page_id: &str, command: &str) -> Result<CommandAnalysis> {
    let actions = schema.actions_of(page_id)?;
    if command.trim().is_empty() {
        return Err(Error::Validation("command is empty".into()));
    }
    let scores = scorers.action_scores(command, actions)?;
    let mut mentions: IndexMap<String, Option<String>> = IndexMap::new();
    let mut out = Vec::with_capacity(actions.len());
    for (action, &action_score) in actions.iter().zip(&scores) {
        let mut parameters = Vec::with_capacity(action.parameters.len());
        for p in &action.parameters {
            let mention = match mentions.get(&p.name) {
                Some(m) => m.clone(),
                None => {
                    let m = scorers.mention(p, command)?;
                    mentions.insert(p.name.clone(), m.clone());
                    m
                }
            };
            let best = match (&mention, p.is_closed()) {
                (Some(m), true) => {
                    let s = scorers.value_scores(m, &p.domain)?;
                    crate::action_scorer::argmax(&s).map(|i| (p.domain[i].clone(), s[i]))
                }
                _ => None,
            };
            parameters.push(ParameterEvidence {
                parameter: p.name.clone(),
                closed: p.is_closed(),
                mention,
                best,
            });
        }
        out.push(ActionEvidence {
            action: action.name.clone(),
            action_score,
            parameters,
        });
    }
    Ok(CommandAnalysis {
        command: command.to_owned(),
        page_id: page_id.to_owned(),
        actions: out,
    })
}

/// Picks the highest-total candidate. Ties go to the higher action score,
/// then to the earlier action in the schema.
pub fn decide(analysis: &CommandAnalysis, config: &InferenceConfig) -> Option<ScoredPrediction> {
    let mut trace = Vec::with_capacity(analysis.actions.len());
    let mut best: Option<usize> = None;
    for a in &analysis.actions {
        let outcomes: Vec<ParameterOutcome> = a.parameters.iter().map(|p| assign_parameter(p, config.rho)).collect();
        let scored = score_candidate(a.action_score, !a.parameters.is_empty(), &outcomes, config);
        let cand = CandidateTrace {
            action: a.action.clone(),
            action_score: a.action_score,
            parameters: a
                .parameters
                .iter()
                .zip(outcomes)
                .map(|(p, outcome)| ParameterTrace {
                    parameter: p.parameter.clone(),
                    outcome,
                })
                .collect(),
            param_score: scored.and_then(|s| s.0),
            total: scored.map(|s| s.1),
        };
        if let Some(total) = cand.total {
            let better = match best {
                None => true,
                Some(b) => {
                    let (bt, bs) = (trace_total(&trace[b]), trace[b].action_score);
                    total > bt || (total == bt && cand.action_score > bs)
                }
            };
            if better {
                best = Some(trace.len());
            }
        }
        trace.push(cand);
    }
    let winner = &trace[best?];
    let mut confidences = IndexMap::new();
    let mut assignments = Vec::new();
    for p in &winner.parameters {
        if let Some((value, c)) = p.outcome.assignment() {
            assignments.push(ValueAssignment::new(&p.parameter, value));
            confidences.insert(p.parameter.clone(), c);
        }
    }
    Some(ScoredPrediction {
        instruction: NavigationInstruction::new(&winner.action, assignments),
        action_score: winner.action_score,
        param_score: winner.param_score,
        total: winner.total.expect("winner has a total"),
        confidences,
        trace,
    })
}

fn trace_total(c: &CandidateTrace) -> f64 {
    c.total.unwrap_or(f64::NEG_INFINITY)
}

pub fn parse(
    scorers: &impl Scorers,
    schema: &SiteSchema,
    page_id: &str,
    command: &str,
    config: &InferenceConfig,
) -> Result<Option<ScoredPrediction>> {
    Ok(decide(&analyze(scorers, schema, page_id, command)?, config))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentJson {
    pub parameter: String,
    pub value: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionJson {
    pub action: String,
    pub assignments: Vec<AssignmentJson>,
    pub action_score: f64,
    pub total: f64,
}

/// Wire form of a parse result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionDocument {
    pub version: u32,
    pub command: String,
    pub page_id: String,
    pub prediction: Option<PredictionJson>,
    pub trace: Vec<CandidateTrace>,
}

impl PredictionDocument {
    pub fn new(command: &str, page_id: &str, prediction: Option<&ScoredPrediction>) -> Self {
        PredictionDocument {
            version: PREDICTION_VERSION,
            command: command.to_owned(),
            page_id: page_id.to_owned(),
            prediction: prediction.map(|p| PredictionJson {
                action: p.instruction.action.clone(),
                assignments: p
                    .instruction
                    .assignments
                    .iter()
                    .map(|a| AssignmentJson {
                        parameter: a.parameter.clone(),
                        value: a.value.clone(),
                        confidence: p.confidences[&a.parameter],
                    })
                    .collect(),
                action_score: p.action_score,
                total: p.total,
            }),
            trace: prediction.map(|p| p.trace.clone()).unwrap_or_default(),
        }
    }
}
