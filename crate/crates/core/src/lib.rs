//! Match-based semantic parsing of natural-language commands into
//! concept-level web navigation instructions.
//!
//! A page exposes a set of actions ([`schema::ActionSchema`]), each with
//! closed- or open-domain parameters. Parsing a command scores every action
//! against it, extracts a mention for each parameter, maps closed-domain
//! mentions onto domain values, and combines everything into the single
//! best [`dataset::NavigationInstruction`].

pub mod action_scorer;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod mention;
pub mod nn;
pub mod schema;
pub mod text;
pub mod training;
pub mod value_scorer;

pub use error::{Error, Result};
pub use schema::{ActionSchema, DomainTag, ParameterKind, ParameterSpec, SiteSchema};
pub use dataset::{Example, MentionSpan, NavigationInstruction, ValueAssignment};



pub use evaluation::{ErrorClass, EvalReport};
pub use inference::{InferenceConfig, Models, PredictionDocument, ScoredPrediction};
pub use training::{ModelBundle, TrainingConfig};
