//! Website action spaces: pages, concept-level actions and their parameters.

use std::collections::HashSet;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{read_to_string, Error, Result};
use crate::text::normalize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParameterKind {
    Closed,
    Open,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSpec {
    pub name: String,
    pub kind: ParameterKind,
    #[serde(default)]
    pub domain: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

impl ParameterSpec {
    pub fn open(name: impl Into<String>) -> Self {
        ParameterSpec {
            name: name.into(),
            kind: ParameterKind::Open,
            domain: Vec::new(),
            description: None,
        }
    }

    pub fn closed<I, S>(name: impl Into<String>, domain: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ParameterSpec {
            name: name.into(),
            kind: ParameterKind::Closed,
            domain: domain.into_iter().map(Into::into).collect(),
            description: None,
        }
    }

    pub fn is_closed(&self) -> bool {
        self.kind == ParameterKind::Closed
    }

    /// Canonical comparison key of the parameter name.
    pub fn key(&self) -> String {
        normalize(&self.name)
    }

    /// Domain value whose canonical form equals that of `value`.
    pub fn find_value(&self, value: &str) -> Option<&str> {
        let key = normalize(value);
        self.domain.iter().find(|v| normalize(v) == key).map(String::as_str)
    }

    fn validate(&self, ctx: &str) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::Validation(format!("{ctx}: parameter name is empty")));
        }
        match self.kind {
            ParameterKind::Open if !self.domain.is_empty() => {
                return Err(Error::Validation(format!(
                    "{ctx}: open parameter `{}` must not list a domain",
                    self.name
                )))
            }
            ParameterKind::Closed if self.domain.is_empty() => {
                return Err(Error::Validation(format!(
                    "{ctx}: closed parameter `{}` has an empty domain",
                    self.name
                )))
            }
            _ => {}
        }
        let mut seen = HashSet::new();
        for value in &self.domain {
            if value.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "{ctx}: parameter `{}` has an empty domain value",
                    self.name
                )));
            }
            if !seen.insert(normalize(value)) {
                return Err(Error::Validation(format!(
                    "{ctx}: parameter `{}` repeats domain value `{value}`",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSchema {
    pub name: String,
    #[serde(default)]
    pub parameters: Vec<ParameterSpec>,
    /// Filled from the enclosing page key when loading a site schema.
    #[serde(skip)]
    pub page: String,
}

impl ActionSchema {
    pub fn new(name: impl Into<String>, parameters: Vec<ParameterSpec>) -> Self {
        ActionSchema {
            name: name.into(),
            parameters,
            page: String::new(),
        }
    }

    pub fn key(&self) -> String {
        normalize(&self.name)
    }

    pub fn parameter(&self, name: &str) -> Option<&ParameterSpec> {
        let key = normalize(name);
        self.parameters.iter().find(|p| p.key() == key)
    }

    pub fn is_parametrized(&self) -> bool {
        !self.parameters.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Restaurants,
    Hotels,
    Shopping,
    Other,
}

/// All pages of one website and the actions each page exposes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSchema {
    pub site_id: String,
    pub domain_tag: DomainTag,
    pub pages: IndexMap<String, Vec<ActionSchema>>,
}

impl SiteSchema {
    pub fn from_json_str(json: &str) -> Result<Self> {
        let mut schema: SiteSchema = serde_json::from_str(json)?;
        for (page, actions) in schema.pages.iter_mut() {
            for action in actions.iter_mut() {
                action.page = page.clone();
            }
        }
        schema.validate()?;
        Ok(schema)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks every structural invariant, reporting the first violation.
    pub fn validate(&self) -> Result<()> {
        if self.site_id.trim().is_empty() {
            return Err(Error::Validation("site_id is empty".into()));
        }
        if self.pages.is_empty() {
            return Err(Error::Validation("schema has no pages".into()));
        }
        for (page, actions) in &self.pages {
            if actions.is_empty() {
                return Err(Error::Validation(format!("page `{page}` has no actions")));
            }
            let mut names = HashSet::new();
            for action in actions {
                let ctx = format!("page `{page}`, action `{}`", action.name);
                if action.name.trim().is_empty() {
                    return Err(Error::Validation(format!("page `{page}`: action name is empty")));
                }
                if !names.insert(action.key()) {
                    return Err(Error::Validation(format!(
                        "page `{page}` defines action `{}` more than once",
                        action.name
                    )));
                }
                let mut params = HashSet::new();
                for p in &action.parameters {
                    p.validate(&ctx)?;
                    if !params.insert(p.key()) {
                        return Err(Error::Validation(format!(
                            "{ctx}: parameter `{}` is declared twice",
                            p.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Actions of `page` in file order.
    pub fn actions_of(&self, page: &str) -> Result<&[ActionSchema]> {
        self.pages
            .get(page)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownPage(page.to_owned()))
    }

    pub fn action(&self, page: &str, name: &str) -> Result<&ActionSchema> {
        let key = normalize(name);
        self.actions_of(page)?
            .iter()
            .find(|a| a.key() == key)
            .ok_or_else(|| Error::Validation(format!("page `{page}` has no action `{name}`")))
    }

    pub fn actions(&self) -> impl Iterator<Item = &ActionSchema> {
        self.pages.values().flatten()
    }
}

pub fn load_site_schema(path: impl AsRef<Path>) -> Result<SiteSchema> {
    SiteSchema::from_json_str(&read_to_string(path.as_ref())?)
}

pub fn actions_of<'a>(schema: &'a SiteSchema, page: &str) -> Result<&'a [ActionSchema]> {
    schema.actions_of(page)
}
