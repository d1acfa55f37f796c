//! Command/instruction records, template-based dataset generation and
//! train/valid/test splitting.

use std::collections::HashSet;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{read_to_string, write_file, Error, Result};
use crate::schema::{ActionSchema, SiteSchema};
use crate::text::{char_len, char_slice, normalize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueAssignment {
    pub parameter: String,
    pub value: String,
}

impl ValueAssignment {
    pub fn new(parameter: impl Into<String>, value: impl Into<String>) -> Self {
        ValueAssignment {
            parameter: parameter.into(),
            value: value.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NavigationInstruction {
    pub action: String,
    #[serde(default)]
    pub assignments: Vec<ValueAssignment>,
}

impl NavigationInstruction {
    pub fn new(action: impl Into<String>, assignments: Vec<ValueAssignment>) -> Self {
        NavigationInstruction {
            action: action.into(),
            assignments,
        }
    }

    pub fn value_of(&self, parameter: &str) -> Option<&str> {
        let key = normalize(parameter);
        self.assignments
            .iter()
            .find(|a| normalize(&a.parameter) == key)
            .map(|a| a.value.as_str())
    }

    /// Checks the instruction against the action it names on `page`.
    pub fn validate_against(&self, schema: &SiteSchema, page: &str) -> Result<()> {
        let action = schema.action(page, &self.action)?;
        let mut seen = HashSet::new();
        for a in &self.assignments {
            let spec = action.parameter(&a.parameter).ok_or_else(|| {
                Error::Validation(format!(
                    "action `{}` has no parameter `{}`",
                    action.name, a.parameter
                ))
            })?;
            if !seen.insert(spec.key()) {
                return Err(Error::Validation(format!(
                    "parameter `{}` assigned twice",
                    a.parameter
                )));
            }
            if spec.is_closed() && spec.find_value(&a.value).is_none() {
                return Err(Error::Validation(format!(
                    "value `{}` is not in the domain of `{}`",
                    a.value, spec.name
                )));
            }
        }
        Ok(())
    }
}

/// A parameter mention as a character-offset span of the command.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionSpan {
    pub parameter: String,
    pub start: usize,
    pub end: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub command: String,
    pub site_id: String,
    pub page_id: String,
    pub gold: NavigationInstruction,
    #[serde(default)]
    pub mentions: Vec<MentionSpan>,
}

impl Example {
    pub fn mention_of(&self, parameter: &str) -> Option<&MentionSpan> {
        let key = normalize(parameter);
        self.mentions.iter().find(|m| normalize(&m.parameter) == key)
    }

    /// Span and assignment consistency checks that need no schema.
    pub fn validate(&self) -> Result<()> {
        let len = char_len(&self.command);
        for m in &self.mentions {
            if !(m.start < m.end && m.end <= len) {
                return Err(Error::Validation(format!(
                    "mention of `{}` has bad span [{}, {}) for a command of length {len}",
                    m.parameter, m.start, m.end
                )));
            }
            if char_slice(&self.command, m.start, m.end) != Some(m.text.as_str()) {
                return Err(Error::Validation(format!(
                    "mention text `{}` does not match command[{}..{}]",
                    m.text, m.start, m.end
                )));
            }
            if self.gold.value_of(&m.parameter).is_none() {
                return Err(Error::Validation(format!(
                    "mention of `{}` has no gold assignment",
                    m.parameter
                )));
            }
        }
        Ok(())
    }

    pub fn validate_against(&self, schema: &SiteSchema) -> Result<()> {
        self.validate()?;
        if schema.site_id != self.site_id {
            return Err(Error::Validation(format!(
                "example belongs to site `{}`, schema is `{}`",
                self.site_id, schema.site_id
            )));
        }
        self.gold.validate_against(schema, &self.page_id)
    }
}

/// A command template such as `find a table for [people]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTemplate", into = "RawTemplate")]
pub struct CommandTemplate {
    pub page_id: String,
    pub action: String,
    pub text: String,
    pub placeholders: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RawTemplate {
    page_id: String,
    action: String,
    text: String,
}

impl TryFrom<RawTemplate> for CommandTemplate {
    type Error = Error;

    fn try_from(raw: RawTemplate) -> Result<Self> {
        CommandTemplate::new(raw.page_id, raw.action, raw.text)
    }
}

impl From<CommandTemplate> for RawTemplate {
    fn from(t: CommandTemplate) -> Self {
        RawTemplate {
            page_id: t.page_id,
            action: t.action,
            text: t.text,
        }
    }
}

fn placeholder_re() -> Regex {
    Regex::new(r"\[([^\[\]]+)\]").expect("static regex")
}

impl CommandTemplate {
    pub fn new(page_id: impl Into<String>, action: impl Into<String>, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        let mut placeholders: Vec<String> = Vec::new();
        for cap in placeholder_re().captures_iter(&text) {
            let name = cap[1].to_owned();
            if placeholders.iter().any(|p| normalize(p) == normalize(&name)) {
                return Err(Error::Validation(format!(
                    "template `{text}` uses placeholder [{name}] more than once"
                )));
            }
            placeholders.push(name);
        }
        Ok(CommandTemplate {
            page_id: page_id.into(),
            action: action.into(),
            text,
            placeholders,
        })
    }

    pub fn validate_against<'s>(&self, schema: &'s SiteSchema) -> Result<&'s ActionSchema> {
        let action = schema.action(&self.page_id, &self.action)?;
        for p in &self.placeholders {
            if action.parameter(p).is_none() {
                return Err(Error::Validation(format!(
                    "template `{}` names [{p}], which is not a parameter of `{}`",
                    self.text, action.name
                )));
            }
        }
        Ok(action)
    }
}

/// Paraphrases of closed-domain values and example values of open parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParaphraseTable {
    #[serde(default)]
    pub closed: IndexMap<String, IndexMap<String, Vec<String>>>,
    #[serde(default)]
    pub open: IndexMap<String, Vec<String>>,
}

impl ParaphraseTable {
    fn closed_for(&self, parameter: &str) -> Option<&IndexMap<String, Vec<String>>> {
        let key = normalize(parameter);
        self.closed.iter().find(|(k, _)| normalize(k) == key).map(|(_, v)| v)
    }

    fn open_for(&self, parameter: &str) -> Option<&Vec<String>> {
        let key = normalize(parameter);
        self.open.iter().find(|(k, _)| normalize(k) == key).map(|(_, v)| v)
    }

    /// Every closed entry must name a value that some closed parameter of
    /// that name has in its domain.
    pub fn validate_against(&self, schema: &SiteSchema) -> Result<()> {
        for (param, values) in &self.closed {
            let specs: Vec<_> = schema
                .actions()
                .flat_map(|a| a.parameters.iter())
                .filter(|p| p.is_closed() && p.key() == normalize(param))
                .collect();
            if specs.is_empty() {
                return Err(Error::Validation(format!(
                    "paraphrases given for unknown closed parameter `{param}`"
                )));
            }
            for value in values.keys() {
                if !specs.iter().any(|s| s.find_value(value).is_some()) {
                    return Err(Error::Validation(format!(
                        "paraphrased value `{value}` is not in the domain of `{param}`"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One slot of a template: literal text or a parameter to fill.
enum Piece<'t> {
    Literal(&'t str),
    Slot(usize),
}

fn pieces(template: &CommandTemplate) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut last = 0;
    for (i, m) in placeholder_re().find_iter(&template.text).enumerate() {
        out.push(Piece::Literal(&template.text[last..m.start()]));
        out.push(Piece::Slot(i));
        last = m.end();
    }
    out.push(Piece::Literal(&template.text[last..]));
    out
}

/// The value choices available for one placeholder: (gold value, surface forms).
type Choices<'a> = Vec<(String, &'a [String])>;

fn slot_choices<'a>(
    action: &ActionSchema,
    placeholder: &str,
    table: &'a ParaphraseTable,
    template: &CommandTemplate,
) -> Result<Choices<'a>> {
    let spec = action.parameter(placeholder).expect("validated placeholder");
    let missing = || {
        Error::Generation(format!(
            "no paraphrases for parameter `{}` used by template `{}`",
            spec.name, template.text
        ))
    };
    if spec.is_closed() {
        let entries = table.closed_for(&spec.name).ok_or_else(missing)?;
        let mut choices = Vec::new();
        // domain order keeps draws independent of table ordering
        for value in &spec.domain {
            let key = normalize(value);
            if let Some((_, list)) = entries.iter().find(|(k, _)| normalize(k) == key) {
                if list.is_empty() {
                    return Err(Error::Generation(format!(
                        "empty paraphrase list for `{}` = `{value}`",
                        spec.name
                    )));
                }
                choices.push((value.clone(), list.as_slice()));
            }
        }
        if choices.is_empty() {
            return Err(missing());
        }
        Ok(choices)
    } else {
        let list = table.open_for(&spec.name).ok_or_else(missing)?;
        if list.is_empty() {
            return Err(Error::Generation(format!(
                "empty example-value list for open parameter `{}`",
                spec.name
            )));
        }
        Ok(list
            .iter()
            .map(|v| (v.clone(), std::slice::from_ref(v)))
            .collect())
    }
}

/// Instantiates `count` examples from randomly chosen templates, filling
/// each placeholder with a uniformly drawn value and paraphrase.
pub fn generate(
    schema: &SiteSchema,
    templates: &[CommandTemplate],
    paraphrases: &ParaphraseTable,
    count: usize,
    rng_seed: u64,
) -> Result<Vec<Example>> {
    if count == 0 {
        return Err(Error::Generation("count must be positive".into()));
    }
    if templates.is_empty() {
        return Err(Error::Generation("no templates given".into()));
    }
    paraphrases.validate_against(schema)?;

    let mut prepared = Vec::with_capacity(templates.len());
    for t in templates {
        let action = t.validate_against(schema).map_err(|e| Error::Generation(e.to_string()))?;
        let choices = t
            .placeholders
            .iter()
            .map(|p| slot_choices(action, p, paraphrases, t))
            .collect::<Result<Vec<_>>>()?;
        prepared.push((t, action, choices));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (template, action, choices) = &prepared[rng.gen_range(0..prepared.len())];
        let mut command = String::new();
        let mut assignments = Vec::new();
        let mut mentions = Vec::new();
        for piece in pieces(template) {
            match piece {
                Piece::Literal(s) => command.push_str(s),
                Piece::Slot(i) => {
                    let (value, forms) = &choices[i][rng.gen_range(0..choices[i].len())];
                    let surface = &forms[rng.gen_range(0..forms.len())];
                    let param = &action.parameter(&template.placeholders[i]).expect("validated").name;
                    let start = char_len(&command);
                    command.push_str(surface);
                    assignments.push(ValueAssignment::new(param.clone(), value.clone()));
                    mentions.push(MentionSpan {
                        parameter: param.clone(),
                        start,
                        end: char_len(&command),
                        text: surface.clone(),
                    });
                }
            }
        }
        let example = Example {
            command,
            site_id: schema.site_id.clone(),
            page_id: action.page.clone(),
            gold: NavigationInstruction::new(action.name.clone(), assignments),
            mentions,
        };
        example.validate()?;
        out.push(example);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

/// Bucket sizes for `n` items. Fewer items than buckets fill train, then
/// valid; otherwise largest-remainder rounding with ties going to the
/// earlier bucket.
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> Result<[usize; 3]> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
        return Err(Error::Validation(format!("split ratios must be positive, got {r:?}")));
    }
    if (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!("split ratios must sum to 1, got {r:?}")));
    }
    if n == 0 {
        return Err(Error::Empty("no examples to split"));
    }
    if n < 3 {
        let mut sizes = [0; 3];
        for s in sizes.iter_mut().take(n) {
            *s = 1;
        }
        return Ok(sizes);
    }
    let exact: Vec<f64> = r.iter().map(|x| x * n as f64).collect();
    let mut sizes = [0usize; 3];
    for i in 0..3 {
        sizes[i] = exact[i].floor() as usize;
    }
    let mut rest = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        sizes[i] += 1;
        rest -= 1;
    }
    Ok(sizes)
}

/// Shuffles with `rng_seed` and cuts into train/valid/test.
pub fn split(examples: &[Example], ratios: (f64, f64, f64), rng_seed: u64) -> Result<Split> {
    let sizes = split_sizes(examples.len(), ratios)?;
    let mut shuffled = examples.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(rng_seed));
    let test = shuffled.split_off(sizes[0] + sizes[1]);
    let valid = shuffled.split_off(sizes[0]);
    Ok(Split {
        train: shuffled,
        valid,
        test,
    })
}

fn parse_jsonl<T: serde::de::DeserializeOwned>(contents: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in contents.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line).map_err(|e| Error::Line {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn examples_from_jsonl(contents: &str, schema: Option<&SiteSchema>) -> Result<Vec<Example>> {
    let examples: Vec<Example> = parse_jsonl(contents)?;
    for (i, ex) in examples.iter().enumerate() {
        let checked = match schema {
            Some(s) => ex.validate_against(s),
            None => ex.validate(),
        };
        // blank lines are skipped, so report the record's position
        checked.map_err(|e| Error::Line {
            line: line_of_record(contents, i),
            message: e.to_string(),
        })?;
    }
    Ok(examples)
}

fn line_of_record(contents: &str, record: usize) -> usize {
    contents
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .nth(record)
        .map(|(i, _)| i + 1)
        .unwrap_or(0)
}

pub fn examples_to_jsonl(examples: &[Example]) -> Result<String> {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&serde_json::to_string(ex)?);
        out.push('\n');
    }
    Ok(out)
}

/// Reads a JSONL examples file, optionally validating every record
/// against `schema`.
pub fn load_examples(path: impl AsRef<Path>, schema: Option<&SiteSchema>) -> Result<Vec<Example>> {
    examples_from_jsonl(&read_to_string(path.as_ref())?, schema)
}

pub fn save_examples(examples: &[Example], path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), examples_to_jsonl(examples)?)
}

pub fn load_templates(path: impl AsRef<Path>) -> Result<Vec<CommandTemplate>> {
    parse_jsonl(&read_to_string(path.as_ref())?)
}

pub fn load_paraphrases(path: impl AsRef<Path>) -> Result<ParaphraseTable> {
    Ok(serde_json::from_str(&read_to_string(path.as_ref())?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::ParameterSpec;

    fn schema() -> SiteSchema {
        let mut pages = IndexMap::new();
        let mut book = ActionSchema::new(
            "find a table",
            vec![
                ParameterSpec::closed("people", ["1 person", "2 people"]),
                ParameterSpec::open("cuisine"),
            ],
        );
        book.page = "home".into();
        let mut help = ActionSchema::new("help", vec![]);
        help.page = "home".into();
        pages.insert("home".to_owned(), vec![book, help]);
        SiteSchema {
            site_id: "toy".into(),
            domain_tag: crate::schema::DomainTag::Restaurants,
            pages,
        }
    }

    fn table() -> ParaphraseTable {
        serde_json::from_str(
            r#"{"closed": {"people": {"2 people": ["me and my friend"]}},
                "open": {"cuisine": ["italian", "thai"]}}"#,
        )
        .unwrap()
    }

    #[test]
    fn instantiates_paraphrase_with_gold_domain_value() {
        let t = CommandTemplate::new("home", "find a table", "find a table for [people]").unwrap();
        let out = generate(&schema(), &[t], &table(), 1, 7).unwrap();
        let ex = &out[0];
        assert_eq!(ex.command, "find a table for me and my friend");
        assert_eq!(ex.gold.assignments, vec![ValueAssignment::new("people", "2 people")]);
        assert_eq!(ex.mentions[0].text, "me and my friend");
        assert_eq!(char_slice(&ex.command, ex.mentions[0].start, ex.mentions[0].end), Some("me and my friend"));
    }

    #[test]
    fn template_without_placeholders_has_no_assignments() {
        let t = CommandTemplate::new("home", "help", "i need help").unwrap();
        let out = generate(&schema(), &[t], &table(), 3, 1).unwrap();
        assert!(out.iter().all(|e| e.gold.assignments.is_empty() && e.mentions.is_empty()));
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let ts = vec![
            CommandTemplate::new("home", "find a table", "[cuisine] food for [people]").unwrap(),
            CommandTemplate::new("home", "help", "help me").unwrap(),
        ];
        let a = examples_to_jsonl(&generate(&schema(), &ts, &table(), 50, 3).unwrap()).unwrap();
        let b = examples_to_jsonl(&generate(&schema(), &ts, &table(), 50, 3).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generation_errors() {
        let s = schema();
        let bad_param = CommandTemplate::new("home", "find a table", "for [date]").unwrap();
        assert!(generate(&s, &[bad_param], &table(), 1, 0).is_err());
        let bad_action = CommandTemplate::new("home", "fly", "fly").unwrap();
        assert!(generate(&s, &[bad_action], &table(), 1, 0).is_err());
        let t = CommandTemplate::new("home", "find a table", "for [people]").unwrap();
        assert!(generate(&s, &[t.clone()], &ParaphraseTable::default(), 1, 0).is_err());
        let mut empty = table();
        empty.closed["people"]["2 people"].clear();
        assert!(matches!(generate(&s, &[t.clone()], &empty, 1, 0), Err(Error::Generation(_))));
        assert!(generate(&s, &[t], &table(), 0, 0).is_err());
        assert!(CommandTemplate::new("home", "find a table", "[people] and [people]").is_err());
    }

    #[test]
    fn split_sizes_follow_ratios() {
        assert_eq!(split_sizes(100, (0.8, 0.1, 0.1)).unwrap(), [80, 10, 10]);
        let n = 14332 + 2865 + 1911;
        let r = (14332.0 / n as f64, 2865.0 / n as f64, 1911.0 / n as f64);
        let r = (r.0, r.1, 1.0 - r.0 - r.1);
        assert_eq!(split_sizes(n, r).unwrap(), [14332, 2865, 1911]);
        assert_eq!(split_sizes(1, (0.1, 0.1, 0.8)).unwrap(), [1, 0, 0]);
        assert_eq!(split_sizes(2, (0.1, 0.1, 0.8)).unwrap(), [1, 1, 0]);
        assert!(split_sizes(0, (0.8, 0.1, 0.1)).is_err());
        assert!(split_sizes(10, (0.8, 0.1, 0.2)).is_err());
        assert!(split_sizes(10, (1.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn split_is_a_disjoint_deterministic_cover() {
        let t = CommandTemplate::new("home", "find a table", "[cuisine] for [people]").unwrap();
        let examples = generate(&schema(), &[t], &table(), 37, 9).unwrap();
        let a = split(&examples, (0.6, 0.2, 0.2), 5).unwrap();
        let b = split(&examples, (0.6, 0.2, 0.2), 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len() + a.valid.len() + a.test.len(), 37);
        assert!(split(&[], (0.6, 0.2, 0.2), 5).is_err());
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let t = CommandTemplate::new("home", "find a table", "[cuisine] for [people]").unwrap();
        let examples = generate(&schema(), &[t], &table(), 5, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ex.jsonl");
        save_examples(&examples, &path).unwrap();
        assert_eq!(load_examples(&path, Some(&schema())).unwrap(), examples);

        let good = serde_json::to_string(&examples[0]).unwrap();
        let missing_gold = r#"{"command":"x","site_id":"toy","page_id":"home","mentions":[]}"#;
        let err = examples_from_jsonl(&format!("{good}\n{missing_gold}\n"), None).unwrap_err();
        assert!(matches!(err, Error::Line { line: 2, .. }), "{err}");

        let mut bad = examples[0].clone();
        bad.mentions[0].text.push('!');
        let line = serde_json::to_string(&bad).unwrap();
        let err = examples_from_jsonl(&format!("\n{line}"), None).unwrap_err();
        assert!(matches!(err, Error::Line { line: 2, .. }), "{err}");
    }

    #[test]
    fn closed_value_outside_domain_fails_schema_validation() {
        let mut ex = Example {
            command: "for two".into(),
            site_id: "toy".into(),
            page_id: "home".into(),
            gold: NavigationInstruction::new("find a table", vec![ValueAssignment::new("people", "3 people")]),
            mentions: vec![],
        };
        assert!(ex.validate_against(&schema()).is_err());
        ex.gold.assignments[0].value = "2 People".into();
        assert!(ex.validate_against(&schema()).is_ok());
    }
}
