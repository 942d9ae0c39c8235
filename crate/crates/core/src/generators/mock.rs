//! Table-driven fake model backend.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::fingerprint;
use crate::logical::Cardinality;
use crate::physical::ModelSpec;
use crate::schema::FieldSpec;

use super::backend::{Backend, GenerationResult};
use super::prompts::{PromptRequest, TaskKind};
use super::tokens::count_tokens;

pub const GARBAGE: &str = "lorem ipsum dolor sit amet";
pub const REFUSAL: &str = "I'm sorry, I can't help with that.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    /// The opposite of whatever the next most specific rule answers.
    Negate,
    Garbage,
    Refuse,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefaultBehavior {
    #[default]
    Echo,
    Garbage,
    Refuse,
}

/// `model`/`key` of `"*"` match anything; `source_id` absent matches any
/// record. The most specific matching rule wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default = "star")]
    pub model: String,
    pub kind: TaskKind,
    #[serde(default = "star")]
    pub key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub behavior: Option<Behavior>,
}

fn star() -> String {
    "*".into()
}

impl MockRule {
    pub fn answer(model: &str, kind: TaskKind, key: &str, source_id: Option<&str>, answer: serde_json::Value) -> Self {
        MockRule {
            model: model.into(),
            kind,
            key: key.into(),
            source_id: source_id.map(str::to_string),
            answer: Some(answer),
            behavior: None,
        }
    }

    pub fn behave(model: &str, kind: TaskKind, key: &str, source_id: Option<&str>, behavior: Behavior) -> Self {
        MockRule {
            model: model.into(),
            kind,
            key: key.into(),
            source_id: source_id.map(str::to_string),
            answer: None,
            behavior: Some(behavior),
        }
    }

    fn specificity(&self, model: &str, kind: TaskKind, key: &str, source_id: &str) -> Option<u8> {
        if self.kind != kind {
            return None;
        }
        let mut s = 0;
        match self.model.as_str() {
            "*" => {}
            m if m == model => s += 4,
            _ => return None,
        }
        match self.key.as_str() {
            "*" => {}
            k if k == key => s += 2,
            _ => return None,
        }
        match &self.source_id {
            None => {}
            Some(id) if id == source_id => s += 1,
            Some(_) => return None,
        }
        Some(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockProfile {
    pub latency_s: f64,
    pub latency_per_token_s: f64,
    /// Actually sleep for the simulated latency.
    pub sleep: bool,
    pub error_rate: f64,
    pub default: DefaultBehavior,
    /// String answers that do not occur in the prompt are withheld, which
    /// is how input truncation costs quality.
    pub grounded: bool,
}

impl Default for MockProfile {
    fn default() -> Self {
        MockProfile {
            latency_s: 0.0,
            latency_per_token_s: 0.0,
            sleep: false,
            error_rate: 0.0,
            default: DefaultBehavior::Echo,
            grounded: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockTable {
    pub rules: Vec<MockRule>,
    pub profiles: BTreeMap<String, MockProfile>,
    pub default_profile: MockProfile,
}

enum Resolved {
    Answer(serde_json::Value),
    Behavior(Behavior),
    Default(DefaultBehavior),
}

impl MockTable {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Backend(format!("mock table: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Backend(format!("mock table {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn profile(&self, model_id: &str) -> &MockProfile {
        self.profiles.get(model_id).unwrap_or(&self.default_profile)
    }

    fn resolve(&self, model: &str, kind: TaskKind, key: &str, source_id: &str) -> Resolved {
        let mut matches: Vec<(u8, usize, &MockRule)> = self
            .rules
            .iter()
            .enumerate()
            .filter_map(|(i, r)| Some((r.specificity(model, kind, key, source_id)?, i, r)))
            .collect();
        // most specific first; among equals the later rule wins
        matches.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.cmp(&a.1)));
        let mut negate = false;
        for (_, _, r) in matches {
            match (r.behavior, &r.answer) {
                (Some(Behavior::Negate), _) => negate = true,
                (Some(b), _) => return Resolved::Behavior(b),
                (None, Some(a)) if negate => return Resolved::Answer(negated(a)),
                (None, Some(a)) => return Resolved::Answer(a.clone()),
                (None, None) => {}
            }
        }
        if negate {
            return Resolved::Answer(json!(false));
        }
        Resolved::Default(self.profile(model).default)
    }
}

fn negated(v: &serde_json::Value) -> serde_json::Value {
    use serde_json::Value as J;
    match v {
        J::Bool(b) => J::Bool(!b),
        J::String(s) => match crate::record::parse_bool(s) {
            Some(b) => J::Bool(!b),
            None => J::String(format!("not {s}")),
        },
        J::Number(n) => json!(n.as_f64().unwrap_or(0.0) + 1.0),
        J::Array(items) => J::Array(items.iter().map(negated).collect()),
        other => other.clone(),
    }
}

/// The user text between "Input record:" and the instructions.
fn input_of(user_text: &str) -> &str {
    let start = user_text.find("Input record:\n").map_or(0, |i| i + 14);
    let rest = &user_text[start..];
    let end = ["\nOutput fields:\n", "\nCondition: "]
        .iter()
        .filter_map(|m| rest.find(m))
        .min()
        .unwrap_or(rest.len());
    &rest[..end]
}

fn echo_value(input: &str) -> serde_json::Value {
    let line = input.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let value = line.split_once(": ").map_or(line, |(_, v)| v);
    json!(value.trim())
}

fn grounded(v: serde_json::Value, prompt: &str) -> Option<serde_json::Value> {
    match v {
        serde_json::Value::String(s) if !prompt.contains(s.as_str()) => None,
        serde_json::Value::Array(items) => Some(serde_json::Value::Array(
            items.into_iter().map(|i| grounded(i, prompt).unwrap_or(serde_json::Value::Null)).collect(),
        )),
        other => Some(other),
    }
}

/// Regex with one capture group for the value that follows a common marker
/// in every sample, e.g. `From:\s*(\S+)`.
pub fn infer_pattern(samples: &[(String, String)]) -> Option<String> {
    let mut markers = Vec::new();
    for (input, value) in samples {
        let value = value.trim();
        if value.is_empty() {
            return None;
        }
        let at = input.find(value)?;
        let line_start = input[..at].rfind('\n').map_or(0, |i| i + 1);
        markers.push(&input[line_start..at]);
    }
    let first = *markers.first()?;
    let mut suffix_len = first.len();
    for m in &markers[1..] {
        let common = first
            .chars()
            .rev()
            .zip(m.chars().rev())
            .take_while(|(a, b)| a == b)
            .map(|(a, _)| a.len_utf8())
            .sum();
        suffix_len = suffix_len.min(common);
    }
    let common = &first[first.len() - suffix_len..];
    let token = common.split_whitespace().last()?;
    // the marker must be a whole token in every sample
    if !common.trim_end().ends_with(token) || token.len() < 2 {
        return None;
    }
    let tight = samples.iter().all(|(_, v)| !v.trim().contains(char::is_whitespace));
    let capture = if tight { r"(\S+)" } else { r"([^\n]+)" };
    Some(format!(r"{}\s*{capture}", regex::escape(token)))
}

/// Deterministic, counted fake backend answering from a [`MockTable`].
#[derive(Debug)]
pub struct MockBackend {
    table: MockTable,
    id: String,
    calls: AtomicU64,
    per_model: Mutex<HashMap<String, u64>>,
}

impl MockBackend {
    pub fn new(table: MockTable) -> Self {
        let id = format!("mock:{}", fingerprint::short(&fingerprint::of(&table)));
        MockBackend {
            table,
            id,
            calls: AtomicU64::new(0),
            per_model: Mutex::default(),
        }
    }

    pub fn table(&self) -> &MockTable {
        &self.table
    }

    pub fn calls_for(&self, model_id: &str) -> u64 {
        self.per_model.lock().unwrap().get(model_id).copied().unwrap_or(0)
    }

    fn injected_error(&self, profile: &MockProfile, model: &str, req: &PromptRequest) -> bool {
        if profile.error_rate <= 0.0 {
            return false;
        }
        let h = fingerprint::of(&(model, &req.system_text, &req.user_text));
        let x = u32::from_str_radix(&h[..8], 16).unwrap_or(0) as f64 / u32::MAX as f64;
        x < profile.error_rate
    }

    fn answer_field(
        &self,
        model: &str,
        req: &PromptRequest,
        field: &FieldSpec,
        profile: &MockProfile,
    ) -> std::result::Result<Option<serde_json::Value>, Behavior> {
        let input = input_of(&req.user_text);
        let v = match self.table.resolve(model, TaskKind::Convert, &field.name, &req.meta.source_id) {
            Resolved::Answer(a) => a,
            Resolved::Behavior(b) => return Err(b),
            Resolved::Default(DefaultBehavior::Echo) => echo_value(input),
            Resolved::Default(DefaultBehavior::Garbage) => return Err(Behavior::Garbage),
            Resolved::Default(DefaultBehavior::Refuse) => return Err(Behavior::Refuse),
        };
        if profile.grounded {
            Ok(grounded(v, input))
        } else {
            Ok(Some(v))
        }
    }

    fn respond(&self, model: &str, req: &PromptRequest, profile: &MockProfile) -> std::result::Result<String, Behavior> {
        let meta = &req.meta;
        match meta.kind {
            TaskKind::Filter => {
                let key = meta.predicate.as_deref().unwrap_or("*");
                Ok(match self.table.resolve(model, TaskKind::Filter, key, &meta.source_id) {
                    Resolved::Answer(serde_json::Value::Bool(b)) => b.to_string(),
                    Resolved::Answer(serde_json::Value::String(s)) => s,
                    Resolved::Answer(other) => other.to_string(),
                    Resolved::Behavior(b) => return Err(b),
                    Resolved::Default(DefaultBehavior::Echo) => "true".into(),
                    Resolved::Default(DefaultBehavior::Garbage) => return Err(Behavior::Garbage),
                    Resolved::Default(DefaultBehavior::Refuse) => return Err(Behavior::Refuse),
                })
            }
            TaskKind::Convert => {
                let mut values = Vec::new();
                for f in &meta.fields {
                    values.push((f.name.clone(), self.answer_field(model, req, f, profile)?));
                }
                if meta.cardinality == Some(Cardinality::OneToMany) {
                    let rows = values
                        .iter()
                        .map(|(_, v)| match v {
                            Some(serde_json::Value::Array(a)) => a.len(),
                            _ => 1,
                        })
                        .max()
                        .unwrap_or(0);
                    let list: Vec<serde_json::Value> = (0..rows)
                        .map(|i| {
                            let mut obj = serde_json::Map::new();
                            for (name, v) in &values {
                                let cell = match v {
                                    Some(serde_json::Value::Array(a)) => a.get(i).cloned(),
                                    other => other.clone(),
                                };
                                if let Some(c) = cell.filter(|c| !c.is_null()) {
                                    obj.insert(name.clone(), c);
                                }
                            }
                            serde_json::Value::Object(obj)
                        })
                        .collect();
                    Ok(serde_json::Value::Array(list).to_string())
                } else {
                    let mut obj = serde_json::Map::new();
                    for (name, v) in values {
                        if let Some(v) = v.filter(|v| !v.is_null()) {
                            obj.insert(name, v);
                        }
                    }
                    Ok(serde_json::Value::Object(obj).to_string())
                }
            }
            TaskKind::Synthesize => {
                let key = meta.fields.first().map_or("*", |f| f.name.as_str());
                let pattern = match self.table.resolve(model, TaskKind::Synthesize, key, "") {
                    Resolved::Answer(serde_json::Value::String(p)) => Some(p),
                    Resolved::Answer(_) => None,
                    Resolved::Behavior(b) => return Err(b),
                    Resolved::Default(DefaultBehavior::Echo) => infer_pattern(&meta.samples),
                    Resolved::Default(DefaultBehavior::Garbage) => return Err(Behavior::Garbage),
                    Resolved::Default(DefaultBehavior::Refuse) => return Err(Behavior::Refuse),
                };
                Ok(match pattern {
                    Some(p) => json!({ "pattern": p }).to_string(),
                    None => "I could not find a consistent pattern.".into(),
                })
            }
        }
    }
}

impl Backend for MockBackend {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn generate(&self, model: &ModelSpec, req: &PromptRequest) -> Result<GenerationResult> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        *self
            .per_model
            .lock()
            .unwrap()
            .entry(model.model_id.clone())
            .or_default() += 1;
        let profile = self.table.profile(&model.model_id);
        if self.injected_error(profile, &model.model_id, req) {
            return Err(Error::Backend(format!("injected failure for `{}`", model.model_id)));
        }
        let text = match self.respond(&model.model_id, req, profile) {
            Ok(t) => t,
            Err(Behavior::Garbage) => GARBAGE.to_string(),
            Err(Behavior::Refuse) => REFUSAL.to_string(),
            Err(Behavior::Error | Behavior::Negate) => {
                return Err(Error::Backend(format!("scripted failure for `{}`", model.model_id)))
            }
        };
        let input_tokens = req.prompt_tokens() as u64;
        let output_tokens = count_tokens(&text) as u64;
        let latency = profile.latency_s + profile.latency_per_token_s * (input_tokens + output_tokens) as f64;
        if profile.sleep && latency > 0.0 {
            std::thread::sleep(Duration::from_secs_f64(latency));
        }
        Ok(GenerationResult::priced(text, input_tokens, output_tokens, latency, model))
    }

    fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}
