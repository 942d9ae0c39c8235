use std::collections::BTreeMap;
use std::fmt;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{FieldKind, SchemaRegistry};

/// A field value. Bytes serialize as `{"$bytes": "<base64>"}` so that JSON
/// round-trips stay lossless.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "serde_json::Value", into = "serde_json::Value")]
pub enum Value {
    Null,
    String(String),
    Number(f64),
    Bool(bool),
    Bytes(Vec<u8>),
    List(Vec<Value>),
}

impl Value {
    pub fn conforms_to(&self, kind: &FieldKind) -> bool {
        match (self, kind) {
            (Value::String(_), FieldKind::String)
            | (Value::Number(_), FieldKind::Number)
            | (Value::Bool(_), FieldKind::Boolean)
            | (Value::Bytes(_), FieldKind::Bytes) => true,
            (Value::List(items), FieldKind::List(inner)) => {
                items.iter().all(|v| v.conforms_to(inner))
            }
            _ => false,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::String(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Number(n) => Some(*n),
            _ => None,
        }
    }

    pub fn is_null(&self) -> bool {
        matches!(self, Value::Null)
    }

    /// Converts a JSON value into the given kind, accepting the loose
    /// spellings models tend to produce ("1,200", "yes", 3 for "3").
    pub fn cast_json(json: &serde_json::Value, kind: &FieldKind) -> Option<Value> {
        use serde_json::Value as J;
        match (kind, json) {
            (_, J::Null) => None,
            (FieldKind::String, J::String(s)) => Some(Value::String(s.clone())),
            (FieldKind::String, J::Number(n)) => Some(Value::String(n.to_string())),
            (FieldKind::String, J::Bool(b)) => Some(Value::String(b.to_string())),
            (FieldKind::Number, J::Number(n)) => n.as_f64().map(Value::Number),
            (FieldKind::Number, J::String(s)) => parse_number(s).map(Value::Number),
            (FieldKind::Boolean, J::Bool(b)) => Some(Value::Bool(*b)),
            (FieldKind::Boolean, J::String(s)) => parse_bool(s).map(Value::Bool),
            (FieldKind::Bytes, J::String(s)) => B64.decode(s).ok().map(Value::Bytes),
            (FieldKind::List(inner), J::Array(items)) => items
                .iter()
                .map(|i| Value::cast_json(i, inner))
                .collect::<Option<Vec<_>>>()
                .map(Value::List),
            _ => None,
        }
    }

    /// Text form used inside prompts and for string comparison.
    pub fn render(&self) -> String {
        match self {
            Value::Null => "null".into(),
            Value::String(s) => s.clone(),
            Value::Number(n) => format_number(*n),
            Value::Bool(b) => b.to_string(),
            Value::Bytes(b) => format!("<{} bytes>", b.len()),
            Value::List(items) => {
                let parts: Vec<String> = items.iter().map(Value::render).collect();
                format!("[{}]", parts.join(", "))
            }
        }
    }
}

pub(crate) fn format_number(n: f64) -> String {
    if n.fract() == 0.0 && n.abs() < 1e15 {
        format!("{}", n as i64)
    } else {
        format!("{n}")
    }
}

pub fn parse_number(s: &str) -> Option<f64> {
    let cleaned: String = s
        .trim()
        .trim_start_matches('$')
        .chars()
        .filter(|c| *c != ',' && *c != '_')
        .collect();
    cleaned.parse::<f64>().ok().filter(|n| n.is_finite())
}

pub fn parse_bool(s: &str) -> Option<bool> {
    let t = s
        .trim()
        .trim_matches(|c: char| c == '.' || c == '"' || c == '\'' || c == '`')
        .to_ascii_lowercase();
    match t.as_str() {
        "true" | "yes" | "y" | "1" => Some(true),
        "false" | "no" | "n" | "0" => Some(false),
        _ => None,
    }
}

impl From<Value> for serde_json::Value {
    fn from(v: Value) -> Self {
        use serde_json::Value as J;
        match v {
            Value::Null => J::Null,
            Value::String(s) => J::String(s),
            Value::Number(n) => serde_json::Number::from_f64(n)
                .map(J::Number)
                .unwrap_or(J::Null),
            Value::Bool(b) => J::Bool(b),
            Value::Bytes(b) => {
                let mut m = serde_json::Map::new();
                m.insert("$bytes".into(), J::String(B64.encode(b)));
                J::Object(m)
            }
            Value::List(items) => J::Array(items.into_iter().map(Into::into).collect()),
        }
    }
}

impl TryFrom<serde_json::Value> for Value {
    type Error = String;

    fn try_from(j: serde_json::Value) -> std::result::Result<Self, String> {
        use serde_json::Value as J;
        Ok(match j {
            J::Null => Value::Null,
            J::String(s) => Value::String(s),
            J::Number(n) => Value::Number(n.as_f64().ok_or("non-finite number")?),
            J::Bool(b) => Value::Bool(b),
            J::Array(items) => Value::List(
                items
                    .into_iter()
                    .map(Value::try_from)
                    .collect::<std::result::Result<_, _>>()?,
            ),
            J::Object(m) => match m.get("$bytes") {
                Some(J::String(s)) if m.len() == 1 => {
                    Value::Bytes(B64.decode(s).map_err(|e| e.to_string())?)
                }
                _ => return Err("objects are not field values".into()),
            },
        })
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageStep {
    pub op_id: String,
    pub config_id: String,
}

/// One data object. `source_id` and `source_index` identify the base object
/// it descends from and never change downstream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub schema: String,
    pub values: BTreeMap<String, Value>,
    pub source_id: String,
    pub source_index: usize,
    #[serde(default)]
    pub lineage: Vec<LineageStep>,
}

impl Record {
    pub fn new(schema: &str, source_id: &str, source_index: usize) -> Self {
        Record {
            schema: schema.to_string(),
            values: BTreeMap::new(),
            source_id: source_id.to_string(),
            source_index,
            lineage: Vec::new(),
        }
    }

    pub fn with(mut self, field: &str, value: Value) -> Self {
        self.values.insert(field.to_string(), value);
        self
    }

    pub fn get(&self, field: &str) -> Option<&Value> {
        self.values.get(field).filter(|v| !v.is_null())
    }

    /// Checks that every required field of the record's schema is present and
    /// kind-conformant, and that optional fields present have the right kind.
    pub fn validate(&self, registry: &SchemaRegistry) -> Result<()> {
        for f in registry.effective_fields(&self.schema)? {
            match self.values.get(&f.name) {
                None | Some(Value::Null) if f.required => {
                    return Err(Error::NonConformingRecord {
                        schema: self.schema.clone(),
                        reason: format!("required field `{}` is absent", f.name),
                    })
                }
                None | Some(Value::Null) => {}
                Some(v) if !v.conforms_to(&f.kind) => {
                    return Err(Error::NonConformingRecord {
                        schema: self.schema.clone(),
                        reason: format!("field `{}` is not a {}", f.name, f.kind),
                    })
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Labeled key-value text for the given fields, one per line.
    pub fn marshal(&self, fields: &[String]) -> String {
        let mut out = String::new();
        for name in fields {
            if let Some(v) = self.values.get(name) {
                out.push_str(name);
                out.push_str(": ");
                out.push_str(&v.render());
                out.push('\n');
            }
        }
        out
    }

    pub fn binary_payloads(&self, fields: &[String]) -> Vec<Vec<u8>> {
        let mut out = Vec::new();
        for name in fields {
            collect_bytes(self.values.get(name), &mut out);
        }
        out
    }
}

fn collect_bytes(v: Option<&Value>, out: &mut Vec<Vec<u8>>) {
    match v {
        Some(Value::Bytes(b)) => out.push(b.clone()),
        Some(Value::List(items)) => {
            for i in items {
                collect_bytes(Some(i), out);
            }
        }
        _ => {}
    }
}
