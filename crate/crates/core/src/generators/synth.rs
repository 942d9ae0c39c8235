//! Code synthesis: per-field extraction rules learned from champion-labeled
//! samples and applied without any model calls.

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::cost::field_score;
use crate::error::{Error, Result};
use crate::physical::ModelSpec;
use crate::record::{Record, Value};
use crate::schema::{FieldKind, FieldSpec};

use super::backend::{Backend, GenerationResult};
use super::parse::{first_json, FieldMap};
use super::prompts::{fit_to_model, marshal_synthesis_prompt};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionRule {
    pub field: FieldSpec,
    /// `None` when no usable pattern was produced; the field is then always absent.
    pub pattern: Option<String>,
    /// Fraction of synthesis samples on which the rule reproduces the champion.
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "ConverterSpec", into = "ConverterSpec")]
pub struct SynthesizedConverter {
    pub op_id: String,
    pub depends_on: Vec<String>,
    pub rules: Vec<ExtractionRule>,
    compiled: Vec<Option<Regex>>,
}

#[derive(Serialize, Deserialize)]
struct ConverterSpec {
    op_id: String,
    depends_on: Vec<String>,
    rules: Vec<ExtractionRule>,
}

impl TryFrom<ConverterSpec> for SynthesizedConverter {
    type Error = Error;
    fn try_from(s: ConverterSpec) -> Result<Self> {
        SynthesizedConverter::new(&s.op_id, s.depends_on, s.rules)
    }
}

impl From<SynthesizedConverter> for ConverterSpec {
    fn from(c: SynthesizedConverter) -> Self {
        ConverterSpec {
            op_id: c.op_id,
            depends_on: c.depends_on,
            rules: c.rules,
        }
    }
}

impl PartialEq for SynthesizedConverter {
    fn eq(&self, other: &Self) -> bool {
        self.op_id == other.op_id && self.depends_on == other.depends_on && self.rules == other.rules
    }
}

/// Compiles a pattern, accepting only regexes with exactly one capture group.
pub fn compile_rule(pattern: &str) -> Option<Regex> {
    Regex::new(pattern).ok().filter(|r| r.captures_len() == 2)
}

impl SynthesizedConverter {
    pub fn new(op_id: &str, depends_on: Vec<String>, rules: Vec<ExtractionRule>) -> Result<Self> {
        let compiled = rules
            .iter()
            .map(|r| match &r.pattern {
                None => Ok(None),
                Some(p) => compile_rule(p)
                    .map(Some)
                    .ok_or_else(|| Error::Synthesis(format!("invalid rule for `{}`: {p}", r.field.name))),
            })
            .collect::<Result<_>>()?;
        Ok(SynthesizedConverter {
            op_id: op_id.to_string(),
            depends_on,
            rules,
            compiled,
        })
    }

    /// Mean validation score over fields.
    pub fn score(&self) -> f64 {
        if self.rules.is_empty() {
            return 0.0;
        }
        self.rules.iter().map(|r| r.score).sum::<f64>() / self.rules.len() as f64
    }

    fn extract(&self, i: usize, input: &str) -> Option<Value> {
        let re = self.compiled[i].as_ref()?;
        let raw = re.captures(input)?.get(1)?.as_str().trim();
        if raw.is_empty() {
            return None;
        }
        Value::cast_json(&serde_json::Value::String(raw.to_string()), &self.rules[i].field.kind)
    }
}

pub fn synthesis_admissible(targets: &[FieldSpec]) -> bool {
    !targets.is_empty()
        && targets
            .iter()
            .all(|f| matches!(f.kind, FieldKind::String | FieldKind::Number))
}

/// Asks `model` for one extraction pattern per target field and scores each
/// against the champion outputs of the samples.
pub fn synthesize_converter(
    op_id: &str,
    samples: &[(Record, FieldMap)],
    depends_on: &[String],
    targets: &[FieldSpec],
    model: &ModelSpec,
    backend: &dyn Backend,
) -> Result<(SynthesizedConverter, Vec<GenerationResult>)> {
    if samples.len() < 2 {
        return Err(Error::Synthesis(format!(
            "{op_id}: at least 2 samples are needed, got {}",
            samples.len()
        )));
    }
    if !synthesis_admissible(targets) {
        return Err(Error::Synthesis(format!("{op_id}: only string and number fields can be synthesized")));
    }
    let inputs: Vec<String> = samples.iter().map(|(r, _)| r.marshal(depends_on)).collect();
    let mut rules = Vec::new();
    let mut results = Vec::new();
    for field in targets {
        let shown: Vec<(String, String)> = samples
            .iter()
            .zip(&inputs)
            .filter_map(|((_, out), input)| Some((input.clone(), out.get(&field.name)?.render())))
            .collect();
        let req = fit_to_model(marshal_synthesis_prompt(op_id, field, &shown), model)?;
        let pattern = match backend.generate(model, &req) {
            Ok(res) => {
                let p = first_json(&res.text)
                    .and_then(|j| j.get("pattern")?.as_str().map(str::to_string))
                    .filter(|p| compile_rule(p).is_some());
                results.push(res);
                p
            }
            Err(e) => {
                log::warn!("{op_id}: synthesis call for `{}` failed: {e}", field.name);
                None
            }
        };
        rules.push(ExtractionRule {
            field: field.clone(),
            pattern,
            score: 0.0,
        });
    }
    let mut conv = SynthesizedConverter::new(op_id, depends_on.to_vec(), rules)?;
    for i in 0..conv.rules.len() {
        let spec = conv.rules[i].field.clone();
        let hits: f64 = samples
            .iter()
            .zip(&inputs)
            .map(|((_, out), input)| {
                let got = conv.extract(i, input);
                f64::from(u8::from(field_score(&spec, got.as_ref(), out.get(&spec.name)) == 1.0))
            })
            .sum();
        conv.rules[i].score = hits / samples.len() as f64;
    }
    Ok((conv, results))
}

/// Deterministic rule application. `None` drops the record: a required
/// field could not be extracted.
pub fn apply_converter(conv: &SynthesizedConverter, record: &Record) -> Option<FieldMap> {
    let input = record.marshal(&conv.depends_on);
    let mut out = FieldMap::new();
    for (i, rule) in conv.rules.iter().enumerate() {
        match conv.extract(i, &input) {
            Some(v) => {
                out.insert(rule.field.name.clone(), v);
            }
            None if rule.field.required => return None,
            None => {}
        }
    }
    Some(out)
}
