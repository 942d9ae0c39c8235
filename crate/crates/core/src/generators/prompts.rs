//! Prompt construction. Wording is pinned by `PROMPT_VERSION`; tests assert
//! on the exact text, so changing it means bumping the version.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logical::Cardinality;
use crate::physical::{ModelSpec, TokenBudget};
use crate::record::Record;
use crate::schema::FieldSpec;

use super::tokens::{count_tokens, reduce_input, truncate_tokens};

pub const PROMPT_VERSION: &str = "v1";

pub const CONVERT_SYSTEM: &str = "You are a data extraction assistant. Read the input record and \
compute the requested output fields. Answer with JSON only.";
pub const FILTER_SYSTEM: &str = "You are a data classification assistant. Decide whether the input \
record satisfies the condition. Answer with a single word: true or false.";
pub const SYNTH_SYSTEM: &str = "You write extraction rules. Given sample inputs and the expected \
value of a field, reply with JSON {\"pattern\": \"<regex>\"} where the regex has exactly one \
capture group that captures the value.";

pub const DEFAULT_MAX_OUTPUT_TOKENS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Convert,
    Filter,
    Synthesize,
}

/// What a request is asking, in structured form. Backends that answer from
/// tables (the mock) key on this; real backends ignore it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub kind: TaskKind,
    pub op_id: String,
    pub source_id: String,
    /// Target fields of a convert or synthesis request.
    #[serde(default)]
    pub fields: Vec<FieldSpec>,
    #[serde(default)]
    pub predicate: Option<String>,
    #[serde(default)]
    pub cardinality: Option<Cardinality>,
    /// (input text, expected value) pairs of a synthesis request.
    #[serde(default)]
    pub samples: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub model_id: String,
    pub system_text: String,
    pub user_text: String,
    #[serde(default)]
    pub image_payloads: Vec<Vec<u8>>,
    pub max_output_tokens: usize,
    pub meta: TaskMeta,
}

impl PromptRequest {
    pub fn prompt_tokens(&self) -> usize {
        count_tokens(&self.system_text) + count_tokens(&self.user_text)
    }
}

/// Prompt input block: the record's dependency fields as `name: value`
/// lines, reduced to the token budget.
pub fn input_block(record: &Record, depends_on: &[String], budget: TokenBudget) -> String {
    reduce_input(&record.marshal(depends_on), budget)
}

fn describe(fields: &[FieldSpec]) -> String {
    fields
        .iter()
        .map(|f| {
            let desc = if f.description.is_empty() {
                String::new()
            } else {
                format!(": {}", f.description)
            };
            format!("- {} ({}){desc}\n", f.name, f.kind)
        })
        .collect()
}

fn json_shape(fields: &[FieldSpec]) -> String {
    let keys: Vec<String> = fields.iter().map(|f| format!("\"{}\": ...", f.name)).collect();
    format!("{{{}}}", keys.join(", "))
}

fn wrap_input(input: &str) -> String {
    format!("Input record:\n{input}\n")
}

fn convert_request(
    record: &Record,
    input: String,
    targets: &[FieldSpec],
    cardinality: Cardinality,
    op_id: &str,
    payloads: Vec<Vec<u8>>,
) -> PromptRequest {
    let instruction = match (cardinality, targets.len()) {
        (Cardinality::OneToMany, _) => format!(
            "The input may describe several output objects. Answer with a JSON list of objects, \
each of the form {}.",
            json_shape(targets)
        ),
        (_, 1) => format!("Answer with one JSON object of the form {}.", json_shape(targets)),
        _ => format!(
            "Answer with one JSON object containing all fields together, of the form {}.",
            json_shape(targets)
        ),
    };
    PromptRequest {
        model_id: String::new(),
        system_text: CONVERT_SYSTEM.to_string(),
        user_text: format!(
            "{}Output fields:\n{}{instruction}\n",
            wrap_input(&input),
            describe(targets)
        ),
        image_payloads: payloads,
        max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
        meta: TaskMeta {
            kind: TaskKind::Convert,
            op_id: op_id.to_string(),
            source_id: record.source_id.clone(),
            fields: targets.to_vec(),
            predicate: None,
            cardinality: Some(cardinality),
            samples: Vec::new(),
        },
    }
}

/// One prompt requesting every target field together.
pub fn marshal_bonded_prompt(
    op_id: &str,
    record: &Record,
    depends_on: &[String],
    targets: &[FieldSpec],
    cardinality: Cardinality,
    budget: TokenBudget,
) -> PromptRequest {
    convert_request(
        record,
        input_block(record, depends_on, budget),
        targets,
        cardinality,
        op_id,
        record.binary_payloads(depends_on),
    )
}

/// One prompt per target field.
pub fn marshal_field_prompts(
    op_id: &str,
    record: &Record,
    depends_on: &[String],
    targets: &[FieldSpec],
    cardinality: Cardinality,
    budget: TokenBudget,
) -> Vec<PromptRequest> {
    let input = input_block(record, depends_on, budget);
    let payloads = record.binary_payloads(depends_on);
    targets
        .iter()
        .map(|t| {
            convert_request(
                record,
                input.clone(),
                std::slice::from_ref(t),
                cardinality,
                op_id,
                payloads.clone(),
            )
        })
        .collect()
}

pub fn marshal_filter_prompt(
    op_id: &str,
    record: &Record,
    depends_on: &[String],
    predicate: &str,
    budget: TokenBudget,
) -> PromptRequest {
    PromptRequest {
        model_id: String::new(),
        system_text: FILTER_SYSTEM.to_string(),
        user_text: format!(
            "{}Condition: {predicate}\nDoes the record satisfy the condition? Answer true or false.\n",
            wrap_input(&input_block(record, depends_on, budget))
        ),
        image_payloads: record.binary_payloads(depends_on),
        max_output_tokens: 4,
        meta: TaskMeta {
            kind: TaskKind::Filter,
            op_id: op_id.to_string(),
            source_id: record.source_id.clone(),
            fields: Vec::new(),
            predicate: Some(predicate.to_string()),
            cardinality: None,
            samples: Vec::new(),
        },
    }
}

pub fn marshal_synthesis_prompt(op_id: &str, field: &FieldSpec, samples: &[(String, String)]) -> PromptRequest {
    let mut user = format!(
        "Field: {} ({}){}\n",
        field.name,
        field.kind,
        if field.description.is_empty() {
            String::new()
        } else {
            format!(": {}", field.description)
        }
    );
    for (i, (input, value)) in samples.iter().enumerate() {
        user.push_str(&format!("Sample {}:\n{input}\nExpected value: {value}\n", i + 1));
    }
    PromptRequest {
        model_id: String::new(),
        system_text: SYNTH_SYSTEM.to_string(),
        user_text: user,
        image_payloads: Vec::new(),
        max_output_tokens: 128,
        meta: TaskMeta {
            kind: TaskKind::Synthesize,
            op_id: op_id.to_string(),
            source_id: String::new(),
            fields: vec![field.clone()],
            predicate: None,
            cardinality: None,
            samples: samples.to_vec(),
        },
    }
}

/// Binds the request to `model` and shrinks its input block until the
/// prompt fits the model's context. Fails if even an empty input overflows.
pub fn fit_to_model(mut req: PromptRequest, model: &ModelSpec) -> Result<PromptRequest> {
    req.model_id = model.model_id.clone();
    let limit = model.context_limit_tokens;
    let total = req.prompt_tokens();
    if total <= limit {
        return Ok(req);
    }
    let overflow = || Error::ContextOverflow {
        model: model.model_id.clone(),
        needed: total,
        limit,
    };
    let Some(start) = req.user_text.find("Input record:\n") else {
        return Err(overflow());
    };
    let body_start = start + "Input record:\n".len();
    let Some(rel_end) = req.user_text[body_start..].find("\nCondition: ").or_else(|| {
        req.user_text[body_start..].find("\nOutput fields:\n")
    }) else {
        return Err(overflow());
    };
    let body = &req.user_text[body_start..body_start + rel_end];
    let body_tokens = count_tokens(body);
    let fixed = total - body_tokens;
    if fixed >= limit {
        return Err(overflow());
    }
    let kept = truncate_tokens(body, limit - fixed);
    req.user_text = format!(
        "{}{}{}",
        &req.user_text[..body_start],
        kept,
        &req.user_text[body_start + rel_end..]
    );
    Ok(req)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physical::Tier;
    use crate::record::Value;
    use crate::schema::FieldKind;

    fn email() -> Record {
        Record::new("TextFile", "m1", 0).with(
            "contents",
            Value::String("From: a@b.c\nSubject: Re: raptor".into()),
        )
    }

    fn targets() -> Vec<FieldSpec> {
        vec![
            FieldSpec::new("sender", FieldKind::String, "The email address of the sender"),
            FieldSpec::new("subject", FieldKind::String, "The subject of the email"),
        ]
    }

    #[test]
    fn bonded_prompt_pinned() {
        assert_eq!(PROMPT_VERSION, "v1");
        let deps = vec!["contents".to_string()];
        let req = marshal_bonded_prompt("op01", &email(), &deps, &targets(), Cardinality::OneToOne, TokenBudget::FULL);
        assert_eq!(
            req.user_text,
            "Input record:\ncontents: From: a@b.c\nSubject: Re: raptor\n\nOutput fields:\n\
- sender (string): The email address of the sender\n\
- subject (string): The subject of the email\n\
Answer with one JSON object containing all fields together, of the form {\"sender\": ..., \"subject\": ...}.\n"
        );
        assert_eq!(req.meta.fields.len(), 2);
    }

    #[test]
    fn single_field_bonded_equals_per_field() {
        let deps = vec!["contents".to_string()];
        let one = &targets()[..1];
        let bonded = marshal_bonded_prompt("op01", &email(), &deps, one, Cardinality::OneToOne, TokenBudget::FULL);
        let per = marshal_field_prompts("op01", &email(), &deps, one, Cardinality::OneToOne, TokenBudget::FULL);
        assert_eq!(per.len(), 1);
        assert_eq!(bonded, per[0]);
    }

    #[test]
    fn one_to_many_asks_for_list() {
        let deps = vec!["contents".to_string()];
        let req = marshal_bonded_prompt("op01", &email(), &deps, &targets(), Cardinality::OneToMany, TokenBudget::FULL);
        assert!(req.user_text.contains("JSON list of objects"));
    }

    #[test]
    fn context_fitting() {
        let long: Vec<String> = (0..500).map(|i| format!("w{i}")).collect();
        let r = Record::new("TextFile", "x", 0).with("contents", Value::String(long.join(" ")));
        let deps = vec!["contents".to_string()];
        let req = marshal_filter_prompt("op01", &r, &deps, "is it long", TokenBudget::FULL);
        let mut m = ModelSpec::new("small", Tier::Cheap, 1.0, 1.0);
        m.context_limit_tokens = 100;
        let fitted = fit_to_model(req.clone(), &m).unwrap();
        assert_eq!(fitted.prompt_tokens(), 100);
        assert!(fitted.user_text.contains("Condition: is it long"));
        m.context_limit_tokens = 10;
        assert!(matches!(fit_to_model(req, &m), Err(Error::ContextOverflow { .. })));
    }
}
