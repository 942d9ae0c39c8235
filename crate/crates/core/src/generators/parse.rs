//! Pulling structured answers out of free-form model output.

use std::collections::BTreeMap;

use crate::logical::Cardinality;
use crate::record::{parse_bool, Value};
use crate::schema::FieldSpec;

pub type FieldMap = BTreeMap<String, Value>;

/// The first well-formed JSON object or array embedded in `text`.
pub fn first_json(text: &str) -> Option<serde_json::Value> {
    for (i, c) in text.char_indices() {
        if c != '{' && c != '[' {
            continue;
        }
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<serde_json::Value>();
        if let Some(Ok(v)) = stream.next() {
            if v.is_object() || v.is_array() {
                return Some(v);
            }
        }
    }
    None
}

fn object_to_fields(obj: &serde_json::Map<String, serde_json::Value>, targets: &[FieldSpec]) -> Option<FieldMap> {
    let mut out = FieldMap::new();
    for t in targets {
        match obj.get(&t.name).and_then(|v| Value::cast_json(v, &t.kind)) {
            Some(v) => {
                out.insert(t.name.clone(), v);
            }
            None if t.required => return None,
            None => {}
        }
    }
    Some(out)
}

/// Field maps from a model answer, or `None` when the answer is unusable
/// (no JSON, wrong shape, a required field missing or of the wrong kind).
pub fn parse_structured_response(
    text: &str,
    targets: &[FieldSpec],
    cardinality: Cardinality,
) -> Option<Vec<FieldMap>> {
    let json = first_json(text)?;
    let objects: Vec<&serde_json::Map<String, serde_json::Value>> = match (&json, cardinality) {
        (serde_json::Value::Object(o), _) => vec![o],
        (serde_json::Value::Array(items), Cardinality::OneToMany) => {
            items.iter().map(|i| i.as_object()).collect::<Option<_>>()?
        }
        (serde_json::Value::Array(items), Cardinality::OneToOne) if items.len() == 1 => {
            vec![items[0].as_object()?]
        }
        _ => return None,
    };
    objects.into_iter().map(|o| object_to_fields(o, targets)).collect()
}

/// Filter verdict. Anything that does not normalize to a boolean is false.
pub fn parse_verdict(text: &str) -> bool {
    let first = text.split_whitespace().next().unwrap_or("");
    parse_bool(first.trim_end_matches([',', '!', ':'])).unwrap_or(false)
}
