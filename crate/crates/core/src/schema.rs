//! Typed schemas with single inheritance.
//!
//! A schema's effective field set is its parent's effective fields followed by
//! its own declarations. Convert operators compute exactly the fields of the
//! target schema that the input does not already carry ([`missing_fields`]).

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FILE: &str = "File";
pub const TEXT_FILE: &str = "TextFile";
pub const FILE_GROUP: &str = "FileGroup";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FieldKind {
    String,
    Number,
    Boolean,
    Bytes,
    List(Box<FieldKind>),
}

impl FieldKind {
    /// True for bytes and lists whose elements are (eventually) bytes.
    pub fn is_binary(&self) -> bool {
        match self {
            FieldKind::Bytes => true,
            FieldKind::List(inner) => inner.is_binary(),
            _ => false,
        }
    }
}

impl fmt::Display for FieldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldKind::String => f.write_str("string"),
            FieldKind::Number => f.write_str("number"),
            FieldKind::Boolean => f.write_str("boolean"),
            FieldKind::Bytes => f.write_str("bytes"),
            FieldKind::List(inner) => write!(f, "list<{inner}>"),
        }
    }
}

impl FromStr for FieldKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "string" | "str" => Ok(FieldKind::String),
            "number" | "numeric" => Ok(FieldKind::Number),
            "boolean" | "bool" => Ok(FieldKind::Boolean),
            "bytes" => Ok(FieldKind::Bytes),
            _ => {
                let inner = s
                    .strip_prefix("list<")
                    .and_then(|rest| rest.strip_suffix('>'))
                    .ok_or_else(|| Error::InvalidField(format!("unknown field kind `{s}`")))?;
                Ok(FieldKind::List(Box::new(inner.parse()?)))
            }
        }
    }
}

impl TryFrom<String> for FieldKind {
    type Error = Error;
    fn try_from(value: String) -> Result<Self> {
        value.parse()
    }
}

impl From<FieldKind> for String {
    fn from(kind: FieldKind) -> String {
        kind.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    #[serde(alias = "desc")]
    pub description: String,
    #[serde(default = "default_required")]
    pub required: bool,
    #[serde(default = "default_kind")]
    pub kind: FieldKind,
}

fn default_required() -> bool {
    true
}

fn default_kind() -> FieldKind {
    FieldKind::String
}

impl FieldSpec {
    pub fn new(name: &str, kind: FieldKind, description: &str) -> Self {
        FieldSpec {
            name: name.to_string(),
            description: description.to_string(),
            required: true,
            kind,
        }
    }

    pub fn optional(mut self) -> Self {
        self.required = false;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::InvalidField("field name is empty".into()));
        }
        if !self
            .name
            .chars()
            .all(|c| c.is_alphanumeric() || c == '_')
        {
            return Err(Error::InvalidField(format!(
                "field name `{}` is not an identifier",
                self.name
            )));
        }
        if self.description.trim().is_empty() {
            return Err(Error::InvalidField(format!(
                "field `{}` has an empty description",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub name: String,
    #[serde(default)]
    pub parent: Option<String>,
    #[serde(default)]
    pub fields: Vec<FieldSpec>,
    #[serde(default)]
    pub doc: String,
}

/// All known schemas, keyed by name. Ships with the built-in file schemas.
#[derive(Debug, Clone)]
pub struct SchemaRegistry {
    schemas: BTreeMap<String, Schema>,
}

impl Default for SchemaRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl SchemaRegistry {
    pub fn new() -> Self {
        let mut reg = SchemaRegistry {
            schemas: BTreeMap::new(),
        };
        reg.define_schema(
            FILE,
            None,
            vec![
                FieldSpec::new("filename", FieldKind::String, "The name of the file"),
                FieldSpec::new("contents", FieldKind::String, "The contents of the file"),
            ],
            "A file on disk",
        )
        .expect("builtin");
        reg.define_schema(TEXT_FILE, Some(FILE), vec![], "A text file")
            .expect("builtin");
        reg.define_schema(
            FILE_GROUP,
            None,
            vec![
                FieldSpec::new("listing", FieldKind::String, "The name of the file group"),
                FieldSpec::new(
                    "text_content",
                    FieldKind::String,
                    "The content of the group's text description",
                ),
                FieldSpec::new(
                    "image_contents",
                    FieldKind::List(Box::new(FieldKind::Bytes)),
                    "A list of the image contents",
                ),
            ],
            "A directory holding one text file and a set of images",
        )
        .expect("builtin");
        reg
    }

    pub fn define_schema(
        &mut self,
        name: &str,
        parent: Option<&str>,
        fields: Vec<FieldSpec>,
        doc: &str,
    ) -> Result<&Schema> {
        if name.trim().is_empty() {
            return Err(Error::InvalidField("schema name is empty".into()));
        }
        if self.schemas.contains_key(name) {
            return Err(Error::DuplicateSchema(name.to_string()));
        }
        if parent == Some(name) {
            return Err(Error::InheritanceCycle(name.to_string()));
        }
        let mut seen = HashSet::new();
        for f in &fields {
            f.validate()?;
            if !seen.insert(f.name.as_str()) {
                return Err(Error::DuplicateField {
                    schema: name.to_string(),
                    field: f.name.clone(),
                });
            }
        }
        if let Some(p) = parent {
            let inherited = self.effective_fields(p)?;
            for f in &fields {
                if let Some(pf) = inherited.iter().find(|pf| pf.name == f.name) {
                    if pf.kind != f.kind {
                        return Err(Error::KindConflict {
                            schema: name.to_string(),
                            field: f.name.clone(),
                            expected: pf.kind.to_string(),
                            found: f.kind.to_string(),
                        });
                    }
                }
            }
        }
        let schema = Schema {
            name: name.to_string(),
            parent: parent.map(str::to_string),
            fields,
            doc: doc.to_string(),
        };
        self.schemas.insert(name.to_string(), schema);
        Ok(&self.schemas[name])
    }

    pub fn define(&mut self, schema: Schema) -> Result<&Schema> {
        let Schema {
            name,
            parent,
            fields,
            doc,
        } = schema;
        self.define_schema(&name, parent.as_deref(), fields, &doc)?;
        Ok(&self.schemas[&name])
    }

    pub fn get(&self, name: &str) -> Result<&Schema> {
        self.schemas
            .get(name)
            .ok_or_else(|| Error::UnknownSchema(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.schemas.contains_key(name)
    }

    /// Parent fields first (in their order), then own fields. A redeclared
    /// parent field keeps the parent's position and takes the child's spec.
    pub fn effective_fields(&self, name: &str) -> Result<Vec<FieldSpec>> {
        let mut chain = Vec::new();
        let mut visited = HashSet::new();
        let mut cur = Some(name.to_string());
        while let Some(n) = cur {
            if !visited.insert(n.clone()) {
                return Err(Error::InheritanceCycle(n));
            }
            let s = self.get(&n)?;
            chain.push(s);
            cur = s.parent.clone();
        }
        let mut out: Vec<FieldSpec> = Vec::new();
        for s in chain.into_iter().rev() {
            for f in &s.fields {
                match out.iter_mut().find(|o| o.name == f.name) {
                    Some(slot) => *slot = f.clone(),
                    None => out.push(f.clone()),
                }
            }
        }
        Ok(out)
    }

    pub fn field(&self, schema: &str, field: &str) -> Result<Option<FieldSpec>> {
        Ok(self
            .effective_fields(schema)?
            .into_iter()
            .find(|f| f.name == field))
    }

    /// True if `name` is `ancestor` or inherits from it.
    pub fn is_subschema(&self, name: &str, ancestor: &str) -> bool {
        let mut cur = self.schemas.get(name);
        while let Some(s) = cur {
            if s.name == ancestor {
                return true;
            }
            cur = s.parent.as_ref().and_then(|p| self.schemas.get(p));
        }
        false
    }

    pub fn iter(&self) -> impl Iterator<Item = &Schema> {
        self.schemas.values()
    }
}

/// Fields of `output` absent (by name) from `input`, in `output` declaration order.
pub fn missing_fields(
    registry: &SchemaRegistry,
    input: &str,
    output: &str,
) -> Result<Vec<FieldSpec>> {
    let have: HashSet<String> = registry
        .effective_fields(input)?
        .into_iter()
        .map(|f| f.name)
        .collect();
    Ok(registry
        .effective_fields(output)?
        .into_iter()
        .filter(|f| !have.contains(&f.name))
        .collect())
}
