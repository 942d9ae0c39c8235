//! Logical plans: compilation from a pipeline description, dependency
//! validation, and enumeration of equivalent convert/filter orderings.

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::datasource::{DatasetHandle, DatasetRegistry};
use crate::error::{Error, Result};
use crate::fingerprint;
use crate::schema::{FieldSpec, Schema, SchemaRegistry};
use crate::udf::UdfRegistry;

/// Reorderings beyond this many are truncated.
pub const MAX_REORDERINGS: usize = 5_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Cardinality {
    #[default]
    #[serde(rename = "oneToOne")]
    OneToOne,
    #[serde(rename = "oneToMany")]
    OneToMany,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    Text(String),
    Udf(String),
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicate::Text(t) => f.write_str(t),
            Predicate::Udf(name) => write!(f, "<udf {name}>"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggFunc {
    Count,
    Sum(String),
    Avg(String),
    Min(String),
    Max(String),
}

impl AggFunc {
    pub fn output_field(&self) -> String {
        match self {
            AggFunc::Count => "count".into(),
            AggFunc::Sum(f) => format!("sum_{f}"),
            AggFunc::Avg(f) => format!("avg_{f}"),
            AggFunc::Min(f) => format!("min_{f}"),
            AggFunc::Max(f) => format!("max_{f}"),
        }
    }

    pub fn input_field(&self) -> Option<&str> {
        match self {
            AggFunc::Count => None,
            AggFunc::Sum(f) | AggFunc::Avg(f) | AggFunc::Min(f) | AggFunc::Max(f) => Some(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum OpKind {
    Scan {
        dataset_id: String,
        schema: String,
        fields: Vec<String>,
    },
    Convert {
        target_schema: String,
        cardinality: Cardinality,
        udf: Option<String>,
        desc: Option<String>,
        /// Fields this convert computes, fixed at compile time.
        produces: Vec<FieldSpec>,
    },
    Filter {
        predicate: Predicate,
    },
    Project {
        columns: Vec<String>,
    },
    GroupBy {
        group_fields: Vec<String>,
        aggregate: AggFunc,
    },
    Limit {
        n: usize,
    },
    Aggregate {
        function: AggFunc,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogicalOperator {
    pub op_id: String,
    pub kind: OpKind,
    /// Resolved dependencies. When the user gave none, this is every field
    /// available at the operator's declared position.
    pub depends_on: Vec<String>,
    pub explicit_deps: bool,
    /// Some dependency is bytes or a list of bytes, so a vision model is needed.
    #[serde(default)]
    pub needs_vision: bool,
}

impl LogicalOperator {
    pub fn is_reorderable(&self) -> bool {
        matches!(self.kind, OpKind::Convert { .. } | OpKind::Filter { .. })
    }

    pub fn produces(&self) -> &[FieldSpec] {
        match &self.kind {
            OpKind::Convert { produces, .. } => produces,
            _ => &[],
        }
    }

    /// Needs a model (or code synthesis) to run.
    pub fn requires_llm(&self) -> bool {
        match &self.kind {
            OpKind::Convert { udf, produces, .. } => udf.is_none() && !produces.is_empty(),
            OpKind::Filter { predicate } => matches!(predicate, Predicate::Text(_)),
            _ => false,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            OpKind::Scan { .. } => "scan",
            OpKind::Convert { .. } => "convert",
            OpKind::Filter { .. } => "filter",
            OpKind::Project { .. } => "project",
            OpKind::GroupBy { .. } => "groupby",
            OpKind::Limit { .. } => "limit",
            OpKind::Aggregate { .. } => "aggregate",
        }
    }

    pub fn label(&self) -> String {
        match &self.kind {
            OpKind::Scan { dataset_id, .. } => format!("scan({dataset_id})"),
            OpKind::Convert { target_schema, .. } => format!("convert({target_schema})"),
            OpKind::Filter { predicate } => format!("filter({predicate})"),
            OpKind::Project { columns } => format!("project({})", columns.join(",")),
            OpKind::GroupBy { group_fields, .. } => format!("groupby({})", group_fields.join(",")),
            OpKind::Limit { n } => format!("limit({n})"),
            OpKind::Aggregate { function } => format!("aggregate({})", function.output_field()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogicalPlan {
    pub operators: Vec<LogicalOperator>,
    pub fingerprint: String,
}

impl LogicalPlan {
    pub fn new(operators: Vec<LogicalOperator>) -> Self {
        let fingerprint = fingerprint::of(&operators);
        LogicalPlan {
            operators,
            fingerprint,
        }
    }

    pub fn op(&self, op_id: &str) -> Option<&LogicalOperator> {
        self.operators.iter().find(|o| o.op_id == op_id)
    }

    pub fn dataset_id(&self) -> Option<&str> {
        match self.operators.first().map(|o| &o.kind) {
            Some(OpKind::Scan { dataset_id, .. }) => Some(dataset_id),
            _ => None,
        }
    }

    pub fn op_ids(&self) -> Vec<&str> {
        self.operators.iter().map(|o| o.op_id.as_str()).collect()
    }

    /// Same operators in a different order.
    pub fn reordered(&self, order: &[usize]) -> LogicalPlan {
        LogicalPlan::new(order.iter().map(|&i| self.operators[i].clone()).collect())
    }
}

// ---------------------------------------------------------------------------
// Pipeline description

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

impl OneOrMany {
    pub fn into_vec(self) -> Vec<String> {
        match self {
            OneOrMany::One(s) => vec![s],
            OneOrMany::Many(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OpDescription {
    Convert {
        schema: String,
        #[serde(default)]
        depends_on: Option<OneOrMany>,
        #[serde(default)]
        cardinality: Cardinality,
        #[serde(default)]
        udf: Option<String>,
        #[serde(default)]
        desc: Option<String>,
    },
    Filter {
        #[serde(default)]
        predicate: Option<String>,
        #[serde(default)]
        udf: Option<String>,
        #[serde(default)]
        depends_on: Option<OneOrMany>,
    },
    Project {
        columns: Vec<String>,
    },
    #[serde(alias = "group_by")]
    GroupBy {
        fields: Vec<String>,
        aggregate: AggFunc,
    },
    Limit {
        n: usize,
    },
    Aggregate {
        function: AggFunc,
    },
}

/// A pipeline file: schemas to define, the source dataset, and the operator chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineDescription {
    #[serde(default)]
    pub schemas: Vec<Schema>,
    pub dataset: String,
    #[serde(default)]
    pub ops: Vec<OpDescription>,
}

impl PipelineDescription {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            Error::Pipeline(format!("line {} column {}: {e}", e.line(), e.column()))
        })
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Pipeline(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

/// Output of [`compile`]: the canonical plan plus the schema set it refers to.
#[derive(Debug, Clone)]
pub struct CompiledPipeline {
    pub plan: LogicalPlan,
    pub schemas: SchemaRegistry,
    pub dataset: DatasetHandle,
}

fn op_id(idx: usize) -> String {
    format!("op{idx:02}")
}

/// Compiles a description into one logical plan in user-declared order.
pub fn compile(
    desc: &PipelineDescription,
    base_schemas: &SchemaRegistry,
    datasets: &DatasetRegistry,
    udfs: &UdfRegistry,
) -> Result<CompiledPipeline> {
    let mut schemas = base_schemas.clone();
    for s in &desc.schemas {
        schemas.define(s.clone())?;
    }
    let dataset = datasets.get(&desc.dataset)?;
    let base = dataset.descriptor.base_schema.clone();
    let base_specs = schemas.effective_fields(&base)?;
    let base_fields: Vec<String> = base_specs.iter().map(|f| f.name.clone()).collect();
    let mut binary: HashSet<String> = base_specs
        .iter()
        .filter(|f| f.kind.is_binary())
        .map(|f| f.name.clone())
        .collect();

    let mut ops = vec![LogicalOperator {
        op_id: op_id(0),
        kind: OpKind::Scan {
            dataset_id: desc.dataset.clone(),
            schema: base,
            fields: base_fields.clone(),
        },
        depends_on: Vec::new(),
        explicit_deps: true,
        needs_vision: false,
    }];
    let mut available: Vec<String> = base_fields;

    for (i, d) in desc.ops.iter().enumerate() {
        let id = op_id(i + 1);
        let resolve = |deps: &Option<OneOrMany>, available: &[String]| match deps {
            Some(d) => (d.clone().into_vec(), true),
            None => (available.to_vec(), false),
        };
        let op = match d {
            OpDescription::Convert {
                schema,
                depends_on,
                cardinality,
                udf,
                desc,
            } => {
                if let Some(u) = udf {
                    if !udfs.has_convert(u) {
                        return Err(Error::UnknownUdf(u.clone()));
                    }
                }
                let produces: Vec<FieldSpec> = schemas
                    .effective_fields(schema)?
                    .into_iter()
                    .filter(|f| !available.contains(&f.name))
                    .collect();
                let (deps, explicit) = resolve(depends_on, &available);
                binary.extend(
                    produces
                        .iter()
                        .filter(|f| f.kind.is_binary())
                        .map(|f| f.name.clone()),
                );
                let op = LogicalOperator {
                    needs_vision: deps.iter().any(|d| binary.contains(d)),
                    op_id: id,
                    kind: OpKind::Convert {
                        target_schema: schema.clone(),
                        cardinality: *cardinality,
                        udf: udf.clone(),
                        desc: desc.clone(),
                        produces: produces.clone(),
                    },
                    depends_on: deps,
                    explicit_deps: explicit,
                };
                available.extend(produces.into_iter().map(|f| f.name));
                op
            }
            OpDescription::Filter {
                predicate,
                udf,
                depends_on,
            } => {
                let predicate = match (predicate, udf) {
                    (Some(p), None) if !p.trim().is_empty() => Predicate::Text(p.clone()),
                    (None, Some(u)) => {
                        if !udfs.has_filter(u) {
                            return Err(Error::UnknownUdf(u.clone()));
                        }
                        Predicate::Udf(u.clone())
                    }
                    _ => {
                        return Err(Error::Pipeline(format!(
                            "op {}: a filter needs exactly one of `predicate` or `udf`",
                            i + 1
                        )))
                    }
                };
                let (deps, explicit) = resolve(depends_on, &available);
                LogicalOperator {
                    needs_vision: matches!(predicate, Predicate::Text(_))
                        && deps.iter().any(|d| binary.contains(d)),
                    op_id: id,
                    kind: OpKind::Filter { predicate },
                    depends_on: deps,
                    explicit_deps: explicit,
                }
            }
            OpDescription::Project { columns } => {
                let op = LogicalOperator {
                    op_id: id,
                    kind: OpKind::Project {
                        columns: columns.clone(),
                    },
                    depends_on: columns.clone(),
                    explicit_deps: true,
                    needs_vision: false,
                };
                available = columns.clone();
                op
            }
            OpDescription::GroupBy { fields, aggregate } => {
                let mut deps = fields.clone();
                deps.extend(aggregate.input_field().map(str::to_string));
                let op = LogicalOperator {
                    op_id: id,
                    kind: OpKind::GroupBy {
                        group_fields: fields.clone(),
                        aggregate: aggregate.clone(),
                    },
                    depends_on: deps,
                    explicit_deps: true,
                    needs_vision: false,
                };
                available = fields.clone();
                available.push(aggregate.output_field());
                op
            }
            OpDescription::Limit { n } => LogicalOperator {
                op_id: id,
                kind: OpKind::Limit { n: *n },
                depends_on: Vec::new(),
                explicit_deps: true,
                needs_vision: false,
            },
            OpDescription::Aggregate { function } => {
                let op = LogicalOperator {
                    op_id: id,
                    kind: OpKind::Aggregate {
                        function: function.clone(),
                    },
                    depends_on: function.input_field().map(str::to_string).into_iter().collect(),
                    explicit_deps: true,
                    needs_vision: false,
                };
                available = vec![function.output_field()];
                op
            }
        };
        ops.push(op);
    }

    let plan = LogicalPlan::new(ops);
    let violations = validate_dependencies(&plan);
    if !violations.is_empty() {
        let msg: Vec<String> = violations.iter().map(ToString::to_string).collect();
        return Err(Error::Dependency(msg.join("; ")));
    }
    Ok(CompiledPipeline {
        plan,
        schemas,
        dataset,
    })
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub op_id: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.op_id, self.message)
    }
}

/// Empty iff the scan is unique and first and every operator's dependencies
/// are available at its position.
pub fn validate_dependencies(plan: &LogicalPlan) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut available: BTreeSet<String> = BTreeSet::new();
    for (pos, op) in plan.operators.iter().enumerate() {
        let violation = |msg: String| Violation {
            op_id: op.op_id.clone(),
            message: msg,
        };
        if let OpKind::Scan { fields, .. } = &op.kind {
            if pos != 0 {
                out.push(violation(format!("scan at position {pos}, must be first")));
            }
            available.extend(fields.iter().cloned());
            continue;
        }
        if pos == 0 {
            out.push(violation("plan does not start with a scan".into()));
        }
        let missing: Vec<&str> = op
            .depends_on
            .iter()
            .filter(|d| !available.contains(*d))
            .map(String::as_str)
            .collect();
        if !missing.is_empty() {
            out.push(violation(format!(
                "depends on unavailable field(s) {}",
                missing.join(", ")
            )));
        }
        match &op.kind {
            OpKind::Convert { produces, .. } => {
                available.extend(produces.iter().map(|f| f.name.clone()))
            }
            OpKind::Project { columns } => available = columns.iter().cloned().collect(),
            OpKind::GroupBy {
                group_fields,
                aggregate,
            } => {
                available = group_fields.iter().cloned().collect();
                available.insert(aggregate.output_field());
            }
            OpKind::Aggregate { function } => {
                available = [function.output_field()].into_iter().collect();
            }
            _ => {}
        }
    }
    if plan.operators.is_empty() {
        out.push(Violation {
            op_id: String::new(),
            message: "empty plan".into(),
        });
    }
    out
}

// ---------------------------------------------------------------------------
// Reordering

#[derive(Debug, Clone)]
pub struct Reorderings {
    pub plans: Vec<LogicalPlan>,
    pub truncated: bool,
}

/// Predecessor sets: `preds[j]` holds every operator index that must run
/// before `j`. The scan precedes everything; non-reorderable operators are
/// barriers; a convert precedes any operator depending on a field it produces.
pub fn precedence(plan: &LogicalPlan) -> Vec<BTreeSet<usize>> {
    let ops = &plan.operators;
    let n = ops.len();
    let mut preds = vec![BTreeSet::new(); n];
    for j in 0..n {
        for i in 0..n {
            if i == j {
                continue;
            }
            let (a, b) = (&ops[i], &ops[j]);
            let must = if !a.is_reorderable() || !b.is_reorderable() {
                // barriers (and the scan) keep their relative position
                i < j
            } else {
                let produced: HashSet<&str> =
                    a.produces().iter().map(|f| f.name.as_str()).collect();
                b.depends_on.iter().any(|d| produced.contains(d.as_str()))
            };
            if must {
                preds[j].insert(i);
            }
        }
    }
    preds
}

/// Every dependency-respecting ordering of the plan's converts and filters,
/// generated depth-first choosing the lexicographically smallest ready
/// `op_id` first. Capped at [`MAX_REORDERINGS`]; the input plan is always a
/// member.
pub fn enumerate_reorderings(plan: &LogicalPlan) -> Reorderings {
    enumerate_reorderings_capped(plan, MAX_REORDERINGS)
}

pub fn enumerate_reorderings_capped(plan: &LogicalPlan, cap: usize) -> Reorderings {
    let preds = precedence(plan);
    let n = plan.operators.len();
    let mut by_id: Vec<usize> = (0..n).collect();
    by_id.sort_by(|&a, &b| plan.operators[a].op_id.cmp(&plan.operators[b].op_id));

    let mut orders: Vec<Vec<usize>> = Vec::new();
    let mut truncated = false;
    let mut current = Vec::with_capacity(n);
    let mut placed = vec![false; n];
    extensions(
        &preds,
        &by_id,
        &mut placed,
        &mut current,
        &mut orders,
        cap.max(1),
        &mut truncated,
    );

    let mut plans: Vec<LogicalPlan> = orders.iter().map(|o| plan.reordered(o)).collect();
    if !plans.iter().any(|p| p.fingerprint == plan.fingerprint) {
        // only reachable when truncated
        plans.pop();
        plans.push(plan.clone());
    }
    Reorderings { plans, truncated }
}

fn extensions(
    preds: &[BTreeSet<usize>],
    by_id: &[usize],
    placed: &mut [bool],
    current: &mut Vec<usize>,
    out: &mut Vec<Vec<usize>>,
    cap: usize,
    truncated: &mut bool,
) {
    if current.len() == preds.len() {
        if out.len() >= cap {
            *truncated = true;
        } else {
            out.push(current.clone());
        }
        return;
    }
    for &i in by_id {
        if *truncated {
            return;
        }
        if placed[i] || !preds[i].iter().all(|&p| placed[p]) {
            continue;
        }
        placed[i] = true;
        current.push(i);
        extensions(preds, by_id, placed, current, out, cap, truncated);
        current.pop();
        placed[i] = false;
    }
}
