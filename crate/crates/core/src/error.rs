use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across schema handling, planning, estimation and execution.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema `{0}` is not defined")]
    UnknownSchema(String),
    #[error("schema `{0}` is already defined")]
    DuplicateSchema(String),
    #[error("schema `{schema}`: duplicate field `{field}`")]
    DuplicateField { schema: String, field: String },
    #[error("schema `{schema}`: field `{field}` redeclared as {found}, parent declares {expected}")]
    KindConflict {
        schema: String,
        field: String,
        expected: String,
        found: String,
    },
    #[error("schema inheritance cycle through `{0}`")]
    InheritanceCycle(String),
    #[error("invalid field spec: {0}")]
    InvalidField(String),
    #[error("record does not conform to `{schema}`: {reason}")]
    NonConformingRecord { schema: String, reason: String },

    #[error("dataset `{0}` is already registered")]
    DuplicateDataset(String),
    #[error("dataset `{0}` is not registered")]
    UnknownDataset(String),
    #[error("dataset location {} does not exist", .0.display())]
    MissingLocation(PathBuf),
    #[error("registry file: {0}")]
    Registry(String),

    #[error("unknown UDF `{0}`")]
    UnknownUdf(String),
    #[error("pipeline description: {0}")]
    Pipeline(String),
    #[error("dependency violation: {0}")]
    Dependency(String),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("model registry: {0}")]
    Models(String),
    #[error("no model of tier `{0}` configured")]
    MissingTier(String),
    #[error("parameter space is empty: {0}")]
    EmptyParamSpace(String),

    #[error("no statistics for operator `{0}`")]
    MissingStats(String),
    #[error("invalid statistic for `{op}`: {reason}")]
    InvalidStats { op: String, reason: String },
    #[error("champion trace missing for operator `{0}`")]
    MissingChampion(String),
    #[error("empty candidate set")]
    EmptyCandidates,
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("invalid sample config: {0}")]
    InvalidSampleConfig(String),

    #[error("prompt for `{model}` needs {needed} tokens, context limit is {limit}")]
    ContextOverflow {
        model: String,
        needed: usize,
        limit: usize,
    },
    #[error("backend error: {0}")]
    Backend(String),
    #[error("code synthesis: {0}")]
    Synthesis(String),
    #[error("execution aborted: {0}")]
    Execution(String),

    #[error("cache: {0}")]
    Cache(String),
    #[error("stats file: {0}")]
    StatsFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
