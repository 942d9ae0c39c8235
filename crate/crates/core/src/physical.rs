//! Physical plans: logical plans bound to a (strategy, model, token budget)
//! choice per operator, plus sentinel generation and naive elimination.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost::StatsTable;
use crate::error::{Error, Result};
use crate::fingerprint;
use crate::logical::{Cardinality, LogicalOperator, LogicalPlan, OpKind, Predicate};
use crate::schema::FieldKind;

pub const DEFAULT_BUDGETS: [f64; 4] = [0.1, 0.5, 0.9, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Cheap,
    Mid,
    Champion,
    Vision,
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Cheap => "cheap",
            Tier::Mid => "mid",
            Tier::Champion => "champion",
            Tier::Vision => "vision",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub model_id: String,
    pub tier: Tier,
    pub usd_per_million_input_tokens: f64,
    pub usd_per_million_output_tokens: f64,
    pub context_limit_tokens: usize,
    #[serde(default)]
    pub backend: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    /// For vision models: the text tier whose sentinel uses this model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairs_with: Option<Tier>,
}

impl ModelSpec {
    pub fn new(model_id: &str, tier: Tier, usd_in: f64, usd_out: f64) -> Self {
        ModelSpec {
            model_id: model_id.to_string(),
            tier,
            usd_per_million_input_tokens: usd_in,
            usd_per_million_output_tokens: usd_out,
            context_limit_tokens: 128_000,
            backend: BackendKind::Mock,
            endpoint: None,
            pairs_with: None,
        }
    }

    pub fn cost(&self, input_tokens: u64, output_tokens: u64) -> f64 {
        input_tokens as f64 * self.usd_per_million_input_tokens / 1e6
            + output_tokens as f64 * self.usd_per_million_output_tokens / 1e6
    }

    pub fn is_vision(&self) -> bool {
        self.tier == Tier::Vision
    }

    /// `Model.GPT_3_5`-style name used in plan listings.
    pub fn listing_name(&self) -> String {
        let mut s = String::from("Model.");
        for c in self.model_id.chars() {
            s.push(if c.is_ascii_alphanumeric() {
                c.to_ascii_uppercase()
            } else {
                '_'
            });
        }
        s
    }
}

// ModelSpec holds floats; identity is the model id.
impl Eq for ModelSpec {}
impl Hash for ModelSpec {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.model_id.hash(state);
    }
}

/// The configured models. Loaded from TOML with one `[[model]]` table per entry.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelRegistry {
    #[serde(rename = "model")]
    pub models: Vec<ModelSpec>,
}

impl ModelRegistry {
    pub fn new(models: Vec<ModelSpec>) -> Result<Self> {
        let reg = ModelRegistry { models };
        reg.validate()?;
        Ok(reg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let reg: ModelRegistry = toml::from_str(text).map_err(|e| Error::Models(e.to_string()))?;
        reg.validate()?;
        Ok(reg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Models(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for m in &self.models {
            if !ids.insert(&m.model_id) {
                return Err(Error::Models(format!("duplicate model `{}`", m.model_id)));
            }
            let prices = [m.usd_per_million_input_tokens, m.usd_per_million_output_tokens];
            if prices.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::Models(format!("`{}` has a negative price", m.model_id)));
            }
            if m.context_limit_tokens == 0 {
                return Err(Error::Models(format!("`{}` has a zero context limit", m.model_id)));
            }
            if m.backend == BackendKind::Http && m.endpoint.is_none() {
                return Err(Error::Models(format!("http model `{}` has no endpoint", m.model_id)));
            }
        }
        let champions = self.models.iter().filter(|m| m.tier == Tier::Champion).count();
        if champions != 1 {
            return Err(Error::Models(format!(
                "exactly one champion model must be configured, found {champions}"
            )));
        }
        Ok(())
    }

    pub fn get(&self, model_id: &str) -> Option<&ModelSpec> {
        self.models.iter().find(|m| m.model_id == model_id)
    }

    /// The first model (by id) of the tier.
    pub fn by_tier(&self, tier: Tier) -> Option<&ModelSpec> {
        self.models
            .iter()
            .filter(|m| m.tier == tier)
            .min_by(|a, b| a.model_id.cmp(&b.model_id))
    }

    pub fn champion(&self) -> Result<&ModelSpec> {
        self.by_tier(Tier::Champion)
            .ok_or_else(|| Error::MissingTier(Tier::Champion.to_string()))
    }

    /// Vision model paired with `tier`, else the first vision model.
    pub fn vision_for(&self, tier: Tier) -> Option<&ModelSpec> {
        let mut vision: Vec<&ModelSpec> = self.models.iter().filter(|m| m.is_vision()).collect();
        vision.sort_by(|a, b| a.model_id.cmp(&b.model_id));
        vision
            .iter()
            .find(|m| m.pairs_with == Some(tier))
            .or_else(|| vision.first())
            .copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Hardcoded,
    Udf,
    LlmBondedWithFallback,
    LlmPerField,
    CodeSynth,
}

impl Strategy {
    pub fn is_llm(self) -> bool {
        matches!(self, Strategy::LlmBondedWithFallback | Strategy::LlmPerField)
    }

    pub fn listing_name(self) -> &'static str {
        match self {
            Strategy::Hardcoded => "QueryStrategy.HARDCODED",
            Strategy::Udf => "QueryStrategy.UDF",
            Strategy::LlmBondedWithFallback => "QueryStrategy.BONDED_WITH_FALLBACK",
            Strategy::LlmPerField => "QueryStrategy.PER_FIELD",
            Strategy::CodeSynth => "QueryStrategy.CODE_GEN",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Hardcoded => "hardcoded",
            Strategy::Udf => "udf",
            Strategy::LlmBondedWithFallback => "llm_bonded_with_fallback",
            Strategy::LlmPerField => "llm_per_field",
            Strategy::CodeSynth => "code_synth",
        })
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "hardcoded" => Strategy::Hardcoded,
            "udf" => Strategy::Udf,
            "llm_bonded_with_fallback" | "bonded" => Strategy::LlmBondedWithFallback,
            "llm_per_field" | "per_field" => Strategy::LlmPerField,
            "code_synth" => Strategy::CodeSynth,
            other => return Err(Error::EmptyParamSpace(format!("unknown strategy `{other}`"))),
        })
    }
}

/// Fraction of an operator's input tokens kept, in (0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct TokenBudget(f64);

impl TokenBudget {
    pub const FULL: TokenBudget = TokenBudget(1.0);

    pub fn new(fraction: f64) -> Result<Self> {
        if fraction.is_finite() && fraction > 0.0 && fraction <= 1.0 {
            Ok(TokenBudget(fraction))
        } else {
            Err(Error::InvalidPlan(format!("token budget {fraction} outside (0, 1]")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }

    pub fn is_full(self) -> bool {
        self.0 == 1.0
    }
}

impl TryFrom<f64> for TokenBudget {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        TokenBudget::new(v)
    }
}

impl From<TokenBudget> for f64 {
    fn from(b: TokenBudget) -> f64 {
        b.0
    }
}

impl Eq for TokenBudget {}
impl Hash for TokenBudget {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.0.to_bits().hash(state);
    }
}
impl PartialOrd for TokenBudget {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for TokenBudget {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl fmt::Display for TokenBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PhysicalOpConfig {
    pub logical_op_id: String,
    pub strategy: Strategy,
    pub model: Option<ModelSpec>,
    pub token_budget: TokenBudget,
}

impl PhysicalOpConfig {
    pub fn local(op_id: &str, strategy: Strategy) -> Self {
        PhysicalOpConfig {
            logical_op_id: op_id.to_string(),
            strategy,
            model: None,
            token_budget: TokenBudget::FULL,
        }
    }

    pub fn model_id(&self) -> Option<&str> {
        self.model.as_ref().map(|m| m.model_id.as_str())
    }

    pub fn config_id(&self) -> String {
        format!(
            "{}:{}:{}",
            self.strategy,
            self.model_id().unwrap_or("-"),
            self.token_budget
        )
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        match self.strategy {
            Strategy::Hardcoded | Strategy::Udf => {
                if self.model.is_some() || !self.token_budget.is_full() {
                    return Err(format!(
                        "{}: {} takes no model and a full budget",
                        self.logical_op_id, self.strategy
                    ));
                }
            }
            Strategy::LlmBondedWithFallback | Strategy::LlmPerField => {
                if self.model.is_none() {
                    return Err(format!("{}: LLM strategy without a model", self.logical_op_id));
                }
            }
            Strategy::CodeSynth => {
                if self.model.is_none() || !self.token_budget.is_full() {
                    return Err(format!(
                        "{}: code synthesis needs a model and a full budget",
                        self.logical_op_id
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicalPlan {
    pub logical: LogicalPlan,
    pub configs: Vec<PhysicalOpConfig>,
    pub fingerprint: String,
}

impl PhysicalPlan {
    pub fn new(logical: LogicalPlan, configs: Vec<PhysicalOpConfig>) -> Self {
        let fingerprint = fingerprint::of(&(&logical.fingerprint, &configs));
        PhysicalPlan {
            logical,
            configs,
            fingerprint,
        }
    }

    pub fn steps(&self) -> impl Iterator<Item = (&LogicalOperator, &PhysicalOpConfig)> {
        self.logical.operators.iter().zip(&self.configs)
    }

    pub fn config_for(&self, op_id: &str) -> Option<&PhysicalOpConfig> {
        self.configs.iter().find(|c| c.logical_op_id == op_id)
    }

    /// Cache fingerprint of the first `len` operators with their configs.
    pub fn prefix_fingerprint(&self, len: usize, backend_id: &str) -> String {
        let ops = &self.logical.operators[..len];
        let cfgs = &self.configs[..len];
        fingerprint::of(&("prefix", ops, cfgs, backend_id))
    }

    /// Checks structural and per-config invariants.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.configs.len() != self.logical.operators.len() {
            return Err("config count differs from operator count".into());
        }
        for (op, cfg) in self.steps() {
            if cfg.logical_op_id != op.op_id {
                return Err(format!("config for {} bound to {}", cfg.logical_op_id, op.op_id));
            }
            cfg.validate()?;
            let expected = fixed_strategy(op);
            match expected {
                Some(s) if cfg.strategy != s => {
                    return Err(format!("{} must use strategy {s}", op.op_id))
                }
                None if !(cfg.strategy.is_llm() || cfg.strategy == Strategy::CodeSynth) => {
                    return Err(format!("{} needs an LLM or code synthesis", op.op_id))
                }
                _ => {}
            }
            if let Some(m) = &cfg.model {
                if cfg.strategy.is_llm() && op.needs_vision != m.is_vision() {
                    return Err(format!("{}: model `{}` has the wrong modality", op.op_id, m.model_id));
                }
            }
        }
        Ok(())
    }

    pub fn uses(&self, op_id: &str, model_id: &str) -> bool {
        self.config_for(op_id)
            .and_then(PhysicalOpConfig::model_id)
            .is_some_and(|m| m == model_id)
    }

    /// Human-readable listing, one numbered block per operator.
    pub fn listing(&self) -> String {
        let mut out = String::new();
        let mut schema = String::new();
        let mut fields: BTreeSet<String> = BTreeSet::new();
        for (i, (op, cfg)) in self.steps().enumerate() {
            let before = field_summary(&fields);
            let in_schema = schema.clone();
            match &op.kind {
                OpKind::Scan {
                    schema: s,
                    fields: f,
                    ..
                } => {
                    schema = s.clone();
                    fields = f.iter().cloned().collect();
                    out.push_str(&format!(" {i}. MarshalAndScanDataOp -> {schema} \n\n"));
                    continue;
                }
                OpKind::Convert {
                    target_schema,
                    produces,
                    ..
                } => {
                    schema = target_schema.clone();
                    fields.extend(produces.iter().map(|f| f.name.clone()));
                    out.push_str(&format!(
                        " {i}. {in_schema} -> InduceFromCandidateOp -> {schema} \n"
                    ));
                    out.push_str(&using_line(cfg));
                    if cfg.strategy != Strategy::Hardcoded {
                        out.push_str(&format!("    Token budget: {}\n", cfg.token_budget));
                        out.push_str(&format!(
                            "    Query strategy: {}\n",
                            cfg.strategy.listing_name()
                        ));
                    }
                }
                OpKind::Filter { predicate } => {
                    out.push_str(&format!(" {i}. {schema} -> FilterCandidateOp -> {schema} \n"));
                    out.push_str(&using_line(cfg));
                    if !cfg.token_budget.is_full() {
                        out.push_str(&format!("    Token budget: {}\n", cfg.token_budget));
                    }
                    match predicate {
                        Predicate::Text(t) => out.push_str(&format!("    Filter: \"{t}\"\n")),
                        Predicate::Udf(u) => out.push_str(&format!("    Filter: \"<function {u}>\"\n")),
                    }
                }
                OpKind::Project { columns } => {
                    fields = columns.iter().cloned().collect();
                    out.push_str(&format!(" {i}. {schema} -> ProjectOp -> {schema} \n"));
                }
                OpKind::GroupBy {
                    group_fields,
                    aggregate,
                } => {
                    fields = group_fields.iter().cloned().collect();
                    fields.insert(aggregate.output_field());
                    schema = "GroupBy".into();
                    out.push_str(&format!(" {i}. {in_schema} -> GroupByOp -> {schema} \n"));
                }
                OpKind::Limit { n } => {
                    out.push_str(&format!(" {i}. {schema} -> LimitScanOp -> {schema} \n"));
                    out.push_str(&format!("    Limit: {n}\n"));
                }
                OpKind::Aggregate { function } => {
                    fields = [function.output_field()].into_iter().collect();
                    schema = "Aggregate".into();
                    out.push_str(&format!(" {i}. {in_schema} -> ApplyAggregateOp -> {schema} \n"));
                }
            }
            out.push_str(&format!("    {before} -> {}\n\n", field_summary(&fields)));
        }
        out.truncate(out.trim_end().len());
        out.push('\n');
        out
    }
}

fn using_line(cfg: &PhysicalOpConfig) -> String {
    match (cfg.strategy, &cfg.model) {
        (Strategy::Hardcoded, _) => "    Using hardcoded function\n".into(),
        (Strategy::Udf, _) => "    Using None\n".into(),
        (Strategy::CodeSynth, Some(m)) => {
            format!("    Using synthesized code ({})\n", m.listing_name())
        }
        (_, Some(m)) => format!("    Using {}\n", m.listing_name()),
        (_, None) => "    Using None\n".into(),
    }
}

/// `(contents,filena...)`: sorted field names joined, cut at 15 characters.
fn field_summary(fields: &BTreeSet<String>) -> String {
    let joined: Vec<&str> = fields.iter().map(String::as_str).collect();
    let joined = joined.join(",");
    if joined.chars().count() > 15 {
        let cut: String = joined.chars().take(15).collect();
        format!("({cut}...)")
    } else {
        format!("({joined})")
    }
}

/// The only admissible strategy for operators that need no model.
pub fn fixed_strategy(op: &LogicalOperator) -> Option<Strategy> {
    if op.requires_llm() {
        return None;
    }
    Some(match &op.kind {
        OpKind::Filter {
            predicate: Predicate::Udf(_),
        } => Strategy::Udf,
        _ => Strategy::Hardcoded,
    })
}

/// Code synthesis extracts scalar text/number fields one-to-one.
pub fn code_synth_admissible(op: &LogicalOperator) -> bool {
    match &op.kind {
        OpKind::Convert {
            produces,
            cardinality,
            udf: None,
            ..
        } => {
            !op.needs_vision
                && *cardinality == Cardinality::OneToOne
                && !produces.is_empty()
                && produces
                    .iter()
                    .all(|f| matches!(f.kind, FieldKind::String | FieldKind::Number))
        }
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpace {
    pub models: Vec<ModelSpec>,
    pub strategies: Vec<Strategy>,
    pub budgets: Vec<TokenBudget>,
}

impl ParamSpace {
    /// Every configured model, all model strategies, budgets {0.1, 0.5, 0.9, 1.0}.
    pub fn full(models: &ModelRegistry) -> Self {
        ParamSpace {
            models: models.models.clone(),
            strategies: vec![
                Strategy::LlmBondedWithFallback,
                Strategy::LlmPerField,
                Strategy::CodeSynth,
            ],
            budgets: DEFAULT_BUDGETS
                .iter()
                .map(|b| TokenBudget::new(*b).expect("valid"))
                .collect(),
        }
    }

    fn admissible_models(&self, op: &LogicalOperator) -> Vec<&ModelSpec> {
        let mut ms: Vec<&ModelSpec> = self
            .models
            .iter()
            .filter(|m| m.is_vision() == op.needs_vision)
            .collect();
        ms.sort_by(|a, b| a.model_id.cmp(&b.model_id));
        ms
    }

    fn synthesizer(&self) -> Option<&ModelSpec> {
        self.models.iter().find(|m| m.tier == Tier::Champion)
    }

    /// Every configuration admissible for `op` in this space.
    pub fn options(&self, op: &LogicalOperator) -> Result<Vec<PhysicalOpConfig>> {
        if let Some(s) = fixed_strategy(op) {
            return Ok(vec![PhysicalOpConfig::local(&op.op_id, s)]);
        }
        let is_convert = matches!(op.kind, OpKind::Convert { .. });
        let mut out = Vec::new();
        for &strategy in &self.strategies {
            match strategy {
                Strategy::Hardcoded | Strategy::Udf => {}
                // a filter asks for one verdict, so per-field is the same query
                Strategy::LlmPerField if !is_convert => {}
                Strategy::LlmBondedWithFallback | Strategy::LlmPerField => {
                    for m in self.admissible_models(op) {
                        for &b in &self.budgets {
                            out.push(PhysicalOpConfig {
                                logical_op_id: op.op_id.clone(),
                                strategy,
                                model: Some(m.clone()),
                                token_budget: b,
                            });
                        }
                    }
                }
                Strategy::CodeSynth => {
                    if let (true, Some(m)) = (code_synth_admissible(op), self.synthesizer()) {
                        out.push(PhysicalOpConfig {
                            logical_op_id: op.op_id.clone(),
                            strategy,
                            model: Some(m.clone()),
                            token_budget: TokenBudget::FULL,
                        });
                    }
                }
            }
        }
        if out.is_empty() {
            return Err(Error::EmptyParamSpace(format!(
                "no admissible configuration for {}",
                op.label()
            )));
        }
        Ok(out)
    }
}

/// Cartesian expansion of each logical plan over the parameter space,
/// deduplicated and sorted by fingerprint.
pub fn enumerate_physical(
    logical_plans: &[LogicalPlan],
    space: &ParamSpace,
) -> Result<Vec<PhysicalPlan>> {
    if space.models.is_empty() || space.budgets.is_empty() || space.strategies.is_empty() {
        return Err(Error::EmptyParamSpace(
            "models, budgets and strategies must all be nonempty".into(),
        ));
    }
    let mut seen = BTreeMap::new();
    for lp in logical_plans {
        let per_op: Vec<Vec<PhysicalOpConfig>> = lp
            .operators
            .iter()
            .map(|op| space.options(op))
            .collect::<Result<_>>()?;
        let mut idx = vec![0usize; per_op.len()];
        loop {
            let configs: Vec<PhysicalOpConfig> =
                idx.iter().zip(&per_op).map(|(&i, o)| o[i].clone()).collect();
            let p = PhysicalPlan::new(lp.clone(), configs);
            seen.entry(p.fingerprint.clone()).or_insert(p);
            // odometer increment, last operator fastest
            let mut k = per_op.len();
            loop {
                if k == 0 {
                    break;
                }
                k -= 1;
                idx[k] += 1;
                if idx[k] < per_op[k].len() {
                    break;
                }
                idx[k] = 0;
                if k == 0 {
                    k = usize::MAX;
                    break;
                }
            }
            if k == usize::MAX || per_op.is_empty() {
                break;
            }
        }
    }
    Ok(seen.into_values().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sentinel {
    pub tier: Tier,
    pub plan: PhysicalPlan,
}

/// One plan per tier (cheap, mid, champion) with every model-requiring
/// operator on that tier's model, bonded prompting, full budget. Vision
/// operators use the tier's paired vision model. A plan without model
/// operators yields a single sentinel.
pub fn make_sentinels(logical: &LogicalPlan, models: &ModelRegistry) -> Result<Vec<Sentinel>> {
    let has_llm = logical.operators.iter().any(LogicalOperator::requires_llm);
    let tiers: &[Tier] = if has_llm {
        &[Tier::Cheap, Tier::Mid, Tier::Champion]
    } else {
        &[Tier::Champion]
    };
    let mut out = Vec::new();
    for &tier in tiers {
        let text_model = models.by_tier(tier);
        let mut configs = Vec::new();
        for op in &logical.operators {
            let cfg = match fixed_strategy(op) {
                Some(s) => PhysicalOpConfig::local(&op.op_id, s),
                None => {
                    let model = if op.needs_vision {
                        models
                            .vision_for(tier)
                            .ok_or_else(|| Error::MissingTier(Tier::Vision.to_string()))?
                    } else {
                        text_model.ok_or_else(|| Error::MissingTier(tier.to_string()))?
                    };
                    PhysicalOpConfig {
                        logical_op_id: op.op_id.clone(),
                        strategy: Strategy::LlmBondedWithFallback,
                        model: Some(model.clone()),
                        token_budget: TokenBudget::FULL,
                    }
                }
            };
            configs.push(cfg);
        }
        out.push(Sentinel {
            tier,
            plan: PhysicalPlan::new(logical.clone(), configs),
        });
    }
    Ok(out)
}

/// Drops duplicates, invariant violations, and plans that put a model on an
/// operator where it scored zero quality during sampling. Sentinels always
/// survive and the result is never empty.
pub fn naive_eliminate(
    candidates: Vec<PhysicalPlan>,
    stats: &StatsTable,
    sentinels: &[String],
) -> Vec<PhysicalPlan> {
    let protected: HashSet<&str> = sentinels.iter().map(String::as_str).collect();
    let zero = stats.zero_quality_pairs();
    let mut seen = HashSet::new();
    let mut kept = Vec::new();
    let mut fallback = None;
    for p in candidates {
        if !seen.insert(p.fingerprint.clone()) {
            continue;
        }
        let keep = protected.contains(p.fingerprint.as_str())
            || (p.validate().is_ok()
                && !p.configs.iter().any(|c| {
                    c.model_id()
                        .is_some_and(|m| zero.contains(&(c.logical_op_id.clone(), m.to_string())))
                }));
        if keep {
            kept.push(p);
        } else if fallback.is_none() && p.validate().is_ok() {
            fallback = Some(p);
        }
    }
    if kept.is_empty() {
        kept.extend(fallback);
    }
    kept
}
