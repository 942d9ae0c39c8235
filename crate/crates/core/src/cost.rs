//! Sampled per-operator statistics, plan estimates, the Pareto frontier and
//! policy-driven plan choice.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint;
use crate::logical::{Cardinality, LogicalOperator, LogicalPlan, OpKind};
use crate::physical::{PhysicalOpConfig, PhysicalPlan, Strategy, TokenBudget};
use crate::record::Value;
use crate::schema::{FieldKind, FieldSpec};
use crate::trace::{OpRecordTrace, Outcome};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StatsKey {
    pub op_id: String,
    pub strategy: Strategy,
    pub model_id: Option<String>,
    pub token_budget: TokenBudget,
}

impl StatsKey {
    pub fn of(cfg: &PhysicalOpConfig) -> Self {
        StatsKey {
            op_id: cfg.logical_op_id.clone(),
            strategy: cfg.strategy,
            model_id: cfg.model_id().map(str::to_string),
            token_budget: cfg.token_budget,
        }
    }
}

impl fmt::Display for StatsKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}/{}",
            self.op_id,
            self.strategy,
            self.model_id.as_deref().unwrap_or("-"),
            self.token_budget
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorStats {
    pub op_id: String,
    pub strategy: Strategy,
    #[serde(default)]
    pub model_id: Option<String>,
    pub token_budget: TokenBudget,
    pub n_samples: usize,
    pub mean_latency_s: f64,
    pub mean_usd: f64,
    pub mean_input_tokens: f64,
    pub mean_output_tokens: f64,
    pub selectivity: f64,
    pub fanout: f64,
    pub quality: f64,
}

impl OperatorStats {
    /// Stats for one record per sample, passing everything, perfect quality.
    pub fn new(key: StatsKey, latency_s: f64, usd: f64) -> Self {
        OperatorStats {
            op_id: key.op_id,
            strategy: key.strategy,
            model_id: key.model_id,
            token_budget: key.token_budget,
            n_samples: 1,
            mean_latency_s: latency_s,
            mean_usd: usd,
            mean_input_tokens: 0.0,
            mean_output_tokens: 0.0,
            selectivity: 1.0,
            fanout: 1.0,
            quality: 1.0,
        }
    }

    pub fn key(&self) -> StatsKey {
        StatsKey {
            op_id: self.op_id.clone(),
            strategy: self.strategy,
            model_id: self.model_id.clone(),
            token_budget: self.token_budget,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| {
            Err(Error::InvalidStats {
                op: self.key().to_string(),
                reason: reason.to_string(),
            })
        };
        let nums = [
            self.mean_latency_s,
            self.mean_usd,
            self.mean_input_tokens,
            self.mean_output_tokens,
            self.selectivity,
            self.fanout,
            self.quality,
        ];
        if nums.iter().any(|v| !v.is_finite()) {
            return bad("non-finite value");
        }
        if nums.iter().any(|v| *v < 0.0) {
            return bad("negative value");
        }
        if self.n_samples == 0 {
            return bad("no samples");
        }
        if self.selectivity > 1.0 {
            return bad("selectivity above 1");
        }
        if self.quality > 1.0 {
            return bad("quality above 1");
        }
        Ok(())
    }
}

/// Quality multiplier applied to budgets that were never sampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPrior {
    /// (budget, multiplier) points, ascending by budget; linear in between.
    pub points: Vec<(f64, f64)>,
}

impl Default for BudgetPrior {
    fn default() -> Self {
        BudgetPrior {
            points: vec![(0.1, 0.7), (0.5, 0.9), (0.9, 0.97), (1.0, 1.0)],
        }
    }
}

impl BudgetPrior {
    pub fn factor(&self, budget: f64) -> f64 {
        let pts = &self.points;
        match pts.iter().position(|(b, _)| *b >= budget) {
            None => pts.last().map_or(1.0, |p| p.1),
            Some(0) => pts[0].1,
            Some(i) => {
                let (b0, q0) = pts[i - 1];
                let (b1, q1) = pts[i];
                q0 + (q1 - q0) * (budget - b0) / (b1 - b0)
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsTable {
    rows: BTreeMap<StatsKey, OperatorStats>,
    #[serde(default)]
    pub prior: BudgetPrior,
}

impl StatsTable {
    pub fn insert(&mut self, s: OperatorStats) {
        self.rows.insert(s.key(), s);
    }

    pub fn get(&self, key: &StatsKey) -> Option<&OperatorStats> {
        self.rows.get(key)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &OperatorStats> {
        self.rows.values()
    }

    pub fn fingerprint(&self) -> String {
        fingerprint::of(&self.rows.values().collect::<Vec<_>>())
    }

    /// (op_id, model_id) pairs that produced no usable output while sampled.
    pub fn zero_quality_pairs(&self) -> HashSet<(String, String)> {
        self.rows
            .values()
            .filter(|s| s.quality == 0.0)
            .filter_map(|s| Some((s.op_id.clone(), s.model_id.clone()?)))
            .collect()
    }

    /// Stats for a configuration, extrapolated from the sampled full-budget
    /// bonded run of the same (op, model) when it was not sampled directly.
    pub fn lookup(&self, op: &LogicalOperator, cfg: &PhysicalOpConfig) -> Result<OperatorStats> {
        let key = StatsKey::of(cfg);
        if let Some(s) = self.rows.get(&key) {
            return Ok(s.clone());
        }
        if !cfg.strategy.is_llm() {
            return Err(Error::MissingStats(key.to_string()));
        }
        let base_key = StatsKey {
            strategy: Strategy::LlmBondedWithFallback,
            token_budget: TokenBudget::FULL,
            ..key.clone()
        };
        let base = self
            .rows
            .get(&base_key)
            .ok_or_else(|| Error::MissingStats(key.to_string()))?;
        let b = cfg.token_budget.get();
        let mut s = base.clone();
        s.strategy = key.strategy;
        s.token_budget = key.token_budget;
        s.mean_usd *= b;
        let (tin, tout) = (base.mean_input_tokens, base.mean_output_tokens);
        s.mean_latency_s *= if tin + tout > 0.0 {
            (b * tin + tout) / (tin + tout)
        } else {
            b
        };
        s.mean_input_tokens *= b;
        s.quality *= self.prior.factor(b);
        if cfg.strategy == Strategy::LlmPerField {
            let n = op.produces().len().max(1) as f64;
            s.mean_usd *= n;
            s.mean_latency_s *= n;
            s.mean_input_tokens *= n;
            s.mean_output_tokens *= n;
        }
        Ok(s)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for s in self.rows.values() {
            w.serialize(CsvRow::from(s))
                .map_err(|e| Error::StatsFile(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::StatsFile(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::StatsFile(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let mut table = StatsTable::default();
        for (i, row) in r.deserialize::<CsvRow>().enumerate() {
            let row = row.map_err(|e| Error::StatsFile(format!("row {}: {e}", i + 1)))?;
            let s = row.into_stats()?;
            s.validate()?;
            table.insert(s);
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::StatsFile(format!("{}: {e}", path.display())))?;
        Self::from_csv(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    op_id: String,
    strategy: String,
    model_id: String,
    token_budget: f64,
    n_samples: usize,
    mean_latency_s: f64,
    mean_usd: f64,
    mean_input_tokens: f64,
    mean_output_tokens: f64,
    selectivity: f64,
    fanout: f64,
    quality: f64,
}

impl From<&OperatorStats> for CsvRow {
    fn from(s: &OperatorStats) -> Self {
        CsvRow {
            op_id: s.op_id.clone(),
            strategy: s.strategy.to_string(),
            model_id: s.model_id.clone().unwrap_or_default(),
            token_budget: s.token_budget.get(),
            n_samples: s.n_samples,
            mean_latency_s: s.mean_latency_s,
            mean_usd: s.mean_usd,
            mean_input_tokens: s.mean_input_tokens,
            mean_output_tokens: s.mean_output_tokens,
            selectivity: s.selectivity,
            fanout: s.fanout,
            quality: s.quality,
        }
    }
}

impl CsvRow {
    fn into_stats(self) -> Result<OperatorStats> {
        Ok(OperatorStats {
            strategy: Strategy::from_str(&self.strategy)
                .map_err(|e| Error::StatsFile(e.to_string()))?,
            model_id: Some(self.model_id).filter(|m| !m.is_empty()),
            token_budget: TokenBudget::new(self.token_budget)
                .map_err(|e| Error::StatsFile(e.to_string()))?,
            op_id: self.op_id,
            n_samples: self.n_samples,
            mean_latency_s: self.mean_latency_s,
            mean_usd: self.mean_usd,
            mean_input_tokens: self.mean_input_tokens,
            mean_output_tokens: self.mean_output_tokens,
            selectivity: self.selectivity,
            fanout: self.fanout,
            quality: self.quality,
        })
    }
}

/// Sampled traces of one operator: the champion reference plus every
/// configuration that was run on the same inputs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OpSamples {
    pub reference: Vec<OpRecordTrace>,
    pub runs: Vec<(PhysicalOpConfig, Vec<OpRecordTrace>)>,
}

/// Per-operator samples keyed by logical op id.
pub type SampleSet = BTreeMap<String, OpSamples>;

pub fn aggregate_stats(plan: &LogicalPlan, samples: &SampleSet) -> Result<StatsTable> {
    let mut table = StatsTable::default();
    for op in &plan.operators {
        let Some(s) = samples.get(&op.op_id) else {
            continue;
        };
        if op.requires_llm() && s.reference.is_empty() {
            return Err(Error::MissingChampion(op.op_id.clone()));
        }
        for (cfg, entries) in &s.runs {
            if entries.is_empty() {
                continue;
            }
            let n = entries.len() as f64;
            let sum = |f: fn(&OpRecordTrace) -> f64| entries.iter().map(f).sum::<f64>();
            let out: f64 = entries.iter().map(|e| e.emitted() as f64).sum();
            let passed = entries.iter().filter(|e| e.emitted() > 0).count() as f64;
            let quality = if op.requires_llm() {
                score_quality_vs_champion(entries, &s.reference, op)?
            } else {
                1.0
            };
            let stats = OperatorStats {
                n_samples: entries.len(),
                mean_latency_s: sum(|e| e.latency_s) / n,
                mean_usd: sum(|e| e.usd) / n,
                mean_input_tokens: sum(|e| e.input_tokens as f64) / n,
                mean_output_tokens: sum(|e| e.output_tokens as f64) / n,
                selectivity: (passed / n).min(1.0),
                fanout: out / n,
                quality,
                ..OperatorStats::new(StatsKey::of(cfg), 0.0, 0.0)
            };
            stats.validate()?;
            table.insert(stats);
        }
    }
    Ok(table)
}

/// Entries keyed by (source_id, occurrence) so that records fanned out from
/// one source line up across runs.
fn keyed(entries: &[OpRecordTrace]) -> BTreeMap<(String, usize), &OpRecordTrace> {
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    let mut out = BTreeMap::new();
    for e in entries {
        let k = seen.entry(&e.source_id).or_default();
        out.insert((e.source_id.clone(), *k), e);
        *k += 1;
    }
    out
}

fn tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

/// Token-level F1 between two strings, multiset overlap.
pub fn token_f1(candidate: &str, reference: &str) -> f64 {
    let c = tokens(candidate);
    let r = tokens(reference);
    if c.is_empty() && r.is_empty() {
        return 1.0;
    }
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<&str, i64> = BTreeMap::new();
    for t in &r {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0;
    for t in &c {
        if let Some(n) = counts.get_mut(t.as_str()) {
            if *n > 0 {
                *n -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / c.len() as f64;
    let rc = common as f64 / r.len() as f64;
    2.0 * p * rc / (p + rc)
}

pub fn field_score(spec: &FieldSpec, candidate: Option<&Value>, reference: Option<&Value>) -> f64 {
    match (
        candidate.filter(|v| !v.is_null()),
        reference.filter(|v| !v.is_null()),
    ) {
        (None, None) => 1.0,
        (None, _) | (_, None) => 0.0,
        (Some(c), Some(r)) => match spec.kind {
            FieldKind::String => match (c.as_str(), r.as_str()) {
                (Some(c), Some(r)) => token_f1(c, r),
                _ => f64::from(u8::from(c == r)),
            },
            FieldKind::Number => match (c.as_f64(), r.as_f64()) {
                (Some(c), Some(r)) => f64::from(u8::from((c - r).abs() <= 1e-9 * r.abs().max(1.0))),
                _ => 0.0,
            },
            _ => f64::from(u8::from(c == r)),
        },
    }
}

/// Agreement of a candidate's per-record output with the champion's.
/// Filters score keep/drop agreement; converts average per-field scores.
/// A record present on one side only scores zero.
pub fn score_quality_vs_champion(
    candidate: &[OpRecordTrace],
    champion: &[OpRecordTrace],
    op: &LogicalOperator,
) -> Result<f64> {
    if champion.is_empty() {
        return Err(Error::MissingChampion(op.op_id.clone()));
    }
    let cand = keyed(candidate);
    let champ = keyed(champion);
    let keys: std::collections::BTreeSet<_> = cand.keys().chain(champ.keys()).collect();
    let mut total = 0.0;
    for k in &keys {
        let score = match (cand.get(k), champ.get(k)) {
            (Some(c), Some(r)) => match &op.kind {
                OpKind::Filter { .. } => f64::from(u8::from(passes(c) == passes(r))),
                OpKind::Convert { .. } => convert_score(op, c, r),
                _ => f64::from(u8::from(c.outcome == r.outcome)),
            },
            _ => 0.0,
        };
        total += score;
    }
    Ok(total / keys.len() as f64)
}

fn passes(e: &OpRecordTrace) -> bool {
    matches!(e.outcome, Outcome::Emitted(n) if n > 0)
}

fn convert_score(op: &LogicalOperator, c: &OpRecordTrace, r: &OpRecordTrace) -> f64 {
    let fields = op.produces();
    let (cp, rp) = (&c.produced, &r.produced);
    if cp.is_empty() && rp.is_empty() {
        // both dropped the record
        return 1.0;
    }
    if fields.is_empty() {
        return f64::from(u8::from(cp.len() == rp.len()));
    }
    let rows = cp.len().max(rp.len());
    let mut sum = 0.0;
    for i in 0..rows {
        let (a, b) = (cp.get(i), rp.get(i));
        for f in fields {
            sum += match (a, b) {
                (Some(a), Some(b)) => field_score(f, a.get(&f.name), b.get(&f.name)),
                _ => 0.0,
            };
        }
    }
    sum / (rows * fields.len()) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub fraction: f64,
    pub min_samples: usize,
    pub max_samples: Option<usize>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            fraction: 0.05,
            min_samples: 3,
            max_samples: None,
        }
    }
}

impl SampleConfig {
    pub fn new(fraction: f64, min_samples: usize, max_samples: Option<usize>) -> Result<Self> {
        let c = SampleConfig {
            fraction,
            min_samples,
            max_samples,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::InvalidSampleConfig(format!(
                "fraction {} outside (0, 1]",
                self.fraction
            )));
        }
        if self.min_samples == 0 {
            return Err(Error::InvalidSampleConfig("min_samples must be ≥ 1".into()));
        }
        if self.max_samples.is_some_and(|m| m < self.min_samples) {
            return Err(Error::InvalidSampleConfig("max_samples below min_samples".into()));
        }
        Ok(())
    }

    /// max(min, ceil(fraction·n)), capped, never more than `n`.
    pub fn sample_size(&self, input_count: usize) -> usize {
        let want = (self.fraction * input_count as f64 - 1e-9).ceil().max(0.0) as usize;
        let mut k = want.max(self.min_samples);
        if let Some(cap) = self.max_samples {
            k = k.min(cap);
        }
        k.min(input_count)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "workers")]
pub enum ExecMode {
    Serial,
    Parallel(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEstimate {
    pub fingerprint: String,
    pub est_runtime_s: f64,
    pub est_usd: f64,
    pub est_quality: f64,
}

impl PlanEstimate {
    pub fn new(fingerprint: &str, runtime: f64, usd: f64, quality: f64) -> Self {
        PlanEstimate {
            fingerprint: fingerprint.to_string(),
            est_runtime_s: runtime,
            est_usd: usd,
            est_quality: quality,
        }
    }

    pub fn dominates(&self, other: &PlanEstimate) -> bool {
        self.est_runtime_s <= other.est_runtime_s
            && self.est_usd <= other.est_usd
            && self.est_quality >= other.est_quality
            && (self.est_runtime_s < other.est_runtime_s
                || self.est_usd < other.est_usd
                || self.est_quality > other.est_quality)
    }
}

/// Propagates cardinality front to back; runtime and cost are per-record
/// means times the records each operator sees, quality is the product over
/// model-backed operators.
pub fn estimate(
    plan: &PhysicalPlan,
    stats: &StatsTable,
    input_count: usize,
    mode: ExecMode,
) -> Result<PlanEstimate> {
    let mut card = input_count as f64;
    let (mut runtime, mut usd, mut quality) = (0.0, 0.0, 1.0);
    for (op, cfg) in plan.steps() {
        let s = stats.lookup(op, cfg)?;
        s.validate()?;
        let seen = match mode {
            ExecMode::Serial => card,
            ExecMode::Parallel(w) => (card / w.max(1) as f64).ceil(),
        };
        runtime += seen * s.mean_latency_s;
        usd += card * s.mean_usd;
        if op.requires_llm() {
            quality *= s.quality;
        }
        card = match &op.kind {
            OpKind::Scan { .. } | OpKind::Project { .. } => card,
            OpKind::Filter { .. } => card * s.selectivity,
            OpKind::Convert {
                cardinality: Cardinality::OneToMany,
                ..
            } => card * s.fanout,
            OpKind::Convert { .. } => card * s.selectivity,
            OpKind::Limit { n } => card.min(*n as f64),
            OpKind::GroupBy { .. } => card * s.fanout,
            OpKind::Aggregate { .. } => card.min(1.0),
        };
    }
    let est = PlanEstimate::new(&plan.fingerprint, runtime, usd, quality.clamp(0.0, 1.0));
    if [est.est_runtime_s, est.est_usd, est.est_quality]
        .iter()
        .any(|v| !v.is_finite() || *v < 0.0)
    {
        return Err(Error::InvalidStats {
            op: plan.fingerprint.clone(),
            reason: "estimate is not finite and non-negative".into(),
        });
    }
    Ok(est)
}

/// Indices of estimates not dominated by any other. Identical triples all
/// survive.
pub fn pareto_frontier(estimates: &[PlanEstimate]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..estimates.len()).collect();
    // anything that dominates p sorts before it
    order.sort_by(|&a, &b| {
        let (x, y) = (&estimates[a], &estimates[b]);
        x.est_runtime_s
            .total_cmp(&y.est_runtime_s)
            .then(x.est_usd.total_cmp(&y.est_usd))
            .then(y.est_quality.total_cmp(&x.est_quality))
    });
    let mut front: Vec<usize> = Vec::new();
    for i in order {
        if !front.iter().any(|&f| estimates[f].dominates(&estimates[i])) {
            front.push(i);
        }
    }
    front.sort_unstable();
    front
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy", content = "threshold")]
pub enum Policy {
    MaxQualityAtFixedCost(f64),
    MaxQualityAtFixedRuntime(f64),
    MinCostAtFixedQuality(f64),
}

impl Policy {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Policy::MaxQualityAtFixedCost(t) | Policy::MaxQualityAtFixedRuntime(t) => {
                t.is_finite() && t > 0.0
            }
            Policy::MinCostAtFixedQuality(q) => q > 0.0 && q <= 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidPolicy(format!("threshold out of range in `{self}`")))
        }
    }

    /// Amount by which `e` misses the constraint; zero when satisfied.
    pub fn violation(&self, e: &PlanEstimate) -> f64 {
        const EPS: f64 = 1e-9;
        let v = match *self {
            Policy::MaxQualityAtFixedCost(max) => e.est_usd - max,
            Policy::MaxQualityAtFixedRuntime(max) => e.est_runtime_s - max,
            Policy::MinCostAtFixedQuality(min) => min - e.est_quality,
        };
        if v <= EPS {
            0.0
        } else {
            v
        }
    }

    pub fn satisfied_by(&self, e: &PlanEstimate) -> bool {
        self.violation(e) == 0.0
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::MaxQualityAtFixedCost(t) => write!(f, "max-quality-at-cost={t}"),
            Policy::MaxQualityAtFixedRuntime(t) => write!(f, "max-quality-at-runtime={t}"),
            Policy::MinCostAtFixedQuality(t) => write!(f, "min-cost-at-quality={t}"),
        }
    }
}

impl FromStr for Policy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (name, value) = s
            .split_once('=')
            .ok_or_else(|| Error::InvalidPolicy(format!("expected <name>=<threshold>, got `{s}`")))?;
        let t: f64 = value
            .trim()
            .parse()
            .map_err(|_| Error::InvalidPolicy(format!("bad threshold `{value}`")))?;
        let p = match name.trim() {
            "max-quality-at-cost" => Policy::MaxQualityAtFixedCost(t),
            "max-quality-at-runtime" => Policy::MaxQualityAtFixedRuntime(t),
            "min-cost-at-quality" => Policy::MinCostAtFixedQuality(t),
            other => return Err(Error::InvalidPolicy(format!("unknown policy `{other}`"))),
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Choice {
    pub index: usize,
    pub constraint_met: bool,
}

fn tie_break(a: &PlanEstimate, b: &PlanEstimate) -> std::cmp::Ordering {
    a.est_usd
        .total_cmp(&b.est_usd)
        .then(a.est_runtime_s.total_cmp(&b.est_runtime_s))
        .then_with(|| a.fingerprint.cmp(&b.fingerprint))
}

/// Picks the policy-optimal estimate among `candidates` (indices into
/// `estimates`). Falls back to the least-violating plan when none qualifies.
pub fn choose(estimates: &[PlanEstimate], candidates: &[usize], policy: &Policy) -> Result<Choice> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let feasible: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|&i| policy.satisfied_by(&estimates[i]))
        .collect();
    let constraint_met = !feasible.is_empty();
    let pool = if constraint_met { &feasible[..] } else { candidates };
    let best = pool
        .iter()
        .copied()
        .min_by(|&a, &b| {
            let (x, y) = (&estimates[a], &estimates[b]);
            let primary = if !constraint_met {
                policy.violation(x).total_cmp(&policy.violation(y))
            } else {
                match policy {
                    Policy::MinCostAtFixedQuality(_) => std::cmp::Ordering::Equal,
                    _ => y.est_quality.total_cmp(&x.est_quality),
                }
            };
            primary.then_with(|| tie_break(x, y))
        })
        .expect("nonempty");
    Ok(Choice {
        index: best,
        constraint_met,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physical::{ModelSpec, Tier};

    fn est(rt: f64, usd: f64, q: f64, fp: &str) -> PlanEstimate {
        PlanEstimate::new(fp, rt, usd, q)
    }

    #[test]
    fn frontier_example() {
        let e = [est(1.0, 1.0, 0.9, "a"), est(2.0, 2.0, 0.8, "b"), est(0.5, 3.0, 0.95, "c")];
        assert_eq!(pareto_frontier(&e), vec![0, 2]);
        assert_eq!(pareto_frontier(&e[..1]), vec![0]);
        let ties = [est(1.0, 1.0, 0.5, "a"), est(1.0, 1.0, 0.5, "b")];
        assert_eq!(pareto_frontier(&ties), vec![0, 1]);
    }

    #[test]
    fn choose_examples() {
        let e = [est(1.0, 1.0, 0.9, "a"), est(0.5, 3.0, 0.95, "c")];
        let all = [0, 1];
        let c = choose(&e, &all, &Policy::MinCostAtFixedQuality(0.9)).unwrap();
        assert_eq!((c.index, c.constraint_met), (0, true));
        let c = choose(&e, &all, &Policy::MinCostAtFixedQuality(0.99)).unwrap();
        assert_eq!((c.index, c.constraint_met), (1, false));

        let e = [est(1.0, 0.5, 0.7, "x"), est(1.0, 1.0, 0.9, "y")];
        let c = choose(&e, &all, &Policy::MaxQualityAtFixedCost(0.75)).unwrap();
        assert_eq!((c.index, c.constraint_met), (0, true));
        let c = choose(&e, &all, &Policy::MaxQualityAtFixedCost(0.1)).unwrap();
        assert_eq!((c.index, c.constraint_met), (0, false));
        assert!(matches!(choose(&e, &[], &Policy::MinCostAtFixedQuality(0.5)), Err(Error::EmptyCandidates)));
    }

    #[test]
    fn policy_parsing() {
        assert_eq!(
            "min-cost-at-quality=0.8".parse::<Policy>().unwrap(),
            Policy::MinCostAtFixedQuality(0.8)
        );
        assert_eq!(
            "max-quality-at-runtime=30".parse::<Policy>().unwrap(),
            Policy::MaxQualityAtFixedRuntime(30.0)
        );
        assert!("min-cost-at-quality=1.5".parse::<Policy>().is_err());
        assert!("max-quality-at-cost=0".parse::<Policy>().is_err());
        assert!("cheapest".parse::<Policy>().is_err());
    }

    #[test]
    fn sample_sizes() {
        let c = SampleConfig::default();
        assert_eq!(c.sample_size(1000), 50);
        assert_eq!(c.sample_size(10), 3);
        assert_eq!(c.sample_size(2), 2);
        assert_eq!(SampleConfig::new(0.05, 1, None).unwrap().sample_size(11), 1);
        assert_eq!(SampleConfig::new(0.5, 1, Some(4)).unwrap().sample_size(100), 4);
        assert!(SampleConfig::new(0.0, 1, None).is_err());
        assert!(SampleConfig::new(0.1, 0, None).is_err());
    }

    #[test]
    fn token_f1_cases() {
        assert_eq!(token_f1("a b c", "a b c"), 1.0);
        assert_eq!(token_f1("a b", "c d"), 0.0);
        // p = 1/2, r = 1/1
        assert!((token_f1("a x", "a") - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(token_f1("", ""), 1.0);
    }

    fn trace(src: &str, outcome: Outcome, produced: Vec<BTreeMap<String, Value>>) -> OpRecordTrace {
        let mut t = OpRecordTrace::new("op01", "c", src, 0);
        t.outcome = outcome;
        t.produced = produced;
        t
    }

    #[test]
    fn filter_agreement() {
        let op = LogicalOperator {
            op_id: "op01".into(),
            kind: OpKind::Filter {
                predicate: crate::logical::Predicate::Text("p".into()),
            },
            depends_on: vec![],
            explicit_deps: false,
            needs_vision: false,
        };
        let verdict = |i: usize, keep: bool| {
            trace(&format!("s{i}"), if keep { Outcome::Emitted(1) } else { Outcome::Dropped }, vec![])
        };
        let champ: Vec<_> = (0..10).map(|i| verdict(i, i % 2 == 0)).collect();
        let cand: Vec<_> = (0..10).map(|i| verdict(i, if i < 2 { i % 2 == 1 } else { i % 2 == 0 })).collect();
        assert_eq!(score_quality_vs_champion(&cand, &champ, &op).unwrap(), 0.8);
        assert_eq!(score_quality_vs_champion(&champ, &champ, &op).unwrap(), 1.0);
        assert!(matches!(score_quality_vs_champion(&cand, &[], &op), Err(Error::MissingChampion(_))));
        // a record the candidate never saw counts against it
        assert_eq!(score_quality_vs_champion(&cand[2..], &champ, &op).unwrap(), 0.8);
    }

    #[test]
    fn convert_score_example() {
        let op = LogicalOperator {
            op_id: "op01".into(),
            kind: OpKind::Convert {
                target_schema: "T".into(),
                cardinality: Cardinality::OneToOne,
                udf: None,
                desc: None,
                produces: vec![
                    FieldSpec::new("n", FieldKind::Number, ""),
                    FieldSpec::new("s", FieldKind::String, ""),
                ],
            },
            depends_on: vec![],
            explicit_deps: false,
            needs_vision: false,
        };
        let row = |n: f64, s: &str| {
            BTreeMap::from([
                ("n".to_string(), Value::Number(n)),
                ("s".to_string(), Value::String(s.into())),
            ])
        };
        // token F1 per record: 1, 2/3, 2/3, 0, 2/3 → mean 0.6
        let cand_s = ["a b", "a x", "b y", "z", "c q"];
        let champ_s = ["a b", "a", "b", "w", "c"];
        let cand: Vec<_> = (0..5)
            .map(|i| trace(&format!("s{i}"), Outcome::Emitted(1), vec![row(i as f64, cand_s[i])]))
            .collect();
        let champ: Vec<_> = (0..5)
            .map(|i| trace(&format!("s{i}"), Outcome::Emitted(1), vec![row(i as f64, champ_s[i])]))
            .collect();
        let q = score_quality_vs_champion(&cand, &champ, &op).unwrap();
        assert!((q - 0.8).abs() < 1e-12, "{q}");
    }

    fn worked_plan() -> (PhysicalPlan, StatsTable) {
        use crate::logical::Predicate;
        let m = ModelSpec::new("m", Tier::Champion, 1.0, 1.0);
        let ops = vec![
            LogicalOperator {
                op_id: "op00".into(),
                kind: OpKind::Scan {
                    dataset_id: "d".into(),
                    schema: "TextFile".into(),
                    fields: vec!["contents".into()],
                },
                depends_on: vec![],
                explicit_deps: false,
                needs_vision: false,
            },
            LogicalOperator {
                op_id: "op01".into(),
                kind: OpKind::Filter {
                    predicate: Predicate::Text("f".into()),
                },
                depends_on: vec!["contents".into()],
                explicit_deps: false,
                needs_vision: false,
            },
            LogicalOperator {
                op_id: "op02".into(),
                kind: OpKind::Convert {
                    target_schema: "T".into(),
                    cardinality: Cardinality::OneToOne,
                    udf: None,
                    desc: None,
                    produces: vec![FieldSpec::new("x", FieldKind::String, "")],
                },
                depends_on: vec!["contents".into()],
                explicit_deps: false,
                needs_vision: false,
            },
        ];
        let llm = |id: &str| PhysicalOpConfig {
            logical_op_id: id.into(),
            strategy: Strategy::LlmBondedWithFallback,
            model: Some(m.clone()),
            token_budget: TokenBudget::FULL,
        };
        let cfgs = vec![
            PhysicalOpConfig::local("op00", Strategy::Hardcoded),
            llm("op01"),
            llm("op02"),
        ];
        let mut stats = StatsTable::default();
        stats.insert(OperatorStats::new(StatsKey::of(&cfgs[0]), 0.0, 0.0));
        let mut f = OperatorStats::new(StatsKey::of(&cfgs[1]), 0.1, 0.001);
        f.selectivity = 0.5;
        f.quality = 0.9;
        stats.insert(f);
        let mut c = OperatorStats::new(StatsKey::of(&cfgs[2]), 1.0, 0.01);
        c.quality = 0.8;
        stats.insert(c);
        (PhysicalPlan::new(LogicalPlan::new(ops), cfgs), stats)
    }

    #[test]
    fn worked_estimate() {
        let (plan, stats) = worked_plan();
        let e = estimate(&plan, &stats, 100, ExecMode::Serial).unwrap();
        assert!((e.est_usd - 0.60).abs() < 1e-12);
        assert!((e.est_runtime_s - 60.0).abs() < 1e-12);
        assert!((e.est_quality - 0.72).abs() < 1e-12);
        let e2 = estimate(&plan, &stats, 200, ExecMode::Serial).unwrap();
        assert!((e2.est_usd - 1.2).abs() < 1e-12);
        assert!((e2.est_runtime_s - 120.0).abs() < 1e-12);
        // parallel: ceil(100/32)·0.1 + ceil(50/32)·1
        let p = estimate(&plan, &stats, 100, ExecMode::Parallel(32)).unwrap();
        assert!((p.est_runtime_s - 2.4).abs() < 1e-12);
    }

    #[test]
    fn fallback_scales_by_budget() {
        let (plan, mut stats) = worked_plan();
        let mut p = plan.clone();
        p.configs[2].token_budget = TokenBudget::new(0.5).unwrap();
        let base = estimate(&plan, &stats, 100, ExecMode::Serial).unwrap();
        let half = estimate(&p, &stats, 100, ExecMode::Serial).unwrap();
        assert!((half.est_usd - (0.1 + 0.5 * 0.5)).abs() < 1e-12);
        assert!((half.est_quality - base.est_quality * 0.9).abs() < 1e-12);
        // no tokens recorded: latency scales with the budget too
        assert!((half.est_runtime_s - 35.0).abs() < 1e-12);

        let key = StatsKey::of(&plan.configs[2]);
        let mut s = stats.get(&key).unwrap().clone();
        s.mean_usd = f64::NAN;
        stats.insert(s);
        assert!(estimate(&plan, &stats, 100, ExecMode::Serial).is_err());
        assert!(matches!(
            estimate(&plan, &StatsTable::default(), 1, ExecMode::Serial),
            Err(Error::MissingStats(_))
        ));
    }

    #[test]
    fn prior_interpolates() {
        let p = BudgetPrior::default();
        assert_eq!(p.factor(0.5), 0.9);
        assert_eq!(p.factor(1.0), 1.0);
        assert_eq!(p.factor(0.05), 0.7);
        assert!((p.factor(0.3) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let (_, stats) = worked_plan();
        let text = stats.to_csv().unwrap();
        assert!(text.starts_with("op_id,strategy,model_id,token_budget"));
        let back = StatsTable::from_csv(&text).unwrap();
        assert_eq!(back.rows, stats.rows);
        assert!(StatsTable::from_csv("op_id,strategy\nx,nope\n").is_err());
    }
}
