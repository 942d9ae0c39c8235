//! Plan execution: a pull-based serial engine and a stage-barrier parallel
//! engine over the same per-operator semantics, with plan-prefix caching.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use crate::cache::{CacheKey, ResultCache};
use crate::cost::ExecMode;
use crate::error::{Error, Result};
use crate::fingerprint;
use crate::generators::parse::{parse_structured_response, parse_verdict, FieldMap};
use crate::generators::prompts::{
    fit_to_model, marshal_bonded_prompt, marshal_field_prompts, marshal_filter_prompt, PromptRequest,
};
use crate::generators::synth::{apply_converter, SynthesizedConverter};
use crate::generators::Backend;
use crate::logical::{AggFunc, Cardinality, LogicalOperator, OpKind, Predicate};
use crate::physical::{ModelSpec, PhysicalOpConfig, PhysicalPlan, Strategy};
use crate::record::{LineageStep, Record, Value};
use crate::schema::FieldSpec;
use crate::trace::{ExecutionTrace, OpRecordTrace, Outcome};
use crate::udf::UdfRegistry;

/// Synthesized converters available to `code_synth` configurations, keyed
/// by [`converter_key`].
#[derive(Debug, Default)]
pub struct ConverterStore {
    inner: Mutex<HashMap<String, Arc<SynthesizedConverter>>>,
}

impl ConverterStore {
    pub fn get(&self, key: &str) -> Option<Arc<SynthesizedConverter>> {
        self.inner.lock().unwrap().get(key).cloned()
    }

    pub fn insert(&self, key: String, conv: SynthesizedConverter) {
        self.inner.lock().unwrap().insert(key, Arc::new(conv));
    }
}

pub fn converter_key(op: &LogicalOperator, model_id: &str) -> String {
    fingerprint::of(&("converter", op, model_id))
}

/// Local operator latencies are rounded to the millisecond so that repeated
/// runs produce identical statistics.
fn quantize(secs: f64) -> f64 {
    (secs * 1000.0).round() / 1000.0
}

pub struct Engine<'a> {
    pub udfs: &'a UdfRegistry,
    pub backend: &'a dyn Backend,
    pub cache: &'a ResultCache,
    pub converters: &'a ConverterStore,
}

/// One operator's result for one input record.
struct Step {
    records: Vec<Record>,
    trace: OpRecordTrace,
}

#[derive(Default)]
struct Spend {
    latency_s: f64,
    usd: f64,
    input_tokens: u64,
    output_tokens: u64,
    calls: u32,
}

impl Spend {
    fn charge(&mut self, backend: &dyn Backend, model: &ModelSpec, req: &PromptRequest) -> Result<String> {
        self.calls += 1;
        let r = backend.generate(model, req)?;
        self.latency_s += r.latency_s;
        self.usd += r.usd;
        self.input_tokens += r.input_tokens;
        self.output_tokens += r.output_tokens;
        Ok(r.text)
    }

    fn write(&self, t: &mut OpRecordTrace) {
        t.latency_s = self.latency_s;
        t.usd = self.usd;
        t.input_tokens = self.input_tokens;
        t.output_tokens = self.output_tokens;
        t.backend_calls = self.calls;
    }
}

fn merge_rows(rows_per_field: Vec<(&FieldSpec, Vec<FieldMap>)>, produces: &[FieldSpec]) -> Option<Vec<FieldMap>> {
    let n = rows_per_field.iter().map(|(_, r)| r.len()).max().unwrap_or(0);
    let mut out = Vec::new();
    for i in 0..n {
        let mut row = FieldMap::new();
        for (_, rows) in &rows_per_field {
            if let Some(r) = rows.get(i) {
                row.extend(r.clone());
            }
        }
        if produces.iter().all(|f| !f.required || row.contains_key(&f.name)) {
            out.push(row);
        }
    }
    (!out.is_empty()).then_some(out)
}

impl Engine<'_> {
    fn model<'c>(&self, cfg: &'c PhysicalOpConfig) -> Result<&'c ModelSpec> {
        cfg.model
            .as_ref()
            .ok_or_else(|| Error::InvalidPlan(format!("{} has no model", cfg.logical_op_id)))
    }

    fn per_field(
        &self,
        op: &LogicalOperator,
        model: &ModelSpec,
        rec: &Record,
        produces: &[FieldSpec],
        cardinality: Cardinality,
        cfg: &PhysicalOpConfig,
        spend: &mut Spend,
    ) -> Result<Option<Vec<FieldMap>>> {
        let reqs = marshal_field_prompts(&op.op_id, rec, &op.depends_on, produces, cardinality, cfg.token_budget);
        let mut rows = Vec::new();
        for (field, req) in produces.iter().zip(reqs) {
            let text = spend.charge(self.backend, model, &fit_to_model(req, model)?)?;
            match parse_structured_response(&text, std::slice::from_ref(field), cardinality) {
                Some(r) => rows.push((field, r)),
                None if field.required => return Ok(None),
                None => {}
            }
        }
        Ok(merge_rows(rows, produces))
    }

    /// Field maps computed by a model-backed convert, `None` to drop.
    fn llm_convert(
        &self,
        op: &LogicalOperator,
        cfg: &PhysicalOpConfig,
        rec: &Record,
        produces: &[FieldSpec],
        cardinality: Cardinality,
        spend: &mut Spend,
    ) -> Result<Option<Vec<FieldMap>>> {
        let model = self.model(cfg)?;
        if cfg.strategy == Strategy::LlmBondedWithFallback {
            let req = marshal_bonded_prompt(&op.op_id, rec, &op.depends_on, produces, cardinality, cfg.token_budget);
            let text = spend.charge(self.backend, model, &fit_to_model(req, model)?)?;
            if let Some(maps) = parse_structured_response(&text, produces, cardinality) {
                return Ok(Some(maps));
            }
            if produces.len() == 1 {
                // the per-field prompt would be the same request again
                return Ok(None);
            }
        }
        self.per_field(op, model, rec, produces, cardinality, cfg, spend)
    }

    fn converter(&self, op: &LogicalOperator, cfg: &PhysicalOpConfig) -> Result<Arc<SynthesizedConverter>> {
        let model = self.model(cfg)?;
        self.converters
            .get(&converter_key(op, &model.model_id))
            .ok_or_else(|| Error::Execution(format!("no synthesized converter for {}", op.label())))
    }

    /// Applies a record-at-a-time operator. Errors returned here abort the
    /// run; per-record failures are reported in the trace instead.
    fn apply_record(
        &self,
        op: &LogicalOperator,
        cfg: &PhysicalOpConfig,
        rec: &Record,
        sampling: bool,
    ) -> Result<Step> {
        let config_id = cfg.config_id();
        let mut trace = OpRecordTrace::new(&op.op_id, &config_id, &rec.source_id, rec.source_index);
        let start = Instant::now();
        let mut spend = Spend::default();
        let lineage = LineageStep {
            op_id: op.op_id.clone(),
            config_id: config_id.clone(),
        };
        let local = !(cfg.strategy.is_llm());
        let mut records = Vec::new();
        match &op.kind {
            OpKind::Scan { .. } => records.push(rec.clone()),
            OpKind::Project { columns } => {
                let mut r = rec.clone();
                r.values.retain(|k, _| columns.contains(k));
                records.push(r);
            }
            OpKind::Filter { predicate } => {
                let keep = match (predicate, cfg.strategy) {
                    (Predicate::Udf(name), _) => (self.udfs.filter(name)?)(rec),
                    (Predicate::Text(text), s) if s.is_llm() => {
                        let model = self.model(cfg)?;
                        let req = marshal_filter_prompt(&op.op_id, rec, &op.depends_on, text, cfg.token_budget);
                        match fit_to_model(req, model).and_then(|req| spend.charge(self.backend, model, &req)) {
                            Ok(answer) => parse_verdict(&answer),
                            Err(e) => {
                                log::warn!("{} on {}: {e}", op.op_id, rec.source_id);
                                trace.outcome = Outcome::Error;
                                spend.write(&mut trace);
                                return Ok(Step { records, trace });
                            }
                        }
                    }
                    _ => return Err(Error::InvalidPlan(format!("{}: filter cannot use {}", op.op_id, cfg.strategy))),
                };
                if keep || sampling {
                    records.push(rec.clone());
                }
                trace.outcome = if keep { Outcome::Emitted(1) } else { Outcome::Dropped };
            }
            OpKind::Convert {
                target_schema,
                cardinality,
                udf,
                produces,
                ..
            } => {
                let maps = match (udf, cfg.strategy) {
                    (Some(name), _) => (self.udfs.convert(name)?)(rec),
                    (None, Strategy::Hardcoded) => Some(vec![FieldMap::new()]),
                    (None, Strategy::CodeSynth) => apply_converter(self.converter(op, cfg)?.as_ref(), rec).map(|m| vec![m]),
                    (None, s) if s.is_llm() => {
                        match self.llm_convert(op, cfg, rec, produces, *cardinality, &mut spend) {
                            Ok(m) => m,
                            Err(e) => {
                                log::warn!("{} on {}: {e}", op.op_id, rec.source_id);
                                trace.outcome = Outcome::Error;
                                spend.write(&mut trace);
                                return Ok(Step { records, trace });
                            }
                        }
                    }
                    _ => return Err(Error::InvalidPlan(format!("{}: convert cannot use {}", op.op_id, cfg.strategy))),
                };
                for m in maps.unwrap_or_default() {
                    let mut r = rec.clone();
                    r.schema = target_schema.clone();
                    r.values.extend(m.clone());
                    r.lineage.push(lineage.clone());
                    records.push(r);
                    trace.produced.push(m);
                }
                trace.outcome = if records.is_empty() {
                    Outcome::Dropped
                } else {
                    Outcome::Emitted(records.len())
                };
            }
            OpKind::Limit { .. } | OpKind::GroupBy { .. } | OpKind::Aggregate { .. } => {
                return Err(Error::InvalidPlan(format!("{} is not a per-record operator", op.op_id)));
            }
        }
        if !matches!(op.kind, OpKind::Filter { .. } | OpKind::Convert { .. }) {
            trace.outcome = Outcome::Emitted(records.len());
        }
        spend.write(&mut trace);
        if local {
            trace.latency_s = quantize(start.elapsed().as_secs_f64());
        }
        Ok(Step { records, trace })
    }

    /// Operators that need their whole input at once.
    fn apply_batch(&self, op: &LogicalOperator, cfg: &PhysicalOpConfig, input: &[Record]) -> (Vec<Record>, Vec<OpRecordTrace>) {
        let config_id = cfg.config_id();
        let mut traces: Vec<OpRecordTrace> = input
            .iter()
            .map(|r| {
                let mut t = OpRecordTrace::new(&op.op_id, &config_id, &r.source_id, r.source_index);
                t.outcome = Outcome::Dropped;
                t
            })
            .collect();
        let mut out = Vec::new();
        match &op.kind {
            OpKind::Limit { n } => {
                for (r, t) in input.iter().zip(traces.iter_mut()).take(*n) {
                    out.push(r.clone());
                    t.outcome = Outcome::Emitted(1);
                }
            }
            OpKind::GroupBy { group_fields, aggregate } => {
                let mut groups: BTreeMap<Vec<String>, (usize, Vec<&Record>)> = BTreeMap::new();
                for (i, r) in input.iter().enumerate() {
                    let key = group_fields
                        .iter()
                        .map(|f| r.get(f).map_or_else(|| "null".into(), Value::render))
                        .collect();
                    groups.entry(key).or_insert((i, Vec::new())).1.push(r);
                }
                let mut firsts: Vec<(usize, Vec<&Record>)> = groups.into_values().collect();
                firsts.sort_by_key(|(i, _)| *i);
                for (first, members) in firsts {
                    let head = &input[first];
                    let mut r = Record::new("GroupBy", &head.source_id, head.source_index);
                    for f in group_fields {
                        if let Some(v) = head.get(f) {
                            r.values.insert(f.clone(), v.clone());
                        }
                    }
                    r.values.insert(aggregate.output_field(), aggregate_values(aggregate, &members));
                    out.push(r);
                    traces[first].outcome = Outcome::Emitted(1);
                }
            }
            OpKind::Aggregate { function } => {
                let all: Vec<&Record> = input.iter().collect();
                let (sid, idx) = input.first().map_or(("aggregate".to_string(), 0), |r| (r.source_id.clone(), r.source_index));
                let mut r = Record::new("Aggregate", &sid, idx);
                r.values.insert(function.output_field(), aggregate_values(function, &all));
                out.push(r);
                if let Some(t) = traces.first_mut() {
                    t.outcome = Outcome::Emitted(1);
                }
            }
            _ => unreachable!("per-record operators are not batched"),
        }
        (out, traces)
    }

    /// Runs operator `op` over `input` as one stage with a worker pool.
    pub(crate) fn run_stage(
        &self,
        op: &LogicalOperator,
        cfg: &PhysicalOpConfig,
        input: &[Record],
        workers: usize,
        sampling: bool,
    ) -> Result<(Vec<Record>, Vec<OpRecordTrace>)> {
        if is_blocking(op) {
            return Ok(self.apply_batch(op, cfg, input));
        }
        let workers = workers.clamp(1, input.len().max(1));
        let steps: Vec<Result<Step>> = if workers == 1 {
            input.iter().map(|r| self.apply_record(op, cfg, r, sampling)).collect()
        } else {
            let next = AtomicUsize::new(0);
            let slots: Vec<Mutex<Option<Result<Step>>>> = input.iter().map(|_| Mutex::new(None)).collect();
            std::thread::scope(|s| {
                for _ in 0..workers {
                    s.spawn(|| loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= input.len() {
                            break;
                        }
                        let step = self.apply_record(op, cfg, &input[i], sampling);
                        *slots[i].lock().unwrap() = Some(step);
                    });
                }
            });
            slots
                .into_iter()
                .map(|m| m.into_inner().unwrap().expect("every slot filled"))
                .collect()
        };
        let mut records = Vec::new();
        let mut traces = Vec::new();
        for step in steps {
            let step = step?;
            records.extend(step.records);
            traces.push(step.trace);
        }
        Ok((records, traces))
    }
}

fn is_blocking(op: &LogicalOperator) -> bool {
    matches!(op.kind, OpKind::Limit { .. } | OpKind::GroupBy { .. } | OpKind::Aggregate { .. })
}

fn aggregate_values(f: &AggFunc, records: &[&Record]) -> Value {
    let nums = |field: &str| -> Vec<f64> { records.iter().filter_map(|r| r.get(field)?.as_f64()).collect() };
    match f {
        AggFunc::Count => Value::Number(records.len() as f64),
        AggFunc::Sum(field) => Value::Number(nums(field).iter().sum()),
        AggFunc::Avg(field) => {
            let v = nums(field);
            if v.is_empty() {
                Value::Null
            } else {
                Value::Number(v.iter().sum::<f64>() / v.len() as f64)
            }
        }
        AggFunc::Min(field) => nums(field).into_iter().reduce(f64::min).map_or(Value::Null, Value::Number),
        AggFunc::Max(field) => nums(field).into_iter().reduce(f64::max).map_or(Value::Null, Value::Number),
    }
}

/// Where a run's records come from and how its results are cached.
pub struct RunInput<'r> {
    /// Scanned source records, ordered by source index.
    pub source: &'r [Record],
    /// Cache namespace: dataset id plus a content fingerprint.
    pub dataset_key: String,
}

pub struct RunOutput {
    pub records: Vec<Record>,
    pub trace: ExecutionTrace,
}

/// Cache key of the first `len` operators of `plan`.
pub fn prefix_key(plan: &PhysicalPlan, len: usize, dataset_key: &str, backend_id: &str) -> CacheKey {
    CacheKey::new(dataset_key, &plan.prefix_fingerprint(len, backend_id))
}

impl Engine<'_> {
    /// Longest cached prefix: its length, output, and the traces of every
    /// operator inside it (marked cached).
    fn cached_prefix(&self, plan: &PhysicalPlan, input: &RunInput) -> (usize, Vec<Record>, Vec<OpRecordTrace>) {
        let backend = self.backend.id();
        for len in (1..=plan.configs.len()).rev() {
            let Some((records, _)) = self.cache.get_records(&prefix_key(plan, len, &input.dataset_key, &backend)) else {
                continue;
            };
            let mut traces = Vec::new();
            for j in 1..=len {
                if let Some((_, t)) = self.cache.get_records(&prefix_key(plan, j, &input.dataset_key, &backend)) {
                    traces.extend(t.into_iter().map(|mut e| {
                        e.cached = true;
                        e
                    }));
                }
            }
            return (len, records, traces);
        }
        (0, input.source.to_vec(), Vec::new())
    }

    fn store(&self, plan: &PhysicalPlan, len: usize, input: &RunInput, records: &[Record], traces: &[OpRecordTrace]) -> Result<()> {
        let key = prefix_key(plan, len, &input.dataset_key, &self.backend.id());
        self.cache.put_records(key, "", records.to_vec(), traces.to_vec())
    }

    /// Executes `plan` over the scanned source. Output order is by source
    /// index, then emission order, in both modes.
    pub fn execute(&self, plan: &PhysicalPlan, input: &RunInput, mode: ExecMode) -> Result<RunOutput> {
        plan.validate().map_err(Error::InvalidPlan)?;
        let start = Instant::now();
        let (done, records, mut traces) = self.cached_prefix(plan, input);
        let mut records = match mode {
            ExecMode::Parallel(workers) => {
                let mut current = records;
                for k in done..plan.configs.len() {
                    let (op, cfg) = (&plan.logical.operators[k], &plan.configs[k]);
                    let (out, t) = self.run_stage(op, cfg, &current, workers, false)?;
                    self.store(plan, k + 1, input, &out, &t)?;
                    traces.extend(t);
                    current = out;
                }
                current
            }
            ExecMode::Serial => self.execute_serial(plan, input, done, records, &mut traces)?,
        };
        records.sort_by_key(|r| r.source_index);
        Ok(RunOutput {
            records,
            trace: ExecutionTrace {
                entries: traces,
                wall_time_s: start.elapsed().as_secs_f64(),
            },
        })
    }

    fn execute_serial(
        &self,
        plan: &PhysicalPlan,
        input: &RunInput,
        done: usize,
        source: Vec<Record>,
        traces: &mut Vec<OpRecordTrace>,
    ) -> Result<Vec<Record>> {
        let mut chain = Chain {
            engine: self,
            plan,
            source: source.into(),
            nodes: (done..plan.configs.len()).map(Node::new).collect(),
        };
        let mut out = Vec::new();
        while let Some(r) = chain.pull(chain.nodes.len())? {
            out.push(r);
        }
        for node in chain.nodes {
            if node.exhausted {
                self.store(plan, node.op + 1, input, &node.produced, &node.traces)?;
            }
            traces.extend(node.traces);
        }
        Ok(out)
    }
}

struct Node {
    op: usize,
    buffer: VecDeque<Record>,
    /// Upstream returned end of input and every input has been processed.
    exhausted: bool,
    emitted: usize,
    produced: Vec<Record>,
    traces: Vec<OpRecordTrace>,
}

impl Node {
    fn new(op: usize) -> Self {
        Node {
            op,
            buffer: VecDeque::new(),
            exhausted: false,
            emitted: 0,
            produced: Vec::new(),
            traces: Vec::new(),
        }
    }
}

/// Pull-based operator chain: `pull(k)` yields the next output of the
/// `k`-th node, with `pull(0)` reading the source.
struct Chain<'e, 'p> {
    engine: &'e Engine<'e>,
    plan: &'p PhysicalPlan,
    source: VecDeque<Record>,
    nodes: Vec<Node>,
}

impl Chain<'_, '_> {
    fn pull(&mut self, k: usize) -> Result<Option<Record>> {
        if k == 0 {
            return Ok(self.source.pop_front());
        }
        let idx = k - 1;
        loop {
            if let Some(r) = self.nodes[idx].buffer.pop_front() {
                self.nodes[idx].emitted += 1;
                return Ok(Some(r));
            }
            if self.nodes[idx].exhausted {
                return Ok(None);
            }
            let op_index = self.nodes[idx].op;
            let op = &self.plan.logical.operators[op_index];
            let cfg = &self.plan.configs[op_index];
            if let OpKind::Limit { n } = op.kind {
                if self.nodes[idx].emitted >= n {
                    return Ok(None);
                }
            }
            if is_blocking(op) && !matches!(op.kind, OpKind::Limit { .. }) {
                let mut all = Vec::new();
                while let Some(r) = self.pull(k - 1)? {
                    all.push(r);
                }
                let (out, t) = self.engine.apply_batch(op, cfg, &all);
                let node = &mut self.nodes[idx];
                node.produced.extend(out.iter().cloned());
                node.buffer.extend(out);
                node.traces.extend(t);
                node.exhausted = true;
                continue;
            }
            match self.pull(k - 1)? {
                None => {
                    self.nodes[idx].exhausted = true;
                }
                Some(r) => {
                    let step = if let OpKind::Limit { .. } = op.kind {
                        let mut t = OpRecordTrace::new(&op.op_id, &cfg.config_id(), &r.source_id, r.source_index);
                        t.outcome = Outcome::Emitted(1);
                        Step { records: vec![r], trace: t }
                    } else {
                        self.engine.apply_record(op, cfg, &r, false)?
                    };
                    let node = &mut self.nodes[idx];
                    node.produced.extend(step.records.iter().cloned());
                    node.buffer.extend(step.records);
                    node.traces.push(step.trace);
                }
            }
        }
    }
}
