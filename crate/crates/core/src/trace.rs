use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::record::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "n")]
pub enum Outcome {
    Emitted(usize),
    Dropped,
    Error,
}

/// What one operator did with one input record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpRecordTrace {
    pub op_id: String,
    pub config_id: String,
    pub source_id: String,
    pub source_index: usize,
    pub latency_s: f64,
    pub usd: f64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub backend_calls: u32,
    pub outcome: Outcome,
    /// Fields computed by a convert, one map per emitted record.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub produced: Vec<BTreeMap<String, Value>>,
    /// Served from the result cache; no backend work was done this run.
    #[serde(default)]
    pub cached: bool,
}

impl OpRecordTrace {
    pub fn new(op_id: &str, config_id: &str, source_id: &str, source_index: usize) -> Self {
        OpRecordTrace {
            op_id: op_id.to_string(),
            config_id: config_id.to_string(),
            source_id: source_id.to_string(),
            source_index,
            latency_s: 0.0,
            usd: 0.0,
            input_tokens: 0,
            output_tokens: 0,
            backend_calls: 0,
            outcome: Outcome::Dropped,
            produced: Vec::new(),
            cached: false,
        }
    }

    pub fn emitted(&self) -> usize {
        match self.outcome {
            Outcome::Emitted(n) => n,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceTotals {
    pub records_in: usize,
    pub records_out: usize,
    pub dropped: usize,
    pub errors: usize,
    pub latency_s: f64,
    pub usd: f64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub backend_calls: u64,
    /// Cost actually spent this run, i.e. excluding cached entries.
    pub spent_usd: f64,
}

impl TraceTotals {
    pub fn add(&mut self, e: &OpRecordTrace) {
        self.records_in += 1;
        match e.outcome {
            Outcome::Emitted(n) => self.records_out += n,
            Outcome::Dropped => self.dropped += 1,
            Outcome::Error => self.errors += 1,
        }
        self.latency_s += e.latency_s;
        self.usd += e.usd;
        self.input_tokens += e.input_tokens;
        self.output_tokens += e.output_tokens;
        if !e.cached {
            self.backend_calls += u64::from(e.backend_calls);
            self.spent_usd += e.usd;
        }
    }

    pub fn merge(&mut self, other: &TraceTotals) {
        self.records_in += other.records_in;
        self.records_out += other.records_out;
        self.dropped += other.dropped;
        self.errors += other.errors;
        self.latency_s += other.latency_s;
        self.usd += other.usd;
        self.input_tokens += other.input_tokens;
        self.output_tokens += other.output_tokens;
        self.backend_calls += other.backend_calls;
        self.spent_usd += other.spent_usd;
    }
}

/// Per-record, per-operator execution log of one plan run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub entries: Vec<OpRecordTrace>,
    pub wall_time_s: f64,
}

impl ExecutionTrace {
    pub fn totals(&self) -> TraceTotals {
        let mut t = TraceTotals::default();
        for e in &self.entries {
            t.add(e);
        }
        t
    }

    pub fn op_totals(&self, op_id: &str) -> TraceTotals {
        let mut t = TraceTotals::default();
        for e in self.entries.iter().filter(|e| e.op_id == op_id) {
            t.add(e);
        }
        t
    }

    pub fn for_op<'a>(&'a self, op_id: &'a str) -> impl Iterator<Item = &'a OpRecordTrace> + 'a {
        self.entries.iter().filter(move |e| e.op_id == op_id)
    }

    pub fn extend(&mut self, other: ExecutionTrace) {
        self.entries.extend(other.entries);
        self.wall_time_s += other.wall_time_s;
    }
}
