//! Sentinel sampling: every operator is run, on the same champion-produced
//! inputs, under the champion's configuration and each alternative that the
//! optimizer needs statistics for.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::cache::{CacheEntry, CacheKey, CachePayload};
use crate::cost::{OpSamples, SampleSet};
use crate::error::{Error, Result};
use crate::fingerprint;
use crate::generators::synth::{synthesize_converter, SynthesizedConverter};
use crate::generators::GenerationResult;
use crate::logical::{LogicalOperator, LogicalPlan, OpKind};
use crate::physical::{
    code_synth_admissible, ParamSpace, PhysicalOpConfig, Sentinel, Strategy, Tier, TokenBudget,
};
use crate::record::Record;
use crate::trace::{ExecutionTrace, OpRecordTrace, Outcome, TraceTotals};

use super::engine::{converter_key, Engine, RunInput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentinelTotals {
    pub tier: Tier,
    pub fingerprint: String,
    pub totals: TraceTotals,
}

#[derive(Debug, Clone)]
pub struct SamplingOutcome {
    pub sample_size: usize,
    pub samples: SampleSet,
    /// Every record-level entry produced while sampling, synthesis calls included.
    pub trace: ExecutionTrace,
    pub sentinels: Vec<SentinelTotals>,
}

impl SamplingOutcome {
    pub fn overhead(&self) -> TraceTotals {
        self.trace.totals()
    }
}

#[derive(Serialize, Deserialize)]
struct SynthArtifact {
    converter: SynthesizedConverter,
    calls: Vec<GenerationResult>,
}

fn mark_cached(t: Vec<OpRecordTrace>) -> Vec<OpRecordTrace> {
    t.into_iter()
        .map(|mut e| {
            e.cached = true;
            e
        })
        .collect()
}

/// Configurations sampled for `op` besides the champion's: every other
/// admissible model with bonded prompting at full budget, the sentinels'
/// choices, and code synthesis where it applies.
fn alternatives(op: &LogicalOperator, k: usize, sentinels: &[Sentinel], space: &ParamSpace) -> Vec<PhysicalOpConfig> {
    let mut out: Vec<PhysicalOpConfig> = sentinels.iter().map(|s| s.plan.configs[k].clone()).collect();
    if op.requires_llm() {
        let mut models: Vec<_> = space.models.iter().filter(|m| m.is_vision() == op.needs_vision).collect();
        models.sort_by(|a, b| a.model_id.cmp(&b.model_id));
        for m in models {
            out.push(PhysicalOpConfig {
                logical_op_id: op.op_id.clone(),
                strategy: Strategy::LlmBondedWithFallback,
                model: Some(m.clone()),
                token_budget: TokenBudget::FULL,
            });
        }
    }
    let mut seen = BTreeSet::new();
    out.retain(|c| seen.insert(c.config_id()));
    out
}

impl Engine<'_> {
    fn sample_stage(
        &self,
        key: CacheKey,
        op: &LogicalOperator,
        cfg: &PhysicalOpConfig,
        input: &[Record],
        workers: usize,
    ) -> Result<(Vec<Record>, Vec<OpRecordTrace>)> {
        if let Some((records, trace)) = self.cache.get_records(&key) {
            return Ok((records, mark_cached(trace)));
        }
        let (records, trace) = self.run_stage(op, cfg, input, workers, true)?;
        self.cache.put_records(key, "", records.clone(), trace.clone())?;
        Ok((records, trace))
    }

    fn synthesize(
        &self,
        key: CacheKey,
        op: &LogicalOperator,
        cfg: &PhysicalOpConfig,
        input: &[Record],
        reference: &[OpRecordTrace],
    ) -> Result<Option<(SynthesizedConverter, Vec<OpRecordTrace>)>> {
        let entry_trace = |calls: &[GenerationResult], cached: bool| {
            calls
                .iter()
                .map(|g| {
                    let mut t = OpRecordTrace::new(&op.op_id, &format!("{}#synthesis", cfg.config_id()), "", 0);
                    t.outcome = Outcome::Emitted(0);
                    t.latency_s = g.latency_s;
                    t.usd = g.usd;
                    t.input_tokens = g.input_tokens;
                    t.output_tokens = g.output_tokens;
                    t.backend_calls = 1;
                    t.cached = cached;
                    t
                })
                .collect::<Vec<_>>()
        };
        if let Some(e) = self.cache.get(&key) {
            if let CachePayload::Artifact(json) = &e.payload {
                if let Ok(a) = serde_json::from_value::<SynthArtifact>(json.clone()) {
                    let t = entry_trace(&a.calls, true);
                    return Ok(Some((a.converter, t)));
                }
            }
        }
        let OpKind::Convert { produces, .. } = &op.kind else {
            return Ok(None);
        };
        // input i produced reference entry i
        let samples: Vec<(Record, _)> = input
            .iter()
            .zip(reference)
            .filter(|(_, t)| t.produced.len() == 1)
            .map(|(r, t)| (r.clone(), t.produced[0].clone()))
            .collect();
        if samples.len() < 2 {
            log::warn!("{}: too few champion samples to synthesize a converter", op.op_id);
            return Ok(None);
        }
        let model = cfg.model.as_ref().expect("code synthesis has a model");
        let (converter, calls) = synthesize_converter(&op.op_id, &samples, &op.depends_on, produces, model, self.backend)?;
        let artifact = SynthArtifact { converter, calls };
        self.cache.put(CacheEntry {
            key,
            stats_fingerprint: String::new(),
            payload: CachePayload::Artifact(serde_json::to_value(&artifact)?),
        })?;
        let t = entry_trace(&artifact.calls, false);
        Ok(Some((artifact.converter, t)))
    }

    /// Runs the sentinels over `input.source` (already cut to the sample).
    /// The champion sentinel drives: its per-operator inputs are what every
    /// other configuration is measured on, and its filters keep every
    /// record so later operators see the full sample.
    pub fn run_sentinels(
        &self,
        logical: &LogicalPlan,
        sentinels: &[Sentinel],
        space: &ParamSpace,
        input: &RunInput,
        workers: usize,
    ) -> Result<SamplingOutcome> {
        let champion = sentinels
            .iter()
            .find(|s| s.tier == Tier::Champion)
            .ok_or_else(|| Error::MissingTier(Tier::Champion.to_string()))?;
        let backend = self.backend.id();
        let mut samples = SampleSet::new();
        let mut trace = ExecutionTrace::default();
        let mut sentinel_totals: Vec<TraceTotals> = vec![TraceTotals::default(); sentinels.len()];
        let mut current: Vec<Record> = input.source.to_vec();
        let start = std::time::Instant::now();
        let synth_enabled = space.strategies.contains(&Strategy::CodeSynth);

        for (k, op) in logical.operators.iter().enumerate() {
            let base = fingerprint::of(&("sample", &logical.operators[..k], &champion.plan.configs[..k], &backend));
            let key_for = |cfg: &PhysicalOpConfig| CacheKey::new(&input.dataset_key, &fingerprint::of(&(&base, op, cfg)));
            let ref_cfg = &champion.plan.configs[k];
            let (next, reference) = self.sample_stage(key_for(ref_cfg), op, ref_cfg, &current, input_workers(workers))?;
            if op.requires_llm() && !reference.is_empty() && reference.iter().all(|t| t.outcome == Outcome::Error) {
                return Err(Error::Execution(format!(
                    "champion failed on every sampled record at {}",
                    op.label()
                )));
            }
            let mut runs = vec![(ref_cfg.clone(), reference.clone())];
            for cfg in alternatives(op, k, sentinels, space) {
                if cfg == *ref_cfg {
                    continue;
                }
                let (_, t) = self.sample_stage(key_for(&cfg), op, &cfg, &current, input_workers(workers))?;
                runs.push((cfg, t));
            }
            if synth_enabled && code_synth_admissible(op) {
                if let Some(m) = space.models.iter().find(|m| m.tier == Tier::Champion) {
                    let cfg = PhysicalOpConfig {
                        logical_op_id: op.op_id.clone(),
                        strategy: Strategy::CodeSynth,
                        model: Some(m.clone()),
                        token_budget: TokenBudget::FULL,
                    };
                    let synth_key = CacheKey::new(&input.dataset_key, &fingerprint::of(&(&base, op, &cfg, "synthesis")));
                    if let Some((conv, calls)) = self.synthesize(synth_key, op, &cfg, &current, &reference)? {
                        self.converters.insert(converter_key(op, &m.model_id), conv);
                        trace.entries.extend(calls);
                        let (_, t) = self.sample_stage(key_for(&cfg), op, &cfg, &current, input_workers(workers))?;
                        runs.push((cfg, t));
                    }
                }
            }
            for (i, s) in sentinels.iter().enumerate() {
                if let Some((_, t)) = runs.iter().find(|(c, _)| *c == s.plan.configs[k]) {
                    for e in t {
                        sentinel_totals[i].add(e);
                    }
                }
            }
            for (_, t) in &runs {
                trace.entries.extend(t.iter().cloned());
            }
            samples.insert(op.op_id.clone(), OpSamples { reference, runs });
            current = next;
        }
        trace.wall_time_s = start.elapsed().as_secs_f64();
        Ok(SamplingOutcome {
            sample_size: input.source.len(),
            samples,
            trace,
            sentinels: sentinels
                .iter()
                .zip(sentinel_totals)
                .map(|(s, totals)| SentinelTotals {
                    tier: s.tier,
                    fingerprint: s.plan.fingerprint.clone(),
                    totals,
                })
                .collect(),
        })
    }
}

fn input_workers(w: usize) -> usize {
    w.max(1)
}
