//! The end-to-end driver: compile, sample, enumerate, prune, estimate,
//! choose, execute.

use serde::{Deserialize, Serialize};

use crate::cache::ResultCache;
use crate::cost::{
    aggregate_stats, choose, estimate, pareto_frontier, ExecMode, PlanEstimate, Policy, SampleConfig, StatsTable,
};
use crate::datasource::{scan, DatasetRegistry};
use crate::error::{Error, Result};
use crate::fingerprint;
use crate::generators::Backend;
use crate::logical::{compile, enumerate_reorderings_capped, CompiledPipeline, PipelineDescription, MAX_REORDERINGS};
use crate::physical::{enumerate_physical, make_sentinels, naive_eliminate, ModelRegistry, ParamSpace, PhysicalPlan, Strategy};
use crate::record::Record;
use crate::schema::SchemaRegistry;
use crate::trace::{ExecutionTrace, TraceTotals};
use crate::udf::UdfRegistry;

use super::engine::{ConverterStore, Engine, RunInput};
use super::sampling::SentinelTotals;

#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub sample: SampleConfig,
    pub mode: ExecMode,
    /// Defaults to every configured model, strategy and budget.
    pub space: Option<ParamSpace>,
    pub max_reorderings: usize,
    /// Use these statistics instead of sampling.
    pub stats: Option<StatsTable>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            sample: SampleConfig::default(),
            mode: ExecMode::Serial,
            space: None,
            max_reorderings: MAX_REORDERINGS,
            stats: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateEstimate {
    #[serde(flatten)]
    pub estimate: PlanEstimate,
    pub on_frontier: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingReport {
    pub input_records: usize,
    pub sampled_records: usize,
    pub overhead: TraceTotals,
    pub wall_time_s: f64,
    pub sentinels: Vec<SentinelTotals>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub policy: Policy,
    pub constraint_met: bool,
    pub chosen_fingerprint: String,
    pub chosen_listing: String,
    pub chosen_estimate: PlanEstimate,
    pub logical_plans: usize,
    pub reorderings_truncated: bool,
    pub physical_candidates: usize,
    pub after_elimination: usize,
    pub unestimable: usize,
    pub frontier_size: usize,
    pub estimates: Vec<CandidateEstimate>,
    pub sampling: Option<SamplingReport>,
    /// Absent for `explain`, which does not execute the chosen plan.
    pub execution: Option<TraceTotals>,
    pub execution_wall_time_s: Option<f64>,
    pub output_records: usize,
    /// Backend requests issued by this invocation.
    pub backend_calls: u64,
}

impl RunReport {
    pub fn frontier(&self) -> impl Iterator<Item = &PlanEstimate> {
        self.estimates.iter().filter(|c| c.on_frontier).map(|c| &c.estimate)
    }
}

/// Result of planning without the final execution.
pub struct Optimized {
    pub candidates: Vec<PhysicalPlan>,
    pub estimates: Vec<PlanEstimate>,
    pub frontier: Vec<usize>,
    pub chosen: usize,
    pub constraint_met: bool,
    pub stats: StatsTable,
    pub report: RunReport,
    pub source: Vec<Record>,
    pub dataset_key: String,
}

impl Optimized {
    pub fn chosen_plan(&self) -> &PhysicalPlan {
        &self.candidates[self.chosen]
    }
}

/// Everything the optimizer reads: registries, backend and cache.
pub struct Session<'a> {
    pub schemas: &'a SchemaRegistry,
    pub datasets: &'a DatasetRegistry,
    pub models: &'a ModelRegistry,
    pub udfs: &'a UdfRegistry,
    pub backend: &'a dyn Backend,
    pub cache: &'a ResultCache,
    pub converters: &'a ConverterStore,
}

impl<'a> Session<'a> {
    pub fn engine(&self) -> Engine<'a> {
        Engine {
            udfs: self.udfs,
            backend: self.backend,
            cache: self.cache,
            converters: self.converters,
        }
    }

    pub fn compile(&self, desc: &PipelineDescription) -> Result<CompiledPipeline> {
        compile(desc, self.schemas, self.datasets, self.udfs)
    }

    /// Scans the pipeline's dataset. The cache namespace includes a digest
    /// of the scanned content, so edited files never hit stale entries.
    pub fn scan(&self, compiled: &CompiledPipeline) -> Result<(Vec<Record>, String)> {
        let out = scan(&compiled.dataset, &compiled.schemas)?;
        for w in &out.warnings {
            log::warn!("{w}");
        }
        let key = format!(
            "{}@{}",
            compiled.dataset.id(),
            fingerprint::short(&fingerprint::of(&out.records))
        );
        Ok((out.records, key))
    }

    pub fn optimize(&self, compiled: &CompiledPipeline, policy: &Policy, config: &OptimizerConfig) -> Result<Optimized> {
        policy.validate()?;
        config.sample.validate()?;
        let calls_before = self.backend.calls();
        let (source, dataset_key) = self.scan(compiled)?;
        let plan = &compiled.plan;
        let reorderings = enumerate_reorderings_capped(plan, config.max_reorderings);
        let sentinels = make_sentinels(plan, self.models)?;
        let mut space = config.space.clone().unwrap_or_else(|| ParamSpace::full(self.models));

        let (stats, sampling) = match &config.stats {
            Some(s) => {
                // no samples, so no synthesized converters to run
                space.strategies.retain(|s| *s != Strategy::CodeSynth);
                (s.clone(), None)
            }
            None => {
                let k = config.sample.sample_size(source.len());
                let input = RunInput {
                    source: &source[..k],
                    dataset_key: format!("{dataset_key}#sample{k}"),
                };
                let workers = match config.mode {
                    ExecMode::Serial => 1,
                    ExecMode::Parallel(w) => w,
                };
                let outcome = self.engine().run_sentinels(plan, &sentinels, &space, &input, workers)?;
                let stats = aggregate_stats(plan, &outcome.samples)?;
                let report = SamplingReport {
                    input_records: source.len(),
                    sampled_records: k,
                    overhead: outcome.overhead(),
                    wall_time_s: outcome.trace.wall_time_s,
                    sentinels: outcome.sentinels,
                };
                (stats, Some(report))
            }
        };

        let candidates = enumerate_physical(&reorderings.plans, &space)?;
        let physical_candidates = candidates.len();
        let sentinel_fps: Vec<String> = sentinels.iter().map(|s| s.plan.fingerprint.clone()).collect();
        let kept = naive_eliminate(candidates, &stats, &sentinel_fps);
        let after_elimination = kept.len();

        let mut plans = Vec::new();
        let mut estimates = Vec::new();
        let mut unestimable = 0;
        for p in kept {
            match estimate(&p, &stats, source.len(), config.mode) {
                Ok(e) => {
                    plans.push(p);
                    estimates.push(e);
                }
                Err(Error::MissingStats(key)) => {
                    log::debug!("skipping {}: no statistics for {key}", fingerprint::short(&p.fingerprint));
                    unestimable += 1;
                }
                Err(e) => return Err(e),
            }
        }
        if estimates.is_empty() {
            return Err(Error::EmptyCandidates);
        }
        let frontier = pareto_frontier(&estimates);
        let choice = choose(&estimates, &frontier, policy)?;
        let chosen = &plans[choice.index];
        let on_frontier: std::collections::HashSet<usize> = frontier.iter().copied().collect();
        let report = RunReport {
            policy: *policy,
            constraint_met: choice.constraint_met,
            chosen_fingerprint: chosen.fingerprint.clone(),
            chosen_listing: chosen.listing(),
            chosen_estimate: estimates[choice.index].clone(),
            logical_plans: reorderings.plans.len(),
            reorderings_truncated: reorderings.truncated,
            physical_candidates,
            after_elimination,
            unestimable,
            frontier_size: frontier.len(),
            estimates: estimates
                .iter()
                .enumerate()
                .map(|(i, e)| CandidateEstimate {
                    estimate: e.clone(),
                    on_frontier: on_frontier.contains(&i),
                })
                .collect(),
            sampling,
            execution: None,
            execution_wall_time_s: None,
            output_records: 0,
            backend_calls: self.backend.calls() - calls_before,
        };
        Ok(Optimized {
            candidates: plans,
            estimates,
            frontier,
            chosen: choice.index,
            constraint_met: choice.constraint_met,
            stats,
            report,
            source,
            dataset_key,
        })
    }

    /// Executes one plan over the pipeline's full dataset.
    pub fn execute(&self, plan: &PhysicalPlan, source: &[Record], dataset_key: &str, mode: ExecMode) -> Result<(Vec<Record>, ExecutionTrace)> {
        let input = RunInput {
            source,
            dataset_key: dataset_key.to_string(),
        };
        let out = self.engine().execute(plan, &input, mode)?;
        Ok((out.records, out.trace))
    }

    pub fn optimize_and_run(
        &self,
        compiled: &CompiledPipeline,
        policy: &Policy,
        config: &OptimizerConfig,
    ) -> Result<(Vec<Record>, RunReport, Optimized)> {
        let calls_before = self.backend.calls();
        let opt = self.optimize(compiled, policy, config)?;
        let (records, trace) = self.execute(opt.chosen_plan(), &opt.source, &opt.dataset_key, config.mode)?;
        let mut report = opt.report.clone();
        report.execution = Some(trace.totals());
        report.execution_wall_time_s = Some(trace.wall_time_s);
        report.output_records = records.len();
        report.backend_calls = self.backend.calls() - calls_before;
        Ok((records, report, opt))
    }
}
