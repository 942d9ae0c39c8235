//! The `sempipe` command line.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::cache::ResultCache;
use crate::cost::{estimate, ExecMode, Policy, SampleConfig, StatsTable};
use crate::datasource::{DataSourceDescriptor, DatasetRegistry, SourceKind};
use crate::error::{Error, Result};
use crate::exec::{ConverterStore, OptimizerConfig, RunReport, Session};
use crate::generators::{Backend, HttpBackend, HttpConfig, MockBackend, MockTable};
use crate::logical::{enumerate_reorderings_capped, PipelineDescription};
use crate::physical::{enumerate_physical, ModelRegistry, ModelSpec, ParamSpace, Strategy, Tier, TokenBudget};
use crate::record::Record;
use crate::schema::SchemaRegistry;
use crate::udf::UdfRegistry;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_CONSTRAINT_UNMET: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "sempipe", version, about = "Optimize and run semantic pipelines over unstructured data")]
pub struct Cli {
    /// Dataset registry file.
    #[arg(long, global = true, env = "SEMPIPE_DATASETS", default_value = "sempipe-datasets.toml")]
    pub datasets: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Register a named dataset.
    Register(RegisterArgs),
    /// Optimize a pipeline and execute the chosen plan.
    Run(PlanArgs),
    /// Sample and plan without executing; print the candidate space and choice.
    Explain(PlanArgs),
    /// Dump every candidate plan with its estimate as JSON lines, eliminated ones included.
    Plans(PlanArgs),
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    pub dataset_id: String,
    #[arg(long)]
    pub path: PathBuf,
    #[arg(long, default_value = "directory-of-text-files")]
    pub kind: String,
    #[arg(long, default_value = "TextFile")]
    pub schema: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendChoice {
    Mock,
    Http,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub pipeline: PathBuf,
    /// max-quality-at-cost=<usd>, max-quality-at-runtime=<s> or min-cost-at-quality=<q>.
    #[arg(long, default_value = "max-quality-at-cost=1000000")]
    pub policy: String,
    #[arg(long, default_value_t = 0.05)]
    pub sample_fraction: f64,
    #[arg(long, default_value_t = 3)]
    pub min_samples: usize,
    #[arg(long)]
    pub max_samples: Option<usize>,
    /// Worker threads per operator stage; 1 runs the serial engine.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, value_enum, default_value_t = BackendChoice::Mock)]
    pub backend: BackendChoice,
    /// Model registry (TOML). Defaults to a built-in four-model set.
    #[arg(long, env = "SEMPIPE_MODELS")]
    pub models: Option<PathBuf>,
    /// Mock answer table (JSON).
    #[arg(long)]
    pub mock_table: Option<PathBuf>,
    /// Base URL for http models that do not name their own endpoint.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long, default_value = "OPENAI_API_KEY")]
    pub api_key_env: String,
    #[arg(long, default_value = ".sempipe-cache")]
    pub cache_dir: PathBuf,
    #[arg(long)]
    pub no_cache: bool,
    /// Where result records go (JSON lines); stdout if absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Where the run report goes (JSON); stderr summary if absent.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Comma-separated token budgets.
    #[arg(long, value_delimiter = ',')]
    pub budgets: Option<Vec<f64>>,
    /// Comma-separated strategies (llm_bonded_with_fallback, llm_per_field, code_synth).
    #[arg(long, value_delimiter = ',')]
    pub strategies: Option<Vec<String>>,
    /// Replay statistics from a file instead of sampling.
    #[arg(long)]
    pub stats_in: Option<PathBuf>,
    /// Write the sampled statistics table.
    #[arg(long)]
    pub stats_out: Option<PathBuf>,
}

/// Built-in models: one per tier, priced per million tokens.
pub fn default_models() -> ModelRegistry {
    let mut vision = ModelSpec::new("gpt-4v", Tier::Vision, 10.0, 30.0);
    vision.pairs_with = Some(Tier::Champion);
    ModelRegistry::new(vec![
        ModelSpec::new("gpt-3.5", Tier::Cheap, 0.5, 1.5),
        ModelSpec::new("mixtral", Tier::Mid, 0.6, 0.6),
        ModelSpec::new("gpt-4", Tier::Champion, 10.0, 30.0),
        vision,
    ])
    .expect("built-in models are valid")
}

pub fn record_json(r: &Record) -> serde_json::Value {
    let fields: serde_json::Map<String, serde_json::Value> =
        r.values.iter().map(|(k, v)| (k.clone(), v.clone().into())).collect();
    json!({
        "schema": r.schema,
        "source_id": r.source_id,
        "source_index": r.source_index,
        "fields": fields,
    })
}

fn write_records(records: &[Record], path: Option<&Path>) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, &record_json(r))?;
        buf.push(b'\n');
    }
    match path {
        Some(p) => std::fs::write(p, buf)?,
        None => std::io::stdout().write_all(&buf)?,
    }
    Ok(())
}

fn summary(report: &RunReport) -> String {
    let mut s = String::new();
    s.push_str(&format!("logical plans: {}\n", report.logical_plans));
    s.push_str(&format!("physical candidates: {}\n", report.physical_candidates));
    s.push_str(&format!("after elimination: {}\n", report.after_elimination));
    s.push_str(&format!("frontier size: {}\n", report.frontier_size));
    if let Some(smp) = &report.sampling {
        s.push_str(&format!(
            "sampled {} of {} records: ${:.6}, {:.3} s, {} backend calls\n",
            smp.sampled_records, smp.input_records, smp.overhead.spent_usd, smp.overhead.latency_s, smp.overhead.backend_calls
        ));
        for t in &smp.sentinels {
            s.push_str(&format!("  sentinel {}: ${:.6}, {:.3} s\n", t.tier, t.totals.usd, t.totals.latency_s));
        }
    }
    s.push_str("frontier:\n");
    for e in report.frontier() {
        s.push_str(&format!(
            "  {}  runtime {:.3} s  cost ${:.6}  quality {:.4}\n",
            crate::fingerprint::short(&e.fingerprint),
            e.est_runtime_s,
            e.est_usd,
            e.est_quality
        ));
    }
    s.push_str(&format!(
        "policy {}: {}\nchosen plan {}:\n{}",
        report.policy,
        if report.constraint_met { "met" } else { "constraint_unmet" },
        crate::fingerprint::short(&report.chosen_fingerprint),
        report.chosen_listing
    ));
    if let Some(t) = &report.execution {
        s.push_str(&format!(
            "executed: {} records out, ${:.6} spent, {} backend calls\n",
            report.output_records, t.spent_usd, report.backend_calls
        ));
    }
    s
}

struct Loaded {
    schemas: SchemaRegistry,
    datasets: DatasetRegistry,
    models: ModelRegistry,
    udfs: UdfRegistry,
    backend: Box<dyn Backend>,
    cache: ResultCache,
    desc: PipelineDescription,
    policy: Policy,
    config: OptimizerConfig,
}

fn load(datasets: &Path, a: &PlanArgs) -> Result<Loaded> {
    if a.workers == 0 {
        return Err(Error::InvalidPlan("--workers must be at least 1".into()));
    }
    let policy: Policy = a.policy.parse()?;
    let desc = PipelineDescription::from_file(&a.pipeline)?;
    let models = match &a.models {
        Some(p) => ModelRegistry::from_file(p)?,
        None => default_models(),
    };
    let backend: Box<dyn Backend> = match a.backend {
        BackendChoice::Mock => {
            let table = match &a.mock_table {
                Some(p) => MockTable::from_file(p)?,
                None => MockTable::default(),
            };
            Box::new(MockBackend::new(table))
        }
        BackendChoice::Http => Box::new(HttpBackend::new(HttpConfig {
            api_key_env: a.api_key_env.clone(),
            default_endpoint: a.endpoint.clone(),
            ..HttpConfig::default()
        })),
    };
    let cache = if a.no_cache {
        ResultCache::disabled()
    } else {
        ResultCache::on_disk(&a.cache_dir)?
    };
    let mut space = ParamSpace::full(&models);
    if let Some(b) = &a.budgets {
        space.budgets = b.iter().map(|x| TokenBudget::new(*x)).collect::<Result<_>>()?;
    }
    if let Some(s) = &a.strategies {
        space.strategies = s.iter().map(|x| x.parse::<Strategy>()).collect::<Result<_>>()?;
    }
    let stats = a.stats_in.as_deref().map(StatsTable::load).transpose()?;
    let config = OptimizerConfig {
        sample: SampleConfig::new(a.sample_fraction, a.min_samples, a.max_samples)?,
        mode: if a.workers > 1 {
            ExecMode::Parallel(a.workers)
        } else {
            ExecMode::Serial
        },
        space: Some(space),
        stats,
        ..OptimizerConfig::default()
    };
    Ok(Loaded {
        schemas: SchemaRegistry::new(),
        datasets: DatasetRegistry::open(datasets)?,
        models,
        udfs: UdfRegistry::with_builtins(),
        backend,
        cache,
        desc,
        policy,
        config,
    })
}

fn emit_report(report: &RunReport, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, serde_json::to_vec_pretty(report)?)?,
        None => eprint!("{}", summary(report)),
    }
    Ok(())
}

fn plan_command(datasets: &Path, which: &Command, a: &PlanArgs) -> Result<i32> {
    let l = load(datasets, a)?;
    let converters = ConverterStore::default();
    let session = Session {
        schemas: &l.schemas,
        datasets: &l.datasets,
        models: &l.models,
        udfs: &l.udfs,
        backend: l.backend.as_ref(),
        cache: &l.cache,
        converters: &converters,
    };
    let compiled = session.compile(&l.desc)?;
    let (report, stats) = match which {
        Command::Run(_) => {
            let (records, report, opt) = session.optimize_and_run(&compiled, &l.policy, &l.config)?;
            write_records(&records, a.output.as_deref())?;
            (report, opt.stats)
        }
        Command::Explain(_) => {
            let opt = session.optimize(&compiled, &l.policy, &l.config)?;
            print!("{}", summary(&opt.report));
            (opt.report, opt.stats)
        }
        Command::Plans(_) => {
            let opt = session.optimize(&compiled, &l.policy, &l.config)?;
            let mut space = l.config.space.clone().unwrap_or_else(|| ParamSpace::full(&l.models));
            if l.config.stats.is_some() {
                space.strategies.retain(|s| *s != Strategy::CodeSynth);
            }
            let logical = enumerate_reorderings_capped(&compiled.plan, l.config.max_reorderings).plans;
            let kept: HashMap<&str, bool> = opt
                .candidates
                .iter()
                .zip(&opt.report.estimates)
                .map(|(p, c)| (p.fingerprint.as_str(), c.on_frontier))
                .collect();
            let mut out = std::io::stdout().lock();
            for p in enumerate_physical(&logical, &space)? {
                let est = estimate(&p, &opt.stats, opt.source.len(), l.config.mode).ok();
                let line = json!({
                    "fingerprint": p.fingerprint,
                    "est_runtime_s": est.as_ref().map(|e| e.est_runtime_s),
                    "est_usd": est.as_ref().map(|e| e.est_usd),
                    "est_quality": est.as_ref().map(|e| e.est_quality),
                    "eliminated": !kept.contains_key(p.fingerprint.as_str()),
                    "on_frontier": kept.get(p.fingerprint.as_str()).copied().unwrap_or(false),
                    "chosen": p.fingerprint == opt.report.chosen_fingerprint,
                    "order": p.logical.op_ids(),
                    "configs": p.configs.iter().map(|c| c.config_id()).collect::<Vec<_>>(),
                });
                writeln!(out, "{line}")?;
            }
            (opt.report, opt.stats)
        }
        Command::Register(_) => unreachable!(),
    };
    if let Some(p) = &a.stats_out {
        stats.save(p)?;
    }
    if a.report.is_some() || matches!(which, Command::Run(_)) {
        emit_report(&report, a.report.as_deref())?;
    }
    Ok(if report.constraint_met { EXIT_OK } else { EXIT_CONSTRAINT_UNMET })
}

pub fn execute(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Register(a) => {
            let mut reg = DatasetRegistry::open(&cli.datasets)?;
            let kind: SourceKind = a.kind.parse()?;
            let location = std::fs::canonicalize(&a.path).map_err(|_| Error::MissingLocation(a.path.clone()))?;
            let schemas = SchemaRegistry::new();
            schemas.get(&a.schema)?;
            reg.register(DataSourceDescriptor::new(&a.dataset_id, kind, location, &a.schema))?;
            println!("registered {} ({kind})", a.dataset_id);
            Ok(EXIT_OK)
        }
        c @ (Command::Run(a) | Command::Explain(a) | Command::Plans(a)) => plan_command(&cli.datasets, c, a),
    }
}

/// Parses `args`, runs, and maps failures to exit code 1.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}
