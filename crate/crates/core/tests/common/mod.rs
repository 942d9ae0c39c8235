#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use sempipe::cache::ResultCache;
use sempipe::cli::default_models;
use sempipe::datasource::{DataSourceDescriptor, DatasetRegistry, SourceKind};
use sempipe::cost::{ExecMode, SampleConfig};
use sempipe::exec::{ConverterStore, OptimizerConfig, Session};
use sempipe::generators::{Behavior, MockBackend, MockProfile, MockRule, MockTable, TaskKind};
use sempipe::logical::{CompiledPipeline, PipelineDescription};
use sempipe::physical::ModelRegistry;
use sempipe::record::Record;
use sempipe::schema::SchemaRegistry;
use sempipe::udf::UdfRegistry;
use serde_json::json;
use tempfile::TempDir;

pub const CHEAP: &str = "gpt-3.5";
pub const MID: &str = "mixtral";
pub const CHAMPION: &str = "gpt-4";

pub const FRAUD: &str = "The email refers to a fraudulent scheme";
pub const NEWS: &str = "The email is not quoting from a news article";

#[derive(Debug, Clone)]
pub struct Email {
    pub file: String,
    pub sender: String,
    pub subject: String,
    pub fraud: bool,
    pub news: bool,
}

impl Email {
    pub fn relevant(&self) -> bool {
        self.fraud && !self.news
    }
}

pub fn emails(n: usize) -> Vec<Email> {
    (0..n)
        .map(|i| Email {
            file: format!("email{i:04}.txt"),
            sender: format!("trader{}@enron.com", i % 17),
            subject: format!("Deal review {i}"),
            fraud: i % 4 == 1 || i % 7 == 3,
            news: i % 3 == 0,
        })
        .collect()
}

fn email_text(e: &Email) -> String {
    let body = if e.fraud {
        "Move the losses into the Raptor entities before the quarter closes."
    } else {
        "Lunch is at noon on Thursday in the usual place."
    };
    let quote = if e.news { "\n\nAs reported in the Journal this morning, shares fell." } else { "" };
    format!("From: {}\nSubject: {}\n\n{body}{quote}\n", e.sender, e.subject)
}

pub const LEGAL_PIPELINE: &str = r#"{
  "schemas": [{"name": "Email", "parent": "TextFile",
               "doc": "An email message",
               "fields": [
                 {"name": "sender", "desc": "The email address of the sender"},
                 {"name": "subject", "desc": "The subject of the email"}]}],
  "dataset": "legal",
  "ops": [
    {"kind": "convert", "schema": "Email"},
    {"kind": "filter", "predicate": "The email is not quoting from a news article"},
    {"kind": "filter", "predicate": "The email refers to a fraudulent scheme"}
  ]
}"#;

/// Answers for every model, then the planted mistakes: the cheap tier
/// inverts the fraud filter and the mid tier inverts the news filter.
pub fn legal_table(corpus: &[Email]) -> MockTable {
    let mut rules = Vec::new();
    for e in corpus {
        let id = Some(e.file.as_str());
        rules.push(MockRule::answer("*", TaskKind::Convert, "sender", id, json!(e.sender)));
        rules.push(MockRule::answer("*", TaskKind::Convert, "subject", id, json!(e.subject)));
        rules.push(MockRule::answer("*", TaskKind::Filter, FRAUD, id, json!(e.fraud)));
        rules.push(MockRule::answer("*", TaskKind::Filter, NEWS, id, json!(!e.news)));
    }
    rules.push(MockRule::behave(CHEAP, TaskKind::Filter, FRAUD, None, Behavior::Negate));
    rules.push(MockRule::behave(MID, TaskKind::Filter, NEWS, None, Behavior::Negate));
    let mut table = MockTable {
        rules,
        ..MockTable::default()
    };
    for (m, per_token) in [(CHEAP, 2e-4), (MID, 4e-4), (CHAMPION, 1e-3), ("gpt-4v", 1e-3)] {
        table.profiles.insert(
            m.to_string(),
            MockProfile {
                latency_s: 0.05,
                latency_per_token_s: per_token,
                ..MockProfile::default()
            },
        );
    }
    table
}

pub fn write_corpus(dir: &Path, corpus: &[Email]) {
    std::fs::create_dir_all(dir).unwrap();
    for e in corpus {
        std::fs::write(dir.join(&e.file), email_text(e)).unwrap();
    }
}

/// Everything a [`Session`] borrows, owned in one place.
pub struct Fixture {
    pub dir: TempDir,
    pub schemas: SchemaRegistry,
    pub datasets: DatasetRegistry,
    pub models: ModelRegistry,
    pub udfs: UdfRegistry,
    pub backend: MockBackend,
    pub cache: ResultCache,
    pub converters: ConverterStore,
}

impl Fixture {
    pub fn new(table: MockTable) -> Self {
        let dir = tempfile::tempdir().unwrap();
        Fixture {
            datasets: DatasetRegistry::open(dir.path().join("datasets.toml")).unwrap(),
            dir,
            schemas: SchemaRegistry::new(),
            models: default_models(),
            udfs: UdfRegistry::with_builtins(),
            backend: MockBackend::new(table),
            cache: ResultCache::in_memory(),
            converters: ConverterStore::default(),
        }
    }

    pub fn legal(n: usize) -> (Self, Vec<Email>) {
        let corpus = emails(n);
        let mut fx = Fixture::new(legal_table(&corpus));
        let data = fx.dir.path().join("legal");
        write_corpus(&data, &corpus);
        fx.register("legal", &data);
        (fx, corpus)
    }

    pub fn register(&mut self, id: &str, location: &Path) {
        self.datasets
            .register(DataSourceDescriptor::new(id, SourceKind::DirectoryOfTextFiles, location, "TextFile"))
            .unwrap();
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn session(&self) -> Session<'_> {
        Session {
            schemas: &self.schemas,
            datasets: &self.datasets,
            models: &self.models,
            udfs: &self.udfs,
            backend: &self.backend,
            cache: &self.cache,
            converters: &self.converters,
        }
    }

    pub fn compile(&self, json: &str) -> CompiledPipeline {
        self.session().compile(&PipelineDescription::from_json(json).unwrap()).unwrap()
    }
}

pub fn config(mode: ExecMode) -> OptimizerConfig {
    OptimizerConfig {
        sample: SampleConfig::new(0.05, 3, None).unwrap(),
        mode,
        ..OptimizerConfig::default()
    }
}

pub fn ids(records: &[Record]) -> BTreeSet<String> {
    records.iter().map(|r| r.source_id.clone()).collect()
}

/// F1 of the output's (file, sender, subject) tuples against the relevant emails.
pub fn realized_f1(records: &[Record], corpus: &[Email]) -> f64 {
    let truth: BTreeSet<(String, String, String)> = corpus
        .iter()
        .filter(|e| e.relevant())
        .map(|e| (e.file.clone(), e.sender.clone(), e.subject.clone()))
        .collect();
    let got: BTreeSet<(String, String, String)> = records
        .iter()
        .map(|r| {
            let s = |f: &str| r.get(f).and_then(|v| v.as_str()).unwrap_or("").to_string();
            (r.source_id.clone(), s("sender"), s("subject"))
        })
        .collect();
    let tp = truth.intersection(&got).count() as f64;
    if tp == 0.0 {
        return if truth.is_empty() && got.is_empty() { 1.0 } else { 0.0 };
    }
    let p = tp / got.len() as f64;
    let r = tp / truth.len() as f64;
    2.0 * p * r / (p + r)
}

/// Counts orderings of `ops` ((needs, produces) pairs) in which every op's
/// inputs exist before it runs, starting from `avail`.
pub fn count_valid_orders(ops: &[(Vec<String>, Vec<String>)], placed: &mut Vec<bool>, avail: &mut Vec<String>) -> usize {
    if placed.iter().all(|p| *p) {
        return 1;
    }
    let mut n = 0;
    for i in 0..ops.len() {
        if placed[i] || !ops[i].0.iter().all(|f| avail.contains(f)) {
            continue;
        }
        placed[i] = true;
        let before = avail.len();
        avail.extend(ops[i].1.iter().cloned());
        n += count_valid_orders(ops, placed, avail);
        avail.truncate(before);
        placed[i] = false;
    }
    n
}

pub fn base_fields() -> Vec<String> {
    vec!["filename".to_string(), "contents".to_string()]
}

pub fn champion_plan(fx: &Fixture, json: &str) -> sempipe::physical::PhysicalPlan {
    let compiled = fx.compile(json);
    sempipe::physical::make_sentinels(&compiled.plan, &fx.models)
        .unwrap()
        .into_iter()
        .find(|s| s.tier == sempipe::physical::Tier::Champion)
        .unwrap()
        .plan
}
