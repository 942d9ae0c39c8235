mod common;

use std::collections::BTreeSet;
use std::time::Instant;

use common::*;
use proptest::prelude::*;
use sempipe::cache::ResultCache;
use sempipe::cost::{
    choose, estimate, pareto_frontier, ExecMode, OperatorStats, PlanEstimate, Policy, StatsKey, StatsTable,
};
use sempipe::datasource::scan;
use sempipe::generators::{
    apply_converter, count_tokens, marshal_filter_prompt, reduce_input, synthesize_converter, Backend, Behavior,
    MockBackend, MockProfile, MockRule, MockTable, TaskKind,
};
use sempipe::logical::{enumerate_reorderings, validate_dependencies};
use sempipe::physical::{enumerate_physical, make_sentinels, naive_eliminate, ParamSpace, Strategy as Exec, TokenBudget};
use sempipe::record::{Record, Value};
use sempipe::schema::{missing_fields, FieldKind, FieldSpec, SchemaRegistry};
use sempipe::trace::Outcome;
use serde_json::json;

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig {
        cases: n,
        ..ProptestConfig::default()
    }
}

// schemas ---------------------------------------------------------------------

/// Up to six schemas; schema i may extend any earlier one and declares some
/// of eight shared field names.
fn schema_forest() -> impl Strategy<Value = Vec<(Option<usize>, Vec<usize>)>> {
    prop::collection::vec((any::<prop::sample::Index>(), any::<bool>(), prop::collection::btree_set(0..8usize, 0..4)), 1..6)
        .prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (p, has_parent, fields))| {
                    let parent = (has_parent && i > 0).then(|| p.index(i));
                    (parent, fields.into_iter().collect())
                })
                .collect()
        })
}

fn build_registry(forest: &[(Option<usize>, Vec<usize>)]) -> (SchemaRegistry, Vec<String>) {
    let mut reg = SchemaRegistry::new();
    let mut names: Vec<String> = Vec::new();
    for (i, (parent, fields)) in forest.iter().enumerate() {
        let name = format!("S{i}");
        let inherited: BTreeSet<String> = match parent {
            Some(p) => reg.effective_fields(&names[*p]).unwrap().into_iter().map(|f| f.name).collect(),
            None => BTreeSet::new(),
        };
        let own: Vec<FieldSpec> = fields
            .iter()
            .map(|f| format!("f{f}"))
            .filter(|f| !inherited.contains(f))
            .map(|f| FieldSpec::new(&f, FieldKind::String, "a field"))
            .collect();
        reg.define_schema(&name, parent.map(|p| names[p].as_str()), own, "generated").unwrap();
        names.push(name);
    }
    (reg, names)
}

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn missing_fields_partition_the_output(forest in schema_forest(), a in any::<prop::sample::Index>(), b in any::<prop::sample::Index>()) {
        let (reg, names) = build_registry(&forest);
        let (a, b) = (&names[a.index(names.len())], &names[b.index(names.len())]);
        let names_of = |s: &str| -> BTreeSet<String> { reg.effective_fields(s).unwrap().into_iter().map(|f| f.name).collect() };
        let missing: BTreeSet<String> = missing_fields(&reg, a, b).unwrap().into_iter().map(|f| f.name).collect();
        let (ea, eb) = (names_of(a), names_of(b));
        prop_assert!(missing.is_disjoint(&ea));
        let shared: BTreeSet<String> = eb.intersection(&ea).cloned().collect();
        prop_assert_eq!(missing.union(&shared).cloned().collect::<BTreeSet<_>>(), eb);
    }
}

proptest! {
    #![proptest_config(cases(16))]

    #[test]
    fn scan_is_deterministic(files in prop::collection::btree_map("[a-z]{1,8}\\.txt", "[ -~]{0,40}", 0..12)) {
        let mut fx = Fixture::new(MockTable::default());
        let dir = fx.path("data");
        std::fs::create_dir_all(&dir).unwrap();
        for (name, body) in &files {
            std::fs::write(dir.join(name), body).unwrap();
        }
        fx.register("d", &dir);
        let handle = fx.datasets.get("d").unwrap();
        let first = scan(&handle, &fx.schemas).unwrap().records;
        let second = scan(&handle, &fx.schemas).unwrap().records;
        prop_assert_eq!(first.len(), files.len());
        prop_assert_eq!(first, second);
    }

    #[test]
    fn cached_prefix_equals_fresh_output(n in 0usize..30, workers in 1usize..6) {
        let (fx, _) = Fixture::legal(n);
        let plan = champion_plan(&fx, LEGAL_PIPELINE);
        let (source, key) = fx.session().scan(&fx.compile(LEGAL_PIPELINE)).unwrap();
        let mode = if workers == 1 { ExecMode::Serial } else { ExecMode::Parallel(workers) };
        let (first, _) = fx.session().execute(&plan, &source, &key, mode).unwrap();
        let (cached, trace) = fx.session().execute(&plan, &source, &key, mode).unwrap();
        prop_assert!(trace.entries.iter().all(|e| e.cached));

        let mut fresh_fx = Fixture::new(fx.backend.table().clone());
        fresh_fx.cache = ResultCache::disabled();
        let (fresh, _) = fresh_fx.session().execute(&plan, &source, &key, mode).unwrap();
        prop_assert_eq!(&cached, &fresh);
        prop_assert_eq!(&first, &fresh);
    }
}

// logical planner -------------------------------------------------------------

/// Op i: (is_convert, dependency picks). Dependencies are drawn from the
/// base fields and fields produced by earlier converts.
fn op_block() -> impl Strategy<Value = Vec<(bool, Vec<prop::sample::Index>)>> {
    prop::collection::vec((any::<bool>(), prop::collection::vec(any::<prop::sample::Index>(), 1..3)), 1..=6)
}

fn block_pipeline(block: &[(bool, Vec<prop::sample::Index>)]) -> (String, Vec<(Vec<String>, Vec<String>)>) {
    let mut avail = base_fields();
    let mut schemas = Vec::new();
    let mut ops = Vec::new();
    let mut oracle = Vec::new();
    for (i, (is_convert, picks)) in block.iter().enumerate() {
        let deps: BTreeSet<String> = picks.iter().map(|p| avail[p.index(avail.len())].clone()).collect();
        let deps: Vec<String> = deps.into_iter().collect();
        if *is_convert {
            let field = format!("x{i}");
            schemas.push(json!({"name": format!("S{i}"), "parent": "TextFile", "fields": [{"name": field, "desc": "derived"}]}));
            ops.push(json!({"kind": "convert", "schema": format!("S{i}"), "depends_on": deps}));
            oracle.push((deps, vec![field.clone()]));
            avail.push(field);
        } else {
            ops.push(json!({"kind": "filter", "predicate": format!("condition {i}"), "depends_on": deps}));
            oracle.push((deps, vec![]));
        }
    }
    (json!({"schemas": schemas, "dataset": "legal", "ops": ops}).to_string(), oracle)
}

fn orders(plans: &[sempipe::logical::LogicalPlan]) -> BTreeSet<Vec<String>> {
    plans.iter().map(|p| p.op_ids().into_iter().map(str::to_string).collect()).collect()
}

proptest! {
    #![proptest_config(cases(96))]

    #[test]
    fn reorderings_are_the_linear_extensions(block in op_block()) {
        let (fx, _) = Fixture::legal(0);
        let (json, oracle) = block_pipeline(&block);
        let plan = fx.compile(&json).plan;
        let r = enumerate_reorderings(&plan);
        let want = count_valid_orders(&oracle, &mut vec![false; oracle.len()], &mut base_fields());
        prop_assert_eq!(r.plans.len(), want);
        prop_assert_eq!(orders(&r.plans).len(), want);
        for p in &r.plans {
            prop_assert!(validate_dependencies(p).is_empty());
        }
        let all = orders(&r.plans);
        for p in r.plans.iter().take(8) {
            prop_assert_eq!(&orders(&enumerate_reorderings(p).plans), &all);
        }
    }
}

proptest! {
    #![proptest_config(cases(12))]

    #[test]
    fn deterministic_reorderings_agree_on_output(
        filters in prop::collection::vec((2usize..5, 0usize..5), 1..4),
        sender_digit in 0usize..10,
        n in 0usize..40,
    ) {
        let (mut fx, _) = Fixture::legal(n);
        let mut ops = vec![json!({"kind": "convert", "schema": "Email", "udf": "extract_email_headers", "depends_on": "contents"})];
        for (j, (m, r)) in filters.iter().enumerate() {
            let (m, r) = (*m, *r % *m);
            let name = format!("index_mod_{j}");
            fx.udfs.register_filter(&name, move |rec: &Record| rec.source_index % m == r);
            ops.push(json!({"kind": "filter", "udf": name, "depends_on": "contents"}));
        }
        let suffix = format!("{sender_digit}@enron.com");
        fx.udfs.register_filter("sender_suffix", move |rec: &Record| {
            rec.get("sender").and_then(Value::as_str).is_some_and(|s| s.ends_with(&suffix))
        });
        ops.push(json!({"kind": "filter", "udf": "sender_suffix", "depends_on": "sender"}));
        let desc = json!({
            "schemas": [{"name": "Email", "parent": "TextFile", "fields": [
                {"name": "sender", "desc": "The sender"}, {"name": "subject", "desc": "The subject"}]}],
            "dataset": "legal",
            "ops": ops,
        });
        let compiled = fx.compile(&desc.to_string());
        let (source, key) = fx.session().scan(&compiled).unwrap();
        let logical = enumerate_reorderings(&compiled.plan).plans;
        let physical = enumerate_physical(&logical, &ParamSpace::full(&fx.models)).unwrap();
        prop_assert_eq!(physical.len(), logical.len());
        let mut outputs = BTreeSet::new();
        for p in &physical {
            let (out, _) = fx.session().execute(p, &source, &key, ExecMode::Serial).unwrap();
            outputs.insert(ids(&out));
        }
        prop_assert_eq!(outputs.len(), 1);
        prop_assert_eq!(fx.backend.calls(), 0);
    }
}

// physical planner ------------------------------------------------------------

fn space_strategy() -> impl Strategy<Value = (Vec<bool>, Vec<bool>, Vec<bool>)> {
    (
        prop::collection::vec(any::<bool>(), 3),
        prop::collection::vec(any::<bool>(), 3),
        prop::collection::vec(any::<bool>(), 4),
    )
        .prop_filter("nonempty", |(m, s, b)| m.iter().any(|x| *x) && s.iter().any(|x| *x) && b.iter().any(|x| *x))
}

const THREE_OPS: &str = r#"{
  "schemas": [{"name": "Email", "parent": "TextFile", "fields": [
    {"name": "sender", "desc": "The sender"}, {"name": "subject", "desc": "The subject"}]}],
  "dataset": "legal",
  "ops": [
    {"kind": "convert", "schema": "Email", "depends_on": "contents"},
    {"kind": "filter", "predicate": "The email refers to a fraudulent scheme", "depends_on": "contents"},
    {"kind": "filter", "predicate": "The email is not quoting from a news article", "depends_on": "contents"}
  ]
}"#;

proptest! {
    #![proptest_config(cases(48))]

    #[test]
    fn candidate_count_matches_closed_form((m, s, b) in space_strategy()) {
        let (fx, _) = Fixture::legal(0);
        let full = ParamSpace::full(&fx.models);
        let text_models: Vec<_> = full.models.iter().filter(|x| !x.is_vision()).cloned().collect();
        let strategies = [Exec::LlmBondedWithFallback, Exec::LlmPerField, Exec::CodeSynth];
        let budgets = [0.1, 0.5, 0.9, 1.0];
        let space = ParamSpace {
            models: text_models.iter().zip(&m).filter(|(_, k)| **k).map(|(x, _)| x.clone()).collect(),
            strategies: strategies.iter().zip(&s).filter(|(_, k)| **k).map(|(x, _)| *x).collect(),
            budgets: budgets.iter().zip(&b).filter(|(_, k)| **k).map(|(x, _)| TokenBudget::new(*x).unwrap()).collect(),
        };
        let logical = enumerate_reorderings(&fx.compile(THREE_OPS).plan).plans;
        let got = enumerate_physical(&logical, &space);

        let (nm, nb) = (space.models.len(), space.budgets.len());
        let has = |x: Exec| space.strategies.contains(&x);
        let champion_in = space.models.iter().any(|x| x.tier == sempipe::physical::Tier::Champion);
        let convert = (has(Exec::LlmBondedWithFallback) as usize + has(Exec::LlmPerField) as usize) * nm * nb
            + (has(Exec::CodeSynth) && champion_in) as usize;
        let filter = has(Exec::LlmBondedWithFallback) as usize * nm * nb;
        let per_plan = convert * filter * filter;
        if per_plan == 0 {
            prop_assert!(got.is_err());
        } else {
            let got = got.unwrap();
            prop_assert_eq!(got.len(), logical.len() * per_plan);
            for p in &got {
                prop_assert!(p.validate().is_ok());
                for c in &p.configs {
                    prop_assert!(c.validate().is_ok());
                }
            }
        }
    }
}

#[test]
fn sentinels_survive_enumeration_and_elimination() {
    let (fx, _) = Fixture::legal(40);
    let compiled = fx.compile(LEGAL_PIPELINE);
    let sentinels = make_sentinels(&compiled.plan, &fx.models).unwrap();
    let logical = enumerate_reorderings(&compiled.plan).plans;
    let all = enumerate_physical(&logical, &ParamSpace::full(&fx.models)).unwrap();
    let fps: BTreeSet<&str> = all.iter().map(|p| p.fingerprint.as_str()).collect();
    for s in &sentinels {
        assert!(fps.contains(s.plan.fingerprint.as_str()), "{:?} sentinel missing", s.tier);
    }
    let opt = fx
        .session()
        .optimize(&compiled, &Policy::MinCostAtFixedQuality(0.8), &config(ExecMode::Serial))
        .unwrap();
    let sentinel_fps: Vec<String> = sentinels.iter().map(|s| s.plan.fingerprint.clone()).collect();
    let kept = naive_eliminate(all, &opt.stats, &sentinel_fps);
    let kept: BTreeSet<&str> = kept.iter().map(|p| p.fingerprint.as_str()).collect();
    for fp in &sentinel_fps {
        assert!(kept.contains(fp.as_str()));
    }
}

// cost model ------------------------------------------------------------------

fn triples(max: usize) -> impl Strategy<Value = Vec<PlanEstimate>> {
    prop::collection::vec((0u8..20, 0u8..20, 0u8..=10), 1..max).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (r, u, q))| PlanEstimate::new(&format!("p{i:05}"), r as f64, u as f64 / 100.0, q as f64 / 10.0))
            .collect()
    })
}

fn brute_frontier(e: &[PlanEstimate]) -> Vec<usize> {
    (0..e.len()).filter(|&i| !e.iter().any(|o| o.dominates(&e[i]))).collect()
}

fn policies() -> impl Strategy<Value = Policy> {
    prop_oneof![
        (0.001f64..0.25).prop_map(Policy::MaxQualityAtFixedCost),
        (0.5f64..20.0).prop_map(Policy::MaxQualityAtFixedRuntime),
        (0.05f64..=1.0).prop_map(Policy::MinCostAtFixedQuality),
    ]
}

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn frontier_matches_pairwise_dominance(e in triples(2000)) {
        prop_assert_eq!(pareto_frontier(&e), brute_frontier(&e));
    }

    #[test]
    fn choice_is_a_satisfying_frontier_member(e in triples(80), policy in policies()) {
        let frontier = pareto_frontier(&e);
        let c = choose(&e, &frontier, &policy).unwrap();
        prop_assert!(frontier.contains(&c.index));
        let any = e.iter().any(|x| policy.satisfied_by(x));
        prop_assert_eq!(c.constraint_met, any);
        if any {
            prop_assert!(policy.satisfied_by(&e[c.index]));
        }
    }

    #[test]
    fn dominated_additions_change_nothing(e in triples(80), pick in any::<prop::sample::Index>(), worse in (0u8..5, 0u8..5, 0u8..5), policy in policies()) {
        let base = &e[pick.index(e.len())];
        let (dr, du, dq) = worse;
        prop_assume!(dr + du + dq > 0);
        let mut grown = e.clone();
        grown.push(PlanEstimate::new(
            "zz-dominated",
            base.est_runtime_s + dr as f64,
            base.est_usd + du as f64 / 100.0,
            (base.est_quality - dq as f64 / 10.0).max(-1.0),
        ));
        let (f1, f2) = (pareto_frontier(&e), pareto_frontier(&grown));
        prop_assert_eq!(&f1, &f2);
        prop_assert_eq!(choose(&e, &f1, &policy).unwrap(), choose(&grown, &f2, &policy).unwrap());
    }
}

fn filters_pipeline(k: usize) -> String {
    let ops: Vec<_> = (0..k)
        .map(|i| json!({"kind": "filter", "predicate": format!("condition {i}"), "depends_on": "contents"}))
        .collect();
    json!({"dataset": "legal", "ops": ops}).to_string()
}

fn single_model_space(fx: &Fixture) -> ParamSpace {
    ParamSpace {
        models: vec![fx.models.champion().unwrap().clone()],
        strategies: vec![Exec::LlmBondedWithFallback],
        budgets: vec![TokenBudget::FULL],
    }
}

proptest! {
    #![proptest_config(cases(48))]

    #[test]
    fn estimates_are_linear_in_input(k in 1usize..4, sel in prop::collection::vec((0.0f64..=1.0, 0.0f64..2.0, 0.0f64..0.1), 3), n in 1usize..5000) {
        let (fx, _) = Fixture::legal(0);
        let logical = enumerate_reorderings(&fx.compile(&filters_pipeline(k)).plan).plans;
        let plans = enumerate_physical(&logical, &single_model_space(&fx)).unwrap();
        let mut stats = StatsTable::default();
        for (op, cfg) in plans[0].steps() {
            let idx = op.op_id[2..].parse::<usize>().unwrap();
            let (s, lat, usd) = if idx == 0 { (1.0, 0.0, 0.0) } else { sel[idx - 1] };
            let mut row = OperatorStats::new(StatsKey::of(cfg), lat, usd);
            row.selectivity = s;
            stats.insert(row);
        }
        for p in &plans {
            let a = estimate(p, &stats, n, ExecMode::Serial).unwrap();
            let b = estimate(p, &stats, 2 * n, ExecMode::Serial).unwrap();
            prop_assert_eq!(b.est_usd, 2.0 * a.est_usd);
            prop_assert_eq!(b.est_runtime_s, 2.0 * a.est_runtime_s);
            prop_assert_eq!(b.est_quality, a.est_quality);
        }
    }

    #[test]
    fn ascending_selectivity_minimizes_runtime(sels in prop::collection::vec(0.0f64..=1.0, 1..=5)) {
        let (fx, _) = Fixture::legal(0);
        let k = sels.len();
        let logical = enumerate_reorderings(&fx.compile(&filters_pipeline(k)).plan).plans;
        prop_assert_eq!(logical.len(), (1..=k).product::<usize>());
        let plans = enumerate_physical(&logical, &single_model_space(&fx)).unwrap();
        let mut stats = StatsTable::default();
        for (op, cfg) in plans[0].steps() {
            let idx = op.op_id[2..].parse::<usize>().unwrap();
            let mut row = OperatorStats::new(StatsKey::of(cfg), if idx == 0 { 0.0 } else { 1.0 }, 0.0);
            row.selectivity = if idx == 0 { 1.0 } else { sels[idx - 1] };
            stats.insert(row);
        }
        let runtime = |p: &sempipe::physical::PhysicalPlan| estimate(p, &stats, 1000, ExecMode::Serial).unwrap().est_runtime_s;
        let best = plans.iter().map(runtime).fold(f64::INFINITY, f64::min);
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| sels[a].total_cmp(&sels[b]));
        let want: Vec<String> = std::iter::once("op00".to_string()).chain(order.iter().map(|i| format!("op{:02}", i + 1))).collect();
        let ascending = plans.iter().find(|p| p.logical.op_ids() == want).unwrap();
        prop_assert!((runtime(ascending) - best).abs() <= 1e-9 * best.max(1.0));
    }
}

// executor --------------------------------------------------------------------

proptest! {
    #![proptest_config(cases(12))]

    #[test]
    fn modes_agree_and_traces_conserve(n in 0usize..40, workers in 2usize..16, pick in any::<prop::sample::Index>(), error_rate in 0.0f64..0.3) {
        let (mut fx, _) = Fixture::legal(n);
        let mut table = fx.backend.table().clone();
        for p in table.profiles.values_mut() {
            p.error_rate = error_rate;
        }
        fx.backend = MockBackend::new(table);
        fx.cache = ResultCache::disabled();
        let compiled = fx.compile(LEGAL_PIPELINE);
        let mut space = ParamSpace::full(&fx.models);
        space.strategies.retain(|s| *s != Exec::CodeSynth);
        let plans = enumerate_physical(&enumerate_reorderings(&compiled.plan).plans, &space).unwrap();
        let plan = &plans[pick.index(plans.len())];
        let (source, key) = fx.session().scan(&compiled).unwrap();
        let (serial, st) = fx.session().execute(plan, &source, &key, ExecMode::Serial).unwrap();
        let (parallel, pt) = fx.session().execute(plan, &source, &key, ExecMode::Parallel(workers)).unwrap();
        prop_assert_eq!(&serial, &parallel);
        for trace in [&st, &pt] {
            for cfg in &plan.configs[1..] {
                let t = trace.op_totals(&cfg.logical_op_id);
                let emitted = trace.for_op(&cfg.logical_op_id).filter(|e| matches!(e.outcome, Outcome::Emitted(_))).count();
                prop_assert_eq!(t.records_in, emitted + t.dropped + t.errors);
            }
        }
    }
}

proptest! {
    #![proptest_config(cases(6))]

    #[test]
    fn parallel_wall_time_is_bounded(n in 10usize..50, workers in 2usize..8) {
        const L: f64 = 0.01;
        let table = MockTable {
            default_profile: MockProfile { latency_s: L, sleep: true, ..MockProfile::default() },
            ..MockTable::default()
        };
        let mut fx = Fixture::new(table);
        fx.cache = ResultCache::disabled();
        let data = fx.path("docs");
        write_corpus(&data, &emails(n));
        fx.register("legal", &data);
        let json = filters_pipeline(1);
        let plan = champion_plan(&fx, &json);
        let (source, key) = fx.session().scan(&fx.compile(&json)).unwrap();
        let t = Instant::now();
        fx.session().execute(&plan, &source, &key, ExecMode::Parallel(workers)).unwrap();
        let wall = t.elapsed().as_secs_f64();
        let rounds = n.div_ceil(workers) as f64;
        prop_assert!(wall >= rounds * L, "{wall} < {}", rounds * L);
        // one extra round absorbs the ragged last batch; the rest is scheduling slack
        prop_assert!(wall <= n as f64 * L / workers as f64 + L + 0.25, "{wall}");
    }
}

#[test]
fn bonded_fallback_always_terminates_in_a_known_outcome() {
    let corpus = emails(40);
    let mut rules = Vec::new();
    for (i, e) in corpus.iter().enumerate() {
        let id = Some(e.file.as_str());
        match i % 5 {
            0 => rules.push(MockRule::answer("*", TaskKind::Convert, "sender", id, json!(e.sender))),
            1 => rules.push(MockRule::behave("*", TaskKind::Convert, "sender", id, Behavior::Garbage)),
            2 => rules.push(MockRule::behave("*", TaskKind::Convert, "sender", id, Behavior::Refuse)),
            3 => rules.push(MockRule::behave("*", TaskKind::Convert, "sender", id, Behavior::Error)),
            _ => {}
        }
        if i % 2 == 0 {
            rules.push(MockRule::answer("*", TaskKind::Convert, "subject", id, json!(e.subject)));
        }
    }
    let mut fx = Fixture::new(MockTable {
        rules,
        ..MockTable::default()
    });
    let data = fx.path("emails");
    write_corpus(&data, &corpus);
    fx.register("legal", &data);
    let json = r#"{"schemas": [{"name": "Email", "parent": "TextFile", "fields": [
        {"name": "sender", "desc": "The sender"}, {"name": "subject", "desc": "The subject"}]}],
        "dataset": "legal", "ops": [{"kind": "convert", "schema": "Email"}]}"#;
    let plan = champion_plan(&fx, json);
    let (source, key) = fx.session().scan(&fx.compile(json)).unwrap();
    let (out, trace) = fx.session().execute(&plan, &source, &key, ExecMode::Serial).unwrap();
    let entries: Vec<_> = trace.for_op("op01").collect();
    assert_eq!(entries.len(), corpus.len());
    for e in &entries {
        assert!(matches!(e.outcome, Outcome::Emitted(1) | Outcome::Dropped | Outcome::Error), "{:?}", e.outcome);
    }
    let emitted = entries.iter().filter(|e| e.outcome == Outcome::Emitted(1)).count();
    assert_eq!(out.len(), emitted);
    assert!(emitted > 0 && emitted < corpus.len());
}

// generators ------------------------------------------------------------------

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn mock_results_obey_the_price_table(text in "[ -~\n]{0,300}", predicate in "[a-z ]{1,30}", budget in 1u8..=10, pick in 0usize..3) {
        let (fx, _) = Fixture::legal(0);
        let rec = Record::new("TextFile", "f.txt", 0).with("contents", Value::String(text));
        let req = marshal_filter_prompt("op01", &rec, &["contents".into()], &predicate, TokenBudget::new(budget as f64 / 10.0).unwrap());
        let model = &fx.models.models[pick];
        let before = fx.backend.calls();
        let first = fx.backend.generate(model, &req).unwrap();
        prop_assert_eq!(first.usd, model.cost(first.input_tokens, first.output_tokens));
        for _ in 0..4 {
            prop_assert_eq!(&fx.backend.generate(model, &req).unwrap(), &first);
        }
        prop_assert_eq!(fx.backend.calls() - before, 5);
    }

    #[test]
    fn reduce_input_is_monotone(text in "([a-z]{1,6}[ \n]){0,200}", a in 1u8..=10, b in 1u8..=10) {
        let (lo, hi) = (a.min(b) as f64 / 10.0, a.max(b) as f64 / 10.0);
        let r = |x: f64| count_tokens(&reduce_input(&text, TokenBudget::new(x).unwrap()));
        prop_assert!(r(lo) <= r(hi));
        prop_assert_eq!(reduce_input(&text, TokenBudget::FULL), text);
    }
}

proptest! {
    #![proptest_config(cases(16))]

    #[test]
    fn synthesized_converters_make_no_calls(n in 3usize..30) {
        let corpus = emails(n);
        let table = MockTable::default();
        let backend = MockBackend::new(table);
        let models = sempipe::cli::default_models();
        let champion = models.champion().unwrap();
        let records: Vec<Record> = corpus
            .iter()
            .enumerate()
            .map(|(i, e)| {
                Record::new("TextFile", &e.file, i)
                    .with("contents", Value::String(format!("From: {}\nSubject: {}\n\nbody\n", e.sender, e.subject)))
            })
            .collect();
        let samples: Vec<_> = records
            .iter()
            .zip(&corpus)
            .take(3)
            .map(|(r, e)| (r.clone(), [("sender".to_string(), Value::String(e.sender.clone()))].into_iter().collect()))
            .collect();
        let targets = vec![FieldSpec::new("sender", FieldKind::String, "The sender")];
        let (conv, _) = synthesize_converter("op01", &samples, &["contents".into()], &targets, champion, &backend).unwrap();
        let before = backend.calls();
        for (r, e) in records.iter().zip(&corpus) {
            let got = apply_converter(&conv, r).unwrap();
            prop_assert_eq!(got.get("sender").and_then(Value::as_str), Some(e.sender.as_str()));
        }
        prop_assert_eq!(backend.calls(), before);
    }
}
