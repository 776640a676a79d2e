//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use chrono::{TimeZone, Utc};
use phenoscope_core::definition::{
    checklist_lint, ITEM_CONSTRAINTS, ITEM_INTENT, ITEM_LITERATURE, ITEM_LOGIC, ITEM_PHENOTYPES,
    ITEM_ROLES, ITEM_VOCABULARY,
};
use phenoscope_core::dsl::{parse, print};
use phenoscope_core::engine::{compile, execute, reference_evaluate, write_cohort_csv};
use phenoscope_core::lifecycle::{ChangeKind, Registry};
use phenoscope_core::metrics::{
    cohort_ids, confusion, derive_metrics, monitor, partition_confusion, stratify, AgeBins, Axis,
    Snapshot,
};
use phenoscope_core::synthgen::{generate, DiseaseModule, Rate, SimulationConfig};
use phenoscope_core::{
    CohortRecord, Comparator, ConceptItem, ConceptSet, ConfusionMatrix, CriterionRule, Day, Domain,
    EventQuery, GroundTruthLabels, Occurrence, Role, Store, TemporalWindow,
};
use proptest::strategy::{Strategy, ValueTree};
use proptest::test_runner::{Config, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use statrs::distribution::{ContinuousCDF, Normal};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let held: bool = $cond;
        if !held {
            return Err(format!($($msg)+));
        }
    };
}

fn day(s: &str) -> Day {
    Day::parse(s).unwrap()
}

fn c1_hypertension_example() -> Outcome {
    let store = Store::open(&common::fixture("three_person")).map_err(|e| e.to_string())?;
    let def = parse(&common::read_fixture("hypertension.phen")).map_err(|e| e.to_string())?;
    let plan = compile(&def, store.vocab()).map_err(|e| e.to_string())?;
    let (cohort, attrition) = execute(&plan, &store, 1).map_err(|e| e.to_string())?;
    // hand trace: P1's first drug 2002 (child of 2001) runs 1970-07-20..1970-10-28 with
    // a 1002 diagnosis on 1970-04-11; P2 has a drug but no diagnosis; P3 has no drug.
    let expected = vec![CohortRecord {
        person_id: 1,
        entry_date: day("1970-07-20"),
        exit_date: day("1970-10-28"),
    }];
    ensure!(cohort == expected, "cohort {cohort:?}");
    let entry = &attrition.stages[0];
    ensure!(entry.remaining == 2 && entry.removed == 1, "P3 should be the only non-candidate: {entry:?}");
    let rule = attrition.stages.last().unwrap();
    ensure!(
        rule.name == "htn dx before index" && rule.remaining == 1 && rule.removed == 1,
        "P2 should fall at the diagnosis rule: {rule:?}"
    );
    let oracle = reference_evaluate(&def, &store).map_err(|e| e.to_string())?;
    ensure!(oracle == (cohort, attrition), "reference evaluator disagrees: {oracle:?}");
    Ok("P1 1970-07-20..1970-10-28; P2 removed by rule; P3 no candidate".into())
}

fn c2_oracle_equivalence() -> Outcome {
    let synth = generate(&SimulationConfig::standard(42, 1000)).map_err(|e| e.to_string())?;
    let store = &synth.store;
    let strategy = common::executable_definition();
    let mut runner = TestRunner::new_with_rng(Config::default(), TestRng::deterministic_rng(Default::default()));
    let mut nonempty = 0;
    for i in 0..100 {
        let def = strategy
            .new_tree(&mut runner)
            .map_err(|e| e.to_string())?
            .current();
        let plan = compile(&def, store.vocab()).map_err(|e| e.to_string())?;
        let fast = execute(&plan, store, 1).map_err(|e| e.to_string())?;
        let slow = reference_evaluate(&def, store).map_err(|e| e.to_string())?;
        if fast != slow {
            return Err(format!(
                "definition {i} diverges\n{}\nengine: {:?}\nreference: {:?}",
                print(&def),
                fast.1,
                slow.1
            ));
        }
        nonempty += usize::from(!fast.0.is_empty());
    }
    ensure!(nonempty >= 20, "only {nonempty} of 100 definitions produced a cohort");
    Ok(format!("100 definitions x 1000 persons identical ({nonempty} non-empty cohorts)"))
}

fn check_pooling(
    cohort: &BTreeSet<i64>,
    labels: &GroundTruthLabels,
    store: &Store,
    axes: &[Axis],
) -> Result<(), String> {
    let population = labels.persons();
    let cells = partition_confusion(cohort, labels, &population, store, axes, &AgeBins::default())
        .map_err(|e| e.to_string())?;
    let pooled: ConfusionMatrix = cells.values().copied().sum();
    let direct = confusion(cohort, labels, &population).map_err(|e| e.to_string())?;
    ensure!(pooled == direct, "pooling law broken for {axes:?}: {pooled:?} vs {direct:?}");
    Ok(())
}

fn c3_strata_paradox() -> Outcome {
    let axes = [Axis::Race, Axis::Gender, Axis::AgeGroup];
    let def = parse(&common::read_fixture("hypertension.phen")).unwrap();

    let synth = generate(&SimulationConfig::standard(42, 10_000)).map_err(|e| e.to_string())?;
    let labels = synth.labels_for("hypertension").unwrap();
    let (cohort, _) = execute(&compile(&def, synth.store.vocab()).unwrap(), &synth.store, 1).unwrap();
    let ids = cohort_ids(&cohort);
    let report = stratify(&ids, labels, &labels.persons(), &synth.store, &axes, &AgeBins::default(), 10)
        .map_err(|e| e.to_string())?;
    ensure!(report.strata.len() == 100, "{} strata", report.strata.len());
    let total: u64 = report.strata.iter().map(|s| s.n).sum();
    ensure!(total == 10_000, "strata cover {total} persons");
    let mean = total as f64 / report.strata.len() as f64;
    // each cell is Binomial(10000, 1/100); allow 4.5 sd per cell
    let sd = (10_000.0 * 0.01 * 0.99f64).sqrt();
    let worst = report
        .strata
        .iter()
        .map(|s| (s.n as f64 - 100.0).abs() / sd)
        .fold(0.0, f64::max);
    ensure!((mean - 100.0).abs() < 1e-9, "mean n {mean}");
    ensure!(worst < 4.5, "a cell is {worst:.2} sd from 100");
    check_pooling(&ids, labels, &synth.store, &axes)?;

    let mut config = SimulationConfig::standard(42, 10_000);
    let races = &mut config.demographics.race;
    for w in races.values_mut() {
        *w = 0.9995 / 5.0;
    }
    races.insert("rare".into(), 0.0005);
    let synth = generate(&config).map_err(|e| e.to_string())?;
    let labels = synth.labels_for("hypertension").unwrap();
    let (cohort, _) = execute(&compile(&def, synth.store.vocab()).unwrap(), &synth.store, 1).unwrap();
    let ids = cohort_ids(&cohort);
    let report = stratify(&ids, labels, &labels.persons(), &synth.store, &axes, &AgeBins::default(), 10)
        .map_err(|e| e.to_string())?;
    let small: Vec<_> = report.strata.iter().filter(|s| s.n < 10).collect();
    ensure!(!small.is_empty(), "no stratum below 10");
    ensure!(
        small.iter().all(|s| s.suppressed && s.metrics.is_none() && s.confusion.is_none()),
        "a small stratum leaks metrics"
    );
    ensure!(
        report.strata.iter().all(|s| s.suppressed == (s.n < 10)),
        "suppression flag disagrees with n"
    );
    check_pooling(&ids, labels, &synth.store, &axes)?;
    let rare = small.iter().filter(|s| s.axes["race"] == "rare").count();
    Ok(format!(
        "100 strata, mean n 100, max deviation {worst:.2} sd; rare race gives {} suppressed strata ({rare} rare)",
        small.len()
    ))
}

fn disparity_config(b_rate: f64) -> SimulationConfig {
    let mut config = SimulationConfig::standard(2024, 10_000);
    config.background.events_per_person = 5.0;
    config.diseases = vec![DiseaseModule {
        name: "depression".into(),
        prevalence: Rate::Flat(0.5),
        diagnosis_concepts: vec![1201],
        diagnosis_emission_prob: Rate::Grouped {
            default: 0.9,
            race: [("black".to_string(), b_rate)].into(),
            gender: BTreeMap::new(),
        },
        repeat_diagnoses_mean: 0.5,
        false_positive_prob: Rate::Flat(0.0),
        drug: None,
        measurement: None,
    }];
    config
}

fn c4_disparity() -> Outcome {
    let def = parse(
        "phenotype \"depression dx\" v1 {\n  conceptset dep { 1201 }\n  entry first condition in dep\n  observation prior 0 days\n  exit offset 0\n}\n",
    )
    .map_err(|e| e.to_string())?;
    let z = Normal::new(0.0, 1.0).unwrap().inverse_cdf(0.995);
    let mut overall = Vec::new();
    let mut lines = Vec::new();
    for b_rate in [0.9, 0.45] {
        let synth = generate(&disparity_config(b_rate)).map_err(|e| e.to_string())?;
        let labels = synth.labels_for("depression").unwrap();
        let (cohort, _) = execute(&compile(&def, synth.store.vocab()).unwrap(), &synth.store, 1).unwrap();
        let ids = cohort_ids(&cohort);
        let report = stratify(&ids, labels, &labels.persons(), &synth.store, &[Axis::Race], &AgeBins::default(), 10)
            .map_err(|e| e.to_string())?;
        let b = report
            .strata
            .iter()
            .find(|s| s.axes["race"] == "black")
            .ok_or("no subgroup B stratum")?;
        let m = b.confusion.unwrap();
        let cases = m.tp + m.fn_;
        ensure!((800..=1200).contains(&cases), "subgroup B has {cases} true cases");
        let sens = b.metrics.unwrap().sensitivity.unwrap();
        let half_width = z * (b_rate * (1.0 - b_rate) / cases as f64).sqrt();
        ensure!(
            (sens - b_rate).abs() <= half_width,
            "B sensitivity {sens:.4} outside {b_rate} +/- {half_width:.4}"
        );
        check_pooling(&ids, labels, &synth.store, &[Axis::Race])?;
        overall.push(report.overall.metrics.sensitivity.unwrap());
        lines.push(format!("B {b_rate}: {sens:.3} (n={cases}, +/-{half_width:.3})"));
    }
    ensure!(overall[1] < overall[0], "overall sensitivity did not drop: {overall:?}");
    Ok(format!(
        "{}; overall {:.3} -> {:.3}",
        lines.join(", "),
        overall[0],
        overall[1]
    ))
}

fn c5_metric_identities() -> Outcome {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let mut zero_cases = 0;
    for _ in 0..1000 {
        // small counts so zero denominators come up often
        let scale = if rng.random_bool(0.3) { 3 } else { 500 };
        let (tp, fp, fn_, tn) = (
            rng.random_range(0..scale),
            rng.random_range(0..scale),
            rng.random_range(0..scale),
            rng.random_range(0..scale),
        );
        let m = derive_metrics(&ConfusionMatrix { tp, fp, fn_, tn });
        let hand = |n: u64, d: u64| if d == 0 { None } else { Some(n as f64 / d as f64) };
        let expected = [
            hand(tp, tp + fn_),
            hand(tn, tn + fp),
            hand(tp, tp + fp),
            hand(tn, tn + fn_),
            hand(2 * tp, 2 * tp + fp + fn_),
        ];
        let got = [m.sensitivity, m.specificity, m.ppv, m.npv, m.f1];
        ensure!(got == expected, "{tp},{fp},{fn_},{tn}: {got:?} != {expected:?}");
        for v in got.iter().flatten() {
            ensure!((0.0..=1.0).contains(v), "metric {v} outside [0, 1]");
        }
        let json = serde_json::to_value(m).unwrap();
        for (name, v) in ["sensitivity", "specificity", "ppv", "npv", "f1"].iter().zip(got) {
            ensure!(json[name].is_null() == v.is_none(), "{name} null mismatch");
        }
        zero_cases += got.iter().filter(|v| v.is_none()).count();
    }
    ensure!(zero_cases > 0, "no zero denominators exercised");

    let synth = generate(&SimulationConfig::standard(77, 3000)).map_err(|e| e.to_string())?;
    let def = parse(&common::read_fixture("hypertension.phen")).unwrap();
    let (cohort, _) = execute(&compile(&def, synth.store.vocab()).unwrap(), &synth.store, 1).unwrap();
    let ids = cohort_ids(&cohort);
    let mut runs = 0;
    for labels in &synth.labels {
        for axes in [
            vec![Axis::Race],
            vec![Axis::Gender],
            vec![Axis::AgeGroup],
            vec![Axis::Race, Axis::Gender],
            vec![Axis::Race, Axis::Gender, Axis::AgeGroup],
        ] {
            check_pooling(&ids, labels, &synth.store, &axes)?;
            runs += 1;
        }
    }
    Ok(format!("1000 matrices ({zero_cases} undefined ratios), pooling law on {runs} stratified runs"))
}

fn c6_dsl_round_trip() -> Outcome {
    let strategy = common::definition();
    let mut runner = TestRunner::new_with_rng(Config::default(), TestRng::deterministic_rng(Default::default()));
    for i in 0..1000 {
        let def = strategy.new_tree(&mut runner).map_err(|e| e.to_string())?.current();
        let text = print(&def);
        let back = parse(&text).map_err(|e| format!("case {i}: {e}\n{text}"))?;
        ensure!(back == def, "case {i}: parse(print(ast)) != ast\n{text}");
        ensure!(print(&back) == text, "case {i}: printing is not idempotent");
    }
    for name in ["hypertension.phen", "preeclampsia.phen"] {
        let text = common::read_fixture(name);
        let def = parse(&text).map_err(|e| format!("{name}: {e}"))?;
        ensure!(print(&def) == text, "{name} is not byte-stable");
    }
    let pre = parse(&common::read_fixture("preeclampsia.phen")).unwrap();
    ensure!(
        pre.entry.concept_set_ref == "preg20w"
            && pre.rules.len() == 3
            && pre.rules.iter().all(|r| r.role == Role::Inclusion),
        "preeclampsia fixture lost its shape"
    );
    Ok("1000 generated ASTs, 2 golden fixtures byte-stable".into())
}

fn c7_checklist() -> Outcome {
    let store = Store::open(&common::fixture("three_person")).map_err(|e| e.to_string())?;
    let vocab = store.vocab();
    let base = parse(&common::read_fixture("hypertension.phen")).unwrap();
    let report = checklist_lint(&base, vocab, 0.95, None);
    ensure!(
        report.passed && report.failures().count() == 0,
        "fixture fails: {:?}",
        report.failures().collect::<Vec<_>>()
    );

    type Ablation = fn(&mut phenoscope_core::PhenotypeDefinition);
    let ablations: [(&str, Ablation); 7] = [
        (ITEM_INTENT, |d| d.metadata.intent.clear()),
        (ITEM_LITERATURE, |d| d.metadata.literature_refs.clear()),
        (ITEM_PHENOTYPES, |d| d.concept_sets.push(ConceptSet::new("unused", vec![]))),
        (ITEM_CONSTRAINTS, |d| d.rules.clear()),
        (ITEM_ROLES, |d| d.metadata.role_waiver = None),
        (ITEM_VOCABULARY, |d| {
            d.concept_sets.push(ConceptSet::new("extra", vec![ConceptItem::include(424242, false)]))
        }),
        (ITEM_LOGIC, |d| d.concept_sets[0].items.push(ConceptItem::exclude(2001, true))),
    ];
    for (item, ablate) in ablations {
        let mut def = base.clone();
        ablate(&mut def);
        let report = checklist_lint(&def, vocab, 0.95, None);
        let failed: Vec<&str> = report.failures().map(|i| i.item.as_str()).collect();
        ensure!(failed == [item], "ablating {item} failed {failed:?}");
        ensure!(!report.passed, "ablating {item} still passes overall");
    }
    Ok("fixture passes; 7 single-item ablations each fail exactly their item".into())
}

fn c8_scale_and_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path().join("store");
    {
        let mut config = SimulationConfig::standard(8, 100_000);
        config.background.events_per_person = 46.0;
        let synth = generate(&config).map_err(|e| e.to_string())?;
        synth.write(&dir).map_err(|e| e.to_string())?;
    }
    let def = parse(&common::read_fixture("hypertension.phen")).unwrap();

    let run = |threads: usize, out: &str| -> Result<(Duration, usize, usize), String> {
        let started = Instant::now();
        let store = Store::open(&dir).map_err(|e| e.to_string())?;
        let plan = compile(&def, store.vocab()).map_err(|e| e.to_string())?;
        let (cohort, attrition) = execute(&plan, &store, threads).map_err(|e| e.to_string())?;
        write_cohort_csv(&tmp.path().join(format!("{out}.csv")), &cohort).map_err(|e| e.to_string())?;
        std::fs::write(tmp.path().join(format!("{out}.json")), attrition.to_json()).map_err(|e| e.to_string())?;
        Ok((started.elapsed(), store.events().len(), cohort.len()))
    };
    let (elapsed, events, cohort) = run(1, "one")?;
    let _ = run(4, "four")?;
    let read = |p: &str| std::fs::read(tmp.path().join(p)).unwrap();
    ensure!(read("one.csv") == read("four.csv"), "cohort.csv differs between 1 and 4 threads");
    ensure!(read("one.json") == read("four.json"), "attrition differs between 1 and 4 threads");
    ensure!(
        (4_500_000..=5_500_000).contains(&events),
        "store has {events} events, expected about 5M"
    );
    ensure!(elapsed < Duration::from_secs(60), "single-threaded run took {elapsed:?}");
    Ok(format!(
        "100000 persons, {events} events, cohort {cohort}, load+run {:.1}s, 4 threads byte-identical",
        elapsed.as_secs_f64()
    ))
}

fn c9_lifecycle() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let registry = Registry::open(tmp.path()).map_err(|e| e.to_string())?;
    let v1 = parse(&common::read_fixture("hypertension.phen")).unwrap();
    let id = v1.definition_id.clone();
    let t = |h: u32| Utc.with_ymd_and_hms(2026, 1, 1, h, 0, 0).unwrap();
    ensure!(registry.register_at(&v1, "a", "initial", t(1)).map_err(|e| e.to_string())? == 1, "first version is not 1");

    let mut v2 = v1.clone();
    let injected = CriterionRule {
        name: "no prior antihypertensive".into(),
        query: EventQuery::new(Domain::Drug, "antihtn", Occurrence::Any),
        window: TemporalWindow::around_index(-365, -1),
        count_comparator: Comparator::Ge,
        count: 1,
        role: Role::Exclusion,
    };
    v2.rules.push(injected.clone());
    ensure!(registry.register_at(&v2, "b", "exclude prior exposure", t(2)).map_err(|e| e.to_string())? == 2, "second version is not 2");
    let changes = registry.diff(&id, 1, 2).map_err(|e| e.to_string())?;
    ensure!(changes.len() == 1, "diff has {} changes: {changes:?}", changes.len());
    let change = &changes[0];
    ensure!(
        change.kind == ChangeKind::Added
            && change.path == "rules[no prior antihypertensive]"
            && change.after == Some(serde_json::to_value(&injected).unwrap()),
        "unexpected change {change:?}"
    );
    ensure!(registry.get(&id, 1).map_err(|e| e.to_string())? == v1, "version 1 changed");

    // three snapshots handed over out of order
    let seeds = [(303u64, 3u32), (101, 1), (202, 2)];
    let synths: Vec<_> = seeds
        .iter()
        .map(|(seed, _)| generate(&SimulationConfig::standard(*seed, 1500)).unwrap())
        .collect();
    let snapshots: Vec<Snapshot<'_>> = synths
        .iter()
        .zip(&seeds)
        .map(|(s, (_, month))| Snapshot {
            store: &s.store,
            labels: s.labels_for("hypertension").unwrap(),
            timestamp: Utc.with_ymd_and_hms(2026, *month, 1, 0, 0, 0).unwrap(),
        })
        .collect();
    let points = monitor(&id, &registry, &snapshots).map_err(|e| e.to_string())?;
    ensure!(points.len() == 3, "{} monitor points", points.len());
    ensure!(points.windows(2).all(|w| w[0].timestamp < w[1].timestamp), "monitor out of order");
    ensure!(points.iter().all(|p| p.version == 2), "monitor did not use the latest version");

    for snap in &snapshots {
        let plan = compile(&v2, snap.store.vocab()).unwrap();
        let (cohort, _) = execute(&plan, snap.store, 1).unwrap();
        let report = stratify(&cohort_ids(&cohort), snap.labels, &snap.labels.persons(), snap.store, &[], &AgeBins::default(), 10)
            .unwrap();
        registry
            .record_evaluation_at(&id, 2, &format!("snapshot-{}", snap.timestamp.format("%m")), &report, snap.timestamp)
            .map_err(|e| e.to_string())?;
    }
    let series = registry.ppv_series(&id).map_err(|e| e.to_string())?;
    ensure!(series.len() == 3, "{} series points", series.len());
    ensure!(series.windows(2).all(|w| w[0].timestamp < w[1].timestamp), "series out of order");
    for (s, p) in series.iter().zip(&points) {
        ensure!(s.ppv == p.metrics.ppv, "series PPV {:?} != monitored {:?}", s.ppv, p.metrics.ppv);
    }
    let ppv: Vec<String> = series.iter().map(|p| format!("{:.3}", p.ppv.unwrap_or(f64::NAN))).collect();
    Ok(format!("diff = 1 added rule; PPV series [{}] in timestamp order", ppv.join(", ")))
}

struct Criterion {
    number: u32,
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria = [
        Criterion { number: 1, name: "hypertension worked example", limit: Duration::from_secs(1), run: c1_hypertension_example },
        Criterion { number: 2, name: "oracle equivalence", limit: Duration::from_secs(300), run: c2_oracle_equivalence },
        Criterion { number: 3, name: "strata paradox", limit: Duration::from_secs(60), run: c3_strata_paradox },
        Criterion { number: 4, name: "disparity sensitivity", limit: Duration::from_secs(120), run: c4_disparity },
        Criterion { number: 5, name: "metric identities", limit: Duration::from_secs(10), run: c5_metric_identities },
        Criterion { number: 6, name: "dsl round trip", limit: Duration::from_secs(30), run: c6_dsl_round_trip },
        Criterion { number: 7, name: "checklist lint", limit: Duration::from_secs(5), run: c7_checklist },
        Criterion { number: 8, name: "determinism and scale", limit: Duration::from_secs(600), run: c8_scale_and_determinism },
        Criterion { number: 9, name: "lifecycle", limit: Duration::from_secs(60), run: c9_lifecycle },
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for c in criteria
        .iter()
        .filter(|c| filter.is_empty() || filter.iter().any(|f| c.name.contains(f.as_str()) || *f == c.number.to_string()))
    {
        let started = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = started.elapsed();
        let outcome = match outcome {
            Ok(_) if elapsed > c.limit => Err(format!("took {elapsed:.1?}, limit {:?}", c.limit)),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("criterion {} PASS {} [{:.2}s]: {detail}", c.number, c.name, elapsed.as_secs_f64()),
            Err(detail) => {
                failed += 1;
                println!("criterion {} FAIL {} [{:.2}s]: {detail}", c.number, c.name, elapsed.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
