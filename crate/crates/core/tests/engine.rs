mod common;

use std::collections::BTreeMap;

use phenoscope_core::dsl::parse;
use phenoscope_core::engine::{self, compile, execute, reference_evaluate, STAGE_ENTRY};
use phenoscope_core::synthgen::{generate, SimulationConfig};
use phenoscope_core::{CohortRecord, Day, Store};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

fn three_person() -> Store {
    Store::open(&common::fixture("three_person")).unwrap()
}

fn day(s: &str) -> Day {
    Day::parse(s).unwrap()
}

#[test]
fn hypertension_on_three_persons() {
    let store = three_person();
    let def = parse(&common::read_fixture("hypertension.phen")).unwrap();
    let plan = compile(&def, store.vocab()).unwrap();
    let (cohort, attrition) = execute(&plan, &store, 1).unwrap();
    assert_eq!(
        cohort,
        vec![CohortRecord {
            person_id: 1,
            entry_date: day("1970-07-20"),
            exit_date: day("1970-10-28"),
        }]
    );
    let counts: Vec<(usize, usize)> = attrition.stages.iter().map(|s| (s.remaining, s.removed)).collect();
    assert_eq!(counts, vec![(2, 1), (2, 0), (2, 0), (1, 1)]);
    assert_eq!(attrition.stages[3].name, "htn dx before index");
    assert_eq!(reference_evaluate(&def, &store).unwrap(), (cohort, attrition));
}

#[test]
fn data_dictionary_matches_manifest() {
    let manifest: BTreeMap<String, usize> =
        serde_json::from_str(&common::read_fixture("three_person/manifest.json")).unwrap();
    let dict = three_person().data_dictionary();
    for (table, rows) in manifest {
        assert_eq!(dict.rows(&table), rows, "{table}");
    }
}

#[test]
fn fixed_offset_exit_is_clamped_to_observation() {
    let store = three_person();
    let mut def = parse(&common::read_fixture("hypertension.phen")).unwrap();
    def.exit = phenoscope_core::ExitStrategy::FixedOffset { days: 100_000 };
    let (cohort, _) = execute(&compile(&def, store.vocab()).unwrap(), &store, 1).unwrap();
    assert_eq!(cohort[0].exit_date, day("1971-12-31"));
}

#[test]
fn empty_entry_set_warns_and_yields_nothing() {
    let store = three_person();
    let text = common::read_fixture("hypertension.phen").replace("conceptset antihtn { 2001 +descendants }", "conceptset antihtn { 2001 +descendants, 2001 +descendants -exclude }");
    let def = parse(&text).unwrap();
    let plan = compile(&def, store.vocab()).unwrap();
    assert_eq!(plan.warnings.len(), 1);
    let (cohort, attrition) = execute(&plan, &store, 1).unwrap();
    assert!(cohort.is_empty());
    assert_eq!(attrition.stage(STAGE_ENTRY).unwrap().removed, 3);
}

#[test]
fn cohort_csv_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("cohort.csv");
    let records = vec![
        CohortRecord { person_id: 1, entry_date: Day(10), exit_date: Day(12) },
        CohortRecord { person_id: 4, entry_date: Day(-3), exit_date: Day(-3) },
    ];
    engine::write_cohort_csv(&path, &records).unwrap();
    assert_eq!(
        std::fs::read_to_string(&path).unwrap(),
        "person_id,entry_date,exit_date\n1,1970-01-11,1970-01-13\n4,1969-12-29,1969-12-29\n"
    );
    assert_eq!(engine::read_cohort_csv(&path).unwrap(), records);
}

#[test]
fn engine_agrees_with_reference_on_small_store() {
    let synth = generate(&SimulationConfig::standard(5, 150)).unwrap();
    let store = synth.store;
    let mut runner = TestRunner::new(Config::with_cases(60));
    runner
        .run(&common::executable_definition(), |def| {
            let plan = compile(&def, store.vocab()).unwrap();
            let fast = execute(&plan, &store, 1).unwrap();
            let slow = reference_evaluate(&def, &store).unwrap();
            prop_assert_eq!(fast, slow);
            Ok(())
        })
        .unwrap();
}

#[test]
fn thread_count_does_not_change_output() {
    let synth = generate(&SimulationConfig::standard(9, 400)).unwrap();
    let def = parse(&common::read_fixture("hypertension.phen")).unwrap();
    let plan = compile(&def, synth.store.vocab()).unwrap();
    let one = execute(&plan, &synth.store, 1).unwrap();
    let four = execute(&plan, &synth.store, 4).unwrap();
    assert_eq!(one, four);
    assert!(!one.0.is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn cohort_invariants(def in common::executable_definition()) {
        let synth = generate(&SimulationConfig::standard(13, 120)).unwrap();
        let store = &synth.store;
        let (cohort, attrition) = execute(&compile(&def, store.vocab()).unwrap(), store, 1).unwrap();
        // one record per person, sorted, entry within a covering period, exit within it too
        prop_assert!(cohort.windows(2).all(|w| w[0].person_id < w[1].person_id));
        for r in &cohort {
            prop_assert!(r.entry_date <= r.exit_date);
            let pos = store.person_position(r.person_id).unwrap();
            prop_assert!(store
                .periods_at(pos)
                .iter()
                .any(|p| p.start_date <= r.entry_date && r.exit_date <= p.end_date));
        }
        // funnel is monotone and ends at the cohort size
        let mut prev = store.persons().len();
        for s in &attrition.stages {
            prop_assert!(s.remaining <= prev);
            prop_assert_eq!(s.remaining + s.removed, prev);
            prev = s.remaining;
        }
        prop_assert_eq!(attrition.final_count(), cohort.len());
    }
}
