#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;

use phenoscope_core::definition::AgeRange;
use phenoscope_core::{
    Anchor, Comparator, ConceptItem, ConceptSet, CriterionRule, DemographicConstraints, Domain,
    EventQuery, ExitStrategy, Metadata, Occurrence, PhenotypeDefinition, Role, TemporalWindow,
    ValuePredicate,
};
use proptest::collection::{btree_set, vec};
use proptest::prelude::*;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn read_fixture(name: &str) -> String {
    std::fs::read_to_string(fixture(name)).unwrap()
}

pub fn domain() -> impl Strategy<Value = Domain> {
    prop::sample::select(Domain::ALL.to_vec())
}

pub fn comparator() -> impl Strategy<Value = Comparator> {
    prop::sample::select(Comparator::ALL.to_vec())
}

pub fn role() -> impl Strategy<Value = Role> {
    prop::sample::select(vec![
        Role::Inclusion,
        Role::Exclusion,
        Role::Strengthener,
        Role::Disqualifier,
    ])
}

pub fn anchor() -> impl Strategy<Value = Anchor> {
    prop::sample::select(vec![Anchor::IndexDate, Anchor::EntryStart, Anchor::EntryEnd])
}

pub fn occurrence() -> impl Strategy<Value = Occurrence> {
    prop_oneof![
        Just(Occurrence::Any),
        Just(Occurrence::FirstEver),
        (1u32..4).prop_map(Occurrence::Nth),
    ]
}

/// Printable text including quote, backslash and the escaped whitespace characters.
pub fn text() -> impl Strategy<Value = String> {
    "[ -~\t\n\r\u{e9}\u{4e2d}]{0,24}"
}

fn set_id() -> impl Strategy<Value = String> {
    "s_[a-z0-9_]{0,6}"
}

fn threshold() -> impl Strategy<Value = f64> {
    prop_oneof![
        (-1000i32..1000).prop_map(f64::from),
        (-1.0e6f64..1.0e6),
        Just(0.1),
        Just(1.0e-7),
    ]
}

fn query_for(sets: Vec<String>) -> impl Strategy<Value = EventQuery> {
    (
        domain(),
        prop::sample::select(sets),
        occurrence(),
        comparator(),
        threshold(),
        prop::option::of(1i64..10_000),
        any::<bool>(),
    )
        .prop_map(|(domain, set, occurrence, cmp, threshold, unit, with_value)| {
            let mut q = EventQuery::new(domain, set, occurrence);
            if domain == Domain::Measurement && with_value {
                q.value_predicate = Some(ValuePredicate {
                    comparator: cmp,
                    threshold,
                    unit_concept_id: unit,
                });
            }
            q
        })
}

fn demographics() -> impl Strategy<Value = Option<DemographicConstraints>> {
    prop::option::of(
        (
            prop::option::of((0u32..120, 0u32..30)),
            prop::option::of(btree_set(text(), 1..3)),
            prop::option::of(btree_set(text(), 1..3)),
        )
            .prop_map(|(age, gender, race)| DemographicConstraints {
                age_at_index: age.map(|(min, span)| AgeRange { min, max: min + span }),
                gender,
                race,
            }),
    )
}

/// Any structurally valid definition; the vocabulary is not consulted.
pub fn definition() -> impl Strategy<Value = PhenotypeDefinition> {
    btree_set(set_id(), 1..5)
        .prop_flat_map(|ids| {
            let ids: Vec<String> = ids.into_iter().collect();
            let sets = ids
                .iter()
                .map(|id| {
                    let id = id.clone();
                    (
                        vec((1i64..1_000_000, any::<bool>(), any::<bool>()), 0..4),
                        prop::option::of(text()),
                    )
                        .prop_map(move |(items, name)| ConceptSet {
                            set_id: id.clone(),
                            name: name.unwrap_or_else(|| id.clone()),
                            items: items
                                .into_iter()
                                .map(|(c, d, x)| ConceptItem {
                                    concept_id: c,
                                    include_descendants: d,
                                    is_excluded: x,
                                })
                                .collect(),
                        })
                })
                .collect::<Vec<_>>();
            let rule = (
                query_for(ids.clone()),
                anchor(),
                -5000i32..5000,
                0i32..5000,
                comparator(),
                0u32..10,
                role(),
            );
            let exit = prop_oneof![
                (0u32..100_000).prop_map(|days| ExitStrategy::FixedOffset { days }),
                (prop::sample::select(ids.clone()), 0u32..1000).prop_map(|(s, g)| {
                    ExitStrategy::EndOfContinuousExposure {
                        concept_set_ref: s,
                        persistence_gap_days: g,
                    }
                }),
                query_for(ids.clone()).prop_map(|query| ExitStrategy::EventBased { query }),
            ];
            (
                (text(), 1u32..50, text(), vec(text(), 0..3), vec(text(), 0..3), prop::option::of(text())),
                sets,
                query_for(ids.clone()),
                0u32..1000,
                demographics(),
                vec(rule, 0..5),
                exit,
                prop_oneof![Just(0u32), 1u32..100],
            )
        })
        .prop_map(
            |((id, version, intent, refs, authors, waiver), sets, entry, prior, demo, rules, exit, era)| {
                let rules = rules
                    .into_iter()
                    .enumerate()
                    .map(|(i, (query, anchor, start, len, cmp, count, role))| CriterionRule {
                        name: format!("rule {i}"),
                        query,
                        window: TemporalWindow {
                            anchor,
                            start_offset_days: start,
                            end_offset_days: start + len,
                        },
                        count_comparator: cmp,
                        count,
                        role,
                    })
                    .collect();
                PhenotypeDefinition {
                    definition_id: if id.trim().is_empty() { format!("d{id}x") } else { id },
                    version,
                    metadata: Metadata {
                        intent,
                        literature_refs: refs,
                        authors,
                        role_waiver: waiver,
                    },
                    concept_sets: sets,
                    entry,
                    prior_observation_days: prior,
                    demographic_constraints: demo,
                    rules,
                    exit,
                    era_gap_days: era,
                }
            },
        )
}

const CONDITIONS: &[i64] = &[1001, 1002, 1003, 1101, 1201, 1300, 1301, 1401, 5000, 5003, 5010, 5100];
const DRUGS: &[i64] = &[2001, 2002, 2003, 2101, 2201, 6000, 6004, 6010];
const MEASUREMENTS: &[i64] = &[3001, 3002, 3101];
const PROCEDURES: &[i64] = &[4001, 7000, 7001, 7002, 7003];
const VISITS: &[i64] = &[9201, 9202];

fn pool(domain: Domain) -> &'static [i64] {
    match domain {
        Domain::Condition => CONDITIONS,
        Domain::Drug => DRUGS,
        Domain::Measurement => MEASUREMENTS,
        Domain::Procedure => PROCEDURES,
        Domain::Visit | Domain::Death => VISITS,
    }
}

fn home_domain() -> impl Strategy<Value = Domain> {
    prop::sample::select(vec![
        Domain::Condition,
        Domain::Condition,
        Domain::Drug,
        Domain::Drug,
        Domain::Measurement,
        Domain::Procedure,
        Domain::Visit,
    ])
}

fn executable_query(sets: Vec<(String, Domain)>) -> impl Strategy<Value = EventQuery> {
    (
        prop::sample::select(sets),
        occurrence(),
        comparator(),
        0.0f64..1.0,
        0usize..4,
        any::<bool>(),
    )
        .prop_map(|((set, domain), occurrence, cmp, q, unit_choice, with_value)| {
            let mut query = EventQuery::new(domain, set, occurrence);
            if domain == Domain::Measurement && with_value {
                // thresholds spread over the range of each lab
                let threshold = (50.0 + q * 300.0).round() / 10.0 * 10.0;
                let unit = [None, Some(8554), Some(8876), Some(8909)][unit_choice];
                query.value_predicate = Some(ValuePredicate {
                    comparator: cmp,
                    threshold: if unit == Some(8554) { (q * 12.0 * 10.0).round() / 10.0 } else { threshold },
                    unit_concept_id: unit,
                });
            }
            query
        })
}

/// Definitions over the toy vocabulary that the synthetic stores exercise:
/// every concept exists, and windows, counts and demographics are sized so
/// that cohorts are neither always empty nor everyone.
pub fn executable_definition() -> impl Strategy<Value = PhenotypeDefinition> {
    vec(home_domain(), 1..5)
        .prop_flat_map(|domains| {
            let named: Vec<(String, Domain)> = domains
                .iter()
                .enumerate()
                .map(|(i, d)| (format!("s{i}"), *d))
                .collect();
            let sets = named
                .iter()
                .map(|(id, d)| {
                    let id = id.clone();
                    vec(
                        (prop::sample::select(pool(*d).to_vec()), any::<bool>(), prop::bool::weighted(0.15)),
                        1..4,
                    )
                    .prop_map(move |items| {
                        ConceptSet::new(
                            id.clone(),
                            items
                                .into_iter()
                                .map(|(c, d, x)| ConceptItem {
                                    concept_id: c,
                                    include_descendants: d,
                                    is_excluded: x,
                                })
                                .collect(),
                        )
                    })
                })
                .collect::<Vec<_>>();
            let rule = (
                executable_query(named.clone()),
                anchor(),
                -2000i32..200,
                0i32..2500,
                comparator(),
                0u32..3,
                role(),
            );
            let set_ids: Vec<String> = named.iter().map(|(s, _)| s.clone()).collect();
            let exit = prop_oneof![
                (0u32..2000).prop_map(|days| ExitStrategy::FixedOffset { days }),
                (prop::sample::select(set_ids), 0u32..90).prop_map(|(s, g)| {
                    ExitStrategy::EndOfContinuousExposure {
                        concept_set_ref: s,
                        persistence_gap_days: g,
                    }
                }),
                executable_query(named.clone()).prop_map(|query| ExitStrategy::EventBased { query }),
            ];
            let demo = prop::option::weighted(
                0.3,
                (
                    prop::option::of((0u32..80, 5u32..60)),
                    prop::option::of(btree_set(prop::sample::select(vec!["F", "M"]), 1..2)),
                    prop::option::of(btree_set(
                        prop::sample::select(vec!["aian", "asian", "black", "nhpi", "white"]),
                        1..4,
                    )),
                )
                    .prop_map(|(age, gender, race)| DemographicConstraints {
                        age_at_index: age.map(|(min, span)| AgeRange { min, max: min + span }),
                        gender: gender.map(|g| g.into_iter().map(String::from).collect()),
                        race: race.map(|r| r.into_iter().map(String::from).collect()),
                    }),
            );
            (
                sets,
                executable_query(named),
                prop_oneof![Just(0u32), 0u32..730],
                demo,
                vec(rule, 0..4),
                exit,
            )
        })
        .prop_map(|(sets, entry, prior, demo, rules, exit)| PhenotypeDefinition {
            definition_id: "generated".into(),
            version: 1,
            metadata: Metadata::default(),
            concept_sets: sets,
            entry,
            prior_observation_days: prior,
            demographic_constraints: demo,
            rules: rules
                .into_iter()
                .enumerate()
                .map(|(i, (query, anchor, start, len, cmp, count, role))| CriterionRule {
                    name: format!("r{i}"),
                    query,
                    window: TemporalWindow {
                        anchor,
                        start_offset_days: start,
                        end_offset_days: start + len,
                    },
                    count_comparator: cmp,
                    count,
                    role,
                })
                .collect(),
            exit,
            era_gap_days: 0,
        })
}

pub fn set_of<T: Ord + Clone>(items: &[T]) -> BTreeSet<T> {
    items.iter().cloned().collect()
}
