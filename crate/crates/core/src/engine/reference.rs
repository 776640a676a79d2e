//! Brute-force reference evaluator.
//!
//! Shares nothing with the compiled path: no plan, no per-person index, no
//! binary search. Every question is answered by scanning the store's flat
//! tables. It exists to check [`super::execute`] and is far too slow for
//! production-sized stores.

use std::collections::{HashMap, HashSet};

use chrono::Datelike;

use super::{
    build_attrition, AttritionReport, CohortRecord, EngineError, STAGE_DEMOGRAPHICS, STAGE_ENTRY,
    STAGE_PRIOR_OBSERVATION,
};
use crate::date::Day;
use crate::definition::{
    validate_definition, Anchor, Comparator, CriterionRule, EventQuery, ExitStrategy, Occurrence,
    PhenotypeDefinition, Role,
};
use crate::store::{ClinicalEvent, Person, Store};
use crate::vocab::VocabError;
use crate::ConceptId;

pub fn reference_evaluate(
    def: &PhenotypeDefinition,
    store: &Store,
) -> Result<(Vec<CohortRecord>, AttritionReport), EngineError> {
    let issues = validate_definition(def);
    if !issues.is_empty() {
        return Err(EngineError::Invalid(issues));
    }
    let sets = resolve_all(def, store)?;

    let gating: Vec<&CriterionRule> = def.rules.iter().filter(|r| r.role != Role::Strengthener).collect();
    let strengtheners: Vec<&CriterionRule> =
        def.rules.iter().filter(|r| r.role == Role::Strengthener).collect();
    let stage_count = 3 + gating.len();

    let mut remaining = vec![0usize; stage_count];
    let mut strengthened = vec![0usize; strengtheners.len()];
    let mut cohort = Vec::new();

    for person in store.persons() {
        let mut events: Vec<&ClinicalEvent> = Vec::new();
        for e in store.events() {
            if e.person_id == person.person_id {
                events.push(e);
            }
        }
        events.sort_by_key(|e| (e.start_date, e.event_id));

        let candidates = pick(&def.entry, &events, &sets);
        let mut passed_per_stage = vec![false; stage_count];
        let mut chosen: Option<(&ClinicalEvent, Day)> = None;

        for candidate in &candidates {
            let index = candidate.start_date;
            let mut stages_ok = vec![true];
            let observation_end = covering_end(store, person, index, def.prior_observation_days);
            stages_ok.push(observation_end.is_some());
            stages_ok.push(demographics_ok(def, person, index));
            for rule in &gating {
                let satisfied = rule_satisfied(rule, candidate, &events, &sets);
                let keep = match rule.role {
                    Role::Inclusion => satisfied,
                    _ => !satisfied,
                };
                stages_ok.push(keep);
            }
            let mut all_so_far = true;
            for (k, ok) in stages_ok.iter().enumerate() {
                all_so_far = all_so_far && *ok;
                if all_so_far {
                    passed_per_stage[k] = true;
                }
            }
            if all_so_far {
                chosen = Some((candidate, observation_end.unwrap()));
                break;
            }
        }

        for k in 0..stage_count {
            if passed_per_stage[k] {
                remaining[k] += 1;
            }
        }
        if let Some((candidate, observation_end)) = chosen {
            let index = candidate.start_date;
            let exit = exit_date(def, index, observation_end, &events, &sets);
            cohort.push(CohortRecord {
                person_id: person.person_id,
                entry_date: index,
                exit_date: exit,
            });
            for (i, rule) in strengtheners.iter().enumerate() {
                if rule_satisfied(rule, candidate, &events, &sets) {
                    strengthened[i] += 1;
                }
            }
        }
    }

    cohort.sort();
    let mut names = vec![
        (STAGE_ENTRY.to_string(), None),
        (STAGE_PRIOR_OBSERVATION.to_string(), None),
        (STAGE_DEMOGRAPHICS.to_string(), None),
    ];
    for rule in &gating {
        names.push((rule.name.clone(), Some(rule.role)));
    }
    let report = build_attrition(
        store.persons().len(),
        &names,
        &remaining,
        strengtheners.iter().map(|r| r.name.clone()).zip(strengthened).collect(),
        cohort.len(),
    );
    Ok((cohort, report))
}

fn resolve_all(
    def: &PhenotypeDefinition,
    store: &Store,
) -> Result<HashMap<String, HashSet<ConceptId>>, EngineError> {
    let pairs: Vec<(ConceptId, ConceptId)> = store.vocab().ancestry.pairs().collect();
    let mut out = HashMap::new();
    for set in &def.concept_sets {
        let mut included = HashSet::new();
        let mut excluded = HashSet::new();
        for item in &set.items {
            if store.vocab().get(item.concept_id).is_none() {
                return Err(EngineError::Unresolved {
                    set: set.set_id.clone(),
                    source: VocabError::UnknownConcept(item.concept_id),
                });
            }
            let mut reached = vec![item.concept_id];
            if item.include_descendants {
                for (a, d) in &pairs {
                    if *a == item.concept_id {
                        reached.push(*d);
                    }
                }
            }
            if item.is_excluded {
                excluded.extend(reached);
            } else {
                included.extend(reached);
            }
        }
        let resolved: HashSet<ConceptId> = included.into_iter().filter(|c| !excluded.contains(c)).collect();
        out.insert(set.set_id.clone(), resolved);
    }
    Ok(out)
}

fn matches(query: &EventQuery, e: &ClinicalEvent, sets: &HashMap<String, HashSet<ConceptId>>) -> bool {
    if e.domain != query.domain || !sets[&query.concept_set_ref].contains(&e.concept_id) {
        return false;
    }
    match &query.value_predicate {
        None => true,
        Some(vp) => {
            let Some(value) = e.value_as_number else { return false };
            if let Some(unit) = vp.unit_concept_id {
                if e.unit_concept_id != Some(unit) {
                    return false;
                }
            }
            compare_f64(vp.comparator, value, vp.threshold)
        }
    }
}

fn compare_f64(cmp: Comparator, a: f64, b: f64) -> bool {
    match cmp {
        Comparator::Lt => a < b,
        Comparator::Le => a <= b,
        Comparator::Eq => a == b,
        Comparator::Ge => a >= b,
        Comparator::Gt => a > b,
    }
}

/// Matching events (already date-ordered) filtered by occurrence.
fn pick<'a>(
    query: &EventQuery,
    events: &[&'a ClinicalEvent],
    sets: &HashMap<String, HashSet<ConceptId>>,
) -> Vec<&'a ClinicalEvent> {
    let all: Vec<&ClinicalEvent> = events.iter().copied().filter(|e| matches(query, e, sets)).collect();
    match query.occurrence {
        Occurrence::Any => all,
        Occurrence::FirstEver => all.into_iter().take(1).collect(),
        Occurrence::Nth(n) => {
            if all.len() >= n as usize {
                vec![all[n as usize - 1]]
            } else {
                vec![]
            }
        }
    }
}

fn covering_end(store: &Store, person: &Person, index: Day, prior_days: u32) -> Option<Day> {
    for p in store.observation_periods() {
        if p.person_id == person.person_id
            && p.start_date.0 as i64 <= index.0 as i64 - prior_days as i64
            && index <= p.end_date
        {
            return Some(p.end_date);
        }
    }
    None
}

fn age_at(birth: Day, day: Day) -> i64 {
    let ymd = |d: Day| {
        let date = d.to_date();
        date.year() as i64 * 10_000 + date.month() as i64 * 100 + date.day() as i64
    };
    (ymd(day) - ymd(birth)).div_euclid(10_000)
}

fn demographics_ok(def: &PhenotypeDefinition, person: &Person, index: Day) -> bool {
    let Some(demo) = &def.demographic_constraints else {
        return true;
    };
    let age = age_at(person.birth_date, index);
    let age_ok = demo
        .age_at_index
        .is_none_or(|r| r.min as i64 <= age && age <= r.max as i64);
    let gender_ok = demo.gender.as_ref().is_none_or(|g| g.contains(&person.gender));
    let race_ok = demo.race.as_ref().is_none_or(|r| r.contains(&person.race));
    age_ok && gender_ok && race_ok
}

fn rule_satisfied(
    rule: &CriterionRule,
    candidate: &ClinicalEvent,
    events: &[&ClinicalEvent],
    sets: &HashMap<String, HashSet<ConceptId>>,
) -> bool {
    let anchor = match rule.window.anchor {
        Anchor::IndexDate | Anchor::EntryStart => candidate.start_date.0 as i64,
        Anchor::EntryEnd => candidate.end_date.unwrap_or(candidate.start_date).0 as i64,
    };
    let lo = anchor + rule.window.start_offset_days as i64;
    let hi = anchor + rule.window.end_offset_days as i64;
    let count = pick(&rule.query, events, sets)
        .iter()
        .filter(|e| lo <= e.start_date.0 as i64 && e.start_date.0 as i64 <= hi)
        .count() as i64;
    let target = rule.count as i64;
    match rule.count_comparator {
        Comparator::Lt => count < target,
        Comparator::Le => count <= target,
        Comparator::Eq => count == target,
        Comparator::Ge => count >= target,
        Comparator::Gt => count > target,
    }
}

fn exit_date(
    def: &PhenotypeDefinition,
    index: Day,
    observation_end: Day,
    events: &[&ClinicalEvent],
    sets: &HashMap<String, HashSet<ConceptId>>,
) -> Day {
    let proposed = match &def.exit {
        ExitStrategy::FixedOffset { days } => Day((index.0 as i64 + *days as i64) as i32),
        ExitStrategy::EndOfContinuousExposure {
            concept_set_ref,
            persistence_gap_days,
        } => {
            let set = &sets[concept_set_ref];
            let mut eras: Vec<(i64, i64)> = events
                .iter()
                .filter(|e| set.contains(&e.concept_id))
                .map(|e| (e.start_date.0 as i64, e.end_date.unwrap_or(e.start_date).0 as i64))
                .collect();
            // merge any two intervals whose separation fits the gap, until nothing changes
            let gap = *persistence_gap_days as i64;
            loop {
                let mut merged_any = false;
                'outer: for i in 0..eras.len() {
                    for j in 0..eras.len() {
                        if i == j {
                            continue;
                        }
                        let (a, b) = (eras[i], eras[j]);
                        let separation = if a.1 < b.0 {
                            b.0 - a.1 - 1
                        } else if b.1 < a.0 {
                            a.0 - b.1 - 1
                        } else {
                            -1
                        };
                        if separation <= gap {
                            eras[i] = (a.0.min(b.0), a.1.max(b.1));
                            eras.remove(j);
                            merged_any = true;
                            break 'outer;
                        }
                    }
                }
                if !merged_any {
                    break;
                }
            }
            let i = index.0 as i64;
            eras.iter()
                .find(|(s, e)| *s <= i && i <= *e)
                .map_or(index, |(_, e)| Day(*e as i32))
        }
        ExitStrategy::EventBased { query } => pick(query, events, sets)
            .into_iter()
            .find(|e| e.start_date >= index)
            .map_or(observation_end, |e| e.start_date),
    };
    if proposed < observation_end {
        proposed
    } else {
        observation_end
    }
}
