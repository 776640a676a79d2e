use rayon::prelude::*;

use super::plan::{ExecutionPlan, ExitPlan, QueryPlan, RulePlan};
use super::{
    build_attrition, AttritionReport, CohortRecord, EngineError, STAGE_DEMOGRAPHICS, STAGE_ENTRY,
    STAGE_PRIOR_OBSERVATION,
};
use crate::date::{Day, DayInterval};
use crate::definition::{Anchor, Occurrence};
use crate::store::{window_slice, ClinicalEvent, Domain, ObservationPeriod, Store};

struct PersonOutcome {
    /// Number of stages the best candidate cleared; 0 when there is no candidate.
    depth: usize,
    record: Option<CohortRecord>,
    strengthened: Vec<bool>,
}

/// Runs `plan` over every person in `store`.
///
/// `threads > 1` evaluates persons on a dedicated pool; results are identical
/// to the sequential run because per-person outcomes are collected in store
/// order before aggregation.
pub fn execute(
    plan: &ExecutionPlan,
    store: &Store,
    threads: usize,
) -> Result<(Vec<CohortRecord>, AttritionReport), EngineError> {
    let gating: Vec<&RulePlan> = plan.gating_rules().collect();
    let strengtheners: Vec<&RulePlan> = plan.strengtheners().collect();
    let n = store.persons().len();

    let run = |pos: usize| evaluate_person(plan, &gating, &strengtheners, store, pos);
    let outcomes: Vec<PersonOutcome> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| EngineError::ThreadPool(e.to_string()))?;
        pool.install(|| (0..n).into_par_iter().map(run).collect())
    } else {
        (0..n).map(run).collect()
    };

    let stage_count = 3 + gating.len();
    let mut remaining = vec![0usize; stage_count];
    let mut strengthened = vec![0usize; strengtheners.len()];
    let mut cohort = Vec::new();
    for outcome in outcomes {
        for slot in remaining.iter_mut().take(outcome.depth) {
            *slot += 1;
        }
        if let Some(record) = outcome.record {
            cohort.push(record);
            for (count, hit) in strengthened.iter_mut().zip(&outcome.strengthened) {
                *count += *hit as usize;
            }
        }
    }

    let mut names = vec![
        (STAGE_ENTRY.to_string(), None),
        (STAGE_PRIOR_OBSERVATION.to_string(), None),
        (STAGE_DEMOGRAPHICS.to_string(), None),
    ];
    names.extend(gating.iter().map(|r| (r.name.clone(), Some(r.role))));
    let report = build_attrition(
        n,
        &names,
        &remaining,
        strengtheners
            .iter()
            .map(|r| r.name.clone())
            .zip(strengthened)
            .collect(),
        cohort.len(),
    );
    Ok((cohort, report))
}

fn evaluate_person(
    plan: &ExecutionPlan,
    gating: &[&RulePlan],
    strengtheners: &[&RulePlan],
    store: &Store,
    pos: usize,
) -> PersonOutcome {
    let person = &store.persons()[pos];
    let periods = store.periods_at(pos);
    let full_depth = 3 + gating.len();
    let entry_events = store.events_at(pos, plan.entry.domain);

    let mut depth = 0;
    for candidate in select(&plan.entry, entry_events) {
        let index = candidate.start_date;
        let mut d = 1;
        let covering = covering_period(periods, index, plan.prior_observation_days);
        if let Some(period) = covering {
            d = 2;
            if demographics_ok(plan, person, index) {
                d = 3;
                for rule in gating {
                    if rule_satisfied(rule, store, pos, candidate) == rule.role.removes_when_satisfied() {
                        break;
                    }
                    d += 1;
                }
            }
            if d == full_depth {
                let exit_date = exit_date(&plan.exit, store, pos, index, period.end_date);
                return PersonOutcome {
                    depth: d,
                    record: Some(CohortRecord {
                        person_id: person.person_id,
                        entry_date: index,
                        exit_date,
                    }),
                    strengthened: strengtheners
                        .iter()
                        .map(|r| rule_satisfied(r, store, pos, candidate))
                        .collect(),
                };
            }
        }
        depth = depth.max(d);
    }
    PersonOutcome {
        depth,
        record: None,
        strengthened: Vec::new(),
    }
}

/// Matching events of a date-sorted slice, narrowed by the occurrence qualifier.
fn select<'a>(query: &'a QueryPlan, events: &'a [ClinicalEvent]) -> Box<dyn Iterator<Item = &'a ClinicalEvent> + 'a> {
    let matching = events.iter().filter(move |e| query.matches(e));
    match query.occurrence {
        Occurrence::Any => Box::new(matching),
        Occurrence::FirstEver => Box::new(matching.take(1)),
        Occurrence::Nth(n) => Box::new(matching.skip(n as usize - 1).take(1)),
    }
}

fn covering_period(periods: &[ObservationPeriod], index: Day, prior_days: u32) -> Option<&ObservationPeriod> {
    let required_start = index.offset(-(prior_days as i64));
    periods
        .iter()
        .find(|p| p.start_date <= required_start && index <= p.end_date)
}

fn demographics_ok(plan: &ExecutionPlan, person: &crate::store::Person, index: Day) -> bool {
    let Some(demo) = &plan.demographics else {
        return true;
    };
    if let Some(range) = demo.age_at_index {
        let age = index.years_since(person.birth_date);
        if age < range.min as i32 || age > range.max as i32 {
            return false;
        }
    }
    if demo.gender.as_ref().is_some_and(|g| !g.contains(&person.gender)) {
        return false;
    }
    if demo.race.as_ref().is_some_and(|r| !r.contains(&person.race)) {
        return false;
    }
    true
}

fn rule_satisfied(rule: &RulePlan, store: &Store, pos: usize, candidate: &ClinicalEvent) -> bool {
    let anchor = match rule.anchor {
        Anchor::IndexDate | Anchor::EntryStart => candidate.start_date,
        Anchor::EntryEnd => candidate.effective_end(),
    };
    let window = DayInterval::new(
        anchor.offset(rule.start_offset_days as i64),
        anchor.offset(rule.end_offset_days as i64),
    );
    let events = store.events_at(pos, rule.query.domain);
    let count = match rule.query.occurrence {
        Occurrence::Any => window_slice(events, window)
            .iter()
            .filter(|e| rule.query.matches(e))
            .count(),
        _ => select(&rule.query, events)
            .filter(|e| window.contains(e.start_date))
            .count(),
    };
    rule.count_comparator.holds(count as u32, rule.count)
}

fn exit_date(exit: &ExitPlan, store: &Store, pos: usize, index: Day, observation_end: Day) -> Day {
    let exit = match exit {
        ExitPlan::FixedOffset { days } => index.offset(*days as i64),
        ExitPlan::ContinuousExposure {
            concepts,
            persistence_gap_days,
        } => {
            let mut exposures: Vec<(Day, Day)> = Domain::ALL
                .iter()
                .flat_map(|&d| store.events_at(pos, d))
                .filter(|e| concepts.binary_search(&e.concept_id).is_ok())
                .map(|e| (e.start_date, e.effective_end()))
                .collect();
            exposures.sort_unstable();
            era_end_containing(&exposures, index, *persistence_gap_days).unwrap_or(index)
        }
        ExitPlan::Event { query } => select(query, store.events_at(pos, query.domain))
            .find(|e| e.start_date >= index)
            .map_or(observation_end, |e| e.start_date),
    };
    exit.min(observation_end)
}

/// Collapses start-sorted exposures into eras and returns the end of the era
/// containing `day`. Consecutive exposures join when the days strictly between
/// one's end and the next start number at most `gap`.
pub(crate) fn era_end_containing(exposures: &[(Day, Day)], day: Day, gap: u32) -> Option<Day> {
    let mut iter = exposures.iter().copied();
    let (mut start, mut end) = iter.next()?;
    for (s, e) in iter {
        if (s.0 as i64) - (end.0 as i64) - 1 <= gap as i64 {
            end = end.max(e);
        } else {
            if start <= day && day <= end {
                return Some(end);
            }
            start = s;
            end = e;
        }
    }
    (start <= day && day <= end).then_some(end)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(n: i32) -> Day {
        Day(n)
    }

    #[test]
    fn era_collapse_within_gap() {
        let exposures = [(d(1), d(10)), (d(15), d(20))];
        assert_eq!(era_end_containing(&exposures, d(1), 30), Some(d(20)));
        // 4 days strictly between 10 and 15
        assert_eq!(era_end_containing(&exposures, d(1), 4), Some(d(20)));
        assert_eq!(era_end_containing(&exposures, d(1), 3), Some(d(10)));
        assert_eq!(era_end_containing(&exposures, d(12), 3), None);
        assert_eq!(era_end_containing(&[], d(1), 3), None);
    }

    #[test]
    fn overlapping_exposures_merge_at_zero_gap() {
        let exposures = [(d(1), d(10)), (d(5), d(8)), (d(11), d(12))];
        assert_eq!(era_end_containing(&exposures, d(2), 0), Some(d(12)));
    }
}
