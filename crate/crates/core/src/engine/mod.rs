//! Compile definitions to execution plans and run them against a store.
//!
//! Per person, candidates are the entry events selected by the entry
//! occurrence qualifier, in `(start_date, event_id)` order. Each candidate is
//! pushed through the stages in order: prior observation, demographics, then
//! every gating rule. The first candidate that clears all stages becomes the
//! person's single cohort record. A person counts as remaining after a stage
//! when at least one of their candidates clears every stage up to it, so the
//! final cohort never depends on rule order.

mod execute;
mod plan;
pub mod reference;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::date::Day;
use crate::definition::{Role, StructuralIssue};
use crate::table::{self, TableError};
use crate::vocab::VocabError;
use crate::PersonId;

pub use execute::execute;
pub use plan::{compile, ExecutionPlan, ExitPlan, QueryPlan, RulePlan};
pub use reference::reference_evaluate;

pub const STAGE_ENTRY: &str = "entry candidates";
pub const STAGE_PRIOR_OBSERVATION: &str = "prior observation";
pub const STAGE_DEMOGRAPHICS: &str = "demographics";

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("definition is structurally invalid: {}", .0.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<StructuralIssue>),
    #[error("concept set `{set}`: {source}")]
    Unresolved {
        set: String,
        #[source]
        source: VocabError,
    },
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

/// One person's membership interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CohortRecord {
    pub person_id: PersonId,
    pub entry_date: Day,
    pub exit_date: Day,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttritionStage {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
    pub remaining: usize,
    pub removed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrengthenerImpact {
    pub name: String,
    pub count: usize,
    /// `count` over final cohort size; `None` for an empty cohort.
    pub fraction: Option<f64>,
}

/// Stage-by-stage funnel of a run. The entry stage's `removed` counts the
/// persons in the store without any entry candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttritionReport {
    pub stages: Vec<AttritionStage>,
    pub strengtheners: Vec<StrengthenerImpact>,
}

impl AttritionReport {
    pub fn stage(&self, name: &str) -> Option<&AttritionStage> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn final_count(&self) -> usize {
        self.stages.last().map_or(0, |s| s.remaining)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Builds the report from per-stage remaining counts.
pub(crate) fn build_attrition(
    total_persons: usize,
    stage_names: &[(String, Option<Role>)],
    remaining: &[usize],
    strengtheners: Vec<(String, usize)>,
    cohort_size: usize,
) -> AttritionReport {
    let mut prev = total_persons;
    let stages = stage_names
        .iter()
        .zip(remaining)
        .map(|((name, role), &rem)| {
            let stage = AttritionStage {
                name: name.clone(),
                role: *role,
                remaining: rem,
                removed: prev - rem,
            };
            prev = rem;
            stage
        })
        .collect();
    let strengtheners = strengtheners
        .into_iter()
        .map(|(name, count)| StrengthenerImpact {
            name,
            count,
            fraction: (cohort_size > 0).then(|| count as f64 / cohort_size as f64),
        })
        .collect();
    AttritionReport {
        stages,
        strengtheners,
    }
}

pub const COHORT_HEADERS: &[&str] = &["person_id", "entry_date", "exit_date"];

pub fn write_cohort_csv(path: &Path, records: &[CohortRecord]) -> Result<(), TableError> {
    let mut w = table::writer(path)?;
    w.write_record(COHORT_HEADERS)
        .map_err(|e| table::csv_err(path, e))?;
    for r in records {
        w.write_record([
            r.person_id.to_string(),
            r.entry_date.to_string(),
            r.exit_date.to_string(),
        ])
        .map_err(|e| table::csv_err(path, e))?;
    }
    table::finish(path, w)
}

pub fn read_cohort_csv(path: &Path) -> Result<Vec<CohortRecord>, TableError> {
    let mut records = Vec::new();
    table::read_rows(path, COHORT_HEADERS, |row| {
        let record = CohortRecord {
            person_id: row.i64("person_id")?,
            entry_date: row.day("entry_date")?,
            exit_date: row.day("exit_date")?,
        };
        if record.exit_date < record.entry_date {
            return Err(row.err("exit_date", "exit_date precedes entry_date"));
        }
        records.push(record);
        Ok(())
    })?;
    Ok(records)
}
