use std::collections::BTreeMap;

use serde::Serialize;

use super::EngineError;
use crate::definition::{
    validate_definition, Anchor, Comparator, DemographicConstraints, EventQuery, ExitStrategy,
    Occurrence, PhenotypeDefinition, Role, ValuePredicate,
};
use crate::store::{ClinicalEvent, Domain};
use crate::vocab::{resolve_concept_set, Vocabulary};
use crate::ConceptId;

/// An event query with its concept set flattened to sorted ids.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryPlan {
    pub domain: Domain,
    pub concept_set_ref: String,
    pub concepts: Vec<ConceptId>,
    pub occurrence: Occurrence,
    pub value_predicate: Option<ValuePredicate>,
}

impl QueryPlan {
    fn new(query: &EventQuery, sets: &BTreeMap<String, Vec<ConceptId>>) -> Self {
        Self {
            domain: query.domain,
            concept_set_ref: query.concept_set_ref.clone(),
            concepts: sets[&query.concept_set_ref].clone(),
            occurrence: query.occurrence,
            value_predicate: query.value_predicate,
        }
    }

    #[inline]
    pub fn matches(&self, e: &ClinicalEvent) -> bool {
        self.concepts.binary_search(&e.concept_id).is_ok()
            && self
                .value_predicate
                .is_none_or(|vp| vp.matches(e.value_as_number, e.unit_concept_id))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RulePlan {
    pub name: String,
    pub role: Role,
    pub query: QueryPlan,
    pub anchor: Anchor,
    pub start_offset_days: i32,
    pub end_offset_days: i32,
    pub count_comparator: Comparator,
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExitPlan {
    FixedOffset { days: u32 },
    ContinuousExposure { concepts: Vec<ConceptId>, persistence_gap_days: u32 },
    Event { query: QueryPlan },
}

/// A definition with every name resolved, ready to execute.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExecutionPlan {
    pub definition_id: String,
    pub version: u32,
    pub concept_sets: BTreeMap<String, Vec<ConceptId>>,
    pub entry: QueryPlan,
    pub prior_observation_days: u32,
    pub demographics: Option<DemographicConstraints>,
    pub rules: Vec<RulePlan>,
    pub exit: ExitPlan,
    /// Non-fatal findings, e.g. an entry concept set that resolves empty.
    pub warnings: Vec<String>,
}

impl ExecutionPlan {
    pub fn gating_rules(&self) -> impl Iterator<Item = &RulePlan> {
        self.rules.iter().filter(|r| r.role.gates())
    }

    pub fn strengtheners(&self) -> impl Iterator<Item = &RulePlan> {
        self.rules.iter().filter(|r| !r.role.gates())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plan serializes");
        s.push('\n');
        s
    }
}

pub fn compile(def: &PhenotypeDefinition, vocab: &Vocabulary) -> Result<ExecutionPlan, EngineError> {
    let issues = validate_definition(def);
    if !issues.is_empty() {
        return Err(EngineError::Invalid(issues));
    }
    let mut sets = BTreeMap::new();
    for set in &def.concept_sets {
        let ids = resolve_concept_set(set, vocab).map_err(|source| EngineError::Unresolved {
            set: set.set_id.clone(),
            source,
        })?;
        sets.insert(set.set_id.clone(), ids.into_iter().collect::<Vec<_>>());
    }

    let entry = QueryPlan::new(&def.entry, &sets);
    let mut warnings = Vec::new();
    if entry.concepts.is_empty() {
        warnings.push(format!(
            "entry set empty: concept set `{}` resolves to no concepts",
            def.entry.concept_set_ref
        ));
    }
    let rules = def
        .rules
        .iter()
        .map(|r| RulePlan {
            name: r.name.clone(),
            role: r.role,
            query: QueryPlan::new(&r.query, &sets),
            anchor: r.window.anchor,
            start_offset_days: r.window.start_offset_days,
            end_offset_days: r.window.end_offset_days,
            count_comparator: r.count_comparator,
            count: r.count,
        })
        .collect();
    let exit = match &def.exit {
        ExitStrategy::FixedOffset { days } => ExitPlan::FixedOffset { days: *days },
        ExitStrategy::EndOfContinuousExposure {
            concept_set_ref,
            persistence_gap_days,
        } => ExitPlan::ContinuousExposure {
            concepts: sets[concept_set_ref].clone(),
            persistence_gap_days: *persistence_gap_days,
        },
        ExitStrategy::EventBased { query } => ExitPlan::Event {
            query: QueryPlan::new(query, &sets),
        },
    };

    Ok(ExecutionPlan {
        definition_id: def.definition_id.clone(),
        version: def.version,
        concept_sets: sets,
        entry,
        prior_observation_days: def.prior_observation_days,
        demographics: def.demographic_constraints.clone(),
        rules,
        exit,
        warnings,
    })
}
