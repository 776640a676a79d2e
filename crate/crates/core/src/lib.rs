//! Computable phenotype definitions over an OMOP-style patient event store.
//!
//! The crate is organised the way a definition moves through its life:
//!
//! - [`store`] and [`vocab`] hold patient events and the concept dictionary,
//! - [`definition`] is the definition AST with its canonical JSON form and checklist lint,
//! - [`dsl`] is the human-readable `.phen` language,
//! - [`engine`] compiles and executes definitions into cohorts with attrition,
//! - [`metrics`] scores cohorts against ground truth, overall and by stratum,
//! - [`synthgen`] produces synthetic stores with known labels,
//! - [`lifecycle`] keeps the versioned registry and evaluation history.

pub mod date;
pub mod definition;
pub mod dsl;
pub mod engine;
pub mod lifecycle;
pub mod metrics;
pub mod store;
pub mod synthgen;
mod table;
pub mod vocab;

pub use date::{Day, DayInterval};
pub use definition::{
    Anchor, ChecklistReport, Comparator, ConceptItem, ConceptSet, CriterionRule,
    DemographicConstraints, EventQuery, ExitStrategy, Metadata, Occurrence, PhenotypeDefinition,
    Role, StructuralIssue, TemporalWindow, ValuePredicate,
};
pub use engine::{AttritionReport, CohortRecord, ExecutionPlan};
pub use metrics::{ConfusionMatrix, GroundTruthLabels, Label, Metrics, StratifiedReport};
pub use store::{ClinicalEvent, DataDictionary, Domain, ObservationPeriod, Person, Store};
pub use vocab::{Concept, ConceptAncestry, Vocabulary};

/// Identifier of a person in the store.
pub type PersonId = i64;
/// Identifier of a clinical event.
pub type EventId = i64;
/// Identifier of a vocabulary concept.
pub type ConceptId = i64;
