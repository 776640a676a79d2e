//! Phenotype definition AST, structural validation, canonical JSON form and
//! the development checklist lint.

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::store::Domain;
use crate::vocab::{self, SufficiencyReport, Vocabulary};
use crate::ConceptId;

pub use crate::vocab::{ConceptItem, ConceptSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Occurrence {
    FirstEver,
    Any,
    Nth(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = ">")]
    Gt,
}

impl Comparator {
    pub const ALL: [Comparator; 5] = [
        Comparator::Lt,
        Comparator::Le,
        Comparator::Eq,
        Comparator::Ge,
        Comparator::Gt,
    ];

    pub fn holds<T: PartialOrd>(self, lhs: T, rhs: T) -> bool {
        match self {
            Comparator::Lt => lhs < rhs,
            Comparator::Le => lhs <= rhs,
            Comparator::Eq => lhs == rhs,
            Comparator::Ge => lhs >= rhs,
            Comparator::Gt => lhs > rhs,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Comparator::Lt => "<",
            Comparator::Le => "<=",
            Comparator::Eq => "=",
            Comparator::Ge => ">=",
            Comparator::Gt => ">",
        }
    }

    pub fn from_symbol(s: &str) -> Option<Comparator> {
        Comparator::ALL.into_iter().find(|c| c.symbol() == s)
    }
}

impl fmt::Display for Comparator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

/// Numeric filter on measurement events.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValuePredicate {
    pub comparator: Comparator,
    pub threshold: f64,
    #[serde(default)]
    pub unit_concept_id: Option<ConceptId>,
}

impl ValuePredicate {
    pub fn matches(&self, value: Option<f64>, unit: Option<ConceptId>) -> bool {
        let Some(value) = value else { return false };
        if self.unit_concept_id.is_some() && self.unit_concept_id != unit {
            return false;
        }
        self.comparator.holds(value, self.threshold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventQuery {
    pub domain: Domain,
    pub concept_set_ref: String,
    pub occurrence: Occurrence,
    #[serde(default)]
    pub value_predicate: Option<ValuePredicate>,
}

impl EventQuery {
    pub fn new(domain: Domain, concept_set_ref: impl Into<String>, occurrence: Occurrence) -> Self {
        Self {
            domain,
            concept_set_ref: concept_set_ref.into(),
            occurrence,
            value_predicate: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    IndexDate,
    EntryStart,
    EntryEnd,
}

impl Anchor {
    pub fn as_str(self) -> &'static str {
        match self {
            Anchor::IndexDate => "index_date",
            Anchor::EntryStart => "entry_start",
            Anchor::EntryEnd => "entry_end",
        }
    }
}

/// Closed day-offset window relative to an anchor date.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemporalWindow {
    pub anchor: Anchor,
    pub start_offset_days: i32,
    pub end_offset_days: i32,
}

impl TemporalWindow {
    pub fn around_index(start_offset_days: i32, end_offset_days: i32) -> Self {
        Self {
            anchor: Anchor::IndexDate,
            start_offset_days,
            end_offset_days,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Inclusion,
    Exclusion,
    Strengthener,
    Disqualifier,
}

impl Role {
    /// Whether a satisfied rule removes the person.
    pub fn removes_when_satisfied(self) -> bool {
        matches!(self, Role::Exclusion | Role::Disqualifier)
    }

    pub fn gates(self) -> bool {
        self != Role::Strengthener
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Inclusion => "inclusion",
            Role::Exclusion => "exclusion",
            Role::Strengthener => "strengthener",
            Role::Disqualifier => "disqualifier",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriterionRule {
    pub name: String,
    pub query: EventQuery,
    pub window: TemporalWindow,
    pub count_comparator: Comparator,
    pub count: u32,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExitStrategy {
    FixedOffset {
        days: u32,
    },
    EndOfContinuousExposure {
        concept_set_ref: String,
        persistence_gap_days: u32,
    },
    EventBased {
        query: EventQuery,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgeRange {
    pub min: u32,
    pub max: u32,
}

/// Constraints evaluated at the index date. `None` leaves an axis unconstrained.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemographicConstraints {
    #[serde(default)]
    pub age_at_index: Option<AgeRange>,
    #[serde(default)]
    pub gender: Option<BTreeSet<String>>,
    #[serde(default)]
    pub race: Option<BTreeSet<String>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    #[serde(default)]
    pub intent: String,
    #[serde(default)]
    pub literature_refs: Vec<String>,
    #[serde(default)]
    pub authors: Vec<String>,
    /// Why no disqualifier or strengthener rules are present, when none are.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role_waiver: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhenotypeDefinition {
    #[serde(rename = "id")]
    pub definition_id: String,
    pub version: u32,
    #[serde(default)]
    pub metadata: Metadata,
    pub concept_sets: Vec<ConceptSet>,
    pub entry: EventQuery,
    #[serde(default)]
    pub prior_observation_days: u32,
    #[serde(rename = "demographics", default)]
    pub demographic_constraints: Option<DemographicConstraints>,
    #[serde(default)]
    pub rules: Vec<CriterionRule>,
    pub exit: ExitStrategy,
    #[serde(default)]
    pub era_gap_days: u32,
}

impl PhenotypeDefinition {
    pub fn concept_set(&self, set_id: &str) -> Option<&ConceptSet> {
        self.concept_sets.iter().find(|s| s.set_id == set_id)
    }

    /// Serializes to the canonical JSON document: fixed key order, two-space
    /// indentation, trailing newline.
    pub fn to_canonical(&self) -> String {
        let mut doc = serde_json::to_string_pretty(self).expect("definition serializes");
        doc.push('\n');
        doc
    }

    pub fn from_canonical(document: &str) -> Result<Self, CanonicalError> {
        serde_json::from_str(document).map_err(|e| CanonicalError {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    /// Hex SHA-256 of the canonical document.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Every concept id named by any concept-set item.
    pub fn referenced_concepts(&self) -> BTreeSet<ConceptId> {
        self.concept_sets
            .iter()
            .flat_map(|s| s.items.iter().map(|i| i.concept_id))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{message}")]
pub struct CanonicalError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

/// A broken invariant, located by a path into the definition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuralIssue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for StructuralIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Checks every type invariant and name reference. An empty list means the
/// definition is structurally valid.
pub fn validate_definition(def: &PhenotypeDefinition) -> Vec<StructuralIssue> {
    let mut issues = Vec::new();
    let mut issue = |path: String, message: String| issues.push(StructuralIssue { path, message });

    if def.definition_id.trim().is_empty() {
        issue("id".into(), "definition id is empty".into());
    }
    if def.version < 1 {
        issue("version".into(), "version must be at least 1".into());
    }

    let mut declared = HashSet::new();
    for (i, set) in def.concept_sets.iter().enumerate() {
        let path = format!("concept_sets[{i}]");
        if !is_identifier(&set.set_id) {
            issue(format!("{path}.set_id"), format!("`{}` is not an identifier", set.set_id));
        }
        if !declared.insert(set.set_id.as_str()) {
            issue(format!("{path}.set_id"), format!("concept set `{}` declared twice", set.set_id));
        }
    }

    let check_query = |path: &str, q: &EventQuery, issue: &mut dyn FnMut(String, String)| {
        if !declared.contains(q.concept_set_ref.as_str()) {
            issue(
                format!("{path}.concept_set_ref"),
                format!("undeclared concept set `{}`", q.concept_set_ref),
            );
        }
        if let Occurrence::Nth(0) = q.occurrence {
            issue(format!("{path}.occurrence"), "nth occurrence must be at least 1".into());
        }
        if let Some(vp) = &q.value_predicate {
            if q.domain != Domain::Measurement {
                issue(
                    format!("{path}.value_predicate"),
                    format!("value predicate on a {} query", q.domain),
                );
            }
            if !vp.threshold.is_finite() {
                issue(format!("{path}.value_predicate.threshold"), "threshold is not finite".into());
            }
        }
    };

    check_query("entry", &def.entry, &mut issue);

    if let Some(demo) = &def.demographic_constraints {
        if let Some(age) = demo.age_at_index {
            if age.min > age.max {
                issue(
                    "demographics.age_at_index".into(),
                    format!("age range [{}, {}] is empty", age.min, age.max),
                );
            }
        }
        for (axis, set) in [("gender", &demo.gender), ("race", &demo.race)] {
            if let Some(values) = set {
                if values.is_empty() {
                    issue(format!("demographics.{axis}"), "constraint set is empty".into());
                }
            }
        }
    }

    let mut names = HashSet::new();
    for (i, rule) in def.rules.iter().enumerate() {
        let path = format!("rules[{i}]");
        if rule.name.trim().is_empty() {
            issue(format!("{path}.name"), "rule name is empty".into());
        }
        if !names.insert(rule.name.as_str()) {
            issue(format!("{path}.name"), format!("rule name `{}` is not unique", rule.name));
        }
        check_query(&format!("{path}.query"), &rule.query, &mut issue);
        if rule.window.start_offset_days > rule.window.end_offset_days {
            issue(
                format!("{path}.window"),
                format!(
                    "window start {} is after end {}",
                    rule.window.start_offset_days, rule.window.end_offset_days
                ),
            );
        }
    }

    match &def.exit {
        ExitStrategy::FixedOffset { .. } => {}
        ExitStrategy::EndOfContinuousExposure { concept_set_ref, .. } => {
            if !declared.contains(concept_set_ref.as_str()) {
                issue(
                    "exit.concept_set_ref".into(),
                    format!("undeclared concept set `{concept_set_ref}`"),
                );
            }
        }
        ExitStrategy::EventBased { query } => check_query("exit.query", query, &mut issue),
    }

    issues
}

pub const ITEM_INTENT: &str = "Intent";
pub const ITEM_LITERATURE: &str = "Literature review";
pub const ITEM_PHENOTYPES: &str = "Identify phenotypes";
pub const ITEM_CONSTRAINTS: &str = "Add constraints";
pub const ITEM_ROLES: &str = "Define disqualifiers and/or strengtheners";
pub const ITEM_VOCABULARY: &str = "Vocabulary mapped sufficiently";
pub const ITEM_LOGIC: &str = "Entry and exit defined";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChecklistItem {
    pub item: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChecklistReport {
    pub passed: bool,
    pub items: Vec<ChecklistItem>,
    pub threshold: f64,
    pub sufficiency: Option<SufficiencyReport>,
}

impl ChecklistReport {
    pub fn failures(&self) -> impl Iterator<Item = &ChecklistItem> {
        self.items.iter().filter(|i| !i.passed)
    }

    pub fn item(&self, name: &str) -> Option<&ChecklistItem> {
        self.items.iter().find(|i| i.item == name)
    }
}

/// Runs the machine-checkable items of the development checklist.
///
/// Mapping sufficiency is measured over `source_codes` when given; otherwise
/// over the concept ids the definition references, counted as mapped when the
/// vocabulary knows them.
pub fn checklist_lint(
    def: &PhenotypeDefinition,
    vocab: &Vocabulary,
    sufficiency_threshold: f64,
    source_codes: Option<&[String]>,
) -> ChecklistReport {
    let mut items = Vec::new();
    let mut push = |item: &str, passed: bool, detail: String| {
        items.push(ChecklistItem {
            item: item.to_string(),
            passed,
            detail,
        })
    };

    let intent = def.metadata.intent.trim();
    push(
        ITEM_INTENT,
        !intent.is_empty(),
        if intent.is_empty() { "intent is empty".into() } else { intent.to_string() },
    );

    let refs = def.metadata.literature_refs.len();
    push(ITEM_LITERATURE, refs > 0, format!("{refs} literature reference(s)"));

    let empty_sets: Vec<&str> = def
        .concept_sets
        .iter()
        .filter(|s| s.items.is_empty())
        .map(|s| s.set_id.as_str())
        .collect();
    push(
        ITEM_PHENOTYPES,
        !def.concept_sets.is_empty() && empty_sets.is_empty(),
        if def.concept_sets.is_empty() {
            "no concept sets declared".into()
        } else if !empty_sets.is_empty() {
            format!("concept sets without items: {}", empty_sets.join(", "))
        } else {
            format!("{} concept set(s)", def.concept_sets.len())
        },
    );

    let constraints = def
        .rules
        .iter()
        .filter(|r| matches!(r.role, Role::Inclusion | Role::Exclusion))
        .count();
    push(ITEM_CONSTRAINTS, constraints > 0, format!("{constraints} inclusion/exclusion rule(s)"));

    let role_rules = def
        .rules
        .iter()
        .filter(|r| matches!(r.role, Role::Strengthener | Role::Disqualifier))
        .count();
    let waiver = def
        .metadata
        .role_waiver
        .as_deref()
        .map(str::trim)
        .filter(|w| !w.is_empty());
    push(
        ITEM_ROLES,
        role_rules > 0 || waiver.is_some(),
        match (role_rules, waiver) {
            (n, _) if n > 0 => format!("{n} strengthener/disqualifier rule(s)"),
            (_, Some(w)) => format!("waived: {w}"),
            _ => "no strengthener or disqualifier rules and no waiver".into(),
        },
    );

    let sufficiency = match source_codes {
        Some(codes) => vocab::mapping_sufficiency(codes.iter().map(String::as_str), vocab).ok(),
        None => {
            let referenced = def.referenced_concepts();
            (!referenced.is_empty()).then(|| {
                let unmapped: Vec<String> = referenced
                    .iter()
                    .filter(|c| !vocab.contains(**c))
                    .map(|c| c.to_string())
                    .collect();
                let mapped = referenced.len() - unmapped.len();
                SufficiencyReport {
                    total: referenced.len(),
                    mapped,
                    mapped_fraction: mapped as f64 / referenced.len() as f64,
                    unmapped,
                }
            })
        }
    };
    match &sufficiency {
        Some(r) => push(
            ITEM_VOCABULARY,
            r.mapped_fraction >= sufficiency_threshold,
            format!(
                "{}/{} mapped ({:.3}, threshold {sufficiency_threshold})",
                r.mapped, r.total, r.mapped_fraction
            ),
        ),
        None => push(ITEM_VOCABULARY, false, "no codes to check".into()),
    }

    let resolves = |set_id: &str| -> Result<(), String> {
        let set = def
            .concept_set(set_id)
            .ok_or_else(|| format!("`{set_id}` is not declared"))?;
        match vocab::resolve_concept_set(set, vocab) {
            Ok(ids) if ids.is_empty() => Err(format!("`{set_id}` resolves to no concepts")),
            Ok(_) => Ok(()),
            Err(e) => Err(format!("`{set_id}`: {e}")),
        }
    };
    let mut logic = vec![resolves(&def.entry.concept_set_ref).map_err(|e| format!("entry {e}"))];
    match &def.exit {
        ExitStrategy::FixedOffset { .. } => {}
        ExitStrategy::EndOfContinuousExposure { concept_set_ref, .. } => {
            logic.push(resolves(concept_set_ref).map_err(|e| format!("exit {e}")))
        }
        ExitStrategy::EventBased { query } => {
            logic.push(resolves(&query.concept_set_ref).map_err(|e| format!("exit {e}")))
        }
    }
    let problems: Vec<String> = logic.into_iter().filter_map(Result::err).collect();
    push(
        ITEM_LOGIC,
        problems.is_empty(),
        if problems.is_empty() { "entry and exit resolve".into() } else { problems.join("; ") },
    );

    ChecklistReport {
        passed: items.iter().all(|i| i.passed),
        items,
        threshold: sufficiency_threshold,
        sufficiency,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> PhenotypeDefinition {
        PhenotypeDefinition {
            definition_id: "d".into(),
            version: 1,
            metadata: Metadata::default(),
            concept_sets: vec![ConceptSet::new("s", vec![ConceptItem::include(1, true)])],
            entry: EventQuery::new(Domain::Drug, "s", Occurrence::FirstEver),
            prior_observation_days: 0,
            demographic_constraints: None,
            rules: vec![],
            exit: ExitStrategy::FixedOffset { days: 30 },
            era_gap_days: 0,
        }
    }

    fn rule(name: &str, set: &str, start: i32, end: i32) -> CriterionRule {
        CriterionRule {
            name: name.into(),
            query: EventQuery::new(Domain::Condition, set, Occurrence::Any),
            window: TemporalWindow::around_index(start, end),
            count_comparator: Comparator::Ge,
            count: 1,
            role: Role::Inclusion,
        }
    }

    #[test]
    fn undeclared_set_names_the_rule() {
        let mut def = minimal();
        def.rules.push(rule("needs dx", "missing", -10, -1));
        let issues = validate_definition(&def);
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].path, "rules[0].query.concept_set_ref");
    }

    #[test]
    fn reversed_window_is_one_issue() {
        let mut def = minimal();
        def.rules.push(rule("r", "s", -1, -10));
        let issues = validate_definition(&def);
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].path, "rules[0].window");
    }

    #[test]
    fn value_predicate_requires_measurement() {
        let mut def = minimal();
        def.entry.value_predicate = Some(ValuePredicate {
            comparator: Comparator::Ge,
            threshold: 6.5,
            unit_concept_id: None,
        });
        assert_eq!(validate_definition(&def)[0].path, "entry.value_predicate");
        def.entry.domain = Domain::Measurement;
        assert!(validate_definition(&def).is_empty());
    }

    #[test]
    fn validation_is_pure() {
        let mut def = minimal();
        def.version = 0;
        def.rules.push(rule("r", "x", 5, 1));
        def.rules.push(rule("r", "s", 0, 1));
        let a = validate_definition(&def);
        assert_eq!(a, validate_definition(&def));
        assert_eq!(a.len(), 4);
    }

    #[test]
    fn canonical_round_trip_and_errors() {
        let mut def = minimal();
        def.rules.push(rule("r", "s", -365, 0));
        let doc = def.to_canonical();
        assert_eq!(PhenotypeDefinition::from_canonical(&doc).unwrap(), def);
        assert_eq!(doc, PhenotypeDefinition::from_canonical(&doc).unwrap().to_canonical());

        let mut value: serde_json::Value = serde_json::from_str(&doc).unwrap();
        value.as_object_mut().unwrap().remove("entry");
        let err = PhenotypeDefinition::from_canonical(&value.to_string()).unwrap_err();
        assert!(err.message.contains("missing field `entry`"), "{}", err.message);

        let bad = doc.replace("\"inclusion\"", "\"sometimes\"");
        let err = PhenotypeDefinition::from_canonical(&bad).unwrap_err();
        for allowed in ["inclusion", "exclusion", "strengthener", "disqualifier"] {
            assert!(err.message.contains(allowed), "{}", err.message);
        }
        assert!(err.line > 0);
    }

    #[test]
    fn top_level_keys() {
        let value: serde_json::Value = serde_json::from_str(&minimal().to_canonical()).unwrap();
        let keys: Vec<&str> = value.as_object().unwrap().keys().map(String::as_str).collect();
        let mut expected = vec![
            "id",
            "version",
            "metadata",
            "concept_sets",
            "entry",
            "prior_observation_days",
            "demographics",
            "rules",
            "exit",
            "era_gap_days",
        ];
        expected.sort();
        let mut keys = keys;
        keys.sort();
        assert_eq!(keys, expected);
    }
}
