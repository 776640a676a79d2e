//! Cohort validity against ground truth, overall and by population stratum.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::date::Day;
use crate::engine::{self, CohortRecord, EngineError};
use crate::lifecycle::{LifecycleError, Registry};
use crate::store::Store;
use crate::table::{self, TableError};
use crate::PersonId;

pub const LABEL_HEADERS: &[&str] = &["person_id", "condition", "label"];
pub const DEFAULT_MIN_CELL: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("person {0} is in the population but has no label")]
    Unlabeled(PersonId),
    #[error("person {0} is in the cohort but not in the population")]
    OutsidePopulation(PersonId),
    #[error("labeled person {0} does not exist in the store")]
    UnknownPerson(PersonId),
    #[error("labels file holds conditions {0:?}; choose one")]
    AmbiguousCondition(Vec<String>),
    #[error("no labels for condition `{0}`")]
    NoLabels(String),
    #[error("unknown stratification axis `{0}` (expected race, gender or age_group)")]
    UnknownAxis(String),
    #[error("age bins must start at 0 and strictly increase")]
    InvalidBins,
    #[error("monitoring needs at least one snapshot")]
    NoSnapshots,
    #[error(transparent)]
    Registry(#[from] LifecycleError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Positive => "positive",
            Label::Negative => "negative",
        }
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "positive" => Ok(Label::Positive),
            "negative" => Ok(Label::Negative),
            _ => Err(format!("label must be `positive` or `negative`, got `{s}`")),
        }
    }
}

/// Ground truth for one named condition.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GroundTruthLabels {
    pub condition: String,
    pub labels: BTreeMap<PersonId, Label>,
}

impl GroundTruthLabels {
    pub fn new(condition: impl Into<String>) -> Self {
        Self {
            condition: condition.into(),
            labels: BTreeMap::new(),
        }
    }

    pub fn get(&self, person_id: PersonId) -> Option<Label> {
        self.labels.get(&person_id).copied()
    }

    pub fn persons(&self) -> BTreeSet<PersonId> {
        self.labels.keys().copied().collect()
    }

    pub fn positives(&self) -> impl Iterator<Item = PersonId> + '_ {
        self.labels
            .iter()
            .filter(|(_, l)| **l == Label::Positive)
            .map(|(p, _)| *p)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Reads `labels.csv`. With `condition = None` the file must hold exactly one condition.
    pub fn load(path: &Path, condition: Option<&str>) -> Result<Self, MetricsError> {
        let mut all = Self::load_all(path)?;
        let index = match condition {
            Some(c) => all
                .iter()
                .position(|l| l.condition == c)
                .ok_or_else(|| MetricsError::NoLabels(c.to_string()))?,
            None if all.len() == 1 => 0,
            None => return Err(MetricsError::AmbiguousCondition(all.into_iter().map(|l| l.condition).collect())),
        };
        Ok(all.swap_remove(index))
    }

    /// Every condition in `labels.csv`, ordered by name.
    pub fn load_all(path: &Path) -> Result<Vec<Self>, MetricsError> {
        let mut by_condition: BTreeMap<String, BTreeMap<PersonId, Label>> = BTreeMap::new();
        table::read_rows(path, LABEL_HEADERS, |row| {
            let person_id = row.i64("person_id")?;
            let cond = row.str("condition")?.to_string();
            let label: Label = row.str("label")?.parse().map_err(|m: String| row.err("label", m))?;
            let slot = by_condition.entry(cond).or_default();
            if slot.insert(person_id, label).is_some() {
                return Err(row.err("person_id", format!("person {person_id} labeled twice")));
            }
            Ok(())
        })?;
        Ok(by_condition
            .into_iter()
            .map(|(condition, labels)| Self { condition, labels })
            .collect())
    }

    pub fn write(&self, path: &Path) -> Result<(), TableError> {
        let mut w = table::writer(path)?;
        w.write_record(LABEL_HEADERS).map_err(|e| table::csv_err(path, e))?;
        for (person_id, label) in &self.labels {
            w.write_record([person_id.to_string().as_str(), &self.condition, label.as_str()])
                .map_err(|e| table::csv_err(path, e))?;
        }
        table::finish(path, w)
    }

    /// Every labeled person must exist in `store`.
    pub fn check_against(&self, store: &Store) -> Result<(), MetricsError> {
        match self.labels.keys().find(|p| store.person(**p).is_none()) {
            Some(p) => Err(MetricsError::UnknownPerson(*p)),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    fn record(&mut self, in_cohort: bool, label: Label) {
        match (in_cohort, label) {
            (true, Label::Positive) => self.tp += 1,
            (true, Label::Negative) => self.fp += 1,
            (false, Label::Positive) => self.fn_ += 1,
            (false, Label::Negative) => self.tn += 1,
        }
    }
}

impl std::ops::Add for ConfusionMatrix {
    type Output = ConfusionMatrix;

    fn add(self, o: ConfusionMatrix) -> ConfusionMatrix {
        ConfusionMatrix {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl std::iter::Sum for ConfusionMatrix {
    fn sum<I: Iterator<Item = ConfusionMatrix>>(iter: I) -> Self {
        iter.fold(ConfusionMatrix::default(), |a, b| a + b)
    }
}

/// Ratios derived from a confusion matrix. `None` (null in JSON) when the denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn derive_metrics(m: &ConfusionMatrix) -> Metrics {
    Metrics {
        sensitivity: ratio(m.tp, m.tp + m.fn_),
        specificity: ratio(m.tn, m.tn + m.fp),
        ppv: ratio(m.tp, m.tp + m.fp),
        npv: ratio(m.tn, m.tn + m.fn_),
        f1: ratio(2 * m.tp, 2 * m.tp + m.fp + m.fn_),
    }
}

pub fn cohort_ids(records: &[CohortRecord]) -> BTreeSet<PersonId> {
    records.iter().map(|r| r.person_id).collect()
}

pub fn confusion(
    cohort: &BTreeSet<PersonId>,
    labels: &GroundTruthLabels,
    population: &BTreeSet<PersonId>,
) -> Result<ConfusionMatrix, MetricsError> {
    if let Some(p) = cohort.iter().find(|p| !population.contains(p)) {
        return Err(MetricsError::OutsidePopulation(*p));
    }
    let mut m = ConfusionMatrix::default();
    for &p in population {
        let label = labels.get(p).ok_or(MetricsError::Unlabeled(p))?;
        m.record(cohort.contains(&p), label);
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Race,
    Gender,
    AgeGroup,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Race => "race",
            Axis::Gender => "gender",
            Axis::AgeGroup => "age_group",
        }
    }

    /// Parses a comma separated list such as `race,gender`.
    pub fn parse_list(s: &str) -> Result<Vec<Axis>, MetricsError> {
        s.split(',')
            .map(str::trim)
            .filter(|a| !a.is_empty())
            .map(str::parse)
            .collect()
    }
}

impl FromStr for Axis {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "race" => Ok(Axis::Race),
            "gender" => Ok(Axis::Gender),
            "age_group" | "age" => Ok(Axis::AgeGroup),
            _ => Err(MetricsError::UnknownAxis(s.to_string())),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Lower bounds of consecutive age bands; the last band is open ended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgeBins {
    lower: Vec<u32>,
}

impl Default for AgeBins {
    fn default() -> Self {
        Self {
            lower: (0..10).map(|i| i * 10).collect(),
        }
    }
}

impl AgeBins {
    pub fn new(lower: Vec<u32>) -> Result<Self, MetricsError> {
        if lower.first() != Some(&0) || lower.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MetricsError::InvalidBins);
        }
        Ok(Self { lower })
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    /// Band label such as `30-39` or `90+`; `None` for negative ages.
    pub fn label(&self, age: i32) -> Option<String> {
        if age < 0 {
            return None;
        }
        let age = age as u32;
        let i = self.lower.partition_point(|&lo| lo <= age) - 1;
        Some(match self.lower.get(i + 1) {
            Some(next) => format!("{}-{}", self.lower[i], next - 1),
            None => format!("{}+", self.lower[i]),
        })
    }
}

/// Ages are taken at the latest observation end date in the store, so the
/// same person lands in the same band whether or not they are in the cohort.
pub fn reference_date(store: &Store) -> Day {
    store
        .observation_periods()
        .iter()
        .map(|p| p.end_date)
        .max()
        .unwrap_or(Day(0))
}

fn stratum_key(
    store: &Store,
    person_id: PersonId,
    axes: &[Axis],
    bins: &AgeBins,
    reference: Day,
) -> Option<Vec<String>> {
    let person = store.person(person_id)?;
    axes.iter()
        .map(|axis| match axis {
            Axis::Race => (!person.race.is_empty()).then(|| person.race.clone()),
            Axis::Gender => (!person.gender.is_empty()).then(|| person.gender.clone()),
            Axis::AgeGroup => bins.label(reference.years_since(person.birth_date)),
        })
        .collect()
}

/// Unsuppressed confusion matrix per observed stratum tuple. Persons with an
/// undefined value on any axis fall outside every stratum.
pub fn partition_confusion(
    cohort: &BTreeSet<PersonId>,
    labels: &GroundTruthLabels,
    population: &BTreeSet<PersonId>,
    store: &Store,
    axes: &[Axis],
    bins: &AgeBins,
) -> Result<BTreeMap<Vec<String>, ConfusionMatrix>, MetricsError> {
    if let Some(p) = cohort.iter().find(|p| !population.contains(p)) {
        return Err(MetricsError::OutsidePopulation(*p));
    }
    let reference = reference_date(store);
    let mut cells: BTreeMap<Vec<String>, ConfusionMatrix> = BTreeMap::new();
    for &p in population {
        let label = labels.get(p).ok_or(MetricsError::Unlabeled(p))?;
        if let Some(key) = stratum_key(store, p, axes, bins, reference) {
            cells.entry(key).or_default().record(cohort.contains(&p), label);
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverallEvaluation {
    pub n: u64,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
}

/// One stratum; `confusion` and `metrics` are withheld when `suppressed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub axes: BTreeMap<String, String>,
    pub n: u64,
    pub suppressed: bool,
    pub confusion: Option<ConfusionMatrix>,
    pub metrics: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedReport {
    pub condition: String,
    pub axes: Vec<Axis>,
    pub overall: OverallEvaluation,
    pub strata: Vec<Stratum>,
    pub min_cell: usize,
}

impl StratifiedReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn suppressed(&self) -> impl Iterator<Item = &Stratum> {
        self.strata.iter().filter(|s| s.suppressed)
    }
}

/// Overall evaluation plus one cell per observed stratum tuple. With no axes
/// the report has no strata.
#[allow(clippy::too_many_arguments)]
pub fn stratify(
    cohort: &BTreeSet<PersonId>,
    labels: &GroundTruthLabels,
    population: &BTreeSet<PersonId>,
    store: &Store,
    axes: &[Axis],
    bins: &AgeBins,
    min_cell: usize,
) -> Result<StratifiedReport, MetricsError> {
    let overall = confusion(cohort, labels, population)?;
    let strata = if axes.is_empty() {
        Vec::new()
    } else {
        partition_confusion(cohort, labels, population, store, axes, bins)?
            .into_iter()
            .map(|(key, m)| {
                let n = m.total();
                let suppressed = n < min_cell as u64;
                Stratum {
                    axes: axes.iter().map(|a| a.to_string()).zip(key).collect(),
                    n,
                    suppressed,
                    confusion: (!suppressed).then_some(m),
                    metrics: (!suppressed).then(|| derive_metrics(&m)),
                }
            })
            .collect()
    };
    Ok(StratifiedReport {
        condition: labels.condition.clone(),
        axes: axes.to_vec(),
        overall: OverallEvaluation {
            n: overall.total(),
            confusion: overall,
            metrics: derive_metrics(&overall),
        },
        strata,
        min_cell,
    })
}

/// Convenience wrapper: the population is every labeled person.
pub fn evaluate(
    cohort: &[CohortRecord],
    labels: &GroundTruthLabels,
    store: &Store,
    axes: &[Axis],
    bins: &AgeBins,
    min_cell: usize,
) -> Result<StratifiedReport, MetricsError> {
    labels.check_against(store)?;
    let population = labels.persons();
    stratify(&cohort_ids(cohort), labels, &population, store, axes, bins, min_cell)
}

pub struct Snapshot<'a> {
    pub store: &'a Store,
    pub labels: &'a GroundTruthLabels,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorPoint {
    pub timestamp: DateTime<Utc>,
    pub version: u32,
    pub cohort_size: usize,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
}

/// Runs the latest registered version of `definition_id` against every
/// snapshot and returns one record per snapshot in timestamp order.
pub fn monitor(
    definition_id: &str,
    registry: &Registry,
    snapshots: &[Snapshot<'_>],
) -> Result<Vec<MonitorPoint>, MetricsError> {
    let (version, def) = registry.latest(definition_id)?;
    if snapshots.is_empty() {
        return Err(MetricsError::NoSnapshots);
    }
    let mut ordered: Vec<&Snapshot<'_>> = snapshots.iter().collect();
    ordered.sort_by_key(|s| s.timestamp);
    ordered
        .into_iter()
        .map(|snap| {
            let plan = engine::compile(&def, snap.store.vocab())?;
            let (cohort, _) = engine::execute(&plan, snap.store, 1)?;
            snap.labels.check_against(snap.store)?;
            let m = confusion(&cohort_ids(&cohort), snap.labels, &snap.labels.persons())?;
            Ok(MonitorPoint {
                timestamp: snap.timestamp,
                version,
                cohort_size: cohort.len(),
                confusion: m,
                metrics: derive_metrics(&m),
            })
        })
        .collect()
}
