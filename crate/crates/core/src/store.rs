//! Immutable OMOP-lite patient event store.
//!
//! A store is built once, from delimited files or from in-memory rows, and is
//! read-only afterwards. Events are kept sorted by
//! `(person, domain, start_date, event_id)` so a person's events of one domain
//! form a contiguous slice that can be binary-searched by date.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::date::{Day, DayInterval};
use crate::table::{self, fmt_opt, TableError};
use crate::vocab::{VocabError, Vocabulary};
use crate::{ConceptId, EventId, PersonId};

pub const PERSONS_FILE: &str = "persons.csv";
pub const OBSERVATION_FILE: &str = "observation_periods.csv";
pub const EVENTS_FILE: &str = "events.csv";

pub const PERSON_HEADERS: &[&str] = &["person_id", "birth_date", "gender", "race", "ethnicity"];
pub const OBSERVATION_HEADERS: &[&str] = &["person_id", "start_date", "end_date"];
pub const EVENT_HEADERS: &[&str] = &[
    "event_id",
    "person_id",
    "domain",
    "concept_id",
    "start_date",
    "end_date",
    "value_as_number",
    "unit_concept_id",
];

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("{what}: {message}")]
    Invalid { what: String, message: String },
    #[error("unknown person_id {0}")]
    UnknownPerson(PersonId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Condition,
    Drug,
    Measurement,
    Procedure,
    Visit,
    Death,
}

impl Domain {
    pub const ALL: [Domain; 6] = [
        Domain::Condition,
        Domain::Drug,
        Domain::Measurement,
        Domain::Procedure,
        Domain::Visit,
        Domain::Death,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Condition => "condition",
            Domain::Drug => "drug",
            Domain::Measurement => "measurement",
            Domain::Procedure => "procedure",
            Domain::Visit => "visit",
            Domain::Death => "death",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Domain::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| {
                format!(
                    "unknown domain `{s}`, expected one of: condition, drug, measurement, procedure, visit, death"
                )
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Person {
    pub person_id: PersonId,
    pub birth_date: Day,
    pub gender: String,
    pub race: String,
    pub ethnicity: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationPeriod {
    pub person_id: PersonId,
    pub start_date: Day,
    pub end_date: Day,
}

impl ObservationPeriod {
    pub fn interval(&self) -> DayInterval {
        DayInterval::new(self.start_date, self.end_date)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalEvent {
    pub event_id: EventId,
    pub person_id: PersonId,
    pub domain: Domain,
    pub concept_id: ConceptId,
    pub start_date: Day,
    pub end_date: Option<Day>,
    pub value_as_number: Option<f64>,
    pub unit_concept_id: Option<ConceptId>,
}

impl ClinicalEvent {
    /// End date for era logic: the start date when no end is recorded.
    pub fn effective_end(&self) -> Day {
        self.end_date.unwrap_or(self.start_date)
    }

    fn check(&self, vocab: &Vocabulary, birth: Day) -> Result<(), (&'static str, String)> {
        if !vocab.contains(self.concept_id) {
            return Err(("concept_id", format!("unknown concept_id {}", self.concept_id)));
        }
        if let Some(unit) = self.unit_concept_id {
            if !vocab.contains(unit) {
                return Err(("unit_concept_id", format!("unknown concept_id {unit}")));
            }
        }
        if let Some(end) = self.end_date {
            if end < self.start_date {
                return Err(("end_date", format!("end_date {end} precedes start_date {}", self.start_date)));
            }
        }
        if self.value_as_number.is_some() && self.domain != Domain::Measurement {
            return Err((
                "value_as_number",
                format!("value_as_number present on a {} event", self.domain),
            ));
        }
        if self.start_date < birth {
            return Err((
                "start_date",
                format!("event dated {} before birth_date {birth}", self.start_date),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnDescriptor {
    pub name: String,
    pub semantic_type: String,
    pub required: bool,
    pub missing: usize,
    pub missingness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableDescriptor {
    pub name: String,
    pub rows: usize,
    pub columns: Vec<ColumnDescriptor>,
}

/// Per-table column descriptors with row counts and missingness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataDictionary {
    pub tables: Vec<TableDescriptor>,
}

impl DataDictionary {
    pub fn table(&self, name: &str) -> Option<&TableDescriptor> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn rows(&self, name: &str) -> usize {
        self.table(name).map_or(0, |t| t.rows)
    }

    pub fn column(&self, table: &str, column: &str) -> Option<&ColumnDescriptor> {
        self.table(table)?.columns.iter().find(|c| c.name == column)
    }

    /// Row counts by table name.
    pub fn summary(&self) -> BTreeMap<String, usize> {
        self.tables.iter().map(|t| (t.name.clone(), t.rows)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Store {
    vocab: Vocabulary,
    persons: Vec<Person>,
    person_index: HashMap<PersonId, usize>,
    periods: Vec<ObservationPeriod>,
    period_offsets: Vec<usize>,
    events: Vec<ClinicalEvent>,
    event_offsets: Vec<usize>,
}

impl Store {
    /// Builds a store from in-memory rows, enforcing the same invariants as file ingestion.
    pub fn new(
        vocab: Vocabulary,
        persons: Vec<Person>,
        periods: Vec<ObservationPeriod>,
        events: Vec<ClinicalEvent>,
    ) -> Result<Store, StoreError> {
        let invalid = |what: String, message: String| StoreError::Invalid { what, message };
        let mut births = HashMap::with_capacity(persons.len());
        for p in &persons {
            if births.insert(p.person_id, p.birth_date).is_some() {
                return Err(invalid(
                    format!("person {}", p.person_id),
                    "duplicate person_id".into(),
                ));
            }
        }
        for op in &periods {
            if !births.contains_key(&op.person_id) {
                return Err(invalid(
                    "observation period".into(),
                    format!("unknown person_id {}", op.person_id),
                ));
            }
            if op.start_date > op.end_date {
                return Err(invalid(
                    format!("observation period of person {}", op.person_id),
                    "start_date after end_date".into(),
                ));
            }
        }
        let mut ids = HashSet::with_capacity(events.len());
        for e in &events {
            let birth = *births.get(&e.person_id).ok_or_else(|| {
                invalid(
                    format!("event {}", e.event_id),
                    format!("unknown person_id {}", e.person_id),
                )
            })?;
            if !ids.insert(e.event_id) {
                return Err(invalid(format!("event {}", e.event_id), "duplicate event_id".into()));
            }
            e.check(&vocab, birth)
                .map_err(|(column, message)| invalid(format!("event {} {column}", e.event_id), message))?;
        }
        Ok(Self::assemble(vocab, persons, periods, events))
    }

    fn assemble(
        vocab: Vocabulary,
        mut persons: Vec<Person>,
        mut periods: Vec<ObservationPeriod>,
        mut events: Vec<ClinicalEvent>,
    ) -> Store {
        persons.sort_by_key(|p| p.person_id);
        let person_index: HashMap<PersonId, usize> = persons
            .iter()
            .enumerate()
            .map(|(i, p)| (p.person_id, i))
            .collect();

        periods.sort_by_key(|p| (p.person_id, p.start_date, p.end_date));
        let periods = merge_periods(periods);
        let mut period_offsets = vec![0; persons.len() + 1];
        for p in &periods {
            period_offsets[person_index[&p.person_id] + 1] += 1;
        }
        for i in 0..persons.len() {
            period_offsets[i + 1] += period_offsets[i];
        }

        events.sort_unstable_by_key(|e| (e.person_id, e.domain, e.start_date, e.event_id));
        let slots = persons.len() * Domain::ALL.len();
        let mut event_offsets = vec![0; slots + 1];
        for e in &events {
            event_offsets[person_index[&e.person_id] * Domain::ALL.len() + e.domain.index() + 1] += 1;
        }
        for i in 0..slots {
            event_offsets[i + 1] += event_offsets[i];
        }

        Store {
            vocab,
            persons,
            person_index,
            periods,
            period_offsets,
            events,
            event_offsets,
        }
    }

    /// Reads and validates the three delimited files plus a vocabulary bundle.
    pub fn ingest(
        persons_file: &Path,
        observation_file: &Path,
        events_file: &Path,
        vocab_bundle: &Path,
    ) -> Result<Store, StoreError> {
        let vocab = Vocabulary::load(vocab_bundle)?;

        let mut persons = Vec::new();
        let mut births: HashMap<PersonId, Day> = HashMap::new();
        table::read_rows(persons_file, PERSON_HEADERS, |row| {
            let person = Person {
                person_id: row.i64("person_id")?,
                birth_date: row.day("birth_date")?,
                gender: row.str("gender")?.to_string(),
                race: row.str("race")?.to_string(),
                ethnicity: row.opt_str("ethnicity").unwrap_or("").to_string(),
            };
            if births.insert(person.person_id, person.birth_date).is_some() {
                return Err(row.err("person_id", format!("duplicate person_id {}", person.person_id)));
            }
            persons.push(person);
            Ok(())
        })?;

        let mut periods = Vec::new();
        table::read_rows(observation_file, OBSERVATION_HEADERS, |row| {
            let period = ObservationPeriod {
                person_id: row.i64("person_id")?,
                start_date: row.day("start_date")?,
                end_date: row.day("end_date")?,
            };
            if !births.contains_key(&period.person_id) {
                return Err(row.err("person_id", format!("unknown person_id {}", period.person_id)));
            }
            if period.start_date > period.end_date {
                return Err(row.err("end_date", "end_date precedes start_date"));
            }
            periods.push(period);
            Ok(())
        })?;

        let mut events = Vec::new();
        let mut ids = HashSet::new();
        table::read_rows(events_file, EVENT_HEADERS, |row| {
            let domain = row
                .str("domain")?
                .parse::<Domain>()
                .map_err(|e| row.err("domain", e))?;
            let event = ClinicalEvent {
                event_id: row.i64("event_id")?,
                person_id: row.i64("person_id")?,
                domain,
                concept_id: row.i64("concept_id")?,
                start_date: row.day("start_date")?,
                end_date: row.opt_day("end_date")?,
                value_as_number: row.opt_f64("value_as_number")?,
                unit_concept_id: row.opt_i64("unit_concept_id")?,
            };
            let birth = *births
                .get(&event.person_id)
                .ok_or_else(|| row.err("person_id", format!("unknown person_id {}", event.person_id)))?;
            if !ids.insert(event.event_id) {
                return Err(row.err("event_id", format!("duplicate event_id {}", event.event_id)));
            }
            event
                .check(&vocab, birth)
                .map_err(|(column, message)| row.err(column, message))?;
            events.push(event);
            Ok(())
        })?;

        Ok(Self::assemble(vocab, persons, periods, events))
    }

    /// Opens a store directory holding the canonical file names.
    pub fn open(dir: &Path) -> Result<Store, StoreError> {
        Self::ingest(
            &dir.join(PERSONS_FILE),
            &dir.join(OBSERVATION_FILE),
            &dir.join(EVENTS_FILE),
            dir,
        )
    }

    /// Writes the normalized store (merged periods, sorted rows) and its
    /// vocabulary into `dir`. Identical stores produce identical bytes.
    pub fn write_dir(&self, dir: &Path) -> Result<(), StoreError> {
        std::fs::create_dir_all(dir).map_err(|source| TableError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        self.vocab.write(dir)?;

        let path = dir.join(PERSONS_FILE);
        let mut w = table::writer(&path)?;
        w.write_record(PERSON_HEADERS).map_err(|e| table::csv_err(&path, e))?;
        for p in &self.persons {
            w.write_record([
                p.person_id.to_string().as_str(),
                &p.birth_date.to_string(),
                &p.gender,
                &p.race,
                &p.ethnicity,
            ])
            .map_err(|e| table::csv_err(&path, e))?;
        }
        table::finish(&path, w)?;

        let path = dir.join(OBSERVATION_FILE);
        let mut w = table::writer(&path)?;
        w.write_record(OBSERVATION_HEADERS).map_err(|e| table::csv_err(&path, e))?;
        for op in &self.periods {
            w.write_record([
                op.person_id.to_string(),
                op.start_date.to_string(),
                op.end_date.to_string(),
            ])
            .map_err(|e| table::csv_err(&path, e))?;
        }
        table::finish(&path, w)?;

        let path = dir.join(EVENTS_FILE);
        let mut w = table::writer(&path)?;
        w.write_record(EVENT_HEADERS).map_err(|e| table::csv_err(&path, e))?;
        for e in &self.events {
            w.write_record([
                e.event_id.to_string(),
                e.person_id.to_string(),
                e.domain.as_str().to_string(),
                e.concept_id.to_string(),
                e.start_date.to_string(),
                fmt_opt(e.end_date),
                fmt_opt(e.value_as_number),
                fmt_opt(e.unit_concept_id),
            ])
            .map_err(|err| table::csv_err(&path, err))?;
        }
        table::finish(&path, w)?;
        Ok(())
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Persons sorted by `person_id`.
    pub fn persons(&self) -> &[Person] {
        &self.persons
    }

    pub fn person(&self, person_id: PersonId) -> Option<&Person> {
        self.person_index.get(&person_id).map(|&i| &self.persons[i])
    }

    pub fn person_position(&self, person_id: PersonId) -> Option<usize> {
        self.person_index.get(&person_id).copied()
    }

    /// All merged observation periods.
    pub fn observation_periods(&self) -> &[ObservationPeriod] {
        &self.periods
    }

    /// Merged observation periods of the person at `position`, sorted by start.
    pub fn periods_at(&self, position: usize) -> &[ObservationPeriod] {
        &self.periods[self.period_offsets[position]..self.period_offsets[position + 1]]
    }

    /// All events in storage order.
    pub fn events(&self) -> &[ClinicalEvent] {
        &self.events
    }

    /// Events of one person and domain sorted by `(start_date, event_id)`.
    pub fn events_at(&self, position: usize, domain: Domain) -> &[ClinicalEvent] {
        let slot = position * Domain::ALL.len() + domain.index();
        &self.events[self.event_offsets[slot]..self.event_offsets[slot + 1]]
    }

    /// Events of `person_id` in `domain` whose concept is in `concept_ids` and
    /// whose start date lies in the closed `window`, sorted by `(start_date, event_id)`.
    pub fn events_in_window(
        &self,
        person_id: PersonId,
        domain: Domain,
        concept_ids: &std::collections::BTreeSet<ConceptId>,
        window: DayInterval,
    ) -> Result<Vec<&ClinicalEvent>, StoreError> {
        let position = self
            .person_position(person_id)
            .ok_or(StoreError::UnknownPerson(person_id))?;
        if concept_ids.is_empty() || window.start > window.end {
            return Ok(Vec::new());
        }
        Ok(window_slice(self.events_at(position, domain), window)
            .iter()
            .filter(|e| concept_ids.contains(&e.concept_id))
            .collect())
    }

    pub fn data_dictionary(&self) -> DataDictionary {
        fn column(name: &str, semantic_type: &str, required: bool, missing: usize, rows: usize) -> ColumnDescriptor {
            ColumnDescriptor {
                name: name.to_string(),
                semantic_type: semantic_type.to_string(),
                required,
                missing,
                missingness: if rows == 0 { 0.0 } else { missing as f64 / rows as f64 },
            }
        }
        let n = self.persons.len();
        let ethnicity_missing = self.persons.iter().filter(|p| p.ethnicity.is_empty()).count();
        let persons = TableDescriptor {
            name: "persons".into(),
            rows: n,
            columns: vec![
                column("person_id", "integer", true, 0, n),
                column("birth_date", "date", true, 0, n),
                column("gender", "code", true, 0, n),
                column("race", "code", true, 0, n),
                column("ethnicity", "code", false, ethnicity_missing, n),
            ],
        };
        let n = self.periods.len();
        let periods = TableDescriptor {
            name: "observation_periods".into(),
            rows: n,
            columns: vec![
                column("person_id", "integer", true, 0, n),
                column("start_date", "date", true, 0, n),
                column("end_date", "date", true, 0, n),
            ],
        };
        let n = self.events.len();
        let (mut end, mut value, mut unit) = (0, 0, 0);
        for e in &self.events {
            end += e.end_date.is_none() as usize;
            value += e.value_as_number.is_none() as usize;
            unit += e.unit_concept_id.is_none() as usize;
        }
        let events = TableDescriptor {
            name: "events".into(),
            rows: n,
            columns: vec![
                column("event_id", "integer", true, 0, n),
                column("person_id", "integer", true, 0, n),
                column("domain", "code", true, 0, n),
                column("concept_id", "concept", true, 0, n),
                column("start_date", "date", true, 0, n),
                column("end_date", "date", false, end, n),
                column("value_as_number", "decimal", false, value, n),
                column("unit_concept_id", "concept", false, unit, n),
            ],
        };
        let n = self.vocab.len();
        let concepts = TableDescriptor {
            name: "concepts".into(),
            rows: n,
            columns: vec![
                column("concept_id", "integer", true, 0, n),
                column("source_code", "text", false, self.vocab.concepts().filter(|c| c.source_code.is_empty()).count(), n),
                column("vocabulary_name", "text", false, self.vocab.concepts().filter(|c| c.vocabulary_name.is_empty()).count(), n),
                column("display_name", "text", false, self.vocab.concepts().filter(|c| c.display_name.is_empty()).count(), n),
                column("domain", "code", true, 0, n),
            ],
        };
        DataDictionary {
            tables: vec![persons, periods, events, concepts],
        }
    }
}

/// Sub-slice of date-sorted events whose start date lies in `window`.
pub fn window_slice(events: &[ClinicalEvent], window: DayInterval) -> &[ClinicalEvent] {
    let lo = events.partition_point(|e| e.start_date < window.start);
    let hi = events.partition_point(|e| e.start_date <= window.end);
    if lo >= hi {
        &[]
    } else {
        &events[lo..hi]
    }
}

/// Merges overlapping or abutting periods of the same person. Input must be
/// sorted by `(person_id, start_date)`.
fn merge_periods(periods: Vec<ObservationPeriod>) -> Vec<ObservationPeriod> {
    let mut merged: Vec<ObservationPeriod> = Vec::with_capacity(periods.len());
    for p in periods {
        match merged.last_mut() {
            Some(last) if last.person_id == p.person_id && p.start_date.0 <= last.end_date.0 + 1 => {
                last.end_date = last.end_date.max(p.end_date);
            }
            _ => merged.push(p),
        }
    }
    merged
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::vocab::Concept;

    fn vocab() -> Vocabulary {
        let concept = |id, domain| Concept {
            concept_id: id,
            source_code: format!("C{id}"),
            vocabulary_name: "TOY".into(),
            display_name: String::new(),
            domain,
        };
        Vocabulary::new(
            vec![concept(1, Domain::Condition), concept(2, Domain::Measurement)],
            [],
        )
        .unwrap()
    }

    fn person(id: PersonId) -> Person {
        Person {
            person_id: id,
            birth_date: Day(-10_000),
            gender: "F".into(),
            race: "A".into(),
            ethnicity: String::new(),
        }
    }

    fn event(id: EventId, person: PersonId, domain: Domain, concept: ConceptId, day: i32) -> ClinicalEvent {
        ClinicalEvent {
            event_id: id,
            person_id: person,
            domain,
            concept_id: concept,
            start_date: Day(day),
            end_date: None,
            value_as_number: None,
            unit_concept_id: None,
        }
    }

    fn period(person: PersonId, start: i32, end: i32) -> ObservationPeriod {
        ObservationPeriod {
            person_id: person,
            start_date: Day(start),
            end_date: Day(end),
        }
    }

    #[test]
    fn overlapping_periods_merge() {
        let store = Store::new(vocab(), vec![person(1)], vec![period(1, 1, 10), period(1, 5, 20)], vec![]).unwrap();
        assert_eq!(store.observation_periods(), &[period(1, 1, 20)]);
        let store = Store::new(vocab(), vec![person(1)], vec![period(1, 1, 10), period(1, 12, 20)], vec![]).unwrap();
        assert_eq!(store.observation_periods().len(), 2);
    }

    #[test]
    fn window_filter_and_tie_break() {
        let store = Store::new(
            vocab(),
            vec![person(1)],
            vec![period(1, 0, 500)],
            vec![
                event(7, 1, Domain::Condition, 1, 400),
                event(5, 1, Domain::Condition, 1, 100),
                event(3, 1, Domain::Condition, 1, 100),
            ],
        )
        .unwrap();
        let set = BTreeSet::from([1]);
        let hits = store
            .events_in_window(1, Domain::Condition, &set, DayInterval::new(Day(0), Day(365)))
            .unwrap();
        assert_eq!(hits.iter().map(|e| e.event_id).collect::<Vec<_>>(), vec![3, 5]);
        let none = store
            .events_in_window(1, Domain::Condition, &BTreeSet::new(), DayInterval::unbounded())
            .unwrap();
        assert!(none.is_empty());
        assert!(matches!(
            store.events_in_window(9, Domain::Condition, &set, DayInterval::unbounded()),
            Err(StoreError::UnknownPerson(9))
        ));
    }

    #[test]
    fn invariants_rejected() {
        let mut early = event(1, 1, Domain::Condition, 1, -20_000);
        assert!(Store::new(vocab(), vec![person(1)], vec![], vec![early.clone()]).is_err());
        early.start_date = Day(0);
        early.value_as_number = Some(1.0);
        assert!(Store::new(vocab(), vec![person(1)], vec![], vec![early]).is_err());
        assert!(Store::new(vocab(), vec![person(1), person(1)], vec![], vec![]).is_err());
        assert!(Store::new(vocab(), vec![person(1)], vec![], vec![event(1, 1, Domain::Condition, 99, 0)]).is_err());
    }

    #[test]
    fn dictionary_missingness() {
        let events: Vec<ClinicalEvent> = (0..10)
            .map(|i| {
                let mut e = event(i, 1, Domain::Measurement, 2, i as i32);
                if i >= 4 {
                    e.value_as_number = Some(6.0);
                }
                e
            })
            .collect();
        let store = Store::new(vocab(), vec![person(1)], vec![], events).unwrap();
        let dict = store.data_dictionary();
        assert_eq!(dict.column("events", "value_as_number").unwrap().missingness, 0.4);

        let empty = Store::new(vocab(), vec![], vec![], vec![]).unwrap().data_dictionary();
        assert_eq!(empty.rows("events"), 0);
        assert_eq!(empty.column("events", "end_date").unwrap().missingness, 0.0);
    }
}
