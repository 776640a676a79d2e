//! Deterministic synthetic patients with known ground truth.
//!
//! Each person draws from a private ChaCha stream keyed by `(seed, person_id)`,
//! so a person's record does not depend on how many others are generated or
//! in which order. Within a person, demographics, observation and the true
//! disease state of every module are drawn before any code is emitted;
//! changing an emission probability therefore never changes who is a case.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use chrono::{Months, NaiveDate};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::date::Day;
use crate::metrics::{GroundTruthLabels, Label};
use crate::store::{ClinicalEvent, Domain, ObservationPeriod, Person, Store, StoreError};
use crate::vocab::{Concept, Vocabulary};
use crate::{ConceptId, PersonId};

pub const LABELS_FILE: &str = "labels.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("config file {path}: {message}")]
    ConfigFile { path: String, message: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Table(#[from] crate::table::TableError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A probability that may differ by subgroup. Race overrides take precedence
/// over gender overrides. Written either as a bare number or as
/// `{"default": p, "race": {...}, "gender": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Rate {
    Flat(f64),
    Grouped {
        default: f64,
        #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
        race: BTreeMap<String, f64>,
        #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
        gender: BTreeMap<String, f64>,
    },
}

impl Default for Rate {
    fn default() -> Self {
        Rate::Flat(0.0)
    }
}

impl Rate {
    pub fn for_person(&self, person: &Person) -> f64 {
        match self {
            Rate::Flat(p) => *p,
            Rate::Grouped {
                default,
                race,
                gender,
            } => race
                .get(&person.race)
                .or_else(|| gender.get(&person.gender))
                .copied()
                .unwrap_or(*default),
        }
    }

    fn values(&self) -> Vec<f64> {
        match self {
            Rate::Flat(p) => vec![*p],
            Rate::Grouped {
                default,
                race,
                gender,
            } => std::iter::once(*default)
                .chain(race.values().copied())
                .chain(gender.values().copied())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalSpec {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemographicModel {
    pub gender: BTreeMap<String, f64>,
    pub race: BTreeMap<String, f64>,
    pub ethnicity: BTreeMap<String, f64>,
    /// Weight of each ten-year band of age at study end: 0-9, 10-19, ...
    pub age_groups: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationModel {
    /// Observation starts uniformly within this many days of study start
    /// (never before birth) and runs to study end.
    pub max_start_delay_days: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundKind {
    pub domain: Domain,
    pub concepts: Vec<ConceptId>,
    pub weight: f64,
    /// Inclusive range of extra days added to the start to form `end_date`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_days: Option<(u32, u32)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<NormalSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit_concept_id: Option<ConceptId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundModel {
    pub events_per_person: f64,
    pub kinds: Vec<BackgroundKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrugModel {
    pub concepts: Vec<ConceptId>,
    pub emission_prob: Rate,
    /// First exposure starts 1..=this many days after onset.
    pub max_start_delay_days: u32,
    /// Exposures after the first, Poisson mean.
    pub refills_mean: f64,
    pub days_supply: u32,
    /// Days between consecutive exposures, uniform in 0..=this.
    pub max_gap_days: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementModel {
    pub concept_id: ConceptId,
    pub unit_concept_id: ConceptId,
    pub diseased: NormalSpec,
    pub healthy: NormalSpec,
    pub order_prob: Rate,
    /// Orders after the first, Poisson mean.
    pub extra_orders_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiseaseModule {
    pub name: String,
    pub prevalence: Rate,
    pub diagnosis_concepts: Vec<ConceptId>,
    /// Probability that a true case receives any diagnosis code.
    pub diagnosis_emission_prob: Rate,
    /// Diagnosis codes after the first, Poisson mean.
    #[serde(default)]
    pub repeat_diagnoses_mean: f64,
    /// Probability that a non-case receives a single (rule-out) diagnosis code.
    #[serde(default)]
    pub false_positive_prob: Rate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drug: Option<DrugModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measurement: Option<MeasurementModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub seed: u64,
    pub n_persons: usize,
    pub study_start: NaiveDate,
    pub study_end: NaiveDate,
    pub demographics: DemographicModel,
    pub observation: ObservationModel,
    pub background: BackgroundModel,
    pub diseases: Vec<DiseaseModule>,
}

fn weights(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

impl SimulationConfig {
    /// The stock configuration over [`toy_vocabulary`]: five races, two
    /// genders, ten uniform age bands and modules for hypertension, type 2
    /// diabetes, depression and pregnancy.
    pub fn standard(seed: u64, n_persons: usize) -> Self {
        let range = |lo: ConceptId, hi: ConceptId| (lo..=hi).collect::<Vec<_>>();
        Self {
            seed,
            n_persons,
            study_start: NaiveDate::from_ymd_opt(2010, 1, 1).unwrap(),
            study_end: NaiveDate::from_ymd_opt(2019, 12, 31).unwrap(),
            demographics: DemographicModel {
                gender: weights(&[("F", 0.5), ("M", 0.5)]),
                race: weights(&[
                    ("aian", 0.2),
                    ("asian", 0.2),
                    ("black", 0.2),
                    ("nhpi", 0.2),
                    ("white", 0.2),
                ]),
                ethnicity: weights(&[("hispanic", 0.2), ("not_hispanic", 0.8)]),
                age_groups: vec![0.1; 10],
            },
            observation: ObservationModel {
                max_start_delay_days: 1825,
            },
            background: BackgroundModel {
                events_per_person: 15.0,
                kinds: vec![
                    BackgroundKind {
                        domain: Domain::Condition,
                        concepts: range(5000, 5199),
                        weight: 0.35,
                        duration_days: None,
                        value: None,
                        unit_concept_id: None,
                    },
                    BackgroundKind {
                        domain: Domain::Drug,
                        concepts: range(6000, 6099),
                        weight: 0.2,
                        duration_days: Some((0, 89)),
                        value: None,
                        unit_concept_id: None,
                    },
                    BackgroundKind {
                        domain: Domain::Procedure,
                        concepts: range(7000, 7049),
                        weight: 0.1,
                        duration_days: None,
                        value: None,
                        unit_concept_id: None,
                    },
                    BackgroundKind {
                        domain: Domain::Visit,
                        concepts: vec![9201, 9202],
                        weight: 0.25,
                        duration_days: Some((0, 4)),
                        value: None,
                        unit_concept_id: None,
                    },
                    BackgroundKind {
                        domain: Domain::Measurement,
                        concepts: vec![3002],
                        weight: 0.1,
                        duration_days: None,
                        value: Some(NormalSpec { mean: 125.0, sd: 15.0 }),
                        unit_concept_id: Some(8876),
                    },
                ],
            },
            diseases: vec![
                DiseaseModule {
                    name: "hypertension".into(),
                    prevalence: Rate::Flat(0.3),
                    diagnosis_concepts: vec![1001, 1002],
                    diagnosis_emission_prob: Rate::Flat(0.85),
                    repeat_diagnoses_mean: 1.5,
                    false_positive_prob: Rate::Flat(0.03),
                    drug: Some(DrugModel {
                        concepts: vec![2002, 2003],
                        emission_prob: Rate::Flat(0.7),
                        max_start_delay_days: 120,
                        refills_mean: 3.0,
                        days_supply: 30,
                        max_gap_days: 45,
                    }),
                    measurement: None,
                },
                DiseaseModule {
                    name: "t2dm".into(),
                    prevalence: Rate::Flat(0.12),
                    diagnosis_concepts: vec![1101],
                    diagnosis_emission_prob: Rate::Flat(0.8),
                    repeat_diagnoses_mean: 1.0,
                    false_positive_prob: Rate::Flat(0.02),
                    drug: Some(DrugModel {
                        concepts: vec![2101],
                        emission_prob: Rate::Flat(0.5),
                        max_start_delay_days: 180,
                        refills_mean: 2.0,
                        days_supply: 90,
                        max_gap_days: 30,
                    }),
                    measurement: Some(MeasurementModel {
                        concept_id: 3001,
                        unit_concept_id: 8554,
                        diseased: NormalSpec { mean: 8.1, sd: 1.2 },
                        healthy: NormalSpec { mean: 5.4, sd: 0.4 },
                        order_prob: Rate::Flat(0.6),
                        extra_orders_mean: 1.0,
                    }),
                },
                DiseaseModule {
                    name: "depression".into(),
                    prevalence: Rate::Flat(0.1),
                    diagnosis_concepts: vec![1201],
                    diagnosis_emission_prob: Rate::Flat(0.6),
                    repeat_diagnoses_mean: 0.5,
                    false_positive_prob: Rate::Flat(0.01),
                    drug: Some(DrugModel {
                        concepts: vec![2201],
                        emission_prob: Rate::Flat(0.5),
                        max_start_delay_days: 60,
                        refills_mean: 4.0,
                        days_supply: 30,
                        max_gap_days: 20,
                    }),
                    measurement: None,
                },
                DiseaseModule {
                    name: "pregnancy".into(),
                    prevalence: Rate::Grouped {
                        default: 0.08,
                        race: BTreeMap::new(),
                        gender: weights(&[("M", 0.0)]),
                    },
                    diagnosis_concepts: vec![1300, 1301],
                    diagnosis_emission_prob: Rate::Flat(0.95),
                    repeat_diagnoses_mean: 1.0,
                    false_positive_prob: Rate::Flat(0.0),
                    drug: None,
                    measurement: Some(MeasurementModel {
                        concept_id: 3101,
                        unit_concept_id: 8909,
                        diseased: NormalSpec { mean: 250.0, sd: 120.0 },
                        healthy: NormalSpec { mean: 80.0, sd: 30.0 },
                        order_prob: Rate::Grouped {
                            default: 0.7,
                            race: BTreeMap::new(),
                            gender: weights(&[("M", 0.02)]),
                        },
                        extra_orders_mean: 0.5,
                    }),
                },
            ],
        }
    }

    pub fn from_json(text: &str) -> Result<Self, SynthError> {
        let config: Self = serde_json::from_str(text).map_err(|e| SynthError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let text = fs::read_to_string(path).map_err(|source| SynthError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text).map_err(|e| SynthError::ConfigFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.study_end < self.study_start {
            return bad("study_end precedes study_start".into());
        }
        let axes: [(&str, Vec<f64>); 4] = [
            ("gender", self.demographics.gender.values().copied().collect()),
            ("race", self.demographics.race.values().copied().collect()),
            ("ethnicity", self.demographics.ethnicity.values().copied().collect()),
            ("age_groups", self.demographics.age_groups.clone()),
        ];
        for (axis, ws) in axes {
            if ws.is_empty() || ws.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
                return bad(format!("{axis}: weights must be positive"));
            }
            let sum: f64 = ws.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return bad(format!("{axis}: weights sum to {sum}, not 1"));
            }
        }
        if self.demographics.age_groups.len() > 12 {
            return bad("age_groups: at most 12 ten-year bands".into());
        }
        let vocab = toy_vocabulary();
        let known = |c: &ConceptId| vocab.contains(*c);
        let bg = &self.background;
        if !(bg.events_per_person.is_finite() && bg.events_per_person >= 0.0) {
            return bad("background.events_per_person must be non-negative".into());
        }
        if bg.events_per_person > 0.0 && bg.kinds.is_empty() {
            return bad("background.kinds is empty".into());
        }
        for (i, k) in bg.kinds.iter().enumerate() {
            if k.concepts.is_empty() || !k.concepts.iter().all(known) {
                return bad(format!("background.kinds[{i}]: concepts empty or unknown"));
            }
            if !(k.weight.is_finite() && k.weight > 0.0) {
                return bad(format!("background.kinds[{i}]: weight must be positive"));
            }
            if k.value.is_some() != (k.domain == Domain::Measurement) {
                return bad(format!("background.kinds[{i}]: values belong to measurements only"));
            }
            if let Some((lo, hi)) = k.duration_days {
                if lo > hi {
                    return bad(format!("background.kinds[{i}]: empty duration range"));
                }
            }
            if k.unit_concept_id.is_some_and(|u| !known(&u)) {
                return bad(format!("background.kinds[{i}]: unknown unit"));
            }
            if k.value.is_some_and(|v| !(v.sd >= 0.0 && v.sd.is_finite())) {
                return bad(format!("background.kinds[{i}]: bad value distribution"));
            }
        }
        for d in &self.diseases {
            let mut rates = vec![&d.prevalence, &d.diagnosis_emission_prob, &d.false_positive_prob];
            if let Some(drug) = &d.drug {
                rates.push(&drug.emission_prob);
                if drug.concepts.is_empty() || !drug.concepts.iter().all(known) {
                    return bad(format!("{}: drug concepts empty or unknown", d.name));
                }
                if !(drug.refills_mean.is_finite() && drug.refills_mean >= 0.0) {
                    return bad(format!("{}: refills_mean must be non-negative", d.name));
                }
            }
            if let Some(m) = &d.measurement {
                rates.push(&m.order_prob);
                if !known(&m.concept_id) || !known(&m.unit_concept_id) {
                    return bad(format!("{}: unknown measurement concept", d.name));
                }
                if !(m.diseased.sd >= 0.0 && m.healthy.sd >= 0.0) {
                    return bad(format!("{}: negative standard deviation", d.name));
                }
                if !(m.extra_orders_mean.is_finite() && m.extra_orders_mean >= 0.0) {
                    return bad(format!("{}: extra_orders_mean must be non-negative", d.name));
                }
            }
            if rates
                .iter()
                .flat_map(|r| r.values())
                .any(|p| !(0.0..=1.0).contains(&p))
            {
                return bad(format!("{}: probabilities must lie in [0, 1]", d.name));
            }
            if d.diagnosis_concepts.is_empty() || !d.diagnosis_concepts.iter().all(known) {
                return bad(format!("{}: diagnosis concepts empty or unknown", d.name));
            }
            if !(d.repeat_diagnoses_mean.is_finite() && d.repeat_diagnoses_mean >= 0.0) {
                return bad(format!("{}: repeat_diagnoses_mean must be non-negative", d.name));
            }
        }
        let mut names: Vec<&str> = self.diseases.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("disease module names must be unique".into());
        }
        Ok(())
    }
}

/// Realized counts of a generation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub n_persons: usize,
    pub config_sha256: String,
    pub counts: BTreeMap<String, usize>,
    pub positives: BTreeMap<String, usize>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

pub struct Synthetic {
    pub store: Store,
    /// One label set per disease module, in config order.
    pub labels: Vec<GroundTruthLabels>,
    pub manifest: Manifest,
}

impl Synthetic {
    pub fn labels_for(&self, condition: &str) -> Option<&GroundTruthLabels> {
        self.labels.iter().find(|l| l.condition == condition)
    }

    /// Writes the store, `labels.csv` and `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), SynthError> {
        self.store.write_dir(dir)?;
        let path = dir.join(LABELS_FILE);
        let mut w = crate::table::writer(&path)?;
        w.write_record(crate::metrics::LABEL_HEADERS)
            .map_err(|e| crate::table::csv_err(&path, e))?;
        for labels in &self.labels {
            for (person_id, label) in &labels.labels {
                w.write_record([person_id.to_string().as_str(), &labels.condition, label.as_str()])
                    .map_err(|e| crate::table::csv_err(&path, e))?;
            }
        }
        crate::table::finish(&path, w)?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, self.manifest.to_json()).map_err(|source| SynthError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

struct PersonDraw {
    person: Person,
    period: ObservationPeriod,
    events: Vec<ClinicalEvent>,
    truth: Vec<Label>,
}

fn chance(rng: &mut ChaCha8Rng, p: f64) -> bool {
    // always consumes exactly one draw, whatever p is
    rng.random::<f64>() < p
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("validated mean").sample(rng) as u64
}

fn normal(rng: &mut ChaCha8Rng, spec: NormalSpec) -> f64 {
    let v = Normal::new(spec.mean, spec.sd).expect("validated sd").sample(rng);
    (v * 10.0).round() / 10.0
}

fn day_between(rng: &mut ChaCha8Rng, lo: Day, hi: Day) -> Day {
    Day(rng.random_range(lo.0..=hi.0))
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, items: &'a [T]) -> &'a T {
    &items[rng.random_range(0..items.len())]
}

struct Weighted<'a> {
    keys: Vec<&'a String>,
    index: WeightedIndex<f64>,
}

impl<'a> Weighted<'a> {
    fn new(map: &'a BTreeMap<String, f64>) -> Self {
        Self {
            keys: map.keys().collect(),
            index: WeightedIndex::new(map.values().copied()).expect("validated weights"),
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> String {
        self.keys[self.index.sample(rng)].clone()
    }
}

struct Samplers<'a> {
    gender: Weighted<'a>,
    race: Weighted<'a>,
    ethnicity: Weighted<'a>,
    age: WeightedIndex<f64>,
    background: Option<WeightedIndex<f64>>,
}

fn draw_person(config: &SimulationConfig, s: &Samplers<'_>, person_id: PersonId) -> PersonDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(person_id as u64);

    let gender = s.gender.draw(&mut rng);
    let race = s.race.draw(&mut rng);
    let ethnicity = s.ethnicity.draw(&mut rng);
    let age = s.age.sample(&mut rng) as u32 * 10 + rng.random_range(0..10u32);
    // born so that the whole-year age at study end is exactly `age`
    let latest = config.study_end.checked_sub_months(Months::new(12 * age)).unwrap();
    let earliest = config
        .study_end
        .checked_sub_months(Months::new(12 * (age + 1)))
        .unwrap()
        .succ_opt()
        .unwrap();
    let birth = day_between(&mut rng, Day::from_date(earliest), Day::from_date(latest));

    let study_start = Day::from_date(config.study_start);
    let study_end = Day::from_date(config.study_end);
    let delay = rng.random_range(0..=config.observation.max_start_delay_days) as i64;
    let obs_start = study_start.offset(delay).max(birth).min(study_end);
    let person = Person {
        person_id,
        birth_date: birth,
        gender,
        race,
        ethnicity,
    };
    let period = ObservationPeriod {
        person_id,
        start_date: obs_start,
        end_date: study_end,
    };

    // truth first, emissions after
    let truth: Vec<(bool, Day)> = config
        .diseases
        .iter()
        .map(|d| {
            let case = chance(&mut rng, d.prevalence.for_person(&person));
            let onset = day_between(&mut rng, obs_start, study_end);
            (case, onset)
        })
        .collect();

    let mut events = Vec::new();
    let mut push = |domain: Domain,
                    concept_id: ConceptId,
                    start: Day,
                    end: Option<Day>,
                    value: Option<f64>,
                    unit: Option<ConceptId>| {
        let k = events.len() as i64 + 1;
        events.push(ClinicalEvent {
            event_id: person_id * 1_000_000 + k,
            person_id,
            domain,
            concept_id,
            start_date: start,
            end_date: end,
            value_as_number: value,
            unit_concept_id: unit,
        });
    };

    for (d, &(case, onset)) in config.diseases.iter().zip(&truth) {
        if case {
            if chance(&mut rng, d.diagnosis_emission_prob.for_person(&person)) {
                push(Domain::Condition, *pick(&mut rng, &d.diagnosis_concepts), onset, None, None, None);
                for _ in 0..poisson(&mut rng, d.repeat_diagnoses_mean) {
                    let day = day_between(&mut rng, onset, study_end);
                    push(Domain::Condition, *pick(&mut rng, &d.diagnosis_concepts), day, None, None, None);
                }
            }
            if let Some(drug) = &d.drug {
                if chance(&mut rng, drug.emission_prob.for_person(&person)) {
                    let concept = *pick(&mut rng, &drug.concepts);
                    let mut start = onset.offset(rng.random_range(1..=drug.max_start_delay_days.max(1)) as i64);
                    for _ in 0..=poisson(&mut rng, drug.refills_mean) {
                        if start > study_end {
                            break;
                        }
                        let end = start.offset(drug.days_supply.saturating_sub(1) as i64).min(study_end);
                        push(Domain::Drug, concept, start, Some(end), None, None);
                        start = end.offset(1 + rng.random_range(0..=drug.max_gap_days) as i64);
                    }
                }
            }
        } else if chance(&mut rng, d.false_positive_prob.for_person(&person)) {
            let day = day_between(&mut rng, obs_start, study_end);
            push(Domain::Condition, *pick(&mut rng, &d.diagnosis_concepts), day, None, None, None);
        }
        if let Some(m) = &d.measurement {
            if chance(&mut rng, m.order_prob.for_person(&person)) {
                let (from, spec) = if case { (onset, m.diseased) } else { (obs_start, m.healthy) };
                for _ in 0..=poisson(&mut rng, m.extra_orders_mean) {
                    let day = day_between(&mut rng, from, study_end);
                    let value = normal(&mut rng, spec);
                    push(Domain::Measurement, m.concept_id, day, None, Some(value), Some(m.unit_concept_id));
                }
            }
        }
    }

    if let Some(index) = &s.background {
        for _ in 0..poisson(&mut rng, config.background.events_per_person) {
            let kind = &config.background.kinds[index.sample(&mut rng)];
            let concept = *pick(&mut rng, &kind.concepts);
            let start = day_between(&mut rng, obs_start, study_end);
            let end = kind
                .duration_days
                .map(|(lo, hi)| start.offset(rng.random_range(lo..=hi) as i64).min(study_end));
            let value = kind.value.map(|v| normal(&mut rng, v));
            push(kind.domain, concept, start, end, value, kind.unit_concept_id);
        }
    }

    PersonDraw {
        person,
        period,
        events,
        truth: truth
            .iter()
            .map(|(case, _)| if *case { Label::Positive } else { Label::Negative })
            .collect(),
    }
}

/// Generates persons `1..=n_persons` over [`toy_vocabulary`].
pub fn generate(config: &SimulationConfig) -> Result<Synthetic, SynthError> {
    config.validate()?;
    let background = (config.background.events_per_person > 0.0).then(|| {
        WeightedIndex::new(config.background.kinds.iter().map(|k| k.weight)).expect("validated weights")
    });
    let samplers = Samplers {
        gender: Weighted::new(&config.demographics.gender),
        race: Weighted::new(&config.demographics.race),
        ethnicity: Weighted::new(&config.demographics.ethnicity),
        age: WeightedIndex::new(config.demographics.age_groups.iter().copied()).expect("validated weights"),
        background,
    };

    let mut persons = Vec::with_capacity(config.n_persons);
    let mut periods = Vec::with_capacity(config.n_persons);
    let mut events = Vec::new();
    let mut labels: Vec<GroundTruthLabels> = config
        .diseases
        .iter()
        .map(|d| GroundTruthLabels::new(d.name.clone()))
        .collect();
    for person_id in 1..=config.n_persons as PersonId {
        let draw = draw_person(config, &samplers, person_id);
        for (set, label) in labels.iter_mut().zip(draw.truth) {
            set.labels.insert(person_id, label);
        }
        persons.push(draw.person);
        periods.push(draw.period);
        events.extend(draw.events);
    }

    let mut counts = BTreeMap::new();
    counts.insert("persons".to_string(), persons.len());
    counts.insert("observation_periods".to_string(), periods.len());
    counts.insert("events".to_string(), events.len());
    let vocab = toy_vocabulary();
    counts.insert("concepts".to_string(), vocab.len());
    let positives = labels
        .iter()
        .map(|l| (l.condition.clone(), l.positives().count()))
        .collect();
    let config_sha256 = {
        use sha2::{Digest, Sha256};
        Sha256::digest(config.to_json().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    };
    let store = Store::new(vocab, persons, periods, events)?;
    Ok(Synthetic {
        store,
        labels,
        manifest: Manifest {
            seed: config.seed,
            n_persons: config.n_persons,
            config_sha256,
            counts,
            positives,
        },
    })
}

/// The built-in toy vocabulary every synthetic store uses.
pub fn toy_vocabulary() -> Vocabulary {
    let mut concepts = Vec::new();
    let mut add = |id: ConceptId, vocabulary: &str, name: &str, domain: Domain| {
        concepts.push(Concept {
            concept_id: id,
            source_code: format!("TOY-{id}"),
            vocabulary_name: vocabulary.to_string(),
            display_name: name.to_string(),
            domain,
        });
    };
    use Domain::*;
    add(1001, "ToyClinical", "Hypertensive disorder", Condition);
    add(1002, "ToyClinical", "Essential hypertension", Condition);
    add(1003, "ToyClinical", "Gestational hypertension", Condition);
    add(1101, "ToyClinical", "Type 2 diabetes mellitus", Condition);
    add(1201, "ToyClinical", "Depressive disorder", Condition);
    add(1300, "ToyClinical", "Pregnancy", Condition);
    add(1301, "ToyClinical", "Pregnancy, 20 weeks or more", Condition);
    add(1401, "ToyClinical", "Pulmonary edema", Condition);
    add(2001, "ToyDrug", "Antihypertensive agent", Drug);
    add(2002, "ToyDrug", "Lisinopril", Drug);
    add(2003, "ToyDrug", "Amlodipine", Drug);
    add(2101, "ToyDrug", "Insulin", Drug);
    add(2201, "ToyDrug", "Sertraline", Drug);
    add(3001, "ToyLab", "Hemoglobin A1c", Measurement);
    add(3002, "ToyLab", "Systolic blood pressure", Measurement);
    add(3101, "ToyLab", "Urine protein, 24h", Measurement);
    add(4001, "ToyProcedure", "Blood pressure screening", Procedure);
    add(8554, "ToyUnit", "percent", Measurement);
    add(8876, "ToyUnit", "millimeter mercury column", Measurement);
    add(8909, "ToyUnit", "milligram per 24 hours", Measurement);
    add(9201, "ToyVisit", "Inpatient visit", Visit);
    add(9202, "ToyVisit", "Outpatient visit", Visit);
    add(9901, "ToyDeath", "Death", Death);
    for id in 5000..=5199 {
        add(id, "ToyClinical", &format!("Background condition {id}"), Condition);
    }
    for id in 6000..=6099 {
        add(id, "ToyDrug", &format!("Background drug {id}"), Drug);
    }
    for id in 7000..=7049 {
        add(id, "ToyProcedure", &format!("Background procedure {id}"), Procedure);
    }

    let mut pairs = vec![(1001, 1002), (1001, 1003), (1300, 1301), (2001, 2002), (2001, 2003)];
    for parent in (5000..5200).step_by(10) {
        pairs.extend((1..10).map(|k| (parent, parent + k)));
    }
    for parent in (6000..6100).step_by(10) {
        pairs.extend((1..10).map(|k| (parent, parent + k)));
    }
    Vocabulary::new(concepts, pairs).expect("toy vocabulary is well formed")
}
