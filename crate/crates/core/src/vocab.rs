//! Concept dictionary, hierarchy, concept-set expansion and mapping sufficiency.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::store::Domain;
use crate::table::{self, TableError};
use crate::ConceptId;

pub const CONCEPTS_FILE: &str = "concepts.csv";
pub const ANCESTRY_FILE: &str = "ancestry.csv";

const CONCEPT_HEADERS: &[&str] = &[
    "concept_id",
    "source_code",
    "vocabulary_name",
    "display_name",
    "domain",
];
const ANCESTRY_HEADERS: &[&str] = &["ancestor_concept_id", "descendant_concept_id"];

#[derive(Debug, thiserror::Error)]
pub enum VocabError {
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("unknown concept_id {0}")]
    UnknownConcept(ConceptId),
    #[error("duplicate concept_id {0}")]
    DuplicateConcept(ConceptId),
    #[error("ancestry is not transitively closed: ({0},{1}) and ({1},{2}) present but ({0},{2}) missing")]
    NotClosed(ConceptId, ConceptId, ConceptId),
    #[error("ancestry has a cycle through concepts {0} and {1}")]
    Cycle(ConceptId, ConceptId),
    #[error("mapping sufficiency is undefined for an empty code list")]
    EmptyCodes,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub concept_id: ConceptId,
    pub source_code: String,
    pub vocabulary_name: String,
    pub display_name: String,
    pub domain: Domain,
}

/// Transitively and reflexively closed ancestor/descendant relation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConceptAncestry {
    descendants: BTreeMap<ConceptId, BTreeSet<ConceptId>>,
}

impl ConceptAncestry {
    /// Builds the relation from explicit pairs over `concepts`, adding the
    /// reflexive pairs and rejecting relations that are not closed or acyclic.
    pub fn from_pairs<I>(concepts: &BTreeSet<ConceptId>, pairs: I) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = (ConceptId, ConceptId)>,
    {
        let mut descendants: BTreeMap<ConceptId, BTreeSet<ConceptId>> = concepts
            .iter()
            .map(|&c| (c, BTreeSet::from([c])))
            .collect();
        for (ancestor, descendant) in pairs {
            for c in [ancestor, descendant] {
                if !concepts.contains(&c) {
                    return Err(VocabError::UnknownConcept(c));
                }
            }
            descendants.get_mut(&ancestor).unwrap().insert(descendant);
        }
        for (&a, below) in &descendants {
            for &b in below {
                if a == b {
                    continue;
                }
                if descendants[&b].contains(&a) {
                    return Err(VocabError::Cycle(a, b));
                }
                if let Some(&c) = descendants[&b].iter().find(|c| !below.contains(c)) {
                    return Err(VocabError::NotClosed(a, b, c));
                }
            }
        }
        Ok(Self { descendants })
    }

    /// `c` together with everything below it. Unknown concepts yield an empty set.
    pub fn descendants(&self, c: ConceptId) -> impl Iterator<Item = ConceptId> + '_ {
        self.descendants.get(&c).into_iter().flatten().copied()
    }

    pub fn is_ancestor(&self, ancestor: ConceptId, descendant: ConceptId) -> bool {
        self.descendants
            .get(&ancestor)
            .is_some_and(|d| d.contains(&descendant))
    }

    /// Every (ancestor, descendant) pair, reflexive pairs included.
    pub fn pairs(&self) -> impl Iterator<Item = (ConceptId, ConceptId)> + '_ {
        self.descendants
            .iter()
            .flat_map(|(&a, ds)| ds.iter().map(move |&d| (a, d)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptItem {
    pub concept_id: ConceptId,
    #[serde(default)]
    pub include_descendants: bool,
    #[serde(default)]
    pub is_excluded: bool,
}

impl ConceptItem {
    pub fn include(concept_id: ConceptId, include_descendants: bool) -> Self {
        Self {
            concept_id,
            include_descendants,
            is_excluded: false,
        }
    }

    pub fn exclude(concept_id: ConceptId, include_descendants: bool) -> Self {
        Self {
            concept_id,
            include_descendants,
            is_excluded: true,
        }
    }
}

/// A named list of concepts, each optionally expanded through the hierarchy
/// and optionally subtracted.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptSet {
    pub set_id: String,
    pub name: String,
    pub items: Vec<ConceptItem>,
}

impl ConceptSet {
    pub fn new(set_id: impl Into<String>, items: Vec<ConceptItem>) -> Self {
        let set_id = set_id.into();
        Self {
            name: set_id.clone(),
            set_id,
            items,
        }
    }
}

/// Included concepts (expanded when flagged) minus excluded concepts
/// (expanded likewise). Exclusion wins when a concept is reachable both ways.
pub fn resolve_concept_set(
    set: &ConceptSet,
    vocab: &Vocabulary,
) -> Result<BTreeSet<ConceptId>, VocabError> {
    let mut included = BTreeSet::new();
    let mut excluded = BTreeSet::new();
    for item in &set.items {
        if !vocab.contains(item.concept_id) {
            return Err(VocabError::UnknownConcept(item.concept_id));
        }
        let target = if item.is_excluded {
            &mut excluded
        } else {
            &mut included
        };
        if item.include_descendants {
            target.extend(vocab.ancestry.descendants(item.concept_id));
        } else {
            target.insert(item.concept_id);
        }
    }
    Ok(included.difference(&excluded).copied().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficiencyReport {
    pub total: usize,
    pub mapped: usize,
    pub mapped_fraction: f64,
    pub unmapped: Vec<String>,
}

/// Fraction of `source_codes` that match a concept's `source_code`.
pub fn mapping_sufficiency<'a, I>(source_codes: I, vocab: &Vocabulary) -> Result<SufficiencyReport, VocabError>
where
    I: IntoIterator<Item = &'a str>,
{
    let codes: BTreeSet<&str> = source_codes.into_iter().collect();
    if codes.is_empty() {
        return Err(VocabError::EmptyCodes);
    }
    let known: BTreeSet<&str> = vocab
        .concepts()
        .map(|c| c.source_code.as_str())
        .collect();
    let unmapped: Vec<String> = codes
        .iter()
        .filter(|c| !known.contains(*c))
        .map(|c| c.to_string())
        .collect();
    let mapped = codes.len() - unmapped.len();
    Ok(SufficiencyReport {
        total: codes.len(),
        mapped,
        mapped_fraction: mapped as f64 / codes.len() as f64,
        unmapped,
    })
}

/// The concept dictionary together with its closed ancestry.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    concepts: BTreeMap<ConceptId, Concept>,
    pub ancestry: ConceptAncestry,
}

impl Vocabulary {
    pub fn new<I>(concepts: Vec<Concept>, pairs: I) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = (ConceptId, ConceptId)>,
    {
        let mut by_id = BTreeMap::new();
        for c in concepts {
            let id = c.concept_id;
            if by_id.insert(id, c).is_some() {
                return Err(VocabError::DuplicateConcept(id));
            }
        }
        let ids: BTreeSet<ConceptId> = by_id.keys().copied().collect();
        let ancestry = ConceptAncestry::from_pairs(&ids, pairs)?;
        Ok(Self {
            concepts: by_id,
            ancestry,
        })
    }

    /// Loads `concepts.csv` and `ancestry.csv` from a bundle directory.
    pub fn load(dir: &Path) -> Result<Self, VocabError> {
        let concepts_path = dir.join(CONCEPTS_FILE);
        let mut concepts = Vec::new();
        let mut seen = BTreeSet::new();
        table::read_rows(&concepts_path, CONCEPT_HEADERS, |row| {
            let concept_id = row.i64("concept_id")?;
            if !seen.insert(concept_id) {
                return Err(row.err("concept_id", format!("duplicate concept_id {concept_id}")));
            }
            let domain_text = row.str("domain")?;
            let domain = domain_text
                .parse::<Domain>()
                .map_err(|e| row.err("domain", e))?;
            concepts.push(Concept {
                concept_id,
                source_code: row.opt_str("source_code").unwrap_or("").to_string(),
                vocabulary_name: row.opt_str("vocabulary_name").unwrap_or("").to_string(),
                display_name: row.opt_str("display_name").unwrap_or("").to_string(),
                domain,
            });
            Ok(())
        })?;
        let ancestry_path = dir.join(ANCESTRY_FILE);
        let mut pairs = Vec::new();
        if ancestry_path.exists() {
            table::read_rows(&ancestry_path, ANCESTRY_HEADERS, |row| {
                let a = row.i64("ancestor_concept_id")?;
                let d = row.i64("descendant_concept_id")?;
                if !seen.contains(&a) {
                    return Err(row.err("ancestor_concept_id", format!("unknown concept_id {a}")));
                }
                if !seen.contains(&d) {
                    return Err(row.err("descendant_concept_id", format!("unknown concept_id {d}")));
                }
                pairs.push((a, d));
                Ok(())
            })?;
        }
        Self::new(concepts, pairs)
    }

    /// Writes the bundle back out; reflexive ancestry pairs are omitted.
    pub fn write(&self, dir: &Path) -> Result<(), TableError> {
        let path = dir.join(CONCEPTS_FILE);
        let mut w = table::writer(&path)?;
        w.write_record(CONCEPT_HEADERS)
            .map_err(|e| table::csv_err(&path, e))?;
        for c in self.concepts.values() {
            w.write_record([
                c.concept_id.to_string().as_str(),
                &c.source_code,
                &c.vocabulary_name,
                &c.display_name,
                c.domain.as_str(),
            ])
            .map_err(|e| table::csv_err(&path, e))?;
        }
        table::finish(&path, w)?;

        let path = dir.join(ANCESTRY_FILE);
        let mut w = table::writer(&path)?;
        w.write_record(ANCESTRY_HEADERS)
            .map_err(|e| table::csv_err(&path, e))?;
        for (a, d) in self.ancestry.pairs().filter(|(a, d)| a != d) {
            w.write_record([a.to_string(), d.to_string()])
                .map_err(|e| table::csv_err(&path, e))?;
        }
        table::finish(&path, w)
    }

    pub fn contains(&self, id: ConceptId) -> bool {
        self.concepts.contains_key(&id)
    }

    pub fn get(&self, id: ConceptId) -> Option<&Concept> {
        self.concepts.get(&id)
    }

    pub fn concepts(&self) -> impl Iterator<Item = &Concept> {
        self.concepts.values()
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }
}
