//! Versioned definition registry with evaluation history.
//!
//! Layout on disk:
//!
//! ```text
//! registry/
//!   .lock
//!   <definition_id>/v1.json
//!   <definition_id>/v2.json
//!   <definition_id>/history.json
//! ```
//!
//! Version documents are written once with `create_new` and never touched
//! again. `history.json` is rewritten through a temporary file and rename.
//! Writers hold an exclusive advisory lock on `.lock`; readers take a shared one.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::definition::{validate_definition, PhenotypeDefinition, StructuralIssue};
use crate::metrics::StratifiedReport;

const LOCK_FILE: &str = ".lock";
const HISTORY_FILE: &str = "history.json";

#[derive(Debug, thiserror::Error)]
pub enum LifecycleError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("definition is structurally invalid: {}", .0.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<StructuralIssue>),
    #[error("definition id `{0}` cannot be used as a registry directory name")]
    BadId(String),
    #[error("unknown definition `{0}`")]
    UnknownDefinition(String),
    #[error("definition `{id}` has no version {version}")]
    UnknownVersion { id: String, version: u32 },
    #[error("{path}: corrupt registry document: {message}")]
    Corrupt { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> LifecycleError + '_ {
    move |source| LifecycleError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionRecord {
    pub version: u32,
    pub author: String,
    pub timestamp: DateTime<Utc>,
    pub change_note: String,
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub version: u32,
    pub dataset_id: String,
    pub timestamp: DateTime<Utc>,
    pub report: StratifiedReport,
}

/// Contents of `history.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub definition_id: String,
    pub versions: Vec<VersionRecord>,
    pub evaluations: Vec<EvaluationRecord>,
}

impl RegistryEntry {
    pub fn latest_version(&self) -> Option<u32> {
        self.versions.last().map(|v| v.version)
    }

    pub fn has_version(&self, version: u32) -> bool {
        self.versions.iter().any(|v| v.version == version)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpvPoint {
    pub timestamp: DateTime<Utc>,
    pub version: u32,
    pub dataset_id: String,
    pub ppv: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeKind {
    Added,
    Removed,
    Modified,
}

/// One field-level difference between two canonical documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Change {
    pub path: String,
    pub kind: ChangeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub before: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub after: Option<Value>,
}

impl Change {
    /// The same change seen from the other side.
    pub fn reversed(&self) -> Change {
        Change {
            path: self.path.clone(),
            kind: match self.kind {
                ChangeKind::Added => ChangeKind::Removed,
                ChangeKind::Removed => ChangeKind::Added,
                ChangeKind::Modified => ChangeKind::Modified,
            },
            before: self.after.clone(),
            after: self.before.clone(),
        }
    }
}

impl fmt::Display for Change {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |v: &Option<Value>| v.as_ref().map_or(String::new(), |v| v.to_string());
        match self.kind {
            ChangeKind::Added => write!(f, "+ {}: {}", self.path, show(&self.after)),
            ChangeKind::Removed => write!(f, "- {}: {}", self.path, show(&self.before)),
            ChangeKind::Modified => write!(
                f,
                "~ {}: {} -> {}",
                self.path,
                show(&self.before),
                show(&self.after)
            ),
        }
    }
}

/// Field-level diff of two definitions, ignoring the version number. Arrays of
/// named objects (rules, concept sets) are matched by `name` / `set_id`, so
/// inserting a rule reports one addition rather than a cascade of edits.
pub fn diff_definitions(a: &PhenotypeDefinition, b: &PhenotypeDefinition) -> Vec<Change> {
    let mut va = serde_json::to_value(a).expect("definition serializes");
    let mut vb = serde_json::to_value(b).expect("definition serializes");
    for v in [&mut va, &mut vb] {
        if let Value::Object(map) = v {
            map.remove("version");
        }
    }
    let mut out = Vec::new();
    diff_values("", &va, &vb, &mut out);
    out
}

fn child(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

fn element_key(v: &Value) -> Option<String> {
    let obj = v.as_object()?;
    ["name", "set_id"]
        .iter()
        .find_map(|k| obj.get(*k)?.as_str().map(str::to_string))
}

fn diff_values(path: &str, a: &Value, b: &Value, out: &mut Vec<Change>) {
    if a == b {
        return;
    }
    match (a, b) {
        (Value::Object(ma), Value::Object(mb)) => {
            let keys: BTreeSet<&String> = ma.keys().chain(mb.keys()).collect();
            for k in keys {
                let p = child(path, k);
                match (ma.get(k), mb.get(k)) {
                    (Some(x), Some(y)) => diff_values(&p, x, y, out),
                    (Some(x), None) => out.push(removed(p, x)),
                    (None, Some(y)) => out.push(added(p, y)),
                    (None, None) => unreachable!(),
                }
            }
        }
        (Value::Array(xa), Value::Array(xb)) => {
            match (keyed(xa), keyed(xb)) {
                (Some(ka), Some(kb)) => {
                    let keys: BTreeSet<&String> = ka.keys().chain(kb.keys()).collect();
                    for k in keys {
                        let p = format!("{path}[{k}]");
                        match (ka.get(k), kb.get(k)) {
                            (Some(x), Some(y)) => diff_values(&p, x, y, out),
                            (Some(x), None) => out.push(removed(p, x)),
                            (None, Some(y)) => out.push(added(p, y)),
                            (None, None) => unreachable!(),
                        }
                    }
                }
                _ => {
                    for i in 0..xa.len().max(xb.len()) {
                        let p = format!("{path}[{i}]");
                        match (xa.get(i), xb.get(i)) {
                            (Some(x), Some(y)) => diff_values(&p, x, y, out),
                            (Some(x), None) => out.push(removed(p, x)),
                            (None, Some(y)) => out.push(added(p, y)),
                            (None, None) => unreachable!(),
                        }
                    }
                }
            }
        }
        _ => out.push(Change {
            path: path.to_string(),
            kind: ChangeKind::Modified,
            before: Some(a.clone()),
            after: Some(b.clone()),
        }),
    }
}

fn keyed(xs: &[Value]) -> Option<BTreeMap<String, &Value>> {
    let map: BTreeMap<String, &Value> = xs
        .iter()
        .map(|v| element_key(v).map(|k| (k, v)))
        .collect::<Option<_>>()?;
    (map.len() == xs.len()).then_some(map)
}

fn added(path: String, v: &Value) -> Change {
    Change {
        path,
        kind: ChangeKind::Added,
        before: None,
        after: Some(v.clone()),
    }
}

fn removed(path: String, v: &Value) -> Change {
    Change {
        path,
        kind: ChangeKind::Removed,
        before: Some(v.clone()),
        after: None,
    }
}

/// A registry rooted at a directory.
#[derive(Debug, Clone)]
pub struct Registry {
    root: PathBuf,
}

struct LockGuard(File);

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = self.0.unlock();
    }
}

fn check_id(id: &str) -> Result<(), LifecycleError> {
    let bad = id.is_empty()
        || id.starts_with('.')
        || id.chars().any(|c| c == '/' || c == '\\' || c.is_control());
    if bad {
        Err(LifecycleError::BadId(id.to_string()))
    } else {
        Ok(())
    }
}

impl Registry {
    /// Opens the registry at `root`, creating the directory if needed.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, LifecycleError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn lock(&self, exclusive: bool) -> Result<LockGuard, LifecycleError> {
        let path = self.root.join(LOCK_FILE);
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(io_err(&path))?;
        if exclusive {
            file.lock().map_err(io_err(&path))?;
        } else {
            file.lock_shared().map_err(io_err(&path))?;
        }
        Ok(LockGuard(file))
    }

    fn dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    fn version_path(&self, id: &str, version: u32) -> PathBuf {
        self.dir(id).join(format!("v{version}.json"))
    }

    fn read_entry(&self, id: &str) -> Result<Option<RegistryEntry>, LifecycleError> {
        check_id(id)?;
        let path = self.dir(id).join(HISTORY_FILE);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(io_err(&path)(e)),
        };
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| LifecycleError::Corrupt {
                path,
                message: e.to_string(),
            })
    }

    fn write_entry(&self, entry: &RegistryEntry) -> Result<(), LifecycleError> {
        let dir = self.dir(&entry.definition_id);
        let path = dir.join(HISTORY_FILE);
        let tmp = dir.join(format!("{HISTORY_FILE}.tmp"));
        let mut text = serde_json::to_string_pretty(entry).expect("history serializes");
        text.push('\n');
        fs::write(&tmp, text).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }

    pub fn entry(&self, id: &str) -> Result<RegistryEntry, LifecycleError> {
        let _guard = self.lock(false)?;
        self.read_entry(id)?
            .ok_or_else(|| LifecycleError::UnknownDefinition(id.to_string()))
    }

    /// Registered definition ids, sorted.
    pub fn list(&self) -> Result<Vec<String>, LifecycleError> {
        let _guard = self.lock(false)?;
        let mut ids = Vec::new();
        for item in fs::read_dir(&self.root).map_err(io_err(&self.root))? {
            let item = item.map_err(io_err(&self.root))?;
            if item.path().join(HISTORY_FILE).is_file() {
                ids.push(item.file_name().to_string_lossy().into_owned());
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn register(
        &self,
        def: &PhenotypeDefinition,
        author: &str,
        change_note: &str,
    ) -> Result<u32, LifecycleError> {
        self.register_at(def, author, change_note, Utc::now())
    }

    /// Appends `def` as the next version of its id. The stored document
    /// carries the assigned version number, whatever `def.version` says.
    pub fn register_at(
        &self,
        def: &PhenotypeDefinition,
        author: &str,
        change_note: &str,
        timestamp: DateTime<Utc>,
    ) -> Result<u32, LifecycleError> {
        let issues = validate_definition(def);
        if !issues.is_empty() {
            return Err(LifecycleError::Invalid(issues));
        }
        let id = def.definition_id.as_str();
        check_id(id)?;
        let _guard = self.lock(true)?;
        let mut entry = self.read_entry(id)?.unwrap_or_else(|| RegistryEntry {
            definition_id: id.to_string(),
            versions: Vec::new(),
            evaluations: Vec::new(),
        });
        let version = entry.latest_version().map_or(1, |v| v + 1);
        let mut stored = def.clone();
        stored.version = version;

        let dir = self.dir(id);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = self.version_path(id, version);
        let mut file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(io_err(&path))?;
        file.write_all(stored.to_canonical().as_bytes())
            .map_err(io_err(&path))?;
        file.sync_all().map_err(io_err(&path))?;

        entry.versions.push(VersionRecord {
            version,
            author: author.to_string(),
            timestamp,
            change_note: change_note.to_string(),
            content_hash: stored.content_hash(),
        });
        self.write_entry(&entry)?;
        Ok(version)
    }

    pub fn get(&self, id: &str, version: u32) -> Result<PhenotypeDefinition, LifecycleError> {
        let entry = self.entry(id)?;
        if !entry.has_version(version) {
            return Err(LifecycleError::UnknownVersion {
                id: id.to_string(),
                version,
            });
        }
        let path = self.version_path(id, version);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        PhenotypeDefinition::from_canonical(&text).map_err(|e| LifecycleError::Corrupt {
            path,
            message: e.to_string(),
        })
    }

    pub fn latest(&self, id: &str) -> Result<(u32, PhenotypeDefinition), LifecycleError> {
        let version = self
            .entry(id)?
            .latest_version()
            .ok_or_else(|| LifecycleError::UnknownDefinition(id.to_string()))?;
        Ok((version, self.get(id, version)?))
    }

    pub fn diff(&self, id: &str, v_a: u32, v_b: u32) -> Result<Vec<Change>, LifecycleError> {
        let a = self.get(id, v_a)?;
        let b = self.get(id, v_b)?;
        Ok(diff_definitions(&a, &b))
    }

    pub fn record_evaluation(
        &self,
        id: &str,
        version: u32,
        dataset_id: &str,
        report: &StratifiedReport,
    ) -> Result<usize, LifecycleError> {
        self.record_evaluation_at(id, version, dataset_id, report, Utc::now())
    }

    /// Appends an evaluation and returns the new history length.
    pub fn record_evaluation_at(
        &self,
        id: &str,
        version: u32,
        dataset_id: &str,
        report: &StratifiedReport,
        timestamp: DateTime<Utc>,
    ) -> Result<usize, LifecycleError> {
        let _guard = self.lock(true)?;
        let mut entry = self
            .read_entry(id)?
            .ok_or_else(|| LifecycleError::UnknownDefinition(id.to_string()))?;
        if !entry.has_version(version) {
            return Err(LifecycleError::UnknownVersion {
                id: id.to_string(),
                version,
            });
        }
        entry.evaluations.push(EvaluationRecord {
            version,
            dataset_id: dataset_id.to_string(),
            timestamp,
            report: report.clone(),
        });
        self.write_entry(&entry)?;
        Ok(entry.evaluations.len())
    }

    /// Overall PPV of every recorded evaluation, oldest first.
    pub fn ppv_series(&self, id: &str) -> Result<Vec<PpvPoint>, LifecycleError> {
        let mut points: Vec<PpvPoint> = self
            .entry(id)?
            .evaluations
            .into_iter()
            .map(|e| PpvPoint {
                timestamp: e.timestamp,
                version: e.version,
                dataset_id: e.dataset_id,
                ppv: e.report.overall.metrics.ppv,
            })
            .collect();
        points.sort_by_key(|p| p.timestamp);
        Ok(points)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::definition::{CriterionRule, EventQuery, Occurrence, Role, TemporalWindow};
    use crate::definition::{Comparator, ExitStrategy, Metadata};
    use crate::store::Domain;
    use crate::vocab::{ConceptItem, ConceptSet};

    fn def(id: &str) -> PhenotypeDefinition {
        PhenotypeDefinition {
            definition_id: id.into(),
            version: 1,
            metadata: Metadata::default(),
            concept_sets: vec![ConceptSet::new("a", vec![ConceptItem::include(1, true)])],
            entry: EventQuery::new(Domain::Condition, "a", Occurrence::FirstEver),
            prior_observation_days: 0,
            demographic_constraints: None,
            rules: vec![],
            exit: ExitStrategy::FixedOffset { days: 10 },
            era_gap_days: 0,
        }
    }

    fn rule(name: &str) -> CriterionRule {
        CriterionRule {
            name: name.into(),
            query: EventQuery::new(Domain::Condition, "a", Occurrence::Any),
            window: TemporalWindow::around_index(-10, 0),
            count_comparator: Comparator::Ge,
            count: 1,
            role: Role::Inclusion,
        }
    }

    #[test]
    fn versions_append() {
        let tmp = tempfile::tempdir().unwrap();
        let reg = Registry::open(tmp.path()).unwrap();
        assert_eq!(reg.register(&def("d"), "a", "first").unwrap(), 1);
        let mut d2 = def("d");
        d2.rules.push(rule("r"));
        assert_eq!(reg.register(&d2, "a", "second").unwrap(), 2);
        assert_eq!(reg.get("d", 1).unwrap(), def("d"));
        assert_eq!(reg.get("d", 2).unwrap().version, 2);
        assert_eq!(reg.list().unwrap(), vec!["d".to_string()]);
        assert!(matches!(reg.get("d", 3), Err(LifecycleError::UnknownVersion { .. })));
    }

    #[test]
    fn invalid_rejected_unchanged() {
        let tmp = tempfile::tempdir().unwrap();
        let reg = Registry::open(tmp.path()).unwrap();
        let mut bad = def("d");
        bad.entry.concept_set_ref = "missing".into();
        assert!(matches!(reg.register(&bad, "a", ""), Err(LifecycleError::Invalid(_))));
        assert!(reg.list().unwrap().is_empty());
        assert!(matches!(reg.register(&def("../x"), "a", ""), Err(LifecycleError::BadId(_))));
    }

    #[test]
    fn diff_keyed_and_antisymmetric() {
        let a = def("d");
        let mut b = def("d");
        b.version = 7;
        assert!(diff_definitions(&a, &b).is_empty());
        b.rules.push(rule("r"));
        b.exit = ExitStrategy::FixedOffset { days: 20 };
        let ab = diff_definitions(&a, &b);
        let ba = diff_definitions(&b, &a);
        assert_eq!(ab.len(), 2);
        assert!(ab.iter().any(|c| c.kind == ChangeKind::Added && c.path == "rules[r]"));
        assert!(ab.iter().any(|c| c.kind == ChangeKind::Modified && c.path == "exit.days"));
        assert_eq!(ab.iter().map(Change::reversed).collect::<Vec<_>>(), ba);

        let mut c = b.clone();
        c.rules.insert(0, rule("q"));
        let bc = diff_definitions(&b, &c);
        assert_eq!(bc.len(), 1);
        assert_eq!(bc[0].path, "rules[q]");
    }
}
