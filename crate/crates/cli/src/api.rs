//! Local HTTP service over the engine, registry and metrics.
//!
//! Every body is JSON. Malformed bodies get 400, unknown ids 404, definitions
//! that fail validation 422 with the issue list.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use phenoscope_core::definition::{checklist_lint, validate_definition};
use phenoscope_core::dsl::{self, ParseError};
use phenoscope_core::engine::{self, EngineError};
use phenoscope_core::lifecycle::{LifecycleError, Registry};
use phenoscope_core::metrics::{self, AgeBins, Axis, MetricsError};
use phenoscope_core::{AttritionReport, CohortRecord, GroundTruthLabels, PhenotypeDefinition, Store, StructuralIssue};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::CorsLayer;

use crate::CliError;

pub const DEFAULT_PAGE_SIZE: usize = 100;
pub const MAX_PAGE_SIZE: usize = 10_000;

pub struct Dataset {
    pub store: Store,
    /// Every condition found in the dataset's `labels.csv`, if there is one.
    pub labels: Vec<GroundTruthLabels>,
}

pub struct RunRecord {
    pub run_id: String,
    pub dataset_id: String,
    pub definition_id: String,
    pub content_hash: String,
    pub cohort: Vec<CohortRecord>,
    pub attrition: AttritionReport,
}

#[derive(Default)]
struct Runs {
    by_key: HashMap<(String, String), String>,
    records: HashMap<String, Arc<RunRecord>>,
}

pub struct AppState {
    pub datasets: BTreeMap<String, Arc<Dataset>>,
    pub registry: Registry,
    runs: Mutex<Runs>,
}

impl AppState {
    pub fn new(datasets: BTreeMap<String, Dataset>, registry: Registry) -> Self {
        Self {
            datasets: datasets.into_iter().map(|(k, v)| (k, Arc::new(v))).collect(),
            registry,
            runs: Mutex::new(Runs::default()),
        }
    }

    /// Opens each `(id, dir)` store and its labels, and the registry.
    pub fn load(datasets: &[(String, PathBuf)], registry: &Path) -> Result<Self, CliError> {
        let mut loaded = BTreeMap::new();
        for (id, dir) in datasets {
            let store = Store::open(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
            let labels_path = dir.join(phenoscope_core::synthgen::LABELS_FILE);
            let labels = if labels_path.is_file() {
                GroundTruthLabels::load_all(&labels_path)?
            } else {
                Vec::new()
            };
            if loaded.insert(id.clone(), Dataset { store, labels }).is_some() {
                return Err(CliError::Usage(format!("dataset `{id}` given twice")));
            }
        }
        Ok(Self::new(loaded, Registry::open(registry)?))
    }

    fn dataset(&self, id: Option<&str>) -> Result<(String, Arc<Dataset>), ApiError> {
        let found = match id {
            Some(id) => self.datasets.get_key_value(id),
            None => self.datasets.iter().next(),
        };
        found
            .map(|(k, v)| (k.clone(), Arc::clone(v)))
            .ok_or_else(|| ApiError::not_found(format!("unknown dataset `{}`", id.unwrap_or(""))))
    }

    fn run(&self, run_id: &str) -> Result<Arc<RunRecord>, ApiError> {
        self.runs
            .lock()
            .expect("run cache lock")
            .records
            .get(run_id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown run `{run_id}`")))
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "error": message.into() }),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }

    fn invalid(issues: &[StructuralIssue]) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            body: json!({ "error": "definition is structurally invalid", "issues": issues }),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<ParseError> for ApiError {
    fn from(e: ParseError) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            body: json!({ "error": e.to_string(), "span": e.span, "expected": e.expected }),
        }
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        match &e {
            EngineError::Invalid(issues) => Self::invalid(issues),
            EngineError::Unresolved { .. } => Self::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
            EngineError::ThreadPool(_) => Self::internal(e.to_string()),
        }
    }
}

impl From<LifecycleError> for ApiError {
    fn from(e: LifecycleError) -> Self {
        match &e {
            LifecycleError::Invalid(issues) => Self::invalid(issues),
            LifecycleError::BadId(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
            LifecycleError::UnknownDefinition(_) | LifecycleError::UnknownVersion { .. } => Self::not_found(e.to_string()),
            _ => Self::internal(e.to_string()),
        }
    }
}

impl From<MetricsError> for ApiError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::NoLabels(_) => Self::not_found(e.to_string()),
            MetricsError::AmbiguousCondition(_) | MetricsError::UnknownAxis(_) | MetricsError::InvalidBins => {
                Self::bad_request(e.to_string())
            }
            MetricsError::Registry(inner) => inner.into(),
            MetricsError::Engine(inner) => inner.into(),
            MetricsError::Unlabeled(_) | MetricsError::OutsidePopulation(_) | MetricsError::UnknownPerson(_) => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string())
            }
            _ => Self::internal(e.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn body<T: DeserializeOwned>(bytes: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(bytes).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

/// A definition given either as a canonical object or as DSL text, never both.
#[derive(Debug, Default, Deserialize)]
pub struct DefinitionInput {
    pub definition: Option<Value>,
    pub dsl: Option<String>,
}

impl DefinitionInput {
    fn resolve(self) -> ApiResult<PhenotypeDefinition> {
        match (self.definition, self.dsl) {
            (Some(doc), None) => serde_json::from_value(doc)
                .map_err(|e| ApiError::bad_request(format!("malformed definition: {e}"))),
            (None, Some(text)) => Ok(dsl::parse(&text)?),
            _ => Err(ApiError::bad_request("supply exactly one of `definition` and `dsl`")),
        }
    }

    /// Parses and checks structure; invalid definitions are 422.
    fn valid(self) -> ApiResult<PhenotypeDefinition> {
        let def = self.resolve()?;
        let issues = validate_definition(&def);
        if issues.is_empty() {
            Ok(def)
        } else {
            Err(ApiError::invalid(&issues))
        }
    }
}

pub fn router(state: Arc<AppState>, dev: bool) -> Router {
    let router = Router::new()
        .route("/datasets", get(list_datasets))
        .route("/definitions", get(list_definitions).post(register))
        .route("/definitions/{id}", get(definition_history))
        .route("/definitions/{id}/versions/{v}", get(get_version))
        .route("/definitions/{id}/diff", get(diff))
        .route("/definitions/{id}/monitor", get(monitor))
        .route("/lint", post(lint))
        .route("/run", post(run))
        .route("/runs/{id}/cohort", get(cohort_page))
        .route("/evaluate", post(evaluate))
        .route("/parse", post(parse))
        .route("/print", post(print))
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .with_state(state);
    if dev {
        router.layer(CorsLayer::permissive())
    } else {
        router
    }
}

pub async fn serve(state: AppState, addr: SocketAddr, dev: bool) -> Result<(), CliError> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| CliError::Runtime(format!("bind {addr}: {e}")))?;
    eprintln!("listening on http://{addr}");
    axum::serve(listener, router(Arc::new(state), dev))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(CliError::runtime)
}

#[derive(Serialize)]
struct DatasetSummary {
    dataset_id: String,
    tables: BTreeMap<String, usize>,
    conditions: Vec<String>,
}

async fn list_datasets(State(state): State<Arc<AppState>>) -> Json<Vec<DatasetSummary>> {
    Json(
        state
            .datasets
            .iter()
            .map(|(id, d)| DatasetSummary {
                dataset_id: id.clone(),
                tables: d.store.data_dictionary().summary(),
                conditions: d.labels.iter().map(|l| l.condition.clone()).collect(),
            })
            .collect(),
    )
}

#[derive(Deserialize)]
struct RegisterRequest {
    #[serde(flatten)]
    input: DefinitionInput,
    #[serde(default)]
    author: String,
    #[serde(default)]
    change_note: String,
}

async fn register(State(state): State<Arc<AppState>>, bytes: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let req: RegisterRequest = body(&bytes)?;
    let def = req.input.valid()?;
    blocking(move || {
        let version = state.registry.register(&def, &req.author, &req.change_note)?;
        Ok((
            StatusCode::CREATED,
            Json(json!({ "definition_id": def.definition_id, "version": version })),
        ))
    })
    .await
}

async fn list_definitions(State(state): State<Arc<AppState>>) -> ApiResult<Json<Vec<Value>>> {
    blocking(move || {
        let mut out = Vec::new();
        for id in state.registry.list()? {
            let entry = state.registry.entry(&id)?;
            out.push(json!({
                "definition_id": id,
                "latest_version": entry.latest_version(),
                "versions": entry.versions.len(),
                "evaluations": entry.evaluations.len(),
            }));
        }
        Ok(Json(out))
    })
    .await
}

async fn definition_history(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    blocking(move || Ok(Json(serde_json::to_value(state.registry.entry(&id)?).expect("entry serializes")))).await
}

async fn get_version(
    State(state): State<Arc<AppState>>,
    UrlPath((id, v)): UrlPath<(String, String)>,
) -> ApiResult<Json<PhenotypeDefinition>> {
    let version: u32 = v
        .parse()
        .map_err(|_| ApiError::bad_request(format!("version `{v}` is not a number")))?;
    blocking(move || Ok(Json(state.registry.get(&id, version)?))).await
}

#[derive(Deserialize)]
struct DiffQuery {
    a: u32,
    b: u32,
}

async fn diff(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    query: Result<Query<DiffQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<Json<Value>> {
    let Query(q) = query.map_err(|e| ApiError::bad_request(e.body_text()))?;
    blocking(move || Ok(Json(serde_json::to_value(state.registry.diff(&id, q.a, q.b)?).expect("diff serializes")))).await
}

async fn monitor(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let series = state.registry.ppv_series(&id)?;
        Ok(Json(json!({ "definition_id": id, "series": series })))
    })
    .await
}

#[derive(Deserialize)]
struct LintRequest {
    #[serde(flatten)]
    input: DefinitionInput,
    dataset_id: Option<String>,
    threshold: Option<f64>,
    source_codes: Option<Vec<String>>,
}

async fn lint(State(state): State<Arc<AppState>>, bytes: Bytes) -> ApiResult<Json<Value>> {
    let req: LintRequest = body(&bytes)?;
    let def = req.input.resolve()?;
    let (_, dataset) = state.dataset(req.dataset_id.as_deref())?;
    let report = checklist_lint(
        &def,
        dataset.store.vocab(),
        req.threshold.unwrap_or(0.95),
        req.source_codes.as_deref(),
    );
    Ok(Json(serde_json::to_value(report).expect("report serializes")))
}

#[derive(Deserialize)]
struct RunRequest {
    #[serde(flatten)]
    input: DefinitionInput,
    dataset_id: String,
    threads: Option<usize>,
}

#[derive(Serialize)]
struct RunResponse<'a> {
    run_id: &'a str,
    dataset_id: &'a str,
    definition_id: &'a str,
    content_hash: &'a str,
    cohort_size: usize,
    attrition: &'a AttritionReport,
    cached: bool,
}

impl RunRecord {
    fn response(&self, cached: bool) -> Json<Value> {
        Json(
            serde_json::to_value(RunResponse {
                run_id: &self.run_id,
                dataset_id: &self.dataset_id,
                definition_id: &self.definition_id,
                content_hash: &self.content_hash,
                cohort_size: self.cohort.len(),
                attrition: &self.attrition,
                cached,
            })
            .expect("run serializes"),
        )
    }
}

/// Executes, or returns the cached run for the same content and dataset.
async fn execute_cached(state: &Arc<AppState>, def: PhenotypeDefinition, dataset_id: &str, threads: usize) -> ApiResult<(Arc<RunRecord>, bool)> {
    let (dataset_id, dataset) = state.dataset(Some(dataset_id))?;
    let key = (def.content_hash(), dataset_id.clone());
    let definition_id = def.definition_id.clone();
    {
        let runs = state.runs.lock().expect("run cache lock");
        if let Some(id) = runs.by_key.get(&key) {
            return Ok((Arc::clone(&runs.records[id]), true));
        }
    }
    let (cohort, attrition) = blocking(move || {
        let plan = engine::compile(&def, dataset.store.vocab())?;
        Ok(engine::execute(&plan, &dataset.store, threads)?)
    })
    .await?;
    let mut runs = state.runs.lock().expect("run cache lock");
    // a concurrent identical request may have finished first
    if let Some(id) = runs.by_key.get(&key) {
        return Ok((Arc::clone(&runs.records[id]), true));
    }
    let run_id = format!("run-{}", runs.records.len() + 1);
    let record = Arc::new(RunRecord {
        run_id: run_id.clone(),
        dataset_id,
        definition_id,
        content_hash: key.0.clone(),
        cohort,
        attrition,
    });
    runs.by_key.insert(key, run_id.clone());
    runs.records.insert(run_id, Arc::clone(&record));
    Ok((record, false))
}

async fn run(State(state): State<Arc<AppState>>, bytes: Bytes) -> ApiResult<Json<Value>> {
    let req: RunRequest = body(&bytes)?;
    let threads = req.threads.unwrap_or(1);
    if threads == 0 {
        return Err(ApiError::bad_request("threads must be at least 1"));
    }
    let def = req.input.valid()?;
    let (record, cached) = execute_cached(&state, def, &req.dataset_id, threads).await?;
    Ok(record.response(cached))
}

#[derive(Deserialize)]
struct PageQuery {
    page: Option<usize>,
    page_size: Option<usize>,
}

#[derive(Serialize)]
struct CohortRow {
    person_id: i64,
    entry_date: String,
    exit_date: String,
}

async fn cohort_page(
    State(state): State<Arc<AppState>>,
    UrlPath(run_id): UrlPath<String>,
    query: Result<Query<PageQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<Json<Value>> {
    let Query(q) = query.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let record = state.run(&run_id)?;
    let page = q.page.unwrap_or(1);
    let page_size = q.page_size.unwrap_or(DEFAULT_PAGE_SIZE);
    if page == 0 || page_size == 0 || page_size > MAX_PAGE_SIZE {
        return Err(ApiError::bad_request(format!(
            "page starts at 1 and page_size must be 1..={MAX_PAGE_SIZE}"
        )));
    }
    let total = record.cohort.len();
    let rows: Vec<CohortRow> = record
        .cohort
        .iter()
        .skip((page - 1).saturating_mul(page_size))
        .take(page_size)
        .map(|r| CohortRow {
            person_id: r.person_id,
            entry_date: r.entry_date.to_string(),
            exit_date: r.exit_date.to_string(),
        })
        .collect();
    Ok(Json(json!({
        "run_id": run_id,
        "page": page,
        "page_size": page_size,
        "total": total,
        "pages": total.div_ceil(page_size),
        "rows": rows,
    })))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum AxesInput {
    List(Vec<String>),
    Text(String),
}

#[derive(Deserialize)]
struct RecordTarget {
    definition_id: String,
    version: u32,
}

#[derive(Deserialize)]
struct EvaluateRequest {
    run_id: Option<String>,
    #[serde(flatten)]
    input: DefinitionInput,
    dataset_id: Option<String>,
    condition: Option<String>,
    strata: Option<AxesInput>,
    min_cell: Option<usize>,
    age_bins: Option<Vec<u32>>,
    /// Append the report to this definition version's evaluation history.
    record: Option<RecordTarget>,
}

async fn evaluate(State(state): State<Arc<AppState>>, bytes: Bytes) -> ApiResult<Json<Value>> {
    let req: EvaluateRequest = body(&bytes)?;
    let record = match (&req.run_id, req.input.definition.is_some() || req.input.dsl.is_some()) {
        (Some(id), false) => state.run(id)?,
        (None, true) => {
            let dataset_id = req
                .dataset_id
                .clone()
                .ok_or_else(|| ApiError::bad_request("`dataset_id` is required with a definition"))?;
            execute_cached(&state, req.input.valid()?, &dataset_id, 1).await?.0
        }
        _ => return Err(ApiError::bad_request("supply either `run_id` or a definition")),
    };
    let axes = match req.strata {
        None => Vec::new(),
        Some(AxesInput::Text(s)) if s.trim().is_empty() => Vec::new(),
        Some(AxesInput::Text(s)) => Axis::parse_list(&s)?,
        Some(AxesInput::List(xs)) => Axis::parse_list(&xs.join(","))?,
    };
    let bins = match req.age_bins {
        Some(lower) => AgeBins::new(lower)?,
        None => AgeBins::default(),
    };
    let min_cell = req.min_cell.unwrap_or(metrics::DEFAULT_MIN_CELL);
    let (dataset_id, dataset) = state.dataset(Some(&record.dataset_id))?;
    let labels = match &req.condition {
        Some(c) => dataset.labels.iter().find(|l| &l.condition == c),
        None if dataset.labels.len() == 1 => dataset.labels.first(),
        None if dataset.labels.is_empty() => None,
        None => {
            return Err(MetricsError::AmbiguousCondition(dataset.labels.iter().map(|l| l.condition.clone()).collect()).into())
        }
    }
    .cloned()
    .ok_or_else(|| ApiError::not_found(format!("dataset `{dataset_id}` has no labels for that condition")))?;
    let target = req.record;
    blocking(move || {
        let report = metrics::evaluate(&record.cohort, &labels, &dataset.store, &axes, &bins, min_cell)?;
        if let Some(t) = target {
            state
                .registry
                .record_evaluation(&t.definition_id, t.version, &dataset_id, &report)?;
        }
        Ok(Json(serde_json::to_value(&report).expect("report serializes")))
    })
    .await
}

#[derive(Deserialize)]
struct ParseRequest {
    text: String,
}

async fn parse(bytes: Bytes) -> ApiResult<Json<PhenotypeDefinition>> {
    let req: ParseRequest = body(&bytes)?;
    Ok(Json(dsl::parse(&req.text)?))
}

async fn print(bytes: Bytes) -> ApiResult<Json<Value>> {
    let req: DefinitionInput = body(&bytes)?;
    let def = req.resolve()?;
    Ok(Json(json!({ "text": dsl::print(&def) })))
}
