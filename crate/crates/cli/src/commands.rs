//! Subcommands. Machine outputs go to files or stdout, diagnostics to stderr.

use std::net::IpAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use phenoscope_core::definition::checklist_lint;
use phenoscope_core::engine::{self, compile, execute, reference_evaluate};
use phenoscope_core::lifecycle::Registry;
use phenoscope_core::metrics::{self, AgeBins, Axis};
use phenoscope_core::synthgen::{self, SimulationConfig};
use phenoscope_core::{dsl, AttritionReport, CohortRecord, GroundTruthLabels, Store, Vocabulary};

use crate::input::{emit, read_codes, read_definition, to_json};
use crate::{api, CliError};

#[derive(Debug, Parser)]
#[command(name = "phenoscope", version, about = "Computable phenotype definitions over patient event stores")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic store with ground-truth labels.
    Generate(GenerateArgs),
    /// Validate delimited files and write a normalized store directory.
    Ingest(IngestArgs),
    /// Print the data dictionary of a store.
    Dict(DictArgs),
    /// Run the development checklist over a definition.
    Lint(LintArgs),
    /// Compile a definition into an execution plan.
    Compile(CompileArgs),
    /// Execute a definition and write the cohort.
    Run(RunArgs),
    /// Evaluate a definition with the slow reference evaluator.
    Oracle(OracleArgs),
    /// Score a cohort against ground-truth labels.
    Evaluate(EvaluateArgs),
    /// Convert a definition between DSL text and canonical JSON.
    Convert(ConvertArgs),
    /// Register a definition as the next version of its id.
    Register(RegisterArgs),
    /// Show structural changes between two registered versions.
    Diff(DiffArgs),
    /// Show the version and evaluation history of a definition.
    History(HistoryArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub seed: u64,
    /// Overrides the person count of the config.
    #[arg(long)]
    pub persons: Option<usize>,
    /// Simulation config (JSON); defaults to the built-in standard config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub persons: PathBuf,
    #[arg(long)]
    pub observations: PathBuf,
    #[arg(long)]
    pub events: PathBuf,
    /// Directory with concepts.csv and ancestry.csv.
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DictArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LintArgs {
    pub definition: PathBuf,
    /// Directory with concepts.csv and ancestry.csv (a store directory works).
    #[arg(long)]
    pub vocab: PathBuf,
    /// Minimum mapped fraction for the vocabulary item.
    #[arg(long, default_value_t = 0.95)]
    pub threshold: f64,
    /// Local source codes, one per line, for the mapping sufficiency check.
    #[arg(long)]
    pub codes: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompileArgs {
    pub definition: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    pub definition: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    /// Cohort CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Attrition report JSON; printed to stdout when omitted.
    #[arg(long)]
    pub attrition: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    pub definition: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub attrition: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Cohort CSV written by `run`.
    pub cohort: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// Store the cohort was run against; supplies demographics for strata.
    #[arg(long)]
    pub store: PathBuf,
    /// Condition to read from the labels file when it holds several.
    #[arg(long)]
    pub condition: Option<String>,
    /// Comma-separated axes: race, gender, age_group.
    #[arg(long, value_parser = parse_axes, default_value = "")]
    pub strata: Axes,
    #[arg(long, default_value_t = metrics::DEFAULT_MIN_CELL)]
    pub min_cell: usize,
    /// Lower bounds of the age groups, e.g. 0,18,45,65.
    #[arg(long, value_parser = parse_bins)]
    pub age_bins: Option<AgeBins>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Record the report in this registry (needs --definition, --version, --dataset).
    #[arg(long, requires_all = ["definition", "version", "dataset"])]
    pub registry: Option<PathBuf>,
    #[arg(long, requires = "registry")]
    pub definition: Option<String>,
    #[arg(long, requires = "registry")]
    pub version: Option<u32>,
    #[arg(long, requires = "registry")]
    pub dataset: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Target {
    Json,
    Dsl,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    pub definition: PathBuf,
    #[arg(long, value_enum, default_value_t = Target::Json)]
    pub to: Target,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    pub definition: PathBuf,
    #[arg(long)]
    pub registry: PathBuf,
    #[arg(long, default_value = "")]
    pub author: String,
    #[arg(long, default_value = "")]
    pub note: String,
}

#[derive(Debug, Args)]
pub struct DiffArgs {
    pub id: String,
    pub a: u32,
    pub b: u32,
    #[arg(long)]
    pub registry: PathBuf,
}

#[derive(Debug, Args)]
pub struct HistoryArgs {
    pub id: String,
    #[arg(long)]
    pub registry: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    /// A dataset as ID=DIR; repeatable.
    #[arg(long = "dataset", value_parser = parse_dataset)]
    pub datasets: Vec<(String, PathBuf)>,
    /// Directory whose subdirectories are datasets named after them.
    #[arg(long = "datasets")]
    pub datasets_root: Option<PathBuf>,
    #[arg(long, default_value = "registry")]
    pub registry: PathBuf,
    /// Allow cross-origin requests, for a UI served from elsewhere.
    #[arg(long)]
    pub dev: bool,
}

#[derive(Debug, Clone)]
pub struct Axes(pub Vec<Axis>);

fn parse_axes(s: &str) -> Result<Axes, String> {
    if s.trim().is_empty() {
        return Ok(Axes(Vec::new()));
    }
    Axis::parse_list(s).map(Axes).map_err(|e| e.to_string())
}

fn parse_bins(s: &str) -> Result<AgeBins, String> {
    let lower = s
        .split(',')
        .map(|b| b.trim().parse::<u32>().map_err(|e| format!("`{b}`: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    AgeBins::new(lower).map_err(|e| e.to_string())
}

fn parse_dataset(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((id, dir)) if !id.is_empty() && !dir.is_empty() => Ok((id.to_string(), PathBuf::from(dir))),
        _ => Err(format!("expected ID=DIR, got `{s}`")),
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(a) => generate(a),
        Command::Ingest(a) => ingest(a),
        Command::Dict(a) => dict(a),
        Command::Lint(a) => lint(a),
        Command::Compile(a) => compile_cmd(a),
        Command::Run(a) => run_cmd(a),
        Command::Oracle(a) => oracle(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Convert(a) => convert(a),
        Command::Register(a) => register(a),
        Command::Diff(a) => diff(a),
        Command::History(a) => history(a),
        Command::Serve(a) => serve(a),
    }
}

fn open_store(dir: &Path) -> Result<Store, CliError> {
    Store::open(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

fn generate(a: GenerateArgs) -> Result<(), CliError> {
    let mut config = match &a.config {
        Some(path) => SimulationConfig::load(path)?,
        None => SimulationConfig::standard(a.seed, a.persons.unwrap_or(10_000)),
    };
    config.seed = a.seed;
    if let Some(n) = a.persons {
        config.n_persons = n;
    }
    let synth = synthgen::generate(&config)?;
    synth.write(&a.out)?;
    eprintln!(
        "wrote {} persons, {} events to {}",
        synth.store.persons().len(),
        synth.store.events().len(),
        a.out.display()
    );
    Ok(())
}

fn ingest(a: IngestArgs) -> Result<(), CliError> {
    let store = Store::ingest(&a.persons, &a.observations, &a.events, &a.vocab)?;
    store.write_dir(&a.out)?;
    eprintln!("ingested {} persons, {} events", store.persons().len(), store.events().len());
    Ok(())
}

fn dict(a: DictArgs) -> Result<(), CliError> {
    let store = open_store(&a.store)?;
    emit(a.out.as_deref(), &to_json(&store.data_dictionary()))
}

fn lint(a: LintArgs) -> Result<(), CliError> {
    let def = read_definition(&a.definition)?;
    let vocab = Vocabulary::load(&a.vocab)?;
    let codes = a.codes.as_deref().map(read_codes).transpose()?;
    let report = checklist_lint(&def, &vocab, a.threshold, codes.as_deref());
    emit(a.out.as_deref(), &to_json(&report))?;
    for item in report.failures() {
        eprintln!("FAIL {}: {}", item.item, item.detail);
    }
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Invalid(format!("{} checklist item(s) failed", report.failures().count())))
    }
}

fn compile_cmd(a: CompileArgs) -> Result<(), CliError> {
    let def = read_definition(&a.definition)?;
    let vocab = Vocabulary::load(&a.vocab)?;
    let plan = compile(&def, &vocab)?;
    for w in &plan.warnings {
        eprintln!("warning: {w}");
    }
    emit(a.out.as_deref(), &plan.to_json())
}

fn write_run(out: &Path, attrition_path: Option<&Path>, cohort: &[CohortRecord], attrition: &AttritionReport) -> Result<(), CliError> {
    engine::write_cohort_csv(out, cohort).map_err(CliError::runtime)?;
    emit(attrition_path, &attrition.to_json())?;
    eprintln!("cohort: {} persons", cohort.len());
    Ok(())
}

fn run_cmd(a: RunArgs) -> Result<(), CliError> {
    if a.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    let def = read_definition(&a.definition)?;
    let store = open_store(&a.store)?;
    let plan = compile(&def, store.vocab())?;
    for w in &plan.warnings {
        eprintln!("warning: {w}");
    }
    let (cohort, attrition) = execute(&plan, &store, a.threads)?;
    write_run(&a.out, a.attrition.as_deref(), &cohort, &attrition)
}

fn oracle(a: OracleArgs) -> Result<(), CliError> {
    let def = read_definition(&a.definition)?;
    let store = open_store(&a.store)?;
    let (cohort, attrition) = reference_evaluate(&def, &store)?;
    write_run(&a.out, a.attrition.as_deref(), &cohort, &attrition)
}

fn evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    let store = open_store(&a.store)?;
    let cohort = engine::read_cohort_csv(&a.cohort).map_err(CliError::runtime)?;
    let labels = GroundTruthLabels::load(&a.truth, a.condition.as_deref())?;
    let bins = a.age_bins.unwrap_or_default();
    let report = metrics::evaluate(&cohort, &labels, &store, &a.strata.0, &bins, a.min_cell)?;
    emit(a.out.as_deref(), &report.to_json())?;
    let suppressed = report.suppressed().count();
    if suppressed > 0 {
        eprintln!("{suppressed} stratum/strata below {} persons suppressed", a.min_cell);
    }
    if let (Some(root), Some(id), Some(version), Some(dataset)) = (&a.registry, &a.definition, a.version, &a.dataset) {
        let n = Registry::open(root)?.record_evaluation(id, version, dataset, &report)?;
        eprintln!("recorded evaluation {n} for {id} v{version}");
    }
    Ok(())
}

fn convert(a: ConvertArgs) -> Result<(), CliError> {
    let def = read_definition(&a.definition)?;
    let text = match a.to {
        Target::Json => def.to_canonical(),
        Target::Dsl => dsl::print(&def),
    };
    emit(a.out.as_deref(), &text)
}

fn register(a: RegisterArgs) -> Result<(), CliError> {
    let def = read_definition(&a.definition)?;
    let registry = Registry::open(&a.registry)?;
    let version = registry.register(&def, &a.author, &a.note)?;
    emit(
        None,
        &to_json(&serde_json::json!({ "definition_id": def.definition_id, "version": version })),
    )?;
    eprintln!("registered {} v{version}", def.definition_id);
    Ok(())
}

fn diff(a: DiffArgs) -> Result<(), CliError> {
    let changes = Registry::open(&a.registry)?.diff(&a.id, a.a, a.b)?;
    for c in &changes {
        eprintln!("{c}");
    }
    emit(None, &to_json(&changes))
}

fn history(a: HistoryArgs) -> Result<(), CliError> {
    let entry = Registry::open(&a.registry)?.entry(&a.id)?;
    for v in &entry.versions {
        eprintln!("v{} {} {} {}", v.version, v.timestamp.to_rfc3339(), v.author, v.change_note);
    }
    emit(None, &to_json(&entry))
}

fn serve(a: ServeArgs) -> Result<(), CliError> {
    let mut datasets = a.datasets.clone();
    if let Some(root) = &a.datasets_root {
        let mut found = Vec::new();
        for item in std::fs::read_dir(root).map_err(|e| CliError::Runtime(format!("{}: {e}", root.display())))? {
            let item = item?;
            if item.path().join(phenoscope_core::store::PERSONS_FILE).is_file() {
                found.push((item.file_name().to_string_lossy().into_owned(), item.path()));
            }
        }
        found.sort();
        datasets.extend(found);
    }
    if datasets.is_empty() {
        return Err(CliError::Usage("serve needs at least one --dataset or a non-empty --datasets directory".into()));
    }
    let state = api::AppState::load(&datasets, &a.registry)?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(CliError::runtime)?;
    runtime.block_on(api::serve(state, (a.host, a.port).into(), a.dev))
}
