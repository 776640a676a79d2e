use std::fmt;

use phenoscope_core::dsl::ParseError;
use phenoscope_core::engine::EngineError;
use phenoscope_core::lifecycle::LifecycleError;
use phenoscope_core::metrics::MetricsError;
use phenoscope_core::store::StoreError;
use phenoscope_core::synthgen::SynthError;
use phenoscope_core::vocab::VocabError;

/// A failed command, classified by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or arguments. Exit 1.
    Usage(String),
    /// The definition, or its lint, did not pass. Exit 2.
    Invalid(String),
    /// I/O, data or engine failure. Exit 3.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Invalid(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    pub fn runtime(e: impl fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Invalid(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ParseError> for CliError {
    fn from(e: ParseError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::ThreadPool(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<LifecycleError> for CliError {
    fn from(e: LifecycleError) -> Self {
        match e {
            LifecycleError::Invalid(_) | LifecycleError::BadId(_) => CliError::Invalid(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::UnknownAxis(_) | MetricsError::InvalidBins => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        CliError::runtime(e)
    }
}

impl From<VocabError> for CliError {
    fn from(e: VocabError) -> Self {
        CliError::runtime(e)
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Config(_) | SynthError::ConfigFile { .. } => CliError::Invalid(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::runtime(e)
    }
}
