//! Reading definitions and writing machine outputs.

use std::path::Path;

use phenoscope_core::dsl;
use phenoscope_core::PhenotypeDefinition;

use crate::CliError;

/// Source form of a definition document.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Dsl,
    Canonical,
}

impl Format {
    /// `.json` files are canonical documents; anything else is DSL text.
    pub fn of(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => Format::Canonical,
            _ => Format::Dsl,
        }
    }
}

pub fn parse_definition(text: &str, format: Format) -> Result<PhenotypeDefinition, CliError> {
    match format {
        Format::Dsl => Ok(dsl::parse(text)?),
        Format::Canonical => PhenotypeDefinition::from_canonical(text)
            .map_err(|e| CliError::Invalid(format!("{}:{}: {}", e.line, e.column, e.message))),
    }
}

pub fn read_definition(path: &Path) -> Result<PhenotypeDefinition, CliError> {
    let text = read_text(path)?;
    parse_definition(&text, Format::of(path)).map_err(|e| match e {
        CliError::Invalid(m) => CliError::Invalid(format!("{}:{m}", path.display())),
        other => other,
    })
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// One source code per line; blank lines and `#` comments are skipped.
pub fn read_codes(path: &Path) -> Result<Vec<String>, CliError> {
    Ok(read_text(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

/// Writes `content` to `path`, or to stdout when no path is given.
pub fn emit(path: Option<&Path>, content: &str) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, content).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display()))),
        None => {
            use std::io::Write;
            let mut out = std::io::stdout().lock();
            out.write_all(content.as_bytes())?;
            out.flush()?;
            Ok(())
        }
    }
}

pub fn to_json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}
