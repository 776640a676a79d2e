//! Small helpers over the `csv` crate for the delimited file schemas.

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use csv::StringRecord;

use crate::date::Day;

#[derive(Debug, thiserror::Error)]
pub enum TableError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: column `{column}`: {message}")]
    Malformed {
        path: PathBuf,
        line: u64,
        column: String,
        message: String,
    },
}

/// One data row of a delimited file with its 1-based line number.
pub(crate) struct Row<'a> {
    pub path: &'a Path,
    pub line: u64,
    pub headers: &'a [&'static str],
    pub record: &'a StringRecord,
}

impl Row<'_> {
    pub fn err(&self, column: &str, message: impl Into<String>) -> TableError {
        TableError::Malformed {
            path: self.path.to_path_buf(),
            line: self.line,
            column: column.to_string(),
            message: message.into(),
        }
    }

    fn raw(&self, column: &str) -> &str {
        let idx = self
            .headers
            .iter()
            .position(|h| *h == column)
            .expect("column declared in schema");
        self.record.get(idx).unwrap_or("")
    }

    /// `None` for the empty string.
    pub fn opt_str(&self, column: &str) -> Option<&str> {
        let raw = self.raw(column);
        if raw.is_empty() {
            None
        } else {
            Some(raw)
        }
    }

    pub fn str(&self, column: &str) -> Result<&str, TableError> {
        self.opt_str(column)
            .ok_or_else(|| self.err(column, "required value is empty"))
    }

    pub fn opt_i64(&self, column: &str) -> Result<Option<i64>, TableError> {
        self.opt_str(column)
            .map(|s| {
                s.trim()
                    .parse::<i64>()
                    .map_err(|_| self.err(column, format!("expected an integer, found `{s}`")))
            })
            .transpose()
    }

    pub fn i64(&self, column: &str) -> Result<i64, TableError> {
        self.opt_i64(column)?
            .ok_or_else(|| self.err(column, "required value is empty"))
    }

    pub fn opt_f64(&self, column: &str) -> Result<Option<f64>, TableError> {
        self.opt_str(column)
            .map(|s| match s.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(self.err(column, format!("expected a finite number, found `{s}`"))),
            })
            .transpose()
    }

    pub fn opt_day(&self, column: &str) -> Result<Option<Day>, TableError> {
        self.opt_str(column)
            .map(|s| {
                Day::parse(s)
                    .ok_or_else(|| self.err(column, format!("expected YYYY-MM-DD, found `{s}`")))
            })
            .transpose()
    }

    pub fn day(&self, column: &str) -> Result<Day, TableError> {
        self.opt_day(column)?
            .ok_or_else(|| self.err(column, "required value is empty"))
    }
}

/// Reads every data row of `path`, checking that the header matches `headers` exactly.
pub(crate) fn read_rows<F>(
    path: &Path,
    headers: &[&'static str],
    mut each: F,
) -> Result<(), TableError>
where
    F: FnMut(&Row<'_>) -> Result<(), TableError>,
{
    let io_err = |source: io::Error| TableError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(io::BufReader::with_capacity(1 << 20, file));
    let malformed = |line: u64, column: &str, message: String| TableError::Malformed {
        path: path.to_path_buf(),
        line,
        column: column.to_string(),
        message,
    };
    let found = reader
        .headers()
        .map_err(|e| malformed(1, "<header>", e.to_string()))?
        .clone();
    let found: Vec<&str> = found.iter().map(str::trim).collect();
    if found != headers {
        return Err(malformed(
            1,
            "<header>",
            format!("expected `{}`, found `{}`", headers.join(","), found.join(",")),
        ));
    }
    let mut record = StringRecord::new();
    loop {
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {
                let line = record.position().map(|p| p.line()).unwrap_or(0);
                each(&Row {
                    path,
                    line,
                    headers,
                    record: &record,
                })?;
            }
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                return Err(malformed(line, "<row>", e.to_string()));
            }
        }
    }
    Ok(())
}

/// Buffered CSV writer over a file.
pub(crate) fn writer(path: &Path) -> Result<csv::Writer<io::BufWriter<File>>, TableError> {
    let file = File::create(path).map_err(|source| TableError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(io::BufWriter::with_capacity(1 << 20, file)))
}

pub(crate) fn finish<W: Write>(path: &Path, mut w: csv::Writer<W>) -> Result<(), TableError> {
    w.flush().map_err(|source| TableError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> TableError {
    TableError::Io {
        path: path.to_path_buf(),
        source: io::Error::other(e.to_string()),
    }
}

pub(crate) fn fmt_opt<T: ToString>(value: Option<T>) -> String {
    value.map(|v| v.to_string()).unwrap_or_default()
}
