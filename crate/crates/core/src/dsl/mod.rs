//! The `.phen` definition language.
//!
//! ```text
//! phenotype "new-user hypertension" v1 {
//!   intent "patients with hypertension starting anti-hypertensives for the first time"
//!   conceptset antihtn { 2001 +descendants }
//!   conceptset htndx { 1001 +descendants }
//!   entry first drug in antihtn
//!   observation prior 0 days
//!   include "htn dx before index": condition in htndx within [-36500, -1] count >= 1
//!   exit end_of_exposure antihtn persistence 30
//! }
//! ```
//!
//! Window offsets are days relative to the index date unless a `from` anchor
//! is given. An omitted `count` clause means `count >= 1`. `#` starts a
//! comment that runs to the end of the line.

mod lexer;
mod parser;
mod printer;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use parser::parse;
pub use printer::print;

/// Location of a token or construct in the source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSpan {
    /// Byte offsets, `start <= end`.
    pub start: usize,
    pub end: usize,
    /// 1-based line and column of `start`.
    pub line: u32,
    pub column: u32,
}

impl SourceSpan {
    pub fn to(self, other: SourceSpan) -> SourceSpan {
        SourceSpan {
            end: other.end.max(self.start),
            ..self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseErrorKind {
    Syntax,
    Semantic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub message: String,
    pub span: SourceSpan,
    /// What the parser would have accepted, for syntax errors.
    pub expected: Option<String>,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            ParseErrorKind::Syntax => "syntax error",
            ParseErrorKind::Semantic => "semantic error",
        };
        write!(f, "{}:{}: {kind}: {}", self.span.line, self.span.column, self.message)
    }
}
