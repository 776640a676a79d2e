//! Recursive-descent parser over the token stream. One token of lookahead is
//! always enough; the grammar never backtracks.

use std::collections::{BTreeSet, HashSet};
use std::str::FromStr;

use super::lexer::{tokenize, Tok, Token};
use super::{ParseError, ParseErrorKind, SourceSpan};
use crate::definition::{
    validate_definition, AgeRange, Anchor, Comparator, ConceptItem, ConceptSet, CriterionRule,
    DemographicConstraints, EventQuery, ExitStrategy, Metadata, Occurrence, PhenotypeDefinition,
    Role, TemporalWindow, ValuePredicate,
};
use crate::store::Domain;

const DOMAINS: &str = "condition, drug, measurement, procedure, visit or death";

/// Parses `.phen` text into a structurally valid definition.
pub fn parse(text: &str) -> Result<PhenotypeDefinition, ParseError> {
    let tokens = tokenize(text)?;
    let mut parser = Parser {
        tokens,
        pos: 0,
        declared: HashSet::new(),
    };
    let def = parser.program()?;
    // anything the inline checks missed is reported against the whole program
    if let Some(issue) = validate_definition(&def).into_iter().next() {
        let span = parser.tokens[0].span.to(parser.tokens[parser.tokens.len() - 1].span);
        return Err(ParseError {
            kind: ParseErrorKind::Semantic,
            message: issue.to_string(),
            span,
            expected: None,
        });
    }
    Ok(def)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    declared: HashSet<String>,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos]
    }

    fn next(&mut self) -> Token {
        let t = self.tokens[self.pos].clone();
        if t.tok != Tok::Eof {
            self.pos += 1;
        }
        t
    }

    fn peek_word(&self) -> Option<&str> {
        match &self.peek().tok {
            Tok::Word(w) => Some(w),
            _ => None,
        }
    }

    fn at_word(&self, word: &str) -> bool {
        self.peek_word() == Some(word)
    }

    fn unexpected(&self, expected: &str) -> ParseError {
        let t = self.peek();
        ParseError {
            kind: ParseErrorKind::Syntax,
            message: format!("expected {expected}, found {}", t.tok.describe()),
            span: t.span,
            expected: Some(expected.to_string()),
        }
    }

    fn semantic(span: SourceSpan, message: String) -> ParseError {
        ParseError {
            kind: ParseErrorKind::Semantic,
            message,
            span,
            expected: None,
        }
    }

    fn expect(&mut self, tok: Tok) -> Result<SourceSpan, ParseError> {
        if self.peek().tok == tok {
            Ok(self.next().span)
        } else {
            Err(self.unexpected(&tok.describe()))
        }
    }

    fn keyword(&mut self, word: &str) -> Result<SourceSpan, ParseError> {
        if self.at_word(word) {
            Ok(self.next().span)
        } else {
            Err(self.unexpected(&format!("`{word}`")))
        }
    }

    fn ident(&mut self, what: &str) -> Result<(String, SourceSpan), ParseError> {
        match self.peek().tok.clone() {
            Tok::Word(w) => Ok((w, self.next().span)),
            _ => Err(self.unexpected(what)),
        }
    }

    fn string(&mut self) -> Result<(String, SourceSpan), ParseError> {
        match self.peek().tok.clone() {
            Tok::Str(s) => Ok((s, self.next().span)),
            _ => Err(self.unexpected("a string")),
        }
    }

    fn int<T: FromStr>(&mut self, what: &str) -> Result<(T, SourceSpan), ParseError> {
        match self.peek().tok.clone() {
            Tok::Number(n) => match n.parse::<T>() {
                Ok(v) => Ok((v, self.next().span)),
                Err(_) => Err(ParseError {
                    kind: ParseErrorKind::Syntax,
                    message: format!("`{n}` is not a valid {what}"),
                    span: self.peek().span,
                    expected: Some(what.to_string()),
                }),
            },
            _ => Err(self.unexpected(what)),
        }
    }

    fn number(&mut self) -> Result<f64, ParseError> {
        match self.peek().tok.clone() {
            Tok::Number(n) => match n.parse::<f64>() {
                Ok(v) if v.is_finite() => {
                    self.next();
                    Ok(v)
                }
                _ => Err(self.unexpected("a finite number")),
            },
            _ => Err(self.unexpected("a number")),
        }
    }

    fn comparator(&mut self) -> Result<Comparator, ParseError> {
        match self.peek().tok {
            Tok::Cmp(c) => {
                self.next();
                Ok(Comparator::from_symbol(c).expect("lexer emits known comparators"))
            }
            _ => Err(self.unexpected("a comparator (<, <=, =, >=, >)")),
        }
    }

    fn program(&mut self) -> Result<PhenotypeDefinition, ParseError> {
        self.keyword("phenotype")?;
        let (definition_id, _) = self.string()?;
        let version = self.version()?;
        self.expect(Tok::LBrace)?;

        let metadata = self.metadata()?;
        let mut concept_sets = Vec::new();
        while self.at_word("conceptset") {
            concept_sets.push(self.concept_set()?);
        }
        if !self.at_word("entry") {
            return Err(self.unexpected("`conceptset` or `entry`"));
        }
        self.next();
        let entry = self.query(true)?;

        let mut prior_observation_days = 0;
        if self.at_word("observation") {
            self.next();
            self.keyword("prior")?;
            prior_observation_days = self.int::<u32>("a non-negative day count")?.0;
            self.keyword("days")?;
        }

        let demographic_constraints = if self.at_word("demographics") {
            Some(self.demographics()?)
        } else {
            None
        };

        let mut rules = Vec::new();
        let mut names = HashSet::new();
        while let Some(role) = self.peek_word().and_then(role_keyword) {
            self.next();
            let rule = self.rule(role)?;
            if !names.insert(rule.0.name.clone()) {
                return Err(Self::semantic(rule.1, format!("duplicate rule name `{}`", rule.0.name)));
            }
            rules.push(rule.0);
        }

        if !self.at_word("exit") {
            return Err(self.unexpected("a rule (include, exclude, strengthen, disqualify) or `exit`"));
        }
        self.next();
        let exit = self.exit()?;

        let mut era_gap_days = 0;
        if self.at_word("era_gap") {
            self.next();
            era_gap_days = self.int::<u32>("a non-negative day count")?.0;
        }
        self.expect(Tok::RBrace)?;
        self.expect(Tok::Eof)?;

        Ok(PhenotypeDefinition {
            definition_id,
            version,
            metadata,
            concept_sets,
            entry,
            prior_observation_days,
            demographic_constraints,
            rules,
            exit,
            era_gap_days,
        })
    }

    fn version(&mut self) -> Result<u32, ParseError> {
        let (word, span) = self.ident("a version like `v1`")?;
        let version = if word == "v" {
            self.int::<u32>("a version number")?.0
        } else if let Some(n) = word.strip_prefix('v').and_then(|n| n.parse::<u32>().ok()) {
            n
        } else {
            return Err(ParseError {
                kind: ParseErrorKind::Syntax,
                message: format!("expected a version like `v1`, found `{word}`"),
                span,
                expected: Some("a version like `v1`".into()),
            });
        };
        if version == 0 {
            return Err(Self::semantic(span, "version must be at least 1".into()));
        }
        Ok(version)
    }

    fn metadata(&mut self) -> Result<Metadata, ParseError> {
        let mut meta = Metadata::default();
        let mut intent_span: Option<SourceSpan> = None;
        loop {
            match self.peek_word() {
                Some("intent") => {
                    let span = self.next().span;
                    if intent_span.is_some() {
                        return Err(Self::semantic(span, "intent given twice".into()));
                    }
                    intent_span = Some(span);
                    meta.intent = self.string()?.0;
                }
                Some("ref") => {
                    self.next();
                    meta.literature_refs.push(self.string()?.0);
                }
                Some("author") => {
                    self.next();
                    meta.authors.push(self.string()?.0);
                }
                Some("waive") => {
                    let span = self.next().span;
                    if meta.role_waiver.is_some() {
                        return Err(Self::semantic(span, "waive given twice".into()));
                    }
                    meta.role_waiver = Some(self.string()?.0);
                }
                _ => return Ok(meta),
            }
        }
    }

    fn concept_set(&mut self) -> Result<ConceptSet, ParseError> {
        self.keyword("conceptset")?;
        let (set_id, span) = self.ident("a concept set name")?;
        if !self.declared.insert(set_id.clone()) {
            return Err(Self::semantic(span, format!("concept set `{set_id}` declared twice")));
        }
        let name = match self.peek().tok {
            Tok::Str(_) => self.string()?.0,
            _ => set_id.clone(),
        };
        self.expect(Tok::LBrace)?;
        let mut items = Vec::new();
        if self.peek().tok != Tok::RBrace {
            loop {
                let (concept_id, _) = self.int::<i64>("a concept id")?;
                let mut item = ConceptItem::include(concept_id, false);
                if self.peek().tok == Tok::Plus {
                    self.next();
                    self.keyword("descendants")?;
                    item.include_descendants = true;
                }
                if self.peek().tok == Tok::Minus {
                    self.next();
                    self.keyword("exclude")?;
                    item.is_excluded = true;
                }
                items.push(item);
                match self.peek().tok {
                    Tok::Comma => {
                        self.next();
                    }
                    Tok::RBrace => break,
                    _ => return Err(self.unexpected("`,`, `+descendants`, `-exclude` or `}`")),
                }
            }
        }
        self.expect(Tok::RBrace)?;
        Ok(ConceptSet { set_id, name, items })
    }

    fn occurrence(&mut self, required: bool) -> Result<Occurrence, ParseError> {
        match self.peek_word() {
            Some("first") => {
                self.next();
                Ok(Occurrence::FirstEver)
            }
            Some("any") => {
                self.next();
                Ok(Occurrence::Any)
            }
            Some("nth") => {
                self.next();
                let (n, span) = self.int::<u32>("an occurrence number")?;
                if n == 0 {
                    return Err(Self::semantic(span, "nth occurrence must be at least 1".into()));
                }
                Ok(Occurrence::Nth(n))
            }
            _ if required => Err(self.unexpected("`first`, `any` or `nth`")),
            _ => Ok(Occurrence::Any),
        }
    }

    /// `occurrence DOMAIN "in" IDENT valuepred?`
    fn query(&mut self, occurrence_required: bool) -> Result<EventQuery, ParseError> {
        let occurrence = self.occurrence(occurrence_required)?;
        let domain_span = self.peek().span;
        let domain = match self.peek_word().map(Domain::from_str) {
            Some(Ok(d)) => {
                self.next();
                d
            }
            _ => return Err(self.unexpected(DOMAINS)),
        };
        self.keyword("in")?;
        let (concept_set_ref, span) = self.ident("a concept set name")?;
        if !self.declared.contains(&concept_set_ref) {
            return Err(Self::semantic(span, format!("undeclared concept set `{concept_set_ref}`")));
        }
        let value_predicate = if matches!(self.peek().tok, Tok::Cmp(_)) {
            let start = self.peek().span;
            if domain != Domain::Measurement {
                return Err(Self::semantic(
                    domain_span.to(start),
                    format!("value predicate on a {domain} query; only measurements carry values"),
                ));
            }
            let comparator = self.comparator()?;
            let threshold = self.number()?;
            let unit_concept_id = if self.at_word("unit") {
                self.next();
                Some(self.int::<i64>("a unit concept id")?.0)
            } else {
                None
            };
            Some(ValuePredicate {
                comparator,
                threshold,
                unit_concept_id,
            })
        } else {
            None
        };
        Ok(EventQuery {
            domain,
            concept_set_ref,
            occurrence,
            value_predicate,
        })
    }

    fn demographics(&mut self) -> Result<DemographicConstraints, ParseError> {
        self.keyword("demographics")?;
        self.expect(Tok::LBrace)?;
        let mut demo = DemographicConstraints::default();
        if self.at_word("age") {
            self.next();
            let open = self.expect(Tok::LBracket)?;
            let (min, _) = self.int::<u32>("a minimum age")?;
            self.expect(Tok::Comma)?;
            let (max, _) = self.int::<u32>("a maximum age")?;
            let close = self.expect(Tok::RBracket)?;
            if min > max {
                return Err(Self::semantic(open.to(close), format!("age range [{min}, {max}] is empty")));
            }
            demo.age_at_index = Some(AgeRange { min, max });
        }
        if self.at_word("gender") {
            self.next();
            demo.gender = Some(self.string_list()?);
        }
        if self.at_word("race") {
            self.next();
            demo.race = Some(self.string_list()?);
        }
        if self.peek().tok != Tok::RBrace {
            return Err(self.unexpected("`age`, `gender`, `race` or `}`"));
        }
        self.next();
        Ok(demo)
    }

    fn string_list(&mut self) -> Result<BTreeSet<String>, ParseError> {
        let mut values = BTreeSet::from([self.string()?.0]);
        while self.peek().tok == Tok::Comma {
            self.next();
            values.insert(self.string()?.0);
        }
        Ok(values)
    }

    fn rule(&mut self, role: Role) -> Result<(CriterionRule, SourceSpan), ParseError> {
        let (name, name_span) = self.string()?;
        self.expect(Tok::Colon)?;
        let query = self.query(false)?;
        self.keyword("within")?;
        let open = self.expect(Tok::LBracket)?;
        let (start_offset_days, _) = self.int::<i32>("a day offset")?;
        self.expect(Tok::Comma)?;
        let (end_offset_days, _) = self.int::<i32>("a day offset")?;
        let close = self.expect(Tok::RBracket)?;
        if start_offset_days > end_offset_days {
            return Err(Self::semantic(
                open.to(close),
                format!("window start {start_offset_days} is after end {end_offset_days}"),
            ));
        }
        let anchor = if self.at_word("from") {
            self.next();
            let anchor = match self.peek_word() {
                Some("index_date") => Anchor::IndexDate,
                Some("entry_start") => Anchor::EntryStart,
                Some("entry_end") => Anchor::EntryEnd,
                _ => return Err(self.unexpected("`index_date`, `entry_start` or `entry_end`")),
            };
            self.next();
            anchor
        } else {
            Anchor::IndexDate
        };
        let (count_comparator, count) = if self.at_word("count") {
            self.next();
            let cmp = self.comparator()?;
            (cmp, self.int::<u32>("a non-negative count")?.0)
        } else {
            (Comparator::Ge, 1)
        };
        Ok((
            CriterionRule {
                name,
                query,
                window: TemporalWindow {
                    anchor,
                    start_offset_days,
                    end_offset_days,
                },
                count_comparator,
                count,
                role,
            },
            name_span,
        ))
    }

    fn exit(&mut self) -> Result<ExitStrategy, ParseError> {
        match self.peek_word() {
            Some("offset") => {
                self.next();
                let (days, _) = self.int::<u32>("a non-negative day count")?;
                Ok(ExitStrategy::FixedOffset { days })
            }
            Some("end_of_exposure") => {
                self.next();
                let (concept_set_ref, span) = self.ident("a concept set name")?;
                if !self.declared.contains(&concept_set_ref) {
                    return Err(Self::semantic(span, format!("undeclared concept set `{concept_set_ref}`")));
                }
                self.keyword("persistence")?;
                let (persistence_gap_days, _) = self.int::<u32>("a non-negative day count")?;
                Ok(ExitStrategy::EndOfContinuousExposure {
                    concept_set_ref,
                    persistence_gap_days,
                })
            }
            Some("event") => {
                self.next();
                Ok(ExitStrategy::EventBased {
                    query: self.query(false)?,
                })
            }
            _ => Err(self.unexpected("`offset`, `end_of_exposure` or `event`")),
        }
    }
}

fn role_keyword(word: &str) -> Option<Role> {
    match word {
        "include" => Some(Role::Inclusion),
        "exclude" => Some(Role::Exclusion),
        "strengthen" => Some(Role::Strengthener),
        "disqualify" => Some(Role::Disqualifier),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HYPERTENSION: &str = include_str!("../../fixtures/hypertension.phen");

    #[test]
    fn hypertension_structure() {
        let def = parse(HYPERTENSION).unwrap();
        assert_eq!(def.entry.occurrence, Occurrence::FirstEver);
        assert_eq!(def.entry.domain, Domain::Drug);
        assert_eq!(def.rules.len(), 1);
        assert_eq!(def.rules[0].role, Role::Inclusion);
        assert_eq!(def.rules[0].window, TemporalWindow::around_index(-36500, -1));
        assert_eq!((def.rules[0].count_comparator, def.rules[0].count), (Comparator::Ge, 1));
        assert_eq!(
            def.exit,
            ExitStrategy::EndOfContinuousExposure {
                concept_set_ref: "antihtn".into(),
                persistence_gap_days: 30
            }
        );
    }

    #[test]
    fn empty_input_fails_at_origin() {
        let err = parse("").unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::Syntax);
        assert_eq!((err.span.line, err.span.column), (1, 1));
        assert_eq!(err.expected.as_deref(), Some("`phenotype`"));
    }

    #[test]
    fn reversed_window_is_semantic() {
        let text = HYPERTENSION.replace("[-36500, -1]", "[-1, -10]");
        let err = parse(&text).unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::Semantic);
        assert_eq!(&text[err.span.start..err.span.end], "[-1, -10]");
    }

    #[test]
    fn undeclared_set_has_span() {
        let text = HYPERTENSION.replace("condition in htndx", "condition in nope");
        let err = parse(&text).unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::Semantic);
        assert_eq!(&text[err.span.start..err.span.end], "nope");
    }

    #[test]
    fn omitted_count_means_at_least_one() {
        let text = HYPERTENSION.replace(" count >= 1", "");
        assert_eq!(parse(&text).unwrap(), parse(HYPERTENSION).unwrap());
    }

    #[test]
    fn syntax_error_hint() {
        let text = HYPERTENSION.replace("entry first drug", "entry first pill");
        let err = parse(&text).unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::Syntax);
        assert_eq!(&text[err.span.start..err.span.end], "pill");
        assert!(err.expected.unwrap().contains("drug"));
    }
}
