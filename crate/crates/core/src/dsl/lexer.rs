use super::{ParseError, ParseErrorKind, SourceSpan};

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Tok {
    Word(String),
    Str(String),
    Number(String),
    Cmp(&'static str),
    LBrace,
    RBrace,
    LBracket,
    RBracket,
    Comma,
    Colon,
    Plus,
    Minus,
    Eof,
}

impl Tok {
    pub fn describe(&self) -> String {
        match self {
            Tok::Word(w) => format!("`{w}`"),
            Tok::Str(_) => "a string".into(),
            Tok::Number(n) => format!("number `{n}`"),
            Tok::Cmp(c) => format!("`{c}`"),
            Tok::LBrace => "`{`".into(),
            Tok::RBrace => "`}`".into(),
            Tok::LBracket => "`[`".into(),
            Tok::RBracket => "`]`".into(),
            Tok::Comma => "`,`".into(),
            Tok::Colon => "`:`".into(),
            Tok::Plus => "`+`".into(),
            Tok::Minus => "`-`".into(),
            Tok::Eof => "end of input".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Token {
    pub tok: Tok,
    pub span: SourceSpan,
}

struct Cursor<'a> {
    text: &'a str,
    pos: usize,
    line: u32,
    column: u32,
}

impl Cursor<'_> {
    fn peek(&self) -> Option<char> {
        self.text[self.pos..].chars().next()
    }

    fn peek2(&self) -> Option<char> {
        let mut it = self.text[self.pos..].chars();
        it.next();
        it.next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        if c == '\n' {
            self.line += 1;
            self.column = 1;
        } else {
            self.column += 1;
        }
        Some(c)
    }

    fn mark(&self) -> SourceSpan {
        SourceSpan {
            start: self.pos,
            end: self.pos,
            line: self.line,
            column: self.column,
        }
    }

    fn close(&self, mark: SourceSpan) -> SourceSpan {
        SourceSpan {
            end: self.pos,
            ..mark
        }
    }
}

fn lex_error(span: SourceSpan, message: String) -> ParseError {
    ParseError {
        kind: ParseErrorKind::Syntax,
        message,
        span,
        expected: None,
    }
}

pub(crate) fn tokenize(text: &str) -> Result<Vec<Token>, ParseError> {
    let mut cur = Cursor {
        text,
        pos: 0,
        line: 1,
        column: 1,
    };
    let mut tokens = Vec::new();
    while let Some(c) = cur.peek() {
        if c.is_whitespace() {
            cur.bump();
            continue;
        }
        if c == '#' {
            while let Some(c) = cur.peek() {
                if c == '\n' {
                    break;
                }
                cur.bump();
            }
            continue;
        }
        let mark = cur.mark();
        let tok = match c {
            '{' | '}' | '[' | ']' | ',' | ':' | '+' => {
                cur.bump();
                match c {
                    '{' => Tok::LBrace,
                    '}' => Tok::RBrace,
                    '[' => Tok::LBracket,
                    ']' => Tok::RBracket,
                    ',' => Tok::Comma,
                    ':' => Tok::Colon,
                    _ => Tok::Plus,
                }
            }
            '<' | '>' => {
                cur.bump();
                if cur.peek() == Some('=') {
                    cur.bump();
                    Tok::Cmp(if c == '<' { "<=" } else { ">=" })
                } else {
                    Tok::Cmp(if c == '<' { "<" } else { ">" })
                }
            }
            '=' => {
                cur.bump();
                Tok::Cmp("=")
            }
            '-' if !cur.peek2().is_some_and(|d| d.is_ascii_digit()) => {
                cur.bump();
                Tok::Minus
            }
            '-' | '0'..='9' => Tok::Number(lex_number(&mut cur, mark)?),
            '"' => Tok::Str(lex_string(&mut cur, mark)?),
            c if c.is_ascii_alphabetic() || c == '_' => {
                let start = cur.pos;
                while cur.peek().is_some_and(|c| c.is_ascii_alphanumeric() || c == '_') {
                    cur.bump();
                }
                Tok::Word(text[start..cur.pos].to_string())
            }
            other => {
                cur.bump();
                return Err(lex_error(cur.close(mark), format!("unexpected character `{other}`")));
            }
        };
        tokens.push(Token {
            tok,
            span: cur.close(mark),
        });
    }
    tokens.push(Token {
        tok: Tok::Eof,
        span: cur.mark(),
    });
    Ok(tokens)
}

fn lex_number(cur: &mut Cursor<'_>, mark: SourceSpan) -> Result<String, ParseError> {
    let start = cur.pos;
    if cur.peek() == Some('-') {
        cur.bump();
    }
    let digits = |cur: &mut Cursor<'_>| {
        let mut n = 0;
        while cur.peek().is_some_and(|c| c.is_ascii_digit()) {
            cur.bump();
            n += 1;
        }
        n
    };
    digits(cur);
    if cur.peek() == Some('.') {
        cur.bump();
        if digits(cur) == 0 {
            return Err(lex_error(cur.close(mark), "expected digits after `.`".into()));
        }
    }
    if matches!(cur.peek(), Some('e' | 'E')) {
        cur.bump();
        if matches!(cur.peek(), Some('+' | '-')) {
            cur.bump();
        }
        if digits(cur) == 0 {
            return Err(lex_error(cur.close(mark), "expected exponent digits".into()));
        }
    }
    Ok(cur.text[start..cur.pos].to_string())
}

fn lex_string(cur: &mut Cursor<'_>, mark: SourceSpan) -> Result<String, ParseError> {
    cur.bump();
    let mut out = String::new();
    loop {
        match cur.bump() {
            None => return Err(lex_error(cur.close(mark), "unterminated string".into())),
            Some('"') => return Ok(out),
            Some('\\') => match cur.bump() {
                Some('"') => out.push('"'),
                Some('\\') => out.push('\\'),
                Some('n') => out.push('\n'),
                Some('r') => out.push('\r'),
                Some('t') => out.push('\t'),
                Some(other) => {
                    return Err(lex_error(cur.close(mark), format!("unknown escape `\\{other}`")))
                }
                None => return Err(lex_error(cur.close(mark), "unterminated string".into())),
            },
            Some(c) => out.push(c),
        }
    }
}
