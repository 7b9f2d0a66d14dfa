//! Model formulas of the form `y ~ -1 + age + (1|occupation)`.
//!
//! Grammar (whitespace is insignificant, identifiers are case-sensitive):
//!
//! ```text
//! formula := ident "~" term ("+" term)*
//! term    := "-1" | "1" | ident | "(" "1" "|" ident ")"
//! ident   := [A-Za-z_][A-Za-z0-9_]*
//! ```
//!
//! `-1` removes the fixed intercept, `1` states it explicitly (the default),
//! plain identifiers are dummy-coded fixed factors and `(1|g)` adds a random
//! intercept per level of `g`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormulaError {
    #[error("syntax error at byte {pos}: {message}")]
    Syntax { pos: usize, message: String },
    #[error("factor `{0}` appears more than once")]
    DuplicateFactor(String),
    #[error("model has neither an intercept nor a fixed factor")]
    EmptyModel,
}

fn syntax(pos: usize, message: impl Into<String>) -> FormulaError {
    FormulaError::Syntax { pos, message: message.into() }
}

/// A parsed mixed-model formula with random intercepts only.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModelFormula {
    response: String,
    intercept: bool,
    fixed: Vec<String>,
    random: Vec<String>,
}

impl ModelFormula {
    pub fn new(
        response: impl Into<String>,
        intercept: bool,
        fixed: Vec<String>,
        random: Vec<String>,
    ) -> Result<Self, FormulaError> {
        let response = response.into();
        for name in std::iter::once(&response).chain(&fixed).chain(&random) {
            if !is_identifier(name) {
                return Err(syntax(0, format!("`{name}` is not a valid identifier")));
            }
        }
        let mut seen: Vec<&str> = vec![&response];
        for name in fixed.iter().chain(&random) {
            if seen.contains(&name.as_str()) {
                return Err(FormulaError::DuplicateFactor(name.clone()));
            }
            seen.push(name);
        }
        if !intercept && fixed.is_empty() {
            return Err(FormulaError::EmptyModel);
        }
        Ok(Self { response, intercept, fixed, random })
    }

    pub fn response(&self) -> &str {
        &self.response
    }

    pub fn intercept(&self) -> bool {
        self.intercept
    }

    pub fn fixed_factors(&self) -> &[String] {
        &self.fixed
    }

    pub fn random_factors(&self) -> &[String] {
        &self.random
    }

    pub fn is_fixed(&self, factor: &str) -> bool {
        self.fixed.iter().any(|f| f == factor)
    }

    pub fn is_random(&self, factor: &str) -> bool {
        self.random.iter().any(|f| f == factor)
    }

    /// All factor names, fixed first, in formula order.
    pub fn factors(&self) -> impl Iterator<Item = &str> {
        self.fixed.iter().chain(&self.random).map(String::as_str)
    }
}

pub fn parse_formula(text: &str) -> Result<ModelFormula, FormulaError> {
    Parser::new(text).formula()
}

/// Canonical rendering; `parse_formula(&format_formula(f)) == f`.
pub fn format_formula(f: &ModelFormula) -> String {
    let mut terms: Vec<String> = Vec::new();
    if !f.intercept {
        terms.push("-1".into());
    } else if f.fixed.is_empty() {
        terms.push("1".into());
    }
    terms.extend(f.fixed.iter().cloned());
    terms.extend(f.random.iter().map(|g| format!("(1|{g})")));
    format!("{} ~ {}", f.response, terms.join(" + "))
}

impl fmt::Display for ModelFormula {
    fn fmt(&self, out: &mut fmt::Formatter<'_>) -> fmt::Result {
        out.write_str(&format_formula(self))
    }
}

impl FromStr for ModelFormula {
    type Err = FormulaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_formula(s)
    }
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Ident(String),
    Number(String),
    Tilde,
    Plus,
    Minus,
    LParen,
    RParen,
    Pipe,
    End,
}

impl Token {
    fn describe(&self) -> String {
        match self {
            Token::Ident(s) => format!("identifier `{s}`"),
            Token::Number(s) => format!("number `{s}`"),
            Token::Tilde => "`~`".into(),
            Token::Plus => "`+`".into(),
            Token::Minus => "`-`".into(),
            Token::LParen => "`(`".into(),
            Token::RParen => "`)`".into(),
            Token::Pipe => "`|`".into(),
            Token::End => "end of input".into(),
        }
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Self { src, pos: 0 }
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.src[self.pos..].chars().next() {
            if !c.is_whitespace() {
                break;
            }
            self.pos += c.len_utf8();
        }
    }

    /// Returns the next token and its start offset without consuming it.
    fn peek(&mut self) -> Result<(Token, usize, usize), FormulaError> {
        self.skip_ws();
        let start = self.pos;
        let rest = &self.src[start..];
        let Some(c) = rest.chars().next() else {
            return Ok((Token::End, start, start));
        };
        let single = |t| Ok((t, start, start + 1));
        match c {
            '~' => single(Token::Tilde),
            '+' => single(Token::Plus),
            '-' => single(Token::Minus),
            '(' => single(Token::LParen),
            ')' => single(Token::RParen),
            '|' => single(Token::Pipe),
            c if c.is_ascii_alphabetic() || c == '_' => {
                let len = rest.find(|ch: char| !(ch.is_ascii_alphanumeric() || ch == '_')).unwrap_or(rest.len());
                Ok((Token::Ident(rest[..len].to_string()), start, start + len))
            }
            c if c.is_ascii_digit() => {
                let len = rest.find(|ch: char| !ch.is_ascii_digit()).unwrap_or(rest.len());
                Ok((Token::Number(rest[..len].to_string()), start, start + len))
            }
            other => Err(syntax(start, format!("unexpected character `{other}`"))),
        }
    }

    fn next(&mut self) -> Result<(Token, usize), FormulaError> {
        let (tok, start, end) = self.peek()?;
        self.pos = end;
        Ok((tok, start))
    }

    fn expect(&mut self, want: Token) -> Result<usize, FormulaError> {
        let (tok, at) = self.next()?;
        if tok == want {
            Ok(at)
        } else {
            Err(syntax(at, format!("expected {}, found {}", want.describe(), tok.describe())))
        }
    }

    fn ident(&mut self) -> Result<String, FormulaError> {
        match self.next()? {
            (Token::Ident(s), _) => Ok(s),
            (tok, at) => Err(syntax(at, format!("expected identifier, found {}", tok.describe()))),
        }
    }

    fn one(&mut self) -> Result<(), FormulaError> {
        match self.next()? {
            (Token::Number(n), _) if n == "1" => Ok(()),
            (tok, at) => Err(syntax(at, format!("expected `1`, found {}", tok.describe()))),
        }
    }

    fn formula(mut self) -> Result<ModelFormula, FormulaError> {
        if self.src.trim().is_empty() {
            return Err(syntax(0, "empty formula"));
        }
        let response = self.ident()?;
        self.expect(Token::Tilde)?;

        let mut intercept: Option<(bool, usize)> = None;
        let mut fixed = Vec::new();
        let mut random = Vec::new();
        loop {
            let (tok, at) = self.next()?;
            match tok {
                Token::Minus | Token::Number(_) => {
                    let value = if tok == Token::Minus {
                        self.one()?;
                        false
                    } else if tok == Token::Number("1".into()) {
                        true
                    } else {
                        return Err(syntax(at, format!("unexpected {}", tok.describe())));
                    };
                    if intercept.is_some() {
                        return Err(syntax(at, "intercept term given more than once"));
                    }
                    intercept = Some((value, at));
                }
                Token::Ident(name) => fixed.push(name),
                Token::LParen => {
                    self.one()?;
                    self.expect(Token::Pipe)?;
                    random.push(self.ident()?);
                    self.expect(Token::RParen)?;
                }
                Token::Plus | Token::End => return Err(syntax(at, "empty term")),
                other => return Err(syntax(at, format!("unexpected {}", other.describe()))),
            }
            match self.next()? {
                (Token::Plus, _) => continue,
                (Token::End, _) => break,
                (tok, at) => return Err(syntax(at, format!("expected `+` or end, found {}", tok.describe()))),
            }
        }
        ModelFormula::new(response, intercept.is_none_or(|(v, _)| v), fixed, random)
    }
}
