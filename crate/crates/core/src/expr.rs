//! `{{path}}` placeholder substitution and the condition language used by
//! `when` clauses.
//!
//! Conditions are rendered first (placeholder values become literals) and
//! parsed second. Grammar, whitespace-insensitive:
//!
//! ```text
//! expr := or
//! or   := and ("||" and)*
//! and  := not ("&&" not)*
//! not  := "!" not | cmp
//! cmp  := term (("==" | "!=" | "<" | "<=" | ">" | ">=") term)?
//! term := number | quoted-string | "true" | "false" | "(" expr ")"
//! ```

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;
use core::ops::Range;

/// Placeholder bindings: exact path -> value text.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Scope {
    bindings: BTreeMap<String, String>,
}

impl Scope {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: impl Into<String>) {
        self.bindings.insert(path.into(), value.into());
    }

    pub fn with(mut self, path: impl Into<String>, value: impl Into<String>) -> Self {
        self.insert(path, value);
        self
    }

    pub fn get(&self, path: &str) -> Option<&str> {
        self.bindings.get(path).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.bindings.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExprError {
    #[error("unbound placeholder `{{{{{0}}}}}`")]
    UnboundPlaceholder(String),
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("type error: {0}")]
    Type(String),
}

fn is_path_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.')
}

/// One `{{path}}` occurrence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placeholder<'a> {
    pub span: Range<usize>,
    pub path: &'a str,
}

/// Tries to read a placeholder starting exactly at `start`.
fn placeholder_at(text: &str, start: usize) -> Option<Placeholder<'_>> {
    let b = text.as_bytes();
    if !text[start..].starts_with("{{") {
        return None;
    }
    let mut i = start + 2;
    while i < b.len() && b[i] == b' ' {
        i += 1;
    }
    let path_start = i;
    while i < b.len() && is_path_byte(b[i]) {
        i += 1;
    }
    let path_end = i;
    while i < b.len() && b[i] == b' ' {
        i += 1;
    }
    if path_end == path_start || !text[i..].starts_with("}}") {
        return None;
    }
    Some(Placeholder {
        span: start..i + 2,
        path: &text[path_start..path_end],
    })
}

/// All placeholders in `text`, leftmost first, non-overlapping.
pub fn placeholders(text: &str) -> Vec<Placeholder<'_>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < text.len() {
        if let Some(p) = placeholder_at(text, i) {
            i = p.span.end;
            out.push(p);
        } else {
            i += text[i..].chars().next().map_or(1, char::len_utf8);
        }
    }
    out
}

/// Replaces each `{{path}}` with its bound text, in one pass.
///
/// Substituted text is never rescanned, so values containing `{{` are safe.
pub fn render_placeholders(text: &str, scope: &Scope) -> Result<String, ExprError> {
    render_with(text, |p, _| {
        scope
            .get(p)
            .map(ToString::to_string)
            .ok_or_else(|| ExprError::UnboundPlaceholder(p.to_string()))
    })
}

fn render_with(
    text: &str,
    mut value_for: impl FnMut(&str, usize) -> Result<String, ExprError>,
) -> Result<String, ExprError> {
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for p in placeholders(text) {
        out.push_str(&text[last..p.span.start]);
        out.push_str(&value_for(p.path, p.span.start)?);
        last = p.span.end;
    }
    out.push_str(&text[last..]);
    Ok(out)
}

/// Renders a condition: outside quotes, values become number/bool literals
/// when they read as such and single-quoted strings otherwise; inside a
/// quoted string they are escaped for that string.
pub fn render_condition(text: &str, scope: &Scope) -> Result<String, ExprError> {
    let quote_state = quote_states(text);
    render_with(text, |path, at| {
        let v = scope
            .get(path)
            .ok_or_else(|| ExprError::UnboundPlaceholder(path.to_string()))?;
        Ok(match quote_state(at) {
            Some(q) => escape_in(v, q),
            None if is_number_literal(v) || v == "true" || v == "false" => v.to_string(),
            None => {
                let mut s = String::with_capacity(v.len() + 2);
                s.push('\'');
                s.push_str(&escape_in(v, '\''));
                s.push('\'');
                s
            }
        })
    })
}

/// For each byte offset, the quote character enclosing it (if any).
fn quote_states(text: &str) -> impl Fn(usize) -> Option<char> {
    let mut states = Vec::with_capacity(text.len() + 1);
    let mut quote: Option<char> = None;
    let mut escaped = false;
    for c in text.chars() {
        for _ in 0..c.len_utf8() {
            states.push(quote);
        }
        match quote {
            Some(q) => {
                if escaped {
                    escaped = false;
                } else if c == '\\' {
                    escaped = true;
                } else if c == q {
                    quote = None;
                }
            }
            None if c == '\'' || c == '"' => quote = Some(c),
            None => {}
        }
    }
    states.push(quote);
    move |at| states.get(at).copied().flatten()
}

fn escape_in(v: &str, quote: char) -> String {
    let mut s = String::with_capacity(v.len());
    for c in v.chars() {
        if c == '\\' || c == quote {
            s.push('\\');
        }
        s.push(c);
    }
    s
}

/// `-?[0-9]+(\.[0-9]+)?([eE][+-]?[0-9]+)?`
pub fn is_number_literal(s: &str) -> bool {
    number_len(s.as_bytes()) == Some(s.len())
}

fn number_len(b: &[u8]) -> Option<usize> {
    let mut i = 0;
    if b.first() == Some(&b'-') {
        i += 1;
    }
    let digits = |i: &mut usize| {
        let s = *i;
        while *i < b.len() && b[*i].is_ascii_digit() {
            *i += 1;
        }
        *i > s
    };
    if !digits(&mut i) {
        return None;
    }
    if i + 1 < b.len() && b[i] == b'.' && b[i + 1].is_ascii_digit() {
        i += 1;
        digits(&mut i);
    }
    if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
        let mut j = i + 1;
        if j < b.len() && (b[j] == b'+' || b[j] == b'-') {
            j += 1;
        }
        if digits(&mut j) {
            i = j;
        }
    }
    Some(i)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub const ALL: [CmpOp; 6] = [CmpOp::Eq, CmpOp::Ne, CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge];

    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }

    fn holds(self, ord: Ordering) -> bool {
        match self {
            CmpOp::Eq => ord == Ordering::Equal,
            CmpOp::Ne => ord != Ordering::Equal,
            CmpOp::Lt => ord == Ordering::Less,
            CmpOp::Le => ord != Ordering::Greater,
            CmpOp::Gt => ord == Ordering::Greater,
            CmpOp::Ge => ord != Ordering::Less,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expr {
    /// Number literal, kept as written.
    Number(String),
    Str(String),
    Bool(bool),
    Not(Box<Expr>),
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
    Cmp(CmpOp, Box<Expr>, Box<Expr>),
}

impl Expr {
    fn is_atom(&self) -> bool {
        matches!(self, Expr::Number(_) | Expr::Str(_) | Expr::Bool(_))
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err<T>(&self, offset: usize, message: impl Into<String>) -> Result<T, ExprError> {
        Err(ExprError::Parse {
            offset,
            message: message.into(),
        })
    }

    fn skip_ws(&mut self) {
        let b = self.src.as_bytes();
        while self.pos < b.len() && b[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn eat(&mut self, tok: &str) -> bool {
        self.skip_ws();
        if self.src[self.pos..].starts_with(tok) {
            self.pos += tok.len();
            true
        } else {
            false
        }
    }

    fn or(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.and()?;
        while self.eat("||") {
            let rhs = self.and()?;
            lhs = Expr::Or(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn and(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.not()?;
        while self.eat("&&") {
            let rhs = self.not()?;
            lhs = Expr::And(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn not(&mut self) -> Result<Expr, ExprError> {
        self.skip_ws();
        if self.src[self.pos..].starts_with('!') && !self.src[self.pos..].starts_with("!=") {
            self.pos += 1;
            return Ok(Expr::Not(Box::new(self.not()?)));
        }
        self.cmp()
    }

    fn cmp_op(&mut self) -> Option<CmpOp> {
        self.skip_ws();
        let rest = &self.src[self.pos..];
        // Two-byte operators first so `<=` is not read as `<`.
        let op = [
            ("==", CmpOp::Eq),
            ("!=", CmpOp::Ne),
            ("<=", CmpOp::Le),
            (">=", CmpOp::Ge),
            ("<", CmpOp::Lt),
            (">", CmpOp::Gt),
        ]
        .into_iter()
        .find(|(s, _)| rest.starts_with(s))?;
        self.pos += op.0.len();
        Some(op.1)
    }

    fn cmp(&mut self) -> Result<Expr, ExprError> {
        let lhs = self.term()?;
        match self.cmp_op() {
            Some(op) => {
                let rhs = self.term()?;
                Ok(Expr::Cmp(op, Box::new(lhs), Box::new(rhs)))
            }
            None => Ok(lhs),
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        self.skip_ws();
        let start = self.pos;
        let rest = &self.src[start..];
        let Some(c) = rest.chars().next() else {
            return self.err(start, "unexpected end of expression");
        };
        match c {
            '(' => {
                self.pos += 1;
                let e = self.or()?;
                if !self.eat(")") {
                    return self.err(self.pos, "expected `)`");
                }
                Ok(e)
            }
            '\'' | '"' => self.string(c),
            '-' | '0'..='9' => match number_len(rest.as_bytes()) {
                Some(n) => {
                    self.pos += n;
                    Ok(Expr::Number(rest[..n].to_string()))
                }
                None => self.err(start, "malformed number"),
            },
            _ => {
                for (word, v) in [("true", true), ("false", false)] {
                    if rest.starts_with(word)
                        && !rest[word.len()..]
                            .bytes()
                            .next()
                            .is_some_and(|b| b.is_ascii_alphanumeric() || b == b'_')
                    {
                        self.pos += word.len();
                        return Ok(Expr::Bool(v));
                    }
                }
                self.err(start, "expected a number, string, boolean or `(`")
            }
        }
    }

    fn string(&mut self, quote: char) -> Result<Expr, ExprError> {
        let start = self.pos;
        let mut out = String::new();
        let mut chars = self.src[start + 1..].char_indices();
        while let Some((i, c)) = chars.next() {
            match c {
                '\\' => match chars.next() {
                    Some((_, 'n')) => out.push('\n'),
                    Some((_, 't')) => out.push('\t'),
                    Some((_, e)) => out.push(e),
                    None => break,
                },
                c if c == quote => {
                    self.pos = start + 1 + i + 1;
                    return Ok(Expr::Str(out));
                }
                c => out.push(c),
            }
        }
        self.err(start, "unterminated string")
    }
}

pub fn parse_expression(text: &str) -> Result<Expr, ExprError> {
    let mut p = Parser { src: text, pos: 0 };
    p.skip_ws();
    if p.pos == text.len() {
        return p.err(0, "empty expression");
    }
    let e = p.or()?;
    p.skip_ws();
    if p.pos != text.len() {
        return p.err(p.pos, "unexpected trailing input");
    }
    Ok(e)
}

/// Runtime value of a sub-expression.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Number(String),
    Str(String),
    Bool(bool),
}

impl Value {
    fn text(&self) -> &str {
        match self {
            Value::Number(s) | Value::Str(s) => s,
            Value::Bool(true) => "true",
            Value::Bool(false) => "false",
        }
    }
}

fn is_int_literal(s: &str) -> bool {
    let d = s.strip_prefix('-').unwrap_or(s);
    !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit())
}

/// Exact comparison of two integer literals of any length.
fn cmp_int_text(a: &str, b: &str) -> Ordering {
    let norm = |s: &str| {
        let (neg, d) = match s.strip_prefix('-') {
            Some(d) => (true, d),
            None => (false, s),
        };
        let d = d.trim_start_matches('0');
        (neg && !d.is_empty(), d.to_string())
    };
    let (an, ad) = norm(a);
    let (bn, bd) = norm(b);
    let mag = || ad.len().cmp(&bd.len()).then_with(|| ad.cmp(&bd));
    match (an, bn) {
        (false, false) => mag(),
        (true, true) => mag().reverse(),
        (true, false) => Ordering::Less,
        (false, true) => Ordering::Greater,
    }
}

fn cmp_numbers(a: &str, b: &str) -> Ordering {
    if is_int_literal(a) && is_int_literal(b) {
        return cmp_int_text(a, b);
    }
    let x: f64 = a.parse().unwrap_or(f64::NAN);
    let y: f64 = b.parse().unwrap_or(f64::NAN);
    x.partial_cmp(&y).unwrap_or(Ordering::Less)
}

impl Expr {
    /// Evaluates to a boolean; anything else is a type error.
    pub fn eval(&self) -> Result<bool, ExprError> {
        match self.value()? {
            Value::Bool(b) => Ok(b),
            other => Err(ExprError::Type(alloc::format!(
                "condition evaluates to `{}`, not a boolean",
                other.text()
            ))),
        }
    }

    pub fn value(&self) -> Result<Value, ExprError> {
        let as_bool = |e: &Expr| match e.value()? {
            Value::Bool(b) => Ok(b),
            other => Err(ExprError::Type(alloc::format!(
                "logical operand `{}` is not a boolean",
                other.text()
            ))),
        };
        Ok(match self {
            Expr::Number(n) => Value::Number(n.clone()),
            Expr::Str(s) => Value::Str(s.clone()),
            Expr::Bool(b) => Value::Bool(*b),
            Expr::Not(e) => Value::Bool(!as_bool(e)?),
            // Short-circuit: the right side is not evaluated (nor type checked)
            // when the left side decides.
            Expr::And(a, b) => Value::Bool(as_bool(a)? && as_bool(b)?),
            Expr::Or(a, b) => Value::Bool(as_bool(a)? || as_bool(b)?),
            Expr::Cmp(op, a, b) => {
                let (a, b) = (a.value()?, b.value()?);
                let result = match (&a, &b) {
                    (Value::Number(x), Value::Number(y)) => op.holds(cmp_numbers(x, y)),
                    _ if matches!(op, CmpOp::Eq | CmpOp::Ne) => {
                        let eq = match (&a, &b) {
                            (Value::Bool(x), Value::Bool(y)) => x == y,
                            _ => a.text().as_bytes() == b.text().as_bytes(),
                        };
                        (*op == CmpOp::Eq) == eq
                    }
                    _ => {
                        return Err(ExprError::Type(alloc::format!(
                            "`{}` needs numeric operands, got `{}` and `{}`",
                            op.symbol(),
                            a.text(),
                            b.text()
                        )))
                    }
                };
                Value::Bool(result)
            }
        })
    }
}

fn write_quoted(f: &mut fmt::Formatter<'_>, s: &str) -> fmt::Result {
    f.write_str("'")?;
    for c in s.chars() {
        match c {
            '\\' => f.write_str("\\\\")?,
            '\'' => f.write_str("\\'")?,
            '\n' => f.write_str("\\n")?,
            '\t' => f.write_str("\\t")?,
            c => write!(f, "{c}")?,
        }
    }
    f.write_str("'")
}

struct Paren<'a>(&'a Expr, bool);

impl fmt::Display for Paren<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.1 {
            write!(f, "({})", self.0)
        } else {
            write!(f, "{}", self.0)
        }
    }
}

/// Prints with the fewest parentheses that reparse to the same tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Number(n) => f.write_str(n),
            Expr::Str(s) => write_quoted(f, s),
            Expr::Bool(b) => write!(f, "{b}"),
            Expr::Not(e) => {
                let wrap = matches!(**e, Expr::And(..) | Expr::Or(..));
                write!(f, "!{}", Paren(e, wrap))
            }
            Expr::Cmp(op, a, b) => write!(
                f,
                "{} {} {}",
                Paren(a, !a.is_atom()),
                op.symbol(),
                Paren(b, !b.is_atom())
            ),
            Expr::And(a, b) => write!(
                f,
                "{} && {}",
                Paren(a, matches!(**a, Expr::Or(..))),
                Paren(b, matches!(**b, Expr::And(..) | Expr::Or(..)))
            ),
            Expr::Or(a, b) => write!(f, "{} || {}", a, Paren(b, matches!(**b, Expr::Or(..)))),
        }
    }
}

/// Render, parse, evaluate.
pub fn evaluate_condition(text: &str, scope: &Scope) -> Result<bool, ExprError> {
    parse_expression(&render_condition(text, scope)?)?.eval()
}

/// Checks a condition's syntax with every placeholder standing in as `0`.
pub fn check_condition_syntax(text: &str) -> Result<Expr, ExprError> {
    let quote_state = quote_states(text);
    let dummy = render_with(text, |_, at| {
        Ok(if quote_state(at).is_some() { String::new() } else { "0".to_string() })
    })?;
    parse_expression(&dummy)
}
