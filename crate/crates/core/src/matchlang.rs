//! Requirements expressions: a small ClassAd-flavoured language evaluated
//! against slot ads during matchmaking.
//!
//! Precedence, tightest first: `!`, `* /`, `+ -`, comparisons, `&&`, `||`.
//! All binary operators associate to the left. Arithmetic is on 64-bit
//! integers with truncating division. Referencing an attribute the ad does
//! not define is an error, not a third truth value.

use alloc::boxed::Box;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::model::{Attributes, Value, ValueKind};

/// 1-based source position.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Pos {
    pub line: u32,
    pub column: u32,
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.column)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BinOp {
    Or,
    And,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    pub const ALL: [BinOp; 12] = [
        BinOp::Or,
        BinOp::And,
        BinOp::Eq,
        BinOp::Ne,
        BinOp::Lt,
        BinOp::Le,
        BinOp::Gt,
        BinOp::Ge,
        BinOp::Add,
        BinOp::Sub,
        BinOp::Mul,
        BinOp::Div,
    ];

    /// Binding strength; larger binds tighter.
    pub fn precedence(self) -> u8 {
        match self {
            BinOp::Or => 1,
            BinOp::And => 2,
            BinOp::Eq | BinOp::Ne | BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge => 3,
            BinOp::Add | BinOp::Sub => 4,
            BinOp::Mul | BinOp::Div => 5,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Or => "||",
            BinOp::And => "&&",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
        }
    }
}

/// Parsed expression. Equality is structural: source positions are ignored.
#[derive(Clone, Debug)]
pub enum Expr {
    Int(i64),
    Str(String),
    Bool(bool),
    Attr(String),
    Not(Box<Expr>),
    Binary {
        op: BinOp,
        lhs: Box<Expr>,
        rhs: Box<Expr>,
        /// Position of the operator token.
        pos: Pos,
    },
}

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Expr::Int(a), Expr::Int(b)) => a == b,
            (Expr::Str(a), Expr::Str(b)) => a == b,
            (Expr::Bool(a), Expr::Bool(b)) => a == b,
            (Expr::Attr(a), Expr::Attr(b)) => a == b,
            (Expr::Not(a), Expr::Not(b)) => a == b,
            (
                Expr::Binary { op: o1, lhs: l1, rhs: r1, .. },
                Expr::Binary { op: o2, lhs: l2, rhs: r2, .. },
            ) => o1 == o2 && l1 == l2 && r1 == r2,
            _ => false,
        }
    }
}

impl Eq for Expr {}

impl Expr {
    pub fn binary(op: BinOp, lhs: Expr, rhs: Expr) -> Expr {
        Expr::Binary { op, lhs: Box::new(lhs), rhs: Box::new(rhs), pos: Pos::default() }
    }

    pub fn attr(name: &str) -> Expr {
        Expr::Attr(name.into())
    }

    pub fn depth(&self) -> usize {
        match self {
            Expr::Not(e) => 1 + e.depth(),
            Expr::Binary { lhs, rhs, .. } => 1 + lhs.depth().max(rhs.depth()),
            _ => 1,
        }
    }

    /// Attribute names referenced anywhere in the expression.
    pub fn attributes(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_attrs(&mut out);
        out.sort_unstable();
        out.dedup();
        out
    }

    fn collect_attrs<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Expr::Attr(a) => out.push(a),
            Expr::Not(e) => e.collect_attrs(out),
            Expr::Binary { lhs, rhs, .. } => {
                lhs.collect_attrs(out);
                rhs.collect_attrs(out);
            }
            _ => {}
        }
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, min_prec: u8) -> fmt::Result {
        match self {
            Expr::Int(v) => write!(f, "{v}"),
            Expr::Bool(b) => write!(f, "{b}"),
            Expr::Attr(a) => f.write_str(a),
            Expr::Str(s) => {
                f.write_str("\"")?;
                for c in s.chars() {
                    match c {
                        '"' => f.write_str("\\\"")?,
                        '\\' => f.write_str("\\\\")?,
                        '\n' => f.write_str("\\n")?,
                        '\t' => f.write_str("\\t")?,
                        c => write!(f, "{c}")?,
                    }
                }
                f.write_str("\"")
            }
            Expr::Not(e) => {
                f.write_str("!")?;
                e.fmt_prec(f, u8::MAX)
            }
            Expr::Binary { op, lhs, rhs, .. } => {
                let p = op.precedence();
                let wrap = p < min_prec;
                if wrap {
                    f.write_str("(")?;
                }
                lhs.fmt_prec(f, p)?;
                write!(f, " {} ", op.symbol())?;
                rhs.fmt_prec(f, p + 1)?;
                if wrap {
                    f.write_str(")")?;
                }
                Ok(())
            }
        }
    }
}

/// Minimal-parenthesis pretty printer. Any tree the parser can produce (no
/// negative literals) prints to text that reparses to an equal tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("parse error at line {line}, column {column}: expected {}, found {found}", expected.join(" or "))]
pub struct ParseError {
    pub line: u32,
    pub column: u32,
    pub expected: Vec<&'static str>,
    pub found: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("undefined attribute {0}")]
    UndefinedAttribute(String),
    #[error("type mismatch: {lhs} {op} {}", rhs.map(|k| k.to_string()).unwrap_or_else(|| "_".into()))]
    TypeMismatch {
        op: &'static str,
        lhs: ValueKind,
        rhs: Option<ValueKind>,
    },
    #[error("division by zero at {0}")]
    DivisionByZero(Pos),
    #[error("integer overflow at {0}")]
    Overflow(Pos),
    #[error("requirements evaluated to a {0}, not a boolean")]
    NotBoolean(ValueKind),
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Tok {
    Int(i64),
    Str(String),
    Ident(String),
    True,
    False,
    LParen,
    RParen,
    Bang,
    Op(BinOp),
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Int(v) => alloc::format!("integer {v}"),
            Tok::Str(_) => "string".into(),
            Tok::Ident(a) => alloc::format!("attribute {a}"),
            Tok::True => "true".into(),
            Tok::False => "false".into(),
            Tok::LParen => "'('".into(),
            Tok::RParen => "')'".into(),
            Tok::Bang => "'!'".into(),
            Tok::Op(op) => alloc::format!("'{}'", op.symbol()),
            Tok::Eof => "end of input".into(),
        }
    }
}

struct Lexer<'a> {
    src: &'a str,
    offset: usize,
    line: u32,
    column: u32,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer { src, offset: 0, line: 1, column: 1 }
    }

    fn peek_char(&self) -> Option<char> {
        self.src[self.offset..].chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek_char()?;
        self.offset += c.len_utf8();
        if c == '\n' {
            self.line += 1;
            self.column = 1;
        } else {
            self.column += 1;
        }
        Some(c)
    }

    fn pos(&self) -> Pos {
        Pos { line: self.line, column: self.column }
    }

    fn error(&self, pos: Pos, expected: &[&'static str], found: String) -> ParseError {
        ParseError { line: pos.line, column: pos.column, expected: expected.to_vec(), found }
    }

    fn tokens(mut self) -> Result<Vec<(Tok, Pos)>, ParseError> {
        let mut out = Vec::new();
        loop {
            while self.peek_char().is_some_and(char::is_whitespace) {
                self.bump();
            }
            let pos = self.pos();
            let Some(c) = self.bump() else {
                out.push((Tok::Eof, pos));
                return Ok(out);
            };
            let tok = match c {
                '(' => Tok::LParen,
                ')' => Tok::RParen,
                '+' => Tok::Op(BinOp::Add),
                '-' => Tok::Op(BinOp::Sub),
                '*' => Tok::Op(BinOp::Mul),
                '/' => Tok::Op(BinOp::Div),
                '!' if self.peek_char() == Some('=') => {
                    self.bump();
                    Tok::Op(BinOp::Ne)
                }
                '!' => Tok::Bang,
                '<' | '>' => {
                    let eq = self.peek_char() == Some('=');
                    if eq {
                        self.bump();
                    }
                    Tok::Op(match (c, eq) {
                        ('<', false) => BinOp::Lt,
                        ('<', true) => BinOp::Le,
                        ('>', false) => BinOp::Gt,
                        _ => BinOp::Ge,
                    })
                }
                '=' | '&' | '|' => {
                    let (want, op) = match c {
                        '=' => ('=', BinOp::Eq),
                        '&' => ('&', BinOp::And),
                        _ => ('|', BinOp::Or),
                    };
                    if self.peek_char() != Some(want) {
                        let found = self.peek_char().map_or("end of input".into(), |c| alloc::format!("{c:?}"));
                        return Err(self.error(self.pos(), &[op.symbol()], found));
                    }
                    self.bump();
                    Tok::Op(op)
                }
                '"' => self.string(pos)?,
                '0'..='9' => {
                    let start = self.offset - 1;
                    while self.peek_char().is_some_and(|c| c.is_ascii_digit()) {
                        self.bump();
                    }
                    let digits = &self.src[start..self.offset];
                    let v = digits
                        .parse::<i64>()
                        .map_err(|_| self.error(pos, &["integer within 64 bits"], digits.into()))?;
                    Tok::Int(v)
                }
                c if c.is_ascii_alphabetic() || c == '_' => {
                    let start = self.offset - 1;
                    while self.peek_char().is_some_and(|c| c.is_ascii_alphanumeric() || c == '_') {
                        self.bump();
                    }
                    match &self.src[start..self.offset] {
                        "true" => Tok::True,
                        "false" => Tok::False,
                        ident => Tok::Ident(ident.into()),
                    }
                }
                other => return Err(self.error(pos, &["expression"], alloc::format!("{other:?}"))),
            };
            out.push((tok, pos));
        }
    }

    fn string(&mut self, start: Pos) -> Result<Tok, ParseError> {
        let mut s = String::new();
        loop {
            match self.bump() {
                None => return Err(self.error(start, &["closing '\"'"], "end of input".into())),
                Some('"') => return Ok(Tok::Str(s)),
                Some('\\') => {
                    let esc_pos = self.pos();
                    match self.bump() {
                        Some('"') => s.push('"'),
                        Some('\\') => s.push('\\'),
                        Some('n') => s.push('\n'),
                        Some('t') => s.push('\t'),
                        other => {
                            let found = other.map_or("end of input".into(), |c| alloc::format!("{c:?}"));
                            return Err(self.error(esc_pos, &["escape sequence"], found));
                        }
                    }
                }
                Some(c) => s.push(c),
            }
        }
    }
}

const PRIMARY_START: &[&str] = &["integer", "string", "true", "false", "attribute", "'('", "'!'"];

struct Parser {
    toks: Vec<(Tok, Pos)>,
    at: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].0
    }

    fn pos(&self) -> Pos {
        self.toks[self.at].1
    }

    fn advance(&mut self) -> (Tok, Pos) {
        let t = self.toks[self.at].clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn fail(&self, expected: &[&'static str]) -> ParseError {
        let pos = self.pos();
        ParseError {
            line: pos.line,
            column: pos.column,
            expected: expected.to_vec(),
            found: self.peek().describe(),
        }
    }

    fn binary_level(&mut self, level: u8) -> Result<Expr, ParseError> {
        if level > 5 {
            return self.unary();
        }
        let mut lhs = self.binary_level(level + 1)?;
        loop {
            let op = match self.peek() {
                Tok::Op(op) if op.precedence() == level => *op,
                _ => return Ok(lhs),
            };
            let (_, pos) = self.advance();
            let rhs = self.binary_level(level + 1)?;
            lhs = Expr::Binary { op, lhs: Box::new(lhs), rhs: Box::new(rhs), pos };
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if *self.peek() == Tok::Bang {
            self.advance();
            return Ok(Expr::Not(Box::new(self.unary()?)));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let expr = match self.peek() {
            Tok::Int(v) => Expr::Int(*v),
            Tok::Str(s) => Expr::Str(s.clone()),
            Tok::Ident(a) => Expr::Attr(a.clone()),
            Tok::True => Expr::Bool(true),
            Tok::False => Expr::Bool(false),
            Tok::LParen => {
                self.advance();
                let inner = self.binary_level(1)?;
                if *self.peek() != Tok::RParen {
                    return Err(self.fail(&["')'", "operator"]));
                }
                self.advance();
                return Ok(inner);
            }
            _ => return Err(self.fail(PRIMARY_START)),
        };
        self.advance();
        Ok(expr)
    }
}

/// Parse requirements text. Trailing input after a complete expression is
/// an error.
pub fn parse_requirements(text: &str) -> Result<Expr, ParseError> {
    let toks = Lexer::new(text).tokens()?;
    let mut p = Parser { toks, at: 0 };
    let expr = p.binary_level(1)?;
    if *p.peek() != Tok::Eof {
        return Err(p.fail(&["operator", "end of input"]));
    }
    Ok(expr)
}

/// Evaluate to a value. `&&` and `||` short-circuit; everything else is
/// strict.
pub fn eval(expr: &Expr, ad: &Attributes) -> Result<Value, EvalError> {
    match expr {
        Expr::Int(v) => Ok(Value::Int(*v)),
        Expr::Str(s) => Ok(Value::Str(s.clone())),
        Expr::Bool(b) => Ok(Value::Bool(*b)),
        Expr::Attr(name) => ad
            .get(name)
            .cloned()
            .ok_or_else(|| EvalError::UndefinedAttribute(name.clone())),
        Expr::Not(e) => match eval(e, ad)? {
            Value::Bool(b) => Ok(Value::Bool(!b)),
            v => Err(EvalError::TypeMismatch { op: "!", lhs: v.kind(), rhs: None }),
        },
        Expr::Binary { op: op @ (BinOp::And | BinOp::Or), lhs, rhs, .. } => {
            let short = *op == BinOp::Or;
            let l = match eval(lhs, ad)? {
                Value::Bool(b) => b,
                v => return Err(EvalError::TypeMismatch { op: op.symbol(), lhs: v.kind(), rhs: None }),
            };
            if l == short {
                return Ok(Value::Bool(short));
            }
            match eval(rhs, ad)? {
                Value::Bool(b) => Ok(Value::Bool(b)),
                v => Err(EvalError::TypeMismatch {
                    op: op.symbol(),
                    lhs: ValueKind::Bool,
                    rhs: Some(v.kind()),
                }),
            }
        }
        Expr::Binary { op, lhs, rhs, pos } => {
            let l = eval(lhs, ad)?;
            let r = eval(rhs, ad)?;
            apply_strict(*op, l, r, *pos)
        }
    }
}

fn apply_strict(op: BinOp, l: Value, r: Value, pos: Pos) -> Result<Value, EvalError> {
    use core::cmp::Ordering;
    let mismatch = |l: &Value, r: &Value| EvalError::TypeMismatch {
        op: op.symbol(),
        lhs: l.kind(),
        rhs: Some(r.kind()),
    };
    match op {
        BinOp::Eq | BinOp::Ne => {
            if l.kind() != r.kind() {
                return Err(mismatch(&l, &r));
            }
            Ok(Value::Bool((l == r) == (op == BinOp::Eq)))
        }
        BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge => {
            let ord = match (&l, &r) {
                (Value::Int(a), Value::Int(b)) => a.cmp(b),
                (Value::Str(a), Value::Str(b)) => a.cmp(b),
                _ => return Err(mismatch(&l, &r)),
            };
            Ok(Value::Bool(match op {
                BinOp::Lt => ord == Ordering::Less,
                BinOp::Le => ord != Ordering::Greater,
                BinOp::Gt => ord == Ordering::Greater,
                _ => ord != Ordering::Less,
            }))
        }
        BinOp::Add | BinOp::Sub | BinOp::Mul | BinOp::Div => {
            let (Value::Int(a), Value::Int(b)) = (&l, &r) else {
                return Err(mismatch(&l, &r));
            };
            let (a, b) = (*a, *b);
            let v = match op {
                BinOp::Add => a.checked_add(b),
                BinOp::Sub => a.checked_sub(b),
                BinOp::Mul => a.checked_mul(b),
                _ => {
                    if b == 0 {
                        return Err(EvalError::DivisionByZero(pos));
                    }
                    a.checked_div(b)
                }
            };
            v.map(Value::Int).ok_or(EvalError::Overflow(pos))
        }
        BinOp::And | BinOp::Or => unreachable!("logical operators are evaluated lazily"),
    }
}

/// Evaluate a requirements expression; the result must be boolean.
pub fn eval_requirements(expr: &Expr, ad: &Attributes) -> Result<bool, EvalError> {
    match eval(expr, ad)? {
        Value::Bool(b) => Ok(b),
        v => Err(EvalError::NotBoolean(v.kind())),
    }
}
