//! Minimal arithmetic expressions over `x1`, `x2` and `u`, used to describe
//! drift, diffusion and cost coefficients in diffusion problem files.
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := atom ('^' unary)?          right associative, binds tighter than unary minus
//! atom    := number | 'x1' | 'x2' | 'u'
//!          | ('exp' | 'log' | 'abs') '(' expr ')'
//!          | ('min' | 'max') '(' expr ',' expr ')'
//!          | '(' expr ')'
//! ```
//!
//! `Display` prints a fully parenthesized form that parses back to the same tree.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("unexpected character {ch:?} at offset {pos}")]
    UnexpectedChar { pos: usize, ch: char },
    #[error("unexpected end of expression")]
    UnexpectedEnd,
    #[error("unexpected {found} at offset {pos}")]
    UnexpectedToken { pos: usize, found: String },
    #[error("unknown identifier {0:?}")]
    UnknownIdent(String),
    #[error("malformed number {0:?}")]
    BadNumber(String),
    #[error("{func} takes {expected} argument(s), got {got}")]
    Arity {
        func: &'static str,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    X1,
    X2,
    U,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Exp,
    Log,
    Abs,
    Min,
    Max,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Abs => "abs",
            Func::Min => "min",
            Func::Max => "max",
        }
    }

    fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ExprSource", into = "String")]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

impl Expr {
    pub fn num(v: f64) -> Self {
        Expr::Num(v)
    }

    pub fn eval(&self, x: &[f64], u: f64) -> f64 {
        match self {
            Expr::Num(v) => *v,
            Expr::Var(Var::X1) => x[0],
            Expr::Var(Var::X2) => x[1],
            Expr::Var(Var::U) => u,
            Expr::Neg(e) => -e.eval(x, u),
            Expr::Bin(op, a, b) => {
                let (a, b) = (a.eval(x, u), b.eval(x, u));
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => a / b,
                    BinOp::Pow => pow(a, b),
                }
            }
            Expr::Call(f, args) => {
                let a = args[0].eval(x, u);
                match f {
                    Func::Exp => a.exp(),
                    Func::Log => a.ln(),
                    Func::Abs => a.abs(),
                    Func::Min => a.min(args[1].eval(x, u)),
                    Func::Max => a.max(args[1].eval(x, u)),
                }
            }
        }
    }

    /// Number of spatial coordinates the expression reads (0, 1 or 2).
    pub fn spatial_dim(&self) -> usize {
        match self {
            Expr::Num(_) | Expr::Var(Var::U) => 0,
            Expr::Var(Var::X1) => 1,
            Expr::Var(Var::X2) => 2,
            Expr::Neg(e) => e.spatial_dim(),
            Expr::Bin(_, a, b) => a.spatial_dim().max(b.spatial_dim()),
            Expr::Call(_, args) => args.iter().map(Expr::spatial_dim).max().unwrap_or(0),
        }
    }
}

fn pow(a: f64, b: f64) -> f64 {
    if b == 2.0 {
        a * a
    } else if b.fract() == 0.0 && b.abs() <= i32::MAX as f64 {
        a.powi(b as i32)
    } else {
        a.powf(b)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v}"),
            Expr::Var(Var::X1) => f.write_str("x1"),
            Expr::Var(Var::X2) => f.write_str("x2"),
            Expr::Var(Var::U) => f.write_str("u"),
            Expr::Neg(e) => write!(f, "(-{e})"),
            Expr::Bin(op, a, b) => {
                let sym = match op {
                    BinOp::Add => "+",
                    BinOp::Sub => "-",
                    BinOp::Mul => "*",
                    BinOp::Div => "/",
                    BinOp::Pow => "^",
                };
                write!(f, "({a} {sym} {b})")
            }
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
        }
    }
}

impl FromStr for Expr {
    type Err = ExprError;

    fn from_str(s: &str) -> Result<Self, ExprError> {
        let tokens = tokenize(s)?;
        let mut p = Parser { tokens, pos: 0 };
        let e = p.expr()?;
        match p.peek() {
            None => Ok(e),
            Some((pos, t)) => Err(ExprError::UnexpectedToken {
                pos: *pos,
                found: t.describe(),
            }),
        }
    }
}

/// Coefficients may be written as a formula or as a bare number.
#[derive(Deserialize)]
#[serde(untagged)]
enum ExprSource {
    Number(f64),
    Text(String),
}

impl TryFrom<ExprSource> for Expr {
    type Error = ExprError;

    fn try_from(src: ExprSource) -> Result<Self, ExprError> {
        match src {
            ExprSource::Number(v) => Ok(Expr::Num(v)),
            ExprSource::Text(s) => s.parse(),
        }
    }
}

impl TryFrom<String> for Expr {
    type Error = ExprError;

    fn try_from(s: String) -> Result<Self, ExprError> {
        s.parse()
    }
}

impl From<Expr> for String {
    fn from(e: Expr) -> Self {
        e.to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(v) => format!("number {v}"),
            Tok::Ident(s) => format!("identifier {s:?}"),
            Tok::Op(c) => format!("{c:?}"),
        }
    }
}

fn tokenize(s: &str) -> Result<Vec<(usize, Tok)>, ExprError> {
    let chars: Vec<(usize, char)> = s.char_indices().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].1.is_ascii_digit() || chars[i].1 == '.') {
                i += 1;
            }
            if i < chars.len() && matches!(chars[i].1, 'e' | 'E') {
                let mut j = i + 1;
                if j < chars.len() && matches!(chars[j].1, '+' | '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].1.is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].1.is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().map(|(_, c)| c).collect();
            let v = text
                .parse()
                .map_err(|_| ExprError::BadNumber(text.clone()))?;
            out.push((pos, Tok::Num(v)));
        } else if c.is_ascii_alphabetic() {
            let start = i;
            while i < chars.len() && (chars[i].1.is_ascii_alphanumeric() || chars[i].1 == '_') {
                i += 1;
            }
            out.push((
                pos,
                Tok::Ident(chars[start..i].iter().map(|(_, c)| c).collect()),
            ));
        } else if matches!(c, '+' | '-' | '*' | '/' | '^' | '(' | ')' | ',') {
            out.push((pos, Tok::Op(c)));
            i += 1;
        } else if c == '\u{2212}' {
            out.push((pos, Tok::Op('-')));
            i += 1;
        } else {
            return Err(ExprError::UnexpectedChar { pos, ch: c });
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<(usize, Tok)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&(usize, Tok)> {
        self.tokens.get(self.pos)
    }

    fn peek_op(&self) -> Option<char> {
        match self.peek() {
            Some((_, Tok::Op(c))) => Some(*c),
            _ => None,
        }
    }

    fn next(&mut self) -> Result<(usize, Tok), ExprError> {
        let t = self
            .tokens
            .get(self.pos)
            .cloned()
            .ok_or(ExprError::UnexpectedEnd)?;
        self.pos += 1;
        Ok(t)
    }

    fn expect(&mut self, op: char) -> Result<(), ExprError> {
        match self.next()? {
            (_, Tok::Op(c)) if c == op => Ok(()),
            (pos, t) => Err(ExprError::UnexpectedToken {
                pos,
                found: t.describe(),
            }),
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        while let Some(c @ ('+' | '-')) = self.peek_op() {
            self.pos += 1;
            let rhs = self.term()?;
            let op = if c == '+' { BinOp::Add } else { BinOp::Sub };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        while let Some(c @ ('*' | '/')) = self.peek_op() {
            self.pos += 1;
            let rhs = self.unary()?;
            let op = if c == '*' { BinOp::Mul } else { BinOp::Div };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.peek_op() == Some('-') {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.atom()?;
        if self.peek_op() == Some('^') {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        match self.next()? {
            (_, Tok::Num(v)) => Ok(Expr::Num(v)),
            (_, Tok::Op('(')) => {
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            (_, Tok::Ident(name)) => {
                let func = match name.as_str() {
                    "x1" => return Ok(Expr::Var(Var::X1)),
                    "x2" => return Ok(Expr::Var(Var::X2)),
                    "u" => return Ok(Expr::Var(Var::U)),
                    "exp" => Func::Exp,
                    "log" => Func::Log,
                    "abs" => Func::Abs,
                    "min" => Func::Min,
                    "max" => Func::Max,
                    _ => return Err(ExprError::UnknownIdent(name)),
                };
                self.expect('(')?;
                let mut args = vec![self.expr()?];
                while self.peek_op() == Some(',') {
                    self.pos += 1;
                    args.push(self.expr()?);
                }
                self.expect(')')?;
                if args.len() != func.arity() {
                    return Err(ExprError::Arity {
                        func: func.name(),
                        expected: func.arity(),
                        got: args.len(),
                    });
                }
                Ok(Expr::Call(func, args))
            }
            (pos, t) => Err(ExprError::UnexpectedToken {
                pos,
                found: t.describe(),
            }),
        }
    }
}
