//! Closed expression grammar for coefficient functions.
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary ('*' unary)*
//! unary   := '-' unary | primary
//! primary := number | 'x' INDEX | 'tanh' '(' expr ')' | '(' expr ')'
//! ```
//!
//! Every accepted expression is globally Lipschitz with linear growth.
//! Products are only allowed when one factor is constant or both factors
//! are bounded (built from `tanh`), so `x1 * x2` and `x1 * tanh(x2)` are
//! rejected.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    /// zero-based state index
    Var(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Tanh(Box<Expr>),
}

/// Growth class used to keep the grammar inside Lipschitz / linear growth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Growth {
    Const,
    Bounded,
    Linear,
}

impl Expr {
    pub fn parse(src: &str, n: usize) -> Result<Expr> {
        let tokens = tokenize(src)?;
        let mut p = Parser { tokens, pos: 0, n, src };
        let e = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(Error::Schema(format!("trailing input in expression `{src}`")));
        }
        e.growth().map_err(|why| {
            Error::UnsupportedFamily(format!("expression `{src}` is outside the Lipschitz grammar: {why}"))
        })?;
        Ok(e)
    }

    fn growth(&self) -> std::result::Result<Growth, String> {
        Ok(match self {
            Expr::Const(_) => Growth::Const,
            Expr::Var(_) => Growth::Linear,
            Expr::Neg(a) => a.growth()?,
            Expr::Add(a, b) | Expr::Sub(a, b) => a.growth()?.max(b.growth()?),
            Expr::Tanh(a) => {
                a.growth()?;
                Growth::Bounded
            }
            Expr::Mul(a, b) => match (a.growth()?, b.growth()?) {
                (Growth::Const, g) | (g, Growth::Const) => g,
                (Growth::Bounded, Growth::Bounded) => Growth::Bounded,
                _ => return Err(format!("product `{self}` of unbounded factors")),
            },
        })
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.growth(), Ok(Growth::Const))
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(i) => x[*i],
            Expr::Neg(a) => -a.eval(x),
            Expr::Add(a, b) => a.eval(x) + b.eval(x),
            Expr::Sub(a, b) => a.eval(x) - b.eval(x),
            Expr::Mul(a, b) => a.eval(x) * b.eval(x),
            Expr::Tanh(a) => a.eval(x).tanh(),
        }
    }

    /// Adds `weight * grad(self)(x)` into `grad`.
    pub fn accumulate_grad(&self, x: &[f64], weight: f64, grad: &mut [f64]) {
        if weight == 0.0 {
            return;
        }
        match self {
            Expr::Const(_) => {}
            Expr::Var(i) => grad[*i] += weight,
            Expr::Neg(a) => a.accumulate_grad(x, -weight, grad),
            Expr::Add(a, b) => {
                a.accumulate_grad(x, weight, grad);
                b.accumulate_grad(x, weight, grad);
            }
            Expr::Sub(a, b) => {
                a.accumulate_grad(x, weight, grad);
                b.accumulate_grad(x, -weight, grad);
            }
            Expr::Mul(a, b) => {
                let (va, vb) = (a.eval(x), b.eval(x));
                a.accumulate_grad(x, weight * vb, grad);
                b.accumulate_grad(x, weight * va, grad);
            }
            Expr::Tanh(a) => {
                let th = a.eval(x).tanh();
                a.accumulate_grad(x, weight * (1.0 - th * th), grad);
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Var(i) => write!(f, "x{}", i + 1),
            Expr::Neg(a) => write!(f, "-({a})"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Tanh(a) => write!(f, "tanh({a})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Var(usize),
    Tanh,
    Plus,
    Minus,
    Star,
    LParen,
    RParen,
}

fn tokenize(src: &str) -> Result<Vec<Tok>> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' => i += 1,
            '+' => {
                out.push(Tok::Plus);
                i += 1
            }
            '-' => {
                out.push(Tok::Minus);
                i += 1
            }
            '*' => {
                out.push(Tok::Star);
                i += 1
            }
            '(' => {
                out.push(Tok::LParen);
                i += 1
            }
            ')' => {
                out.push(Tok::RParen);
                i += 1
            }
            'x' => {
                let start = i + 1;
                let mut j = start;
                while j < bytes.len() && bytes[j].is_ascii_digit() {
                    j += 1;
                }
                let idx: usize = src[start..j]
                    .parse()
                    .map_err(|_| Error::Schema(format!("bad variable in expression `{src}`")))?;
                out.push(Tok::Var(idx));
                i = j;
            }
            't' if src[i..].starts_with("tanh") => {
                out.push(Tok::Tanh);
                i += 4;
            }
            c if c.is_ascii_digit() || c == '.' => {
                let start = i;
                let mut j = i;
                while j < bytes.len() {
                    let b = bytes[j] as char;
                    let exp_sign = (b == '-' || b == '+') && j > start && matches!(bytes[j - 1] as char, 'e' | 'E');
                    if b.is_ascii_digit() || b == '.' || b == 'e' || b == 'E' || exp_sign {
                        j += 1;
                    } else {
                        break;
                    }
                }
                let v: f64 = src[start..j]
                    .parse()
                    .map_err(|_| Error::Schema(format!("bad number `{}` in expression", &src[start..j])))?;
                out.push(Tok::Num(v));
                i = j;
            }
            other => {
                return Err(Error::Schema(format!(
                    "unexpected character `{other}` in expression `{src}`"
                )))
            }
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<Tok>,
    pos: usize,
    n: usize,
    src: &'a str,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn err(&self, what: &str) -> Error {
        Error::Schema(format!("{what} in expression `{}`", self.src))
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.pos += 1;
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(Tok::Minus) => {
                    self.pos += 1;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        while let Some(Tok::Star) = self.peek() {
            self.pos += 1;
            lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr> {
        if let Some(Tok::Minus) = self.peek() {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr> {
        match self.next() {
            Some(Tok::Num(v)) => Ok(Expr::Const(v)),
            Some(Tok::Var(i)) => {
                if i == 0 || i > self.n {
                    Err(self.err(&format!("variable x{i} out of range 1..={}", self.n)))
                } else {
                    Ok(Expr::Var(i - 1))
                }
            }
            Some(Tok::Tanh) => {
                if self.next() != Some(Tok::LParen) {
                    return Err(self.err("expected `(` after tanh"));
                }
                let inner = self.expr()?;
                if self.next() != Some(Tok::RParen) {
                    return Err(self.err("expected `)`"));
                }
                Ok(Expr::Tanh(Box::new(inner)))
            }
            Some(Tok::LParen) => {
                let inner = self.expr()?;
                if self.next() != Some(Tok::RParen) {
                    return Err(self.err("expected `)`"));
                }
                Ok(inner)
            }
            _ => Err(self.err("unexpected token")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_evaluates() {
        let e = Expr::parse("0.2*x1 + 0.1*tanh(x2 - 3) - -1.5e-1", 2).unwrap();
        let x = [2.0, 1.0];
        let expected = 0.2 * 2.0 + 0.1 * (1.0f64 - 3.0).tanh() + 0.15;
        assert!((e.eval(&x) - expected).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_central_difference() {
        let e = Expr::parse("0.3*x1 + tanh(0.5*x1 - x2)*tanh(x2) - 2*(x2 + 1)", 2).unwrap();
        let x = [0.7, -0.4];
        let mut g = [0.0; 2];
        e.accumulate_grad(&x, 1.0, &mut g);
        for i in 0..2 {
            let h = 1e-6;
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let fd = (e.eval(&xp) - e.eval(&xm)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8, "component {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn rejects_superlinear_products() {
        assert!(matches!(Expr::parse("x1*x2", 2), Err(Error::UnsupportedFamily(_))));
        assert!(matches!(
            Expr::parse("x1*tanh(x2)", 2),
            Err(Error::UnsupportedFamily(_))
        ));
        assert!(Expr::parse("tanh(x1)*tanh(x2)", 2).is_ok());
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(matches!(Expr::parse("x3", 2), Err(Error::Schema(_))));
        assert!(matches!(Expr::parse("exp(x1)", 1), Err(Error::Schema(_))));
        assert!(matches!(Expr::parse("(x1", 1), Err(Error::Schema(_))));
        assert!(matches!(Expr::parse("x1 x1", 1), Err(Error::Schema(_))));
    }
}
