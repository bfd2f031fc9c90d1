//! Recursive-descent parser for coefficient expressions such as
//! `2 + 0.3*sin(x1)` or `exp(-x^2) * t`.
//!
//! Variables are bound by name at parse time; `x` is an alias for `x1`.
//! Functions: sin, cos, exp. Constants: pi, e.

use std::f64::consts::{E, PI};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Var(usize),
    Neg(Box<Node>),
    Bin(char, Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Func {
    Sin,
    Cos,
    Exp,
}

#[derive(Debug, Clone)]
pub struct Expr {
    src: String,
    root: Node,
}

impl Expr {
    /// Parse `src` with the given variable names; values are passed to
    /// [`Expr::eval`] in the same order.
    pub fn parse(src: &str, vars: &[&str]) -> Result<Expr> {
        let mut p = Parser { s: src.as_bytes(), pos: 0, vars };
        let root = p.expr()?;
        p.skip_ws();
        if p.pos != p.s.len() {
            return Err(p.err("unexpected trailing input"));
        }
        Ok(Expr { src: src.to_string(), root })
    }

    pub fn constant(v: f64) -> Expr {
        Expr { src: format!("{v}"), root: Node::Num(v) }
    }

    pub fn source(&self) -> &str {
        &self.src
    }

    pub fn eval(&self, vals: &[f64]) -> f64 {
        eval(&self.root, vals)
    }

    /// True when the expression does not reference variable `idx`.
    pub fn independent_of(&self, idx: usize) -> bool {
        !uses(&self.root, idx)
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.root, Node::Num(_))
    }
}

fn uses(n: &Node, idx: usize) -> bool {
    match n {
        Node::Num(_) => false,
        Node::Var(i) => *i == idx,
        Node::Neg(a) | Node::Call(_, a) => uses(a, idx),
        Node::Bin(_, a, b) => uses(a, idx) || uses(b, idx),
    }
}

fn eval(n: &Node, vals: &[f64]) -> f64 {
    match n {
        Node::Num(v) => *v,
        Node::Var(i) => vals[*i],
        Node::Neg(a) => -eval(a, vals),
        Node::Bin(op, a, b) => {
            let (x, y) = (eval(a, vals), eval(b, vals));
            match op {
                '+' => x + y,
                '-' => x - y,
                '*' => x * y,
                '/' => x / y,
                _ => x.powf(y),
            }
        }
        Node::Call(f, a) => {
            let x = eval(a, vals);
            match f {
                Func::Sin => x.sin(),
                Func::Cos => x.cos(),
                Func::Exp => x.exp(),
            }
        }
    }
}

struct Parser<'a> {
    s: &'a [u8],
    pos: usize,
    vars: &'a [&'a str],
}

impl Parser<'_> {
    fn err(&self, msg: &str) -> Error {
        Error::Expr { pos: self.pos, msg: msg.to_string() }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.s.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        while let Some(c @ (b'+' | b'-')) = self.peek() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Node::Bin(c as char, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        while let Some(c @ (b'*' | b'/')) = self.peek() {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Node::Bin(c as char, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node> {
        match self.peek() {
            Some(b'-') => {
                self.pos += 1;
                Ok(Node::Neg(Box::new(self.unary()?)))
            }
            Some(b'+') => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    // right associative, binds tighter than unary minus: -x^2 = -(x^2)
    fn power(&mut self) -> Result<Node> {
        let base = self.primary()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Node::Bin('^', Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Node> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if self.peek() != Some(b')') {
                    return Err(self.err("expected ')'"));
                }
                self.pos += 1;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.ident(),
            Some(_) => Err(self.err("unexpected character")),
            None => Err(self.err("unexpected end of input")),
        }
    }

    fn number(&mut self) -> Result<Node> {
        let start = self.pos;
        while self.pos < self.s.len() && (self.s[self.pos].is_ascii_digit() || self.s[self.pos] == b'.') {
            self.pos += 1;
        }
        if self.pos < self.s.len() && matches!(self.s[self.pos], b'e' | b'E') {
            let save = self.pos;
            self.pos += 1;
            if self.pos < self.s.len() && matches!(self.s[self.pos], b'+' | b'-') {
                self.pos += 1;
            }
            let digits = self.pos;
            while self.pos < self.s.len() && self.s[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if self.pos == digits {
                self.pos = save;
            }
        }
        let text = std::str::from_utf8(&self.s[start..self.pos]).expect("ascii");
        text.parse::<f64>().map(Node::Num).map_err(|_| Error::Expr { pos: start, msg: format!("bad number '{text}'") })
    }

    fn ident(&mut self) -> Result<Node> {
        let start = self.pos;
        while self.pos < self.s.len() && (self.s[self.pos].is_ascii_alphanumeric() || self.s[self.pos] == b'_') {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.s[start..self.pos]).expect("ascii");
        let func = match name {
            "sin" => Some(Func::Sin),
            "cos" => Some(Func::Cos),
            "exp" => Some(Func::Exp),
            _ => None,
        };
        if let Some(f) = func {
            if self.peek() != Some(b'(') {
                return Err(self.err(&format!("expected '(' after {name}")));
            }
            self.pos += 1;
            let arg = self.expr()?;
            if self.peek() != Some(b')') {
                return Err(self.err("expected ')'"));
            }
            self.pos += 1;
            return Ok(Node::Call(f, Box::new(arg)));
        }
        match name {
            "pi" => return Ok(Node::Num(PI)),
            "e" => return Ok(Node::Num(E)),
            _ => {}
        }
        let lookup = if name == "x" { "x1" } else { name };
        self.vars
            .iter()
            .position(|v| *v == lookup)
            .map(Node::Var)
            .ok_or(Error::Expr { pos: start, msg: format!("unknown identifier '{name}'") })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const VARS: &[&str] = &["t", "x1", "x2", "x3"];

    #[test]
    fn precedence_and_functions() {
        let e = Expr::parse("2 + 0.3*sin(x1)", VARS).unwrap();
        assert!((e.eval(&[0.0, PI / 2.0, 0.0, 0.0]) - 2.3).abs() < 1e-15);
        let e = Expr::parse("-x^2", VARS).unwrap();
        assert_eq!(e.eval(&[0.0, 3.0, 0.0, 0.0]), -9.0);
        let e = Expr::parse("2^3^2", VARS).unwrap();
        assert_eq!(e.eval(&[0.0; 4]), 512.0);
        let e = Expr::parse("exp(-x1^2)*t/2", VARS).unwrap();
        assert!((e.eval(&[4.0, 1.0, 0.0, 0.0]) - 2.0 * (-1.0f64).exp()).abs() < 1e-15);
        let e = Expr::parse("1.5e-1 * pi", VARS).unwrap();
        assert!((e.eval(&[0.0; 4]) - 0.15 * PI).abs() < 1e-15);
    }

    #[test]
    fn dependency_tracking() {
        let e = Expr::parse("t^4 + 1", VARS).unwrap();
        assert!(e.independent_of(1));
        assert!(!e.independent_of(0));
    }

    #[test]
    fn rejects_unknown_names() {
        assert!(Expr::parse("log(x)", VARS).is_err());
        assert!(Expr::parse("y + 1", VARS).is_err());
        assert!(Expr::parse("(1 + 2", VARS).is_err());
        assert!(Expr::parse("1 +", VARS).is_err());
        assert!(Expr::parse("1 2", VARS).is_err());
    }
}
