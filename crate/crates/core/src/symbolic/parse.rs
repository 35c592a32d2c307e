//! Recursive-descent parser for the canonical infix expression text.
//!
//! Grammar (whitespace insignificant):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' unary)?
//! atom   := number | 'x' digits | 'c' digits | func '(' expr ')' | '(' expr ')'
//! ```
//!
//! A `-` directly followed by a numeric literal folds into a negative literal.

use super::expr::{BinaryOp, Expr, OdeSystem, UnaryOp};
use crate::error::{Error, Result};

/// Parses one expression over `n_vars` variables named `x0..x{n-1}`.
pub fn parse_expression(text: &str, n_vars: usize) -> Result<Expr> {
    parse_with_offset(text, n_vars, 0, 0)
}

fn parse_with_offset(text: &str, n_vars: usize, var_offset: usize, pos_offset: usize) -> Result<Expr> {
    let mut p = Parser { src: text.as_bytes(), pos: 0, n_vars, var_offset };
    let e = p.expr().map_err(|e| shift(e, pos_offset))?;
    p.skip_ws();
    if p.pos < p.src.len() {
        return Err(shift(p.error("unexpected trailing input"), pos_offset));
    }
    Ok(e)
}

fn shift(e: Error, offset: usize) -> Error {
    match e {
        Error::Parse { pos, msg } => Error::Parse { pos: pos + offset, msg },
        other => other,
    }
}

/// Parses a whole system. Accepts the registry form `e0 ; e1 ; ...` with
/// zero-based variables, and the report form `x1' = e ; x2' = e` with
/// one-based variables. Coefficient slots `c<k>` must be dense.
pub fn parse_system(text: &str) -> Result<OdeSystem> {
    let parts: Vec<(usize, &str)> = split_with_offsets(text, ';');
    let n = parts.len();
    let report_form = parts.iter().all(|(_, p)| derivative_prefix(p).is_some());
    let mut exprs = Vec::with_capacity(n);
    for (i, (offset, part)) in parts.iter().enumerate() {
        let e = if report_form {
            let (lhs_index, rest_at) = derivative_prefix(part).expect("checked above");
            if lhs_index != i + 1 {
                return Err(Error::Parse {
                    pos: *offset,
                    msg: format!("expected x{}' on the left-hand side", i + 1),
                });
            }
            parse_with_offset(&part[rest_at..], n, 1, offset + rest_at)?
        } else {
            parse_with_offset(part, n, 0, *offset)?
        };
        exprs.push(e);
    }
    let sys = OdeSystem::new(exprs);
    let mut slots = sys.const_slots();
    slots.sort_unstable();
    slots.dedup();
    if slots.iter().enumerate().any(|(i, &k)| i != k) {
        return Err(Error::Parse { pos: 0, msg: "constant slots are not dense".into() });
    }
    Ok(sys)
}

fn split_with_offsets(text: &str, sep: char) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, ch) in text.char_indices() {
        if ch == sep {
            out.push((start, &text[start..i]));
            start = i + ch.len_utf8();
        }
    }
    out.push((start, &text[start..]));
    out
}

/// Recognises `x<k>' =` and returns `(k, byte offset after '=')`.
fn derivative_prefix(part: &str) -> Option<(usize, usize)> {
    let rest = part.trim_start().strip_prefix('x')?;
    let digits = rest.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 {
        return None;
    }
    let index: usize = rest[..digits].parse().ok()?;
    let after = rest[digits..].strip_prefix('\'')?;
    let after_trim = after.trim_start();
    let eq = after_trim.strip_prefix('=')?;
    Some((index, part.len() - eq.len()))
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    n_vars: usize,
    var_offset: usize,
}

impl Parser<'_> {
    fn error(&self, msg: &str) -> Error {
        Error::Parse { pos: self.pos, msg: msg.to_string() }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, ch: u8) -> bool {
        if self.peek() == Some(ch) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Some(b'+') => BinaryOp::Add,
                Some(b'-') => BinaryOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::binary(op, lhs, rhs);
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(b'*') => BinaryOp::Mul,
                Some(b'/') => BinaryOp::Div,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::binary(op, lhs, rhs);
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.eat(b'-') {
            if matches!(self.peek(), Some(b'0'..=b'9' | b'.')) {
                let v = self.number()?;
                let lit = Expr::Lit(-v);
                return self.power_tail(lit);
            }
            let inner = self.unary()?;
            return Ok(Expr::unary(UnaryOp::Neg, inner));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        self.power_tail(base)
    }

    fn power_tail(&mut self, base: Expr) -> Result<Expr> {
        if self.eat(b'^') {
            let exponent = self.unary()?;
            // `-2^2` is -(2^2), not (-2)^2.
            if let Expr::Lit(v) = base {
                if v.is_sign_negative() {
                    return Ok(Expr::unary(
                        UnaryOp::Neg,
                        Expr::binary(BinaryOp::Pow, Expr::Lit(-v), exponent),
                    ));
                }
            }
            return Ok(Expr::binary(BinaryOp::Pow, base, exponent));
        }
        Ok(base)
    }

    fn number(&mut self) -> Result<f64> {
        self.skip_ws();
        let start = self.pos;
        let s = self.src;
        let mut i = self.pos;
        while i < s.len() && (s[i].is_ascii_digit() || s[i] == b'.') {
            i += 1;
        }
        if i < s.len() && (s[i] == b'e' || s[i] == b'E') {
            let mut j = i + 1;
            if j < s.len() && (s[j] == b'+' || s[j] == b'-') {
                j += 1;
            }
            if j < s.len() && s[j].is_ascii_digit() {
                while j < s.len() && s[j].is_ascii_digit() {
                    j += 1;
                }
                i = j;
            }
        }
        let text = std::str::from_utf8(&s[start..i]).expect("ascii");
        match text.parse::<f64>() {
            Ok(v) => {
                self.pos = i;
                Ok(v)
            }
            Err(_) => Err(self.error("malformed number")),
        }
    }

    fn index_after(&mut self, prefix_len: usize) -> Option<usize> {
        let s = self.src;
        let start = self.pos + prefix_len;
        let mut i = start;
        while i < s.len() && s[i].is_ascii_digit() {
            i += 1;
        }
        if i == start || (i < s.len() && (s[i].is_ascii_alphanumeric() || s[i] == b'_')) {
            return None;
        }
        let idx = std::str::from_utf8(&s[start..i]).ok()?.parse().ok()?;
        self.pos = i;
        Some(idx)
    }

    fn atom(&mut self) -> Result<Expr> {
        let Some(ch) = self.peek() else {
            return Err(self.error("unexpected end of input"));
        };
        match ch {
            b'(' => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.error("expected `)`"));
                }
                Ok(e)
            }
            b'0'..=b'9' | b'.' => Ok(Expr::Lit(self.number()?)),
            b'x' => {
                let at = self.pos;
                match self.index_after(1) {
                    Some(k) => {
                        if k < self.var_offset || k - self.var_offset >= self.n_vars {
                            return Err(Error::Parse {
                                pos: at,
                                msg: format!("variable x{k} out of range"),
                            });
                        }
                        Ok(Expr::Var(k - self.var_offset))
                    }
                    None => Err(self.error("malformed variable")),
                }
            }
            b'c' if self.src.get(self.pos + 1).is_some_and(u8::is_ascii_digit) => {
                match self.index_after(1) {
                    Some(k) => Ok(Expr::Const(k)),
                    None => Err(self.error("malformed constant slot")),
                }
            }
            b'a'..=b'z' => {
                let start = self.pos;
                while self.pos < self.src.len() && self.src[self.pos].is_ascii_alphabetic() {
                    self.pos += 1;
                }
                let name = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
                let Some(op) = UnaryOp::from_function_name(name) else {
                    return Err(Error::Parse { pos: start, msg: format!("unknown function `{name}`") });
                };
                if !self.eat(b'(') {
                    return Err(self.error("expected `(` after function name"));
                }
                let arg = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.error("expected `)`"));
                }
                Ok(Expr::unary(op, arg))
            }
            _ => Err(self.error("unexpected character")),
        }
    }
}
