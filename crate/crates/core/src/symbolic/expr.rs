//! Expression trees and ODE systems built from them.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UnaryOp {
    Neg,
    Sin,
    Cos,
    Exp,
    Log,
}

impl UnaryOp {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Sin => x.sin(),
            UnaryOp::Cos => x.cos(),
            UnaryOp::Exp => x.exp(),
            // ln of a negative number is NaN and ln(0) is -inf; both are kept.
            UnaryOp::Log => x.ln(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "-",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
        }
    }

    pub(crate) fn from_function_name(name: &str) -> Option<Self> {
        match name {
            "sin" => Some(UnaryOp::Sin),
            "cos" => Some(UnaryOp::Cos),
            "exp" => Some(UnaryOp::Exp),
            "log" | "ln" => Some(UnaryOp::Log),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinaryOp {
    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
            BinaryOp::Pow => a.powf(b),
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
            BinaryOp::Pow => "^",
        }
    }

    fn precedence(self) -> u8 {
        match self {
            BinaryOp::Add | BinaryOp::Sub => 1,
            BinaryOp::Mul | BinaryOp::Div => 2,
            BinaryOp::Pow => 4,
        }
    }
}

/// A symbolic right-hand side `f_i(x, c)`.
///
/// `Const` nodes are coefficient slots whose values live in the owning
/// [`OdeSystem`]; `Lit` nodes are fixed numeric literals (registry systems).
/// `Hole` is an unexpanded nonterminal of the given dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    Var(usize),
    Const(usize),
    Lit(f64),
    Hole(usize),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn unary(op: UnaryOp, e: Expr) -> Self {
        Expr::Unary(op, Box::new(e))
    }

    pub fn binary(op: BinaryOp, a: Expr, b: Expr) -> Self {
        Expr::Binary(op, Box::new(a), Box::new(b))
    }

    pub fn is_complete(&self) -> bool {
        match self {
            Expr::Hole(_) => false,
            Expr::Var(_) | Expr::Const(_) | Expr::Lit(_) => true,
            Expr::Unary(_, e) => e.is_complete(),
            Expr::Binary(_, a, b) => a.is_complete() && b.is_complete(),
        }
    }

    pub fn node_count(&self) -> usize {
        match self {
            Expr::Var(_) | Expr::Const(_) | Expr::Lit(_) | Expr::Hole(_) => 1,
            Expr::Unary(_, e) => 1 + e.node_count(),
            Expr::Binary(_, a, b) => 1 + a.node_count() + b.node_count(),
        }
    }

    /// Coefficient slots in left-to-right (preorder) order of appearance.
    pub fn const_slots(&self, out: &mut Vec<usize>) {
        match self {
            Expr::Const(k) => out.push(*k),
            Expr::Var(_) | Expr::Lit(_) | Expr::Hole(_) => {}
            Expr::Unary(_, e) => e.const_slots(out),
            Expr::Binary(_, a, b) => {
                a.const_slots(out);
                b.const_slots(out);
            }
        }
    }

    /// Replaces the leftmost hole (preorder) with `replacement`.
    /// Returns `false` when the tree has no hole.
    pub(crate) fn fill_leftmost_hole(&mut self, replacement: &mut Option<Expr>) -> bool {
        match self {
            Expr::Hole(_) => {
                if let Some(r) = replacement.take() {
                    *self = r;
                    true
                } else {
                    false
                }
            }
            Expr::Var(_) | Expr::Const(_) | Expr::Lit(_) => false,
            Expr::Unary(_, e) => e.fill_leftmost_hole(replacement),
            Expr::Binary(_, a, b) => {
                a.fill_leftmost_hole(replacement) || b.fill_leftmost_hole(replacement)
            }
        }
    }

    /// Recursive evaluation. Slower than [`crate::symbolic::CompiledSystem`];
    /// used as a reference path in tests and for one-off evaluations.
    pub fn eval(&self, state: &[f64], coeffs: &[f64]) -> f64 {
        match self {
            Expr::Var(i) => state[*i],
            Expr::Const(k) => coeffs[*k],
            Expr::Lit(v) => *v,
            Expr::Hole(_) => f64::NAN,
            Expr::Unary(op, e) => op.apply(e.eval(state, coeffs)),
            Expr::Binary(op, a, b) => op.apply(a.eval(state, coeffs), b.eval(state, coeffs)),
        }
    }

    pub fn render(&self, coeffs: Option<&[f64]>, naming: VarNaming) -> String {
        let mut out = String::new();
        self.write(&mut out, coeffs, naming);
        out
    }

    fn precedence(&self, coeffs: Option<&[f64]>) -> u8 {
        match self {
            Expr::Lit(v) => literal_precedence(*v),
            Expr::Const(k) => match coeffs {
                Some(c) => literal_precedence(c[*k]),
                None => 5,
            },
            Expr::Var(_) | Expr::Hole(_) => 5,
            Expr::Unary(UnaryOp::Neg, _) => 3,
            Expr::Unary(_, _) => 5,
            Expr::Binary(op, _, _) => op.precedence(),
        }
    }

    fn write_child(&self, out: &mut String, coeffs: Option<&[f64]>, naming: VarNaming, min: u8) {
        if self.precedence(coeffs) < min {
            out.push('(');
            self.write(out, coeffs, naming);
            out.push(')');
        } else {
            self.write(out, coeffs, naming);
        }
    }

    fn write(&self, out: &mut String, coeffs: Option<&[f64]>, naming: VarNaming) {
        match self {
            Expr::Var(i) => {
                let _ = write!(out, "x{}", i + naming.offset());
            }
            Expr::Const(k) => match coeffs {
                Some(c) => write_number(out, c[*k]),
                None => {
                    let _ = write!(out, "c{k}");
                }
            },
            Expr::Lit(v) => write_number(out, *v),
            Expr::Hole(d) => {
                let _ = write!(out, "<A{}>", d + 1);
            }
            Expr::Unary(UnaryOp::Neg, e) => {
                out.push('-');
                // A bare positive literal after '-' would be folded back into a
                // negative literal by the parser, so it keeps its parentheses.
                let min = if matches!(**e, Expr::Lit(_) | Expr::Const(_)) { 6 } else { 4 };
                e.write_child(out, coeffs, naming, min);
            }
            Expr::Unary(op, e) => {
                out.push_str(op.name());
                out.push('(');
                e.write(out, coeffs, naming);
                out.push(')');
            }
            Expr::Binary(op, a, b) => {
                let p = op.precedence();
                match op {
                    BinaryOp::Pow => {
                        a.write_child(out, coeffs, naming, 5);
                        out.push('^');
                        b.write_child(out, coeffs, naming, 3);
                    }
                    BinaryOp::Mul | BinaryOp::Div => {
                        a.write_child(out, coeffs, naming, p);
                        out.push_str(op.symbol());
                        b.write_child(out, coeffs, naming, p + 1);
                    }
                    BinaryOp::Add | BinaryOp::Sub => {
                        a.write_child(out, coeffs, naming, p);
                        out.push(' ');
                        out.push_str(op.symbol());
                        out.push(' ');
                        b.write_child(out, coeffs, naming, p + 1);
                    }
                }
            }
        }
    }
}

fn literal_precedence(v: f64) -> u8 {
    if v.is_sign_negative() {
        3
    } else {
        5
    }
}

fn write_number(out: &mut String, v: f64) {
    // `Display` for f64 prints the shortest representation that round-trips.
    let _ = write!(out, "{v}");
}

/// How variable indices are printed: registry files use `x0..x{n-1}`,
/// reports use `x1..xn`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarNaming {
    ZeroBased,
    OneBased,
}

impl VarNaming {
    fn offset(self) -> usize {
        match self {
            VarNaming::ZeroBased => 0,
            VarNaming::OneBased => 1,
        }
    }
}

/// A candidate system `(f_1, ..., f_n)` together with its coefficient vector.
///
/// `coefficients` is empty until the skeleton has been fitted (or is a
/// constant-free system).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdeSystem {
    pub exprs: Vec<Expr>,
    pub n_constants: usize,
    pub coefficients: Vec<f64>,
}

impl OdeSystem {
    pub fn new(exprs: Vec<Expr>) -> Self {
        let mut slots = Vec::new();
        for e in &exprs {
            e.const_slots(&mut slots);
        }
        let n_constants = slots.iter().map(|k| k + 1).max().unwrap_or(0);
        OdeSystem { exprs, n_constants, coefficients: Vec::new() }
    }

    pub fn with_coefficients(mut self, coefficients: Vec<f64>) -> Self {
        self.coefficients = coefficients;
        self
    }

    pub fn n_vars(&self) -> usize {
        self.exprs.len()
    }

    pub fn is_complete(&self) -> bool {
        self.exprs.iter().all(Expr::is_complete)
    }

    pub fn is_fitted(&self) -> bool {
        self.coefficients.len() == self.n_constants
    }

    /// Constant slots in order of appearance across all dimensions.
    pub fn const_slots(&self) -> Vec<usize> {
        let mut slots = Vec::new();
        for e in &self.exprs {
            e.const_slots(&mut slots);
        }
        slots
    }

    fn coeffs_for_render(&self) -> Option<&[f64]> {
        self.is_fitted().then_some(self.coefficients.as_slice())
    }

    /// Report form: `x1' = x2 ; x2' = -0.9*sin(x1)`.
    pub fn render(&self) -> String {
        let coeffs = self.coeffs_for_render();
        self.exprs
            .iter()
            .enumerate()
            .map(|(i, e)| format!("x{}' = {}", i + 1, e.render(coeffs, VarNaming::OneBased)))
            .collect::<Vec<_>>()
            .join(" ; ")
    }

    /// Registry form: `x1 ; -0.9*sin(x0)`.
    pub fn render_registry(&self) -> String {
        let coeffs = self.coeffs_for_render();
        self.exprs
            .iter()
            .map(|e| e.render(coeffs, VarNaming::ZeroBased))
            .collect::<Vec<_>>()
            .join(" ; ")
    }

    /// Skeleton text with slots printed as `c<k>`, ignoring fitted values.
    pub fn render_skeleton(&self) -> String {
        self.exprs
            .iter()
            .map(|e| e.render(None, VarNaming::ZeroBased))
            .collect::<Vec<_>>()
            .join(" ; ")
    }
}
