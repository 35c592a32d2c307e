//! Postfix compilation of complete systems for the integrator's inner loop.

use super::expr::{BinaryOp, Expr, OdeSystem, UnaryOp};
use crate::error::{Error, Result};

const MAX_STACK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Instr {
    Var(usize),
    Const(usize),
    Lit(f64),
    Unary(UnaryOp),
    Binary(BinaryOp),
}

/// A complete system lowered to one postfix program per dimension.
#[derive(Debug, Clone)]
pub struct CompiledSystem {
    programs: Vec<Vec<Instr>>,
    n_constants: usize,
}

impl CompiledSystem {
    pub fn new(system: &OdeSystem) -> Result<Self> {
        if !system.is_complete() {
            return Err(Error::usage("cannot evaluate an incomplete system"));
        }
        let mut programs = Vec::with_capacity(system.n_vars());
        for e in &system.exprs {
            let mut prog = Vec::new();
            let depth = lower(e, &mut prog);
            if depth > MAX_STACK {
                return Err(Error::usage(format!("expression nesting {depth} exceeds {MAX_STACK}")));
            }
            programs.push(prog);
        }
        Ok(CompiledSystem { programs, n_constants: system.n_constants })
    }

    pub fn n_vars(&self) -> usize {
        self.programs.len()
    }

    pub fn n_constants(&self) -> usize {
        self.n_constants
    }

    /// Writes `f(state, coeffs)` into `out`. Non-finite intermediate values
    /// propagate into the result.
    #[inline]
    pub fn eval_into(&self, state: &[f64], coeffs: &[f64], out: &mut [f64]) {
        let mut stack = [0.0f64; MAX_STACK];
        for (prog, slot) in self.programs.iter().zip(out.iter_mut()) {
            let mut sp = 0usize;
            for ins in prog {
                match *ins {
                    Instr::Var(i) => {
                        stack[sp] = state[i];
                        sp += 1;
                    }
                    Instr::Const(k) => {
                        stack[sp] = coeffs[k];
                        sp += 1;
                    }
                    Instr::Lit(v) => {
                        stack[sp] = v;
                        sp += 1;
                    }
                    Instr::Unary(op) => stack[sp - 1] = op.apply(stack[sp - 1]),
                    Instr::Binary(op) => {
                        sp -= 1;
                        stack[sp - 1] = op.apply(stack[sp - 1], stack[sp]);
                    }
                }
            }
            *slot = stack[0];
        }
    }

    pub fn eval(&self, state: &[f64], coeffs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.programs.len()];
        self.eval_into(state, coeffs, &mut out);
        out
    }
}

/// Appends the postfix form of `e` and returns the stack depth it needs.
fn lower(e: &Expr, out: &mut Vec<Instr>) -> usize {
    match e {
        Expr::Var(i) => {
            out.push(Instr::Var(*i));
            1
        }
        Expr::Const(k) => {
            out.push(Instr::Const(*k));
            1
        }
        Expr::Lit(v) => {
            out.push(Instr::Lit(*v));
            1
        }
        Expr::Hole(_) => unreachable!("complete systems have no holes"),
        Expr::Unary(op, a) => {
            let d = lower(a, out);
            out.push(Instr::Unary(*op));
            d
        }
        Expr::Binary(op, a, b) => {
            let da = lower(a, out);
            let db = lower(b, out);
            out.push(Instr::Binary(*op));
            da.max(db + 1)
        }
    }
}

/// Evaluates `system` at `state` with coefficients `coeffs`.
pub fn evaluate(system: &OdeSystem, state: &[f64], coeffs: &[f64]) -> Result<Vec<f64>> {
    if state.len() != system.n_vars() {
        return Err(Error::usage(format!(
            "state has {} entries, system has {} variables",
            state.len(),
            system.n_vars()
        )));
    }
    if coeffs.len() != system.n_constants {
        return Err(Error::usage(format!(
            "{} coefficients given, system has {} slots",
            coeffs.len(),
            system.n_constants
        )));
    }
    Ok(CompiledSystem::new(system)?.eval(state, coeffs))
}
