//! Expression grammar, rule-sequence expansion, parsing, rendering and
//! numeric evaluation of candidate ODE systems.

mod compile;
mod expr;
mod grammar;
mod parse;

pub use compile::{evaluate, CompiledSystem};
pub use expr::{BinaryOp, Expr, OdeSystem, UnaryOp, VarNaming};
pub use grammar::{
    ExpansionState, Grammar, Operator, ProductionRule, RuleKind, RuleSequence, SymbolId,
};
pub use parse::{parse_expression, parse_system};

/// Candidates with more open constants than this are not fitted.
pub const MAX_CONSTANTS: usize = 20;

/// Converts a decoder sequence into a (possibly incomplete) system.
pub fn sequence_to_system(grammar: &Grammar, seq: &RuleSequence) -> OdeSystem {
    grammar.to_system(seq)
}

/// Report rendering, `x1' = ... ; x2' = ...`.
pub fn render(system: &OdeSystem) -> String {
    system.render()
}
