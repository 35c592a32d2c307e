//! Context-free grammar whose production rules are the decoder vocabulary.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::expr::{BinaryOp, Expr, OdeSystem, UnaryOp};
use crate::error::{Error, Result};

/// Operators that may appear in a grammar. Terminals (variables and
/// `const`) are always present and are not listed here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Operator {
    Add,
    Sub,
    Mul,
    Div,
    Sin,
    Cos,
    Exp,
    Log,
}

impl Operator {
    pub const ALL: [Operator; 8] = [
        Operator::Add,
        Operator::Sub,
        Operator::Mul,
        Operator::Div,
        Operator::Sin,
        Operator::Cos,
        Operator::Exp,
        Operator::Log,
    ];

    pub fn parse(name: &str) -> Result<Self> {
        let op = match name.trim() {
            "+" | "add" => Operator::Add,
            "-" | "sub" => Operator::Sub,
            "*" | "×" | "mul" => Operator::Mul,
            "/" | "÷" | "div" => Operator::Div,
            "sin" => Operator::Sin,
            "cos" => Operator::Cos,
            "exp" => Operator::Exp,
            "log" => Operator::Log,
            other => return Err(Error::config(format!("unknown operator `{other}`"))),
        };
        Ok(op)
    }

    /// Parses a comma separated list such as `"+,*,sin"`.
    pub fn parse_list(list: &str) -> Result<Vec<Self>> {
        list.split(',').filter(|s| !s.trim().is_empty()).map(Operator::parse).collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            Operator::Add => "+",
            Operator::Sub => "-",
            Operator::Mul => "*",
            Operator::Div => "/",
            Operator::Sin => "sin",
            Operator::Cos => "cos",
            Operator::Exp => "exp",
            Operator::Log => "log",
        }
    }

    fn kind(self) -> RuleKind {
        match self {
            Operator::Add => RuleKind::Binary(BinaryOp::Add),
            Operator::Sub => RuleKind::Binary(BinaryOp::Sub),
            Operator::Mul => RuleKind::Binary(BinaryOp::Mul),
            Operator::Div => RuleKind::Binary(BinaryOp::Div),
            Operator::Sin => RuleKind::Unary(UnaryOp::Sin),
            Operator::Cos => RuleKind::Unary(UnaryOp::Cos),
            Operator::Exp => RuleKind::Unary(UnaryOp::Exp),
            Operator::Log => RuleKind::Unary(UnaryOp::Log),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SymbolId {
    NonTerminal(usize),
    Variable(usize),
    Constant,
    Token(&'static str),
}

impl fmt::Display for SymbolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SymbolId::NonTerminal(i) => write!(f, "A{}", i + 1),
            SymbolId::Variable(j) => write!(f, "x{}", j + 1),
            SymbolId::Constant => f.write_str("const"),
            SymbolId::Token(t) => f.write_str(t),
        }
    }
}

/// What applying a rule does to the hole it expands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RuleKind {
    Binary(BinaryOp),
    Unary(UnaryOp),
    Variable(usize),
    Constant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProductionRule {
    pub lhs: usize,
    pub rhs: Vec<SymbolId>,
    pub kind: RuleKind,
}

impl ProductionRule {
    fn new(lhs: usize, kind: RuleKind) -> Self {
        let a = SymbolId::NonTerminal(lhs);
        let rhs = match kind {
            RuleKind::Binary(op) => match op {
                // Matches the listing `A -> (A + A)`, `A -> A * A`.
                BinaryOp::Add | BinaryOp::Sub => vec![
                    SymbolId::Token("("),
                    a,
                    SymbolId::Token(op.symbol()),
                    a,
                    SymbolId::Token(")"),
                ],
                _ => vec![a, SymbolId::Token(op.symbol()), a],
            },
            RuleKind::Unary(op) => {
                vec![SymbolId::Token(op.name()), SymbolId::Token("("), a, SymbolId::Token(")")]
            }
            RuleKind::Variable(j) => vec![SymbolId::Variable(j)],
            RuleKind::Constant => vec![SymbolId::Constant],
        };
        ProductionRule { lhs, rhs, kind }
    }

    /// Number of nonterminals on the right-hand side.
    pub fn arity(&self) -> usize {
        self.rhs.iter().filter(|s| matches!(s, SymbolId::NonTerminal(_))).count()
    }

    pub fn display(&self) -> String {
        let a = SymbolId::NonTerminal(self.lhs);
        let rhs = match self.kind {
            RuleKind::Binary(op @ (BinaryOp::Add | BinaryOp::Sub)) => {
                format!("({a} {} {a})", op.symbol())
            }
            RuleKind::Binary(op) => format!("{a} {} {a}", op.symbol()),
            RuleKind::Unary(op) => format!("{}({a})", op.name()),
            RuleKind::Variable(j) => SymbolId::Variable(j).to_string(),
            RuleKind::Constant => SymbolId::Constant.to_string(),
        };
        format!("{a} -> {rhs}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grammar {
    n_vars: usize,
    operators: Vec<Operator>,
    rules: Vec<ProductionRule>,
}

impl Grammar {
    /// Builds the rule table: dimensions outer, then binary operators, unary
    /// operators, variables `x1..xn`, and `const`, all in fixed order.
    pub fn build(operators: &[Operator], n_vars: usize) -> Result<Self> {
        if operators.is_empty() {
            return Err(Error::config("operator set is empty"));
        }
        if n_vars == 0 {
            return Err(Error::config("system dimension must be at least 1"));
        }
        let mut ops = operators.to_vec();
        ops.sort();
        ops.dedup();

        let mut rules = Vec::new();
        for dim in 0..n_vars {
            for op in ops.iter().filter(|o| matches!(o.kind(), RuleKind::Binary(_))) {
                rules.push(ProductionRule::new(dim, op.kind()));
            }
            for op in ops.iter().filter(|o| matches!(o.kind(), RuleKind::Unary(_))) {
                rules.push(ProductionRule::new(dim, op.kind()));
            }
            for j in 0..n_vars {
                rules.push(ProductionRule::new(dim, RuleKind::Variable(j)));
            }
            rules.push(ProductionRule::new(dim, RuleKind::Constant));
        }
        Ok(Grammar { n_vars, operators: ops, rules })
    }

    /// A grammar from an explicit rule list. Used for restricted vocabularies;
    /// enforces the same invariants as [`Grammar::build`].
    pub fn from_rules(n_vars: usize, rules: Vec<(usize, RuleKind)>) -> Result<Self> {
        if n_vars == 0 || rules.is_empty() {
            return Err(Error::config("grammar needs at least one dimension and one rule"));
        }
        let mut out: Vec<ProductionRule> = Vec::with_capacity(rules.len());
        for (lhs, kind) in rules {
            if lhs >= n_vars {
                return Err(Error::config(format!("rule lhs A{} out of range", lhs + 1)));
            }
            if let RuleKind::Variable(j) = kind {
                if j >= n_vars {
                    return Err(Error::config(format!("variable x{} out of range", j + 1)));
                }
            }
            if out.iter().any(|r| r.lhs == lhs && r.kind == kind) {
                return Err(Error::config("duplicate production rule"));
            }
            out.push(ProductionRule::new(lhs, kind));
        }
        let mut operators: Vec<Operator> = Operator::ALL
            .into_iter()
            .filter(|op| out.iter().any(|r| r.kind == op.kind()))
            .collect();
        operators.dedup();
        Ok(Grammar { n_vars, operators, rules: out })
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn operators(&self) -> &[Operator] {
        &self.operators
    }

    pub fn rules(&self) -> &[ProductionRule] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Stable identifier of the vocabulary (FNV-1a over rule displays).
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for r in &self.rules {
            for b in r.display().bytes().chain(std::iter::once(b'\n')) {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        format!("{h:016x}")
    }

    pub fn rule_index(&self, lhs: usize, kind: RuleKind) -> Option<usize> {
        self.rules.iter().position(|r| r.lhs == lhs && r.kind == kind)
    }

    pub fn validate(&self, seq: &RuleSequence) -> Result<()> {
        match seq.0.iter().find(|&&id| id >= self.rules.len()) {
            Some(id) => Err(Error::usage(format!(
                "rule id {id} outside vocabulary of {} rules",
                self.rules.len()
            ))),
            None => Ok(()),
        }
    }

    /// Expands `A_1, ..., A_n` by applying each rule to the leftmost open
    /// nonterminal of its dimension. Rules whose dimension has no open
    /// nonterminal left are skipped.
    pub fn to_system(&self, seq: &RuleSequence) -> OdeSystem {
        let mut exprs: Vec<Expr> = (0..self.n_vars).map(Expr::Hole).collect();
        let mut open = vec![1usize; self.n_vars];
        let mut next_slot = 0;
        for &id in seq.ids() {
            let Some(rule) = self.rules.get(id) else { continue };
            let dim = rule.lhs;
            if open[dim] == 0 {
                continue;
            }
            let node = match rule.kind {
                RuleKind::Binary(op) => Expr::binary(op, Expr::Hole(dim), Expr::Hole(dim)),
                RuleKind::Unary(op) => Expr::unary(op, Expr::Hole(dim)),
                RuleKind::Variable(j) => Expr::Var(j),
                RuleKind::Constant => {
                    next_slot += 1;
                    Expr::Const(next_slot - 1)
                }
            };
            let filled = exprs[dim].fill_leftmost_hole(&mut Some(node));
            debug_assert!(filled);
            open[dim] = open[dim] + rule.arity() - 1;
        }
        OdeSystem::new(exprs)
    }
}

/// Tracks open nonterminals per dimension while a sequence is being sampled,
/// without materialising the tree.
#[derive(Debug, Clone)]
pub struct ExpansionState {
    open: Vec<usize>,
}

impl ExpansionState {
    pub fn new(n_vars: usize) -> Self {
        ExpansionState { open: vec![1; n_vars] }
    }

    pub fn apply(&mut self, rule: &ProductionRule) {
        let slot = &mut self.open[rule.lhs];
        if *slot > 0 {
            *slot = *slot + rule.arity() - 1;
        }
    }

    pub fn is_complete(&self) -> bool {
        self.open.iter().all(|&o| o == 0)
    }
}

/// Ordered rule identifiers emitted by the decoder.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct RuleSequence(pub Vec<usize>);

impl RuleSequence {
    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ops(list: &str) -> Vec<Operator> {
        Operator::parse_list(list).unwrap()
    }

    #[test]
    fn rule_counts() {
        assert_eq!(Grammar::build(&ops("+,-,*,/"), 2).unwrap().len(), 14);
        assert_eq!(Grammar::build(&ops("+"), 1).unwrap().len(), 3);
        assert_eq!(Grammar::build(&ops("+,sin"), 1).unwrap().len(), 4);
    }

    #[test]
    fn listing_order_matches_vocabulary_construction() {
        let g = Grammar::build(&ops("/,*,-,+"), 2).unwrap();
        let shown: Vec<String> = g.rules().iter().map(ProductionRule::display).collect();
        assert_eq!(
            shown,
            [
                "A1 -> (A1 + A1)",
                "A1 -> (A1 - A1)",
                "A1 -> A1 * A1",
                "A1 -> A1 / A1",
                "A1 -> x1",
                "A1 -> x2",
                "A1 -> const",
                "A2 -> (A2 + A2)",
                "A2 -> (A2 - A2)",
                "A2 -> A2 * A2",
                "A2 -> A2 / A2",
                "A2 -> x1",
                "A2 -> x2",
                "A2 -> const",
            ]
        );
        assert!(g.rules().iter().all(|r| r.rhs.iter().all(|s| match s {
            SymbolId::NonTerminal(i) => *i == r.lhs,
            _ => true,
        })));
    }

    #[test]
    fn unknown_operator_is_config_error() {
        assert!(matches!(Operator::parse("tanh"), Err(Error::Config(_))));
        assert!(Grammar::build(&[], 1).is_err());
    }

    #[test]
    fn unary_rule_display() {
        let g = Grammar::build(&ops("sin"), 1).unwrap();
        assert_eq!(g.rules()[0].display(), "A1 -> sin(A1)");
        assert_eq!(g.rules()[0].arity(), 1);
    }

    #[test]
    fn single_const_expansion() {
        let g = Grammar::build(&ops("+"), 1).unwrap();
        let c = g.rule_index(0, RuleKind::Constant).unwrap();
        let sys = g.to_system(&RuleSequence(vec![c]));
        assert!(sys.is_complete());
        assert_eq!(sys.exprs, vec![Expr::Const(0)]);
        assert_eq!(sys.n_constants, 1);
    }

    #[test]
    fn lone_binary_rule_is_incomplete() {
        let g = Grammar::build(&ops("+"), 1).unwrap();
        let sys = g.to_system(&RuleSequence(vec![0]));
        assert!(!sys.is_complete());
    }

    #[test]
    fn fingerprint_is_stable_and_sensitive() {
        let a = Grammar::build(&ops("+,*"), 1).unwrap();
        let b = Grammar::build(&ops("*,+"), 1).unwrap();
        let c = Grammar::build(&ops("+,-"), 1).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }
}
