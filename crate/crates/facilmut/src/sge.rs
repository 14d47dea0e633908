//! Structured genotype representation and its translation to expression
//! trees: one codon list per grammar non-terminal, leftmost expansion under a
//! depth budget, per-non-terminal mutation rates, and list-granular crossover.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use thiserror::Error;

use crate::grammar::{Grammar, Symbol};

/// One codon list per non-terminal, parallel to `Grammar::nonterminals`.
/// Codon values are production indices, always in range for their list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Genotype {
    pub codons: Vec<Vec<usize>>,
}

impl Genotype {
    pub fn empty(grammar: &Grammar) -> Genotype {
        Genotype { codons: vec![Vec::new(); grammar.len()] }
    }

    pub fn is_valid_for(&self, grammar: &Grammar) -> bool {
        self.codons.len() == grammar.len()
            && self.codons.iter().enumerate().all(|(i, list)| {
                let n = grammar.nt(i).productions.len();
                list.iter().all(|&c| c < n)
            })
    }

    /// Name-keyed view used by the JSON artifact format.
    pub fn to_named(&self, grammar: &Grammar) -> BTreeMap<String, Vec<usize>> {
        self.codons
            .iter()
            .enumerate()
            .map(|(i, l)| (grammar.nt(i).name.clone(), l.clone()))
            .collect()
    }

    pub fn from_named(
        named: &BTreeMap<String, Vec<usize>>,
        grammar: &Grammar,
    ) -> Option<Genotype> {
        let mut codons = vec![Vec::new(); grammar.len()];
        for (name, list) in named {
            let idx = grammar.index_of(name)?;
            codons[idx] = list.clone();
        }
        let g = Genotype { codons };
        g.is_valid_for(grammar).then_some(g)
    }
}

/// Fully terminal expression tree. Productions shaped `lhs op rhs` (three
/// children, operator leaf in the middle) reduce to `Binary`; single-child
/// chains collapse; anything else is kept as an uninterpreted sequence so
/// mapping stays total for arbitrary grammars.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExprNode {
    Leaf(String),
    Binary { op: char, left: Box<ExprNode>, right: Box<ExprNode> },
    Seq(Vec<ExprNode>),
}

impl ExprNode {
    pub fn contains_leaf(&self, token: &str) -> bool {
        match self {
            ExprNode::Leaf(t) => t == token,
            ExprNode::Binary { left, right, .. } => {
                left.contains_leaf(token) || right.contains_leaf(token)
            }
            ExprNode::Seq(children) => children.iter().any(|c| c.contains_leaf(token)),
        }
    }
}

impl fmt::Display for ExprNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExprNode::Leaf(t) => f.write_str(t),
            ExprNode::Binary { op, left, right } => write!(f, "({left} {op} {right})"),
            ExprNode::Seq(children) => {
                f.write_str("(")?;
                for (i, c) in children.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" ")?;
                    }
                    write!(f, "{c}")?;
                }
                f.write_str(")")
            }
        }
    }
}

/// Deterministic fully parenthesized rendering; equality of these strings is
/// the behavioral identity used by the archive. No algebraic normalization.
pub fn canonicalize(root: &ExprNode) -> String {
    root.to_string()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Phenotype {
    pub root: ExprNode,
    pub canonical: String,
}

impl Phenotype {
    pub fn new(root: ExprNode) -> Phenotype {
        let canonical = canonicalize(&root);
        Phenotype { root, canonical }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappingOutcome {
    pub phenotype: Phenotype,
    /// Codons read per non-terminal (including freshly appended ones).
    pub consumed: Vec<usize>,
    /// Codons appended per non-terminal because its list ran out.
    pub appended: Vec<usize>,
    /// Deepest node of the derivation tree, root at depth 1.
    pub depth_used: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MapError {
    #[error("max depth {max_depth} is below the grammar's minimal derivation depth {required}")]
    DepthTooSmall { max_depth: usize, required: usize },
    #[error("genotype shape does not match the grammar")]
    InvalidGenotype,
}

/// Leftmost derivation of `genotype` under `grammar`, extending the genotype
/// in place when a codon list runs out (the appended codon is drawn uniformly
/// from the depth-feasible productions). A codon selecting a production too
/// deep for the remaining budget is remapped by modulus into the feasible
/// subset, kept in original production order.
pub fn map(
    grammar: &Grammar,
    genotype: &mut Genotype,
    max_depth: usize,
    rng: &mut impl Rng,
) -> Result<MappingOutcome, MapError> {
    let required = grammar.start().min_depth;
    if max_depth < required {
        return Err(MapError::DepthTooSmall { max_depth, required });
    }
    if !genotype.is_valid_for(grammar) {
        return Err(MapError::InvalidGenotype);
    }
    let mut m = Mapper {
        grammar,
        genotype,
        pos: vec![0; grammar.len()],
        appended: vec![0; grammar.len()],
        max_depth,
        depth_used: 0,
    };
    let root = m.expand(grammar.start_index(), 0, rng);
    let consumed = m.pos;
    let appended = m.appended;
    let depth_used = m.depth_used;
    Ok(MappingOutcome { phenotype: Phenotype::new(root), consumed, appended, depth_used })
}

struct Mapper<'a> {
    grammar: &'a Grammar,
    genotype: &'a mut Genotype,
    pos: Vec<usize>,
    appended: Vec<usize>,
    max_depth: usize,
    depth_used: usize,
}

impl Mapper<'_> {
    fn expand(&mut self, nt_idx: usize, depth: usize, rng: &mut impl Rng) -> ExprNode {
        self.depth_used = self.depth_used.max(depth + 1);
        let budget = self.max_depth - depth;
        let nt = self.grammar.nt(nt_idx);

        let codon = match self.genotype.codons[nt_idx].get(self.pos[nt_idx]) {
            Some(&c) => c,
            None => {
                let feasible: Vec<usize> = (0..nt.productions.len())
                    .filter(|&p| nt.productions[p].min_depth <= budget)
                    .collect();
                // Budget bookkeeping guarantees a feasible production exists
                // whenever the root check passed.
                assert!(!feasible.is_empty(), "no feasible production for <{}>", nt.name);
                let c = feasible[rng.random_range(0..feasible.len())];
                self.genotype.codons[nt_idx].push(c);
                self.appended[nt_idx] += 1;
                c
            }
        };
        self.pos[nt_idx] += 1;

        let prod_idx = if nt.productions[codon].min_depth <= budget {
            codon
        } else {
            let feasible: Vec<usize> = (0..nt.productions.len())
                .filter(|&p| nt.productions[p].min_depth <= budget)
                .collect();
            assert!(!feasible.is_empty(), "no feasible production for <{}>", nt.name);
            feasible[codon % feasible.len()]
        };

        let symbols = self.grammar.nt(nt_idx).productions[prod_idx].symbols.clone();
        let mut children = Vec::with_capacity(symbols.len());
        for s in &symbols {
            match s {
                Symbol::Terminal(t) => children.push(ExprNode::Leaf(t.clone())),
                Symbol::NonTerminal(j) => children.push(self.expand(*j, depth + 1, rng)),
            }
        }
        reduce(children)
    }
}

fn reduce(mut children: Vec<ExprNode>) -> ExprNode {
    match children.len() {
        1 => children.pop().unwrap(),
        3 => {
            let is_op = matches!(
                &children[1],
                ExprNode::Leaf(t) if matches!(t.as_str(), "+" | "-" | "*" | "/")
            );
            if is_op {
                let right = children.pop().unwrap();
                let op_leaf = children.pop().unwrap();
                let left = children.pop().unwrap();
                let op = match op_leaf {
                    ExprNode::Leaf(t) => t.chars().next().unwrap(),
                    _ => unreachable!(),
                };
                ExprNode::Binary { op, left: Box::new(left), right: Box::new(right) }
            } else {
                ExprNode::Seq(children)
            }
        }
        _ => ExprNode::Seq(children),
    }
}

/// Random individual: a depth-respecting random derivation recorded as
/// codons. Mapping the result reproduces the derivation without appends.
pub fn random_genotype(
    grammar: &Grammar,
    max_depth: usize,
    rng: &mut impl Rng,
) -> Result<Genotype, MapError> {
    let mut g = Genotype::empty(grammar);
    map(grammar, &mut g, max_depth, rng)?;
    Ok(g)
}

/// Per-non-terminal mutation probabilities. Unlisted names fall back to
/// `default_rate`; a homogeneous policy is just an empty table.
#[derive(Debug, Clone, PartialEq)]
pub struct MutationPolicy {
    rates: BTreeMap<String, f64>,
    default_rate: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("mutation rate {rate} for {name} is outside [0, 1]")]
    RateOutOfRange { name: String, rate: f64 },
}

impl MutationPolicy {
    pub fn new(
        rates: BTreeMap<String, f64>,
        default_rate: f64,
    ) -> Result<MutationPolicy, PolicyError> {
        for (name, &rate) in rates.iter().chain(std::iter::once((
            &"default".to_string(),
            &default_rate,
        ))) {
            if !(0.0..=1.0).contains(&rate) || rate.is_nan() {
                return Err(PolicyError::RateOutOfRange { name: name.clone(), rate });
            }
        }
        Ok(MutationPolicy { rates, default_rate })
    }

    pub fn homogeneous(rate: f64) -> MutationPolicy {
        MutationPolicy::new(BTreeMap::new(), rate).expect("rate in [0,1]")
    }

    pub fn rate_for(&self, nonterminal: &str) -> f64 {
        self.rates.get(nonterminal).copied().unwrap_or(self.default_rate)
    }

    pub fn rates(&self) -> &BTreeMap<String, f64> {
        &self.rates
    }

    pub fn default_rate(&self) -> f64 {
        self.default_rate
    }
}

/// Per-codon point mutation over the actively consumed prefix of each list.
/// A fired mutation redraws uniformly among the *other* in-range values, so
/// it always changes the codon; single-production lists and inactive tail
/// codons are never touched. Returns a new genotype.
pub fn mutate(
    genotype: &Genotype,
    grammar: &Grammar,
    policy: &MutationPolicy,
    active: &[usize],
    rng: &mut impl Rng,
) -> Genotype {
    let mut out = genotype.clone();
    for (i, list) in out.codons.iter_mut().enumerate() {
        let n_prods = grammar.nt(i).productions.len();
        if n_prods < 2 {
            continue;
        }
        let rate = policy.rate_for(&grammar.nt(i).name);
        if rate == 0.0 {
            continue;
        }
        let active_len = active.get(i).copied().unwrap_or(0).min(list.len());
        for c in &mut list[..active_len] {
            if rng.random_bool(rate) {
                let draw = rng.random_range(0..n_prods - 1);
                *c = if draw >= *c { draw + 1 } else { draw };
            }
        }
    }
    out
}

/// Uniform list-granular crossover: independently per non-terminal the child
/// takes the whole codon list from `a` (mask bit true) or `b`. Returns the
/// child and the mask so callers can carry per-list metadata from the right
/// parent.
pub fn crossover(
    a: &Genotype,
    b: &Genotype,
    rng: &mut impl Rng,
) -> (Genotype, Vec<bool>) {
    assert_eq!(a.codons.len(), b.codons.len(), "parents from different grammars");
    let mut codons = Vec::with_capacity(a.codons.len());
    let mut mask = Vec::with_capacity(a.codons.len());
    for i in 0..a.codons.len() {
        let from_a = rng.random_bool(0.5);
        codons.push(if from_a { a.codons[i].clone() } else { b.codons[i].clone() });
        mask.push(from_a);
    }
    (Genotype { codons }, mask)
}
