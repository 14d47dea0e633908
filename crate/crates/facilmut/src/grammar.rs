//! BNF-style grammar parsing and the static analysis the mapper relies on:
//! minimal derivation depths per production and recursion flags per
//! non-terminal.
//!
//! Format: one rule per logical line, `<name> ::= sym sym | sym ...`.
//! Symbols are whitespace-separated; `<...>` references a non-terminal,
//! anything else is a terminal token. `#` starts a comment, a trailing `\`
//! continues the rule on the next physical line, and the first rule's
//! left-hand side is the start symbol.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GrammarError {
    #[error("line {line}, column {col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("line {line}: undefined non-terminal <{name}>")]
    UndefinedNonTerminal { name: String, line: usize },
    #[error("line {line}: duplicate definition of <{name}>")]
    DuplicateNonTerminal { name: String, line: usize },
    #[error("non-terminal <{name}> has no finite derivation")]
    Unproductive { name: String },
    #[error("grammar contains no rules")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Symbol {
    /// Index into `Grammar::nonterminals`.
    NonTerminal(usize),
    Terminal(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Production {
    pub symbols: Vec<Symbol>,
    /// Depth of the shallowest fully terminal expansion of this production.
    pub min_depth: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NonTerminal {
    pub name: String,
    pub productions: Vec<Production>,
    /// Depth of the shallowest fully terminal derivation rooted here; a rule
    /// expanding directly to terminals has depth 1.
    pub min_depth: usize,
    /// True when this symbol can derive a sentential form containing itself.
    pub recursive: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grammar {
    nonterminals: Vec<NonTerminal>,
    by_name: HashMap<String, usize>,
    start: usize,
}

/// A rule as read from source, before name resolution.
struct RawRule {
    name: String,
    line: usize,
    /// Alternatives of (token, column) lists.
    alts: Vec<Vec<(String, usize)>>,
}

impl Grammar {
    pub fn parse(source: &str) -> Result<Grammar, GrammarError> {
        let rules = lex_rules(source)?;
        if rules.is_empty() {
            return Err(GrammarError::Empty);
        }

        let mut by_name = HashMap::new();
        for (i, r) in rules.iter().enumerate() {
            if by_name.insert(r.name.clone(), i).is_some() {
                return Err(GrammarError::DuplicateNonTerminal {
                    name: r.name.clone(),
                    line: r.line,
                });
            }
        }

        let mut nonterminals = Vec::with_capacity(rules.len());
        for r in &rules {
            let mut productions = Vec::with_capacity(r.alts.len());
            for alt in &r.alts {
                let mut symbols = Vec::with_capacity(alt.len());
                for (tok, col) in alt {
                    if let Some(name) = nonterminal_name(tok) {
                        match by_name.get(name) {
                            Some(&idx) => symbols.push(Symbol::NonTerminal(idx)),
                            None => {
                                return Err(GrammarError::UndefinedNonTerminal {
                                    name: name.to_string(),
                                    line: r.line,
                                })
                            }
                        }
                    } else if tok.starts_with('<') || tok.ends_with('>') {
                        return Err(GrammarError::Syntax {
                            line: r.line,
                            col: *col,
                            msg: format!("malformed non-terminal reference `{tok}`"),
                        });
                    } else {
                        symbols.push(Symbol::Terminal(tok.clone()));
                    }
                }
                productions.push(Production { symbols, min_depth: 0 });
            }
            nonterminals.push(NonTerminal {
                name: r.name.clone(),
                productions,
                min_depth: 0,
                recursive: false,
            });
        }

        let mut g = Grammar { nonterminals, by_name, start: 0 };
        g.compute_depths()?;
        g.compute_recursion();
        Ok(g)
    }

    /// Fixed-point relaxation of minimal derivation depths. A terminal-only
    /// production has depth 1; otherwise 1 + the max over referenced
    /// non-terminals. A non-terminal takes the min over its productions.
    fn compute_depths(&mut self) -> Result<(), GrammarError> {
        let n = self.nonterminals.len();
        let mut nt_depth: Vec<Option<usize>> = vec![None; n];
        loop {
            let mut changed = false;
            for i in 0..n {
                let mut best: Option<usize> = None;
                for p in &self.nonterminals[i].productions {
                    if let Some(d) = production_depth(p, &nt_depth) {
                        best = Some(best.map_or(d, |b| b.min(d)));
                    }
                }
                if best.is_some() && best != nt_depth[i] {
                    nt_depth[i] = best;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        if let Some(i) = nt_depth.iter().position(|d| d.is_none()) {
            return Err(GrammarError::Unproductive {
                name: self.nonterminals[i].name.clone(),
            });
        }
        for i in 0..n {
            self.nonterminals[i].min_depth = nt_depth[i].unwrap();
            let depths: Vec<usize> = self.nonterminals[i]
                .productions
                .iter()
                .map(|p| production_depth(p, &nt_depth).unwrap())
                .collect();
            for (p, d) in self.nonterminals[i].productions.iter_mut().zip(depths) {
                p.min_depth = d;
            }
        }
        Ok(())
    }

    fn compute_recursion(&mut self) {
        let n = self.nonterminals.len();
        // references[i] = set of non-terminals appearing in i's productions
        let refs: Vec<Vec<usize>> = self
            .nonterminals
            .iter()
            .map(|nt| {
                let mut r: Vec<usize> = nt
                    .productions
                    .iter()
                    .flat_map(|p| p.symbols.iter())
                    .filter_map(|s| match s {
                        Symbol::NonTerminal(j) => Some(*j),
                        Symbol::Terminal(_) => None,
                    })
                    .collect();
                r.sort_unstable();
                r.dedup();
                r
            })
            .collect();
        for i in 0..n {
            let mut seen = vec![false; n];
            let mut stack = refs[i].clone();
            let mut hit = false;
            while let Some(j) = stack.pop() {
                if j == i {
                    hit = true;
                    break;
                }
                if !seen[j] {
                    seen[j] = true;
                    stack.extend_from_slice(&refs[j]);
                }
            }
            self.nonterminals[i].recursive = hit;
        }
    }

    pub fn nonterminals(&self) -> &[NonTerminal] {
        &self.nonterminals
    }

    pub fn nt(&self, idx: usize) -> &NonTerminal {
        &self.nonterminals[idx]
    }

    pub fn len(&self) -> usize {
        self.nonterminals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nonterminals.is_empty()
    }

    pub fn start_index(&self) -> usize {
        self.start
    }

    pub fn start(&self) -> &NonTerminal {
        &self.nonterminals[self.start]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    /// Every terminal token that appears anywhere in the grammar, deduplicated
    /// in first-appearance order.
    pub fn terminals(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for nt in &self.nonterminals {
            for p in &nt.productions {
                for s in &p.symbols {
                    if let Symbol::Terminal(t) = s {
                        if !out.contains(&t.as_str()) {
                            out.push(t);
                        }
                    }
                }
            }
        }
        out
    }

    /// Canonical single-line-per-rule rendering; parsing it back yields a
    /// structurally identical grammar.
    pub fn pretty(&self) -> String {
        let mut out = String::new();
        for nt in &self.nonterminals {
            let _ = write!(out, "<{}> ::= ", nt.name);
            let alts: Vec<String> = nt
                .productions
                .iter()
                .map(|p| {
                    p.symbols
                        .iter()
                        .map(|s| match s {
                            Symbol::NonTerminal(j) => format!("<{}>", self.nonterminals[*j].name),
                            Symbol::Terminal(t) => t.clone(),
                        })
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect();
            out.push_str(&alts.join(" | "));
            out.push('\n');
        }
        out
    }
}

fn production_depth(p: &Production, nt_depth: &[Option<usize>]) -> Option<usize> {
    let mut max_ref = 0usize;
    for s in &p.symbols {
        if let Symbol::NonTerminal(j) = s {
            max_ref = max_ref.max(nt_depth[*j]?);
        }
    }
    Some(1 + max_ref)
}

/// `<name>` → `Some(name)` when name is a valid identifier, else None.
fn nonterminal_name(tok: &str) -> Option<&str> {
    let inner = tok.strip_prefix('<')?.strip_suffix('>')?;
    if !inner.is_empty()
        && inner.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
    {
        Some(inner)
    } else {
        None
    }
}

/// Physical lines → comment-stripped, continuation-joined rules, tokenized
/// with column positions (1-based, relative to the joined logical line).
fn lex_rules(source: &str) -> Result<Vec<RawRule>, GrammarError> {
    let mut logical: Vec<(usize, String)> = Vec::new();
    let mut pending: Option<(usize, String)> = None;
    for (lineno, raw) in source.lines().enumerate() {
        let line = lineno + 1;
        let stripped = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        };
        let mut text = stripped.trim_end().to_string();
        let continues = text.ends_with('\\');
        if continues {
            text.pop();
        }
        match pending.take() {
            Some((l0, mut acc)) => {
                acc.push(' ');
                acc.push_str(text.trim());
                if continues {
                    pending = Some((l0, acc));
                } else {
                    logical.push((l0, acc));
                }
            }
            None => {
                if continues {
                    pending = Some((line, text));
                } else if !text.trim().is_empty() {
                    logical.push((line, text));
                }
            }
        }
    }
    if let Some((l0, acc)) = pending {
        // Trailing continuation at EOF: treat the accumulated text as final.
        if !acc.trim().is_empty() {
            logical.push((l0, acc));
        }
    }

    let mut rules = Vec::new();
    for (line, text) in logical {
        let Some(sep) = text.find("::=") else {
            return Err(GrammarError::Syntax {
                line,
                col: 1,
                msg: "expected `<name> ::= ...`".into(),
            });
        };
        let lhs = text[..sep].trim();
        let Some(name) = nonterminal_name(lhs) else {
            return Err(GrammarError::Syntax {
                line,
                col: 1,
                msg: format!("left-hand side `{lhs}` is not of the form <name>"),
            });
        };
        let rhs = &text[sep + 3..];
        if rhs.contains("::=") {
            let col = sep + 4 + rhs.find("::=").unwrap();
            return Err(GrammarError::Syntax {
                line,
                col,
                msg: "`::=` may appear only once per rule".into(),
            });
        }
        let mut alts = Vec::new();
        let mut offset = sep + 3;
        for alt in rhs.split('|') {
            let toks = tokens_with_cols(alt, offset);
            if toks.is_empty() {
                return Err(GrammarError::Syntax {
                    line,
                    col: offset + 1,
                    msg: format!("empty alternative in rule <{name}>"),
                });
            }
            alts.push(toks);
            offset += alt.len() + 1;
        }
        rules.push(RawRule { name: name.to_string(), line, alts });
    }
    Ok(rules)
}

/// Whitespace-split with 1-based column positions relative to the logical
/// line (`base` = byte offset of `alt` within it).
fn tokens_with_cols(alt: &str, base: usize) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    let bytes = alt.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i >= bytes.len() {
            break;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        out.push((alt[start..i].to_string(), base + start + 1));
    }
    out
}

pub const FM_GRAMMAR: &str = include_str!("../grammars/fm.bnf");
pub const ORIGINAL_GRAMMAR: &str = include_str!("../grammars/original.bnf");
