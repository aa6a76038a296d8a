//! Text exports of grounded trees: Graphviz DOT graphs and a per-role
//! leaf-word frequency table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grounding::{GroundingTrace, NodeRole};
use crate::treebuilder::{NodeKind, RvGTree};

fn role_name(r: NodeRole) -> &'static str {
    match r {
        NodeRole::Root => "root",
        NodeRole::Score => "score",
        NodeRole::Feature => "feature",
    }
}

fn role_color(r: NodeRole) -> &'static str {
    match r {
        NodeRole::Root => "blue",
        NodeRole::Score => "red",
        NodeRole::Feature => "black",
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out
}

/// The three highest-scoring regions, highest first (ties by index).
pub fn top_regions(scores: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.into_iter().take(k).map(|i| (i, scores[i])).collect()
}

/// One graph node per tree node, in node-id order, then one edge per
/// parent-child link. Score nodes are red, feature nodes black.
pub fn tree_to_dot(name: &str, tree: &RvGTree, trace: &GroundingTrace, words: &[String]) -> Result<String> {
    if trace.nodes.len() != tree.nodes().len() {
        return Err(Error::Invalid("trace does not match the tree".into()));
    }
    if words.len() != tree.num_leaves() {
        return Err(Error::Invalid("word count differs from leaf count".into()));
    }
    let mut out = String::new();
    writeln!(out, "digraph \"{}\" {{", escape(name)).unwrap();
    writeln!(out, "  node [shape=box];").unwrap();
    for (id, (node, t)) in tree.nodes().iter().zip(&trace.nodes).enumerate() {
        let text = words[node.span.start..node.span.end].join(" ");
        let scores = match node.kind {
            NodeKind::Leaf { .. } if t.total.iter().all(|v| *v == 0.0) => t.single.as_deref().unwrap_or(&t.total),
            _ => &t.total,
        };
        let top = top_regions(scores, 3)
            .iter()
            .map(|(r, s)| format!("r{r}={s:.3}"))
            .collect::<Vec<_>>()
            .join(" ");
        let label = format!(
            "{text}\n[{}, {}) {}\n{}",
            node.span.start,
            node.span.end,
            role_name(t.role),
            if top.is_empty() { "-".to_string() } else { top }
        );
        writeln!(
            out,
            "  n{id} [label=\"{}\", color={}, fontcolor={}];",
            escape(&label),
            role_color(t.role),
            role_color(t.role)
        )
        .unwrap();
    }
    for id in 0..tree.nodes().len() {
        if let Some((l, r)) = tree.children(id) {
            writeln!(out, "  n{id} -> n{l};").unwrap();
            writeln!(out, "  n{id} -> n{r};").unwrap();
        }
    }
    out.push_str("}\n");
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DotGraph {
    pub name: String,
    pub directed: bool,
    /// Node statements in order, with their attributes.
    pub nodes: Vec<(String, BTreeMap<String, String>)>,
    pub edges: Vec<(String, String)>,
}

struct Lexer<'a> {
    chars: std::iter::Peekable<std::str::CharIndices<'a>>,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Id(String),
    Sym(char),
    Arrow(bool),
}

impl Lexer<'_> {
    fn next_tok(&mut self) -> Result<Option<Tok>> {
        while let Some(&(_, c)) = self.chars.peek() {
            if c.is_whitespace() {
                self.chars.next();
            } else {
                break;
            }
        }
        let Some((pos, c)) = self.chars.next() else {
            return Ok(None);
        };
        let bad = |msg: String| Error::Parse {
            path: "<dot>".into(),
            line: 0,
            msg,
        };
        match c {
            '{' | '}' | '[' | ']' | ';' | ',' | '=' => Ok(Some(Tok::Sym(c))),
            '-' => match self.chars.next() {
                Some((_, '>')) => Ok(Some(Tok::Arrow(true))),
                Some((_, '-')) => Ok(Some(Tok::Arrow(false))),
                _ => Err(bad(format!("stray '-' at byte {pos}"))),
            },
            '"' => {
                let mut s = String::new();
                loop {
                    match self.chars.next() {
                        Some((_, '"')) => return Ok(Some(Tok::Id(s))),
                        Some((_, '\\')) => match self.chars.next() {
                            Some((_, 'n')) => s.push('\n'),
                            Some((_, c)) => s.push(c),
                            None => return Err(bad("unterminated escape".into())),
                        },
                        Some((_, c)) => s.push(c),
                        None => return Err(bad(format!("unterminated string at byte {pos}"))),
                    }
                }
            }
            c if c.is_alphanumeric() || c == '_' || c == '.' => {
                let mut s = String::from(c);
                while let Some(&(_, d)) = self.chars.peek() {
                    if d.is_alphanumeric() || d == '_' || d == '.' {
                        s.push(d);
                        self.chars.next();
                    } else {
                        break;
                    }
                }
                Ok(Some(Tok::Id(s)))
            }
            c => Err(bad(format!("unexpected '{c}' at byte {pos}"))),
        }
    }
}

/// Parses the DOT subset used by exports: one `graph`/`digraph` with node
/// statements (with attribute lists), edge chains and `node`/`edge`/`graph`
/// default-attribute statements.
pub fn parse_dot(text: &str) -> Result<DotGraph> {
    let mut lx = Lexer {
        chars: text.char_indices().peekable(),
    };
    let mut toks = Vec::new();
    while let Some(t) = lx.next_tok()? {
        toks.push(t);
    }
    let err = |msg: &str| Error::Parse {
        path: "<dot>".into(),
        line: 0,
        msg: msg.into(),
    };
    let mut i = 0;
    let mut g = DotGraph::default();
    let id_at = |i: usize| match toks.get(i) {
        Some(Tok::Id(s)) => Some(s.clone()),
        _ => None,
    };
    match id_at(i).as_deref() {
        Some("digraph") => g.directed = true,
        Some("graph") => g.directed = false,
        _ => return Err(err("expected `graph` or `digraph`")),
    }
    i += 1;
    if let Some(name) = id_at(i) {
        g.name = name;
        i += 1;
    }
    if toks.get(i) != Some(&Tok::Sym('{')) {
        return Err(err("expected `{`"));
    }
    i += 1;
    loop {
        match toks.get(i) {
            Some(Tok::Sym('}')) => {
                i += 1;
                break;
            }
            Some(Tok::Sym(';')) => i += 1,
            Some(Tok::Id(first)) => {
                let first = first.clone();
                i += 1;
                let mut chain = vec![first.clone()];
                while let Some(Tok::Arrow(directed)) = toks.get(i) {
                    if *directed != g.directed {
                        return Err(err("edge operator does not match graph kind"));
                    }
                    chain.push(id_at(i + 1).ok_or_else(|| err("edge without target"))?);
                    i += 2;
                }
                let mut attrs = BTreeMap::new();
                if toks.get(i) == Some(&Tok::Sym('[')) {
                    i += 1;
                    loop {
                        match toks.get(i) {
                            Some(Tok::Sym(']')) => {
                                i += 1;
                                break;
                            }
                            Some(Tok::Sym(',')) | Some(Tok::Sym(';')) => i += 1,
                            Some(Tok::Id(k)) => {
                                if toks.get(i + 1) != Some(&Tok::Sym('=')) {
                                    return Err(err("expected `=` in attribute list"));
                                }
                                let v = id_at(i + 2).ok_or_else(|| err("attribute without value"))?;
                                attrs.insert(k.clone(), v);
                                i += 3;
                            }
                            _ => return Err(err("unterminated attribute list")),
                        }
                    }
                }
                if chain.len() > 1 {
                    g.edges.extend(chain.windows(2).map(|w| (w[0].clone(), w[1].clone())));
                } else if !matches!(first.as_str(), "node" | "edge" | "graph") {
                    g.nodes.push((first, attrs));
                }
            }
            _ => return Err(err("unexpected token in graph body")),
        }
    }
    if i != toks.len() {
        return Err(err("trailing input after graph"));
    }
    Ok(g)
}

/// Leaf-word counts by the role each leaf played.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoleFrequency {
    counts: BTreeMap<String, [usize; 3]>,
}

impl RoleFrequency {
    /// Adds every leaf of one grounded expression once, under its own role.
    pub fn add(&mut self, tree: &RvGTree, trace: &GroundingTrace, words: &[String]) -> Result<()> {
        if words.len() != tree.num_leaves() || trace.nodes.len() != tree.nodes().len() {
            return Err(Error::Invalid("trace, tree and words disagree".into()));
        }
        for (i, w) in words.iter().enumerate() {
            let slot = match trace.nodes[i].role {
                NodeRole::Score => 0,
                NodeRole::Feature => 1,
                NodeRole::Root => 2,
            };
            self.counts.entry(w.clone()).or_default()[slot] += 1;
        }
        Ok(())
    }

    /// `(word, score, feature, root)` rows sorted by total count, then word.
    pub fn rows(&self) -> Vec<(&str, [usize; 3])> {
        let mut rows: Vec<_> = self.counts.iter().map(|(w, c)| (w.as_str(), *c)).collect();
        rows.sort_by(|a, b| {
            let ta: usize = a.1.iter().sum();
            let tb: usize = b.1.iter().sum();
            tb.cmp(&ta).then(a.0.cmp(b.0))
        });
        rows
    }

    pub fn total(&self) -> usize {
        self.counts.values().flat_map(|c| c.iter()).sum()
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("word\tscore\tfeature\troot\ttotal\n");
        for (w, c) in self.rows() {
            let t: usize = c.iter().sum();
            writeln!(out, "{w}\t{}\t{}\t{}\t{t}", c[0], c[1], c[2]).unwrap();
        }
        out
    }
}
