//! Bracketed trees: multi-branch constituency parses, their binarization,
//! and the expert-tree file format.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use super::Span;
use crate::error::{Error, Result};

/// An n-ary tree with tokens at the leaves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConstituencyTree {
    Leaf(String),
    Node(Vec<ConstituencyTree>),
}

/// A binary tree with tokens at the leaves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BinaryTree {
    Leaf(String),
    Node(Box<BinaryTree>, Box<BinaryTree>),
}

impl BinaryTree {
    pub fn node(left: BinaryTree, right: BinaryTree) -> Self {
        BinaryTree::Node(Box::new(left), Box::new(right))
    }

    pub fn leaves(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves(&self, out: &mut Vec<String>) {
        match self {
            BinaryTree::Leaf(w) => out.push(w.clone()),
            BinaryTree::Node(l, r) => {
                l.collect_leaves(out);
                r.collect_leaves(out);
            }
        }
    }

    fn collect_spans(&self, start: usize, out: &mut Vec<Span>) -> usize {
        match self {
            BinaryTree::Leaf(_) => start + 1,
            BinaryTree::Node(l, r) => {
                let mid = l.collect_spans(start, out);
                let end = r.collect_spans(mid, out);
                out.push(Span { start, end });
                end
            }
        }
    }

    fn to_constituency(&self) -> ConstituencyTree {
        match self {
            BinaryTree::Leaf(w) => ConstituencyTree::Leaf(w.clone()),
            BinaryTree::Node(l, r) => ConstituencyTree::Node(vec![l.to_constituency(), r.to_constituency()]),
        }
    }
}

impl fmt::Display for BinaryTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BinaryTree::Leaf(w) => write!(f, "{w}"),
            BinaryTree::Node(l, r) => write!(f, "({l} {r})"),
        }
    }
}

impl fmt::Display for ConstituencyTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConstituencyTree::Leaf(w) => write!(f, "{w}"),
            ConstituencyTree::Node(children) => {
                write!(f, "(")?;
                for (i, c) in children.iter().enumerate() {
                    if i > 0 {
                        write!(f, " ")?;
                    }
                    write!(f, "{c}")?;
                }
                write!(f, ")")
            }
        }
    }
}

impl ConstituencyTree {
    pub fn leaves(&self) -> Vec<String> {
        match self {
            ConstituencyTree::Leaf(w) => vec![w.clone()],
            ConstituencyTree::Node(children) => children.iter().flat_map(ConstituencyTree::leaves).collect(),
        }
    }

    /// Parses a fully parenthesized s-expression. A parenthesized group with a
    /// single child is the child itself.
    pub fn parse(text: &str) -> Result<Self> {
        let tokens = lex(text);
        if tokens.is_empty() {
            return Err(Error::Invalid("empty tree".into()));
        }
        let mut pos = 0;
        let tree = parse_node(&tokens, &mut pos)?;
        if pos != tokens.len() {
            return Err(Error::Invalid(format!("trailing input after tree: `{}`", tokens[pos])));
        }
        Ok(tree)
    }
}

fn lex(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch == '(' || ch == ')' || ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn parse_node(tokens: &[String], pos: &mut usize) -> Result<ConstituencyTree> {
    let Some(tok) = tokens.get(*pos) else {
        return Err(Error::Invalid("unbalanced brackets: unexpected end of input".into()));
    };
    *pos += 1;
    match tok.as_str() {
        ")" => Err(Error::Invalid("unbalanced brackets: unexpected `)`".into())),
        "(" => {
            let mut children = Vec::new();
            loop {
                match tokens.get(*pos).map(String::as_str) {
                    None => return Err(Error::Invalid("unbalanced brackets: missing `)`".into())),
                    Some(")") => {
                        *pos += 1;
                        break;
                    }
                    Some(_) => children.push(parse_node(tokens, pos)?),
                }
            }
            match children.len() {
                0 => Err(Error::Invalid("empty bracket group".into())),
                1 => Ok(children.pop().expect("one child")),
                _ => Ok(ConstituencyTree::Node(children)),
            }
        }
        word => Ok(ConstituencyTree::Leaf(word.to_string())),
    }
}

/// Children are binarized first; a node with more than two children then
/// has its children paired left to right, an odd last child standing alone,
/// level after level until two remain.
pub fn binarize_constituency(tree: &ConstituencyTree) -> Result<BinaryTree> {
    match tree {
        ConstituencyTree::Leaf(w) => Ok(BinaryTree::Leaf(w.clone())),
        ConstituencyTree::Node(children) => {
            let mut level = children.iter().map(binarize_constituency).collect::<Result<Vec<_>>>()?;
            if level.is_empty() {
                return Err(Error::Invalid("empty tree".into()));
            }
            while level.len() > 1 {
                let mut next = Vec::with_capacity(level.len().div_ceil(2));
                let mut it = level.into_iter();
                while let Some(a) = it.next() {
                    match it.next() {
                        Some(b) => next.push(BinaryTree::node(a, b)),
                        None => next.push(a),
                    }
                }
                level = next;
            }
            Ok(level.pop().expect("non-empty level"))
        }
    }
}

/// A validated binary tree over a pruned token sequence, used as supervision
/// for merge decisions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertTree {
    tree: BinaryTree,
    leaves: Vec<String>,
    spans: HashSet<Span>,
}

impl ExpertTree {
    pub fn new(tree: BinaryTree) -> Self {
        let leaves = tree.leaves();
        let mut spans = Vec::new();
        tree.collect_spans(0, &mut spans);
        ExpertTree {
            tree,
            leaves,
            spans: spans.into_iter().collect(),
        }
    }

    /// Parses a strictly binary bracketed tree.
    pub fn parse(text: &str) -> Result<Self> {
        let parsed = ConstituencyTree::parse(text)?;
        Ok(Self::new(strict_binary(&parsed)?))
    }

    pub fn tree(&self) -> &BinaryTree {
        &self.tree
    }

    pub fn leaves(&self) -> &[String] {
        &self.leaves
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn num_internal(&self) -> usize {
        self.spans.len()
    }

    /// Spans of internal nodes, as half-open leaf ranges.
    pub fn spans(&self) -> &HashSet<Span> {
        &self.spans
    }

    pub fn contains_span(&self, span: Span) -> bool {
        self.spans.contains(&span)
    }

    pub fn check_leaves<S: AsRef<str>>(&self, expected: &[S]) -> Result<()> {
        let same = self.leaves.len() == expected.len() && self.leaves.iter().zip(expected).all(|(a, b)| a == b.as_ref());
        if same {
            Ok(())
        } else {
            let want: Vec<&str> = expected.iter().map(AsRef::as_ref).collect();
            Err(Error::Validation(format!(
                "expert tree leaves [{}] do not match pruned expression [{}]",
                self.leaves.join(" "),
                want.join(" ")
            )))
        }
    }
}

impl fmt::Display for ExpertTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.tree.fmt(f)
    }
}

fn strict_binary(tree: &ConstituencyTree) -> Result<BinaryTree> {
    match tree {
        ConstituencyTree::Leaf(w) => Ok(BinaryTree::Leaf(w.clone())),
        ConstituencyTree::Node(children) if children.len() == 2 => {
            Ok(BinaryTree::node(strict_binary(&children[0])?, strict_binary(&children[1])?))
        }
        ConstituencyTree::Node(children) => Err(Error::Invalid(format!(
            "node with {} children in a binary tree: {tree}",
            children.len()
        ))),
    }
}

/// Parses one `<id>\t<tree>` line.
pub fn parse_expert_line(line: &str) -> Result<(String, ExpertTree)> {
    let (id, tree) = line
        .split_once('\t')
        .ok_or_else(|| Error::Invalid("expected `<id>\\t<tree>`".into()))?;
    let id = id.trim();
    if id.is_empty() {
        return Err(Error::Invalid("empty expression id".into()));
    }
    Ok((id.to_string(), ExpertTree::parse(tree)?))
}

fn located(path: &Path, line: usize, e: Error) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: e.to_string(),
    }
}

/// Reads an expert-tree file. When `pruned` is given, every tree's leaves are
/// checked against the pruned tokens of the expression with the same id.
pub fn load_expert_trees(
    path: &Path,
    pruned: Option<&HashMap<String, Vec<String>>>,
) -> Result<BTreeMap<String, ExpertTree>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, tree) = parse_expert_line(line).map_err(|e| located(path, lineno, e))?;
        if let Some(expected) = pruned.and_then(|p| p.get(&id)) {
            tree.check_leaves(expected).map_err(|e| located(path, lineno, e))?;
        }
        if out.insert(id.clone(), tree).is_some() {
            return Err(located(path, lineno, Error::Invalid(format!("duplicate expression id `{id}`"))));
        }
    }
    Ok(out)
}

pub fn format_expert_line(id: &str, tree: &ExpertTree) -> String {
    format!("{id}\t{tree}")
}

impl From<&BinaryTree> for ConstituencyTree {
    fn from(t: &BinaryTree) -> Self {
        t.to_constituency()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(w: &str) -> ConstituencyTree {
        ConstituencyTree::Leaf(w.into())
    }

    #[test]
    fn five_children_are_grouped_pairwise() {
        let t = ConstituencyTree::Node(["a", "furry", "and", "black", "dog"].map(leaf).to_vec());
        let b = binarize_constituency(&t).unwrap();
        assert_eq!(b.to_string(), "(((a furry) (and black)) dog)");
    }

    #[test]
    fn small_arities() {
        let two = ConstituencyTree::Node(vec![leaf("w1"), leaf("w2")]);
        assert_eq!(binarize_constituency(&two).unwrap().to_string(), "(w1 w2)");
        let three = ConstituencyTree::Node(vec![leaf("w1"), leaf("w2"), leaf("w3")]);
        assert_eq!(binarize_constituency(&three).unwrap().to_string(), "((w1 w2) w3)");
        assert!(binarize_constituency(&ConstituencyTree::Node(vec![])).is_err());
    }

    #[test]
    fn children_binarize_before_parents() {
        let t = ConstituencyTree::parse("((small black dog) (left of (big tree)))").unwrap();
        assert_eq!(binarize_constituency(&t).unwrap().to_string(), "(((small black) dog) ((left of) (big tree)))");
    }

    #[test]
    fn binarization_is_idempotent_on_binary_trees() {
        let t = ConstituencyTree::parse("((black dog) (left (the tree)))").unwrap();
        let once = binarize_constituency(&t).unwrap();
        let twice = binarize_constituency(&ConstituencyTree::from(&once)).unwrap();
        assert_eq!(once, twice);
        assert_eq!(once.to_string(), "((black dog) (left (the tree)))");
    }

    #[test]
    fn parses_expert_trees() {
        let t = ExpertTree::parse("((black dog) (left tree))").unwrap();
        assert_eq!(t.num_leaves(), 4);
        assert_eq!(t.num_internal(), 3);
        assert!(t.contains_span(Span { start: 0, end: 2 }));
        assert!(t.contains_span(Span { start: 2, end: 4 }));
        assert!(t.contains_span(Span { start: 0, end: 4 }));
        assert!(ExpertTree::parse("((a b)").is_err());
        assert!(ExpertTree::parse("(a b))").is_err());
        assert!(ExpertTree::parse("(a b c)").is_err());
        assert_eq!(ExpertTree::parse("dog").unwrap().num_internal(), 0);
        assert_eq!(ExpertTree::parse("(dog)").unwrap().num_leaves(), 1);
    }

    #[test]
    fn leaf_mismatch_is_a_validation_error() {
        let t = ExpertTree::parse("(black dog)").unwrap();
        assert!(t.check_leaves(&["black", "dog"]).is_ok());
        assert!(matches!(t.check_leaves(&["white", "dog"]), Err(Error::Validation(_))));
    }

    #[test]
    fn loader_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trees.tsv");
        std::fs::write(&path, "e1\t(black dog)\ne2\t((a b)\n").unwrap();
        let err = load_expert_trees(&path, None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");

        std::fs::write(&path, "e1\t(black dog)\n\ne2\t(red (big cat))\n").unwrap();
        let mut pruned = HashMap::new();
        pruned.insert("e2".to_string(), vec!["red".to_string(), "big".into(), "cow".into()]);
        let err = load_expert_trees(&path, Some(&pruned)).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");

        pruned.insert("e2".to_string(), vec!["red".to_string(), "big".into(), "cat".into()]);
        let trees = load_expert_trees(&path, Some(&pruned)).unwrap();
        assert_eq!(trees.len(), 2);
        assert_eq!(format_expert_line("e2", &trees["e2"]), "e2\t(red (big cat))");
    }
}
