//! Latent binary tree construction over a pruned expression.
//!
//! Starting from the leaf states, each layer scores the TreeLSTM merge of
//! every adjacent pair, selects one, and carries the other nodes unchanged to
//! the next layer until a single root remains.

mod expert;
mod prune;

pub use expert::{
    binarize_constituency, format_expert_line, load_expert_trees, parse_expert_line, BinaryTree, ConstituencyTree,
    ExpertTree,
};
pub use prune::{prune_sentence, tokenize, STOP_WORDS};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ops, GumbelSampler, ParamId, ParameterStore, Tape, Tensor, Var};
use crate::encoders::{treelstm_merge, uniform, NodeState, RecurrentParams};
use crate::error::{Error, Result};

/// Half-open range of leaf positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Leaf { position: usize },
    Internal { left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeNode {
    pub kind: NodeKind,
    pub span: Span,
    /// 0 for leaves; the merge step (1-based) that created an internal node.
    pub layer: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeRecord {
    pub layer: usize,
    pub position: usize,
    /// Candidate distribution the choice was made from (empty when no
    /// scoring happened).
    pub probs: Vec<f64>,
}

/// A binary tree over `m` leaves. Nodes `0..m` are the leaves in order;
/// node `m + t - 1` is created by merge `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RvGTree {
    nodes: Vec<TreeNode>,
    root: usize,
    merge_log: Vec<MergeRecord>,
}

impl RvGTree {
    /// Builds the structure from a sequence of merge positions.
    pub fn from_merges(num_leaves: usize, positions: &[usize]) -> Result<Self> {
        if num_leaves == 0 {
            return Err(Error::Invalid("tree needs at least one leaf".into()));
        }
        let mut nodes: Vec<TreeNode> = (0..num_leaves)
            .map(|i| TreeNode {
                kind: NodeKind::Leaf { position: i },
                span: Span { start: i, end: i + 1 },
                layer: 0,
            })
            .collect();
        let mut layer: Vec<usize> = (0..num_leaves).collect();
        let mut merge_log = Vec::with_capacity(positions.len());
        for (t, &p) in positions.iter().enumerate() {
            if p + 1 >= layer.len() {
                return Err(Error::OutOfRange {
                    what: "merge position",
                    index: p,
                    len: layer.len().saturating_sub(1),
                });
            }
            let (l, r) = (layer[p], layer[p + 1]);
            nodes.push(TreeNode {
                kind: NodeKind::Internal { left: l, right: r },
                span: Span {
                    start: nodes[l].span.start,
                    end: nodes[r].span.end,
                },
                layer: t + 1,
            });
            layer[p] = nodes.len() - 1;
            layer.remove(p + 1);
            merge_log.push(MergeRecord {
                layer: t + 1,
                position: p,
                probs: Vec::new(),
            });
        }
        if layer.len() != 1 {
            return Err(Error::Invalid(format!("{} nodes remain after merging", layer.len())));
        }
        Ok(RvGTree {
            nodes,
            root: layer[0],
            merge_log,
        })
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn merge_log(&self) -> &[MergeRecord] {
        &self.merge_log
    }

    pub fn num_leaves(&self) -> usize {
        self.nodes.len().div_ceil(2)
    }

    pub fn num_internal(&self) -> usize {
        self.nodes.len() - self.num_leaves()
    }

    pub fn children(&self, id: usize) -> Option<(usize, usize)> {
        match self.nodes[id].kind {
            NodeKind::Internal { left, right } => Some((left, right)),
            NodeKind::Leaf { .. } => None,
        }
    }

    /// Spans of all internal nodes.
    pub fn internal_spans(&self) -> Vec<Span> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Internal { .. }))
            .map(|n| n.span)
            .collect()
    }

    /// Node ids in post-order (children before parents).
    pub fn post_order(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![(self.root, false)];
        while let Some((id, expanded)) = stack.pop() {
            match (self.children(id), expanded) {
                (Some((l, r)), false) => {
                    stack.push((id, true));
                    stack.push((r, false));
                    stack.push((l, false));
                }
                _ => out.push(id),
            }
        }
        out
    }

    /// The same tree as a bracketed binary tree over `words`.
    pub fn to_binary(&self, words: &[String]) -> Result<BinaryTree> {
        if words.len() != self.num_leaves() {
            return Err(Error::Invalid("word count differs from leaf count".into()));
        }
        fn build(t: &RvGTree, id: usize, words: &[String]) -> BinaryTree {
            match t.nodes[id].kind {
                NodeKind::Leaf { position } => BinaryTree::Leaf(words[position].clone()),
                NodeKind::Internal { left, right } => BinaryTree::node(build(t, left, words), build(t, right, words)),
            }
        }
        Ok(build(self, self.root, words))
    }

    /// Checks every structural invariant, replaying the merge log against
    /// the node table.
    pub fn check_invariants(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(msg));
        let total = self.nodes.len();
        if total == 0 || total % 2 == 0 {
            return fail(format!("{total} nodes cannot form a full binary tree"));
        }
        let m = self.num_leaves();
        if self.merge_log.len() != m - 1 {
            return fail(format!("merge log has {} entries for {m} leaves", self.merge_log.len()));
        }
        for (i, n) in self.nodes[..m].iter().enumerate() {
            if n.kind != (NodeKind::Leaf { position: i }) || n.span != (Span { start: i, end: i + 1 }) {
                return fail(format!("leaf {i} is out of order"));
            }
        }
        let mut layer: Vec<usize> = (0..m).collect();
        for (t, rec) in self.merge_log.iter().enumerate() {
            let id = m + t;
            let node = &self.nodes[id];
            let NodeKind::Internal { left, right } = node.kind else {
                return fail(format!("node {id} should be internal"));
            };
            if rec.layer != t + 1 || node.layer != t + 1 {
                return fail(format!("node {id} has layer {} (expected {})", node.layer, t + 1));
            }
            if layer.len() != m - t {
                return fail(format!("layer {} has {} nodes", t + 1, layer.len()));
            }
            let p = rec.position;
            if p + 1 >= layer.len() || layer[p] != left || layer[p + 1] != right {
                return fail(format!("merge {} does not join adjacent nodes", t + 1));
            }
            let (ls, rs) = (self.nodes[left].span, self.nodes[right].span);
            if ls.end != rs.start || node.span != (Span { start: ls.start, end: rs.end }) {
                return fail(format!("node {id} span is not the union of its children"));
            }
            layer[p] = id;
            layer.remove(p + 1);
        }
        if layer != [self.root] || self.nodes[self.root].span != (Span { start: 0, end: m }) {
            return fail("root does not span the sentence".into());
        }
        Ok(())
    }
}

/// Query vector scoring candidate parents.
#[derive(Debug, Clone, Copy)]
pub struct MergePolicyParams {
    pub query: ParamId,
}

impl MergePolicyParams {
    pub fn register<R: Rng>(store: &mut ParameterStore, width: usize, rng: &mut R) -> Result<Self> {
        let values = uniform(rng, width, 1.0 / (width as f64).sqrt());
        let query = store.register("merge.query", Tensor::new(vec![width], values)?)?;
        Ok(MergePolicyParams { query })
    }
}

/// Candidate parents of one layer and their scores.
pub struct Candidates {
    pub parents: Vec<NodeState>,
    pub logits: Var,
    pub probs: Var,
}

/// Materializes the merge of every adjacent pair and scores it.
pub fn candidate_scores(
    tape: &mut Tape,
    layer: &[NodeState],
    policy: &MergePolicyParams,
    rec: &RecurrentParams,
    mask: Option<&[bool]>,
) -> Result<Candidates> {
    if layer.len() < 2 {
        return Err(Error::Invalid(format!("layer of {} nodes has no candidates", layer.len())));
    }
    let q = tape.param(policy.query);
    let mut parents = Vec::with_capacity(layer.len() - 1);
    let mut scores = Vec::with_capacity(layer.len() - 1);
    for pair in layer.windows(2) {
        let p = treelstm_merge(tape, &pair[0], &pair[1], rec)?;
        scores.push(tape.dot(q, p.v)?);
        parents.push(p);
    }
    let logits = tape.stack(&scores)?;
    let probs = tape.softmax(logits, mask)?;
    Ok(Candidates { parents, logits, probs })
}

/// How one merge (or role) decision is taken.
pub enum SelectMode<'a> {
    /// Straight-through Gumbel sample.
    Sample(&'a mut GumbelSampler),
    /// Noise-free argmax, as a constant one-hot.
    Argmax,
    /// A given index, as a constant one-hot.
    Forced(usize),
}

pub struct Selection {
    pub position: usize,
    /// One-hot forward value; differentiable only in `Sample` mode.
    pub onehot: Var,
}

pub fn select_merge(tape: &mut Tape, logits: Var, mask: Option<&[bool]>, mode: &mut SelectMode) -> Result<Selection> {
    let n = tape.width(logits);
    match mode {
        SelectMode::Sample(sampler) => {
            let (onehot, position) = sampler.sample_on_tape(tape, logits, mask)?;
            Ok(Selection { position, onehot })
        }
        SelectMode::Argmax => {
            let position = ops::argmax(tape.value(logits), mask)?;
            let onehot = tape.vector(ops::one_hot(n, position))?;
            Ok(Selection { position, onehot })
        }
        SelectMode::Forced(target) => {
            if *target >= n {
                return Err(Error::OutOfRange {
                    what: "expert merge",
                    index: *target,
                    len: n,
                });
            }
            let onehot = tape.vector(ops::one_hot(n, *target))?;
            Ok(Selection {
                position: *target,
                onehot,
            })
        }
    }
}

/// Tree construction policy.
pub enum BuildMode<'a> {
    /// Gumbel straight-through selection with soft layer mixing.
    Train(&'a mut GumbelSampler),
    /// Greedy argmax, no noise.
    Eval,
    /// Follow the expert tree while scoring candidates for the tree loss.
    Expert(&'a ExpertTree),
    /// Follow the expert tree without scoring candidates.
    Fixed(&'a ExpertTree),
}

/// Scoring record of one layer.
#[derive(Debug, Clone)]
pub struct LayerScores {
    pub logits: Var,
    pub mask: Option<Vec<bool>>,
    pub chosen: usize,
}

/// A constructed tree with its tape variables.
pub struct BuiltTree {
    pub tree: RvGTree,
    /// State of every tree node, indexed like `tree.nodes()`.
    pub states: Vec<NodeState>,
    /// One entry per scored layer (absent in `Fixed` mode).
    pub layers: Vec<LayerScores>,
}

impl BuiltTree {
    /// Mean per-layer cross-entropy of the chosen merges; 0 for one leaf.
    pub fn tree_loss(&self, tape: &mut Tape) -> Result<Option<Var>> {
        if self.layers.is_empty() {
            return Ok(None);
        }
        let terms = self
            .layers
            .iter()
            .map(|l| tape.cross_entropy(l.logits, None, l.chosen))
            .collect::<Result<Vec<_>>>()?;
        Ok(Some(tape.mean(&terms)?))
    }
}

fn expert_choice(layer_spans: &[Span], expert: &ExpertTree, probs: Option<&[f64]>) -> Result<usize> {
    let mut best: Option<usize> = None;
    for j in 0..layer_spans.len() - 1 {
        let span = Span {
            start: layer_spans[j].start,
            end: layer_spans[j + 1].end,
        };
        if !expert.contains_span(span) {
            continue;
        }
        best = match (best, probs) {
            (None, _) => Some(j),
            (Some(b), Some(p)) if p[j] > p[b] => Some(j),
            (b, _) => b,
        };
    }
    best.ok_or_else(|| Error::Validation("expert tree does not match the layer".into()))
}

/// Candidate mask excluding pairs that touch a bare `unk` leaf; `None` when
/// nothing is excluded or everything would be.
fn unk_mask(layer_nodes: &[usize], unk: &[bool]) -> Option<Vec<bool>> {
    let bare_unk = |id: usize| id < unk.len() && unk[id];
    let mask: Vec<bool> = layer_nodes
        .windows(2)
        .map(|w| !bare_unk(w[0]) && !bare_unk(w[1]))
        .collect();
    if mask.iter().all(|m| *m) || !mask.iter().any(|m| *m) {
        None
    } else {
        Some(mask)
    }
}

/// Builds a tree bottom-up over `leaves`. `unk[i]` marks leaves whose token
/// is out of vocabulary; merges touching them are postponed outside expert
/// modes.
pub fn build_tree(
    tape: &mut Tape,
    leaves: &[NodeState],
    unk: &[bool],
    policy: &MergePolicyParams,
    rec: &RecurrentParams,
    mut mode: BuildMode,
) -> Result<BuiltTree> {
    let m = leaves.len();
    if m == 0 {
        return Err(Error::Invalid("cannot build a tree over zero leaves".into()));
    }
    if let BuildMode::Expert(e) | BuildMode::Fixed(e) = &mode {
        if e.num_leaves() != m {
            return Err(Error::Validation(format!(
                "expert tree has {} leaves, expression has {m}",
                e.num_leaves()
            )));
        }
    }
    let mut states: Vec<NodeState> = leaves.to_vec();
    let mut positions = Vec::with_capacity(m.saturating_sub(1));
    let mut probs_log = Vec::with_capacity(m.saturating_sub(1));
    let mut layers = Vec::new();
    // Node ids and (possibly soft-mixed) working states of the current layer.
    let mut ids: Vec<usize> = (0..m).collect();
    let mut spans: Vec<Span> = (0..m).map(|i| Span { start: i, end: i + 1 }).collect();
    let mut work: Vec<NodeState> = leaves.to_vec();

    while work.len() > 1 {
        let k = work.len();
        if let BuildMode::Fixed(expert) = &mode {
            let p = expert_choice(&spans, expert, None)?;
            let parent = treelstm_merge(tape, &work[p], &work[p + 1], rec)?;
            positions.push(p);
            probs_log.push(Vec::new());
            states.push(parent);
            work[p] = parent;
            work.remove(p + 1);
            merge_ids(&mut ids, &mut spans, p, states.len() - 1);
            continue;
        }

        let is_expert = matches!(mode, BuildMode::Expert(_));
        let mask = if is_expert { None } else { unk_mask(&ids, unk) };
        let cands = candidate_scores(tape, &work, policy, rec, mask.as_deref())?;
        let probs = tape.value(cands.probs).to_vec();
        let mut select = match &mut mode {
            BuildMode::Train(sampler) => SelectMode::Sample(sampler),
            BuildMode::Eval => SelectMode::Argmax,
            BuildMode::Expert(expert) => SelectMode::Forced(expert_choice(&spans, expert, Some(&probs))?),
            BuildMode::Fixed(_) => unreachable!("handled above"),
        };
        let soft = matches!(select, SelectMode::Sample(_));
        let sel = select_merge(tape, cands.logits, mask.as_deref(), &mut select)?;
        let p = sel.position;

        let next: Vec<NodeState> = if soft {
            mix_layer(tape, &work, &cands.parents, sel.onehot)?
        } else {
            let mut next = work.clone();
            next[p] = cands.parents[p];
            next.remove(p + 1);
            next
        };
        debug_assert_eq!(next.len(), k - 1);
        states.push(next[p]);
        positions.push(p);
        probs_log.push(probs);
        layers.push(LayerScores {
            logits: cands.logits,
            mask,
            chosen: p,
        });
        merge_ids(&mut ids, &mut spans, p, states.len() - 1);
        work = next;
    }

    let mut tree = RvGTree::from_merges(m, &positions)?;
    for (rec, probs) in tree.merge_log.iter_mut().zip(probs_log) {
        rec.probs = probs;
    }
    Ok(BuiltTree { tree, states, layers })
}

fn merge_ids(ids: &mut Vec<usize>, spans: &mut Vec<Span>, p: usize, new_id: usize) {
    ids[p] = new_id;
    ids.remove(p + 1);
    spans[p] = Span {
        start: spans[p].start,
        end: spans[p + 1].end,
    };
    spans.remove(p + 1);
}

/// `next_j = left_j · v_j + sel_j · parent_j + right_j · v_{j+1}` where
/// `left_j = Σ_{i>j} sel_i` and `right_j = Σ_{i<j} sel_i`. With a one-hot
/// forward value this equals the hard update exactly, while gradients reach
/// every candidate through the soft path.
fn mix_layer(tape: &mut Tape, work: &[NodeState], parents: &[NodeState], sel: Var) -> Result<Vec<NodeState>> {
    let n = parents.len();
    let mut after = vec![0.0; n * n];
    let mut before = vec![0.0; n * n];
    for j in 0..n {
        for i in 0..n {
            if i > j {
                after[j * n + i] = 1.0;
            } else if i < j {
                before[j * n + i] = 1.0;
            }
        }
    }
    let after = tape.constant(after, vec![n, n])?;
    let before = tape.constant(before, vec![n, n])?;
    let left_w = tape.matvec(after, sel)?;
    let right_w = tape.matvec(before, sel)?;
    (0..n)
        .map(|j| {
            let w = [
                tape.index(left_w, j)?,
                tape.index(sel, j)?,
                tape.index(right_w, j)?,
            ];
            let w = tape.stack(&w)?;
            let h = tape.weighted_sum(w, &[work[j].h, parents[j].h, work[j + 1].h])?;
            let c = tape.weighted_sum(w, &[work[j].c, parents[j].c, work[j + 1].c])?;
            NodeState::from_parts(tape, h, c)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderDims;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const DIMS: EncoderDims = EncoderDims {
        vocab: 4,
        embed: 3,
        hidden: 2,
    };

    fn setup(seed: u64) -> (ParameterStore, MergePolicyParams, RecurrentParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let rec = RecurrentParams::register(&mut store, DIMS, &mut rng).unwrap();
        let policy = MergePolicyParams::register(&mut store, DIMS.node_width(), &mut rng).unwrap();
        (store, policy, rec)
    }

    fn random_leaves(tape: &mut Tape, m: usize, seed: u64) -> Vec<NodeState> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..m)
            .map(|_| {
                let h = tape.vector(uniform(&mut rng, DIMS.state_half(), 1.0)).unwrap();
                let c = tape.vector(uniform(&mut rng, DIMS.state_half(), 1.0)).unwrap();
                NodeState::from_parts(tape, h, c).unwrap()
            })
            .collect()
    }

    #[test]
    fn candidate_distribution_shape() {
        let (store, policy, rec) = setup(1);
        let mut tape = Tape::new(&store);
        let leaves = random_leaves(&mut tape, 5, 2);
        let c = candidate_scores(&mut tape, &leaves, &policy, &rec, None).unwrap();
        let p = tape.value(c.probs);
        assert_eq!(p.len(), 4);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(candidate_scores(&mut tape, &leaves[..1], &policy, &rec, None).is_err());
    }

    #[test]
    fn identical_candidates_and_zero_query_are_uniform() {
        let (mut store, policy, rec) = setup(3);
        {
            let mut tape = Tape::new(&store);
            let l = random_leaves(&mut tape, 1, 4)[0];
            let c = candidate_scores(&mut tape, &[l, l, l], &policy, &rec, None).unwrap();
            assert_eq!(tape.value(c.probs), &[0.5, 0.5]);
        }
        store.values_mut(policy.query).iter_mut().for_each(|v| *v = 0.0);
        let mut tape = Tape::new(&store);
        let leaves = random_leaves(&mut tape, 5, 5);
        let c = candidate_scores(&mut tape, &leaves, &policy, &rec, None).unwrap();
        assert!(tape.value(c.probs).iter().all(|p| *p == 0.25));
    }

    #[test]
    fn select_modes() {
        let store = ParameterStore::new();
        let mut tape = Tape::new(&store);
        let logits = tape.vector(vec![0.1f64.ln(), 0.7f64.ln(), 0.2f64.ln()]).unwrap();
        assert_eq!(select_merge(&mut tape, logits, None, &mut SelectMode::Argmax).unwrap().position, 1);
        assert_eq!(select_merge(&mut tape, logits, None, &mut SelectMode::Forced(2)).unwrap().position, 2);
        assert!(select_merge(&mut tape, logits, None, &mut SelectMode::Forced(3)).is_err());
        let run = || {
            let mut tape = Tape::new(&store);
            let logits = tape.vector(vec![0.0, 0.2, 0.1]).unwrap();
            let mut s = GumbelSampler::new(1.0, true, 9).unwrap();
            (0..10)
                .map(|_| select_merge(&mut tape, logits, None, &mut SelectMode::Sample(&mut s)).unwrap().position)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn small_trees() {
        let (store, policy, rec) = setup(6);
        let mut tape = Tape::new(&store);
        let leaves = random_leaves(&mut tape, 2, 7);
        let one = build_tree(&mut tape, &leaves[..1], &[], &policy, &rec, BuildMode::Eval).unwrap();
        assert_eq!(one.tree.nodes().len(), 1);
        assert!(one.tree.merge_log().is_empty());
        one.tree.check_invariants().unwrap();
        let two = build_tree(&mut tape, &leaves, &[], &policy, &rec, BuildMode::Eval).unwrap();
        assert_eq!(two.tree.num_internal(), 1);
        assert_eq!(two.tree.node(two.tree.root()).span, Span { start: 0, end: 2 });
    }

    #[test]
    fn soft_mixing_matches_hard_forward() {
        let (store, policy, rec) = setup(8);
        let mut tape = Tape::new(&store);
        let leaves = random_leaves(&mut tape, 6, 9);
        let mut s = GumbelSampler::new(1.0, true, 10).unwrap();
        let soft = build_tree(&mut tape, &leaves, &[], &policy, &rec, BuildMode::Train(&mut s)).unwrap();
        let positions: Vec<usize> = soft.tree.merge_log().iter().map(|r| r.position).collect();
        // Replay the same merges with hard carries.
        let expert = ExpertTree::new(soft.tree.to_binary(&(0..6).map(|i| i.to_string()).collect::<Vec<_>>()).unwrap());
        let hard = build_tree(&mut tape, &leaves, &[], &policy, &rec, BuildMode::Fixed(&expert)).unwrap();
        let hard_pos: Vec<usize> = hard.tree.merge_log().iter().map(|r| r.position).collect();
        assert_eq!(soft.tree.internal_spans().len(), hard.tree.internal_spans().len());
        let mut a = soft.tree.internal_spans();
        let mut b = hard.tree.internal_spans();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        let root_soft = tape.value(soft.states[soft.tree.root()].v).to_vec();
        let root_hard = tape.value(hard.states[hard.tree.root()].v).to_vec();
        for (x, y) in root_soft.iter().zip(&root_hard) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(positions.len(), hard_pos.len());
    }

    #[test]
    fn unk_leaves_are_merged_last() {
        let (store, policy, rec) = setup(11);
        let mut tape = Tape::new(&store);
        let leaves = random_leaves(&mut tape, 4, 12);
        let unk = [false, true, false, false];
        let built = build_tree(&mut tape, &leaves, &unk, &policy, &rec, BuildMode::Eval).unwrap();
        // The first merge must avoid leaf 1.
        let first = built.tree.merge_log()[0].position;
        assert_eq!(first, 2);
        built.tree.check_invariants().unwrap();
    }

    #[test]
    fn expert_mode_follows_the_expert() {
        let (store, policy, rec) = setup(13);
        let mut tape = Tape::new(&store);
        let leaves = random_leaves(&mut tape, 4, 14);
        let expert = ExpertTree::parse("((w0 w1) (w2 w3))").unwrap();
        let built = build_tree(&mut tape, &leaves, &[], &policy, &rec, BuildMode::Expert(&expert)).unwrap();
        let mut spans = built.tree.internal_spans();
        spans.sort();
        let mut want: Vec<Span> = expert.spans().iter().copied().collect();
        want.sort();
        assert_eq!(spans, want);
        // First layer: both (0,2) and (2,4) are valid; the likelier one wins.
        let p = &built.tree.merge_log()[0].probs;
        let first = built.tree.merge_log()[0].position;
        assert_eq!(first, if p[2] > p[0] { 2 } else { 0 });
        let loss = built.tree_loss(&mut tape).unwrap().unwrap();
        assert!(tape.scalar(loss) > 0.0);
        let three = ExpertTree::parse("((w0 w1) w2)").unwrap();
        assert!(build_tree(&mut tape, &leaves, &[], &policy, &rec, BuildMode::Expert(&three)).is_err());
    }

    #[test]
    fn uniform_candidates_give_ln_k_tree_loss() {
        let (mut store, policy, rec) = setup(15);
        store.values_mut(policy.query).iter_mut().for_each(|v| *v = 0.0);
        let mut tape = Tape::new(&store);
        let leaves = random_leaves(&mut tape, 5, 16);
        let expert = ExpertTree::parse("(w0 (w1 (w2 (w3 w4))))").unwrap();
        let built = build_tree(&mut tape, &leaves, &[], &policy, &rec, BuildMode::Expert(&expert)).unwrap();
        let first = tape.cross_entropy(built.layers[0].logits, None, built.layers[0].chosen).unwrap();
        assert!((tape.scalar(first) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn invariant_checker_catches_corruption() {
        let mut t = RvGTree::from_merges(4, &[1, 0, 0]).unwrap();
        t.check_invariants().unwrap();
        assert_eq!(t.post_order().last(), Some(&t.root()));
        t.merge_log[1].position = 1;
        assert!(t.check_invariants().is_err());
        assert!(RvGTree::from_merges(3, &[2]).is_err());
        assert!(RvGTree::from_merges(3, &[0]).is_err());
    }

    proptest! {
        #[test]
        fn built_trees_satisfy_invariants(m in 1usize..9, seed in 0u64..1000, train in any::<bool>()) {
            let (store, policy, rec) = setup(seed);
            let mut tape = Tape::new(&store);
            let leaves = random_leaves(&mut tape, m, seed + 1);
            let mut s = GumbelSampler::new(1.0, true, seed).unwrap();
            let mode = if train { BuildMode::Train(&mut s) } else { BuildMode::Eval };
            let built = build_tree(&mut tape, &leaves, &[], &policy, &rec, mode).unwrap();
            prop_assert!(built.tree.check_invariants().is_ok());
            prop_assert_eq!(built.tree.num_internal(), m - 1);
            prop_assert_eq!(built.states.len(), 2 * m - 1);
        }

        #[test]
        fn eval_choice_is_shift_invariant(logits in proptest::collection::vec(-5.0f64..5.0, 2..8), c in -50.0f64..50.0) {
            let shifted: Vec<f64> = logits.iter().map(|l| l + c).collect();
            prop_assert_eq!(ops::argmax(&logits, None).unwrap(), ops::argmax(&shifted, None).unwrap());
            let mut a = GumbelSampler::new(1.0, true, 5).unwrap();
            let mut b = GumbelSampler::new(1.0, true, 5).unwrap();
            prop_assert_eq!(a.sample(&logits, None).unwrap().index, b.sample(&shifted, None).unwrap().index);
        }
    }
}
