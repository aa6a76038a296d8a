//! Word embeddings, the bidirectional LSTM leaf encoder and binary TreeLSTM
//! composition.
//!
//! Leaf states concatenate both LSTM directions for `h` and for `c`, so a
//! node vector `v = [h; c]` has width `4H` where `H` is the per-direction
//! hidden size. The TreeLSTM maps two such states to one of the same width.

use rand::Rng;

use crate::diffcore::{ParamId, ParameterStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Reserved vocabulary ids.
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// A pruned expression as vocabulary ids, optionally padded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceTokens {
    ids: Vec<usize>,
    words: Vec<String>,
    /// `true` for real tokens, `false` for padding.
    mask: Vec<bool>,
}

impl SentenceTokens {
    /// Truncates to `max_len` when given and pads with `pad` up to `pad_to`.
    pub fn new(ids: Vec<usize>, words: Vec<String>, max_len: Option<usize>, pad_to: Option<usize>) -> Result<Self> {
        if ids.len() != words.len() {
            return Err(Error::Invalid("token ids and words differ in length".into()));
        }
        let keep = max_len.map_or(ids.len(), |m| m.min(ids.len()));
        let mut ids = ids[..keep].to_vec();
        let mut words = words[..keep].to_vec();
        let mut mask = vec![true; keep];
        if let Some(p) = pad_to {
            while ids.len() < p {
                ids.push(PAD_ID);
                words.push("pad".into());
                mask.push(false);
            }
        }
        Ok(SentenceTokens { ids, words, mask })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Total positions including padding.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of real (unpadded) tokens; padding only ever trails.
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn real_words(&self) -> &[String] {
        &self.words[..self.real_len()]
    }

    pub fn is_unk(&self, i: usize) -> bool {
        self.ids[i] == UNK_ID
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderDims {
    pub vocab: usize,
    /// Word embedding width `b`.
    pub embed: usize,
    /// Per-direction LSTM hidden width `H`.
    pub hidden: usize,
}

impl EncoderDims {
    /// Width of `h` (and of `c`) in every node state.
    pub fn state_half(&self) -> usize {
        2 * self.hidden
    }

    /// Width of a full node vector `v = [h; c]`.
    pub fn node_width(&self) -> usize {
        4 * self.hidden
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EmbeddingTable {
    pub id: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

/// BiLSTM and TreeLSTM weights.
#[derive(Debug, Clone, Copy)]
pub struct RecurrentParams {
    pub fwd_w: ParamId,
    pub fwd_b: ParamId,
    pub bwd_w: ParamId,
    pub bwd_b: ParamId,
    /// Gates `[i; f_left; f_right; o; u]`, each of width `2H`.
    pub tree_w: ParamId,
    pub tree_b: ParamId,
    pub dims: EncoderDims,
}

pub(crate) fn uniform<R: Rng>(rng: &mut R, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

fn weight<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Result<Tensor> {
    Tensor::new(vec![rows, cols], uniform(rng, rows * cols, 1.0 / (cols as f64).sqrt()))
}

impl EmbeddingTable {
    pub fn register<R: Rng>(store: &mut ParameterStore, vocab: usize, dim: usize, rng: &mut R) -> Result<Self> {
        let values = uniform(rng, vocab * dim, 0.5);
        let id = store.register("embedding", Tensor::new(vec![vocab, dim], values)?)?;
        Ok(EmbeddingTable { id, vocab, dim })
    }

    /// Overwrites rows with pretrained vectors; rows not in `vectors` keep
    /// their random initialization. Returns the number of rows replaced.
    pub fn warm_start(&self, store: &mut ParameterStore, vectors: &[(usize, Vec<f64>)]) -> Result<usize> {
        let mut n = 0;
        for (row, v) in vectors {
            if *row >= self.vocab || v.len() != self.dim {
                return Err(Error::Validation(format!(
                    "pretrained vector for row {row} has width {} (expected {})",
                    v.len(),
                    self.dim
                )));
            }
            store.values_mut(self.id)[row * self.dim..(row + 1) * self.dim].copy_from_slice(v);
            n += 1;
        }
        Ok(n)
    }
}

impl RecurrentParams {
    pub fn register<R: Rng>(store: &mut ParameterStore, dims: EncoderDims, rng: &mut R) -> Result<Self> {
        let h = dims.hidden;
        let lstm_in = dims.embed + h;
        let mut lstm_bias = vec![0.0; 4 * h];
        // Gate order i, f, g, o.
        lstm_bias[h..2 * h].iter_mut().for_each(|b| *b = 1.0);
        let fwd_w = store.register("lstm_fwd.w", weight(rng, 4 * h, lstm_in)?)?;
        let fwd_b = store.register("lstm_fwd.b", Tensor::new(vec![4 * h], lstm_bias.clone())?)?;
        let bwd_w = store.register("lstm_bwd.w", weight(rng, 4 * h, lstm_in)?)?;
        let bwd_b = store.register("lstm_bwd.b", Tensor::new(vec![4 * h], lstm_bias)?)?;

        let half = dims.state_half();
        let mut tree_bias = vec![0.0; 5 * half];
        tree_bias[half..3 * half].iter_mut().for_each(|b| *b = 1.0);
        let tree_w = store.register("treelstm.w", weight(rng, 5 * half, 2 * half)?)?;
        let tree_b = store.register("treelstm.b", Tensor::new(vec![5 * half], tree_bias)?)?;
        Ok(RecurrentParams {
            fwd_w,
            fwd_b,
            bwd_w,
            bwd_b,
            tree_w,
            tree_b,
            dims,
        })
    }
}

/// Hidden and memory vectors of one node plus their concatenation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeState {
    pub h: Var,
    pub c: Var,
    pub v: Var,
}

impl NodeState {
    pub fn from_parts(tape: &mut Tape, h: Var, c: Var) -> Result<Self> {
        let v = tape.concat(&[h, c])?;
        Ok(NodeState { h, c, v })
    }
}

/// Embedding rows for each position, with the padding mask alongside.
pub struct Embedded {
    pub vectors: Vec<Var>,
    pub mask: Vec<bool>,
}

pub fn embed_tokens(tape: &mut Tape, tokens: &SentenceTokens, table: &EmbeddingTable) -> Result<Embedded> {
    let vectors = tokens
        .ids()
        .iter()
        .map(|&id| {
            if id >= table.vocab {
                return Err(Error::OutOfRange {
                    what: "token id",
                    index: id,
                    len: table.vocab,
                });
            }
            tape.param_row(table.id, id)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Embedded {
        vectors,
        mask: tokens.mask().to_vec(),
    })
}

fn lstm_step(tape: &mut Tape, w: Var, b: Var, x: Var, h: Var, c: Var, hidden: usize) -> Result<(Var, Var)> {
    let input = tape.concat(&[x, h])?;
    let pre = tape.matvec(w, input)?;
    let pre = tape.add(pre, b)?;
    let i = tape.slice(pre, 0, hidden)?;
    let f = tape.slice(pre, hidden, hidden)?;
    let g = tape.slice(pre, 2 * hidden, hidden)?;
    let o = tape.slice(pre, 3 * hidden, hidden)?;
    let i = tape.sigmoid(i)?;
    let f = tape.sigmoid(f)?;
    let g = tape.tanh(g)?;
    let o = tape.sigmoid(o)?;
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c)?;
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

fn run_direction(tape: &mut Tape, xs: &[Var], w: ParamId, b: ParamId, hidden: usize, reverse: bool) -> Result<Vec<(Var, Var)>> {
    let w = tape.param(w);
    let b = tape.param(b);
    let mut h = tape.zeros(hidden)?;
    let mut c = tape.zeros(hidden)?;
    let mut out = vec![(h, c); xs.len()];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..xs.len()).rev())
    } else {
        Box::new(0..xs.len())
    };
    for t in order {
        (h, c) = lstm_step(tape, w, b, xs[t], h, c, hidden)?;
        out[t] = (h, c);
    }
    Ok(out)
}

/// Leaf states `v_l = [h_fwd; h_bwd; c_fwd; c_bwd]` for every position,
/// padding included.
pub fn bilstm_leaf_states(tape: &mut Tape, embedded: &Embedded, params: &RecurrentParams) -> Result<Vec<NodeState>> {
    if !embedded.mask.iter().any(|m| *m) {
        return Err(Error::Invalid("sentence has no unmasked tokens".into()));
    }
    for v in &embedded.vectors {
        if tape.width(*v) != params.dims.embed {
            return Err(Error::shape("bilstm", format!("embedding width {}", tape.width(*v))));
        }
    }
    let hidden = params.dims.hidden;
    let fwd = run_direction(tape, &embedded.vectors, params.fwd_w, params.fwd_b, hidden, false)?;
    let bwd = run_direction(tape, &embedded.vectors, params.bwd_w, params.bwd_b, hidden, true)?;
    fwd.iter()
        .zip(&bwd)
        .map(|(&(hf, cf), &(hb, cb))| {
            let h = tape.concat(&[hf, hb])?;
            let c = tape.concat(&[cf, cb])?;
            NodeState::from_parts(tape, h, c)
        })
        .collect()
}

/// Binary TreeLSTM with separate left/right forget gates.
pub fn treelstm_merge(tape: &mut Tape, left: &NodeState, right: &NodeState, params: &RecurrentParams) -> Result<NodeState> {
    let half = params.dims.state_half();
    for s in [left, right] {
        if tape.width(s.h) != half || tape.width(s.c) != half {
            return Err(Error::shape(
                "treelstm_merge",
                format!("child widths h={} c={} (expected {half})", tape.width(s.h), tape.width(s.c)),
            ));
        }
    }
    let w = tape.param(params.tree_w);
    let b = tape.param(params.tree_b);
    let z = tape.concat(&[left.h, right.h])?;
    let pre = tape.matvec(w, z)?;
    let pre = tape.add(pre, b)?;
    let gate = |tape: &mut Tape, k: usize| tape.slice(pre, k * half, half);
    let i = gate(tape, 0)?;
    let fl = gate(tape, 1)?;
    let fr = gate(tape, 2)?;
    let o = gate(tape, 3)?;
    let u = gate(tape, 4)?;
    let i = tape.sigmoid(i)?;
    let fl = tape.sigmoid(fl)?;
    let fr = tape.sigmoid(fr)?;
    let o = tape.sigmoid(o)?;
    let u = tape.tanh(u)?;
    let cl = tape.mul(fl, left.c)?;
    let cr = tape.mul(fr, right.c)?;
    let iu = tape.mul(i, u)?;
    let c = tape.sum(&[cl, cr, iu])?;
    let tc = tape.tanh(c)?;
    let h = tape.mul(o, tc)?;
    NodeState::from_parts(tape, h, c)
}
