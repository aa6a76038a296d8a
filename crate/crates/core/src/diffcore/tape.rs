//! Tape-based reverse-mode differentiation over small dense vectors.
//!
//! A [`Tape`] borrows a [`ParameterStore`] for the duration of one forward
//! pass. Every primitive pushes a node whose inputs already exist, so the
//! node list is a topological order and `backward` is a single reverse sweep.
//! Parameter values are read in place; parameter gradients come back as a
//! [`Gradients`] set that the caller accumulates into the store.

use std::collections::HashMap;

use super::ops;
use super::store::{numel, Gradients, ParamId, ParameterStore};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    ParamRow { param: ParamId, row: usize },
    MatVec(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Dot(Var, Var),
    Sum(Vec<Var>),
    Stack(Vec<Var>),
    Index(Var, usize),
    Softmax(Var),
    L2Normalize { input: Var, norm: f64 },
    WeightedSum { weights: Var, items: Vec<Var> },
    CrossEntropy {
        logits: Var,
        target: usize,
        mask: Option<Vec<bool>>,
    },
    StraightThrough(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
}

pub struct Tape<'s> {
    store: &'s ParameterStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParameterStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParameterStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.store.values(id),
            _ => &node.value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Length of a vector or scalar value.
    pub fn width(&self, v: Var) -> usize {
        numel(&self.nodes[v.0].shape)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, name: &'static str) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { value, shape, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn vector_len(&self, v: Var, op: &'static str) -> Result<usize> {
        match self.nodes[v.0].shape.len() {
            0 => Ok(1),
            1 => Ok(self.nodes[v.0].shape[0]),
            _ => Err(Error::shape(op, format!("expected a vector, got {:?}", self.shape(v)))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn constant(&mut self, values: Vec<f64>, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != values.len() {
            return Err(Error::shape("constant", format!("{shape:?} vs {} values", values.len())));
        }
        self.push(Op::Constant, shape, values, "constant")
    }

    pub fn vector(&mut self, values: Vec<f64>) -> Result<Var> {
        let n = values.len();
        self.constant(values, vec![n])
    }

    pub fn zeros(&mut self, n: usize) -> Result<Var> {
        self.vector(vec![0.0; n])
    }

    /// The whole parameter tensor. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let shape = self.store.shape(id).to_vec();
        self.nodes.push(Node {
            value: Vec::new(),
            shape,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// One row of a 2-D parameter (embedding lookup).
    pub fn param_row(&mut self, id: ParamId, row: usize) -> Result<Var> {
        let shape = self.store.shape(id);
        if shape.len() != 2 {
            return Err(Error::shape("param_row", format!("parameter shape {shape:?}")));
        }
        let (rows, cols) = (shape[0], shape[1]);
        if row >= rows {
            return Err(Error::OutOfRange {
                what: "parameter row",
                index: row,
                len: rows,
            });
        }
        let value = self.store.values(id)[row * cols..(row + 1) * cols].to_vec();
        self.push(Op::ParamRow { param: id, row }, vec![cols], value, "param_row")
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        let xn = self.vector_len(x, "matvec")?;
        if ws.len() != 2 || ws[1] != xn {
            return Err(Error::shape("matvec", format!("{ws:?} x [{xn}]")));
        }
        let value = ops::matvec(self.value(w), ws[1], self.value(x));
        self.push(Op::MatVec(w, x), vec![ws[0]], value, "matvec")
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(op, shape, value, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let value = self.value(a).iter().map(|x| x * k).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale(a, k), shape, value, "scale")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).iter().map(|x| ops::sigmoid(*x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Sigmoid(a), shape, value, "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).iter().map(|x| x.tanh()).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Tanh(a), shape, value, "tanh")
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut value = Vec::new();
        for p in parts {
            self.vector_len(*p, "concat")?;
            value.extend_from_slice(self.value(*p));
        }
        let n = value.len();
        self.push(Op::Concat(parts.to_vec()), vec![n], value, "concat")
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.vector_len(a, "slice")?;
        if start + len > n {
            return Err(Error::shape("slice", format!("[{start}, {}) of length {n}", start + len)));
        }
        let value = self.value(a)[start..start + len].to_vec();
        self.push(Op::Slice(a, start), vec![len], value, "slice")
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "dot")?;
        let value = vec![ops::dot(self.value(a), self.value(b))];
        self.push(Op::Dot(a, b), vec![], value, "dot")
    }

    /// Element-wise sum of same-shape values.
    pub fn sum(&mut self, items: &[Var]) -> Result<Var> {
        let first = *items.first().ok_or_else(|| Error::shape("sum", "no inputs"))?;
        let mut value = self.value(first).to_vec();
        for v in &items[1..] {
            self.same_shape(first, *v, "sum")?;
            value.iter_mut().zip(self.value(*v)).for_each(|(a, b)| *a += b);
        }
        let shape = self.shape(first).to_vec();
        self.push(Op::Sum(items.to_vec()), shape, value, "sum")
    }

    pub fn mean(&mut self, items: &[Var]) -> Result<Var> {
        let s = self.sum(items)?;
        self.scale(s, 1.0 / items.len() as f64)
    }

    /// Gathers scalars into a vector.
    pub fn stack(&mut self, scalars: &[Var]) -> Result<Var> {
        let mut value = Vec::with_capacity(scalars.len());
        for s in scalars {
            if self.width(*s) != 1 {
                return Err(Error::shape("stack", format!("non-scalar input {:?}", self.shape(*s))));
            }
            value.push(self.value(*s)[0]);
        }
        let n = value.len();
        self.push(Op::Stack(scalars.to_vec()), vec![n], value, "stack")
    }

    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let n = self.vector_len(a, "index")?;
        if i >= n {
            return Err(Error::OutOfRange {
                what: "vector",
                index: i,
                len: n,
            });
        }
        let value = vec![self.value(a)[i]];
        self.push(Op::Index(a, i), vec![], value, "index")
    }

    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let n = self.vector_len(a, "softmax")?;
        let value = ops::softmax(self.value(a), mask)?;
        self.push(Op::Softmax(a), vec![n], value, "softmax")
    }

    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let n = self.vector_len(a, "l2_normalize")?;
        let x = self.value(a);
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let value = ops::l2_normalize(x);
        self.push(Op::L2Normalize { input: a, norm }, vec![n], value, "l2_normalize")
    }

    /// `Σ_k weights[k] * items[k]`.
    pub fn weighted_sum(&mut self, weights: Var, items: &[Var]) -> Result<Var> {
        let k = self.vector_len(weights, "weighted_sum")?;
        if k != items.len() || items.is_empty() {
            return Err(Error::shape("weighted_sum", format!("{k} weights for {} items", items.len())));
        }
        let first = items[0];
        let mut value = vec![0.0; self.width(first)];
        for (j, item) in items.iter().enumerate() {
            self.same_shape(first, *item, "weighted_sum")?;
            let w = self.value(weights)[j];
            value.iter_mut().zip(self.value(*item)).for_each(|(a, b)| *a += w * b);
        }
        let shape = self.shape(first).to_vec();
        self.push(
            Op::WeightedSum {
                weights,
                items: items.to_vec(),
            },
            shape,
            value,
            "weighted_sum",
        )
    }

    /// `-log softmax(logits)[target]` over the unmasked entries.
    pub fn cross_entropy(&mut self, logits: Var, mask: Option<&[bool]>, target: usize) -> Result<Var> {
        let n = self.vector_len(logits, "cross_entropy")?;
        if target >= n {
            return Err(Error::OutOfRange {
                what: "target",
                index: target,
                len: n,
            });
        }
        if mask.is_some_and(|m| m.get(target) == Some(&false)) {
            return Err(Error::Invalid(format!("target {target} is masked")));
        }
        let x = self.value(logits);
        let value = vec![ops::log_sum_exp(x, mask)? - x[target]];
        let op = Op::CrossEntropy {
            logits,
            target,
            mask: mask.map(<[bool]>::to_vec),
        };
        self.push(op, vec![], value, "cross_entropy")
    }

    /// Forward value `hard`, gradient routed unchanged into `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Vec<f64>) -> Result<Var> {
        let shape = self.shape(soft).to_vec();
        if numel(&shape) != hard.len() {
            return Err(Error::shape("straight_through", "hard/soft length mismatch"));
        }
        self.push(Op::StraightThrough(soft), shape, hard, "straight_through")
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let shape = self.shape(output);
        if numel(shape) != 1 || shape.len() > 1 {
            return Err(Error::NotScalar(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        let mut out = Gradients::for_store(self.store);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut sink = Sink {
                tape: self,
                grads: &mut grads,
                params: &mut out,
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let n = g.len();
                    let buf = sink.params.buf_mut(*id, n);
                    buf.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                Op::ParamRow { param, row } => {
                    let cols = g.len();
                    let total = self.store.tensor(*param).len();
                    let buf = sink.params.buf_mut(*param, total);
                    buf[row * cols..(row + 1) * cols]
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(a, b)| *a += b);
                }
                Op::MatVec(w, x) => {
                    let cols = self.shape(*w)[1];
                    let wv = self.value(*w);
                    let xv = self.value(*x);
                    sink.with(*w, |dw| {
                        for (r, gr) in g.iter().enumerate() {
                            if *gr != 0.0 {
                                let row = &mut dw[r * cols..(r + 1) * cols];
                                row.iter_mut().zip(xv).for_each(|(a, b)| *a += gr * b);
                            }
                        }
                    });
                    sink.with(*x, |dx| {
                        for (r, gr) in g.iter().enumerate() {
                            if *gr != 0.0 {
                                let row = &wv[r * cols..(r + 1) * cols];
                                dx.iter_mut().zip(row).for_each(|(a, b)| *a += gr * b);
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    sink.add(*a, &g, 1.0);
                    sink.add(*b, &g, 1.0);
                }
                Op::Sub(a, b) => {
                    sink.add(*a, &g, 1.0);
                    sink.add(*b, &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    sink.with(*a, |d| d.iter_mut().zip(&g).zip(bv).for_each(|((d, g), y)| *d += g * y));
                    sink.with(*b, |d| d.iter_mut().zip(&g).zip(av).for_each(|((d, g), x)| *d += g * x));
                }
                Op::Scale(a, k) => sink.add(*a, &g, *k),
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    sink.with(*a, |d| {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(y) {
                            *d += g * y * (1.0 - y);
                        }
                    });
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    sink.with(*a, |d| {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(y) {
                            *d += g * (1.0 - y * y);
                        }
                    });
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.width(*p);
                        sink.add(*p, &g[off..off + n], 1.0);
                        off += n;
                    }
                }
                Op::Slice(a, start) => {
                    let start = *start;
                    sink.with(*a, |d| {
                        d[start..start + g.len()].iter_mut().zip(&g).for_each(|(d, g)| *d += g);
                    });
                }
                Op::Dot(a, b) => {
                    let s = g[0];
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    sink.add(*a, bv, s);
                    sink.add(*b, av, s);
                }
                Op::Sum(items) => {
                    for v in items {
                        sink.add(*v, &g, 1.0);
                    }
                }
                Op::Stack(items) => {
                    for (v, gi) in items.iter().zip(&g) {
                        sink.add(*v, std::slice::from_ref(gi), 1.0);
                    }
                }
                Op::Index(a, i) => {
                    let i = *i;
                    sink.with(*a, |d| d[i] += g[0]);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let yg = ops::dot(y, &g);
                    sink.with(*a, |d| {
                        for ((d, y), g) in d.iter_mut().zip(y).zip(&g) {
                            *d += y * (g - yg);
                        }
                    });
                }
                Op::L2Normalize { input, norm } => {
                    if *norm > ops::L2_EPS {
                        let y = &node.value;
                        let yg = ops::dot(y, &g);
                        sink.with(*input, |d| {
                            for ((d, y), g) in d.iter_mut().zip(y).zip(&g) {
                                *d += (g - y * yg) / norm;
                            }
                        });
                    }
                }
                Op::WeightedSum { weights, items } => {
                    let wv = self.value(*weights);
                    let dw: Vec<f64> = items.iter().map(|v| ops::dot(self.value(*v), &g)).collect();
                    sink.add(*weights, &dw, 1.0);
                    for (v, w) in items.iter().zip(wv) {
                        if *w != 0.0 {
                            sink.add(*v, &g, *w);
                        }
                    }
                }
                Op::CrossEntropy { logits, target, mask } => {
                    let x = self.value(*logits);
                    let mut p = ops::softmax(x, mask.as_deref())?;
                    p[*target] -= 1.0;
                    sink.add(*logits, &p, g[0]);
                }
                Op::StraightThrough(soft) => sink.add(*soft, &g, 1.0),
            }
        }
        Ok(out)
    }
}

struct Sink<'a, 's> {
    tape: &'a Tape<'s>,
    grads: &'a mut Vec<Option<Vec<f64>>>,
    params: &'a mut Gradients,
}

impl Sink<'_, '_> {
    /// Runs `f` on the gradient buffer of `v`, skipping constants.
    fn with(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.tape.nodes[v.0];
        match node.op {
            Op::Constant => {}
            Op::Param(id) => f(self.params.buf_mut(id, self.tape.store.tensor(id).len())),
            _ => {
                let n = numel(&node.shape);
                f(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
            }
        }
    }

    fn add(&mut self, v: Var, g: &[f64], k: f64) {
        self.with(v, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += k * g));
    }
}
