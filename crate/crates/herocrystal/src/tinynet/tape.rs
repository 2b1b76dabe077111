//! Reverse-mode automatic differentiation over vector-valued nodes.
//!
//! A [`Tape`] is built per training step: leaves are parameter tensors
//! (tracked by name) or constants, interior nodes are the primitives below,
//! and [`Tape::backward`] walks the graph once to produce exact gradients for
//! every named leaf. Supported primitives: affine (mat-vec + add), relu,
//! tanh, exp, log, elementwise arithmetic, sum/mean/dot reductions, slicing,
//! cosine similarity and softmax cross-entropy. Losses such as the Gaussian
//! box NLL are compositions of these.

use indexmap::IndexMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input { key: String },
    Const,
    MatVec { w: NodeId, x: NodeId, rows: usize, cols: usize },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Dot(NodeId, NodeId),
    Slice { x: NodeId, start: usize, len: usize },
    SumN(Vec<NodeId>),
    CosineSim(NodeId, NodeId),
    SoftmaxCe { logits: NodeId, target: usize },
}

struct Node {
    op: Op,
    value: Vec<f64>,
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: IndexMap<String, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.grads.get(name).map(|v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Scale every gradient in place (used by norm clipping).
    pub fn scale_all(&mut self, factor: f64) {
        for grad in self.grads.values_mut() {
            for g in grad.iter_mut() {
                *g *= factor;
            }
        }
    }

    fn accumulate(&mut self, key: &str, grad: &[f64]) {
        match self.grads.get_mut(key) {
            Some(existing) => {
                for (e, g) in existing.iter_mut().zip(grad) {
                    *e += g;
                }
            }
            None => {
                self.grads.insert(key.to_string(), grad.to_vec());
            }
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> NodeId {
        debug_assert!(value.iter().all(|v| v.is_finite() || v.is_nan()), "tape values must be numeric");
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    /// Value of a scalar (length-1) node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1, "node is not scalar");
        self.nodes[id.0].value[0]
    }

    /// Tracked leaf: gradients for it are reported under `key`.
    pub fn input(&mut self, key: impl Into<String>, values: &[f64]) -> NodeId {
        self.push(Op::Input { key: key.into() }, values.to_vec())
    }

    pub fn constant(&mut self, values: &[f64]) -> NodeId {
        self.push(Op::Const, values.to_vec())
    }

    pub fn constant_scalar(&mut self, value: f64) -> NodeId {
        self.push(Op::Const, vec![value])
    }

    /// Copy of `x`'s value that blocks gradient flow (a stop-gradient).
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.clone();
        self.push(Op::Const, v)
    }

    /// y = W x for a row-major `rows x cols` matrix node.
    pub fn matvec(&mut self, w: NodeId, x: NodeId, rows: usize, cols: usize) -> NodeId {
        assert_eq!(self.nodes[w.0].value.len(), rows * cols, "matrix size mismatch");
        assert_eq!(self.nodes[x.0].value.len(), cols, "vector size mismatch");
        let mut out = vec![0.0; rows];
        {
            let wv = &self.nodes[w.0].value;
            let xv = &self.nodes[x.0].value;
            for (i, o) in out.iter_mut().enumerate() {
                let row = &wv[i * cols..(i + 1) * cols];
                *o = row.iter().zip(xv).map(|(a, b)| a * b).sum();
            }
        }
        self.push(Op::MatVec { w, x, rows, cols }, out)
    }

    fn binary_values(&self, a: NodeId, b: NodeId) -> (&[f64], &[f64]) {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.len(), bv.len(), "elementwise op on mismatched lengths");
        (av, bv)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = self.binary_values(a, b);
        let out: Vec<f64> = av.iter().zip(bv).map(|(x, y)| x + y).collect();
        self.push(Op::Add(a, b), out)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = self.binary_values(a, b);
        let out: Vec<f64> = av.iter().zip(bv).map(|(x, y)| x - y).collect();
        self.push(Op::Sub(a, b), out)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = self.binary_values(a, b);
        let out: Vec<f64> = av.iter().zip(bv).map(|(x, y)| x * y).collect();
        self.push(Op::Mul(a, b), out)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        self.push(Op::Scale(a, c), out)
    }

    pub fn offset(&mut self, a: NodeId, c: f64) -> NodeId {
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x + c).collect();
        self.push(Op::Offset(a), out)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x.max(0.0)).collect();
        self.push(Op::Relu(a), out)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x.tanh()).collect();
        self.push(Op::Tanh(a), out)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x.exp()).collect();
        self.push(Op::Exp(a), out)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x.ln()).collect();
        self.push(Op::Log(a), out)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].value.iter().sum();
        self.push(Op::Sum(a), vec![s])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value;
        assert!(!v.is_empty(), "mean of empty node");
        let s: f64 = v.iter().sum::<f64>() / v.len() as f64;
        self.push(Op::Mean(a), vec![s])
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = self.binary_values(a, b);
        let s: f64 = av.iter().zip(bv).map(|(x, y)| x * y).sum();
        self.push(Op::Dot(a, b), vec![s])
    }

    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = &self.nodes[x.0].value;
        assert!(start + len <= v.len(), "slice out of range");
        let out = v[start..start + len].to_vec();
        self.push(Op::Slice { x, start, len }, out)
    }

    /// Sum of scalar nodes.
    pub fn sum_nodes(&mut self, ids: &[NodeId]) -> NodeId {
        assert!(!ids.is_empty(), "sum of no nodes");
        let s: f64 = ids.iter().map(|id| self.scalar(*id)).sum();
        self.push(Op::SumN(ids.to_vec()), vec![s])
    }

    /// Mean of scalar nodes.
    pub fn mean_nodes(&mut self, ids: &[NodeId]) -> NodeId {
        let n = ids.len();
        let s = self.sum_nodes(ids);
        self.scale(s, 1.0 / n as f64)
    }

    /// Cosine similarity of two equal-length vectors. Errors on a zero-norm
    /// argument.
    pub fn cosine_sim(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = self.binary_values(a, b);
        let na: f64 = av.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = bv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na < 1e-12 || nb < 1e-12 {
            return Err(Error::protocol("cosine similarity of zero-norm embedding"));
        }
        let s: f64 = av.iter().zip(bv).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
        Ok(self.push(Op::CosineSim(a, b), vec![s]))
    }

    /// Softmax cross-entropy of one logit vector against an integer target.
    pub fn softmax_ce(&mut self, logits: NodeId, target: usize) -> NodeId {
        let v = &self.nodes[logits.0].value;
        assert!(target < v.len(), "target class out of range");
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let loss = lse - v[target];
        self.push(Op::SoftmaxCe { logits, target }, vec![loss])
    }

    /// Reverse pass from a scalar root; returns gradients for every tracked
    /// leaf that influences it.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=root.0).rev() {
            let g = match adj[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let add_to = |adj: &mut Vec<Option<Vec<f64>>>, id: NodeId, contrib: Vec<f64>| {
                match &mut adj[id.0] {
                    Some(existing) => {
                        for (e, c) in existing.iter_mut().zip(&contrib) {
                            *e += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &self.nodes[idx].op {
                Op::Input { key } => out.accumulate(key, &g),
                Op::Const => {}
                Op::MatVec { w, x, rows, cols } => {
                    let wv = &self.nodes[w.0].value;
                    let xv = &self.nodes[x.0].value;
                    let mut gw = vec![0.0; rows * cols];
                    let mut gx = vec![0.0; *cols];
                    for i in 0..*rows {
                        let gi = g[i];
                        for j in 0..*cols {
                            gw[i * cols + j] = gi * xv[j];
                            gx[j] += gi * wv[i * cols + j];
                        }
                    }
                    add_to(&mut adj, *w, gw);
                    add_to(&mut adj, *x, gx);
                }
                Op::Add(a, b) => {
                    add_to(&mut adj, *a, g.clone());
                    add_to(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    add_to(&mut adj, *a, g.clone());
                    add_to(&mut adj, *b, g.iter().map(|v| -v).collect());
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    add_to(&mut adj, *a, g.iter().zip(bv).map(|(gi, bi)| gi * bi).collect());
                    add_to(&mut adj, *b, g.iter().zip(av).map(|(gi, ai)| gi * ai).collect());
                }
                Op::Scale(a, c) => add_to(&mut adj, *a, g.iter().map(|gi| gi * c).collect()),
                Op::Offset(a) => add_to(&mut adj, *a, g),
                Op::Relu(a) => {
                    let av = &self.nodes[a.0].value;
                    add_to(&mut adj, *a, g.iter().zip(av).map(|(gi, ai)| if *ai > 0.0 { *gi } else { 0.0 }).collect());
                }
                Op::Tanh(a) => {
                    let yv = &self.nodes[idx].value;
                    add_to(&mut adj, *a, g.iter().zip(yv).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect());
                }
                Op::Exp(a) => {
                    let yv = &self.nodes[idx].value;
                    add_to(&mut adj, *a, g.iter().zip(yv).map(|(gi, yi)| gi * yi).collect());
                }
                Op::Log(a) => {
                    let av = &self.nodes[a.0].value;
                    add_to(&mut adj, *a, g.iter().zip(av).map(|(gi, ai)| gi / ai).collect());
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.len();
                    add_to(&mut adj, *a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].value.len();
                    add_to(&mut adj, *a, vec![g[0] / n as f64; n]);
                }
                Op::Dot(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    add_to(&mut adj, *a, bv.iter().map(|bi| g[0] * bi).collect());
                    add_to(&mut adj, *b, av.iter().map(|ai| g[0] * ai).collect());
                }
                Op::Slice { x, start, len } => {
                    let n = self.nodes[x.0].value.len();
                    let mut gx = vec![0.0; n];
                    gx[*start..start + len].copy_from_slice(&g);
                    add_to(&mut adj, *x, gx);
                }
                Op::SumN(ids) => {
                    for id in ids {
                        add_to(&mut adj, *id, vec![g[0]]);
                    }
                }
                Op::CosineSim(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let na = av.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nb = bv.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let s = self.nodes[idx].value[0];
                    let ga: Vec<f64> = av
                        .iter()
                        .zip(bv)
                        .map(|(ai, bi)| g[0] * (bi / (na * nb) - s * ai / (na * na)))
                        .collect();
                    let gb: Vec<f64> = av
                        .iter()
                        .zip(bv)
                        .map(|(ai, bi)| g[0] * (ai / (na * nb) - s * bi / (nb * nb)))
                        .collect();
                    add_to(&mut adj, *a, ga);
                    add_to(&mut adj, *b, gb);
                }
                Op::SoftmaxCe { logits, target } => {
                    let v = &self.nodes[logits.0].value;
                    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = v.iter().map(|x| (x - max).exp()).sum();
                    let gx: Vec<f64> = v
                        .iter()
                        .enumerate()
                        .map(|(i, x)| {
                            let p = (x - max).exp() / denom;
                            g[0] * (p - if i == *target { 1.0 } else { 0.0 })
                        })
                        .collect();
                    add_to(&mut adj, *logits, gx);
                }
            }
        }
        out
    }
}
