use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{gemm, softmax_in_place};
use super::params::{ParamId, ParamStore};
use super::tensor::check_finite;
use super::{Tensor, TensorError};

/// Additive penalty for inadmissible attention entries.
pub const MASK_NEG: f64 = -1e9;

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// One attention problem inside a packed batch: a block of query rows against a
/// block of key/value rows.
#[derive(Debug, Clone)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    /// Query `i` may only see keys `j <= i`.
    pub causal: bool,
    /// Row-major `q_len x k_len` factors multiplied into admissible scaled scores.
    pub weights: Option<Arc<Vec<f64>>>,
}

impl AttnSegment {
    pub fn admissible(&self, i: usize, j: usize) -> bool {
        !self.causal || j <= i
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    AddRow { x: NodeId, bias: NodeId },
    Scale { x: NodeId, factor: f64 },
    ScaleRows { x: NodeId, scales: Arc<Vec<f64>> },
    MulConst { x: NodeId, mask: Vec<f64> },
    Relu { x: NodeId },
    Softmax { x: NodeId },
    MaskScores { x: NodeId, weights: Option<Arc<Vec<f64>>>, admissible: Arc<Vec<bool>> },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Vec<f64>, rstd: Vec<f64> },
    Gather { sources: Vec<NodeId>, picks: Vec<(u32, u32)> },
    ConcatCols { parts: Vec<NodeId> },
    Reshape { x: NodeId },
    Attention { q: NodeId, k: NodeId, v: NodeId, segments: Arc<Vec<AttnSegment>>, heads: usize, probs: Vec<f64> },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, valid: Vec<bool>, eps: f64, probs: Vec<f64>, count: usize },
    Sum { x: NodeId },
    Mean { x: NodeId },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording tape for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it and
/// `backward` is a single reverse sweep. A graph built with [`Graph::no_grad`]
/// evaluates the same kernels but keeps no backward state.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    record: bool,
    params: HashMap<ParamId, NodeId>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
            params: HashMap::new(),
        }
    }

    pub fn no_grad() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node from index `len` on. Node ids at or past `len` become
    /// invalid; parameters first used after that point are re-created on demand.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.params.retain(|_, n| n.0 < len);
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let needs_grad = self.record && inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        self.record && ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    /// A value that participates in the computation but never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A free variable that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> NodeId {
        let needs_grad = self.record;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf node for a stored parameter; repeated calls return the same node, so a
    /// parameter bank used twice accumulates both contributions.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let p = store.get(id);
        let mut value = p.value.clone();
        value.grad = None;
        let node = if p.frozen {
            self.constant(value)
        } else {
            self.variable(value)
        };
        self.params.insert(id, node);
        node
    }

    /// Parameters that entered this graph, with their node ids.
    pub fn param_nodes(&self) -> impl Iterator<Item = (ParamId, NodeId)> + '_ {
        self.params.iter().map(|(&p, &n)| (p, n))
    }

    fn mat_dims(&self, op: &'static str, id: NodeId) -> Result<(usize, usize), TensorError> {
        let t = self.value(id);
        if t.shape().len() != 2 {
            return Err(TensorError::Rank {
                op,
                shape: t.shape().to_vec(),
            });
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, k) = self.mat_dims("matmul", a)?;
        let (k2, n) = self.mat_dims("matmul", b)?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let t = Tensor::from_op("matmul", vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul { a, b }, &[a, b]))
    }

    fn zip(&mut self, op: &'static str, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, TensorError> {
        self.same_shape(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_op(op, va.shape().to_vec(), out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let t = self.zip("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let t = self.zip("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let t = self.zip("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul { a, b }, &[a, b]))
    }

    /// `x[i, :] + bias` for every row.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.shape() != [xv.cols()] {
            return Err(TensorError::Shape {
                op: "add_row",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let c = xv.cols();
        let b = bv.data();
        let out = xv.data().iter().enumerate().map(|(i, &v)| v + b[i % c]).collect();
        let t = Tensor::from_op("add_row", xv.shape().to_vec(), out)?;
        Ok(self.push(t, Op::AddRow { x, bias }, &[x, bias]))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId, TensorError> {
        let xv = self.value(x);
        let out = xv.data().iter().map(|&v| v * factor).collect();
        let t = Tensor::from_op("scale", xv.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Scale { x, factor }, &[x]))
    }

    /// Multiplies row `i` by the constant `scales[i]`.
    pub fn scale_rows(&mut self, x: NodeId, scales: Arc<Vec<f64>>) -> Result<NodeId, TensorError> {
        let xv = self.value(x);
        if scales.len() != xv.rows() {
            return Err(TensorError::Shape {
                op: "scale_rows",
                lhs: xv.shape().to_vec(),
                rhs: vec![scales.len()],
            });
        }
        let c = xv.cols();
        let out = xv.data().iter().enumerate().map(|(i, &v)| v * scales[i / c]).collect();
        let t = Tensor::from_op("scale_rows", xv.shape().to_vec(), out)?;
        Ok(self.push(t, Op::ScaleRows { x, scales }, &[x]))
    }

    /// Elementwise product with a constant buffer (dropout keep-masks).
    pub fn mul_const(&mut self, x: NodeId, mask: Vec<f64>) -> Result<NodeId, TensorError> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(TensorError::Shape {
                op: "mul_const",
                lhs: xv.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let out = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::from_op("mul_const", xv.shape().to_vec(), out)?;
        Ok(self.push(t, Op::MulConst { x, mask }, &[x]))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xv = self.value(x);
        let out = xv.data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::from_op("relu", xv.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Relu { x }, &[x]))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.mat_dims("softmax_rows", x)?;
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let t = Tensor::from_op("softmax_rows", xv.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax { x }, &[x]))
    }

    /// Score transform used by masked attention: admissible entries are multiplied
    /// by `weights` (when given), inadmissible entries get [`MASK_NEG`] added.
    pub fn mask_scores(
        &mut self,
        x: NodeId,
        weights: Option<Arc<Vec<f64>>>,
        admissible: Arc<Vec<bool>>,
    ) -> Result<NodeId, TensorError> {
        let xv = self.value(x);
        let n = xv.len();
        if admissible.len() != n || weights.as_ref().is_some_and(|w| w.len() != n) {
            return Err(TensorError::Shape {
                op: "mask_scores",
                lhs: xv.shape().to_vec(),
                rhs: vec![admissible.len()],
            });
        }
        let out = (0..n)
            .map(|i| {
                let s = xv.data()[i];
                match (admissible[i], &weights) {
                    (true, Some(w)) => s * w[i],
                    (true, None) => s,
                    (false, _) => s + MASK_NEG,
                }
            })
            .collect();
        let t = Tensor::from_op("mask_scores", xv.shape().to_vec(), out)?;
        Ok(self.push(t, Op::MaskScores { x, weights, admissible }, &[x]))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (m, n) = self.mat_dims("layer_norm", x)?;
        if n < 2 {
            return Err(TensorError::Invalid("layer_norm needs at least 2 columns".into()));
        }
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.shape() != [n] || bv.shape() != [n] {
            return Err(TensorError::Shape {
                op: "layer_norm",
                lhs: vec![m, n],
                rhs: gv.shape().to_vec(),
            });
        }
        let xd = self.value(x).data();
        let (g, b) = (gv.data(), bv.data());
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        for r in 0..m {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::from_op("layer_norm", vec![m, n], out)?;
        let keep = self.needs(&[x, gain, bias]);
        let (xhat, rstd) = if keep { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    /// Builds a matrix whose row `r` is row `picks[r].1` of `sources[picks[r].0]`.
    /// Embedding lookup, row concatenation and stream merging are all this op.
    pub fn gather(&mut self, sources: &[NodeId], picks: Vec<(u32, u32)>) -> Result<NodeId, TensorError> {
        if sources.is_empty() || picks.is_empty() {
            return Err(TensorError::Invalid("gather needs sources and picks".into()));
        }
        let c = self.value(sources[0]).cols();
        for &s in sources {
            self.mat_dims("gather", s)?;
            if self.value(s).cols() != c {
                return Err(TensorError::Shape {
                    op: "gather",
                    lhs: self.value(sources[0]).shape().to_vec(),
                    rhs: self.value(s).shape().to_vec(),
                });
            }
        }
        let mut out = Vec::with_capacity(picks.len() * c);
        for &(s, r) in &picks {
            let src = self.value(*sources.get(s as usize).ok_or_else(|| TensorError::Invalid(format!("gather source {s}")))?);
            if r as usize >= src.rows() {
                return Err(TensorError::Invalid(format!("gather row {r} of {}", src.rows())));
            }
            out.extend_from_slice(src.row(r as usize));
        }
        let t = Tensor::from_op("gather", vec![picks.len(), c], out)?;
        Ok(self.push(t, Op::Gather { sources: sources.to_vec(), picks }, sources))
    }

    pub fn gather_rows(&mut self, source: NodeId, rows: &[usize]) -> Result<NodeId, TensorError> {
        self.gather(&[source], rows.iter().map(|&r| (0, r as u32)).collect())
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        let mut picks = Vec::new();
        for (s, &p) in parts.iter().enumerate() {
            for r in 0..self.value(p).rows() {
                picks.push((s as u32, r as u32));
            }
        }
        self.gather(parts, picks)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        let first = *parts.first().ok_or_else(|| TensorError::Invalid("concat_cols of nothing".into()))?;
        let (m, _) = self.mat_dims("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.mat_dims("concat_cols", p)?;
            if pm != m {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: vec![m],
                    rhs: vec![pm, pn],
                });
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::from_op("concat_cols", vec![m, n], out)?;
        Ok(self.push(t, Op::ConcatCols { parts: parts.to_vec() }, parts))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, TensorError> {
        let t = self.value(x).clone();
        let mut t = t.reshaped(shape)?;
        t.grad = None;
        Ok(self.push(t, Op::Reshape { x }, &[x]))
    }

    /// Multi-head scaled dot-product attention over a packed batch.
    ///
    /// `q` is `[Nq x d]`, `k` and `v` are `[Nk x d]`; head `h` uses columns
    /// `h*d/heads..(h+1)*d/heads`. Scores are `q.k / sqrt(d_k)`, then transformed
    /// as in [`Graph::mask_scores`], then softmaxed over keys. Query rows outside
    /// every segment produce zeros.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        segments: Arc<Vec<AttnSegment>>,
    ) -> Result<NodeId, TensorError> {
        let (nq, d) = self.mat_dims("attention", q)?;
        let (nk, dk_all) = self.mat_dims("attention", k)?;
        let (nv, dv_all) = self.mat_dims("attention", v)?;
        if dk_all != d || dv_all != d || nv != nk {
            return Err(TensorError::Shape {
                op: "attention",
                lhs: vec![nq, d],
                rhs: vec![nk, dk_all],
            });
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Invalid(format!("{heads} heads do not divide width {d}")));
        }
        for s in segments.iter() {
            let bad_w = s.weights.as_ref().is_some_and(|w| w.len() != s.q_len * s.k_len);
            if s.q_start + s.q_len > nq || s.k_start + s.k_len > nk || s.k_len == 0 || bad_w || (s.causal && s.q_len > s.k_len) {
                return Err(TensorError::Invalid(format!("bad attention segment {s:?}")));
            }
        }
        let dk = d / heads;
        let inv = 1.0 / (dk as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let total: usize = segments.iter().map(|s| s.q_len * s.k_len).sum::<usize>() * heads;
        let mut probs = vec![0.0; total];
        let mut out = vec![0.0; nq * d];
        let mut off = 0;
        for s in segments.iter() {
            for h in 0..heads {
                let c0 = h * dk;
                for i in 0..s.q_len {
                    let qi = &qd[(s.q_start + i) * d + c0..(s.q_start + i) * d + c0 + dk];
                    let p = &mut probs[off + i * s.k_len..off + (i + 1) * s.k_len];
                    for (j, pj) in p.iter_mut().enumerate() {
                        let kj = &kd[(s.k_start + j) * d + c0..(s.k_start + j) * d + c0 + dk];
                        let raw = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * inv;
                        *pj = if s.admissible(i, j) {
                            match &s.weights {
                                Some(w) => raw * w[i * s.k_len + j],
                                None => raw,
                            }
                        } else {
                            raw + MASK_NEG
                        };
                    }
                    softmax_in_place(p);
                    let o = &mut out[(s.q_start + i) * d + c0..(s.q_start + i) * d + c0 + dk];
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = &vd[(s.k_start + j) * d + c0..(s.k_start + j) * d + c0 + dk];
                        for (oc, vc) in o.iter_mut().zip(vj) {
                            *oc += pj * vc;
                        }
                    }
                }
                off += s.q_len * s.k_len;
            }
        }
        let t = Tensor::from_op("attention", vec![nq, d], out)?;
        let probs = if self.needs(&[q, k, v]) { probs } else { Vec::new() };
        Ok(self.push(t, Op::Attention { q, k, v, segments, heads, probs }, &[q, k, v]))
    }

    /// Mean label-smoothed cross-entropy over the rows flagged valid.
    ///
    /// The target distribution puts `1 - eps` on the target id and `eps / (V - 1)`
    /// on every other id.
    pub fn cross_entropy_smoothed(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        valid: &[bool],
        eps: f64,
    ) -> Result<NodeId, TensorError> {
        let (m, v) = self.mat_dims("cross_entropy", logits)?;
        if !(0.0..1.0).contains(&eps) {
            return Err(TensorError::Invalid(format!("label smoothing {eps} outside [0, 1)")));
        }
        if v < 2 {
            return Err(TensorError::Invalid("cross entropy needs at least 2 classes".into()));
        }
        if targets.len() != m || valid.len() != m {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: vec![m, v],
                rhs: vec![targets.len(), valid.len()],
            });
        }
        let count = valid.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(TensorError::EmptyReduction("cross_entropy"));
        }
        let off = eps / (v - 1) as f64;
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; m * v];
        let mut total = 0.0;
        for r in 0..m {
            if !valid[r] {
                continue;
            }
            let t = targets[r];
            if t >= v {
                return Err(TensorError::Vocab { id: t, vocab: v });
            }
            let row = &ld[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            let mut loss = 0.0;
            for (j, &z) in row.iter().enumerate() {
                let logp = z - lse;
                let w = if j == t { 1.0 - eps } else { off };
                loss -= w * logp;
                probs[r * v + j] = logp.exp();
            }
            total += loss;
        }
        let t = Tensor::from_op("cross_entropy", vec![1], vec![total / count as f64])?;
        let probs = if self.needs(&[logits]) { probs } else { Vec::new() };
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                valid: valid.to_vec(),
                eps,
                probs,
                count,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let s = self.value(x).data().iter().sum();
        let t = Tensor::from_op("sum", vec![1], vec![s])?;
        Ok(self.push(t, Op::Sum { x }, &[x]))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.len() as f64;
        let t = Tensor::from_op("mean", vec![1], vec![s])?;
        Ok(self.push(t, Op::Mean { x }, &[x]))
    }

    /// Reverse sweep from a scalar node. Gradients from any earlier sweep are
    /// discarded first.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if !self.record {
            return Err(TensorError::Invalid("backward on a no_grad graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::Rank {
                op: "backward",
                shape: self.value(loss).shape().to_vec(),
            });
        }
        for n in &mut self.nodes {
            n.value.grad = None;
        }
        self.nodes[loss.0].value.grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = node.value.grad.take() else {
                continue;
            };
            backprop(before, &node.op, &node.value, &gout);
            check_finite("backward", &gout)?;
            node.value.grad = Some(gout);
        }
        Ok(())
    }
}

/// Takes the gradient buffer of `id` out for accumulation, or `None` when the node
/// does not need one.
fn take(nodes: &mut [Node], id: NodeId) -> Option<Vec<f64>> {
    let n = &mut nodes[id.0];
    if !n.needs_grad {
        return None;
    }
    Some(n.value.grad.take().unwrap_or_else(|| vec![0.0; n.value.len()]))
}

fn put(nodes: &mut [Node], id: NodeId, g: Vec<f64>) {
    nodes[id.0].value.grad = Some(g);
}

fn accumulate(nodes: &mut [Node], id: NodeId, f: impl FnOnce(&[Node], &mut [f64])) {
    if let Some(mut g) = take(nodes, id) {
        f(nodes, &mut g);
        put(nodes, id, g);
    }
}

fn backprop(nodes: &mut [Node], op: &Op, out: &Tensor, gout: &[f64]) {
    match op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
            let n = nodes[b.0].value.shape()[1];
            accumulate(nodes, *a, |ns, ga| gemm(m, n, k, gout, false, ns[b.0].value.data(), true, ga, 1.0));
            accumulate(nodes, *b, |ns, gb| gemm(k, m, n, ns[a.0].value.data(), true, gout, false, gb, 1.0));
        }
        Op::Add { a, b } => {
            for id in [a, b] {
                accumulate(nodes, *id, |_, g| g.iter_mut().zip(gout).for_each(|(g, d)| *g += d));
            }
        }
        Op::Sub { a, b } => {
            accumulate(nodes, *a, |_, g| g.iter_mut().zip(gout).for_each(|(g, d)| *g += d));
            accumulate(nodes, *b, |_, g| g.iter_mut().zip(gout).for_each(|(g, d)| *g -= d));
        }
        Op::Mul { a, b } => {
            accumulate(nodes, *a, |ns, g| {
                let other = ns[b.0].value.data();
                g.iter_mut().zip(gout).zip(other).for_each(|((g, d), o)| *g += d * o)
            });
            accumulate(nodes, *b, |ns, g| {
                let other = ns[a.0].value.data();
                g.iter_mut().zip(gout).zip(other).for_each(|((g, d), o)| *g += d * o)
            });
        }
        Op::AddRow { x, bias } => {
            accumulate(nodes, *x, |_, g| g.iter_mut().zip(gout).for_each(|(g, d)| *g += d));
            accumulate(nodes, *bias, |_, g| {
                let c = g.len();
                for (i, d) in gout.iter().enumerate() {
                    g[i % c] += d;
                }
            });
        }
        Op::Scale { x, factor } => {
            accumulate(nodes, *x, |_, g| g.iter_mut().zip(gout).for_each(|(g, d)| *g += d * factor));
        }
        Op::ScaleRows { x, scales } => {
            let c = out.cols();
            accumulate(nodes, *x, |_, g| {
                for (i, (g, d)) in g.iter_mut().zip(gout).enumerate() {
                    *g += d * scales[i / c];
                }
            });
        }
        Op::MulConst { x, mask } => {
            accumulate(nodes, *x, |_, g| g.iter_mut().zip(gout).zip(mask).for_each(|((g, d), m)| *g += d * m));
        }
        Op::Relu { x } => {
            accumulate(nodes, *x, |ns, g| {
                let xv = ns[x.0].value.data();
                for ((g, d), v) in g.iter_mut().zip(gout).zip(xv) {
                    if *v > 0.0 {
                        *g += d;
                    }
                }
            });
        }
        Op::Softmax { x } => {
            let c = out.cols();
            let y = out.data();
            accumulate(nodes, *x, |_, g| {
                for r in 0..y.len() / c {
                    let (yr, dr) = (&y[r * c..(r + 1) * c], &gout[r * c..(r + 1) * c]);
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        g[r * c + j] += yr[j] * (dr[j] - dot);
                    }
                }
            });
        }
        Op::MaskScores { x, weights, admissible } => {
            accumulate(nodes, *x, |_, g| {
                for i in 0..g.len() {
                    g[i] += match (admissible[i], weights) {
                        (true, Some(w)) => gout[i] * w[i],
                        _ => gout[i],
                    };
                }
            });
        }
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let n = out.cols();
            let m = out.rows();
            accumulate(nodes, *x, |ns, gx| {
                let gv = ns[gain.0].value.data();
                for r in 0..m {
                    let (dy, h) = (&gout[r * n..(r + 1) * n], &xhat[r * n..(r + 1) * n]);
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for c in 0..n {
                        let dh = dy[c] * gv[c];
                        mean_d += dh;
                        mean_dh += dh * h[c];
                    }
                    mean_d /= n as f64;
                    mean_dh /= n as f64;
                    for c in 0..n {
                        let dh = dy[c] * gv[c];
                        gx[r * n + c] += rstd[r] * (dh - mean_d - h[c] * mean_dh);
                    }
                }
            });
            accumulate(nodes, *gain, |_, gg| {
                for (i, (d, h)) in gout.iter().zip(xhat).enumerate() {
                    gg[i % n] += d * h;
                }
            });
            accumulate(nodes, *bias, |_, gb| {
                for (i, d) in gout.iter().enumerate() {
                    gb[i % n] += d;
                }
            });
        }
        Op::Gather { sources, picks } => {
            let c = out.cols();
            for (si, &src) in sources.iter().enumerate() {
                // A node listed twice as a source is handled on its first occurrence.
                if sources[..si].contains(&src) {
                    continue;
                }
                accumulate(nodes, src, |_, g| {
                    for (r, &(s, row)) in picks.iter().enumerate() {
                        if sources[s as usize] == src {
                            let dst = &mut g[row as usize * c..(row as usize + 1) * c];
                            dst.iter_mut().zip(&gout[r * c..(r + 1) * c]).for_each(|(g, d)| *g += d);
                        }
                    }
                });
            }
        }
        Op::ConcatCols { parts } => {
            let m = out.rows();
            let n = out.cols();
            let mut c0 = 0;
            for &p in parts {
                let w = nodes[p.0].value.cols();
                accumulate(nodes, p, |_, g| {
                    for r in 0..m {
                        for c in 0..w {
                            g[r * w + c] += gout[r * n + c0 + c];
                        }
                    }
                });
                c0 += w;
            }
        }
        Op::Reshape { x } => {
            accumulate(nodes, *x, |_, g| g.iter_mut().zip(gout).for_each(|(g, d)| *g += d));
        }
        Op::Attention { q, k, v, segments, heads, probs } => {
            attention_backward(nodes, *q, *k, *v, segments, *heads, probs, gout);
        }
        Op::CrossEntropy { logits, targets, valid, eps, probs, count } => {
            let v = out_cols_of(nodes, *logits);
            let off = eps / (v - 1) as f64;
            let scale = gout[0] / *count as f64;
            accumulate(nodes, *logits, |_, g| {
                for r in 0..valid.len() {
                    if !valid[r] {
                        continue;
                    }
                    for j in 0..v {
                        let target = if j == targets[r] { 1.0 - eps } else { off };
                        g[r * v + j] += scale * (probs[r * v + j] - target);
                    }
                }
            });
        }
        Op::Sum { x } => {
            accumulate(nodes, *x, |_, g| g.iter_mut().for_each(|g| *g += gout[0]));
        }
        Op::Mean { x } => {
            accumulate(nodes, *x, |_, g| {
                let s = gout[0] / g.len() as f64;
                g.iter_mut().for_each(|g| *g += s)
            });
        }
    }
}

fn out_cols_of(nodes: &[Node], id: NodeId) -> usize {
    nodes[id.0].value.cols()
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    nodes: &mut [Node],
    q: NodeId,
    k: NodeId,
    v: NodeId,
    segments: &[AttnSegment],
    heads: usize,
    probs: &[f64],
    gout: &[f64],
) {
    let d = nodes[q.0].value.cols();
    let dk = d / heads;
    let inv = 1.0 / (dk as f64).sqrt();
    let (nq, nk) = (nodes[q.0].value.rows(), nodes[k.0].value.rows());
    let mut gq = vec![0.0; nq * d];
    let mut gk = vec![0.0; nk * d];
    let mut gv = vec![0.0; nk * d];
    {
        let (qd, kd, vd) = (nodes[q.0].value.data(), nodes[k.0].value.data(), nodes[v.0].value.data());
        let mut dp = Vec::new();
        let mut off = 0;
        for s in segments {
            for h in 0..heads {
                let c0 = h * dk;
                for i in 0..s.q_len {
                    let qrow = (s.q_start + i) * d + c0;
                    let p = &probs[off + i * s.k_len..off + (i + 1) * s.k_len];
                    let go = &gout[qrow..qrow + dk];
                    dp.clear();
                    for (j, &pj) in p.iter().enumerate() {
                        let krow = (s.k_start + j) * d + c0;
                        dp.push(go.iter().zip(&vd[krow..krow + dk]).map(|(a, b)| a * b).sum::<f64>());
                        for c in 0..dk {
                            gv[krow + c] += pj * go[c];
                        }
                    }
                    let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for (j, &pj) in p.iter().enumerate() {
                        let mut ds = pj * (dp[j] - dot);
                        if ds == 0.0 {
                            continue;
                        }
                        if let (true, Some(w)) = (s.admissible(i, j), &s.weights) {
                            ds *= w[i * s.k_len + j];
                        }
                        ds *= inv;
                        let krow = (s.k_start + j) * d + c0;
                        for c in 0..dk {
                            gq[qrow + c] += ds * kd[krow + c];
                            gk[krow + c] += ds * qd[qrow + c];
                        }
                    }
                }
                off += s.q_len * s.k_len;
            }
        }
    }
    for (id, g) in [(q, gq), (k, gk), (v, gv)] {
        accumulate(nodes, id, |_, acc| acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b));
    }
}
