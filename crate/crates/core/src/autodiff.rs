//! A small reverse-mode differentiation engine for choice networks.
//!
//! A [`LayerGraph`] is a topologically ordered list of primitive nodes. Every node holds a
//! per-sample matrix of shape `rows x cols`; a batch stores `batch` such matrices
//! contiguously, so an affine node acting row-wise on an `n x d` product-feature block is
//! the shared per-product encoder, and on a `1 x k` block an ordinary dense layer.
//!
//! The terminal node is always a masked softmax: logits of products outside the
//! assortment are excluded, so their probabilities and gradients are exactly zero.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Assortment, ProbVector};
use crate::error::{Error, Result};
use crate::rng::ChoiceRng;

pub type NodeId = usize;
pub type ParamId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    /// Binary assortment indicator, `1 x n`.
    Assortment,
    /// Product feature block, `n x d`.
    ProductFeatures,
    /// Customer feature row, `1 x d'`.
    CustomerFeatures,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input(InputKind),
    /// Row-wise `x W + b` with `W` stored `in x out`.
    Affine { input: NodeId, weight: ParamId, bias: Option<ParamId> },
    Relu(NodeId),
    /// Residual addition of two equally shaped nodes.
    Add(NodeId, NodeId),
    /// Column concatenation; a single-row operand is broadcast over the other's rows.
    Concat(NodeId, NodeId),
    /// Elementwise product of two equally shaped nodes.
    Mul(NodeId, NodeId),
    /// Reinterprets the per-sample matrix with a new shape of equal size.
    Reshape(NodeId),
    /// Row-wise inner products; a single-row right operand is broadcast.
    InnerProduct(NodeId, NodeId),
    /// Softmax over the logits of offered products (mask entries > 0.5).
    MaskedSoftmax { logits: NodeId, mask: NodeId },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub op: Op,
    pub rows: usize,
    pub cols: usize,
}

impl Node {
    pub fn size(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    /// Frozen tensors receive no optimizer updates and are skipped by gradient checks.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub frozen: bool,
}

impl Tensor {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }
}

/// A batch of network inputs, one contiguous block per input kind.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub size: usize,
    /// `size x n` indicators.
    pub assortment: Vec<f64>,
    /// `size x n x d`, empty when the graph has no product-feature input.
    pub product_features: Vec<f64>,
    /// `size x d'`, empty when the graph has no customer-feature input.
    pub customer_features: Vec<f64>,
    pub choices: Vec<usize>,
}

impl Batch {
    pub fn clear(&mut self) {
        self.size = 0;
        self.assortment.clear();
        self.product_features.clear();
        self.customer_features.clear();
        self.choices.clear();
    }
}

/// Reusable activation and gradient buffers.
#[derive(Debug, Clone, Default)]
pub struct Workspace {
    batch: usize,
    values: Vec<Vec<f64>>,
    grads: Vec<Vec<f64>>,
}

impl Workspace {
    /// Activations of `node` for the last forward pass.
    pub fn values(&self, node: NodeId) -> &[f64] {
        &self.values[node]
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

pub type Gradients = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGraph {
    nodes: Vec<Node>,
    params: Vec<Tensor>,
    output: NodeId,
    marks: BTreeMap<String, NodeId>,
}

/// How a builder fills fresh parameters.
pub enum Init<'a> {
    /// Weights uniform on `±sqrt(6 / (fan_in + fan_out))`, biases zero.
    Glorot(&'a mut ChoiceRng),
    Zeros,
}

pub struct GraphBuilder<'a> {
    nodes: Vec<Node>,
    params: Vec<Tensor>,
    marks: BTreeMap<String, NodeId>,
    init: Init<'a>,
}

impl<'a> GraphBuilder<'a> {
    pub fn new(init: Init<'a>) -> Self {
        Self { nodes: Vec::new(), params: Vec::new(), marks: BTreeMap::new(), init }
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize) -> NodeId {
        self.nodes.push(Node { op, rows, cols });
        self.nodes.len() - 1
    }

    pub fn shape(&self, node: NodeId) -> (usize, usize) {
        (self.nodes[node].rows, self.nodes[node].cols)
    }

    pub fn input(&mut self, kind: InputKind, rows: usize, cols: usize) -> NodeId {
        self.push(Op::Input(kind), rows, cols)
    }

    pub fn affine(&mut self, input: NodeId, out: usize, bias: bool, name: &str) -> NodeId {
        let (rows, fan_in) = self.shape(input);
        let limit = (6.0 / (fan_in + out) as f64).sqrt();
        let values = match &mut self.init {
            Init::Glorot(rng) => (0..fan_in * out).map(|_| rng.random_range(-limit..limit)).collect(),
            Init::Zeros => vec![0.0; fan_in * out],
        };
        self.params.push(Tensor { name: format!("{name}.weight"), rows: fan_in, cols: out, values, frozen: false });
        let weight = self.params.len() - 1;
        let bias = bias.then(|| {
            self.params.push(Tensor { name: format!("{name}.bias"), rows: 1, cols: out, values: vec![0.0; out], frozen: false });
            self.params.len() - 1
        });
        self.push(Op::Affine { input, weight, bias }, rows, out)
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let (r, c) = self.shape(input);
        self.push(Op::Relu(input), r, c)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "residual operands differ in shape");
        let (r, c) = self.shape(a);
        self.push(Op::Add(a, b), r, c)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert!(ra == rb || ra == 1 || rb == 1, "concat rows {ra} and {rb} cannot broadcast");
        self.push(Op::Concat(a, b), ra.max(rb), ca + cb)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "elementwise operands differ in shape");
        let (r, c) = self.shape(a);
        self.push(Op::Mul(a, b), r, c)
    }

    pub fn reshape(&mut self, input: NodeId, rows: usize, cols: usize) -> NodeId {
        let (r, c) = self.shape(input);
        assert_eq!(r * c, rows * cols, "reshape changes size");
        self.push(Op::Reshape(input), rows, cols)
    }

    pub fn inner_product(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(ca, cb, "inner product widths differ");
        assert!(rb == ra || rb == 1, "inner product rows cannot broadcast");
        self.push(Op::InnerProduct(a, b), ra, 1)
    }

    /// Affine layers of the given widths with rectifiers between them; the last layer
    /// is linear unless `relu_last`.
    pub fn affine_stack(&mut self, mut x: NodeId, widths: &[usize], relu_last: bool, name: &str) -> NodeId {
        for (l, &w) in widths.iter().enumerate() {
            x = self.affine(x, w, true, &format!("{name}.{l}"));
            if relu_last || l + 1 < widths.len() {
                x = self.relu(x);
            }
        }
        x
    }

    pub fn mark(&mut self, name: &str, node: NodeId) {
        self.marks.insert(name.to_string(), node);
    }

    pub fn finish(mut self, logits: NodeId, mask: NodeId) -> LayerGraph {
        let (r, c) = self.shape(logits);
        let (mr, mc) = self.shape(mask);
        assert_eq!(r * c, mr * mc, "logits and mask sizes differ");
        self.marks.insert("logits".into(), logits);
        let output = self.push(Op::MaskedSoftmax { logits, mask }, 1, r * c);
        LayerGraph { nodes: self.nodes, params: self.params, output, marks: self.marks }
    }
}

/// `c (m x n) += a (m x k) * b (k x n)` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: isize, csa: isize, b: &[f64], rsb: isize, csb: isize, c: &mut [f64]) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: callers pass buffers of at least the stated extents with matching strides.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 1.0, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

impl LayerGraph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn mark(&self, name: &str) -> Option<NodeId> {
        self.marks.get(name).copied()
    }

    /// Number of products (width of the output distribution).
    pub fn n(&self) -> usize {
        self.nodes[self.output].cols
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|t| t.values.len()).sum()
    }

    pub fn input_shape(&self, kind: InputKind) -> Option<(usize, usize)> {
        self.nodes.iter().find_map(|node| match node.op {
            Op::Input(k) if k == kind => Some((node.rows, node.cols)),
            _ => None,
        })
    }

    pub fn zero_gradients(&self) -> Gradients {
        self.params.iter().map(|t| vec![0.0; t.values.len()]).collect()
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let b = batch.size;
        for kind in [InputKind::Assortment, InputKind::ProductFeatures, InputKind::CustomerFeatures] {
            if let Some((r, c)) = self.input_shape(kind) {
                let got = match kind {
                    InputKind::Assortment => batch.assortment.len(),
                    InputKind::ProductFeatures => batch.product_features.len(),
                    InputKind::CustomerFeatures => batch.customer_features.len(),
                };
                if got != b * r * c {
                    return Err(Error::Dimension(format!(
                        "{kind:?} input expects {} values for batch {b}, got {got}",
                        b * r * c
                    )));
                }
            }
        }
        Ok(())
    }

    /// Evaluates every node for the batch, leaving activations in `ws`.
    pub fn forward(&self, batch: &Batch, ws: &mut Workspace) -> Result<()> {
        self.check_batch(batch)?;
        let b = batch.size;
        ws.batch = b;
        ws.values.resize_with(self.nodes.len(), Vec::new);
        for id in 0..self.nodes.len() {
            let node = &self.nodes[id];
            let mut out = std::mem::take(&mut ws.values[id]);
            out.clear();
            out.resize(b * node.size(), 0.0);
            let vals = &ws.values;
            match node.op {
                Op::Input(kind) => out.copy_from_slice(match kind {
                    InputKind::Assortment => &batch.assortment,
                    InputKind::ProductFeatures => &batch.product_features,
                    InputKind::CustomerFeatures => &batch.customer_features,
                }),
                Op::Affine { input, weight, bias } => {
                    let w = &self.params[weight];
                    let rows = b * self.nodes[input].rows;
                    if let Some(bias) = bias {
                        for row in out.chunks_exact_mut(w.cols) {
                            row.copy_from_slice(&self.params[bias].values);
                        }
                    }
                    let x = &vals[input];
                    gemm(rows, w.rows, w.cols, x, w.rows as isize, 1, &w.values, w.cols as isize, 1, &mut out);
                }
                Op::Relu(input) => {
                    for (o, &x) in out.iter_mut().zip(&vals[input]) {
                        *o = x.max(0.0);
                    }
                }
                Op::Add(a, c) => {
                    for ((o, &x), &y) in out.iter_mut().zip(&vals[a]).zip(&vals[c]) {
                        *o = x + y;
                    }
                }
                Op::Mul(a, c) => {
                    for ((o, &x), &y) in out.iter_mut().zip(&vals[a]).zip(&vals[c]) {
                        *o = x * y;
                    }
                }
                Op::Reshape(input) => out.copy_from_slice(&vals[input]),
                Op::Concat(a, c) => {
                    let (na, nc) = (&self.nodes[a], &self.nodes[c]);
                    let cols = node.cols;
                    for s in 0..b {
                        for r in 0..node.rows {
                            let ra = if na.rows == 1 { 0 } else { r };
                            let rc = if nc.rows == 1 { 0 } else { r };
                            let dst = &mut out[(s * node.rows + r) * cols..][..cols];
                            dst[..na.cols].copy_from_slice(&vals[a][(s * na.rows + ra) * na.cols..][..na.cols]);
                            dst[na.cols..].copy_from_slice(&vals[c][(s * nc.rows + rc) * nc.cols..][..nc.cols]);
                        }
                    }
                }
                Op::InnerProduct(a, c) => {
                    let (na, nc) = (&self.nodes[a], &self.nodes[c]);
                    let h = na.cols;
                    for s in 0..b {
                        for r in 0..na.rows {
                            let rc = if nc.rows == 1 { 0 } else { r };
                            let x = &vals[a][(s * na.rows + r) * h..][..h];
                            let y = &vals[c][(s * nc.rows + rc) * h..][..h];
                            out[s * na.rows + r] = x.iter().zip(y).map(|(p, q)| p * q).sum();
                        }
                    }
                }
                Op::MaskedSoftmax { logits, mask } => {
                    let n = node.cols;
                    for s in 0..b {
                        let z = &vals[logits][s * n..(s + 1) * n];
                        let m = &vals[mask][s * n..(s + 1) * n];
                        let o = &mut out[s * n..(s + 1) * n];
                        let max = (0..n).filter(|&i| m[i] > 0.5).map(|i| z[i]).fold(f64::NEG_INFINITY, f64::max);
                        if max == f64::NEG_INFINITY {
                            return Err(Error::InvalidAssortment("empty assortment in batch".into()));
                        }
                        let mut total = 0.0;
                        for i in 0..n {
                            o[i] = if m[i] > 0.5 { (z[i] - max).exp() } else { 0.0 };
                            total += o[i];
                        }
                        o.iter_mut().for_each(|v| *v /= total);
                    }
                }
            }
            if cfg!(debug_assertions) && out.iter().any(|v| !v.is_finite()) {
                ws.values[id] = out;
                return Err(Error::NonFinite(id));
            }
            ws.values[id] = out;
        }
        Ok(())
    }

    /// Choice probabilities of sample `s` from the last forward pass.
    pub fn probabilities<'w>(&self, ws: &'w Workspace, s: usize) -> &'w [f64] {
        let n = self.n();
        &ws.values[self.output][s * n..(s + 1) * n]
    }

    /// Mean cross-entropy of the batch choices under the last forward pass.
    pub fn loss(&self, batch: &Batch, ws: &Workspace) -> f64 {
        let total: f64 = batch
            .choices
            .iter()
            .enumerate()
            .map(|(s, &c)| -self.probabilities(ws, s)[c].ln())
            .sum();
        total / batch.size as f64
    }

    /// Accumulates into `grads` the gradient of the mean batch cross-entropy.
    pub fn backward(&self, batch: &Batch, ws: &mut Workspace, grads: &mut Gradients) -> Result<()> {
        let b = batch.size;
        if batch.choices.len() != b {
            return Err(Error::Dimension("one choice per batch sample required".into()));
        }
        ws.grads.resize_with(self.nodes.len(), Vec::new);
        for (id, node) in self.nodes.iter().enumerate() {
            let g = &mut ws.grads[id];
            g.clear();
            g.resize(b * node.size(), 0.0);
        }
        let Op::MaskedSoftmax { logits, mask } = self.nodes[self.output].op else {
            unreachable!("terminal node is always a masked softmax");
        };
        let n = self.n();
        {
            let p = &ws.values[self.output];
            let m = &ws.values[mask];
            let dz = &mut ws.grads[logits];
            let scale = 1.0 / b as f64;
            for (s, &c) in batch.choices.iter().enumerate() {
                if m[s * n + c] <= 0.5 {
                    return Err(Error::ChoiceNotOffered { choice: c });
                }
                for i in 0..n {
                    let k = s * n + i;
                    if m[k] > 0.5 {
                        dz[k] = scale * (p[k] - if i == c { 1.0 } else { 0.0 });
                    }
                }
            }
        }

        for id in (0..self.output).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Input(_)) {
                continue;
            }
            let dy = std::mem::take(&mut ws.grads[id]);
            if dy.iter().all(|&v| v == 0.0) {
                ws.grads[id] = dy;
                continue;
            }
            match node.op {
                Op::Input(_) | Op::MaskedSoftmax { .. } => {}
                Op::Affine { input, weight, bias } => {
                    let w = &self.params[weight];
                    let rows = b * self.nodes[input].rows;
                    let x = &ws.values[input];
                    gemm(w.rows, rows, w.cols, x, 1, w.rows as isize, &dy, w.cols as isize, 1, &mut grads[weight]);
                    if let Some(bias) = bias {
                        let gb = &mut grads[bias];
                        for row in dy.chunks_exact(w.cols) {
                            for (g, &v) in gb.iter_mut().zip(row) {
                                *g += v;
                            }
                        }
                    }
                    if !self.is_leaf_input(input) {
                        gemm(rows, w.cols, w.rows, &dy, w.cols as isize, 1, &w.values, 1, w.cols as isize, &mut ws.grads[input]);
                    }
                }
                Op::Relu(input) => {
                    let y = &ws.values[id];
                    let dx = &mut ws.grads[input];
                    for ((d, &g), &v) in dx.iter_mut().zip(&dy).zip(y) {
                        if v > 0.0 {
                            *d += g;
                        }
                    }
                }
                Op::Add(a, c) => {
                    for src in [a, c] {
                        for (d, &g) in ws.grads[src].iter_mut().zip(&dy) {
                            *d += g;
                        }
                    }
                }
                Op::Mul(a, c) => {
                    for (src, other) in [(a, c), (c, a)] {
                        let (grads_src, vals) = (&mut ws.grads[src], &ws.values[other]);
                        for ((d, &g), &v) in grads_src.iter_mut().zip(&dy).zip(vals) {
                            *d += g * v;
                        }
                    }
                }
                Op::Reshape(input) => {
                    for (d, &g) in ws.grads[input].iter_mut().zip(&dy) {
                        *d += g;
                    }
                }
                Op::Concat(a, c) => {
                    let (na, nc) = (self.nodes[a].clone(), self.nodes[c].clone());
                    let cols = node.cols;
                    for s in 0..b {
                        for r in 0..node.rows {
                            let src = &dy[(s * node.rows + r) * cols..][..cols];
                            let ra = if na.rows == 1 { 0 } else { r };
                            let rc = if nc.rows == 1 { 0 } else { r };
                            for (d, &g) in ws.grads[a][(s * na.rows + ra) * na.cols..][..na.cols].iter_mut().zip(&src[..na.cols]) {
                                *d += g;
                            }
                            for (d, &g) in ws.grads[c][(s * nc.rows + rc) * nc.cols..][..nc.cols].iter_mut().zip(&src[na.cols..]) {
                                *d += g;
                            }
                        }
                    }
                }
                Op::InnerProduct(a, c) => {
                    let (na, nc) = (self.nodes[a].clone(), self.nodes[c].clone());
                    let h = na.cols;
                    for s in 0..b {
                        for r in 0..na.rows {
                            let g = dy[s * na.rows + r];
                            if g == 0.0 {
                                continue;
                            }
                            let rc = if nc.rows == 1 { 0 } else { r };
                            let ia = (s * na.rows + r) * h;
                            let ic = (s * nc.rows + rc) * h;
                            for t in 0..h {
                                let (xa, xc) = (ws.values[a][ia + t], ws.values[c][ic + t]);
                                ws.grads[a][ia + t] += g * xc;
                                ws.grads[c][ic + t] += g * xa;
                            }
                        }
                    }
                }
            }
            ws.grads[id] = dy;
        }
        Ok(())
    }

    fn is_leaf_input(&self, node: NodeId) -> bool {
        matches!(self.nodes[node].op, Op::Input(_))
    }

    /// Forward pass returning one probability vector per sample.
    pub fn predict(&self, batch: &Batch, ws: &mut Workspace) -> Result<Vec<ProbVector>> {
        self.forward(batch, ws)?;
        Ok((0..batch.size)
            .map(|s| ProbVector::new_unchecked(self.probabilities(ws, s).to_vec()))
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First/second moment state of the Adam optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Gradients,
    pub second: Gradients,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros: Gradients = params.iter().map(|t| vec![0.0; t.values.len()]).collect();
        Self { config, step: 0, first: zeros.clone(), second: zeros }
    }

    /// One bias-corrected update of every non-frozen tensor.
    pub fn update(&mut self, params: &mut [Tensor], grads: &Gradients) {
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (p, tensor) in params.iter_mut().enumerate() {
            if tensor.frozen {
                continue;
            }
            let (m, v) = (&mut self.first[p], &mut self.second[p]);
            for (j, w) in tensor.values.iter_mut().enumerate() {
                let g = grads[p][j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                *w -= learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + epsilon);
            }
        }
    }
}

/// Largest relative error between analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub per_tensor: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_tensor.iter().map(|t| t.1).fold(0.0, f64::max)
    }
}

/// Finite-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;
/// Pre-activations closer than this to the rectifier kink cause the inputs to be redrawn.
pub const KINK_MARGIN: f64 = 1e-4;

/// Random inputs for `graph`: Gaussian features and assortments of at least two products.
pub fn random_batch(graph: &LayerGraph, size: usize, rng: &mut ChoiceRng) -> Batch {
    let n = graph.n();
    let mut batch = Batch { size, ..Batch::default() };
    for _ in 0..size {
        let members: Vec<usize> = loop {
            let m: Vec<usize> = (0..n).filter(|_| rng.random::<bool>()).collect();
            if m.len() >= 2.min(n) {
                break m;
            }
        };
        let s = Assortment::new(members, n).expect("valid random assortment");
        batch.assortment.extend(s.to_bits());
        batch.choices.push(s.members()[rng.random_range(0..s.len())]);
    }
    let mut gaussian = |len: usize, out: &mut Vec<f64>| {
        out.extend((0..len).map(|_| -> f64 { StandardNormal.sample(&mut *rng) }));
    };
    if let Some((r, c)) = graph.input_shape(InputKind::ProductFeatures) {
        gaussian(size * r * c, &mut batch.product_features);
    }
    if let Some((r, c)) = graph.input_shape(InputKind::CustomerFeatures) {
        gaussian(size * r * c, &mut batch.customer_features);
    }
    batch
}

fn near_kink(graph: &LayerGraph, ws: &Workspace) -> bool {
    graph.nodes.iter().any(|node| match node.op {
        Op::Relu(input) => ws.values[input].iter().any(|v| v.abs() < KINK_MARGIN),
        _ => false,
    })
}

/// Compares backpropagated gradients with central differences on random inputs.
pub fn grad_check(graph: &LayerGraph, rng: &mut ChoiceRng) -> Result<GradCheckReport> {
    let mut ws = Workspace::default();
    let mut batch = random_batch(graph, 3, rng);
    for attempt in 0.. {
        graph.forward(&batch, &mut ws)?;
        if !near_kink(graph, &ws) {
            break;
        }
        if attempt == 200 {
            return Err(Error::Config("could not draw inputs away from rectifier kinks".into()));
        }
        batch = random_batch(graph, 3, rng);
    }
    let mut grads = graph.zero_gradients();
    graph.backward(&batch, &mut ws, &mut grads)?;

    let mut probe = graph.clone();
    let mut per_tensor = Vec::new();
    for (p, tensor) in graph.params.iter().enumerate() {
        if tensor.frozen {
            continue;
        }
        let mut worst: f64 = 0.0;
        for j in 0..tensor.values.len() {
            let orig = tensor.values[j];
            probe.params[p].values[j] = orig + FD_STEP;
            probe.forward(&batch, &mut ws)?;
            let up = probe.loss(&batch, &ws);
            probe.params[p].values[j] = orig - FD_STEP;
            probe.forward(&batch, &mut ws)?;
            let down = probe.loss(&batch, &ws);
            probe.params[p].values[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = grads[p][j];
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
        per_tensor.push((tensor.name.clone(), worst));
    }
    Ok(GradCheckReport { per_tensor })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn single_affine(n: usize, init: Init<'_>) -> LayerGraph {
        let mut g = GraphBuilder::new(init);
        let s = g.input(InputKind::Assortment, 1, n);
        let z = g.affine(s, n, true, "out");
        g.finish(z, s)
    }

    fn batch_for(members: &[usize], n: usize, choice: usize) -> Batch {
        let s = Assortment::new(members.to_vec(), n).unwrap();
        Batch { size: 1, assortment: s.to_bits(), choices: vec![choice], ..Batch::default() }
    }

    #[test]
    fn zero_weights_give_uniform_over_assortment() {
        let g = single_affine(5, Init::Zeros);
        let mut ws = Workspace::default();
        let p = g.predict(&batch_for(&[0, 2, 3], 5, 0), &mut ws).unwrap();
        assert_eq!(p[0].values(), &[1. / 3., 0., 1. / 3., 1. / 3., 0.]);
    }

    #[test]
    fn singleton_assortment_has_zero_gradients() {
        let g = single_affine(4, Init::Glorot(&mut seeded(1)));
        let mut ws = Workspace::default();
        let b = batch_for(&[2], 4, 2);
        let p = g.predict(&b, &mut ws).unwrap();
        assert_eq!(p[0].get(2), 1.0);
        let mut grads = g.zero_gradients();
        g.backward(&b, &mut ws, &mut grads).unwrap();
        assert!(grads.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn unoffered_logits_receive_no_gradient() {
        let g = single_affine(4, Init::Glorot(&mut seeded(2)));
        let mut ws = Workspace::default();
        let b = batch_for(&[0, 1], 4, 1);
        g.forward(&b, &mut ws).unwrap();
        let mut grads = g.zero_gradients();
        g.backward(&b, &mut ws, &mut grads).unwrap();
        // Weight column j and bias j feed only logit j.
        for j in [2, 3] {
            assert_eq!(grads[1][j], 0.0);
            for i in 0..4 {
                assert_eq!(grads[0][i * 4 + j], 0.0);
            }
        }
    }

    #[test]
    fn choice_outside_assortment_rejected() {
        let g = single_affine(3, Init::Zeros);
        let mut ws = Workspace::default();
        let b = batch_for(&[0, 1], 3, 2);
        g.forward(&b, &mut ws).unwrap();
        let mut grads = g.zero_gradients();
        assert!(matches!(g.backward(&b, &mut ws, &mut grads), Err(Error::ChoiceNotOffered { choice: 2 })));
    }

    #[test]
    fn input_dimension_mismatch_rejected() {
        let g = single_affine(3, Init::Zeros);
        let mut ws = Workspace::default();
        let b = batch_for(&[0, 1], 4, 0);
        assert!(matches!(g.forward(&b, &mut ws), Err(Error::Dimension(_))));
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let g = single_affine(6, Init::Glorot(&mut seeded(3)));
        let b = random_batch(&g, 4, &mut seeded(4));
        let mut ws = Workspace::default();
        let a = g.predict(&b, &mut ws).unwrap();
        let c = g.predict(&b, &mut ws).unwrap();
        assert_eq!(a, c);
    }

    /// One graph per primitive, each small enough for exhaustive differencing.
    fn primitive_graphs() -> Vec<(&'static str, LayerGraph)> {
        let mut out = Vec::new();
        let mut rng = seeded(10);
        let n = 4;
        {
            let mut g = GraphBuilder::new(Init::Glorot(&mut rng));
            let s = g.input(InputKind::Assortment, 1, n);
            let h = g.affine(s, 6, true, "a");
            let h = g.relu(h);
            let z = g.affine(h, n, false, "b");
            out.push(("affine+relu", g.finish(z, s)));
        }
        {
            let mut g = GraphBuilder::new(Init::Glorot(&mut rng));
            let s = g.input(InputKind::Assortment, 1, n);
            let x = g.affine(s, n, true, "in");
            let f = g.affine(x, n, true, "block");
            let f = g.relu(f);
            let x = g.add(x, f);
            out.push(("residual", g.finish(x, s)));
        }
        {
            let mut g = GraphBuilder::new(Init::Glorot(&mut rng));
            let s = g.input(InputKind::Assortment, 1, n);
            let f = g.input(InputKind::ProductFeatures, n, 3);
            let c = g.input(InputKind::CustomerFeatures, 1, 2);
            let pe = g.affine(f, 2, true, "penc");
            let ce = g.affine(c, 2, true, "cenc");
            let u = g.inner_product(pe, ce);
            let u = g.reshape(u, 1, n);
            let gated = g.mul(u, s);
            let cat = g.concat(gated, s);
            let z = g.affine(cat, n, true, "out");
            out.push(("encoder+inner+mul+concat", g.finish(z, s)));
        }
        {
            let mut g = GraphBuilder::new(Init::Glorot(&mut rng));
            let s = g.input(InputKind::Assortment, 1, n);
            let f = g.input(InputKind::ProductFeatures, n, 3);
            let c = g.input(InputKind::CustomerFeatures, 1, 2);
            let cat = g.concat(c, f);
            let h = g.affine(cat, 5, true, "h");
            let h = g.relu(h);
            let u = g.affine(h, 1, true, "u");
            let u = g.reshape(u, 1, n);
            out.push(("broadcast concat", g.finish(u, s)));
        }
        out
    }

    #[test]
    fn primitives_pass_gradient_check() {
        let mut rng = seeded(11);
        for (name, g) in primitive_graphs() {
            let report = grad_check(&g, &mut rng).unwrap();
            assert!(report.max_error() < 1e-4, "{name}: {report:?}");
        }
    }

    #[test]
    fn frozen_tensors_excluded_from_report() {
        let mut g = single_affine(4, Init::Glorot(&mut seeded(5)));
        g.params_mut()[1].frozen = true;
        let report = grad_check(&g, &mut seeded(6)).unwrap();
        assert_eq!(report.per_tensor.len(), 1);
        assert_eq!(report.per_tensor[0].0, "out.weight");
    }

    #[test]
    fn gradient_accumulation_is_order_independent() {
        let g = primitive_graphs().remove(2).1;
        let mut rng = seeded(12);
        let batch = random_batch(&g, 8, &mut rng);
        let mut ws = Workspace::default();
        g.forward(&batch, &mut ws).unwrap();
        let mut whole = g.zero_gradients();
        g.backward(&batch, &mut ws, &mut whole).unwrap();

        // Same gradient accumulated one sample at a time in reverse order.
        let mut summed = g.zero_gradients();
        let n = g.n();
        for s in (0..8).rev() {
            let single = Batch {
                size: 1,
                assortment: batch.assortment[s * n..(s + 1) * n].to_vec(),
                product_features: batch.product_features[s * n * 3..(s + 1) * n * 3].to_vec(),
                customer_features: batch.customer_features[s * 2..(s + 1) * 2].to_vec(),
                choices: vec![batch.choices[s]],
            };
            g.forward(&single, &mut ws).unwrap();
            let mut one = g.zero_gradients();
            g.backward(&single, &mut ws, &mut one).unwrap();
            for (acc, part) in summed.iter_mut().zip(&one) {
                for (a, p) in acc.iter_mut().zip(part) {
                    *a += p / 8.0;
                }
            }
        }
        for (a, b) in whole.iter().flatten().zip(summed.iter().flatten()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut params = vec![Tensor { name: "x".into(), rows: 1, cols: 2, values: vec![1.0, -2.0], frozen: false }];
        let mut adam = Adam::new(AdamConfig::with_learning_rate(0.1), &params);
        adam.first[0] = vec![0.5, 0.5];
        adam.update(&mut params, &vec![vec![0.0, 0.0]]);
        assert_ne!(params[0].values, vec![1.0, -2.0]);
        // Moments decay toward zero; a fresh optimizer leaves parameters untouched.
        assert_eq!(adam.first[0], vec![0.45, 0.45]);
        let mut fresh = Adam::new(AdamConfig::with_learning_rate(0.1), &params);
        let before = params[0].values.clone();
        fresh.update(&mut params, &vec![vec![0.0, 0.0]]);
        assert_eq!(params[0].values, before);
    }

    #[test]
    fn adam_constant_gradient_steps_at_learning_rate() {
        let mut params = vec![Tensor { name: "x".into(), rows: 1, cols: 1, values: vec![0.0], frozen: false }];
        let mut adam = Adam::new(AdamConfig::with_learning_rate(0.01), &params);
        let mut last = 0.0;
        for _ in 0..1000 {
            adam.update(&mut params, &vec![vec![3.0]]);
            let step = last - params[0].values[0];
            last = params[0].values[0];
            assert!((step - 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_minimizes_quadratic_bowl() {
        let mut params = vec![Tensor { name: "x".into(), rows: 1, cols: 2, values: vec![5.0, -3.0], frozen: false }];
        let mut adam = Adam::new(AdamConfig::with_learning_rate(0.01), &params);
        let mut reached = None;
        for step in 1..=2000 {
            let g = vec![params[0].values.clone()];
            adam.update(&mut params, &g);
            let norm = params[0].values.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-3 {
                reached = Some(step);
                break;
            }
        }
        assert!(reached.is_some(), "final {:?}", params[0].values);
    }
}
