//! Reward providers.
//!
//! Two implementations sit behind [`ScoreProvider`]: a planted oracle whose
//! per-edge optimum is known in closed form, and a small weight-sharing
//! supernet trained on a synthetic Gaussian-mixture task. A reward is always
//! the score difference `score(alpha) - score(beta)`.
//!
//! Supernet forward pass on a batch `x` (`B x d`):
//!
//! ```text
//! node(-2) = node(-1) = x
//! node(i)  = tanh(edge(i,0)(node(src0)) + edge(i,1)(node(src1)))
//! logits   = [node(0) | .. | node(I-1)] W_head + b_head
//! ```
//!
//! Each edge looks up its parameters by `(edge index, operation)`, so two
//! cells that agree on an edge's operation share that edge's weights.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archgraph::{CellGraph, GraphError};
use crate::gcnpolicy::PolicyMode;
use crate::numkernel::{cross_entropy_with_grad, Matrix};
use crate::opspace::{nat_actions, transition_mask, OperationKind, TypeClass, NUM_OPS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("graph has {got} edges, supernet was built for {expected}")]
    EdgeCount { expected: usize, got: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub train: usize,
    pub validation: usize,
    pub radius: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            dim: 16,
            train: 2000,
            validation: 1000,
            radius: 3.0,
        }
    }
}

/// Seeded Gaussian mixture: class means on a sphere, unit covariance.
/// Labels cycle `0, 1, .., C-1` so any aligned block of `C` rows is
/// balanced.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub config: DatasetConfig,
    pub seed: u64,
    pub train_x: Matrix,
    pub train_y: Vec<usize>,
    pub val_x: Matrix,
    pub val_y: Vec<usize>,
}

impl SyntheticDataset {
    pub fn generate(config: DatasetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let means: Vec<Vec<f64>> = (0..config.num_classes)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| config.radius * x / norm).collect()
            })
            .collect();
        let draw = |n: usize, rng: &mut ChaCha8Rng| {
            let mut x = Matrix::zeros(n, d);
            let y: Vec<usize> = (0..n).map(|i| i % config.num_classes).collect();
            for (i, label) in y.iter().enumerate() {
                for (j, v) in x.row_mut(i).iter_mut().enumerate() {
                    let noise: f64 = rng.sample(StandardNormal);
                    *v = means[*label][j] + noise;
                }
            }
            (x, y)
        };
        let (train_x, train_y) = draw(config.train, &mut rng);
        let (val_x, val_y) = draw(config.validation, &mut rng);
        Self {
            config,
            seed,
            train_x,
            train_y,
            val_x,
            val_y,
        }
    }

    /// Random training minibatch (indices drawn without replacement).
    pub fn train_batch<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> (Matrix, Vec<usize>) {
        let mut idx: Vec<usize> = (0..self.train_y.len()).collect();
        idx.shuffle(rng);
        idx.truncate(size);
        gather(&self.train_x, &self.train_y, &idx)
    }

    /// The first `size` validation points.
    pub fn validation_batch(&self, size: usize) -> (Matrix, Vec<usize>) {
        let idx: Vec<usize> = (0..size.min(self.val_y.len())).collect();
        gather(&self.val_x, &self.val_y, &idx)
    }
}

fn gather(x: &Matrix, y: &[usize], idx: &[usize]) -> (Matrix, Vec<usize>) {
    let mut out = Matrix::zeros(idx.len(), x.cols());
    for (r, i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(x.row(*i));
    }
    (out, idx.iter().map(|i| y[*i]).collect())
}

/// Learnable parameters of one `(edge, op)` bank entry. Convolutions have
/// only the dense mix; separable variants also scale coordinates first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpWeights {
    pub diag: Option<Matrix>,
    pub dense: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedWeights {
    pub dim: usize,
    pub num_classes: usize,
    pub num_edges: usize,
    /// Indexed by `edge * 13 + op`; `None` for parameter-free operations.
    pub bank: Vec<Option<OpWeights>>,
    pub head_w: Matrix,
    pub head_b: Matrix,
    /// How many sampled cells have routed a training step through each
    /// `(edge, op)` pair, learnable or not.
    pub update_counts: Vec<u64>,
}

fn is_learnable(op: OperationKind) -> bool {
    matches!(
        op.type_class(),
        TypeClass::Conv | TypeClass::SepConv | TypeClass::DilSepConv
    )
}

impl SharedWeights {
    /// Dense mixes are Glorot-uniform, diagonals start at one, the head
    /// starts at zero.
    pub fn init<R: Rng + ?Sized>(num_intermediate: usize, dim: usize, num_classes: usize, rng: &mut R) -> Self {
        let num_edges = 2 * num_intermediate;
        let mut bank = Vec::with_capacity(num_edges * NUM_OPS);
        for _ in 0..num_edges {
            for op in OperationKind::ALL {
                bank.push(is_learnable(op).then(|| OpWeights {
                    diag: (op.type_class() != TypeClass::Conv).then(|| Matrix::from_vec(1, dim, vec![1.0; dim]).unwrap()),
                    dense: Matrix::glorot(dim, dim, rng),
                }));
            }
        }
        Self {
            dim,
            num_classes,
            num_edges,
            bank,
            head_w: Matrix::zeros(num_intermediate * dim, num_classes),
            head_b: Matrix::zeros(1, num_classes),
            update_counts: vec![0; num_edges * NUM_OPS],
        }
    }

    pub fn num_intermediate(&self) -> usize {
        self.num_edges / 2
    }

    pub fn entry(&self, edge: usize, op: OperationKind) -> Option<&OpWeights> {
        self.bank[edge * NUM_OPS + op.index()].as_ref()
    }

    pub fn update_count(&self, edge: usize, op: OperationKind) -> u64 {
        self.update_counts[edge * NUM_OPS + op.index()]
    }

    fn zeros_like(&self) -> Self {
        Self {
            dim: self.dim,
            num_classes: self.num_classes,
            num_edges: self.num_edges,
            bank: self
                .bank
                .iter()
                .map(|e| {
                    e.as_ref().map(|w| OpWeights {
                        diag: w.diag.as_ref().map(|d| Matrix::zeros(d.rows(), d.cols())),
                        dense: Matrix::zeros(w.dense.rows(), w.dense.cols()),
                    })
                })
                .collect(),
            head_w: Matrix::zeros(self.head_w.rows(), self.head_w.cols()),
            head_b: Matrix::zeros(1, self.num_classes),
            update_counts: vec![0; self.update_counts.len()],
        }
    }

    fn matrices(&self) -> impl Iterator<Item = &Matrix> {
        self.bank
            .iter()
            .flatten()
            .flat_map(|w| w.diag.iter().chain(std::iter::once(&w.dense)))
            .chain([&self.head_w, &self.head_b])
    }

    fn matrices_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.bank
            .iter_mut()
            .flatten()
            .flat_map(|w| w.diag.iter_mut().chain(std::iter::once(&mut w.dense)))
            .chain([&mut self.head_w, &mut self.head_b])
    }

    /// Every weight in a fixed order (bank entries by index, then head).
    pub fn to_flat(&self) -> Vec<f64> {
        self.matrices().flat_map(|m| m.data().iter().copied()).collect()
    }

    pub fn with_flat(&self, values: &[f64]) -> Self {
        let mut out = self.clone();
        let mut offset = 0;
        for m in out.matrices_mut() {
            let n = m.data().len();
            m.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, values.len());
        out
    }

    fn axpy(&mut self, scale: f64, other: &SharedWeights) {
        for (a, b) in self.matrices_mut().zip(other.matrices()) {
            a.axpy(scale, b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.matrices().all(Matrix::is_finite)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("shared weights serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        let w: SharedWeights = serde_json::from_str(text).map_err(|e| EvalError::Checkpoint(e.to_string()))?;
        if w.bank.len() != w.num_edges * NUM_OPS || w.update_counts.len() != w.bank.len() {
            return Err(EvalError::Checkpoint("bank size does not match edge count".into()));
        }
        if w.head_w.shape() != (w.num_intermediate() * w.dim, w.num_classes) {
            return Err(EvalError::Checkpoint("head shape does not match".into()));
        }
        Ok(w)
    }
}

fn rotate(v: &Matrix, shift: usize) -> Matrix {
    let d = v.cols();
    let mut out = Matrix::zeros(v.rows(), d);
    for r in 0..v.rows() {
        let src = v.row(r);
        for (j, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = src[(j + shift) % d];
        }
    }
    out
}

fn rotate_back(g: &Matrix, shift: usize) -> Matrix {
    let d = g.cols();
    let mut out = Matrix::zeros(g.rows(), d);
    for r in 0..g.rows() {
        let src = g.row(r);
        let dst = out.row_mut(r);
        for (j, s) in src.iter().enumerate() {
            dst[(j + shift) % d] += s;
        }
    }
    out
}

fn scale_columns(v: &Matrix, diag: &Matrix) -> Matrix {
    let mut out = v.clone();
    for r in 0..out.rows() {
        for (o, s) in out.row_mut(r).iter_mut().zip(diag.data()) {
            *o *= s;
        }
    }
    out
}

/// Circular window of width `k` centred on each coordinate.
fn window(j: usize, k: usize, d: usize) -> impl Iterator<Item = usize> {
    let half = (k / 2) as isize;
    (-half..=half).map(move |t| ((j as isize + t).rem_euclid(d as isize)) as usize)
}

fn pool(v: &Matrix, k: usize, max: bool) -> Matrix {
    let d = v.cols();
    let mut out = Matrix::zeros(v.rows(), d);
    for r in 0..v.rows() {
        let src = v.row(r);
        for (j, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = if max {
                window(j, k, d).map(|i| src[i]).fold(f64::NEG_INFINITY, f64::max)
            } else {
                window(j, k, d).map(|i| src[i]).sum::<f64>() / k as f64
            };
        }
    }
    out
}

fn pool_backward(v: &Matrix, g: &Matrix, k: usize, max: bool) -> Matrix {
    let d = v.cols();
    let mut out = Matrix::zeros(v.rows(), d);
    for r in 0..v.rows() {
        let src = v.row(r);
        let up = g.row(r);
        let dst = out.row_mut(r);
        for (j, &gj) in up.iter().enumerate() {
            if max {
                let mut best = None;
                for i in window(j, k, d) {
                    if best.is_none_or(|b: usize| src[i] > src[b]) {
                        best = Some(i);
                    }
                }
                dst[best.unwrap()] += gj;
            } else {
                for i in window(j, k, d) {
                    dst[i] += gj / k as f64;
                }
            }
        }
    }
    out
}

/// Output of edge `(edge, op)` applied to `v`.
fn apply_edge(w: &SharedWeights, edge: usize, op: OperationKind, v: &Matrix) -> Matrix {
    let k = op.kernel().unwrap_or(0) as usize;
    match op.type_class() {
        TypeClass::Conv => v.matmul(&w.entry(edge, op).unwrap().dense),
        TypeClass::SepConv => {
            let e = w.entry(edge, op).unwrap();
            scale_columns(v, e.diag.as_ref().unwrap()).matmul(&e.dense)
        }
        TypeClass::DilSepConv => {
            let e = w.entry(edge, op).unwrap();
            scale_columns(&rotate(v, k), e.diag.as_ref().unwrap()).matmul(&e.dense)
        }
        TypeClass::MaxPool => pool(v, k, true),
        TypeClass::AvgPool => pool(v, k, false),
        TypeClass::Skip => v.clone(),
        TypeClass::Null => Matrix::zeros(v.rows(), v.cols()),
    }
}

/// Accumulates parameter gradients into `grad` and returns `d/dv`.
fn edge_backward(
    w: &SharedWeights,
    grad: &mut SharedWeights,
    edge: usize,
    op: OperationKind,
    v: &Matrix,
    upstream: &Matrix,
) -> Matrix {
    let k = op.kernel().unwrap_or(0) as usize;
    let slot = edge * NUM_OPS + op.index();
    match op.type_class() {
        TypeClass::Conv => {
            let e = w.entry(edge, op).unwrap();
            grad.bank[slot].as_mut().unwrap().dense.axpy(1.0, &v.t_matmul(upstream));
            upstream.matmul_t(&e.dense)
        }
        TypeClass::SepConv | TypeClass::DilSepConv => {
            let e = w.entry(edge, op).unwrap();
            let diag = e.diag.as_ref().unwrap();
            let shifted = if op.type_class() == TypeClass::DilSepConv {
                rotate(v, k)
            } else {
                v.clone()
            };
            let scaled = scale_columns(&shifted, diag);
            let g_entry = grad.bank[slot].as_mut().unwrap();
            g_entry.dense.axpy(1.0, &scaled.t_matmul(upstream));
            let d_scaled = upstream.matmul_t(&e.dense);
            let g_diag = g_entry.diag.as_mut().unwrap();
            for r in 0..d_scaled.rows() {
                for (j, g) in g_diag.data_mut().iter_mut().enumerate() {
                    *g += d_scaled[(r, j)] * shifted[(r, j)];
                }
            }
            let d_shifted = scale_columns(&d_scaled, diag);
            if op.type_class() == TypeClass::DilSepConv {
                rotate_back(&d_shifted, k)
            } else {
                d_shifted
            }
        }
        TypeClass::MaxPool => pool_backward(v, upstream, k, true),
        TypeClass::AvgPool => pool_backward(v, upstream, k, false),
        TypeClass::Skip => upstream.clone(),
        TypeClass::Null => Matrix::zeros(v.rows(), v.cols()),
    }
}

struct SupernetForward {
    /// Node outputs in row order `-2, -1, 0, ..`.
    nodes: Vec<Matrix>,
    features: Matrix,
    logits: Matrix,
}

fn check_graph(w: &SharedWeights, graph: &CellGraph) -> Result<(), EvalError> {
    if graph.num_edges() != w.num_edges {
        return Err(EvalError::EdgeCount {
            expected: w.num_edges,
            got: graph.num_edges(),
        });
    }
    Ok(())
}

fn supernet_forward(w: &SharedWeights, graph: &CellGraph, x: &Matrix) -> SupernetForward {
    let n_int = graph.num_intermediate();
    let mut nodes = vec![x.clone(), x.clone()];
    for i in 0..n_int {
        let mut sum = Matrix::zeros(x.rows(), w.dim);
        for e in [2 * i, 2 * i + 1] {
            let slot = graph.edges()[e];
            let out = apply_edge(w, e, slot.op, &nodes[(slot.source + 2) as usize]);
            sum.axpy(1.0, &out);
        }
        nodes.push(sum.map(f64::tanh));
    }
    let mut features = Matrix::zeros(x.rows(), n_int * w.dim);
    for r in 0..x.rows() {
        let row = features.row_mut(r);
        for i in 0..n_int {
            row[i * w.dim..(i + 1) * w.dim].copy_from_slice(nodes[i + 2].row(r));
        }
    }
    let mut logits = features.matmul(&w.head_w);
    for r in 0..logits.rows() {
        for (l, b) in logits.row_mut(r).iter_mut().zip(w.head_b.data()) {
            *l += b;
        }
    }
    SupernetForward { nodes, features, logits }
}

/// Mean cross-entropy of `graph` under the shared weights.
pub fn supernet_loss(w: &SharedWeights, graph: &CellGraph, x: &Matrix, y: &[usize]) -> Result<f64, EvalError> {
    check_graph(w, graph)?;
    Ok(cross_entropy_with_grad(&supernet_forward(w, graph, x).logits, y).0)
}

/// Loss and gradient of one cell on one batch.
pub fn supernet_gradient(
    w: &SharedWeights,
    graph: &CellGraph,
    x: &Matrix,
    y: &[usize],
) -> Result<(f64, SharedWeights), EvalError> {
    check_graph(w, graph)?;
    let fwd = supernet_forward(w, graph, x);
    let (loss, d_logits) = cross_entropy_with_grad(&fwd.logits, y);
    let mut grad = w.zeros_like();
    grad.head_w = fwd.features.t_matmul(&d_logits);
    for r in 0..d_logits.rows() {
        for (g, d) in grad.head_b.data_mut().iter_mut().zip(d_logits.row(r)) {
            *g += d;
        }
    }
    let d_features = d_logits.matmul_t(&w.head_w);

    let n_int = graph.num_intermediate();
    let mut d_nodes: Vec<Matrix> = (0..n_int + 2).map(|_| Matrix::zeros(x.rows(), w.dim)).collect();
    for i in 0..n_int {
        for r in 0..x.rows() {
            d_nodes[i + 2]
                .row_mut(r)
                .copy_from_slice(&d_features.row(r)[i * w.dim..(i + 1) * w.dim]);
        }
    }
    for i in (0..n_int).rev() {
        let out = &fwd.nodes[i + 2];
        let mut d_sum = d_nodes[i + 2].clone();
        for (g, o) in d_sum.data_mut().iter_mut().zip(out.data()) {
            *g *= 1.0 - o * o;
        }
        for e in [2 * i, 2 * i + 1] {
            let slot = graph.edges()[e];
            let src = (slot.source + 2) as usize;
            let d_in = edge_backward(w, &mut grad, e, slot.op, &fwd.nodes[src], &d_sum);
            d_nodes[src].axpy(1.0, &d_in);
        }
    }
    Ok((loss, grad))
}

/// One SGD step on the average gradient of `graphs` over the batch.
/// Returns the mean pre-step loss.
pub fn supernet_train_step(
    w: &mut SharedWeights,
    graphs: &[CellGraph],
    x: &Matrix,
    y: &[usize],
    lr: f64,
) -> Result<f64, EvalError> {
    let mut total = w.zeros_like();
    let mut loss = 0.0;
    for g in graphs {
        let (l, grad) = supernet_gradient(w, g, x, y)?;
        loss += l;
        total.axpy(1.0, &grad);
    }
    let m = graphs.len() as f64;
    w.axpy(-lr / m, &total);
    for g in graphs {
        for (e, slot) in g.edges().iter().enumerate() {
            w.update_counts[e * NUM_OPS + slot.op.index()] += 1;
        }
    }
    Ok(loss / m)
}

/// Predicted classes; ties go to the lowest class index.
pub fn predict(w: &SharedWeights, graph: &CellGraph, x: &Matrix) -> Result<Vec<usize>, EvalError> {
    check_graph(w, graph)?;
    let logits = supernet_forward(w, graph, x).logits;
    Ok((0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect())
}

pub fn accuracy(graph: &CellGraph, w: &SharedWeights, x: &Matrix, y: &[usize]) -> Result<f64, EvalError> {
    let pred = predict(w, graph, x)?;
    let hits = pred.iter().zip(y).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / y.len() as f64)
}

/// Per-edge, per-operation preference scores with a known optimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedOracle {
    pub table: Matrix,
}

impl PlantedOracle {
    /// Scores drawn i.i.d. uniform in `[0, 1)`, one row per edge. Ties in
    /// any reachable set are resolved by redrawing the row.
    pub fn generate(num_edges: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table = Matrix::zeros(num_edges, NUM_OPS);
        for e in 0..num_edges {
            loop {
                for v in table.row_mut(e) {
                    *v = rng.gen();
                }
                let row = table.row(e);
                let distinct = (0..NUM_OPS).all(|a| (0..a).all(|b| row[a] != row[b]));
                if distinct {
                    break;
                }
            }
        }
        Self { table }
    }

    pub fn from_table(table: Matrix) -> Self {
        assert_eq!(table.cols(), NUM_OPS);
        Self { table }
    }

    pub fn num_edges(&self) -> usize {
        self.table.rows()
    }

    /// Best reachable target for edge `edge` currently holding `source`.
    pub fn optimum(&self, edge: usize, source: OperationKind, mode: PolicyMode) -> OperationKind {
        let row = self.table.row(edge);
        let best = |candidates: &mut dyn Iterator<Item = OperationKind>| {
            candidates
                .fold(None, |best: Option<OperationKind>, op| match best {
                    Some(b) if row[b.index()] >= row[op.index()] => Some(b),
                    _ => Some(op),
                })
                .unwrap()
        };
        match mode {
            PolicyMode::Nat => best(&mut nat_actions(source).into_iter()),
            PolicyMode::NatPlusPlus => best(&mut transition_mask(source).iter()),
        }
    }
}

/// Something that assigns a scalar quality to a cell.
pub trait ScoreProvider {
    fn score(&self, graph: &CellGraph) -> f64;
}

impl ScoreProvider for PlantedOracle {
    fn score(&self, graph: &CellGraph) -> f64 {
        graph
            .edges()
            .iter()
            .enumerate()
            .map(|(e, slot)| self.table[(e, slot.op.index())])
            .sum()
    }
}

/// Accuracy of a cell on one fixed batch under shared weights.
pub struct SupernetScorer<'a> {
    pub weights: &'a SharedWeights,
    pub x: &'a Matrix,
    pub y: &'a [usize],
}

impl ScoreProvider for SupernetScorer<'_> {
    fn score(&self, graph: &CellGraph) -> f64 {
        accuracy(graph, self.weights, self.x, self.y).expect("cell matches the supernet edge count")
    }
}

/// Improvement `score(alpha) - score(beta)` for cells sharing a topology.
pub fn reward(alpha: &CellGraph, beta: &CellGraph, provider: &dyn ScoreProvider) -> Result<f64, EvalError> {
    if !alpha.same_topology(beta) {
        return Err(GraphError::TopologyMismatch.into());
    }
    Ok(provider.score(alpha) - provider.score(beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archgraph::sample_uniform;
    use crate::numkernel::grad_check;
    use crate::opspace::OperationKind::*;

    fn uniform_cell(op: OperationKind) -> CellGraph {
        CellGraph::from_slots(&[
            [(-2, op), (-1, op)],
            [(-2, op), (0, op)],
            [(0, op), (1, op)],
            [(1, op), (2, op)],
        ])
        .unwrap()
    }

    fn small_setup(seed: u64) -> (SharedWeights, SyntheticDataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = SyntheticDataset::generate(
            DatasetConfig {
                dim: 6,
                num_classes: 3,
                train: 30,
                validation: 30,
                ..DatasetConfig::default()
            },
            seed,
        );
        let mut w = SharedWeights::init(4, 6, 3, &mut rng);
        // non-zero head so every bank entry sees gradient
        w.head_w = Matrix::glorot(24, 3, &mut rng);
        w.head_b = Matrix::glorot(1, 3, &mut rng);
        for entry in w.bank.iter_mut().flatten() {
            if let Some(d) = entry.diag.as_mut() {
                *d = Matrix::random_uniform(1, 6, 1.5, &mut rng);
            }
        }
        (w, data)
    }

    #[test]
    fn dataset_is_seeded_and_balanced() {
        let a = SyntheticDataset::generate(DatasetConfig::default(), 7);
        let b = SyntheticDataset::generate(DatasetConfig::default(), 7);
        assert_eq!(a, b);
        assert_eq!(a.train_x.shape(), (2000, 16));
        assert_eq!(a.val_x.shape(), (1000, 16));
        let (_, y) = a.validation_batch(256);
        for c in 0..8 {
            assert_eq!(y.iter().filter(|l| **l == c).count(), 32);
        }
    }

    #[test]
    fn supernet_gradient_matches_finite_differences() {
        for seed in 0..4 {
            let (w, data) = small_setup(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let graph = sample_uniform(4, &mut rng);
            let (x, y) = data.train_batch(5, &mut rng);
            let (_, grad) = supernet_gradient(&w, &graph, &x, &y).unwrap();
            let report = grad_check(
                |p| supernet_loss(&w.with_flat(p), &graph, &x, &y).unwrap(),
                &grad.to_flat(),
                &w.to_flat(),
                1e-6,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn every_operation_has_a_correct_gradient() {
        let (w, data) = small_setup(11);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (x, y) = data.train_batch(4, &mut rng);
        for op in OperationKind::ALL {
            let graph = uniform_cell(op);
            let (_, grad) = supernet_gradient(&w, &graph, &x, &y).unwrap();
            let report = grad_check(
                |p| supernet_loss(&w.with_flat(p), &graph, &x, &y).unwrap(),
                &grad.to_flat(),
                &w.to_flat(),
                1e-6,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{op}: {report:?}");
        }
    }

    #[test]
    fn all_null_cell_only_moves_the_head_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = SyntheticDataset::generate(DatasetConfig::default(), 1);
        let mut w = SharedWeights::init(4, 16, 8, &mut rng);
        w.head_w = Matrix::glorot(64, 8, &mut rng);
        let (x, y) = data.train_batch(32, &mut rng);
        let (_, grad) = supernet_gradient(&w, &uniform_cell(Null), &x, &y).unwrap();
        for entry in grad.bank.iter().flatten() {
            assert!(entry.dense.data().iter().all(|v| *v == 0.0));
            assert!(entry.diag.iter().all(|d| d.data().iter().all(|v| *v == 0.0)));
        }
        assert!(grad.head_w.data().iter().all(|v| *v == 0.0));
        assert!(grad.head_b.data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn untrained_supernet_is_at_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = SyntheticDataset::generate(DatasetConfig::default(), 2);
        let w = SharedWeights::init(4, 16, 8, &mut rng);
        let (x, y) = data.validation_batch(256);
        assert_eq!(accuracy(&uniform_cell(Conv3x3), &w, &x, &y).unwrap(), 0.125);
        assert_eq!(accuracy(&uniform_cell(Null), &w, &x, &y).unwrap(), 0.125);
    }

    #[test]
    fn null_cell_is_a_constant_classifier_after_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = SyntheticDataset::generate(DatasetConfig::default(), 3);
        let mut w = SharedWeights::init(4, 16, 8, &mut rng);
        for _ in 0..50 {
            let (x, y) = data.train_batch(64, &mut rng);
            let g = sample_uniform(4, &mut rng);
            supernet_train_step(&mut w, &[g], &x, &y, 0.05).unwrap();
        }
        let (x, y) = data.validation_batch(256);
        let pred = predict(&w, &uniform_cell(Null), &x).unwrap();
        assert!(pred.iter().all(|p| *p == pred[0]));
        assert_eq!(accuracy(&uniform_cell(Null), &w, &x, &y).unwrap(), 0.125);
    }

    #[test]
    fn small_steps_descend() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = SyntheticDataset::generate(DatasetConfig::default(), 4);
        let mut w = SharedWeights::init(4, 16, 8, &mut rng);
        let mut passes = 0;
        for _ in 0..100 {
            let (x, y) = data.train_batch(64, &mut rng);
            let g = sample_uniform(4, &mut rng);
            let before = supernet_loss(&w, &g, &x, &y).unwrap();
            let reported = supernet_train_step(&mut w, std::slice::from_ref(&g), &x, &y, 1e-3).unwrap();
            assert_eq!(before, reported);
            let after = supernet_loss(&w, &g, &x, &y).unwrap();
            if after <= before {
                passes += 1;
            }
        }
        assert!(passes >= 95, "{passes}/100 steps descended");
    }

    #[test]
    fn edges_share_bank_entries_by_edge_and_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = SharedWeights::init(4, 16, 8, &mut rng);
        let a = uniform_cell(Conv3x3);
        let mut ops = a.ops();
        ops[3] = SepConv5x5;
        let b = a.with_ops(&ops).unwrap();
        // identical lookups for the edges the two cells agree on
        for e in [0, 1, 2, 4, 5, 6, 7] {
            assert!(std::ptr::eq(
                w.entry(e, a.edges()[e].op).unwrap(),
                w.entry(e, b.edges()[e].op).unwrap()
            ));
        }
        assert!(w.entry(3, Skip).is_none());
        assert!(w.entry(3, Conv1x1).unwrap().diag.is_none());
        assert!(w.entry(3, DilSepConv3x3).unwrap().diag.is_some());
    }

    #[test]
    fn oracle_rewards() {
        let mut table = Matrix::zeros(8, NUM_OPS);
        for e in 0..8 {
            table[(e, Skip.index())] = 1.0;
        }
        let oracle = PlantedOracle::from_table(table);
        let beta = uniform_cell(Null);
        let alpha = uniform_cell(Skip);
        assert_eq!(reward(&alpha, &beta, &oracle).unwrap(), 8.0);
        assert_eq!(reward(&beta, &alpha, &oracle).unwrap(), -8.0);
        assert_eq!(reward(&beta, &beta, &oracle).unwrap(), 0.0);

        let other = CellGraph::from_slots(&[
            [(-1, Null), (-1, Null)],
            [(-2, Null), (0, Null)],
            [(0, Null), (1, Null)],
            [(1, Null), (2, Null)],
        ])
        .unwrap();
        assert!(matches!(
            reward(&other, &beta, &oracle),
            Err(EvalError::Graph(GraphError::TopologyMismatch))
        ));
    }

    #[test]
    fn oracle_optimum_is_unique_and_reachable() {
        let oracle = PlantedOracle::generate(8, 17);
        for e in 0..8 {
            for source in OperationKind::ALL {
                let best = oracle.optimum(e, source, PolicyMode::NatPlusPlus);
                let mask = transition_mask(source);
                assert!(mask.contains(best));
                let top = oracle.table[(e, best.index())];
                assert_eq!(mask.iter().filter(|op| oracle.table[(e, op.index())] >= top).count(), 1);
                let nat_best = oracle.optimum(e, source, PolicyMode::Nat);
                assert!(nat_actions(source).contains(&nat_best));
            }
        }
    }

    #[test]
    fn supernet_provider_is_antisymmetric_and_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data = SyntheticDataset::generate(DatasetConfig::default(), 6);
        let mut w = SharedWeights::init(4, 16, 8, &mut rng);
        for _ in 0..20 {
            let (x, y) = data.train_batch(64, &mut rng);
            supernet_train_step(&mut w, &[sample_uniform(4, &mut rng)], &x, &y, 0.05).unwrap();
        }
        let (x, y) = data.validation_batch(256);
        let scorer = SupernetScorer {
            weights: &w,
            x: &x,
            y: &y,
        };
        let beta = uniform_cell(Conv3x3);
        let alpha = uniform_cell(Skip);
        let r = reward(&alpha, &beta, &scorer).unwrap();
        assert_eq!(r, -reward(&beta, &alpha, &scorer).unwrap());
        assert_eq!(reward(&beta, &beta, &scorer).unwrap(), 0.0);
        assert_eq!(scorer.score(&beta).to_bits(), scorer.score(&beta).to_bits());
    }

    #[test]
    fn checkpoint_round_trip() {
        let (w, _) = small_setup(8);
        assert_eq!(SharedWeights::from_json(&w.to_json()).unwrap(), w);
        let mut broken = w.clone();
        broken.num_edges = 6;
        assert!(SharedWeights::from_json(&broken.to_json()).is_err());
    }
}
