//! Graph-convolutional transition policy.
//!
//! The controller embeds a cell with a stack of graph convolutions,
//! `Z_{l+1} = relu(A Z_l W_l)` with the last layer left linear, then maps
//! every intermediate node's embedding through a shared fully connected
//! head to two blocks of `C` logits, one per incoming slot. In NAT mode
//! `C = 3` (keep, null, skip) and each row is a plain softmax; in NAT++ mode
//! `C = 13`, the action is the target operation itself, and each row is a
//! binary-masked softmax over the transitions the source operation allows.
//!
//! With the default depth of two this is exactly
//! `Z = h(A relu(A X W0) W1 W_FC)`.
//!
//! The policy factorizes over edges, so the log-probability and entropy of
//! a whole cell are sums of per-edge terms.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archgraph::{EncodingConfig, GraphEncoding};
use crate::numkernel::{bmsoftmax, entropy_grad_wrt_logits, entropy_unchecked, softmax, BinaryMask, Matrix};
use crate::opspace::{nat_actions, transition_mask, OperationKind, NUM_OPS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("edge {edge}: action {action} is outside the valid set")]
    InvalidAction { edge: usize, action: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PolicyMode {
    #[serde(rename = "nat")]
    Nat,
    #[serde(rename = "nat++")]
    NatPlusPlus,
}

impl PolicyMode {
    /// Width `C` of one slot's action head.
    pub fn num_actions(self) -> usize {
        match self {
            PolicyMode::Nat => 3,
            PolicyMode::NatPlusPlus => NUM_OPS,
        }
    }

    pub fn mask(self, source: OperationKind) -> BinaryMask {
        match self {
            PolicyMode::Nat => BinaryMask::all_ones(3),
            PolicyMode::NatPlusPlus => BinaryMask::from(&transition_mask(source)),
        }
    }

    /// Operation an edge ends up with after taking `action`.
    pub fn target(self, source: OperationKind, action: usize) -> OperationKind {
        match self {
            PolicyMode::Nat => nat_actions(source)[action],
            PolicyMode::NatPlusPlus => OperationKind::ALL[action],
        }
    }

    /// Size of the per-edge assignment space of a cell with `num_edges`
    /// edges: one head choice per edge, `C^K`. `None` on overflow.
    pub fn assignment_count(self, num_edges: usize) -> Option<u128> {
        (self.num_actions() as u128).checked_pow(u32::try_from(num_edges).ok()?)
    }

    /// Every action vector of length `num_edges`, in odometer order with the
    /// last edge varying fastest.
    pub fn assignments(self, num_edges: usize) -> impl Iterator<Item = Vec<usize>> {
        let c = self.num_actions();
        let mut next = Some(vec![0; num_edges]);
        std::iter::from_fn(move || {
            let current = next.take()?;
            let mut succ = current.clone();
            for slot in succ.iter_mut().rev() {
                *slot += 1;
                if *slot < c {
                    next = Some(succ);
                    break;
                }
                *slot = 0;
            }
            Some(current)
        })
    }

    /// Lowest action index that leads to `target`, if any.
    pub fn action_for(self, source: OperationKind, target: OperationKind) -> Option<usize> {
        match self {
            PolicyMode::Nat => nat_actions(source).iter().position(|op| *op == target),
            PolicyMode::NatPlusPlus => transition_mask(source).contains(target).then_some(target.index()),
        }
    }
}

impl fmt::Display for PolicyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyMode::Nat => "nat",
            PolicyMode::NatPlusPlus => "nat++",
        })
    }
}

impl std::str::FromStr for PolicyMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nat" => Ok(PolicyMode::Nat),
            "nat++" | "natpp" => Ok(PolicyMode::NatPlusPlus),
            other => Err(format!("unknown mode `{other}` (expected nat or nat++)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub mode: PolicyMode,
    /// Number of graph-convolution layers.
    pub depth: usize,
    pub hidden: usize,
    pub encoding: EncodingConfig,
}

impl PolicyConfig {
    pub fn new(mode: PolicyMode) -> Self {
        Self {
            mode,
            depth: 2,
            hidden: 64,
            encoding: EncodingConfig::default(),
        }
    }
}

/// Controller weights: one matrix per graph convolution plus the FC head
/// (`hidden x 2C`). Also used as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub mode: PolicyMode,
    pub layers: Vec<Matrix>,
    pub fc: Matrix,
}

impl PolicyParams {
    pub fn zeros(cfg: &PolicyConfig) -> Self {
        Self::build(cfg, Matrix::zeros)
    }

    /// Glorot-uniform initialization, layers first, head last.
    pub fn init<R: Rng + ?Sized>(cfg: &PolicyConfig, rng: &mut R) -> Self {
        Self::build(cfg, |r, c| Matrix::glorot(r, c, rng))
    }

    fn build(cfg: &PolicyConfig, mut make: impl FnMut(usize, usize) -> Matrix) -> Self {
        assert!(cfg.depth >= 1, "policy needs at least one graph convolution");
        let mut layers = Vec::with_capacity(cfg.depth);
        let mut fan_in = cfg.encoding.feature_dim();
        for _ in 0..cfg.depth {
            layers.push(make(fan_in, cfg.hidden));
            fan_in = cfg.hidden;
        }
        let fc = make(cfg.hidden, 2 * cfg.mode.num_actions());
        Self {
            mode: cfg.mode,
            layers,
            fc,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            mode: self.mode,
            layers: self.layers.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect(),
            fc: Matrix::zeros(self.fc.rows(), self.fc.cols()),
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].rows()
    }

    pub fn hidden(&self) -> usize {
        self.fc.rows()
    }

    pub fn matrices(&self) -> impl Iterator<Item = &Matrix> {
        self.layers.iter().chain(std::iter::once(&self.fc))
    }

    fn matrices_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.layers.iter_mut().chain(std::iter::once(&mut self.fc))
    }

    pub fn num_values(&self) -> usize {
        self.matrices().map(|m| m.data().len()).sum()
    }

    /// All weights, layers in order then the head, each row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        self.matrices().flat_map(|m| m.data().iter().copied()).collect()
    }

    pub fn with_flat(&self, values: &[f64]) -> Self {
        assert_eq!(values.len(), self.num_values());
        let mut out = self.clone();
        let mut offset = 0;
        for m in out.matrices_mut() {
            let n = m.data().len();
            m.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        out
    }

    /// `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &PolicyParams) {
        for (a, b) in self.matrices_mut().zip(other.matrices()) {
            a.axpy(scale, b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.matrices().all(Matrix::is_finite)
    }

    pub fn check_shapes(&self) -> Result<(), PolicyError> {
        if self.layers.is_empty() {
            return Err(PolicyError::Shape("no graph-convolution layers".into()));
        }
        let hidden = self.fc.rows();
        for (i, w) in self.layers.iter().enumerate() {
            if w.cols() != hidden || (i > 0 && w.rows() != hidden) {
                return Err(PolicyError::Shape(format!("layer {i} is {:?}", w.shape())));
            }
        }
        if self.fc.cols() != 2 * self.mode.num_actions() {
            return Err(PolicyError::Shape(format!(
                "head is {:?}, mode {} needs {} columns",
                self.fc.shape(),
                self.mode,
                2 * self.mode.num_actions()
            )));
        }
        Ok(())
    }

    /// JSON checkpoint: `{"mode", "layers": [{"rows","cols","data"}..], "fc"}`.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("policy params serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        let params: PolicyParams = serde_json::from_str(text).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        params.check_shapes()?;
        if !params.is_finite() {
            return Err(PolicyError::Checkpoint("non-finite weight".into()));
        }
        Ok(params)
    }
}

/// Per-edge distributions `Z` (`K x C`) and the masks that shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub mode: PolicyMode,
    pub probs: Matrix,
    pub masks: Vec<BinaryMask>,
}

impl PolicyOutput {
    pub fn num_edges(&self) -> usize {
        self.probs.rows()
    }

    pub fn log_prob(&self, actions: &[usize]) -> f64 {
        actions
            .iter()
            .enumerate()
            .map(|(e, a)| self.probs[(e, *a)].ln())
            .sum()
    }

    /// Sum of per-edge entropies.
    pub fn entropy(&self) -> f64 {
        (0..self.num_edges()).map(|e| entropy_unchecked(self.probs.row(e))).sum()
    }

    /// Entropy of the uniform distribution over each row's mask, summed.
    pub fn max_entropy(&self) -> f64 {
        self.masks.iter().map(|m| (m.popcount() as f64).ln()).sum()
    }
}

struct Forward {
    /// `A Z_l` for every layer input.
    aggregated: Vec<Matrix>,
    /// `A Z_l W_l` before the rectifier.
    pre_activations: Vec<Matrix>,
    embeddings: Matrix,
    output: PolicyOutput,
}

fn check_inputs(enc: &GraphEncoding, ops: &[OperationKind], params: &PolicyParams) -> Result<(), PolicyError> {
    params.check_shapes()?;
    let n = enc.features.rows();
    if enc.adjacency.shape() != (n, n) {
        return Err(PolicyError::Shape(format!(
            "adjacency {:?} for {n} nodes",
            enc.adjacency.shape()
        )));
    }
    if n < 4 || ops.len() != 2 * (n - 3) {
        return Err(PolicyError::Shape(format!("{} edge ops for {n} nodes", ops.len())));
    }
    if enc.features.cols() != params.input_dim() {
        return Err(PolicyError::Shape(format!(
            "features have {} columns, first layer expects {}",
            enc.features.cols(),
            params.input_dim()
        )));
    }
    Ok(())
}

fn run_forward(enc: &GraphEncoding, ops: &[OperationKind], params: &PolicyParams) -> Result<Forward, PolicyError> {
    check_inputs(enc, ops, params)?;
    let depth = params.depth();
    let mut aggregated = Vec::with_capacity(depth);
    let mut pre_activations = Vec::with_capacity(depth);
    let mut z = enc.features.clone();
    for (l, w) in params.layers.iter().enumerate() {
        let az = enc.adjacency.matmul(&z);
        let pre = az.matmul(w);
        z = if l + 1 < depth { pre.relu() } else { pre.clone() };
        aggregated.push(az);
        pre_activations.push(pre);
    }
    let embeddings = z;
    let logits = embeddings.matmul(&params.fc);

    let c = params.mode.num_actions();
    let k = ops.len();
    let mut probs = Matrix::zeros(k, c);
    let mut masks = Vec::with_capacity(k);
    for (e, op) in ops.iter().enumerate() {
        let (row, slot) = edge_position(e);
        let u = &logits.row(row)[slot * c..(slot + 1) * c];
        let mask = params.mode.mask(*op);
        let p = match params.mode {
            PolicyMode::Nat => softmax(u),
            PolicyMode::NatPlusPlus => bmsoftmax(u, &mask).expect("transition masks are never empty"),
        };
        probs.row_mut(e).copy_from_slice(&p);
        masks.push(mask);
    }
    Ok(Forward {
        aggregated,
        pre_activations,
        embeddings,
        output: PolicyOutput {
            mode: params.mode,
            probs,
            masks,
        },
    })
}

/// Node row and slot that own edge `e` in canonical order.
#[inline]
fn edge_position(e: usize) -> (usize, usize) {
    (e / 2 + 2, e % 2)
}

pub fn forward(enc: &GraphEncoding, ops: &[OperationKind], params: &PolicyParams) -> Result<PolicyOutput, PolicyError> {
    run_forward(enc, ops, params).map(|f| f.output)
}

/// One categorical draw per edge. Returns the actions and their joint
/// log-probability.
pub fn sample_actions<R: Rng + ?Sized>(out: &PolicyOutput, rng: &mut R) -> (Vec<usize>, f64) {
    let mut actions = Vec::with_capacity(out.num_edges());
    let mut log_prob = 0.0;
    for e in 0..out.num_edges() {
        let row = out.probs.row(e);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = None;
        let mut last_positive = 0;
        for (i, p) in row.iter().enumerate() {
            if *p <= 0.0 {
                continue;
            }
            last_positive = i;
            acc += p;
            if u < acc {
                chosen = Some(i);
                break;
            }
        }
        // rounding can leave acc a hair below 1
        let a = chosen.unwrap_or(last_positive);
        log_prob += row[a].ln();
        actions.push(a);
    }
    (actions, log_prob)
}

/// Per-edge argmax; ties go to the lowest index.
pub fn argmax_actions(out: &PolicyOutput) -> Vec<usize> {
    (0..out.num_edges())
        .map(|e| {
            let row = out.probs.row(e);
            let mut best = 0;
            for (i, p) in row.iter().enumerate() {
                if *p > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Maps per-edge actions to target operations.
pub fn targets_of(mode: PolicyMode, ops: &[OperationKind], actions: &[usize]) -> Vec<OperationKind> {
    ops.iter().zip(actions).map(|(op, a)| mode.target(*op, *a)).collect()
}

/// `reward * log pi(actions) + lambda * H(pi)`; the quantity whose
/// gradient [`policy_gradient`] returns.
pub fn objective(
    enc: &GraphEncoding,
    ops: &[OperationKind],
    params: &PolicyParams,
    actions: &[usize],
    reward: f64,
    entropy_weight: f64,
) -> Result<f64, PolicyError> {
    let out = forward(enc, ops, params)?;
    Ok(reward * out.log_prob(actions) + entropy_weight * out.entropy())
}

/// Exact gradient of [`objective`] with respect to every weight.
pub fn policy_gradient(
    enc: &GraphEncoding,
    ops: &[OperationKind],
    params: &PolicyParams,
    actions: &[usize],
    reward: f64,
    entropy_weight: f64,
) -> Result<PolicyParams, PolicyError> {
    let fwd = run_forward(enc, ops, params)?;
    let out = &fwd.output;
    if actions.len() != ops.len() {
        return Err(PolicyError::Shape(format!("{} actions for {} edges", actions.len(), ops.len())));
    }
    let c = params.mode.num_actions();
    for (e, a) in actions.iter().enumerate() {
        if *a >= c || !out.masks[e].get(*a) {
            return Err(PolicyError::InvalidAction { edge: e, action: *a });
        }
    }

    // d objective / d logits, scattered back into the node-by-2C layout
    let n = enc.features.rows();
    let mut d_logits = Matrix::zeros(n, 2 * c);
    for (e, a) in actions.iter().enumerate() {
        let p = out.probs.row(e);
        let (row, slot) = edge_position(e);
        let dh = entropy_grad_wrt_logits(p);
        let block = &mut d_logits.row_mut(row)[slot * c..(slot + 1) * c];
        for (j, g) in block.iter_mut().enumerate() {
            // masked entries have p = 0, so both terms vanish there
            let onehot = if j == *a { 1.0 } else { 0.0 };
            let score = if out.masks[e].get(j) { onehot - p[j] } else { 0.0 };
            *g = reward * score + entropy_weight * dh[j];
        }
    }

    let mut grad = params.zeros_like();
    grad.fc = fwd.embeddings.t_matmul(&d_logits);
    let mut upstream = d_logits.matmul_t(&params.fc);
    for l in (0..params.depth()).rev() {
        if l + 1 < params.depth() {
            let pre = &fwd.pre_activations[l];
            for (g, p) in upstream.data_mut().iter_mut().zip(pre.data()) {
                if *p <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        grad.layers[l] = fwd.aggregated[l].t_matmul(&upstream);
        if l > 0 {
            upstream = enc.adjacency.t_matmul(&upstream.matmul_t(&params.layers[l]));
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archgraph::{encode, sample_uniform, CellGraph};
    use crate::numkernel::{grad_check, GradCheckReport};
    use crate::opspace::OperationKind::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cell(ops: [OperationKind; 8]) -> CellGraph {
        CellGraph::from_slots(&[
            [(-2, ops[0]), (-1, ops[1])],
            [(-2, ops[2]), (0, ops[3])],
            [(0, ops[4]), (1, ops[5])],
            [(1, ops[6]), (2, ops[7])],
        ])
        .unwrap()
    }

    fn setup(mode: PolicyMode, graph: &CellGraph) -> (GraphEncoding, PolicyConfig) {
        let cfg = PolicyConfig::new(mode);
        (encode(graph, &cfg.encoding).unwrap(), cfg)
    }

    #[test]
    fn zero_weights_give_uniform_rows() {
        let g = cell([Conv3x3, Conv1x1, Skip, Null, MaxPool5x5, SepConv3x3, Conv5x5, AvgPool3x3]);
        let (enc, cfg) = setup(PolicyMode::Nat, &g);
        let out = forward(&enc, &g.ops(), &PolicyParams::zeros(&cfg)).unwrap();
        assert_eq!(out.probs.shape(), (8, 3));
        for e in 0..8 {
            for p in out.probs.row(e) {
                assert!((p - 1.0 / 3.0).abs() < 1e-15);
            }
        }

        let (enc, cfg) = setup(PolicyMode::NatPlusPlus, &g);
        let out = forward(&enc, &g.ops(), &PolicyParams::zeros(&cfg)).unwrap();
        let row = out.probs.row(1);
        for op in OperationKind::ALL {
            let expected = if [Conv1x1, Skip, Null].contains(&op) { 1.0 / 3.0 } else { 0.0 };
            assert!((row[op.index()] - expected).abs() < 1e-15, "{op}");
        }
    }

    #[test]
    fn skip_edges_never_reach_convolutions() {
        let g = cell([Skip; 8]);
        let (enc, cfg) = setup(PolicyMode::NatPlusPlus, &g);
        let params = PolicyParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let out = forward(&enc, &g.ops(), &params).unwrap();
        for e in 0..8 {
            for op in OperationKind::ALL {
                if op != Skip && op != Null {
                    assert_eq!(out.probs[(e, op.index())], 0.0);
                }
            }
            assert!((out.probs.row(e).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatches_are_reported() {
        let g = cell([Conv3x3; 8]);
        let (enc, cfg) = setup(PolicyMode::Nat, &g);
        let params = PolicyParams::zeros(&cfg);
        assert!(matches!(forward(&enc, &g.ops()[..4], &params), Err(PolicyError::Shape(_))));
        let mut wide = cfg;
        wide.encoding.max_intermediate = 6;
        assert!(matches!(
            forward(&enc, &g.ops(), &PolicyParams::zeros(&wide)),
            Err(PolicyError::Shape(_))
        ));
    }

    fn output_with_rows(rows: &[&[f64]]) -> PolicyOutput {
        let c = rows[0].len();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        PolicyOutput {
            mode: PolicyMode::Nat,
            probs: Matrix::from_vec(rows.len(), c, data).unwrap(),
            masks: rows
                .iter()
                .map(|r| BinaryMask::new(r.iter().map(|p| *p > 0.0).collect()))
                .collect(),
        }
    }

    #[test]
    fn sampling_degenerate_rows() {
        let out = output_with_rows(&[&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let (a, lp) = sample_actions(&out, &mut rng);
            assert_eq!(a, vec![0, 2]);
            assert_eq!(lp, 0.0);
        }
    }

    #[test]
    fn argmax_examples() {
        let out = output_with_rows(&[&[0.2, 0.5, 0.3], &[0.5, 0.5, 0.0], &[0.0, 1.0, 0.0]]);
        assert_eq!(argmax_actions(&out), vec![1, 0, 1]);
    }

    #[test]
    fn mode_target_mapping() {
        assert_eq!(PolicyMode::Nat.target(Conv3x3, 0), Conv3x3);
        assert_eq!(PolicyMode::Nat.target(Conv3x3, 1), Null);
        assert_eq!(PolicyMode::Nat.target(Conv3x3, 2), Skip);
        assert_eq!(PolicyMode::NatPlusPlus.target(Conv3x3, SepConv3x3.index()), SepConv3x3);
        assert_eq!(PolicyMode::Nat.action_for(Null, Skip), Some(2));
        assert_eq!(PolicyMode::NatPlusPlus.action_for(Conv1x1, SepConv3x3), None);
        assert_eq!("nat++".parse::<PolicyMode>(), Ok(PolicyMode::NatPlusPlus));
    }

    #[test]
    fn zero_reward_and_weight_give_zero_gradient() {
        let g = cell([Conv3x3; 8]);
        let (enc, cfg) = setup(PolicyMode::NatPlusPlus, &g);
        let params = PolicyParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let grad = policy_gradient(&enc, &g.ops(), &params, &[Conv3x3.index(); 8], 0.0, 0.0).unwrap();
        assert!(grad.to_flat().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn invalid_actions_are_rejected() {
        let g = cell([Conv1x1; 8]);
        let (enc, cfg) = setup(PolicyMode::NatPlusPlus, &g);
        let params = PolicyParams::zeros(&cfg);
        let mut actions = vec![Conv1x1.index(); 8];
        actions[4] = SepConv3x3.index();
        assert_eq!(
            policy_gradient(&enc, &g.ops(), &params, &actions, 1.0, 0.0),
            Err(PolicyError::InvalidAction { edge: 4, action: SepConv3x3.index() })
        );
    }

    #[test]
    fn logit_gradient_at_zero_weights() {
        // One identity layer makes the embeddings A X, so the head gradient
        // is (A X)^T dU. On skip edges the NAT++ row is a two-way choice
        // {skip, null} at zero logits, so dU = onehot_a - p = (+0.5, -0.5).
        let g = cell([Skip; 8]);
        let (enc, cfg) = setup(PolicyMode::NatPlusPlus, &g);
        let dim = cfg.encoding.feature_dim();
        let params = PolicyParams {
            mode: PolicyMode::NatPlusPlus,
            layers: vec![Matrix::identity(dim)],
            fc: Matrix::zeros(dim, 26),
        };
        let mut actions = vec![Null.index(); 8];
        actions[0] = Skip.index();
        let grad = policy_gradient(&enc, &g.ops(), &params, &actions, 1.0, 0.0).unwrap();

        let mut d_logits = Matrix::zeros(7, 26);
        for e in 0..8 {
            let (row, slot) = edge_position(e);
            let (on, off) = if e == 0 { (Skip, Null) } else { (Null, Skip) };
            d_logits[(row, slot * 13 + on.index())] = 0.5;
            d_logits[(row, slot * 13 + off.index())] = -0.5;
        }
        let emb = enc.adjacency.matmul(&enc.features);
        assert_eq!(grad.fc, emb.t_matmul(&d_logits));
    }

    fn check_instance(mode: PolicyMode, depth: usize, hidden: usize, seed: u64) -> GradCheckReport {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = sample_uniform(rng.gen_range(1..=4), &mut rng);
        let mut cfg = PolicyConfig::new(mode);
        cfg.depth = depth;
        cfg.hidden = hidden;
        let enc = encode(&g, &cfg.encoding).unwrap();
        let params = PolicyParams::init(&cfg, &mut rng);
        let out = forward(&enc, &g.ops(), &params).unwrap();
        let (actions, _) = sample_actions(&out, &mut rng);
        let reward = rng.gen_range(-2.0..2.0);
        let lambda = rng.gen_range(0.0..0.5);
        let grad = policy_gradient(&enc, &g.ops(), &params, &actions, reward, lambda).unwrap();
        let ops = g.ops();
        grad_check(
            |x| objective(&enc, &ops, &params.with_flat(x), &actions, reward, lambda).unwrap(),
            &grad.to_flat(),
            &params.to_flat(),
            1e-5,
        )
        .unwrap()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..6 {
            for mode in [PolicyMode::Nat, PolicyMode::NatPlusPlus] {
                for depth in [1, 2, 3] {
                    let report = check_instance(mode, depth, 8, seed);
                    assert!(report.max_rel_error < 1e-4, "mode {mode} depth {depth} seed {seed}: {report:?}");
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = PolicyConfig::new(PolicyMode::NatPlusPlus);
        let params = PolicyParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let back = PolicyParams::from_json(&params.to_json()).unwrap();
        assert_eq!(back, params);
        let mut broken = params.clone();
        broken.mode = PolicyMode::Nat;
        assert!(PolicyParams::from_json(&broken.to_json()).is_err());
    }
}
