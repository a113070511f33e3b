//! Cell graphs.
//!
//! A cell with `I` intermediate nodes has `|V| = I + 3` nodes indexed
//! `-2, -1, 0, .., I`: two inputs, the intermediates, and the output node
//! that concatenates every intermediate. Each intermediate owns exactly two
//! incoming edge slots, so a cell has `K = 2I` edges. Edges are kept in
//! canonical order `(target, slot)`, which makes edge `e` belong to node
//! `e / 2`, slot `e % 2`.

use std::fmt;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkernel::Matrix;
use crate::opspace::{
    cost_of_op, is_valid_transition_natpp, is_whitelisted_increase, CostConfig, OpCost, OperationKind, NUM_OPS,
};

/// Node index in the `-2 ..= I` numbering.
pub type NodeIndex = i32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ValidationError {
    #[error("node count: a cell needs at least 4 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("slot index: edge {edge} uses slot {slot}, only 0 and 1 exist")]
    SlotOutOfRange { edge: usize, slot: u8 },
    #[error("dangling node: edge {edge} references node {node}")]
    DanglingNode { edge: usize, node: NodeIndex },
    #[error("acyclicity: edge {edge} runs from {source_node} to {target}")]
    Acyclicity {
        edge: usize,
        source_node: NodeIndex,
        target: NodeIndex,
    },
    #[error("slot count: node {node} has {count} incoming slots, expected 2")]
    SlotCount { node: NodeIndex, count: usize },
    #[error("duplicate slot: node {node} slot {slot} is defined twice")]
    DuplicateSlot { node: NodeIndex, slot: u8 },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error(transparent)]
    Invalid(#[from] ValidationError),
    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("edge {edge}: transition {from} -> {to} is not allowed")]
    InvalidTransition {
        edge: usize,
        from: OperationKind,
        to: OperationKind,
    },
    #[error("graph has {got} intermediate nodes, encoding supports at most {max}")]
    TooLarge { got: usize, max: usize },
    #[error("graphs do not share a topology")]
    TopologyMismatch,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}, field `{field}`: {message}")]
pub struct ParseError {
    pub line: usize,
    pub field: String,
    pub message: String,
}

impl ParseError {
    fn new(line: usize, field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            line,
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EdgeSlot {
    pub target: NodeIndex,
    pub slot: u8,
    pub source: NodeIndex,
    pub op: OperationKind,
}

/// A validated cell. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct CellGraph {
    num_nodes: usize,
    edges: Vec<EdgeSlot>,
}

#[derive(Deserialize)]
struct RawCellGraph {
    num_nodes: usize,
    edges: Vec<EdgeSlot>,
}

impl<'de> Deserialize<'de> for CellGraph {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = RawCellGraph::deserialize(deserializer)?;
        CellGraph::new(raw.num_nodes, raw.edges).map_err(serde::de::Error::custom)
    }
}

/// Checks every cell invariant and names the first one violated.
///
/// Per-edge checks run in edge order first (slot range, dangling indices,
/// acyclicity), then per-node slot counts, then duplicates.
pub fn validate(num_nodes: usize, edges: &[EdgeSlot]) -> Result<(), ValidationError> {
    if num_nodes < 4 {
        return Err(ValidationError::TooFewNodes(num_nodes));
    }
    let num_intermediate = num_nodes - 3;
    let output = num_intermediate as NodeIndex;
    for (edge, e) in edges.iter().enumerate() {
        if e.slot > 1 {
            return Err(ValidationError::SlotOutOfRange { edge, slot: e.slot });
        }
        for node in [e.target, e.source] {
            if !(-2..=output).contains(&node) {
                return Err(ValidationError::DanglingNode { edge, node });
            }
        }
        if e.source >= e.target {
            return Err(ValidationError::Acyclicity {
                edge,
                source_node: e.source,
                target: e.target,
            });
        }
        // only intermediates receive slots; the output concatenates
        if e.target < 0 || e.target == output {
            return Err(ValidationError::DanglingNode { edge, node: e.target });
        }
    }
    let mut counts = vec![0usize; num_intermediate];
    for e in edges {
        counts[e.target as usize] += 1;
    }
    if let Some((node, count)) = counts.iter().enumerate().find(|(_, c)| **c != 2) {
        return Err(ValidationError::SlotCount {
            node: node as NodeIndex,
            count: *count,
        });
    }
    let mut seen = vec![[false; 2]; num_intermediate];
    for e in edges {
        let cell = &mut seen[e.target as usize][e.slot as usize];
        if *cell {
            return Err(ValidationError::DuplicateSlot {
                node: e.target,
                slot: e.slot,
            });
        }
        *cell = true;
    }
    Ok(())
}

impl CellGraph {
    /// Validates and stores edges in canonical `(target, slot)` order.
    pub fn new(num_nodes: usize, mut edges: Vec<EdgeSlot>) -> Result<Self, ValidationError> {
        validate(num_nodes, &edges)?;
        edges.sort_by_key(|e| (e.target, e.slot));
        Ok(Self { num_nodes, edges })
    }

    /// Builds a cell from `(source, op)` pairs listed per intermediate node,
    /// slot 0 first.
    pub fn from_slots(slots: &[[(NodeIndex, OperationKind); 2]]) -> Result<Self, ValidationError> {
        let edges = slots
            .iter()
            .enumerate()
            .flat_map(|(node, pair)| {
                pair.iter().enumerate().map(move |(slot, (source, op))| EdgeSlot {
                    target: node as NodeIndex,
                    slot: slot as u8,
                    source: *source,
                    op: *op,
                })
            })
            .collect();
        Self::new(slots.len() + 3, edges)
    }

    /// Builds a cell where some nodes have a single natural input; the
    /// missing second slot is filled with a null edge from input `-2`
    /// (or from `-1` when `-2` already feeds slot 0).
    pub fn from_single_or_pair(inputs: &[Vec<(NodeIndex, OperationKind)>]) -> Result<Self, ValidationError> {
        let mut slots = Vec::with_capacity(inputs.len());
        for (node, list) in inputs.iter().enumerate() {
            let pair = match list.as_slice() {
                [a, b] => [*a, *b],
                [a] => {
                    let filler = if a.0 == -2 { -1 } else { -2 };
                    [*a, (filler, OperationKind::Null)]
                }
                _ => {
                    return Err(ValidationError::SlotCount {
                        node: node as NodeIndex,
                        count: list.len(),
                    })
                }
            };
            slots.push(pair);
        }
        Self::from_slots(&slots)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_intermediate(&self) -> usize {
        self.num_nodes - 3
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[EdgeSlot] {
        &self.edges
    }

    pub fn ops(&self) -> Vec<OperationKind> {
        self.edges.iter().map(|e| e.op).collect()
    }

    pub fn output_node(&self) -> NodeIndex {
        self.num_intermediate() as NodeIndex
    }

    /// Same node count and same `(target, slot, source)` triples.
    pub fn same_topology(&self, other: &CellGraph) -> bool {
        self.num_nodes == other.num_nodes
            && self
                .edges
                .iter()
                .zip(&other.edges)
                .all(|(a, b)| (a.target, a.slot, a.source) == (b.target, b.slot, b.source))
    }

    /// Copy with per-edge operations replaced; topology is unchanged.
    pub fn with_ops(&self, ops: &[OperationKind]) -> Result<CellGraph, GraphError> {
        if ops.len() != self.edges.len() {
            return Err(GraphError::ActionCount {
                expected: self.edges.len(),
                got: ops.len(),
            });
        }
        let edges = self
            .edges
            .iter()
            .zip(ops)
            .map(|(e, op)| EdgeSlot { op: *op, ..*e })
            .collect();
        Ok(CellGraph {
            num_nodes: self.num_nodes,
            edges,
        })
    }
}

/// Draws a cell with `num_intermediate` nodes from the uniform input
/// distribution: every slot picks its source uniformly among the nodes
/// before it, then its operation uniformly among all thirteen.
pub fn sample_uniform<R: Rng + ?Sized>(num_intermediate: usize, rng: &mut R) -> CellGraph {
    assert!(num_intermediate >= 1, "a cell needs at least one intermediate node");
    let mut edges = Vec::with_capacity(2 * num_intermediate);
    for target in 0..num_intermediate as NodeIndex {
        for slot in 0..2u8 {
            let source = rng.gen_range(-2..target);
            let op = OperationKind::ALL[rng.gen_range(0..NUM_OPS)];
            edges.push(EdgeSlot {
                target,
                slot,
                source,
                op,
            });
        }
    }
    CellGraph {
        num_nodes: num_intermediate + 3,
        edges,
    }
}

/// Code used in the per-slot op one-hot for "no incoming edge".
pub const NO_EDGE_CODE: usize = NUM_OPS;
const OP_CODES: usize = NUM_OPS + 1;
const ROLE_WIDTH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Adjacency {
    /// Row-normalized `A + I` where `A` holds only in-edges: each node
    /// aggregates itself and its own inputs, the output node its
    /// intermediates. A node's own attributes then never share a row with
    /// its consumers', which keeps edge positions recoverable.
    Directed,
    /// Row-normalized `A + I` with `A` symmetric.
    Undirected,
    /// Bare symmetric binary `A`, no self-loops, no normalization.
    Bare,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub max_intermediate: usize,
    pub adjacency: Adjacency,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            max_intermediate: 4,
            adjacency: Adjacency::Directed,
        }
    }
}

impl EncodingConfig {
    /// Width of a node attribute row.
    pub fn feature_dim(&self) -> usize {
        ROLE_WIDTH + self.max_intermediate + 2 * OP_CODES
    }
}

/// Matrix form `(A, X)` of a cell. Row `r` is node `r - 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphEncoding {
    pub adjacency: Matrix,
    pub features: Matrix,
}

/// Node attributes are `[role (4) | position (I_max) | slot-0 op (14) |
/// slot-1 op (14)]`; roles are input -2, input -1, intermediate, output.
/// The adjacency links each edge's target to its source (binary, parallel
/// edges collapse) and the output node to every intermediate; see
/// [`Adjacency`] for direction and normalization.
pub fn encode(graph: &CellGraph, layout: &EncodingConfig) -> Result<GraphEncoding, GraphError> {
    let intermediates = graph.num_intermediate();
    if intermediates > layout.max_intermediate {
        return Err(GraphError::TooLarge {
            got: intermediates,
            max: layout.max_intermediate,
        });
    }
    let n = graph.num_nodes();
    let row_of = |node: NodeIndex| (node + 2) as usize;
    let output_row = n - 1;

    let dim = layout.feature_dim();
    let op_base = ROLE_WIDTH + layout.max_intermediate;
    let mut features = Matrix::zeros(n, dim);
    for r in 0..n {
        let role = match r {
            0 => 0,
            1 => 1,
            r if r == output_row => 3,
            _ => 2,
        };
        features[(r, role)] = 1.0;
        if role == 2 {
            features[(r, ROLE_WIDTH + r - 2)] = 1.0;
        } else {
            features[(r, op_base + NO_EDGE_CODE)] = 1.0;
            features[(r, op_base + OP_CODES + NO_EDGE_CODE)] = 1.0;
        }
    }
    for e in graph.edges() {
        let col = op_base + e.slot as usize * OP_CODES + e.op.index();
        features[(row_of(e.target), col)] = 1.0;
    }

    let mut adjacency = Matrix::zeros(n, n);
    for e in graph.edges() {
        let (t, s) = (row_of(e.target), row_of(e.source));
        adjacency[(t, s)] = 1.0;
        if layout.adjacency != Adjacency::Directed {
            adjacency[(s, t)] = 1.0;
        }
    }
    for r in 2..output_row {
        adjacency[(output_row, r)] = 1.0;
        if layout.adjacency != Adjacency::Directed {
            adjacency[(r, output_row)] = 1.0;
        }
    }
    if layout.adjacency != Adjacency::Bare {
        for r in 0..n {
            adjacency[(r, r)] = 1.0;
            let total: f64 = adjacency.row(r).iter().sum();
            for v in adjacency.row_mut(r) {
                *v /= total;
            }
        }
    }
    Ok(GraphEncoding { adjacency, features })
}

/// Replaces each edge's operation with `targets[e]`, rejecting any
/// transition outside the joint rule.
pub fn apply_transitions(graph: &CellGraph, targets: &[OperationKind]) -> Result<CellGraph, GraphError> {
    if targets.len() != graph.num_edges() {
        return Err(GraphError::ActionCount {
            expected: graph.num_edges(),
            got: targets.len(),
        });
    }
    for (edge, (e, to)) in graph.edges().iter().zip(targets).enumerate() {
        if !is_valid_transition_natpp(e.op, *to) {
            return Err(GraphError::InvalidTransition {
                edge,
                from: e.op,
                to: *to,
            });
        }
    }
    graph.with_ops(targets)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub total_params: u64,
    pub total_madds: u64,
    pub per_edge: Vec<OpCost>,
}

pub fn cost_of(graph: &CellGraph, cfg: &CostConfig) -> CostReport {
    let per_edge: Vec<OpCost> = graph.edges().iter().map(|e| cost_of_op(e.op, cfg)).collect();
    CostReport {
        total_params: per_edge.iter().map(|c| c.params).sum(),
        total_madds: per_edge.iter().map(|c| c.madds).sum(),
        per_edge,
    }
}

/// Why an optimized cell broke its input's budget.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BudgetViolation {
    pub params: (u64, u64),
    pub madds: (u64, u64),
}

/// Checks `c(alpha) <= c(beta)` in params and madds, with the madds of
/// null -> skip edges forgiven.
pub fn check_budget(alpha: &CellGraph, beta: &CellGraph, cfg: &CostConfig) -> Result<(), BudgetViolation> {
    let a = cost_of(alpha, cfg);
    let b = cost_of(beta, cfg);
    let forgiven: u64 = alpha
        .edges()
        .iter()
        .zip(beta.edges())
        .filter(|(ea, eb)| is_whitelisted_increase(eb.op, ea.op))
        .map(|(ea, _)| cost_of_op(ea.op, cfg).madds)
        .sum();
    if a.total_params > b.total_params || a.total_madds - forgiven.min(a.total_madds) > b.total_madds {
        return Err(BudgetViolation {
            params: (a.total_params, b.total_params),
            madds: (a.total_madds, b.total_madds),
        });
    }
    Ok(())
}

impl fmt::Display for CellGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "cell v={}", self.num_nodes)?;
        for e in &self.edges {
            writeln!(f, "edge t={} s={} f={} op={}", e.target, e.slot, e.source, e.op)?;
        }
        Ok(())
    }
}

pub fn serialize(graph: &CellGraph) -> String {
    graph.to_string()
}

pub fn serialize_many(graphs: &[CellGraph]) -> String {
    let mut out = String::new();
    for g in graphs {
        let _ = write!(out, "{g}");
    }
    out
}

/// Parses exactly one cell.
pub fn parse(text: &str) -> Result<CellGraph, ParseError> {
    let mut graphs = parse_many(text)?;
    match graphs.len() {
        1 => Ok(graphs.remove(0)),
        0 => Err(ParseError::new(1, "cell", "no cell header found")),
        n => Err(ParseError::new(1, "cell", format!("expected one cell, found {n}"))),
    }
}

struct PendingCell {
    header_line: usize,
    num_nodes: usize,
    edges: Vec<EdgeSlot>,
}

impl PendingCell {
    fn finish(self) -> Result<CellGraph, ParseError> {
        CellGraph::new(self.num_nodes, self.edges)
            .map_err(|e| ParseError::new(self.header_line, "cell", e.to_string()))
    }
}

/// Parses a stream of `cell` blocks. Blank lines and `#` comments are
/// skipped; a trailing `# ...` on a record line is ignored.
pub fn parse_many(text: &str) -> Result<Vec<CellGraph>, ParseError> {
    let mut graphs = Vec::new();
    let mut current: Option<PendingCell> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("cell") => {
                if let Some(cell) = current.take() {
                    graphs.push(cell.finish()?);
                }
                let v: usize = parse_field(tokens.next(), "v", line_no)?;
                expect_end(tokens.next(), line_no)?;
                current = Some(PendingCell {
                    header_line: line_no,
                    num_nodes: v,
                    edges: Vec::new(),
                });
            }
            Some("edge") => {
                let cell = current
                    .as_mut()
                    .ok_or_else(|| ParseError::new(line_no, "edge", "edge record before any cell header"))?;
                let target: NodeIndex = parse_field(tokens.next(), "t", line_no)?;
                let slot: u8 = parse_field(tokens.next(), "s", line_no)?;
                let source: NodeIndex = parse_field(tokens.next(), "f", line_no)?;
                let op: OperationKind = parse_field(tokens.next(), "op", line_no)?;
                expect_end(tokens.next(), line_no)?;
                cell.edges.push(EdgeSlot {
                    target,
                    slot,
                    source,
                    op,
                });
            }
            Some(other) => {
                return Err(ParseError::new(line_no, "record", format!("unknown record `{other}`")));
            }
            None => unreachable!(),
        }
    }
    if let Some(cell) = current.take() {
        graphs.push(cell.finish()?);
    }
    Ok(graphs)
}

fn parse_field<T: std::str::FromStr>(token: Option<&str>, key: &str, line: usize) -> Result<T, ParseError>
where
    T::Err: fmt::Display,
{
    let token = token.ok_or_else(|| ParseError::new(line, key, "missing field"))?;
    let value = token
        .strip_prefix(key)
        .and_then(|rest| rest.strip_prefix('='))
        .ok_or_else(|| ParseError::new(line, key, format!("expected `{key}=...`, found `{token}`")))?;
    value
        .parse()
        .map_err(|e: T::Err| ParseError::new(line, key, format!("bad value `{value}`: {e}")))
}

fn expect_end(token: Option<&str>, line: usize) -> Result<(), ParseError> {
    match token {
        None => Ok(()),
        Some(t) => Err(ParseError::new(line, t, "unexpected trailing token")),
    }
}
