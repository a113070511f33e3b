//! Operation taxonomy, analytic cost model and transition rules.
//!
//! Thirteen operations live on the edges of a cell. Each has a type class
//! (which stage of the efficiency chain it sits on) and, for everything but
//! `skip` and `null`, a square kernel size. A transition replaces the
//! operation on one edge; the valid ones are those that move forward along
//! the type chain `conv -> sep_conv -> dil_sep_conv -> pooling` while never
//! growing the kernel, plus any move into `{skip, null}`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of distinct operations.
pub const NUM_OPS: usize = 13;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OpError {
    #[error("unknown operation `{0}`")]
    UnknownOp(String),
    #[error("{class:?} does not take a kernel")]
    KernelNotAllowed { class: TypeClass },
    #[error("{class:?} has no {kernel}x{kernel} variant")]
    NoSuchVariant { class: TypeClass, kernel: u32 },
    #[error("cost config field `{0}` must be at least 1")]
    InvalidCostConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TypeClass {
    Conv,
    SepConv,
    DilSepConv,
    MaxPool,
    AvgPool,
    Skip,
    Null,
}

impl TypeClass {
    /// Position along the type chain. Max and average pooling share a stage.
    /// `None` for skip and null, which sit outside the chain.
    pub fn chain_stage(self) -> Option<u8> {
        match self {
            TypeClass::Conv => Some(0),
            TypeClass::SepConv => Some(1),
            TypeClass::DilSepConv => Some(2),
            TypeClass::MaxPool | TypeClass::AvgPool => Some(3),
            TypeClass::Skip | TypeClass::Null => None,
        }
    }
}

/// One of the thirteen edge operations.
///
/// The discriminant is the operation's index in every 13-wide vector used
/// by the engine (masks, policy heads, oracle tables).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OperationKind {
    #[serde(rename = "conv_1x1")]
    Conv1x1 = 0,
    #[serde(rename = "conv_3x3")]
    Conv3x3 = 1,
    #[serde(rename = "conv_5x5")]
    Conv5x5 = 2,
    #[serde(rename = "sep_conv_3x3")]
    SepConv3x3 = 3,
    #[serde(rename = "sep_conv_5x5")]
    SepConv5x5 = 4,
    #[serde(rename = "dil_sep_conv_3x3")]
    DilSepConv3x3 = 5,
    #[serde(rename = "dil_sep_conv_5x5")]
    DilSepConv5x5 = 6,
    #[serde(rename = "max_pool_3x3")]
    MaxPool3x3 = 7,
    #[serde(rename = "max_pool_5x5")]
    MaxPool5x5 = 8,
    #[serde(rename = "avg_pool_3x3")]
    AvgPool3x3 = 9,
    #[serde(rename = "avg_pool_5x5")]
    AvgPool5x5 = 10,
    #[serde(rename = "skip")]
    Skip = 11,
    #[serde(rename = "null")]
    Null = 12,
}

use OperationKind::*;

impl OperationKind {
    pub const ALL: [OperationKind; NUM_OPS] = [
        Conv1x1,
        Conv3x3,
        Conv5x5,
        SepConv3x3,
        SepConv5x5,
        DilSepConv3x3,
        DilSepConv5x5,
        MaxPool3x3,
        MaxPool5x5,
        AvgPool3x3,
        AvgPool5x5,
        Skip,
        Null,
    ];

    /// Builds an operation from its class and kernel, rejecting pairs that
    /// are not among the thirteen (kernels on skip/null, `sep_conv_1x1`,
    /// pooling at 1x1, ...).
    pub fn new(class: TypeClass, kernel: Option<u32>) -> Result<Self, OpError> {
        match (class, kernel) {
            (TypeClass::Skip, None) => Ok(Skip),
            (TypeClass::Null, None) => Ok(Null),
            (TypeClass::Skip | TypeClass::Null, Some(_)) => {
                Err(OpError::KernelNotAllowed { class })
            }
            (_, None) => Err(OpError::NoSuchVariant { class, kernel: 0 }),
            (_, Some(k)) => Self::ALL
                .iter()
                .copied()
                .find(|op| op.type_class() == class && op.kernel() == Some(k))
                .ok_or(OpError::NoSuchVariant { class, kernel: k }),
        }
    }

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn type_class(self) -> TypeClass {
        match self {
            Conv1x1 | Conv3x3 | Conv5x5 => TypeClass::Conv,
            SepConv3x3 | SepConv5x5 => TypeClass::SepConv,
            DilSepConv3x3 | DilSepConv5x5 => TypeClass::DilSepConv,
            MaxPool3x3 | MaxPool5x5 => TypeClass::MaxPool,
            AvgPool3x3 | AvgPool5x5 => TypeClass::AvgPool,
            Skip => TypeClass::Skip,
            Null => TypeClass::Null,
        }
    }

    pub fn kernel(self) -> Option<u32> {
        match self {
            Conv1x1 => Some(1),
            Conv3x3 | SepConv3x3 | DilSepConv3x3 | MaxPool3x3 | AvgPool3x3 => Some(3),
            Conv5x5 | SepConv5x5 | DilSepConv5x5 | MaxPool5x5 | AvgPool5x5 => Some(5),
            Skip | Null => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Conv1x1 => "conv_1x1",
            Conv3x3 => "conv_3x3",
            Conv5x5 => "conv_5x5",
            SepConv3x3 => "sep_conv_3x3",
            SepConv5x5 => "sep_conv_5x5",
            DilSepConv3x3 => "dil_sep_conv_3x3",
            DilSepConv5x5 => "dil_sep_conv_5x5",
            MaxPool3x3 => "max_pool_3x3",
            MaxPool5x5 => "max_pool_5x5",
            AvgPool3x3 => "avg_pool_3x3",
            AvgPool5x5 => "avg_pool_5x5",
            Skip => "skip",
            Null => "null",
        }
    }

    /// Anything other than skip and null.
    pub fn is_parametric_class(self) -> bool {
        !matches!(self, Skip | Null)
    }
}

impl fmt::Display for OperationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OperationKind {
    type Err = OpError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|op| op.name() == s)
            .ok_or_else(|| OpError::UnknownOp(s.to_string()))
    }
}

/// Layer shape the costs are evaluated at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostConfig {
    channels_in: u64,
    channels_out: u64,
    height: u64,
    width: u64,
}

impl CostConfig {
    pub fn new(channels_in: u64, channels_out: u64, height: u64, width: u64) -> Result<Self, OpError> {
        for (name, value) in [
            ("channels_in", channels_in),
            ("channels_out", channels_out),
            ("height", height),
            ("width", width),
        ] {
            if value == 0 {
                return Err(OpError::InvalidCostConfig(name));
            }
        }
        Ok(Self {
            channels_in,
            channels_out,
            height,
            width,
        })
    }

    /// 128 channels in and out on a 32x32 map.
    pub fn reference() -> Self {
        Self {
            channels_in: 128,
            channels_out: 128,
            height: 32,
            width: 32,
        }
    }

    pub fn channels_in(&self) -> u64 {
        self.channels_in
    }

    pub fn channels_out(&self) -> u64 {
        self.channels_out
    }

    pub fn height(&self) -> u64 {
        self.height
    }

    pub fn width(&self) -> u64 {
        self.width
    }

    fn spatial(&self) -> u64 {
        self.height * self.width
    }
}

impl Default for CostConfig {
    fn default() -> Self {
        Self::reference()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OpCost {
    pub params: u64,
    pub madds: u64,
}

/// Parameter count. Separable convolutions are one depthwise `k x k` pass
/// followed by one pointwise `1 x 1` mix; dilation adds nothing.
pub fn params_of(op: OperationKind, cfg: &CostConfig) -> u64 {
    let cin = cfg.channels_in;
    let cout = cfg.channels_out;
    match (op.type_class(), op.kernel()) {
        (TypeClass::Conv, Some(k)) => u64::from(k * k) * cin * cout,
        (TypeClass::SepConv | TypeClass::DilSepConv, Some(k)) => u64::from(k * k) * cin + cin * cout,
        _ => 0,
    }
}

/// Multiply-add count. Pooling reduces a `k x k` window per output element;
/// skip is charged one copy per input element so that it costs more than
/// null.
pub fn madds_of(op: OperationKind, cfg: &CostConfig) -> u64 {
    let hw = cfg.spatial();
    match (op.type_class(), op.kernel()) {
        (TypeClass::Conv | TypeClass::SepConv | TypeClass::DilSepConv, _) => params_of(op, cfg) * hw,
        (TypeClass::MaxPool | TypeClass::AvgPool, Some(k)) => u64::from(k * k) * cfg.channels_in * hw,
        (TypeClass::Skip, _) => cfg.channels_in * hw,
        _ => 0,
    }
}

pub fn cost_of_op(op: OperationKind, cfg: &CostConfig) -> OpCost {
    OpCost {
        params: params_of(op, cfg),
        madds: madds_of(op, cfg),
    }
}

/// The three edge actions of the restricted (NAT) scheme, in head order:
/// keep the current operation, replace it with null, replace it with skip.
pub fn nat_actions(source: OperationKind) -> [OperationKind; 3] {
    [source, Null, Skip]
}

/// Joint type/kernel rule of the extended (NAT++) scheme.
pub fn is_valid_transition_natpp(from: OperationKind, to: OperationKind) -> bool {
    if from == to || matches!(to, Skip | Null) {
        return true;
    }
    match (
        from.type_class().chain_stage(),
        to.type_class().chain_stage(),
        from.kernel(),
        to.kernel(),
    ) {
        (Some(from_stage), Some(to_stage), Some(from_k), Some(to_k)) => {
            to_stage >= from_stage && to_k <= from_k
        }
        _ => false,
    }
}

/// The one transition allowed to raise cost: null -> skip trades a copy
/// per element for representation.
pub fn is_whitelisted_increase(from: OperationKind, to: OperationKind) -> bool {
    from == Null && to == Skip
}

/// Validity bits over the thirteen target operations for a source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TransitionMask {
    bits: u16,
}

impl TransitionMask {
    pub fn contains(&self, op: OperationKind) -> bool {
        self.bits & (1 << op.index()) != 0
    }

    pub fn count(&self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn iter(&self) -> impl Iterator<Item = OperationKind> + '_ {
        OperationKind::ALL.into_iter().filter(|op| self.contains(*op))
    }

    pub fn to_bools(&self) -> [bool; NUM_OPS] {
        let mut out = [false; NUM_OPS];
        for op in OperationKind::ALL {
            out[op.index()] = self.contains(op);
        }
        out
    }
}

pub fn transition_mask(source: OperationKind) -> TransitionMask {
    let bits = OperationKind::ALL
        .iter()
        .filter(|to| is_valid_transition_natpp(source, **to))
        .fold(0u16, |acc, to| acc | (1 << to.index()));
    TransitionMask { bits }
}

/// One row of the exhaustive transition audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuditRow {
    pub from: OperationKind,
    pub to: OperationKind,
    pub valid: bool,
    pub whitelisted: bool,
    pub params_delta: i64,
    pub madds_delta: i64,
}

impl AuditRow {
    /// A valid, non-whitelisted transition that raises either cost.
    pub fn is_violation(&self) -> bool {
        self.valid && !self.whitelisted && (self.params_delta > 0 || self.madds_delta > 0)
    }
}

/// All 169 ordered pairs, `from`-major.
pub fn audit(cfg: &CostConfig) -> Vec<AuditRow> {
    let mut rows = Vec::with_capacity(NUM_OPS * NUM_OPS);
    for from in OperationKind::ALL {
        for to in OperationKind::ALL {
            let valid = is_valid_transition_natpp(from, to);
            rows.push(AuditRow {
                from,
                to,
                valid,
                whitelisted: valid && is_whitelisted_increase(from, to),
                params_delta: params_of(to, cfg) as i64 - params_of(from, cfg) as i64,
                madds_delta: madds_of(to, cfg) as i64 - madds_of(from, cfg) as i64,
            });
        }
    }
    rows
}

pub const AUDIT_CSV_HEADER: &str = "from,to,valid,params_delta,madds_delta,whitelisted";

pub fn audit_csv(rows: &[AuditRow]) -> String {
    let mut out = String::from(AUDIT_CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.from,
            row.to,
            u8::from(row.valid),
            row.params_delta,
            row.madds_delta,
            u8::from(row.whitelisted)
        ));
    }
    out
}
