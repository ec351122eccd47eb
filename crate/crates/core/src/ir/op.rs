use serde::{Deserialize, Serialize};

use super::shape::Shape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UnaryOp {
    Negate,
    Exp,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinaryOp {
    Add,
    Multiply,
    Maximum,
    Minimum,
    Subtract,
    Divide,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CompareDir {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CompareDir {
    pub fn name(self) -> &'static str {
        match self {
            CompareDir::Eq => "EQ",
            CompareDir::Ne => "NE",
            CompareDir::Lt => "LT",
            CompareDir::Le => "LE",
            CompareDir::Gt => "GT",
            CompareDir::Ge => "GE",
        }
    }

    pub fn from_name(s: &str) -> Option<CompareDir> {
        Some(match s {
            "EQ" => CompareDir::Eq,
            "NE" => CompareDir::Ne,
            "LT" => CompareDir::Lt,
            "LE" => CompareDir::Le,
            "GT" => CompareDir::Gt,
            "GE" => CompareDir::Ge,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReduceKind {
    Sum,
    Max,
    Min,
    Prod,
}

impl ReduceKind {
    pub fn name(self) -> &'static str {
        match self {
            ReduceKind::Sum => "sum",
            ReduceKind::Max => "max",
            ReduceKind::Min => "min",
            ReduceKind::Prod => "prod",
        }
    }

    pub fn from_name(s: &str) -> Option<ReduceKind> {
        Some(match s {
            "sum" => ReduceKind::Sum,
            "max" => ReduceKind::Max,
            "min" => ReduceKind::Min,
            "prod" => ReduceKind::Prod,
            _ => return None,
        })
    }

    /// The elementwise op that combines two partial reductions.
    pub fn combiner(self) -> BinaryOp {
        match self {
            ReduceKind::Sum => BinaryOp::Add,
            ReduceKind::Max => BinaryOp::Maximum,
            ReduceKind::Min => BinaryOp::Minimum,
            ReduceKind::Prod => BinaryOp::Multiply,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PadDim {
    pub low: i64,
    pub high: i64,
    pub interior: usize,
}

impl PadDim {
    pub const NONE: PadDim = PadDim { low: 0, high: 0, interior: 0 };

    pub fn is_noop(&self) -> bool {
        *self == PadDim::NONE
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SliceDim {
    pub start: usize,
    pub limit: usize,
    pub stride: usize,
}

impl SliceDim {
    pub fn full(size: usize) -> SliceDim {
        SliceDim { start: 0, limit: size, stride: 1 }
    }

    pub fn len(&self) -> usize {
        if self.limit <= self.start {
            0
        } else {
            (self.limit - self.start).div_ceil(self.stride)
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Batch and contracting dimensions of a generalized matrix multiply.
/// Result dims are: batch dims, then LHS free dims, then RHS free dims.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DotDims {
    pub lhs_batch: Vec<usize>,
    pub rhs_batch: Vec<usize>,
    pub lhs_contracting: Vec<usize>,
    pub rhs_contracting: Vec<usize>,
}

impl DotDims {
    /// Plain matmul `[m,k] x [k,n]`.
    pub fn matmul() -> DotDims {
        DotDims { lhs_contracting: vec![1], rhs_contracting: vec![0], ..Default::default() }
    }

    pub fn lhs_free(&self, lhs_rank: usize) -> Vec<usize> {
        (0..lhs_rank).filter(|d| !self.lhs_batch.contains(d) && !self.lhs_contracting.contains(d)).collect()
    }

    pub fn rhs_free(&self, rhs_rank: usize) -> Vec<usize> {
        (0..rhs_rank).filter(|d| !self.rhs_batch.contains(d) && !self.rhs_contracting.contains(d)).collect()
    }
}

/// Window configuration of one spatial dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WindowDim {
    pub size: usize,
    pub stride: usize,
    pub padding_low: usize,
    pub padding_high: usize,
    pub base_dilation: usize,
    pub window_dilation: usize,
}

impl WindowDim {
    pub fn simple(size: usize) -> WindowDim {
        WindowDim { size, stride: 1, padding_low: 0, padding_high: 0, base_dilation: 1, window_dilation: 1 }
    }

    pub fn dilated_window(&self) -> usize {
        if self.size == 0 {
            0
        } else {
            (self.size - 1) * self.window_dilation + 1
        }
    }

    pub fn dilated_base(&self, base: usize) -> usize {
        if base == 0 {
            0
        } else {
            (base - 1) * self.base_dilation + 1
        }
    }

    /// Number of output positions for an input of `base` elements, or `None`
    /// when the padded input is smaller than the window.
    pub fn output_size(&self, base: usize) -> Option<usize> {
        let padded = self.dilated_base(base) + self.padding_low + self.padding_high;
        let w = self.dilated_window();
        if self.stride == 0 || w == 0 || padded < w {
            return None;
        }
        Some((padded - w) / self.stride + 1)
    }
}

/// Dimension labels of a convolution: which tensor dim is batch, feature and
/// each spatial dimension, for the input (LHS), kernel (RHS) and output.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvDims {
    pub lhs_batch: usize,
    pub lhs_feature: usize,
    pub lhs_spatial: Vec<usize>,
    pub rhs_input_feature: usize,
    pub rhs_output_feature: usize,
    pub rhs_spatial: Vec<usize>,
    pub out_batch: usize,
    pub out_feature: usize,
    pub out_spatial: Vec<usize>,
}

impl ConvDims {
    /// `b0..f`, `0..io`, `b0..f` layout with `n` spatial dims.
    pub fn channels_last(n: usize) -> ConvDims {
        let sp: Vec<usize> = (1..=n).collect();
        ConvDims {
            lhs_batch: 0,
            lhs_feature: n + 1,
            lhs_spatial: sp.clone(),
            rhs_input_feature: n,
            rhs_output_feature: n + 1,
            rhs_spatial: (0..n).collect(),
            out_batch: 0,
            out_feature: n + 1,
            out_spatial: sp,
        }
    }

    pub fn num_spatial(&self) -> usize {
        self.lhs_spatial.len()
    }
}

/// Opcodes with their static attributes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Op {
    Parameter { index: usize, shape: Shape },
    Constant { literal: Tensor },
    Iota { dimension: usize, shape: Shape },
    PartitionId,
    Unary(UnaryOp),
    Binary(BinaryOp),
    Compare(CompareDir),
    Select,
    /// Result dim `dims[i]` carries operand dim `i`.
    Broadcast { dims: Vec<usize>, out_dims: Vec<usize> },
    Reshape { out_dims: Vec<usize> },
    /// Result dim `i` is operand dim `permutation[i]`.
    Transpose { permutation: Vec<usize> },
    Reverse { dims: Vec<usize> },
    /// Operands: value, scalar padding value.
    Pad { config: Vec<PadDim> },
    Slice { dims: Vec<SliceDim> },
    /// Operands: value, then one scalar start index per dimension.
    DynamicSlice { sizes: Vec<usize> },
    /// Operands: value, update, then one scalar start index per dimension.
    DynamicUpdateSlice,
    Concat { dim: usize },
    /// Operands: value, scalar init.
    Reduce { dims: Vec<usize>, kind: ReduceKind },
    Dot(DotDims),
    Convolution { window: Vec<WindowDim>, dims: ConvDims },
    AllReduce { kind: ReduceKind, groups: Vec<Vec<u32>> },
    AllGather { dim: usize, groups: Vec<Vec<u32>> },
    ReduceScatter { kind: ReduceKind, dim: usize, groups: Vec<Vec<u32>> },
    AllToAll { split_dim: usize, concat_dim: usize, groups: Vec<Vec<u32>> },
    CollectivePermute { pairs: Vec<(u32, u32)> },
    /// Internal data rotation: `result[i] = x[i + amount]` along `dim`,
    /// wrapping around with one operand, or taking the scalar fill operand
    /// for out-of-range positions with two operands.
    Rotate { dim: usize, amount: i64 },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Parameter { .. } => "parameter",
            Op::Constant { .. } => "constant",
            Op::Iota { .. } => "iota",
            Op::PartitionId => "partition-id",
            Op::Unary(UnaryOp::Negate) => "negate",
            Op::Unary(UnaryOp::Exp) => "exponential",
            Op::Unary(UnaryOp::Relu) => "relu",
            Op::Binary(BinaryOp::Add) => "add",
            Op::Binary(BinaryOp::Multiply) => "multiply",
            Op::Binary(BinaryOp::Maximum) => "maximum",
            Op::Binary(BinaryOp::Minimum) => "minimum",
            Op::Binary(BinaryOp::Subtract) => "subtract",
            Op::Binary(BinaryOp::Divide) => "divide",
            Op::Compare(_) => "compare",
            Op::Select => "select",
            Op::Broadcast { .. } => "broadcast",
            Op::Reshape { .. } => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::Reverse { .. } => "reverse",
            Op::Pad { .. } => "pad",
            Op::Slice { .. } => "slice",
            Op::DynamicSlice { .. } => "dynamic-slice",
            Op::DynamicUpdateSlice => "dynamic-update-slice",
            Op::Concat { .. } => "concatenate",
            Op::Reduce { .. } => "reduce",
            Op::Dot(_) => "dot",
            Op::Convolution { .. } => "convolution",
            Op::AllReduce { .. } => "all-reduce",
            Op::AllGather { .. } => "all-gather",
            Op::ReduceScatter { .. } => "reduce-scatter",
            Op::AllToAll { .. } => "all-to-all",
            Op::CollectivePermute { .. } => "collective-permute",
            Op::Rotate { .. } => "rotate",
        }
    }

    pub fn is_collective(&self) -> bool {
        matches!(
            self,
            Op::AllReduce { .. }
                | Op::AllGather { .. }
                | Op::ReduceScatter { .. }
                | Op::AllToAll { .. }
                | Op::CollectivePermute { .. }
        )
    }

    /// Unary, binary, compare and select: same-shaped operands and result.
    pub fn is_elementwise(&self) -> bool {
        matches!(self, Op::Unary(_) | Op::Binary(_) | Op::Compare(_) | Op::Select)
    }
}
