//! Tensor IR: shapes, opcodes, instructions and graphs.

pub mod graph;
pub mod infer;
pub mod op;
pub mod shape;
pub mod text;

use thiserror::Error;

pub use graph::{validate_graph, Diagnostic, Graph, GraphBuilder, InstrId, Instruction};
pub use infer::infer_shape;
pub use op::{BinaryOp, CompareDir, ConvDims, DotDims, Op, PadDim, ReduceKind, SliceDim, UnaryOp, WindowDim};
pub use shape::{DType, Shape};
pub use text::{parse_graph, parse_graph_with_lines, parse_tensor, print_graph, print_tensor, ParseError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IrError {
    #[error("incompatible shapes: {0}")]
    IncompatibleShapes(String),
    #[error("{op} does not take {got} operands")]
    Arity { op: String, got: usize },
    #[error("invalid attribute: {0}")]
    InvalidAttribute(String),
    #[error("unknown instruction {0}")]
    UnknownInstruction(u32),
    #[error("invalid graph: {}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Diagnostic>),
}
