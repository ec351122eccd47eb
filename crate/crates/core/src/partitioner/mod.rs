//! SPMD partitioning: rewrites a fully annotated graph into one program run
//! by every device, with shard-shaped values, collectives and offsets read
//! from tables indexed by PartitionId.

mod context;
mod conv;
mod dot;
mod formatting;
mod halo;
mod reshard;
mod rotate;
mod stats;

use std::collections::HashSet;

use serde::Serialize;
use thiserror::Error;

use crate::ir::graph::{validate_graph, Graph, InstrId, Instruction};
use crate::ir::op::{BinaryOp, Op};
use crate::ir::shape::{DType, Shape};
use crate::sharding::Sharding;
use crate::simulator::kernels::reduce_identity;
use crate::tensor::Scalar;

pub use context::PartitionContext;
pub use conv::conv_halo;
pub use halo::HaloSpec;
pub use rotate::detect_and_rotate;
pub use stats::CollectiveStats;

use context::{Em, Layout, PVal};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PartitionError {
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("%{0} has no sharding")]
    MissingSharding(String),
    #[error("%{instr}: {op} cannot appear in a graph to partition")]
    UnsupportedInput { instr: String, op: String },
    #[error("%{instr}: unsupported sharding: {message}")]
    UnsupportedSharding { instr: String, message: String },
    #[error("halo of {halo} exceeds the shard size {shard}")]
    HaloTooLarge { halo: usize, shard: usize },
    #[error("internal partitioner error: {0}")]
    Internal(String),
    #[error("%{instr}: {error}")]
    At { instr: String, error: Box<PartitionError> },
}

impl PartitionError {
    /// Source instruction the error is about, when known.
    pub fn instruction(&self) -> Option<&str> {
        match self {
            PartitionError::MissingSharding(i)
            | PartitionError::UnsupportedInput { instr: i, .. }
            | PartitionError::UnsupportedSharding { instr: i, .. }
            | PartitionError::At { instr: i, .. } => Some(i),
            _ => None,
        }
    }

    fn at(self, instr: &str) -> PartitionError {
        match self.instruction() {
            Some(_) => self,
            None => PartitionError::At { instr: instr.to_string(), error: Box::new(self) },
        }
    }
}

/// Emitted instructions for one instruction of the source graph.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub source: String,
    pub emitted: Vec<String>,
}

/// The per-device program plus what is needed to feed it and reassemble
/// its outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct SpmdProgram {
    pub graph: Graph,
    pub num_partitions: usize,
    pub provenance: Vec<Provenance>,
    pub param_shardings: Vec<Sharding>,
    pub param_shapes: Vec<Shape>,
    pub output_shardings: Vec<Sharding>,
    pub output_shapes: Vec<Shape>,
}

impl SpmdProgram {
    pub fn stats(&self) -> CollectiveStats {
        CollectiveStats::of(&self.graph)
    }

    pub fn to_text(&self) -> String {
        crate::ir::text::print_graph(&self.graph)
    }
}

struct Cx<'a> {
    g: &'a Graph,
    em: Em,
    ctx: PartitionContext,
    vals: Vec<Option<PVal>>,
    n: usize,
}

impl Cx<'_> {
    fn val(&self, id: InstrId) -> PVal {
        self.vals[id.index()].clone().expect("operands are partitioned first")
    }

    fn layout(&self, ins: &Instruction) -> Result<Layout, PartitionError> {
        let s = ins.sharding.as_ref().ok_or_else(|| PartitionError::MissingSharding(ins.name.clone()))?;
        Layout::of(s, ins.shape.rank(), self.n)
            .map_err(|message| PartitionError::UnsupportedSharding { instr: ins.name.clone(), message })
    }

    fn reshard(&mut self, v: &PVal, to: &Layout) -> Result<PVal, PartitionError> {
        reshard::reshard(&mut self.em, &self.ctx, v, to)
    }

    /// Operand `k` resharded to `to` (given for the operand's own shape).
    fn operand_as(&mut self, ins: &Instruction, k: usize, to: &Layout) -> Result<PVal, PartitionError> {
        let v = self.val(ins.operands[k]);
        self.reshard(&v, to)
    }

    fn scalar_operand(&mut self, ins: &Instruction, k: usize) -> Result<InstrId, PartitionError> {
        let v = self.val(ins.operands[k]);
        Ok(self.reshard(&v, &Layout::replicated(0, self.n))?.id)
    }

    fn out(&self, id: InstrId, layout: Layout, ins: &Instruction) -> PVal {
        PVal { id, layout, full: ins.shape.clone() }
    }
}

fn check_input(g: &Graph) -> Result<(), PartitionError> {
    let diags = validate_graph(g);
    if !diags.is_empty() {
        return Err(PartitionError::InvalidGraph(diags.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; ")));
    }
    for ins in &g.instructions {
        if ins.op.is_collective() || matches!(ins.op, Op::PartitionId) {
            return Err(PartitionError::UnsupportedInput { instr: ins.name.clone(), op: ins.op.name().to_string() });
        }
        if ins.sharding.is_none() {
            return Err(PartitionError::MissingSharding(ins.name.clone()));
        }
    }
    Ok(())
}

/// Partitions `g` for `num_partitions` devices. Every instruction must carry
/// a sharding over devices `0..num_partitions` (or be replicated).
pub fn partition(g: &Graph, num_partitions: usize) -> Result<SpmdProgram, PartitionError> {
    if num_partitions == 0 {
        return Err(PartitionError::InvalidGraph("zero partitions".into()));
    }
    check_input(g)?;
    let g = detect_and_rotate(g);
    let mut cx = Cx { g: &g, em: Em::new(&g.name), ctx: PartitionContext::root(num_partitions), vals: vec![None; g.len()], n: num_partitions };
    let mut spans = Vec::with_capacity(g.len());
    for ins in &g.instructions {
        let first = cx.em.len();
        let target = cx.layout(ins).map_err(|e| e.at(&ins.name))?;
        let v = partition_instr(&mut cx, ins, &target).map_err(|e| e.at(&ins.name))?;
        let v = cx.reshard(&v, &target).map_err(|e| e.at(&ins.name))?;
        spans.push((first, v.id));
        cx.vals[ins.id.index()] = Some(v);
    }
    let outputs: Vec<InstrId> = g.outputs.iter().map(|o| cx.val(*o).id).collect();
    let mut graph = cx.em.b.finish(&outputs);
    graph.mesh = g.mesh.clone();
    let provenance = name_results(&mut graph, &g, &spans);
    let graph = stats::simplify(&graph);
    let live: HashSet<&str> = graph.instructions.iter().map(|i| i.name.as_str()).collect();
    let provenance = provenance
        .into_iter()
        .map(|p| Provenance { emitted: p.emitted.into_iter().filter(|e| live.contains(e.as_str())).collect(), ..p })
        .collect();
    let params = g.parameters();
    Ok(SpmdProgram {
        graph,
        num_partitions,
        provenance,
        param_shardings: params.iter().map(|p| p.sharding.clone().unwrap()).collect(),
        param_shapes: params.iter().map(|p| p.shape.clone()).collect(),
        output_shardings: g.outputs.iter().map(|o| g.instr(*o).sharding.clone().unwrap()).collect(),
        output_shapes: g.outputs.iter().map(|o| g.shape(*o).clone()).collect(),
    })
}

/// Gives each source instruction's final value the source name when that
/// value was emitted for it, and records what was emitted per instruction.
fn name_results(graph: &mut Graph, src: &Graph, spans: &[(usize, InstrId)]) -> Vec<Provenance> {
    let mut taken: HashSet<String> = graph.instructions.iter().map(|i| i.name.clone()).collect();
    let mut out = Vec::with_capacity(spans.len());
    for (k, ins) in src.instructions.iter().enumerate() {
        let (first, result) = spans[k];
        let end = spans.get(k + 1).map_or(graph.len(), |s| s.0);
        if result.index() >= first && result.index() < end && graph.instructions[result.index()].name != ins.name && !taken.contains(&ins.name) {
            taken.remove(&graph.instructions[result.index()].name);
            graph.instructions[result.index()].name = ins.name.clone();
            taken.insert(ins.name.clone());
        }
        out.push(Provenance { source: ins.name.clone(), emitted: graph.instructions[first..end].iter().map(|i| i.name.clone()).collect() });
    }
    out
}

fn partition_instr(cx: &mut Cx, ins: &Instruction, target: &Layout) -> Result<PVal, PartitionError> {
    let n = cx.n;
    match &ins.op {
        Op::Parameter { index, shape } => {
            let local = shape.with_dims(target.shard_dims(&shape.dims));
            let id = cx.em.named(&ins.name, Op::Parameter { index: *index, shape: local }, &[])?;
            Ok(cx.out(id, target.clone(), ins))
        }
        Op::Constant { .. } => {
            let id = cx.em.op(ins.op.clone(), &[])?;
            Ok(cx.out(id, Layout::replicated(ins.shape.rank(), n), ins))
        }
        Op::Iota { dimension, shape } => {
            let d = *dimension;
            let local = shape.with_dims(target.shard_dims(&shape.dims));
            let mut id = cx.em.op(Op::Iota { dimension: d, shape: local.clone() }, &[])?;
            if target.tiles[d] > 1 {
                let s = shape.dims[d].div_ceil(target.tiles[d]);
                let offs: Vec<Scalar> = target.coords.iter().map(|c| Scalar::from_i64(shape.dtype, (c[d] * s) as i64)).collect();
                let off = cx.em.table(&cx.ctx, &offs)?;
                let off = cx.em.broadcast_scalar(off, &local.dims)?;
                id = cx.em.op(Op::Binary(BinaryOp::Add), &[id, off])?;
            }
            Ok(cx.out(id, target.clone(), ins))
        }
        Op::Unary(_) | Op::Binary(_) | Op::Compare(_) | Op::Select => {
            let mut args = Vec::with_capacity(ins.operands.len());
            for k in 0..ins.operands.len() {
                let v = cx.operand_as(ins, k, target)?;
                let id = if matches!(ins.op, Op::Binary(BinaryOp::Divide)) && k == 1 && v.full.dtype != DType::F32 {
                    let dims: Vec<usize> = (0..v.full.rank()).collect();
                    cx.em.mask_uneven(&cx.ctx, &v, &dims, Scalar::from_i64(v.full.dtype, 1))?
                } else {
                    v.id
                };
                args.push(id);
            }
            let id = cx.em.op(ins.op.clone(), &args)?;
            Ok(cx.out(id, target.clone(), ins))
        }
        Op::Broadcast { dims, out_dims } => {
            let src: Vec<Option<usize>> = dims.iter().map(|&d| Some(d)).collect();
            let req = target.project(&src);
            let v = cx.operand_as(ins, 0, &req)?;
            let local = target.shard_dims(out_dims);
            let id = cx.em.op(Op::Broadcast { dims: dims.clone(), out_dims: local }, &[v.id])?;
            Ok(cx.out(id, target.clone(), ins))
        }
        Op::Transpose { permutation } => {
            let mut src = vec![None; permutation.len()];
            for (i, &p) in permutation.iter().enumerate() {
                src[p] = Some(i);
            }
            let req = target.project(&src);
            let v = cx.operand_as(ins, 0, &req)?;
            let id = cx.em.op(ins.op.clone(), &[v.id])?;
            Ok(cx.out(id, target.clone(), ins))
        }
        Op::Reduce { dims, kind } => {
            let v = cx.val(ins.operands[0]);
            let init = cx.scalar_operand(ins, 1)?;
            let split: Vec<usize> = dims.iter().copied().filter(|&d| v.layout.tiles[d] > 1).collect();
            let identity = reduce_identity(*kind, v.full.dtype);
            let x = cx.em.mask_uneven(&cx.ctx, &v, &split, identity)?;
            let id_init = cx.em.scalar(identity)?;
            let mut r = cx.em.op(Op::Reduce { dims: dims.clone(), kind: *kind }, &[x, id_init])?;
            if !split.is_empty() {
                let groups = v.layout.groups_along(&split);
                r = cx.em.all_reduce(&cx.ctx, r, *kind, &groups)?;
            }
            let keep: Vec<Option<usize>> = (0..v.full.rank()).filter(|d| !dims.contains(d)).map(Some).collect();
            let layout = v.layout.project(&keep);
            let rdims = cx.em.dims(r);
            let init_b = cx.em.broadcast_scalar(init, &rdims)?;
            let id = cx.em.op(Op::Binary(kind.combiner()), &[r, init_b])?;
            Ok(cx.out(id, layout, ins))
        }
        Op::Dot(dd) => {
            let (l, r) = (cx.val(ins.operands[0]), cx.val(ins.operands[1]));
            dot::partition_dot(&mut cx.em, &cx.ctx, &l, &r, dd, target, &ins.shape)
        }
        Op::Convolution { window, dims } => {
            let (l, r) = (cx.val(ins.operands[0]), cx.val(ins.operands[1]));
            conv::partition_conv(&mut cx.em, &cx.ctx, &l, &r, window, dims, target, &ins.shape)
        }
        Op::Reshape { .. }
        | Op::Reverse { .. }
        | Op::Pad { .. }
        | Op::Slice { .. }
        | Op::Concat { .. }
        | Op::DynamicSlice { .. }
        | Op::DynamicUpdateSlice => formatting::partition_formatting(cx, ins, target),
        Op::Rotate { .. } => rotate::partition_rotate(cx, ins, target),
        Op::PartitionId
        | Op::AllReduce { .. }
        | Op::AllGather { .. }
        | Op::ReduceScatter { .. }
        | Op::AllToAll { .. }
        | Op::CollectivePermute { .. } => {
            Err(PartitionError::UnsupportedInput { instr: ins.name.clone(), op: ins.op.name().to_string() })
        }
    }
}

/// A program moving one `shape` value from layout `from` to `to`; handy for
/// inspecting resharding in isolation.
pub fn reshard_program(shape: &Shape, from: &Sharding, to: &Sharding, num_partitions: usize) -> Result<SpmdProgram, PartitionError> {
    let mut b = crate::ir::graph::GraphBuilder::new("reshard");
    let x = b.parameter("x", shape.clone());
    b.set_sharding(x, Some(from.clone()));
    let ctx = PartitionContext::root(num_partitions);
    let mut em = Em::new("reshard");
    let bad = |message: String| PartitionError::UnsupportedSharding { instr: "x".into(), message };
    let lf = Layout::of(from, shape.rank(), num_partitions).map_err(bad)?;
    let lt = Layout::of(to, shape.rank(), num_partitions).map_err(bad)?;
    let p = em.named("x", Op::Parameter { index: 0, shape: shape.with_dims(lf.shard_dims(&shape.dims)) }, &[])?;
    let v = reshard::reshard(&mut em, &ctx, &PVal { id: p, layout: lf, full: shape.clone() }, &lt)?;
    let graph = stats::simplify(&em.b.finish(&[v.id]));
    Ok(SpmdProgram {
        provenance: vec![Provenance { source: "x".into(), emitted: graph.instructions.iter().map(|i| i.name.clone()).collect() }],
        graph,
        num_partitions,
        param_shardings: vec![from.clone()],
        param_shapes: vec![shape.clone()],
        output_shardings: vec![to.clone()],
        output_shapes: vec![shape.clone()],
    })
}
