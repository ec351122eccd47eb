//! Reference evaluation: a single-device interpreter (the oracle) and a
//! lockstep executor for SPMD programs with exact collective semantics.

pub mod collectives;
pub mod kernels;
mod verify;

use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};
use thiserror::Error;

use crate::ir::graph::{Graph, Instruction};
use crate::ir::op::Op;
use crate::ir::shape::{DType, Shape};
use crate::sharding::ShardingError;
use crate::tensor::{Buffer, Scalar, Tensor};

pub use verify::{evaluate_spmd, verify_equivalence, verify_program, EquivalenceReport, VerifyOptions};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("expected {expected} inputs, got {got}")]
    InputCount { expected: usize, got: usize },
    #[error("input {index} has shape {got}, parameter expects {expected}")]
    InputShape { index: usize, expected: Shape, got: Shape },
    #[error("%{instr}: integer division by zero")]
    DivideByZero { instr: String },
    #[error("%{instr}: {op} cannot run here")]
    Unsupported { instr: String, op: String },
    #[error("%{instr}: subgroup mismatch: {message}")]
    SubgroupMismatch { instr: String, message: String },
    #[error("sharding: {0}")]
    Sharding(#[from] ShardingError),
    #[error("partitioning failed: {0}")]
    Partition(String),
}

impl SimError {
    /// Instruction the error is about, when known.
    pub fn instruction(&self) -> Option<&str> {
        match self {
            SimError::DivideByZero { instr } | SimError::Unsupported { instr, .. } | SimError::SubgroupMismatch { instr, .. } => Some(instr),
            _ => None,
        }
    }
}

/// Seeded inputs for every parameter of `g`: f32 in [-1, 1), small signed
/// and unsigned integers, and fair coin flips for predicates.
pub fn random_inputs(g: &Graph, seed: u64) -> Vec<Tensor> {
    let mut rng = SmallRng::seed_from_u64(seed);
    g.parameter_shapes()
        .into_iter()
        .map(|shape| {
            let n = shape.num_elements();
            let data = match shape.dtype {
                DType::F32 => Buffer::F32((0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()),
                DType::S32 => Buffer::S32((0..n).map(|_| rng.gen_range(-4..=4)).collect()),
                DType::U32 => Buffer::U32((0..n).map(|_| rng.gen_range(0..=6)).collect()),
                DType::Pred => Buffer::Pred((0..n).map(|_| rng.gen_bool(0.5)).collect()),
            };
            Tensor::new(shape, data)
        })
        .collect()
}

fn index_values(ops: &[&Tensor]) -> Vec<i64> {
    ops.iter().map(|t| t.get_flat(0).as_i64()).collect()
}

/// Evaluates a non-collective instruction. `partition` is the executing
/// device, or `None` on the single-device path.
fn eval_local(ins: &Instruction, args: &[&Tensor], partition: Option<u32>) -> Result<Tensor, SimError> {
    let unsupported = || SimError::Unsupported { instr: ins.name.clone(), op: ins.op.name().to_string() };
    Ok(match &ins.op {
        Op::Parameter { .. } => unreachable!("parameters are bound before evaluation"),
        Op::Constant { literal } => literal.clone(),
        Op::Iota { dimension, shape } => kernels::iota(shape, *dimension),
        Op::PartitionId => Tensor::scalar(Scalar::S32(partition.ok_or_else(unsupported)? as i32)),
        Op::Unary(u) => kernels::unary(*u, args[0]),
        Op::Binary(b) => kernels::binary(*b, args[0], args[1]).map_err(|_| SimError::DivideByZero { instr: ins.name.clone() })?,
        Op::Compare(d) => kernels::compare(*d, args[0], args[1]),
        Op::Select => kernels::select(args[0], args[1], args[2]),
        Op::Broadcast { dims, out_dims } => args[0].broadcast(out_dims, dims),
        Op::Reshape { out_dims } => args[0].reshape(out_dims),
        Op::Transpose { permutation } => args[0].transpose(permutation),
        Op::Reverse { dims } => args[0].reverse(dims),
        Op::Pad { config } => {
            let low: Vec<i64> = config.iter().map(|p| p.low).collect();
            let high: Vec<i64> = config.iter().map(|p| p.high).collect();
            let interior: Vec<usize> = config.iter().map(|p| p.interior).collect();
            args[0].pad(&low, &high, &interior, args[1].get_flat(0))
        }
        Op::Slice { dims } => {
            let starts: Vec<usize> = dims.iter().map(|d| d.start).collect();
            let limits: Vec<usize> = dims.iter().map(|d| d.limit).collect();
            let strides: Vec<usize> = dims.iter().map(|d| d.stride).collect();
            args[0].slice(&starts, &limits, &strides)
        }
        Op::DynamicSlice { sizes } => args[0].dynamic_slice(&index_values(&args[1..]), sizes),
        Op::DynamicUpdateSlice => args[0].dynamic_update_slice(args[1], &index_values(&args[2..])),
        Op::Concat { dim } => Tensor::concat(args, *dim),
        Op::Reduce { dims, kind } => kernels::reduce(args[0], args[1].get_flat(0), dims, *kind),
        Op::Dot(dd) => kernels::dot(args[0], args[1], dd, &ins.shape),
        Op::Convolution { window, dims } => kernels::convolution(args[0], args[1], window, dims, &ins.shape),
        Op::Rotate { dim, amount } => kernels::rotate(args[0], *dim, *amount, args.get(1).map(|f| f.get_flat(0))),
        Op::AllReduce { .. } | Op::AllGather { .. } | Op::ReduceScatter { .. } | Op::AllToAll { .. } | Op::CollectivePermute { .. } => {
            return Err(unsupported())
        }
    })
}

fn check_inputs(g: &Graph, inputs: &[Tensor]) -> Result<(), SimError> {
    let params = g.parameters();
    if params.len() != inputs.len() {
        return Err(SimError::InputCount { expected: params.len(), got: inputs.len() });
    }
    for (k, (p, t)) in params.iter().zip(inputs).enumerate() {
        if &p.shape != t.shape() {
            return Err(SimError::InputShape { index: k, expected: p.shape.clone(), got: t.shape().clone() });
        }
    }
    Ok(())
}

/// Index of the last instruction reading each value (outputs live forever).
fn last_uses(g: &Graph) -> Vec<usize> {
    let mut last: Vec<usize> = (0..g.len()).collect();
    for ins in &g.instructions {
        for o in &ins.operands {
            last[o.index()] = last[o.index()].max(ins.id.index());
        }
    }
    for o in &g.outputs {
        last[o.index()] = usize::MAX;
    }
    last
}

/// Runs `g` on one device. Collectives and PartitionId are rejected.
pub fn evaluate_single(g: &Graph, inputs: &[Tensor]) -> Result<Vec<Tensor>, SimError> {
    check_inputs(g, inputs)?;
    let params = g.parameters();
    let last = last_uses(g);
    let mut env: Vec<Option<Tensor>> = vec![None; g.len()];
    for ins in &g.instructions {
        let value = if let Op::Parameter { index, .. } = ins.op {
            let k = params.iter().position(|p| matches!(p.op, Op::Parameter { index: i, .. } if i == index)).unwrap();
            inputs[k].clone()
        } else {
            let args: Vec<&Tensor> = ins.operands.iter().map(|o| env[o.index()].as_ref().expect("operand evaluated")).collect();
            eval_local(ins, &args, None)?
        };
        env[ins.id.index()] = Some(value);
        for o in &ins.operands {
            if last[o.index()] == ins.id.index() {
                env[o.index()] = None;
            }
        }
    }
    Ok(g.outputs.iter().map(|o| env[o.index()].clone().expect("output evaluated")).collect())
}

/// Lockstep SPMD execution of `g` on devices `0..inputs.len()`;
/// `inputs[d]` are device `d`'s parameter values. Returns per-device
/// outputs.
pub fn execute_spmd(g: &Graph, inputs: &[Vec<Tensor>]) -> Result<Vec<Vec<Tensor>>, SimError> {
    let n = inputs.len();
    for per_device in inputs {
        check_inputs(g, per_device)?;
    }
    let params = g.parameters();
    let last = last_uses(g);
    let mut env: Vec<Option<Vec<Tensor>>> = vec![None; g.len()];
    for ins in &g.instructions {
        let mismatch = |message: String| SimError::SubgroupMismatch { instr: ins.name.clone(), message };
        let arg = |k: usize| -> Vec<Tensor> { env[ins.operands[k].index()].clone().expect("operand evaluated") };
        let values: Vec<Tensor> = match &ins.op {
            Op::Parameter { index, .. } => {
                let k = params.iter().position(|p| matches!(p.op, Op::Parameter { index: i, .. } if i == *index)).unwrap();
                inputs.iter().map(|dev| dev[k].clone()).collect()
            }
            Op::AllReduce { kind, groups } => collectives::all_reduce(&arg(0), groups, *kind).map_err(mismatch)?,
            Op::AllGather { dim, groups } => collectives::all_gather(&arg(0), groups, *dim).map_err(mismatch)?,
            Op::ReduceScatter { kind, dim, groups } => collectives::reduce_scatter(&arg(0), groups, *kind, *dim).map_err(mismatch)?,
            Op::AllToAll { split_dim, concat_dim, groups } => {
                collectives::all_to_all(&arg(0), groups, *split_dim, *concat_dim).map_err(mismatch)?
            }
            Op::CollectivePermute { pairs } => collectives::collective_permute(&arg(0), pairs).map_err(mismatch)?,
            _ => {
                let mut out = Vec::with_capacity(n);
                for d in 0..n {
                    let args: Vec<&Tensor> =
                        ins.operands.iter().map(|o| &env[o.index()].as_ref().expect("operand evaluated")[d]).collect();
                    out.push(eval_local(ins, &args, Some(d as u32))?);
                }
                out
            }
        };
        debug_assert!(values.iter().all(|v| v.shape() == &ins.shape), "%{} produced a wrong shape", ins.name);
        env[ins.id.index()] = Some(values);
        for o in &ins.operands {
            if last[o.index()] == ins.id.index() {
                env[o.index()] = None;
            }
        }
    }
    let mut out = vec![Vec::with_capacity(g.outputs.len()); n];
    for o in &g.outputs {
        let vals = env[o.index()].as_ref().expect("output evaluated");
        for d in 0..n {
            out[d].push(vals[d].clone());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::graph::GraphBuilder;
    use crate::ir::op::{DotDims, ReduceKind};
    use crate::ir::shape::DType;

    #[test]
    fn dot_with_identity() {
        let mut b = GraphBuilder::new("g");
        let x = b.parameter("x", Shape::new(DType::S32, [2, 2]));
        let i = b.constant(Tensor::from_i32([2, 2], vec![1, 0, 0, 1]));
        let y = b.add(Op::Dot(DotDims::matmul()), &[x, i]).unwrap();
        let g = b.finish(&[y]);
        let x = Tensor::from_i32([2, 2], vec![1, 2, 3, 4]);
        assert_eq!(evaluate_single(&g, std::slice::from_ref(&x)).unwrap(), vec![x]);
    }

    #[test]
    fn reduce_sum_of_ones() {
        let mut b = GraphBuilder::new("g");
        let x = b.parameter("x", Shape::new(DType::F32, [7]));
        let z = b.constant(Tensor::scalar(Scalar::F32(0.0)));
        let r = b.add(Op::Reduce { dims: vec![0], kind: ReduceKind::Sum }, &[x, z]).unwrap();
        let g = b.finish(&[r]);
        let out = evaluate_single(&g, &[Tensor::filled(Shape::new(DType::F32, [7]), Scalar::F32(1.0))]).unwrap();
        assert_eq!(out[0].as_f32().unwrap(), &[7.0]);
    }

    #[test]
    fn integer_divide_by_zero_is_an_error() {
        let mut b = GraphBuilder::new("g");
        let x = b.parameter("x", Shape::new(DType::S32, [2]));
        let y = b.parameter("y", Shape::new(DType::S32, [2]));
        let d = b.add(Op::Binary(crate::ir::op::BinaryOp::Divide), &[x, y]).unwrap();
        let g = b.finish(&[d]);
        let err = evaluate_single(&g, &[Tensor::from_i32([2], vec![1, 2]), Tensor::from_i32([2], vec![1, 0])]).unwrap_err();
        assert!(matches!(err, SimError::DivideByZero { .. }));
    }

    #[test]
    fn partition_id_needs_a_device() {
        let mut b = GraphBuilder::new("g");
        let p = b.add(Op::PartitionId, &[]).unwrap();
        let g = b.finish(&[p]);
        assert!(matches!(evaluate_single(&g, &[]), Err(SimError::Unsupported { .. })));
        let out = execute_spmd(&g, &[vec![], vec![], vec![]]).unwrap();
        assert_eq!(out[2][0].get_flat(0), Scalar::S32(2));
    }
}
