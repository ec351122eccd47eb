//! Pipeline parallelism as plain SPMD: the stage body is written once over
//! a leading stage dim `L`, the loop over microbatches is unrolled, and the
//! hand-off between stages is a shift along `L`. Sharding `L` over devices
//! turns the shift into a neighbor permute.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::ir::graph::{Graph, GraphBuilder, InstrId};
use crate::ir::op::{CompareDir, DotDims, Op, PadDim, ReduceKind, SliceDim};
use crate::ir::shape::{DType, Shape};
use crate::ir::IrError;
use crate::partitioner::detect_and_rotate;
use crate::sharding::Sharding;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("stage body shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cannot vectorize {op} in the stage body")]
    Unsupported { op: String },
    #[error(transparent)]
    Ir(#[from] IrError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Schedule {
    GPipe,
    /// Each stage holds `layers_per_stage` layers; stage `l` owns layers
    /// `l, l + L, l + 2L, ...` and microbatches loop through the stages once
    /// per layer round.
    Circular { layers_per_stage: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PipelineConfig {
    pub stages: usize,
    pub microbatches: usize,
    pub schedule: Schedule,
}

impl PipelineConfig {
    pub fn gpipe(stages: usize, microbatches: usize) -> PipelineConfig {
        PipelineConfig { stages, microbatches, schedule: Schedule::GPipe }
    }

    pub fn circular(stages: usize, microbatches: usize, layers_per_stage: usize) -> PipelineConfig {
        PipelineConfig { stages, microbatches, schedule: Schedule::Circular { layers_per_stage } }
    }

    /// Layers applied by each stage.
    pub fn rounds(&self) -> usize {
        match self.schedule {
            Schedule::GPipe => 1,
            Schedule::Circular { layers_per_stage } => layers_per_stage,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.stages == 0 || self.microbatches == 0 || self.rounds() == 0 {
            return Err(PipelineError::InvalidConfig(format!(
                "stages, microbatches and layers per stage must be positive (got {}, {}, {})",
                self.stages,
                self.microbatches,
                self.rounds()
            )));
        }
        Ok(())
    }

    /// Microbatch and layer round processed by stage `l` at iteration `t`,
    /// or `None` when that slot is a bubble. Microbatches enter in groups of
    /// `L`; a group occupies stage 0 for `L * R` consecutive iterations.
    pub fn slot(&self, t: usize, l: usize) -> Option<(usize, usize)> {
        let (ls, r) = (self.stages, self.rounds());
        let tau = t.checked_sub(l)?;
        let (group, within) = (tau / (ls * r), tau % (ls * r));
        let m = group * ls + within % ls;
        (m < self.microbatches).then_some((m, within / ls))
    }

    /// Number of unrolled iterations.
    pub fn iterations(&self) -> usize {
        let (ls, r) = (self.stages, self.rounds());
        let last = self.microbatches - 1;
        (last / ls) * ls * r + (r - 1) * ls + last % ls + ls
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BubbleStats {
    pub iterations: usize,
    /// Stage-body applications over the whole unroll (`iterations * L`).
    pub stage_steps: usize,
    pub busy_steps: usize,
    pub padded_steps: usize,
    /// `padded_steps / stage_steps` in lowest terms.
    pub bubble_numerator: usize,
    pub bubble_denominator: usize,
    pub bubble_ratio: f64,
}

impl BubbleStats {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize")
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Counts busy and idle stage slots of the unrolled schedule.
pub fn bubble_stats(cfg: &PipelineConfig) -> Result<BubbleStats, PipelineError> {
    cfg.validate()?;
    let iterations = cfg.iterations();
    let stage_steps = iterations * cfg.stages;
    let busy_steps = (0..iterations).flat_map(|t| (0..cfg.stages).map(move |l| (t, l))).filter(|&(t, l)| cfg.slot(t, l).is_some()).count();
    let padded_steps = stage_steps - busy_steps;
    let g = gcd(padded_steps, stage_steps).max(1);
    Ok(BubbleStats {
        iterations,
        stage_steps,
        busy_steps,
        padded_steps,
        bubble_numerator: padded_steps / g,
        bubble_denominator: stage_steps / g,
        bubble_ratio: padded_steps as f64 / stage_steps as f64,
    })
}

/// Sharding that splits dim 0 of a rank-`rank` value over `stages` devices.
pub fn stage_sharding(rank: usize, stages: usize) -> Sharding {
    let mut tiles = vec![1; rank];
    tiles[0] = stages;
    Sharding::tiled(tiles, (0..stages as u32).collect()).expect("stage tiling is valid")
}

/// Annotates the loop state of a graph built by [`build_pipeline`] so that
/// each stage lives on its own device.
pub fn annotate_stages(g: &Graph, stages: usize) -> Graph {
    let mut out = g.clone();
    for ins in &mut out.instructions {
        if ins.name.starts_with("state.") && ins.shape.rank() > 0 && ins.shape.dims[0] == stages {
            ins.sharding = Some(stage_sharding(ins.shape.rank(), stages));
        }
    }
    out
}

/// Stage-sharded copy of a graph built by [`build_pipeline`]: loop state
/// and weights split on their stage dim, microbatches replicated, and the
/// shift between stages rewritten to a rotate.
pub fn shard_pipeline(g: &Graph, cfg: &PipelineConfig) -> Graph {
    let mut g = annotate_stages(g, cfg.stages);
    let stage_dim = usize::from(matches!(cfg.schedule, Schedule::Circular { .. }));
    for ins in &mut g.instructions {
        if let Op::Parameter { index, .. } = ins.op {
            let rank = ins.shape.rank();
            ins.sharding = Some(if index == 0 || rank <= stage_dim {
                Sharding::replicated()
            } else {
                let mut tiles = vec![1; rank];
                tiles[stage_dim] = cfg.stages;
                Sharding::tiled(tiles, (0..cfg.stages as u32).collect()).expect("stage tiling is valid")
            });
        }
    }
    detect_and_rotate(&g)
}

struct Builder<'a> {
    b: GraphBuilder,
    cfg: &'a PipelineConfig,
    dtype: DType,
    state_dims: Vec<usize>,
    zero: Option<InstrId>,
    lane: BTreeMap<usize, InstrId>,
}

impl Builder<'_> {
    fn zero(&mut self) -> InstrId {
        *self.zero.get_or_insert_with(|| self.b.constant(Tensor::scalar(Scalar::zero(self.dtype))))
    }

    /// Pred over the state shape: true on stage `l`.
    fn lane(&mut self, l: usize) -> Result<InstrId, PipelineError> {
        if let Some(&id) = self.lane.get(&l) {
            return Ok(id);
        }
        let shape = Shape::new(DType::S32, self.state_dims.clone());
        let iota = match self.lane.is_empty() {
            true => self.b.add_named(Some("stage_id"), Op::Iota { dimension: 0, shape: shape.clone() }, &[])?,
            false => self.b.graph().find("stage_id").expect("created with the first lane"),
        };
        let k = self.b.constant(Tensor::scalar(Scalar::from_i64(DType::S32, l as i64)));
        let kb = self.b.add(Op::Broadcast { dims: vec![], out_dims: shape.dims.clone() }, &[k])?;
        let id = self.b.add_named(Some(&format!("is_stage{l}")), Op::Compare(CompareDir::Eq), &[iota, kb])?;
        self.lane.insert(l, id);
        Ok(id)
    }

    fn slice0(&mut self, x: InstrId, start: usize, limit: usize) -> Result<InstrId, PipelineError> {
        let dims = self.b.shape(x).dims.clone();
        let mut cfg: Vec<SliceDim> = dims.iter().map(|&n| SliceDim::full(n)).collect();
        cfg[0] = SliceDim { start, limit, stride: 1 };
        Ok(self.b.add(Op::Slice { dims: cfg }, &[x])?)
    }

    fn shift(&mut self, state: InstrId, t: usize) -> Result<InstrId, PipelineError> {
        let ls = self.cfg.stages;
        let name = format!("shift.{t}");
        match self.cfg.schedule {
            Schedule::GPipe => {
                let zero = self.zero();
                let mut pad = vec![PadDim::NONE; self.state_dims.len()];
                pad[0] = PadDim { low: 1, high: 0, interior: 0 };
                let p = self.b.add(Op::Pad { config: pad }, &[state, zero])?;
                let mut cfg: Vec<SliceDim> = self.state_dims.iter().map(|&n| SliceDim::full(n)).collect();
                cfg[0] = SliceDim { start: 0, limit: ls, stride: 1 };
                Ok(self.b.add_named(Some(&name), Op::Slice { dims: cfg }, &[p])?)
            }
            Schedule::Circular { .. } if ls == 1 => Ok(state),
            Schedule::Circular { .. } => {
                let last = self.slice0(state, ls - 1, ls)?;
                let rest = self.slice0(state, 0, ls - 1)?;
                Ok(self.b.add_named(Some(&name), Op::Concat { dim: 0 }, &[last, rest])?)
            }
        }
    }

    /// Weights of every stage at iteration `t`: for circular schedules each
    /// stage picks the layer of its current round.
    fn weights(&mut self, params: &[InstrId], t: usize, cache: &mut BTreeMap<(usize, usize), InstrId>) -> Result<Vec<InstrId>, PipelineError> {
        if self.cfg.schedule == Schedule::GPipe {
            return Ok(params.to_vec());
        }
        let ls = self.cfg.stages;
        let rounds: Vec<usize> = (0..ls).map(|l| self.cfg.slot(t, l).map_or(0, |(_, r)| r)).collect();
        let mut out = Vec::with_capacity(params.len());
        for (k, &w) in params.iter().enumerate() {
            let mut layer = |this: &mut Self, r: usize| -> Result<InstrId, PipelineError> {
                if let Some(&id) = cache.get(&(k, r)) {
                    return Ok(id);
                }
                let s = this.slice0(w, r, r + 1)?;
                let dims = this.b.shape(w).dims[1..].to_vec();
                let id = this.b.add(Op::Reshape { out_dims: dims }, &[s])?;
                cache.insert((k, r), id);
                Ok(id)
            };
            let mut acc = layer(self, rounds[0])?;
            let mut distinct: Vec<usize> = rounds.clone();
            distinct.sort_unstable();
            distinct.dedup();
            for &r in distinct.iter().filter(|&&r| r != rounds[0]) {
                let wr = layer(self, r)?;
                let mask: Vec<bool> = rounds.iter().map(|&x| x == r).collect();
                let m = self.b.constant(Tensor::from_pred(vec![ls], mask));
                let dims = self.b.shape(acc).dims.clone();
                let mb = self.b.add(Op::Broadcast { dims: vec![0], out_dims: dims }, &[m])?;
                acc = self.b.add(Op::Select, &[mb, wr, acc])?;
            }
            out.push(acc);
        }
        Ok(out)
    }
}

/// Copies `body` into `b`, binding its parameters to `args`.
fn inline(b: &mut GraphBuilder, body: &Graph, args: &[InstrId], prefix: &str) -> Result<InstrId, PipelineError> {
    let mut map = Vec::with_capacity(body.len());
    for ins in &body.instructions {
        let id = match &ins.op {
            Op::Parameter { index, .. } => args[*index],
            op => {
                let ops: Vec<InstrId> = ins.operands.iter().map(|o| map[o.index()]).collect();
                let id = b.add_named(Some(&format!("{prefix}.{}", ins.name)), op.clone(), &ops)?;
                b.set_sharding(id, ins.sharding.clone());
                id
            }
        };
        map.push(id);
    }
    Ok(map[body.outputs[0].index()])
}

/// Unrolls the pipeline loop around a vectorized stage `body`.
///
/// The body's parameter 0 is the stage state `[L, ...]` and its single
/// output must have the same shape; further parameters are per-stage
/// weights `[L, ...]`. The result takes the stacked microbatches
/// `[M, ...]` followed by the weights (`[R, L, ...]` for circular
/// schedules, layer `r * L + l` at `[r, l]`) and returns the stacked
/// outputs of the last stage.
pub fn build_pipeline(cfg: &PipelineConfig, body: &Graph) -> Result<Graph, PipelineError> {
    cfg.validate()?;
    let params = body.parameter_shapes();
    if params.is_empty() || body.outputs.len() != 1 {
        return Err(PipelineError::ShapeMismatch("the body needs a state parameter and exactly one output".into()));
    }
    let state = params[0].clone();
    let out = body.shape(body.outputs[0]);
    if *out != state {
        return Err(PipelineError::ShapeMismatch(format!("body maps {state} to {out}")));
    }
    let ls = cfg.stages;
    for (k, p) in params.iter().enumerate() {
        if p.rank() == 0 || p.dims[0] != ls {
            return Err(PipelineError::ShapeMismatch(format!("body parameter {k} has shape {p}, expected a leading dim of {ls}")));
        }
    }
    let micro = &state.dims[1..];
    let mut bld = Builder {
        b: GraphBuilder::new(format!("{}_pipeline", body.name)),
        cfg,
        dtype: state.dtype,
        state_dims: state.dims.clone(),
        zero: None,
        lane: BTreeMap::new(),
    };
    let mut in_dims = vec![cfg.microbatches];
    in_dims.extend_from_slice(micro);
    let inputs = bld.b.parameter("microbatches", state.with_dims(in_dims));
    let mut weights = Vec::new();
    for (k, p) in params.iter().enumerate().skip(1) {
        let shape = match cfg.schedule {
            Schedule::GPipe => p.clone(),
            Schedule::Circular { layers_per_stage } => {
                let mut d = vec![layers_per_stage];
                d.extend_from_slice(&p.dims);
                p.with_dims(d)
            }
        };
        let name = body.parameters()[k].name.clone();
        weights.push(bld.b.parameter(&name, shape));
    }
    let zero = bld.zero();
    let mut cur = bld.b.add_named(Some("state.init"), Op::Broadcast { dims: vec![], out_dims: state.dims.clone() }, &[zero])?;
    let mut outs: Vec<Option<InstrId>> = vec![None; cfg.microbatches];
    let mut cache = BTreeMap::new();
    let last_round = cfg.rounds() - 1;
    for t in 0..cfg.iterations() {
        let mut x = bld.shift(cur, t)?;
        if let Some((m, 0)) = cfg.slot(t, 0) {
            let s = bld.slice0(inputs, m, m + 1)?;
            let r = bld.b.add(Op::Reshape { out_dims: micro.to_vec() }, &[s])?;
            let bc = bld.b.add(Op::Broadcast { dims: (1..state.rank()).collect(), out_dims: state.dims.clone() }, &[r])?;
            let first = bld.lane(0)?;
            x = bld.b.add_named(Some(&format!("state.in{t}")), Op::Select, &[first, bc, x])?;
        }
        let w = bld.weights(&weights, t, &mut cache)?;
        let mut args = vec![x];
        args.extend(w);
        let y = inline(&mut bld.b, body, &args, &format!("it{t}"))?;
        cur = bld.b.add_named(Some(&format!("state.{t}")), Op::Reshape { out_dims: state.dims.clone() }, &[y])?;
        if let Some((m, r)) = cfg.slot(t, ls - 1) {
            if r == last_round {
                // Masked sum instead of a slice, so the stage dim stays split.
                let last = bld.lane(ls - 1)?;
                let zb = bld.b.add(Op::Broadcast { dims: vec![], out_dims: state.dims.clone() }, &[zero])?;
                let masked = bld.b.add(Op::Select, &[last, cur, zb])?;
                let red = bld.b.add(Op::Reduce { dims: vec![0], kind: ReduceKind::Sum }, &[masked, zero])?;
                let mut one = vec![1];
                one.extend_from_slice(micro);
                outs[m] = Some(bld.b.add_named(Some(&format!("out.{m}")), Op::Reshape { out_dims: one }, &[red])?);
            }
        }
    }
    let outs: Vec<InstrId> = outs.into_iter().map(|o| o.expect("every microbatch leaves the last stage")).collect();
    let result = match outs[..] {
        [single] => single,
        _ => bld.b.add_named(Some("outputs"), Op::Concat { dim: 0 }, &outs)?,
    };
    Ok(bld.b.finish(&[result]))
}

/// Lifts a single-stage body to the vectorized form taken by
/// [`build_pipeline`]: every parameter and every value computed from one
/// gains a leading dim of size `stages`. Values computed only from
/// constants stay as they are and are broadcast where they meet a lifted
/// value.
pub fn vectorize_body(body: &Graph, stages: usize) -> Result<Graph, PipelineError> {
    let mut b = GraphBuilder::new(body.name.clone());
    // (new id, lifted)
    let mut map: Vec<(InstrId, bool)> = Vec::with_capacity(body.len());
    let up = |v: &[usize]| -> Vec<usize> { v.iter().map(|&d| d + 1).collect() };
    for ins in &body.instructions {
        let lifted_any = ins.operands.iter().any(|o| map[o.index()].1);
        let name = Some(ins.name.as_str());
        if let Op::Parameter { shape, .. } = &ins.op {
            let mut d = vec![stages];
            d.extend_from_slice(&shape.dims);
            map.push((b.parameter(&ins.name, shape.with_dims(d)), true));
            continue;
        }
        if !lifted_any {
            let ops: Vec<InstrId> = ins.operands.iter().map(|o| map[o.index()].0).collect();
            map.push((b.add_named(name, ins.op.clone(), &ops)?, false));
            continue;
        }
        // Lifted version of operand k, broadcasting uniform values.
        let mut lift = |b: &mut GraphBuilder, k: usize| -> Result<InstrId, PipelineError> {
            let (id, lifted) = map[ins.operands[k].index()];
            if lifted {
                return Ok(id);
            }
            let s = b.shape(id).clone();
            let mut d = vec![stages];
            d.extend_from_slice(&s.dims);
            Ok(b.add(Op::Broadcast { dims: (1..=s.rank()).collect(), out_dims: d }, &[id])?)
        };
        let uniform = |k: usize| -> Result<InstrId, PipelineError> {
            match map[ins.operands[k].index()] {
                (id, false) => Ok(id),
                _ => Err(PipelineError::Unsupported { op: format!("{} with a per-stage scalar operand", ins.op.name()) }),
            }
        };
        let all = |b: &mut GraphBuilder, lift: &mut dyn FnMut(&mut GraphBuilder, usize) -> Result<InstrId, PipelineError>| {
            (0..ins.operands.len()).map(|k| lift(b, k)).collect::<Result<Vec<_>, _>>()
        };
        let (op, ops) = match &ins.op {
            Op::Unary(_) | Op::Binary(_) | Op::Compare(_) | Op::Select => (ins.op.clone(), all(&mut b, &mut lift)?),
            Op::Broadcast { dims, out_dims } => {
                let mut d = vec![0];
                d.extend(up(dims));
                let mut o = vec![stages];
                o.extend_from_slice(out_dims);
                (Op::Broadcast { dims: d, out_dims: o }, vec![lift(&mut b, 0)?])
            }
            Op::Reshape { out_dims } => {
                let mut o = vec![stages];
                o.extend_from_slice(out_dims);
                (Op::Reshape { out_dims: o }, vec![lift(&mut b, 0)?])
            }
            Op::Transpose { permutation } => {
                let mut p = vec![0];
                p.extend(up(permutation));
                (Op::Transpose { permutation: p }, vec![lift(&mut b, 0)?])
            }
            Op::Reverse { dims } => (Op::Reverse { dims: up(dims) }, vec![lift(&mut b, 0)?]),
            Op::Pad { config } => {
                let mut c = vec![PadDim::NONE];
                c.extend_from_slice(config);
                (Op::Pad { config: c }, vec![lift(&mut b, 0)?, uniform(1)?])
            }
            Op::Slice { dims } => {
                let mut c = vec![SliceDim::full(stages)];
                c.extend_from_slice(dims);
                (Op::Slice { dims: c }, vec![lift(&mut b, 0)?])
            }
            Op::Concat { dim } => (Op::Concat { dim: dim + 1 }, all(&mut b, &mut lift)?),
            Op::Reduce { dims, kind } => (Op::Reduce { dims: up(dims), kind: *kind }, vec![lift(&mut b, 0)?, uniform(1)?]),
            Op::Rotate { dim, amount } => {
                let mut ops = vec![lift(&mut b, 0)?];
                if ins.operands.len() == 2 {
                    ops.push(uniform(1)?);
                }
                (Op::Rotate { dim: dim + 1, amount: *amount }, ops)
            }
            Op::Dot(dd) => {
                let mut lb = vec![0];
                lb.extend(up(&dd.lhs_batch));
                let mut rb = vec![0];
                rb.extend(up(&dd.rhs_batch));
                let d = DotDims { lhs_batch: lb, rhs_batch: rb, lhs_contracting: up(&dd.lhs_contracting), rhs_contracting: up(&dd.rhs_contracting) };
                (Op::Dot(d), all(&mut b, &mut lift)?)
            }
            Op::DynamicSlice { sizes } => {
                let mut s = vec![stages];
                s.extend_from_slice(sizes);
                let z = b.constant(Tensor::scalar(Scalar::zero(DType::S32)));
                let mut ops = vec![lift(&mut b, 0)?, z];
                for k in 1..ins.operands.len() {
                    ops.push(uniform(k)?);
                }
                (Op::DynamicSlice { sizes: s }, ops)
            }
            Op::DynamicUpdateSlice => {
                let z = b.constant(Tensor::scalar(Scalar::zero(DType::S32)));
                let mut ops = vec![lift(&mut b, 0)?, lift(&mut b, 1)?, z];
                for k in 2..ins.operands.len() {
                    ops.push(uniform(k)?);
                }
                (Op::DynamicUpdateSlice, ops)
            }
            op => return Err(PipelineError::Unsupported { op: op.name().to_string() }),
        };
        map.push((b.add_named(name, op, &ops)?, true));
    }
    let outs: Vec<InstrId> = body.outputs.iter().map(|o| map[o.index()].0).collect();
    Ok(b.finish(&outs))
}
