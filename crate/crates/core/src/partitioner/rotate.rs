//! Rotations: recognising concat-of-slices and pad-then-slice shifts as one
//! `rotate`, and lowering a rotate on a split dim to neighbor permutes.

use crate::ir::graph::{Graph, Instruction};
use crate::ir::op::{Op, SliceDim};

use super::context::{Layout, PVal};
use super::{Cx, PartitionError};

/// The one dim where `cfg` is not a full slice of `dims`.
fn single_sliced_dim(cfg: &[SliceDim], dims: &[usize]) -> Option<usize> {
    let differ: Vec<usize> = (0..dims.len()).filter(|&d| cfg[d] != SliceDim::full(dims[d])).collect();
    match differ[..] {
        [d] if cfg[d].stride == 1 => Some(d),
        _ => None,
    }
}

fn as_rotate(g: &Graph, ins: &Instruction) -> Option<(Op, Vec<crate::ir::graph::InstrId>)> {
    match &ins.op {
        Op::Concat { dim } if ins.operands.len() == 2 => {
            let (a, b) = (g.instr(ins.operands[0]), g.instr(ins.operands[1]));
            let (Op::Slice { dims: ca }, Op::Slice { dims: cb }) = (&a.op, &b.op) else { return None };
            if a.operands[0] != b.operands[0] {
                return None;
            }
            let src = g.shape(a.operands[0]);
            let n = src.dims[*dim];
            // Either slice may be full or empty along `dim`, which covers
            // rotations by 0.
            let only_dim = |c: &[SliceDim]| (0..src.rank()).all(|d| d == *dim || c[d] == SliceDim::full(src.dims[d]));
            let k = ca[*dim].start;
            if !only_dim(ca) || !only_dim(cb) || ca[*dim].stride != 1 || cb[*dim].stride != 1 {
                return None;
            }
            if ca[*dim].limit != n || cb[*dim].start != 0 || cb[*dim].limit != k {
                return None;
            }
            Some((Op::Rotate { dim: *dim, amount: k as i64 }, vec![a.operands[0]]))
        }
        Op::Slice { dims: cfg } => {
            let p = g.instr(ins.operands[0]);
            let Op::Pad { config } = &p.op else { return None };
            let x = g.shape(p.operands[0]);
            let padded: Vec<usize> = (0..config.len()).filter(|&d| !config[d].is_noop()).collect();
            let [d] = padded[..] else { return None };
            if config[d].interior != 0 || config[d].low < 0 || config[d].high < 0 {
                return None;
            }
            let sd = single_sliced_dim(cfg, &p.shape.dims)?;
            if sd != d || cfg[d].limit - cfg[d].start != x.dims[d] {
                return None;
            }
            Some((Op::Rotate { dim: d, amount: cfg[d].start as i64 - config[d].low }, vec![p.operands[0], p.operands[1]]))
        }
        _ => None,
    }
}

/// Rewrites rotation patterns into `rotate` instructions, keeping names and
/// shardings of the rewritten instructions.
pub fn detect_and_rotate(g: &Graph) -> Graph {
    let mut out = g.clone();
    let mut changed = false;
    for ins in &g.instructions {
        if let Some((op, operands)) = as_rotate(g, ins) {
            let slot = out.instr_mut(ins.id);
            slot.op = op;
            slot.operands = operands;
            changed = true;
        }
    }
    if changed {
        out.without_dead_code()
    } else {
        out
    }
}

pub(super) fn partition_rotate(cx: &mut Cx, ins: &Instruction, target: &Layout) -> Result<PVal, PartitionError> {
    let Op::Rotate { dim, amount } = ins.op else { unreachable!("not a rotate") };
    let n = ins.shape.dims[dim];
    let t = target.tiles[dim];
    let fill = if ins.operands.len() == 2 { Some(cx.scalar_operand(ins, 1)?) } else { None };
    if t == 1 || !n.is_multiple_of(t) {
        let layout = target.unsplit(&[dim]);
        let v = cx.operand_as(ins, 0, &layout)?;
        let mut args = vec![v.id];
        args.extend(fill);
        let id = cx.em.op(ins.op.clone(), &args)?;
        return Ok(cx.out(id, layout, ins));
    }
    let v = cx.operand_as(ins, 0, target)?;
    let s = (n / t) as i64;
    let wrap = fill.is_none();
    let (q, r) = (amount.div_euclid(s), amount.rem_euclid(s));
    let nl = target.n();
    // Partition with tile c reads tile c+q from offset r, then tile c+q+1.
    let fetch = |cx: &mut Cx, from: usize, to: usize, shift: i64| -> Result<Option<crate::ir::graph::InstrId>, PartitionError> {
        if from == to {
            return Ok(None);
        }
        let part = cx.em.slice_dim(v.id, dim, from, to)?;
        let local = if wrap { shift.rem_euclid(t as i64) == 0 } else { shift == 0 };
        if local {
            return Ok(Some(part));
        }
        let pairs: Vec<(u32, u32)> =
            (0..nl).filter_map(|l| target.neighbor(l, dim, shift, wrap).map(|src| (src as u32, l as u32))).collect();
        Ok(Some(cx.em.permute(&cx.ctx, part, &pairs)?))
    };
    let head = fetch(cx, r as usize, s as usize, q)?;
    let tail = fetch(cx, 0, r as usize, q + 1)?;
    let parts: Vec<_> = head.into_iter().chain(tail).collect();
    let mut id = cx.em.concat(&parts, dim)?;
    if let Some(f) = fill {
        let starts: Vec<i64> = target.coords.iter().map(|c| c[dim] as i64 * s + amount).collect();
        id = cx.em.mask_outside(&cx.ctx, id, dim, &starts, n as i64, f)?;
    }
    Ok(cx.out(id, target.clone(), ins))
}
