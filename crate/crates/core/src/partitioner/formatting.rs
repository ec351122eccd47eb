//! Data formatting ops: reshape, reverse, pad, slice, concat and the
//! dynamic slices. Shifted windows on a split dim use a halo exchange; dims
//! that cannot be handled that way are computed unsplit and left for the
//! final reshard to slice.

use crate::ir::graph::Instruction;
use crate::ir::op::{Op, PadDim, SliceDim};
use crate::propagation::reshape_groups;

use super::context::{Layout, PVal};
use super::halo::{halo_exchange, HaloSpec};
use super::{Cx, PartitionError};

pub(super) fn partition_formatting(cx: &mut Cx, ins: &Instruction, target: &Layout) -> Result<PVal, PartitionError> {
    match &ins.op {
        Op::Reverse { dims } => reverse(cx, ins, dims, target),
        Op::Pad { config } => pad(cx, ins, config, target),
        Op::Slice { dims } => slice(cx, ins, dims, target),
        Op::Reshape { out_dims } => reshape(cx, ins, out_dims, target),
        Op::Concat { dim } => {
            let layout = if target.tiles[*dim] > 1 { target.unsplit(&[*dim]) } else { target.clone() };
            let mut parts = Vec::with_capacity(ins.operands.len());
            for k in 0..ins.operands.len() {
                parts.push(cx.operand_as(ins, k, &layout)?.id);
            }
            let id = cx.em.op(ins.op.clone(), &parts)?;
            Ok(cx.out(id, layout, ins))
        }
        Op::DynamicSlice { sizes } => {
            let x = cx.g.shape(ins.operands[0]).dims.clone();
            let sliced: Vec<usize> = (0..x.len()).filter(|&d| sizes[d] < x[d]).collect();
            let layout = target.unsplit(&sliced);
            let v = cx.operand_as(ins, 0, &layout)?;
            let mut args = vec![v.id];
            for k in 1..ins.operands.len() {
                args.push(cx.scalar_operand(ins, k)?);
            }
            let local = layout.shard_dims(sizes);
            let id = cx.em.op(Op::DynamicSlice { sizes: local }, &args)?;
            Ok(cx.out(id, layout, ins))
        }
        Op::DynamicUpdateSlice => {
            let x = cx.g.shape(ins.operands[0]).dims.clone();
            let u = cx.g.shape(ins.operands[1]).dims.clone();
            let sliced: Vec<usize> = (0..x.len()).filter(|&d| u[d] < x[d]).collect();
            let layout = target.unsplit(&sliced);
            let v = cx.operand_as(ins, 0, &layout)?;
            let w = cx.operand_as(ins, 1, &layout)?;
            let mut args = vec![v.id, w.id];
            for k in 2..ins.operands.len() {
                args.push(cx.scalar_operand(ins, k)?);
            }
            let id = cx.em.op(Op::DynamicUpdateSlice, &args)?;
            Ok(cx.out(id, layout, ins))
        }
        _ => unreachable!("not a formatting op"),
    }
}

fn reverse(cx: &mut Cx, ins: &Instruction, dims: &[usize], target: &Layout) -> Result<PVal, PartitionError> {
    let full = &ins.shape.dims;
    // Tile i holds the reversed tile t-1-i, off by the padding of the last
    // tile, which the right neighbor supplies.
    let mut halos = Vec::new();
    let mut unsplit = Vec::new();
    for &d in dims {
        let t = target.tiles[d];
        let s = full[d].div_ceil(t);
        let extra = t * s - full[d];
        if t == 1 || extra == 0 {
            continue;
        }
        let spec = HaloSpec::linear(s as i64, extra as i64, s, s, t);
        if spec.fits() {
            halos.push((d, spec));
        } else {
            unsplit.push(d);
        }
    }
    let layout = target.unsplit(&unsplit);
    let coords = layout
        .coords
        .iter()
        .map(|c| {
            let mut c = c.clone();
            for &d in dims {
                c[d] = layout.tiles[d] - 1 - c[d];
            }
            c
        })
        .collect();
    let req = Layout::from_coords(layout.tiles.clone(), coords).ok_or_else(|| PartitionError::Internal("reversed layout".into()))?;
    let v = cx.operand_as(ins, 0, &req)?;
    let mut id = cx.em.op(ins.op.clone(), &[v.id])?;
    for (d, spec) in &halos {
        id = halo_exchange(&mut cx.em, &cx.ctx, id, &layout, *d, spec, false)?.0;
    }
    Ok(cx.out(id, layout, ins))
}

fn pad(cx: &mut Cx, ins: &Instruction, config: &[PadDim], target: &Layout) -> Result<PVal, PartitionError> {
    let full_in = cx.g.shape(ins.operands[0]).dims.clone();
    let rank = full_in.len();
    let mut unsplit = Vec::new();
    let mut halos = Vec::new();
    for d in 0..rank {
        let t = target.tiles[d];
        if t == 1 || config[d].is_noop() {
            continue;
        }
        let s_out = ins.shape.dims[d].div_ceil(t);
        let spec = HaloSpec { mask: true, ..HaloSpec::linear(s_out as i64, -config[d].low, s_out, full_in[d].div_ceil(t), t) };
        if config[d].interior > 0 || !spec.fits() {
            unsplit.push(d);
        } else {
            halos.push((d, spec));
        }
    }
    let layout = target.unsplit(&unsplit);
    let v = cx.operand_as(ins, 0, &layout)?;
    let pv = cx.scalar_operand(ins, 1)?;
    let mut x = v.id;
    for (d, spec) in &halos {
        let (y, starts) = halo_exchange(&mut cx.em, &cx.ctx, x, &layout, *d, spec, false)?;
        x = cx.em.mask_outside(&cx.ctx, y, *d, &starts, full_in[*d] as i64, pv)?;
    }
    let local: Vec<PadDim> = (0..rank).map(|d| if layout.tiles[d] > 1 { PadDim::NONE } else { config[d] }).collect();
    if local.iter().any(|p| !p.is_noop()) {
        x = cx.em.op(Op::Pad { config: local }, &[x, pv])?;
    }
    Ok(cx.out(x, layout, ins))
}

fn slice(cx: &mut Cx, ins: &Instruction, cfg: &[SliceDim], target: &Layout) -> Result<PVal, PartitionError> {
    let full_in = cx.g.shape(ins.operands[0]).dims.clone();
    let rank = full_in.len();
    let mut unsplit = Vec::new();
    let mut halos = Vec::new();
    for d in 0..rank {
        let t = target.tiles[d];
        if t == 1 || (cfg[d].start == 0 && cfg[d].stride == 1 && cfg[d].limit == full_in[d]) {
            continue;
        }
        let s_out = ins.shape.dims[d].div_ceil(t);
        let spec = HaloSpec::linear(s_out as i64, cfg[d].start as i64, s_out, full_in[d].div_ceil(t), t);
        if cfg[d].stride > 1 || !spec.fits() {
            unsplit.push(d);
        } else {
            halos.push((d, spec));
        }
    }
    let layout = target.unsplit(&unsplit);
    let v = cx.operand_as(ins, 0, &layout)?;
    let mut x = v.id;
    for (d, spec) in &halos {
        x = halo_exchange(&mut cx.em, &cx.ctx, x, &layout, *d, spec, false)?.0;
    }
    let local_dims = cx.em.dims(x);
    let local: Vec<SliceDim> =
        (0..rank).map(|d| if layout.tiles[d] > 1 { SliceDim::full(local_dims[d]) } else { cfg[d] }).collect();
    if local.iter().zip(&local_dims).any(|(s, &n)| *s != SliceDim::full(n)) {
        x = cx.em.op(Op::Slice { dims: local }, &[x])?;
    }
    Ok(cx.out(x, layout, ins))
}

fn reshape(cx: &mut Cx, ins: &Instruction, out_dims: &[usize], target: &Layout) -> Result<PVal, PartitionError> {
    let full_in = cx.g.shape(ins.operands[0]).dims.clone();
    let Some(groups) = reshape_groups(&full_in, out_dims) else {
        return Err(PartitionError::Internal(format!("reshape {full_in:?} -> {out_dims:?} has no dim groups")));
    };
    // Groups whose split result dim is the group's major dim keep the split
    // through a flattened exchange; the others are rebuilt unsplit.
    let mut unsplit = Vec::new();
    let mut kept = Vec::new();
    for (ga, gb) in &groups {
        let split: Vec<usize> = gb.iter().copied().filter(|&d| target.tiles[d] > 1).collect();
        if split.is_empty() {
            continue;
        }
        let t = target.tiles[gb[0]];
        if ga.is_empty() || split != [gb[0]] {
            unsplit.extend(split);
            continue;
        }
        let r_in: usize = ga[1..].iter().map(|&d| full_in[d]).product();
        let r_out: usize = gb[1..].iter().map(|&d| out_dims[d]).product();
        let s_a = full_in[ga[0]].div_ceil(t) * r_in;
        let s_b = out_dims[gb[0]].div_ceil(t) * r_out;
        let spec = HaloSpec::linear(s_b as i64, 0, s_b, s_a, t);
        if spec.fits() {
            kept.push((ga.clone(), gb.clone(), spec));
        } else {
            unsplit.push(gb[0]);
        }
    }
    let layout = target.unsplit(&unsplit);
    let mut src = vec![None; full_in.len()];
    for (ga, gb, _) in &kept {
        src[ga[0]] = Some(gb[0]);
    }
    let req = layout.project(&src);
    let v = cx.operand_as(ins, 0, &req)?;
    // Intermediate shape: one flat dim per kept group, result dims otherwise.
    let mut mid = Vec::new();
    let mut mid_src = Vec::new();
    let mut flat_dims = Vec::new();
    for (ga, gb) in &groups {
        if let Some((_, _, spec)) = kept.iter().find(|(a, _, _)| a == ga) {
            flat_dims.push((mid.len(), *spec));
            mid.push(spec.shard);
            mid_src.push(Some(gb[0]));
        } else {
            for &d in gb {
                mid.push(out_dims[d]);
                mid_src.push(None);
            }
        }
    }
    let mut x = cx.em.op(Op::Reshape { out_dims: mid }, &[v.id])?;
    let mid_layout = layout.project(&mid_src);
    for (d, spec) in &flat_dims {
        x = match halo_exchange(&mut cx.em, &cx.ctx, x, &mid_layout, *d, spec, false) {
            Ok((y, _)) => y,
            Err(PartitionError::HaloTooLarge { .. }) => unreachable!("checked with fits"),
            Err(e) => return Err(e),
        };
    }
    let local = layout.shard_dims(out_dims);
    let id = cx.em.op(Op::Reshape { out_dims: local }, &[x])?;
    Ok(cx.out(id, layout, ins))
}
