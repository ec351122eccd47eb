//! Convolution partitioning along spatial dims. Each partition computes a
//! contiguous block of outputs from an input window fetched with a halo
//! exchange; the local window config is the same on every partition and
//! per-partition differences are absorbed by offsets read from tables.

use crate::ir::op::{ConvDims, Op, WindowDim};
use crate::ir::shape::Shape;
use crate::tensor::Scalar;

use super::context::{Em, Layout, PVal, PartitionContext};
use super::halo::{halo_exchange, HaloSpec};
use super::reshard::reshard;
use super::PartitionError;

/// How one sharded spatial dim is computed.
#[derive(Clone, Debug, PartialEq)]
enum DimPlan {
    Halo {
        spec: HaloSpec,
        local: WindowDim,
        /// Per tile: offset into the local output (`out_extra > 0`) or into
        /// the zero-padded kernel (`kernel_extra > 0`).
        shift: Vec<i64>,
        out_extra: usize,
        kernel_extra: usize,
    },
    Gather,
}

fn plan_dim(w: &WindowDim, n: usize, t: usize) -> DimPlan {
    let Some(no) = w.output_size(n) else { return DimPlan::Gather };
    let so = no.div_ceil(t) as i64;
    let s_in = n.div_ceil(t);
    let (st, bd, wd) = (w.stride as i64, w.base_dilation as i64, w.window_dilation as i64);
    let lo = w.padding_low as i64;
    let dw = w.dilated_window() as i64;
    let plan = if (st * so) % bd == 0 {
        let lo1 = lo % bd;
        let lx = ((so - 1) * st + dw - 1 - lo1).div_euclid(bd) + 1;
        let hi = (so - 1) * st + dw - lo1 - (lx - 1) * bd - 1;
        let local = WindowDim { padding_low: lo1 as usize, padding_high: hi as usize, ..*w };
        let spec = HaloSpec { mask: true, ..HaloSpec::linear(st * so / bd, -(lo / bd), lx as usize, s_in, t) };
        (spec, local, vec![0; t], 0, 0, lx)
    } else {
        let step = so * st;
        let spec = HaloSpec { a: step, b: bd - 1 - lo, c: bd, length: 0, shard: s_in, partitions: t, mask: true };
        let lo_i: Vec<i64> = (0..t).map(|i| lo + bd * spec.start(i) - i as i64 * step).collect();
        let lo_max = *lo_i.iter().max().unwrap();
        let delta: Vec<i64> = lo_i.iter().map(|l| lo_max - l).collect();
        let dmax = *delta.iter().max().unwrap();
        if st == 1 {
            let lx = lo_i.iter().map(|l| (so + dw - 2 - l).div_euclid(bd) + 1).max().unwrap();
            let hi = so + dmax + dw - 2 - lo_max - (lx - 1) * bd;
            let local = WindowDim { padding_low: lo_max as usize, padding_high: hi as usize, ..*w };
            (HaloSpec { length: lx.max(0) as usize, ..spec }, local, delta, dmax as usize, 0, lx)
        } else {
            if wd != 1 {
                return DimPlan::Gather;
            }
            let size = w.size as i64;
            let lx = lo_i.iter().map(|l| ((so - 1) * st + size - 1 - l).div_euclid(bd) + 1).max().unwrap();
            let hi = (so - 1) * st + size + dmax - lo_max - (lx - 1) * bd - 1;
            let local = WindowDim {
                size: (size + dmax) as usize,
                padding_low: lo_max as usize,
                padding_high: hi as usize,
                ..*w
            };
            let shift = delta.iter().map(|d| dmax - d).collect();
            (HaloSpec { length: lx.max(0) as usize, ..spec }, local, shift, 0, dmax as usize, lx)
        }
    };
    let (spec, local, shift, out_extra, kernel_extra, lx) = plan;
    if lx < 1 || !spec.fits() {
        return DimPlan::Gather;
    }
    DimPlan::Halo { spec, local, shift, out_extra, kernel_extra }
}

/// Input window of each of `partitions` output blocks for one spatial dim,
/// or `None` when that dim would be gathered instead.
pub fn conv_halo(window: &WindowDim, input_size: usize, partitions: usize) -> Option<HaloSpec> {
    match plan_dim(window, input_size, partitions) {
        DimPlan::Halo { spec, .. } => Some(spec),
        DimPlan::Gather => None,
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn partition_conv(
    em: &mut Em,
    ctx: &PartitionContext,
    l: &PVal,
    r: &PVal,
    window: &[WindowDim],
    cd: &ConvDims,
    target: &Layout,
    out: &Shape,
) -> Result<PVal, PartitionError> {
    let ns = cd.num_spatial();
    let plans: Vec<Option<DimPlan>> = (0..ns)
        .map(|k| {
            let t = target.tiles[cd.out_spatial[k]];
            (t > 1).then(|| plan_dim(&window[k], l.full.dims[cd.lhs_spatial[k]], t))
        })
        .collect();
    let mut lsrc = vec![None; l.full.rank()];
    lsrc[cd.lhs_batch] = Some(cd.out_batch);
    for k in 0..ns {
        if !matches!(plans[k], Some(DimPlan::Gather)) {
            lsrc[cd.lhs_spatial[k]] = Some(cd.out_spatial[k]);
        }
    }
    let mut rsrc = vec![None; r.full.rank()];
    rsrc[cd.rhs_output_feature] = Some(cd.out_feature);
    let lreq = target.project(&lsrc);
    let lv = reshard(em, ctx, l, &lreq)?;
    let rv = reshard(em, ctx, r, &target.project(&rsrc))?;
    let zero = em.scalar(Scalar::zero(out.dtype))?;
    let mut x = lv.id;
    let mut kernel = rv.id;
    let mut local_window = window.to_vec();
    let mut out_shifts = Vec::new();
    for k in 0..ns {
        let ld = cd.lhs_spatial[k];
        let od = cd.out_spatial[k];
        match &plans[k] {
            None | Some(DimPlan::Gather) => {}
            Some(DimPlan::Halo { spec, local, shift, out_extra, kernel_extra }) => {
                let (y, starts) = halo_exchange(em, ctx, x, &lreq, ld, spec, false)?;
                x = em.mask_outside(ctx, y, ld, &starts, l.full.dims[ld] as i64, zero)?;
                local_window[k] = *local;
                let per_tile = |v: &Vec<i64>| -> Vec<i64> { target.coords.iter().map(|c| v[c[od]]).collect() };
                if *out_extra > 0 {
                    out_shifts.push((od, per_tile(shift)));
                }
                if *kernel_extra > 0 {
                    let kd = cd.rhs_spatial[k];
                    let e = *kernel_extra;
                    let padded = em.pad_dim(kernel, kd, e, e, zero)?;
                    let mut sizes = em.dims(padded);
                    sizes[kd] = window[k].size + e;
                    kernel = em.dynamic_slice(ctx, padded, &[(kd, per_tile(shift))], sizes)?;
                }
            }
        }
    }
    let mut y = em.op(Op::Convolution { window: local_window, dims: cd.clone() }, &[x, kernel])?;
    let mut expect = target.shard_dims(&out.dims);
    for (k, p) in plans.iter().enumerate() {
        match p {
            Some(DimPlan::Gather) => expect[cd.out_spatial[k]] = out.dims[cd.out_spatial[k]],
            Some(DimPlan::Halo { out_extra, .. }) => expect[cd.out_spatial[k]] += out_extra,
            None => {}
        }
    }
    if em.dims(y) != expect {
        return Err(PartitionError::Internal(format!("local convolution gives {:?}, expected {:?}", em.dims(y), expect)));
    }
    if !out_shifts.is_empty() {
        let sizes = target.shard_dims(&out.dims);
        let mut sz = expect.clone();
        for (d, _) in &out_shifts {
            sz[*d] = sizes[*d];
        }
        y = em.dynamic_slice(ctx, y, &out_shifts, sz)?;
    }
    let gathered: Vec<usize> =
        (0..ns).filter(|&k| matches!(plans[k], Some(DimPlan::Gather))).map(|k| cd.out_spatial[k]).collect();
    Ok(PVal { id: y, layout: target.unsplit(&gathered), full: out.clone() })
}
