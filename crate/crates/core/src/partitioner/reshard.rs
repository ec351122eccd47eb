//! Moving a value between layouts. Tried in order: nothing to do, one
//! AllToAll swapping a split dim, one CollectivePermute when only device
//! order differs, else AllGather the mismatched dims and DynamicSlice the
//! missing ones.

use crate::ir::shape::Shape;
use crate::tensor::Scalar;

use super::context::{Em, Layout, PVal, PartitionContext};
use super::PartitionError;

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) enum Plan {
    Noop,
    /// `from_dim` becomes whole, `to_dim` becomes split with the same coords.
    AllToAll { from_dim: usize, to_dim: usize },
    Permute,
    Fallback { gather: Vec<usize>, slice: Vec<usize> },
}

pub(crate) fn plan(from: &Layout, to: &Layout) -> Plan {
    if from.same(to) {
        return Plan::Noop;
    }
    let rank = from.rank();
    let differ: Vec<usize> = (0..rank).filter(|&d| from.tiles[d] != to.tiles[d]).collect();
    if let [a, b] = differ[..] {
        for (d1, d2) in [(a, b), (b, a)] {
            let t = from.tiles[d1];
            if t > 1 && to.tiles[d1] == 1 && from.tiles[d2] == 1 && to.tiles[d2] == t {
                let ok = (0..from.n()).all(|l| {
                    let (f, g) = (&from.coords[l], &to.coords[l]);
                    g[d2] == f[d1] && (0..rank).all(|k| k == d1 || k == d2 || f[k] == g[k])
                });
                if ok {
                    return Plan::AllToAll { from_dim: d1, to_dim: d2 };
                }
            }
        }
    }
    if differ.is_empty() && from.total_tiles() > 1 {
        return Plan::Permute;
    }
    let gather: Vec<usize> = (0..rank).filter(|&d| from.tiles[d] > 1 && !from.dim_matches(to, d)).collect();
    let slice: Vec<usize> = (0..rank).filter(|&d| to.tiles[d] > 1 && (from.tiles[d] == 1 || gather.contains(&d))).collect();
    Plan::Fallback { gather, slice }
}

fn elems(d: &[usize]) -> f64 {
    d.iter().product::<usize>() as f64
}

/// Bytes each device sends or receives under `plan`.
pub(crate) fn cost(p: &Plan, from: &Layout, to: &Layout, full: &Shape) -> f64 {
    let bytes = full.dtype.byte_size() as f64;
    let local = from.shard_dims(&full.dims);
    match p {
        Plan::Noop => 0.0,
        Plan::AllToAll { from_dim, to_dim } => {
            let g = from.tiles[*from_dim] as f64;
            let mut d = local.clone();
            d[*to_dim] = to.shard_dims(&full.dims)[*to_dim] * from.tiles[*from_dim];
            (g - 1.0) / g * elems(&d) * bytes
        }
        Plan::Permute => elems(&local) * bytes,
        Plan::Fallback { gather, .. } => {
            let mut d = local;
            let mut total = 0.0;
            for &k in gather {
                let before = elems(&d);
                d[k] = full.dims[k];
                total += (elems(&d) - before).max(0.0);
            }
            total * bytes
        }
    }
}

pub(crate) fn reshard_cost(from: &Layout, to: &Layout, full: &Shape) -> f64 {
    cost(&plan(from, to), from, to, full)
}

/// Source/target pairs moving each tile to where `to` wants it. Partitions
/// already holding their target tile are left out and returned separately.
fn permute_pairs(from: &Layout, to: &Layout) -> (Vec<(u32, u32)>, Vec<bool>) {
    let n = from.n();
    let fixed: Vec<bool> = (0..n).map(|l| from.coords[l] == to.coords[l]).collect();
    let mut used = fixed.clone();
    let mut pairs = Vec::new();
    for v in 0..n {
        if fixed[v] {
            continue;
        }
        let u = (0..n).find(|&u| !used[u] && from.coords[u] == to.coords[v]).expect("every tile has a holder");
        used[u] = true;
        pairs.push((u as u32, v as u32));
    }
    (pairs, fixed)
}

/// Emits the instructions turning `v` into a value laid out as `to`.
pub(crate) fn reshard(em: &mut Em, ctx: &PartitionContext, v: &PVal, to: &Layout) -> Result<PVal, PartitionError> {
    let from = &v.layout;
    let full = &v.full.dims;
    let p = plan(from, to);
    let id = match &p {
        Plan::Noop => v.id,
        Plan::AllToAll { from_dim, to_dim } => {
            let (d1, d2) = (*from_dim, *to_dim);
            let t = from.tiles[d1];
            let s2 = full[d2].div_ceil(t);
            let zero = em.scalar(Scalar::zero(v.full.dtype))?;
            let x = em.pad_dim(v.id, d2, 0, t * s2 - full[d2], zero)?;
            let groups = from.groups_along(&[d1]);
            let x = em.all_to_all(ctx, x, d2, d1, &groups)?;
            em.slice_dim(x, d1, 0, full[d1])?
        }
        Plan::Permute => {
            let (pairs, fixed) = permute_pairs(from, to);
            let moved = em.permute(ctx, v.id, &pairs)?;
            if fixed.iter().any(|&f| f) {
                let mask: Vec<Scalar> = fixed.iter().map(|&f| Scalar::Pred(f)).collect();
                let m = em.table(ctx, &mask)?;
                let dims = em.dims(v.id);
                let m = em.broadcast_scalar(m, &dims)?;
                em.op(crate::ir::op::Op::Select, &[m, v.id, moved])?
            } else {
                moved
            }
        }
        Plan::Fallback { gather, slice } => {
            let mut cur = from.clone();
            let mut x = v.id;
            for &d in gather {
                let groups = cur.groups_along(&[d]);
                x = em.all_gather(ctx, x, d, &groups)?;
                x = em.slice_dim(x, d, 0, full[d])?;
                cur = cur.unsplit(&[d]);
            }
            if !slice.is_empty() {
                let zero = em.scalar(Scalar::zero(v.full.dtype))?;
                let mut sizes = em.dims(x);
                let mut offsets = Vec::new();
                for &d in slice {
                    let s = full[d].div_ceil(to.tiles[d]);
                    x = em.pad_dim(x, d, 0, s * to.tiles[d] - full[d], zero)?;
                    sizes[d] = s;
                    offsets.push((d, to.coords.iter().map(|c| (c[d] * s) as i64).collect()));
                }
                x = em.dynamic_slice(ctx, x, &offsets, sizes)?;
            }
            x
        }
    };
    Ok(PVal { id, layout: to.clone(), full: v.full.clone() })
}
