//! Dot partitioning. Dims already split the same way on an operand and the
//! result are peeled off into device subgroups first; what remains is a
//! search over layouts of the iteration space (result dims then
//! contracting dims), costed in bytes moved.

use std::collections::BTreeMap;

use crate::ir::op::{DotDims, Op, ReduceKind};
use crate::ir::shape::Shape;
use crate::tensor::Scalar;

use super::context::{Em, Layout, PVal, PartitionContext};
use super::reshard::{reshard, reshard_cost};
use super::PartitionError;

/// Where each iteration-space dim lives on the operands.
struct Dims {
    out_rank: usize,
    nc: usize,
    /// Space index of every lhs dim.
    lhs: Vec<usize>,
    rhs: Vec<usize>,
}

impl Dims {
    fn new(dd: &DotDims, lhs_rank: usize, rhs_rank: usize) -> Dims {
        let nb = dd.lhs_batch.len();
        let lf = dd.lhs_free(lhs_rank);
        let rf = dd.rhs_free(rhs_rank);
        let out_rank = nb + lf.len() + rf.len();
        let mut lhs = vec![0; lhs_rank];
        let mut rhs = vec![0; rhs_rank];
        for (k, (&a, &b)) in dd.lhs_batch.iter().zip(&dd.rhs_batch).enumerate() {
            lhs[a] = k;
            rhs[b] = k;
        }
        for (j, &a) in lf.iter().enumerate() {
            lhs[a] = nb + j;
        }
        for (j, &b) in rf.iter().enumerate() {
            rhs[b] = nb + lf.len() + j;
        }
        for (k, (&a, &b)) in dd.lhs_contracting.iter().zip(&dd.rhs_contracting).enumerate() {
            lhs[a] = out_rank + k;
            rhs[b] = out_rank + k;
        }
        Dims { out_rank, nc: dd.lhs_contracting.len(), lhs, rhs }
    }

    /// Operand dim holding space dim `s`, if any.
    fn find(map: &[usize], s: usize) -> Option<usize> {
        map.iter().position(|&x| x == s)
    }
}

/// Tile counts and per-partition coords over some dims.
#[derive(Clone, PartialEq, Eq)]
struct Part {
    tiles: Vec<usize>,
    coords: Vec<Vec<usize>>,
}

impl Part {
    fn trivial(rank: usize, n: usize) -> Part {
        Part { tiles: vec![1; rank], coords: vec![vec![0; rank]; n] }
    }

    /// Dim `i` copied from `src[i]` of `l` (or unsplit).
    fn from_layout(l: &Layout, src: &[Option<usize>]) -> Part {
        Part {
            tiles: src.iter().map(|s| s.map_or(1, |d| l.tiles[d])).collect(),
            coords: l.coords.iter().map(|c| src.iter().map(|s| s.map_or(0, |d| c[d])).collect()).collect(),
        }
    }

    fn join(&self, other: &Part) -> Option<Layout> {
        let mut tiles = self.tiles.clone();
        tiles.extend(&other.tiles);
        let coords = self.coords.iter().zip(&other.coords).map(|(a, b)| a.iter().chain(b).copied().collect()).collect();
        Layout::from_coords(tiles, coords)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Reduction {
    None,
    AllReduce,
    ReduceScatter(usize),
}

struct Choice {
    space: Layout,
    reduction: Reduction,
    result: Layout,
    cost: f64,
}

fn local_bytes(l: &Layout, full: &Shape) -> f64 {
    l.shard_dims(&full.dims).iter().product::<usize>() as f64 * full.dtype.byte_size() as f64
}

/// Result layout after reduce-scattering dim `j` of the partial result.
fn scattered(partial: &Layout, space: &Layout, cdims: &[usize], j: usize, full: &Shape) -> Option<Layout> {
    let groups = space.groups_along(cdims);
    let k = groups[0].len();
    let s = full.dims[j].div_ceil(partial.tiles[j]);
    if !s.is_multiple_of(k) || full.dims[j].div_ceil(partial.tiles[j] * k) != s / k {
        return None;
    }
    let mut pos = vec![0; space.n()];
    for g in &groups {
        for (p, &l) in g.iter().enumerate() {
            pos[l as usize] = p;
        }
    }
    let mut tiles = partial.tiles.clone();
    tiles[j] *= k;
    let coords = partial
        .coords
        .iter()
        .enumerate()
        .map(|(l, c)| {
            let mut c = c.clone();
            c[j] = c[j] * k + pos[l];
            c
        })
        .collect();
    Layout::from_coords(tiles, coords)
}

fn search(l: &PVal, r: &PVal, dims: &Dims, target: &Layout, out: &Shape) -> Option<Choice> {
    let n = target.n();
    let rank = dims.out_rank;
    let out_src_l: Vec<Option<usize>> = (0..rank).map(|s| Dims::find(&dims.lhs, s)).collect();
    let out_src_r: Vec<Option<usize>> = (0..rank).map(|s| Dims::find(&dims.rhs, s)).collect();
    let from_l = Part::from_layout(&l.layout, &out_src_l);
    let from_r = Part::from_layout(&r.layout, &out_src_r);
    // Result dims from whichever operand has them, lhs first.
    let mixed = |first: &Part, second: &Part| Part {
        tiles: (0..rank).map(|s| if first.tiles[s] > 1 { first.tiles[s] } else { second.tiles[s] }).collect(),
        coords: (0..n)
            .map(|p| (0..rank).map(|s| if first.tiles[s] > 1 { first.coords[p][s] } else { second.coords[p][s] }).collect())
            .collect(),
    };
    let mut ts = vec![Part { tiles: target.tiles.clone(), coords: target.coords.clone() }];
    ts.push(mixed(&from_l, &from_r));
    ts.push(mixed(&from_r, &from_l));
    ts.push(from_l.clone());
    ts.push(from_r.clone());
    for j in 0..rank {
        if target.tiles[j] > 1 {
            let c = target.unsplit(&[j]);
            ts.push(Part { tiles: c.tiles, coords: c.coords });
        }
    }
    ts.push(Part::trivial(rank, n));
    let mut seen = Vec::new();
    ts.retain(|t| {
        if seen.contains(t) {
            false
        } else {
            seen.push(t.clone());
            true
        }
    });
    let csrc = |map: &[usize]| -> Vec<Option<usize>> { (0..dims.nc).map(|k| Dims::find(map, rank + k)).collect() };
    let mut cs = vec![Part::from_layout(&l.layout, &csrc(&dims.lhs)), Part::from_layout(&r.layout, &csrc(&dims.rhs))];
    cs.push(Part::trivial(dims.nc, n));
    cs.dedup();
    let cdims: Vec<usize> = (rank..rank + dims.nc).collect();
    let lsrc: Vec<Option<usize>> = dims.lhs.iter().map(|&s| Some(s)).collect();
    let rsrc: Vec<Option<usize>> = dims.rhs.iter().map(|&s| Some(s)).collect();
    let osrc: Vec<Option<usize>> = (0..rank).map(Some).collect();
    let mut best: Option<Choice> = None;
    for t in &ts {
        for c in &cs {
            let Some(space) = t.join(c) else { continue };
            let base = reshard_cost(&l.layout, &space.project(&lsrc), &l.full)
                + reshard_cost(&r.layout, &space.project(&rsrc), &r.full);
            let partial = space.project(&osrc);
            let k: usize = c.tiles.iter().product();
            let mut options = Vec::new();
            if k == 1 {
                options.push((Reduction::None, partial.clone(), 0.0));
            } else {
                let bytes = local_bytes(&partial, out);
                let kf = k as f64;
                options.push((Reduction::AllReduce, partial.clone(), 2.0 * (kf - 1.0) / kf * bytes));
                for j in 0..rank {
                    if let Some(res) = scattered(&partial, &space, &cdims, j, out) {
                        options.push((Reduction::ReduceScatter(j), res, (kf - 1.0) / kf * bytes));
                    }
                }
            }
            for (reduction, result, rc) in options {
                let cost = base + rc + reshard_cost(&result, target, out);
                if best.as_ref().is_none_or(|b| cost < b.cost) {
                    best = Some(Choice { space: space.clone(), reduction, result, cost });
                }
            }
        }
    }
    best
}

/// Class of result dims shared with operands: batch dims appear on both
/// operands, free dims on one.
struct Class {
    out: usize,
    lhs: Option<usize>,
    rhs: Option<usize>,
}

fn same_split(a: &Layout, da: usize, b: &Layout, db: usize) -> bool {
    a.tiles[da] == b.tiles[db] && a.coords.iter().zip(&b.coords).all(|(x, y)| x[da] == y[db])
}

fn classes(dims: &Dims) -> Vec<Class> {
    (0..dims.out_rank)
        .map(|s| Class { out: s, lhs: Dims::find(&dims.lhs, s), rhs: Dims::find(&dims.rhs, s) })
        .collect()
}

fn groupable(c: &Class, l: &PVal, r: &PVal, target: &Layout) -> bool {
    target.tiles[c.out] > 1
        && c.lhs.is_none_or(|d| same_split(&l.layout, d, target, c.out))
        && c.rhs.is_none_or(|d| same_split(&r.layout, d, target, c.out))
}

/// Layout over the remaining dims for one subgroup, and the full shape seen
/// inside it.
fn residual(l: &PVal, dims: &[usize], members: &[u32]) -> Option<(Layout, Shape)> {
    let mut tiles = l.layout.tiles.clone();
    let mut full = l.full.clone();
    for &d in dims {
        full.dims[d] = full.dims[d].div_ceil(tiles[d]);
        tiles[d] = 1;
    }
    let coords = members
        .iter()
        .map(|&m| {
            let mut c = l.layout.coords[m as usize].clone();
            for &d in dims {
                c[d] = 0;
            }
            c
        })
        .collect();
    Some((Layout::from_coords(tiles, coords)?, full))
}

fn residual_coords(l: &Layout, dims: &[usize], m: usize) -> Vec<usize> {
    let mut c = l.coords[m].clone();
    for &d in dims {
        c[d] = 0;
    }
    c
}

struct Grouping {
    groups: Vec<Vec<u32>>,
    lhs: (Layout, Shape),
    rhs: (Layout, Shape),
    out: (Layout, Shape),
}

fn try_group(chosen: &[&Class], l: &PVal, r: &PVal, target: &Layout, out: &Shape) -> Option<Grouping> {
    let od: Vec<usize> = chosen.iter().map(|c| c.out).collect();
    let ld: Vec<usize> = chosen.iter().filter_map(|c| c.lhs).collect();
    let rd: Vec<usize> = chosen.iter().filter_map(|c| c.rhs).collect();
    let mut by_key: BTreeMap<Vec<usize>, Vec<u32>> = BTreeMap::new();
    for (p, c) in target.coords.iter().enumerate() {
        by_key.entry(od.iter().map(|&d| c[d]).collect()).or_default().push(p as u32);
    }
    type Key = (Vec<usize>, Vec<usize>, Vec<usize>);
    let key = |p: u32| -> Key {
        let p = p as usize;
        (residual_coords(&l.layout, &ld, p), residual_coords(&r.layout, &rd, p), residual_coords(target, &od, p))
    };
    let mut groups: Vec<Vec<u32>> = by_key.into_values().collect();
    for g in groups.iter_mut() {
        g.sort_by_key(|&p| (key(p), p));
    }
    let shape0: Vec<Key> = groups[0].iter().map(|&p| key(p)).collect();
    if groups.iter().any(|g| g.iter().map(|&p| key(p)).collect::<Vec<_>>() != shape0) {
        return None;
    }
    let tp = PVal { id: l.id, layout: target.clone(), full: out.clone() };
    Some(Grouping {
        lhs: residual(l, &ld, &groups[0])?,
        rhs: residual(r, &rd, &groups[0])?,
        out: residual(&tp, &od, &groups[0])?,
        groups,
    })
}

/// Partitions `l . r` and returns the result laid out as `target`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn partition_dot(
    em: &mut Em,
    ctx: &PartitionContext,
    l: &PVal,
    r: &PVal,
    dd: &DotDims,
    target: &Layout,
    out: &Shape,
) -> Result<PVal, PartitionError> {
    let dims = Dims::new(dd, l.full.rank(), r.full.rank());
    let cls = classes(&dims);
    let ok: Vec<&Class> = cls.iter().filter(|c| groupable(c, l, r, target)).collect();
    let mut attempts: Vec<Vec<&Class>> = Vec::new();
    if ok.len() > 1 {
        attempts.push(ok.clone());
    }
    attempts.extend(ok.iter().map(|c| vec![*c]));
    for chosen in attempts {
        if let Some(g) = try_group(&chosen, l, r, target, out) {
            let child = ctx.grouped(&g.groups);
            let cl = PVal { id: l.id, layout: g.lhs.0, full: g.lhs.1 };
            let cr = PVal { id: r.id, layout: g.rhs.0, full: g.rhs.1 };
            let res = partition_dot(em, &child, &cl, &cr, dd, &g.out.0, &g.out.1)?;
            return Ok(PVal { id: res.id, layout: target.clone(), full: out.clone() });
        }
    }
    let choice = search(l, r, &dims, target, out).ok_or_else(|| PartitionError::Internal("no dot layout".into()))?;
    let lsrc: Vec<Option<usize>> = dims.lhs.iter().map(|&s| Some(s)).collect();
    let rsrc: Vec<Option<usize>> = dims.rhs.iter().map(|&s| Some(s)).collect();
    let lv = reshard(em, ctx, l, &choice.space.project(&lsrc))?;
    let rv = reshard(em, ctx, r, &choice.space.project(&rsrc))?;
    let zero = Scalar::zero(out.dtype);
    let la = em.mask_uneven(ctx, &lv, &dd.lhs_contracting, zero)?;
    let ra = em.mask_uneven(ctx, &rv, &dd.rhs_contracting, zero)?;
    let mut id = em.op(Op::Dot(dd.clone()), &[la, ra])?;
    let cdims: Vec<usize> = (dims.out_rank..dims.out_rank + dims.nc).collect();
    match choice.reduction {
        Reduction::None => {}
        Reduction::AllReduce => id = em.all_reduce(ctx, id, ReduceKind::Sum, &choice.space.groups_along(&cdims))?,
        Reduction::ReduceScatter(j) => {
            id = em.reduce_scatter(ctx, id, ReduceKind::Sum, j, &choice.space.groups_along(&cdims))?
        }
    }
    reshard(em, ctx, &PVal { id, layout: choice.result, full: out.clone() }, target)
}
