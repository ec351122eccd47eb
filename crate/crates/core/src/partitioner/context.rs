//! Logical partitions, per-device tile layouts and the instruction emitter
//! shared by every partitioning strategy.

use std::collections::BTreeMap;

use crate::ir::graph::{GraphBuilder, InstrId};
use crate::ir::op::{CompareDir, Op, PadDim, ReduceKind, SliceDim};
use crate::ir::shape::{DType, Shape};
use crate::sharding::{DeviceId, Sharding};
use crate::tensor::{Buffer, Scalar, Tensor};

use super::PartitionError;

/// Maps logical partitions onto physical devices. `groups[k][l]` is the
/// device playing logical partition `l` inside group `k`; the root context
/// has a single group covering every device.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionContext {
    groups: Vec<Vec<DeviceId>>,
}

impl PartitionContext {
    pub fn root(num_devices: usize) -> PartitionContext {
        PartitionContext { groups: vec![(0..num_devices as DeviceId).collect()] }
    }

    pub fn num_logical(&self) -> usize {
        self.groups[0].len()
    }

    pub fn num_devices(&self) -> usize {
        self.groups.len() * self.num_logical()
    }

    pub fn groups(&self) -> &[Vec<DeviceId>] {
        &self.groups
    }

    /// Rewrites subgroups of logical ids into physical device groups, one
    /// copy per context group.
    pub fn physical_groups(&self, logical: &[Vec<u32>]) -> Vec<Vec<DeviceId>> {
        let mut out = Vec::with_capacity(self.groups.len() * logical.len());
        for g in &self.groups {
            for l in logical {
                out.push(l.iter().map(|&x| g[x as usize]).collect());
            }
        }
        out
    }

    pub fn physical_pairs(&self, logical: &[(u32, u32)]) -> Vec<(DeviceId, DeviceId)> {
        let mut out = Vec::with_capacity(self.groups.len() * logical.len());
        for g in &self.groups {
            for &(s, t) in logical {
                out.push((g[s as usize], g[t as usize]));
            }
        }
        out
    }

    /// Nested context: each of `subgroups` (logical ids here) becomes one
    /// group whose members are the new logical partitions.
    pub fn grouped(&self, subgroups: &[Vec<u32>]) -> PartitionContext {
        let mut groups = Vec::with_capacity(self.groups.len() * subgroups.len());
        for g in &self.groups {
            for s in subgroups {
                groups.push(s.iter().map(|&x| g[x as usize]).collect());
            }
        }
        PartitionContext { groups }
    }

    /// Logical id played by each physical device.
    pub fn logical_ids(&self) -> Vec<u32> {
        let mut out = vec![0; self.num_devices()];
        for g in &self.groups {
            for (l, &p) in g.iter().enumerate() {
                out[p as usize] = l as u32;
            }
        }
        out
    }
}

/// A sharding unpacked per logical partition: tile counts, each
/// partition's tile coordinates and its rank among the tile's replicas.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Layout {
    pub tiles: Vec<usize>,
    pub coords: Vec<Vec<usize>>,
    pub replica: Vec<usize>,
}

impl Layout {
    pub fn replicated(rank: usize, n: usize) -> Layout {
        Layout { tiles: vec![1; rank], coords: vec![vec![0; rank]; n], replica: (0..n).collect() }
    }

    pub fn of(s: &Sharding, rank: usize, n: usize) -> Result<Layout, String> {
        if s.is_replicated() {
            return Ok(Layout::replicated(rank, n));
        }
        s.check_rank(rank).map_err(|e| e.to_string())?;
        let all: Vec<DeviceId> = (0..n as DeviceId).collect();
        if s.device_set().as_ref() != Some(&all) {
            return Err(format!("sharding {s} does not cover devices 0..{n}"));
        }
        let map = s.coord_map();
        Ok(Layout {
            tiles: s.tile_counts(rank),
            coords: map.values().map(|(c, _)| c.clone()).collect(),
            replica: map.values().map(|(_, r)| *r).collect(),
        })
    }

    /// Layout with explicit coordinates; `None` unless every tile is held by
    /// equally many partitions.
    pub fn from_coords(tiles: Vec<usize>, coords: Vec<Vec<usize>>) -> Option<Layout> {
        let entries: Vec<(DeviceId, Vec<usize>)> = coords.iter().enumerate().map(|(d, c)| (d as DeviceId, c.clone())).collect();
        let s = Sharding::from_coords(&tiles, &entries).ok()?;
        let mut l = Layout::of(&s, tiles.len(), coords.len()).ok()?;
        l.tiles = tiles;
        Some(l)
    }

    pub fn n(&self) -> usize {
        self.coords.len()
    }

    pub fn rank(&self) -> usize {
        self.tiles.len()
    }

    #[cfg(test)]
    pub fn sharding(&self) -> Sharding {
        let mut order: Vec<usize> = (0..self.n()).collect();
        order.sort_by_key(|&d| (self.replica[d], d));
        let entries: Vec<(DeviceId, Vec<usize>)> = order.iter().map(|&d| (d as DeviceId, self.coords[d].clone())).collect();
        Sharding::from_coords(&self.tiles, &entries).expect("layouts are always valid")
    }

    /// Same tile on every partition.
    pub fn same(&self, other: &Layout) -> bool {
        self.tiles == other.tiles && self.coords == other.coords
    }

    pub fn total_tiles(&self) -> usize {
        self.tiles.iter().product()
    }

    /// Dim `d` laid out identically in both.
    pub fn dim_matches(&self, other: &Layout, d: usize) -> bool {
        self.tiles[d] == other.tiles[d] && self.coords.iter().zip(&other.coords).all(|(a, b)| a[d] == b[d])
    }

    /// Result dim `i` takes this layout's dim `src[i]`, or stays unsplit.
    pub fn project(&self, src: &[Option<usize>]) -> Layout {
        let tiles = src.iter().map(|s| s.map_or(1, |d| self.tiles[d])).collect();
        let coords = self.coords.iter().map(|c| src.iter().map(|s| s.map_or(0, |d| c[d])).collect()).collect();
        Layout::from_coords(tiles, coords).expect("projections stay valid")
    }

    pub fn unsplit(&self, dims: &[usize]) -> Layout {
        let src: Vec<Option<usize>> = (0..self.rank()).map(|d| if dims.contains(&d) { None } else { Some(d) }).collect();
        self.project(&src)
    }

    pub fn shard_dims(&self, full: &[usize]) -> Vec<usize> {
        full.iter().zip(&self.tiles).map(|(&n, &t)| n.div_ceil(t)).collect()
    }

    /// Partitions sharing every coordinate outside `dims` and their replica
    /// rank; each group is ordered by the coordinates on `dims`.
    pub fn groups_along(&self, dims: &[usize]) -> Vec<Vec<u32>> {
        let mut by_key: BTreeMap<(Vec<usize>, usize), Vec<(Vec<usize>, u32)>> = BTreeMap::new();
        for (l, c) in self.coords.iter().enumerate() {
            let mut rest = c.clone();
            let along: Vec<usize> = dims.iter().map(|&d| c[d]).collect();
            for &d in dims {
                rest[d] = 0;
            }
            by_key.entry((rest, self.replica[l])).or_default().push((along, l as u32));
        }
        by_key
            .into_values()
            .map(|mut v| {
                v.sort();
                v.into_iter().map(|(_, l)| l).collect()
            })
            .collect()
    }

    /// The partition whose coordinate on `dim` is `delta` away, with every
    /// other coordinate and the replica rank equal.
    pub fn neighbor(&self, l: usize, dim: usize, delta: i64, wrap: bool) -> Option<usize> {
        let t = self.tiles[dim] as i64;
        let mut c = self.coords[l][dim] as i64 + delta;
        if wrap {
            c = c.rem_euclid(t);
        } else if !(0..t).contains(&c) {
            return None;
        }
        let mut want = self.coords[l].clone();
        want[dim] = c as usize;
        (0..self.n()).find(|&m| self.coords[m] == want && self.replica[m] == self.replica[l])
    }
}

/// A partitioned value: its local instruction, layout and the full shape it
/// stands for in the current context.
#[derive(Clone, Debug)]
pub(crate) struct PVal {
    pub id: InstrId,
    pub layout: Layout,
    pub full: Shape,
}

/// Appends instructions to the per-device program.
pub(crate) struct Em {
    pub b: GraphBuilder,
    pid: Option<InstrId>,
    counter: usize,
}

fn internal(e: impl ToString) -> PartitionError {
    PartitionError::Internal(e.to_string())
}

impl Em {
    pub fn new(name: &str) -> Em {
        Em { b: GraphBuilder::new(name), pid: None, counter: 0 }
    }

    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn op(&mut self, op: Op, args: &[InstrId]) -> Result<InstrId, PartitionError> {
        self.counter += 1;
        let name = format!("{}.s{}", op.name(), self.counter);
        self.b.add_named(Some(&name), op, args).map_err(internal)
    }

    pub fn named(&mut self, name: &str, op: Op, args: &[InstrId]) -> Result<InstrId, PartitionError> {
        self.b.add_named(Some(name), op, args).map_err(internal)
    }

    pub fn dims(&self, id: InstrId) -> Vec<usize> {
        self.b.shape(id).dims.clone()
    }

    pub fn scalar(&mut self, s: Scalar) -> Result<InstrId, PartitionError> {
        self.op(Op::Constant { literal: Tensor::scalar(s) }, &[])
    }

    pub fn partition_id(&mut self) -> Result<InstrId, PartitionError> {
        if let Some(p) = self.pid {
            return Ok(p);
        }
        let p = self.op(Op::PartitionId, &[])?;
        self.pid = Some(p);
        Ok(p)
    }

    /// Scalar holding `per_logical[l]` on the device playing partition `l`.
    /// Emitted as a constant table indexed by PartitionId.
    pub fn table(&mut self, ctx: &PartitionContext, per_logical: &[Scalar]) -> Result<InstrId, PartitionError> {
        let dtype = per_logical[0].dtype();
        if per_logical.iter().all(|v| *v == per_logical[0]) {
            return self.scalar(per_logical[0]);
        }
        let values: Vec<Scalar> = ctx.logical_ids().iter().map(|&l| per_logical[l as usize]).collect();
        let n = values.len();
        let table = self.op(Op::Constant { literal: Tensor::new(Shape::new(dtype, [n]), Buffer::from_scalars(dtype, &values)) }, &[])?;
        let pid = self.partition_id()?;
        let one = self.op(Op::DynamicSlice { sizes: vec![1] }, &[table, pid])?;
        self.op(Op::Reshape { out_dims: vec![] }, &[one])
    }

    pub fn int_table(&mut self, ctx: &PartitionContext, per_logical: &[i64]) -> Result<InstrId, PartitionError> {
        let v: Vec<Scalar> = per_logical.iter().map(|&x| Scalar::S32(x as i32)).collect();
        self.table(ctx, &v)
    }

    pub fn broadcast_scalar(&mut self, s: InstrId, dims: &[usize]) -> Result<InstrId, PartitionError> {
        if dims.is_empty() {
            return Ok(s);
        }
        self.op(Op::Broadcast { dims: vec![], out_dims: dims.to_vec() }, &[s])
    }

    pub fn slice_dim(&mut self, x: InstrId, dim: usize, start: usize, limit: usize) -> Result<InstrId, PartitionError> {
        let dims = self.dims(x);
        if start == 0 && limit == dims[dim] {
            return Ok(x);
        }
        let cfg = dims
            .iter()
            .enumerate()
            .map(|(d, &n)| if d == dim { SliceDim { start, limit, stride: 1 } } else { SliceDim::full(n) })
            .collect();
        self.op(Op::Slice { dims: cfg }, &[x])
    }

    pub fn pad_dim(&mut self, x: InstrId, dim: usize, low: usize, high: usize, fill: InstrId) -> Result<InstrId, PartitionError> {
        if low == 0 && high == 0 {
            return Ok(x);
        }
        let rank = self.dims(x).len();
        let cfg = (0..rank)
            .map(|d| if d == dim { PadDim { low: low as i64, high: high as i64, interior: 0 } } else { PadDim::NONE })
            .collect();
        self.op(Op::Pad { config: cfg }, &[x, fill])
    }

    /// Concatenation that skips empty parts.
    pub fn concat(&mut self, parts: &[InstrId], dim: usize) -> Result<InstrId, PartitionError> {
        let keep: Vec<InstrId> = parts.iter().copied().filter(|&p| self.dims(p)[dim] > 0).collect();
        match keep.len() {
            0 => Ok(parts[0]),
            1 => Ok(keep[0]),
            _ => self.op(Op::Concat { dim }, &keep),
        }
    }

    /// DynamicSlice with per-partition offsets on the listed dims and zero
    /// elsewhere.
    pub fn dynamic_slice(
        &mut self,
        ctx: &PartitionContext,
        x: InstrId,
        offsets: &[(usize, Vec<i64>)],
        sizes: Vec<usize>,
    ) -> Result<InstrId, PartitionError> {
        let dims = self.dims(x);
        let trivial = offsets.iter().all(|(_, o)| o.iter().all(|&v| v == 0));
        if trivial && sizes == dims {
            return Ok(x);
        }
        let mut idx = Vec::with_capacity(dims.len());
        let zero = if offsets.len() < dims.len() { Some(self.scalar(Scalar::S32(0))?) } else { None };
        for d in 0..dims.len() {
            match offsets.iter().find(|(k, _)| *k == d) {
                Some((_, o)) => idx.push(self.int_table(ctx, o)?),
                None => idx.push(zero.expect("zero index emitted")),
            }
        }
        let mut args = vec![x];
        args.extend(idx);
        self.op(Op::DynamicSlice { sizes }, &args)
    }

    pub fn all_gather(&mut self, ctx: &PartitionContext, x: InstrId, dim: usize, groups: &[Vec<u32>]) -> Result<InstrId, PartitionError> {
        if groups[0].len() == 1 {
            return Ok(x);
        }
        self.op(Op::AllGather { dim, groups: ctx.physical_groups(groups) }, &[x])
    }

    pub fn all_reduce(&mut self, ctx: &PartitionContext, x: InstrId, kind: ReduceKind, groups: &[Vec<u32>]) -> Result<InstrId, PartitionError> {
        if groups[0].len() == 1 {
            return Ok(x);
        }
        self.op(Op::AllReduce { kind, groups: ctx.physical_groups(groups) }, &[x])
    }

    pub fn reduce_scatter(
        &mut self,
        ctx: &PartitionContext,
        x: InstrId,
        kind: ReduceKind,
        dim: usize,
        groups: &[Vec<u32>],
    ) -> Result<InstrId, PartitionError> {
        self.op(Op::ReduceScatter { kind, dim, groups: ctx.physical_groups(groups) }, &[x])
    }

    pub fn all_to_all(
        &mut self,
        ctx: &PartitionContext,
        x: InstrId,
        split_dim: usize,
        concat_dim: usize,
        groups: &[Vec<u32>],
    ) -> Result<InstrId, PartitionError> {
        self.op(Op::AllToAll { split_dim, concat_dim, groups: ctx.physical_groups(groups) }, &[x])
    }

    /// Sends `x` along the logical `(source, target)` pairs; partitions that
    /// receive nothing hold zeros.
    pub fn permute(&mut self, ctx: &PartitionContext, x: InstrId, pairs: &[(u32, u32)]) -> Result<InstrId, PartitionError> {
        self.op(Op::CollectivePermute { pairs: ctx.physical_pairs(pairs) }, &[x])
    }

    /// Keeps `x` where `start[l] + j` lies in `[0, n)` for local index `j`
    /// along `dim`, and `fill` elsewhere.
    pub fn mask_outside(
        &mut self,
        ctx: &PartitionContext,
        x: InstrId,
        dim: usize,
        start: &[i64],
        n: i64,
        fill: InstrId,
    ) -> Result<InstrId, PartitionError> {
        let dims = self.dims(x);
        let len = dims[dim] as i64;
        let need_low = start.iter().any(|&s| s < 0);
        let need_high = start.iter().any(|&s| s + len > n);
        if !need_low && !need_high {
            return Ok(x);
        }
        let iota = self.op(Op::Iota { dimension: dim, shape: Shape::new(DType::S32, dims.clone()) }, &[])?;
        let fill_b = self.broadcast_scalar(fill, &dims)?;
        let mut cur = x;
        if need_low {
            let neg: Vec<i64> = start.iter().map(|s| -s).collect();
            let lim = self.int_table(ctx, &neg)?;
            let lim = self.broadcast_scalar(lim, &dims)?;
            let ok = self.op(Op::Compare(CompareDir::Ge), &[iota, lim])?;
            cur = self.op(Op::Select, &[ok, cur, fill_b])?;
        }
        if need_high {
            let rest: Vec<i64> = start.iter().map(|s| n - s).collect();
            let lim = self.int_table(ctx, &rest)?;
            let lim = self.broadcast_scalar(lim, &dims)?;
            let ok = self.op(Op::Compare(CompareDir::Lt), &[iota, lim])?;
            cur = self.op(Op::Select, &[ok, cur, fill_b])?;
        }
        Ok(cur)
    }

    /// Replaces the padding past the end of uneven shards along `dims` with
    /// `fill`.
    pub fn mask_uneven(
        &mut self,
        ctx: &PartitionContext,
        v: &PVal,
        dims: &[usize],
        fill: Scalar,
    ) -> Result<InstrId, PartitionError> {
        let mut cur = v.id;
        let mut fill_id = None;
        for &d in dims {
            let t = v.layout.tiles[d];
            let n = v.full.dims[d];
            if t == 1 || n.is_multiple_of(t) {
                continue;
            }
            let s = n.div_ceil(t);
            let start: Vec<i64> = v.layout.coords.iter().map(|c| (c[d] * s) as i64).collect();
            let f = match fill_id {
                Some(f) => f,
                None => {
                    let f = self.scalar(fill)?;
                    fill_id = Some(f);
                    f
                }
            };
            cur = self.mask_outside(ctx, cur, d, &start, n as i64, f)?;
        }
        Ok(cur)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_context_rewrites_subgroups() {
        let root = PartitionContext::root(4);
        let child = root.grouped(&[vec![0, 1], vec![2, 3]]);
        assert_eq!(child.num_logical(), 2);
        assert_eq!(child.physical_groups(&[vec![0, 1]]), vec![vec![0, 1], vec![2, 3]]);
        let by_col = root.grouped(&[vec![0, 2], vec![1, 3]]);
        assert_eq!(by_col.physical_groups(&[vec![0, 1]]), vec![vec![0, 2], vec![1, 3]]);
        assert_eq!(by_col.logical_ids(), vec![0, 0, 1, 1]);
    }

    #[test]
    fn layout_round_trip() {
        let s: Sharding = "devices=[2,1,2]0,2,1,3 last_tile_dim_replicate".parse().unwrap();
        let l = Layout::of(&s, 2, 4).unwrap();
        assert_eq!(l.coords, vec![vec![0, 0], vec![1, 0], vec![0, 0], vec![1, 0]]);
        assert!(l.sharding().same_layout(&s, 2));
        assert_eq!(l.groups_along(&[0]), vec![vec![0, 1], vec![2, 3]]);
        assert_eq!(l.neighbor(0, 0, 1, false), Some(1));
        assert_eq!(l.neighbor(1, 0, 1, false), None);
        assert_eq!(l.neighbor(1, 0, 1, true), Some(0));
    }
}
