//! Neighbor exchange for ops whose per-partition input window is not the
//! partition's own shard.

use serde::Serialize;

use crate::ir::graph::InstrId;

use super::context::{Em, Layout, PartitionContext};
use super::PartitionError;

/// Input window of each partition along one dim, in the coordinates of the
/// sharded operand: partition `i` needs `[start(i), start(i) + length)` with
/// `start(i) = floor((a*i + b) / c)`, and owns `[i*shard, (i+1)*shard)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct HaloSpec {
    pub a: i64,
    pub b: i64,
    pub c: i64,
    pub length: usize,
    pub shard: usize,
    pub partitions: usize,
    /// Positions outside `[0, size)` must be overwritten after the exchange.
    pub mask: bool,
}

impl HaloSpec {
    pub fn linear(a: i64, b: i64, length: usize, shard: usize, partitions: usize) -> HaloSpec {
        HaloSpec { a, b, c: 1, length, shard, partitions, mask: false }
    }

    pub fn start(&self, i: usize) -> i64 {
        (self.a * i as i64 + self.b).div_euclid(self.c)
    }

    /// Elements partition `i` needs from its left neighbor (negative when
    /// its window starts inside its own shard or further right).
    pub fn left(&self, i: usize) -> i64 {
        (i * self.shard) as i64 - self.start(i)
    }

    pub fn right(&self, i: usize) -> i64 {
        self.start(i) + self.length as i64 - ((i + 1) * self.shard) as i64
    }

    /// `(a, b)` with `left(i) = a*i + b`, when the window start is linear.
    pub fn left_coeffs(&self) -> Option<(i64, i64)> {
        (self.c == 1).then(|| (self.shard as i64 - self.a, -self.b))
    }

    pub fn right_coeffs(&self) -> Option<(i64, i64)> {
        (self.c == 1).then(|| (self.a - self.shard as i64, self.b + self.length as i64 - self.shard as i64))
    }

    pub fn max_left(&self) -> usize {
        (0..self.partitions).map(|i| self.left(i)).max().unwrap_or(0).max(0) as usize
    }

    pub fn max_right(&self) -> usize {
        (0..self.partitions).map(|i| self.right(i)).max().unwrap_or(0).max(0) as usize
    }

    /// Both halos come from direct neighbors only.
    pub fn fits(&self) -> bool {
        self.max_left() <= self.shard && self.max_right() <= self.shard
    }

    pub fn is_noop(&self) -> bool {
        self.length == self.shard && (0..self.partitions).all(|i| self.left(i) == 0)
    }
}

/// Rebuilds the local value along `dim` so partition `i` holds its window
/// from `spec`. `layout` gives each partition's tile index on `dim`; with
/// `wrap` the first and last partitions are neighbors. Returns the window
/// start of each logical partition for later masking.
pub(crate) fn halo_exchange(
    em: &mut Em,
    ctx: &PartitionContext,
    x: InstrId,
    layout: &Layout,
    dim: usize,
    spec: &HaloSpec,
    wrap: bool,
) -> Result<(InstrId, Vec<i64>), PartitionError> {
    let s = spec.shard;
    let starts: Vec<i64> = layout.coords.iter().map(|c| spec.start(c[dim])).collect();
    if spec.is_noop() {
        return Ok((x, starts));
    }
    let (ml, mr) = (spec.max_left(), spec.max_right());
    if !spec.fits() {
        return Err(PartitionError::HaloTooLarge { halo: ml.max(mr), shard: s });
    }
    debug_assert_eq!(em.dims(x)[dim], s);
    let n = layout.n();
    let mut parts = Vec::with_capacity(3);
    if ml > 0 {
        let tail = em.slice_dim(x, dim, s - ml, s)?;
        let pairs: Vec<(u32, u32)> =
            (0..n).filter_map(|l| layout.neighbor(l, dim, 1, wrap).map(|r| (l as u32, r as u32))).collect();
        parts.push(em.permute(ctx, tail, &pairs)?);
    }
    parts.push(x);
    if mr > 0 {
        let head = em.slice_dim(x, dim, 0, mr)?;
        let pairs: Vec<(u32, u32)> =
            (0..n).filter_map(|l| layout.neighbor(l, dim, -1, wrap).map(|r| (l as u32, r as u32))).collect();
        parts.push(em.permute(ctx, head, &pairs)?);
    }
    let joined = em.concat(&parts, dim)?;
    let offsets: Vec<i64> = layout.coords.iter().map(|c| spec.start(c[dim]) - (c[dim] * s) as i64 + ml as i64).collect();
    let mut sizes = em.dims(joined);
    sizes[dim] = spec.length;
    let out = em.dynamic_slice(ctx, joined, &[(dim, offsets)], sizes)?;
    Ok((out, starts))
}
