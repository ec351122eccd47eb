//! Tile-assignment shardings, device meshes and the offset arithmetic used by
//! every other pass.

mod data;
mod text;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::shape::Shape;

pub use data::{assemble_data, shard_data, values_close};

pub type DeviceId = u32;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ShardingError {
    #[error("mesh dimension {0} is used more than once")]
    DuplicateMeshDim(usize),
    #[error("mesh dimension {0} is out of range")]
    MeshDimOutOfRange(i64),
    #[error("rank mismatch: sharding covers {expected} dims, shape has {got}")]
    RankMismatch { expected: usize, got: usize },
    #[error("device {0} does not appear in the sharding")]
    DeviceNotInSharding(DeviceId),
    #[error("duplicate device {0}")]
    DuplicateDevice(DeviceId),
    #[error("tile assignment has {got} devices, expected {expected}")]
    TileCountMismatch { expected: usize, got: usize },
    #[error("invalid tile coordinates: {0}")]
    InvalidCoords(String),
    #[error("no shard for device {0}")]
    MissingShard(DeviceId),
    #[error("replicas on devices {a} and {b} diverge (max abs diff {max_diff})")]
    ReplicaDivergence { a: DeviceId, b: DeviceId, max_diff: f64 },
    #[error("device set mismatch: {0}")]
    DeviceSetMismatch(String),
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("sharding syntax: {0}")]
    Parse(String),
}

/// Logical arrangement of devices used to build shardings from mesh axes.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DeviceMesh {
    dims: Vec<usize>,
    device_ids: Vec<DeviceId>,
}

impl DeviceMesh {
    pub fn new(dims: Vec<usize>, device_ids: Vec<DeviceId>) -> Result<DeviceMesh, ShardingError> {
        let n: usize = dims.iter().product();
        if dims.contains(&0) {
            return Err(ShardingError::InvalidMesh(format!("zero-sized mesh dim in {dims:?}")));
        }
        if n != device_ids.len() {
            return Err(ShardingError::TileCountMismatch { expected: n, got: device_ids.len() });
        }
        check_distinct(&device_ids)?;
        Ok(DeviceMesh { dims, device_ids })
    }

    /// Mesh whose device ids are `0..n` in row-major order.
    pub fn iota(dims: &[usize]) -> DeviceMesh {
        let n: usize = dims.iter().product();
        DeviceMesh { dims: dims.to_vec(), device_ids: (0..n as DeviceId).collect() }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn device_ids(&self) -> &[DeviceId] {
        &self.device_ids
    }

    pub fn num_devices(&self) -> usize {
        self.device_ids.len()
    }

    pub fn is_iota(&self) -> bool {
        self.device_ids.iter().enumerate().all(|(i, &d)| d as usize == i)
    }

    /// Shards tensor dim `d` over mesh dim `dims_mapping[d]` (`-1` leaves
    /// it unsplit). Unused mesh dims become replication.
    pub fn mesh_split(&self, rank: usize, dims_mapping: &[i64]) -> Result<Sharding, ShardingError> {
        if dims_mapping.len() != rank {
            return Err(ShardingError::RankMismatch { expected: rank, got: dims_mapping.len() });
        }
        let mut used = vec![false; self.dims.len()];
        for &m in dims_mapping {
            if m == -1 {
                continue;
            }
            if m < 0 || m as usize >= self.dims.len() {
                return Err(ShardingError::MeshDimOutOfRange(m));
            }
            if used[m as usize] {
                return Err(ShardingError::DuplicateMeshDim(m as usize));
            }
            used[m as usize] = true;
        }
        let tiles: Vec<usize> = dims_mapping.iter().map(|&m| if m < 0 { 1 } else { self.dims[m as usize] }).collect();
        let mut entries = Vec::with_capacity(self.device_ids.len());
        let mut mc = vec![0; self.dims.len()];
        for (pos, &dev) in self.device_ids.iter().enumerate() {
            crate::ir::shape::unravel(pos, &self.dims, &mut mc);
            let coords = dims_mapping.iter().map(|&m| if m < 0 { 0 } else { mc[m as usize] }).collect();
            entries.push((dev, coords));
        }
        Sharding::from_coords(&tiles, &entries)
    }
}

/// How a tensor is laid out over devices.
///
/// `tile_dims` has one entry per tensor dim, plus a trailing replication
/// extent when `partial` is set. `devices` is the row-major tile assignment.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sharding {
    tile_dims: Vec<usize>,
    devices: Vec<DeviceId>,
    partial: bool,
    unspecified: Vec<usize>,
}

fn check_distinct(ids: &[DeviceId]) -> Result<(), ShardingError> {
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            return Err(ShardingError::DuplicateDevice(w[0]));
        }
    }
    Ok(())
}

impl Sharding {
    pub fn replicated() -> Sharding {
        Sharding { tile_dims: Vec::new(), devices: Vec::new(), partial: false, unspecified: Vec::new() }
    }

    /// One device per tile.
    pub fn tiled(tile_dims: Vec<usize>, devices: Vec<DeviceId>) -> Result<Sharding, ShardingError> {
        Sharding::build(tile_dims, devices, false)
    }

    /// `tile_dims` includes the trailing replication extent.
    pub fn partial_tiled(tile_dims: Vec<usize>, devices: Vec<DeviceId>) -> Result<Sharding, ShardingError> {
        if tile_dims.is_empty() {
            return Err(ShardingError::InvalidCoords("partial tiling needs a replication dim".into()));
        }
        Sharding::build(tile_dims, devices, true)
    }

    fn build(tile_dims: Vec<usize>, devices: Vec<DeviceId>, partial: bool) -> Result<Sharding, ShardingError> {
        let n: usize = tile_dims.iter().product();
        if n != devices.len() || n == 0 {
            return Err(ShardingError::TileCountMismatch { expected: n, got: devices.len() });
        }
        check_distinct(&devices)?;
        Ok(Sharding { tile_dims, devices, partial, unspecified: Vec::new() }.normalized())
    }

    fn normalized(mut self) -> Sharding {
        if self.partial && self.tile_dims.last() == Some(&1) {
            self.tile_dims.pop();
            self.partial = false;
        }
        let data: usize = self.data_tile_dims().iter().product();
        if data == 1 {
            return Sharding { unspecified: self.unspecified, ..Sharding::replicated() };
        }
        self
    }

    /// Builds a sharding from explicit per-device tile coordinates. Devices
    /// sharing a coordinate become a replication group, in the given order.
    pub fn from_coords(tile_counts: &[usize], entries: &[(DeviceId, Vec<usize>)]) -> Result<Sharding, ShardingError> {
        let num_tiles: usize = tile_counts.iter().product();
        if num_tiles == 0 {
            return Err(ShardingError::InvalidCoords("zero tile count".into()));
        }
        let strides = crate::ir::shape::row_major_strides(tile_counts);
        let mut buckets: Vec<Vec<DeviceId>> = vec![Vec::new(); num_tiles];
        for (dev, coords) in entries {
            if coords.len() != tile_counts.len() || coords.iter().zip(tile_counts).any(|(c, t)| c >= t) {
                return Err(ShardingError::InvalidCoords(format!("device {dev} coords {coords:?} outside {tile_counts:?}")));
            }
            buckets[crate::ir::shape::ravel(coords, &strides)].push(*dev);
        }
        let r = buckets[0].len();
        if r == 0 || buckets.iter().any(|b| b.len() != r) {
            return Err(ShardingError::InvalidCoords("tiles are not covered by equally many devices".into()));
        }
        let devices: Vec<DeviceId> = buckets.into_iter().flatten().collect();
        let mut dims = tile_counts.to_vec();
        if r > 1 {
            dims.push(r);
        }
        Sharding::build(dims, devices, r > 1)
    }

    pub fn with_unspecified(mut self, dims: impl IntoIterator<Item = usize>) -> Sharding {
        let mut u: Vec<usize> = dims.into_iter().collect();
        u.sort_unstable();
        u.dedup();
        self.unspecified = u;
        self
    }

    pub fn unspecified_dims(&self) -> &[usize] {
        &self.unspecified
    }

    pub fn is_replicated(&self) -> bool {
        self.tile_dims.is_empty()
    }

    pub fn is_partial(&self) -> bool {
        self.partial
    }

    pub fn is_tiled(&self) -> bool {
        !self.is_replicated() && !self.partial
    }

    /// Full tile-assignment shape, including the replication extent.
    pub fn tile_assignment_dims(&self) -> &[usize] {
        &self.tile_dims
    }

    pub fn tile_assignment_devices(&self) -> &[DeviceId] {
        &self.devices
    }

    /// Tile extents of the tensor dims (empty when replicated).
    pub fn data_tile_dims(&self) -> &[usize] {
        if self.partial {
            &self.tile_dims[..self.tile_dims.len() - 1]
        } else {
            &self.tile_dims
        }
    }

    /// Tensor rank the sharding is tied to, if any.
    pub fn data_rank(&self) -> Option<usize> {
        if self.is_replicated() {
            None
        } else {
            Some(self.data_tile_dims().len())
        }
    }

    /// Per-dim tile counts for a tensor of the given rank.
    pub fn tile_counts(&self, rank: usize) -> Vec<usize> {
        if self.is_replicated() {
            vec![1; rank]
        } else {
            self.data_tile_dims().to_vec()
        }
    }

    pub fn num_tiles(&self, dim: usize) -> usize {
        self.data_tile_dims().get(dim).copied().unwrap_or(1)
    }

    /// Number of distinct data tiles.
    pub fn total_tiles(&self) -> usize {
        self.data_tile_dims().iter().product()
    }

    /// Devices holding each tile (1 when fully tiled).
    pub fn replication(&self) -> usize {
        if self.partial {
            *self.tile_dims.last().unwrap()
        } else {
            1
        }
    }

    pub fn sharded_dims(&self) -> Vec<usize> {
        self.data_tile_dims().iter().enumerate().filter(|(_, &t)| t > 1).map(|(d, _)| d).collect()
    }

    pub fn check_rank(&self, rank: usize) -> Result<(), ShardingError> {
        match self.data_rank() {
            Some(r) if r != rank => Err(ShardingError::RankMismatch { expected: r, got: rank }),
            _ => {
                if let Some(&u) = self.unspecified.iter().find(|&&u| u >= rank) {
                    return Err(ShardingError::InvalidCoords(format!("unspecified dim {u} out of range for rank {rank}")));
                }
                Ok(())
            }
        }
    }

    /// Devices in tile-assignment order; empty when replicated.
    pub fn devices(&self) -> &[DeviceId] {
        &self.devices
    }

    /// Data-tile coordinates of `device` (zeros when replicated).
    pub fn device_coords(&self, rank: usize, device: DeviceId) -> Option<Vec<usize>> {
        if self.is_replicated() {
            return Some(vec![0; rank]);
        }
        let pos = self.devices.iter().position(|&d| d == device)?;
        let mut full = vec![0; self.tile_dims.len()];
        crate::ir::shape::unravel(pos, &self.tile_dims, &mut full);
        full.truncate(self.data_tile_dims().len());
        Some(full)
    }

    /// Coordinates and replica rank of every device, keyed by device id.
    pub fn coord_map(&self) -> BTreeMap<DeviceId, (Vec<usize>, usize)> {
        let mut out = BTreeMap::new();
        let mut full = vec![0; self.tile_dims.len()];
        let data_rank = self.data_tile_dims().len();
        for (pos, &d) in self.devices.iter().enumerate() {
            crate::ir::shape::unravel(pos, &self.tile_dims, &mut full);
            let rank = if self.partial { full[data_rank] } else { 0 };
            out.insert(d, (full[..data_rank].to_vec(), rank));
        }
        out
    }

    pub fn shard_shape(&self, shape: &Shape) -> Result<Shape, ShardingError> {
        self.check_rank(shape.rank())?;
        let t = self.tile_counts(shape.rank());
        Ok(shape.with_dims(shape.dims.iter().zip(&t).map(|(&n, &k)| n.div_ceil(k)).collect::<Vec<_>>()))
    }

    pub fn shard_offset(&self, shape: &Shape, device: DeviceId, dim: usize) -> Result<usize, ShardingError> {
        self.check_rank(shape.rank())?;
        if dim >= shape.rank() {
            return Err(ShardingError::RankMismatch { expected: shape.rank(), got: dim + 1 });
        }
        let coords = self.device_coords(shape.rank(), device).ok_or(ShardingError::DeviceNotInSharding(device))?;
        Ok(coords[dim] * shape.dims[dim].div_ceil(self.num_tiles(dim)))
    }

    /// Same layout with the given tensor dims no longer split.
    pub fn replicate_dims(&self, dims: &[usize]) -> Sharding {
        let Some(rank) = self.data_rank() else { return self.clone() };
        let mut tiles = self.tile_counts(rank);
        for &d in dims {
            tiles[d] = 1;
        }
        let entries: Vec<(DeviceId, Vec<usize>)> = self
            .coord_map()
            .into_iter()
            .map(|(d, (mut c, _))| {
                for &k in dims {
                    c[k] = 0;
                }
                (d, c)
            })
            .collect();
        let entries = self.in_assignment_order(entries);
        Sharding::from_coords(&tiles, &entries).expect("replicating dims keeps a valid layout")
    }

    /// Reorders coordinate entries to follow the tile assignment.
    fn in_assignment_order(&self, entries: Vec<(DeviceId, Vec<usize>)>) -> Vec<(DeviceId, Vec<usize>)> {
        let mut by_dev: HashMap<DeviceId, Vec<usize>> = entries.into_iter().collect();
        self.devices.iter().filter_map(|d| by_dev.remove(d).map(|c| (*d, c))).collect()
    }

    /// Maps tensor dims through `src_of_dim`: result dim `i` takes the
    /// tiling of this sharding's dim `src_of_dim[i]`, or stays unsplit.
    pub fn remap_dims(&self, src_of_dim: &[Option<usize>]) -> Option<Sharding> {
        let Some(_) = self.data_rank() else { return Some(Sharding::replicated()) };
        let tiles: Vec<usize> = src_of_dim.iter().map(|s| s.map_or(1, |d| self.num_tiles(d))).collect();
        let entries: Vec<(DeviceId, Vec<usize>)> = self
            .coord_map()
            .into_iter()
            .map(|(dev, (c, _))| (dev, src_of_dim.iter().map(|s| s.map_or(0, |d| c[d])).collect()))
            .collect();
        let entries = self.in_assignment_order(entries);
        Sharding::from_coords(&tiles, &entries).ok()
    }

    /// True when every device holds the same tile under both shardings.
    pub fn same_layout(&self, other: &Sharding, rank: usize) -> bool {
        if self.is_replicated() || other.is_replicated() {
            return self.total_tiles() == 1 && other.total_tiles() == 1;
        }
        if self.tile_counts(rank) != other.tile_counts(rank) {
            return false;
        }
        let a = self.coord_map();
        let b = other.coord_map();
        a.len() == b.len() && a.iter().all(|(d, (c, _))| b.get(d).map(|x| &x.0) == Some(c))
    }

    /// Sorted device set; `None` when replicated.
    pub fn device_set(&self) -> Option<Vec<DeviceId>> {
        if self.is_replicated() {
            return None;
        }
        let mut v = self.devices.clone();
        v.sort_unstable();
        Some(v)
    }
}

/// Most refined sharding agreeing with `s0` on its split dims and with `s1`
/// on its split dims, or `None` when no such sharding exists.
pub fn merge_shardings(s0: &Sharding, s1: &Sharding) -> Option<Sharding> {
    if s0.is_replicated() {
        return Some(s1.clone());
    }
    if s1.is_replicated() {
        return Some(s0.clone());
    }
    let rank = s0.data_rank()?;
    if s1.data_rank() != Some(rank) || s0.device_set() != s1.device_set() {
        return None;
    }
    let t0 = s0.tile_counts(rank);
    let t1 = s1.tile_counts(rank);
    let c0 = s0.coord_map();
    let c1 = s1.coord_map();
    let mut tiles = vec![1; rank];
    for d in 0..rank {
        match (t0[d] > 1, t1[d] > 1) {
            (true, true) => {
                if t0[d] != t1[d] || c0.iter().any(|(dev, (c, _))| c1[dev].0[d] != c[d]) {
                    return None;
                }
                tiles[d] = t0[d];
            }
            (true, false) => tiles[d] = t0[d],
            (false, true) => tiles[d] = t1[d],
            (false, false) => {}
        }
    }
    let entries: Vec<(DeviceId, Vec<usize>)> = c0
        .iter()
        .map(|(dev, (c, _))| {
            let other = &c1[dev].0;
            (*dev, (0..rank).map(|d| if t0[d] > 1 { c[d] } else { other[d] }).collect())
        })
        .collect();
    let merged = Sharding::from_coords(&tiles, &entries).ok()?;
    if merged.same_layout(s0, rank) {
        return Some(s0.clone());
    }
    if merged.same_layout(s1, rank) {
        return Some(s1.clone());
    }
    Some(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::shape::DType;

    fn mesh22() -> DeviceMesh {
        DeviceMesh::iota(&[2, 2])
    }

    #[test]
    fn mesh_split_full_mapping() {
        let s = mesh22().mesh_split(2, &[0, 1]).unwrap();
        assert!(s.is_tiled());
        assert_eq!(s.tile_assignment_dims(), &[2, 2]);
        assert_eq!(s.devices(), &[0, 1, 2, 3]);
    }

    #[test]
    fn mesh_split_transposed_mapping() {
        let s = mesh22().mesh_split(2, &[1, 0]).unwrap();
        assert_eq!(s.devices(), &[0, 2, 1, 3]);
        assert_eq!(s.to_string(), "devices=[2,2]0,2,1,3");
    }

    #[test]
    fn mesh_split_partial() {
        let s = mesh22().mesh_split(3, &[0, -1, -1]).unwrap();
        assert!(s.is_partial());
        assert_eq!(s.tile_assignment_dims(), &[2, 1, 1, 2]);
        // devices sharing mesh row x hold tile x
        for d in 0..4u32 {
            assert_eq!(s.device_coords(3, d).unwrap(), vec![(d / 2) as usize, 0, 0]);
        }
    }

    #[test]
    fn mesh_split_errors() {
        assert_eq!(mesh22().mesh_split(2, &[0, 0]), Err(ShardingError::DuplicateMeshDim(0)));
        assert_eq!(mesh22().mesh_split(2, &[0, 2]), Err(ShardingError::MeshDimOutOfRange(2)));
        assert!(mesh22().mesh_split(2, &[-1, -1]).unwrap().is_replicated());
    }

    #[test]
    fn shard_shape_rounds_up() {
        let s = Sharding::tiled(vec![4], vec![0, 1, 2, 3]).unwrap();
        assert_eq!(s.shard_shape(&Shape::new(DType::F32, [7])).unwrap().dims, vec![2]);
        let s2 = Sharding::tiled(vec![2, 1], vec![0, 1]).unwrap();
        assert_eq!(s2.shard_shape(&Shape::new(DType::F32, [3, 2])).unwrap().dims, vec![2, 2]);
        let s3 = Sharding::tiled(vec![2], vec![0, 1]).unwrap();
        assert_eq!(s3.shard_shape(&Shape::new(DType::F32, [6])).unwrap().dims, vec![3]);
    }

    #[test]
    fn shard_offsets() {
        let s = Sharding::tiled(vec![2, 2], vec![0, 2, 1, 3]).unwrap();
        let shape = Shape::new(DType::F32, [8, 8]);
        assert_eq!(s.shard_offset(&shape, 3, 0).unwrap(), 4);
        assert_eq!(Sharding::replicated().shard_offset(&shape, 3, 1).unwrap(), 0);
        let s4 = Sharding::tiled(vec![4], vec![0, 1, 2, 3]).unwrap();
        assert_eq!(s4.shard_offset(&Shape::new(DType::F32, [7]), 3, 0).unwrap(), 6);
        assert_eq!(s4.shard_offset(&Shape::new(DType::F32, [7]), 9, 0), Err(ShardingError::DeviceNotInSharding(9)));
    }

    #[test]
    fn merge_orthogonal_dims() {
        let m = mesh22();
        let s0 = m.mesh_split(2, &[0, -1]).unwrap();
        let s1 = m.mesh_split(2, &[-1, 1]).unwrap();
        let merged = merge_shardings(&s0, &s1).unwrap();
        assert_eq!(merged, m.mesh_split(2, &[0, 1]).unwrap());
        assert_eq!(merge_shardings(&s1, &s0).unwrap(), merged);
        assert_eq!(merge_shardings(&merged, &merged).unwrap(), merged);
    }

    #[test]
    fn merge_conflict() {
        let m = mesh22();
        let s0 = m.mesh_split(2, &[0, -1]).unwrap();
        let s1 = m.mesh_split(2, &[1, -1]).unwrap();
        assert_eq!(merge_shardings(&s0, &s1), None);
    }

    #[test]
    fn normalizes_trivial_tiling() {
        let s = Sharding::partial_tiled(vec![1, 1, 4], vec![0, 1, 2, 3]).unwrap();
        assert!(s.is_replicated());
        let t = Sharding::partial_tiled(vec![4, 1], vec![0, 1, 2, 3]).unwrap();
        assert!(t.is_tiled());
    }
}
