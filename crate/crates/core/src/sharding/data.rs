use std::collections::BTreeMap;

use super::{DeviceId, Sharding, ShardingError};
use crate::ir::shape::Shape;
use crate::tensor::{Scalar, Tensor};

/// Relative closeness used for F32 comparisons; integers must match exactly.
pub fn values_close(a: Scalar, b: Scalar, tol: f64) -> bool {
    match (a, b) {
        (Scalar::F32(x), Scalar::F32(y)) => {
            if x.is_nan() || y.is_nan() {
                return x.is_nan() && y.is_nan();
            }
            if x == y {
                return true;
            }
            let (x, y) = (x as f64, y as f64);
            (x - y).abs() <= tol * y.abs().max(1.0)
        }
        _ => a == b,
    }
}

fn device_list(s: &Sharding, num_devices: usize) -> Result<Vec<DeviceId>, ShardingError> {
    let all: Vec<DeviceId> = (0..num_devices as DeviceId).collect();
    if let Some(set) = s.device_set() {
        if set != all {
            return Err(ShardingError::DeviceSetMismatch(format!("sharding uses {set:?}, expected devices 0..{num_devices}")));
        }
    }
    Ok(all)
}

/// Splits `t` into per-device shards; the region past the tensor end is
/// filled with `pad`.
pub fn shard_data(t: &Tensor, s: &Sharding, num_devices: usize, pad: Scalar) -> Result<BTreeMap<DeviceId, Tensor>, ShardingError> {
    s.check_rank(t.shape().rank())?;
    let devices = device_list(s, num_devices)?;
    let local = s.shard_shape(t.shape())?;
    let rank = t.shape().rank();
    let full = t.dims().to_vec();
    let mut out = BTreeMap::new();
    for d in devices {
        let coords = s.device_coords(rank, d).ok_or(ShardingError::DeviceNotInSharding(d))?;
        let base: Vec<usize> = coords.iter().zip(&local.dims).map(|(c, n)| c * n).collect();
        let shard = t.remap(&local.dims, pad, |i| {
            let g: Vec<usize> = i.iter().zip(&base).map(|(a, b)| a + b).collect();
            if g.iter().zip(&full).all(|(x, n)| x < n) {
                Some(g)
            } else {
                None
            }
        });
        out.insert(d, shard);
    }
    Ok(out)
}

/// Inverse of [`shard_data`]; replicas must agree within `tol`.
pub fn assemble_data(
    shards: &BTreeMap<DeviceId, Tensor>,
    s: &Sharding,
    full_shape: &Shape,
    tol: f64,
) -> Result<Tensor, ShardingError> {
    let rank = full_shape.rank();
    s.check_rank(rank)?;
    let local = s.shard_shape(full_shape)?;
    let holders: Vec<(DeviceId, Vec<usize>)> = if s.is_replicated() {
        shards.keys().map(|&d| (d, vec![0; rank])).collect()
    } else {
        s.coord_map().into_iter().map(|(d, (c, _))| (d, c)).collect()
    };
    if holders.is_empty() {
        return Err(ShardingError::MissingShard(0));
    }
    let mut by_tile: BTreeMap<Vec<usize>, Vec<DeviceId>> = BTreeMap::new();
    for (d, c) in &holders {
        let t = shards.get(d).ok_or(ShardingError::MissingShard(*d))?;
        if t.dims() != local.dims.as_slice() || t.dtype() != full_shape.dtype {
            return Err(ShardingError::InvalidCoords(format!("device {d} shard is {}, expected {local}", t.shape())));
        }
        by_tile.entry(c.clone()).or_default().push(*d);
    }
    let mut idx = vec![0usize; rank];
    for (coords, devs) in &by_tile {
        let first = &shards[&devs[0]];
        // only positions inside the tensor; the shard tail is padding
        let inside: Vec<usize> = (0..first.len())
            .filter(|&k| {
                crate::ir::shape::unravel(k, &local.dims, &mut idx);
                (0..rank).all(|d| coords[d] * local.dims[d] + idx[d] < full_shape.dims[d])
            })
            .collect();
        for &other in &devs[1..] {
            let o = &shards[&other];
            let mut max_diff = 0.0f64;
            let mut bad = false;
            for &k in &inside {
                let (a, b) = (first.get_flat(k), o.get_flat(k));
                if !values_close(b, a, tol) {
                    bad = true;
                    max_diff = max_diff.max((a.as_f64() - b.as_f64()).abs());
                }
            }
            if bad {
                return Err(ShardingError::ReplicaDivergence { a: devs[0], b: other, max_diff });
            }
        }
    }
    let tile_counts = s.tile_counts(rank);
    if by_tile.len() != tile_counts.iter().product::<usize>() {
        return Err(ShardingError::InvalidCoords("tile grid is not fully covered".into()));
    }
    let strides = local.strides();
    let order: Vec<&Tensor> = by_tile.values().map(|devs| &shards[&devs[0]]).collect();
    let grid = crate::ir::shape::row_major_strides(&tile_counts);
    let mut tiles = vec![0usize; rank];
    let mut values = Vec::with_capacity(full_shape.num_elements());
    crate::ir::shape::for_each_index(&full_shape.dims, |i| {
        for d in 0..rank {
            tiles[d] = i[d] / local.dims[d];
        }
        let tile = &order[crate::ir::shape::ravel(&tiles, &grid)];
        let off: usize = (0..rank).map(|d| (i[d] % local.dims[d]) * strides[d]).sum();
        values.push(tile.get_flat(off));
    });
    Ok(Tensor::new(full_shape.clone(), crate::tensor::Buffer::from_scalars(full_shape.dtype, &values)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::shape::DType;
    use crate::sharding::DeviceMesh;

    #[test]
    fn even_split() {
        let t = Tensor::from_i32([6], (0..6).collect());
        let s = Sharding::tiled(vec![2], vec![0, 1]).unwrap();
        let shards = shard_data(&t, &s, 2, Scalar::S32(0)).unwrap();
        assert_eq!(shards[&0].as_i32().unwrap(), &[0, 1, 2]);
        assert_eq!(shards[&1].as_i32().unwrap(), &[3, 4, 5]);
    }

    #[test]
    fn uneven_split_pads() {
        let t = Tensor::from_i32([7], (0..7).collect());
        let s = Sharding::tiled(vec![4], vec![0, 1, 2, 3]).unwrap();
        let shards = shard_data(&t, &s, 4, Scalar::S32(0)).unwrap();
        let got: Vec<Vec<i32>> = shards.values().map(|x| x.as_i32().unwrap().to_vec()).collect();
        assert_eq!(got, vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 0]]);
        let back = assemble_data(&shards, &s, t.shape(), 0.0).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn replicated_copies() {
        let t = Tensor::from_f32([2], vec![1.0, 2.0]);
        let shards = shard_data(&t, &Sharding::replicated(), 2, Scalar::F32(0.0)).unwrap();
        assert_eq!(shards[&0], t);
        assert_eq!(shards[&1], t);
    }

    #[test]
    fn divergent_replicas() {
        let mut shards = BTreeMap::new();
        shards.insert(0, Tensor::from_f32([2], vec![1.0, 2.0]));
        shards.insert(1, Tensor::from_f32([2], vec![1.0, 2.5]));
        let err = assemble_data(&shards, &Sharding::replicated(), &Shape::new(DType::F32, [2]), 1e-4).unwrap_err();
        assert!(matches!(err, ShardingError::ReplicaDivergence { a: 0, b: 1, .. }));
    }

    #[test]
    fn partial_round_trip() {
        let t = Tensor::ramp(Shape::new(DType::S32, [4, 4]));
        let s = DeviceMesh::iota(&[2, 2]).mesh_split(2, &[0, -1]).unwrap();
        let shards = shard_data(&t, &s, 4, Scalar::S32(-1)).unwrap();
        assert_eq!(assemble_data(&shards, &s, t.shape(), 0.0).unwrap(), t);
    }

    #[test]
    fn missing_shard() {
        let s = Sharding::tiled(vec![2], vec![0, 1]).unwrap();
        let mut shards = BTreeMap::new();
        shards.insert(0, Tensor::from_i32([1], vec![1]));
        assert_eq!(assemble_data(&shards, &s, &Shape::new(DType::S32, [2]), 0.0), Err(ShardingError::MissingShard(1)));
    }
}
