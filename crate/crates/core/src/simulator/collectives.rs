//! Collective semantics over per-device tensors. `inputs[d]` is device `d`'s
//! operand; results are indexed the same way.

use crate::ir::op::ReduceKind;
use crate::sharding::DeviceId;
use crate::tensor::Tensor;

use super::kernels;

/// Checks that `groups` partition `0..num_devices`.
pub fn check_groups(groups: &[Vec<DeviceId>], num_devices: usize) -> Result<(), String> {
    let mut seen = vec![false; num_devices];
    for g in groups {
        for &d in g {
            let d = d as usize;
            if d >= num_devices {
                return Err(format!("device {d} is outside the mesh of {num_devices}"));
            }
            if seen[d] {
                return Err(format!("device {d} appears in more than one subgroup"));
            }
            seen[d] = true;
        }
    }
    match seen.iter().position(|s| !s) {
        Some(d) => Err(format!("device {d} is in no subgroup")),
        None => Ok(()),
    }
}

pub fn check_pairs(pairs: &[(DeviceId, DeviceId)], num_devices: usize) -> Result<(), String> {
    let mut src = vec![false; num_devices];
    let mut dst = vec![false; num_devices];
    for &(s, t) in pairs {
        let (s, t) = (s as usize, t as usize);
        if s >= num_devices || t >= num_devices {
            return Err(format!("pair ({s},{t}) is outside the mesh of {num_devices}"));
        }
        if src[s] || dst[t] {
            return Err(format!("pair ({s},{t}) repeats a source or target"));
        }
        src[s] = true;
        dst[t] = true;
    }
    Ok(())
}

fn combine(kind: ReduceKind, a: &Tensor, b: &Tensor) -> Tensor {
    kernels::binary(kind.combiner(), a, b).expect("reduction combiners never divide")
}

/// Elementwise reduction folded in subgroup order.
pub fn all_reduce(inputs: &[Tensor], groups: &[Vec<DeviceId>], kind: ReduceKind) -> Result<Vec<Tensor>, String> {
    check_groups(groups, inputs.len())?;
    let mut out = inputs.to_vec();
    for g in groups {
        let mut acc = inputs[g[0] as usize].clone();
        for &d in &g[1..] {
            acc = combine(kind, &acc, &inputs[d as usize]);
        }
        for &d in g {
            out[d as usize] = acc.clone();
        }
    }
    Ok(out)
}

pub fn all_gather(inputs: &[Tensor], groups: &[Vec<DeviceId>], dim: usize) -> Result<Vec<Tensor>, String> {
    check_groups(groups, inputs.len())?;
    let mut out = inputs.to_vec();
    for g in groups {
        let parts: Vec<&Tensor> = g.iter().map(|&d| &inputs[d as usize]).collect();
        let joined = Tensor::concat(&parts, dim);
        for &d in g {
            out[d as usize] = joined.clone();
        }
    }
    Ok(out)
}

fn piece(t: &Tensor, dim: usize, k: usize, n: usize) -> Tensor {
    let size = t.dims()[dim] / n;
    let rank = t.shape().rank();
    let mut starts = vec![0; rank];
    let mut limits = t.dims().to_vec();
    starts[dim] = k * size;
    limits[dim] = (k + 1) * size;
    t.slice(&starts, &limits, &vec![1; rank])
}

/// All-reduce, then member `k` of each subgroup keeps piece `k` along `dim`.
pub fn reduce_scatter(inputs: &[Tensor], groups: &[Vec<DeviceId>], kind: ReduceKind, dim: usize) -> Result<Vec<Tensor>, String> {
    let reduced = all_reduce(inputs, groups, kind)?;
    let mut out = reduced.clone();
    for g in groups {
        for (k, &d) in g.iter().enumerate() {
            out[d as usize] = piece(&reduced[d as usize], dim, k, g.len());
        }
    }
    Ok(out)
}

/// Member `j` receives piece `j` (along `split_dim`) of every member's
/// input, concatenated along `concat_dim` in subgroup order.
pub fn all_to_all(inputs: &[Tensor], groups: &[Vec<DeviceId>], split_dim: usize, concat_dim: usize) -> Result<Vec<Tensor>, String> {
    check_groups(groups, inputs.len())?;
    let mut out = inputs.to_vec();
    for g in groups {
        let n = g.len();
        for (j, &dst) in g.iter().enumerate() {
            let parts: Vec<Tensor> = g.iter().map(|&src| piece(&inputs[src as usize], split_dim, j, n)).collect();
            let refs: Vec<&Tensor> = parts.iter().collect();
            out[dst as usize] = Tensor::concat(&refs, concat_dim);
        }
    }
    Ok(out)
}

/// Devices that are not a target receive zeros.
pub fn collective_permute(inputs: &[Tensor], pairs: &[(DeviceId, DeviceId)]) -> Result<Vec<Tensor>, String> {
    check_pairs(pairs, inputs.len())?;
    let mut out: Vec<Tensor> = inputs.iter().map(|t| Tensor::zeros(t.shape().clone())).collect();
    for &(s, t) in pairs {
        out[t as usize] = inputs[s as usize].clone();
    }
    Ok(out)
}
