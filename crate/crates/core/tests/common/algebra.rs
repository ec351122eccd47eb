use meshpart::ir::ReduceKind;
use meshpart::ir::{DType, Shape};
use meshpart::simulator::collectives::{all_gather, all_reduce, all_to_all, reduce_scatter};
use meshpart::tensor::{Scalar, Tensor};
use rand::rngs::SmallRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use super::random_tensor;

fn slice_dim(t: &Tensor, dim: usize, start: usize, len: usize) -> Tensor {
    let mut dims = t.dims().to_vec();
    dims[dim] = len;
    t.remap(&dims, Scalar::zero(t.dtype()), |i| {
        let mut s = i.to_vec();
        s[dim] += start;
        Some(s)
    })
}

/// Checks three collective identities on one random configuration:
/// reduce-scatter equals all-reduce then slicing, all-gather undoes
/// sharding, and all-to-all undoes itself with swapped dims.
pub fn algebra_case(seed: u64) -> Result<(), String> {
    let mut rng = SmallRng::seed_from_u64(seed);
    let n = *[2usize, 4, 8].choose(&mut rng).unwrap();
    let sizes: Vec<usize> = (2..=n).filter(|k| n % k == 0).collect();
    let k = *sizes.choose(&mut rng).unwrap();
    let mut devs: Vec<u32> = (0..n as u32).collect();
    devs.shuffle(&mut rng);
    let groups: Vec<Vec<u32>> = devs.chunks(k).map(|c| c.to_vec()).collect();
    let pos = |d: usize| groups.iter().find_map(|g| g.iter().position(|&x| x as usize == d)).unwrap();
    let group_of = |d: usize| groups.iter().position(|g| g.contains(&(d as u32))).unwrap();
    let rank = rng.gen_range(1..=3);
    let d = rng.gen_range(0..rank);
    let mut dims: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..=3)).collect();
    dims[d] *= k;
    let shape = Shape::new(DType::S32, dims.clone());
    let inputs: Vec<Tensor> = (0..n).map(|_| random_tensor(&mut rng, &shape)).collect();
    let chunk = dims[d] / k;

    let rs = reduce_scatter(&inputs, &groups, ReduceKind::Sum, d)?;
    let ar = all_reduce(&inputs, &groups, ReduceKind::Sum)?;
    for dev in 0..n {
        if rs[dev] != slice_dim(&ar[dev], d, pos(dev) * chunk, chunk) {
            return Err(format!("seed {seed}: reduce-scatter differs from all-reduce + slice on device {dev}"));
        }
    }

    let full: Vec<Tensor> = groups.iter().map(|_| random_tensor(&mut rng, &shape)).collect();
    let shards: Vec<Tensor> = (0..n).map(|dev| slice_dim(&full[group_of(dev)], d, pos(dev) * chunk, chunk)).collect();
    let ag = all_gather(&shards, &groups, d)?;
    for dev in 0..n {
        if ag[dev] != full[group_of(dev)] {
            return Err(format!("seed {seed}: all-gather of shards differs from the full tensor on device {dev}"));
        }
    }

    let c = rng.gen_range(0..rank);
    let there = all_to_all(&inputs, &groups, d, c)?;
    let back = all_to_all(&there, &groups, c, d)?;
    if back != inputs {
        return Err(format!("seed {seed}: all-to-all round trip changed the data"));
    }
    Ok(())
}
