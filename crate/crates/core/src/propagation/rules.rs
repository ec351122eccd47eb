//! Per-op sharding inference. Every rule is a dim correspondence between
//! the result and one operand; shardings only travel along matched dims.

use crate::ir::graph::{Graph, Instruction};
use crate::ir::op::Op;
use crate::sharding::{merge_shardings, Sharding};

/// Priority tier of a rule, 0 fires first.
pub type Tier = u8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

/// Tiers for (forward, backward) inference through `op`, or `None` when
/// nothing propagates.
pub fn tiers(op: &Op) -> (Option<Tier>, Option<Tier>) {
    match op {
        Op::Unary(_) | Op::Binary(_) | Op::Compare(_) | Op::Select => (Some(0), Some(0)),
        Op::Broadcast { .. } => (Some(4), Some(1)),
        Op::Reduce { .. } => (Some(1), Some(2)),
        Op::Transpose { .. }
        | Op::Reverse { .. }
        | Op::Pad { .. }
        | Op::Slice { .. }
        | Op::Concat { .. }
        | Op::DynamicSlice { .. }
        | Op::DynamicUpdateSlice
        | Op::Rotate { .. } => (Some(1), Some(1)),
        Op::Dot(_) | Op::Convolution { .. } => (Some(2), Some(2)),
        Op::Reshape { .. } => (Some(3), Some(3)),
        _ => (None, None),
    }
}

/// Splits two dim lists with equal element counts into minimal groups of
/// consecutive dims with equal products. Size-1 dims may form a group with
/// an empty counterpart.
pub fn reshape_groups(a: &[usize], b: &[usize]) -> Option<Vec<(Vec<usize>, Vec<usize>)>> {
    if a.contains(&0) || b.contains(&0) {
        return None;
    }
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < a.len() || j < b.len() {
        let a_one = i < a.len() && a[i] == 1;
        let b_one = j < b.len() && b[j] == 1;
        if a_one && !b_one {
            out.push((vec![i], vec![]));
            i += 1;
            continue;
        }
        if b_one && !a_one {
            out.push((vec![], vec![j]));
            j += 1;
            continue;
        }
        if i >= a.len() || j >= b.len() {
            return None;
        }
        let (mut ga, mut gb) = (vec![i], vec![j]);
        let (mut pa, mut pb) = (a[i], b[j]);
        i += 1;
        j += 1;
        while pa != pb {
            if pa < pb {
                pa *= *a.get(i)?;
                ga.push(i);
                i += 1;
            } else {
                pb *= *b.get(j)?;
                gb.push(j);
                j += 1;
            }
        }
        out.push((ga, gb));
    }
    Some(out)
}

/// For each dim of `to`, the dim of `from` whose tiling it can inherit
/// through a reshape: the major dims of each group, when the tile count
/// divides both major sizes and the rest of the group is unsplit.
fn reshape_map(from: &[usize], to: &[usize], s: &Sharding) -> Option<Vec<Option<usize>>> {
    let groups = reshape_groups(from, to)?;
    let mut map = vec![None; to.len()];
    for (gf, gt) in groups {
        let (Some(&f0), Some(&t0)) = (gf.first(), gt.first()) else { continue };
        let t = s.num_tiles(f0);
        if t <= 1 || gf[1..].iter().any(|&d| s.num_tiles(d) > 1) {
            continue;
        }
        if from[f0].is_multiple_of(t) && to[t0].is_multiple_of(t) {
            map[t0] = Some(f0);
        }
    }
    Some(map)
}

fn identity_where(rank: usize, keep: impl Fn(usize) -> bool) -> Vec<Option<usize>> {
    (0..rank).map(|d| if keep(d) { Some(d) } else { None }).collect()
}

/// For each result dim, the matching dim of operand `k` (`None` when the
/// dim has no counterpart). `None` overall when nothing can flow.
fn result_from_operand(g: &Graph, ins: &Instruction, k: usize) -> Option<Vec<Option<usize>>> {
    let rank = ins.shape.rank();
    let opnd = |i: usize| g.shape(ins.operands[i]);
    match &ins.op {
        Op::Unary(_) | Op::Binary(_) | Op::Compare(_) | Op::Select => Some(identity_where(rank, |_| true)),
        Op::Broadcast { dims, .. } => Some((0..rank).map(|j| dims.iter().position(|&d| d == j)).collect()),
        Op::Transpose { permutation } => Some(permutation.iter().map(|&p| Some(p)).collect()),
        Op::Reverse { .. } if k == 0 => Some(identity_where(rank, |_| true)),
        Op::Rotate { .. } if k == 0 => Some(identity_where(rank, |_| true)),
        Op::Pad { config } if k == 0 => Some(identity_where(rank, |d| config[d].is_noop())),
        Op::Slice { dims } if k == 0 => {
            let src = opnd(0);
            Some(identity_where(rank, |d| dims[d].start == 0 && dims[d].limit == src.dims[d] && dims[d].stride == 1))
        }
        Op::Concat { dim } => Some(identity_where(rank, |d| d != *dim)),
        Op::DynamicSlice { sizes } if k == 0 => {
            let src = opnd(0);
            Some(identity_where(rank, |d| sizes[d] == src.dims[d]))
        }
        Op::DynamicUpdateSlice if k <= 1 => {
            let upd = opnd(1);
            Some(identity_where(rank, |d| upd.dims[d] == ins.shape.dims[d]))
        }
        Op::Reduce { dims, .. } if k == 0 => {
            let keep: Vec<usize> = (0..opnd(0).rank()).filter(|d| !dims.contains(d)).collect();
            Some(keep.into_iter().map(Some).collect())
        }
        Op::Dot(dd) => {
            let lrank = opnd(0).rank();
            let rrank = opnd(1).rank();
            let lfree = dd.lhs_free(lrank);
            let rfree = dd.rhs_free(rrank);
            let nb = dd.lhs_batch.len();
            let mut map = vec![None; rank];
            if k == 0 {
                for (i, &d) in dd.lhs_batch.iter().enumerate() {
                    map[i] = Some(d);
                }
                for (i, &d) in lfree.iter().enumerate() {
                    map[nb + i] = Some(d);
                }
            } else {
                for (i, &d) in dd.rhs_batch.iter().enumerate() {
                    map[i] = Some(d);
                }
                for (i, &d) in rfree.iter().enumerate() {
                    map[nb + lfree.len() + i] = Some(d);
                }
            }
            Some(map)
        }
        Op::Convolution { dims: cd, .. } => {
            let mut map = vec![None; rank];
            if k == 0 {
                map[cd.out_batch] = Some(cd.lhs_batch);
                for (o, l) in cd.out_spatial.iter().zip(&cd.lhs_spatial) {
                    map[*o] = Some(*l);
                }
            } else {
                map[cd.out_feature] = Some(cd.rhs_output_feature);
            }
            Some(map)
        }
        _ => None,
    }
}

/// Inverts a result-from-operand map into operand-from-result.
fn invert(map: &[Option<usize>], operand_rank: usize) -> Vec<Option<usize>> {
    let mut inv = vec![None; operand_rank];
    for (r, src) in map.iter().enumerate() {
        if let Some(s) = src {
            inv[*s] = Some(r);
        }
    }
    inv
}

/// Folds candidates: merge when compatible, else keep the more refined one
/// (earlier wins ties).
pub fn combine_candidates(cands: impl IntoIterator<Item = Sharding>) -> Option<Sharding> {
    let mut acc: Option<Sharding> = None;
    for c in cands {
        if c.is_replicated() {
            continue;
        }
        acc = Some(match acc {
            None => c,
            Some(a) => match merge_shardings(&a, &c) {
                Some(m) => m,
                None if c.total_tiles() > a.total_tiles() => c,
                None => a,
            },
        });
    }
    acc
}

/// Result sharding implied by the known operand shardings.
pub fn infer_forward(g: &Graph, ins: &Instruction, operands: &[Option<Sharding>]) -> Option<Sharding> {
    let mut cands = Vec::new();
    for (k, s) in operands.iter().enumerate() {
        let Some(s) = s else { continue };
        if s.is_replicated() {
            continue;
        }
        let map = match &ins.op {
            Op::Reshape { out_dims } => reshape_map(&g.shape(ins.operands[0]).dims, out_dims, s),
            _ => result_from_operand(g, ins, k),
        };
        if let Some(c) = map.and_then(|m| s.remap_dims(&m)) {
            cands.push(c);
        }
    }
    combine_candidates(cands)
}

/// Sharding for operand `k` implied by the result sharding.
pub fn infer_backward(g: &Graph, ins: &Instruction, result: &Sharding, k: usize) -> Option<Sharding> {
    if result.is_replicated() {
        return None;
    }
    let opnd = g.shape(ins.operands[k]);
    let inv = match &ins.op {
        Op::Reshape { out_dims } => reshape_map(out_dims, &opnd.dims, result)?,
        _ => invert(&result_from_operand(g, ins, k)?, opnd.rank()),
    };
    let c = result.remap_dims(&inv)?;
    if c.is_replicated() {
        None
    } else {
        Some(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups() {
        assert_eq!(reshape_groups(&[3, 2], &[6]).unwrap(), vec![(vec![0, 1], vec![0])]);
        assert_eq!(
            reshape_groups(&[4, 3, 1], &[2, 2, 3]).unwrap(),
            vec![(vec![0], vec![0, 1]), (vec![1], vec![2]), (vec![2], vec![])]
        );
        assert_eq!(reshape_groups(&[2, 3], &[3, 2]).unwrap(), vec![(vec![0, 1], vec![0, 1])]);
    }
}
