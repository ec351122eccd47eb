//! Collective counts for a partitioned program and the local cleanups run on
//! it before it is returned.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::ir::graph::{Graph, InstrId};
use crate::ir::op::Op;
use crate::tensor::Scalar;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CollectiveStats {
    /// Instructions per collective opcode name.
    pub counts: BTreeMap<String, usize>,
    /// Bytes sent per device, summed over participating devices. A ring
    /// all-reduce sends `2(k-1)/k` of its operand, reduce-scatter and
    /// all-to-all `(k-1)/k`, all-gather `k-1` shards and a permute one
    /// operand per source/target pair.
    pub bytes: BTreeMap<String, usize>,
    pub total_bytes: usize,
}

impl CollectiveStats {
    pub fn of(g: &Graph) -> CollectiveStats {
        let mut st = CollectiveStats::default();
        for ins in &g.instructions {
            if !ins.op.is_collective() {
                continue;
            }
            let size = g.shape(ins.operands[0]).byte_size();
            // Bytes each device sends, summed over the devices taking part.
            let per_group = |groups: &Vec<Vec<u32>>, f: &dyn Fn(usize) -> usize| groups.iter().map(|gr| gr.len() * f(gr.len())).sum::<usize>();
            let operand = match &ins.op {
                Op::AllReduce { groups, .. } => per_group(groups, &|k| 2 * (k - 1) * size / k),
                Op::ReduceScatter { groups, .. } | Op::AllToAll { groups, .. } => per_group(groups, &|k| (k - 1) * size / k),
                Op::AllGather { groups, .. } => per_group(groups, &|k| (k - 1) * size),
                Op::CollectivePermute { pairs } => pairs.len() * size,
                _ => continue,
            };
            let name = ins.op.name().to_string();
            *st.counts.entry(name.clone()).or_default() += 1;
            *st.bytes.entry(name).or_default() += operand;
            st.total_bytes += operand;
        }
        st
    }

    pub fn count(&self, op: &str) -> usize {
        self.counts.get(op).copied().unwrap_or(0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize")
    }
}

fn constant_pred(g: &Graph, id: InstrId) -> Option<bool> {
    let ins = g.instr(id);
    match &ins.op {
        Op::Constant { literal } => {
            let first = literal.get_flat(0);
            let uniform = (0..literal.len()).all(|k| literal.get_flat(k) == first);
            match first {
                Scalar::Pred(p) if uniform => Some(p),
                _ => None,
            }
        }
        Op::Broadcast { .. } => constant_pred(g, ins.operands[0]),
        _ => None,
    }
}

/// Folds selects on uniform constant predicates, drops empty concat
/// operands and removes dead instructions.
pub(crate) fn simplify(g: &Graph) -> Graph {
    let mut out = g.clone();
    let mut alias: Vec<InstrId> = (0..g.len() as u32).map(InstrId).collect();
    for k in 0..out.len() {
        let ins = &mut out.instructions[k];
        for o in ins.operands.iter_mut() {
            *o = alias[o.index()];
        }
        match &ins.op {
            Op::Select => {
                if let Some(p) = constant_pred(g, ins.operands[0]) {
                    alias[k] = ins.operands[if p { 1 } else { 2 }];
                }
            }
            Op::Concat { dim } => {
                let dim = *dim;
                let keep: Vec<InstrId> = ins.operands.iter().copied().filter(|o| g.shape(*o).dims[dim] > 0).collect();
                if keep.len() == 1 {
                    alias[k] = keep[0];
                } else if !keep.is_empty() {
                    ins.operands = keep;
                }
            }
            _ => {}
        }
    }
    for o in out.outputs.iter_mut() {
        *o = alias[o.index()];
    }
    out.without_dead_code()
}
