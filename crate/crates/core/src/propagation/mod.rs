//! Sharding completion: fills in shardings for unannotated values by
//! repeated forward and backward sweeps, trying cheap shape-preserving
//! rules before shape-changing ones.

pub mod rules;

use serde::Serialize;
use thiserror::Error;

use crate::ir::graph::{validate_graph, Graph, InstrId};
use crate::sharding::{merge_shardings, DeviceId, Sharding};

pub use rules::{infer_backward, infer_forward, reshape_groups, tiers, Direction, Tier};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PropagationError {
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("conflicting user annotations: %{a} uses devices {da:?} but %{b} uses {db:?}")]
    ConflictingUserAnnotations { a: String, da: Vec<DeviceId>, b: String, db: Vec<DeviceId> },
}

#[derive(Debug, Clone)]
pub struct PropagationOptions {
    /// When false every rule fires in plain topological order.
    pub use_priorities: bool,
    /// Sweep cap; defaults to 10 x graph size.
    pub max_sweeps: Option<usize>,
}

impl Default for PropagationOptions {
    fn default() -> Self {
        PropagationOptions { use_priorities: true, max_sweeps: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Change {
    pub sweep: usize,
    pub instr: u32,
    pub name: String,
    pub old: Option<String>,
    pub new: String,
    pub rule: String,
    pub direction: Direction,
    pub tier: Tier,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropagationReport {
    /// Sweeps that changed something, plus the final quiet one.
    pub iterations: usize,
    /// Every forward+backward sweep run, across all tiers.
    pub sweeps: usize,
    pub hit_cap: bool,
    pub final_shardings: Vec<(String, String)>,
    pub changes: Vec<Change>,
}

impl PropagationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// What may still change on a value.
#[derive(Clone)]
enum Freedom {
    Free,
    Fixed,
    /// Only these dims may be refined.
    Open(Vec<usize>),
}

struct State<'g> {
    g: &'g Graph,
    cur: Vec<Option<Sharding>>,
    freedom: Vec<Freedom>,
    changes: Vec<Change>,
    sweep: usize,
}

impl State<'_> {
    /// Applies a candidate to `id`; true when its sharding got finer.
    fn offer(&mut self, id: InstrId, cand: Sharding, rule: &str, direction: Direction, tier: Tier) -> bool {
        let i = id.index();
        let rank = self.g.shape(id).rank();
        let cand = match &self.freedom[i] {
            Freedom::Fixed => return false,
            Freedom::Free => cand,
            Freedom::Open(open) => {
                let closed: Vec<usize> = (0..rank).filter(|d| !open.contains(d)).collect();
                cand.replicate_dims(&closed)
            }
        };
        if cand.is_replicated() {
            return false;
        }
        let old_tiles = self.cur[i].as_ref().map_or(1, |s| s.total_tiles());
        let merged = match &self.cur[i] {
            None => Some(cand),
            Some(s) => merge_shardings(s, &cand),
        };
        let Some(merged) = merged else { return false };
        if merged.total_tiles() <= old_tiles {
            return false;
        }
        self.changes.push(Change {
            sweep: self.sweep,
            instr: id.0,
            name: self.g.instr(id).name.clone(),
            old: self.cur[i].as_ref().map(|s| s.to_string()),
            new: merged.to_string(),
            rule: rule.to_string(),
            direction,
            tier,
        });
        self.cur[i] = Some(merged);
        true
    }

    /// One forward then one backward pass over rules with tier <= `max_tier`.
    fn sweep(&mut self, max_tier: Tier) -> bool {
        let mut changed = false;
        let g = self.g;
        for ins in &g.instructions {
            let (Some(t), _) = tiers(&ins.op) else { continue };
            if t > max_tier {
                continue;
            }
            let ops: Vec<Option<Sharding>> = ins.operands.iter().map(|o| self.cur[o.index()].clone()).collect();
            if let Some(c) = infer_forward(g, ins, &ops) {
                changed |= self.offer(ins.id, c, ins.op.name(), Direction::Forward, t);
            }
        }
        for ins in g.instructions.iter().rev() {
            let (_, Some(t)) = tiers(&ins.op) else { continue };
            if t > max_tier {
                continue;
            }
            let Some(res) = self.cur[ins.id.index()].clone() else { continue };
            for (k, &o) in ins.operands.iter().enumerate() {
                if let Some(c) = infer_backward(g, ins, &res, k) {
                    changed |= self.offer(o, c, ins.op.name(), Direction::Backward, t);
                }
            }
        }
        changed
    }
}

fn check_user_devices(g: &Graph) -> Result<(), PropagationError> {
    let mut first: Option<(String, Vec<DeviceId>)> = None;
    for ins in &g.instructions {
        let Some(set) = ins.sharding.as_ref().and_then(|s| s.device_set()) else { continue };
        match &first {
            None => first = Some((ins.name.clone(), set)),
            Some((a, da)) if *da != set => {
                return Err(PropagationError::ConflictingUserAnnotations { a: a.clone(), da: da.clone(), b: ins.name.clone(), db: set })
            }
            _ => {}
        }
    }
    Ok(())
}

pub fn propagate(g: &Graph) -> Result<(Graph, PropagationReport), PropagationError> {
    propagate_with(g, &PropagationOptions::default())
}

/// Completes shardings on every instruction. User annotations stay as given
/// apart from their unspecified dims; unresolved values become replicated.
pub fn propagate_with(g: &Graph, opts: &PropagationOptions) -> Result<(Graph, PropagationReport), PropagationError> {
    let diags = validate_graph(g);
    if !diags.is_empty() {
        return Err(PropagationError::InvalidGraph(diags.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; ")));
    }
    check_user_devices(g)?;
    let mut cur = Vec::with_capacity(g.len());
    let mut freedom = Vec::with_capacity(g.len());
    for ins in &g.instructions {
        match &ins.sharding {
            None => {
                cur.push(None);
                freedom.push(Freedom::Free);
            }
            Some(s) if s.unspecified_dims().is_empty() => {
                cur.push(Some(s.clone()));
                freedom.push(Freedom::Fixed);
            }
            Some(s) => {
                let open = s.unspecified_dims().to_vec();
                let base = s.replicate_dims(&open).with_unspecified([]);
                cur.push(if base.is_replicated() { None } else { Some(base) });
                freedom.push(Freedom::Open(open));
            }
        }
    }
    let mut st = State { g, cur, freedom, changes: Vec::new(), sweep: 0 };
    let cap = opts.max_sweeps.unwrap_or(10 * g.len().max(1));
    let tier_list: Vec<Tier> = if opts.use_priorities { (0..=4).collect() } else { vec![Tier::MAX] };
    let mut effective = 0;
    let mut hit_cap = false;
    'tiers: for &t in &tier_list {
        loop {
            if st.sweep >= cap {
                hit_cap = true;
                break 'tiers;
            }
            st.sweep += 1;
            if st.sweep(t) {
                effective += 1;
            } else {
                break;
            }
        }
    }
    let mut out = g.clone();
    for (ins, s) in out.instructions.iter_mut().zip(&st.cur) {
        ins.sharding = Some(s.clone().unwrap_or_else(Sharding::replicated).with_unspecified([]));
    }
    let report = PropagationReport {
        iterations: effective + 1,
        sweeps: st.sweep,
        hit_cap,
        final_shardings: out.instructions.iter().map(|i| (i.name.clone(), i.sharding.as_ref().unwrap().to_string())).collect(),
        changes: st.changes,
    };
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::text::parse_graph;

    #[test]
    fn fully_annotated_graph_is_a_fixed_point() {
        let g = parse_graph(
            "graph @g {\n  %x = f32[8] parameter(0), sharding={devices=[2]0,1}\n  %y = f32[8] negate(%x), sharding={devices=[2]1,0}\n  return %y\n}\n",
        )
        .unwrap();
        let (out, rep) = propagate(&g).unwrap();
        assert_eq!(out, g);
        assert_eq!(rep.iterations, 1);
        assert!(rep.changes.is_empty());
    }

    #[test]
    fn einsum_output_inferred_from_weights() {
        // EBD,EDF->EBF with operands split on E (mesh dim 0) and F (mesh dim 1)
        let g = parse_graph(
            "graph @g (mesh=[2,2]) {\n  %x = f32[4,8,6] parameter(0), sharding={devices=[2,1,1,2]0,1,2,3 last_tile_dim_replicate}\n  %w = f32[4,6,10] parameter(1), sharding={devices=[2,1,2]0,1,2,3}\n  %y = f32[4,8,10] dot(%x, %w), lhs_batch_dims={0}, rhs_batch_dims={0}, lhs_contracting_dims={2}, rhs_contracting_dims={1}\n  return %y\n}\n",
        )
        .unwrap();
        let (out, _) = propagate(&g).unwrap();
        assert_eq!(out.instructions[2].sharding.as_ref().unwrap().to_string(), "devices=[2,1,2]0,1,2,3");
    }

    #[test]
    fn open_dims_refine_only_there() {
        let g = parse_graph(
            "graph @g (mesh=[2,2]) {\n  %x = f32[4,4] parameter(0), sharding={devices=[1,2,2]0,2,1,3 last_tile_dim_replicate}\n  %y = f32[4,4] negate(%x), sharding={devices=[2,1,2]0,1,2,3 last_tile_dim_replicate unspecified_dims={1}}\n  return %y\n}\n",
        )
        .unwrap();
        let (out, _) = propagate(&g).unwrap();
        assert_eq!(out.instructions[1].sharding.as_ref().unwrap().to_string(), "devices=[2,2]0,1,2,3");
    }

    #[test]
    fn mismatched_device_sets_are_rejected() {
        let g = parse_graph(
            "graph @g {\n  %x = f32[8] parameter(0), sharding={devices=[2]0,1}\n  %y = f32[8] negate(%x), sharding={devices=[2]2,3}\n  return %y\n}\n",
        )
        .unwrap();
        assert!(matches!(propagate(&g), Err(PropagationError::ConflictingUserAnnotations { .. })));
    }
}
