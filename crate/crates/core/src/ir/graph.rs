use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::infer::infer_shape;
use super::op::Op;
use super::shape::Shape;
use super::IrError;
use crate::sharding::{DeviceMesh, Sharding};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InstrId(pub u32);

impl InstrId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for InstrId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    pub id: InstrId,
    pub name: String,
    pub op: Op,
    pub operands: Vec<InstrId>,
    pub shape: Shape,
    pub sharding: Option<Sharding>,
}

/// SSA dataflow graph. Instruction `k` has id `k`; operands point backwards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    pub name: String,
    pub mesh: Option<DeviceMesh>,
    pub instructions: Vec<Instruction>,
    pub outputs: Vec<InstrId>,
}

impl Graph {
    pub fn new(name: impl Into<String>) -> Graph {
        Graph { name: name.into(), mesh: None, instructions: Vec::new(), outputs: Vec::new() }
    }

    pub fn instr(&self, id: InstrId) -> &Instruction {
        &self.instructions[id.index()]
    }

    pub fn instr_mut(&mut self, id: InstrId) -> &mut Instruction {
        &mut self.instructions[id.index()]
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    pub fn shape(&self, id: InstrId) -> &Shape {
        &self.instr(id).shape
    }

    /// Parameter instructions ordered by parameter index.
    pub fn parameters(&self) -> Vec<&Instruction> {
        let mut ps: Vec<&Instruction> = self.instructions.iter().filter(|i| matches!(i.op, Op::Parameter { .. })).collect();
        ps.sort_by_key(|i| match i.op {
            Op::Parameter { index, .. } => index,
            _ => unreachable!(),
        });
        ps
    }

    pub fn parameter_shapes(&self) -> Vec<Shape> {
        self.parameters().iter().map(|p| p.shape.clone()).collect()
    }

    /// For each instruction, the instructions that use it (in order).
    pub fn users(&self) -> Vec<Vec<InstrId>> {
        let mut users = vec![Vec::new(); self.len()];
        for ins in &self.instructions {
            for &o in &ins.operands {
                if o.index() < users.len() && !users[o.index()].contains(&ins.id) {
                    users[o.index()].push(ins.id);
                }
            }
        }
        users
    }

    pub fn find(&self, name: &str) -> Option<InstrId> {
        self.instructions.iter().find(|i| i.name == name).map(|i| i.id)
    }

    pub fn has_collectives(&self) -> bool {
        self.instructions.iter().any(|i| i.op.is_collective())
    }

    /// Removes instructions that do not reach an output, renumbering ids.
    pub fn without_dead_code(&self) -> Graph {
        let mut live = vec![false; self.len()];
        for o in &self.outputs {
            live[o.index()] = true;
        }
        for k in (0..self.len()).rev() {
            if live[k] {
                for o in &self.instructions[k].operands {
                    live[o.index()] = true;
                }
            }
            // parameters stay so the signature is unchanged
            if matches!(self.instructions[k].op, Op::Parameter { .. }) {
                live[k] = true;
            }
        }
        let mut remap = vec![None; self.len()];
        let mut out = Graph { name: self.name.clone(), mesh: self.mesh.clone(), instructions: Vec::new(), outputs: Vec::new() };
        for (k, ins) in self.instructions.iter().enumerate() {
            if !live[k] {
                continue;
            }
            let id = InstrId(out.instructions.len() as u32);
            remap[k] = Some(id);
            let mut ni = ins.clone();
            ni.id = id;
            ni.operands = ins.operands.iter().map(|o| remap[o.index()].expect("operand is live")).collect();
            out.instructions.push(ni);
        }
        out.outputs = self.outputs.iter().map(|o| remap[o.index()].unwrap()).collect();
        out
    }
}

/// A validation finding tied to an instruction (or the graph when `id` is
/// `None`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub id: Option<InstrId>,
    pub name: Option<String>,
    pub rule: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.id, &self.name) {
            (Some(id), Some(n)) => write!(f, "%{n} ({id}): {}: {}", self.rule, self.message),
            (Some(id), None) => write!(f, "{id}: {}: {}", self.rule, self.message),
            _ => write!(f, "graph: {}: {}", self.rule, self.message),
        }
    }
}

/// Checks SSA order, shapes, parameter numbering, outputs and shardings.
pub fn validate_graph(g: &Graph) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut diag = |ins: Option<&Instruction>, rule: &str, message: String| {
        out.push(Diagnostic {
            id: ins.map(|i| i.id),
            name: ins.map(|i| i.name.clone()),
            rule: rule.to_string(),
            message,
        })
    };
    let mut names = HashSet::new();
    let mut param_indices = Vec::new();
    for (k, ins) in g.instructions.iter().enumerate() {
        if ins.id.index() != k {
            diag(Some(ins), "bad-id", format!("instruction at position {k} has id {}", ins.id.0));
        }
        if !names.insert(ins.name.as_str()) {
            diag(Some(ins), "duplicate-name", format!("name %{} defined twice", ins.name));
        }
        let mut operands_ok = true;
        for o in &ins.operands {
            if o.index() >= k {
                operands_ok = false;
                let what = if o.index() < g.len() { "a later instruction" } else { "an undefined id" };
                diag(Some(ins), "use-before-def", format!("operand {} refers to {what}", o.0));
            }
        }
        if let Op::Parameter { index, .. } = ins.op {
            param_indices.push(index);
        }
        if operands_ok {
            let shapes: Vec<Shape> = ins.operands.iter().map(|o| g.instructions[o.index()].shape.clone()).collect();
            match infer_shape(&ins.op, &shapes) {
                Ok(s) if s != ins.shape => {
                    diag(Some(ins), "shape mismatch", format!("declared {} but {} infers {s}", ins.shape, ins.op.name()))
                }
                Ok(_) => {}
                Err(IrError::IncompatibleShapes(m)) => diag(Some(ins), "shape mismatch", m),
                Err(e) => diag(Some(ins), "invalid-op", e.to_string()),
            }
        }
        if let Some(s) = &ins.sharding {
            if let Err(e) = s.check_rank(ins.shape.rank()) {
                diag(Some(ins), "sharding", e.to_string());
            } else if let (Some(mesh), Some(set)) = (&g.mesh, s.device_set()) {
                let mut ids = mesh.device_ids().to_vec();
                ids.sort_unstable();
                if ids != set {
                    diag(Some(ins), "sharding", format!("devices {set:?} differ from the mesh devices"));
                }
            }
        }
    }
    param_indices.sort_unstable();
    if param_indices.iter().enumerate().any(|(i, &p)| i != p) {
        diag(None, "parameter-index", format!("parameter indices {param_indices:?} are not 0..n"));
    }
    if g.outputs.is_empty() {
        diag(None, "no-output", "graph returns nothing".into());
    }
    for o in &g.outputs {
        if o.index() >= g.len() {
            diag(None, "undefined-output", format!("output {} is not defined", o.0));
        }
    }
    out
}

/// Appends instructions with inferred shapes and unique names.
#[derive(Clone, Debug)]
pub struct GraphBuilder {
    graph: Graph,
    names: HashSet<String>,
    num_params: usize,
}

impl GraphBuilder {
    pub fn new(name: impl Into<String>) -> GraphBuilder {
        GraphBuilder { graph: Graph::new(name), names: HashSet::new(), num_params: 0 }
    }

    pub fn with_mesh(mut self, mesh: DeviceMesh) -> GraphBuilder {
        self.graph.mesh = Some(mesh);
        self
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn shape(&self, id: InstrId) -> &Shape {
        self.graph.shape(id)
    }

    pub fn len(&self) -> usize {
        self.graph.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graph.is_empty()
    }

    /// Appends `op` with the given name hint (defaults to the opcode name).
    pub fn add_named(&mut self, name: Option<&str>, op: Op, operands: &[InstrId]) -> Result<InstrId, IrError> {
        for o in operands {
            if o.index() >= self.graph.len() {
                return Err(IrError::UnknownInstruction(o.0));
            }
        }
        let shapes: Vec<Shape> = operands.iter().map(|o| self.graph.shape(*o).clone()).collect();
        let shape = infer_shape(&op, &shapes)?;
        let name = match name {
            Some(n) if self.names.insert(n.to_string()) => n.to_string(),
            other => {
                let base = other.unwrap_or(op.name());
                let mut candidate = format!("{base}.{}", self.graph.len());
                while !self.names.insert(candidate.clone()) {
                    candidate.push('_');
                }
                candidate
            }
        };
        let id = InstrId(self.graph.len() as u32);
        self.graph.instructions.push(Instruction { id, name, op, operands: operands.to_vec(), shape, sharding: None });
        Ok(id)
    }

    pub fn add(&mut self, op: Op, operands: &[InstrId]) -> Result<InstrId, IrError> {
        self.add_named(None, op, operands)
    }

    /// Next parameter, numbered in creation order.
    pub fn parameter(&mut self, name: &str, shape: Shape) -> InstrId {
        let index = self.num_params;
        self.num_params += 1;
        self.add_named(Some(name), Op::Parameter { index, shape }, &[]).expect("parameters always infer")
    }

    pub fn constant(&mut self, literal: Tensor) -> InstrId {
        self.add(Op::Constant { literal }, &[]).expect("constants always infer")
    }

    pub fn set_sharding(&mut self, id: InstrId, sharding: Option<Sharding>) {
        self.graph.instr_mut(id).sharding = sharding;
    }

    pub fn finish(mut self, outputs: &[InstrId]) -> Graph {
        self.graph.outputs = outputs.to_vec();
        self.graph
    }
}
