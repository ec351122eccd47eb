//! Graphviz rendering: one box per instruction labelled with its shape and
//! sharding; collectives are filled.

use std::fmt::Write as _;

use meshpart::ir::Graph;

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

pub fn to_dot(g: &Graph) -> String {
    let mut out = format!("digraph \"{}\" {{\n  rankdir=TB;\n  node [shape=box, fontname=\"monospace\"];\n", escape(&g.name));
    for ins in &g.instructions {
        let mut label = format!("%{}\\n{} {}", escape(&ins.name), ins.op.name(), ins.shape);
        if let Some(s) = &ins.sharding {
            let _ = write!(label, "\\n{{{}}}", escape(&s.to_string()));
        }
        let style = if ins.op.is_collective() { ", style=filled, fillcolor=\"#f4a582\", penwidth=2" } else { "" };
        let _ = writeln!(out, "  n{} [label=\"{label}\"{style}];", ins.id.0);
    }
    for ins in &g.instructions {
        for o in &ins.operands {
            let _ = writeln!(out, "  n{} -> n{};", o.0, ins.id.0);
        }
    }
    for (k, o) in g.outputs.iter().enumerate() {
        let _ = writeln!(out, "  out{k} [label=\"return {k}\", shape=plaintext];\n  n{} -> out{k};", o.0);
    }
    out.push_str("}\n");
    out
}
