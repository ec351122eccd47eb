//! Failures, their exit codes and the one-line JSON diagnostic printed on
//! stderr.

use meshpart::ir::{Diagnostic, Graph, ParseError};
use meshpart::partitioner::PartitionError;
use meshpart::pipeline::PipelineError;
use meshpart::propagation::PropagationError;
use meshpart::simulator::SimError;
use serde_json::{json, Value};

pub const MISMATCH: i32 = 1;
pub const INVALID: i32 = 2;
pub const INTERNAL: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
    /// Source instruction name, id and line.
    pub instr: Option<(String, Option<u32>, Option<usize>)>,
    pub column: Option<usize>,
    pub line: Option<usize>,
}

impl CliError {
    pub fn new(code: i32, kind: &'static str, message: impl Into<String>) -> CliError {
        CliError { code, kind, message: message.into(), instr: None, column: None, line: None }
    }

    pub fn usage(message: impl Into<String>) -> CliError {
        CliError::new(INVALID, "usage", message)
    }

    pub fn io(path: &str, e: std::io::Error) -> CliError {
        CliError::new(INVALID, "io", format!("{path}: {e}"))
    }

    pub fn parse(e: &ParseError) -> CliError {
        CliError { line: Some(e.line), column: Some(e.column), ..CliError::new(INVALID, "parse", e.message.clone()) }
    }

    pub fn validation(diags: &[Diagnostic], src: &Source) -> CliError {
        let first = &diags[0];
        let message = diags.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; ");
        let mut e = CliError::new(INVALID, "validation", message);
        if let Some(id) = first.id {
            e.instr = Some((first.name.clone().unwrap_or_default(), Some(id.0), src.line_of_id(id.0)));
        }
        e
    }

    /// Attaches the source position of instruction `name`, if it has one.
    pub fn at(mut self, name: Option<&str>, src: &Source) -> CliError {
        if let Some(n) = name {
            let id = src.graph.as_ref().and_then(|g| g.find(n)).map(|i| i.0);
            self.instr = Some((n.to_string(), id, id.and_then(|i| src.line_of_id(i))));
        }
        self
    }

    pub fn propagation(e: &PropagationError, src: &Source) -> CliError {
        let name = match e {
            PropagationError::ConflictingUserAnnotations { a, .. } => Some(a.as_str()),
            PropagationError::InvalidGraph(_) => None,
        };
        CliError::new(INVALID, "propagation", e.to_string()).at(name, src)
    }

    pub fn partition(e: &PartitionError, src: &Source) -> CliError {
        let code = match e {
            PartitionError::InvalidGraph(_)
            | PartitionError::MissingSharding(_)
            | PartitionError::UnsupportedInput { .. }
            | PartitionError::UnsupportedSharding { .. } => INVALID,
            _ => INTERNAL,
        };
        CliError::new(code, "partition", e.to_string()).at(e.instruction(), src)
    }

    /// `origin` maps an emitted instruction back to its source instruction.
    pub fn simulation(e: &SimError, src: &Source, origin: impl Fn(&str) -> Option<String>) -> CliError {
        let code = match e {
            SimError::InputCount { .. } | SimError::InputShape { .. } | SimError::DivideByZero { .. } => INVALID,
            _ => INTERNAL,
        };
        let name = e.instruction().map(|n| origin(n).unwrap_or_else(|| n.to_string()));
        CliError::new(code, "simulation", e.to_string()).at(name.as_deref(), src)
    }

    pub fn pipeline(e: &PipelineError) -> CliError {
        let code = match e {
            PipelineError::Ir(_) => INTERNAL,
            _ => INVALID,
        };
        CliError::new(code, "pipeline", e.to_string())
    }

    pub fn to_json(&self) -> Value {
        let mut v = json!({ "error": self.kind, "exit_code": self.code, "message": self.message });
        if let Some((name, id, line)) = &self.instr {
            v["instruction"] = json!(format!("%{name}"));
            v["id"] = json!(id);
            v["line"] = json!(line);
        }
        if let Some(l) = self.line {
            v["line"] = json!(l);
        }
        if let Some(c) = self.column {
            v["column"] = json!(c);
        }
        v
    }
}

/// The input graph and the text line of each instruction.
#[derive(Default)]
pub struct Source {
    pub graph: Option<Graph>,
    pub lines: Vec<usize>,
}

impl Source {
    pub fn line_of_id(&self, id: u32) -> Option<usize> {
        self.lines.get(id as usize).copied()
    }
}
