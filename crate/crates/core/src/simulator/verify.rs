//! End-to-end check: partition, run every device in lockstep, reassemble
//! and compare with the single-device result.

use std::collections::BTreeMap;

use serde::Serialize;

use super::{evaluate_single, execute_spmd, SimError};
use crate::ir::graph::Graph;
use crate::partitioner::{partition, SpmdProgram};
use crate::sharding::{assemble_data, shard_data, values_close};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    /// Relative tolerance for f32 values; integers compare exactly.
    pub tol: f64,
    /// Written past the end of uneven shards, so values that leak out of
    /// the padding show up as mismatches.
    pub pad: i64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { tol: 1e-4, pad: 7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub pass: bool,
    pub max_abs: f64,
    pub max_rel: f64,
    pub mismatches: usize,
    pub collectives: BTreeMap<String, usize>,
}

impl EquivalenceReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Runs `program` on full-size `inputs` and returns full-size outputs.
pub fn evaluate_spmd(program: &SpmdProgram, inputs: &[Tensor], opts: &VerifyOptions) -> Result<Vec<Tensor>, SimError> {
    let n = program.num_partitions;
    if inputs.len() != program.param_shapes.len() {
        return Err(SimError::InputCount { expected: program.param_shapes.len(), got: inputs.len() });
    }
    let mut per_device = vec![Vec::with_capacity(inputs.len()); n];
    for (k, (t, s)) in inputs.iter().zip(&program.param_shardings).enumerate() {
        if t.shape() != &program.param_shapes[k] {
            return Err(SimError::InputShape { index: k, expected: program.param_shapes[k].clone(), got: t.shape().clone() });
        }
        let shards = shard_data(t, s, n, Scalar::from_i64(t.dtype(), opts.pad))?;
        for (d, shard) in shards {
            per_device[d as usize].push(shard);
        }
    }
    let outs = execute_spmd(&program.graph, &per_device)?;
    let mut full = Vec::with_capacity(program.output_shapes.len());
    for (k, (s, shape)) in program.output_shardings.iter().zip(&program.output_shapes).enumerate() {
        let map: BTreeMap<u32, Tensor> = outs.iter().enumerate().map(|(d, o)| (d as u32, o[k].clone())).collect();
        full.push(assemble_data(&map, s, shape, opts.tol)?);
    }
    Ok(full)
}

/// Partitions the fully annotated `g` for `num_partitions` devices and
/// compares its outputs with single-device evaluation.
pub fn verify_equivalence(
    g: &Graph,
    num_partitions: usize,
    inputs: &[Tensor],
    opts: &VerifyOptions,
) -> Result<EquivalenceReport, SimError> {
    let program = partition(g, num_partitions).map_err(|e| SimError::Partition(e.to_string()))?;
    verify_program(g, &program, inputs, opts)
}

pub fn verify_program(
    g: &Graph,
    program: &SpmdProgram,
    inputs: &[Tensor],
    opts: &VerifyOptions,
) -> Result<EquivalenceReport, SimError> {
    let want = evaluate_single(g, inputs)?;
    let got = evaluate_spmd(program, inputs, opts)?;
    let (mut max_abs, mut max_rel, mut mismatches) = (0.0f64, 0.0f64, 0);
    for (w, o) in want.iter().zip(&got) {
        for k in 0..w.len() {
            let (a, b) = (o.get_flat(k), w.get_flat(k));
            let diff = (a.as_f64() - b.as_f64()).abs();
            if diff.is_finite() {
                max_abs = max_abs.max(diff);
                max_rel = max_rel.max(diff / b.as_f64().abs().max(1.0));
            }
            if !values_close(a, b, opts.tol) {
                mismatches += 1;
            }
        }
    }
    Ok(EquivalenceReport { pass: mismatches == 0, max_abs, max_rel, mismatches, collectives: program.stats().counts })
}
