//! Python bindings: graphs, propagation, partitioning, simulation and the
//! pipeline unroll.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use meshpart::ir::{parse_graph, parse_tensor, print_graph, print_tensor, validate_graph, DType};
use meshpart::partitioner::{partition, SpmdProgram};
use meshpart::pipeline::{self, PipelineConfig, Schedule};
use meshpart::propagation::{propagate_with, PropagationOptions};
use meshpart::sharding::Sharding;
use meshpart::simulator::{self, VerifyOptions};
use meshpart::tensor::{Scalar, Tensor};

fn err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A dense tensor with an element type and dims.
#[pyclass(name = "Tensor", module = "meshpart_py")]
#[derive(Clone)]
struct PyTensor {
    inner: Tensor,
}

#[pymethods]
impl PyTensor {
    /// `dtype` is one of f32, s32, u32, pred; `values` are row-major.
    #[new]
    fn new(dtype: &str, dims: Vec<usize>, values: Vec<f64>) -> PyResult<Self> {
        let dt = DType::from_name(dtype).ok_or_else(|| err(format!("unknown dtype '{dtype}'")))?;
        let n: usize = dims.iter().product();
        if values.len() != n {
            return Err(err(format!("{} values for dims {dims:?}", values.len())));
        }
        let inner = match dt {
            DType::F32 => Tensor::from_f32(dims, values.iter().map(|&v| v as f32).collect()),
            DType::S32 => Tensor::from_i32(dims, values.iter().map(|&v| v as i32).collect()),
            DType::U32 => Tensor::from_u32(dims, values.iter().map(|&v| v as u32).collect()),
            DType::Pred => Tensor::from_pred(dims, values.iter().map(|&v| v != 0.0).collect()),
        };
        Ok(PyTensor { inner })
    }

    /// Parses a literal such as `s32[2,2] [[1,2],[3,4]]`.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        parse_tensor(text).map(|inner| PyTensor { inner }).map_err(err)
    }

    #[getter]
    fn dtype(&self) -> &'static str {
        self.inner.dtype().name()
    }

    #[getter]
    fn dims(&self) -> Vec<usize> {
        self.inner.dims().to_vec()
    }

    /// Flat row-major values as Python numbers or bools.
    fn values(&self, py: Python<'_>) -> Vec<PyObject> {
        (0..self.inner.len())
            .map(|i| match self.inner.get_flat(i) {
                Scalar::F32(v) => v.into_py(py),
                Scalar::S32(v) => v.into_py(py),
                Scalar::U32(v) => v.into_py(py),
                Scalar::Pred(v) => v.into_py(py),
            })
            .collect()
    }

    fn __str__(&self) -> String {
        print_tensor(&self.inner)
    }

    fn __repr__(&self) -> String {
        format!("Tensor({})", print_tensor(&self.inner))
    }

    fn __eq__(&self, other: &PyTensor) -> bool {
        self.inner == other.inner
    }
}

fn tensors(ts: Vec<Tensor>) -> Vec<PyTensor> {
    ts.into_iter().map(|inner| PyTensor { inner }).collect()
}

fn unwrap(ts: Vec<PyTensor>) -> Vec<Tensor> {
    ts.into_iter().map(|t| t.inner).collect()
}

#[pyclass(name = "Graph", module = "meshpart_py")]
#[derive(Clone)]
struct PyGraph {
    inner: meshpart::ir::Graph,
}

#[pymethods]
impl PyGraph {
    /// Parses and validates graph text.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        let g = parse_graph(text).map_err(err)?;
        let diags = validate_graph(&g);
        if let Some(d) = diags.first() {
            return Err(err(d));
        }
        Ok(PyGraph { inner: g })
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    /// Instruction names in order.
    fn instructions(&self) -> Vec<String> {
        self.inner.instructions.iter().map(|i| i.name.clone()).collect()
    }

    /// Sharding text of instruction `name`, or None when unannotated.
    fn sharding(&self, name: &str) -> PyResult<Option<String>> {
        let id = self.inner.find(name).ok_or_else(|| err(format!("no instruction '%{name}'")))?;
        Ok(self.inner.instr(id).sharding.as_ref().map(|s| s.to_string()))
    }

    /// Completes the annotations. Returns the new graph and the JSON trace;
    /// `replicate_rest` replicates whatever propagation left open.
    #[pyo3(signature = (priorities = true, replicate_rest = false))]
    fn propagate(&self, priorities: bool, replicate_rest: bool) -> PyResult<(PyGraph, String)> {
        let opts = PropagationOptions { use_priorities: priorities, ..Default::default() };
        let (mut g, report) = propagate_with(&self.inner, &opts).map_err(err)?;
        if replicate_rest {
            for ins in &mut g.instructions {
                ins.sharding.get_or_insert_with(Sharding::replicated);
            }
        }
        Ok((PyGraph { inner: g }, report.to_json()))
    }

    /// Lowers a fully annotated graph to a per-device program.
    #[pyo3(signature = (devices = None))]
    fn partition(&self, devices: Option<usize>) -> PyResult<PyProgram> {
        let n = devices.or_else(|| self.inner.mesh.as_ref().map(|m| m.num_devices())).unwrap_or(1);
        partition(&self.inner, n).map(|inner| PyProgram { inner }).map_err(err)
    }

    /// Single-device reference evaluation.
    fn evaluate(&self, inputs: Vec<PyTensor>) -> PyResult<Vec<PyTensor>> {
        simulator::evaluate_single(&self.inner, &unwrap(inputs)).map(tensors).map_err(err)
    }

    /// One seeded random value per parameter.
    #[pyo3(signature = (seed = 0))]
    fn random_inputs(&self, seed: u64) -> Vec<PyTensor> {
        tensors(simulator::random_inputs(&self.inner, seed))
    }

    fn __str__(&self) -> String {
        print_graph(&self.inner)
    }

    fn __repr__(&self) -> String {
        format!("Graph(@{}, {} instructions)", self.inner.name, self.inner.instructions.len())
    }
}

#[pyclass(name = "Program", module = "meshpart_py")]
struct PyProgram {
    inner: SpmdProgram,
}

#[pymethods]
impl PyProgram {
    #[getter]
    fn num_partitions(&self) -> usize {
        self.inner.num_partitions
    }

    /// Collective counts and bytes.
    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let st = self.inner.stats();
        let d = PyDict::new_bound(py);
        d.set_item("counts", st.counts)?;
        d.set_item("bytes", st.bytes)?;
        d.set_item("total_bytes", st.total_bytes)?;
        Ok(d)
    }

    /// Runs every device in lockstep and assembles the global outputs.
    fn run(&self, inputs: Vec<PyTensor>) -> PyResult<Vec<PyTensor>> {
        simulator::evaluate_spmd(&self.inner, &unwrap(inputs), &VerifyOptions::default()).map(tensors).map_err(err)
    }

    /// Compares against single-device evaluation of `graph`.
    #[pyo3(signature = (graph, inputs, tol = 1e-4))]
    fn verify<'py>(&self, py: Python<'py>, graph: &PyGraph, inputs: Vec<PyTensor>, tol: f64) -> PyResult<Bound<'py, PyDict>> {
        let opts = VerifyOptions { tol, ..Default::default() };
        let r = simulator::verify_program(&graph.inner, &self.inner, &unwrap(inputs), &opts).map_err(err)?;
        let d = PyDict::new_bound(py);
        d.set_item("pass", r.pass)?;
        d.set_item("max_abs", r.max_abs)?;
        d.set_item("max_rel", r.max_rel)?;
        d.set_item("mismatches", r.mismatches)?;
        d.set_item("collectives", r.collectives)?;
        Ok(d)
    }

    fn __str__(&self) -> String {
        self.inner.to_text()
    }
}

fn config(stages: usize, microbatches: usize, layers_per_stage: Option<usize>) -> PipelineConfig {
    let schedule = match layers_per_stage {
        Some(layers_per_stage) => Schedule::Circular { layers_per_stage },
        None => Schedule::GPipe,
    };
    PipelineConfig { stages, microbatches, schedule }
}

/// Idle-slot accounting of a schedule; `layers_per_stage` selects the
/// circular one.
#[pyfunction]
#[pyo3(signature = (stages, microbatches, layers_per_stage = None))]
fn bubble_stats(py: Python<'_>, stages: usize, microbatches: usize, layers_per_stage: Option<usize>) -> PyResult<Bound<'_, PyDict>> {
    let s = pipeline::bubble_stats(&config(stages, microbatches, layers_per_stage)).map_err(err)?;
    let d = PyDict::new_bound(py);
    d.set_item("iterations", s.iterations)?;
    d.set_item("stage_steps", s.stage_steps)?;
    d.set_item("busy_steps", s.busy_steps)?;
    d.set_item("padded_steps", s.padded_steps)?;
    d.set_item("bubble", (s.bubble_numerator, s.bubble_denominator))?;
    d.set_item("bubble_ratio", s.bubble_ratio)?;
    Ok(d)
}

/// Unrolls a pipeline around `body` with the stage dim split over
/// `stages` devices.
#[pyfunction]
#[pyo3(signature = (body, stages, microbatches, layers_per_stage = None, vectorized = false))]
fn build_pipeline(body: &PyGraph, stages: usize, microbatches: usize, layers_per_stage: Option<usize>, vectorized: bool) -> PyResult<PyGraph> {
    let body = if vectorized { body.inner.clone() } else { pipeline::vectorize_body(&body.inner, stages).map_err(err)? };
    let cfg = config(stages, microbatches, layers_per_stage);
    let g = pipeline::build_pipeline(&cfg, &body).map_err(err)?;
    Ok(PyGraph { inner: pipeline::shard_pipeline(&g, &cfg) })
}

#[pymodule]
fn meshpart_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyGraph>()?;
    m.add_class::<PyProgram>()?;
    m.add_function(wrap_pyfunction!(bubble_stats, m)?)?;
    m.add_function(wrap_pyfunction!(build_pipeline, m)?)?;
    Ok(())
}
