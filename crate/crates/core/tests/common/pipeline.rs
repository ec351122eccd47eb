use meshpart::ir::{BinaryOp, DType, DotDims, Graph, GraphBuilder, Op, Shape, UnaryOp};
use meshpart::partitioner::SpmdProgram;
use meshpart::pipeline::{build_pipeline, shard_pipeline, vectorize_body, PipelineConfig};
use meshpart::propagation::propagate;
use meshpart::simulator::evaluate_single;
use meshpart::tensor::Tensor;

const B: usize = 2;
const D: usize = 4;

/// One layer: `relu(x @ w + b) + x` on a `[B, D]` microbatch.
pub fn layer() -> Graph {
    let f = |d: &[usize]| Shape::new(DType::F32, d.to_vec());
    let mut g = GraphBuilder::new("layer");
    let x = g.parameter("x", f(&[B, D]));
    let w = g.parameter("w", f(&[D, D]));
    let b = g.parameter("b", f(&[D]));
    let y = g.add(Op::Dot(DotDims::matmul()), &[x, w]).unwrap();
    let bb = g.add(Op::Broadcast { dims: vec![1], out_dims: vec![B, D] }, &[b]).unwrap();
    let z = g.add(Op::Binary(BinaryOp::Add), &[y, bb]).unwrap();
    let r = g.add(Op::Unary(UnaryOp::Relu), &[z]).unwrap();
    let o = g.add(Op::Binary(BinaryOp::Add), &[r, x]).unwrap();
    g.finish(&[o])
}

/// Applies the layers one microbatch at a time.
pub fn sequential(cfg: &PipelineConfig, inputs: &[Tensor]) -> Tensor {
    let body = layer();
    let layers = cfg.stages * cfg.rounds();
    let mut out = Vec::new();
    for m in 0..cfg.microbatches {
        let mut x = Tensor::from_f32(vec![B, D], inputs[0].as_f32().unwrap()[m * B * D..(m + 1) * B * D].to_vec());
        for k in 0..layers {
            let w = Tensor::from_f32(vec![D, D], inputs[1].as_f32().unwrap()[k * D * D..(k + 1) * D * D].to_vec());
            let b = Tensor::from_f32(vec![D], inputs[2].as_f32().unwrap()[k * D..(k + 1) * D].to_vec());
            x = evaluate_single(&body, &[x, w, b]).unwrap().remove(0);
        }
        out.extend_from_slice(x.as_f32().unwrap());
    }
    Tensor::from_f32(vec![cfg.microbatches, B, D], out)
}

pub fn pipeline(cfg: &PipelineConfig) -> Graph {
    let body = vectorize_body(&layer(), cfg.stages).unwrap();
    build_pipeline(cfg, &body).unwrap()
}

pub fn close(a: &Tensor, b: &Tensor, tol: f32) -> bool {
    a.dims() == b.dims() && a.as_f32().unwrap().iter().zip(b.as_f32().unwrap()).all(|(x, y)| (x - y).abs() <= tol * y.abs().max(1.0))
}

/// Pipeline graph with the stage dim split over `L` devices, ready to
/// partition.
pub fn sharded_pipeline(cfg: &PipelineConfig) -> Graph {
    propagate(&shard_pipeline(&pipeline(cfg), cfg)).unwrap().0
}

pub fn ops_of(program: &SpmdProgram, source_prefix: &str) -> Vec<String> {
    let names: Vec<&String> = program.provenance.iter().filter(|p| p.source.starts_with(source_prefix)).flat_map(|p| &p.emitted).collect();
    names.iter().filter_map(|n| program.graph.find(n)).map(|id| program.graph.instr(id).op.name().to_string()).collect()
}
