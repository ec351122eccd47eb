mod common;

use meshpart::ir::{DType, Graph, GraphBuilder, Op, PadDim, Shape, SliceDim};
use meshpart::partitioner::{detect_and_rotate, partition};
use meshpart::sharding::Sharding;
use meshpart::simulator::{verify_program, VerifyOptions};
use meshpart::tensor::Tensor;

fn split4() -> Sharding {
    Sharding::tiled(vec![4], vec![0, 1, 2, 3]).unwrap()
}

fn sl(start: usize, limit: usize) -> Op {
    Op::Slice { dims: vec![SliceDim { start, limit, stride: 1 }] }
}

/// `concat(x[k:], x[:k])` on an 8-vector split 4 ways.
fn concat_rotation(k: usize) -> Graph {
    let mut b = GraphBuilder::new("rot");
    let x = b.parameter("x", Shape::new(DType::S32, vec![8]));
    b.set_sharding(x, Some(split4()));
    let hi = b.add(sl(k, 8), &[x]).unwrap();
    let lo = b.add(sl(0, k), &[x]).unwrap();
    let y = b.add_named(Some("y"), Op::Concat { dim: 0 }, &[hi, lo]).unwrap();
    for id in [hi, lo, y] {
        b.set_sharding(id, Some(split4()));
    }
    b.finish(&[y])
}

fn check(g: &Graph) -> meshpart::partitioner::SpmdProgram {
    let program = partition(g, 4).unwrap();
    let r = verify_program(g, &program, &common::inputs_for(g, 1), &VerifyOptions::default()).unwrap();
    assert!(r.pass, "{}", program.to_text());
    program
}

#[test]
fn concat_of_slices_becomes_a_rotate() {
    let g = detect_and_rotate(&concat_rotation(3));
    let y = g.instr(g.find("y").unwrap());
    assert_eq!(y.op, Op::Rotate { dim: 0, amount: 3 });
    assert_eq!(g.len(), 2);
    let p = check(&concat_rotation(3));
    assert_eq!(p.stats().count("all-gather"), 0);
}

#[test]
fn rotation_by_whole_shards_is_one_permute() {
    let p = check(&concat_rotation(4));
    assert_eq!(p.stats().counts.len(), 1);
    assert_eq!(p.stats().count("collective-permute"), 1);
}

#[test]
fn rotation_by_zero_moves_nothing() {
    let g = detect_and_rotate(&concat_rotation(0));
    assert_eq!(g.instr(g.find("y").unwrap()).op, Op::Rotate { dim: 0, amount: 0 });
    let p = check(&concat_rotation(0));
    assert_eq!(p.stats().total_bytes, 0);
}

#[test]
fn pad_then_slice_becomes_a_filled_shift() {
    let mut b = GraphBuilder::new("shift");
    let x = b.parameter("x", Shape::new(DType::S32, vec![8, 3]));
    let s2 = Sharding::tiled(vec![4, 1], vec![0, 1, 2, 3]).unwrap();
    b.set_sharding(x, Some(s2.clone()));
    let z = b.constant(Tensor::from_i32(vec![], vec![5]));
    b.set_sharding(z, Some(Sharding::replicated()));
    let p = b.add(Op::Pad { config: vec![PadDim { low: 1, high: 0, interior: 0 }, PadDim::NONE] }, &[x, z]).unwrap();
    let full = SliceDim { start: 0, limit: 3, stride: 1 };
    let y = b.add_named(Some("y"), Op::Slice { dims: vec![SliceDim { start: 0, limit: 8, stride: 1 }, full] }, &[p]).unwrap();
    b.set_sharding(p, Some(s2.clone()));
    b.set_sharding(y, Some(s2));
    let g = b.finish(&[y]);
    let r = detect_and_rotate(&g);
    assert_eq!(r.instr(r.find("y").unwrap()).op, Op::Rotate { dim: 0, amount: -1 });
    let prog = check(&g);
    assert_eq!(prog.stats().count("collective-permute"), 1);
    assert_eq!(prog.stats().count("all-gather"), 0);
}
