use meshpart::ir::{parse_graph, BinaryOp, DType, DotDims, Graph, GraphBuilder, Op, Shape, UnaryOp};
use meshpart::sharding::{DeviceMesh, Sharding};

pub const LINEAR_RELU: &str = include_str!("../fixtures/linear_relu.mpir");

pub fn linear_relu() -> Graph {
    parse_graph(LINEAR_RELU).expect("fixture parses")
}

fn f32s(d: &[usize]) -> Shape {
    Shape::new(DType::F32, d.to_vec())
}

fn split(mesh: &DeviceMesh, rank: usize, map: &[i64]) -> Sharding {
    mesh.mesh_split(rank, map).expect("valid mesh split")
}

/// Toy feed-forward block on a 2x2 mesh (X, Y). `two_d` picks the 2D
/// activation layout; otherwise activations are split on one mesh dim
/// only, on the model dim.
pub fn feed_forward(two_d: bool) -> Graph {
    let (b, s, m, h) = (8, 4, 16, 32);
    let mesh = DeviceMesh::iota(&[2, 2]);
    let (act_m, act_h): (&[i64], &[i64]) = if two_d { (&[0, -1, 1], &[0, -1, 1]) } else { (&[-1, -1, 0], &[-1, -1, 1]) };
    let mut g = GraphBuilder::new("feed_forward").with_mesh(mesh.clone());
    let x = g.parameter("x", f32s(&[b, s, m]));
    g.set_sharding(x, Some(split(&mesh, 3, act_m)));
    let w_in = g.parameter("w_in", f32s(&[m, h]));
    g.set_sharding(w_in, Some(split(&mesh, 2, &[0, 1])));
    let w_out = g.parameter("w_out", f32s(&[h, m]));
    g.set_sharding(w_out, Some(split(&mesh, 2, &[1, 0])));
    let dd = DotDims { lhs_contracting: vec![2], rhs_contracting: vec![0], ..Default::default() };
    let hid = g.add_named(Some("hidden"), Op::Dot(dd.clone()), &[x, w_in]).unwrap();
    g.set_sharding(hid, Some(split(&mesh, 3, act_h)));
    let act = g.add_named(Some("act"), Op::Unary(UnaryOp::Relu), &[hid]).unwrap();
    g.set_sharding(act, Some(split(&mesh, 3, act_h)));
    let y = g.add_named(Some("y"), Op::Dot(dd), &[act, w_out]).unwrap();
    g.set_sharding(y, Some(split(&mesh, 3, act_m)));
    g.finish(&[y])
}

/// Two expert einsums `EBCM,EMH->EBCH` and `EBCH,EHM->EBCM` split on E,
/// between a batch-split input and a batch-split residual add.
pub fn moe() -> Graph {
    let (e, b, c, m, h) = (4, 4, 2, 16, 16);
    let mesh = DeviceMesh::iota(&[4]);
    let by_b = split(&mesh, 4, &[-1, 0, -1, -1]);
    let by_e4 = split(&mesh, 4, &[0, -1, -1, -1]);
    let by_e3 = split(&mesh, 3, &[0, -1, -1]);
    let mut g = GraphBuilder::new("moe").with_mesh(mesh);
    let x = g.parameter("x", f32s(&[e, b, c, m]));
    g.set_sharding(x, Some(by_b.clone()));
    let w1 = g.parameter("w1", f32s(&[e, m, h]));
    g.set_sharding(w1, Some(by_e3.clone()));
    let w2 = g.parameter("w2", f32s(&[e, h, m]));
    g.set_sharding(w2, Some(by_e3));
    let dd = DotDims { lhs_batch: vec![0], rhs_batch: vec![0], lhs_contracting: vec![3], rhs_contracting: vec![1] };
    let h1 = g.add_named(Some("expert_in"), Op::Dot(dd.clone()), &[x, w1]).unwrap();
    g.set_sharding(h1, Some(by_e4.clone()));
    let a = g.add_named(Some("expert_act"), Op::Unary(UnaryOp::Relu), &[h1]).unwrap();
    g.set_sharding(a, Some(by_e4.clone()));
    let o = g.add_named(Some("expert_out"), Op::Dot(dd), &[a, w2]).unwrap();
    g.set_sharding(o, Some(by_e4));
    let y = g.add_named(Some("y"), Op::Binary(BinaryOp::Add), &[o, x]).unwrap();
    g.set_sharding(y, Some(by_b));
    g.finish(&[y])
}

/// `AB,BC->AC` on a 2x2 mesh: A on X and B on Y for the lhs, C on Y for
/// the rhs (replicated over X), A on X and C on Y for the result.
pub fn grouped_matmul() -> Graph {
    let (a, b, c) = (8, 4, 16);
    let mesh = DeviceMesh::iota(&[2, 2]);
    let mut g = GraphBuilder::new("grouped").with_mesh(mesh.clone());
    let l = g.parameter("ab", f32s(&[a, b]));
    g.set_sharding(l, Some(split(&mesh, 2, &[0, 1])));
    let r = g.parameter("bc", f32s(&[b, c]));
    g.set_sharding(r, Some(split(&mesh, 2, &[-1, 1])));
    let y = g.add_named(Some("ac"), Op::Dot(DotDims::matmul()), &[l, r]).unwrap();
    g.set_sharding(y, Some(split(&mesh, 2, &[0, 1])));
    g.finish(&[y])
}
