#![allow(dead_code)]

pub mod algebra;
pub mod conv;
pub mod fixtures;
pub mod pipeline;

use meshpart::ir::{
    BinaryOp, CompareDir, ConvDims, DType, DotDims, Graph, GraphBuilder, InstrId, Op, PadDim, ReduceKind, Shape, SliceDim,
    UnaryOp, WindowDim,
};
use meshpart::propagation::propagate;
use meshpart::sharding::Sharding;
use meshpart::tensor::{Buffer, Scalar, Tensor};
use rand::rngs::SmallRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

pub fn random_tensor(rng: &mut impl Rng, shape: &Shape) -> Tensor {
    let n = shape.num_elements();
    let data = match shape.dtype {
        DType::F32 => Buffer::F32((0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()),
        DType::S32 => Buffer::S32((0..n).map(|_| rng.gen_range(-4..=4)).collect()),
        DType::U32 => Buffer::U32((0..n).map(|_| rng.gen_range(0..=6)).collect()),
        DType::Pred => Buffer::Pred((0..n).map(|_| rng.gen_bool(0.5)).collect()),
    };
    Tensor::new(shape.clone(), data)
}

pub fn inputs_for(g: &Graph, seed: u64) -> Vec<Tensor> {
    let mut rng = SmallRng::seed_from_u64(seed);
    g.parameter_shapes().iter().map(|s| random_tensor(&mut rng, s)).collect()
}

/// A sharding over devices `0..n` with random tile counts, device order and
/// replication.
pub fn random_sharding(rng: &mut impl Rng, rank: usize, n: usize) -> Sharding {
    if rank == 0 || rng.gen_bool(0.15) {
        return Sharding::replicated();
    }
    let mut tiles = vec![1; rank];
    let mut left = n;
    for _ in 0..rank {
        let d = rng.gen_range(0..rank);
        let opts: Vec<usize> = [2, 4].into_iter().filter(|f| left.is_multiple_of(*f)).collect();
        if let Some(&f) = opts.choose(rng) {
            if rng.gen_bool(0.6) {
                tiles[d] *= f;
                left /= f;
            }
        }
    }
    let total: usize = tiles.iter().product();
    let mut devs: Vec<u32> = (0..n as u32).collect();
    if rng.gen_bool(0.5) {
        devs.shuffle(rng);
    }
    let entries: Vec<(u32, Vec<usize>)> = devs
        .iter()
        .enumerate()
        .map(|(k, &d)| {
            let flat = k % total;
            let mut c = vec![0; rank];
            meshpart::ir::shape::unravel(flat, &tiles, &mut c);
            (d, c)
        })
        .collect();
    Sharding::from_coords(&tiles, &entries).expect("valid random sharding")
}

struct Gen {
    rng: SmallRng,
    b: GraphBuilder,
    dtype: DType,
    pool: Vec<InstrId>,
}

impl Gen {
    fn shape(&self, id: InstrId) -> Vec<usize> {
        self.b.shape(id).dims.clone()
    }

    fn pick(&mut self) -> InstrId {
        let k = self.pool.len();
        let i = if self.rng.gen_bool(0.6) { k - 1 } else { self.rng.gen_range(0..k) };
        self.pool[i]
    }

    fn param(&mut self, dims: Vec<usize>) -> InstrId {
        let name = format!("p{}", self.b.len());
        self.b.parameter(&name, Shape::new(self.dtype, dims))
    }

    fn rand_dims(&mut self, rank: usize) -> Vec<usize> {
        (0..rank).map(|_| self.rng.gen_range(1..=7)).collect()
    }

    fn scalar(&mut self, v: i64) -> InstrId {
        self.b.constant(Tensor::scalar(Scalar::from_i64(self.dtype, v)))
    }

    fn add(&mut self, op: Op, args: &[InstrId]) -> Option<InstrId> {
        self.b.add(op, args).ok()
    }

    fn step(&mut self) -> Option<InstrId> {
        let x = self.pick();
        let dims = self.shape(x);
        let rank = dims.len();
        match self.rng.gen_range(0..17) {
            0 => {
                let u = *[UnaryOp::Negate, UnaryOp::Relu].choose(&mut self.rng).unwrap();
                self.add(Op::Unary(u), &[x])
            }
            1 | 2 => {
                let other = self.pool.iter().copied().filter(|&p| self.shape(p) == dims).collect::<Vec<_>>();
                let y = if self.rng.gen_bool(0.5) { *other.choose(&mut self.rng).unwrap() } else { self.param(dims.clone()) };
                let ops = [BinaryOp::Add, BinaryOp::Multiply, BinaryOp::Maximum, BinaryOp::Minimum, BinaryOp::Subtract];
                let op = *ops.choose(&mut self.rng).unwrap();
                self.add(Op::Binary(op), &[x, y])
            }
            3 if rank >= 2 => {
                let mut perm: Vec<usize> = (0..rank).collect();
                perm.shuffle(&mut self.rng);
                self.add(Op::Transpose { permutation: perm }, &[x])
            }
            4 if rank < 3 => {
                let pos = self.rng.gen_range(0..=rank);
                let mut out = dims.clone();
                out.insert(pos, self.rng.gen_range(2..=4));
                let map: Vec<usize> = (0..rank).map(|i| if i < pos { i } else { i + 1 }).collect();
                self.add(Op::Broadcast { dims: map, out_dims: out }, &[x])
            }
            5 if rank >= 1 => {
                let mut rd: Vec<usize> = (0..rank).filter(|_| self.rng.gen_bool(0.5)).collect();
                if rd.is_empty() {
                    rd.push(self.rng.gen_range(0..rank));
                }
                let kind = *[ReduceKind::Sum, ReduceKind::Max, ReduceKind::Min].choose(&mut self.rng).unwrap();
                let init = self.scalar(if kind == ReduceKind::Sum { 1 } else { 0 });
                self.add(Op::Reduce { dims: rd, kind }, &[x, init])
            }
            6 | 7 if (1..=3).contains(&rank) => {
                let c = self.rng.gen_range(0..rank);
                let k = self.rng.gen_range(1..=6);
                let batch = rank >= 2 && self.rng.gen_bool(0.4);
                let b0 = if c == 0 { 1 } else { 0 };
                let (rhs_dims, dd) = if batch && rank >= 2 {
                    (
                        vec![dims[b0], dims[c], k],
                        DotDims { lhs_batch: vec![b0], rhs_batch: vec![0], lhs_contracting: vec![c], rhs_contracting: vec![1] },
                    )
                } else {
                    (vec![dims[c], k], DotDims { lhs_contracting: vec![c], rhs_contracting: vec![0], ..Default::default() })
                };
                let w = self.param(rhs_dims);
                self.add(Op::Dot(dd), &[x, w])
            }
            8 if rank >= 1 => {
                // merge two adjacent dims or split one
                if rank >= 2 && self.rng.gen_bool(0.5) {
                    let i = self.rng.gen_range(0..rank - 1);
                    let mut out = dims[..i].to_vec();
                    out.push(dims[i] * dims[i + 1]);
                    out.extend(&dims[i + 2..]);
                    self.add(Op::Reshape { out_dims: out }, &[x])
                } else {
                    let i = self.rng.gen_range(0..rank);
                    let f = [2, 3].into_iter().find(|f| dims[i].is_multiple_of(*f) && dims[i] > *f)?;
                    let mut out = dims[..i].to_vec();
                    out.push(dims[i] / f);
                    out.push(f);
                    out.extend(&dims[i + 1..]);
                    self.add(Op::Reshape { out_dims: out }, &[x])
                }
            }
            9 if rank >= 1 => {
                let rd: Vec<usize> = (0..rank).filter(|_| self.rng.gen_bool(0.5)).collect();
                self.add(Op::Reverse { dims: rd }, &[x])
            }
            10 if rank >= 1 => {
                let cfg: Vec<PadDim> = (0..rank)
                    .map(|_| {
                        if self.rng.gen_bool(0.5) {
                            PadDim { low: self.rng.gen_range(0..=3), high: self.rng.gen_range(0..=3), interior: self.rng.gen_range(0..=1) }
                        } else {
                            PadDim::NONE
                        }
                    })
                    .collect();
                let v = self.rng.gen_range(-2..=2);
                let pv = self.scalar(v);
                self.add(Op::Pad { config: cfg }, &[x, pv])
            }
            11 if rank >= 1 => {
                let cfg: Vec<SliceDim> = dims
                    .iter()
                    .map(|&n| {
                        if n > 1 && self.rng.gen_bool(0.6) {
                            let start = self.rng.gen_range(0..n - 1);
                            let limit = self.rng.gen_range(start + 1..=n);
                            SliceDim { start, limit, stride: self.rng.gen_range(1..=2) }
                        } else {
                            SliceDim::full(n)
                        }
                    })
                    .collect();
                self.add(Op::Slice { dims: cfg }, &[x])
            }
            12 if rank >= 1 => {
                let d = self.rng.gen_range(0..rank);
                let mut other = dims.clone();
                other[d] = self.rng.gen_range(1..=4);
                let y = self.param(other);
                let args = if self.rng.gen_bool(0.5) { vec![x, y] } else { vec![y, x, y] };
                self.add(Op::Concat { dim: d }, &args)
            }
            13 if rank >= 1 => {
                // rotation written as concat of two slices
                let d = self.rng.gen_range(0..rank);
                let n = dims[d];
                if n < 2 {
                    return None;
                }
                let k = self.rng.gen_range(1..n);
                let full: Vec<SliceDim> = dims.iter().map(|&m| SliceDim::full(m)).collect();
                let mut hi = full.clone();
                hi[d] = SliceDim { start: k, limit: n, stride: 1 };
                let mut lo = full;
                lo[d] = SliceDim { start: 0, limit: k, stride: 1 };
                let a = self.add(Op::Slice { dims: hi }, &[x])?;
                let b = self.add(Op::Slice { dims: lo }, &[x])?;
                self.add(Op::Concat { dim: d }, &[a, b])
            }
            14 => {
                // convolution over a fresh [batch, spatial, feature] input
                let n = self.rng.gen_range(4..=12);
                let f = self.rng.gen_range(1..=3);
                let b = self.rng.gen_range(1..=3);
                let lhs = self.param(vec![b, n, f]);
                let size = self.rng.gen_range(1..=3);
                let w = WindowDim {
                    size,
                    stride: self.rng.gen_range(1..=2),
                    padding_low: self.rng.gen_range(0..=2),
                    padding_high: self.rng.gen_range(0..=2),
                    base_dilation: self.rng.gen_range(1..=2),
                    window_dilation: self.rng.gen_range(1..=2),
                };
                let o = self.rng.gen_range(1..=3);
                let k = self.param(vec![size, f, o]);
                self.add(Op::Convolution { window: vec![w], dims: ConvDims::channels_last(1) }, &[lhs, k])
            }
            15 if rank >= 1 => {
                let d = self.rng.gen_range(0..rank);
                let io = self.add(Op::Iota { dimension: d, shape: Shape::new(self.dtype, dims.clone()) }, &[])?;
                let c = self.add(Op::Compare(CompareDir::Lt), &[io, x])?;
                self.add(Op::Select, &[c, x, io])
            }
            16 if rank >= 1 => {
                let sizes: Vec<usize> = dims.iter().map(|&n| self.rng.gen_range(1..=n)).collect();
                let idx: Vec<InstrId> = dims
                    .iter()
                    .map(|&n| self.b.constant(Tensor::scalar(Scalar::S32(self.rng.gen_range(0..=n as i32)))))
                    .collect();
                let mut args = vec![x];
                args.extend(idx.iter().copied());
                let ds = self.add(Op::DynamicSlice { sizes }, &args)?;
                if self.rng.gen_bool(0.5) {
                    let neg = self.add(Op::Unary(UnaryOp::Negate), &[ds])?;
                    let mut args = vec![x, neg];
                    args.extend(idx);
                    self.add(Op::DynamicUpdateSlice, &args)
                } else {
                    Some(ds)
                }
            }
            _ => None,
        }
    }
}

/// A random graph over `n` devices with every instruction annotated,
/// either directly or by completing a few random annotations.
pub fn random_annotated_graph(seed: u64) -> (Graph, usize) {
    let mut rng = SmallRng::seed_from_u64(seed);
    let n = *[2usize, 4, 4, 8].choose(&mut rng).unwrap();
    let dtype = if rng.gen_bool(0.75) { DType::F32 } else { DType::S32 };
    let mut g = Gen { rng: SmallRng::seed_from_u64(seed ^ 0x9e37), b: GraphBuilder::new(format!("rand{seed}")), dtype, pool: Vec::new() };
    let r = g.rng.gen_range(1..=3);
    let d = g.rand_dims(r);
    let p = g.param(d);
    g.pool.push(p);
    let steps = rng.gen_range(3..=8);
    let mut made = 0;
    for _ in 0..steps * 4 {
        if made == steps {
            break;
        }
        if let Some(id) = g.step() {
            if g.b.shape(id).num_elements() <= 4096 {
                g.pool.push(id);
                made += 1;
            }
        }
    }
    let last = *g.pool.last().unwrap();
    let mut outs = vec![last];
    if g.pool.len() > 2 && rng.gen_bool(0.3) {
        outs.insert(0, g.pool[g.pool.len() / 2]);
    }
    let mut graph = g.b.finish(&outs);
    let direct = rng.gen_bool(0.5);
    for ins in graph.instructions.iter_mut() {
        let rank = ins.shape.rank();
        if direct || rng.gen_bool(0.3) {
            let mut s = random_sharding(&mut rng, rank, n);
            if !direct && !s.is_replicated() && rng.gen_bool(0.4) {
                let open: Vec<usize> = (0..rank).filter(|&d| s.num_tiles(d) == 1).collect();
                s = s.with_unspecified(open);
            }
            ins.sharding = Some(s);
        }
    }
    if !direct {
        graph = propagate(&graph).expect("propagation succeeds").0;
    }
    (graph, n)
}
