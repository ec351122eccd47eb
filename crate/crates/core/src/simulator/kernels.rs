//! Per-op array kernels shared by the single-device and SPMD evaluators.

use crate::ir::op::{BinaryOp, CompareDir, ConvDims, DotDims, ReduceKind, UnaryOp, WindowDim};
use crate::ir::shape::{for_each_index, row_major_strides, DType, Shape};
use crate::tensor::{Buffer, Scalar, Tensor};

pub(crate) trait Num: Copy + PartialOrd {
    fn add(self, o: Self) -> Self;
    fn sub(self, o: Self) -> Self;
    fn mul(self, o: Self) -> Self;
    /// `None` on integer division by zero.
    fn div(self, o: Self) -> Option<Self>;
    fn max_of(self, o: Self) -> Self;
    fn min_of(self, o: Self) -> Self;
    fn neg(self) -> Self;
    fn relu(self) -> Self;
    fn exp(self) -> Self;
}

impl Num for f32 {
    fn add(self, o: f32) -> f32 {
        self + o
    }
    fn sub(self, o: f32) -> f32 {
        self - o
    }
    fn mul(self, o: f32) -> f32 {
        self * o
    }
    fn div(self, o: f32) -> Option<f32> {
        Some(self / o)
    }
    fn max_of(self, o: f32) -> f32 {
        if self.is_nan() || o.is_nan() {
            f32::NAN
        } else {
            self.max(o)
        }
    }
    fn min_of(self, o: f32) -> f32 {
        if self.is_nan() || o.is_nan() {
            f32::NAN
        } else {
            self.min(o)
        }
    }
    fn neg(self) -> f32 {
        -self
    }
    fn relu(self) -> f32 {
        if self > 0.0 {
            self
        } else {
            0.0
        }
    }
    fn exp(self) -> f32 {
        f32::exp(self)
    }
}

macro_rules! int_num {
    ($t:ty) => {
        impl Num for $t {
            fn add(self, o: $t) -> $t {
                self.wrapping_add(o)
            }
            fn sub(self, o: $t) -> $t {
                self.wrapping_sub(o)
            }
            fn mul(self, o: $t) -> $t {
                self.wrapping_mul(o)
            }
            fn div(self, o: $t) -> Option<$t> {
                if o == 0 {
                    None
                } else {
                    Some(self.wrapping_div(o))
                }
            }
            fn max_of(self, o: $t) -> $t {
                Ord::max(self, o)
            }
            fn min_of(self, o: $t) -> $t {
                Ord::min(self, o)
            }
            fn neg(self) -> $t {
                (0 as $t).wrapping_sub(self)
            }
            fn relu(self) -> $t {
                Ord::max(self, 0)
            }
            fn exp(self) -> $t {
                unreachable!("exponential on integers is rejected by shape inference")
            }
        }
    };
}
int_num!(i32);
int_num!(u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DivideByZero;

fn bin<T: Num>(op: BinaryOp, a: T, b: T) -> Result<T, DivideByZero> {
    Ok(match op {
        BinaryOp::Add => a.add(b),
        BinaryOp::Subtract => a.sub(b),
        BinaryOp::Multiply => a.mul(b),
        BinaryOp::Divide => a.div(b).ok_or(DivideByZero)?,
        BinaryOp::Maximum => a.max_of(b),
        BinaryOp::Minimum => a.min_of(b),
    })
}

/// Applies a binary op to two scalars of the same dtype.
pub fn binary_scalar(op: BinaryOp, a: Scalar, b: Scalar) -> Result<Scalar, DivideByZero> {
    Ok(match (a, b) {
        (Scalar::F32(x), Scalar::F32(y)) => Scalar::F32(bin(op, x, y)?),
        (Scalar::S32(x), Scalar::S32(y)) => Scalar::S32(bin(op, x, y)?),
        (Scalar::U32(x), Scalar::U32(y)) => Scalar::U32(bin(op, x, y)?),
        _ => panic!("binary op on mismatched or boolean scalars"),
    })
}

pub fn unary(op: UnaryOp, t: &Tensor) -> Tensor {
    fn f<T: Num>(op: UnaryOp) -> impl Fn(T) -> T {
        move |x| match op {
            UnaryOp::Negate => x.neg(),
            UnaryOp::Relu => x.relu(),
            UnaryOp::Exp => x.exp(),
        }
    }
    t.map_buffer(|b| b.map_same(f::<f32>(op), f::<i32>(op), f::<u32>(op)))
}

pub fn binary(op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor, DivideByZero> {
    fn zip<T: Num>(op: BinaryOp, x: &[T], y: &[T]) -> Result<Vec<T>, DivideByZero> {
        x.iter().zip(y).map(|(a, b)| bin(op, *a, *b)).collect()
    }
    let data = match (a.data(), b.data()) {
        (Buffer::F32(x), Buffer::F32(y)) => Buffer::F32(zip(op, x, y)?),
        (Buffer::S32(x), Buffer::S32(y)) => Buffer::S32(zip(op, x, y)?),
        (Buffer::U32(x), Buffer::U32(y)) => Buffer::U32(zip(op, x, y)?),
        _ => panic!("binary op on mismatched or boolean buffers"),
    };
    Ok(Tensor::new(a.shape().clone(), data))
}

pub fn compare(dir: CompareDir, a: &Tensor, b: &Tensor) -> Tensor {
    fn cmp<T: PartialOrd>(dir: CompareDir, x: &[T], y: &[T]) -> Vec<bool> {
        x.iter()
            .zip(y)
            .map(|(a, b)| match dir {
                CompareDir::Eq => a == b,
                CompareDir::Ne => a != b,
                CompareDir::Lt => a < b,
                CompareDir::Le => a <= b,
                CompareDir::Gt => a > b,
                CompareDir::Ge => a >= b,
            })
            .collect()
    }
    let out = match (a.data(), b.data()) {
        (Buffer::F32(x), Buffer::F32(y)) => cmp(dir, x, y),
        (Buffer::S32(x), Buffer::S32(y)) => cmp(dir, x, y),
        (Buffer::U32(x), Buffer::U32(y)) => cmp(dir, x, y),
        (Buffer::Pred(x), Buffer::Pred(y)) => cmp(dir, x, y),
        _ => panic!("compare on mismatched buffers"),
    };
    Tensor::new(a.shape().with_dtype(DType::Pred), Buffer::Pred(out))
}

pub fn select(p: &Tensor, t: &Tensor, f: &Tensor) -> Tensor {
    let Buffer::Pred(mask) = p.data() else { panic!("select predicate must be pred") };
    let n = t.len();
    // Index into the concatenation [t | f].
    let idx: Vec<Option<usize>> = mask.iter().enumerate().map(|(i, &m)| Some(if m { i } else { n + i })).collect();
    let both = Buffer::concat(&[t.data(), f.data()]);
    Tensor::new(t.shape().clone(), both.gather(&idx, Scalar::zero(t.dtype())))
}

pub fn iota(shape: &Shape, dimension: usize) -> Tensor {
    let mut vals = Vec::with_capacity(shape.num_elements());
    for_each_index(&shape.dims, |i| vals.push(Scalar::from_i64(shape.dtype, i[dimension] as i64)));
    Tensor::new(shape.clone(), Buffer::from_scalars(shape.dtype, &vals))
}

/// The value that leaves any element unchanged under `kind`.
pub fn reduce_identity(kind: ReduceKind, dtype: DType) -> Scalar {
    match (kind, dtype) {
        (ReduceKind::Sum, d) => Scalar::zero(d),
        (ReduceKind::Prod, d) => Scalar::from_i64(d, 1),
        (ReduceKind::Max, DType::F32) => Scalar::F32(f32::NEG_INFINITY),
        (ReduceKind::Max, DType::S32) => Scalar::S32(i32::MIN),
        (ReduceKind::Max, DType::U32) => Scalar::U32(0),
        (ReduceKind::Min, DType::F32) => Scalar::F32(f32::INFINITY),
        (ReduceKind::Min, DType::S32) => Scalar::S32(i32::MAX),
        (ReduceKind::Min, DType::U32) => Scalar::U32(u32::MAX),
        (_, DType::Pred) => Scalar::Pred(false),
    }
}

/// Reduces `dims` away, folding elements in row-major order starting from
/// `init`.
pub fn reduce(t: &Tensor, init: Scalar, dims: &[usize], kind: ReduceKind) -> Tensor {
    let rank = t.shape().rank();
    let keep: Vec<usize> = (0..rank).filter(|d| !dims.contains(d)).collect();
    let out_dims: Vec<usize> = keep.iter().map(|&d| t.dims()[d]).collect();
    let out_strides = row_major_strides(&out_dims);
    let mut acc = vec![init; out_dims.iter().product()];
    let op = kind.combiner();
    let mut k = 0;
    for_each_index(t.dims(), |i| {
        let o: usize = keep.iter().zip(&out_strides).map(|(&d, s)| i[d] * s).sum();
        acc[o] = binary_scalar(op, acc[o], t.get_flat(k)).expect("reduce combiners never divide");
        k += 1;
    });
    Tensor::new(t.shape().with_dims(out_dims), Buffer::from_scalars(t.dtype(), &acc))
}

fn typed<T: Num>(v: &Buffer, get: fn(&Buffer) -> Option<&[T]>) -> &[T] {
    get(v).expect("dtype checked by shape inference")
}

fn f32s(b: &Buffer) -> Option<&[f32]> {
    if let Buffer::F32(v) = b {
        Some(v)
    } else {
        None
    }
}
fn i32s(b: &Buffer) -> Option<&[i32]> {
    if let Buffer::S32(v) = b {
        Some(v)
    } else {
        None
    }
}
fn u32s(b: &Buffer) -> Option<&[u32]> {
    if let Buffer::U32(v) = b {
        Some(v)
    } else {
        None
    }
}

fn dot_typed<T: Num>(l: &[T], r: &[T], zero: T, plan: &DotPlan) -> Vec<T> {
    plan.out_bases
        .iter()
        .map(|&(lb, rb)| {
            let mut acc = zero;
            for &(lo, ro) in &plan.contract {
                acc = acc.add(l[lb + lo].mul(r[rb + ro]));
            }
            acc
        })
        .collect()
}

struct DotPlan {
    out_bases: Vec<(usize, usize)>,
    contract: Vec<(usize, usize)>,
}

pub fn dot(lhs: &Tensor, rhs: &Tensor, dd: &DotDims, out_shape: &Shape) -> Tensor {
    let ls = lhs.shape().strides();
    let rs = rhs.shape().strides();
    let lfree = dd.lhs_free(lhs.shape().rank());
    let rfree = dd.rhs_free(rhs.shape().rank());
    let nb = dd.lhs_batch.len();
    let mut out_bases = Vec::with_capacity(out_shape.num_elements());
    for_each_index(&out_shape.dims, |i| {
        let mut lb = 0;
        let mut rb = 0;
        for k in 0..nb {
            lb += i[k] * ls[dd.lhs_batch[k]];
            rb += i[k] * rs[dd.rhs_batch[k]];
        }
        for (k, &d) in lfree.iter().enumerate() {
            lb += i[nb + k] * ls[d];
        }
        for (k, &d) in rfree.iter().enumerate() {
            rb += i[nb + lfree.len() + k] * rs[d];
        }
        out_bases.push((lb, rb));
    });
    let cdims: Vec<usize> = dd.lhs_contracting.iter().map(|&d| lhs.dims()[d]).collect();
    let mut contract = Vec::new();
    for_each_index(&cdims, |i| {
        let lo: usize = i.iter().zip(&dd.lhs_contracting).map(|(x, &d)| x * ls[d]).sum();
        let ro: usize = i.iter().zip(&dd.rhs_contracting).map(|(x, &d)| x * rs[d]).sum();
        contract.push((lo, ro));
    });
    let plan = DotPlan { out_bases, contract };
    let data = match lhs.dtype() {
        DType::F32 => Buffer::F32(dot_typed(typed(lhs.data(), f32s), typed(rhs.data(), f32s), 0.0, &plan)),
        DType::S32 => Buffer::S32(dot_typed(typed(lhs.data(), i32s), typed(rhs.data(), i32s), 0, &plan)),
        DType::U32 => Buffer::U32(dot_typed(typed(lhs.data(), u32s), typed(rhs.data(), u32s), 0, &plan)),
        DType::Pred => panic!("dot on pred"),
    };
    Tensor::new(out_shape.clone(), data)
}

/// Direct convolution: output position `o` reads base position
/// `o*stride + w*window_dilation - padding_low` of the dilated input.
pub fn convolution(lhs: &Tensor, rhs: &Tensor, window: &[WindowDim], cd: &ConvDims, out_shape: &Shape) -> Tensor {
    let ls = lhs.shape().strides();
    let rs = rhs.shape().strides();
    let ns = cd.num_spatial();
    let in_feat = lhs.dims()[cd.lhs_feature];
    let wdims: Vec<usize> = window.iter().map(|w| w.size).collect();
    let mut plan = Vec::with_capacity(out_shape.num_elements());
    for_each_index(&out_shape.dims, |o| {
        let b = o[cd.out_batch];
        let of = o[cd.out_feature];
        let mut terms = Vec::new();
        for_each_index(&wdims, |w| {
            let mut lbase = b * ls[cd.lhs_batch];
            let mut rbase = of * rs[cd.rhs_output_feature];
            for k in 0..ns {
                let wd = &window[k];
                let p = (o[cd.out_spatial[k]] * wd.stride + w[k] * wd.window_dilation) as i64 - wd.padding_low as i64;
                if p < 0 || p % wd.base_dilation as i64 != 0 {
                    return;
                }
                let x = (p / wd.base_dilation as i64) as usize;
                if x >= lhs.dims()[cd.lhs_spatial[k]] {
                    return;
                }
                lbase += x * ls[cd.lhs_spatial[k]];
                rbase += w[k] * rs[cd.rhs_spatial[k]];
            }
            for f in 0..in_feat {
                terms.push((lbase + f * ls[cd.lhs_feature], rbase + f * rs[cd.rhs_input_feature]));
            }
        });
        plan.push(terms);
    });
    let data = match lhs.dtype() {
        DType::F32 => Buffer::F32(conv_plain(typed(lhs.data(), f32s), typed(rhs.data(), f32s), &plan, 0.0)),
        DType::S32 => Buffer::S32(conv_plain(typed(lhs.data(), i32s), typed(rhs.data(), i32s), &plan, 0)),
        DType::U32 => Buffer::U32(conv_plain(typed(lhs.data(), u32s), typed(rhs.data(), u32s), &plan, 0)),
        DType::Pred => panic!("convolution on pred"),
    };
    Tensor::new(out_shape.clone(), data)
}

fn conv_plain<T: Num>(l: &[T], r: &[T], plan: &[Vec<(usize, usize)>], zero: T) -> Vec<T> {
    plan.iter()
        .map(|terms| terms.iter().fold(zero, |acc, &(a, b)| acc.add(l[a].mul(r[b]))))
        .collect()
}

/// `result[i] = x[i + amount]` along `dim`, wrapping when `fill` is `None`.
pub fn rotate(t: &Tensor, dim: usize, amount: i64, fill: Option<Scalar>) -> Tensor {
    let n = t.dims()[dim] as i64;
    let dims = t.dims().to_vec();
    t.remap(&dims, fill.unwrap_or(Scalar::zero(t.dtype())), |i| {
        let mut s = i.to_vec();
        let src = i[dim] as i64 + amount;
        s[dim] = match fill {
            None if n > 0 => src.rem_euclid(n) as usize,
            _ if (0..n).contains(&src) => src as usize,
            _ => return None,
        };
        Some(s)
    })
}
