//! Dense row-major tensors and the data-movement primitives shared by the
//! evaluators and the sharding utilities.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ir::shape::{for_each_index, ravel, row_major_strides, DType, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Scalar {
    F32(f32),
    S32(i32),
    U32(u32),
    Pred(bool),
}

impl Scalar {
    pub fn dtype(self) -> DType {
        match self {
            Scalar::F32(_) => DType::F32,
            Scalar::S32(_) => DType::S32,
            Scalar::U32(_) => DType::U32,
            Scalar::Pred(_) => DType::Pred,
        }
    }

    pub fn zero(dtype: DType) -> Scalar {
        Scalar::from_i64(dtype, 0)
    }

    /// Converts an integer into the given dtype (wrapping for integers).
    pub fn from_i64(dtype: DType, v: i64) -> Scalar {
        match dtype {
            DType::F32 => Scalar::F32(v as f32),
            DType::S32 => Scalar::S32(v as i32),
            DType::U32 => Scalar::U32(v as u32),
            DType::Pred => Scalar::Pred(v != 0),
        }
    }

    pub fn as_f64(self) -> f64 {
        match self {
            Scalar::F32(v) => v as f64,
            Scalar::S32(v) => v as f64,
            Scalar::U32(v) => v as f64,
            Scalar::Pred(v) => v as u8 as f64,
        }
    }

    pub fn as_i64(self) -> i64 {
        match self {
            Scalar::F32(v) => v as i64,
            Scalar::S32(v) => v as i64,
            Scalar::U32(v) => v as i64,
            Scalar::Pred(v) => v as i64,
        }
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::F32(v) => {
                if v.is_nan() {
                    f.write_str("nan")
                } else {
                    write!(f, "{v}")
                }
            }
            Scalar::S32(v) => write!(f, "{v}"),
            Scalar::U32(v) => write!(f, "{v}"),
            Scalar::Pred(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Buffer {
    F32(Vec<f32>),
    S32(Vec<i32>),
    U32(Vec<u32>),
    Pred(Vec<bool>),
}

impl Buffer {
    pub fn dtype(&self) -> DType {
        match self {
            Buffer::F32(_) => DType::F32,
            Buffer::S32(_) => DType::S32,
            Buffer::U32(_) => DType::U32,
            Buffer::Pred(_) => DType::Pred,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Buffer::F32(v) => v.len(),
            Buffer::S32(v) => v.len(),
            Buffer::U32(v) => v.len(),
            Buffer::Pred(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn filled(value: Scalar, n: usize) -> Buffer {
        match value {
            Scalar::F32(v) => Buffer::F32(vec![v; n]),
            Scalar::S32(v) => Buffer::S32(vec![v; n]),
            Scalar::U32(v) => Buffer::U32(vec![v; n]),
            Scalar::Pred(v) => Buffer::Pred(vec![v; n]),
        }
    }

    pub fn get(&self, i: usize) -> Scalar {
        match self {
            Buffer::F32(v) => Scalar::F32(v[i]),
            Buffer::S32(v) => Scalar::S32(v[i]),
            Buffer::U32(v) => Scalar::U32(v[i]),
            Buffer::Pred(v) => Scalar::Pred(v[i]),
        }
    }

    /// Builds a new buffer where element `k` is `self[idx[k]]`, or `fill`
    /// when `idx[k]` is `None`.
    pub fn gather(&self, idx: &[Option<usize>], fill: Scalar) -> Buffer {
        fn pick<T: Copy>(src: &[T], idx: &[Option<usize>], fill: T) -> Vec<T> {
            idx.iter().map(|i| i.map_or(fill, |i| src[i])).collect()
        }
        match (self, fill) {
            (Buffer::F32(v), Scalar::F32(f)) => Buffer::F32(pick(v, idx, f)),
            (Buffer::S32(v), Scalar::S32(f)) => Buffer::S32(pick(v, idx, f)),
            (Buffer::U32(v), Scalar::U32(f)) => Buffer::U32(pick(v, idx, f)),
            (Buffer::Pred(v), Scalar::Pred(f)) => Buffer::Pred(pick(v, idx, f)),
            (b, f) => panic!("gather fill dtype {} does not match buffer {}", f.dtype(), b.dtype()),
        }
    }

    pub fn concat(parts: &[&Buffer]) -> Buffer {
        fn join<T: Copy>(parts: impl Iterator<Item = Vec<T>>) -> Vec<T> {
            parts.flatten().collect()
        }
        match parts[0] {
            Buffer::F32(_) => Buffer::F32(join(parts.iter().map(|p| match p {
                Buffer::F32(v) => v.clone(),
                _ => panic!("concat dtype mismatch"),
            }))),
            Buffer::S32(_) => Buffer::S32(join(parts.iter().map(|p| match p {
                Buffer::S32(v) => v.clone(),
                _ => panic!("concat dtype mismatch"),
            }))),
            Buffer::U32(_) => Buffer::U32(join(parts.iter().map(|p| match p {
                Buffer::U32(v) => v.clone(),
                _ => panic!("concat dtype mismatch"),
            }))),
            Buffer::Pred(_) => Buffer::Pred(join(parts.iter().map(|p| match p {
                Buffer::Pred(v) => v.clone(),
                _ => panic!("concat dtype mismatch"),
            }))),
        }
    }

    pub fn from_scalars(dtype: DType, values: &[Scalar]) -> Buffer {
        match dtype {
            DType::F32 => Buffer::F32(values.iter().map(|s| s.as_f64() as f32).collect()),
            DType::S32 => Buffer::S32(values.iter().map(|s| s.as_i64() as i32).collect()),
            DType::U32 => Buffer::U32(values.iter().map(|s| s.as_i64() as u32).collect()),
            DType::Pred => Buffer::Pred(values.iter().map(|s| s.as_i64() != 0).collect()),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.get(i).as_f64()).collect()
    }

    pub fn map_same(&self, f32op: impl Fn(f32) -> f32, i32op: impl Fn(i32) -> i32, u32op: impl Fn(u32) -> u32) -> Buffer {
        match self {
            Buffer::F32(v) => Buffer::F32(v.iter().map(|x| f32op(*x)).collect()),
            Buffer::S32(v) => Buffer::S32(v.iter().map(|x| i32op(*x)).collect()),
            Buffer::U32(v) => Buffer::U32(v.iter().map(|x| u32op(*x)).collect()),
            Buffer::Pred(v) => Buffer::Pred(v.clone()),
        }
    }

}

/// A dense tensor: a static shape plus a row-major element buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Shape,
    data: Buffer,
}

impl Tensor {
    pub fn new(shape: Shape, data: Buffer) -> Tensor {
        assert_eq!(shape.dtype, data.dtype(), "tensor dtype mismatch");
        assert_eq!(shape.num_elements(), data.len(), "tensor element count mismatch for {shape}");
        Tensor { shape, data }
    }

    pub fn from_f32(dims: impl Into<Vec<usize>>, values: Vec<f32>) -> Tensor {
        Tensor::new(Shape::new(DType::F32, dims), Buffer::F32(values))
    }

    pub fn from_i32(dims: impl Into<Vec<usize>>, values: Vec<i32>) -> Tensor {
        Tensor::new(Shape::new(DType::S32, dims), Buffer::S32(values))
    }

    pub fn from_u32(dims: impl Into<Vec<usize>>, values: Vec<u32>) -> Tensor {
        Tensor::new(Shape::new(DType::U32, dims), Buffer::U32(values))
    }

    pub fn from_pred(dims: impl Into<Vec<usize>>, values: Vec<bool>) -> Tensor {
        Tensor::new(Shape::new(DType::Pred, dims), Buffer::Pred(values))
    }

    pub fn scalar(value: Scalar) -> Tensor {
        Tensor::new(Shape::scalar(value.dtype()), Buffer::filled(value, 1))
    }

    pub fn filled(shape: Shape, value: Scalar) -> Tensor {
        assert_eq!(shape.dtype, value.dtype());
        let n = shape.num_elements();
        Tensor { data: Buffer::filled(value, n), shape }
    }

    pub fn zeros(shape: Shape) -> Tensor {
        let z = Scalar::zero(shape.dtype);
        Tensor::filled(shape, z)
    }

    /// `0, 1, 2, ...` in row-major order, converted to the shape's dtype.
    pub fn ramp(shape: Shape) -> Tensor {
        let n = shape.num_elements();
        let vals: Vec<Scalar> = (0..n).map(|i| Scalar::from_i64(shape.dtype, i as i64)).collect();
        Tensor::new(shape.clone(), Buffer::from_scalars(shape.dtype, &vals))
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        &self.shape.dims
    }

    pub fn dtype(&self) -> DType {
        self.shape.dtype
    }

    pub fn data(&self) -> &Buffer {
        &self.data
    }

    pub fn into_data(self) -> Buffer {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, index: &[usize]) -> Scalar {
        let strides = self.shape.strides();
        self.data.get(ravel(index, &strides))
    }

    pub fn get_flat(&self, i: usize) -> Scalar {
        self.data.get(i)
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            Buffer::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i32(&self) -> Option<&[i32]> {
        match &self.data {
            Buffer::S32(v) => Some(v),
            _ => None,
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.to_f64()
    }

    /// Builds a tensor of `out_dims` whose element at each index is the
    /// source element returned by `src`, or `fill` when it returns `None`.
    pub fn remap(&self, out_dims: &[usize], fill: Scalar, mut src: impl FnMut(&[usize]) -> Option<Vec<usize>>) -> Tensor {
        let strides = self.shape.strides();
        let mut idx = Vec::with_capacity(out_dims.iter().product());
        for_each_index(out_dims, |i| {
            idx.push(src(i).map(|s| ravel(&s, &strides)));
        });
        Tensor::new(self.shape.with_dims(out_dims.to_vec()), self.data.gather(&idx, fill))
    }

    pub fn reshape(&self, dims: &[usize]) -> Tensor {
        assert_eq!(dims.iter().product::<usize>(), self.len(), "reshape element count");
        Tensor { shape: self.shape.with_dims(dims.to_vec()), data: self.data.clone() }
    }

    /// Result dim `i` is operand dim `perm[i]`.
    pub fn transpose(&self, perm: &[usize]) -> Tensor {
        let out: Vec<usize> = perm.iter().map(|&p| self.dims()[p]).collect();
        let z = Scalar::zero(self.dtype());
        self.remap(&out, z, |i| {
            let mut s = vec![0; perm.len()];
            for (k, &p) in perm.iter().enumerate() {
                s[p] = i[k];
            }
            Some(s)
        })
    }

    pub fn reverse(&self, dims: &[usize]) -> Tensor {
        let shape = self.dims().to_vec();
        let z = Scalar::zero(self.dtype());
        self.remap(&shape, z, |i| {
            let mut s = i.to_vec();
            for &d in dims {
                s[d] = shape[d] - 1 - i[d];
            }
            Some(s)
        })
    }

    pub fn slice(&self, starts: &[usize], limits: &[usize], strides: &[usize]) -> Tensor {
        let out: Vec<usize> = (0..self.shape.rank())
            .map(|d| if limits[d] <= starts[d] { 0 } else { (limits[d] - starts[d]).div_ceil(strides[d]) })
            .collect();
        let z = Scalar::zero(self.dtype());
        self.remap(&out, z, |i| Some((0..i.len()).map(|d| starts[d] + i[d] * strides[d]).collect()))
    }

    /// Pads with `value`; negative low/high padding trims.
    pub fn pad(&self, low: &[i64], high: &[i64], interior: &[usize], value: Scalar) -> Tensor {
        let rank = self.shape.rank();
        let dims = self.dims().to_vec();
        let out: Vec<usize> = (0..rank)
            .map(|d| {
                let base = if dims[d] == 0 { 0 } else { (dims[d] as i64 - 1) * (interior[d] as i64 + 1) + 1 };
                (base + low[d] + high[d]).max(0) as usize
            })
            .collect();
        self.remap(&out, value, |i| {
            let mut s = vec![0; rank];
            for d in 0..rank {
                let p = i[d] as i64 - low[d];
                if p < 0 {
                    return None;
                }
                let step = interior[d] as i64 + 1;
                if p % step != 0 {
                    return None;
                }
                let q = p / step;
                if q >= dims[d] as i64 {
                    return None;
                }
                s[d] = q as usize;
            }
            Some(s)
        })
    }

    pub fn concat(parts: &[&Tensor], dim: usize) -> Tensor {
        let first = parts[0];
        let mut out = first.dims().to_vec();
        out[dim] = parts.iter().map(|p| p.dims()[dim]).sum();
        let mut offsets = Vec::with_capacity(parts.len());
        let mut acc = 0;
        for p in parts {
            offsets.push(acc);
            acc += p.dims()[dim];
        }
        let bufs: Vec<&Buffer> = parts.iter().map(|p| &p.data).collect();
        let merged = Buffer::concat(&bufs);
        let base: Vec<usize> = parts
            .iter()
            .scan(0usize, |s, p| {
                let b = *s;
                *s += p.len();
                Some(b)
            })
            .collect();
        let strides: Vec<Vec<usize>> = parts.iter().map(|p| p.shape.strides()).collect();
        let mut idx = Vec::with_capacity(out.iter().product());
        for_each_index(&out, |i| {
            let mut k = parts.len() - 1;
            while offsets[k] > i[dim] {
                k -= 1;
            }
            // skip empty parts sitting at the same offset
            while parts[k].dims()[dim] == 0 {
                k += 1;
            }
            let mut s = i.to_vec();
            s[dim] -= offsets[k];
            idx.push(Some(base[k] + ravel(&s, &strides[k])));
        });
        let z = Scalar::zero(first.dtype());
        Tensor::new(first.shape.with_dims(out), merged.gather(&idx, z))
    }

    /// Result dim `dims[i]` carries operand dim `i`.
    pub fn broadcast(&self, out_dims: &[usize], dims: &[usize]) -> Tensor {
        let z = Scalar::zero(self.dtype());
        self.remap(out_dims, z, |i| Some(dims.iter().map(|&d| i[d]).collect()))
    }

    /// Start indices are clamped so the slice stays in bounds.
    pub fn dynamic_slice(&self, starts: &[i64], sizes: &[usize]) -> Tensor {
        let clamped: Vec<usize> = clamp_starts(self.dims(), starts, sizes);
        let z = Scalar::zero(self.dtype());
        self.remap(sizes, z, |i| Some(i.iter().zip(&clamped).map(|(a, b)| a + b).collect()))
    }

    pub fn dynamic_update_slice(&self, update: &Tensor, starts: &[i64]) -> Tensor {
        let clamped = clamp_starts(self.dims(), starts, update.dims());
        let mut out: Vec<Scalar> = (0..self.len()).map(|i| self.data.get(i)).collect();
        let strides = self.shape.strides();
        let mut k = 0;
        for_each_index(update.dims(), |i| {
            let pos: Vec<usize> = i.iter().zip(&clamped).map(|(a, b)| a + b).collect();
            out[ravel(&pos, &strides)] = update.data.get(k);
            k += 1;
        });
        Tensor::new(self.shape.clone(), Buffer::from_scalars(self.dtype(), &out))
    }

    pub fn map_buffer(&self, f: impl FnOnce(&Buffer) -> Buffer) -> Tensor {
        let data = f(&self.data);
        Tensor::new(self.shape.with_dtype(data.dtype()), data)
    }
}

fn clamp_starts(dims: &[usize], starts: &[i64], sizes: &[usize]) -> Vec<usize> {
    dims.iter()
        .zip(starts)
        .zip(sizes)
        .map(|((&d, &s), &z)| s.clamp(0, d.saturating_sub(z) as i64) as usize)
        .collect()
}

impl fmt::Display for Tensor {
    /// Nested bracket literal, e.g. `[[1,2],[3,4]]`; scalars print bare.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn rec(t: &Tensor, f: &mut fmt::Formatter<'_>, dim: usize, base: usize, strides: &[usize]) -> fmt::Result {
            if dim == t.shape.rank() {
                return write!(f, "{}", t.data.get(base));
            }
            f.write_str("[")?;
            for i in 0..t.dims()[dim] {
                if i > 0 {
                    f.write_str(",")?;
                }
                rec(t, f, dim + 1, base + i * strides[dim], strides)?;
            }
            f.write_str("]")
        }
        let strides = row_major_strides(self.dims());
        rec(self, f, 0, 0, &strides)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_and_slice() {
        let t = Tensor::from_i32([3], vec![1, 2, 3]);
        let p = t.pad(&[1], &[2], &[1], Scalar::S32(0));
        assert_eq!(p.as_i32().unwrap(), &[0, 1, 0, 2, 0, 3, 0, 0]);
        let s = p.slice(&[1], &[8], &[2]);
        assert_eq!(s.as_i32().unwrap(), &[1, 2, 3, 0]);
        let trimmed = t.pad(&[-1], &[0], &[0], Scalar::S32(0));
        assert_eq!(trimmed.as_i32().unwrap(), &[2, 3]);
    }

    #[test]
    fn concat_transpose_reverse() {
        let a = Tensor::from_i32([2, 2], vec![1, 2, 3, 4]);
        let b = Tensor::from_i32([2, 1], vec![5, 6]);
        let c = Tensor::concat(&[&a, &b], 1);
        assert_eq!(c.as_i32().unwrap(), &[1, 2, 5, 3, 4, 6]);
        assert_eq!(a.transpose(&[1, 0]).as_i32().unwrap(), &[1, 3, 2, 4]);
        assert_eq!(a.reverse(&[0]).as_i32().unwrap(), &[3, 4, 1, 2]);
        let e = Tensor::from_i32([0, 2], vec![]);
        let c2 = Tensor::concat(&[&e, &a], 0);
        assert_eq!(c2, a);
    }

    #[test]
    fn dynamic_slice_clamps() {
        let t = Tensor::from_i32([5], vec![0, 1, 2, 3, 4]);
        assert_eq!(t.dynamic_slice(&[4], &[2]).as_i32().unwrap(), &[3, 4]);
        assert_eq!(t.dynamic_slice(&[-3], &[2]).as_i32().unwrap(), &[0, 1]);
        let u = Tensor::from_i32([2], vec![9, 9]);
        assert_eq!(t.dynamic_update_slice(&u, &[1]).as_i32().unwrap(), &[0, 9, 9, 3, 4]);
    }

    #[test]
    fn literal_display() {
        let t = Tensor::from_f32([2, 2], vec![1.0, 2.5, -3.0, f32::NAN]);
        assert_eq!(t.to_string(), "[[1,2.5],[-3,nan]]");
        assert_eq!(Tensor::scalar(Scalar::Pred(true)).to_string(), "true");
    }
}
