use super::op::{Op, UnaryOp};
use super::shape::{DType, Shape};
use super::IrError;

fn incompatible(msg: impl Into<String>) -> IrError {
    IrError::IncompatibleShapes(msg.into())
}

fn arity(op: &Op, got: usize, ok: bool) -> Result<(), IrError> {
    if ok {
        Ok(())
    } else {
        Err(IrError::Arity { op: op.name().to_string(), got })
    }
}

fn check_distinct(dims: &[usize], rank: usize, what: &str) -> Result<(), IrError> {
    let mut seen = vec![false; rank];
    for &d in dims {
        if d >= rank || seen[d] {
            return Err(IrError::InvalidAttribute(format!("{what}: bad dimension list {dims:?} for rank {rank}")));
        }
        seen[d] = true;
    }
    Ok(())
}

fn check_groups(groups: &[Vec<u32>]) -> Result<usize, IrError> {
    let size = groups.first().map_or(0, |g| g.len());
    if size == 0 || groups.iter().any(|g| g.len() != size) {
        return Err(IrError::InvalidAttribute("collective groups must be non-empty and equally sized".into()));
    }
    Ok(size)
}

fn scalar_of(s: &Shape, dtype: DType, what: &str) -> Result<(), IrError> {
    if s.rank() != 0 || s.dtype != dtype {
        return Err(incompatible(format!("{what} must be a {dtype} scalar, got {s}")));
    }
    Ok(())
}

fn index_scalar(s: &Shape) -> Result<(), IrError> {
    if s.rank() != 0 || !s.dtype.is_integral() {
        return Err(incompatible(format!("start index must be an integer scalar, got {s}")));
    }
    Ok(())
}

/// Computes the result shape of `op` applied to operands of the given shapes.
pub fn infer_shape(op: &Op, operands: &[Shape]) -> Result<Shape, IrError> {
    let n = operands.len();
    match op {
        Op::Parameter { shape, .. } => {
            arity(op, n, n == 0)?;
            Ok(shape.clone())
        }
        Op::Constant { literal } => {
            arity(op, n, n == 0)?;
            Ok(literal.shape().clone())
        }
        Op::Iota { dimension, shape } => {
            arity(op, n, n == 0)?;
            if *dimension >= shape.rank() || shape.dtype == DType::Pred {
                return Err(IrError::InvalidAttribute(format!("iota dimension {dimension} invalid for {shape}")));
            }
            Ok(shape.clone())
        }
        Op::PartitionId => {
            arity(op, n, n == 0)?;
            Ok(Shape::scalar(DType::S32))
        }
        Op::Unary(u) => {
            arity(op, n, n == 1)?;
            let s = &operands[0];
            match u {
                UnaryOp::Exp if s.dtype != DType::F32 => Err(incompatible(format!("exponential requires f32, got {s}"))),
                _ if s.dtype == DType::Pred => Err(incompatible(format!("{} requires a numeric operand", op.name()))),
                _ => Ok(s.clone()),
            }
        }
        Op::Binary(_) => {
            arity(op, n, n == 2)?;
            let (a, b) = (&operands[0], &operands[1]);
            if a != b {
                return Err(incompatible(format!("shape mismatch: {a} vs {b}")));
            }
            if a.dtype == DType::Pred {
                return Err(incompatible(format!("{} requires numeric operands", op.name())));
            }
            Ok(a.clone())
        }
        Op::Compare(_) => {
            arity(op, n, n == 2)?;
            let (a, b) = (&operands[0], &operands[1]);
            if a != b {
                return Err(incompatible(format!("shape mismatch: {a} vs {b}")));
            }
            Ok(a.with_dtype(DType::Pred))
        }
        Op::Select => {
            arity(op, n, n == 3)?;
            let (p, t, f) = (&operands[0], &operands[1], &operands[2]);
            if p.dtype != DType::Pred || p.dims != t.dims || t != f {
                return Err(incompatible(format!("shape mismatch in select: {p}, {t}, {f}")));
            }
            Ok(t.clone())
        }
        Op::Broadcast { dims, out_dims } => {
            arity(op, n, n == 1)?;
            let s = &operands[0];
            if dims.len() != s.rank() {
                return Err(incompatible(format!("broadcast dims {dims:?} do not match operand {s}")));
            }
            check_distinct(dims, out_dims.len(), "broadcast")?;
            for (i, &d) in dims.iter().enumerate() {
                if out_dims[d] != s.dims[i] {
                    return Err(incompatible(format!("broadcast operand dim {i} ({}) != result dim {d} ({})", s.dims[i], out_dims[d])));
                }
            }
            Ok(s.with_dims(out_dims.clone()))
        }
        Op::Reshape { out_dims } => {
            arity(op, n, n == 1)?;
            let s = &operands[0];
            if out_dims.iter().product::<usize>() != s.num_elements() {
                return Err(incompatible(format!("cannot reshape {s} to {out_dims:?}")));
            }
            Ok(s.with_dims(out_dims.clone()))
        }
        Op::Transpose { permutation } => {
            arity(op, n, n == 1)?;
            let s = &operands[0];
            if permutation.len() != s.rank() {
                return Err(incompatible(format!("permutation {permutation:?} does not match {s}")));
            }
            check_distinct(permutation, s.rank(), "transpose")?;
            Ok(s.with_dims(permutation.iter().map(|&p| s.dims[p]).collect::<Vec<_>>()))
        }
        Op::Reverse { dims } => {
            arity(op, n, n == 1)?;
            check_distinct(dims, operands[0].rank(), "reverse")?;
            Ok(operands[0].clone())
        }
        Op::Pad { config } => {
            arity(op, n, n == 2)?;
            let s = &operands[0];
            scalar_of(&operands[1], s.dtype, "padding value")?;
            if config.len() != s.rank() {
                return Err(incompatible(format!("padding config rank {} != {s}", config.len())));
            }
            let mut out = Vec::with_capacity(s.rank());
            for (d, p) in config.iter().enumerate() {
                if p.low < 0 || p.high < 0 {
                    return Err(IrError::InvalidAttribute("negative padding is not supported".into()));
                }
                let base = if s.dims[d] == 0 { 0 } else { (s.dims[d] as i64 - 1) * (p.interior as i64 + 1) + 1 };
                out.push((base + p.low + p.high) as usize);
            }
            Ok(s.with_dims(out))
        }
        Op::Slice { dims } => {
            arity(op, n, n == 1)?;
            let s = &operands[0];
            if dims.len() != s.rank() {
                return Err(incompatible(format!("slice rank {} != {s}", dims.len())));
            }
            for (d, sl) in dims.iter().enumerate() {
                if sl.stride == 0 || sl.start > sl.limit || sl.limit > s.dims[d] {
                    return Err(incompatible(format!("slice [{}:{}:{}] out of bounds for dim {d} of {s}", sl.start, sl.limit, sl.stride)));
                }
            }
            Ok(s.with_dims(dims.iter().map(|d| d.len()).collect::<Vec<_>>()))
        }
        Op::DynamicSlice { sizes } => {
            let s = operands.first().ok_or(IrError::Arity { op: op.name().into(), got: 0 })?;
            arity(op, n, n == 1 + s.rank())?;
            if sizes.len() != s.rank() || sizes.iter().zip(&s.dims).any(|(a, b)| a > b) {
                return Err(incompatible(format!("dynamic slice sizes {sizes:?} invalid for {s}")));
            }
            for idx in &operands[1..] {
                index_scalar(idx)?;
            }
            Ok(s.with_dims(sizes.clone()))
        }
        Op::DynamicUpdateSlice => {
            let s = operands.first().ok_or(IrError::Arity { op: op.name().into(), got: 0 })?;
            arity(op, n, n == 2 + s.rank())?;
            let u = &operands[1];
            if u.dtype != s.dtype || u.rank() != s.rank() || u.dims.iter().zip(&s.dims).any(|(a, b)| a > b) {
                return Err(incompatible(format!("update {u} does not fit into {s}")));
            }
            for idx in &operands[2..] {
                index_scalar(idx)?;
            }
            Ok(s.clone())
        }
        Op::Concat { dim } => {
            arity(op, n, n >= 1)?;
            let first = &operands[0];
            if *dim >= first.rank() {
                return Err(IrError::InvalidAttribute(format!("concat dimension {dim} out of range for {first}")));
            }
            let mut out = first.dims.clone();
            out[*dim] = 0;
            for s in operands {
                if s.dtype != first.dtype || s.rank() != first.rank() {
                    return Err(incompatible(format!("shape mismatch in concatenate: {first} vs {s}")));
                }
                for d in 0..s.rank() {
                    if d != *dim && s.dims[d] != first.dims[d] {
                        return Err(incompatible(format!("shape mismatch in concatenate: {first} vs {s}")));
                    }
                }
                out[*dim] += s.dims[*dim];
            }
            Ok(first.with_dims(out))
        }
        Op::Reduce { dims, .. } => {
            arity(op, n, n == 2)?;
            let s = &operands[0];
            if s.dtype == DType::Pred {
                return Err(incompatible("reduce requires a numeric operand"));
            }
            scalar_of(&operands[1], s.dtype, "reduce init")?;
            check_distinct(dims, s.rank(), "reduce")?;
            Ok(s.with_dims((0..s.rank()).filter(|d| !dims.contains(d)).map(|d| s.dims[d]).collect::<Vec<_>>()))
        }
        Op::Dot(dn) => {
            arity(op, n, n == 2)?;
            let (l, r) = (&operands[0], &operands[1]);
            if l.dtype != r.dtype || l.dtype == DType::Pred {
                return Err(incompatible(format!("dot operand types {l} and {r}")));
            }
            if dn.lhs_batch.len() != dn.rhs_batch.len() || dn.lhs_contracting.len() != dn.rhs_contracting.len() {
                return Err(IrError::InvalidAttribute("dot batch/contracting lists differ in length".into()));
            }
            let lhs_all: Vec<usize> = dn.lhs_batch.iter().chain(&dn.lhs_contracting).copied().collect();
            let rhs_all: Vec<usize> = dn.rhs_batch.iter().chain(&dn.rhs_contracting).copied().collect();
            check_distinct(&lhs_all, l.rank(), "dot lhs")?;
            check_distinct(&rhs_all, r.rank(), "dot rhs")?;
            for (a, b) in dn.lhs_batch.iter().zip(&dn.rhs_batch).chain(dn.lhs_contracting.iter().zip(&dn.rhs_contracting)) {
                if l.dims[*a] != r.dims[*b] {
                    return Err(incompatible(format!("dot dimension mismatch: lhs dim {a} of {l} vs rhs dim {b} of {r}")));
                }
            }
            let mut out: Vec<usize> = dn.lhs_batch.iter().map(|&d| l.dims[d]).collect();
            out.extend(dn.lhs_free(l.rank()).into_iter().map(|d| l.dims[d]));
            out.extend(dn.rhs_free(r.rank()).into_iter().map(|d| r.dims[d]));
            Ok(l.with_dims(out))
        }
        Op::Convolution { window, dims } => {
            arity(op, n, n == 2)?;
            let (l, r) = (&operands[0], &operands[1]);
            let ns = dims.num_spatial();
            if l.dtype != r.dtype || l.dtype == DType::Pred {
                return Err(incompatible(format!("convolution operand types {l} and {r}")));
            }
            if l.rank() != ns + 2 || r.rank() != ns + 2 || window.len() != ns || dims.rhs_spatial.len() != ns || dims.out_spatial.len() != ns {
                return Err(incompatible(format!("convolution ranks do not match {ns} spatial dims: {l}, {r}")));
            }
            let lhs_all: Vec<usize> = [dims.lhs_batch, dims.lhs_feature].into_iter().chain(dims.lhs_spatial.iter().copied()).collect();
            let rhs_all: Vec<usize> = [dims.rhs_input_feature, dims.rhs_output_feature].into_iter().chain(dims.rhs_spatial.iter().copied()).collect();
            let out_all: Vec<usize> = [dims.out_batch, dims.out_feature].into_iter().chain(dims.out_spatial.iter().copied()).collect();
            check_distinct(&lhs_all, ns + 2, "convolution lhs")?;
            check_distinct(&rhs_all, ns + 2, "convolution rhs")?;
            check_distinct(&out_all, ns + 2, "convolution output")?;
            if l.dims[dims.lhs_feature] != r.dims[dims.rhs_input_feature] {
                return Err(incompatible(format!("convolution feature mismatch: {l} vs {r}")));
            }
            let mut out = vec![0; ns + 2];
            out[dims.out_batch] = l.dims[dims.lhs_batch];
            out[dims.out_feature] = r.dims[dims.rhs_output_feature];
            for (k, w) in window.iter().enumerate() {
                if w.size != r.dims[dims.rhs_spatial[k]] {
                    return Err(incompatible(format!("window size {} != kernel dim {}", w.size, r.dims[dims.rhs_spatial[k]])));
                }
                if w.stride == 0 || w.base_dilation == 0 || w.window_dilation == 0 {
                    return Err(IrError::InvalidAttribute("stride and dilations must be >= 1".into()));
                }
                out[dims.out_spatial[k]] = w
                    .output_size(l.dims[dims.lhs_spatial[k]])
                    .ok_or_else(|| incompatible(format!("convolution spatial dim {k} has non-positive output size")))?;
            }
            Ok(l.with_dims(out))
        }
        Op::AllReduce { groups, .. } => {
            arity(op, n, n == 1)?;
            check_groups(groups)?;
            Ok(operands[0].clone())
        }
        Op::AllGather { dim, groups } => {
            arity(op, n, n == 1)?;
            let g = check_groups(groups)?;
            let s = &operands[0];
            if *dim >= s.rank() {
                return Err(IrError::InvalidAttribute(format!("all-gather dim {dim} out of range")));
            }
            let mut out = s.dims.clone();
            out[*dim] *= g;
            Ok(s.with_dims(out))
        }
        Op::ReduceScatter { dim, groups, .. } => {
            arity(op, n, n == 1)?;
            let g = check_groups(groups)?;
            let s = &operands[0];
            if *dim >= s.rank() || !s.dims[*dim].is_multiple_of(g) {
                return Err(incompatible(format!("reduce-scatter dim {dim} of {s} not divisible by {g}")));
            }
            let mut out = s.dims.clone();
            out[*dim] /= g;
            Ok(s.with_dims(out))
        }
        Op::AllToAll { split_dim, concat_dim, groups } => {
            arity(op, n, n == 1)?;
            let g = check_groups(groups)?;
            let s = &operands[0];
            if *split_dim >= s.rank() || *concat_dim >= s.rank() || !s.dims[*split_dim].is_multiple_of(g) {
                return Err(incompatible(format!("all-to-all split dim {split_dim} of {s} not divisible by {g}")));
            }
            let mut out = s.dims.clone();
            out[*split_dim] /= g;
            out[*concat_dim] *= g;
            Ok(s.with_dims(out))
        }
        Op::CollectivePermute { pairs } => {
            arity(op, n, n == 1)?;
            let mut src: Vec<u32> = pairs.iter().map(|p| p.0).collect();
            let mut dst: Vec<u32> = pairs.iter().map(|p| p.1).collect();
            src.sort_unstable();
            dst.sort_unstable();
            if src.windows(2).any(|w| w[0] == w[1]) || dst.windows(2).any(|w| w[0] == w[1]) {
                return Err(IrError::InvalidAttribute("collective-permute sources and targets must be distinct".into()));
            }
            Ok(operands[0].clone())
        }
        Op::Rotate { dim, .. } => {
            arity(op, n, n == 1 || n == 2)?;
            let s = &operands[0];
            if *dim >= s.rank() {
                return Err(IrError::InvalidAttribute(format!("rotate dim {dim} out of range for {s}")));
            }
            if n == 2 {
                scalar_of(&operands[1], s.dtype, "rotate fill")?;
            }
            Ok(s.clone())
        }
    }
}
