//! Line-oriented text form of graphs:
//!
//! ```text
//! graph @ffn (mesh=[2,2]) {
//!   %x = f32[8,16] parameter(0), sharding={devices=[2,1,2]0,1,2,3 last_tile_dim_replicate}
//!   %y = f32[8,16] exponential(%x)
//!   return %y
//! }
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

use super::graph::{Graph, InstrId, Instruction};
use super::infer::infer_shape;
use super::op::{BinaryOp, CompareDir, ConvDims, DotDims, Op, PadDim, ReduceKind, SliceDim, UnaryOp, WindowDim};
use super::shape::{DType, Shape};
use crate::sharding::{DeviceMesh, Sharding};
use crate::tensor::{Buffer, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}, column {column}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

fn list<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn braces<T: ToString>(xs: &[T]) -> String {
    format!("{{{}}}", list(xs))
}

fn groups_text(groups: &[Vec<u32>]) -> String {
    format!("{{{}}}", groups.iter().map(|g| braces(g)).collect::<Vec<_>>().join(","))
}

fn conv_labels(d: &ConvDims) -> String {
    let ns = d.num_spatial();
    let mut lhs = vec!['?'; ns + 2];
    let mut rhs = vec!['?'; ns + 2];
    let mut out = vec!['?'; ns + 2];
    lhs[d.lhs_batch] = 'b';
    lhs[d.lhs_feature] = 'f';
    rhs[d.rhs_input_feature] = 'i';
    rhs[d.rhs_output_feature] = 'o';
    out[d.out_batch] = 'b';
    out[d.out_feature] = 'f';
    for k in 0..ns {
        let c = char::from_digit(k as u32, 10).unwrap_or('?');
        lhs[d.lhs_spatial[k]] = c;
        rhs[d.rhs_spatial[k]] = c;
        out[d.out_spatial[k]] = c;
    }
    let s = |v: Vec<char>| v.into_iter().collect::<String>();
    format!("{}_{}->{}", s(lhs), s(rhs), s(out))
}

fn window_text(w: &[WindowDim]) -> String {
    if w.is_empty() {
        return "{}".into();
    }
    let j = |f: &dyn Fn(&WindowDim) -> String| w.iter().map(f).collect::<Vec<_>>().join("x");
    format!(
        "{{size={} stride={} pad={} lhs_dilate={} rhs_dilate={}}}",
        j(&|d| d.size.to_string()),
        j(&|d| d.stride.to_string()),
        j(&|d| format!("{}_{}", d.padding_low, d.padding_high)),
        j(&|d| d.base_dilation.to_string()),
        j(&|d| d.window_dilation.to_string()),
    )
}

/// Text between the parentheses and the trailing attributes of `op`.
fn op_parts(op: &Op) -> (Option<String>, Vec<(&'static str, String)>) {
    let mut attrs = Vec::new();
    let mut paren = None;
    match op {
        Op::Parameter { index, .. } => paren = Some(index.to_string()),
        Op::Constant { literal } => paren = Some(literal.to_string()),
        Op::Iota { dimension, .. } => attrs.push(("iota_dimension", dimension.to_string())),
        Op::Compare(dir) => attrs.push(("direction", dir.name().to_string())),
        Op::Broadcast { dims, .. } => attrs.push(("dimensions", braces(dims))),
        Op::Transpose { permutation } => attrs.push(("dimensions", braces(permutation))),
        Op::Reverse { dims } => attrs.push(("dimensions", braces(dims))),
        Op::Pad { config } => {
            let v = if config.is_empty() {
                "{}".to_string()
            } else {
                config.iter().map(|p| format!("{}_{}_{}", p.low, p.high, p.interior)).collect::<Vec<_>>().join("x")
            };
            attrs.push(("padding", v));
        }
        Op::Slice { dims } => {
            let parts: Vec<String> = dims
                .iter()
                .map(|d| if d.stride == 1 { format!("[{}:{}]", d.start, d.limit) } else { format!("[{}:{}:{}]", d.start, d.limit, d.stride) })
                .collect();
            attrs.push(("slice", format!("{{{}}}", parts.join(","))));
        }
        Op::DynamicSlice { sizes } => attrs.push(("dynamic_slice_sizes", braces(sizes))),
        Op::Concat { dim } => attrs.push(("dimensions", braces(&[*dim]))),
        Op::Reduce { dims, kind } => {
            attrs.push(("dimensions", braces(dims)));
            attrs.push(("kind", kind.name().to_string()));
        }
        Op::Dot(d) => {
            for (k, v) in [
                ("lhs_batch_dims", &d.lhs_batch),
                ("rhs_batch_dims", &d.rhs_batch),
                ("lhs_contracting_dims", &d.lhs_contracting),
                ("rhs_contracting_dims", &d.rhs_contracting),
            ] {
                if !v.is_empty() {
                    attrs.push((k, braces(v)));
                }
            }
        }
        Op::Convolution { window, dims } => {
            attrs.push(("window", window_text(window)));
            attrs.push(("dim_labels", conv_labels(dims)));
        }
        Op::AllReduce { kind, groups } => {
            attrs.push(("kind", kind.name().to_string()));
            attrs.push(("replica_groups", groups_text(groups)));
        }
        Op::AllGather { dim, groups } => {
            attrs.push(("dimensions", braces(&[*dim])));
            attrs.push(("replica_groups", groups_text(groups)));
        }
        Op::ReduceScatter { kind, dim, groups } => {
            attrs.push(("kind", kind.name().to_string()));
            attrs.push(("dimensions", braces(&[*dim])));
            attrs.push(("replica_groups", groups_text(groups)));
        }
        Op::AllToAll { split_dim, concat_dim, groups } => {
            attrs.push(("split_dimension", split_dim.to_string()));
            attrs.push(("concat_dimension", concat_dim.to_string()));
            attrs.push(("replica_groups", groups_text(groups)));
        }
        Op::CollectivePermute { pairs } => {
            let p: Vec<String> = pairs.iter().map(|(a, b)| format!("{{{a},{b}}}")).collect();
            attrs.push(("source_target_pairs", format!("{{{}}}", p.join(","))));
        }
        Op::Rotate { dim, amount } => {
            attrs.push(("dimension", dim.to_string()));
            attrs.push(("amount", amount.to_string()));
        }
        Op::PartitionId | Op::Unary(_) | Op::Binary(_) | Op::Select | Op::Reshape { .. } | Op::DynamicUpdateSlice => {}
    }
    (paren, attrs)
}

pub fn print_instruction(g: &Graph, ins: &Instruction) -> String {
    let (paren, attrs) = op_parts(&ins.op);
    let args = paren.unwrap_or_else(|| ins.operands.iter().map(|o| format!("%{}", g.instr(*o).name)).collect::<Vec<_>>().join(", "));
    let mut line = format!("%{} = {} {}({})", ins.name, ins.shape, ins.op.name(), args);
    for (k, v) in attrs {
        let _ = write!(line, ", {k}={v}");
    }
    if let Some(s) = &ins.sharding {
        let _ = write!(line, ", sharding={{{s}}}");
    }
    line
}

pub fn print_graph(g: &Graph) -> String {
    let mut out = format!("graph @{}", g.name);
    if let Some(m) = &g.mesh {
        let _ = write!(out, " (mesh=[{}]", list(m.dims()));
        if !m.is_iota() {
            let _ = write!(out, ", mesh_devices={}", braces(m.device_ids()));
        }
        out.push(')');
    }
    out.push_str(" {\n");
    for ins in &g.instructions {
        let _ = writeln!(out, "  {}", print_instruction(g, ins));
    }
    let outs: Vec<String> = g.outputs.iter().map(|o| format!("%{}", g.instr(*o).name)).collect();
    let _ = writeln!(out, "  return {}", outs.join(", "));
    out.push_str("}\n");
    out
}

struct Cursor<'a> {
    text: &'a str,
    pos: usize,
    line: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, message: impl Into<String>) -> ParseError {
        ParseError { line: self.line, column: self.text[..self.pos].chars().count() + 1, message: message.into() }
    }

    fn err_at(&self, pos: usize, message: impl Into<String>) -> ParseError {
        ParseError { line: self.line, column: self.text[..pos].chars().count() + 1, message: message.into() }
    }

    fn rest(&self) -> &'a str {
        &self.text[self.pos..]
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.rest().chars().next() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn at_end(&mut self) -> bool {
        self.skip_ws();
        self.rest().is_empty()
    }

    fn eat(&mut self, s: &str) -> bool {
        self.skip_ws();
        if self.rest().starts_with(s) {
            self.pos += s.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, s: &str) -> Result<(), ParseError> {
        if self.eat(s) {
            Ok(())
        } else {
            Err(self.err(format!("expected '{s}'")))
        }
    }

    fn ident(&mut self) -> Result<&'a str, ParseError> {
        self.skip_ws();
        let start = self.pos;
        let len = self.rest().find(|c: char| !(c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '-')).unwrap_or(self.rest().len());
        if len == 0 {
            return Err(self.err("expected identifier"));
        }
        self.pos += len;
        Ok(&self.text[start..self.pos])
    }

    fn number<T: std::str::FromStr>(&mut self) -> Result<T, ParseError> {
        self.skip_ws();
        let start = self.pos;
        let len = self.rest().find(|c: char| !(c.is_ascii_digit() || c == '-')).unwrap_or(self.rest().len());
        self.pos += len;
        self.text[start..self.pos].parse::<T>().map_err(|_| self.err_at(start, "expected integer"))
    }

    /// Raw attribute value: a balanced `{..}` group or text up to `,`.
    fn value(&mut self) -> Result<&'a str, ParseError> {
        self.skip_ws();
        let start = self.pos;
        if self.rest().starts_with('{') {
            let mut depth = 0usize;
            for (i, c) in self.rest().char_indices() {
                match c {
                    '{' => depth += 1,
                    '}' => {
                        depth -= 1;
                        if depth == 0 {
                            self.pos += i + 1;
                            return Ok(&self.text[start..self.pos]);
                        }
                    }
                    _ => {}
                }
            }
            return Err(self.err_at(start, "unbalanced '{'"));
        }
        let len = self.rest().find(',').unwrap_or(self.rest().len());
        self.pos += len;
        Ok(self.text[start..self.pos].trim())
    }
}

fn inner_braces(v: &str) -> Option<&str> {
    v.trim().strip_prefix('{').and_then(|x| x.strip_suffix('}'))
}

fn parse_usizes(v: &str) -> Option<Vec<usize>> {
    let inner = inner_braces(v)?;
    if inner.trim().is_empty() {
        return Some(Vec::new());
    }
    inner.split(',').map(|x| x.trim().parse().ok()).collect()
}

fn parse_groups(v: &str) -> Option<Vec<Vec<u32>>> {
    let inner = inner_braces(v)?.trim();
    if inner.is_empty() {
        return Some(Vec::new());
    }
    let mut out = Vec::new();
    let mut rest = inner;
    while !rest.is_empty() {
        let close = rest.find('}')?;
        let group = rest[..=close].trim();
        let g: Vec<u32> = parse_usizes(group)?.into_iter().map(|x| x as u32).collect();
        out.push(g);
        rest = rest[close + 1..].trim_start();
        rest = rest.strip_prefix(',').unwrap_or(rest).trim_start();
    }
    Some(out)
}

fn parse_x_list<T: std::str::FromStr>(v: &str) -> Option<Vec<T>> {
    v.split('x').map(|x| x.trim().parse().ok()).collect()
}

fn parse_window(v: &str) -> Option<Vec<WindowDim>> {
    let inner = inner_braces(v)?.trim();
    if inner.is_empty() {
        return Some(Vec::new());
    }
    let mut fields: HashMap<&str, &str> = HashMap::new();
    for kv in inner.split_whitespace() {
        let (k, val) = kv.split_once('=')?;
        fields.insert(k, val);
    }
    let size: Vec<usize> = parse_x_list(fields.get("size")?)?;
    let n = size.len();
    let ones = vec![1usize; n];
    let get = |k: &str| -> Option<Vec<usize>> { fields.get(k).map_or(Some(ones.clone()), |s| parse_x_list(s)) };
    let stride = get("stride")?;
    let lhs = get("lhs_dilate")?;
    let rhs = get("rhs_dilate")?;
    let pads: Vec<(usize, usize)> = match fields.get("pad") {
        None => vec![(0, 0); n],
        Some(p) => p
            .split('x')
            .map(|x| {
                let (a, b) = x.split_once('_')?;
                Some((a.parse().ok()?, b.parse().ok()?))
            })
            .collect::<Option<Vec<_>>>()?,
    };
    if [stride.len(), lhs.len(), rhs.len(), pads.len()].iter().any(|&l| l != n) {
        return None;
    }
    Some(
        (0..n)
            .map(|k| WindowDim {
                size: size[k],
                stride: stride[k],
                padding_low: pads[k].0,
                padding_high: pads[k].1,
                base_dilation: lhs[k],
                window_dilation: rhs[k],
            })
            .collect(),
    )
}

fn parse_labels(v: &str) -> Option<ConvDims> {
    let (ins, out) = v.trim().split_once("->")?;
    let (lhs, rhs) = ins.split_once('_')?;
    let n = lhs.len().checked_sub(2)?;
    if rhs.len() != n + 2 || out.len() != n + 2 {
        return None;
    }
    let find = |s: &str, c: char| s.find(c);
    let spatial = |s: &str| -> Option<Vec<usize>> { (0..n).map(|k| s.find(char::from_digit(k as u32, 10)?)).collect() };
    Some(ConvDims {
        lhs_batch: find(lhs, 'b')?,
        lhs_feature: find(lhs, 'f')?,
        lhs_spatial: spatial(lhs)?,
        rhs_input_feature: find(rhs, 'i')?,
        rhs_output_feature: find(rhs, 'o')?,
        rhs_spatial: spatial(rhs)?,
        out_batch: find(out, 'b')?,
        out_feature: find(out, 'f')?,
        out_spatial: spatial(out)?,
    })
}

fn parse_slice(v: &str) -> Option<Vec<SliceDim>> {
    let inner = inner_braces(v)?.trim();
    if inner.is_empty() {
        return Some(Vec::new());
    }
    inner
        .split(',')
        .map(|part| {
            let p = part.trim().strip_prefix('[')?.strip_suffix(']')?;
            let nums: Vec<usize> = p.split(':').map(|x| x.trim().parse().ok()).collect::<Option<_>>()?;
            match nums.as_slice() {
                [a, b] => Some(SliceDim { start: *a, limit: *b, stride: 1 }),
                [a, b, c] => Some(SliceDim { start: *a, limit: *b, stride: *c }),
                _ => None,
            }
        })
        .collect()
}

fn parse_padding(v: &str) -> Option<Vec<PadDim>> {
    if v.trim() == "{}" {
        return Some(Vec::new());
    }
    v.split('x')
        .map(|d| {
            let parts: Vec<&str> = d.trim().split('_').collect();
            match parts.as_slice() {
                [l, h, i] => Some(PadDim { low: l.parse().ok()?, high: h.parse().ok()?, interior: i.parse().ok()? }),
                [l, h] => Some(PadDim { low: l.parse().ok()?, high: h.parse().ok()?, interior: 0 }),
                _ => None,
            }
        })
        .collect()
}

fn parse_pairs(v: &str) -> Option<Vec<(u32, u32)>> {
    parse_groups(v)?.into_iter().map(|g| if g.len() == 2 { Some((g[0], g[1])) } else { None }).collect()
}

/// Parses a nested bracket literal into a flat value list and its dims.
fn parse_literal(text: &str, dtype: DType) -> Result<(Vec<usize>, Vec<Scalar>), String> {
    fn scalar(tok: &str, dtype: DType) -> Result<Scalar, String> {
        let bad = || format!("bad {dtype} literal '{tok}'");
        Ok(match dtype {
            DType::F32 => Scalar::F32(tok.parse::<f32>().map_err(|_| bad())?),
            DType::S32 => Scalar::S32(tok.parse::<i32>().map_err(|_| bad())?),
            DType::U32 => Scalar::U32(tok.parse::<u32>().map_err(|_| bad())?),
            DType::Pred => Scalar::Pred(match tok {
                "true" | "1" => true,
                "false" | "0" => false,
                _ => return Err(bad()),
            }),
        })
    }
    fn rec(s: &[u8], pos: &mut usize, dtype: DType, depth: usize, dims: &mut Vec<usize>, out: &mut Vec<Scalar>, src: &str) -> Result<(), String> {
        while *pos < s.len() && s[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < s.len() && s[*pos] == b'[' {
            *pos += 1;
            let mut count = 0;
            loop {
                while *pos < s.len() && s[*pos].is_ascii_whitespace() {
                    *pos += 1;
                }
                if *pos < s.len() && s[*pos] == b']' {
                    *pos += 1;
                    break;
                }
                if count > 0 {
                    if *pos < s.len() && s[*pos] == b',' {
                        *pos += 1;
                    } else {
                        return Err("expected ',' or ']' in literal".into());
                    }
                }
                rec(s, pos, dtype, depth + 1, dims, out, src)?;
                count += 1;
            }
            if dims.len() <= depth {
                dims.resize(depth + 1, usize::MAX);
            }
            if dims[depth] == usize::MAX {
                dims[depth] = count;
            } else if dims[depth] != count {
                return Err("ragged literal".into());
            }
            Ok(())
        } else {
            let start = *pos;
            while *pos < s.len() && !matches!(s[*pos], b',' | b']') && !s[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            out.push(scalar(&src[start..*pos], dtype)?);
            Ok(())
        }
    }
    let mut dims = Vec::new();
    let mut out = Vec::new();
    let mut pos = 0;
    rec(text.as_bytes(), &mut pos, dtype, 0, &mut dims, &mut out, text)?;
    if text[pos..].trim().is_empty() {
        Ok((dims, out))
    } else {
        Err("trailing characters after literal".into())
    }
}

/// Typed tensor literal such as `s32[2,2] [[1,2],[3,4]]` or `f32[] 1.5`.
pub fn parse_tensor(text: &str) -> Result<Tensor, String> {
    let text = text.trim();
    let open = text.find('[').ok_or("expected a type such as f32[2,3]")?;
    let close = open + text[open..].find(']').ok_or("unclosed shape")?;
    let dtype = DType::from_name(&text[..open]).ok_or_else(|| format!("unknown element type '{}'", &text[..open]))?;
    let dims_text = text[open + 1..close].trim();
    let dims: Vec<usize> = if dims_text.is_empty() {
        Vec::new()
    } else {
        dims_text.split(',').map(|d| d.trim().parse().map_err(|_| format!("bad dim '{d}'"))).collect::<Result<_, _>>()?
    };
    let (d, vals) = parse_literal(&text[close + 1..], dtype)?;
    if d != dims {
        return Err(format!("literal has dims {d:?}, declared {dims:?}"));
    }
    Ok(Tensor::new(Shape::new(dtype, dims), Buffer::from_scalars(dtype, &vals)))
}

/// Inverse of [`parse_tensor`].
pub fn print_tensor(t: &Tensor) -> String {
    format!("{} {t}", t.shape())
}

fn unary_or_binary(name: &str) -> Option<Op> {
    Some(match name {
        "negate" => Op::Unary(UnaryOp::Negate),
        "exponential" => Op::Unary(UnaryOp::Exp),
        "relu" => Op::Unary(UnaryOp::Relu),
        "add" => Op::Binary(BinaryOp::Add),
        "multiply" => Op::Binary(BinaryOp::Multiply),
        "maximum" => Op::Binary(BinaryOp::Maximum),
        "minimum" => Op::Binary(BinaryOp::Minimum),
        "subtract" => Op::Binary(BinaryOp::Subtract),
        "divide" => Op::Binary(BinaryOp::Divide),
        "select" => Op::Select,
        "partition-id" => Op::PartitionId,
        "dynamic-update-slice" => Op::DynamicUpdateSlice,
        _ => return None,
    })
}

struct Attrs<'a> {
    map: Vec<(&'a str, &'a str, usize)>,
    used: Vec<bool>,
}

impl<'a> Attrs<'a> {
    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        let i = self.map.iter().position(|(k, _, _)| *k == key)?;
        self.used[i] = true;
        Some((self.map[i].1.to_string(), self.map[i].2))
    }
}

fn parse_line(
    cur: &mut Cursor<'_>,
    ids: &HashMap<String, InstrId>,
    g: &Graph,
) -> Result<Instruction, ParseError> {
    cur.expect("%")?;
    let name = cur.ident()?.to_string();
    if ids.contains_key(&name) {
        return Err(cur.err(format!("%{name} is already defined")));
    }
    cur.expect("=")?;
    let dt_pos = cur.pos;
    let dt = cur.ident()?;
    let dtype = DType::from_name(dt).ok_or_else(|| cur.err_at(dt_pos, format!("unknown dtype '{dt}'")))?;
    cur.expect("[")?;
    let mut dims = Vec::new();
    if !cur.eat("]") {
        loop {
            dims.push(cur.number::<usize>()?);
            if cur.eat("]") {
                break;
            }
            cur.expect(",")?;
        }
    }
    let shape = Shape::new(dtype, dims);
    cur.skip_ws();
    let op_pos = cur.pos;
    let opname = cur.ident()?;
    cur.expect("(")?;
    let mut operands = Vec::new();
    let mut paren_text = "";
    let paren_pos = cur.pos;
    if matches!(opname, "parameter" | "constant") {
        let start = cur.pos;
        let mut depth = 1;
        for (i, c) in cur.rest().char_indices() {
            match c {
                '(' => depth += 1,
                ')' => {
                    depth -= 1;
                    if depth == 0 {
                        paren_text = &cur.text[start..start + i];
                        cur.pos = start + i + 1;
                        break;
                    }
                }
                _ => {}
            }
        }
        if depth != 0 {
            return Err(cur.err("unclosed '('"));
        }
    } else if !cur.eat(")") {
        loop {
            cur.expect("%")?;
            let p = cur.pos;
            let n = cur.ident()?;
            let id = *ids.get(n).ok_or_else(|| cur.err_at(p, format!("use of undefined value %{n}")))?;
            operands.push(id);
            if cur.eat(")") {
                break;
            }
            cur.expect(",")?;
        }
    }
    let mut attrs = Attrs { map: Vec::new(), used: Vec::new() };
    while cur.eat(",") {
        cur.skip_ws();
        let kpos = cur.pos;
        let key = cur.ident()?;
        cur.expect("=")?;
        let v = cur.value()?;
        attrs.map.push((key, v, kpos));
        attrs.used.push(false);
    }
    if !cur.at_end() {
        return Err(cur.err("expected ',' or end of line"));
    }
    let bad = |pos: usize, what: &str| cur.err_at(pos, format!("malformed {what}"));
    let need = |attrs: &mut Attrs, key: &str| -> Result<(String, usize), ParseError> {
        attrs.take(key).ok_or_else(|| cur.err_at(op_pos, format!("{opname} requires attribute '{key}'")))
    };
    let usizes = |attrs: &mut Attrs, key: &str| -> Result<Vec<usize>, ParseError> {
        let (v, p) = need(attrs, key)?;
        parse_usizes(&v).ok_or_else(|| bad(p, key))
    };
    let single = |attrs: &mut Attrs, key: &str| -> Result<usize, ParseError> {
        let (v, p) = need(attrs, key)?;
        v.trim().parse().map_err(|_| bad(p, key))
    };
    let kind = |attrs: &mut Attrs| -> Result<ReduceKind, ParseError> {
        let (v, p) = need(attrs, "kind")?;
        ReduceKind::from_name(v.trim()).ok_or_else(|| bad(p, "kind"))
    };
    let groups = |attrs: &mut Attrs| -> Result<Vec<Vec<u32>>, ParseError> {
        let (v, p) = need(attrs, "replica_groups")?;
        parse_groups(&v).ok_or_else(|| bad(p, "replica_groups"))
    };
    let one_dim = |attrs: &mut Attrs| -> Result<usize, ParseError> {
        let (v, p) = need(attrs, "dimensions")?;
        match parse_usizes(&v).as_deref() {
            Some([d]) => Ok(*d),
            _ => Err(bad(p, "dimensions")),
        }
    };
    let op = match opname {
        "parameter" => {
            let index = paren_text.trim().parse().map_err(|_| cur.err_at(paren_pos, "expected parameter index"))?;
            Op::Parameter { index, shape: shape.clone() }
        }
        "constant" => {
            let (d, vals) = parse_literal(paren_text, dtype).map_err(|m| cur.err_at(paren_pos, m))?;
            if d != shape.dims {
                return Err(cur.err_at(paren_pos, format!("literal has dims {d:?}, declared {shape}")));
            }
            Op::Constant { literal: Tensor::new(shape.clone(), Buffer::from_scalars(dtype, &vals)) }
        }
        "iota" => Op::Iota { dimension: single(&mut attrs, "iota_dimension")?, shape: shape.clone() },
        "compare" => {
            let (v, p) = need(&mut attrs, "direction")?;
            Op::Compare(CompareDir::from_name(v.trim()).ok_or_else(|| bad(p, "direction"))?)
        }
        "broadcast" => Op::Broadcast { dims: usizes(&mut attrs, "dimensions")?, out_dims: shape.dims.clone() },
        "reshape" => Op::Reshape { out_dims: shape.dims.clone() },
        "transpose" => Op::Transpose { permutation: usizes(&mut attrs, "dimensions")? },
        "reverse" => Op::Reverse { dims: usizes(&mut attrs, "dimensions")? },
        "pad" => {
            let (v, p) = need(&mut attrs, "padding")?;
            Op::Pad { config: parse_padding(&v).ok_or_else(|| bad(p, "padding"))? }
        }
        "slice" => {
            let (v, p) = need(&mut attrs, "slice")?;
            Op::Slice { dims: parse_slice(&v).ok_or_else(|| bad(p, "slice"))? }
        }
        "dynamic-slice" => Op::DynamicSlice { sizes: usizes(&mut attrs, "dynamic_slice_sizes")? },
        "concatenate" => Op::Concat { dim: one_dim(&mut attrs)? },
        "reduce" => {
            let dims = usizes(&mut attrs, "dimensions")?;
            Op::Reduce { dims, kind: kind(&mut attrs)? }
        }
        "dot" => {
            let mut get = |k: &str| -> Result<Vec<usize>, ParseError> {
                match attrs.take(k) {
                    None => Ok(Vec::new()),
                    Some((v, p)) => parse_usizes(&v).ok_or_else(|| bad(p, k)),
                }
            };
            Op::Dot(DotDims {
                lhs_batch: get("lhs_batch_dims")?,
                rhs_batch: get("rhs_batch_dims")?,
                lhs_contracting: get("lhs_contracting_dims")?,
                rhs_contracting: get("rhs_contracting_dims")?,
            })
        }
        "convolution" => {
            let (w, wp) = need(&mut attrs, "window")?;
            let window = parse_window(&w).ok_or_else(|| bad(wp, "window"))?;
            let (l, lp) = need(&mut attrs, "dim_labels")?;
            let dims = parse_labels(&l).ok_or_else(|| bad(lp, "dim_labels"))?;
            Op::Convolution { window, dims }
        }
        "all-reduce" => {
            let k = kind(&mut attrs)?;
            Op::AllReduce { kind: k, groups: groups(&mut attrs)? }
        }
        "all-gather" => {
            let dim = one_dim(&mut attrs)?;
            Op::AllGather { dim, groups: groups(&mut attrs)? }
        }
        "reduce-scatter" => {
            let k = kind(&mut attrs)?;
            let dim = one_dim(&mut attrs)?;
            Op::ReduceScatter { kind: k, dim, groups: groups(&mut attrs)? }
        }
        "all-to-all" => {
            let split_dim = single(&mut attrs, "split_dimension")?;
            let concat_dim = single(&mut attrs, "concat_dimension")?;
            Op::AllToAll { split_dim, concat_dim, groups: groups(&mut attrs)? }
        }
        "collective-permute" => {
            let (v, p) = need(&mut attrs, "source_target_pairs")?;
            Op::CollectivePermute { pairs: parse_pairs(&v).ok_or_else(|| bad(p, "source_target_pairs"))? }
        }
        "rotate" => {
            let dim = single(&mut attrs, "dimension")?;
            let (v, p) = need(&mut attrs, "amount")?;
            Op::Rotate { dim, amount: v.trim().parse().map_err(|_| bad(p, "amount"))? }
        }
        other => unary_or_binary(other).ok_or_else(|| cur.err_at(op_pos, format!("unknown opcode '{other}'")))?,
    };
    let sharding = match attrs.take("sharding") {
        None => None,
        Some((v, p)) => {
            let inner = inner_braces(&v).ok_or_else(|| bad(p, "sharding"))?;
            Some(inner.parse::<Sharding>().map_err(|e| cur.err_at(p, format!("bad sharding: {e}")))?)
        }
    };
    if let Some(i) = attrs.used.iter().position(|u| !u) {
        let (k, _, p) = attrs.map[i];
        return Err(cur.err_at(p, format!("unexpected attribute '{k}' for {opname}")));
    }
    let shapes: Vec<Shape> = operands.iter().map(|o: &InstrId| g.instr(*o).shape.clone()).collect();
    let inferred = infer_shape(&op, &shapes).map_err(|e| cur.err_at(op_pos, e.to_string()))?;
    if inferred != shape {
        return Err(cur.err_at(op_pos, format!("shape mismatch: declared {shape}, {opname} produces {inferred}")));
    }
    Ok(Instruction { id: InstrId(g.len() as u32), name, op, operands, shape, sharding })
}

/// Parses graph text; also returns the 1-based source line of every
/// instruction.
pub fn parse_graph_with_lines(text: &str) -> Result<(Graph, Vec<usize>), ParseError> {
    let mut graph: Option<Graph> = None;
    let mut ids: HashMap<String, InstrId> = HashMap::new();
    let mut lines = Vec::new();
    let mut returned = false;
    let mut closed = false;
    let mut last_line = 0;
    for (ln, raw) in text.lines().enumerate() {
        let line_no = ln + 1;
        last_line = line_no;
        let content = match raw.find("//") {
            Some(p) => &raw[..p],
            None => raw,
        };
        if content.trim().is_empty() {
            continue;
        }
        let mut cur = Cursor { text: content, pos: 0, line: line_no };
        if closed {
            return Err(cur.err("text after closing '}'"));
        }
        let Some(g) = graph.as_mut() else {
            cur.expect("graph")?;
            cur.expect("@")?;
            let name = cur.ident()?.to_string();
            let mut g = Graph::new(name);
            if cur.eat("(") {
                cur.expect("mesh")?;
                cur.expect("=")?;
                cur.expect("[")?;
                let mut dims = Vec::new();
                loop {
                    dims.push(cur.number::<usize>()?);
                    if cur.eat("]") {
                        break;
                    }
                    cur.expect(",")?;
                }
                let mut mesh = DeviceMesh::iota(&dims);
                if cur.eat(",") {
                    cur.expect("mesh_devices")?;
                    cur.expect("=")?;
                    let p = cur.pos;
                    let v = cur.value()?;
                    let devs = parse_usizes(v).ok_or_else(|| cur.err_at(p, "malformed mesh_devices"))?;
                    mesh = DeviceMesh::new(dims, devs.into_iter().map(|d| d as u32).collect()).map_err(|e| cur.err_at(p, e.to_string()))?;
                }
                cur.expect(")")?;
                g.mesh = Some(mesh);
            }
            cur.expect("{")?;
            if !cur.at_end() {
                return Err(cur.err("expected end of line after '{'"));
            }
            graph = Some(g);
            continue;
        };
        if returned {
            cur.expect("}")?;
            if !cur.at_end() {
                return Err(cur.err("expected end of line"));
            }
            closed = true;
            continue;
        }
        if cur.eat("return") {
            loop {
                cur.expect("%")?;
                let p = cur.pos;
                let n = cur.ident()?;
                g.outputs.push(*ids.get(n).ok_or_else(|| cur.err_at(p, format!("use of undefined value %{n}")))?);
                if !cur.eat(",") {
                    break;
                }
            }
            if cur.eat("}") {
                closed = true;
            }
            if !cur.at_end() {
                return Err(cur.err("expected end of line"));
            }
            returned = true;
            continue;
        }
        let ins = parse_line(&mut cur, &ids, g)?;
        ids.insert(ins.name.clone(), ins.id);
        g.instructions.push(ins);
        lines.push(line_no);
    }
    let eof = |m: &str| ParseError { line: last_line.max(1), column: 1, message: m.to_string() };
    let g = graph.ok_or_else(|| eof("expected 'graph @name {'"))?;
    if !returned {
        return Err(eof("missing 'return'"));
    }
    if !closed {
        return Err(eof("missing closing '}'"));
    }
    Ok((g, lines))
}

pub fn parse_graph(text: &str) -> Result<Graph, ParseError> {
    parse_graph_with_lines(text).map(|(g, _)| g)
}
