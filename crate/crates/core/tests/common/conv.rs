use meshpart::ir::shape::for_each_index;
use meshpart::ir::{ConvDims, DType, Graph, GraphBuilder, Op, Shape, WindowDim};
use meshpart::sharding::Sharding;
use meshpart::tensor::Tensor;

/// Direct convolution in the channels-last layout: lhs `[b, s.., ci]`,
/// rhs `[k.., ci, co]`, result `[b, o.., co]`.
pub fn conv_oracle(lhs: &Tensor, rhs: &Tensor, window: &[WindowDim]) -> Tensor {
    let ns = window.len();
    let ld = lhs.dims();
    let rd = rhs.dims();
    let (batch, cin, cout) = (ld[0], ld[ns + 1], rd[ns + 1]);
    let mut out_dims = vec![batch];
    for (k, w) in window.iter().enumerate() {
        let dilated_in = (ld[k + 1] - 1) * w.base_dilation + 1 + w.padding_low + w.padding_high;
        let dilated_w = (w.size - 1) * w.window_dilation + 1;
        out_dims.push((dilated_in - dilated_w) / w.stride + 1);
    }
    out_dims.push(cout);
    let mut data = Vec::new();
    for_each_index(&out_dims, |o| {
        let mut acc = 0i64;
        for_each_index(&rd[..ns], |w| {
            let mut at = vec![o[0]];
            for k in 0..ns {
                let win = &window[k];
                let pos = (o[k + 1] * win.stride + w[k] * win.window_dilation) as i64 - win.padding_low as i64;
                if pos < 0 || pos % win.base_dilation as i64 != 0 {
                    return;
                }
                let i = (pos / win.base_dilation as i64) as usize;
                if i >= ld[k + 1] {
                    return;
                }
                at.push(i);
            }
            for ci in 0..cin {
                let mut li = at.clone();
                li.push(ci);
                let mut ri = w.to_vec();
                ri.extend([ci, o[ns + 1]]);
                acc += lhs.get(&li).as_i64() * rhs.get(&ri).as_i64();
            }
        });
        data.push(acc as i32);
    });
    Tensor::from_i32(out_dims, data)
}

/// Window with "same"-style padding: the dilated window minus one, split
/// as evenly as possible with the extra element on the high side.
pub fn window(size: usize, stride: usize, same: bool, base_dilation: usize) -> WindowDim {
    let total = if same { size - 1 } else { 0 };
    WindowDim { size, stride, padding_low: total / 2, padding_high: total - total / 2, base_dilation, window_dilation: 1 }
}

/// Integer convolution with the spatial dims of lhs and result split into
/// `tiles` and the kernel replicated.
pub fn conv_graph(spatial: &[usize], window: &[WindowDim], tiles: &[usize]) -> Graph {
    let ns = spatial.len();
    let n: usize = tiles.iter().product();
    let mut ldims = vec![2];
    ldims.extend_from_slice(spatial);
    ldims.push(2);
    let mut rdims: Vec<usize> = window.iter().map(|w| w.size).collect();
    rdims.extend([2, 3]);
    let mut all_tiles = vec![1];
    all_tiles.extend_from_slice(tiles);
    all_tiles.push(1);
    let split = Sharding::tiled(all_tiles, (0..n as u32).collect()).unwrap();
    let mut g = GraphBuilder::new("conv");
    let l = g.parameter("lhs", Shape::new(DType::S32, ldims));
    g.set_sharding(l, Some(split.clone()));
    let r = g.parameter("rhs", Shape::new(DType::S32, rdims));
    g.set_sharding(r, Some(Sharding::replicated()));
    let y = g.add_named(Some("out"), Op::Convolution { window: window.to_vec(), dims: ConvDims::channels_last(ns) }, &[l, r]).unwrap();
    g.set_sharding(y, Some(split));
    g.finish(&[y])
}
