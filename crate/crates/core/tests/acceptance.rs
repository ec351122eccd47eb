//! Acceptance checks, one line per criterion. The whole set runs twice and
//! the second run must reproduce the first bit for bit.

mod common;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::conv::{conv_graph, conv_oracle, window};
use common::fixtures;
use common::pipeline::{close, ops_of, pipeline, sequential, sharded_pipeline};
use meshpart::ir::{print_graph, DType, Graph, GraphBuilder, Op, PadDim, Shape, SliceDim, WindowDim};
use meshpart::partitioner::{conv_halo, partition, SpmdProgram};
use meshpart::pipeline::{bubble_stats, PipelineConfig};
use meshpart::propagation::{propagate, propagate_with, PropagationOptions};
use meshpart::sharding::Sharding;
use meshpart::simulator::{evaluate_single, evaluate_spmd, verify_program, VerifyOptions};
use meshpart::tensor::Tensor;

/// Collects everything a criterion computed, for the determinism check.
#[derive(Default)]
struct Digest(DefaultHasher);

impl Digest {
    fn text(&mut self, s: &str) {
        s.hash(&mut self.0);
    }

    fn tensor(&mut self, t: &Tensor) {
        t.dims().hash(&mut self.0);
        for v in t.to_f64_vec() {
            v.to_bits().hash(&mut self.0);
        }
    }

    fn program(&mut self, p: &SpmdProgram) {
        self.text(&p.to_text());
    }
}

struct Outcome {
    pass: bool,
    detail: String,
    digest: u64,
}

type Check = fn(&mut Digest) -> Result<String, String>;

fn run(check: Check) -> Outcome {
    let mut d = Digest::default();
    let r = catch_unwind(AssertUnwindSafe(|| check(&mut d)));
    let (pass, detail) = match r {
        Ok(Ok(s)) => (true, s),
        Ok(Err(s)) => (false, s),
        Err(p) => (false, format!("panicked: {}", p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())),
    };
    Outcome { pass, detail, digest: d.0.finish() }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_suite(d: &mut Digest) -> Result<String, String> {
    let start = Instant::now();
    let count = 200u64;
    for seed in 0..count {
        let (g, n) = common::random_annotated_graph(seed);
        let inputs = common::inputs_for(&g, seed);
        let program = partition(&g, n).map_err(|e| format!("seed {seed}: {e}"))?;
        let r = verify_program(&g, &program, &inputs, &VerifyOptions::default()).map_err(|e| format!("seed {seed}: {e}"))?;
        ensure(r.pass, || format!("seed {seed}: {} mismatches, max rel {:.3e}", r.mismatches, r.max_rel))?;
        d.program(&program);
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(300), || format!("took {took:?}"))?;
    Ok(format!("{count} random graphs match in {:.1}s", took.as_secs_f64()))
}

fn priorities(d: &mut Digest) -> Result<String, String> {
    let g = fixtures::linear_relu();
    let chain = ["y", "bias", "a", "r"];
    let (with, rep) = propagate(&g).map_err(|e| e.to_string())?;
    let (without, rep_np) =
        propagate_with(&g, &PropagationOptions { use_priorities: false, ..Default::default() }).map_err(|e| e.to_string())?;
    ensure(!rep.hit_cap && !rep_np.hit_cap, || "hit the iteration cap".into())?;
    let sh = |g: &Graph, n: &str| g.instr(g.find(n).unwrap()).sharding.clone().unwrap();
    let first = sh(&with, "y");
    for n in chain {
        ensure(sh(&with, n).same_layout(&first, 2), || format!("priority run: {n} is {} but y is {first}", sh(&with, n)))?;
    }
    let (y, z) = (sh(&without, "y"), sh(&without, "bias"));
    ensure(!y.same_layout(&z, 2), || format!("no-priority run agrees around the add ({y})"))?;
    d.text(&print_graph(&with));
    d.text(&print_graph(&without));
    Ok(format!("priority: chain on {first} after {} iterations; topological: add sees {y} vs {z}", rep.iterations))
}

fn transformer_layouts(d: &mut Digest) -> Result<String, String> {
    let fin = partition(&fixtures::feed_forward(true), 4).map_err(|e| e.to_string())?;
    let att = partition(&fixtures::feed_forward(false), 4).map_err(|e| e.to_string())?;
    let (fs, at) = (fin.stats(), att.stats());
    ensure(fs.count("all-gather") >= 1 && fs.count("reduce-scatter") >= 1 && fs.count("all-reduce") == 0, || {
        format!("2D layout collectives {:?}", fs.counts)
    })?;
    ensure(at.count("all-reduce") >= 1, || format!("1D layout collectives {:?}", at.counts))?;
    for (g, p) in [(fixtures::feed_forward(true), &fin), (fixtures::feed_forward(false), &att)] {
        let r = verify_program(&g, p, &common::inputs_for(&g, 3), &VerifyOptions::default()).map_err(|e| e.to_string())?;
        ensure(r.pass, || format!("{}: oracle mismatch", g.name))?;
    }
    d.program(&fin);
    d.program(&att);
    Ok(format!("2D layout {:?}; 1D layout {:?}", fs.counts, at.counts))
}

fn conv_halos(d: &mut Digest) -> Result<String, String> {
    let mut cases: Vec<(Vec<usize>, Vec<WindowDim>, Vec<usize>)> = Vec::new();
    for size in [2, 3, 5] {
        for stride in [1, 2] {
            for same in [false, true] {
                for bd in [1, 2, 3] {
                    for t in [2, 3, 4] {
                        for n in [16, 13] {
                            cases.push((vec![n], vec![window(size, stride, same, bd)], vec![t]));
                        }
                    }
                    let (s2, n2) = (if size == 5 { 2 } else { size + 1 }, 9);
                    cases.push((vec![n2, 10], vec![window(size, stride, same, bd), window(s2, stride, same, bd)], vec![2, 2]));
                }
            }
        }
    }
    // halo cases covered: plain, base dilation with unit stride, both
    let mut covered = [0usize; 3];
    let mut nonconstant = 0;
    for (k, (spatial, win, tiles)) in cases.iter().enumerate() {
        let g = conv_graph(spatial, win, tiles);
        let n: usize = tiles.iter().product();
        let inputs = common::inputs_for(&g, k as u64);
        let program = partition(&g, n).map_err(|e| format!("{win:?} on {tiles:?}: {e}"))?;
        let got = evaluate_spmd(&program, &inputs, &VerifyOptions::default()).map_err(|e| e.to_string())?.remove(0);
        let want = conv_oracle(&inputs[0], &inputs[1], win);
        ensure(got == want, || format!("{win:?} over {spatial:?} on {tiles:?}: differs from the direct convolution"))?;
        let mut all_halo = true;
        for (j, w) in win.iter().enumerate() {
            match conv_halo(w, spatial[j], tiles[j]) {
                Some(spec) => {
                    let case = if w.base_dilation == 1 { 0 } else if w.stride == 1 { 1 } else { 2 };
                    covered[case] += 1;
                    if let Some((a, b)) = spec.right_coeffs() {
                        ensure((0..tiles[j]).all(|i| spec.right(i) == a * i as i64 + b), || "right halo is not linear".into())?;
                        nonconstant += usize::from(a != 0);
                    }
                }
                None => all_halo = false,
            }
        }
        if all_halo && program.stats().count("all-gather") > 0 {
            return Err(format!("{win:?} on {tiles:?}: halo plan but the program gathers"));
        }
        d.program(&program);
        d.tensor(&got);
    }
    ensure(covered.iter().all(|&c| c > 0), || format!("halo cases covered {covered:?}"))?;
    let spec = conv_halo(&WindowDim { padding_low: 1, padding_high: 1, ..WindowDim::simple(2) }, 16, 4).ok_or("no halo for the padded window")?;
    let right: Vec<i64> = (0..4).map(|i| spec.right(i)).collect();
    ensure(right == [1, 2, 3, 4] && spec.right_coeffs() == Some((1, 1)), || format!("right halos {right:?}"))?;
    ensure(nonconstant > 0, || "no non-constant halo".into())?;
    Ok(format!("{} convolutions exact; halo plans per case {covered:?}; right halo i+1 on 4 partitions", cases.len()))
}

fn formatting(d: &mut Digest) -> Result<String, String> {
    let tiled = |tiles: &[usize]| Sharding::tiled(tiles.to_vec(), (0..tiles.iter().product::<usize>() as u32).collect()).unwrap();
    let case = |name: &str, dims: &[usize], tin: &[usize], op: Op, tout: &[usize]| -> Graph {
        let mut b = GraphBuilder::new(name);
        let x = b.parameter("x", Shape::new(DType::S32, dims.to_vec()));
        b.set_sharding(x, Some(tiled(tin)));
        let mut ops = vec![x];
        if matches!(op, Op::Pad { .. }) {
            let v = b.constant(Tensor::from_i32(vec![], vec![-3]));
            b.set_sharding(v, Some(Sharding::replicated()));
            ops.push(v);
        }
        let y = b.add_named(Some("y"), op, &ops).unwrap();
        b.set_sharding(y, Some(tiled(tout)));
        b.finish(&[y])
    };
    let pad = |low, high| PadDim { low, high, interior: 0 };
    let sl = |start, limit| SliceDim { start, limit, stride: 1 };
    let cases = vec![
        case("reshape_3x2_to_6", &[3, 2], &[2, 1], Op::Reshape { out_dims: vec![6] }, &[2]),
        case("reverse_7_by_4", &[7], &[4], Op::Reverse { dims: vec![0] }, &[4]),
        case("reverse_5x6", &[5, 6], &[2, 2], Op::Reverse { dims: vec![0, 1] }, &[2, 2]),
        case("pad_7_by_4", &[7], &[4], Op::Pad { config: vec![pad(2, 1)] }, &[4]),
        case("pad_10_by_3", &[10], &[3], Op::Pad { config: vec![pad(0, 3)] }, &[3]),
        case("slice_10_by_4", &[10], &[4], Op::Slice { dims: vec![sl(3, 9)] }, &[4]),
        case("slice_11_by_3", &[11], &[3], Op::Slice { dims: vec![sl(1, 10)] }, &[3]),
    ];
    let mut lines = Vec::new();
    for g in cases {
        let n = g.instr(g.outputs[0]).sharding.as_ref().unwrap().devices().len();
        let program = partition(&g, n).map_err(|e| format!("{}: {e}", g.name))?;
        let r = verify_program(&g, &program, &common::inputs_for(&g, 11), &VerifyOptions::default()).map_err(|e| e.to_string())?;
        ensure(r.pass, || format!("{}: {} mismatches", g.name, r.mismatches))?;
        ensure(program.stats().count("all-gather") == 0, || format!("{}: gathered instead of a halo exchange", g.name))?;
        lines.push(g.name.clone());
        d.program(&program);
    }
    Ok(format!("exact with halo exchanges: {}", lines.join(", ")))
}

fn collective_algebra(d: &mut Digest) -> Result<String, String> {
    let start = Instant::now();
    for seed in 0..1000 {
        common::algebra::algebra_case(seed)?;
    }
    let took = start.elapsed();
    d.text("algebra");
    ensure(took < Duration::from_secs(10), || format!("took {took:?}"))?;
    Ok(format!("1000 cases in {:.2}s", took.as_secs_f64()))
}

fn moe(d: &mut Digest) -> Result<String, String> {
    let g = fixtures::moe();
    let program = partition(&g, 4).map_err(|e| e.to_string())?;
    let r = verify_program(&g, &program, &common::inputs_for(&g, 2), &VerifyOptions::default()).map_err(|e| e.to_string())?;
    ensure(r.pass, || "oracle mismatch".into())?;
    ensure(program.stats().count("all-to-all") >= 1, || format!("collectives {:?}", r.collectives))?;
    d.program(&program);
    Ok(format!("collectives {:?}", r.collectives))
}

fn pipelines(d: &mut Digest) -> Result<String, String> {
    for l in [1, 2, 4] {
        for m in [1, 2, 8] {
            let cfg = PipelineConfig::gpipe(l, m);
            let g = pipeline(&cfg);
            let inputs = common::inputs_for(&g, (l * 10 + m) as u64);
            let got = evaluate_single(&g, &inputs).map_err(|e| e.to_string())?.remove(0);
            ensure(close(&got, &sequential(&cfg, &inputs), 1e-5), || format!("L={l} M={m} differs from sequential layers"))?;
            d.tensor(&got);
        }
    }
    for cfg in [PipelineConfig::gpipe(4, 8), PipelineConfig::gpipe(2, 2)] {
        let g = sharded_pipeline(&cfg);
        let program = partition(&g, cfg.stages).map_err(|e| e.to_string())?;
        let shift = ops_of(&program, "shift.");
        ensure(shift.iter().any(|o| o == "collective-permute") && !shift.iter().any(|o| o == "all-gather"), || {
            format!("L={} shift lowers to {shift:?}", cfg.stages)
        })?;
        let r = verify_program(&g, &program, &common::inputs_for(&g, 4), &VerifyOptions { tol: 1e-5, ..Default::default() })
            .map_err(|e| e.to_string())?;
        ensure(r.pass, || format!("L={} partitioned pipeline mismatch", cfg.stages))?;
        d.program(&program);
    }
    let mut ratios = Vec::new();
    for (l, m, want) in [(4, 16, (3, 19)), (8, 32, (7, 39))] {
        let s = bubble_stats(&PipelineConfig::gpipe(l, m)).map_err(|e| e.to_string())?;
        ensure((s.bubble_numerator, s.bubble_denominator) == want, || format!("L={l} M={m}: {}/{}", s.bubble_numerator, s.bubble_denominator))?;
        ensure(s.padded_steps == (l - 1) * l, || format!("L={l}: {} padded steps", s.padded_steps))?;
        ratios.push(format!("{}/{}", s.bubble_numerator, s.bubble_denominator));
    }
    let circ = bubble_stats(&PipelineConfig::circular(8, 32, 2)).map_err(|e| e.to_string())?;
    let flat = bubble_stats(&PipelineConfig::gpipe(16, 32)).map_err(|e| e.to_string())?;
    ensure(circ.bubble_ratio < flat.bubble_ratio, || "circular schedule does not shrink the bubble".into())?;
    Ok(format!(
        "sequential match for L in {{1,2,4}} x M in {{1,2,8}}; shift is a permute; bubbles {}; circular 8x2 {}/{} < flat 16 {}/{}",
        ratios.join(", "),
        circ.bubble_numerator,
        circ.bubble_denominator,
        flat.bubble_numerator,
        flat.bubble_denominator
    ))
}

fn main() {
    let checks: [(&str, Check); 8] = [
        ("oracle equivalence on random graphs", random_suite),
        ("propagation priorities", priorities),
        ("transformer layer collectives", transformer_layouts),
        ("convolution halo exchange", conv_halos),
        ("data formatting halos", formatting),
        ("collective algebra", collective_algebra),
        ("mixture of experts all-to-all", moe),
        ("pipeline lowering and bubbles", pipelines),
    ];
    let first: Vec<Outcome> = checks.iter().map(|(_, c)| run(*c)).collect();
    let second: Vec<Outcome> = checks.iter().map(|(_, c)| run(*c)).collect();
    let mut failed = 0;
    for (k, ((name, _), o)) in checks.iter().zip(&first).enumerate() {
        println!("criterion {} ({name}): {} - {}", k + 1, if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    let same = first.iter().zip(&second).all(|(a, b)| a.digest == b.digest && a.pass == b.pass);
    let differing: Vec<usize> = (0..checks.len()).filter(|&k| first[k].digest != second[k].digest).map(|k| k + 1).collect();
    println!(
        "criterion 9 (determinism): {} - {}",
        if same { "PASS" } else { "FAIL" },
        if same { "two consecutive runs agree bit for bit".to_string() } else { format!("runs differ for criteria {differing:?}") }
    );
    failed += usize::from(!same);
    if failed > 0 {
        eprintln!("{failed} criteria failed");
        std::process::exit(1);
    }
}
