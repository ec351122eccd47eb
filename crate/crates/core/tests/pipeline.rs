mod common;

use common::pipeline::{close, layer, ops_of, pipeline, sequential, sharded_pipeline};
use meshpart::partitioner::partition;
use meshpart::pipeline::{vectorize_body, PipelineConfig};
use meshpart::simulator::{evaluate_single, verify_program, VerifyOptions};
use meshpart::tensor::Tensor;

#[test]
fn gpipe_matches_sequential_layers() {
    for l in [1, 2, 4] {
        for m in [1, 2, 8] {
            let cfg = PipelineConfig::gpipe(l, m);
            let g = pipeline(&cfg);
            let inputs = common::inputs_for(&g, (l * 31 + m) as u64);
            let got = evaluate_single(&g, &inputs).unwrap().remove(0);
            assert!(close(&got, &sequential(&cfg, &inputs), 1e-5), "L={l} M={m}");
        }
    }
}

#[test]
fn circular_matches_sequential_layers() {
    for (l, m, r) in [(2, 4, 2), (4, 8, 2), (3, 5, 3), (1, 3, 2)] {
        let cfg = PipelineConfig::circular(l, m, r);
        let g = pipeline(&cfg);
        let inputs = common::inputs_for(&g, (l * 7 + m * 3 + r) as u64);
        let got = evaluate_single(&g, &inputs).unwrap().remove(0);
        assert!(close(&got, &sequential(&cfg, &inputs), 1e-5), "L={l} M={m} R={r}");
    }
}

#[test]
fn split_stages_shift_with_permutes() {
    for cfg in [PipelineConfig::gpipe(4, 8), PipelineConfig::gpipe(2, 2), PipelineConfig::circular(4, 8, 2)] {
        let g = sharded_pipeline(&cfg);
        let program = partition(&g, cfg.stages).unwrap();
        let shift = ops_of(&program, "shift.");
        assert!(shift.iter().any(|o| o == "collective-permute"), "{cfg:?}: {shift:?}");
        assert!(!shift.iter().any(|o| o == "all-gather"), "{cfg:?}: {shift:?}");
        let inputs = common::inputs_for(&g, 5);
        let report = verify_program(&g, &program, &inputs, &VerifyOptions { tol: 1e-5, ..Default::default() }).unwrap();
        assert!(report.pass, "{cfg:?}: {report:?}");
        assert_eq!(report.collectives.get("all-gather"), None, "{cfg:?}: {:?}", report.collectives);
    }
}

#[test]
fn vectorized_body_matches_per_stage_layers() {
    let l = 3;
    let body = vectorize_body(&layer(), l).unwrap();
    let inputs = common::inputs_for(&body, 9);
    let got = evaluate_single(&body, &inputs).unwrap().remove(0);
    for s in 0..l {
        let args: Vec<Tensor> = inputs.iter().map(|t| slab_at(t, s)).collect();
        let want = evaluate_single(&layer(), &args).unwrap().remove(0);
        assert!(close(&slab_at(&got, s), &want, 0.0));
    }
}

fn slab_at(t: &Tensor, k: usize) -> Tensor {
    let inner = t.dims()[1..].to_vec();
    let n: usize = inner.iter().product();
    Tensor::from_f32(inner, t.as_f32().unwrap()[k * n..(k + 1) * n].to_vec())
}
