mod common;

use meshpart::ir::Op;
use meshpart::partitioner::partition;
use meshpart::simulator::collectives::{check_groups, check_pairs};
use meshpart::simulator::{verify_program, VerifyOptions};

#[test]
fn random_graphs_match_single_device() {
    for seed in 1000..1600u64 {
        let (g, n) = common::random_annotated_graph(seed);
        let inputs = common::inputs_for(&g, seed);
        let program = partition(&g, n).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        let r = verify_program(&g, &program, &inputs, &VerifyOptions::default()).unwrap();
        assert!(r.pass, "seed {seed}: {r:?}");
    }
}

#[test]
fn emitted_collectives_are_well_formed() {
    for seed in 0..300u64 {
        let (g, n) = common::random_annotated_graph(seed);
        let program = partition(&g, n).unwrap();
        for ins in &program.graph.instructions {
            let r = match &ins.op {
                Op::AllReduce { groups, .. } | Op::AllGather { groups, .. } | Op::ReduceScatter { groups, .. } | Op::AllToAll { groups, .. } => {
                    check_groups(groups, n)
                }
                Op::CollectivePermute { pairs } => check_pairs(pairs, n),
                _ => Ok(()),
            };
            assert!(r.is_ok(), "seed {seed}: {}: {:?}", ins.name, r);
        }
    }
}

#[test]
fn partitioning_is_deterministic() {
    for seed in 0..50u64 {
        let (g, n) = common::random_annotated_graph(seed);
        assert_eq!(partition(&g, n).unwrap().to_text(), partition(&g, n).unwrap().to_text());
    }
}
