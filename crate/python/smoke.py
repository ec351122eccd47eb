"""Smoke test for the meshpart_py extension: parse, propagate, partition,
run on simulated devices and unroll a pipeline."""

import meshpart_py as mp

GRAPH = """
graph @mlp (mesh=[2]) {
  %x = f32[8,16] parameter(0), sharding={devices=[2,1]0,1}
  %w = f32[16,16] parameter(1)
  %y = f32[8,16] dot(%x, %w), lhs_contracting_dims={1}, rhs_contracting_dims={0}
  %r = f32[8,16] relu(%y)
  return %r
}
"""

LAYER = """
graph @layer {
  %x = f32[2,4] parameter(0)
  %w = f32[4,4] parameter(1)
  %y = f32[2,4] dot(%x, %w), lhs_contracting_dims={1}, rhs_contracting_dims={0}
  %r = f32[2,4] relu(%y)
  return %r
}
"""


def main():
    g = mp.Graph.parse(GRAPH)
    annotated, trace = g.propagate()
    assert annotated.sharding("r") is not None, str(annotated)
    assert trace.startswith("{") or trace.startswith("[")

    program = annotated.partition()
    assert program.num_partitions == 2
    inputs = annotated.random_inputs(seed=1)
    report = program.verify(annotated, inputs)
    assert report["pass"], report
    assert program.run(inputs)[0].dims == [8, 16]

    t = mp.Tensor.parse("s32[2,2] [[1,2],[3,4]]")
    assert t.values() == [1, 2, 3, 4] and t.dtype == "s32"
    assert mp.Tensor("f32", [2], [1.5, 2.0]).values() == [1.5, 2.0]

    assert mp.bubble_stats(4, 16)["bubble"] == (3, 19)
    assert mp.bubble_stats(8, 32)["bubble"] == (7, 39)

    body = mp.Graph.parse(LAYER)
    pipe = mp.build_pipeline(body, stages=2, microbatches=4)
    pipe, _ = pipe.propagate(replicate_rest=True)
    pipe_inputs = pipe.random_inputs(seed=2)
    pipe_report = pipe.partition(2).verify(pipe, pipe_inputs)
    assert "all-gather" not in pipe_report["collectives"], pipe_report
    assert pipe_report["pass"], pipe_report
    assert pipe.evaluate(pipe_inputs)[0].dims == [4, 2, 4]
    print("smoke ok:", program.stats()["counts"], pipe_report["collectives"])


if __name__ == "__main__":
    main()
