use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn fixture(name: &str) -> String {
    format!("{}/../core/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn meshpart(args: &[&str], stdin: Option<&str>) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_meshpart"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    {
        let mut pipe = child.stdin.take().unwrap();
        pipe.write_all(stdin.unwrap_or("").as_bytes()).unwrap();
    }
    child.wait_with_output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn diagnostic(o: &Output) -> Value {
    let err = String::from_utf8(o.stderr.clone()).unwrap();
    serde_json::from_str(err.lines().last().unwrap()).unwrap()
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("meshpart-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

const REPLICATED: &str = "graph @g {
  %x = f32[6,4] parameter(0), sharding={replicated}
  %y = f32[6,4] exponential(%x), sharding={replicated}
  return %y
}
";

#[test]
fn verify_replicated_graph_passes() {
    let o = meshpart(&["verify", "--devices=4"], Some(REPLICATED));
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["pass"], true);
}

#[test]
fn zero_tolerance_catches_reordered_sums() {
    // the split sum adds in a different order than the single-device one
    let text = "graph @g {
  %x = f32[64] parameter(0), sharding={devices=[4]0,1,2,3}
  %zero = f32[] constant(0), sharding={replicated}
  %s = f32[] reduce(%x, %zero), dimensions={0}, kind=sum, sharding={replicated}
  return %s
}
";
    let o = meshpart(&["verify", "--tol=0", "--seed=3"], Some(text));
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    assert_eq!(diagnostic(&o)["error"], "mismatch");
    assert_eq!(meshpart(&["verify", "--seed=3"], Some(text)).status.code(), Some(0));
    assert_eq!(meshpart(&["verify", "--tol=-1"], Some(text)).status.code(), Some(2));
}

#[test]
fn two_dimensional_layer_uses_reduce_scatter() {
    let stats = tmp("ff.stats.json");
    let o = meshpart(&["partition", &fixture("ff_2d.mpir"), "--stats", stats.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("reduce-scatter("));
    let s: Value = serde_json::from_str(&std::fs::read_to_string(&stats).unwrap()).unwrap();
    assert!(s["counts"]["all-gather"].as_u64().unwrap() >= 1);
    assert!(s["counts"]["reduce-scatter"].as_u64().unwrap() >= 1);
    assert!(s["counts"].get("all-reduce").is_none());
}

#[test]
fn one_dimensional_layer_all_reduces() {
    let o = meshpart(&["stats", &fixture("ff_1d.mpir")], None);
    let s: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(s["counts"]["all-reduce"].as_u64().unwrap() >= 1);
}

#[test]
fn expert_layers_report_all_to_all() {
    let o = meshpart(&["stats", &fixture("moe.mpir"), "--devices=4"], None);
    let s: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(s["counts"]["all-to-all"], 2);
}

#[test]
fn pipeline_bubble_ratio() {
    let o = meshpart(&["pipeline", "--stages=4", "--microbatches=16"], None);
    let s: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!((s["bubble_numerator"].as_u64(), s["bubble_denominator"].as_u64()), (Some(3), Some(19)));
}

#[test]
fn pipeline_with_body_prints_the_unrolled_graph() {
    let stats = tmp("pipe.stats.json");
    let o = meshpart(
        &["pipeline", &fixture("layer.mpir"), "--stages=2", "--microbatches=4", "--schedule=circular:2", "--stats", stats.to_str().unwrap()],
        None,
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("%shift.1 ") && text.contains("parameter(1)"));
    let s: Value = serde_json::from_str(&std::fs::read_to_string(&stats).unwrap()).unwrap();
    assert_eq!(s["iterations"], 4 * 2 + 1);
    let v = meshpart(&["verify", "--devices=2"], Some(&text));
    assert_eq!(v.status.code(), Some(0), "{}", String::from_utf8_lossy(&v.stderr));
    let report: Value = serde_json::from_str(&stdout(&v)).unwrap();
    assert!(report["collectives"]["collective-permute"].as_u64() > Some(0), "{report}");
    assert!(report["collectives"].get("all-gather").is_none(), "{report}");
    let bad = meshpart(&["pipeline", "--stages=2", "--microbatches=4", "--schedule=zigzag"], None);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn parse_errors_point_at_the_line() {
    let o = meshpart(&["propagate"], Some("graph @g {\n  %x = f32[8] parameter(0), sharding={devices=[2]0,0}\n  return %x\n}\n"));
    assert_eq!(o.status.code(), Some(2));
    let d = diagnostic(&o);
    assert_eq!(d["line"], 2);
    assert!(d["message"].as_str().unwrap().contains("duplicate device"));
}

#[test]
fn conflicting_annotations_name_the_instruction() {
    let text = "graph @g {\n  %x = f32[8] parameter(0), sharding={devices=[2]0,1}\n  %y = f32[8] negate(%x), sharding={devices=[4]0,1,2,3}\n  return %y\n}\n";
    let o = meshpart(&["partition"], Some(text));
    assert_eq!(o.status.code(), Some(2));
    let d = diagnostic(&o);
    assert!(d["instruction"].is_string());
    assert!(d["line"].as_u64().unwrap() >= 2);
    assert!(d["id"].is_u64());
}

#[test]
fn validation_errors_name_the_instruction() {
    let text = "graph @g {\n  %x = f32[8] parameter(0)\n  %y = f32[8] negate(%x)\n  return %y\n}\n";
    let o = meshpart(&["partition", "--devices=3"], Some(text));
    assert_eq!(o.status.code(), Some(0));
    let o = meshpart(&["run", "--devices=2", "-i", "f32[4] [1,2,3,4]"], Some(text));
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(diagnostic(&o)["error"], "simulation");
}

#[test]
fn run_with_literals_on_two_devices() {
    let text = "graph @g {\n  %x = s32[5] parameter(0), sharding={devices=[2]0,1}\n  %y = s32[5] negate(%x), sharding={devices=[2]1,0}\n  return %y\n}\n";
    let o = meshpart(&["run", "-i", "s32[5] [1,2,3,4,5]"], Some(text));
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o), "%y = s32[5] [-1,-2,-3,-4,-5]\n");
}

#[test]
fn dot_output_highlights_collectives() {
    let dot = tmp("ff.dot");
    let o = meshpart(&["partition", &fixture("ff_2d.mpir"), "--dot", dot.to_str().unwrap(), "--stats", tmp("x.json").to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0));
    let text = std::fs::read_to_string(&dot).unwrap();
    assert!(text.starts_with("digraph"));
    assert!(text.lines().any(|l| l.contains("reduce-scatter") && l.contains("fillcolor")));
}

#[test]
fn propagate_writes_a_trace() {
    let trace = tmp("linear_relu.trace.json");
    let o = meshpart(&["propagate", &fixture("linear_relu.mpir"), "--trace", trace.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("%y = f32[8,16] dot(%x, %w)"));
    let t: Value = serde_json::from_str(&std::fs::read_to_string(&trace).unwrap()).unwrap();
    assert!(!t["changes"].as_array().unwrap().is_empty());
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    for args in [vec!["partition", "--devices=4"], vec!["propagate"], vec!["stats", "--devices=4"]] {
        let mut full = args.clone();
        let f = fixture("ff_2d.mpir");
        full.push(&f);
        let a = meshpart(&full, None);
        let b = meshpart(&full, None);
        assert_eq!(a.stdout, b.stdout);
        assert_eq!(a.stderr, b.stderr);
    }
}
