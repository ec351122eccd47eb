mod diag;
mod dot;

use std::fs;
use std::io::{self, Read, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use meshpart::ir::{parse_graph_with_lines, parse_tensor, print_graph, print_tensor, validate_graph, Graph};
use meshpart::partitioner::{partition, SpmdProgram};
use meshpart::pipeline::{build_pipeline, bubble_stats, shard_pipeline, vectorize_body, PipelineConfig, Schedule};
use meshpart::propagation::{propagate_with, PropagationOptions, PropagationReport};
use meshpart::sharding::Sharding;
use meshpart::simulator::{evaluate_single, evaluate_spmd, random_inputs, verify_program, VerifyOptions};
use meshpart::tensor::Tensor;

use diag::{CliError, Source, MISMATCH};

const STATS_HELP: &str = "Prints per-collective instruction counts and exchanged bytes as JSON.

Bytes are what every participating device sends, summed over devices, for an
operand of B bytes in groups of k devices:
  all-reduce          2(k-1)/k * B   (reduce-scatter then all-gather)
  reduce-scatter       (k-1)/k * B   (half an all-reduce)
  all-to-all           (k-1)/k * B
  all-gather           (k-1)   * B   (B is the local shard)
  collective-permute   B per source/target pair";

#[derive(Parser)]
#[command(name = "meshpart", version, about = "Propagate shardings, partition and simulate tensor graphs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Input {
    /// Graph text file; reads stdin when omitted or `-`.
    input: Option<PathBuf>,
    /// Write the main output here instead of stdout.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Also write a Graphviz rendering of the result.
    #[arg(long)]
    dot: Option<PathBuf>,
}

#[derive(Args)]
struct Devices {
    /// Number of devices; defaults to the graph's mesh size, or one more
    /// than the largest device id in its shardings.
    #[arg(long)]
    devices: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Complete sharding annotations and print the annotated graph.
    Propagate {
        #[command(flatten)]
        io: Input,
        /// Write the JSON log of every sharding change.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Run every rule in plain topological order.
        #[arg(long)]
        no_priorities: bool,
    },
    /// Print the per-device program; its collective stats go to --stats or
    /// stderr.
    Partition {
        #[command(flatten)]
        io: Input,
        #[command(flatten)]
        devices: Devices,
        /// Write the collective stats JSON here.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Execute on simulated devices and print the outputs as literals.
    Run {
        #[command(flatten)]
        io: Input,
        #[command(flatten)]
        devices: Devices,
        /// Parameter value such as `f32[2] [1.5,2]`, one per parameter in
        /// order.
        #[arg(short = 'i', long = "input")]
        inputs: Vec<String>,
        /// Use seeded random values for every parameter instead.
        #[arg(long, conflicts_with = "inputs")]
        seed: Option<u64>,
    },
    /// Partition, run on simulated devices and compare with single-device
    /// evaluation on seeded random inputs. Exits 1 on a mismatch.
    Verify {
        #[command(flatten)]
        io: Input,
        #[command(flatten)]
        devices: Devices,
        /// Relative tolerance for f32 outputs; integers compare exactly.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Collective counts and bytes of the partitioned program.
    #[command(long_about = STATS_HELP)]
    Stats {
        #[command(flatten)]
        io: Input,
        #[command(flatten)]
        devices: Devices,
    },
    /// Unroll a pipeline around a stage body and report its bubble.
    ///
    /// Without a body only the bubble statistics are printed. The body's
    /// first parameter is the microbatch state; further parameters are
    /// per-layer weights. Its output must match the state's shape.
    Pipeline {
        /// Stage body; prints only statistics when omitted.
        input: Option<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long)]
        dot: Option<PathBuf>,
        #[arg(long)]
        stages: usize,
        #[arg(long)]
        microbatches: usize,
        /// `gpipe` or `circular:R` with R layers per stage.
        #[arg(long, default_value = "gpipe")]
        schedule: String,
        /// The body already carries the leading stage dim.
        #[arg(long)]
        vectorized: bool,
        /// Write the bubble statistics JSON here instead of stderr.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
}

fn read_input(path: &Option<PathBuf>) -> Result<String, CliError> {
    match path {
        Some(p) if p.as_os_str() != "-" => fs::read_to_string(p).map_err(|e| CliError::io(&p.display().to_string(), e)),
        _ => {
            let mut s = String::new();
            io::stdin().read_to_string(&mut s).map_err(|e| CliError::io("stdin", e))?;
            Ok(s)
        }
    }
}

fn load(path: &Option<PathBuf>) -> Result<Source, CliError> {
    let text = read_input(path)?;
    let (g, lines) = parse_graph_with_lines(&text).map_err(|e| CliError::parse(&e))?;
    let mut src = Source { graph: None, lines };
    let diags = validate_graph(&g);
    src.graph = Some(g);
    if !diags.is_empty() {
        return Err(CliError::validation(&diags, &src));
    }
    Ok(src)
}

fn emit(path: &Option<PathBuf>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) if p.as_os_str() != "-" => fs::write(p, text).map_err(|e| CliError::io(&p.display().to_string(), e)),
        _ => io::stdout().write_all(text.as_bytes()).map_err(|e| CliError::io("stdout", e)),
    }
}

fn emit_or_stderr(path: &Option<PathBuf>, text: &str) -> Result<(), CliError> {
    match path {
        Some(_) => emit(path, text),
        None => {
            eprintln!("{text}");
            Ok(())
        }
    }
}

/// Propagates, then replicates whatever is still unannotated.
fn annotate(src: &Source, priorities: bool) -> Result<(Graph, PropagationReport), CliError> {
    let g = src.graph.as_ref().expect("loaded");
    let opts = PropagationOptions { use_priorities: priorities, ..Default::default() };
    let (mut g, report) = propagate_with(g, &opts).map_err(|e| CliError::propagation(&e, src))?;
    for ins in &mut g.instructions {
        ins.sharding.get_or_insert_with(Sharding::replicated);
    }
    Ok((g, report))
}

fn device_count(g: &Graph, flag: Option<usize>) -> Result<usize, CliError> {
    let from_graph = g.mesh.as_ref().map(|m| m.num_devices()).or_else(|| {
        g.instructions.iter().filter_map(|i| i.sharding.as_ref()).flat_map(|s| s.devices().iter().copied()).max().map(|d| d as usize + 1)
    });
    match (flag, g.mesh.as_ref()) {
        (Some(0), _) => Err(CliError::usage("--devices must be positive")),
        (Some(n), Some(m)) if n != m.num_devices() => {
            Err(CliError::usage(format!("--devices={n} but the graph's mesh has {} devices", m.num_devices())))
        }
        (Some(n), _) => Ok(n),
        (None, _) => Ok(from_graph.unwrap_or(1)),
    }
}

fn partitioned(src: &Source, devices: Option<usize>) -> Result<(Graph, SpmdProgram), CliError> {
    let (g, _) = annotate(src, true)?;
    let n = device_count(&g, devices)?;
    let program = partition(&g, n).map_err(|e| CliError::partition(&e, src))?;
    Ok((g, program))
}

/// Source instruction that emitted `name` in `program`.
fn origin(program: &SpmdProgram) -> impl Fn(&str) -> Option<String> + '_ {
    move |name| program.provenance.iter().find(|p| p.emitted.iter().any(|e| e == name)).map(|p| p.source.clone())
}

fn parse_schedule(s: &str) -> Result<Schedule, CliError> {
    match s.split_once(':') {
        None if s == "gpipe" => Ok(Schedule::GPipe),
        Some(("circular", r)) => {
            let layers_per_stage = r.parse().map_err(|_| CliError::usage(format!("bad layer count in schedule '{s}'")))?;
            Ok(Schedule::Circular { layers_per_stage })
        }
        _ => Err(CliError::usage(format!("unknown schedule '{s}', expected gpipe or circular:R"))),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Propagate { io, trace, no_priorities } => {
            let src = load(&io.input)?;
            let (g, report) = annotate(&src, !no_priorities)?;
            if let Some(t) = &trace {
                emit(&Some(t.clone()), &(report.to_json() + "\n"))?;
            }
            if let Some(d) = &io.dot {
                emit(&Some(d.clone()), &dot::to_dot(&g))?;
            }
            emit(&io.out, &print_graph(&g))
        }
        Cmd::Partition { io, devices, stats } => {
            let src = load(&io.input)?;
            let (_, program) = partitioned(&src, devices.devices)?;
            if let Some(d) = &io.dot {
                emit(&Some(d.clone()), &dot::to_dot(&program.graph))?;
            }
            emit(&io.out, &program.to_text())?;
            emit_or_stderr(&stats, &program.stats().to_json())
        }
        Cmd::Stats { io, devices } => {
            let src = load(&io.input)?;
            let (_, program) = partitioned(&src, devices.devices)?;
            if let Some(d) = &io.dot {
                emit(&Some(d.clone()), &dot::to_dot(&program.graph))?;
            }
            emit(&io.out, &(program.stats().to_json() + "\n"))
        }
        Cmd::Run { io, devices, inputs, seed } => {
            let src = load(&io.input)?;
            let g = src.graph.as_ref().expect("loaded");
            let values: Vec<Tensor> = match seed {
                Some(s) => random_inputs(g, s),
                None => inputs.iter().map(|t| parse_tensor(t).map_err(|m| CliError::usage(format!("input '{t}': {m}")))).collect::<Result<_, _>>()?,
            };
            let (annotated, _) = annotate(&src, true)?;
            let n = device_count(&annotated, devices.devices)?;
            let outs = if n == 1 {
                evaluate_single(g, &values).map_err(|e| CliError::simulation(&e, &src, |n| Some(n.to_string())))?
            } else {
                let program = partition(&annotated, n).map_err(|e| CliError::partition(&e, &src))?;
                evaluate_spmd(&program, &values, &VerifyOptions::default()).map_err(|e| CliError::simulation(&e, &src, origin(&program)))?
            };
            let mut text = String::new();
            for (o, t) in g.outputs.iter().zip(&outs) {
                text += &format!("%{} = {}\n", g.instr(*o).name, print_tensor(t));
            }
            emit(&io.out, &text)
        }
        Cmd::Verify { io, devices, tol, seed } => {
            if !(tol >= 0.0) {
                return Err(CliError::usage(format!("--tol must be a non-negative number, got {tol}")));
            }
            let src = load(&io.input)?;
            let (g, program) = partitioned(&src, devices.devices)?;
            let inputs = random_inputs(&g, seed);
            let report = verify_program(&g, &program, &inputs, &VerifyOptions { tol, ..Default::default() })
                .map_err(|e| CliError::simulation(&e, &src, origin(&program)))?;
            emit(&io.out, &(report.to_json() + "\n"))?;
            if report.pass {
                Ok(())
            } else {
                Err(CliError::new(MISMATCH, "mismatch", format!("{} output elements differ (max relative error {:.3e})", report.mismatches, report.max_rel)))
            }
        }
        Cmd::Pipeline { input, out, dot: dot_path, stages, microbatches, schedule, vectorized, stats } => {
            let cfg = PipelineConfig { stages, microbatches, schedule: parse_schedule(&schedule)? };
            let bubbles = bubble_stats(&cfg).map_err(|e| CliError::pipeline(&e))?;
            let Some(path) = input else {
                return emit(&out, &(bubbles.to_json() + "\n"));
            };
            let src = load(&Some(path))?;
            let body = src.graph.as_ref().expect("loaded");
            let body = if vectorized { body.clone() } else { vectorize_body(body, stages).map_err(|e| CliError::pipeline(&e))? };
            let g = shard_pipeline(&build_pipeline(&cfg, &body).map_err(|e| CliError::pipeline(&e))?, &cfg);
            if let Some(d) = &dot_path {
                emit(&Some(d.clone()), &dot::to_dot(&g))?;
            }
            emit(&out, &print_graph(&g))?;
            emit_or_stderr(&stats, &bubbles.to_json())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.code as u8)
        }
    }
}
