//! `taskmap` command-line front end.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use taskmap::compute_ir::reference_eval;
use taskmap::fusion::{compile_dag, partition, partition_unfused, CompileOptions, OpGraph};
use taskmap::program_ir::{parse_program, Program};
use taskmap::scheduler::{lower_program, MatmulConfig, ScheduleConfig};
use taskmap::tuner::{self, Sampling, TuneOptions, Workload};
use taskmap::vm::{run_program, MachineSpec};
use taskmap::{ComputeDag, TaskMapping, Tensor};

#[derive(Parser, Debug)]
#[command(name = "taskmap", version, about = "Task-mapping tensor program compiler")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Inspect task mappings.
    Map {
        #[command(subcommand)]
        action: MapAction,
    },
    /// Compile a DAG or operator graph (JSON) into kernels.
    Compile {
        file: PathBuf,
        #[command(flatten)]
        sched: SchedArgs,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
        /// Expand mapped loops into plain loops.
        #[arg(long)]
        lowered: bool,
    },
    /// Execute kernels, a DAG or an operator graph on the virtual machine.
    Run {
        file: PathBuf,
        /// `NAME=PATH` of a tensor JSON file; repeatable.
        #[arg(long = "input", value_name = "NAME=PATH")]
        inputs: Vec<String>,
        /// Fill inputs not given with seeded random values in [-8, 8].
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        sched: SchedArgs,
        /// Compare the outputs with the reference evaluation.
        #[arg(long)]
        check: bool,
        /// Report costs only.
        #[arg(long)]
        no_data: bool,
    },
    /// Evaluate every schedule of a workload and report the cheapest.
    Tune {
        /// e.g. `matmul:64x64x64`, `conv2d:1x4x8x8,8x4x3x3,s1,p1`,
        /// `reduce:64x300,1,sum` or a JSON workload.
        workload: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "auto")]
        sampling: SamplingArg,
        /// Evaluate configurations one at a time.
        #[arg(long)]
        sequential: bool,
        /// Skip the f32 trial.
        #[arg(long)]
        no_f32: bool,
        /// Only try these configurations; repeatable.
        #[arg(long = "config")]
        configs: Vec<String>,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Sweep square matmul sizes with one schedule and print CSV.
    Bench {
        #[arg(value_enum)]
        op: BenchOp,
        /// `A..B` (inclusive) or a comma-separated list.
        #[arg(long)]
        sizes: String,
        #[arg(long)]
        config: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "auto")]
        sampling: SamplingArg,
    },
    /// Partition an operator graph and print the fused kernels.
    Fuse {
        file: PathBuf,
        #[command(flatten)]
        sched: SchedArgs,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Run a fast invariant suite.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Subcommand, Debug)]
enum MapAction {
    /// Print the task grid of a mapping such as `repeat(2,2)`.
    Show {
        mapping: String,
        #[arg(long)]
        json: bool,
    },
    /// Compose mappings left to right and print the result.
    Compose {
        #[arg(required = true, num_args = 2..)]
        mappings: Vec<String>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(clap::Args, Debug)]
struct SchedArgs {
    /// Schedule for anchors of the matching kind, e.g.
    /// `matmul:bm64_bn64_bk8_t128_nopipe_sk1`.
    #[arg(long)]
    config: Option<String>,
    /// Compile every operator as its own kernel.
    #[arg(long)]
    no_fuse: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Format {
    Text,
    Json,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SamplingArg {
    Auto,
    Full,
    Blocks,
}

impl From<SamplingArg> for Sampling {
    fn from(s: SamplingArg) -> Self {
        match s {
            SamplingArg::Auto => Sampling::Auto,
            SamplingArg::Full => Sampling::Full,
            SamplingArg::Blocks => Sampling::Blocks,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum BenchOp {
    Matmul,
}

/// Failure classes, mapped to exit codes 2 and 1.
#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Incorrect(anyhow::Error),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

type CmdResult = Result<(), Failure>;

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(usage)
}

/// The accepted JSON inputs.
enum Source {
    Dag(ComputeDag),
    Kernels(Program),
}

fn load_graph(path: &Path) -> Result<ComputeDag, Failure> {
    let text = read(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(usage)?;
    if value.get("ops").is_some() {
        let g: OpGraph = serde_json::from_value(value).context("operator graph").map_err(usage)?;
        return g.to_dag().map_err(usage);
    }
    let dag: ComputeDag = serde_json::from_value(value).context("compute DAG").map_err(usage)?;
    dag.validate().map_err(usage)?;
    Ok(dag)
}

fn load_source(path: &Path) -> Result<Source, Failure> {
    let text = read(path)?;
    if !text.trim_start().starts_with('{') {
        let kernels = parse_program(&text).map_err(usage)?;
        return Ok(Source::Kernels(program_of(kernels)));
    }
    let value: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(usage)?;
    if value.get("kernels").is_some() {
        let p: Program = serde_json::from_value(value).context("program").map_err(usage)?;
        return Ok(Source::Kernels(p));
    }
    load_graph(path).map(Source::Dag)
}

/// Treats parameters no kernel writes as inputs and written ones as
/// outputs.
fn program_of(kernels: Vec<taskmap::program_ir::Kernel>) -> Program {
    let written: Vec<String> = kernels.iter().flat_map(|k| k.written_globals()).collect();
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    for b in kernels.iter().flat_map(|k| &k.params) {
        let list = if written.contains(&b.name) { &mut outputs } else { &mut inputs };
        if !list.iter().any(|x: &taskmap::program_ir::Buffer| x.name == b.name) {
            list.push(b.clone());
        }
    }
    Program {
        kernels,
        inputs,
        outputs,
        temps: vec![],
    }
}

fn compile_options(s: &SchedArgs) -> Result<CompileOptions, Failure> {
    let config = s
        .config
        .as_deref()
        .map(str::parse::<ScheduleConfig>)
        .transpose()
        .map_err(usage)?;
    Ok(CompileOptions {
        fuse: !s.no_fuse,
        config,
    })
}

fn compile(dag: &ComputeDag, s: &SchedArgs) -> Result<Program, Failure> {
    let opts = compile_options(s)?;
    Ok(compile_dag(dag, &opts).map_err(|e| anyhow!(e))?)
}

fn print_json(v: &impl serde::Serialize) -> CmdResult {
    println!("{}", serde_json::to_string_pretty(v).map_err(|e| anyhow!(e))?);
    Ok(())
}

fn cmd_map(action: MapAction) -> CmdResult {
    let (m, json) = match action {
        MapAction::Show { mapping, json } => (TaskMapping::parse(&mapping).map_err(usage)?, json),
        MapAction::Compose { mappings, json } => {
            let mut parsed = mappings.iter().map(|s| TaskMapping::parse(s).map_err(usage));
            let first = parsed.next().expect("at least two mappings")?;
            let m = parsed.try_fold(first, |acc, m| acc.compose(&m?).map_err(usage))?;
            (m, json)
        }
    };
    let assignment = (0..m.num_workers())
        .map(|w| m.assign(w))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| anyhow!(e))?;
    if json {
        return print_json(&json!({
            "mapping": m.to_string(),
            "num_workers": m.num_workers(),
            "task_shape": m.task_shape().dims(),
            "assignment": assignment,
        }));
    }
    println!("{m}");
    println!("workers: {}  task shape: {:?}", m.num_workers(), m.task_shape().dims());
    match m.visualize() {
        Ok(grid) => print!("{grid}"),
        Err(_) => {
            for (w, tasks) in assignment.iter().enumerate() {
                println!("w{w}: {tasks:?}");
            }
        }
    }
    Ok(())
}

fn cmd_compile(file: &Path, sched: &SchedArgs, format: Format, lowered: bool) -> CmdResult {
    let dag = load_graph(file)?;
    let mut program = compile(&dag, sched)?;
    if lowered {
        program = lower_program(&program).map_err(|e| anyhow!(e))?;
    }
    match format {
        Format::Text => print!("{program}"),
        Format::Json => print_json(&program)?,
    }
    Ok(())
}

fn parse_input(spec: &str) -> Result<(String, Tensor), Failure> {
    let (name, path) = spec
        .split_once('=')
        .ok_or_else(|| usage(anyhow!("expected NAME=PATH, got `{spec}`")))?;
    let text = read(Path::new(path))?;
    let t: Tensor = serde_json::from_str(&text)
        .with_context(|| format!("tensor in {path}"))
        .map_err(usage)?;
    Ok((name.to_string(), t))
}

fn cmd_run(
    file: &Path,
    input_specs: &[String],
    seed: Option<u64>,
    sched: &SchedArgs,
    check: bool,
    no_data: bool,
) -> CmdResult {
    let source = load_source(file)?;
    let (program, dag) = match source {
        Source::Dag(dag) => (compile(&dag, sched)?, Some(dag)),
        Source::Kernels(p) => (p, None),
    };
    let program = lower_program(&program).map_err(|e| anyhow!(e))?;
    let mut inputs: BTreeMap<String, Tensor> = input_specs
        .iter()
        .map(|s| parse_input(s))
        .collect::<Result<_, _>>()?;
    if let Some(seed) = seed {
        let mut rng = Tensor::seeded_rng(seed);
        for b in &program.inputs {
            if !inputs.contains_key(&b.name) {
                inputs.insert(b.name.clone(), Tensor::random(&b.shape, b.dtype, -8, 8, &mut rng));
            }
        }
    }
    let result = run_program(&program, &inputs, &MachineSpec::default()).map_err(usage)?;
    let mut mismatches = Vec::new();
    if check {
        let Some(dag) = &dag else {
            return Err(usage(anyhow!("--check needs a DAG or operator graph")));
        };
        let want = reference_eval(dag, &inputs).map_err(usage)?;
        for (name, t) in &want {
            if let Some(i) = result.outputs[name].first_mismatch(t, tuner::F32_RTOL) {
                mismatches.push(json!({
                    "tensor": name,
                    "index": i,
                    "got": result.outputs[name].get_f64(i),
                    "expected": t.get_f64(i),
                }));
            }
        }
    }
    let mut report = json!({
        "cost": result.cost,
        "races": result.races,
    });
    if !no_data {
        report["outputs"] = json!(result.outputs);
    }
    if check {
        report["matches_reference"] = json!(mismatches.is_empty());
        report["mismatches"] = json!(mismatches);
    }
    print_json(&report)?;
    if !mismatches.is_empty() || !result.races.is_empty() {
        return Err(Failure::Incorrect(anyhow!(
            "{} mismatching outputs, {} races",
            mismatches.len(),
            result.races.len()
        )));
    }
    Ok(())
}

fn cmd_tune(
    workload: &str,
    seed: u64,
    sampling: SamplingArg,
    sequential: bool,
    no_f32: bool,
    configs: &[String],
    output: Option<&Path>,
) -> CmdResult {
    let workload: Workload = workload.parse().map_err(usage)?;
    let configs = if configs.is_empty() {
        None
    } else {
        Some(
            configs
                .iter()
                .map(|c| c.parse::<ScheduleConfig>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(usage)?,
        )
    };
    let opts = TuneOptions {
        seed,
        f32_trial: !no_f32,
        sampling: sampling.into(),
        parallel: !sequential,
        configs,
        ..TuneOptions::default()
    };
    let report = tuner::tune(&workload, &opts).map_err(usage)?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| anyhow!(e))?;
    match output {
        Some(p) => fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    match report.failure {
        Some(c) => Err(Failure::Incorrect(anyhow!("configuration {c} failed verification"))),
        None => Ok(()),
    }
}

fn parse_sizes(s: &str) -> Result<Vec<usize>, Failure> {
    let bad = || usage(anyhow!("cannot parse sizes `{s}`"));
    let sizes: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        (a..=b).collect()
    } else {
        s.split(',')
            .map(|x| x.trim().parse())
            .collect::<Result<_, _>>()
            .map_err(|_| bad())?
    };
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(bad());
    }
    Ok(sizes)
}

fn cmd_bench(sizes: &str, config: Option<&str>, seed: u64, sampling: SamplingArg) -> CmdResult {
    let sizes = parse_sizes(sizes)?;
    let cfg: Option<MatmulConfig> = match config.map(str::parse::<ScheduleConfig>).transpose() {
        Ok(None) => None,
        Ok(Some(ScheduleConfig::Matmul(c))) => Some(c),
        Ok(Some(other)) => return Err(usage(anyhow!("`{other}` is not a matmul configuration"))),
        Err(e) => return Err(usage(e)),
    };
    let opts = TuneOptions {
        seed,
        sampling: sampling.into(),
        ..TuneOptions::default()
    };
    let rows = tuner::bench_matmul(&sizes, cfg, &opts).map_err(usage)?;
    print!("{}", tuner::bench_csv(&rows));
    let wrong: Vec<usize> = rows.iter().filter(|r| !r.correct).map(|r| r.m).collect();
    if !wrong.is_empty() {
        return Err(Failure::Incorrect(anyhow!("incorrect results for sizes {wrong:?}")));
    }
    Ok(())
}

fn cmd_fuse(file: &Path, sched: &SchedArgs, format: Format) -> CmdResult {
    let dag = load_graph(file)?;
    let groups = if sched.no_fuse {
        partition_unfused(&dag)
    } else {
        partition(&dag)
    };
    let program = compile(&dag, sched)?;
    match format {
        Format::Json => print_json(&json!({ "subgraphs": groups, "program": program }))?,
        Format::Text => {
            for (i, g) in groups.iter().enumerate() {
                let anchor = g.anchor.as_deref().unwrap_or("-");
                println!("# subgraph {i}: anchor {anchor}, nodes {:?}", g.nodes);
                for (input, absorbed) in &g.prologues {
                    println!("#   prologue {input} <- {absorbed:?}");
                }
                if !g.epilogue.is_empty() {
                    println!("#   epilogue {:?}", g.epilogue);
                }
            }
            print!("{program}");
        }
    }
    Ok(())
}

fn cmd_selftest(seed: u64, json: bool) -> CmdResult {
    let checks = tuner::selftest(seed);
    if json {
        print_json(&checks)?;
    } else {
        for c in &checks {
            let mark = if c.passed { "PASS" } else { "FAIL" };
            match &c.detail {
                Some(d) => println!("{mark} {}: {d}", c.name),
                None => println!("{mark} {}", c.name),
            }
        }
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Failure::Incorrect(anyhow!("{failed} checks failed")));
    }
    Ok(())
}

fn dispatch(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Map { action } => cmd_map(action),
        Command::Compile {
            file,
            sched,
            format,
            lowered,
        } => cmd_compile(&file, &sched, format, lowered),
        Command::Run {
            file,
            inputs,
            seed,
            sched,
            check,
            no_data,
        } => cmd_run(&file, &inputs, seed, &sched, check, no_data),
        Command::Tune {
            workload,
            seed,
            sampling,
            sequential,
            no_f32,
            configs,
            output,
        } => cmd_tune(&workload, seed, sampling, sequential, no_f32, &configs, output.as_deref()),
        Command::Bench {
            op: BenchOp::Matmul,
            sizes,
            config,
            seed,
            sampling,
        } => cmd_bench(&sizes, config.as_deref(), seed, sampling),
        Command::Fuse { file, sched, format } => cmd_fuse(&file, &sched, format),
        Command::Selftest { seed, json } => cmd_selftest(seed, json),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, code, err) = match dispatch(cli) {
        Ok(()) => return ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => ("usage", 2, e),
        Err(Failure::Incorrect(e)) => ("incorrect", 1, e),
        Err(Failure::Other(e)) => ("error", 1, e),
    };
    let mut message = String::new();
    for cause in err.chain().map(|c| c.to_string()) {
        if !message.contains(&cause) {
            if !message.is_empty() {
                message.push_str(": ");
            }
            message.push_str(&cause);
        }
    }
    let diag = json!({ "error": kind, "message": message });
    eprintln!("{diag}");
    ExitCode::from(code)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_ranges_are_inclusive() {
        assert_eq!(parse_sizes("2037..2041").unwrap(), vec![2037, 2038, 2039, 2040, 2041]);
        assert_eq!(parse_sizes("1..=2").unwrap(), vec![1, 2]);
        assert_eq!(parse_sizes("8, 16").unwrap(), vec![8, 16]);
        assert!(parse_sizes("5..3").is_err());
        assert!(parse_sizes("x").is_err());
        assert!(parse_sizes("0,1").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
