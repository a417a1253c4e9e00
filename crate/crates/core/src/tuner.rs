//! Exhaustive tuning over a schedule space, plus the size sweep used by
//! `bench` and a quick self-check suite.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compute_ir::{
    conv2d_im2col, matmul, reduce, reference_eval, reference_eval_points, Combiner, ComputeDag,
    ConvGeometry, DType, DagError,
};
use crate::expr::Value;
use crate::fusion::{compile_dag, CompileOptions};
use crate::program_ir::{wellformed, Kernel, Program};
use crate::scheduler::{lower_program, schedule_space, MatmulConfig, ScheduleConfig, SpaceKind};
use crate::tensor::{close, Tensor};
use crate::vm::{run_program_filtered, CostReport, MachineSpec};

/// Relative tolerance of the f32 trial.
pub const F32_RTOL: f64 = 1e-4;
/// Matmuls with more multiply-adds than this are verified on sampled
/// blocks under [`Sampling::Auto`].
pub const FULL_RUN_LIMIT: usize = 1 << 21;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TuneError {
    #[error("empty schedule space")]
    EmptySpace,
    #[error("invalid workload: {0}")]
    Workload(String),
    #[error(transparent)]
    Dag(#[from] DagError),
}

/// An operator instance to tune.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Workload {
    Matmul { m: usize, n: usize, k: usize },
    Conv2d(ConvGeometry),
    Reduce {
        shape: Vec<usize>,
        dims: Vec<usize>,
        combiner: Combiner,
    },
}

impl Workload {
    pub fn dag(&self, dtype: DType) -> Result<ComputeDag, TuneError> {
        Ok(match self {
            Workload::Matmul { m, n, k } => {
                if [m, n, k].contains(&&0) {
                    return Err(TuneError::Workload(format!("matmul {m}x{n}x{k} has a zero extent")));
                }
                matmul(*m, *n, *k, dtype)
            }
            Workload::Conv2d(g) => conv2d_im2col(*g, dtype)?,
            Workload::Reduce {
                shape,
                dims,
                combiner,
            } => reduce(shape, dims, *combiner, dtype)?,
        })
    }

    pub fn space_kind(&self) -> SpaceKind {
        match self {
            Workload::Matmul { .. } | Workload::Conv2d(_) => SpaceKind::Matmul,
            Workload::Reduce { .. } => SpaceKind::Reduce,
        }
    }
}

fn dims(s: &str) -> Option<Vec<usize>> {
    s.split('x').map(|d| d.trim().parse().ok()).collect()
}

/// Short forms: `matmul:64x64x64`, `conv2d:1x4x8x8,8x4x3x3[,s1][,p1]`
/// and `reduce:64x128,1[,sum]` where the second field lists reduced
/// dimensions separated by `x`. JSON is accepted as well.
impl FromStr for Workload {
    type Err = TuneError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.starts_with('{') {
            return serde_json::from_str(s).map_err(|e| TuneError::Workload(e.to_string()));
        }
        let bad = || TuneError::Workload(format!("cannot parse workload `{s}`"));
        let (op, rest) = s.split_once(':').ok_or_else(bad)?;
        let fields: Vec<&str> = rest.split(',').collect();
        match op {
            "matmul" => match dims(rest).as_deref() {
                Some(&[m, n, k]) => Ok(Workload::Matmul { m, n, k }),
                _ => Err(bad()),
            },
            "conv2d" => {
                let (Some(x), Some(w)) = (
                    fields.first().and_then(|f| dims(f)),
                    fields.get(1).and_then(|f| dims(f)),
                ) else {
                    return Err(bad());
                };
                let (&[n, c, h, wd], &[f, c2, kh, kw]) = (&x[..], &w[..]) else {
                    return Err(bad());
                };
                if c != c2 {
                    return Err(TuneError::Workload(format!("channels differ: {c} and {c2}")));
                }
                let (mut stride, mut pad) = (1, 0);
                for extra in &fields[2..] {
                    let v = extra.get(1..).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
                    match extra.chars().next() {
                        Some('s') => stride = v,
                        Some('p') => pad = v,
                        _ => return Err(bad()),
                    }
                }
                let g = ConvGeometry {
                    n,
                    c,
                    h,
                    w: wd,
                    f,
                    kh,
                    kw,
                    stride,
                    pad,
                };
                g.check()?;
                Ok(Workload::Conv2d(g))
            }
            "reduce" => {
                let shape = fields.first().and_then(|f| dims(f)).ok_or_else(bad)?;
                let dims = fields.get(1).and_then(|f| dims(f)).ok_or_else(bad)?;
                let combiner = match fields.get(2).copied() {
                    None | Some("sum") => Combiner::Sum,
                    Some("max") => Combiner::Max,
                    Some("min") => Combiner::Min,
                    Some(_) => return Err(bad()),
                };
                if fields.len() > 3 {
                    return Err(bad());
                }
                Ok(Workload::Reduce {
                    shape,
                    dims,
                    combiner,
                })
            }
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for Workload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[usize]| v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        match self {
            Workload::Matmul { m, n, k } => write!(f, "matmul:{m}x{n}x{k}"),
            Workload::Conv2d(g) => write!(
                f,
                "conv2d:{}x{}x{}x{},{}x{}x{}x{},s{},p{}",
                g.n, g.c, g.h, g.w, g.f, g.c, g.kh, g.kw, g.stride, g.pad
            ),
            Workload::Reduce {
                shape,
                dims,
                combiner,
            } => write!(f, "reduce:{},{},{}", join(shape), join(dims), format!("{combiner:?}").to_lowercase()),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Full execution for small matmuls, sampled blocks above
    /// [`FULL_RUN_LIMIT`].
    #[default]
    Auto,
    Full,
    /// Run the corner tiles of every K split and check points inside
    /// them against the reference. Only matmul workloads are sampled.
    Blocks,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuneOptions {
    pub seed: u64,
    pub machine: MachineSpec,
    pub f32_trial: bool,
    pub sampling: Sampling,
    /// Evaluate configurations on the rayon pool when the `parallel`
    /// feature is enabled.
    pub parallel: bool,
    /// Restricts the search to these configurations, in this order.
    pub configs: Option<Vec<ScheduleConfig>>,
}

impl Default for TuneOptions {
    fn default() -> Self {
        TuneOptions {
            seed: 0,
            machine: MachineSpec::default(),
            f32_trial: true,
            sampling: Sampling::Auto,
            parallel: true,
            configs: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Correct,
    Incorrect,
    /// Compilation or execution failed.
    Error,
    /// Not evaluated because an earlier result aborted the run.
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigResult {
    pub config: ScheduleConfig,
    pub status: Status,
    pub cost: Option<CostReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl ConfigResult {
    pub fn correct(&self) -> bool {
        self.status == Status::Correct
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub workload: Workload,
    pub seed: u64,
    pub space_size: usize,
    pub sampled: bool,
    pub results: Vec<ConfigResult>,
    /// The correct configuration of least total cost, earliest in space
    /// order on ties. `None` when any configuration failed.
    pub best: Option<ScheduleConfig>,
    pub best_cost: Option<CostReport>,
    /// First failing configuration in space order.
    pub failure: Option<ScheduleConfig>,
    pub elapsed_ms: u64,
}

impl TuneReport {
    pub fn ok(&self) -> bool {
        self.failure.is_none() && self.best.is_some()
    }

    /// Equality ignoring wall time.
    pub fn same_outcome(&self, other: &TuneReport) -> bool {
        TuneReport {
            elapsed_ms: 0,
            ..self.clone()
        } == TuneReport {
            elapsed_ms: 0,
            ..other.clone()
        }
    }
}

/// Expected values for one dtype: whole tensors, or points of the single
/// output evaluated per configuration since they depend on the tiling.
enum Expected {
    Full(BTreeMap<String, Tensor>),
    Points,
}

struct Trial {
    dag: ComputeDag,
    inputs: BTreeMap<String, Tensor>,
    expected: Expected,
    exact: bool,
}

struct Prepared<'a> {
    workload: &'a Workload,
    trials: Vec<Trial>,
    sampled: bool,
    machine: MachineSpec,
}

fn random_inputs(dag: &ComputeDag, dtype: DType, seed: u64) -> BTreeMap<String, Tensor> {
    let mut rng = Tensor::seeded_rng(seed);
    dag.inputs
        .iter()
        .map(|name| {
            let shape = &dag.node(name).expect("input node").shape;
            (name.clone(), Tensor::random(shape, dtype, -8, 8, &mut rng))
        })
        .collect()
}

/// Row and column bounds of the tiles whose corner blocks are sampled.
fn sample_tiles(m: usize, n: usize, c: &MatmulConfig) -> Vec<(usize, usize)> {
    let (mt, nt) = (m.div_ceil(c.block_m), n.div_ceil(c.block_n));
    let mut tiles = Vec::new();
    for bi in [0, mt / 2, mt - 1] {
        for bj in [0, nt / 2, nt - 1] {
            if !tiles.contains(&(bi, bj)) {
                tiles.push((bi, bj));
            }
        }
    }
    tiles
}

/// Points checked inside the sampled tiles: corners and centre, clipped
/// to the matrix.
fn sample_points(m: usize, n: usize, c: &MatmulConfig) -> Vec<Vec<usize>> {
    let mut pts = Vec::new();
    for (bi, bj) in sample_tiles(m, n, c) {
        let (r0, c0) = (bi * c.block_m, bj * c.block_n);
        let (r1, c1) = ((r0 + c.block_m).min(m) - 1, (c0 + c.block_n).min(n) - 1);
        for p in [[r0, c0], [r0, c1], [r1, c0], [r1, c1], [(r0 + r1) / 2, (c0 + c1) / 2]] {
            if !pts.contains(&p.to_vec()) {
                pts.push(p.to_vec());
            }
        }
    }
    pts
}

fn value_of(t: &Tensor, idx: &[usize]) -> f64 {
    t.get_f64(t.offset(idx))
}

fn value_f64(v: Value) -> f64 {
    match v {
        Value::I(i) => i as f64,
        Value::F(f) => f as f64,
    }
}

impl<'a> Prepared<'a> {
    fn new(workload: &'a Workload, opts: &TuneOptions) -> Result<Self, TuneError> {
        let sampled = match (workload, opts.sampling) {
            (Workload::Matmul { m, n, k }, Sampling::Auto) => m * n * k > FULL_RUN_LIMIT,
            (Workload::Matmul { .. }, Sampling::Blocks) => true,
            _ => false,
        };
        let mut dtypes = vec![DType::I32];
        if opts.f32_trial {
            dtypes.push(DType::F32);
        }
        let mut trials = Vec::new();
        for (i, dtype) in dtypes.into_iter().enumerate() {
            let dag = workload.dag(dtype)?;
            let inputs = random_inputs(&dag, dtype, opts.seed.wrapping_add(i as u64));
            let expected = if sampled {
                Expected::Points
            } else {
                Expected::Full(reference_eval(&dag, &inputs)?)
            };
            trials.push(Trial {
                dag,
                inputs,
                expected,
                exact: dtype == DType::I32,
            });
        }
        Ok(Prepared {
            workload,
            trials,
            sampled,
            machine: opts.machine,
        })
    }

    fn evaluate(&self, cfg: &ScheduleConfig) -> ConfigResult {
        let result = |status, cost, detail| ConfigResult {
            config: *cfg,
            status,
            cost,
            detail,
        };
        let mut cost = None;
        for trial in &self.trials {
            let program = match self.compile(&trial.dag, cfg) {
                Ok(p) => p,
                Err(e) => return result(Status::Error, None, Some(e)),
            };
            match self.check(trial, &program, cfg) {
                Ok(c) => {
                    cost.get_or_insert(c);
                }
                Err((status, c, detail)) => return result(status, c, Some(detail)),
            }
        }
        result(Status::Correct, cost, None)
    }

    fn compile(&self, dag: &ComputeDag, cfg: &ScheduleConfig) -> Result<Program, String> {
        let opts = CompileOptions {
            fuse: true,
            config: Some(*cfg),
        };
        let program = compile_dag(dag, &opts).map_err(|e| e.to_string())?;
        let program = lower_program(&program).map_err(|e| e.to_string())?;
        for k in &program.kernels {
            if let Some(d) = wellformed(k).first() {
                return Err(format!("kernel `{}`: {d}", k.name));
            }
        }
        Ok(program)
    }

    /// Runs `program` and compares with the reference. On failure returns
    /// the status, the cost if execution finished, and a message.
    fn check(
        &self,
        trial: &Trial,
        program: &Program,
        cfg: &ScheduleConfig,
    ) -> Result<CostReport, (Status, Option<CostReport>, String)> {
        let sample = match (self.sampled, self.workload, cfg) {
            (true, Workload::Matmul { m, n, .. }, ScheduleConfig::Matmul(c)) => Some((*m, *n, *c)),
            _ => None,
        };
        let filter = |i: usize, k: &Kernel| -> Option<Vec<usize>> {
            let (m, n, c) = sample?;
            // kernel 0 computes tiles; a split-K combine kernel runs in full
            if i != 0 {
                return None;
            }
            let (mt, nt) = (m.div_ceil(c.block_m), n.div_ceil(c.block_n));
            debug_assert_eq!(k.grid_dim, c.split_k * mt * nt);
            let tiles = sample_tiles(m, n, &c);
            Some(
                (0..c.split_k)
                    .flat_map(|ks| tiles.iter().map(move |(bi, bj)| ks * mt * nt + bi * nt + bj))
                    .collect(),
            )
        };
        let run = run_program_filtered(program, &trial.inputs, &self.machine, Some(&filter))
            .map_err(|e| (Status::Error, None, e.to_string()))?;
        let fail = |detail: String| (Status::Incorrect, Some(run.cost.clone()), detail);
        if let Some(r) = run.races.first() {
            return Err(fail(format!("{} race diagnostics, first: {r:?}", run.races.len())));
        }
        let rtol = if trial.exact { 0.0 } else { F32_RTOL };
        match (&trial.expected, sample) {
            (Expected::Full(want), _) => {
                for (name, t) in want {
                    let got = &run.outputs[name];
                    let bad = if trial.exact {
                        (got != t).then(|| got.first_mismatch(t, 0.0).unwrap_or(0))
                    } else {
                        got.first_mismatch(t, rtol)
                    };
                    if let Some(i) = bad {
                        return Err(fail(format!(
                            "`{name}` element {i}: got {}, expected {}",
                            got.get_f64(i),
                            t.get_f64(i)
                        )));
                    }
                }
            }
            (Expected::Points, Some((m, n, c))) => {
                let out = &trial.dag.outputs[0];
                let points = sample_points(m, n, &c);
                let want = reference_eval_points(&trial.dag, &trial.inputs, out, &points)
                    .map_err(|e| (Status::Error, None, e.to_string()))?;
                let got = &run.outputs[out];
                for (p, w) in points.iter().zip(want) {
                    let (g, w) = (value_of(got, p), value_f64(w));
                    let ok = if trial.exact { g == w } else { close(g, w, rtol) };
                    if !ok {
                        return Err(fail(format!("`{out}`{p:?}: got {g}, expected {w}")));
                    }
                }
            }
            (Expected::Points, None) => unreachable!("sampling applies to matmul configurations"),
        }
        Ok(run.cost)
    }
}

fn evaluate_all(prep: &Prepared, space: &[ScheduleConfig], parallel: bool) -> Vec<ConfigResult> {
    let abort = AtomicBool::new(false);
    let one = |cfg: &ScheduleConfig| {
        if abort.load(Ordering::Relaxed) {
            return ConfigResult {
                config: *cfg,
                status: Status::Skipped,
                cost: None,
                detail: None,
            };
        }
        let r = prep.evaluate(cfg);
        if !r.correct() {
            abort.store(true, Ordering::Relaxed);
        }
        r
    };
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        return space.par_iter().map(one).collect();
    }
    let _ = parallel;
    space.iter().map(one).collect()
}

/// Evaluates every configuration of the workload's space (or
/// `opts.configs`) and picks the cheapest. Any incorrect or failing
/// configuration aborts the search; the report then names it and has no
/// best configuration.
pub fn tune(workload: &Workload, opts: &TuneOptions) -> Result<TuneReport, TuneError> {
    let start = Instant::now();
    let space_size = schedule_space(workload.space_kind()).len();
    let space = opts
        .configs
        .clone()
        .unwrap_or_else(|| schedule_space(workload.space_kind()));
    if space.is_empty() {
        return Err(TuneError::EmptySpace);
    }
    let prep = Prepared::new(workload, opts)?;
    let results = evaluate_all(&prep, &space, opts.parallel);
    let failure = results
        .iter()
        .find(|r| matches!(r.status, Status::Incorrect | Status::Error))
        .map(|r| r.config);
    let best = if failure.is_some() {
        None
    } else {
        results
            .iter()
            .filter_map(|r| Some((r, r.cost.as_ref()?)))
            .min_by_key(|(_, c)| c.total_cost)
    };
    Ok(TuneReport {
        workload: workload.clone(),
        seed: opts.seed,
        space_size,
        sampled: prep.sampled,
        best: best.map(|(r, _)| r.config),
        best_cost: best.map(|(_, c)| c.clone()),
        failure,
        results,
        elapsed_ms: start.elapsed().as_millis() as u64,
    })
}

/// Evaluates a single configuration with the same checks as [`tune`].
pub fn evaluate(
    workload: &Workload,
    cfg: &ScheduleConfig,
    opts: &TuneOptions,
) -> Result<ConfigResult, TuneError> {
    Ok(Prepared::new(workload, opts)?.evaluate(cfg))
}

/// One line of the `bench` CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub config: String,
    pub blocks: usize,
    pub waves: usize,
    pub per_block_cost: u64,
    pub total_cost: u64,
    pub space_size: usize,
    pub correct: bool,
}

/// Square matmuls over `sizes` with one configuration each, the default
/// unless `cfg` is given.
pub fn bench_matmul(
    sizes: &[usize],
    cfg: Option<MatmulConfig>,
    opts: &TuneOptions,
) -> Result<Vec<BenchRow>, TuneError> {
    let cfg = ScheduleConfig::Matmul(cfg.unwrap_or_default());
    let mut rows = Vec::new();
    for &s in sizes {
        let w = Workload::Matmul { m: s, n: s, k: s };
        let r = evaluate(&w, &cfg, opts)?;
        let cost = r.cost.clone().unwrap_or_default();
        rows.push(BenchRow {
            m: s,
            n: s,
            k: s,
            config: cfg.to_string(),
            blocks: cost.blocks,
            waves: cost.waves,
            per_block_cost: cost.per_block_cost,
            total_cost: cost.total_cost,
            space_size: schedule_space(w.space_kind()).len(),
            correct: r.correct(),
        });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}

/// Outcome of one self-check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

fn check(name: &str, r: Result<(), String>) -> Check {
    Check {
        name: name.to_string(),
        passed: r.is_ok(),
        detail: r.err(),
    }
}

/// A fast subset of the invariants: mapping algebra, a handful of
/// schedules against the reference, and fused convolution.
pub fn selftest(seed: u64) -> Vec<Check> {
    use crate::mapping::TaskMapping;
    use rand::Rng;

    let mut rng = Tensor::seeded_rng(seed);
    let atom = |rng: &mut rand_chacha::ChaCha8Rng, rank: usize| {
        let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..=4)).collect();
        if rng.gen_bool(0.5) {
            TaskMapping::repeat(&shape)
        } else {
            TaskMapping::spatial(&shape)
        }
        .expect("positive extents")
    };
    let table = |f: &TaskMapping| -> Vec<Vec<Vec<usize>>> {
        (0..f.num_workers())
            .map(|w| f.assign(w).expect("worker in range"))
            .collect()
    };
    let mut out = Vec::new();

    let assoc = (0..50).try_for_each(|_| {
        let rank = rng.gen_range(1..=3);
        let (a, b, c) = (atom(&mut rng, rank), atom(&mut rng, rank), atom(&mut rng, rank));
        let l = a.compose(&b).and_then(|ab| ab.compose(&c)).map_err(|e| e.to_string())?;
        let r = b.compose(&c).and_then(|bc| a.compose(&bc)).map_err(|e| e.to_string())?;
        if table(&l) != table(&r) {
            return Err(format!("({a} * {b}) * {c} differs from {a} * ({b} * {c})"));
        }
        Ok(())
    });
    out.push(check("mapping composition is associative", assoc));

    let cover = (0..50).try_for_each(|_| {
        let rank = rng.gen_range(1..=3);
        let f = atom(&mut rng, rank).compose(&atom(&mut rng, rank)).map_err(|e| e.to_string())?;
        let mut seen = vec![0u32; f.task_shape().size()];
        for tasks in table(&f) {
            for t in tasks {
                seen[f.task_shape().linearize(&t)] += 1;
            }
        }
        match seen.iter().all(|c| *c == 1) {
            true => Ok(()),
            false => Err(format!("{f} does not cover its tasks exactly once")),
        }
    });
    out.push(check("compositions cover every task once", cover));

    let opts = TuneOptions {
        seed,
        parallel: false,
        ..TuneOptions::default()
    };
    let space = schedule_space(SpaceKind::Matmul);
    let picks: Vec<ScheduleConfig> = [0, space.len() / 3, 2 * space.len() / 3, space.len() - 1]
        .iter()
        .map(|i| space[*i])
        .collect();
    for (w, configs) in [
        (Workload::Matmul { m: 37, n: 45, k: 29 }, Some(picks)),
        (
            Workload::Reduce {
                shape: vec![6, 300],
                dims: vec![1],
                combiner: Combiner::Max,
            },
            None,
        ),
        (
            Workload::Conv2d(ConvGeometry {
                n: 1,
                c: 4,
                h: 8,
                w: 8,
                f: 8,
                kh: 3,
                kw: 3,
                stride: 1,
                pad: 1,
            }),
            Some(vec![ScheduleConfig::default_for(SpaceKind::Matmul)]),
        ),
    ] {
        let r = tune(&w, &TuneOptions { configs, ..opts.clone() }).map_err(|e| e.to_string());
        let r = r.and_then(|r| match r.failure {
            None => Ok(()),
            Some(c) => {
                let detail = r.results.iter().find(|x| x.config == c).and_then(|x| x.detail.clone());
                Err(format!("{c}: {}", detail.unwrap_or_default()))
            }
        });
        out.push(check(&format!("{w} matches the reference"), r));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TuneOptions {
        TuneOptions {
            seed: 7,
            ..TuneOptions::default()
        }
    }

    #[test]
    fn workload_strings_round_trip() {
        for s in ["matmul:64x32x16", "conv2d:1x4x8x8,8x4x3x3,s2,p1", "reduce:6x300,1,max"] {
            let w: Workload = s.parse().unwrap();
            assert_eq!(w.to_string(), s);
            let json = serde_json::to_string(&w).unwrap();
            assert_eq!(json.parse::<Workload>().unwrap(), w);
        }
        assert!("matmul:4x4".parse::<Workload>().is_err());
        assert!("conv2d:1x4x8x8,8x3x3x3".parse::<Workload>().is_err());
        assert!("gemm:4x4x4".parse::<Workload>().is_err());
    }

    #[test]
    fn config_strings_round_trip() {
        for c in schedule_space(SpaceKind::Matmul)
            .into_iter()
            .chain(schedule_space(SpaceKind::Reduce))
        {
            assert_eq!(c.to_string().parse::<ScheduleConfig>().unwrap(), c);
            assert_eq!(serde_json::to_string(&c).unwrap().parse::<ScheduleConfig>().unwrap(), c);
        }
        assert!("matmul:bm48_bn64_bk8_nopipe_sk1".parse::<ScheduleConfig>().is_err());
        assert!("matmul:bm64_bn64_bk8_t32_nopipe_sk1".parse::<ScheduleConfig>().is_err());
    }

    #[test]
    fn best_is_minimal_and_correct() {
        let space = schedule_space(SpaceKind::Matmul);
        let configs: Vec<_> = space.iter().step_by(17).copied().collect();
        let w = Workload::Matmul { m: 40, n: 24, k: 33 };
        let r = tune(
            &w,
            &TuneOptions {
                configs: Some(configs.clone()),
                ..small()
            },
        )
        .unwrap();
        assert!(r.ok(), "{r:?}");
        assert_eq!(r.space_size, space.len());
        assert_eq!(r.results.len(), configs.len());
        let best = r.best_cost.as_ref().unwrap().total_cost;
        let first = r.results.iter().find(|x| Some(x.config) == r.best).unwrap();
        assert!(first.correct());
        for x in &r.results {
            let c = x.cost.as_ref().unwrap().total_cost;
            assert!(best <= c);
            if c == best {
                assert_eq!(Some(x.config), r.best, "ties go to the earliest config");
                break;
            }
        }
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let space = schedule_space(SpaceKind::Matmul);
        let configs = Some(space.iter().step_by(23).copied().collect::<Vec<_>>());
        let w = Workload::Matmul { m: 33, n: 17, k: 20 };
        let a = tune(&w, &TuneOptions { configs: configs.clone(), parallel: true, ..small() }).unwrap();
        let b = tune(&w, &TuneOptions { configs, parallel: false, ..small() }).unwrap();
        assert!(a.same_outcome(&b));
    }

    #[test]
    fn reduce_space_tunes() {
        let w: Workload = "reduce:5x260,1,sum".parse().unwrap();
        let r = tune(&w, &small()).unwrap();
        assert!(r.ok(), "{:?}", r.failure);
        assert_eq!(r.results.len(), r.space_size);
    }

    #[test]
    fn sampled_verification_checks_edge_tiles() {
        let c = MatmulConfig::default();
        let pts = sample_points(100, 70, &c);
        assert!(pts.contains(&vec![99, 69]));
        assert!(pts.contains(&vec![0, 0]));
        let w = Workload::Matmul { m: 130, n: 70, k: 300 };
        let opts = TuneOptions {
            sampling: Sampling::Blocks,
            configs: Some(vec![ScheduleConfig::Matmul(MatmulConfig::new(32, 32, 8, true, 2))]),
            ..small()
        };
        let r = tune(&w, &opts).unwrap();
        assert!(r.sampled && r.ok(), "{r:?}");
    }

    #[test]
    fn wrong_inputs_abort_the_run() {
        let w = Workload::Matmul { m: 8, n: 8, k: 8 };
        let mut prep = Prepared::new(&w, &small()).unwrap();
        if let Expected::Full(want) = &mut prep.trials[0].expected {
            let c = want.get_mut("C").unwrap();
            *c = Tensor::zeros(&c.shape, DType::I32);
        }
        let space = schedule_space(SpaceKind::Matmul);
        let results = evaluate_all(&prep, &space[..3], false);
        assert_eq!(results[0].status, Status::Incorrect);
        assert!(results[1..].iter().all(|r| r.status == Status::Skipped));
    }

    #[test]
    fn bench_rows_serialize_as_csv() {
        let rows = bench_matmul(&[20, 21], None, &small()).unwrap();
        assert!(rows.iter().all(|r| r.correct));
        let csv = bench_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next(),
            Some("m,n,k,config,blocks,waves,per_block_cost,total_cost,space_size,correct")
        );
        assert_eq!(lines.count(), 2);
    }

    #[test]
    fn selftest_passes() {
        for c in selftest(3) {
            assert!(c.passed, "{}: {:?}", c.name, c.detail);
        }
    }
}
