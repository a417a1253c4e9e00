//! Turns compute DAGs into programs: rule-based scheduling for operators
//! without large reductions and templates for matmul and reduce.

mod matmul;
mod reduce;
mod rule_based;

pub use matmul::{matmul_template, pipeline_prefetch_precedes_compute, MatmulSpec};
pub use reduce::{reduce_template, ReduceSpec};
pub use rule_based::{rule_based_schedule, RULE_BLOCK_DIM};
pub(crate) use rule_based::{as_dtype, global_buffer};

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compute_ir::{ComputeDag, DagError, NodeBody};
use crate::mapping::{MappingError, TaskMapping};
use crate::program_ir::{lower_maploops, LowerError, Program};

/// Shared memory every configuration of the space must fit into.
pub const SHARED_LIMIT: usize = 48 * 1024;
/// Reductions up to this extent are inlined as sequential loops by the
/// rule-based scheduler.
pub const MAX_INLINE_REDUCTION: usize = 256;
/// Threads forming one warp-analog group.
pub const WARP_SIZE: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("invalid schedule: {0}")]
    InvalidConfig(String),
    #[error("schedule needs {bytes} bytes of shared memory, limit {limit}")]
    SharedOverflow { bytes: usize, limit: usize },
    #[error("node `{node}` reduces over {extent} elements and needs a template")]
    TemplateRequired { node: String, extent: usize },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error(transparent)]
    Lower(#[from] LowerError),
    #[error(transparent)]
    Dag(#[from] DagError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MatmulConfig {
    pub block_m: usize,
    pub block_n: usize,
    pub block_k: usize,
    /// Rows of the block tile owned by one warp.
    pub warp_m: usize,
    /// Columns of the block tile owned by one warp.
    pub warp_n: usize,
    pub threads_per_block: usize,
    pub pipeline: bool,
    pub split_k: usize,
}

impl MatmulConfig {
    /// Derives the warp layout: two warps along a dimension when the
    /// block tile is at least 32 wide there, one otherwise.
    pub fn new(block_m: usize, block_n: usize, block_k: usize, pipeline: bool, split_k: usize) -> Self {
        let warps_m = if block_m >= 32 { 2 } else { 1 };
        let warps_n = if block_n >= 32 { 2 } else { 1 };
        MatmulConfig {
            block_m,
            block_n,
            block_k,
            warp_m: block_m / warps_m,
            warp_n: block_n / warps_n,
            threads_per_block: WARP_SIZE * warps_m * warps_n,
            pipeline,
            split_k,
        }
    }

    pub fn warps(&self) -> (usize, usize) {
        (self.block_m / self.warp_m.max(1), self.block_n / self.warp_n.max(1))
    }

    pub fn shared_bytes(&self) -> usize {
        let stages = if self.pipeline { 2 } else { 1 };
        stages * (self.block_m + self.block_n) * self.block_k * 4
    }

    /// Per-thread sub-tile factors `(rm, tm, rn, tn)`: inside a warp,
    /// threads form a 4 x 8 grid, each owning `rm x rn` groups of
    /// `tm x tn` contiguous elements.
    pub fn thread_tile(&self) -> (usize, usize, usize, usize) {
        let tm = (self.warp_m / 4).clamp(1, 4);
        let tn = (self.warp_n / 8).clamp(1, 4);
        (self.warp_m / (4 * tm), tm, self.warp_n / (8 * tn), tn)
    }

    /// Mapping of block-tile elements to threads for the accumulation.
    pub fn compute_mapping(&self) -> Result<TaskMapping, ScheduleError> {
        let (wm, wn) = self.warps();
        let (rm, tm, rn, tn) = self.thread_tile();
        let m = TaskMapping::spatial(&[wm, wn])?
            .compose(&TaskMapping::repeat(&[rm, rn])?)?
            .compose(&TaskMapping::spatial(&[4, 8])?)?
            .compose(&TaskMapping::repeat(&[tm, tn])?)?;
        Ok(m)
    }

    /// Cooperative load of a `rows x cols` tile by all threads.
    pub fn load_mapping(&self, rows: usize, cols: usize) -> Result<TaskMapping, ScheduleError> {
        let t = self.threads_per_block;
        let tc = cols.min(t);
        let tr = t / tc;
        if tc * tr != t || !rows.is_multiple_of(tr) || !cols.is_multiple_of(tc) {
            return Err(ScheduleError::InvalidConfig(format!(
                "{t} threads cannot cooperatively load a {rows}x{cols} tile"
            )));
        }
        Ok(TaskMapping::repeat(&[rows / tr, cols / tc])?.compose(&TaskMapping::spatial(&[tr, tc])?)?)
    }

    pub fn validate(&self, shared_limit: usize) -> Result<(), ScheduleError> {
        let dims = [self.block_m, self.block_n, self.block_k, self.warp_m, self.warp_n];
        if dims.iter().any(|d| *d == 0 || !d.is_power_of_two()) || self.split_k == 0 {
            return Err(ScheduleError::InvalidConfig(format!(
                "extents must be powers of two and split_k positive: {self}"
            )));
        }
        if !self.block_m.is_multiple_of(self.warp_m) || !self.block_n.is_multiple_of(self.warp_n) {
            return Err(ScheduleError::InvalidConfig(format!(
                "warp tile does not divide block tile: {self}"
            )));
        }
        if self.warp_m < 4 || self.warp_n < 8 {
            return Err(ScheduleError::InvalidConfig(format!(
                "warp tile must be at least 4x8: {self}"
            )));
        }
        let (wm, wn) = self.warps();
        if wm * wn * WARP_SIZE != self.threads_per_block {
            return Err(ScheduleError::InvalidConfig(format!(
                "{} threads do not match {wm}x{wn} warps",
                self.threads_per_block
            )));
        }
        let c = self.compute_mapping()?;
        if c.num_workers() != self.threads_per_block
            || c.task_shape().dims() != [self.block_m, self.block_n]
        {
            return Err(ScheduleError::InvalidConfig(format!(
                "compute mapping {c} does not cover the block tile"
            )));
        }
        self.load_mapping(self.block_m, self.block_k)?;
        self.load_mapping(self.block_k, self.block_n)?;
        if self.shared_bytes() > shared_limit {
            return Err(ScheduleError::SharedOverflow {
                bytes: self.shared_bytes(),
                limit: shared_limit,
            });
        }
        Ok(())
    }
}

impl Default for MatmulConfig {
    fn default() -> Self {
        MatmulConfig::new(64, 64, 8, false, 1)
    }
}

impl fmt::Display for MatmulConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "bm{}_bn{}_bk{}_t{}_{}_sk{}",
            self.block_m,
            self.block_n,
            self.block_k,
            self.threads_per_block,
            if self.pipeline { "pipe" } else { "nopipe" },
            self.split_k
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReduceConfig {
    pub threads_per_block: usize,
    /// Blocks cooperating on one output element; more than one adds a
    /// second pass combining their partial results.
    pub parts: usize,
}

impl ReduceConfig {
    pub fn validate(&self, max_threads: usize) -> Result<(), ScheduleError> {
        let t = self.threads_per_block;
        if t == 0 || !t.is_power_of_two() || t > max_threads || self.parts == 0 {
            return Err(ScheduleError::InvalidConfig(format!(
                "reduce with {t} threads and {} parts",
                self.parts
            )));
        }
        Ok(())
    }
}

impl Default for ReduceConfig {
    fn default() -> Self {
        ReduceConfig {
            threads_per_block: 128,
            parts: 1,
        }
    }
}

impl fmt::Display for ReduceConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}_p{}", self.threads_per_block, self.parts)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleConfig {
    Matmul(MatmulConfig),
    Reduce(ReduceConfig),
}

impl ScheduleConfig {
    pub fn kind(&self) -> SpaceKind {
        match self {
            ScheduleConfig::Matmul(_) => SpaceKind::Matmul,
            ScheduleConfig::Reduce(_) => SpaceKind::Reduce,
        }
    }

    pub fn default_for(kind: SpaceKind) -> Self {
        match kind {
            SpaceKind::Matmul => ScheduleConfig::Matmul(MatmulConfig::default()),
            SpaceKind::Reduce => ScheduleConfig::Reduce(ReduceConfig::default()),
        }
    }
}

impl fmt::Display for ScheduleConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleConfig::Matmul(c) => write!(f, "matmul:{c}"),
            ScheduleConfig::Reduce(c) => write!(f, "reduce:{c}"),
        }
    }
}

/// Parses the printed form, e.g. `matmul:bm64_bn64_bk8_t128_nopipe_sk1`
/// or `reduce:t128_p1`, or the JSON encoding.
impl FromStr for ScheduleConfig {
    type Err = ScheduleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.starts_with('{') {
            return serde_json::from_str(s).map_err(|e| ScheduleError::InvalidConfig(e.to_string()));
        }
        let bad = || ScheduleError::InvalidConfig(format!("cannot parse configuration `{s}`"));
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        let mut fields: HashMap<&str, usize> = HashMap::new();
        let mut pipeline = None;
        for part in rest.split('_') {
            match part {
                "pipe" => pipeline = Some(true),
                "nopipe" => pipeline = Some(false),
                _ => {
                    let at = part.find(|c: char| c.is_ascii_digit()).ok_or_else(bad)?;
                    let v = part[at..].parse().map_err(|_| bad())?;
                    if fields.insert(&part[..at], v).is_some() {
                        return Err(bad());
                    }
                }
            }
        }
        let field = |k: &str| fields.get(k).copied().ok_or_else(bad);
        let cfg = match kind {
            "matmul" => {
                let c = MatmulConfig::new(
                    field("bm")?,
                    field("bn")?,
                    field("bk")?,
                    pipeline.ok_or_else(bad)?,
                    field("sk")?,
                );
                if fields.get("t").is_some_and(|t| *t != c.threads_per_block) || fields.len() > 5 {
                    return Err(bad());
                }
                c.validate(SHARED_LIMIT)?;
                ScheduleConfig::Matmul(c)
            }
            "reduce" => {
                let c = ReduceConfig {
                    threads_per_block: field("t")?,
                    parts: field("p")?,
                };
                if fields.len() > 2 || pipeline.is_some() {
                    return Err(bad());
                }
                c.validate(1024)?;
                ScheduleConfig::Reduce(c)
            }
            _ => return Err(bad()),
        };
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceKind {
    Matmul,
    Reduce,
}

pub fn matmul_space() -> Vec<MatmulConfig> {
    let tiles = [16, 32, 64, 128];
    let mut out = Vec::new();
    for bm in tiles {
        for bn in tiles {
            for bk in [8, 16, 32] {
                for pipeline in [false, true] {
                    for split_k in [1, 2] {
                        let c = MatmulConfig::new(bm, bn, bk, pipeline, split_k);
                        if c.validate(SHARED_LIMIT).is_ok() {
                            out.push(c);
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn reduce_space() -> Vec<ReduceConfig> {
    let mut out = Vec::new();
    for threads_per_block in [32, 64, 128, 256] {
        for parts in [1, 2, 4, 8] {
            out.push(ReduceConfig {
                threads_per_block,
                parts,
            });
        }
    }
    out
}

/// The schedule space for an operator class. It depends only on the
/// class, never on tensor sizes.
pub fn schedule_space(kind: SpaceKind) -> Vec<ScheduleConfig> {
    match kind {
        SpaceKind::Matmul => matmul_space().into_iter().map(ScheduleConfig::Matmul).collect(),
        SpaceKind::Reduce => reduce_space().into_iter().map(ScheduleConfig::Reduce).collect(),
    }
}

/// The template an anchor node calls for, if any.
pub fn space_kind(dag: &ComputeDag, node: &str) -> Option<SpaceKind> {
    let n = dag.node(node)?;
    match &n.body {
        NodeBody::Reduce { .. } if MatmulSpec::from_node(dag, node).is_some() => Some(SpaceKind::Matmul),
        NodeBody::Reduce { .. } => Some(SpaceKind::Reduce),
        _ => None,
    }
}

/// Schedules a DAG whose only reduction is its output, using the
/// template named by `cfg`; other nodes are inlined.
pub fn template_schedule(dag: &ComputeDag, cfg: &ScheduleConfig) -> Result<Program, ScheduleError> {
    let anchors: Vec<&str> = dag
        .computed()
        .filter(|n| matches!(n.body, NodeBody::Reduce { .. }))
        .map(|n| n.name.as_str())
        .collect();
    let [anchor] = anchors[..] else {
        return Err(ScheduleError::Unsupported(format!(
            "templates need exactly one reduction, found {}",
            anchors.len()
        )));
    };
    match cfg {
        ScheduleConfig::Matmul(c) => {
            let spec = MatmulSpec::from_node(dag, anchor).ok_or_else(|| {
                ScheduleError::Unsupported(format!("`{anchor}` is not a matrix multiplication"))
            })?;
            if dag.outputs != [anchor] || dag.computed().count() != 1 {
                return Err(ScheduleError::Unsupported(
                    "the matmul template schedules a bare matmul; use fusion for neighbours".into(),
                ));
            }
            matmul_template(&spec, c)
        }
        ScheduleConfig::Reduce(c) => {
            if dag.outputs != [anchor] {
                return Err(ScheduleError::Unsupported(
                    "the reduce template needs the reduction as sole output".into(),
                ));
            }
            reduce_template(&ReduceSpec::from_dag(dag, anchor)?, c)
        }
    }
}

/// Lowers every kernel's mapped loops.
pub fn lower_program(p: &Program) -> Result<Program, ScheduleError> {
    let mut kernels = Vec::with_capacity(p.kernels.len());
    for k in &p.kernels {
        kernels.push(lower_maploops(k)?);
    }
    Ok(Program {
        kernels,
        ..p.clone()
    })
}

#[cfg(test)]
mod tests;
