//! Deterministic virtual parallel machine.
//!
//! Blocks run one after another; inside a block each phase (the code
//! between two barriers) runs thread 0 to completion, then thread 1, and
//! so on. Conflicting accesses inside a phase are reported as races.

mod compile;
mod exec;
mod race;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::EvalError;
use crate::program_ir::{Buffer, Kernel, Program};
use crate::tensor::Tensor;

pub use compile::{compile, Compiled};
pub use race::{RaceDiagnostic, RaceKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostWeights {
    pub arith: u64,
    pub shared_access: u64,
    pub global_access: u64,
    pub barrier: u64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            arith: 1,
            shared_access: 4,
            global_access: 40,
            barrier: 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineSpec {
    pub num_sms: usize,
    pub shared_bytes_per_block: usize,
    pub max_threads_per_block: usize,
    pub weights: CostWeights,
}

impl Default for MachineSpec {
    fn default() -> Self {
        MachineSpec {
            num_sms: 16,
            shared_bytes_per_block: 48 * 1024,
            max_threads_per_block: 1024,
            weights: CostWeights::default(),
        }
    }
}

impl MachineSpec {
    pub fn validate(&self) -> Result<(), VmError> {
        let w = &self.weights;
        if self.num_sms == 0
            || self.shared_bytes_per_block == 0
            || self.max_threads_per_block == 0
            || w.arith == 0
            || w.shared_access == 0
            || w.global_access == 0
            || w.barrier == 0
        {
            return Err(VmError::Machine("all machine parameters must be positive".into()));
        }
        Ok(())
    }

    pub fn waves(&self, blocks: usize) -> usize {
        blocks.div_ceil(self.num_sms)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub blocks: usize,
    pub waves: usize,
    pub per_block_cost: u64,
    pub total_cost: u64,
    pub races: usize,
}

impl CostReport {
    /// Sequential composition: kernels of a program run back to back.
    pub fn then(&self, next: &CostReport) -> CostReport {
        CostReport {
            blocks: self.blocks + next.blocks,
            waves: self.waves + next.waves,
            per_block_cost: self.per_block_cost.max(next.per_block_cost),
            total_cost: self.total_cost + next.total_cost,
            races: self.races + next.races,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExecutionResult {
    pub outputs: BTreeMap<String, Tensor>,
    pub cost: CostReport,
    pub races: Vec<RaceDiagnostic>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VmError {
    #[error("kernel `{kernel}`: index {indices:?} out of bounds for `{buffer}` {shape:?} (block {block}, thread {thread})")]
    OutOfBounds {
        kernel: String,
        buffer: String,
        indices: Vec<i64>,
        shape: Vec<usize>,
        block: usize,
        thread: usize,
    },
    #[error("kernel `{kernel}` block {block}: threads disagree on barrier count")]
    Deadlock { kernel: String, block: usize },
    #[error("kernel `{kernel}` uses {used} bytes of shared memory, limit {limit}")]
    SharedOverflow {
        kernel: String,
        used: usize,
        limit: usize,
    },
    #[error("kernel `{kernel}` launches {threads} threads per block, limit {limit}")]
    TooManyThreads {
        kernel: String,
        threads: usize,
        limit: usize,
    },
    #[error("kernel `{kernel}`: grid and block dimensions must be positive")]
    EmptyLaunch { kernel: String },
    #[error("kernel `{kernel}`: {error}")]
    Eval { kernel: String, error: EvalError },
    #[error("kernel `{kernel}`: worker {worker} outside mapping with {num_workers} workers")]
    Worker {
        kernel: String,
        worker: i64,
        num_workers: usize,
    },
    #[error("kernel `{kernel}`: {message}")]
    Compile { kernel: String, message: String },
    #[error("input: {0}")]
    Input(String),
    #[error("machine: {0}")]
    Machine(String),
}

/// Which blocks of each kernel to execute. Skipped blocks contribute
/// nothing; waves are still counted over the full grid.
pub type BlockFilter<'a> = &'a dyn Fn(usize, &Kernel) -> Option<Vec<usize>>;

fn check_tensor(b: &Buffer, t: &Tensor) -> Result<(), VmError> {
    if t.shape != b.shape || t.dtype() != b.dtype {
        return Err(VmError::Input(format!(
            "`{}` expects {} {:?}, got {} {:?}",
            b.name,
            b.dtype,
            b.shape,
            t.dtype(),
            t.shape
        )));
    }
    Ok(())
}

/// Runs a single kernel. Parameters missing from `inputs` start zeroed;
/// every parameter the kernel stores to is returned.
pub fn run(
    kernel: &Kernel,
    inputs: &BTreeMap<String, Tensor>,
    machine: &MachineSpec,
) -> Result<ExecutionResult, VmError> {
    let mut memory = BTreeMap::new();
    for b in &kernel.params {
        let t = match inputs.get(&b.name) {
            Some(t) => {
                check_tensor(b, t)?;
                t.clone()
            }
            None => Tensor::zeros(&b.shape, b.dtype),
        };
        memory.insert(b.name.clone(), t);
    }
    for name in inputs.keys() {
        if !memory.contains_key(name) {
            return Err(VmError::Input(format!("`{name}` is not a kernel parameter")));
        }
    }
    let compiled = compile(kernel)?;
    let (cost, races) = exec::execute(&compiled, &mut memory, machine, None)?;
    let written = kernel.written_globals();
    let outputs = memory
        .into_iter()
        .filter(|(k, _)| written.contains(k))
        .collect();
    Ok(ExecutionResult {
        outputs,
        cost,
        races,
    })
}

/// Cost of running `kernel` on `inputs`.
pub fn cost(
    kernel: &Kernel,
    machine: &MachineSpec,
    inputs: &BTreeMap<String, Tensor>,
) -> Result<CostReport, VmError> {
    Ok(run(kernel, inputs, machine)?.cost)
}

/// Runs every kernel of `program` in order over shared global memory.
pub fn run_program(
    program: &Program,
    inputs: &BTreeMap<String, Tensor>,
    machine: &MachineSpec,
) -> Result<ExecutionResult, VmError> {
    run_program_filtered(program, inputs, machine, None)
}

pub fn run_program_filtered(
    program: &Program,
    inputs: &BTreeMap<String, Tensor>,
    machine: &MachineSpec,
    filter: Option<BlockFilter>,
) -> Result<ExecutionResult, VmError> {
    let mut memory = BTreeMap::new();
    for b in &program.inputs {
        let t = inputs
            .get(&b.name)
            .ok_or_else(|| VmError::Input(format!("missing input `{}`", b.name)))?;
        check_tensor(b, t)?;
        memory.insert(b.name.clone(), t.clone());
    }
    for b in program.outputs.iter().chain(&program.temps) {
        memory
            .entry(b.name.clone())
            .or_insert_with(|| Tensor::zeros(&b.shape, b.dtype));
    }
    let mut total = CostReport::default();
    let mut races = Vec::new();
    for (i, k) in program.kernels.iter().enumerate() {
        let compiled = compile(k)?;
        let blocks = filter.and_then(|f| f(i, k));
        let (c, r) = exec::execute(&compiled, &mut memory, machine, blocks.as_deref())?;
        total = if i == 0 { c } else { total.then(&c) };
        races.extend(r);
    }
    let outputs = program
        .outputs
        .iter()
        .map(|b| (b.name.clone(), memory[&b.name].clone()))
        .collect();
    Ok(ExecutionResult {
        outputs,
        cost: total,
        races,
    })
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "blocks={} waves={} per_block_cost={} total_cost={} races={}",
            self.blocks, self.waves, self.per_block_cost, self.total_cost, self.races
        )
    }
}

#[cfg(test)]
mod tests;
