use std::collections::BTreeMap;

use rustc_hash::FxHashMap;

use crate::expr::eval::{float_arith, float_cmp, int_binary};
use crate::expr::{ConstTable, EvalError, UnaryOp};
use crate::program_ir::Scope;
use crate::tensor::{Tensor, TensorData};

use super::compile::{BufRef, Class, Compiled, Op, R};
use super::race::{Access, Cell, RaceDiagnostic, Shadow};
use super::{CostReport, MachineSpec, VmError};

struct MapState {
    tasks: Vec<i64>,
    pos: usize,
    dim: usize,
}

struct Machine<'a> {
    c: &'a Compiled,
    costs: Vec<u64>,
    gi: Vec<Vec<i32>>,
    gf: Vec<Vec<f32>>,
    si: Vec<Vec<i32>>,
    sf: Vec<Vec<f32>>,
    li: Vec<Vec<i32>>,
    lf: Vec<Vec<f32>>,
    /// Element count of each local buffer for one thread.
    lsize: Vec<usize>,
    ir: Vec<i64>,
    fr: Vec<f32>,
    maps: Vec<MapState>,
    /// Per buffer: whether accesses go through the shadow memory.
    track: Vec<bool>,
    shadow: Shadow,
    block: usize,
    stamp: u32,
}

fn op_cost(op: &Op, m: &MachineSpec, c: &Compiled) -> u64 {
    let w = &m.weights;
    let mem = |b: u32| match c.bufs[b as usize].scope {
        Scope::Global => w.global_access,
        Scope::Shared => w.shared_access,
        Scope::Local => w.arith,
    };
    match op {
        Op::IConst(..) | Op::FConst(..) | Op::Jmp(_) | Op::Halt => 0,
        Op::Ld(_, _, b, _) | Op::St(_, b, _, _) => mem(*b),
        Op::Barrier => w.barrier,
        _ => w.arith,
    }
}

#[inline(always)]
fn offset(shape: &[usize], pool: &[R], start: u32, ir: &[i64]) -> Option<usize> {
    let mut off = 0usize;
    for (d, &ext) in shape.iter().enumerate() {
        let i = ir[pool[start as usize + d] as usize];
        if i < 0 || i as usize >= ext {
            return None;
        }
        off = off * ext + i as usize;
    }
    Some(off)
}

fn out_of_bounds(c: &Compiled, b: u32, start: u32, ir: &[i64], block: usize, thread: usize) -> VmError {
    let buf = &c.bufs[b as usize];
    let indices = (0..buf.shape.len())
        .map(|d| ir[c.pool[start as usize + d] as usize])
        .collect();
    VmError::OutOfBounds {
        kernel: c.name.clone(),
        buffer: buf.name.clone(),
        indices,
        shape: buf.shape.clone(),
        block,
        thread,
    }
}

fn eval_error(c: &Compiled, error: EvalError) -> VmError {
    VmError::Eval {
        kernel: c.name.clone(),
        error,
    }
}

fn table_index(c: &Compiled, len: usize, i: i64) -> Result<usize, VmError> {
    if i < 0 || i as usize >= len {
        return Err(eval_error(c, EvalError::TableIndex { index: i, len }));
    }
    Ok(i as usize)
}

/// Executes `c` against global `memory`, updating it in place.
pub(crate) fn execute(
    c: &Compiled,
    memory: &mut BTreeMap<String, Tensor>,
    machine: &MachineSpec,
    blocks: Option<&[usize]>,
) -> Result<(CostReport, Vec<RaceDiagnostic>), VmError> {
    machine.validate()?;
    if c.grid_dim == 0 || c.block_dim == 0 {
        return Err(VmError::EmptyLaunch {
            kernel: c.name.clone(),
        });
    }
    if c.block_dim > machine.max_threads_per_block {
        return Err(VmError::TooManyThreads {
            kernel: c.name.clone(),
            threads: c.block_dim,
            limit: machine.max_threads_per_block,
        });
    }
    if c.shared_bytes > machine.shared_bytes_per_block {
        return Err(VmError::SharedOverflow {
            kernel: c.name.clone(),
            used: c.shared_bytes,
            limit: machine.shared_bytes_per_block,
        });
    }
    let globals: Vec<&BufRef> = c.bufs.iter().filter(|b| b.scope == Scope::Global).collect();
    let mut gi = Vec::new();
    let mut gf = Vec::new();
    for b in &globals {
        let t = memory
            .get_mut(&b.name)
            .ok_or_else(|| VmError::Input(format!("no global memory for `{}`", b.name)))?;
        if t.shape != b.shape || t.dtype() != b.dtype {
            return Err(VmError::Input(format!(
                "kernel `{}` declares `{}` as {} {:?}, memory holds {} {:?}",
                c.name,
                b.name,
                b.dtype,
                b.shape,
                t.dtype(),
                t.shape
            )));
        }
        match &mut t.data {
            TensorData::I32(v) => {
                gi.push(std::mem::take(v));
                gf.push(Vec::new());
            }
            TensorData::F32(v) => {
                gi.push(Vec::new());
                gf.push(std::mem::take(v));
            }
        }
    }
    let bd = c.block_dim;
    let mut m = Machine {
        c,
        costs: c.code.iter().map(|op| op_cost(op, machine, c)).collect(),
        gi,
        gf,
        si: Vec::new(),
        sf: Vec::new(),
        li: Vec::new(),
        lf: Vec::new(),
        lsize: Vec::new(),
        ir: vec![0; bd * c.iregs],
        fr: vec![0.0; bd * c.fregs],
        maps: (0..bd * c.map_slots)
            .map(|_| MapState {
                tasks: Vec::new(),
                pos: 0,
                dim: 0,
            })
            .collect(),
        track: c
            .bufs
            .iter()
            .map(|b| b.scope == Scope::Shared || (b.scope == Scope::Global && c.written.contains(&b.name)))
            .collect(),
        shadow: Shadow::default(),
        block: 0,
        stamp: 0,
    };
    for b in &c.bufs {
        let n = b.shape.iter().product::<usize>();
        let (ni, nf) = match b.dtype {
            crate::tensor::DType::I32 => (n, 0),
            crate::tensor::DType::F32 => (0, n),
        };
        match b.scope {
            Scope::Global => m.shadow.global.push(FxHashMap::default()),
            Scope::Shared => {
                m.si.push(vec![0; ni]);
                m.sf.push(vec![0.0; nf]);
                m.shadow.shared.push(vec![Cell::default(); n]);
            }
            Scope::Local => {
                m.li.push(vec![0; ni * bd]);
                m.lf.push(vec![0.0; nf * bd]);
                m.lsize.push(n);
            }
        }
    }
    let all: Vec<usize>;
    let blocks = match blocks {
        Some(b) => b,
        None => {
            all = (0..c.grid_dim).collect();
            &all
        }
    };
    let result = m.run_blocks(blocks);
    for (i, b) in globals.iter().enumerate() {
        let t = memory.get_mut(&b.name).expect("checked above");
        match &mut t.data {
            TensorData::I32(v) => *v = std::mem::take(&mut m.gi[i]),
            TensorData::F32(v) => *v = std::mem::take(&mut m.gf[i]),
        }
    }
    let per_block_cost = result?;
    let waves = machine.waves(c.grid_dim);
    let report = CostReport {
        blocks: c.grid_dim,
        waves,
        per_block_cost,
        total_cost: waves as u64 * per_block_cost,
        races: m.shadow.count,
    };
    Ok((report, m.shadow.races))
}

impl Machine<'_> {
    fn run_blocks(&mut self, blocks: &[usize]) -> Result<u64, VmError> {
        let c = self.c;
        let bd = c.block_dim;
        let mut max_cost = 0;
        let mut pcs = vec![0usize; bd];
        for &b in blocks {
            if b >= c.grid_dim {
                return Err(VmError::Input(format!(
                    "block {b} outside grid of {} in `{}`",
                    c.grid_dim, c.name
                )));
            }
            self.block = b;
            self.si.iter_mut().for_each(|v| v.fill(0));
            self.sf.iter_mut().for_each(|v| v.fill(0.0));
            self.li.iter_mut().for_each(|v| v.fill(0));
            self.lf.iter_mut().for_each(|v| v.fill(0.0));
            self.ir.fill(0);
            self.fr.fill(0.0);
            for t in 0..bd {
                self.ir[t * c.iregs] = t as i64;
                self.ir[t * c.iregs + 1] = b as i64;
            }
            pcs.fill(0);
            let mut block_cost = 0;
            loop {
                self.stamp += 1;
                let mut waiting = 0;
                for (t, pc) in pcs.iter_mut().enumerate() {
                    let (stop, cost) = self.run_thread(t, *pc)?;
                    block_cost += cost;
                    if let Some(next) = stop {
                        *pc = next;
                        waiting += 1;
                    }
                }
                if waiting == 0 {
                    break;
                }
                if waiting != bd {
                    return Err(VmError::Deadlock {
                        kernel: c.name.clone(),
                        block: b,
                    });
                }
            }
            max_cost = max_cost.max(block_cost);
        }
        Ok(max_cost)
    }

    /// Runs thread `t` from `pc` to the next barrier (returning the resume
    /// point) or to the end of the kernel.
    fn run_thread(&mut self, t: usize, mut pc: usize) -> Result<(Option<usize>, u64), VmError> {
        let c = self.c;
        let Machine {
            costs,
            gi,
            gf,
            si,
            sf,
            li,
            lf,
            lsize,
            ir,
            fr,
            maps,
            track,
            shadow,
            block,
            stamp,
            ..
        } = self;
        let code = &c.code[..];
        let pool = &c.pool[..];
        let ir = &mut ir[t * c.iregs..(t + 1) * c.iregs];
        let fr = &mut fr[t * c.fregs..(t + 1) * c.fregs];
        let access = Access {
            block: *block as u32,
            thread: t as u32,
            stamp: *stamp,
        };
        let block = *block;
        let mut cost = 0u64;
        macro_rules! off {
            ($b:expr, $s:expr) => {{
                let buf = &c.bufs[$b as usize];
                match offset(&buf.shape, pool, $s, ir) {
                    Some(o) => (buf, o),
                    None => return Err(out_of_bounds(c, $b, $s, ir, block, t)),
                }
            }};
        }
        macro_rules! observe {
            ($b:expr, $buf:expr, $o:expr, $write:expr) => {
                if track[$b as usize] {
                    let names = (c.name.as_str(), $buf.name.as_str());
                    match $buf.scope {
                        Scope::Shared => shadow.shared($buf.slot, $o, $write, &access, names),
                        _ => shadow.global($buf.slot, $o, $write, &access, names),
                    }
                }
            };
        }
        loop {
            let op = code[pc];
            cost += costs[pc];
            pc += 1;
            match op {
                Op::IConst(d, v) => ir[d as usize] = v,
                Op::FConst(d, v) => fr[d as usize] = v,
                Op::IAdd(d, a, b) => ir[d as usize] = ir[a as usize].wrapping_add(ir[b as usize]),
                Op::ISub(d, a, b) => ir[d as usize] = ir[a as usize].wrapping_sub(ir[b as usize]),
                Op::IMul(d, a, b) => ir[d as usize] = ir[a as usize].wrapping_mul(ir[b as usize]),
                Op::IBin(op, d, a, b) => {
                    ir[d as usize] =
                        int_binary(op, ir[a as usize], ir[b as usize]).map_err(|e| eval_error(c, e))?
                }
                Op::FAdd(d, a, b) => fr[d as usize] = fr[a as usize] + fr[b as usize],
                Op::FMul(d, a, b) => fr[d as usize] = fr[a as usize] * fr[b as usize],
                Op::FBin(op, d, a, b) => fr[d as usize] = float_arith(op, fr[a as usize], fr[b as usize]),
                Op::FCmp(op, d, a, b) => ir[d as usize] = float_cmp(op, fr[a as usize], fr[b as usize]),
                Op::IUn(op, d, a) => {
                    let x = ir[a as usize];
                    ir[d as usize] = match op {
                        UnaryOp::Neg => x.wrapping_neg(),
                        UnaryOp::Not => (x == 0) as i64,
                        UnaryOp::Relu => x.max(0),
                        UnaryOp::CastI32 => x as i32 as i64,
                        UnaryOp::CastF32 | UnaryOp::Exp | UnaryOp::Sqrt => unreachable!(),
                    }
                }
                Op::FUn(op, d, a) => {
                    let x = fr[a as usize];
                    fr[d as usize] = match op {
                        UnaryOp::Neg => -x,
                        UnaryOp::Relu => x.max(0.0),
                        UnaryOp::Exp => x.exp(),
                        UnaryOp::Sqrt => x.sqrt(),
                        UnaryOp::Not | UnaryOp::CastI32 | UnaryOp::CastF32 => unreachable!(),
                    }
                }
                Op::I2F(d, a) => fr[d as usize] = ir[a as usize] as f32,
                Op::F2I(d, a) => ir[d as usize] = fr[a as usize] as i32 as i64,
                Op::ISel(d, k, a, b) => {
                    ir[d as usize] = if ir[k as usize] != 0 { ir[a as usize] } else { ir[b as usize] }
                }
                Op::FSel(d, k, a, b) => {
                    fr[d as usize] = if ir[k as usize] != 0 { fr[a as usize] } else { fr[b as usize] }
                }
                Op::ITable(d, ti, i) => {
                    if let ConstTable::Int(v) = &c.tables[ti as usize] {
                        ir[d as usize] = v[table_index(c, v.len(), ir[i as usize])?];
                    }
                }
                Op::FTable(d, ti, i) => {
                    if let ConstTable::Float(v) = &c.tables[ti as usize] {
                        fr[d as usize] = v[table_index(c, v.len(), ir[i as usize])?].0;
                    }
                }
                Op::Ld(class, d, b, s) => {
                    let (buf, o) = off!(b, s);
                    observe!(b, buf, o, false);
                    match class {
                        Class::GlobalI => ir[d as usize] = gi[buf.slot][o] as i64,
                        Class::GlobalF => fr[d as usize] = gf[buf.slot][o],
                        Class::SharedI => ir[d as usize] = si[buf.slot][o] as i64,
                        Class::SharedF => fr[d as usize] = sf[buf.slot][o],
                        Class::LocalI => ir[d as usize] = li[buf.slot][t * lsize[buf.slot] + o] as i64,
                        Class::LocalF => fr[d as usize] = lf[buf.slot][t * lsize[buf.slot] + o],
                    }
                }
                Op::St(class, b, s, v) => {
                    let (buf, o) = off!(b, s);
                    observe!(b, buf, o, true);
                    match class {
                        Class::GlobalI => gi[buf.slot][o] = ir[v as usize] as i32,
                        Class::GlobalF => gf[buf.slot][o] = fr[v as usize],
                        Class::SharedI => si[buf.slot][o] = ir[v as usize] as i32,
                        Class::SharedF => sf[buf.slot][o] = fr[v as usize],
                        Class::LocalI => li[buf.slot][t * lsize[buf.slot] + o] = ir[v as usize] as i32,
                        Class::LocalF => lf[buf.slot][t * lsize[buf.slot] + o] = fr[v as usize],
                    }
                }
                Op::Jmp(to) => pc = to as usize,
                Op::Jz(k, to) => {
                    if ir[k as usize] == 0 {
                        pc = to as usize;
                    }
                }
                Op::LoopTest(v, e, exit) => {
                    if ir[v as usize] >= ir[e as usize] {
                        pc = exit as usize;
                    }
                }
                Op::LoopNext(v, top) => {
                    ir[v as usize] += 1;
                    pc = top as usize;
                }
                Op::MapBegin(slot, mi, w) => {
                    let mapping = &c.mappings[mi as usize];
                    let worker = ir[w as usize];
                    let n = mapping.num_workers();
                    if worker < 0 || worker as usize >= n {
                        return Err(VmError::Worker {
                            kernel: c.name.clone(),
                            worker,
                            num_workers: n,
                        });
                    }
                    let state = &mut maps[t * c.map_slots + slot as usize];
                    state.tasks.clear();
                    for task in mapping.assign(worker as usize).expect("worker in range") {
                        state.tasks.extend(task.iter().map(|&x| x as i64));
                    }
                    state.pos = 0;
                    state.dim = mapping.dim();
                }
                Op::MapNext(slot, vars, exit) => {
                    let state = &mut maps[t * c.map_slots + slot as usize];
                    if state.pos >= state.tasks.len() {
                        pc = exit as usize;
                    } else {
                        for k in 0..state.dim {
                            ir[pool[vars as usize + k] as usize] = state.tasks[state.pos + k];
                        }
                        state.pos += state.dim;
                    }
                }
                Op::Barrier => return Ok((Some(pc), cost)),
                Op::Halt => return Ok((None, cost)),
            }
        }
    }
}
