//! Translation of structured kernels into flat, typed register code.
//!
//! Pure expressions are value-numbered and placed at the head of the
//! innermost loop that binds one of their variables, so loop-invariant
//! index arithmetic runs once per iteration of the loop that needs it.
//! Loops flagged `unroll` with constant extents are expanded.

use std::collections::HashMap;

use crate::expr::{BinOp, ConstTable, Expr, Interval, Ranges, UnaryOp};
use crate::mapping::TaskMapping;
use crate::program_ir::{Kernel, Scope, Stmt, BLOCK_IDX, THREAD_IDX};
use crate::tensor::DType;

use super::VmError;

pub(crate) type R = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Ty {
    I,
    F,
}

/// Memory class of a buffer operand: scope and element type.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Class {
    GlobalI,
    GlobalF,
    SharedI,
    SharedF,
    LocalI,
    LocalF,
}

#[derive(Clone, Debug)]
pub(crate) struct BufRef {
    pub name: String,
    pub scope: Scope,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Index among buffers of the same scope.
    pub slot: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Op {
    IConst(R, i64),
    FConst(R, f32),
    IAdd(R, R, R),
    ISub(R, R, R),
    IMul(R, R, R),
    IBin(BinOp, R, R, R),
    FAdd(R, R, R),
    FMul(R, R, R),
    FBin(BinOp, R, R, R),
    /// Float comparison or logic into an integer register.
    FCmp(BinOp, R, R, R),
    IUn(UnaryOp, R, R),
    FUn(UnaryOp, R, R),
    I2F(R, R),
    F2I(R, R),
    ISel(R, R, R, R),
    FSel(R, R, R, R),
    ITable(R, u32, R),
    FTable(R, u32, R),
    /// `dst, buffer, first index register in the index pool`.
    Ld(Class, R, u32, u32),
    /// `buffer, first index register, source`.
    St(Class, u32, u32, R),
    Jmp(u32),
    Jz(R, u32),
    /// Exits to the target when `var >= extent`.
    LoopTest(R, R, u32),
    /// Increments `var` and jumps back.
    LoopNext(R, u32),
    /// `slot, mapping, worker register`.
    MapBegin(u32, u32, R),
    /// `slot, first task variable in the index pool, exit target`.
    MapNext(u32, u32, u32),
    Barrier,
    Halt,
}

#[derive(Clone, Debug)]
pub struct Compiled {
    pub(crate) name: String,
    pub(crate) grid_dim: usize,
    pub(crate) block_dim: usize,
    pub(crate) shared_bytes: usize,
    pub(crate) code: Vec<Op>,
    pub(crate) iregs: usize,
    pub(crate) fregs: usize,
    pub(crate) pool: Vec<R>,
    pub(crate) bufs: Vec<BufRef>,
    pub(crate) tables: Vec<ConstTable>,
    pub(crate) mappings: Vec<TaskMapping>,
    pub(crate) map_slots: usize,
    /// Global buffers stored to by the kernel.
    pub(crate) written: Vec<String>,
}

impl Compiled {
    pub fn len(&self) -> usize {
        self.code.len()
    }

    pub fn is_empty(&self) -> bool {
        self.code.len() <= 1
    }
}

enum Item {
    Op(Op),
    If(R, Vec<Item>, Vec<Item>),
    Loop {
        var: R,
        extent: R,
        head: Vec<Op>,
        body: Vec<Item>,
    },
    Map {
        slot: u32,
        mapping: u32,
        worker: R,
        vars: u32,
        head: Vec<Op>,
        body: Vec<Item>,
    },
}

#[derive(Default)]
struct Level {
    head: Vec<Op>,
    cse: HashMap<Expr, (R, Ty)>,
}

struct Compiler<'k> {
    kernel: &'k Kernel,
    iregs: R,
    fregs: R,
    pool: Vec<R>,
    bufs: Vec<BufRef>,
    buf_index: HashMap<String, u32>,
    tables: Vec<ConstTable>,
    mappings: Vec<TaskMapping>,
    map_depth: u32,
    map_slots: u32,
    levels: Vec<Level>,
    vars: HashMap<String, Vec<(R, usize)>>,
    ranges: Ranges,
    body: Vec<Vec<Item>>,
}

pub fn compile(kernel: &Kernel) -> Result<Compiled, VmError> {
    let mut c = Compiler {
        kernel,
        iregs: 2,
        fregs: 0,
        pool: Vec::new(),
        bufs: Vec::new(),
        buf_index: HashMap::new(),
        tables: Vec::new(),
        mappings: Vec::new(),
        map_depth: 0,
        map_slots: 0,
        levels: vec![Level::default()],
        vars: HashMap::new(),
        ranges: crate::program_ir::base_ranges(kernel),
        body: vec![Vec::new()],
    };
    let mut per_scope = [0usize; 3];
    for b in kernel.params.iter().chain(&kernel.shared).chain(&kernel.locals) {
        let s = match b.scope {
            Scope::Global => 0,
            Scope::Shared => 1,
            Scope::Local => 2,
        };
        if c.buf_index.contains_key(&b.name) {
            return Err(c.error(format!("buffer `{}` declared twice", b.name)));
        }
        c.buf_index.insert(b.name.clone(), c.bufs.len() as u32);
        c.bufs.push(BufRef {
            name: b.name.clone(),
            scope: b.scope,
            dtype: b.dtype,
            shape: b.shape.clone(),
            slot: per_scope[s],
        });
        per_scope[s] += 1;
    }
    c.vars.insert(THREAD_IDX.into(), vec![(0, 0)]);
    c.vars.insert(BLOCK_IDX.into(), vec![(1, 0)]);
    c.stmt(&kernel.body)?;
    let root = c.body.pop().expect("root body");
    let level = c.levels.pop().expect("root level");
    let mut code = level.head;
    flatten(root, &mut code);
    code.push(Op::Halt);
    Ok(Compiled {
        name: kernel.name.clone(),
        grid_dim: kernel.grid_dim,
        block_dim: kernel.block_dim,
        shared_bytes: kernel.shared_bytes(),
        code,
        iregs: c.iregs as usize,
        fregs: c.fregs as usize,
        pool: c.pool,
        bufs: c.bufs,
        tables: c.tables,
        mappings: c.mappings,
        map_slots: c.map_slots as usize,
        written: kernel.written_globals(),
    })
}

fn flatten(items: Vec<Item>, out: &mut Vec<Op>) {
    for item in items {
        match item {
            Item::Op(op) => out.push(op),
            Item::If(cond, then, otherwise) => {
                let jz = out.len();
                out.push(Op::Jz(cond, 0));
                flatten(then, out);
                if otherwise.is_empty() {
                    out[jz] = Op::Jz(cond, out.len() as u32);
                } else {
                    let jmp = out.len();
                    out.push(Op::Jmp(0));
                    out[jz] = Op::Jz(cond, out.len() as u32);
                    flatten(otherwise, out);
                    out[jmp] = Op::Jmp(out.len() as u32);
                }
            }
            Item::Loop {
                var,
                extent,
                head,
                body,
            } => {
                out.push(Op::IConst(var, 0));
                let top = out.len();
                out.push(Op::LoopTest(var, extent, 0));
                out.extend(head);
                flatten(body, out);
                out.push(Op::LoopNext(var, top as u32));
                out[top] = Op::LoopTest(var, extent, out.len() as u32);
            }
            Item::Map {
                slot,
                mapping,
                worker,
                vars,
                head,
                body,
            } => {
                out.push(Op::MapBegin(slot, mapping, worker));
                let top = out.len();
                out.push(Op::MapNext(slot, vars, 0));
                out.extend(head);
                flatten(body, out);
                out.push(Op::Jmp(top as u32));
                out[top] = Op::MapNext(slot, vars, out.len() as u32);
            }
        }
    }
}

/// Whether `e` can be evaluated ahead of the guards around it: no memory
/// reads, no table lookups and no divisions by a non-constant.
fn speculatable(e: &Expr) -> bool {
    let mut ok = true;
    e.visit(&mut |n| match n {
        Expr::Load(..) | Expr::Table(..) => ok = false,
        Expr::Binary(BinOp::Div | BinOp::Mod, _, d)
            if !matches!(**d, Expr::Int(v) if v != 0) && !matches!(**d, Expr::Float(_)) => {
                ok = false;
            }
        _ => {}
    });
    ok
}

impl Compiler<'_> {
    fn error(&self, message: String) -> VmError {
        VmError::Compile {
            kernel: self.kernel.name.clone(),
            message,
        }
    }

    fn ireg(&mut self) -> R {
        self.iregs += 1;
        self.iregs - 1
    }

    fn freg(&mut self) -> R {
        self.fregs += 1;
        self.fregs - 1
    }

    fn reg(&mut self, ty: Ty) -> R {
        match ty {
            Ty::I => self.ireg(),
            Ty::F => self.freg(),
        }
    }

    fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    fn var(&self, name: &str) -> Result<(R, usize), VmError> {
        self.vars
            .get(name)
            .and_then(|s| s.last().copied())
            .ok_or_else(|| self.error(format!("variable `{name}` is not bound")))
    }

    fn bind(&mut self, name: &str, reg: R) {
        let level = self.depth();
        self.vars.entry(name.to_string()).or_default().push((reg, level));
    }

    fn unbind(&mut self, name: &str) {
        if let Some(s) = self.vars.get_mut(name) {
            s.pop();
        }
    }

    /// Innermost loop level whose variables `e` depends on.
    fn level_of(&self, e: &Expr) -> Result<usize, VmError> {
        let mut level = 0;
        for v in e.free_vars() {
            level = level.max(self.var(&v)?.1);
        }
        Ok(level)
    }

    fn emit(&mut self, sink: Option<usize>, op: Op) {
        match sink {
            Some(l) => self.levels[l].head.push(op),
            None => self.body.last_mut().expect("body").push(Item::Op(op)),
        }
    }

    fn buffer(&self, name: &str) -> Result<(u32, &BufRef), VmError> {
        let i = *self
            .buf_index
            .get(name)
            .ok_or_else(|| self.error(format!("undeclared buffer `{name}`")))?;
        Ok((i, &self.bufs[i as usize]))
    }

    fn class(b: &BufRef) -> Class {
        match (b.scope, b.dtype) {
            (Scope::Global, DType::I32) => Class::GlobalI,
            (Scope::Global, DType::F32) => Class::GlobalF,
            (Scope::Shared, DType::I32) => Class::SharedI,
            (Scope::Shared, DType::F32) => Class::SharedF,
            (Scope::Local, DType::I32) => Class::LocalI,
            (Scope::Local, DType::F32) => Class::LocalF,
        }
    }

    fn to_float(&mut self, sink: Option<usize>, (r, ty): (R, Ty)) -> R {
        match ty {
            Ty::F => r,
            Ty::I => {
                let d = self.freg();
                self.emit(sink, Op::I2F(d, r));
                d
            }
        }
    }

    fn to_int(&mut self, sink: Option<usize>, (r, ty): (R, Ty)) -> R {
        match ty {
            Ty::I => r,
            Ty::F => {
                let d = self.ireg();
                self.emit(sink, Op::F2I(d, r));
                d
            }
        }
    }

    fn truthy(&mut self, sink: Option<usize>, (r, ty): (R, Ty)) -> R {
        match ty {
            Ty::I => r,
            Ty::F => {
                let zero = self.expr(&Expr::float(0.0)).expect("constant").0;
                let d = self.ireg();
                self.emit(sink, Op::FCmp(BinOp::Ne, d, r, zero));
                d
            }
        }
    }

    fn indices(&mut self, sink: Option<usize>, idx: &[Expr]) -> Result<u32, VmError> {
        let mut regs = Vec::with_capacity(idx.len());
        for i in idx {
            let v = self.expr(i)?;
            regs.push(self.to_int(sink, v));
        }
        let start = self.pool.len() as u32;
        self.pool.extend(regs);
        Ok(start)
    }

    fn expr(&mut self, e: &Expr) -> Result<(R, Ty), VmError> {
        if let Expr::Var(v) = e {
            return Ok((self.var(v)?.0, Ty::I));
        }
        let sink = if speculatable(e) {
            let level = self.level_of(e)?;
            if let Some(hit) = self.levels[level].cse.get(e) {
                return Ok(*hit);
            }
            Some(level)
        } else {
            None
        };
        let out = self.node(e, sink)?;
        if let Some(l) = sink {
            self.levels[l].cse.insert(e.clone(), out);
        }
        Ok(out)
    }

    fn node(&mut self, e: &Expr, sink: Option<usize>) -> Result<(R, Ty), VmError> {
        Ok(match e {
            Expr::Int(v) => {
                let d = self.ireg();
                self.emit(sink, Op::IConst(d, *v));
                (d, Ty::I)
            }
            Expr::Float(v) => {
                let d = self.freg();
                self.emit(sink, Op::FConst(d, v.0));
                (d, Ty::F)
            }
            Expr::Var(_) => unreachable!("handled by expr"),
            Expr::Binary(op, a, b) => {
                let x = self.expr(a)?;
                let y = self.expr(b)?;
                if matches!(op, BinOp::And | BinOp::Or) {
                    let (x, y) = (self.truthy(sink, x), self.truthy(sink, y));
                    let d = self.ireg();
                    self.emit(sink, Op::IBin(*op, d, x, y));
                    (d, Ty::I)
                } else if x.1 == Ty::I && y.1 == Ty::I {
                    let d = self.ireg();
                    let op = match op {
                        BinOp::Add => Op::IAdd(d, x.0, y.0),
                        BinOp::Sub => Op::ISub(d, x.0, y.0),
                        BinOp::Mul => Op::IMul(d, x.0, y.0),
                        _ => Op::IBin(*op, d, x.0, y.0),
                    };
                    self.emit(sink, op);
                    (d, Ty::I)
                } else {
                    let (x, y) = (self.to_float(sink, x), self.to_float(sink, y));
                    if op.is_comparison() {
                        let d = self.ireg();
                        self.emit(sink, Op::FCmp(*op, d, x, y));
                        (d, Ty::I)
                    } else {
                        let d = self.freg();
                        let op = match op {
                            BinOp::Add => Op::FAdd(d, x, y),
                            BinOp::Mul => Op::FMul(d, x, y),
                            _ => Op::FBin(*op, d, x, y),
                        };
                        self.emit(sink, op);
                        (d, Ty::F)
                    }
                }
            }
            Expr::Unary(op, a) => {
                let x = self.expr(a)?;
                match (op, x.1) {
                    (UnaryOp::CastF32, _) => (self.to_float(sink, x), Ty::F),
                    (UnaryOp::CastI32, Ty::F) => (self.to_int(sink, x), Ty::I),
                    (UnaryOp::Not, Ty::F) => {
                        let zero = self.expr(&Expr::float(0.0))?.0;
                        let d = self.ireg();
                        self.emit(sink, Op::FCmp(BinOp::Eq, d, x.0, zero));
                        (d, Ty::I)
                    }
                    (UnaryOp::Exp | UnaryOp::Sqrt, _) => {
                        let s = self.to_float(sink, x);
                        let d = self.freg();
                        self.emit(sink, Op::FUn(*op, d, s));
                        (d, Ty::F)
                    }
                    (_, Ty::I) => {
                        let d = self.ireg();
                        self.emit(sink, Op::IUn(*op, d, x.0));
                        (d, Ty::I)
                    }
                    (_, Ty::F) => {
                        let d = self.freg();
                        self.emit(sink, Op::FUn(*op, d, x.0));
                        (d, Ty::F)
                    }
                }
            }
            Expr::Select(c, a, b) => {
                let c = self.expr(c)?;
                let c = self.truthy(sink, c);
                let x = self.expr(a)?;
                let y = self.expr(b)?;
                if x.1 == Ty::I && y.1 == Ty::I {
                    let d = self.ireg();
                    self.emit(sink, Op::ISel(d, c, x.0, y.0));
                    (d, Ty::I)
                } else {
                    let (x, y) = (self.to_float(sink, x), self.to_float(sink, y));
                    let d = self.freg();
                    self.emit(sink, Op::FSel(d, c, x, y));
                    (d, Ty::F)
                }
            }
            Expr::Table(t, i) => {
                let i = self.expr(i)?;
                let i = self.to_int(sink, i);
                let ti = self.tables.len() as u32;
                self.tables.push(t.clone());
                match t {
                    ConstTable::Int(_) => {
                        let d = self.ireg();
                        self.emit(sink, Op::ITable(d, ti, i));
                        (d, Ty::I)
                    }
                    ConstTable::Float(_) => {
                        let d = self.freg();
                        self.emit(sink, Op::FTable(d, ti, i));
                        (d, Ty::F)
                    }
                }
            }
            Expr::Load(name, idx) => {
                let (bi, buf) = self.buffer(name)?;
                if buf.shape.len() != idx.len() {
                    return Err(self.error(format!(
                        "`{name}` indexed with {} indices, expected {}",
                        idx.len(),
                        buf.shape.len()
                    )));
                }
                let class = Self::class(buf);
                let ty = match buf.dtype {
                    DType::I32 => Ty::I,
                    DType::F32 => Ty::F,
                };
                let start = self.indices(sink, idx)?;
                let d = self.reg(ty);
                self.emit(sink, Op::Ld(class, d, bi, start));
                (d, ty)
            }
        })
    }

    fn nested(&mut self, s: &Stmt) -> Result<Vec<Item>, VmError> {
        self.body.push(Vec::new());
        self.stmt(s)?;
        Ok(self.body.pop().expect("body"))
    }

    fn stmt(&mut self, s: &Stmt) -> Result<(), VmError> {
        match s {
            Stmt::Block { stmts } => {
                for s in stmts {
                    self.stmt(s)?;
                }
            }
            Stmt::Barrier => self.emit(None, Op::Barrier),
            Stmt::Eval { value } => {
                self.expr(value)?;
            }
            Stmt::Store {
                buffer,
                indices,
                value,
            } => {
                let (bi, buf) = self.buffer(buffer)?;
                if buf.shape.len() != indices.len() {
                    return Err(self.error(format!(
                        "`{buffer}` indexed with {} indices, expected {}",
                        indices.len(),
                        buf.shape.len()
                    )));
                }
                let class = Self::class(buf);
                let dtype = buf.dtype;
                let start = self.indices(None, indices)?;
                let v = self.expr(value)?;
                let v = match dtype {
                    DType::I32 => self.to_int(None, v),
                    DType::F32 => self.to_float(None, v),
                };
                self.emit(None, Op::St(class, bi, start, v));
            }
            Stmt::If {
                cond,
                then,
                otherwise,
            } => {
                let c = self.expr(cond)?;
                let c = self.truthy(None, c);
                let then = self.nested(then)?;
                let otherwise = match otherwise {
                    Some(o) => self.nested(o)?,
                    None => Vec::new(),
                };
                self.body
                    .last_mut()
                    .expect("body")
                    .push(Item::If(c, then, otherwise));
            }
            Stmt::SeqFor {
                var,
                extent,
                unroll,
                body,
            } => {
                if let (true, Some(n)) = (*unroll, extent.as_int()) {
                    for v in 0..n.max(0) {
                        let inst = body.map_exprs(&mut |e| e.substitute_var(var, &Expr::int(v)));
                        let inst = crate::program_ir::simplify_stmt(
                            &inst,
                            &mut self.ranges,
                        );
                        self.stmt(&inst)?;
                    }
                    return Ok(());
                }
                let ext = self.expr(extent)?;
                let ext = self.to_int(None, ext);
                let r = crate::expr::interval(extent, &self.ranges);
                let range = if r.is_bounded() {
                    Interval::new(0, (r.hi - 1).max(0))
                } else {
                    Interval::FULL
                };
                let v = self.ireg();
                self.levels.push(Level::default());
                self.bind(var, v);
                let saved = self.ranges.insert(var.clone(), range);
                let body = self.nested(body)?;
                match saved {
                    Some(o) => self.ranges.insert(var.clone(), o),
                    None => self.ranges.remove(var),
                };
                self.unbind(var);
                let level = self.levels.pop().expect("level");
                self.body.last_mut().expect("body").push(Item::Loop {
                    var: v,
                    extent: ext,
                    head: level.head,
                    body,
                });
            }
            Stmt::MapLoop {
                mapping,
                worker,
                vars,
                body,
            } => {
                if vars.len() != mapping.dim() {
                    return Err(self.error(format!(
                        "map over `{mapping}` binds {} variables",
                        vars.len()
                    )));
                }
                let w = self.expr(worker)?;
                let w = self.to_int(None, w);
                let mi = self.mappings.len() as u32;
                self.mappings.push(mapping.clone());
                let slot = self.map_depth;
                self.map_depth += 1;
                self.map_slots = self.map_slots.max(self.map_depth);
                self.levels.push(Level::default());
                let start = self.pool.len() as u32;
                let mut saved = Vec::new();
                for (name, d) in vars.iter().zip(mapping.task_shape().dims()) {
                    let r = self.ireg();
                    self.pool.push(r);
                    self.bind(name, r);
                    saved.push((name.clone(), self.ranges.insert(name.clone(), Interval::extent(*d))));
                }
                let body = self.nested(body)?;
                for (name, old) in saved.into_iter().rev() {
                    match old {
                        Some(o) => self.ranges.insert(name.clone(), o),
                        None => self.ranges.remove(&name),
                    };
                    self.unbind(&name);
                }
                let level = self.levels.pop().expect("level");
                self.map_depth -= 1;
                self.body.last_mut().expect("body").push(Item::Map {
                    slot,
                    mapping: mi,
                    worker: w,
                    vars: start,
                    head: level.head,
                    body,
                });
            }
        }
        Ok(())
    }
}
