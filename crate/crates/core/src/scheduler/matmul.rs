//! Tiled matrix multiplication template.
//!
//! Each block owns a `block_m x block_n` tile of the output (and one slice
//! of K when split). Tiles of A and B are loaded cooperatively into shared
//! memory, out-of-range elements are zero-filled, and every thread
//! accumulates its sub-tile in a local array before the guarded write-back.

use crate::compute_ir::{Combiner, ComputeDag, NodeBody};
use crate::expr::{BinOp, Expr};
use crate::mapping::TaskMapping;
use crate::program_ir::{fresh_name, Buffer, Kernel, Program, Scope, Stmt, BLOCK_IDX, THREAD_IDX};
use crate::tensor::DType;

use super::rule_based::as_dtype;
use super::{MatmulConfig, ScheduleError, SHARED_LIMIT};

/// `c[m, n] = sum_k a[m, k] * b[k, n]` over global buffers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatmulSpec {
    pub a: String,
    pub b: String,
    pub c: String,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub a_dtype: DType,
    pub b_dtype: DType,
    pub dtype: DType,
}

impl MatmulSpec {
    pub fn new(m: usize, n: usize, k: usize, dtype: DType) -> Self {
        MatmulSpec {
            a: "A".into(),
            b: "B".into(),
            c: "C".into(),
            m,
            n,
            k,
            a_dtype: dtype,
            b_dtype: dtype,
            dtype,
        }
    }

    /// Recognizes `node[i, j] = sum_k a[i, k] * b[k, j]`.
    pub fn from_node(dag: &ComputeDag, node: &str) -> Option<MatmulSpec> {
        let n = dag.node(node)?;
        let NodeBody::Reduce {
            axes,
            reduce_axes,
            combiner: Combiner::Sum,
            value,
        } = &n.body
        else {
            return None;
        };
        let ([ai, aj], [rk]) = (&axes[..], &reduce_axes[..]) else {
            return None;
        };
        let Expr::Binary(BinOp::Mul, l, r) = value else {
            return None;
        };
        let (Expr::Load(a, ia), Expr::Load(b, ib)) = (&**l, &**r) else {
            return None;
        };
        let var = |e: &Expr, name: &str| matches!(e, Expr::Var(v) if v == name);
        let shapes_ok = ia.len() == 2
            && ib.len() == 2
            && var(&ia[0], &ai.name)
            && var(&ia[1], &rk.name)
            && var(&ib[0], &rk.name)
            && var(&ib[1], &aj.name);
        if !shapes_ok || a == b {
            return None;
        }
        Some(MatmulSpec {
            a: a.clone(),
            b: b.clone(),
            c: n.name.clone(),
            m: ai.extent,
            n: aj.extent,
            k: rk.extent,
            a_dtype: dag.dtype_of(a)?,
            b_dtype: dag.dtype_of(b)?,
            dtype: n.dtype,
        })
    }

    pub fn a_buffer(&self) -> Buffer {
        Buffer::new(&self.a, Scope::Global, &[self.m, self.k], self.a_dtype)
    }

    pub fn b_buffer(&self) -> Buffer {
        Buffer::new(&self.b, Scope::Global, &[self.k, self.n], self.b_dtype)
    }

    pub fn c_buffer(&self) -> Buffer {
        Buffer::new(&self.c, Scope::Global, &[self.m, self.n], self.dtype)
    }
}

fn zero(dtype: DType) -> Expr {
    match dtype {
        DType::I32 => Expr::Int(0),
        DType::F32 => Expr::float(0.0),
    }
}

fn v(name: &str) -> Expr {
    Expr::var(name)
}

struct Ctx<'a> {
    spec: &'a MatmulSpec,
    cfg: &'a MatmulConfig,
    load_a: TaskMapping,
    load_b: TaskMapping,
    compute: TaskMapping,
    row0: Expr,
    col0: Expr,
    /// Per-slice K tile count.
    tiles_per_split: usize,
    names: Scratch,
}

/// Shared and local buffer names, chosen not to collide with the globals.
struct Scratch {
    sa: String,
    sb: String,
    ra: String,
    rb: String,
    acc: String,
}

impl Scratch {
    fn new(spec: &MatmulSpec) -> Self {
        let partial = partial_name(spec);
        let globals = [spec.a.as_str(), spec.b.as_str(), spec.c.as_str(), partial.as_str()];
        let mut taken: Vec<String> = Vec::new();
        let mut pick = |base: &str| {
            let all: Vec<&str> = globals.iter().copied().chain(taken.iter().map(String::as_str)).collect();
            let n = fresh_name(base, &all);
            taken.push(n.clone());
            n
        };
        Scratch {
            sa: pick("SA"),
            sb: pick("SB"),
            ra: pick("RA"),
            rb: pick("RB"),
            acc: pick("acc"),
        }
    }
}

impl Ctx<'_> {
    fn kbase(&self, kt: Expr) -> Expr {
        let bk = self.cfg.block_k as i64;
        if self.cfg.split_k == 1 {
            kt * bk
        } else {
            (v("ks") * self.tiles_per_split as i64 + kt) * bk
        }
    }

    fn a_elem(&self, kt: &Expr) -> (Expr, Expr) {
        let row = self.row0.clone() + v("i");
        let col = self.kbase(kt.clone()) + v("k");
        let guard = row.clone().lt(self.spec.m).and(col.clone().lt(self.spec.k));
        (guard, Expr::load(&self.spec.a, vec![row, col]))
    }

    fn b_elem(&self, kt: &Expr) -> (Expr, Expr) {
        let row = self.kbase(kt.clone()) + v("k");
        let col = self.col0.clone() + v("j");
        let guard = row.clone().lt(self.spec.k).and(col.clone().lt(self.spec.n));
        (guard, Expr::load(&self.spec.b, vec![row, col]))
    }

    /// Stage index of a cooperatively loaded element inside a thread's
    /// local staging array.
    fn stage_index(&self, r: &str, c: &str, cols: usize) -> Expr {
        let t = self.cfg.threads_per_block;
        let tc = cols.min(t);
        let tr = t / tc;
        v(r) / tr as i64 * (cols / tc) as i64 + v(c) / tc as i64
    }

    fn tile_loads(&self, kt: &Expr, dst: impl Fn(&str, Vec<Expr>) -> (String, Vec<Expr>)) -> Stmt {
        let (ga, ea) = self.a_elem(kt);
        let (gb, eb) = self.b_elem(kt);
        let (ba, ia) = dst("A", vec![v("i"), v("k")]);
        let (bb, ib) = dst("B", vec![v("k"), v("j")]);
        let s = self.spec;
        Stmt::block(vec![
            Stmt::map_loop(
                self.load_a.clone(),
                v(THREAD_IDX),
                &["i", "k"],
                Stmt::if_else(
                    ga,
                    Stmt::store(&ba, ia.clone(), ea),
                    Stmt::store(&ba, ia, zero(s.a_dtype)),
                ),
            ),
            Stmt::map_loop(
                self.load_b.clone(),
                v(THREAD_IDX),
                &["k", "j"],
                Stmt::if_else(
                    gb,
                    Stmt::store(&bb, ib.clone(), eb),
                    Stmt::store(&bb, ib, zero(s.b_dtype)),
                ),
            ),
        ])
    }

    fn shared_name(&self, which: &str) -> String {
        if which == "A" { self.names.sa.clone() } else { self.names.sb.clone() }
    }

    fn acc_index(&self) -> Vec<Expr> {
        let (rm, tm, rn, tn) = self.cfg.thread_tile();
        let (rm, tm, rn, tn) = (rm as i64, tm as i64, rn as i64, tn as i64);
        vec![
            v("i") / (4 * tm) % rm * tm + v("i") % tm,
            v("j") / (8 * tn) % rn * tn + v("j") % tn,
        ]
    }

    fn acc_shape(&self) -> [usize; 2] {
        let (rm, tm, rn, tn) = self.cfg.thread_tile();
        [rm * tm, rn * tn]
    }

    /// `acc += SA * SB` over one K tile held in shared stage `stage`.
    fn compute(&self, stage: Option<Expr>) -> Stmt {
        let with_stage = |mut idx: Vec<Expr>| {
            if let Some(s) = &stage {
                idx.insert(0, s.clone());
            }
            idx
        };
        let acc = self.acc_index();
        let n = &self.names;
        let prod = Expr::load(&n.sa, with_stage(vec![v("i"), v("kk")]))
            * Expr::load(&n.sb, with_stage(vec![v("kk"), v("j")]));
        let s = self.spec;
        let prod = as_dtype(prod, s.dtype, &|t| {
            if t == n.sa {
                Some(s.a_dtype)
            } else if t == n.sb {
                Some(s.b_dtype)
            } else {
                None
            }
        });
        let value = Expr::load(&n.acc, acc.clone()) + prod;
        Stmt::seq_for(
            "kk",
            self.cfg.block_k,
            Stmt::map_loop(
                self.compute.clone(),
                v(THREAD_IDX),
                &["i", "j"],
                Stmt::store(&n.acc, acc, value),
            ),
        )
    }

    fn zero_acc(&self) -> Stmt {
        Stmt::map_loop(
            self.compute.clone(),
            v(THREAD_IDX),
            &["i", "j"],
            Stmt::store(&self.names.acc, self.acc_index(), zero(self.spec.dtype)),
        )
    }

    fn write_back(&self) -> Stmt {
        let row = self.row0.clone() + v("i");
        let col = self.col0.clone() + v("j");
        let guard = row.clone().lt(self.spec.m).and(col.clone().lt(self.spec.n));
        let (buf, idx) = if self.cfg.split_k == 1 {
            (self.spec.c.clone(), vec![row, col])
        } else {
            (partial_name(self.spec), vec![v("ks"), row, col])
        };
        Stmt::map_loop(
            self.compute.clone(),
            v(THREAD_IDX),
            &["i", "j"],
            Stmt::if_then(guard, Stmt::store(buf, idx, Expr::load(&self.names.acc, self.acc_index()))),
        )
    }

    fn plain_loop(&self) -> Stmt {
        let kt = v("kt");
        let loads = self.tile_loads(&kt, |which, idx| (self.shared_name(which), idx));
        Stmt::seq_for(
            "kt",
            self.tiles_per_split,
            Stmt::block(vec![loads, Stmt::Barrier, self.compute(None), Stmt::Barrier]),
        )
    }

    /// Prologue fills stage 0; the steady state prefetches tile `kt + 1`
    /// into registers, computes tile `kt`, then commits the prefetch to the
    /// other stage. The last tile is computed after the loop.
    fn pipelined_loop(&self) -> Stmt {
        let cfg = self.cfg;
        let prologue = self.tile_loads(&Expr::Int(0), |which, mut idx| {
            idx.insert(0, Expr::Int(0));
            (self.shared_name(which), idx)
        });
        let next = v("kt") + 1i64;
        let prefetch = self.tile_loads(&next, |which, _| {
            let idx = if which == "A" {
                self.stage_index("i", "k", cfg.block_k)
            } else {
                self.stage_index("k", "j", cfg.block_n)
            };
            let staging = if which == "A" { &self.names.ra } else { &self.names.rb };
            (staging.clone(), vec![idx])
        });
        let stage_next = (v("kt") + 1i64) % 2i64;
        let commit = Stmt::block(vec![
            Stmt::map_loop(
                self.load_a.clone(),
                v(THREAD_IDX),
                &["i", "k"],
                Stmt::store(
                    &self.names.sa,
                    vec![stage_next.clone(), v("i"), v("k")],
                    Expr::load(&self.names.ra, vec![self.stage_index("i", "k", cfg.block_k)]),
                ),
            ),
            Stmt::map_loop(
                self.load_b.clone(),
                v(THREAD_IDX),
                &["k", "j"],
                Stmt::store(
                    &self.names.sb,
                    vec![stage_next, v("k"), v("j")],
                    Expr::load(&self.names.rb, vec![self.stage_index("k", "j", cfg.block_n)]),
                ),
            ),
        ]);
        let steady = Stmt::seq_for(
            "kt",
            self.tiles_per_split - 1,
            Stmt::block(vec![
                prefetch,
                self.compute(Some(v("kt") % 2i64)),
                commit,
                Stmt::Barrier,
            ]),
        );
        let last = Expr::Int(((self.tiles_per_split - 1) % 2) as i64);
        Stmt::block(vec![prologue, Stmt::Barrier, steady, self.compute(Some(last))])
    }
}

pub(crate) fn partial_name(spec: &MatmulSpec) -> String {
    format!("{}_partial", spec.c)
}

/// Builds the (un-lowered) program for `spec` under `cfg`. Global loads of
/// `spec.a` and `spec.b` and stores to `spec.c` are the only accesses to
/// those buffers, which is what prologue and epilogue fusion rewrite.
pub fn matmul_template(spec: &MatmulSpec, cfg: &MatmulConfig) -> Result<Program, ScheduleError> {
    cfg.validate(SHARED_LIMIT)?;
    if spec.m == 0 || spec.n == 0 || spec.k == 0 {
        return Err(ScheduleError::Unsupported(format!(
            "matmul with empty extent {}x{}x{}",
            spec.m, spec.n, spec.k
        )));
    }
    let (bm, bn, bk) = (cfg.block_m, cfg.block_n, cfg.block_k);
    let mt = spec.m.div_ceil(bm);
    let nt = spec.n.div_ceil(bn);
    let tiles = spec.k.div_ceil(bk);
    let split = cfg.split_k;
    let tiles_per_split = tiles.div_ceil(split);
    let ctx = Ctx {
        spec,
        cfg,
        load_a: cfg.load_mapping(bm, bk)?,
        load_b: cfg.load_mapping(bk, bn)?,
        compute: cfg.compute_mapping()?,
        row0: v("bi") * bm as i64,
        col0: v("bj") * bn as i64,
        tiles_per_split,
        names: Scratch::new(spec),
    };
    let names = &ctx.names;

    let main = if cfg.pipeline {
        ctx.pipelined_loop()
    } else {
        ctx.plain_loop()
    };
    let tile_body = Stmt::block(vec![ctx.zero_acc(), main, ctx.write_back()]);
    let (blocks, vars): (TaskMapping, &[&str]) = if split == 1 {
        (TaskMapping::spatial(&[mt, nt])?, &["bi", "bj"])
    } else {
        (TaskMapping::spatial(&[split, mt, nt])?, &["ks", "bi", "bj"])
    };
    let body = Stmt::map_loop(blocks, v(BLOCK_IDX), vars, tile_body);

    let stages: &[usize] = if cfg.pipeline { &[2] } else { &[] };
    let shared = vec![
        Buffer::new(&names.sa, Scope::Shared, &[stages, &[bm, bk]].concat(), spec.a_dtype),
        Buffer::new(&names.sb, Scope::Shared, &[stages, &[bk, bn]].concat(), spec.b_dtype),
    ];
    let mut locals = vec![Buffer::new(&names.acc, Scope::Local, &ctx.acc_shape(), spec.dtype)];
    if cfg.pipeline {
        let t = cfg.threads_per_block;
        locals.push(Buffer::new(&names.ra, Scope::Local, &[bm * bk / t], spec.a_dtype));
        locals.push(Buffer::new(&names.rb, Scope::Local, &[bk * bn / t], spec.b_dtype));
    }
    let out = if split == 1 {
        spec.c_buffer()
    } else {
        Buffer::new(partial_name(spec), Scope::Global, &[split, spec.m, spec.n], spec.dtype)
    };
    let main_kernel = Kernel {
        name: format!("{}_matmul", spec.c),
        grid_dim: split * mt * nt,
        block_dim: cfg.threads_per_block,
        params: vec![spec.a_buffer(), spec.b_buffer(), out.clone()],
        shared,
        locals,
        body,
    };
    let mut program = Program::single(
        main_kernel,
        vec![spec.a_buffer(), spec.b_buffer()],
        vec![spec.c_buffer()],
    );
    if split > 1 {
        program.kernels.push(splitk_reduce(spec, split));
        program.temps.push(out);
    }
    Ok(program)
}

const REDUCE_BLOCK: usize = 128;
const MAX_GRID: usize = 4096;

/// `c[e] = sum_s partial[s, e]` in slice order, one element per thread.
fn splitk_reduce(spec: &MatmulSpec, split: usize) -> Kernel {
    let partial = partial_name(spec);
    let total = spec.m * spec.n;
    let e = v("e");
    // `% m` keeps the row provably in bounds once the guard is simplified away
    let (row, col) = (
        e.clone() / spec.n as i64 % spec.m as i64,
        e.clone() % spec.n as i64,
    );
    let mut sum = Expr::load(&partial, vec![Expr::Int(0), row.clone(), col.clone()]);
    for s in 1..split {
        sum = sum + Expr::load(&partial, vec![Expr::Int(s as i64), row.clone(), col.clone()]);
    }
    let (grid, body) = grid_stride(total, "e", Stmt::store(&spec.c, vec![row, col], sum));
    Kernel {
        name: format!("{}_splitk_reduce", spec.c),
        grid_dim: grid,
        block_dim: REDUCE_BLOCK,
        params: vec![
            Buffer::new(partial, Scope::Global, &[split, spec.m, spec.n], spec.dtype),
            spec.c_buffer(),
        ],
        shared: vec![],
        locals: vec![],
        body,
    }
}

/// Distributes `total` elements over a 128-thread grid, striding when
/// the element count exceeds the grid. Returns the grid size and a body
/// binding `var` under an `var < total` guard.
pub(crate) fn grid_stride(total: usize, var: &str, body: Stmt) -> (usize, Stmt) {
    let grid = total.div_ceil(REDUCE_BLOCK).clamp(1, MAX_GRID);
    let workers = grid * REDUCE_BLOCK;
    let iters = total.div_ceil(workers);
    let mapping = if iters == 1 {
        TaskMapping::spatial(&[workers])
    } else {
        TaskMapping::repeat(&[iters]).and_then(|r| r.compose(&TaskMapping::spatial(&[workers])?))
    }
    .expect("positive extents");
    let worker = v(BLOCK_IDX) * REDUCE_BLOCK as i64 + v(THREAD_IDX);
    let guarded = if iters * workers == total {
        body
    } else {
        Stmt::if_then(v(var).lt(total), body)
    };
    (grid, Stmt::map_loop(mapping, worker, &[var], guarded))
}

/// True when, inside some sequential loop, every global load precedes
/// every accumulation that reads shared memory. This is the shape of a
/// double-buffered main loop: fetch tile `k + 1`, then compute tile `k`.
pub fn pipeline_prefetch_precedes_compute(kernel: &Kernel) -> bool {
    let is_param = |t: &str| kernel.params.iter().any(|b| b.name == t);
    let is_shared = |t: &str| kernel.shared.iter().any(|b| b.name == t);
    let mut found = false;
    kernel.body.walk(&mut |s| {
        let Stmt::SeqFor { body, .. } = s else {
            return;
        };
        let mut order = 0usize;
        let mut last_fetch = None;
        let mut first_compute = None;
        body.walk(&mut |t| {
            if let Stmt::Store { buffer, value, .. } = t {
                let reads_global = value.loads().iter().any(|(n, _)| is_param(n));
                let reads_shared = value.loads().iter().any(|(n, _)| is_shared(n));
                if reads_global && !is_shared(buffer) {
                    last_fetch = Some(order);
                }
                if reads_shared && !is_shared(buffer) && !is_param(buffer) {
                    first_compute.get_or_insert(order);
                }
                order += 1;
            }
        });
        if let (Some(f), Some(c)) = (last_fetch, first_compute) {
            found |= f < c;
        }
    });
    found
}
