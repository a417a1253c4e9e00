//! Lowering of task-mapped loops into plain sequential loops.

use std::collections::{HashMap, HashSet};

use thiserror::Error;

use crate::expr::{interval, is_index_expr, simplify, ConstTable, Expr, Interval, Ranges};
use crate::mapping::{MappingKind, TaskMapping};

use super::{Kernel, Stmt, BLOCK_IDX, THREAD_IDX};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LowerError {
    #[error("worker expression `{worker}` spans {lo}..={hi}, but `{mapping}` has {num_workers} workers")]
    WorkerRange {
        mapping: String,
        worker: String,
        lo: i64,
        hi: i64,
        num_workers: usize,
    },
    #[error("map loop over `{mapping}` binds {got} variables, expected {expected}")]
    Arity {
        mapping: String,
        got: usize,
        expected: usize,
    },
}

/// Per-worker task lists up to this length become unrolled loops.
pub const UNROLL_THRESHOLD: usize = 8;

/// Replaces every `MapLoop` by sequential loops whose task coordinates
/// are closed-form expressions of the worker id (table lookups for custom
/// mappings), then simplifies index arithmetic under the known ranges.
pub fn lower_maploops(kernel: &Kernel) -> Result<Kernel, LowerError> {
    let mut names = NameGen::new(&kernel.body);
    let mut ranges = base_ranges(kernel);
    let body = lower(&kernel.body, &mut ranges, &mut names)?;
    let mut ranges = base_ranges(kernel);
    let body = simplify_stmt(&body, &mut ranges);
    Ok(Kernel {
        body,
        ..kernel.clone()
    })
}

pub(crate) fn base_ranges(kernel: &Kernel) -> Ranges {
    let mut r = Ranges::new();
    r.insert(THREAD_IDX.to_string(), Interval::extent(kernel.block_dim));
    r.insert(BLOCK_IDX.to_string(), Interval::extent(kernel.grid_dim));
    r
}

struct NameGen {
    used: HashSet<String>,
}

impl NameGen {
    fn new(body: &Stmt) -> Self {
        let mut used = HashSet::new();
        body.walk(&mut |s| {
            match s {
                Stmt::SeqFor { var, .. } => {
                    used.insert(var.clone());
                }
                Stmt::MapLoop { vars, .. } => used.extend(vars.iter().cloned()),
                _ => {}
            }
            for e in s.exprs() {
                used.extend(e.free_vars());
            }
        });
        NameGen { used }
    }

    fn fresh(&mut self, base: &str) -> String {
        for n in 0.. {
            let cand = format!("{base}{n}");
            if self.used.insert(cand.clone()) {
                return cand;
            }
        }
        unreachable!()
    }
}

/// Temporarily binds `var` to `r`, restoring any shadowed range afterwards.
fn with_range<T>(ranges: &mut Ranges, var: &str, r: Interval, f: impl FnOnce(&mut Ranges) -> T) -> T {
    let old = ranges.insert(var.to_string(), r);
    let out = f(ranges);
    match old {
        Some(o) => ranges.insert(var.to_string(), o),
        None => ranges.remove(var),
    };
    out
}

fn loop_range(extent: &Expr, ranges: &Ranges) -> Interval {
    let r = interval(extent, ranges);
    if r.is_bounded() {
        Interval::new(0, (r.hi - 1).max(0))
    } else {
        Interval::FULL
    }
}

fn lower(s: &Stmt, ranges: &mut Ranges, names: &mut NameGen) -> Result<Stmt, LowerError> {
    Ok(match s {
        Stmt::SeqFor {
            var,
            extent,
            unroll,
            body,
        } => {
            let r = loop_range(extent, ranges);
            let body = with_range(ranges, var, r, |rg| lower(body, rg, names))?;
            Stmt::SeqFor {
                var: var.clone(),
                extent: extent.clone(),
                unroll: *unroll,
                body: Box::new(body),
            }
        }
        Stmt::MapLoop {
            mapping,
            worker,
            vars,
            body,
        } => {
            if vars.len() != mapping.dim() {
                return Err(LowerError::Arity {
                    mapping: mapping.to_string(),
                    got: vars.len(),
                    expected: mapping.dim(),
                });
            }
            let mut saved = Vec::new();
            for (v, d) in vars.iter().zip(mapping.task_shape().dims()) {
                saved.push((v.clone(), ranges.insert(v.clone(), Interval::extent(*d))));
            }
            let body = lower(body, ranges, names);
            for (v, old) in saved.into_iter().rev() {
                match old {
                    Some(o) => ranges.insert(v, o),
                    None => ranges.remove(&v),
                };
            }
            let body = body?;
            let w = interval(worker, ranges);
            let n = mapping.num_workers() as i64;
            if !w.is_bounded() || !w.within(0, n - 1) {
                return Err(LowerError::WorkerRange {
                    mapping: mapping.to_string(),
                    worker: worker.to_string(),
                    lo: w.lo,
                    hi: w.hi,
                    num_workers: mapping.num_workers(),
                });
            }
            expand_maploop(mapping, worker, vars, body, names)
        }
        Stmt::If {
            cond,
            then,
            otherwise,
        } => Stmt::If {
            cond: cond.clone(),
            then: Box::new(lower(then, ranges, names)?),
            otherwise: match otherwise {
                Some(o) => Some(Box::new(lower(o, ranges, names)?)),
                None => None,
            },
        },
        Stmt::Block { stmts } => Stmt::Block {
            stmts: stmts
                .iter()
                .map(|s| lower(s, ranges, names))
                .collect::<Result<_, _>>()?,
        },
        other => other.clone(),
    })
}

struct Loop {
    var: String,
    extent: usize,
}

fn expand_maploop(
    mapping: &TaskMapping,
    worker: &Expr,
    vars: &[String],
    body: Stmt,
    names: &mut NameGen,
) -> Stmt {
    let atoms = mapping.atoms();
    let dim = mapping.dim();
    let mut loops: Vec<Loop> = Vec::new();
    let mut guards: Vec<Expr> = Vec::new();
    let mut coords: Vec<Expr> = vec![Expr::Int(0); dim];
    // workers and task extents of all atoms to the right of the current one
    let mut workers_right: usize = atoms.iter().map(|a| a.num_workers()).product();
    let mut dims_right: Vec<usize> = (0..dim)
        .map(|d| atoms.iter().map(|a| a.task_shape().dims()[d]).product())
        .collect();
    for (l, atom) in atoms.iter().enumerate() {
        let n = atom.num_workers();
        workers_right /= n;
        let adims = atom.task_shape().dims();
        for d in 0..dim {
            dims_right[d] /= adims[d];
        }
        let w_l = {
            let q = if workers_right == 1 {
                worker.clone()
            } else {
                worker.clone() / workers_right as i64
            };
            if l == 0 || n == 1 {
                q
            } else {
                q % n as i64
            }
        };
        let local: Vec<Expr> = match atom.kind() {
            MappingKind::Spatial => {
                let mut stride: usize = adims.iter().product();
                adims
                    .iter()
                    .enumerate()
                    .map(|(d, ext)| {
                        stride /= ext;
                        if *ext == 1 {
                            return Expr::Int(0);
                        }
                        let q = if stride == 1 {
                            w_l.clone()
                        } else {
                            w_l.clone() / stride as i64
                        };
                        if d == 0 {
                            q
                        } else {
                            q % *ext as i64
                        }
                    })
                    .collect()
            }
            MappingKind::Repeat => adims
                .iter()
                .enumerate()
                .map(|(d, ext)| {
                    if *ext == 1 {
                        Expr::Int(0)
                    } else {
                        let var = names.fresh(&vars[d]);
                        loops.push(Loop {
                            var: var.clone(),
                            extent: *ext,
                        });
                        Expr::var(var)
                    }
                })
                .collect(),
            MappingKind::Custom(table) => {
                let q = table.iter().map(|t| t.len()).max().unwrap_or(0);
                if q == 0 {
                    return Stmt::empty();
                }
                let slot = if q == 1 {
                    w_l.clone()
                } else {
                    let r = names.fresh("r");
                    loops.push(Loop {
                        var: r.clone(),
                        extent: q,
                    });
                    if table.iter().any(|t| t.len() != q) {
                        let counts = ConstTable::ints(table.iter().map(|t| t.len() as i64).collect());
                        guards.push(Expr::var(&r).lt(Expr::table(counts, w_l.clone())));
                    }
                    w_l.clone() * q as i64 + Expr::var(r)
                };
                (0..dim)
                    .map(|d| {
                        let entries: Vec<i64> = table
                            .iter()
                            .flat_map(|tasks| {
                                (0..q).map(move |r| tasks.get(r).map_or(0, |t| t[d] as i64))
                            })
                            .collect();
                        Expr::table(ConstTable::ints(entries), slot.clone())
                    })
                    .collect()
            }
            MappingKind::Compose(..) => unreachable!("atoms are never compositions"),
        };
        for d in 0..dim {
            let scaled = if dims_right[d] == 1 {
                local[d].clone()
            } else {
                local[d].clone() * dims_right[d] as i64
            };
            coords[d] = coords[d].clone() + scaled;
        }
    }
    let subst: HashMap<String, Expr> = vars.iter().cloned().zip(coords).collect();
    let mut out = body.map_exprs(&mut |e| e.substitute(&subst));
    if !guards.is_empty() {
        out = Stmt::if_then(Expr::all(guards), out);
    }
    let unroll = mapping
        .tasks_per_worker()
        .is_some_and(|q| q <= UNROLL_THRESHOLD);
    for l in loops.into_iter().rev() {
        out = Stmt::SeqFor {
            var: l.var,
            extent: Expr::Int(l.extent as i64),
            unroll,
            body: Box::new(out),
        };
    }
    out
}

/// Simplifies the integer parts of `e`: whole index expressions, load
/// indices and table indices.
pub(crate) fn simplify_deep(e: &Expr, ranges: &Ranges) -> Expr {
    if is_index_expr(e) {
        return simplify(e, ranges);
    }
    match e {
        Expr::Binary(op, a, b) => Expr::binary(*op, simplify_deep(a, ranges), simplify_deep(b, ranges)),
        Expr::Unary(op, a) => Expr::unary(*op, simplify_deep(a, ranges)),
        Expr::Select(c, a, b) => Expr::select(
            simplify_deep(c, ranges),
            simplify_deep(a, ranges),
            simplify_deep(b, ranges),
        ),
        Expr::Load(t, idx) => Expr::Load(t.clone(), idx.iter().map(|i| simplify_deep(i, ranges)).collect()),
        Expr::Table(t, i) => Expr::Table(t.clone(), Box::new(simplify_deep(i, ranges))),
        _ => e.clone(),
    }
}

/// Simplifies every expression under the ranges of enclosing loops and
/// drops branches whose condition folds to a constant.
pub(crate) fn simplify_stmt(s: &Stmt, ranges: &mut Ranges) -> Stmt {
    match s {
        Stmt::SeqFor {
            var,
            extent,
            unroll,
            body,
        } => {
            let extent = simplify_deep(extent, ranges);
            let r = loop_range(&extent, ranges);
            let body = with_range(ranges, var, r, |rg| simplify_stmt(body, rg));
            Stmt::SeqFor {
                var: var.clone(),
                extent,
                unroll: *unroll,
                body: Box::new(body),
            }
        }
        Stmt::MapLoop {
            mapping,
            worker,
            vars,
            body,
        } => {
            let worker = simplify_deep(worker, ranges);
            let mut saved = Vec::new();
            for (v, d) in vars.iter().zip(mapping.task_shape().dims()) {
                saved.push((v.clone(), ranges.insert(v.clone(), Interval::extent(*d))));
            }
            let body = simplify_stmt(body, ranges);
            for (v, old) in saved.into_iter().rev() {
                match old {
                    Some(o) => ranges.insert(v, o),
                    None => ranges.remove(&v),
                };
            }
            Stmt::MapLoop {
                mapping: mapping.clone(),
                worker,
                vars: vars.clone(),
                body: Box::new(body),
            }
        }
        Stmt::If {
            cond,
            then,
            otherwise,
        } => {
            let cond = simplify_deep(cond, ranges);
            match cond.as_int() {
                Some(0) => match otherwise {
                    Some(o) => simplify_stmt(o, ranges),
                    None => Stmt::empty(),
                },
                Some(_) => simplify_stmt(then, ranges),
                None => Stmt::If {
                    cond,
                    then: Box::new(simplify_stmt(then, ranges)),
                    otherwise: otherwise.as_ref().map(|o| Box::new(simplify_stmt(o, ranges))),
                },
            }
        }
        Stmt::Block { stmts } => {
            let mut out = Vec::with_capacity(stmts.len());
            for s in stmts {
                match simplify_stmt(s, ranges) {
                    Stmt::Block { stmts } => out.extend(stmts),
                    other => out.push(other),
                }
            }
            Stmt::Block { stmts: out }
        }
        other => other.map_exprs(&mut |e| simplify_deep(e, ranges)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program_ir::{Buffer, Scope};
    use crate::tensor::DType;

    fn kernel(block_dim: usize, body: Stmt) -> Kernel {
        Kernel {
            name: "k".into(),
            grid_dim: 1,
            block_dim,
            params: vec![Buffer::new("A", Scope::Global, &[64, 8], DType::I32)],
            shared: vec![Buffer::new("S", Scope::Shared, &[64, 8], DType::I32)],
            locals: vec![],
            body,
        }
    }

    #[test]
    fn cooperative_load_closed_form() {
        let m = TaskMapping::parse("repeat(4, 1) * spatial(16, 8)").unwrap();
        let body = Stmt::map_loop(
            m,
            Expr::var(THREAD_IDX),
            &["i", "k"],
            Stmt::store(
                "S",
                vec![Expr::var("i"), Expr::var("k")],
                Expr::load("A", vec![Expr::var("i"), Expr::var("k")]),
            ),
        );
        let lowered = lower_maploops(&kernel(128, body)).unwrap();
        assert_eq!(
            lowered.body.to_string(),
            "for i0 in 0..4 unroll {\n  S[i0 * 16 + threadIdx / 8, threadIdx % 8] = A[i0 * 16 + threadIdx / 8, threadIdx % 8];\n}\n"
        );
    }

    #[test]
    fn spatial_is_a_single_statement() {
        let m = TaskMapping::spatial(&[128]).unwrap();
        let body = Stmt::map_loop(
            m,
            Expr::var(THREAD_IDX),
            &["t"],
            Stmt::Eval {
                value: Expr::var("t"),
            },
        );
        let lowered = lower_maploops(&kernel(128, body)).unwrap();
        assert_eq!(lowered.body.to_string(), "eval threadIdx;\n");
    }

    #[test]
    fn worker_range_is_checked() {
        let m = TaskMapping::spatial(&[64]).unwrap();
        let body = Stmt::map_loop(m, Expr::var(THREAD_IDX), &["t"], Stmt::empty());
        assert!(matches!(
            lower_maploops(&kernel(128, body)),
            Err(LowerError::WorkerRange { hi: 127, .. })
        ));
    }

    #[test]
    fn custom_uses_tables() {
        let m = TaskMapping::custom(2, &[3], vec![vec![vec![2], vec![0]], vec![vec![1]]]).unwrap();
        let body = Stmt::map_loop(
            m,
            Expr::var(THREAD_IDX),
            &["t"],
            Stmt::Eval {
                value: Expr::var("t"),
            },
        );
        let lowered = lower_maploops(&kernel(2, body)).unwrap();
        assert_eq!(
            lowered.body.to_string(),
            "for r0 in 0..2 {\n  if r0 < table(i32, [2, 1])[threadIdx] {\n    eval table(i32, [2, 0, 1, 0])[threadIdx * 2 + r0];\n  }\n}\n"
        );
    }
}
