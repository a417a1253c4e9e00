//! Static checks on kernels: barrier convergence, declarations and
//! bounds of accesses whose ranges are statically known.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::expr::{interval, BinOp, Expr, Interval, Ranges};

use super::lower::base_ranges;
use super::{Buffer, Kernel, Scope, Stmt, BLOCK_IDX, THREAD_IDX};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagKind {
    DivergentBarrier,
    UndeclaredBuffer,
    UndeclaredVariable,
    Arity,
    OutOfBounds,
    Scope,
    Launch,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Diagnostic {
    pub kind: DiagKind,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.kind, self.message)
    }
}

struct Checker<'a> {
    kernel: &'a Kernel,
    diags: Vec<Diagnostic>,
    ranges: Ranges,
    /// Guarded expressions with the range the guard establishes.
    facts: Vec<(Expr, Interval)>,
    bound: Vec<String>,
    varying: HashSet<String>,
    divergent: bool,
}

/// Returns all diagnostics; an empty list means the kernel is well formed.
pub fn wellformed(kernel: &Kernel) -> Vec<Diagnostic> {
    let mut c = Checker {
        kernel,
        diags: Vec::new(),
        ranges: base_ranges(kernel),
        facts: Vec::new(),
        bound: vec![THREAD_IDX.to_string(), BLOCK_IDX.to_string()],
        varying: HashSet::from([THREAD_IDX.to_string()]),
        divergent: false,
    };
    c.check_declarations();
    c.stmt(&kernel.body);
    c.diags
}

impl Checker<'_> {
    fn report(&mut self, kind: DiagKind, message: String) {
        self.diags.push(Diagnostic { kind, message });
    }

    fn check_declarations(&mut self) {
        let k = self.kernel;
        if k.grid_dim == 0 || k.block_dim == 0 {
            self.report(
                DiagKind::Launch,
                format!("grid({}) block({}) must be positive", k.grid_dim, k.block_dim),
            );
        }
        let lists: [(&[Buffer], Scope); 3] = [
            (&k.params, Scope::Global),
            (&k.shared, Scope::Shared),
            (&k.locals, Scope::Local),
        ];
        let mut names = HashSet::new();
        for (list, scope) in lists {
            for b in list {
                if b.scope != scope {
                    self.report(
                        DiagKind::Scope,
                        format!("buffer `{}` declared {:?} in the {:?} list", b.name, b.scope, scope),
                    );
                }
                if !names.insert(b.name.clone()) {
                    self.report(DiagKind::Scope, format!("buffer `{}` declared twice", b.name));
                }
            }
        }
    }

    fn is_varying(&self, e: &Expr) -> bool {
        let mut v = false;
        e.visit(&mut |n| match n {
            Expr::Var(x) if self.varying.contains(x) => v = true,
            Expr::Load(..) => v = true,
            _ => {}
        });
        v
    }

    fn bind(&mut self, var: &str, r: Interval, varying: bool) -> (Option<Interval>, bool) {
        self.bound.push(var.to_string());
        let old = self.ranges.insert(var.to_string(), r);
        let was = if varying {
            !self.varying.insert(var.to_string())
        } else {
            self.varying.remove(var)
        };
        (old, was)
    }

    fn unbind(&mut self, var: &str, saved: (Option<Interval>, bool)) {
        self.bound.pop();
        match saved.0 {
            Some(o) => self.ranges.insert(var.to_string(), o),
            None => self.ranges.remove(var),
        };
        if saved.1 {
            self.varying.insert(var.to_string());
        } else {
            self.varying.remove(var);
        }
    }

    /// Interval of `e`, narrowed by guard facts on matching subexpressions.
    fn range_of(&self, e: &Expr) -> Interval {
        if self.facts.is_empty() {
            return interval(e, &self.ranges);
        }
        let mut ranges = self.ranges.clone();
        let mut n = 0;
        let replaced = self.replace_facts(e, &mut ranges, &mut n);
        interval(&replaced, &ranges)
    }

    fn replace_facts(&self, e: &Expr, ranges: &mut Ranges, n: &mut usize) -> Expr {
        let mut narrowed: Option<Interval> = None;
        for (f, r) in &self.facts {
            if f == e {
                let base = narrowed.unwrap_or_else(|| interval(e, &self.ranges));
                narrowed = Some(base.intersect(*r));
            }
        }
        if let Some(r) = narrowed {
            let name = format!("$fact{n}");
            *n += 1;
            ranges.insert(name.clone(), r);
            return Expr::Var(name);
        }
        match e {
            Expr::Binary(op, a, b) => Expr::binary(
                *op,
                self.replace_facts(a, ranges, n),
                self.replace_facts(b, ranges, n),
            ),
            Expr::Unary(op, a) => Expr::unary(*op, self.replace_facts(a, ranges, n)),
            Expr::Select(c, a, b) => Expr::select(
                (**c).clone(),
                self.replace_facts(a, ranges, n),
                self.replace_facts(b, ranges, n),
            ),
            other => other.clone(),
        }
    }

    fn access(&mut self, buffer: &str, indices: &[Expr], what: &str) {
        let Some(buf) = self.kernel.buffer(buffer).cloned() else {
            self.report(
                DiagKind::UndeclaredBuffer,
                format!("{what} of undeclared buffer `{buffer}`"),
            );
            return;
        };
        if indices.len() != buf.shape.len() {
            self.report(
                DiagKind::Arity,
                format!(
                    "{what} of `{buffer}` with {} indices, expected {}",
                    indices.len(),
                    buf.shape.len()
                ),
            );
            return;
        }
        for (d, (i, ext)) in indices.iter().zip(&buf.shape).enumerate() {
            let r = self.range_of(i);
            if r.is_bounded() && !r.within(0, *ext as i64 - 1) {
                self.report(
                    DiagKind::OutOfBounds,
                    format!(
                        "{what} `{buffer}` dimension {d} index `{i}` spans {}..={}, extent {ext}",
                        r.lo, r.hi
                    ),
                );
            }
        }
    }

    fn expr(&mut self, e: &Expr) {
        let mut vars = Vec::new();
        let mut loads = Vec::new();
        e.visit(&mut |n| match n {
            Expr::Var(v) => vars.push(v.clone()),
            Expr::Load(t, idx) => loads.push((t.clone(), idx.clone())),
            _ => {}
        });
        for v in vars {
            if !self.bound.contains(&v) {
                self.report(DiagKind::UndeclaredVariable, format!("variable `{v}` is not bound"));
            }
        }
        for (t, idx) in loads {
            self.access(&t, &idx, "load");
        }
    }

    /// Facts established by the conjuncts of a guard.
    fn guard_facts(&mut self, cond: &Expr) -> Vec<(Expr, Interval)> {
        let mut out = Vec::new();
        let mut conjuncts = vec![cond];
        while let Some(c) = conjuncts.pop() {
            let Expr::Binary(op, a, b) = c else { continue };
            if *op == BinOp::And {
                conjuncts.push(a);
                conjuncts.push(b);
                continue;
            }
            let (ra, rb) = (interval(a, &self.ranges), interval(b, &self.ranges));
            let fact = |x: &Expr, op: BinOp, bound: Interval| -> Option<(Expr, Interval)> {
                if !bound.is_bounded() {
                    return None;
                }
                let r = match op {
                    BinOp::Lt => Interval::new(Interval::FULL.lo, bound.hi - 1),
                    BinOp::Le => Interval::new(Interval::FULL.lo, bound.hi),
                    BinOp::Gt => Interval::new(bound.lo + 1, Interval::FULL.hi),
                    BinOp::Ge => Interval::new(bound.lo, Interval::FULL.hi),
                    BinOp::Eq => bound,
                    _ => return None,
                };
                Some((x.clone(), r))
            };
            let flipped = match op {
                BinOp::Lt => BinOp::Gt,
                BinOp::Le => BinOp::Ge,
                BinOp::Gt => BinOp::Lt,
                BinOp::Ge => BinOp::Le,
                other => *other,
            };
            out.extend(fact(a, *op, rb));
            out.extend(fact(b, flipped, ra));
        }
        out
    }

    fn stmt(&mut self, s: &Stmt) {
        match s {
            Stmt::Block { stmts } => stmts.iter().for_each(|s| self.stmt(s)),
            Stmt::Barrier => {
                if self.divergent {
                    self.report(
                        DiagKind::DivergentBarrier,
                        "barrier under thread-dependent control flow".into(),
                    );
                }
            }
            Stmt::Store {
                buffer,
                indices,
                value,
            } => {
                for i in indices {
                    self.expr(i);
                }
                self.expr(value);
                self.access(buffer, indices, "store");
            }
            Stmt::Eval { value } => self.expr(value),
            Stmt::SeqFor {
                var, extent, body, ..
            } => {
                self.expr(extent);
                let varying = self.is_varying(extent);
                let r = interval(extent, &self.ranges);
                let r = if r.is_bounded() {
                    Interval::new(0, (r.hi - 1).max(0))
                } else {
                    Interval::FULL
                };
                let was_div = self.divergent;
                self.divergent |= varying;
                let saved = self.bind(var, r, varying);
                self.stmt(body);
                self.unbind(var, saved);
                self.divergent = was_div;
            }
            Stmt::MapLoop {
                mapping,
                worker,
                vars,
                body,
            } => {
                self.expr(worker);
                if vars.len() != mapping.dim() {
                    self.report(
                        DiagKind::Arity,
                        format!("map over `{mapping}` binds {} variables", vars.len()),
                    );
                }
                let w = interval(worker, &self.ranges);
                if !w.is_bounded() || !w.within(0, mapping.num_workers() as i64 - 1) {
                    self.report(
                        DiagKind::OutOfBounds,
                        format!(
                            "worker `{worker}` spans {}..={} for {} workers",
                            w.lo,
                            w.hi,
                            mapping.num_workers()
                        ),
                    );
                }
                let varying = self.is_varying(worker);
                let was_div = self.divergent;
                self.divergent |= varying && mapping.tasks_per_worker().is_none();
                let mut saved = Vec::new();
                for (v, d) in vars.iter().zip(mapping.task_shape().dims()) {
                    saved.push((v.clone(), self.bind(v, Interval::extent(*d), varying)));
                }
                self.stmt(body);
                for (v, sv) in saved.into_iter().rev() {
                    self.unbind(&v, sv);
                }
                self.divergent = was_div;
            }
            Stmt::If {
                cond,
                then,
                otherwise,
            } => {
                self.expr(cond);
                let varying = self.is_varying(cond);
                let was_div = self.divergent;
                self.divergent |= varying;
                let facts = self.guard_facts(cond);
                let n = self.facts.len();
                self.facts.extend(facts);
                self.stmt(then);
                self.facts.truncate(n);
                if let Some(o) = otherwise {
                    self.stmt(o);
                }
                self.divergent = was_div;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;

    fn kernel(body: Stmt) -> Kernel {
        Kernel {
            name: "k".into(),
            grid_dim: 1,
            block_dim: 64,
            params: vec![Buffer::new("G", Scope::Global, &[100], DType::I32)],
            shared: vec![Buffer::new("S", Scope::Shared, &[64], DType::I32)],
            locals: vec![],
            body,
        }
    }

    fn kinds(k: &Kernel) -> Vec<DiagKind> {
        wellformed(k).into_iter().map(|d| d.kind).collect()
    }

    #[test]
    fn divergent_barrier() {
        let k = kernel(Stmt::if_then(Expr::var(THREAD_IDX).eq_(0i64), Stmt::Barrier));
        assert_eq!(kinds(&k), vec![DiagKind::DivergentBarrier]);
        let k = kernel(Stmt::if_then(Expr::var(BLOCK_IDX).eq_(0i64), Stmt::Barrier));
        assert!(kinds(&k).is_empty());
    }

    #[test]
    fn shared_store_past_extent() {
        let k = kernel(Stmt::store("S", vec![Expr::var(THREAD_IDX) + 1i64], Expr::int(0)));
        assert_eq!(kinds(&k), vec![DiagKind::OutOfBounds]);
    }

    #[test]
    fn guards_narrow_ranges() {
        let idx = Expr::var(THREAD_IDX) * 2i64;
        let k = kernel(Stmt::if_then(
            idx.clone().lt(100i64),
            Stmt::store("G", vec![idx.clone()], Expr::int(1)),
        ));
        assert!(kinds(&k).is_empty());
        let k = kernel(Stmt::store("G", vec![idx], Expr::int(1)));
        assert_eq!(kinds(&k), vec![DiagKind::OutOfBounds]);
    }

    #[test]
    fn undeclared_names() {
        let k = kernel(Stmt::store("X", vec![Expr::var("q")], Expr::load("G", vec![])));
        assert_eq!(
            kinds(&k),
            vec![DiagKind::UndeclaredVariable, DiagKind::Arity, DiagKind::UndeclaredBuffer]
        );
    }
}
