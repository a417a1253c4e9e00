//! Scheduled tensor programs: kernels over a grid of thread blocks with
//! scoped buffers, task-mapped loops, barriers and guarded accesses.

mod lower;
mod parse;
mod print;
mod wellformed;

pub use lower::{lower_maploops, LowerError};
pub(crate) use lower::{base_ranges, simplify_stmt};
pub use parse::{parse_expr, parse_kernel, parse_program};
pub use wellformed::{wellformed, DiagKind, Diagnostic};

use serde::{Deserialize, Serialize};

use crate::expr::Expr;
use crate::mapping::TaskMapping;
use crate::tensor::DType;

pub const THREAD_IDX: &str = "threadIdx";
pub const BLOCK_IDX: &str = "blockIdx";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Global,
    Shared,
    Local,
}

impl Scope {
    pub fn keyword(self) -> &'static str {
        match self {
            Scope::Global => "global",
            Scope::Shared => "shared",
            Scope::Local => "local",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Buffer {
    pub name: String,
    pub scope: Scope,
    pub shape: Vec<usize>,
    pub dtype: DType,
}

impl Buffer {
    pub fn new(name: impl Into<String>, scope: Scope, shape: &[usize], dtype: DType) -> Self {
        Buffer {
            name: name.into(),
            scope,
            shape: shape.to_vec(),
            dtype,
        }
    }

    pub fn size(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn bytes(&self) -> usize {
        self.size() * self.dtype.size_bytes()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Stmt {
    SeqFor {
        var: String,
        extent: Expr,
        unroll: bool,
        body: Box<Stmt>,
    },
    /// Runs `body` once per task that `mapping` assigns to `worker`, in
    /// order, with `vars` bound to the task coordinates.
    MapLoop {
        mapping: TaskMapping,
        worker: Expr,
        vars: Vec<String>,
        body: Box<Stmt>,
    },
    If {
        cond: Expr,
        then: Box<Stmt>,
        otherwise: Option<Box<Stmt>>,
    },
    Store {
        buffer: String,
        indices: Vec<Expr>,
        value: Expr,
    },
    Eval {
        value: Expr,
    },
    Barrier,
    Block {
        stmts: Vec<Stmt>,
    },
}

impl Stmt {
    pub fn block(stmts: Vec<Stmt>) -> Stmt {
        Stmt::Block { stmts }
    }

    pub fn empty() -> Stmt {
        Stmt::Block { stmts: vec![] }
    }

    pub fn seq_for(var: impl Into<String>, extent: impl Into<Expr>, body: Stmt) -> Stmt {
        Stmt::SeqFor {
            var: var.into(),
            extent: extent.into(),
            unroll: false,
            body: Box::new(body),
        }
    }

    pub fn map_loop(mapping: TaskMapping, worker: Expr, vars: &[&str], body: Stmt) -> Stmt {
        Stmt::MapLoop {
            mapping,
            worker,
            vars: vars.iter().map(|v| v.to_string()).collect(),
            body: Box::new(body),
        }
    }

    pub fn if_then(cond: Expr, then: Stmt) -> Stmt {
        Stmt::If {
            cond,
            then: Box::new(then),
            otherwise: None,
        }
    }

    pub fn if_else(cond: Expr, then: Stmt, otherwise: Stmt) -> Stmt {
        Stmt::If {
            cond,
            then: Box::new(then),
            otherwise: Some(Box::new(otherwise)),
        }
    }

    pub fn store(buffer: impl Into<String>, indices: Vec<Expr>, value: Expr) -> Stmt {
        Stmt::Store {
            buffer: buffer.into(),
            indices,
            value,
        }
    }

    /// Visits statements in pre-order.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a Stmt)) {
        f(self);
        match self {
            Stmt::SeqFor { body, .. } | Stmt::MapLoop { body, .. } => body.walk(f),
            Stmt::If {
                then, otherwise, ..
            } => {
                then.walk(f);
                if let Some(o) = otherwise {
                    o.walk(f);
                }
            }
            Stmt::Block { stmts } => stmts.iter().for_each(|s| s.walk(f)),
            Stmt::Store { .. } | Stmt::Eval { .. } | Stmt::Barrier => {}
        }
    }

    /// Expressions directly owned by this statement.
    pub fn exprs(&self) -> Vec<&Expr> {
        match self {
            Stmt::SeqFor { extent, .. } => vec![extent],
            Stmt::MapLoop { worker, .. } => vec![worker],
            Stmt::If { cond, .. } => vec![cond],
            Stmt::Store { indices, value, .. } => indices.iter().chain([value]).collect(),
            Stmt::Eval { value } => vec![value],
            Stmt::Barrier | Stmt::Block { .. } => vec![],
        }
    }

    /// Rebuilds every expression with `f`, including store indices.
    pub fn map_exprs(&self, f: &mut impl FnMut(&Expr) -> Expr) -> Stmt {
        match self {
            Stmt::SeqFor {
                var,
                extent,
                unroll,
                body,
            } => Stmt::SeqFor {
                var: var.clone(),
                extent: f(extent),
                unroll: *unroll,
                body: Box::new(body.map_exprs(f)),
            },
            Stmt::MapLoop {
                mapping,
                worker,
                vars,
                body,
            } => Stmt::MapLoop {
                mapping: mapping.clone(),
                worker: f(worker),
                vars: vars.clone(),
                body: Box::new(body.map_exprs(f)),
            },
            Stmt::If {
                cond,
                then,
                otherwise,
            } => Stmt::If {
                cond: f(cond),
                then: Box::new(then.map_exprs(f)),
                otherwise: otherwise.as_ref().map(|o| Box::new(o.map_exprs(f))),
            },
            Stmt::Store {
                buffer,
                indices,
                value,
            } => Stmt::Store {
                buffer: buffer.clone(),
                indices: indices.iter().map(&mut *f).collect(),
                value: f(value),
            },
            Stmt::Eval { value } => Stmt::Eval { value: f(value) },
            Stmt::Barrier => Stmt::Barrier,
            Stmt::Block { stmts } => Stmt::Block {
                stmts: stmts.iter().map(|s| s.map_exprs(f)).collect(),
            },
        }
    }

    /// Rebuilds the tree bottom-up, letting `f` replace each statement
    /// after its children were rebuilt.
    pub fn rewrite(&self, f: &mut impl FnMut(Stmt) -> Stmt) -> Stmt {
        let rebuilt = match self {
            Stmt::SeqFor {
                var,
                extent,
                unroll,
                body,
            } => Stmt::SeqFor {
                var: var.clone(),
                extent: extent.clone(),
                unroll: *unroll,
                body: Box::new(body.rewrite(f)),
            },
            Stmt::MapLoop {
                mapping,
                worker,
                vars,
                body,
            } => Stmt::MapLoop {
                mapping: mapping.clone(),
                worker: worker.clone(),
                vars: vars.clone(),
                body: Box::new(body.rewrite(f)),
            },
            Stmt::If {
                cond,
                then,
                otherwise,
            } => Stmt::If {
                cond: cond.clone(),
                then: Box::new(then.rewrite(f)),
                otherwise: otherwise.as_ref().map(|o| Box::new(o.rewrite(f))),
            },
            Stmt::Block { stmts } => Stmt::Block {
                stmts: stmts.iter().map(|s| s.rewrite(f)).collect(),
            },
            other => other.clone(),
        };
        f(rebuilt)
    }

    pub fn contains_maploop(&self) -> bool {
        let mut found = false;
        self.walk(&mut |s| found |= matches!(s, Stmt::MapLoop { .. }));
        found
    }
}

/// `base`, with underscores appended until it is not in `taken`.
pub fn fresh_name(base: &str, taken: &[&str]) -> String {
    let mut name = base.to_string();
    while taken.contains(&name.as_str()) {
        name.push('_');
    }
    name
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Kernel {
    pub name: String,
    pub grid_dim: usize,
    pub block_dim: usize,
    /// Global buffers the kernel reads or writes.
    pub params: Vec<Buffer>,
    pub shared: Vec<Buffer>,
    pub locals: Vec<Buffer>,
    pub body: Stmt,
}

impl Kernel {
    pub fn buffer(&self, name: &str) -> Option<&Buffer> {
        self.params
            .iter()
            .chain(&self.shared)
            .chain(&self.locals)
            .find(|b| b.name == name)
    }

    pub fn shared_bytes(&self) -> usize {
        self.shared.iter().map(|b| b.bytes()).sum()
    }

    /// Renames every reference to buffer `from`, which must be unambiguous.
    pub fn rename_buffer(&self, from: &str, to: &str) -> Kernel {
        let mut k = self.clone();
        for b in k.params.iter_mut().chain(k.shared.iter_mut()).chain(k.locals.iter_mut()) {
            if b.name == from {
                b.name = to.to_string();
            }
        }
        k.body = k
            .body
            .rewrite(&mut |s| match s {
                Stmt::Store { buffer, indices, value } if buffer == from => Stmt::Store {
                    buffer: to.to_string(),
                    indices,
                    value,
                },
                other => other,
            })
            .map_exprs(&mut |e| {
                e.rewrite(&mut |x| match x {
                    Expr::Load(t, idx) if t == from => Expr::Load(to.to_string(), idx),
                    other => other,
                })
            });
        k
    }

    /// Renames shared and local buffers named in `names` so that globals
    /// with those names can be added.
    pub fn avoid_scratch_names(&self, names: &[&str]) -> Kernel {
        let mut k = self.clone();
        let scratch: Vec<String> = k.shared.iter().chain(&k.locals).map(|b| b.name.clone()).collect();
        for old in scratch.iter().filter(|n| names.contains(&n.as_str())) {
            let taken: Vec<&str> = names
                .iter()
                .copied()
                .chain(scratch.iter().map(String::as_str))
                .chain(k.params.iter().map(|b| b.name.as_str()))
                .collect();
            let new = fresh_name(old, &taken);
            k = k.rename_buffer(old, &new);
        }
        k
    }

    /// Names of global buffers stored to anywhere in the body.
    pub fn written_globals(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        self.body.walk(&mut |s| {
            if let Stmt::Store { buffer, .. } = s {
                if self.params.iter().any(|p| &p.name == buffer) && !out.contains(buffer) {
                    out.push(buffer.clone());
                }
            }
        });
        out
    }
}

/// A sequence of kernels sharing global memory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Program {
    pub kernels: Vec<Kernel>,
    /// Global buffers supplied by the caller.
    pub inputs: Vec<Buffer>,
    /// Global buffers returned to the caller.
    pub outputs: Vec<Buffer>,
    /// Zero-initialized global scratch buffers.
    pub temps: Vec<Buffer>,
}

impl Program {
    pub fn single(kernel: Kernel, inputs: Vec<Buffer>, outputs: Vec<Buffer>) -> Self {
        Program {
            kernels: vec![kernel],
            inputs,
            outputs,
            temps: vec![],
        }
    }

    pub fn globals(&self) -> impl Iterator<Item = &Buffer> {
        self.inputs.iter().chain(&self.outputs).chain(&self.temps)
    }

    pub fn map_kernels(&self, f: impl FnMut(&Kernel) -> Kernel) -> Program {
        Program {
            kernels: self.kernels.iter().map(f).collect(),
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn written_globals_lists_stores() {
        let k = Kernel {
            name: "copy".into(),
            grid_dim: 1,
            block_dim: 4,
            params: vec![
                Buffer::new("A", Scope::Global, &[4], DType::I32),
                Buffer::new("B", Scope::Global, &[4], DType::I32),
            ],
            shared: vec![],
            locals: vec![],
            body: Stmt::store(
                "B",
                vec![Expr::var(THREAD_IDX)],
                Expr::load("A", vec![Expr::var(THREAD_IDX)]),
            ),
        };
        assert_eq!(k.written_globals(), vec!["B".to_string()]);
    }
}
