//! Block-level tree reduction template.

use crate::compute_ir::{Combiner, ComputeDag, NodeBody};
use crate::expr::Expr;
use crate::mapping::TaskMapping;
use crate::program_ir::{fresh_name, Buffer, Kernel, Program, Scope, Stmt, BLOCK_IDX, THREAD_IDX};
use crate::tensor::DType;

use super::matmul::grid_stride;
use super::rule_based::{as_dtype, global_buffer, unravel};
use super::{ReduceConfig, ScheduleError};

/// A single reduction with its producers inlined into `value`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReduceSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub axes: Vec<String>,
    pub reduce_axes: Vec<(String, usize)>,
    pub combiner: Combiner,
    pub value: Expr,
    pub inputs: Vec<Buffer>,
}

impl ReduceSpec {
    pub fn from_dag(dag: &ComputeDag, node: &str) -> Result<ReduceSpec, ScheduleError> {
        let n = dag
            .node(node)
            .ok_or_else(|| ScheduleError::Unsupported(format!("no node `{node}`")))?;
        let NodeBody::Reduce {
            axes,
            reduce_axes,
            combiner,
            value,
        } = &n.body
        else {
            return Err(ScheduleError::Unsupported(format!("`{node}` is not a reduction")));
        };
        let value = dag.inline(value, &|t| {
            dag.node(t)
                .is_some_and(|p| matches!(p.body, NodeBody::Compute { .. }))
        });
        if let Some((t, _)) = value.loads().into_iter().find(|(t, _)| !dag.inputs.iter().any(|i| i == t)) {
            return Err(ScheduleError::Unsupported(format!(
                "`{node}` depends on reduction `{t}`"
            )));
        }
        let value = as_dtype(value, n.dtype, &|t| dag.dtype_of(t));
        Ok(ReduceSpec {
            name: n.name.clone(),
            shape: n.shape.clone(),
            dtype: n.dtype,
            axes: axes.iter().map(|a| a.name.clone()).collect(),
            reduce_axes: reduce_axes.iter().map(|a| (a.name.clone(), a.extent)).collect(),
            combiner: *combiner,
            value,
            inputs: dag
                .inputs
                .iter()
                .filter_map(|i| dag.node(i))
                .map(global_buffer)
                .collect(),
        })
    }

    pub fn reduce_extent(&self) -> usize {
        self.reduce_axes.iter().map(|(_, e)| e).product()
    }

    fn output(&self) -> Buffer {
        Buffer::new(&self.name, Scope::Global, &self.shape, self.dtype)
    }

    fn params(&self, body: &Stmt, extra: &[Buffer]) -> Vec<Buffer> {
        let mut names = Vec::new();
        body.walk(&mut |s| {
            for e in s.exprs() {
                for (t, _) in e.loads() {
                    if !names.contains(&t.to_string()) {
                        names.push(t.to_string());
                    }
                }
            }
            if let Stmt::Store { buffer, .. } = s {
                if !names.contains(buffer) {
                    names.push(buffer.clone());
                }
            }
        });
        names
            .iter()
            .filter_map(|n| {
                self.inputs
                    .iter()
                    .chain(extra)
                    .chain(std::iter::once(&self.output()))
                    .find(|b| &b.name == n)
                    .cloned()
            })
            .collect()
    }
}

/// `grid = outputs * parts`: each block folds a `1 / parts` chunk of one
/// output's reduction domain, strided across its threads, then combines
/// the per-thread values with a shared-memory tree. With several parts a
/// second kernel combines the partial values in part order.
pub fn reduce_template(spec: &ReduceSpec, cfg: &ReduceConfig) -> Result<Program, ScheduleError> {
    cfg.validate(1024)?;
    let t = cfg.threads_per_block;
    let parts = cfg.parts;
    let n_out: usize = spec.shape.iter().product();
    let total = spec.reduce_extent();
    let chunk = total.div_ceil(parts);
    let iters = chunk.div_ceil(t).max(1);
    let comb = spec.combiner;
    let partial_name = format!("{}_partial", spec.name);
    let mut taken: Vec<&str> = spec.inputs.iter().map(|b| b.name.as_str()).collect();
    taken.extend([spec.name.as_str(), partial_name.as_str()]);
    let acc_name = fresh_name("acc", &taken);
    let s_name = fresh_name("S", &taken);
    let acc = || Expr::load(&acc_name, vec![Expr::Int(0)]);

    let mut map = std::collections::HashMap::new();
    let out_coords = unravel("o", &spec.shape);
    for (a, c) in spec.axes.iter().zip(&out_coords) {
        map.insert(a.clone(), c.clone());
    }
    let red_shape: Vec<usize> = spec.reduce_axes.iter().map(|(_, e)| *e).collect();
    let red_coords = match red_shape[..] {
        // Keeps the index provably in bounds for chunks split unevenly.
        [d] => vec![Expr::var("rr") % d as i64],
        _ => unravel("rr", &red_shape),
    };
    for ((a, _), c) in spec.reduce_axes.iter().zip(red_coords) {
        map.insert(a.clone(), c);
    }
    let value = spec.value.substitute(&map);
    let rr = Expr::var("p") * chunk as i64 + Expr::var("r");
    let fold = Stmt::store(&acc_name, vec![Expr::Int(0)], comb.apply(acc(), value.substitute_var("rr", &rr)));
    let in_range = if chunk * parts == total {
        Expr::var("r").lt(chunk)
    } else {
        Expr::var("r").lt(chunk).and(rr.clone().lt(total))
    };
    let guarded = if iters * t == chunk && chunk * parts == total {
        fold
    } else {
        Stmt::if_then(in_range, fold)
    };
    let strided = TaskMapping::repeat(&[iters])?.compose(&TaskMapping::spatial(&[t])?)?;

    let tid = || Expr::var(THREAD_IDX);
    let shared = |i: Expr| Expr::load(&s_name, vec![i]);
    let mut stmts = vec![
        Stmt::store(&acc_name, vec![Expr::Int(0)], comb.identity_expr(spec.dtype)),
        Stmt::map_loop(strided, tid(), &["r"], guarded),
        Stmt::store(&s_name, vec![tid()], acc()),
        Stmt::Barrier,
    ];
    let mut s = t / 2;
    while s > 0 {
        stmts.push(Stmt::if_then(
            tid().lt(s),
            Stmt::store(
                &s_name,
                vec![tid()],
                comb.apply(shared(tid()), shared(tid() + s as i64)),
            ),
        ));
        stmts.push(Stmt::Barrier);
        s /= 2;
    }
    let partial = Buffer::new(
        partial_name.clone(),
        Scope::Global,
        &[n_out, parts],
        spec.dtype,
    );
    let write = if parts == 1 {
        Stmt::store(&spec.name, out_coords.clone(), shared(Expr::Int(0)))
    } else {
        Stmt::store(&partial.name, vec![Expr::var("o"), Expr::var("p")], shared(Expr::Int(0)))
    };
    stmts.push(Stmt::if_then(tid().eq_(0i64), write));
    let body = Stmt::map_loop(
        TaskMapping::spatial(&[n_out, parts])?,
        Expr::var(BLOCK_IDX),
        &["o", "p"],
        Stmt::block(stmts),
    );
    let main = Kernel {
        name: format!("{}_reduce", spec.name),
        grid_dim: n_out * parts,
        block_dim: t,
        params: spec.params(&body, std::slice::from_ref(&partial)),
        shared: vec![Buffer::new(&s_name, Scope::Shared, &[t], spec.dtype)],
        locals: vec![Buffer::new(&acc_name, Scope::Local, &[1], spec.dtype)],
        body,
    };
    let mut program = Program {
        kernels: vec![main],
        inputs: spec.inputs.clone(),
        outputs: vec![spec.output()],
        temps: vec![],
    };
    if parts > 1 {
        let mut sum = Expr::load(&partial.name, vec![Expr::var("o"), Expr::Int(0)]);
        for p in 1..parts {
            sum = comb.apply(sum, Expr::load(&partial.name, vec![Expr::var("o"), Expr::Int(p as i64)]));
        }
        let (grid, body) = grid_stride(n_out, "o", Stmt::store(&spec.name, out_coords, sum));
        program.kernels.push(Kernel {
            name: format!("{}_combine", spec.name),
            grid_dim: grid,
            block_dim: 128,
            params: vec![partial.clone(), spec.output()],
            shared: vec![],
            locals: vec![],
            body,
        });
        program.temps.push(partial);
    }
    Ok(program)
}
