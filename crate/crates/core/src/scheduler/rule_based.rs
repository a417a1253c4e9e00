//! Rule-based scheduling: one grid-stride kernel per materialized node.

use std::collections::HashSet;

use crate::compute_ir::{Axis, ComputeDag, NodeBody, TensorNode};
use crate::expr::Expr;
use crate::program_ir::{fresh_name, Buffer, Kernel, Program, Scope, Stmt};
use crate::tensor::DType;

use super::matmul::grid_stride;
use super::{ScheduleError, MAX_INLINE_REDUCTION};

/// Threads per block of rule-based kernels.
pub const RULE_BLOCK_DIM: usize = 128;

/// Row-major coordinates of linear index `idx` in `shape`. Every
/// coordinate stays reduced modulo its extent so it is in bounds even
/// where `idx` is not.
pub(crate) fn unravel(idx: &str, shape: &[usize]) -> Vec<Expr> {
    if let [_] = shape {
        return vec![Expr::var(idx)];
    }
    let mut stride: usize = shape.iter().product();
    shape
        .iter()
        .map(|d| {
            stride /= d;
            let e = if stride == 1 {
                Expr::var(idx)
            } else {
                Expr::var(idx) / stride as i64
            };
            e % *d as i64
        })
        .collect()
}

/// Global buffers a body touches, in first-use order.
pub(crate) fn global_params(body: &Stmt, dag: &ComputeDag, locals: &[&str]) -> Vec<Buffer> {
    let mut names: Vec<String> = Vec::new();
    let mut add = |t: &str| {
        if !locals.contains(&t) && !names.iter().any(|n| n == t) {
            names.push(t.to_string());
        }
    };
    body.walk(&mut |s| {
        for e in s.exprs() {
            for (t, _) in e.loads() {
                add(t);
            }
        }
        if let Stmt::Store { buffer, .. } = s {
            add(buffer);
        }
    });
    names
        .iter()
        .filter_map(|n| dag.node(n))
        .map(global_buffer)
        .collect()
}

/// `value` converted to `dtype` when its static type differs.
pub(crate) fn as_dtype(value: Expr, dtype: DType, tensor: &dyn Fn(&str) -> Option<DType>) -> Expr {
    if value.static_dtype(tensor) == dtype {
        value
    } else {
        value.convert_to(dtype, tensor)
    }
}

pub(crate) fn global_buffer(n: &TensorNode) -> Buffer {
    Buffer::new(&n.name, Scope::Global, &n.shape, n.dtype)
}

fn reduce_extent(axes: &[Axis]) -> usize {
    axes.iter().map(|a| a.extent).product()
}

/// Schedules every node without templates. Outputs and reductions are
/// materialized; every other node is inlined into its consumers.
/// Reductions are sequential loops per output element, so they must be
/// small.
pub fn rule_based_schedule(dag: &ComputeDag) -> Result<Program, ScheduleError> {
    dag.validate()?;
    let mut materialized: HashSet<&str> = dag.outputs.iter().map(|s| s.as_str()).collect();
    for n in dag.computed() {
        if let NodeBody::Reduce { reduce_axes, .. } = &n.body {
            let extent = reduce_extent(reduce_axes);
            if extent > MAX_INLINE_REDUCTION {
                return Err(ScheduleError::TemplateRequired {
                    node: n.name.clone(),
                    extent,
                });
            }
            materialized.insert(&n.name);
        }
    }
    let inline = |t: &str| {
        !materialized.contains(t) && dag.node(t).is_some_and(|n| matches!(n.body, NodeBody::Compute { .. }))
    };

    let mut kernels = Vec::new();
    let mut temps = Vec::new();
    for node in dag.computed().filter(|n| materialized.contains(n.name.as_str())) {
        kernels.push(node_kernel(dag, node, &inline));
        if !dag.outputs.contains(&node.name) {
            temps.push(global_buffer(node));
        }
    }
    let buffers = |names: &[String]| -> Vec<Buffer> {
        names
            .iter()
            .filter_map(|n| dag.node(n))
            .map(global_buffer)
            .collect()
    };
    Ok(Program {
        kernels,
        inputs: buffers(&dag.inputs),
        outputs: buffers(&dag.outputs),
        temps,
    })
}

fn node_kernel(dag: &ComputeDag, node: &TensorNode, inline: &dyn Fn(&str) -> bool) -> Kernel {
    let coords = unravel("idx", &node.shape);
    let bind = |value: &Expr| {
        let map = node
            .axes()
            .iter()
            .zip(&coords)
            .map(|(a, c)| (a.name.clone(), c.clone()))
            .collect();
        dag.inline(&value.substitute(&map), inline)
    };
    let names: Vec<&str> = dag.nodes.iter().map(|n| n.name.as_str()).collect();
    let acc_name = fresh_name("acc", &names);
    let (body, locals) = match &node.body {
        NodeBody::Reduce {
            reduce_axes,
            combiner,
            value,
            ..
        } => {
            let acc = || Expr::load(&acc_name, vec![Expr::Int(0)]);
            let mut inner = Stmt::store(&acc_name, vec![Expr::Int(0)], combiner.apply(acc(), as_dtype(bind(value), node.dtype, &|t| dag.dtype_of(t))));
            for a in reduce_axes.iter().rev() {
                inner = Stmt::seq_for(&a.name, a.extent, inner);
            }
            let body = Stmt::block(vec![
                Stmt::store(&acc_name, vec![Expr::Int(0)], combiner.identity_expr(node.dtype)),
                inner,
                Stmt::store(&node.name, coords.clone(), acc()),
            ]);
            (body, vec![Buffer::new(&acc_name, Scope::Local, &[1], node.dtype)])
        }
        _ => {
            let value = bind(node.value().expect("computed node"));
            (Stmt::store(&node.name, coords.clone(), value), vec![])
        }
    };
    let (grid, body) = grid_stride(node.size(), "idx", body);
    Kernel {
        name: format!("{}_rule", node.name),
        grid_dim: grid,
        block_dim: RULE_BLOCK_DIM,
        params: global_params(&body, dag, &[acc_name.as_str()]),
        shared: vec![],
        locals,
        body,
    }
}
