//! Splicing prologues and epilogues into scheduled kernels.

use std::collections::HashMap;

use rustc_hash::FxHashSet;

use crate::compute_ir::{affine_terms, Axis, ComputeDag, NodeBody, OpKind};
use crate::expr::eval::eval_int;
use crate::expr::{simplify, ConstTable, Expr, Interval, Ranges, EPILOGUE_VALUE};
use crate::program_ir::{Buffer, Kernel, Program, Stmt};
use crate::scheduler::{as_dtype, global_buffer};

use super::FusionError;

/// Largest domain checked or inverted by enumeration.
const ENUMERATION_LIMIT: usize = 1 << 22;

/// Computes the elements of `tensor` from other tensors: the element at
/// `axes` is `value`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prologue {
    pub tensor: String,
    pub axes: Vec<String>,
    pub value: Expr,
    /// Global buffers `value` loads from.
    pub reads: Vec<Buffer>,
}

impl Prologue {
    pub fn new(tensor: &str, axes: &[&str], value: Expr, reads: Vec<Buffer>) -> Self {
        Prologue {
            tensor: tensor.to_string(),
            axes: axes.iter().map(|a| a.to_string()).collect(),
            value,
            reads,
        }
    }

    /// The definition of `tensor` with the nodes in `absorbed` inlined.
    pub fn from_dag(dag: &ComputeDag, tensor: &str, absorbed: &[String]) -> Result<Self, FusionError> {
        for name in absorbed.iter().map(String::as_str).chain([tensor]) {
            match dag.classify(name) {
                Some(k) if k.is_injective() => {}
                Some(_) => return Err(FusionError::NotInjective(name.to_string())),
                None => return Err(FusionError::Invalid(format!("`{name}` is not a computed node"))),
            }
        }
        let node = dag.node(tensor).expect("classified");
        let axes: Vec<String> = node.axes().iter().map(|a| a.name.clone()).collect();
        let idx: Vec<Expr> = axes.iter().map(Expr::var).collect();
        let value = dag.element(tensor, &idx).expect("reduction-free");
        let value = dag.inline(&value, &|t| absorbed.iter().any(|a| a == t));
        let reads = read_buffers(dag, &value)?;
        Ok(Prologue {
            tensor: tensor.to_string(),
            axes,
            value,
            reads,
        })
    }
}

/// Replaces each stored value `$y` at index `axes` of the fused tensor by
/// `value`, stored into `output` at `remap`.
#[derive(Clone, Debug, PartialEq)]
pub struct Epilogue {
    pub axes: Vec<String>,
    /// Uses [`EPILOGUE_VALUE`] for the stored value.
    pub value: Expr,
    pub output: Buffer,
    pub remap: Vec<Expr>,
    pub reads: Vec<Buffer>,
}

impl Epilogue {
    pub fn new(axes: &[&str], value: Expr, output: Buffer, remap: Vec<Expr>, reads: Vec<Buffer>) -> Self {
        Epilogue {
            axes: axes.iter().map(|a| a.to_string()).collect(),
            value,
            output,
            remap,
            reads,
        }
    }

    /// Composes a chain of bijective consumers of `source` into one
    /// epilogue whose output is the last node of `chain`.
    pub fn from_chain(dag: &ComputeDag, source: &str, chain: &[String]) -> Result<Self, FusionError> {
        let src = dag
            .node(source)
            .ok_or_else(|| FusionError::Invalid(format!("no node `{source}`")))?;
        let Some(last) = chain.last() else {
            return Err(FusionError::Invalid("empty epilogue chain".into()));
        };
        let axes: Vec<String> = (0..src.shape.len()).map(|d| format!("v{d}")).collect();
        let mut coords: Vec<Expr> = axes.iter().map(Expr::var).collect();
        let placeholder = Expr::load(EPILOGUE_VALUE, vec![]);
        let mut value = placeholder.clone();
        let mut cur = src;
        for name in chain {
            if dag.classify(name) != Some(OpKind::Bijective) {
                return Err(FusionError::NotBijective(name.clone()));
            }
            let node = dag.node(name).expect("classified");
            let NodeBody::Compute { axes: node_axes, value: def } = &node.body else {
                return Err(FusionError::NotBijective(name.clone()));
            };
            let sites: Vec<&[Expr]> = def
                .loads()
                .into_iter()
                .filter(|(t, _)| *t == cur.name)
                .map(|(_, i)| i)
                .collect();
            if sites.is_empty() || sites.iter().any(|s| *s != sites[0]) || node.size() != cur.size() {
                return Err(FusionError::NotBijective(name.clone()));
            }
            let next = invert(sites[0], node_axes, &cur.shape, &coords)?;
            let map: HashMap<String, Expr> = node_axes
                .iter()
                .zip(&next)
                .map(|(a, c)| (a.name.clone(), c.clone()))
                .collect();
            let prev = value.clone();
            let step = def.substitute(&map).replace_loads(&cur.name, &mut |_| prev.clone());
            let dtype_of = |t: &str| {
                if t == EPILOGUE_VALUE {
                    Some(src.dtype)
                } else {
                    dag.dtype_of(t)
                }
            };
            value = as_dtype(step, node.dtype, &dtype_of);
            coords = next;
            cur = node;
        }
        // Left unsimplified: the stores it is spliced into may sit behind
        // guards, and only the reductions keep them provably in bounds.
        let remap = coords;
        let value = value.replace_loads(EPILOGUE_VALUE, &mut |_| Expr::var(EPILOGUE_VALUE));
        let reads = read_buffers(dag, &value)?;
        Ok(Epilogue {
            axes,
            value,
            output: global_buffer(dag.node(last).expect("chain node")),
            remap,
            reads,
        })
    }
}

fn read_buffers(dag: &ComputeDag, value: &Expr) -> Result<Vec<Buffer>, FusionError> {
    let mut out: Vec<Buffer> = Vec::new();
    for (t, _) in value.loads() {
        if t == EPILOGUE_VALUE || out.iter().any(|b| b.name == t) {
            continue;
        }
        match dag.node(t) {
            Some(n) => out.push(global_buffer(n)),
            None => return Err(FusionError::Invalid(format!("unknown tensor `{t}`"))),
        }
    }
    Ok(out)
}

/// Row-major offset of `idx` in `shape`.
fn flatten(idx: &[Expr], shape: &[usize]) -> Expr {
    let mut it = idx.iter();
    let first = it.next().cloned().unwrap_or(Expr::Int(0));
    it.zip(&shape[1..]).fold(first, |acc, (i, d)| acc * *d as i64 + i.clone())
}

/// Coordinates `u` with `site(u) == v`, where `site` reads a tensor of
/// shape `xshape` and is one-to-one from the `axes` domain onto it.
fn invert(site: &[Expr], axes: &[Axis], xshape: &[usize], v: &[Expr]) -> Result<Vec<Expr>, FusionError> {
    let mut ranges = Ranges::new();
    for a in axes {
        ranges.insert(a.name.clone(), Interval::extent(a.extent));
    }
    let flat_site = flatten(site, xshape);
    let flat_v = flatten(v, xshape);
    let extent = |name: &str| axes.iter().find(|a| a.name == name).map(|a| a.extent);

    if let Some((mut terms, 0)) = affine_terms(&simplify(&flat_site, &ranges)) {
        terms.sort_by_key(|t| t.1);
        let mut radix = 1i64;
        let mut mixed_radix = true;
        for (var, c) in &terms {
            match extent(var) {
                Some(e) if *c == radix => radix *= e as i64,
                _ => mixed_radix = false,
            }
        }
        let total: usize = axes.iter().map(|a| a.extent).product();
        if mixed_radix && radix as usize == total {
            return Ok(axes
                .iter()
                .map(|a| match terms.iter().find(|t| t.0 == a.name) {
                    None => Expr::Int(0),
                    Some((_, c)) => {
                        let q = if *c == 1 { flat_v.clone() } else { flat_v.clone() / *c };
                        // reduced even on the leading axis so the remapped
                        // store stays provably in bounds
                        q % a.extent as i64
                    }
                })
                .collect());
        }
    }

    // Tabulated inverse of the flattened index map.
    let total: usize = axes.iter().map(|a| a.extent).product();
    if total > ENUMERATION_LIMIT {
        return Err(FusionError::Invalid(format!(
            "cannot invert an index map over {total} elements"
        )));
    }
    let mut table = vec![-1i64; total];
    let mut coords = vec![0i64; axes.len()];
    for u in 0..total {
        let mut rem = u;
        for d in (0..axes.len()).rev() {
            coords[d] = (rem % axes[d].extent) as i64;
            rem /= axes[d].extent;
        }
        let bindings: Vec<(&str, i64)> = axes.iter().map(|a| a.name.as_str()).zip(coords.iter().copied()).collect();
        let x = eval_int(&flat_site, &bindings).map_err(|e| FusionError::Invalid(e.to_string()))?;
        match usize::try_from(x).ok().and_then(|x| table.get_mut(x)) {
            Some(slot) if *slot < 0 => *slot = u as i64,
            _ => return Err(FusionError::Invalid("index map is not one-to-one".into())),
        }
    }
    let flat_u = Expr::table(ConstTable::ints(table), flat_v);
    let mut stride = total;
    Ok(axes
        .iter()
        .map(|a| {
            stride /= a.extent;
            (flat_u.clone() / stride as i64) % a.extent as i64
        })
        .collect())
}

fn check_vars(value: &Expr, allowed: &[&str], what: &str) -> Result<(), FusionError> {
    match value.free_vars().into_iter().find(|v| !allowed.contains(&v.as_str())) {
        Some(v) => Err(FusionError::Invalid(format!("{what} uses unbound variable `{v}`"))),
        None => Ok(()),
    }
}

fn check_reads(value: &Expr, reads: &[Buffer], what: &str) -> Result<(), FusionError> {
    for (t, idx) in value.loads() {
        match reads.iter().find(|b| b.name == t) {
            Some(b) if b.shape.len() == idx.len() => {}
            Some(_) => return Err(FusionError::Invalid(format!("{what} indexes `{t}` with the wrong rank"))),
            None => return Err(FusionError::Invalid(format!("{what} reads undeclared `{t}`"))),
        }
    }
    Ok(())
}

/// `var` occurs in a load or table index other than as the whole index.
fn in_composite_index(value: &Expr, var: &str) -> bool {
    let mut found = false;
    value.visit(&mut |e| {
        let idx: Vec<&Expr> = match e {
            Expr::Load(_, idx) => idx.iter().collect(),
            Expr::Table(_, i) => vec![&**i],
            _ => return,
        };
        found |= idx
            .iter()
            .any(|i| !matches!(i, Expr::Var(v) if v == var) && i.mentions_var(var));
    });
    found
}

fn add_params(params: &mut Vec<Buffer>, at: usize, extra: &[Buffer]) {
    let mut at = at;
    for b in extra {
        if !params.iter().any(|p| p.name == b.name) {
            params.insert(at, b.clone());
            at += 1;
        }
    }
}

fn reads_tensor(body: &Stmt, tensor: &str) -> bool {
    let mut found = false;
    body.walk(&mut |s| {
        for e in s.exprs() {
            found |= e.loads().iter().any(|(t, _)| *t == tensor);
        }
    });
    found
}

/// Replaces every load of `p.tensor` in `kernel` by the prologue
/// evaluated at the load's indices; the parameter list swaps the tensor
/// for the prologue's reads.
pub fn fuse_prologue(kernel: &Kernel, p: &Prologue) -> Result<Kernel, FusionError> {
    let added: Vec<&str> = p.reads.iter().map(|b| b.name.as_str()).collect();
    let kernel = &kernel.avoid_scratch_names(&added);
    let pos = kernel
        .params
        .iter()
        .position(|b| b.name == p.tensor)
        .ok_or_else(|| FusionError::MissingSplicePoint {
            kernel: kernel.name.clone(),
            tensor: p.tensor.clone(),
        })?;
    let param = &kernel.params[pos];
    if kernel.written_globals().contains(&p.tensor) {
        return Err(FusionError::Invalid(format!(
            "`{}` writes `{}`, which a prologue would replace",
            kernel.name, p.tensor
        )));
    }
    if p.axes.len() != param.shape.len() {
        return Err(FusionError::Invalid(format!(
            "prologue of rank {} for `{}` of rank {}",
            p.axes.len(),
            p.tensor,
            param.shape.len()
        )));
    }
    let axes: Vec<&str> = p.axes.iter().map(String::as_str).collect();
    check_vars(&p.value, &axes, "prologue")?;
    check_reads(&p.value, &p.reads, "prologue")?;
    let lookup = |t: &str| p.reads.iter().find(|b| b.name == t).map(|b| b.dtype);
    let value = as_dtype(p.value.clone(), param.dtype, &lookup);

    // Coordinates feeding composite indices are reduced modulo their
    // extent: equal wherever the original access was in bounds, and it
    // keeps the gathered indices provably in bounds.
    let wrap: Vec<bool> = p.axes.iter().map(|a| in_composite_index(&p.value, a)).collect();
    let body = kernel.body.map_exprs(&mut |e| {
        e.replace_loads(&p.tensor, &mut |idx| {
            let map: HashMap<String, Expr> = p
                .axes
                .iter()
                .zip(idx)
                .zip(&param.shape)
                .zip(&wrap)
                .map(|(((a, i), d), w)| {
                    let i = if *w && i.as_int().is_none() { i.clone() % *d as i64 } else { i.clone() };
                    (a.clone(), i)
                })
                .collect();
            value.substitute(&map)
        })
    });
    let mut params = kernel.params.clone();
    params.remove(pos);
    add_params(&mut params, pos, &p.reads);
    Ok(Kernel {
        params,
        body,
        ..kernel.clone()
    })
}

/// Every domain point of `from` lands on a distinct point of `to`.
fn check_remap(from: &Buffer, ep: &Epilogue) -> Result<(), FusionError> {
    let reject = |why: String| Err(FusionError::NotBijective(format!("{}: {why}", ep.output.name)));
    if ep.remap.len() != ep.output.shape.len() {
        return reject(format!("remap has {} indices", ep.remap.len()));
    }
    if from.size() != ep.output.size() {
        return reject(format!("{} elements remapped onto {}", from.size(), ep.output.size()));
    }
    if from.size() > ENUMERATION_LIMIT {
        return Ok(());
    }
    let mut seen: FxHashSet<usize> = FxHashSet::default();
    let mut coords = vec![0i64; from.shape.len()];
    for v in 0..from.size() {
        let mut rem = v;
        for d in (0..coords.len()).rev() {
            coords[d] = (rem % from.shape[d]) as i64;
            rem /= from.shape[d];
        }
        let bindings: Vec<(&str, i64)> = ep.axes.iter().map(String::as_str).zip(coords.iter().copied()).collect();
        let mut flat = 0usize;
        for (e, d) in ep.remap.iter().zip(&ep.output.shape) {
            let x = eval_int(e, &bindings).map_err(|e| FusionError::Invalid(e.to_string()))?;
            if x < 0 || x as usize >= *d {
                return reject(format!("{coords:?} maps outside {:?}", ep.output.shape));
            }
            flat = flat * d + x as usize;
        }
        if !seen.insert(flat) {
            return reject(format!("two points map onto the element {flat}"));
        }
    }
    Ok(())
}

/// Replaces every store of value `y` at `v` into `tensor` by a store of
/// the epilogue at `remap(v)` into the epilogue's output.
pub fn fuse_epilogue(kernel: &Kernel, tensor: &str, ep: &Epilogue) -> Result<Kernel, FusionError> {
    let added: Vec<&str> = ep.reads.iter().chain([&ep.output]).map(|b| b.name.as_str()).collect();
    let kernel = &kernel.avoid_scratch_names(&added);
    let pos = kernel
        .params
        .iter()
        .position(|b| b.name == tensor)
        .ok_or_else(|| FusionError::MissingSplicePoint {
            kernel: kernel.name.clone(),
            tensor: tensor.to_string(),
        })?;
    let src = kernel.params[pos].clone();
    if reads_tensor(&kernel.body, tensor) {
        return Err(FusionError::Invalid(format!(
            "`{}` reads `{tensor}`, which an epilogue would replace",
            kernel.name
        )));
    }
    if ep.axes.len() != src.shape.len() {
        return Err(FusionError::Invalid(format!(
            "epilogue of rank {} for `{tensor}` of rank {}",
            ep.axes.len(),
            src.shape.len()
        )));
    }
    let mut allowed: Vec<&str> = ep.axes.iter().map(String::as_str).collect();
    allowed.push(EPILOGUE_VALUE);
    check_vars(&ep.value, &allowed, "epilogue")?;
    check_reads(&ep.value, &ep.reads, "epilogue")?;
    for e in &ep.remap {
        check_vars(e, &allowed[..ep.axes.len()], "remap")?;
    }
    check_remap(&src, ep)?;

    let lookup = |t: &str| kernel.buffer(t).map(|b| b.dtype);
    let body = kernel.body.rewrite(&mut |s| match s {
        Stmt::Store { buffer, indices, value } if buffer == tensor => {
            let mut map: HashMap<String, Expr> = ep.axes.iter().cloned().zip(indices).collect();
            let remap: Vec<Expr> = ep.remap.iter().map(|e| e.substitute(&map)).collect();
            map.insert(EPILOGUE_VALUE.to_string(), as_dtype(value, src.dtype, &lookup));
            Stmt::store(&ep.output.name, remap, ep.value.substitute(&map))
        }
        other => other,
    });
    let mut params = kernel.params.clone();
    params[pos] = ep.output.clone();
    add_params(&mut params, pos, &ep.reads);
    Ok(Kernel {
        params,
        body,
        ..kernel.clone()
    })
}

fn add_inputs(p: &mut Program, reads: &[Buffer]) {
    for b in reads {
        if !p.globals().any(|g| g.name == b.name) {
            p.inputs.push(b.clone());
        }
    }
}

/// [`fuse_prologue`] on every kernel of `program` that reads the tensor.
pub fn fuse_prologue_program(program: &Program, p: &Prologue) -> Result<Program, FusionError> {
    let mut out = program.clone();
    let mut hit = false;
    for k in &mut out.kernels {
        if k.params.iter().any(|b| b.name == p.tensor) {
            *k = fuse_prologue(k, p)?;
            hit = true;
        }
    }
    if !hit {
        return Err(FusionError::MissingSplicePoint {
            kernel: "program".into(),
            tensor: p.tensor.clone(),
        });
    }
    out.inputs.retain(|b| b.name != p.tensor);
    add_inputs(&mut out, &p.reads);
    Ok(out)
}

/// [`fuse_epilogue`] on every kernel of `program` that writes the tensor,
/// which must be a program output.
pub fn fuse_epilogue_program(program: &Program, tensor: &str, ep: &Epilogue) -> Result<Program, FusionError> {
    let mut out = program.clone();
    let Some(slot) = out.outputs.iter().position(|b| b.name == tensor) else {
        return Err(FusionError::Invalid(format!("`{tensor}` is not a program output")));
    };
    for k in &mut out.kernels {
        if k.params.iter().any(|b| b.name == tensor) {
            *k = fuse_epilogue(k, tensor, ep)?;
        }
    }
    out.outputs[slot] = ep.output.clone();
    add_inputs(&mut out, &ep.reads);
    Ok(out)
}

