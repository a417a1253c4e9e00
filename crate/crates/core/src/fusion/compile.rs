//! Whole-DAG compilation: partition, schedule each subgraph, fuse.

use crate::compute_ir::{ComputeDag, NodeBody, TensorNode};
use crate::program_ir::Program;
use crate::scheduler::{
    global_buffer, matmul_template, reduce_template, rule_based_schedule, space_kind, MatmulSpec,
    ReduceSpec, ScheduleConfig, ScheduleError,
};

use super::{
    fuse_epilogue_program, fuse_prologue_program, partition, partition_unfused, Epilogue, FusedSubgraph,
    FusionError, Prologue,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompileOptions {
    pub fuse: bool,
    /// Used by every anchor of the matching kind; other anchors use the
    /// default configuration of their kind.
    pub config: Option<ScheduleConfig>,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions {
            fuse: true,
            config: None,
        }
    }
}

/// The members of `sg` as a standalone DAG whose inputs are the tensors
/// it reads from elsewhere.
pub fn sub_dag(dag: &ComputeDag, sg: &FusedSubgraph) -> ComputeDag {
    let inputs = sg.inputs(dag);
    let mut nodes: Vec<TensorNode> = inputs
        .iter()
        .filter_map(|n| dag.node(n))
        .map(|n| TensorNode {
            body: NodeBody::Input,
            ..n.clone()
        })
        .collect();
    nodes.extend(sg.nodes.iter().filter_map(|n| dag.node(n)).cloned());
    ComputeDag {
        nodes,
        inputs,
        outputs: sg.outputs(dag),
    }
}

/// Schedules one subgraph: rule-based without an anchor, otherwise the
/// anchor's template with prologues and epilogue fused into it.
pub fn compile_subgraph(
    dag: &ComputeDag,
    sg: &FusedSubgraph,
    cfg: Option<&ScheduleConfig>,
) -> Result<Program, FusionError> {
    let sub = sub_dag(dag, sg);
    let Some(anchor) = &sg.anchor else {
        return Ok(rule_based_schedule(&sub)?);
    };
    let kind = space_kind(&sub, anchor)
        .ok_or_else(|| FusionError::Invalid(format!("anchor `{anchor}` is not a reduction")))?;
    let cfg = match cfg {
        Some(c) if c.kind() == kind => *c,
        _ => ScheduleConfig::default_for(kind),
    };
    let mut program = match cfg {
        ScheduleConfig::Matmul(c) => {
            let spec = MatmulSpec::from_node(&sub, anchor).expect("matmul anchor");
            let mut p = matmul_template(&spec, &c)?;
            for (tensor, absorbed) in &sg.prologues {
                p = fuse_prologue_program(&p, &Prologue::from_dag(&sub, tensor, absorbed)?)?;
            }
            p
        }
        // producers are inlined into the reduced value directly
        ScheduleConfig::Reduce(c) => reduce_template(&ReduceSpec::from_dag(&sub, anchor)?, &c)?,
    };
    if !sg.epilogue.is_empty() {
        let ep = Epilogue::from_chain(&sub, anchor, &sg.epilogue)?;
        program = fuse_epilogue_program(&program, anchor, &ep)?;
    }
    Ok(program)
}

/// Compiles a DAG into one program: subgraphs in execution order, with
/// tensors passed between them held in temporaries.
pub fn compile_dag(dag: &ComputeDag, opts: &CompileOptions) -> Result<Program, FusionError> {
    dag.validate()?;
    if dag.outputs.iter().any(|o| dag.node(o).is_none_or(|n| n.is_input())) {
        return Err(FusionError::Schedule(ScheduleError::Unsupported(
            "every output must be a computed node".into(),
        )));
    }
    let groups = if opts.fuse {
        partition(dag)
    } else {
        partition_unfused(dag)
    };
    let buffers = |names: &[String]| {
        names
            .iter()
            .filter_map(|n| dag.node(n))
            .map(global_buffer)
            .collect::<Vec<_>>()
    };
    let mut out = Program {
        kernels: vec![],
        inputs: buffers(&dag.inputs),
        outputs: buffers(&dag.outputs),
        temps: vec![],
    };
    for sg in &groups {
        let p = compile_subgraph(dag, sg, opts.config.as_ref())?;
        out.kernels.extend(p.kernels);
        out.temps.extend(p.temps);
        for o in p.outputs {
            if !dag.outputs.contains(&o.name) {
                out.temps.push(o);
            }
        }
    }
    Ok(out)
}
