//! Partitioning around anchor operators and fusion of their neighbours
//! into already scheduled kernels.

mod compile;
mod graph;
mod rewrite;

pub use compile::{compile_dag, compile_subgraph, sub_dag, CompileOptions};
pub use graph::{OpGraph, OpNode, OpSpec, TensorDecl};
pub use rewrite::{fuse_epilogue, fuse_epilogue_program, fuse_prologue, fuse_prologue_program, Epilogue, Prologue};

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compute_ir::{ComputeDag, DagError, NodeBody, OpKind};
use crate::scheduler::ScheduleError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("kernel `{kernel}` has no global parameter `{tensor}`")]
    MissingSplicePoint { kernel: String, tensor: String },
    #[error("`{0}` is not injective and cannot be fused as a prologue")]
    NotInjective(String),
    #[error("`{0}` is not bijective and cannot be fused as an epilogue")]
    NotBijective(String),
    #[error("invalid fusion: {0}")]
    Invalid(String),
    #[error("invalid graph: {0}")]
    Graph(String),
    #[error(transparent)]
    Dag(#[from] DagError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

/// A group of DAG nodes compiled together. With an anchor, `prologues`
/// maps each fused anchor input to the producer nodes computed inline in
/// its place and `epilogue` lists the consumer chain, in order, whose last
/// node receives the anchor's results. Without one, the nodes are
/// scheduled by rules.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusedSubgraph {
    pub anchor: Option<String>,
    pub prologues: BTreeMap<String, Vec<String>>,
    pub epilogue: Vec<String>,
    /// Every member, in DAG order.
    pub nodes: Vec<String>,
}

impl FusedSubgraph {
    fn contains(&self, name: &str) -> bool {
        self.nodes.iter().any(|n| n == name)
    }

    /// Tensors read by members and produced elsewhere, in first-use order.
    pub fn inputs(&self, dag: &ComputeDag) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for n in &self.nodes {
            for r in dag.node(n).map(|n| n.reads()).unwrap_or_default() {
                if !self.contains(&r) && !out.contains(&r) {
                    out.push(r);
                }
            }
        }
        out
    }

    /// Members that are DAG outputs or read outside the subgraph.
    pub fn outputs(&self, dag: &ComputeDag) -> Vec<String> {
        self.nodes
            .iter()
            .filter(|n| {
                dag.outputs.contains(n)
                    || dag
                        .consumers(n)
                        .iter()
                        .any(|c| !self.contains(&dag.nodes[*c].name))
            })
            .cloned()
            .collect()
    }
}

fn is_reduction(dag: &ComputeDag, name: &str) -> bool {
    dag.node(name)
        .is_some_and(|n| matches!(n.body, NodeBody::Reduce { .. }))
}

/// Distinct computed consumers of `name`.
fn consumer_names(dag: &ComputeDag, name: &str) -> Vec<String> {
    dag.consumers(name)
        .into_iter()
        .map(|i| dag.nodes[i].name.clone())
        .collect()
}

/// Groups the DAG around its reductions. Each reduction, in DAG order,
/// becomes an anchor; it absorbs producers used by nothing else as
/// prologues and a chain of single-use bijective consumers as its
/// epilogue. Remaining runs of nodes form anchor-free subgraphs.
/// Subgraphs come back in a valid execution order and every computed node
/// appears in exactly one.
pub fn partition(dag: &ComputeDag) -> Vec<FusedSubgraph> {
    let mut owner: HashMap<String, usize> = HashMap::new();
    let mut anchored: Vec<FusedSubgraph> = Vec::new();
    for node in dag.computed() {
        if !matches!(node.body, NodeBody::Reduce { .. }) {
            continue;
        }
        let id = anchored.len();
        owner.insert(node.name.clone(), id);
        let mut prologues = BTreeMap::new();
        for input in node.reads() {
            let mut absorbed = Vec::new();
            if claim_producer(dag, &input, &node.name, &mut owner, id, &mut absorbed) {
                absorbed.sort_by_key(|n| dag.index_of(n));
                absorbed.retain(|n| n != &input);
                prologues.insert(input, absorbed);
            }
        }
        let mut epilogue = Vec::new();
        let mut cur = node.name.clone();
        while !dag.outputs.contains(&cur) {
            let [next] = &consumer_names(dag, &cur)[..] else {
                break;
            };
            let fusible = !owner.contains_key(next)
                && dag.classify(next) == Some(OpKind::Bijective)
                && dag.node(next).is_some_and(|n| {
                    n.size() == dag.node(&cur).map_or(0, |c| c.size())
                        && n.reads()
                            .iter()
                            .all(|r| *r == cur || dag.node(r).is_some_and(|p| p.is_input()))
                });
            if !fusible {
                break;
            }
            owner.insert(next.clone(), id);
            epilogue.push(next.clone());
            cur = next.clone();
        }
        anchored.push(FusedSubgraph {
            anchor: Some(node.name.clone()),
            prologues,
            epilogue,
            nodes: vec![],
        });
    }
    for (name, id) in &owner {
        anchored[*id].nodes.push(name.clone());
    }
    for g in &mut anchored {
        g.nodes.sort_by_key(|n| dag.index_of(n));
    }

    let mut out: Vec<FusedSubgraph> = Vec::new();
    for node in dag.computed() {
        match owner.get(&node.name) {
            Some(id) if anchored[*id].anchor.as_deref() == Some(node.name.as_str()) => {
                out.push(anchored[*id].clone());
            }
            Some(_) => {}
            None => match out.last_mut() {
                Some(g) if g.anchor.is_none() => g.nodes.push(node.name.clone()),
                _ => out.push(FusedSubgraph {
                    anchor: None,
                    prologues: BTreeMap::new(),
                    epilogue: vec![],
                    nodes: vec![node.name.clone()],
                }),
            },
        }
    }
    out
}

/// Claims `name` and, recursively, its own exclusive producers for the
/// prologue of anchor `id` when `consumer` is its only reader.
fn claim_producer(
    dag: &ComputeDag,
    name: &str,
    consumer: &str,
    owner: &mut HashMap<String, usize>,
    id: usize,
    absorbed: &mut Vec<String>,
) -> bool {
    let Some(node) = dag.node(name) else {
        return false;
    };
    if node.is_input()
        || is_reduction(dag, name)
        || dag.outputs.iter().any(|o| o == name)
        || owner.contains_key(name)
        || consumer_names(dag, name) != [consumer]
    {
        return false;
    }
    owner.insert(name.to_string(), id);
    absorbed.push(name.to_string());
    for r in node.reads() {
        claim_producer(dag, &r, name, owner, id, absorbed);
    }
    true
}

/// One subgraph per computed node, without any fusion.
pub fn partition_unfused(dag: &ComputeDag) -> Vec<FusedSubgraph> {
    dag.computed()
        .map(|n| FusedSubgraph {
            anchor: is_reduction(dag, &n.name).then(|| n.name.clone()),
            prologues: BTreeMap::new(),
            epilogue: vec![],
            nodes: vec![n.name.clone()],
        })
        .collect()
}

#[cfg(test)]
mod tests;
