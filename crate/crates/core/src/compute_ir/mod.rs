//! Operator mathematics as a DAG of grid computations and reductions.

mod builders;
mod classify;
mod reference;

pub use builders::{
    batchnorm_inference, conv2d_im2col, elementwise, matmul, reduce, reshape, transpose,
    BatchNormParams, ConvGeometry, DagBuilder,
};
pub use classify::{classify, OpKind};
pub(crate) use classify::affine_terms;
pub use reference::{reference_eval, reference_eval_all, reference_eval_points};

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{interval, BinOp, EvalError, Expr, Interval, Ranges, Value};
pub use crate::tensor::DType;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DagError {
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("node `{node}` reads `{tensor}`, which is not defined before it")]
    UnknownTensor { node: String, tensor: String },
    #[error("node `{node}` accesses `{tensor}` with {got} indices, expected {expected}")]
    Arity {
        node: String,
        tensor: String,
        got: usize,
        expected: usize,
    },
    #[error("node `{node}` uses undeclared axis `{axis}`")]
    UndeclaredAxis { node: String, axis: String },
    #[error("node `{node}`: {message}")]
    Invalid { node: String, message: String },
    #[error("node `{node}` may access `{tensor}` dimension {dim} at {lo}..={hi}, extent {extent}")]
    OutOfBounds {
        node: String,
        tensor: String,
        dim: usize,
        lo: i64,
        hi: i64,
        extent: usize,
    },
    #[error("unknown output `{0}`")]
    UnknownOutput(String),
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("input mismatch: {0}")]
    InputMismatch(String),
    #[error("evaluation failed: {0}")]
    Eval(#[from] EvalError),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Axis {
    pub name: String,
    pub extent: usize,
}

impl Axis {
    pub fn new(name: impl Into<String>, extent: usize) -> Self {
        Axis {
            name: name.into(),
            extent,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combiner {
    Sum,
    Max,
    Min,
}

impl Combiner {
    pub fn identity(self, dtype: DType) -> Value {
        match (self, dtype) {
            (Combiner::Sum, DType::I32) => Value::I(0),
            (Combiner::Sum, DType::F32) => Value::F(0.0),
            (Combiner::Max, DType::I32) => Value::I(i32::MIN as i64),
            (Combiner::Max, DType::F32) => Value::F(f32::NEG_INFINITY),
            (Combiner::Min, DType::I32) => Value::I(i32::MAX as i64),
            (Combiner::Min, DType::F32) => Value::F(f32::INFINITY),
        }
    }

    pub fn identity_expr(self, dtype: DType) -> Expr {
        match self.identity(dtype) {
            Value::I(v) => Expr::Int(v),
            Value::F(v) => Expr::float(v),
        }
    }

    /// `acc ⊕ v` as an expression.
    pub fn apply(self, acc: Expr, v: Expr) -> Expr {
        match self {
            Combiner::Sum => acc + v,
            Combiner::Max => acc.max(v),
            Combiner::Min => acc.min(v),
        }
    }

    pub fn binop(self) -> BinOp {
        match self {
            Combiner::Sum => BinOp::Add,
            Combiner::Max => BinOp::Max,
            Combiner::Min => BinOp::Min,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeBody {
    Input,
    Compute {
        axes: Vec<Axis>,
        value: Expr,
    },
    Reduce {
        axes: Vec<Axis>,
        reduce_axes: Vec<Axis>,
        combiner: Combiner,
        value: Expr,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorNode {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub body: NodeBody,
}

impl TensorNode {
    pub fn is_input(&self) -> bool {
        matches!(self.body, NodeBody::Input)
    }

    pub fn axes(&self) -> &[Axis] {
        match &self.body {
            NodeBody::Input => &[],
            NodeBody::Compute { axes, .. } | NodeBody::Reduce { axes, .. } => axes,
        }
    }

    pub fn value(&self) -> Option<&Expr> {
        match &self.body {
            NodeBody::Input => None,
            NodeBody::Compute { value, .. } | NodeBody::Reduce { value, .. } => Some(value),
        }
    }

    pub fn value_mut(&mut self) -> Option<&mut Expr> {
        match &mut self.body {
            NodeBody::Input => None,
            NodeBody::Compute { value, .. } | NodeBody::Reduce { value, .. } => Some(value),
        }
    }

    /// Names of the tensors this node reads, in first-use order.
    pub fn reads(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        if let Some(v) = self.value() {
            for (t, _) in v.loads() {
                if !out.iter().any(|o| o == t) {
                    out.push(t.to_string());
                }
            }
        }
        out
    }

    pub fn size(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComputeDag {
    pub nodes: Vec<TensorNode>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl ComputeDag {
    pub fn node(&self, name: &str) -> Option<&TensorNode> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Indices of the computed nodes that read `name`.
    pub fn consumers(&self, name: &str) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.reads().iter().any(|r| r == name))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn computed(&self) -> impl Iterator<Item = &TensorNode> {
        self.nodes.iter().filter(|n| !n.is_input())
    }

    pub fn dtype_of(&self, name: &str) -> Option<DType> {
        self.node(name).map(|n| n.dtype)
    }

    /// Value of the reduction-free node `name` at `indices`, converted to
    /// the node's element type.
    pub fn element(&self, name: &str, indices: &[Expr]) -> Option<Expr> {
        let node = self.node(name)?;
        let NodeBody::Compute { axes, value } = &node.body else {
            return None;
        };
        let map = axes
            .iter()
            .zip(indices)
            .map(|(a, i)| (a.name.clone(), i.clone()))
            .collect();
        Some(
            value
                .substitute(&map)
                .convert_to(node.dtype, &|t| self.dtype_of(t)),
        )
    }

    /// Replaces loads of reduction-free nodes selected by `inline` with
    /// their defining expressions, transitively.
    pub fn inline(&self, e: &Expr, inline: &dyn Fn(&str) -> bool) -> Expr {
        e.rewrite(&mut |x| match &x {
            Expr::Load(t, idx) if inline(t) => match self.element(t, idx) {
                Some(v) => self.inline(&v, inline),
                None => x,
            },
            _ => x,
        })
    }

    pub fn classify(&self, name: &str) -> Option<OpKind> {
        let node = self.node(name)?;
        if node.is_input() {
            return None;
        }
        Some(classify(node, &|t| self.node(t).map(|n| n.shape.clone())))
    }

    pub fn validate(&self) -> Result<(), DagError> {
        let mut seen: Vec<&TensorNode> = Vec::new();
        let mut names = HashSet::new();
        for node in &self.nodes {
            if !names.insert(node.name.as_str()) {
                return Err(DagError::DuplicateName(node.name.clone()));
            }
            if node.shape.contains(&0) {
                return Err(DagError::Invalid {
                    node: node.name.clone(),
                    message: format!("zero extent in shape {:?}", node.shape),
                });
            }
            match &node.body {
                NodeBody::Input => {
                    if !self.inputs.contains(&node.name) {
                        return Err(DagError::Invalid {
                            node: node.name.clone(),
                            message: "placeholder not listed among inputs".into(),
                        });
                    }
                }
                NodeBody::Compute { axes, value } => {
                    validate_computed(node, axes, &[], value, &seen)?;
                }
                NodeBody::Reduce {
                    axes,
                    reduce_axes,
                    value,
                    ..
                } => {
                    if reduce_axes.is_empty() {
                        return Err(DagError::Invalid {
                            node: node.name.clone(),
                            message: "reduction without reduce axes".into(),
                        });
                    }
                    validate_computed(node, axes, reduce_axes, value, &seen)?;
                }
            }
            seen.push(node);
        }
        for i in &self.inputs {
            if !self.node(i).is_some_and(|n| n.is_input()) {
                return Err(DagError::UnknownOutput(i.clone()));
            }
        }
        for o in &self.outputs {
            if self.node(o).is_none() {
                return Err(DagError::UnknownOutput(o.clone()));
            }
        }
        Ok(())
    }
}

fn validate_computed(
    node: &TensorNode,
    axes: &[Axis],
    reduce_axes: &[Axis],
    value: &Expr,
    earlier: &[&TensorNode],
) -> Result<(), DagError> {
    let invalid = |message: String| DagError::Invalid {
        node: node.name.clone(),
        message,
    };
    let extents: Vec<usize> = axes.iter().map(|a| a.extent).collect();
    if extents != node.shape {
        return Err(invalid(format!(
            "axis extents {extents:?} differ from shape {:?}",
            node.shape
        )));
    }
    let mut ranges = Ranges::new();
    for a in axes.iter().chain(reduce_axes) {
        if a.extent == 0 {
            return Err(invalid(format!("axis `{}` has zero extent", a.name)));
        }
        if ranges.insert(a.name.clone(), Interval::extent(a.extent)).is_some() {
            return Err(invalid(format!("axis `{}` declared twice", a.name)));
        }
    }
    for v in value.free_vars() {
        if !ranges.contains_key(&v) {
            return Err(DagError::UndeclaredAxis {
                node: node.name.clone(),
                axis: v,
            });
        }
    }
    let mut err = None;
    value.visit(&mut |e| {
        if err.is_some() {
            return;
        }
        if let Expr::Binary(BinOp::Div | BinOp::Mod, _, d) = e {
            if d.as_int() == Some(0) {
                err = Some(invalid("division by constant zero".into()));
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    for (t, idx) in value.loads() {
        let Some(src) = earlier.iter().find(|n| n.name == t) else {
            return Err(DagError::UnknownTensor {
                node: node.name.clone(),
                tensor: t.to_string(),
            });
        };
        if idx.len() != src.shape.len() {
            return Err(DagError::Arity {
                node: node.name.clone(),
                tensor: t.to_string(),
                got: idx.len(),
                expected: src.shape.len(),
            });
        }
        for (dim, (i, d)) in idx.iter().zip(&src.shape).enumerate() {
            let r = interval(i, &ranges);
            if !r.within(0, *d as i64 - 1) {
                return Err(DagError::OutOfBounds {
                    node: node.name.clone(),
                    tensor: t.to_string(),
                    dim,
                    lo: r.lo,
                    hi: r.hi,
                    extent: *d,
                });
            }
        }
    }
    Ok(())
}

/// Conventional axis names for a computed tensor of the given rank.
pub fn axis_names(rank: usize) -> Vec<String> {
    const NAMES: [&str; 4] = ["i", "j", "k", "l"];
    (0..rank)
        .map(|d| {
            if rank <= NAMES.len() {
                NAMES[d].to_string()
            } else {
                format!("i{d}")
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_catches_bad_dags() {
        let mut b = DagBuilder::new();
        let a = b.input("A", &[4], DType::I32);
        b.compute(
            "B",
            vec![Axis::new("i", 4)],
            DType::I32,
            Expr::load(&a, vec![Expr::var("i") + 1i64]),
        );
        assert!(matches!(
            b.build(&["B"]),
            Err(DagError::OutOfBounds { dim: 0, hi: 4, .. })
        ));

        let mut b = DagBuilder::new();
        b.input("A", &[4], DType::I32);
        b.compute("B", vec![Axis::new("i", 4)], DType::I32, Expr::load("Z", vec![Expr::var("i")]));
        assert!(matches!(b.build(&["B"]), Err(DagError::UnknownTensor { .. })));

        let mut b = DagBuilder::new();
        b.input("A", &[4], DType::I32);
        b.compute("B", vec![Axis::new("i", 4)], DType::I32, Expr::load("A", vec![Expr::var("q")]));
        assert!(matches!(b.build(&["B"]), Err(DagError::UndeclaredAxis { .. })));

        let mut b = DagBuilder::new();
        b.input("A", &[4], DType::I32);
        b.compute("B", vec![Axis::new("i", 4)], DType::I32, Expr::var("i") / 0i64);
        assert!(matches!(b.build(&["B"]), Err(DagError::Invalid { .. })));
    }

    #[test]
    fn dag_json_round_trip() {
        let dag = matmul(2, 3, 4, DType::F32);
        let text = serde_json::to_string(&dag).unwrap();
        let back: ComputeDag = serde_json::from_str(&text).unwrap();
        assert_eq!(back, dag);
        back.validate().unwrap();
    }
}
