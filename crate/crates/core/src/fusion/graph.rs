//! Operator-level graphs, the input format of the `fuse` command.

use serde::{Deserialize, Serialize};

use crate::compute_ir::{BatchNormParams, Combiner, ComputeDag, DagBuilder};
use crate::expr::Expr;
use crate::tensor::DType;

use super::FusionError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum OpSpec {
    /// Two inputs: `[m, k]` and `[k, n]`.
    Matmul,
    /// Image `[n, c, h, w]` and filter `[f, c, kh, kw]`.
    Conv2d { stride: usize, pad: usize },
    BatchNorm {
        gamma: Vec<f32>,
        beta: Vec<f32>,
        mean: Vec<f32>,
        var: Vec<f32>,
        eps: f32,
    },
    Relu,
    Scale { factor: f32 },
    Add,
    Reshape { shape: Vec<usize> },
    Transpose { perm: Vec<usize> },
    Reduce { dims: Vec<usize>, combiner: Combiner },
}

impl OpSpec {
    fn arity(&self) -> usize {
        match self {
            OpSpec::Matmul | OpSpec::Conv2d { .. } | OpSpec::Add => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpNode {
    pub name: String,
    #[serde(flatten)]
    pub op: OpSpec,
    pub inputs: Vec<String>,
}

/// Operators over named tensors. Each operator may only read graph inputs
/// and operators listed before it, so the list order is a topological
/// order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpGraph {
    pub inputs: Vec<TensorDecl>,
    pub ops: Vec<OpNode>,
    pub outputs: Vec<String>,
}

impl OpGraph {
    /// Expands every operator into compute-DAG nodes. Conv2d expands to
    /// its im2col gather, filter flattening, matmul and reshape.
    pub fn to_dag(&self) -> Result<ComputeDag, FusionError> {
        let mut b = DagBuilder::new();
        let mut defined: Vec<&str> = Vec::new();
        for t in &self.inputs {
            if defined.contains(&t.name.as_str()) {
                return Err(FusionError::Graph(format!("`{}` defined twice", t.name)));
            }
            if t.shape.is_empty() || t.shape.contains(&0) {
                return Err(FusionError::Graph(format!("input `{}` has shape {:?}", t.name, t.shape)));
            }
            b.input(&t.name, &t.shape, t.dtype);
            defined.push(&t.name);
        }
        for op in &self.ops {
            if defined.contains(&op.name.as_str()) {
                return Err(FusionError::Graph(format!("`{}` defined twice", op.name)));
            }
            if op.inputs.len() != op.op.arity() {
                return Err(FusionError::Graph(format!(
                    "`{}` takes {} inputs, got {}",
                    op.name,
                    op.op.arity(),
                    op.inputs.len()
                )));
            }
            if let Some(x) = op.inputs.iter().find(|x| !defined.contains(&x.as_str())) {
                return Err(FusionError::Graph(format!(
                    "`{}` reads `{x}` before it is defined",
                    op.name
                )));
            }
            let x = op.inputs[0].as_str();
            let y = op.inputs.get(1).map(String::as_str).unwrap_or_default();
            if op.inputs.len() == 2 && b.dtype(x) != b.dtype(y) {
                return Err(FusionError::Graph(format!("`{}` mixes element types", op.name)));
            }
            let name = op.name.as_str();
            match &op.op {
                OpSpec::Matmul => {
                    b.matmul(name, x, y)?;
                }
                OpSpec::Conv2d { stride, pad } => {
                    b.conv2d(name, x, y, *stride, *pad)?;
                }
                OpSpec::BatchNorm {
                    gamma,
                    beta,
                    mean,
                    var,
                    eps,
                } => {
                    let n = gamma.len();
                    if beta.len() != n || mean.len() != n || var.len() != n {
                        return Err(FusionError::Graph(format!(
                            "`{name}` has parameter vectors of different lengths"
                        )));
                    }
                    let params = BatchNormParams {
                        gamma: gamma.clone(),
                        beta: beta.clone(),
                        mean: mean.clone(),
                        var: var.clone(),
                        eps: *eps,
                    };
                    b.batchnorm(name, x, &params)?;
                }
                OpSpec::Relu => {
                    b.relu(name, x);
                }
                OpSpec::Scale { factor } => {
                    let f = *factor;
                    b.elementwise(name, &[x], |a| a[0].clone() * Expr::float(f))?;
                }
                OpSpec::Add => {
                    b.elementwise(name, &[x, y], |a| a[0].clone() + a[1].clone())?;
                }
                OpSpec::Reshape { shape } => {
                    b.reshape(name, x, shape)?;
                }
                OpSpec::Transpose { perm } => {
                    b.transpose(name, x, perm)?;
                }
                OpSpec::Reduce { dims, combiner } => {
                    b.reduce(name, x, dims, *combiner)?;
                }
            }
            defined.push(&op.name);
        }
        if self.outputs.is_empty() {
            return Err(FusionError::Graph("no outputs".into()));
        }
        if let Some(o) = self.outputs.iter().find(|o| !self.ops.iter().any(|op| &op.name == *o)) {
            return Err(FusionError::Graph(format!("output `{o}` is not an operator")));
        }
        let outputs: Vec<&str> = self.outputs.iter().map(String::as_str).collect();
        Ok(b.build(&outputs)?)
    }
}
