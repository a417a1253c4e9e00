//! Naive element-by-element interpreter used as the correctness oracle.

use std::collections::{BTreeMap, HashMap};

use crate::expr::eval::{apply_binary, apply_unary, int_of, select_value, table_lookup};
use crate::expr::{BinOp, ConstTable, EvalError, Expr, UnaryOp, Value};
use crate::tensor::{Tensor, TensorData};

use super::{Combiner, ComputeDag, DType, DagError, NodeBody};

/// Expression with variables resolved to slots and tensors to indices.
enum Resolved {
    Int(i64),
    Float(f32),
    Var(usize),
    Binary(BinOp, Box<Resolved>, Box<Resolved>),
    Unary(UnaryOp, Box<Resolved>),
    Select(Box<Resolved>, Box<Resolved>, Box<Resolved>),
    Load(usize, Vec<Resolved>),
    Table(ConstTable, Box<Resolved>),
}

fn resolve(e: &Expr, vars: &[&str], tensors: &dyn Fn(&str) -> usize) -> Result<Resolved, DagError> {
    let r = |x: &Expr| resolve(x, vars, tensors).map(Box::new);
    Ok(match e {
        Expr::Int(v) => Resolved::Int(*v),
        Expr::Float(v) => Resolved::Float(v.0),
        Expr::Var(v) => Resolved::Var(
            vars.iter()
                .position(|n| n == v)
                .ok_or_else(|| EvalError::UnboundVariable(v.clone()))?,
        ),
        Expr::Binary(op, a, b) => Resolved::Binary(*op, r(a)?, r(b)?),
        Expr::Unary(op, a) => Resolved::Unary(*op, r(a)?),
        Expr::Select(c, a, b) => Resolved::Select(r(c)?, r(a)?, r(b)?),
        Expr::Load(t, idx) => Resolved::Load(
            tensors(t),
            idx.iter()
                .map(|i| resolve(i, vars, tensors))
                .collect::<Result<_, _>>()?,
        ),
        Expr::Table(t, i) => Resolved::Table(t.clone(), r(i)?),
    })
}

fn element(t: &Tensor, coords: &[i64]) -> Result<Value, EvalError> {
    let mut flat = 0usize;
    for (c, d) in coords.iter().zip(&t.shape) {
        if *c < 0 || *c as usize >= *d {
            return Err(EvalError::Load(format!(
                "index {coords:?} out of bounds for shape {:?}",
                t.shape
            )));
        }
        flat = flat * d + *c as usize;
    }
    Ok(match &t.data {
        TensorData::I32(v) => Value::I(v[flat] as i64),
        TensorData::F32(v) => Value::F(v[flat]),
    })
}

impl Resolved {
    fn eval(&self, env: &[i64], tensors: &[&Tensor]) -> Result<Value, EvalError> {
        Ok(match self {
            Resolved::Int(v) => Value::I(*v),
            Resolved::Float(v) => Value::F(*v),
            Resolved::Var(s) => Value::I(env[*s]),
            Resolved::Binary(op, a, b) => {
                apply_binary(*op, a.eval(env, tensors)?, b.eval(env, tensors)?)?
            }
            Resolved::Unary(op, a) => apply_unary(*op, a.eval(env, tensors)?),
            Resolved::Select(c, a, b) => {
                let c = c.eval(env, tensors)?;
                let x = a.eval(env, tensors)?;
                let y = b.eval(env, tensors)?;
                select_value(c, x, y)
            }
            Resolved::Load(t, idx) => {
                let mut coords = [0i64; 8];
                let mut heap = Vec::new();
                let coords: &mut [i64] = if idx.len() <= 8 {
                    &mut coords[..idx.len()]
                } else {
                    heap.resize(idx.len(), 0);
                    &mut heap
                };
                for (slot, i) in coords.iter_mut().zip(idx) {
                    *slot = int_of(i.eval(env, tensors)?);
                }
                element(tensors[*t], coords)?
            }
            Resolved::Table(t, i) => table_lookup(t, int_of(i.eval(env, tensors)?))?,
        })
    }
}

/// Converts to the element type of the destination tensor.
pub(crate) fn convert(v: Value, dtype: DType) -> Value {
    match dtype {
        DType::I32 => Value::I(v.to_i32() as i64),
        DType::F32 => Value::F(v.as_f32()),
    }
}

pub(crate) fn combine(c: Combiner, acc: Value, v: Value, dtype: DType) -> Value {
    let r = apply_binary(c.binop(), acc, v).expect("combiners never divide");
    convert(r, dtype)
}

fn check_inputs(dag: &ComputeDag, inputs: &BTreeMap<String, Tensor>) -> Result<(), DagError> {
    for name in &dag.inputs {
        let node = dag.node(name).expect("validated");
        let t = inputs
            .get(name)
            .ok_or_else(|| DagError::InputMismatch(format!("missing input `{name}`")))?;
        if t.shape != node.shape || t.dtype() != node.dtype {
            return Err(DagError::InputMismatch(format!(
                "`{name}` expects {} {:?}, got {} {:?}",
                node.dtype,
                node.shape,
                t.dtype(),
                t.shape
            )));
        }
    }
    Ok(())
}

/// Evaluates every node; the result maps each tensor name (inputs
/// included) to its value.
pub fn reference_eval_all(
    dag: &ComputeDag,
    inputs: &BTreeMap<String, Tensor>,
) -> Result<BTreeMap<String, Tensor>, DagError> {
    dag.validate()?;
    check_inputs(dag, inputs)?;
    let mut values: Vec<Tensor> = Vec::with_capacity(dag.nodes.len());
    for node in &dag.nodes {
        let (axes, reduce_axes, combiner, value) = match &node.body {
            NodeBody::Input => {
                values.push(inputs[&node.name].clone());
                continue;
            }
            NodeBody::Compute { axes, value } => (axes, &[][..], None, value),
            NodeBody::Reduce {
                axes,
                reduce_axes,
                combiner,
                value,
            } => (axes, &reduce_axes[..], Some(*combiner), value),
        };
        let names: Vec<&str> = axes
            .iter()
            .chain(reduce_axes)
            .map(|a| a.name.as_str())
            .collect();
        let lookup = |t: &str| dag.index_of(t).expect("validated");
        let resolved = resolve(value, &names, &lookup)?;
        let refs: Vec<&Tensor> = values.iter().collect();
        let size = node.size();
        let mut out = Tensor::zeros(&node.shape, node.dtype);
        let mut env = vec![0i64; names.len()];
        let n_out = axes.len();
        let red_extents: Vec<usize> = reduce_axes.iter().map(|a| a.extent).collect();
        let red_total: usize = red_extents.iter().product();
        for o in 0..size {
            let mut rem = o;
            for d in (0..n_out).rev() {
                env[d] = (rem % axes[d].extent) as i64;
                rem /= axes[d].extent;
            }
            let v = match combiner {
                None => convert(resolved.eval(&env, &refs)?, node.dtype),
                Some(c) => {
                    let mut acc = c.identity(node.dtype);
                    for r in 0..red_total {
                        let mut rem = r;
                        for d in (0..red_extents.len()).rev() {
                            env[n_out + d] = (rem % red_extents[d]) as i64;
                            rem /= red_extents[d];
                        }
                        let v = convert(resolved.eval(&env, &refs)?, node.dtype);
                        acc = combine(c, acc, v, node.dtype);
                    }
                    acc
                }
            };
            match (&mut out.data, v) {
                (TensorData::I32(d), v) => d[o] = v.to_i32(),
                (TensorData::F32(d), v) => d[o] = v.as_f32(),
            }
        }
        values.push(out);
    }
    Ok(dag
        .nodes
        .iter()
        .map(|n| n.name.clone())
        .zip(values)
        .collect())
}

/// Evaluates the DAG and returns its outputs.
pub fn reference_eval(
    dag: &ComputeDag,
    inputs: &BTreeMap<String, Tensor>,
) -> Result<BTreeMap<String, Tensor>, DagError> {
    let mut all = reference_eval_all(dag, inputs)?;
    Ok(dag
        .outputs
        .iter()
        .map(|o| (o.clone(), all.remove(o).expect("validated output")))
        .collect())
}

/// Evaluates individual elements of `node` on demand, recursing through
/// producers. Suitable when the full tensors are too large to compute.
pub fn reference_eval_points(
    dag: &ComputeDag,
    inputs: &BTreeMap<String, Tensor>,
    node: &str,
    points: &[Vec<usize>],
) -> Result<Vec<Value>, DagError> {
    dag.validate()?;
    check_inputs(dag, inputs)?;
    let target = dag
        .index_of(node)
        .ok_or_else(|| DagError::UnknownOutput(node.to_string()))?;
    let mut ev = PointEval {
        dag,
        inputs,
        resolved: HashMap::new(),
        memo: HashMap::new(),
    };
    points
        .iter()
        .map(|p| {
            let coords: Vec<i64> = p.iter().map(|c| *c as i64).collect();
            ev.element(target, &coords)
        })
        .collect()
}

struct PointEval<'a> {
    dag: &'a ComputeDag,
    inputs: &'a BTreeMap<String, Tensor>,
    resolved: HashMap<usize, (Expr, Vec<String>)>,
    memo: HashMap<(usize, Vec<i64>), Value>,
}

impl PointEval<'_> {
    fn element(&mut self, node_idx: usize, coords: &[i64]) -> Result<Value, DagError> {
        let node = &self.dag.nodes[node_idx];
        if node.is_input() {
            return Ok(element(&self.inputs[&node.name], coords)?);
        }
        if let Some(v) = self.memo.get(&(node_idx, coords.to_vec())) {
            return Ok(*v);
        }
        let (axes, reduce_axes, combiner) = match &node.body {
            NodeBody::Compute { axes, .. } => (axes, &[][..], None),
            NodeBody::Reduce {
                axes,
                reduce_axes,
                combiner,
                ..
            } => (axes, &reduce_axes[..], Some(*combiner)),
            NodeBody::Input => unreachable!(),
        };
        self.resolved.entry(node_idx).or_insert_with(|| {
            let names = axes.iter().chain(reduce_axes).map(|a| a.name.clone()).collect();
            (node.value().expect("computed").clone(), names)
        });
        let (value, names) = self.resolved[&node_idx].clone();
        let mut env: Vec<i64> = coords.to_vec();
        env.resize(names.len(), 0);
        let v = match combiner {
            None => convert(self.eval(&value, &names, &env)?, node.dtype),
            Some(c) => {
                let extents: Vec<usize> = reduce_axes.iter().map(|a| a.extent).collect();
                let total: usize = extents.iter().product();
                let mut acc = c.identity(node.dtype);
                for r in 0..total {
                    let mut rem = r;
                    for d in (0..extents.len()).rev() {
                        env[axes.len() + d] = (rem % extents[d]) as i64;
                        rem /= extents[d];
                    }
                    let v = convert(self.eval(&value, &names, &env)?, node.dtype);
                    acc = combine(c, acc, v, node.dtype);
                }
                acc
            }
        };
        self.memo.insert((node_idx, coords.to_vec()), v);
        Ok(v)
    }

    fn eval(&mut self, e: &Expr, names: &[String], env: &[i64]) -> Result<Value, DagError> {
        Ok(match e {
            Expr::Int(v) => Value::I(*v),
            Expr::Float(v) => Value::F(v.0),
            Expr::Var(v) => Value::I(
                env[names
                    .iter()
                    .position(|n| n == v)
                    .ok_or_else(|| EvalError::UnboundVariable(v.clone()))?],
            ),
            Expr::Binary(op, a, b) => {
                let x = self.eval(a, names, env)?;
                let y = self.eval(b, names, env)?;
                apply_binary(*op, x, y)?
            }
            Expr::Unary(op, a) => apply_unary(*op, self.eval(a, names, env)?),
            Expr::Select(c, a, b) => {
                let c = self.eval(c, names, env)?;
                let x = self.eval(a, names, env)?;
                let y = self.eval(b, names, env)?;
                select_value(c, x, y)
            }
            Expr::Load(t, idx) => {
                let mut coords = Vec::with_capacity(idx.len());
                for i in idx {
                    coords.push(int_of(self.eval(i, names, env)?));
                }
                let src = self.dag.index_of(t).expect("validated");
                let shape = &self.dag.nodes[src].shape;
                if coords.iter().zip(shape).any(|(c, d)| *c < 0 || *c as usize >= *d) {
                    return Err(EvalError::Load(format!(
                        "index {coords:?} out of bounds for `{t}` {shape:?}"
                    ))
                    .into());
                }
                self.element(src, &coords)?
            }
            Expr::Table(t, i) => {
                let i = int_of(self.eval(i, names, env)?);
                table_lookup(t, i)?
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use crate::expr::Value;
    use crate::tensor::Tensor;
    use std::collections::BTreeMap;

    fn inputs(pairs: Vec<(&str, Tensor)>) -> BTreeMap<String, Tensor> {
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    #[test]
    fn matmul_two_by_two() {
        let dag = matmul(2, 2, 2, DType::I32);
        let out = reference_eval(
            &dag,
            &inputs(vec![
                ("A", Tensor::from_i32(&[2, 2], vec![1, 2, 3, 4])),
                ("B", Tensor::from_i32(&[2, 2], vec![5, 6, 7, 8])),
            ]),
        )
        .unwrap();
        assert_eq!(out["C"].as_i32().unwrap(), &[19, 22, 43, 50]);
    }

    #[test]
    fn scalar_matmul() {
        let dag = matmul(1, 1, 1, DType::F32);
        let out = reference_eval(
            &dag,
            &inputs(vec![
                ("A", Tensor::from_f32(&[1, 1], vec![1.5])),
                ("B", Tensor::from_f32(&[1, 1], vec![-2.0])),
            ]),
        )
        .unwrap();
        assert_eq!(out["C"].as_f32().unwrap(), &[-3.0]);
    }

    #[test]
    fn relu_vector() {
        let dag = elementwise(&[3], DType::I32, 1, |x| x[0].clone().relu());
        let out = reference_eval(&dag, &inputs(vec![("X", Tensor::from_i32(&[3], vec![-1, 0, 2]))])).unwrap();
        assert_eq!(out["Y"].as_i32().unwrap(), &[0, 0, 2]);
    }

    #[test]
    fn prime_sum_of_ones() {
        let dag = reduce(&[3, 2039], &[1], Combiner::Sum, DType::I32).unwrap();
        let out = reference_eval(&dag, &inputs(vec![("X", Tensor::from_i32(&[3, 2039], vec![1; 3 * 2039]))])).unwrap();
        assert_eq!(out["Y"].as_i32().unwrap(), &[2039, 2039, 2039]);
    }

    #[test]
    fn all_ones_conv() {
        let g = ConvGeometry {
            n: 1,
            c: 1,
            h: 3,
            w: 3,
            f: 1,
            kh: 2,
            kw: 2,
            stride: 1,
            pad: 0,
        };
        let dag = conv2d_im2col(g, DType::I32).unwrap();
        let out = reference_eval(
            &dag,
            &inputs(vec![
                ("X", Tensor::from_i32(&[1, 1, 3, 3], vec![1; 9])),
                ("W", Tensor::from_i32(&[1, 1, 2, 2], vec![1; 4])),
            ]),
        )
        .unwrap();
        assert_eq!(out["Y"].shape, vec![1, 1, 2, 2]);
        assert_eq!(out["Y"].as_i32().unwrap(), &[4, 4, 4, 4]);
    }

    #[test]
    fn identity_batchnorm() {
        let dag = batchnorm_inference(&[1, 2, 2, 2], &BatchNormParams::identity(2), DType::F32).unwrap();
        let x = Tensor::from_f32(&[1, 2, 2, 2], vec![-1.5, 0.0, 2.0, 3.25, 7.0, -8.0, 0.5, 1.0]);
        let out = reference_eval(&dag, &inputs(vec![("X", x.clone())])).unwrap();
        assert_eq!(out["Y"], x);
    }

    #[test]
    fn points_match_full_evaluation() {
        let dag = matmul(5, 3, 7, DType::I32);
        let mut rng = Tensor::seeded_rng(1);
        let ins = inputs(vec![
            ("A", Tensor::random(&[5, 7], DType::I32, -8, 8, &mut rng)),
            ("B", Tensor::random(&[7, 3], DType::I32, -8, 8, &mut rng)),
        ]);
        let full = reference_eval(&dag, &ins).unwrap();
        let pts = vec![vec![0, 0], vec![4, 2], vec![2, 1]];
        let vals = reference_eval_points(&dag, &ins, "C", &pts).unwrap();
        for (p, v) in pts.iter().zip(vals) {
            assert_eq!(v, Value::I(full["C"].as_i32().unwrap()[p[0] * 3 + p[1]] as i64));
        }
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let dag = matmul(2, 2, 2, DType::I32);
        let bad = inputs(vec![
            ("A", Tensor::from_f32(&[2, 2], vec![0.0; 4])),
            ("B", Tensor::from_i32(&[2, 2], vec![0; 4])),
        ]);
        assert!(matches!(reference_eval(&dag, &bad), Err(DagError::InputMismatch(_))));
    }
}
