use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::expr::eval::{eval, int_of};
use crate::expr::{simplify, BinOp, Expr, Interval, Ranges, Value};

use super::{NodeBody, TensorNode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Reduction,
    Injective,
    Bijective,
}

impl OpKind {
    /// Bijective operators are also injective.
    pub fn is_injective(self) -> bool {
        !matches!(self, OpKind::Reduction)
    }
}

/// Largest output domain decided by enumerating every coordinate.
const ENUMERATION_LIMIT: usize = 1 << 22;

/// Reductions are `Reduction`. A reduction-free node is `Bijective` when no
/// element of any tensor it reads is read by two different output
/// coordinates, and `Injective` otherwise. `shape_of` returns the shape of
/// a read tensor.
pub fn classify(node: &TensorNode, shape_of: &dyn Fn(&str) -> Option<Vec<usize>>) -> OpKind {
    let (axes, value) = match &node.body {
        NodeBody::Reduce { .. } => return OpKind::Reduction,
        NodeBody::Input => return OpKind::Injective,
        NodeBody::Compute { axes, value } => (axes, value),
    };
    let loads = value.loads();
    if loads.iter().any(|(_, idx)| idx.iter().any(|i| i.has_loads())) {
        return OpKind::Injective;
    }
    let mut ranges = Ranges::new();
    for a in axes {
        ranges.insert(a.name.clone(), Interval::extent(a.extent));
    }
    let mut tensors: Vec<&str> = loads.iter().map(|(t, _)| *t).collect();
    tensors.sort_unstable();
    tensors.dedup();
    let mut undecided = Vec::new();
    for t in tensors {
        let Some(shape) = shape_of(t) else {
            return OpKind::Injective;
        };
        let sites: Vec<Vec<Expr>> = loads
            .iter()
            .filter(|(n, _)| *n == t)
            .map(|(_, idx)| idx.iter().map(|i| simplify(i, &ranges)).collect())
            .collect();
        if sites.iter().all(|s| *s == sites[0]) && symbolic_injective(&sites[0], &shape, &ranges) {
            continue;
        }
        undecided.push((t, shape, sites));
    }
    if undecided.is_empty() {
        return OpKind::Bijective;
    }
    let domain: usize = node.shape.iter().product();
    if domain > ENUMERATION_LIMIT {
        return OpKind::Injective;
    }
    for (_, shape, sites) in undecided {
        if !enumerated_injective(axes, &sites, &shape) {
            return OpKind::Injective;
        }
    }
    OpKind::Bijective
}

/// `Σ c·var + const` when `e` has that form.
pub(crate) fn affine_terms(e: &Expr) -> Option<(Vec<(String, i64)>, i64)> {
    fn walk(e: &Expr, k: i64, terms: &mut Vec<(String, i64)>, c: &mut i64) -> bool {
        match e {
            Expr::Int(v) => {
                *c += k * v;
                true
            }
            Expr::Var(v) => {
                match terms.iter_mut().find(|(n, _)| n == v) {
                    Some(t) => t.1 += k,
                    None => terms.push((v.clone(), k)),
                }
                true
            }
            Expr::Binary(BinOp::Add, a, b) => walk(a, k, terms, c) && walk(b, k, terms, c),
            Expr::Binary(BinOp::Sub, a, b) => walk(a, k, terms, c) && walk(b, -k, terms, c),
            Expr::Binary(BinOp::Mul, a, b) => match (a.as_int(), b.as_int()) {
                (_, Some(m)) => walk(a, k * m, terms, c),
                (Some(m), _) => walk(b, k * m, terms, c),
                _ => false,
            },
            Expr::Unary(crate::expr::UnaryOp::Neg, a) => walk(a, -k, terms, c),
            _ => false,
        }
    }
    let mut terms = Vec::new();
    let mut c = 0;
    walk(e, 1, &mut terms, &mut c).then(|| {
        terms.retain(|t| t.1 != 0);
        (terms, c)
    })
}

/// The flat offset into the read tensor is an affine form whose sorted
/// coefficients dominate the span of every smaller term, which makes the
/// map from output coordinates to input elements one-to-one.
fn symbolic_injective(idx: &[Expr], shape: &[usize], ranges: &Ranges) -> bool {
    let mut flat = Expr::Int(0);
    for (i, d) in idx.iter().zip(shape) {
        flat = flat * *d as i64 + i.clone();
    }
    let Some((mut terms, _)) = affine_terms(&simplify(&flat, ranges)) else {
        return false;
    };
    // an output axis missing from the offset broadcasts the element
    if ranges
        .iter()
        .any(|(v, r)| r.hi > r.lo && !terms.iter().any(|(t, _)| t == v))
    {
        return false;
    }
    terms.sort_by_key(|t| t.1.unsigned_abs());
    let mut span: u128 = 0;
    for (v, c) in terms {
        let Some(r) = ranges.get(&v) else {
            return false;
        };
        if (c.unsigned_abs() as u128) <= span {
            return false;
        }
        span += c.unsigned_abs() as u128 * (r.hi - r.lo) as u128;
    }
    true
}

fn enumerated_injective(axes: &[super::Axis], sites: &[Vec<Expr>], shape: &[usize]) -> bool {
    let extents: Vec<usize> = axes.iter().map(|a| a.extent).collect();
    let total: usize = extents.iter().product();
    let numel: usize = shape.iter().product();
    let mut owner: FxHashMap<usize, usize> = FxHashMap::default();
    let mut coords = vec![0i64; axes.len()];
    for o in 0..total {
        let mut rem = o;
        for d in (0..extents.len()).rev() {
            coords[d] = (rem % extents[d]) as i64;
            rem /= extents[d];
        }
        for site in sites {
            let mut flat = 0usize;
            for (i, d) in site.iter().zip(shape) {
                let v = eval(
                    i,
                    &mut |n| {
                        axes.iter()
                            .position(|a| a.name == n)
                            .map(|p| Value::I(coords[p]))
                    },
                    &mut |_, _| unreachable!("index expressions are load-free"),
                );
                let Ok(v) = v else { return false };
                let v = int_of(v);
                if v < 0 || v as usize >= *d {
                    return false;
                }
                flat = flat * d + v as usize;
            }
            debug_assert!(flat < numel);
            if *owner.entry(flat).or_insert(o) != o {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use crate::expr::Expr;

    fn kind(dag: &ComputeDag, name: &str) -> OpKind {
        dag.classify(name).unwrap()
    }

    #[test]
    fn classic_examples() {
        let relu = elementwise(&[3], DType::F32, 1, |x| x[0].clone().relu());
        assert_eq!(kind(&relu, "Y"), OpKind::Bijective);
        let r = reshape(&[100], &[2, 50], DType::F32).unwrap();
        assert_eq!(kind(&r, "Y"), OpKind::Bijective);
        let mm = matmul(4, 4, 4, DType::F32);
        assert_eq!(kind(&mm, "C"), OpKind::Reduction);
    }

    #[test]
    fn transforms_and_broadcasts() {
        let t = transpose(&[3, 5, 2], &[2, 0, 1], DType::I32).unwrap();
        assert_eq!(kind(&t, "Y"), OpKind::Bijective);
        let bn = batchnorm_inference(&[1, 2, 3, 3], &BatchNormParams::identity(2), DType::F32).unwrap();
        assert_eq!(kind(&bn, "Y"), OpKind::Bijective);

        let mut b = DagBuilder::new();
        b.input("A", &[4], DType::I32);
        b.compute(
            "B",
            vec![Axis::new("i", 4), Axis::new("j", 2)],
            DType::I32,
            Expr::load("A", vec![Expr::var("i")]),
        );
        let dag = b.build(&["B"]).unwrap();
        assert_eq!(kind(&dag, "B"), OpKind::Injective);

        let g = ConvGeometry {
            n: 1,
            c: 2,
            h: 5,
            w: 5,
            f: 2,
            kh: 3,
            kw: 3,
            stride: 1,
            pad: 1,
        };
        let conv = conv2d_im2col(g, DType::I32).unwrap();
        assert_eq!(kind(&conv, "Y_col"), OpKind::Injective);
        assert_eq!(kind(&conv, "Y_wflat"), OpKind::Bijective);
        assert_eq!(kind(&conv, "Y_mm"), OpKind::Reduction);
        assert_eq!(kind(&conv, "Y"), OpKind::Bijective);
    }

    #[test]
    fn reversal_needs_enumeration_or_symbolic() {
        let mut b = DagBuilder::new();
        b.input("A", &[100], DType::F32);
        b.compute(
            "B",
            vec![Axis::new("i", 100)],
            DType::F32,
            Expr::load("A", vec![Expr::int(99) - Expr::var("i")]),
        );
        b.compute(
            "C",
            vec![Axis::new("i", 50)],
            DType::F32,
            Expr::load("A", vec![(Expr::var("i") * 7i64) % 50i64]),
        );
        b.compute(
            "D",
            vec![Axis::new("i", 50)],
            DType::F32,
            Expr::load("A", vec![(Expr::var("i") * 2i64) % 50i64]),
        );
        let dag = b.build(&["B", "C", "D"]).unwrap();
        assert_eq!(kind(&dag, "B"), OpKind::Bijective);
        assert_eq!(kind(&dag, "C"), OpKind::Bijective);
        assert_eq!(kind(&dag, "D"), OpKind::Injective);
    }

    #[test]
    fn stable_under_renaming() {
        let mut b = DagBuilder::new();
        b.input("P", &[100], DType::F32);
        b.compute(
            "Q",
            vec![Axis::new("z", 100)],
            DType::F32,
            Expr::load("P", vec![Expr::int(99) - Expr::var("z")]),
        );
        let dag = b.build(&["Q"]).unwrap();
        assert_eq!(kind(&dag, "Q"), OpKind::Bijective);
    }
}
