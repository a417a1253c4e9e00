//! Property tests over random mappings, shapes, schedules and graphs.
//! Expected values come from small oracles written here, independent of
//! the library's reference evaluator where practical.

use std::collections::{BTreeMap, HashSet};

use proptest::prelude::*;

use taskmap::compute_ir::{reference_eval, Combiner, ConvGeometry, DagBuilder};
use taskmap::expr::Expr;
use taskmap::fusion::{compile_dag, partition, CompileOptions};
use taskmap::program_ir::{wellformed, Program};
use taskmap::scheduler::{lower_program, matmul_space, rule_based_schedule, ScheduleConfig};
use taskmap::tensor::Tensor;
use taskmap::vm::{run_program, MachineSpec};
use taskmap::{ComputeDag, DType, TaskMapping};

const MAX_TASKS: usize = 1 << 14;

#[derive(Clone, Debug)]
struct Atom {
    spatial: bool,
    shape: Vec<usize>,
}

impl Atom {
    fn build(&self) -> TaskMapping {
        if self.spatial {
            TaskMapping::spatial(&self.shape).unwrap()
        } else {
            TaskMapping::repeat(&self.shape).unwrap()
        }
    }
}

/// `count` atoms of one rank with extents in 1..=8, halving the largest
/// extent until the composed domain stays small enough to enumerate.
fn atoms(count: usize) -> impl Strategy<Value = Vec<Atom>> {
    (1usize..=3).prop_flat_map(move |rank| {
        prop::collection::vec(
            (any::<bool>(), prop::collection::vec(1usize..=8, rank)),
            count,
        )
        .prop_map(|raw| {
            let mut atoms: Vec<Atom> = raw
                .into_iter()
                .map(|(spatial, shape)| Atom { spatial, shape })
                .collect();
            loop {
                let total: usize = atoms.iter().flat_map(|a| &a.shape).product();
                if total <= MAX_TASKS {
                    return atoms;
                }
                let (ai, di) = (0..atoms.len())
                    .flat_map(|a| (0..atoms[a].shape.len()).map(move |d| (a, d)))
                    .max_by_key(|(a, d)| atoms[*a].shape[*d])
                    .unwrap();
                atoms[ai].shape[di] = atoms[ai].shape[di].div_ceil(2);
            }
        })
    })
}

fn table(m: &TaskMapping) -> Vec<Vec<Vec<usize>>> {
    (0..m.num_workers()).map(|w| m.assign(w).unwrap()).collect()
}

/// The composition rule evaluated directly from the two operands.
fn compose_oracle(f1: &TaskMapping, f2: &TaskMapping) -> Vec<Vec<Vec<usize>>> {
    let n2 = f2.num_workers();
    let d2 = f2.task_shape().dims().to_vec();
    (0..f1.num_workers() * n2)
        .map(|w| {
            let mut out = Vec::new();
            for t1 in f1.assign(w / n2).unwrap() {
                for t2 in f2.assign(w % n2).unwrap() {
                    out.push(t1.iter().zip(&d2).zip(&t2).map(|((a, d), b)| a * d + b).collect());
                }
            }
            out
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn composition_is_associative(a in atoms(3)) {
        let (f, g, h) = (a[0].build(), a[1].build(), a[2].build());
        let left = f.compose(&g).unwrap().compose(&h).unwrap();
        let right = f.compose(&g.compose(&h).unwrap()).unwrap();
        prop_assert_eq!(left.num_workers(), right.num_workers());
        prop_assert_eq!(left.task_shape(), right.task_shape());
        prop_assert_eq!(table(&left), table(&right));
    }

    #[test]
    fn composition_follows_the_rule(a in atoms(2)) {
        let (f, g) = (a[0].build(), a[1].build());
        let c = f.compose(&g).unwrap();
        prop_assert_eq!(c.num_workers(), f.num_workers() * g.num_workers());
        let want: Vec<usize> = f.task_shape().dims().iter().zip(g.task_shape().dims()).map(|(x, y)| x * y).collect();
        prop_assert_eq!(c.task_shape().dims(), &want[..]);
        prop_assert_eq!(table(&c), compose_oracle(&f, &g));
    }

    #[test]
    fn compositions_cover_each_task_once(n in 1usize..=4, a in atoms(4)) {
        let m = a[..n].iter().map(Atom::build).reduce(|x, y| x.compose(&y).unwrap()).unwrap();
        let dims = m.task_shape().dims().to_vec();
        let mut seen = vec![0u32; dims.iter().product()];
        for tasks in table(&m) {
            for t in tasks {
                prop_assert!(t.iter().zip(&dims).all(|(x, d)| x < d), "{:?} outside {:?}", t, dims);
                let lin = t.iter().zip(&dims).fold(0, |acc, (x, d)| acc * d + x);
                seen[lin] += 1;
            }
        }
        prop_assert!(seen.iter().all(|c| *c == 1));
    }

    #[test]
    fn out_of_range_workers_are_rejected(a in atoms(2)) {
        let m = a[0].build().compose(&a[1].build()).unwrap();
        prop_assert!(m.assign(m.num_workers()).is_err());
    }
}

fn random_inputs(dag: &ComputeDag, seed: u64) -> BTreeMap<String, Tensor> {
    let mut rng = Tensor::seeded_rng(seed);
    dag.inputs
        .iter()
        .map(|i| {
            let n = dag.node(i).unwrap();
            (i.clone(), Tensor::random(&n.shape, n.dtype, -8, 8, &mut rng))
        })
        .collect()
}

/// Lowers, checks diagnostics and races, and returns the outputs of
/// both the unlowered and the lowered program.
fn execute(program: &Program, inputs: &BTreeMap<String, Tensor>) -> BTreeMap<String, Tensor> {
    let machine = MachineSpec::default();
    let lowered = lower_program(program).unwrap();
    for k in &lowered.kernels {
        let d = wellformed(k);
        assert!(d.is_empty(), "{}: {:?}", k.name, d);
    }
    let a = run_program(program, inputs, &machine).unwrap();
    let b = run_program(&lowered, inputs, &machine).unwrap();
    assert!(a.races.is_empty() && b.races.is_empty());
    assert_eq!(a.outputs, b.outputs, "lowering changed the results");
    assert_eq!(a.cost.blocks, b.cost.blocks);
    b.outputs
}

fn matmul_oracle(a: &[i32], b: &[i32], m: usize, n: usize, k: usize) -> Vec<i32> {
    let mut c = vec![0i32; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] = c[i * n + j].wrapping_add(a[i * k + p].wrapping_mul(b[p * n + j]));
            }
        }
    }
    c
}

fn conv_relu_oracle(x: &Tensor, w: &Tensor, g: &ConvGeometry) -> Vec<i32> {
    let (x, w) = (x.as_i32().unwrap(), w.as_i32().unwrap());
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut y = vec![0i32; g.n * g.f * oh * ow];
    for n in 0..g.n {
        for f in 0..g.f {
            for r in 0..oh {
                for s in 0..ow {
                    let mut acc = 0i32;
                    for c in 0..g.c {
                        for i in 0..g.kh {
                            for j in 0..g.kw {
                                let (h, v) = ((r * g.stride + i) as i64 - g.pad as i64, (s * g.stride + j) as i64 - g.pad as i64);
                                if h < 0 || v < 0 || h >= g.h as i64 || v >= g.w as i64 {
                                    continue;
                                }
                                let xi = ((n * g.c + c) * g.h + h as usize) * g.w + v as usize;
                                let wi = ((f * g.c + c) * g.kh + i) * g.kw + j;
                                acc += x[xi] * w[wi];
                            }
                        }
                    }
                    y[((n * g.f + f) * oh + r) * ow + s] = acc.max(0);
                }
            }
        }
    }
    y
}

fn geometry() -> impl Strategy<Value = ConvGeometry> {
    (1usize..=2, 1usize..=3, 3usize..=9, 3usize..=9, 1usize..=5, 1usize..=3, 1usize..=3, 1usize..=2, 0usize..=1)
        .prop_map(|(n, c, h, w, f, kh, kw, stride, pad)| ConvGeometry { n, c, h, w, f, kh, kw, stride, pad: pad.min(kh - 1).min(kw - 1) })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn any_config_matches_triple_loop(m in 1usize..=70, n in 1usize..=70, k in 1usize..=70, pick in any::<prop::sample::Index>(), seed in any::<u64>()) {
        let space = matmul_space();
        let cfg = ScheduleConfig::Matmul(space[pick.index(space.len())]);
        let dag = taskmap::compute_ir::matmul(m, n, k, DType::I32);
        let ins = random_inputs(&dag, seed);
        let p = compile_dag(&dag, &CompileOptions { fuse: true, config: Some(cfg) }).unwrap();
        let got = execute(&p, &ins);
        let want = matmul_oracle(ins["A"].as_i32().unwrap(), ins["B"].as_i32().unwrap(), m, n, k);
        prop_assert_eq!(got["C"].as_i32().unwrap(), &want[..], "{}", cfg);
    }

    #[test]
    fn fused_conv_relu_matches_loops(g in geometry(), pick in any::<prop::sample::Index>(), seed in any::<u64>()) {
        let space = matmul_space();
        let cfg = ScheduleConfig::Matmul(space[pick.index(space.len())]);
        let mut b = DagBuilder::new();
        b.input("X", &[g.n, g.c, g.h, g.w], DType::I32);
        b.input("W", &[g.f, g.c, g.kh, g.kw], DType::I32);
        b.conv2d("Y", "X", "W", g.stride, g.pad).unwrap();
        b.relu("R", "Y");
        let dag = b.build(&["R"]).unwrap();
        let ins = random_inputs(&dag, seed);
        let want = conv_relu_oracle(&ins["X"], &ins["W"], &g);
        for fuse in [true, false] {
            let p = compile_dag(&dag, &CompileOptions { fuse, config: Some(cfg) }).unwrap();
            if fuse {
                // the gathered matrix is never materialized
                prop_assert!(p.temps.iter().all(|t| t.name != "Y_col" && t.name != "Y_wflat"), "{:?}", p.temps);
            }
            let got = execute(&p, &ins);
            prop_assert_eq!(got["R"].as_i32().unwrap(), &want[..], "{:?} {}", g, cfg);
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Relu,
    Scale(i64),
    Transpose,
    AddInput,
    Matmul(usize),
    Reduce(bool),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        Just(Op::Relu),
        (-3i64..=3).prop_map(Op::Scale),
        Just(Op::Transpose),
        Just(Op::AddInput),
        (1usize..=40).prop_map(Op::Matmul),
        any::<bool>().prop_map(Op::Reduce),
    ]
}

/// A random chain over a 2-D input; reductions drop the last dimension
/// and end the 2-D part of the chain. Extra outputs expose some
/// intermediate tensors.
fn chain(rows: usize, cols: usize, ops: &[Op], extra_outputs: &[bool]) -> ComputeDag {
    let mut b = DagBuilder::new();
    let mut cur = b.input("X", &[rows, cols], DType::I32);
    let mut shape = vec![rows, cols];
    let mut names = Vec::new();
    for (i, op) in ops.iter().enumerate() {
        let name = format!("t{i}");
        match op {
            Op::Relu => {
                b.relu(&name, &cur);
            }
            Op::Scale(s) => {
                let s = *s;
                b.elementwise(&name, &[&cur], |a| a[0].clone() * Expr::Int(s)).unwrap();
            }
            Op::Transpose if shape.len() == 2 => {
                b.transpose(&name, &cur, &[1, 0]).unwrap();
                shape.reverse();
            }
            Op::AddInput => {
                let other = b.input(&format!("in{i}"), &shape, DType::I32);
                b.elementwise(&name, &[&cur, &other], |a| a[0].clone() + a[1].clone()).unwrap();
            }
            Op::Matmul(p) if shape.len() == 2 => {
                let w = b.input(&format!("w{i}"), &[shape[1], *p], DType::I32);
                b.matmul(&name, &cur, &w).unwrap();
                shape = vec![shape[0], *p];
            }
            Op::Reduce(max) if shape.len() == 2 => {
                let c = if *max { Combiner::Max } else { Combiner::Sum };
                b.reduce(&name, &cur, &[1], c).unwrap();
                shape = vec![shape[0]];
            }
            _ => {
                b.relu(&name, &cur);
            }
        }
        names.push(name.clone());
        cur = name;
    }
    let mut outputs: Vec<&str> = names[..names.len() - 1]
        .iter()
        .zip(extra_outputs)
        .filter(|(_, keep)| **keep)
        .map(|(n, _)| n.as_str())
        .collect();
    outputs.push(&cur);
    b.build(&outputs).unwrap()
}

fn assert_matches_reference(dag: &ComputeDag, program: &Program, seed: u64) {
    let ins = random_inputs(dag, seed);
    let got = execute(program, &ins);
    let want = reference_eval(dag, &ins).unwrap();
    for (name, t) in &want {
        assert_eq!(&got[name], t, "{name}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn partition_is_total_and_ordered(rows in 1usize..=30, cols in 1usize..=30, ops in prop::collection::vec(op(), 1..7), extra in prop::collection::vec(any::<bool>(), 7)) {
        let dag = chain(rows, cols, &ops, &extra);
        let groups = partition(&dag);
        let mut owner: HashSet<&str> = HashSet::new();
        for g in &groups {
            for input in g.inputs(&dag) {
                prop_assert!(dag.inputs.contains(&input) || owner.contains(input.as_str()), "{} used before it is computed", input);
            }
            for n in &g.nodes {
                prop_assert!(owner.insert(n.as_str()), "{} in two subgraphs", n);
            }
        }
        let computed: HashSet<&str> = dag.computed().map(|n| n.name.as_str()).collect();
        prop_assert_eq!(owner, computed);
    }

    #[test]
    fn compiled_chains_match_reference(rows in 1usize..=30, cols in 1usize..=30, ops in prop::collection::vec(op(), 1..6), extra in prop::collection::vec(any::<bool>(), 6), fuse in any::<bool>(), seed in any::<u64>()) {
        let dag = chain(rows, cols, &ops, &extra);
        let p = compile_dag(&dag, &CompileOptions { fuse, config: None }).unwrap();
        assert_matches_reference(&dag, &p, seed);
    }

    #[test]
    fn rule_based_schedules_are_correct(rows in 1usize..=40, cols in 1usize..=40, ops in prop::collection::vec(op(), 1..5), seed in any::<u64>()) {
        let dag = chain(rows, cols, &ops, &[]);
        let p = rule_based_schedule(&dag).unwrap();
        assert_matches_reference(&dag, &p, seed);
    }
}
