use std::collections::BTreeMap;

use super::*;
use crate::expr::Expr;
use crate::mapping::TaskMapping;
use crate::program_ir::{lower_maploops, parse_kernel, Scope, Stmt, THREAD_IDX};
use crate::tensor::DType;

fn copy_kernel(n: usize) -> Kernel {
    Kernel {
        name: "copy".into(),
        grid_dim: 1,
        block_dim: n,
        params: vec![
            Buffer::new("A", Scope::Global, &[n], DType::I32),
            Buffer::new("B", Scope::Global, &[n], DType::I32),
        ],
        shared: vec![],
        locals: vec![],
        body: Stmt::store(
            "B",
            vec![Expr::var(THREAD_IDX)],
            Expr::load("A", vec![Expr::var(THREAD_IDX)]),
        ),
    }
}

fn inputs(pairs: Vec<(&str, Tensor)>) -> BTreeMap<String, Tensor> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

#[test]
fn copy_is_identity_without_races() {
    let data: Vec<i32> = (0..128).map(|i| i * 3 - 7).collect();
    let a = Tensor::from_i32(&[128], data.clone());
    let r = run(&copy_kernel(128), &inputs(vec![("A", a)]), &MachineSpec::default()).unwrap();
    assert_eq!(r.outputs["B"].as_i32().unwrap(), &data[..]);
    assert!(r.races.is_empty());
    assert_eq!(r.cost.blocks, 1);
    assert_eq!(r.cost.waves, 1);
}

#[test]
fn shared_write_write_race() {
    let k = parse_kernel(
        "kernel r grid(1) block(2) {\n  shared S[1]: i32;\n  S[0] = threadIdx;\n}\n",
    )
    .unwrap();
    let r = run(&k, &BTreeMap::new(), &MachineSpec::default()).unwrap();
    assert_eq!(r.cost.races, 1);
    assert_eq!(r.races[0].kind, RaceKind::WriteWrite);
    assert_eq!(r.races[0].other, Some((0, 0)));
}

#[test]
fn barrier_separates_phases() {
    let src = "kernel ok grid(1) block(4) {
  global O[4]: i32;
  shared S[4]: i32;
  S[threadIdx] = threadIdx * 10;
  barrier;
  O[threadIdx] = S[3 - threadIdx];
}
";
    let k = parse_kernel(src).unwrap();
    let r = run(&k, &BTreeMap::new(), &MachineSpec::default()).unwrap();
    assert_eq!(r.outputs["O"].as_i32().unwrap(), &[30, 20, 10, 0]);
    assert_eq!(r.cost.races, 0);
    let racy = parse_kernel(&src.replace("  barrier;\n", "")).unwrap();
    let r = run(&racy, &BTreeMap::new(), &MachineSpec::default()).unwrap();
    assert!(r.cost.races > 0);
}

#[test]
fn divergent_barrier_deadlocks() {
    let k = parse_kernel(
        "kernel d grid(1) block(2) {\n  if threadIdx == 0 {\n    barrier;\n  }\n}\n",
    )
    .unwrap();
    let e = run(&k, &BTreeMap::new(), &MachineSpec::default()).unwrap_err();
    assert!(matches!(e, VmError::Deadlock { block: 0, .. }));
}

#[test]
fn out_of_bounds_is_fatal() {
    let k = parse_kernel(
        "kernel o grid(1) block(4) {\n  global O[3]: i32;\n  O[threadIdx] = 1;\n}\n",
    )
    .unwrap();
    let e = run(&k, &BTreeMap::new(), &MachineSpec::default()).unwrap_err();
    match e {
        VmError::OutOfBounds {
            indices, thread, ..
        } => {
            assert_eq!(indices, vec![3]);
            assert_eq!(thread, 3);
        }
        other => panic!("{other}"),
    }
}

#[test]
fn empty_kernel_costs_nothing() {
    let k = parse_kernel("kernel empty grid(1) block(1) {}").unwrap();
    let c = cost(&k, &MachineSpec::default(), &BTreeMap::new()).unwrap();
    assert_eq!(c.total_cost, 0);
}

#[test]
fn waves_round_up() {
    let m = MachineSpec {
        num_sms: 17,
        ..MachineSpec::default()
    };
    assert_eq!(m.waves(68), 4);
    assert_eq!(m.waves(69), 5);
    let k = parse_kernel("kernel w grid(68) block(1) {\n  eval 1 + blockIdx;\n}\n").unwrap();
    let c = cost(&k, &m, &BTreeMap::new()).unwrap();
    assert_eq!(c.waves, 4);
    assert_eq!(c.total_cost, 4 * c.per_block_cost);
}

#[test]
fn cost_counts_weighted_operations() {
    // One global load, one global store, one barrier per thread.
    let k = parse_kernel(
        "kernel c grid(1) block(2) {\n  global A[2]: i32;\n  global B[2]: i32;\n  barrier;\n  B[threadIdx] = A[threadIdx];\n}\n",
    )
    .unwrap();
    let w = CostWeights::default();
    let c = cost(&k, &MachineSpec::default(), &BTreeMap::new()).unwrap();
    assert_eq!(c.per_block_cost, 2 * (2 * w.global_access + w.barrier));
}

#[test]
fn shared_limit_enforced() {
    let k = parse_kernel("kernel s grid(1) block(1) {\n  shared S[20000]: f32;\n}\n").unwrap();
    let e = run(&k, &BTreeMap::new(), &MachineSpec::default()).unwrap_err();
    assert!(matches!(e, VmError::SharedOverflow { used: 80000, .. }));
}

#[test]
fn maploop_matches_lowered_form() {
    let m = TaskMapping::repeat(&[4, 1])
        .unwrap()
        .compose(&TaskMapping::spatial(&[16, 8]).unwrap())
        .unwrap();
    let body = Stmt::map_loop(
        m,
        Expr::var(THREAD_IDX),
        &["i", "k"],
        Stmt::store(
            "B",
            vec![Expr::var("i"), Expr::var("k")],
            Expr::load("A", vec![Expr::var("i"), Expr::var("k")]) * 2i64 + Expr::var("i"),
        ),
    );
    let k = Kernel {
        name: "coop".into(),
        grid_dim: 1,
        block_dim: 128,
        params: vec![
            Buffer::new("A", Scope::Global, &[64, 8], DType::I32),
            Buffer::new("B", Scope::Global, &[64, 8], DType::I32),
        ],
        shared: vec![],
        locals: vec![],
        body,
    };
    let mut rng = Tensor::seeded_rng(3);
    let a = Tensor::random(&[64, 8], DType::I32, -8, 8, &mut rng);
    let ins = inputs(vec![("A", a.clone())]);
    let direct = run(&k, &ins, &MachineSpec::default()).unwrap();
    let lowered = run(&lower_maploops(&k).unwrap(), &ins, &MachineSpec::default()).unwrap();
    assert_eq!(direct.outputs, lowered.outputs);
    let av = a.as_i32().unwrap();
    let expected: Vec<i32> = (0..512).map(|o| av[o] * 2 + (o / 8) as i32).collect();
    assert_eq!(direct.outputs["B"].as_i32().unwrap(), &expected[..]);
    assert_eq!(direct.cost.races, 0);
}

#[test]
fn float_and_int_semantics() {
    let k = parse_kernel(
        "kernel s grid(1) block(1) {
  global O[6]: i32;
  global F[3]: f32;
  O[0] = -7 / 2;
  O[1] = -7 % 3;
  O[2] = i32(2.9);
  O[3] = select(1, 2, 3.5);
  O[4] = max(3, -4) + relu(-2);
  O[5] = 7 / 2 * 2.0;
  F[0] = 1 / 2.0;
  F[1] = sqrt(16);
  F[2] = table(f32, [0.5, 1.5])[1];
}
",
    )
    .unwrap();
    let r = run(&k, &BTreeMap::new(), &MachineSpec::default()).unwrap();
    assert_eq!(r.outputs["O"].as_i32().unwrap(), &[-4, 2, 2, 2, 3, 6]);
    assert_eq!(r.outputs["F"].as_f32().unwrap(), &[0.5, 4.0, 1.5]);
}

#[test]
fn deterministic_costs() {
    let k = copy_kernel(64);
    let a = Tensor::from_i32(&[64], (0..64).collect());
    let ins = inputs(vec![("A", a)]);
    let r1 = run(&k, &ins, &MachineSpec::default()).unwrap();
    let r2 = run(&k, &ins, &MachineSpec::default()).unwrap();
    assert_eq!(r1, r2);
}
