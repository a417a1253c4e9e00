use std::collections::BTreeMap;

use super::*;
use crate::compute_ir::{self, reference_eval, Combiner};
use crate::program_ir::wellformed;
use crate::tensor::{DType, Tensor};
use crate::vm::{run_program, MachineSpec};

fn inputs(dag: &ComputeDag, seed: u64) -> BTreeMap<String, Tensor> {
    let mut rng = Tensor::seeded_rng(seed);
    dag.inputs
        .iter()
        .map(|i| {
            let n = dag.node(i).unwrap();
            (i.clone(), Tensor::random(&n.shape, n.dtype, -8, 8, &mut rng))
        })
        .collect()
}

/// Lowers, checks wellformedness, runs and compares with the oracle.
fn check(dag: &ComputeDag, program: &Program, seed: u64) {
    let lowered = lower_program(program).unwrap();
    for k in &lowered.kernels {
        let d = wellformed(k);
        assert!(d.is_empty(), "{}: {d:?}\n{k}", k.name);
    }
    let ins = inputs(dag, seed);
    let got = run_program(&lowered, &ins, &MachineSpec::default()).unwrap();
    assert!(got.races.is_empty(), "races: {:?}", &got.races[..1]);
    let want = reference_eval(dag, &ins).unwrap();
    for (name, t) in &want {
        let g = &got.outputs[name];
        assert!(g.matches(t, 1e-4), "{name} differs at {:?}", g.first_mismatch(t, 1e-4));
    }
}

#[test]
fn space_is_fixed_and_valid() {
    let space = matmul_space();
    assert!((50..=200).contains(&space.len()), "{}", space.len());
    assert_eq!(space.len(), 190);
    assert!(space.iter().all(|c| c.validate(48 * 1024).is_ok()));
    assert_eq!(space, matmul_space());
    assert_eq!(reduce_space().len(), 16);
    assert_eq!(schedule_space(SpaceKind::Matmul).len(), space.len());
}

#[test]
fn default_load_mapping_is_cooperative() {
    let cfg = MatmulConfig::default();
    assert_eq!(cfg.threads_per_block, 128);
    let m = cfg.load_mapping(64, 8).unwrap();
    let want = TaskMapping::repeat(&[4, 1])
        .unwrap()
        .compose(&TaskMapping::spatial(&[16, 8]).unwrap())
        .unwrap();
    assert_eq!(m, want);
    assert_eq!(m.assign(0).unwrap(), vec![vec![0, 0], vec![16, 0], vec![32, 0], vec![48, 0]]);
    let c = cfg.compute_mapping().unwrap();
    assert_eq!(c.num_workers(), 128);
    assert_eq!(c.task_shape().dims(), &[64, 64]);
}

#[test]
fn config_json_roundtrip() {
    let c = ScheduleConfig::Matmul(MatmulConfig::new(32, 64, 16, true, 2));
    let s = serde_json::to_string(&c).unwrap();
    assert!(s.contains("\"kind\":\"matmul\""), "{s}");
    assert_eq!(serde_json::from_str::<ScheduleConfig>(&s).unwrap(), c);
}

#[test]
fn invalid_configs_rejected() {
    let mut c = MatmulConfig::default();
    c.threads_per_block = 96;
    assert!(matches!(c.validate(SHARED_LIMIT), Err(ScheduleError::InvalidConfig(_))));
    let big = MatmulConfig::new(128, 128, 32, true, 1);
    assert!(matches!(big.validate(SHARED_LIMIT), Err(ScheduleError::SharedOverflow { .. })));
    assert!(matmul_template(&MatmulSpec::new(4, 4, 4, DType::I32), &big).is_err());
}

#[test]
fn matmul_default_64() {
    let dag = compute_ir::matmul(64, 64, 64, DType::I32);
    let p = matmul_template(&MatmulSpec::new(64, 64, 64, DType::I32), &MatmulConfig::default()).unwrap();
    assert_eq!(p.kernels[0].grid_dim, 1);
    check(&dag, &p, 1);
}

#[test]
fn matmul_ragged_shapes_all_variants() {
    for (m, n, k) in [(100, 100, 100), (1, 1, 1), (37, 5, 19)] {
        let dag = compute_ir::matmul(m, n, k, DType::I32);
        for cfg in [
            MatmulConfig::new(64, 64, 8, false, 1),
            MatmulConfig::new(16, 128, 16, true, 1),
            MatmulConfig::new(32, 16, 32, false, 2),
            MatmulConfig::new(128, 32, 8, true, 2),
        ] {
            let p = template_schedule(&dag, &ScheduleConfig::Matmul(cfg)).unwrap();
            let grid = m.div_ceil(cfg.block_m) * n.div_ceil(cfg.block_n) * cfg.split_k;
            assert_eq!(p.kernels[0].grid_dim, grid);
            check(&dag, &p, 7);
        }
    }
}

#[test]
fn matmul_f32() {
    let dag = compute_ir::matmul(33, 20, 45, DType::F32);
    let p = template_schedule(&dag, &ScheduleConfig::Matmul(MatmulConfig::new(32, 32, 16, true, 2))).unwrap();
    check(&dag, &p, 3);
}

#[test]
fn pipeline_structure() {
    let spec = MatmulSpec::new(64, 64, 64, DType::I32);
    let on = matmul_template(&spec, &MatmulConfig::new(64, 64, 8, true, 1)).unwrap();
    let off = matmul_template(&spec, &MatmulConfig::new(64, 64, 8, false, 1)).unwrap();
    assert!(pipeline_prefetch_precedes_compute(&on.kernels[0]));
    assert!(pipeline_prefetch_precedes_compute(&lower_program(&on).unwrap().kernels[0]));
    assert!(!pipeline_prefetch_precedes_compute(&off.kernels[0]));
}

#[test]
fn doubling_block_k_halves_barriers() {
    let dag = compute_ir::matmul(64, 64, 64, DType::I32);
    let ins = inputs(&dag, 0);
    // Executed barriers per block, isolated by perturbing the barrier weight.
    let barriers = |bk| {
        let spec = MatmulSpec::new(64, 64, 64, DType::I32);
        let p = lower_program(&matmul_template(&spec, &MatmulConfig::new(64, 64, bk, false, 1)).unwrap()).unwrap();
        let mut machine = MachineSpec::default();
        let base = run_program(&p, &ins, &machine).unwrap().cost.per_block_cost;
        machine.weights.barrier += 1;
        run_program(&p, &ins, &machine).unwrap().cost.per_block_cost - base
    };
    assert_eq!(barriers(8), 128 * 2 * 8);
    assert_eq!(barriers(16), 128 * 2 * 4);
}

#[test]
fn reduce_template_examples() {
    let dag = compute_ir::reduce(&[2048], &[0], Combiner::Sum, DType::I32).unwrap();
    let spec = ReduceSpec::from_dag(&dag, "Y").unwrap();
    let p = lower_program(
        &reduce_template(&spec, &ReduceConfig { threads_per_block: 128, parts: 1 }).unwrap(),
    )
    .unwrap();
    let ones = BTreeMap::from([("X".to_string(), Tensor::from_i32(&[2048], vec![1; 2048]))]);
    let r = run_program(&p, &ones, &MachineSpec::default()).unwrap();
    assert_eq!(r.outputs["Y"].as_i32().unwrap(), &[2048]);

    let dag = compute_ir::reduce(&[1], &[0], Combiner::Max, DType::F32).unwrap();
    let p = template_schedule(&dag, &ScheduleConfig::Reduce(ReduceConfig::default())).unwrap();
    let x = BTreeMap::from([("X".to_string(), Tensor::from_f32(&[1], vec![-3.5]))]);
    let r = run_program(&lower_program(&p).unwrap(), &x, &MachineSpec::default()).unwrap();
    assert_eq!(r.outputs["Y"].as_f32().unwrap(), &[-3.5]);
}

#[test]
fn reduce_template_every_config() {
    for (shape, dims, comb) in [
        (vec![2039], vec![0], Combiner::Sum),
        (vec![3, 50, 7], vec![1], Combiner::Max),
        (vec![4, 300], vec![1], Combiner::Min),
    ] {
        let dag = compute_ir::reduce(&shape, &dims, comb, DType::I32).unwrap();
        for cfg in reduce_space() {
            let p = template_schedule(&dag, &ScheduleConfig::Reduce(cfg)).unwrap();
            check(&dag, &p, 11);
        }
    }
}

#[test]
fn rule_based_relu_grid() {
    let dag = compute_ir::elementwise(&[1000], DType::I32, 1, |x| x[0].clone().relu());
    let p = rule_based_schedule(&dag).unwrap();
    assert_eq!(p.kernels.len(), 1);
    assert_eq!(p.kernels[0].grid_dim, 8);
    assert_eq!(p.kernels[0].block_dim, RULE_BLOCK_DIM);
    assert!(p.kernels[0].to_string().contains("if idx < 1000"), "{}", p.kernels[0]);
    check(&dag, &p, 2);
}

#[test]
fn rule_based_chains_and_copies() {
    let dag = compute_ir::elementwise(&[7, 9], DType::F32, 1, |x| x[0].clone() * 2.0f32 + 1.0f32);
    let p = rule_based_schedule(&dag).unwrap();
    check(&dag, &p, 4);
    let dag = compute_ir::reshape(&[6, 4], &[3, 8], DType::I32).unwrap();
    check(&dag, &rule_based_schedule(&dag).unwrap(), 5);
    let dag = compute_ir::transpose(&[3, 5, 2], &[2, 0, 1], DType::I32).unwrap();
    check(&dag, &rule_based_schedule(&dag).unwrap(), 6);
    let dag = compute_ir::matmul(9, 7, 30, DType::I32);
    check(&dag, &rule_based_schedule(&dag).unwrap(), 8);
}

#[test]
fn rule_based_rejects_large_reductions() {
    let dag = compute_ir::matmul(4, 4, 300, DType::I32);
    assert_eq!(
        rule_based_schedule(&dag),
        Err(ScheduleError::TemplateRequired {
            node: "C".into(),
            extent: 300
        })
    );
}

#[test]
fn space_kind_detection() {
    let dag = compute_ir::matmul(4, 4, 4, DType::I32);
    assert_eq!(space_kind(&dag, "C"), Some(SpaceKind::Matmul));
    let dag = compute_ir::reduce(&[4, 4], &[1], Combiner::Sum, DType::I32).unwrap();
    assert_eq!(space_kind(&dag, "Y"), Some(SpaceKind::Reduce));
    assert_eq!(space_kind(&dag, "X"), None);
}
