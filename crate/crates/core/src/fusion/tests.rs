use std::collections::BTreeMap;

use super::*;
use crate::compute_ir::{self, reference_eval, BatchNormParams, Combiner, ConvGeometry, DagBuilder};
use crate::expr::{Expr, EPILOGUE_VALUE};
use crate::mapping::TaskMapping;
use crate::program_ir::{wellformed, Buffer, Kernel, Program, Scope, Stmt, THREAD_IDX};
use crate::scheduler::{lower_program, matmul_space, MatmulConfig, ReduceConfig, ScheduleConfig};
use crate::tensor::{DType, Tensor};
use crate::vm::{run_program, MachineSpec};

fn inputs(dag: &ComputeDag, seed: u64) -> BTreeMap<String, Tensor> {
    let mut rng = Tensor::seeded_rng(seed);
    dag.inputs
        .iter()
        .map(|i| {
            let n = dag.node(i).unwrap();
            (i.clone(), Tensor::random(&n.shape, n.dtype, -5, 5, &mut rng))
        })
        .collect()
}

fn execute(program: &Program, ins: &BTreeMap<String, Tensor>) -> BTreeMap<String, Tensor> {
    let lowered = lower_program(program).unwrap();
    for k in &lowered.kernels {
        let d = wellformed(k);
        assert!(d.is_empty(), "{}: {d:?}\n{k}", k.name);
    }
    let r = run_program(&lowered, ins, &MachineSpec::default()).unwrap();
    assert!(r.races.is_empty(), "races: {:?}", &r.races[..1]);
    r.outputs
}

fn check(dag: &ComputeDag, opts: &CompileOptions, seed: u64) {
    let p = compile_dag(dag, opts).unwrap();
    let ins = inputs(dag, seed);
    let got = execute(&p, &ins);
    for (name, want) in reference_eval(dag, &ins).unwrap() {
        let g = &got[&name];
        assert!(g.matches(&want, 1e-4), "{name} differs at {:?}", g.first_mismatch(&want, 1e-4));
    }
}

fn conv_geometry() -> ConvGeometry {
    ConvGeometry {
        n: 1,
        c: 4,
        h: 8,
        w: 8,
        f: 4,
        kh: 3,
        kw: 3,
        stride: 1,
        pad: 1,
    }
}

fn bn_params(channels: usize) -> BatchNormParams {
    BatchNormParams {
        gamma: (0..channels).map(|c| 1.0 + c as f32 * 0.5).collect(),
        beta: (0..channels).map(|c| c as f32 - 1.5).collect(),
        mean: (0..channels).map(|c| c as f32 * 0.25).collect(),
        var: vec![4.0; channels],
        eps: 0.0,
    }
}

fn conv_bn_relu(dtype: DType) -> ComputeDag {
    let g = conv_geometry();
    let mut b = DagBuilder::new();
    b.input("X", &[g.n, g.c, g.h, g.w], dtype);
    b.input("W", &[g.f, g.c, g.kh, g.kw], dtype);
    b.conv2d("Y", "X", "W", g.stride, g.pad).unwrap();
    b.batchnorm("B", "Y", &bn_params(g.f)).unwrap();
    b.relu("R", "B");
    b.build(&["R"]).unwrap()
}

/// Nested-loop convolution followed by ReLU.
fn direct_conv_relu(g: &ConvGeometry, x: &[i32], w: &[i32]) -> Vec<i32> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut out = vec![0; g.n * g.f * ho * wo];
    for n in 0..g.n {
        for f in 0..g.f {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut s = 0i32;
                    for c in 0..g.c {
                        for ki in 0..g.kh {
                            for kj in 0..g.kw {
                                let ih = (oh * g.stride + ki) as i64 - g.pad as i64;
                                let iw = (ow * g.stride + kj) as i64 - g.pad as i64;
                                if ih < 0 || iw < 0 || ih >= g.h as i64 || iw >= g.w as i64 {
                                    continue;
                                }
                                let xi = ((n * g.c + c) * g.h + ih as usize) * g.w + iw as usize;
                                let wi = ((f * g.c + c) * g.kh + ki) * g.kw + kj;
                                s += x[xi] * w[wi];
                            }
                        }
                    }
                    out[((n * g.f + f) * ho + oh) * wo + ow] = s.max(0);
                }
            }
        }
    }
    out
}

fn reversed_copy() -> Kernel {
    Kernel {
        name: "reverse".into(),
        grid_dim: 1,
        block_dim: 100,
        params: vec![
            Buffer::new("A", Scope::Global, &[100], DType::F32),
            Buffer::new("B", Scope::Global, &[100], DType::F32),
        ],
        shared: vec![],
        locals: vec![],
        body: Stmt::map_loop(
            TaskMapping::spatial(&[100]).unwrap(),
            Expr::var(THREAD_IDX),
            &["i"],
            Stmt::store("B", vec![Expr::var("i")], Expr::load("A", vec![Expr::Int(99) - Expr::var("i")])),
        ),
    }
}

#[test]
fn fig11_rewrites_accesses() {
    let c = Buffer::new("C", Scope::Global, &[100], DType::F32);
    let d = Buffer::new("D", Scope::Global, &[2, 50], DType::F32);
    let pro = Prologue::new("A", &["i"], Expr::load("C", vec![Expr::var("i")]) * 2.0f32, vec![c.clone()]);
    let i = || Expr::var("i");
    let ep = Epilogue::new(
        &["i"],
        Expr::var(EPILOGUE_VALUE) * 3.0f32,
        d.clone(),
        vec![i() / 50i64, i() % 50i64],
        vec![],
    );
    let k = fuse_epilogue(&fuse_prologue(&reversed_copy(), &pro).unwrap(), "B", &ep).unwrap();
    let text = k.to_string();
    assert!(text.contains("D[i / 50, i % 50] = C[99 - i] * 2.0 * 3.0;"), "{text}");
    assert_eq!(k.params, vec![c.clone(), d.clone()]);

    let program = Program::single(k, vec![c], vec![d]);
    let data: Vec<f32> = (0..100).map(|v| v as f32 - 40.0).collect();
    let ins = BTreeMap::from([("C".to_string(), Tensor::from_f32(&[100], data.clone()))]);
    let out = execute(&program, &ins);
    let want: Vec<f32> = (0..100).map(|i| data[99 - i] * 2.0 * 3.0).collect();
    assert_eq!(out["D"].as_f32().unwrap(), &want[..]);
}

#[test]
fn identity_fusions_keep_semantics() {
    let a = Buffer::new("A", Scope::Global, &[100], DType::F32);
    let b = Buffer::new("B", Scope::Global, &[100], DType::F32);
    let original = reversed_copy();
    let pro = Prologue::new("A", &["i"], Expr::load("A2", vec![Expr::var("i")]), vec![Buffer::new("A2", Scope::Global, &[100], DType::F32)]);
    let ep = Epilogue::new(&["i"], Expr::var(EPILOGUE_VALUE), b.clone(), vec![Expr::var("i")], vec![]);
    let fused = fuse_epilogue(&fuse_prologue(&original, &pro).unwrap(), "B", &ep).unwrap();
    let data: Vec<f32> = (0..100).map(|v| v as f32 * 0.5).collect();
    let run = |k: Kernel, input: &str| {
        let p = Program::single(k, vec![Buffer { name: input.into(), ..a.clone() }], vec![b.clone()]);
        let ins = BTreeMap::from([(input.to_string(), Tensor::from_f32(&[100], data.clone()))]);
        execute(&p, &ins)["B"].clone()
    };
    assert_eq!(run(original, "A"), run(fused, "A2"));
}

#[test]
fn invalid_fusions_rejected() {
    let mm = compute_ir::matmul(4, 4, 4, DType::I32);
    assert_eq!(Prologue::from_dag(&mm, "C", &[]), Err(FusionError::NotInjective("C".into())));

    let d = Buffer::new("D", Scope::Global, &[2, 50], DType::F32);
    let i = || Expr::var("i");
    let squash = Epilogue::new(&["i"], Expr::var(EPILOGUE_VALUE), d.clone(), vec![i() / 50i64, Expr::Int(0)], vec![]);
    assert!(matches!(fuse_epilogue(&reversed_copy(), "B", &squash), Err(FusionError::NotBijective(_))));
    let outside = Epilogue::new(&["i"], Expr::var(EPILOGUE_VALUE), d, vec![i() / 50i64, i()], vec![]);
    assert!(matches!(fuse_epilogue(&reversed_copy(), "B", &outside), Err(FusionError::NotBijective(_))));

    // a broadcast reads each element many times
    let mut b = DagBuilder::new();
    b.input("A", &[4, 4], DType::I32);
    b.input("B", &[4, 4], DType::I32);
    b.matmul("C", "A", "B").unwrap();
    b.compute(
        "E",
        vec![compute_ir::Axis::new("i", 4), compute_ir::Axis::new("j", 4)],
        DType::I32,
        Expr::load("C", vec![Expr::var("i"), Expr::Int(0)]),
    );
    let dag = b.build(&["E"]).unwrap();
    assert_eq!(
        Epilogue::from_chain(&dag, "C", &["E".into()]),
        Err(FusionError::NotBijective("E".into()))
    );
    assert!(matches!(
        fuse_prologue(&reversed_copy(), &Prologue::new("Z", &["i"], Expr::Int(0), vec![])),
        Err(FusionError::MissingSplicePoint { .. })
    ));
}

#[test]
fn conv_bn_relu_is_one_subgraph() {
    let dag = conv_bn_relu(DType::I32);
    let groups = partition(&dag);
    assert_eq!(groups.len(), 1, "{groups:?}");
    let g = &groups[0];
    assert_eq!(g.anchor.as_deref(), Some("Y_mm"));
    assert_eq!(g.prologues.keys().collect::<Vec<_>>(), ["Y_col", "Y_wflat"]);
    assert_eq!(g.epilogue, ["Y", "B", "R"]);
    assert_eq!(g.inputs(&dag), ["X", "W"]);
    assert_eq!(g.outputs(&dag), ["R"]);

    let p = compile_dag(&dag, &CompileOptions::default()).unwrap();
    assert_eq!(p.kernels.len(), 1);
    let names: Vec<&str> = p.kernels[0].params.iter().map(|b| b.name.as_str()).collect();
    assert_eq!(names, ["X", "W", "R"]);
}

#[test]
fn fused_conv_matches_oracles() {
    let dag = conv_bn_relu(DType::I32);
    check(&dag, &CompileOptions::default(), 1);
    check(&dag, &CompileOptions { fuse: false, config: None }, 1);
    check(&conv_bn_relu(DType::F32), &CompileOptions::default(), 2);

    let g = conv_geometry();
    let mut b = DagBuilder::new();
    b.input("X", &[g.n, g.c, g.h, g.w], DType::I32);
    b.input("W", &[g.f, g.c, g.kh, g.kw], DType::I32);
    b.conv2d("Y", "X", "W", g.stride, g.pad).unwrap();
    b.relu("R", "Y");
    let dag = b.build(&["R"]).unwrap();
    let ins = inputs(&dag, 3);
    let got = execute(&compile_dag(&dag, &CompileOptions::default()).unwrap(), &ins);
    let want = direct_conv_relu(&g, ins["X"].as_i32().unwrap(), ins["W"].as_i32().unwrap());
    assert_eq!(got["R"].as_i32().unwrap(), &want[..]);
}

#[test]
fn fused_conv_every_config() {
    let dag = conv_bn_relu(DType::I32);
    let ins = inputs(&dag, 4);
    let want = &reference_eval(&dag, &ins).unwrap()["R"];
    for cfg in matmul_space() {
        let opts = CompileOptions {
            fuse: true,
            config: Some(ScheduleConfig::Matmul(cfg)),
        };
        let got = execute(&compile_dag(&dag, &opts).unwrap(), &ins);
        assert_eq!(&got["R"], want, "{cfg}");
    }
}

#[test]
fn strided_conv_without_padding() {
    let g = ConvGeometry {
        n: 2,
        c: 3,
        h: 9,
        w: 7,
        f: 5,
        kh: 3,
        kw: 2,
        stride: 2,
        pad: 0,
    };
    let dag = compute_ir::conv2d_im2col(g, DType::I32).unwrap();
    for cfg in [MatmulConfig::new(16, 16, 8, true, 2), MatmulConfig::default()] {
        let opts = CompileOptions {
            fuse: true,
            config: Some(ScheduleConfig::Matmul(cfg)),
        };
        check(&dag, &opts, 5);
    }
}

#[test]
fn relu_matmul_matmul_partition() {
    let mut b = DagBuilder::new();
    b.input("X", &[8, 6], DType::I32);
    b.input("W1", &[6, 5], DType::I32);
    b.input("W2", &[5, 7], DType::I32);
    b.relu("R", "X");
    b.matmul("M1", "R", "W1").unwrap();
    b.matmul("M2", "M1", "W2").unwrap();
    let dag = b.build(&["M2"]).unwrap();
    let groups = partition(&dag);
    assert_eq!(groups.len(), 2);
    assert_eq!(groups[0].anchor.as_deref(), Some("M1"));
    assert_eq!(groups[0].prologues, BTreeMap::from([("R".to_string(), vec![])]));
    assert_eq!(groups[1].anchor.as_deref(), Some("M2"));
    assert!(groups[1].prologues.is_empty() && groups[1].epilogue.is_empty());
    check(&dag, &CompileOptions::default(), 6);
}

#[test]
fn single_relu_is_anchor_free() {
    let dag = compute_ir::elementwise(&[10], DType::I32, 1, |x| x[0].clone().relu());
    let groups = partition(&dag);
    assert_eq!(
        groups,
        vec![FusedSubgraph {
            anchor: None,
            prologues: BTreeMap::new(),
            epilogue: vec![],
            nodes: vec!["Y".into()],
        }]
    );
    check(&dag, &CompileOptions::default(), 7);
}

#[test]
fn shared_producers_are_not_fused() {
    let mut b = DagBuilder::new();
    b.input("X", &[4, 4], DType::I32);
    b.input("W", &[4, 4], DType::I32);
    b.relu("R", "X");
    b.matmul("M", "R", "W").unwrap();
    b.elementwise("S", &["M", "R"], |a| a[0].clone() + a[1].clone()).unwrap();
    let dag = b.build(&["S"]).unwrap();
    let groups = partition(&dag);
    assert_eq!(groups.len(), 3);
    assert_eq!(groups[0].nodes, ["R"]);
    assert!(groups[1].prologues.is_empty());
    // S reads R, a computed node, so it cannot be an epilogue
    assert!(groups[1].epilogue.is_empty());
    let mut all: Vec<String> = groups.iter().flat_map(|g| g.nodes.clone()).collect();
    all.sort();
    assert_eq!(all, ["M", "R", "S"]);
    check(&dag, &CompileOptions::default(), 8);
}

#[test]
fn reduce_anchor_with_neighbours() {
    let mut b = DagBuilder::new();
    b.input("X", &[6, 40], DType::F32);
    b.elementwise("S", &["X"], |a| a[0].clone() * 0.5f32 - 1.0f32).unwrap();
    b.reduce("M", "S", &[1], Combiner::Max).unwrap();
    b.reshape("V", "M", &[2, 3]).unwrap();
    b.relu("R", "V");
    let dag = b.build(&["R"]).unwrap();
    let groups = partition(&dag);
    assert_eq!(groups.len(), 1);
    assert_eq!(groups[0].epilogue, ["V", "R"]);
    for parts in [1, 4] {
        let opts = CompileOptions {
            fuse: true,
            config: Some(ScheduleConfig::Reduce(ReduceConfig { threads_per_block: 32, parts })),
        };
        check(&dag, &opts, 9);
    }
}

#[test]
fn transposed_epilogue_and_second_reduction() {
    let mut b = DagBuilder::new();
    b.input("A", &[12, 9], DType::I32);
    b.input("B", &[9, 10], DType::I32);
    b.matmul("C", "A", "B").unwrap();
    b.transpose("T", "C", &[1, 0]).unwrap();
    b.reshape("F", "T", &[5, 24]).unwrap();
    b.reduce("S", "F", &[1], Combiner::Sum).unwrap();
    let dag = b.build(&["S"]).unwrap();
    let groups = partition(&dag);
    assert_eq!(groups.len(), 2);
    assert_eq!(groups[0].epilogue, ["T", "F"]);
    assert_eq!(groups[1].anchor.as_deref(), Some("S"));
    check(&dag, &CompileOptions::default(), 10);
}

#[test]
fn opgraph_json_expands_to_dag() {
    let json = r#"{
        "inputs": [
            {"name": "X", "shape": [1, 2, 5, 5], "dtype": "i32"},
            {"name": "K", "shape": [3, 2, 3, 3], "dtype": "i32"}
        ],
        "ops": [
            {"name": "Y", "op": "conv2d", "stride": 1, "pad": 0, "inputs": ["X", "K"]},
            {"name": "Z", "op": "relu", "inputs": ["Y"]}
        ],
        "outputs": ["Z"]
    }"#;
    let g: OpGraph = serde_json::from_str(json).unwrap();
    let dag = g.to_dag().unwrap();
    assert_eq!(dag.outputs, ["Z"]);
    assert!(dag.node("Y_mm").is_some());
    let back: OpGraph = serde_json::from_str(&serde_json::to_string(&g).unwrap()).unwrap();
    assert_eq!(back, g);
    check(&dag, &CompileOptions::default(), 11);

    let mut bad = g.clone();
    bad.ops[1].inputs = vec!["Q".into()];
    assert!(matches!(bad.to_dag(), Err(FusionError::Graph(_))));
}

#[test]
fn tensor_names_may_shadow_scratch_buffers() {
    let mut b = DagBuilder::new();
    b.input("SA", &[5, 6], DType::I32);
    b.input("acc", &[6, 3], DType::I32);
    b.matmul("S", "SA", "acc").unwrap();
    b.relu("RA", "S");
    b.reduce("SB", "RA", &[1], Combiner::Sum).unwrap();
    let dag = b.build(&["SB"]).unwrap();
    let opts = CompileOptions {
        fuse: true,
        config: Some(ScheduleConfig::Matmul(MatmulConfig::new(16, 16, 8, true, 2))),
    };
    check(&dag, &opts, 12);
    check(&dag, &CompileOptions { fuse: false, config: None }, 12);
}
