use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn taskmap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_taskmap"))
        .args(args)
        .output()
        .expect("spawn taskmap")
}

fn data(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json_out(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", stdout(o)))
}

fn diagnostic(o: &Output) -> Value {
    serde_json::from_slice(&o.stderr).expect("stderr carries a JSON diagnostic")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("taskmap-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

#[test]
fn map_show_prints_row_major_grid() {
    let o = taskmap(&["map", "show", "repeat(2,2)"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("w0:0 w0:1\nw0:2 w0:3\n"), "{}", stdout(&o));

    let o = taskmap(&["map", "show", "spatial(2,2)"]);
    assert!(stdout(&o).contains("w0:0 w1:0\nw2:0 w3:0\n"), "{}", stdout(&o));
}

#[test]
fn map_compose_reports_cooperative_load() {
    let o = taskmap(&["map", "compose", "repeat(4,1)", "spatial(16,8)", "--json"]);
    assert!(o.status.success());
    let v = json_out(&o);
    assert_eq!(v["num_workers"], 128);
    assert_eq!(v["task_shape"], serde_json::json!([64, 8]));
    assert_eq!(v["assignment"][0], serde_json::json!([[0, 0], [16, 0], [32, 0], [48, 0]]));
}

#[test]
fn usage_errors_exit_two_with_diagnostics() {
    let o = taskmap(&["map", "show", "repeat(2,"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(diagnostic(&o)["error"], "usage");

    let o = taskmap(&["compile", "/nonexistent/graph.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(diagnostic(&o)["error"], "usage");

    let o = taskmap(&["tune", "matmul:8x8x8", "--config", "matmul:bm3_bn8_bk8_nopipe_sk1"]);
    assert_eq!(o.status.code(), Some(2));

    let o = taskmap(&["bench", "matmul", "--sizes", "9..x"]);
    assert_eq!(o.status.code(), Some(2));

    let o = taskmap(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn compile_emits_text_and_json() {
    let g = data("conv_bn_relu.json");
    let o = taskmap(&["compile", &g]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.matches("kernel ").count(), 1, "{text}");
    assert!(text.contains("global R[1, 8, 8, 8]: i32;"));

    let o = taskmap(&["compile", &g, "--no-fuse", "--format", "json"]);
    assert!(o.status.success());
    let v = json_out(&o);
    assert!(v["kernels"].as_array().unwrap().len() > 1);

    let o = taskmap(&["compile", &g, "--lowered", "--config", "matmul:bm32_bn32_bk16_t128_pipe_sk2"]);
    assert!(o.status.success());
    assert!(!stdout(&o).contains(" on blockIdx"));
}

#[test]
fn fuse_reports_partition() {
    let o = taskmap(&["fuse", &data("conv_bn_relu.json"), "--format", "json"]);
    assert!(o.status.success());
    let v = json_out(&o);
    let groups = v["subgraphs"].as_array().unwrap();
    assert_eq!(groups.len(), 1);
    assert_eq!(groups[0]["anchor"], "Y_mm");
    assert_eq!(groups[0]["epilogue"], serde_json::json!(["Y", "B", "R"]));
}

#[test]
fn run_checks_against_reference() {
    let g = data("conv_bn_relu.json");
    for extra in [&[][..], &["--no-fuse"][..]] {
        let mut args = vec!["run", &g, "--seed", "5", "--check", "--no-data"];
        args.extend_from_slice(extra);
        let o = taskmap(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let v = json_out(&o);
        assert_eq!(v["matches_reference"], true);
        assert_eq!(v["cost"]["races"], 0);
    }
}

#[test]
fn compiled_kernels_run_from_text() {
    let dag = scratch("relu.json");
    std::fs::write(
        &dag,
        r#"{"inputs": [{"name": "X", "shape": [2, 3], "dtype": "i32"}],
            "ops": [{"name": "Y", "op": "relu", "inputs": ["X"]}],
            "outputs": ["Y"]}"#,
    )
    .unwrap();
    let o = taskmap(&["compile", dag.to_str().unwrap()]);
    assert!(o.status.success());
    let kernels = scratch("relu.tm");
    std::fs::write(&kernels, o.stdout).unwrap();

    let input = format!("X={}", data("x_small.json"));
    let o = taskmap(&["run", kernels.to_str().unwrap(), "--input", &input]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json_out(&o);
    assert_eq!(v["outputs"]["Y"]["data"], serde_json::json!([1, 0, 3, 0, 5, 0]));

    let o = taskmap(&["run", kernels.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "missing input is a usage error");
}

#[test]
fn tune_is_deterministic() {
    let args = ["tune", "matmul:24x20x36", "--seed", "9"];
    let a = json_out(&taskmap(&args));
    let b = json_out(&taskmap(&args));
    let strip = |mut v: Value| {
        v.as_object_mut().unwrap().remove("elapsed_ms");
        v
    };
    assert_eq!(strip(a.clone()), strip(b));
    assert!(a["best"].is_object());
    assert_eq!(a["results"].as_array().unwrap().len(), a["space_size"].as_u64().unwrap() as usize);
}

#[test]
fn tune_writes_report_file() {
    let out = scratch("report.json");
    let o = taskmap(&[
        "tune",
        "reduce:3x70,1,max",
        "--sequential",
        "-o",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["workload"]["op"], "reduce");
    assert_eq!(v["best"]["kind"], "reduce");
}

#[test]
fn bench_emits_one_row_per_size() {
    let o = taskmap(&["bench", "matmul", "--sizes", "30..32"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "m,n,k,config,blocks,waves,per_block_cost,total_cost,space_size,correct");
    assert_eq!(lines.len(), 4);
    assert!(lines[1..].iter().all(|l| l.ends_with(",true")));
}

#[test]
fn selftest_passes() {
    let o = taskmap(&["selftest", "--json"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let v = json_out(&o);
    assert!(v.as_array().unwrap().iter().all(|c| c["passed"] == true));
}
