use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn cfg(name: &str) -> String {
    configs().join(name).display().to_string()
}

fn mmplan(args: &[&str]) -> (i32, Value) {
    let out = Command::new(env!("CARGO_BIN_EXE_mmplan")).args(args).output().expect("binary runs");
    let code = out.status.code().expect("exit code");
    let value = if out.stdout.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
            panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout))
        })
    };
    (code, value)
}

fn ok(args: &[&str]) -> Value {
    let (code, v) = mmplan(args);
    assert_eq!(code, 0, "{v}");
    v
}

fn f(v: &Value, ptr: &str) -> f64 {
    v.pointer(ptr).and_then(Value::as_f64).unwrap_or_else(|| panic!("missing {ptr}"))
}

fn plan_file(dir: &Path, bs: &str, workload: &str) -> String {
    let path = dir.join(format!("plan-{bs}.json"));
    let p = path.display().to_string();
    let m = cfg("mllm9b.toml");
    let c = cfg("cluster-16.toml");
    let w = cfg(workload);
    ok(&["plan", "--model", &m, "--cluster", &c, "--bs", bs, "--workload", &w, "--out", &p]);
    p
}

fn simulate(plan: &str, workload: &str, extra: &[&str]) -> Value {
    let m = cfg("mllm9b.toml");
    let c = cfg("cluster-16.toml");
    let w = cfg(workload);
    let mut args = vec!["simulate", "--model", &m, "--cluster", &c, "--plan", plan, "--workload", &w];
    args.extend_from_slice(extra);
    ok(&args)
}

#[test]
fn plan_lists_every_candidate_and_is_deterministic() {
    let m = cfg("mllm9b.toml");
    let c = cfg("cluster-16.toml");
    let args = ["plan", "--model", &m, "--cluster", &c, "--bs", "32"];
    let a = ok(&args);
    let b = ok(&args);
    assert_eq!(a["digest"], b["digest"]);
    assert_eq!(a["candidate_count"].as_u64().unwrap() as usize, a["candidates"].as_array().unwrap().len());
    let alloc = a.pointer("/chosen/plan/alloc").unwrap();
    let used: u64 = ["encoder", "backbone", "generator"].iter().map(|k| alloc[k].as_u64().unwrap()).sum();
    assert!(used <= 16);
    let best = f(&a, "/chosen/prediction/t_iter");
    for cand in a["candidates"].as_array().unwrap() {
        if let Some(t) = cand.pointer("/prediction/t_iter").and_then(Value::as_f64) {
            assert!(t >= best);
        }
    }
}

#[test]
fn sequential_and_parallel_reports_match() {
    let m = cfg("mllm9b.toml");
    let c = cfg("cluster-16.toml");
    let par = ok(&["plan", "--model", &m, "--cluster", &c, "--bs", "64"]);
    let seq = ok(&["plan", "--model", &m, "--cluster", &c, "--bs", "64", "--sequential"]);
    assert_eq!(par["digest"], seq["digest"]);
}

#[test]
fn baseline_pins_are_reported_and_honoured() {
    let m = cfg("mllm9b.toml");
    let c = cfg("cluster-16.toml");
    let v = ok(&["plan", "--model", &m, "--cluster", &c, "--bs", "32", "--baseline-tp", "4", "--baseline-pp", "2"]);
    assert_eq!(v.pointer("/baseline_settings/tp"), Some(&Value::from(4)));
    assert_eq!(v.pointer("/baseline_settings/backbone_pp"), Some(&Value::from(2)));
    for unit in ["encoder", "backbone", "generator"] {
        assert_eq!(v.pointer(&format!("/baseline/plan/{unit}/tp")), Some(&Value::from(4)));
    }
    assert_eq!(v.pointer("/baseline/plan/backbone/pp"), Some(&Value::from(2)));
    // Three TP8 units need 24 GPUs.
    let v = ok(&["plan", "--model", &m, "--cluster", &c, "--bs", "32", "--baseline-tp", "8"]);
    assert!(v["baseline"].is_null());
    assert!(v["baseline_error"].is_string());
}

#[test]
fn uniform_batch_is_left_alone_by_reordering() {
    let dir = tempfile::tempdir().unwrap();
    let plan = plan_file(dir.path(), "16", "workload-uniform.toml");
    let none = simulate(&plan, "workload-uniform.toml", &["--reorder", "none"]);
    let both = simulate(&plan, "workload-uniform.toml", &["--reorder", "both"]);
    let t0 = f(&none, "/simulation/reordered/t_iter");
    let t1 = f(&both, "/simulation/reordered/t_iter");
    assert!((t0 - t1).abs() <= 1e-9 * t0, "{t0} vs {t1}");
    assert_eq!(f(&none, "/simulation/ratio"), 1.0);
}

#[test]
fn skewed_batch_reorder_report_is_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let plan = plan_file(dir.path(), "32", "workload.toml");
    let m = cfg("mllm9b.toml");
    let c = cfg("cluster-16.toml");
    let w = cfg("workload.toml");
    let v = ok(&["reorder", "--model", &m, "--cluster", &c, "--plan", &plan, "--workload", &w]);
    let mut perm: Vec<u64> = v["permutation"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).collect();
    perm.sort_unstable();
    assert_eq!(perm, (0..32).collect::<Vec<_>>());
    let ratio = f(&v, "/t_iter_after") / f(&v, "/t_iter_before");
    assert!((ratio - f(&v, "/ratio")).abs() < 1e-12);
    let sum = |k: &str| v[k].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum::<f64>();
    assert!((sum("group_loads_before") - sum("group_loads_after")).abs() <= 1e-6 * sum("group_loads_before"));
}

#[test]
fn interleaving_halves_predicted_warm_up() {
    let dir = tempfile::tempdir().unwrap();
    let m = cfg("mllm9b.toml");
    let c = cfg("cluster-16.toml");
    let w = cfg("workload-uniform.toml");
    let path = dir.path().join("plan.json").display().to_string();
    // A pinned deep pipeline so the backbone has more than one stage to interleave.
    std::fs::write(
        &path,
        r#"{"alloc":{"encoder":2,"backbone":12,"generator":2},"encoder":{"tp":1,"dp":1,"pp":2},
           "backbone":{"tp":2,"dp":1,"pp":6},"generator":{"tp":1,"dp":1,"pp":2},"global_batch":30,"vpp":1}"#,
    )
    .unwrap();
    let base = ["simulate", "--model", &m, "--cluster", &c, "--plan", &path, "--workload", &w, "--reorder", "none"];
    let one = ok(&base);
    let mut args = base.to_vec();
    args.extend(["--vpp", "2"]);
    let two = ok(&args);
    let warm = |v: &Value| f(v, "/simulation/predicted/t_warm");
    assert!((warm(&two) - warm(&one) / 2.0).abs() < 1e-9 * warm(&one));
    assert!(f(&two, "/simulation/identity/bubble_fraction") < f(&one, "/simulation/identity/bubble_fraction"));
    assert!(f(&two, "/simulation/identity/t_iter") < f(&one, "/simulation/identity/t_iter"));
}

#[test]
fn compare_speedups_agree_with_sides() {
    let m = cfg("mllm9b.toml");
    let c = cfg("cluster-16.toml");
    let w = cfg("workload.toml");
    let v = ok(&["compare", "--model", &m, "--cluster", &c, "--workload", &w, "--bs", "32"]);
    let base = f(&v, "/baseline/simulation/identity/t_iter");
    assert!((f(&v, "/speedup") - base / f(&v, "/optimized/simulation/reordered/t_iter")).abs() < 1e-12);
    assert!((f(&v, "/speedup_without_reorder") - base / f(&v, "/optimized/simulation/identity/t_iter")).abs() < 1e-12);
    let predicted = f(&v, "/baseline/predicted/t_iter") / f(&v, "/optimized/predicted/t_iter");
    assert!((f(&v, "/predicted_speedup") - predicted).abs() < 1e-12);
    assert!(f(&v, "/predicted_speedup") >= 1.0 - 1e-12);
}

#[test]
fn generated_trace_feeds_simulation() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("batch.jsonl").display().to_string();
    let w = cfg("workload.toml");
    let (code, _) = mmplan(&["generate", "--workload", &w, "--bs", "32", "--seed", "11", "--out", &trace]);
    assert_eq!(code, 0);
    assert_eq!(std::fs::read_to_string(&trace).unwrap().lines().count(), 32);
    let plan = plan_file(dir.path(), "32", "workload.toml");
    let m = cfg("mllm9b.toml");
    let c = cfg("cluster-16.toml");
    let v = ok(&["simulate", "--model", &m, "--cluster", &c, "--plan", &plan, "--workload", &trace]);
    assert!(f(&v, "/simulation/reordered/t_iter") > 0.0);
}

#[test]
fn errors_carry_exit_codes() {
    let m = cfg("mllm9b.toml");
    let c = cfg("cluster-16.toml");
    let (code, v) = mmplan(&["plan", "--model", &m, "--cluster", "missing.toml", "--bs", "4"]);
    assert_eq!(code, 2);
    assert_eq!(v.pointer("/error/kind"), Some(&Value::from("config")));
    let (code, v) = mmplan(&["plan", "--model", &m, "--cluster", &c, "--bs", "0"]);
    assert_eq!(code, 3);
    assert_eq!(v.pointer("/error/exit_code"), Some(&Value::from(3)));
    let dir = tempfile::tempdir().unwrap();
    let plan = plan_file(dir.path(), "32", "workload.toml");
    let w = cfg("workload.toml");
    let (code, _) = mmplan(&["simulate", "--model", &m, "--cluster", &c, "--plan", &plan, "--workload", &w, "--bs", "8"]);
    assert_eq!(code, 2);
}
