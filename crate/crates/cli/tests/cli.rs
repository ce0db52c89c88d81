use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rwre-lab")).args(args).output().unwrap()
}

fn run_config(dir: &Path, kind: &str, cfg: &Value, extra: &[&str]) -> (Output, std::path::PathBuf) {
    let path = dir.join(format!("{kind}.json"));
    std::fs::write(&path, cfg.to_string()).unwrap();
    let out = dir.join(format!("{kind}-out"));
    let mut args = vec![kind, "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    (lab(&args), out)
}

fn summary(out: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap()
}

fn error_line(o: &Output) -> Value {
    let text = String::from_utf8(o.stderr.clone()).unwrap();
    assert_eq!(text.trim_end().lines().count(), 1, "stderr: {text}");
    serde_json::from_str(text.trim()).unwrap()
}

fn homogeneous_2d() -> Value {
    json!({"dim": 2, "family": "homogeneous", "params": {"q": [0.3, 0.2, 0.3, 0.2]}, "eta": 0.2})
}

#[test]
fn tv_partition_on_a_homogeneous_spec_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = json!({"environment": homogeneous_2d(), "seed": 3, "params": {"n_grid": [8, 16], "m_grid": [1, 2, 4], "samples": 20}});
    let (o, out) = run_config(tmp.path(), "tv-partition", &cfg, &[]);
    assert!(o.status.success());
    let s = summary(&out);
    let rows = s["results"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 6);
    for r in rows {
        assert!(r["defect"].as_f64().unwrap() <= 3.0 * r["error"].as_f64().unwrap() + 1e-12);
    }
    assert_eq!(s["tables"], json!(["defects.csv"]));
    let csv = std::fs::read_to_string(out.join("defects.csv")).unwrap();
    assert!(csv.starts_with("seed,spec_hash,n,metric,grid,grid_value,defect,error,samples\n"));
    assert!(!s["warnings"].as_array().unwrap().is_empty());
}

#[test]
fn identical_configs_give_identical_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = json!({"environment": {"dim": 2, "family": "elliptic-dirichlet", "params": {"alpha": [1.0, 1.0, 1.0, 1.0]}, "eta": 0.05},
                     "seed": 9, "params": {"n": 10, "samples": 40}});
    let (a, out_a) = run_config(tmp.path(), "annealed-dist", &cfg, &[]);
    let first = (std::fs::read(out_a.join("summary.json")).unwrap(), std::fs::read(out_a.join("annealed.csv")).unwrap());
    let (b, out_b) = run_config(tmp.path(), "annealed-dist", &cfg, &["--threads", "3"]);
    assert!(a.status.success() && b.status.success());
    assert_eq!(out_a, out_b);
    assert_eq!(first.0, std::fs::read(out_b.join("summary.json")).unwrap());
    assert_eq!(first.1, std::fs::read(out_b.join("annealed.csv")).unwrap());
}

#[test]
fn condition_t_reproduces_gamblers_ruin() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = json!({"environment": {"dim": 1, "family": "homogeneous", "params": {"q": [0.7, 0.3]}, "eta": 0.3},
                     "seed": 4, "params": {"levels": [2, 4, 8], "samples": 10000, "t_max": 100000}});
    let (o, out) = run_config(tmp.path(), "condition-t", &cfg, &[]);
    assert!(o.status.success());
    let s = summary(&out);
    let r: f64 = 3.0 / 7.0;
    for p in s["results"]["points"].as_array().unwrap() {
        let l = p["level"].as_i64().unwrap() as i32;
        let want = r.powi(l) / (1.0 + r.powi(l));
        let (lo, hi) = (p["ci_lo"].as_f64().unwrap(), p["ci_hi"].as_f64().unwrap());
        assert!(lo <= want && want <= hi, "L={l}: [{lo}, {hi}] vs {want}");
    }
}

#[test]
fn toml_configs_and_flag_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("q.toml");
    std::fs::write(
        &path,
        "seed = 1\n[environment]\ndim = 1\nfamily = \"two-point\"\nparams = { law_a = [0.6, 0.4], law_b = [0.8, 0.2], p = 0.5 }\neta = 0.2\n[params]\nn = 6\n",
    )
    .unwrap();
    let hash = |extra: &[&str]| {
        let out = tmp.path().join(format!("out{}", extra.len()));
        let mut args = vec!["quenched-dist", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        let o = lab(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let s = summary(&out);
        assert!((s["results"]["total"].as_f64().unwrap() - 1.0).abs() < 1e-12);
        (s["config_hash"].as_str().unwrap().to_string(), s["seed"].clone())
    };
    let (base, _) = hash(&[]);
    let (threads, _) = hash(&["--threads", "2"]);
    let (reseeded, seed) = hash(&["--seed", "340282366920938463463374607431768211455", "--prune", "0"]);
    assert_eq!(base, threads);
    assert_ne!(base, reseeded);
    assert_eq!(seed, json!("340282366920938463463374607431768211455"));
}

#[test]
fn configuration_errors_exit_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let env = homogeneous_2d();
    let cases = [
        ("quenched-dist", json!({"environment": env, "params": {"n": 4}})),
        ("tv-partition", json!({"environment": env, "seed": 1, "params": {"n_grid": [], "m_grid": [1], "samples": 2}})),
        ("quenched-dist", json!({"environment": env, "seed": 1, "params": {"n": 4, "bogus": 1}})),
        ("quenched-dist", json!({"environment": env, "seed": 1, "prune": -1.0, "params": {"n": 4}})),
        ("quenched-dist", json!({"environment": env, "seed": 1, "params": {}})),
        ("quenched-dist", json!({"kind": "coupling", "environment": env, "seed": 1, "params": {"n": 4}})),
        ("quenched-dist", json!({"environment": {"dim": 1, "family": "homogeneous", "params": {"q": [0.9, 0.1]}, "eta": 0.3}, "seed": 1, "params": {"n": 4}})),
    ];
    for (kind, cfg) in cases {
        let (o, _) = run_config(tmp.path(), kind, &cfg, &[]);
        assert_eq!(o.status.code(), Some(2), "{cfg}");
        let e = error_line(&o);
        assert_eq!(e["error"], "config");
        assert_eq!(e["code"], 2);
    }
    let o = lab(&["quenched-dist"]);
    assert_eq!(o.status.code(), Some(2));
    error_line(&o);
    let o = lab(&["no-such-kind"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn resource_errors_exit_with_code_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = json!({"environment": homogeneous_2d(), "seed": 1, "max_sites": 10, "params": {"n": 30}});
    let (o, _) = run_config(tmp.path(), "quenched-dist", &cfg, &[]);
    assert_eq!(o.status.code(), Some(3));
    let e = error_line(&o);
    assert_eq!(e["error"], "resource");
}
