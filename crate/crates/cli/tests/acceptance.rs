//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.

use std::collections::HashMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rwre_core::coupling::point_coupling;
use rwre_core::dp::{cesaro_prefactor, normalization_constant, prefactor_field, quenched_distribution, DpConfig};
use rwre_core::dp::adjoint_evolve;
use rwre_core::env::{Environment, EnvironmentSpec, SiteLaws};
use rwre_core::estimators::{
    annealed_distribution, box_average_deviation, fixed_time_box_defect, l1_partition_distance, lclt_defect,
    lclt_density, prefactor_lclt_defect, quenched_environment, PrefactorMode,
};
use rwre_core::lattice::{BoxPartition, Direction, GridBox, Site};
use rwre_core::regen::{collect_ensemble, velocity_covariance};
use rwre_core::rng::stream;
use rwre_core::walk::{condition_t_curve, detect_regenerations, simulate_walk, Trajectory};
use serde_json::json;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn enumerate_paths<E: SiteLaws>(env: &E, n: usize) -> HashMap<Site, f64> {
    let dirs: Vec<Direction> = Direction::all(env.dim()).collect();
    let mut out = HashMap::new();
    for code in 0..dirs.len().pow(n as u32) {
        let mut c = code;
        let mut x = Site::origin();
        let mut w = 1.0;
        for _ in 0..n {
            let e = dirs[c % dirs.len()];
            c /= dirs.len();
            w *= env.law(&x).prob(e);
            x = x.step(e);
        }
        *out.entry(x).or_insert(0.0) += w;
    }
    out
}

fn oracle_equivalence() -> Outcome {
    let mut worst: f64 = 0.0;
    for dim in [1usize, 2] {
        let spec = EnvironmentSpec::elliptic_dirichlet(vec![1.0; 2 * dim], 0.05);
        for seed in 0..20u128 {
            let env = Environment::new(spec.clone(), seed).unwrap();
            for n in 0..=6 {
                let dp = quenched_distribution(&env, Site::origin(), n, &DpConfig::default()).unwrap();
                let paths = enumerate_paths(&env, n);
                for (x, v) in &paths {
                    worst = worst.max((dp.get(x) - v).abs());
                }
                for (x, v) in &dp.mass {
                    if !paths.contains_key(x) {
                        worst = worst.max(v.abs());
                    }
                }
            }
        }
    }
    outcome(worst < 1e-12, format!("max deviation {worst:.2e} over 40 environments, n <= 6"))
}

fn trivial_environments() -> Outcome {
    let cfg = DpConfig::default();
    let mut lambda: f64 = 0.0;
    let mut f_dev: f64 = 0.0;
    let mut z_dev: f64 = 0.0;
    let mut lclt_ok = true;
    let mut lclt_worst: f64 = 0.0;
    let specs = [
        EnvironmentSpec::drifted_1d(0.7),
        EnvironmentSpec::homogeneous(vec![0.35, 0.15, 0.3, 0.2], 0.15),
    ];
    for spec in &specs {
        let n = 16;
        let r = fixed_time_box_defect(spec, 3, n, &[0.5], &[1, 2, 4], 20, &cfg).unwrap();
        for row in &r.rows {
            // K-sampling error vanishes here, so allow only a rounding floor
            if row.defect > 3.0 * row.error + 1e-12 {
                lambda = lambda.max(row.defect);
            }
        }
        let env = quenched_environment(spec, 3).unwrap();
        let window = GridBox::around(spec.dim, Site::origin(), n as i32);
        for field in [prefactor_field(&env, n, window, &cfg).unwrap(), cesaro_prefactor(&env, n, window, &cfg).unwrap()] {
            f_dev = f_dev.max(field.values.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max));
            let ann = annealed_distribution(spec, 3, Site::origin(), n, 5, &cfg).unwrap();
            z_dev = z_dev.max((normalization_constant(&ann.dist(), &field).unwrap() - 1.0).abs());
        }
        for mode in [PrefactorMode::Cesaro, PrefactorMode::FixedHorizon] {
            let r = prefactor_lclt_defect(spec, 3, n, 20, mode, &cfg).unwrap();
            let row = &r.rows[0];
            lclt_worst = lclt_worst.max(row.defect);
            lclt_ok &= row.defect <= 3.0 * row.error + 1e-12;
        }
    }
    let pass = lambda == 0.0 && f_dev < 1e-12 && z_dev < 1e-12 && lclt_ok;
    outcome(
        pass,
        format!(
            "lambda beyond error {lambda:.1e}, |f-1| {f_dev:.1e}, |Z-1| {z_dev:.1e}, prefactor-LCLT defect {lclt_worst:.1e}"
        ),
    )
}

fn semigroup() -> Outcome {
    let spec = EnvironmentSpec::elliptic_dirichlet(vec![1.0; 4], 0.05);
    let cfg = DpConfig::default();
    let window = GridBox::around(2, Site::origin(), 12);
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for seed in 0..10u128 {
        let env = Environment::new(spec.clone(), 100 + seed).unwrap();
        for (n, m) in [(1usize, 1usize), (2, 3), (5, 5)] {
            let f_n = prefactor_field(&env, n, window, &cfg).unwrap();
            let evolved = adjoint_evolve(&env, &f_n, m, &cfg).unwrap();
            let direct = prefactor_field(&env, n + m, window, &cfg).unwrap();
            for (i, x) in evolved.window.sites().enumerate() {
                if evolved.exact[i] {
                    worst = worst.max((evolved.values[i] - direct.get(&x).unwrap()).abs());
                    checked += 1;
                }
            }
        }
    }
    outcome(worst < 1e-10 && checked > 0, format!("max deviation {worst:.2e} over {checked} sites"))
}

fn coupling_inequalities() -> Outcome {
    let spec = EnvironmentSpec::elliptic_dirichlet(vec![1.0; 4], 0.05);
    let cfg = DpConfig::default();
    let (mut diag_gap, mut marg, mut violations, mut checks): (f64, f64, usize, usize) = (0.0, 0.0, 0, 0);
    for seed in 0..10u128 {
        let (boxes, point) = point_coupling(&spec, seed, 12, 2, 50, &cfg, 5_000_000).unwrap();
        let ann = annealed_distribution(&spec, seed, Site::origin(), 8, 50, &cfg).unwrap();
        let q = quenched_distribution(&quenched_environment(&spec, seed).unwrap(), Site::origin(), 8, &cfg).unwrap();
        let l1 = l1_partition_distance(&ann.dist(), &q, Some(&BoxPartition::new(2))).unwrap();
        diag_gap = diag_gap.max((boxes.diagonal_mass - (1.0 - 0.5 * l1)).abs());
        marg = marg.max(point.left_error).max(point.right_error).max(boxes.marginal_error());
        violations += point.violations().len();
        checks += point.checks.len();
    }
    outcome(
        diag_gap < 1e-12 && marg < 1e-10 && violations == 0 && checks > 0,
        format!("|diag - (1 - L1/2)| {diag_gap:.1e}, marginal error {marg:.1e}, {violations} bound violations in {checks} sites"),
    )
}

fn regenerations() -> Outcome {
    let mut rng = stream(21, "acceptance-regen", 0);
    let mut mismatches = 0;
    for i in 0..1000u64 {
        let spec = EnvironmentSpec::elliptic_dirichlet(vec![3.0, 1.0, 1.0, 1.0], 0.02);
        let env = Environment::new(spec, i as u128).unwrap();
        let traj: Trajectory = simulate_walk(&env, Site::origin(), 200, &mut rng);
        let dir = Direction::new(0, 1);
        let lv = traj.levels(dir);
        let brute: Vec<usize> = (0..lv.len() - 1)
            .filter(|&t| {
                (0..t).all(|s| lv[s] < lv[t]) && lv[t + 1] > lv[t] && (t + 2..lv.len()).all(|s| lv[s] > lv[t + 1])
            })
            .collect();
        let fast: Vec<usize> = detect_regenerations(&traj, dir, 5).iter().map(|r| r.time).collect();
        if fast != brute {
            mismatches += 1;
        }
    }
    let ens = collect_ensemble(&EnvironmentSpec::drifted_1d(0.7), 5, Direction::new(0, 1), 200, 5000, None).unwrap();
    let v = velocity_covariance(&ens).unwrap();
    let z = (v.velocity[0] - 0.4) / v.velocity_se[0];
    outcome(
        mismatches == 0 && z.abs() <= 4.0,
        format!(
            "{mismatches} detector mismatches in 1000 paths; v = {:.4} +- {:.4} ({z:+.2} SE from 0.4)",
            v.velocity[0], v.velocity_se[0]
        ),
    )
}

fn gamblers_ruin() -> Outcome {
    let curve = condition_t_curve(&EnvironmentSpec::drifted_1d(0.7), 6, Direction::new(0, 1), &[2], 10_000, 10_000).unwrap();
    let p = &curve.points[0];
    let want = 9.0 / 58.0;
    outcome(
        p.ci_lo <= want && want <= p.ci_hi,
        format!("estimate {:.5} with 95% CI [{:.5}, {:.5}] vs 9/58 = {want:.5}", p.estimate, p.ci_lo, p.ci_hi),
    )
}

fn lclt_trend() -> Outcome {
    let env = Environment::new(EnvironmentSpec::symmetric(1), 0).unwrap();
    let cfg = DpConfig::default();
    let mut defects = Vec::new();
    for n in [4, 16, 64] {
        let d = quenched_distribution(&env, Site::origin(), n, &cfg).unwrap();
        defects.push(lclt_defect(&d, &[0.0], &[vec![1.0]], n).unwrap());
    }
    let d2 = quenched_distribution(&env, Site::origin(), 2, &cfg).unwrap();
    let site = (d2.get(&Site::origin()) - lclt_density(&Site::origin(), &[0.0], &[vec![1.0]], 2).unwrap()).abs();
    let decreasing = defects.windows(2).all(|w| w[1] < w[0]);
    outcome(
        decreasing && (site - 0.0642).abs() < 1e-4,
        format!("defects {:.4} > {:.4} > {:.4}; n=2 origin term {site:.5}", defects[0], defects[1], defects[2]),
    )
}

/// The disorder trends use the uniform Dirichlet spec in d = 2, ω seed 1, K = 200.
fn disorder_trends() -> Outcome {
    let spec = EnvironmentSpec::elliptic_dirichlet(vec![1.0; 4], 0.05);
    let seed = 1;
    let k = 200;
    let cfg = DpConfig::default();

    let mut lam = Vec::new();
    for n in [16, 32, 64] {
        let r = fixed_time_box_defect(&spec, seed, n, &[], &[4], k, &cfg).unwrap();
        let row = r.value("lambda", 4.0).unwrap();
        lam.push((row.defect, row.error));
    }
    let a_ok = lam.windows(2).all(|w| w[1].0 - w[0].0 <= w[0].1 + w[1].1);

    let env = quenched_environment(&spec, seed).unwrap();
    let f = cesaro_prefactor(&env, 32, GridBox::around(2, Site::origin(), 32), &cfg).unwrap();
    let boxes = box_average_deviation(&f, &[2, 4, 8], &spec, seed).unwrap();
    let b: Vec<(f64, f64)> = [2.0, 4.0, 8.0]
        .iter()
        .map(|m| {
            let row = boxes.value("box-average", *m).unwrap();
            (row.defect, row.error)
        })
        .collect();
    let b_ok = b.windows(2).all(|w| w[1].0 - w[0].0 <= w[0].1 + w[1].1);

    let ces = prefactor_lclt_defect(&spec, seed, 32, k, PrefactorMode::Cesaro, &cfg).unwrap().rows[0].clone();
    let one = prefactor_lclt_defect(&spec, seed, 32, k, PrefactorMode::ConstantOne, &cfg).unwrap().rows[0].clone();
    let c_ok = ces.defect + ces.error < one.defect - one.error;

    let fmt = |v: &[(f64, f64)]| v.iter().map(|(a, e)| format!("{a:.4}+-{e:.4}")).collect::<Vec<_>>().join(", ");
    outcome(
        a_ok && b_ok && c_ok,
        format!(
            "(a) lambda(M=4) at n=16,32,64: {} [{}]; (b) box-average at M=2,4,8: {} [{}]; (c) D_32 cesaro {:.4}+-{:.4} vs constant-one {:.4}+-{:.4} [{}]",
            fmt(&lam),
            if a_ok { "ok" } else { "not nonincreasing" },
            fmt(&b),
            if b_ok { "ok" } else { "not nonincreasing" },
            ces.defect,
            ces.error,
            one.defect,
            one.error,
            if c_ok { "ok" } else { "not separated" },
        ),
    )
}

fn environment(dim: usize) -> serde_json::Value {
    json!({"dim": dim, "family": "elliptic-dirichlet", "params": {"alpha": vec![1.0; 2 * dim]}, "eta": 0.05})
}

fn reproducibility_configs() -> Vec<(&'static str, serde_json::Value)> {
    let d1 = json!({"dim": 1, "family": "homogeneous", "params": {"q": [0.7, 0.3]}, "eta": 0.3});
    let sym = json!({"dim": 1, "family": "homogeneous", "params": {"q": [0.5, 0.5]}, "eta": 0.5});
    vec![
        ("quenched-dist", json!({"environment": environment(2), "params": {"n": 12}})),
        ("annealed-dist", json!({"environment": environment(2), "params": {"n": 12, "samples": 70}})),
        ("prefactor", json!({"environment": environment(2), "params": {"n": 8, "samples": 30}})),
        ("tv-partition", json!({"environment": environment(2), "params": {"n_grid": [8, 16], "m_grid": [1, 4], "theta_grid": [0.5], "samples": 70}})),
        ("exit-defect", json!({"environment": environment(2), "params": {"scale": 4, "theta_grid": [0.5], "samples": 30, "t_max": 200}})),
        ("lclt", json!({"environment": environment(1), "params": {"n_grid": [8, 16], "samples": 70}})),
        ("prefactor-lclt", json!({"environment": environment(2), "params": {"n_grid": [8], "samples": 70}})),
        ("intermediate-measures", json!({"environment": environment(2), "params": {"n_grid": [16], "samples": 70, "epsilon": 0.24, "delta": 0.12}})),
        ("regen-stats", json!({"environment": d1, "params": {"walks": 80, "steps": 1000}})),
        ("coupling", json!({"environment": environment(2), "params": {"n": 8, "side": 2, "samples": 70}})),
        ("pair-merge", json!({"environment": sym, "params": {"n": 64, "theta": 0.5, "side": 2, "rounds": 3, "samples": 200, "y": [2]}})),
        ("condition-t", json!({"environment": d1, "params": {"levels": [2, 4], "samples": 500, "t_max": 10000}})),
        ("condition-p", json!({"environment": d1, "params": {"scale": 2, "exponent": 1.0, "samples": 200, "t_max": 10000}})),
    ]
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut differing = Vec::new();
    let mut failed = Vec::new();
    let configs = reproducibility_configs();
    for (kind, mut cfg) in configs.clone() {
        cfg["seed"] = json!(17);
        let path = tmp.path().join(format!("{kind}.json"));
        std::fs::write(&path, cfg.to_string()).unwrap();
        let mut outputs = Vec::new();
        for threads in [1, 4] {
            let out = tmp.path().join(format!("{kind}-{threads}"));
            let status = Command::new(env!("CARGO_BIN_EXE_rwre-lab"))
                .arg(kind)
                .arg("--config")
                .arg(&path)
                .arg("--threads")
                .arg(threads.to_string())
                .arg("--out")
                .arg(&out)
                .output()
                .unwrap();
            if !status.status.success() {
                failed.push(format!("{kind}: {}", String::from_utf8_lossy(&status.stderr).trim()));
                break;
            }
            outputs.push(read_dir_bytes(&out));
        }
        if outputs.len() == 2 && outputs[0] != outputs[1] {
            differing.push(kind);
        }
    }
    outcome(
        differing.is_empty() && failed.is_empty(),
        format!(
            "{} experiment kinds at 1 and 4 threads; differing: {:?}; failed: {:?}",
            configs.len(),
            differing,
            failed
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome, Duration); 9] = [
        ("oracle equivalence", oracle_equivalence, Duration::from_secs(10)),
        ("trivial-environment exactness", trivial_environments, Duration::from_secs(30)),
        ("prefactor semigroup", semigroup, Duration::from_secs(60)),
        ("coupling inequalities", coupling_inequalities, Duration::from_secs(60)),
        ("regeneration detector and velocity", regenerations, Duration::from_secs(60)),
        ("gambler's ruin calibration", gamblers_ruin, Duration::from_secs(30)),
        ("LCLT trend", lclt_trend, Duration::from_secs(10)),
        ("disorder trends", disorder_trends, Duration::from_secs(15 * 60)),
        ("reproducibility across thread counts", reproducibility, Duration::from_secs(15 * 60)),
    ];
    let mut failures = Vec::new();
    for (i, (name, check, limit)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let r = check();
        let elapsed = t0.elapsed();
        let in_time = elapsed <= *limit;
        let pass = r.pass && in_time;
        println!(
            "criterion {} {name}: {} ({}; {:.1} s of {} s allowed)",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            r.detail,
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
        if !pass {
            failures.push(i + 1);
        }
    }
    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}
