use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rwre_core::coupling::{pair_merge_ensemble, point_coupling, MergeScheme};
use rwre_core::dp::{normalization_constant, quenched_distribution, SparseLatticeDist};
use rwre_core::env::EnvironmentSpec;
use rwre_core::estimators::{
    annealed_distribution, exit_law_box_defect, fixed_time_box_defect, intermediate_measures_defects, lclt_defect,
    prefactor_lclt_defect, quenched_environment, DefectReport, PrefactorMode,
};
use rwre_core::lattice::{GridBox, ParallelogramGeom, Site, MAX_DIM};
use rwre_core::regen::{collect_ensemble, regen_diagnostics, velocity_covariance};
use rwre_core::rng::Seed;
use rwre_core::walk::{condition_p_probe, condition_t_curve};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{required, ExperimentConfig, Kind};
use crate::CliError;

const DEFAULT_OUT: &str = "rwre-out";
const DEFAULT_MAX_PAIRS: usize = 5_000_000;

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub tool: String,
    pub version: String,
    pub kind: Kind,
    pub config_hash: String,
    pub seed: Seed,
    pub spec_hash: String,
    pub warnings: Vec<String>,
    pub tables: Vec<String>,
    pub results: Value,
}

struct Outputs {
    dir: PathBuf,
    tables: Vec<String>,
}

impl Outputs {
    fn table(&mut self, name: &str, write: impl FnOnce(&mut BufWriter<File>) -> Result<(), CliError>) -> Result<(), CliError> {
        let mut w = BufWriter::new(File::create(self.dir.join(name))?);
        write(&mut w)?;
        w.flush()?;
        self.tables.push(name.to_string());
        Ok(())
    }
}

fn site(coords: &Option<Vec<i32>>, dim: usize, name: &str) -> Result<Site, CliError> {
    match coords {
        None => Ok(Site::origin()),
        Some(c) if c.len() == dim && dim <= MAX_DIM => Ok(Site::new(c)),
        Some(c) => Err(CliError::Config(format!("params.{name} has {} coordinates, expected {dim}", c.len()))),
    }
}

/// Defect rows of several reports tagged by `tag_name`.
fn write_reports<W: Write>(w: W, tag_name: &str, reports: &[(f64, DefectReport)]) -> Result<(), CliError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["seed", "spec_hash", tag_name, "metric", "grid", "grid_value", "defect", "error", "samples"])
        .map_err(rwre_core::Error::from)?;
    for (tag, r) in reports {
        for row in &r.rows {
            wr.write_record([
                r.seed.to_string(),
                r.spec_hash.clone(),
                tag.to_string(),
                row.metric.clone(),
                row.grid.clone(),
                row.grid_value.to_string(),
                row.defect.to_string(),
                row.error.to_string(),
                row.samples.to_string(),
            ])
            .map_err(rwre_core::Error::from)?;
        }
    }
    wr.flush()?;
    Ok(())
}

fn report_rows(tag_name: &str, reports: &[(f64, DefectReport)]) -> Value {
    let rows: Vec<Value> = reports
        .iter()
        .flat_map(|(tag, r)| {
            r.rows.iter().map(move |row| {
                json!({
                    tag_name: tag,
                    "metric": row.metric,
                    "grid": row.grid,
                    "grid_value": row.grid_value,
                    "defect": row.defect,
                    "error": row.error,
                    "samples": row.samples,
                })
            })
        })
        .collect();
    Value::Array(rows)
}

/// Sample mean and per-step covariance of `dist` at time `n`.
fn empirical_moments(dist: &SparseLatticeDist, n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = dist.dim;
    let mean = dist.mean();
    let mut cov = vec![vec![0.0; d]; d];
    let total = dist.total();
    for (x, v) in &dist.mass {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += v * (x.coord(i) as f64 - mean[i]) * (x.coord(j) as f64 - mean[j]) / total;
            }
        }
    }
    for row in cov.iter_mut() {
        for c in row.iter_mut() {
            *c /= n as f64;
        }
    }
    (mean, cov)
}

/// Runs one experiment, writing CSV tables and `summary.json` into the
/// output directory. Results depend only on the configuration.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Summary, CliError> {
    config.validate()?;
    let kind = config.kind.ok_or_else(|| CliError::Config("experiment kind is missing".into()))?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = config.threads {
        pool = pool.num_threads(t);
    }
    let pool = pool.build().map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let dir = config.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    std::fs::create_dir_all(&dir)?;
    let mut out = Outputs {
        dir: dir.clone(),
        tables: Vec::new(),
    };
    let spec = config.spec()?;
    let (results, warnings) = pool.install(|| execute(kind, config, &spec, &mut out))?;
    let summary = Summary {
        tool: "rwre-lab".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        kind,
        config_hash: config.hash_hex(),
        seed: Seed(config.seed()),
        spec_hash: spec.hash_hex(),
        warnings,
        tables: out.tables,
        results,
    };
    write_summary(&dir, &summary)?;
    Ok(summary)
}

fn write_summary(dir: &Path, summary: &Summary) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(summary).map_err(rwre_core::Error::from)?;
    text.push('\n');
    std::fs::write(dir.join("summary.json"), text)?;
    Ok(())
}

fn execute(
    kind: Kind,
    config: &ExperimentConfig,
    spec: &EnvironmentSpec,
    out: &mut Outputs,
) -> Result<(Value, Vec<String>), CliError> {
    let p = &config.params;
    let seed = config.seed();
    let cfg = config.dp();
    let dim = spec.dim;
    let mut warnings = Vec::new();
    let results = match kind {
        Kind::QuenchedDist => {
            let n = required(&p.n, "n")?;
            let start = site(&p.start, dim, "start")?;
            let env = quenched_environment(spec, seed)?;
            let d = quenched_distribution(&env, start, n, &cfg)?;
            out.table("distribution.csv", |w| Ok(d.write_csv(w)?))?;
            json!({"n": n, "total": d.total(), "pruned": d.pruned, "mean": d.mean(), "support": d.len()})
        }
        Kind::AnnealedDist => {
            let n = required(&p.n, "n")?;
            let k = required(&p.samples, "samples")?;
            let start = site(&p.start, dim, "start")?;
            let ann = annealed_distribution(spec, seed, start, n, k, &cfg)?;
            let d = ann.dist();
            let se = ann.std_errors();
            out.table("annealed.csv", |w| {
                let mut wr = csv::Writer::from_writer(w);
                let mut header: Vec<String> = (1..=dim).map(|i| format!("x{i}")).collect();
                header.extend(["value".to_string(), "std_error".to_string()]);
                wr.write_record(&header).map_err(rwre_core::Error::from)?;
                for (x, v) in &d.mass {
                    let mut rec: Vec<String> = x.coords(dim).iter().map(|c| c.to_string()).collect();
                    rec.push(v.to_string());
                    rec.push(se.get(x).copied().unwrap_or(0.0).to_string());
                    wr.write_record(&rec).map_err(rwre_core::Error::from)?;
                }
                wr.flush()?;
                Ok(())
            })?;
            json!({"n": n, "samples": k, "total": d.total(), "pruned": d.pruned, "mean": d.mean(), "support": d.len()})
        }
        Kind::Prefactor => {
            let n = required(&p.n, "n")?;
            let radius = p.radius.unwrap_or(n as i32);
            let mode = p.modes.as_ref().and_then(|m| m.first().copied()).unwrap_or(PrefactorMode::Cesaro);
            let env = quenched_environment(spec, seed)?;
            let f = mode.field(&env, n, GridBox::around(dim, Site::origin(), radius), &cfg)?;
            out.table("prefactor.csv", |w| Ok(f.write_csv(w)?))?;
            let vals: Vec<f64> = f.iter().map(|(_, v)| v).collect();
            let mut r = json!({
                "n": n,
                "mode": mode,
                "radius": radius,
                "min": vals.iter().copied().fold(f64::INFINITY, f64::min),
                "max": vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                "mean": vals.iter().sum::<f64>() / vals.len().max(1) as f64,
                "pruned": f.pruned,
            });
            if let Some(k) = p.samples {
                let ann = annealed_distribution(spec, seed, Site::origin(), n, k, &cfg)?;
                r["normalization"] = json!(normalization_constant(&ann.dist(), &f)?);
            }
            r
        }
        Kind::TvPartition => {
            let n_grid = required(&p.n_grid, "n_grid")?;
            let m_grid = required(&p.m_grid, "m_grid")?;
            let theta_grid = p.theta_grid.clone().unwrap_or_default();
            let k = required(&p.samples, "samples")?;
            let mut reports = Vec::new();
            for &n in &n_grid {
                let r = fixed_time_box_defect(spec, seed, n, &theta_grid, &m_grid, k, &cfg)?;
                warnings = r.warnings.clone();
                reports.push((n as f64, r));
            }
            out.table("defects.csv", |w| write_reports(w, "n", &reports))?;
            json!({"rows": report_rows("n", &reports)})
        }
        Kind::ExitDefect => {
            let scale = required(&p.scale, "scale")?;
            let theta_grid = required(&p.theta_grid, "theta_grid")?;
            let k = required(&p.samples, "samples")?;
            let t_max = required(&p.t_max, "t_max")?;
            let size = u32::try_from(scale).map_err(|_| CliError::Config("params.scale is too large".into()))?;
            let geom = ParallelogramGeom::new(dim, Site::origin(), size)?;
            let start = site(&p.start, dim, "start")?;
            let mut reports = Vec::new();
            for &theta in &theta_grid {
                let r = exit_law_box_defect(spec, seed, &geom, start, theta, k, t_max, &cfg)?;
                warnings = r.report.warnings.clone();
                reports.push((scale as f64, r.report));
            }
            out.table("defects.csv", |w| write_reports(w, "scale", &reports))?;
            json!({"rows": report_rows("scale", &reports)})
        }
        Kind::Lclt => {
            let n_grid = required(&p.n_grid, "n_grid")?;
            let k = p.samples.unwrap_or(1);
            let mut reports = Vec::new();
            let mut moments = Vec::new();
            for &n in &n_grid {
                let ann = annealed_distribution(spec, seed, Site::origin(), n, k, &cfg)?;
                let d = ann.dist();
                let (emp_mean, emp_cov) = empirical_moments(&d, n);
                let mean = match &p.drift {
                    Some(v) if v.len() == dim => v.iter().map(|c| c * n as f64).collect(),
                    Some(_) => return Err(CliError::Config(format!("params.drift must have {dim} entries"))),
                    None => emp_mean,
                };
                let cov = p.covariance.clone().unwrap_or(emp_cov);
                lclt_defect(&d, &mean, &cov, n)?;
                let (v, se) = ann.jackknife(|a| lclt_defect(a, &mean, &cov, n).unwrap_or(f64::NAN));
                let mut report = DefectReport::new("lclt", spec, seed);
                report.push("lclt", "n", n as f64, v, se + 2.0 * d.pruned, k);
                warnings = report.warnings.clone();
                reports.push((n as f64, report));
                moments.push(json!({"n": n, "mean": mean, "covariance": cov}));
            }
            out.table("defects.csv", |w| write_reports(w, "n", &reports))?;
            json!({"rows": report_rows("n", &reports), "gaussian": moments})
        }
        Kind::PrefactorLclt => {
            let n_grid = required(&p.n_grid, "n_grid")?;
            let k = required(&p.samples, "samples")?;
            let modes = p
                .modes
                .clone()
                .unwrap_or_else(|| vec![PrefactorMode::Cesaro, PrefactorMode::FixedHorizon, PrefactorMode::ConstantOne]);
            let mut reports = Vec::new();
            for &n in &n_grid {
                for &mode in &modes {
                    let r = prefactor_lclt_defect(spec, seed, n, k, mode, &cfg)?;
                    warnings = r.warnings.clone();
                    reports.push((n as f64, r));
                }
            }
            out.table("defects.csv", |w| write_reports(w, "n", &reports))?;
            json!({"rows": report_rows("n", &reports)})
        }
        Kind::IntermediateMeasures => {
            let n_grid = required(&p.n_grid, "n_grid")?;
            let k = required(&p.samples, "samples")?;
            let eps = required(&p.epsilon, "epsilon")?;
            let delta = required(&p.delta, "delta")?;
            let mode = p.modes.as_ref().and_then(|m| m.first().copied()).unwrap_or(PrefactorMode::Cesaro);
            let mut reports = Vec::new();
            let mut details = Vec::new();
            for &n in &n_grid {
                let r = intermediate_measures_defects(spec, seed, n, eps, delta, k, mode, &cfg)?;
                let rep = r.to_report(spec, seed);
                warnings = rep.warnings.clone();
                reports.push((n as f64, rep));
                details.push(serde_json::to_value(&r).map_err(rwre_core::Error::from)?);
            }
            out.table("defects.csv", |w| write_reports(w, "n", &reports))?;
            json!({"rows": report_rows("n", &reports), "details": details})
        }
        Kind::RegenStats => {
            let walks = required(&p.walks, "walks")?;
            let steps = required(&p.steps, "steps")?;
            let dir = config.direction(dim)?;
            let ens = collect_ensemble(spec, seed, dir, walks, steps, p.margin)?;
            out.table("increments.csv", |w| Ok(ens.write_csv(w)?))?;
            let diag = regen_diagnostics(&ens, p.scale.unwrap_or(steps as u64), p.bound.unwrap_or(steps / 10), seed);
            out.table("tail.csv", |w| {
                writeln!(w, "k,tail")?;
                for (k, v) in &diag.tail {
                    writeln!(w, "{k},{v}")?;
                }
                Ok(())
            })?;
            let velocity = match velocity_covariance(&ens) {
                Ok(v) => serde_json::to_value(v).map_err(rwre_core::Error::from)?,
                Err(e @ rwre_core::Error::InsufficientData(_)) => {
                    warnings.push(e.to_string());
                    Value::Null
                }
                Err(e) => return Err(e.into()),
            };
            json!({
                "increments": ens.len(),
                "margin": ens.margin,
                "discarded_unconfirmed": ens.discarded_unconfirmed,
                "velocity": velocity,
                "lag1": diag.lag1,
                "b_n_frequency": diag.b_n_frequency,
                "b_n_walks": diag.b_n_walks,
            })
        }
        Kind::Coupling => {
            let n = required(&p.n, "n")?;
            let side = required(&p.side, "side")?;
            let k = required(&p.samples, "samples")?;
            let (boxes, point) =
                point_coupling(spec, seed, n, side, k, &cfg, p.max_pairs.unwrap_or(DEFAULT_MAX_PAIRS))?;
            out.table("box_coupling.csv", |w| Ok(boxes.write_csv(w)?))?;
            if point.joint.is_some() {
                out.table("point_coupling.csv", |w| Ok(point.write_csv(w)?))?;
            }
            out.table("diagonal_checks.csv", |w| {
                let mut header: Vec<String> = (1..=dim).map(|i| format!("x{i}")).collect();
                header.extend(["diagonal".into(), "bound".into()]);
                writeln!(w, "{}", header.join(","))?;
                for (x, c) in &point.checks {
                    let coords: Vec<String> = x.coords(dim).iter().map(|c| c.to_string()).collect();
                    writeln!(w, "{},{},{}", coords.join(","), c.diagonal, c.bound)?;
                }
                Ok(())
            })?;
            let l1 = 2.0 * (1.0 - boxes.diagonal_mass);
            json!({
                "n": n,
                "side": side,
                "samples": k,
                "box_diagonal_mass": boxes.diagonal_mass,
                "box_marginal_error": boxes.marginal_error(),
                "box_l1_implied": l1,
                "point_diagonal_mass": point.diagonal_mass,
                "point_pairs": point.pair_count.to_string(),
                "materialized": point.joint.is_some(),
                "left_marginal_error": point.left_error,
                "right_marginal_error": point.right_error,
                "diagonal_checks": point.checks.len(),
                "diagonal_violations": point.violations().len(),
                "pruned": point.pruned,
            })
        }
        Kind::PairMerge => {
            let scheme = MergeScheme {
                n: required(&p.n, "n")?,
                theta: required(&p.theta, "theta")?,
                side: required(&p.side, "side")?,
                rounds: required(&p.rounds, "rounds")?,
            };
            let pairs = required(&p.samples, "samples")?;
            let x = site(&p.x, dim, "x")?;
            let y = site(&p.y, dim, "y")?;
            let ens = pair_merge_ensemble(spec, seed, x, y, &scheme, pairs, &cfg)?;
            out.table("merge.csv", |w| {
                writeln!(w, "round,frequency,std_error,bound,bound_met")?;
                for r in &ens.rounds {
                    writeln!(w, "{},{},{},{},{}", r.round, r.frequency, r.std_error, r.bound, r.bound_met)?;
                }
                Ok(())
            })?;
            serde_json::to_value(&ens).map_err(rwre_core::Error::from)?
        }
        Kind::ConditionT => {
            let levels = required(&p.levels, "levels")?;
            let samples = required(&p.samples, "samples")?;
            let t_max = required(&p.t_max, "t_max")?;
            let dir = config.direction(dim)?;
            let curve = condition_t_curve(spec, seed, dir, &levels, samples, t_max)?;
            out.table("condition_t.csv", |w| {
                writeln!(w, "level,estimate,ci_lo,ci_hi,backward_first,forward_first,censored")?;
                for pt in &curve.points {
                    writeln!(
                        w,
                        "{},{},{},{},{},{},{}",
                        pt.level, pt.estimate, pt.ci_lo, pt.ci_hi, pt.backward_first, pt.forward_first, pt.censored
                    )?;
                }
                Ok(())
            })?;
            serde_json::to_value(&curve).map_err(rwre_core::Error::from)?
        }
        Kind::ConditionP => {
            let scale = required(&p.scale, "scale")?;
            let exponent = required(&p.exponent, "exponent")?;
            let samples = required(&p.samples, "samples")?;
            let t_max = required(&p.t_max, "t_max")?;
            let dir = config.direction(dim)?;
            let probe = condition_p_probe(
                spec,
                seed,
                dir,
                scale,
                p.aspect.unwrap_or(1.0),
                exponent,
                samples,
                t_max,
                cfg.max_sites,
            )?;
            serde_json::to_value(&probe).map_err(rwre_core::Error::from)?
        }
    };
    if warnings.is_empty() && dim < 4 && kind_has_dimension_warning(kind) {
        warnings.push(format!("dimension {dim} is below 4: the limit theorems behind this diagnostic assume d >= 4"));
    }
    Ok((results, warnings))
}

fn kind_has_dimension_warning(kind: Kind) -> bool {
    matches!(kind, Kind::Coupling | Kind::PairMerge)
}
