use std::collections::BTreeMap;

use crate::dp::{evolve_forward, exit_law, quenched_distribution, DpConfig, PrefactorField};
use crate::env::{EnvironmentEnsemble, EnvironmentSpec};
use crate::error::{Error, Result};
use crate::lattice::{BoxPartition, Direction, GridBox, ParallelogramGeom, PointClass, Region, Site};

use super::averages::{annealed_distribution, ReplicaAverage};
use super::{box_masses, l1_maps, quenched_environment, DefectReport};

fn check_increasing(grid: &[usize], what: &str) -> Result<()> {
    if grid.is_empty() || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Precondition(format!("{what} grid must be nonempty and strictly increasing")));
    }
    Ok(())
}

/// Sup, space-time neighbour differences and spread of the annealed law
/// along `n_grid`. `width` sets the ball radius `√n·width` (sup norm, around
/// the mean) outside of which mass is reported.
pub fn annealed_regularity_report(
    spec: &EnvironmentSpec,
    seed: u128,
    n_grid: &[usize],
    count: usize,
    width: f64,
    cfg: &DpConfig,
) -> Result<DefectReport> {
    check_increasing(n_grid, "n")?;
    let ensemble = EnvironmentEnsemble::new(spec.clone(), seed, count)?;
    let d = spec.dim;
    let mut report = DefectReport::new("annealed-regularity", spec, seed);
    for &n in n_grid {
        let avg = ReplicaAverage::<(u8, Site)>::build(count, |i| {
            let env = ensemble.environment(i);
            let now = quenched_distribution(&env, Site::origin(), n, cfg)?;
            let next = evolve_forward(&env, &now, 1, cfg)?;
            let mut map = BTreeMap::new();
            map.extend(now.mass.iter().map(|(x, v)| ((0u8, *x), *v)));
            map.extend(next.mass.iter().map(|(x, v)| ((1u8, *x), *v)));
            Ok((map, next.pruned))
        })?;
        let bar = 2.0 * avg.pruned;
        let at = |m: &BTreeMap<(u8, Site), f64>, t: u8, x: Site| m.get(&(t, x)).copied().unwrap_or(0.0);

        let sup = |m: &BTreeMap<(u8, Site), f64>| {
            m.iter().filter(|((t, _), _)| *t == 0).map(|(_, v)| *v).fold(0.0, f64::max)
        };
        let (s, se) = avg.jackknife(sup);
        report.push("sup", "n", n as f64, s, se + bar, count);
        let scale = (n as f64).powf(d as f64 / 2.0);
        report.push("scaled-sup", "n", n as f64, s * scale, (se + bar) * scale, count);

        let neighbour = |m: &BTreeMap<(u8, Site), f64>| {
            let mut best: f64 = 0.0;
            for ((t, x), v) in m {
                for e in Direction::all(d) {
                    let y = x.step(e);
                    let other = if *t == 0 { at(m, 1, y) } else { at(m, 0, y) };
                    best = best.max((v - other).abs());
                }
            }
            best
        };
        let (nd, nse) = avg.jackknife(neighbour);
        let scale = (n.max(1) as f64).powf((d as f64 + 1.0) / 2.0);
        report.push("neighbour-diff-scaled", "n", n as f64, nd * scale, (nse + bar) * scale, count);

        let radius = (n as f64).sqrt() * width;
        let outside = |m: &BTreeMap<(u8, Site), f64>| {
            let mut mean = vec![0.0; d];
            let mut total = 0.0;
            for ((t, x), v) in m {
                if *t == 0 {
                    total += v;
                    for (a, slot) in mean.iter_mut().enumerate() {
                        *slot += v * x.coord(a) as f64;
                    }
                }
            }
            mean.iter_mut().for_each(|c| *c /= total);
            m.iter()
                .filter(|((t, x), _)| *t == 0 && (0..d).any(|a| (x.coord(a) as f64 - mean[a]).abs() > radius))
                .map(|(_, v)| *v)
                .sum::<f64>()
        };
        let (o, ose) = avg.jackknife(outside);
        report.push("outside-ball", "n", n as f64, o, ose + bar, count);
    }
    Ok(report)
}

type ExitKey = (Site, usize);
const CENSORED_TIME: usize = usize::MAX;

fn censored_key() -> ExitKey {
    (Site::origin(), CENSORED_TIME)
}

/// Largest `|quenched − annealed|` mass over (transverse cube of side `side`)
/// × (time window of length `window`) cells of the right boundary.
pub fn exit_cell_defect(
    quenched: &BTreeMap<ExitKey, f64>,
    annealed: &BTreeMap<ExitKey, f64>,
    geom: &ParallelogramGeom,
    side: i64,
    window: usize,
) -> f64 {
    let lo = geom.interior_bounds().lo;
    let cell = |x: &Site, t: usize| -> Option<(Site, usize)> {
        if t == CENSORED_TIME || geom.classify(x) != PointClass::RightBoundary {
            return None;
        }
        let mut k = Site::origin();
        for a in (0..geom.dim).filter(|&a| a != geom.axis) {
            k.set(a, (x.coord(a) as i64 - lo.coord(a) as i64).div_euclid(side) as i32);
        }
        Some((k, t / window))
    };
    let bin = |m: &BTreeMap<ExitKey, f64>| {
        let mut out: BTreeMap<(Site, usize), f64> = BTreeMap::new();
        for ((x, t), v) in m {
            if let Some(c) = cell(x, *t) {
                *out.entry(c).or_insert(0.0) += v;
            }
        }
        out
    };
    let (q, a) = (bin(quenched), bin(annealed));
    let mut best: f64 = 0.0;
    for (c, v) in &q {
        best = best.max((v - a.get(c).copied().unwrap_or(0.0)).abs());
    }
    for (c, v) in &a {
        if !q.contains_key(c) {
            best = best.max(v.abs());
        }
    }
    best
}

fn non_right_mass(m: &BTreeMap<ExitKey, f64>, geom: &ParallelogramGeom) -> f64 {
    m.iter()
        .filter(|((x, t), _)| *t != CENSORED_TIME && geom.classify(x) != PointClass::RightBoundary)
        .map(|(_, v)| *v)
        .sum()
}

#[derive(Clone, Debug)]
pub struct ExitDefect {
    pub report: DefectReport,
    pub cell_side: i64,
    pub window: usize,
}

/// Compares the exact quenched exit law of `geom` from `start` with its
/// annealed counterpart on cells of side `⌈N^θ⌉` in space and time.
#[allow(clippy::too_many_arguments)]
pub fn exit_law_box_defect(
    spec: &EnvironmentSpec,
    seed: u128,
    geom: &ParallelogramGeom,
    start: Site,
    theta: f64,
    count: usize,
    t_max: usize,
    cfg: &DpConfig,
) -> Result<ExitDefect> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::Precondition(format!("theta must lie in (0, 1], got {theta}")));
    }
    if !geom.in_middle_third(&start) {
        return Err(Error::Precondition(format!("start {start:?} is not in the middle third")));
    }
    let to_map = |law: crate::dp::ExitLaw| {
        let mut m = law.joint;
        m.insert(censored_key(), law.censored);
        (m, law.pruned)
    };
    let env = quenched_environment(spec, seed)?;
    let (quenched, q_pruned) = to_map(exit_law(&env, start, geom, t_max, cfg)?);
    let ensemble = EnvironmentEnsemble::new(spec.clone(), seed, count)?;
    let avg = ReplicaAverage::build(count, |i| Ok(to_map(exit_law(&ensemble.environment(i), start, geom, t_max, cfg)?)))?;

    let side = ((geom.size as f64).powf(theta).ceil() as i64).max(1);
    let window = side as usize;
    let bar = 2.0 * (q_pruned + avg.pruned);
    let mut report = DefectReport::new("exit-defect", spec, seed);
    let (v, se) = avg.jackknife(|a| exit_cell_defect(&quenched, a, geom, side, window));
    report.push("cell-defect", "theta", theta, v, se + bar, count);
    report.push("quenched-non-right", "theta", theta, non_right_mass(&quenched, geom), 2.0 * q_pruned, 1);
    let (nr, nrse) = avg.jackknife(|a| non_right_mass(a, geom));
    report.push("annealed-non-right", "theta", theta, nr, nrse + 2.0 * avg.pruned, count);
    report.push("quenched-censored", "theta", theta, quenched[&censored_key()], 2.0 * q_pruned, 1);
    let (c, cse) = avg.jackknife(|a| a.get(&censored_key()).copied().unwrap_or(0.0));
    report.push("annealed-censored", "theta", theta, c, cse + 2.0 * avg.pruned, count);
    Ok(ExitDefect {
        report,
        cell_side: side,
        window,
    })
}

/// `λ(M)` for each `M` and the largest single-cube defect at side `⌈n^θ⌉`
/// for each `θ`, comparing one quenched law with the annealed law at time `n`.
pub fn fixed_time_box_defect(
    spec: &EnvironmentSpec,
    seed: u128,
    n: usize,
    theta_grid: &[f64],
    m_grid: &[u32],
    count: usize,
    cfg: &DpConfig,
) -> Result<DefectReport> {
    if n < 2 {
        return Err(Error::Precondition(format!("fixed-time defect needs n >= 2, got {n}")));
    }
    if m_grid.contains(&0) {
        return Err(Error::Precondition("box sides must be >= 1".into()));
    }
    let env = quenched_environment(spec, seed)?;
    let quenched = quenched_distribution(&env, Site::origin(), n, cfg)?;
    let ann = annealed_distribution(spec, seed, Site::origin(), n, count, cfg)?;
    let bar = 2.0 * (quenched.pruned + ann.replicas.pruned);
    let mut report = DefectReport::new("fixed-time-defect", spec, seed);
    for &m in m_grid {
        let part = BoxPartition::new(m);
        let q = box_masses(&quenched, Some(&part));
        let (v, se) = ann.jackknife(|a| l1_maps(&q, &box_masses(a, Some(&part))));
        report.push("lambda", "M", m as f64, v, se + bar, count);
    }
    for &theta in theta_grid {
        let side = ((n as f64).powf(theta).ceil() as u32).max(1);
        let part = BoxPartition::new(side);
        let q = box_masses(&quenched, Some(&part));
        let (v, se) = ann.jackknife(|a| max_cube_gap(&q, &box_masses(a, Some(&part))));
        report.push("max-cube", "theta", theta, v, se + bar, count);
    }
    Ok(report)
}

fn max_cube_gap(q: &BTreeMap<Site, f64>, a: &BTreeMap<Site, f64>) -> f64 {
    let mut best: f64 = 0.0;
    for (k, v) in q {
        best = best.max((v - a.get(k).copied().unwrap_or(0.0)).abs());
    }
    for (k, v) in a {
        if !q.contains_key(k) {
            best = best.max(*v);
        }
    }
    best
}

/// For each side `M`: `max_Δ |mean_{x∈Δ} f(x) − 1|` over the disjoint cubes
/// of side `M` tiling the window from its lower corner.
pub fn box_average_deviation(
    prefactor: &PrefactorField,
    m_grid: &[u32],
    spec: &EnvironmentSpec,
    seed: u128,
) -> Result<DefectReport> {
    let window = prefactor.window;
    let dim = window.dim;
    let largest = *m_grid.iter().max().ok_or_else(|| Error::Precondition("empty M grid".into()))?;
    if largest == 0 {
        return Err(Error::Precondition("box sides must be >= 1".into()));
    }
    let tiles = |m: u32| -> u128 { (0..dim).map(|a| (window.extent(a) / m as usize) as u128).product() };
    if tiles(largest) < 5 {
        return Err(Error::Precondition(format!(
            "window holds {} disjoint boxes of side {largest}; need at least 5",
            tiles(largest)
        )));
    }
    let mut report = DefectReport::new("box-average", spec, seed);
    for &m in m_grid {
        let counts: Vec<usize> = (0..dim).map(|a| window.extent(a) / m as usize).collect();
        let cells = GridBox::new(
            dim,
            Site::origin(),
            Site::new(&counts.iter().map(|c| *c as i32 - 1).collect::<Vec<_>>()),
        );
        let mut worst: f64 = 0.0;
        for k in cells.sites() {
            let mut lo = window.lo;
            let mut hi = window.lo;
            for a in 0..dim {
                lo.set(a, window.lo.coord(a) + k.coord(a) * m as i32);
                hi.set(a, lo.coord(a) + m as i32 - 1);
            }
            let cube = GridBox::new(dim, lo, hi);
            let sum: f64 = cube.sites().map(|x| prefactor.get(&x).expect("cube inside window")).sum();
            worst = worst.max((sum / cube.volume() as f64 - 1.0).abs());
        }
        report.push("box-average", "M", m as f64, worst, 2.0 * prefactor.pruned, cells.volume() as usize);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp::{cesaro_prefactor, prefactor_field};
    use crate::env::Environment;

    #[test]
    fn regularity_homogeneous_1d() {
        let report = annealed_regularity_report(&EnvironmentSpec::symmetric(1), 1, &[2, 4], 3, 10.0, &DpConfig::default()).unwrap();
        assert_eq!(report.value("sup", 2.0).unwrap().defect, 0.5);
        // |ℙ(X_2 = 0) − ℙ(X_3 = ±1)| = 0.5 − 0.375
        let nd = report.value("neighbour-diff-scaled", 2.0).unwrap().defect;
        assert!((nd - 0.125 * 2f64.powf(1.0)).abs() < 1e-12, "{nd}");
        assert!(matches!(
            annealed_regularity_report(&EnvironmentSpec::symmetric(1), 1, &[4, 2], 3, 1.0, &DpConfig::default()),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn regularity_symmetric_2d_band_and_tail() {
        let report =
            annealed_regularity_report(&EnvironmentSpec::symmetric(2), 1, &[8, 16, 32, 64], 1, 10.0, &DpConfig::default())
                .unwrap();
        let scaled: Vec<f64> = report.rows_for("scaled-sup").map(|r| r.defect).collect();
        let (lo, hi) = scaled.iter().fold((f64::MAX, 0.0f64), |(a, b), v| (a.min(*v), b.max(*v)));
        assert!(hi <= 2.0 * lo, "{scaled:?}");
        let single = annealed_regularity_report(&EnvironmentSpec::symmetric(2), 1, &[100], 1, 10.0, &DpConfig::default()).unwrap();
        assert!(single.value("outside-ball", 100.0).unwrap().defect < 1e-3);
    }

    #[test]
    fn fixed_time_homogeneous_and_coarsening() {
        let homog = EnvironmentSpec::homogeneous(vec![0.4, 0.2, 0.2, 0.2], 0.1);
        let r = fixed_time_box_defect(&homog, 1, 10, &[0.5], &[1, 2, 4], 5, &DpConfig::default()).unwrap();
        assert!(r.rows.iter().all(|row| row.defect < 1e-12));
        let dis = EnvironmentSpec::elliptic_dirichlet(vec![1.0; 4], 0.05);
        let r = fixed_time_box_defect(&dis, 2, 12, &[0.5, 1.0], &[1, 2, 4, 8], 20, &DpConfig::default()).unwrap();
        let lambdas: Vec<f64> = r.rows_for("lambda").map(|row| row.defect).collect();
        assert!(lambdas.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{lambdas:?}");
        assert!(lambdas.iter().all(|l| (0.0..=2.0).contains(l)));
        assert!(fixed_time_box_defect(&dis, 2, 1, &[0.5], &[2], 2, &DpConfig::default()).is_err());
    }

    #[test]
    fn exit_defect_homogeneous_and_drift_trend() {
        let geom = ParallelogramGeom::new(2, Site::origin(), 4).unwrap();
        let homog = EnvironmentSpec::homogeneous(vec![0.4, 0.2, 0.2, 0.2], 0.1);
        let ex = exit_law_box_defect(&homog, 1, &geom, Site::origin(), 0.5, 4, 3000, &DpConfig::default()).unwrap();
        assert!(ex.report.value("cell-defect", 0.5).unwrap().defect < 1e-12);
        let mut non_right = Vec::new();
        for p in [0.3, 0.45, 0.6] {
            let rest = (1.0 - p) / 3.0;
            let spec = EnvironmentSpec::homogeneous(vec![p, rest, rest, rest], 0.05);
            let ex = exit_law_box_defect(&spec, 1, &geom, Site::origin(), 0.5, 2, 20_000, &DpConfig::default()).unwrap();
            let row = ex.report.value("quenched-non-right", 0.5).unwrap();
            assert!(ex.report.value("quenched-censored", 0.5).unwrap().defect < 1e-9);
            non_right.push(row.defect);
        }
        assert!(non_right.windows(2).all(|w| w[1] < w[0]), "{non_right:?}");
        assert!(exit_law_box_defect(&homog, 1, &geom, Site::new(&[15, 0]), 0.5, 2, 10, &DpConfig::default()).is_err());
    }

    #[test]
    fn one_cell_is_the_total_right_exit_gap() {
        let geom = ParallelogramGeom::new(2, Site::origin(), 3).unwrap();
        let spec = EnvironmentSpec::elliptic_dirichlet(vec![3.0, 1.0, 1.0, 1.0], 0.05);
        let law = |s: u128| {
            let env = Environment::new(spec.clone(), s).unwrap();
            let l = exit_law(&env, Site::origin(), &geom, 5000, &DpConfig::default()).unwrap();
            l.joint
        };
        let (a, b) = (law(1), law(2));
        let right = |m: &BTreeMap<ExitKey, f64>| {
            m.iter().filter(|((x, _), _)| geom.classify(x) == PointClass::RightBoundary).map(|(_, v)| v).sum::<f64>()
        };
        let one = exit_cell_defect(&a, &b, &geom, 1 << 20, 1 << 40);
        assert!((one - (right(&a) - right(&b)).abs()).abs() < 1e-14);
    }

    #[test]
    fn box_average_examples() {
        let spec = EnvironmentSpec::homogeneous(vec![0.4, 0.2, 0.2, 0.2], 0.1);
        let env = Environment::new(spec.clone(), 0).unwrap();
        let w = GridBox::around(2, Site::origin(), 8);
        let f = cesaro_prefactor(&env, 10, w, &DpConfig::default()).unwrap();
        let r = box_average_deviation(&f, &[1, 2, 4], &spec, 0).unwrap();
        assert!(r.rows.iter().all(|row| row.defect < 1e-12));

        let dis = EnvironmentSpec::elliptic_dirichlet(vec![1.0; 4], 0.05);
        let env = Environment::new(dis.clone(), 3).unwrap();
        let f = prefactor_field(&env, 6, w, &DpConfig::default()).unwrap();
        let r = box_average_deviation(&f, &[1], &dis, 3).unwrap();
        let direct = f.values.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
        assert_eq!(r.rows[0].defect, direct);
        assert!(matches!(box_average_deviation(&f, &[8], &dis, 3), Err(Error::Precondition(_))));
    }
}
