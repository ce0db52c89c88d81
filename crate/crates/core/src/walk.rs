//! Monte Carlo walkers, directional hitting times, regeneration detection and
//! the ballisticity probes.

use std::collections::{HashMap, HashSet};
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Environment, EnvironmentSpec, SiteLaw, SiteLaws};
use crate::error::{Error, Result};
use crate::lattice::{Direction, Region, Site};
use crate::rng::{derive_seed, stream};
use crate::stats::{least_squares, wilson, Interval, Z95};

/// Memoizes site laws for one walk; revisits are frequent at low drift.
pub struct CachedLaws<'a, E: SiteLaws + ?Sized> {
    env: &'a E,
    cache: HashMap<Site, SiteLaw>,
}

impl<'a, E: SiteLaws + ?Sized> CachedLaws<'a, E> {
    pub fn new(env: &'a E) -> Self {
        CachedLaws {
            env,
            cache: HashMap::new(),
        }
    }

    pub fn step<R: Rng>(&mut self, x: &Site, rng: &mut R) -> Direction {
        let env = self.env;
        let law = self.cache.entry(*x).or_insert_with(|| env.law(x));
        law.sample(rng.random())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub dim: usize,
    pub start: Site,
    pub steps: Vec<Direction>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `X_0, …, X_n`.
    pub fn positions(&self) -> Vec<Site> {
        let mut out = Vec::with_capacity(self.steps.len() + 1);
        let mut x = self.start;
        out.push(x);
        for e in &self.steps {
            x = x.step(*e);
            out.push(x);
        }
        out
    }

    pub fn end(&self) -> Site {
        self.steps.iter().fold(self.start, |x, e| x.step(*e))
    }

    /// `⟨X_t, ℓ⟩` for every `t`.
    pub fn levels(&self, dir: Direction) -> Vec<i64> {
        self.positions().iter().map(|x| dir.project(x)).collect()
    }

    /// Rows `t,x1..xd`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.dim).map(|i| format!("x{i}")));
        wr.write_record(&header)?;
        for (t, x) in self.positions().iter().enumerate() {
            let mut row = vec![t.to_string()];
            row.extend(x.coords(self.dim).iter().map(|c| c.to_string()));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

pub fn simulate_walk<E: SiteLaws + ?Sized, R: Rng>(env: &E, start: Site, n: usize, rng: &mut R) -> Trajectory {
    let mut laws = CachedLaws::new(env);
    let mut steps = Vec::with_capacity(n);
    let mut x = start;
    for _ in 0..n {
        let e = laws.step(&x, rng);
        steps.push(e);
        x = x.step(e);
    }
    Trajectory {
        dim: env.dim(),
        start,
        steps,
    }
}

/// Runs until `stop(t, X_t)` holds or `t_max` steps have been taken; returns
/// the final time and position and whether `stop` fired.
pub fn run_until<E: SiteLaws + ?Sized, R: Rng>(
    env: &E,
    start: Site,
    t_max: usize,
    rng: &mut R,
    mut stop: impl FnMut(usize, &Site) -> bool,
) -> (usize, Site, bool) {
    let mut laws = CachedLaws::new(env);
    let mut x = start;
    for t in 0..=t_max {
        if stop(t, &x) {
            return (t, x, true);
        }
        if t == t_max {
            break;
        }
        x = x.step(laws.step(&x, rng));
    }
    (t_max, x, false)
}

/// First `t` with `⟨X_t, ℓ⟩ ≥ level`, `None` if the trajectory never gets there.
pub fn directional_hitting_time(traj: &Trajectory, dir: Direction, level: i64) -> Option<usize> {
    traj.positions().iter().position(|x| dir.project(x) >= level)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegenerationRecord {
    pub time: usize,
    pub position: Site,
    pub confirmed: bool,
    /// Highest level seen from `time` on.
    pub level_reached: i64,
}

/// Regeneration times of a finite trajectory in direction `dir`.
///
/// `t` qualifies when `⟨X_s,ℓ⟩ < ⟨X_t,ℓ⟩` for all `s < t`, `⟨X_{t+1},ℓ⟩ >
/// ⟨X_t,ℓ⟩` and `⟨X_s,ℓ⟩ > ⟨X_{t+1},ℓ⟩` for every observed `s > t+1`. A record
/// is confirmed when the path later reaches `⟨X_t,ℓ⟩ + margin`.
///
/// Candidates sit on a stack with strictly increasing levels, so a new
/// level only ever invalidates a suffix of it.
pub fn detect_regenerations(traj: &Trajectory, dir: Direction, margin: i64) -> Vec<RegenerationRecord> {
    let levels = traj.levels(dir);
    let positions = traj.positions();
    let mut stack: Vec<usize> = Vec::new();
    // max of levels[..s − 1]
    let mut earlier = i64::MIN;
    for s in 0..levels.len() {
        let level = levels[s];
        while let Some(&t) = stack.last() {
            if t + 1 < s && level <= levels[t] + 1 {
                stack.pop();
            } else {
                break;
            }
        }
        if s >= 1 {
            let t = s - 1;
            if levels[t] > earlier && level > levels[t] {
                stack.push(t);
            }
            earlier = earlier.max(levels[t]);
        }
    }
    let top = levels.iter().copied().max().unwrap_or(0);
    stack
        .into_iter()
        .map(|t| RegenerationRecord {
            time: t,
            position: positions[t],
            confirmed: top >= levels[t] + margin,
            level_reached: top,
        })
        .collect()
}

/// Confirmation margin used when none is given: `2·R_1(n)`, at most `n/10`.
pub fn default_margin(n: usize) -> i64 {
    let cap = (n / 10) as i64;
    match crate::lattice::scale_r(1, n as u64) {
        Ok(r) => (2 * r as i64).min(cap),
        Err(_) => cap,
    }
}

/// Number of distinct sites of `region` visited by both walks, each run
/// until it leaves the region or `t_max` steps.
pub fn intersection_count<E, Q, R1, R2>(
    env: &E,
    start: Site,
    region: &Q,
    t_max: usize,
    rng1: &mut R1,
    rng2: &mut R2,
) -> usize
where
    E: SiteLaws + ?Sized,
    Q: Region + ?Sized,
    R1: Rng,
    R2: Rng,
{
    let visited = |rng: &mut dyn FnMut(&mut CachedLaws<E>, &Site) -> Direction| {
        let mut laws = CachedLaws::new(env);
        let mut seen = HashSet::new();
        let mut x = start;
        for t in 0..=t_max {
            if !region.is_interior(&x) {
                break;
            }
            seen.insert(x);
            if t == t_max {
                break;
            }
            x = x.step(rng(&mut laws, &x));
        }
        seen
    };
    let a = visited(&mut |laws, x| laws.step(x, rng1));
    let b = visited(&mut |laws, x| laws.step(x, rng2));
    a.intersection(&b).count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TPoint {
    pub level: i64,
    /// Fraction of decided runs that reached `−L` first.
    pub estimate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub backward_first: usize,
    pub forward_first: usize,
    pub censored: usize,
    /// Every run was censored: excluded from the fit.
    pub all_censored: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionTCurve {
    pub points: Vec<TPoint>,
    /// Slope of `log(−log p̂)` against `log L`.
    pub gamma_hat: Option<f64>,
}

/// Annealed `ℙ(T_L^{−ℓ} < T_L^{ℓ})` over a grid of `L`, one fresh
/// environment per run. Each run serves the whole grid.
pub fn condition_t_curve(
    spec: &EnvironmentSpec,
    seed: u128,
    dir: Direction,
    levels: &[i64],
    samples: usize,
    t_max: usize,
) -> Result<ConditionTCurve> {
    if samples < 100 {
        return Err(Error::Precondition(format!("condition (T) needs samples >= 100, got {samples}")));
    }
    if levels.is_empty() || levels.windows(2).any(|w| w[0] >= w[1]) || levels[0] < 1 {
        return Err(Error::Precondition("L grid must be positive and strictly increasing".into()));
    }
    let base = Environment::new(spec.clone(), 0)?;
    let top = *levels.last().unwrap();
    // per run: first time each |level| was reached on each side
    let runs: Vec<(Vec<Option<usize>>, Vec<Option<usize>>)> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let env = base.reseeded(derive_seed(seed, "condition-t-env", i as u64));
            let mut rng = stream(seed, "condition-t-walk", i as u64);
            let mut fwd = vec![None; levels.len()];
            let mut bwd = vec![None; levels.len()];
            run_until(&env, Site::origin(), t_max, &mut rng, |t, x| {
                let u = dir.project(x);
                for (k, &l) in levels.iter().enumerate() {
                    if u >= l && fwd[k].is_none() {
                        fwd[k] = Some(t);
                    }
                    if -u >= l && bwd[k].is_none() {
                        bwd[k] = Some(t);
                    }
                }
                u >= top || -u >= top
            });
            (fwd, bwd)
        })
        .collect();

    let mut points = Vec::with_capacity(levels.len());
    for (k, &l) in levels.iter().enumerate() {
        let (mut back, mut fwd, mut cens) = (0, 0, 0);
        for (f, b) in &runs {
            match (f[k], b[k]) {
                (Some(tf), Some(tb)) if tb < tf => back += 1,
                (Some(_), _) => fwd += 1,
                (None, Some(_)) => back += 1,
                (None, None) => cens += 1,
            }
        }
        let decided = back + fwd;
        let ci = wilson(back, decided, Z95);
        points.push(TPoint {
            level: l,
            estimate: if decided > 0 { back as f64 / decided as f64 } else { f64::NAN },
            ci_lo: ci.lo,
            ci_hi: ci.hi,
            backward_first: back,
            forward_first: fwd,
            censored: cens,
            all_censored: decided == 0,
        });
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = points
        .iter()
        .filter(|p| !p.all_censored && p.estimate > 0.0 && p.estimate < 1.0)
        .map(|p| ((p.level as f64).ln(), (-p.estimate.ln()).ln()))
        .unzip();
    let gamma_hat = least_squares(&xs, &ys).map(|(slope, _)| slope);
    Ok(ConditionTCurve { points, gamma_hat })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionPProbe {
    pub scale: u64,
    pub exponent: f64,
    /// Largest estimated non-right exit probability over the start grid.
    pub estimate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub worst_start: Vec<i32>,
    pub starts: usize,
    pub censored: usize,
    pub threshold: f64,
    /// Upper CI end below `N₀^{−M}`.
    pub fulfilled: bool,
    /// `ln c₀ = 100 + 4d(ln η)²`: the smallest scale at which the criterion
    /// carries its asymptotic meaning.
    pub ln_minimal_scale: f64,
    pub minimal_scale_met: bool,
}

/// Monte Carlo estimate of `sup_x ℙ^x(T_∂Box ≠ T_∂₊Box)` over a grid of
/// starts in the inner box, with transverse half-width `aspect·N₀³`.
#[allow(clippy::too_many_arguments)]
pub fn condition_p_probe(
    spec: &EnvironmentSpec,
    seed: u128,
    dir: Direction,
    scale: u64,
    aspect: f64,
    exponent: f64,
    samples: usize,
    t_max: usize,
    max_sites: usize,
) -> Result<ConditionPProbe> {
    if scale < 2 || scale % 2 != 0 {
        return Err(Error::Precondition(format!("N0 must be an even integer >= 2, got {scale}")));
    }
    if !(aspect >= 1.0) || !aspect.is_finite() {
        return Err(Error::Precondition(format!("box aspect must be >= 1, got {aspect}")));
    }
    if samples == 0 {
        return Err(Error::Precondition("condition (P) needs samples >= 1".into()));
    }
    let dim = spec.dim;
    let n0 = scale as i64;
    let cube = (scale as f64).powi(3);
    let half_width = aspect * cube;
    // Box: −N₀/2 < u < N₀, |v_j| < aspect·N₀³
    let long_count = (n0 - 1) - (-n0 / 2 + 1) + 1;
    let trans_count = 2 * (half_width.ceil() as u128) - 1;
    let volume = (long_count as u128).saturating_mul(trans_count.saturating_pow(dim as u32 - 1));
    if volume > max_sites as u128 {
        return Err(Error::Resource {
            what: "condition (P) box".into(),
            required: volume,
            budget: max_sites,
        });
    }
    let base = Environment::new(spec.clone(), 0)?;

    // inner box: N₀/3 ≤ u < N₀, |v_j| < N₀³; transverse grid at centre and both edges
    let edge = (cube.ceil() as i64 - 1).min(i32::MAX as i64) as i32;
    let offsets: Vec<i32> = if edge == 0 { vec![0] } else { vec![-edge, 0, edge] };
    let first = (n0 + 2) / 3;
    let mut starts = Vec::new();
    for u in first..n0 {
        let mut combos: Vec<Site> = vec![Site::origin()];
        for a in (0..dim).filter(|&a| a != dir.axis) {
            combos = combos
                .into_iter()
                .flat_map(|s| {
                    offsets.iter().map(move |&o| {
                        let mut t = s;
                        t.set(a, o);
                        t
                    })
                })
                .collect();
        }
        for mut s in combos {
            s.set(dir.axis, dir.sign as i32 * u as i32);
            starts.push(s);
        }
    }

    let axis = dir.axis;
    let inside = move |x: &Site| {
        let u = dir.project(x);
        2 * u > -n0
            && u < n0
            && (0..dim).filter(|&a| a != axis).all(|a| (x.coord(a).abs() as f64) < half_width)
    };
    let right_exit = move |x: &Site| {
        dir.project(x) >= n0 && (0..dim).filter(|&a| a != axis).all(|a| (x.coord(a).abs() as f64) < half_width)
    };
    let outcomes: Vec<(usize, usize, usize)> = starts
        .par_iter()
        .enumerate()
        .map(|(j, &x0)| {
            let (mut bad, mut good, mut cens) = (0, 0, 0);
            for i in 0..samples {
                let idx = (j * samples + i) as u64;
                let env = base.reseeded(derive_seed(seed, "condition-p-env", idx));
                let mut rng = stream(seed, "condition-p-walk", idx);
                let (_, x, exited) = run_until(&env, x0, t_max, &mut rng, |_, x| !inside(x));
                if !exited {
                    cens += 1;
                } else if right_exit(&x) {
                    good += 1;
                } else {
                    bad += 1;
                }
            }
            (bad, good, cens)
        })
        .collect();

    let mut best: Option<(f64, Interval, usize)> = None;
    let mut censored = 0;
    for (j, &(bad, good, cens)) in outcomes.iter().enumerate() {
        censored += cens;
        let decided = bad + good;
        if decided == 0 {
            continue;
        }
        let p = bad as f64 / decided as f64;
        let ci = wilson(bad, decided, Z95);
        if best.is_none_or(|(bp, bci, _)| p > bp || (p == bp && ci.hi > bci.hi)) {
            best = Some((p, ci, j));
        }
    }
    let (estimate, ci, j) = best.ok_or_else(|| {
        Error::InsufficientData("every condition (P) run was censored; raise t_max".into())
    })?;
    let threshold = (scale as f64).powf(-exponent);
    let eta = spec.eta;
    let ln_c0 = 100.0 + 4.0 * dim as f64 * eta.ln().powi(2);
    Ok(ConditionPProbe {
        scale,
        exponent,
        estimate,
        ci_lo: ci.lo,
        ci_hi: ci.hi,
        worst_start: starts[j].coords(dim).to_vec(),
        starts: starts.len(),
        censored,
        threshold,
        fulfilled: ci.hi < threshold,
        ln_minimal_scale: ln_c0,
        minimal_scale_met: (scale as f64).ln() >= ln_c0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::ParallelogramGeom;

    fn path_1d(levels: &[i32]) -> Trajectory {
        let steps = levels
            .windows(2)
            .map(|w| Direction::new(0, if w[1] > w[0] { 1 } else { -1 }))
            .collect();
        Trajectory {
            dim: 1,
            start: Site::new(&[levels[0]]),
            steps,
        }
    }

    fn times(recs: &[RegenerationRecord]) -> Vec<usize> {
        recs.iter().map(|r| r.time).collect()
    }

    #[test]
    fn simulate_basics() {
        let env = Environment::new(EnvironmentSpec::symmetric(2), 1).unwrap();
        let t0 = simulate_walk(&env, Site::new(&[3, 3]), 0, &mut stream(1, "w", 0));
        assert_eq!(t0.positions(), vec![Site::new(&[3, 3])]);
        let a = simulate_walk(&env, Site::origin(), 50, &mut stream(1, "w", 0));
        let b = simulate_walk(&env, Site::origin(), 50, &mut stream(1, "w", 0));
        assert_eq!(a, b);
        for w in a.positions().windows(2) {
            assert_eq!((w[1] - w[0]).l1(), 1);
        }
    }

    #[test]
    fn hitting_time_examples() {
        let t = path_1d(&[0, 1, 2]);
        let e1 = Direction::new(0, 1);
        assert_eq!(directional_hitting_time(&t, e1, 2), Some(2));
        assert_eq!(directional_hitting_time(&t, e1, 0), Some(0));
        assert_eq!(directional_hitting_time(&t, e1, 5), None);
    }

    #[test]
    fn regeneration_examples() {
        let e1 = Direction::new(0, 1);
        let r = detect_regenerations(&path_1d(&[0, 1, 2, 3]), e1, 0);
        assert_eq!(times(&r), vec![0, 1, 2]);
        assert!(r.iter().all(|x| x.confirmed));
        let r = detect_regenerations(&path_1d(&[0, 1, 0, 1, 2, 3]), e1, 0);
        assert_eq!(times(&r), vec![4]);
        let r = detect_regenerations(&path_1d(&[0, 1, 2, 3]), e1, 2);
        let confirmed: Vec<bool> = r.iter().map(|x| x.confirmed).collect();
        assert_eq!(confirmed, vec![true, true, false]);
    }

    #[test]
    fn default_margin_is_capped() {
        assert_eq!(default_margin(100), 10);
        assert_eq!(default_margin(2), 0);
        // R_1(10^6) = 987
        assert_eq!(default_margin(1_000_000), 1974);
    }

    #[test]
    fn intersections() {
        let spec = EnvironmentSpec::elliptic_dirichlet(vec![3.0, 1.0, 1.0, 1.0], 0.05);
        let env = Environment::new(spec, 5).unwrap();
        let geom = ParallelogramGeom::new(2, Site::origin(), 4).unwrap();
        for i in 0..20 {
            let c = intersection_count(&env, Site::origin(), &geom, 10_000, &mut stream(9, "a", i), &mut stream(9, "b", i));
            assert!(c >= 1);
        }
        let same = intersection_count(&env, Site::origin(), &geom, 10_000, &mut stream(9, "a", 0), &mut stream(9, "a", 0));
        let mut rng = stream(9, "a", 0);
        let (mut seen, mut x) = (HashSet::new(), Site::origin());
        let mut laws = CachedLaws::new(&env);
        while geom.is_interior(&x) {
            seen.insert(x);
            x = x.step(laws.step(&x, &mut rng));
        }
        assert_eq!(same, seen.len());
    }

    #[test]
    fn condition_t_symmetric_and_drifted() {
        let curve = condition_t_curve(&EnvironmentSpec::symmetric(1), 3, Direction::new(0, 1), &[2, 4], 4000, 100_000).unwrap();
        for p in &curve.points {
            assert_eq!(p.censored, 0);
            assert!(p.ci_lo <= 0.5 && 0.5 <= p.ci_hi, "{p:?}");
        }
        let drift = condition_t_curve(&EnvironmentSpec::drifted_1d(0.7), 4, Direction::new(0, 1), &[2, 4, 8], 20_000, 100_000).unwrap();
        let p2 = &drift.points[0];
        assert!(p2.ci_lo <= 9.0 / 58.0 && 9.0 / 58.0 <= p2.ci_hi, "{p2:?}");
        assert!(drift.points.windows(2).all(|w| w[1].estimate < w[0].estimate));
        assert!(drift.gamma_hat.is_some());
        assert!(matches!(
            condition_t_curve(&EnvironmentSpec::symmetric(1), 3, Direction::new(0, 1), &[2], 50, 10),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn condition_t_censoring_is_flagged() {
        let curve = condition_t_curve(&EnvironmentSpec::symmetric(1), 3, Direction::new(0, 1), &[1, 50], 100, 3).unwrap();
        assert!(!curve.points[0].all_censored);
        assert!(curve.points[1].all_censored);
        assert_eq!(curve.points[1].censored, 100);
    }

    #[test]
    fn condition_p_probe_examples() {
        let drifted = EnvironmentSpec::homogeneous(vec![0.85, 0.05, 0.05, 0.05], 0.05);
        let e1 = Direction::new(0, 1);
        let p = condition_p_probe(&drifted, 1, e1, 4, 2.0, 1.0, 500, 1_000_000, 50_000_000).unwrap();
        assert!(p.ci_hi < 0.5, "{p:?}");
        assert!(!p.minimal_scale_met);
        let sym = condition_p_probe(&EnvironmentSpec::symmetric(2), 1, e1, 4, 2.0, 1.0, 500, 1_000_000, 50_000_000).unwrap();
        assert!(sym.estimate > p.estimate);
        // from level 2 the longitudinal projection is a lazy symmetric walk on (−2, 4)
        assert!(sym.ci_lo <= 1.0 / 3.0 && 1.0 / 3.0 <= sym.ci_hi, "{sym:?}");
        assert!(matches!(
            condition_p_probe(&drifted, 1, e1, 3, 2.0, 1.0, 10, 100, 1000),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            condition_p_probe(&drifted, 1, e1, 4, 25.0, 1.0, 10, 100, 1000),
            Err(Error::Resource { .. })
        ));
    }
}
