use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dp::{
    cesaro_prefactor, env_convolve, evolve_forward, prefactor_field, quenched_distribution, DpConfig, PrefactorField,
    SparseLatticeDist,
};
use crate::env::{EnvironmentEnsemble, EnvironmentSpec, SiteLaws};
use crate::error::{Error, Result};
use crate::lattice::{same_parity, BoxPartition, GridBox, Site};
use crate::stats::spd_inverse_det;

use super::averages::{annealed_distribution, ReplicaAverage};
use super::{quenched_environment, DefectReport};

/// Gaussian terms below this are treated as zero and their mass booked as defect.
const DENSITY_FLOOR: f64 = 1e-16;
const MAX_GAUSSIAN_SITES: usize = 50_000_000;

/// Parity-corrected lattice Gaussian `2(2πn)^{−d/2}(det Σ)^{−1/2}·exp(−(x−μ)ᵀΣ⁻¹(x−μ)/(2n))`.
#[derive(Clone, Debug)]
pub struct LatticeGaussian {
    dim: usize,
    n: usize,
    mean: Vec<f64>,
    inverse: Vec<Vec<f64>>,
    peak: f64,
    covariance: Vec<Vec<f64>>,
}

impl LatticeGaussian {
    pub fn new(mean: &[f64], covariance: &[Vec<f64>], n: usize) -> Result<Self> {
        let dim = mean.len();
        if dim == 0 || covariance.len() != dim || covariance.iter().any(|r| r.len() != dim) {
            return Err(Error::Precondition("mean and covariance dimensions disagree".into()));
        }
        if n == 0 {
            return Err(Error::Precondition("the Gaussian comparison needs n >= 1".into()));
        }
        let (inverse, det) = spd_inverse_det(covariance).ok_or(Error::SingularCovariance)?;
        let peak = 2.0 * (2.0 * std::f64::consts::PI * n as f64).powf(-(dim as f64) / 2.0) / det.sqrt();
        Ok(LatticeGaussian {
            dim,
            n,
            mean: mean.to_vec(),
            inverse,
            peak,
            covariance: covariance.to_vec(),
        })
    }

    pub fn density(&self, x: &Site) -> f64 {
        let r: Vec<f64> = (0..self.dim).map(|a| x.coord(a) as f64 - self.mean[a]).collect();
        let mut q = 0.0;
        for i in 0..self.dim {
            for j in 0..self.dim {
                q += r[i] * self.inverse[i][j] * r[j];
            }
        }
        self.peak * (-q / (2.0 * self.n as f64)).exp()
    }

    /// A box holding every site where the density reaches the floor.
    fn support_box(&self) -> Option<GridBox> {
        if self.peak < DENSITY_FLOOR {
            return None;
        }
        let c = 2.0 * self.n as f64 * (self.peak / DENSITY_FLOOR).ln();
        let mut lo = Site::origin();
        let mut hi = Site::origin();
        for a in 0..self.dim {
            let r = (c * self.covariance[a][a]).sqrt();
            lo.set(a, (self.mean[a] - r).floor() as i32 - 1);
            hi.set(a, (self.mean[a] + r).ceil() as i32 + 1);
        }
        Some(GridBox::new(self.dim, lo, hi))
    }
}

/// `lclt_density` at a single site.
pub fn lclt_density(x: &Site, mean: &[f64], covariance: &[Vec<f64>], n: usize) -> Result<f64> {
    Ok(LatticeGaussian::new(mean, covariance, n)?.density(x))
}

/// `Σ_x |dist(x) − g(x)|` over the parity class of `dist` at time `n`, where
/// `g` is the parity-corrected Gaussian with mean `mean` (of `X_n`) and
/// per-step covariance `covariance`. Gaussian mass below the density floor
/// inside the enumeration box is added to the defect.
pub fn lclt_defect(dist: &SparseLatticeDist, mean: &[f64], covariance: &[Vec<f64>], n: usize) -> Result<f64> {
    if mean.len() != dist.dim {
        return Err(Error::Precondition(format!("mean has {} entries, dist dim {}", mean.len(), dist.dim)));
    }
    let g = LatticeGaussian::new(mean, covariance, n)?;
    let mut defect = 0.0;
    let mut counted = std::collections::HashSet::new();
    if let Some(b) = g.support_box() {
        b.check_budget("Gaussian enumeration box", MAX_GAUSSIAN_SITES)?;
        for x in b.sites() {
            if !same_parity(&x, &dist.start, n) {
                continue;
            }
            let dens = g.density(&x);
            if dens < DENSITY_FLOOR {
                defect += dens;
                continue;
            }
            counted.insert(x);
            defect += (dist.get(&x) - dens).abs();
        }
    }
    for (x, v) in &dist.mass {
        if !counted.contains(x) {
            defect += v.abs();
        }
    }
    Ok(defect)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrefactorMode {
    /// `(1/n)·Σ_{N<n} f_N`.
    Cesaro,
    /// `f_n`.
    FixedHorizon,
    /// `f ≡ 1`: the baseline without a prefactor.
    ConstantOne,
}

impl PrefactorMode {
    pub fn name(self) -> &'static str {
        match self {
            PrefactorMode::Cesaro => "cesaro",
            PrefactorMode::FixedHorizon => "fixed-horizon",
            PrefactorMode::ConstantOne => "constant-one",
        }
    }

    pub fn field<E: SiteLaws + ?Sized>(self, env: &E, n: usize, window: GridBox, cfg: &DpConfig) -> Result<PrefactorField> {
        match self {
            PrefactorMode::ConstantOne => Ok(PrefactorField::constant_one(window)),
            // the empty average is read as f_0 ≡ 1
            PrefactorMode::Cesaro if n == 0 => Ok(PrefactorField::constant_one(window)),
            PrefactorMode::Cesaro => cesaro_prefactor(env, n, window, cfg),
            PrefactorMode::FixedHorizon => prefactor_field(env, n, window, cfg),
        }
    }
}

fn weighted_gap(quenched: &SparseLatticeDist, annealed: &SparseLatticeDist, f: &PrefactorField) -> f64 {
    let mut total = 0.0;
    for (x, a) in &annealed.mass {
        total += (quenched.get(x) - a * f.get(x).expect("prefactor covers the annealed support")).abs();
    }
    for (x, q) in &quenched.mass {
        if !annealed.mass.contains_key(x) {
            total += q.abs();
        }
    }
    total
}

/// `D_n = Σ_x |P_ω^0(X_n = x) − ℙ^0(X_n = x)·f(x)|` with `f` per `mode`.
pub fn prefactor_lclt_defect(
    spec: &EnvironmentSpec,
    seed: u128,
    n: usize,
    count: usize,
    mode: PrefactorMode,
    cfg: &DpConfig,
) -> Result<DefectReport> {
    let env = quenched_environment(spec, seed)?;
    let quenched = quenched_distribution(&env, Site::origin(), n, cfg)?;
    let ann = annealed_distribution(spec, seed, Site::origin(), n, count, cfg)?;
    let window = GridBox::around(spec.dim, Site::origin(), n as i32);
    let f = mode.field(&env, n, window, cfg)?;
    f.require_cover(&ann.dist())?;
    let (v, se) = ann.jackknife(|a| weighted_gap(&quenched, a, &f));
    let fmax = f.values.iter().copied().fold(1.0, f64::max);
    let bar = 2.0 * (quenched.pruned + fmax * ann.replicas.pruned + f.pruned);
    let mut report = DefectReport::new("prefactor-lclt", spec, seed);
    report.push(&format!("prefactor-lclt-{}", mode.name()), "n", n as f64, v, se + bar, count);
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntermediateDefects {
    pub n: usize,
    pub k: usize,
    pub l: usize,
    pub z_n: f64,
    pub z_n_minus_k: f64,
    pub d1: f64,
    pub d1_error: f64,
    pub d2: f64,
    pub d2_error: f64,
    pub d3: f64,
    pub d3_error: f64,
    /// Distance from the annealed-times-prefactor law straight to the quenched law.
    pub direct: f64,
    pub direct_error: f64,
    pub triangle_holds: bool,
    pub samples: usize,
}

impl IntermediateDefects {
    pub fn to_report(&self, spec: &EnvironmentSpec, seed: u128) -> DefectReport {
        let mut r = DefectReport::new("intermediate-measures", spec, seed);
        let n = self.n as f64;
        r.push("d1", "n", n, self.d1, self.d1_error, self.samples);
        r.push("d2", "n", n, self.d2, self.d2_error, self.samples);
        r.push("d3", "n", n, self.d3, self.d3_error, 1);
        r.push("direct", "n", n, self.direct, self.direct_error, self.samples);
        r
    }
}

fn times_prefactor(dist: &SparseLatticeDist, f: &PrefactorField) -> (SparseLatticeDist, f64) {
    let z: f64 = dist.mass.iter().map(|(x, v)| v * f.get(x).expect("covered")).sum();
    let mut out = SparseLatticeDist::from_masses(
        dist.dim,
        dist.start,
        dist.time,
        dist.mass.iter().map(|(x, v)| (*x, v * f.get(x).expect("covered") / z)),
    );
    out.pruned = dist.pruned;
    (out, z)
}

/// Quenched law at `time` redistributed inside each box of side `side`
/// proportionally to `f` over the box's sites of the right parity.
fn box_measure(quenched: &SparseLatticeDist, f: &PrefactorField, side: u32) -> SparseLatticeDist {
    let part = BoxPartition::new(side);
    let dim = quenched.dim;
    let mut boxes: BTreeMap<Site, f64> = BTreeMap::new();
    for (x, v) in &quenched.mass {
        *boxes.entry(part.box_of(x)).or_insert(0.0) += v;
    }
    let mut out = Vec::new();
    for (k, mass) in boxes {
        let cell = part.cell(dim, &k);
        let sites: Vec<Site> = cell
            .sites()
            .filter(|y| same_parity(y, &quenched.start, quenched.time))
            .collect();
        let norm: f64 = sites.iter().map(|y| f.get(y).expect("covered")).sum();
        for y in sites {
            out.push((y, mass * f.get(&y).expect("covered") / norm));
        }
    }
    let mut d = SparseLatticeDist::from_masses(dim, quenched.start, quenched.time, out);
    d.pruned = quenched.pruned;
    d
}

/// The three consecutive distances between annealed-times-prefactor at `n`,
/// its time-`(n−k)` version convolved with `k` quenched steps, the
/// box-smoothed quenched law at `n−k` convolved likewise, and the quenched law
/// at `n`, with `k = ⌈n^ε⌉` and box side `l = ⌈n^δ⌉`.
#[allow(clippy::too_many_arguments)]
pub fn intermediate_measures_defects(
    spec: &EnvironmentSpec,
    seed: u128,
    n: usize,
    epsilon: f64,
    delta: f64,
    count: usize,
    mode: PrefactorMode,
    cfg: &DpConfig,
) -> Result<IntermediateDefects> {
    if !(epsilon > 0.0) || !(delta >= 0.0) || delta > epsilon {
        return Err(Error::Precondition(format!("need 0 <= delta <= epsilon and epsilon > 0, got {delta}, {epsilon}")));
    }
    let k = (n as f64).powf(epsilon).ceil() as usize;
    let l = ((n as f64).powf(delta).ceil() as usize).max(1);
    if k >= n {
        return Err(Error::Precondition(format!("k = ceil(n^epsilon) = {k} must be below n = {n}")));
    }
    let env = quenched_environment(spec, seed)?;
    let q_early = quenched_distribution(&env, Site::origin(), n - k, cfg)?;
    let q_n = quenched_distribution(&env, Site::origin(), n, cfg)?;
    let ensemble = EnvironmentEnsemble::new(spec.clone(), seed, count)?;
    let avg = ReplicaAverage::<(u8, Site)>::build(count, |i| {
        let e = ensemble.environment(i);
        let early = quenched_distribution(&e, Site::origin(), n - k, cfg)?;
        let late = evolve_forward(&e, &early, k, cfg)?;
        let mut map = BTreeMap::new();
        map.extend(early.mass.iter().map(|(x, v)| ((0u8, *x), *v)));
        map.extend(late.mass.iter().map(|(x, v)| ((1u8, *x), *v)));
        Ok((map, late.pruned))
    })?;
    let window = GridBox::around(spec.dim, Site::origin(), (n + l) as i32);
    let f = mode.field(&env, n, window, cfg)?;
    let split = |m: &BTreeMap<(u8, Site), f64>, t: u8, time: usize| {
        let mut d = SparseLatticeDist::from_masses(
            spec.dim,
            Site::origin(),
            time,
            m.iter().filter(|((s, _), _)| *s == t).map(|((_, x), v)| (*x, *v)),
        );
        d.pruned = avg.pruned;
        d
    };

    let c = env_convolve(&env, &box_measure(&q_early, &f, l as u32), k, cfg)?;
    let measures = |m: &BTreeMap<(u8, Site), f64>| -> Result<(SparseLatticeDist, SparseLatticeDist, f64, f64)> {
        let (a, z_n) = times_prefactor(&split(m, 1, n), &f);
        let (early, z_early) = times_prefactor(&split(m, 0, n - k), &f);
        let b = env_convolve(&env, &early, k, cfg)?;
        Ok((a, b, z_n, z_early))
    };
    let (a, b, z_n, z_early) = measures(&avg.mean())?;
    let d1 = a.l1_distance(&b);
    let d2 = b.l1_distance(&c);
    let d3 = c.l1_distance(&q_n);
    let direct = a.l1_distance(&q_n);

    // jackknife over the annealed replicas for the distances that depend on them
    let g = avg.groups();
    let mut parts = vec![Vec::with_capacity(g); 3];
    if g >= 2 {
        for i in 0..g {
            let (a, b, _, _) = measures(&avg.leave_out(i))?;
            parts[0].push(a.l1_distance(&b));
            parts[1].push(b.l1_distance(&c));
            parts[2].push(a.l1_distance(&q_n));
        }
    }
    let jk = |p: &[f64]| {
        if p.len() < 2 {
            return 0.0;
        }
        let m = p.iter().sum::<f64>() / p.len() as f64;
        (p.iter().map(|v| (v - m) * (v - m)).sum::<f64>() * (p.len() - 1) as f64 / p.len() as f64).sqrt()
    };
    let bar = 2.0 * (q_n.pruned + avg.pruned + f.pruned);
    Ok(IntermediateDefects {
        n,
        k,
        l,
        z_n,
        z_n_minus_k: z_early,
        d1,
        d1_error: jk(&parts[0]) + bar,
        d2,
        d2_error: jk(&parts[1]) + bar,
        d3,
        d3_error: bar,
        direct,
        direct_error: jk(&parts[2]) + bar,
        triangle_holds: direct <= d1 + d2 + d3 + 1e-12,
        samples: count,
    })
}
