//! Annealed regeneration ensembles and the quantities derived from them.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Environment, EnvironmentSpec};
use crate::error::{Error, Result};
use crate::lattice::{Direction, Site};
use crate::rng::{derive_seed, stream};
use crate::stats::{bootstrap_correlation, cholesky, mean, pearson, std_error, Interval};
use crate::walk::{default_margin, detect_regenerations, simulate_walk};

/// One increment `(τ_{k+1} − τ_k, X_{τ_{k+1}} − X_{τ_k})`, `k ≥ 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegenIncrement {
    pub walk: usize,
    pub k: usize,
    pub dtau: usize,
    pub dx: Site,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegenerationEnsemble {
    pub dim: usize,
    pub direction: Direction,
    pub margin: i64,
    pub walks: usize,
    pub records: Vec<RegenIncrement>,
    pub discarded_unconfirmed: usize,
}

impl RegenerationEnsemble {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dtaus(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.dtau as f64).collect()
    }

    /// Rows `walk_id,k,dtau,dx1..dxd`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["walk_id".to_string(), "k".into(), "dtau".into()];
        header.extend((1..=self.dim).map(|i| format!("dx{i}")));
        wr.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.walk.to_string(), r.k.to_string(), r.dtau.to_string()];
            row.extend(r.dx.coords(self.dim).iter().map(|c| c.to_string()));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Runs `walks` walks of `steps` steps, each in a fresh environment, and pools
/// the confirmed regeneration increments after the first regeneration.
pub fn collect_ensemble(
    spec: &EnvironmentSpec,
    seed: u128,
    dir: Direction,
    walks: usize,
    steps: usize,
    margin: Option<i64>,
) -> Result<RegenerationEnsemble> {
    if walks == 0 {
        return Err(Error::Precondition("need at least one walk".into()));
    }
    if dir.axis >= spec.dim {
        return Err(Error::Precondition(format!("direction axis {} outside dim {}", dir.axis, spec.dim)));
    }
    let margin = margin.unwrap_or_else(|| default_margin(steps));
    let base = Environment::new(spec.clone(), 0)?;
    let per_walk: Vec<(Vec<RegenIncrement>, usize)> = (0..walks)
        .into_par_iter()
        .map(|i| {
            let env = base.reseeded(derive_seed(seed, "regen-env", i as u64));
            let mut rng = stream(seed, "regen-walk", i as u64);
            let traj = simulate_walk(&env, Site::origin(), steps, &mut rng);
            let recs = detect_regenerations(&traj, dir, margin);
            let unconfirmed = recs.iter().filter(|r| !r.confirmed).count();
            let confirmed: Vec<_> = recs.iter().filter(|r| r.confirmed).collect();
            let incs = confirmed
                .windows(2)
                .enumerate()
                .map(|(k, w)| RegenIncrement {
                    walk: i,
                    k: k + 1,
                    dtau: w[1].time - w[0].time,
                    dx: w[1].position - w[0].position,
                })
                .collect();
            (incs, unconfirmed)
        })
        .collect();
    let mut records = Vec::new();
    let mut discarded = 0;
    for (incs, unconfirmed) in per_walk {
        records.extend(incs);
        discarded += unconfirmed;
    }
    if records.len() < 10 {
        return Err(Error::InsufficientData(format!(
            "only {} confirmed regeneration increments (need 10); the law may lack drift along the direction",
            records.len()
        )));
    }
    Ok(RegenerationEnsemble {
        dim: spec.dim,
        direction: dir,
        margin,
        walks,
        records,
        discarded_unconfirmed: discarded,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityEstimate {
    pub velocity: Vec<f64>,
    pub velocity_se: Vec<f64>,
    pub direction: Vec<f64>,
    /// Per-unit-time covariance of the centred increment.
    pub covariance: Vec<Vec<f64>>,
    pub mean_dtau: f64,
    pub mean_dtau_se: f64,
    pub samples: usize,
    /// Covariance not positive definite.
    pub degenerate: bool,
}

/// `v̂ = mean ΔX / mean Δτ`, `ϑ̂ = mean ΔX / ‖mean ΔX‖`, `Σ̂ = cov(ΔX − v̂Δτ)/mean Δτ`.
pub fn velocity_covariance(ens: &RegenerationEnsemble) -> Result<VelocityEstimate> {
    let n = ens.len();
    if n < 30 {
        return Err(Error::InsufficientData(format!("velocity estimate needs >= 30 increments, got {n}")));
    }
    let d = ens.dim;
    let dtau = ens.dtaus();
    let mu = mean(&dtau);
    let mean_dx: Vec<f64> = (0..d)
        .map(|a| ens.records.iter().map(|r| r.dx.coord(a) as f64).sum::<f64>() / n as f64)
        .collect();
    let velocity: Vec<f64> = mean_dx.iter().map(|m| m / mu).collect();
    let resid: Vec<Vec<f64>> = ens
        .records
        .iter()
        .map(|r| (0..d).map(|a| r.dx.coord(a) as f64 - velocity[a] * r.dtau as f64).collect())
        .collect();
    let rmean: Vec<f64> = (0..d).map(|a| resid.iter().map(|r| r[a]).sum::<f64>() / n as f64).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for r in &resid {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (r[i] - rmean[i]) * (r[j] - rmean[j]);
            }
        }
    }
    for i in 0..d {
        for j in 0..d {
            cov[i][j] /= (n - 1) as f64;
        }
    }
    // symmetrize exactly
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (cov[i][j] + cov[j][i]);
            cov[i][j] = v;
            cov[j][i] = v;
        }
    }
    // delta-method standard error of the ratio estimator
    let velocity_se: Vec<f64> = (0..d).map(|a| (cov[a][a] / n as f64).sqrt() / mu).collect();
    let covariance: Vec<Vec<f64>> = cov.iter().map(|row| row.iter().map(|v| v / mu).collect()).collect();
    let norm = mean_dx.iter().map(|v| v * v).sum::<f64>().sqrt();
    let direction = mean_dx.iter().map(|v| v / norm).collect();
    Ok(VelocityEstimate {
        velocity,
        velocity_se,
        direction,
        degenerate: cholesky(&covariance).is_none(),
        covariance,
        mean_dtau: mu,
        mean_dtau_se: std_error(&dtau),
        samples: n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lag1 {
    pub correlation: f64,
    pub ci: Interval,
    pub pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegenDiagnostics {
    /// `(k, ℙ̂(Δτ > k))` for `k = 0..=max Δτ`.
    pub tail: Vec<(usize, f64)>,
    /// `None` below 100 increments or when consecutive pairs are degenerate.
    pub lag1: Option<Lag1>,
    pub b_n_frequency: f64,
    pub b_n_walks: usize,
}

/// Tail curve, lag-1 correlation of consecutive `Δτ` within a walk (with a
/// 1000-resample bootstrap interval) and the fraction of walks whose first
/// `min(N², count)` increments are all at most `bound`.
pub fn regen_diagnostics(ens: &RegenerationEnsemble, scale: u64, bound: usize, seed: u128) -> RegenDiagnostics {
    let mut dt: Vec<usize> = ens.records.iter().map(|r| r.dtau).collect();
    dt.sort_unstable();
    let n = dt.len();
    let top = dt.last().copied().unwrap_or(0);
    let mut tail = Vec::with_capacity(top + 1);
    let mut idx = 0;
    for k in 0..=top {
        while idx < n && dt[idx] <= k {
            idx += 1;
        }
        tail.push((k, (n - idx) as f64 / n as f64));
    }

    let pairs: Vec<(f64, f64)> = ens
        .records
        .windows(2)
        .filter(|w| w[0].walk == w[1].walk)
        .map(|w| (w[0].dtau as f64, w[1].dtau as f64))
        .collect();
    let lag1 = if n >= 100 {
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        pearson(&x, &y).and_then(|r| {
            let mut rng = stream(seed, "regen-bootstrap", 0);
            bootstrap_correlation(&pairs, 1000, &mut rng).map(|ci| Lag1 {
                correlation: r,
                ci,
                pairs: pairs.len(),
            })
        })
    } else {
        None
    };

    let limit = scale.saturating_mul(scale) as usize;
    let mut walks = 0;
    let mut good = 0;
    let mut i = 0;
    while i < ens.records.len() {
        let w = ens.records[i].walk;
        let mut j = i;
        while j < ens.records.len() && ens.records[j].walk == w {
            j += 1;
        }
        walks += 1;
        if ens.records[i..j].iter().take(limit).all(|r| r.dtau <= bound) {
            good += 1;
        }
        i = j;
    }
    RegenDiagnostics {
        tail,
        lag1,
        b_n_frequency: if walks > 0 { good as f64 / walks as f64 } else { f64::NAN },
        b_n_walks: walks,
    }
}
