use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::dp::{quenched_distribution, DpConfig, SparseLatticeDist};
use crate::env::{EnvironmentEnsemble, EnvironmentSpec};
use crate::error::{Error, Result};
use crate::lattice::Site;

const GROUPS: usize = 20;
const CHUNK: usize = 64;

/// Average of `count` replica mass functions keyed by `K`, with per-key
/// moments and contiguous group sums for jackknife errors.
#[derive(Clone, Debug)]
pub struct ReplicaAverage<K: Ord + Copy> {
    pub count: usize,
    /// Mean pruned mass per replica.
    pub pruned: f64,
    // [sum, sum of squares, group sums...]
    acc: BTreeMap<K, Vec<f64>>,
    group_sizes: Vec<usize>,
}

impl<K: Ord + Copy + Send> ReplicaAverage<K> {
    /// Runs `replica(i)` for `i < count` in parallel and reduces in index order.
    pub fn build<F>(count: usize, replica: F) -> Result<Self>
    where
        F: Fn(usize) -> Result<(BTreeMap<K, f64>, f64)> + Sync,
    {
        if count == 0 {
            return Err(Error::Precondition("need at least one environment".into()));
        }
        let groups = count.min(GROUPS);
        let group_of = |i: usize| i * groups / count;
        let mut group_sizes = vec![0; groups];
        for i in 0..count {
            group_sizes[group_of(i)] += 1;
        }
        let mut acc: BTreeMap<K, Vec<f64>> = BTreeMap::new();
        let mut pruned = 0.0;
        let mut start = 0;
        while start < count {
            let end = (start + CHUNK).min(count);
            let batch: Vec<Result<(BTreeMap<K, f64>, f64)>> = (start..end).into_par_iter().map(&replica).collect();
            for (offset, r) in batch.into_iter().enumerate() {
                let (map, lost) = r?;
                let g = group_of(start + offset);
                pruned += lost;
                for (k, v) in map {
                    let slot = acc.entry(k).or_insert_with(|| vec![0.0; 2 + groups]);
                    slot[0] += v;
                    slot[1] += v * v;
                    slot[2 + g] += v;
                }
            }
            start = end;
        }
        Ok(ReplicaAverage {
            count,
            pruned: pruned / count as f64,
            acc,
            group_sizes,
        })
    }
}

impl<K: Ord + Copy> ReplicaAverage<K> {
    pub fn mean(&self) -> BTreeMap<K, f64> {
        let n = self.count as f64;
        self.acc.iter().map(|(k, a)| (*k, a[0] / n)).collect()
    }

    /// Per-key standard error of the mean.
    pub fn std_errors(&self) -> BTreeMap<K, f64> {
        let n = self.count as f64;
        self.acc
            .iter()
            .map(|(k, a)| {
                let se = if self.count < 2 {
                    0.0
                } else {
                    let m = a[0] / n;
                    ((a[1] - n * m * m).max(0.0) / (n - 1.0) / n).sqrt()
                };
                (*k, se)
            })
            .collect()
    }

    pub fn groups(&self) -> usize {
        self.group_sizes.len()
    }

    /// Mean over all replicas outside group `g`.
    pub fn leave_out(&self, g: usize) -> BTreeMap<K, f64> {
        let n = (self.count - self.group_sizes[g]) as f64;
        self.acc.iter().map(|(k, a)| (*k, (a[0] - a[2 + g]) / n)).collect()
    }

    /// `f(mean)` and its delete-a-group jackknife standard error (0 with a
    /// single replica).
    pub fn jackknife<F: Fn(&BTreeMap<K, f64>) -> f64>(&self, f: F) -> (f64, f64) {
        let value = f(&self.mean());
        let g = self.groups();
        if g < 2 {
            return (value, 0.0);
        }
        let parts: Vec<f64> = (0..g).map(|i| f(&self.leave_out(i))).collect();
        let m = parts.iter().sum::<f64>() / g as f64;
        let var = parts.iter().map(|p| (p - m) * (p - m)).sum::<f64>() * (g - 1) as f64 / g as f64;
        (value, var.sqrt())
    }
}

/// Annealed law at one time: the mean of exact quenched laws over an
/// environment ensemble.
#[derive(Clone, Debug)]
pub struct AnnealedLaw {
    pub dim: usize,
    pub start: Site,
    pub time: usize,
    pub replicas: ReplicaAverage<Site>,
}

impl AnnealedLaw {
    pub fn from_average(dim: usize, start: Site, time: usize, replicas: ReplicaAverage<Site>) -> Self {
        AnnealedLaw {
            dim,
            start,
            time,
            replicas,
        }
    }

    pub fn dist(&self) -> SparseLatticeDist {
        self.as_dist(&self.replicas.mean())
    }

    /// Wraps a mass map (for instance a leave-out mean) as a distribution.
    pub fn as_dist(&self, mass: &BTreeMap<Site, f64>) -> SparseLatticeDist {
        let mut d = SparseLatticeDist::from_masses(self.dim, self.start, self.time, mass.iter().map(|(k, v)| (*k, *v)));
        d.pruned = self.replicas.pruned;
        d
    }

    pub fn std_errors(&self) -> BTreeMap<Site, f64> {
        self.replicas.std_errors()
    }

    pub fn count(&self) -> usize {
        self.replicas.count
    }

    /// `f(annealed)` with its jackknife error.
    pub fn jackknife<F: Fn(&SparseLatticeDist) -> f64>(&self, f: F) -> (f64, f64) {
        self.replicas.jackknife(|m| f(&self.as_dist(m)))
    }
}

/// `ℙ^start(X_n = ·)` from `count` environments of the ensemble seeded by `seed`.
pub fn annealed_distribution(
    spec: &EnvironmentSpec,
    seed: u128,
    start: Site,
    n: usize,
    count: usize,
    cfg: &DpConfig,
) -> Result<AnnealedLaw> {
    let ensemble = EnvironmentEnsemble::new(spec.clone(), seed, count)?;
    let replicas = ReplicaAverage::build(count, |i| {
        let d = quenched_distribution(&ensemble.environment(i), start, n, cfg)?;
        Ok((d.mass, d.pruned))
    })?;
    Ok(AnnealedLaw::from_average(spec.dim, start, n, replicas))
}
