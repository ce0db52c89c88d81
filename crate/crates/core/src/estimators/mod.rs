//! Annealed estimation and quenched-versus-annealed defect diagnostics.
//!
//! Annealed laws are averages of exact per-environment dynamic programs, so
//! the only statistical error is environment sampling. Replicas are split
//! into contiguous groups whose partial sums give delete-a-group jackknife
//! errors for any functional of the annealed law.

mod averages;
mod defects;
mod lclt;

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

pub use averages::{annealed_distribution, AnnealedLaw, ReplicaAverage};
pub use defects::{
    annealed_regularity_report, box_average_deviation, exit_cell_defect, exit_law_box_defect,
    fixed_time_box_defect, ExitDefect,
};
pub use lclt::{
    intermediate_measures_defects, lclt_defect, lclt_density, prefactor_lclt_defect, IntermediateDefects,
    PrefactorMode,
};

use crate::dp::SparseLatticeDist;
use crate::env::{Environment, EnvironmentSpec};
use crate::error::{Error, Result};
use crate::lattice::{BoxPartition, Site};
use crate::rng::{derive_seed, Seed};

/// The single environment playing ω in quenched-versus-annealed comparisons.
pub fn quenched_environment(spec: &EnvironmentSpec, seed: u128) -> Result<Environment> {
    Environment::new(spec.clone(), derive_seed(seed, "quenched-env", 0))
}

/// Mass per box of `partition`, or the total mass when `partition` is `None`.
pub fn box_masses(dist: &SparseLatticeDist, partition: Option<&BoxPartition>) -> BTreeMap<Site, f64> {
    let mut out = BTreeMap::new();
    for (x, v) in &dist.mass {
        let key = partition.map_or(Site::origin(), |p| p.box_of(x));
        *out.entry(key).or_insert(0.0) += v;
    }
    out
}

/// `Σ_Δ |p(Δ) − q(Δ)|`; a `None` partition is the single box `Z^d`.
pub fn l1_partition_distance(
    p: &SparseLatticeDist,
    q: &SparseLatticeDist,
    partition: Option<&BoxPartition>,
) -> Result<f64> {
    if p.time != q.time {
        return Err(Error::TimeMismatch {
            left: p.time,
            right: q.time,
        });
    }
    let a = box_masses(p, partition);
    let b = box_masses(q, partition);
    Ok(l1_maps(&a, &b))
}

pub(crate) fn l1_maps<K: Ord>(a: &BTreeMap<K, f64>, b: &BTreeMap<K, f64>) -> f64 {
    let mut total = 0.0;
    for (k, v) in a {
        total += (v - b.get(k).copied().unwrap_or(0.0)).abs();
    }
    for (k, v) in b {
        if !a.contains_key(k) {
            total += v.abs();
        }
    }
    total
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefectRow {
    pub metric: String,
    pub grid: String,
    pub grid_value: f64,
    pub defect: f64,
    /// Standard error plus twice the pruned mass.
    pub error: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefectReport {
    pub kind: String,
    pub seed: Seed,
    pub spec_hash: String,
    pub dim: usize,
    pub warnings: Vec<String>,
    pub rows: Vec<DefectRow>,
}

impl DefectReport {
    pub fn new(kind: &str, spec: &EnvironmentSpec, seed: u128) -> Self {
        let mut warnings = Vec::new();
        if spec.dim < 4 {
            warnings.push(format!(
                "dimension {} is below 4: the limit theorems behind this diagnostic assume d >= 4",
                spec.dim
            ));
        }
        DefectReport {
            kind: kind.into(),
            seed: Seed(seed),
            spec_hash: spec.hash_hex(),
            dim: spec.dim,
            warnings,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, metric: &str, grid: &str, grid_value: f64, defect: f64, error: f64, samples: usize) {
        self.rows.push(DefectRow {
            metric: metric.into(),
            grid: grid.into(),
            grid_value,
            defect,
            error,
            samples,
        });
    }

    pub fn rows_for<'a>(&'a self, metric: &'a str) -> impl Iterator<Item = &'a DefectRow> + 'a {
        self.rows.iter().filter(move |r| r.metric == metric)
    }

    pub fn value<'a>(&'a self, metric: &'a str, grid_value: f64) -> Option<&'a DefectRow> {
        self.rows_for(metric).find(|r| r.grid_value == grid_value)
    }

    /// Rows `seed,spec_hash,metric,grid,grid_value,defect,error,samples`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["seed", "spec_hash", "metric", "grid", "grid_value", "defect", "error", "samples"])?;
        for r in &self.rows {
            wr.write_record([
                self.seed.to_string(),
                self.spec_hash.clone(),
                r.metric.clone(),
                r.grid.clone(),
                r.grid_value.to_string(),
                r.defect.to_string(),
                r.error.to_string(),
                r.samples.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_box(a: f64, b: f64) -> SparseLatticeDist {
        SparseLatticeDist::from_masses(1, Site::origin(), 0, [(Site::new(&[0]), a), (Site::new(&[2]), b)])
    }

    #[test]
    fn partition_distance_examples() {
        let part = BoxPartition::new(2);
        let p = two_box(0.6, 0.4);
        let q = two_box(0.4, 0.6);
        assert!((l1_partition_distance(&p, &q, Some(&part)).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(l1_partition_distance(&p, &p, Some(&part)).unwrap(), 0.0);
        let left = two_box(1.0, 0.0);
        let right = two_box(0.0, 1.0);
        assert_eq!(l1_partition_distance(&left, &right, Some(&BoxPartition::new(1))).unwrap(), 2.0);
        assert_eq!(l1_partition_distance(&left, &right, None).unwrap(), 0.0);
        let mut late = q.clone();
        late.time = 3;
        assert!(matches!(l1_partition_distance(&p, &late, None), Err(Error::TimeMismatch { .. })));
    }

    #[test]
    fn report_csv() {
        let spec = EnvironmentSpec::symmetric(2);
        let mut r = DefectReport::new("test", &spec, 5);
        r.push("lambda", "M", 4.0, 0.1, 0.01, 10);
        assert_eq!(r.warnings.len(), 1);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), format!("5,{},lambda,M,4,0.1,0.01,10", spec.hash_hex()));
    }
}
