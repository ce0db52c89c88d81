//! Exit laws: joint distribution of exit position and exit time from a region.

use std::collections::BTreeMap;

use crate::dp::dist::{for_each_index, DenseField};
use crate::dp::forward::neighbour_offsets;
use crate::dp::DpConfig;
use crate::env::{LawGrid, SiteLaws};
use crate::error::{Error, Result};
use crate::lattice::{Region, Site};

#[derive(Clone, Debug, PartialEq)]
pub struct ExitLaw {
    /// `(exit site, exit time) ↦ probability`.
    pub joint: BTreeMap<(Site, usize), f64>,
    /// Mass still inside after `t_max` steps.
    pub censored: f64,
    pub pruned: f64,
}

impl ExitLaw {
    /// Exit-position marginal.
    pub fn positions(&self) -> BTreeMap<Site, f64> {
        let mut out = BTreeMap::new();
        for ((x, _), p) in &self.joint {
            *out.entry(*x).or_insert(0.0) += p;
        }
        out
    }

    pub fn total(&self) -> f64 {
        self.joint.values().sum::<f64>() + self.censored + self.pruned
    }
}

/// `P_ω^start(X_{T_U} = x, T_U = t)` for `t ≤ t_max`, where `T_U` is the
/// first time the walk is outside the interior of `region`.
pub fn exit_law<E: SiteLaws + ?Sized, R: Region + ?Sized>(
    env: &E,
    start: Site,
    region: &R,
    t_max: usize,
    cfg: &DpConfig,
) -> Result<ExitLaw> {
    if !region.is_interior(&start) {
        return Err(Error::Precondition(format!("start {start:?} is not inside the region")));
    }
    let dim = env.dim();
    let reach = crate::lattice::GridBox::around(dim, start, t_max as i32);
    let grid = reach
        .intersect(&region.interior_bounds().dilate(1))
        .expect("start is interior");
    grid.check_budget("exit-law grid", cfg.max_sites)?;
    let laws = LawGrid::build(env, grid);
    let offsets = neighbour_offsets(&grid);
    let interior: Vec<bool> = grid.sites().map(|x| region.is_interior(&x)).collect();

    let mut cur = DenseField::zeros(grid);
    let mut next = DenseField::zeros(grid);
    cur.values[grid.index(&start).unwrap()] = 1.0;
    let mut joint = BTreeMap::new();
    let mut pruned = 0.0;
    let mut active = crate::lattice::GridBox::around(dim, start, 0);
    for t in 0..t_max {
        let next_active = active.dilate(1).intersect(&grid).expect("nonempty");
        for_each_index(&grid, &next_active, |i| next.values[i] = 0.0);
        for_each_index(&grid, &active, |i| {
            let m = cur.values[i];
            if m == 0.0 || !interior[i] {
                return;
            }
            let law = laws.at(i);
            for (k, off) in offsets.iter().enumerate() {
                let j = (i as isize + off) as usize;
                next.values[j] += m * law[k];
            }
        });
        for_each_index(&grid, &next_active, |i| {
            let v = next.values[i];
            if v == 0.0 {
                return;
            }
            if !interior[i] {
                joint.insert((grid.site(i), t + 1), v);
                next.values[i] = 0.0;
            } else if v < cfg.prune {
                pruned += v;
                next.values[i] = 0.0;
            }
        });
        std::mem::swap(&mut cur, &mut next);
        active = next_active;
    }
    let mut censored = 0.0;
    for_each_index(&grid, &active, |i| {
        if interior[i] {
            censored += cur.values[i];
        }
    });
    Ok(ExitLaw {
        joint,
        censored,
        pruned,
    })
}
