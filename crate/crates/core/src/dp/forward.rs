//! Forward quenched evolution `mass'(x+e) += mass(x)·ω(x,e)` on dense boxes.

use crate::dp::dist::{for_each_index, DenseField, SparseLatticeDist};
use crate::dp::DpConfig;
use crate::env::{LawGrid, SiteLaws};
use crate::error::{Error, Result};
use crate::lattice::{Direction, GridBox, Site};

/// Flat index offsets of the 2d neighbours inside `grid`, in direction order.
pub(crate) fn neighbour_offsets(grid: &GridBox) -> Vec<isize> {
    let strides = grid.strides();
    Direction::all(grid.dim)
        .map(|e| e.sign as isize * strides[e.axis] as isize)
        .collect()
}

/// Moves entries below `threshold` into the returned pruned mass.
pub(crate) fn prune_box(field: &mut DenseField, active: &GridBox, threshold: f64) -> f64 {
    if threshold <= 0.0 {
        return 0.0;
    }
    let mut lost = 0.0;
    let grid = field.grid;
    for_each_index(&grid, active, |i| {
        let v = field.values[i];
        if v != 0.0 && v < threshold {
            lost += v;
            field.values[i] = 0.0;
        }
    });
    lost
}

/// Evolves `dist` by `steps` quenched steps in `env`.
pub fn evolve_forward<E: SiteLaws + ?Sized>(
    env: &E,
    dist: &SparseLatticeDist,
    steps: usize,
    cfg: &DpConfig,
) -> Result<SparseLatticeDist> {
    if dist.dim != env.dim() {
        return Err(Error::Precondition(format!(
            "distribution has dim {}, environment {}",
            dist.dim,
            env.dim()
        )));
    }
    if steps == 0 || dist.is_empty() {
        let mut out = dist.clone();
        out.time += steps;
        return Ok(out);
    }
    let support = dist.bounds().expect("nonempty");
    let grid = support.dilate(steps as i32);
    grid.check_budget("forward evolution grid", cfg.max_sites)?;
    let laws = LawGrid::build(env, grid);
    let offsets = neighbour_offsets(&grid);

    let mut cur = DenseField::from_dist(dist, grid);
    let mut next = DenseField::zeros(grid);
    let mut pruned = dist.pruned;
    let mut active = support;
    for _ in 0..steps {
        let next_active = active.dilate(1);
        for_each_index(&grid, &next_active, |i| next.values[i] = 0.0);
        for_each_index(&grid, &active, |i| {
            let m = cur.values[i];
            if m == 0.0 {
                return;
            }
            let law = laws.at(i);
            for (k, off) in offsets.iter().enumerate() {
                let j = (i as isize + off) as usize;
                next.values[j] += m * law[k];
            }
        });
        pruned += prune_box(&mut next, &next_active, cfg.prune);
        std::mem::swap(&mut cur, &mut next);
        active = next_active;
    }
    let mut out = SparseLatticeDist::from_masses(dist.dim, dist.start, dist.time + steps, cur.to_masses());
    out.pruned = pruned;
    Ok(out)
}

/// `P_ω^start(X_n = ·)`.
pub fn quenched_distribution<E: SiteLaws + ?Sized>(
    env: &E,
    start: Site,
    n: usize,
    cfg: &DpConfig,
) -> Result<SparseLatticeDist> {
    evolve_forward(env, &SparseLatticeDist::point(env.dim(), start), n, cfg)
}

/// Environment-convolution `(ν¹ * ν^{que,k})_ω(x) = Σ_y ν¹(y)·P_{σ_y ω}^0(X_k = x − y)`.
///
/// Since `P_{σ_y ω}^0(X_k = x − y) = P_ω^y(X_k = x)`, this is exactly forward
/// evolution of `first` by `k` quenched steps.
pub fn env_convolve<E: SiteLaws + ?Sized>(
    env: &E,
    first: &SparseLatticeDist,
    k: usize,
    cfg: &DpConfig,
) -> Result<SparseLatticeDist> {
    evolve_forward(env, first, k, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Environment, EnvironmentSpec, SiteLaw, TabulatedEnv};

    pub(crate) fn example_env() -> TabulatedEnv {
        TabulatedEnv::new(1, SiteLaw::uniform(1))
            .with(Site::new(&[-1]), SiteLaw::nearest_1d(0.5))
            .with(Site::new(&[0]), SiteLaw::nearest_1d(0.7))
            .with(Site::new(&[1]), SiteLaw::nearest_1d(0.6))
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12
    }

    #[test]
    fn one_step_symmetric() {
        let env = Environment::new(EnvironmentSpec::symmetric(1), 0).unwrap();
        let d = quenched_distribution(&env, Site::origin(), 1, &DpConfig::default()).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.get(&Site::new(&[1])), 0.5);
        assert_eq!(d.get(&Site::new(&[-1])), 0.5);
        assert_eq!(d.time, 1);
    }

    #[test]
    fn two_steps_in_tabulated_env() {
        let d = quenched_distribution(&example_env(), Site::origin(), 2, &DpConfig::default()).unwrap();
        assert!(close(d.get(&Site::new(&[2])), 0.42));
        assert!(close(d.get(&Site::new(&[0])), 0.43));
        assert!(close(d.get(&Site::new(&[-2])), 0.15));
        assert_eq!(d.len(), 3);
    }

    #[test]
    fn binomial_at_two() {
        let env = Environment::new(EnvironmentSpec::symmetric(1), 0).unwrap();
        let d = quenched_distribution(&env, Site::origin(), 2, &DpConfig::default()).unwrap();
        assert_eq!(d.get(&Site::origin()), 0.5);
        assert_eq!(d.get(&Site::new(&[2])), 0.25);
        assert_eq!(d.get(&Site::new(&[-2])), 0.25);
    }

    #[test]
    fn conservation_and_support() {
        let spec = EnvironmentSpec::elliptic_dirichlet(vec![1.0, 2.0, 0.5, 0.7], 0.05);
        let env = Environment::new(spec, 3).unwrap();
        let d = quenched_distribution(&env, Site::new(&[4, -7]), 100, &DpConfig::default()).unwrap();
        assert!((d.total() - 1.0).abs() <= 1e-12);
        assert!(d.support_ok());
        let n0 = quenched_distribution(&env, Site::new(&[4, -7]), 0, &DpConfig::default()).unwrap();
        assert_eq!(n0, SparseLatticeDist::point(2, Site::new(&[4, -7])));
    }

    #[test]
    fn convolution_identities() {
        let spec = EnvironmentSpec::elliptic_dirichlet(vec![1.0; 4], 0.05);
        let env = Environment::new(spec, 8).unwrap();
        let cfg = DpConfig::default();
        let delta = SparseLatticeDist::point(2, Site::origin());
        assert_eq!(
            env_convolve(&env, &delta, 5, &cfg).unwrap(),
            quenched_distribution(&env, Site::origin(), 5, &cfg).unwrap()
        );
        let first = quenched_distribution(&env, Site::origin(), 7, &cfg).unwrap();
        assert_eq!(env_convolve(&env, &first, 0, &cfg).unwrap(), first);
        let composed = env_convolve(&env, &first, 4, &cfg).unwrap();
        let direct = quenched_distribution(&env, Site::origin(), 11, &cfg).unwrap();
        assert!(composed.l1_distance(&direct) <= 1e-12);
    }

    #[test]
    fn pruning_is_sound() {
        let spec = EnvironmentSpec::elliptic_dirichlet(vec![1.0, 2.0, 0.5, 0.7], 0.05);
        let env = Environment::new(spec, 4).unwrap();
        let exact = quenched_distribution(&env, Site::origin(), 40, &DpConfig::default()).unwrap();
        let cfg = DpConfig {
            prune: 1e-6,
            ..DpConfig::default()
        };
        let pruned = quenched_distribution(&env, Site::origin(), 40, &cfg).unwrap();
        assert!(pruned.pruned > 0.0);
        assert!((pruned.total() + pruned.pruned - 1.0).abs() <= 1e-10);
        assert!(exact.l1_distance(&pruned) <= 2.0 * pruned.pruned);
    }

    #[test]
    fn budget_is_enforced() {
        let env = Environment::new(EnvironmentSpec::symmetric(3), 0).unwrap();
        let cfg = DpConfig {
            max_sites: 1000,
            ..DpConfig::default()
        };
        assert!(matches!(
            quenched_distribution(&env, Site::origin(), 20, &cfg),
            Err(Error::Resource { .. })
        ));
    }
}
