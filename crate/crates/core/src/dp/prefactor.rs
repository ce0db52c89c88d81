//! Finite-horizon prefactors `f_n(x) = Σ_y P_ω^y(X_n = x)`.
//!
//! Translation invariance of the i.i.d. law turns the density of
//! `Q_N(A) = E[Σ_x P_ω^0(X_N = x)·1{σ_x ω ∈ A}]` at `σ_x ω` into `f_N(x)`, which
//! obeys the adjoint recursion `h_{t+1}(x) = Σ_e ω(x−e, e)·h_t(x−e)`, `h_0 ≡ 1`.
//! `h_t(x)` depends on the environment in the L∞ ball of radius `t` around `x`,
//! so a window is computed on a halo of width equal to the horizon and every
//! window value is exact.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dp::dist::{for_each_index, DenseField, SparseLatticeDist, SCHEMA_VERSION};
use crate::dp::DpConfig;
use crate::env::{LawGrid, SiteLaws};
use crate::error::{Error, Result};
use crate::lattice::{Direction, GridBox, Site};

#[derive(Clone, Debug, PartialEq)]
pub struct PrefactorField {
    pub horizon: usize,
    pub window: GridBox,
    pub values: Vec<f64>,
    pub exact: Vec<bool>,
    /// Sum of values zeroed by pruning (over all sweep steps, window only).
    pub pruned: f64,
}

impl PrefactorField {
    pub fn constant_one(window: GridBox) -> Self {
        let n = window.volume() as usize;
        PrefactorField {
            horizon: 0,
            window,
            values: vec![1.0; n],
            exact: vec![true; n],
            pruned: 0.0,
        }
    }

    /// Value at `x`, `None` outside the window or where not exact.
    pub fn get(&self, x: &Site) -> Option<f64> {
        let i = self.window.index(x)?;
        self.exact[i].then_some(self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (Site, f64)> + '_ {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| (self.window.site(i), *v))
    }

    /// Support sites of `dist` where this field has no exact value.
    pub fn uncovered(&self, dist: &SparseLatticeDist) -> Vec<Site> {
        dist.mass
            .keys()
            .filter(|x| self.get(x).is_none())
            .copied()
            .collect()
    }

    pub fn require_cover(&self, dist: &SparseLatticeDist) -> Result<()> {
        let uncovered = self.uncovered(dist);
        if uncovered.is_empty() {
            Ok(())
        } else {
            Err(Error::Coverage { uncovered })
        }
    }

    /// CSV with columns `x1..xd,value,exact`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let dim = self.window.dim;
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (1..=dim).map(|i| format!("x{i}")).collect();
        header.push("value".into());
        header.push("exact".into());
        wr.write_record(&header)?;
        for (i, (x, v)) in self.iter().enumerate() {
            let mut row: Vec<String> = x.coords(dim).iter().map(|c| c.to_string()).collect();
            row.push(v.to_string());
            row.push(self.exact[i].to_string());
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn to_doc(&self) -> PrefactorDoc {
        let dim = self.window.dim;
        PrefactorDoc {
            schema_version: SCHEMA_VERSION,
            dim,
            horizon: self.horizon,
            window_lo: self.window.lo.coords(dim).to_vec(),
            window_hi: self.window.hi.coords(dim).to_vec(),
            pruned: self.pruned,
            values: self.values.clone(),
            exact: self.exact.clone(),
        }
    }
}

/// JSON form of a [`PrefactorField`]; values in window index order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PrefactorDoc {
    pub schema_version: u32,
    pub dim: usize,
    pub horizon: usize,
    pub window_lo: Vec<i32>,
    pub window_hi: Vec<i32>,
    pub pruned: f64,
    pub values: Vec<f64>,
    pub exact: Vec<bool>,
}

/// Runs the adjoint recursion from `initial` (given on `window ⊕ steps`) for
/// `steps` steps, calling `visit(t, h_t)` with `h_t` read on `window` for
/// `t = 0..=steps`. Returns the pruned total.
fn adjoint_sweep<E: SiteLaws + ?Sized>(
    env: &E,
    initial: DenseField,
    window: GridBox,
    steps: usize,
    cfg: &DpConfig,
    mut visit: impl FnMut(usize, &DenseField),
) -> Result<f64> {
    let grid = initial.grid;
    debug_assert!(grid.contains_box(&window.dilate(steps as i32)));
    let laws = LawGrid::build(env, grid);
    let strides = grid.strides();
    // x − e as a flat offset, paired with the law slot of direction e
    let pulls: Vec<(isize, usize)> = Direction::all(grid.dim)
        .map(|e| (-(e.sign as isize) * strides[e.axis] as isize, e.index()))
        .collect();

    let mut cur = initial;
    let mut next = DenseField::zeros(grid);
    let mut pruned = 0.0;
    visit(0, &cur);
    for t in 0..steps {
        let target = window.dilate((steps - t - 1) as i32);
        for_each_index(&grid, &target, |i| {
            let mut acc = 0.0;
            for &(off, k) in &pulls {
                let src = (i as isize + off) as usize;
                acc += laws.at(src)[k] * cur.values[src];
            }
            next.values[i] = if acc < cfg.prune {
                if window.contains(&grid.site(i)) {
                    pruned += acc;
                }
                0.0
            } else {
                acc
            };
        });
        std::mem::swap(&mut cur, &mut next);
        visit(t + 1, &cur);
    }
    Ok(pruned)
}

fn window_values(field: &DenseField, window: &GridBox) -> Vec<f64> {
    let mut out = Vec::with_capacity(window.volume() as usize);
    for_each_index(&field.grid, window, |i| out.push(field.values[i]));
    out
}

fn check_window(window: &GridBox, halo: usize, cfg: &DpConfig) -> Result<GridBox> {
    if window.is_empty() {
        return Err(Error::Precondition("prefactor window is empty".into()));
    }
    let grid = window.dilate(halo as i32);
    grid.check_budget("prefactor window plus halo", cfg.max_sites)?;
    Ok(grid)
}

fn ones(grid: GridBox) -> DenseField {
    DenseField {
        grid,
        values: vec![1.0; grid.volume() as usize],
    }
}

/// `f_n` on `window`.
pub fn prefactor_field<E: SiteLaws + ?Sized>(
    env: &E,
    n: usize,
    window: GridBox,
    cfg: &DpConfig,
) -> Result<PrefactorField> {
    let grid = check_window(&window, n, cfg)?;
    let mut values = Vec::new();
    let pruned = adjoint_sweep(env, ones(grid), window, n, cfg, |t, h| {
        if t == n {
            values = window_values(h, &window);
        }
    })?;
    let len = values.len();
    Ok(PrefactorField {
        horizon: n,
        window,
        values,
        exact: vec![true; len],
        pruned,
    })
}

/// Cesàro mean `(1/n)·Σ_{N=0}^{n−1} f_N` on `window`.
pub fn cesaro_prefactor<E: SiteLaws + ?Sized>(
    env: &E,
    n: usize,
    window: GridBox,
    cfg: &DpConfig,
) -> Result<PrefactorField> {
    if n == 0 {
        return Err(Error::Precondition("Cesàro average needs n >= 1".into()));
    }
    let grid = check_window(&window, n - 1, cfg)?;
    let mut sum = vec![0.0; window.volume() as usize];
    let pruned = adjoint_sweep(env, ones(grid), window, n - 1, cfg, |_, h| {
        let mut j = 0;
        for_each_index(&h.grid, &window, |i| {
            sum[j] += h.values[i];
            j += 1;
        });
    })?;
    let inv = 1.0 / n as f64;
    let values: Vec<f64> = sum.into_iter().map(|s| s * inv).collect();
    let len = values.len();
    Ok(PrefactorField {
        horizon: n,
        window,
        values,
        exact: vec![true; len],
        pruned,
    })
}

/// `x ↦ Σ_y field(y)·P_ω^y(X_m = x)` on the window shrunk by `m`. Applied to
/// `f_n` this yields `f_{n+m}`.
pub fn adjoint_evolve<E: SiteLaws + ?Sized>(
    env: &E,
    field: &PrefactorField,
    m: usize,
    cfg: &DpConfig,
) -> Result<PrefactorField> {
    let inner = field.window.dilate(-(m as i32));
    if inner.is_empty() {
        return Err(Error::Precondition(format!(
            "window too small to evolve the prefactor by {m} steps"
        )));
    }
    let initial = DenseField {
        grid: field.window,
        values: field.values.clone(),
    };
    let mut values = Vec::new();
    let pruned = adjoint_sweep(env, initial, inner, m, cfg, |t, h| {
        if t == m {
            values = window_values(h, &inner);
        }
    })?;
    let mut exact = Vec::with_capacity(values.len());
    for x in inner.sites() {
        let ball = GridBox::around(inner.dim, x, m as i32);
        let ok = ball.sites().all(|y| field.get(&y).is_some());
        exact.push(ok);
    }
    Ok(PrefactorField {
        horizon: field.horizon + m,
        window: inner,
        values,
        exact,
        pruned: field.pruned + pruned,
    })
}

/// `Z_{ω,n} = Σ_x ℙ^0(X_n = x)·f(σ_x ω)`.
pub fn normalization_constant(annealed: &SparseLatticeDist, prefactor: &PrefactorField) -> Result<f64> {
    prefactor.require_cover(annealed)?;
    Ok(annealed
        .mass
        .iter()
        .map(|(x, p)| p * prefactor.get(x).expect("covered"))
        .sum())
}
