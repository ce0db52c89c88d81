//! Couplings of quenched and annealed laws.
//!
//! The box coupling is the optimal total-variation coupling of two laws
//! pushed onto a box partition. Its off-diagonal part is the product of the
//! normalized residual marginals; only the diagonal is constrained, so any
//! other completion would serve as well. The point coupling refines it by the
//! conditional laws `dM` steps later, and the pair walk iterates box couplings
//! over rounds until two quenched walkers coincide.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dp::{evolve_forward, quenched_distribution, DpConfig, SparseLatticeDist};
use crate::env::{Environment, EnvironmentEnsemble, EnvironmentSpec, SiteLaws};
use crate::error::{Error, Result};
use crate::estimators::{box_masses, quenched_environment, ReplicaAverage};
use crate::lattice::{same_parity, BoxPartition, Site};
use crate::rng::{derive_seed, stream};
use crate::walk::simulate_walk;

/// Optimal coupling of two box-mass functions.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxCoupling {
    pub dim: usize,
    pub side: u32,
    pub left: BTreeMap<Site, f64>,
    pub right: BTreeMap<Site, f64>,
    /// `min(left(Δ), right(Δ))` per box.
    pub diagonal: BTreeMap<Site, f64>,
    pub diagonal_mass: f64,
    left_residual: BTreeMap<Site, f64>,
    right_residual: BTreeMap<Site, f64>,
    residual_norm: f64,
}

impl BoxCoupling {
    /// Builds the coupling of two mass functions on the same key space.
    pub fn from_masses(dim: usize, side: u32, left: BTreeMap<Site, f64>, right: BTreeMap<Site, f64>) -> Self {
        let mut diagonal = BTreeMap::new();
        let mut left_residual = BTreeMap::new();
        let mut right_residual = BTreeMap::new();
        for (k, a) in &left {
            let b = right.get(k).copied().unwrap_or(0.0);
            let m = a.min(b);
            if m > 0.0 {
                diagonal.insert(*k, m);
            }
            if a - m > 0.0 {
                left_residual.insert(*k, a - m);
            }
        }
        for (k, b) in &right {
            let a = left.get(k).copied().unwrap_or(0.0);
            let r = b - a.min(*b);
            if r > 0.0 {
                right_residual.insert(*k, r);
            }
        }
        let diagonal_mass = diagonal.values().sum();
        let residual_norm = right_residual.values().sum();
        BoxCoupling {
            dim,
            side,
            left,
            right,
            diagonal,
            diagonal_mass,
            left_residual,
            right_residual,
            residual_norm,
        }
    }

    pub fn mass(&self, a: &Site, b: &Site) -> f64 {
        let diag = if a == b { self.diagonal.get(a).copied().unwrap_or(0.0) } else { 0.0 };
        diag + self.off_diagonal(a, b)
    }

    fn off_diagonal(&self, a: &Site, b: &Site) -> f64 {
        match (self.left_residual.get(a), self.right_residual.get(b)) {
            (Some(x), Some(y)) => x * y / self.residual_norm,
            _ => 0.0,
        }
    }

    /// Number of nonzero entries of the joint mass.
    pub fn pair_count(&self) -> usize {
        self.diagonal.len() + self.left_residual.len() * self.right_residual.len()
    }

    /// All nonzero `(left box, right box, mass)` entries.
    pub fn triples(&self) -> impl Iterator<Item = (Site, Site, f64)> + '_ {
        let diag = self.diagonal.iter().map(|(k, v)| (*k, *k, *v));
        let off = self
            .left_residual
            .keys()
            .flat_map(move |a| self.right_residual.keys().map(move |b| (*a, *b, self.off_diagonal(a, b))));
        diag.chain(off)
    }

    /// Largest deviation of a row or column sum from its marginal.
    pub fn marginal_error(&self) -> f64 {
        let mut rows: BTreeMap<Site, f64> = BTreeMap::new();
        let mut cols: BTreeMap<Site, f64> = BTreeMap::new();
        for (a, b, v) in self.triples() {
            *rows.entry(a).or_insert(0.0) += v;
            *cols.entry(b).or_insert(0.0) += v;
        }
        let gap = |m: &BTreeMap<Site, f64>, want: &BTreeMap<Site, f64>| {
            want.iter()
                .map(|(k, v)| (m.get(k).copied().unwrap_or(0.0) - v).abs())
                .chain(m.iter().filter(|(k, _)| !want.contains_key(k)).map(|(_, v)| v.abs()))
                .fold(0.0, f64::max)
        };
        gap(&rows, &self.left).max(gap(&cols, &self.right))
    }

    /// Samples a box pair.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> (Site, Site) {
        sample_maximal(&self.left, &self.right, rng).expect("coupling of nonempty laws")
    }

    /// Rows `left_1..left_d,right_1..right_d,mass` over box indices.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_triples(w, self.dim, self.triples())
    }
}

fn write_triples<W: Write>(w: W, dim: usize, rows: impl Iterator<Item = (Site, Site, f64)>) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header: Vec<String> = (1..=dim).map(|a| format!("left_{a}")).collect();
    header.extend((1..=dim).map(|a| format!("right_{a}")));
    header.push("mass".into());
    wr.write_record(&header)?;
    for (a, b, v) in rows {
        let mut rec: Vec<String> = a.coords(dim).iter().chain(b.coords(dim)).map(|c| c.to_string()).collect();
        rec.push(v.to_string());
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

fn draw<R: Rng>(m: &BTreeMap<Site, f64>, total: f64, rng: &mut R) -> Site {
    let mut u = rng.random::<f64>() * total;
    let mut last = None;
    for (k, v) in m {
        if *v <= 0.0 {
            continue;
        }
        if u < *v {
            return *k;
        }
        u -= v;
        last = Some(*k);
    }
    last.expect("positive mass")
}

/// One draw from the maximal coupling of two (possibly unnormalized) laws:
/// equal values with probability `Σ min(a, b)`, otherwise independent draws
/// from the normalized residuals.
fn sample_maximal<R: Rng>(a: &BTreeMap<Site, f64>, b: &BTreeMap<Site, f64>, rng: &mut R) -> Option<(Site, Site)> {
    let ta: f64 = a.values().sum();
    let tb: f64 = b.values().sum();
    if ta <= 0.0 || tb <= 0.0 {
        return None;
    }
    let mut common = BTreeMap::new();
    for (k, v) in a {
        let m = (v / ta).min(b.get(k).copied().unwrap_or(0.0) / tb);
        if m > 0.0 {
            common.insert(*k, m);
        }
    }
    let overlap: f64 = common.values().sum();
    if rng.random::<f64>() < overlap {
        let k = draw(&common, overlap, rng);
        return Some((k, k));
    }
    let residual = |p: &BTreeMap<Site, f64>, t: f64| -> BTreeMap<Site, f64> {
        p.iter()
            .map(|(k, v)| (*k, (v / t - common.get(k).copied().unwrap_or(0.0)).max(0.0)))
            .filter(|(_, v)| *v > 0.0)
            .collect()
    };
    let (ra, rb) = (residual(a, ta), residual(b, tb));
    if ra.is_empty() || rb.is_empty() {
        // overlap is 1 up to rounding
        let k = draw(&common, overlap, rng);
        return Some((k, k));
    }
    let (sa, sb) = (ra.values().sum(), rb.values().sum());
    Some((draw(&ra, sa, rng), draw(&rb, sb, rng)))
}

/// Optimal coupling of `p` and `q` pushed onto boxes of side `side`.
pub fn tv_box_coupling(p: &SparseLatticeDist, q: &SparseLatticeDist, side: u32) -> Result<BoxCoupling> {
    if p.time != q.time {
        return Err(Error::TimeMismatch {
            left: p.time,
            right: q.time,
        });
    }
    if p.dim != q.dim {
        return Err(Error::Precondition(format!("dimensions {} and {} differ", p.dim, q.dim)));
    }
    let part = BoxPartition::new(side);
    Ok(BoxCoupling::from_masses(p.dim, side, box_masses(p, Some(&part)), box_masses(q, Some(&part))))
}

/// Per-site check of `Θ(x,x) ≥ Θ̃(Δ_x,Δ_x)·η^{2dM}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagonalCheck {
    pub diagonal: f64,
    pub bound: f64,
}

/// Point-level refinement of a box coupling of time-`(n−dM)` annealed and
/// quenched laws.
#[derive(Clone, Debug)]
pub struct PointCoupling {
    pub dim: usize,
    pub time: usize,
    /// Materialized joint law when the pair count fits the budget.
    pub joint: Option<BTreeMap<(Site, Site), f64>>,
    pub pair_count: u128,
    pub diagonal_mass: f64,
    pub left_marginal: BTreeMap<Site, f64>,
    pub right_marginal: BTreeMap<Site, f64>,
    /// `L1` gaps between the marginals and the time-`n` annealed and quenched laws.
    pub left_error: f64,
    pub right_error: f64,
    pub checks: BTreeMap<Site, DiagonalCheck>,
    pub pruned: f64,
}

impl PointCoupling {
    pub fn violations(&self) -> Vec<Site> {
        self.checks
            .iter()
            .filter(|(_, c)| c.diagonal < c.bound)
            .map(|(x, _)| *x)
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let joint = self
            .joint
            .as_ref()
            .ok_or_else(|| Error::Precondition("point coupling was not materialized".into()))?;
        write_triples(w, self.dim, joint.iter().map(|((a, b), v)| (*a, *b, *v)))
    }
}

type Conditionals = BTreeMap<Site, BTreeMap<Site, f64>>;

fn normalize_rows(num: &Conditionals) -> Conditionals {
    num.iter()
        .map(|(k, row)| {
            let t: f64 = row.values().sum();
            (*k, row.iter().map(|(x, v)| (*x, v / t)).collect())
        })
        .filter(|(_, row): &(Site, BTreeMap<Site, f64>)| !row.is_empty())
        .collect()
}

/// Splits `dist` by boxes and evolves each part `steps` steps.
fn box_conditionals<E: SiteLaws + ?Sized>(
    env: &E,
    dist: &SparseLatticeDist,
    part: &BoxPartition,
    steps: usize,
    cfg: &DpConfig,
) -> Result<(Conditionals, f64)> {
    let mut pieces: BTreeMap<Site, Vec<(Site, f64)>> = BTreeMap::new();
    for (x, v) in &dist.mass {
        pieces.entry(part.box_of(x)).or_default().push((*x, *v));
    }
    let mut out = BTreeMap::new();
    let mut pruned = 0.0;
    for (k, masses) in pieces {
        let piece = SparseLatticeDist::from_masses(dist.dim, dist.start, dist.time, masses);
        let later = evolve_forward(env, &piece, steps, cfg)?;
        pruned += later.pruned;
        out.insert(k, later.mass);
    }
    Ok((out, pruned))
}

/// Refines `boxes` (built from the time-`(n−dM)` laws of the annealed
/// ensemble and of `env`) to a coupling of the time-`n` laws:
/// `Θ(x,y) = Σ Θ̃(Δ,Δ')·ℙ(X_n = x | X_{n−dM} ∈ Δ)·P_ω(X_n = y | X_{n−dM} ∈ Δ')`.
pub fn refine_point_coupling(
    boxes: &BoxCoupling,
    env: &Environment,
    ensemble: &EnvironmentEnsemble,
    n: usize,
    cfg: &DpConfig,
    max_pairs: usize,
) -> Result<PointCoupling> {
    let dim = env.dim();
    let m = boxes.side as usize;
    let lag = dim * m;
    if n < lag {
        return Err(Error::Precondition(format!("n = {n} is below dM = {lag}")));
    }
    let part = BoxPartition::new(boxes.side);
    let early = n - lag;

    // annealed: tag 0 keeps box masses at n−dM, tag 1 the joint (box, X_n)
    let avg = ReplicaAverage::<(u8, Site, Site)>::build(ensemble.count, |i| {
        let e = ensemble.environment(i);
        let d = quenched_distribution(&e, Site::origin(), early, cfg)?;
        let (cond, lost) = box_conditionals(&e, &d, &part, lag, cfg)?;
        let mut map = BTreeMap::new();
        for (k, v) in box_masses(&d, Some(&part)) {
            map.insert((0u8, k, Site::origin()), v);
        }
        for (k, row) in cond {
            for (x, v) in row {
                map.insert((1u8, k, x), v);
            }
        }
        Ok((map, d.pruned + lost))
    })?;
    let mean = avg.mean();
    let mut ann_boxes = BTreeMap::new();
    let mut ann_num: Conditionals = BTreeMap::new();
    for ((t, k, x), v) in &mean {
        if *t == 0 {
            ann_boxes.insert(*k, *v);
        } else {
            ann_num.entry(*k).or_default().insert(*x, *v);
        }
    }
    let q_early = quenched_distribution(env, Site::origin(), early, cfg)?;
    let (q_num, q_lost) = box_conditionals(env, &q_early, &part, lag, cfg)?;
    let q_boxes = box_masses(&q_early, Some(&part));

    let gap = |a: &BTreeMap<Site, f64>, b: &BTreeMap<Site, f64>| crate::estimators::l1_maps(a, b);
    if gap(&ann_boxes, &boxes.left) > 1e-9 || gap(&q_boxes, &boxes.right) > 1e-9 {
        return Err(Error::Precondition(
            "box coupling was not built from the time-(n - dM) annealed and quenched laws".into(),
        ));
    }
    let a_cond = normalize_rows(&ann_num);
    let q_cond = normalize_rows(&q_num);
    let empty = BTreeMap::new();
    let a_of = |k: &Site| a_cond.get(k).unwrap_or(&empty);
    let q_of = |k: &Site| q_cond.get(k).unwrap_or(&empty);

    let mut left_marginal: BTreeMap<Site, f64> = BTreeMap::new();
    let mut right_marginal: BTreeMap<Site, f64> = BTreeMap::new();
    let mut pair_count: u128 = 0;
    for (a, b, v) in boxes.triples() {
        let (ra, rb) = (a_of(&a), q_of(&b));
        pair_count += (ra.len() * rb.len()) as u128;
        for (x, p) in ra {
            *left_marginal.entry(*x).or_insert(0.0) += v * p;
        }
        for (y, p) in rb {
            *right_marginal.entry(*y).or_insert(0.0) += v * p;
        }
    }

    // Θ(x,x): diagonal boxes directly, off-diagonal boxes through the product form
    let mut diag: BTreeMap<Site, f64> = BTreeMap::new();
    for (k, w) in &boxes.diagonal {
        let rq = q_of(k);
        for (x, p) in a_of(k) {
            if let Some(q) = rq.get(x) {
                *diag.entry(*x).or_insert(0.0) += w * p * q;
            }
        }
    }
    if boxes.residual_norm > 0.0 {
        let mut lsum: BTreeMap<Site, f64> = BTreeMap::new();
        let mut rsum: BTreeMap<Site, f64> = BTreeMap::new();
        for (k, r) in &boxes.left_residual {
            for (x, p) in a_of(k) {
                *lsum.entry(*x).or_insert(0.0) += r * p;
            }
        }
        for (k, r) in &boxes.right_residual {
            for (y, p) in q_of(k) {
                *rsum.entry(*y).or_insert(0.0) += r * p;
            }
        }
        for (x, l) in lsum {
            if let Some(r) = rsum.get(&x) {
                *diag.entry(x).or_insert(0.0) += l * r / boxes.residual_norm;
            }
        }
    }

    let joint = if pair_count <= max_pairs as u128 {
        let mut j: BTreeMap<(Site, Site), f64> = BTreeMap::new();
        for (a, b, v) in boxes.triples() {
            for (x, p) in a_of(&a) {
                for (y, q) in q_of(&b) {
                    *j.entry((*x, *y)).or_insert(0.0) += v * p * q;
                }
            }
        }
        left_marginal.clear();
        right_marginal.clear();
        for ((x, y), v) in &j {
            *left_marginal.entry(*x).or_insert(0.0) += v;
            *right_marginal.entry(*y).or_insert(0.0) += v;
        }
        Some(j)
    } else {
        None
    };

    let eta = env.spec().eta;
    let factor = eta.powi(2 * lag as i32);
    let mut checks = BTreeMap::new();
    for (k, w) in &boxes.diagonal {
        for x in part.cell(dim, k).sites() {
            if !same_parity(&x, &Site::origin(), n) {
                continue;
            }
            // every site of the box reaches x in exactly dM steps, so x is supported
            checks.insert(
                x,
                DiagonalCheck {
                    diagonal: diag.get(&x).copied().unwrap_or(0.0),
                    bound: w * factor,
                },
            );
        }
    }

    let ann_n: BTreeMap<Site, f64> = {
        let mut m = BTreeMap::new();
        for row in ann_num.values() {
            for (x, v) in row {
                *m.entry(*x).or_insert(0.0) += v;
            }
        }
        m
    };
    let q_n = evolve_forward(env, &q_early, lag, cfg)?;
    Ok(PointCoupling {
        dim,
        time: n,
        joint,
        pair_count,
        diagonal_mass: diag.values().sum(),
        left_error: gap(&left_marginal, &ann_n),
        right_error: gap(&right_marginal, &q_n.mass),
        left_marginal,
        right_marginal,
        checks,
        pruned: avg.pruned + q_early.pruned + q_lost,
    })
}

/// Box coupling of the time-`(n−dM)` annealed (from `count` environments)
/// and quenched laws, refined to the points at time `n`.
pub fn point_coupling(
    spec: &EnvironmentSpec,
    seed: u128,
    n: usize,
    side: u32,
    count: usize,
    cfg: &DpConfig,
    max_pairs: usize,
) -> Result<(BoxCoupling, PointCoupling)> {
    let lag = spec.dim * side as usize;
    if n < lag {
        return Err(Error::Precondition(format!("n = {n} is below dM = {lag}")));
    }
    let env = quenched_environment(spec, seed)?;
    let ensemble = EnvironmentEnsemble::new(spec.clone(), seed, count)?;
    let ann = crate::estimators::annealed_distribution(spec, seed, Site::origin(), n - lag, count, cfg)?;
    let q = quenched_distribution(&env, Site::origin(), n - lag, cfg)?;
    let boxes = tv_box_coupling(&ann.dist(), &q, side)?;
    let point = refine_point_coupling(&boxes, &env, &ensemble, n, cfg, max_pairs)?;
    Ok((boxes, point))
}

/// Outcome of one coupled pair of quenched walkers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairWalk {
    /// First round after which the walkers coincide.
    pub merge_round: Option<usize>,
    /// `merged[k]`: coincidence after round `k` (round 0 is the start).
    pub merged: Vec<bool>,
    pub round_length: usize,
    pub final_left: Vec<i32>,
    pub final_right: Vec<i32>,
}

/// Parameters of the round scheme.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeScheme {
    pub n: usize,
    pub theta: f64,
    pub side: u32,
    pub rounds: usize,
}

impl MergeScheme {
    /// Round length `max(⌈n^θ⌉, dM)`.
    pub fn round_length(&self, dim: usize) -> usize {
        ((self.n as f64).powf(self.theta).ceil() as usize).max(dim * self.side as usize)
    }

    /// `θ′ = (θ + (d+1)θ/2)/2`.
    pub fn theta_prime(&self, dim: usize) -> f64 {
        (self.theta + (dim as f64 + 1.0) * self.theta / 2.0) / 2.0
    }

    /// Pairs closer than this in `L1` are box-coupled for the next round.
    pub fn coupling_radius(&self, dim: usize) -> f64 {
        (self.n as f64).powf(self.theta_prime(dim))
    }

    fn validate(&self) -> Result<()> {
        if self.side < 2 {
            return Err(Error::Precondition(format!("box side M must be at least 2, got {}", self.side)));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) || self.n == 0 {
            return Err(Error::Precondition("need n >= 1 and theta in (0, 1)".into()));
        }
        Ok(())
    }
}

fn sub(a: &Site, b: &Site) -> i64 {
    let mut t = 0;
    for i in 0..crate::lattice::MAX_DIM {
        t += (a.coord(i) as i64 - b.coord(i) as i64).abs();
    }
    t
}

/// Runs two quenched walkers from `x` and `y` for `rounds` rounds of length
/// `h`. Merged walkers move together; walkers within the coupling radius
/// draw their round endpoints from the box coupling of their time-`(h−dM)`
/// laws followed by a maximal coupling of the two box-conditional endpoint
/// laws; the rest move independently.
pub fn coupled_pair_walk<E: SiteLaws + ?Sized, R: Rng>(
    env: &E,
    x: Site,
    y: Site,
    scheme: &MergeScheme,
    cfg: &DpConfig,
    rng: &mut R,
) -> Result<PairWalk> {
    scheme.validate()?;
    let dim = env.dim();
    if (sub(&x, &y)) % 2 != 0 {
        return Err(Error::Precondition(format!("{x:?} and {y:?} have different parity")));
    }
    let h = scheme.round_length(dim);
    let lag = dim * scheme.side as usize;
    let radius = scheme.coupling_radius(dim);
    let part = BoxPartition::new(scheme.side);
    let (mut a, mut b) = (x, y);
    let mut merged = vec![a == b];
    for _ in 0..scheme.rounds {
        if a == b {
            a = simulate_walk(env, a, h, rng).end();
            b = a;
        } else if sub(&a, &b) as f64 <= radius {
            let pa = quenched_distribution(env, a, h - lag, cfg)?;
            let pb = quenched_distribution(env, b, h - lag, cfg)?;
            let boxes = tv_box_coupling(&pa, &pb, scheme.side)?;
            let (da, db) = boxes.sample(rng);
            let (ca, _) = box_conditionals(env, &pa, &part, lag, cfg)?;
            let (cb, _) = box_conditionals(env, &pb, &part, lag, cfg)?;
            let (na, nb) = sample_maximal(&ca[&da], &cb[&db], rng).expect("conditionals carry mass");
            a = na;
            b = nb;
        } else {
            a = simulate_walk(env, a, h, rng).end();
            b = simulate_walk(env, b, h, rng).end();
        }
        merged.push(a == b);
    }
    Ok(PairWalk {
        merge_round: merged.iter().position(|m| *m),
        merged,
        round_length: h,
        final_left: a.coords(dim).to_vec(),
        final_right: b.coords(dim).to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeRound {
    pub round: usize,
    pub frequency: f64,
    pub std_error: f64,
    /// `1 − (1 − η^{2dM}/2)^k`.
    pub bound: f64,
    pub bound_met: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeEnsemble {
    pub pairs: usize,
    pub round_length: usize,
    pub coupling_radius: f64,
    pub rounds: Vec<MergeRound>,
    pub nondecreasing: bool,
}

/// Merge frequencies over `pairs` coupled pairs, each in a fresh environment.
pub fn pair_merge_ensemble(
    spec: &EnvironmentSpec,
    seed: u128,
    x: Site,
    y: Site,
    scheme: &MergeScheme,
    pairs: usize,
    cfg: &DpConfig,
) -> Result<MergeEnsemble> {
    scheme.validate()?;
    if pairs == 0 {
        return Err(Error::Precondition("need at least one pair".into()));
    }
    let walks: Vec<Result<PairWalk>> = (0..pairs)
        .into_par_iter()
        .map(|i| {
            let env = Environment::new(spec.clone(), derive_seed(seed, "pair-env", i as u64))?;
            let mut rng = stream(seed, "pair-walk", i as u64);
            coupled_pair_walk(&env, x, y, scheme, cfg, &mut rng)
        })
        .collect();
    let walks: Vec<PairWalk> = walks.into_iter().collect::<Result<_>>()?;
    let dim = spec.dim;
    let step = 0.5 * spec.eta.powi(2 * (dim * scheme.side as usize) as i32);
    let mut rounds = Vec::new();
    for k in 0..=scheme.rounds {
        let hits = walks.iter().filter(|w| w.merged[k]).count();
        let f = hits as f64 / pairs as f64;
        let se = (f * (1.0 - f) / pairs as f64).sqrt();
        let bound = 1.0 - (1.0 - step).powi(k as i32);
        rounds.push(MergeRound {
            round: k,
            frequency: f,
            std_error: se,
            bound,
            bound_met: f + 3.0 * se >= bound,
        });
    }
    let nondecreasing = walks.iter().all(|w| w.merged.windows(2).all(|p| !p[0] || p[1]));
    Ok(MergeEnsemble {
        pairs,
        round_length: scheme.round_length(dim),
        coupling_radius: scheme.coupling_radius(dim),
        rounds,
        nondecreasing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::l1_partition_distance;

    fn two_box(a: f64, b: f64) -> SparseLatticeDist {
        SparseLatticeDist::from_masses(1, Site::origin(), 0, [(Site::new(&[0]), a), (Site::new(&[2]), b)])
    }

    #[test]
    fn box_coupling_examples() {
        let c = tv_box_coupling(&two_box(0.6, 0.4), &two_box(0.4, 0.6), 2).unwrap();
        assert!((c.diagonal_mass - 0.8).abs() < 1e-15);
        assert!(c.marginal_error() < 1e-15);
        let c = tv_box_coupling(&two_box(1.0, 0.0), &two_box(0.0, 1.0), 2).unwrap();
        assert_eq!(c.diagonal_mass, 0.0);
        assert_eq!(c.mass(&Site::new(&[0]), &Site::new(&[1])), 1.0);
        let p = two_box(0.3, 0.7);
        let c = tv_box_coupling(&p, &p, 2).unwrap();
        assert!((c.diagonal_mass - 1.0).abs() < 1e-15);
        assert_eq!(c.pair_count(), 2);
        let mut late = p.clone();
        late.time = 1;
        assert!(matches!(tv_box_coupling(&p, &late, 2), Err(Error::TimeMismatch { .. })));
    }

    #[test]
    fn box_coupling_is_optimal_on_random_laws() {
        let spec = EnvironmentSpec::elliptic_dirichlet(vec![1.0; 4], 0.05);
        for i in 0..20 {
            let e1 = Environment::new(spec.clone(), 2 * i).unwrap();
            let e2 = Environment::new(spec.clone(), 2 * i + 1).unwrap();
            let p = quenched_distribution(&e1, Site::origin(), 8, &DpConfig::default()).unwrap();
            let q = quenched_distribution(&e2, Site::origin(), 8, &DpConfig::default()).unwrap();
            let side = 1 + (i as u32 % 4);
            let c = tv_box_coupling(&p, &q, side).unwrap();
            let l1 = l1_partition_distance(&p, &q, Some(&BoxPartition::new(side))).unwrap();
            assert!((c.diagonal_mass - (1.0 - 0.5 * l1)).abs() < 1e-12);
            assert!(c.marginal_error() < 1e-12);
        }
    }

    #[test]
    fn point_coupling_homogeneous() {
        let spec = EnvironmentSpec::drifted_1d(0.6);
        let (boxes, point) = point_coupling(&spec, 1, 8, 2, 3, &DpConfig::default(), 1_000_000).unwrap();
        assert!((boxes.diagonal_mass - 1.0).abs() < 1e-12);
        assert!(point.left_error < 1e-12 && point.right_error < 1e-12);
        assert!(point.violations().is_empty());
        assert!(!point.checks.is_empty());
        let joint = point.joint.as_ref().unwrap();
        assert!(joint.values().all(|v| *v >= 0.0));
        assert!(point.diagonal_mass >= spec.eta.powi(4));
    }

    #[test]
    fn point_coupling_disordered_bound() {
        let spec = EnvironmentSpec::elliptic_dirichlet(vec![1.0; 4], 0.05);
        let (_, point) = point_coupling(&spec, 7, 12, 2, 20, &DpConfig::default(), 2_000_000).unwrap();
        assert!(point.left_error < 1e-10 && point.right_error < 1e-10, "{} {}", point.left_error, point.right_error);
        assert!(point.violations().is_empty());
        assert!(point.joint.is_some());
        let streamed = point_coupling(&spec, 7, 12, 2, 20, &DpConfig::default(), 0).unwrap().1;
        assert!(streamed.joint.is_none());
        assert!((streamed.diagonal_mass - point.diagonal_mass).abs() < 1e-12);
        assert!(streamed.left_error < 1e-10);
    }

    #[test]
    fn point_coupling_preconditions() {
        let spec = EnvironmentSpec::symmetric(2);
        assert!(point_coupling(&spec, 1, 3, 2, 2, &DpConfig::default(), 10).is_err());
        let env = quenched_environment(&spec, 1).unwrap();
        let ens = EnvironmentEnsemble::new(spec.clone(), 1, 2).unwrap();
        let wrong = tv_box_coupling(&two_box(1.0, 0.0), &two_box(1.0, 0.0), 2).unwrap();
        assert!(refine_point_coupling(&wrong, &env, &ens, 6, &DpConfig::default(), 10).is_err());
    }

    #[test]
    fn zero_diagonal_box_coupling_is_vacuous() {
        let p = SparseLatticeDist::from_masses(1, Site::origin(), 0, [(Site::new(&[0]), 1.0)]);
        let mut q = p.clone();
        q.mass = [(Site::new(&[4]), 1.0)].into_iter().collect();
        let boxes = tv_box_coupling(&p, &q, 2).unwrap();
        assert_eq!(boxes.diagonal_mass, 0.0);
        assert!(boxes.marginal_error() < 1e-15);
    }

    #[test]
    fn pair_walk_basics() {
        let spec = EnvironmentSpec::symmetric(1);
        let env = Environment::new(spec, 0).unwrap();
        let scheme = MergeScheme { n: 64, theta: 0.5, side: 2, rounds: 4 };
        let mut rng = stream(1, "t", 0);
        let w = coupled_pair_walk(&env, Site::new(&[3]), Site::new(&[3]), &scheme, &DpConfig::default(), &mut rng).unwrap();
        assert_eq!(w.merge_round, Some(0));
        assert!(w.merged.iter().all(|m| *m));
        assert!(coupled_pair_walk(&env, Site::origin(), Site::new(&[1]), &scheme, &DpConfig::default(), &mut rng).is_err());
        let bad = MergeScheme { side: 1, ..scheme };
        assert!(coupled_pair_walk(&env, Site::origin(), Site::origin(), &bad, &DpConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn merge_frequency_beats_the_recursion() {
        let spec = EnvironmentSpec::symmetric(1);
        let scheme = MergeScheme { n: 64, theta: 0.5, side: 2, rounds: 5 };
        let ens = pair_merge_ensemble(&spec, 11, Site::origin(), Site::new(&[2]), &scheme, 1000, &DpConfig::default()).unwrap();
        assert!(ens.nondecreasing);
        assert_eq!(ens.rounds[0].frequency, 0.0);
        for r in &ens.rounds[1..] {
            assert!(r.bound_met, "{r:?}");
        }
        for w in ens.rounds.windows(2) {
            assert!(w[1].frequency >= w[0].frequency);
        }
    }

    #[test]
    fn triples_csv() {
        let c = tv_box_coupling(&two_box(0.6, 0.4), &two_box(0.4, 0.6), 2).unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "left_1,right_1,mass");
        assert_eq!(text.lines().count(), 4);
    }
}
