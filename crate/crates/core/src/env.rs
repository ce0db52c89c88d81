//! Single-site laws, environment specifications and lazily realized i.i.d.
//! environments.
//!
//! An [`Environment`] never stores sites. The law at `x` is recomputed from a
//! ChaCha8 block keyed by `(master seed, x + offset)`, so any site can be
//! re-queried bit-identically and shifts are free.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lattice::{Direction, GridBox, Site, MAX_DIM};
use crate::rng::{derive_seed, Seed};

pub const MAX_DIRS: usize = 2 * MAX_DIM;
const SUM_TOL: f64 = 1e-12;

/// Jump probabilities over the 2d directions, indexed by [`Direction::index`].
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct SiteLaw {
    len: usize,
    p: [f64; MAX_DIRS],
}

impl SiteLaw {
    pub fn from_slice(p: &[f64]) -> Self {
        assert!(p.len() <= MAX_DIRS && p.len() % 2 == 0);
        let mut arr = [0.0; MAX_DIRS];
        arr[..p.len()].copy_from_slice(p);
        SiteLaw { len: p.len(), p: arr }
    }

    pub fn uniform(dim: usize) -> Self {
        Self::from_slice(&vec![1.0 / (2 * dim) as f64; 2 * dim])
    }

    /// d = 1 law with `right` on +e_1.
    pub fn nearest_1d(right: f64) -> Self {
        Self::from_slice(&[right, 1.0 - right])
    }

    #[inline]
    pub fn probs(&self) -> &[f64] {
        &self.p[..self.len]
    }

    #[inline]
    pub fn prob(&self, dir: Direction) -> f64 {
        self.p[dir.index()]
    }

    pub fn min(&self) -> f64 {
        self.probs().iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Inverse-CDF sampling from a uniform `u ∈ [0,1)`.
    pub fn sample(&self, u: f64) -> Direction {
        let mut acc = 0.0;
        for (i, &p) in self.probs().iter().enumerate() {
            acc += p;
            if u < acc {
                return Direction::from_index(i);
            }
        }
        Direction::from_index(self.len - 1)
    }

    fn check(&self, dim: usize, eta: f64, name: &str) -> Result<()> {
        if self.len != 2 * dim {
            return Err(Error::InvalidSpec(format!(
                "{name} has {} entries, expected {}",
                self.len,
                2 * dim
            )));
        }
        let sum: f64 = self.probs().iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(Error::InvalidSpec(format!("{name} sums to {sum}, not 1")));
        }
        if self.min() < eta {
            return Err(Error::InvalidSpec(format!(
                "{name} has minimum entry {} below ellipticity {eta}",
                self.min()
            )));
        }
        Ok(())
    }
}

/// The single-site law ν, one of three representative families.
#[derive(Clone, PartialEq, Debug)]
pub enum Family {
    /// Every site carries the law `q`.
    Homogeneous { q: Vec<f64> },
    /// Law A with probability `p`, law B otherwise.
    TwoPoint {
        law_a: Vec<f64>,
        law_b: Vec<f64>,
        p: f64,
    },
    /// `ω(e) = η + (1 − 2dη)·D_e` with `D ~ Dirichlet(alpha)`.
    EllipticDirichlet { alpha: Vec<f64> },
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Homogeneous { .. } => "homogeneous",
            Family::TwoPoint { .. } => "two-point",
            Family::EllipticDirichlet { .. } => "elliptic-dirichlet",
        }
    }
}

#[derive(Clone, PartialEq, Debug)]
pub struct EnvironmentSpec {
    pub dim: usize,
    pub family: Family,
    pub eta: f64,
}

/// On-disk form: `{dim, family, params, eta, seed}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentDoc {
    pub dim: usize,
    pub family: String,
    pub params: serde_json::Value,
    pub eta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<Seed>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HomogeneousParams {
    q: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TwoPointParams {
    law_a: Vec<f64>,
    law_b: Vec<f64>,
    p: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DirichletParams {
    alpha: Vec<f64>,
}

impl EnvironmentSpec {
    pub fn homogeneous(q: Vec<f64>, eta: f64) -> Self {
        EnvironmentSpec {
            dim: q.len() / 2,
            family: Family::Homogeneous { q },
            eta,
        }
    }

    /// Simple symmetric walk on Z^d (η = 1/(2d)).
    pub fn symmetric(dim: usize) -> Self {
        let p = 1.0 / (2 * dim) as f64;
        Self::homogeneous(vec![p; 2 * dim], p)
    }

    /// d = 1 homogeneous walk stepping right with probability `right`.
    pub fn drifted_1d(right: f64) -> Self {
        Self::homogeneous(vec![right, 1.0 - right], right.min(1.0 - right))
    }

    pub fn two_point(law_a: Vec<f64>, law_b: Vec<f64>, p: f64, eta: f64) -> Self {
        EnvironmentSpec {
            dim: law_a.len() / 2,
            family: Family::TwoPoint { law_a, law_b, p },
            eta,
        }
    }

    pub fn elliptic_dirichlet(alpha: Vec<f64>, eta: f64) -> Self {
        EnvironmentSpec {
            dim: alpha.len() / 2,
            family: Family::EllipticDirichlet { alpha },
            eta,
        }
    }

    pub fn is_homogeneous(&self) -> bool {
        matches!(self.family, Family::Homogeneous { .. })
    }

    /// Checks analytically that every law the family can emit is a
    /// probability vector with all entries at least η.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim;
        if d == 0 || d > MAX_DIM {
            return Err(Error::InvalidSpec(format!("dim must be in 1..={MAX_DIM}, got {d}")));
        }
        let bound = 1.0 / (2 * d) as f64;
        if !(self.eta > 0.0 && self.eta <= bound + 1e-15) {
            return Err(Error::InvalidSpec(format!(
                "eta must lie in (0, 1/(2d)] = (0, {bound}], got {}",
                self.eta
            )));
        }
        match &self.family {
            Family::Homogeneous { q } => SiteLaw::checked(q, d, "q")?.check(d, self.eta, "q"),
            Family::TwoPoint { law_a, law_b, p } => {
                if !(0.0..=1.0).contains(p) {
                    return Err(Error::InvalidSpec(format!("p must lie in [0,1], got {p}")));
                }
                if *p > 0.0 {
                    SiteLaw::checked(law_a, d, "law_a")?.check(d, self.eta, "law_a")?;
                }
                if *p < 1.0 {
                    SiteLaw::checked(law_b, d, "law_b")?.check(d, self.eta, "law_b")?;
                }
                Ok(())
            }
            Family::EllipticDirichlet { alpha } => {
                if alpha.len() != 2 * d {
                    return Err(Error::InvalidSpec(format!(
                        "alpha has {} entries, expected {}",
                        alpha.len(),
                        2 * d
                    )));
                }
                if let Some(a) = alpha.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
                    return Err(Error::InvalidSpec(format!("alpha entries must be positive, got {a}")));
                }
                Ok(())
            }
        }
    }

    pub fn to_doc(&self, seed: Option<Seed>) -> EnvironmentDoc {
        let params = match &self.family {
            Family::Homogeneous { q } => serde_json::to_value(HomogeneousParams { q: q.clone() }),
            Family::TwoPoint { law_a, law_b, p } => serde_json::to_value(TwoPointParams {
                law_a: law_a.clone(),
                law_b: law_b.clone(),
                p: *p,
            }),
            Family::EllipticDirichlet { alpha } => {
                serde_json::to_value(DirichletParams { alpha: alpha.clone() })
            }
        }
        .expect("params serialize");
        EnvironmentDoc {
            dim: self.dim,
            family: self.family.name().to_string(),
            params,
            eta: self.eta,
            seed,
        }
    }

    pub fn from_doc(doc: &EnvironmentDoc) -> Result<Self> {
        let bad = |e: serde_json::Error| Error::InvalidSpec(format!("params for {}: {e}", doc.family));
        let family = match doc.family.as_str() {
            "homogeneous" => {
                let p: HomogeneousParams = serde_json::from_value(doc.params.clone()).map_err(bad)?;
                Family::Homogeneous { q: p.q }
            }
            "two-point" => {
                let p: TwoPointParams = serde_json::from_value(doc.params.clone()).map_err(bad)?;
                Family::TwoPoint {
                    law_a: p.law_a,
                    law_b: p.law_b,
                    p: p.p,
                }
            }
            "elliptic-dirichlet" => {
                let p: DirichletParams = serde_json::from_value(doc.params.clone()).map_err(bad)?;
                Family::EllipticDirichlet { alpha: p.alpha }
            }
            other => return Err(Error::InvalidSpec(format!("unknown family {other:?}"))),
        };
        Ok(EnvironmentSpec {
            dim: doc.dim,
            family,
            eta: doc.eta,
        })
    }

    /// Short stable fingerprint of the spec (seed excluded).
    pub fn hash_hex(&self) -> String {
        let text = serde_json::to_string(&self.to_doc(None)).expect("doc serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl SiteLaw {
    fn checked(p: &[f64], dim: usize, name: &str) -> Result<Self> {
        if p.len() != 2 * dim {
            return Err(Error::InvalidSpec(format!(
                "{name} has {} entries, expected {}",
                p.len(),
                2 * dim
            )));
        }
        Ok(SiteLaw::from_slice(p))
    }
}

/// Anything that assigns a jump law to every site.
pub trait SiteLaws: Sync {
    fn dim(&self) -> usize;
    fn law(&self, x: &Site) -> SiteLaw;
}

#[derive(Debug)]
enum Sampler {
    Constant(SiteLaw),
    TwoPoint { a: SiteLaw, b: SiteLaw, p: f64 },
    Dirichlet { gammas: Vec<Gamma<f64>>, eta: f64 },
}

/// A lazily realized i.i.d. environment ω, optionally shifted (σ_x ω).
#[derive(Clone, Debug)]
pub struct Environment {
    spec: Arc<EnvironmentSpec>,
    sampler: Arc<Sampler>,
    seed: u128,
    offset: Site,
}

impl Environment {
    pub fn new(spec: EnvironmentSpec, seed: u128) -> Result<Self> {
        spec.validate()?;
        let sampler = match &spec.family {
            Family::Homogeneous { q } => Sampler::Constant(SiteLaw::from_slice(q)),
            Family::TwoPoint { law_a, law_b, p } => Sampler::TwoPoint {
                a: SiteLaw::from_slice(law_a),
                b: SiteLaw::from_slice(law_b),
                p: *p,
            },
            Family::EllipticDirichlet { alpha } => Sampler::Dirichlet {
                gammas: alpha
                    .iter()
                    .map(|&a| Gamma::new(a, 1.0).map_err(|e| Error::InvalidSpec(e.to_string())))
                    .collect::<Result<_>>()?,
                eta: spec.eta,
            },
        };
        Ok(Environment {
            spec: Arc::new(spec),
            sampler: Arc::new(sampler),
            seed,
            offset: Site::origin(),
        })
    }

    pub fn spec(&self) -> &EnvironmentSpec {
        &self.spec
    }

    pub fn seed(&self) -> u128 {
        self.seed
    }

    pub fn offset(&self) -> Site {
        self.offset
    }

    /// Another realization of the same family, unshifted.
    pub fn reseeded(&self, seed: u128) -> Self {
        Environment {
            seed,
            offset: Site::origin(),
            ..self.clone()
        }
    }

    /// σ_x ω: querying `y` on the result equals querying `x + y` here.
    pub fn shifted(&self, x: Site) -> Self {
        Environment {
            offset: self.offset + x,
            ..self.clone()
        }
    }

    fn site_rng(&self, y: &Site) -> ChaCha8Rng {
        let d = self.spec.dim;
        let mut key = [0u8; 32];
        key[..16].copy_from_slice(&self.seed.to_le_bytes());
        if d <= 4 {
            for (i, c) in y.coords(d).iter().enumerate() {
                key[16 + 4 * i..20 + 4 * i].copy_from_slice(&c.to_le_bytes());
            }
        } else {
            let mut h = Sha256::new();
            for c in y.coords(d) {
                h.update(c.to_le_bytes());
            }
            key[16..].copy_from_slice(&h.finalize()[..16]);
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(0x656e_7669_726f_6e);
        rng
    }

    pub fn site_law(&self, x: &Site) -> SiteLaw {
        let y = *x + self.offset;
        match &*self.sampler {
            Sampler::Constant(law) => *law,
            Sampler::TwoPoint { a, b, p } => {
                let u: f64 = self.site_rng(&y).random();
                if u < *p {
                    *a
                } else {
                    *b
                }
            }
            Sampler::Dirichlet { gammas, eta } => {
                let mut rng = self.site_rng(&y);
                let mut g = [0.0; MAX_DIRS];
                let n = gammas.len();
                for (slot, gamma) in g.iter_mut().zip(gammas) {
                    *slot = gamma.sample(&mut rng);
                }
                let total: f64 = g[..n].iter().sum();
                let scale = 1.0 - n as f64 * eta;
                let mut p = [0.0; MAX_DIRS];
                for i in 0..n {
                    let share = if total > 0.0 { g[i] / total } else { 1.0 / n as f64 };
                    p[i] = eta + scale * share;
                }
                SiteLaw { len: n, p }
            }
        }
    }
}

impl SiteLaws for Environment {
    fn dim(&self) -> usize {
        self.spec.dim
    }
    fn law(&self, x: &Site) -> SiteLaw {
        self.site_law(x)
    }
}

/// Environment given by an explicit table, with a default law elsewhere.
#[derive(Clone, Debug)]
pub struct TabulatedEnv {
    dim: usize,
    default: SiteLaw,
    table: BTreeMap<Site, SiteLaw>,
}

impl TabulatedEnv {
    pub fn new(dim: usize, default: SiteLaw) -> Self {
        TabulatedEnv {
            dim,
            default,
            table: BTreeMap::new(),
        }
    }

    pub fn with(mut self, x: Site, law: SiteLaw) -> Self {
        self.table.insert(x, law);
        self
    }
}

impl SiteLaws for TabulatedEnv {
    fn dim(&self) -> usize {
        self.dim
    }
    fn law(&self, x: &Site) -> SiteLaw {
        self.table.get(x).copied().unwrap_or(self.default)
    }
}

/// Fresh i.i.d. environments for annealed averages: replica `i` uses the
/// seed derived from `(seed, "annealed-env", i)`.
#[derive(Clone, Debug)]
pub struct EnvironmentEnsemble {
    pub spec: EnvironmentSpec,
    pub seed: u128,
    pub count: usize,
}

impl EnvironmentEnsemble {
    pub fn new(spec: EnvironmentSpec, seed: u128, count: usize) -> Result<Self> {
        spec.validate()?;
        if count == 0 {
            return Err(Error::Precondition("ensemble needs at least one environment".into()));
        }
        Ok(EnvironmentEnsemble { spec, seed, count })
    }

    pub fn environment(&self, i: usize) -> Environment {
        Environment::new(self.spec.clone(), derive_seed(self.seed, "annealed-env", i as u64))
            .expect("spec validated at construction")
    }
}

/// Laws materialized on a box, for inner loops that revisit sites.
pub struct LawGrid {
    pub grid: GridBox,
    ndirs: usize,
    data: Vec<f64>,
}

impl LawGrid {
    pub fn build<E: SiteLaws + ?Sized>(env: &E, grid: GridBox) -> Self {
        let ndirs = 2 * env.dim();
        let n = grid.volume() as usize;
        let mut data = vec![0.0; n * ndirs];
        data.par_chunks_mut(ndirs * 1024)
            .enumerate()
            .for_each(|(chunk, out)| {
                for (j, slot) in out.chunks_mut(ndirs).enumerate() {
                    let law = env.law(&grid.site(chunk * 1024 + j));
                    slot.copy_from_slice(law.probs());
                }
            });
        LawGrid { grid, ndirs, data }
    }

    #[inline]
    pub fn at(&self, index: usize) -> &[f64] {
        &self.data[index * self.ndirs..(index + 1) * self.ndirs]
    }
}
