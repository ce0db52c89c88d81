//! Lattice geometry on Z^d: sites, unit directions, axis-aligned boxes,
//! box partitions, drift-aligned parallelograms and the slowly growing
//! scale functions used to size them.

use std::fmt;
use std::ops::{Add, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported lattice dimension.
pub const MAX_DIM: usize = 8;

/// A point of Z^d. Coordinates beyond the working dimension are kept at zero,
/// so equality and ordering only ever see the meaningful prefix.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Site([i32; MAX_DIM]);

impl Site {
    pub fn origin() -> Self {
        Site([0; MAX_DIM])
    }

    /// Builds a site from its coordinates. Panics if more than `MAX_DIM` are given.
    pub fn new(coords: &[i32]) -> Self {
        assert!(coords.len() <= MAX_DIM, "at most {MAX_DIM} coordinates");
        let mut c = [0; MAX_DIM];
        c[..coords.len()].copy_from_slice(coords);
        Site(c)
    }

    pub fn unit(axis: usize, sign: i32) -> Self {
        let mut c = [0; MAX_DIM];
        c[axis] = sign;
        Site(c)
    }

    #[inline]
    pub fn coord(&self, axis: usize) -> i32 {
        self.0[axis]
    }

    #[inline]
    pub fn set(&mut self, axis: usize, value: i32) {
        self.0[axis] = value;
    }

    pub fn coords(&self, dim: usize) -> &[i32] {
        &self.0[..dim]
    }

    pub fn l1(&self) -> i64 {
        self.0.iter().map(|&c| (c as i64).abs()).sum()
    }

    pub fn linf(&self) -> i64 {
        self.0.iter().map(|&c| (c as i64).abs()).max().unwrap_or(0)
    }

    /// Sum of coordinates; its parity is the site's parity class.
    pub fn coord_sum(&self) -> i64 {
        self.0.iter().map(|&c| c as i64).sum()
    }

    pub fn step(&self, dir: Direction) -> Self {
        let mut s = *self;
        s.0[dir.axis] += dir.sign as i32;
        s
    }
}

impl Add for Site {
    type Output = Site;
    fn add(self, rhs: Site) -> Site {
        let mut c = self.0;
        for (a, b) in c.iter_mut().zip(rhs.0) {
            *a += b;
        }
        Site(c)
    }
}

impl Sub for Site {
    type Output = Site;
    fn sub(self, rhs: Site) -> Site {
        let mut c = self.0;
        for (a, b) in c.iter_mut().zip(rhs.0) {
            *a -= b;
        }
        Site(c)
    }
}

impl Neg for Site {
    type Output = Site;
    fn neg(self) -> Site {
        Site(self.0.map(|c| -c))
    }
}

impl fmt::Debug for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let last = self.0.iter().rposition(|&c| c != 0).map_or(1, |i| i + 1);
        write!(f, "{:?}", &self.0[..last])
    }
}

/// `x ↔ n`: the site can be reached from `from` in exactly `n` nearest-neighbour steps
/// as far as parity is concerned.
pub fn same_parity(x: &Site, from: &Site, n: usize) -> bool {
    (x.coord_sum() - from.coord_sum() - n as i64).rem_euclid(2) == 0
}

/// One of the 2d unit vectors ±e_i. `axis` is zero based.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct Direction {
    pub axis: usize,
    pub sign: i8,
}

impl Direction {
    pub fn new(axis: usize, sign: i8) -> Self {
        debug_assert!(sign == 1 || sign == -1);
        Direction { axis, sign }
    }

    /// Law vectors are indexed `+e_1, -e_1, +e_2, -e_2, ...`.
    #[inline]
    pub fn index(&self) -> usize {
        2 * self.axis + usize::from(self.sign < 0)
    }

    pub fn from_index(i: usize) -> Self {
        Direction {
            axis: i / 2,
            sign: if i % 2 == 0 { 1 } else { -1 },
        }
    }

    pub fn all(dim: usize) -> impl Iterator<Item = Direction> {
        (0..2 * dim).map(Direction::from_index)
    }

    pub fn opposite(&self) -> Self {
        Direction {
            axis: self.axis,
            sign: -self.sign,
        }
    }

    pub fn as_site(&self) -> Site {
        Site::unit(self.axis, self.sign as i32)
    }

    /// `<x, ℓ>` for this coordinate direction.
    #[inline]
    pub fn project(&self, x: &Site) -> i64 {
        self.sign as i64 * x.coord(self.axis) as i64
    }
}

/// Axis-aligned box `lo..=hi` with a dense lexicographic index (first
/// coordinate most significant, matching `Site` ordering).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct GridBox {
    pub dim: usize,
    pub lo: Site,
    pub hi: Site,
}

impl GridBox {
    pub fn new(dim: usize, lo: Site, hi: Site) -> Self {
        GridBox { dim, lo, hi }
    }

    /// The L∞ ball of radius `r` around `center`.
    pub fn around(dim: usize, center: Site, r: i32) -> Self {
        let mut lo = center;
        let mut hi = center;
        for a in 0..dim {
            lo.set(a, center.coord(a) - r);
            hi.set(a, center.coord(a) + r);
        }
        GridBox { dim, lo, hi }
    }

    /// Smallest box containing every site of the iterator; `None` when it is empty.
    pub fn bounding<'a>(dim: usize, sites: impl IntoIterator<Item = &'a Site>) -> Option<Self> {
        let mut it = sites.into_iter();
        let first = *it.next()?;
        let mut b = GridBox::new(dim, first, first);
        for s in it {
            for a in 0..dim {
                b.lo.set(a, b.lo.coord(a).min(s.coord(a)));
                b.hi.set(a, b.hi.coord(a).max(s.coord(a)));
            }
        }
        Some(b)
    }

    pub fn dilate(&self, r: i32) -> Self {
        let mut b = *self;
        for a in 0..self.dim {
            b.lo.set(a, self.lo.coord(a) - r);
            b.hi.set(a, self.hi.coord(a) + r);
        }
        b
    }

    pub fn extent(&self, axis: usize) -> usize {
        (self.hi.coord(axis) - self.lo.coord(axis) + 1).max(0) as usize
    }

    /// Site count as u128 so oversized requests can be reported without overflow.
    pub fn volume(&self) -> u128 {
        (0..self.dim).map(|a| self.extent(a) as u128).product()
    }

    pub fn is_empty(&self) -> bool {
        (0..self.dim).any(|a| self.extent(a) == 0)
    }

    pub fn contains(&self, x: &Site) -> bool {
        (0..self.dim).all(|a| x.coord(a) >= self.lo.coord(a) && x.coord(a) <= self.hi.coord(a))
    }

    pub fn contains_box(&self, other: &GridBox) -> bool {
        self.contains(&other.lo) && self.contains(&other.hi)
    }

    /// Row-major strides, last axis fastest.
    pub fn strides(&self) -> [usize; MAX_DIM] {
        let mut s = [0usize; MAX_DIM];
        let mut acc = 1usize;
        for a in (0..self.dim).rev() {
            s[a] = acc;
            acc *= self.extent(a);
        }
        s
    }

    #[inline]
    pub fn index(&self, x: &Site) -> Option<usize> {
        if !self.contains(x) {
            return None;
        }
        let strides = self.strides();
        Some(
            (0..self.dim)
                .map(|a| (x.coord(a) - self.lo.coord(a)) as usize * strides[a])
                .sum(),
        )
    }

    pub fn site(&self, mut index: usize) -> Site {
        let mut s = self.lo;
        for a in (0..self.dim).rev() {
            let e = self.extent(a);
            s.set(a, self.lo.coord(a) + (index % e) as i32);
            index /= e;
        }
        s
    }

    /// All sites in index order.
    pub fn sites(&self) -> impl Iterator<Item = Site> + '_ {
        let n = if self.is_empty() { 0 } else { self.volume() as usize };
        (0..n).map(move |i| self.site(i))
    }

    pub fn intersect(&self, other: &GridBox) -> Option<GridBox> {
        let mut b = *self;
        for a in 0..self.dim {
            b.lo.set(a, self.lo.coord(a).max(other.lo.coord(a)));
            b.hi.set(a, self.hi.coord(a).min(other.hi.coord(a)));
        }
        (!b.is_empty()).then_some(b)
    }

    /// Errors when the box holds more than `budget` sites.
    pub fn check_budget(&self, what: &str, budget: usize) -> Result<()> {
        let v = self.volume();
        if v > budget as u128 {
            return Err(Error::Resource {
                what: what.to_string(),
                required: v,
                budget,
            });
        }
        Ok(())
    }
}

/// Partition of Z^d into cubes `Π_i [k_i M, (k_i + 1) M)`.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct BoxPartition {
    pub side: u32,
}

impl BoxPartition {
    pub fn new(side: u32) -> Self {
        assert!(side >= 1, "box side must be positive");
        BoxPartition { side }
    }

    pub fn box_of(&self, x: &Site) -> Site {
        let m = self.side as i32;
        let mut k = Site::origin();
        for a in 0..MAX_DIM {
            k.set(a, x.coord(a).div_euclid(m));
        }
        k
    }

    /// The cube with index `k` as a grid box (exactly `M^d` sites).
    pub fn cell(&self, dim: usize, k: &Site) -> GridBox {
        let m = self.side as i32;
        let mut lo = Site::origin();
        let mut hi = Site::origin();
        for a in 0..dim {
            lo.set(a, k.coord(a) * m);
            hi.set(a, k.coord(a) * m + m - 1);
        }
        GridBox::new(dim, lo, hi)
    }
}

/// `R_k(N)`: `⌊ln N⌋` for `k = 0`, otherwise `⌊exp((ln ln N)^{k+1})⌋`.
pub fn scale_r(k: u32, n: u64) -> Result<u64> {
    if n < 3 {
        return Err(Error::Domain(format!("scale_r needs N >= 3, got {n}")));
    }
    let ln = (n as f64).ln();
    let value = if k == 0 {
        ln.floor()
    } else {
        ln.ln().powi(k as i32 + 1).exp().floor()
    };
    if !value.is_finite() || value >= u64::MAX as f64 {
        return Err(Error::Domain(format!("scale_r({k}, {n}) is not representable")));
    }
    Ok(value as u64)
}

/// A set of interior sites for absorbing computations. Nearest-neighbour
/// walks leave the interior only through its outer vertex boundary.
pub trait Region: Sync {
    fn dim(&self) -> usize;
    fn is_interior(&self, x: &Site) -> bool;
    /// A box containing every interior site.
    fn interior_bounds(&self) -> GridBox;
}

/// Explicitly enumerated interior.
#[derive(Clone, Debug)]
pub struct FiniteRegion {
    dim: usize,
    interior: std::collections::BTreeSet<Site>,
}

impl FiniteRegion {
    pub fn new(dim: usize, interior: impl IntoIterator<Item = Site>) -> Self {
        FiniteRegion {
            dim,
            interior: interior.into_iter().collect(),
        }
    }
}

impl Region for FiniteRegion {
    fn dim(&self) -> usize {
        self.dim
    }
    fn is_interior(&self, x: &Site) -> bool {
        self.interior.contains(x)
    }
    fn interior_bounds(&self) -> GridBox {
        GridBox::bounding(self.dim, &self.interior)
            .unwrap_or_else(|| GridBox::new(self.dim, Site::origin(), Site::origin()))
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PointClass {
    MiddleThird,
    Interior,
    RightBoundary,
    Boundary,
    Exterior,
}

impl PointClass {
    pub fn is_interior(self) -> bool {
        matches!(self, PointClass::MiddleThird | PointClass::Interior)
    }
    pub fn is_boundary(self) -> bool {
        matches!(self, PointClass::RightBoundary | PointClass::Boundary)
    }
}

/// Drift-aligned parallelogram of depth `2N²` along `axis` and transverse
/// half-width `N·w` measured after shearing along the drift direction.
#[derive(Clone, Debug, PartialEq)]
pub struct ParallelogramGeom {
    pub dim: usize,
    pub center: Site,
    pub size: u32,
    pub axis: usize,
    pub drift: Vec<f64>,
    pub width: f64,
}

impl ParallelogramGeom {
    /// Geometry with drift along `axis` and the default width `R_5(N)`
    /// (1 when that scale is undefined or not representable).
    pub fn new(dim: usize, center: Site, size: u32) -> Result<Self> {
        let mut drift = vec![0.0; dim];
        drift[0] = 1.0;
        Self::with_drift(dim, center, size, 0, drift, Self::default_width(size))
    }

    pub fn default_width(size: u32) -> f64 {
        match scale_r(5, size as u64) {
            Ok(w) if w >= 1 && w <= i32::MAX as u64 => w as f64,
            _ => 1.0,
        }
    }

    pub fn with_drift(
        dim: usize,
        center: Site,
        size: u32,
        axis: usize,
        drift: Vec<f64>,
        width: f64,
    ) -> Result<Self> {
        if size < 2 {
            return Err(Error::Precondition(format!("parallelogram size must be >= 2, got {size}")));
        }
        if axis >= dim || drift.len() != dim {
            return Err(Error::Precondition("drift vector / axis do not match dimension".into()));
        }
        if !(drift[axis] > 0.0) {
            return Err(Error::Precondition("drift must have positive component along the axis".into()));
        }
        if !(width > 0.0) {
            return Err(Error::Precondition("width factor must be positive".into()));
        }
        Ok(ParallelogramGeom {
            dim,
            center,
            size,
            axis,
            drift,
            width,
        })
    }

    fn depth(&self) -> i64 {
        (self.size as i64).pow(2)
    }

    /// (longitudinal coordinate, sheared transverse ∞-norm) of `x - z`.
    fn coordinates(&self, x: &Site) -> (i64, f64) {
        let rel = *x - self.center;
        let long = rel.coord(self.axis) as i64;
        let ratio = long as f64 / self.drift[self.axis];
        let trans = (0..self.dim)
            .filter(|&a| a != self.axis)
            .map(|a| (rel.coord(a) as f64 - self.drift[a] * ratio).abs())
            .fold(0.0, f64::max);
        (long, trans)
    }

    pub fn contains(&self, x: &Site) -> bool {
        let (long, trans) = self.coordinates(x);
        long.abs() < self.depth() && trans < self.size as f64 * self.width
    }

    pub fn in_middle_third(&self, x: &Site) -> bool {
        let (long, trans) = self.coordinates(x);
        3 * long.abs() < self.depth() && 3.0 * trans < self.size as f64 * self.width
    }

    pub fn classify(&self, x: &Site) -> PointClass {
        if self.contains(x) {
            return if self.in_middle_third(x) {
                PointClass::MiddleThird
            } else {
                PointClass::Interior
            };
        }
        let adjacent = Direction::all(self.dim).any(|e| self.contains(&x.step(e)));
        if !adjacent {
            return PointClass::Exterior;
        }
        let long = (*x - self.center).coord(self.axis) as i64;
        if long == self.depth() {
            PointClass::RightBoundary
        } else {
            PointClass::Boundary
        }
    }

    /// Transverse half-extent of the interior along a non-axis coordinate.
    fn transverse_reach(&self, a: usize) -> i64 {
        let shear = (self.drift[a] / self.drift[self.axis]).abs() * self.depth() as f64;
        (self.size as f64 * self.width + shear).ceil() as i64
    }
}

impl Region for ParallelogramGeom {
    fn dim(&self) -> usize {
        self.dim
    }
    fn is_interior(&self, x: &Site) -> bool {
        self.contains(x)
    }
    fn interior_bounds(&self) -> GridBox {
        let mut lo = self.center;
        let mut hi = self.center;
        for a in 0..self.dim {
            let r = if a == self.axis {
                self.depth() - 1
            } else {
                self.transverse_reach(a)
            };
            let r = r.min(i32::MAX as i64 / 4) as i32;
            lo.set(a, self.center.coord(a) - r);
            hi.set(a, self.center.coord(a) + r);
        }
        GridBox::new(self.dim, lo, hi)
    }
}
