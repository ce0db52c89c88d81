use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{same_parity, GridBox, Site};

pub const SCHEMA_VERSION: u32 = 1;

/// Finitely supported (sub-)probability mass function on Z^d at a fixed
/// time, with the mass discarded by pruning tracked alongside.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseLatticeDist {
    pub dim: usize,
    pub start: Site,
    pub time: usize,
    pub mass: BTreeMap<Site, f64>,
    pub pruned: f64,
}

impl SparseLatticeDist {
    pub fn point(dim: usize, start: Site) -> Self {
        SparseLatticeDist {
            dim,
            start,
            time: 0,
            mass: BTreeMap::from([(start, 1.0)]),
            pruned: 0.0,
        }
    }

    pub fn from_masses(dim: usize, start: Site, time: usize, mass: impl IntoIterator<Item = (Site, f64)>) -> Self {
        let mut m = BTreeMap::new();
        for (x, v) in mass {
            if v != 0.0 {
                *m.entry(x).or_insert(0.0) += v;
            }
        }
        SparseLatticeDist {
            dim,
            start,
            time,
            mass: m,
            pruned: 0.0,
        }
    }

    pub fn get(&self, x: &Site) -> f64 {
        self.mass.get(x).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.mass.values().sum()
    }

    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    pub fn bounds(&self) -> Option<GridBox> {
        GridBox::bounding(self.dim, self.mass.keys())
    }

    /// Mean position under the normalized mass.
    pub fn mean(&self) -> Vec<f64> {
        let total = self.total();
        let mut m = vec![0.0; self.dim];
        for (x, v) in &self.mass {
            for (a, slot) in m.iter_mut().enumerate() {
                *slot += v * x.coord(a) as f64;
            }
        }
        m.iter().map(|s| s / total).collect()
    }

    /// Every support site has the parity of `time` relative to `start` and lies
    /// in the L1 ball of radius `time` around `start`.
    pub fn support_ok(&self) -> bool {
        self.mass.keys().all(|x| {
            same_parity(x, &self.start, self.time) && (*x - self.start).l1() <= self.time as i64
        })
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.mass.values_mut().for_each(|v| *v *= factor);
        out.pruned *= factor;
        out
    }

    /// Σ_x |p(x) − q(x)| over the union of supports.
    pub fn l1_distance(&self, other: &SparseLatticeDist) -> f64 {
        let mut keys: Vec<&Site> = self.mass.keys().chain(other.mass.keys()).collect();
        keys.sort();
        keys.dedup();
        keys.into_iter()
            .map(|x| (self.get(x) - other.get(x)).abs())
            .sum()
    }

    /// CSV with columns `x1..xd,value`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (1..=self.dim).map(|i| format!("x{i}")).collect();
        header.push("value".into());
        wr.write_record(&header)?;
        for (x, v) in &self.mass {
            let mut row: Vec<String> = x.coords(self.dim).iter().map(|c| c.to_string()).collect();
            row.push(v.to_string());
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, dim: usize, start: Site, time: usize) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut mass = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            if rec.len() != dim + 1 {
                return Err(Error::Precondition(format!("expected {} columns, got {}", dim + 1, rec.len())));
            }
            let parse_err = |e: std::num::ParseIntError| Error::Precondition(e.to_string());
            let coords: Vec<i32> = (0..dim)
                .map(|i| rec[i].trim().parse::<i32>().map_err(parse_err))
                .collect::<Result<_>>()?;
            let v: f64 = rec[dim]
                .trim()
                .parse()
                .map_err(|e: std::num::ParseFloatError| Error::Precondition(e.to_string()))?;
            mass.push((Site::new(&coords), v));
        }
        Ok(Self::from_masses(dim, start, time, mass))
    }

    pub fn to_doc(&self) -> DistDoc {
        DistDoc {
            schema_version: SCHEMA_VERSION,
            dim: self.dim,
            start: self.start.coords(self.dim).to_vec(),
            time: self.time,
            pruned_mass: self.pruned,
            sites: self
                .mass
                .iter()
                .map(|(x, v)| (x.coords(self.dim).to_vec(), *v))
                .collect(),
        }
    }

    pub fn from_doc(doc: &DistDoc) -> Result<Self> {
        if doc.schema_version != SCHEMA_VERSION {
            return Err(Error::Precondition(format!("unsupported schema version {}", doc.schema_version)));
        }
        let mut d = Self::from_masses(
            doc.dim,
            Site::new(&doc.start),
            doc.time,
            doc.sites.iter().map(|(c, v)| (Site::new(c), *v)),
        );
        d.pruned = doc.pruned_mass;
        Ok(d)
    }
}

/// JSON form of a [`SparseLatticeDist`].
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DistDoc {
    pub schema_version: u32,
    pub dim: usize,
    pub start: Vec<i32>,
    pub time: usize,
    pub pruned_mass: f64,
    pub sites: Vec<(Vec<i32>, f64)>,
}

/// Dense values over a box, used inside the lattice sweeps.
#[derive(Clone, Debug)]
pub(crate) struct DenseField {
    pub grid: GridBox,
    pub values: Vec<f64>,
}

impl DenseField {
    pub fn zeros(grid: GridBox) -> Self {
        DenseField {
            grid,
            values: vec![0.0; grid.volume() as usize],
        }
    }

    pub fn from_dist(dist: &SparseLatticeDist, grid: GridBox) -> Self {
        let mut f = Self::zeros(grid);
        for (x, v) in &dist.mass {
            let i = grid.index(x).expect("support inside grid");
            f.values[i] = *v;
        }
        f
    }

    pub fn to_masses(&self) -> impl Iterator<Item = (Site, f64)> + '_ {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (self.grid.site(i), *v))
    }
}

/// Calls `f(index in outer)` for every site of `inner ⊂ outer`, in index order.
pub(crate) fn for_each_index(outer: &GridBox, inner: &GridBox, mut f: impl FnMut(usize)) {
    if inner.is_empty() {
        return;
    }
    let dim = outer.dim;
    let strides = outer.strides();
    let base = outer.index(&inner.lo).expect("inner box inside outer");
    let last = dim - 1;
    let run = inner.extent(last);
    let mut counter = vec![0usize; dim];
    loop {
        let start: usize = base + (0..last).map(|a| counter[a] * strides[a]).sum::<usize>();
        for i in start..start + run {
            f(i);
        }
        // odometer over all but the fastest axis
        let mut a = last;
        loop {
            if a == 0 {
                return;
            }
            a -= 1;
            counter[a] += 1;
            if counter[a] < inner.extent(a) {
                break;
            }
            counter[a] = 0;
        }
    }
}
