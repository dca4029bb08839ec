//! Region sets, border adjacency, neighbor orders, and spatial weights.
//!
//! Regions live in a fixed, explicit order; every matrix in the crate is
//! indexed by that order.  Adjacency comes from an undirected border list;
//! neighbor order is graph distance (order 1 = shares a border, order 2 =
//! neighbor of a neighbor, ...).  Weights give each region's neighbors up to
//! a maximum order equal raw weight 1, optionally normalized so the weights
//! pointing into each region sum to one.

use std::collections::HashMap;
use std::collections::VecDeque;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sentinel order for pairs with no connecting path (e.g. islands).
pub const UNREACHABLE: u32 = u32::MAX;

/// One areal unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    /// Short stable identifier (e.g. a two-letter province acronym).
    pub id: String,
    /// Human-readable name; defaults to the id.
    pub name: String,
}

/// Ordered set of regions with O(1) id lookup.
#[derive(Debug, Clone)]
pub struct RegionSet {
    regions: Vec<Region>,
    index: HashMap<String, usize>,
}

impl RegionSet {
    /// Build from `(id, name)` pairs, preserving order.  Duplicate ids are a
    /// schema error.
    pub fn new(regions: Vec<Region>) -> Result<Self> {
        let mut index = HashMap::with_capacity(regions.len());
        for (i, region) in regions.iter().enumerate() {
            if region.id.is_empty() {
                return Err(Error::SchemaMismatch("empty region id".into()));
            }
            if index.insert(region.id.clone(), i).is_some() {
                return Err(Error::SchemaMismatch(format!(
                    "duplicate region id `{}`",
                    region.id
                )));
            }
        }
        Ok(Self { regions, index })
    }

    /// Convenience constructor from bare ids.
    pub fn from_ids<S: Into<String> + Clone>(ids: &[S]) -> Result<Self> {
        Self::new(
            ids.iter()
                .map(|s| {
                    let id: String = s.clone().into();
                    Region {
                        name: id.clone(),
                        id,
                    }
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, i: usize) -> &str {
        &self.regions[i].id
    }

    pub fn name(&self, i: usize) -> &str {
        &self.regions[i].name
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.regions.iter().map(|r| r.id.as_str())
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }
}

/// Symmetric boolean adjacency with a zero diagonal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    r: usize,
    entries: Vec<bool>,
}

impl Adjacency {
    pub fn len(&self) -> usize {
        self.r
    }

    pub fn is_empty(&self) -> bool {
        self.r == 0
    }

    pub fn adjacent(&self, i: usize, j: usize) -> bool {
        self.entries[i * self.r + j]
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let r = self.r;
        (0..r).filter(move |&j| self.entries[i * r + j])
    }

    /// Number of undirected border pairs.
    pub fn n_borders(&self) -> usize {
        let mut n = 0;
        for i in 0..self.r {
            for j in (i + 1)..self.r {
                if self.adjacent(i, j) {
                    n += 1;
                }
            }
        }
        n
    }
}

/// Build symmetric adjacency from an undirected border list.
///
/// Duplicate pairs (in either orientation) are tolerated; a self-loop or an
/// unknown id is an error.  The diagonal is always false.
pub fn build_adjacency(regions: &RegionSet, borders: &[(String, String)]) -> Result<Adjacency> {
    let r = regions.len();
    let mut entries = vec![false; r * r];
    for (a, b) in borders {
        let ia = regions.index_of(a).ok_or_else(|| Error::UnknownRegion {
            id: a.clone(),
            context: "border list".into(),
        })?;
        let ib = regions.index_of(b).ok_or_else(|| Error::UnknownRegion {
            id: b.clone(),
            context: "border list".into(),
        })?;
        if ia == ib {
            return Err(Error::SelfLoop { id: a.clone() });
        }
        entries[ia * r + ib] = true;
        entries[ib * r + ia] = true;
    }
    Ok(Adjacency { r, entries })
}

/// Parse a `from,to` border CSV (header required) into id pairs.
pub fn parse_borders<R: Read>(reader: R) -> Result<Vec<(String, String)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    {
        let headers = rdr.headers()?;
        if headers.len() < 2 {
            return Err(Error::SchemaMismatch(format!(
                "border list needs `from,to` columns, found {} column(s)",
                headers.len()
            )));
        }
    }
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record?;
        if record.len() < 2 {
            return Err(Error::SchemaMismatch(
                "border row with fewer than two fields".into(),
            ));
        }
        out.push((record[0].to_string(), record[1].to_string()));
    }
    Ok(out)
}

/// Pairwise neighbor orders (graph distances) with `UNREACHABLE` sentinel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborOrders {
    r: usize,
    entries: Vec<u32>,
}

impl NeighborOrders {
    pub fn len(&self) -> usize {
        self.r
    }

    pub fn is_empty(&self) -> bool {
        self.r == 0
    }

    pub fn order(&self, i: usize, j: usize) -> u32 {
        self.entries[i * self.r + j]
    }

    /// Histogram of orders over unordered pairs, up to and including
    /// `max_order`; the second value counts unreachable pairs.
    pub fn histogram(&self, max_order: u32) -> (Vec<usize>, usize) {
        let mut hist = vec![0usize; max_order as usize + 1];
        let mut disconnected = 0usize;
        for i in 0..self.r {
            for j in (i + 1)..self.r {
                match self.order(i, j) {
                    UNREACHABLE => disconnected += 1,
                    o if o >= 1 && o <= max_order => hist[o as usize] += 1,
                    _ => {}
                }
            }
        }
        (hist, disconnected)
    }
}

/// Breadth-first graph distance from every region.
pub fn neighbor_order(adj: &Adjacency) -> NeighborOrders {
    let r = adj.len();
    let mut entries = vec![UNREACHABLE; r * r];
    let mut queue = VecDeque::new();
    for start in 0..r {
        let row = &mut entries[start * r..(start + 1) * r];
        row[start] = 0;
        queue.clear();
        queue.push_back(start);
        while let Some(u) = queue.pop_front() {
            let du = row[u];
            for v in adj.neighbors(u) {
                if row[v] == UNREACHABLE {
                    row[v] = du + 1;
                    queue.push_back(v);
                }
            }
        }
    }
    NeighborOrders { r, entries }
}

/// Spatial weights; `entry(r, s)` is the weight of source region `s` in the
/// neighbor sum of receiving region `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    r: usize,
    entries: Vec<f64>,
    pub max_order: u32,
    pub normalized: bool,
}

impl WeightMatrix {
    pub fn len(&self) -> usize {
        self.r
    }

    pub fn is_empty(&self) -> bool {
        self.r == 0
    }

    pub fn entry(&self, into: usize, from: usize) -> f64 {
        self.entries[into * self.r + from]
    }

    /// Weights pointing into region `into`, indexed by source region.
    pub fn into_row(&self, into: usize) -> &[f64] {
        &self.entries[into * self.r..(into + 1) * self.r]
    }

    /// Uniform rescale of all entries (used by tests of scale invariance).
    pub fn scaled(&self, c: f64) -> WeightMatrix {
        WeightMatrix {
            r: self.r,
            entries: self.entries.iter().map(|w| w * c).collect(),
            max_order: self.max_order,
            normalized: false,
        }
    }
}

/// Band the neighbor orders into weights: raw weight 1 for orders in
/// `[1, max_order]`, 0 otherwise; optionally divide each receiving region's
/// row by its sum (rows with no in-band neighbors stay all-zero).
pub fn build_weights(orders: &NeighborOrders, max_order: u32, normalize: bool) -> WeightMatrix {
    let r = orders.len();
    let mut entries = vec![0.0f64; r * r];
    for into in 0..r {
        let row = &mut entries[into * r..(into + 1) * r];
        let mut sum = 0.0;
        for (from, w) in row.iter_mut().enumerate() {
            let o = orders.order(into, from);
            if o >= 1 && o <= max_order {
                *w = 1.0;
                sum += 1.0;
            }
        }
        if normalize && sum > 0.0 {
            for w in row.iter_mut() {
                *w /= sum;
            }
        }
    }
    WeightMatrix {
        r,
        entries,
        max_order,
        normalized: normalize,
    }
}
