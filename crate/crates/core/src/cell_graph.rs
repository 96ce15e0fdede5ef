//! Spatial cell graphs with per-scale block assignments.
//!
//! A tile of side `m` is subdivided `b x b` times per axis, with `b = 4, 2, 1`
//! for micro, meso and macro. Micro edges are symmetric k-nearest-neighbor
//! edges computed inside each micro block. Coarser scales only ever add edges
//! between cells that share a block at that scale but sat in different blocks
//! one scale below.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Micro,
    Meso,
    Macro,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Scale::Micro, Scale::Meso, Scale::Macro];

    /// Subdivisions per tile axis.
    pub fn subdivisions(self) -> usize {
        match self {
            Scale::Micro => 4,
            Scale::Meso => 2,
            Scale::Macro => 1,
        }
    }

    /// Number of blocks (patches) at this scale.
    pub fn num_blocks(self) -> usize {
        self.subdivisions() * self.subdivisions()
    }

    pub fn finer(self) -> Option<Scale> {
        match self {
            Scale::Micro => None,
            Scale::Meso => Some(Scale::Micro),
            Scale::Macro => Some(Scale::Meso),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Scale::Micro => "micro",
            Scale::Meso => "meso",
            Scale::Macro => "macro",
        }
    }

    pub fn parse(s: &str) -> Result<Scale> {
        match s {
            "micro" => Ok(Scale::Micro),
            "meso" => Ok(Scale::Meso),
            "macro" => Ok(Scale::Macro),
            _ => Err(Error::invalid(format!("unknown scale {s:?}"))),
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Block `(bx, by)` containing `(x, y)` at `scale` in a tile of side `m`.
pub fn block_index(x: f64, y: f64, scale: Scale, m: f64) -> Result<(usize, usize)> {
    if !(0.0..m).contains(&x) || !(0.0..m).contains(&y) {
        return Err(Error::invalid(format!(
            "coordinate ({x}, {y}) outside tile of side {m}"
        )));
    }
    let b = scale.subdivisions();
    let side = m / b as f64;
    let bx = ((x / side).floor() as usize).min(b - 1);
    let by = ((y / side).floor() as usize).min(b - 1);
    Ok((bx, by))
}

/// Row-major linear block id, `by * b + bx`.
pub fn block_id(bx: usize, by: usize, scale: Scale) -> usize {
    by * scale.subdivisions() + bx
}

/// Unordered pair stored with `u < v`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub u: usize,
    pub v: usize,
}

impl Edge {
    pub fn new(a: usize, b: usize) -> Self {
        debug_assert_ne!(a, b);
        Self {
            u: a.min(b),
            v: a.max(b),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CellGraph {
    pub m: f64,
    pub coords: Vec<(f64, f64)>,
    /// `blocks[scale][node]` = row-major block id.
    pub blocks: [Vec<usize>; 3],
    pub edges_micro: Vec<Edge>,
}

impl CellGraph {
    pub fn num_nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn block_of(&self, node: usize, scale: Scale) -> usize {
        self.blocks[scale.index()][node]
    }

    pub fn same_block(&self, a: usize, b: usize, scale: Scale) -> bool {
        self.block_of(a, scale) == self.block_of(b, scale)
    }

    /// Nodes grouped by block at `scale`; empty blocks give empty lists.
    pub fn block_members(&self, scale: Scale) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); scale.num_blocks()];
        for (i, &b) in self.blocks[scale.index()].iter().enumerate() {
            out[b].push(i);
        }
        out
    }

    pub fn dist2(&self, a: usize, b: usize) -> f64 {
        let (xa, ya) = self.coords[a];
        let (xb, yb) = self.coords[b];
        (xa - xb).powi(2) + (ya - yb).powi(2)
    }
}

/// Micro graph: symmetric kNN (union) inside each micro block.
///
/// Distance ties break toward the lower node index.
pub fn build_micro_graph(coords: &[(f64, f64)], m: f64, k: usize) -> Result<CellGraph> {
    if k == 0 {
        return Err(Error::invalid("neighbor count k must be >= 1"));
    }
    let mut blocks = [Vec::new(), Vec::new(), Vec::new()];
    for &(x, y) in coords {
        for s in Scale::ALL {
            let (bx, by) = block_index(x, y, s, m)?;
            blocks[s.index()].push(block_id(bx, by, s));
        }
    }
    let mut g = CellGraph {
        m,
        coords: coords.to_vec(),
        blocks,
        edges_micro: Vec::new(),
    };
    let mut edges = BTreeSet::new();
    for members in g.block_members(Scale::Micro) {
        for &i in &members {
            let mut others: Vec<(f64, usize)> = members
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| (g.dist2(i, j), j))
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for &(_, j) in others.iter().take(k) {
                edges.insert(Edge::new(i, j));
            }
        }
    }
    g.edges_micro = edges.into_iter().collect();
    Ok(g)
}

/// Pairs eligible for addition at `scale` (meso or macro).
///
/// A pair qualifies when it shares a block at `scale`, sits in different
/// blocks at the next finer scale, and is not in `existing`. With `c_max`,
/// a pair is kept only if it ranks among the `c_max` closest candidates of at
/// least one endpoint. Output is sorted.
pub fn candidate_pairs(
    g: &CellGraph,
    scale: Scale,
    existing: &BTreeSet<Edge>,
    c_max: Option<usize>,
) -> Result<Vec<Edge>> {
    let finer = scale
        .finer()
        .ok_or_else(|| Error::invalid("micro scale has no candidate pairs"))?;
    let mut pairs = Vec::new();
    for members in g.block_members(scale) {
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                let e = Edge::new(i, j);
                if !g.same_block(i, j, finer) && !existing.contains(&e) {
                    pairs.push(e);
                }
            }
        }
    }
    pairs.sort();
    let Some(c) = c_max else { return Ok(pairs) };
    let n = g.num_nodes();
    let mut per_node: Vec<Vec<(f64, usize, usize)>> = vec![Vec::new(); n];
    for (idx, e) in pairs.iter().enumerate() {
        let d = g.dist2(e.u, e.v);
        per_node[e.u].push((d, e.v, idx));
        per_node[e.v].push((d, e.u, idx));
    }
    let mut keep = vec![false; pairs.len()];
    for list in &mut per_node {
        list.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, _, idx) in list.iter().take(c) {
            keep[idx] = true;
        }
    }
    Ok(pairs
        .into_iter()
        .zip(keep)
        .filter_map(|(e, k)| k.then_some(e))
        .collect())
}

/// Write edges as `scale,u,v` rows.
pub fn write_edges_csv<W: Write>(mut out: W, edges: &[(Scale, Vec<Edge>)]) -> Result<()> {
    writeln!(out, "scale,u,v")?;
    for (scale, list) in edges {
        for e in list {
            writeln!(out, "{},{},{}", scale, e.u, e.v)?;
        }
    }
    Ok(())
}
