//! Hierarchical cell-graph encoder.
//!
//! Expression is projected to node embeddings and refined by message passing
//! on the micro kNN graph. Before the meso and macro stages, candidate pairs
//! that become intra-block at the coarser scale are scored, and a relaxed
//! Bernoulli draw turns each score into a soft edge weight. Each stage ends
//! with gated attention pooling inside every non-empty block of its scale;
//! the scale embedding is the mean of those block vectors.

use std::collections::BTreeSet;

use crate::cell_graph::{build_micro_graph, candidate_pairs, CellGraph, Edge, Scale};
use crate::datagen::{ExpressionNorm, TilePair};
use crate::error::{Error, Result};
use crate::numcore::{glorot, sigmoid, ParamId, ParamStore, Rng, Tape, Tensor, Var};

/// Scores are kept this far from 0 and 1 before taking the logit.
pub const SCORE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Relaxed Bernoulli edge weights with Gumbel noise.
    Train,
    /// Hard threshold at 0.5, no noise.
    Infer,
}

/// `σ((logit(s) + g1 - g0) / τ)`.
pub fn relaxed_bernoulli(s: f64, g1: f64, g0: f64, tau: f64) -> f64 {
    sigmoid(((s / (1.0 - s)).ln() + g1 - g0) / tau)
}

/// Edge selection for one score. Train mode draws two Gumbel variables.
pub fn gumbel_edge_select(s: f64, tau: f64, rng: &mut Rng, mode: Mode) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!(
            "Gumbel temperature must be positive, got {tau}"
        )));
    }
    Ok(match mode {
        Mode::Train => {
            let g1 = rng.gumbel();
            let g0 = rng.gumbel();
            relaxed_bernoulli(s.clamp(SCORE_EPS, 1.0 - SCORE_EPS), g1, g0, tau)
        }
        Mode::Infer => f64::from(s >= 0.5),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StEncoderConfig {
    pub genes: usize,
    pub d_h: usize,
    pub d: usize,
    /// Message-passing layers in the micro, meso and macro stages.
    pub depths: [usize; 3],
    pub scorer_hidden: usize,
    /// Add every candidate at weight 1 instead of sampling.
    pub no_sparsification: bool,
}

impl Default for StEncoderConfig {
    fn default() -> Self {
        Self {
            genes: 60,
            d_h: 64,
            d: 64,
            depths: [2, 1, 1],
            scorer_hidden: 32,
            no_sparsification: false,
        }
    }
}

/// A tile's cells with their graph and candidate pairs, fixed for training.
#[derive(Clone, Debug)]
pub struct PreparedCells {
    /// Normalized expression, `[n, G]`.
    pub x: Tensor,
    pub graph: CellGraph,
    /// Candidate pairs for the meso and macro expansions.
    pub candidates: [Vec<Edge>; 2],
}

impl PreparedCells {
    pub fn new(tile: &TilePair, norm: &ExpressionNorm, k: usize, c_max: Option<usize>) -> Result<Self> {
        if tile.cells.is_empty() {
            return Err(Error::tile(&tile.tile_id, "no cells"));
        }
        let coords: Vec<(f64, f64)> = tile.cells.iter().map(|c| (c.x, c.y)).collect();
        let graph =
            build_micro_graph(&coords, tile.m as f64, k).map_err(|e| Error::tile(&tile.tile_id, e.to_string()))?;
        let rows: Vec<Vec<f64>> = tile.cells.iter().map(|c| norm.apply(&c.expression)).collect();
        let x = Tensor::from_rows(&rows)?;
        let micro: BTreeSet<Edge> = graph.edges_micro.iter().copied().collect();
        let meso = candidate_pairs(&graph, Scale::Meso, &micro, c_max)?;
        // Meso edges never cross a meso block, so they cannot collide with
        // macro candidates; the micro set is the complete exclusion list.
        let macro_ = candidate_pairs(&graph, Scale::Macro, &micro, c_max)?;
        Ok(Self {
            x,
            graph,
            candidates: [meso, macro_],
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }
}

/// Undirected edges with one weight variable per edge.
struct EdgeSet {
    edges: Vec<Edge>,
    weights: Vec<Var>,
    realized: Vec<(Edge, f64)>,
}

impl EdgeSet {
    fn directed(&self, tape: &mut Tape) -> Result<(Var, Vec<usize>, Vec<usize>)> {
        let e = &self.edges;
        let src: Vec<usize> = e.iter().map(|e| e.u).chain(e.iter().map(|e| e.v)).collect();
        let dst: Vec<usize> = e.iter().map(|e| e.v).chain(e.iter().map(|e| e.u)).collect();
        let w = if self.weights.is_empty() {
            tape.constant(Tensor::zeros(&[0, 1]))
        } else {
            let once = tape.concat_rows(&self.weights)?;
            tape.concat_rows(&[once, once])?
        };
        Ok((w, src, dst))
    }
}

/// Output of one forward pass over a tile's cell graph.
pub struct StOutput {
    /// Pooled `[1, d]` embeddings for micro, meso and macro.
    pub z: [Var; 3],
    /// Stage-final node embeddings, `[n, d_h]`.
    pub h: [Var; 3],
    /// Realized undirected edges and their weights per scale.
    pub edges: [Vec<(Edge, f64)>; 3],
}

#[derive(Clone, Debug)]
pub struct StEncoder {
    pub cfg: StEncoderConfig,
    proj_w: ParamId,
    proj_b: ParamId,
    layers: [Vec<ParamId>; 3],
    scorer: [ParamId; 4],
    /// Gate weights; a gate bias would cancel in the softmax, so there is none.
    gate_w: ParamId,
    pool_w: ParamId,
    pool_b: ParamId,
}

impl StEncoder {
    pub fn new(cfg: StEncoderConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        let (g, dh, d, hid) = (cfg.genes, cfg.d_h, cfg.d, cfg.scorer_hidden);
        if g == 0 || dh == 0 || d == 0 || hid == 0 {
            return Err(Error::Config("ST encoder dims must be positive".into()));
        }
        let proj_w = store.add("st.proj.w", glorot(rng, g, dh))?;
        let proj_b = store.add("st.proj.b", Tensor::zeros(&[dh]))?;
        let mut layers: [Vec<ParamId>; 3] = Default::default();
        for s in Scale::ALL {
            for l in 0..cfg.depths[s.index()] {
                let name = format!("st.gnn.{}.{l}", s.name());
                layers[s.index()].push(store.add(&name, glorot(rng, 2 * dh, dh))?);
            }
        }
        let scorer = [
            store.add("st.scorer.w1", glorot(rng, 2 * dh, hid))?,
            store.add("st.scorer.b1", Tensor::zeros(&[hid]))?,
            store.add("st.scorer.w2", glorot(rng, hid, 1))?,
            store.add("st.scorer.b2", Tensor::zeros(&[1]))?,
        ];
        Ok(Self {
            proj_w,
            proj_b,
            layers,
            scorer,
            gate_w: store.add("st.pool.gate.w", glorot(rng, dh, 1))?,
            pool_w: store.add("st.pool.w", glorot(rng, dh, d))?,
            pool_b: store.add("st.pool.b", Tensor::zeros(&[d]))?,
            cfg,
        })
    }

    pub fn scorer_ids(&self) -> [ParamId; 4] {
        self.scorer
    }

    /// Symmetrized pair scores `[E, 1]` in `[SCORE_EPS, 1 - SCORE_EPS]`.
    pub fn edge_scores(&self, tape: &mut Tape, store: &ParamStore, h: Var, pairs: &[Edge]) -> Result<Var> {
        let e = pairs.len();
        let hu = tape.gather_rows(h, pairs.iter().map(|p| p.u).collect())?;
        let hv = tape.gather_rows(h, pairs.iter().map(|p| p.v).collect())?;
        let uv = tape.concat_cols(hu, hv)?;
        let vu = tape.concat_cols(hv, hu)?;
        let x = tape.concat_rows(&[uv, vu])?;
        let [w1, b1, w2, b2] = self.scorer.map(|id| tape.param(store, id));
        let hid = tape.matmul(x, w1)?;
        let hid = tape.add_bias(hid, b1)?;
        let hid = tape.relu(hid);
        let o = tape.matmul(hid, w2)?;
        let o = tape.add_bias(o, b2)?;
        let sig = tape.sigmoid(o);
        let fwd = tape.gather(sig, (0..e).collect(), &[e, 1])?;
        let bwd = tape.gather(sig, (e..2 * e).collect(), &[e, 1])?;
        let sum = tape.add(fwd, bwd)?;
        let s = tape.scale(sum, 0.5);
        Ok(tape.clamp(s, SCORE_EPS, 1.0 - SCORE_EPS))
    }

    /// `ReLU(W · [h_v, mean of weighted neighbors])` for every node.
    fn gnn_layer(&self, tape: &mut Tape, store: &ParamStore, h: Var, edges: &EdgeSet, w: ParamId) -> Result<Var> {
        let (ew, src, dst) = edges.directed(tape)?;
        let w = tape.param(store, w);
        gnn_layer(tape, h, ew, src, dst, w)
    }

    /// Gated attention pooling over `nodes`, `[1, d]`.
    pub fn attention_pool(&self, tape: &mut Tape, store: &ParamStore, h: Var, nodes: &[usize]) -> Result<Var> {
        if nodes.is_empty() {
            return Err(Error::invalid("attention pooling over an empty graph"));
        }
        let hb = tape.gather_rows(h, nodes.to_vec())?;
        let gw = tape.param(store, self.gate_w);
        let a = tape.matmul(hb, gw)?;
        let a = tape.reshape(a, &[1, nodes.len()])?;
        let att = tape.softmax(a);
        let pw = tape.param(store, self.pool_w);
        let pb = tape.param(store, self.pool_b);
        let t = tape.matmul(hb, pw)?;
        let t = tape.add_bias(t, pb)?;
        tape.matmul(att, t)
    }

    /// Mean of attention-pooled block vectors over the non-empty blocks of `scale`.
    fn pool_scale(&self, tape: &mut Tape, store: &ParamStore, h: Var, g: &CellGraph, scale: Scale) -> Result<Var> {
        let mut parts = Vec::new();
        for members in g.block_members(scale) {
            if !members.is_empty() {
                parts.push(self.attention_pool(tape, store, h, &members)?);
            }
        }
        let stacked = tape.concat_rows(&parts)?;
        tape.mean_rows(stacked)
    }

    /// Add the candidate pairs of one scale to `edges`.
    #[allow(clippy::too_many_arguments)]
    fn expand(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        pairs: &[Edge],
        edges: &mut EdgeSet,
        tau_g: f64,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<()> {
        if pairs.is_empty() {
            return Ok(());
        }
        let e = pairs.len();
        if self.cfg.no_sparsification {
            edges.edges.extend_from_slice(pairs);
            edges.weights.push(tape.constant(Tensor::full(&[e, 1], 1.0)));
            edges.realized.extend(pairs.iter().map(|p| (*p, 1.0)));
            return Ok(());
        }
        if !(tau_g > 0.0) {
            return Err(Error::invalid(format!(
                "Gumbel temperature must be positive, got {tau_g}"
            )));
        }
        let s = self.edge_scores(tape, store, h, pairs)?;
        match mode {
            Mode::Train => {
                let noise: Vec<f64> = (0..e).map(|_| rng.gumbel() - rng.gumbel()).collect();
                let p = relaxed_weights(tape, s, &noise, tau_g)?;
                edges.edges.extend_from_slice(pairs);
                edges
                    .realized
                    .extend(pairs.iter().copied().zip(tape.value(p).iter().copied()));
                edges.weights.push(p);
            }
            Mode::Infer => {
                let chosen: Vec<Edge> = pairs
                    .iter()
                    .zip(tape.value(s))
                    .filter(|(_, &sv)| sv >= 0.5)
                    .map(|(p, _)| *p)
                    .collect();
                if !chosen.is_empty() {
                    edges.weights.push(tape.constant(Tensor::full(&[chosen.len(), 1], 1.0)));
                    edges.realized.extend(chosen.iter().map(|p| (*p, 1.0)));
                    edges.edges.extend(chosen);
                }
            }
        }
        Ok(())
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        cells: &PreparedCells,
        tau_g: f64,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<StOutput> {
        let g = &cells.graph;
        let x = tape.constant(cells.x.clone());
        let pw = tape.param(store, self.proj_w);
        let pb = tape.param(store, self.proj_b);
        let h0 = tape.matmul(x, pw)?;
        let mut h = tape.add_bias(h0, pb)?;

        let micro = &g.edges_micro;
        let mut edges = EdgeSet {
            edges: micro.clone(),
            weights: if micro.is_empty() {
                Vec::new()
            } else {
                vec![tape.constant(Tensor::full(&[micro.len(), 1], 1.0))]
            },
            realized: micro.iter().map(|e| (*e, 1.0)).collect(),
        };

        let mut zs = Vec::with_capacity(3);
        let mut hs = Vec::with_capacity(3);
        let mut realized: [Vec<(Edge, f64)>; 3] = Default::default();
        for scale in Scale::ALL {
            if scale != Scale::Micro {
                let pairs = &cells.candidates[scale.index() - 1];
                self.expand(tape, store, h, pairs, &mut edges, tau_g, mode, rng)?;
            }
            for &w in &self.layers[scale.index()] {
                h = self.gnn_layer(tape, store, h, &edges, w)?;
            }
            realized[scale.index()] = edges.realized.clone();
            hs.push(h);
            zs.push(self.pool_scale(tape, store, h, g, scale)?);
        }
        Ok(StOutput {
            z: [zs[0], zs[1], zs[2]],
            h: [hs[0], hs[1], hs[2]],
            edges: realized,
        })
    }
}

/// `ReLU(Concat(h, neighbor_mean(h)) · W)`; `weights` holds one entry per
/// directed edge `src[e] -> dst[e]`.
pub fn gnn_layer(tape: &mut Tape, h: Var, weights: Var, src: Vec<usize>, dst: Vec<usize>, w: Var) -> Result<Var> {
    let agg = tape.neighbor_mean(h, weights, src, dst)?;
    let cat = tape.concat_cols(h, agg)?;
    let out = tape.matmul(cat, w)?;
    Ok(tape.relu(out))
}

/// Relaxed edge weights from scores `s` `[E, 1]` and fixed noise `g1 - g0`.
pub fn relaxed_weights(tape: &mut Tape, s: Var, noise: &[f64], tau: f64) -> Result<Var> {
    let e = noise.len();
    let log_s = tape.log(s);
    let neg = tape.scale(s, -1.0);
    let one_minus = tape.add_scalar(neg, 1.0);
    let log_1ms = tape.log(one_minus);
    let logit = tape.sub(log_s, log_1ms)?;
    let g = tape.constant(Tensor::matrix(e, 1, noise.to_vec())?);
    let noisy = tape.add(logit, g)?;
    let scaled = tape.scale(noisy, 1.0 / tau);
    Ok(tape.sigmoid(scaled))
}

/// Realized neighbor sets per node from an undirected edge list.
pub fn neighbor_sets(n: usize, edges: &[(Edge, f64)]) -> Vec<BTreeSet<usize>> {
    let mut out = vec![BTreeSet::new(); n];
    for (e, _) in edges {
        out[e.u].insert(e.v);
        out[e.v].insert(e.u);
    }
    out
}

/// Order-invariant set encoder used when the cell graph is ablated: each
/// cell is the expression-weighted sum of learned gene embeddings, cells are
/// averaged, and one projection gives the same vector for all three scales.
#[derive(Clone, Debug)]
pub struct NoGraphEncoder {
    gene_emb: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
}

impl NoGraphEncoder {
    pub fn new(genes: usize, d_h: usize, d: usize, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            gene_emb: store.add("set.gene_emb", glorot(rng, genes, d_h))?,
            proj_w: store.add("set.proj.w", glorot(rng, d_h, d))?,
            proj_b: store.add("set.proj.b", Tensor::zeros(&[d]))?,
        })
    }

    /// Per-cell embeddings `[n, d_h]` and the shared `[1, d]` tile vector.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: &Tensor) -> Result<(Var, Var)> {
        let x = tape.constant(x.clone());
        let e = tape.param(store, self.gene_emb);
        let cells = tape.matmul(x, e)?;
        let mean = tape.mean_rows(cells)?;
        let w = tape.param(store, self.proj_w);
        let b = tape.param(store, self.proj_b);
        let z = tape.matmul(mean, w)?;
        Ok((cells, tape.add_bias(z, b)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::Cell;
    use crate::numcore::gradcheck::{block_rel_err, param_finite_diff};
    use crate::numcore::softmax;

    fn small_cfg(genes: usize) -> StEncoderConfig {
        StEncoderConfig {
            genes,
            d_h: 6,
            d: 5,
            scorer_hidden: 4,
            ..StEncoderConfig::default()
        }
    }

    fn random_tile(n: usize, genes: usize, m: usize, seed: u64) -> TilePair {
        let mut rng = Rng::new(seed);
        TilePair {
            tile_id: format!("t{seed}"),
            m,
            image: None,
            cells: (0..n)
                .map(|i| Cell {
                    cell_id: format!("c{i}"),
                    x: rng.uniform_range(0.0, m as f64),
                    y: rng.uniform_range(0.0, m as f64),
                    expression: (0..genes).map(|_| rng.uniform_range(0.0, 5.0)).collect(),
                })
                .collect(),
        }
    }

    fn prepared(n: usize, seed: u64) -> PreparedCells {
        PreparedCells::new(&random_tile(n, 5, 64, seed), &ExpressionNorm::identity(5), 3, None).unwrap()
    }

    fn values(tape: &Tape, v: Var) -> Vec<f64> {
        tape.value(v).to_vec()
    }

    #[test]
    fn isolated_node_keeps_relu_of_itself() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::matrix(1, 2, vec![1.5, -2.0]).unwrap());
        let mut w = vec![0.0; 8];
        w[0] = 1.0;
        w[3] = 1.0;
        let w = tape.constant(Tensor::matrix(4, 2, w).unwrap());
        let ew = tape.constant(Tensor::zeros(&[0, 1]));
        let out = gnn_layer(&mut tape, h, ew, vec![], vec![], w).unwrap();
        assert_eq!(values(&tape, out), vec![1.5, 0.0]);
    }

    #[test]
    fn single_neighbor_hand_example() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 3.0, 2.0]).unwrap());
        // [I; I] sums the self and neighbor halves.
        let w = tape.constant(Tensor::matrix(4, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap());
        let ew = tape.constant(Tensor::full(&[1, 1], 1.0));
        let out = gnn_layer(&mut tape, h, ew, vec![1], vec![0], w).unwrap();
        assert_eq!(&tape.value(out)[..2], &[4.0, 2.0]);
    }

    #[test]
    fn zero_weight_edge_equals_isolated() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::matrix(2, 2, vec![1.0, -1.0, 3.0, 2.0]).unwrap());
        let w = tape.constant(Tensor::matrix(4, 2, (0..8).map(|i| i as f64 * 0.1).collect()).unwrap());
        let zero = tape.constant(Tensor::full(&[1, 1], 0.0));
        let with_edge = gnn_layer(&mut tape, h, zero, vec![1], vec![0], w).unwrap();
        let none = tape.constant(Tensor::zeros(&[0, 1]));
        let isolated = gnn_layer(&mut tape, h, none, vec![], vec![], w).unwrap();
        assert_eq!(values(&tape, with_edge), values(&tape, isolated));
    }

    fn encoder(genes: usize, seed: u64) -> (StEncoder, ParamStore) {
        let mut store = ParamStore::new();
        let enc = StEncoder::new(small_cfg(genes), &mut store, &mut Rng::new(seed)).unwrap();
        (enc, store)
    }

    #[test]
    fn zero_scorer_gives_half() {
        let (enc, mut store) = encoder(5, 1);
        for id in enc.scorer {
            store.value_mut(id).fill(0.0);
        }
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::matrix(3, 6, (0..18).map(|i| i as f64).collect()).unwrap());
        let s = enc
            .edge_scores(&mut tape, &store, h, &[Edge::new(0, 1), Edge::new(1, 2)])
            .unwrap();
        assert_eq!(values(&tape, s), vec![0.5, 0.5]);
    }

    #[test]
    fn scores_average_both_orders() {
        let (enc, store) = encoder(5, 2);
        let mut rng = Rng::new(3);
        let hv: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::matrix(2, 6, hv.clone()).unwrap());
        let s = enc.edge_scores(&mut tape, &store, h, &[Edge::new(0, 1)]).unwrap();
        let got = tape.value(s)[0];

        let [w1, b1, w2, b2] = enc.scorer.map(|id| store.get(id).data().to_vec());
        let phi = |a: &[f64], b: &[f64]| {
            let x: Vec<f64> = a.iter().chain(b).copied().collect();
            let mut o = b2[0];
            for j in 0..4 {
                let pre = b1[j] + (0..12).map(|i| x[i] * w1[i * 4 + j]).sum::<f64>();
                o += pre.max(0.0) * w2[j];
            }
            sigmoid(o)
        };
        let (uv, vu) = (phi(&hv[..6], &hv[6..]), phi(&hv[6..], &hv[..6]));
        assert!((got - 0.5 * (uv + vu)).abs() < 1e-12);
    }

    #[test]
    fn large_bias_pushes_score_to_one() {
        let (enc, mut store) = encoder(5, 4);
        let mut tape0 = Tape::new();
        let h = tape0.constant(Tensor::matrix(2, 6, vec![0.3; 12]).unwrap());
        let mut last = 0.0;
        for b in [0.0, 2.0, 5.0, 10.0] {
            store.value_mut(enc.scorer[3])[0] = b;
            let mut tape = Tape::new();
            let h2 = tape.constant(tape0.tensor(h));
            let s = enc.edge_scores(&mut tape, &store, h2, &[Edge::new(0, 1)]).unwrap();
            let v = tape.value(s)[0];
            assert!(v > last);
            last = v;
        }
        assert!(last > 0.9999);
    }

    #[test]
    fn gumbel_select_examples() {
        assert_eq!(relaxed_bernoulli(0.5, 0.3, 0.3, 0.7), 0.5);
        let mut rng = Rng::new(0);
        assert!(gumbel_edge_select(0.7, 0.0, &mut rng, Mode::Train).is_err());
        assert_eq!(gumbel_edge_select(0.7, 0.5, &mut rng, Mode::Infer).unwrap(), 1.0);
        assert_eq!(gumbel_edge_select(0.3, 0.5, &mut rng, Mode::Infer).unwrap(), 0.0);
    }

    #[test]
    fn empty_candidates_leave_edges_unchanged() {
        // All cells in one micro block: no meso or macro candidates.
        let mut tile = random_tile(6, 5, 64, 9);
        for c in &mut tile.cells {
            c.x *= 0.2;
            c.y *= 0.2;
        }
        let cells = PreparedCells::new(&tile, &ExpressionNorm::identity(5), 2, None).unwrap();
        assert!(cells.candidates.iter().all(Vec::is_empty));
        let (enc, store) = encoder(5, 5);
        let mut tape = Tape::new();
        let out = enc
            .forward(&mut tape, &store, &cells, 0.5, Mode::Train, &mut Rng::new(1))
            .unwrap();
        assert_eq!(out.edges[0], out.edges[1]);
        assert_eq!(out.edges[1], out.edges[2]);
    }

    #[test]
    fn saturated_scorer_adds_every_candidate() {
        let cells = prepared(25, 3);
        let (enc, mut store) = encoder(5, 6);
        store.value_mut(enc.scorer[3])[0] = 1e3;
        let mut tape = Tape::new();
        let out = enc
            .forward(&mut tape, &store, &cells, 0.5, Mode::Infer, &mut Rng::new(0))
            .unwrap();

        let mut full = StEncoder {
            cfg: enc.cfg.clone(),
            ..enc.clone()
        };
        full.cfg.no_sparsification = true;
        let mut tape2 = Tape::new();
        let dense = full
            .forward(&mut tape2, &store, &cells, 0.5, Mode::Infer, &mut Rng::new(0))
            .unwrap();
        assert_eq!(out.edges, dense.edges);
        let n_macro = cells.graph.edges_micro.len() + cells.candidates[0].len() + cells.candidates[1].len();
        assert_eq!(out.edges[2].len(), n_macro);
        for (a, b) in out.z.iter().zip(&dense.z) {
            assert_eq!(tape.value(*a), tape2.value(*b));
        }
    }

    #[test]
    fn realized_edges_respect_blocks_and_nest() {
        let (enc, store) = encoder(5, 7);
        for seed in 0..30 {
            let cells = prepared(30, 100 + seed);
            for mode in [Mode::Train, Mode::Infer] {
                let mut tape = Tape::new();
                let out = enc
                    .forward(&mut tape, &store, &cells, 0.5, mode, &mut Rng::new(seed))
                    .unwrap();
                let n = cells.num_nodes();
                for s in Scale::ALL {
                    for (e, w) in &out.edges[s.index()] {
                        assert!(cells.graph.same_block(e.u, e.v, s));
                        assert!((0.0..=1.0).contains(w));
                    }
                }
                let nb: Vec<_> = out.edges.iter().map(|e| neighbor_sets(n, e)).collect();
                for u in 0..n {
                    assert!(nb[0][u].is_subset(&nb[1][u]));
                    assert!(nb[1][u].is_subset(&nb[2][u]));
                }
            }
        }
    }

    #[test]
    fn attention_pool_matches_direct_sum() {
        let (enc, store) = encoder(5, 8);
        let mut rng = Rng::new(9);
        let hv: Vec<f64> = (0..30).map(|_| rng.normal()).collect();
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::matrix(5, 6, hv.clone()).unwrap());
        let z = enc.attention_pool(&mut tape, &store, h, &[0, 1, 2, 3, 4]).unwrap();

        let gw = store.get(enc.gate_w).data();
        let pw = store.get(enc.pool_w).data();
        let pb = store.get(enc.pool_b).data();
        let logits: Vec<f64> = (0..5)
            .map(|v| (0..6).map(|k| hv[v * 6 + k] * gw[k]).sum::<f64>())
            .collect();
        let a = softmax(&logits);
        for j in 0..5 {
            let want: f64 = (0..5)
                .map(|v| a[v] * (pb[j] + (0..6).map(|k| hv[v * 6 + k] * pw[k * 5 + j]).sum::<f64>()))
                .sum();
            assert!((tape.value(z)[j] - want).abs() < 1e-12);
        }

        // One node, and two identical nodes, give transform(h).
        let one = enc.attention_pool(&mut tape, &store, h, &[2]).unwrap();
        let two = enc.attention_pool(&mut tape, &store, h, &[2, 2]).unwrap();
        for (a, b) in tape.value(one).iter().zip(tape.value(two)) {
            assert!((a - b).abs() < 1e-12);
        }
        for j in 0..5 {
            let t = pb[j] + (0..6).map(|k| hv[2 * 6 + k] * pw[k * 5 + j]).sum::<f64>();
            assert!((tape.value(one)[j] - t).abs() < 1e-12);
        }
        assert!(enc.attention_pool(&mut tape, &store, h, &[]).is_err());
    }

    #[test]
    fn zero_gnn_weights_pool_to_transform_bias() {
        let (enc, mut store) = encoder(5, 10);
        for l in enc.layers.iter().flatten() {
            store.value_mut(*l).fill(0.0);
        }
        store.value_mut(enc.pool_b).copy_from_slice(&[0.1, 0.2, 0.3, 0.4, 0.5]);
        let cells = prepared(20, 11);
        let mut tape = Tape::new();
        let out = enc
            .forward(&mut tape, &store, &cells, 0.5, Mode::Infer, &mut Rng::new(0))
            .unwrap();
        for z in out.z {
            for (a, b) in tape.value(z).iter().zip([0.1, 0.2, 0.3, 0.4, 0.5]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_cell_tile_has_no_edges() {
        let cells = prepared(1, 12);
        let (enc, store) = encoder(5, 13);
        let mut tape = Tape::new();
        let out = enc
            .forward(&mut tape, &store, &cells, 0.5, Mode::Train, &mut Rng::new(0))
            .unwrap();
        assert!(out.edges.iter().all(Vec::is_empty));
    }

    #[test]
    fn node_permutation_leaves_pooled_embeddings_unchanged() {
        let tile = random_tile(30, 5, 64, 14);
        let mut perm: Vec<usize> = (0..30).collect();
        Rng::new(15).shuffle(&mut perm);
        let mut shuffled = tile.clone();
        shuffled.cells = perm.iter().map(|&i| tile.cells[i].clone()).collect();
        let norm = ExpressionNorm::identity(5);
        let (a, b) = (
            PreparedCells::new(&tile, &norm, 3, Some(8)).unwrap(),
            PreparedCells::new(&shuffled, &norm, 3, Some(8)).unwrap(),
        );
        let (enc, store) = encoder(5, 16);
        let run = |c: &PreparedCells| {
            let mut tape = Tape::new();
            let out = enc
                .forward(&mut tape, &store, c, 0.5, Mode::Infer, &mut Rng::new(0))
                .unwrap();
            (out.z.map(|z| tape.value(z).to_vec()), tape.tensor(out.h[2]))
        };
        let ((za, ha), (zb, hb)) = (run(&a), run(&b));
        for (x, y) in za.iter().flatten().zip(zb.iter().flatten()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (new, &old) in perm.iter().enumerate() {
            for (x, y) in ha.row_slice(old).iter().zip(hb.row_slice(new)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn infer_mode_is_deterministic() {
        let cells = prepared(25, 17);
        let (enc, store) = encoder(5, 18);
        let run = |seed| {
            let mut tape = Tape::new();
            let out = enc
                .forward(&mut tape, &store, &cells, 0.5, Mode::Infer, &mut Rng::new(seed))
                .unwrap();
            out.z.map(|z| tape.value(z).to_vec())
        };
        assert_eq!(run(1), run(2));
    }

    #[test]
    fn every_parameter_group_matches_finite_differences() {
        let cells = prepared(20, 19);
        assert!(!cells.candidates[0].is_empty());
        let (enc, mut store) = encoder(5, 20);
        let weights: Vec<f64> = (0..15).map(|i| (i as f64 * 1.3).cos()).collect();
        let loss = |store: &ParamStore| -> (Tape, Var) {
            let mut tape = Tape::new();
            let out = enc
                .forward(&mut tape, store, &cells, 0.5, Mode::Train, &mut Rng::new(21))
                .unwrap();
            let all = tape.concat_rows(&out.z).unwrap();
            let w = tape.constant(Tensor::matrix(3, 5, weights.clone()).unwrap());
            let p = tape.mul(all, w).unwrap();
            let l = tape.sum(p);
            (tape, l)
        };
        let (tape, l) = loss(&store);
        let grads = tape.backward(l).unwrap();
        tape.accumulate_into(&grads, &mut store);
        let scorer_grad: f64 = enc
            .scorer
            .iter()
            .map(|id| store.grad(*id).iter().map(|g| g.abs()).sum::<f64>())
            .sum();
        assert!(scorer_grad > 0.0, "Gumbel relaxation must carry gradient to the scorer");
        for id in store.ids().collect::<Vec<_>>() {
            let analytic = store.grad(id).to_vec();
            let coords: Vec<usize> = (0..analytic.len()).collect();
            let fd = param_finite_diff(&mut store, id, &coords, 1e-5, |s| {
                let (t, l) = loss(s);
                Ok(t.scalar_value(l))
            })
            .unwrap();
            let e = block_rel_err(&analytic, &fd, 1e-8);
            assert!(e < 1e-4, "{}: rel err {e}", store.name(id));
        }
    }

    #[test]
    fn no_graph_encoder_examples() {
        let mut store = ParamStore::new();
        let enc = NoGraphEncoder::new(4, 3, 2, &mut store, &mut Rng::new(0)).unwrap();
        let run = |x: Tensor| {
            let mut tape = Tape::new();
            let (_, z) = enc.forward(&mut tape, &store, &x).unwrap();
            tape.value(z).to_vec()
        };
        // One-hot on gene 2 selects its embedding row, then projects it.
        let got = run(Tensor::matrix(1, 4, vec![0.0, 0.0, 1.0, 0.0]).unwrap());
        let e = store.get(enc.gene_emb).data();
        let (w, b) = (store.get(enc.proj_w).data(), store.get(enc.proj_b).data());
        for j in 0..2 {
            let want = b[j] + (0..3).map(|k| e[2 * 3 + k] * w[k * 2 + j]).sum::<f64>();
            assert!((got[j] - want).abs() < 1e-12);
        }
        let one = run(Tensor::matrix(1, 4, vec![0.5, 1.0, 2.0, 0.1]).unwrap());
        let three = run(Tensor::from_rows(&vec![vec![0.5, 1.0, 2.0, 0.1]; 3]).unwrap());
        for (a, b) in one.iter().zip(&three) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn no_graph_encoder_ignores_gene_order_with_its_table() {
        let mut store = ParamStore::new();
        let enc = NoGraphEncoder::new(4, 3, 2, &mut store, &mut Rng::new(1)).unwrap();
        let x = Tensor::from_rows(&[vec![0.5, 1.0, 2.0, 0.1], vec![1.0, 0.0, 0.3, 0.7]]).unwrap();
        let base = {
            let mut tape = Tape::new();
            let (_, z) = enc.forward(&mut tape, &store, &x).unwrap();
            tape.value(z).to_vec()
        };
        let perm = [2, 0, 3, 1];
        let xp = Tensor::from_rows(
            &(0..2)
                .map(|r| perm.iter().map(|&g| x.row_slice(r)[g]).collect())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let emb = store.get(enc.gene_emb).clone();
        let rows: Vec<Vec<f64>> = perm.iter().map(|&g| emb.row_slice(g).to_vec()).collect();
        store.set(enc.gene_emb, &Tensor::from_rows(&rows).unwrap()).unwrap();
        let mut tape = Tape::new();
        let (_, z) = enc.forward(&mut tape, &store, &xp).unwrap();
        for (a, b) in tape.value(z).iter().zip(&base) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
