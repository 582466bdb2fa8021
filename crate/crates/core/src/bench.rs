//! Expressiveness experiments: 1-WL refinement, diagram equality, routing
//! rank conditions and the full-vs-pooled separation margin.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParameterStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::{SubGraph, EDGE_FEATURES};
use crate::sim::LANE_FEATURES;
use crate::tgn::{ModelConfig, TgnModel, TgnState, TopoMode};
use crate::topo::{components, cycle_attributions, persistence, PersistencePair};

/// Simple undirected graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
}

impl Graph {
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for &(a, b) in edges {
            if a >= n || b >= n || a == b {
                return Err(Error::shape(format!("bad edge ({a}, {b}) for {n} vertices")));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::shape(format!("duplicate edge ({a}, {b})")));
            }
        }
        Ok(Self { n, edges: edges.to_vec() })
    }

    pub fn cycle(n: usize) -> Self {
        Self {
            n,
            edges: (0..n).map(|i| (i, (i + 1) % n)).collect(),
        }
    }

    pub fn path(n: usize) -> Self {
        Self {
            n,
            edges: (1..n).map(|i| (i - 1, i)).collect(),
        }
    }

    pub fn disjoint_union(&self, other: &Graph) -> Self {
        let mut edges = self.edges.clone();
        edges.extend(other.edges.iter().map(|&(a, b)| (a + self.n, b + self.n)));
        Self { n: self.n + other.n, edges }
    }

    pub fn relabeled(&self, perm: &[usize]) -> Self {
        Self {
            n: self.n,
            edges: self.edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect(),
        }
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.n];
        for &(a, b) in &self.edges {
            d[a] += 1;
            d[b] += 1;
        }
        d
    }

    fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    pub fn is_connected(&self) -> bool {
        self.n > 0 && components(self.n, &self.edges) == 1
    }

    /// Lane-graph form with constant vertex features and directed edges both ways.
    pub fn to_subgraph(&self, value: f64) -> Result<SubGraph> {
        let mut directed = Vec::with_capacity(2 * self.edges.len());
        for &(a, b) in &self.edges {
            directed.push((a, b));
            directed.push((b, a));
        }
        SubGraph::from_parts(
            0,
            (0..self.n).collect(),
            Tensor::filled(self.n, LANE_FEATURES, value),
            directed.clone(),
            Tensor::zeros(directed.len(), EDGE_FEATURES),
            0,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphPair {
    pub a: Graph,
    pub b: Graph,
    pub tag: String,
}

/// Sorted `(color, count)` histogram.
pub type Histogram = Vec<(usize, usize)>;

#[derive(Clone, Debug, PartialEq)]
pub struct WlResult {
    /// Histograms of both graphs after each refinement round.
    pub rounds: Vec<(Histogram, Histogram)>,
    pub distinguishable: bool,
    /// Round at which the histograms first differ.
    pub first_divergence: Option<usize>,
}

fn histogram(colors: &[usize]) -> Histogram {
    let mut h = BTreeMap::new();
    for &c in colors {
        *h.entry(c).or_insert(0) += 1;
    }
    h.into_iter().collect()
}

/// Color refinement run jointly on both graphs with one shared dictionary.
/// Round 0 is the first refinement of the uniform initial coloring.
pub fn wl_test(g1: &Graph, g2: &Graph, max_iters: usize) -> WlResult {
    let adj = [g1.neighbors(), g2.neighbors()];
    let mut colors = [vec![0usize; g1.n], vec![0usize; g2.n]];
    let limit = max_iters.min(g1.n.max(g2.n)).max(1);
    let mut rounds = Vec::new();
    let mut first = None;
    let mut classes = 1;
    for round in 0..limit {
        let mut dict: BTreeMap<(usize, Vec<usize>), usize> = BTreeMap::new();
        let signatures: Vec<Vec<(usize, Vec<usize>)>> = (0..2)
            .map(|g| {
                (0..colors[g].len())
                    .map(|v| {
                        let mut m: Vec<usize> = adj[g][v].iter().map(|&u| colors[g][u]).collect();
                        m.sort_unstable();
                        (colors[g][v], m)
                    })
                    .collect()
            })
            .collect();
        for s in signatures.iter().flatten() {
            let next = dict.len();
            dict.entry(s.clone()).or_insert(next);
        }
        for g in 0..2 {
            colors[g] = signatures[g].iter().map(|s| dict[s]).collect();
        }
        let (h1, h2) = (histogram(&colors[0]), histogram(&colors[1]));
        if first.is_none() && h1 != h2 {
            first = Some(round);
        }
        rounds.push((h1, h2));
        if dict.len() == classes && round > 0 {
            break;
        }
        classes = dict.len();
    }
    WlResult {
        rounds,
        distinguishable: first.is_some(),
        first_divergence: first,
    }
}

fn sorted_pairs(mut d: Vec<PersistencePair>) -> Vec<(u64, u64, bool)> {
    let mut keys: Vec<(u64, u64, bool)> = d
        .drain(..)
        .map(|p| (p.birth.to_bits(), p.death.to_bits(), p.essential))
        .collect();
    keys.sort_unstable();
    keys
}

/// Multiset equality of both diagrams under the given vertex values.
pub fn diagrams_equal(g1: &Graph, f1: &[f64], g2: &Graph, f2: &[f64]) -> Result<bool> {
    let p1 = persistence(f1, &g1.edges)?;
    let p2 = persistence(f2, &g2.edges)?;
    Ok(sorted_pairs(p1.diagram0(f1)) == sorted_pairs(p2.diagram0(f2))
        && sorted_pairs(p1.diagram1(f1)) == sorted_pairs(p2.diagram1(f2)))
}

/// Diagram equality under the constant filtration `value`.
pub fn pd_equal(g1: &Graph, g2: &Graph, value: f64) -> Result<bool> {
    diagrams_equal(g1, &vec![value; g1.n], g2, &vec![value; g2.n])
}

fn attribution_histogram(g: &Graph) -> Result<Vec<usize>> {
    let p = persistence(&vec![0.0; g.n], &g.edges)?;
    let mut a = cycle_attributions(g.n, &p);
    a.sort_unstable();
    Ok(a)
}

/// Triangle with a 3-vertex tail against a square with a 2-vertex tail.
pub fn canonical_pair() -> GraphPair {
    GraphPair {
        a: Graph {
            n: 6,
            edges: vec![(0, 1), (1, 2), (2, 0), (2, 3), (3, 4), (4, 5)],
        },
        b: Graph {
            n: 6,
            edges: vec![(0, 1), (1, 2), (2, 3), (3, 0), (3, 4), (4, 5)],
        },
        tag: "c3+tail3 / c4+tail2".into(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairVerification {
    pub connected: bool,
    pub equal_degrees: bool,
    pub pd_equal: bool,
    pub wl_distinguishable: bool,
    /// Number of vertices on some cycle, per graph.
    pub cycle_vertices: (usize, usize),
}

impl PairVerification {
    pub fn holds(&self) -> bool {
        self.connected
            && self.equal_degrees
            && self.pd_equal
            && self.wl_distinguishable
            && self.cycle_vertices.0 != self.cycle_vertices.1
    }
}

pub fn verify_pair(pair: &GraphPair) -> Result<PairVerification> {
    let mut da = pair.a.degrees();
    let mut db = pair.b.degrees();
    da.sort_unstable();
    db.sort_unstable();
    let on_cycle = |g: &Graph| -> Result<usize> { Ok(attribution_histogram(g)?.iter().filter(|&&c| c > 0).count()) };
    Ok(PairVerification {
        connected: pair.a.is_connected() && pair.b.is_connected(),
        equal_degrees: da == db,
        pd_equal: pd_equal(&pair.a, &pair.b, 0.0)?,
        wl_distinguishable: wl_test(&pair.a, &pair.b, pair.a.n.max(pair.b.n)).distinguishable,
        cycle_vertices: (on_cycle(&pair.a)?, on_cycle(&pair.b)?),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankCondition {
    pub rank: usize,
    pub augmented_rank: usize,
    pub d1: usize,
}

impl RankCondition {
    pub fn holds(&self) -> bool {
        self.rank == self.d1 && self.augmented_rank == self.d1 + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InjectivityReport {
    /// One entry per layer: (routing, merge).
    pub layers: Vec<(RankCondition, RankCondition)>,
}

impl InjectivityReport {
    pub fn holds(&self) -> bool {
        self.layers.iter().all(|(a, b)| a.holds() && b.holds())
    }
}

/// Rank by singular values above `1e-8 · σ_max`.
pub fn numerical_rank(m: &Tensor) -> usize {
    if m.len() == 0 {
        return 0;
    }
    let dm = DMatrix::from_row_slice(m.rows(), m.cols(), m.data());
    let sv = dm.singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > 1e-8 * max).count()
}

/// Tiles a `d1 x P` matrix over `heads`, giving the `d1 x (H·P)` broadcast form.
pub fn tile_heads(w: &Tensor, heads: usize) -> Tensor {
    let (r, p) = w.shape();
    let mut out = Tensor::zeros(r, heads * p);
    for i in 0..r {
        for h in 0..heads {
            for c in 0..p {
                out.set(i, h * p + c, w.get(i, c));
            }
        }
    }
    out
}

/// `rank(W̃) = d1` and `rank([W̃; 1]) = d1 + 1` for a `d1 x (H·P)` matrix,
/// the ones vector being appended as an extra row.
pub fn rank_condition(w_tilde: &Tensor) -> RankCondition {
    let (d1, cols) = w_tilde.shape();
    let mut rows = w_tilde.to_rows();
    rows.push(vec![1.0; cols]);
    let aug = Tensor::from_rows(&rows).expect("uniform rows");
    RankCondition {
        rank: numerical_rank(w_tilde),
        augmented_rank: numerical_rank(&aug),
        d1,
    }
}

/// Checks both rank conditions on every layer's routing and merge matrices.
pub fn injectivity_check(model: &TgnModel, store: &ParameterStore) -> Result<InjectivityReport> {
    let c = &model.config;
    if c.d1 > c.heads * c.experts {
        return Err(Error::contract(format!(
            "d1 = {} exceeds H·P = {}",
            c.d1,
            c.heads * c.experts
        )));
    }
    let layers = model
        .layers
        .iter()
        .map(|l| {
            (
                rank_condition(&tile_heads(store.tensor(l.route), c.heads)),
                rank_condition(&tile_heads(store.tensor(l.merge), c.heads)),
            )
        })
        .collect();
    Ok(InjectivityReport { layers })
}

/// Observation of a static graph after one step from the initial state.
pub fn observe_static(
    model: &TgnModel,
    store: &ParameterStore,
    g: &Graph,
    value: f64,
    mode: TopoMode,
) -> Result<Vec<f64>> {
    let sg = g.to_subgraph(value)?;
    let mf = vec![value; LANE_FEATURES];
    let state = TgnState::initial(&sg, &mf)?;
    let mut tape = Tape::new(store);
    let out = model.forward(&mut tape, &sg, &mf, &state, mode)?;
    Ok(tape.value(out.observation).data().to_vec())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Margins {
    pub full: f64,
    pub pooled: f64,
}

/// `‖o_A − o_B‖₂` for the full model and the pooled-signature control.
pub fn distinguish(model: &TgnModel, store: &ParameterStore, pair: &GraphPair, value: f64) -> Result<Margins> {
    let dist = |mode| -> Result<f64> {
        let a = observe_static(model, store, &pair.a, value, mode)?;
        let b = observe_static(model, store, &pair.b, value, mode)?;
        Ok(a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
    };
    Ok(Margins {
        full: dist(TopoMode::Local)?,
        pooled: dist(TopoMode::Pooled)?,
    })
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct BenchRow {
    pub seed: u64,
    pub margin_full: f64,
    pub margin_ablated: f64,
    pub wl_distinguishable: bool,
    pub pd_equal: bool,
}

/// The separation experiment on the canonical pair over `seeds` initializations.
pub fn run_bench(config: &ModelConfig, seeds: u64, value: f64) -> Result<Vec<BenchRow>> {
    let pair = canonical_pair();
    let v = verify_pair(&pair)?;
    (0..seeds)
        .map(|seed| {
            let mut store = ParameterStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = TgnModel::new(&mut store, config.clone(), &mut rng)?;
            let m = distinguish(&model, &store, &pair, value)?;
            Ok(BenchRow {
                seed,
                margin_full: m.full,
                margin_ablated: m.pooled,
                wl_distinguishable: v.wl_distinguishable,
                pd_equal: v.pd_equal,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wl_blind_spot_and_degrees() {
        let c6 = Graph::cycle(6);
        let two_c3 = Graph::cycle(3).disjoint_union(&Graph::cycle(3));
        assert!(!wl_test(&c6, &two_c3, 6).distinguishable);
        let pendant = Graph::new(4, &[(0, 1), (1, 2), (2, 0), (2, 3)]).unwrap();
        let r = wl_test(&pendant, &Graph::path(4), 4);
        assert_eq!(r.first_divergence, Some(0));
    }

    #[test]
    fn canonical_pair_verifies() {
        let v = verify_pair(&canonical_pair()).unwrap();
        assert!(v.holds(), "{v:?}");
        assert_eq!(v.cycle_vertices, (3, 4));
        assert!(!pd_equal(&Graph::path(4), &Graph::cycle(4), 0.0).unwrap());
    }

    #[test]
    fn rank_violations_are_flagged() {
        let mut w = Tensor::zeros(3, 4);
        for (i, v) in [1.0, 2.0, 0.5, -1.0, 0.3, 0.7, 2.0, 1.0, -0.4, 0.0, 1.5, 0.2].iter().enumerate() {
            w.data_mut()[i] = *v;
        }
        assert!(rank_condition(&tile_heads(&w, 2)).holds());
        let mut dup = w.clone();
        for c in 0..4 {
            dup.set(2, c, w.get(0, c));
        }
        assert!(!rank_condition(&dup).holds());
        let mut ones = w.clone();
        for c in 0..4 {
            ones.set(1, c, 1.0);
        }
        let r = rank_condition(&ones);
        assert_eq!(r.rank, 3);
        assert!(!r.holds());
    }
}
