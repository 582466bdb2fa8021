//! Per-agent lane sub-graphs and their mean-field augmentation.

use std::collections::BTreeMap;

use crate::autodiff::{canonical_sum, Tensor};
use crate::error::{Error, Result};
use crate::network::RoadNetwork;
use crate::sim::{Simulator, LANE_FEATURES};

pub const EDGE_FEATURES: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct SubGraph {
    pub agent: usize,
    /// Lane ids of the vertices, in vertex order.
    pub lanes: Vec<usize>,
    /// `|N| x d0` vertex features.
    pub features: Tensor,
    /// Directed edges `(j, k)` between local vertex indices.
    pub edges: Vec<(usize, usize)>,
    /// `|E| x 2` edge features aligned with `edges`.
    pub edge_features: Tensor,
    /// Row-major `|N| x |N|` 0/1 adjacency.
    pub adjacency: Vec<u8>,
    pub t: u32,
}

impl SubGraph {
    /// Builds a graph from explicit parts; the adjacency is derived from `edges`.
    pub fn from_parts(
        agent: usize,
        lanes: Vec<usize>,
        features: Tensor,
        edges: Vec<(usize, usize)>,
        edge_features: Tensor,
        t: u32,
    ) -> Result<Self> {
        let n = features.rows();
        if lanes.len() != n {
            return Err(Error::shape("one lane id per vertex expected"));
        }
        if edge_features.rows() != edges.len() {
            return Err(Error::shape("one feature row per edge expected"));
        }
        let mut adjacency = vec![0u8; n * n];
        for &(j, k) in &edges {
            if j >= n || k >= n || j == k {
                return Err(Error::shape(format!("invalid edge ({j}, {k}) for {n} vertices")));
            }
            if adjacency[j * n + k] == 1 {
                return Err(Error::shape(format!("duplicate edge ({j}, {k})")));
            }
            adjacency[j * n + k] = 1;
        }
        Ok(Self {
            agent,
            lanes,
            features,
            edges,
            edge_features,
            adjacency,
            t,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.features.rows()
    }

    /// Plain undirected graph on `n` vertices with constant features.
    pub fn unlabeled(n: usize, undirected: &[(usize, usize)], value: f64) -> Result<Self> {
        let edges: Vec<(usize, usize)> = undirected.to_vec();
        let ef = Tensor::zeros(edges.len(), EDGE_FEATURES);
        Self::from_parts(0, (0..n).collect(), Tensor::filled(n, LANE_FEATURES, value), edges, ef, 0)
    }

    /// Relabels vertices: new vertex `perm[j]` is old vertex `j`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.num_vertices();
        let mut inv = vec![0; n];
        for (old, &new) in perm.iter().enumerate() {
            inv[new] = old;
        }
        let features = self.features.select_rows(&inv);
        let lanes = inv.iter().map(|&o| self.lanes[o]).collect();
        let edges = self.edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
        Self::from_parts(self.agent, lanes, features, edges, self.edge_features.clone(), self.t)
    }
}

/// A sub-graph plus the virtual mean-field vertex, appended as the last vertex.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSubGraph {
    pub base: SubGraph,
    pub mf: Vec<f64>,
}

impl AugmentedSubGraph {
    pub fn num_vertices(&self) -> usize {
        self.base.num_vertices() + 1
    }

    pub fn mf_vertex(&self) -> usize {
        self.base.num_vertices()
    }

    /// Directed edges: the base edges followed by one virtual edge `(j, MF)` per base vertex.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let m = self.mf_vertex();
        let mut e = self.base.edges.clone();
        e.extend((0..m).map(|j| (j, m)));
        e
    }

    pub fn num_edges(&self) -> usize {
        self.base.edges.len() + self.base.num_vertices()
    }

    /// Edge features aligned with [`AugmentedSubGraph::edges`]; virtual edges carry zeros.
    pub fn edge_features(&self) -> Tensor {
        let mut rows = self.base.edge_features.to_rows();
        rows.extend((0..self.base.num_vertices()).map(|_| vec![0.0; EDGE_FEATURES]));
        Tensor::from_rows(&rows).expect("uniform rows")
    }

    /// Vertex features with the MF row appended.
    pub fn features(&self) -> Tensor {
        let mut rows = self.base.features.to_rows();
        rows.push(self.mf.clone());
        Tensor::from_rows(&rows).expect("uniform rows")
    }

    /// Undirected simple-graph view: pairs `(a, b)` with `a < b`, sorted, with
    /// the element-wise maximum of the features of parallel directed edges.
    pub fn undirected(&self) -> (Vec<(usize, usize)>, Tensor) {
        let feats = self.edge_features();
        let mut map: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
        for (k, &(a, b)) in self.edges().iter().enumerate() {
            let key = (a.min(b), a.max(b));
            let row = feats.row(k);
            map.entry(key)
                .and_modify(|r| {
                    for (x, y) in r.iter_mut().zip(row) {
                        *x = x.max(*y);
                    }
                })
                .or_insert_with(|| row.to_vec());
        }
        let pairs: Vec<(usize, usize)> = map.keys().copied().collect();
        let rows: Vec<Vec<f64>> = map.into_values().collect();
        let t = if rows.is_empty() {
            Tensor::zeros(0, EDGE_FEATURES)
        } else {
            Tensor::from_rows(&rows).expect("uniform rows")
        };
        (pairs, t)
    }

    /// Index of each directed edge's undirected pair in [`AugmentedSubGraph::undirected`].
    pub fn directed_to_undirected(&self) -> Vec<usize> {
        let (pairs, _) = self.undirected();
        self.edges()
            .iter()
            .map(|&(a, b)| {
                pairs
                    .binary_search(&(a.min(b), a.max(b)))
                    .expect("pair present")
            })
            .collect()
    }

    /// 0/1 adjacency of the augmented graph, `(N+1) x (N+1)`.
    pub fn adjacency(&self) -> Vec<u8> {
        let n = self.num_vertices();
        let mut a = vec![0u8; n * n];
        for (j, k) in self.edges() {
            a[j * n + k] = 1;
        }
        a
    }
}

/// Lane graph of `agent`: vertex features from the simulator state, one edge
/// per connection between two vertex lanes.
pub fn build_subgraph(net: &RoadNetwork, agent: usize, sim: &Simulator) -> Result<SubGraph> {
    let lanes = net.receptive_field(agent)?;
    let node = &net.intersections[agent];
    let mut local = vec![usize::MAX; net.lanes.len()];
    for (j, &l) in lanes.iter().enumerate() {
        local[l] = j;
    }
    let rows: Vec<Vec<f64>> = lanes
        .iter()
        .map(|&l| {
            if node.incoming.contains(&l) {
                sim.lane_features(l, agent, (1.0, 0.0)).to_vec()
            } else if node.outgoing.contains(&l) {
                sim.lane_features(l, agent, (0.0, 1.0)).to_vec()
            } else {
                let mut r = sim.network_lane_features(l);
                r[5] = 0.0;
                r[6] = 0.0;
                r.to_vec()
            }
        })
        .collect();
    let mut edges = Vec::new();
    let mut efeat = Vec::new();
    for c in &net.connections {
        let (j, k) = (local[c.from], local[c.to]);
        if j == usize::MAX || k == usize::MAX {
            continue;
        }
        edges.push((j, k));
        efeat.push(vec![
            sim.movement_green(c.intersection, c.movement) as u8 as f64,
            sim.phase_progress(c.intersection),
        ]);
    }
    let edge_features = if efeat.is_empty() {
        Tensor::zeros(0, EDGE_FEATURES)
    } else {
        Tensor::from_rows(&efeat)?
    };
    SubGraph::from_parts(agent, lanes, Tensor::from_rows(&rows)?, edges, edge_features, sim.time())
}

pub fn augment_with_mf(g: SubGraph, mf: &[f64]) -> Result<AugmentedSubGraph> {
    if mf.len() != g.features.cols() {
        return Err(Error::shape(format!(
            "mean-field vector has {} components, vertices have {}",
            mf.len(),
            g.features.cols()
        )));
    }
    if g.num_vertices() == 0 {
        return Err(Error::shape("cannot augment an empty graph"));
    }
    Ok(AugmentedSubGraph {
        base: g,
        mf: mf.to_vec(),
    })
}

/// Component-wise mean of feature rows, independent of row order.
pub fn mean_rows(rows: &Tensor) -> Result<Vec<f64>> {
    if rows.rows() == 0 {
        return Err(Error::config("mean over zero vertices"));
    }
    let n = rows.rows() as f64;
    Ok((0..rows.cols())
        .map(|c| {
            let mut col: Vec<f64> = (0..rows.rows()).map(|r| rows.get(r, c)).collect();
            canonical_sum(&mut col) / n
        })
        .collect())
}

/// Network-wide mean lane feature.
pub fn compute_global_mf(all_vertex_features: &Tensor) -> Result<Vec<f64>> {
    mean_rows(all_vertex_features)
}

/// Mean feature over the vertices of one sub-graph.
pub fn compute_local_mf(g: &SubGraph) -> Result<Vec<f64>> {
    mean_rows(&g.features)
}

/// Global MF straight from a simulator state.
pub fn global_mf_of(sim: &Simulator) -> Result<Vec<f64>> {
    let rows: Vec<Vec<f64>> = sim.all_lane_features().iter().map(|r| r.to_vec()).collect();
    compute_global_mf(&Tensor::from_rows(&rows)?)
}
