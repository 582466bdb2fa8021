#![allow(dead_code)]

use rand::seq::SliceRandom;

use toposignal::autodiff::Tensor;
use toposignal::graph::SubGraph;
use toposignal::tgn::TgnState;
use toposignal::topo::{PersistencePair, ESSENTIAL_DEATH};

/// Persistence of the sublevel filtration of a graph by boundary-matrix
/// reduction over Z/2. Edges enter at the larger endpoint value. Returns
/// `(dim, birth, death)` with essential classes dying at `ESSENTIAL_DEATH`.
pub fn oracle_pd(values: &[f64], edges: &[(usize, usize)]) -> Vec<(usize, f64, f64)> {
    let n = values.len();
    // Simplices: vertices then edges, ordered by (value, dimension, index).
    let mut simplices: Vec<(f64, usize, usize)> = (0..n).map(|v| (values[v], 0, v)).collect();
    for (e, &(a, b)) in edges.iter().enumerate() {
        simplices.push((values[a].max(values[b]), 1, e));
    }
    simplices.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut pos_of_vertex = vec![0; n];
    for (k, s) in simplices.iter().enumerate() {
        if s.1 == 0 {
            pos_of_vertex[s.2] = k;
        }
    }
    let m = simplices.len();
    let mut columns: Vec<Vec<usize>> = simplices
        .iter()
        .map(|s| {
            if s.1 == 0 {
                Vec::new()
            } else {
                let (a, b) = edges[s.2];
                let mut c = vec![pos_of_vertex[a], pos_of_vertex[b]];
                c.sort_unstable();
                c
            }
        })
        .collect();
    let mut owner_of_low: Vec<Option<usize>> = vec![None; m];
    let mut paired = vec![false; m];
    let mut out = Vec::new();
    for j in 0..m {
        while let Some(&low) = columns[j].last() {
            match owner_of_low[low] {
                Some(k) => {
                    let other = columns[k].clone();
                    columns[j] = symmetric_difference(&columns[j], &other);
                }
                None => break,
            }
        }
        if let Some(&low) = columns[j].last() {
            owner_of_low[low] = Some(j);
            paired[low] = true;
            paired[j] = true;
            out.push((0, simplices[low].0, simplices[j].0));
        }
    }
    for j in 0..m {
        if !paired[j] {
            out.push((simplices[j].1, simplices[j].0, ESSENTIAL_DEATH));
        }
    }
    out
}

fn symmetric_difference(a: &[usize], b: &[usize]) -> Vec<usize> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::with_capacity(a.len() + b.len());
    while i < a.len() || j < b.len() {
        if j == b.len() || (i < a.len() && a[i] < b[j]) {
            out.push(a[i]);
            i += 1;
        } else if i == a.len() || b[j] < a[i] {
            out.push(b[j]);
            j += 1;
        } else {
            i += 1;
            j += 1;
        }
    }
    out
}

/// Sorted `(dim, birth, death)` triples for multiset comparison.
pub fn canonical(mut v: Vec<(usize, f64, f64)>) -> Vec<(usize, u64, u64)> {
    v.sort_by(|x, y| x.0.cmp(&y.0).then(x.1.total_cmp(&y.1)).then(x.2.total_cmp(&y.2)));
    v.into_iter().map(|(d, b, e)| (d, b.to_bits(), e.to_bits())).collect()
}

pub fn implementation_pd(values: &[f64], edges: &[(usize, usize)]) -> Vec<(usize, f64, f64)> {
    let p0 = toposignal::topo::compute_pd0(values, edges).unwrap();
    let p1 = toposignal::topo::compute_pd1(values, edges).unwrap();
    let tag = |d: usize, ps: Vec<PersistencePair>| ps.into_iter().map(move |p| (d, p.birth, p.death));
    tag(0, p0).chain(tag(1, p1)).collect()
}

/// Every connected simple graph on `n` labelled vertices.
pub fn connected_graphs(n: usize) -> Vec<Vec<(usize, usize)>> {
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
    let mut out = Vec::new();
    for mask in 0u32..(1 << pairs.len()) {
        let edges: Vec<(usize, usize)> = pairs
            .iter()
            .enumerate()
            .filter(|(k, _)| mask >> k & 1 == 1)
            .map(|(_, &e)| e)
            .collect();
        if toposignal::topo::components(n, &edges) == 1 {
            out.push(edges);
        }
    }
    out
}

/// Relabels vertices and shuffles the edge list order.
pub fn relabel<R: rand::Rng>(g: &SubGraph, rng: &mut R) -> (SubGraph, Vec<usize>) {
    let n = g.num_vertices();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let p = g.permuted(&perm).unwrap();
    let mut order: Vec<usize> = (0..p.edges.len()).collect();
    order.shuffle(rng);
    let edges = order.iter().map(|&k| p.edges[k]).collect();
    let ef = p.edge_features.select_rows(&order);
    let g2 = SubGraph::from_parts(p.agent, p.lanes.clone(), p.features.clone(), edges, ef, p.t).unwrap();
    (g2, perm)
}

/// Moves state rows along with the vertices; the mean-field row stays last.
pub fn permute_state(s: &TgnState, perm: &[usize]) -> TgnState {
    let n = perm.len();
    let mut inv: Vec<usize> = vec![0; n + 1];
    for (old, &new) in perm.iter().enumerate() {
        inv[new] = old;
    }
    inv[n] = n;
    TgnState {
        memory: s.memory.select_rows(&inv),
        prediction: s.prediction.select_rows(&inv),
    }
}

pub fn random_state<R: rand::Rng>(n: usize, d: usize, rng: &mut R) -> TgnState {
    let mut t = || Tensor::new(n, d, (0..n * d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap();
    TgnState {
        memory: t(),
        prediction: t(),
    }
}

/// Scenario shipped with the crate.
pub fn scenario(name: &str) -> std::sync::Arc<toposignal::network::RoadNetwork> {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name);
    std::sync::Arc::new(toposignal::network::RoadNetwork::load(&path).unwrap())
}
