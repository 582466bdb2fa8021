//! Persistent homology on lane graphs and its learnable vectorization.
//!
//! Vertices enter the filtration at their own value and edges at the larger
//! endpoint value. Zero-dimensional pairs come from union-find under the elder
//! rule; every edge that closes a cycle opens a one-dimensional class that
//! never dies. Essential classes are capped at death 1.0, the top of the
//! logistic range of the filtration functions.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Axis, Decision, Linear, ParamId, ParameterStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const ESSENTIAL_DEATH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Creator {
    Vertex(usize),
    Edge(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PersistencePair {
    pub birth: f64,
    pub death: f64,
    pub creator: Creator,
    pub essential: bool,
}

/// Killing edge of a finite zero-dimensional pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Killer {
    pub edge: usize,
    /// Endpoint carrying the edge value.
    pub vertex: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair0 {
    pub birth_vertex: usize,
    pub killer: Option<Killer>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair1 {
    pub edge: usize,
    /// Endpoint carrying the edge value.
    pub vertex: usize,
    /// Vertices of the cycle closed by the edge (sorted).
    pub cycle: Vec<usize>,
}

/// The combinatorial pairing of one filtration, independent of the values it
/// was computed from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Persistence {
    /// One entry per vertex, ordered by vertex id.
    pub dim0: Vec<Pair0>,
    pub dim1: Vec<Pair1>,
}

fn vertex_key(values: &[f64], v: usize) -> (f64, usize) {
    (values[v], v)
}

fn older(values: &[f64], a: usize, b: usize) -> bool {
    let (va, ia) = vertex_key(values, a);
    let (vb, ib) = vertex_key(values, b);
    va < vb || (va == vb && ia < ib)
}

/// Simplex order of the edges: by edge value, then the smaller endpoint value, then index.
pub fn edge_order(values: &[f64], edges: &[(usize, usize)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..edges.len()).collect();
    order.sort_by(|&x, &y| {
        let (a, b) = edges[x];
        let (c, d) = edges[y];
        let kx = (values[a].max(values[b]), values[a].min(values[b]));
        let ky = (values[c].max(values[d]), values[c].min(values[d]));
        kx.0.total_cmp(&ky.0)
            .then(kx.1.total_cmp(&ky.1))
            .then(x.cmp(&y))
    });
    order
}

struct UnionFind {
    parent: Vec<usize>,
    /// Oldest vertex of each root's component.
    oldest: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            oldest: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }
}

fn tree_path(adj: &[Vec<usize>], from: usize, to: usize, prev: &mut [usize], queue: &mut VecDeque<usize>) -> Vec<usize> {
    prev.fill(usize::MAX);
    queue.clear();
    queue.push_back(from);
    prev[from] = from;
    while let Some(x) = queue.pop_front() {
        if x == to {
            break;
        }
        for &y in &adj[x] {
            if prev[y] == usize::MAX {
                prev[y] = x;
                queue.push_back(y);
            }
        }
    }
    let mut path = vec![to];
    let mut x = to;
    while x != from {
        x = prev[x];
        path.push(x);
    }
    path.sort_unstable();
    path
}

/// Pairing of the sub-level filtration given by `values` on an undirected
/// simple graph.
pub fn persistence(values: &[f64], edges: &[(usize, usize)]) -> Result<Persistence> {
    let n = values.len();
    for &(a, b) in edges {
        if a >= n || b >= n || a == b {
            return Err(Error::shape(format!("edge ({a}, {b}) invalid for {n} vertices")));
        }
    }
    let mut uf = UnionFind::new(n);
    let mut dim0: Vec<Pair0> = (0..n)
        .map(|v| Pair0 {
            birth_vertex: v,
            killer: None,
        })
        .collect();
    let mut dim1 = Vec::new();
    let mut forest = vec![Vec::new(); n];
    let mut prev = vec![usize::MAX; n];
    let mut queue = VecDeque::with_capacity(n);
    for e in edge_order(values, edges) {
        let (a, b) = edges[e];
        let top = if older(values, a, b) { b } else { a };
        let (ra, rb) = (uf.find(a), uf.find(b));
        if ra == rb {
            dim1.push(Pair1 {
                edge: e,
                vertex: top,
                cycle: tree_path(&forest, a, b, &mut prev, &mut queue),
            });
            continue;
        }
        let (oa, ob) = (uf.oldest[ra], uf.oldest[rb]);
        let (elder_root, young_root, young) = if older(values, oa, ob) {
            (ra, rb, ob)
        } else {
            (rb, ra, oa)
        };
        dim0[young].killer = Some(Killer { edge: e, vertex: top });
        uf.parent[young_root] = elder_root;
        forest[a].push(b);
        forest[b].push(a);
    }
    Ok(Persistence { dim0, dim1 })
}

impl Persistence {
    pub fn diagram0(&self, values: &[f64]) -> Vec<PersistencePair> {
        self.dim0
            .iter()
            .map(|p| PersistencePair {
                birth: values[p.birth_vertex],
                death: p.killer.map_or(ESSENTIAL_DEATH, |k| values[k.vertex]),
                creator: Creator::Vertex(p.birth_vertex),
                essential: p.killer.is_none(),
            })
            .collect()
    }

    pub fn diagram1(&self, values: &[f64]) -> Vec<PersistencePair> {
        self.dim1
            .iter()
            .map(|p| PersistencePair {
                birth: values[p.vertex],
                death: ESSENTIAL_DEATH,
                creator: Creator::Edge(p.edge),
                essential: true,
            })
            .collect()
    }
}

pub fn compute_pd0(values: &[f64], edges: &[(usize, usize)]) -> Result<Vec<PersistencePair>> {
    Ok(persistence(values, edges)?.diagram0(values))
}

pub fn compute_pd1(values: &[f64], edges: &[(usize, usize)]) -> Result<Vec<PersistencePair>> {
    Ok(persistence(values, edges)?.diagram1(values))
}

/// Number of connected components.
pub fn components(n: usize, edges: &[(usize, usize)]) -> usize {
    let mut uf = UnionFind::new(n);
    let mut count = n;
    for &(a, b) in edges {
        let (ra, rb) = (uf.find(a), uf.find(b));
        if ra != rb {
            uf.parent[ra] = rb;
            count -= 1;
        }
    }
    count
}

// ---- scalar embedding functions -----------------------------------------

pub fn embed_triangle(p: (f64, f64), t: &[f64]) -> Vec<f64> {
    t.iter().map(|&ti| (p.1 - (ti - p.0).abs()).max(0.0)).collect()
}

pub fn embed_gaussian(p: (f64, f64), centers: &[(f64, f64)], sigma: f64) -> Vec<f64> {
    centers
        .iter()
        .map(|c| {
            let d2 = (p.0 - c.0).powi(2) + (p.1 - c.1).powi(2);
            (-d2 / (2.0 * sigma * sigma)).exp()
        })
        .collect()
}

pub fn embed_line(p: (f64, f64), lines: &[((f64, f64), f64)]) -> Vec<f64> {
    lines.iter().map(|&(e, b)| p.0 * e.0 + p.1 * e.1 + b).collect()
}

pub fn embed_rational_hat(p: (f64, f64), mu: (f64, f64), r: f64, q_norm: f64) -> f64 {
    let n = ((p.0 - mu.0).abs().powf(q_norm) + (p.1 - mu.1).abs().powf(q_norm)).powf(1.0 / q_norm);
    1.0 / (1.0 + n) - 1.0 / (1.0 + (r - n).abs())
}

// ---- learnable signature -------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct TopoConfig {
    /// Number of filtration functions.
    pub filtrations: usize,
    /// Sample points / lines / centers per embedding.
    pub q: usize,
    pub out_dim: usize,
    pub sigma: f64,
}

impl Default for TopoConfig {
    fn default() -> Self {
        Self {
            filtrations: 12,
            q: 4,
            out_dim: 7,
            sigma: 0.5,
        }
    }
}

impl TopoConfig {
    /// Width of one pair's embedding (four transforms).
    pub fn pair_width(&self) -> usize {
        4 * self.q
    }

    /// Width of the raw concatenated signature.
    pub fn raw_width(&self) -> usize {
        self.filtrations * 2 * self.pair_width()
    }
}

#[derive(Clone, Debug)]
pub struct EmbedParams {
    pub tri_t: ParamId,
    pub gauss_c: ParamId,
    pub line_e: ParamId,
    pub line_b: ParamId,
    pub hat_mu: ParamId,
    pub hat_r: ParamId,
}

impl EmbedParams {
    fn new<R: Rng>(store: &mut ParameterStore, name: &str, q: usize, rng: &mut R) -> Result<Self> {
        let mut uni = |lo: f64, hi: f64, r: usize| {
            Tensor::new(r, q, (0..r * q).map(|_| rng.random_range(lo..hi)).collect())
        };
        Ok(Self {
            tri_t: store.add(format!("{name}.tri_t"), uni(0.0, 1.0, 1)?)?,
            gauss_c: store.add(format!("{name}.gauss_c"), uni(0.0, 1.0, 2)?)?,
            line_e: store.add(format!("{name}.line_e"), uni(-1.0, 1.0, 2)?)?,
            line_b: store.add_zeros(format!("{name}.line_b"), 1, q)?,
            hat_mu: store.add(format!("{name}.hat_mu"), uni(0.0, 1.0, 2)?)?,
            hat_r: store.add(format!("{name}.hat_r"), uni(0.2, 0.8, 1)?)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TopoLayer {
    pub config: TopoConfig,
    pub filt_w: ParamId,
    pub filt_b: ParamId,
    /// Embedding parameters for dimension 0 and dimension 1.
    pub embed: [EmbedParams; 2],
    pub vertex_proj: Linear,
    pub edge_proj: Linear,
}

/// Frozen pairings of every filtration of one graph.
#[derive(Debug)]
pub struct PairingPlan {
    pub per_filtration: Vec<Persistence>,
}

impl TopoLayer {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        name: &str,
        input_dim: usize,
        config: TopoConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let u = config.filtrations;
        let filt_w = store.add_glorot(format!("{name}.filt.w"), input_dim, u, rng)?;
        let filt_b = store.add_zeros(format!("{name}.filt.b"), 1, u)?;
        let embed = [
            EmbedParams::new(store, &format!("{name}.emb0"), config.q, rng)?,
            EmbedParams::new(store, &format!("{name}.emb1"), config.q, rng)?,
        ];
        let raw = config.raw_width();
        let vertex_proj = Linear::new(store, &format!("{name}.vproj"), raw, config.out_dim, rng)?;
        let edge_proj = Linear::new(store, &format!("{name}.eproj"), raw, config.out_dim, rng)?;
        Ok(Self {
            config,
            filt_w,
            filt_b,
            embed,
            vertex_proj,
            edge_proj,
        })
    }

    /// `N x U` filtration values `σ(x W + b)`.
    pub fn filtration(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.filt_w);
        let b = tape.param(self.filt_b);
        let z = tape.affine(x, w, b)?;
        Ok(tape.sigmoid(z))
    }

    /// Pairings of every filtration; recorded on the tape so replays reuse them.
    pub fn plan(&self, tape: &mut Tape, f: Var, edges: &[(usize, usize)]) -> Result<Arc<PairingPlan>> {
        let fv = tape.value(f).clone();
        let mut failure = None;
        let d = tape.decide(|| {
            let mut per = Vec::with_capacity(fv.cols());
            for u in 0..fv.cols() {
                let col: Vec<f64> = (0..fv.rows()).map(|j| fv.get(j, u)).collect();
                match persistence(&col, edges) {
                    Ok(p) => per.push(p),
                    Err(e) => {
                        failure = Some(e);
                        break;
                    }
                }
            }
            Decision::Opaque(Arc::new(PairingPlan { per_filtration: per }))
        });
        if let Some(e) = failure {
            return Err(e);
        }
        match d {
            Decision::Opaque(any) => any
                .downcast::<PairingPlan>()
                .map_err(|_| Error::contract("decision log holds no pairing plan here")),
            _ => Err(Error::contract("decision log holds no pairing plan here")),
        }
    }

    /// Embeds the pairs `(births, deaths)` (both `P x 1`) into `P x 4q`.
    pub fn embed_pairs(&self, tape: &mut Tape, births: Var, deaths: Var, dim: usize) -> Result<Var> {
        let p = &self.embed[dim];
        let q = self.config.q;
        let pts = tape.concat_cols(&[births, deaths])?;

        let t = tape.param(p.tri_t);
        let diff = tape.sub(t, births)?;
        let ad = tape.abs(diff);
        let tri = tape.sub(deaths, ad)?;
        let tri = tape.relu(tri);

        let c = tape.param(p.gauss_c);
        let cx = tape.slice_rows(c, 0, 1)?;
        let cy = tape.slice_rows(c, 1, 1)?;
        let dx = tape.sub(births, cx)?;
        let dy = tape.sub(deaths, cy)?;
        let dx2 = tape.square(dx);
        let dy2 = tape.square(dy);
        let d2 = tape.add(dx2, dy2)?;
        let s = self.config.sigma;
        let g = tape.scale(d2, -1.0 / (2.0 * s * s));
        let gauss = tape.exp(g);

        let e = tape.param(p.line_e);
        let lb = tape.param(p.line_b);
        let line = tape.affine(pts, e, lb)?;

        let mu = tape.param(p.hat_mu);
        let mx = tape.slice_rows(mu, 0, 1)?;
        let my = tape.slice_rows(mu, 1, 1)?;
        let hx = tape.sub(births, mx)?;
        let hy = tape.sub(deaths, my)?;
        let hx2 = tape.square(hx);
        let hy2 = tape.square(hy);
        let h2 = tape.add(hx2, hy2)?;
        let norm = tape.sqrt(h2);
        let one_plus = tape.add_scalar(norm, 1.0);
        let first = tape.recip(one_plus);
        let r = tape.param(p.hat_r);
        let rn = tape.sub(r, norm)?;
        let rn = tape.abs(rn);
        let rn = tape.add_scalar(rn, 1.0);
        let second = tape.recip(rn);
        let hat = tape.sub(first, second)?;

        let out = tape.concat_cols(&[tri, gauss, line, hat])?;
        debug_assert_eq!(tape.shape(out).1, 4 * q);
        Ok(out)
    }

    /// Raw per-vertex signature (`N x raw_width`) together with the plan.
    pub fn raw_vertex_signature(
        &self,
        tape: &mut Tape,
        x: Var,
        edges: &[(usize, usize)],
    ) -> Result<(Var, Arc<PairingPlan>, Var)> {
        let n = tape.shape(x).0;
        let u_count = self.config.filtrations;
        let f = self.filtration(tape, x)?;
        let plan = self.plan(tape, f, edges)?;
        let w = self.config.pair_width();
        let cols = self.config.raw_width();

        let mut b0 = Vec::new();
        let mut d0 = Vec::new();
        let mut place0 = Vec::new();
        let mut b1 = Vec::new();
        let mut place1 = Vec::new();
        for (u, pers) in plan.per_filtration.iter().enumerate() {
            for p in &pers.dim0 {
                place0.push((b0.len(), p.birth_vertex, u * 2 * w));
                b0.push(Some(p.birth_vertex * u_count + u));
                d0.push(p.killer.map(|k| k.vertex * u_count + u));
            }
            for p in &pers.dim1 {
                for &v in &p.cycle {
                    place1.push((b1.len(), v, u * 2 * w + w));
                }
                b1.push(Some(p.vertex * u_count + u));
            }
        }
        let mut blocks = Vec::new();
        if !b0.is_empty() {
            let births = tape.gather_elems(f, &b0, 0.0, b0.len(), 1)?;
            let deaths = tape.gather_elems(f, &d0, ESSENTIAL_DEATH, d0.len(), 1)?;
            let e0 = self.embed_pairs(tape, births, deaths, 0)?;
            blocks.push(tape.place_blocks(e0, &place0, n, cols)?);
        }
        if !b1.is_empty() {
            let births = tape.gather_elems(f, &b1, 0.0, b1.len(), 1)?;
            let deaths = tape.constant(Tensor::filled(b1.len(), 1, ESSENTIAL_DEATH));
            let e1 = self.embed_pairs(tape, births, deaths, 1)?;
            blocks.push(tape.place_blocks(e1, &place1, n, cols)?);
        }
        let raw = match blocks.len() {
            0 => tape.constant(Tensor::zeros(n, cols)),
            1 => blocks[0],
            _ => tape.add(blocks[0], blocks[1])?,
        };
        Ok((raw, plan, f))
    }

    /// Vertex signature `T_v` (`N x d1`).
    pub fn vertex_signature(&self, tape: &mut Tape, x: Var, edges: &[(usize, usize)]) -> Result<Var> {
        let (raw, _, _) = self.raw_vertex_signature(tape, x, edges)?;
        let z = self.vertex_proj.forward(tape, raw)?;
        Ok(tape.tanh(z))
    }

    /// Edge signature `T_e` (one row per entry of `edges`): the zero-dimensional
    /// pair the edge kills and the cycle it closes.
    pub fn edge_signature(&self, tape: &mut Tape, x: Var, edges: &[(usize, usize)]) -> Result<Var> {
        let u_count = self.config.filtrations;
        let m = edges.len();
        let f = self.filtration(tape, x)?;
        let plan = self.plan(tape, f, edges)?;
        let w = self.config.pair_width();
        let cols = self.config.raw_width();
        let (mut b0, mut d0, mut place0) = (Vec::new(), Vec::new(), Vec::new());
        let (mut b1, mut place1) = (Vec::new(), Vec::new());
        for (u, pers) in plan.per_filtration.iter().enumerate() {
            for p in &pers.dim0 {
                if let Some(k) = p.killer {
                    place0.push((b0.len(), k.edge, u * 2 * w));
                    b0.push(Some(p.birth_vertex * u_count + u));
                    d0.push(Some(k.vertex * u_count + u));
                }
            }
            for p in &pers.dim1 {
                place1.push((b1.len(), p.edge, u * 2 * w + w));
                b1.push(Some(p.vertex * u_count + u));
            }
        }
        let mut raw = tape.constant(Tensor::zeros(m, cols));
        if !b0.is_empty() {
            let births = tape.gather_elems(f, &b0, 0.0, b0.len(), 1)?;
            let deaths = tape.gather_elems(f, &d0, 0.0, d0.len(), 1)?;
            let e0 = self.embed_pairs(tape, births, deaths, 0)?;
            let placed = tape.place_blocks(e0, &place0, m, cols)?;
            raw = tape.add(raw, placed)?;
        }
        if !b1.is_empty() {
            let births = tape.gather_elems(f, &b1, 0.0, b1.len(), 1)?;
            let deaths = tape.constant(Tensor::filled(b1.len(), 1, ESSENTIAL_DEATH));
            let e1 = self.embed_pairs(tape, births, deaths, 1)?;
            let placed = tape.place_blocks(e1, &place1, m, cols)?;
            raw = tape.add(raw, placed)?;
        }
        let z = self.edge_proj.forward(tape, raw)?;
        Ok(tape.tanh(z))
    }

    /// Graph-wide sum of the vertex signature broadcast back to every row.
    pub fn pooled(tape: &mut Tape, tv: Var) -> Result<Var> {
        let n = tape.shape(tv).0;
        let s = tape.sum(tv, Axis::Rows);
        let ones = tape.constant(Tensor::filled(n, 1, 1.0));
        tape.mul(ones, s)
    }
}

/// Per-vertex count of cycle attributions summed over one filtration.
pub fn cycle_attributions(n: usize, pers: &Persistence) -> Vec<usize> {
    let mut counts = vec![0; n];
    for p in &pers.dim1 {
        for &v in &p.cycle {
            counts[v] += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_diagrams() {
        let pd = compute_pd0(&[0.3], &[]).unwrap();
        assert_eq!(pd.len(), 1);
        assert_eq!((pd[0].birth, pd[0].death, pd[0].essential), (0.3, 1.0, true));

        let pd = compute_pd0(&[0.1, 0.4], &[(0, 1)]).unwrap();
        let mut bd: Vec<(f64, f64)> = pd.iter().map(|p| (p.birth, p.death)).collect();
        bd.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(bd, vec![(0.1, 1.0), (0.4, 0.4)]);

        let tri = [(0, 1), (1, 2), (0, 2)];
        let c = 0.6;
        let pd0 = compute_pd0(&[c, c, c], &tri).unwrap();
        assert_eq!(pd0.iter().filter(|p| p.essential).count(), 1);
        assert!(pd0.iter().all(|p| p.birth == c));
        let pd1 = compute_pd1(&[c, c, c], &tri).unwrap();
        assert_eq!(pd1.len(), 1);
        assert_eq!((pd1[0].birth, pd1[0].death), (c, 1.0));
        let pers = persistence(&[c, c, c], &tri).unwrap();
        assert_eq!(pers.dim1[0].cycle, vec![0, 1, 2]);
        assert!(compute_pd1(&[0.1, 0.2, 0.3], &[(0, 1), (1, 2)]).unwrap().is_empty());
    }

    #[test]
    fn scalar_embeddings() {
        assert_eq!(embed_triangle((0.0, 1.0), &[0.0, 2.0]), vec![1.0, 0.0]);
        assert!((embed_triangle((0.2, 0.5), &[0.3])[0] - 0.4).abs() < 1e-15);
        assert_eq!(embed_gaussian((0.3, 0.4), &[(0.3, 0.4)], 0.7), vec![1.0]);
        assert!((embed_gaussian((0.0, 1.0), &[(1.0, 1.0)], 1.0)[0] - (-0.5f64).exp()).abs() < 1e-15);
        assert_eq!(embed_line((1.0, 2.0), &[((1.0, 0.0), 0.0), ((0.0, 1.0), -2.0), ((0.0, 0.0), 3.5)]), vec![1.0, 0.0, 3.5]);
        assert!((embed_rational_hat((0.2, 0.2), (0.2, 0.2), 1.0, 2.0) - 0.5).abs() < 1e-15);
    }
}
