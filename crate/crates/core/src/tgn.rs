//! Temporal graph network with topology-routed mixture-of-experts layers.
//!
//! One forward step for an agent:
//! mean-field sync, augmentation with the virtual vertex, vertex signatures,
//! topology fusion of the previous prediction and of the fresh memory, a GRU
//! update, then per layer: attention heads, vertex routing, expert slots,
//! experts and the expert merge. The merged output of the last layer is both
//! the next-step prediction and the input of the max-pooled readout.

use rand::Rng;

use crate::autodiff::{Axis, EdgeList, GatHead, GruCell, Linear, ParamId, ParameterStore, Tape, Tensor, Var};
use crate::error::{Error, Result, StageContext};
use crate::graph::{augment_with_mf, compute_local_mf, AugmentedSubGraph, SubGraph, EDGE_FEATURES};
use crate::topo::{TopoConfig, TopoLayer};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d0: usize,
    pub d: usize,
    pub d1: usize,
    pub d_o: usize,
    pub heads: usize,
    pub experts: usize,
    pub layers: usize,
    pub topo: TopoConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d0: 7,
            d: 7,
            d1: 7,
            d_o: 28,
            heads: 4,
            experts: 16,
            layers: 2,
            topo: TopoConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.d0, self.d, self.d1, self.d_o, self.heads, self.experts, self.layers];
        if positive.contains(&0) || self.topo.filtrations == 0 || self.topo.q == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.d1 > self.heads * self.experts {
            return Err(Error::config(format!(
                "d1 = {} exceeds H*P = {}",
                self.d1,
                self.heads * self.experts
            )));
        }
        if self.topo.out_dim != self.d1 {
            return Err(Error::config("topological signature width must equal d1"));
        }
        if !(self.topo.sigma > 0.0) {
            return Err(Error::config("gaussian embedding sigma must be positive"));
        }
        Ok(())
    }
}

/// How vertex signatures reach the routing and fusion stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TopoMode {
    /// Per-vertex signatures.
    Local,
    /// Every row replaced by the graph-wide sum.
    Pooled,
}

#[derive(Clone, Debug)]
pub struct TmoeLayer {
    pub heads: Vec<GatHead>,
    /// `d1 x P` routing rows `W_p`, one column per expert.
    pub route: ParamId,
    /// `d1 x P` merge rows `W_sp`.
    pub merge: ParamId,
    /// `(d*H) x (P*d)`: expert `p` owns columns `p*d .. (p+1)*d`.
    pub expert_w: ParamId,
    pub expert_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct TgnModel {
    pub config: ModelConfig,
    pub topo: TopoLayer,
    pub agg: Linear,
    pub fuse: Linear,
    pub mf_mlp: Linear,
    pub mf_gru: GruCell,
    pub gru: GruCell,
    pub layers: Vec<TmoeLayer>,
    pub readout: Linear,
}

/// Per-(environment, agent) recurrent state over the augmented graph.
#[derive(Clone, Debug, PartialEq)]
pub struct TgnState {
    pub memory: Tensor,
    pub prediction: Tensor,
}

impl TgnState {
    /// Prediction initialised to the raw features at the first step, memory to zero.
    pub fn initial(g: &SubGraph, global_mf: &[f64]) -> Result<Self> {
        let aug = augment_with_mf(g.clone(), global_mf)?;
        let x = aug.features();
        Ok(Self {
            memory: Tensor::zeros(x.rows(), x.cols()),
            prediction: x,
        })
    }
}

/// Message list over the undirected augmented graph with self-loops.
pub fn message_edges(aug: &AugmentedSubGraph) -> EdgeList {
    let n = aug.num_vertices();
    let (pairs, feats) = aug.undirected();
    let mut src = Vec::with_capacity(2 * pairs.len() + n);
    let mut dst = Vec::with_capacity(2 * pairs.len() + n);
    let mut rows = Vec::with_capacity(2 * pairs.len() + n);
    for j in 0..n {
        src.push(j);
        dst.push(j);
        rows.extend(std::iter::repeat_n(0.0, EDGE_FEATURES));
    }
    for (k, &(a, b)) in pairs.iter().enumerate() {
        for (s, d) in [(a, b), (b, a)] {
            src.push(s);
            dst.push(d);
            rows.extend_from_slice(feats.row(k));
        }
    }
    let e = src.len();
    EdgeList {
        src,
        dst,
        features: Tensor::new(e, EDGE_FEATURES, rows).expect("edge rows"),
        num_vertices: n,
    }
}

pub struct TgnOutput {
    /// Merged output of the last layer, `N+ x d`.
    pub prediction: Var,
    /// Readout `1 x d_o`.
    pub observation: Var,
    /// Vertex signatures as consumed downstream, `N+ x d1`.
    pub tv: Var,
    /// Routing scores `Q` per layer, `N+ x P`.
    pub route_scores: Vec<Var>,
    /// Merge weights per layer, `1 x P`.
    pub merge_weights: Vec<Var>,
    /// Unmerged expert outputs per layer, `N+ x (P*d)`.
    pub expert_outputs: Vec<Var>,
    /// Fresh memory `Agg(x)`, `N+ x d`.
    pub memory: Var,
    pub num_vertices: usize,
}

impl TgnModel {
    pub fn new<R: Rng>(store: &mut ParameterStore, config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let topo = TopoLayer::new(store, "tgn.topo", c.d0, c.topo.clone(), rng)?;
        let agg = Linear::new(store, "tgn.agg", c.d0, c.d, rng)?;
        let fuse = Linear::new(store, "tgn.fuse", c.d1 + c.d, c.d, rng)?;
        let mf_mlp = Linear::new(store, "tgn.mf_mlp", c.d0, c.d, rng)?;
        let mf_gru = GruCell::new(store, "tgn.mf_gru", c.d, rng)?;
        let gru = GruCell::new(store, "tgn.gru", c.d, rng)?;
        let mut layers = Vec::new();
        for l in 0..c.layers {
            let heads = (0..c.heads)
                .map(|h| GatHead::new(store, &format!("tgn.l{l}.gat{h}"), c.d, c.d, EDGE_FEATURES, rng))
                .collect::<Result<Vec<_>>>()?;
            layers.push(TmoeLayer {
                heads,
                route: store.add_glorot(format!("tgn.l{l}.route"), c.d1, c.experts, rng)?,
                merge: store.add_glorot(format!("tgn.l{l}.merge"), c.d1, c.experts, rng)?,
                expert_w: store.add_glorot(format!("tgn.l{l}.expert.w"), c.d * c.heads, c.experts * c.d, rng)?,
                expert_b: store.add_zeros(format!("tgn.l{l}.expert.b"), 1, c.experts * c.d)?,
            });
        }
        let readout = Linear::new(store, "tgn.readout", c.d, c.d_o, rng)?;
        Ok(Self {
            config,
            topo,
            agg,
            fuse,
            mf_mlp,
            mf_gru,
            gru,
            layers,
            readout,
        })
    }

    /// `v̄ = MLP1(mf_prev)`, `ṽ_MF = GRU(v̄, local_mf)`.
    pub fn sync_mf(&self, tape: &mut Tape, global_prev: &[f64], local: &[f64]) -> Result<Var> {
        let g = tape.constant(Tensor::row_vector(global_prev.to_vec()));
        let l = tape.constant(Tensor::row_vector(local.to_vec()));
        let z = self.mf_mlp.forward(tape, g)?;
        let vbar = tape.tanh(z);
        self.mf_gru.forward(tape, vbar, l)
    }

    /// `MLP0([T_v(j), x_j])` row-wise.
    pub fn fuse_topology(&self, tape: &mut Tape, tv: Var, x: Var) -> Result<Var> {
        let cat = tape.concat_cols(&[tv, x])?;
        let z = self.fuse.forward(tape, cat)?;
        Ok(tape.tanh(z))
    }

    /// `Q = softmax over vertices of T_v W_route`, `N x P`.
    pub fn route_scores(&self, tape: &mut Tape, layer: &TmoeLayer, tv: Var) -> Result<Var> {
        let w = tape.param(layer.route);
        let logits = tape.matmul(tv, w)?;
        Ok(tape.softmax(logits, Axis::Rows))
    }

    /// `Y_p = tanh((Q_p ⊙ heads) W_p + b_p)` for every expert, `N x (P*d)`.
    pub fn experts(&self, tape: &mut Tape, layer: &TmoeLayer, q: Var, heads: Var) -> Result<Var> {
        let w = tape.param(layer.expert_w);
        let hw = tape.matmul(heads, w)?;
        let scaled = tape.block_scale(hw, q, self.config.d)?;
        let b = tape.param(layer.expert_b);
        let z = tape.add(scaled, b)?;
        Ok(tape.tanh(z))
    }

    /// `Q̃ = softmax over experts of (Σ_j T_v(j)) W_merge`, `1 x P`.
    pub fn merge_weights(&self, tape: &mut Tape, layer: &TmoeLayer, tv: Var) -> Result<Var> {
        let s = tape.sum(tv, Axis::Rows);
        let w = tape.param(layer.merge);
        let logits = tape.matmul(s, w)?;
        Ok(tape.softmax(logits, Axis::Cols))
    }

    pub fn readout(&self, tape: &mut Tape, v: Var) -> Result<Var> {
        let z = self.readout.forward(tape, v)?;
        let z = tape.tanh(z);
        tape.max_rows(z)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        graph: &SubGraph,
        global_mf_prev: &[f64],
        state: &TgnState,
        mode: TopoMode,
    ) -> Result<TgnOutput> {
        let d = self.config.d;
        let local = compute_local_mf(graph).stage("mf_sync")?;
        let mf = self.sync_mf(tape, global_mf_prev, &local).stage("mf_sync")?;
        let aug = augment_with_mf(graph.clone(), &tape.value(mf).data().to_vec()).stage("augment")?;
        let n = aug.num_vertices();
        if state.prediction.shape() != (n, d) {
            return Err(Error::shape(format!(
                "state holds {:?}, graph needs {n}x{d}",
                state.prediction.shape()
            )))
            .stage("state");
        }
        let base = tape.constant(graph.features.clone());
        let x = tape.concat_rows(&[base, mf]).stage("augment")?;
        let (pairs, _) = aug.undirected();
        let mut tv = self.topo.vertex_signature(tape, x, &pairs).stage("topo_signature")?;
        if mode == TopoMode::Pooled {
            tv = TopoLayer::pooled(tape, tv).stage("topo_signature")?;
        }
        let memory = self.agg.forward(tape, x).stage("memory")?;
        let prev = tape.constant(state.prediction.clone());
        let fused_prev = self.fuse_topology(tape, tv, prev).stage("fuse")?;
        let fused_mem = self.fuse_topology(tape, tv, memory).stage("fuse")?;
        let mut h = self.gru.forward(tape, fused_prev, fused_mem).stage("gru")?;

        let edges = message_edges(&aug);
        let mut route_scores = Vec::new();
        let mut merge_weights = Vec::new();
        let mut expert_outputs = Vec::new();
        for layer in &self.layers {
            let heads = layer
                .heads
                .iter()
                .map(|g| g.forward(tape, h, &edges))
                .collect::<Result<Vec<_>>>()
                .stage("attention")?;
            let heads = tape.concat_cols(&heads).stage("attention")?;
            let q = self.route_scores(tape, layer, tv).stage("route")?;
            let y = self.experts(tape, layer, q, heads).stage("experts")?;
            let qm = self.merge_weights(tape, layer, tv).stage("merge")?;
            h = tape.block_combine(y, qm, d).stage("merge")?;
            route_scores.push(q);
            merge_weights.push(qm);
            expert_outputs.push(y);
        }
        let observation = self.readout(tape, h).stage("readout")?;
        Ok(TgnOutput {
            prediction: h,
            observation,
            tv,
            route_scores,
            merge_weights,
            expert_outputs,
            memory,
            num_vertices: n,
        })
    }
}

/// `(1/N) Σ_k ‖ṽ_k − v_k‖²` against a constant target.
pub fn tgn_loss(tape: &mut Tape, predicted: Var, actual: &Tensor) -> Result<Var> {
    if tape.shape(predicted) != actual.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} vs target {:?}",
            tape.shape(predicted),
            actual.shape()
        )));
    }
    let n = actual.rows() as f64;
    let target = tape.constant(actual.clone());
    let diff = tape.sub(predicted, target)?;
    let sq = tape.square(diff);
    let s = tape.sum_all(sq);
    Ok(tape.scale(s, 1.0 / n))
}

/// Next-step target over the augmented graph: the real vertices' features
/// followed by the next global mean field.
pub fn tgn_target(next_graph: &SubGraph, next_global_mf: &[f64]) -> Result<Tensor> {
    augment_with_mf(next_graph.clone(), next_global_mf).map(|a| a.features())
}

/// Pairwise cosine similarity of the experts' output blocks (`P x P`).
pub fn expert_similarity(outputs: &Tensor, experts: usize) -> Tensor {
    let d = outputs.cols() / experts;
    let block = |p: usize| -> Vec<f64> {
        (0..outputs.rows())
            .flat_map(|j| outputs.row(j)[p * d..(p + 1) * d].to_vec())
            .collect()
    };
    let blocks: Vec<Vec<f64>> = (0..experts).map(block).collect();
    let norms: Vec<f64> = blocks.iter().map(|b| b.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut out = Tensor::zeros(experts, experts);
    for a in 0..experts {
        for b in 0..experts {
            let v = if a == b {
                1.0
            } else if norms[a] == 0.0 || norms[b] == 0.0 {
                0.0
            } else {
                blocks[a].iter().zip(&blocks[b]).map(|(x, y)| x * y).sum::<f64>() / (norms[a] * norms[b])
            };
            out.set(a, b, v);
        }
    }
    out
}
