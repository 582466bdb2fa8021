//! Layer primitives built on the tape: affine maps, MLPs, a GRU cell and a
//! graph attention head.

use rand::Rng;

use super::params::{ParamId, ParameterStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Tanh => tape.tanh(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add_glorot(format!("{name}.w"), input, output, rng)?;
        let b = store.add_zeros(format!("{name}.b"), 1, output)?;
        Ok(Self { w, b, input, output })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        tape.affine(x, w, b)
    }
}

/// Stack of affine layers with a shared activation. The activation of the
/// last layer is controlled separately.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
    pub final_activation: Activation,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        name: &str,
        sizes: &[usize],
        activation: Activation,
        final_activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            activation,
            final_activation,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            h = if i == last {
                self.final_activation.apply(tape, h)
            } else {
                self.activation.apply(tape, h)
            };
        }
        Ok(h)
    }
}

/// Gated recurrent unit acting row-wise on `N x d` states.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub z: Linear,
    pub r: Linear,
    pub n: Linear,
    pub dim: usize,
}

impl GruCell {
    pub fn new<R: Rng>(store: &mut ParameterStore, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            z: Linear::new(store, &format!("{name}.z"), 2 * dim, dim, rng)?,
            r: Linear::new(store, &format!("{name}.r"), 2 * dim, dim, rng)?,
            n: Linear::new(store, &format!("{name}.n"), 2 * dim, dim, rng)?,
            dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, h: Var, m: Var) -> Result<Var> {
        let hm = tape.concat_cols(&[h, m])?;
        let z = self.z.forward(tape, hm)?;
        let z = tape.sigmoid(z);
        let r = self.r.forward(tape, hm)?;
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, h)?;
        let rhm = tape.concat_cols(&[rh, m])?;
        let n = self.n.forward(tape, rhm)?;
        let n = tape.tanh(n);
        // h' = n + z * (h - n)
        let diff = tape.sub(h, n)?;
        let zd = tape.mul(z, diff)?;
        tape.add(n, zd)
    }
}

/// Directed message list for attention: messages flow from `src[e]` to `dst[e]`.
#[derive(Clone, Debug)]
pub struct EdgeList {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    /// `E x d_e` edge features.
    pub features: Tensor,
    pub num_vertices: usize,
}

#[derive(Clone, Debug)]
pub struct GatHead {
    pub w: ParamId,
    pub we: ParamId,
    pub a: ParamId,
    pub negative_slope: f64,
}

impl GatHead {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        name: &str,
        input: usize,
        output: usize,
        edge_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w: store.add_glorot(format!("{name}.w"), input, output, rng)?,
            we: store.add_glorot(format!("{name}.we"), edge_dim, output, rng)?,
            a: store.add_glorot(format!("{name}.a"), 3 * output, 1, rng)?,
            negative_slope: 0.2,
        })
    }

    /// `edges` must already contain one self-loop per vertex.
    pub fn forward(&self, tape: &mut Tape, x: Var, edges: &EdgeList) -> Result<Var> {
        let w = tape.param(self.w);
        let z = tape.matmul(x, w)?;
        let zd = tape.gather_rows(z, &edges.dst)?;
        let zs = tape.gather_rows(z, &edges.src)?;
        let ef = tape.constant(edges.features.clone());
        let we = tape.param(self.we);
        let ze = tape.matmul(ef, we)?;
        let cat = tape.concat_cols(&[zd, zs, ze])?;
        let act = tape.leaky_relu(cat, self.negative_slope);
        let a = tape.param(self.a);
        let logits = tape.matmul(act, a)?;
        let alpha = tape.segment_softmax(logits, &edges.dst, edges.num_vertices)?;
        let msgs = tape.mul(zs, alpha)?;
        tape.scatter_add_rows(msgs, &edges.dst, edges.num_vertices)
    }
}
