//! PPO machinery shared by all agents: advantage estimation, the clipped
//! surrogate, value and entropy terms, and the token-routed policy/value heads.

use rand::Rng;

use crate::autodiff::{Axis, Linear, ParamId, ParameterStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdvantageEstimate {
    pub advantages: Vec<f64>,
    pub deltas: Vec<f64>,
    /// `Â + V`, the value targets.
    pub returns: Vec<f64>,
}

/// Generalized advantage estimation over one trajectory. `bootstrap` is the
/// value after the last step, used only when that step is not terminal.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<AdvantageEstimate> {
    let t = rewards.len();
    if values.len() != t || dones.len() != t {
        return Err(Error::shape("rewards, values and dones must align"));
    }
    let mut deltas = vec![0.0; t];
    let mut adv = vec![0.0; t];
    let mut next_adv = 0.0;
    for k in (0..t).rev() {
        let next_v = if k + 1 < t { values[k + 1] } else { bootstrap };
        let live = if dones[k] { 0.0 } else { 1.0 };
        deltas[k] = rewards[k] + gamma * next_v * live - values[k];
        next_adv = deltas[k] + gamma * lambda * live * next_adv;
        adv[k] = next_adv;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok(AdvantageEstimate {
        advantages: adv,
        deltas,
        returns,
    })
}

/// Scalar clipped surrogate `min(rÂ, clip(r, 1−ε, 1+ε)Â)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage)
}

pub fn policy_loss_scalar(log_prob_new: f64, log_prob_old: f64, advantage: f64, epsilon: f64) -> f64 {
    clipped_surrogate((log_prob_new - log_prob_old).exp(), advantage, epsilon)
}

pub fn value_loss_scalar(v_new: f64, v_old: f64, advantage: f64) -> f64 {
    (v_new - (advantage + v_old)).powi(2)
}

/// Entropy of the categorical distribution given by `logits`.
pub fn entropy_scalar(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    logits
        .iter()
        .map(|l| {
            let lp = l - m - z.ln();
            let p = lp.exp();
            if p > 0.0 {
                -p * lp
            } else {
                0.0
            }
        })
        .sum()
}

/// Clipped surrogate on the tape; `log_prob_new` is `1 x 1`.
pub fn policy_loss(tape: &mut Tape, log_prob_new: Var, log_prob_old: f64, advantage: f64, epsilon: f64) -> Result<Var> {
    let diff = tape.add_scalar(log_prob_new, -log_prob_old);
    let ratio = tape.exp(diff);
    let clipped = tape.clamp(ratio, 1.0 - epsilon, 1.0 + epsilon);
    let a = tape.scale(ratio, advantage);
    let b = tape.scale(clipped, advantage);
    tape.minimum(a, b)
}

/// `(V − (Â + V_old))²` on the tape.
pub fn value_loss(tape: &mut Tape, v_new: Var, v_old: f64, advantage: f64) -> Var {
    let d = tape.add_scalar(v_new, -(advantage + v_old));
    tape.square(d)
}

/// Row-wise entropy of `logits` (`B x A`), summed into `1 x 1` for one row.
pub fn entropy(tape: &mut Tape, logits: Var) -> Result<Var> {
    let lp = tape.log_softmax_cols(logits);
    let p = tape.exp(lp);
    let plp = tape.mul(p, lp)?;
    let s = tape.sum_all(plp);
    Ok(tape.neg(s))
}

/// Log-probability of `action` under `logits` (`1 x A`).
pub fn log_prob(tape: &mut Tape, logits: Var, action: usize) -> Result<Var> {
    let lp = tape.log_softmax_cols(logits);
    tape.slice_cols(lp, action, 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub input: usize,
    pub width: usize,
    pub tokens: usize,
    pub hidden: usize,
    pub experts: usize,
    pub output: usize,
}

/// First layer, token split, soft routing of tokens to experts, token
/// selection weights and a final linear layer.
#[derive(Clone, Debug)]
pub struct PolicyHead {
    pub config: HeadConfig,
    pub first: Linear,
    /// `token_dim x P` dispatch/combine logits.
    pub phi: ParamId,
    /// `token_dim x (P*hidden)`.
    pub expert_w: ParamId,
    pub expert_b: ParamId,
    /// `token_dim x 1` token selection logits.
    pub select: ParamId,
    pub last: Linear,
}

pub struct HeadOutput {
    pub out: Var,
    /// Token selection weights `S` (`B x 1`).
    pub token_weights: Var,
}

impl PolicyHead {
    pub fn new<R: Rng>(store: &mut ParameterStore, name: &str, config: HeadConfig, rng: &mut R) -> Result<Self> {
        if config.tokens == 0 || config.width % config.tokens != 0 {
            return Err(Error::config(format!(
                "head width {} not divisible by {} tokens",
                config.width, config.tokens
            )));
        }
        let td = config.width / config.tokens;
        let c = &config;
        Ok(Self {
            first: Linear::new(store, &format!("{name}.first"), c.input, c.width, rng)?,
            phi: store.add_glorot(format!("{name}.phi"), td, c.experts, rng)?,
            expert_w: store.add_glorot(format!("{name}.expert.w"), td, c.experts * c.hidden, rng)?,
            expert_b: store.add_zeros(format!("{name}.expert.b"), 1, c.experts * c.hidden)?,
            select: store.add_glorot(format!("{name}.select"), td, 1, rng)?,
            last: Linear::new(store, &format!("{name}.last"), c.hidden, c.output, rng)?,
            config,
        })
    }

    pub fn token_dim(&self) -> usize {
        self.config.width / self.config.tokens
    }

    pub fn forward(&self, tape: &mut Tape, o: Var) -> Result<HeadOutput> {
        let c = &self.config;
        let z = self.first.forward(tape, o)?;
        let z = tape.tanh(z);
        let x = tape.reshape(z, c.tokens, self.token_dim())?;
        let phi = tape.param(self.phi);
        let logits = tape.matmul(x, phi)?;
        let dispatch = tape.softmax(logits, Axis::Rows);
        let dt = tape.transpose(dispatch);
        let slots = tape.matmul(dt, x)?;
        let w = tape.param(self.expert_w);
        let y = tape.batched_row_matmul(slots, w)?;
        let b = tape.param(self.expert_b);
        let b = tape.reshape(b, c.experts, c.hidden)?;
        let y = tape.add(y, b)?;
        let y = tape.tanh(y);
        let combine = tape.softmax(logits, Axis::Cols);
        let tokens_out = tape.matmul(combine, y)?;
        let sel = tape.param(self.select);
        let sl = tape.matmul(x, sel)?;
        let s = tape.softmax(sl, Axis::Rows);
        let st = tape.transpose(s);
        let h = tape.matmul(st, tokens_out)?;
        let out = self.last.forward(tape, h)?;
        Ok(HeadOutput { out, token_weights: s })
    }
}

/// Policy and value heads over the shared observation.
#[derive(Clone, Debug)]
pub struct ActorCritic {
    pub policy: PolicyHead,
    pub value: PolicyHead,
}

impl ActorCritic {
    pub fn new<R: Rng>(store: &mut ParameterStore, input: usize, width: usize, tokens: usize, hidden: usize, experts: usize, rng: &mut R) -> Result<Self> {
        let cfg = |output| HeadConfig {
            input,
            width,
            tokens,
            hidden,
            experts,
            output,
        };
        Ok(Self {
            policy: PolicyHead::new(store, "pi", cfg(2), rng)?,
            value: PolicyHead::new(store, "vf", cfg(1), rng)?,
        })
    }
}

/// Loss terms of one sample, all `1 x 1`.
pub struct SampleTerms {
    pub surrogate: Var,
    pub value: Var,
    pub entropy: Var,
    pub tgn: Var,
}

pub struct ObjectiveWeights {
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub lambda_g: f64,
}

/// `−(J_π + ι H) + c_V J_V + λ_g J_TGN`.
pub fn joint_objective(tape: &mut Tape, t: &SampleTerms, w: &ObjectiveWeights) -> Result<Var> {
    let ent = tape.scale(t.entropy, w.entropy_coef);
    let gain = tape.add(t.surrogate, ent)?;
    let neg = tape.neg(gain);
    let v = tape.scale(t.value, w.value_coef);
    let g = tape.scale(t.tgn, w.lambda_g);
    let s = tape.add(neg, v)?;
    tape.add(s, g)
}

/// Batch mean and standard deviation normalization.
pub fn normalize(values: &mut [f64]) {
    if values.len() < 2 {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    for v in values.iter_mut() {
        *v = (*v - mean) / std;
    }
}

pub fn softmax_probs(logits: &Tensor) -> Vec<f64> {
    let m = logits.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.data().iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}
