//! Run configuration: defaults, then a JSON file, then dotted command-line overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::sim::SimConfig;
use crate::tgn::ModelConfig;
use crate::topo::TopoConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d0: usize,
    pub d1: usize,
    pub d: usize,
    pub d_o: usize,
    pub heads: usize,
    pub experts: usize,
    pub layers: usize,
    pub filtrations: usize,
    pub embed_points: usize,
    pub gaussian_sigma: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d0: 7,
            d1: 7,
            d: 7,
            d_o: 28,
            heads: 4,
            experts: 16,
            layers: 2,
            filtrations: 12,
            embed_points: 4,
            gaussian_sigma: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub width: usize,
    pub tokens: usize,
    pub hidden: usize,
    pub experts: usize,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            width: 128,
            tokens: 4,
            hidden: 64,
            experts: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoSection {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub lambda_g: f64,
    /// Gradient steps per iteration.
    pub sgd_iters: usize,
    /// Samples per gradient step (0 = the whole batch).
    pub minibatch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub max_grad_norm: f64,
    pub envs: usize,
    /// Decisions per environment collected per iteration (0 = one full episode).
    pub rollout_decisions: usize,
    pub shared: bool,
    pub normalize_advantages: bool,
    pub reward_scale: f64,
}

impl Default for PpoSection {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.97,
            clip: 0.3,
            entropy_coef: 0.003,
            value_coef: 1.0,
            lambda_g: 0.5,
            sgd_iters: 5,
            minibatch: 32,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_grad_norm: 0.5,
            envs: 15,
            rollout_decisions: 8,
            shared: true,
            normalize_advantages: true,
            reward_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSection {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for RewardSection {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub policy: PolicySection,
    pub ppo: PpoSection,
    pub reward: RewardSection,
    pub sim: SimConfig,
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            d0: m.d0,
            d: m.d,
            d1: m.d1,
            d_o: m.d_o,
            heads: m.heads,
            experts: m.experts,
            layers: m.layers,
            topo: TopoConfig {
                filtrations: m.filtrations,
                q: m.embed_points,
                out_dim: m.d1,
                sigma: m.gaussian_sigma,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if self.model.d0 != crate::sim::LANE_FEATURES || self.model.d != self.model.d0 {
            return Err(Error::config(format!(
                "lane features are {}-dimensional; d0 and d must match",
                crate::sim::LANE_FEATURES
            )));
        }
        let p = &self.policy;
        if p.tokens == 0 || p.width == 0 || p.hidden == 0 || p.experts == 0 {
            return Err(Error::config("policy sizes must be positive"));
        }
        if p.width % p.tokens != 0 {
            return Err(Error::config(format!(
                "policy width {} is not divisible by {} tokens",
                p.width, p.tokens
            )));
        }
        let o = &self.ppo;
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(o.gamma) || !unit(o.lambda) {
            return Err(Error::config("gamma and lambda must lie in [0, 1]"));
        }
        if !(o.clip > 0.0 && o.clip < 1.0) {
            return Err(Error::config("clip must lie in (0, 1)"));
        }
        if !(o.lr > 0.0) || !(o.max_grad_norm > 0.0) || !(o.reward_scale > 0.0) {
            return Err(Error::config("lr, max_grad_norm and reward_scale must be positive"));
        }
        if o.entropy_coef < 0.0 || o.value_coef < 0.0 || o.lambda_g < 0.0 {
            return Err(Error::config("loss coefficients must be non-negative"));
        }
        if o.envs == 0 || o.sgd_iters == 0 {
            return Err(Error::config("envs and sgd_iters must be positive"));
        }
        if !o.shared {
            return Err(Error::config("only shared parameters are supported"));
        }
        self.sim.validate()
    }

    /// Decisions per environment per iteration.
    pub fn decisions_per_rollout(&self) -> usize {
        if self.ppo.rollout_decisions > 0 {
            self.ppo.rollout_decisions
        } else {
            self.sim.episode_length.div_ceil(self.sim.control_interval) as usize
        }
    }
}

/// Sets `path` (dot separated) inside a JSON object tree.
fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("`{path}` does not name a section")))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(Error::config(format!("unknown config key `{path}`")));
            }
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        cur = obj
            .get_mut(*part)
            .ok_or_else(|| Error::config(format!("unknown config section in `{path}`")))?;
    }
    Ok(())
}

fn parse_scalar(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

/// Merges `overlay` into `base`, failing on keys `base` does not have.
fn merge(base: &mut Value, overlay: &Value, prefix: &str) -> Result<()> {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                let slot = b
                    .get_mut(k)
                    .ok_or_else(|| Error::config(format!("unknown config key `{path}`")))?;
                merge(slot, v, &path)?;
            }
            Ok(())
        }
        (b, o) => {
            *b = o.clone();
            Ok(())
        }
    }
}

/// Defaults ← file ← `key=value` overrides, validated.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    load_config_over(RunConfig::default(), path, overrides)
}

/// Like [`load_config`] with `base` in place of the defaults.
pub fn load_config_over(base: RunConfig, path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut tree = serde_json::to_value(base)?;
    if let Some(p) = path {
        let text = std::fs::read_to_string(p)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?;
        if !text.trim().is_empty() {
            let file: Value = serde_json::from_str(&text)
                .map_err(|e| Error::config(format!("config parse error: {e}")))?;
            merge(&mut tree, &file, "")?;
        }
    }
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override `{o}` is not key=value")))?;
        set_path(&mut tree, k.trim(), parse_scalar(v.trim()))?;
    }
    let cfg: RunConfig = serde_json::from_value(tree)
        .map_err(|e| Error::config(format!("invalid config value: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}
