//! Rollout collection, the joint learner update and greedy evaluation.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::{AdamConfig, AdamState, Gradients, ParameterStore, Tape, Tensor};
use crate::config::RunConfig;
use crate::error::{Error, Result, StageContext};
use crate::graph::{build_subgraph, global_mf_of, SubGraph};
use crate::mappo::{
    entropy, gae, joint_objective, log_prob, normalize, policy_loss, softmax_probs, value_loss,
    ActorCritic, ObjectiveWeights, SampleTerms,
};
use crate::network::RoadNetwork;
use crate::sim::{EpisodeMetrics, SimConfig, Simulator};
use crate::tgn::{tgn_loss, tgn_target, TgnModel, TgnState, TopoMode};

/// Derives a child seed from a master seed and a stream label.
pub fn split_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0xA24B_AED4_963E_E407) ^ index.wrapping_mul(0x9FB2_1C65_1E98_DF25);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_EPISODE: u64 = 1;
const STREAM_POLICY: u64 = 2;
const STREAM_LEARNER: u64 = 3;
const STREAM_INIT: u64 = 4;
pub const STREAM_EVAL: u64 = 5;

#[derive(Clone, Debug)]
pub struct Model {
    pub tgn: TgnModel,
    pub heads: ActorCritic,
}

impl Model {
    pub fn new(store: &mut ParameterStore, cfg: &RunConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, STREAM_INIT, 0));
        let tgn = TgnModel::new(store, cfg.model_config(), &mut rng)?;
        let p = &cfg.policy;
        let heads = ActorCritic::new(store, cfg.model.d_o, p.width, p.tokens, p.hidden, p.experts, &mut rng)?;
        Ok(Self { tgn, heads })
    }

    /// Fresh parameter store and model for a configuration.
    pub fn build(cfg: &RunConfig, seed: u64) -> Result<(ParameterStore, Self)> {
        let mut store = ParameterStore::new();
        store.shared = cfg.ppo.shared;
        let model = Self::new(&mut store, cfg, seed)?;
        Ok((store, model))
    }
}

/// What one agent decides at one control step.
#[derive(Clone, Debug)]
pub struct Decision {
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
    pub logits: Vec<f64>,
    pub prediction: Tensor,
    pub observation: Vec<f64>,
}

pub fn decide<R: Rng>(
    model: &Model,
    store: &ParameterStore,
    graph: &SubGraph,
    global_prev: &[f64],
    state: &TgnState,
    greedy: bool,
    rng: &mut R,
) -> Result<Decision> {
    let mut tape = Tape::new(store);
    let out = model.tgn.forward(&mut tape, graph, global_prev, state, TopoMode::Local)?;
    let pi = model.heads.policy.forward(&mut tape, out.observation).stage("policy")?;
    let v = model.heads.value.forward(&mut tape, out.observation).stage("value")?;
    let logits = tape.value(pi.out).clone();
    let observation = tape.value(out.observation).data().to_vec();
    if !logits.is_finite() || observation.iter().any(|x| !x.is_finite()) {
        return Err(Error::Divergence(format!(
            "non-finite observation for agent {} at t={}",
            graph.agent, graph.t
        )));
    }
    let probs = softmax_probs(&logits);
    let action = if greedy {
        (probs[1] > probs[0]) as usize
    } else {
        (rng.random::<f64>() < probs[1]) as usize
    };
    Ok(Decision {
        action,
        log_prob: probs[action].max(1e-300).ln(),
        value: tape.value(v.out).item(),
        logits: logits.data().to_vec(),
        prediction: tape.value(out.prediction).clone(),
        observation,
    })
}

/// One stored transition of one agent, with everything needed to recompute it.
#[derive(Clone, Debug)]
pub struct Sample {
    pub graph: SubGraph,
    pub global_prev: Vec<f64>,
    pub state: TgnState,
    pub target: Tensor,
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    pub done: bool,
    /// Normalized advantage used by the surrogate.
    pub advantage: f64,
    /// Raw advantage used for the value target.
    pub raw_advantage: f64,
}

struct Env {
    sim: Simulator,
    states: Vec<TgnState>,
    global_prev: Vec<f64>,
    episode: u64,
    index: u64,
    rng: ChaCha8Rng,
}

impl Env {
    fn new(net: Arc<RoadNetwork>, sim_cfg: &SimConfig, master: u64, index: u64) -> Result<Self> {
        let mut env = Self {
            sim: Simulator::new(net, sim_cfg.clone(), split_seed(master, STREAM_EPISODE, index << 20))?,
            states: Vec::new(),
            global_prev: Vec::new(),
            episode: 0,
            index,
            rng: ChaCha8Rng::seed_from_u64(split_seed(master, STREAM_POLICY, index)),
        };
        env.reset_states()?;
        Ok(env)
    }

    fn reset_states(&mut self) -> Result<()> {
        let net = self.sim.net.clone();
        let mf = global_mf_of(&self.sim)?;
        self.states = (0..net.num_agents())
            .map(|i| TgnState::initial(&build_subgraph(&net, i, &self.sim)?, &mf))
            .collect::<Result<_>>()?;
        self.global_prev = mf;
        Ok(())
    }

    fn restart(&mut self, master: u64) -> Result<()> {
        self.episode += 1;
        let seed = split_seed(master, STREAM_EPISODE, (self.index << 20) + self.episode);
        self.sim = Simulator::new(self.sim.net.clone(), self.sim.config.clone(), seed)?;
        self.reset_states()
    }
}

struct Rollout {
    /// Per agent, the transitions in time order.
    per_agent: Vec<Vec<Sample>>,
    /// Bootstrap values per agent (0 when the fragment ended an episode).
    bootstrap: Vec<f64>,
    trips: EpisodeMetrics,
}

fn collect(env: &mut Env, model: &Model, store: &ParameterStore, cfg: &RunConfig, master: u64) -> Result<Rollout> {
    let net = env.sim.net.clone();
    let agents = net.num_agents();
    let mut per_agent: Vec<Vec<Sample>> = vec![Vec::new(); agents];
    let trips_before = env.sim.metrics.trips.len();
    let (c0, t0) = (env.sim.metrics.completed, env.sim.metrics.teleported);
    let mut trips = EpisodeMetrics::default();
    let mut bootstrap = vec![0.0; agents];
    let steps = cfg.decisions_per_rollout();
    let mut pending_targets = false;
    for step in 0..=steps {
        let global_now = global_mf_of(&env.sim)?;
        let graphs: Vec<SubGraph> = (0..agents)
            .map(|i| build_subgraph(&net, i, &env.sim))
            .collect::<Result<_>>()
            .stage("observe")?;
        if pending_targets {
            for i in 0..agents {
                if let Some(last) = per_agent[i].last_mut() {
                    last.target = tgn_target(&graphs[i], &global_now)?;
                }
            }
        }
        if step == steps {
            for i in 0..agents {
                let d = decide(model, store, &graphs[i], &env.global_prev, &env.states[i], false, &mut env.rng)
                    .stage("rollout")?;
                bootstrap[i] = d.value;
            }
            break;
        }
        let mut actions = vec![0u8; agents];
        for i in 0..agents {
            let d = decide(model, store, &graphs[i], &env.global_prev, &env.states[i], false, &mut env.rng)
                .stage("rollout")?;
            actions[i] = d.action as u8;
            per_agent[i].push(Sample {
                graph: graphs[i].clone(),
                global_prev: env.global_prev.clone(),
                state: env.states[i].clone(),
                target: Tensor::zeros(0, 0),
                action: d.action,
                log_prob: d.log_prob,
                value: d.value,
                reward: 0.0,
                done: false,
                advantage: 0.0,
                raw_advantage: 0.0,
            });
            env.states[i].prediction = d.prediction;
        }
        let mut total = 0.0;
        let mut ticks = 0;
        for k in 0..cfg.sim.control_interval {
            let a = if k == 0 { actions.clone() } else { vec![0; agents] };
            env.sim.step(&a)?;
            total += env.sim.global_reward(cfg.reward.alpha, cfg.reward.beta);
            ticks += 1;
            if env.sim.done() {
                break;
            }
        }
        let reward = cfg.ppo.reward_scale * total / ticks as f64;
        let done = env.sim.done();
        for samples in per_agent.iter_mut() {
            let s = samples.last_mut().expect("pushed above");
            s.reward = reward;
            s.done = done;
        }
        env.global_prev = global_now;
        pending_targets = true;
        if done {
            let final_mf = global_mf_of(&env.sim)?;
            for i in 0..agents {
                let g = build_subgraph(&net, i, &env.sim)?;
                per_agent[i].last_mut().expect("pushed").target = tgn_target(&g, &final_mf)?;
            }
            trips.trips.extend_from_slice(&env.sim.metrics.trips[trips_before.min(env.sim.metrics.trips.len())..]);
            trips.completed += env.sim.metrics.completed - c0.min(env.sim.metrics.completed);
            trips.teleported += env.sim.metrics.teleported - t0.min(env.sim.metrics.teleported);
            env.restart(master)?;
            // Remaining decisions of this fragment start a new episode.
            return finish_after_restart(env, model, store, cfg, master, per_agent, trips, steps - step - 1);
        }
    }
    trips.trips.extend_from_slice(&env.sim.metrics.trips[trips_before..]);
    trips.completed += env.sim.metrics.completed - c0;
    trips.teleported += env.sim.metrics.teleported - t0;
    Ok(Rollout {
        per_agent,
        bootstrap,
        trips,
    })
}

#[allow(clippy::too_many_arguments)]
fn finish_after_restart(
    env: &mut Env,
    model: &Model,
    store: &ParameterStore,
    cfg: &RunConfig,
    master: u64,
    mut per_agent: Vec<Vec<Sample>>,
    mut trips: EpisodeMetrics,
    remaining: usize,
) -> Result<Rollout> {
    if remaining == 0 {
        return Ok(Rollout {
            bootstrap: vec![0.0; per_agent.len()],
            per_agent,
            trips,
        });
    }
    let mut sub = cfg.clone();
    sub.ppo.rollout_decisions = remaining;
    let rest = collect(env, model, store, &sub, master)?;
    for (a, more) in per_agent.iter_mut().zip(rest.per_agent) {
        a.extend(more);
    }
    trips.trips.extend(rest.trips.trips);
    trips.completed += rest.trips.completed;
    trips.teleported += rest.trips.teleported;
    Ok(Rollout {
        per_agent,
        bootstrap: rest.bootstrap,
        trips,
    })
}

/// Joint loss of one stored sample and its representation error.
pub fn sample_objective(
    tape: &mut Tape,
    model: &Model,
    s: &Sample,
    cfg: &RunConfig,
) -> Result<(crate::autodiff::Var, f64)> {
    let out = model.tgn.forward(tape, &s.graph, &s.global_prev, &s.state, TopoMode::Local)?;
    let pi = model.heads.policy.forward(tape, out.observation).stage("policy")?;
    let v = model.heads.value.forward(tape, out.observation).stage("value")?;
    let lp = log_prob(tape, pi.out, s.action)?;
    let surrogate = policy_loss(tape, lp, s.log_prob, s.advantage, cfg.ppo.clip)?;
    let value = value_loss(tape, v.out, s.value, s.raw_advantage);
    let ent = entropy(tape, pi.out)?;
    let tgn = tgn_loss(tape, out.prediction, &s.target).stage("tgn_loss")?;
    let mse = tape.value(tgn).item();
    let terms = SampleTerms {
        surrogate,
        value,
        entropy: ent,
        tgn,
    };
    let w = ObjectiveWeights {
        entropy_coef: cfg.ppo.entropy_coef,
        value_coef: cfg.ppo.value_coef,
        lambda_g: cfg.ppo.lambda_g,
    };
    Ok((joint_objective(tape, &terms, &w)?, mse))
}

#[derive(Clone, Debug, Serialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub mean_reward: f64,
    pub mean_travel_time_s: f64,
    pub mean_delay_s: f64,
    pub vehicles_completed: u64,
    pub teleports: u64,
    pub tgn_mse: f64,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub net: Arc<RoadNetwork>,
    pub store: ParameterStore,
    pub model: Model,
    pub adam: AdamState,
    envs: Vec<Env>,
    rng: ChaCha8Rng,
    pub seed: u64,
    pub iteration: usize,
}

impl Trainer {
    pub fn new(cfg: RunConfig, net: Arc<RoadNetwork>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (store, model) = Model::build(&cfg, seed)?;
        let adam = AdamState::new(
            &store,
            AdamConfig {
                lr: cfg.ppo.lr,
                beta1: cfg.ppo.beta1,
                beta2: cfg.ppo.beta2,
                eps: cfg.ppo.adam_eps,
            },
        );
        let envs = (0..cfg.ppo.envs as u64)
            .map(|e| Env::new(net.clone(), &cfg.sim, seed, e))
            .collect::<Result<_>>()?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(split_seed(seed, STREAM_LEARNER, 0)),
            cfg,
            net,
            store,
            model,
            adam,
            envs,
            seed,
            iteration: 0,
        })
    }

    /// One collect-then-update iteration.
    pub fn step(&mut self) -> Result<IterationMetrics> {
        let (model, store, cfg, seed) = (&self.model, &self.store, &self.cfg, self.seed);
        let rollouts: Vec<Rollout> = self
            .envs
            .par_iter_mut()
            .map(|env| collect(env, model, store, cfg, seed))
            .collect::<Result<_>>()
            .stage("rollout")?;

        let mut samples = Vec::new();
        let mut reward_sum = 0.0;
        let mut reward_n = 0usize;
        let mut trips = EpisodeMetrics::default();
        for r in rollouts {
            for (agent, traj) in r.per_agent.into_iter().enumerate() {
                let rewards: Vec<f64> = traj.iter().map(|s| s.reward).collect();
                let values: Vec<f64> = traj.iter().map(|s| s.value).collect();
                let dones: Vec<bool> = traj.iter().map(|s| s.done).collect();
                let est = gae(&rewards, &values, &dones, r.bootstrap[agent], cfg.ppo.gamma, cfg.ppo.lambda)?;
                if agent == 0 {
                    reward_sum += rewards.iter().sum::<f64>();
                    reward_n += rewards.len();
                }
                for (mut s, a) in traj.into_iter().zip(est.advantages) {
                    s.advantage = a;
                    s.raw_advantage = a;
                    samples.push(s);
                }
            }
            trips.trips.extend(r.trips.trips);
            trips.completed += r.trips.completed;
            trips.teleported += r.trips.teleported;
        }
        if cfg.ppo.normalize_advantages {
            let mut adv: Vec<f64> = samples.iter().map(|s| s.advantage).collect();
            normalize(&mut adv);
            for (s, a) in samples.iter_mut().zip(adv) {
                s.advantage = a;
            }
        }

        let mut mse_sum = 0.0;
        let mut mse_n = 0usize;
        let batch = if cfg.ppo.minibatch == 0 { samples.len() } else { cfg.ppo.minibatch.min(samples.len()) };
        for _ in 0..cfg.ppo.sgd_iters {
            let idx: Vec<usize> = sample(&mut self.rng, samples.len(), batch).into_vec();
            let chunks: Vec<&[usize]> = idx.chunks(16).collect();
            let parts: Vec<(Gradients, f64)> = chunks
                .par_iter()
                .map(|chunk| -> Result<(Gradients, f64)> {
                    let mut g = Gradients::zeros_like(&self.store);
                    let mut mse = 0.0;
                    for &k in chunk.iter() {
                        let mut tape = Tape::new(&self.store);
                        let (loss, m) = sample_objective(&mut tape, &self.model, &samples[k], &self.cfg)?;
                        tape.backward_into(loss, &mut g)?;
                        mse += m;
                    }
                    Ok((g, mse))
                })
                .collect::<Result<_>>()
                .stage("update")?;
            let mut total = Gradients::zeros_like(&self.store);
            for (g, m) in &parts {
                total.add_assign(g);
                mse_sum += m;
            }
            mse_n += batch;
            total.scale(1.0 / batch as f64);
            if !total.is_finite() {
                return Err(Error::Divergence(format!("non-finite gradient at iteration {}", self.iteration)))
                    .stage("update");
            }
            total.clip_global_norm(self.cfg.ppo.max_grad_norm);
            self.adam.step(&mut self.store, &total);
        }
        self.iteration += 1;
        Ok(IterationMetrics {
            iteration: self.iteration,
            mean_reward: if reward_n > 0 { reward_sum / reward_n as f64 } else { 0.0 },
            mean_travel_time_s: trips.mean_travel_time(),
            mean_delay_s: trips.mean_delay(),
            vehicles_completed: trips.completed,
            teleports: trips.teleported,
            tgn_mse: if mse_n > 0 { mse_sum / mse_n as f64 } else { 0.0 },
        })
    }
}

/// Runs one greedy episode of the learned controller.
pub fn evaluate(
    model: &Model,
    store: &ParameterStore,
    net: Arc<RoadNetwork>,
    sim_cfg: &SimConfig,
    arrival_seed: u64,
    mut on_decision: impl FnMut(u32, usize, &Decision),
) -> Result<EpisodeMetrics> {
    let mut sim = Simulator::new(net.clone(), sim_cfg.clone(), arrival_seed)?;
    let agents = net.num_agents();
    let mut global_prev = global_mf_of(&sim)?;
    let mut states: Vec<TgnState> = (0..agents)
        .map(|i| TgnState::initial(&build_subgraph(&net, i, &sim)?, &global_prev))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    while !sim.done() {
        let global_now = global_mf_of(&sim)?;
        let mut actions = vec![0u8; agents];
        for i in 0..agents {
            let g = build_subgraph(&net, i, &sim)?;
            let d = decide(model, store, &g, &global_prev, &states[i], true, &mut rng).stage("eval")?;
            on_decision(sim.time(), i, &d);
            actions[i] = d.action as u8;
            states[i].prediction = d.prediction;
        }
        for k in 0..sim_cfg.control_interval {
            let a = if k == 0 { actions.clone() } else { vec![0; agents] };
            sim.step(&a)?;
            if sim.done() {
                break;
            }
        }
        global_prev = global_now;
    }
    Ok(sim.metrics)
}
