//! Random graph fixtures and the block-by-block gradient suite.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{
    grad_check, EdgeList, GatHead, GradCheckOptions, GruCell, ParameterStore, Tape, Tensor, Var,
};
use crate::config::RunConfig;
use crate::error::Result;
use crate::graph::{augment_with_mf, SubGraph, EDGE_FEATURES};
use crate::mappo::{entropy, log_prob, softmax_probs};
use crate::sim::LANE_FEATURES;
use crate::tgn::{message_edges, tgn_loss, TgnState, TopoMode};
use crate::train::{sample_objective, Model, Sample};

/// Connected random graph: a random spanning tree plus extra edges, every
/// undirected edge stored in both directions.
pub fn random_graph<R: Rng>(rng: &mut R, n: usize, extra_edges: usize) -> Result<SubGraph> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut pairs = std::collections::BTreeSet::new();
    for i in 1..n {
        let j = order[rng.random_range(0..i)];
        let (a, b) = (order[i], j);
        pairs.insert((a.min(b), a.max(b)));
    }
    for _ in 0..extra_edges {
        if n < 2 {
            break;
        }
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a != b {
            pairs.insert((a.min(b), a.max(b)));
        }
    }
    let mut edges = Vec::new();
    let mut feats = Vec::new();
    for &(a, b) in &pairs {
        for e in [(a, b), (b, a)] {
            edges.push(e);
            feats.push((0..EDGE_FEATURES).map(|_| rng.random::<f64>()).collect::<Vec<_>>());
        }
    }
    let features = Tensor::new(
        n,
        LANE_FEATURES,
        (0..n * LANE_FEATURES).map(|_| rng.random::<f64>()).collect(),
    )?;
    let ef = if feats.is_empty() {
        Tensor::zeros(0, EDGE_FEATURES)
    } else {
        Tensor::from_rows(&feats)?
    };
    SubGraph::from_parts(0, (0..n).collect(), features, edges, ef, 0)
}

fn random_tensor<R: Rng>(rng: &mut R, r: usize, c: usize, scale: f64) -> Tensor {
    Tensor::new(r, c, (0..r * c).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)).collect())
        .expect("sized")
}

/// `sum(x ⊙ R)` for a fixed random `R`.
fn project(tape: &mut Tape, x: Var, r: &Tensor) -> Result<Var> {
    let c = tape.constant(r.clone());
    let p = tape.mul(x, c)?;
    Ok(tape.sum_all(p))
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteRow {
    pub block: String,
    pub seed: u64,
    pub parameter: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

fn report_rows(block: &str, seed: u64, rep: crate::autodiff::GradReport) -> Vec<SuiteRow> {
    rep.blocks
        .into_iter()
        .map(|b| SuiteRow {
            block: block.to_string(),
            seed,
            parameter: b.name,
            checked: b.checked,
            max_rel_err: b.max_rel_err,
            max_abs_err: b.max_abs_err,
        })
        .collect()
}

/// Finite-difference checks of every differentiable block for one seed.
pub fn gradient_suite_seed(cfg: &RunConfig, seed: u64) -> Result<Vec<SuiteRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions {
        seed,
        ..GradCheckOptions::default()
    };
    let mut rows = Vec::new();
    let n = rng.random_range(3..=9);
    let extra = rng.random_range(0..n);
    let graph = random_graph(&mut rng, n, extra)?;
    let d = cfg.model.d;

    {
        let mut store = ParameterStore::new();
        let gru = GruCell::new(&mut store, "gru", d, &mut rng)?;
        let h = random_tensor(&mut rng, n, d, 1.0);
        let m = random_tensor(&mut rng, n, d, 1.0);
        let r = random_tensor(&mut rng, n, d, 1.0);
        let rep = grad_check(
            &store,
            |t: &mut Tape| {
                let hv = t.constant(h.clone());
                let mv = t.constant(m.clone());
                let o = gru.forward(t, hv, mv)?;
                project(t, o, &r)
            },
            &opts,
        )?;
        rows.extend(report_rows("gru_cell", seed, rep));
    }
    {
        let mut store = ParameterStore::new();
        let head = GatHead::new(&mut store, "gat", d, d, EDGE_FEATURES, &mut rng)?;
        let aug = augment_with_mf(graph.clone(), &vec![0.5; LANE_FEATURES])?;
        let edges: EdgeList = message_edges(&aug);
        let x = random_tensor(&mut rng, aug.num_vertices(), d, 1.0);
        let r = random_tensor(&mut rng, aug.num_vertices(), d, 1.0);
        let rep = grad_check(
            &store,
            |t: &mut Tape| {
                let xv = t.constant(x.clone());
                let o = head.forward(t, xv, &edges)?;
                project(t, o, &r)
            },
            &opts,
        )?;
        rows.extend(report_rows("attention_head", seed, rep));
    }

    let (store, model) = Model::build(cfg, seed)?;
    let global: Vec<f64> = (0..LANE_FEATURES).map(|_| rng.random()).collect();
    let mut state = TgnState::initial(&graph, &global)?;
    state.prediction = random_tensor(&mut rng, n + 1, d, 1.0);
    let target = random_tensor(&mut rng, n + 1, d, 1.0);
    let aug = augment_with_mf(graph.clone(), &global)?;
    let (pairs, _) = aug.undirected();
    let xin = aug.features();
    let r_tv = random_tensor(&mut rng, n + 1, cfg.model.d1, 1.0);
    let topo_opts = GradCheckOptions {
        prefixes: vec!["tgn.topo".into()],
        ..opts.clone()
    };
    let rep = grad_check(
        &store,
        |t: &mut Tape| {
            let x = t.constant(xin.clone());
            let tv = model.tgn.topo.vertex_signature(t, x, &pairs)?;
            project(t, tv, &r_tv)
        },
        &topo_opts,
    )?;
    rows.extend(report_rows("topo_signature", seed, rep));

    let tmoe_opts = GradCheckOptions {
        prefixes: vec!["tgn.l0.".into(), "tgn.l1.".into()],
        ..opts.clone()
    };
    let r_pred = random_tensor(&mut rng, n + 1, d, 1.0);
    let rep = grad_check(
        &store,
        |t: &mut Tape| {
            let o = model.tgn.forward(t, &graph, &global, &state, TopoMode::Local)?;
            project(t, o.prediction, &r_pred)
        },
        &tmoe_opts,
    )?;
    rows.extend(report_rows("routing_experts_merge", seed, rep));

    let tgn_opts = GradCheckOptions {
        prefixes: vec!["tgn.".into()],
        ..opts.clone()
    };
    let rep = grad_check(
        &store,
        |t: &mut Tape| {
            let o = model.tgn.forward(t, &graph, &global, &state, TopoMode::Local)?;
            tgn_loss(t, o.prediction, &target)
        },
        &tgn_opts,
    )?;
    rows.extend(report_rows("tgn_forward_loss", seed, rep));

    let obs = random_tensor(&mut rng, 1, cfg.model.d_o, 1.0);
    let action = rng.random_range(0..2);
    let head_opts = GradCheckOptions {
        prefixes: vec!["pi.".into(), "vf.".into()],
        ..opts.clone()
    };
    let rep = grad_check(
        &store,
        |t: &mut Tape| {
            let o = t.constant(obs.clone());
            let pi = model.heads.policy.forward(t, o)?;
            let v = model.heads.value.forward(t, o)?;
            let lp = log_prob(t, pi.out, action)?;
            let h = entropy(t, pi.out)?;
            let s = t.add(lp, h)?;
            let v2 = t.square(v.out);
            t.add(s, v2)
        },
        &head_opts,
    )?;
    rows.extend(report_rows("policy_value_heads", seed, rep));

    let mut probe = Tape::new(&store);
    let out = model.tgn.forward(&mut probe, &graph, &global, &state, TopoMode::Local)?;
    let pi = model.heads.policy.forward(&mut probe, out.observation)?;
    let probs = softmax_probs(probe.value(pi.out));
    let sample = Sample {
        graph: graph.clone(),
        global_prev: global.clone(),
        state: state.clone(),
        target,
        action,
        // Slightly off-policy so the ratio sits inside the clip range.
        log_prob: probs[action].ln() - 0.05,
        value: rng.random::<f64>() - 0.5,
        reward: 0.0,
        done: false,
        advantage: 2.0 * rng.random::<f64>() - 1.0,
        raw_advantage: 2.0 * rng.random::<f64>() - 1.0,
    };
    let rep = grad_check(&store, |t: &mut Tape| Ok(sample_objective(t, &model, &sample, cfg)?.0), &opts)?;
    rows.extend(report_rows("joint_objective", seed, rep));
    Ok(rows)
}

pub fn gradient_suite(cfg: &RunConfig, seeds: u64) -> Result<Vec<SuiteRow>> {
    use rayon::prelude::*;
    let parts: Vec<Vec<SuiteRow>> = (0..seeds)
        .into_par_iter()
        .map(|s| gradient_suite_seed(cfg, s))
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Worst relative error per block name, in first-seen order.
pub fn worst_per_block(rows: &[SuiteRow]) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|(b, _)| *b == r.block) {
            Some((_, e)) => *e = e.max(r.max_rel_err),
            None => out.push((r.block.clone(), r.max_rel_err)),
        }
    }
    out
}
