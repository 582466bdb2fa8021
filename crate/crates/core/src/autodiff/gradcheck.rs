//! Central finite-difference verification of tape gradients.
//!
//! The function under test is evaluated once on a recording tape; every
//! perturbed evaluation replays the recorded branch decisions so both sides
//! differentiate the same smooth piece.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Gradients, ParamId, ParameterStore};
use super::tape::{Decision, Tape, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Entries checked per parameter block (all when the block is smaller).
    pub samples_per_block: usize,
    pub seed: u64,
    /// Only parameters whose name starts with one of these prefixes (all when empty).
    pub prefixes: Vec<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-5,
            samples_per_block: 24,
            seed: 0,
            prefixes: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub loss: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.blocks.iter().all(|b| b.max_rel_err <= tol)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Records `f`, returning its loss, analytic gradients and decision log.
pub fn analytic_gradients<F>(store: &ParameterStore, f: &F) -> Result<(f64, Gradients, Arc<Vec<Decision>>)>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let loss = f(&mut tape)?;
    let grads = tape.backward(loss)?;
    let value = tape.value(loss).item();
    Ok((value, grads, Arc::new(tape.decisions())))
}

/// Compares `analytic` against central differences of `f` around `store`.
pub fn compare_with_numeric<F>(
    store: &ParameterStore,
    f: &F,
    analytic: &Gradients,
    log: Arc<Vec<Decision>>,
    opts: &GradCheckOptions,
) -> Result<Vec<BlockReport>>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut blocks = Vec::new();
    for (id, param) in store.iter() {
        if !opts.prefixes.is_empty() && !opts.prefixes.iter().any(|p| param.name.starts_with(p)) {
            continue;
        }
        let n = param.value.len();
        if n == 0 {
            continue;
        }
        let entries = pick_entries(analytic.get(id), opts.samples_per_block, &mut rng);
        let mut report = BlockReport {
            name: param.name.clone(),
            checked: entries.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        for k in entries {
            let numeric = central_difference(&mut work, id, k, f, &log, opts.step)?;
            let a = analytic.get(id)[k];
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.max_rel_err = report.max_rel_err.max(relative_error(a, numeric, opts.floor));
        }
        blocks.push(report);
    }
    Ok(blocks)
}

fn pick_entries(g: &[f64], budget: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = g.len();
    if n <= budget {
        return (0..n).collect();
    }
    let mut by_mag: Vec<usize> = (0..n).collect();
    by_mag.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()));
    let mut chosen: Vec<usize> = by_mag[..budget / 4].to_vec();
    for k in sample(rng, n, budget) {
        if chosen.len() >= budget {
            break;
        }
        if !chosen.contains(&k) {
            chosen.push(k);
        }
    }
    chosen
}

fn central_difference<F>(
    work: &mut ParameterStore,
    id: ParamId,
    k: usize,
    f: &F,
    log: &Arc<Vec<Decision>>,
    h: f64,
) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let orig = work.tensor(id).data()[k];
    let eval = |x: f64, work: &mut ParameterStore| -> Result<f64> {
        work.tensor_mut(id).data_mut()[k] = x;
        let mut tape = Tape::replaying(work, log.clone());
        let out = f(&mut tape)?;
        Ok(tape.value(out).item())
    };
    let plus = eval(orig + h, work)?;
    let minus = eval(orig - h, work)?;
    work.tensor_mut(id).data_mut()[k] = orig;
    Ok((plus - minus) / (2.0 * h))
}

/// Full check: analytic gradients from one recorded pass, numeric gradients
/// from replayed passes.
pub fn grad_check<F>(store: &ParameterStore, f: F, opts: &GradCheckOptions) -> Result<GradReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let (loss, analytic, log) = analytic_gradients(store, &f)?;
    let blocks = compare_with_numeric(store, &f, &analytic, log, opts)?;
    Ok(GradReport { loss, blocks })
}
