//! Exact minimax solvers over finite classes.
//!
//! SBEED: `min_{V, pi} max_g L_D(V; V, pi) - R_D(g; V, pi)`. For each pair the
//! inner maximum is `L_D - min_g R_D`, so the saddle is found by scanning
//! every pair and, inside each pair, every helper. MSBO is solved the same
//! way with the hard-max Bellman target.
//!
//! Ties are broken lexicographically: smaller value first, then lower index.
//! Objectives are summed as `(f1 - f2)(f1 + f2 - 2y)` per cell, so a pair
//! whose helper reproduces it exactly scores exactly zero and mathematically
//! tied pairs stay tied in floating point.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classes::FunctionClasses;
use crate::data::{Dataset, TransitionCounts};
use crate::error::{Error, Result};
use crate::mdp::{argmax, SoftParams, StateActionValue, StateValue, TabularPolicy};

/// Whether pair enumeration runs on the rayon pool or on the calling thread.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Schedule {
    #[default]
    Parallel,
    Serial,
}

/// Indices of the chosen `(V, pi, g)` triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChosenIndices {
    pub v_idx: usize,
    pub p_idx: usize,
    pub g_idx: usize,
}

/// Saddle point of the SBEED objective.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub v_hat: StateValue,
    pub pi_hat: TabularPolicy,
    pub g_hat: StateActionValue,
    /// `L_D(V-hat; V-hat, pi-hat) - R_D(g-hat; V-hat, pi-hat)`.
    pub objective_value: f64,
    pub chosen_indices: ChosenIndices,
    pub n: usize,
    pub seed: u64,
}

/// Wire form of a [`SolveResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub v_idx: usize,
    pub p_idx: usize,
    pub g_idx: usize,
    pub objective_value: f64,
    pub n: usize,
    pub seed: u64,
}

impl SolveResult {
    pub fn summary(&self) -> SolveSummary {
        SolveSummary {
            v_idx: self.chosen_indices.v_idx,
            p_idx: self.chosen_indices.p_idx,
            g_idx: self.chosen_indices.g_idx,
            objective_value: self.objective_value,
            n: self.n,
            seed: self.seed,
        }
    }
}

/// Position and value of the smallest entry, lowest index on ties.
fn argmin<I: IntoIterator<Item = f64>>(values: I) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, x) in values.into_iter().enumerate() {
        if x < best.1 || (i == 0 && x.is_nan()) {
            best = (i, x);
        }
    }
    best
}

/// Minimizes `R_D(.; V, pi)` over the precomputed targets.
fn best_fit(
    targets: &crate::data::RegressionTargets<'_>,
    helpers: &[StateActionValue],
) -> Result<(usize, f64)> {
    let losses = helpers
        .iter()
        .map(|g| targets.mean_squared_error(g))
        .collect::<Result<Vec<f64>>>()?;
    Ok(argmin(losses))
}

/// `g-hat_{V,pi} = argmin_{g in G} R_D(g; V, pi)`, lowest index on ties.
pub fn fit_helper(
    data: &Dataset,
    v: &StateValue,
    pi: &TabularPolicy,
    classes: &FunctionClasses,
    params: SoftParams,
) -> Result<(StateActionValue, usize)> {
    let counts = data.counts();
    let targets = counts.soft_targets(v, pi, params)?;
    let (idx, _) = best_fit(&targets, &classes.helper_class)?;
    Ok((classes.helper_class[idx].clone(), idx))
}

/// Per-pair inner solution: `(L_D - min_g R_D, argmin g)`.
fn inner_value(
    counts: &TransitionCounts,
    v: &StateValue,
    pi: &TabularPolicy,
    classes: &FunctionClasses,
    params: SoftParams,
) -> Result<(f64, usize)> {
    let targets = counts.soft_targets(v, pi, params)?;
    let (g_idx, _) = best_fit(&targets, &classes.helper_class)?;
    let objective = targets.mse_difference(&v.broadcast(counts.n_actions()), &classes.helper_class[g_idx])?;
    Ok((objective, g_idx))
}

/// Exact SBEED saddle over the finite product `V x P x G`.
pub fn sbeed_solve(data: &Dataset, classes: &FunctionClasses, params: SoftParams) -> Result<SolveResult> {
    sbeed_solve_with(data, classes, params, Schedule::Parallel)
}

pub fn sbeed_solve_with(
    data: &Dataset,
    classes: &FunctionClasses,
    params: SoftParams,
    schedule: Schedule,
) -> Result<SolveResult> {
    classes.validate()?;
    let counts = data.counts();
    let np = classes.policy_class.len();
    let n_pairs = classes.value_class.len() * np;
    let eval = |k: usize| {
        inner_value(
            &counts,
            &classes.value_class[k / np],
            &classes.policy_class[k % np],
            classes,
            params,
        )
    };
    let per_pair: Vec<Result<(f64, usize)>> = match schedule {
        Schedule::Parallel => (0..n_pairs).into_par_iter().map(eval).collect(),
        Schedule::Serial => (0..n_pairs).map(eval).collect(),
    };
    let per_pair = per_pair.into_iter().collect::<Result<Vec<_>>>()?;
    let (k, objective_value) = argmin(per_pair.iter().map(|(obj, _)| *obj));
    let (v_idx, p_idx, g_idx) = (k / np, k % np, per_pair[k].1);
    Ok(SolveResult {
        v_hat: classes.value_class[v_idx].clone(),
        pi_hat: classes.policy_class[p_idx].clone(),
        g_hat: classes.helper_class[g_idx].clone(),
        objective_value,
        chosen_indices: ChosenIndices {
            v_idx,
            p_idx,
            g_idx,
        },
        n: data.n(),
        seed: data.seed,
    })
}

/// Deterministic greedy policy of `Q`, lowest action index on ties.
pub fn greedy_policy(q: &StateActionValue) -> TabularPolicy {
    let actions: Vec<usize> = (0..q.n_states()).map(|s| argmax(q.row(s))).collect();
    TabularPolicy::deterministic(q.n_actions(), &actions)
        .expect("argmax indices are within the action range")
}

/// Saddle point of the MSBO objective.
#[derive(Debug, Clone, PartialEq)]
pub struct MsboResult {
    pub q_hat: StateActionValue,
    pub policy: TabularPolicy,
    /// `l_D(Q-hat; Q-hat) - l_D(f-hat; Q-hat)`.
    pub objective_value: f64,
    pub q_idx: usize,
    pub f_idx: usize,
}

/// `min_{Q} max_{f} l_D(Q; Q) - l_D(f; Q)` with
/// `l_D(Q; Q') = (1/n) sum (Q(s_i, a_i) - r_i - gamma max_a' Q'(s'_i, a'))^2`.
pub fn msbo_solve(
    data: &Dataset,
    q_class: &[StateActionValue],
    f_class: &[StateActionValue],
) -> Result<MsboResult> {
    if q_class.is_empty() || f_class.is_empty() {
        return Err(Error::InvalidInput("MSBO classes must be non-empty".into()));
    }
    let counts = data.counts();
    let per_q: Vec<Result<(f64, usize)>> = q_class
        .par_iter()
        .map(|q| {
            let targets = counts.greedy_targets(q)?;
            let (f_idx, _) = best_fit(&targets, f_class)?;
            Ok((targets.mse_difference(q, &f_class[f_idx])?, f_idx))
        })
        .collect();
    let per_q = per_q.into_iter().collect::<Result<Vec<_>>>()?;
    let (q_idx, objective_value) = argmin(per_q.iter().map(|(obj, _)| *obj));
    Ok(MsboResult {
        q_hat: q_class[q_idx].clone(),
        policy: greedy_policy(&q_class[q_idx]),
        objective_value,
        q_idx,
        f_idx: per_q[q_idx].1,
    })
}
