//! Brute-force reference implementations shared by the integration tests.
//!
//! They loop over raw transitions instead of the count-compressed cells the
//! library uses, so they share no summation code with the solvers.

#![allow(dead_code)]

use sbeedlab::classes::FunctionClasses;
use sbeedlab::data::{Dataset, Transition};
use sbeedlab::mdp::StateActionValue;

/// Per-transition nested-loop SBEED oracle: `(v_idx, p_idx, g_idx)`.
///
/// Like the solver, the objective is summed as `(V - g)(V + g - 2y)` so that
/// pairs reproduced exactly by their helper tie at zero.
pub fn sbeed_oracle(data: &Dataset, classes: &FunctionClasses, lambda: f64) -> (usize, usize, usize) {
    let n = data.n() as f64;
    let gamma = data.discount();
    let mut best = (f64::INFINITY, (0, 0, 0));
    for (vi, v) in classes.value_class.iter().enumerate() {
        for (pi_idx, pi) in classes.policy_class.iter().enumerate() {
            let target = |t: &Transition| {
                t.r + gamma * v.values[t.s_next] - lambda * pi.prob(t.s, t.a).ln()
            };
            let mut fit = (f64::INFINITY, 0);
            for (gi, g) in classes.helper_class.iter().enumerate() {
                let mut r = 0.0;
                for t in &data.transitions {
                    r += (g.get(t.s, t.a) - target(t)).powi(2);
                }
                if r < fit.0 {
                    fit = (r, gi);
                }
            }
            let g = &classes.helper_class[fit.1];
            let mut diff = 0.0;
            for t in &data.transitions {
                let (a, b) = (v.values[t.s], g.get(t.s, t.a));
                diff += (a - b) * (a + b - 2.0 * target(t));
            }
            let obj = diff / n;
            if obj < best.0 {
                best = (obj, (vi, pi_idx, fit.1));
            }
        }
    }
    best.1
}

/// Per-transition nested-loop MSBO oracle: `(q_idx, f_idx)`.
pub fn msbo_oracle(data: &Dataset, q_class: &[StateActionValue], f_class: &[StateActionValue]) -> (usize, usize) {
    let gamma = data.discount();
    let mut best = (f64::INFINITY, (0, 0));
    for (qi, q) in q_class.iter().enumerate() {
        let target = |t: &Transition| {
            t.r + gamma * q.row(t.s_next).iter().copied().fold(f64::NEG_INFINITY, f64::max)
        };
        let mut fit = (f64::INFINITY, 0);
        for (fi, f) in f_class.iter().enumerate() {
            let r: f64 = data.transitions.iter().map(|t| (f.get(t.s, t.a) - target(t)).powi(2)).sum();
            if r < fit.0 {
                fit = (r, fi);
            }
        }
        let f = &f_class[fit.1];
        let diff: f64 = data
            .transitions
            .iter()
            .map(|t| {
                let (a, b) = (q.get(t.s, t.a), f.get(t.s, t.a));
                (a - b) * (a + b - 2.0 * target(t))
            })
            .sum();
        let obj = diff / data.n() as f64;
        if obj < best.0 {
            best = (obj, (qi, fit.1));
        }
    }
    best.1
}
