//! Executable checks of the paper's identities, lemmas and bounds: Lemma 2
//! (telescoping), Eq. 3 (conditional variance), Lemma 3 (suboptimality),
//! Appendix-E Lemmas 5-7 (excess-risk statistics), Lemma 9 (quadratic
//! inequality), and Theorems 1-2 with explicit constants.
//!
//! # Explicit constants
//!
//! Write `u = i/n`, `w = j/n`, `e = eps_{G,V,P}`, `f = eps_{V,P}`, where `i`
//! and `j` are the log factors of [`BoundReport`]. Bernstein is applied with
//! range `c = 8 V^2` (Lemmas 5-7 (i)), so every range term is `16(.)/(3n)`;
//! the paper prints `4(.)/(3n)` in the Y and Z steps, which we treat as a typo.
//!
//! 1. `E[X] <= sqrt(64u(E[X] + 2e)) + 16u/3`, so by Lemma 9
//!    `E[X] <= X1 = 64u + sqrt((64u)^2 + 256ue + 2(16u/3)^2)`, and
//!    `|mean X| <= X1 + sqrt(64u(X1 + 2e)) + 16u/3`.
//! 2. `|mean Y| <= e + sqrt(32ue) + 16u/3`.
//! 3. `D` = sum of the two; `eta = f + sqrt(32wf) + 16w/3 + 2D`.
//! 4. `E[Z] <= eta + sqrt(32w E[Z]) + 16w/3`, so by Lemma 9
//!    `E[Z] <= 32w + sqrt((32w)^2 + 2(eta + 16w/3)^2)`.
//!
//! The chain value gives [`BoundReport::chain_total`]. For the four-term
//! split required by Theorem 1 we relax it with `sqrt(a+b) <= sqrt a + sqrt b`
//! and `u^{3/4} e^{1/4} <= (u + sqrt(ue))/2`:
//!
//! `E[Z] <= cw w + cu u + cf f + ce e + cwf sqrt(wf) + cue sqrt(ue)`
//!
//! with `A1 = 128 + 16 sqrt2/3`, `Xu = A1 + 8 sqrt(A1) + 64/3`,
//! `Xc = 32 + 8 sqrt2`, `cw = 64 + 32 sqrt2/3`, `cf = sqrt2`, `cwf = 8`,
//! `cu = 2 sqrt2 (Xu + 16/3)`, `cue = 2 sqrt2 (Xc + sqrt32)`, `ce = 2 sqrt2`.
//! Taking square roots term by term and multiplying by Lemma 3's
//! `2 sqrt(C2)/(1-gamma)` yields `stat_term` (w, u), `approx_term` (f, e) and
//! `cross_term` (the fourth roots).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::SQRT_2;

use crate::classes::{
    best_helper, concentrability, consistency_residual_sq, helper_realizability_error, sq_dist,
    DataDistribution, FunctionClasses,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mdp::{
    consistency_operator, dot, hard_value_iteration, occupancy_measure, performance,
    soft_value_iteration, v_lambda_max, FiniteMdp, SoftParams, StateValue, TabularPolicy,
    DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use crate::solvers::{fit_helper, SolveResult};

/// Smallest dataset ensemble accepted by [`excess_risk_stats`].
pub const MIN_ENSEMBLE: usize = 500;

/// Absolute slack of the Lemma 3 check.
pub const LEMMA3_SLACK: f64 = 1e-9;

/// Width of every Monte-Carlo tolerance, in standard errors.
pub const MC_STANDARD_ERRORS: f64 = 4.0;

/// Floor on Monte-Carlo tolerances, for statistics with zero sample variance.
const MC_ABS_FLOOR: f64 = 1e-12;

fn check_value_shape(mdp: &FiniteMdp, v: &StateValue) -> Result<()> {
    if v.len() != mdp.n_states() {
        return Err(Error::ShapeMismatch(format!(
            "value has {} states, MDP has {}",
            v.len(),
            mdp.n_states()
        )));
    }
    Ok(())
}

/// Lemma 2: `|E_{d0}[V] - J_lambda(pi) - E_{d^pi}[V - C^pi_lambda V] / (1 - gamma)|`.
///
/// Pairs with `pi(a|s) = 0` carry no occupancy and are skipped, so
/// deterministic policies are accepted.
pub fn telescoping_residual(
    mdp: &FiniteMdp,
    v: &StateValue,
    pi: &TabularPolicy,
    params: SoftParams,
) -> Result<f64> {
    check_value_shape(mdp, v)?;
    let lambda = params.lambda();
    let d = occupancy_measure(mdp, pi)?;
    let lhs = dot(mdp.init_dist(), &v.values) - performance(mdp, pi, lambda)?;
    let backup = mdp.backup(v);
    let mut rhs = 0.0;
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let p = pi.prob(s, a);
            if p == 0.0 {
                continue;
            }
            rhs += d.get(s, a) * (v.values[s] - backup.get(s, a) + lambda * p.ln());
        }
    }
    rhs /= 1.0 - mdp.discount();
    Ok((lhs - rhs).abs())
}

/// Eq. 3: returns `(E[L_D], ||V - C V||^2_mu + gamma^2 E_mu[Var_{s'}[V(s')]], gap)`.
///
/// The first value sums `mu(s,a) P(s'|s,a) (V(s) - r - gamma V(s') + lambda ln pi)^2`
/// directly; the second is the two-term decomposition.
pub fn conditional_variance_identity(
    mdp: &FiniteMdp,
    mu: &DataDistribution,
    v: &StateValue,
    pi: &TabularPolicy,
    params: SoftParams,
) -> Result<(f64, f64, f64)> {
    check_value_shape(mdp, v)?;
    let g = mdp.discount();
    let mut analytic = 0.0;
    let mut variance = 0.0;
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let m = mu.get(s, a);
            let bonus = pi.entropy_bonus(s, a, params.lambda())?;
            let base = v.values[s] - mdp.reward(s, a) - bonus;
            let mean_next = mdp.expected_next(v, s, a);
            for (s2, &p) in mdp.next_dist(s, a).iter().enumerate() {
                let resid = base - g * v.values[s2];
                analytic += m * p * resid * resid;
                let dev = v.values[s2] - mean_next;
                variance += m * p * dev * dev;
            }
        }
    }
    let decomposition = consistency_residual_sq(mdp, v, pi, params, mu)? + g * g * variance;
    Ok((analytic, decomposition, (analytic - decomposition).abs()))
}

/// Both sides of Lemma 3 for one solver output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuboptimalityReport {
    /// `J(pi*) - J(pi-hat)`, unregularized.
    pub lhs: f64,
    /// `lambda ln|A| / (1 - gamma)`.
    pub bias_term: f64,
    /// `||V-hat - C^{pi-hat}_lambda V-hat||_{2,mu}`.
    pub residual_norm: f64,
    pub c2: f64,
    /// `2 sqrt(C2) / (1 - gamma) * residual_norm`.
    pub residual_term: f64,
    pub rhs: f64,
    /// `rhs - lhs`; negative beyond [`LEMMA3_SLACK`] means a violation.
    pub margin: f64,
    pub holds: bool,
}

/// Lemma 3: `J(pi*) - J(pi-hat) <= lambda ln|A|/(1-gamma) + 2 sqrt(C2)/(1-gamma) ||V-hat - C V-hat||_mu`.
pub fn suboptimality_check(
    mdp: &FiniteMdp,
    params: SoftParams,
    mu: &DataDistribution,
    classes: &FunctionClasses,
    result: &SolveResult,
) -> Result<SuboptimalityReport> {
    let (_, pi_soft) = soft_value_iteration(mdp, params, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    if !classes.policy_class.contains(&result.pi_hat) && result.pi_hat != pi_soft {
        return Err(Error::PolicyNotInClass);
    }
    let c2 = concentrability(classes, &pi_soft, mu, mdp)?;
    let (_, pi_star) = hard_value_iteration(mdp, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let lhs = performance(mdp, &pi_star, 0.0)? - performance(mdp, &result.pi_hat, 0.0)?;
    let residual_norm =
        consistency_residual_sq(mdp, &result.v_hat, &result.pi_hat, params, mu)?.sqrt();
    let horizon = 1.0 - mdp.discount();
    let bias_term = params.lambda() * (mdp.n_actions() as f64).ln() / horizon;
    let residual_term = 2.0 * c2.sqrt() / horizon * residual_norm;
    let rhs = bias_term + residual_term;
    Ok(SuboptimalityReport {
        lhs,
        bias_term,
        residual_norm,
        c2,
        residual_term,
        rhs,
        margin: rhs - lhs,
        holds: lhs <= rhs + LEMMA3_SLACK,
    })
}

/// Pass/fail flags of [`excess_risk_stats`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundFlags {
    /// Lemmas 5-7 (i): every sample within `8 V^2_{lambda,max}`.
    pub x_abs: bool,
    pub y_abs: bool,
    pub z_abs: bool,
    /// Lemma 5 (ii): the exact conditional means are `>= 0` and the sample
    /// mean is `>= -4` s.e.
    pub x_mean_nonnegative: bool,
    /// Lemma 6 (ii): sample mean of Y within 4 s.e. of `||g-bar - C V||^2`.
    pub y_mean: bool,
    /// Lemma 7 (ii): sample mean of Z within 4 s.e. of `||V - C V||^2`.
    pub z_mean: bool,
    /// Lemmas 5-7 (iii), each with 4 s.e. slack.
    pub x_variance: bool,
    pub y_variance: bool,
    pub z_variance: bool,
}

impl BoundFlags {
    pub fn all(&self) -> bool {
        self.x_abs
            && self.y_abs
            && self.z_abs
            && self.x_mean_nonnegative
            && self.y_mean
            && self.z_mean
            && self.x_variance
            && self.y_variance
            && self.z_variance
    }
}

/// Sample moments of the Appendix-E random variables X, Y, Z.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcessRiskStats {
    pub x_mean: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub x_var: f64,
    pub y_mean: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub y_var: f64,
    pub z_mean: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub z_var: f64,
    /// Mean over fitted helpers of `||g-hat - C V||^2 - ||g-bar - C V||^2`.
    pub x_expected: f64,
    /// `||g-bar - C V||^2_{2,mu}`.
    pub y_expected: f64,
    /// `||V - C V||^2_{2,mu}`.
    pub z_expected: f64,
    /// The `eps_{G,V,P}` used in the variance bounds.
    pub eps_gvp: f64,
    pub v_lambda_max: f64,
    pub x_samples: usize,
    pub yz_samples: usize,
    pub bounds_checked: BoundFlags,
}

/// Sample statistics in a fixed summation order.
struct Moments {
    n: f64,
    mean: f64,
    var: f64,
    /// Standard error of the sample variance, from the fourth central moment.
    var_se: f64,
    min: f64,
    max: f64,
}

fn moments(xs: &[f64]) -> Moments {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    let var = if n > 1.0 { m2 * n / (n - 1.0) } else { 0.0 };
    Moments {
        n,
        mean,
        var,
        var_se: ((m4 - m2 * m2).max(0.0) / n).sqrt(),
        min: xs.iter().copied().fold(f64::INFINITY, f64::min),
        max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

fn tolerance(se: f64) -> f64 {
    (MC_STANDARD_ERRORS * se).max(MC_ABS_FLOOR)
}

/// Appendix-E statistics (Lemmas 5-7) over an ensemble of datasets.
///
/// Y and Z use every transition of every dataset. For X, the helper
/// `g-hat_{V,pi}` is fitted on dataset `2k` and X is evaluated on dataset
/// `2k+1`: Lemma 5 treats `g-hat` as a fixed class member (via the union
/// bound), and an in-sample mean would be `<= 0` by construction.
/// Standard errors for X are computed from per-dataset means, since samples
/// sharing a fitted helper are only conditionally independent.
///
/// `eps_{G,V,P}` is taken as the maximum of the class-level value and the
/// pair's own `||g-bar - C V||^2`, so the bounds stay valid when `(V, pi)` is
/// not a class member.
pub fn excess_risk_stats(
    ensemble: &[Dataset],
    classes: &FunctionClasses,
    v: &StateValue,
    pi: &TabularPolicy,
    params: SoftParams,
    mdp: &FiniteMdp,
    mu: &DataDistribution,
) -> Result<ExcessRiskStats> {
    if ensemble.len() < MIN_ENSEMBLE {
        return Err(Error::EnsembleTooSmall {
            got: ensemble.len(),
            need: MIN_ENSEMBLE,
        });
    }
    classes.check_compatible(mdp)?;
    let c = consistency_operator(mdp, v, pi, params)?;
    let (bar_idx, y_expected) = best_helper(classes, &c, mu)?;
    let g_bar = &classes.helper_class[bar_idx];
    let z_expected = consistency_residual_sq(mdp, v, pi, params, mu)?;
    let eps_gvp =
        helper_realizability_error(classes, mu, mdp, params)?.max(y_expected);
    let vmax = v_lambda_max(mdp.r_max(), params.lambda(), mdp.n_actions(), mdp.discount());
    let bound = 8.0 * vmax * vmax;
    let gamma = mdp.discount();
    let lambda = params.lambda();

    // y_i = r + gamma V(s') - lambda ln pi(a|s), per transition.
    let targets = |data: &Dataset| -> Result<Vec<f64>> {
        data.transitions
            .iter()
            .map(|t| Ok(t.r + gamma * v.values[t.s_next] + pi.entropy_bonus(t.s, t.a, lambda)?))
            .collect()
    };

    let yz: Vec<Result<(Vec<f64>, Vec<f64>)>> = ensemble
        .par_iter()
        .map(|data| {
            let ys = targets(data)?;
            let mut y_s = Vec::with_capacity(ys.len());
            let mut z_s = Vec::with_capacity(ys.len());
            for (t, y) in data.transitions.iter().zip(&ys) {
                let sq = |f: f64| (f - y) * (f - y);
                let exact = sq(c.get(t.s, t.a));
                y_s.push(sq(g_bar.get(t.s, t.a)) - exact);
                z_s.push(sq(v.values[t.s]) - exact);
            }
            Ok((y_s, z_s))
        })
        .collect();
    let mut y_all = Vec::new();
    let mut z_all = Vec::new();
    for r in yz {
        let (y_s, z_s) = r?;
        y_all.extend(y_s);
        z_all.extend(z_s);
    }

    // (X samples, exact conditional mean of X given the fitted helper).
    let xs: Vec<Result<(Vec<f64>, f64)>> = (0..ensemble.len() / 2)
        .into_par_iter()
        .map(|k| {
            let (g_hat, _) = fit_helper(&ensemble[2 * k], v, pi, classes, params)?;
            let eval = &ensemble[2 * k + 1];
            let ys = targets(eval)?;
            let samples = eval
                .transitions
                .iter()
                .zip(&ys)
                .map(|(t, y)| {
                    let a = g_hat.get(t.s, t.a) - y;
                    let b = g_bar.get(t.s, t.a) - y;
                    a * a - b * b
                })
                .collect();
            Ok((samples, sq_dist(&g_hat, &c, mu) - y_expected))
        })
        .collect();
    let mut x_all = Vec::new();
    let mut x_cluster_means = Vec::new();
    let mut x_cluster_second = Vec::new();
    let mut x_conditional = Vec::new();
    for r in xs {
        let (samples, expected) = r?;
        let m = samples.len() as f64;
        x_cluster_means.push(samples.iter().sum::<f64>() / m);
        x_cluster_second.push(samples.iter().map(|x| x * x).sum::<f64>() / m);
        x_conditional.push(expected);
        x_all.extend(samples);
    }

    let x = moments(&x_all);
    let y = moments(&y_all);
    let z = moments(&z_all);
    let x_clusters = moments(&x_cluster_means);
    let x_expected = x_conditional.iter().sum::<f64>() / x_conditional.len() as f64;
    let x_mean_se = x_clusters.var.sqrt() / x_clusters.n.sqrt();

    // Var[X] <= E[X^2] <= 32 V^2 (E[X] + 2 eps); the slack is the standard
    // error of the per-dataset statistic 32 V^2 mean - second moment.
    let vv = vmax * vmax;
    let x_stat: Vec<f64> = x_cluster_means
        .iter()
        .zip(&x_cluster_second)
        .map(|(m1, m2)| 32.0 * vv * m1 - m2)
        .collect();
    let x_stat_se = moments(&x_stat).var.sqrt() / x_clusters.n.sqrt();
    let x_var_slack = tolerance(x_stat_se.max(x.var_se * (x.n / x_clusters.n).sqrt()));

    let flags = BoundFlags {
        x_abs: x_all.iter().all(|s| s.abs() <= bound),
        y_abs: y_all.iter().all(|s| s.abs() <= bound),
        z_abs: z_all.iter().all(|s| s.abs() <= bound),
        x_mean_nonnegative: x_conditional.iter().all(|e| *e >= 0.0)
            && x.mean >= -tolerance(x_mean_se),
        y_mean: (y.mean - y_expected).abs() <= tolerance(y.var.sqrt() / y.n.sqrt()),
        z_mean: (z.mean - z_expected).abs() <= tolerance(z.var.sqrt() / z.n.sqrt()),
        x_variance: x.var <= 32.0 * vv * (x.mean + 2.0 * eps_gvp) + x_var_slack,
        y_variance: y.var <= 16.0 * vv * eps_gvp + tolerance(y.var_se),
        z_variance: z.var <= 16.0 * vv * z_expected + tolerance(z.var_se),
    };

    Ok(ExcessRiskStats {
        x_mean: x.mean,
        x_min: x.min,
        x_max: x.max,
        x_var: x.var,
        y_mean: y.mean,
        y_min: y.min,
        y_max: y.max,
        y_var: y.var,
        z_mean: z.mean,
        z_min: z.min,
        z_max: z.max,
        z_var: z.var,
        x_expected,
        y_expected,
        z_expected,
        eps_gvp,
        v_lambda_max: vmax,
        x_samples: x_all.len(),
        yz_samples: y_all.len(),
        bounds_checked: flags,
    })
}

/// Inputs of [`theorem_bound`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub c2: f64,
    pub eps_vp: f64,
    pub eps_gvp: f64,
    pub n: u64,
    pub delta: f64,
    /// `(|V|, |P|, |G|)`.
    pub class_sizes: (usize, usize, usize),
    pub lambda: f64,
    pub discount: f64,
    pub r_max: f64,
    pub n_actions: usize,
}

/// Theorem 1 right-hand side with every intermediate term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub c2: f64,
    pub eps_vp: f64,
    pub eps_gvp: f64,
    pub imath: f64,
    pub jmath: f64,
    pub delta: f64,
    pub delta_prime: f64,
    pub n: u64,
    pub bias_term: f64,
    pub approx_term: f64,
    pub cross_term: f64,
    pub stat_term: f64,
    /// `bias_term + approx_term + cross_term + stat_term`.
    pub rhs_total: f64,
    /// Bias plus Lemma 3's factor times the unrelaxed Appendix-E chain;
    /// always `<= rhs_total`.
    pub chain_total: f64,
}

const A1: f64 = 128.0 + 16.0 * SQRT_2 / 3.0;
const XC: f64 = 32.0 + 8.0 * SQRT_2;
const CW: f64 = 64.0 + 32.0 * SQRT_2 / 3.0;
const CF: f64 = SQRT_2;
const CE: f64 = 2.0 * SQRT_2;
const CWF: f64 = 8.0;

fn xu() -> f64 {
    A1 + 8.0 * A1.sqrt() + 64.0 / 3.0
}

fn cu() -> f64 {
    2.0 * SQRT_2 * (xu() + 16.0 / 3.0)
}

fn cue() -> f64 {
    2.0 * SQRT_2 * (XC + 32f64.sqrt())
}

fn check_bound_inputs(p: &BoundInputs) -> Result<()> {
    if !(p.delta > 0.0 && p.delta < 1.0) {
        return Err(Error::InvalidDelta(p.delta));
    }
    let nonneg = [
        ("c2", p.c2),
        ("eps_vp", p.eps_vp),
        ("eps_gvp", p.eps_gvp),
        ("r_max", p.r_max),
    ];
    for (name, x) in nonneg {
        if !(x.is_finite() && x >= 0.0) {
            return Err(Error::InvalidInput(format!("{name} must be finite and >= 0, got {x}")));
        }
    }
    if !(p.lambda.is_finite() && p.lambda > 0.0) {
        return Err(Error::InvalidLambda(p.lambda));
    }
    if !(0.0..1.0).contains(&p.discount) {
        return Err(Error::DiscountOutOfRange(p.discount));
    }
    let (nv, np, ng) = p.class_sizes;
    if p.n == 0 || p.n_actions == 0 || nv == 0 || np == 0 || ng == 0 {
        return Err(Error::InvalidInput(
            "n, |A| and the class sizes must be positive".into(),
        ));
    }
    Ok(())
}

/// Theorem 1 with the explicit constants derived in the module docs.
pub fn theorem_bound(p: &BoundInputs) -> Result<BoundReport> {
    check_bound_inputs(p)?;
    let (nv, np, ng) = p.class_sizes;
    let vmax = v_lambda_max(p.r_max, p.lambda, p.n_actions, p.discount);
    let vv = vmax * vmax;
    let delta_prime = p.delta / 4.0;
    let imath = vv * ((nv as f64).ln() + (np as f64).ln() + (ng as f64).ln() - delta_prime.ln());
    let jmath = vv * ((nv as f64).ln() + (np as f64).ln() - delta_prime.ln());
    let n = p.n as f64;
    let (u, w, e, f) = (imath / n, jmath / n, p.eps_gvp, p.eps_vp);

    let horizon = 1.0 - p.discount;
    let factor = 2.0 * p.c2.sqrt() / horizon;
    let bias_term = p.lambda * (p.n_actions as f64).ln() / horizon;
    let stat_term = factor * (CW.sqrt() * w.sqrt() + cu().sqrt() * u.sqrt());
    let approx_term = factor * (CF.sqrt() * f.sqrt() + CE.sqrt() * e.sqrt());
    let cross_term =
        factor * (CWF.sqrt() * (w * f).powf(0.25) + cue().sqrt() * (u * e).powf(0.25));
    let rhs_total = bias_term + approx_term + cross_term + stat_term;

    let third = 16.0 / 3.0;
    let x1 = 64.0 * u + ((64.0 * u).powi(2) + 256.0 * u * e + 2.0 * (third * u).powi(2)).sqrt();
    let x_bound = x1 + (64.0 * u * (x1 + 2.0 * e)).sqrt() + third * u;
    let y_bound = e + (32.0 * u * e).sqrt() + third * u;
    let eta = f + (32.0 * w * f).sqrt() + third * w + 2.0 * (x_bound + y_bound);
    let ez = 32.0 * w + ((32.0 * w).powi(2) + 2.0 * (eta + third * w).powi(2)).sqrt();
    let chain_total = bias_term + factor * ez.sqrt();

    Ok(BoundReport {
        c2: p.c2,
        eps_vp: p.eps_vp,
        eps_gvp: p.eps_gvp,
        imath,
        jmath,
        delta: p.delta,
        delta_prime,
        n: p.n,
        bias_term,
        approx_term,
        cross_term,
        stat_term,
        rhs_total,
        chain_total,
    })
}

/// Largest `n` [`sample_complexity`] searches before giving up.
const MAX_SAMPLE_SIZE: u64 = 1 << 62;

/// Theorem 2: smallest `n` with `rhs_total <= epsilon` when both
/// approximation errors are zero. `base.n`, `base.eps_vp` and `base.eps_gvp`
/// are ignored.
pub fn sample_complexity(epsilon: f64, base: &BoundInputs) -> Result<u64> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::InvalidInput(format!("epsilon must be positive, got {epsilon}")));
    }
    let ln_a = (base.n_actions as f64).ln();
    let limit = (1.0 - base.discount) * epsilon / (2.0 * ln_a);
    if base.lambda > limit {
        return Err(Error::LambdaTooLarge {
            lambda: base.lambda,
            limit,
        });
    }
    let at = |n: u64| -> Result<f64> {
        let inputs = BoundInputs {
            n,
            eps_vp: 0.0,
            eps_gvp: 0.0,
            ..base.clone()
        };
        Ok(theorem_bound(&inputs)?.rhs_total)
    };
    let mut hi = 1u64;
    while at(hi)? > epsilon {
        if hi >= MAX_SAMPLE_SIZE {
            return Err(Error::InvalidInput(format!(
                "no sample size up to 2^62 reaches epsilon = {epsilon}"
            )));
        }
        hi *= 2;
    }
    // Invariant: at(hi) <= epsilon and (lo == 0 or at(lo) > epsilon).
    let mut lo = hi / 2;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if at(mid)? <= epsilon {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Lemma 9: `a + sqrt(a^2 + 2(b + c^2))`, an upper bound on any `x >= 0`
/// with `x <= sqrt(a x + b) + c`.
pub fn quadratic_inequality_root(a: f64, b: f64, c: f64) -> Result<f64> {
    for x in [a, b, c] {
        if !(x >= 0.0) {
            return Err(Error::NegativeInput(x));
        }
    }
    Ok(a + (a * a + 2.0 * (b + c * c)).sqrt())
}

/// Outcome of [`lemma9_property_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma9Check {
    pub samples: usize,
    pub violations: usize,
    /// Largest `x / root` seen (the lemma asserts `<= 1`).
    pub worst_ratio: f64,
}

/// Rejection-samples `samples` tuples `(a, b, c, x)` with `a, b, c` in
/// `[0, 5)` and `0 <= x <= sqrt(a x + b) + c`, and counts those with
/// `x > quadratic_inequality_root(a, b, c)`. One draw in four uses the
/// largest premise-satisfying `x`, `c + a/2 + sqrt(a^2/4 + b + a c)`.
pub fn lemma9_property_check(samples: usize, seed: u64) -> Lemma9Check {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut check = Lemma9Check {
        samples: 0,
        violations: 0,
        worst_ratio: 0.0,
    };
    while check.samples < samples {
        let (a, b, c) = (
            5.0 * rng.random::<f64>(),
            5.0 * rng.random::<f64>(),
            5.0 * rng.random::<f64>(),
        );
        let root = quadratic_inequality_root(a, b, c).expect("inputs are non-negative");
        let x = if rng.random_range(0..4) == 0 {
            c + a / 2.0 + (a * a / 4.0 + b + a * c).sqrt()
        } else {
            (1.5 * root + 1.0) * rng.random::<f64>()
        };
        if x > (a * x + b).sqrt() + c {
            continue;
        }
        check.samples += 1;
        if x > root {
            check.violations += 1;
        }
        if root > 0.0 {
            check.worst_ratio = check.worst_ratio.max(x / root);
        }
    }
    check
}
