//! Finite function classes and the structural quantities of the analysis:
//! the concentrability coefficient `C2` and the two approximation errors.
//!
//! Every quantity is computed by exhaustive enumeration over the class
//! members. Scans that are parallelized collect per-index results first and
//! reduce sequentially (value first, then lowest index), so the outcome does
//! not depend on the thread schedule.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{
    consistency_operator, occupancy_measure, soft_value_iteration, v_lambda_max, FiniteMdp,
    OccupancyMeasure, SoftParams, StateActionValue, StateValue, TabularPolicy, DEFAULT_MAX_ITER,
    DEFAULT_TOL, STOCHASTIC_TOL,
};

/// Upper bound on the number of generated members per class.
pub const MAX_GENERATED_MEMBERS: usize = 64;

/// Data distribution `mu` over state-action pairs, with full support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataDistribution {
    n_states: usize,
    n_actions: usize,
    mass: Vec<f64>,
    id: String,
}

impl DataDistribution {
    pub fn new(n_states: usize, n_actions: usize, mass: Vec<f64>, id: impl Into<String>) -> Result<Self> {
        if n_states == 0 || n_actions == 0 || mass.len() != n_states * n_actions {
            return Err(Error::ShapeMismatch(format!(
                "distribution has {} entries for {n_states}x{n_actions}",
                mass.len()
            )));
        }
        for (i, &m) in mass.iter().enumerate() {
            if !m.is_finite() || m < 0.0 {
                return Err(Error::NegativeEntry {
                    what: "data distribution",
                    value: m,
                });
            }
            if m == 0.0 {
                return Err(Error::ZeroSupport {
                    state: i / n_actions,
                    action: i % n_actions,
                });
            }
        }
        let sum: f64 = mass.iter().sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::NonStochasticDistribution { sum });
        }
        Ok(DataDistribution {
            n_states,
            n_actions,
            mass,
            id: id.into(),
        })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let k = n_states * n_actions;
        DataDistribution {
            n_states,
            n_actions,
            mass: vec![1.0 / k as f64; k],
            id: "uniform".into(),
        }
    }

    /// `(1 - mix) d^pi + mix * uniform`; `mix > 0` guarantees full support.
    pub fn from_occupancy(occ: &OccupancyMeasure, n_states: usize, n_actions: usize, mix: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&mix) {
            return Err(Error::InvalidInput(format!("mixing weight {mix} outside [0, 1]")));
        }
        let k = (n_states * n_actions) as f64;
        let mut mass: Vec<f64> = occ
            .mass()
            .iter()
            .map(|d| (1.0 - mix) * d + mix / k)
            .collect();
        let total: f64 = mass.iter().sum();
        mass.iter_mut().for_each(|m| *m /= total);
        Self::new(n_states, n_actions, mass, format!("occupancy(mix={mix})"))
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.mass[s * self.n_actions + a]
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    fn check_table(&self, f: &StateActionValue) -> Result<()> {
        if f.n_states() != self.n_states || f.n_actions() != self.n_actions {
            return Err(Error::ShapeMismatch(format!(
                "table is {}x{}, distribution is {}x{}",
                f.n_states(),
                f.n_actions(),
                self.n_states,
                self.n_actions
            )));
        }
        Ok(())
    }
}

/// `||f||^2_{2,mu} = sum mu(s,a) f(s,a)^2`.
pub fn weighted_sq_norm(f: &StateActionValue, mu: &DataDistribution) -> Result<f64> {
    mu.check_table(f)?;
    Ok(f.values.iter().zip(&mu.mass).map(|(x, m)| m * x * x).sum())
}

/// `||f||_{2,mu}`.
pub fn weighted_norm(f: &StateActionValue, mu: &DataDistribution) -> Result<f64> {
    weighted_sq_norm(f, mu).map(f64::sqrt)
}

/// `||V - g||^2_{2,mu}` where `V` is broadcast over actions.
pub(crate) fn sq_dist_state(v: &StateValue, g: &StateActionValue, mu: &DataDistribution) -> f64 {
    let na = mu.n_actions;
    g.values
        .iter()
        .zip(&mu.mass)
        .enumerate()
        .map(|(i, (x, m))| {
            let d = v.values[i / na] - x;
            m * d * d
        })
        .sum()
}

pub(crate) fn sq_dist(f: &StateActionValue, g: &StateActionValue, mu: &DataDistribution) -> f64 {
    f.values
        .iter()
        .zip(&g.values)
        .zip(&mu.mass)
        .map(|((x, y), m)| m * (x - y) * (x - y))
        .sum()
}

/// Recipe for [`build_perturbation_classes`].
///
/// Members are Gaussian perturbations of the soft optimum: value members in
/// value space, policy members in logit space, helper members around
/// `C^pi_lambda V` for class pairs. Member `k` uses scale `base * decay^k`,
/// so `decay < 1` produces a geometric ladder of approximation levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassSpec {
    pub n_values: usize,
    pub n_policies: usize,
    /// Noisy helpers, added after the closure when `helper_complete`.
    pub n_helpers: usize,
    pub value_scale: f64,
    pub logit_scale: f64,
    pub helper_scale: f64,
    pub scale_decay: f64,
    /// Member 0 of the value and policy classes is the exact soft optimum.
    pub realizable: bool,
    /// The helper class contains `C^pi_lambda V` for every class pair.
    pub helper_complete: bool,
}

impl Default for ClassSpec {
    fn default() -> Self {
        ClassSpec {
            n_values: 8,
            n_policies: 8,
            n_helpers: 8,
            value_scale: 0.5,
            logit_scale: 0.5,
            helper_scale: 0.5,
            scale_decay: 1.0,
            realizable: true,
            helper_complete: true,
        }
    }
}

/// The enumerated classes `V`, `P`, `G` with their common range bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionClasses {
    pub value_class: Vec<StateValue>,
    pub policy_class: Vec<TabularPolicy>,
    pub helper_class: Vec<StateActionValue>,
    pub lambda: f64,
    pub v_lambda_max: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub spec: Option<ClassSpec>,
}

impl FunctionClasses {
    /// Assembles classes for `mdp` and checks every box and log constraint.
    pub fn new(
        mdp: &FiniteMdp,
        params: SoftParams,
        value_class: Vec<StateValue>,
        policy_class: Vec<TabularPolicy>,
        helper_class: Vec<StateActionValue>,
    ) -> Result<Self> {
        let classes = FunctionClasses {
            value_class,
            policy_class,
            helper_class,
            lambda: params.lambda(),
            v_lambda_max: v_lambda_max(mdp.r_max(), params.lambda(), mdp.n_actions(), mdp.discount()),
            seed: None,
            spec: None,
        };
        classes.check_compatible(mdp)?;
        Ok(classes)
    }

    /// `(|V|, |P|, |G|)`.
    pub fn sizes(&self) -> (usize, usize, usize) {
        (
            self.value_class.len(),
            self.policy_class.len(),
            self.helper_class.len(),
        )
    }

    pub fn params(&self) -> Result<SoftParams> {
        SoftParams::new(self.lambda)
    }

    /// Checks the box and log constraints against the stored range bound.
    pub fn validate(&self) -> Result<()> {
        let vmax = self.v_lambda_max;
        SoftParams::new(self.lambda)?;
        if self.value_class.is_empty() || self.policy_class.is_empty() || self.helper_class.is_empty() {
            return Err(Error::ClassConstraint("every class must be non-empty".into()));
        }
        for (i, v) in self.value_class.iter().enumerate() {
            if v.values.iter().any(|x| !(0.0..=vmax).contains(x)) {
                return Err(Error::ClassConstraint(format!("value member {i} leaves [0, {vmax}]")));
            }
        }
        let log_bound = vmax / self.lambda;
        for (i, p) in self.policy_class.iter().enumerate() {
            if p.log_sup_norm() > log_bound {
                return Err(Error::ClassConstraint(format!(
                    "policy member {i} has |ln pi| = {} > {log_bound}",
                    p.log_sup_norm()
                )));
            }
        }
        for (i, g) in self.helper_class.iter().enumerate() {
            if g.values.iter().any(|x| !(0.0..=2.0 * vmax).contains(x)) {
                return Err(Error::ClassConstraint(format!(
                    "helper member {i} leaves [0, {}]",
                    2.0 * vmax
                )));
            }
        }
        Ok(())
    }

    /// [`validate`](Self::validate) plus shape and range-bound agreement with `mdp`.
    pub fn check_compatible(&self, mdp: &FiniteMdp) -> Result<()> {
        self.validate()?;
        let expected = v_lambda_max(mdp.r_max(), self.lambda, mdp.n_actions(), mdp.discount());
        if self.v_lambda_max != expected {
            return Err(Error::ClassConstraint(format!(
                "v_lambda_max {} differs from {expected}",
                self.v_lambda_max
            )));
        }
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        if self.value_class.iter().any(|v| v.len() != ns)
            || self
                .policy_class
                .iter()
                .any(|p| p.n_states() != ns || p.n_actions() != na)
            || self
                .helper_class
                .iter()
                .any(|g| g.n_states() != ns || g.n_actions() != na)
        {
            return Err(Error::ShapeMismatch("class member shape differs from MDP".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let classes: FunctionClasses = serde_json::from_str(text)?;
        classes.validate()?;
        Ok(classes)
    }
}

/// `C2 = max over P and pi*_lambda of sum d^pi(s,a)^2 / mu(s,a)`.
pub fn concentrability(
    classes: &FunctionClasses,
    pi_star: &TabularPolicy,
    mu: &DataDistribution,
    mdp: &FiniteMdp,
) -> Result<f64> {
    let ratios: Vec<Result<f64>> = classes
        .policy_class
        .par_iter()
        .chain(rayon::iter::once(pi_star))
        .map(|pi| importance_second_moment(mdp, pi, mu))
        .collect();
    let mut c2 = 0.0f64;
    for r in ratios {
        c2 = c2.max(r?);
    }
    Ok(c2)
}

/// `||d^pi / mu||^2_{2,mu}` for one policy.
pub fn importance_second_moment(mdp: &FiniteMdp, pi: &TabularPolicy, mu: &DataDistribution) -> Result<f64> {
    if mu.n_states != mdp.n_states() || mu.n_actions != mdp.n_actions() {
        return Err(Error::ShapeMismatch("distribution shape differs from MDP".into()));
    }
    let d = occupancy_measure(mdp, pi)?;
    let mut total = 0.0;
    for (i, (&dm, &m)) in d.mass().iter().zip(&mu.mass).enumerate() {
        if m <= 0.0 {
            return Err(Error::ZeroSupport {
                state: i / mu.n_actions,
                action: i % mu.n_actions,
            });
        }
        total += dm * dm / m;
    }
    Ok(total)
}

/// `||V - C^pi_lambda V||^2_{2,mu}`.
pub fn consistency_residual_sq(
    mdp: &FiniteMdp,
    v: &StateValue,
    pi: &TabularPolicy,
    params: SoftParams,
    mu: &DataDistribution,
) -> Result<f64> {
    let c = consistency_operator(mdp, v, pi, params)?;
    mu.check_table(&c)?;
    Ok(sq_dist_state(v, &c, mu))
}

/// `eps_{V,P}` and its minimizing pair `(V-bar, pi-bar)` as class indices.
pub fn realizability_error(
    classes: &FunctionClasses,
    mu: &DataDistribution,
    mdp: &FiniteMdp,
    params: SoftParams,
) -> Result<(f64, (usize, usize))> {
    let np = classes.policy_class.len();
    let residuals: Vec<Result<f64>> = (0..classes.value_class.len() * np)
        .into_par_iter()
        .map(|k| {
            consistency_residual_sq(
                mdp,
                &classes.value_class[k / np],
                &classes.policy_class[k % np],
                params,
                mu,
            )
        })
        .collect();
    let mut best = (f64::INFINITY, (0, 0));
    for (k, r) in residuals.into_iter().enumerate() {
        let r = r?;
        if r < best.0 {
            best = (r, (k / np, k % np));
        }
    }
    Ok(best)
}

/// `g-bar_{V,pi}`: index and squared distance of the helper closest to `target` in `||.||_{2,mu}`.
pub fn best_helper(
    classes: &FunctionClasses,
    target: &StateActionValue,
    mu: &DataDistribution,
) -> Result<(usize, f64)> {
    mu.check_table(target)?;
    let mut best = (0, f64::INFINITY);
    for (i, g) in classes.helper_class.iter().enumerate() {
        mu.check_table(g)?;
        let d = sq_dist(g, target, mu);
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best)
}

/// `eps_{G,V,P} = max over (V, pi) of min over g of ||g - C^pi_lambda V||^2_{2,mu}`.
pub fn helper_realizability_error(
    classes: &FunctionClasses,
    mu: &DataDistribution,
    mdp: &FiniteMdp,
    params: SoftParams,
) -> Result<f64> {
    let np = classes.policy_class.len();
    let per_pair: Vec<Result<f64>> = (0..classes.value_class.len() * np)
        .into_par_iter()
        .map(|k| {
            let c = consistency_operator(
                mdp,
                &classes.value_class[k / np],
                &classes.policy_class[k % np],
                params,
            )?;
            best_helper(classes, &c, mu).map(|(_, d)| d)
        })
        .collect();
    let mut worst = 0.0f64;
    for d in per_pair {
        worst = worst.max(d?);
    }
    Ok(worst)
}

/// Generates classes around `(V*_lambda, pi*_lambda)` from `spec`, reproducibly from `seed`.
pub fn build_perturbation_classes(
    mdp: &FiniteMdp,
    params: SoftParams,
    spec: &ClassSpec,
    seed: u64,
) -> Result<FunctionClasses> {
    check_spec(spec)?;
    let (v_star, pi_star) = soft_value_iteration(mdp, params, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let vmax = v_lambda_max(mdp.r_max(), params.lambda(), mdp.n_actions(), mdp.discount());
    let log_floor = -vmax / params.lambda();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = |base: f64, k: usize| base * spec.scale_decay.powi(k as i32);

    let mut value_class = Vec::with_capacity(spec.n_values);
    for k in 0..spec.n_values {
        let sigma = if spec.realizable && k == 0 { 0.0 } else { scale(spec.value_scale, k) };
        let values = v_star
            .values
            .iter()
            .map(|v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (v + sigma * z).clamp(0.0, vmax)
            })
            .collect();
        value_class.push(StateValue::new(values));
    }

    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut policy_class = Vec::with_capacity(spec.n_policies);
    for k in 0..spec.n_policies {
        if spec.realizable && k == 0 {
            let probs = (0..ns)
                .flat_map(|s| repair_row(pi_star.row(s), log_floor))
                .collect();
            policy_class.push(TabularPolicy::new(ns, na, probs)?);
            continue;
        }
        let sigma = scale(spec.logit_scale, k);
        let mut probs = Vec::with_capacity(ns * na);
        for s in 0..ns {
            let logits: Vec<f64> = pi_star
                .row(s)
                .iter()
                .map(|p| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    p.ln() + sigma * z
                })
                .collect();
            probs.extend(repair_row(&softmax(&logits), log_floor));
        }
        policy_class.push(TabularPolicy::new(ns, na, probs)?);
    }

    let clamp_helper = |g: StateActionValue| {
        let values = g.values.iter().map(|x| x.clamp(0.0, 2.0 * vmax)).collect();
        StateActionValue::new(ns, na, values)
    };
    let mut helper_class = Vec::new();
    if spec.helper_complete {
        for v in &value_class {
            for pi in &policy_class {
                helper_class.push(clamp_helper(consistency_operator(mdp, v, pi, params)?)?);
            }
        }
    }
    for k in 0..spec.n_helpers {
        let exact = spec.realizable && !spec.helper_complete && k == 0;
        let (vi, pi) = if exact {
            (0, 0)
        } else {
            (
                rand::Rng::random_range(&mut rng, 0..value_class.len()),
                rand::Rng::random_range(&mut rng, 0..policy_class.len()),
            )
        };
        let base = consistency_operator(mdp, &value_class[vi], &policy_class[pi], params)?;
        let sigma = if exact { 0.0 } else { scale(spec.helper_scale, k) };
        let values = base
            .values
            .iter()
            .map(|x| {
                let z: f64 = StandardNormal.sample(&mut rng);
                x + sigma * z
            })
            .collect();
        helper_class.push(clamp_helper(StateActionValue::new(ns, na, values)?)?);
    }

    let mut classes = FunctionClasses::new(mdp, params, value_class, policy_class, helper_class)?;
    classes.seed = Some(seed);
    classes.spec = Some(spec.clone());
    Ok(classes)
}

/// MSBO classes `(Q, F)` generated from `spec`, reproducibly from `seed`.
///
/// `Q` holds `n_values` Gaussian perturbations of the unregularized `Q*`
/// (scale `value_scale`, member 0 exact when `realizable`). `F` holds the
/// Bellman-optimality images `T Q` of every `Q` member when `helper_complete`,
/// followed by `n_helpers` perturbed images (scale `helper_scale`).
/// The `logit_scale` and `n_policies` fields are unused.
pub fn build_msbo_classes(
    mdp: &FiniteMdp,
    spec: &ClassSpec,
    seed: u64,
) -> Result<(Vec<StateActionValue>, Vec<StateActionValue>)> {
    check_spec(spec)?;
    let q_star = crate::mdp::optimal_q(mdp, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = |base: f64, k: usize| base * spec.scale_decay.powi(k as i32);
    let perturb = |rng: &mut ChaCha8Rng, base: &StateActionValue, sigma: f64| {
        let values = base
            .values
            .iter()
            .map(|x| {
                let z: f64 = StandardNormal.sample(rng);
                x + sigma * z
            })
            .collect();
        StateActionValue::new(ns, na, values)
    };

    let mut q_class = Vec::with_capacity(spec.n_values);
    for k in 0..spec.n_values {
        let sigma = if spec.realizable && k == 0 { 0.0 } else { scale(spec.value_scale, k) };
        q_class.push(perturb(&mut rng, &q_star, sigma)?);
    }
    let bellman = |q: &StateActionValue| {
        let best = (0..ns)
            .map(|s| q.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        mdp.backup(&StateValue::new(best))
    };
    let mut f_class = Vec::new();
    if spec.helper_complete {
        f_class.extend(q_class.iter().map(bellman));
    }
    for k in 0..spec.n_helpers {
        let base = bellman(&q_class[rand::Rng::random_range(&mut rng, 0..q_class.len())]);
        f_class.push(perturb(&mut rng, &base, scale(spec.helper_scale, k))?);
    }
    Ok((q_class, f_class))
}

fn check_spec(spec: &ClassSpec) -> Result<()> {
    let counts = [
        ("n_values", spec.n_values),
        ("n_policies", spec.n_policies),
        ("n_helpers", spec.n_helpers),
    ];
    for (name, c) in counts {
        if c > MAX_GENERATED_MEMBERS {
            return Err(Error::InfeasibleSpec(format!(
                "{name} = {c} exceeds the cap of {MAX_GENERATED_MEMBERS}"
            )));
        }
    }
    if spec.n_values == 0 || spec.n_policies == 0 {
        return Err(Error::InfeasibleSpec("value and policy classes need a member".into()));
    }
    if spec.n_helpers == 0 && !spec.helper_complete {
        return Err(Error::InfeasibleSpec("helper class would be empty".into()));
    }
    for (name, x) in [
        ("value_scale", spec.value_scale),
        ("logit_scale", spec.logit_scale),
        ("helper_scale", spec.helper_scale),
    ] {
        if !(x.is_finite() && x >= 0.0) {
            return Err(Error::InfeasibleSpec(format!("{name} = {x} must be finite and >= 0")));
        }
    }
    if !(spec.scale_decay > 0.0 && spec.scale_decay <= 1.0) {
        return Err(Error::InfeasibleSpec(format!(
            "scale_decay = {} must lie in (0, 1]",
            spec.scale_decay
        )));
    }
    Ok(())
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Mixes a row with the uniform distribution just enough that `ln p >= log_floor`.
fn repair_row(row: &[f64], log_floor: f64) -> Vec<f64> {
    let floor = log_floor.exp();
    let na = row.len() as f64;
    let min = row.iter().copied().fold(f64::INFINITY, f64::min);
    if min.ln() >= log_floor {
        return row.to_vec();
    }
    // (1 - t) min + t / na = floor, with a little headroom against rounding.
    let t = (((floor - min) / (1.0 / na - min)) * (1.0 + 1e-9)).min(1.0);
    row.iter().map(|p| (1.0 - t) * p + t / na).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::soft_value_iteration;

    fn mdp() -> FiniteMdp {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        FiniteMdp::random(3, 2, 0.8, 1.0, &mut rng).unwrap()
    }

    #[test]
    fn weighted_norm_cases() {
        let mu = DataDistribution::uniform(2, 2);
        let c = StateActionValue::new(2, 2, vec![-3.0; 4]).unwrap();
        assert!((weighted_norm(&c, &mu).unwrap() - 3.0).abs() < 1e-15);
        assert_eq!(weighted_norm(&StateActionValue::zeros(2, 2), &mu).unwrap(), 0.0);
        let f = StateActionValue::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((weighted_norm(&f, &mu).unwrap() - (30.0f64 / 4.0).sqrt()).abs() < 1e-15);
        let bad = StateActionValue::zeros(3, 2);
        assert!(matches!(weighted_norm(&bad, &mu), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn distribution_needs_full_support() {
        let err = DataDistribution::new(1, 2, vec![1.0, 0.0], "x").unwrap_err();
        assert_eq!(err, Error::ZeroSupport { state: 0, action: 1 });
        assert!(DataDistribution::new(1, 2, vec![0.6, 0.6], "x").is_err());
    }

    #[test]
    fn concentrability_single_state() {
        let m = FiniteMdp::new(1, 2, vec![1.0, 1.0], vec![0.0, 1.0], 0.5, vec![1.0], 1.0).unwrap();
        let params = SoftParams::new(1.0).unwrap();
        let pi = TabularPolicy::new(1, 2, vec![0.75, 0.25]).unwrap();
        let helper = StateActionValue::zeros(1, 2);
        let classes = FunctionClasses::new(
            &m,
            params,
            vec![StateValue::constant(1, 0.0)],
            vec![pi],
            vec![helper],
        )
        .unwrap();
        let mu = DataDistribution::uniform(1, 2);
        let c2 = concentrability(&classes, &TabularPolicy::uniform(1, 2), &mu, &m).unwrap();
        assert!((c2 - 1.25).abs() < 1e-14);
    }

    #[test]
    fn realizable_classes_have_zero_errors() {
        let m = mdp();
        let params = SoftParams::new(0.5).unwrap();
        let spec = ClassSpec {
            n_values: 4,
            n_policies: 3,
            n_helpers: 2,
            ..ClassSpec::default()
        };
        let classes = build_perturbation_classes(&m, params, &spec, 42).unwrap();
        assert_eq!(classes.sizes(), (4, 3, 4 * 3 + 2));
        let mu = DataDistribution::uniform(3, 2);
        let (eps, idx) = realizability_error(&classes, &mu, &m, params).unwrap();
        assert!(eps <= 1e-16, "{eps}");
        assert_eq!(idx, (0, 0));
        let eps_g = helper_realizability_error(&classes, &mu, &m, params).unwrap();
        assert!(eps_g <= 1e-16, "{eps_g}");
        assert_eq!(build_perturbation_classes(&m, params, &spec, 42).unwrap(), classes);
    }

    #[test]
    fn degenerate_counts_give_the_optimum() {
        let m = mdp();
        let params = SoftParams::new(0.5).unwrap();
        let spec = ClassSpec {
            n_values: 1,
            n_policies: 1,
            n_helpers: 1,
            helper_complete: false,
            ..ClassSpec::default()
        };
        let classes = build_perturbation_classes(&m, params, &spec, 5).unwrap();
        let (v, pi) = soft_value_iteration(&m, params, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(classes.value_class, vec![v.clone()]);
        assert_eq!(classes.policy_class, vec![pi.clone()]);
        assert_eq!(
            classes.helper_class,
            vec![consistency_operator(&m, &v, &pi, params).unwrap()]
        );
    }

    #[test]
    fn constant_shift_realizability() {
        let m = mdp();
        let params = SoftParams::new(0.5).unwrap();
        let (v, pi) = soft_value_iteration(&m, params, 1e-12, DEFAULT_MAX_ITER).unwrap();
        let shifted = StateValue::new(v.values.iter().map(|x| x + 0.1).collect());
        let c = consistency_operator(&m, &shifted, &pi, params).unwrap();
        let classes = FunctionClasses::new(&m, params, vec![shifted], vec![pi], vec![c]).unwrap();
        let mu = DataDistribution::uniform(3, 2);
        let (eps, _) = realizability_error(&classes, &mu, &m, params).unwrap();
        let expected = (0.1f64 * (1.0 - 0.8)).powi(2);
        assert!((eps - expected).abs() < 1e-12, "{eps} vs {expected}");
    }

    #[test]
    fn offset_helper_error() {
        let m = mdp();
        let params = SoftParams::new(0.5).unwrap();
        let (v, pi) = soft_value_iteration(&m, params, 1e-12, DEFAULT_MAX_ITER).unwrap();
        let c = consistency_operator(&m, &v, &pi, params).unwrap();
        let classes =
            FunctionClasses::new(&m, params, vec![v.clone()], vec![pi.clone()], vec![c.shifted(0.2)])
                .unwrap();
        let mu = DataDistribution::uniform(3, 2);
        let eps = helper_realizability_error(&classes, &mu, &m, params).unwrap();
        assert!((eps - 0.04).abs() < 1e-14);

        let mut more = classes.clone();
        more.helper_class.push(c);
        assert!(helper_realizability_error(&more, &mu, &m, params).unwrap() <= eps);
    }

    #[test]
    fn rejects_out_of_box_members() {
        let m = mdp();
        let params = SoftParams::new(0.5).unwrap();
        let err = FunctionClasses::new(
            &m,
            params,
            vec![StateValue::constant(3, -1.0)],
            vec![TabularPolicy::uniform(3, 2)],
            vec![StateActionValue::zeros(3, 2)],
        )
        .unwrap_err();
        assert!(matches!(err, Error::ClassConstraint(_)));
    }

    #[test]
    fn spec_errors() {
        let m = mdp();
        let params = SoftParams::new(0.5).unwrap();
        for spec in [
            ClassSpec { n_values: 65, ..ClassSpec::default() },
            ClassSpec { value_scale: f64::NAN, ..ClassSpec::default() },
            ClassSpec { scale_decay: 0.0, ..ClassSpec::default() },
            ClassSpec { n_helpers: 0, helper_complete: false, ..ClassSpec::default() },
        ] {
            assert!(matches!(
                build_perturbation_classes(&m, params, &spec, 0),
                Err(Error::InfeasibleSpec(_))
            ));
        }
    }

    #[test]
    fn large_logit_noise_is_repaired() {
        let m = mdp();
        let params = SoftParams::new(0.05).unwrap();
        let spec = ClassSpec {
            logit_scale: 200.0,
            realizable: false,
            ..ClassSpec::default()
        };
        let classes = build_perturbation_classes(&m, params, &spec, 9).unwrap();
        let bound = classes.v_lambda_max / classes.lambda;
        assert!(classes.policy_class.iter().all(|p| p.log_sup_norm() <= bound));
    }

    #[test]
    fn json_round_trip() {
        let m = mdp();
        let params = SoftParams::new(0.5).unwrap();
        let classes = build_perturbation_classes(&m, params, &ClassSpec::default(), 3).unwrap();
        let back = FunctionClasses::from_json(&classes.to_json().unwrap()).unwrap();
        assert_eq!(back, classes);
    }
}
