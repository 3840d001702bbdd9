//! Tabular MDPs and their exact solvers.
//!
//! Policy evaluation and discounted occupancy are obtained from dense LU
//! solves, so every identity downstream can be checked at machine precision.
//! The soft optimum is found by value iteration on the log-sum-exp backup
//!
//!   V(s) <- lambda * ln sum_a exp((R(s,a) + gamma (PV)(s,a)) / lambda)
//!
//! whose greedy softmax policy, together with V, is the unique joint fixed
//! point of the consistency operator.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on probability rows and distributions.
pub const STOCHASTIC_TOL: f64 = 1e-12;
/// Default stopping tolerance for value iteration.
pub const DEFAULT_TOL: f64 = 1e-10;
/// Default sweep budget for value iteration.
pub const DEFAULT_MAX_ITER: usize = 1_000_000;

/// A finite discounted MDP `(S, A, gamma, P, R, d0)` with reward bound `r_max`.
///
/// Instances are validated on construction and immutable afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpFile", into = "MdpFile")]
pub struct FiniteMdp {
    n_states: usize,
    n_actions: usize,
    /// Flat `P[s][a][s']`.
    transition: Vec<f64>,
    /// Flat `R[s][a]`.
    reward: Vec<f64>,
    discount: f64,
    init_dist: Vec<f64>,
    r_max: f64,
}

/// On-disk JSON layout of an MDP (nested arrays).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MdpFile {
    pub n_states: usize,
    pub n_actions: usize,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub reward: Vec<Vec<f64>>,
    pub discount: f64,
    pub init_dist: Vec<f64>,
    pub r_max: f64,
}

impl TryFrom<MdpFile> for FiniteMdp {
    type Error = Error;

    fn try_from(f: MdpFile) -> Result<Self> {
        if f.transition.len() != f.n_states
            || f.transition.iter().any(|row| {
                row.len() != f.n_actions || row.iter().any(|p| p.len() != f.n_states)
            })
        {
            return Err(Error::ShapeMismatch(format!(
                "transition must be {}x{}x{}",
                f.n_states, f.n_actions, f.n_states
            )));
        }
        if f.reward.len() != f.n_states || f.reward.iter().any(|r| r.len() != f.n_actions) {
            return Err(Error::ShapeMismatch(format!(
                "reward must be {}x{}",
                f.n_states, f.n_actions
            )));
        }
        let transition = f.transition.into_iter().flatten().flatten().collect();
        let reward = f.reward.into_iter().flatten().collect();
        FiniteMdp::new(
            f.n_states,
            f.n_actions,
            transition,
            reward,
            f.discount,
            f.init_dist,
            f.r_max,
        )
    }
}

impl From<FiniteMdp> for MdpFile {
    fn from(m: FiniteMdp) -> Self {
        let (ns, na) = (m.n_states, m.n_actions);
        MdpFile {
            n_states: ns,
            n_actions: na,
            transition: (0..ns)
                .map(|s| (0..na).map(|a| m.next_dist(s, a).to_vec()).collect())
                .collect(),
            reward: m.reward.chunks(na).map(<[f64]>::to_vec).collect(),
            discount: m.discount,
            init_dist: m.init_dist,
            r_max: m.r_max,
        }
    }
}

impl FiniteMdp {
    /// Builds and validates an MDP from flat `P[s][a][s']` and `R[s][a]` tables.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        discount: f64,
        init_dist: Vec<f64>,
        r_max: f64,
    ) -> Result<Self> {
        let mdp = FiniteMdp {
            n_states,
            n_actions,
            transition,
            reward,
            discount,
            init_dist,
            r_max,
        };
        validate_mdp(&mdp)?;
        Ok(mdp)
    }

    /// Deterministic MDP: `next[s][a]` is the successor of `(s, a)`.
    pub fn deterministic(
        next: &[Vec<usize>],
        reward: &[Vec<f64>],
        discount: f64,
        init_dist: Vec<f64>,
        r_max: f64,
    ) -> Result<Self> {
        let ns = next.len();
        let na = next.first().map_or(0, Vec::len);
        let mut transition = vec![0.0; ns * na * ns];
        for (s, row) in next.iter().enumerate() {
            if row.len() != na {
                return Err(Error::ShapeMismatch("ragged successor table".into()));
            }
            for (a, &sp) in row.iter().enumerate() {
                if sp >= ns {
                    return Err(Error::ShapeMismatch(format!("successor {sp} out of range")));
                }
                transition[(s * na + a) * ns + sp] = 1.0;
            }
        }
        let reward = reward.iter().flatten().copied().collect();
        Self::new(ns, na, transition, reward, discount, init_dist, r_max)
    }

    /// Random MDP with dense transition rows, rewards uniform on `[0, r_max]`
    /// and a random full-support initial distribution.
    pub fn random<R: Rng + ?Sized>(
        n_states: usize,
        n_actions: usize,
        discount: f64,
        r_max: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            transition.extend(random_simplex(n_states, rng));
        }
        let reward = (0..n_states * n_actions)
            .map(|_| r_max * rng.random::<f64>())
            .collect();
        let init_dist = random_simplex(n_states, rng);
        Self::new(
            n_states, n_actions, transition, reward, discount, init_dist, r_max,
        )
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn init_dist(&self) -> &[f64] {
        &self.init_dist
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    /// `P(. | s, a)` as a slice over next states.
    pub fn next_dist(&self, s: usize, a: usize) -> &[f64] {
        let base = (s * self.n_actions + a) * self.n_states;
        &self.transition[base..base + self.n_states]
    }

    /// `(PV)(s, a) = E_{s'~P(.|s,a)}[V(s')]`.
    pub fn expected_next(&self, v: &StateValue, s: usize, a: usize) -> f64 {
        dot(self.next_dist(s, a), &v.values)
    }

    /// The one-step backup `R + gamma PV` as a state-action table.
    pub fn backup(&self, v: &StateValue) -> StateActionValue {
        let mut q = StateActionValue::zeros(self.n_states, self.n_actions);
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                q.set(s, a, self.reward(s, a) + self.discount * self.expected_next(v, s, a));
            }
        }
        q
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn random_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    // Exponential spacings give a uniform draw on the simplex.
    let w: Vec<f64> = (0..n)
        .map(|_| -(1.0 - rng.random::<f64>()).ln() + 1e-3)
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Checks every [`FiniteMdp`] invariant and reports the first violation.
pub fn validate_mdp(mdp: &FiniteMdp) -> Result<()> {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    if ns == 0 || na == 0 {
        return Err(Error::ShapeMismatch("MDP needs at least one state and action".into()));
    }
    if mdp.transition.len() != ns * na * ns {
        return Err(Error::ShapeMismatch(format!(
            "transition has {} entries, expected {}",
            mdp.transition.len(),
            ns * na * ns
        )));
    }
    if mdp.reward.len() != ns * na {
        return Err(Error::ShapeMismatch(format!(
            "reward has {} entries, expected {}",
            mdp.reward.len(),
            ns * na
        )));
    }
    if mdp.init_dist.len() != ns {
        return Err(Error::ShapeMismatch(format!(
            "init_dist has {} entries, expected {ns}",
            mdp.init_dist.len()
        )));
    }
    for s in 0..ns {
        for a in 0..na {
            let row = mdp.next_dist(s, a);
            if let Some(&p) = row.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
                return Err(Error::NegativeEntry {
                    what: "transition",
                    value: p,
                });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::NonStochasticRow {
                    state: s,
                    action: a,
                    sum,
                });
            }
        }
    }
    if !(mdp.r_max.is_finite() && mdp.r_max >= 0.0) {
        return Err(Error::NegativeEntry {
            what: "r_max",
            value: mdp.r_max,
        });
    }
    for s in 0..ns {
        for a in 0..na {
            let r = mdp.reward(s, a);
            if !(0.0..=mdp.r_max).contains(&r) {
                return Err(Error::RewardOutOfRange {
                    state: s,
                    action: a,
                    value: r,
                    r_max: mdp.r_max,
                });
            }
        }
    }
    if !(0.0..1.0).contains(&mdp.discount) {
        return Err(Error::DiscountOutOfRange(mdp.discount));
    }
    if let Some(&p) = mdp.init_dist.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
        return Err(Error::NegativeEntry {
            what: "init_dist",
            value: p,
        });
    }
    let sum: f64 = mdp.init_dist.iter().sum();
    if (sum - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::NonStochasticInit { sum });
    }
    Ok(())
}

/// Entropy regularization weight, strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftParams {
    lambda: f64,
}

impl SoftParams {
    pub fn new(lambda: f64) -> Result<Self> {
        if lambda.is_finite() && lambda > 0.0 {
            Ok(SoftParams { lambda })
        } else {
            Err(Error::InvalidLambda(lambda))
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

/// `V_{lambda,max} = (r_max + lambda ln|A|) / (1 - gamma)`.
pub fn v_lambda_max(r_max: f64, lambda: f64, n_actions: usize, discount: f64) -> f64 {
    (r_max + lambda * (n_actions as f64).ln()) / (1.0 - discount)
}

/// Stochastic policy table `pi[s][a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl TryFrom<Vec<Vec<f64>>> for TabularPolicy {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        TabularPolicy::from_rows(&rows)
    }
}

impl From<TabularPolicy> for Vec<Vec<f64>> {
    fn from(p: TabularPolicy) -> Self {
        p.probs.chunks(p.n_actions).map(<[f64]>::to_vec).collect()
    }
}

impl TabularPolicy {
    /// Validates non-negativity and row sums.
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if n_states == 0 || n_actions == 0 || probs.len() != n_states * n_actions {
            return Err(Error::ShapeMismatch(format!(
                "policy table has {} entries for {n_states}x{n_actions}",
                probs.len()
            )));
        }
        if let Some(&p) = probs.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
            return Err(Error::NegativeEntry {
                what: "policy",
                value: p,
            });
        }
        for (s, row) in probs.chunks(n_actions).enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::NonStochasticPolicy { state: s, sum });
            }
        }
        Ok(TabularPolicy {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let ns = rows.len();
        let na = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != na) {
            return Err(Error::ShapeMismatch("ragged policy rows".into()));
        }
        Self::new(ns, na, rows.iter().flatten().copied().collect())
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        TabularPolicy {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    /// One-hot policy choosing `actions[s]` in state `s`.
    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::ShapeMismatch(format!("action {a} out of range")));
            }
            probs[s * n_actions + a] = 1.0;
        }
        Self::new(actions.len(), n_actions, probs)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// `max_{s,a} |ln pi(a|s)|`, infinite when some entry is zero.
    pub fn log_sup_norm(&self) -> f64 {
        self.probs.iter().map(|p| p.ln().abs()).fold(0.0, f64::max)
    }

    /// `-lambda ln pi(a|s)`, rejecting zero-probability actions.
    pub(crate) fn entropy_bonus(&self, s: usize, a: usize, lambda: f64) -> Result<f64> {
        let p = self.prob(s, a);
        if p > 0.0 {
            Ok(-lambda * p.ln())
        } else {
            Err(Error::ZeroProbabilityAction {
                state: s,
                action: a,
            })
        }
    }

    /// Shannon entropy of `pi(.|s)` with the `0 ln 0 = 0` convention.
    pub fn entropy(&self, s: usize) -> f64 {
        -self
            .row(s)
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }

    fn check_shape(&self, n_states: usize, n_actions: usize) -> Result<()> {
        if self.n_states != n_states || self.n_actions != n_actions {
            return Err(Error::ShapeMismatch(format!(
                "policy is {}x{}, MDP is {n_states}x{n_actions}",
                self.n_states, self.n_actions
            )));
        }
        Ok(())
    }
}

/// State value function `V[s]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateValue {
    pub values: Vec<f64>,
}

impl StateValue {
    pub fn new(values: Vec<f64>) -> Self {
        StateValue { values }
    }

    pub fn constant(n_states: usize, c: f64) -> Self {
        StateValue {
            values: vec![c; n_states],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Repeats `V(s)` across actions, giving the state-action table `g(s,a) = V(s)`.
    pub fn broadcast(&self, n_actions: usize) -> StateActionValue {
        StateActionValue {
            n_states: self.values.len(),
            n_actions,
            values: self
                .values
                .iter()
                .flat_map(|v| std::iter::repeat_n(*v, n_actions))
                .collect(),
        }
    }
}

/// State-action table `f[s][a]` (helpers `g`, Q-functions, operator outputs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct StateActionValue {
    n_states: usize,
    n_actions: usize,
    pub values: Vec<f64>,
}

impl TryFrom<Vec<Vec<f64>>> for StateActionValue {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        let ns = rows.len();
        let na = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != na) {
            return Err(Error::ShapeMismatch("ragged state-action rows".into()));
        }
        StateActionValue::new(ns, na, rows.into_iter().flatten().collect())
    }
}

impl From<StateActionValue> for Vec<Vec<f64>> {
    fn from(q: StateActionValue) -> Self {
        q.values.chunks(q.n_actions).map(<[f64]>::to_vec).collect()
    }
}

impl StateActionValue {
    pub fn new(n_states: usize, n_actions: usize, values: Vec<f64>) -> Result<Self> {
        if n_actions == 0 || values.len() != n_states * n_actions {
            return Err(Error::ShapeMismatch(format!(
                "state-action table has {} entries for {n_states}x{n_actions}",
                values.len()
            )));
        }
        Ok(StateActionValue {
            n_states,
            n_actions,
            values,
        })
    }

    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        StateActionValue {
            n_states,
            n_actions,
            values: vec![0.0; n_states * n_actions],
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        self.values[s * self.n_actions + a] = v;
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    /// Entrywise `self + c`.
    pub fn shifted(&self, c: f64) -> Self {
        StateActionValue {
            values: self.values.iter().map(|x| x + c).collect(),
            ..*self
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|x| x.abs()).fold(0.0, f64::max)
    }
}

/// Normalized discounted state-action occupancy `d^pi(s, a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyMeasure {
    n_states: usize,
    n_actions: usize,
    mass: Vec<f64>,
}

impl OccupancyMeasure {
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.mass[s * self.n_actions + a]
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    /// State marginal `d^pi(s)`.
    pub fn state_mass(&self) -> Vec<f64> {
        self.mass
            .chunks(self.n_actions)
            .map(|row| row.iter().sum())
            .collect()
    }

    /// Largest violation of `d(s') = (1-gamma) d0(s') + gamma sum d(s,a) P(s'|s,a)`.
    pub fn flow_residual(&self, mdp: &FiniteMdp) -> f64 {
        let ns = mdp.n_states();
        let g = mdp.discount();
        let mut inflow: Vec<f64> = mdp.init_dist().iter().map(|p| (1.0 - g) * p).collect();
        for s in 0..ns {
            for a in 0..mdp.n_actions() {
                let w = g * self.get(s, a);
                for (sp, p) in mdp.next_dist(s, a).iter().enumerate() {
                    inflow[sp] += w * p;
                }
            }
        }
        self.state_mass()
            .iter()
            .zip(&inflow)
            .map(|(d, f)| (d - f).abs())
            .fold(0.0, f64::max)
    }
}

/// Policy-averaged transition matrix `P_pi(s, s')`.
fn policy_transition(mdp: &FiniteMdp, pi: &TabularPolicy) -> DMatrix<f64> {
    let ns = mdp.n_states();
    let mut m = DMatrix::zeros(ns, ns);
    for s in 0..ns {
        for a in 0..mdp.n_actions() {
            let w = pi.prob(s, a);
            if w == 0.0 {
                continue;
            }
            for (sp, p) in mdp.next_dist(s, a).iter().enumerate() {
                m[(s, sp)] += w * p;
            }
        }
    }
    m
}

fn solve_dense(a: DMatrix<f64>, b: DVector<f64>) -> Result<Vec<f64>> {
    let x = a.lu().solve(&b).ok_or(Error::SingularSystem)?;
    if x.iter().all(|v| v.is_finite()) {
        Ok(x.iter().copied().collect())
    } else {
        Err(Error::SingularSystem)
    }
}

/// Solves `V = r_pi + lambda H(pi) + gamma P_pi V` for any `lambda >= 0`.
///
/// The entropy uses `0 ln 0 = 0`, so deterministic policies are evaluated
/// without a regularization penalty.
fn evaluate(mdp: &FiniteMdp, pi: &TabularPolicy, lambda: f64) -> Result<StateValue> {
    pi.check_shape(mdp.n_states(), mdp.n_actions())?;
    let ns = mdp.n_states();
    let g = mdp.discount();
    let rhs = DVector::from_iterator(
        ns,
        (0..ns).map(|s| {
            let r: f64 = (0..mdp.n_actions())
                .map(|a| pi.prob(s, a) * mdp.reward(s, a))
                .sum();
            if lambda > 0.0 {
                r + lambda * pi.entropy(s)
            } else {
                r
            }
        }),
    );
    let a = DMatrix::identity(ns, ns) - policy_transition(mdp, pi) * g;
    Ok(StateValue::new(solve_dense(a, rhs)?))
}

/// Soft value `V^pi_lambda` of a policy.
pub fn soft_policy_value(
    mdp: &FiniteMdp,
    pi: &TabularPolicy,
    params: SoftParams,
) -> Result<StateValue> {
    evaluate(mdp, pi, params.lambda())
}

/// Unregularized value `V^pi`.
pub fn policy_value(mdp: &FiniteMdp, pi: &TabularPolicy) -> Result<StateValue> {
    evaluate(mdp, pi, 0.0)
}

/// `J_lambda(pi) = <d0, V^pi_lambda>`; `lambda = 0` gives the plain return `J(pi)`.
pub fn performance(mdp: &FiniteMdp, pi: &TabularPolicy, lambda: f64) -> Result<f64> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::InvalidLambda(lambda));
    }
    let v = evaluate(mdp, pi, lambda)?;
    Ok(dot(mdp.init_dist(), &v.values))
}

/// Discounted occupancy `d^pi(s, a) = d^pi(s) pi(a|s)`.
pub fn occupancy_measure(mdp: &FiniteMdp, pi: &TabularPolicy) -> Result<OccupancyMeasure> {
    pi.check_shape(mdp.n_states(), mdp.n_actions())?;
    let ns = mdp.n_states();
    let g = mdp.discount();
    let a = DMatrix::identity(ns, ns) - policy_transition(mdp, pi).transpose() * g;
    let b = DVector::from_iterator(ns, mdp.init_dist().iter().map(|p| (1.0 - g) * p));
    let ds = solve_dense(a, b)?;
    let na = mdp.n_actions();
    let mass = (0..ns * na)
        .map(|i| ds[i / na] * pi.probs()[i])
        .collect();
    Ok(OccupancyMeasure {
        n_states: ns,
        n_actions: na,
        mass,
    })
}

/// `(C^pi_lambda V)(s, a) = R(s, a) + gamma (PV)(s, a) - lambda ln pi(a|s)`.
pub fn consistency_operator(
    mdp: &FiniteMdp,
    v: &StateValue,
    pi: &TabularPolicy,
    params: SoftParams,
) -> Result<StateActionValue> {
    pi.check_shape(mdp.n_states(), mdp.n_actions())?;
    if v.len() != mdp.n_states() {
        return Err(Error::ShapeMismatch(format!(
            "value has {} states, MDP has {}",
            v.len(),
            mdp.n_states()
        )));
    }
    let mut out = mdp.backup(v);
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let bonus = pi.entropy_bonus(s, a, params.lambda())?;
            out.set(s, a, out.get(s, a) + bonus);
        }
    }
    Ok(out)
}

/// `max_{s,a} |V(s) - (C^pi_lambda V)(s, a)|`.
pub fn consistency_gap(
    mdp: &FiniteMdp,
    v: &StateValue,
    pi: &TabularPolicy,
    params: SoftParams,
) -> Result<f64> {
    let c = consistency_operator(mdp, v, pi, params)?;
    let mut worst = 0.0f64;
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            worst = worst.max((v.values[s] - c.get(s, a)).abs());
        }
    }
    Ok(worst)
}

/// Output of soft value iteration together with its convergence trace.
#[derive(Debug, Clone)]
pub struct SoftSolution {
    pub value: StateValue,
    pub policy: TabularPolicy,
    /// Sup-norm change of each sweep.
    pub residuals: Vec<f64>,
}

/// `lambda * ln sum exp(x / lambda)` with the max shifted out.
fn soft_max(row: &[f64], lambda: f64) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|x| ((x - m) / lambda).exp()).sum();
    m + lambda * s.ln()
}

/// Soft-optimal pair `(V*_lambda, pi*_lambda)`.
///
/// Iterates `V <- lambda ln sum_a exp((R + gamma P V) / lambda)` from `V = 0`.
/// Once a sweep changes `V` by at most `tol`, sweeps continue while the
/// change keeps shrinking (within `max_iter`), which leaves `V` at the
/// floating-point fixed point; `pi` is the softmax of the final backup.
pub fn soft_value_iteration(
    mdp: &FiniteMdp,
    params: SoftParams,
    tol: f64,
    max_iter: usize,
) -> Result<(StateValue, TabularPolicy)> {
    let sol = soft_value_iteration_trace(mdp, params, tol, max_iter)?;
    Ok((sol.value, sol.policy))
}

/// As [`soft_value_iteration`], also returning the per-sweep residuals.
pub fn soft_value_iteration_trace(
    mdp: &FiniteMdp,
    params: SoftParams,
    tol: f64,
    max_iter: usize,
) -> Result<SoftSolution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!("tolerance must be positive, got {tol}")));
    }
    let lambda = params.lambda();
    let ns = mdp.n_states();
    let mut v = StateValue::constant(ns, 0.0);
    let mut residuals = Vec::new();
    let mut converged = false;
    for _ in 0..max_iter {
        let q = mdp.backup(&v);
        let next: Vec<f64> = (0..ns).map(|s| soft_max(q.row(s), lambda)).collect();
        let change = next
            .iter()
            .zip(&v.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v.values = next;
        let stalled = residuals.last().is_some_and(|last| change >= *last);
        residuals.push(change);
        // Past the tolerance, keep contracting until the change stops
        // shrinking, so the result sits at the floating-point fixed point.
        if change == 0.0 || (converged && stalled) {
            converged = true;
            break;
        }
        converged |= change <= tol;
    }
    if !converged {
        return Err(Error::MaxIterExceeded {
            iterations: max_iter,
            residual: residuals.last().copied().unwrap_or(f64::INFINITY),
        });
    }
    let q = mdp.backup(&v);
    let na = mdp.n_actions();
    let mut probs = Vec::with_capacity(ns * na);
    for s in 0..ns {
        let row = q.row(s);
        let lse = soft_max(row, lambda);
        let unnorm: Vec<f64> = row.iter().map(|x| ((x - lse) / lambda).exp()).collect();
        let z: f64 = unnorm.iter().sum();
        probs.extend(unnorm.iter().map(|p| p / z));
    }
    Ok(SoftSolution {
        value: v,
        policy: TabularPolicy::new(ns, na, probs)?,
        residuals,
    })
}

/// Index of the largest entry, lowest index on ties.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in row.iter().enumerate().skip(1) {
        if *x > row[best] {
            best = i;
        }
    }
    best
}

/// Unregularized optimum `(V*, pi*)` with a deterministic greedy policy.
pub fn hard_value_iteration(
    mdp: &FiniteMdp,
    tol: f64,
    max_iter: usize,
) -> Result<(StateValue, TabularPolicy)> {
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!("tolerance must be positive, got {tol}")));
    }
    let ns = mdp.n_states();
    let mut v = StateValue::constant(ns, 0.0);
    let mut last = f64::INFINITY;
    for _ in 0..max_iter {
        let q = mdp.backup(&v);
        let next: Vec<f64> = (0..ns)
            .map(|s| q.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        last = next
            .iter()
            .zip(&v.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v.values = next;
        if last <= tol {
            let q = mdp.backup(&v);
            let actions: Vec<usize> = (0..ns).map(|s| argmax(q.row(s))).collect();
            return Ok((v, TabularPolicy::deterministic(mdp.n_actions(), &actions)?));
        }
    }
    Err(Error::MaxIterExceeded {
        iterations: max_iter,
        residual: last,
    })
}

/// Optimal action values `Q* = R + gamma P V*` of the unregularized MDP.
pub fn optimal_q(mdp: &FiniteMdp, tol: f64, max_iter: usize) -> Result<StateActionValue> {
    let (v, _) = hard_value_iteration(mdp, tol, max_iter)?;
    Ok(mdp.backup(&v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_state(rewards: &[f64], discount: f64) -> FiniteMdp {
        let na = rewards.len();
        FiniteMdp::new(
            1,
            na,
            vec![1.0; na],
            rewards.to_vec(),
            discount,
            vec![1.0],
            1.0,
        )
        .unwrap()
    }

    fn chain() -> FiniteMdp {
        FiniteMdp::deterministic(
            &[vec![1, 1], vec![1, 1]],
            &[vec![0.2, 0.5], vec![1.0, 0.0]],
            0.5,
            vec![1.0, 0.0],
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn validation_accepts_and_rejects() {
        assert!(validate_mdp(&chain()).is_ok());

        let err = FiniteMdp::new(1, 1, vec![0.9], vec![0.0], 0.5, vec![1.0], 1.0).unwrap_err();
        assert!(matches!(err, Error::NonStochasticRow { .. }));

        let err = FiniteMdp::new(1, 1, vec![1.0], vec![0.0], 1.0, vec![1.0], 1.0).unwrap_err();
        assert_eq!(err, Error::DiscountOutOfRange(1.0));

        let err =
            FiniteMdp::new(2, 1, vec![1.5, -0.5, 0.0, 1.0], vec![0.0, 0.0], 0.5, vec![1.0, 0.0], 1.0)
                .unwrap_err();
        assert!(matches!(err, Error::NegativeEntry { .. }));

        let err = FiniteMdp::new(1, 1, vec![1.0], vec![2.0], 0.5, vec![1.0], 1.0).unwrap_err();
        assert!(matches!(err, Error::RewardOutOfRange { .. }));

        let err = FiniteMdp::new(1, 1, vec![1.0], vec![0.0], 0.5, vec![0.5], 1.0).unwrap_err();
        assert!(matches!(err, Error::NonStochasticInit { .. }));
    }

    #[test]
    fn soft_params_reject_zero() {
        assert_eq!(SoftParams::new(0.0).unwrap_err(), Error::InvalidLambda(0.0));
        assert!(SoftParams::new(-1.0).is_err());
        assert!(SoftParams::new(f64::NAN).is_err());
    }

    #[test]
    fn geometric_value() {
        let mdp = one_state(&[1.0], 0.5);
        let pi = TabularPolicy::uniform(1, 1);
        let v = soft_policy_value(&mdp, &pi, SoftParams::new(3.0).unwrap()).unwrap();
        assert!((v.values[0] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn uniform_entropy_value() {
        let mdp = one_state(&[0.0, 0.0], 0.5);
        let pi = TabularPolicy::uniform(1, 2);
        let v = soft_policy_value(&mdp, &pi, SoftParams::new(1.0).unwrap()).unwrap();
        assert!((v.values[0] - 2.0 * 2f64.ln()).abs() < 1e-14);
        assert!((performance(&mdp, &pi, 1.0).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn deterministic_policy_has_no_entropy_bonus() {
        let mdp = chain();
        let pi = TabularPolicy::deterministic(2, &[1, 0]).unwrap();
        let j0 = performance(&mdp, &pi, 0.0).unwrap();
        let j1 = performance(&mdp, &pi, 5.0).unwrap();
        assert_eq!(j0, j1);

        let m = one_state(&[0.0, 1.0], 0.0);
        let pi = TabularPolicy::deterministic(2, &[1]).unwrap();
        assert_eq!(performance(&m, &pi, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn occupancy_special_cases() {
        let mdp = chain();
        let pi = TabularPolicy::uniform(2, 2);
        let d = occupancy_measure(&mdp, &pi).unwrap();
        let ds = d.state_mass();
        assert!((ds[0] - 0.5).abs() < 1e-14 && (ds[1] - 0.5).abs() < 1e-14);
        assert!(d.flow_residual(&mdp) < 1e-14);

        let single = one_state(&[0.3, 0.1, 0.9], 0.7);
        let pi = TabularPolicy::new(1, 3, vec![0.2, 0.3, 0.5]).unwrap();
        let d = occupancy_measure(&single, &pi).unwrap();
        for a in 0..3 {
            assert!((d.get(0, a) - pi.prob(0, a)).abs() < 1e-14);
        }
    }

    #[test]
    fn occupancy_at_zero_discount_is_initial() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mdp = FiniteMdp::random(4, 3, 0.0, 1.0, &mut rng).unwrap();
        let pi = TabularPolicy::new(4, 3, (0..4).flat_map(|_| [0.2, 0.3, 0.5]).collect()).unwrap();
        let d = occupancy_measure(&mdp, &pi).unwrap();
        for s in 0..4 {
            for a in 0..3 {
                assert!((d.get(s, a) - mdp.init_dist()[s] * pi.prob(s, a)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn consistency_operator_arithmetic() {
        let mdp = one_state(&[1.0, 1.0], 0.5);
        let c = consistency_operator(
            &mdp,
            &StateValue::new(vec![2.0]),
            &TabularPolicy::uniform(1, 2),
            SoftParams::new(1.0).unwrap(),
        )
        .unwrap();
        for a in 0..2 {
            assert!((c.get(0, a) - (2.0 + 2f64.ln())).abs() < 1e-14);
        }
    }

    #[test]
    fn consistency_operator_deterministic_support() {
        let mdp = FiniteMdp::deterministic(
            &[vec![1], vec![0]],
            &[vec![0.4], vec![0.7]],
            0.9,
            vec![0.5, 0.5],
            1.0,
        )
        .unwrap();
        let v = StateValue::new(vec![1.0, 3.0]);
        let pi = TabularPolicy::uniform(2, 1);
        let c = consistency_operator(&mdp, &v, &pi, SoftParams::new(2.0).unwrap()).unwrap();
        assert_eq!(c, mdp.backup(&v));
    }

    #[test]
    fn consistency_operator_rejects_zero_probability() {
        let mdp = chain();
        let pi = TabularPolicy::deterministic(2, &[0, 0]).unwrap();
        let err = consistency_operator(
            &mdp,
            &StateValue::constant(2, 0.0),
            &pi,
            SoftParams::new(1.0).unwrap(),
        )
        .unwrap_err();
        assert_eq!(err, Error::ZeroProbabilityAction { state: 0, action: 1 });
    }

    #[test]
    fn soft_vi_closed_forms() {
        let mdp = one_state(&[0.0, 1.0], 0.5);
        let (v, pi) = soft_value_iteration(&mdp, SoftParams::new(1.0).unwrap(), 1e-13, 10_000)
            .unwrap();
        let e = std::f64::consts::E;
        assert!((v.values[0] - 2.0 * (1.0 + e).ln()).abs() < 1e-12);
        assert!((pi.prob(0, 1) - e / (1.0 + e)).abs() < 1e-12);

        let zero = one_state(&[0.0, 0.0, 0.0], 0.8);
        let (v, pi) =
            soft_value_iteration(&zero, SoftParams::new(0.5).unwrap(), 1e-12, 10_000).unwrap();
        assert!((v.values[0] - 0.5 * 3f64.ln() / 0.2).abs() < 1e-10);
        for a in 0..3 {
            assert!((pi.prob(0, a) - 1.0 / 3.0).abs() < 1e-14);
        }
    }

    #[test]
    fn soft_vi_residuals_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mdp = FiniteMdp::random(5, 3, 0.9, 1.0, &mut rng).unwrap();
        let sol = soft_value_iteration_trace(&mdp, SoftParams::new(0.3).unwrap(), 1e-10, 100_000)
            .unwrap();
        for w in sol.residuals.windows(2) {
            assert!(w[1] <= 0.9 * w[0] + 1e-13, "{} > 0.9 * {}", w[1], w[0]);
        }
    }

    #[test]
    fn hard_vi_closed_forms() {
        let mdp = one_state(&[0.0, 1.0], 0.5);
        let (v, pi) = hard_value_iteration(&mdp, 1e-13, 10_000).unwrap();
        assert!((v.values[0] - 2.0).abs() < 1e-12);
        assert_eq!(pi.row(0), &[0.0, 1.0]);

        let flat = one_state(&[0.4, 0.4], 0.75);
        let (v, pi) = hard_value_iteration(&flat, 1e-13, 10_000).unwrap();
        assert!((v.values[0] - 1.6).abs() < 1e-11);
        assert_eq!(pi.row(0), &[1.0, 0.0]);
    }

    #[test]
    fn max_iter_exceeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mdp = FiniteMdp::random(3, 2, 0.99, 1.0, &mut rng).unwrap();
        let err = hard_value_iteration(&mdp, 1e-12, 5).unwrap_err();
        assert!(matches!(err, Error::MaxIterExceeded { iterations: 5, .. }));
        let err = soft_value_iteration(&mdp, SoftParams::new(1.0).unwrap(), 1e-12, 5).unwrap_err();
        assert!(matches!(err, Error::MaxIterExceeded { iterations: 5, .. }));
    }

    #[test]
    fn json_round_trip_validates() {
        let mdp = chain();
        let text = mdp.to_json().unwrap();
        assert_eq!(FiniteMdp::from_json(&text).unwrap(), mdp);
        let bad = text.replace("\"discount\": 0.5", "\"discount\": 1.5");
        assert!(matches!(
            FiniteMdp::from_json(&bad),
            Err(Error::Parse(msg)) if msg.contains("discount")
        ));
    }
}
