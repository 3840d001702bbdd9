//! Batch datasets and the two empirical squared losses.
//!
//! Losses are evaluated on the count-compressed dataset: transitions are
//! grouped into `(s, a, s', r)` cells and the squared residuals are summed
//! cell by cell in index order. Every path that evaluates a loss (the
//! solvers, the verifier, the public functions) goes through the same
//! summation order, so equal inputs give bit-identical losses.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classes::DataDistribution;
use crate::error::{Error, Result};
use crate::mdp::{FiniteMdp, SoftParams, StateActionValue, StateValue, TabularPolicy};

/// Identifier of the sampling scheme stored with every dataset: ChaCha8
/// seeded with `seed_from_u64`, 53-bit uniforms from `next_u64 >> 11`,
/// and inverse-CDF draws (first index whose running sum exceeds the uniform).
pub const RNG_ALGORITHM: &str = "chacha8-u53-inverse-cdf-v1";

/// One observed transition `(s, a, r, s')`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
}

/// JSON sidecar written next to a dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub n: usize,
    pub mu_id: String,
    pub rng_algorithm: String,
    pub n_states: usize,
    pub n_actions: usize,
    pub discount: f64,
}

/// `n` i.i.d. transitions with `(s, a) ~ mu`, `r = R(s, a)` and `s' ~ P(.|s, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub transitions: Vec<Transition>,
    pub seed: u64,
    pub mu_id: String,
    n_states: usize,
    n_actions: usize,
    discount: f64,
}

impl Dataset {
    /// Wraps hand-built transitions; indices are range-checked.
    pub fn from_transitions(
        mdp: &FiniteMdp,
        transitions: Vec<Transition>,
        seed: u64,
        mu_id: impl Into<String>,
    ) -> Result<Self> {
        Self::with_shape(
            mdp.n_states(),
            mdp.n_actions(),
            mdp.discount(),
            transitions,
            seed,
            mu_id.into(),
        )
    }

    fn with_shape(
        n_states: usize,
        n_actions: usize,
        discount: f64,
        transitions: Vec<Transition>,
        seed: u64,
        mu_id: String,
    ) -> Result<Self> {
        if transitions.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for t in &transitions {
            if t.s >= n_states || t.s_next >= n_states || t.a >= n_actions {
                return Err(Error::ShapeMismatch(format!(
                    "transition ({}, {}, {}) out of range",
                    t.s, t.a, t.s_next
                )));
            }
            if !t.r.is_finite() {
                return Err(Error::Parse(format!("non-finite reward {}", t.r)));
            }
        }
        Ok(Dataset {
            transitions,
            seed,
            mu_id,
            n_states,
            n_actions,
            discount,
        })
    }

    pub fn n(&self) -> usize {
        self.transitions.len()
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

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            seed: self.seed,
            n: self.n(),
            mu_id: self.mu_id.clone(),
            rng_algorithm: RNG_ALGORITHM.to_string(),
            n_states: self.n_states,
            n_actions: self.n_actions,
            discount: self.discount,
        }
    }

    /// Groups transitions into count cells.
    pub fn counts(&self) -> TransitionCounts {
        let mut cells: BTreeMap<(usize, usize, usize, u64), u64> = BTreeMap::new();
        for t in &self.transitions {
            *cells.entry((t.s, t.a, t.s_next, t.r.to_bits())).or_default() += 1;
        }
        TransitionCounts {
            n: self.n(),
            n_states: self.n_states,
            n_actions: self.n_actions,
            discount: self.discount,
            cells: cells
                .into_iter()
                .map(|((s, a, s_next, r), c)| Cell {
                    s,
                    a,
                    s_next,
                    r: f64::from_bits(r),
                    count: c as f64,
                })
                .collect(),
        }
    }

    /// CSV body with header `s,a,r,s_next`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for t in &self.transitions {
            w.serialize(t)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn sidecar_path(csv_path: &Path) -> PathBuf {
        csv_path.with_extension("json")
    }

    /// Writes the CSV and its JSON sidecar.
    pub fn save(&self, csv_path: &Path) -> Result<()> {
        fs::write(csv_path, self.to_csv()?)?;
        fs::write(
            Self::sidecar_path(csv_path),
            serde_json::to_string_pretty(&self.meta())?,
        )?;
        Ok(())
    }

    pub fn load(csv_path: &Path) -> Result<Self> {
        let meta: DatasetMeta =
            serde_json::from_str(&fs::read_to_string(Self::sidecar_path(csv_path))?)?;
        let mut reader = csv::Reader::from_path(csv_path)?;
        let transitions = reader
            .deserialize()
            .collect::<std::result::Result<Vec<Transition>, _>>()?;
        if transitions.len() != meta.n {
            return Err(Error::Parse(format!(
                "sidecar declares {} transitions, CSV has {}",
                meta.n,
                transitions.len()
            )));
        }
        Self::with_shape(
            meta.n_states,
            meta.n_actions,
            meta.discount,
            transitions,
            meta.seed,
            meta.mu_id,
        )
    }
}

/// Uniform on `[0, 1)` with 53 bits of precision.
fn unit_uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// First index whose running sum exceeds `u`, falling back to the last
/// positive-mass index when rounding leaves `u` beyond the total.
fn inverse_cdf(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Draws `n` transitions from `mu` and the MDP dynamics.
pub fn sample_dataset(
    mdp: &FiniteMdp,
    mu: &DataDistribution,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if mu.n_states() != mdp.n_states() || mu.n_actions() != mdp.n_actions() {
        return Err(Error::ShapeMismatch("distribution shape differs from MDP".into()));
    }
    let na = mdp.n_actions();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let transitions = (0..n)
        .map(|_| {
            let sa = inverse_cdf(mu.mass(), unit_uniform(&mut rng));
            let (s, a) = (sa / na, sa % na);
            let s_next = inverse_cdf(mdp.next_dist(s, a), unit_uniform(&mut rng));
            Transition {
                s,
                a,
                r: mdp.reward(s, a),
                s_next,
            }
        })
        .collect();
    Dataset::from_transitions(mdp, transitions, seed, mu.id())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Cell {
    pub s: usize,
    pub a: usize,
    pub s_next: usize,
    pub r: f64,
    pub count: f64,
}

/// Count-compressed dataset: one cell per distinct `(s, a, s', r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionCounts {
    n: usize,
    n_states: usize,
    n_actions: usize,
    discount: f64,
    pub(crate) cells: Vec<Cell>,
}

impl TransitionCounts {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    /// Number of distinct cells.
    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    /// Regression targets `r + gamma V(s') - lambda ln pi(a|s)` for a fixed `(V, pi)`.
    pub fn soft_targets(
        &self,
        v: &StateValue,
        pi: &TabularPolicy,
        params: SoftParams,
    ) -> Result<RegressionTargets<'_>> {
        if v.len() != self.n_states || pi.n_states() != self.n_states || pi.n_actions() != self.n_actions {
            return Err(Error::ShapeMismatch("value/policy shape differs from dataset".into()));
        }
        let targets = self
            .cells
            .iter()
            .map(|c| {
                let bonus = pi.entropy_bonus(c.s, c.a, params.lambda())?;
                Ok(c.r + self.discount * v.values[c.s_next] + bonus)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(RegressionTargets {
            counts: self,
            targets,
        })
    }

    /// Hard Bellman targets `r + gamma max_a' Q'(s', a')`.
    pub fn greedy_targets(&self, q_next: &StateActionValue) -> Result<RegressionTargets<'_>> {
        self.check_table(q_next)?;
        let best: Vec<f64> = (0..self.n_states)
            .map(|s| q_next.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let targets = self
            .cells
            .iter()
            .map(|c| c.r + self.discount * best[c.s_next])
            .collect();
        Ok(RegressionTargets {
            counts: self,
            targets,
        })
    }

    fn check_table(&self, f: &StateActionValue) -> Result<()> {
        if f.n_states() != self.n_states || f.n_actions() != self.n_actions {
            return Err(Error::ShapeMismatch(format!(
                "table is {}x{}, dataset is {}x{}",
                f.n_states(),
                f.n_actions(),
                self.n_states,
                self.n_actions
            )));
        }
        Ok(())
    }
}

/// Targets for one `(V, pi)` (or one `Q'`), reusable across predictors.
#[derive(Debug, Clone)]
pub struct RegressionTargets<'a> {
    counts: &'a TransitionCounts,
    targets: Vec<f64>,
}

impl RegressionTargets<'_> {
    /// `(1/n) sum_i (f(s_i, a_i) - y_i)^2`.
    pub fn mean_squared_error(&self, f: &StateActionValue) -> Result<f64> {
        self.counts.check_table(f)?;
        let na = self.counts.n_actions;
        let mut total = 0.0;
        for (c, y) in self.counts.cells.iter().zip(&self.targets) {
            let d = f.values[c.s * na + c.a] - y;
            total += c.count * d * d;
        }
        Ok(total / self.counts.n as f64)
    }

    /// `MSE(f1) - MSE(f2)` summed as `(f1 - f2)(f1 + f2 - 2y)` per cell, so it
    /// is exactly zero when `f1` and `f2` agree on every observed `(s, a)`.
    /// The minimax solvers use it to keep exact ties exact.
    pub fn mse_difference(&self, f1: &StateActionValue, f2: &StateActionValue) -> Result<f64> {
        self.counts.check_table(f1)?;
        self.counts.check_table(f2)?;
        let na = self.counts.n_actions;
        let mut total = 0.0;
        for (c, y) in self.counts.cells.iter().zip(&self.targets) {
            let (a, b) = (f1.values[c.s * na + c.a], f2.values[c.s * na + c.a]);
            total += c.count * (a - b) * (a + b - 2.0 * y);
        }
        Ok(total / self.counts.n as f64)
    }
}

/// `L_D(V; V, pi) = (1/n) sum (V(s_i) - r_i - gamma V(s'_i) + lambda ln pi(a_i|s_i))^2`.
pub fn empirical_l(
    data: &Dataset,
    v: &StateValue,
    pi: &TabularPolicy,
    params: SoftParams,
) -> Result<f64> {
    let counts = data.counts();
    counts
        .soft_targets(v, pi, params)?
        .mean_squared_error(&v.broadcast(data.n_actions()))
}

/// `R_D(g; V, pi) = (1/n) sum (g(s_i, a_i) - r_i - gamma V(s'_i) + lambda ln pi(a_i|s_i))^2`.
pub fn empirical_r(
    data: &Dataset,
    g: &StateActionValue,
    v: &StateValue,
    pi: &TabularPolicy,
    params: SoftParams,
) -> Result<f64> {
    let counts = data.counts();
    counts.soft_targets(v, pi, params)?.mean_squared_error(g)
}
