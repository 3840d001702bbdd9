//! Experiment harness: configuration, rate and lambda-sweep experiments, the
//! verification suite, and report emission.
//!
//! Every random quantity is derived from the configuration seed, so a
//! `(config, seed)` pair fixes every output byte. Wall-clock timings are
//! recorded only when `record_wall_time` is set.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classes::{
    build_msbo_classes, build_perturbation_classes, concentrability, consistency_residual_sq,
    helper_realizability_error, realizability_error, ClassSpec, DataDistribution, FunctionClasses,
};
use crate::data::sample_dataset;
use crate::error::{Error, Result};
use crate::mdp::{
    consistency_gap, hard_value_iteration, occupancy_measure, performance, soft_value_iteration,
    FiniteMdp, SoftParams, StateValue, TabularPolicy, DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use crate::solvers::{msbo_solve, sbeed_solve, SolveSummary};
use crate::theory::{
    conditional_variance_identity, excess_risk_stats, lemma9_property_check,
    telescoping_residual, theorem_bound, BoundInputs, BoundReport, ExcessRiskStats,
    SuboptimalityReport, LEMMA3_SLACK, MIN_ENSEMBLE,
};

/// Version of the `runs.csv` / `sweep.csv` / `summary.json` layout.
pub const SCHEMA_VERSION: u32 = 1;

/// Float slack for exact-DP comparisons in the lambda sweep.
pub const SWEEP_SLACK: f64 = 1e-10;

/// Where the MDP comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MdpSource {
    /// `FiniteMdp::random`; `seed` defaults to one derived from the config seed.
    Random {
        n_states: usize,
        n_actions: usize,
        discount: f64,
        #[serde(default = "default_r_max")]
        r_max: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
    /// JSON file in the `FiniteMdp` format; relative paths resolve against
    /// the config file's directory.
    File(PathBuf),
}

/// Policy whose occupancy defines an occupancy-based `mu`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyRef {
    Uniform,
    SoftOptimal,
}

/// Data distribution `mu`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MuSpec {
    #[default]
    Uniform,
    /// `(1 - mix) d^pi + mix * uniform`.
    OccupancyOfPolicy { policy: PolicyRef, mix: f64 },
    /// Explicit `mu[s][a]`.
    Table(Vec<Vec<f64>>),
}

fn default_r_max() -> f64 {
    1.0
}

fn default_repetitions() -> usize {
    1
}

fn default_delta() -> f64 {
    0.05
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("sbeedlab-out")
}

/// JSON experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mdp: MdpSource,
    pub lambda: f64,
    #[serde(default)]
    pub mu: MuSpec,
    #[serde(default)]
    pub class_spec: ClassSpec,
    pub n_grid: Vec<usize>,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Grid for `lambda-sweep`.
    #[serde(default)]
    pub lambda_grid: Option<Vec<f64>>,
    /// When set, the rate experiment also checks its fitted slope lies in `[lo, hi]`.
    #[serde(default)]
    pub slope_range: Option<(f64, f64)>,
    /// Fill the `wall_ms` column (makes output non-deterministic).
    #[serde(default)]
    pub record_wall_time: bool,
}

impl ExperimentConfig {
    /// Parses and validates a config file, resolving a relative MDP path
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let mut config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        if let MdpSource::File(p) = &mut config.mdp {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if self.n_grid.is_empty() {
            return bad("n_grid is empty".into());
        }
        if self.n_grid[0] == 0 || self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("n_grid must be positive and strictly increasing: {:?}", self.n_grid));
        }
        if self.repetitions == 0 {
            return bad("repetitions must be >= 1".into());
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if let MdpSource::File(p) = &self.mdp {
            if !p.is_file() {
                return bad(format!("MDP file {} does not exist", p.display()));
            }
        }
        if let Some(grid) = &self.lambda_grid {
            if grid.is_empty() || grid.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
                return bad(format!("lambda_grid must be non-empty and positive: {grid:?}"));
            }
        }
        if let Some((lo, hi)) = self.slope_range {
            if !(lo <= hi) {
                return bad(format!("slope_range [{lo}, {hi}] is empty"));
            }
        }
        Ok(())
    }
}

/// SplitMix64 finalizer.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream seed for `parts` under `base`, e.g. `(seed, [n, rep])`.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |h, p| splitmix64(h ^ splitmix64(*p)))
}

const STREAM_MDP: u64 = 1;
const STREAM_CLASSES: u64 = 2;
const STREAM_DATA: u64 = 3;
const STREAM_VERIFY: u64 = 4;

/// Seed of the dataset for grid size `n` and repetition `rep`.
pub fn dataset_seed(seed: u64, n: usize, rep: usize) -> u64 {
    derive_seed(seed, &[STREAM_DATA, n as u64, rep as u64])
}

/// Everything derived from a config before any sampling.
#[derive(Debug, Clone)]
pub struct Setup {
    pub mdp: FiniteMdp,
    pub params: SoftParams,
    pub mu: DataDistribution,
    pub classes: FunctionClasses,
    pub v_soft: StateValue,
    pub pi_soft: TabularPolicy,
    pub pi_star: TabularPolicy,
    /// `J(pi*)` of the unregularized MDP.
    pub j_star: f64,
    pub c2: f64,
    pub eps_vp: f64,
    pub eps_gvp: f64,
}

pub fn load_mdp(config: &ExperimentConfig) -> Result<FiniteMdp> {
    match &config.mdp {
        MdpSource::Random {
            n_states,
            n_actions,
            discount,
            r_max,
            seed,
        } => {
            use rand::SeedableRng;
            let seed = seed.unwrap_or_else(|| derive_seed(config.seed, &[STREAM_MDP]));
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            FiniteMdp::random(*n_states, *n_actions, *discount, *r_max, &mut rng)
        }
        MdpSource::File(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
            FiniteMdp::from_json(&text)
        }
    }
}

fn build_mu(config: &ExperimentConfig, mdp: &FiniteMdp, pi_soft: &TabularPolicy) -> Result<DataDistribution> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    match &config.mu {
        MuSpec::Uniform => Ok(DataDistribution::uniform(ns, na)),
        MuSpec::OccupancyOfPolicy { policy, mix } => {
            let pi = match policy {
                PolicyRef::Uniform => TabularPolicy::uniform(ns, na),
                PolicyRef::SoftOptimal => pi_soft.clone(),
            };
            DataDistribution::from_occupancy(&occupancy_measure(mdp, &pi)?, ns, na, *mix)
        }
        MuSpec::Table(rows) => {
            if rows.len() != ns || rows.iter().any(|r| r.len() != na) {
                return Err(Error::InvalidConfig(format!("mu table must be {ns}x{na}")));
            }
            DataDistribution::new(ns, na, rows.concat(), "table")
        }
    }
}

/// Builds the MDP, `mu`, classes and the exact reference quantities.
pub fn build_setup(config: &ExperimentConfig) -> Result<Setup> {
    config.validate()?;
    let mdp = load_mdp(config)?;
    let params = SoftParams::new(config.lambda)?;
    let (v_soft, pi_soft) = soft_value_iteration(&mdp, params, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let (_, pi_star) = hard_value_iteration(&mdp, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let j_star = performance(&mdp, &pi_star, 0.0)?;
    let mu = build_mu(config, &mdp, &pi_soft)?;
    let classes = build_perturbation_classes(
        &mdp,
        params,
        &config.class_spec,
        derive_seed(config.seed, &[STREAM_CLASSES]),
    )?;
    let c2 = concentrability(&classes, &pi_soft, &mu, &mdp)?;
    let (eps_vp, _) = realizability_error(&classes, &mu, &mdp, params)?;
    let eps_gvp = helper_realizability_error(&classes, &mu, &mdp, params)?;
    Ok(Setup {
        mdp,
        params,
        mu,
        classes,
        v_soft,
        pi_soft,
        pi_star,
        j_star,
        c2,
        eps_vp,
        eps_gvp,
    })
}

impl Setup {
    /// Theorem 1 inputs at sample size `n`.
    pub fn bound_inputs(&self, n: usize, delta: f64) -> BoundInputs {
        BoundInputs {
            c2: self.c2,
            eps_vp: self.eps_vp,
            eps_gvp: self.eps_gvp,
            n: n as u64,
            delta,
            class_sizes: self.classes.sizes(),
            lambda: self.params.lambda(),
            discount: self.mdp.discount(),
            r_max: self.mdp.r_max(),
            n_actions: self.mdp.n_actions(),
        }
    }

    /// Lemma 3 for a solver output, using the precomputed `C2` and `J(pi*)`.
    fn lemma3(&self, v_hat: &StateValue, pi_hat: &TabularPolicy) -> Result<SuboptimalityReport> {
        let lhs = self.j_star - performance(&self.mdp, pi_hat, 0.0)?;
        let residual_norm =
            consistency_residual_sq(&self.mdp, v_hat, pi_hat, self.params, &self.mu)?.sqrt();
        let horizon = 1.0 - self.mdp.discount();
        let bias_term = self.params.lambda() * (self.mdp.n_actions() as f64).ln() / horizon;
        let residual_term = 2.0 * self.c2.sqrt() / horizon * residual_norm;
        let rhs = bias_term + residual_term;
        Ok(SuboptimalityReport {
            lhs,
            bias_term,
            residual_norm,
            c2: self.c2,
            residual_term,
            rhs,
            margin: rhs - lhs,
            holds: lhs <= rhs + LEMMA3_SLACK,
        })
    }
}

/// One `(n, rep)` SBEED run. Field order is the fixed CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub n: usize,
    pub rep: usize,
    pub seed: u64,
    /// `J(pi*) - J(pi-hat)`.
    pub suboptimality: f64,
    /// `||V-hat - C^{pi-hat}_lambda V-hat||_{2,mu}`.
    pub residual_norm: f64,
    pub objective: f64,
    pub c2: f64,
    pub rhs_total: f64,
    pub wall_ms: u64,
}

/// Aggregates at one grid size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub n: usize,
    pub mean_residual: f64,
    pub mean_suboptimality: f64,
    pub mean_objective: f64,
    pub bound: BoundReport,
}

/// Output of [`run_rate_experiment`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub records: Vec<RunRecord>,
    pub grid: Vec<GridPoint>,
    /// OLS slope of `ln mean_residual` on `ln n`; `None` when fewer than two
    /// grid points have a positive mean residual.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub slope_range: Option<(f64, f64)>,
    pub slope_in_range: Option<bool>,
    /// Rows with `suboptimality > rhs_total`.
    pub bound_violations: usize,
    /// Rows violating Lemma 3 (beyond its `1e-9` slack).
    pub lemma3_violations: usize,
    pub c2: f64,
    pub eps_vp: f64,
    pub eps_gvp: f64,
    /// Error that stopped the run early; `records` then holds the completed grid sizes.
    pub aborted: Option<String>,
}

impl RateReport {
    pub fn passed(&self) -> bool {
        self.aborted.is_none()
            && self.bound_violations == 0
            && self.lemma3_violations == 0
            && self.slope_in_range != Some(false)
    }
}

/// Ordinary least squares `y = intercept + slope x`.
pub fn ols_slope(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

fn rate_point(setup: &Setup, config: &ExperimentConfig, n: usize, rhs_total: f64) -> Result<Vec<(RunRecord, bool)>> {
    let runs: Vec<Result<(RunRecord, bool)>> = (0..config.repetitions)
        .into_par_iter()
        .map(|rep| {
            let start = Instant::now();
            let seed = dataset_seed(config.seed, n, rep);
            let data = sample_dataset(&setup.mdp, &setup.mu, n, seed)?;
            let result = sbeed_solve(&data, &setup.classes, setup.params)?;
            let lemma3 = setup.lemma3(&result.v_hat, &result.pi_hat)?;
            let wall_ms = if config.record_wall_time {
                start.elapsed().as_millis() as u64
            } else {
                0
            };
            Ok((
                RunRecord {
                    n,
                    rep,
                    seed,
                    suboptimality: lemma3.lhs,
                    residual_norm: lemma3.residual_norm,
                    objective: result.objective_value,
                    c2: setup.c2,
                    rhs_total,
                    wall_ms,
                },
                lemma3.holds,
            ))
        })
        .collect();
    runs.into_iter().collect()
}

/// Rate experiment: for every `n` in the grid and every repetition, sample a
/// dataset, solve SBEED exactly and record the suboptimality, the
/// consistency residual, the objective and the Theorem 1 bound.
///
/// Requires realizable, helper-complete classes (the Theorem 2 regime).
/// An error after at least one grid size completes is reported in
/// `aborted` with the completed rows kept, so they can still be emitted.
pub fn run_rate_experiment(config: &ExperimentConfig) -> Result<RateReport> {
    if !(config.class_spec.realizable && config.class_spec.helper_complete) {
        return Err(Error::InvalidConfig(
            "the rate experiment needs realizable, helper-complete classes".into(),
        ));
    }
    let setup = build_setup(config)?;
    let mut records = Vec::new();
    let mut grid = Vec::new();
    let mut lemma3_violations = 0;
    let mut aborted = None;
    for &n in &config.n_grid {
        let step = theorem_bound(&setup.bound_inputs(n, config.delta))
            .and_then(|bound| Ok((rate_point(&setup, config, n, bound.rhs_total)?, bound)));
        let (rows, bound) = match step {
            Ok(x) => x,
            Err(e) if !records.is_empty() => {
                aborted = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        let k = rows.len() as f64;
        let mean = |f: fn(&RunRecord) -> f64| rows.iter().map(|(r, _)| f(r)).sum::<f64>() / k;
        grid.push(GridPoint {
            n,
            mean_residual: mean(|r| r.residual_norm),
            mean_suboptimality: mean(|r| r.suboptimality),
            mean_objective: mean(|r| r.objective),
            bound,
        });
        lemma3_violations += rows.iter().filter(|(_, holds)| !holds).count();
        records.extend(rows.into_iter().map(|(r, _)| r));
    }
    let fit_points: Vec<&GridPoint> = grid.iter().filter(|g| g.mean_residual > 0.0).collect();
    let fit = if fit_points.len() == grid.len() {
        let xs: Vec<f64> = fit_points.iter().map(|g| (g.n as f64).ln()).collect();
        let ys: Vec<f64> = fit_points.iter().map(|g| g.mean_residual.ln()).collect();
        ols_slope(&xs, &ys)
    } else {
        None
    };
    let slope = fit.map(|f| f.0);
    Ok(RateReport {
        bound_violations: records
            .iter()
            .filter(|r| r.suboptimality > r.rhs_total)
            .count(),
        lemma3_violations,
        grid,
        slope,
        intercept: fit.map(|f| f.1),
        slope_range: config.slope_range,
        slope_in_range: config
            .slope_range
            .map(|(lo, hi)| slope.is_some_and(|s| lo <= s && s <= hi)),
        c2: setup.c2,
        eps_vp: setup.eps_vp,
        eps_gvp: setup.eps_gvp,
        records,
        aborted,
    })
}

/// One lambda of the bias sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub lambda: f64,
    /// `J(pi*)` of the unregularized MDP.
    pub j_star: f64,
    /// `J(pi*_lambda)`, the soft optimum executed without the entropy bonus.
    pub j_soft: f64,
    /// `J(pi*) - J(pi*_lambda)`.
    pub bias_observed: f64,
    /// `lambda ln|A| / (1 - gamma)`.
    pub bias_bound: f64,
    /// `-1e-10 <= bias_observed <= bias_bound + 1e-10`.
    pub within_bound: bool,
}

/// Output of [`run_lambda_sweep`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub records: Vec<SweepRecord>,
    pub violations: usize,
}

impl SweepReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Exact regularization bias `J(pi*) - J(pi*_lambda)` per lambda, against
/// Lemma 3's `lambda ln|A| / (1 - gamma)`. No sampling is involved.
pub fn run_lambda_sweep(config: &ExperimentConfig, lambda_grid: &[f64]) -> Result<SweepReport> {
    if lambda_grid.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
        return Err(Error::InvalidConfig(format!("lambda_grid must be positive: {lambda_grid:?}")));
    }
    let mdp = load_mdp(config)?;
    sweep_mdp(&mdp, lambda_grid)
}

/// [`run_lambda_sweep`] on an explicit MDP.
pub fn sweep_mdp(mdp: &FiniteMdp, lambda_grid: &[f64]) -> Result<SweepReport> {
    let (_, pi_star) = hard_value_iteration(mdp, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let j_star = performance(mdp, &pi_star, 0.0)?;
    let ln_a = (mdp.n_actions() as f64).ln();
    let mut records = Vec::with_capacity(lambda_grid.len());
    for &lambda in lambda_grid {
        let params = SoftParams::new(lambda)?;
        let (_, pi_soft) = soft_value_iteration(mdp, params, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
        let j_soft = performance(mdp, &pi_soft, 0.0)?;
        let bias_observed = j_star - j_soft;
        let bias_bound = lambda * ln_a / (1.0 - mdp.discount());
        records.push(SweepRecord {
            lambda,
            j_star,
            j_soft,
            bias_observed,
            bias_bound,
            within_bound: bias_observed >= -SWEEP_SLACK && bias_observed <= bias_bound + SWEEP_SLACK,
        });
    }
    Ok(SweepReport {
        violations: records.iter().filter(|r| !r.within_bound).count(),
        records,
    })
}

/// One row of the `verify` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub name: String,
    pub paper_ref: String,
    /// Worst observed value of the checked quantity.
    pub worst: f64,
    /// Threshold the worst value is compared against (`worst <= threshold`).
    pub threshold: f64,
    pub passed: bool,
    pub detail: String,
}

/// Output of [`run_verify`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckRow>,
    pub excess_risk: ExcessRiskStats,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Fixed-width pass/fail table.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<26} {:<12} {:>13} {:>11}  {}\n",
            "check", "paper", "worst", "threshold", "result"
        );
        for c in &self.checks {
            out.push_str(&format!(
                "{:<26} {:<12} {:>13.4e} {:>11.1e}  {}\n",
                c.name,
                c.paper_ref,
                c.worst,
                c.threshold,
                if c.passed { "PASS" } else { "FAIL" }
            ));
        }
        out
    }
}

fn check(name: &str, paper_ref: &str, worst: f64, threshold: f64, detail: String) -> CheckRow {
    CheckRow {
        name: name.into(),
        paper_ref: paper_ref.into(),
        worst,
        threshold,
        passed: worst <= threshold,
        detail,
    }
}

/// Verification suite on the configured setup: Lemma 1, occupancy flow,
/// Lemma 2 and Eq. 3 over every class pair, Lemma 3 and Theorem 1 over
/// `repetitions` SBEED runs at the smallest grid size, Lemmas 5-7 over
/// `MIN_ENSEMBLE` datasets, and Lemma 9 over 10^4 premise samples.
pub fn run_verify(config: &ExperimentConfig) -> Result<VerifyReport> {
    let setup = build_setup(config)?;
    let (mdp, params, classes) = (&setup.mdp, setup.params, &setup.classes);
    let mut checks = Vec::new();

    let gap = consistency_gap(mdp, &setup.v_soft, &setup.pi_soft, params)?;
    checks.push(check("temporal_consistency", "Lemma 1", gap, 1e-8, "max |V - C V| at the soft optimum".into()));

    let mut flow = 0.0f64;
    for pi in classes.policy_class.iter().chain([&setup.pi_soft, &setup.pi_star]) {
        flow = flow.max(occupancy_measure(mdp, pi)?.flow_residual(mdp));
    }
    checks.push(check("occupancy_flow", "Sec. 2.1", flow, 1e-10, "class policies, pi*_lambda and pi*".into()));

    let pairs: Vec<(&StateValue, &TabularPolicy)> = classes
        .value_class
        .iter()
        .flat_map(|v| classes.policy_class.iter().map(move |p| (v, p)))
        .collect();
    let per_pair: Vec<Result<(f64, f64)>> = pairs
        .par_iter()
        .map(|(v, p)| {
            let tele = telescoping_residual(mdp, v, p, params)?;
            let (_, _, gap) = conditional_variance_identity(mdp, &setup.mu, v, p, params)?;
            Ok((tele, gap))
        })
        .collect();
    let (mut tele, mut eq3) = (0.0f64, 0.0f64);
    for r in per_pair {
        let (t, g) = r?;
        tele = tele.max(t);
        eq3 = eq3.max(g);
    }
    let n_pairs = pairs.len();
    checks.push(check("telescoping", "Lemma 2", tele, 1e-9, format!("{n_pairs} class pairs")));
    checks.push(check("conditional_variance", "Eq. 3", eq3, 1e-10, format!("{n_pairs} class pairs")));

    let n = config.n_grid[0];
    let bound = theorem_bound(&setup.bound_inputs(n, config.delta))?;
    let runs: Vec<Result<SuboptimalityReport>> = (0..config.repetitions)
        .into_par_iter()
        .map(|rep| {
            let data = sample_dataset(mdp, &setup.mu, n, dataset_seed(config.seed, n, rep))?;
            let result = sbeed_solve(&data, classes, params)?;
            setup.lemma3(&result.v_hat, &result.pi_hat)
        })
        .collect();
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let worst_excess = runs
        .iter()
        .map(|r| r.lhs - r.rhs)
        .fold(f64::NEG_INFINITY, f64::max);
    checks.push(check(
        "suboptimality",
        "Lemma 3",
        worst_excess,
        LEMMA3_SLACK,
        format!("max J(pi*)-J(pi-hat)-RHS over {} runs at n={n}", runs.len()),
    ));
    let worst_sub = runs.iter().map(|r| r.lhs).fold(f64::NEG_INFINITY, f64::max);
    checks.push(check(
        "theorem_rhs",
        "Theorem 1",
        worst_sub,
        bound.rhs_total,
        format!("max suboptimality vs explicit-constant RHS at n={n}"),
    ));

    let ensemble = (0..MIN_ENSEMBLE as u64)
        .into_par_iter()
        .map(|i| sample_dataset(mdp, &setup.mu, n, derive_seed(config.seed, &[STREAM_VERIFY, i])))
        .collect::<Result<Vec<_>>>()?;
    let (_, (vi, pi)) = realizability_error(classes, &setup.mu, mdp, params)?;
    let stats = excess_risk_stats(
        &ensemble,
        classes,
        &classes.value_class[vi],
        &classes.policy_class[pi],
        params,
        mdp,
        &setup.mu,
    )?;
    let scale = 8.0 * stats.v_lambda_max * stats.v_lambda_max;
    let worst_abs = [stats.x_min, stats.x_max, stats.y_min, stats.y_max, stats.z_min, stats.z_max]
        .iter()
        .fold(0.0f64, |m, x| m.max(x.abs()));
    let flags = stats.bounds_checked;
    checks.push(check(
        "excess_risk_abs",
        "Lemmas 5-7",
        worst_abs / scale,
        1.0,
        "max |X|,|Y|,|Z| / (8 V^2_max)".into(),
    ));
    let moment_flags = [
        flags.x_mean_nonnegative,
        flags.y_mean,
        flags.z_mean,
        flags.x_variance,
        flags.y_variance,
        flags.z_variance,
    ];
    let failed = moment_flags.iter().filter(|f| !**f).count();
    checks.push(check(
        "excess_risk_moments",
        "Lemmas 5-7",
        failed as f64,
        0.0,
        "failed mean/variance checks at 4 s.e.".into(),
    ));

    let l9 = lemma9_property_check(10_000, derive_seed(config.seed, &[STREAM_VERIFY, u64::MAX]));
    checks.push(check(
        "quadratic_inequality",
        "Lemma 9",
        l9.worst_ratio,
        1.0,
        format!("{} premise samples, {} violations", l9.samples, l9.violations),
    ));

    Ok(VerifyReport {
        checks,
        excess_risk: stats,
    })
}

/// Output of the `solve` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub lambda: f64,
    pub v_soft: StateValue,
    pub pi_soft: TabularPolicy,
    /// `J_lambda(pi*_lambda)`.
    pub j_lambda_soft: f64,
    /// `J(pi*)`, unregularized.
    pub j_star: f64,
    /// Greedy actions of `pi*`.
    pub pi_star_actions: Vec<usize>,
    /// `max |V*_lambda - C^{pi*_lambda} V*_lambda|` (Lemma 1).
    pub lemma1_gap: f64,
    pub passed: bool,
}

/// Exact soft and hard optima of the configured MDP.
pub fn run_solve(config: &ExperimentConfig) -> Result<SolveReport> {
    config.validate()?;
    let mdp = load_mdp(config)?;
    let params = SoftParams::new(config.lambda)?;
    let (v_soft, pi_soft) = soft_value_iteration(&mdp, params, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let (_, pi_star) = hard_value_iteration(&mdp, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let lemma1_gap = consistency_gap(&mdp, &v_soft, &pi_soft, params)?;
    let pi_star_actions = (0..mdp.n_states())
        .map(|s| crate::mdp::argmax(pi_star.row(s)))
        .collect();
    Ok(SolveReport {
        lambda: config.lambda,
        j_lambda_soft: performance(&mdp, &pi_soft, config.lambda)?,
        j_star: performance(&mdp, &pi_star, 0.0)?,
        v_soft,
        pi_soft,
        pi_star_actions,
        lemma1_gap,
        passed: lemma1_gap <= 1e-8,
    })
}

/// Output of the `sbeed` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbeedReport {
    pub solution: SolveSummary,
    pub lemma3: SuboptimalityReport,
    pub bound: BoundReport,
    pub passed: bool,
}

/// One SBEED run at the largest grid size, with its Lemma 3 and Theorem 1 checks.
pub fn run_sbeed(config: &ExperimentConfig) -> Result<SbeedReport> {
    let setup = build_setup(config)?;
    let n = *config.n_grid.last().expect("validated non-empty");
    let data = sample_dataset(&setup.mdp, &setup.mu, n, dataset_seed(config.seed, n, 0))?;
    let result = sbeed_solve(&data, &setup.classes, setup.params)?;
    let lemma3 = setup.lemma3(&result.v_hat, &result.pi_hat)?;
    let bound = theorem_bound(&setup.bound_inputs(n, config.delta))?;
    Ok(SbeedReport {
        solution: result.summary(),
        passed: lemma3.holds && lemma3.lhs <= bound.rhs_total,
        lemma3,
        bound,
    })
}

/// Output of the `msbo` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsboReport {
    pub n: usize,
    pub seed: u64,
    pub q_idx: usize,
    pub f_idx: usize,
    pub objective_value: f64,
    /// Greedy actions of `Q-hat`.
    pub greedy_actions: Vec<usize>,
    /// `J(pi*) - J(greedy(Q-hat))`.
    pub suboptimality: f64,
}

/// One MSBO run at the largest grid size on classes from [`build_msbo_classes`].
pub fn run_msbo(config: &ExperimentConfig) -> Result<MsboReport> {
    config.validate()?;
    let mdp = load_mdp(config)?;
    let (q_class, f_class) = build_msbo_classes(
        &mdp,
        &config.class_spec,
        derive_seed(config.seed, &[STREAM_CLASSES]),
    )?;
    let (_, pi_star) = hard_value_iteration(&mdp, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let params = SoftParams::new(config.lambda)?;
    let (_, pi_soft) = soft_value_iteration(&mdp, params, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let mu = build_mu(config, &mdp, &pi_soft)?;
    let n = *config.n_grid.last().expect("validated non-empty");
    let seed = dataset_seed(config.seed, n, 0);
    let data = sample_dataset(&mdp, &mu, n, seed)?;
    let result = msbo_solve(&data, &q_class, &f_class)?;
    let greedy_actions = (0..mdp.n_states())
        .map(|s| crate::mdp::argmax(result.policy.row(s)))
        .collect();
    Ok(MsboReport {
        n,
        seed,
        q_idx: result.q_idx,
        f_idx: result.f_idx,
        objective_value: result.objective_value,
        greedy_actions,
        suboptimality: performance(&mdp, &pi_star, 0.0)? - performance(&mdp, &result.policy, 0.0)?,
    })
}

/// A report ready to be written by [`emit_report`].
#[derive(Debug, Clone, PartialEq)]
pub enum Report {
    Rate(RateReport),
    LambdaSweep(SweepReport),
}

#[derive(Serialize)]
struct Summary<'a, T: Serialize> {
    schema_version: u32,
    kind: &'a str,
    passed: bool,
    #[serde(flatten)]
    body: &'a T,
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.to_string()))
}

/// Refuses to touch existing `names` in `dir` unless `force`.
pub fn guard_outputs(dir: &Path, names: &[&str], force: bool) -> Result<()> {
    if !force && names.iter().any(|f| dir.join(f).exists()) {
        return Err(Error::OutputExists(dir.display().to_string()));
    }
    Ok(())
}

/// Writes `files` into `dir` after the overwrite guard.
pub fn write_outputs(dir: &Path, files: &[(&str, Vec<u8>)], force: bool) -> Result<Vec<PathBuf>> {
    let names: Vec<&str> = files.iter().map(|(n, _)| *n).collect();
    guard_outputs(dir, &names, force)?;
    fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    let mut written = Vec::new();
    for (name, bytes) in files {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        written.push(path);
    }
    Ok(written)
}

/// File names [`emit_report`] writes for `report`.
pub fn report_files(report: &Report) -> [&'static str; 3] {
    match report {
        Report::Rate(_) => ["runs.csv", "summary.json", "config.echo.json"],
        Report::LambdaSweep(_) => ["sweep.csv", "summary.json", "config.echo.json"],
    }
}

/// Writes the row CSV, `summary.json` (schema-versioned) and `config.echo.json`.
pub fn emit_report(
    report: &Report,
    config: &ExperimentConfig,
    output_dir: &Path,
    force: bool,
) -> Result<Vec<PathBuf>> {
    let (csv, summary) = match report {
        Report::Rate(r) => {
            if r.records.is_empty() {
                return Err(Error::InvalidInput("no run records to emit".into()));
            }
            let summary = Summary {
                schema_version: SCHEMA_VERSION,
                kind: "rate",
                passed: r.passed(),
                body: &RateSummary::from(r),
            };
            (csv_bytes(&r.records)?, serde_json::to_vec_pretty(&summary)?)
        }
        Report::LambdaSweep(r) => {
            if r.records.is_empty() {
                return Err(Error::InvalidInput("no sweep records to emit".into()));
            }
            let summary = Summary {
                schema_version: SCHEMA_VERSION,
                kind: "lambda_sweep",
                passed: r.passed(),
                body: r,
            };
            (csv_bytes(&r.records)?, serde_json::to_vec_pretty(&summary)?)
        }
    };
    let [csv_name, summary_name, echo_name] = report_files(report);
    write_outputs(
        output_dir,
        &[
            (csv_name, csv),
            (summary_name, summary),
            (echo_name, serde_json::to_vec_pretty(config)?),
        ],
        force,
    )
}

/// `summary.json` body of a rate report (rows live in `runs.csv`).
#[derive(Serialize)]
struct RateSummary<'a> {
    n_runs: usize,
    slope: Option<f64>,
    intercept: Option<f64>,
    slope_range: Option<(f64, f64)>,
    slope_in_range: Option<bool>,
    bound_violations: usize,
    lemma3_violations: usize,
    c2: f64,
    eps_vp: f64,
    eps_gvp: f64,
    aborted: &'a Option<String>,
    grid: &'a [GridPoint],
}

impl<'a> From<&'a RateReport> for RateSummary<'a> {
    fn from(r: &'a RateReport) -> Self {
        RateSummary {
            n_runs: r.records.len(),
            slope: r.slope,
            intercept: r.intercept,
            slope_range: r.slope_range,
            slope_in_range: r.slope_in_range,
            bound_violations: r.bound_violations,
            lemma3_violations: r.lemma3_violations,
            c2: r.c2,
            eps_vp: r.eps_vp,
            eps_gvp: r.eps_gvp,
            aborted: &r.aborted,
            grid: &r.grid,
        }
    }
}
