//! The liquidity provider's dynamic program on the exchange-rate-ratio grid.
//!
//! Wealth is consumed every `N` periods. With CRRA utility and a geometric-mean
//! pool the value per unit of wealth depends only on the ratio `s` and the
//! phase `k` within the consumption cycle. For `gamma != 1` the solver works
//! with the transformed values
//! `v~_0 = (1-gamma) v_0 + 1/(1-delta^N)` and
//! `v~_k = (1-gamma) v_k + delta^(N-k)/(1-delta^N)`, which satisfy
//! `v~_k = S_k v~_(k+1)` for `k >= 1` and `v~_0 = S^_0 v~_1` with
//! `(S_k J)(s) = delta opt_omega E[(R^p)^(1-gamma) J(s')]` and
//! `(S^_0 J)(s) = opt_c { c^(1-gamma) + (1-c)^(1-gamma) (S_0 J)(s) }`.
//! For log utility the raw values satisfy
//! `(T_k J)(s) = delta sup_omega E[J(s') + delta^(N-k-1)/(1-delta^N) log R^p]`
//! and `(T^_0 J)(s) = (T_0 J)(s) + sup_c { log c + delta^N/(1-delta^N) log(1-c) }`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::step_unchecked;
use crate::error::{Error, Result};
use crate::market::{build_quadrature, DisturbanceNode, MarketParams};
use crate::portfolio::{ConstraintSet, Kernel, PortfolioProblem, Weights};
use crate::pricing::{FeeRate, PoolSpec};

/// Uniform grid on the no-trade band, endpoints included exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateGrid {
    pub points: Vec<f64>,
}

impl StateGrid {
    pub fn band(fee: FeeRate, size: usize) -> Result<Self> {
        let (lo, hi) = fee.band();
        if lo == hi {
            return Ok(StateGrid { points: vec![1.0] });
        }
        if size < 2 {
            return Err(Error::InvalidParam {
                name: "grid_size",
                reason: format!("need at least 2 grid points, got {size}"),
            });
        }
        let h = (hi - lo) / (size - 1) as f64;
        let mut points: Vec<f64> = (0..size).map(|i| lo + h * i as f64).collect();
        points[0] = lo;
        points[size - 1] = hi;
        Ok(StateGrid { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Left neighbour index and interpolation weight of the right neighbour.
    pub fn locate(&self, s: f64) -> (usize, f64) {
        let n = self.points.len();
        if n == 1 {
            return (0, 0.0);
        }
        let lo = self.points[0];
        let hi = self.points[n - 1];
        let h = (hi - lo) / (n - 1) as f64;
        let x = ((s - lo) / h).clamp(0.0, (n - 1) as f64);
        let i = (x.floor() as usize).min(n - 2);
        let t = ((s - self.points[i]) / (self.points[i + 1] - self.points[i])).clamp(0.0, 1.0);
        (i, t)
    }

    /// Index of the cell (midpoint interval) containing `s`.
    pub fn nearest(&self, s: f64) -> usize {
        let (i, t) = self.locate(s);
        if t > 0.5 {
            i + 1
        } else {
            i
        }
    }

    /// Linear interpolation of grid values at `s`.
    pub fn interpolate(&self, values: &[f64], s: f64) -> f64 {
        let (i, t) = self.locate(s);
        if t == 0.0 {
            values[i]
        } else {
            values[i] * (1.0 - t) + values[i + 1] * t
        }
    }
}

/// Per grid point and quadrature node: next state and asset returns.
#[derive(Debug, Clone)]
pub struct Transitions {
    pub grid: StateGrid,
    pub weights: Vec<f64>,
    /// Row-major `[grid point][node]`: returns in excess of `R_f` for (pool, A, B).
    pub excess: Vec<Weights>,
    pub s_next: Vec<f64>,
    left: Vec<u32>,
    frac: Vec<f64>,
}

impl Transitions {
    pub fn build(grid: StateGrid, nodes: &[DisturbanceNode], pool: &PoolSpec, rf: f64) -> Self {
        let eta = pool.eta;
        let f = pool.f.value();
        let rows: Vec<Vec<(Weights, f64)>> = grid
            .points
            .par_iter()
            .map(|&s| {
                nodes
                    .iter()
                    .map(|n| {
                        let o = step_unchecked(s, n, eta, f);
                        ([o.pool_return() - rf, n.ra - rf, n.rb - rf], o.s_next)
                    })
                    .collect()
            })
            .collect();
        let mut excess = Vec::with_capacity(grid.len() * nodes.len());
        let mut s_next = Vec::with_capacity(excess.capacity());
        let mut left = Vec::with_capacity(excess.capacity());
        let mut frac = Vec::with_capacity(excess.capacity());
        for row in rows {
            for (e, s) in row {
                let (i, t) = grid.locate(s);
                excess.push(e);
                s_next.push(s);
                left.push(i as u32);
                frac.push(t);
            }
        }
        Transitions {
            grid,
            weights: nodes.iter().map(|n| n.weight).collect(),
            excess,
            s_next,
            left,
            frac,
        }
    }

    pub fn nodes(&self) -> usize {
        self.weights.len()
    }

    /// `J(s')` for every node from grid point `i`.
    fn next_values(&self, i: usize, j: &[f64], out: &mut [f64]) {
        let m = self.nodes();
        let base = i * m;
        for n in 0..m {
            let l = self.left[base + n] as usize;
            let t = self.frac[base + n];
            out[n] = if t == 0.0 { j[l] } else { j[l] * (1.0 - t) + j[l + 1] * t };
        }
    }

    fn row(&self, i: usize) -> &[Weights] {
        let m = self.nodes();
        &self.excess[i * m..(i + 1) * m]
    }
}

/// How the composite operator is iterated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum IterationMethod {
    /// Plain value iteration of the composite operator.
    ValueIteration,
    /// Each full operator application is followed by `evaluations` cheap
    /// applications with the portfolio policy held fixed. The stopping rule is
    /// still the residual of the full operator.
    ModifiedPolicy { evaluations: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub grid_size: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub nodes_per_dim: usize,
    pub method: IterationMethod,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            grid_size: 101,
            tol: 1e-9,
            max_iter: 10_000,
            nodes_per_dim: 7,
            method: IterationMethod::ValueIteration,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParam { name: "tol", reason: format!("must be positive, got {}", self.tol) });
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidParam { name: "max_iter", reason: "must be at least 1".into() });
        }
        if self.grid_size < 2 {
            return Err(Error::InvalidParam { name: "grid_size", reason: "must be at least 2".into() });
        }
        Ok(())
    }
}

/// Everything the operators need, precomputed once per model.
#[derive(Debug, Clone)]
pub struct DpModel {
    pub params: MarketParams,
    pub pool: PoolSpec,
    pub constraint: ConstraintSet,
    pub transitions: Transitions,
    kernel: Kernel,
}

impl DpModel {
    pub fn new(
        params: &MarketParams,
        pool: &PoolSpec,
        constraint: ConstraintSet,
        grid_size: usize,
        nodes_per_dim: usize,
    ) -> Result<Self> {
        params.validate()?;
        pool.validate()?;
        let nodes = build_quadrature(params, nodes_per_dim)?;
        let grid = StateGrid::band(pool.f, grid_size)?;
        Ok(DpModel {
            params: *params,
            pool: *pool,
            constraint,
            transitions: Transitions::build(grid, &nodes, pool, params.rf),
            kernel: Kernel::for_gamma(params.gamma),
        })
    }

    pub fn grid(&self) -> &StateGrid {
        &self.transitions.grid
    }

    fn log_utility(&self) -> bool {
        self.params.gamma == 1.0
    }

    /// `delta^(N-k-1) / (1 - delta^N)`: weight of the log return in `T_k`.
    fn log_weight(&self, k: usize) -> f64 {
        let d = self.params.delta;
        let n = self.params.n as i32;
        d.powi(n - k as i32 - 1) / (1.0 - d.powi(n))
    }

    fn problem<'a>(&'a self, i: usize, coef: &'a [f64]) -> PortfolioProblem<'a> {
        PortfolioProblem {
            rf: self.params.rf,
            kernel: self.kernel,
            excess: self.transitions.row(i),
            coef,
            feasible: self.constraint.polytope(),
        }
    }
}

/// Values and maximizing weights of one portfolio operator application.
#[derive(Debug, Clone, PartialEq)]
pub struct PortfolioStep {
    pub values: Vec<f64>,
    pub omega: Vec<Weights>,
}

/// Applies `S_k` (or `T_k` for log utility) to `j_next`, optionally warm
/// starting the inner optimizer from a previous policy.
pub fn apply_portfolio_operator(
    model: &DpModel,
    j_next: &[f64],
    k: usize,
    warm: Option<&[Weights]>,
) -> Result<PortfolioStep> {
    let grid_len = model.grid().len();
    if j_next.len() != grid_len {
        return Err(Error::GridMismatch(format!("value has {} entries, grid {}", j_next.len(), grid_len)));
    }
    let log = model.log_utility();
    if !log && j_next.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Invariant("transformed values must be positive".into()));
    }
    let delta = model.params.delta;
    let lw = model.log_weight(k);
    let m = model.transitions.nodes();
    let results: Vec<Result<(f64, Weights)>> = (0..grid_len)
        .into_par_iter()
        .map_init(
            || (vec![0.0; m], vec![0.0; m]),
            |(jn, coef), i| {
                model.transitions.next_values(i, j_next, jn);
                let w = &model.transitions.weights;
                let expected_next = if log {
                    coef.copy_from_slice(w);
                    w.iter().zip(jn.iter()).map(|(a, b)| a * b).sum::<f64>()
                } else {
                    for n in 0..m {
                        coef[n] = w[n] * jn[n];
                    }
                    0.0
                };
                let prob = model.problem(i, coef);
                let sol = prob.solve(warm.map(|w| w[i])).map_err(|e| match e {
                    Error::Optimizer { reason, .. } => Error::Optimizer { s: model.grid().points[i], phase: k, reason },
                    other => other,
                })?;
                let value = if log {
                    delta * (expected_next - lw * sol.objective)
                } else if model.params.gamma > 1.0 {
                    delta * sol.objective
                } else {
                    -delta * sol.objective
                };
                Ok((value, sol.omega))
            },
        )
        .collect();
    let mut values = Vec::with_capacity(grid_len);
    let mut omega = Vec::with_capacity(grid_len);
    for r in results {
        let (v, w) = r?;
        values.push(v);
        omega.push(w);
    }
    Ok(PortfolioStep { values, omega })
}

/// Consumption step applied pointwise to `a = (S_0 v~_1)(s)` (or `(T_0 v_1)(s)`).
/// Returns the phase-0 values and consumption fractions.
pub fn apply_consumption_operator(a: &[f64], params: &MarketParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let gamma = params.gamma;
    if gamma == 1.0 {
        let lc = log_consumption(params);
        return Ok((a.iter().map(|v| v + lc.value).collect(), vec![lc.c_star; a.len()]));
    }
    let mut values = Vec::with_capacity(a.len());
    let mut cons = Vec::with_capacity(a.len());
    for &x in a {
        if !(x > 0.0) || !x.is_finite() {
            return Err(Error::Invariant(format!("consumption operator needs a positive argument, got {x}")));
        }
        let (v, c) = consumption_closed_form(x, gamma);
        values.push(v);
        cons.push(c);
    }
    Ok((values, cons))
}

/// `opt_c { c^(1-gamma) + (1-c)^(1-gamma) a } = (1 + a^(1/gamma))^gamma`,
/// attained at `c = 1 / (1 + a^(1/gamma))`.
pub fn consumption_closed_form(a: f64, gamma: f64) -> (f64, f64) {
    let r = a.powf(1.0 / gamma);
    ((1.0 + r).powf(gamma), 1.0 / (1.0 + r))
}

/// Log-utility consumption: maximizer of `log c + K log(1-c)` with
/// `K = delta^N/(1-delta^N)`, compared with the value `delta^N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogConsumption {
    /// Maximizer from the first-order condition, `1/(1+K) = 1 - delta^N`.
    pub c_star: f64,
    /// Maximum of the scalar problem.
    pub value: f64,
    /// `delta^N`, the alternative closed form; differs from `c_star` unless `delta^N = 1/2`.
    pub delta_pow_n: f64,
    pub discrepancy: f64,
}

pub fn log_consumption(params: &MarketParams) -> LogConsumption {
    let dn = params.delta.powi(params.n as i32);
    let k = dn / (1.0 - dn);
    let c = 1.0 / (1.0 + k);
    LogConsumption {
        c_star: c,
        value: c.ln() + k * (1.0 - c).ln(),
        delta_pow_n: dn,
        discrepancy: c - dn,
    }
}

/// Values per phase on the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueFunction {
    pub grid: Vec<f64>,
    pub form: ValueForm,
    /// `values[k][i]`, phase `k` at grid point `i`.
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueForm {
    Raw,
    Transformed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    /// Phase-0 consumption fraction at each grid point.
    pub consumption: Vec<f64>,
    /// `omega[k][i] = (omega_m, omega_a, omega_b)`.
    pub omega: Vec<Vec<Weights>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpSolution {
    pub value: ValueFunction,
    /// Utility per unit of wealth, `v_k`, for every phase.
    pub raw_values: Vec<Vec<f64>>,
    pub policy: PolicyTable,
    pub iterations: usize,
    pub residual: f64,
    pub residual_history: Vec<f64>,
    /// Geometric mean of successive residual ratios over the tail of the run.
    pub contraction_ratio: Option<f64>,
    pub growth: GrowthReport,
    pub log_consumption: Option<LogConsumption>,
}

impl DpSolution {
    pub fn grid(&self) -> &[f64] {
        &self.value.grid
    }
}

/// Certainty-equivalent growth bound `R_bar` and whether `delta R_bar^(1-gamma) < 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthReport {
    pub r_bar: f64,
    /// `delta R_bar^(1-gamma)` (or `delta` for log utility).
    pub modulus: f64,
    pub satisfied: bool,
}

/// Estimates `R_bar` from the one-period certainty equivalent, optimized over
/// the constraint set at every grid point: the infimum over `s` for
/// `gamma > 1`, the supremum otherwise.
pub fn growth_condition_check(model: &DpModel) -> GrowthReport {
    let gamma = model.params.gamma;
    let delta = model.params.delta;
    let p = 1.0 - gamma;
    let coef = &model.transitions.weights;
    let mut r_bar: Option<f64> = None;
    let mut finite = true;
    for i in 0..model.grid().len() {
        let ce = match model.problem(i, coef).solve(None) {
            Ok(sol) => {
                if gamma == 1.0 {
                    (-sol.objective).exp()
                } else if gamma > 1.0 {
                    sol.objective.powf(1.0 / p)
                } else {
                    (-sol.objective).powf(1.0 / p)
                }
            }
            Err(_) => f64::NAN,
        };
        if !ce.is_finite() {
            finite = false;
            continue;
        }
        r_bar = Some(match r_bar {
            None => ce,
            Some(r) if gamma > 1.0 => r.min(ce),
            Some(r) => r.max(ce),
        });
    }
    let r_bar = r_bar.unwrap_or(f64::NAN);
    if gamma == 1.0 {
        return GrowthReport { r_bar, modulus: delta, satisfied: finite && r_bar.is_finite() };
    }
    let modulus = delta * r_bar.powf(p);
    GrowthReport { r_bar, modulus, satisfied: finite && modulus < 1.0 }
}

/// Runs value iteration on the composite operator until the sup-norm change
/// of the phase-0 values drops below `config.tol`.
pub fn solve_fixed_point(
    params: &MarketParams,
    pool: &PoolSpec,
    constraint: ConstraintSet,
    config: &SolverConfig,
) -> Result<DpSolution> {
    config.validate()?;
    let model = DpModel::new(params, pool, constraint, config.grid_size, config.nodes_per_dim)?;
    solve_model(&model, config, None)
}

/// Value iteration on a prebuilt model, optionally from a starting phase-0
/// value (interpolated onto the model's grid by relative position in the band).
pub fn solve_model(model: &DpModel, config: &SolverConfig, start: Option<(&[f64], &[f64])>) -> Result<DpSolution> {
    config.validate()?;
    let params = &model.params;
    let n_phases = params.n;
    let log = model.log_utility();
    let grid = model.grid().clone();
    let len = grid.len();
    let growth = growth_condition_check(model);

    let mut v0 = match start {
        Some((g, v)) => transfer(g, v, &grid.points),
        None => vec![if log { 0.0 } else { 1.0 }; len],
    };
    if !log && v0.iter().any(|&x| !(x > 0.0)) {
        v0 = vec![1.0; len];
    }

    let mut omega: Vec<Vec<Weights>> = vec![Vec::new(); n_phases];
    let mut phase_values: Vec<Vec<f64>> = vec![Vec::new(); n_phases];
    let mut consumption = Vec::new();
    let mut history = Vec::new();
    let mut residual = f64::INFINITY;
    let mut iterations = 0;

    while iterations < config.max_iter {
        iterations += 1;
        let mut j = v0.clone();
        for k in (0..n_phases).rev() {
            let warm = if omega[k].is_empty() { None } else { Some(omega[k].as_slice()) };
            let step = apply_portfolio_operator(model, &j, k, warm)?;
            omega[k] = step.omega;
            if k == 0 {
                let (vals, c) = apply_consumption_operator(&step.values, params)?;
                consumption = c;
                j = vals;
            } else {
                phase_values[k] = step.values.clone();
                j = step.values;
            }
        }
        residual = sup_diff(&j, &v0);
        history.push(residual);
        v0 = j;
        if !residual.is_finite() {
            break;
        }
        if residual < config.tol {
            break;
        }
        if let IterationMethod::ModifiedPolicy { evaluations } = config.method {
            if evaluations > 0 {
                v0 = evaluate_policy(model, &omega, v0, evaluations)?;
            }
        }
    }
    if !(residual < config.tol) {
        return Err(Error::NoConvergence { iterations, residual, history });
    }
    phase_values[0] = v0.clone();

    if !log {
        let worst = v0.iter().cloned().fold(f64::INFINITY, f64::min);
        if worst < 1.0 - 1e-9 {
            return Err(Error::Invariant(format!("transformed phase-0 value {worst} fell below 1")));
        }
    }
    let raw_values = raw_from(params, &phase_values);
    let contraction_ratio = match config.method {
        IterationMethod::ValueIteration => tail_ratio(&history),
        IterationMethod::ModifiedPolicy { .. } => None,
    };
    Ok(DpSolution {
        value: ValueFunction {
            grid: grid.points.clone(),
            form: if log { ValueForm::Raw } else { ValueForm::Transformed },
            values: phase_values,
        },
        raw_values,
        policy: PolicyTable { consumption, omega },
        iterations,
        residual,
        residual_history: history,
        contraction_ratio,
        growth,
        log_consumption: if log { Some(log_consumption(params)) } else { None },
    })
}

/// Converts solver values to utilities per unit of wealth.
fn raw_from(params: &MarketParams, phase_values: &[Vec<f64>]) -> Vec<Vec<f64>> {
    if params.gamma == 1.0 {
        return phase_values.to_vec();
    }
    let d = params.delta;
    let n = params.n as i32;
    let denom = 1.0 - d.powi(n);
    phase_values
        .iter()
        .enumerate()
        .map(|(k, vals)| {
            let shift = if k == 0 { 1.0 } else { 0.0 } + d.powi(n - k as i32) / denom;
            vals.iter().map(|v| (v - shift) / (1.0 - params.gamma)).collect()
        })
        .collect()
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn tail_ratio(history: &[f64]) -> Option<f64> {
    if history.len() < 3 {
        return None;
    }
    let take = (history.len() - 1).min(50);
    let end = history.len() - 1;
    let start = end - take;
    if history[start] <= 0.0 || history[end] <= 0.0 {
        return None;
    }
    Some((history[end] / history[start]).powf(1.0 / take as f64))
}

/// Moves values from one grid to another by relative position in the band.
fn transfer(from_grid: &[f64], values: &[f64], to: &[f64]) -> Vec<f64> {
    if from_grid.len() == 1 || to.len() == 1 {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        return vec![mean; to.len()];
    }
    let src = StateGrid { points: from_grid.to_vec() };
    let (a0, a1) = (from_grid[0], from_grid[from_grid.len() - 1]);
    let (b0, b1) = (to[0], to[to.len() - 1]);
    to.iter()
        .map(|&s| {
            let rel = (s - b0) / (b1 - b0);
            src.interpolate(values, a0 + rel * (a1 - a0))
        })
        .collect()
}

/// Applies the composite operator `evaluations` times with the portfolio
/// policy held fixed; each phase is then a linear map on grid values.
fn evaluate_policy(model: &DpModel, omega: &[Vec<Weights>], mut v0: Vec<f64>, evaluations: usize) -> Result<Vec<f64>> {
    let params = &model.params;
    let log = model.log_utility();
    let len = model.grid().len();
    let m = model.transitions.nodes();
    let p = 1.0 - params.gamma;
    let delta = params.delta;

    // Dense transition matrices (and log-return offsets) per phase.
    let mut mats = Vec::with_capacity(params.n);
    let mut offsets = Vec::with_capacity(params.n);
    for k in 0..params.n {
        let lw = model.log_weight(k);
        let mut mat = vec![0.0; len * len];
        let mut off = vec![0.0; len];
        for i in 0..len {
            let w = omega[k][i];
            let row = model.transitions.row(i);
            for n in 0..m {
                let r = &row[n];
                let x = params.rf + w[0] * r[0] + w[1] * r[1] + w[2] * r[2];
                let wt = model.transitions.weights[n];
                let coef = if log {
                    off[i] += delta * lw * wt * x.ln();
                    delta * wt
                } else {
                    delta * wt * x.powf(p)
                };
                let idx = i * m + n;
                let l = model.transitions.left[idx] as usize;
                let t = model.transitions.frac[idx];
                mat[i * len + l] += coef * (1.0 - t);
                if t > 0.0 {
                    mat[i * len + l + 1] += coef * t;
                }
            }
        }
        mats.push(mat);
        offsets.push(off);
    }

    let mut scratch = vec![0.0; len];
    for _ in 0..evaluations {
        let mut j = v0;
        for k in (0..params.n).rev() {
            for i in 0..len {
                let row = &mats[k][i * len..(i + 1) * len];
                scratch[i] = offsets[k][i] + row.iter().zip(&j).map(|(a, b)| a * b).sum::<f64>();
            }
            if k == 0 {
                j = apply_consumption_operator(&scratch, params)?.0;
            } else {
                j.copy_from_slice(&scratch);
            }
        }
        v0 = j;
    }
    Ok(v0)
}
