//! Fee and weight design: comparative statics of the LP's long-run value.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dp::{solve_model, DpModel, DpSolution, SolverConfig};
use crate::error::{Error, Result};
use crate::market::{build_quadrature, exchange_rate_volatility, MarketParams};
use crate::portfolio::{ConstraintSet, Kernel, PortfolioProblem, Weights};
use crate::pricing::{FeeRate, PoolSpec};
use crate::stationary::{stationary, stationary_expectation, transition_kernel, StationaryDistribution};

/// Expected DEX weight below this counts as not investing.
pub const INVEST_THRESHOLD: f64 = 1e-6;

/// Fee tiers offered by common pool factories.
pub const DEFAULT_FEE_MENU: [f64; 6] = [0.0005, 0.001, 0.003, 0.005, 0.01, 0.02];

pub fn default_eta_grid() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

/// Exchange-only portfolio `(omega_A, omega_B)` solving the one-period problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficientAllocation {
    pub omega_a: f64,
    pub omega_b: f64,
    /// `omega_A / omega_B`, absent when `omega_B = 0`.
    pub ratio: Option<f64>,
}

pub fn efficient_allocation(params: &MarketParams, constraint: ConstraintSet) -> Result<EfficientAllocation> {
    params.validate()?;
    let nodes = build_quadrature(params, crate::market::DEFAULT_NODES_PER_DIM)?;
    let excess: Vec<Weights> = nodes.iter().map(|n| [0.0, n.ra - params.rf, n.rb - params.rf]).collect();
    let coef: Vec<f64> = nodes.iter().map(|n| n.weight).collect();
    let problem = PortfolioProblem {
        rf: params.rf,
        kernel: Kernel::for_gamma(params.gamma),
        excess: &excess,
        coef: &coef,
        feasible: constraint.exchange_only(),
    };
    let sol = problem.solve(None)?;
    let [_, a, b] = sol.omega;
    Ok(EfficientAllocation { omega_a: a, omega_b: b, ratio: if b.abs() > 1e-12 { Some(a / b) } else { None } })
}

/// Long-run averages of a solved model under the stationary distribution of `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationarySummary {
    pub distribution: StationaryDistribution,
    /// Expected utility per unit of wealth at the start of a cycle.
    pub expected_v0: f64,
    /// Expected phase-0 weights `(omega_M, omega_A, omega_B)`.
    pub expected_omega: Weights,
    pub expected_consumption: f64,
    pub invests: bool,
}

pub fn stationary_summary(model: &DpModel, solution: &DpSolution) -> Result<StationarySummary> {
    let kernel = transition_kernel(&model.params, &model.pool, model.grid())?;
    let dist = stationary(&kernel)?;
    let grid = solution.grid();
    let expected_v0 = stationary_expectation(&dist, grid, &solution.raw_values[0])?;
    let mut expected_omega = [0.0; 3];
    for (j, e) in expected_omega.iter_mut().enumerate() {
        let field: Vec<f64> = solution.policy.omega[0].iter().map(|w| w[j]).collect();
        *e = stationary_expectation(&dist, grid, &field)?;
    }
    let expected_consumption = stationary_expectation(&dist, grid, &solution.policy.consumption)?;
    Ok(StationarySummary {
        distribution: dist,
        expected_v0,
        expected_omega,
        expected_consumption,
        invests: expected_omega[0] > INVEST_THRESHOLD,
    })
}

/// Parameter varied by a one-dimensional sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    #[serde(rename = "f")]
    Fee,
    #[serde(rename = "eta")]
    Eta,
    #[serde(rename = "muA")]
    MuA,
    #[serde(rename = "muB")]
    MuB,
    #[serde(rename = "sigmaA")]
    SigmaA,
    #[serde(rename = "sigmaB")]
    SigmaB,
    /// Vary `sigma_A`, moving `sigma_B` so the exchange-rate volatility is unchanged.
    #[serde(rename = "sigmaA_fixed_sigma")]
    SigmaAFixedSigma,
    #[serde(rename = "sigmaB_fixed_sigma")]
    SigmaBFixedSigma,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 8] = [
        SweepAxis::Fee,
        SweepAxis::Eta,
        SweepAxis::MuA,
        SweepAxis::MuB,
        SweepAxis::SigmaA,
        SweepAxis::SigmaB,
        SweepAxis::SigmaAFixedSigma,
        SweepAxis::SigmaBFixedSigma,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Fee => "f",
            SweepAxis::Eta => "eta",
            SweepAxis::MuA => "muA",
            SweepAxis::MuB => "muB",
            SweepAxis::SigmaA => "sigmaA",
            SweepAxis::SigmaB => "sigmaB",
            SweepAxis::SigmaAFixedSigma => "sigmaA_fixed_sigma",
            SweepAxis::SigmaBFixedSigma => "sigmaB_fixed_sigma",
        }
    }

    /// Parameters at `value` on this axis. Returns the partner volatility for
    /// the fixed-sigma axes.
    pub fn apply(self, params: &MarketParams, pool: &PoolSpec, value: f64) -> Result<(MarketParams, PoolSpec, Option<f64>)> {
        let mut p = *params;
        let mut q = *pool;
        let mut partner = None;
        match self {
            SweepAxis::Fee => q.f = FeeRate::new(value)?,
            SweepAxis::Eta => q = PoolSpec::new(value, pool.f.value())?,
            SweepAxis::MuA => p.mu_a = value,
            SweepAxis::MuB => p.mu_b = value,
            SweepAxis::SigmaA => p.sigma_a = value,
            SweepAxis::SigmaB => p.sigma_b = value,
            SweepAxis::SigmaAFixedSigma => {
                let b = partner_volatility(value, params.sigma_b, params.rho, params.exchange_rate_volatility())?;
                p.sigma_a = value;
                p.sigma_b = b;
                partner = Some(b);
            }
            SweepAxis::SigmaBFixedSigma => {
                let a = partner_volatility(value, params.sigma_a, params.rho, params.exchange_rate_volatility())?;
                p.sigma_b = value;
                p.sigma_a = a;
                partner = Some(a);
            }
        }
        p.validate()?;
        q.validate()?;
        Ok((p, q, partner))
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SweepAxis::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| Error::InvalidParam {
            name: "axis",
            reason: format!(
                "unknown sweep axis '{s}', expected one of {}",
                SweepAxis::ALL.map(|a| a.name()).join(", ")
            ),
        })
    }
}

/// Solves `sigma^2 = x^2 + y^2 - 2 rho x y` for `y`, taking the root nearest `current`.
pub fn partner_volatility(x: f64, current: f64, rho: f64, sigma: f64) -> Result<f64> {
    let disc = sigma * sigma - x * x * (1.0 - rho * rho);
    if disc < 0.0 {
        return Err(Error::domain(format!(
            "no volatility pairs with {x} to give exchange-rate volatility {sigma} at correlation {rho}"
        )));
    }
    let r = disc.sqrt();
    let roots = [rho * x + r, rho * x - r];
    let best = roots
        .into_iter()
        .filter(|&y| y >= 0.0)
        .min_by(|a, b| (a - current).abs().partial_cmp(&(b - current).abs()).unwrap())
        .ok_or_else(|| Error::domain(format!("partner volatility for {x} would be negative")))?;
    debug_assert!((exchange_rate_volatility(x, best, rho) - sigma).abs() < 1e-9);
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    /// Partner volatility on the fixed-sigma axes.
    pub partner: Option<f64>,
    pub expected_v0: f64,
    pub expected_omega: Weights,
    pub converged: bool,
    pub invests: bool,
    pub iterations: usize,
    pub residual: f64,
    /// Why the point failed, when it did.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub constraint: ConstraintSet,
    pub points: Vec<SweepPoint>,
    /// Best value among converged points where the LP invests.
    pub argmax: Option<f64>,
}

impl SweepResult {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            self.axis.name(),
            "partner",
            "expected_v0",
            "omega_m",
            "omega_a",
            "omega_b",
            "converged",
            "invests",
            "iterations",
            "residual",
        ])?;
        for p in &self.points {
            w.write_record([
                fmt_num(p.value),
                p.partner.map(fmt_num).unwrap_or_default(),
                fmt_num(p.expected_v0),
                fmt_num(p.expected_omega[0]),
                fmt_num(p.expected_omega[1]),
                fmt_num(p.expected_omega[2]),
                p.converged.to_string(),
                p.invests.to_string(),
                p.iterations.to_string(),
                format!("{:.3e}", p.residual),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn fmt_num(x: f64) -> String {
    format!("{x:.12e}")
}

/// Solves one design point and averages it under the stationary distribution.
pub fn evaluate_point(
    params: &MarketParams,
    pool: &PoolSpec,
    constraint: ConstraintSet,
    config: &SolverConfig,
) -> Result<(DpSolution, StationarySummary)> {
    let model = DpModel::new(params, pool, constraint, config.grid_size, config.nodes_per_dim)?;
    let solution = solve_model(&model, config, None)?;
    let summary = stationary_summary(&model, &solution)?;
    Ok((solution, summary))
}

fn failed_point(value: f64, partner: Option<f64>, err: &Error) -> SweepPoint {
    let (iterations, residual) = match err {
        Error::NoConvergence { iterations, residual, .. } => (*iterations, *residual),
        _ => (0, f64::NAN),
    };
    SweepPoint {
        value,
        partner,
        expected_v0: f64::NAN,
        expected_omega: [f64::NAN; 3],
        converged: false,
        invests: false,
        iterations,
        residual,
        error: Some(err.to_string()),
    }
}

/// Solves the model at every value on one axis. Points are independent and
/// run in parallel; the result lists them in ascending order of `value`.
/// Points that fail are reported, not fatal.
pub fn sweep(
    axis: SweepAxis,
    values: &[f64],
    params: &MarketParams,
    pool: &PoolSpec,
    constraint: ConstraintSet,
    config: &SolverConfig,
) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(Error::InvalidParam { name: "values", reason: "sweep needs at least one value".into() });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParam { name: "values", reason: "sweep values must be finite".into() });
    }
    params.validate()?;
    pool.validate()?;
    config.validate()?;
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted.dedup();

    let points: Vec<SweepPoint> = sorted
        .par_iter()
        .map(|&value| {
            let (p, q, partner) = match axis.apply(params, pool, value) {
                Ok(x) => x,
                Err(e) => return failed_point(value, None, &e),
            };
            match evaluate_point(&p, &q, constraint, config) {
                Ok((sol, summary)) => SweepPoint {
                    value,
                    partner,
                    expected_v0: summary.expected_v0,
                    expected_omega: summary.expected_omega,
                    converged: true,
                    invests: summary.invests,
                    iterations: sol.iterations,
                    residual: sol.residual,
                    error: None,
                },
                Err(e) => failed_point(value, partner, &e),
            }
        })
        .collect();
    let argmax = argmax(points.iter().map(|p| (p.value, p.expected_v0, p.converged && p.invests)));
    Ok(SweepResult { axis, constraint, points, argmax })
}

/// Largest score among eligible entries; on ties the first (smallest) key wins.
fn argmax<K: Copy>(entries: impl Iterator<Item = (K, f64, bool)>) -> Option<K> {
    let mut best: Option<(K, f64)> = None;
    for (k, score, ok) in entries {
        if !ok || !score.is_finite() {
            continue;
        }
        match best {
            Some((_, s)) if score <= s => {}
            _ => best = Some((k, score)),
        }
    }
    best.map(|(k, _)| k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignPoint {
    pub f: f64,
    pub eta: f64,
    pub expected_v0: f64,
    pub expected_omega: Weights,
    pub converged: bool,
    pub invests: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignResult {
    pub f_star: Option<f64>,
    pub eta_star: Option<f64>,
    pub surface: Vec<DesignPoint>,
    /// No trader holds private beliefs, so the pool never earns fees from
    /// informed flow and the design does not affect the LP.
    pub design_irrelevant: bool,
}

impl DesignResult {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["f", "eta", "expected_v0", "omega_m", "omega_a", "omega_b", "converged", "invests"])?;
        for p in &self.surface {
            w.write_record([
                fmt_num(p.f),
                fmt_num(p.eta),
                fmt_num(p.expected_v0),
                fmt_num(p.expected_omega[0]),
                fmt_num(p.expected_omega[1]),
                fmt_num(p.expected_omega[2]),
                p.converged.to_string(),
                p.invests.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Grid search over fee and weight. Ties go to the smaller fee, then the smaller weight.
pub fn optimal_design(
    params: &MarketParams,
    f_grid: &[f64],
    eta_grid: &[f64],
    constraint: ConstraintSet,
    config: &SolverConfig,
) -> Result<DesignResult> {
    if f_grid.is_empty() || eta_grid.is_empty() {
        return Err(Error::InvalidParam { name: "grid", reason: "design grids must be non-empty".into() });
    }
    params.validate()?;
    config.validate()?;
    let mut fs = f_grid.to_vec();
    fs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    fs.dedup();
    let mut etas = eta_grid.to_vec();
    etas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    etas.dedup();
    let cells: Vec<(f64, f64)> = fs.iter().flat_map(|&f| etas.iter().map(move |&e| (f, e))).collect();

    let surface: Vec<DesignPoint> = cells
        .par_iter()
        .map(|&(f, eta)| {
            let outcome = PoolSpec::new(eta, f).and_then(|pool| evaluate_point(params, &pool, constraint, config));
            match outcome {
                Ok((_, s)) => DesignPoint {
                    f,
                    eta,
                    expected_v0: s.expected_v0,
                    expected_omega: s.expected_omega,
                    converged: true,
                    invests: s.invests,
                    error: None,
                },
                Err(e) => DesignPoint {
                    f,
                    eta,
                    expected_v0: f64::NAN,
                    expected_omega: [f64::NAN; 3],
                    converged: false,
                    invests: false,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let best = argmax(surface.iter().map(|p| ((p.f, p.eta), p.expected_v0, p.converged && p.invests)));
    Ok(DesignResult {
        f_star: best.map(|b| b.0),
        eta_star: best.map(|b| b.1),
        surface,
        design_irrelevant: params.alpha == 0.0,
    })
}

/// Weights half a coarse step apart around `center`, kept inside (0, 1).
pub fn refine_around(center: f64, step: f64) -> Vec<f64> {
    (-2..=2)
        .map(|i| center + 0.25 * step * i as f64)
        .filter(|&e| e > 0.0 && e < 1.0)
        .collect()
}

/// Adds weights around the coarse optimum at the optimal fee and re-takes the
/// argmax over all points. A result without an optimum is returned unchanged.
pub fn refine_design(
    coarse: DesignResult,
    params: &MarketParams,
    eta_step: f64,
    constraint: ConstraintSet,
    config: &SolverConfig,
) -> Result<DesignResult> {
    let (Some(f), Some(eta)) = (coarse.f_star, coarse.eta_star) else {
        return Ok(coarse);
    };
    let fresh: Vec<f64> = refine_around(eta, eta_step)
        .into_iter()
        .filter(|e| !coarse.surface.iter().any(|p| p.f == f && (p.eta - e).abs() < 1e-12))
        .collect();
    if fresh.is_empty() {
        return Ok(coarse);
    }
    let extra = optimal_design(params, &[f], &fresh, constraint, config)?;
    let mut surface = coarse.surface;
    surface.extend(extra.surface);
    surface.sort_by(|a, b| a.f.partial_cmp(&b.f).unwrap().then(a.eta.partial_cmp(&b.eta).unwrap()));
    let best = argmax(surface.iter().map(|p| ((p.f, p.eta), p.expected_v0, p.converged && p.invests)));
    Ok(DesignResult {
        f_star: best.map(|b| b.0),
        eta_star: best.map(|b| b.1),
        surface,
        design_irrelevant: coarse.design_irrelevant,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_names_round_trip() {
        for a in SweepAxis::ALL {
            assert_eq!(a.name().parse::<SweepAxis>().unwrap(), a);
            let json = serde_json::to_string(&a).unwrap();
            assert_eq!(json, format!("\"{}\"", a.name()));
        }
        assert!("sigma".parse::<SweepAxis>().is_err());
    }

    #[test]
    fn partner_keeps_exchange_rate_volatility() {
        let p = MarketParams::default();
        let sigma = p.exchange_rate_volatility();
        let b = partner_volatility(p.sigma_a, p.sigma_b, p.rho, sigma).unwrap();
        assert!((b - p.sigma_b).abs() < 1e-12);
        for x in [0.012, 0.016, 0.020] {
            let (q, _, partner) = SweepAxis::SigmaAFixedSigma.apply(&p, &PoolSpec::default(), x).unwrap();
            assert_eq!(q.sigma_b, partner.unwrap());
            assert!((q.exchange_rate_volatility() - sigma).abs() < 1e-12);
        }
        assert!(partner_volatility(0.1, 0.01, 0.5, 0.01).is_err());
    }

    #[test]
    fn argmax_prefers_smaller_key_on_ties() {
        let e = [(1.0, 2.0, true), (2.0, 2.0, true), (3.0, 5.0, false)];
        assert_eq!(argmax(e.into_iter()), Some(1.0));
        assert_eq!(argmax([(1.0, 1.0, false)].into_iter()), None);
    }

    #[test]
    fn efficient_allocation_no_short() {
        let e = efficient_allocation(&MarketParams::default(), ConstraintSet::NoShort).unwrap();
        assert!(e.omega_a >= 0.0 && e.omega_b >= 0.0 && e.omega_a + e.omega_b <= 1.0 + 1e-12);
    }

    #[test]
    fn refine_stays_inside_unit_interval() {
        assert_eq!(refine_around(0.5, 0.1).len(), 5);
        assert!(refine_around(0.05, 0.1).iter().all(|&e| e > 0.0));
    }
}
