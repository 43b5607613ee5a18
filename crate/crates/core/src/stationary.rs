//! Long-run behaviour of the exchange-rate-ratio chain.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dp::StateGrid;
use crate::dynamics::{step_unchecked, PeriodOutcome};
use crate::error::{Error, Result};
use crate::market::{sample_disturbance, DisturbanceNode, MarketParams};
use crate::pricing::PoolSpec;

pub const POWER_TOL: f64 = 1e-12;
pub const POWER_MAX_ITER: usize = 1_000_000;

/// Row-stochastic matrix of the chain discretized on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionKernel {
    pub grid: Vec<f64>,
    /// Row-major `n x n`.
    pub entries: Vec<f64>,
}

impl TransitionKernel {
    pub fn size(&self) -> usize {
        self.grid.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.size();
        &self.entries[i * n..(i + 1) * n]
    }

    /// Number of states the chain never leaves.
    pub fn absorbing_states(&self) -> usize {
        (0..self.size()).filter(|&i| self.row(i)[i] >= 1.0 - 1e-15).count()
    }
}

/// Equal-probability rule used to discretize the chain. The next state depends
/// on the disturbance only through the trader's belief `I` and the exchange-rate
/// change `R_a / R_b`, both lognormal, so each gets its own quantile rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelRule {
    pub belief_points: usize,
    pub rate_points: usize,
}

impl Default for KernelRule {
    fn default() -> Self {
        KernelRule { belief_points: 16, rate_points: 256 }
    }
}

/// Standard-normal quantiles at the midpoints of `n` equal-probability bins.
fn quantile_rule(n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..n).map(|k| normal.inverse_cdf((k as f64 + 0.5) / n as f64)).collect()
}

/// Disturbances for the kernel: the exchange-rate change carried by `R_a`
/// with `R_b = 1`. Zero-variance dimensions collapse to a single point.
pub fn kernel_nodes(params: &MarketParams, rule: &KernelRule) -> Result<Vec<DisturbanceNode>> {
    params.validate()?;
    if rule.belief_points == 0 || rule.rate_points == 0 {
        return Err(Error::InvalidParam { name: "kernel_rule", reason: "rules need at least one point".into() });
    }
    let sigma = params.exchange_rate_volatility();
    let rates: Vec<f64> = if sigma == 0.0 { vec![0.0] } else { quantile_rule(rule.rate_points) }
        .into_iter()
        .map(|z| (params.mu_a - params.mu_b + sigma * z).exp())
        .collect();
    let si = params.sigma_i;
    let beliefs: Vec<f64> = if si == 0.0 { vec![0.0] } else { quantile_rule(rule.belief_points) }
        .into_iter()
        .map(|z| (-0.5 * si * si + si * z).exp())
        .collect();
    let wr = 1.0 / rates.len() as f64;
    let mut nodes = Vec::with_capacity(rates.len() * (beliefs.len() + 1));
    if params.alpha < 1.0 {
        nodes.extend(rates.iter().map(|&ra| DisturbanceNode { xi: false, belief: 1.0, ra, rb: 1.0, weight: (1.0 - params.alpha) * wr }));
    }
    if params.alpha > 0.0 {
        let wb = params.alpha / beliefs.len() as f64;
        for &belief in &beliefs {
            nodes.extend(rates.iter().map(|&ra| DisturbanceNode { xi: true, belief, ra, rb: 1.0, weight: wb * wr }));
        }
    }
    Ok(nodes)
}

/// Kernel of the chain on `grid`: each disturbance's next state is assigned
/// to the grid cell (midpoint interval) that contains it.
pub fn transition_kernel(params: &MarketParams, pool: &PoolSpec, grid: &StateGrid) -> Result<TransitionKernel> {
    transition_kernel_with(params, pool, grid, &KernelRule::default())
}

pub fn transition_kernel_with(
    params: &MarketParams,
    pool: &PoolSpec,
    grid: &StateGrid,
    rule: &KernelRule,
) -> Result<TransitionKernel> {
    pool.validate()?;
    let nodes = kernel_nodes(params, rule)?;
    let (eta, f) = (pool.eta, pool.f.value());
    let n = grid.len();
    let rows: Vec<Vec<f64>> = grid
        .points
        .par_iter()
        .map(|&s| {
            let mut row = vec![0.0; n];
            for node in &nodes {
                row[grid.nearest(step_unchecked(s, node, eta, f).s_next)] += node.weight;
            }
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= total);
            row
        })
        .collect();
    Ok(TransitionKernel { grid: grid.points.clone(), entries: rows.concat() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryDistribution {
    pub grid: Vec<f64>,
    pub mass: Vec<f64>,
    pub iterations: usize,
    /// `||pi P - pi||_1` at the returned distribution.
    pub residual: f64,
    /// Set when two or more states are absorbing, so the limit depends on the start.
    pub degenerate: bool,
}

impl StationaryDistribution {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["s", "mass"])?;
        for (s, m) in self.grid.iter().zip(&self.mass) {
            w.write_record([format!("{s:.12}"), format!("{m:.12e}")])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Point mass at the grid point nearest to `s`.
    pub fn point_mass(grid: &[f64], s: f64) -> Self {
        let g = StateGrid { points: grid.to_vec() };
        let mut mass = vec![0.0; grid.len()];
        mass[g.nearest(s)] = 1.0;
        StationaryDistribution { grid: grid.to_vec(), mass, iterations: 0, residual: 0.0, degenerate: false }
    }
}

fn step_distribution(k: &TransitionKernel, pi: &[f64], out: &mut [f64]) {
    let n = k.size();
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..n {
        let p = pi[i];
        if p == 0.0 {
            continue;
        }
        for (o, &e) in out.iter_mut().zip(k.row(i)) {
            *o += p * e;
        }
    }
}

/// Left fixed vector of the kernel by power iteration from the uniform distribution.
pub fn stationary(kernel: &TransitionKernel) -> Result<StationaryDistribution> {
    let n = kernel.size();
    if n == 0 {
        return Err(Error::GridMismatch("empty kernel".into()));
    }
    let mut pi = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    let mut change = f64::INFINITY;
    let mut iterations = 0;
    while iterations < POWER_MAX_ITER {
        iterations += 1;
        step_distribution(kernel, &pi, &mut next);
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|v| *v /= total);
        change = pi.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut pi, &mut next);
        if change < POWER_TOL {
            break;
        }
    }
    if !(change < POWER_TOL) {
        return Err(Error::NoConvergence { iterations, residual: change, history: Vec::new() });
    }
    step_distribution(kernel, &pi, &mut next);
    let residual = pi.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
    Ok(StationaryDistribution {
        grid: kernel.grid.clone(),
        mass: pi,
        iterations,
        residual,
        degenerate: kernel.absorbing_states() >= 2,
    })
}

/// `sum_i mass_i field_i` for a field tabulated on the same grid.
pub fn stationary_expectation(dist: &StationaryDistribution, grid: &[f64], field: &[f64]) -> Result<f64> {
    if grid.len() != dist.grid.len() || field.len() != grid.len() {
        return Err(Error::GridMismatch(format!(
            "distribution has {} cells, field grid {} and field {}",
            dist.grid.len(),
            grid.len(),
            field.len()
        )));
    }
    if grid.iter().zip(&dist.grid).any(|(a, b)| (a - b).abs() > 1e-12 * a.abs().max(1.0)) {
        return Err(Error::GridMismatch("field grid differs from distribution grid".into()));
    }
    Ok(dist.mass.iter().zip(field).map(|(m, f)| m * f).sum())
}

/// One simulated period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulatedStep {
    pub k: usize,
    pub s: f64,
    pub outcome: PeriodOutcome,
}

/// Simulates the chain from `s0` with the caller's random source.
pub fn simulate<R: Rng + ?Sized>(
    params: &MarketParams,
    pool: &PoolSpec,
    s0: f64,
    steps: usize,
    rng: &mut R,
) -> Result<Vec<SimulatedStep>> {
    params.validate()?;
    pool.validate()?;
    if !pool.f.in_band(s0) {
        return Err(Error::domain(format!("starting ratio {s0} lies outside the band")));
    }
    let mut s = s0;
    let mut out = Vec::with_capacity(steps);
    for k in 0..steps {
        let node = sample_disturbance(params, rng);
        let o = step_unchecked(s, &node, pool.eta, pool.f.value());
        out.push(SimulatedStep { k, s, outcome: o });
        s = o.s_next;
    }
    Ok(out)
}

/// Simulated states only, for long runs.
pub fn simulate_states<R: Rng + ?Sized>(
    params: &MarketParams,
    pool: &PoolSpec,
    s0: f64,
    steps: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    params.validate()?;
    pool.validate()?;
    if !pool.f.in_band(s0) {
        return Err(Error::domain(format!("starting ratio {s0} lies outside the band")));
    }
    let mut s = s0;
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let node = sample_disturbance(params, rng);
        s = step_unchecked(s, &node, pool.eta, pool.f.value()).s_next;
        out.push(s);
    }
    Ok(out)
}

/// Kolmogorov–Smirnov distance between a grid distribution and samples,
/// comparing cumulative mass at the cell boundaries.
pub fn ks_distance(dist: &StationaryDistribution, samples: &[f64]) -> f64 {
    let n = dist.grid.len();
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let total = sorted.len() as f64;
    let mut cum = 0.0;
    let mut worst: f64 = 0.0;
    for j in 0..n {
        cum += dist.mass[j];
        let boundary = if j + 1 < n { 0.5 * (dist.grid[j] + dist.grid[j + 1]) } else { f64::INFINITY };
        let below = sorted.partition_point(|&x| x <= boundary) as f64 / total;
        worst = worst.max((below - cum).abs());
    }
    worst
}
