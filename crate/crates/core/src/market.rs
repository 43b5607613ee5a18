//! One-period disturbances: asset returns, belief noise and trader arrival.
//!
//! Log returns `(log R_a, log R_b)` are bivariate normal, the liquidity
//! trader's belief multiplier `I` is lognormal with `E[I] = 1`, and the trader
//! arrives with probability `alpha`. All four coordinates are independent
//! across periods and `I`, the returns and the arrival are mutually independent.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::standard_normal_rule;

pub const DEFAULT_NODES_PER_DIM: usize = 7;

/// Calibrated per-period market environment and LP preferences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarketParams {
    #[serde(rename = "muA")]
    pub mu_a: f64,
    #[serde(rename = "muB")]
    pub mu_b: f64,
    #[serde(rename = "sigmaA")]
    pub sigma_a: f64,
    #[serde(rename = "sigmaB")]
    pub sigma_b: f64,
    pub rho: f64,
    pub alpha: f64,
    #[serde(rename = "sigmaI")]
    pub sigma_i: f64,
    #[serde(rename = "Rf")]
    pub rf: f64,
    pub delta: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub gamma: f64,
}

impl Default for MarketParams {
    /// 8-hour periods calibrated to ETH (asset A) and BTC (asset B).
    fn default() -> Self {
        MarketParams {
            mu_a: 0.0005,
            mu_b: 0.00038,
            sigma_a: 0.0199,
            sigma_b: 0.0152,
            rho: 0.8642,
            alpha: 0.5,
            sigma_i: 0.02,
            rf: 1.00002,
            delta: 0.998,
            n: 3,
            gamma: 2.0,
        }
    }
}

impl MarketParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |name: &'static str, reason: String| Err(Error::InvalidParam { name, reason });
        for (name, v) in [
            ("muA", self.mu_a),
            ("muB", self.mu_b),
            ("sigmaA", self.sigma_a),
            ("sigmaB", self.sigma_b),
            ("rho", self.rho),
            ("alpha", self.alpha),
            ("sigmaI", self.sigma_i),
            ("Rf", self.rf),
            ("delta", self.delta),
            ("gamma", self.gamma),
        ] {
            if !v.is_finite() {
                return bad(name, format!("must be finite, got {v}"));
            }
        }
        if self.sigma_a < 0.0 {
            return bad("sigmaA", "must be nonnegative".into());
        }
        if self.sigma_b < 0.0 {
            return bad("sigmaB", "must be nonnegative".into());
        }
        if self.sigma_i < 0.0 {
            return bad("sigmaI", "must be nonnegative".into());
        }
        if !(-1.0..=1.0).contains(&self.rho) {
            return bad("rho", format!("must lie in [-1, 1], got {}", self.rho));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha", format!("must lie in [0, 1], got {}", self.alpha));
        }
        if self.rf <= 0.0 {
            return bad("Rf", format!("must be positive, got {}", self.rf));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad("delta", format!("must lie in (0, 1), got {}", self.delta));
        }
        if self.n == 0 {
            return bad("N", "consumption cycle must be at least one period".into());
        }
        if self.gamma <= 0.0 {
            return bad("gamma", format!("must be positive, got {}", self.gamma));
        }
        Ok(())
    }

    /// Volatility of the log exchange rate `log(R_a / R_b)`.
    pub fn exchange_rate_volatility(&self) -> f64 {
        exchange_rate_volatility(self.sigma_a, self.sigma_b, self.rho)
    }

    /// Lower-triangular factor of the log-return covariance. When `sigma_a = 0`
    /// asset B carries its full volatility on the second factor.
    pub fn cholesky(&self) -> [[f64; 2]; 2] {
        if self.sigma_a > 0.0 {
            let tail = (1.0 - self.rho * self.rho).max(0.0).sqrt();
            [[self.sigma_a, 0.0], [self.rho * self.sigma_b, self.sigma_b * tail]]
        } else {
            [[0.0, 0.0], [0.0, self.sigma_b]]
        }
    }
}

pub fn exchange_rate_volatility(sigma_a: f64, sigma_b: f64, rho: f64) -> f64 {
    (sigma_a * sigma_a + sigma_b * sigma_b - 2.0 * rho * sigma_a * sigma_b)
        .max(0.0)
        .sqrt()
}

/// One realization of the period's disturbances with its probability mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceNode {
    /// Liquidity trader arrived.
    pub xi: bool,
    /// Belief multiplier of the liquidity trader (1 when `xi` is false).
    pub belief: f64,
    pub ra: f64,
    pub rb: f64,
    pub weight: f64,
}

impl DisturbanceNode {
    pub fn exchange_rate_change(&self) -> f64 {
        self.ra / self.rb
    }
}

/// Tensor-product quadrature over `(xi, I, R_a, R_b)`.
///
/// Branches with `xi = 0` carry no belief dimension. Dimensions with zero
/// volatility collapse to a single node.
pub fn build_quadrature(params: &MarketParams, nodes_per_dim: usize) -> Result<Vec<DisturbanceNode>> {
    params.validate()?;
    if nodes_per_dim < 3 {
        return Err(Error::InvalidParam {
            name: "nodes_per_dim",
            reason: format!("need at least 3 nodes per dimension, got {nodes_per_dim}"),
        });
    }
    let rule = standard_normal_rule(nodes_per_dim);
    let point = vec![(0.0, 1.0)];
    let l = params.cholesky();
    let first = if l[0][0] == 0.0 && l[1][0] == 0.0 { &point } else { &rule };
    let second = if l[1][1] == 0.0 { &point } else { &rule };
    let beliefs = if params.sigma_i == 0.0 { &point } else { &rule };

    let mut returns = Vec::with_capacity(first.len() * second.len());
    for &(z1, w1) in first {
        for &(z2, w2) in second {
            let la = params.mu_a + l[0][0] * z1;
            let lb = params.mu_b + l[1][0] * z1 + l[1][1] * z2;
            returns.push((la.exp(), lb.exp(), w1 * w2));
        }
    }

    let alpha = params.alpha;
    let mut nodes = Vec::new();
    if alpha < 1.0 {
        for &(ra, rb, w) in &returns {
            nodes.push(DisturbanceNode { xi: false, belief: 1.0, ra, rb, weight: (1.0 - alpha) * w });
        }
    }
    if alpha > 0.0 {
        let si = params.sigma_i;
        for &(z3, w3) in beliefs {
            let belief = (-0.5 * si * si + si * z3).exp();
            for &(ra, rb, w) in &returns {
                nodes.push(DisturbanceNode { xi: true, belief, ra, rb, weight: alpha * w * w3 });
            }
        }
    }
    Ok(nodes)
}

/// Draws one disturbance (weight 1) from the caller's random source.
pub fn sample_disturbance<R: Rng + ?Sized>(params: &MarketParams, rng: &mut R) -> DisturbanceNode {
    let xi = rng.random::<f64>() < params.alpha;
    let z1: f64 = StandardNormal.sample(rng);
    let z2: f64 = StandardNormal.sample(rng);
    let z3: f64 = StandardNormal.sample(rng);
    let l = params.cholesky();
    let ra = (params.mu_a + l[0][0] * z1).exp();
    let rb = (params.mu_b + l[1][0] * z1 + l[1][1] * z2).exp();
    let si = params.sigma_i;
    let belief = if xi { (-0.5 * si * si + si * z3).exp() } else { 1.0 };
    DisturbanceNode { xi, belief, ra, rb, weight: 1.0 }
}

/// Weighted expectation of `g` over a node set.
pub fn expectation<F: Fn(&DisturbanceNode) -> f64>(nodes: &[DisturbanceNode], g: F) -> f64 {
    nodes.iter().map(|n| n.weight * g(n)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weights_sum_to_one() {
        for alpha in [0.0, 0.3, 1.0] {
            let p = MarketParams { alpha, ..Default::default() };
            let nodes = build_quadrature(&p, 7).unwrap();
            let total: f64 = nodes.iter().map(|n| n.weight).sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(nodes.iter().all(|n| n.ra > 0.0 && n.rb > 0.0 && n.belief > 0.0));
        }
    }

    #[test]
    fn no_arrivals_means_no_belief_dimension() {
        let p = MarketParams { alpha: 0.0, ..Default::default() };
        let nodes = build_quadrature(&p, 7).unwrap();
        assert_eq!(nodes.len(), 49);
        assert!(nodes.iter().all(|n| !n.xi && n.belief == 1.0));
    }

    #[test]
    fn point_masses_collapse() {
        let p = MarketParams { sigma_a: 0.0, sigma_b: 0.0, sigma_i: 0.0, alpha: 1.0, ..Default::default() };
        let nodes = build_quadrature(&p, 7).unwrap();
        assert_eq!(nodes.len(), 1);
        let n = nodes[0];
        assert!(n.xi);
        assert_eq!(n.belief, 1.0);
        assert!((n.ra - p.mu_a.exp()).abs() < 1e-15 && (n.rb - p.mu_b.exp()).abs() < 1e-15);
        assert!((n.weight - 1.0).abs() < 1e-15);
    }

    #[test]
    fn lognormal_mean_matches() {
        let p = MarketParams::default();
        let nodes = build_quadrature(&p, 7).unwrap();
        let era = expectation(&nodes, |n| n.ra);
        let erb = expectation(&nodes, |n| n.rb);
        let ei = expectation(&nodes, |n| if n.xi { n.belief } else { 0.0 }) / p.alpha;
        assert!((era - (p.mu_a + 0.5 * p.sigma_a.powi(2)).exp()).abs() < 1e-10);
        assert!((erb - (p.mu_b + 0.5 * p.sigma_b.powi(2)).exp()).abs() < 1e-10);
        assert!((ei - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exchange_rate_volatility_identity() {
        let p = MarketParams::default();
        let nodes = build_quadrature(&p, 7).unwrap();
        let m = expectation(&nodes, |n| n.exchange_rate_change().ln());
        let v = expectation(&nodes, |n| (n.exchange_rate_change().ln() - m).powi(2));
        assert!((v.sqrt() - p.exchange_rate_volatility()).abs() < 1e-9);
        assert!((m - (p.mu_a - p.mu_b)).abs() < 1e-12);
    }

    #[test]
    fn zero_sigma_a_keeps_b_volatility() {
        let p = MarketParams { sigma_a: 0.0, ..Default::default() };
        let nodes = build_quadrature(&p, 5).unwrap();
        let m = expectation(&nodes, |n| n.rb.ln());
        let v = expectation(&nodes, |n| (n.rb.ln() - m).powi(2));
        assert!((v.sqrt() - p.sigma_b).abs() < 1e-12);
        assert!(nodes.iter().all(|n| (n.ra - p.mu_a.exp()).abs() < 1e-15));
    }

    #[test]
    fn sampler_is_deterministic_per_seed() {
        let p = MarketParams::default();
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            assert_eq!(sample_disturbance(&p, &mut a), sample_disturbance(&p, &mut b));
        }
    }

    #[test]
    fn sampler_without_belief_noise() {
        let p = MarketParams { sigma_i: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert_eq!(sample_disturbance(&p, &mut rng).belief, 1.0);
        }
    }

    #[test]
    fn validation() {
        assert!(MarketParams::default().validate().is_ok());
        assert!(MarketParams { rho: 1.2, ..Default::default() }.validate().is_err());
        assert!(MarketParams { delta: 1.0, ..Default::default() }.validate().is_err());
        assert!(MarketParams { n: 0, ..Default::default() }.validate().is_err());
        assert!(build_quadrature(&MarketParams::default(), 2).is_err());
    }

    #[test]
    fn json_keys() {
        let p = MarketParams::default();
        let v: serde_json::Value = serde_json::to_value(p).unwrap();
        for k in ["delta", "Rf", "muA", "muB", "sigmaA", "sigmaB", "rho", "alpha", "sigmaI", "N", "gamma"] {
            assert!(v.get(k).is_some(), "missing {k}");
        }
        let back: MarketParams = serde_json::from_value(v).unwrap();
        assert_eq!(back, p);
    }
}
