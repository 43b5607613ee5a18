//! Pricing functions, marginal exchange rates and the optimal-trade solver.
//!
//! A pool holds deposits `(y_a, y_b)`. A pricing function `F` is held constant
//! (before fees) by every trade, and its marginal exchange rate depends on the
//! deposits only through `G(y_a / y_b)`. Trades are expressed as fractions of
//! the pool's deposits withdrawn by the trader; a negative fraction is a deposit.
//!
//! The central quantity is the exchange-rate ratio `s`: the pool's marginal
//! rate divided by the rate the trader believes in. Traders leave the pool
//! alone while `s` sits in the no-trade band `[1/(1+f), 1+f]`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unit trading fee `f >= 0`, paid on the deposited leg of a trade and kept in the pool.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct FeeRate(f64);

impl FeeRate {
    pub fn new(f: f64) -> Result<Self> {
        if !f.is_finite() || f < 0.0 {
            return Err(Error::InvalidParam {
                name: "f",
                reason: format!("fee must be finite and nonnegative, got {f}"),
            });
        }
        Ok(FeeRate(f))
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }

    /// The no-trade band `[1/(1+f), 1+f]`.
    #[inline]
    pub fn band(self) -> (f64, f64) {
        (1.0 / (1.0 + self.0), 1.0 + self.0)
    }

    /// Closed band membership; no epsilon is applied at the edges.
    #[inline]
    pub fn in_band(self, s: f64) -> bool {
        let (lo, hi) = self.band();
        !(s < lo) && !(s > hi)
    }
}

impl TryFrom<f64> for FeeRate {
    type Error = Error;
    fn try_from(f: f64) -> Result<Self> {
        FeeRate::new(f)
    }
}

impl From<FeeRate> for f64 {
    fn from(f: FeeRate) -> f64 {
        f.0
    }
}

/// Fractions `(d_a, d_b)` of the pool's deposits withdrawn by a trader.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TradeFractions {
    pub d_a: f64,
    pub d_b: f64,
}

impl TradeFractions {
    pub const NONE: TradeFractions = TradeFractions { d_a: 0.0, d_b: 0.0 };

    pub fn is_none(&self) -> bool {
        self.d_a == 0.0 && self.d_b == 0.0
    }

    /// Deposit multipliers after the trade, with the fee added on the deposited leg.
    pub fn post_trade_factors(&self, fee: FeeRate) -> (f64, f64) {
        let f = fee.value();
        let leg = |d: f64| if d < 0.0 { 1.0 - (1.0 + f) * d } else { 1.0 - d };
        (leg(self.d_a), leg(self.d_b))
    }

    /// Fee-inclusive trader profit per unit of `b * y_b`, given the belief ratio
    /// `a / b` and the deposit ratio `y_a / y_b`.
    pub fn trader_objective(&self, belief_ratio: f64, deposit_ratio: f64, fee: FeeRate) -> f64 {
        let f = fee.value();
        let pay = |d: f64| if d < 0.0 { (1.0 + f) * d } else { d };
        belief_ratio * deposit_ratio * pay(self.d_a) + pay(self.d_b)
    }
}

/// Which asset the trader acquires.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    A,
    B,
}

type LevelFn = dyn Fn(f64, f64) -> f64 + Send + Sync;
type RateFn = dyn Fn(f64) -> f64 + Send + Sync;

/// A user supplied pricing function `F` together with its marginal-rate function `G`.
#[derive(Clone)]
pub struct CustomPricing {
    name: String,
    level: Arc<LevelFn>,
    marginal: Arc<RateFn>,
}

impl fmt::Debug for CustomPricing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomPricing").field("name", &self.name).finish()
    }
}

const VALIDATION_POINTS: usize = 64;

impl CustomPricing {
    /// Builds a custom pricing function and checks the pricing axioms on a
    /// sample grid: `F` increasing in both deposits, `G` strictly decreasing,
    /// and level sets preserved under scaling of the deposits.
    pub fn new<F, G>(name: impl Into<String>, level: F, marginal: G) -> Result<Self>
    where
        F: Fn(f64, f64) -> f64 + Send + Sync + 'static,
        G: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        let pf = CustomPricing {
            name: name.into(),
            level: Arc::new(level),
            marginal: Arc::new(marginal),
        };
        pf.validate()?;
        Ok(pf)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    fn validate(&self) -> Result<()> {
        let zs: Vec<f64> = (0..VALIDATION_POINTS)
            .map(|i| 10f64.powf(-3.0 + 6.0 * i as f64 / (VALIDATION_POINTS - 1) as f64))
            .collect();
        let mut prev = f64::INFINITY;
        for &z in &zs {
            let g = (self.marginal)(z);
            if !g.is_finite() || g <= 0.0 {
                return Err(Error::InvalidPricing(format!("G({z}) = {g} is not positive")));
            }
            if g >= prev {
                return Err(Error::InvalidPricing(format!("G is not strictly decreasing near z = {z}")));
            }
            prev = g;
        }
        for &z in zs.iter().step_by(8) {
            let base = (self.level)(z, 1.0);
            if !((self.level)(z * 1.01, 1.0) > base && (self.level)(z, 1.01) > base) {
                return Err(Error::InvalidPricing(format!("F is not increasing at ({z}, 1)")));
            }
            // Find x' with F(x', 2) = F(z, 1), then check the level set survives scaling.
            let target = base;
            let x2 = bisect_increasing(|x| (self.level)(x, 2.0) - target, 0.0, z)?;
            for c in [0.5, 3.0] {
                let lhs = (self.level)(c * z, c);
                let rhs = (self.level)(c * x2, 2.0 * c);
                if (lhs - rhs).abs() > 1e-6 * lhs.abs().max(1.0) {
                    return Err(Error::InvalidPricing(format!(
                        "level sets are not scale invariant at ({z}, 1), c = {c}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Root of an increasing function on `(lo, hi]`, expanding `hi` geometrically if needed.
fn bisect_increasing<F: Fn(f64) -> f64>(g: F, lo: f64, hi: f64) -> Result<f64> {
    let (mut lo, mut hi) = (lo, hi.max(f64::MIN_POSITIVE));
    let mut expansions = 0;
    while g(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
        expansions += 1;
        if expansions > 200 || !hi.is_finite() {
            return Err(Error::Bracket { lo, hi });
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// The pricing function of a two-asset pool.
#[derive(Debug, Clone)]
pub enum PricingFunction {
    /// Constant geometric mean `F = y_a^eta * y_b^(1-eta)`.
    Cgmmm { eta: f64 },
    Custom(CustomPricing),
}

impl PricingFunction {
    pub fn cgmmm(eta: f64) -> Result<Self> {
        check_eta(eta)?;
        Ok(PricingFunction::Cgmmm { eta })
    }

    /// The geometric-mean pool expressed only through `F` and `G`, so that the
    /// generic solver cannot use any closed form.
    pub fn cgmmm_as_custom(eta: f64) -> Result<Self> {
        check_eta(eta)?;
        let pf = CustomPricing::new(
            format!("cgmmm({eta})"),
            move |x, y| x.powf(eta) * y.powf(1.0 - eta),
            move |z| eta / ((1.0 - eta) * z),
        )?;
        Ok(PricingFunction::Custom(pf))
    }

    /// Pricing level `F(x, y)`.
    pub fn level(&self, x: f64, y: f64) -> f64 {
        match self {
            PricingFunction::Cgmmm { eta } => x.powf(*eta) * y.powf(1.0 - eta),
            PricingFunction::Custom(c) => (c.level)(x, y),
        }
    }

    fn g(&self, z: f64) -> f64 {
        match self {
            PricingFunction::Cgmmm { eta } => eta / ((1.0 - eta) * z),
            PricingFunction::Custom(c) => (c.marginal)(z),
        }
    }

    /// Inverse of the marginal-rate function. Custom functions are inverted by
    /// bisection in `log z`.
    pub fn g_inverse(&self, rate: f64) -> Result<f64> {
        if !(rate > 0.0) || !rate.is_finite() {
            return Err(Error::domain(format!("cannot invert G at {rate}")));
        }
        match self {
            PricingFunction::Cgmmm { eta } => Ok(eta / ((1.0 - eta) * rate)),
            PricingFunction::Custom(c) => {
                // G decreasing: find log z with G(z) - rate changing sign from + to -.
                let h = |lz: f64| (c.marginal)(lz.exp()) - rate;
                let (mut lo, mut hi) = (-1.0f64, 1.0f64);
                let mut n = 0;
                while h(lo) < 0.0 {
                    lo *= 2.0;
                    n += 1;
                    if n > 60 {
                        return Err(Error::Bracket { lo: lo.exp(), hi: hi.exp() });
                    }
                }
                n = 0;
                while h(hi) > 0.0 {
                    hi *= 2.0;
                    n += 1;
                    if n > 60 {
                        return Err(Error::Bracket { lo: lo.exp(), hi: hi.exp() });
                    }
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if mid <= lo || mid >= hi {
                        break;
                    }
                    if h(mid) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                Ok((0.5 * (lo + hi)).exp())
            }
        }
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 && eta < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParam {
            name: "eta",
            reason: format!("weight must lie in (0, 1), got {eta}"),
        })
    }
}

/// Design of a geometric-mean pool: weight `eta` on asset A and unit fee `f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolSpec {
    pub eta: f64,
    pub f: FeeRate,
}

impl Default for PoolSpec {
    fn default() -> Self {
        PoolSpec { eta: 0.5, f: FeeRate(0.005) }
    }
}

impl PoolSpec {
    pub fn new(eta: f64, f: f64) -> Result<Self> {
        check_eta(eta)?;
        Ok(PoolSpec { eta, f: FeeRate::new(f)? })
    }

    pub fn validate(&self) -> Result<()> {
        check_eta(self.eta)
    }

    /// `eta / (1 - eta)`: the value ratio of A to B held by the pool at `s = 1`.
    #[inline]
    pub fn weight_ratio(&self) -> f64 {
        self.eta / (1.0 - self.eta)
    }

    pub fn pricing(&self) -> PricingFunction {
        PricingFunction::Cgmmm { eta: self.eta }
    }
}

/// Marginal exchange rate `G(y_a / y_b)` of acquiring asset A.
pub fn marginal_rate(pf: &PricingFunction, deposit_ratio: f64) -> Result<f64> {
    if !(deposit_ratio > 0.0) || !deposit_ratio.is_finite() {
        return Err(Error::domain(format!("deposit ratio must be positive, got {deposit_ratio}")));
    }
    Ok(pf.g(deposit_ratio))
}

fn check_ratio(s: f64) -> Result<()> {
    if s > 0.0 && s.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("exchange-rate ratio must be positive, got {s}")))
    }
}

/// Closed-form optimal trade against a geometric-mean pool at ratio `s`.
pub fn solve_trade_cgmmm(s: f64, eta: f64, fee: FeeRate) -> Result<TradeFractions> {
    check_ratio(s)?;
    check_eta(eta)?;
    Ok(cgmmm_trade(s, eta, fee.value()))
}

#[inline]
pub(crate) fn cgmmm_trade(s: f64, eta: f64, f: f64) -> TradeFractions {
    let lo = 1.0 / (1.0 + f);
    let hi = 1.0 + f;
    let t = if s < lo {
        s * (1.0 + f)
    } else if s > hi {
        s / (1.0 + f)
    } else {
        return TradeFractions::NONE;
    };
    // 1 - t^p computed without cancellation for t near 1.
    let lt = t.ln();
    TradeFractions {
        d_a: -((1.0 - eta) * lt).exp_m1(),
        d_b: -(-eta * lt).exp_m1(),
    }
}

/// Post-trade deposit multipliers `(phi_a, phi_b)` for a geometric-mean pool.
pub fn post_trade_deposit_factors(s: f64, eta: f64, fee: FeeRate) -> Result<(f64, f64)> {
    check_ratio(s)?;
    check_eta(eta)?;
    Ok(cgmmm_factors(s, eta, fee.value()))
}

#[inline]
pub(crate) fn cgmmm_factors(s: f64, eta: f64, f: f64) -> (f64, f64) {
    let lo = 1.0 / (1.0 + f);
    let hi = 1.0 + f;
    if s < lo {
        let t = s * (1.0 + f);
        (t.powf(1.0 - eta), (1.0 + f) * t.powf(-eta) - f)
    } else if s > hi {
        let t = s / (1.0 + f);
        ((1.0 + f) * t.powf(1.0 - eta) - f, t.powf(-eta))
    } else {
        (1.0, 1.0)
    }
}

/// Ratio after an optimal trade, `H(s)`, for a geometric-mean pool.
pub fn ratio_transition(s: f64, eta: f64, fee: FeeRate) -> Result<f64> {
    check_ratio(s)?;
    check_eta(eta)?;
    Ok(cgmmm_transition(s, eta, fee.value()))
}

#[inline]
pub(crate) fn cgmmm_transition(s: f64, eta: f64, f: f64) -> f64 {
    let lo = 1.0 / (1.0 + f);
    let hi = 1.0 + f;
    if s < lo {
        (1.0 + f * (1.0 - (s * (1.0 + f)).powf(eta))) / (1.0 + f)
    } else if s > hi {
        (1.0 + f) / (1.0 + f * (1.0 - (s / (1.0 + f)).powf(eta - 1.0)))
    } else {
        s
    }
}

/// Optimal trade for any pricing function satisfying the axioms.
///
/// Outside the band the post-trade deposit ratio is pinned at
/// `z* = G^{-1}(belief / (1+f))` (or `G^{-1}(belief * (1+f))`), so the only
/// unknown is `u = 1 - d_b`, found from `F(z* u, u) = F(beta, 1)` by bisection.
pub fn solve_trade_generic(
    pf: &PricingFunction,
    belief_ratio: f64,
    deposit_ratio: f64,
    fee: FeeRate,
) -> Result<TradeFractions> {
    if !(belief_ratio > 0.0) || !belief_ratio.is_finite() {
        return Err(Error::domain(format!("belief ratio must be positive, got {belief_ratio}")));
    }
    let beta = deposit_ratio;
    let ratio = marginal_rate(pf, beta)? / belief_ratio;
    let f = fee.value();
    let target = pf.level(beta, 1.0);
    let (lo_band, hi_band) = fee.band();

    let z_star = if ratio < lo_band {
        pf.g_inverse(belief_ratio / (1.0 + f))?
    } else if ratio > hi_band {
        pf.g_inverse(belief_ratio * (1.0 + f))?
    } else {
        return Ok(TradeFractions::NONE);
    };
    let g = |u: f64| pf.level(z_star * u, u) - target;

    let u = if ratio < lo_band {
        // Trader takes A and deposits B: u = 1 - d_b > 1.
        let mut lo = 1.0;
        let mut step = 1.0;
        let mut hi = lo + step;
        let mut n = 0;
        while g(hi) < 0.0 {
            lo = hi;
            step *= 2.0;
            hi = 1.0 + step;
            n += 1;
            if n > 200 || !hi.is_finite() {
                return Err(Error::Bracket { lo: 1.0 - hi, hi: 0.0 });
            }
        }
        bisect(&g, lo, hi)
    } else {
        // Trader takes B and deposits A: u in (0, 1).
        let hi = 1.0;
        let mut lo = 0.5;
        let mut n = 0;
        while g(lo) > 0.0 {
            lo *= 0.5;
            n += 1;
            if n > 200 || lo == 0.0 {
                return Err(Error::Bracket { lo: 0.0, hi: 1.0 - lo });
            }
        }
        bisect(&g, lo, hi)
    };
    Ok(TradeFractions {
        d_a: 1.0 - z_star * u / beta,
        d_b: 1.0 - u,
    })
}

const BRACKET_TOL: f64 = 1e-12;

/// Bisection on an increasing function with `g(lo) <= 0 <= g(hi)`.
fn bisect<F: Fn(f64) -> f64>(g: &F, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        if hi - lo <= BRACKET_TOL {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Relative price slippage `(average rate - marginal rate) / marginal rate`
/// for acquiring the fraction `d` of one asset's deposit.
///
/// Geometric-mean pools use the closed form; custom pools are evaluated at
/// unit deposits from the pricing equation.
pub fn slippage(pf: &PricingFunction, d: f64, side: Side) -> Result<f64> {
    if !(d > 0.0 && d < 1.0) {
        return Err(Error::domain(format!("trade fraction must lie in (0, 1), got {d}")));
    }
    match pf {
        PricingFunction::Cgmmm { eta } => {
            let eta = *eta;
            let v = match side {
                // ((1-eta)/eta) * ((1-d)^(eta/(eta-1)) - 1) / d - 1
                Side::A => {
                    (1.0 - eta) / eta * (eta / (eta - 1.0) * (-d).ln_1p()).exp_m1() / d
                }
                Side::B => {
                    eta / (1.0 - eta) * ((eta - 1.0) / eta * (-d).ln_1p()).exp_m1() / d
                }
            };
            Ok(v - 1.0)
        }
        PricingFunction::Custom(_) => slippage_from_pricing(pf, 1.0, d, side),
    }
}

/// Slippage obtained by solving the pricing equation for the paid amount at
/// deposits `(deposit_ratio, 1)`.
pub fn slippage_from_pricing(
    pf: &PricingFunction,
    deposit_ratio: f64,
    d: f64,
    side: Side,
) -> Result<f64> {
    if !(d > 0.0 && d < 1.0) {
        return Err(Error::domain(format!("trade fraction must lie in (0, 1), got {d}")));
    }
    let (ya, yb) = (deposit_ratio, 1.0);
    let target = pf.level(ya, yb);
    let g_rate = marginal_rate(pf, ya / yb)?;
    match side {
        Side::A => {
            let take = d * ya;
            let paid = bisect_increasing(|x| pf.level(ya - take, yb + x) - target, 0.0, yb)?;
            let avg = paid / take;
            Ok(avg / g_rate - 1.0)
        }
        Side::B => {
            let take = d * yb;
            let paid = bisect_increasing(|x| pf.level(ya + x, yb - take) - target, 0.0, ya)?;
            let avg = paid / take;
            Ok(avg * g_rate - 1.0)
        }
    }
}
