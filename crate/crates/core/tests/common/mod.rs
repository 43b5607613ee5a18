//! Reference implementations that share no code with the library.
#![allow(dead_code)]

use ammlab_core::DisturbanceNode;

/// Pool holding absolute deposits, traded at absolute prices.
#[derive(Debug, Clone, Copy)]
pub struct AbsolutePool {
    pub ya: f64,
    pub yb: f64,
    pub eta: f64,
    pub f: f64,
}

impl AbsolutePool {
    /// Pool at ratio `s` with both fundamental prices equal to 1 and `y_b = 1`.
    pub fn at_ratio(s: f64, eta: f64, f: f64) -> Self {
        let kappa = eta / (1.0 - eta);
        AbsolutePool { ya: kappa / s, yb: 1.0, eta, f }
    }

    pub fn level(&self) -> f64 {
        self.ya.powf(self.eta) * self.yb.powf(1.0 - self.eta)
    }

    pub fn marginal_rate(&self) -> f64 {
        self.eta / (1.0 - self.eta) * self.yb / self.ya
    }

    pub fn value(&self, pa: f64, pb: f64) -> f64 {
        pa * self.ya + pb * self.yb
    }

    /// A trader valuing the assets at `(a, b)` moves the pre-fee marginal rate
    /// to `a/b` divided (buying A) or multiplied (buying B) by `1 + f`, keeping
    /// the pre-fee level fixed. The fee is paid into the pool.
    pub fn trade(&mut self, a: f64, b: f64) {
        let kappa = self.eta / (1.0 - self.eta);
        let q = a / b;
        let m = self.marginal_rate();
        let level = self.level();
        let target = if m < q / (1.0 + self.f) {
            q / (1.0 + self.f)
        } else if m > q * (1.0 + self.f) {
            q * (1.0 + self.f)
        } else {
            return;
        };
        let r = target / kappa;
        let ya = level * r.powf(-(1.0 - self.eta));
        let yb = r * ya;
        if yb > self.yb {
            self.yb += (1.0 + self.f) * (yb - self.yb);
            self.ya = ya;
        } else {
            self.ya += (1.0 + self.f) * (ya - self.ya);
            self.yb = yb;
        }
    }
}

/// One period on absolute deposits: returns the four value factors and the
/// next exchange-rate ratio.
pub fn absolute_period(s: f64, node: &DisturbanceNode, eta: f64, f: f64) -> ([f64; 4], f64) {
    let mut pool = AbsolutePool::at_ratio(s, eta, f);
    let v0 = pool.value(1.0, 1.0);
    if node.xi {
        pool.trade(node.belief, 1.0);
    }
    let v1 = pool.value(1.0, 1.0);
    pool.trade(1.0, 1.0);
    let v2 = pool.value(1.0, 1.0);
    let (pa, pb) = (node.ra, node.rb);
    let v2s = pool.value(pa, pb);
    pool.trade(pa, pb);
    let v3 = pool.value(pa, pb);
    let s_next = pool.marginal_rate() / (pa / pb);
    ([v1 / v0, v2 / v1, v2s / v2, v3 / v2s], s_next)
}

/// Trader objective per unit of `b * y_b` for withdrawal fractions, with the
/// fee charged on the deposited leg.
pub fn objective(belief_ratio: f64, d_a: f64, d_b: f64, f: f64) -> f64 {
    let pay = |d: f64| if d < 0.0 { (1.0 + f) * d } else { d };
    belief_ratio * pay(d_a) + pay(d_b)
}

/// Best objective over `points` withdrawal fractions of B on `[lo, hi]`, with
/// the A fraction set by the invariant at unit deposits.
pub fn brute_force_trade(belief_ratio: f64, eta: f64, f: f64, lo: f64, hi: f64, points: usize) -> f64 {
    let mut best = 0.0f64;
    for i in 0..points {
        let d_b = lo + (hi - lo) * i as f64 / (points - 1) as f64;
        let d_a = 1.0 - (1.0 - d_b).powf(-(1.0 - eta) / eta);
        best = best.max(objective(belief_ratio, d_a, d_b, f));
    }
    best
}

/// Golden-section maximizer driven only by a comparison `better(x, y)`
/// ("is x at least as good as y").
pub fn golden_section_max<C: Fn(f64, f64) -> bool>(better: C, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    while hi - lo > tol {
        if better(x1, x2) {
            hi = x2;
            x2 = x1;
            x1 = hi - g * (hi - lo);
        } else {
            lo = x1;
            x1 = x2;
            x2 = lo + g * (hi - lo);
        }
    }
    0.5 * (lo + hi)
}

/// Comparison for `log c + K log(1-c)` evaluated as a difference, so that
/// nearby points are ordered correctly.
pub fn log_consumption_better(k: f64) -> impl Fn(f64, f64) -> bool {
    move |x: f64, y: f64| {
        let d = x - y;
        (d / y).ln_1p() + k * (-d / (1.0 - y)).ln_1p() >= 0.0
    }
}
