//! Portfolio weights, constraint sets and the convex one-period portfolio problem.
//!
//! Weights are ordered `(omega_m, omega_a, omega_b)`: the pool, asset A on the
//! exchange and asset B on the exchange; the remainder earns `R_f`. Every
//! constraint set used here is a polytope `{omega >= l, sum(omega) <= u}`.
//!
//! The problems solved are of the form `min sum_n c_n psi(R_f + omega . r_n)` with
//! `c_n >= 0` and `psi` a convex power or log kernel, which covers both the
//! `inf` (gamma > 1) and `sup` (gamma <= 1) portfolio operators. They are solved
//! by a primal active-set method with exact Newton steps on each face.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Weights = [f64; 3];

/// Admissible portfolio weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintSet {
    /// No short sales and no borrowing: all weights nonnegative, sum at most 1.
    #[default]
    NoShort,
    /// Exchange positions may be short down to -1 each; pool weight nonnegative; sum at most 2.
    ShortOk,
}

impl ConstraintSet {
    pub fn polytope(self) -> Polytope {
        match self {
            ConstraintSet::NoShort => Polytope { lower: [0.0; 3], cap: 1.0, pinned: [false; 3] },
            ConstraintSet::ShortOk => Polytope { lower: [0.0, -1.0, -1.0], cap: 2.0, pinned: [false; 3] },
        }
    }

    /// The same set with the pool weight fixed at zero.
    pub fn exchange_only(self) -> Polytope {
        let mut p = self.polytope();
        p.pinned[0] = true;
        p
    }

    pub fn contains(self, w: &Weights, tol: f64) -> bool {
        self.polytope().contains(w, tol)
    }

    pub fn name(self) -> &'static str {
        match self {
            ConstraintSet::NoShort => "no_short",
            ConstraintSet::ShortOk => "short_ok",
        }
    }
}

impl std::str::FromStr for ConstraintSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_short" | "noshort" | "NoShort" => Ok(ConstraintSet::NoShort),
            "short_ok" | "shortok" | "ShortOk" | "ShortOK" => Ok(ConstraintSet::ShortOk),
            other => Err(Error::InvalidParam {
                name: "constraint",
                reason: format!("unknown constraint set `{other}` (expected no_short or short_ok)"),
            }),
        }
    }
}

/// `{omega : omega_i >= lower_i, sum(omega) <= cap}`, with pinned coordinates held at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Polytope {
    pub lower: Weights,
    pub cap: f64,
    pub pinned: [bool; 3],
}

impl Polytope {
    pub fn contains(&self, w: &Weights, tol: f64) -> bool {
        let mut sum = 0.0;
        for i in 0..3 {
            if self.pinned[i] {
                if w[i] != 0.0 {
                    return false;
                }
            } else if w[i] < self.lower[i] - tol {
                return false;
            }
            sum += w[i];
        }
        sum <= self.cap + tol
    }

    /// Vertices of the feasible set plus its centroid; used as restart points.
    pub fn starts(&self) -> Vec<Weights> {
        let free: Vec<usize> = (0..3).filter(|&i| !self.pinned[i]).collect();
        let mut base = [0.0; 3];
        for &i in &free {
            base[i] = self.lower[i];
        }
        let slack = self.cap - free.iter().map(|&i| self.lower[i]).sum::<f64>();
        let mut pts = vec![base];
        for &i in &free {
            let mut v = base;
            v[i] += slack;
            pts.push(v);
        }
        let n = pts.len() as f64;
        let mut centroid = [0.0; 3];
        for p in &pts {
            for i in 0..3 {
                centroid[i] += p[i] / n;
            }
        }
        pts.push(centroid);
        pts
    }
}

/// The kernel `psi` applied to portfolio gross returns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kernel {
    /// `x^(1-gamma)` for gamma > 1 (minimized).
    PowerAbove { p: f64, int: Option<i32> },
    /// `-x^(1-gamma)` for gamma < 1.
    PowerBelow { p: f64 },
    /// `-log x` for gamma = 1.
    NegLog,
}

impl Kernel {
    pub fn for_gamma(gamma: f64) -> Kernel {
        let p = 1.0 - gamma;
        if gamma == 1.0 {
            Kernel::NegLog
        } else if gamma > 1.0 {
            let int = if p.fract() == 0.0 && p.abs() < 64.0 { Some(p as i32) } else { None };
            Kernel::PowerAbove { p, int }
        } else {
            Kernel::PowerBelow { p }
        }
    }

    /// `(psi, psi', psi'')` at `x > 0`.
    #[inline]
    fn eval(&self, x: f64) -> (f64, f64, f64) {
        match *self {
            Kernel::PowerAbove { p, int } => {
                let y = match int {
                    Some(k) => x.powi(k),
                    None => x.powf(p),
                };
                let d1 = p * y / x;
                (y, d1, (p - 1.0) * d1 / x)
            }
            Kernel::PowerBelow { p } => {
                let y = x.powf(p);
                let d1 = p * y / x;
                (-y, -d1, -(p - 1.0) * d1 / x)
            }
            Kernel::NegLog => {
                let r = 1.0 / x;
                (-x.ln(), -r, r * r)
            }
        }
    }

    #[inline]
    fn value(&self, x: f64) -> f64 {
        match *self {
            Kernel::PowerAbove { p, int } => match int {
                Some(k) => x.powi(k),
                None => x.powf(p),
            },
            Kernel::PowerBelow { p } => -x.powf(p),
            Kernel::NegLog => -x.ln(),
        }
    }
}

/// `min_omega sum_n coef_n psi(rf + omega . excess_n)` over a polytope.
#[derive(Debug, Clone, Copy)]
pub struct PortfolioProblem<'a> {
    pub rf: f64,
    pub kernel: Kernel,
    /// Returns in excess of `rf`, one row per scenario.
    pub excess: &'a [Weights],
    pub coef: &'a [f64],
    pub feasible: Polytope,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PortfolioSolution {
    pub omega: Weights,
    pub objective: f64,
    /// Bitmask of active constraints: bits 0..3 lower bounds, bit 3 the cap.
    pub active: u8,
    pub iterations: usize,
}

const CAP_BIT: u8 = 1 << 3;
const MAX_NEWTON: usize = 200;
const BOUND_SNAP: f64 = 1e-13;
const MAX_LOCAL: usize = 8;

impl PortfolioProblem<'_> {
    /// Objective at `w`, or `+inf` if some scenario return is nonpositive.
    pub fn objective(&self, w: &Weights) -> f64 {
        let mut total = 0.0;
        for (r, &c) in self.excess.iter().zip(self.coef) {
            let x = self.rf + w[0] * r[0] + w[1] * r[1] + w[2] * r[2];
            if !(x > 0.0) {
                return f64::INFINITY;
            }
            total += c * self.kernel.value(x);
        }
        total
    }

    fn derivatives(&self, w: &Weights) -> Option<(f64, [f64; 3], [[f64; 3]; 3])> {
        let mut val = 0.0;
        let mut g = [0.0; 3];
        let mut h = [[0.0; 3]; 3];
        for (r, &c) in self.excess.iter().zip(self.coef) {
            let x = self.rf + w[0] * r[0] + w[1] * r[1] + w[2] * r[2];
            if !(x > 0.0) {
                return None;
            }
            let (v, d1, d2) = self.kernel.eval(x);
            val += c * v;
            let a = c * d1;
            let b = c * d2;
            for i in 0..3 {
                g[i] += a * r[i];
                let bri = b * r[i];
                for j in 0..=i {
                    h[i][j] += bri * r[j];
                }
            }
        }
        for i in 0..3 {
            for j in (i + 1)..3 {
                h[i][j] = h[j][i];
            }
        }
        Some((val, g, h))
    }

    /// Minimizes from a warm start, restarting from the polytope's vertices and
    /// centroid if the warm start fails; the best converged candidate wins.
    pub fn solve(&self, warm: Option<Weights>) -> Result<PortfolioSolution> {
        if let Some(w) = warm {
            if let Ok(sol) = self.active_set(w) {
                return Ok(sol);
            }
        }
        let mut best: Option<PortfolioSolution> = None;
        let mut last_err = None;
        for start in self.feasible.starts() {
            match self.active_set(start) {
                Ok(sol) => {
                    if best.is_none_or(|b| sol.objective < b.objective) {
                        best = Some(sol);
                    }
                }
                Err(e) => last_err = Some(e),
            }
        }
        best.ok_or_else(|| {
            last_err.unwrap_or_else(|| Error::Optimizer {
                s: f64::NAN,
                phase: 0,
                reason: "no feasible start".into(),
            })
        })
    }

    fn snap(&self, w: &mut Weights) {
        let p = &self.feasible;
        for i in 0..3 {
            if p.pinned[i] {
                w[i] = 0.0;
            } else if w[i] < p.lower[i] {
                w[i] = p.lower[i];
            }
        }
    }

    fn tight(&self, w: &Weights) -> u8 {
        let p = &self.feasible;
        let mut act = 0u8;
        for i in 0..3 {
            if !p.pinned[i] && (w[i] - p.lower[i]).abs() <= BOUND_SNAP {
                act |= 1 << i;
            }
        }
        let free_left = (0..3).any(|i| !p.pinned[i] && act & (1 << i) == 0);
        if free_left && (w.iter().sum::<f64>() - p.cap).abs() <= BOUND_SNAP {
            act |= CAP_BIT;
        }
        act
    }

    /// Primal active-set method started from `start`, with every constraint
    /// tight at the start placed in the working set.
    fn active_set(&self, start: Weights) -> Result<PortfolioSolution> {
        let p = self.feasible;
        let mut w = start;
        self.snap(&mut w);
        if !p.contains(&w, 1e-12) || !self.objective(&w).is_finite() {
            return Err(self.fail(&w, "infeasible start"));
        }
        let mut act = self.tight(&w);
        let mut local_steps = 0;

        for it in 0..MAX_NEWTON {
            let Some((val, g, h)) = self.derivatives(&w) else {
                return Err(self.fail(&w, "left the domain"));
            };
            let free: Vec<usize> = (0..3).filter(|&i| !p.pinned[i] && act & (1 << i) == 0).collect();
            let capped = act & CAP_BIT != 0 && !free.is_empty();

            // Null-space basis of the active constraints.
            let mut basis: Vec<Weights> = Vec::with_capacity(3);
            if capped {
                let last = *free.last().unwrap();
                for &j in &free[..free.len() - 1] {
                    let mut z = [0.0; 3];
                    z[j] = 1.0;
                    z[last] = -1.0;
                    basis.push(z);
                }
            } else {
                for &j in &free {
                    let mut z = [0.0; 3];
                    z[j] = 1.0;
                    basis.push(z);
                }
            }

            let (step, decrement) = newton_direction(&basis, &g, &h);
            let scale = val.abs().max(f64::MIN_POSITIVE);
            let converged = decrement <= 1e-24 * scale
                || step.iter().all(|v| v.abs() <= 1e-12)
                || local_steps >= MAX_LOCAL;
            if converged {
                local_steps = 0;
                match self.release(&free, capped, act, &g) {
                    None => {
                        return Ok(PortfolioSolution { omega: w, objective: val, active: act, iterations: it });
                    }
                    Some(bit) => {
                        act &= !bit;
                        continue;
                    }
                }
            }

            // Ratio test against inactive constraints.
            let mut alpha_max = f64::INFINITY;
            let mut blocking = 0u8;
            for i in 0..3 {
                if p.pinned[i] || act & (1 << i) != 0 {
                    continue;
                }
                if step[i] < 0.0 {
                    let a = (w[i] - p.lower[i]) / -step[i];
                    if a < alpha_max {
                        alpha_max = a;
                        blocking = 1 << i;
                    }
                }
            }
            if !capped {
                let ds: f64 = step.iter().sum();
                if ds > 0.0 {
                    let a = (p.cap - w.iter().sum::<f64>()) / ds;
                    if a < alpha_max {
                        alpha_max = a;
                        blocking = CAP_BIT;
                    }
                }
            }
            let mut alpha = alpha_max.clamp(0.0, 1.0);
            let accepted = if decrement <= 1e-13 * scale {
                // The predicted decrease is below what the objective can
                // resolve: take the Newton step unless it visibly worsens things.
                local_steps += 1;
                let trial = add(&w, &step, alpha);
                let v = self.objective(&trial);
                (v.is_finite() && v <= val + 4.0 * f64::EPSILON * scale).then_some(trial)
            } else {
                local_steps = 0;
                let mut found = None;
                for _ in 0..80 {
                    let trial = add(&w, &step, alpha);
                    let v = self.objective(&trial);
                    if v.is_finite() && v <= val - 1e-4 * alpha * decrement {
                        found = Some(trial);
                        break;
                    }
                    alpha *= 0.5;
                }
                found
            };
            let Some(mut next) = accepted else {
                if decrement <= 1e-10 * scale {
                    local_steps = MAX_LOCAL;
                    continue;
                }
                return Err(self.fail(&w, "line search failed"));
            };
            if alpha == alpha_max && alpha_max <= 1.0 && blocking != 0 {
                act |= blocking;
                if blocking == CAP_BIT {
                    let f: Vec<usize> = (0..3).filter(|&i| !p.pinned[i] && act & (1 << i) == 0).collect();
                    let last = *f.last().unwrap();
                    let others: f64 = (0..3).filter(|&i| i != last).map(|i| next[i]).sum();
                    next[last] = p.cap - others;
                } else {
                    let i = blocking.trailing_zeros() as usize;
                    next[i] = p.lower[i];
                }
            }
            self.snap(&mut next);
            w = next;
        }
        Err(self.fail(&w, "iteration limit reached"))
    }

    /// The active constraint with the most negative multiplier, if any.
    fn release(&self, free: &[usize], capped: bool, act: u8, g: &[f64; 3]) -> Option<u8> {
        let p = &self.feasible;
        let gscale = g.iter().map(|v| v.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let tol = -1e-11 * gscale;
        let mu_cap = if capped {
            -free.iter().map(|&j| g[j]).sum::<f64>() / free.len() as f64
        } else {
            0.0
        };
        let mut worst = (tol, None);
        if capped && mu_cap < worst.0 {
            worst = (mu_cap, Some(CAP_BIT));
        }
        for i in 0..3 {
            if p.pinned[i] || act & (1 << i) == 0 {
                continue;
            }
            let mu = g[i] + mu_cap;
            if mu < worst.0 {
                worst = (mu, Some(1 << i));
            }
        }
        worst.1
    }

    fn fail(&self, w: &Weights, reason: &str) -> Error {
        Error::Optimizer {
            s: f64::NAN,
            phase: 0,
            reason: format!("{reason} at omega = {w:?}"),
        }
    }
}

#[inline]
fn add(w: &Weights, d: &Weights, a: f64) -> Weights {
    [w[0] + a * d[0], w[1] + a * d[1], w[2] + a * d[2]]
}

/// Newton step restricted to the span of `basis`; returns the step and the
/// Newton decrement `-g . step`.
fn newton_direction(basis: &[Weights], g: &[f64; 3], h: &[[f64; 3]; 3]) -> (Weights, f64) {
    let k = basis.len();
    if k == 0 {
        return ([0.0; 3], 0.0);
    }
    let mut hz = [[0.0; 3]; 3];
    let mut gz = [0.0; 3];
    for a in 0..k {
        gz[a] = dot(&basis[a], g);
        let ha = matvec(h, &basis[a]);
        for b in 0..k {
            hz[b][a] = dot(&basis[b], &ha);
        }
    }
    let diag = (0..k).map(|a| hz[a][a].abs()).fold(0.0, f64::max);
    let gmax = (0..k).map(|a| gz[a].abs()).fold(0.0, f64::max);
    if gmax == 0.0 {
        return ([0.0; 3], 0.0);
    }
    let ridge = if diag > 0.0 { 1e-13 * diag } else { gmax };
    for a in 0..k {
        hz[a][a] += ridge;
    }
    let y = solve_spd(&hz, &gz, k);
    let mut step = [0.0; 3];
    for a in 0..k {
        for i in 0..3 {
            step[i] -= y[a] * basis[a][i];
        }
    }
    let dec = (0..k).map(|a| gz[a] * y[a]).sum::<f64>();
    (step, dec.max(0.0))
}

#[inline]
fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
fn matvec(h: &[[f64; 3]; 3], v: &[f64; 3]) -> [f64; 3] {
    [dot(&h[0], v), dot(&h[1], v), dot(&h[2], v)]
}

/// Solves `A y = b` for a symmetric positive definite `k x k` block by Cholesky.
fn solve_spd(a: &[[f64; 3]; 3], b: &[f64; 3], k: usize) -> [f64; 3] {
    let mut l = [[0.0; 3]; 3];
    for i in 0..k {
        for j in 0..=i {
            let mut s = a[i][j];
            for m in 0..j {
                s -= l[i][m] * l[j][m];
            }
            if i == j {
                l[i][i] = s.max(f64::MIN_POSITIVE).sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut z = [0.0; 3];
    for i in 0..k {
        let mut s = b[i];
        for m in 0..i {
            s -= l[i][m] * z[m];
        }
        z[i] = s / l[i][i];
    }
    let mut y = [0.0; 3];
    for i in (0..k).rev() {
        let mut s = z[i];
        for m in (i + 1)..k {
            s -= l[m][i] * y[m];
        }
        y[i] = s / l[i][i];
    }
    y
}
