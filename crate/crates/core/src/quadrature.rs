//! Gauss–Hermite rules for expectations over normal variables.

use std::f64::consts::PI;

/// Nodes and weights of the `n`-point rule for `∫ e^{-x²} g(x) dx`.
///
/// Roots of the Hermite polynomial are found by Newton iteration from the
/// usual asymptotic starting guesses, using the orthonormal recurrence.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "need at least one node");
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let pim4 = PI.powf(-0.25);
    let nf = n as f64;
    let mut z = 0.0;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    // ascending order
    x.reverse();
    w.reverse();
    (x, w)
}

/// Nodes and probability weights for a standard normal variable.
pub fn standard_normal_rule(n: usize) -> Vec<(f64, f64)> {
    let (x, w) = gauss_hermite(n);
    let s2 = std::f64::consts::SQRT_2;
    let norm = PI.sqrt();
    x.into_iter().zip(w).map(|(x, w)| (s2 * x, w / norm)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn normal_moment(k: u32) -> f64 {
        if k % 2 == 1 {
            0.0
        } else {
            // (k-1)!!
            (1..k).step_by(2).map(|v| v as f64).product()
        }
    }

    #[test]
    fn weights_sum_to_one_and_moments_are_exact() {
        for n in [1usize, 2, 3, 5, 7, 9, 12, 20] {
            let rule = standard_normal_rule(n);
            let total: f64 = rule.iter().map(|&(_, w)| w).sum();
            assert!((total - 1.0).abs() < 1e-13, "n={n} total={total}");
            for k in 0..(2 * n as u32) {
                let m: f64 = rule.iter().map(|&(x, w)| w * x.powi(k as i32)).sum();
                let mass: f64 = rule.iter().map(|&(x, w)| w * x.abs().powi(k as i32)).sum();
                let want = normal_moment(k);
                assert!((m - want).abs() < 1e-9 * mass.max(1.0), "n={n} k={k} {m} vs {want}");
            }
        }
    }

    #[test]
    fn nodes_are_sorted_and_symmetric() {
        let (x, w) = gauss_hermite(7);
        assert!(x.windows(2).all(|p| p[0] < p[1]));
        for i in 0..7 {
            assert!((x[i] + x[6 - i]).abs() < 1e-14);
            assert!((w[i] - w[6 - i]).abs() < 1e-14);
        }
        // largest root of H_7
        assert!((x[6] - 2.651961356835233).abs() < 1e-12);
    }
}
