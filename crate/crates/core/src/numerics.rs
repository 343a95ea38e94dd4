//! Small numerical kernels shared by the oracles and the solvers.

/// `x − 1 + e^{−x}`, accurate for small `x` where the direct form cancels.
pub fn w1(x: f64) -> f64 {
    if x.abs() < 0.1 {
        // Σ_{k≥2} (−x)^k / k!
        let mut term = x * x / 2.0;
        let mut sum = term;
        for k in 3..20 {
            term *= -x / k as f64;
            sum += term;
        }
        sum
    } else {
        x + (-x).exp_m1()
    }
}

/// `(1 − e^{−x}) / x`, with the removable singularity at 0 filled in.
pub fn phi1(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 - x / 2.0
    } else {
        -(-x).exp_m1() / x
    }
}

/// Value at `x = 0` of the polynomial interpolating `(xs[i], ys[i])`
/// (Neville's scheme). Used for Richardson-type extrapolation in a step size.
pub fn extrapolate_to_zero(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "abscissae and values differ in length");
    assert!(!xs.is_empty(), "nothing to extrapolate");
    let mut p = ys.to_vec();
    let n = xs.len();
    for level in 1..n {
        for i in 0..n - level {
            let (xa, xb) = (xs[i], xs[i + level]);
            p[i] = (xb * p[i] - xa * p[i + 1]) / (xb - xa);
        }
    }
    p[0]
}

/// Minimizes a unimodal `f` on `[lo, hi]` by golden-section search.
pub fn golden_section_min<F: FnMut(f64) -> f64>(mut f: F, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while (hi - lo).abs() > tol {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

/// Evenly spaced grid with `steps` points from `start` to `end` inclusive.
pub fn linspace(start: f64, end: f64, steps: usize) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..steps)
            .map(|i| start + (end - start) * i as f64 / (steps - 1) as f64)
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn w1_matches_direct_form_away_from_zero() {
        for x in [0.1, 0.5, 1.0, 3.0, 40.0] {
            assert_relative_eq!(w1(x), x - 1.0 + (-x).exp(), max_relative = 1e-14);
        }
        // both branches agree at the switch point
        let below = {
            let x: f64 = 0.0999999999;
            x + (-x).exp_m1()
        };
        assert_relative_eq!(w1(0.0999999999), below, max_relative = 1e-12);
        assert_eq!(w1(0.0), 0.0);
        assert_relative_eq!(w1(1e-6), 0.5e-12, max_relative = 1e-6);
    }

    #[test]
    fn neville_recovers_polynomials() {
        let f = |h: f64| 3.0 + 2.0 * h - 5.0 * h * h + h.powi(3);
        let xs = [0.4, 0.2, 0.1, 0.05];
        let ys: Vec<f64> = xs.iter().map(|&h| f(h)).collect();
        assert_relative_eq!(extrapolate_to_zero(&xs, &ys), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn golden_section_finds_parabola_minimum() {
        let m = golden_section_min(|x| (x - 1.3).powi(2), -5.0, 5.0, 1e-10);
        assert!((m - 1.3).abs() < 1e-8);
    }

    #[test]
    fn linspace_endpoints() {
        assert_eq!(linspace(-1.0, 1.0, 3), vec![-1.0, 0.0, 1.0]);
        assert_eq!(linspace(2.0, 5.0, 1), vec![2.0]);
        assert!(linspace(0.0, 1.0, 0).is_empty());
    }
}
