//! Collective quadratures of the OPO output with every segment retained.
//!
//! x and p decouple, so each is a chain over `(x_c, x_1, …, x_N)`. After each
//! step the new segment's row is fixed forever: its cavity cross-covariance
//! `C` is multiplied by `α` on later steps, but segment-segment entries `B`
//! never change. That makes `Σᵢⱼ B_ij` cheap to accumulate, and the full `B`
//! is only materialised for short chains.

use crate::error::{invalid, Error, Result};
use crate::numerics::w1;
use crate::opo::{validate_rates, validate_tau, OpoParams};

/// Longest chain [`chain_evolve`] will build.
pub const MAX_SEGMENTS: usize = 100_000;
/// Chains up to this length also keep the dense segment covariance.
pub const DENSE_LIMIT: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Quadrature {
    X,
    P,
}

/// Retained-segment covariances (γ convention) for one quadrature.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainState {
    tau: f64,
    alpha: f64,
    xi: f64,
    coupling: f64,
    a: f64,
    c: Vec<f64>,
    /// Lower triangle of `B` by creation order; row `k` holds `B[k][0..=k]`.
    b_rows: Option<Vec<Vec<f64>>>,
    sum_b: f64,
    sum_c: f64,
}

impl ChainState {
    /// A cavity with `γ_cc = a_initial` and no segments yet.
    pub fn new(params: &OpoParams, quadrature: Quadrature, a_initial: f64, dense: bool) -> Result<Self> {
        validate_rates(params.gamma, params.g)?;
        validate_tau(params.gamma, params.tau)?;
        if !(a_initial >= 0.0) || !a_initial.is_finite() {
            return Err(invalid(format!("initial cavity entry must be >= 0, got {a_initial}")));
        }
        let sign = match quadrature {
            Quadrature::X => 1.0,
            Quadrature::P => -1.0,
        };
        let xi = params.xi();
        Ok(Self {
            tau: params.tau,
            alpha: xi + sign * 2.0 * params.g * params.tau,
            xi,
            coupling: (params.gamma * params.tau).sqrt(),
            a: a_initial,
            c: Vec::new(),
            b_rows: dense.then(Vec::new),
            sum_b: 0.0,
            sum_c: 0.0,
        })
    }

    /// One more segment reflects off the cavity and is kept.
    pub fn step(&mut self) {
        let (alpha, xi, s) = (self.alpha, self.xi, self.coupling);
        let a = self.a;
        let b_new = s * s * a + xi * xi;
        if let Some(rows) = &mut self.b_rows {
            let mut row: Vec<f64> = self.c.iter().map(|cj| -s * cj).collect();
            row.push(b_new);
            rows.push(row);
        }
        self.sum_b += b_new - 2.0 * s * self.sum_c;
        for cj in &mut self.c {
            *cj *= alpha;
        }
        let c_new = s * (xi - alpha * a);
        self.c.push(c_new);
        self.sum_c = alpha * self.sum_c + c_new;
        self.a = alpha * alpha * a + s * s;
    }

    pub fn segments(&self) -> usize {
        self.c.len()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// `α`, the per-step cavity amplitude factor.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Cavity entry `A`.
    pub fn a(&self) -> f64 {
        self.a
    }

    /// Cavity-segment entries, by segment creation order.
    pub fn c(&self) -> &[f64] {
        &self.c
    }

    /// Segment-segment entry, if the chain keeps the dense matrix.
    pub fn b(&self, i: usize, j: usize) -> Option<f64> {
        let rows = self.b_rows.as_ref()?;
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        rows.get(hi).map(|r| r[lo])
    }

    pub fn has_dense_b(&self) -> bool {
        self.b_rows.is_some()
    }

    /// `Σᵢⱼ B_ij` over all retained segments.
    pub fn sum_b(&self) -> f64 {
        self.sum_b
    }
}

/// Runs `n` steps from a cavity entry `a_initial`. The p chain uses `g → −g`.
pub fn chain_evolve(params: &OpoParams, quadrature: Quadrature, n: usize, a_initial: f64) -> Result<ChainState> {
    if n > MAX_SEGMENTS {
        return Err(Error::Dimension(format!(
            "{n} segments exceeds the chain limit of {MAX_SEGMENTS}"
        )));
    }
    let mut chain = ChainState::new(params, quadrature, a_initial, n <= DENSE_LIMIT)?;
    for _ in 0..n {
        chain.step();
    }
    Ok(chain)
}

/// `var = (1/N) Σᵢⱼ B_ij / 2`; 1/2 for an empty chain.
pub fn var_collective_simulated(chain: &ChainState) -> f64 {
    match chain.segments() {
        0 => 0.5,
        n => chain.sum_b() / (2.0 * n as f64),
    }
}

/// The collective variance after every `stride` segments, as `(T, var)` pairs.
pub fn collective_series(
    params: &OpoParams,
    quadrature: Quadrature,
    a_initial: f64,
    n: usize,
    stride: usize,
) -> Result<Vec<(f64, f64)>> {
    if n > MAX_SEGMENTS {
        return Err(Error::Dimension(format!(
            "{n} segments exceeds the chain limit of {MAX_SEGMENTS}"
        )));
    }
    let stride = stride.max(1);
    let mut chain = ChainState::new(params, quadrature, a_initial, false)?;
    let mut out = Vec::with_capacity(n / stride + 1);
    for k in 1..=n {
        chain.step();
        if k % stride == 0 || k == n {
            out.push((k as f64 * params.tau, var_collective_simulated(&chain)));
        }
    }
    Ok(out)
}

/// Steady-state cavity entry `Γ/(Γ − 4g)` (x) or `Γ/(Γ + 4g)` (p).
pub fn steady_seed(params: &OpoParams, quadrature: Quadrature) -> f64 {
    match quadrature {
        Quadrature::X => params.gamma / (params.gamma - 4.0 * params.g),
        Quadrature::P => params.gamma / (params.gamma + 4.0 * params.g),
    }
}

/// Continuum-limit `var(x_T)` for a cavity starting at `γ_cc = a11`.
///
/// With `a = Γ − 4g`, `b = Γ + 4g` and `u = aT/2`:
/// `½ + [8Γ(b − a11·a) w(u) − 4Γ(Γ − a11·a) w(2u)] / (2T a³)`,
/// where `w(u) = u − 1 + e^{−u}` is evaluated without cancellation.
pub fn oracle_var_xt(params: &OpoParams, t_total: f64, a11: f64) -> f64 {
    collective_closed_form(params.gamma, params.g, t_total, a11)
}

fn collective_closed_form(gamma: f64, g: f64, t: f64, a11: f64) -> f64 {
    let a = gamma - 4.0 * g;
    let b = gamma + 4.0 * g;
    let u = a * t / 2.0;
    let bracket = 8.0 * gamma * (b - a11 * a) * w1(u) - 4.0 * gamma * (gamma - a11 * a) * w1(2.0 * u);
    0.5 + bracket / (2.0 * t * a * a * a)
}

/// [`oracle_var_xt`] with the steady seed: `½ + 16Γg w(aT/2) / (T a³)`.
pub fn oracle_var_xt_steady(params: &OpoParams, t_total: f64) -> f64 {
    oracle_var_xt(params, t_total, steady_seed(params, Quadrature::X))
}

/// `var(p_T)`: the steady x result with `g → −g`.
pub fn oracle_var_pt(params: &OpoParams, t_total: f64) -> f64 {
    oracle_var_xt_steady(&params.mirrored(), t_total)
}

/// `T → ∞` limit `½ (Γ + 4g)² / (Γ − 4g)²`.
pub fn limit_var_xt(params: &OpoParams) -> f64 {
    let r = (params.gamma + 4.0 * params.g) / (params.gamma - 4.0 * params.g);
    0.5 * r * r
}

/// `T → ∞` limit `½ (Γ − 4g)² / (Γ + 4g)²`.
pub fn limit_var_pt(params: &OpoParams) -> f64 {
    limit_var_xt(&params.mirrored())
}

/// An uncorrected closed form for the steady p variance,
/// `[(Γ+4g)(Γ−4g)²T − 32Γg − 32g(Γ−4g)e^{−(Γ/2+2g)T} − 64g²e^{−(Γ+4g)T}] / (2T(Γ+4g)³)`.
///
/// Kept for comparison only: it tends to −∞ instead of 1/2 as `T → 0`.
pub fn uncorrected_var_pt(params: &OpoParams, t_total: f64) -> f64 {
    let (gam, g, t) = (params.gamma, params.g, t_total);
    let b = gam + 4.0 * g;
    let a = gam - 4.0 * g;
    let bracket = b * a * a * t
        - 32.0 * gam * g
        - 32.0 * g * a * (-(gam / 2.0 + 2.0 * g) * t).exp()
        - 64.0 * g * g * (-b * t).exp();
    bracket / (2.0 * t * b * b * b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::opo::{integrated_normal_ordered, opo_step_matrix_for};
    use crate::state::{GaussianState, VariableLabel};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};

    fn unit(tau: f64) -> OpoParams {
        OpoParams::new(1.0, 0.2, tau).unwrap()
    }

    // the continuum form expanded term by term
    fn expanded_form(gam: f64, g: f64, t: f64, a11: f64) -> f64 {
        let a = gam - 4.0 * g;
        let b = gam + 4.0 * g;
        let brace = a * b * b * t - 4.0 * gam * (gam + 8.0 * g) + 4.0 * a11 * gam * a
            - 8.0 * gam * (a11 * a - b) * ((-gam / 2.0 + 2.0 * g) * t).exp()
            - 4.0 * gam * (gam - a11 * a) * ((-gam + 4.0 * g) * t).exp();
        brace / (2.0 * t * a * a * a)
    }

    #[test]
    fn recurrence_spot_values() {
        let p = unit(0.01);
        let chain = chain_evolve(&p, Quadrature::X, 2, 1.0).unwrap();
        let alpha: f64 = 0.995 + 0.004;
        assert_relative_eq!(chain.alpha(), alpha, epsilon = 1e-15);
        let expected = alpha.powi(4) + 0.01 * (1.0 + alpha * alpha);
        assert_relative_eq!(chain.a(), expected, epsilon = 1e-14);
        assert_relative_eq!(chain.a(), 1.015986006, epsilon = 1e-9);

        let flat = OpoParams { g: 0.0, ..p };
        let one = chain_evolve(&flat, Quadrature::X, 1, 1.0).unwrap();
        assert_relative_eq!(one.b(0, 0).unwrap(), 0.01 + 0.995f64.powi(2), epsilon = 1e-15);
        assert!((one.b(0, 0).unwrap() - 1.0).abs() < 1e-4);
    }

    #[test]
    fn chain_matches_full_state_simulation() {
        let p = OpoParams::new(1.0, 0.2, 0.05).unwrap();
        let n = 12;
        let (a11, a22) = (1.7, 0.6);
        let cav = VariableLabel::mode_pair("c");
        let mut state = GaussianState::from_parts(
            cav.to_vec(),
            DVector::zeros(2),
            DMatrix::from_diagonal(&DVector::from_vec(vec![a11, a22])),
        )
        .unwrap();
        for k in 0..n {
            let seg = format!("s{k}");
            state = state
                .attach_vacuum(&VariableLabel::mode_pair(&seg))
                .unwrap()
                .apply_linear(&opo_step_matrix_for(&p, "c", &seg))
                .unwrap();
        }
        let gx = chain_evolve(&p, Quadrature::X, n, a11).unwrap();
        let gp = chain_evolve(&p, Quadrature::P, n, a22).unwrap();
        for (chain, lab) in [(&gx, VariableLabel::x as fn(&str) -> VariableLabel), (&gp, VariableLabel::p)] {
            let cov = |u: &VariableLabel, v: &VariableLabel| 2.0 * state.covariance(u, v).unwrap();
            assert_relative_eq!(chain.a(), cov(&lab("c"), &lab("c")), epsilon = 1e-12);
            for i in 0..n {
                let si = lab(&format!("s{i}"));
                assert_relative_eq!(chain.c()[i], cov(&lab("c"), &si), epsilon = 1e-12);
                for j in 0..n {
                    let sj = lab(&format!("s{j}"));
                    assert_relative_eq!(chain.b(i, j).unwrap(), cov(&si, &sj), epsilon = 1e-12);
                }
            }
        }
        // the incremental sum agrees with the dense matrix
        let dense: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| gx.b(i, j).unwrap()).sum();
        assert_relative_eq!(gx.sum_b(), dense, max_relative = 1e-13);
    }

    #[test]
    fn simulated_collective_variance() {
        // without gain only the O(τ) reflection error remains
        let flat = OpoParams::new(1.0, 0.0, 1e-4).unwrap();
        for n in [1, 10, 500, 20_000] {
            let v = var_collective_simulated(&chain_evolve(&flat, Quadrature::X, n, 1.0).unwrap());
            assert!((v - 0.5).abs() < 1e-4, "{v}");
        }
        let one = chain_evolve(&unit(0.001), Quadrature::X, 1, 5.0).unwrap();
        assert!((var_collective_simulated(&one) - 0.5).abs() < 0.01);

        let long = chain_evolve(&unit(1e-3), Quadrature::X, 10_000, 5.0).unwrap();
        assert!(!long.has_dense_b());
        let v = var_collective_simulated(&long);
        assert!((v / 15.2152 - 1.0).abs() < 0.01, "{v}");
    }

    #[test]
    fn simulation_converges_first_order() {
        let t = 4.0;
        let oracle = oracle_var_xt(&unit(1e-3), t, 1.0);
        let err = |tau: f64| {
            let n = (t / tau).round() as usize;
            let v = var_collective_simulated(&chain_evolve(&unit(tau), Quadrature::X, n, 1.0).unwrap());
            (v - oracle).abs()
        };
        let ratio = err(0.004) / err(0.002);
        assert!((1.8..2.2).contains(&ratio), "{ratio}");
    }

    #[test]
    fn oracle_matches_expanded_form() {
        for &(g, t, a11) in &[(0.2, 10.0, 5.0), (0.2, 0.7, 1.0), (0.1, 3.0, 2.0), (-0.15, 5.0, 0.4), (0.0, 2.0, 1.0)] {
            let p = OpoParams::new(1.0, g, 1e-3).unwrap();
            assert_relative_eq!(oracle_var_xt(&p, t, a11), expanded_form(1.0, g, t, a11), max_relative = 1e-12);
        }
    }

    #[test]
    fn oracle_spot_values_and_limits() {
        let p = unit(1e-3);
        assert_relative_eq!(oracle_var_xt_steady(&p, 10.0), 15.2152, epsilon = 1e-4);
        assert_relative_eq!(
            oracle_var_xt_steady(&p, 10.0),
            (6.48 - 6.4 + 6.4 * (-1.0f64).exp()) / 0.16,
            max_relative = 1e-13
        );
        assert_relative_eq!(oracle_var_pt(&p, 10.0), (0.72 + 6.4 - 6.4 * (-9.0f64).exp()) / 116.64, max_relative = 1e-13);
        assert_relative_eq!(oracle_var_pt(&p, 10.0), 0.061036, epsilon = 1e-6);
        assert_relative_eq!(limit_var_xt(&p), 40.5, max_relative = 1e-14);
        assert_relative_eq!(limit_var_pt(&p), 0.0061728, epsilon = 1e-7);
        assert_relative_eq!(limit_var_xt(&p) * limit_var_pt(&p), 0.25, max_relative = 1e-14);
        for t in [1e-9, 1e-6] {
            assert_relative_eq!(oracle_var_xt_steady(&p, t), 0.5, epsilon = 1e-5);
            assert_relative_eq!(oracle_var_pt(&p, t), 0.5, epsilon = 1e-5);
            assert_relative_eq!(oracle_var_xt(&p, t, 1.0), 0.5, epsilon = 1e-5);
        }
        let t_big = 1e9;
        assert_relative_eq!(oracle_var_xt(&p, t_big, 0.3), 40.5, max_relative = 1e-7);
        assert_relative_eq!(oracle_var_xt(&p, t_big, 9.0), 40.5, max_relative = 1e-7);
    }

    #[test]
    fn uncorrected_p_formula_diverges_at_short_times() {
        let p = unit(1e-3);
        assert!(uncorrected_var_pt(&p, 1e-6) < -1e4);
        assert!(oracle_var_pt(&p, 1e-6) > 0.49);
        // by contrast the mirrored-gain form has the right long-time limit too
        assert_relative_eq!(oracle_var_pt(&p, 1e9), limit_var_pt(&p), max_relative = 1e-6);
    }

    /// Independent check of the p oracle: the p chain (g → −g, steady seed)
    /// simulated at small τ.
    #[test]
    fn p_oracle_matches_p_chain() {
        let p = unit(2e-4);
        let n = 15_000;
        let chain = chain_evolve(&p, Quadrature::P, n, steady_seed(&p, Quadrature::P)).unwrap();
        let v = var_collective_simulated(&chain);
        assert_relative_eq!(v, oracle_var_pt(&p, n as f64 * 2e-4), max_relative = 2e-3);
    }

    #[test]
    fn normal_ordered_plus_half_is_steady_collective_variance() {
        for gi in 0..10 {
            for ti in 0..10 {
                let g = 0.24 * gi as f64 / 9.0;
                let t = 0.1 * 1000f64.powf(ti as f64 / 9.0);
                let p = OpoParams::new(1.0, g, 1e-3).unwrap();
                let lhs = integrated_normal_ordered(&p, t) + 0.5;
                assert_relative_eq!(lhs, oracle_var_xt_steady(&p, t), max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn segment_guard() {
        assert!(matches!(
            chain_evolve(&unit(1e-3), Quadrature::X, MAX_SEGMENTS + 1, 1.0),
            Err(Error::Dimension(_))
        ));
        assert!(chain_evolve(&unit(1e-3), Quadrature::X, 3, -1.0).is_err());
        let series = collective_series(&unit(1e-2), Quadrature::X, 5.0, 100, 30).unwrap();
        assert_eq!(series.len(), 4);
        assert_relative_eq!(series[3].0, 1.0, epsilon = 1e-12);
    }
}
