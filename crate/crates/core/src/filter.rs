//! An OPO feeding a detuned analysis cavity.
//!
//! Within one step the fresh segment reflects off the OPO (mode `c1`), then
//! off the analysis cavity (mode `c2`, decay `Γ₂`, detuning `δ` acting as a
//! rotation `x₂ ← x₂ + δτ p₂`, `p₂ ← p₂ − δτ x₂`), and is then discarded.
//! The analysis cavity's steady covariance eigenvalues `V_min ≤ V_max` show
//! how much of the squeezing spectrum falls inside its linewidth.

use nalgebra::{DMatrix, Matrix2, SymmetricEigen};

use crate::error::{invalid, Error, Result};
use crate::numerics::extrapolate_to_zero;
use crate::opo::{opo_step_block, validate_rates, validate_tau, OpoParams};
use crate::par::{try_map_indexed, Execution};
use crate::state::{StepMatrix, VariableLabel};

pub const OPO_MODE: &str = "c1";
pub const PROBE_MODE: &str = "c2";
pub const SEGMENT: &str = "ph";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterParams {
    /// OPO decay Γ₁ (s⁻¹).
    pub gamma1: f64,
    /// Parametric gain g (s⁻¹).
    pub g: f64,
    /// Analysis-cavity decay Γ₂ (s⁻¹).
    pub gamma2: f64,
    /// Analysis-cavity detuning δ (s⁻¹).
    pub delta: f64,
    /// Segment duration τ (s).
    pub tau: f64,
}

impl FilterParams {
    pub fn validate(&self) -> Result<()> {
        validate_rates(self.gamma1, self.g)?;
        if !(self.gamma2 >= 0.0) || !self.gamma2.is_finite() {
            return Err(invalid(format!("Γ₂ must be >= 0, got {}", self.gamma2)));
        }
        if !self.delta.is_finite() {
            return Err(invalid("detuning must be finite"));
        }
        validate_tau(self.gamma1.max(self.gamma2), self.tau)
    }

    fn opo(&self) -> OpoParams {
        OpoParams {
            gamma: self.gamma1,
            g: self.g,
            tau: self.tau,
        }
    }

    pub fn with_tau(&self, tau: f64) -> Self {
        Self { tau, ..*self }
    }

    pub fn with_delta(&self, delta: f64) -> Self {
        Self { delta, ..*self }
    }

    pub fn with_gamma2(&self, gamma2: f64) -> Self {
        Self { gamma2, ..*self }
    }

    /// Largest τ for which the first-order rotation does not pump the
    /// analysis cavity: `δ²τ ≤ Γ₂`.
    pub fn stable_tau(&self) -> f64 {
        if self.delta == 0.0 {
            f64::INFINITY
        } else {
            self.gamma2 / (self.delta * self.delta)
        }
    }
}

fn labels() -> Vec<VariableLabel> {
    [
        VariableLabel::mode_pair(OPO_MODE),
        VariableLabel::mode_pair(PROBE_MODE),
        VariableLabel::mode_pair(SEGMENT),
    ]
    .concat()
}

fn step_block(params: &FilterParams) -> DMatrix<f64> {
    let tau = params.tau;
    // stage one on (c1, ph), embedded in the 6-variable order (c1, c2, ph)
    let opo = opo_step_block(&params.opo());
    let embed = [0usize, 1, 4, 5];
    let mut s1 = DMatrix::identity(6, 6);
    for (r, &i) in embed.iter().enumerate() {
        for (c, &j) in embed.iter().enumerate() {
            s1[(i, j)] = opo[(r, c)];
        }
    }
    // stage two on (c2, ph)
    let xi2 = 1.0 - params.gamma2 * tau / 2.0;
    let s2c = (params.gamma2 * tau).sqrt();
    let dt = params.delta * tau;
    let mut s2 = DMatrix::identity(6, 6);
    s2[(2, 2)] = xi2;
    s2[(2, 3)] = dt;
    s2[(2, 4)] = s2c;
    s2[(3, 3)] = xi2;
    s2[(3, 2)] = -dt;
    s2[(3, 5)] = s2c;
    s2[(4, 2)] = -s2c;
    s2[(4, 4)] = xi2;
    s2[(5, 3)] = -s2c;
    s2[(5, 5)] = xi2;
    s2 * s1
}

/// The composed step over `(x_c1, p_c1, x_c2, p_c2, x_ph, p_ph)`.
pub fn chain_step_matrix(params: &FilterParams) -> Result<StepMatrix> {
    params.validate()?;
    StepMatrix::new(labels(), step_block(params))
}

/// Steady covariance of the analysis cavity.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeCovariance {
    /// γ-convention 2×2 block of `(x_c2, p_c2)`.
    pub cov: Matrix2<f64>,
    /// Smaller eigenvalue of `cov / 2`.
    pub v_min: f64,
    /// Larger eigenvalue of `cov / 2`.
    pub v_max: f64,
}

impl ProbeCovariance {
    fn from_joint(joint: &DMatrix<f64>) -> Self {
        let cov = Matrix2::new(joint[(2, 2)], joint[(2, 3)], joint[(3, 2)], joint[(3, 3)]);
        let eig = SymmetricEigen::new(cov / 2.0).eigenvalues;
        Self {
            cov,
            v_min: eig.min(),
            v_max: eig.max(),
        }
    }
}

/// Fixed point of the per-step map on the two cavities at the given τ,
/// `X = M X Mᵀ + N Nᵀ`, solved directly as `(1 − M⊗M) vec X = vec N Nᵀ`.
pub fn discrete_steady_joint(params: &FilterParams) -> Result<DMatrix<f64>> {
    params.validate()?;
    if params.gamma2 == 0.0 {
        return Err(invalid("with Γ₂ = 0 the analysis cavity never reaches a steady state"));
    }
    if params.delta * params.delta * params.tau > params.gamma2 {
        return Err(invalid(format!(
            "τ = {:e} is too long for detuning {:e} (need δ²τ <= Γ₂)",
            params.tau, params.delta
        )));
    }
    let s = step_block(params);
    let m = s.view((0, 0), (4, 4)).into_owned();
    let n = s.view((0, 4), (4, 2)).into_owned();
    let q = &n * n.transpose();
    let lhs = DMatrix::identity(16, 16) - m.kronecker(&m);
    solve_vec(lhs, &q)
}

/// Stationary covariance of the two cavities in the continuum limit,
/// `K X + X Kᵀ + L Lᵀ = 0`.
pub fn continuum_steady_joint(params: &FilterParams) -> Result<DMatrix<f64>> {
    validate_rates(params.gamma1, params.g)?;
    if !(params.gamma2 > 0.0) || !params.delta.is_finite() {
        return Err(invalid("Γ₂ must be positive and δ finite for a steady state"));
    }
    let (g1, g2, g, d) = (params.gamma1, params.gamma2, params.g, params.delta);
    let cross = -(g1 * g2).sqrt();
    #[rustfmt::skip]
    let k = DMatrix::from_row_slice(4, 4, &[
        2.0 * g - g1 / 2.0, 0.0, 0.0, 0.0,
        0.0, -2.0 * g - g1 / 2.0, 0.0, 0.0,
        cross, 0.0, -g2 / 2.0, d,
        0.0, cross, -d, -g2 / 2.0,
    ]);
    #[rustfmt::skip]
    let l = DMatrix::from_row_slice(4, 2, &[
        g1.sqrt(), 0.0,
        0.0, g1.sqrt(),
        g2.sqrt(), 0.0,
        0.0, g2.sqrt(),
    ]);
    let q = &l * l.transpose();
    let id = DMatrix::<f64>::identity(4, 4);
    let lhs = -(id.kronecker(&k) + k.kronecker(&id));
    solve_vec(lhs, &q)
}

fn solve_vec(lhs: DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = rhs.nrows();
    let b = nalgebra::DVector::from_column_slice(rhs.as_slice());
    let x = lhs
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Singular("stationary covariance equation has no unique solution".into()))?;
    let out = DMatrix::from_column_slice(n, n, x.as_slice());
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("stationary covariance is not finite".into()));
    }
    Ok(crate::state::symmetrized(out))
}

/// Steady analysis-cavity covariance: the discrete fixed point at `τ`, `τ/2`
/// and `τ/4`, extrapolated to `τ → 0`.
///
/// The first-order rotation adds `δ²τ/Γ₂` of spurious gain per decay time, so
/// `τ` is first shortened to at most `0.01 Γ₂/δ²` to keep the extrapolation in
/// its asymptotic range.
pub fn steady_probe_covariance(params: &FilterParams) -> Result<ProbeCovariance> {
    params.validate()?;
    let tau = params.tau.min(0.01 * params.stable_tau());
    let taus = [tau, tau / 2.0, tau / 4.0];
    let joints = taus
        .iter()
        .map(|&t| discrete_steady_joint(&params.with_tau(t)))
        .collect::<Result<Vec<_>>>()?;
    let extrapolated = DMatrix::from_fn(4, 4, |i, j| {
        let ys: Vec<f64> = joints.iter().map(|x| x[(i, j)]).collect();
        extrapolate_to_zero(&taus, &ys)
    });
    Ok(ProbeCovariance::from_joint(&extrapolated))
}

/// Same quantity from the continuum Lyapunov equation.
pub fn continuum_probe_covariance(params: &FilterParams) -> Result<ProbeCovariance> {
    Ok(ProbeCovariance::from_joint(&continuum_steady_joint(params)?))
}

/// `V_min`, `V_max` against detuning.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumScan {
    pub deltas: Vec<f64>,
    pub v_min: Vec<f64>,
    pub v_max: Vec<f64>,
}

pub fn scan_detuning(params: &FilterParams, deltas: &[f64], exec: Execution) -> Result<SpectrumScan> {
    params.validate()?;
    if deltas.iter().any(|d| !d.is_finite()) {
        return Err(invalid("detuning grid must be finite"));
    }
    let points = try_map_indexed(exec, deltas.len(), |i| steady_probe_covariance(&params.with_delta(deltas[i])))?;
    Ok(SpectrumScan {
        deltas: deltas.to_vec(),
        v_min: points.iter().map(|p| p.v_min).collect(),
        v_max: points.iter().map(|p| p.v_max).collect(),
    })
}

/// `V_max = ½ ((Γ₁+4g)² + (Γ₁−4g)Γ₂) / ((Γ₁−4g)(Γ₁+Γ₂−4g))` on resonance.
pub fn oracle_vmax(gamma1: f64, g: f64, gamma2: f64) -> f64 {
    let a = gamma1 - 4.0 * g;
    let b = gamma1 + 4.0 * g;
    0.5 * (b * b + a * gamma2) / (a * (gamma1 + gamma2 - 4.0 * g))
}

/// [`oracle_vmax`] with `g → −g`.
pub fn oracle_vmin(gamma1: f64, g: f64, gamma2: f64) -> f64 {
    oracle_vmax(gamma1, -g, gamma2)
}

/// Resonant `(V_min, V_max)` in the `Γ₂ → 0` limit, from the cubic through
/// simulated values at `Γ₂ = h, 2h, 3h, 4h`.
pub fn extrapolate_narrow_probe(params: &FilterParams, h: f64) -> Result<(f64, f64)> {
    if !(h > 0.0) {
        return Err(invalid(format!("Γ₂ spacing must be positive, got {h}")));
    }
    let gammas: Vec<f64> = (1..=4).map(|k| k as f64 * h).collect();
    let points = gammas
        .iter()
        .map(|&g2| steady_probe_covariance(&params.with_gamma2(g2).with_delta(0.0)))
        .collect::<Result<Vec<_>>>()?;
    let vmin: Vec<f64> = points.iter().map(|p| p.v_min).collect();
    let vmax: Vec<f64> = points.iter().map(|p| p.v_max).collect();
    Ok((extrapolate_to_zero(&gammas, &vmin), extrapolate_to_zero(&gammas, &vmax)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::GaussianState;
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    fn base(gamma2: f64) -> FilterParams {
        FilterParams {
            gamma1: 1.0,
            g: 0.2,
            gamma2,
            delta: 0.0,
            tau: 1e-3,
        }
    }

    fn iterate(params: &FilterParams, state: GaussianState, steps: usize) -> GaussianState {
        let step = chain_step_matrix(params).unwrap();
        let seg = VariableLabel::mode_pair(SEGMENT);
        let mut s = state;
        for _ in 0..steps {
            s = s.attach_vacuum(&seg).unwrap().apply_linear(&step).unwrap().trace_out(&seg).unwrap();
        }
        s
    }

    fn cavities_vacuum() -> GaussianState {
        GaussianState::vacuum([VariableLabel::mode_pair(OPO_MODE), VariableLabel::mode_pair(PROBE_MODE)].concat()).unwrap()
    }

    #[test]
    fn vacuum_is_a_fixed_point_without_gain() {
        let p = FilterParams { g: 0.0, gamma2: 0.7, ..base(1.0) };
        let s = iterate(&p, cavities_vacuum(), 200);
        for l in s.labels().to_vec() {
            assert!((s.variance(&l).unwrap() - 0.5).abs() < 1e-3);
        }
    }

    #[test]
    fn uncoupled_probe_keeps_vacuum() {
        let p = base(0.0);
        let s = iterate(&p, cavities_vacuum(), 500);
        assert_eq!(s.variance(&VariableLabel::x(PROBE_MODE)).unwrap(), 0.5);
        assert_eq!(s.variance(&VariableLabel::p(PROBE_MODE)).unwrap(), 0.5);
        assert_eq!(s.covariance(&VariableLabel::x(OPO_MODE), &VariableLabel::x(PROBE_MODE)).unwrap(), 0.0);
        assert!(s.variance(&VariableLabel::x(OPO_MODE)).unwrap() > 0.55);
    }

    #[test]
    fn one_step_cross_covariance() {
        let p = FilterParams { tau: 1e-2, ..base(0.6) };
        let a = 3.0;
        let start = GaussianState::from_parts(
            cavities_vacuum().labels().to_vec(),
            DVector::zeros(4),
            DMatrix::from_diagonal(&DVector::from_vec(vec![a, 1.0 / a, 1.0, 1.0])),
        )
        .unwrap();
        let s = iterate(&p, start, 1);
        let got = 2.0 * s.covariance(&VariableLabel::x(OPO_MODE), &VariableLabel::x(PROBE_MODE)).unwrap();
        let (s1, s2) = ((1.0f64 * 1e-2).sqrt(), (0.6f64 * 1e-2).sqrt());
        let xi1 = 1.0 - 0.5e-2;
        let alpha1 = xi1 + 2.0 * 0.2 * 1e-2;
        assert_relative_eq!(got, s1 * s2 * (xi1 - alpha1 * a), max_relative = 1e-14);
        // leading order is the −√(Γ₁τ)√(Γ₂τ)·a part plus the shared input noise
        assert_relative_eq!(got, -s1 * s2 * (a - 1.0), max_relative = 0.05);
    }

    #[test]
    fn discrete_fixed_point_matches_iteration() {
        let p = FilterParams { tau: 1e-2, delta: 0.3, ..base(1.0) };
        let joint = discrete_steady_joint(&p).unwrap();
        let s = iterate(&p, cavities_vacuum(), 20_000);
        assert_relative_eq!(s.covariance_matrix(), &joint, max_relative = 1e-9);
    }

    #[test]
    fn resonant_values() {
        for (g2, vmin, vmax) in [(1.0, 0.182540, 7.16667), (1.0 / 25.0, 0.0169082, 33.8333)] {
            let p = steady_probe_covariance(&base(g2)).unwrap();
            assert_relative_eq!(p.v_min, oracle_vmin(1.0, 0.2, g2), max_relative = 1e-8);
            assert_relative_eq!(p.v_max, oracle_vmax(1.0, 0.2, g2), max_relative = 1e-8);
            assert_relative_eq!(p.v_min, vmin, max_relative = 1e-5);
            assert_relative_eq!(p.v_max, vmax, max_relative = 1e-5);
            let c = continuum_probe_covariance(&base(g2)).unwrap();
            assert_relative_eq!(c.v_max, p.v_max, max_relative = 1e-8);
            assert_relative_eq!(c.v_min, p.v_min, max_relative = 1e-8);
        }
    }

    #[test]
    fn detuned_routes_agree() {
        for delta in [-2.0, -0.4, 0.25, 1.5] {
            let p = FilterParams { delta, ..base(0.5) };
            let d = steady_probe_covariance(&p).unwrap();
            let c = continuum_probe_covariance(&p).unwrap();
            assert_relative_eq!(d.v_min, c.v_min, max_relative = 1e-7);
            assert_relative_eq!(d.v_max, c.v_max, max_relative = 1e-7);
        }
    }

    #[test]
    fn broad_probe_sees_vacuum() {
        let p = FilterParams { tau: 5e-5, ..base(1000.0) };
        let c = steady_probe_covariance(&p).unwrap();
        assert_relative_eq!(c.v_max, oracle_vmax(1.0, 0.2, 1000.0), max_relative = 1e-6);
        assert!((c.v_max - 0.5).abs() < 0.01 && (c.v_min - 0.5).abs() < 0.01);
        assert_relative_eq!(oracle_vmax(1.0, 0.2, 1e9), 0.5, epsilon = 1e-8);
        assert_relative_eq!(oracle_vmin(1.0, 0.2, 1e9), 0.5, epsilon = 1e-8);
    }

    #[test]
    fn narrow_probe_limit() {
        assert_relative_eq!(oracle_vmax(1.0, 0.2, 0.0), 40.5, max_relative = 1e-14);
        assert_relative_eq!(oracle_vmin(1.0, 0.2, 0.0), 0.0061728395, max_relative = 1e-9);
        let (vmin, vmax) = extrapolate_narrow_probe(&base(1.0), 1e-3).unwrap();
        assert!((vmax - 40.5).abs() < 1e-6, "{vmax}");
        assert!((vmin - 0.0061728395).abs() < 1e-6, "{vmin}");
        for g2 in [0.0, 0.3, 5.0] {
            assert_eq!(oracle_vmax(1.0, 0.0, g2), 0.5);
        }
    }

    #[test]
    fn scan_is_symmetric_and_consistent() {
        let grid = crate::numerics::linspace(-3.0, 3.0, 13);
        let p = base(0.5);
        let scan = scan_detuning(&p, &grid, Execution::Parallel).unwrap();
        for i in 0..grid.len() {
            let j = grid.len() - 1 - i;
            assert!((scan.v_min[i] - scan.v_min[j]).abs() < 1e-10);
            assert!((scan.v_max[i] - scan.v_max[j]).abs() < 1e-10);
            assert!(scan.v_min[i] <= scan.v_max[i]);
        }
        let centre = steady_probe_covariance(&p).unwrap();
        assert_eq!(scan.v_max[6], centre.v_max);
        let seq = scan_detuning(&p, &grid, Execution::Sequential).unwrap();
        assert_eq!(seq, scan);

        let far = steady_probe_covariance(&FilterParams { delta: 500.0, ..p }).unwrap();
        assert!((far.v_max - 0.5).abs() < 1e-3 && (far.v_min - 0.5).abs() < 1e-3);

        let flat = scan_detuning(&FilterParams { g: 0.0, ..p }, &grid, Execution::Sequential).unwrap();
        for v in flat.v_min.iter().chain(&flat.v_max) {
            assert!((v - 0.5).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn invalid_inputs() {
        assert!(chain_step_matrix(&FilterParams { g: 0.3, ..base(1.0) }).is_err());
        assert!(chain_step_matrix(&FilterParams { gamma2: -1.0, ..base(1.0) }).is_err());
        assert!(steady_probe_covariance(&base(0.0)).is_err());
        assert!(discrete_steady_joint(&FilterParams { delta: 10.0, tau: 1e-2, ..base(0.5) }).is_err());
    }
}
