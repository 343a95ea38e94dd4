//! The covariance Riccati flow `Ȧ = G − D A − A E − A F A`.
//!
//! Three solvers: fixed-step RK4 ([`integrate`]), the linearized pair
//! `A = W U⁻¹` with `Ẇ = −D W + G U`, `U̇ = F W + E U` propagated by matrix
//! exponentials ([`integrate_linearized`]), and a damped fixed-point iteration
//! for the stationary root ([`steady_state`]).

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{invalid, Error, Result};
use crate::state::{symmetric_defect, symmetrized};

/// Internal RK4 steps never exceed this many inverse rates.
pub const STEP_RATE_FRACTION: f64 = 1e-3;
pub const STEADY_MAX_ITERATIONS: usize = 100_000;
pub const STEADY_TOLERANCE: f64 = 1e-12;
pub const SINGULAR_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct RiccatiSystem {
    g: DMatrix<f64>,
    d: DMatrix<f64>,
    e: DMatrix<f64>,
    f: DMatrix<f64>,
}

impl RiccatiSystem {
    pub fn new(g: DMatrix<f64>, d: DMatrix<f64>, e: DMatrix<f64>, f: DMatrix<f64>) -> Result<Self> {
        let n = g.nrows();
        for (name, m) in [("G", &g), ("D", &d), ("E", &e), ("F", &f)] {
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::Dimension(format!(
                    "Riccati matrix {name} is {}x{}, expected {n}x{n}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("Riccati matrix {name} has non-finite entries")));
            }
        }
        Ok(Self { g, d, e, f })
    }

    pub fn dim(&self) -> usize {
        self.g.nrows()
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn e(&self) -> &DMatrix<f64> {
        &self.e
    }

    pub fn f(&self) -> &DMatrix<f64> {
        &self.f
    }

    /// `G − D A − A E − A F A`.
    pub fn rhs(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = self.g.clone();
        out.gemm(-1.0, &self.d, a, 1.0);
        out.gemm(-1.0, a, &self.e, 1.0);
        let fa = &self.f * a;
        out.gemm(-1.0, a, &fa, 1.0);
        out
    }

    /// Largest entry of `rhs(A)`, scaled by the flow's rate and by `max(1, |A|)`.
    pub fn residual(&self, a: &DMatrix<f64>) -> f64 {
        let r = self.rhs(a).amax();
        let scale = self.rate(a).max(f64::MIN_POSITIVE) * a.amax().max(1.0);
        r / scale
    }

    /// A bound on how fast the flow linearized at `a` can change: the largest
    /// of `‖D‖∞`, `‖E‖∞`, `‖F A‖∞` and `‖A F‖∞`.
    pub fn rate(&self, a: &DMatrix<f64>) -> f64 {
        norm_inf(&self.d)
            .max(norm_inf(&self.e))
            .max(norm_inf(&(&self.f * a)))
            .max(norm_inf(&(a * &self.f)))
    }
}

pub(crate) fn norm_inf(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// A linear stochastic model in the continuum limit, used to derive the
/// Riccati matrices of a segment scheme with one homodyne readout per step.
///
/// Per step of length `τ` the retained variables evolve as
/// `z ← z + τ K z + √τ L w` where `w` is the fresh input pair with covariance
/// `Σ` (γ convention). With a readout, the detected output quadrature is
/// `√τ mᵀ z + w_q`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuumModel {
    pub drift: DMatrix<f64>,
    pub input: DMatrix<f64>,
    pub input_cov: DMatrix<f64>,
    pub readout: Option<Readout>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Readout {
    pub row: DVector<f64>,
    /// Which input slot (0 or 1) passes into the detected quadrature.
    pub slot: usize,
}

impl ContinuumModel {
    pub fn riccati(&self) -> Result<RiccatiSystem> {
        let n = self.drift.nrows();
        if self.drift.ncols() != n || self.input.nrows() != n || self.input.ncols() != 2 {
            return Err(Error::Dimension(format!(
                "drift must be {n}x{n} and input {n}x2, got {}x{} and {}x{}",
                self.drift.nrows(),
                self.drift.ncols(),
                self.input.nrows(),
                self.input.ncols()
            )));
        }
        if self.input_cov.shape() != (2, 2) {
            return Err(Error::Dimension("input covariance must be 2x2".into()));
        }
        let l = &self.input;
        let mut g = l * &self.input_cov * l.transpose();
        let mut k = self.drift.clone();
        let mut f = DMatrix::zeros(n, n);
        if let Some(ro) = &self.readout {
            if ro.row.len() != n || ro.slot > 1 {
                return Err(Error::Dimension("readout row or slot out of range".into()));
            }
            let sqq = self.input_cov[(ro.slot, ro.slot)];
            if !(sqq > 0.0) {
                return Err(Error::Unphysical("detected input slot has zero variance".into()));
            }
            // process noise correlated with the detected input
            let s = l * self.input_cov.column(ro.slot);
            g -= &s * s.transpose() / sqq;
            k -= &s * ro.row.transpose() / sqq;
            f = &ro.row * ro.row.transpose() / sqq;
        }
        let d = -k;
        let e = d.transpose();
        RiccatiSystem::new(symmetrized(g), d, e, symmetrized(f))
    }
}

/// Covariance matrices (γ convention) at increasing times.
#[derive(Clone, Debug, PartialEq)]
pub struct CovTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<DMatrix<f64>>,
}

impl CovTrajectory {
    /// `γ_ij(t)` for every recorded time.
    pub fn entry(&self, i: usize, j: usize) -> Vec<f64> {
        self.states.iter().map(|a| a[(i, j)]).collect()
    }

    /// `γ_ii(t) / 2`.
    pub fn variance(&self, i: usize) -> Vec<f64> {
        self.states.iter().map(|a| a[(i, i)] / 2.0).collect()
    }

    pub fn last(&self) -> Option<&DMatrix<f64>> {
        self.states.last()
    }
}

fn check_inputs(system: &RiccatiSystem, a0: &DMatrix<f64>, times: &[f64]) -> Result<()> {
    let n = system.dim();
    if a0.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "initial matrix is {}x{}, system is {n}x{n}",
            a0.nrows(),
            a0.ncols()
        )));
    }
    if symmetric_defect(a0) > 1e-12 {
        return Err(invalid("initial covariance must be symmetric"));
    }
    if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(invalid("output times must be finite and non-negative"));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("output times must be strictly increasing"));
    }
    Ok(())
}

/// Fixed-step RK4 from `A(0) = a0`, recorded at each of `times`.
///
/// Each output interval is split into equal steps no longer than
/// `1e-3 / rate`, with the rate re-evaluated at the start of the interval.
pub fn integrate(system: &RiccatiSystem, a0: &DMatrix<f64>, times: &[f64]) -> Result<CovTrajectory> {
    integrate_inner(system, a0, times, None)
}

/// As [`integrate`] but with an explicit cap on the internal step.
pub fn integrate_with_max_step(
    system: &RiccatiSystem,
    a0: &DMatrix<f64>,
    times: &[f64],
    max_step: f64,
) -> Result<CovTrajectory> {
    if !(max_step > 0.0) {
        return Err(invalid(format!("step must be positive, got {max_step}")));
    }
    integrate_inner(system, a0, times, Some(max_step))
}

fn integrate_inner(
    system: &RiccatiSystem,
    a0: &DMatrix<f64>,
    times: &[f64],
    fixed_step: Option<f64>,
) -> Result<CovTrajectory> {
    check_inputs(system, a0, times)?;
    let mut a = symmetrized(a0.clone());
    let mut t = 0.0;
    let mut states = Vec::with_capacity(times.len());
    for &target in times {
        let span = target - t;
        if span > 0.0 {
            let max_step = fixed_step.unwrap_or_else(|| {
                let rate = system.rate(&a);
                if rate > 0.0 {
                    STEP_RATE_FRACTION / rate
                } else {
                    span
                }
            });
            let steps = (span / max_step).ceil().max(1.0) as usize;
            let h = span / steps as f64;
            for k in 0..steps {
                rk4_step(system, &mut a, h);
                if a.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Divergence {
                        time: t + (k + 1) as f64 * h,
                    });
                }
            }
        }
        t = target;
        states.push(a.clone());
    }
    Ok(CovTrajectory {
        times: times.to_vec(),
        states,
    })
}

fn rk4_step(system: &RiccatiSystem, a: &mut DMatrix<f64>, h: f64) {
    let k1 = system.rhs(a);
    let k2 = system.rhs(&(&*a + &k1 * (h / 2.0)));
    let k3 = system.rhs(&(&*a + &k2 * (h / 2.0)));
    let k4 = system.rhs(&(&*a + &k3 * h));
    *a += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// `A(t) = W(t) U(t)⁻¹` from `W(0) = a0`, `U(0) = 1`.
///
/// The block exponential is applied in chunks of at most one inverse norm of
/// the generator, restarting from `(A, 1)` after each chunk so the pair never
/// overflows.
pub fn integrate_linearized(system: &RiccatiSystem, a0: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    check_inputs(system, a0, &[t])?;
    let n = system.dim();
    let mut gen = DMatrix::zeros(2 * n, 2 * n);
    gen.view_mut((0, 0), (n, n)).copy_from(&(-&system.d));
    gen.view_mut((0, n), (n, n)).copy_from(&system.g);
    gen.view_mut((n, 0), (n, n)).copy_from(&system.f);
    gen.view_mut((n, n), (n, n)).copy_from(&system.e);

    let norm = norm_inf(&gen);
    let chunks = if norm * t > 1.0 { (norm * t).ceil() as usize } else { 1 };
    let dt = t / chunks as f64;
    let prop = (&gen * dt).exp();

    let mut a = symmetrized(a0.clone());
    for _ in 0..chunks {
        let mut wu = DMatrix::zeros(2 * n, n);
        wu.view_mut((0, 0), (n, n)).copy_from(&a);
        wu.view_mut((n, 0), (n, n)).fill_with_identity();
        let next = &prop * wu;
        let w = next.view((0, 0), (n, n)).into_owned();
        let u = next.view((n, 0), (n, n)).into_owned();
        let sv = u.clone().singular_values();
        let (smax, smin) = (sv.max(), sv.min());
        if !(smin > SINGULAR_TOLERANCE * smax) {
            return Err(Error::Singular(format!(
                "U is singular (smallest/largest singular value {:e})",
                smin / smax
            )));
        }
        let u_inv = u.try_inverse().ok_or_else(|| Error::Singular("U is not invertible".into()))?;
        a = symmetrized(w * u_inv);
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { time: t });
        }
    }
    Ok(a)
}

/// Stationary root of the flow, reached by damped pseudo-time iteration from
/// the identity. The result is checked to be positive semidefinite.
pub fn steady_state(system: &RiccatiSystem) -> Result<DMatrix<f64>> {
    let n = system.dim();
    let mut a = DMatrix::identity(n, n);
    let mut residual = f64::INFINITY;
    for _ in 0..STEADY_MAX_ITERATIONS {
        let rhs = system.rhs(&a);
        let rate = system.rate(&a).max(f64::MIN_POSITIVE);
        residual = rhs.amax() / (rate * a.amax().max(1.0));
        if !residual.is_finite() {
            break;
        }
        if residual < STEADY_TOLERANCE {
            let eig = SymmetricEigen::new(a.clone()).eigenvalues;
            if eig.min() < -1e-9 * a.amax().max(1.0) {
                return Err(Error::Unphysical(format!(
                    "stationary root has negative eigenvalue {:e}",
                    eig.min()
                )));
            }
            return Ok(a);
        }
        a = symmetrized(a + rhs * (0.5 / rate));
    }
    Err(Error::NoConvergence {
        iterations: STEADY_MAX_ITERATIONS,
        residual,
    })
}
