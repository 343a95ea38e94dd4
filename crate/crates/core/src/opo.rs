//! A degenerate optical parametric oscillator below threshold, probed one
//! beam segment at a time.
//!
//! Per step of length `τ` the cavity mode `c` meets a fresh vacuum segment
//! `ph` at the output mirror:
//!
//! ```text
//! x_c  ← (ξ + 2gτ) x_c + √(Γτ) x_ph      x_ph ← −√(Γτ) x_c + ξ x_ph
//! p_c  ← (ξ − 2gτ) p_c + √(Γτ) p_ph      p_ph ← −√(Γτ) p_c + ξ p_ph
//! ```
//!
//! with `ξ = 1 − Γτ/2`. The reflected segment is then either discarded or
//! detected by homodyne measurement of one quadrature.

use nalgebra::{dmatrix, DMatrix};

use crate::error::{invalid, Result};
use crate::numerics::w1;
use crate::riccati::{integrate, ContinuumModel, Readout, RiccatiSystem};
use crate::state::{GaussianState, StepMatrix, VariableLabel};

pub const CAVITY: &str = "c";
pub const SEGMENT: &str = "ph";

/// Segment stepping needs `Γτ` well below one for the first-order step to hold.
pub const MAX_GAMMA_TAU: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OpoParams {
    /// Cavity decay rate Γ (s⁻¹).
    pub gamma: f64,
    /// Parametric gain g (s⁻¹). Negative values squeeze x instead of p.
    pub g: f64,
    /// Segment duration τ (s).
    pub tau: f64,
}

impl OpoParams {
    pub fn new(gamma: f64, g: f64, tau: f64) -> Result<Self> {
        let p = Self { gamma, g, tau };
        p.validate()?;
        Ok(p)
    }

    /// Γ = 2π × 6 MHz, g = 0.2 Γ, τ = 10⁻³/Γ.
    pub fn figure_defaults() -> Self {
        let gamma = 2.0 * std::f64::consts::PI * 6e6;
        Self {
            gamma,
            g: 0.2 * gamma,
            tau: 1e-3 / gamma,
        }
    }

    /// Rates only: `Γ > 0` and `4|g| < Γ`.
    pub fn validate_rates(&self) -> Result<()> {
        validate_rates(self.gamma, self.g)
    }

    /// Rates plus `0 < Γτ < 0.1`.
    pub fn validate(&self) -> Result<()> {
        self.validate_rates()?;
        validate_tau(self.gamma, self.tau)
    }

    /// `ξ = 1 − Γτ/2`.
    pub fn xi(&self) -> f64 {
        1.0 - self.gamma * self.tau / 2.0
    }

    /// `Γ − 4g`, the decay rate of the amplified quadrature.
    pub fn slow_rate(&self) -> f64 {
        self.gamma - 4.0 * self.g
    }

    /// The same cavity with `g → −g`, which exchanges the roles of x and p.
    pub fn mirrored(&self) -> Self {
        Self { g: -self.g, ..*self }
    }

    pub fn with_tau(&self, tau: f64) -> Self {
        Self { tau, ..*self }
    }
}

pub(crate) fn validate_rates(gamma: f64, g: f64) -> Result<()> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(invalid(format!("decay rate Γ must be positive, got {gamma}")));
    }
    if !g.is_finite() || 4.0 * g.abs() >= gamma {
        return Err(invalid(format!(
            "below-threshold operation requires 4g < Γ, got 4|g| = {} and Γ = {gamma}",
            4.0 * g.abs()
        )));
    }
    Ok(())
}

pub(crate) fn validate_tau(gamma: f64, tau: f64) -> Result<()> {
    if !(tau > 0.0) || gamma * tau >= MAX_GAMMA_TAU {
        return Err(invalid(format!(
            "segment duration must satisfy 0 < Γτ < {MAX_GAMMA_TAU}, got Γτ = {}",
            gamma * tau
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MeasuredQuadrature {
    X,
    P,
    None,
}

/// The step over `(x_c, p_c, x_ph, p_ph)`.
pub fn opo_step_matrix(params: &OpoParams) -> StepMatrix {
    opo_step_matrix_for(params, CAVITY, SEGMENT)
}

/// The step over `(x_cavity, p_cavity, x_segment, p_segment)` with custom mode names.
pub fn opo_step_matrix_for(params: &OpoParams, cavity: &str, segment: &str) -> StepMatrix {
    let labels = [
        VariableLabel::mode_pair(cavity),
        VariableLabel::mode_pair(segment),
    ]
    .concat();
    StepMatrix::new(labels, opo_step_block(params)).expect("4 labels, 4x4 matrix")
}

pub(crate) fn opo_step_block(params: &OpoParams) -> DMatrix<f64> {
    let xi = params.xi();
    let gt = 2.0 * params.g * params.tau;
    let s = (params.gamma * params.tau).sqrt();
    dmatrix![
        xi + gt, 0.0, s, 0.0;
        0.0, xi - gt, 0.0, s;
        -s, 0.0, xi, 0.0;
        0.0, -s, 0.0, xi
    ]
}

/// Cavity variances and purity against time.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IntracavitySeries {
    pub times: Vec<f64>,
    pub var_x: Vec<f64>,
    pub var_p: Vec<f64>,
    /// `1/√det` of the cavity's covariance block; 1 for a pure state.
    pub purity: Vec<f64>,
}

impl IntracavitySeries {
    fn push(&mut self, t: f64, state: &GaussianState) -> Result<()> {
        let vx = state.variance(&VariableLabel::x(CAVITY))?;
        let vp = state.variance(&VariableLabel::p(CAVITY))?;
        let cxp = state.covariance(&VariableLabel::x(CAVITY), &VariableLabel::p(CAVITY))?;
        self.times.push(t);
        self.var_x.push(vx);
        self.var_p.push(vp);
        self.purity.push(purity_from_variances(vx, vp, cxp));
        Ok(())
    }
}

fn purity_from_variances(vx: f64, vp: f64, cxp: f64) -> f64 {
    // det γ = 4 (var_x var_p − cov²)
    1.0 / (4.0 * (vx * vp - cxp * cxp)).sqrt()
}

/// Segment-by-segment evolution from the cavity vacuum.
///
/// Each step attaches a vacuum segment, applies the step matrix, then either
/// conditions on the chosen output quadrature or discards the segment. The
/// cavity is recorded at `t = 0` and after every `stride` steps, and always at
/// the final step.
pub fn simulate_intracavity(
    params: &OpoParams,
    t_max: f64,
    measured: MeasuredQuadrature,
    stride: usize,
) -> Result<IntracavitySeries> {
    params.validate()?;
    if !(t_max > 0.0) || !t_max.is_finite() {
        return Err(invalid(format!("t_max must be positive, got {t_max}")));
    }
    let stride = stride.max(1);
    let steps = (t_max / params.tau).round().max(1.0) as usize;
    let segment = VariableLabel::mode_pair(SEGMENT);
    let step = opo_step_matrix(params);

    let mut state = GaussianState::vacuum(VariableLabel::mode_pair(CAVITY).to_vec())?;
    let mut out = IntracavitySeries::default();
    out.push(0.0, &state)?;
    for k in 1..=steps {
        let joint = state.attach_vacuum(&segment)?.apply_linear(&step)?;
        state = match measured {
            MeasuredQuadrature::X => joint.condition_homodyne(&segment[0], 0.0)?,
            MeasuredQuadrature::P => joint.condition_homodyne(&segment[1], 0.0)?,
            MeasuredQuadrature::None => joint.trace_out(&segment)?,
        };
        if k % stride == 0 || k == steps {
            out.push(k as f64 * params.tau, &state)?;
        }
    }
    Ok(out)
}

/// Riccati matrices for the cavity pair `(x_c, p_c)`.
///
/// * `None`: `G = Γ·1`, `D = E = diag(Γ/2 − 2g, Γ/2 + 2g)`, `F = 0`.
/// * `X`: `G = diag(0, Γ)`, `D = E = diag(−2g − Γ/2, 2g + Γ/2)`, `F = diag(Γ, 0)`.
/// * `P`: `G = diag(Γ, 0)`, `D = E = diag(Γ/2 − 2g, 2g − Γ/2)`, `F = diag(0, Γ)`.
pub fn riccati_system_for(params: &OpoParams, measured: MeasuredQuadrature) -> RiccatiSystem {
    let (gam, g) = (params.gamma, params.g);
    let diag = |a: f64, b: f64| DMatrix::from_diagonal(&nalgebra::dvector![a, b]);
    let (gm, d, f) = match measured {
        MeasuredQuadrature::None => (diag(gam, gam), diag(gam / 2.0 - 2.0 * g, gam / 2.0 + 2.0 * g), diag(0.0, 0.0)),
        MeasuredQuadrature::X => (diag(0.0, gam), diag(-2.0 * g - gam / 2.0, 2.0 * g + gam / 2.0), diag(gam, 0.0)),
        MeasuredQuadrature::P => (diag(gam, 0.0), diag(gam / 2.0 - 2.0 * g, 2.0 * g - gam / 2.0), diag(0.0, gam)),
    };
    RiccatiSystem::new(gm, d.clone(), d, f).expect("2x2 blocks")
}

/// The continuum model of the segment scheme, from which the same matrices
/// follow by eliminating the detected segment.
pub fn continuum_model(params: &OpoParams, measured: MeasuredQuadrature) -> ContinuumModel {
    let (gam, g) = (params.gamma, params.g);
    let sg = gam.sqrt();
    let readout = match measured {
        MeasuredQuadrature::X => Some(Readout {
            row: nalgebra::dvector![-sg, 0.0],
            slot: 0,
        }),
        MeasuredQuadrature::P => Some(Readout {
            row: nalgebra::dvector![0.0, -sg],
            slot: 1,
        }),
        MeasuredQuadrature::None => None,
    };
    ContinuumModel {
        drift: dmatrix![2.0 * g - gam / 2.0, 0.0; 0.0, -2.0 * g - gam / 2.0],
        input: dmatrix![sg, 0.0; 0.0, sg],
        input_cov: DMatrix::identity(2, 2),
        readout,
    }
}

/// Riccati evolution of the cavity from the vacuum, sampled at `times`.
pub fn riccati_intracavity(
    params: &OpoParams,
    times: &[f64],
    measured: MeasuredQuadrature,
) -> Result<IntracavitySeries> {
    params.validate_rates()?;
    let traj = integrate(&riccati_system_for(params, measured), &DMatrix::identity(2, 2), times)?;
    let mut out = IntracavitySeries::default();
    for (t, a) in traj.times.iter().zip(&traj.states) {
        let (vx, vp, c) = (a[(0, 0)] / 2.0, a[(1, 1)] / 2.0, a[(0, 1)] / 2.0);
        out.times.push(*t);
        out.var_x.push(vx);
        out.var_p.push(vp);
        out.purity.push(purity_from_variances(vx, vp, c));
    }
    Ok(out)
}

/// Unconditioned variance of the quadrature amplified at rate `4g`:
/// `½ (Γ − 4g e^{−(Γ−4g)t}) / (Γ − 4g)`. The other quadrature uses `−g`.
pub fn unconditioned_variance(gamma: f64, g: f64, t: f64) -> f64 {
    let a = gamma - 4.0 * g;
    0.5 * (gamma - 4.0 * g * (-a * t).exp()) / a
}

/// Variance of the deamplified quadrature when it is the one detected:
/// `½ (Γ − 4g) / (Γ − 4g e^{−(Γ−4g)t})`.
pub fn conditioned_variance(gamma: f64, g: f64, t: f64) -> f64 {
    let a = gamma - 4.0 * g;
    0.5 * a / (gamma - 4.0 * g * (-a * t).exp())
}

/// Closed-form `(var_x, var_p)` of the cavity at time `t` from the vacuum.
pub fn oracle_intracavity(params: &OpoParams, t: f64, measured: MeasuredQuadrature) -> (f64, f64) {
    let (gam, g) = (params.gamma, params.g);
    let ux = unconditioned_variance(gam, g, t);
    let up = unconditioned_variance(gam, -g, t);
    match measured {
        MeasuredQuadrature::None => (ux, up),
        MeasuredQuadrature::P => (ux, conditioned_variance(gam, g, t)),
        MeasuredQuadrature::X => (conditioned_variance(gam, -g, t), up),
    }
}

/// Steady-state values of [`oracle_intracavity`].
pub fn oracle_intracavity_steady(params: &OpoParams, measured: MeasuredQuadrature) -> (f64, f64) {
    let (gam, g) = (params.gamma, params.g);
    let ux = 0.5 * gam / (gam - 4.0 * g);
    let up = 0.5 * gam / (gam + 4.0 * g);
    match measured {
        MeasuredQuadrature::None => (ux, up),
        MeasuredQuadrature::P => (ux, 0.5 * (gam - 4.0 * g) / gam),
        MeasuredQuadrature::X => (0.5 * (gam + 4.0 * g) / gam, up),
    }
}

/// Normal-ordered spectral density of the output x quadrature,
/// `2Γg / ((Γ/2 − 2g)² + ω²)`.
pub fn oracle_spectrum(params: &OpoParams, omega: f64) -> f64 {
    let (gam, g) = (params.gamma, params.g);
    let half_width = gam / 2.0 - 2.0 * g;
    2.0 * gam * g / (half_width * half_width + omega * omega)
}

/// Normal-ordered `⟨:x_T²:⟩` of the output integrated over `T`:
/// `8gΓ/(T a³) [aT − 2 + 2e^{−aT/2}]` with `a = Γ − 4g`.
pub fn integrated_normal_ordered(params: &OpoParams, t_total: f64) -> f64 {
    let (gam, g) = (params.gamma, params.g);
    let a = gam - 4.0 * g;
    16.0 * gam * g * w1(a * t_total / 2.0) / (t_total * a * a * a)
}
