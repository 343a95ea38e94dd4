//! Estimating a static magnetic field `B` from continuous Faraday-rotation
//! probing of an atomic ensemble.
//!
//! Three probes are supported: coherent light, ideal broadband squeezed light
//! with every segment entering in `diag(1/r, r)`, and the output of an OPO.
//! `B` is a classical row; its variance is the variance of the running
//! estimate.
//!
//! Coherent and squeezed probes step `(B, x_at, p_at, x_ph, p_ph)` with
//!
//! ```text
//! x_at ← x_at + κ√τ p_ph     p_at ← p_at − μτ B     x_ph ← x_ph + κ√τ p_at
//! ```
//!
//! and detect `x_ph`. The OPO probe keeps the cavity `(x_c, p_c)` alongside
//! the atoms, the atoms see the light reflected off the cavity, and `p_ph` is
//! detected.

use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::numerics::golden_section_min;
use crate::opo::{opo_step_block, validate_rates, OpoParams};
use crate::par::{map_indexed, Execution};
use crate::riccati::{integrate, ContinuumModel, Readout};
use crate::state::{GaussianState, StepMatrix, VariableLabel};

pub const FIELD: &str = "B";
pub const ATOMS: &str = "at";
pub const CAVITY: &str = "c";
pub const SEGMENT: &str = "ph";

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Probe {
    Coherent,
    /// Every segment enters with `γ = diag(1/r, r)`.
    Squeezed { r: f64 },
    /// Light reflected off an OPO. Only `gamma` and `g` are used; the segment
    /// length is [`MagnetometryParams::tau`].
    Opo(OpoParams),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MagnetometryParams {
    /// κ² (s⁻¹).
    pub kappa_sq: f64,
    /// μ (s⁻¹ pT⁻¹).
    pub mu: f64,
    /// Prior variance of B (pT²).
    pub var_b0: f64,
    pub probe: Probe,
    /// Segment duration (s).
    pub tau: f64,
}

impl MagnetometryParams {
    /// κ² = 1.83·10⁶ s⁻¹, μ = 8.79·10⁴ s⁻¹pT⁻¹, var(B₀) = 1 pT², OPO at
    /// Γ = 2π × 6 MHz, g = 0.2 Γ, τ = 10⁻³/Γ.
    pub fn figure_defaults() -> Self {
        let opo = OpoParams::figure_defaults();
        Self {
            kappa_sq: 1.83e6,
            mu: 8.79e4,
            var_b0: 1.0,
            probe: Probe::Opo(opo),
            tau: opo.tau,
        }
    }

    pub fn with_probe(&self, probe: Probe) -> Self {
        Self { probe, ..*self }
    }

    pub fn with_tau(&self, tau: f64) -> Self {
        Self { tau, ..*self }
    }

    pub fn kappa(&self) -> f64 {
        self.kappa_sq.sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa_sq >= 0.0) || !self.kappa_sq.is_finite() {
            return Err(invalid(format!("kappa_sq must be >= 0, got {}", self.kappa_sq)));
        }
        if !self.mu.is_finite() {
            return Err(invalid(format!("mu must be finite, got {}", self.mu)));
        }
        if !(self.var_b0 > 0.0) || !self.var_b0.is_finite() {
            return Err(invalid(format!("var_B0 must be positive, got {}", self.var_b0)));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(invalid(format!("tau must be positive, got {}", self.tau)));
        }
        match self.probe {
            Probe::Coherent => Ok(()),
            Probe::Squeezed { r } if r > 0.0 && r.is_finite() => Ok(()),
            Probe::Squeezed { r } => Err(invalid(format!("squeezing ratio r must be positive, got {r}"))),
            Probe::Opo(opo) => validate_rates(opo.gamma, opo.g),
        }
    }

    /// `κ²r` for a squeezed probe, `κ²` for a coherent one.
    fn effective_kappa_sq(&self) -> Result<f64> {
        match self.probe {
            Probe::Coherent => Ok(self.kappa_sq),
            Probe::Squeezed { r } => Ok(self.kappa_sq * r),
            Probe::Opo(_) => Err(Error::Unsupported(
                "no closed form for var(B) with an OPO probe".into(),
            )),
        }
    }
}

/// `r = ((Γ + 4g)/(Γ − 4g))²`, the long-time squeezing of the OPO output.
pub fn equivalent_squeezing(opo: &OpoParams) -> f64 {
    ((opo.gamma + 4.0 * opo.g) / (opo.gamma - 4.0 * opo.g)).powi(2)
}

fn b_label() -> VariableLabel {
    VariableLabel::classical(FIELD)
}

/// Step over `(B, x_at, p_at, x_ph, p_ph)` for a coherent or squeezed probe.
pub fn faraday_step_matrix(params: &MagnetometryParams) -> Result<StepMatrix> {
    params.validate()?;
    if let Probe::Opo(_) = params.probe {
        return Err(invalid("faraday_step_matrix needs a coherent or squeezed probe"));
    }
    let k = params.kappa() * params.tau.sqrt();
    let mt = params.mu * params.tau;
    let m = dmatrix![
        1.0, 0.0, 0.0, 0.0, 0.0;
        0.0, 1.0, 0.0, 0.0, k;
        -mt, 0.0, 1.0, 0.0, 0.0;
        0.0, 0.0, k, 1.0, 0.0;
        0.0, 0.0, 0.0, 0.0, 1.0
    ];
    let mut labels = vec![b_label()];
    labels.extend(VariableLabel::mode_pair(ATOMS));
    labels.extend(VariableLabel::mode_pair(SEGMENT));
    StepMatrix::new(labels, m)
}

/// Step over `(B, x_at, p_at, x_c, p_c, x_ph, p_ph)` for an OPO probe.
pub fn opo_faraday_step_matrix(params: &MagnetometryParams) -> Result<StepMatrix> {
    params.validate()?;
    let Probe::Opo(opo) = params.probe else {
        return Err(invalid("opo_faraday_step_matrix needs an OPO probe"));
    };
    let opo = opo.with_tau(params.tau);
    let tau = params.tau;
    let kappa = params.kappa();
    let mut m = DMatrix::identity(7, 7);
    m[(1, 0)] = params.mu * tau;
    m[(2, 3)] = kappa * opo.gamma.sqrt() * tau;
    m[(2, 5)] = -kappa * tau.sqrt();
    m.view_mut((3, 3), (4, 4)).copy_from(&opo_step_block(&opo));
    m[(6, 1)] = -kappa * tau.sqrt();
    let mut labels = vec![b_label()];
    labels.extend(VariableLabel::mode_pair(ATOMS));
    labels.extend(VariableLabel::mode_pair(CAVITY));
    labels.extend(VariableLabel::mode_pair(SEGMENT));
    StepMatrix::new(labels, m)
}

/// One probing step as a reusable recipe: attach a segment, apply the step,
/// detect one quadrature of the segment.
#[derive(Clone, Debug)]
struct Scheme {
    step: StepMatrix,
    segment: [VariableLabel; 2],
    segment_cov: DMatrix<f64>,
    measured: VariableLabel,
}

impl Scheme {
    fn new(params: &MagnetometryParams) -> Result<Self> {
        let segment = VariableLabel::mode_pair(SEGMENT);
        Ok(match params.probe {
            Probe::Coherent => Self {
                step: faraday_step_matrix(params)?,
                measured: segment[0].clone(),
                segment,
                segment_cov: DMatrix::identity(2, 2),
            },
            Probe::Squeezed { r } => Self {
                step: faraday_step_matrix(params)?,
                measured: segment[0].clone(),
                segment,
                segment_cov: DMatrix::from_diagonal(&dvector![1.0 / r, r]),
            },
            Probe::Opo(_) => Self {
                step: opo_faraday_step_matrix(params)?,
                measured: segment[1].clone(),
                segment,
                segment_cov: DMatrix::identity(2, 2),
            },
        })
    }

    fn attach_and_step(&self, state: &GaussianState) -> Result<GaussianState> {
        state
            .attach(&self.segment, &DVector::zeros(2), &self.segment_cov)?
            .apply_linear(&self.step)
    }

    /// The retained variables at `t = 0`: B with its prior, atoms (and cavity)
    /// in the vacuum.
    fn initial_state(&self, var_b: f64, mean_b: f64) -> Result<GaussianState> {
        let labels: Vec<VariableLabel> = self
            .step
            .labels()
            .iter()
            .filter(|l| !self.segment.contains(l))
            .cloned()
            .collect();
        GaussianState::vacuum(labels)?
            .with_variance(&b_label(), var_b)?
            .with_mean(&b_label(), mean_b)
    }
}

/// The continuum model behind [`estimate_variance`]: `(B, x_at, p_at)` for
/// coherent and squeezed probes, `(B, x_at, p_at, x_c, p_c)` for the OPO.
pub fn continuum_model(params: &MagnetometryParams) -> Result<ContinuumModel> {
    params.validate()?;
    let kappa = params.kappa();
    let mu = params.mu;
    Ok(match params.probe {
        Probe::Coherent | Probe::Squeezed { .. } => {
            let r = match params.probe {
                Probe::Squeezed { r } => r,
                _ => 1.0,
            };
            ContinuumModel {
                drift: dmatrix![0.0, 0.0, 0.0; 0.0, 0.0, 0.0; -mu, 0.0, 0.0],
                input: dmatrix![0.0, 0.0; 0.0, kappa; 0.0, 0.0],
                input_cov: DMatrix::from_diagonal(&dvector![1.0 / r, r]),
                readout: Some(Readout {
                    row: dvector![0.0, 0.0, kappa],
                    slot: 0,
                }),
            }
        }
        Probe::Opo(opo) => {
            let (gam, g) = (opo.gamma, opo.g);
            let sg = gam.sqrt();
            let mut drift = DMatrix::zeros(5, 5);
            drift[(1, 0)] = mu;
            drift[(2, 3)] = kappa * sg;
            drift[(3, 3)] = 2.0 * g - gam / 2.0;
            drift[(4, 4)] = -2.0 * g - gam / 2.0;
            let mut input = DMatrix::zeros(5, 2);
            input[(2, 0)] = -kappa;
            input[(3, 0)] = sg;
            input[(4, 1)] = sg;
            ContinuumModel {
                drift,
                input,
                input_cov: DMatrix::identity(2, 2),
                readout: Some(Readout {
                    row: dvector![0.0, -kappa, 0.0, 0.0, -sg],
                    slot: 1,
                }),
            }
        }
    })
}

/// Variance (and, for single trajectories, the running mean) of the B
/// estimate against time.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EstimateTrace {
    pub times: Vec<f64>,
    pub var_b: Vec<f64>,
    pub mean_b: Option<Vec<f64>>,
}

fn check_grid(times: &[f64]) -> Result<()> {
    if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(invalid("times must be finite and non-negative"));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("times must be strictly increasing"));
    }
    Ok(())
}

/// var(B) from the continuum Riccati flow, starting from
/// `γ₀ = diag(2 var(B₀), 1, …)`.
pub fn estimate_variance(params: &MagnetometryParams, times: &[f64]) -> Result<EstimateTrace> {
    check_grid(times)?;
    let system = continuum_model(params)?.riccati()?;
    let mut a0 = DMatrix::identity(system.dim(), system.dim());
    a0[(0, 0)] = 2.0 * params.var_b0;
    let traj = integrate(&system, &a0, times)?;
    Ok(EstimateTrace {
        times: traj.times.clone(),
        var_b: traj.variance(0),
        mean_b: None,
    })
}

/// Step index reached at each output time.
fn step_indices(times: &[f64], tau: f64) -> Vec<usize> {
    times.iter().map(|t| (t / tau).round() as usize).collect()
}

/// var(B) from segment-by-segment simulation (attach, step, detect) with
/// outcomes fixed at the conditional mean. Output times are rounded to whole
/// steps.
pub fn estimate_variance_segments(params: &MagnetometryParams, times: &[f64]) -> Result<EstimateTrace> {
    check_grid(times)?;
    let scheme = Scheme::new(params)?;
    let targets = step_indices(times, params.tau);
    let mut state = scheme.initial_state(params.var_b0, 0.0)?;
    let mut out = EstimateTrace::default();
    let mut k = 0;
    for (&t, &target) in times.iter().zip(&targets) {
        while k < target {
            let joint = scheme.attach_and_step(&state)?;
            let m = joint.mean_of(&scheme.measured)?;
            state = joint.condition_homodyne(&scheme.measured, m)?;
            k += 1;
        }
        out.times.push(t);
        out.var_b.push(state.variance(&b_label())?);
    }
    Ok(out)
}

/// The closed form
/// `var(B₀)(kt + 1) / (k²μ² var(B₀) t⁴/6 + 2kμ² var(B₀) t³/3 + kt + 1)`
/// with `k = κ²` (coherent) or `κ²r` (squeezed).
pub fn oracle_var_b(params: &MagnetometryParams, t: f64) -> Result<f64> {
    let k = params.effective_kappa_sq()?;
    Ok(var_b_closed_form(k, params.mu, params.var_b0, t))
}

fn var_b_closed_form(k: f64, mu: f64, v0: f64, t: f64) -> f64 {
    let kt = k * t;
    let m2v = mu * mu * v0;
    v0 * (kt + 1.0) / (kt * kt * m2v * t * t / 6.0 + 2.0 * kt * m2v * t * t / 3.0 + kt + 1.0)
}

/// `6/(kμ²t³)`, the large-`t` limit of [`oracle_var_b`].
pub fn asymptote_var_b(kappa_sq_eff: f64, mu: f64, t: f64) -> f64 {
    6.0 / (kappa_sq_eff * mu * mu * t.powi(3))
}

/// `16g(3Γ + 4g) / ((Γ − 4g)(Γ + 4g)²)`: how long the OPO-probe curve lags
/// the broadband squeezed curve with the same long-time squeezing.
pub fn effective_delay(opo: &OpoParams) -> Result<f64> {
    validate_rates(opo.gamma, opo.g)?;
    let (gam, g) = (opo.gamma, opo.g);
    Ok(16.0 * g * (3.0 * gam + 4.0 * g) / ((gam - 4.0 * g) * (gam + 4.0 * g).powi(2)))
}

/// Points in the window used by [`fit_delay`].
pub const FIT_POINTS: usize = 200;

/// Least-squares time shift `s` minimizing
/// `Σ (ln var_opo(t) − ln var_sq(t − s))²` over `t` log-spaced in
/// `[10, 100]/(Γ/2 − 2g)`, where `var_sq` is the closed form with
/// `r = ((Γ+4g)/(Γ−4g))²`. `var_opo` comes from the Riccati flow.
pub fn fit_delay(params: &MagnetometryParams) -> Result<f64> {
    let Probe::Opo(opo) = params.probe else {
        return Err(invalid("fit_delay needs an OPO probe"));
    };
    params.validate()?;
    let rate = opo.gamma / 2.0 - 2.0 * opo.g.abs();
    let (lo, hi) = (10.0 / rate, 100.0 / rate);
    let times: Vec<f64> = (0..FIT_POINTS)
        .map(|i| lo * (hi / lo).powf(i as f64 / (FIT_POINTS - 1) as f64))
        .collect();
    let opo_trace = estimate_variance(params, &times)?;
    let k = params.kappa_sq * equivalent_squeezing(&opo);
    let cost = |s: f64| -> f64 {
        times
            .iter()
            .zip(&opo_trace.var_b)
            .map(|(&t, &v)| (v.ln() - var_b_closed_form(k, params.mu, params.var_b0, t - s).ln()).powi(2))
            .sum()
    };
    Ok(golden_section_min(cost, 0.0, 0.9 * lo, 1e-6 * lo))
}

/// A single estimation run against a fixed true field.
///
/// The true system starts with B = `true_b` exactly; each step its detector
/// outcome is drawn from the true state and the estimator, which starts from
/// the prior `N(0, var(B₀))`, is conditioned on the same outcome. Randomness
/// comes from ChaCha8 seeded with `seed` on stream `stream`.
pub fn run_trajectory_stream(
    params: &MagnetometryParams,
    true_b: f64,
    times: &[f64],
    seed: u64,
    stream: u64,
) -> Result<EstimateTrace> {
    check_grid(times)?;
    if !true_b.is_finite() {
        return Err(invalid(format!("true_B must be finite, got {true_b}")));
    }
    let scheme = Scheme::new(params)?;
    let mut rng = trajectory_rng(seed, stream);
    let targets = step_indices(times, params.tau);
    let mut truth = scheme.initial_state(0.0, true_b)?;
    let mut est = scheme.initial_state(params.var_b0, 0.0)?;
    let mut out = EstimateTrace {
        mean_b: Some(Vec::new()),
        ..Default::default()
    };
    let mut k = 0;
    for (&t, &target) in times.iter().zip(&targets) {
        while k < target {
            let (outcome, next_truth) = scheme
                .attach_and_step(&truth)?
                .sample_homodyne(&scheme.measured, &mut rng)?;
            truth = next_truth;
            est = scheme.attach_and_step(&est)?.condition_homodyne(&scheme.measured, outcome.value)?;
            k += 1;
        }
        out.times.push(t);
        out.var_b.push(est.variance(&b_label())?);
        out.mean_b.as_mut().expect("set above").push(est.mean_of(&b_label())?);
    }
    Ok(out)
}

/// [`run_trajectory_stream`] on stream 0.
pub fn run_trajectory(params: &MagnetometryParams, true_b: f64, times: &[f64], seed: u64) -> Result<EstimateTrace> {
    run_trajectory_stream(params, true_b, times, seed, 0)
}

fn trajectory_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Gains for one step, shared by every trajectory since the covariances do not
/// depend on the outcomes.
#[derive(Clone, Debug)]
struct StepGain {
    /// `c / b` over the retained rows, zero when the detected slot has no noise.
    gain: DVector<f64>,
    /// Outcome standard deviation `√(b/2)`.
    sd: f64,
}

/// Precomputed filter for many trajectories: mean propagation plus the
/// per-step gains of both the true state and the estimator.
#[derive(Clone, Debug)]
struct GainSchedule {
    /// Step matrix columns for the retained rows (segment means are zero).
    propagate: DMatrix<f64>,
    keep: Vec<usize>,
    measured: usize,
    truth: Vec<StepGain>,
    estimator: Vec<StepGain>,
    var_b: Vec<f64>,
}

impl GainSchedule {
    fn build(scheme: &Scheme, var_b0: f64, steps: usize) -> Result<Self> {
        let n = scheme.step.labels().len() - 2;
        let propagate = scheme.step.matrix().columns(0, n).into_owned();
        let measured = scheme
            .step
            .labels()
            .iter()
            .position(|l| *l == scheme.measured)
            .expect("measured label is in the step");
        let keep: Vec<usize> = (0..n + 2)
            .filter(|&i| !scheme.segment.contains(&scheme.step.labels()[i]))
            .collect();
        let gains = |var0: f64, record: &mut Option<&mut Vec<f64>>| -> Result<Vec<StepGain>> {
            let mut state = scheme.initial_state(var0, 0.0)?;
            let mut out = Vec::with_capacity(steps);
            for _ in 0..steps {
                let joint = scheme.attach_and_step(&state)?;
                let cov = joint.covariance_matrix();
                let b = cov[(measured, measured)];
                let next = joint.condition_homodyne(&scheme.measured, 0.0)?;
                // a zero-rank slot leaves the retained rows unchanged
                let gain = if next.covariance_matrix() == &crate::state::submatrix(cov, &keep, &keep) {
                    DVector::zeros(keep.len())
                } else {
                    DVector::from_iterator(keep.len(), keep.iter().map(|&i| cov[(i, measured)] / b))
                };
                out.push(StepGain { gain, sd: (b.max(0.0) / 2.0).sqrt() });
                state = next;
                if let Some(r) = record.as_mut() {
                    r.push(state.variance(&b_label())?);
                }
            }
            Ok(out)
        };
        let mut var_b = Vec::with_capacity(steps);
        let estimator = gains(var_b0, &mut Some(&mut var_b))?;
        let truth = gains(0.0, &mut None)?;
        Ok(Self {
            propagate,
            keep,
            measured,
            truth,
            estimator,
            var_b,
        })
    }

    /// Runs one trajectory and returns the estimate after each step in `targets`.
    fn run(&self, true_b: f64, targets: &[usize], mut rng: ChaCha8Rng) -> Vec<f64> {
        use rand::Rng;
        let n = self.propagate.ncols();
        let mut truth = DVector::zeros(n);
        truth[0] = true_b;
        let mut est = DVector::zeros(n);
        let mut out = Vec::with_capacity(targets.len());
        let mut k = 0;
        // propagate, then shift by the gain times the innovation
        let advance = |m: &DVector<f64>| -> (DVector<f64>, f64) {
            let full = &self.propagate * m;
            let kept = DVector::from_iterator(self.keep.len(), self.keep.iter().map(|&i| full[i]));
            (kept, full[self.measured])
        };
        for &target in targets {
            while k < target {
                let z: f64 = rng.sample(StandardNormal);
                let (t_kept, t_q) = advance(&truth);
                let value = t_q + self.truth[k].sd * z;
                truth = t_kept + &self.truth[k].gain * (value - t_q);
                let (e_kept, e_q) = advance(&est);
                est = e_kept + &self.estimator[k].gain * (value - e_q);
                k += 1;
            }
            out.push(est[0]);
        }
        out
    }
}

/// Ensemble statistics of the estimation error at each output time.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleSummary {
    pub times: Vec<f64>,
    /// Posterior variance, the same for every trajectory.
    pub var_b: Vec<f64>,
    /// Mean of `(mean_B − true_B)²` over trajectories.
    pub mse: Vec<f64>,
    /// Standard error of `mse`.
    pub mse_std_error: Vec<f64>,
    /// Mean of `mean_B − true_B`.
    pub bias: Vec<f64>,
    pub trajectories: usize,
}

/// Runs `trajectories` independent estimations (stream `i` for trajectory
/// `i`) and reduces them in index order.
///
/// Covariances and gains are computed once; each trajectory then only
/// propagates means, drawing outcomes exactly as [`run_trajectory_stream`]
/// does for the same seed and stream.
pub fn run_ensemble(
    params: &MagnetometryParams,
    true_b: f64,
    times: &[f64],
    seed: u64,
    trajectories: usize,
    exec: Execution,
) -> Result<EnsembleSummary> {
    check_grid(times)?;
    if !true_b.is_finite() {
        return Err(invalid(format!("true_B must be finite, got {true_b}")));
    }
    if trajectories == 0 {
        return Err(invalid("need at least one trajectory"));
    }
    let scheme = Scheme::new(params)?;
    let targets = step_indices(times, params.tau);
    let steps = targets.last().copied().unwrap_or(0);
    let schedule = GainSchedule::build(&scheme, params.var_b0, steps)?;
    let runs = map_indexed(exec, trajectories, |i| {
        schedule.run(true_b, &targets, trajectory_rng(seed, i as u64))
    });

    let n = trajectories as f64;
    let mut mse = vec![0.0; times.len()];
    let mut sq = vec![0.0; times.len()];
    let mut bias = vec![0.0; times.len()];
    for run in &runs {
        for (j, m) in run.iter().enumerate() {
            let e = m - true_b;
            bias[j] += e / n;
            mse[j] += e * e / n;
            sq[j] += e.powi(4) / n;
        }
    }
    let mse_std_error = mse
        .iter()
        .zip(&sq)
        .map(|(m, s)| ((s - m * m).max(0.0) / (n - 1.0).max(1.0)).sqrt())
        .collect();
    let var_b = targets
        .iter()
        .map(|&k| if k == 0 { params.var_b0 } else { schedule.var_b[k - 1] })
        .collect();
    Ok(EnsembleSummary {
        times: times.to_vec(),
        var_b,
        mse,
        mse_std_error,
        bias,
        trajectories,
    })
}
