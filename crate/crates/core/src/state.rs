//! Multimode Gaussian states over labeled canonical variables.
//!
//! The covariance matrix uses the convention `γ_ij = 2 Re⟨Δy_i Δy_j⟩`, so the
//! vacuum has `γ = 1` and a single-variable variance is `γ_ii / 2`. Accessors
//! that return a variance or covariance always divide by two.
//!
//! Every operation is pure: it borrows the input state and returns a new one.

use std::collections::HashSet;
use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};

/// Entries of the measured block below this fraction of the block's largest
/// entry are treated as exactly zero rank by the pseudoinverse.
pub const ZERO_RANK_REL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LabelKind {
    Position,
    Momentum,
    /// A classical parameter row (e.g. a magnetic field). It has no conjugate
    /// partner and is skipped by physicality checks.
    Classical,
}

/// Name and kind of one row of a [`GaussianState`].
///
/// Quadratures are named `x_<mode>` / `p_<mode>`; the shared suffix is what
/// pairs a position with its momentum.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct VariableLabel {
    name: String,
    kind: LabelKind,
}

impl VariableLabel {
    pub fn x(mode: &str) -> Self {
        Self {
            name: format!("x_{mode}"),
            kind: LabelKind::Position,
        }
    }

    pub fn p(mode: &str) -> Self {
        Self {
            name: format!("p_{mode}"),
            kind: LabelKind::Momentum,
        }
    }

    pub fn classical(name: &str) -> Self {
        Self {
            name: name.to_string(),
            kind: LabelKind::Classical,
        }
    }

    /// `[x_mode, p_mode]`.
    pub fn mode_pair(mode: &str) -> [Self; 2] {
        [Self::x(mode), Self::p(mode)]
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> LabelKind {
        self.kind
    }

    pub fn is_quantum(&self) -> bool {
        self.kind != LabelKind::Classical
    }

    /// Mode suffix for quadratures, `None` for classical rows.
    pub fn mode(&self) -> Option<&str> {
        match self.kind {
            LabelKind::Classical => None,
            _ => Some(&self.name[2..]),
        }
    }

    /// The conjugate quadrature of the same mode.
    pub fn partner(&self) -> Option<Self> {
        match self.kind {
            LabelKind::Position => Some(Self::p(&self.name[2..])),
            LabelKind::Momentum => Some(Self::x(&self.name[2..])),
            LabelKind::Classical => None,
        }
    }
}

impl fmt::Display for VariableLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// Checks label uniqueness and that every quadrature has its partner.
pub fn validate_labels(labels: &[VariableLabel]) -> Result<()> {
    let mut seen = HashSet::with_capacity(labels.len());
    for label in labels {
        if !seen.insert(label.name()) {
            return Err(Error::DuplicateLabel(label.name.clone()));
        }
    }
    for label in labels {
        if let Some(partner) = label.partner() {
            if !labels.contains(&partner) {
                return Err(Error::MissingPartner(label.name.clone()));
            }
        }
    }
    Ok(())
}

/// A linear map `y ↦ S y` acting on a subset of a state's variables.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMatrix {
    labels: Vec<VariableLabel>,
    matrix: DMatrix<f64>,
}

impl StepMatrix {
    pub fn new(labels: Vec<VariableLabel>, matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() != labels.len() {
            return Err(Error::Dimension(format!(
                "step matrix is {}x{} but acts on {} labels",
                matrix.nrows(),
                matrix.ncols(),
                labels.len()
            )));
        }
        let mut seen = HashSet::new();
        for l in &labels {
            if !seen.insert(l.name()) {
                return Err(Error::DuplicateLabel(l.name.clone()));
            }
        }
        Ok(Self { labels, matrix })
    }

    pub fn identity(labels: Vec<VariableLabel>) -> Result<Self> {
        let n = labels.len();
        Self::new(labels, DMatrix::identity(n, n))
    }

    pub fn labels(&self) -> &[VariableLabel] {
        &self.labels
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Entry `(row, col)` addressed by label.
    pub fn entry(&self, row: &VariableLabel, col: &VariableLabel) -> Option<f64> {
        let i = self.labels.iter().position(|l| l == row)?;
        let j = self.labels.iter().position(|l| l == col)?;
        Some(self.matrix[(i, j)])
    }
}

/// Result of one sampled homodyne measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct HomodyneOutcome {
    pub value: f64,
    pub measured_label: VariableLabel,
    /// Log density of `value` under the pre-measurement marginal.
    pub log_likelihood: f64,
}

/// Diagnostics returned by [`GaussianState::check_physical`].
#[derive(Clone, Debug, PartialEq)]
pub struct PhysicalityReport {
    /// Smallest eigenvalue of `γ + iΩ` on the quantum rows; `None` when the
    /// state has no quadratures.
    pub min_eigenvalue: Option<f64>,
    /// Largest `|γ_ij − γ_ji|`, relative to `max(1, max|γ|)`.
    pub symmetric_defect: f64,
    /// `(mode, 1/√det γ_mode)` for every mode; 1 means pure.
    pub mode_purities: Vec<(String, f64)>,
}

impl PhysicalityReport {
    pub fn is_physical(&self, tol: f64) -> bool {
        self.min_eigenvalue.is_none_or(|e| e >= -tol) && self.symmetric_defect <= tol
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianState {
    labels: Vec<VariableLabel>,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianState {
    /// Zero mean, identity covariance. Classical rows also get a unit diagonal.
    pub fn vacuum(labels: Vec<VariableLabel>) -> Result<Self> {
        validate_labels(&labels)?;
        let n = labels.len();
        Ok(Self {
            labels,
            mean: DVector::zeros(n),
            cov: DMatrix::identity(n, n),
        })
    }

    /// Builds a state from raw parts. `cov` is in the `γ` convention.
    pub fn from_parts(
        labels: Vec<VariableLabel>,
        mean: DVector<f64>,
        cov: DMatrix<f64>,
    ) -> Result<Self> {
        validate_labels(&labels)?;
        let n = labels.len();
        if mean.len() != n || cov.nrows() != n || cov.ncols() != n {
            return Err(Error::Dimension(format!(
                "{n} labels but mean has {} entries and covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        if symmetric_defect(&cov) > 1e-12 {
            return Err(Error::Unphysical("covariance matrix is not symmetric".into()));
        }
        Ok(Self {
            labels,
            mean,
            cov: symmetrized(cov),
        })
    }

    pub fn labels(&self) -> &[VariableLabel] {
        &self.labels
    }

    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// The covariance matrix in the `γ` convention (vacuum = identity).
    pub fn covariance_matrix(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn index_of(&self, label: &VariableLabel) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownLabel(label.name.clone()))
    }

    pub fn contains(&self, label: &VariableLabel) -> bool {
        self.labels.contains(label)
    }

    pub fn mean_of(&self, label: &VariableLabel) -> Result<f64> {
        Ok(self.mean[self.index_of(label)?])
    }

    /// `var(label) = γ_ll / 2`.
    pub fn variance(&self, label: &VariableLabel) -> Result<f64> {
        let i = self.index_of(label)?;
        Ok(self.cov[(i, i)] / 2.0)
    }

    /// `cov(a, b) = γ_ab / 2`.
    pub fn covariance(&self, a: &VariableLabel, b: &VariableLabel) -> Result<f64> {
        let i = self.index_of(a)?;
        let j = self.index_of(b)?;
        Ok(self.cov[(i, j)] / 2.0)
    }

    /// Returns a copy with the mean of `label` replaced.
    pub fn with_mean(&self, label: &VariableLabel, value: f64) -> Result<Self> {
        let i = self.index_of(label)?;
        let mut out = self.clone();
        out.mean[i] = value;
        Ok(out)
    }

    /// Returns a copy with `var(label)` replaced. The row must be uncorrelated
    /// with every other row.
    pub fn with_variance(&self, label: &VariableLabel, variance: f64) -> Result<Self> {
        if !(variance >= 0.0) {
            return Err(invalid(format!("variance of {label} must be >= 0, got {variance}")));
        }
        let i = self.index_of(label)?;
        if (0..self.dim()).any(|j| j != i && self.cov[(i, j)] != 0.0) {
            return Err(invalid(format!(
                "cannot overwrite the variance of correlated row {label}"
            )));
        }
        let mut out = self.clone();
        out.cov[(i, i)] = 2.0 * variance;
        Ok(out)
    }

    /// `m ← S m`, `γ ← S γ Sᵀ` with `S` acting as identity on rows it does not name.
    pub fn apply_linear(&self, step: &StepMatrix) -> Result<Self> {
        let idx = step
            .labels
            .iter()
            .map(|l| self.index_of(l))
            .collect::<Result<Vec<_>>>()?;
        let s = &step.matrix;
        let k = idx.len();
        let n = self.dim();

        let mut mean = self.mean.clone();
        for (r, &i) in idx.iter().enumerate() {
            mean[i] = (0..k).map(|c| s[(r, c)] * self.mean[idx[c]]).sum();
        }

        // Rows first (S γ), then columns ((S γ) Sᵀ).
        let mut cov = self.cov.clone();
        for col in 0..n {
            for (r, &i) in idx.iter().enumerate() {
                cov[(i, col)] = (0..k).map(|c| s[(r, c)] * self.cov[(idx[c], col)]).sum();
            }
        }
        let rows_done = cov.clone();
        for row in 0..n {
            for (r, &j) in idx.iter().enumerate() {
                cov[(row, j)] = (0..k).map(|c| rows_done[(row, idx[c])] * s[(r, c)]).sum();
            }
        }

        Ok(Self {
            labels: self.labels.clone(),
            mean,
            cov: symmetrized(cov),
        })
    }

    /// Appends new rows with the given mean and `γ` block, uncorrelated with
    /// everything already present.
    pub fn attach(
        &self,
        labels: &[VariableLabel],
        mean: &DVector<f64>,
        cov_block: &DMatrix<f64>,
    ) -> Result<Self> {
        let m = labels.len();
        if mean.len() != m || cov_block.nrows() != m || cov_block.ncols() != m {
            return Err(Error::Dimension(format!(
                "attaching {m} labels with a mean of length {} and a {}x{} block",
                mean.len(),
                cov_block.nrows(),
                cov_block.ncols()
            )));
        }
        let mut all = self.labels.clone();
        all.extend_from_slice(labels);
        validate_labels(&all)?;

        let n = self.dim();
        let mut cov = DMatrix::zeros(n + m, n + m);
        cov.view_mut((0, 0), (n, n)).copy_from(&self.cov);
        cov.view_mut((n, n), (m, m)).copy_from(cov_block);
        let mut new_mean = DVector::zeros(n + m);
        new_mean.rows_mut(0, n).copy_from(&self.mean);
        new_mean.rows_mut(n, m).copy_from(mean);
        Ok(Self {
            labels: all,
            mean: new_mean,
            cov: symmetrized(cov),
        })
    }

    pub fn attach_vacuum(&self, labels: &[VariableLabel]) -> Result<Self> {
        let m = labels.len();
        self.attach(labels, &DVector::zeros(m), &DMatrix::identity(m, m))
    }

    /// Attaches one mode in the squeezed vacuum `γ = diag(1/r, r)`.
    ///
    /// `labels` must be the position and momentum of a single mode (either order).
    pub fn attach_squeezed(&self, labels: &[VariableLabel], r: f64) -> Result<Self> {
        if !(r > 0.0) || !r.is_finite() {
            return Err(invalid(format!("squeezing ratio must be positive, got {r}")));
        }
        if labels.len() != 2
            || !labels[0].is_quantum()
            || labels[0].partner().as_ref() != Some(&labels[1])
        {
            return Err(invalid(
                "attach_squeezed takes exactly one (x, p) quadrature pair",
            ));
        }
        let diag = labels
            .iter()
            .map(|l| match l.kind() {
                LabelKind::Position => 1.0 / r,
                _ => r,
            })
            .collect::<Vec<_>>();
        let block = DMatrix::from_diagonal(&DVector::from_vec(diag));
        self.attach(labels, &DVector::zeros(2), &block)
    }

    /// Removes rows and columns. The remaining labels must still pair up.
    pub fn trace_out(&self, labels: &[VariableLabel]) -> Result<Self> {
        let mut drop = Vec::with_capacity(labels.len());
        for l in labels {
            drop.push(self.index_of(l)?);
        }
        let keep: Vec<usize> = (0..self.dim()).filter(|i| !drop.contains(i)).collect();
        let kept_labels: Vec<VariableLabel> = keep.iter().map(|&i| self.labels[i].clone()).collect();
        validate_labels(&kept_labels)?;
        Ok(Self {
            labels: kept_labels,
            mean: DVector::from_iterator(keep.len(), keep.iter().map(|&i| self.mean[i])),
            cov: submatrix(&self.cov, &keep, &keep),
        })
    }

    /// Homodyne detection of `measured` with result `outcome`.
    ///
    /// The measured mode (both quadratures) is removed. With `c` the column of
    /// cross-covariances to the measured slot and `b` its `γ` entry,
    /// `A ← A − c cᵀ / b` and `m ← m + c (outcome − m_q) / b`.
    pub fn condition_homodyne(&self, measured: &VariableLabel, outcome: f64) -> Result<Self> {
        self.condition_inner(measured, outcome).map(|(s, _)| s)
    }

    /// Draws an outcome from the marginal `N(m_q, γ_qq / 2)` and conditions on it.
    pub fn sample_homodyne<R: Rng + ?Sized>(
        &self,
        measured: &VariableLabel,
        rng: &mut R,
    ) -> Result<(HomodyneOutcome, Self)> {
        let q = self.index_of(measured)?;
        let bqq = self.measured_variance_checked(q)?;
        let z: f64 = rng.sample(StandardNormal);
        let value = match bqq {
            Some(b) => self.mean[q] + (b / 2.0).sqrt() * z,
            None => self.mean[q],
        };
        let (state, log_likelihood) = self.condition_inner(measured, value)?;
        Ok((
            HomodyneOutcome {
                value,
                measured_label: measured.clone(),
                log_likelihood,
            },
            state,
        ))
    }

    /// Returns `Some(γ_qq)` when the measured slot has nonzero rank, `None`
    /// when it is treated as exactly zero.
    fn measured_variance_checked(&self, q: usize) -> Result<Option<f64>> {
        let block = self.measurement_block(q)?;
        let scale = block
            .iter()
            .flat_map(|&i| block.iter().map(move |&j| (i, j)))
            .map(|(i, j)| self.cov[(i, j)].abs())
            .fold(0.0, f64::max);
        let bqq = self.cov[(q, q)];
        let tol = ZERO_RANK_REL * scale;
        if !bqq.is_finite() || bqq < -tol {
            return Err(Error::Unphysical(format!(
                "measured variable {} has variance {}",
                self.labels[q],
                bqq / 2.0
            )));
        }
        Ok(if bqq <= tol { None } else { Some(bqq) })
    }

    fn measurement_block(&self, q: usize) -> Result<Vec<usize>> {
        let mut block = vec![q];
        if let Some(partner) = self.labels[q].partner() {
            block.push(self.index_of(&partner)?);
        }
        Ok(block)
    }

    fn condition_inner(&self, measured: &VariableLabel, outcome: f64) -> Result<(Self, f64)> {
        if !outcome.is_finite() {
            return Err(invalid(format!("homodyne outcome must be finite, got {outcome}")));
        }
        let q = self.index_of(measured)?;
        let block = self.measurement_block(q)?;
        let bqq = self.measured_variance_checked(q)?;
        let keep: Vec<usize> = (0..self.dim()).filter(|i| !block.contains(i)).collect();

        let mut cov = submatrix(&self.cov, &keep, &keep);
        let mut mean = DVector::from_iterator(keep.len(), keep.iter().map(|&i| self.mean[i]));
        let residual = outcome - self.mean[q];
        let log_likelihood = match bqq {
            Some(b) => {
                let c = DVector::from_iterator(keep.len(), keep.iter().map(|&i| self.cov[(i, q)]));
                cov -= &c * c.transpose() / b;
                mean += &c * (residual / b);
                let var = b / 2.0;
                -0.5 * (residual * residual / var + (2.0 * std::f64::consts::PI * var).ln())
            }
            None if residual == 0.0 => 0.0,
            None => f64::NEG_INFINITY,
        };
        let labels = keep.iter().map(|&i| self.labels[i].clone()).collect();
        Ok((
            Self {
                labels,
                mean,
                cov: symmetrized(cov),
            },
            log_likelihood,
        ))
    }

    /// Symmetry, positivity of `γ + iΩ` and per-mode purity.
    pub fn check_physical(&self) -> PhysicalityReport {
        let quantum: Vec<usize> = (0..self.dim()).filter(|&i| self.labels[i].is_quantum()).collect();
        let min_eigenvalue = if quantum.is_empty() {
            None
        } else {
            Some(min_eig_with_symplectic_form(self, &quantum))
        };

        let mut mode_purities = Vec::new();
        for (i, l) in self.labels.iter().enumerate() {
            if l.kind() != LabelKind::Position {
                continue;
            }
            let Some(j) = l.partner().and_then(|p| self.labels.iter().position(|x| *x == p)) else {
                continue;
            };
            let det = self.cov[(i, i)] * self.cov[(j, j)] - self.cov[(i, j)] * self.cov[(j, i)];
            let purity = if det > 0.0 { 1.0 / det.sqrt() } else { f64::INFINITY };
            mode_purities.push((l.mode().unwrap_or_default().to_string(), purity));
        }

        PhysicalityReport {
            min_eigenvalue,
            symmetric_defect: symmetric_defect(&self.cov),
            mode_purities,
        }
    }
}

// Smallest eigenvalue of the Hermitian matrix γ + iΩ through its real embedding
// [[X, −Y], [Y, X]], whose spectrum is that of X + iY with every value doubled.
fn min_eig_with_symplectic_form(state: &GaussianState, quantum: &[usize]) -> f64 {
    let n = quantum.len();
    let x = submatrix(&state.cov, quantum, quantum);
    let mut y = DMatrix::zeros(n, n);
    for (a, &i) in quantum.iter().enumerate() {
        if state.labels[i].kind() != LabelKind::Position {
            continue;
        }
        let partner = state.labels[i].partner().expect("position has a partner");
        let b = quantum
            .iter()
            .position(|&j| state.labels[j] == partner)
            .expect("validated states pair every quadrature");
        y[(a, b)] = 1.0;
        y[(b, a)] = -1.0;
    }
    let mut big = DMatrix::zeros(2 * n, 2 * n);
    big.view_mut((0, 0), (n, n)).copy_from(&x);
    big.view_mut((n, n), (n, n)).copy_from(&x);
    big.view_mut((0, n), (n, n)).copy_from(&(-&y));
    big.view_mut((n, 0), (n, n)).copy_from(&y);
    SymmetricEigen::new(big).eigenvalues.min()
}

pub(crate) fn submatrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |r, c| m[(rows[r], cols[c])])
}

pub(crate) fn symmetrized(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

pub(crate) fn symmetric_defect(m: &DMatrix<f64>) -> f64 {
    let scale = m.iter().fold(1.0_f64, |acc, v| acc.max(v.abs()));
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst / scale
}
