//! Dense open-quantum-system engine for small Hilbert spaces (d ≤ 8).
//!
//! Builds Liouvillian superoperators from a Hamiltonian and a set of collapse
//! operators,
//!
//!   dρ/dt = −i·2π[H, ρ] + Σ_k ( C_k ρ C_k† − ½{C_k†C_k, ρ} ),
//!
//! and provides time evolution, steady states and expectation values.
//!
//! # Unit conventions
//!
//! * Hamiltonian entries are ordinary frequencies in MHz; the factor 2π that
//!   converts them to angular rates (rad/µs) is applied inside [`liouvillian`].
//! * Collapse operator amplitudes carry the square root of their rate, in
//!   √(µs⁻¹); no 2π is applied to the dissipator.
//! * Time is in µs everywhere.
//!
//! # Vectorization convention
//!
//! States are vectorized by column stacking, vec(ρ)[i + d·j] = ρ_ij, so that
//! vec(AρB) = (Báµ€ ⊗ A)·vec(ρ). This matches nalgebra's column-major storage:
//! the raw slice of a `DMatrix` *is* its column-stacked vectorization.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use std::f64::consts::PI;
use thiserror::Error;

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

/// Largest supported Hilbert-space dimension.
pub const MAX_DIM: usize = 8;

/// Segments shorter than this (1 ns) are propagated by a dense matrix
/// exponential instead of the adaptive integrator.
pub const EXPM_FALLBACK_SPAN: f64 = 1e-3;

/// Per-step integrator tolerance (absolute and relative).
const STEP_TOL: f64 = 1e-9;

/// Abort threshold for the Hermiticity/trace drift guard at output points.
const DRIFT_GUARD: f64 = 1e-6;

/// Eigenvalue floor for states produced by numerical evolution.
const EVOLVE_EIG_FLOOR: f64 = -1e-8;

#[derive(Debug, Error)]
pub enum QdynError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("Hilbert-space dimension {0} exceeds the supported maximum {MAX_DIM}")]
    DimensionTooLarge(usize),
    #[error("matrix entries must be finite")]
    NonFinite,
    #[error("operator is not Hermitian (max deviation {0:.3e})")]
    NotHermitian(f64),
    #[error("invalid density matrix: {0}")]
    InvalidState(String),
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("integrator step size underflow at t = {t} µs (h = {h:.3e})")]
    StepUnderflow { t: f64, h: f64 },
    #[error("state drift {0:.3e} exceeds the guard tolerance {DRIFT_GUARD:.0e}")]
    DriftGuard(f64),
    #[error("steady state is not unique (kernel dimension {0})")]
    DegenerateSteadyState(usize),
    #[error("generator kernel contains no trace-one element")]
    TracelessKernel,
}

/// |i⟩⟨j| in a d-dimensional space.
pub fn ketbra(dim: usize, i: usize, j: usize) -> CMatrix {
    let mut m = CMatrix::zeros(dim, dim);
    m[(i, j)] = C64::new(1.0, 0.0);
    m
}

fn check_square(m: &CMatrix) -> Result<usize, QdynError> {
    if m.nrows() != m.ncols() {
        return Err(QdynError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(QdynError::NonFinite);
    }
    Ok(m.nrows())
}

/// Largest entrywise deviation from Hermiticity, max |M − M†|.
pub fn hermiticity_defect(m: &CMatrix) -> f64 {
    let adj = m.adjoint();
    (m - adj).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn check_hermitian(m: &CMatrix, tol: f64) -> Result<(), QdynError> {
    let defect = hermiticity_defect(m);
    if defect > tol {
        return Err(QdynError::NotHermitian(defect));
    }
    Ok(())
}

fn trace(m: &CMatrix) -> C64 {
    m.diagonal().iter().sum()
}

/// A d×d density matrix: Hermitian, unit trace, positive semidefinite
/// (within the tolerances documented on [`DensityMatrix::new`]).
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    mat: CMatrix,
}

impl DensityMatrix {
    /// Validate and wrap a matrix as a quantum state.
    ///
    /// Requires Hermiticity within 1e-12 absolute, unit trace within 1e-10
    /// and eigenvalues ≥ −1e-10.
    pub fn new(mat: CMatrix) -> Result<Self, QdynError> {
        Self::with_tolerances(mat, 1e-12, 1e-10, -1e-10)
    }

    fn with_tolerances(
        mat: CMatrix,
        herm_tol: f64,
        trace_tol: f64,
        eig_floor: f64,
    ) -> Result<Self, QdynError> {
        let dim = check_square(&mat)?;
        if dim == 0 {
            return Err(QdynError::InvalidState("dimension must be ≥ 1".into()));
        }
        if dim > MAX_DIM {
            return Err(QdynError::DimensionTooLarge(dim));
        }
        let defect = hermiticity_defect(&mat);
        if defect > herm_tol {
            return Err(QdynError::InvalidState(format!(
                "not Hermitian (deviation {defect:.3e})"
            )));
        }
        let tr = trace(&mat);
        if (tr - C64::new(1.0, 0.0)).norm() > trace_tol {
            return Err(QdynError::InvalidState(format!(
                "trace {tr} is not 1 within {trace_tol:.0e}"
            )));
        }
        // Eigenvalues of the Hermitian part; the defect above is already small.
        let herm = (&mat + mat.adjoint()) * C64::new(0.5, 0.0);
        let min_eig = herm
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(f64::INFINITY, |a, &b| a.min(b));
        if min_eig < eig_floor {
            return Err(QdynError::InvalidState(format!(
                "negative eigenvalue {min_eig:.3e}"
            )));
        }
        Ok(Self { mat })
    }

    /// Pure basis state |k⟩⟨k|.
    pub fn pure(dim: usize, k: usize) -> Self {
        assert!(k < dim, "basis index out of range");
        Self {
            mat: ketbra(dim, k, k),
        }
    }

    /// Maximally mixed state I/d.
    pub fn maximally_mixed(dim: usize) -> Self {
        Self {
            mat: CMatrix::identity(dim, dim) * C64::new(1.0 / dim as f64, 0.0),
        }
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.mat
    }

    /// Population of basis state k, Re ρ_kk.
    pub fn population(&self, k: usize) -> f64 {
        self.mat[(k, k)].re
    }

    pub fn populations(&self) -> Vec<f64> {
        (0..self.dim()).map(|k| self.population(k)).collect()
    }

    /// Column-stacked vectorization.
    pub fn to_vec(&self) -> CVector {
        CVector::from_column_slice(self.mat.as_slice())
    }

    /// Reassemble a state from evolved data: re-symmetrize, renormalize the
    /// trace, and abort if the correction exceeds the drift guard.
    pub(crate) fn from_evolution(mat: CMatrix) -> Result<Self, QdynError> {
        let defect = hermiticity_defect(&mat);
        let tr = trace(&mat);
        let drift = defect.max((tr - C64::new(1.0, 0.0)).norm());
        if drift > DRIFT_GUARD {
            return Err(QdynError::DriftGuard(drift));
        }
        let herm = (&mat + mat.adjoint()) * C64::new(0.5, 0.0);
        let tr = trace(&herm);
        let normalized = herm * (C64::new(1.0, 0.0) / tr);
        Self::with_tolerances(normalized, 1e-10, 1e-10, EVOLVE_EIG_FLOOR)
    }
}

/// Generator of the vectorized master equation, vec(dρ/dt) = L·vec(ρ).
///
/// Acts on d²-dimensional column-stacked states; entries are rates in rad/µs.
#[derive(Debug, Clone, PartialEq)]
pub struct Superoperator {
    dim: usize,
    mat: CMatrix,
}

impl Superoperator {
    /// Wrap a d²×d² generator matrix, checking the trace-preservation
    /// left-null-vector property.
    pub fn from_matrix(dim: usize, mat: CMatrix) -> Result<Self, QdynError> {
        if dim == 0 {
            return Err(QdynError::InvalidState("dimension must be ≥ 1".into()));
        }
        if dim > MAX_DIM {
            return Err(QdynError::DimensionTooLarge(dim));
        }
        let d2 = check_square(&mat)?;
        if d2 != dim * dim {
            return Err(QdynError::DimensionMismatch {
                expected: dim * dim,
                got: d2,
            });
        }
        let sup = Self { dim, mat };
        let defect = sup.trace_preservation_defect();
        let scale = sup.mat.iter().map(|z| z.norm()).fold(1.0, f64::max);
        if defect > 1e-10 * scale {
            return Err(QdynError::InvalidState(format!(
                "generator is not trace preserving (defect {defect:.3e})"
            )));
        }
        Ok(sup)
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            mat: CMatrix::zeros(dim * dim, dim * dim),
        }
    }

    /// Hilbert-space dimension d (the matrix itself is d²×d²).
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.mat
    }

    /// Largest entry of the trace functional applied from the left,
    /// max_j |Σ_i vec(I)_i L_ij|. Zero for a trace-preserving generator.
    pub fn trace_preservation_defect(&self) -> f64 {
        let d = self.dim;
        let mut worst: f64 = 0.0;
        for j in 0..d * d {
            let mut acc = C64::new(0.0, 0.0);
            for i in 0..d {
                acc += self.mat[(i + d * i, j)];
            }
            worst = worst.max(acc.norm());
        }
        worst
    }

    /// Dense propagator exp(L·t).
    pub fn propagator(&self, t: f64) -> CMatrix {
        (&self.mat * C64::new(t, 0.0)).exp()
    }

    /// Apply the generator to a (matrix-form) state: unvec(L·vec(ρ)).
    pub fn apply(&self, rho: &CMatrix) -> CMatrix {
        let v = CVector::from_column_slice(rho.as_slice());
        let w = &self.mat * v;
        CMatrix::from_column_slice(self.dim, self.dim, w.as_slice())
    }
}

/// Uniform time grid over [t0, t1] in µs.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub t0: f64,
    pub t1: f64,
    pub n_points: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, n_points: usize) -> Result<Self, QdynError> {
        let grid = Self { t0, t1, n_points };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<(), QdynError> {
        if !self.t0.is_finite() || !self.t1.is_finite() {
            return Err(QdynError::InvalidGrid("endpoints must be finite".into()));
        }
        if self.t1 <= self.t0 {
            return Err(QdynError::InvalidGrid(format!(
                "t1 = {} must exceed t0 = {}",
                self.t1, self.t0
            )));
        }
        if self.n_points < 2 {
            return Err(QdynError::InvalidGrid("need at least 2 points".into()));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        (self.t1 - self.t0) / (self.n_points - 1) as f64
    }

    pub fn times(&self) -> Vec<f64> {
        let dt = self.dt();
        (0..self.n_points)
            .map(|k| self.t0 + k as f64 * dt)
            .collect()
    }
}

/// Build the Lindblad generator from a Hamiltonian (MHz) and collapse
/// operators (amplitudes in √(µs⁻¹)).
///
/// The commutator part is scaled by 2π so the returned generator is in
/// rad/µs throughout.
pub fn liouvillian(h: &CMatrix, collapse_ops: &[CMatrix]) -> Result<Superoperator, QdynError> {
    let d = check_square(h)?;
    if d == 0 {
        return Err(QdynError::InvalidState("dimension must be ≥ 1".into()));
    }
    if d > MAX_DIM {
        return Err(QdynError::DimensionTooLarge(d));
    }
    check_hermitian(h, 1e-10)?;
    for c in collapse_ops {
        let dc = check_square(c)?;
        if dc != d {
            return Err(QdynError::DimensionMismatch {
                expected: d,
                got: dc,
            });
        }
    }

    let id = CMatrix::identity(d, d);
    // vec(Hρ − ρH) = (I ⊗ H − Hᵀ ⊗ I) vec(ρ), column stacking.
    let commutator = id.kronecker(h) - h.transpose().kronecker(&id);
    let mut mat = commutator * C64::new(0.0, -2.0 * PI);
    for c in collapse_ops {
        let cdc = c.adjoint() * c;
        mat += c.conjugate().kronecker(c);
        mat -= (id.kronecker(&cdc) + cdc.transpose().kronecker(&id)) * C64::new(0.5, 0.0);
    }
    Superoperator::from_matrix(d, mat)
}

// Dormand-Prince 5(4) coefficients. The stage times are not needed: the
// right-hand side L·y is autonomous.
const DP_A: [&[f64]; 6] = [
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
    ],
    &[
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
    ],
    &[
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
// y5 − y4 error weights (b5 − b4).
const DP_E: [f64; 7] = [
    35.0 / 384.0 - 5179.0 / 57600.0,
    0.0,
    500.0 / 1113.0 - 7571.0 / 16695.0,
    125.0 / 192.0 - 393.0 / 640.0,
    -2187.0 / 6784.0 + 92097.0 / 339200.0,
    11.0 / 84.0 - 187.0 / 2100.0,
    -1.0 / 40.0,
];

/// Integrate y' = L·y over a span with the adaptive embedded Runge-Kutta
/// 4(5) pair, per-step tolerance `STEP_TOL`. `y` is advanced in place.
pub(crate) fn integrate_span(l: &CMatrix, y: &mut CVector, span: f64) -> Result<(), QdynError> {
    if span == 0.0 {
        return Ok(());
    }
    debug_assert!(span > 0.0);
    let n = y.len();
    let mut t = 0.0_f64;
    let mut h = span;
    let h_min = span * 1e-14;
    let mut k: Vec<CVector> = Vec::with_capacity(7);
    k.push(l * &*y); // FSAL: k1, reused from the previous step's k7
    loop {
        if t >= span {
            return Ok(());
        }
        h = h.min(span - t);
        // Stages 2..7.
        k.truncate(1);
        for (i, row) in DP_A.iter().enumerate() {
            let _ = i;
            let mut acc = y.clone();
            for (j, &a) in row.iter().enumerate() {
                if a != 0.0 {
                    acc.axpy(C64::new(a * h, 0.0), &k[j], C64::new(1.0, 0.0));
                }
            }
            k.push(l * acc);
        }
        // 5th-order solution shares coefficients with the last stage row.
        let mut y_new = y.clone();
        for (j, &b) in DP_A[5].iter().enumerate() {
            if b != 0.0 {
                y_new.axpy(C64::new(b * h, 0.0), &k[j], C64::new(1.0, 0.0));
            }
        }
        // Embedded error estimate.
        let mut err: f64 = 0.0;
        for idx in 0..n {
            let mut e = C64::new(0.0, 0.0);
            for (j, &w) in DP_E.iter().enumerate() {
                if w != 0.0 {
                    e += k[j][idx] * C64::new(w * h, 0.0);
                }
            }
            let sc = STEP_TOL + STEP_TOL * y[idx].norm().max(y_new[idx].norm());
            err = err.max(e.norm() / sc);
        }
        if err <= 1.0 {
            t += h;
            *y = y_new;
            let k7 = k.pop().expect("seven stages");
            k.clear();
            k.push(k7);
        }
        let factor = if err > 0.0 {
            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
        } else {
            5.0
        };
        h *= factor;
        if h < h_min {
            return Err(QdynError::StepUnderflow { t, h });
        }
    }
}

/// Advance a vectorized state by `span` µs under a constant generator.
///
/// Very short spans (< 1 ns) use the matrix exponential directly. So do
/// very stiff spans, where ||L||·span is large enough that an explicit
/// integrator would be stability-limited to thousands of steps while the
/// exponential of the constant generator is exact. Everything in between
/// uses the adaptive integrator.
pub(crate) fn propagate_vec(
    l: &Superoperator,
    y: &mut CVector,
    span: f64,
) -> Result<(), QdynError> {
    if span == 0.0 {
        return Ok(());
    }
    let stiffness = span * l.mat.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if span < EXPM_FALLBACK_SPAN || stiffness > 400.0 {
        let p = l.propagator(span);
        *y = p * &*y;
    } else {
        integrate_span(l.matrix(), y, span)?;
    }
    Ok(())
}

/// Evolve a state under a constant generator, returning the trajectory at
/// every grid point (the first entry is ρ0 itself).
///
/// Each output state is re-symmetrized and trace-renormalized; the run
/// aborts if that correction ever exceeds 1e-6.
pub fn evolve(
    rho0: &DensityMatrix,
    l: &Superoperator,
    grid: &TimeGrid,
) -> Result<Vec<DensityMatrix>, QdynError> {
    grid.validate()?;
    if rho0.dim() != l.dim() {
        return Err(QdynError::DimensionMismatch {
            expected: l.dim(),
            got: rho0.dim(),
        });
    }
    // The generator is constant, so only elapsed time matters; a nonzero
    // grid origin merely relabels the axis.
    let d = rho0.dim();
    let dt = grid.dt();
    let mut y = rho0.to_vec();
    let mut out = Vec::with_capacity(grid.n_points);
    out.push(rho0.clone());
    let short_steps = dt < EXPM_FALLBACK_SPAN;
    let step_propagator = if short_steps {
        Some(l.propagator(dt))
    } else {
        None
    };
    for _ in 1..grid.n_points {
        match &step_propagator {
            Some(p) => y = p * y,
            None => integrate_span(l.matrix(), &mut y, dt)?,
        }
        let mat = CMatrix::from_column_slice(d, d, y.as_slice());
        let state = DensityMatrix::from_evolution(mat)?;
        y = state.to_vec();
        out.push(state);
    }
    Ok(out)
}

/// Unique steady state of a trace-preserving generator, found from the
/// kernel of L via singular value decomposition.
///
/// Fails if the kernel is not one-dimensional (e.g. L = 0) or contains no
/// trace-one element.
pub fn steady_state(l: &Superoperator) -> Result<DensityMatrix, QdynError> {
    let d = l.dim();
    let d2 = d * d;
    let svd = l.matrix().clone().svd(false, true);
    let v_t = svd.v_t.as_ref().expect("requested V^H");
    let max_sv = svd.singular_values.iter().fold(0.0_f64, |a, &b| a.max(b));
    let tol = max_sv * 1e-10;
    let null_indices: Vec<usize> = (0..d2).filter(|&i| svd.singular_values[i] <= tol).collect();
    if null_indices.len() != 1 {
        return Err(QdynError::DegenerateSteadyState(null_indices.len()));
    }
    // Rows of V^H are conjugated right singular vectors.
    let row = v_t.row(null_indices[0]);
    let kernel_vec: CVector = row.adjoint();
    let raw = CMatrix::from_column_slice(d, d, kernel_vec.as_slice());
    let tr = trace(&raw);
    if tr.norm() < 1e-10 {
        return Err(QdynError::TracelessKernel);
    }
    let scaled = raw * (C64::new(1.0, 0.0) / tr);
    let herm = (&scaled + scaled.adjoint()) * C64::new(0.5, 0.0);
    let state = DensityMatrix::with_tolerances(herm, 1e-10, 1e-10, EVOLVE_EIG_FLOOR)?;
    // Residual check on the returned state.
    let residual = (l.matrix() * state.to_vec())
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max);
    if residual > 1e-10 * max_sv.max(1.0) {
        return Err(QdynError::InvalidState(format!(
            "steady-state residual {residual:.3e} too large"
        )));
    }
    Ok(state)
}

/// Expectation value Tr(obs·ρ) of a Hermitian observable. The imaginary
/// part (below 1e-10 for valid inputs) is discarded.
pub fn expect(obs: &CMatrix, rho: &DensityMatrix) -> Result<f64, QdynError> {
    let d = check_square(obs)?;
    if d != rho.dim() {
        return Err(QdynError::DimensionMismatch {
            expected: rho.dim(),
            got: d,
        });
    }
    check_hermitian(obs, 1e-10)?;
    let mut acc = C64::new(0.0, 0.0);
    for i in 0..d {
        for j in 0..d {
            acc += obs[(i, j)] * rho.matrix()[(j, i)];
        }
    }
    Ok(acc.re)
}
