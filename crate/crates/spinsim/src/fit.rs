//! Nonlinear least-squares fitting for the trace shapes produced by the
//! protocols in this crate: Lorentzian lines, exponential and stretched
//! exponential decays, damped sinusoids, power laws and lines through the
//! origin.
//!
//! [`lm_fit`] is a damped (Levenberg-Marquardt style) normal-equation
//! minimizer with analytic jacobians, simple box bounds and covariance
//! based 1σ uncertainties. [`initial_guess`] provides per-model starting
//! points good enough to fit the simulator's outputs unattended.

mod lm;
mod models;

pub use lm::lm_fit;
pub use models::Model;

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("input length mismatch: x has {x}, y has {y}")]
    LengthMismatch { x: usize, y: usize },
    #[error("{model} needs at least {needed} points, got {got}")]
    NotEnoughPoints {
        model: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("inputs must be finite")]
    NonFinite,
    #[error("{model} is undefined at x = {x}")]
    OutOfDomain { model: &'static str, x: f64 },
    #[error("sigma values must be positive and finite")]
    InvalidSigma,
    #[error("bounds must satisfy lo ≤ hi for each of the {expected} parameters")]
    BadBounds { expected: usize },
    #[error("parameter {index} init {value} lies outside [{lo}, {hi}]")]
    InitOutOfBounds {
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("normal matrix is singular: parameters are degenerate for this data")]
    ParameterDegeneracy,
}

/// A fit model plus per-parameter box bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub model: Model,
    pub bounds: Vec<(f64, f64)>,
}

impl ModelSpec {
    /// Model with its default bounds (shape parameters positive, β in
    /// [0.3, 3], everything else unconstrained).
    pub fn new(model: Model) -> Self {
        Self {
            bounds: model.default_bounds(),
            model,
        }
    }

    pub fn with_bounds(model: Model, bounds: Vec<(f64, f64)>) -> Result<Self, FitError> {
        if bounds.len() != model.n_params() || bounds.iter().any(|(lo, hi)| !(lo <= hi)) {
            return Err(FitError::BadBounds {
                expected: model.n_params(),
            });
        }
        Ok(Self { model, bounds })
    }

    pub fn n_params(&self) -> usize {
        self.model.n_params()
    }

    /// Clamp a parameter vector into the box bounds, in place.
    pub fn clamp(&self, params: &mut [f64]) {
        for (p, (lo, hi)) in params.iter_mut().zip(&self.bounds) {
            *p = p.clamp(*lo, *hi);
        }
    }

    fn check_init(&self, init: &[f64]) -> Result<(), FitError> {
        for (index, (&value, &(lo, hi))) in init.iter().zip(&self.bounds).enumerate() {
            if !value.is_finite() || value < lo || value > hi {
                return Err(FitError::InitOutOfBounds {
                    index,
                    value,
                    lo,
                    hi,
                });
            }
        }
        Ok(())
    }
}

/// Best-fit parameters with covariance-based uncertainties.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub chi2_reduced: f64,
    pub n_iter: usize,
    pub converged: bool,
}

impl FitResult {
    /// 1σ uncertainties, the square roots of the covariance diagonal.
    pub fn uncertainties(&self) -> Vec<f64> {
        self.covariance
            .diagonal()
            .iter()
            .map(|v| v.max(0.0).sqrt())
            .collect()
    }
}

fn check_xy(model: &Model, x: &[f64], y: &[f64]) -> Result<(), FitError> {
    if x.len() != y.len() {
        return Err(FitError::LengthMismatch {
            x: x.len(),
            y: y.len(),
        });
    }
    if x.len() < model.n_params() {
        return Err(FitError::NotEnoughPoints {
            model: model.name(),
            needed: model.n_params(),
            got: x.len(),
        });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(FitError::NonFinite);
    }
    for &xi in x {
        model.check_domain(xi)?;
    }
    Ok(())
}

/// Evaluate a model over a grid.
pub fn eval_model(spec: &ModelSpec, params: &[f64], x: &[f64]) -> Result<Vec<f64>, FitError> {
    assert_eq!(params.len(), spec.n_params(), "parameter count mismatch");
    x.iter().map(|&xi| spec.model.eval_at(params, xi)).collect()
}

/// Analytic jacobian ∂y_i/∂θ_k over a grid (rows follow x).
pub fn jacobian(spec: &ModelSpec, params: &[f64], x: &[f64]) -> Result<DMatrix<f64>, FitError> {
    assert_eq!(params.len(), spec.n_params(), "parameter count mismatch");
    let p = spec.n_params();
    let mut j = DMatrix::zeros(x.len(), p);
    let mut row = vec![0.0; p];
    for (i, &xi) in x.iter().enumerate() {
        spec.model.gradient_at(params, xi, &mut row)?;
        for k in 0..p {
            j[(i, k)] = row[k];
        }
    }
    Ok(j)
}

/// Per-model heuristic starting parameters.
pub fn initial_guess(spec: &ModelSpec, x: &[f64], y: &[f64]) -> Result<Vec<f64>, FitError> {
    check_xy(&spec.model, x, y)?;
    let y_min = y.iter().cloned().fold(f64::INFINITY, f64::min);
    let y_max = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let y_scale = y_max.abs().max(y_min.abs()).max(1e-30);
    if y_max - y_min <= 1e-12 * y_scale {
        return Err(FitError::DegenerateData("y is constant".into()));
    }
    let mut guess = match spec.model {
        Model::Lorentzian => lorentzian_guess(x, y),
        Model::ExpDecay => {
            let (a, t, c) = exp_decay_guess(x, y);
            vec![a, t, c]
        }
        Model::DampedSin => damped_sin_guess(x, y),
        Model::StretchedExp => {
            let (a, t, c) = exp_decay_guess(x, y);
            vec![a, t, 1.0, c]
        }
        Model::PowerLaw => power_law_guess(x, y)?,
        Model::LineThroughOrigin => {
            let sxx: f64 = x.iter().map(|v| v * v).sum();
            if sxx <= 0.0 {
                return Err(FitError::DegenerateData("all x are zero".into()));
            }
            let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
            vec![sxy / sxx]
        }
    };
    spec.clamp(&mut guess);
    Ok(guess)
}

fn lorentzian_guess(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let baseline = 0.5 * (y[0] + y[n - 1]);
    let (peak_idx, _) = y
        .iter()
        .enumerate()
        .max_by(|a, b| {
            (a.1 - baseline)
                .abs()
                .partial_cmp(&(b.1 - baseline).abs())
                .unwrap()
        })
        .unwrap();
    let amplitude = y[peak_idx] - baseline;
    let f0 = x[peak_idx];
    let span = x[n - 1] - x[0];
    // Half-max crossings, linearly interpolated on each side of the peak.
    let half = 0.5;
    let dev = |i: usize| (y[i] - baseline) / amplitude;
    let mut left = None;
    for i in (0..peak_idx).rev() {
        if dev(i) <= half {
            let frac = (half - dev(i)) / (dev(i + 1) - dev(i));
            left = Some(x[i] + frac * (x[i + 1] - x[i]));
            break;
        }
    }
    let mut right = None;
    for i in peak_idx + 1..n {
        if dev(i) <= half {
            let frac = (dev(i - 1) - half) / (dev(i - 1) - dev(i));
            right = Some(x[i - 1] + frac * (x[i] - x[i - 1]));
            break;
        }
    }
    let fwhm = match (left, right) {
        (Some(l), Some(r)) => r - l,
        (Some(l), None) => 2.0 * (f0 - l),
        (None, Some(r)) => 2.0 * (r - f0),
        (None, None) => span / 4.0,
    };
    vec![amplitude, f0, fwhm.abs().max(span * 1e-3), baseline]
}

/// Estimate (a, T, c) for y = a·exp(−x/T) + c by log-linear regression on
/// the baseline-subtracted data.
fn exp_decay_guess(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len();
    let span = (x[n - 1] - x[0]).max(1e-30);
    let c = y[n - 1];
    let a = y[0] - c;
    if a == 0.0 {
        return (y[0] - y[n - 1], span, c);
    }
    let mut sx = 0.0;
    let mut sz = 0.0;
    let mut sxx = 0.0;
    let mut sxz = 0.0;
    let mut count = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        let z = (yi - c) / a;
        if z > 1e-6 {
            let lz = z.ln();
            sx += xi;
            sz += lz;
            sxx += xi * xi;
            sxz += xi * lz;
            count += 1.0;
        }
    }
    let t = if count >= 2.0 {
        let denom = count * sxx - sx * sx;
        let slope = if denom.abs() > 0.0 {
            (count * sxz - sx * sz) / denom
        } else {
            0.0
        };
        if slope < 0.0 {
            -1.0 / slope
        } else {
            span
        }
    } else {
        span
    };
    (a, t.clamp(span * 1e-4, span * 1e4), c)
}

/// Estimate (a, T, ω, φ0, c) for a damped sinusoid: dominant discrete
/// frequency bin for ω, a sin/cos least-squares solve for amplitude and
/// phase, and a two-half RMS ratio for the envelope time.
fn damped_sin_guess(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let span = (x[n - 1] - x[0]).max(1e-30);
    let mean = y.iter().sum::<f64>() / n as f64;
    let detrended: Vec<f64> = y.iter().map(|v| v - mean).collect();
    let mut best = (0.0f64, 1.0f64);
    let max_k = (n / 2).max(1);
    for k in 1..=max_k {
        let omega = 2.0 * std::f64::consts::PI * k as f64 / span;
        let (mut re, mut im) = (0.0, 0.0);
        for (&xi, &di) in x.iter().zip(&detrended) {
            re += di * (omega * xi).cos();
            im += di * (omega * xi).sin();
        }
        let power = re * re + im * im;
        if power > best.0 {
            best = (power, omega);
        }
    }
    let omega = best.1;
    // Least squares for p·sin(ωx) + q·cos(ωx).
    let (mut ss, mut cc, mut sc, mut ys, mut yc) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&xi, &di) in x.iter().zip(&detrended) {
        let s = (omega * xi).sin();
        let co = (omega * xi).cos();
        ss += s * s;
        cc += co * co;
        sc += s * co;
        ys += di * s;
        yc += di * co;
    }
    let det = ss * cc - sc * sc;
    let (p, q) = if det.abs() > 1e-12 {
        ((ys * cc - yc * sc) / det, (yc * ss - ys * sc) / det)
    } else {
        (detrended.iter().fold(0.0f64, |m, v| m.max(v.abs())), 0.0)
    };
    let amplitude = p.hypot(q).max(1e-12);
    let phi0 = q.atan2(p).rem_euclid(2.0 * std::f64::consts::PI);
    // Envelope time from the RMS ratio of the two halves.
    let half = n / 2;
    let rms = |s: &[f64]| (s.iter().map(|v| v * v).sum::<f64>() / s.len() as f64).sqrt();
    let r1 = rms(&detrended[..half.max(1)]);
    let r2 = rms(&detrended[half.min(n - 1)..]);
    let t = if r2 > 0.0 && r1 > r2 {
        (span / 2.0) / (r1 / r2).ln()
    } else {
        10.0 * span
    };
    vec![amplitude, t, omega, phi0, mean]
}

fn power_law_guess(x: &[f64], y: &[f64]) -> Result<Vec<f64>, FitError> {
    let sign = if y.iter().filter(|v| **v < 0.0).count() * 2 > y.len() {
        -1.0
    } else {
        1.0
    };
    let mut pts = Vec::with_capacity(x.len());
    for (&xi, &yi) in x.iter().zip(y) {
        let v = sign * yi;
        if v > 0.0 {
            pts.push((xi.ln(), v.ln()));
        }
    }
    if pts.len() < 2 {
        return Err(FitError::DegenerateData(
            "power-law data must have a consistent sign".into(),
        ));
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-12 {
        return Err(FitError::DegenerateData("all x are equal".into()));
    }
    let gamma = (n * sxy - sx * sy) / denom;
    let intercept = (sy - gamma * sx) / n;
    Ok(vec![sign * intercept.exp(), gamma])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn eval_model_anchor_values() {
        // Lorentzian at the peak is A + c.
        let spec = ModelSpec::new(Model::Lorentzian);
        let y = eval_model(&spec, &[2.0, 5.0, 1.0, 0.25], &[5.0]).unwrap();
        assert_abs_diff_eq!(y[0], 2.25, epsilon = 1e-12);
        // Stretched exponential at t = T is a/e + c regardless of β.
        let spec = ModelSpec::new(Model::StretchedExp);
        for beta in [0.5, 1.0, 2.3] {
            let y = eval_model(&spec, &[3.0, 2.0, beta, 0.5], &[2.0]).unwrap();
            assert_abs_diff_eq!(y[0], 3.0 * (-1.0f64).exp() + 0.5, epsilon = 1e-12);
        }
        // Damped sinusoid with zero amplitude is the constant offset.
        let spec = ModelSpec::new(Model::DampedSin);
        let y = eval_model(&spec, &[0.0, 1.0, 10.0, 0.3, 0.7], &[0.0, 1.3, 2.9]).unwrap();
        for v in y {
            assert_abs_diff_eq!(v, 0.7, epsilon = 1e-12);
        }
    }

    #[test]
    fn power_law_domain_error() {
        let spec = ModelSpec::new(Model::PowerLaw);
        assert!(matches!(
            eval_model(&spec, &[1.0, 0.5], &[0.0]),
            Err(FitError::OutOfDomain { .. })
        ));
    }

    #[test]
    fn jacobian_simple_entries() {
        // ExpDecay ∂y/∂a = exp(−x/T).
        let spec = ModelSpec::new(Model::ExpDecay);
        let j = jacobian(&spec, &[2.0, 4.0, 0.1], &[0.0, 4.0]).unwrap();
        assert_abs_diff_eq!(j[(0, 0)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(j[(1, 0)], (-1.0f64).exp(), epsilon = 1e-12);
        // PowerLaw ∂y/∂γ at x = 1 is zero (ln 1 = 0).
        let spec = ModelSpec::new(Model::PowerLaw);
        let j = jacobian(&spec, &[2.0, 0.66], &[1.0]).unwrap();
        assert_abs_diff_eq!(j[(0, 1)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn jacobian_matches_finite_differences_on_random_draws() {
        // 100 random (params, x) draws per model, relative tolerance 1e-5.
        let mut rng = Lcg::new(0x5eed);
        for model in Model::ALL {
            let spec = ModelSpec::new(model);
            for _ in 0..100 {
                let params = random_params(&model, &mut rng);
                let x = random_x(&model, &mut rng);
                let j = jacobian(&spec, &params, &[x]).unwrap();
                for k in 0..model.n_params() {
                    let scale = params[k].abs().max(1.0);
                    let h = 1e-6 * scale;
                    let mut hi = params.clone();
                    let mut lo = params.clone();
                    hi[k] += h;
                    lo[k] -= h;
                    // Keep probes inside the valid domain for bounded params.
                    spec.clamp(&mut hi);
                    spec.clamp(&mut lo);
                    let denom = hi[k] - lo[k];
                    if denom == 0.0 {
                        continue;
                    }
                    let fd =
                        (model.eval_at(&hi, x).unwrap() - model.eval_at(&lo, x).unwrap()) / denom;
                    let analytic = j[(0, k)];
                    // Relative 1e-5, plus the cancellation floor of the
                    // difference quotient itself (ε·|f|/h).
                    let f_mag = model.eval_at(&params, x).unwrap().abs().max(1.0);
                    let tol = 1e-5 * analytic.abs().max(fd.abs()) + 1e-9 * f_mag;
                    assert!(
                        (analytic - fd).abs() < tol,
                        "{:?} param {k}: analytic {analytic} vs fd {fd} (x = {x})",
                        model
                    );
                }
            }
        }
    }

    #[test]
    fn initial_guess_rejects_constant_data() {
        let spec = ModelSpec::new(Model::ExpDecay);
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y = vec![1.0; 10];
        assert!(matches!(
            initial_guess(&spec, &x, &y),
            Err(FitError::DegenerateData(_))
        ));
    }

    #[test]
    fn initial_guess_locates_lorentzian_peak() {
        let spec = ModelSpec::new(Model::Lorentzian);
        let truth = [1.5, 3.0, 2.0, 0.2];
        let x: Vec<f64> = (0..201).map(|i| -10.0 + 0.1 * i as f64).collect();
        let y = eval_model(&spec, &truth, &x).unwrap();
        let g = initial_guess(&spec, &x, &y).unwrap();
        assert!((g[1] - truth[1]).abs() <= 0.1, "f0 guess {g:?}");
        assert!((g[2] - truth[2]).abs() < 0.5, "fwhm guess {g:?}");
    }

    #[test]
    fn initial_guess_power_law_is_exact_on_clean_data() {
        let spec = ModelSpec::new(Model::PowerLaw);
        let x = [1.0f64, 2.0, 4.0, 8.0, 16.0, 32.0];
        let y: Vec<f64> = x.iter().map(|&n| 3.0 * n.powf(2.0 / 3.0)).collect();
        let g = initial_guess(&spec, &x, &y).unwrap();
        assert_abs_diff_eq!(g[1], 2.0 / 3.0, epsilon = 1e-6);
        assert_abs_diff_eq!(g[0], 3.0, epsilon = 1e-6);
    }

    // Tiny deterministic LCG so the draws stay stable across platforms.
    pub(super) struct Lcg(u64);

    impl Lcg {
        pub fn new(seed: u64) -> Self {
            Self(seed.wrapping_mul(2862933555777941757).wrapping_add(1))
        }

        pub fn next_f64(&mut self) -> f64 {
            self.0 = self
                .0
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (self.0 >> 11) as f64 / (1u64 << 53) as f64
        }

        pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
            lo + (hi - lo) * self.next_f64()
        }
    }

    pub(super) fn random_params(model: &Model, rng: &mut Lcg) -> Vec<f64> {
        match model {
            Model::Lorentzian => vec![
                rng.uniform(-3.0, 3.0),
                rng.uniform(-5.0, 5.0),
                rng.uniform(0.2, 8.0),
                rng.uniform(-1.0, 1.0),
            ],
            Model::ExpDecay => vec![
                rng.uniform(-2.0, 2.0),
                rng.uniform(0.1, 20.0),
                rng.uniform(-1.0, 1.0),
            ],
            Model::DampedSin => vec![
                rng.uniform(-2.0, 2.0),
                rng.uniform(0.1, 10.0),
                rng.uniform(0.5, 40.0),
                rng.uniform(0.0, 6.0),
                rng.uniform(-1.0, 1.0),
            ],
            Model::StretchedExp => vec![
                rng.uniform(-2.0, 2.0),
                rng.uniform(0.2, 10.0),
                rng.uniform(0.4, 2.8),
                rng.uniform(-1.0, 1.0),
            ],
            Model::PowerLaw => vec![rng.uniform(0.1, 4.0), rng.uniform(-1.5, 1.5)],
            Model::LineThroughOrigin => vec![rng.uniform(-5.0, 5.0)],
        }
    }

    pub(super) fn random_x(model: &Model, rng: &mut Lcg) -> f64 {
        match model {
            Model::PowerLaw => rng.uniform(0.05, 40.0),
            Model::StretchedExp => rng.uniform(0.01, 15.0),
            _ => rng.uniform(-5.0, 15.0),
        }
    }
}
