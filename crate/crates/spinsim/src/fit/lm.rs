//! Damped normal-equation minimizer.

use super::{check_xy, jacobian, FitError, FitResult, Model, ModelSpec};
use nalgebra::{DMatrix, DVector};

const MAX_ITER: usize = 500;
const SSE_RTOL: f64 = 1e-10;
const GRAD_TOL: f64 = 1e-10;
const LAMBDA_INIT: f64 = 1e-3;
const LAMBDA_MIN: f64 = 1e-12;
const LAMBDA_MAX: f64 = 1e12;

struct Problem<'a> {
    spec: &'a ModelSpec,
    x: &'a [f64],
    y: &'a [f64],
    inv_sigma: Vec<f64>,
}

impl Problem<'_> {
    /// Weighted sum of squared residuals, Σ ((y − f)/σ)².
    fn sse(&self, params: &[f64]) -> Result<f64, FitError> {
        let mut acc = 0.0;
        for ((&xi, &yi), &w) in self.x.iter().zip(self.y).zip(&self.inv_sigma) {
            let r = (yi - self.spec.model.eval_at(params, xi)?) * w;
            acc += r * r;
        }
        Ok(acc)
    }

    /// Weighted jacobian and residual vector at the current parameters.
    fn linearize(&self, params: &[f64]) -> Result<(DMatrix<f64>, DVector<f64>), FitError> {
        let mut j = jacobian(self.spec, params, self.x)?;
        let mut r = DVector::zeros(self.x.len());
        for (i, ((&xi, &yi), &w)) in self.x.iter().zip(self.y).zip(&self.inv_sigma).enumerate() {
            r[i] = (yi - self.spec.model.eval_at(params, xi)?) * w;
            for k in 0..self.spec.n_params() {
                j[(i, k)] *= w;
            }
        }
        Ok((j, r))
    }
}

/// Weighted nonlinear least squares with adaptive damping.
///
/// Damping is multiplied by 10 on a rejected step and divided by 10 on an
/// accepted one; convergence is declared when the relative SSE change of
/// an accepted step falls below 1e-10 or the gradient ∞-norm does. The
/// covariance is the inverse of the damping-free normal matrix scaled by
/// the reduced chi-square. Non-convergence is reported on the result, not
/// as an error; a singular normal matrix is.
pub fn lm_fit(
    spec: &ModelSpec,
    x: &[f64],
    y: &[f64],
    sigma_y: Option<&[f64]>,
    init_params: &[f64],
) -> Result<FitResult, FitError> {
    check_xy(&spec.model, x, y)?;
    if spec.bounds.len() != spec.n_params() || spec.bounds.iter().any(|(lo, hi)| !(lo <= hi)) {
        return Err(FitError::BadBounds {
            expected: spec.n_params(),
        });
    }
    if init_params.len() != spec.n_params() {
        return Err(FitError::LengthMismatch {
            x: spec.n_params(),
            y: init_params.len(),
        });
    }
    spec.check_init(init_params)?;
    let inv_sigma = match sigma_y {
        Some(s) => {
            if s.len() != y.len() {
                return Err(FitError::LengthMismatch {
                    x: y.len(),
                    y: s.len(),
                });
            }
            if s.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(FitError::InvalidSigma);
            }
            s.iter().map(|v| 1.0 / v).collect()
        }
        None => vec![1.0; y.len()],
    };
    let problem = Problem {
        spec,
        x,
        y,
        inv_sigma,
    };

    let p = spec.n_params();
    let mut params = init_params.to_vec();
    let mut sse = problem.sse(&params)?;
    let mut lambda = LAMBDA_INIT;
    let mut converged = false;
    let mut n_iter = 0;

    while n_iter < MAX_ITER {
        n_iter += 1;
        let (j, r) = problem.linearize(&params)?;
        let normal = j.transpose() * &j;
        let gradient = j.transpose() * &r;
        // Active set: parameters pinned at a bound whose gradient points
        // further outward are frozen for this iteration, and excluded from
        // the convergence test (their gradient never vanishes).
        let free: Vec<usize> = (0..p)
            .filter(|&k| {
                let (lo, hi) = spec.bounds[k];
                let at_lo = params[k] <= lo && gradient[k] < 0.0;
                let at_hi = params[k] >= hi && gradient[k] > 0.0;
                !(at_lo || at_hi)
            })
            .collect();
        if free.is_empty() {
            converged = true;
            break;
        }
        let free_grad = free.iter().map(|&k| gradient[k].abs()).fold(0.0, f64::max);
        if free_grad < GRAD_TOL {
            converged = true;
            break;
        }
        let nf = free.len();
        let reduced_normal = DMatrix::from_fn(nf, nf, |a, b| normal[(free[a], free[b])]);
        let reduced_grad = DVector::from_fn(nf, |a, _| gradient[free[a]]);
        // Try steps with growing damping until one reduces the SSE.
        let mut stepped = false;
        while lambda <= LAMBDA_MAX {
            let mut damped = reduced_normal.clone();
            for a in 0..nf {
                let d = reduced_normal[(a, a)];
                damped[(a, a)] = d + lambda * if d > 0.0 { d } else { 1.0 };
            }
            let step = damped.lu().solve(&reduced_grad);
            let candidate = match step {
                Some(delta) if delta.iter().all(|v| v.is_finite()) => {
                    let mut cand = params.clone();
                    for (a, &k) in free.iter().enumerate() {
                        cand[k] += delta[a];
                    }
                    spec.clamp(&mut cand);
                    cand
                }
                _ => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let cand_sse = problem.sse(&candidate)?;
            if cand_sse.is_finite() && cand_sse < sse {
                let rel_change = (sse - cand_sse) / sse.max(f64::MIN_POSITIVE);
                params = candidate;
                sse = cand_sse;
                lambda = (lambda / 10.0).max(LAMBDA_MIN);
                stepped = true;
                if rel_change < SSE_RTOL {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !stepped {
            // Damping exhausted without improvement: we are at a (possibly
            // bound-constrained) minimum to working precision.
            converged = sse.is_finite();
            break;
        }
        if converged {
            break;
        }
    }

    if spec.model == Model::DampedSin {
        params[3] = params[3].rem_euclid(2.0 * std::f64::consts::PI);
    }

    let (j, _) = problem.linearize(&params)?;
    let normal = j.transpose() * &j;
    let dof = (x.len().saturating_sub(p)).max(1) as f64;
    let chi2_reduced = sse / dof;
    let covariance = normal.try_inverse().ok_or(FitError::ParameterDegeneracy)? * chi2_reduced;

    Ok(FitResult {
        params,
        covariance,
        chi2_reduced,
        n_iter,
        converged,
    })
}
