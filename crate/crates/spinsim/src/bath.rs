//! Classical Lorentzian-bath decoherence engine.
//!
//! The bath is an Ornstein-Uhlenbeck frequency-noise process δν(t) (MHz)
//! with rms amplitude σ and correlation time τ_c; its power spectrum is a
//! Lorentzian. Pulse sequences act through their toggling function f(t) =
//! ±1, which flips sign at every π pulse. The coherence left after total
//! free evolution T is the Monte-Carlo average
//!
//!   W = |⟨ exp(i·2π ∫₀ᵀ f(t)·δν(t) dt) ⟩|,
//!
//! over OU trajectories. Pulses are treated as instantaneous here; finite
//! pulse effects belong to the Lindblad model in [`crate::spinpair`].
//!
//! Trajectories use ChaCha8 substreams keyed by (seed, trajectory index)
//! and an order-fixed pairwise reduction, so parallel and sequential runs
//! produce bit-identical results.

use crate::fit::{jacobian, lm_fit, FitError, Model, ModelSpec};
use crate::par;
use crate::pulses::{self, PulseError, PulseSequence, SegmentKind};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BathError {
    #[error("invalid bath parameters: {0}")]
    InvalidParams(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("sequence is not a π/2 – (waits + π pulses) – π/2 protocol: {0}")]
    MalformedSequence(String),
    #[error("scaling points must have N ≥ 1 and T2 > 0, got ({n}, {t2})")]
    NonPositivePoint { n: u32, t2: f64 },
    #[error("need at least {needed} scaling points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("stretched-exponential fit did not converge for N = {0}")]
    FitDidNotConverge(u32),
    #[error("could not bracket the coherence decay for N = {0}")]
    SweepNotBracketed(u32),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Pulse(#[from] PulseError),
}

/// Ornstein-Uhlenbeck bath description: rms frequency fluctuation σ (MHz),
/// correlation time τ_c (µs), sampling step dt (µs) and the RNG seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OUParams {
    pub sigma: f64,
    pub tau_c: f64,
    pub dt: f64,
    pub seed: u64,
}

impl OUParams {
    pub fn validate(&self) -> Result<(), BathError> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(BathError::InvalidParams(format!(
                "sigma must be > 0, got {}",
                self.sigma
            )));
        }
        if !(self.tau_c > 0.0) || !self.tau_c.is_finite() {
            return Err(BathError::InvalidParams(format!(
                "tau_c must be > 0, got {}",
                self.tau_c
            )));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() || self.dt > self.tau_c / 10.0 {
            return Err(BathError::InvalidParams(format!(
                "dt must satisfy 0 < dt ≤ tau_c/10, got {}",
                self.dt
            )));
        }
        Ok(())
    }
}

fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// One stationary OU trajectory sampled at the fixed step `params.dt`,
/// using the exact discretization
///
///   x_{k+1} = x_k·e^{−dt/τc} + σ·√(1 − e^{−2dt/τc})·ξ_k,  x_0 ~ N(0, σ²).
///
/// Deterministic per seed (substream 0 of the trajectory family).
pub fn ou_trace(params: &OUParams, n_steps: usize) -> Result<Vec<f64>, BathError> {
    params.validate()?;
    if n_steps == 0 {
        return Ok(Vec::new());
    }
    let mut rng = trajectory_rng(params.seed, 0);
    let decay = (-params.dt / params.tau_c).exp();
    let noise = params.sigma * (1.0 - decay * decay).sqrt();
    let mut x = params.sigma * rng.sample::<f64, _>(StandardNormal);
    let mut out = Vec::with_capacity(n_steps);
    out.push(x);
    for _ in 1..n_steps {
        x = x * decay + noise * rng.sample::<f64, _>(StandardNormal);
        out.push(x);
    }
    Ok(out)
}

/// The ±1 toggling function of a decoupling sequence on the free-evolution
/// clock: it starts at `initial_sign` and flips at each π-pulse center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TogglingFunction {
    switch_times: Vec<f64>,
    initial_sign: f64,
    total_time: f64,
}

impl TogglingFunction {
    pub fn new(switch_times: Vec<f64>, total_time: f64) -> Result<Self, BathError> {
        if !(total_time >= 0.0) || !total_time.is_finite() {
            return Err(BathError::InvalidInput(format!(
                "total_time must be ≥ 0, got {total_time}"
            )));
        }
        if switch_times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(BathError::InvalidInput(
                "switch times must be strictly increasing".into(),
            ));
        }
        if switch_times
            .iter()
            .any(|&t| !(0.0..=total_time).contains(&t))
        {
            return Err(BathError::InvalidInput(
                "switch times must lie within [0, total_time]".into(),
            ));
        }
        Ok(Self {
            switch_times,
            initial_sign: 1.0,
            total_time,
        })
    }

    /// Ideal CPMG-N toggling: switches at τ, 3τ, …, (2N−1)τ, total 2Nτ.
    pub fn cpmg(n: u32, tau: f64) -> Result<Self, BathError> {
        if n < 1 {
            return Err(BathError::InvalidInput("cpmg needs n ≥ 1".into()));
        }
        if !(tau > 0.0) {
            return Err(BathError::InvalidInput("cpmg needs tau > 0".into()));
        }
        let switches = (0..n).map(|k| (2 * k + 1) as f64 * tau).collect();
        Self::new(switches, 2.0 * n as f64 * tau)
    }

    pub fn switch_times(&self) -> &[f64] {
        &self.switch_times
    }

    pub fn initial_sign(&self) -> f64 {
        self.initial_sign
    }

    pub fn total_time(&self) -> f64 {
        self.total_time
    }
}

/// Extract the toggling function of a π/2 – (waits + π pulses) – π/2
/// sequence. π pulses are instantaneous: the free-evolution clock advances
/// through wait segments only, and each interior microwave pulse flips the
/// sign at the current clock reading.
pub fn toggling_from_sequence(seq: &PulseSequence) -> Result<TogglingFunction, BathError> {
    let body: Vec<_> = seq
        .segments()
        .iter()
        .filter(|s| !matches!(s.kind, SegmentKind::Laser | SegmentKind::Readout))
        .collect();
    let mw_count = body
        .iter()
        .filter(|s| s.kind == SegmentKind::Microwave)
        .count();
    if mw_count < 2 {
        return Err(BathError::MalformedSequence(
            "need an opening and a closing π/2 pulse".into(),
        ));
    }
    let first_mw = body
        .iter()
        .position(|s| s.kind == SegmentKind::Microwave)
        .expect("counted above");
    let last_mw = body
        .iter()
        .rposition(|s| s.kind == SegmentKind::Microwave)
        .expect("counted above");
    if body[..first_mw].iter().any(|s| s.kind != SegmentKind::Wait)
        || body[last_mw + 1..]
            .iter()
            .any(|s| s.kind != SegmentKind::Wait)
    {
        return Err(BathError::MalformedSequence(
            "free evolution must sit between the two π/2 pulses".into(),
        ));
    }
    let half_pi = body[first_mw].duration;
    if (body[last_mw].duration - half_pi).abs() > 1e-9 * half_pi.max(1e-30) {
        return Err(BathError::MalformedSequence(
            "opening and closing pulses must both be π/2".into(),
        ));
    }
    let mut clock = 0.0;
    let mut switches = Vec::new();
    for s in &body[first_mw + 1..last_mw] {
        match s.kind {
            SegmentKind::Wait => clock += s.duration,
            SegmentKind::Microwave => {
                let expected_pi = 2.0 * half_pi;
                if (s.duration - expected_pi).abs() > 1e-9 * expected_pi.max(1e-30) {
                    return Err(BathError::MalformedSequence(format!(
                        "interior pulse of duration {} is not a π pulse ({} expected)",
                        s.duration, expected_pi
                    )));
                }
                switches.push(clock);
            }
            _ => unreachable!("laser and readout were filtered"),
        }
    }
    TogglingFunction::new(switches, clock)
}

/// A Monte-Carlo coherence estimate: W ∈ [0, 1] with its standard error.
/// `insufficient` flags runs whose standard error exceeds 0.01.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoherenceEstimate {
    pub w: f64,
    pub std_err: f64,
    pub n_traj: usize,
    pub insufficient: bool,
}

/// Precomputed integration grid: per substep sign, length, OU decay factor
/// and innovation amplitude.
struct PhaseGrid {
    steps: Vec<(f64, f64, f64, f64)>, // (sign, h, decay, noise_amp)
}

/// Minimum substeps per toggling interval. The refocused phase signal sits
/// in the within-interval fluctuations around the endpoint interpolation;
/// the trapezoid rule misses a fraction ~1/m² of it, so intervals shorter
/// than the sampling step still get resolved.
const MIN_SUBSTEPS: usize = 8;

impl PhaseGrid {
    fn build(f: &TogglingFunction, bath: &OUParams) -> Self {
        let mut boundaries = vec![0.0];
        boundaries.extend_from_slice(f.switch_times());
        if f.total_time() > *boundaries.last().unwrap() {
            boundaries.push(f.total_time());
        }
        let mut steps = Vec::new();
        let mut sign = f.initial_sign();
        for (i, pair) in boundaries.windows(2).enumerate() {
            let len = pair[1] - pair[0];
            if len > 0.0 {
                let m = ((len / bath.dt).ceil() as usize).max(MIN_SUBSTEPS);
                let h = len / m as f64;
                let decay = (-h / bath.tau_c).exp();
                let noise_amp = bath.sigma * (1.0 - decay * decay).sqrt();
                for _ in 0..m {
                    steps.push((sign, h, decay, noise_amp));
                }
            }
            // A switch sits at the right edge of every interval except the
            // final one.
            if i < f.switch_times().len() {
                sign = -sign;
            }
        }
        Self { steps }
    }

    /// Accumulated toggled phase (rad) along one OU trajectory.
    fn phase(&self, rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
        let mut x = sigma * rng.sample::<f64, _>(StandardNormal);
        let mut phase = 0.0;
        for &(sign, h, decay, noise_amp) in &self.steps {
            let x_next = x * decay + noise_amp * rng.sample::<f64, _>(StandardNormal);
            phase += sign * 0.5 * (x + x_next) * h;
            x = x_next;
        }
        2.0 * PI * phase
    }
}

fn coherence_from_samples(samples: &[(f64, f64)]) -> CoherenceEstimate {
    let n = samples.len();
    let res: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let ims: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let re_mean = par::pairwise_sum(&res) / n as f64;
    let im_mean = par::pairwise_sum(&ims) / n as f64;
    let w = re_mean.hypot(im_mean);
    // Spread of the per-trajectory projections onto the mean direction.
    let (cos_t, sin_t) = if w > 0.0 {
        (re_mean / w, im_mean / w)
    } else {
        (1.0, 0.0)
    };
    let deviations: Vec<f64> = samples
        .iter()
        .map(|(re, im)| {
            let proj = re * cos_t + im * sin_t;
            (proj - w) * (proj - w)
        })
        .collect();
    let variance = par::pairwise_sum(&deviations) / (n as f64 - 1.0);
    let std_err = (variance / n as f64).sqrt();
    CoherenceEstimate {
        w,
        std_err,
        n_traj: n,
        insufficient: std_err > 0.01,
    }
}

fn mc_coherence_impl(
    f: &TogglingFunction,
    bath: &OUParams,
    n_traj: usize,
    sequential: bool,
) -> Result<CoherenceEstimate, BathError> {
    bath.validate()?;
    if n_traj < 100 {
        return Err(BathError::InvalidInput(format!(
            "need at least 100 trajectories, got {n_traj}"
        )));
    }
    let grid = PhaseGrid::build(f, bath);
    let seed = bath.seed;
    let sigma = bath.sigma;
    let sample = |j: usize| {
        let mut rng = trajectory_rng(seed, j as u64);
        let phi = grid.phase(&mut rng, sigma);
        (phi.cos(), phi.sin())
    };
    let samples = if sequential {
        par::map_indexed_seq(n_traj, sample)
    } else {
        par::map_indexed(n_traj, sample)
    };
    Ok(coherence_from_samples(&samples))
}

/// Monte-Carlo coherence W for a toggling function under an OU bath,
/// averaged over `n_traj` seeded trajectories (parallel when the
/// `parallel` feature is enabled).
pub fn mc_coherence(
    f: &TogglingFunction,
    bath: &OUParams,
    n_traj: usize,
) -> Result<CoherenceEstimate, BathError> {
    mc_coherence_impl(f, bath, n_traj, false)
}

/// Sequential twin of [`mc_coherence`]; bit-identical results.
pub fn mc_coherence_seq(
    f: &TogglingFunction,
    bath: &OUParams,
    n_traj: usize,
) -> Result<CoherenceEstimate, BathError> {
    mc_coherence_impl(f, bath, n_traj, true)
}

/// A fitted CPMG coherence time with its diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct T2Estimate {
    pub n_pulses: u32,
    /// 1/e time of the fitted stretched-exponential factor, µs.
    pub t2: f64,
    /// 1σ uncertainty of `t2`, propagated from the per-point Monte-Carlo
    /// errors through the weighted fit.
    pub t2_std_err: f64,
    pub beta: f64,
    /// Largest Monte-Carlo standard error among the sweep points.
    pub max_std_err: f64,
}

/// Sweep the total CPMG-N evolution time, estimate W at each point and fit
/// a stretched exponential a·e^{−(t/T)^β} + c. The sweep range is bracketed
/// automatically so the decay crosses 1/e inside it.
pub fn cpmg_t2(
    bath: &OUParams,
    n: u32,
    omega: f64,
    n_traj: usize,
) -> Result<T2Estimate, BathError> {
    bath.validate()?;
    // Slow-bath cumulant anchor: χ(T) ≈ (2πσ)²T³/(12 τc N²) = 1 at T2.
    let two_pi_sigma = 2.0 * PI * bath.sigma;
    let mut t_max = (12.0 * bath.tau_c * (n as f64).powi(2) / (two_pi_sigma * two_pi_sigma))
        .powf(1.0 / 3.0)
        * 1.8;
    let w_at = |total: f64| -> Result<CoherenceEstimate, BathError> {
        let seq = pulses::cpmg_seq(n, total / (2.0 * n as f64), omega, pulses::CPMG_PI_PHASE)?;
        let f = toggling_from_sequence(&seq)?;
        mc_coherence(&f, bath, n_traj)
    };
    // Bracket loosely: grow or shrink the endpoint until W(t_max) is deep
    // in the decay but still resolvable.
    let mut w_end = w_at(t_max)?;
    let mut bracketed = false;
    for _ in 0..12 {
        if w_end.w > 0.4 {
            t_max *= 1.5;
        } else if w_end.w < 0.01 {
            t_max /= 1.4;
        } else {
            bracketed = true;
            break;
        }
        w_end = w_at(t_max)?;
    }
    if !bracketed {
        return Err(BathError::SweepNotBracketed(n));
    }
    // Rough pass: locate the 1/e crossing by interpolation.
    let target = (-1.0f64).exp();
    let mut t_rough = t_max / 2.0;
    let mut prev = (0.0f64, 1.0f64);
    for k in 1..=10 {
        let total = t_max * k as f64 / 10.0;
        let est = w_at(total)?;
        if est.w < target {
            let frac = (prev.1 - target) / (prev.1 - est.w);
            t_rough = prev.0 + frac * (total - prev.0);
            break;
        }
        prev = (total, est.w);
    }
    // Final pass on a grid normalized to the crossing, so every N is
    // fitted over the same window relative to its own T2 and the
    // stretched-exponential fit bias cancels from the scaling exponent.
    let n_points = 16;
    let mut xs = Vec::with_capacity(n_points);
    let mut ys = Vec::with_capacity(n_points);
    let mut mc_sigmas = Vec::with_capacity(n_points);
    let mut max_std_err = 0.0f64;
    for k in 1..=n_points {
        let total = 2.0 * t_rough * k as f64 / n_points as f64;
        let est = w_at(total)?;
        max_std_err = max_std_err.max(est.std_err);
        xs.push(total);
        ys.push(est.w);
        mc_sigmas.push(est.std_err);
    }
    let t_init = t_rough;
    // Unit weights: the stretched exponential is a phenomenological form,
    // so weighting by the (much smaller) Monte-Carlo errors would let
    // model error dominate the normal equations.
    let spec = ModelSpec::new(Model::StretchedExp);
    let fit = lm_fit(&spec, &xs, &ys, None, &[1.0, t_init, 2.0, 0.0])?;
    if !fit.converged {
        return Err(BathError::FitDidNotConverge(n));
    }
    // Monte-Carlo-only uncertainty of T2: propagate the per-point MC
    // errors through the unweighted estimator with the sandwich form
    // (JᵀJ)⁻¹ Jᵀ Σ J (JᵀJ)⁻¹, conditioned on the active set (a parameter
    // pinned at its bound, typically β = 3 in the slow-bath regime, has no
    // first-order sensitivity to data perturbations).
    let free: Vec<usize> = (0..spec.n_params())
        .filter(|&k| {
            let (lo, hi) = spec.bounds[k];
            fit.params[k] > lo && fit.params[k] < hi
        })
        .collect();
    let t2_free_idx = free
        .iter()
        .position(|&k| k == 1)
        .ok_or(BathError::FitDidNotConverge(n))?;
    let j_full = jacobian(&spec, &fit.params, &xs)?;
    let j = DMatrix::from_fn(xs.len(), free.len(), |r, c| j_full[(r, free[c])]);
    let normal = j.transpose() * &j;
    let inv = normal
        .try_inverse()
        .ok_or(BathError::FitDidNotConverge(n))?;
    let sigma_diag = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        mc_sigmas.len(),
        mc_sigmas.iter().map(|s| s * s),
    ));
    let cov_mc = &inv * j.transpose() * sigma_diag * &j * &inv;
    Ok(T2Estimate {
        n_pulses: n,
        t2: fit.params[1],
        t2_std_err: cov_mc[(t2_free_idx, t2_free_idx)].max(0.0).sqrt(),
        beta: fit.params[2],
        max_std_err,
    })
}

/// Coherence time versus pulse number for a CPMG family.
pub fn t2_vs_n(
    bath: &OUParams,
    n_list: &[u32],
    omega: f64,
    n_traj: usize,
) -> Result<Vec<(u32, f64)>, BathError> {
    if n_list.is_empty() {
        return Err(BathError::InvalidInput("empty N list".into()));
    }
    if n_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(BathError::InvalidInput("N list must be ascending".into()));
    }
    n_list
        .iter()
        .map(|&n| cpmg_t2(bath, n, omega, n_traj).map(|est| (n, est.t2)))
        .collect()
}

/// Log-log linear least squares for T2 ∝ a·N^γ. Returns (γ, a, 1σ of γ).
pub fn fit_scaling_exponent(points: &[(u32, f64)]) -> Result<(f64, f64, f64), BathError> {
    if points.len() < 3 {
        return Err(BathError::TooFewPoints {
            needed: 3,
            got: points.len(),
        });
    }
    for &(n, t2) in points {
        if n < 1 || !(t2 > 0.0) || !t2.is_finite() {
            return Err(BathError::NonPositivePoint { n, t2 });
        }
    }
    let n = points.len() as f64;
    let logs: Vec<(f64, f64)> = points
        .iter()
        .map(|&(np, t2)| ((np as f64).ln(), t2.ln()))
        .collect();
    let sx: f64 = logs.iter().map(|p| p.0).sum();
    let sy: f64 = logs.iter().map(|p| p.1).sum();
    let sxx: f64 = logs.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = logs.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() <= 1e-12 * sxx.max(1.0) {
        return Err(BathError::InvalidInput(
            "pulse numbers must not all be equal".into(),
        ));
    }
    let gamma = (n * sxy - sx * sy) / denom;
    let intercept = (sy - gamma * sx) / n;
    let ss_res: f64 = logs
        .iter()
        .map(|&(lx, ly)| {
            let r = ly - (intercept + gamma * lx);
            r * r
        })
        .sum();
    let dof = (points.len() - 2) as f64;
    let sxx_centered = sxx - sx * sx / n;
    let gamma_err = if dof > 0.0 {
        (ss_res / dof / sxx_centered).sqrt()
    } else {
        0.0
    };
    Ok((gamma, intercept.exp(), gamma_err))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn bath(sigma: f64, tau_c: f64, dt: f64, seed: u64) -> OUParams {
        OUParams {
            sigma,
            tau_c,
            dt,
            seed,
        }
    }

    #[test]
    fn params_validation() {
        assert!(bath(1.0, 1.0, 0.05, 0).validate().is_ok());
        assert!(bath(0.0, 1.0, 0.05, 0).validate().is_err());
        assert!(bath(1.0, 0.0, 0.05, 0).validate().is_err());
        // dt above tau_c/10.
        assert!(bath(1.0, 1.0, 0.2, 0).validate().is_err());
    }

    #[test]
    fn vanishing_sigma_gives_vanishing_trace() {
        let p = bath(1e-12, 1.0, 0.05, 7);
        let trace = ou_trace(&p, 1000).unwrap();
        assert!(trace.iter().all(|x| x.abs() < 1e-10));
    }

    #[test]
    fn trace_is_deterministic_per_seed() {
        let p = bath(2.0, 1.0, 0.05, 42);
        let a = ou_trace(&p, 500).unwrap();
        let b = ou_trace(&p, 500).unwrap();
        assert_eq!(a, b);
        let c = ou_trace(&bath(2.0, 1.0, 0.05, 43), 500).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn stationary_variance_within_two_percent() {
        let sigma = 3.0;
        let p = bath(sigma, 1.0, 0.1, 11);
        let trace = ou_trace(&p, 1_000_000).unwrap();
        let mean = trace.iter().sum::<f64>() / trace.len() as f64;
        let var =
            trace.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (trace.len() - 1) as f64;
        let rel = (var - sigma * sigma).abs() / (sigma * sigma);
        assert!(rel < 0.02, "variance off by {:.3}%", rel * 100.0);
        assert!(mean.abs() < 0.05 * sigma, "mean {mean}");
    }

    #[test]
    fn autocorrelation_follows_exponential() {
        // Lag autocovariance against σ²e^{−k·dt/τc} for lags up to 3τc.
        // The tolerance is 3 % of the expected value plus an absolute term
        // of 1 % of σ² covering the estimator noise at long lags, where a
        // purely relative bound is statistically unattainable.
        let sigma = 2.0;
        let tau_c = 1.0;
        let dt = 0.1;
        let p = bath(sigma, tau_c, dt, 5);
        let n = 2_000_000;
        let trace = ou_trace(&p, n).unwrap();
        let mean = trace.iter().sum::<f64>() / n as f64;
        let centered: Vec<f64> = trace.iter().map(|x| x - mean).collect();
        let var = centered.iter().map(|x| x * x).sum::<f64>() / (n as f64 - 1.0);
        for lag_tau in [dt, 0.5, 1.0, 2.0, 3.0] {
            let k = (lag_tau / dt).round() as usize;
            let cov = centered[..n - k]
                .iter()
                .zip(&centered[k..])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / (n - k) as f64;
            let expected = (-(k as f64) * dt / tau_c).exp();
            let got = cov / var;
            assert!(
                (got - expected).abs() < 0.03 * expected + 0.01,
                "lag {k}: got {got:.4}, expected {expected:.4}"
            );
        }
    }

    #[test]
    fn toggling_structures() {
        let ramsey = pulses::ramsey_seq(0.4, 10.0).unwrap();
        let f = toggling_from_sequence(&ramsey).unwrap();
        assert!(f.switch_times().is_empty());
        assert_abs_diff_eq!(f.total_time(), 0.4, epsilon = 1e-12);

        let hahn = pulses::hahn_seq(0.3, 10.0).unwrap();
        let f = toggling_from_sequence(&hahn).unwrap();
        assert_eq!(f.switch_times(), &[0.3]);
        assert_abs_diff_eq!(f.total_time(), 0.6, epsilon = 1e-12);

        let cpmg = pulses::cpmg_seq(4, 0.1, 10.0, pulses::CPMG_PI_PHASE).unwrap();
        let f = toggling_from_sequence(&cpmg).unwrap();
        let expected: Vec<f64> = vec![0.1, 0.3, 0.5, 0.7];
        for (got, want) in f.switch_times().iter().zip(&expected) {
            assert_abs_diff_eq!(*got, *want, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(f.total_time(), 0.8, epsilon = 1e-12);
        // Matches the ideal constructor.
        let ideal = TogglingFunction::cpmg(4, 0.1).unwrap();
        assert_abs_diff_eq!(ideal.total_time(), f.total_time(), epsilon = 1e-12);

        let rabi = pulses::rabi_seq(0.1, 1.0).unwrap();
        assert!(matches!(
            toggling_from_sequence(&rabi),
            Err(BathError::MalformedSequence(_))
        ));
    }

    #[test]
    fn zero_time_coherence_is_one() {
        let f = TogglingFunction::new(vec![], 0.0).unwrap();
        let est = mc_coherence(&f, &bath(5.0, 1.0, 0.05, 3), 200).unwrap();
        assert_abs_diff_eq!(est.w, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(est.std_err, 0.0, epsilon = 1e-12);
        assert!(!est.insufficient);
    }

    #[test]
    fn few_trajectories_raise_the_insufficient_flag() {
        // Mid-decay W with ~150 trajectories has a standard error well
        // above the 0.01 threshold.
        let sigma = 10.0;
        let t = 1.0 / (2.0 * PI * sigma);
        let b = bath(sigma, 1000.0 * t, t / 20.0, 77);
        let f = TogglingFunction::new(vec![], t).unwrap();
        let est = mc_coherence(&f, &b, 150).unwrap();
        assert!(est.std_err > 0.01, "std err {}", est.std_err);
        assert!(est.insufficient);
        assert!(mc_coherence(&f, &b, 99).is_err(), "below the minimum count");
    }

    #[test]
    fn parallel_and_sequential_runs_are_bit_identical() {
        let f = TogglingFunction::cpmg(4, 0.05).unwrap();
        let b = bath(10.0, 3.0, 0.01, 99);
        let par = mc_coherence(&f, &b, 1500).unwrap();
        let seq = mc_coherence_seq(&f, &b, 1500).unwrap();
        assert_eq!(par.w.to_bits(), seq.w.to_bits());
        assert_eq!(par.std_err.to_bits(), seq.std_err.to_bits());
    }

    #[test]
    fn quasi_static_ramsey_matches_gaussian_closed_form() {
        // τc ≫ T: the OU noise is frozen and W(T) = e^{−(2πσT)²/2}.
        let sigma = 10.0;
        let t = 1.0 / (2.0 * PI * sigma); // (2πσT)²/2 = 0.5
        let b = bath(sigma, 1000.0 * t, t / 20.0, 21);
        let f = TogglingFunction::new(vec![], t).unwrap();
        let est = mc_coherence(&f, &b, 6000).unwrap();
        let expected = (-0.5f64).exp();
        assert!(
            (est.w - expected).abs() < 3.0 * est.std_err + 0.005,
            "W = {} vs {expected}",
            est.w
        );
    }

    /// Exact Gaussian-bath decay exponent χ = (2πσ)²/2 ∬ f(t)f(t')
    /// e^{−|t−t'|/τc} dt dt', from closed-form cell integrals over the
    /// piecewise-constant toggling function. Independent of the Monte
    /// Carlo path.
    fn chi_quadrature(f: &TogglingFunction, sigma: f64, tau_c: f64) -> f64 {
        let mut boundaries = vec![0.0];
        boundaries.extend_from_slice(f.switch_times());
        if f.total_time() > *boundaries.last().unwrap() {
            boundaries.push(f.total_time());
        }
        let cells: Vec<(f64, f64, f64)> = boundaries
            .windows(2)
            .enumerate()
            .map(|(i, w)| (w[0], w[1], f.initial_sign() * (-1.0f64).powi(i as i32)))
            .collect();
        let mut acc = 0.0;
        for (i, &(a, b, si)) in cells.iter().enumerate() {
            // Diagonal cell.
            let len = b - a;
            acc += 2.0 * tau_c * (len - tau_c * (1.0 - (-len / tau_c).exp()));
            // Off-diagonal pairs, doubled by symmetry.
            for &(c, d, sj) in cells.iter().skip(i + 1) {
                let integral = tau_c
                    * tau_c
                    * ((-(c - b) / tau_c).exp()
                        - (-(c - a) / tau_c).exp()
                        - (-(d - b) / tau_c).exp()
                        + (-(d - a) / tau_c).exp());
                acc += 2.0 * si * sj * integral;
            }
        }
        let two_pi_sigma = 2.0 * PI * sigma;
        0.5 * two_pi_sigma * two_pi_sigma * acc
    }

    #[test]
    fn hahn_decay_matches_cumulant_oracle_in_slow_bath() {
        // χ from Monte Carlo against the exact quadrature and the slow-bath
        // asymptote (2πσ)²T³/(12 τc).
        let t_total = 0.1;
        let tau_c = 5.0;
        let sigma = (42_000.0f64).sqrt() / (2.0 * PI); // χ ≈ 0.7
        let b = bath(sigma, tau_c, 0.002, 17);
        let f = TogglingFunction::cpmg(1, t_total / 2.0).unwrap();
        let est = mc_coherence(&f, &b, 20_000).unwrap();
        let chi_mc = -est.w.ln();
        let chi_exact = chi_quadrature(&f, sigma, tau_c);
        let chi_asymptotic = (2.0 * PI * sigma).powi(2) * t_total.powi(3) / (12.0 * tau_c);
        assert!(
            (chi_mc - chi_exact).abs() / chi_exact < 0.05,
            "MC {chi_mc:.4} vs quadrature {chi_exact:.4}"
        );
        assert!(
            (chi_asymptotic - chi_exact).abs() / chi_exact < 0.05,
            "asymptote {chi_asymptotic:.4} vs quadrature {chi_exact:.4}"
        );
    }

    #[test]
    fn coherence_monotonicity_on_grids() {
        // W decreases with total time at fixed N and increases with N at
        // fixed total time (slow bath), within Monte-Carlo slack.
        let b = bath(30.0, 10.0, 0.005, 33);
        let mut last: Option<CoherenceEstimate> = None;
        for k in 1..=6 {
            let total = 0.04 * k as f64;
            let f = TogglingFunction::cpmg(2, total / 4.0).unwrap();
            let est = mc_coherence(&f, &b, 3000).unwrap();
            if let Some(prev) = last {
                assert!(
                    est.w <= prev.w + 3.0 * (est.std_err + prev.std_err),
                    "W grew with time: {} -> {}",
                    prev.w,
                    est.w
                );
            }
            last = Some(est);
        }
        let total = 0.12;
        let mut last: Option<CoherenceEstimate> = None;
        for n in [1u32, 2, 4, 8] {
            let f = TogglingFunction::cpmg(n, total / (2.0 * n as f64)).unwrap();
            let est = mc_coherence(&f, &b, 3000).unwrap();
            if let Some(prev) = last {
                assert!(
                    est.w >= prev.w - 3.0 * (est.std_err + prev.std_err),
                    "W fell with N: {} -> {}",
                    prev.w,
                    est.w
                );
            }
            last = Some(est);
        }
    }

    #[test]
    fn scaling_exponent_exact_cases() {
        let exact: Vec<(u32, f64)> = [1u32, 2, 4, 8, 16]
            .iter()
            .map(|&n| (n, 3.0 * (n as f64).powf(2.0 / 3.0)))
            .collect();
        let (gamma, a, err) = fit_scaling_exponent(&exact).unwrap();
        assert_abs_diff_eq!(gamma, 2.0 / 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(a, 3.0, epsilon = 1e-9);
        assert!(err < 1e-9);

        let flat: Vec<(u32, f64)> = vec![(1, 2.0), (2, 2.0), (4, 2.0)];
        let (gamma, _, _) = fit_scaling_exponent(&flat).unwrap();
        assert_abs_diff_eq!(gamma, 0.0, epsilon = 1e-12);

        assert!(fit_scaling_exponent(&[(1, 1.0), (2, 2.0)]).is_err());
        assert!(fit_scaling_exponent(&[(1, 1.0), (2, -2.0), (4, 3.0)]).is_err());
    }

    #[test]
    fn scaling_exponent_on_measured_style_points() {
        // Points on a γ = 0.691 power law anchored at T2(32) = 1.315 µs.
        let gamma_true = 0.691;
        let points: Vec<(u32, f64)> = [4u32, 8, 16, 32]
            .iter()
            .map(|&n| (n, 1.315 * (n as f64 / 32.0).powf(gamma_true)))
            .collect();
        let (gamma, _, err) = fit_scaling_exponent(&points).unwrap();
        assert_abs_diff_eq!(gamma, gamma_true, epsilon = 1e-9);
        assert!(err < 0.05);
    }

    #[test]
    fn t2_grows_with_pulse_number_in_slow_bath() {
        // Small smoke version of the scaling run.
        let t2_target: f64 = 0.0645;
        let tau_c = 50.0 * t2_target;
        let sigma = (12.0 * tau_c / t2_target.powi(3)).sqrt() / (2.0 * PI);
        let b = bath(sigma, tau_c, tau_c / 100.0, 201);
        let single = t2_vs_n(&b, &[1], 40.0, 2000).unwrap();
        assert_eq!(single.len(), 1);
        let pairs = t2_vs_n(&b, &[1, 2, 4], 40.0, 2000).unwrap();
        assert!(pairs.windows(2).all(|w| w[1].1 >= w[0].1));
        let hahn_t2 = pairs[0].1;
        assert!(
            (hahn_t2 - t2_target).abs() / t2_target < 0.15,
            "Hahn T2 {hahn_t2} vs target {t2_target}"
        );
        // Doubling N stretches T2 by ≈ 2^{2/3} in the slow-bath regime.
        for w in pairs.windows(2) {
            let ratio = w[1].1 / w[0].1;
            let expected = 2f64.powf(2.0 / 3.0);
            assert!(
                (ratio - expected).abs() / expected < 0.10,
                "T2 ratio {ratio} vs {expected}"
            );
        }
    }
}
