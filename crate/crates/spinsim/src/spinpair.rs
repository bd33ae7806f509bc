//! The three-level spin-pair model and its measurement protocols.
//!
//! Basis: |0⟩ is the same-site singlet (both charges on one defect), |1⟩ is
//! the {S, T₀} pair manifold and |2⟩ the {T₊, T₋} pair manifold. The
//! microwave drive couples |1⟩ ↔ |2⟩ at Rabi frequency Ω; Γ₁₀ and Γ₂₀ are
//! recombination rates into |0⟩, γ_φ is symmetric incoherent hopping
//! between |1⟩ and |2⟩, the laser repumps |0⟩ → |1⟩, and a slow dark
//! recovery rate takes over when the laser is off.
//!
//! Photoluminescence is a weighted sum of the populations; every protocol
//! reports the relative contrast C = (I_signal − I_reference)/I_reference
//! against the same sequence with the microwave amplitude set to zero
//! (except charge recovery, which references the end of the polarization
//! pulse).
//!
//! The drive detuning Δ enters the rotating-frame Hamiltonian as Δ|2⟩⟨2|
//! during free evolution as well as during pulses; this is what makes a
//! detuned Ramsey fringe oscillate at Δ.

use crate::fit::{initial_guess, lm_fit, FitError, Model, ModelSpec};
use crate::par;
use crate::pulses::{self, compile, PulseError, PulseSegment, PulseSequence};
use crate::qdyn::{
    self, ketbra, liouvillian, steady_state, CMatrix, DensityMatrix, QdynError, Superoperator,
    TimeGrid, C64,
};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Bohr magneton over the Planck constant, MHz per Gauss (CODATA).
pub const MU_B_OVER_H_MHZ_PER_GAUSS: f64 = 1.3996245;

/// Hilbert-space dimension of the spin-pair model.
pub const DIM: usize = 3;

#[derive(Debug, Error)]
pub enum SpinPairError {
    #[error("invalid model parameters: {0}")]
    InvalidParams(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("reference intensity is not positive")]
    ZeroReferenceIntensity,
    #[error(transparent)]
    Qdyn(#[from] QdynError),
    #[error(transparent)]
    Pulse(#[from] PulseError),
    #[error(transparent)]
    Fit(#[from] FitError),
}

/// Relative photoluminescence emission weights of the three levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReadoutWeights {
    pub w0: f64,
    pub w1: f64,
    pub w2: f64,
}

impl Default for ReadoutWeights {
    /// Weights chosen to give positive contrast of order a percent for the
    /// default rate set.
    fn default() -> Self {
        Self {
            w0: 0.8,
            w1: 1.0,
            w2: 1.2,
        }
    }
}

impl ReadoutWeights {
    pub fn new(w0: f64, w1: f64, w2: f64) -> Result<Self, SpinPairError> {
        let w = Self { w0, w1, w2 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), SpinPairError> {
        let ws = [self.w0, self.w1, self.w2];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(SpinPairError::InvalidParams(
                "emission weights must be finite and ≥ 0".into(),
            ));
        }
        if self.w0 == self.w1 && self.w1 == self.w2 {
            return Err(SpinPairError::InvalidParams(
                "all emission weights equal: contrast is identically zero".into(),
            ));
        }
        Ok(())
    }
}

/// Model constants. Frequencies in MHz, rates in µs⁻¹.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpinPairParams {
    /// Rabi drive frequency Ω.
    pub omega: f64,
    /// Drive minus resonance frequency Δ.
    pub detuning: f64,
    /// Recombination |1⟩ → |0⟩.
    pub gamma_10: f64,
    /// Recombination |2⟩ → |0⟩.
    pub gamma_20: f64,
    /// Incoherent |1⟩ ↔ |2⟩ hopping (applied in both directions).
    pub gamma_phi: f64,
    /// Laser-on repump |0⟩ → |1⟩.
    pub pump_rate: f64,
    /// Laser-off recovery |0⟩ → |1⟩, the 1/T_charge scale.
    pub dark_recovery_rate: f64,
    pub weights: ReadoutWeights,
}

impl Default for SpinPairParams {
    /// The demonstration rate grid: strong recombination from the driven
    /// manifold, weaker from the dark one, unit hopping.
    fn default() -> Self {
        Self {
            omega: 10.0,
            detuning: 0.0,
            gamma_10: 10.0,
            gamma_20: 1.0,
            gamma_phi: 1.0,
            pump_rate: 10.0,
            dark_recovery_rate: 5e-4,
            weights: ReadoutWeights::default(),
        }
    }
}

impl SpinPairParams {
    pub fn validate(&self) -> Result<(), SpinPairError> {
        let rates = [
            ("gamma_10", self.gamma_10),
            ("gamma_20", self.gamma_20),
            ("gamma_phi", self.gamma_phi),
            ("pump_rate", self.pump_rate),
            ("dark_recovery_rate", self.dark_recovery_rate),
        ];
        for (name, rate) in rates {
            if !rate.is_finite() || rate < 0.0 {
                return Err(SpinPairError::InvalidParams(format!(
                    "{name} must be finite and ≥ 0, got {rate}"
                )));
            }
        }
        if !self.omega.is_finite() || self.omega < 0.0 {
            return Err(SpinPairError::InvalidParams(format!(
                "omega must be finite and ≥ 0, got {}",
                self.omega
            )));
        }
        if !self.detuning.is_finite() {
            return Err(SpinPairError::InvalidParams(
                "detuning must be finite".into(),
            ));
        }
        if self.dark_recovery_rate > self.pump_rate {
            return Err(SpinPairError::InvalidParams(
                "dark_recovery_rate must not exceed pump_rate".into(),
            ));
        }
        self.weights.validate()
    }

    pub fn with_detuning(mut self, detuning: f64) -> Self {
        self.detuning = detuning;
        self
    }

    fn echo(&self) -> String {
        format!(
            "omega={} detuning={} gamma_10={} gamma_20={} gamma_phi={} pump={} dark={}",
            self.omega,
            self.detuning,
            self.gamma_10,
            self.gamma_20,
            self.gamma_phi,
            self.pump_rate,
            self.dark_recovery_rate
        )
    }
}

/// Unit of a trace abscissa.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum XUnit {
    #[serde(rename = "us")]
    Microseconds,
    #[serde(rename = "ns")]
    Nanoseconds,
    #[serde(rename = "MHz")]
    Megahertz,
    #[serde(rename = "N")]
    Count,
    #[serde(rename = "G")]
    Gauss,
}

impl XUnit {
    pub fn as_str(&self) -> &'static str {
        match self {
            XUnit::Microseconds => "us",
            XUnit::Nanoseconds => "ns",
            XUnit::Megahertz => "MHz",
            XUnit::Count => "N",
            XUnit::Gauss => "G",
        }
    }

    pub fn from_str_opt(s: &str) -> Option<Self> {
        match s {
            "us" => Some(XUnit::Microseconds),
            "ns" => Some(XUnit::Nanoseconds),
            "MHz" => Some(XUnit::Megahertz),
            "N" => Some(XUnit::Count),
            "G" => Some(XUnit::Gauss),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub protocol: String,
    pub x_unit: XUnit,
    pub params: String,
}

/// A contrast-versus-x record produced by a protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastTrace {
    pub x: Vec<f64>,
    pub contrast: Vec<f64>,
    pub meta: TraceMeta,
}

impl ContrastTrace {
    pub fn new(x: Vec<f64>, contrast: Vec<f64>, meta: TraceMeta) -> Result<Self, SpinPairError> {
        if x.len() != contrast.len() {
            return Err(SpinPairError::InvalidInput(format!(
                "x has {} points, contrast has {}",
                x.len(),
                contrast.len()
            )));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(SpinPairError::InvalidInput(
                "x must be strictly increasing".into(),
            ));
        }
        if x.iter().chain(contrast.iter()).any(|v| !v.is_finite()) {
            return Err(SpinPairError::InvalidInput("values must be finite".into()));
        }
        Ok(Self { x, contrast, meta })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Magnetic-field calibration points for the g-factor line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GFactorData {
    pub field_points: Vec<f64>,
    pub frequencies: Vec<f64>,
}

impl GFactorData {
    pub fn new(field_points: Vec<f64>, frequencies: Vec<f64>) -> Result<Self, SpinPairError> {
        if field_points.len() != frequencies.len() || field_points.len() < 2 {
            return Err(SpinPairError::InvalidInput(
                "need at least two (field, frequency) pairs of equal length".into(),
            ));
        }
        for (i, &b) in field_points.iter().enumerate() {
            if !b.is_finite() {
                return Err(SpinPairError::InvalidInput("fields must be finite".into()));
            }
            if field_points[..i].iter().any(|&other| other == b) {
                return Err(SpinPairError::InvalidInput(
                    "field points must be distinct".into(),
                ));
            }
        }
        Ok(Self {
            field_points,
            frequencies,
        })
    }
}

fn hamiltonian(params: &SpinPairParams, drive: Option<(f64, f64)>) -> CMatrix {
    let mut h = ketbra(DIM, 2, 2) * C64::new(params.detuning, 0.0);
    if let Some((amplitude, phase)) = drive {
        // cos φ·σx + sin φ·σy inside the {1, 2} subspace.
        let half = 0.5 * params.omega * amplitude;
        let coupling = C64::new(phase.cos(), -phase.sin()) * C64::new(half, 0.0);
        h[(1, 2)] += coupling;
        h[(2, 1)] += coupling.conj();
    }
    h
}

fn collapse_ops(params: &SpinPairParams, laser_on: bool) -> Vec<CMatrix> {
    let mut ops = Vec::with_capacity(5);
    let mut push = |rate: f64, from: usize, to: usize| {
        if rate > 0.0 {
            ops.push(ketbra(DIM, to, from) * C64::new(rate.sqrt(), 0.0));
        }
    };
    push(params.gamma_10, 1, 0);
    push(params.gamma_20, 2, 0);
    push(params.gamma_phi, 1, 2);
    push(params.gamma_phi, 2, 1);
    let repump = if laser_on {
        params.pump_rate
    } else {
        params.dark_recovery_rate
    };
    push(repump, 0, 1);
    ops
}

fn liouvillian_with_drive(
    params: &SpinPairParams,
    drive: Option<(f64, f64)>,
    laser_on: bool,
) -> Result<Superoperator, SpinPairError> {
    let h = hamiltonian(params, drive);
    let ops = collapse_ops(params, laser_on);
    Ok(liouvillian(&h, &ops)?)
}

/// The model Liouvillian with the drive at unit amplitude and zero phase.
pub fn build_liouvillian(
    params: &SpinPairParams,
    mw_on: bool,
    laser_on: bool,
) -> Result<Superoperator, SpinPairError> {
    params.validate()?;
    liouvillian_with_drive(params, mw_on.then_some((1.0, 0.0)), laser_on)
}

fn intensity(rho: &DensityMatrix, weights: &ReadoutWeights) -> f64 {
    weights.w0 * rho.population(0) + weights.w1 * rho.population(1) + weights.w2 * rho.population(2)
}

/// Contrast C = (I(ρ) − I(ρ_ref)) / I(ρ_ref) of weighted populations.
pub fn contrast_from_state(
    rho: &DensityMatrix,
    rho_ref: &DensityMatrix,
    weights: &ReadoutWeights,
) -> Result<f64, SpinPairError> {
    weights.validate()?;
    if rho.dim() != DIM || rho_ref.dim() != DIM {
        return Err(SpinPairError::InvalidInput(format!(
            "states must be {DIM}-dimensional"
        )));
    }
    let reference = intensity(rho_ref, weights);
    if reference <= 1e-12 {
        return Err(SpinPairError::ZeroReferenceIntensity);
    }
    Ok((intensity(rho, weights) - reference) / reference)
}

/// Run a compiled pulse sequence segment by segment under piecewise-constant
/// generators and return the final state.
pub fn run_sequence(
    params: &SpinPairParams,
    seq: &PulseSequence,
    rho0: &DensityMatrix,
) -> Result<DensityMatrix, SpinPairError> {
    params.validate()?;
    if rho0.dim() != DIM {
        return Err(SpinPairError::InvalidInput(format!(
            "initial state must be {DIM}-dimensional"
        )));
    }
    let mut y = rho0.to_vec();
    for segment in compile(seq)? {
        if segment.duration == 0.0 {
            continue;
        }
        let drive = segment.mw_on.then_some((segment.amplitude, segment.phase));
        let l = liouvillian_with_drive(params, drive, segment.laser_on)?;
        qdyn::propagate_vec(&l, &mut y, segment.duration)?;
    }
    let mat = CMatrix::from_column_slice(DIM, DIM, y.as_slice());
    Ok(DensityMatrix::from_evolution(mat)?)
}

/// The polarized starting state |S,T₀⟩⟨S,T₀|.
pub fn polarized_state() -> DensityMatrix {
    DensityMatrix::pure(DIM, 1)
}

fn zero_amplitude(seq: &PulseSequence) -> PulseSequence {
    let segments = seq
        .segments()
        .iter()
        .map(|s| PulseSegment {
            amplitude: 0.0,
            ..*s
        })
        .collect();
    PulseSequence::new(segments, format!("{} (mw off)", seq.label)).expect("structure preserved")
}

/// Contrast of a sequence against its microwave-off twin.
fn sequence_contrast(
    params: &SpinPairParams,
    seq: &PulseSequence,
    rho0: &DensityMatrix,
) -> Result<f64, SpinPairError> {
    let signal = run_sequence(params, seq, rho0)?;
    let reference = run_sequence(params, &zero_amplitude(seq), rho0)?;
    contrast_from_state(&signal, &reference, &params.weights)
}

fn collect_trace(
    x: Vec<f64>,
    values: Vec<Result<f64, SpinPairError>>,
    meta: TraceMeta,
) -> Result<ContrastTrace, SpinPairError> {
    let contrast = values.into_iter().collect::<Result<Vec<f64>, _>>()?;
    ContrastTrace::new(x, contrast, meta)
}

/// With Ω = 0 the signal and reference sequences of a pulsed protocol
/// coincide, so the contrast vanishes identically; the π timing 1/(2Ω)
/// is undefined, so no simulation is run.
fn null_trace(x: Vec<f64>, meta: TraceMeta) -> Result<ContrastTrace, SpinPairError> {
    let contrast = vec![0.0; x.len()];
    ContrastTrace::new(x, contrast, meta)
}

/// Rabi protocol: polarize, drive for τ, read out; one trace per relative
/// drive amplitude. The fitted oscillation frequency is Ω·a, linear in the
/// amplitude (the √power axis).
pub fn rabi_experiment(
    params: &SpinPairParams,
    tau_grid: &TimeGrid,
    drive_amplitudes: &[f64],
) -> Result<Vec<ContrastTrace>, SpinPairError> {
    params.validate()?;
    tau_grid.validate().map_err(SpinPairError::from)?;
    if drive_amplitudes.is_empty() {
        return Err(SpinPairError::InvalidInput("no drive amplitudes".into()));
    }
    if drive_amplitudes.iter().any(|a| !a.is_finite() || *a < 0.0) {
        return Err(SpinPairError::InvalidInput(
            "drive amplitudes must be finite and ≥ 0".into(),
        ));
    }
    let rho0 = polarized_state();
    let taus = tau_grid.times();
    drive_amplitudes
        .iter()
        .map(|&amplitude| {
            let values = par::map_indexed(taus.len(), |i| {
                let seq = pulses::rabi_seq(taus[i], amplitude)?;
                sequence_contrast(params, &seq, &rho0)
            });
            collect_trace(
                taus.clone(),
                values,
                TraceMeta {
                    protocol: format!("rabi amplitude={amplitude}"),
                    x_unit: XUnit::Microseconds,
                    params: params.echo(),
                },
            )
        })
        .collect()
}

/// Continuous-wave ODMR: steady-state contrast with the drive on versus
/// off, as a function of drive detuning.
pub fn cw_odmr_spectrum(
    params: &SpinPairParams,
    detuning_grid: &[f64],
) -> Result<ContrastTrace, SpinPairError> {
    params.validate()?;
    if params.pump_rate <= 0.0 {
        return Err(SpinPairError::InvalidParams(
            "cw ODMR needs pump_rate > 0".into(),
        ));
    }
    if detuning_grid.len() < 2 {
        return Err(SpinPairError::InvalidInput(
            "detuning grid too short".into(),
        ));
    }
    let values = par::map_indexed(detuning_grid.len(), |i| {
        let p = params.with_detuning(detuning_grid[i]);
        let on = steady_state(&build_liouvillian(&p, true, true)?)?;
        let off = steady_state(&build_liouvillian(&p, false, true)?)?;
        contrast_from_state(&on, &off, &p.weights)
    });
    collect_trace(
        detuning_grid.to_vec(),
        values,
        TraceMeta {
            protocol: "odmr".into(),
            x_unit: XUnit::Megahertz,
            params: params.echo(),
        },
    )
}

/// T1 protocol: polarize, dark wait τ, π pulse, read out, against the
/// π-less reference.
pub fn t1_experiment(
    params: &SpinPairParams,
    tau_grid: &TimeGrid,
) -> Result<ContrastTrace, SpinPairError> {
    params.validate()?;
    tau_grid.validate().map_err(SpinPairError::from)?;
    if tau_grid.t0 < 0.0 || tau_grid.t1 > 100.0 {
        return Err(SpinPairError::InvalidInput(
            "T1 wait grid must lie within [0, 100] µs".into(),
        ));
    }
    let rho0 = polarized_state();
    let taus = tau_grid.times();
    let meta = TraceMeta {
        protocol: "t1".into(),
        x_unit: XUnit::Microseconds,
        params: params.echo(),
    };
    if params.omega == 0.0 {
        return null_trace(taus, meta);
    }
    let values = par::map_indexed(taus.len(), |i| {
        let signal = run_sequence(params, &pulses::t1_seq(taus[i], true, params.omega)?, &rho0)?;
        let reference = run_sequence(
            params,
            &pulses::t1_seq(taus[i], false, params.omega)?,
            &rho0,
        )?;
        contrast_from_state(&signal, &reference, &params.weights)
    });
    collect_trace(taus, values, meta)
}

/// Ramsey protocol at an explicit drive detuning: π/2, free evolution τ,
/// π/2. The fringe oscillates at the detuning.
pub fn ramsey_experiment(
    params: &SpinPairParams,
    tau_grid: &TimeGrid,
    detuning: f64,
) -> Result<ContrastTrace, SpinPairError> {
    let p = params.with_detuning(detuning);
    p.validate()?;
    tau_grid.validate().map_err(SpinPairError::from)?;
    let rho0 = polarized_state();
    let taus = tau_grid.times();
    let meta = TraceMeta {
        protocol: "ramsey".into(),
        x_unit: XUnit::Microseconds,
        params: p.echo(),
    };
    if p.omega == 0.0 {
        return null_trace(taus, meta);
    }
    let values = par::map_indexed(taus.len(), |i| {
        let seq = pulses::ramsey_seq(taus[i], p.omega)?;
        sequence_contrast(&p, &seq, &rho0)
    });
    collect_trace(taus, values, meta)
}

/// Hahn echo: π/2 – τ – π – τ – π/2, plotted against the total free
/// evolution 2τ.
pub fn hahn_experiment(
    params: &SpinPairParams,
    tau_grid: &TimeGrid,
) -> Result<ContrastTrace, SpinPairError> {
    params.validate()?;
    tau_grid.validate().map_err(SpinPairError::from)?;
    let rho0 = polarized_state();
    let taus = tau_grid.times();
    let meta = TraceMeta {
        protocol: "hahn".into(),
        x_unit: XUnit::Microseconds,
        params: params.echo(),
    };
    let x = taus.iter().map(|t| 2.0 * t).collect();
    if params.omega == 0.0 {
        return null_trace(x, meta);
    }
    let values = par::map_indexed(taus.len(), |i| {
        let seq = pulses::hahn_seq(taus[i], params.omega)?;
        sequence_contrast(params, &seq, &rho0)
    });
    collect_trace(x, values, meta)
}

/// CPMG-N, plotted against the total free evolution 2Nτ.
pub fn cpmg_experiment(
    params: &SpinPairParams,
    n_pulses: u32,
    tau_grid: &TimeGrid,
) -> Result<ContrastTrace, SpinPairError> {
    params.validate()?;
    tau_grid.validate().map_err(SpinPairError::from)?;
    let rho0 = polarized_state();
    let taus = tau_grid.times();
    let meta = TraceMeta {
        protocol: format!("cpmg n={n_pulses}"),
        x_unit: XUnit::Microseconds,
        params: params.echo(),
    };
    let x = taus.iter().map(|t| 2.0 * n_pulses as f64 * t).collect();
    if params.omega == 0.0 {
        return null_trace(x, meta);
    }
    let values = par::map_indexed(taus.len(), |i| {
        let seq = pulses::cpmg_seq(n_pulses, taus[i], params.omega, pulses::CPMG_PI_PHASE)?;
        sequence_contrast(params, &seq, &rho0)
    });
    collect_trace(x, values, meta)
}

/// Charge-state recovery: polarize, dark wait τ, read out, with no
/// microwave anywhere. The contrast compares the readout-start state with
/// the polarization-end state; in the regime where recombination is much
/// slower than the dark recovery rate the trace is a single exponential
/// with timescale 1/dark_recovery_rate.
pub fn charge_recovery_experiment(
    params: &SpinPairParams,
    tau_grid: &TimeGrid,
) -> Result<ContrastTrace, SpinPairError> {
    params.validate()?;
    tau_grid.validate().map_err(SpinPairError::from)?;
    let rho0 = polarized_state();
    let polarize = PulseSequence::new(
        vec![
            PulseSegment::laser(pulses::DEFAULT_LASER_DURATION)?,
            PulseSegment::readout(),
        ],
        "polarize",
    )?;
    let after_polarize = run_sequence(params, &polarize, &rho0)?;
    let taus = tau_grid.times();
    let values = par::map_indexed(taus.len(), |i| {
        let mut segments = vec![PulseSegment::laser(pulses::DEFAULT_LASER_DURATION)?];
        if taus[i] > 0.0 {
            segments.push(PulseSegment::wait(taus[i])?);
        }
        segments.push(PulseSegment::readout());
        let seq = PulseSequence::new(segments, format!("charge tau={}", taus[i]))?;
        let at_readout = run_sequence(params, &seq, &rho0)?;
        contrast_from_state(&at_readout, &after_polarize, &params.weights)
    });
    collect_trace(
        taus,
        values,
        TraceMeta {
            protocol: "charge".into(),
            x_unit: XUnit::Microseconds,
            params: params.echo(),
        },
    )
}

/// Spin-1/2 resonance frequency ν = g·μ_B·B/h in MHz for a field in Gauss.
pub fn resonance_frequency(field_gauss: f64, g: f64) -> f64 {
    g * MU_B_OVER_H_MHZ_PER_GAUSS * field_gauss
}

/// Weighted line-through-origin fit of frequency versus field, returning
/// (g, 1σ uncertainty).
pub fn fit_g_factor(data: &GFactorData) -> Result<(f64, f64), SpinPairError> {
    let spec = ModelSpec::new(Model::LineThroughOrigin);
    let init = initial_guess(&spec, &data.field_points, &data.frequencies)?;
    let fit = lm_fit(&spec, &data.field_points, &data.frequencies, None, &init)?;
    let slope = fit.params[0];
    let sigma_slope = fit.uncertainties()[0];
    Ok((
        slope / MU_B_OVER_H_MHZ_PER_GAUSS,
        sigma_slope / MU_B_OVER_H_MHZ_PER_GAUSS,
    ))
}

/// Fit a Rabi trace with a damped sinusoid and return the oscillation
/// frequency in MHz with its 1σ uncertainty.
pub fn fit_rabi_frequency(trace: &ContrastTrace) -> Result<(f64, f64), SpinPairError> {
    let spec = ModelSpec::new(Model::DampedSin);
    let init = initial_guess(&spec, &trace.x, &trace.contrast)?;
    let fit = lm_fit(&spec, &trace.x, &trace.contrast, None, &init)?;
    let omega = fit.params[2];
    let sigma = fit.uncertainties()[2];
    Ok((omega / (2.0 * PI), sigma / (2.0 * PI)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn lossless(omega: f64) -> SpinPairParams {
        SpinPairParams {
            omega,
            detuning: 0.0,
            gamma_10: 0.0,
            gamma_20: 0.0,
            gamma_phi: 0.0,
            pump_rate: 0.0,
            dark_recovery_rate: 0.0,
            weights: ReadoutWeights::default(),
        }
    }

    #[test]
    fn zero_params_give_zero_liouvillian() {
        let mut p = lossless(0.0);
        p.omega = 0.0;
        let l = build_liouvillian(&p, false, false).unwrap();
        assert!(l.matrix().iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn resonant_drive_oscillates_between_pair_levels() {
        let p = lossless(10.0);
        let l = build_liouvillian(&p, true, false).unwrap();
        let rho0 = polarized_state();
        let grid = TimeGrid::new(0.0, 0.3, 61).unwrap();
        let traj = qdyn::evolve(&rho0, &l, &grid).unwrap();
        for (t, state) in grid.times().into_iter().zip(&traj) {
            let expected = (PI * p.omega * t).sin().powi(2);
            assert_abs_diff_eq!(state.population(2), expected, epsilon = 1e-7);
            assert_abs_diff_eq!(state.population(0), 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn ground_population_monotone_under_decay() {
        let p = SpinPairParams {
            omega: 0.0,
            ..SpinPairParams::default()
        };
        let l = build_liouvillian(&p, false, false).unwrap();
        let grid = TimeGrid::new(0.0, 2.0, 41).unwrap();
        let traj = qdyn::evolve(&polarized_state(), &l, &grid).unwrap();
        let grounds: Vec<f64> = traj.iter().map(|s| s.population(0)).collect();
        for w in grounds.windows(2) {
            assert!(w[1] >= w[0] - 1e-10, "ground population decreased: {w:?}");
        }
    }

    #[test]
    fn contrast_basics() {
        let w = ReadoutWeights::default();
        let rho = polarized_state();
        assert_abs_diff_eq!(contrast_from_state(&rho, &rho, &w).unwrap(), 0.0);
        // Zero reference intensity errors out.
        let w01 = ReadoutWeights::new(0.0, 1.0, 0.0).unwrap();
        let rho1 = DensityMatrix::pure(DIM, 1);
        let rho2 = DensityMatrix::pure(DIM, 2);
        assert!(matches!(
            contrast_from_state(&rho1, &rho2, &w01),
            Err(SpinPairError::ZeroReferenceIntensity)
        ));
        // Forced arithmetic: weights (1, 1, 2), |2⟩ against |1⟩.
        let w112 = ReadoutWeights::new(1.0, 1.0, 2.0).unwrap();
        assert_abs_diff_eq!(
            contrast_from_state(&rho2, &rho1, &w112).unwrap(),
            1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn empty_sequence_leaves_state_unchanged() {
        let p = SpinPairParams::default();
        let seq = PulseSequence::new(vec![], "empty").unwrap();
        let rho0 = polarized_state();
        let out = run_sequence(&p, &seq, &rho0).unwrap();
        assert_abs_diff_eq!(out.population(1), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn pi_pulse_transfers_population() {
        let p = lossless(10.0);
        let seq = PulseSequence::new(
            vec![PulseSegment::microwave(pulses::pi_time(p.omega).unwrap(), 1.0, 0.0).unwrap()],
            "pi",
        )
        .unwrap();
        let out = run_sequence(&p, &seq, &polarized_state()).unwrap();
        assert_abs_diff_eq!(out.population(2), 1.0, epsilon = 1e-8);
    }

    #[test]
    fn polarizing_pulse_fills_pair_manifold() {
        let p = SpinPairParams {
            pump_rate: 10.0,
            gamma_10: 0.05,
            gamma_20: 0.05,
            gamma_phi: 1.0,
            omega: 10.0,
            detuning: 0.0,
            dark_recovery_rate: 1e-4,
            weights: ReadoutWeights::default(),
        };
        let seq = PulseSequence::new(
            vec![PulseSegment::laser(7.0).unwrap(), PulseSegment::readout()],
            "polarize",
        )
        .unwrap();
        let out = run_sequence(&p, &seq, &DensityMatrix::pure(DIM, 0)).unwrap();
        assert!(out.population(1) + out.population(2) > 0.99);
    }

    #[test]
    fn rabi_amplitude_zero_is_flat() {
        let p = SpinPairParams::default();
        let grid = TimeGrid::new(0.0, 0.2, 11).unwrap();
        let traces = rabi_experiment(&p, &grid, &[0.0]).unwrap();
        for c in &traces[0].contrast {
            assert_abs_diff_eq!(*c, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn lossless_rabi_has_full_visibility_at_drive_frequency() {
        let p = lossless(10.0);
        let grid = TimeGrid::new(0.0, 0.3, 121).unwrap();
        let trace = &rabi_experiment(&p, &grid, &[1.0]).unwrap()[0];
        // Reference stays in |1⟩, so C(τ) = (w2/w1 − 1)·sin²(πΩτ):
        // maxima at odd multiples of t_π, zeros at even ones.
        let c_at = |t: f64| {
            let idx = trace.x.iter().position(|&x| (x - t).abs() < 1e-9).unwrap();
            trace.contrast[idx]
        };
        let peak = (1.2 - 1.0) / 1.0;
        assert_abs_diff_eq!(c_at(0.05), peak, epsilon = 1e-6);
        assert_abs_diff_eq!(c_at(0.15), peak, epsilon = 1e-6);
        assert_abs_diff_eq!(c_at(0.1), 0.0, epsilon = 1e-6);
    }

    #[test]
    fn odmr_spectrum_is_even_and_vanishes_without_drive() {
        let p = SpinPairParams::default();
        let grid: Vec<f64> = (-10..=10).map(|k| k as f64).collect();
        let trace = cw_odmr_spectrum(&p, &grid).unwrap();
        let n = trace.x.len();
        for i in 0..n / 2 {
            assert_abs_diff_eq!(
                trace.contrast[i],
                trace.contrast[n - 1 - i],
                epsilon = 1e-10
            );
        }
        assert!(trace.contrast[n / 2] > 0.0, "resonant contrast positive");

        let mut quiet = p;
        quiet.omega = 0.0;
        let silent = cw_odmr_spectrum(&quiet, &grid).unwrap();
        for c in silent.contrast {
            assert_abs_diff_eq!(c, 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn t1_contrast_extremal_at_zero_wait_and_killed_by_fast_hopping() {
        let p = SpinPairParams {
            gamma_10: 0.001,
            gamma_20: 0.001,
            gamma_phi: 0.0339828,
            pump_rate: 10.0,
            dark_recovery_rate: 1e-6,
            ..SpinPairParams::default()
        };
        let grid = TimeGrid::new(0.0, 40.0, 21).unwrap();
        let trace = t1_experiment(&p, &grid).unwrap();
        let first = trace.contrast[0].abs();
        for c in &trace.contrast {
            assert!(c.abs() <= first + 1e-9, "contrast grew after waiting");
        }

        let fast = SpinPairParams {
            gamma_phi: 1e3,
            ..p
        };
        let killed = t1_experiment(&fast, &grid).unwrap();
        // The signal sequence is one π-pulse duration longer than the
        // reference, so recombination during the pulse leaves a residual
        // of order Γ·t_π ~ 1e-5 even with the spins fully mixed.
        for c in killed.contrast {
            assert!(c.abs() < 1e-4, "hopping should erase the π-pulse contrast");
        }
    }

    #[test]
    fn detuned_ramsey_oscillates_at_detuning() {
        let p = lossless(100.0);
        let delta = 20.0;
        let grid = TimeGrid::new(0.0, 0.15, 301).unwrap();
        let trace = ramsey_experiment(&p, &grid, delta).unwrap();
        // Period 1/δ = 0.05 µs: the trace repeats two grid periods later.
        let period_points = 100;
        for i in 0..trace.len() - period_points {
            assert_abs_diff_eq!(
                trace.contrast[i],
                trace.contrast[i + period_points],
                epsilon = 1e-6
            );
        }
        // And it is not constant.
        let spread = trace
            .contrast
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &c| {
                (lo.min(c), hi.max(c))
            });
        assert!(spread.1 - spread.0 > 1e-3, "fringe visible");

        let flat = ramsey_experiment(&p, &grid, 0.0).unwrap();
        let first = flat.contrast[0];
        for c in flat.contrast {
            assert_abs_diff_eq!(c, first, epsilon = 1e-7);
        }
    }

    #[test]
    fn charge_recovery_flat_without_recovery_channel() {
        let p = SpinPairParams {
            omega: 0.0,
            detuning: 0.0,
            gamma_10: 0.0,
            gamma_20: 0.0,
            gamma_phi: 1.0,
            pump_rate: 1.0,
            dark_recovery_rate: 0.0,
            weights: ReadoutWeights::new(0.8, 1.1, 1.1).unwrap(),
        };
        let grid = TimeGrid::new(0.0, 5000.0, 11).unwrap();
        let trace = charge_recovery_experiment(&p, &grid).unwrap();
        for c in trace.contrast {
            assert_abs_diff_eq!(c, 0.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn charge_recovery_timescale_matches_recovery_rate() {
        // Recombination far below the recovery rate: single exponential at
        // 1/dark_recovery_rate, and the long-time contrast saturates.
        let p = SpinPairParams {
            omega: 0.0,
            detuning: 0.0,
            gamma_10: 1e-6,
            gamma_20: 1e-6,
            gamma_phi: 1.0,
            pump_rate: 1.0,
            dark_recovery_rate: 5e-4,
            weights: ReadoutWeights::new(0.8, 1.1, 1.1).unwrap(),
        };
        let grid = TimeGrid::new(0.0, 10_000.0, 51).unwrap();
        let trace = charge_recovery_experiment(&p, &grid).unwrap();
        let spec = ModelSpec::new(Model::ExpDecay);
        let init = initial_guess(&spec, &trace.x, &trace.contrast).unwrap();
        let fit = lm_fit(&spec, &trace.x, &trace.contrast, None, &init).unwrap();
        assert!(fit.converged);
        let t_charge = fit.params[1];
        assert!(
            (t_charge - 2000.0).abs() / 2000.0 < 0.02,
            "fitted T_charge {t_charge} µs"
        );
        // Saturation: last two points agree to the saturation value.
        let n = trace.len();
        assert_abs_diff_eq!(trace.contrast[n - 1], trace.contrast[n - 2], epsilon = 2e-5);
    }

    #[test]
    fn resonance_frequency_values() {
        assert_abs_diff_eq!(resonance_frequency(0.0, 2.0), 0.0);
        assert_abs_diff_eq!(resonance_frequency(100.0, 2.0), 279.9249, epsilon = 1e-4);
        assert_abs_diff_eq!(resonance_frequency(1.0, 1.0), 1.3996245, epsilon = 1e-7);
    }

    #[test]
    fn g_factor_fit_recovers_noiseless_slopes() {
        for g in [2.0, 2.3] {
            let fields: Vec<f64> = (1..=8).map(|k| 25.0 * k as f64).collect();
            let freqs: Vec<f64> = fields.iter().map(|&b| resonance_frequency(b, g)).collect();
            let data = GFactorData::new(fields, freqs).unwrap();
            let (fitted, err) = fit_g_factor(&data).unwrap();
            assert_abs_diff_eq!(fitted, g, epsilon = 1e-9);
            assert!(err < 1e-9);
        }
    }

    #[test]
    fn g_factor_data_validation() {
        assert!(GFactorData::new(vec![10.0, 10.0], vec![1.0, 2.0]).is_err());
        assert!(GFactorData::new(vec![10.0], vec![1.0]).is_err());
    }

    #[test]
    fn params_validation() {
        let mut p = SpinPairParams::default();
        p.gamma_10 = -1.0;
        assert!(p.validate().is_err());
        let mut p = SpinPairParams::default();
        p.dark_recovery_rate = p.pump_rate + 1.0;
        assert!(p.validate().is_err());
        let equal = ReadoutWeights::new(1.0, 1.0, 1.0);
        assert!(equal.is_err());
    }
}
