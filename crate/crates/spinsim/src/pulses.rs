//! Pulse-sequence representation and builders for the standard ODMR
//! protocols: Rabi, T1, Ramsey, Hahn echo and CPMG-N.
//!
//! Sequences are ordered lists of timed segments (laser, microwave, wait,
//! readout) that compile losslessly to piecewise-constant control flags for
//! the simulator. Microwave phases rotate the drive axis within the driven
//! two-level subspace.

use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};
use thiserror::Error;

/// Default polarization pulse length, µs.
pub const DEFAULT_LASER_DURATION: f64 = 7.0;

/// Default phase of CPMG π pulses relative to the π/2 pulses.
pub const CPMG_PI_PHASE: f64 = FRAC_PI_2;

#[derive(Debug, Error)]
pub enum PulseError {
    #[error("segment duration must be finite and ≥ 0, got {0}")]
    BadDuration(f64),
    #[error("microwave amplitude must be finite and ≥ 0, got {0}")]
    BadAmplitude(f64),
    #[error("phase must be finite, got {0}")]
    BadPhase(f64),
    #[error("Rabi frequency must be > 0, got {0} MHz")]
    NonPositiveOmega(f64),
    #[error("CPMG needs at least one π pulse, got n = {0}")]
    EmptyCpmg(u32),
    #[error("a readout segment must be the last segment")]
    ReadoutNotLast,
    #[error("at most one readout segment is allowed")]
    MultipleReadouts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Laser,
    Microwave,
    Wait,
    Readout,
}

/// One timed segment. `amplitude` and `phase` are meaningful for microwave
/// segments only and are zero otherwise; a readout duration is an optional
/// integration window (default 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseSegment {
    pub kind: SegmentKind,
    pub duration: f64,
    pub amplitude: f64,
    pub phase: f64,
}

fn check_duration(duration: f64) -> Result<f64, PulseError> {
    if !duration.is_finite() || duration < 0.0 {
        return Err(PulseError::BadDuration(duration));
    }
    Ok(duration)
}

impl PulseSegment {
    pub fn laser(duration: f64) -> Result<Self, PulseError> {
        Ok(Self {
            kind: SegmentKind::Laser,
            duration: check_duration(duration)?,
            amplitude: 0.0,
            phase: 0.0,
        })
    }

    pub fn microwave(duration: f64, amplitude: f64, phase: f64) -> Result<Self, PulseError> {
        if !amplitude.is_finite() || amplitude < 0.0 {
            return Err(PulseError::BadAmplitude(amplitude));
        }
        if !phase.is_finite() {
            return Err(PulseError::BadPhase(phase));
        }
        Ok(Self {
            kind: SegmentKind::Microwave,
            duration: check_duration(duration)?,
            amplitude,
            phase: phase.rem_euclid(2.0 * PI),
        })
    }

    pub fn wait(duration: f64) -> Result<Self, PulseError> {
        Ok(Self {
            kind: SegmentKind::Wait,
            duration: check_duration(duration)?,
            amplitude: 0.0,
            phase: 0.0,
        })
    }

    pub fn readout() -> Self {
        Self {
            kind: SegmentKind::Readout,
            duration: 0.0,
            amplitude: 0.0,
            phase: 0.0,
        }
    }

    pub fn readout_window(duration: f64) -> Result<Self, PulseError> {
        Ok(Self {
            kind: SegmentKind::Readout,
            duration: check_duration(duration)?,
            amplitude: 0.0,
            phase: 0.0,
        })
    }
}

/// An ordered pulse sequence. At most one readout segment is allowed and it
/// must come last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseSequence {
    segments: Vec<PulseSegment>,
    pub label: String,
}

impl PulseSequence {
    pub fn new(segments: Vec<PulseSegment>, label: impl Into<String>) -> Result<Self, PulseError> {
        let readouts = segments
            .iter()
            .filter(|s| s.kind == SegmentKind::Readout)
            .count();
        if readouts > 1 {
            return Err(PulseError::MultipleReadouts);
        }
        if readouts == 1 && segments.last().map(|s| s.kind) != Some(SegmentKind::Readout) {
            return Err(PulseError::ReadoutNotLast);
        }
        Ok(Self {
            segments,
            label: label.into(),
        })
    }

    pub fn segments(&self) -> &[PulseSegment] {
        &self.segments
    }

    pub fn total_duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }
}

/// π-pulse duration for a drive of ordinary Rabi frequency `omega` (MHz):
/// 1/(2Ω) µs.
pub fn pi_time(omega: f64) -> Result<f64, PulseError> {
    if !(omega > 0.0) || !omega.is_finite() {
        return Err(PulseError::NonPositiveOmega(omega));
    }
    Ok(1.0 / (2.0 * omega))
}

fn push_wait(segments: &mut Vec<PulseSegment>, tau: f64) -> Result<(), PulseError> {
    if tau > 0.0 {
        segments.push(PulseSegment::wait(tau)?);
    } else {
        check_duration(tau)?;
    }
    Ok(())
}

/// Polarize, drive for τ at the given relative amplitude, read out.
/// τ = 0 yields no microwave segment.
pub fn rabi_seq(tau: f64, amplitude: f64) -> Result<PulseSequence, PulseError> {
    let mut segments = vec![PulseSegment::laser(DEFAULT_LASER_DURATION)?];
    if tau > 0.0 {
        segments.push(PulseSegment::microwave(tau, amplitude, 0.0)?);
    } else {
        check_duration(tau)?;
    }
    segments.push(PulseSegment::readout());
    PulseSequence::new(segments, format!("rabi tau={tau}"))
}

/// Polarize, wait in the dark for τ, optionally flip with a π pulse, read
/// out.
pub fn t1_seq(tau: f64, with_pi: bool, omega: f64) -> Result<PulseSequence, PulseError> {
    let mut segments = vec![PulseSegment::laser(DEFAULT_LASER_DURATION)?];
    push_wait(&mut segments, tau)?;
    if with_pi {
        segments.push(PulseSegment::microwave(pi_time(omega)?, 1.0, 0.0)?);
    }
    segments.push(PulseSegment::readout());
    PulseSequence::new(segments, format!("t1 tau={tau}"))
}

/// Polarize, π/2, free evolution τ, π/2, read out.
pub fn ramsey_seq(tau: f64, omega: f64) -> Result<PulseSequence, PulseError> {
    let half_pi = pi_time(omega)? / 2.0;
    let mut segments = vec![
        PulseSegment::laser(DEFAULT_LASER_DURATION)?,
        PulseSegment::microwave(half_pi, 1.0, 0.0)?,
    ];
    push_wait(&mut segments, tau)?;
    segments.push(PulseSegment::microwave(half_pi, 1.0, 0.0)?);
    segments.push(PulseSegment::readout());
    PulseSequence::new(segments, format!("ramsey tau={tau}"))
}

/// Polarize, π/2, τ, π, τ, π/2, read out. Total free evolution 2τ.
pub fn hahn_seq(tau: f64, omega: f64) -> Result<PulseSequence, PulseError> {
    let t_pi = pi_time(omega)?;
    let half_pi = t_pi / 2.0;
    let mut segments = vec![
        PulseSegment::laser(DEFAULT_LASER_DURATION)?,
        PulseSegment::microwave(half_pi, 1.0, 0.0)?,
    ];
    push_wait(&mut segments, tau)?;
    segments.push(PulseSegment::microwave(t_pi, 1.0, CPMG_PI_PHASE)?);
    push_wait(&mut segments, tau)?;
    segments.push(PulseSegment::microwave(half_pi, 1.0, 0.0)?);
    segments.push(PulseSegment::readout());
    PulseSequence::new(segments, format!("hahn tau={tau}"))
}

/// Polarize, π/2, then n π pulses at τ, 3τ, …, (2n−1)τ on the free-evolution
/// clock, closing π/2 after a final delay τ. Total free evolution 2nτ.
pub fn cpmg_seq(n: u32, tau: f64, omega: f64, pi_phase: f64) -> Result<PulseSequence, PulseError> {
    if n < 1 {
        return Err(PulseError::EmptyCpmg(n));
    }
    let t_pi = pi_time(omega)?;
    let half_pi = t_pi / 2.0;
    let mut segments = vec![
        PulseSegment::laser(DEFAULT_LASER_DURATION)?,
        PulseSegment::microwave(half_pi, 1.0, 0.0)?,
    ];
    push_wait(&mut segments, tau)?;
    segments.push(PulseSegment::microwave(t_pi, 1.0, pi_phase)?);
    for _ in 1..n {
        push_wait(&mut segments, 2.0 * tau)?;
        segments.push(PulseSegment::microwave(t_pi, 1.0, pi_phase)?);
    }
    push_wait(&mut segments, tau)?;
    segments.push(PulseSegment::microwave(half_pi, 1.0, 0.0)?);
    segments.push(PulseSegment::readout());
    PulseSequence::new(segments, format!("cpmg n={n} tau={tau}"))
}

/// A flattened segment: control flags plus drive amplitude and phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompiledSegment {
    pub mw_on: bool,
    pub laser_on: bool,
    pub amplitude: f64,
    pub phase: f64,
    pub duration: f64,
}

/// Lossless flattening of a sequence to control flags. The readout maps to
/// a laser-on marker whose duration is its integration window (0 by
/// default).
pub fn compile(seq: &PulseSequence) -> Result<Vec<CompiledSegment>, PulseError> {
    seq.segments()
        .iter()
        .map(|s| {
            Ok(match s.kind {
                SegmentKind::Laser => CompiledSegment {
                    mw_on: false,
                    laser_on: true,
                    amplitude: 0.0,
                    phase: 0.0,
                    duration: s.duration,
                },
                SegmentKind::Microwave => CompiledSegment {
                    mw_on: true,
                    laser_on: false,
                    amplitude: s.amplitude,
                    phase: s.phase,
                    duration: s.duration,
                },
                SegmentKind::Wait => CompiledSegment {
                    mw_on: false,
                    laser_on: false,
                    amplitude: 0.0,
                    phase: 0.0,
                    duration: s.duration,
                },
                SegmentKind::Readout => CompiledSegment {
                    mw_on: false,
                    laser_on: true,
                    amplitude: 0.0,
                    phase: 0.0,
                    duration: s.duration,
                },
            })
        })
        .collect()
}
