//! JSON run configuration.
//!
//! Unknown keys are rejected everywhere; missing sections take the
//! documented defaults. Units follow the library: MHz, µs, µs⁻¹, Gauss.
//! `result.json` embeds the fully resolved configuration, so a run is
//! regenerable from its own output directory.

use crate::CliError;
use serde::{Deserialize, Serialize};
use spinsim::bath::OUParams;
use spinsim::qdyn::TimeGrid;
use spinsim::spinpair::SpinPairParams;
use std::path::{Path, PathBuf};

/// Hahn T2 used to calibrate the default scaling bath, µs.
pub const DEFAULT_HAHN_T2: f64 = 0.0645;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub model: SpinPairParams,
    pub protocol: ProtocolConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bath: Option<BathConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitConfig>,
    pub output: OutputConfig,
    pub seed: u64,
}

/// Uniformly spaced scan, reused for detuning grids (MHz).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearGrid {
    pub start: f64,
    pub stop: f64,
    pub points: usize,
}

impl LinearGrid {
    pub fn values(&self) -> Result<Vec<f64>, CliError> {
        if self.points < 2 || !(self.stop > self.start) {
            return Err(CliError::Config(format!(
                "grid needs stop > start and ≥ 2 points, got [{}, {}] x {}",
                self.start, self.stop, self.points
            )));
        }
        let step = (self.stop - self.start) / (self.points - 1) as f64;
        Ok((0..self.points)
            .map(|k| self.start + k as f64 * step)
            .collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    /// Protocol name; must match the subcommand when present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Wait/pulse-duration grid in µs (τ for hahn/cpmg, the plotted axis
    /// is the total free evolution there).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_grid: Option<TimeGrid>,
    /// Relative drive amplitudes for the Rabi power sweep.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub amplitudes: Option<Vec<f64>>,
    /// Detuning grid for CW ODMR, MHz.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detuning_grid: Option<LinearGrid>,
    /// Ramsey drive detuning, MHz.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detuning: Option<f64>,
    /// Number of π pulses for a single CPMG run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_pulses: Option<u32>,
    /// Pulse numbers for the scaling analysis.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_list: Option<Vec<u32>>,
    /// Monte-Carlo trajectories per coherence point.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_trajectories: Option<usize>,
    /// Sample count for `noise ou`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_steps: Option<usize>,
    /// True g-factor for the synthesized calibration line.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub g: Option<f64>,
    /// Field points for the calibration line, Gauss.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fields: Option<Vec<f64>>,
    /// Relative Gaussian noise applied to the synthesized frequencies.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_pct: Option<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BathConfig {
    pub sigma: f64,
    pub tau_c: f64,
    pub dt: f64,
}

impl BathConfig {
    /// Slow Lorentzian bath calibrated so the Hahn-echo T2 is 64.5 ns:
    /// τc = 50·T2 and (2πσ)²·T2³/(12τc) = 1.
    pub fn default_scaling_bath() -> Self {
        let t2 = DEFAULT_HAHN_T2;
        let tau_c = 50.0 * t2;
        let sigma = (12.0 * tau_c / t2.powi(3)).sqrt() / (2.0 * std::f64::consts::PI);
        Self {
            sigma,
            tau_c,
            dt: tau_c / 100.0,
        }
    }

    pub fn default_noise_bath() -> Self {
        Self {
            sigma: 2.0,
            tau_c: 1.0,
            dt: 0.05,
        }
    }

    pub fn with_seed(&self, seed: u64) -> OUParams {
        OUParams {
            sigma: self.sigma,
            tau_c: self.tau_c,
            dt: self.dt,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    /// Model name override; each protocol has a natural default.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    /// Initial-parameter override (length must match the model).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    pub plot: bool,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Load the config if a path was given, otherwise start from defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn check_protocol_name(&self, expected: &str) -> Result<(), CliError> {
        if let Some(name) = &self.protocol.name {
            if name != expected {
                return Err(CliError::Config(format!(
                    "config names protocol '{name}' but the command asked for '{expected}'"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = r#"{ "model": { "omega": 10.0, "bogus": 1 } }"#;
        assert!(serde_json::from_str::<ConfigFile>(bad).is_err());
        let bad_top = r#"{ "mode": {} }"#;
        assert!(serde_json::from_str::<ConfigFile>(bad_top).is_err());
    }

    #[test]
    fn missing_sections_take_defaults() {
        let cfg: ConfigFile = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.model.omega, 10.0);
        assert!(cfg.bath.is_none());
        assert!(!cfg.output.plot);
    }

    #[test]
    fn partial_model_section_merges_with_defaults() {
        let cfg: ConfigFile =
            serde_json::from_str(r#"{ "model": { "omega": 25.0 }, "seed": 7 }"#).unwrap();
        assert_eq!(cfg.model.omega, 25.0);
        assert_eq!(cfg.model.gamma_10, 10.0);
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn scaling_bath_calibration_hits_the_target_t2() {
        let b = BathConfig::default_scaling_bath();
        let t2 = DEFAULT_HAHN_T2;
        let chi = (2.0 * std::f64::consts::PI * b.sigma).powi(2) * t2.powi(3) / (12.0 * b.tau_c);
        assert!((chi - 1.0).abs() < 1e-12);
        assert!(b.tau_c >= 50.0 * t2);
        assert!(b.dt <= b.tau_c / 10.0);
    }
}
