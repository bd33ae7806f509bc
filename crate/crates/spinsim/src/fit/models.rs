//! The model library: closed forms and analytic gradients.

use super::FitError;
use serde::{Deserialize, Serialize};

/// Every fitted form used by the protocols in this crate.
///
/// * `Lorentzian`: A·(Γ/2)² / ((x−f0)² + (Γ/2)²) + c, Γ the FWHM.
/// * `ExpDecay`: a·exp(−x/T) + c.
/// * `DampedSin`: a·exp(−x/T)·sin(ωx + φ0) + c.
/// * `StretchedExp`: a·exp(−(x/T)^β) + c.
/// * `PowerLaw`: a·x^γ (x > 0).
/// * `LineThroughOrigin`: m·x.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    Lorentzian,
    ExpDecay,
    DampedSin,
    StretchedExp,
    PowerLaw,
    LineThroughOrigin,
}

impl Model {
    pub const ALL: [Model; 6] = [
        Model::Lorentzian,
        Model::ExpDecay,
        Model::DampedSin,
        Model::StretchedExp,
        Model::PowerLaw,
        Model::LineThroughOrigin,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Model::Lorentzian => "lorentzian",
            Model::ExpDecay => "exp_decay",
            Model::DampedSin => "damped_sin",
            Model::StretchedExp => "stretched_exp",
            Model::PowerLaw => "power_law",
            Model::LineThroughOrigin => "line_through_origin",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Model::ALL.into_iter().find(|m| m.name() == name)
    }

    pub fn n_params(&self) -> usize {
        match self {
            Model::Lorentzian => 4,
            Model::ExpDecay => 3,
            Model::DampedSin => 5,
            Model::StretchedExp => 4,
            Model::PowerLaw => 2,
            Model::LineThroughOrigin => 1,
        }
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            Model::Lorentzian => &["amplitude", "f0", "fwhm", "offset"],
            Model::ExpDecay => &["amplitude", "t_decay", "offset"],
            Model::DampedSin => &["amplitude", "t_decay", "omega", "phi0", "offset"],
            Model::StretchedExp => &["amplitude", "t_decay", "beta", "offset"],
            Model::PowerLaw => &["prefactor", "exponent"],
            Model::LineThroughOrigin => &["slope"],
        }
    }

    /// Default box bounds: timescales, widths and angular frequencies are
    /// positive, β is kept in [0.3, 3] to avoid equivalent-minima
    /// wandering, everything else is free.
    pub fn default_bounds(&self) -> Vec<(f64, f64)> {
        const FREE: (f64, f64) = (f64::NEG_INFINITY, f64::INFINITY);
        const POS: (f64, f64) = (1e-12, f64::INFINITY);
        match self {
            Model::Lorentzian => vec![FREE, FREE, POS, FREE],
            Model::ExpDecay => vec![FREE, POS, FREE],
            Model::DampedSin => vec![FREE, POS, POS, FREE, FREE],
            Model::StretchedExp => vec![FREE, POS, (0.3, 3.0), FREE],
            Model::PowerLaw => vec![FREE, FREE],
            Model::LineThroughOrigin => vec![FREE],
        }
    }

    pub(super) fn check_domain(&self, x: f64) -> Result<(), FitError> {
        match self {
            Model::PowerLaw if x <= 0.0 => Err(FitError::OutOfDomain {
                model: self.name(),
                x,
            }),
            Model::StretchedExp if x < 0.0 => Err(FitError::OutOfDomain {
                model: self.name(),
                x,
            }),
            _ => Ok(()),
        }
    }

    pub fn eval_at(&self, p: &[f64], x: f64) -> Result<f64, FitError> {
        self.check_domain(x)?;
        Ok(match self {
            Model::Lorentzian => {
                let hw2 = (p[2] / 2.0) * (p[2] / 2.0);
                let dx = x - p[1];
                p[0] * hw2 / (dx * dx + hw2) + p[3]
            }
            Model::ExpDecay => p[0] * (-x / p[1]).exp() + p[2],
            Model::DampedSin => p[0] * (-x / p[1]).exp() * (p[2] * x + p[3]).sin() + p[4],
            Model::StretchedExp => p[0] * (-(x / p[1]).powf(p[2])).exp() + p[3],
            Model::PowerLaw => p[0] * x.powf(p[1]),
            Model::LineThroughOrigin => p[0] * x,
        })
    }

    pub(super) fn gradient_at(&self, p: &[f64], x: f64, out: &mut [f64]) -> Result<(), FitError> {
        self.check_domain(x)?;
        match self {
            Model::Lorentzian => {
                let half = p[2] / 2.0;
                let hw2 = half * half;
                let dx = x - p[1];
                let denom = dx * dx + hw2;
                out[0] = hw2 / denom;
                out[1] = p[0] * hw2 * 2.0 * dx / (denom * denom);
                out[2] = p[0] * half * dx * dx / (denom * denom);
                out[3] = 1.0;
            }
            Model::ExpDecay => {
                let e = (-x / p[1]).exp();
                out[0] = e;
                out[1] = p[0] * e * x / (p[1] * p[1]);
                out[2] = 1.0;
            }
            Model::DampedSin => {
                let e = (-x / p[1]).exp();
                let arg = p[2] * x + p[3];
                let s = arg.sin();
                let c = arg.cos();
                out[0] = e * s;
                out[1] = p[0] * e * s * x / (p[1] * p[1]);
                out[2] = p[0] * e * c * x;
                out[3] = p[0] * e * c;
                out[4] = 1.0;
            }
            Model::StretchedExp => {
                let z = (x / p[1]).powf(p[2]);
                let e = (-z).exp();
                out[0] = e;
                out[1] = p[0] * e * p[2] * z / p[1];
                // β derivative: −a·e^{−z}·z·ln(x/T); the x → 0 limit is 0.
                out[2] = if x == 0.0 {
                    0.0
                } else {
                    -p[0] * e * z * (x / p[1]).ln()
                };
                out[3] = 1.0;
            }
            Model::PowerLaw => {
                let xg = x.powf(p[1]);
                out[0] = xg;
                out[1] = p[0] * xg * x.ln();
            }
            Model::LineThroughOrigin => {
                out[0] = x;
            }
        }
        Ok(())
    }
}
