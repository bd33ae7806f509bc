//! Simulation and analysis toolkit for optically detected spin-pair defects.
//!
//! The crate models a three-level spin-pair system driven by laser and
//! microwave pulse sequences through a Lindblad master equation, simulates
//! dephasing under a classical Lorentzian (Ornstein-Uhlenbeck) noise bath,
//! and fits the resulting traces with the standard ODMR model library
//! (Lorentzian, exponential, damped sinusoid, stretched exponential,
//! power law, line through origin).
//!
//! Units: frequencies in MHz, rates in µs⁻¹, times in µs, magnetic fields
//! in Gauss. Generators carry the 2π internally; see [`qdyn`].
//!
//! Monte-Carlo trajectory averaging and parameter sweeps run on rayon when
//! the default `parallel` feature is enabled and fall back to sequential
//! loops otherwise; results are bit-identical either way.

pub mod bath;
pub mod fit;
mod par;
pub mod pulses;
pub mod qdyn;
pub mod spinpair;
