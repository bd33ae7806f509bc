//! Subcommand execution: run the simulation or analysis, write trace
//! files, plots and the `result.json` record.

use crate::config::{BathConfig, ConfigFile, LinearGrid};
use crate::plot::{fit_overlay, render_plot, Series};
use crate::trace::{atomic_write, load_trace, save_trace};
use crate::{Cli, CliError, Command, CommonOpts, NoiseKind, Protocol};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use serde_json::json;
use spinsim::bath::{fit_scaling_exponent, ou_trace, t2_vs_n};
use spinsim::fit::{initial_guess, lm_fit, FitResult, Model, ModelSpec};
use spinsim::pulses;
use spinsim::qdyn::TimeGrid;
use spinsim::spinpair::{self, resonance_frequency, ContrastTrace, GFactorData, TraceMeta, XUnit};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Serialize)]
struct ToolInfo {
    name: &'static str,
    version: &'static str,
}

#[derive(Serialize)]
struct FitReport {
    model: String,
    params: BTreeMap<&'static str, f64>,
    uncertainties: BTreeMap<&'static str, f64>,
    chi2_reduced: f64,
    n_iter: usize,
    converged: bool,
}

fn fit_report(model: Model, fit: &FitResult) -> FitReport {
    let names = model.param_names();
    let err = fit.uncertainties();
    FitReport {
        model: model.name().to_string(),
        params: names
            .iter()
            .copied()
            .zip(fit.params.iter().copied())
            .collect(),
        uncertainties: names.iter().copied().zip(err).collect(),
        chi2_reduced: fit.chi2_reduced,
        n_iter: fit.n_iter,
        converged: fit.converged,
    }
}

#[derive(Serialize)]
struct RunRecord<'a> {
    tool: ToolInfo,
    /// Isolated on its own key; everything else is reproducible byte for
    /// byte given the same config and seed.
    timestamp: String,
    command: String,
    config: &'a ConfigFile,
    outputs: &'a [String],
    #[serde(skip_serializing_if = "Option::is_none")]
    fit: Option<&'a FitReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    derived: Option<&'a serde_json::Value>,
}

struct Emitter {
    out_dir: PathBuf,
    command: String,
    outputs: Vec<String>,
}

impl Emitter {
    fn new(out_dir: PathBuf, command: String) -> Result<Self, CliError> {
        std::fs::create_dir_all(&out_dir)
            .map_err(|e| CliError::Io(format!("cannot create {}: {e}", out_dir.display())))?;
        Ok(Self {
            out_dir,
            command,
            outputs: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn write_trace(
        &mut self,
        name: &str,
        trace: &ContrastTrace,
        sigma: Option<&[f64]>,
    ) -> Result<(), CliError> {
        save_trace(trace, sigma, &self.path(name))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn write_text(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        atomic_write(&self.path(name), contents)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn finish(
        mut self,
        config: &ConfigFile,
        fit: Option<&FitReport>,
        derived: Option<&serde_json::Value>,
    ) -> Result<(), CliError> {
        self.outputs.push("result.json".to_string());
        let record = RunRecord {
            tool: ToolInfo {
                name: "spinsim",
                version: env!("CARGO_PKG_VERSION"),
            },
            timestamp: chrono::Utc::now().to_rfc3339(),
            command: self.command.clone(),
            config,
            outputs: &self.outputs,
            fit,
            derived,
        };
        let text = serde_json::to_string_pretty(&record)
            .map_err(|e| CliError::Io(format!("cannot encode result.json: {e}")))?;
        atomic_write(&self.path("result.json"), &(text + "\n"))
    }
}

fn resolve_common(opts: &CommonOpts, cfg: &mut ConfigFile) -> (PathBuf, u64, bool) {
    let out_dir = opts
        .out
        .clone()
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    let seed = opts.seed.unwrap_or(cfg.seed);
    let plot = opts.plot || cfg.output.plot;
    cfg.output.dir = Some(out_dir.clone());
    cfg.output.plot = plot;
    cfg.seed = seed;
    (out_dir, seed, plot)
}

fn fit_model_for(protocol: Protocol) -> Model {
    match protocol {
        Protocol::Rabi | Protocol::Ramsey => Model::DampedSin,
        Protocol::Odmr => Model::Lorentzian,
        Protocol::T1 | Protocol::Charge => Model::ExpDecay,
        Protocol::Hahn | Protocol::Cpmg => Model::StretchedExp,
    }
}

fn default_tau_grid(protocol: Protocol) -> TimeGrid {
    let (t0, t1, n_points) = match protocol {
        Protocol::Rabi => (0.0, 0.6, 121),
        Protocol::Odmr => (0.0, 1.0, 2), // unused
        Protocol::T1 => (0.0, 45.0, 46),
        Protocol::Ramsey => (0.0, 0.15, 151),
        Protocol::Hahn => (0.005, 0.4, 40),
        Protocol::Cpmg => (0.002, 0.1, 40),
        // The demonstration rate set saturates within microseconds; runs
        // in a recovery-dominated regime (slow recombination) should set
        // a grid reaching several 1/dark_recovery_rate instead.
        Protocol::Charge => (0.0, 10.0, 51),
    };
    TimeGrid { t0, t1, n_points }
}

/// Fit with the configured or heuristic init; non-convergence maps to the
/// dedicated exit code.
fn run_fit(
    model: Model,
    x: &[f64],
    y: &[f64],
    sigma: Option<&[f64]>,
    init_override: Option<&[f64]>,
) -> Result<(ModelSpec, FitResult), CliError> {
    let spec = ModelSpec::new(model);
    let init = match init_override {
        Some(v) => v.to_vec(),
        None => initial_guess(&spec, x, y)?,
    };
    let fit = lm_fit(&spec, x, y, sigma, &init)?;
    if !fit.converged {
        return Err(CliError::Fit(format!(
            "{} fit did not converge in {} iterations",
            model.name(),
            fit.n_iter
        )));
    }
    Ok((spec, fit))
}

fn trace_series(label: &str, trace: &ContrastTrace) -> Series {
    Series {
        label: label.to_string(),
        x: trace.x.clone(),
        y: trace.contrast.clone(),
        markers: true,
    }
}

fn resolve_fit_model(cfg: &ConfigFile, default: Model) -> Result<Model, CliError> {
    match cfg.fit.as_ref().and_then(|f| f.model.as_deref()) {
        Some(name) => Model::from_name(name)
            .ok_or_else(|| CliError::Config(format!("unknown fit model '{name}'"))),
        None => Ok(default),
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate {
            protocol,
            opts,
            dump_seq,
        } => simulate(protocol, &opts, dump_seq),
        Command::Fit { model, trace, opts } => fit_file(&model, &trace, &opts),
        Command::Noise {
            kind: NoiseKind::Ou { opts },
        } => noise_ou(&opts),
        Command::Scaling { opts } => scaling(&opts),
        Command::Gfactor { opts } => gfactor(&opts),
    }
}

fn simulate(protocol: Protocol, opts: &CommonOpts, dump_seq: bool) -> Result<(), CliError> {
    let mut cfg = ConfigFile::load_or_default(opts.config.as_deref())?;
    cfg.check_protocol_name(protocol.name())?;
    cfg.protocol.name = Some(protocol.name().to_string());
    let (out_dir, _seed, plot) = resolve_common(opts, &mut cfg);
    let mut emitter = Emitter::new(out_dir, format!("simulate {}", protocol.name()))?;
    let params = cfg.model;
    params.validate()?;
    let fit_init = cfg.fit.as_ref().and_then(|f| f.init.clone());

    let mut fit_out: Option<FitReport> = None;
    let mut derived: Option<serde_json::Value> = None;
    let mut plot_series: Vec<Series> = Vec::new();
    let mut plot_title = format!("{} simulation", protocol.name());
    let x_label;

    match protocol {
        Protocol::Rabi => {
            let grid = *cfg
                .protocol
                .tau_grid
                .get_or_insert(default_tau_grid(protocol));
            let amplitudes = cfg
                .protocol
                .amplitudes
                .get_or_insert(vec![0.25, 0.5, 1.0, 2.0])
                .clone();
            let traces = spinpair::rabi_experiment(&params, &grid, &amplitudes)?;
            let mut table = Vec::new();
            for (i, (trace, &amplitude)) in traces.iter().zip(&amplitudes).enumerate() {
                let name = format!("rabi_{i:02}.csv");
                emitter.write_trace(&name, trace, None)?;
                plot_series.push(trace_series(&format!("a = {amplitude}"), trace));
                if amplitude > 0.0 {
                    let (freq, err) = spinpair::fit_rabi_frequency(trace)?;
                    table.push(json!({
                        "amplitude": amplitude,
                        "frequency_mhz": freq,
                        "sigma_mhz": err,
                    }));
                }
            }
            // Frequency versus amplitude line through the origin.
            let pairs: Vec<(f64, f64)> = table
                .iter()
                .map(|row| {
                    (
                        row["amplitude"].as_f64().expect("set above"),
                        row["frequency_mhz"].as_f64().expect("set above"),
                    )
                })
                .collect();
            let line = if pairs.len() >= 2 {
                let sxx: f64 = pairs.iter().map(|p| p.0 * p.0).sum();
                let sxy: f64 = pairs.iter().map(|p| p.0 * p.1).sum();
                let slope = sxy / sxx;
                let mean_y: f64 = pairs.iter().map(|p| p.1).sum::<f64>() / pairs.len() as f64;
                let ss_tot: f64 = pairs.iter().map(|p| (p.1 - mean_y).powi(2)).sum();
                let ss_res: f64 = pairs.iter().map(|p| (p.1 - slope * p.0).powi(2)).sum();
                let r_squared = if ss_tot > 0.0 {
                    1.0 - ss_res / ss_tot
                } else {
                    1.0
                };
                json!({ "slope_mhz_per_amplitude": slope, "r_squared": r_squared })
            } else {
                json!(null)
            };
            derived = Some(json!({
                "rabi_frequencies": table,
                "frequency_vs_amplitude": line,
            }));
            x_label = "pulse duration (us)";
            plot_title = "Rabi sweep".to_string();
            if dump_seq {
                let seq = pulses::rabi_seq(grid.t1, amplitudes[0])?;
                emitter.write_text(
                    "sequence.json",
                    &(serde_json::to_string_pretty(&seq).expect("serializable") + "\n"),
                )?;
            }
        }
        Protocol::Odmr => {
            let grid = *cfg.protocol.detuning_grid.get_or_insert(LinearGrid {
                start: -8.0,
                stop: 8.0,
                points: 161,
            });
            let detunings = grid.values()?;
            let trace = spinpair::cw_odmr_spectrum(&params, &detunings)?;
            emitter.write_trace("odmr.csv", &trace, None)?;
            let model = resolve_fit_model(&cfg, fit_model_for(protocol))?;
            let (spec, fit) = run_fit(model, &trace.x, &trace.contrast, None, fit_init.as_deref())?;
            plot_series.push(trace_series("spectrum", &trace));
            if let Some(overlay) =
                fit_overlay(&spec, &fit.params, trace.x[0], *trace.x.last().unwrap())
            {
                plot_series.push(overlay);
            }
            fit_out = Some(fit_report(model, &fit));
            x_label = "detuning (MHz)";
            plot_title = "CW ODMR spectrum".to_string();
            if dump_seq {
                eprintln!("warning: --dump-seq ignored for odmr (continuous-wave protocol)");
            }
        }
        Protocol::T1 | Protocol::Ramsey | Protocol::Hahn | Protocol::Cpmg | Protocol::Charge => {
            let grid = *cfg
                .protocol
                .tau_grid
                .get_or_insert(default_tau_grid(protocol));
            let trace = match protocol {
                Protocol::T1 => spinpair::t1_experiment(&params, &grid)?,
                Protocol::Ramsey => {
                    let detuning = *cfg.protocol.detuning.get_or_insert(20.0);
                    spinpair::ramsey_experiment(&params, &grid, detuning)?
                }
                Protocol::Hahn => spinpair::hahn_experiment(&params, &grid)?,
                Protocol::Cpmg => {
                    let n = *cfg.protocol.n_pulses.get_or_insert(8);
                    spinpair::cpmg_experiment(&params, n, &grid)?
                }
                Protocol::Charge => spinpair::charge_recovery_experiment(&params, &grid)?,
                _ => unreachable!(),
            };
            let name = format!("{}.csv", protocol.name());
            emitter.write_trace(&name, &trace, None)?;
            let model = resolve_fit_model(&cfg, fit_model_for(protocol))?;
            let (spec, fit) = run_fit(model, &trace.x, &trace.contrast, None, fit_init.as_deref())?;
            plot_series.push(trace_series(protocol.name(), &trace));
            if let Some(overlay) =
                fit_overlay(&spec, &fit.params, trace.x[0], *trace.x.last().unwrap())
            {
                plot_series.push(overlay);
            }
            fit_out = Some(fit_report(model, &fit));
            x_label = match protocol {
                Protocol::Hahn | Protocol::Cpmg => "total free evolution (us)",
                _ => "wait time (us)",
            };
            if dump_seq {
                let omega = params.omega;
                let seq = match protocol {
                    Protocol::T1 => Some(pulses::t1_seq(grid.t1, true, omega)?),
                    Protocol::Ramsey => Some(pulses::ramsey_seq(grid.t1, omega)?),
                    Protocol::Hahn => Some(pulses::hahn_seq(grid.t1, omega)?),
                    Protocol::Cpmg => Some(pulses::cpmg_seq(
                        cfg.protocol.n_pulses.unwrap_or(8),
                        grid.t1,
                        omega,
                        pulses::CPMG_PI_PHASE,
                    )?),
                    _ => None,
                };
                match seq {
                    Some(seq) => emitter.write_text(
                        "sequence.json",
                        &(serde_json::to_string_pretty(&seq).expect("serializable") + "\n"),
                    )?,
                    None => eprintln!(
                        "warning: --dump-seq ignored for {} (no microwave sequence)",
                        protocol.name()
                    ),
                }
            }
        }
    }

    if plot {
        let svg = render_plot(&plot_series, &plot_title, x_label, "contrast");
        emitter.write_text("plot.svg", &svg)?;
    }
    emitter.finish(&cfg, fit_out.as_ref(), derived.as_ref())
}

fn fit_file(model_name: &str, trace_path: &Path, opts: &CommonOpts) -> Result<(), CliError> {
    let model = Model::from_name(model_name)
        .ok_or_else(|| CliError::Config(format!("unknown fit model '{model_name}'")))?;
    let mut cfg = ConfigFile::load_or_default(opts.config.as_deref())?;
    let (out_dir, _seed, plot) = resolve_common(opts, &mut cfg);
    let (trace, sigma) = load_trace(trace_path)?;
    warn_on_unit_mismatch(model, trace.meta.x_unit);
    let fit_init = cfg.fit.as_ref().and_then(|f| f.init.clone());
    let mut emitter = Emitter::new(
        out_dir,
        format!("fit {model_name} {}", trace_path.display()),
    )?;
    let (spec, fit) = run_fit(
        model,
        &trace.x,
        &trace.contrast,
        sigma.as_deref(),
        fit_init.as_deref(),
    )?;
    if plot {
        let mut series = vec![trace_series("data", &trace)];
        if let Some(overlay) = fit_overlay(&spec, &fit.params, trace.x[0], *trace.x.last().unwrap())
        {
            series.push(overlay);
        }
        let svg = render_plot(
            &series,
            &format!("{} fit", model.name()),
            &format!("x ({})", trace.meta.x_unit.as_str()),
            "contrast",
        );
        emitter.write_text("plot.svg", &svg)?;
    }
    let report = fit_report(model, &fit);
    emitter.finish(&cfg, Some(&report), None)
}

fn warn_on_unit_mismatch(model: Model, unit: XUnit) {
    let expected: &[XUnit] = match model {
        Model::Lorentzian => &[XUnit::Megahertz],
        Model::ExpDecay | Model::DampedSin | Model::StretchedExp => {
            &[XUnit::Microseconds, XUnit::Nanoseconds]
        }
        Model::PowerLaw => &[XUnit::Count],
        Model::LineThroughOrigin => &[XUnit::Gauss, XUnit::Megahertz],
    };
    if !expected.contains(&unit) {
        eprintln!(
            "warning: trace declares unit '{}', unusual for a {} fit",
            unit.as_str(),
            model.name()
        );
    }
}

fn noise_ou(opts: &CommonOpts) -> Result<(), CliError> {
    let mut cfg = ConfigFile::load_or_default(opts.config.as_deref())?;
    cfg.check_protocol_name("ou")?;
    cfg.protocol.name = Some("ou".to_string());
    let (out_dir, seed, plot) = resolve_common(opts, &mut cfg);
    let bath_cfg = *cfg.bath.get_or_insert(BathConfig::default_noise_bath());
    let n_steps = *cfg.protocol.n_steps.get_or_insert(100_000);
    let bath = bath_cfg.with_seed(seed);
    bath.validate()?;
    let samples = ou_trace(&bath, n_steps)?;
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let variance =
        samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (samples.len() as f64 - 1.0);
    let lag1 = samples[..samples.len() - 1]
        .iter()
        .zip(&samples[1..])
        .map(|(a, b)| (a - mean) * (b - mean))
        .sum::<f64>()
        / (samples.len() as f64 - 1.0);
    let x: Vec<f64> = (0..n_steps).map(|k| k as f64 * bath.dt).collect();
    let trace = ContrastTrace::new(
        x,
        samples,
        TraceMeta {
            protocol: "ou".into(),
            x_unit: XUnit::Microseconds,
            params: format!("sigma={} tau_c={} dt={}", bath.sigma, bath.tau_c, bath.dt),
        },
    )?;
    let mut emitter = Emitter::new(out_dir, "noise ou".to_string())?;
    emitter.write_trace("ou.csv", &trace, None)?;
    if plot {
        let head = 2000.min(trace.x.len());
        let series = Series {
            label: "ou noise".into(),
            x: trace.x[..head].to_vec(),
            y: trace.contrast[..head].to_vec(),
            markers: false,
        };
        emitter.write_text(
            "plot.svg",
            &render_plot(&[series], "OU frequency noise", "t (us)", "delta nu (MHz)"),
        )?;
    }
    let derived = json!({
        "sample_mean_mhz": mean,
        "sample_variance_mhz2": variance,
        "target_variance_mhz2": bath.sigma * bath.sigma,
        "lag1_autocorrelation": lag1 / variance,
        "target_lag1_autocorrelation": (-bath.dt / bath.tau_c).exp(),
        "n_steps": n_steps,
    });
    emitter.finish(&cfg, None, Some(&derived))
}

fn scaling(opts: &CommonOpts) -> Result<(), CliError> {
    let mut cfg = ConfigFile::load_or_default(opts.config.as_deref())?;
    cfg.check_protocol_name("scaling")?;
    cfg.protocol.name = Some("scaling".to_string());
    let (out_dir, seed, plot) = resolve_common(opts, &mut cfg);
    let bath_cfg = *cfg.bath.get_or_insert(BathConfig::default_scaling_bath());
    let n_list = cfg
        .protocol
        .n_list
        .get_or_insert(vec![1, 2, 4, 8, 16, 32])
        .clone();
    let n_traj = *cfg.protocol.n_trajectories.get_or_insert(10_000);
    let omega = cfg.model.omega;
    let bath = bath_cfg.with_seed(seed);
    let points = t2_vs_n(&bath, &n_list, omega, n_traj)?;
    let (gamma, prefactor, gamma_err) = fit_scaling_exponent(&points)?;
    let trace = ContrastTrace::new(
        points.iter().map(|p| p.0 as f64).collect(),
        points.iter().map(|p| p.1).collect(),
        TraceMeta {
            protocol: "scaling".into(),
            x_unit: XUnit::Count,
            params: format!(
                "sigma={} tau_c={} dt={} n_traj={n_traj}",
                bath.sigma, bath.tau_c, bath.dt
            ),
        },
    )?;
    let mut emitter = Emitter::new(out_dir, "scaling".to_string())?;
    emitter.write_trace("scaling.csv", &trace, None)?;
    if plot {
        let mut series = vec![Series {
            label: "T2(N)".into(),
            x: trace.x.clone(),
            y: trace.contrast.clone(),
            markers: true,
        }];
        let spec = ModelSpec::new(Model::PowerLaw);
        if let Some(overlay) = fit_overlay(
            &spec,
            &[prefactor, gamma],
            trace.x[0],
            *trace.x.last().unwrap(),
        ) {
            series.push(overlay);
        }
        emitter.write_text(
            "plot.svg",
            &render_plot(&series, "CPMG coherence scaling", "N pulses", "T2 (us)"),
        )?;
    }
    let derived = json!({
        "points": points.iter().map(|&(n, t2)| json!({ "n": n, "t2_us": t2 })).collect::<Vec<_>>(),
        "gamma": gamma,
        "gamma_std_err": gamma_err,
        "prefactor_us": prefactor,
    });
    emitter.finish(&cfg, None, Some(&derived))
}

fn gfactor(opts: &CommonOpts) -> Result<(), CliError> {
    let mut cfg = ConfigFile::load_or_default(opts.config.as_deref())?;
    cfg.check_protocol_name("gfactor")?;
    cfg.protocol.name = Some("gfactor".to_string());
    let (out_dir, seed, plot) = resolve_common(opts, &mut cfg);
    let g_true = *cfg.protocol.g.get_or_insert(2.0);
    let fields = cfg
        .protocol
        .fields
        .get_or_insert((1..=8).map(|k| 25.0 * k as f64).collect())
        .clone();
    let noise_pct = *cfg.protocol.noise_pct.get_or_insert(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let freqs: Vec<f64> = fields
        .iter()
        .map(|&b| {
            let clean = resonance_frequency(b, g_true);
            let noise: f64 = rng.sample(StandardNormal);
            clean * (1.0 + noise_pct / 100.0 * noise)
        })
        .collect();
    let data = GFactorData::new(fields.clone(), freqs.clone())?;
    let (g, g_err) = spinpair::fit_g_factor(&data)?;
    let trace = ContrastTrace::new(
        fields,
        freqs,
        TraceMeta {
            protocol: "gfactor".into(),
            x_unit: XUnit::Gauss,
            params: format!("g_true={g_true} noise_pct={noise_pct}"),
        },
    )?;
    let mut emitter = Emitter::new(out_dir, "gfactor".to_string())?;
    emitter.write_trace("gfactor.csv", &trace, None)?;
    if plot {
        let mut series = vec![Series {
            label: "data".into(),
            x: trace.x.clone(),
            y: trace.contrast.clone(),
            markers: true,
        }];
        let spec = ModelSpec::new(Model::LineThroughOrigin);
        if let Some(overlay) = fit_overlay(
            &spec,
            &[g * spinpair::MU_B_OVER_H_MHZ_PER_GAUSS],
            0.0,
            *trace.x.last().unwrap(),
        ) {
            series.push(overlay);
        }
        emitter.write_text(
            "plot.svg",
            &render_plot(&series, "Resonance vs field", "B (G)", "frequency (MHz)"),
        )?;
    }
    let derived = json!({
        "g": g,
        "g_std_err": g_err,
        "g_true": g_true,
        "noise_pct": noise_pct,
    });
    emitter.finish(&cfg, None, Some(&derived))
}
