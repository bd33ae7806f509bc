//! Trace files: CSV with an `# unit=` comment line, a `x,contrast,sigma`
//! header, and values printed with 17 significant digits so parsing
//! round-trips bit-exactly. The sigma column is optional.

use crate::CliError;
use spinsim::spinpair::{ContrastTrace, TraceMeta, XUnit};
use std::io::Write;
use std::path::Path;

pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write a file atomically: to a sibling temp file first, then rename.
pub fn atomic_write(path: &Path, contents: &str) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)
            .map_err(|e| CliError::Io(format!("cannot create {}: {e}", tmp.display())))?;
        f.write_all(contents.as_bytes())
            .map_err(|e| CliError::Io(format!("cannot write {}: {e}", tmp.display())))?;
    }
    std::fs::rename(&tmp, path)
        .map_err(|e| CliError::Io(format!("cannot move into place {}: {e}", path.display())))
}

pub fn render_trace(trace: &ContrastTrace, sigma: Option<&[f64]>) -> String {
    let mut out = String::new();
    out.push_str(&format!("# unit={}\n", trace.meta.x_unit.as_str()));
    out.push_str("x,contrast,sigma\n");
    for (i, (&x, &c)) in trace.x.iter().zip(&trace.contrast).enumerate() {
        match sigma {
            Some(s) => out.push_str(&format!(
                "{},{},{}\n",
                format_float(x),
                format_float(c),
                format_float(s[i])
            )),
            None => out.push_str(&format!("{},{}\n", format_float(x), format_float(c))),
        }
    }
    out
}

pub fn save_trace(
    trace: &ContrastTrace,
    sigma: Option<&[f64]>,
    path: &Path,
) -> Result<(), CliError> {
    if let Some(s) = sigma {
        if s.len() != trace.x.len() {
            return Err(CliError::Config(
                "sigma column length does not match the trace".into(),
            ));
        }
    }
    atomic_write(path, &render_trace(trace, sigma))
}

/// Parse a trace file. Returns the trace (with its declared unit) and the
/// optional sigma column. Errors carry 1-based line numbers.
pub fn load_trace(path: &Path) -> Result<(ContrastTrace, Option<Vec<f64>>), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    let name = path.display();
    let mut unit: Option<XUnit> = None;
    let mut header_seen = false;
    let mut xs = Vec::new();
    let mut cs = Vec::new();
    let mut sigmas: Vec<f64> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            let comment = comment.trim();
            if let Some(u) = comment.strip_prefix("unit=") {
                unit = Some(XUnit::from_str_opt(u.trim()).ok_or_else(|| {
                    CliError::Config(format!(
                        "{name} line {line_no}: unknown unit '{}' (expected us, ns, MHz, N or G)",
                        u.trim()
                    ))
                })?);
            }
            continue;
        }
        if !header_seen {
            let lowered = line.to_ascii_lowercase();
            if !lowered.starts_with("x,contrast") {
                return Err(CliError::Config(format!(
                    "{name} line {line_no}: expected header 'x,contrast,sigma', got '{line}'"
                )));
            }
            header_seen = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 && fields.len() != 3 {
            return Err(CliError::Config(format!(
                "{name} line {line_no}: expected 2 or 3 comma-separated values, got {}",
                fields.len()
            )));
        }
        let parse = |field: &str, what: &str| -> Result<f64, CliError> {
            field.trim().parse::<f64>().map_err(|_| {
                CliError::Config(format!(
                    "{name} line {line_no}: cannot parse {what} value '{field}'"
                ))
            })
        };
        xs.push(parse(fields[0], "x")?);
        cs.push(parse(fields[1], "contrast")?);
        if fields.len() == 3 && !fields[2].trim().is_empty() {
            sigmas.push(parse(fields[2], "sigma")?);
        }
    }
    if !header_seen {
        return Err(CliError::Config(format!("{name}: missing CSV header")));
    }
    if xs.is_empty() {
        return Err(CliError::Config(format!("{name}: no data rows")));
    }
    if !sigmas.is_empty() && sigmas.len() != xs.len() {
        return Err(CliError::Config(format!(
            "{name}: sigma column present on only {} of {} rows",
            sigmas.len(),
            xs.len()
        )));
    }
    let unit = unit
        .ok_or_else(|| CliError::Config(format!("{name}: missing '# unit=' declaration line")))?;
    let meta = TraceMeta {
        protocol: "loaded".into(),
        x_unit: unit,
        params: String::new(),
    };
    let trace =
        ContrastTrace::new(xs, cs, meta).map_err(|e| CliError::Config(format!("{name}: {e}")))?;
    let sigma = if sigmas.is_empty() {
        None
    } else {
        Some(sigmas)
    };
    Ok((trace, sigma))
}
