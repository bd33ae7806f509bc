//! Minimal self-contained SVG plotting: axes, ticks, legend, data series
//! and an optional dense fit overlay. Output is deterministic for
//! identical inputs (fixed canvas, fixed palette, fixed float formatting).

use std::fmt::Write;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 520.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 55.0;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

pub struct Series {
    pub label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Lines with markers for data, a plain line for fit overlays.
    pub markers: bool,
}

struct Range {
    lo: f64,
    hi: f64,
}

impl Range {
    fn of(values: impl Iterator<Item = f64>) -> Self {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() || !hi.is_finite() {
            return Self { lo: 0.0, hi: 1.0 };
        }
        if lo == hi {
            let pad = lo.abs().max(1.0) * 0.1;
            return Self {
                lo: lo - pad,
                hi: hi + pad,
            };
        }
        let pad = (hi - lo) * 0.05;
        Self {
            lo: lo - pad,
            hi: hi + pad,
        }
    }

    fn to_px(&self, v: f64, px_lo: f64, px_hi: f64) -> f64 {
        px_lo + (v - self.lo) / (self.hi - self.lo) * (px_hi - px_lo)
    }

    /// Round tick positions at a 1/2/5 step covering the range.
    fn ticks(&self) -> Vec<f64> {
        let span = self.hi - self.lo;
        let raw = span / 5.0;
        let mag = 10f64.powf(raw.log10().floor());
        let norm = raw / mag;
        let step = if norm < 1.5 {
            mag
        } else if norm < 3.5 {
            2.0 * mag
        } else if norm < 7.5 {
            5.0 * mag
        } else {
            10.0 * mag
        };
        let first = (self.lo / step).ceil() * step;
        let mut ticks = Vec::new();
        let mut t = first;
        while t <= self.hi + step * 1e-9 {
            // Snap tiny float debris to zero so labels stay clean.
            ticks.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
            t += step;
        }
        ticks
    }
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 1e4 || v.abs() < 1e-3 {
        format!("{v:.2e}")
    } else {
        let s = format!("{v:.4}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        s.to_string()
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Render series (and fit overlays) to a standalone SVG string.
pub fn render_plot(series: &[Series], title: &str, x_label: &str, y_label: &str) -> String {
    let xr = Range::of(series.iter().flat_map(|s| s.x.iter().copied()));
    let yr = Range::of(series.iter().flat_map(|s| s.y.iter().copied()));
    let px = |v: f64| xr.to_px(v, MARGIN_L, WIDTH - MARGIN_R);
    let py = |v: f64| yr.to_px(v, HEIGHT - MARGIN_B, MARGIN_T);

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    );
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    let _ = write!(
        svg,
        "<text x=\"{:.1}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
        WIDTH / 2.0,
        xml_escape(title)
    );

    // Grid and ticks.
    for t in xr.ticks() {
        let x = px(t);
        let _ = write!(
            svg,
            "<line x1=\"{x:.2}\" y1=\"{:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n",
            MARGIN_T,
            HEIGHT - MARGIN_B
        );
        let _ = write!(
            svg,
            "<text x=\"{x:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
            HEIGHT - MARGIN_B + 18.0,
            fmt_tick(t)
        );
    }
    for t in yr.ticks() {
        let y = py(t);
        let _ = write!(
            svg,
            "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n",
            MARGIN_L,
            WIDTH - MARGIN_R
        );
        let _ = write!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"end\">{}</text>\n",
            MARGIN_L - 8.0,
            y + 4.0,
            fmt_tick(t)
        );
    }

    // Axes.
    let _ = write!(
        svg,
        "<rect x=\"{MARGIN_L}\" y=\"{MARGIN_T}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"black\" stroke-width=\"1\"/>\n",
        WIDTH - MARGIN_L - MARGIN_R,
        HEIGHT - MARGIN_T - MARGIN_B
    );
    let _ = write!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{}</text>\n",
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        HEIGHT - 12.0,
        xml_escape(x_label)
    );
    let _ = write!(
        svg,
        "<text x=\"18\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\" transform=\"rotate(-90 18 {:.1})\">{}</text>\n",
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        xml_escape(y_label)
    );

    // Series.
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut points = String::new();
        for (&x, &y) in s.x.iter().zip(&s.y) {
            let _ = write!(points, "{:.2},{:.2} ", px(x), py(y));
        }
        let _ = write!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"{}\"/>\n",
            points.trim_end(),
            if s.markers { 1.2 } else { 2.0 }
        );
        if s.markers {
            for (&x, &y) in s.x.iter().zip(&s.y) {
                let _ = write!(
                    svg,
                    "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.4\" fill=\"{color}\"/>\n",
                    px(x),
                    py(y)
                );
            }
        }
        // Legend entry.
        let ly = MARGIN_T + 16.0 + 18.0 * i as f64;
        let _ = write!(
            svg,
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            WIDTH - MARGIN_R - 160.0,
            WIDTH - MARGIN_R - 136.0
        );
        let _ = write!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>\n",
            WIDTH - MARGIN_R - 130.0,
            ly + 4.0,
            xml_escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Dense model curve for overlaying a fit, sampled at 512 points.
pub fn fit_overlay(
    spec: &spinsim::fit::ModelSpec,
    params: &[f64],
    x_lo: f64,
    x_hi: f64,
) -> Option<Series> {
    const SAMPLES: usize = 512;
    let xs: Vec<f64> = (0..SAMPLES)
        .map(|k| x_lo + (x_hi - x_lo) * k as f64 / (SAMPLES - 1) as f64)
        .collect();
    let ys = spinsim::fit::eval_model(spec, params, &xs).ok()?;
    Some(Series {
        label: format!("fit: {}", spec.model.name()),
        x: xs,
        y: ys,
        markers: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat() -> Series {
        Series {
            label: "flat".into(),
            x: vec![0.0, 1.0, 2.0],
            y: vec![0.5, 0.5, 0.5],
            markers: true,
        }
    }

    #[test]
    fn output_is_valid_enough_xml_and_deterministic() {
        let a = render_plot(&[flat()], "title", "x (us)", "contrast");
        let b = render_plot(&[flat()], "title", "x (us)", "contrast");
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.trim_end().ends_with("</svg>"));
        assert_eq!(a.matches("<svg").count(), 1);
        assert_eq!(a.matches("</svg>").count(), 1);
        // No external references.
        assert!(!a.contains("http://") || a.contains("xmlns"));
        assert!(!a.contains("href"));
    }

    #[test]
    fn overlay_has_512_points() {
        let spec = spinsim::fit::ModelSpec::new(spinsim::fit::Model::ExpDecay);
        let s = fit_overlay(&spec, &[1.0, 2.0, 0.0], 0.0, 5.0).unwrap();
        assert_eq!(s.x.len(), 512);
        assert!(!s.markers);
    }
}
