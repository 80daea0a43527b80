//! Tiny SVG line-chart writer.
//!
//! Just enough to overlay a handful of named curves on shared axes:
//! polylines, a frame, min/max tick labels, and a legend. No plotting
//! dependency; the CSV written alongside each chart carries the same
//! numbers for any external tool.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 62.0;
const MARGIN_RIGHT: f64 = 18.0;
const MARGIN_TOP: f64 = 34.0;
const MARGIN_BOTTOM: f64 = 42.0;

/// One curve: shared x grid, y values, a legend label, and styling.
pub struct Curve<'a> {
    pub label: &'a str,
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub color: &'a str,
    /// SVG stroke-dasharray, empty for a solid line.
    pub dash: &'a str,
}

/// Renders curves onto one chart. The axes span the union of the curves'
/// finite values, with the y range floored at zero (the charts show
/// densities).
pub fn line_chart(title: &str, x_label: &str, curves: &[Curve]) -> String {
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (0.0f64, f64::NEG_INFINITY);
    for c in curves {
        for &v in c.x {
            if v.is_finite() {
                x_min = x_min.min(v);
                x_max = x_max.max(v);
            }
        }
        for &v in c.y {
            if v.is_finite() {
                y_min = y_min.min(v);
                y_max = y_max.max(v);
            }
        }
    }
    if !(x_min < x_max) {
        x_max = x_min + 1.0;
    }
    if !(y_min < y_max) {
        y_max = y_min + 1.0;
    }
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = move |v: f64| MARGIN_LEFT + (v - x_min) / (x_max - x_min) * plot_w;
    let sy = move |v: f64| MARGIN_TOP + (1.0 - (v - y_min) / (y_max - y_min)) * plot_h;

    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" \
         font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(out, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    let _ = writeln!(
        out,
        "<text x=\"{:.1}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
        MARGIN_LEFT + plot_w / 2.0,
        escape(title)
    );
    // Frame and tick labels.
    let _ = writeln!(
        out,
        "<rect x=\"{MARGIN_LEFT}\" y=\"{MARGIN_TOP}\" width=\"{plot_w:.1}\" height=\"{plot_h:.1}\" \
         fill=\"none\" stroke=\"#444\"/>"
    );
    for (v, anchor) in [(x_min, "start"), (x_max, "end")] {
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"{anchor}\">{v:.3}</text>",
            sx(v),
            HEIGHT - MARGIN_BOTTOM + 16.0
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 8.0,
        escape(x_label)
    );
    for v in [y_min, y_max] {
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.3}</text>",
            MARGIN_LEFT - 6.0,
            sy(v) + 4.0
        );
    }
    // Curves.
    for c in curves {
        let mut points = String::new();
        for (xv, yv) in c.x.iter().zip(c.y) {
            if xv.is_finite() && yv.is_finite() {
                let _ = write!(points, "{:.2},{:.2} ", sx(*xv), sy(*yv));
            }
        }
        let dash = if c.dash.is_empty() {
            String::new()
        } else {
            format!(" stroke-dasharray=\"{}\"", c.dash)
        };
        let _ = writeln!(
            out,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"{dash}/>",
            points.trim_end(),
            c.color
        );
    }
    // Legend, one row per curve in the top-left of the plot area.
    for (i, c) in curves.iter().enumerate() {
        let y = MARGIN_TOP + 16.0 + 16.0 * i as f64;
        let dash = if c.dash.is_empty() {
            String::new()
        } else {
            format!(" stroke-dasharray=\"{}\"", c.dash)
        };
        let _ = writeln!(
            out,
            "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"{}\" \
             stroke-width=\"1.5\"{dash}/><text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
            MARGIN_LEFT + 8.0,
            MARGIN_LEFT + 34.0,
            c.color,
            MARGIN_LEFT + 40.0,
            y + 4.0,
            escape(c.label)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_contains_every_curve_and_label() {
        let x = [0.0, 0.5, 1.0];
        let a = [0.1, 0.9, 0.2];
        let b = [0.2, 0.8, 0.1];
        let svg = line_chart(
            "overlay",
            "y",
            &[
                Curve { label: "direct", x: &x, y: &a, color: "#1f77b4", dash: "" },
                Curve { label: "marginalized", x: &x, y: &b, color: "#d62728", dash: "5 3" },
            ],
        );
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("direct") && svg.contains("marginalized"));
        assert!(svg.contains("stroke-dasharray=\"5 3\""));
    }

    #[test]
    fn degenerate_ranges_still_render() {
        let svg = line_chart(
            "flat",
            "y",
            &[Curve { label: "c", x: &[1.0, 1.0], y: &[0.0, 0.0], color: "#000", dash: "" }],
        );
        assert!(svg.contains("<polyline"));
    }

    #[test]
    fn markup_in_labels_is_escaped() {
        let svg = line_chart(
            "a < b",
            "x",
            &[Curve { label: "p&q", x: &[0.0, 1.0], y: &[0.0, 1.0], color: "#000", dash: "" }],
        );
        assert!(svg.contains("a &lt; b") && svg.contains("p&amp;q"));
    }
}
