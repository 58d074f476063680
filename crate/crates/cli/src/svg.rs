//! Minimal SVG line chart for telemetry streams. The CSV is the contract;
//! this rendering is a convenience for eyeballing reward curves.

use tso_core::trainer::TelemetryRecord;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 40.0;

struct Series<'a> {
    label: &'a str,
    color: &'a str,
    values: Vec<f64>,
}

fn polyline(values: &[f64], lo: f64, hi: f64, color: &str) -> String {
    let span = (hi - lo).max(1e-12);
    let n = values.len().max(2) as f64;
    let points: Vec<String> = values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let x = MARGIN + (WIDTH - 2.0 * MARGIN) * i as f64 / (n - 1.0);
            let y = HEIGHT - MARGIN - (HEIGHT - 2.0 * MARGIN) * (v - lo) / span;
            format!("{x:.1},{y:.1}")
        })
        .collect();
    format!(
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
        points.join(" ")
    )
}

/// Render chosen/rejected rewards and the gradient scale against step index.
pub fn telemetry_chart(records: &[TelemetryRecord]) -> String {
    let series = [
        Series {
            label: "reward_w",
            color: "#1f6fd6",
            values: records.iter().map(|r| r.reward_w).collect(),
        },
        Series {
            label: "reward_l",
            color: "#d62828",
            values: records.iter().map(|r| r.reward_l).collect(),
        },
        Series {
            label: "s",
            color: "#2a9d4e",
            values: records.iter().map(|r| r.s).collect(),
        },
    ];
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in &series {
        for &v in &s.values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>"
    );
    // axes
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"#444\"/>\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"#444\"/>",
        m = MARGIN,
        t = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN,
    ));
    svg.push_str(&format!(
        "<text x=\"{m}\" y=\"{y}\" font-size=\"11\" fill=\"#444\">{lo:.3}</text>\
         <text x=\"{m}\" y=\"{t}\" font-size=\"11\" fill=\"#444\">{hi:.3}</text>",
        m = 2.0,
        y = HEIGHT - MARGIN,
        t = MARGIN,
    ));
    for (i, s) in series.iter().enumerate() {
        svg.push_str(&polyline(&s.values, lo, hi, s.color));
        svg.push_str(&format!(
            "<text x=\"{x}\" y=\"16\" font-size=\"12\" fill=\"{color}\">{label}</text>",
            x = MARGIN + 90.0 * i as f64,
            color = s.color,
            label = s.label,
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
