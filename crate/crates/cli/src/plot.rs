//! Static SVG line plot of a forecast against the recorded voltage.

use std::fmt::Write;

use tst_core::metrics::MetricsReport;
use tst_core::training::ForecastResult;

const WIDTH: f64 = 960.0;
const HEIGHT: f64 = 540.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;

const TRUE_COLOR: &str = "#1f77b4";
const PRED_COLOR: &str = "#d62728";

struct Frame {
    t0: f64,
    t1: f64,
    v0: f64,
    v1: f64,
}

impl Frame {
    fn x(&self, t: f64) -> f64 {
        LEFT + (t - self.t0) / (self.t1 - self.t0) * (WIDTH - LEFT - RIGHT)
    }

    // predictions outside the frame are pinned to its edge
    fn y(&self, v: f64) -> f64 {
        let v = v.clamp(self.v0, self.v1);
        TOP + (self.v1 - v) / (self.v1 - self.v0) * (HEIGHT - TOP - BOTTOM)
    }
}

fn polyline(out: &mut String, frame: &Frame, series: &str, color: &str, time: &[f64], values: &[f64]) {
    let _ = write!(out, r#"<polyline data-series="{series}" fill="none" stroke="{color}" stroke-width="1.2" points=""#);
    for (i, (&t, &v)) in time.iter().zip(values).enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{:.2},{:.2}", frame.x(t), frame.y(v));
    }
    out.push_str("\"/>\n");
}

/// Renders true and predicted voltage, one horizontal line per fault
/// threshold and vertical markers at each crossing found by `report`.
pub fn render_svg(forecast: &ForecastResult, report: &MetricsReport, origin: f64) -> String {
    let (t0, t1) = match (forecast.time.first(), forecast.time.last()) {
        (Some(&a), Some(&b)) if b > a => (a, b),
        (Some(&a), _) => (a, a + 1.0),
        _ => (0.0, 1.0),
    };
    // the frame follows the recorded voltage and thresholds, not a runaway forecast
    let mut lo = forecast.truth.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = forecast.truth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for e in &report.estimates {
        lo = lo.min(e.threshold_v);
        hi = hi.max(e.threshold_v);
    }
    if !(lo.is_finite() && hi.is_finite()) {
        lo = 0.0;
        hi = 1.0;
    }
    let pad = ((hi - lo) * 0.08).max(1e-3);
    let frame = Frame {
        t0,
        t1,
        v0: lo - pad,
        v1: hi + pad,
    };

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let _ = writeln!(out, r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##);

    for k in 0..=4 {
        let t = t0 + (t1 - t0) * k as f64 / 4.0;
        let v = frame.v0 + (frame.v1 - frame.v0) * k as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{t:.0}</text>"#,
            frame.x(t),
            HEIGHT - BOTTOM + 18.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.3}</text>"#,
            LEFT - 6.0,
            frame.y(v) + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">time (h)</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">stack voltage (V)</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );

    for e in &report.estimates {
        let y = frame.y(e.threshold_v);
        let _ = writeln!(
            out,
            r##"<line data-threshold="{}" x1="{LEFT}" x2="{:.2}" y1="{y:.2}" y2="{y:.2}" stroke="#888" stroke-dasharray="6 4"/>"##,
            e.fraction,
            WIDTH - RIGHT
        );
        let _ = writeln!(
            out,
            r##"<text x="{:.2}" y="{:.2}" text-anchor="end" fill="#555">FT {}%</text>"##,
            WIDTH - RIGHT - 4.0,
            y - 4.0,
            e.fraction * 100.0
        );
        for (rul, series, color) in [(e.rul_true, "true", TRUE_COLOR), (e.rul_pred, "pred", PRED_COLOR)] {
            if let Some(r) = rul {
                let x = frame.x(origin + r);
                let _ = writeln!(
                    out,
                    r#"<line data-crossing="{series}" x1="{x:.2}" x2="{x:.2}" y1="{y:.2}" y2="{:.2}" stroke="{color}" stroke-dasharray="2 3"/>"#,
                    HEIGHT - BOTTOM
                );
            }
        }
    }

    polyline(&mut out, &frame, "true", TRUE_COLOR, &forecast.time, &forecast.truth);
    polyline(&mut out, &frame, "pred", PRED_COLOR, &forecast.time, &forecast.pred);

    let lx = LEFT + 12.0;
    for (i, (label, color)) in [("true", TRUE_COLOR), ("predicted", PRED_COLOR)].iter().enumerate() {
        let y = TOP + 16.0 + 16.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<line x1="{lx}" x2="{:.2}" y1="{y:.2}" y2="{y:.2}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}">{label}</text>"#, lx + 26.0, y + 4.0);
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use tst_core::metrics::FaultThresholds;

    fn sample() -> (ForecastResult, MetricsReport) {
        let time: Vec<f64> = (0..200).map(|i| 500.0 + i as f64).collect();
        let truth: Vec<f64> = time.iter().map(|t| 3.25 - 0.0005 * (t - 500.0)).collect();
        let pred: Vec<f64> = time.iter().map(|t| 3.25 - 0.00052 * (t - 500.0)).collect();
        let f = ForecastResult { time, truth, pred };
        let r = MetricsReport::evaluate(&f.time, &f.truth, &f.pred, &FaultThresholds::default(), 500.0).unwrap();
        (f, r)
    }

    #[test]
    fn points_stay_inside_the_frame() {
        let (mut f, _) = sample();
        f.pred[10] = -1e9;
        let r = MetricsReport::evaluate(&f.time, &f.truth, &f.pred, &FaultThresholds::default(), 500.0).unwrap();
        let svg = render_svg(&f, &r, 500.0);
        let pred = svg.lines().find(|l| l.contains(r#"data-series="pred""#)).unwrap();
        let points = pred.split("points=\"").nth(1).unwrap().trim_end_matches("\"/>");
        for p in points.split(' ') {
            let (_, y) = p.split_once(',').unwrap();
            let y: f64 = y.parse().unwrap();
            assert!((TOP..=HEIGHT - BOTTOM).contains(&y));
        }
    }

    #[test]
    fn one_marker_per_crossing() {
        let (f, r) = sample();
        let svg = render_svg(&f, &r, 500.0);
        let crossings = r.estimates.iter().map(|e| e.rul_true.is_some() as usize + e.rul_pred.is_some() as usize).sum::<usize>();
        assert_eq!(svg.matches("data-crossing=").count(), crossings);
        assert_eq!(svg.matches("data-threshold=").count(), 5);
    }
}
