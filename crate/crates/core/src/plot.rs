//! Minimal SVG line chart of per-step Avg and Last.

use std::fmt::Write as _;

use crate::metrics::AccuracyMatrix;

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;

fn polyline(points: &[(usize, f64)], steps: usize, color: &str) -> String {
    let x = |s: usize| {
        if steps <= 1 {
            PAD + (W - 2.0 * PAD) / 2.0
        } else {
            PAD + (s - 1) as f64 * (W - 2.0 * PAD) / (steps - 1) as f64
        }
    };
    let y = |v: f64| H - PAD - v * (H - 2.0 * PAD);
    let mut coords = String::new();
    let mut dots = String::new();
    for &(s, v) in points {
        let _ = write!(coords, "{:.2},{:.2} ", x(s), y(v));
        let _ = writeln!(dots, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, x(s), y(v));
    }
    format!(
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n{dots}",
        coords.trim_end()
    )
}

pub fn accuracy_curve_svg(m: &AccuracyMatrix, title: &str) -> String {
    let steps = m.steps();
    let avg: Vec<(usize, f64)> = (1..=steps).filter_map(|s| m.avg_accuracy(s).ok().map(|v| (s, v))).collect();
    let last: Vec<(usize, f64)> = (1..=steps).filter_map(|s| m.overall(s).map(|v| (s, v))).collect();
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(title));
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let yy = H - PAD - v * (H - 2.0 * PAD);
        let _ = writeln!(
            svg,
            r##"<line x1="{PAD}" y1="{yy:.2}" x2="{}" y2="{yy:.2}" stroke="#ddd"/><text x="{}" y="{:.2}" text-anchor="end">{v:.2}</text>"##,
            W - PAD,
            PAD - 6.0,
            yy + 4.0
        );
    }
    for s in 1..=steps {
        let xx = if steps <= 1 { W / 2.0 } else { PAD + (s - 1) as f64 * (W - 2.0 * PAD) / (steps - 1) as f64 };
        let _ = writeln!(svg, r#"<text x="{xx:.2}" y="{}" text-anchor="middle">{s}</text>"#, H - PAD + 16.0);
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">task</text>"#, W / 2.0, H - 10.0);
    svg.push_str(&polyline(&avg, steps, "#1f77b4"));
    svg.push_str(&polyline(&last, steps, "#d62728"));
    let _ = writeln!(
        svg,
        r##"<text x="{}" y="40" fill="#1f77b4">Avg</text><text x="{}" y="54" fill="#d62728">Last</text>"##,
        W - PAD - 30.0,
        W - PAD - 30.0
    );
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_point_per_step_and_series() {
        let mut m = AccuracyMatrix::new(3);
        m.push_row(vec![1.0], 1.0).unwrap();
        m.push_row(vec![0.5, 0.9], 0.7).unwrap();
        let svg = accuracy_curve_svg(&m, "a < b");
        assert_eq!(svg.matches("<circle").count(), 4);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("a &lt; b"));
        assert!(svg.ends_with("</svg>\n"));
    }
}
