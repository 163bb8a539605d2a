//! SVG rendering of S-curve families. Output depends only on the input
//! values, so identical curves give byte-identical files.

use std::fmt::Write;

use crate::scurve::{SCurve, ThresholdEstimate};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

/// Probability against log contrast, one polyline per curve. `estimates[i]`,
/// when present, adds dashed (NCT) and dotted (100% onset) markers for
/// curve `i` in its colour.
pub fn render_svg(curves: &[SCurve], estimates: &[ThresholdEstimate]) -> String {
    let xs = curves.iter().flat_map(|c| c.log_contrasts());
    let (mut x_lo, mut x_hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
        (lo.min(x), hi.max(x))
    });
    if !x_lo.is_finite() {
        (x_lo, x_hi) = (0.0, 1.0);
    }
    if x_hi - x_lo < 1e-9 {
        x_hi = x_lo + 1e-3;
    }
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let px = |x: f64| LEFT + (x - x_lo) / (x_hi - x_lo) * plot_w;
    let py = |p: f64| TOP + (1.0 - p) * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let p = i as f64 / 4.0;
        let y = py(p);
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{p:.2}</text>"##,
            LEFT + plot_w,
            LEFT - 6.0,
            y + 4.0
        );
    }
    for i in 0..=5 {
        let x = x_lo + (x_hi - x_lo) * i as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<line x1="{0:.2}" y1="{1:.2}" x2="{0:.2}" y2="{2:.2}" stroke="black"/><text x="{0:.2}" y="{3:.2}" text-anchor="middle">{x:.3}</text>"#,
            px(x),
            TOP + plot_h,
            TOP + plot_h + 5.0,
            TOP + plot_h + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">log contrast</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{0:.2}" text-anchor="middle" transform="rotate(-90 14 {0:.2})">event probability</text>"#,
        TOP + plot_h / 2.0
    );

    for (i, curve) in curves.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = curve
            .points()
            .iter()
            .map(|p| format!("{:.2},{:.2}", px(p.log_contrast), py(p.probability)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        );
        if let Some(e) = estimates.get(i) {
            for (value, dash) in [(e.nct_50, "6 3"), (e.theta_100, "2 2")] {
                if let Some(v) = value.filter(|v| v.is_finite()) {
                    let x = px(v.clamp(x_lo, x_hi));
                    let _ = writeln!(
                        s,
                        r#"<line x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{:.2}" stroke="{colour}" stroke-dasharray="{dash}"/>"#,
                        TOP + plot_h
                    );
                }
            }
        }
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = LEFT + plot_w + 12.0;
        let name = if curve.meta.baseline_lux > 0.0 {
            format!("{} lx", curve.meta.baseline_lux)
        } else if !curve.meta.stimulus.is_empty() {
            escape(&curve.meta.stimulus)
        } else {
            format!("curve {}", i + 1)
        };
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{colour}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{name} ({})</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            curve.polarity
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pixel::Polarity;
    use crate::scurve::{estimate, CurveMeta, Epsilon, ScurvePoint};

    fn curve(lux: f64) -> SCurve {
        let points = [(0.2, 0), (0.3, 0), (0.4, 100), (0.5, 100)]
            .iter()
            .map(|&(c, k)| ScurvePoint::new(c, 100, k).unwrap())
            .collect();
        SCurve::new(
            points,
            Polarity::On,
            CurveMeta {
                baseline_lux: lux,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn one_polyline_per_curve_with_legend() {
        let curves: Vec<SCurve> = (1..=9).map(|i| curve(i as f64 * 0.05)).collect();
        let svg = render_svg(&curves, &[]);
        assert_eq!(svg.matches("<polyline").count(), 9);
        assert!(svg.contains("0.45 lx (on)"));
        assert!(!svg.contains("stroke-dasharray"));
    }

    #[test]
    fn legend_falls_back_to_stimulus_name() {
        let mut c = curve(0.0);
        c.meta.stimulus = "a<b".into();
        assert!(render_svg(&[c], &[]).contains("a&lt;b (on)"));
    }

    #[test]
    fn markers_and_determinism() {
        let c = curve(100.0);
        let e = estimate(&c, Epsilon::Auto).unwrap();
        let a = render_svg(std::slice::from_ref(&c), std::slice::from_ref(&e));
        let b = render_svg(std::slice::from_ref(&c), std::slice::from_ref(&e));
        assert_eq!(a, b);
        assert_eq!(a.matches("stroke-dasharray").count(), 2);
    }
}
