//! Self-contained SVG line chart of normalized equity curves.

use std::fmt::Write;

const WIDTH: f64 = 900.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 60.0;
const MARGIN_RIGHT: f64 = 160.0;
const MARGIN_Y: f64 = 30.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// One named series. Values are divided by their first element before plotting.
pub struct Series<'a> {
    pub label: String,
    pub values: &'a [f64],
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders all series on shared axes. Output depends only on the inputs.
pub fn equity_svg(title: &str, series: &[Series<'_>]) -> String {
    let normalized: Vec<Vec<f64>> = series
        .iter()
        .map(|s| match s.values.first() {
            Some(&v0) if v0 > 0.0 => s.values.iter().map(|v| v / v0).collect(),
            _ => Vec::new(),
        })
        .collect();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in normalized.iter().flatten() {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    if !lo.is_finite() {
        (lo, hi) = (0.0, 2.0);
    }
    if hi - lo < 1e-9 {
        (lo, hi) = (lo - 0.5, hi + 0.5);
    }
    let n_max = normalized.iter().map(Vec::len).max().unwrap_or(0).max(2);
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - 2.0 * MARGIN_Y;
    let x = |i: usize| MARGIN_LEFT + plot_w * i as f64 / (n_max - 1) as f64;
    let y = |v: f64| MARGIN_Y + plot_h * (hi - v) / (hi - lo);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{MARGIN_LEFT}" y="{MARGIN_Y}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let yy = y(v);
        let _ = writeln!(
            svg,
            r##"<line x1="{MARGIN_LEFT}" y1="{yy:.2}" x2="{:.2}" y2="{yy:.2}" stroke="#dddddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{v:.3}</text>"##,
            MARGIN_LEFT + plot_w,
            MARGIN_LEFT - 6.0,
            yy + 4.0
        );
    }
    for (i, (s, vals)) in series.iter().zip(&normalized).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if !vals.is_empty() {
            let points: Vec<String> = vals
                .iter()
                .enumerate()
                .map(|(j, v)| format!("{:.2},{:.2}", x(j), y(*v)))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                points.join(" ")
            );
        }
        let ly = MARGIN_Y + 16.0 * i as f64 + 10.0;
        let lx = WIDTH - MARGIN_RIGHT + 12.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_polyline_per_series() {
        let a = [1.0, 2.0, 3.0];
        let b = [5.0, 4.0, 6.0];
        let svg = equity_svg(
            "t",
            &[
                Series { label: "A&B".into(), values: &a },
                Series { label: "C".into(), values: &b },
            ],
        );
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("A&amp;B"));
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    }

    #[test]
    fn flat_and_empty_inputs_render() {
        let flat = [3.0; 10];
        let svg = equity_svg("flat", &[Series { label: "F".into(), values: &flat }]);
        assert!(!svg.contains("NaN"));
        let svg = equity_svg("empty", &[]);
        assert!(svg.contains("</svg>"));
    }
}
