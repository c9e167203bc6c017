//! Minimal deterministic SVG chart emitter for loss curves, metric bars
//! and sweep summaries. Output is a pure function of the data, so
//! re-rendering a report yields byte-identical files.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 32.0;
const MARGIN_B: f64 = 48.0;

const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn axis_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if lo == hi {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn chart_header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(
        s,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" font-family="monospace" font-size="14" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 1000.0 || v.abs() < 0.01 {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn axes(s: &mut String, x0: f64, x1: f64, y0: f64, y1: f64, xlabel: &str, ylabel: &str) {
    let px = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * (WIDTH - MARGIN_L - MARGIN_R);
    let py = |y: f64| HEIGHT - MARGIN_B - (y - y0) / (y1 - y0) * (HEIGHT - MARGIN_T - MARGIN_B);
    let _ = writeln!(
        s,
        r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        MARGIN_L,
        HEIGHT - MARGIN_B,
        WIDTH - MARGIN_R,
        HEIGHT - MARGIN_B
    );
    let _ = writeln!(
        s,
        r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        MARGIN_L,
        MARGIN_T,
        MARGIN_L,
        HEIGHT - MARGIN_B
    );
    for k in 0..=4 {
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" font-family="monospace" font-size="10" text-anchor="middle">{}</text>"#,
            px(fx),
            HEIGHT - MARGIN_B + 14.0,
            fmt_tick(fx)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" font-family="monospace" font-size="10" text-anchor="end">{}</text>"#,
            MARGIN_L - 4.0,
            py(fy) + 3.0,
            fmt_tick(fy)
        );
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{:.1}" x2="{}" y2="{:.1}" stroke="#dddddd"/>"##,
            MARGIN_L,
            py(fy),
            WIDTH - MARGIN_R,
            py(fy)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="monospace" font-size="12" text-anchor="middle">{}</text>"#,
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        HEIGHT - 8.0,
        escape(xlabel)
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" font-family="monospace" font-size="12" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        escape(ylabel)
    );
}

/// Multi-series line chart; each series is (name, points).
pub fn line_chart(
    title: &str,
    xlabel: &str,
    ylabel: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> String {
    let (x0, x1) = axis_range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
    let (y0, y1) = axis_range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    let px = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * (WIDTH - MARGIN_L - MARGIN_R);
    let py = |y: f64| HEIGHT - MARGIN_B - (y - y0) / (y1 - y0) * (HEIGHT - MARGIN_T - MARGIN_B);
    let mut s = chart_header(title);
    axes(&mut s, x0, x1, y0, y1, xlabel, ylabel);
    for (i, (name, points)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            path.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="monospace" font-size="11" fill="{color}">{}</text>"#,
            WIDTH - MARGIN_R - 120.0,
            MARGIN_T + 14.0 * (i as f64 + 1.0),
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Vertical bar chart; bars are (label, value).
pub fn bar_chart(title: &str, ylabel: &str, bars: &[(String, f64)]) -> String {
    let (y0, y1) = axis_range(bars.iter().map(|b| b.1).chain(std::iter::once(0.0)));
    let py = |y: f64| HEIGHT - MARGIN_B - (y - y0) / (y1 - y0) * (HEIGHT - MARGIN_T - MARGIN_B);
    let mut s = chart_header(title);
    axes(&mut s, 0.0, bars.len() as f64, y0, y1, "", ylabel);
    let span = WIDTH - MARGIN_L - MARGIN_R;
    let bw = span / bars.len() as f64;
    for (i, (label, v)) in bars.iter().enumerate() {
        let x = MARGIN_L + bw * i as f64 + bw * 0.15;
        let color = COLORS[i % COLORS.len()];
        let y_top = py(*v).min(py(0.0));
        let h = (py(0.0) - py(*v)).abs();
        let _ = writeln!(
            s,
            r#"<rect x="{x:.1}" y="{y_top:.1}" width="{:.1}" height="{h:.1}" fill="{color}" fill-opacity="0.8"/>"#,
            bw * 0.7
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" font-family="monospace" font-size="10" text-anchor="middle">{}</text>"#,
            x + bw * 0.35,
            HEIGHT - MARGIN_B + 14.0,
            escape(label)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="monospace" font-size="10" text-anchor="middle">{:.3}</text>"#,
            x + bw * 0.35,
            y_top - 4.0,
            v
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_deterministic() {
        let series = vec![("loss".to_string(), vec![(0.0, 1.0), (1.0, 0.5), (2.0, 0.25)])];
        let a = line_chart("t", "iter", "loss", &series);
        let b = line_chart("t", "iter", "loss", &series);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.ends_with("</svg>\n"));
        let bars = vec![("c1".to_string(), 0.8), ("c2".to_string(), 0.6)];
        assert_eq!(bar_chart("d", "dice", &bars), bar_chart("d", "dice", &bars));
    }
}
