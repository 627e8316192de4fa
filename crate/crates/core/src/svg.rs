//! Minimal SVG charts.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const PALETTE: [&str; 6] = ["#3b6ea5", "#d1603d", "#5a9e4b", "#8a5fb0", "#c9a227", "#4a9ca6"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn frame(title: &str, y_max: f64) -> String {
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    )
    .unwrap();
    let (x0, y0, y1) = (PAD, H - PAD, PAD);
    writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{}" y2="{y0}" stroke="black"/>"#, W - PAD / 2.0).unwrap();
    writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#).unwrap();
    for t in 0..=4 {
        let v = y_max * t as f64 / 4.0;
        let y = y0 - (y0 - y1) * t as f64 / 4.0;
        writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
            x0 - 4.0,
            y + 4.0,
            tick(v)
        )
        .unwrap();
    }
    s
}

fn tick(v: f64) -> String {
    if v == 0.0 || (v.abs() >= 0.01 && v.abs() < 1e5) {
        format!("{:.3}", v).trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.1e}")
    }
}

fn scale_max(values: impl Iterator<Item = f64>) -> f64 {
    let m = values.filter(|v| v.is_finite()).fold(0.0f64, f64::max);
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Vertical bars, one per label.
pub fn bar_chart(title: &str, labels: &[String], values: &[f64]) -> String {
    let y_max = scale_max(values.iter().copied());
    let mut s = frame(title, y_max);
    let plot_w = W - 1.5 * PAD;
    let slot = plot_w / values.len().max(1) as f64;
    let every = (labels.len() / 20).max(1);
    for (i, &v) in values.iter().enumerate() {
        let h = (H - 2.0 * PAD) * (v.max(0.0) / y_max);
        let x = PAD + i as f64 * slot + slot * 0.1;
        writeln!(
            s,
            r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="{}"/>"#,
            H - PAD - h,
            slot * 0.8,
            PALETTE[0]
        )
        .unwrap();
        if let Some(l) = labels.get(i).filter(|_| i % every == 0) {
            writeln!(
                s,
                r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
                x + slot * 0.4,
                H - PAD + 14.0,
                escape(l)
            )
            .unwrap();
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Bin counts over `[lo, hi]`.
pub fn histogram(title: &str, counts: &[u64], lo: f64, hi: f64) -> String {
    let labels: Vec<String> = (0..counts.len())
        .map(|b| tick(lo + (hi - lo) * b as f64 / counts.len() as f64))
        .collect();
    let values: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    bar_chart(title, &labels, &values)
}

/// One polyline per named series over shared x positions.
pub fn line_chart(title: &str, x: &[f64], series: &[(String, Vec<f64>)]) -> String {
    let y_max = scale_max(series.iter().flat_map(|(_, ys)| ys.iter().copied()));
    let mut s = frame(title, y_max);
    let (x_lo, x_hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if x_hi > x_lo { x_hi - x_lo } else { 1.0 };
    let px = |v: f64| PAD + (W - 1.5 * PAD) * (v - x_lo) / span;
    let py = |v: f64| H - PAD - (H - 2.0 * PAD) * (v / y_max);
    for &v in x {
        writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            px(v),
            H - PAD + 14.0,
            tick(v)
        )
        .unwrap();
    }
    for (k, (name, ys)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = x.iter().zip(ys).map(|(&a, &b)| format!("{:.1},{:.1}", px(a), py(b))).collect();
        writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            W - PAD * 2.5,
            PAD + 14.0 * k as f64,
            escape(name)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}
