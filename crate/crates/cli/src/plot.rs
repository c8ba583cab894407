//! Small hand-written SVG charts.

use std::fmt::Write;

const W: f64 = 480.0;
const H: f64 = 320.0;
const MARGIN: f64 = 48.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
}

/// Vertical bars, one per `(label, value)`.
pub fn bar_chart_svg(title: &str, bars: &[(String, f64)]) -> String {
    let mut out = String::new();
    header(&mut out);
    let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(title));
    let max = bars.iter().map(|b| b.1).fold(0.0f64, f64::max);
    let max = if max > 0.0 { max } else { 1.0 };
    let plot_w = W - 2.0 * MARGIN;
    let plot_h = H - 2.0 * MARGIN;
    let slot = plot_w / bars.len().max(1) as f64;
    let _ = writeln!(
        out,
        r#"<line x1="{MARGIN}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#,
        H - MARGIN,
        W - MARGIN
    );
    for (i, (label, v)) in bars.iter().enumerate() {
        let h = plot_h * v.max(0.0) / max;
        let x = MARGIN + i as f64 * slot + slot * 0.15;
        let y = H - MARGIN - h;
        let _ = writeln!(
            out,
            r##"<rect x="{x:.1}" y="{y:.1}" width="{:.1}" height="{h:.1}" fill="#4c72b0"/>"##,
            slot * 0.7
        );
        let cx = x + slot * 0.35;
        let _ = writeln!(out, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{v:.3e}</text>"#, y - 4.0);
        let _ = writeln!(
            out,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            H - MARGIN + 16.0,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// ROC curve with the chance diagonal.
pub fn roc_svg(points: &[(f64, f64)], auc: f64) -> String {
    let mut out = String::new();
    header(&mut out);
    let size = H - 2.0 * MARGIN;
    let x0 = (W - size) / 2.0;
    let px = |x: f64| x0 + x * size;
    let py = |y: f64| H - MARGIN - y * size;
    let _ = writeln!(
        out,
        r#"<rect x="{x0}" y="{MARGIN}" width="{size}" height="{size}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        out,
        r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#999" stroke-dasharray="4 3"/>"##,
        px(0.0),
        py(0.0),
        px(1.0),
        py(1.0)
    );
    let path: Vec<String> = points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
    let _ = writeln!(
        out,
        r##"<polyline points="{}" fill="none" stroke="#c44e52" stroke-width="2"/>"##,
        path.join(" ")
    );
    let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">ROC, AUC = {auc:.4}</text>"#, W / 2.0);
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">false positive rate</text>"#, W / 2.0, H - 16.0);
    let _ = writeln!(
        out,
        r#"<text x="{0}" y="{1}" text-anchor="middle" transform="rotate(-90 {0} {1})">true positive rate</text>"#,
        x0 - 12.0,
        H / 2.0
    );
    out.push_str("</svg>\n");
    out
}
