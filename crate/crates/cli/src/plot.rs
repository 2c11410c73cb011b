//! Minimal SVG line plots for rate-distortion curves.

use std::fmt::Write;

use nerfcast::metrics::RdRow;

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 260.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.1).max(hi.abs().max(1e-3) * 0.02);
    (lo - pad, hi + pad)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Series per variant in the given row order; one panel per metric.
pub fn rd_svg(rows: &[RdRow]) -> String {
    let mut variants: Vec<&str> = Vec::new();
    for r in rows {
        if !variants.contains(&r.variant.as_str()) {
            variants.push(&r.variant);
        }
    }
    let metrics: [(&str, fn(&RdRow) -> f64); 2] = [("PSNR (dB)", |r| r.quality.psnr), ("SSIM", |r| r.quality.ssim)];
    let width = 2.0 * (PANEL_W + MARGIN) + MARGIN;
    let height = PANEL_H + 2.0 * MARGIN + 18.0 * variants.len() as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (x_lo, x_hi) = range(rows.iter().map(|r| r.tradeoff.kbps));
    for (panel, (label, metric)) in metrics.iter().enumerate() {
        let (y_lo, y_hi) = range(rows.iter().map(metric));
        let ox = MARGIN + panel as f64 * (PANEL_W + MARGIN);
        let oy = MARGIN;
        let px = |x: f64| ox + (x - x_lo) / (x_hi - x_lo) * PANEL_W;
        let py = |y: f64| oy + PANEL_H - (y - y_lo) / (y_hi - y_lo) * PANEL_H;
        let _ = writeln!(
            svg,
            r#"<g class="panel" data-metric="{}"><rect x="{ox}" y="{oy}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="black"/>"#,
            escape(label)
        );
        for i in 0..=4 {
            let t = i as f64 / 4.0;
            let xv = x_lo + t * (x_hi - x_lo);
            let yv = y_lo + t * (y_hi - y_lo);
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xv:.2}</text><text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.3}</text>"#,
                px(xv),
                oy + PANEL_H + 14.0,
                ox - 4.0,
                py(yv) + 4.0
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">payload kbps</text><text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            ox + PANEL_W / 2.0,
            oy + PANEL_H + 30.0,
            ox + PANEL_W / 2.0,
            oy - 8.0,
            escape(label)
        );
        for (vi, v) in variants.iter().enumerate() {
            let color = COLORS[vi % COLORS.len()];
            let pts: Vec<&RdRow> = rows.iter().filter(|r| r.variant == *v).collect();
            let path: Vec<String> = pts
                .iter()
                .map(|r| format!("{:.2},{:.2}", px(r.tradeoff.kbps), py(metric(r))))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline class="series" data-variant="{}" points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                escape(v),
                path.join(" ")
            );
            for r in pts {
                let _ = writeln!(
                    svg,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}" data-variant="{}" data-setting="{}" data-kbps="{:.6}" data-value="{:.6}"/>"#,
                    px(r.tradeoff.kbps),
                    py(metric(r)),
                    escape(v),
                    escape(&r.setting),
                    r.tradeoff.kbps,
                    metric(r)
                );
            }
        }
        let _ = writeln!(svg, "</g>");
    }
    for (vi, v) in variants.iter().enumerate() {
        let y = MARGIN + PANEL_H + 48.0 + 18.0 * vi as f64;
        let color = COLORS[vi % COLORS.len()];
        let _ = writeln!(
            svg,
            r#"<line x1="{MARGIN}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            MARGIN + 20.0,
            MARGIN + 26.0,
            y + 4.0,
            escape(v)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use nerfcast::metrics::{QualityReport, TradeoffReport};

    fn row(variant: &str, kbps: f64, psnr: f64) -> RdRow {
        let quality = QualityReport {
            l1: 0.01,
            psnr,
            ssim: 0.9,
            frames: 3,
        };
        RdRow {
            variant: variant.into(),
            setting: "64x64".into(),
            tradeoff: TradeoffReport::new(&quality, kbps).unwrap(),
            quality,
        }
    }

    #[test]
    fn one_series_per_variant_and_panel() {
        let svg = rd_svg(&[row("raw", 30.0, 29.0), row("ft", 14.0, 28.5)]);
        assert_eq!(svg.matches(r#"class="series""#).count(), 4);
        assert_eq!(svg.matches("<circle").count(), 4);
        assert!(svg.contains(r#"data-kbps="14.000000""#));
    }
}
