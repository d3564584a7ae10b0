use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 320.0;
const MARGIN: f64 = 40.0;

/// Latency histogram as a standalone SVG document.
pub fn latency_svg(title: &str, latencies_ms: &[f64], bins: usize) -> String {
    let bins = bins.max(1);
    let max = latencies_ms.iter().copied().fold(0.0f64, f64::max).max(1e-9);
    let mut counts = vec![0usize; bins];
    for &v in latencies_ms {
        let i = ((v / max) * bins as f64) as usize;
        counts[i.min(bins - 1)] += 1;
    }
    let peak = counts.iter().copied().max().unwrap_or(0).max(1);
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let bar_w = plot_w / bins as f64;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    for (i, &c) in counts.iter().enumerate() {
        let h = plot_h * c as f64 / peak as f64;
        let _ = writeln!(
            svg,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#4878a8"/>"##,
            MARGIN + i as f64 * bar_w,
            MARGIN + plot_h - h,
            (bar_w - 1.0).max(0.5),
            h
        );
    }
    let _ = writeln!(
        svg,
        r#"<line x1="{MARGIN}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#,
        MARGIN + plot_h,
        WIDTH - MARGIN
    );
    let _ = writeln!(
        svg,
        r#"<text x="{MARGIN}" y="{}" font-family="sans-serif" font-size="11">0 ms</text>"#,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{:.2} ms</text>"#,
        WIDTH - MARGIN,
        HEIGHT - 12.0,
        max
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">n={} peak={}</text>"#,
        WIDTH - MARGIN,
        MARGIN - 6.0,
        latencies_ms.len(),
        peak
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
    fn one_bar_per_bin() {
        let svg = latency_svg("a<b", &[1.0, 2.0, 2.0, 10.0], 5);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("fill=\"#4878a8\"").count(), 5);
        assert!(svg.contains("a&lt;b"));
        assert!(svg.contains("n=4"));
    }

    #[test]
    fn empty_input_still_renders() {
        assert!(latency_svg("x", &[], 10).ends_with("</svg>\n"));
    }
}
