use std::fmt::Write;

use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Histogram {
    /// `bins + 1` edges spanning `[0, upper]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub warning: Option<String>,
}

/// Bins `|m|` over `[0, max |m|]`.
pub fn factor_histogram(m: &[f32], bins: usize) -> Histogram {
    let upper = m.iter().map(|v| v.abs() as f64).fold(0.0, f64::max);
    factor_histogram_upto(m, bins, upper)
}

/// Bins `|m|` over `[0, upper]`; values above `upper` land in the last bin.
pub fn factor_histogram_upto(m: &[f32], bins: usize, upper: f64) -> Histogram {
    let bins = bins.max(1);
    let width = if upper > 0.0 { upper } else { 1.0 } / bins as f64;
    let edges = (0..=bins).map(|i| i as f64 * width).collect();
    let mut counts = vec![0; bins];
    for v in m {
        let b = ((v.abs() as f64 / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let warning = m.is_empty().then(|| "graph has no ResConv nodes; histogram is empty".to_string());
    Histogram { edges, counts, warning }
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_start,bin_end,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(s, "{},{},{}", self.edges[i], self.edges[i + 1], c);
        }
        s
    }

    /// Bar chart as a standalone SVG document.
    pub fn to_svg(&self, title: &str) -> String {
        let (w, h, pad) = (480.0, 300.0, 40.0);
        let plot_w = w - 2.0 * pad;
        let plot_h = h - 2.0 * pad;
        let max = self.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
        let bar_w = plot_w / self.counts.len().max(1) as f64;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
        );
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
            w / 2.0,
            escape(title)
        );
        for (i, &c) in self.counts.iter().enumerate() {
            let bh = plot_h * c as f64 / max;
            let _ = writeln!(
                s,
                r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#4878a8"><title>[{:.4}, {:.4}): {}</title></rect>"##,
                pad + i as f64 * bar_w + 1.0,
                pad + plot_h - bh,
                (bar_w - 2.0).max(1.0),
                bh,
                self.edges[i],
                self.edges[i + 1],
                c
            );
        }
        let _ = writeln!(
            s,
            r#"<line x1="{pad}" y1="{y}" x2="{x2}" y2="{y}" stroke="black"/>"#,
            y = pad + plot_h,
            x2 = pad + plot_w
        );
        let last = self.edges.last().copied().unwrap_or(0.0);
        for (x, label) in [(pad, "0".to_string()), (pad + plot_w, format!("{last:.3}"))] {
            let _ = writeln!(
                s,
                r#"<text x="{x}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{label}</text>"#,
                pad + plot_h + 16.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">|m|</text>"#,
            w / 2.0,
            h - 8.0
        );
        s.push_str("</svg>\n");
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_factors_fill_one_bin() {
        let h = factor_histogram(&[1.0; 6], 10);
        assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(h.total(), 6);
    }

    #[test]
    fn empty_input_warns() {
        let h = factor_histogram(&[], 5);
        assert_eq!(h.total(), 0);
        assert!(h.warning.is_some());
    }

    #[test]
    fn negative_factors_bin_by_magnitude() {
        let h = factor_histogram_upto(&[-0.05, 0.05, 0.95], 10, 1.0);
        assert_eq!(h.counts[0], 2);
        assert_eq!(h.counts[9], 1);
        assert!(h.to_svg("m").starts_with("<svg"));
        assert_eq!(h.to_csv().lines().count(), 11);
    }
}
