//! Grouped bar chart of proposal-coverage distributions as standalone SVG.

use std::fmt::Write;

use cotrain::evaluation::PlotData;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 6] = [
    "#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860",
];

pub fn render_svg(data: &PlotData) -> String {
    let bins = data.bin_edges.len().saturating_sub(1).max(1);
    let top = data
        .series
        .iter()
        .flat_map(|s| s.fractions.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let group_w = plot_w / bins as f64;
    let bar_w = 0.8 * group_w / data.series.len().max(1) as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let base = HEIGHT - MARGIN;
    let _ = writeln!(
        svg,
        r#"<line x1="{MARGIN}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#,
        WIDTH - MARGIN
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{base}" stroke="black"/>"#
    );
    for (k, series) in data.series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        for (b, frac) in series.fractions.iter().enumerate().take(bins) {
            let h = plot_h * frac / top;
            let x = MARGIN + b as f64 * group_w + 0.1 * group_w + k as f64 * bar_w;
            let _ = writeln!(
                svg,
                r#"<rect x="{x:.2}" y="{:.2}" width="{bar_w:.2}" height="{h:.2}" fill="{color}"><title>{} {:.3}</title></rect>"#,
                base - h,
                series.name,
                frac
            );
        }
        let ly = MARGIN + 14.0 * k as f64;
        let lx = WIDTH - MARGIN - 140.0;
        let _ = writeln!(
            svg,
            r#"<rect x="{lx}" y="{:.1}" width="10" height="10" fill="{color}"/>"#,
            ly - 9.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{ly:.1}">{}</text>"#,
            lx + 14.0,
            series.name
        );
    }
    for (b, edge) in data.bin_edges.iter().enumerate() {
        let x = MARGIN + b as f64 * group_w;
        let _ = writeln!(
            svg,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{edge:.1}</text>"#,
            base + 14.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">proposal coverage</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">fraction of ground-truth boxes (max {top:.3})</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use cotrain::evaluation::PlotSeries;

    #[test]
    fn one_bar_per_series_and_bin() {
        let series = |name: &str| PlotSeries {
            name: name.into(),
            counts: vec![1; 10],
            fractions: vec![0.1; 10],
        };
        let data = PlotData {
            bin_edges: (0..=10).map(|i| i as f64 / 10.0).collect(),
            series: vec![series("a"), series("b"), series("c"), series("d")],
        };
        let svg = render_svg(&data);
        assert_eq!(svg.matches("<title>").count(), 40);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }
}
