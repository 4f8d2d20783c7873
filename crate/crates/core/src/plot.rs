//! Minimal static SVG charts rendered from the harness tables.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Scale {
    Linear,
    Log,
}

impl Scale {
    fn map(self, v: f64) -> Option<f64> {
        match self {
            Scale::Linear => v.is_finite().then_some(v),
            Scale::Log => (v > 0.0 && v.is_finite()).then(|| v.log10()),
        }
    }
}

pub(crate) struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

pub(crate) struct LineChart<'a> {
    pub title: &'a str,
    pub x_label: &'a str,
    pub y_label: &'a str,
    pub x_scale: Scale,
    pub y_scale: Scale,
    pub series: Vec<Series>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ =
        writeln!(out, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
}

fn extent(vals: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return None;
    }
    if hi - lo < 1e-12 {
        Some((lo - 0.5, hi + 0.5))
    } else {
        Some((lo, hi))
    }
}

fn tick_label(v: f64, scale: Scale) -> String {
    match scale {
        Scale::Linear => format!("{v:.3}"),
        Scale::Log => format!("1e{}", v.round() as i64),
    }
}

fn axes(out: &mut String, x: (f64, f64), y: (f64, f64), xs: Scale, ys: Scale, x_label: &str, y_label: &str) {
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let _ = writeln!(out, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = x.0 + f * (x.1 - x.0);
        let yv = y.0 + f * (y.1 - y.0);
        let px = LEFT + f * pw;
        let py = TOP + ph - f * ph;
        let _ = writeln!(
            out,
            r#"<text x="{px:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            TOP + ph + 16.0,
            tick_label(xv, xs)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            py + 4.0,
            tick_label(yv, ys)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        H - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(y_label)
    );
}

pub(crate) fn line_chart(chart: &LineChart) -> String {
    let mut out = String::new();
    header(&mut out, chart.title);
    let mapped: Vec<Vec<(f64, f64)>> = chart
        .series
        .iter()
        .map(|s| s.points.iter().filter_map(|&(x, y)| Some((chart.x_scale.map(x)?, chart.y_scale.map(y)?))).collect())
        .collect();
    let xr = extent(mapped.iter().flatten().map(|p| p.0));
    let yr = extent(mapped.iter().flatten().map(|p| p.1));
    if let (Some(xr), Some(yr)) = (xr, yr) {
        axes(&mut out, xr, yr, chart.x_scale, chart.y_scale, chart.x_label, chart.y_label);
        let pw = W - LEFT - RIGHT;
        let ph = H - TOP - BOTTOM;
        let px = |v: f64| LEFT + (v - xr.0) / (xr.1 - xr.0) * pw;
        let py = |v: f64| TOP + ph - (v - yr.0) / (yr.1 - yr.0) * ph;
        for (i, (s, pts)) in chart.series.iter().zip(&mapped).enumerate() {
            let colour = PALETTE[i % PALETTE.len()];
            let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
            let _ = writeln!(
                out,
                r#"<polyline fill="none" stroke="{colour}" stroke-width="2" points="{}"/>"#,
                path.join(" ")
            );
            for &(x, y) in pts {
                let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{colour}"/>"#, px(x), py(y));
            }
            let ly = TOP + 16.0 * (i as f64 + 1.0);
            let _ = writeln!(
                out,
                r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{colour}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
                W - RIGHT + 10.0,
                W - RIGHT + 30.0,
                W - RIGHT + 35.0,
                ly + 4.0,
                escape(&s.label)
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Bar chart of normalised counts over `[lo, hi]`, one colour per histogram.
pub(crate) fn histogram_chart(title: &str, x_label: &str, edges: &[f64], hists: &[(String, Vec<u64>)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let fracs: Vec<Vec<f64>> = hists
        .iter()
        .map(|(_, c)| {
            let total = c.iter().sum::<u64>().max(1) as f64;
            c.iter().map(|&v| v as f64 / total).collect()
        })
        .collect();
    let ymax = fracs.iter().flatten().copied().fold(0.0, f64::max).max(1e-12);
    let xr = (edges[0], edges[edges.len() - 1]);
    axes(&mut out, xr, (0.0, ymax), Scale::Linear, Scale::Linear, x_label, "fraction");
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let px = |v: f64| LEFT + (v - xr.0) / (xr.1 - xr.0) * pw;
    for (i, ((label, _), f)) in hists.iter().zip(&fracs).enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let mut path = format!("{:.2},{:.2}", px(edges[0]), TOP + ph);
        for (b, v) in f.iter().enumerate() {
            let y = TOP + ph - v / ymax * ph;
            let _ = write!(path, " {:.2},{y:.2} {:.2},{y:.2}", px(edges[b]), px(edges[b + 1]));
        }
        let _ = write!(path, " {:.2},{:.2}", px(edges[edges.len() - 1]), TOP + ph);
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{path}"/>"#);
        let ly = TOP + 16.0 * (i as f64 + 1.0);
        let _ = writeln!(
            out,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{colour}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            W - RIGHT + 10.0,
            W - RIGHT + 30.0,
            W - RIGHT + 35.0,
            ly + 4.0,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}
