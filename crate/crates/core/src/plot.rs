//! Minimal SVG scatter and grouped-bar charts.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 60.0;

/// A named, coloured point set.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub color: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(s: &mut String, title: &str) {
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    )
    .expect("string write");
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).expect("string write");
    writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    )
    .expect("string write");
}

fn axes(s: &mut String, x_label: &str, y_label: &str) {
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN, MARGIN);
    writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#).expect("string write");
    writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#).expect("string write");
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 20.0,
        escape(x_label)
    )
    .expect("string write");
    writeln!(
        s,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    )
    .expect("string write");
}

fn legend(s: &mut String, entries: &[(&str, &str)]) {
    for (i, (name, color)) in entries.iter().enumerate() {
        let y = MARGIN + 8.0 + 18.0 * i as f64;
        let x = WIDTH - MARGIN - 150.0;
        writeln!(s, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{color}"/>"#, y - 9.0).expect("string write");
        writeln!(s, r#"<text x="{}" y="{y}">{}</text>"#, x + 16.0, escape(name)).expect("string write");
    }
}

/// Scatter plot with one legend entry per series.
pub fn scatter_svg(series: &[Series], title: &str, x_label: &str, y_label: &str) -> Result<String> {
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if all.is_empty() {
        return Err(Error::Empty("scatter plot has no points".into()));
    }
    if all.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::NonFinite("scatter plot coordinates".into()));
    }
    let bounds = |f: fn(&(f64, f64)) -> f64| {
        let lo = all.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = all.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        let pad = ((hi - lo) * 0.05).max(1e-9);
        (lo - pad, hi + pad)
    };
    let (xl, xh) = bounds(|p| p.0);
    let (yl, yh) = bounds(|p| p.1);
    let sx = |x: f64| MARGIN + (x - xl) / (xh - xl) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - yl) / (yh - yl) * (HEIGHT - 2.0 * MARGIN);
    let mut s = String::new();
    header(&mut s, title);
    axes(&mut s, x_label, y_label);
    for ser in series {
        for &(x, y) in &ser.points {
            writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}" fill-opacity="0.75"/>"#,
                sx(x),
                sy(y),
                ser.color
            )
            .expect("string write");
        }
    }
    let entries: Vec<(&str, &str)> = series.iter().map(|s| (s.name.as_str(), s.color.as_str())).collect();
    legend(&mut s, &entries);
    s.push_str("</svg>\n");
    Ok(s)
}

/// Grouped bars on a `[0, 1]` axis: one group per category, one bar per
/// named series within each group.
pub fn grouped_bars_svg(
    groups: &[String],
    series: &[(&str, &str, Vec<f64>)],
    title: &str,
    y_label: &str,
) -> Result<String> {
    if groups.is_empty() || series.is_empty() {
        return Err(Error::Empty("bar chart has no data".into()));
    }
    if series.iter().any(|(_, _, v)| v.len() != groups.len()) {
        return Err(Error::config("every bar series needs one value per group"));
    }
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let group_w = plot_w / groups.len() as f64;
    let bar_w = group_w * 0.8 / series.len() as f64;
    let mut s = String::new();
    header(&mut s, title);
    axes(&mut s, "", y_label);
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let y = HEIGHT - MARGIN - v * plot_h;
        writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{v:.2}</text>"#, MARGIN - 6.0, y + 4.0).expect("string write");
    }
    for (g, name) in groups.iter().enumerate() {
        let gx = MARGIN + g as f64 * group_w + group_w * 0.1;
        for (k, (_, color, values)) in series.iter().enumerate() {
            let v = values[g].clamp(0.0, 1.0);
            let h = v * plot_h;
            let x = gx + k as f64 * bar_w;
            writeln!(
                s,
                r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="{color}"/>"#,
                HEIGHT - MARGIN - h,
                bar_w * 0.95
            )
            .expect("string write");
            writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="10">{:.2}</text>"#,
                x + bar_w / 2.0,
                HEIGHT - MARGIN - h - 4.0,
                values[g]
            )
            .expect("string write");
        }
        writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            gx + group_w * 0.4,
            HEIGHT - MARGIN + 16.0,
            escape(name)
        )
        .expect("string write");
    }
    let entries: Vec<(&str, &str)> = series.iter().map(|(n, c, _)| (*n, *c)).collect();
    legend(&mut s, &entries);
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn write_svg(path: &Path, svg: &str) -> Result<()> {
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scatter_has_a_legend_entry_per_series() {
        let series: Vec<Series> = ["a", "b", "c"]
            .iter()
            .enumerate()
            .map(|(i, n)| Series {
                name: n.to_string(),
                color: "#000".into(),
                points: vec![(i as f64, 1.0)],
            })
            .collect();
        let svg = scatter_svg(&series, "t", "x", "y").unwrap();
        assert_eq!(svg.matches("<circle").count(), 3);
        assert_eq!(svg.matches(r#"width="10" height="10""#).count(), 3);
        assert!(scatter_svg(&[], "t", "x", "y").is_err());
    }

    #[test]
    fn bars_need_matching_lengths() {
        let groups = vec!["g1".to_string(), "g2".to_string()];
        assert!(grouped_bars_svg(&groups, &[("s", "#111", vec![0.5])], "t", "y").is_err());
        let svg = grouped_bars_svg(&groups, &[("s", "#111", vec![0.5, 0.9]), ("u", "#222", vec![0.1, 1.0])], "t", "y").unwrap();
        assert!(svg.contains("g2"));
    }
}
