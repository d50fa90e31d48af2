//! Minimal self-contained SVG charts.

use std::fmt::Write;

const W: f64 = 720.0;
const H: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(points: impl Iterator<Item = (f64, f64)>) -> Self {
        let mut f = Frame {
            x0: f64::INFINITY,
            x1: f64::NEG_INFINITY,
            y0: f64::INFINITY,
            y1: f64::NEG_INFINITY,
        };
        for (x, y) in points.filter(|(x, y)| x.is_finite() && y.is_finite()) {
            f.x0 = f.x0.min(x);
            f.x1 = f.x1.max(x);
            f.y0 = f.y0.min(y);
            f.y1 = f.y1.max(y);
        }
        if !f.x0.is_finite() {
            (f.x0, f.x1, f.y0, f.y1) = (0.0, 1.0, 0.0, 1.0);
        }
        if f.x1 == f.x0 {
            f.x1 = f.x0 + 1.0;
        }
        if f.y1 == f.y0 {
            f.y1 = f.y0 + 1.0;
        }
        let pad = 0.05 * (f.y1 - f.y0);
        f.y0 -= pad;
        f.y1 += pad;
        f
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (H - TOP - BOTTOM)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(svg: &mut String, title: &str) {
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(
        svg,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        (W - RIGHT + LEFT) / 2.0,
        escape(title)
    )
    .unwrap();
}

fn axes(svg: &mut String, f: &Frame, x_label: &str, y_label: &str) {
    let (xa, xb, ya, yb) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    writeln!(
        svg,
        r#"<rect x="{xa}" y="{ya}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        xb - xa,
        yb - ya
    )
    .unwrap();
    for i in 0..=5 {
        let t = i as f64 / 5.0;
        let x = f.x0 + t * (f.x1 - f.x0);
        let y = f.y0 + t * (f.y1 - f.y0);
        let (px, py) = (f.px(x), f.py(y));
        writeln!(
            svg,
            r#"<line x1="{px:.1}" y1="{yb}" x2="{px:.1}" y2="{:.1}" stroke="black"/><text x="{px:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            yb + 5.0,
            yb + 18.0,
            tick(x)
        )
        .unwrap();
        writeln!(
            svg,
            r#"<line x1="{:.1}" y1="{py:.1}" x2="{xa}" y2="{py:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            xa - 5.0,
            xa - 8.0,
            py + 4.0,
            tick(y)
        )
        .unwrap();
    }
    writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (xa + xb) / 2.0,
        H - 12.0,
        escape(x_label)
    )
    .unwrap();
    writeln!(
        svg,
        r#"<text transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        (ya + yb) / 2.0,
        escape(y_label)
    )
    .unwrap();
}

fn tick(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && (a >= 1e5 || a < 1e-2) {
        format!("{v:.1e}")
    } else if a >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Line chart with one polyline per series and a legend on the right.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let f = Frame::fit(series.iter().flat_map(|s| s.points.iter().cloned()));
    let mut svg = String::new();
    header(&mut svg, title);
    axes(&mut svg, &f, x_label, y_label);
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        // break the line at non-finite points
        let mut segments: Vec<Vec<String>> = vec![Vec::new()];
        for &(x, y) in &s.points {
            if x.is_finite() && y.is_finite() {
                segments
                    .last_mut()
                    .unwrap()
                    .push(format!("{:.1},{:.1}", f.px(x), f.py(y)));
            } else if !segments.last().unwrap().is_empty() {
                segments.push(Vec::new());
            }
        }
        for seg in segments.iter().filter(|s| !s.is_empty()) {
            writeln!(
                svg,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                seg.join(" ")
            )
            .unwrap();
        }
        let ly = TOP + 10.0 + 18.0 * i as f64;
        writeln!(
            svg,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            W - RIGHT + 12.0,
            W - RIGHT + 32.0,
            W - RIGHT + 38.0,
            ly + 4.0,
            escape(&s.label)
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

/// Raster of categorical cells. `cells[row * cols + col]` indexes
/// `classes`; rows run along x and columns along y.
pub fn raster(
    title: &str,
    x_label: &str,
    y_label: &str,
    x_range: (f64, f64),
    y_range: (f64, f64),
    (rows, cols): (usize, usize),
    cells: &[usize],
    classes: &[(&str, &str)],
) -> String {
    let f = Frame {
        x0: x_range.0,
        x1: if x_range.1 > x_range.0 { x_range.1 } else { x_range.0 + 1.0 },
        y0: y_range.0,
        y1: if y_range.1 > y_range.0 { y_range.1 } else { y_range.0 + 1.0 },
    };
    let mut svg = String::new();
    header(&mut svg, title);
    let cw = (W - LEFT - RIGHT) / rows as f64;
    let ch = (H - TOP - BOTTOM) / cols as f64;
    for r in 0..rows {
        for c in 0..cols {
            let color = classes[cells[r * cols + c]].1;
            writeln!(
                svg,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}"/>"#,
                LEFT + r as f64 * cw,
                H - BOTTOM - (c + 1) as f64 * ch,
                cw + 0.05,
                ch + 0.05
            )
            .unwrap();
        }
    }
    axes(&mut svg, &f, x_label, y_label);
    for (i, (label, color)) in classes.iter().enumerate() {
        let ly = TOP + 4.0 + 18.0 * i as f64;
        writeln!(
            svg,
            r#"<rect x="{:.1}" y="{ly:.1}" width="14" height="12" fill="{color}" stroke="black"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            W - RIGHT + 12.0,
            W - RIGHT + 32.0,
            ly + 10.0,
            escape(label)
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}
