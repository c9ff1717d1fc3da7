//! Minimal static SVG charts. Output depends only on the input data, so
//! reruns are byte-identical.

use std::fmt::Write;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 170.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self { name: name.into(), points, dashed: false }
    }

    pub fn dashed(mut self) -> Self {
        self.dashed = true;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Tick label with just enough digits for the spacing.
fn tick_label(v: f64, step: f64) -> String {
    let digits = if step >= 1.0 { 0 } else { (-step.log10().floor()) as usize };
    let s = format!("{v:.digits$}");
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

/// Roughly five round ticks covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64) -> (Vec<f64>, f64) {
    let span = (hi - lo).max(f64::EPSILON);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| span / s <= 6.0).unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    ((first..=last).map(|i| i as f64 * step).collect(), step)
}

fn range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo > hi {
        return None;
    }
    if lo == hi {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.05 };
        return Some((lo - pad, hi + pad));
    }
    let pad = (hi - lo) * 0.05;
    Some((lo - pad, hi + pad))
}

fn header(out: &mut String, width: f64, height: f64) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>"#);
}

impl LineChart {
    pub fn new(title: impl Into<String>, x_label: impl Into<String>, y_label: impl Into<String>) -> Self {
        Self { title: title.into(), x_label: x_label.into(), y_label: y_label.into(), series: Vec::new() }
    }

    pub fn with(mut self, s: Series) -> Self {
        self.series.push(s);
        self
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        header(&mut out, WIDTH, HEIGHT);
        let _ = writeln!(out, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, WIDTH / 2.0, escape(&self.title));
        let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
        let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
        let all = || self.series.iter().flat_map(|s| s.points.iter());
        let (Some((x0, x1)), Some((y0, y1))) = (range(all().map(|p| p.0)), range(all().map(|p| p.1))) else {
            let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">no data</text>"#, WIDTH / 2.0, HEIGHT / 2.0);
            out.push_str("</svg>\n");
            return out;
        };
        let sx = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * plot_w;
        let sy = |y: f64| MARGIN_TOP + plot_h - (y - y0) / (y1 - y0) * plot_h;

        let _ = writeln!(
            out,
            r##"<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#444"/>"##
        );
        let (xt, xstep) = ticks(x0, x1);
        for x in xt {
            let px = sx(x);
            let _ = writeln!(
                out,
                r##"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="#444"/><text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
                MARGIN_TOP + plot_h,
                MARGIN_TOP + plot_h + 5.0,
                MARGIN_TOP + plot_h + 18.0,
                tick_label(x, xstep)
            );
        }
        let (yt, ystep) = ticks(y0, y1);
        for y in yt {
            let py = sy(y);
            let _ = writeln!(
                out,
                r##"<line x1="{:.2}" y1="{py:.2}" x2="{MARGIN_LEFT}" y2="{py:.2}" stroke="#444"/><line x1="{MARGIN_LEFT}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
                MARGIN_LEFT - 5.0,
                MARGIN_LEFT + plot_w,
                MARGIN_LEFT - 8.0,
                py + 4.0,
                tick_label(y, ystep)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            MARGIN_LEFT + plot_w / 2.0,
            HEIGHT - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
            MARGIN_TOP + plot_h / 2.0,
            MARGIN_TOP + plot_h / 2.0,
            escape(&self.y_label)
        );

        for (i, s) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let dash = if s.dashed { r#" stroke-dasharray="6 4""# } else { "" };
            let pts: Vec<(f64, f64)> = s
                .points
                .iter()
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .map(|&(x, y)| (sx(x), sy(y)))
                .collect();
            if let [(cx, cy)] = pts[..] {
                let _ = writeln!(out, r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="3" fill="{color}"/>"#);
            } else if !pts.is_empty() {
                let joined: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
                let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{}"/>"#, joined.join(" "));
            }
            let ly = MARGIN_TOP + 10.0 + 18.0 * i as f64;
            let lx = WIDTH - MARGIN_RIGHT + 12.0;
            let _ = writeln!(
                out,
                r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"{dash}/><text x="{:.2}" y="{:.2}">{}</text>"#,
                lx + 22.0,
                lx + 28.0,
                ly + 4.0,
                escape(&s.name)
            );
        }
        out.push_str("</svg>\n");
        out
    }
}

/// One grid of cells; `values[row][col]`, `None` for a failed run.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapPanel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x_ticks: Vec<String>,
    pub y_ticks: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

const CELL_W: f64 = 70.0;
const CELL_H: f64 = 32.0;
const STOPS: [(f64, [f64; 3]); 5] = [
    (0.0, [68.0, 1.0, 84.0]),
    (0.25, [59.0, 82.0, 139.0]),
    (0.5, [33.0, 145.0, 140.0]),
    (0.75, [94.0, 201.0, 98.0]),
    (1.0, [253.0, 231.0, 37.0]),
];

fn color_at(f: f64) -> String {
    let f = f.clamp(0.0, 1.0);
    let i = STOPS.iter().rposition(|(s, _)| *s <= f).unwrap_or(0).min(STOPS.len() - 2);
    let (s0, c0) = STOPS[i];
    let (s1, c1) = STOPS[i + 1];
    let u = (f - s0) / (s1 - s0);
    let c: Vec<u8> = (0..3).map(|k| (c0[k] + u * (c1[k] - c0[k])).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// Stacks panels vertically, sharing one color scale.
pub fn render_heatmaps(panels: &[HeatmapPanel]) -> String {
    let cols = panels.iter().map(|p| p.x_ticks.len()).max().unwrap_or(0) as f64;
    let width = 110.0 + cols * CELL_W + 40.0;
    let heights: Vec<f64> = panels.iter().map(|p| 80.0 + p.y_ticks.len() as f64 * CELL_H).collect();
    let height = heights.iter().sum::<f64>().max(60.0);
    let (lo, hi) = range(panels.iter().flat_map(|p| p.values.iter().flatten().flatten().copied())).unwrap_or((0.0, 1.0));
    let mut out = String::new();
    header(&mut out, width, height);
    let mut top = 0.0;
    for (p, h) in panels.iter().zip(&heights) {
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="14">{}</text>"#, width / 2.0, top + 20.0, escape(&p.title));
        let gx = 110.0;
        let gy = top + 35.0;
        for (r, row) in p.values.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                let x = gx + c as f64 * CELL_W;
                let y = gy + r as f64 * CELL_H;
                let (fill, label, ink) = match v {
                    Some(v) => {
                        let f = (v - lo) / (hi - lo);
                        (color_at(f), format!("{v:.4}"), if f > 0.6 { "black" } else { "white" })
                    }
                    None => ("#bbbbbb".to_string(), "fail".to_string(), "black"),
                };
                let _ = writeln!(
                    out,
                    r#"<rect x="{x:.2}" y="{y:.2}" width="{CELL_W}" height="{CELL_H}" fill="{fill}" stroke="white"/><text x="{:.2}" y="{:.2}" text-anchor="middle" fill="{ink}" font-size="11">{label}</text>"#,
                    x + CELL_W / 2.0,
                    y + CELL_H / 2.0 + 4.0
                );
            }
        }
        for (r, t) in p.y_ticks.iter().enumerate() {
            let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, gx - 6.0, gy + r as f64 * CELL_H + CELL_H / 2.0 + 4.0, escape(t));
        }
        let bottom = gy + p.y_ticks.len() as f64 * CELL_H;
        for (c, t) in p.x_ticks.iter().enumerate() {
            let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, gx + c as f64 * CELL_W + CELL_W / 2.0, bottom + 15.0, escape(t));
        }
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, gx + p.x_ticks.len() as f64 * CELL_W / 2.0, bottom + 32.0, escape(&p.x_label));
        let _ = writeln!(out, r#"<text x="12" y="{:.2}" text-anchor="start">{}</text>"#, gy - 6.0, escape(&p.y_label));
        top += h;
    }
    out.push_str("</svg>\n");
    out
}

/// Means over consecutive windows so long step logs stay small.
pub fn downsample(points: &[(f64, f64)], max_points: usize) -> Vec<(f64, f64)> {
    if points.len() <= max_points || max_points == 0 {
        return points.to_vec();
    }
    let window = points.len().div_ceil(max_points);
    points
        .chunks(window)
        .map(|c| {
            let n = c.len() as f64;
            (c.iter().map(|p| p.0).sum::<f64>() / n, c.iter().map(|p| p.1).sum::<f64>() / n)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_chart_is_deterministic_and_well_formed() {
        let chart = LineChart::new("losses", "t", "loss")
            .with(Series::new("a", vec![(1.0, 2.0), (2.0, 1.5), (3.0, 1.0)]))
            .with(Series::new("base", vec![(1.0, 1.2), (3.0, 1.2)]).dashed());
        let a = chart.render();
        assert_eq!(a, chart.render());
        assert!(a.starts_with("<svg"));
        assert!(a.trim_end().ends_with("</svg>"));
        assert_eq!(a.matches("<polyline").count(), 2);
        assert!(a.contains("stroke-dasharray"));
    }

    #[test]
    fn empty_and_constant_series() {
        assert!(LineChart::new("e", "x", "y").render().contains("no data"));
        let flat = LineChart::new("f", "x", "y").with(Series::new("z", vec![(0.0, 0.0), (1.0, 0.0)])).render();
        assert!(!flat.contains("NaN"));
    }

    #[test]
    fn labels_are_escaped() {
        let svg = LineChart::new("a<b", "x&y", "y").with(Series::new("\"q\"", vec![(0.0, 1.0), (1.0, 2.0)])).render();
        assert!(svg.contains("a&lt;b") && svg.contains("x&amp;y") && svg.contains("&quot;q&quot;"));
    }

    #[test]
    fn tick_steps_are_round() {
        let (t, step) = ticks(0.0, 1.0);
        assert_eq!(step, 0.2);
        assert_eq!(t.len(), 6);
        let (_, step) = ticks(0.0, 3000.0);
        assert_eq!(step, 500.0);
        assert_eq!(tick_label(-0.0, 0.1), "0.0");
    }

    #[test]
    fn heatmap_marks_failures() {
        let panel = HeatmapPanel {
            title: "t".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            x_ticks: vec!["0.1".into(), "1".into()],
            y_ticks: vec!["0.005".into()],
            values: vec![vec![Some(0.5), None]],
        };
        let svg = render_heatmaps(&[panel]);
        assert!(svg.contains("fail"));
        assert!(svg.contains("0.5000"));
    }

    #[test]
    fn colors_span_the_scale() {
        assert_eq!(color_at(0.0), "#440154");
        assert_eq!(color_at(1.0), "#fde725");
        assert_eq!(color_at(2.0), "#fde725");
    }

    #[test]
    fn downsampling_averages_windows() {
        let pts: Vec<_> = (0..10).map(|i| (i as f64, i as f64)).collect();
        assert_eq!(downsample(&pts, 20), pts);
        let d = downsample(&pts, 5);
        assert_eq!(d, vec![(0.5, 0.5), (2.5, 2.5), (4.5, 4.5), (6.5, 6.5), (8.5, 8.5)]);
    }
}
