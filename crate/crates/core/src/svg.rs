//! Minimal standalone SVG emitters: a dual-axis line chart and a grid
//! heatmap. No external plotting dependency; output is deterministic.

use std::fmt::Write;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum YAxis {
    Left,
    Right,
}

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub ys: Vec<f64>,
    pub axis: YAxis,
    pub color: String,
}

/// Line chart over a shared x index with separate left and right y axes.
#[derive(Debug, Clone)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_left_label: String,
    pub y_right_label: String,
    pub series: Vec<Series>,
    pub width: usize,
    pub height: usize,
}

impl LineChart {
    pub fn new(title: &str, x_label: &str, y_left: &str, y_right: &str) -> Self {
        LineChart {
            title: title.to_string(),
            x_label: x_label.to_string(),
            y_left_label: y_left.to_string(),
            y_right_label: y_right.to_string(),
            series: Vec::new(),
            width: 900,
            height: 420,
        }
    }

    pub fn add(&mut self, name: &str, ys: Vec<f64>, axis: YAxis, color: &str) {
        self.series.push(Series {
            name: name.to_string(),
            ys,
            axis,
            color: color.to_string(),
        });
    }

    fn axis_range(&self, axis: YAxis) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in self.series.iter().filter(|s| s.axis == axis) {
            for &v in &s.ys {
                if v.is_finite() {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
        }
        if !lo.is_finite() || !hi.is_finite() {
            return (0.0, 1.0);
        }
        if lo == hi {
            return (lo - 0.5, hi + 0.5);
        }
        let pad = (hi - lo) * 0.05;
        (lo - pad, hi + pad)
    }

    pub fn render(&self) -> String {
        let (w, h) = (self.width as f64, self.height as f64);
        let (ml, mr, mt, mb) = (70.0, 70.0, 40.0, 50.0);
        let plot_w = w - ml - mr;
        let plot_h = h - mt - mb;
        let n = self
            .series
            .iter()
            .map(|s| s.ys.len())
            .max()
            .unwrap_or(1)
            .max(2);
        let left = self.axis_range(YAxis::Left);
        let right = self.axis_range(YAxis::Right);
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
        );
        let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#,
            w / 2.0,
            xml_escape(&self.title)
        );
        // Frame.
        let _ = writeln!(
            out,
            r##"<rect x="{ml}" y="{mt}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#444"/>"##
        );
        // Ticks per axis (5 each) and x ticks.
        for t in 0..=4 {
            let frac = t as f64 / 4.0;
            let y = mt + plot_h * (1.0 - frac);
            let lv = left.0 + (left.1 - left.0) * frac;
            let rv = right.0 + (right.1 - right.0) * frac;
            let _ = writeln!(
                out,
                r##"<line x1="{ml}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/>"##,
                ml + plot_w
            );
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="11">{}</text>"#,
                ml - 6.0,
                y + 4.0,
                format_tick(lv)
            );
            if self.series.iter().any(|s| s.axis == YAxis::Right) {
                let _ = writeln!(
                    out,
                    r#"<text x="{}" y="{}" text-anchor="start" font-family="sans-serif" font-size="11">{}</text>"#,
                    ml + plot_w + 6.0,
                    y + 4.0,
                    format_tick(rv)
                );
            }
            let x = ml + plot_w * frac;
            let _ = writeln!(
                out,
                r#"<text x="{x}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{}</text>"#,
                mt + plot_h + 16.0,
                format_tick(frac * (n - 1) as f64)
            );
        }
        // Axis labels.
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13">{}</text>"#,
            w / 2.0,
            h - 12.0,
            xml_escape(&self.x_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="16" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13" transform="rotate(-90 16 {})">{}</text>"#,
            mt + plot_h / 2.0,
            mt + plot_h / 2.0,
            xml_escape(&self.y_left_label)
        );
        if self.series.iter().any(|s| s.axis == YAxis::Right) {
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13" transform="rotate(90 {} {})">{}</text>"#,
                w - 16.0,
                mt + plot_h / 2.0,
                w - 16.0,
                mt + plot_h / 2.0,
                xml_escape(&self.y_right_label)
            );
        }
        // Series.
        for s in &self.series {
            let range = match s.axis {
                YAxis::Left => left,
                YAxis::Right => right,
            };
            let mut points = String::new();
            for (i, &v) in s.ys.iter().enumerate() {
                if !v.is_finite() {
                    continue;
                }
                let x = ml + plot_w * (i as f64 / (n - 1) as f64);
                let frac = (v - range.0) / (range.1 - range.0);
                let y = mt + plot_h * (1.0 - frac);
                let _ = write!(points, "{x:.2},{y:.2} ");
            }
            let _ = writeln!(
                out,
                r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
                s.color,
                points.trim_end()
            );
        }
        // Legend.
        for (i, s) in self.series.iter().enumerate() {
            let y = mt + 14.0 + 16.0 * i as f64;
            let _ = writeln!(
                out,
                r#"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="{}" stroke-width="2"/>"#,
                ml + 8.0,
                ml + 28.0,
                s.color
            );
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12">{}</text>"#,
                ml + 34.0,
                y + 4.0,
                xml_escape(&s.name)
            );
        }
        out.push_str("</svg>\n");
        out
    }
}

/// Grid heatmap over values in row-major order (ny rows, nx cols), with a
/// blue-white-red scale centered between lo and hi.
#[derive(Debug, Clone)]
pub struct Heatmap {
    pub title: String,
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f64>,
    pub lo: f64,
    pub hi: f64,
}

impl Heatmap {
    pub fn render(&self) -> String {
        let cell = 6.0;
        let (ml, mt) = (20.0, 40.0);
        let w = ml * 2.0 + self.nx as f64 * cell;
        let h = mt + 20.0 + self.ny as f64 * cell;
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
        );
        let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
            w / 2.0,
            xml_escape(&self.title)
        );
        for r in 0..self.ny {
            for c in 0..self.nx {
                let v = self.values[r * self.nx + c];
                let x = ml + c as f64 * cell;
                // Row 0 at the bottom.
                let y = mt + (self.ny - 1 - r) as f64 * cell;
                let _ = writeln!(
                    out,
                    r#"<rect x="{x:.1}" y="{y:.1}" width="{cell}" height="{cell}" fill="{}"/>"#,
                    diverging_color(v, self.lo, self.hi)
                );
            }
        }
        out.push_str("</svg>\n");
        out
    }
}

/// Blue (lo) through white (midpoint) to red (hi).
fn diverging_color(v: f64, lo: f64, hi: f64) -> String {
    let mid = (lo + hi) / 2.0;
    let half = ((hi - lo) / 2.0).max(1e-12);
    let t = ((v - mid) / half).clamp(-1.0, 1.0);
    let (r, g, b) = if t < 0.0 {
        let u = 1.0 + t;
        (
            (59.0 + (255.0 - 59.0) * u) as u8,
            (76.0 + (255.0 - 76.0) * u) as u8,
            192u8.max((192.0 + (255.0 - 192.0) * u) as u8),
        )
    } else {
        let u = 1.0 - t;
        (
            180u8.max((180.0 + (255.0 - 180.0) * u) as u8),
            (4.0 + (255.0 - 4.0) * u) as u8,
            (38.0 + (255.0 - 38.0) * u) as u8,
        )
    };
    format!("#{r:02x}{g:02x}{b:02x}")
}

fn format_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if a >= 1000.0 || a < 0.01 {
        format!("{v:.1e}")
    } else if a >= 10.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_renders_every_series_and_labels() {
        let mut chart = LineChart::new("demo", "sample", "delta", "mse");
        chart.add("a", vec![0.0, 1.0, 0.5], YAxis::Left, "#1f77b4");
        chart.add("b", vec![2.0, 2.5, 3.0], YAxis::Right, "#8c564b");
        let svg = chart.render();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("polyline"));
        assert!(svg.contains("demo") && svg.contains("delta") && svg.contains("mse"));
        assert_eq!(svg.matches("<polyline").count(), 2);
    }

    #[test]
    fn heatmap_renders_all_cells() {
        let hm = Heatmap {
            title: "t".into(),
            nx: 3,
            ny: 2,
            values: vec![0.0, 0.5, 1.0, 1.0, 0.5, 0.0],
            lo: 0.0,
            hi: 1.0,
        };
        let svg = hm.render();
        assert_eq!(svg.matches("<rect").count(), 7, "6 cells + background");
    }

    #[test]
    fn render_is_deterministic() {
        let mut chart = LineChart::new("d", "x", "l", "r");
        chart.add("s", vec![0.3, 0.1, 0.9], YAxis::Left, "#000");
        assert_eq!(chart.render(), chart.render());
    }
}
