//! Minimal line charts of accuracy trajectories, as SVG and PNG.

use std::fmt::Write as _;

use image::{Rgb, RgbImage};

pub struct Series {
    pub label: String,
    pub values: Vec<f64>,
}

/// Accuracy (0..1) against task index (1..T) with a dashed chance line.
pub struct Figure {
    pub title: String,
    pub series: Vec<Series>,
    pub chance: Vec<f64>,
}

const WIDTH: u32 = 640;
const HEIGHT: u32 = 420;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [140, 86, 75],
];

impl Figure {
    fn num_points(&self) -> usize {
        self.series
            .iter()
            .map(|s| s.values.len())
            .chain(std::iter::once(self.chance.len()))
            .max()
            .unwrap_or(0)
    }

    /// Pixel coordinates of point `i` (0-based task index) at value `v`.
    fn xy(&self, i: usize, v: f64) -> (f64, f64) {
        let n = self.num_points();
        let w = WIDTH as f64 - LEFT - RIGHT;
        let h = HEIGHT as f64 - TOP - BOTTOM;
        let x = if n <= 1 {
            LEFT + w / 2.0
        } else {
            LEFT + w * i as f64 / (n - 1) as f64
        };
        (x, TOP + h * (1.0 - v.clamp(0.0, 1.0)))
    }

    pub fn to_svg(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{LEFT}" y="24" font-size="14">{}</text>"#,
            escape(&self.title)
        );
        let (x0, y0) = self.xy(0, 0.0);
        let (x1, y1) = self.xy(self.num_points().saturating_sub(1), 1.0);
        let _ = writeln!(
            s,
            r#"<rect x="{x0}" y="{y1}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            (x1 - x0).max(1.0),
            y0 - y1
        );
        for k in 0..=5 {
            let v = k as f64 / 5.0;
            let (_, y) = self.xy(0, v);
            let _ = writeln!(s, r##"<line x1="{x0}" x2="{x1}" y1="{y}" y2="{y}" stroke="#ddd"/>"##);
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end">{v:.1}</text>"#,
                x0 - 6.0,
                y + 4.0
            );
        }
        for i in 0..self.num_points() {
            let (x, _) = self.xy(i, 0.0);
            let _ = writeln!(
                s,
                r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#,
                y0 + 18.0,
                i + 1
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">task t</text>"#,
            (x0 + x1) / 2.0,
            y0 + 38.0
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle">average accuracy</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0
        );
        if !self.chance.is_empty() {
            let _ = writeln!(
                s,
                r##"<polyline fill="none" stroke="#888" stroke-dasharray="5,4" points="{}"/>"##,
                self.points(&self.chance)
            );
        }
        for (k, series) in self.series.iter().enumerate() {
            let [r, g, b] = PALETTE[k % PALETTE.len()];
            let color = format!("rgb({r},{g},{b})");
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                self.points(&series.values)
            );
            for (i, &v) in series.values.iter().enumerate() {
                let (x, y) = self.xy(i, v);
                let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
            }
            let ly = TOP + 14.0 + 18.0 * k as f64;
            let lx = x1 + 14.0;
            let _ = writeln!(
                s,
                r#"<line x1="{lx}" x2="{}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
                lx + 20.0,
                lx + 26.0,
                ly + 4.0,
                escape(&series.label)
            );
        }
        if !self.chance.is_empty() {
            let ly = TOP + 14.0 + 18.0 * self.series.len() as f64;
            let lx = x1 + 14.0;
            let _ = writeln!(
                s,
                r##"<line x1="{lx}" x2="{}" y1="{ly}" y2="{ly}" stroke="#888" stroke-dasharray="5,4"/><text x="{}" y="{}">chance</text>"##,
                lx + 20.0,
                lx + 26.0,
                ly + 4.0
            );
        }
        s.push_str("</svg>\n");
        s
    }

    fn points(&self, values: &[f64]) -> String {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let (x, y) = self.xy(i, v);
                format!("{x:.1},{y:.1}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Raster version without text; colors match the SVG legend order.
    pub fn to_png(&self) -> RgbImage {
        let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
        let (x0, y0) = self.xy(0, 0.0);
        let (x1, y1) = self.xy(self.num_points().saturating_sub(1), 1.0);
        for k in 0..=5 {
            let (_, y) = self.xy(0, k as f64 / 5.0);
            line(&mut img, (x0, y), (x1, y), [221, 221, 221], 1, None);
        }
        for (a, b) in [
            ((x0, y0), (x1, y0)),
            ((x0, y1), (x1, y1)),
            ((x0, y0), (x0, y1)),
            ((x1, y0), (x1, y1)),
        ] {
            line(&mut img, a, b, [0, 0, 0], 1, None);
        }
        for w in 0..self.chance.len().saturating_sub(1) {
            let a = self.xy(w, self.chance[w]);
            let b = self.xy(w + 1, self.chance[w + 1]);
            line(&mut img, a, b, [136, 136, 136], 1, Some(6));
        }
        for (k, series) in self.series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            for w in 0..series.values.len().saturating_sub(1) {
                let a = self.xy(w, series.values[w]);
                let b = self.xy(w + 1, series.values[w + 1]);
                line(&mut img, a, b, color, 2, None);
            }
            for (i, &v) in series.values.iter().enumerate() {
                let (x, y) = self.xy(i, v);
                dot(&mut img, x, y, 3, color);
            }
        }
        img
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn dot(img: &mut RgbImage, cx: f64, cy: f64, r: i64, color: [u8; 3]) {
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                put(img, cx.round() as i64 + dx, cy.round() as i64 + dy, color);
            }
        }
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(color));
    }
}

/// Sampled line with an optional dash period in pixels.
fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: [u8; 3], width: i64, dash: Option<usize>) {
    let len = ((b.0 - a.0).hypot(b.1 - a.1)).ceil().max(1.0) as usize;
    for i in 0..=len {
        if let Some(p) = dash {
            if (i / p) % 2 == 1 {
                continue;
            }
        }
        let f = i as f64 / len as f64;
        let (x, y) = (a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1));
        for o in 0..width {
            put(img, x.round() as i64, y.round() as i64 + o, color);
        }
    }
}
