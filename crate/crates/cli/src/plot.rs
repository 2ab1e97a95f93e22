//! Minimal raster figures. Panels carry no text; `legend.txt` lists the
//! colour of each report and the layout of each figure.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};
use zssd::metrics::MetricReport;

const PANEL_W: u32 = 360;
const PANEL_H: u32 = 260;
const MARGIN: u32 = 24;
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const GREY: Rgb<u8> = Rgb([170, 170, 170]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [23, 190, 207],
];

fn colour(i: usize) -> Rgb<u8> {
    Rgb(PALETTE[i % PALETTE.len()])
}

/// Axis-aligned drawing area inside one panel of a figure.
struct Panel<'a> {
    img: &'a mut RgbImage,
    x0: i64,
    y0: i64,
    w: i64,
    h: i64,
    xr: (f64, f64),
    yr: (f64, f64),
}

impl<'a> Panel<'a> {
    fn new(img: &'a mut RgbImage, col: u32, row: u32, xr: (f64, f64), yr: (f64, f64)) -> Self {
        let widen = |(a, b): (f64, f64)| if (b - a).abs() < 1e-12 { (a - 0.5, b + 0.5) } else { (a, b) };
        let mut p = Panel {
            img,
            x0: (col * PANEL_W + MARGIN) as i64,
            y0: (row * PANEL_H + MARGIN) as i64,
            w: (PANEL_W - 2 * MARGIN) as i64,
            h: (PANEL_H - 2 * MARGIN) as i64,
            xr: widen(xr),
            yr: widen(yr),
        };
        p.frame();
        p
    }

    fn px(&self, x: f64, y: f64) -> (i64, i64) {
        let fx = (x - self.xr.0) / (self.xr.1 - self.xr.0);
        let fy = (y - self.yr.0) / (self.yr.1 - self.yr.0);
        (self.x0 + (fx * self.w as f64).round() as i64, self.y0 + self.h - (fy * self.h as f64).round() as i64)
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        let inside = x >= self.x0 && x <= self.x0 + self.w && y >= self.y0 && y <= self.y0 + self.h;
        if inside && x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    fn segment_px(&mut self, (mut x, mut y): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
        let dx = (x1 - x).abs();
        let dy = -(y1 - y).abs();
        let (sx, sy) = (if x < x1 { 1 } else { -1 }, if y < y1 { 1 } else { -1 });
        let mut err = dx + dy;
        loop {
            self.put(x, y, c);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
        if a.0.is_finite() && a.1.is_finite() && b.0.is_finite() && b.1.is_finite() {
            let (pa, pb) = (self.px(a.0, a.1), self.px(b.0, b.1));
            self.segment_px(pa, pb, c);
        }
    }

    fn polyline(&mut self, pts: &[(f64, f64)], c: Rgb<u8>) {
        for w in pts.windows(2) {
            self.line(w[0], w[1], c);
        }
    }

    fn rect(&mut self, (xa, ya): (f64, f64), (xb, yb): (f64, f64), c: Rgb<u8>) {
        let (pa, pb) = (self.px(xa, ya), self.px(xb, yb));
        for y in pa.1.min(pb.1)..=pa.1.max(pb.1) {
            for x in pa.0.min(pb.0)..=pa.0.max(pb.0) {
                self.put(x, y, c);
            }
        }
    }

    fn frame(&mut self) {
        let (x0, y0, x1, y1) = (self.x0, self.y0, self.x0 + self.w, self.y0 + self.h);
        self.segment_px((x0, y0), (x1, y0), BLACK);
        self.segment_px((x1, y0), (x1, y1), BLACK);
        self.segment_px((x1, y1), (x0, y1), BLACK);
        self.segment_px((x0, y1), (x0, y0), BLACK);
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn canvas(cols: usize, rows: usize) -> RgbImage {
    RgbImage::from_pixel(PANEL_W * cols.max(1) as u32, PANEL_H * rows.max(1) as u32, WHITE)
}

fn save(img: &RgbImage, dir: &Path, name: &str) -> Result<()> {
    let path = dir.join(name);
    img.save(&path).with_context(|| format!("writing {}", path.display()))
}

/// One panel per variable: log10 power against log10 wavenumber.
fn spectra(reports: &[MetricReport]) -> RgbImage {
    let nv = reports[0].psd.len();
    let mut img = canvas(nv, 1);
    for v in 0..nv {
        let curves: Vec<Vec<(f64, f64)>> = reports
            .iter()
            .map(|r| {
                r.psd.get(v).map_or_else(Vec::new, |p| {
                    p.iter().enumerate().skip(1).filter(|(_, &y)| y > 0.0).map(|(k, &y)| ((k as f64).log10(), y.log10())).collect()
                })
            })
            .collect();
        let xr = range(curves.iter().flatten().map(|p| p.0));
        let yr = range(curves.iter().flatten().map(|p| p.1));
        let mut panel = Panel::new(&mut img, v as u32, 0, xr, yr);
        for (i, c) in curves.iter().enumerate() {
            panel.polyline(c, colour(i));
        }
    }
    img
}

/// One panel per variable: a box per report spanning the 25th to 75th
/// percentile, whiskers to the 5th and 95th, a black median and a grey
/// zero line.
fn bias(reports: &[MetricReport]) -> RgbImage {
    let nv = reports[0].bias.len();
    let mut img = canvas(nv, 1);
    for v in 0..nv {
        let boxes: Vec<_> = reports.iter().map(|r| r.bias.get(v)).collect();
        let yr = range(boxes.iter().flatten().flat_map(|b| [b.p5, b.p95, 0.0]));
        let mut panel = Panel::new(&mut img, v as u32, 0, (0.0, reports.len() as f64), yr);
        panel.line((0.0, 0.0), (reports.len() as f64, 0.0), GREY);
        for (i, b) in boxes.iter().enumerate() {
            let Some(b) = b else { continue };
            let mid = i as f64 + 0.5;
            panel.line((mid, b.p5), (mid, b.p95), colour(i));
            panel.rect((mid - 0.3, b.p25), (mid + 0.3, b.p75), colour(i));
            panel.line((mid - 0.3, b.p50), (mid + 0.3, b.p50), BLACK);
        }
    }
    img
}

/// Log10 guidance-gradient norm per reverse step for reports with traces.
fn traces(reports: &[MetricReport]) -> RgbImage {
    let mut img = canvas(1, 1);
    let curves: Vec<Option<Vec<(f64, f64)>>> = reports
        .iter()
        .map(|r| {
            r.trace.as_ref().map(|t| {
                t.per_step.iter().enumerate().filter(|(_, &g)| g > 0.0).map(|(s, &g)| (s as f64, g.log10())).collect()
            })
        })
        .collect();
    let xr = range(curves.iter().flatten().flatten().map(|p| p.0));
    let yr = range(curves.iter().flatten().flatten().map(|p| p.1));
    if xr.0.is_finite() {
        let mut panel = Panel::new(&mut img, 0, 0, xr, yr);
        for (i, c) in curves.iter().enumerate() {
            if let Some(c) = c {
                panel.polyline(c, colour(i));
            }
        }
    }
    img
}

/// One panel per variable: a bar of percentile-field MAE per report.
fn errors(reports: &[MetricReport]) -> RgbImage {
    let nv = reports[0].scores.len();
    let mut img = canvas(nv, 1);
    for v in 0..nv {
        let maes: Vec<f64> = reports.iter().map(|r| r.scores.get(v).map_or(f64::NAN, |s| s.mae)).collect();
        let top = range(maes.iter().copied()).1.max(f64::MIN_POSITIVE);
        let mut panel = Panel::new(&mut img, v as u32, 0, (0.0, reports.len() as f64), (0.0, top * 1.05));
        for (i, &m) in maes.iter().enumerate() {
            if m.is_finite() {
                panel.rect((i as f64 + 0.15, 0.0), (i as f64 + 0.85, m), colour(i));
            }
        }
    }
    img
}

fn legend(reports: &[MetricReport]) -> String {
    let mut s = String::from("colour  report\n");
    for (i, r) in reports.iter().enumerate() {
        let [red, green, blue] = colour(i).0;
        let _ = writeln!(s, "#{red:02x}{green:02x}{blue:02x} {}", r.meta.label);
    }
    let vars: Vec<&str> = reports[0].scores.iter().map(|s| s.var.as_str()).collect();
    let _ = writeln!(s, "\npanels left to right: {}", vars.join(", "));
    s.push_str(
        "spectra.png  log10 zonal power against log10 wavenumber\n\
         bias.png     bias quantiles 5/25/50/75/95 per report\n\
         traces.png   log10 guidance gradient norm against reverse step\n\
         errors.png   percentile-field MAE per report\n",
    );
    s
}

/// Write every figure for `reports` into `dir` and return the file names.
pub fn render_all(reports: &[MetricReport], dir: &Path) -> Result<Vec<&'static str>> {
    save(&spectra(reports), dir, "spectra.png")?;
    save(&bias(reports), dir, "bias.png")?;
    save(&traces(reports), dir, "traces.png")?;
    save(&errors(reports), dir, "errors.png")?;
    std::fs::write(dir.join("legend.txt"), legend(reports)).with_context(|| format!("writing legend in {}", dir.display()))?;
    Ok(vec!["spectra.png", "bias.png", "traces.png", "errors.png", "legend.txt"])
}
