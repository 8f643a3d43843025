//! Minimal line-chart rasterizer. Axes, gridlines, one polyline per
//! series with a color swatch legend in the top-right corner; no text.
//! Good enough to eyeball convergence without pulling in a plotting
//! stack.

use std::io::BufWriter;
use std::path::Path;

use tracklab_core::error::{Error, Result};

const WIDTH: usize = 720;
const HEIGHT: usize = 440;
const MARGIN: usize = 48;

pub struct Series<'a> {
    pub color: [u8; 3],
    pub points: &'a [(f64, f64)],
}

struct Canvas {
    px: Vec<u8>,
}

impl Canvas {
    fn new() -> Canvas {
        Canvas { px: vec![0xff; WIDTH * HEIGHT * 3] }
    }

    fn set(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if (0..WIDTH as i64).contains(&x) && (0..HEIGHT as i64).contains(&y) {
            let i = (y as usize * WIDTH + x as usize) * 3;
            self.px[i..i + 3].copy_from_slice(&c);
        }
    }

    fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, c);
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

    fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut enc = png::Encoder::new(BufWriter::new(file), WIDTH as u32, HEIGHT as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer =
            enc.write_header().map_err(|e| Error::Data(format!("png encode: {e}")))?;
        writer
            .write_image_data(&self.px)
            .map_err(|e| Error::Data(format!("png encode: {e}")))?;
        Ok(())
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Renders all series into `path` with shared axes auto-scaled to the
/// union of their point ranges.
pub fn line_chart(path: &Path, series: &[Series<'_>]) -> Result<()> {
    if series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::Data("nothing to plot: every series is empty".into()));
    }
    let (x0, x1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let plot_w = (WIDTH - 2 * MARGIN) as f64;
    let plot_h = (HEIGHT - 2 * MARGIN) as f64;
    let to_px = |x: f64, y: f64| {
        let px = MARGIN as f64 + (x - x0) / (x1 - x0) * plot_w;
        let py = (HEIGHT - MARGIN) as f64 - (y - y0) / (y1 - y0) * plot_h;
        (px.round() as i64, py.round() as i64)
    };

    let mut canvas = Canvas::new();
    let grid = [0xe0, 0xe0, 0xe0];
    let frame = [0x30, 0x30, 0x30];
    for tick in 0..=4 {
        let fx = MARGIN as i64 + (tick * (WIDTH - 2 * MARGIN) / 4) as i64;
        let fy = MARGIN as i64 + (tick * (HEIGHT - 2 * MARGIN) / 4) as i64;
        canvas.line(fx, MARGIN as i64, fx, (HEIGHT - MARGIN) as i64, grid);
        canvas.line(MARGIN as i64, fy, (WIDTH - MARGIN) as i64, fy, grid);
    }
    let (l, r, t, b) =
        (MARGIN as i64, (WIDTH - MARGIN) as i64, MARGIN as i64, (HEIGHT - MARGIN) as i64);
    canvas.line(l, t, r, t, frame);
    canvas.line(l, b, r, b, frame);
    canvas.line(l, t, l, b, frame);
    canvas.line(r, t, r, b, frame);

    for (si, s) in series.iter().enumerate() {
        for pair in s.points.windows(2) {
            let (ax, ay) = to_px(pair[0].0, pair[0].1);
            let (bx, by) = to_px(pair[1].0, pair[1].1);
            canvas.line(ax, ay, bx, by, s.color);
        }
        if let [only] = s.points {
            let (x, y) = to_px(only.0, only.1);
            canvas.line(x - 2, y, x + 2, y, s.color);
            canvas.line(x, y - 2, x, y + 2, s.color);
        }
        // Legend swatch.
        let sx = r - 18;
        let sy = t + 8 + 14 * si as i64;
        for dy in 0..8 {
            canvas.line(sx, sy + dy, sx + 10, sy + dy, s.color);
        }
    }
    canvas.save(path)
}
