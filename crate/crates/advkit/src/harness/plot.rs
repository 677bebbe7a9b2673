//! Self-contained PNG line charts for experiment reports: axes, ticks, grid,
//! legend, and a built-in 5x7 uppercase bitmap font. No plotting dependency,
//! so emitted bytes are stable across environments.

use std::path::Path;

use image::{Rgb, RgbImage};

use super::HarnessError;

/// One polyline: a name for the legend, (x, y) points, and an RGB color.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub color: [u8; 3],
}

/// A titled chart over one or more series sharing the same axes.
#[derive(Debug, Clone)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

/// Fixed palette cycled by series index.
pub const PALETTE: [[u8; 3]; 6] = [
    [204, 41, 54],
    [38, 84, 124],
    [63, 145, 66],
    [230, 151, 29],
    [120, 60, 160],
    [60, 60, 60],
];

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([222, 222, 222]);
const TEXT: Rgb<u8> = Rgb([30, 30, 30]);

const MARGIN_LEFT: u32 = 58;
const MARGIN_RIGHT: u32 = 14;
const MARGIN_TOP: u32 = 26;
const MARGIN_BOTTOM: u32 = 42;

/// 5x7 glyphs, one byte per row, low 5 bits used, bit 4 leftmost.
fn glyph(c: char) -> [u8; 7] {
    match c {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        'A' => [0x0E, 0x11, 0x11, 0x11, 0x1F, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ',' => [0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '%' => [0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '/' => [0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10],
        '=' => [0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        ' ' => [0x00; 7],
        // Unknown characters render as a hollow box.
        _ => [0x1F, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1F],
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

/// Draws `text` uppercased at (x, y) top-left, 6 px advance per character.
fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, color: Rgb<u8>) {
    let mut cx = x;
    for ch in text.to_ascii_uppercase().chars() {
        let rows = glyph(ch);
        for (r, bits) in rows.iter().enumerate() {
            for col in 0..5 {
                if bits & (0x10 >> col) != 0 {
                    put(img, cx + col as i64, y + r as i64, color);
                }
            }
        }
        cx += 6;
    }
}

fn text_width(text: &str) -> i64 {
    6 * text.chars().count() as i64
}

fn draw_line(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let (mut x, mut y) = (x0, y0);
    let mut err = dx + dy;
    loop {
        put(img, x, y, color);
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

fn draw_marker(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    for dy in -1..=1 {
        for dx in -1..=1 {
            put(img, x + dx, y + dy, color);
        }
    }
}

fn tick_label(v: f64, range: f64) -> String {
    if range < 1.0 {
        format!("{v:.3}")
    } else if range < 10.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.0}")
    }
}

impl LineChart {
    /// Renders the chart to an RGB raster. Degenerate ranges (a single point,
    /// or all values equal) widen to a unit span so everything stays visible.
    pub fn render(&self, width: u32, height: u32) -> RgbImage {
        let mut img = RgbImage::from_pixel(width, height, BG);
        let x0 = MARGIN_LEFT as i64;
        let y0 = MARGIN_TOP as i64;
        let x1 = (width - MARGIN_RIGHT) as i64;
        let y1 = (height - MARGIN_BOTTOM) as i64;

        let points: Vec<(f64, f64)> =
            self.series.iter().flat_map(|s| s.points.clone()).collect();
        let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in &points {
            xmin = xmin.min(x);
            xmax = xmax.max(x);
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
        if points.is_empty() {
            (xmin, xmax, ymin, ymax) = (0.0, 1.0, 0.0, 1.0);
        }
        if xmax - xmin < 1e-12 {
            xmin -= 0.5;
            xmax += 0.5;
        }
        if ymax - ymin < 1e-12 {
            ymin -= 0.5;
            ymax += 0.5;
        } else {
            let pad = (ymax - ymin) * 0.06;
            ymin -= pad;
            ymax += pad;
        }

        let to_px = |x: f64, y: f64| -> (i64, i64) {
            let fx = (x - xmin) / (xmax - xmin);
            let fy = (y - ymin) / (ymax - ymin);
            (
                x0 + (fx * (x1 - x0) as f64).round() as i64,
                y1 - (fy * (y1 - y0) as f64).round() as i64,
            )
        };

        let ticks = 5;
        for k in 0..=ticks {
            let f = k as f64 / ticks as f64;
            let xv = xmin + f * (xmax - xmin);
            let yv = ymin + f * (ymax - ymin);
            let (tx, _) = to_px(xv, ymin);
            let (_, ty) = to_px(xmin, yv);
            draw_line(&mut img, tx, y0, tx, y1, GRID);
            draw_line(&mut img, x0, ty, x1, ty, GRID);
            draw_line(&mut img, tx, y1, tx, y1 + 3, AXIS);
            draw_line(&mut img, x0 - 3, ty, x0, ty, AXIS);
            let xl = tick_label(xv, xmax - xmin);
            draw_text(&mut img, tx - text_width(&xl) / 2, y1 + 6, &xl, TEXT);
            let yl = tick_label(yv, ymax - ymin);
            draw_text(&mut img, x0 - 6 - text_width(&yl), ty - 3, &yl, TEXT);
        }
        draw_line(&mut img, x0, y0, x0, y1, AXIS);
        draw_line(&mut img, x0, y1, x1, y1, AXIS);

        for (si, series) in self.series.iter().enumerate() {
            let color = Rgb(series.color);
            let px: Vec<(i64, i64)> =
                series.points.iter().map(|&(x, y)| to_px(x, y)).collect();
            for pair in px.windows(2) {
                draw_line(&mut img, pair[0].0, pair[0].1, pair[1].0, pair[1].1, color);
            }
            for &(mx, my) in &px {
                draw_marker(&mut img, mx, my, color);
            }
            // Legend entry, stacked top-right inside the plot area.
            let ly = y0 + 4 + 10 * si as i64;
            let lx = x1 - 14 - text_width(&series.name);
            for dy in 0..7 {
                for dx in 0..7 {
                    put(&mut img, lx - 10 + dx, ly + dy, color);
                }
            }
            draw_text(&mut img, lx, ly, &series.name, TEXT);
        }

        draw_text(
            &mut img,
            (width as i64 - text_width(&self.title)) / 2,
            8,
            &self.title,
            TEXT,
        );
        draw_text(
            &mut img,
            (width as i64 - text_width(&self.x_label)) / 2,
            height as i64 - 14,
            &self.x_label,
            TEXT,
        );
        // Vertical axis label runs down the left edge, one glyph per line.
        let mut ly = y0;
        for ch in self.y_label.chars() {
            draw_text(&mut img, 4, ly, &ch.to_string(), TEXT);
            ly += 9;
        }
        img
    }

    /// Renders at the default 640x420 and writes a PNG.
    pub fn save_png(&self, path: &Path) -> Result<(), HarnessError> {
        let img = self.render(640, 420);
        img.save(path)
            .map_err(|e| HarnessError::Plot(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_chart() -> LineChart {
        LineChart {
            title: "Escape rate".to_string(),
            x_label: "epsilon".to_string(),
            y_label: "rate".to_string(),
            series: vec![
                Series {
                    name: "pgd".to_string(),
                    points: vec![(1.0, 0.2), (2.0, 0.5), (4.0, 0.8)],
                    color: PALETTE[0],
                },
                Series {
                    name: "ffl-pgd".to_string(),
                    points: vec![(1.0, 0.3), (2.0, 0.6), (4.0, 0.9)],
                    color: PALETTE[1],
                },
            ],
        }
    }

    #[test]
    fn render_paints_every_series_color() {
        let img = sample_chart().render(640, 420);
        assert_eq!((img.width(), img.height()), (640, 420));
        for color in [PALETTE[0], PALETTE[1]] {
            let hits = img.pixels().filter(|p| p.0 == color).count();
            assert!(hits > 20, "series color {color:?} barely painted: {hits}");
        }
        let text_hits = img.pixels().filter(|p| p.0 == [30, 30, 30]).count();
        assert!(text_hits > 50, "labels missing: {text_hits}");
    }

    #[test]
    fn degenerate_single_point_still_renders() {
        let chart = LineChart {
            title: "t".to_string(),
            x_label: "x".to_string(),
            y_label: "y".to_string(),
            series: vec![Series {
                name: "s".to_string(),
                points: vec![(2.0, 2.0)],
                color: PALETTE[2],
            }],
        };
        let img = chart.render(320, 240);
        let hits = img.pixels().filter(|p| p.0 == PALETTE[2]).count();
        assert!(hits >= 9, "marker missing: {hits}");
    }

    #[test]
    fn save_png_writes_a_nonempty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chart.png");
        sample_chart().save_png(&path).unwrap();
        let meta = std::fs::metadata(&path).unwrap();
        assert!(meta.len() > 500, "png suspiciously small: {}", meta.len());
    }
}
