//! Scan-order picture: every patch is filled with a hue that encodes its
//! position along the path (red first, through green and blue, magenta
//! last), shadow patches get a black outline and the two start cells a
//! white centre mark.

use umbra_core::{PatchGrid, ScanPath};

/// Minimum rendered size of one patch in pixels.
pub const MIN_CELL: usize = 16;

pub struct Rendering {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB.
    pub pixels: Vec<u8>,
}

fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = (h % 360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|u| ((u + m) * 255.0).round() as u8)
}

/// Colour of the `index`-th of `len` visited patches.
pub fn visit_colour(index: usize, len: usize) -> [u8; 3] {
    let t = if len > 1 { index as f64 / (len - 1) as f64 } else { 0.0 };
    hsv(300.0 * t, 0.85, 0.95)
}

pub fn render(path: &ScanPath, grid: &PatchGrid) -> Rendering {
    let s = grid.patch_size();
    let cell = s * MIN_CELL.div_ceil(s);
    let (rows, cols) = (path.rows(), path.cols());
    let (width, height) = (cols * cell, rows * cell);
    let mut pixels = vec![0u8; width * height * 3];
    let mut put = |y: usize, x: usize, rgb: [u8; 3]| {
        let i = 3 * (y * width + x);
        pixels[i..i + 3].copy_from_slice(&rgb);
    };
    let positions = path.positions();
    for r in 0..rows {
        for c in 0..cols {
            let colour = visit_colour(positions[r * cols + c], path.len());
            let shadow = grid.is_shadow(r, c);
            for dy in 0..cell {
                for dx in 0..cell {
                    let edge = dy == 0 || dx == 0 || dy == cell - 1 || dx == cell - 1;
                    put(r * cell + dy, c * cell + dx, if shadow && edge { [0; 3] } else { colour });
                }
            }
        }
    }
    let mark = (cell / 4).max(1);
    for p in [path.start_a(), path.start_b()].into_iter().flatten() {
        let (y0, x0) = (p.row * cell + cell / 2 - mark / 2, p.col * cell + cell / 2 - mark / 2);
        for dy in 0..mark {
            for dx in 0..mark {
                put(y0 + dy, x0 + dx, [255; 3]);
            }
        }
    }
    Rendering { width, height, pixels }
}
