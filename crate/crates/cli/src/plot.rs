//! Raster scatter plots of the 3-D embedding: three pairwise axis
//! projections side by side, points colored by class, test points drawn
//! larger than train points.

use std::path::Path;

use anyhow::Context;

use protoparts_core::embedding::{EmbeddedPoint, Split};

const PANEL: usize = 300;
const MARGIN: usize = 12;
const GUTTER: usize = 16;

/// Eight visually distinct fill colors; classes beyond eight reuse them.
const PALETTE: [[u8; 3]; 8] = [
    [214, 96, 40],
    [46, 109, 204],
    [60, 158, 60],
    [186, 56, 164],
    [222, 170, 32],
    [36, 160, 160],
    [128, 88, 48],
    [96, 96, 96],
];

fn put(img: &mut image::RgbImage, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, image::Rgb(color));
    }
}

fn draw_panel(
    img: &mut image::RgbImage,
    x0: usize,
    points: &[EmbeddedPoint],
    ax: usize,
    ay: usize,
) {
    for d in 0..PANEL {
        put(img, (x0 + d) as i64, 0, [200, 200, 200]);
        put(img, (x0 + d) as i64, (PANEL - 1) as i64, [200, 200, 200]);
        put(img, x0 as i64, d as i64, [200, 200, 200]);
        put(img, (x0 + PANEL - 1) as i64, d as i64, [200, 200, 200]);
    }
    let (mut lo_x, mut hi_x) = (f32::INFINITY, f32::NEG_INFINITY);
    let (mut lo_y, mut hi_y) = (f32::INFINITY, f32::NEG_INFINITY);
    for p in points {
        lo_x = lo_x.min(p.coords[ax]);
        hi_x = hi_x.max(p.coords[ax]);
        lo_y = lo_y.min(p.coords[ay]);
        hi_y = hi_y.max(p.coords[ay]);
    }
    let span = (PANEL - 2 * MARGIN - 1) as f32;
    let scale = |v: f32, lo: f32, hi: f32| {
        if hi > lo {
            MARGIN as f32 + span * (v - lo) / (hi - lo)
        } else {
            (PANEL / 2) as f32
        }
    };
    for p in points {
        let px = x0 as i64 + scale(p.coords[ax], lo_x, hi_x).round() as i64;
        // image rows grow downward; flip so the second axis points up
        let py = (PANEL - 1) as i64 - scale(p.coords[ay], lo_y, hi_y).round() as i64;
        let color = PALETTE[p.label % PALETTE.len()];
        let reach: i64 = if p.split == Split::Train { 0 } else { 1 };
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                put(img, px + dx, py + dy, color);
            }
        }
    }
}

/// Render `embedding.png`-style scatter panels for the axis pairs
/// (1,2), (1,3), and (2,3).
pub fn scatter_png(path: &Path, points: &[EmbeddedPoint]) -> anyhow::Result<()> {
    let width = 3 * PANEL + 2 * GUTTER;
    let mut img = image::RgbImage::from_pixel(width as u32, PANEL as u32, image::Rgb([255; 3]));
    for (panel, (ax, ay)) in [(0usize, 1usize), (0, 2), (1, 2)].into_iter().enumerate() {
        draw_panel(&mut img, panel * (PANEL + GUTTER), points, ax, ay);
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
