//! Static trajectory plots: a top-down (x–z) view next to an oblique 3D
//! projection of the camera centres.

use std::io::Cursor;
use std::path::Path;

use camtraj_core::PoseSE3;
use image::{ImageFormat, Rgb, RgbImage};
use nalgebra::Vector3;

use crate::error::{CliError, CliResult};
use crate::fsutil;

const PANEL: u32 = 256;
const MARGIN: f64 = 16.0;
const ESTIMATE: Rgb<u8> = Rgb([30, 90, 200]);
const REFERENCE: Rgb<u8> = Rgb([150, 150, 150]);
const START: Rgb<u8> = Rgb([200, 40, 40]);

fn oblique(p: &Vector3<f64>) -> (f64, f64) {
    let (az, el) = (35f64.to_radians(), 25f64.to_radians());
    let x = p.x * az.cos() + p.z * az.sin();
    let depth = -p.x * az.sin() + p.z * az.cos();
    let y = -p.y * el.cos() + depth * el.sin();
    (x, y)
}

fn top_down(p: &Vector3<f64>) -> (f64, f64) {
    (p.x, -p.z)
}

fn draw_line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), color: Rgb<u8>) {
    // Bresenham
    let (mut x, mut y) = a;
    let (dx, dy) = ((b.0 - a.0).abs(), -(b.1 - a.1).abs());
    let (sx, sy) = (if a.0 < b.0 { 1 } else { -1 }, if a.1 < b.1 { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if (x, y) == b {
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

fn draw_panel(img: &mut RgbImage, x0: u32, tracks: &[(&[Vector3<f64>], Rgb<u8>)], view: fn(&Vector3<f64>) -> (f64, f64)) {
    let pts: Vec<(f64, f64)> = tracks.iter().flat_map(|(t, _)| t.iter().map(view)).collect();
    let (mut lo, mut hi) = ((f64::INFINITY, f64::INFINITY), (f64::NEG_INFINITY, f64::NEG_INFINITY));
    for &(x, y) in &pts {
        lo = (lo.0.min(x), lo.1.min(y));
        hi = (hi.0.max(x), hi.1.max(y));
    }
    let span = (hi.0 - lo.0).max(hi.1 - lo.1).max(1e-9);
    let scale = (PANEL as f64 - 2.0 * MARGIN) / span;
    let centre = ((lo.0 + hi.0) / 2.0, (lo.1 + hi.1) / 2.0);
    let to_px = |(x, y): (f64, f64)| {
        (
            (x0 as f64 + PANEL as f64 / 2.0 + (x - centre.0) * scale).round() as i64,
            (PANEL as f64 / 2.0 + (y - centre.1) * scale).round() as i64,
        )
    };
    for (track, color) in tracks {
        let px: Vec<_> = track.iter().map(|p| to_px(view(p))).collect();
        for w in px.windows(2) {
            draw_line(img, w[0], w[1], *color);
        }
        if let Some(&(x, y)) = px.first() {
            for d in -2..=2 {
                draw_line(img, (x - 2, y + d), (x + 2, y + d), START);
            }
        }
    }
    for y in 0..PANEL {
        img.put_pixel(x0, y, REFERENCE);
    }
}

/// Render camera centres of `estimate` (and optionally `reference`) as PNG.
pub fn render(estimate: &[PoseSE3], reference: Option<&[PoseSE3]>) -> CliResult<Vec<u8>> {
    let est: Vec<Vector3<f64>> = estimate.iter().map(PoseSE3::camera_center).collect();
    let refc: Option<Vec<Vector3<f64>>> = reference.map(|r| r.iter().map(PoseSE3::camera_center).collect());
    let mut tracks: Vec<(&[Vector3<f64>], Rgb<u8>)> = Vec::new();
    if let Some(r) = &refc {
        tracks.push((r, REFERENCE));
    }
    tracks.push((&est, ESTIMATE));
    let mut img = RgbImage::from_pixel(2 * PANEL, PANEL, Rgb([255, 255, 255]));
    draw_panel(&mut img, 0, &tracks, top_down);
    draw_panel(&mut img, PANEL, &tracks, oblique);
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| CliError::numerical(format!("encoding plot: {e}")))?;
    Ok(buf.into_inner())
}

pub fn write(path: &Path, estimate: &[PoseSE3], reference: Option<&[PoseSE3]>) -> CliResult<()> {
    fsutil::atomic_write(path, &render(estimate, reference)?)
}
