//! Minimal PNG renderings of run artifacts: a loss curve, a score
//! histogram per class, and x / lesioned-x / reconstruction image grids.
//! Everything is drawn directly into an RGB buffer; no plotting stack.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::phantom::Image;

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const LINE: Rgb<u8> = Rgb([200, 60, 40]);
const NORMAL: Rgb<u8> = Rgb([60, 120, 200]);
const ABNORMAL: Rgb<u8> = Rgb([210, 90, 50]);

fn blank(w: u32, h: u32) -> RgbImage {
    RgbImage::from_pixel(w, h, BG)
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path)
        .map_err(|e| Error::persistence(path, e.to_string()))
}

fn draw_line(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
    // Bresenham
    let (dx, sx) = ((x1 - x0).abs(), if x0 < x1 { 1 } else { -1 });
    let (dy, sy) = (-(y1 - y0).abs(), if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
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

const MARGIN: u32 = 40;

/// Loss curve over steps; y is linearly scaled to the observed range.
pub fn render_loss_curve(values: &[f64], path: &Path) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Evaluation("no loss values to plot".into()));
    }
    let (w, h) = (640u32, 400u32);
    let mut img = blank(w, h);
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let plot_w = (w - 2 * MARGIN) as f64;
    let plot_h = (h - 2 * MARGIN) as f64;
    draw_line(&mut img, MARGIN as i64, MARGIN as i64, MARGIN as i64, (h - MARGIN) as i64, AXIS);
    draw_line(
        &mut img,
        MARGIN as i64,
        (h - MARGIN) as i64,
        (w - MARGIN) as i64,
        (h - MARGIN) as i64,
        AXIS,
    );
    let denom = (values.len() - 1).max(1) as f64;
    let to_xy = |i: usize, v: f64| {
        let x = MARGIN as f64 + plot_w * i as f64 / denom;
        let y = MARGIN as f64 + plot_h * (1.0 - (v - lo) / span);
        (x as i64, y as i64)
    };
    for i in 1..values.len() {
        let (x0, y0) = to_xy(i - 1, values[i - 1]);
        let (x1, y1) = to_xy(i, values[i]);
        draw_line(&mut img, x0, y0, x1, y1, LINE);
    }
    save(&img, path)
}

/// Two-class histogram of normality scores, 32 shared bins.
pub fn render_score_histogram(
    normal: &[f64],
    abnormal: &[f64],
    path: &Path,
) -> Result<()> {
    if normal.is_empty() && abnormal.is_empty() {
        return Err(Error::Evaluation("no scores to plot".into()));
    }
    let all = normal.iter().chain(abnormal.iter());
    let lo = all.clone().cloned().fold(f64::INFINITY, f64::min);
    let hi = all.cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let bins = 32usize;
    let fill = |scores: &[f64]| {
        let mut counts = vec![0usize; bins];
        for &s in scores {
            let b = (((s - lo) / span) * bins as f64) as usize;
            counts[b.min(bins - 1)] += 1;
        }
        counts
    };
    let cn = fill(normal);
    let ca = fill(abnormal);
    let peak = cn.iter().chain(ca.iter()).cloned().max().unwrap_or(1).max(1);

    let (w, h) = (640u32, 400u32);
    let mut img = blank(w, h);
    let plot_w = w - 2 * MARGIN;
    let plot_h = (h - 2 * MARGIN) as f64;
    let bw = plot_w / bins as u32;
    for b in 0..bins {
        let x0 = MARGIN + b as u32 * bw;
        for (counts, color, offset) in [(&cn, NORMAL, 0u32), (&ca, ABNORMAL, bw / 2)] {
            let bar_h = (plot_h * counts[b] as f64 / peak as f64) as u32;
            for x in (x0 + offset)..(x0 + offset + bw / 2).min(w - MARGIN) {
                for y in (h - MARGIN - bar_h)..(h - MARGIN) {
                    img.put_pixel(x, y, color);
                }
            }
        }
    }
    draw_line(&mut img, MARGIN as i64, MARGIN as i64, MARGIN as i64, (h - MARGIN) as i64, AXIS);
    draw_line(
        &mut img,
        MARGIN as i64,
        (h - MARGIN) as i64,
        (w - MARGIN) as i64,
        (h - MARGIN) as i64,
        AXIS,
    );
    save(&img, path)
}

/// Grid of (clean, lesioned, reconstruction) triplets, one row per sample.
pub fn render_reconstruction_grid(
    triplets: &[(Image, Image, Image)],
    path: &Path,
) -> Result<()> {
    if triplets.is_empty() {
        return Err(Error::Evaluation("no reconstructions to plot".into()));
    }
    let th = triplets[0].0.height();
    let tw = triplets[0].0.width();
    let gutter = 2u32;
    let w = 3 * tw as u32 + 4 * gutter;
    let h = triplets.len() as u32 * (th as u32 + gutter) + gutter;
    let mut img = blank(w, h);
    for (row, (a, b, c)) in triplets.iter().enumerate() {
        for (col, tile) in [a, b, c].into_iter().enumerate() {
            if tile.height() != th || tile.width() != tw {
                return Err(Error::Integrity("grid tiles differ in size".into()));
            }
            let ox = gutter + col as u32 * (tw as u32 + gutter);
            let oy = gutter + row as u32 * (th as u32 + gutter);
            for y in 0..th {
                for x in 0..tw {
                    let v = (tile.pixels[[y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
                    img.put_pixel(ox + x as u32, oy + y as u32, Rgb([v, v, v]));
                }
            }
        }
    }
    save(&img, path)
}
