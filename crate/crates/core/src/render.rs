//! Images of learned value maps and rollout trajectories.

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::dataset::Task;
use crate::error::{Error, Result};
use crate::eval::{cell_table, Policy};
use crate::nav::Cell;
use crate::terrain::Raster;

pub const START_COLOR: Rgb<u8> = Rgb([0, 255, 0]);
pub const GOAL_COLOR: Rgb<u8> = Rgb([0, 0, 255]);
pub const PATH_COLOR: Rgb<u8> = Rgb([255, 0, 0]);

/// Per-cell value `max_a score(cell, a)`, row-major over the grid.
pub fn value_map(policy: &dyn Policy, task: &Task) -> Result<Vec<f32>> {
    Ok(cell_table(policy, task)?
        .iter()
        .map(|row| row.iter().copied().fold(f32::NEG_INFINITY, f32::max))
        .collect())
}

/// Min-max normalised grayscale image of an `n x n` value grid, each cell
/// drawn as an `upscale x upscale` block. A constant grid renders mid-gray.
pub fn render_value_map(values: &[f32], n: usize, upscale: usize) -> Result<GrayImage> {
    if n == 0 || upscale == 0 || values.len() != n * n {
        return Err(Error::shape(
            "render_value_map",
            format!("{} values for a {n}x{n} grid at scale {upscale}", values.len()),
        ));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParams("value map holds non-finite entries".into()));
    }
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let level = |v: f32| -> u8 {
        if hi > lo {
            (((v - lo) / (hi - lo)) * 255.0).round() as u8
        } else {
            128
        }
    };
    if hi <= lo {
        log::warn!("value map is constant; rendering mid-gray");
    }
    let side = (n * upscale) as u32;
    Ok(GrayImage::from_fn(side, side, |x, y| {
        let (cx, cy) = (x as usize / upscale, y as usize / upscale);
        Luma([level(values[cy * n + cx])])
    }))
}

fn center(c: Cell, cell_size: usize) -> (i64, i64) {
    let half = (cell_size / 2) as i64;
    let l = cell_size as i64;
    (c.x as i64 * l + half, c.y as i64 * l + half)
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = ((x1 - x0).signum(), (y1 - y0).signum());
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
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

fn marker(img: &mut RgbImage, c: Cell, cell_size: usize, color: Rgb<u8>) {
    let s = (cell_size / 2).max(1) as i64;
    let (cx, cy) = center(c, cell_size);
    let x0 = cx - s / 2;
    let y0 = cy - s / 2;
    for y in y0..y0 + s {
        for x in x0..x0 + s {
            put(img, x, y, color);
        }
    }
}

/// The terrain in gray with the path in red, the start marked green and the
/// goal marked blue.
pub fn render_trajectory_overlay(gray: &Raster, cell_size: usize, positions: &[Cell], goal: Cell) -> Result<RgbImage> {
    if cell_size == 0 || gray.size() % cell_size != 0 {
        return Err(Error::InvalidParams(format!(
            "cell size {cell_size} does not divide image size {}",
            gray.size()
        )));
    }
    let first = *positions
        .first()
        .ok_or_else(|| Error::MalformedTrajectory("no positions to draw".into()))?;
    let base = gray.to_gray_image();
    let mut img = RgbImage::from_fn(base.width(), base.height(), |x, y| {
        let v = base.get_pixel(x, y).0[0];
        Rgb([v, v, v])
    });
    for w in positions.windows(2) {
        line(&mut img, center(w[0], cell_size), center(w[1], cell_size), PATH_COLOR);
    }
    marker(&mut img, first, cell_size, START_COLOR);
    marker(&mut img, goal, cell_size, GOAL_COLOR);
    Ok(img)
}
