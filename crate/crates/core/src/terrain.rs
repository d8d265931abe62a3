//! Procedural crater terrain, the three-channel network input, and
//! pixel-to-cell risk compression.

use std::path::Path;

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::canny::{canny_edges, CannyParams};
use crate::error::{Error, Result};
use crate::nav::Cell;

/// Square single-channel raster, row-major, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    size: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn zeros(size: usize) -> Self {
        Raster {
            size,
            data: vec![0.0; size * size],
        }
    }

    pub fn from_vec(size: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != size * size {
            return Err(Error::shape(
                "raster",
                format!("{} values for a {size}x{size} raster", data.len()),
            ));
        }
        Ok(Raster { size, data })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.size + x]
    }

    /// Quantize to 8 bits, the on-disk precision.
    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_fn(self.size as u32, self.size as u32, |x, y| {
            Luma([to_u8(self.get(x as usize, y as usize))])
        })
    }

    pub fn from_gray_image(img: &GrayImage) -> Result<Self> {
        if img.width() != img.height() {
            return Err(Error::shape(
                "raster",
                format!("image is {}x{}, expected square", img.width(), img.height()),
            ));
        }
        let size = img.width() as usize;
        Raster::from_vec(size, img.pixels().map(|p| p.0[0] as f32 / 255.0).collect())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_png(&self.to_gray_image(), path)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        Raster::from_gray_image(&load_gray(path)?)
    }

    /// Round-trip through 8-bit quantization.
    pub fn quantized(&self) -> Raster {
        Raster {
            size: self.size,
            data: self.data.iter().map(|&v| to_u8(v) as f32 / 255.0).collect(),
        }
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub(crate) fn save_png(img: &GrayImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn load_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8())
}

/// Mask PNG convention: 0 = safe, 255 = risky.
pub fn save_mask_png(mask: &[bool], size: usize, path: &Path) -> Result<()> {
    let img = GrayImage::from_fn(size as u32, size as u32, |x, y| {
        Luma([if mask[y as usize * size + x as usize] { 255 } else { 0 }])
    });
    save_png(&img, path)
}

pub fn load_mask_png(path: &Path) -> Result<(usize, Vec<bool>)> {
    let img = load_gray(path)?;
    if img.width() != img.height() {
        return Err(Error::shape("mask", "mask image must be square"));
    }
    Ok((
        img.width() as usize,
        img.pixels().map(|p| p.0[0] > 127).collect(),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TerrainParams {
    pub image_size: usize,
    /// Pixels per cell edge of the compressed grid.
    pub cell_size: usize,
    /// Inclusive bounds on the number of craters.
    pub crater_count_range: (u32, u32),
    /// Crater bowl radius in pixels, sampled uniformly in `[min, max)`.
    pub crater_radius_range: (f64, f64),
    pub rim_brightness: f64,
    pub bowl_depth: f64,
    /// Amplitude of the smooth background noise around mid-gray.
    pub noise_amplitude: f64,
    /// Fraction of risky pixels above which a cell is not traversable.
    pub risk_fraction: f64,
    pub canny: CannyParams,
}

impl Default for TerrainParams {
    fn default() -> Self {
        TerrainParams::for_size(64)
    }
}

impl TerrainParams {
    /// Defaults for an `image_size` raster; crater radii scale with the image.
    pub fn for_size(image_size: usize) -> Self {
        let scale = image_size as f64 / 64.0;
        TerrainParams {
            image_size,
            cell_size: 4,
            crater_count_range: (3, 8),
            crater_radius_range: (3.0 * scale, 7.0 * scale),
            rim_brightness: 0.3,
            bowl_depth: 0.35,
            noise_amplitude: 0.15,
            risk_fraction: 0.25,
            canny: CannyParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if self.cell_size == 0 || self.image_size == 0 || self.image_size % self.cell_size != 0 {
            return bad(format!(
                "image size {} must be a positive multiple of cell size {}",
                self.image_size, self.cell_size
            ));
        }
        if self.image_size / self.cell_size < 2 {
            return bad("compressed grid must be at least 2x2".into());
        }
        let (cmin, cmax) = self.crater_count_range;
        if cmin == 0 || cmin > cmax {
            return bad(format!("crater count range ({cmin}, {cmax}) is empty or non-positive"));
        }
        let (rmin, rmax) = self.crater_radius_range;
        if !(rmin > 0.0 && rmin < rmax) {
            return bad(format!("crater radius range ({rmin}, {rmax}) is empty or non-positive"));
        }
        if !(0.0..=1.0).contains(&self.risk_fraction) {
            return bad("risk fraction must lie in [0, 1]".into());
        }
        if self.noise_amplitude < 0.0 || self.rim_brightness < 0.0 || self.bowl_depth < 0.0 {
            return bad("brightness amplitudes must be non-negative".into());
        }
        self.canny.validate()
    }

    pub fn grid_size(&self) -> usize {
        self.image_size / self.cell_size
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("params serialize");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Crater {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TerrainMap {
    pub gray: Raster,
    pub risky: Vec<bool>,
    pub edge: Raster,
    pub seed: u64,
    pub params_digest: String,
    pub craters: Vec<Crater>,
}

impl TerrainMap {
    pub fn size(&self) -> usize {
        self.gray.size()
    }

    pub fn risky_fraction(&self) -> f64 {
        self.risky.iter().filter(|&&r| r).count() as f64 / self.risky.len() as f64
    }

    /// Traversability grid at `cell_size` resolution.
    pub fn traversability(&self, cell_size: usize, risk_fraction: f64) -> Result<Vec<bool>> {
        compress_risky(&self.risky, self.size(), cell_size, risk_fraction)
    }

    /// Build from user-supplied rasters, e.g. real orbital imagery.
    pub fn from_pngs(gray: &Path, mask: &Path, canny: &CannyParams) -> Result<Self> {
        let gray = Raster::load_png(gray)?;
        let (msize, risky) = load_mask_png(mask)?;
        if msize != gray.size() {
            return Err(Error::shape(
                "terrain",
                format!("mask is {msize}px, gray image is {}px", gray.size()),
            ));
        }
        let edge = canny_edges(&gray, canny);
        let digest = hex::encode(Sha256::digest(serde_json::to_vec(canny)?));
        Ok(TerrainMap {
            gray,
            risky,
            edge,
            seed: 0,
            params_digest: digest,
            craters: Vec::new(),
        })
    }
}

/// Deterministic crater field over smooth value noise.
pub fn generate_terrain(seed: u64, params: &TerrainParams) -> Result<TerrainMap> {
    params.validate()?;
    let m = params.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let noise = value_noise(&mut rng, m);
    let mut gray: Vec<f64> = noise
        .iter()
        .map(|v| 0.5 + params.noise_amplitude * v)
        .collect();

    let (cmin, cmax) = params.crater_count_range;
    let count = rng.gen_range(cmin..=cmax);
    let (rmin, rmax) = params.crater_radius_range;
    let craters: Vec<Crater> = (0..count)
        .map(|_| Crater {
            cx: rng.gen_range(0.0..m as f64),
            cy: rng.gen_range(0.0..m as f64),
            radius: rng.gen_range(rmin..rmax),
        })
        .collect();

    let mut risky = vec![false; m * m];
    let rim_width = 0.4;
    for c in &craters {
        let reach = c.radius * (1.0 + rim_width) + 1.0;
        let x0 = (c.cx - reach).floor().max(0.0) as usize;
        let x1 = ((c.cx + reach).ceil() as usize).min(m - 1);
        let y0 = (c.cy - reach).floor().max(0.0) as usize;
        let y1 = ((c.cy + reach).ceil() as usize).min(m - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                // Pixel centers.
                let dx = x as f64 + 0.5 - c.cx;
                let dy = y as f64 + 0.5 - c.cy;
                let d = (dx * dx + dy * dy).sqrt() / c.radius;
                let i = y * m + x;
                if d < 1.0 {
                    risky[i] = true;
                    // Bowl, lit slightly from the west.
                    let shade = 1.0 - d * d;
                    let tilt = 0.25 * dx / c.radius;
                    gray[i] -= params.bowl_depth * shade * (1.0 - tilt);
                } else if d < 1.0 + rim_width {
                    let t = (d - 1.0) / rim_width;
                    gray[i] += params.rim_brightness * (1.0 - t) * (1.0 - t);
                }
            }
        }
    }

    let gray = Raster::from_vec(m, gray.iter().map(|v| v.clamp(0.0, 1.0) as f32).collect())?
        .quantized();
    let edge = canny_edges(&gray, &params.canny);
    Ok(TerrainMap {
        gray,
        risky,
        edge,
        seed,
        params_digest: params.digest(),
        craters,
    })
}

/// Three octaves of bilinear value noise, scaled to roughly `[-1, 1]`.
fn value_noise(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * m];
    let mut amp = 1.0;
    let mut total = 0.0;
    for &cells in &[3usize, 6, 12] {
        let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1))
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let at = |i: usize, j: usize| lattice[j * (cells + 1) + i];
        for y in 0..m {
            for x in 0..m {
                let fx = x as f64 / m as f64 * cells as f64;
                let fy = y as f64 / m as f64 * cells as f64;
                let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
                let (tx, ty) = (smooth(fx - ix as f64), smooth(fy - iy as f64));
                let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
                let bottom = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
                out[y * m + x] += amp * (top * (1.0 - ty) + bottom * ty);
            }
        }
        total += amp;
        amp *= 0.5;
    }
    out.iter_mut().for_each(|v| *v /= total);
    out
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Channels-first `3 x M x M` network input: gray, edge, goal indicator.
#[derive(Clone, Debug, PartialEq)]
pub struct InputEncoding {
    size: usize,
    data: Vec<f32>,
}

impl InputEncoding {
    pub const CHANNELS: usize = 3;

    pub fn from_vec(size: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != Self::CHANNELS * size * size {
            return Err(Error::shape(
                "input_encoding",
                format!("{} values for a 3x{size}x{size} input", data.len()),
            ));
        }
        Ok(InputEncoding { size, data })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn shape(&self) -> [usize; 3] {
        [Self::CHANNELS, self.size, self.size]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.size * self.size;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }
}

pub fn encode_input(map: &TerrainMap, goal: Cell, cell_size: usize) -> Result<InputEncoding> {
    encode_rasters(&map.gray, &map.edge, goal, cell_size)
}

pub fn encode_rasters(
    gray: &Raster,
    edge: &Raster,
    goal: Cell,
    cell_size: usize,
) -> Result<InputEncoding> {
    let m = gray.size();
    if edge.size() != m {
        return Err(Error::shape("encode_input", "gray and edge sizes differ"));
    }
    if cell_size == 0 || m % cell_size != 0 {
        return Err(Error::InvalidParams(format!(
            "image size {m} is not a multiple of cell size {cell_size}"
        )));
    }
    let n = m / cell_size;
    if goal.x < 0 || goal.y < 0 || goal.x as usize >= n || goal.y as usize >= n {
        return Err(Error::OutOfGrid {
            cell: goal,
            size: n,
        });
    }
    let mut data = Vec::with_capacity(3 * m * m);
    data.extend_from_slice(gray.data());
    data.extend_from_slice(edge.data());
    let mut target = vec![0.0f32; m * m];
    let (gx, gy) = (goal.x as usize * cell_size, goal.y as usize * cell_size);
    for y in gy..gy + cell_size {
        for x in gx..gx + cell_size {
            target[y * m + x] = 1.0;
        }
    }
    data.extend_from_slice(&target);
    Ok(InputEncoding { size: m, data })
}

/// `true` = traversable. A cell is blocked iff its risky-pixel fraction
/// exceeds `risk_fraction`.
pub fn compress_risky(
    risky: &[bool],
    image_size: usize,
    cell_size: usize,
    risk_fraction: f64,
) -> Result<Vec<bool>> {
    if risky.len() != image_size * image_size {
        return Err(Error::shape(
            "compress_risky",
            format!("mask has {} pixels, expected {}", risky.len(), image_size * image_size),
        ));
    }
    if cell_size == 0 || image_size % cell_size != 0 {
        return Err(Error::InvalidParams(format!(
            "image size {image_size} is not a multiple of cell size {cell_size}"
        )));
    }
    if !(0.0..=1.0).contains(&risk_fraction) {
        return Err(Error::InvalidParams("risk fraction must lie in [0, 1]".into()));
    }
    let n = image_size / cell_size;
    let mut counts = vec![0usize; n * n];
    for (i, &r) in risky.iter().enumerate() {
        if r {
            let (x, y) = (i % image_size, i / image_size);
            counts[(y / cell_size) * n + x / cell_size] += 1;
        }
    }
    let area = (cell_size * cell_size) as f64;
    Ok(counts
        .into_iter()
        .map(|c| c as f64 / area <= risk_fraction)
        .collect())
}
