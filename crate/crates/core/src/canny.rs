//! Canny edge detector on square rasters with values in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::terrain::Raster;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CannyParams {
    pub gaussian_sigma: f64,
    /// Fraction of the maximum gradient magnitude.
    pub low_threshold: f64,
    /// Fraction of the maximum gradient magnitude.
    pub high_threshold: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        CannyParams {
            gaussian_sigma: 1.4,
            low_threshold: 0.1,
            high_threshold: 0.3,
        }
    }
}

impl CannyParams {
    pub fn validate(&self) -> Result<()> {
        let ok_frac = |v: f64| v > 0.0 && v < 1.0;
        if !(self.gaussian_sigma > 0.0) {
            return Err(Error::InvalidParams("canny sigma must be positive".into()));
        }
        if !ok_frac(self.low_threshold) || !ok_frac(self.high_threshold) {
            return Err(Error::InvalidParams("canny thresholds must lie in (0, 1)".into()));
        }
        if self.low_threshold >= self.high_threshold {
            return Err(Error::InvalidParams(
                "canny low threshold must be below the high threshold".into(),
            ));
        }
        Ok(())
    }
}

/// Binary edge map (values 0.0 or 1.0).
///
/// Pipeline: min-subtraction, separable Gaussian blur, 3x3 Sobel gradients,
/// non-maximum suppression along the gradient direction quantized to 45°,
/// double threshold relative to the maximum magnitude, then 8-connected
/// hysteresis from strong to weak pixels. Borders replicate.
pub fn canny_edges(gray: &Raster, p: &CannyParams) -> Raster {
    let n = gray.size();
    if n == 0 {
        return Raster::zeros(0);
    }
    // Shift to a zero minimum so constant offsets cancel exactly for 8-bit data.
    let min = gray.data().iter().copied().fold(f32::INFINITY, f32::min);
    let img: Vec<f64> = gray.data().iter().map(|&v| (v - min) as f64).collect();

    let blurred = gaussian_blur(&img, n, p.gaussian_sigma);
    let (gx, gy) = sobel(&blurred, n);
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(x, y)| x.hypot(*y)).collect();
    let max_mag = mag.iter().copied().fold(0.0, f64::max);
    if max_mag <= 1e-12 {
        return Raster::zeros(n);
    }
    let thin = non_maximum_suppression(&mag, &gx, &gy, n);
    let edges = hysteresis(
        &thin,
        n,
        p.low_threshold * max_mag,
        p.high_threshold * max_mag,
    );
    Raster::from_vec(n, edges.into_iter().map(|e| if e { 1.0 } else { 0.0 }).collect())
        .expect("edge raster matches input size")
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

fn clamp_idx(i: i64, n: usize) -> usize {
    i.clamp(0, n as i64 - 1) as usize
}

fn gaussian_blur(img: &[f64], n: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let mut acc = 0.0;
            for (j, w) in k.iter().enumerate() {
                let xx = clamp_idx(x as i64 + j as i64 - r, n);
                acc += w * img[y * n + xx];
            }
            tmp[y * n + x] = acc;
        }
    }
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let mut acc = 0.0;
            for (j, w) in k.iter().enumerate() {
                let yy = clamp_idx(y as i64 + j as i64 - r, n);
                acc += w * tmp[yy * n + x];
            }
            out[y * n + x] = acc;
        }
    }
    out
}

fn sobel(img: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |x: i64, y: i64| img[clamp_idx(y, n) * n + clamp_idx(x, n)];
    let mut gx = vec![0.0; n * n];
    let mut gy = vec![0.0; n * n];
    for y in 0..n as i64 {
        for x in 0..n as i64 {
            let i = y as usize * n + x as usize;
            gx[i] = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            gy[i] = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
        }
    }
    (gx, gy)
}

fn non_maximum_suppression(mag: &[f64], gx: &[f64], gy: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    let get = |x: i64, y: i64| -> f64 {
        if x < 0 || y < 0 || x >= n as i64 || y >= n as i64 {
            0.0
        } else {
            mag[y as usize * n + x as usize]
        }
    };
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            let m = mag[i];
            if m == 0.0 {
                continue;
            }
            let mut angle = gy[i].atan2(gx[i]).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            // Neighbor step along the gradient direction (y grows downward).
            let (dx, dy) = if !(22.5..157.5).contains(&angle) {
                (1, 0)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (0, 1)
            } else {
                (-1, 1)
            };
            let (xi, yi) = (x as i64, y as i64);
            let behind = get(xi - dx, yi - dy);
            let ahead = get(xi + dx, yi + dy);
            // Strict on one side so plateaus of width two thin to one pixel.
            if m > behind && m >= ahead {
                out[i] = m;
            }
        }
    }
    out
}

fn hysteresis(thin: &[f64], n: usize, low: f64, high: f64) -> Vec<bool> {
    let mut edge = vec![false; n * n];
    let mut stack: Vec<usize> = Vec::new();
    for (i, &m) in thin.iter().enumerate() {
        if m >= high && m > 0.0 {
            edge[i] = true;
            stack.push(i);
        }
    }
    while let Some(i) = stack.pop() {
        let (x, y) = ((i % n) as i64, (i / n) as i64);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (xx, yy) = (x + dx, y + dy);
                if xx < 0 || yy < 0 || xx >= n as i64 || yy >= n as i64 {
                    continue;
                }
                let j = yy as usize * n + xx as usize;
                if !edge[j] && thin[j] >= low && thin[j] > 0.0 {
                    edge[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    edge
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn step_image(n: usize) -> Raster {
        let data = (0..n * n)
            .map(|i| if i % n >= n / 2 { 1.0 } else { 0.0 })
            .collect();
        Raster::from_vec(n, data).unwrap()
    }

    #[test]
    fn constant_image_has_no_edges() {
        let img = Raster::from_vec(16, vec![0.37; 256]).unwrap();
        let e = canny_edges(&img, &CannyParams::default());
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    // Reference: skimage.feature.canny (sigma=1.4, thresholds 0.1/0.3 of the
    // max Sobel magnitude, nearest borders) on the same 32x32 step image marks
    // columns {15, 16} on every interior row. Our tie rule keeps one of them.
    #[test]
    fn vertical_step_gives_single_line() {
        let n = 32;
        let e = canny_edges(&step_image(n), &CannyParams::default());
        for y in 0..n {
            let cols: Vec<usize> = (0..n).filter(|&x| e.get(x, y) == 1.0).collect();
            assert_eq!(cols.len(), 1, "row {y}: {cols:?}");
            assert!((15..=16).contains(&cols[0]), "row {y}: {cols:?}");
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = CannyParams::default();
        p.low_threshold = 0.5;
        assert!(p.validate().is_err());
        p.low_threshold = 0.0;
        assert!(p.validate().is_err());
        assert!(CannyParams::default().validate().is_ok());
    }

    proptest! {
        #[test]
        fn output_is_binary(levels in proptest::collection::vec(0u8..=255, 144)) {
            let img = Raster::from_vec(12, levels.iter().map(|&v| v as f32 / 255.0).collect()).unwrap();
            let e = canny_edges(&img, &CannyParams::default());
            prop_assert!(e.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }

        #[test]
        fn shift_invariant_on_8bit_images(
            levels in proptest::collection::vec(0u8..=127, 196),
            shift in 0u8..=128,
        ) {
            let base: Vec<f32> = levels.iter().map(|&v| v as f32 / 256.0).collect();
            let shifted: Vec<f32> = base.iter().map(|v| v + shift as f32 / 256.0).collect();
            let a = canny_edges(&Raster::from_vec(14, base).unwrap(), &CannyParams::default());
            let b = canny_edges(&Raster::from_vec(14, shifted).unwrap(), &CannyParams::default());
            prop_assert_eq!(a, b);
        }
    }
}
