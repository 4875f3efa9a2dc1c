//! Joint bilateral upsampling with dense low-resolution sampling and an
//! isotropic Gaussian range kernel over RGB.

use image::RgbImage;
use rayon::prelude::*;

use crate::error::{Error, Result};

pub const DEFAULT_SIGMA_SPATIAL: f64 = 1.0;
pub const DEFAULT_SIGMA_RANGE: f64 = 0.1;

/// Window radius in low-resolution cells.
pub const WINDOW_RADIUS: isize = 2;

/// RGB guide with channel values in `[0, 1]`, stored row-major `[r, g, b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GuideImage {
    width: usize,
    height: usize,
    rgb: Vec<f32>,
}

impl GuideImage {
    pub fn new(width: usize, height: usize, rgb: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || rgb.len() != width * height * 3 {
            return Err(Error::validation(format!(
                "guide buffer of {} values does not match {width}x{height}x3",
                rgb.len()
            )));
        }
        if let Some(v) = rgb.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::validation(format!(
                "guide channel value {v} outside [0, 1]"
            )));
        }
        Ok(Self { width, height, rgb })
    }

    pub fn from_rgb_image(img: &RgbImage) -> Self {
        let rgb = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            rgb,
        }
    }

    pub fn to_rgb_image(&self) -> RgbImage {
        let raw = self
            .rgb
            .iter()
            .map(|&v| (v * 255.0).round() as u8)
            .collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size matches")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = 3 * (y * self.width + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    /// Bilinear sample at continuous pixel coordinates, clamped to the image.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> [f32; 3] {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let corners = [
            (self.pixel(x0, y0), (1.0 - fx) * (1.0 - fy)),
            (self.pixel(x1, y0), fx * (1.0 - fy)),
            (self.pixel(x0, y1), (1.0 - fx) * fy),
            (self.pixel(x1, y1), fx * fy),
        ];
        let mut out = [0.0f32; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = corners.iter().map(|(c, w)| c[i] as f64 * w).sum::<f64>() as f32;
        }
        out
    }

    /// Horizontally mirrored copy.
    pub fn flipped_horizontally(&self) -> Self {
        let mut rgb = Vec::with_capacity(self.rgb.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                rgb.extend_from_slice(&self.pixel(x, y));
            }
        }
        Self {
            width: self.width,
            height: self.height,
            rgb,
        }
    }
}

/// Maps a high-resolution pixel index to continuous low-resolution
/// coordinates with pixel centers aligned.
pub fn to_low_res(q: usize, high: usize, low: usize) -> f64 {
    (q as f64 + 0.5) * low as f64 / high as f64 - 0.5
}

/// Continuous high-resolution pixel coordinate of the center of
/// low-resolution cell `p` (inverse of [`to_low_res`]).
pub fn cell_center(p: usize, low: usize, high: usize) -> f64 {
    (p as f64 + 0.5) * high as f64 / low as f64 - 0.5
}

/// Cells within `WINDOW_RADIUS + 0.5` of `center`, clipped to `0..len`.
/// Away from exact half-cell ties this is the `2r+1` cells around the
/// nearest one; the symmetric form keeps mirrored inputs mirrored.
pub fn window_bounds(center: f64, len: usize) -> (usize, usize) {
    let reach = WINDOW_RADIUS as f64 + 0.5;
    let lo = ((center - reach).ceil().max(0.0) as usize).min(len - 1);
    let hi = ((center + reach).floor().max(0.0) as usize).min(len - 1);
    (lo, hi)
}

/// Upsamples the `low_w×low_h` map `low` to the guide resolution.
///
/// Each output pixel is the normalized sum over a `5×5` low-resolution
/// window (clipped at the grid border) of `low[p]·g_s·g_r`, with
/// `g_s = exp(-‖p − q↓‖² / 2σ_s²)` in low-res units and
/// `g_r = exp(-‖rgb(q) − rgb(center of p)‖² / 2σ_r²)`, the guide being
/// sampled bilinearly at each cell center.
pub fn jbu_upsample(
    low: &[f32],
    low_w: usize,
    low_h: usize,
    guide: &GuideImage,
    sigma_spatial: f64,
    sigma_range: f64,
) -> Result<Vec<f32>> {
    if !(sigma_spatial > 0.0 && sigma_range > 0.0) {
        return Err(Error::validation("JBU sigmas must be positive"));
    }
    if low.len() != low_w * low_h || low_w == 0 || low_h == 0 {
        return Err(Error::validation(format!(
            "low-res map has {} values, expected {low_w}x{low_h}",
            low.len()
        )));
    }
    let (width, height) = (guide.width(), guide.height());
    if low_w > width || low_h > height {
        return Err(Error::validation(format!(
            "low-res map {low_w}x{low_h} larger than guide {width}x{height}"
        )));
    }

    let low_colors: Vec<[f32; 3]> = (0..low_h)
        .flat_map(|py| {
            (0..low_w).map(move |px| {
                guide.sample_bilinear(
                    cell_center(px, low_w, width),
                    cell_center(py, low_h, height),
                )
            })
        })
        .collect();
    let spatial_scale = -0.5 / (sigma_spatial * sigma_spatial);
    let range_scale = -0.5 / (sigma_range * sigma_range);

    let mut out = vec![0.0f32; width * height];
    out.par_chunks_mut(width).enumerate().for_each(|(qy, row)| {
        let fy = to_low_res(qy, height, low_h);
        let (y0, y1) = window_bounds(fy, low_h);
        for (qx, o) in row.iter_mut().enumerate() {
            let fx = to_low_res(qx, width, low_w);
            let (x0, x1) = window_bounds(fx, low_w);
            let color = guide.pixel(qx, qy);
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            for py in y0..=y1 {
                let dy = py as f64 - fy;
                for px in x0..=x1 {
                    let dx = px as f64 - fx;
                    let c = &low_colors[py * low_w + px];
                    let dc: f64 = (0..3)
                        .map(|i| {
                            let d = color[i] as f64 - c[i] as f64;
                            d * d
                        })
                        .sum();
                    let weight = ((dx * dx + dy * dy) * spatial_scale + dc * range_scale).exp();
                    num += weight * low[py * low_w + px] as f64;
                    den += weight;
                }
            }
            *o = if den > 0.0 {
                (num / den) as f32
            } else {
                let py = (fy.round().max(0.0) as usize).min(low_h - 1);
                let px = (fx.round().max(0.0) as usize).min(low_w - 1);
                low[py * low_w + px]
            };
        }
    });
    Ok(out)
}
