//! Binary masks with IoU, run-length encoding and PNG conversion.

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

/// Row-major run lengths, alternating background and foreground and always
/// starting with a (possibly empty) background run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunLengthMask {
    pub width: usize,
    pub height: usize,
    pub counts: Vec<u32>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::validation(format!(
                "mask buffer of {} values does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let data = (0..width * height)
            .map(|i| f(i % width, i / width))
            .collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Intersection over union; two empty masks have IoU 1.
    pub fn iou(&self, other: &Self) -> f64 {
        debug_assert!(self.same_shape(other));
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn to_rle(&self) -> RunLengthMask {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &v in &self.data {
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
        counts.push(run);
        RunLengthMask {
            width: self.width,
            height: self.height,
            counts,
        }
    }

    pub fn from_rle(rle: &RunLengthMask) -> Result<Self> {
        let total: u64 = rle.counts.iter().map(|&c| c as u64).sum();
        if total != (rle.width * rle.height) as u64 {
            return Err(Error::validation(format!(
                "run lengths cover {total} pixels, expected {}",
                rle.width * rle.height
            )));
        }
        let mut data = Vec::with_capacity(rle.width * rle.height);
        for (i, &c) in rle.counts.iter().enumerate() {
            data.extend(std::iter::repeat_n(i % 2 == 1, c as usize));
        }
        Ok(Self {
            width: rle.width,
            height: rle.height,
            data,
        })
    }

    /// 0/255 grayscale image.
    pub fn to_image(&self) -> GrayImage {
        let raw = self.data.iter().map(|&v| if v { 255 } else { 0 }).collect();
        GrayImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer size matches")
    }

    /// Pixels with value above 127 are foreground.
    pub fn from_image(img: &GrayImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|&v| v > 127).collect(),
        }
    }
}
