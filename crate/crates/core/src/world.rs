//! Synthetic segmentation worlds: a rectangular region partition of the
//! attention grid, the matching synthetic attention stack, a flat-colored
//! guide image and one ground-truth mask per region.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::jbu::GuideImage;
use crate::mask::BinaryMask;
use crate::tensor_io::{generate_synthetic_stack, AttentionStack, SyntheticSpec};

/// Well separated region colors.
const PALETTE: [[f32; 3]; 8] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.75, 0.15],
    [0.10, 0.20, 0.90],
    [0.95, 0.85, 0.10],
    [0.80, 0.15, 0.85],
    [0.10, 0.85, 0.90],
    [0.98, 0.98, 0.98],
    [0.05, 0.05, 0.05],
];

#[derive(Debug, Clone)]
pub struct WorldConfig {
    pub grid: usize,
    /// Image pixels per attention cell along each axis.
    pub pixels_per_cell: usize,
    pub min_regions: usize,
    pub max_regions: usize,
    pub in_region_mass: (f32, f32),
    pub noise_amplitude: f32,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            grid: 32,
            pixels_per_cell: 4,
            min_regions: 2,
            max_regions: 5,
            in_region_mass: (0.6, 0.9),
            noise_amplitude: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub spec: SyntheticSpec,
    pub stack: AttentionStack,
    pub guide: GuideImage,
    /// Ground truth per region label, at image resolution.
    pub regions: Vec<BinaryMask>,
}

impl SyntheticWorld {
    pub fn generate(seed: u64, config: &WorldConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = rng.gen_range(config.min_regions..=config.max_regions);
        let partition = random_rectangles(config.grid, config.grid, count, &mut rng);
        let (lo, hi) = config.in_region_mass;
        let spec = SyntheticSpec {
            h: config.grid,
            w: config.grid,
            partition,
            in_region_mass: if hi > lo { rng.gen_range(lo..=hi) } else { lo },
            noise_seed: rng.gen(),
            noise_amplitude: config.noise_amplitude,
        };
        Self::from_spec(spec, config.pixels_per_cell)
    }

    /// Builds the world for an explicit spec with a square upscale factor.
    pub fn from_spec(spec: SyntheticSpec, pixels_per_cell: usize) -> Result<Self> {
        let stack = generate_synthetic_stack(&spec)?;
        let (w, h) = (spec.w * pixels_per_cell, spec.h * pixels_per_cell);
        let label_at = |x: usize, y: usize| {
            spec.partition[(y / pixels_per_cell) * spec.w + x / pixels_per_cell]
        };
        let rgb = (0..w * h)
            .flat_map(|i| PALETTE[label_at(i % w, i / w) as usize % PALETTE.len()])
            .collect();
        let guide = GuideImage::new(w, h, rgb)?;
        let regions = (0..spec.region_count() as u32)
            .map(|r| BinaryMask::from_fn(w, h, |x, y| label_at(x, y) == r))
            .collect();
        Ok(Self {
            spec,
            stack,
            guide,
            regions,
        })
    }
}

/// Guillotine partition of an `h×w` grid into `count` rectangles, always
/// splitting the largest rectangle along its longer side.
pub fn random_rectangles(h: usize, w: usize, count: usize, rng: &mut impl Rng) -> Vec<u32> {
    // (x0, y0, x1, y1), half-open
    let mut rects = vec![(0usize, 0usize, w, h)];
    while rects.len() < count {
        let (idx, _) = rects
            .iter()
            .enumerate()
            .map(|(i, r)| (i, (r.2 - r.0) * (r.3 - r.1)))
            .max_by_key(|&(i, area)| (area, std::cmp::Reverse(i)))
            .expect("non-empty");
        let (x0, y0, x1, y1) = rects[idx];
        let (rw, rh) = (x1 - x0, y1 - y0);
        if rw < 2 && rh < 2 {
            break;
        }
        if rw >= rh {
            let cut = x0 + rng.gen_range((rw / 4).max(1)..=(rw - (rw / 4).max(1)));
            rects[idx] = (x0, y0, cut, y1);
            rects.push((cut, y0, x1, y1));
        } else {
            let cut = y0 + rng.gen_range((rh / 4).max(1)..=(rh - (rh / 4).max(1)));
            rects[idx] = (x0, y0, x1, cut);
            rects.push((x0, cut, x1, y1));
        }
    }
    let mut labels = vec![0u32; h * w];
    for (label, &(x0, y0, x1, y1)) in rects.iter().enumerate() {
        for y in y0..y1 {
            for x in x0..x1 {
                labels[y * w + x] = label as u32;
            }
        }
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partitions_cover_the_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for count in 1..=6 {
            let labels = random_rectangles(32, 32, count, &mut rng);
            for r in 0..count as u32 {
                assert!(labels.contains(&r), "region {r} of {count} missing");
            }
            assert!(labels.iter().all(|&l| (l as usize) < count));
        }
    }

    #[test]
    fn world_masks_partition_the_image() {
        let world = SyntheticWorld::generate(3, &WorldConfig::default()).unwrap();
        let total: usize = world.regions.iter().map(|m| m.count()).sum();
        assert_eq!(total, 128 * 128);
        assert_eq!(world.guide.width(), 128);
        assert_eq!(world.stack.h, 32);
    }
}
