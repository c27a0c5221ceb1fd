//! Grid tiling, magnification by area-average downsampling, and background
//! rejection.

use std::fmt;
use std::str::FromStr;

use super::raster::SlideRaster;
use crate::error::{Error, Result};

/// Default min-channel brightness above which a pixel counts as background.
pub const DEFAULT_BRIGHTNESS_THRESHOLD: f32 = 0.86;
/// Default minimum tissue fraction; tiles with more than `1 - 0.25` of
/// background pixels are dropped.
pub const DEFAULT_TISSUE_FRACTION: f32 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Magnification {
    X5,
    X10,
    X20,
}

impl Magnification {
    pub const ALL: [Magnification; 3] = [Magnification::X5, Magnification::X10, Magnification::X20];

    /// Native (20x) pixels per pixel at this magnification, per axis.
    pub fn downsample_factor(self) -> usize {
        match self {
            Magnification::X20 => 1,
            Magnification::X10 => 2,
            Magnification::X5 => 4,
        }
    }

    /// Overlap between neighbouring tiles: 50% at 5x, none otherwise.
    pub fn default_overlap(self) -> f32 {
        match self {
            Magnification::X5 => 0.5,
            _ => 0.0,
        }
    }
}

impl fmt::Display for Magnification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Magnification::X5 => "5x",
            Magnification::X10 => "10x",
            Magnification::X20 => "20x",
        })
    }
}

impl FromStr for Magnification {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "5x" | "5" => Ok(Magnification::X5),
            "10x" | "10" => Ok(Magnification::X10),
            "20x" | "20" => Ok(Magnification::X20),
            other => Err(Error::Argument(format!(
                "unknown magnification {other:?} (expected 5x, 10x or 20x)"
            ))),
        }
    }
}

/// Planar `[3][height][width]` float image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatRaster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl FloatRaster {
    pub fn from_slide(slide: &SlideRaster) -> Self {
        let (w, h) = (slide.width(), slide.height());
        let mut data = vec![0.0f32; 3 * w * h];
        for (i, px) in slide.pixels().chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * w * h + i] = px[c] as f32 / 255.0;
            }
        }
        Self {
            width: w,
            height: h,
            data,
        }
    }

    /// Averages non-overlapping `factor x factor` blocks; partial blocks at
    /// the right and bottom edges are dropped.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Argument("downsample factor must be positive".into()));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (w, h) = (self.width / factor, self.height / factor);
        if w == 0 || h == 0 {
            return Err(Error::Argument(format!(
                "{}x{} raster is smaller than downsample factor {factor}",
                self.width, self.height
            )));
        }
        let inv = 1.0 / (factor * factor) as f64;
        let mut data = Vec::with_capacity(3 * w * h);
        for c in 0..3 {
            let plane = &self.data[c * self.width * self.height..(c + 1) * self.width * self.height];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0f64;
                    for dy in 0..factor {
                        let row = (y * factor + dy) * self.width + x * factor;
                        acc += plane[row..row + factor].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    data.push((acc * inv) as f32);
                }
            }
        }
        Ok(Self {
            width: w,
            height: h,
            data,
        })
    }

    /// Copies the `side x side` block at `(x, y)` into planar layout.
    pub fn crop(&self, x: usize, y: usize, side: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(3 * side * side);
        for c in 0..3 {
            let base = c * self.width * self.height;
            for row in y..y + side {
                let start = base + row * self.width + x;
                out.extend_from_slice(&self.data[start..start + side]);
            }
        }
        out
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// `round(tile_size * (1 - overlap))`, rounding halves up.
pub fn grid_stride(tile_size: usize, overlap_fraction: f32) -> Result<usize> {
    if !(0.0..1.0).contains(&overlap_fraction) {
        return Err(Error::Argument(format!(
            "overlap fraction {overlap_fraction} outside [0, 1)"
        )));
    }
    let stride = (tile_size as f64 * (1.0 - overlap_fraction as f64) + 0.5).floor() as usize;
    Ok(stride.max(1))
}

/// Tiles per axis: `floor((axis - tile) / stride) + 1`.
pub fn grid_count(axis: usize, tile_size: usize, stride: usize) -> usize {
    if axis < tile_size || stride == 0 {
        0
    } else {
        (axis - tile_size) / stride + 1
    }
}

/// Origins of every tile that fits entirely inside the raster, anchored at
/// `(0, 0)`, in row-major order.
pub fn tile_grid(width: usize, height: usize, tile_size: usize, overlap_fraction: f32) -> Result<Vec<(usize, usize)>> {
    if tile_size == 0 || tile_size > width.min(height) {
        return Err(Error::Argument(format!(
            "tile size {tile_size} does not fit a {width}x{height} raster"
        )));
    }
    let stride = grid_stride(tile_size, overlap_fraction)?;
    let (nx, ny) = (grid_count(width, tile_size, stride), grid_count(height, tile_size, stride));
    Ok((0..ny)
        .flat_map(|r| (0..nx).map(move |c| (c * stride, r * stride)))
        .collect())
}

/// `tile` is planar `[3][area]` in `[0, 1]`. A pixel is background when its
/// smallest channel exceeds `brightness_threshold`; the tile is background
/// when the background share exceeds `1 - tissue_fraction_threshold`.
pub fn is_background(tile: &[f32], brightness_threshold: f32, tissue_fraction_threshold: f32) -> bool {
    let area = tile.len() / 3;
    if area == 0 {
        return true;
    }
    let (r, rest) = tile.split_at(area);
    let (g, b) = rest.split_at(area);
    let bright = r
        .iter()
        .zip(g)
        .zip(b)
        .filter(|((&r, &g), &b)| r.min(g).min(b) > brightness_threshold)
        .count();
    bright as f64 / area as f64 > 1.0 - tissue_fraction_threshold as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gigapixel_style_counts() {
        assert_eq!(tile_grid(2048, 2048, 256, 0.0).unwrap().len(), 64);
        let half = tile_grid(2048, 2048, 256, 0.5).unwrap();
        assert_eq!(half.len(), 225);
        assert_eq!(half[1], (128, 0));
    }

    #[test]
    fn tile_equal_to_width_is_one_column() {
        let g = tile_grid(32, 100, 32, 0.0).unwrap();
        assert!(g.iter().all(|&(x, _)| x == 0));
        assert_eq!(g.len(), 3);
    }

    #[test]
    fn invalid_arguments() {
        assert!(tile_grid(10, 10, 11, 0.0).is_err());
        assert!(tile_grid(10, 10, 5, 1.0).is_err());
        assert!(tile_grid(10, 10, 5, -0.1).is_err());
    }

    #[test]
    fn stride_rounds_half_up() {
        assert_eq!(grid_stride(3, 0.5).unwrap(), 2);
        assert_eq!(grid_stride(5, 0.5).unwrap(), 3);
        assert_eq!(grid_stride(256, 0.5).unwrap(), 128);
    }

    #[test]
    fn background_rule() {
        let white = vec![1.0f32; 3 * 16];
        assert!(is_background(&white, DEFAULT_BRIGHTNESS_THRESHOLD, DEFAULT_TISSUE_FRACTION));
        let gray = vec![0.5f32; 3 * 16];
        assert!(!is_background(&gray, 0.86, DEFAULT_TISSUE_FRACTION));
        // 12 of 16 bright pixels is exactly 75%: kept.
        let mut mixed = vec![1.0f32; 3 * 16];
        for i in 0..4 {
            mixed[i] = 0.2;
        }
        assert!(!is_background(&mixed, 0.86, 0.25));
        mixed[4] = 1.0;
        mixed[3] = 1.0;
        assert!(is_background(&mixed, 0.86, 0.25));
    }

    #[test]
    fn magnification_parsing() {
        assert_eq!("10x".parse::<Magnification>().unwrap(), Magnification::X10);
        assert_eq!(Magnification::X5.to_string(), "5x");
        assert!("40x".parse::<Magnification>().is_err());
    }

    proptest! {
        #[test]
        fn grid_matches_brute_enumeration(w in 1usize..300, h in 1usize..300, tile in 1usize..64, overlap in 0.0f32..0.95) {
            prop_assume!(tile <= w.min(h));
            let got = tile_grid(w, h, tile, overlap).unwrap();
            let stride = grid_stride(tile, overlap).unwrap();
            let mut brute = Vec::new();
            let mut y = 0;
            while y + tile <= h {
                let mut x = 0;
                while x + tile <= w {
                    brute.push((x, y));
                    x += stride;
                }
                y += stride;
            }
            prop_assert_eq!(got, brute);
        }

        #[test]
        fn downsample_preserves_mean(w in 1usize..12, h in 1usize..12, f in 1usize..5, seed in any::<u64>()) {
            let (w, h) = (w * f, h * f);
            let mut s = seed;
            let data: Vec<f32> = (0..3 * w * h).map(|_| { s = s.wrapping_mul(6364136223846793005).wrapping_add(1); (s >> 40) as f32 / (1u64 << 24) as f32 }).collect();
            let r = FloatRaster { width: w, height: h, data };
            let d = r.downsample(f).unwrap();
            prop_assert!((d.mean() - r.mean()).abs() <= 1e-6);
        }
    }
}
