use std::sync::Arc;

use super::raster::SlideRaster;
use super::tiling::{self, FloatRaster, Magnification};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// How a slide is cut into instances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TilingConfig {
    pub magnification: Magnification,
    pub tile_size: usize,
    /// `None` uses the magnification's default overlap.
    pub overlap: Option<f32>,
    pub brightness_threshold: f32,
    pub tissue_fraction_threshold: f32,
}

impl TilingConfig {
    pub fn new(magnification: Magnification, tile_size: usize) -> Self {
        Self {
            magnification,
            tile_size,
            overlap: None,
            brightness_threshold: tiling::DEFAULT_BRIGHTNESS_THRESHOLD,
            tissue_fraction_threshold: tiling::DEFAULT_TISSUE_FRACTION,
        }
    }

    pub fn overlap(&self) -> f32 {
        self.overlap
            .unwrap_or_else(|| self.magnification.default_overlap())
    }
}

/// One instance: a tile cut at some magnification.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub slide_id: Arc<str>,
    pub row: usize,
    pub col: usize,
    /// Origin in native (20x) pixels.
    pub x: usize,
    pub y: usize,
    pub magnification: Magnification,
    pub side: usize,
    /// Planar `[3][side][side]`, values in `[0, 1]`.
    pub pixels: Vec<f32>,
}

impl Tile {
    /// Edge length of the tile's footprint in native pixels.
    pub fn native_side(&self) -> usize {
        self.side * self.magnification.downsample_factor()
    }

    pub fn intersects_lesion(&self, slide: &SlideRaster) -> bool {
        slide.lesion_pixels_in(self.x, self.y, self.native_side()) > 0
    }
}

/// All retained tiles of one slide, in row-major grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub slide_id: Arc<str>,
    pub label: u8,
    pub tiles: Vec<Tile>,
    /// Grid size before background rejection.
    pub grid_tiles: usize,
}

impl Bag {
    pub fn m(&self) -> usize {
        self.tiles.len()
    }
}

/// Stacks tile pixel blocks into an `[n, 3, side, side]` batch.
pub fn stack_tiles<'a>(tiles: impl IntoIterator<Item = &'a Tile>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    let mut side = None;
    for t in tiles {
        if *side.get_or_insert(t.side) != t.side {
            return Err(Error::Usage("tiles of different sizes in one batch".into()));
        }
        data.extend_from_slice(&t.pixels);
        n += 1;
    }
    let side = side.ok_or_else(|| Error::Argument("empty tile batch".into()))?;
    Tensor::new(vec![n, 3, side, side], data)
}

/// Downsamples to the requested magnification, grids the result, drops
/// background tiles and returns the rest in grid order.
pub fn build_bag(slide: &SlideRaster, config: &TilingConfig) -> Result<Bag> {
    let factor = config.magnification.downsample_factor();
    let raster = FloatRaster::from_slide(slide).downsample(factor)?;
    let stride = tiling::grid_stride(config.tile_size, config.overlap())?;
    let origins = tiling::tile_grid(raster.width, raster.height, config.tile_size, config.overlap())?;
    let id: Arc<str> = Arc::from(slide.slide_id.as_str());
    let mut tiles = Vec::new();
    for &(x, y) in &origins {
        let pixels = raster.crop(x, y, config.tile_size);
        if tiling::is_background(&pixels, config.brightness_threshold, config.tissue_fraction_threshold) {
            continue;
        }
        tiles.push(Tile {
            slide_id: id.clone(),
            row: y / stride,
            col: x / stride,
            x: x * factor,
            y: y * factor,
            magnification: config.magnification,
            side: config.tile_size,
            pixels,
        });
    }
    if tiles.is_empty() {
        return Err(Error::EmptyBag(slide.slide_id.clone()));
    }
    Ok(Bag {
        slide_id: id,
        label: slide.label(),
        tiles,
        grid_tiles: origins.len(),
    })
}
