//! Slides: synthetic generation, the on-disk container, tiling and bags.

mod bag;
mod manifest;
mod raster;
mod synth;
pub mod tiling;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;

pub use bag::{build_bag, stack_tiles, Bag, Tile, TilingConfig};
pub use manifest::{Manifest, ManifestRecord, Split, MANIFEST_HEADER};
pub use raster::{SlideRaster, SLIDE_MAGIC, SLIDE_VERSION};
pub use synth::{generate_synthetic_slide, tissue_pixel_count, SlideSpec};
pub use tiling::{grid_count, grid_stride, is_background, tile_grid, FloatRaster, Magnification};

use crate::error::{Error, Result};
use crate::seeding::{derive_seed, proportional_interleave, rng_for};

/// Parameters for a whole synthetic corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetSpec {
    pub slides: usize,
    pub prevalence: f64,
    pub seed: u64,
    pub side: usize,
    pub tile_size: usize,
    pub tissue_blob_count: usize,
    pub lesion_fraction: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            slides: 600,
            prevalence: 0.199,
            seed: 0,
            side: 256,
            tile_size: 32,
            tissue_blob_count: 3,
            lesion_fraction: 0.05,
        }
    }
}

/// Split sizes for `n` slides: 70% train, 15% val, remainder test.
pub fn split_sizes(n: usize) -> [usize; 3] {
    let train = (0.7 * n as f64).round() as usize;
    let val = (0.15 * n as f64).round() as usize;
    [train, val, n - train - val]
}

const SLIDE_ATTEMPTS: u64 = 16;
const LABEL_STREAM: u64 = 1;
const SPLIT_STREAM: u64 = 2;
const SLIDE_STREAM_BASE: u64 = 1 << 32;

/// Labels and split assignment without touching pixels. Exactly
/// `round(n * prevalence)` slides are positive; each split receives the
/// classes in proportion.
pub fn plan_dataset(spec: &DatasetSpec) -> Result<Vec<(String, u8, Split)>> {
    if spec.slides < 10 {
        return Err(Error::Argument(format!("need at least 10 slides, got {}", spec.slides)));
    }
    if !(0.0..=1.0).contains(&spec.prevalence) {
        return Err(Error::Argument(format!("prevalence {} outside [0, 1]", spec.prevalence)));
    }
    let n = spec.slides;
    let positives = (n as f64 * spec.prevalence).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(spec.seed, LABEL_STREAM));
    let mut labels = vec![0u8; n];
    for &i in &order[..positives] {
        labels[i] = 1;
    }

    let mut rng = rng_for(spec.seed, SPLIT_STREAM);
    let mut pos: Vec<usize> = (0..n).filter(|&i| labels[i] == 1).collect();
    let mut neg: Vec<usize> = (0..n).filter(|&i| labels[i] == 0).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let interleaved = proportional_interleave(pos, neg);
    let [train, val, _] = split_sizes(n);
    let mut splits = vec![Split::Test; n];
    for (k, &i) in interleaved.iter().enumerate() {
        splits[i] = if k < train {
            Split::Train
        } else if k < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok((0..n)
        .map(|i| (format!("slide_{i:04}"), labels[i], splits[i]))
        .collect())
}

/// Generates one slide, retrying with derived seeds when lesion placement
/// fails on an unlucky tissue layout.
pub fn generate_dataset_slide(spec: &DatasetSpec, index: usize, slide_id: &str, positive: bool) -> Result<SlideRaster> {
    let slide_spec = SlideSpec {
        side: spec.side,
        tile_size: spec.tile_size,
        tissue_blob_count: spec.tissue_blob_count,
        lesion_fraction: spec.lesion_fraction,
        positive,
    };
    let base = derive_seed(spec.seed, SLIDE_STREAM_BASE + index as u64);
    let mut last = None;
    for attempt in 0..SLIDE_ATTEMPTS {
        match generate_synthetic_slide(slide_id, derive_seed(base, attempt), &slide_spec) {
            Ok(s) => return Ok(s),
            Err(e @ Error::Generation(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Writes `slides/<id>.mils` and `manifest.csv` under `out`, returning the
/// manifest. Output bytes depend only on `spec`.
pub fn generate_dataset(out: &Path, spec: &DatasetSpec) -> Result<Manifest> {
    let plan = plan_dataset(spec)?;
    let slide_dir = out.join("slides");
    std::fs::create_dir_all(&slide_dir).map_err(|e| Error::io(&slide_dir, e))?;
    let records = plan
        .par_iter()
        .enumerate()
        .map(|(i, (id, label, split))| {
            let slide = generate_dataset_slide(spec, i, id, *label == 1)?;
            let rel = PathBuf::from("slides").join(format!("{id}.mils"));
            slide.save(&out.join(&rel))?;
            Ok(ManifestRecord { slide_id: id.clone(), path: rel, label: *label, split: *split })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest::new(records, out)?;
    manifest.save(&out.join("manifest.csv"))?;
    Ok(manifest)
}

/// Loads every slide of a split in manifest order.
pub fn load_split(manifest: &Manifest, split: Split) -> Result<Vec<SlideRaster>> {
    manifest
        .split(split)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|r| {
            let slide = SlideRaster::load(&manifest.resolve(r), r.slide_id.clone())?;
            if slide.label() != r.label {
                return Err(Error::Data(format!(
                    "slide {} labelled {} in manifest but {} in its file",
                    r.slide_id,
                    r.label,
                    slide.label()
                )));
            }
            Ok(slide)
        })
        .collect()
}
