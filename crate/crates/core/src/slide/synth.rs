//! Synthetic slides with planted lesions.
//!
//! Background is near-white noise. Tissue is a union of wobbly ellipses
//! shaded pink with a low-frequency field and scattered dark nuclei. Every
//! slide carries one or two smooth purple "mimicker" discs. Positive slides
//! additionally carry one lesion disc textured with fine diagonal stripes.
//! The stripes only resolve at full resolution; after downsampling the
//! lesion differs from a mimicker by a somewhat darker mean colour alone.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::raster::SlideRaster;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlideSpec {
    pub side: usize,
    /// Native tile size; lesions are placed so every native grid tile they
    /// touch is at least half tissue.
    pub tile_size: usize,
    pub tissue_blob_count: usize,
    /// Upper bound on lesion pixels as a fraction of tissue pixels.
    pub lesion_fraction: f64,
    pub positive: bool,
}

impl SlideSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lesion_fraction > 0.0 && self.lesion_fraction <= 0.1) {
            return Err(Error::Argument(format!(
                "lesion fraction {} outside (0, 0.1]",
                self.lesion_fraction
            )));
        }
        if self.tile_size == 0 || self.side < 8 * self.tile_size {
            return Err(Error::Argument(format!(
                "slide side {} must be at least 8 x tile size {}",
                self.side, self.tile_size
            )));
        }
        Ok(())
    }
}

const BACKGROUND: [i32; 3] = [242, 242, 242];
const TISSUE: [i32; 3] = [226, 160, 196];
const NUCLEUS: [i32; 3] = [112, 62, 150];
const MIMICKER: [i32; 3] = [150, 88, 160];
const LESION_DARK: [i32; 3] = [56, 18, 104];
const LESION_LIGHT: [i32; 3] = [164, 92, 170];
const MAX_PLACEMENT_ATTEMPTS: usize = 400;

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    wobble: [(f64, f64, f64); 2],
}

impl Ellipse {
    fn random(rng: &mut ChaCha8Rng, side: f64) -> Self {
        let theta = rng.gen_range(0.0..PI);
        Self {
            cx: rng.gen_range(0.25..0.75) * side,
            cy: rng.gen_range(0.25..0.75) * side,
            a: rng.gen_range(0.25..0.38) * side,
            b: rng.gen_range(0.13..0.20) * side,
            cos: theta.cos(),
            sin: theta.sin(),
            wobble: [
                (3.0, rng.gen_range(0.04..0.09), rng.gen_range(0.0..2.0 * PI)),
                (5.0, rng.gen_range(0.02..0.05), rng.gen_range(0.0..2.0 * PI)),
            ],
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        let phi = v.atan2(u);
        let edge = 1.0 + self.wobble.iter().map(|&(k, amp, ph)| amp * (k * phi + ph).sin()).sum::<f64>();
        (u * u + v * v).sqrt() < edge
    }
}

/// Sum of three random plane waves, in `[-1, 1]`.
struct LowFrequency([(f64, f64, f64, f64); 3]);

impl LowFrequency {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut waves = [(0.0, 0.0, 0.0, 0.0); 3];
        for w in &mut waves {
            let theta: f64 = rng.gen_range(0.0..2.0 * PI);
            let wavelength: f64 = rng.gen_range(40.0..120.0);
            *w = (
                theta.cos() / wavelength,
                theta.sin() / wavelength,
                rng.gen_range(0.0..2.0 * PI),
                0.0,
            );
        }
        Self(waves)
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        self.0
            .iter()
            .map(|&(fx, fy, ph, _)| (2.0 * PI * (x * fx + y * fy) + ph).sin())
            .sum::<f64>()
            / 3.0
    }
}

/// Summed-area table over a boolean mask.
struct Integral {
    w: usize,
    sums: Vec<u32>,
}

impl Integral {
    fn new(mask: &[bool], w: usize, h: usize) -> Self {
        let mut sums = vec![0u32; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0u32;
            for x in 0..w {
                row += mask[y * w + x] as u32;
                sums[(y + 1) * (w + 1) + x + 1] = sums[y * (w + 1) + x + 1] + row;
            }
        }
        Self { w, sums }
    }

    fn count(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> u32 {
        let s = |x: usize, y: usize| self.sums[y * (self.w + 1) + x];
        s(x1, y1) + s(x0, y0) - s(x0, y1) - s(x1, y0)
    }
}

fn disc(cx: usize, cy: usize, r: f64, side: usize) -> impl Iterator<Item = (usize, usize)> {
    let ri = r.ceil() as usize;
    let (x0, x1) = (cx.saturating_sub(ri), (cx + ri + 1).min(side));
    let (y0, y1) = (cy.saturating_sub(ri), (cy + ri + 1).min(side));
    (y0..y1).flat_map(move |y| {
        (x0..x1).filter_map(move |x| {
            let (dx, dy) = (x as f64 - cx as f64, y as f64 - cy as f64);
            (dx * dx + dy * dy <= r * r).then_some((x, y))
        })
    })
}

fn jitter(rng: &mut ChaCha8Rng, base: [i32; 3], shift: [f64; 3], amp: i32) -> [u8; 3] {
    let mut px = [0u8; 3];
    for c in 0..3 {
        let v = base[c] as f64 + shift[c] + rng.gen_range(-amp..=amp) as f64;
        px[c] = v.round().clamp(0.0, 255.0) as u8;
    }
    px
}

/// Deterministic in `(seed, spec)`.
pub fn generate_synthetic_slide(slide_id: impl Into<String>, seed: u64, spec: &SlideSpec) -> Result<SlideRaster> {
    spec.validate()?;
    let slide_id = slide_id.into();
    let side = spec.side;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let blobs: Vec<Ellipse> = (0..spec.tissue_blob_count)
        .map(|_| Ellipse::random(&mut rng, side as f64))
        .collect();
    let tissue: Vec<bool> = (0..side * side)
        .map(|i| {
            let (x, y) = ((i % side) as f64 + 0.5, (i / side) as f64 + 0.5);
            blobs.iter().any(|e| e.contains(x, y))
        })
        .collect();
    let tissue_pixels: Vec<usize> = (0..side * side).filter(|&i| tissue[i]).collect();
    if tissue_pixels.is_empty() {
        return Err(Error::Generation(format!("slide {slide_id} has no tissue")));
    }
    let lesion_budget = (spec.lesion_fraction * tissue_pixels.len() as f64).floor() as usize;
    if spec.positive && lesion_budget == 0 {
        return Err(Error::Generation(format!(
            "slide {slide_id}: tissue too small for lesion fraction {}",
            spec.lesion_fraction
        )));
    }
    // Radius of a disc using the whole budget, whether or not one is planted,
    // so mimickers are sized like lesions on every slide.
    let full_radius = ((spec.lesion_fraction * tissue_pixels.len() as f64) / PI).sqrt().max(2.0);

    let shade = LowFrequency::random(&mut rng);
    let mut pixels = vec![0u8; 3 * side * side];
    for i in 0..side * side {
        let px = if tissue[i] {
            let f = shade.at((i % side) as f64, (i / side) as f64);
            if rng.gen_bool(0.03) {
                jitter(&mut rng, NUCLEUS, [0.0; 3], 10)
            } else {
                jitter(&mut rng, TISSUE, [14.0 * f, 22.0 * f, 12.0 * f], 8)
            }
        } else {
            jitter(&mut rng, BACKGROUND, [0.0; 3], 5)
        };
        pixels[3 * i..3 * i + 3].copy_from_slice(&px);
    }

    let mimickers = rng.gen_range(1..=2);
    for _ in 0..mimickers {
        let centre = tissue_pixels[rng.gen_range(0..tissue_pixels.len())];
        let r = full_radius * rng.gen_range(0.7..1.1);
        let points: Vec<(usize, usize)> = disc(centre % side, centre / side, r, side).collect();
        for (x, y) in points {
            let i = y * side + x;
            if tissue[i] {
                let px = jitter(&mut rng, MIMICKER, [0.0; 3], 8);
                pixels[3 * i..3 * i + 3].copy_from_slice(&px);
            }
        }
    }

    let mut mask = vec![false; side * side];
    if spec.positive {
        let integral = Integral::new(&tissue, side, side);
        let t = spec.tile_size;
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let centre = tissue_pixels[rng.gen_range(0..tissue_pixels.len())];
            let (cx, cy) = (centre % side, centre / side);
            let mut r = full_radius * rng.gen_range(0.6..1.0);
            let mut lesion: Vec<usize>;
            loop {
                lesion = disc(cx, cy, r, side)
                    .map(|(x, y)| y * side + x)
                    .filter(|&i| tissue[i])
                    .collect();
                if lesion.len() <= lesion_budget || r < 1.0 {
                    break;
                }
                r -= 0.5;
            }
            if lesion.is_empty() || lesion.len() > lesion_budget {
                continue;
            }
            let well_supported = lesion.iter().all(|&i| {
                let (gx, gy) = ((i % side) / t, (i / side) / t);
                if (gx + 1) * t > side || (gy + 1) * t > side {
                    return true;
                }
                2 * integral.count(gx * t, gy * t, (gx + 1) * t, (gy + 1) * t) as usize >= t * t
            });
            if !well_supported {
                continue;
            }
            for i in lesion {
                mask[i] = true;
                let (x, y) = (i % side, i / side);
                let base = if (x + y) / 2 % 2 == 0 { LESION_DARK } else { LESION_LIGHT };
                let px = jitter(&mut rng, base, [0.0; 3], 8);
                pixels[3 * i..3 * i + 3].copy_from_slice(&px);
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Generation(format!(
                "slide {slide_id}: no tissue region can host the lesion"
            )));
        }
    }

    SlideRaster::new(slide_id, side, side, pixels, spec.positive as u8, Some(mask))
}

/// Number of tissue pixels, identified by colour (min channel at or below
/// the default background threshold).
pub fn tissue_pixel_count(slide: &SlideRaster) -> usize {
    let limit = (super::tiling::DEFAULT_BRIGHTNESS_THRESHOLD * 255.0) as u8;
    slide
        .pixels()
        .chunks_exact(3)
        .filter(|p| p[0].min(p[1]).min(p[2]) <= limit)
        .count()
}
