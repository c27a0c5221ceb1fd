//! Native-resolution slide raster and its binary container.
//!
//! Container layout (integers little-endian):
//!
//! ```text
//! "MILS" | version u32 | width u32 | height u32 | label u8 | mask_present u8
//! RGB8 pixels, row-major | [mask bits, row-major, LSB first, zero padded]
//! ```

use std::path::Path;

use crate::error::{Error, Result};

pub const SLIDE_MAGIC: &[u8; 4] = b"MILS";
pub const SLIDE_VERSION: u32 = 1;

/// RGB8 slide at native (20x) resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlideRaster {
    pub slide_id: String,
    width: usize,
    height: usize,
    pixels: Vec<u8>,
    label: u8,
    lesion_mask: Option<Vec<bool>>,
}

impl SlideRaster {
    pub fn new(
        slide_id: impl Into<String>,
        width: usize,
        height: usize,
        pixels: Vec<u8>,
        label: u8,
        lesion_mask: Option<Vec<bool>>,
    ) -> Result<Self> {
        let slide_id = slide_id.into();
        if width == 0 || height == 0 {
            return Err(Error::Data(format!("slide {slide_id} has zero extent")));
        }
        if pixels.len() != 3 * width * height {
            return Err(Error::Data(format!(
                "slide {slide_id}: {} pixel bytes for {width}x{height}",
                pixels.len()
            )));
        }
        if label > 1 {
            return Err(Error::Data(format!("slide {slide_id}: label {label} is not binary")));
        }
        if let Some(mask) = &lesion_mask {
            if mask.len() != width * height {
                return Err(Error::Data(format!("slide {slide_id}: mask size mismatch")));
            }
            if label == 1 && !mask.iter().any(|&m| m) {
                return Err(Error::Data(format!(
                    "slide {slide_id}: positive slide with an empty lesion mask"
                )));
            }
        }
        Ok(Self {
            slide_id,
            width,
            height,
            pixels,
            label,
            lesion_mask,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn label(&self) -> u8 {
        self.label
    }

    pub fn lesion_mask(&self) -> Option<&[bool]> {
        self.lesion_mask.as_deref()
    }

    pub fn lesion_pixel_count(&self) -> usize {
        self.lesion_mask
            .as_ref()
            .map_or(0, |m| m.iter().filter(|&&v| v).count())
    }

    /// Lesion pixels inside the native-resolution square at `(x, y)`.
    pub fn lesion_pixels_in(&self, x: usize, y: usize, side: usize) -> usize {
        let Some(mask) = &self.lesion_mask else {
            return 0;
        };
        let (x1, y1) = ((x + side).min(self.width), (y + side).min(self.height));
        (y.min(y1)..y1)
            .map(|row| mask[row * self.width + x.min(x1)..row * self.width + x1].iter().filter(|&&v| v).count())
            .sum()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let w = u32::try_from(self.width).map_err(|_| Error::Data("slide too wide".into()))?;
        let h = u32::try_from(self.height).map_err(|_| Error::Data("slide too tall".into()))?;
        let mut out = Vec::with_capacity(18 + self.pixels.len() + self.width * self.height / 8 + 1);
        out.extend_from_slice(SLIDE_MAGIC);
        out.extend_from_slice(&SLIDE_VERSION.to_le_bytes());
        out.extend_from_slice(&w.to_le_bytes());
        out.extend_from_slice(&h.to_le_bytes());
        out.push(self.label);
        out.push(self.lesion_mask.is_some() as u8);
        out.extend_from_slice(&self.pixels);
        if let Some(mask) = &self.lesion_mask {
            let mut packed = vec![0u8; mask.len().div_ceil(8)];
            for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                packed[i / 8] |= 1 << (i % 8);
            }
            out.extend_from_slice(&packed);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], slide_id: impl Into<String>) -> Result<Self> {
        let bad = |m: &str| Error::Format {
            kind: "slide",
            message: m.to_string(),
        };
        if bytes.len() < 18 || &bytes[..4] != SLIDE_MAGIC {
            return Err(bad("bad magic or truncated header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        if u32_at(4) != SLIDE_VERSION {
            return Err(bad(&format!("unsupported version {}", u32_at(4))));
        }
        let (w, h) = (u32_at(8) as usize, u32_at(12) as usize);
        let (label, has_mask) = (bytes[16], bytes[17]);
        let npx = w
            .checked_mul(h)
            .and_then(|n| n.checked_mul(3))
            .ok_or_else(|| bad("dimensions overflow"))?;
        let mask_len = if has_mask == 1 { (w * h).div_ceil(8) } else { 0 };
        if has_mask > 1 || bytes.len() != 18 + npx + mask_len {
            return Err(bad("payload length does not match header"));
        }
        let pixels = bytes[18..18 + npx].to_vec();
        let mask = (has_mask == 1).then(|| {
            let packed = &bytes[18 + npx..];
            (0..w * h).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect()
        });
        Self::new(slide_id, w, h, pixels, label, mask)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, slide_id: impl Into<String>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, slide_id)
    }
}
