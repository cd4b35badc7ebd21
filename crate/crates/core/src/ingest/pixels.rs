//! Raw detector values to 8-bit intensities, plus PNG and sidecar I/O.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::IngestError;
use crate::geometry::ImageDims;
use crate::jsonl::DataError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Photometric {
    /// Low values render bright.
    #[serde(rename = "MONOCHROME1")]
    Monochrome1,
    #[serde(rename = "MONOCHROME2")]
    Monochrome2,
}

impl Photometric {
    pub fn as_str(self) -> &'static str {
        match self {
            Photometric::Monochrome1 => "MONOCHROME1",
            Photometric::Monochrome2 => "MONOCHROME2",
        }
    }
}

impl FromStr for Photometric {
    type Err = IngestError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "MONOCHROME1" => Ok(Photometric::Monochrome1),
            "MONOCHROME2" => Ok(Photometric::Monochrome2),
            other => Err(IngestError::Unsupported(format!("photometric interpretation {other:?}"))),
        }
    }
}

/// Single-channel image with 8..=16 significant bits per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pixels: Vec<u16>,
    dims: ImageDims,
    bits_stored: u8,
    photometric: Photometric,
    window_center: Option<f64>,
    window_width: Option<f64>,
}

impl RawImage {
    pub fn new(
        pixels: Vec<u16>,
        dims: ImageDims,
        bits_stored: u8,
        photometric: Photometric,
        window_center: Option<f64>,
        window_width: Option<f64>,
    ) -> Result<Self, IngestError> {
        if !(8..=16).contains(&bits_stored) {
            return Err(IngestError::Unsupported(format!("{bits_stored}-bit pixels")));
        }
        let expected = dims.width as usize * dims.height as usize;
        if pixels.len() != expected {
            return Err(IngestError::Corrupt(format!(
                "{} pixels for a {}x{} image",
                pixels.len(),
                dims.width,
                dims.height
            )));
        }
        Ok(Self { pixels, dims, bits_stored, photometric, window_center, window_width })
    }

    pub fn pixels(&self) -> &[u16] {
        &self.pixels
    }
    pub fn dims(&self) -> ImageDims {
        self.dims
    }
    pub fn bits_stored(&self) -> u8 {
        self.bits_stored
    }
    pub fn photometric(&self) -> Photometric {
        self.photometric
    }
    pub fn window_center(&self) -> Option<f64> {
        self.window_center
    }
    pub fn window_width(&self) -> Option<f64> {
        self.window_width
    }

    /// Center and width when both are present and usable.
    pub fn window(&self) -> Option<(f64, f64)> {
        match (self.window_center, self.window_width) {
            (Some(c), Some(w)) if c.is_finite() && w.is_finite() && w > 0.0 => Some((c, w)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray8 {
    pub dims: ImageDims,
    pub data: Vec<u8>,
}

/// Map raw values to `[0, 255]`.
///
/// With a window, `n = (p - center) / width`; without one,
/// `n = (p - mean) / (max - min)`. The result is
/// `trunc(clip(n, -1, 1) * flip * 127.5 + 127.5)` where `flip` is -1 for
/// MONOCHROME1. Note the division by the full width, not half of it. A flat
/// image without a window maps to 127 everywhere.
pub fn normalize_pixels(image: &RawImage) -> Gray8 {
    let flip = match image.photometric {
        Photometric::Monochrome1 => -1.0,
        Photometric::Monochrome2 => 1.0,
    };
    let (offset, scale) = match image.window() {
        Some((c, w)) => (c, w),
        None => {
            let n = image.pixels.len() as f64;
            let sum: f64 = image.pixels.iter().map(|&p| f64::from(p)).sum();
            let min = image.pixels.iter().copied().min().unwrap_or(0);
            let max = image.pixels.iter().copied().max().unwrap_or(0);
            (sum / n, f64::from(max) - f64::from(min))
        }
    };
    let data = if scale == 0.0 {
        vec![127; image.pixels.len()]
    } else {
        image
            .pixels
            .iter()
            .map(|&p| {
                let n = (f64::from(p) - offset) / scale;
                (n.clamp(-1.0, 1.0) * flip * 127.5 + 127.5) as u8
            })
            .collect()
    };
    Gray8 { dims: image.dims, data }
}

pub fn encode_png(image: &Gray8) -> Result<Vec<u8>, IngestError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.dims.width, image.dims.height);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| IngestError::Png(e.to_string()))?;
        writer.write_image_data(&image.data).map_err(|e| IngestError::Png(e.to_string()))?;
    }
    Ok(out)
}

/// JSON metadata describing a pre-decoded little-endian 16-bit pixel file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub study_id: String,
    /// Relative paths resolve against the sidecar's directory.
    pub pixels_path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub photometric: Photometric,
    #[serde(default)]
    pub window_center: Option<f64>,
    #[serde(default)]
    pub window_width: Option<f64>,
}

pub fn load_sidecar(path: impl AsRef<Path>) -> Result<(String, RawImage), IngestError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let meta: Sidecar = serde_json::from_str(&text)
        .map_err(|source| DataError::Json { path: path.to_path_buf(), line: 1, source })?;
    let pixels_path = match path.parent() {
        Some(dir) if meta.pixels_path.is_relative() => dir.join(&meta.pixels_path),
        _ => meta.pixels_path.clone(),
    };
    let bytes = fs::read(&pixels_path).map_err(|e| DataError::io(&pixels_path, e))?;
    if bytes.len() % 2 != 0 {
        return Err(IngestError::Corrupt(format!("{}: odd byte count", pixels_path.display())));
    }
    let pixels: Vec<u16> = bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    let dims = ImageDims::new(meta.width, meta.height).map_err(|e| IngestError::Corrupt(e.to_string()))?;
    let image = RawImage::new(pixels, dims, 16, meta.photometric, meta.window_center, meta.window_width)?;
    Ok((meta.study_id, image))
}
