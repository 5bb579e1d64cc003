//! Decoded raster images and the loaders that produce them.

use std::path::Path;

use image::DynamicImage;

use crate::error::{Error, Result};
use crate::manifest::SampleRecord;

/// Interleaved integer raster. Sample values lie in `0..=max_value`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: u32,
    pub height: u32,
    pub bands: u16,
    pub max_value: u16,
    /// Pixel-major, band-minor: `data[(y * width + x) * bands + b]`.
    pub data: Vec<u16>,
}

impl Raster {
    pub fn new(width: u32, height: u32, bands: u16, max_value: u16, data: Vec<u16>) -> Result<Self> {
        let expected = width as usize * height as usize * bands as usize;
        if data.len() != expected {
            return Err(Error::Validation(format!(
                "raster {width}x{height}x{bands} needs {expected} samples, got {}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > max_value) {
            return Err(Error::Validation(format!(
                "sample value {v} exceeds max_value {max_value}"
            )));
        }
        Ok(Self {
            width,
            height,
            bands,
            max_value,
            data,
        })
    }

    /// 8-bit raster.
    pub fn from_u8(width: u32, height: u32, bands: u16, data: &[u8]) -> Result<Self> {
        Self::new(width, height, bands, 255, data.iter().map(|&v| v as u16).collect())
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn pixels(&self) -> impl Iterator<Item = &[u16]> {
        self.data.chunks_exact(self.bands.max(1) as usize)
    }
}

impl TryFrom<DynamicImage> for Raster {
    type Error = Error;

    fn try_from(img: DynamicImage) -> Result<Self> {
        let (w, h) = (img.width(), img.height());
        let (bands, max, data): (u16, u16, Vec<u16>) = match img {
            DynamicImage::ImageLuma8(b) => (1, 255, widen(b.into_raw())),
            DynamicImage::ImageLumaA8(b) => (2, 255, widen(b.into_raw())),
            DynamicImage::ImageRgb8(b) => (3, 255, widen(b.into_raw())),
            DynamicImage::ImageRgba8(b) => (4, 255, widen(b.into_raw())),
            DynamicImage::ImageLuma16(b) => (1, u16::MAX, b.into_raw()),
            DynamicImage::ImageLumaA16(b) => (2, u16::MAX, b.into_raw()),
            DynamicImage::ImageRgb16(b) => (3, u16::MAX, b.into_raw()),
            DynamicImage::ImageRgba16(b) => (4, u16::MAX, b.into_raw()),
            other if other.color().has_alpha() => (4, u16::MAX, other.into_rgba16().into_raw()),
            other => (3, u16::MAX, other.into_rgb16().into_raw()),
        };
        Raster::new(w, h, bands, max, data)
    }
}

fn widen(v: Vec<u8>) -> Vec<u16> {
    v.into_iter().map(u16::from).collect()
}

/// Source of decoded rasters for manifest records.
pub trait RasterSource: Sync {
    fn load(&self, record: &SampleRecord) -> Result<Raster>;
}

/// Decodes the record's `uri` as a local image file (PNG, TIFF, JPEG).
#[derive(Debug, Default, Clone, Copy)]
pub struct FileRasterSource;

impl RasterSource for FileRasterSource {
    fn load(&self, record: &SampleRecord) -> Result<Raster> {
        let path = Path::new(&record.uri);
        let img = image::ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .with_guessed_format()
            .map_err(|e| Error::io(path, e))?
            .decode()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Raster::try_from(img)
    }
}

impl<F> RasterSource for F
where
    F: Fn(&SampleRecord) -> Result<Raster> + Sync,
{
    fn load(&self, record: &SampleRecord) -> Result<Raster> {
        self(record)
    }
}
