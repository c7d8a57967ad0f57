//! Binary PGM (P5) masks and probability maps.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder, ImageFormat, Luma};

use crate::error::{Error, Result};
use crate::metrics::PredictionMap;
use crate::polygon::BinaryMask;
use crate::tensor::bilinear_taps;

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn read_gray(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Pnm)
        .map_err(|e| image_err(path, e))?;
    Ok(img.into_luma8())
}

/// Pixels `>= 128` are foreground.
pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let img = read_gray(path.as_ref())?;
    let (w, h) = img.dimensions();
    BinaryMask::new(h as usize, w as usize, img.pixels().map(|p| p.0[0] >= 128).collect())
}

/// Pixel value / 255.
pub fn read_prediction(path: impl AsRef<Path>) -> Result<PredictionMap> {
    let img = read_gray(path.as_ref())?;
    let (w, h) = img.dimensions();
    PredictionMap::new(
        h as usize,
        w as usize,
        img.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
    )
}

pub fn write_mask(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    let img = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    });
    write_gray(path, &img)
}

/// Writes `round(255 · v)`.
pub fn write_prediction(path: impl AsRef<Path>, map: &PredictionMap) -> Result<()> {
    let img = GrayImage::from_fn(map.width() as u32, map.height() as u32, |x, y| {
        Luma([(map.at(y as usize, x as usize) * 255.0).round() as u8])
    });
    write_gray(path, &img)
}

fn write_gray(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    PnmEncoder::new(&mut bytes)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::L8)
        .map_err(|e| image_err(path, e))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Bilinear resize with half-pixel centres, the same convention as the tensor upsampler.
pub fn resize_bilinear(map: &PredictionMap, height: usize, width: usize) -> PredictionMap {
    let ty = bilinear_taps(map.height(), height);
    let tx = bilinear_taps(map.width(), width);
    let mut data = Vec::with_capacity(height * width);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            let top = (1.0 - fx) * map.at(y0, x0) + fx * map.at(y0, x1);
            let bot = (1.0 - fx) * map.at(y1, x0) + fx * map.at(y1, x1);
            data.push((1.0 - fy) * top + fy * bot);
        }
    }
    PredictionMap::new(height, width, data).expect("resize dims")
}
