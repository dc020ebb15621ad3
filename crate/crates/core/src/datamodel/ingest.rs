use std::path::Path;

use image::DynamicImage;

use super::image::Image;
use crate::error::{Error, Result};

/// Converts a decoded raster to `[0, 1]` floats, keeping 16-bit precision.
pub fn from_dynamic(img: &DynamicImage) -> Result<Image> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::Image("zero-area image".into()));
    }
    let (channels, data): (usize, Vec<f32>) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.as_raw().iter().map(|&v| v as f32 / 255.0).collect()),
        DynamicImage::ImageLumaA8(_) => {
            let b = img.to_luma8();
            (1, b.as_raw().iter().map(|&v| v as f32 / 255.0).collect())
        }
        DynamicImage::ImageLuma16(b) => {
            (1, b.as_raw().iter().map(|&v| v as f32 / 65535.0).collect())
        }
        DynamicImage::ImageLumaA16(_) => {
            let b = img.to_luma16();
            (1, b.as_raw().iter().map(|&v| v as f32 / 65535.0).collect())
        }
        DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) => {
            let b = img.to_rgb16();
            (3, b.as_raw().iter().map(|&v| v as f32 / 65535.0).collect())
        }
        _ => {
            let b = img.to_rgb8();
            (3, b.as_raw().iter().map(|&v| v as f32 / 255.0).collect())
        }
    };
    Image::new(h, w, channels, data)
}

/// Decodes an image file, resizes it bilinearly to `target` (H, W) and
/// converts it to `channels` planes (replicating grayscale, averaging colour).
pub fn ingest_image(path: &Path, target: (usize, usize), channels: usize) -> Result<Image> {
    let decoded = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    ingest_dynamic(&decoded, target, channels)
}

pub fn ingest_bytes(bytes: &[u8], target: (usize, usize), channels: usize) -> Result<Image> {
    let decoded =
        image::load_from_memory(bytes).map_err(|e| Error::Image(format!("undecodable upload: {e}")))?;
    ingest_dynamic(&decoded, target, channels)
}

fn ingest_dynamic(decoded: &DynamicImage, target: (usize, usize), channels: usize) -> Result<Image> {
    let raw = from_dynamic(decoded)?;
    let mut out = raw.resize_bilinear(target.0, target.1)?.with_channels(channels);
    out.clamp_unit();
    Ok(out)
}

/// Writes an 8-bit grayscale PNG of the channel mean.
pub fn save_png_gray(img: &Image, path: &Path) -> Result<()> {
    let buf: Vec<u8> = img
        .luminance()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let gray = image::GrayImage::from_raw(img.width() as u32, img.height() as u32, buf)
        .ok_or_else(|| Error::Image("buffer size mismatch".into()))?;
    gray.save(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// PNG bytes of the channel-mean plane.
pub fn encode_png_gray(img: &Image) -> Result<Vec<u8>> {
    let buf: Vec<u8> = img
        .luminance()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let gray = image::GrayImage::from_raw(img.width() as u32, img.height() as u32, buf)
        .ok_or_else(|| Error::Image("buffer size mismatch".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    gray.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(out.into_inner())
}


/// Decodes PNG/JPEG bytes at native resolution.
pub fn decode_bytes(bytes: &[u8]) -> Result<Image> {
    let decoded =
        image::load_from_memory(bytes).map_err(|e| Error::Image(format!("undecodable upload: {e}")))?;
    from_dynamic(&decoded)
}

/// `(height, width)` read from the file header.
pub fn image_dimensions(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    Ok((h as usize, w as usize))
}
