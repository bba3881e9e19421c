//! 8- and 16-bit gray or RGB rasters (PNM family and PNG) and color-mapped previews.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, ImageReader, Luma, Rgb};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn image_err(path: &Path, msg: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

fn scaled<S: Copy + Into<f64>>(raw: &[S], max: f64) -> Vec<f64> {
    raw.iter().map(|&v| v.into() / max).collect()
}

/// Decodes an image into `[H, W, C]` intensities in `[0, 1]`.
pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Tensor<f64>> {
    let img = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| image_err(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (c, data) = match &img {
        DynamicImage::ImageLuma8(b) => (1, scaled(b.as_raw(), 255.0)),
        DynamicImage::ImageRgb8(b) => (3, scaled(b.as_raw(), 255.0)),
        DynamicImage::ImageLuma16(b) => (1, scaled(b.as_raw(), 65535.0)),
        DynamicImage::ImageRgb16(b) => (3, scaled(b.as_raw(), 65535.0)),
        other => {
            return Err(image_err(
                path,
                format!("unsupported pixel layout {:?}; expected 8- or 16-bit gray or RGB", other.color()),
            ))
        }
    };
    Tensor::new(&[h, w, c], data)
}

pub fn read_image(path: &Path) -> Result<Tensor<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, path)
}

fn format_for(path: &Path) -> Result<ImageFormat> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => Ok(ImageFormat::Png),
        Some("pgm" | "ppm" | "pnm") => Ok(ImageFormat::Pnm),
        _ => Err(image_err(path, "output extension must be .png, .pgm, .ppm or .pnm")),
    }
}

/// Encodes `[H, W, 1|3]` intensities in `[0, 1]` as a 16-bit raster.
pub fn encode_image(img: &Tensor<f64>, path: &Path) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.len() != 3 || !(s[2] == 1 || s[2] == 3) {
        return Err(Error::shape("write_image", "image", "[H, W, 1|3]", format!("{s:?}")));
    }
    let (h, w) = (s[0] as u32, s[1] as u32);
    let raw: Vec<u16> = img
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let dynimg = if s[2] == 1 {
        DynamicImage::ImageLuma16(ImageBuffer::<Luma<u16>, _>::from_raw(w, h, raw).expect("sized"))
    } else {
        DynamicImage::ImageRgb16(ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, raw).expect("sized"))
    };
    let mut out = Cursor::new(Vec::new());
    dynimg.write_to(&mut out, format_for(path)?).map_err(|e| image_err(path, e))?;
    Ok(out.into_inner())
}

pub fn write_image(img: &Tensor<f64>, path: &Path) -> Result<()> {
    super::write_atomic(path, &encode_image(img, path)?)
}

/// Blue-to-red ramp for `t` in `[0, 1]`.
fn ramp(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * t - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * t - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * t - 1.0).abs()).clamp(0.0, 1.0);
    [(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8]
}

/// Renders an `[H, W]` map as an 8-bit color PNG; `range` defaults to the
/// finite min and max, and non-finite pixels are black.
pub fn write_colormap(map: &Tensor<f64>, range: Option<(f64, f64)>, path: &Path) -> Result<()> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(Error::shape("write_colormap", "map", "[H, W]", format!("{s:?}")));
    }
    let (lo, hi) = range.unwrap_or_else(|| {
        map.data()
            .iter()
            .filter(|v| v.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
    });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut raw = Vec::with_capacity(map.len() * 3);
    for &v in map.data() {
        raw.extend_from_slice(&if v.is_finite() { ramp((v - lo) / span) } else { [0, 0, 0] });
    }
    let buf = ImageBuffer::<Rgb<u8>, _>::from_raw(s[1] as u32, s[0] as u32, raw).expect("sized");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png).map_err(|e| image_err(path, e))?;
    super::write_atomic(path, &out.into_inner())
}
