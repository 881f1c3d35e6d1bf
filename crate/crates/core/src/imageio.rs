//! Grayscale image files: 8-bit binary PGM (P5) and grayscale PNG.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::imageops::{self, FilterType};
use image::{DynamicImage, ExtendedColorType, ImageBuffer, ImageEncoder, ImageReader, Luma};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    }
}

/// Reads a grayscale PGM or PNG as a `1×H×W` tensor scaled to `[0, 1]`.
/// The format is sniffed from the file contents.
pub fn read_gray(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| image_error(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(|v| f64::from(v) / 65535.0).collect(),
        other => {
            return Err(Error::format(
                path,
                format!("expected a grayscale image, found {:?}", other.color()),
            ))
        }
    };
    Tensor::new(&[1, h, w], data)
}

/// Raw 8-bit payload of a grayscale file, row-major, plus `(width, height)`.
pub fn read_gray_bytes(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_error(path, e))?;
    match img {
        DynamicImage::ImageLuma8(b) => Ok((b.width() as usize, b.height() as usize, b.into_raw())),
        other => Err(Error::format(path, format!("expected 8-bit grayscale, found {:?}", other.color()))),
    }
}

/// Writes `pixels` (`width·height` bytes, row-major) as binary PGM, maxval 255.
pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if pixels.len() != width * height || width == 0 || height == 0 {
        return Err(Error::invalid(format!(
            "{} bytes cannot form a {width}×{height} image",
            pixels.len()
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let encoder = PnmEncoder::new(BufWriter::new(file)).with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary));
    encoder
        .write_image(pixels, width as u32, height as u32, ExtendedColorType::L8)
        .map_err(|e| image_error(path, e))
}

/// `round(255·v)` per pixel; inputs are clamped to `[0, 1]` first.
pub fn quantize(values: &[f64]) -> Vec<u8> {
    values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Resizes a `1×H×W` image to `1×size×size` with a triangle (bilinear)
/// filter. Returns a copy when the size already matches.
pub fn resize_bilinear(image: &Tensor, size: usize) -> Result<Tensor> {
    let (c, h, w) = image.dims3("resize")?;
    if c != 1 || size == 0 {
        return Err(Error::invalid("resize expects a single-channel image and a positive size"));
    }
    if h == size && w == size {
        return Ok(image.clone());
    }
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(w as u32, h as u32, image.data().iter().map(|&v| v as f32).collect())
            .expect("buffer length matches the tensor shape");
    let out = imageops::resize(&buf, size as u32, size as u32, FilterType::Triangle);
    let data = out.into_raw().into_iter().map(|v| f64::from(v).clamp(0.0, 1.0)).collect();
    Tensor::new(&[1, size, size], data)
}
