//! Single-channel float images and their 16-bit PNG encoding.

use std::path::Path;

use disth_tensor::{Scalar, Tensor};
use image::{ImageBuffer, Luma};

use crate::error::{Error, Result};

/// Row-major grayscale image, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::arg(format!("image shape {height}x{width} is empty")));
        }
        if pixels.len() != height * width {
            return Err(Error::arg(format!(
                "image buffer has {} pixels, expected {height}x{width}",
                pixels.len()
            )));
        }
        Ok(Image { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Image {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn ensure_same_shape(&self, other: &Image) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::arg(format!(
                "image shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// 16-bit quantization used on disk: `round(65535·v)` after clamping to `[0, 1]`.
    pub fn to_u16(&self) -> Vec<u16> {
        self.pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16)
            .collect()
    }

    pub fn from_u16(height: usize, width: usize, raw: &[u16]) -> Result<Self> {
        Image::new(height, width, raw.iter().map(|&v| (v as f64 / 65535.0) as f32).collect())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.to_u16())
                .expect("buffer length matches dimensions");
        buf.save(path).map_err(|e| image_error(path, e))
    }

    /// Loads any grayscale-convertible PNG; 8-bit inputs are rescaled to `[0, 1]`.
    pub fn load_png(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "file not found")));
        }
        let img = image::open(path).map_err(|e| image_error(path, e))?.into_luma16();
        let (w, h) = img.dimensions();
        Image::from_u16(h as usize, w as usize, img.as_raw())
    }
}

/// Stack same-shape images into a `[B, 1, H, W]` tensor.
pub fn stack_images<F: Scalar>(images: &[&Image]) -> Result<Tensor<F>> {
    let first = images.first().ok_or_else(|| Error::arg("cannot batch zero images"))?;
    let (h, w) = first.shape();
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        first.ensure_same_shape(img)?;
        data.extend(img.pixels.iter().map(|&v| F::cst(v as f64)));
    }
    Ok(Tensor::from_vec(data, &[images.len(), 1, h, w]))
}

/// Split a `[B, 1, H, W]` tensor back into images.
pub fn unstack_images<F: Scalar>(t: &Tensor<F>) -> Vec<Image> {
    let (b, h, w) = match t.shape() {
        [b, 1, h, w] => (*b, *h, *w),
        s => panic!("expected [B, 1, H, W], got {s:?}"),
    };
    t.data()
        .chunks(h * w)
        .take(b)
        .map(|c| Image {
            height: h,
            width: w,
            pixels: c.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect(),
        })
        .collect()
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(source) => Error::io(path, source),
        other => Error::Dataset {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}
