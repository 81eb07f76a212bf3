//! 8-bit RGB files <-> `[-1, 1]` tensors.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{RegenError, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Decode any supported image file into a `1 x 3 x h x w` tensor in `[-1, 1]`.
pub fn read_image<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path)
        .map_err(|e| RegenError::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    Ok(from_rgb8(&img))
}

/// Width and height from the file header, without decoding pixels.
pub fn image_dims(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path).map_err(|e| RegenError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok((w as usize, h as usize))
}

pub fn from_rgb8<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(Shape::new(1, 3, h, w));
    let scale = T::from_f64_lossy(1.0 / 127.5);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            *t.at_mut(0, c, y as usize, x as usize) =
                T::from_f64_lossy(px[c] as f64) * scale - T::one();
        }
    }
    t
}

/// Quantize a `[-1, 1]` value to 8 bits with round-half-even.
#[inline]
pub fn quantize<T: Scalar>(v: T) -> u8 {
    to_level((v.to_f64_lossy() + 1.0) * 127.5)
}

#[inline]
fn to_level(x: f64) -> u8 {
    x.clamp(0.0, 255.0).round_ties_even() as u8
}

pub fn to_rgb8<T: Scalar>(t: &Tensor<T>) -> Result<RgbImage> {
    let s = t.shape();
    if s.n != 1 || s.c != 3 {
        return Err(RegenError::Shape(format!("expected 1x3xHxW image, got {s}")));
    }
    Ok(ImageBuffer::from_fn(s.w as u32, s.h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([
            quantize(t.at(0, 0, y, x)),
            quantize(t.at(0, 1, y, x)),
            quantize(t.at(0, 2, y, x)),
        ])
    }))
}

/// Lossless 8-bit PNG.
pub fn write_png<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let img = to_rgb8(t)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| RegenError::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| RegenError::Encode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Bilinear resize with half-pixel centers (no antialiasing), per sample and channel.
pub fn resize_bilinear<T: Scalar>(t: &Tensor<T>, width: usize, height: usize) -> Tensor<T> {
    let s = t.shape();
    if s.w == width && s.h == height {
        return t.clone();
    }
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, height, width));
    let axis = |o: usize, out_n: usize, in_n: usize| -> (usize, usize, T) {
        let src = ((o as f64 + 0.5) * in_n as f64 / out_n as f64 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_n - 1);
        let i1 = (i0 + 1).min(in_n - 1);
        (i0, i1, T::from_f64_lossy(src - i0 as f64))
    };
    let xs: Vec<_> = (0..width).map(|x| axis(x, width, s.w)).collect();
    let ys: Vec<_> = (0..height).map(|y| axis(y, height, s.h)).collect();
    for n in 0..s.n {
        for c in 0..s.c {
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = t.at(n, c, y0, x0) * (T::one() - fx) + t.at(n, c, y0, x1) * fx;
                    let bot = t.at(n, c, y1, x0) * (T::one() - fx) + t.at(n, c, y1, x1) * fx;
                    *out.at_mut(n, c, oy, ox) = top * (T::one() - fy) + bot * fy;
                }
            }
        }
    }
    out
}
