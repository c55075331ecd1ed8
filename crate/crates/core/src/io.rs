//! PNG image I/O. Images travel as `[H, W, 3]` tensors in `[0, 1]`;
//! grayscale masks and heat maps as `[H, W, 1]`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use image::{GrayImage, RgbImage};
use std::path::Path;

pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut data = Vec::with_capacity((w * h * 3) as usize);
    for px in img.pixels() {
        data.push(px.0[0] as Scalar / 255.0);
        data.push(px.0[1] as Scalar / 255.0);
        data.push(px.0[2] as Scalar / 255.0);
    }
    Tensor::from_vec(&[h as usize, w as usize, 3], data)
}

pub fn save_image(tensor: &Tensor, path: &Path) -> Result<()> {
    let (h, w, c) = tensor.dims3()?;
    if c != 3 {
        return Err(Error::invalid(format!("save_image expects 3 channels, got {c}")));
    }
    let d = tensor.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let base = ((y as usize) * w + x as usize) * 3;
        image::Rgb([
            quantize(d[base]),
            quantize(d[base + 1]),
            quantize(d[base + 2]),
        ])
    });
    img.save(path)?;
    Ok(())
}

/// Load a grayscale mask as `[H, W, 1]` with values in {0, 1}.
pub fn load_mask(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img
        .pixels()
        .map(|p| if p.0[0] >= 128 { 1.0 } else { 0.0 })
        .collect();
    Tensor::from_vec(&[h as usize, w as usize, 1], data)
}

/// Save a `[H, W, 1]` (or `[H, W]`) tensor as an 8-bit grayscale PNG.
pub fn save_gray(tensor: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = match tensor.rank() {
        3 => {
            let (h, w, c) = tensor.dims3()?;
            if c != 1 {
                return Err(Error::invalid(format!("save_gray expects 1 channel, got {c}")));
            }
            (h, w)
        }
        2 => (tensor.shape()[0], tensor.shape()[1]),
        r => return Err(Error::invalid(format!("save_gray expects rank 2 or 3, got {r}"))),
    };
    let d = tensor.data();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([quantize(d[(y as usize) * w + x as usize])])
    });
    img.save(path)?;
    Ok(())
}

fn quantize(v: Scalar) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}
