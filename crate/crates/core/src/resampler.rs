//! Inverse image warping with bilinear sampling.
//!
//! `warp(image, theta, out)` fills each output pixel at normalized
//! coordinate `x` with a bilinear sample of `image` at `theta(x)`; samples
//! outside `[-1,1]^2` read as zero. Pixel centers map to normalized
//! coordinates via `x = 2 (u + 0.5) / W - 1` (and likewise for y/height), so
//! the image spans exactly `[-1, 1]`.
//!
//! Warping is sampling plumbing between the two independently trained
//! stages; it does not participate in gradient computation.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Scalar, Tensor};
use crate::transforms::{apply_points, TransformParams};

/// Center of pixel `u` (column or row) in an extent-`n` image, normalized.
pub fn pixel_to_normalized(u: Scalar, extent: usize) -> Scalar {
    2.0 * (u + 0.5) / extent as Scalar - 1.0
}

/// Inverse of [`pixel_to_normalized`]: normalized coordinate to pixel units.
pub fn normalized_to_pixel(x: Scalar, extent: usize) -> Scalar {
    (x + 1.0) / 2.0 * extent as Scalar - 0.5
}

fn normalized_output_grid(out_h: usize, out_w: usize) -> Vec<(Scalar, Scalar)> {
    let mut grid = Vec::with_capacity(out_h * out_w);
    for v in 0..out_h {
        let y = pixel_to_normalized(v as Scalar, out_h);
        for u in 0..out_w {
            grid.push((pixel_to_normalized(u as Scalar, out_w), y));
        }
    }
    grid
}

/// Bilinear inverse warp of a `[H, W, c]` image into `out_size = (H', W')`.
pub fn warp(image: &Tensor, theta: &TransformParams, out_size: (usize, usize)) -> Result<Tensor> {
    let (h, w, c) = image.dims3()?;
    let (out_h, out_w) = out_size;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("warp output size must be at least 1x1"));
    }
    let grid = normalized_output_grid(out_h, out_w);
    let sampled = apply_points(theta, &grid)?;
    let src = image.data();
    let mut out = Tensor::zeros(&[out_h, out_w, c]);
    par::for_each_chunk_mut(out.data_mut(), out_w * c, |row, chunk| {
        for u in 0..out_w {
            let (sx, sy) = sampled[row * out_w + u];
            let uf = normalized_to_pixel(sx, w);
            let vf = normalized_to_pixel(sy, h);
            let u0 = uf.floor();
            let v0 = vf.floor();
            let au = uf - u0;
            let av = vf - v0;
            let (u0, v0) = (u0 as isize, v0 as isize);
            let fetch = |vv: isize, uu: isize, ch: usize| -> Scalar {
                if vv < 0 || uu < 0 || vv >= h as isize || uu >= w as isize {
                    0.0
                } else {
                    src[((vv as usize) * w + uu as usize) * c + ch]
                }
            };
            for ch in 0..c {
                let top = (1.0 - au) * fetch(v0, u0, ch) + au * fetch(v0, u0 + 1, ch);
                let bot = (1.0 - au) * fetch(v0 + 1, u0, ch) + au * fetch(v0 + 1, u0 + 1, ch);
                chunk[u * c + ch] = (1.0 - av) * top + av * bot;
            }
        }
    });
    Ok(out)
}

/// Nearest-neighbor inverse warp; keeps label images binary.
pub fn warp_nearest(
    image: &Tensor,
    theta: &TransformParams,
    out_size: (usize, usize),
) -> Result<Tensor> {
    let (h, w, c) = image.dims3()?;
    let (out_h, out_w) = out_size;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("warp output size must be at least 1x1"));
    }
    let grid = normalized_output_grid(out_h, out_w);
    let sampled = apply_points(theta, &grid)?;
    let src = image.data();
    let mut out = Tensor::zeros(&[out_h, out_w, c]);
    par::for_each_chunk_mut(out.data_mut(), out_w * c, |row, chunk| {
        for u in 0..out_w {
            let (sx, sy) = sampled[row * out_w + u];
            let uu = normalized_to_pixel(sx, w).round() as isize;
            let vv = normalized_to_pixel(sy, h).round() as isize;
            if vv < 0 || uu < 0 || vv >= h as isize || uu >= w as isize {
                continue;
            }
            let base = ((vv as usize) * w + uu as usize) * c;
            for ch in 0..c {
                chunk[u * c + ch] = src[base + ch];
            }
        }
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transforms::AffineParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_warp_reproduces_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Tensor::rand_uniform(&[7, 9, 3], 0.0, 1.0, &mut rng);
        let out = warp(&img, &TransformParams::identity_affine(), (7, 9)).unwrap();
        assert!(out.max_abs_diff(&img) < 1e-12);
    }

    #[test]
    fn one_pixel_translation_shifts_content() {
        let (h, w) = (6, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = Tensor::rand_uniform(&[h, w, 1], 0.0, 1.0, &mut rng);
        // tx of one pixel pitch in normalized units: 2/w.
        let theta = TransformParams::Affine(AffineParams::translation(2.0 / w as f64, 0.0));
        let out = warp(&img, &theta, (h, w)).unwrap();
        for v in 0..h {
            for u in 0..w {
                let got = out.data()[(v * w + u) * 1];
                let want = if u + 1 < w {
                    img.data()[(v * w + u + 1) * 1]
                } else {
                    0.0 // zero fill at the border
                };
                assert!((got - want).abs() < 1e-12, "pixel ({v},{u})");
            }
        }
    }

    #[test]
    fn affine_warp_exact_on_linear_ramp() {
        // I(x, y) = x + y in normalized coordinates is linear in pixel
        // coordinates, so bilinear interpolation reproduces it exactly.
        let (h, w) = (16, 16);
        let mut img = Tensor::zeros(&[h, w, 1]);
        for v in 0..h {
            for u in 0..w {
                img.data_mut()[v * w + u] = pixel_to_normalized(u as f64, w)
                    + pixel_to_normalized(v as f64, h);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let theta = AffineParams {
            a11: 1.0 + rng.gen_range(-0.05..0.05),
            a12: rng.gen_range(-0.05..0.05),
            a21: rng.gen_range(-0.05..0.05),
            a22: 1.0 + rng.gen_range(-0.05..0.05),
            tx: rng.gen_range(-0.03..0.03),
            ty: rng.gen_range(-0.03..0.03),
        };
        let out = warp(&img, &TransformParams::Affine(theta), (h, w)).unwrap();
        for v in 2..h - 2 {
            for u in 2..w - 2 {
                let x = pixel_to_normalized(u as f64, w);
                let y = pixel_to_normalized(v as f64, h);
                let (sx, sy) = theta.apply((x, y));
                // Skip samples whose bilinear footprint leaves the image.
                let uf = normalized_to_pixel(sx, w);
                let vf = normalized_to_pixel(sy, h);
                if uf < 0.0 || vf < 0.0 || uf > (w - 1) as f64 || vf > (h - 1) as f64 {
                    continue;
                }
                let got = out.data()[v * w + u];
                assert!((got - (sx + sy)).abs() < 1e-9, "ramp mismatch at ({v},{u})");
            }
        }
    }

    #[test]
    fn warp_roundtrip_close_away_from_borders() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = Tensor::rand_uniform(&[32, 32, 1], 0.0, 1.0, &mut rng);
        let fwd = AffineParams {
            a11: 1.02,
            a12: 0.01,
            a21: -0.015,
            a22: 0.99,
            tx: 0.02,
            ty: -0.01,
        };
        let inv = fwd.inverse().unwrap();
        let warped = warp(&img, &TransformParams::Affine(inv), (32, 32)).unwrap();
        let back = warp(&warped, &TransformParams::Affine(fwd), (32, 32)).unwrap();
        // Interior PSNR check.
        let mut se = 0.0;
        let mut count = 0;
        for v in 4..28 {
            for u in 4..28 {
                let d = back.data()[v * 32 + u] - img.data()[v * 32 + u];
                se += d * d;
                count += 1;
            }
        }
        let mse: f64 = se / count as f64;
        let psnr = -10.0 * mse.log10();
        assert!(psnr > 30.0, "interior PSNR {psnr:.2} too low");
    }

    #[test]
    fn output_stays_within_input_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let img = Tensor::rand_uniform(&[10, 10, 2], 0.25, 0.75, &mut rng);
        let theta = TransformParams::Affine(AffineParams {
            a11: 0.8,
            a22: 1.3,
            a12: 0.1,
            ..AffineParams::identity()
        });
        let out = warp(&img, &theta, (14, 9)).unwrap();
        // Zero padding can undershoot 0.25 but never the bilinear hull.
        for &v in out.data() {
            assert!((0.0..=0.75 + 1e-12).contains(&v));
        }
    }

    #[test]
    fn rejects_empty_output() {
        let img = Tensor::zeros(&[4, 4, 1]);
        assert!(warp(&img, &TransformParams::identity_affine(), (0, 4)).is_err());
    }
}
