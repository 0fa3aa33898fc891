//! Conversions between raster types and batched `N × C × H × W` tensors.

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};
use crate::guidance::GuidanceMap;
use crate::raster::{Grid, HoleMask, RgbImage};

fn check_shapes(shapes: impl Iterator<Item = (usize, usize)>, field: &str) -> Result<(usize, usize, usize)> {
    let mut n = 0;
    let mut first = None;
    for s in shapes {
        n += 1;
        match first {
            None => first = Some(s),
            Some(f) if f != s => {
                return Err(Error::argument(field, format!("batch mixes shapes {f:?} and {s:?}")));
            }
            _ => {}
        }
    }
    let (h, w) = first.ok_or_else(|| Error::argument(field, "empty batch"))?;
    Ok((n, h, w))
}

pub fn images_tensor(images: &[&RgbImage]) -> Result<Tensor> {
    let (n, h, w) = check_shapes(images.iter().map(|i| i.shape()), "image")?;
    let data: Vec<f32> = images.iter().flat_map(|i| i.data().iter().copied()).collect();
    Ok(Tensor::from_vec(data, (n, 3, h, w), &Device::Cpu)?)
}

pub fn binary_tensor(grids: &[&Grid<u8>], field: &str) -> Result<Tensor> {
    let (n, h, w) = check_shapes(grids.iter().map(|g| g.shape()), field)?;
    let data: Vec<f32> = grids.iter().flat_map(|g| g.data().iter().map(|&v| v as f32)).collect();
    Ok(Tensor::from_vec(data, (n, 1, h, w), &Device::Cpu)?)
}

pub fn masks_tensor(masks: &[&HoleMask]) -> Result<Tensor> {
    let grids: Vec<&Grid<u8>> = masks.iter().map(|m| &m.0).collect();
    binary_tensor(&grids, "mask")
}

pub fn guidance_tensor(maps: &[&GuidanceMap]) -> Result<Tensor> {
    let (n, h, w) = check_shapes(maps.iter().map(|g| g.shape()), "guidance")?;
    let c = maps[0].channels();
    if maps.iter().any(|g| g.channels() != c) {
        return Err(Error::argument("guidance", "batch mixes channel counts"));
    }
    let data: Vec<f32> = maps.iter().flat_map(|g| g.data().iter().copied()).collect();
    Ok(Tensor::from_vec(data, (n, c, h, w), &Device::Cpu)?)
}

/// Splits an `N × 3 × H × W` tensor into images, clamping to `[-1, 1]`.
pub fn tensor_images(t: &Tensor) -> Result<Vec<RgbImage>> {
    let (n, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::Numeric(format!("expected 3 channels, got {c}")));
    }
    let flat: Vec<f32> = t.flatten_all()?.to_vec1()?;
    let per = 3 * h * w;
    (0..n)
        .map(|i| {
            let chunk: Vec<f32> = flat[i * per..(i + 1) * per].iter().map(|v| v.clamp(-1.0, 1.0)).collect();
            if chunk.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite image values".into()));
            }
            RgbImage::new(h, w, chunk)
        })
        .collect()
}

/// `raw ⊙ mask + image ⊙ (1 − mask)` for `{0,1}`-valued masks.
pub fn composite(raw: &Tensor, image: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let keep = mask.affine(-1.0, 1.0)?;
    Ok((raw.broadcast_mul(mask)? + image.broadcast_mul(&keep)?)?)
}

/// Pixel-level composite that copies known pixels verbatim.
pub fn composite_image(raw: &RgbImage, image: &RgbImage, mask: &HoleMask) -> Result<RgbImage> {
    if raw.shape() != image.shape() || mask.shape() != image.shape() {
        return Err(Error::argument("mask", "composite operands differ in shape"));
    }
    let hw = image.height() * image.width();
    let mut out = image.data().to_vec();
    for c in 0..3 {
        for (p, &m) in mask.data().iter().enumerate() {
            if m == 1 {
                out[c * hw + p] = raw.data()[c * hw + p];
            }
        }
    }
    RgbImage::new(image.height(), image.width(), out)
}

/// Dense `S × H` resampling matrix applied on both sides: `Ry · X · Rxᵀ`.
pub fn resample_tensor(x: &Tensor, ry: &Tensor, rx: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let s_y = ry.dim(0)?;
    let s_x = rx.dim(0)?;
    let flat = x.reshape((n * c, h, w))?;
    let ry_b = ry.unsqueeze(0)?.broadcast_as((n * c, s_y, h))?.contiguous()?;
    let rxt_b = rx.t()?.unsqueeze(0)?.broadcast_as((n * c, w, s_x))?.contiguous()?;
    let y = ry_b.matmul(&flat)?.matmul(&rxt_b)?;
    Ok(y.reshape((n, c, s_y, s_x))?)
}

/// Bilinear area-style resize of a batch to `size × size` (used to feed fixed-resolution encoders).
pub fn resize_square(x: &Tensor, size: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h == size && w == size {
        return Ok(x.clone());
    }
    let ry = Tensor::from_vec(average_matrix(h, size), (size, h), &Device::Cpu)?;
    let rx = Tensor::from_vec(average_matrix(w, size), (size, w), &Device::Cpu)?;
    resample_tensor(x, &ry, &rx)
}

/// Row-stochastic `out × inp` matrix averaging equal-width source intervals
/// (exact box filter for integer ratios, linear overlap otherwise).
pub fn average_matrix(inp: usize, out: usize) -> Vec<f32> {
    let mut m = vec![0f32; out * inp];
    let ratio = inp as f64 / out as f64;
    for o in 0..out {
        let a = o as f64 * ratio;
        let b = (o + 1) as f64 * ratio;
        if ratio >= 1.0 {
            for i in a.floor() as usize..(b.ceil() as usize).min(inp) {
                let lo = a.max(i as f64);
                let hi = b.min(i as f64 + 1.0);
                if hi > lo {
                    m[o * inp + i] = ((hi - lo) / ratio) as f32;
                }
            }
        } else {
            // magnification: bilinear at the output pixel centre
            let x = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (inp - 1) as f64);
            let i0 = x.floor() as usize;
            let i1 = (i0 + 1).min(inp - 1);
            let t = x - i0 as f64;
            m[o * inp + i0] += (1.0 - t) as f32;
            m[o * inp + i1] += t as f32;
        }
    }
    m
}
