//! RGBA rendering of crop slices with localization-map overlays.

use crate::error::{Error, Result};
use crate::tensor::{idx3, Real, Tensor};
use crate::volume::BinaryMask;

/// Anchors of a black → purple → orange → yellow heat ramp.
const HEAT: [(f32, [f32; 3]); 5] = [
    (0.0, [0.0, 0.0, 4.0]),
    (0.25, [87.0, 16.0, 110.0]),
    (0.5, [188.0, 55.0, 84.0]),
    (0.75, [249.0, 142.0, 9.0]),
    (1.0, [252.0, 255.0, 164.0]),
];

pub fn heat_color(t: f32) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let i = HEAT.iter().position(|&(s, _)| s >= t).unwrap_or(HEAT.len() - 1).max(1);
    let (s0, c0) = HEAT[i - 1];
    let (s1, c1) = HEAT[i];
    let f = (t - s0) / (s1 - s0);
    [0, 1, 2].map(|k| (c0[k] + f * (c1[k] - c0[k])).round() as u8)
}

/// The `z` slice of a `[X, Y, Z]` (or `[C, X, Y, Z]`, channel `c`) tensor as
/// an `X × Y` row-major plane, x along rows.
pub fn slice_xy<T: Real>(t: &Tensor<T>, c: usize, z: usize) -> Result<Vec<f32>> {
    let (dims, data) = match t.shape() {
        &[x, y, zz] => ([x, y, zz], t.data()),
        &[ch, x, y, zz] if c < ch => ([x, y, zz], t.channel(c)),
        s => return Err(Error::shape(format!("cannot slice channel {c} of {s:?}"))),
    };
    if z >= dims[2] {
        return Err(Error::invalid(format!("slice {z} out of range for depth {}", dims[2])));
    }
    let mut out = Vec::with_capacity(dims[0] * dims[1]);
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            out.push(data[idx3(dims, x, y, z)].as_f64() as f32);
        }
    }
    Ok(out)
}

fn unit_range(v: &[f32]) -> Vec<f32> {
    let lo = v.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    v.iter().map(|&x| if span > 0.0 { (x - lo) / span } else { 0.0 }).collect()
}

/// Grayscale `base` blended with the heat colour of `heat` (scaled by
/// `heat_max`, or by its own maximum when `None`). Mask boundary voxels are
/// drawn in cyan when a mask plane is given.
pub fn overlay(base: &[f32], heat: &[f32], heat_max: Option<f32>, alpha: f32, mask: Option<&[u8]>, width: usize) -> Result<Vec<u8>> {
    if base.len() != heat.len() || width == 0 || base.len() % width != 0 {
        return Err(Error::shape(format!("planes of {} and {} values with width {width}", base.len(), heat.len())));
    }
    if let Some(m) = mask {
        if m.len() != base.len() {
            return Err(Error::shape("mask plane size differs from image plane"));
        }
    }
    let gray = unit_range(base);
    let hmax = heat_max.unwrap_or_else(|| heat.iter().copied().fold(0.0, f32::max));
    let height = base.len() / width;
    let mut rgba = Vec::with_capacity(base.len() * 4);
    for (i, (&g, &h)) in gray.iter().zip(heat).enumerate() {
        let t = if hmax > 0.0 { h / hmax } else { 0.0 };
        let a = alpha * t.clamp(0.0, 1.0);
        let col = heat_color(t);
        let mut px = [0u8; 4];
        for k in 0..3 {
            px[k] = ((1.0 - a) * g * 255.0 + a * col[k] as f32).round() as u8;
        }
        px[3] = 255;
        if let Some(m) = mask {
            let (r, c) = (i / width, i % width);
            let inside = m[i] == 1;
            let edge = inside
                && [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)]
                    .iter()
                    .any(|&(rr, cc)| rr >= height || cc >= width || m[rr * width + cc] == 0);
            if edge {
                px = [0, 220, 230, 255];
            }
        }
        rgba.extend_from_slice(&px);
    }
    Ok(rgba)
}

/// The `z` plane of a binary mask, matching [`slice_xy`]'s layout.
pub fn mask_slice(mask: &BinaryMask, z: usize) -> Result<Vec<u8>> {
    let d = mask.dims;
    if z >= d[2] {
        return Err(Error::invalid(format!("slice {z} out of range for depth {}", d[2])));
    }
    Ok((0..d[0]).flat_map(|x| (0..d[1]).map(move |y| mask.data[idx3(d, x, y, z)])).collect())
}
