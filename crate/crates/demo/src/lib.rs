//! Browser demo: a synthetic site viewer and a Grad-CAMO playground.
//!
//! The plain functions return `gradcamo::Result` so they can be tested
//! natively; the `#[wasm_bindgen]` wrappers only translate errors.

use gradcamo::gradcamo::gradcamo_score;
use gradcamo::ops::trilinear_resize;
use gradcamo::render::{overlay, slice_xy};
use gradcamo::synth::{generate_stack, SynthConfig};
use gradcamo::volume::BinaryMask;
use gradcamo::{Error, Result, Tensor};
use wasm_bindgen::prelude::*;

/// Side of the demo site in voxels.
pub const SITE_XY: usize = 128;
/// Playground crop, the default network input.
pub const CROP: [usize; 3] = [32, 32, 16];
/// Localization maps are produced at a quarter of the crop resolution.
pub const COARSE: [usize; 3] = [8, 8, 4];

/// An RGBA image plus the number it illustrates.
#[wasm_bindgen]
#[derive(Debug, Clone)]
pub struct Frame {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
    score: f64,
}

#[wasm_bindgen]
impl Frame {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    /// Row-major RGBA, `width * height * 4` bytes.
    pub fn pixels(&self) -> Vec<u8> {
        self.pixels.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn score(&self) -> f64 {
        self.score
    }
}

/// Middle z slice of one synthetic site with cell outlines. `score` is the
/// fraction of background voxels, where the dose texture lives.
pub fn site_frame(gamma: f64, dose: usize, channel: usize, seed: u64) -> Result<Frame> {
    let cfg = SynthConfig {
        volume: [SITE_XY, SITE_XY, 16],
        cells_per_site: 8,
        confound_strength: gamma,
        seed,
        ..SynthConfig::default()
    };
    cfg.validate()?;
    if channel >= cfg.channels {
        return Err(Error::InvalidArgument(format!("channel {channel} of {}", cfg.channels)));
    }
    let stack = generate_stack(&cfg, dose, 0, 0)?;
    let z = cfg.volume[2] / 2;
    let base = slice_xy(&stack.stack.image, channel, z)?;
    let labels: Vec<u32> = (0..SITE_XY * SITE_XY)
        .map(|i| stack.mask.labels[i * cfg.volume[2] + z])
        .collect();
    let inside: Vec<u8> = labels.iter().map(|&l| u8::from(l != 0)).collect();
    let background = inside.iter().filter(|&&v| v == 0).count() as f64 / inside.len() as f64;
    let pixels = overlay(&base, &vec![0.0; base.len()], None, 0.0, Some(&inside), SITE_XY)?;
    Ok(Frame { width: SITE_XY, height: SITE_XY, pixels, score: background })
}

/// A centered cylindrical cell mask of the given xy radius.
pub fn disk_mask(radius: f64) -> BinaryMask {
    let [nx, ny, nz] = CROP;
    let c = [(nx as f64 - 1.0) / 2.0, (ny as f64 - 1.0) / 2.0];
    let mut data = Vec::with_capacity(nx * ny * nz);
    for x in 0..nx {
        for y in 0..ny {
            let inside = (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) <= radius * radius;
            data.extend(std::iter::repeat(u8::from(inside)).take(nz));
        }
    }
    BinaryMask { dims: CROP, data }
}

/// A Gaussian blob at the coarse resolution, centred at crop voxel
/// `(cx, cy)` with xy spread `sigma` (crop voxels).
pub fn coarse_blob(cx: f64, cy: f64, sigma: f64) -> Result<Tensor<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument("spread must be positive".into()));
    }
    let [gx, gy, gz] = COARSE;
    // coarse cell centres in crop coordinates, half-pixel convention
    let at = |i: usize, n: usize, full: usize| (i as f64 + 0.5) * full as f64 / n as f64 - 0.5;
    let mut data = Vec::with_capacity(gx * gy * gz);
    for i in 0..gx {
        for j in 0..gy {
            let d2 = (at(i, gx, CROP[0]) - cx).powi(2) + (at(j, gy, CROP[1]) - cy).powi(2);
            let v = (-d2 / (2.0 * sigma * sigma)).exp();
            data.extend(std::iter::repeat(v).take(gz));
        }
    }
    Tensor::from_vec(&[1, gx, gy, gz], data)
}

/// Overlays a blob-shaped localization map on a disk-shaped cell and
/// scores it. With `smooth` the map is shown after trilinear upsampling,
/// otherwise as its raw coarse blocks. The score always uses the upsampled map.
pub fn overlap_frame(cx: f64, cy: f64, sigma: f64, radius: f64, smooth: bool) -> Result<Frame> {
    let mask = disk_mask(radius);
    let coarse = coarse_blob(cx, cy, sigma)?;
    let fine = trilinear_resize(&coarse, CROP)?;
    let overlap = gradcamo_score(&fine, &mask)?;

    let z = CROP[2] / 2;
    let heat = if smooth {
        slice_xy(&fine, 0, z)?
    } else {
        let cs = slice_xy(&coarse, 0, COARSE[2] / 2)?;
        let (fx, fy) = (CROP[0] / COARSE[0], CROP[1] / COARSE[1]);
        (0..CROP[0]).flat_map(|x| (0..CROP[1]).map(move |y| (x, y))).map(|(x, y)| cs[(x / fx) * COARSE[1] + y / fy]).collect()
    };
    let plane: Vec<u8> = (0..CROP[0] * CROP[1]).map(|i| mask.data[i * CROP[2] + z]).collect();
    let base: Vec<f32> = plane.iter().map(|&m| 0.15 + 0.5 * m as f32).collect();
    let pixels = overlay(&base, &heat, Some(1.0), 0.75, Some(&plane), CROP[1])?;
    Ok(Frame { width: CROP[1], height: CROP[0], pixels, score: overlap.score })
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = siteView)]
pub fn site_view(gamma: f64, dose: u32, channel: u32, seed: u32) -> std::result::Result<Frame, JsError> {
    site_frame(gamma, dose as usize, channel as usize, seed as u64).map_err(js)
}

#[wasm_bindgen(js_name = overlapView)]
pub fn overlap_view(cx: f64, cy: f64, sigma: f64, radius: f64, smooth: bool) -> std::result::Result<Frame, JsError> {
    overlap_frame(cx, cy, sigma, radius, smooth).map_err(js)
}
