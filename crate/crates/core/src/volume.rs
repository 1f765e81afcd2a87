//! Z-stacks, instance masks, single-cell crops and their preprocessing.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{idx3, Tensor};

/// Guard added to the rescale denominator so constant channels map to zero.
pub const RESCALE_EPS: f32 = 1e-8;

/// Raw multi-channel image, `[C, X, Y, Z]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZStack {
    pub image: Tensor<f32>,
    pub channel_names: Vec<String>,
    /// Voxel size in µm along x, y, z.
    pub spacing: [f64; 3],
}

impl ZStack {
    pub fn new(image: Tensor<f32>, channel_names: Vec<String>, spacing: [f64; 3]) -> Result<Self> {
        image.spatial()?;
        if channel_names.len() != image.shape()[0] {
            return Err(Error::invalid(format!(
                "{} channel names for {} channels",
                channel_names.len(),
                image.shape()[0]
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid(format!("voxel spacing must be positive, got {spacing:?}")));
        }
        Ok(Self { image, channel_names, spacing })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.image.spatial().expect("validated at construction")
    }
}

/// Instance label map: 0 is background, `k > 0` is cell `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMask {
    pub dims: [usize; 3],
    pub labels: Vec<u32>,
}

impl SegmentationMask {
    pub fn new(dims: [usize; 3], labels: Vec<u32>) -> Result<Self> {
        if labels.len() != dims.iter().product::<usize>() {
            return Err(Error::shape(format!("{} labels for dims {dims:?}", labels.len())));
        }
        Ok(Self { dims, labels })
    }

    /// Stored in TBF as f32 (exact for ids below 2^24).
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_parts(
            vec![self.dims[0], self.dims[1], self.dims[2]],
            self.labels.iter().map(|&l| l as f32).collect(),
        )
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let dims = match t.shape() {
            &[x, y, z] => [x, y, z],
            &[1, x, y, z] => [x, y, z],
            s => return Err(Error::shape(format!("mask must be [X, Y, Z], got {s:?}"))),
        };
        let labels = t
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as u32)
                } else {
                    Err(Error::invalid(format!("mask label {v} is not a non-negative integer")))
                }
            })
            .collect::<Result<_>>()?;
        Self::new(dims, labels)
    }
}

/// Binary single-cell mask, `{0, 1}` per voxel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub dims: [usize; 3],
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(dims: [usize; 3], data: Vec<u8>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::shape(format!("{} mask voxels for dims {dims:?}", data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::invalid("binary mask holds values other than 0/1"));
        }
        Ok(Self { dims, data })
    }

    pub fn full(dims: [usize; 3], value: bool) -> Self {
        Self { dims, data: vec![value as u8; dims.iter().product()] }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn as_floats<T: crate::Real>(&self) -> Vec<T> {
        self.data.iter().map(|&v| if v == 1 { T::one() } else { T::zero() }).collect()
    }

    /// Trilinear resample followed by re-binarization at 0.5.
    pub fn resize(&self, target: [usize; 3]) -> Self {
        if target == self.dims {
            return self.clone();
        }
        let t = Tensor::from_parts(
            vec![1, self.dims[0], self.dims[1], self.dims[2]],
            self.as_floats::<f32>(),
        );
        let r = ops::trilinear_resize(&t, target).expect("target validated by caller");
        Self { dims: target, data: r.data().iter().map(|&v| (v >= 0.5) as u8).collect() }
    }
}

/// One cell: volume `[C, X_c, Y_c, Z]`, its binary mask and metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct CellCrop {
    pub volume: Tensor<f32>,
    pub mask: BinaryMask,
    pub cell_id: String,
    /// Zero-based class index (dose index; 0 is the control).
    pub label: usize,
    pub well: String,
    pub site: u32,
    /// Cell center `(x, y)` in stack coordinates.
    pub center: (usize, usize),
    /// Channels that were constant before rescaling.
    pub degenerate_channels: Vec<bool>,
}

impl CellCrop {
    pub fn dims(&self) -> [usize; 3] {
        self.mask.dims
    }
}

/// Metadata shared by every crop cut from one stack.
#[derive(Debug, Clone, PartialEq)]
pub struct StackMeta {
    pub stack_id: String,
    pub label: usize,
    pub well: String,
    pub site: u32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Extraction {
    pub crops: Vec<CellCrop>,
    /// Instance ids whose crop window left the stack.
    pub dropped_boundary: Vec<u32>,
    /// Instance ids below `min_voxels`.
    pub dropped_small: Vec<u32>,
}

#[derive(Debug, Clone, Copy)]
struct Extent {
    count: usize,
    min: [usize; 2],
    max: [usize; 2],
}

/// Cuts a `crop_xy × crop_xy × Z` window around every sufficiently large
/// instance. The center is the midpoint of the instance's x/y extent, rounded
/// down; windows that would leave the stack are dropped.
pub fn extract_crops(
    stack: &ZStack,
    mask: &SegmentationMask,
    meta: &StackMeta,
    crop_xy: usize,
    min_voxels: usize,
) -> Result<Extraction> {
    let dims = stack.dims();
    if mask.dims != dims {
        return Err(Error::shape(format!(
            "mask dims {:?} differ from stack dims {dims:?}",
            mask.dims
        )));
    }
    if crop_xy == 0 || crop_xy > dims[0] || crop_xy > dims[1] {
        return Err(Error::invalid(format!(
            "crop size {crop_xy} does not fit a {}×{} stack",
            dims[0], dims[1]
        )));
    }

    let mut extents: BTreeMap<u32, Extent> = BTreeMap::new();
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                let id = mask.labels[idx3(dims, x, y, z)];
                if id == 0 {
                    continue;
                }
                let e = extents.entry(id).or_insert(Extent { count: 0, min: [x, y], max: [x, y] });
                e.count += 1;
                e.min = [e.min[0].min(x), e.min[1].min(y)];
                e.max = [e.max[0].max(x), e.max[1].max(y)];
            }
        }
    }

    let half = crop_xy / 2;
    let channels = stack.image.shape()[0];
    let mut out = Extraction::default();
    for (id, e) in extents {
        if e.count < min_voxels {
            out.dropped_small.push(id);
            continue;
        }
        let cx = (e.min[0] + e.max[0]) / 2;
        let cy = (e.min[1] + e.max[1]) / 2;
        if cx < half || cy < half || cx - half + crop_xy > dims[0] || cy - half + crop_xy > dims[1] {
            out.dropped_boundary.push(id);
            continue;
        }
        let (x0, y0) = (cx - half, cy - half);
        let cdims = [crop_xy, crop_xy, dims[2]];
        let n = crop_xy * crop_xy * dims[2];
        let mut vol = Vec::with_capacity(channels * n);
        for c in 0..channels {
            let src = stack.image.channel(c);
            for x in 0..crop_xy {
                for y in 0..crop_xy {
                    let s = idx3(dims, x0 + x, y0 + y, 0);
                    vol.extend_from_slice(&src[s..s + dims[2]]);
                }
            }
        }
        let mut m = Vec::with_capacity(n);
        for x in 0..crop_xy {
            for y in 0..crop_xy {
                let s = idx3(dims, x0 + x, y0 + y, 0);
                m.extend(mask.labels[s..s + dims[2]].iter().map(|&l| (l == id) as u8));
            }
        }
        let mask = BinaryMask { dims: cdims, data: m };
        if mask.count() == 0 {
            // the instance lies entirely outside its own window; only possible for huge cells
            out.dropped_boundary.push(id);
            continue;
        }
        out.crops.push(CellCrop {
            volume: Tensor::from_parts(vec![channels, cdims[0], cdims[1], cdims[2]], vol),
            mask,
            cell_id: format!("{}_c{id:04}", meta.stack_id),
            label: meta.label,
            well: meta.well.clone(),
            site: meta.site,
            center: (cx, cy),
            degenerate_channels: vec![false; channels],
        });
    }
    Ok(out)
}

/// Per-channel min/max rescale into `[0, 1]`. Constant channels become all
/// zeros and are flagged in `degenerate_channels`.
pub fn rescale(crop: &CellCrop) -> CellCrop {
    let mut out = crop.clone();
    let channels = crop.volume.shape()[0];
    out.degenerate_channels = vec![false; channels];
    for c in 0..channels {
        let ch = out.volume.channel_mut(c);
        let (lo, hi) = ch.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let range = hi - lo;
        out.degenerate_channels[c] = range == 0.0;
        let denom = range + RESCALE_EPS;
        for v in ch.iter_mut() {
            *v = (*v - lo) / denom;
        }
    }
    out
}

/// Voxel-level mean and standard deviation per channel of rescaled training
/// crops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    /// Statistics over already-rescaled crops.
    pub fn fit<'a>(crops: impl IntoIterator<Item = &'a CellCrop>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for crop in crops {
            let c = crop.volume.shape()[0];
            if sum.is_empty() {
                sum = vec![0.0; c];
                sq = vec![0.0; c];
            } else if sum.len() != c {
                return Err(Error::shape("crops disagree on channel count"));
            }
            for ch in 0..c {
                for &v in crop.volume.channel(ch) {
                    sum[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
            count += crop.volume.len() / c;
        }
        if count == 0 {
            return Err(Error::invalid("cannot fit channel statistics on zero crops"));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n - m * m).max(0.0);
                if var > 0.0 { var.sqrt() } else { 1.0 }
            })
            .collect();
        Ok(Self { mean, std })
    }
}

/// `v ← (v − μ_c) / σ_c` per channel.
pub fn normalize(crop: &CellCrop, stats: &ChannelStats) -> Result<CellCrop> {
    let channels = crop.volume.shape()[0];
    if stats.mean.len() != channels {
        return Err(Error::shape(format!(
            "stats cover {} channels, crop has {channels}",
            stats.mean.len()
        )));
    }
    let mut out = crop.clone();
    for c in 0..channels {
        let (m, s) = (stats.mean[c] as f32, stats.std[c] as f32);
        for v in out.volume.channel_mut(c) {
            *v = (*v - m) / s;
        }
    }
    Ok(out)
}

/// Rescale to `[0, 1]` then normalize with training-set statistics.
pub fn preprocess(crop: &CellCrop, stats: &ChannelStats) -> Result<CellCrop> {
    normalize(&rescale(crop), stats)
}

/// Resamples a crop (volume trilinear, mask trilinear + 0.5 threshold) to the
/// model's input shape.
pub fn fit_to_shape(crop: &CellCrop, target: [usize; 3]) -> Result<CellCrop> {
    if crop.dims() == target {
        return Ok(crop.clone());
    }
    let mut out = crop.clone();
    out.volume = ops::trilinear_resize(&crop.volume, target)?;
    out.mask = crop.mask.resize(target);
    Ok(out)
}

/// One draw of the training augmentations. Each field is `None`/`false` when
/// its coin came up tails.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AugmentPlan {
    pub flip_x: bool,
    pub flip_y: bool,
    /// Constant added to every voxel, from U[0.5, 1.25].
    pub brightness: Option<f32>,
    /// Exponent from U[0.5, 1.5], applied to values clamped at 0.
    pub gamma: Option<f32>,
}

pub const AUGMENT_P: f64 = 0.5;

impl AugmentPlan {
    /// Draws every coin and value in a fixed order so a seed fully determines
    /// the plan.
    pub fn sample(rng: &mut impl Rng) -> Self {
        let flip_x = rng.random_bool(AUGMENT_P);
        let flip_y = rng.random_bool(AUGMENT_P);
        let b_coin = rng.random_bool(AUGMENT_P);
        let b_val = rng.random_range(0.5f32..=1.25);
        let g_coin = rng.random_bool(AUGMENT_P);
        let g_val = rng.random_range(0.5f32..=1.5);
        Self {
            flip_x,
            flip_y,
            brightness: b_coin.then_some(b_val),
            gamma: g_coin.then_some(g_val),
        }
    }

    pub fn apply(&self, crop: &CellCrop) -> CellCrop {
        let mut out = crop.clone();
        let dims = crop.dims();
        let channels = crop.volume.shape()[0];
        if self.flip_x || self.flip_y {
            let flip = |x: usize, y: usize| {
                (
                    if self.flip_x { dims[0] - 1 - x } else { x },
                    if self.flip_y { dims[1] - 1 - y } else { y },
                )
            };
            for c in 0..channels {
                let src = crop.volume.channel(c);
                let dst = out.volume.channel_mut(c);
                for x in 0..dims[0] {
                    for y in 0..dims[1] {
                        let (sx, sy) = flip(x, y);
                        let d = idx3(dims, x, y, 0);
                        let s = idx3(dims, sx, sy, 0);
                        dst[d..d + dims[2]].copy_from_slice(&src[s..s + dims[2]]);
                    }
                }
            }
            for x in 0..dims[0] {
                for y in 0..dims[1] {
                    let (sx, sy) = flip(x, y);
                    let d = idx3(dims, x, y, 0);
                    let s = idx3(dims, sx, sy, 0);
                    out.mask.data[d..d + dims[2]].copy_from_slice(&crop.mask.data[s..s + dims[2]]);
                }
            }
        }
        if let Some(b) = self.brightness {
            out.volume.data_mut().iter_mut().for_each(|v| *v += b);
        }
        if let Some(g) = self.gamma {
            out.volume.data_mut().iter_mut().for_each(|v| *v = v.max(0.0).powf(g));
        }
        out
    }
}

/// Random x/y flips, brightness and gamma, each with probability 0.5. The z
/// axis is never flipped. Expects rescaled `[0, 1]` data.
pub fn augment(crop: &CellCrop, seed: u64) -> CellCrop {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AugmentPlan::sample(&mut rng).apply(crop)
}
