//! Forward kernels and their adjoints.
//!
//! These are plain functions on tensors; [`crate::tape`] wires them into a
//! differentiable graph. Volumes are `[C, X, Y, Z]`, row-major.

use crate::error::{Error, Result};
use crate::tensor::{idx3, Real, Tensor};

/// Taps per output voxel of a 3×3×3 kernel.
pub const TAPS: usize = 27;

/// Unfolds a zero-padded `[C, X, Y, Z]` volume into a `[C·27, X·Y·Z]` matrix.
pub fn im2col<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [nx, ny, nz] = input.spatial()?;
    let c_in = input.shape()[0];
    let n = nx * ny * nz;
    let mut cols = vec![T::zero(); c_in * TAPS * n];
    let dims = [nx, ny, nz];
    for ci in 0..c_in {
        let src = input.channel(ci);
        for tap in 0..TAPS {
            let (dx, dy, dz) = (tap / 9, (tap / 3) % 3, tap % 3);
            let row = &mut cols[(ci * TAPS + tap) * n..(ci * TAPS + tap + 1) * n];
            let (z_lo, z_hi) = valid_range(nz, dz);
            for x in valid_iter(nx, dx) {
                let sx = x + dx - 1;
                for y in valid_iter(ny, dy) {
                    let sy = y + dy - 1;
                    let dst = idx3(dims, x, y, 0);
                    let s = idx3(dims, sx, sy, 0);
                    row[dst + z_lo..dst + z_hi]
                        .copy_from_slice(&src[s + z_lo + dz - 1..s + z_hi + dz - 1]);
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![c_in * TAPS, n], cols))
}

/// Adjoint of [`im2col`]: scatters a `[C·27, X·Y·Z]` matrix back onto a volume.
pub fn col2im<T: Real>(cols: &[T], c_in: usize, dims: [usize; 3]) -> Tensor<T> {
    let [nx, ny, nz] = dims;
    let n = nx * ny * nz;
    let mut out = vec![T::zero(); c_in * n];
    for ci in 0..c_in {
        let dst = &mut out[ci * n..(ci + 1) * n];
        for tap in 0..TAPS {
            let (dx, dy, dz) = (tap / 9, (tap / 3) % 3, tap % 3);
            let row = &cols[(ci * TAPS + tap) * n..(ci * TAPS + tap + 1) * n];
            let (z_lo, z_hi) = valid_range(nz, dz);
            for x in valid_iter(nx, dx) {
                let sx = x + dx - 1;
                for y in valid_iter(ny, dy) {
                    let sy = y + dy - 1;
                    let o = idx3(dims, x, y, 0);
                    let s = idx3(dims, sx, sy, 0);
                    for z in z_lo..z_hi {
                        dst[s + z + dz - 1] += row[o + z];
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![c_in, nx, ny, nz], out)
}

/// Output positions `p` along an axis of length `len` for which `p + d - 1`
/// stays inside the axis (`d` is the tap offset in `0..3`).
fn valid_range(len: usize, d: usize) -> (usize, usize) {
    let lo = if d == 0 { 1 } else { 0 };
    let hi = if d == 2 { len.saturating_sub(1) } else { len };
    (lo.min(hi), hi)
}

fn valid_iter(len: usize, d: usize) -> std::ops::Range<usize> {
    let (lo, hi) = valid_range(len, d);
    lo..hi
}

pub(crate) fn check_conv_shapes<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<()> {
    let c_in = input.spatial().map(|_| input.shape()[0])?;
    match kernel.shape() {
        &[c_out, k_in, 3, 3, 3] => {
            if k_in != c_in {
                return Err(Error::shape(format!(
                    "conv3d: input has {c_in} channels but kernel expects {k_in}"
                )));
            }
            if bias.shape() != [c_out] {
                return Err(Error::shape(format!(
                    "conv3d: bias shape {:?} does not match {c_out} output channels",
                    bias.shape()
                )));
            }
            Ok(())
        }
        s => Err(Error::shape(format!("conv3d: kernel must be [C_out, C_in, 3, 3, 3], got {s:?}"))),
    }
}

/// 3×3×3 cross-correlation, stride 1, zero padding 1. Returns the output and
/// the unfolded input, which the backward pass reuses.
pub fn conv3d_forward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_conv_shapes(input, kernel, bias)?;
    let [nx, ny, nz] = input.spatial()?;
    let n = nx * ny * nz;
    let c_out = kernel.shape()[0];
    let k = kernel.len() / c_out;
    let cols = im2col(input)?;
    let mut out = vec![T::zero(); c_out * n];
    for (co, row) in out.chunks_mut(n).enumerate() {
        row.fill(bias.data()[co]);
    }
    T::gemm(c_out, k, n, T::one(), kernel.data(), false, cols.data(), false, T::one(), &mut out);
    Ok((Tensor::from_parts(vec![c_out, nx, ny, nz], out), cols))
}

/// Gradients of [`conv3d_forward`]: `(d_input, d_kernel, d_bias)`. The input
/// gradient is skipped when `need_input` is false.
pub fn conv3d_backward<T: Real>(
    grad_out: &Tensor<T>,
    cols: &Tensor<T>,
    kernel: &Tensor<T>,
    need_input: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let c_out = kernel.shape()[0];
    let c_in = kernel.shape()[1];
    let k = c_in * TAPS;
    let dims = [grad_out.shape()[1], grad_out.shape()[2], grad_out.shape()[3]];
    let n = dims.iter().product::<usize>();

    let mut d_kernel = vec![T::zero(); c_out * k];
    T::gemm(c_out, n, k, T::one(), grad_out.data(), false, cols.data(), true, T::zero(), &mut d_kernel);
    let d_bias: Vec<T> = grad_out.data().chunks(n).map(|r| r.iter().copied().sum()).collect();

    let d_input = need_input.then(|| {
        let mut d_cols = vec![T::zero(); k * n];
        T::gemm(k, c_out, n, T::one(), kernel.data(), true, grad_out.data(), false, T::zero(), &mut d_cols);
        col2im(&d_cols, c_in, dims)
    });
    (
        d_input,
        Tensor::from_parts(kernel.shape().to_vec(), d_kernel),
        Tensor::from_parts(vec![c_out], d_bias),
    )
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes the upstream gradient where `x > 0`; the subgradient at 0 is 0.
pub fn relu_backward<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// 2×2×2 max pooling. Returns the pooled tensor and, per output element, the
/// flat input index that won (lowest linear index on ties).
pub fn maxpool3d<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [nx, ny, nz] = x.spatial()?;
    if nx % 2 != 0 || ny % 2 != 0 || nz % 2 != 0 {
        return Err(Error::shape(format!(
            "maxpool3d needs even spatial extents, got {:?}",
            [nx, ny, nz]
        )));
    }
    let c = x.shape()[0];
    let (ox, oy, oz) = (nx / 2, ny / 2, nz / 2);
    let in_dims = [nx, ny, nz];
    let n_in = nx * ny * nz;
    let mut out = Vec::with_capacity(c * ox * oy * oz);
    let mut argmax = Vec::with_capacity(out.capacity());
    for ch in 0..c {
        let base = ch * n_in;
        let src = x.channel(ch);
        for i in 0..ox {
            for j in 0..oy {
                for k in 0..oz {
                    let mut best = idx3(in_dims, 2 * i, 2 * j, 2 * k);
                    // window visited in increasing linear index order; strict > keeps the first max
                    for (dx, dy, dz) in WINDOW {
                        let p = idx3(in_dims, 2 * i + dx, 2 * j + dy, 2 * k + dz);
                        if src[p] > src[best] {
                            best = p;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(base + best);
                }
            }
        }
    }
    Ok((Tensor::from_parts(vec![c, ox, oy, oz], out), argmax))
}

const WINDOW: [(usize, usize, usize); 8] = [
    (0, 0, 0),
    (0, 0, 1),
    (0, 1, 0),
    (0, 1, 1),
    (1, 0, 0),
    (1, 0, 1),
    (1, 1, 0),
    (1, 1, 1),
];

pub fn maxpool3d_backward<T: Real>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut g = Tensor::zeros(input_shape);
    let d = g.data_mut();
    for (&a, &v) in argmax.iter().zip(grad_out.data()) {
        d[a] += v;
    }
    g
}

/// Mean over all non-channel axes: `[C, ...] -> [C]`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let c = x.shape()[0];
    let per = x.len() / c;
    let inv = T::one() / T::of_usize(per);
    let data = (0..c).map(|ch| x.channel(ch).iter().copied().sum::<T>() * inv).collect();
    Tensor::from_parts(vec![c], data)
}

pub fn global_avg_pool_backward<T: Real>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let c = input_shape[0];
    let total: usize = input_shape.iter().product();
    let per = total / c;
    let inv = T::one() / T::of_usize(per);
    let mut data = Vec::with_capacity(total);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g * inv, per));
    }
    Tensor::from_parts(input_shape.to_vec(), data)
}

pub(crate) fn check_linear_shapes<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<()> {
    match weight.shape() {
        &[k, d] if x.shape() == [d] && bias.shape() == [k] => Ok(()),
        w => Err(Error::shape(format!(
            "linear: x {:?}, weight {w:?}, bias {:?} are incompatible",
            x.shape(),
            bias.shape()
        ))),
    }
}

/// `weight · x + bias` for `x: [d]`, `weight: [K, d]`.
pub fn linear<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    check_linear_shapes(x, weight, bias)?;
    let d = x.len();
    let data = weight
        .data()
        .chunks(d)
        .zip(bias.data())
        .map(|(row, &b)| row.iter().zip(x.data()).map(|(&w, &v)| w * v).sum::<T>() + b)
        .collect();
    Ok(Tensor::from_parts(vec![bias.len()], data))
}

/// `(d_x, d_weight, d_bias)` of [`linear`].
pub fn linear_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = x.len();
    let mut dx = vec![T::zero(); d];
    let mut dw = Vec::with_capacity(weight.len());
    for (row, &g) in weight.data().chunks(d).zip(grad_out.data()) {
        for (acc, &w) in dx.iter_mut().zip(row) {
            *acc += g * w;
        }
        dw.extend(x.data().iter().map(|&v| g * v));
    }
    (
        Tensor::from_parts(vec![d], dx),
        Tensor::from_parts(weight.shape().to_vec(), dw),
        grad_out.clone(),
    )
}

/// Numerically stable softmax of a logit vector.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-log softmax(logits)[label]` and the softmax probabilities.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, label: usize) -> Result<(T, Vec<T>)> {
    let k = logits.len();
    if label >= k {
        return Err(Error::invalid(format!("label {label} out of range for {k} classes")));
    }
    let max = logits.data().iter().copied().fold(T::neg_infinity(), T::max);
    let log_sum = logits.data().iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    Ok((log_sum - logits.data()[label], softmax(logits.data())))
}

/// Per-axis interpolation table: for each destination index, the two source
/// indices and the fractional weight of the upper one.
#[derive(Debug, Clone)]
pub struct AxisTable {
    pub src_len: usize,
    pub taps: Vec<(usize, usize, f64)>,
}

impl AxisTable {
    /// Half-pixel-center mapping `src = (dst + 0.5)·(src_len/dst_len) − 0.5`,
    /// clamped to the source border.
    pub fn new(src_len: usize, dst_len: usize) -> Self {
        let ratio = src_len as f64 / dst_len as f64;
        let max = (src_len - 1) as f64;
        let taps = (0..dst_len)
            .map(|d| {
                let s = ((d as f64 + 0.5) * ratio - 0.5).clamp(0.0, max);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(src_len - 1);
                (lo, hi, s - lo as f64)
            })
            .collect();
        Self { src_len, taps }
    }
}

/// Interpolates along one axis of a `[outer, len, inner]` view.
fn lerp_axis<T: Real>(src: &[T], outer: usize, inner: usize, table: &AxisTable) -> Vec<T> {
    let src_len = table.src_len;
    let dst_len = table.taps.len();
    let mut out = vec![T::zero(); outer * dst_len * inner];
    for o in 0..outer {
        for (d, &(lo, hi, f)) in table.taps.iter().enumerate() {
            let f = T::of(f);
            let a = &src[(o * src_len + lo) * inner..(o * src_len + lo + 1) * inner];
            let b = &src[(o * src_len + hi) * inner..(o * src_len + hi + 1) * inner];
            let dst = &mut out[(o * dst_len + d) * inner..(o * dst_len + d + 1) * inner];
            // a + f·(b − a) is exact whenever a == b
            for ((r, &va), &vb) in dst.iter_mut().zip(a).zip(b) {
                *r = va + f * (vb - va);
            }
        }
    }
    out
}

fn lerp_axis_adjoint<T: Real>(grad: &[T], outer: usize, inner: usize, table: &AxisTable) -> Vec<T> {
    let src_len = table.src_len;
    let dst_len = table.taps.len();
    let mut out = vec![T::zero(); outer * src_len * inner];
    for o in 0..outer {
        for (d, &(lo, hi, f)) in table.taps.iter().enumerate() {
            let f = T::of(f);
            let g = &grad[(o * dst_len + d) * inner..(o * dst_len + d + 1) * inner];
            for (i, &gv) in g.iter().enumerate() {
                out[(o * src_len + lo) * inner + i] += gv * (T::one() - f);
                out[(o * src_len + hi) * inner + i] += gv * f;
            }
        }
    }
    out
}

fn resize_tables(src: [usize; 3], dst: [usize; 3]) -> [AxisTable; 3] {
    [
        AxisTable::new(src[0], dst[0]),
        AxisTable::new(src[1], dst[1]),
        AxisTable::new(src[2], dst[2]),
    ]
}

/// Trilinear resampling of a `[C, X, Y, Z]` volume to `[C, X', Y', Z']`.
pub fn trilinear_resize<T: Real>(x: &Tensor<T>, target: [usize; 3]) -> Result<Tensor<T>> {
    let src = x.spatial()?;
    if target.iter().any(|&t| t == 0) {
        return Err(Error::shape(format!("resize target must be positive, got {target:?}")));
    }
    if src == target {
        return Ok(x.clone());
    }
    let c = x.shape()[0];
    let [tx, ty, tz] = resize_tables(src, target);
    let a = lerp_axis(x.data(), c, src[1] * src[2], &tx);
    let b = lerp_axis(&a, c * target[0], src[2], &ty);
    let out = lerp_axis(&b, c * target[0] * target[1], 1, &tz);
    Ok(Tensor::from_parts(vec![c, target[0], target[1], target[2]], out))
}

pub fn trilinear_resize_backward<T: Real>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let src = [input_shape[1], input_shape[2], input_shape[3]];
    let dst = [grad_out.shape()[1], grad_out.shape()[2], grad_out.shape()[3]];
    if src == dst {
        return grad_out.clone();
    }
    let c = input_shape[0];
    let [tx, ty, tz] = resize_tables(src, dst);
    let b = lerp_axis_adjoint(grad_out.data(), c * dst[0] * dst[1], 1, &tz);
    let a = lerp_axis_adjoint(&b, c * dst[0], src[2], &ty);
    let out = lerp_axis_adjoint(&a, c, src[1] * src[2], &tx);
    Tensor::from_parts(input_shape.to_vec(), out)
}

/// `(1/C) Σ_c w_c · x_c` for `x: [C, ...]`, returned as `[1, ...]`.
pub fn channel_combine<T: Real>(x: &Tensor<T>, weights: &[T]) -> Result<Tensor<T>> {
    let c = x.shape()[0];
    if weights.len() != c {
        return Err(Error::shape(format!(
            "{} channel weights for a {c}-channel activation",
            weights.len()
        )));
    }
    let per = x.len() / c;
    let inv = T::one() / T::of_usize(c);
    let mut out = vec![T::zero(); per];
    for (ch, &w) in weights.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(x.channel(ch)) {
            *o += w * v;
        }
    }
    for o in &mut out {
        *o *= inv;
    }
    let mut shape = x.shape().to_vec();
    shape[0] = 1;
    Ok(Tensor::from_parts(shape, out))
}

pub fn channel_combine_backward<T: Real>(
    input_shape: &[usize],
    weights: &[T],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let c = input_shape[0];
    let inv = T::one() / T::of_usize(c);
    let mut data = Vec::with_capacity(grad_out.len() * c);
    for &w in weights {
        data.extend(grad_out.data().iter().map(|&g| g * w * inv));
    }
    Tensor::from_parts(input_shape.to_vec(), data)
}

/// `Σ g·m / max(Σ g, floor)`: the overlap ratio with a floored denominator.
pub fn masked_ratio<T: Real>(g: &[T], mask: &[T], floor: T) -> T {
    let (inside, total) = masked_sums(g, mask);
    inside / total.max(floor)
}

fn masked_sums<T: Real>(g: &[T], mask: &[T]) -> (T, T) {
    g.iter().zip(mask).fold((T::zero(), T::zero()), |(i, t), (&v, &m)| (i + v * m, t + v))
}

pub fn masked_ratio_backward<T: Real>(g: &[T], mask: &[T], floor: T, upstream: T) -> Vec<T> {
    let (inside, total) = masked_sums(g, mask);
    if total > floor {
        let s = inside / total;
        mask.iter().map(|&m| upstream * (m - s) / total).collect()
    } else {
        mask.iter().map(|&m| upstream * m / floor).collect()
    }
}
