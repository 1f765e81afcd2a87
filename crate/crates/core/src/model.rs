//! MiniCNN3D: a small volumetric classifier split into a convolutional
//! backbone and a linear head.
//!
//! Every block is conv → relu; the first `pools` blocks end in a 2×2×2 max
//! pool. The last block's output is the designated activation `A`. The head is global average
//! pooling followed by a linear layer, so pooled `A` is also the feature
//! vector of a cell.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::tape::{Tape, Var};
use crate::tbf;
use crate::tensor::{Real, Tensor};
use crate::volume::ChannelStats;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub in_channels: usize,
    pub classes: usize,
    pub widths: Vec<usize>,
    /// Number of leading blocks followed by a max pool.
    pub pools: usize,
    /// Spatial input shape `[X, Y, Z]`; crops are resized to it.
    pub input: [usize; 3],
}

impl Architecture {
    pub fn new(in_channels: usize, classes: usize, input: [usize; 3]) -> Self {
        Self { in_channels, classes, widths: vec![8, 16, 32, 64], pools: 2, input }
    }

    /// Spatial extents must be divisible by this.
    pub fn downsampling(&self) -> usize {
        1 << self.pools
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("at least one block")
    }

    pub fn activation_shape(&self) -> [usize; 4] {
        let f = self.downsampling();
        [self.feature_dim(), self.input[0] / f, self.input[1] / f, self.input[2] / f]
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.in_channels == 0 || self.classes < 2 {
            return Err(Error::invalid("architecture needs ≥1 block, ≥1 input channel and ≥2 classes"));
        }
        if self.pools > self.widths.len() {
            return Err(Error::invalid(format!("{} pools for {} blocks", self.pools, self.widths.len())));
        }
        self.check_input(self.input)
    }

    pub fn check_input(&self, dims: [usize; 3]) -> Result<()> {
        let f = self.downsampling();
        if dims.iter().any(|&d| d == 0 || d % f != 0) {
            return Err(Error::shape(format!(
                "input extents {dims:?} must be divisible by {f}; resize crops to a multiple of {f} first"
            )));
        }
        Ok(())
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.widths.len() {
            names.push(format!("conv{}_kernel", i + 1));
            names.push(format!("conv{}_bias", i + 1));
        }
        names.push("head_weight".into());
        names.push("head_bias".into());
        names
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut c_in = self.in_channels;
        for &w in &self.widths {
            shapes.push(vec![w, c_in, 3, 3, 3]);
            shapes.push(vec![w]);
            c_in = w;
        }
        shapes.push(vec![self.classes, c_in]);
        shapes.push(vec![self.classes]);
        shapes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniCnn3d<T> {
    pub arch: Architecture,
    /// Ordered as [`Architecture::param_names`].
    pub params: Vec<Tensor<T>>,
}

/// Node handles of one forward pass.
#[derive(Debug, Clone)]
pub struct Graph {
    pub params: Vec<Var>,
    pub input: Var,
    pub activation: Var,
    pub features: Var,
    pub logits: Var,
}

impl<T: Real> MiniCnn3d<T> {
    /// He-normal conv kernels, zero biases, small Gaussian head.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = arch.param_shapes();
        let n_conv = arch.widths.len();
        let params = shapes
            .iter()
            .enumerate()
            .map(|(i, shape)| {
                let n: usize = shape.iter().product();
                let std = if i == 2 * n_conv {
                    (1.0 / shape[1] as f64).sqrt()
                } else if shape.len() == 5 {
                    (2.0 / (shape[1] * 27) as f64).sqrt()
                } else {
                    return Tensor::zeros(shape);
                };
                let dist = Normal::new(0.0, std).expect("positive std");
                Tensor::from_parts(shape.clone(), (0..n).map(|_| T::of(dist.sample(&mut rng))).collect())
            })
            .collect();
        Ok(Self { arch, params })
    }

    pub fn head_weight(&self) -> &Tensor<T> {
        &self.params[2 * self.arch.widths.len()]
    }

    pub fn head_weight_mut(&mut self) -> &mut Tensor<T> {
        let i = 2 * self.arch.widths.len();
        &mut self.params[i]
    }

    pub fn head_bias_mut(&mut self) -> &mut Tensor<T> {
        let i = 2 * self.arch.widths.len() + 1;
        &mut self.params[i]
    }

    pub fn cast<U: Real>(&self) -> MiniCnn3d<U> {
        MiniCnn3d { arch: self.arch.clone(), params: self.params.iter().map(Tensor::cast).collect() }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, p) in self.arch.param_names().iter().zip(&self.params) {
            if !p.all_finite() {
                return Err(Error::invalid(format!("parameter {name} became non-finite")));
            }
        }
        Ok(())
    }

    /// Records a forward pass on `tape`. Parameters are trainable leaves when
    /// `trainable` is set, constants otherwise.
    pub fn build(&self, tape: &mut Tape<T>, input: Tensor<T>, trainable: bool) -> Result<Graph> {
        match input.shape() {
            &[c, x, y, z] if c == self.arch.in_channels => self.arch.check_input([x, y, z])?,
            s => {
                return Err(Error::shape(format!(
                    "model expects [{}, X, Y, Z] input, got {s:?}",
                    self.arch.in_channels
                )))
            }
        }
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| if trainable { tape.variable(p.clone()) } else { tape.constant(p.clone()) })
            .collect();
        let input = tape.constant(input);
        let n = self.arch.widths.len();
        let mut h = input;
        for b in 0..n {
            h = tape.conv3d(h, params[2 * b], params[2 * b + 1])?;
            h = tape.relu(h);
            if b < self.arch.pools {
                h = tape.maxpool3d(h)?;
            }
        }
        let activation = h;
        let features = tape.global_avg_pool(activation);
        let logits = tape.linear(features, params[2 * n], params[2 * n + 1])?;
        Ok(Graph { params, input, activation, features, logits })
    }

    /// Class scores (pre-softmax) and the designated activation `A`.
    pub fn forward(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let g = self.build(&mut tape, input.clone(), false)?;
        Ok((tape.value(g.logits).clone(), tape.value(g.activation).clone()))
    }

    /// Pooled activation: the cell's feature vector.
    pub fn features(&self, input: &Tensor<T>) -> Result<Vec<T>> {
        let (_, a) = self.forward(input)?;
        Ok(ops::global_avg_pool(&a).into_data())
    }

    pub fn predict(&self, input: &Tensor<T>) -> Result<Prediction> {
        let (logits, _) = self.forward(input)?;
        Ok(Prediction::from_logits(logits.data()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub probs: Vec<f64>,
}

impl Prediction {
    /// Argmax of the softmax; ties go to the lowest class index.
    pub fn from_logits<T: Real>(logits: &[T]) -> Self {
        let probs: Vec<f64> = ops::softmax(logits).into_iter().map(Real::as_f64).collect();
        let class = argmax(logits);
        Self { class, probs }
    }

    pub fn confidence(&self) -> f64 {
        self.probs[self.class]
    }
}

pub fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step<T: Real>(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for ((w, &gi), (m, v)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(self.m[i].iter_mut().zip(self.v[i].iter_mut()))
            {
                let gi = gi.as_f64();
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                let update = self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *w = T::of(w.as_f64() - update);
            }
        }
    }
}

/// On-disk checkpoint descriptor; parameters live next to it as TBF files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub architecture: Architecture,
    pub params: Vec<String>,
    /// Training-set statistics used to normalize inputs.
    pub stats: ChannelStats,
    pub train_config: Option<serde_json::Value>,
}

pub fn save_checkpoint(
    dir: &Path,
    model: &MiniCnn3d<f32>,
    stats: &ChannelStats,
    train_config: Option<serde_json::Value>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let names = model.arch.param_names();
    for (name, p) in names.iter().zip(&model.params) {
        tbf::write_f32(&dir.join(format!("{name}.tbf")), p)?;
    }
    let meta = CheckpointMeta {
        architecture: model.arch.clone(),
        params: names.iter().map(|n| format!("{n}.tbf")).collect(),
        stats: stats.clone(),
        train_config,
    };
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    let path = dir.join("model.json");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(MiniCnn3d<f32>, CheckpointMeta)> {
    let path = dir.join("model.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    meta.architecture.validate()?;
    let shapes = meta.architecture.param_shapes();
    if meta.params.len() != shapes.len() {
        return Err(Error::invalid(format!(
            "checkpoint lists {} parameters, architecture has {}",
            meta.params.len(),
            shapes.len()
        )));
    }
    let params = meta
        .params
        .iter()
        .zip(&shapes)
        .map(|(file, shape)| {
            let p = tbf::read_f32(&dir.join(file))?;
            if p.shape() != shape.as_slice() {
                return Err(Error::shape(format!("{file}: expected {shape:?}, found {:?}", p.shape())));
            }
            Ok(p)
        })
        .collect::<Result<_>>()?;
    Ok((MiniCnn3d { arch: meta.architecture.clone(), params }, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> MiniCnn3d<f64> {
        let arch = Architecture { in_channels: 2, classes: 3, widths: vec![2, 3], pools: 1, input: [4, 4, 2] };
        MiniCnn3d::new(arch, 1).unwrap()
    }

    #[test]
    fn activation_shape_for_desk_input() {
        let arch = Architecture::new(3, 6, [32, 32, 16]);
        assert_eq!(arch.activation_shape(), [64, 8, 8, 4]);
        let m = MiniCnn3d::<f32>::new(arch, 0).unwrap();
        let x = Tensor::full(&[3, 32, 32, 16], 0.1);
        let (logits, a) = m.forward(&x).unwrap();
        assert_eq!(a.shape(), &[64, 8, 8, 4]);
        assert_eq!(logits.shape(), &[6]);
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let m = tiny();
        let err = m.forward(&Tensor::zeros(&[2, 3, 4, 2])).unwrap_err();
        assert!(err.to_string().contains("divisible"), "{err}");
    }

    #[test]
    fn zero_head_gives_uniform_softmax() {
        let mut m = tiny();
        m.head_weight_mut().data_mut().fill(0.0);
        let p = m.predict(&Tensor::full(&[2, 4, 4, 2], 0.3)).unwrap();
        assert!(p.probs.iter().all(|&q| (q - 1.0 / 3.0).abs() < 1e-12));
        assert_eq!(p.class, 0);
    }

    #[test]
    fn flip_changes_logits() {
        let m = tiny();
        let x = Tensor::from_vec(&[2, 4, 4, 2], (0..64).map(|i| ((i * 7) % 13) as f64 / 13.0).collect()).unwrap();
        let mut flipped = x.clone();
        for c in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    for k in 0..2 {
                        let dst = ((c * 4 + i) * 4 + j) * 2 + k;
                        let src = ((c * 4 + (3 - i)) * 4 + j) * 2 + k;
                        flipped.data_mut()[dst] = x.data()[src];
                    }
                }
            }
        }
        let (a, _) = m.forward(&x).unwrap();
        let (b, _) = m.forward(&flipped).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn prediction_tie_and_saturation() {
        let p = Prediction::from_logits(&[0.0f64, 0.0, 0.0]);
        assert_eq!(p.class, 0);
        let p = Prediction::from_logits(&[0.0f64, 0.0, 0.0, 50.0, 0.0]);
        assert_eq!(p.class, 3);
        assert!(p.confidence() > 1.0 - 1e-12);
        assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn features_equal_pooled_activation() {
        let m = tiny();
        let x = Tensor::from_vec(&[2, 4, 4, 2], (0..64).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let f = m.features(&x).unwrap();
        let (_, a) = m.forward(&x).unwrap();
        assert_eq!(f, ops::global_avg_pool(&a).into_data());
        assert_eq!(m.features(&x).unwrap(), f);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = MiniCnn3d::<f32>::new(Architecture::new(1, 2, [8, 8, 8]), 5).unwrap();
        let stats = ChannelStats::identity(1);
        save_checkpoint(dir.path(), &m, &stats, None).unwrap();
        let (back, meta) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta.stats, stats);
    }
}
