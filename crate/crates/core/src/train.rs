//! Mini-batch Adam training with early stopping on validation accuracy.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcamo::{regularized_loss, Example};
use crate::model::{Adam, MiniCnn3d};
use crate::volume::{augment, fit_to_shape, normalize, rescale, CellCrop, ChannelStats};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epochs without a strict validation improvement before stopping.
    pub patience: usize,
    pub lambda: f64,
    pub seed: u64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch: 8,
            epochs: 10,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            patience: 3,
            lambda: 0.0,
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch size must be ≥ 1"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be ≥ 1"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid(format!("regularizer weight must be ≥ 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_acc: f64,
    pub val_acc: f64,
    pub loss: f64,
    pub mean_gradcamo: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights from the epoch with the best validation accuracy.
    pub model: MiniCnn3d<f32>,
    pub stats: ChannelStats,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

/// Resamples to the model's input shape and rescales each channel to [0, 1].
pub fn prepare(crops: &[CellCrop], input: [usize; 3]) -> Result<Vec<CellCrop>> {
    crops.iter().map(|c| fit_to_shape(c, input).map(|c| rescale(&c))).collect()
}

/// Full inference preprocessing: prepare, then normalize with `stats`.
pub fn preprocess_all(crops: &[CellCrop], input: [usize; 3], stats: &ChannelStats) -> Result<Vec<CellCrop>> {
    prepare(crops, input)?.iter().map(|c| normalize(c, stats)).collect()
}

/// Fraction of crops whose predicted class equals the label.
pub fn accuracy(model: &MiniCnn3d<f32>, crops: &[CellCrop]) -> Result<f64> {
    if crops.is_empty() {
        return Ok(0.0);
    }
    let hit = |c: &CellCrop| -> Result<bool> { Ok(model.predict(&c.volume)?.class == c.label) };
    #[cfg(feature = "parallel")]
    let hits: Vec<bool> = {
        use rayon::prelude::*;
        crops.par_iter().map(hit).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let hits: Vec<bool> = crops.iter().map(hit).collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / crops.len() as f64)
}

fn mix(seed: u64, epoch: usize, index: usize) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = seed ^ ((epoch as u64) << 40) ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Trains `model` on raw crops. Crops are resized, rescaled, optionally
/// augmented, then normalized with statistics fitted on the training set.
pub fn train(
    mut model: MiniCnn3d<f32>,
    train_crops: &[CellCrop],
    val_crops: &[CellCrop],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_crops.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    if val_crops.is_empty() {
        return Err(Error::invalid("validation split is empty"));
    }
    let classes = model.arch.classes;
    if let Some(c) = train_crops.iter().chain(val_crops).find(|c| c.label >= classes) {
        return Err(Error::invalid(format!("cell {} has label {} but the model has {classes} classes", c.cell_id, c.label)));
    }
    let input = model.arch.input;
    let train_set = prepare(train_crops, input)?;
    let stats = ChannelStats::fit(&train_set)?;
    let val_set: Vec<CellCrop> = prepare(val_crops, input)?.iter().map(|c| normalize(c, &stats)).collect::<Result<_>>()?;

    let mut adam = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (model.clone(), 0usize, f64::NEG_INFINITY);
    let mut stale = 0usize;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut s_sum, mut correct) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let inputs: Vec<CellCrop> = chunk
                .iter()
                .map(|&i| {
                    let c = &train_set[i];
                    let c = if cfg.augment { augment(c, mix(cfg.seed, epoch, i)) } else { c.clone() };
                    normalize(&c, &stats)
                })
                .collect::<Result<_>>()?;
            let batch: Vec<Example<'_, f32>> =
                inputs.iter().map(|c| Example { input: &c.volume, mask: &c.mask, label: c.label }).collect();
            let out = regularized_loss(&model, &batch, cfg.lambda)?;
            let w = chunk.len() as f64;
            loss_sum += out.loss * w;
            s_sum += out.gradcamo.unwrap_or(0.0) * w;
            correct += out.correct;
            adam.step(&mut model.params, &out.grads);
        }
        model
            .check_finite()
            .map_err(|e| Error::invalid(format!("training diverged in epoch {epoch}: {e}")))?;
        let n = train_set.len() as f64;
        let val_acc = accuracy(&model, &val_set)?;
        let stats_row = EpochStats {
            epoch,
            train_acc: correct as f64 / n,
            val_acc,
            loss: loss_sum / n,
            mean_gradcamo: (cfg.lambda > 0.0).then_some(s_sum / n),
        };
        on_epoch(&stats_row);
        history.push(stats_row);
        if val_acc > best.2 {
            best = (model.clone(), epoch, val_acc);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (model, best_epoch, best_val_acc) = best;
    Ok(TrainOutcome { model, stats, history, best_epoch, best_val_acc })
}

pub fn write_history(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let io = |e: csv::Error| Error::io(path, e.into());
    w.write_record(["epoch", "train_acc", "val_acc", "loss", "mean_gradcamo"]).map_err(io)?;
    for h in history {
        w.write_record([
            h.epoch.to_string(),
            format!("{:.6}", h.train_acc),
            format!("{:.6}", h.val_acc),
            format!("{:.6}", h.loss),
            h.mean_gradcamo.map(|s| format!("{s:.6}")).unwrap_or_default(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
