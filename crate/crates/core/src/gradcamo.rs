//! Grad-CAMO: the fraction of a localization map's mass inside the cell mask.
//!
//! Also hosts dataset auditing, score-based feature filtering, and the
//! differentiable overlap term used as a training regularizer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::gradcam::{channel_weights, gradcam_for_cell};
use crate::model::MiniCnn3d;
use crate::tape::Tape;
use crate::tensor::{Real, Tensor};
use crate::volume::{BinaryMask, CellCrop};

pub const DEFAULT_CUTOFF: f64 = 0.25;
/// Denominator floor of the differentiable overlap term.
pub const RATIO_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overlap {
    pub score: f64,
    /// The map was identically zero; `score` is 0 by convention.
    pub degenerate: bool,
}

/// `Σ G·M / Σ G` for a non-negative map `G` and binary mask `M` of the same
/// spatial shape. Sums accumulate in f64.
pub fn gradcamo_score<T: Real>(map: &Tensor<T>, mask: &BinaryMask) -> Result<Overlap> {
    let dims: &[usize] = match map.shape() {
        [1, rest @ ..] if rest.len() == 3 => rest,
        s => s,
    };
    if dims != mask.dims {
        return Err(Error::shape(format!("map shape {dims:?} differs from mask shape {:?}", mask.dims)));
    }
    let mut inside = 0.0f64;
    let mut total = 0.0f64;
    for (&g, &m) in map.data().iter().zip(&mask.data) {
        let g = g.as_f64();
        if !(g >= 0.0) {
            return Err(Error::invalid(format!("localization map has a negative or NaN value {g}")));
        }
        total += g;
        if m == 1 {
            inside += g;
        }
    }
    if total == 0.0 {
        return Ok(Overlap { score: 0.0, degenerate: true });
    }
    Ok(Overlap { score: (inside / total).clamp(0.0, 1.0), degenerate: false })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub cell_id: String,
    pub label: usize,
    pub pred: usize,
    /// Softmax probability of the predicted class.
    pub prob: f64,
    pub gradcamo: f64,
    pub degenerate: bool,
    pub keep: bool,
    pub well: String,
    pub site: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Fraction of cells with score ≥ cutoff.
    pub frac_kept: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub cutoff: f64,
    pub overall: GroupStats,
    /// Keyed `dose=<d>/site=<s>`.
    pub by_dose_site: BTreeMap<String, GroupStats>,
    pub by_dose: BTreeMap<String, GroupStats>,
    pub by_well: BTreeMap<String, GroupStats>,
}

fn group_stats(records: &[&ScoreRecord], cutoff: f64) -> GroupStats {
    let n = records.len();
    if n == 0 {
        return GroupStats { count: 0, mean: 0.0, std: 0.0, frac_kept: 0.0, accuracy: 0.0 };
    }
    let nf = n as f64;
    let mean = records.iter().map(|r| r.gradcamo).sum::<f64>() / nf;
    let var = records.iter().map(|r| (r.gradcamo - mean).powi(2)).sum::<f64>() / nf;
    let kept = records.iter().filter(|r| r.gradcamo >= cutoff).count();
    let correct = records.iter().filter(|r| r.pred == r.label).count();
    GroupStats { count: n, mean, std: var.sqrt(), frac_kept: kept as f64 / nf, accuracy: correct as f64 / nf }
}

/// Aggregates records into overall and grouped statistics. Records are
/// sorted by cell id first, so the result is independent of input order.
pub fn summarize(records: &[ScoreRecord], cutoff: f64) -> AuditSummary {
    let mut sorted: Vec<&ScoreRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.cell_id.cmp(&b.cell_id));
    let mut dose_site: BTreeMap<String, Vec<&ScoreRecord>> = BTreeMap::new();
    let mut dose: BTreeMap<String, Vec<&ScoreRecord>> = BTreeMap::new();
    let mut well: BTreeMap<String, Vec<&ScoreRecord>> = BTreeMap::new();
    for r in &sorted {
        dose_site.entry(format!("dose={}/site={}", r.label, r.site)).or_default().push(r);
        dose.entry(format!("dose={}", r.label)).or_default().push(r);
        well.entry(r.well.clone()).or_default().push(r);
    }
    let reduce = |m: BTreeMap<String, Vec<&ScoreRecord>>| {
        m.into_iter().map(|(k, v)| (k, group_stats(&v, cutoff))).collect()
    };
    AuditSummary {
        cutoff,
        overall: group_stats(&sorted, cutoff),
        by_dose_site: reduce(dose_site),
        by_dose: reduce(dose),
        by_well: reduce(well),
    }
}

/// Scores one preprocessed crop (already at the model's input shape).
pub fn score_cell(model: &MiniCnn3d<f32>, crop: &CellCrop, cutoff: f64) -> Result<ScoreRecord> {
    let map = gradcam_for_cell(model, &crop.volume, None)?;
    let overlap = gradcamo_score(&map.full, &crop.mask)?;
    Ok(ScoreRecord {
        cell_id: crop.cell_id.clone(),
        label: crop.label,
        pred: map.predicted,
        prob: map.probs[map.predicted],
        gradcamo: overlap.score,
        degenerate: overlap.degenerate,
        keep: overlap.score >= cutoff,
        well: crop.well.clone(),
        site: crop.site,
    })
}

/// One record per cell plus the grouped summary. Crops must be preprocessed
/// and at the model's input shape.
pub fn audit(model: &MiniCnn3d<f32>, crops: &[CellCrop], cutoff: f64) -> Result<(Vec<ScoreRecord>, AuditSummary)> {
    #[cfg(feature = "parallel")]
    let records: Vec<ScoreRecord> = {
        use rayon::prelude::*;
        crops.par_iter().map(|c| score_cell(model, c, cutoff)).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let records: Vec<ScoreRecord> = crops.iter().map(|c| score_cell(model, c, cutoff)).collect::<Result<_>>()?;
    let summary = summarize(&records, cutoff);
    Ok((records, summary))
}

/// Keeps the feature rows whose cell scored at least `cutoff`, in order.
pub fn filter_features(features: &FeatureMatrix, records: &[ScoreRecord], cutoff: f64) -> Result<FeatureMatrix> {
    let by_id: BTreeMap<&str, &ScoreRecord> = records.iter().map(|r| (r.cell_id.as_str(), r)).collect();
    let mut keep = Vec::with_capacity(features.rows());
    for id in &features.cell_ids {
        let r = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::invalid(format!("no score record for cell {id}")))?;
        keep.push(r.gradcamo >= cutoff);
    }
    Ok(features.select(&keep))
}

/// Loss terms of one batch and the parameter gradients of the mean loss.
#[derive(Debug, Clone)]
pub struct BatchLoss<T> {
    /// `mean CE − λ · mean overlap`.
    pub loss: f64,
    pub cross_entropy: f64,
    /// Mean differentiable overlap; `None` when λ = 0.
    pub gradcamo: Option<f64>,
    pub correct: usize,
    pub grads: Vec<Tensor<T>>,
}

/// One training example: preprocessed input, its mask, and the class label.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a, T> {
    pub input: &'a Tensor<T>,
    pub mask: &'a BinaryMask,
    pub label: usize,
}

/// Cross-entropy minus `λ` times a differentiable Grad-CAMO term.
///
/// The overlap term uses the label's logit for the channel weights and holds
/// those weights fixed; gradients flow through the activation, the
/// upsampling and the overlap ratio (denominator floored at
/// [`RATIO_FLOOR`]).
pub fn regularized_loss<T: Real>(model: &MiniCnn3d<T>, batch: &[Example<'_, T>], lambda: f64) -> Result<BatchLoss<T>> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("regularizer weight must be ≥ 0, got {lambda}")));
    }
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let inv = 1.0 / batch.len() as f64;
    let mut grads: Vec<Tensor<T>> = model.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    let (mut ce_sum, mut s_sum, mut correct) = (0.0, 0.0, 0usize);
    for ex in batch {
        let mut tape = Tape::new();
        let g = model.build(&mut tape, ex.input.clone(), true)?;
        if crate::model::argmax(tape.value(g.logits).data()) == ex.label {
            correct += 1;
        }
        let ce = tape.softmax_cross_entropy(g.logits, ex.label)?;
        ce_sum += tape.value(ce).item().as_f64();
        let loss = if lambda > 0.0 {
            let s = overlap_node(&mut tape, &g, ex)?;
            s_sum += tape.value(s).item().as_f64();
            let scaled = tape.scale(s, T::of(-lambda));
            tape.add(ce, scaled)?
        } else {
            ce
        };
        tape.backward(loss)?;
        for (acc, &p) in grads.iter_mut().zip(&g.params) {
            if let Some(d) = tape.grad(p) {
                acc.add_assign(d);
            }
        }
    }
    for gr in &mut grads {
        gr.scale(T::of(inv));
    }
    let cross_entropy = ce_sum * inv;
    let gradcamo = (lambda > 0.0).then_some(s_sum * inv);
    Ok(BatchLoss {
        loss: cross_entropy - lambda * gradcamo.unwrap_or(0.0),
        cross_entropy,
        gradcamo,
        correct,
        grads,
    })
}

fn overlap_node<T: Real>(tape: &mut Tape<T>, g: &crate::model::Graph, ex: &Example<'_, T>) -> Result<crate::tape::Var> {
    let target = tape.value(g.input).spatial()?;
    if ex.mask.dims != target {
        return Err(Error::shape(format!("mask {:?} does not match input {target:?}", ex.mask.dims)));
    }
    let score = tape.select(g.logits, ex.label)?;
    let weights = channel_weights(tape, g.activation, score)?;
    tape.zero_grad();
    overlap_with_weights(tape, g.activation, weights, target, ex.mask)
}

/// Records `relu(combine(A, w)) → resize → overlap ratio` with fixed weights.
pub fn overlap_with_weights<T: Real>(
    tape: &mut Tape<T>,
    activation: crate::tape::Var,
    weights: Vec<T>,
    target: [usize; 3],
    mask: &BinaryMask,
) -> Result<crate::tape::Var> {
    let pre = tape.channel_combine(activation, weights)?;
    let coarse = tape.relu(pre);
    let full = tape.trilinear_resize(coarse, target)?;
    tape.masked_ratio(full, mask.as_floats(), T::of(RATIO_FLOOR))
}
