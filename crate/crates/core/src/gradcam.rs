//! Grad-CAM localization maps.
//!
//! Channel weights are the spatial mean of `∂Y_k/∂A_c`, where `Y_k` is the
//! pre-softmax score of class `k`. The coarse map is
//! `relu((1/C') Σ_c w_c A_c)`, upsampled trilinearly to the crop shape.

use crate::error::{Error, Result};
use crate::model::{argmax, MiniCnn3d};
use crate::ops;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationMap<T> {
    /// `[H, W, D]`, same grid as the activation.
    pub coarse: Tensor<T>,
    /// `[X, Y, Z]`, the crop's spatial shape.
    pub full: Tensor<T>,
    pub class: usize,
    pub weights: Vec<T>,
    /// Model prediction for the cell (independent of any class override).
    pub predicted: usize,
    pub probs: Vec<f64>,
}

/// Spatial mean of the gradient of `score` with respect to `activation`.
/// Runs a backward sweep that stops at `activation`.
pub fn channel_weights<T: Real>(tape: &mut Tape<T>, activation: Var, score: Var) -> Result<Vec<T>> {
    tape.backward_until(score, activation)?;
    let grad = tape.grad(activation).ok_or_else(|| {
        Error::invalid("no gradient reached the activation; the graph was recorded without differentiable parameters")
    })?;
    Ok(ops::global_avg_pool(grad).into_data())
}

/// Coarse and upsampled maps from an activation `[C', H, W, D]` and weights.
pub fn localization_map<T: Real>(
    activation: &Tensor<T>,
    weights: &[T],
    target: [usize; 3],
) -> Result<(Tensor<T>, Tensor<T>)> {
    let coarse = ops::relu(&ops::channel_combine(activation, weights)?);
    let full = ops::trilinear_resize(&coarse, target)?;
    let strip = |t: Tensor<T>| {
        let s = t.shape()[1..].to_vec();
        t.reshape(&s)
    };
    Ok((strip(coarse)?, strip(full)?))
}

/// Grad-CAM for one preprocessed input `[C, X, Y, Z]`. Uses the predicted
/// class unless `class` overrides it.
pub fn gradcam_for_cell<T: Real>(
    model: &MiniCnn3d<T>,
    input: &Tensor<T>,
    class: Option<usize>,
) -> Result<LocalizationMap<T>> {
    let target = input.spatial()?;
    let mut tape = Tape::new();
    let g = model.build(&mut tape, input.clone(), true)?;
    let logits = tape.value(g.logits).data().to_vec();
    let predicted = argmax(&logits);
    let class = class.unwrap_or(predicted);
    if class >= logits.len() {
        return Err(Error::invalid(format!("class {class} out of range for {} classes", logits.len())));
    }
    let score = tape.select(g.logits, class)?;
    let weights = channel_weights(&mut tape, g.activation, score)?;
    let (coarse, full) = localization_map(tape.value(g.activation), &weights, target)?;
    let probs = ops::softmax(&logits).into_iter().map(Real::as_f64).collect();
    Ok(LocalizationMap { coarse, full, class, weights, predicted, probs })
}

/// Classical CAM for a GAP → linear head: `relu(Σ_c W[k, c] · A_c)`.
pub fn class_activation_map<T: Real>(activation: &Tensor<T>, head_weight: &Tensor<T>, class: usize) -> Result<Tensor<T>> {
    let c = activation.shape()[0];
    let row = head_weight.data()[class * c..(class + 1) * c].to_vec();
    // channel_combine divides by C'; undo it so this is the textbook CAM
    let mut m = ops::channel_combine(activation, &row)?;
    m.scale(T::of_usize(c));
    let s = m.shape()[1..].to_vec();
    ops::relu(&m).reshape(&s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;

    fn tiny() -> MiniCnn3d<f64> {
        let arch = Architecture { in_channels: 1, classes: 3, widths: vec![3, 4], pools: 1, input: [4, 4, 2] };
        MiniCnn3d::new(arch, 9).unwrap()
    }

    fn input() -> Tensor<f64> {
        Tensor::from_vec(&[1, 4, 4, 2], (0..32).map(|i| ((i * 5) % 7) as f64 / 7.0 - 0.3).collect()).unwrap()
    }

    #[test]
    fn weights_equal_head_row_over_area() {
        // GAP → linear: ∂Y_k/∂A_c(x) = W[k,c]/(HWD) everywhere, so the
        // spatial mean is W[k,c]/(HWD)
        let m = tiny();
        let map = gradcam_for_cell(&m, &input(), Some(1)).unwrap();
        let area = 2.0 * 2.0 * 1.0;
        for (c, &w) in map.weights.iter().enumerate() {
            let expected = m.head_weight().data()[4 + c] / area;
            assert!((w - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn doubling_head_row_doubles_weights() {
        let m = tiny();
        let a = gradcam_for_cell(&m, &input(), Some(2)).unwrap();
        let mut m2 = m.clone();
        for v in &mut m2.head_weight_mut().data_mut()[8..12] {
            *v *= 2.0;
        }
        let b = gradcam_for_cell(&m2, &input(), Some(2)).unwrap();
        for (x, y) in a.weights.iter().zip(&b.weights) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_head_weight_gives_zero_channel_weight() {
        let mut m = tiny();
        m.head_weight_mut().data_mut()[0] = 0.0;
        let map = gradcam_for_cell(&m, &input(), Some(0)).unwrap();
        assert_eq!(map.weights[0], 0.0);
    }

    #[test]
    fn map_shapes_and_sign() {
        let map = gradcam_for_cell(&tiny(), &input(), None).unwrap();
        assert_eq!(map.full.shape(), &[4, 4, 2]);
        assert_eq!(map.coarse.shape(), &[2, 2, 1]);
        assert!(map.full.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn negative_weights_on_positive_activation_annihilate() {
        let a = Tensor::from_vec(&[2, 2, 2, 1], vec![1.0f64, 2.0, 0.5, 0.0, 3.0, 0.1, 0.0, 1.0]).unwrap();
        let (coarse, full) = localization_map(&a, &[-1.0, 0.0], [4, 4, 2]).unwrap();
        assert!(coarse.data().iter().all(|&v| v == 0.0));
        assert!(full.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_channel_unit_weight_is_relu() {
        let a = Tensor::from_vec(&[1, 2, 2, 1], vec![1.0f64, -2.0, 0.5, 0.0]).unwrap();
        let (coarse, _) = localization_map(&a, &[1.0], [2, 2, 1]).unwrap();
        assert_eq!(coarse.data(), &[1.0, 0.0, 0.5, 0.0]);
    }

    #[test]
    fn inference_graph_has_no_gradient() {
        let m = tiny();
        let mut tape = Tape::new();
        let g = m.build(&mut tape, input(), false).unwrap();
        let s = tape.select(g.logits, 0).unwrap();
        assert!(channel_weights(&mut tape, g.activation, s).is_err());
    }
}
