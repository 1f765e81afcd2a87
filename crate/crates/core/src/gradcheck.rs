//! Central finite differences for validating analytic gradients.
//!
//! Only the forward function is evaluated here, so the numeric side of a
//! check never shares a code path with the backward sweep it validates.

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tolerance: f64,
    /// Gradients smaller than this in both estimates compare absolutely.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, rel_tolerance: 1e-3, abs_floor: 1e-7 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, cfg: &GradCheckConfig) -> bool {
        self.max_rel_error < cfg.rel_tolerance
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Numeric gradient of scalar `f` at `x` by central differences.
pub fn numeric_gradient(
    x: &Tensor<f64>,
    step: f64,
    mut f: impl FnMut(&Tensor<f64>) -> f64,
) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// Compares an analytic gradient against central differences of `f`.
///
/// `indices` restricts the check to a subset of coordinates (all when `None`),
/// which keeps whole-model checks affordable.
pub fn check_gradient(
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    indices: Option<&[usize]>,
    cfg: &GradCheckConfig,
    mut f: impl FnMut(&Tensor<f64>) -> f64,
) -> GradCheckReport {
    assert_eq!(x.shape(), analytic.shape());
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for &i in idx {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + cfg.step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - cfg.step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * cfg.step);
        worst = worst.max(relative_error(analytic.data()[i], numeric, cfg.abs_floor));
    }
    GradCheckReport { max_rel_error: worst, checked: idx.len() }
}
