//! Training objective: focal classification loss, focal + L1 segmentation
//! loss on the patch grid, and the patch alignment hinge.
//!
//! Every loss returns its value together with the gradient with respect to
//! its continuous inputs; the trainer chains these by hand.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::Mask;
use crate::scoring::normalize_rows;

const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub focal_gamma: f64,
    /// Positive-class weight of the segmentation focal term (negatives get
    /// `1 - alpha`); `None` weighs both classes by 1.
    pub seg_alpha: Option<f64>,
    /// Same, for the image-level classification term.
    pub cls_alpha: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            focal_gamma: 2.0,
            seg_alpha: Some(0.25),
            cls_alpha: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::config("focal gamma must be non-negative"));
        }
        for a in [self.seg_alpha, self.cls_alpha].into_iter().flatten() {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::config(format!("focal alpha {a} must lie in (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Binary focal loss `-α_t (1 - p_t)^γ log p_t` and its derivative in `p`.
pub fn focal_term(p: f64, target: bool, gamma: f64, alpha: Option<f64>) -> (f64, f64) {
    let (q, dq) = if target { (p, 1.0) } else { (1.0 - p, -1.0) };
    let weight = match alpha {
        None => 1.0,
        Some(a) if target => a,
        Some(a) => 1.0 - a,
    };
    let one_minus = (1.0 - q).max(0.0);
    let clamped = q.max(LOG_EPS);
    let log_q = clamped.ln();
    let modulator = one_minus.powf(gamma);
    let value = -weight * modulator * log_q;
    let d_modulator = if gamma == 0.0 || one_minus == 0.0 {
        0.0
    } else {
        -gamma * one_minus.powf(gamma - 1.0)
    };
    let d_log = if q > LOG_EPS { 1.0 / q } else { 0.0 };
    let d_q = -weight * (d_modulator * log_q + modulator * d_log);
    (value, d_q * dq)
}

pub fn classification_loss(p_cls: f64, label: bool, config: &LossConfig) -> (f64, f64) {
    focal_term(p_cls, label, config.focal_gamma, config.cls_alpha)
}

/// Block max-pooling of a native-resolution mask onto an `h × w` grid.
/// Cells cover every native pixel they overlap, so no positive is dropped.
pub fn resize_mask(mask: &Mask, h: usize, w: usize) -> Array2<f64> {
    let (mh, mw) = (mask.height(), mask.width());
    let span = |cell: usize, cells: usize, native: usize| {
        let lo = cell * native / cells;
        let hi = ((cell + 1) * native).div_ceil(cells).max(lo + 1).min(native);
        lo..hi
    };
    Array2::from_shape_fn((h, w), |(y, x)| {
        let rows = span(y, h, mh);
        let cols = span(x, w, mw);
        let hit = rows.into_iter().any(|r| cols.clone().any(|c| mask.data[[r, c]]));
        if hit {
            1.0
        } else {
            0.0
        }
    })
}

/// Mean per-pixel focal loss plus mean absolute error, with the gradient
/// with respect to `probs`.
pub fn segmentation_loss(probs: ArrayView2<f64>, targets: ArrayView2<f64>, config: &LossConfig) -> Result<(f64, Array2<f64>)> {
    if probs.dim() != targets.dim() {
        return Err(Error::config(format!(
            "segmentation shapes differ: {:?} vs {:?}",
            probs.dim(),
            targets.dim()
        )));
    }
    let n = probs.len() as f64;
    let mut total = 0.0;
    let mut grad = Array2::zeros(probs.raw_dim());
    Zip::from(&mut grad).and(probs).and(targets).for_each(|g, &p, &m| {
        let (f, df) = focal_term(p, m >= 0.5, config.focal_gamma, config.seg_alpha);
        let diff = p - m;
        total += f + diff.abs();
        let dl1 = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        *g = (df + dl1) / n;
    });
    Ok((total / n, grad))
}

/// Value and feature gradients of the alignment hinge for one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentStream {
    pub value: f64,
    pub grad_normal: Array2<f64>,
    pub grad_abnormal: Array2<f64>,
}

/// Alignment hinge for one stream, on raw (unnormalised) patch features.
///
/// `max(0, mean N-A cosine − (ΣN-N + ΣA-A) / (N_n² + N_a²))`, where the
/// within-group sums run over all ordered pairs including self-pairs. The
/// pair sums are evaluated through `Σ_ij ⟨u_i, v_j⟩ = ⟨Σu_i, Σv_j⟩`, so the
/// cost is linear in the number of patches. Returns `None` when either
/// group is empty.
pub fn alignment_stream(normal: ArrayView2<f64>, abnormal: ArrayView2<f64>) -> Option<AlignmentStream> {
    let (nn, na) = (normal.nrows(), abnormal.nrows());
    if nn == 0 || na == 0 {
        return None;
    }
    let (un, norms_n) = normalize_rows(normal);
    let (ua, norms_a) = normalize_rows(abnormal);
    let sum_n = un.sum_axis(Axis(0));
    let sum_a = ua.sum_axis(Axis(0));
    let cross_den = (nn * na) as f64;
    let within_den = (nn * nn + na * na) as f64;
    let margin = sum_n.dot(&sum_a) / cross_den - (sum_n.dot(&sum_n) + sum_a.dot(&sum_a)) / within_den;
    let value = margin.max(0.0);
    let (grad_normal, grad_abnormal) = if margin > 0.0 {
        let g_un = &sum_a / cross_den - &(&sum_n * (2.0 / within_den));
        let g_ua = &sum_n / cross_den - &(&sum_a * (2.0 / within_den));
        (
            unit_backward(&un, &norms_n, &g_un),
            unit_backward(&ua, &norms_a, &g_ua),
        )
    } else {
        (Array2::zeros(normal.raw_dim()), Array2::zeros(abnormal.raw_dim()))
    };
    Some(AlignmentStream {
        value,
        grad_normal,
        grad_abnormal,
    })
}

/// Backpropagates a shared gradient `g` on every unit row `x/‖x‖`.
fn unit_backward(unit: &Array2<f64>, norms: &Array1<f64>, g: &Array1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(unit.raw_dim());
    for ((mut row, u), &n) in out.rows_mut().into_iter().zip(unit.rows()).zip(norms) {
        if n > 0.0 {
            let proj = u.dot(g);
            row.assign(&((g - &(&u * proj)) / n));
        }
    }
    out
}

/// Mean of per-stream hinges over all streams. Streams lacking one of the
/// groups contribute 0.
pub fn patch_alignment_loss(streams: &[(ArrayView2<f64>, ArrayView2<f64>)]) -> f64 {
    if streams.is_empty() {
        return 0.0;
    }
    let total: f64 = streams
        .iter()
        .filter_map(|(n, a)| alignment_stream(*n, *a))
        .map(|s| s.value)
        .sum();
    total / streams.len() as f64
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub cls: f64,
    pub seg: f64,
    pub pal: f64,
}

/// `L = L_cls + λ1 L_seg + λ2 L_pal`.
pub fn total_loss(parts: LossParts, config: &LossConfig) -> f64 {
    parts.cls + config.lambda1 * parts.seg + config.lambda2 * parts.pal
}
