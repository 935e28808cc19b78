//! Masked reconstruction losses and their mode-dependent sum.
//!
//! ```text
//! L_pixel  = 1/(D_x |M|) * sum_{i in M} |x̂_i - x_i|^2
//! L_latent = 1/(D_t |M|) * sum_{i in M} |t̂_i - t_i|^2
//! L_cls    = 1/D_t * |t̂_0 - t_0|^2
//! ```
//!
//! Pixel rows are indexed by patch (`0..N`); latent rows by token, so patch
//! `i` lives in latent row `i + 1` and row 0 is `[CLS]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Mode;
use crate::patching::MaskPlan;
use crate::tensor::Matrix;

fn check_same_shape(a: &Matrix, b: &Matrix, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: prediction {:?} vs target {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn masked_mse(pred: &Matrix, target: &Matrix, rows: impl Iterator<Item = usize>, n_rows: usize) -> f64 {
    let d = pred.cols();
    let mut sum = 0.0;
    for r in rows {
        for (p, t) in pred.row(r).iter().zip(target.row(r)) {
            let e = p - t;
            sum += e * e;
        }
    }
    sum / (d * n_rows) as f64
}

fn masked_mse_grad(pred: &Matrix, target: &Matrix, rows: impl Iterator<Item = usize>, n_rows: usize) -> Matrix {
    let coef = 2.0 / (pred.cols() * n_rows) as f64;
    let mut g = Matrix::zeros(pred.rows(), pred.cols());
    for r in rows {
        for (o, (p, t)) in g.row_mut(r).iter_mut().zip(pred.row(r).iter().zip(target.row(r))) {
            *o = coef * (p - t);
        }
    }
    g
}

/// Pixel loss over masked patches. `xhat` and `x` are `N x D_x`.
pub fn loss_pixel(xhat: &Matrix, x: &Matrix, plan: &MaskPlan) -> Result<f64> {
    check_same_shape(xhat, x, "pixel loss")?;
    let m = plan.masked();
    if m.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(masked_mse(xhat, x, m.iter().copied(), m.len()))
}

/// Gradient of [`loss_pixel`] w.r.t. `xhat`.
pub fn loss_pixel_grad(xhat: &Matrix, x: &Matrix, plan: &MaskPlan) -> Result<Matrix> {
    check_same_shape(xhat, x, "pixel loss")?;
    let m = plan.masked();
    if m.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(masked_mse_grad(xhat, x, m.iter().copied(), m.len()))
}

/// Latent loss over masked patch tokens. `that` and `t` are `(1 + N) x D_t`;
/// row 0 and visible rows are ignored.
pub fn loss_latent(that: &Matrix, t: &Matrix, plan: &MaskPlan) -> Result<f64> {
    check_same_shape(that, t, "latent loss")?;
    let m = plan.masked();
    if m.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(masked_mse(that, t, m.iter().map(|i| i + 1), m.len()))
}

/// Gradient of [`loss_latent`] w.r.t. `that`.
pub fn loss_latent_grad(that: &Matrix, t: &Matrix, plan: &MaskPlan) -> Result<Matrix> {
    check_same_shape(that, t, "latent loss")?;
    let m = plan.masked();
    if m.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(masked_mse_grad(that, t, m.iter().map(|i| i + 1), m.len()))
}

/// `[CLS]` loss between two `D_t` vectors.
pub fn loss_cls(that0: &[f64], t0: &[f64]) -> Result<f64> {
    if that0.len() != t0.len() || t0.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "cls loss on vectors of length {} and {}",
            that0.len(),
            t0.len()
        )));
    }
    let sum: f64 = that0.iter().zip(t0).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / t0.len() as f64)
}

/// Gradient of [`loss_cls`] w.r.t. `that0`.
pub fn loss_cls_grad(that0: &[f64], t0: &[f64]) -> Vec<f64> {
    let coef = 2.0 / t0.len() as f64;
    that0.iter().zip(t0).map(|(a, b)| coef * (a - b)).collect()
}

/// Which loss terms enter the total.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ObjectiveTerms {
    pub pixel: bool,
    pub latent: bool,
    pub cls: bool,
}

impl ObjectiveTerms {
    pub fn for_mode(mode: Mode) -> Self {
        Self::for_mode_with(mode, true)
    }

    /// `latent_only_cls` decides whether `latent_only` keeps the `[CLS]` term.
    pub fn for_mode_with(mode: Mode, latent_only_cls: bool) -> Self {
        match mode {
            Mode::Pilamim => Self {
                pixel: true,
                latent: true,
                cls: true,
            },
            Mode::PixelOnly => Self {
                pixel: true,
                latent: false,
                cls: false,
            },
            Mode::LatentOnly => Self {
                pixel: false,
                latent: true,
                cls: latent_only_cls,
            },
            Mode::PilamimNoCls => Self {
                pixel: true,
                latent: true,
                cls: false,
            },
        }
    }
}

/// Raw loss values before mode selection.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub l_pixel: Option<f64>,
    pub l_latent: Option<f64>,
    pub l_cls: Option<f64>,
}

/// Terms used by a mode and their unit-weight sum; unused terms are `None`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_pixel: Option<f64>,
    pub l_latent: Option<f64>,
    pub l_cls: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && [self.l_pixel, self.l_latent, self.l_cls]
                .iter()
                .flatten()
                .all(|v| v.is_finite())
    }

    /// Element-wise mean of breakdowns sharing the same present terms.
    pub fn mean(items: &[LossBreakdown]) -> Option<LossBreakdown> {
        let first = items.first()?;
        let n = items.len() as f64;
        let avg = |f: fn(&LossBreakdown) -> Option<f64>| -> Option<f64> {
            f(first)?;
            Some(items.iter().map(|b| f(b).unwrap_or(0.0)).sum::<f64>() / n)
        };
        Some(LossBreakdown {
            l_pixel: avg(|b| b.l_pixel),
            l_latent: avg(|b| b.l_latent),
            l_cls: avg(|b| b.l_cls),
            total: items.iter().map(|b| b.total).sum::<f64>() / n,
        })
    }
}

/// Combines the terms a mode uses with unit weights.
pub fn total_loss(parts: LossParts, mode: Mode) -> Result<LossBreakdown> {
    total_loss_with(parts, ObjectiveTerms::for_mode(mode), mode)
}

pub fn total_loss_with(parts: LossParts, terms: ObjectiveTerms, mode: Mode) -> Result<LossBreakdown> {
    let pick = |used: bool, v: Option<f64>, term: &'static str| -> Result<Option<f64>> {
        if !used {
            return Ok(None);
        }
        v.map(Some).ok_or_else(|| Error::MissingTermForMode {
            term,
            mode: mode.to_string(),
        })
    };
    let l_pixel = pick(terms.pixel, parts.l_pixel, "l_pixel")?;
    let l_latent = pick(terms.latent, parts.l_latent, "l_latent")?;
    let l_cls = pick(terms.cls, parts.l_cls, "l_cls")?;
    let total = [l_pixel, l_latent, l_cls].iter().flatten().sum();
    Ok(LossBreakdown {
        l_pixel,
        l_latent,
        l_cls,
        total,
    })
}
