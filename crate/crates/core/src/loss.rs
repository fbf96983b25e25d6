//! Hard-region-adaptation (HRA) loss kernels with analytic gradients.
//!
//! All kernels take class-major `[C × N]` arrays: entry `(c, n)` lives at
//! `c * N + n`. Targets must be one-hot per voxel. Predictions are clamped to
//! `[PRED_CLAMP, 1 − PRED_CLAMP]` before evaluation.
//!
//! The HRA gate `I(y, ŷ)` is 1 when `|y − ŷ| ≥ T`, so `T = 0` admits every
//! term and HRA-CE reduces to plain cross-entropy. The gate is a constant with
//! respect to the gradient.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PRED_CLAMP: f64 = 1e-7;
pub const DEFAULT_THRESHOLD: f64 = 0.1;
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Which pair of losses a coarse stage combines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum StageCombo {
    /// HRA-CE + soft Dice.
    #[default]
    CoarseI,
    /// HRA-CE + HRA-Dice.
    CoarseII,
}

/// Reported form of the HRA-Dice value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HraDiceForm {
    /// `−(1/N) Σ I·2yŷ/(y²+ŷ²+ε)`, a non-positive value.
    #[default]
    Negative,
    /// `1 − (1/N) Σ I·2yŷ/(y²+ŷ²+ε)`.
    Complement,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub threshold: f64,
    pub epsilon: f64,
    pub stage_combo: StageCombo,
    pub weights: [f64; 2],
    pub dice_form: HraDiceForm,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            threshold: DEFAULT_THRESHOLD,
            epsilon: DEFAULT_EPSILON,
            stage_combo: StageCombo::CoarseI,
            weights: [1.0, 1.0],
            dice_form: HraDiceForm::Negative,
        }
    }
}

impl LossConfig {
    pub fn with_threshold(threshold: f64) -> Self {
        LossConfig {
            threshold,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::arg("HRA threshold must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::arg("epsilon must be positive"));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::arg("combination weights must be finite"));
        }
        Ok(())
    }
}

/// Loss value, gradient with respect to the prediction, and gate occupancy.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub gradient: Vec<f64>,
    /// Share of voxel-class terms whose gate is open.
    pub hard_fraction: f64,
}

/// Gate of the HRA losses: open for hard terms, `|y − ŷ| ≥ T`.
#[inline]
pub fn hra_gate(y: f64, y_hat: f64, threshold: f64) -> bool {
    libm::fabs(y - y_hat) >= threshold
}

#[inline]
pub fn clamp_pred(p: f64) -> f64 {
    p.clamp(PRED_CLAMP, 1.0 - PRED_CLAMP)
}

fn check_inputs(pred: &[f64], target: &[f64], classes: usize) -> Result<usize> {
    if classes == 0 {
        return Err(Error::arg("need at least one class"));
    }
    if pred.len() != target.len() {
        return Err(Error::arg(alloc::format!(
            "prediction has {} entries, target {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() || !pred.len().is_multiple_of(classes) {
        return Err(Error::arg(alloc::format!(
            "{} entries do not form a [{classes} x N] array",
            pred.len()
        )));
    }
    if let Some(i) = pred.iter().position(|p| !p.is_finite()) {
        return Err(Error::arg(alloc::format!("prediction entry {i} is not finite")));
    }
    let n = pred.len() / classes;
    for v in 0..n {
        let mut ones = 0;
        for c in 0..classes {
            match target[c * n + v] {
                y if y == 1.0 => ones += 1,
                y if y == 0.0 => {}
                y => {
                    return Err(Error::arg(alloc::format!(
                        "target entry ({c}, {v}) = {y} is not 0 or 1"
                    )))
                }
            }
        }
        if ones != 1 {
            return Err(Error::arg(alloc::format!(
                "target voxel {v} is not one-hot ({ones} active classes)"
            )));
        }
    }
    Ok(n)
}

/// Plain cross-entropy `−(1/N) Σ y log ŷ`.
pub fn cross_entropy(pred: &[f64], target: &[f64], classes: usize) -> Result<LossResult> {
    gated_ce(pred, target, classes, None)
}

/// HRA cross-entropy: cross-entropy restricted to gated (hard) terms.
pub fn hra_ce(pred: &[f64], target: &[f64], classes: usize, config: &LossConfig) -> Result<LossResult> {
    config.validate()?;
    gated_ce(pred, target, classes, Some(config.threshold))
}

fn gated_ce(pred: &[f64], target: &[f64], classes: usize, threshold: Option<f64>) -> Result<LossResult> {
    let n = check_inputs(pred, target, classes)?;
    let inv_n = 1.0 / n as f64;
    let mut sum = 0.0;
    let mut open = 0usize;
    let mut gradient = vec![0.0; pred.len()];
    for ((&p, &y), g) in pred.iter().zip(target).zip(gradient.iter_mut()) {
        let p = clamp_pred(p);
        if threshold.is_some_and(|t| !hra_gate(y, p, t)) {
            continue;
        }
        open += 1;
        if y != 0.0 {
            sum += y * libm::log(p);
            *g = -inv_n * y / p;
        }
    }
    Ok(LossResult {
        value: -inv_n * sum,
        gradient,
        hard_fraction: open as f64 / pred.len() as f64,
    })
}

/// Soft Dice `1 − (1/C) Σ_c (2Σ yŷ + ε)/(Σ y² + Σ ŷ² + ε)`.
pub fn soft_dice(pred: &[f64], target: &[f64], classes: usize, epsilon: f64) -> Result<LossResult> {
    if !(epsilon > 0.0) {
        return Err(Error::arg("epsilon must be positive"));
    }
    let n = check_inputs(pred, target, classes)?;
    let mut value = 1.0;
    let mut gradient = vec![0.0; pred.len()];
    let inv_c = 1.0 / classes as f64;
    for c in 0..classes {
        let p = &pred[c * n..(c + 1) * n];
        let y = &target[c * n..(c + 1) * n];
        let (mut inter, mut yy, mut pp) = (0.0, 0.0, 0.0);
        for (&pi, &yi) in p.iter().zip(y) {
            let pi = clamp_pred(pi);
            inter += yi * pi;
            yy += yi * yi;
            pp += pi * pi;
        }
        let num = 2.0 * inter + epsilon;
        let den = yy + pp + epsilon;
        value -= inv_c * num / den;
        let g = &mut gradient[c * n..(c + 1) * n];
        for ((gi, &pi), &yi) in g.iter_mut().zip(p).zip(y) {
            let pi = clamp_pred(pi);
            *gi = -inv_c * (2.0 * yi * den - 2.0 * pi * num) / (den * den);
        }
    }
    Ok(LossResult {
        value,
        gradient,
        hard_fraction: 1.0,
    })
}

/// HRA Dice: per-term Dice affinity `2yŷ/(y²+ŷ²+ε)` summed over gated terms.
pub fn hra_dice(pred: &[f64], target: &[f64], classes: usize, config: &LossConfig) -> Result<LossResult> {
    config.validate()?;
    let n = check_inputs(pred, target, classes)?;
    let (t, eps) = (config.threshold, config.epsilon);
    let inv_n = 1.0 / n as f64;
    let mut sum = 0.0;
    let mut open = 0usize;
    let mut gradient = vec![0.0; pred.len()];
    for ((&p, &y), g) in pred.iter().zip(target).zip(gradient.iter_mut()) {
        let p = clamp_pred(p);
        if !hra_gate(y, p, t) {
            continue;
        }
        open += 1;
        let den = y * y + p * p + eps;
        sum += 2.0 * y * p / den;
        *g = -inv_n * 2.0 * y * (y * y - p * p + eps) / (den * den);
    }
    let value = match config.dice_form {
        HraDiceForm::Negative => -inv_n * sum,
        HraDiceForm::Complement => 1.0 - inv_n * sum,
    };
    Ok(LossResult {
        value,
        gradient,
        hard_fraction: open as f64 / pred.len() as f64,
    })
}

/// Weighted stage combination: CoarseI = HRA-CE + soft Dice, CoarseII = HRA-CE + HRA-Dice.
pub fn combined_loss(pred: &[f64], target: &[f64], classes: usize, config: &LossConfig) -> Result<LossResult> {
    let ce = hra_ce(pred, target, classes, config)?;
    let dice = match config.stage_combo {
        StageCombo::CoarseI => soft_dice(pred, target, classes, config.epsilon)?,
        StageCombo::CoarseII => hra_dice(pred, target, classes, config)?,
    };
    let [w1, w2] = config.weights;
    Ok(LossResult {
        value: w1 * ce.value + w2 * dice.value,
        gradient: ce
            .gradient
            .iter()
            .zip(&dice.gradient)
            .map(|(a, b)| w1 * a + w2 * b)
            .collect(),
        hard_fraction: ce.hard_fraction,
    })
}
