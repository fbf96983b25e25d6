//! Verification harness for the loss kernels: central finite differences for
//! gradients and naive per-element loops for values.

use alloc::string::String;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::loss::{self, clamp_pred, hra_gate, LossConfig, LossResult};

pub const FD_STEP: f64 = 1e-4;
pub const GRAD_REL_TOL: f64 = 1e-4;
pub const CE_MATCH_TOL: f64 = 1e-9;
pub const VALUE_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    HraCe,
    HraDice,
    SoftDice,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::HraCe, LossKind::HraDice, LossKind::SoftDice];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::HraCe => "hra_ce",
            LossKind::HraDice => "hra_dice",
            LossKind::SoftDice => "soft_dice",
        }
    }

    pub fn evaluate(self, pred: &[f64], target: &[f64], classes: usize, cfg: &LossConfig) -> Result<LossResult> {
        match self {
            LossKind::HraCe => loss::hra_ce(pred, target, classes, cfg),
            LossKind::HraDice => loss::hra_dice(pred, target, classes, cfg),
            LossKind::SoftDice => loss::soft_dice(pred, target, classes, cfg.epsilon),
        }
    }

    fn gated(self) -> bool {
        !matches!(self, LossKind::SoftDice)
    }
}

/// Random softmax prediction (logits in `[-1, 1]`) and random one-hot target.
pub fn random_case(rng: &mut impl Rng, classes: usize, voxels: usize) -> (Vec<f64>, Vec<f64>) {
    let mut pred = alloc::vec![0.0; classes * voxels];
    let mut target = alloc::vec![0.0; classes * voxels];
    let mut logits = alloc::vec![0.0; classes];
    for v in 0..voxels {
        for l in logits.iter_mut() {
            *l = rng.random_range(-1.0..1.0);
        }
        let z: f64 = logits.iter().map(|&l| libm::exp(l)).sum();
        for c in 0..classes {
            pred[c * voxels + v] = libm::exp(logits[c]) / z;
        }
        target[rng.random_range(0..classes) * voxels + v] = 1.0;
    }
    (pred, target)
}

/// Relative error with an absolute floor for entries that are both ~0.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = libm::fabs(analytic).max(libm::fabs(numeric));
    let diff = libm::fabs(analytic - numeric);
    if scale < 1e-10 {
        if diff < 1e-10 {
            0.0
        } else {
            diff
        }
    } else {
        diff / scale
    }
}

/// Whether perturbing entry `i` by ±`h` leaves its gate state unchanged.
pub fn gate_stable(y: f64, p: f64, threshold: f64, h: f64) -> bool {
    let g = hra_gate(y, clamp_pred(p), threshold);
    g == hra_gate(y, clamp_pred(p + h), threshold) && g == hra_gate(y, clamp_pred(p - h), threshold)
}

/// Maximum relative error between the analytic gradient and central finite
/// differences over `entries`, skipping gate-unstable entries of gated losses.
/// Returns `(max_rel_err, checked_entries)`.
pub fn finite_difference_error(
    kind: LossKind,
    pred: &[f64],
    target: &[f64],
    classes: usize,
    cfg: &LossConfig,
    analytic: &[f64],
    entries: impl IntoIterator<Item = usize>,
) -> Result<(f64, usize)> {
    let h = FD_STEP;
    let mut work = pred.to_vec();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for i in entries {
        if kind.gated() && !gate_stable(target[i], pred[i], cfg.threshold, h) {
            continue;
        }
        work[i] = pred[i] + h;
        let up = kind.evaluate(&work, target, classes, cfg)?.value;
        work[i] = pred[i] - h;
        let down = kind.evaluate(&work, target, classes, cfg)?.value;
        work[i] = pred[i];
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
        checked += 1;
    }
    Ok((worst, checked))
}

/// Naive nested-loop evaluation of each loss value.
pub fn loop_oracle(kind: LossKind, pred: &[f64], target: &[f64], classes: usize, cfg: &LossConfig) -> f64 {
    let n = pred.len() / classes;
    let at = |c: usize, v: usize| (target[c * n + v], clamp_pred(pred[c * n + v]));
    match kind {
        LossKind::HraCe => {
            let mut s = 0.0;
            for c in 0..classes {
                for v in 0..n {
                    let (y, p) = at(c, v);
                    let gate = if libm::fabs(y - p) >= cfg.threshold { 1.0 } else { 0.0 };
                    if y > 0.0 {
                        s += gate * y * libm::log(p);
                    }
                }
            }
            -s / n as f64
        }
        LossKind::HraDice => {
            let mut s = 0.0;
            for c in 0..classes {
                for v in 0..n {
                    let (y, p) = at(c, v);
                    let gate = if libm::fabs(y - p) >= cfg.threshold { 1.0 } else { 0.0 };
                    s += gate * 2.0 * y * p / (y * y + p * p + cfg.epsilon);
                }
            }
            match cfg.dice_form {
                loss::HraDiceForm::Negative => -s / n as f64,
                loss::HraDiceForm::Complement => 1.0 - s / n as f64,
            }
        }
        LossKind::SoftDice => {
            let mut total = 0.0;
            for c in 0..classes {
                let (mut i, mut a, mut b) = (0.0, 0.0, 0.0);
                for v in 0..n {
                    let (y, p) = at(c, v);
                    i += y * p;
                    a += y * y;
                    b += p * p;
                }
                total += (2.0 * i + cfg.epsilon) / (a + b + cfg.epsilon);
            }
            1.0 - total / classes as f64
        }
    }
}

/// Configuration of one harness run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCheckPlan {
    /// `(classes, voxels)` tensor sizes.
    pub sizes: Vec<(usize, usize)>,
    pub thresholds: Vec<f64>,
    /// Random tensors per (size, threshold) cell.
    pub trials: usize,
    /// Entries checked by finite differences per tensor; all entries when the tensor is smaller.
    pub max_entries: usize,
    pub seed: u64,
    /// Test hook: scales analytic gradients by 1.01 so the harness must fail.
    pub corrupt_gradient: bool,
}

impl Default for LossCheckPlan {
    fn default() -> Self {
        LossCheckPlan {
            sizes: alloc::vec![(2, 64), (5, 512), (5, 4096)],
            thresholds: alloc::vec![0.0, 0.1, 0.3, 0.5],
            trials: 9,
            max_entries: 256,
            seed: 0,
            corrupt_gradient: false,
        }
    }
}

/// One harness row: one loss on one (size, threshold) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCheckRow {
    pub loss: String,
    pub classes: usize,
    pub voxels: usize,
    pub threshold: f64,
    pub trials: usize,
    pub checked_entries: usize,
    pub max_rel_grad_err: f64,
    pub max_value_err: f64,
    pub hard_fraction: f64,
    /// `|hra_ce − ce|` maximum, reported on `T = 0` rows of `hra_ce`.
    pub ce_match_err: Option<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCheckReport {
    pub rows: Vec<LossCheckRow>,
    pub pass: bool,
}

impl LossCheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &LossCheckRow> {
        self.rows.iter().filter(|r| !r.pass)
    }
}

pub fn run_loss_check(plan: &LossCheckPlan) -> Result<LossCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut rows = Vec::new();
    for &(classes, voxels) in &plan.sizes {
        for &t in &plan.thresholds {
            let cfg = LossConfig::with_threshold(t);
            cfg.validate()?;
            let mut cells: Vec<LossCheckRow> = LossKind::ALL
                .iter()
                .map(|k| LossCheckRow {
                    loss: k.name().into(),
                    classes,
                    voxels,
                    threshold: t,
                    trials: plan.trials,
                    checked_entries: 0,
                    max_rel_grad_err: 0.0,
                    max_value_err: 0.0,
                    hard_fraction: 0.0,
                    ce_match_err: None,
                    pass: true,
                })
                .collect();
            for _ in 0..plan.trials {
                let (pred, target) = random_case(&mut rng, classes, voxels);
                let total = pred.len();
                let entries: Vec<usize> = if total <= plan.max_entries {
                    (0..total).collect()
                } else {
                    (0..plan.max_entries).map(|_| rng.random_range(0..total)).collect()
                };
                for (kind, row) in LossKind::ALL.iter().zip(cells.iter_mut()) {
                    let mut res = kind.evaluate(&pred, &target, classes, &cfg)?;
                    if plan.corrupt_gradient {
                        res.gradient.iter_mut().for_each(|g| *g *= 1.01);
                    }
                    let (err, checked) = finite_difference_error(
                        *kind,
                        &pred,
                        &target,
                        classes,
                        &cfg,
                        &res.gradient,
                        entries.iter().copied(),
                    )?;
                    row.max_rel_grad_err = row.max_rel_grad_err.max(err);
                    row.checked_entries += checked;
                    let oracle = loop_oracle(*kind, &pred, &target, classes, &cfg);
                    row.max_value_err = row.max_value_err.max(libm::fabs(oracle - res.value));
                    row.hard_fraction += res.hard_fraction / plan.trials as f64;
                    if *kind == LossKind::HraCe && t == 0.0 {
                        let ce = loss::cross_entropy(&pred, &target, classes)?.value;
                        let e = libm::fabs(ce - res.value);
                        row.ce_match_err = Some(row.ce_match_err.unwrap_or(0.0).max(e));
                    }
                }
            }
            for row in &mut cells {
                row.pass = row.max_rel_grad_err <= GRAD_REL_TOL
                    && row.max_value_err <= VALUE_TOL
                    && row.ce_match_err.is_none_or(|e| e <= CE_MATCH_TOL);
            }
            rows.extend(cells);
        }
    }
    let pass = rows.iter().all(|r| r.pass);
    Ok(LossCheckReport { rows, pass })
}
