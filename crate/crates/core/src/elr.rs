//! Early-learning regularization: a per-instance EMA of past soft predictions
//! and the auxiliary loss `log(1 − ⟨f(x; θ), f̄_ELR(x)⟩)` that rewards agreement
//! with it. The target is a detached moving average, so gradients flow through
//! the current prediction only.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::model::ProbVec;
use crate::{Error, Result};

/// ELR moving-average coefficient used when none is configured.
pub const DEFAULT_DECAY: f64 = 0.7;

/// Coefficients swept for the auxiliary loss weight.
pub const LAMBDA_GRID: [f64; 5] = [1.0, 3.0, 7.0, 12.0, 25.0];

/// Lower clamp on `1 − ⟨p, t⟩` inside the log.
pub const ELR_CLAMP: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElrState {
    classes: usize,
    decay: f64,
    targets: Vec<f64>,
}

impl ElrState {
    pub fn new(instances: usize, classes: usize, decay: f64) -> Result<Self> {
        Self::from_parts(classes, decay, vec![0.0; instances * classes])
    }

    pub fn from_parts(classes: usize, decay: f64, targets: Vec<f64>) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Parameter("ELR decay must lie in [0, 1)".into()));
        }
        if classes < 2 || !targets.len().is_multiple_of(classes) {
            return Err(Error::DimensionMismatch {
                expected: classes,
                got: targets.len(),
            });
        }
        Ok(Self {
            classes,
            decay,
            targets,
        })
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn instances(&self) -> usize {
        self.targets.len() / self.classes
    }

    pub fn all_targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn target(&self, instance: usize) -> &[f64] {
        &self.targets[instance * self.classes..(instance + 1) * self.classes]
    }

    /// `row ← decay·row + (1 − decay)·pred`.
    pub fn elr_update(&mut self, instance: usize, pred: &ProbVec) -> Result<()> {
        if instance >= self.instances() {
            return Err(Error::IndexOutOfRange {
                index: instance,
                len: self.instances(),
            });
        }
        if pred.len() != self.classes {
            return Err(Error::DimensionMismatch {
                expected: self.classes,
                got: pred.len(),
            });
        }
        let decay = self.decay;
        let row = &mut self.targets[instance * self.classes..(instance + 1) * self.classes];
        for (t, p) in row.iter_mut().zip(pred.as_slice()) {
            *t = decay * *t + (1.0 - decay) * p;
        }
        Ok(())
    }
}

pub fn elr_loss(pred: &ProbVec, target_row: &[f64]) -> f64 {
    let agreement = math::dot(pred.as_slice(), target_row);
    math::log((1.0 - agreement).max(ELR_CLAMP))
}

/// Derivative of [`elr_loss`] with respect to the logits, zero where the clamp
/// is active.
pub(crate) fn elr_logit_grad(pred: &ProbVec, target_row: &[f64]) -> Vec<f64> {
    let p = pred.as_slice();
    let s = math::dot(p, target_row);
    let gap = 1.0 - s;
    if gap <= ELR_CLAMP {
        return vec![0.0; p.len()];
    }
    p.iter()
        .zip(target_row)
        .map(|(&pj, &tj)| -pj * (tj - s) / gap)
        .collect()
}
