//! Anchored confidence: an EMA confidence threshold decides which predictions
//! enter a per-instance temporal ensemble, and the ensemble smooths the
//! current one-hot pseudo label.
//!
//! The threshold starts at `δ = 0` and follows `δ_m = β δ_{m−1} + (1 − β) ĉ_m`
//! with `ĉ_m` the minibatch-mean confidence, so after `m + 1` updates it equals
//! `Σ_{i≤m} (1 − β) β^{m−i} ĉ_i` with no bias correction. A prediction at step
//! `m` counts when its confidence is strictly above `δ_m`.
//!
//! The bank stores, per instance, the weighted sum of accumulated predictions
//! (`counts`) and the total accumulated weight (`visits`, written `Q(x)`).

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::model::{self, Prediction, ProbVec, SoftTarget};
use crate::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 0.3;
pub const DEFAULT_BETA: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightScheme {
    /// `1(c > δ)`
    #[default]
    RelativeThreshold,
    /// `exp(−H(p))`
    Entropy,
    /// `max_k p_k`
    Maxprob,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum PredictionScheme {
    /// One vote for the argmax class.
    #[default]
    Hard,
    /// Temperature-scaled softmax of the logits.
    Soft { temperature: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Raw counts: the ensemble term carries mass `λ·Q(x)`.
    #[default]
    Unnormalized,
    /// Counts divided by `Q(x)`.
    Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnconConfig {
    pub lambda: f64,
    pub beta: f64,
    pub weight_scheme: WeightScheme,
    pub prediction_scheme: PredictionScheme,
    pub normalization: Normalization,
}

impl Default for AnconConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            beta: DEFAULT_BETA,
            weight_scheme: WeightScheme::RelativeThreshold,
            prediction_scheme: PredictionScheme::Hard,
            normalization: Normalization::Unnormalized,
        }
    }
}

impl AnconConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        check_beta(self.beta)?;
        if let PredictionScheme::Soft { temperature } = self.prediction_scheme {
            if !(temperature > 0.0) {
                return Err(Error::Parameter("soft-prediction temperature must be positive".into()));
            }
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Parameter("lambda must lie in [0, 1]".into()));
    }
    Ok(())
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::Parameter("beta must lie in [0, 1)".into()));
    }
    Ok(())
}

/// EMA confidence threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdState {
    delta: f64,
    beta: f64,
    steps: u64,
    history: Option<Vec<f64>>,
}

impl ThresholdState {
    pub fn new(beta: f64) -> Result<Self> {
        check_beta(beta)?;
        Ok(Self {
            delta: 0.0,
            beta,
            steps: 0,
            history: None,
        })
    }

    /// Same as [`ThresholdState::new`] but keeps every batch-mean confidence
    /// so the closed form can be recomputed.
    pub fn with_history(beta: f64) -> Result<Self> {
        let mut state = Self::new(beta)?;
        state.history = Some(Vec::new());
        Ok(state)
    }

    /// Restores a threshold mid-run (resumption).
    pub fn restore(beta: f64, delta: f64, steps: u64) -> Result<Self> {
        check_beta(beta)?;
        if !(0.0..=1.0).contains(&delta) {
            return Err(Error::Input("threshold outside [0, 1]".into()));
        }
        Ok(Self {
            delta,
            beta,
            steps,
            history: None,
        })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn history(&self) -> Option<&[f64]> {
        self.history.as_deref()
    }

    pub fn update_threshold(&mut self, batch_mean_conf: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&batch_mean_conf) {
            return Err(Error::Input("batch-mean confidence outside [0, 1]".into()));
        }
        self.delta = self.beta * self.delta + (1.0 - self.beta) * batch_mean_conf;
        self.steps += 1;
        if let Some(h) = self.history.as_mut() {
            h.push(batch_mean_conf);
        }
        Ok(())
    }

    /// `Σ_{i≤m} (1 − β) β^{m−i} ĉ_i` from the recorded history.
    pub fn closed_form(&self) -> Option<f64> {
        let h = self.history.as_ref()?;
        let m = h.len();
        Some(
            h.iter()
                .enumerate()
                .map(|(i, c)| (1.0 - self.beta) * math::pow(self.beta, (m - 1 - i) as f64) * c)
                .sum(),
        )
    }
}

pub fn compute_weight(pred: &ProbVec, state: &ThresholdState, scheme: WeightScheme) -> f64 {
    match scheme {
        WeightScheme::RelativeThreshold => {
            if model::confidence(pred) > state.delta {
                1.0
            } else {
                0.0
            }
        }
        WeightScheme::Entropy => math::exp(-math::entropy(pred.as_slice())),
        WeightScheme::Maxprob => model::confidence(pred),
    }
}

/// Per-instance accumulated weighted predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleBank {
    classes: usize,
    counts: Vec<f64>,
    visits: Vec<f64>,
}

impl EnsembleBank {
    pub fn new(instances: usize, classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0.0; instances * classes],
            visits: vec![0.0; instances],
        }
    }

    /// Rebuilds a bank from stored rows; every row sum must equal its visit
    /// count (within `1e-9` relative).
    pub fn from_parts(classes: usize, counts: Vec<f64>, visits: Vec<f64>) -> Result<Self> {
        if classes < 2 || counts.len() != visits.len() * classes {
            return Err(Error::DimensionMismatch {
                expected: visits.len() * classes,
                got: counts.len(),
            });
        }
        for (i, &q) in visits.iter().enumerate() {
            let row = &counts[i * classes..(i + 1) * classes];
            if row.iter().chain(Some(&q)).any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Input("bank entries must be finite and nonnegative".into()));
            }
            let s: f64 = row.iter().sum();
            if (s - q).abs() > 1e-9 * q.max(1.0) {
                return Err(Error::Input("bank row sum does not match its visit count".into()));
            }
        }
        Ok(Self {
            classes,
            counts,
            visits,
        })
    }

    pub fn instances(&self) -> usize {
        self.visits.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn counts(&self, instance: usize) -> &[f64] {
        &self.counts[instance * self.classes..(instance + 1) * self.classes]
    }

    pub fn visits(&self, instance: usize) -> f64 {
        self.visits[instance]
    }

    pub fn all_visits(&self) -> &[f64] {
        &self.visits
    }

    fn check_index(&self, instance: usize) -> Result<()> {
        if instance >= self.visits.len() {
            return Err(Error::IndexOutOfRange {
                index: instance,
                len: self.visits.len(),
            });
        }
        Ok(())
    }

    pub fn ensemble_update(
        &mut self,
        instance: usize,
        pred: &Prediction,
        weight: f64,
        scheme: PredictionScheme,
    ) -> Result<()> {
        self.check_index(instance)?;
        if !(weight >= 0.0) || !weight.is_finite() {
            return Err(Error::Input("ensemble weight must be finite and nonnegative".into()));
        }
        if pred.probs.len() != self.classes {
            return Err(Error::DimensionMismatch {
                expected: self.classes,
                got: pred.probs.len(),
            });
        }
        if weight == 0.0 {
            return Ok(());
        }
        let row = &mut self.counts[instance * self.classes..(instance + 1) * self.classes];
        match scheme {
            PredictionScheme::Hard => row[pred.label()] += weight,
            PredictionScheme::Soft { temperature } => {
                let p = model::tempered_softmax(&pred.logits, temperature)?;
                for (c, pk) in row.iter_mut().zip(p.as_slice()) {
                    *c += weight * pk;
                }
            }
        }
        self.visits[instance] += weight;
        Ok(())
    }

    /// Normalized ensemble `counts / Q(x)`, or `None` when nothing has been
    /// accumulated for the instance.
    pub fn ensemble_distribution(&self, instance: usize) -> Option<ProbVec> {
        let q = *self.visits.get(instance)?;
        if q <= 0.0 {
            return None;
        }
        let mut probs: Vec<f64> = self.counts(instance).iter().map(|c| c / q).collect();
        // guard the simplex check against accumulated rounding in soft mode
        let s: f64 = probs.iter().sum();
        if s != 1.0 {
            for p in &mut probs {
                *p /= s;
            }
        }
        Some(ProbVec::new(probs).expect("bank rows stay on the simplex"))
    }

    /// Regularized pseudo label `(1 − λ) E₁(ŷ) + λ f̄(x)`.
    ///
    /// In unnormalized mode `f̄` is the raw count row and the target mass is
    /// `(1 − λ) + λ·Q(x)`. Instances with `Q(x) = 0` get the plain one-hot.
    pub fn smooth_target(
        &self,
        pseudo: usize,
        instance: usize,
        lambda: f64,
        normalization: Normalization,
    ) -> Result<SoftTarget> {
        check_lambda(lambda)?;
        self.check_index(instance)?;
        if pseudo >= self.classes {
            return Err(Error::IndexOutOfRange {
                index: pseudo,
                len: self.classes,
            });
        }
        let q = self.visits[instance];
        if q <= 0.0 {
            return Ok(SoftTarget::one_hot(pseudo, self.classes));
        }
        let counts = self.counts(instance);
        let (scale, mass) = match normalization {
            Normalization::Unnormalized => (lambda, (1.0 - lambda) + lambda * q),
            Normalization::Normalized => (lambda / q, 1.0),
        };
        let mut values: Vec<f64> = counts.iter().map(|c| scale * c).collect();
        values[pseudo] += 1.0 - lambda;
        Ok(SoftTarget::with_mass(values, mass))
    }
}
