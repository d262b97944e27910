//! Linear softmax classifier `f_k(x; θ) = exp(Θ_kᵀx) / Σ_i exp(Θ_iᵀx)` with
//! soft-target cross-entropy, generalized cross-entropy, their analytic
//! gradients, and plain SGD.
//!
//! Parameters are a `d × K` matrix stored row-major: entry `(j, k)` lives at
//! `j * K + k`, so column `k` is the class vector `Θ_k`. Gradients use the
//! same layout and are passed around as flat slices.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math::{self, LOG_CLAMP};
use crate::{Error, Result};

/// Sum-to-one tolerance for [`ProbVec`].
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Default GCE exponent.
pub const GCE_DEFAULT_Q: f64 = 0.8;

/// Elementwise relative errors use `max(|a|, |n|, FD_REL_FLOOR)` as the
/// denominator so entries that are zero in exact arithmetic are compared
/// absolutely.
pub const FD_REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearParams {
    dim: usize,
    classes: usize,
    weights: Vec<f64>,
}

impl LinearParams {
    pub fn zeros(dim: usize, classes: usize) -> Result<Self> {
        Self::from_weights(dim, classes, vec![0.0; dim * classes])
    }

    /// Builds parameters from a row-major `dim × classes` buffer.
    pub fn from_weights(dim: usize, classes: usize, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Parameter("input dimension must be at least 1".into()));
        }
        if classes < 2 {
            return Err(Error::Parameter("class count must be at least 2".into()));
        }
        if weights.len() != dim * classes {
            return Err(Error::DimensionMismatch {
                expected: dim * classes,
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Numeric("non-finite parameter entry".into()));
        }
        Ok(Self { dim, classes, weights })
    }

    /// Builds parameters from class vectors `Θ_1..Θ_K` (each of length `d`).
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let classes = columns.len();
        let dim = columns.first().map_or(0, Vec::len);
        let mut weights = vec![0.0; dim * classes];
        for (k, col) in columns.iter().enumerate() {
            if col.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: col.len(),
                });
            }
            for (j, &v) in col.iter().enumerate() {
                weights[j * classes + k] = v;
            }
        }
        Self::from_weights(dim, classes, weights)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn get(&self, row: usize, class: usize) -> f64 {
        self.weights[row * self.classes + class]
    }

    pub fn frobenius_norm(&self) -> f64 {
        math::norm2(&self.weights)
    }

    /// Logits `Θᵀx`.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut z = vec![0.0; self.classes];
        for (j, &xj) in x.iter().enumerate() {
            let row = &self.weights[j * self.classes..(j + 1) * self.classes];
            for (zk, &w) in z.iter_mut().zip(row) {
                *zk += w * xj;
            }
        }
        Ok(z)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite feature".into()));
        }
        Ok(())
    }
}

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVec(Vec<f64>);

impl ProbVec {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Input("empty probability vector".into()));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Input("probability outside [0, 1]".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Input("probabilities do not sum to 1".into()));
        }
        Ok(Self(probs))
    }

    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0 / classes as f64; classes])
    }

    pub fn one_hot(class: usize, classes: usize) -> Self {
        let mut v = vec![0.0; classes];
        v[class] = 1.0;
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Cross-entropy target: nonnegative entries whose total mass may exceed one
/// (the unnormalized smoothing mode accumulates ensemble counts).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftTarget {
    values: Vec<f64>,
    mass: f64,
}

impl SoftTarget {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Input("target entries must be finite and nonnegative".into()));
        }
        let mass = values.iter().sum::<f64>();
        if mass <= 0.0 {
            return Err(Error::Input("target mass must be positive".into()));
        }
        Ok(Self { values, mass })
    }

    /// Builds a target whose mass is supplied by the caller (used where the
    /// mass has a closed form that must hold exactly).
    pub(crate) fn with_mass(values: Vec<f64>, mass: f64) -> Self {
        debug_assert!(values.iter().all(|v| *v >= 0.0) && mass > 0.0);
        Self { values, mass }
    }

    pub fn one_hot(class: usize, classes: usize) -> Self {
        let mut values = vec![0.0; classes];
        values[class] = 1.0;
        Self { values, mass: 1.0 }
    }

    pub fn from_prob(p: &ProbVec) -> Self {
        Self::with_mass(p.as_slice().to_vec(), 1.0)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `b` feature rows drawn from a dataset, with their instance identifiers.
#[derive(Debug, Clone)]
pub struct Minibatch<'a> {
    pub inputs: Vec<&'a [f64]>,
    pub indices: Vec<usize>,
}

impl<'a> Minibatch<'a> {
    pub fn new(inputs: Vec<&'a [f64]>, indices: Vec<usize>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::Input("minibatch must contain at least one row".into()));
        }
        if inputs.len() != indices.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.len(),
                got: indices.len(),
            });
        }
        Ok(Self { inputs, indices })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Logits and probabilities of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probs: ProbVec,
}

impl Prediction {
    /// Wraps a probability vector, using clamped log-probabilities as logits.
    pub fn from_probs(probs: ProbVec) -> Self {
        let logits = probs.0.iter().map(|p| math::log(p.max(LOG_CLAMP))).collect();
        Self { logits, probs }
    }

    pub fn confidence(&self) -> f64 {
        confidence(&self.probs)
    }

    pub fn label(&self) -> usize {
        pseudo_label(&self.probs)
    }
}

pub fn predict(params: &LinearParams, x: &[f64]) -> Result<Prediction> {
    let logits = params.logits(x)?;
    let probs = softmax(&logits);
    Ok(Prediction { logits, probs })
}

/// Softmax of `values`, stabilized by subtracting the maximum.
pub fn softmax(values: &[f64]) -> ProbVec {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = values.iter().map(|v| math::exp(v - max)).collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    ProbVec(out)
}

pub fn softmax_forward(params: &LinearParams, x: &[f64]) -> Result<ProbVec> {
    Ok(softmax(&params.logits(x)?))
}

/// Softmax of logits divided by a temperature.
pub fn tempered_softmax(logits: &[f64], temperature: f64) -> Result<ProbVec> {
    if !(temperature > 0.0) {
        return Err(Error::Parameter("temperature must be positive".into()));
    }
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    Ok(softmax(&scaled))
}

/// Prediction confidence `max_k p_k`.
pub fn confidence(p: &ProbVec) -> f64 {
    p.0.iter().copied().fold(0.0, f64::max)
}

/// Argmax class (lowest index on ties).
pub fn pseudo_label(p: &ProbVec) -> usize {
    math::argmax(&p.0)
}

/// `−Σ_k t_k log p_k` with the log argument clamped at `1e-12`. NaN propagates.
pub fn ce_soft_loss(p: &ProbVec, t: &SoftTarget) -> f64 {
    -p.0.iter()
        .zip(&t.values)
        .filter(|(_, &tk)| tk != 0.0)
        .map(|(&pk, &tk)| tk * math::log(if pk < LOG_CLAMP { LOG_CLAMP } else { pk }))
        .sum::<f64>()
}

/// Target-weighted generalized cross-entropy `Σ_k t_k (1 − p_k^q) / q`.
pub fn gce_loss(p: &ProbVec, t: &SoftTarget, q: f64) -> Result<f64> {
    check_gce_q(q)?;
    Ok(p.0
        .iter()
        .zip(&t.values)
        .map(|(&pk, &tk)| tk * (1.0 - math::pow(pk, q)) / q)
        .sum())
}

pub(crate) fn check_gce_q(q: f64) -> Result<()> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Parameter("GCE exponent q must lie in (0, 1]".into()));
    }
    Ok(())
}

/// Derivative of the CE loss with respect to the logits: `mass·p − t`.
pub(crate) fn ce_logit_grad(p: &ProbVec, t: &SoftTarget) -> Vec<f64> {
    p.0.iter().zip(&t.values).map(|(&pk, &tk)| t.mass * pk - tk).collect()
}

/// Derivative of the GCE loss with respect to the logits:
/// `−t_j p_j^q + p_j Σ_k t_k p_k^q`.
pub(crate) fn gce_logit_grad(p: &ProbVec, t: &SoftTarget, q: f64) -> Vec<f64> {
    let powered: Vec<f64> = p.0.iter().map(|&pk| math::pow(pk, q)).collect();
    let weighted: f64 = powered.iter().zip(&t.values).map(|(a, b)| a * b).sum();
    p.0.iter()
        .zip(&t.values)
        .zip(&powered)
        .map(|((&pj, &tj), &pq)| -tj * pq + pj * weighted)
        .collect()
}

/// `grad += scale · x ⊗ r`.
pub(crate) fn accumulate_outer(grad: &mut [f64], x: &[f64], r: &[f64], scale: f64) {
    let classes = r.len();
    for (j, &xj) in x.iter().enumerate() {
        let row = &mut grad[j * classes..(j + 1) * classes];
        for (g, &rk) in row.iter_mut().zip(r) {
            *g += scale * xj * rk;
        }
    }
}

fn check_batch(params: &LinearParams, batch: &Minibatch<'_>, targets: &[SoftTarget]) -> Result<()> {
    if targets.len() != batch.len() {
        return Err(Error::DimensionMismatch {
            expected: batch.len(),
            got: targets.len(),
        });
    }
    if let Some(t) = targets.iter().find(|t| t.len() != params.classes) {
        return Err(Error::DimensionMismatch {
            expected: params.classes,
            got: t.len(),
        });
    }
    Ok(())
}

/// Mean soft-target cross-entropy over a minibatch.
pub fn mean_ce_loss(params: &LinearParams, batch: &Minibatch<'_>, targets: &[SoftTarget]) -> Result<f64> {
    check_batch(params, batch, targets)?;
    let mut total = 0.0;
    for (x, t) in batch.inputs.iter().zip(targets) {
        total += ce_soft_loss(&softmax_forward(params, x)?, t);
    }
    Ok(total / batch.len() as f64)
}

/// Exact gradient of [`mean_ce_loss`]: `(1/b) Σ_i x_i ⊗ (mass_i·f(x_i) − t_i)`.
pub fn grad_linear_ce(params: &LinearParams, batch: &Minibatch<'_>, targets: &[SoftTarget]) -> Result<Vec<f64>> {
    check_batch(params, batch, targets)?;
    let mut grad = vec![0.0; params.weights.len()];
    let scale = 1.0 / batch.len() as f64;
    for (x, t) in batch.inputs.iter().zip(targets) {
        let p = softmax_forward(params, x)?;
        accumulate_outer(&mut grad, x, &ce_logit_grad(&p, t), scale);
    }
    Ok(grad)
}

/// Mean generalized cross-entropy over a minibatch.
pub fn mean_gce_loss(params: &LinearParams, batch: &Minibatch<'_>, targets: &[SoftTarget], q: f64) -> Result<f64> {
    check_batch(params, batch, targets)?;
    let mut total = 0.0;
    for (x, t) in batch.inputs.iter().zip(targets) {
        total += gce_loss(&softmax_forward(params, x)?, t, q)?;
    }
    Ok(total / batch.len() as f64)
}

/// Exact gradient of [`mean_gce_loss`].
pub fn grad_linear_gce(
    params: &LinearParams,
    batch: &Minibatch<'_>,
    targets: &[SoftTarget],
    q: f64,
) -> Result<Vec<f64>> {
    check_gce_q(q)?;
    check_batch(params, batch, targets)?;
    let mut grad = vec![0.0; params.weights.len()];
    let scale = 1.0 / batch.len() as f64;
    for (x, t) in batch.inputs.iter().zip(targets) {
        let p = softmax_forward(params, x)?;
        accumulate_outer(&mut grad, x, &gce_logit_grad(&p, t, q), scale);
    }
    Ok(grad)
}

/// `params − lr·grad`.
pub fn sgd_step(params: &LinearParams, grad: &[f64], lr: f64) -> Result<LinearParams> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::Parameter("learning rate must be positive and finite".into()));
    }
    if grad.len() != params.weights.len() {
        return Err(Error::DimensionMismatch {
            expected: params.weights.len(),
            got: grad.len(),
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    let weights = params.weights.iter().zip(grad).map(|(w, g)| w - lr * g).collect();
    LinearParams::from_weights(params.dim, params.classes, weights)
}

/// Elementwise relative error with the [`FD_REL_FLOOR`] denominator floor.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(FD_REL_FLOOR))
        .fold(0.0, f64::max)
}

/// Central finite differences of [`mean_ce_loss`] against [`grad_linear_ce`];
/// returns the largest relative discrepancy.
pub fn finite_diff_check(
    params: &LinearParams,
    batch: &Minibatch<'_>,
    targets: &[SoftTarget],
    eps: f64,
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::Parameter("finite-difference step must be positive".into()));
    }
    let analytic = grad_linear_ce(params, batch, targets)?;
    let mut numeric = vec![0.0; analytic.len()];
    let mut probe = params.clone();
    for (i, slot) in numeric.iter_mut().enumerate() {
        let base = params.weights[i];
        probe.weights[i] = base + eps;
        let plus = mean_ce_loss(&probe, batch, targets)?;
        probe.weights[i] = base - eps;
        let minus = mean_ce_loss(&probe, batch, targets)?;
        probe.weights[i] = base;
        *slot = (plus - minus) / (2.0 * eps);
    }
    Ok(max_relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn pv(v: &[f64]) -> ProbVec {
        ProbVec::new(v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let zero = LinearParams::zeros(4, 3).unwrap();
        let p = softmax_forward(&zero, &[1.0, -2.0, 0.5, 3.0]).unwrap();
        for &v in p.as_slice() {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let params = LinearParams::from_columns(&[vec![1.0], vec![-1.0]]).unwrap();
        assert_eq!(softmax_forward(&params, &[0.0]).unwrap().as_slice(), &[0.5, 0.5]);
        let p = softmax_forward(&params, &[1.0]).unwrap();
        assert_abs_diff_eq!(p.as_slice()[0], 0.880797, epsilon = 1e-6);
        assert_abs_diff_eq!(p.as_slice()[1], 0.119203, epsilon = 1e-6);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = softmax(&[1000.0, 999.0, -1000.0]);
        assert!(p.as_slice().iter().all(|v| v.is_finite()));
        assert_abs_diff_eq!(p.as_slice().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn forward_rejects_dimension_mismatch() {
        let params = LinearParams::zeros(3, 2).unwrap();
        assert_eq!(
            softmax_forward(&params, &[1.0, 2.0]),
            Err(Error::DimensionMismatch { expected: 3, got: 2 })
        );
    }

    #[test]
    fn params_validation() {
        assert!(LinearParams::zeros(0, 2).is_err());
        assert!(LinearParams::zeros(2, 1).is_err());
        assert!(LinearParams::from_weights(1, 2, vec![f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn confidence_and_pseudo_label() {
        assert_abs_diff_eq!(confidence(&ProbVec::uniform(3)), 1.0 / 3.0);
        assert_abs_diff_eq!(confidence(&pv(&[0.880797, 0.119203])), 0.880797);
        assert_eq!(confidence(&ProbVec::one_hot(1, 3)), 1.0);
        assert_eq!(pseudo_label(&pv(&[0.1, 0.7, 0.2])), 1);
        assert_eq!(pseudo_label(&pv(&[0.5, 0.5])), 0);
        assert_eq!(pseudo_label(&pv(&[0.2, 0.2, 0.6])), 2);
    }

    #[test]
    fn ce_examples() {
        assert_eq!(ce_soft_loss(&ProbVec::one_hot(1, 3), &SoftTarget::one_hot(1, 3)), 0.0);
        assert_abs_diff_eq!(
            ce_soft_loss(&pv(&[0.5, 0.5]), &SoftTarget::one_hot(0, 2)),
            core::f64::consts::LN_2,
            epsilon = 1e-12
        );
        let half = SoftTarget::new(vec![0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(
            ce_soft_loss(&pv(&[0.5, 0.5]), &half),
            core::f64::consts::LN_2,
            epsilon = 1e-12
        );
        // zero probability on the target class hits the clamp, not infinity
        let l = ce_soft_loss(&ProbVec::one_hot(0, 2), &SoftTarget::one_hot(1, 2));
        assert_abs_diff_eq!(l, -libm::log(1e-12), epsilon = 1e-9);
    }

    #[test]
    fn gce_examples() {
        let p = pv(&[0.3, 0.6, 0.1]);
        assert_abs_diff_eq!(
            gce_loss(&p, &SoftTarget::one_hot(1, 3), 1.0).unwrap(),
            0.4,
            epsilon = 1e-15
        );
        assert_eq!(
            gce_loss(&ProbVec::one_hot(0, 2), &SoftTarget::one_hot(0, 2), 0.8).unwrap(),
            0.0
        );
        assert_abs_diff_eq!(
            gce_loss(&pv(&[0.5, 0.5]), &SoftTarget::one_hot(0, 2), 0.8).unwrap(),
            0.532064,
            epsilon = 1e-6
        );
        assert!(matches!(
            gce_loss(&p, &SoftTarget::one_hot(0, 3), 0.0),
            Err(Error::Parameter(_))
        ));
        assert!(gce_loss(&p, &SoftTarget::one_hot(0, 3), 1.5).is_err());
    }

    #[test]
    fn gradient_zero_when_targets_match_outputs() {
        let params = LinearParams::from_columns(&[vec![0.3, -0.2], vec![0.1, 0.4], vec![-0.5, 0.0]]).unwrap();
        let xs = [[1.0, 2.0], [-0.5, 0.3]];
        let batch = Minibatch::new(xs.iter().map(|x| &x[..]).collect(), vec![0, 1]).unwrap();
        let targets: Vec<SoftTarget> = xs
            .iter()
            .map(|x| SoftTarget::from_prob(&softmax_forward(&params, x).unwrap()))
            .collect();
        let g = grad_linear_ce(&params, &batch, &targets).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn gradient_hand_example() {
        // logits (a, 0) with softmax(a, 0) = (0.6, 0.4)
        let a = libm::log(1.5);
        let params = LinearParams::from_columns(&[vec![a], vec![0.0]]).unwrap();
        let x = [1.0];
        let batch = Minibatch::new(vec![&x[..]], vec![0]).unwrap();
        let g = grad_linear_ce(&params, &batch, &[SoftTarget::one_hot(0, 2)]).unwrap();
        assert_abs_diff_eq!(g[0], -0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(g[1], 0.4, epsilon = 1e-12);
    }

    #[test]
    fn sgd_examples() {
        let p = LinearParams::from_weights(1, 2, vec![1.0, -3.0]).unwrap();
        assert_eq!(sgd_step(&p, &[0.0, 0.0], 0.5).unwrap(), p);
        let q = sgd_step(&p, &[2.0, 0.0], 0.1).unwrap();
        assert_abs_diff_eq!(q.get(0, 0), 0.8, epsilon = 1e-15);
        let g = [0.25, -0.5];
        let twice = sgd_step(&sgd_step(&p, &g, 0.5).unwrap(), &g, 0.5).unwrap();
        assert_eq!(twice.weights(), &[1.0 - 0.25, -3.0 + 0.5]);
        assert!(matches!(sgd_step(&p, &[f64::NAN, 0.0], 0.1), Err(Error::Numeric(_))));
        assert!(sgd_step(&p, &g, 0.0).is_err());
    }

    /// Test-side loss, written without touching the crate's softmax or CE.
    fn oracle_loss(w: &[f64], d: usize, k: usize, xs: &[Vec<f64>], ts: &[Vec<f64>]) -> f64 {
        let mut total = 0.0;
        for (x, t) in xs.iter().zip(ts) {
            let z: Vec<f64> = (0..k).map(|c| (0..d).map(|j| w[j * k + c] * x[j]).sum()).collect();
            let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
            total -= t.iter().zip(&z).map(|(tc, zc)| tc * (zc - lse)).sum::<f64>();
        }
        total / xs.len() as f64
    }

    fn random_problem(seed: u64) -> (LinearParams, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut r = rng::seeded(seed);
        let d = r.gen_range(1..=10);
        let k = r.gen_range(2..=5);
        let b = r.gen_range(1..=8);
        let w = (0..d * k).map(|_| rng::gaussian(&mut r)).collect();
        let xs = (0..b)
            .map(|_| (0..d).map(|_| rng::gaussian(&mut r)).collect())
            .collect();
        let ts = (0..b)
            .map(|_| {
                let raw: Vec<f64> = (0..k).map(|_| r.gen::<f64>() + 0.01).collect();
                let s: f64 = raw.iter().sum();
                // mass between 0.5 and 3 exercises the unnormalized branch
                let mass = 0.5 + 2.5 * r.gen::<f64>();
                raw.into_iter().map(|v| mass * v / s).collect()
            })
            .collect();
        (LinearParams::from_weights(d, k, w).unwrap(), xs, ts)
    }

    #[test]
    fn gradient_matches_independent_finite_differences() {
        for seed in 0..120 {
            let (params, xs, ts) = random_problem(seed);
            let (d, k) = (params.dim(), params.classes());
            let batch = Minibatch::new(xs.iter().map(|x| &x[..]).collect(), (0..xs.len()).collect()).unwrap();
            let targets: Vec<SoftTarget> = ts.iter().map(|t| SoftTarget::new(t.clone()).unwrap()).collect();
            let analytic = grad_linear_ce(&params, &batch, &targets).unwrap();
            let eps = 1e-6;
            let mut numeric = vec![0.0; d * k];
            for i in 0..d * k {
                let mut w = params.weights().to_vec();
                w[i] += eps;
                let plus = oracle_loss(&w, d, k, &xs, &ts);
                w[i] -= 2.0 * eps;
                let minus = oracle_loss(&w, d, k, &xs, &ts);
                numeric[i] = (plus - minus) / (2.0 * eps);
            }
            let err = max_relative_error(&analytic, &numeric);
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn finite_diff_check_examples() {
        let (params, xs, ts) = random_problem(7);
        let batch = Minibatch::new(xs.iter().map(|x| &x[..]).collect(), (0..xs.len()).collect()).unwrap();
        let targets: Vec<SoftTarget> = ts.iter().map(|t| SoftTarget::new(t.clone()).unwrap()).collect();
        assert!(finite_diff_check(&params, &batch, &targets, 1e-5).unwrap() < 1e-4);
        assert!(finite_diff_check(&params, &batch, &targets, 1e-6).unwrap() < 1e-4);

        let zero = LinearParams::zeros(3, 3).unwrap();
        let xs3 = [[1.0, 0.0, -1.0], [0.5, 0.5, 0.5], [2.0, -1.0, 0.0], [0.0, 0.1, 0.2]];
        let batch3 = Minibatch::new(xs3.iter().map(|x| &x[..]).collect(), (0..4).collect()).unwrap();
        let uniform = vec![SoftTarget::from_prob(&ProbVec::uniform(3)); 4];
        assert!(finite_diff_check(&zero, &batch3, &uniform, 1e-5).unwrap() < 1e-5);
        assert!(finite_diff_check(&zero, &batch3, &uniform, 0.0).is_err());
    }

    #[test]
    fn gce_gradient_matches_finite_differences() {
        for seed in 0..40 {
            let (params, xs, ts) = random_problem(1000 + seed);
            let batch = Minibatch::new(xs.iter().map(|x| &x[..]).collect(), (0..xs.len()).collect()).unwrap();
            let targets: Vec<SoftTarget> = ts.iter().map(|t| SoftTarget::new(t.clone()).unwrap()).collect();
            let q = 0.8;
            let analytic = grad_linear_gce(&params, &batch, &targets, q).unwrap();
            let eps = 1e-6;
            let mut numeric = vec![0.0; analytic.len()];
            for i in 0..analytic.len() {
                let mut w = params.weights().to_vec();
                w[i] += eps;
                let plus = mean_gce_loss(
                    &LinearParams::from_weights(params.dim(), params.classes(), w.clone()).unwrap(),
                    &batch,
                    &targets,
                    q,
                )
                .unwrap();
                w[i] -= 2.0 * eps;
                let minus = mean_gce_loss(
                    &LinearParams::from_weights(params.dim(), params.classes(), w).unwrap(),
                    &batch,
                    &targets,
                    q,
                )
                .unwrap();
                numeric[i] = (plus - minus) / (2.0 * eps);
            }
            assert!(max_relative_error(&analytic, &numeric) < 1e-5, "seed {seed}");
        }
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            z in proptest::collection::vec(-50.0f64..50.0, 2..8),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax(&z);
            prop_assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < SIMPLEX_TOL);
            let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
            let q = softmax(&shifted);
            for (a, b) in p.as_slice().iter().zip(q.as_slice()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn gce_with_unit_q_is_linear_loss(
            raw in proptest::collection::vec(0.01f64..1.0, 2..6),
            traw in proptest::collection::vec(0.0f64..2.0, 6),
        ) {
            let s: f64 = raw.iter().sum();
            let p = ProbVec::new(raw.iter().map(|v| v / s).collect()).unwrap();
            let mut t: Vec<f64> = traw[..p.len()].to_vec();
            t[0] += 0.1;
            let t = SoftTarget::new(t).unwrap();
            let expected: f64 = t.values().iter().zip(p.as_slice()).map(|(tk, pk)| tk * (1.0 - pk)).sum();
            prop_assert!((gce_loss(&p, &t, 1.0).unwrap() - expected).abs() < 1e-12);
        }

        #[test]
        fn ce_nonnegative_for_probability_targets(
            raw in proptest::collection::vec(0.0f64..1.0, 3),
            traw in proptest::collection::vec(0.0f64..1.0, 3),
        ) {
            let s: f64 = raw.iter().sum::<f64>() + 1e-9;
            let p = ProbVec::new(raw.iter().map(|v| (v + 1e-9 / 3.0) / s).collect()).unwrap();
            let ts: f64 = traw.iter().sum::<f64>() + 1e-9;
            let t = SoftTarget::new(traw.iter().map(|v| (v + 1e-9 / 3.0) / ts).collect()).unwrap();
            prop_assert!(ce_soft_loss(&p, &t) >= 0.0);
        }
    }
}
