//! Numerical checks of the concentration and convergence guarantees.
//!
//! Two groups of quantities live here. The first is probabilistic: `xi`, the
//! Chernoff-style tail bound for sums of independent Bernoulli trials, its
//! Monte-Carlo counterpart, and a simulation of the majority-vote error of a
//! temporal ensemble fed with independent hard predictions. The second works
//! on small convex instances with an exactly solved optimum `θ*`: the bias
//! direction `ĝ`, the optimal smoothing coefficient `λ†`, the neighborhood
//! size `N(λ)` and the pseudo-label quality terms `g^E`, `g^KL`, `g^C`.
//!
//! [`verify_suite`] runs all of it and returns one [`Check`] per quantity.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ancon::{AnconConfig, EnsembleBank, PredictionScheme};
use crate::data::{self, ClusterSpec, Dataset, ShiftKind, ShiftSpec};
use crate::math;
use crate::model::{self, LinearParams, Minibatch, Prediction, ProbVec, SoftTarget};
use crate::rng;
use crate::selftrain::{self, AdaptConfig, Adaptation, SourceConfig, Strategy};
use crate::{Error, Result};

/// Additive smoothing applied to ensemble distributions before a KL divergence.
pub const KL_EPS: f64 = 1e-12;

/// Default for the product of the smoothness constant and the step size.
pub const DEFAULT_L_GAMMA: f64 = 2.0;

/// Default ridge used when solving for `θ*`.
pub const DEFAULT_RIDGE: f64 = 1e-6;

const SOLVER_MAX_ITERS: usize = 200_000;

/// `2z − 1 − ln(2z)`, zero at `z = 1/2` and increasing on `[1/2, 1]`.
pub fn xi(z: f64) -> f64 {
    2.0 * z - 1.0 - math::log(2.0 * z)
}

fn mean_prob(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::Input("at least one trial probability is required".into()));
    }
    if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Input("trial probabilities must lie in [0, 1]".into()));
    }
    Ok(math::mean(p))
}

/// Upper bound on `P(S_o ≤ q·o)` for `S_o` a sum of independent Bernoulli(p_i):
/// `exp(o·(q − p̄ − q·ln(q/p̄)))`, valid for `0 ≤ q < p̄`.
pub fn chernoff_tail_bound(p: &[f64], q: f64) -> Result<f64> {
    let p_bar = mean_prob(p)?;
    if !(q >= 0.0) || q >= p_bar {
        return Err(Error::Precondition(format!(
            "tail level {q} must lie in [0, p̄ = {p_bar})"
        )));
    }
    let o = p.len() as f64;
    // q·ln(q/p̄) → 0 as q → 0
    let entropy_term = if q == 0.0 { 0.0 } else { q * math::log(q / p_bar) };
    Ok(math::exp(o * (q - p_bar - entropy_term)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
}

impl McEstimate {
    fn from_hits(hits: u64, trials: u64) -> Self {
        let estimate = hits as f64 / trials as f64;
        Self {
            estimate,
            std_error: math::sqrt(estimate * (1.0 - estimate) / trials as f64),
        }
    }
}

/// Seeded Monte-Carlo estimate of `P(S_o ≤ q·o)`.
pub fn mc_tail_estimate(p: &[f64], q: f64, trials: u64, seed: u64) -> Result<McEstimate> {
    mean_prob(p)?;
    if trials == 0 {
        return Err(Error::Parameter("at least one trial is required".into()));
    }
    let level = q * p.len() as f64 + 1e-9;
    let mut r = rng::seeded(seed);
    let mut hits = 0u64;
    for _ in 0..trials {
        let successes = p.iter().filter(|&&pi| r.gen::<f64>() < pi).count();
        if successes as f64 <= level {
            hits += 1;
        }
    }
    Ok(McEstimate::from_hits(hits, trials))
}

/// Majority-vote error of a temporal ensemble fed `count` independent hard
/// predictions, each correct with probability `p_bar` and otherwise uniform
/// over the wrong classes. Each trial runs a fresh [`EnsembleBank`] with unit
/// weights; a tie for the top count is an error.
pub fn ensemble_error_rate(p_bar: f64, count: usize, classes: usize, trials: u64, seed: u64) -> Result<McEstimate> {
    if !(0.0..=1.0).contains(&p_bar) || classes < 2 || count == 0 || trials == 0 {
        return Err(Error::Parameter(
            "need p̄ in [0, 1], at least two classes, one step and one trial".into(),
        ));
    }
    let truth = 0;
    let hard: Vec<Prediction> = (0..classes)
        .map(|k| Prediction::from_probs(ProbVec::one_hot(k, classes)))
        .collect();
    let mut r = rng::seeded(seed);
    let mut errors = 0u64;
    for _ in 0..trials {
        let mut bank = EnsembleBank::new(1, classes);
        for _ in 0..count {
            let vote = if r.gen::<f64>() < p_bar {
                truth
            } else {
                r.gen_range(1..classes)
            };
            bank.ensemble_update(0, &hard[vote], 1.0, PredictionScheme::Hard)?;
        }
        let counts = bank.counts(0);
        let top = counts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let winners = counts.iter().filter(|&&c| c == top).count();
        if counts[truth] != top || winners > 1 {
            errors += 1;
        }
    }
    Ok(McEstimate::from_hits(errors, trials))
}

fn full_batch(dataset: &Dataset) -> Result<Minibatch<'_>> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    dataset.minibatch(&all)
}

fn ridge_objective(params: &LinearParams, batch: &Minibatch<'_>, targets: &[SoftTarget], ridge: f64) -> Result<f64> {
    let norm = params.frobenius_norm();
    Ok(model::mean_ce_loss(params, batch, targets)? + 0.5 * ridge * norm * norm)
}

fn ridge_gradient(
    params: &LinearParams,
    batch: &Minibatch<'_>,
    targets: &[SoftTarget],
    ridge: f64,
) -> Result<Vec<f64>> {
    let mut g = model::grad_linear_ce(params, batch, targets)?;
    for (gi, wi) in g.iter_mut().zip(params.weights()) {
        *gi += ridge * wi;
    }
    Ok(g)
}

/// Minimizer of mean cross-entropy plus `ridge·‖θ‖²/2` on the labeled
/// dataset, by full-batch gradient descent with backtracking from zero.
/// Stops once the gradient norm is at most `tol`.
pub fn solve_theta_star(dataset: &Dataset, classes: usize, ridge: f64, tol: f64) -> Result<LinearParams> {
    let labels = dataset
        .labels()
        .ok_or_else(|| Error::Input("solving for θ* requires labels".into()))?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(ridge >= 0.0) || !(tol > 0.0) {
        return Err(Error::Parameter(
            "ridge must be nonnegative and tolerance positive".into(),
        ));
    }
    let batch = full_batch(dataset)?;
    let targets: Vec<SoftTarget> = labels.iter().map(|&y| SoftTarget::one_hot(y, classes)).collect();

    let mut params = LinearParams::zeros(dataset.dim(), classes)?;
    let mut value = ridge_objective(&params, &batch, &targets, ridge)?;
    let mut step = 1.0;
    let mut grad_norm = f64::INFINITY;
    for _ in 0..SOLVER_MAX_ITERS {
        let g = ridge_gradient(&params, &batch, &targets, ridge)?;
        grad_norm = math::norm2(&g);
        if grad_norm <= tol {
            return Ok(params);
        }
        loop {
            let candidate = model::sgd_step(&params, &g, step)?;
            let next = ridge_objective(&candidate, &batch, &targets, ridge)?;
            if next <= value - 0.5 * step * grad_norm * grad_norm {
                params = candidate;
                value = next;
                step *= 2.0;
                break;
            }
            step *= 0.5;
            if step < 1e-16 {
                return Err(Error::NonConvergence {
                    iterations: SOLVER_MAX_ITERS,
                    grad_norm,
                });
            }
        }
    }
    Err(Error::NonConvergence {
        iterations: SOLVER_MAX_ITERS,
        grad_norm,
    })
}

/// Normalized ensemble distribution for `instance`, or the one-hot pseudo
/// label where the instance has no accumulated mass.
fn ensemble_or_pseudo(bank: &EnsembleBank, instance: usize, pseudo: usize) -> Vec<f64> {
    match bank.ensemble_distribution(instance) {
        Some(d) => d.into_inner(),
        None => ProbVec::one_hot(pseudo, bank.classes()).into_inner(),
    }
}

fn check_bank(bank: &EnsembleBank, params: &LinearParams, dataset: &Dataset) -> Result<()> {
    if bank.instances() != dataset.len() || bank.classes() != params.classes() {
        return Err(Error::DimensionMismatch {
            expected: dataset.len(),
            got: bank.instances(),
        });
    }
    Ok(())
}

/// `ĝ = (1/b) Σ x_i ⊗ (f̄(x_i) − Ŷ(x_i))`, with `Ŷ` the one-hot pseudo label
/// under `theta_m`. Row-major `d×K`, like [`LinearParams::weights`].
pub fn hat_g(batch: &Minibatch<'_>, theta_m: &LinearParams, bank: &EnsembleBank) -> Result<Vec<f64>> {
    let k = theta_m.classes();
    if bank.classes() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: bank.classes(),
        });
    }
    let mut out = vec![0.0; theta_m.weights().len()];
    let scale = 1.0 / batch.len() as f64;
    for (x, &idx) in batch.inputs.iter().zip(&batch.indices) {
        if idx >= bank.instances() {
            return Err(Error::IndexOutOfRange {
                index: idx,
                len: bank.instances(),
            });
        }
        let pseudo = model::predict(theta_m, x)?.label();
        let mut r = ensemble_or_pseudo(bank, idx, pseudo);
        r[pseudo] -= 1.0;
        model::accumulate_outer(&mut out, x, &r, scale);
    }
    Ok(out)
}

/// Minibatch gradient of the pseudo-labeled loss at `theta_star`, with pseudo
/// labels taken from `theta_m`.
pub fn grad_star(batch: &Minibatch<'_>, theta_star: &LinearParams, theta_m: &LinearParams) -> Result<Vec<f64>> {
    let targets = batch
        .inputs
        .iter()
        .map(|x| {
            Ok(SoftTarget::one_hot(
                model::predict(theta_m, x)?.label(),
                theta_m.classes(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    model::grad_linear_ce(theta_star, batch, &targets)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaDagger {
    pub value: f64,
    /// Set when every `ĝ` sample is zero; `value` is then 0.
    pub degenerate: bool,
}

/// Sample moments `(E⟨a,g⟩, E‖a‖², E‖g‖², ‖Eg‖²)`.
fn moments(a: &[Vec<f64>], g: &[Vec<f64>]) -> Result<(f64, f64, f64, f64)> {
    if a.is_empty() || a.len() != g.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len().max(1),
            got: g.len(),
        });
    }
    let dim = a[0].len();
    if a.iter().chain(g).any(|v| v.len() != dim) {
        return Err(Error::Input("gradient samples must share one dimension".into()));
    }
    let m = a.len() as f64;
    let mut cross = 0.0;
    let mut a_sq = 0.0;
    let mut g_sq = 0.0;
    let mut g_mean = vec![0.0; dim];
    for (ai, gi) in a.iter().zip(g) {
        cross += math::dot(ai, gi);
        a_sq += math::sq_norm(ai);
        g_sq += math::sq_norm(gi);
        for (s, v) in g_mean.iter_mut().zip(gi) {
            *s += v / m;
        }
    }
    Ok((cross / m, a_sq / m, g_sq / m, math::sq_norm(&g_mean)))
}

fn check_l_gamma(l_gamma: f64) -> Result<()> {
    if l_gamma > 0.0 && l_gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter("L·γ must be positive and finite".into()))
    }
}

/// `λ† = E⟨a, g⟩ / (E‖g‖² + (2/Lγ)‖Eg‖²)` over paired samples of the gradient
/// at `θ*` (`a`) and the bias direction (`g`). Negative values are returned
/// as they are.
pub fn lambda_dagger(grad_star: &[Vec<f64>], hat_g: &[Vec<f64>], l_gamma: f64) -> Result<LambdaDagger> {
    check_l_gamma(l_gamma)?;
    let (cross, _, g_sq, g_mean_sq) = moments(grad_star, hat_g)?;
    if g_sq == 0.0 {
        return Ok(LambdaDagger {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(LambdaDagger {
        value: cross / (g_sq + 2.0 / l_gamma * g_mean_sq),
        degenerate: false,
    })
}

/// `N(λ) = λ²‖Eg‖² + (Lγ/2)·E‖a − λg‖²`.
pub fn neighborhood_n(lambda: f64, grad_star: &[Vec<f64>], hat_g: &[Vec<f64>], l_gamma: f64) -> Result<f64> {
    check_l_gamma(l_gamma)?;
    let (_, _, _, g_mean_sq) = moments(grad_star, hat_g)?;
    let spread = grad_star
        .iter()
        .zip(hat_g)
        .map(|(a, g)| {
            a.iter()
                .zip(g)
                .map(|(ai, gi)| (ai - lambda * gi) * (ai - lambda * gi))
                .sum::<f64>()
        })
        .sum::<f64>()
        / grad_star.len() as f64;
    Ok(lambda * lambda * g_mean_sq + 0.5 * l_gamma * spread)
}

/// The predicted relative reduction `1 − N(λ†)/N(0)` in closed form:
/// `E⟨a,g⟩² / ((E‖g‖² + (2/Lγ)‖Eg‖²)·E‖a‖²)`.
pub fn predicted_reduction(grad_star: &[Vec<f64>], hat_g: &[Vec<f64>], l_gamma: f64) -> Result<f64> {
    check_l_gamma(l_gamma)?;
    let (cross, a_sq, g_sq, g_mean_sq) = moments(grad_star, hat_g)?;
    let denom = (g_sq + 2.0 / l_gamma * g_mean_sq) * a_sq;
    if denom == 0.0 {
        return Err(Error::Precondition("reduction undefined for zero samples".into()));
    }
    Ok(cross * cross / denom)
}

/// Denominator floor for [`identity_residual`]; below it the direct form's
/// cancellation error dominates any relative comparison.
pub const RESIDUAL_FLOOR: f64 = 1e-4;

/// Relative gap between the closed-form reduction and `1 − N(λ†)/N(0)`
/// evaluated directly.
pub fn identity_residual(grad_star: &[Vec<f64>], hat_g: &[Vec<f64>], l_gamma: f64) -> Result<f64> {
    let closed = predicted_reduction(grad_star, hat_g, l_gamma)?;
    let lam = lambda_dagger(grad_star, hat_g, l_gamma)?.value;
    let direct =
        1.0 - neighborhood_n(lam, grad_star, hat_g, l_gamma)? / neighborhood_n(0.0, grad_star, hat_g, l_gamma)?;
    Ok(math::fabs(closed - direct) / closed.max(RESIDUAL_FLOOR))
}

/// Pseudo-label error rate `E[1(Ŷ ≠ Y)]`.
pub fn g_error(params: &LinearParams, dataset: &Dataset) -> Result<f64> {
    Ok(1.0 - selftrain::evaluate_accuracy(params, dataset)?)
}

/// Mean `KL(f(x; θ*) ‖ f̄(x))` over instances with ensemble mass; the ensemble
/// side is smoothed by [`KL_EPS`] and renormalized.
pub fn g_kl(theta_star: &LinearParams, bank: &EnsembleBank, dataset: &Dataset) -> Result<f64> {
    check_bank(bank, theta_star, dataset)?;
    let k = bank.classes() as f64;
    let mut total = 0.0;
    let mut covered = 0usize;
    for i in 0..dataset.len() {
        let Some(fbar) = bank.ensemble_distribution(i) else {
            continue;
        };
        let p = model::softmax_forward(theta_star, dataset.row(i))?;
        total += p
            .as_slice()
            .iter()
            .zip(fbar.as_slice())
            .filter(|(pk, _)| **pk > 0.0)
            .map(|(pk, qk)| pk * math::log(pk * (1.0 + k * KL_EPS) / (qk + KL_EPS)))
            .sum::<f64>();
        covered += 1;
    }
    if covered == 0 {
        return Err(Error::Precondition("no instance has accumulated ensemble mass".into()));
    }
    Ok(total / covered as f64)
}

/// `‖E[f̄] − E[Ŷ]‖²`, with pseudo labels from `params_m` and uncovered
/// instances contributing their one-hot pseudo label on both sides.
pub fn g_c(bank: &EnsembleBank, params_m: &LinearParams, dataset: &Dataset) -> Result<f64> {
    check_bank(bank, params_m, dataset)?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = dataset.len() as f64;
    let mut gap = vec![0.0; bank.classes()];
    for i in 0..dataset.len() {
        let pseudo = model::predict(params_m, dataset.row(i))?.label();
        for (s, v) in gap.iter_mut().zip(ensemble_or_pseudo(bank, i, pseudo)) {
            *s += v / n;
        }
        gap[pseudo] -= 1.0 / n;
    }
    Ok(math::sq_norm(&gap))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstanceSpec {
    pub classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    pub spread: f64,
    /// Feature norm bound `C`; rows are clipped to it.
    pub support_bound: f64,
    pub shift_intensity: u8,
    pub ridge: f64,
    pub tol: f64,
    pub l_gamma: f64,
    pub adapt_epochs: usize,
    pub seed: u64,
}

impl Default for InstanceSpec {
    fn default() -> Self {
        Self {
            classes: 3,
            dim: 4,
            n_per_class: 60,
            spread: 0.6,
            support_bound: 3.0,
            shift_intensity: 2,
            ridge: DEFAULT_RIDGE,
            tol: 1e-7,
            l_gamma: DEFAULT_L_GAMMA,
            adapt_epochs: 3,
            seed: 0,
        }
    }
}

/// Paired gradient samples `(a, g)`, one vector per draw.
pub type GradientSamples = (Vec<Vec<f64>>, Vec<Vec<f64>>);

/// A small convex problem: bounded-support target data, its solved optimum
/// `θ*`, and a short AnCon adaptation from a source model giving `θ_m` and a
/// populated ensemble bank.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryInstance {
    pub dataset: Dataset,
    pub theta_star: LinearParams,
    pub theta_m: LinearParams,
    pub bank: EnsembleBank,
    pub l_gamma: f64,
}

impl TheoryInstance {
    pub fn build(spec: &InstanceSpec) -> Result<Self> {
        check_l_gamma(spec.l_gamma)?;
        let clusters = ClusterSpec {
            classes: spec.classes,
            dim: spec.dim,
            n_per_class: spec.n_per_class,
            spread: spec.spread,
            radius: 1.0,
            seed: spec.seed,
        };
        let source = data::gen_clusters(&clusters, 0)?.clip_to_norm(spec.support_bound)?;
        let shifted = data::apply_shift(
            &data::gen_clusters(&clusters, 1)?,
            &ShiftSpec::new(ShiftKind::Rotation, spec.shift_intensity, spec.seed),
        )?;
        let dataset = shifted.clip_to_norm(spec.support_bound)?;
        let theta_star = solve_theta_star(&dataset, spec.classes, spec.ridge, spec.tol)?;
        let init = selftrain::train_source(
            &source,
            spec.classes,
            &SourceConfig {
                epochs: 20,
                seed: spec.seed,
                ..Default::default()
            },
        )?
        .params;

        let unlabeled = dataset.without_labels();
        let empty = Dataset::new(spec.dim, Vec::new(), None, "none")?;
        let config = AdaptConfig {
            strategy: Strategy::Ancon,
            epochs: spec.adapt_epochs,
            batch_size: 16,
            seed: spec.seed,
            ancon: AnconConfig::default(),
            ..Default::default()
        };
        let mut run = Adaptation::new(&unlabeled, &empty, init, config)?;
        while !run.is_done() {
            run.run_epoch()?;
        }
        let state = run.into_state();
        let bank = state
            .bank
            .ok_or_else(|| Error::Numeric("ensemble strategy produced no bank".into()))?;
        Ok(Self {
            dataset,
            theta_star,
            theta_m: state.params,
            bank,
            l_gamma: spec.l_gamma,
        })
    }

    /// Paired minibatch samples `(∇l̃(θ*), ĝ)` over `draws` random batches.
    pub fn gradient_samples(&self, batch_size: usize, draws: usize, seed: u64) -> Result<GradientSamples> {
        if batch_size == 0 || batch_size > self.dataset.len() {
            return Err(Error::Parameter("batch size must be in 1..=n".into()));
        }
        let mut r = rng::seeded(seed);
        let mut order: Vec<usize> = (0..self.dataset.len()).collect();
        let mut a = Vec::with_capacity(draws);
        let mut g = Vec::with_capacity(draws);
        for _ in 0..draws {
            order.shuffle(&mut r);
            let batch = self.dataset.minibatch(&order[..batch_size])?;
            a.push(grad_star(&batch, &self.theta_star, &self.theta_m)?);
            g.push(hat_g(&batch, &self.theta_m, &self.bank)?);
        }
        Ok((a, g))
    }
}

/// One row of the verification report. `bound` is absent for descriptive rows,
/// which always pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub config_id: String,
    pub quantity: String,
    pub value: f64,
    pub bound: Option<f64>,
    pub pass: bool,
}

impl Check {
    fn upper(config_id: impl Into<String>, quantity: &str, value: f64, bound: f64) -> Self {
        Self {
            config_id: config_id.into(),
            quantity: quantity.into(),
            value,
            bound: Some(bound),
            pass: value <= bound,
        }
    }

    fn info(config_id: impl Into<String>, quantity: &str, value: f64) -> Self {
        Self {
            config_id: config_id.into(),
            quantity: quantity.into(),
            value,
            bound: None,
            pass: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub seed: u64,
    pub tail_configs: usize,
    pub mc_trials: u64,
    pub ensemble_p: f64,
    pub ensemble_counts: Vec<usize>,
    pub ensemble_classes: usize,
    pub sample_sets: usize,
    pub l_gamma: f64,
    pub instance: InstanceSpec,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tail_configs: 200,
            mc_trials: 100_000,
            ensemble_p: 0.7,
            ensemble_counts: vec![10, 25, 50, 100],
            ensemble_classes: 2,
            sample_sets: 100,
            l_gamma: DEFAULT_L_GAMMA,
            instance: InstanceSpec::default(),
        }
    }
}

/// Standard-error multiplier for Monte-Carlo comparisons.
pub const MC_SIGMAS: f64 = 3.0;

/// Spacing of the brute-force λ grid.
pub const LAMBDA_GRID_STEP: f64 = 1e-3;

/// Tail-bound checks: the `q = 1/2` form against `xi`, the fixed anchor, and
/// Monte-Carlo dominance over random configurations.
pub fn tail_checks(config: &VerifyConfig, xi_fn: fn(f64) -> f64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (z, expected) in [
        (0.5, 0.0),
        (0.7, 0.4 - math::log(1.4)),
        (1.0, 1.0 - core::f64::consts::LN_2),
    ] {
        let id = format!("xi-{z}");
        out.push(Check::upper(id, "xi_abs_error", math::fabs(xi_fn(z) - expected), 1e-12));
    }

    let anchor = [0.8; 10];
    let bound = chernoff_tail_bound(&anchor, 0.5)?;
    let mc = mc_tail_estimate(&anchor, 0.5, config.mc_trials, config.seed)?;
    out.push(Check::upper(
        "anchor",
        "half_form_abs_error",
        math::fabs(bound - math::exp(-5.0 * xi_fn(0.8))),
        1e-12,
    ));
    out.push(Check::upper(
        "anchor",
        "mc_tail",
        mc.estimate,
        bound + MC_SIGMAS * mc.std_error,
    ));

    let mut r = rng::seeded_stream(config.seed, 1);
    let mut worst_half = 0.0f64;
    let mut failures = 0usize;
    let mut worst_margin = f64::INFINITY;
    for c in 0..config.tail_configs {
        let o = r.gen_range(5..=30);
        let p: Vec<f64> = (0..o).map(|_| r.gen_range(0.3..=1.0)).collect();
        let p_bar = math::mean(&p);
        let q = r.gen_range(0.02..0.98) * p_bar;
        let bound = chernoff_tail_bound(&p, q)?;
        let mc = mc_tail_estimate(&p, q, config.mc_trials, config.seed.wrapping_add(1000 + c as u64))?;
        let margin = bound + MC_SIGMAS * mc.std_error - mc.estimate;
        worst_margin = worst_margin.min(margin);
        if margin < 0.0 {
            failures += 1;
        }
        if p_bar > 0.5 {
            let half = chernoff_tail_bound(&p, 0.5)?;
            worst_half = worst_half.max(math::fabs(half - math::exp(-(o as f64) / 2.0 * xi_fn(p_bar))));
        }
    }
    out.push(Check::upper("random-tails", "dominance_failures", failures as f64, 0.0));
    out.push(Check::info("random-tails", "worst_dominance_margin", worst_margin));
    out.push(Check::upper("random-tails", "half_form_abs_error", worst_half, 1e-12));
    Ok(out)
}

/// Majority-vote ensemble error against `exp(−(Q/2)·xi(p̄))` at each count,
/// plus monotonicity in the count within noise.
pub fn ensemble_checks(config: &VerifyConfig, xi_fn: fn(f64) -> f64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let mut prev: Option<McEstimate> = None;
    for (i, &count) in config.ensemble_counts.iter().enumerate() {
        let est = ensemble_error_rate(
            config.ensemble_p,
            count,
            config.ensemble_classes,
            config.mc_trials,
            config.seed.wrapping_add(2000 + i as u64),
        )?;
        let bound = math::exp(-(count as f64) / 2.0 * xi_fn(config.ensemble_p));
        let id = format!("ensemble-q{count}");
        out.push(Check::upper(
            id.clone(),
            "error_rate",
            est.estimate,
            bound + MC_SIGMAS * est.std_error,
        ));
        if let Some(p) = prev {
            let noise = MC_SIGMAS * math::sqrt(p.std_error * p.std_error + est.std_error * est.std_error);
            out.push(Check::upper(
                id,
                "increase_over_previous",
                est.estimate - p.estimate,
                noise,
            ));
        }
        prev = Some(est);
    }
    Ok(out)
}

/// Random Gaussian sample sets with a random mix of alignment between `a` and `g`.
pub fn random_sample_set(seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut r = rng::seeded(seed);
    let m = r.gen_range(1..=20);
    let dim = r.gen_range(1..=12);
    let mix = r.gen_range(-1.0..=1.0);
    let offset: Vec<f64> = (0..dim).map(|_| rng::gaussian(&mut r)).collect();
    let mut a = Vec::with_capacity(m);
    let mut g = Vec::with_capacity(m);
    for _ in 0..m {
        let ai: Vec<f64> = (0..dim).map(|_| rng::gaussian(&mut r)).collect();
        let gi: Vec<f64> = ai
            .iter()
            .zip(&offset)
            .map(|(v, o)| mix * v + 0.5 * o + rng::gaussian(&mut r))
            .collect();
        a.push(ai);
        g.push(gi);
    }
    (a, g)
}

/// Neighborhood checks on one sample set: identity residual, `N(λ†) ≤ N(0)`,
/// and the λ grid never beating `λ†`. Returns `(residual, N(λ†) − N(0),
/// best grid improvement relative to N(0))`.
pub fn neighborhood_stats(a: &[Vec<f64>], g: &[Vec<f64>], l_gamma: f64) -> Result<(f64, f64, f64)> {
    let lam = lambda_dagger(a, g, l_gamma)?;
    let n0 = neighborhood_n(0.0, a, g, l_gamma)?;
    let n_opt = neighborhood_n(lam.value, a, g, l_gamma)?;
    let residual = if lam.degenerate {
        0.0
    } else {
        identity_residual(a, g, l_gamma)?
    };
    let steps = (4.0 / LAMBDA_GRID_STEP) as usize;
    let mut best_gain = f64::NEG_INFINITY;
    for s in 0..=steps {
        let l = -2.0 + s as f64 * LAMBDA_GRID_STEP;
        best_gain = best_gain.max((n_opt - neighborhood_n(l, a, g, l_gamma)?) / n0);
    }
    Ok((residual, n_opt - n0, best_gain))
}

pub fn neighborhood_checks(config: &VerifyConfig) -> Result<Vec<Check>> {
    let mut worst_residual = 0.0f64;
    let mut worst_gap = f64::NEG_INFINITY;
    let mut worst_gain = f64::NEG_INFINITY;
    for s in 0..config.sample_sets {
        let (a, g) = random_sample_set(config.seed.wrapping_mul(7919).wrapping_add(s as u64));
        let (res, gap, gain) = neighborhood_stats(&a, &g, config.l_gamma)?;
        worst_residual = worst_residual.max(res);
        worst_gap = worst_gap.max(gap);
        worst_gain = worst_gain.max(gain);
    }
    Ok(alloc::vec![
        Check::upper("random-samples", "identity_rel_residual", worst_residual, 1e-10),
        Check::upper("random-samples", "n_opt_minus_n0", worst_gap, 0.0),
        Check::upper("random-samples", "grid_rel_improvement", worst_gain, 1e-12),
    ])
}

/// Checks on a solved convex instance: optimality of `θ*`, the gradient
/// decomposition, `λ†`, and the descriptive pseudo-label quality terms.
pub fn instance_checks(config: &VerifyConfig) -> Result<Vec<Check>> {
    let spec = InstanceSpec {
        seed: config.seed,
        l_gamma: config.l_gamma,
        ..config.instance
    };
    let inst = TheoryInstance::build(&spec)?;
    let id = "instance";
    let mut out = Vec::new();

    let batch = full_batch(&inst.dataset)?;
    let labels = inst.dataset.labels().unwrap_or(&[]);
    let targets: Vec<SoftTarget> = labels.iter().map(|&y| SoftTarget::one_hot(y, spec.classes)).collect();
    let opt_grad = math::norm2(&ridge_gradient(&inst.theta_star, &batch, &targets, spec.ridge)?);
    out.push(Check::upper(id, "theta_star_grad_norm", opt_grad, spec.tol));

    let support = (0..inst.dataset.len())
        .map(|i| math::norm2(inst.dataset.row(i)))
        .fold(0.0, f64::max);
    out.push(Check::upper(
        id,
        "max_feature_norm",
        support,
        spec.support_bound + 1e-12,
    ));

    // g_ξ = ∇l̃(θ) − λ·ĝ against the CE gradient on normalized smoothed targets
    let lambda = AnconConfig::default().lambda;
    let idx: Vec<usize> = (0..inst.dataset.len().min(32)).collect();
    let sub = inst.dataset.minibatch(&idx)?;
    let pseudo_grad = grad_star(&sub, &inst.theta_m, &inst.theta_m)?;
    let bias = hat_g(&sub, &inst.theta_m, &inst.bank)?;
    let smooth = idx
        .iter()
        .zip(&sub.inputs)
        .map(|(&i, x)| {
            let pseudo = model::predict(&inst.theta_m, x)?.label();
            inst.bank
                .smooth_target(pseudo, i, lambda, crate::ancon::Normalization::Normalized)
        })
        .collect::<Result<Vec<_>>>()?;
    let direct = model::grad_linear_ce(&inst.theta_m, &sub, &smooth)?;
    let decomposition = direct
        .iter()
        .zip(pseudo_grad.iter().zip(&bias))
        .map(|(d, (p, b))| math::fabs(d - (p - lambda * b)))
        .fold(0.0, f64::max);
    out.push(Check::upper(id, "decomposition_abs_error", decomposition, 1e-10));

    let (a, g) = inst.gradient_samples(16, 64, config.seed.wrapping_add(3000))?;
    let lam = lambda_dagger(&a, &g, inst.l_gamma)?;
    let (residual, gap, _) = neighborhood_stats(&a, &g, inst.l_gamma)?;
    out.push(Check::info(id, "lambda_dagger", lam.value));
    out.push(Check::info(id, "alignment", moments(&a, &g)?.0));
    out.push(Check::upper(id, "identity_rel_residual", residual, 1e-10));
    out.push(Check::upper(id, "n_opt_minus_n0", gap, 0.0));
    if !lam.degenerate {
        out.push(Check::info(
            id,
            "relative_reduction",
            predicted_reduction(&a, &g, inst.l_gamma)?,
        ));
    }
    out.push(Check::info(id, "g_error", g_error(&inst.theta_m, &inst.dataset)?));
    out.push(Check::info(
        id,
        "g_kl",
        g_kl(&inst.theta_star, &inst.bank, &inst.dataset)?,
    ));
    out.push(Check::info(id, "g_c", g_c(&inst.bank, &inst.theta_m, &inst.dataset)?));
    Ok(out)
}

/// The full suite. `xi_fn` is normally [`xi`]; it is a parameter so that a
/// deliberately broken version can be shown to fail.
pub fn verify_suite(config: &VerifyConfig, xi_fn: fn(f64) -> f64) -> Result<Vec<Check>> {
    let mut out = tail_checks(config, xi_fn)?;
    out.extend(ensemble_checks(config, xi_fn)?);
    out.extend(neighborhood_checks(config)?);
    out.extend(instance_checks(config)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn xi_examples() {
        assert_eq!(xi(0.5), 0.0);
        assert_abs_diff_eq!(xi(1.0), 0.306853, epsilon = 1e-6);
        assert_abs_diff_eq!(xi(0.7), 0.063528, epsilon = 1e-6);
    }

    #[test]
    fn chernoff_examples() {
        let p = [0.8; 10];
        let b = chernoff_tail_bound(&p, 0.5).unwrap();
        // exponent 10·(0.5 − 0.8 − 0.5·ln(0.625))
        assert_abs_diff_eq!(b, 0.522055, epsilon = 1e-6);
        assert_abs_diff_eq!(b, 0.52207, epsilon = 5e-5);
        assert_abs_diff_eq!(b, libm::exp(-5.0 * xi(0.8)), epsilon = 1e-12);
        let b20 = chernoff_tail_bound(&[0.8; 20], 0.5).unwrap();
        assert_abs_diff_eq!(b20, b * b, epsilon = 1e-12);
        assert_abs_diff_eq!(chernoff_tail_bound(&p, 0.0).unwrap(), libm::exp(-8.0), epsilon = 1e-15);
        assert!(matches!(chernoff_tail_bound(&p, 0.8), Err(Error::Precondition(_))));
        assert!(chernoff_tail_bound(&[1.2], 0.1).is_err());
    }

    #[test]
    fn mc_examples() {
        assert_eq!(mc_tail_estimate(&[1.0; 6], 0.5, 1000, 1).unwrap().estimate, 0.0);
        assert_eq!(mc_tail_estimate(&[0.0; 6], 0.0, 1000, 1).unwrap().estimate, 1.0);
        let mc = mc_tail_estimate(&[0.8; 10], 0.5, 100_000, 3).unwrap();
        assert!(mc.estimate <= 0.522055 + 3.0 * mc.std_error);
        // exact P(Bin(10, 0.8) ≤ 5) = 0.0327935
        assert_abs_diff_eq!(mc.estimate, 0.0327935, epsilon = 4.0 * mc.std_error);
    }

    #[test]
    fn ensemble_error_matches_binomial_tail() {
        // K = 2, Q = 5, p = 0.7: error = P(S ≤ 2) = 0.16308
        let est = ensemble_error_rate(0.7, 5, 2, 50_000, 4).unwrap();
        assert_abs_diff_eq!(est.estimate, 0.16308, epsilon = 4.0 * est.std_error);
        assert_eq!(ensemble_error_rate(1.0, 4, 3, 100, 0).unwrap().estimate, 0.0);
        // Q = 2, K = 2, p = 0.5: error unless both correct
        let est = ensemble_error_rate(0.5, 2, 2, 40_000, 1).unwrap();
        assert_abs_diff_eq!(est.estimate, 0.75, epsilon = 4.0 * est.std_error);
    }

    #[test]
    fn ensemble_bound_constant() {
        assert_abs_diff_eq!(libm::exp(-25.0 * xi(0.7)), 0.204294, epsilon = 1e-6);
    }

    #[test]
    fn solver_contracts() {
        let spec = ClusterSpec {
            classes: 3,
            dim: 3,
            n_per_class: 30,
            spread: 0.8,
            radius: 1.0,
            seed: 1,
        };
        let ds = data::gen_clusters(&spec, 0).unwrap();
        let tol = 1e-7;
        let t1 = solve_theta_star(&ds, 3, 0.01, tol).unwrap();
        let batch = full_batch(&ds).unwrap();
        let targets: Vec<SoftTarget> = ds
            .labels()
            .unwrap()
            .iter()
            .map(|&y| SoftTarget::one_hot(y, 3))
            .collect();
        assert!(math::norm2(&ridge_gradient(&t1, &batch, &targets, 0.01).unwrap()) <= tol);
        let t2 = solve_theta_star(&ds, 3, 0.02, tol).unwrap();
        assert!(t2.frobenius_norm() < t1.frobenius_norm());
    }

    #[test]
    fn uniform_labels_give_zero_optimum() {
        let xs = [[1.0, 0.5], [-0.3, 2.0], [0.7, -1.0]];
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for x in xs {
            for k in 0..3 {
                features.extend_from_slice(&x);
                labels.push(k);
            }
        }
        let ds = Dataset::new(2, features, Some(labels), "uniform").unwrap();
        let t = solve_theta_star(&ds, 3, 1e-3, 1e-10).unwrap();
        assert!(t.frobenius_norm() < 1e-9);
    }

    fn bank_with(rows: &[&[f64]]) -> EnsembleBank {
        let k = rows[0].len();
        let counts: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let visits = rows.iter().map(|r| r.iter().sum()).collect();
        EnsembleBank::from_parts(k, counts, visits).unwrap()
    }

    #[test]
    fn hat_g_examples() {
        let ds = Dataset::new(1, vec![1.0], None, "one").unwrap();
        let batch = ds.minibatch(&[0]).unwrap();
        // logits (1, 0) → pseudo label 0
        let theta = LinearParams::from_weights(1, 2, vec![1.0, 0.0]).unwrap();
        let bank = bank_with(&[&[0.6, 0.4]]);
        let g = hat_g(&batch, &theta, &bank).unwrap();
        assert_abs_diff_eq!(g[0], -0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(g[1], 0.4, epsilon = 1e-15);

        let agree = bank_with(&[&[2.0, 0.0]]);
        assert_eq!(hat_g(&batch, &theta, &agree).unwrap(), vec![0.0, 0.0]);
        let empty = EnsembleBank::new(1, 2);
        assert_eq!(hat_g(&batch, &theta, &empty).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn lambda_dagger_examples() {
        let u = vec![vec![1.0, -2.0, 0.5]];
        let l = lambda_dagger(&u, &u, 2.0).unwrap();
        assert_abs_diff_eq!(l.value, 0.5, epsilon = 1e-15);
        let ratio = neighborhood_n(0.5, &u, &u, 2.0).unwrap() / neighborhood_n(0.0, &u, &u, 2.0).unwrap();
        assert_abs_diff_eq!(ratio, 0.5, epsilon = 1e-15);

        let a = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        let g = vec![vec![0.0, 1.0], vec![0.0, -1.0]];
        assert_eq!(lambda_dagger(&a, &g, 2.0).unwrap().value, 0.0);

        let neg: Vec<Vec<f64>> = u.iter().map(|v| v.iter().map(|x| -x).collect()).collect();
        assert!(lambda_dagger(&u, &neg, 2.0).unwrap().value < 0.0);

        let zero = vec![vec![0.0; 3]];
        assert_eq!(
            lambda_dagger(&u, &zero, 2.0).unwrap(),
            LambdaDagger {
                value: 0.0,
                degenerate: true
            }
        );
        assert!(lambda_dagger(&u, &u, 0.0).is_err());
    }

    #[test]
    fn neighborhood_at_zero_is_scaled_second_moment() {
        let (a, g) = random_sample_set(9);
        let second = a.iter().map(|v| math::sq_norm(v)).sum::<f64>() / a.len() as f64;
        assert_abs_diff_eq!(neighborhood_n(0.0, &a, &g, 3.0).unwrap(), 1.5 * second, epsilon = 1e-12);
    }

    #[test]
    fn quality_term_examples() {
        let ds = Dataset::new(1, vec![1.0, -1.0, 1.0, 1.0, 1.0], Some(vec![0, 1, 0, 0, 1]), "q").unwrap();
        let theta = LinearParams::from_weights(1, 2, vec![1.0, -1.0]).unwrap();
        // predictions: 0, 1, 0, 0, 0 → one error in five
        assert_abs_diff_eq!(g_error(&theta, &ds).unwrap(), 0.2, epsilon = 1e-15);

        let flat = LinearParams::zeros(1, 2).unwrap();
        let one = Dataset::new(1, vec![1.0], Some(vec![0]), "kl").unwrap();
        let kl = g_kl(&flat, &bank_with(&[&[3.0, 1.0]]), &one).unwrap();
        assert_abs_diff_eq!(kl, 0.143841, epsilon = 1e-6);
        assert!(g_kl(&flat, &bank_with(&[&[0.0, 2.0]]), &one).unwrap().is_finite());
        assert!(g_kl(&flat, &EnsembleBank::new(1, 2), &one).is_err());

        // f̄ = (0.6, 0.4), Ŷ = (1, 0) on a single instance → 0.4² + 0.4²
        let sharp = LinearParams::from_weights(1, 2, vec![1.0, 0.0]).unwrap();
        let gc = g_c(&bank_with(&[&[0.6, 0.4]]), &sharp, &one).unwrap();
        assert_abs_diff_eq!(gc, 0.32, epsilon = 1e-15);
        assert_eq!(g_c(&bank_with(&[&[1.0, 0.0]]), &sharp, &one).unwrap(), 0.0);
        // means (0.6, 0.4) vs (0.5, 0.5)
        let two = Dataset::new(1, vec![1.0, -1.0], None, "two").unwrap();
        let gc = g_c(&bank_with(&[&[0.7, 0.3], &[0.5, 0.5]]), &sharp, &two).unwrap();
        assert_abs_diff_eq!(gc, 0.02, epsilon = 1e-15);
    }

    #[test]
    fn kl_is_zero_when_ensemble_matches_optimum() {
        let theta = LinearParams::from_weights(1, 2, vec![0.3, -0.2]).unwrap();
        let ds = Dataset::new(1, vec![1.0], None, "kl").unwrap();
        let p = model::softmax_forward(&theta, &[1.0]).unwrap();
        let bank = bank_with(&[p.as_slice()]);
        assert!(g_kl(&theta, &bank, &ds).unwrap().abs() < 1e-10);
    }

    #[test]
    fn instance_suite_passes() {
        let config = VerifyConfig::default();
        for check in instance_checks(&config).unwrap() {
            assert!(check.pass, "{check:?}");
        }
    }

    #[test]
    fn sign_flipped_xi_fails() {
        let config = VerifyConfig {
            tail_configs: 5,
            mc_trials: 2000,
            ..Default::default()
        };
        let flipped: fn(f64) -> f64 = |z| -xi(z);
        assert!(tail_checks(&config, xi).unwrap().iter().all(|c| c.pass));
        assert!(tail_checks(&config, flipped).unwrap().iter().any(|c| !c.pass));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn xi_is_nonnegative_and_increasing(a in 0.5f64..1.0, b in 0.5f64..1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(xi(lo) >= 0.0);
            prop_assert!(xi(lo) <= xi(hi) + 1e-15);
        }

        #[test]
        fn lambda_dagger_minimizes_n(seed in 0u64..10_000, lg in 0.1f64..10.0, l in -3.0f64..3.0) {
            let (a, g) = random_sample_set(seed);
            let lam = lambda_dagger(&a, &g, lg).unwrap().value;
            let n_opt = neighborhood_n(lam, &a, &g, lg).unwrap();
            let n_l = neighborhood_n(l, &a, &g, lg).unwrap();
            prop_assert!(n_opt <= n_l + 1e-12 * n_l.abs().max(1.0));
            prop_assert!(identity_residual(&a, &g, lg).unwrap() < 1e-10);
        }
    }
}
