//! The adaptation engine.
//!
//! An epoch is one seeded pass over the unlabeled target split. Every
//! minibatch is one outer iteration: predictions are taken with the current
//! parameters, the confidence threshold, ensemble bank and ELR targets are
//! updated, pseudo-label targets are built, and `inner_steps` SGD steps are
//! taken on them (one by default, the online setting). Metrics are recorded on
//! the holdout split at the end of every epoch, and a parameter snapshot is
//! kept per epoch for post-hoc model selection.
//!
//! The EMA confidence threshold is tracked for every strategy (it is reported
//! in the records) but only the ensemble strategies act on it.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::ancon::{self, AnconConfig, EnsembleBank, ThresholdState};
use crate::data::Dataset;
use crate::elr::{self, ElrState};
use crate::metrics::{self, PredictionTable};
use crate::model::{self, LinearParams, Minibatch, Prediction, SoftTarget};
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    /// One-hot pseudo labels with cross-entropy.
    #[serde(rename = "vanilla")]
    Vanilla,
    /// Ensemble-smoothed pseudo labels with cross-entropy.
    #[serde(rename = "ancon")]
    Ancon,
    /// One-hot pseudo labels plus the ELR auxiliary loss.
    #[serde(rename = "elr")]
    Elr,
    /// One-hot pseudo labels with generalized cross-entropy.
    #[serde(rename = "gce")]
    Gce,
    /// Ensemble-smoothed pseudo labels with generalized cross-entropy.
    #[serde(rename = "gce+ancon")]
    GceAncon,
    /// Ensemble-smoothed pseudo labels with cross-entropy plus the ELR auxiliary loss.
    #[serde(rename = "elr-as-aux")]
    ElrAsAux,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Self::Vanilla,
        Self::Ancon,
        Self::Elr,
        Self::Gce,
        Self::GceAncon,
        Self::ElrAsAux,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Vanilla => "vanilla",
            Self::Ancon => "ancon",
            Self::Elr => "elr",
            Self::Gce => "gce",
            Self::GceAncon => "gce+ancon",
            Self::ElrAsAux => "elr-as-aux",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{name}`")))
    }

    pub fn uses_ensemble(self) -> bool {
        matches!(self, Self::Ancon | Self::GceAncon | Self::ElrAsAux)
    }

    pub fn uses_elr(self) -> bool {
        matches!(self, Self::Elr | Self::ElrAsAux)
    }

    pub fn uses_gce(self) -> bool {
        matches!(self, Self::Gce | Self::GceAncon)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub strategy: Strategy,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub inner_steps: usize,
    pub seed: u64,
    pub ancon: AnconConfig,
    pub elr_decay: f64,
    pub elr_lambda: f64,
    pub gce_q: f64,
    pub ece_bins: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Ancon,
            epochs: 50,
            lr: 0.05,
            batch_size: 32,
            inner_steps: 1,
            seed: 0,
            ancon: AnconConfig::default(),
            elr_decay: elr::DEFAULT_DECAY,
            elr_lambda: 3.0,
            gce_q: model::GCE_DEFAULT_Q,
            ece_bins: metrics::DEFAULT_ECE_BINS,
        }
    }
}

impl AdaptConfig {
    /// `lr = 0` is accepted and freezes the parameters.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config("learning rate must be finite and nonnegative".into()));
        }
        if self.batch_size == 0 || self.inner_steps == 0 || self.ece_bins == 0 {
            return Err(Error::Config(
                "batch size, inner steps and ECE bins must be positive".into(),
            ));
        }
        self.ancon.validate().map_err(|e| Error::Config(format!("{e}")))?;
        if !(0.0..1.0).contains(&self.elr_decay) || !(self.elr_lambda >= 0.0) {
            return Err(Error::Config(
                "ELR decay must be in [0, 1) and its weight nonnegative".into(),
            ));
        }
        model::check_gce_q(self.gce_q).map_err(|e| Error::Config(format!("{e}")))?;
        Ok(())
    }
}

/// Per-epoch log line.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunRecord {
    pub epoch: usize,
    /// Mean minibatch objective over the epoch.
    pub train_loss: f64,
    pub holdout_accuracy: Option<f64>,
    pub ece: Option<f64>,
    pub infomax: f64,
    pub ent: f64,
    pub corr_c: f64,
    pub mean_confidence: f64,
    pub threshold_delta: f64,
    /// Total variation between this epoch's holdout pseudo-label marginal and
    /// the previous epoch's (the initial model's for epoch 0).
    pub marginal_tv: f64,
}

/// Everything needed to continue a run after an epoch boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub params: LinearParams,
    pub threshold: ThresholdState,
    pub bank: Option<EnsembleBank>,
    pub elr: Option<ElrState>,
    /// Index of the next epoch to run.
    pub next_epoch: usize,
    pub prev_marginal: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptOutcome {
    pub params: LinearParams,
    pub records: Vec<RunRecord>,
    /// Parameters after each epoch, indexed like `records`.
    pub checkpoints: Vec<LinearParams>,
}

/// Per-instance targets and the optional ELR rows that go with them.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTargets {
    pub targets: Vec<SoftTarget>,
    pub elr_rows: Option<Vec<Vec<f64>>>,
}

/// Updates the strategy state for one outer iteration and returns the
/// training targets for the batch.
pub fn build_targets(
    config: &AdaptConfig,
    batch: &Minibatch<'_>,
    preds: &[Prediction],
    threshold: &mut ThresholdState,
    bank: Option<&mut EnsembleBank>,
    elr_state: Option<&mut ElrState>,
) -> Result<BatchTargets> {
    if preds.len() != batch.len() {
        return Err(Error::DimensionMismatch {
            expected: batch.len(),
            got: preds.len(),
        });
    }
    let classes = preds[0].probs.len();
    let mean_conf = preds.iter().map(Prediction::confidence).sum::<f64>() / preds.len() as f64;
    threshold.update_threshold(mean_conf.clamp(0.0, 1.0))?;

    let targets = if config.strategy.uses_ensemble() {
        let bank = bank.ok_or_else(|| Error::Config("ensemble strategy without a bank".into()))?;
        let a = &config.ancon;
        batch
            .indices
            .iter()
            .zip(preds)
            .map(|(&idx, pred)| {
                let w = ancon::compute_weight(&pred.probs, threshold, a.weight_scheme);
                bank.ensemble_update(idx, pred, w, a.prediction_scheme)?;
                bank.smooth_target(pred.label(), idx, a.lambda, a.normalization)
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        preds.iter().map(|p| SoftTarget::one_hot(p.label(), classes)).collect()
    };

    let elr_rows = if config.strategy.uses_elr() {
        let state = elr_state.ok_or_else(|| Error::Config("ELR strategy without ELR state".into()))?;
        let mut rows = Vec::with_capacity(batch.len());
        for (&idx, pred) in batch.indices.iter().zip(preds) {
            state.elr_update(idx, &pred.probs)?;
            rows.push(state.target(idx).to_vec());
        }
        Some(rows)
    } else {
        None
    };
    Ok(BatchTargets { targets, elr_rows })
}

/// Minibatch objective and its gradient for the configured strategy:
/// CE or GCE on the targets, plus `elr_lambda · elr_loss` when ELR rows are given.
pub fn batch_objective(
    config: &AdaptConfig,
    params: &LinearParams,
    batch: &Minibatch<'_>,
    targets: &BatchTargets,
) -> Result<(f64, Vec<f64>)> {
    if targets.targets.len() != batch.len() {
        return Err(Error::DimensionMismatch {
            expected: batch.len(),
            got: targets.targets.len(),
        });
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; params.weights().len()];
    let mut loss = 0.0;
    for (i, (x, t)) in batch.inputs.iter().zip(&targets.targets).enumerate() {
        let p = model::softmax_forward(params, x)?;
        let mut r = if config.strategy.uses_gce() {
            loss += model::gce_loss(&p, t, config.gce_q)?;
            model::gce_logit_grad(&p, t, config.gce_q)
        } else {
            loss += model::ce_soft_loss(&p, t);
            model::ce_logit_grad(&p, t)
        };
        if let Some(rows) = &targets.elr_rows {
            let row = &rows[i];
            loss += config.elr_lambda * elr::elr_loss(&p, row);
            for (a, b) in r.iter_mut().zip(elr::elr_logit_grad(&p, row)) {
                *a += config.elr_lambda * b;
            }
        }
        model::accumulate_outer(&mut grad, x, &r, scale);
    }
    Ok((loss * scale, grad))
}

/// A resumable adaptation run over borrowed target data.
pub struct Adaptation<'a> {
    data: &'a Dataset,
    holdout: &'a Dataset,
    config: AdaptConfig,
    state: RunState,
}

impl<'a> Adaptation<'a> {
    pub fn new(data: &'a Dataset, holdout: &'a Dataset, init: LinearParams, config: AdaptConfig) -> Result<Self> {
        config.validate()?;
        check_data(data, holdout, &init)?;
        let n = data.len();
        let k = init.classes();
        let prev_marginal = eval_table(&init, eval_set(data, holdout))?.pseudo_label_marginal();
        let state = RunState {
            threshold: ThresholdState::new(config.ancon.beta)?,
            bank: config.strategy.uses_ensemble().then(|| EnsembleBank::new(n, k)),
            elr: if config.strategy.uses_elr() {
                Some(ElrState::new(n, k, config.elr_decay)?)
            } else {
                None
            },
            params: init,
            next_epoch: 0,
            prev_marginal,
        };
        Ok(Self {
            data,
            holdout,
            config,
            state,
        })
    }

    /// Continues from a state captured at an epoch boundary.
    pub fn resume(data: &'a Dataset, holdout: &'a Dataset, config: AdaptConfig, state: RunState) -> Result<Self> {
        config.validate()?;
        check_data(data, holdout, &state.params)?;
        let n = data.len();
        if state
            .bank
            .as_ref()
            .map_or(config.strategy.uses_ensemble(), |b| b.instances() != n)
            || state
                .elr
                .as_ref()
                .map_or(config.strategy.uses_elr(), |e| e.instances() != n)
        {
            return Err(Error::Input(
                "resume state does not match the strategy or dataset".into(),
            ));
        }
        Ok(Self {
            data,
            holdout,
            config,
            state,
        })
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn into_state(self) -> RunState {
        self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.next_epoch >= self.config.epochs
    }

    /// Runs one epoch and returns its record.
    pub fn run_epoch(&mut self) -> Result<RunRecord> {
        let epoch = self.state.next_epoch;
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut rng::seeded_stream(self.config.seed, epoch as u64));

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            let batch = self.data.minibatch(chunk)?;
            let preds = batch
                .inputs
                .iter()
                .map(|x| model::predict(&self.state.params, x))
                .collect::<Result<Vec<_>>>()?;
            if preds.iter().any(|p| p.probs.as_slice().iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFiniteLoss { epoch });
            }
            let targets = build_targets(
                &self.config,
                &batch,
                &preds,
                &mut self.state.threshold,
                self.state.bank.as_mut(),
                self.state.elr.as_mut(),
            )?;
            for step in 0..self.config.inner_steps {
                let (loss, grad) = batch_objective(&self.config, &self.state.params, &batch, &targets)?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch });
                }
                if step == 0 {
                    loss_sum += loss;
                }
                if self.config.lr > 0.0 {
                    self.state.params = model::sgd_step(&self.state.params, &grad, self.config.lr)
                        .map_err(|_| Error::NonFiniteLoss { epoch })?;
                }
            }
            batches += 1;
        }

        let table = eval_table(&self.state.params, eval_set(self.data, self.holdout))?;
        let labeled = table.labels().is_some();
        let marginal = table.pseudo_label_marginal();
        let record = RunRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            holdout_accuracy: if labeled {
                Some(metrics::accuracy(&table)?)
            } else {
                None
            },
            ece: if labeled {
                Some(metrics::ece(&table, self.config.ece_bins)?)
            } else {
                None
            },
            infomax: metrics::infomax(&table)?,
            ent: metrics::ent_score(&table)?,
            corr_c: metrics::corr_c(&table)?,
            mean_confidence: table.mean_confidence(),
            threshold_delta: self.state.threshold.delta(),
            marginal_tv: metrics::total_variation(&marginal, &self.state.prev_marginal),
        };
        self.state.prev_marginal = marginal;
        self.state.next_epoch += 1;
        Ok(record)
    }
}

fn check_data(data: &Dataset, holdout: &Dataset, params: &LinearParams) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.dim() != params.dim() || (!holdout.is_empty() && holdout.dim() != params.dim()) {
        return Err(Error::DimensionMismatch {
            expected: params.dim(),
            got: data.dim(),
        });
    }
    Ok(())
}

/// Holdout when it has rows, otherwise the adaptation split itself.
fn eval_set<'d>(data: &'d Dataset, holdout: &'d Dataset) -> &'d Dataset {
    if holdout.is_empty() {
        data
    } else {
        holdout
    }
}

fn eval_table(params: &LinearParams, set: &Dataset) -> Result<PredictionTable> {
    PredictionTable::from_model(params, set.features(), set.labels())
}

/// Runs `config.epochs` epochs from `init`. Labels on `dataset` are never read.
pub fn run_adaptation(
    dataset: &Dataset,
    holdout: &Dataset,
    init: LinearParams,
    config: &AdaptConfig,
) -> Result<AdaptOutcome> {
    let unlabeled = dataset.without_labels();
    let mut run = Adaptation::new(&unlabeled, holdout, init, *config)?;
    let mut records = Vec::with_capacity(config.epochs);
    let mut checkpoints = Vec::with_capacity(config.epochs);
    while !run.is_done() {
        records.push(run.run_epoch()?);
        checkpoints.push(run.state().params.clone());
    }
    Ok(AdaptOutcome {
        params: run.into_state().params,
        records,
        checkpoints,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 0.1,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceModel {
    pub params: LinearParams,
    pub warnings: Vec<String>,
}

/// Supervised minibatch SGD on one-hot labels from zero parameters.
pub fn train_source(dataset: &Dataset, classes: usize, config: &SourceConfig) -> Result<SourceModel> {
    let labels = dataset
        .labels()
        .ok_or_else(|| Error::Input("source training requires labels".into()))?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(config.lr > 0.0) || config.batch_size == 0 {
        return Err(Error::Config(
            "source training needs a positive learning rate and batch size".into(),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Input(format!("label {bad} outside {classes} classes")));
    }
    let mut warnings = Vec::new();
    let mut seen = vec![false; classes];
    labels.iter().for_each(|&y| seen[y] = true);
    let present = seen.iter().filter(|&&s| s).count();
    if present < 2 {
        warnings.push(format!(
            "only {present} class present in source labels; the predictor is degenerate"
        ));
    } else if present < classes {
        warnings.push(format!(
            "{} of {classes} classes absent from source labels",
            classes - present
        ));
    }

    let mut params = LinearParams::zeros(dataset.dim(), classes)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::seeded_stream(config.seed, epoch as u64));
        for chunk in order.chunks(config.batch_size) {
            let batch = dataset.minibatch(chunk)?;
            let targets: Vec<SoftTarget> = chunk.iter().map(|&i| SoftTarget::one_hot(labels[i], classes)).collect();
            let grad = model::grad_linear_ce(&params, &batch, &targets)?;
            params = model::sgd_step(&params, &grad, config.lr).map_err(|_| Error::NonFiniteLoss { epoch })?;
        }
    }
    Ok(SourceModel { params, warnings })
}

/// Accuracy of `params` on a labeled dataset.
pub fn evaluate_accuracy(params: &LinearParams, dataset: &Dataset) -> Result<f64> {
    metrics::accuracy(&eval_table(params, dataset)?)
}
