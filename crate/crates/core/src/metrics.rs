//! Accuracy, expected calibration error, and the unsupervised checkpoint
//! selection scores (InfoMax, Ent, Corr-C). All logarithms are natural.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::model::{self, LinearParams};
use crate::selftrain::RunRecord;
use crate::{Error, Result};

pub const DEFAULT_ECE_BINS: usize = 10;

/// Model outputs for a set of instances, optionally with true labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTable {
    classes: usize,
    probs: Vec<f64>,
    labels: Option<Vec<usize>>,
}

impl PredictionTable {
    pub fn new(classes: usize, probs: Vec<f64>, labels: Option<Vec<usize>>) -> Result<Self> {
        if classes < 2 || !probs.len().is_multiple_of(classes) {
            return Err(Error::DimensionMismatch {
                expected: classes,
                got: probs.len(),
            });
        }
        for row in probs.chunks(classes) {
            if row.iter().any(|p| !(0.0..=1.0).contains(p))
                || (row.iter().sum::<f64>() - 1.0).abs() > model::SIMPLEX_TOL
            {
                return Err(Error::Input("prediction rows must lie on the simplex".into()));
            }
        }
        let n = probs.len() / classes;
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: l.len(),
                });
            }
            if l.iter().any(|&y| y >= classes) {
                return Err(Error::Input("label outside the class range".into()));
            }
        }
        Ok(Self { classes, probs, labels })
    }

    /// Evaluates `params` on every row of `features` (row-major, `n × d`).
    pub fn from_model(params: &LinearParams, features: &[f64], labels: Option<&[usize]>) -> Result<Self> {
        let d = params.dim();
        let mut probs = Vec::with_capacity(features.len() / d * params.classes());
        for x in features.chunks(d) {
            probs.extend_from_slice(model::softmax_forward(params, x)?.as_slice());
        }
        Self::new(params.classes(), probs, labels.map(<[usize]>::to_vec))
    }

    pub fn len(&self) -> usize {
        self.probs.len() / self.classes
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.classes..(i + 1) * self.classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks(self.classes)
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    fn require_labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Input("metric requires labels".into()))
    }

    fn require_rows(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(())
    }

    /// Mean prediction `E_X[f(X)]`.
    pub fn marginal(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.classes];
        for row in self.rows() {
            for (a, b) in m.iter_mut().zip(row) {
                *a += b;
            }
        }
        let n = self.len().max(1) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Fraction of each class among the argmax predictions.
    pub fn pseudo_label_marginal(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.classes];
        for row in self.rows() {
            m[math::argmax(row)] += 1.0;
        }
        let n = self.len().max(1) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    pub fn mean_confidence(&self) -> f64 {
        let confs: Vec<f64> = self.rows().map(|r| r.iter().copied().fold(0.0, f64::max)).collect();
        math::mean(&confs)
    }
}

pub fn accuracy(table: &PredictionTable) -> Result<f64> {
    let labels = table.require_labels()?;
    table.require_rows()?;
    let correct = table
        .rows()
        .zip(labels)
        .filter(|(row, &y)| math::argmax(row) == y)
        .count();
    Ok(correct as f64 / table.len() as f64)
}

/// Accuracy restricted to each true class; classes absent from the labels get `NaN`.
pub fn per_class_accuracy(table: &PredictionTable) -> Result<Vec<f64>> {
    let labels = table.require_labels()?;
    let mut hits = vec![0usize; table.classes];
    let mut totals = vec![0usize; table.classes];
    for (row, &y) in table.rows().zip(labels) {
        totals[y] += 1;
        if math::argmax(row) == y {
            hits[y] += 1;
        }
    }
    Ok(hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| if t == 0 { f64::NAN } else { h as f64 / t as f64 })
        .collect())
}

/// Expected calibration error with `bins` equal-width confidence bins
/// `[g/G, (g+1)/G)`, `g = 0..G−1`; a confidence of exactly 1 falls in the last bin.
pub fn ece(table: &PredictionTable, bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(Error::Parameter("ECE needs at least one bin".into()));
    }
    let labels = table.require_labels()?;
    table.require_rows()?;
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut hit_sum = vec![0.0; bins];
    for (row, &y) in table.rows().zip(labels) {
        let label = math::argmax(row);
        let c = row[label];
        let g = ((c * bins as f64) as usize).min(bins - 1);
        count[g] += 1;
        conf_sum[g] += c;
        if label == y {
            hit_sum[g] += 1.0;
        }
    }
    let n = table.len() as f64;
    Ok((0..bins)
        .filter(|&g| count[g] > 0)
        .map(|g| {
            let m = count[g] as f64;
            (m / n) * (hit_sum[g] / m - conf_sum[g] / m).abs()
        })
        .sum())
}

/// `H(E[f]) − E[H(f)]`; higher is better.
pub fn infomax(table: &PredictionTable) -> Result<f64> {
    table.require_rows()?;
    let conditional: f64 = table.rows().map(math::entropy).sum::<f64>() / table.len() as f64;
    Ok(math::entropy(&table.marginal()) - conditional)
}

/// `H(E[f])`; lower is better.
pub fn ent_score(table: &PredictionTable) -> Result<f64> {
    table.require_rows()?;
    Ok(math::entropy(&table.marginal()))
}

/// Mean absolute off-diagonal entry of the class-correlation matrix
/// `C_ij = Σ_n f_i f_j` after scaling by `‖C‖_F / √K`; lower is better.
pub fn corr_c(table: &PredictionTable) -> Result<f64> {
    table.require_rows()?;
    let k = table.classes;
    let mut c = vec![0.0; k * k];
    for row in table.rows() {
        for i in 0..k {
            for j in 0..k {
                c[i * k + j] += row[i] * row[j];
            }
        }
    }
    let scale = math::norm2(&c) / math::sqrt(k as f64);
    let off: f64 = (0..k)
        .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| (c[i * k + j] / scale).abs())
        .sum();
    Ok(off / (k * (k - 1)) as f64)
}

/// Total variation distance `½ Σ |p − q|`.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionCriterion {
    Infomax,
    Ent,
    CorrC,
}

impl SelectionCriterion {
    pub const ALL: [SelectionCriterion; 3] = [Self::Infomax, Self::Ent, Self::CorrC];

    pub fn name(self) -> &'static str {
        match self {
            Self::Infomax => "infomax",
            Self::Ent => "ent",
            Self::CorrC => "corr_c",
        }
    }

    pub fn higher_is_better(self) -> bool {
        matches!(self, Self::Infomax)
    }

    pub fn score(self, record: &RunRecord) -> f64 {
        match self {
            Self::Infomax => record.infomax,
            Self::Ent => record.ent,
            Self::CorrC => record.corr_c,
        }
    }
}

/// Epoch of the best record under `criterion`; ties go to the earliest epoch.
pub fn select_checkpoint(records: &[RunRecord], criterion: SelectionCriterion) -> Result<usize> {
    let mut best: Option<&RunRecord> = None;
    for r in records {
        let better = match best {
            None => true,
            Some(b) => {
                let (s, t) = (criterion.score(r), criterion.score(b));
                if criterion.higher_is_better() {
                    s > t
                } else {
                    s < t
                }
            }
        };
        if better {
            best = Some(r);
        }
    }
    best.map(|r| r.epoch)
        .ok_or_else(|| Error::Input("no records to select from".into()))
}
