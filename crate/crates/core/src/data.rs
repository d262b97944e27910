//! Desk-scale covariate shift: Gaussian class clusters, a five-level ladder of
//! feature-space distortions, and seeded holdout splits. Shifts only touch
//! features; labels are copied unchanged.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::math;
use crate::model::Minibatch;
use crate::rng::{self, LabRng};
use crate::{Error, Result};

pub const MAX_INTENSITY: u8 = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    features: Vec<f64>,
    labels: Option<Vec<usize>>,
    support_bound: f64,
    provenance: String,
}

impl Dataset {
    pub fn new(
        dim: usize,
        features: Vec<f64>,
        labels: Option<Vec<usize>>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Input("feature dimension must be at least 1".into()));
        }
        if !features.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: features.len() % dim,
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite feature value".into()));
        }
        let n = features.len() / dim;
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: l.len(),
                });
            }
        }
        let support_bound = features.chunks(dim).map(math::norm2).fold(0.0, f64::max);
        Ok(Self {
            dim,
            features,
            labels,
            support_bound,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// `C = max_i ‖x_i‖₂`.
    pub fn support_bound(&self) -> f64 {
        self.support_bound
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// `max label + 1`, or `None` for unlabeled data.
    pub fn inferred_classes(&self) -> Option<usize> {
        self.labels.as_ref()?.iter().max().map(|m| m + 1)
    }

    /// Same features with labels dropped.
    pub fn without_labels(&self) -> Self {
        Self {
            labels: None,
            ..self.clone()
        }
    }

    pub fn minibatch(&self, indices: &[usize]) -> Result<Minibatch<'_>> {
        let n = self.len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange { index: bad, len: n });
        }
        Minibatch::new(indices.iter().map(|&i| self.row(i)).collect(), indices.to_vec())
    }

    pub fn subset(&self, indices: &[usize], provenance: impl Into<String>) -> Result<Self> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: self.len(),
                });
            }
            features.extend_from_slice(self.row(i));
        }
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        Self::new(self.dim, features, labels, provenance)
    }

    /// Rescales rows whose norm exceeds `bound` onto the ball of radius `bound`.
    pub fn clip_to_norm(&self, bound: f64) -> Result<Self> {
        if !(bound > 0.0) {
            return Err(Error::Parameter("clipping bound must be positive".into()));
        }
        let mut features = self.features.clone();
        for row in features.chunks_mut(self.dim) {
            let norm = math::norm2(row);
            if norm > bound {
                let s = bound / norm;
                row.iter_mut().for_each(|v| *v *= s);
            }
        }
        Self::new(
            self.dim,
            features,
            self.labels.clone(),
            format!("{} | clip({bound})", self.provenance),
        )
    }
}

/// Gaussian class clusters around `classes` mean vectors of norm `radius`.
/// With `classes ≤ dim` the means are orthonormalized random directions, so
/// all pairs are equidistant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    /// Per-coordinate standard deviation of each cluster.
    pub spread: f64,
    #[serde(default = "default_radius")]
    pub radius: f64,
    /// Fixes the cluster means; samples are drawn from per-stream generators.
    pub seed: u64,
}

fn default_radius() -> f64 {
    1.0
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_class == 0 || self.classes == 0 {
            return Err(Error::EmptyDataset);
        }
        if self.classes < 2 || self.dim == 0 {
            return Err(Error::Parameter("need at least two classes and one feature".into()));
        }
        if !(self.spread >= 0.0) || !(self.radius > 0.0) {
            return Err(Error::Parameter(
                "spread must be nonnegative and radius positive".into(),
            ));
        }
        Ok(())
    }

    pub fn means(&self) -> Vec<Vec<f64>> {
        let mut r = rng::seeded_stream(self.seed, 0);
        let mut means: Vec<Vec<f64>> = Vec::with_capacity(self.classes);
        while means.len() < self.classes {
            let mut v: Vec<f64> = (0..self.dim).map(|_| rng::gaussian(&mut r)).collect();
            if means.len() < self.dim {
                for m in &means {
                    let proj = math::dot(&v, m);
                    v.iter_mut().zip(m).for_each(|(a, b)| *a -= proj * b);
                }
            }
            let norm = math::norm2(&v);
            if norm > 1e-8 {
                v.iter_mut().for_each(|a| *a /= norm);
                means.push(v);
            }
        }
        for m in &mut means {
            m.iter_mut().for_each(|a| *a *= self.radius);
        }
        means
    }
}

/// Draws `n_per_class` points per class from sample stream `stream`; equal
/// streams give identical datasets, distinct streams share the means.
pub fn gen_clusters(spec: &ClusterSpec, stream: u64) -> Result<Dataset> {
    spec.validate()?;
    let means = spec.means();
    let mut r = rng::seeded_stream(spec.seed, 1 + stream);
    let n = spec.classes * spec.n_per_class;
    let mut features = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.classes;
        for &m in &means[class] {
            features.push(m + spec.spread * rng::gaussian(&mut r));
        }
        labels.push(class);
    }
    Dataset::new(
        spec.dim,
        features,
        Some(labels),
        format!(
            "clusters(K={}, d={}, n/class={}, spread={}, radius={}, seed={}, stream={})",
            spec.classes, spec.dim, spec.n_per_class, spec.spread, spec.radius, spec.seed, stream
        ),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftKind {
    /// Givens rotations on seeded coordinate pairs.
    Rotation,
    /// Offset along a seeded unit direction.
    Translation,
    /// Additive isotropic Gaussian noise.
    GaussianNoise,
    /// Per-feature log-normal rescaling.
    FeatureScale,
}

impl ShiftKind {
    pub const ALL: [ShiftKind; 4] = [
        Self::Rotation,
        Self::Translation,
        Self::GaussianNoise,
        Self::FeatureScale,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Rotation => "rotation",
            Self::Translation => "translation",
            Self::GaussianNoise => "gaussian-noise",
            Self::FeatureScale => "feature-scale",
        }
    }
}

/// Distortion magnitude per intensity level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftLadder {
    /// Rotation angle added per level, in degrees.
    pub angle_per_level: f64,
    /// Translation length added per level.
    pub offset_per_level: f64,
    /// Noise standard deviation at levels 1..=5.
    pub noise_sigma: [f64; 5],
    /// Log-scale standard deviation added per level.
    pub scale_per_level: f64,
}

impl Default for ShiftLadder {
    fn default() -> Self {
        Self {
            angle_per_level: 12.0,
            offset_per_level: 0.6,
            noise_sigma: [0.1, 0.2, 0.3, 0.45, 0.6],
            scale_per_level: 0.2,
        }
    }
}

impl ShiftLadder {
    pub fn validate(&self) -> Result<()> {
        let ladder_ok = self.noise_sigma.windows(2).all(|w| w[0] < w[1]) && self.noise_sigma[0] > 0.0;
        if !(self.angle_per_level > 0.0 && self.offset_per_level > 0.0 && self.scale_per_level > 0.0) || !ladder_ok {
            return Err(Error::Parameter(
                "shift ladder must be positive and strictly increasing".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    /// 0 is the identity; 1..=5 are increasingly severe.
    pub intensity: u8,
    pub seed: u64,
    pub ladder: ShiftLadder,
}

impl ShiftSpec {
    pub fn new(kind: ShiftKind, intensity: u8, seed: u64) -> Self {
        Self {
            kind,
            intensity,
            seed,
            ladder: ShiftLadder::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.intensity > MAX_INTENSITY {
            return Err(Error::Parameter(format!("intensity must be in 0..={MAX_INTENSITY}")));
        }
        self.ladder.validate()
    }
}

pub fn apply_shift(dataset: &Dataset, spec: &ShiftSpec) -> Result<Dataset> {
    spec.validate()?;
    let level = spec.intensity as f64;
    let d = dataset.dim;
    let mut features = dataset.features.clone();
    if spec.intensity > 0 {
        let mut r: LabRng = rng::seeded_stream(spec.seed, 0x5348_4946_5400 + spec.kind as u64);
        match spec.kind {
            ShiftKind::Rotation => {
                let mut coords: Vec<usize> = (0..d).collect();
                coords.shuffle(&mut r);
                let angle = (spec.ladder.angle_per_level * level).to_radians();
                let (s, c) = (libm::sin(angle), libm::cos(angle));
                for row in features.chunks_mut(d) {
                    for pair in coords.chunks_exact(2) {
                        let (a, b) = (row[pair[0]], row[pair[1]]);
                        row[pair[0]] = c * a - s * b;
                        row[pair[1]] = s * a + c * b;
                    }
                }
            }
            ShiftKind::Translation => {
                let mut u: Vec<f64> = (0..d).map(|_| rng::gaussian(&mut r)).collect();
                let norm = math::norm2(&u);
                let len = spec.ladder.offset_per_level * level;
                u.iter_mut().for_each(|v| *v *= len / norm);
                for row in features.chunks_mut(d) {
                    row.iter_mut().zip(&u).for_each(|(x, o)| *x += o);
                }
            }
            ShiftKind::GaussianNoise => {
                let sigma = spec.ladder.noise_sigma[spec.intensity as usize - 1];
                for x in features.iter_mut() {
                    *x += sigma * rng::gaussian(&mut r);
                }
            }
            ShiftKind::FeatureScale => {
                let factors: Vec<f64> = (0..d)
                    .map(|_| math::exp(spec.ladder.scale_per_level * level * rng::gaussian(&mut r)))
                    .collect();
                for row in features.chunks_mut(d) {
                    row.iter_mut().zip(&factors).for_each(|(x, f)| *x *= f);
                }
            }
        }
    }
    Dataset::new(
        d,
        features,
        dataset.labels.clone(),
        format!(
            "{} | {}@{} seed={}",
            dataset.provenance,
            spec.kind.name(),
            spec.intensity,
            spec.seed
        ),
    )
}

/// Mean `‖x' − x‖₂` between matching rows.
pub fn mean_displacement(before: &Dataset, after: &Dataset) -> f64 {
    let d: Vec<f64> = before
        .features
        .chunks(before.dim)
        .zip(after.features.chunks(after.dim))
        .map(|(a, b)| math::norm2(&a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>()))
        .collect();
    math::mean(&d)
}

/// Seeded shuffle, then the first `round(n·fraction)` rows become the holdout.
pub fn split_holdout(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Parameter("holdout fraction must lie in [0, 1]".into()));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded_stream(seed, 0x484f_4c44));
    let n_hold = libm::round(n as f64 * fraction) as usize;
    let (hold, train) = order.split_at(n_hold);
    let mut train = train.to_vec();
    let mut hold = hold.to_vec();
    train.sort_unstable();
    hold.sort_unstable();
    Ok((
        dataset.subset(&train, format!("{} | train", dataset.provenance))?,
        dataset.subset(&hold, format!("{} | holdout", dataset.provenance))?,
    ))
}
