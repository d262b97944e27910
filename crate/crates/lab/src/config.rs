//! Experiment configuration, read from TOML.
//!
//! Every section and key is optional; unknown keys are rejected. A minimal
//! file is `format = 1`. See the README for the full key list.

use std::path::{Path, PathBuf};

use ancon_core::ancon::{AnconConfig, Normalization, PredictionScheme, WeightScheme, DEFAULT_BETA, DEFAULT_LAMBDA};
use ancon_core::data::{ShiftKind, ShiftLadder, MAX_INTENSITY};
use ancon_core::metrics::DEFAULT_ECE_BINS;
use ancon_core::selftrain::{AdaptConfig, SourceConfig, Strategy};
use ancon_core::theory::VerifyConfig;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, LabResult};
use crate::io;

pub const CONFIG_FORMAT: u32 = 1;

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "ANCON_OUTPUT_ROOT";

pub const DEFAULT_OUTPUT: &str = "ancon-out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format: u32,
    /// Output directory; falls back to `$ANCON_OUTPUT_ROOT`, then `ancon-out`.
    pub output: Option<PathBuf>,
    pub data: DataConfig,
    pub source: SourceSection,
    pub adapt: AdaptSection,
    pub metrics: MetricsSection,
    pub verify: VerifyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            format: CONFIG_FORMAT,
            output: None,
            data: DataConfig::default(),
            source: SourceSection::default(),
            adapt: AdaptSection::default(),
            metrics: MetricsSection::default(),
            verify: VerifyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    pub target_n_per_class: usize,
    pub spread: f64,
    pub radius: f64,
    /// Added to each replicate seed to pick cluster means and samples.
    pub seed: u64,
    pub shift: ShiftKind,
    pub intensities: Vec<u8>,
    pub ladder: ShiftLadder,
    pub holdout_fraction: f64,
    /// Labeled source features; replaces the generated source domain.
    pub source_csv: Option<PathBuf>,
    /// Target features; replaces the generated shifted domains.
    pub target_csv: Option<PathBuf>,
    pub target_has_labels: bool,
    pub csv_has_header: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            dim: 20,
            n_per_class: 100,
            target_n_per_class: 100,
            spread: 0.3,
            radius: 1.0,
            seed: 0,
            shift: ShiftKind::Rotation,
            intensities: vec![1, 2, 3, 4, 5],
            ladder: ShiftLadder::default(),
            holdout_fraction: 0.1,
            source_csv: None,
            target_csv: None,
            target_has_labels: true,
            csv_has_header: false,
        }
    }
}

impl DataConfig {
    pub fn external(&self) -> bool {
        self.target_csv.is_some()
    }

    /// Intensities actually run: the configured ladder, or a single `0` for
    /// external target data.
    pub fn levels(&self) -> Vec<u8> {
        if self.external() {
            vec![0]
        } else {
            self.intensities.clone()
        }
    }

    pub fn shift_name(&self) -> &'static str {
        if self.external() {
            "external"
        } else {
            self.shift.name()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for SourceSection {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.1,
            batch_size: 32,
        }
    }
}

impl SourceSection {
    pub fn to_core(self, seed: u64) -> SourceConfig {
        SourceConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptSection {
    pub strategies: Vec<Strategy>,
    pub lambdas: Vec<f64>,
    pub betas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub inner_steps: usize,
    pub weight_scheme: WeightScheme,
    pub prediction_scheme: PredictionScheme,
    pub normalization: Normalization,
    pub elr_decay: f64,
    pub elr_lambda: f64,
    pub gce_q: f64,
}

impl Default for AdaptSection {
    fn default() -> Self {
        let core = AdaptConfig::default();
        Self {
            strategies: vec![Strategy::Vanilla, Strategy::Ancon],
            lambdas: vec![DEFAULT_LAMBDA],
            betas: vec![DEFAULT_BETA],
            seeds: vec![0, 1, 2],
            epochs: core.epochs,
            lr: core.lr,
            batch_size: core.batch_size,
            inner_steps: core.inner_steps,
            weight_scheme: WeightScheme::default(),
            prediction_scheme: PredictionScheme::default(),
            normalization: Normalization::default(),
            elr_decay: core.elr_decay,
            elr_lambda: core.elr_lambda,
            gce_q: core.gce_q,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub ece_bins: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            ece_bins: DEFAULT_ECE_BINS,
        }
    }
}

/// One cell of the adaptation grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub strategy: Strategy,
    pub lambda: f64,
    pub beta: f64,
    pub intensity: u8,
    pub seed: u64,
}

impl RunSpec {
    /// Directory name. λ and β are omitted for strategies that ignore them.
    pub fn id(&self, shift: &str) -> String {
        let knobs = if self.strategy.uses_ensemble() {
            format!("_lam{}_beta{}", self.lambda, self.beta)
        } else {
            String::new()
        };
        format!(
            "{}{knobs}_{shift}{}_seed{}",
            self.strategy.name(),
            self.intensity,
            self.seed
        )
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> LabResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> LabResult<Self> {
        let text = io::read_text(path).map_err(|e| LabError::Config(e.to_string()))?;
        Self::from_toml(&text).map_err(|e| match e {
            LabError::Config(m) => LabError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Canonical JSON form, hashed into manifests.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        io::sha256_hex(self.canonical_json().as_bytes())
    }

    /// Explicit `--output` flag, then the config's `output`, then the
    /// environment variable, then `ancon-out`.
    pub fn output_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.output.clone())
            .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT))
    }

    pub fn validate(&self) -> LabResult<()> {
        let bad = |m: &str| Err(LabError::Config(m.into()));
        if self.format != CONFIG_FORMAT {
            return bad(&format!(
                "unsupported config format {} (expected {CONFIG_FORMAT})",
                self.format
            ));
        }
        let d = &self.data;
        if d.classes < 2 || d.dim == 0 || d.n_per_class == 0 || d.target_n_per_class == 0 {
            return bad("data needs at least two classes, one feature and one sample per class");
        }
        if !(d.spread >= 0.0) || !(d.radius > 0.0) {
            return bad("data.spread must be nonnegative and data.radius positive");
        }
        if d.intensities.iter().any(|&i| i > MAX_INTENSITY) {
            return bad(&format!("data.intensities must lie in 0..={MAX_INTENSITY}"));
        }
        d.ladder
            .validate()
            .map_err(|e| LabError::Config(format!("data.ladder: {e}")))?;
        if !(0.0..1.0).contains(&d.holdout_fraction) {
            return bad("data.holdout_fraction must lie in [0, 1)");
        }
        if d.source_csv.is_some() != d.target_csv.is_some() {
            return bad("data.source_csv and data.target_csv must be given together");
        }
        if self.source.epochs == 0 || !(self.source.lr > 0.0) || self.source.batch_size == 0 {
            return bad("source training needs positive epochs, learning rate and batch size");
        }
        if self.adapt.lambdas.is_empty() || self.adapt.betas.is_empty() {
            return bad("adapt.lambdas and adapt.betas must not be empty");
        }
        for spec in self.grid() {
            self.adapt_config(&spec)
                .validate()
                .map_err(|e| LabError::Config(format!("adapt: {e}")))?;
        }
        let v = &self.verify;
        if v.mc_trials == 0 || v.ensemble_counts.is_empty() || !(v.l_gamma > 0.0) {
            return bad("verify needs trials, ensemble counts and a positive l_gamma");
        }
        Ok(())
    }

    /// The strategy × λ × β × intensity × seed grid, in a fixed order.
    /// Strategies without an ensemble contribute one cell per intensity and seed.
    pub fn grid(&self) -> Vec<RunSpec> {
        let a = &self.adapt;
        let mut out = Vec::new();
        for &strategy in &a.strategies {
            let knobs: Vec<(f64, f64)> = if strategy.uses_ensemble() {
                a.lambdas
                    .iter()
                    .flat_map(|&l| a.betas.iter().map(move |&b| (l, b)))
                    .collect()
            } else {
                vec![(a.lambdas[0], a.betas[0])]
            };
            for (lambda, beta) in knobs {
                for intensity in self.data.levels() {
                    for &seed in &a.seeds {
                        out.push(RunSpec {
                            strategy,
                            lambda,
                            beta,
                            intensity,
                            seed,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn adapt_config(&self, spec: &RunSpec) -> AdaptConfig {
        let a = &self.adapt;
        AdaptConfig {
            strategy: spec.strategy,
            epochs: a.epochs,
            lr: a.lr,
            batch_size: a.batch_size,
            inner_steps: a.inner_steps,
            seed: spec.seed,
            ancon: AnconConfig {
                lambda: spec.lambda,
                beta: spec.beta,
                weight_scheme: a.weight_scheme,
                prediction_scheme: a.prediction_scheme,
                normalization: a.normalization,
            },
            elr_decay: a.elr_decay,
            elr_lambda: a.elr_lambda,
            gce_q: a.gce_q,
            ece_bins: self.metrics.ece_bins,
        }
    }
}
