//! Data preparation and the adaptation grid runner.
//!
//! Output layout under the output root:
//!
//! ```text
//! manifest.json            tool version, config hash, run counts
//! config.json              the resolved configuration
//! summary.csv              one row per completed run, grid order
//! sources/seed-<s>.ckpt    source model per replicate
//! runs/<id>/config.json    adaptation settings of the run
//! runs/<id>/records.jsonl  one record per epoch
//! runs/<id>/checkpoints/   epoch-NNNN.ckpt after each epoch
//! runs/<id>/state.json     resume point; removed once the run completes
//! runs/<id>/eval.csv       per-epoch accuracy and ECE on the labeled target
//! runs/<id>/bank.csv       final ensemble bank (ensemble strategies)
//! runs/<id>/summary.json   written last; its presence marks completion
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use ancon_core::ancon::EnsembleBank;
use ancon_core::data::{apply_shift, gen_clusters, split_holdout, ClusterSpec, Dataset, ShiftSpec};
use ancon_core::metrics::{self, select_checkpoint, PredictionTable, SelectionCriterion};
use ancon_core::selftrain::{train_source, AdaptConfig, Adaptation, RunRecord, RunState, SourceModel};
use ancon_core::LinearParams;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, RunSpec};
use crate::error::{LabError, LabResult};
use crate::io;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Generator streams of the source and target samples.
const SOURCE_STREAM: u64 = 0;
const TARGET_STREAM: u64 = 1;

/// Offset between the replicate seed and the holdout split seed.
const SPLIT_SEED_OFFSET: u64 = 0x5eed;

/// A shifted target domain. `train` is what adaptation sees, with labels
/// stripped; `target` is the full labeled set used for reporting.
#[derive(Debug, Clone)]
pub struct Domain {
    pub target: Dataset,
    pub train: Dataset,
    pub holdout: Dataset,
}

fn cluster_spec(cfg: &ExperimentConfig, seed: u64, n_per_class: usize) -> ClusterSpec {
    let d = &cfg.data;
    ClusterSpec {
        classes: d.classes,
        dim: d.dim,
        n_per_class,
        spread: d.spread,
        radius: d.radius,
        seed: d.seed.wrapping_add(seed),
    }
}

/// Labeled source domain of a replicate.
pub fn source_domain(cfg: &ExperimentConfig, seed: u64) -> LabResult<Dataset> {
    match &cfg.data.source_csv {
        Some(path) => io::load_csv(path, true, cfg.data.csv_has_header),
        None => Ok(gen_clusters(
            &cluster_spec(cfg, seed, cfg.data.n_per_class),
            SOURCE_STREAM,
        )?),
    }
}

pub fn shift_spec(cfg: &ExperimentConfig, seed: u64, intensity: u8) -> ShiftSpec {
    let mut shift = ShiftSpec::new(cfg.data.shift, intensity, cfg.data.seed.wrapping_add(seed));
    shift.ladder = cfg.data.ladder;
    shift
}

/// Target domain of a replicate at one intensity.
pub fn target_domain(cfg: &ExperimentConfig, seed: u64, intensity: u8) -> LabResult<Domain> {
    let d = &cfg.data;
    let target = match &d.target_csv {
        Some(path) => io::load_csv(path, d.target_has_labels, d.csv_has_header)?,
        None => {
            let base = gen_clusters(&cluster_spec(cfg, seed, d.target_n_per_class), TARGET_STREAM)?;
            apply_shift(&base, &shift_spec(cfg, seed, intensity))?
        }
    };
    let (train, holdout) = split_holdout(&target, d.holdout_fraction, seed.wrapping_add(SPLIT_SEED_OFFSET))?;
    Ok(Domain {
        train: train.without_labels(),
        holdout,
        target,
    })
}

pub fn source_model(cfg: &ExperimentConfig, seed: u64) -> LabResult<SourceModel> {
    let source = source_domain(cfg, seed)?;
    Ok(train_source(&source, cfg.data.classes, &cfg.source.to_core(seed))?)
}

/// Accuracy and ECE of one set of parameters on the labeled target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub epoch: usize,
    pub accuracy: f64,
    pub ece: f64,
}

fn evaluate(params: &LinearParams, target: &Dataset, bins: usize, epoch: usize) -> LabResult<Option<EvalRow>> {
    let Some(labels) = target.labels() else {
        return Ok(None);
    };
    let table = PredictionTable::from_model(params, target.features(), Some(labels))?;
    Ok(Some(EvalRow {
        epoch,
        accuracy: metrics::accuracy(&table)?,
        ece: metrics::ece(&table, bins)?,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selected {
    pub criterion: SelectionCriterion,
    pub epoch: usize,
    pub accuracy: Option<f64>,
    pub ece: Option<f64>,
}

/// Headline numbers of a finished run. Accuracy fields are `None` when the
/// target has no labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub id: String,
    pub spec: RunSpec,
    pub shift: String,
    pub epochs: usize,
    pub initial_accuracy: Option<f64>,
    pub initial_ece: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub final_ece: Option<f64>,
    pub peak_accuracy: Option<f64>,
    pub peak_epoch: Option<usize>,
    pub selected: Vec<Selected>,
}

impl RunSummary {
    pub fn selected(&self, criterion: SelectionCriterion) -> Option<&Selected> {
        self.selected.iter().find(|s| s.criterion == criterion)
    }

    /// Peak minus final target accuracy.
    pub fn degradation(&self) -> Option<f64> {
        Some(self.peak_accuracy? - self.final_accuracy?)
    }
}

fn summarize(
    cfg: &ExperimentConfig,
    spec: &RunSpec,
    initial: Option<EvalRow>,
    records: &[RunRecord],
    eval: &[EvalRow],
) -> LabResult<RunSummary> {
    let at = |epoch: usize| eval.iter().find(|r| r.epoch == epoch);
    let last = eval.last().copied().or(initial);
    // first maximum wins
    let peak = eval.iter().fold(None::<EvalRow>, |best, r| match best {
        Some(b) if b.accuracy >= r.accuracy => Some(b),
        _ => Some(*r),
    });
    let mut selected = Vec::new();
    if !records.is_empty() {
        for criterion in SelectionCriterion::ALL {
            let epoch = select_checkpoint(records, criterion)?;
            selected.push(Selected {
                criterion,
                epoch,
                accuracy: at(epoch).map(|r| r.accuracy),
                ece: at(epoch).map(|r| r.ece),
            });
        }
    }
    Ok(RunSummary {
        id: spec.id(cfg.data.shift_name()),
        spec: *spec,
        shift: cfg.data.shift_name().into(),
        epochs: records.len(),
        initial_accuracy: initial.map(|r| r.accuracy),
        initial_ece: initial.map(|r| r.ece),
        final_accuracy: last.map(|r| r.accuracy),
        final_ece: last.map(|r| r.ece),
        peak_accuracy: peak.map(|r| r.accuracy),
        peak_epoch: peak.map(|r| r.epoch),
        selected,
    })
}

/// Everything produced by one grid cell.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub summary: RunSummary,
    pub records: Vec<RunRecord>,
    pub eval: Vec<EvalRow>,
    pub params: LinearParams,
    pub bank: Option<EnsembleBank>,
}

/// Runs one cell in memory.
pub fn run_cell(
    cfg: &ExperimentConfig,
    spec: &RunSpec,
    source: &LinearParams,
    domain: &Domain,
) -> LabResult<CellResult> {
    let adapt_cfg = cfg.adapt_config(spec);
    let bins = cfg.metrics.ece_bins;
    let initial = evaluate(source, &domain.target, bins, 0)?;
    let mut run = Adaptation::new(&domain.train, &domain.holdout, source.clone(), adapt_cfg)?;
    let mut records = Vec::with_capacity(adapt_cfg.epochs);
    let mut eval = Vec::with_capacity(adapt_cfg.epochs);
    while !run.is_done() {
        let record = run.run_epoch()?;
        eval.extend(evaluate(&run.state().params, &domain.target, bins, record.epoch)?);
        records.push(record);
    }
    let summary = summarize(cfg, spec, initial, &records, &eval)?;
    let state = run.into_state();
    Ok(CellResult {
        summary,
        records,
        eval,
        params: state.params,
        bank: state.bank,
    })
}

/// Options of the on-disk runner.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Stop each run after this many epochs in this invocation, leaving a
    /// resume point behind.
    pub stop_after_epochs: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub runs: usize,
    pub completed: usize,
}

/// What an `adapt` invocation did.
#[derive(Debug, Clone, Default)]
pub struct GridReport {
    pub summaries: Vec<RunSummary>,
    pub runs: usize,
    pub skipped: usize,
    pub resumed: usize,
    pub incomplete: usize,
    pub warnings: Vec<String>,
}

pub fn run_dir(root: &Path, id: &str) -> PathBuf {
    root.join("runs").join(id)
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("epoch-{epoch:04}.ckpt"))
}

fn source_path(root: &Path, seed: u64) -> PathBuf {
    root.join("sources").join(format!("seed-{seed}.ckpt"))
}

/// Refuses an output root that already holds results of another config.
fn claim_output(cfg: &ExperimentConfig, root: &Path) -> LabResult<()> {
    io::ensure_dir(root)?;
    let path = root.join("config.json");
    let json = io::to_json_pretty(cfg);
    if path.exists() {
        let existing = io::read_text(&path)?;
        if existing != json {
            return Err(LabError::Config(format!(
                "{} holds results of a different configuration; choose another output directory",
                root.display()
            )));
        }
        return Ok(());
    }
    io::write_atomic(&path, json.as_bytes())
}

/// Source parameters per seed.
pub type Sources = Vec<(u64, LinearParams)>;

/// Trains (or loads) the source model of every seed and writes the checkpoints.
pub fn train_sources(cfg: &ExperimentConfig, root: &Path) -> LabResult<(Sources, Vec<String>)> {
    claim_output(cfg, root)?;
    io::ensure_dir(&root.join("sources"))?;
    let results: Vec<LabResult<(u64, LinearParams, Vec<String>)>> = cfg
        .adapt
        .seeds
        .par_iter()
        .map(|&seed| {
            let path = source_path(root, seed);
            if path.exists() {
                return Ok((seed, io::read_checkpoint(&path)?.0, Vec::new()));
            }
            let model = source_model(cfg, seed)?;
            io::write_checkpoint(&path, &model.params, cfg.source.epochs)?;
            let warnings = model
                .warnings
                .into_iter()
                .map(|w| format!("seed {seed}: {w}"))
                .collect();
            Ok((seed, model.params, warnings))
        })
        .collect();
    let mut sources = Vec::new();
    let mut warnings = Vec::new();
    for r in results {
        let (seed, params, w) = r?;
        sources.push((seed, params));
        warnings.extend(w);
    }
    Ok((sources, warnings))
}

enum CellOutcome {
    Skipped(RunSummary),
    Finished { summary: RunSummary, resumed: bool },
    Stopped,
}

#[derive(Serialize, Deserialize, PartialEq)]
struct RunConfigFile {
    spec: RunSpec,
    shift: String,
    adapt: AdaptConfig,
}

fn run_cell_on_disk(
    cfg: &ExperimentConfig,
    root: &Path,
    spec: &RunSpec,
    source: &LinearParams,
    opts: RunOptions,
) -> LabResult<CellOutcome> {
    let shift = cfg.data.shift_name();
    let dir = run_dir(root, &spec.id(shift));
    let summary_path = dir.join("summary.json");
    if summary_path.exists() {
        return Ok(CellOutcome::Skipped(io::read_json(&summary_path)?));
    }
    io::ensure_dir(&dir.join("checkpoints"))?;
    let adapt_cfg = cfg.adapt_config(spec);
    let run_config = RunConfigFile {
        spec: *spec,
        shift: shift.into(),
        adapt: adapt_cfg,
    };
    io::write_atomic(&dir.join("config.json"), io::to_json_pretty(&run_config).as_bytes())?;

    let domain = target_domain(cfg, spec.seed, spec.intensity)?;
    let state_path = dir.join("state.json");
    let records_path = dir.join("records.jsonl");
    let resumed = state_path.exists();
    let mut run = if resumed {
        let state: RunState = io::read_json(&state_path)?;
        // drop records written after the last saved state
        let mut records: Vec<RunRecord> = io::read_jsonl(&records_path)?;
        records.truncate(state.next_epoch);
        rewrite_jsonl(&records_path, &records)?;
        Adaptation::resume(&domain.train, &domain.holdout, adapt_cfg, state)?
    } else {
        rewrite_jsonl(&records_path, &[])?;
        Adaptation::new(&domain.train, &domain.holdout, source.clone(), adapt_cfg)?
    };

    let mut budget = opts.stop_after_epochs.unwrap_or(usize::MAX);
    while !run.is_done() {
        if budget == 0 {
            return Ok(CellOutcome::Stopped);
        }
        budget -= 1;
        let record = run.run_epoch()?;
        io::write_checkpoint(&checkpoint_path(&dir, record.epoch), &run.state().params, record.epoch)?;
        io::append_jsonl(&records_path, &record)?;
        io::write_atomic(
            &state_path,
            serde_json::to_string(run.state()).expect("state serializes").as_bytes(),
        )?;
    }

    let records: Vec<RunRecord> = io::read_jsonl(&records_path)?;
    let bins = cfg.metrics.ece_bins;
    let initial = evaluate(source, &domain.target, bins, 0)?;
    let mut eval = Vec::with_capacity(records.len());
    for r in &records {
        let (params, _) = io::read_checkpoint(&checkpoint_path(&dir, r.epoch))?;
        eval.extend(evaluate(&params, &domain.target, bins, r.epoch)?);
    }
    let summary = summarize(cfg, spec, initial, &records, &eval)?;
    let state = run.into_state();
    if let Some(bank) = &state.bank {
        io::write_bank(&dir.join("bank.csv"), bank)?;
    }
    write_eval(&dir.join("eval.csv"), &eval)?;
    io::write_atomic(&summary_path, io::to_json_pretty(&summary).as_bytes())?;
    if state_path.exists() {
        fs::remove_file(&state_path).map_err(|e| LabError::io(&state_path, e))?;
    }
    Ok(CellOutcome::Finished { summary, resumed })
}

fn rewrite_jsonl(path: &Path, records: &[RunRecord]) -> LabResult<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    io::write_atomic(path, text.as_bytes())
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new())
}

fn finish_csv(path: &Path, w: csv::Writer<Vec<u8>>) -> LabResult<()> {
    let bytes = w
        .into_inner()
        .map_err(|e| LabError::io(path, std::io::Error::other(e.to_string())))?;
    io::write_atomic(path, &bytes)
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> LabError + '_ {
    move |e| LabError::io(path, std::io::Error::other(e))
}

fn write_eval(path: &Path, eval: &[EvalRow]) -> LabResult<()> {
    let mut w = csv_writer();
    w.write_record(["epoch", "target_accuracy", "target_ece"])
        .map_err(csv_err(path))?;
    for r in eval {
        w.write_record([r.epoch.to_string(), r.accuracy.to_string(), r.ece.to_string()])
            .map_err(csv_err(path))?;
    }
    finish_csv(path, w)
}

pub fn read_eval(path: &Path) -> LabResult<Vec<EvalRow>> {
    let text = io::read_text(path)?;
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(csv_err(path))?;
        let parse = |j: usize| -> LabResult<f64> {
            row.get(j).and_then(|v| v.parse().ok()).ok_or_else(|| LabError::Parse {
                path: path.into(),
                line: i + 2,
                message: "expected epoch, accuracy and ece".into(),
            })
        };
        out.push(EvalRow {
            epoch: parse(0)? as usize,
            accuracy: parse(1)?,
            ece: parse(2)?,
        });
    }
    Ok(out)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_summary_csv(path: &Path, summaries: &[RunSummary]) -> LabResult<()> {
    let mut w = csv_writer();
    let mut header: Vec<String> = [
        "id",
        "strategy",
        "lambda",
        "beta",
        "shift",
        "intensity",
        "seed",
        "epochs",
        "initial_accuracy",
        "final_accuracy",
        "peak_accuracy",
        "peak_epoch",
        "final_ece",
    ]
    .map(String::from)
    .to_vec();
    for c in SelectionCriterion::ALL {
        header.push(format!("{}_epoch", c.name()));
        header.push(format!("{}_accuracy", c.name()));
        header.push(format!("{}_ece", c.name()));
    }
    w.write_record(&header).map_err(csv_err(path))?;
    for s in summaries {
        let knob = |v: f64| {
            if s.spec.strategy.uses_ensemble() {
                v.to_string()
            } else {
                String::new()
            }
        };
        let mut row = vec![
            s.id.clone(),
            s.spec.strategy.name().into(),
            knob(s.spec.lambda),
            knob(s.spec.beta),
            s.shift.clone(),
            s.spec.intensity.to_string(),
            s.spec.seed.to_string(),
            s.epochs.to_string(),
            opt(s.initial_accuracy),
            opt(s.final_accuracy),
            opt(s.peak_accuracy),
            s.peak_epoch.map(|e| e.to_string()).unwrap_or_default(),
            opt(s.final_ece),
        ];
        for c in SelectionCriterion::ALL {
            match s.selected(c) {
                Some(sel) => row.extend([sel.epoch.to_string(), opt(sel.accuracy), opt(sel.ece)]),
                None => row.extend([String::new(), String::new(), String::new()]),
            }
        }
        w.write_record(&row).map_err(csv_err(path))?;
    }
    finish_csv(path, w)
}

/// Runs the whole grid, resuming interrupted runs and skipping finished ones.
pub fn run_grid(cfg: &ExperimentConfig, root: &Path, opts: RunOptions) -> LabResult<GridReport> {
    let grid = cfg.grid();
    let mut report = GridReport {
        runs: grid.len(),
        ..GridReport::default()
    };
    claim_output(cfg, root)?;
    if grid.is_empty() {
        report
            .warnings
            .push("the adaptation grid is empty (no strategies, seeds or intensities); nothing to run".into());
    }
    let sources = if grid.is_empty() {
        Vec::new()
    } else {
        let (sources, warnings) = train_sources(cfg, root)?;
        report.warnings.extend(warnings);
        sources
    };
    let source_of = |seed: u64| {
        &sources
            .iter()
            .find(|(s, _)| *s == seed)
            .expect("every seed has a source")
            .1
    };

    let outcomes: Vec<LabResult<CellOutcome>> = grid
        .par_iter()
        .map(|spec| run_cell_on_disk(cfg, root, spec, source_of(spec.seed), opts))
        .collect();
    for outcome in outcomes {
        match outcome? {
            CellOutcome::Skipped(s) => {
                report.skipped += 1;
                report.summaries.push(s);
            }
            CellOutcome::Finished { summary, resumed } => {
                report.resumed += usize::from(resumed);
                report.summaries.push(summary);
            }
            CellOutcome::Stopped => report.incomplete += 1,
        }
    }

    write_summary_csv(&root.join("summary.csv"), &report.summaries)?;
    let manifest = Manifest {
        tool: "ancon".into(),
        version: TOOL_VERSION.into(),
        config_hash: cfg.hash(),
        runs: report.runs,
        completed: report.summaries.len(),
    };
    io::write_atomic(&root.join("manifest.json"), io::to_json_pretty(&manifest).as_bytes())?;
    Ok(report)
}

/// Loads the summaries of every completed run under `root`, sorted by id.
pub fn load_summaries(root: &Path) -> LabResult<Vec<RunSummary>> {
    let runs = root.join("runs");
    if !runs.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    let entries = fs::read_dir(&runs).map_err(|e| LabError::io(&runs, e))?;
    for entry in entries {
        let path = entry.map_err(|e| LabError::io(&runs, e))?.path().join("summary.json");
        if path.exists() {
            out.push(io::read_json::<RunSummary>(&path)?);
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataFile {
    pub path: String,
    pub role: String,
    pub seed: u64,
    /// Shift applied to the target files; absent for source and external data.
    pub shift: Option<ShiftSpec>,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataManifest {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub data: crate::config::DataConfig,
    pub seeds: Vec<u64>,
    pub files: Vec<DataFile>,
}

/// Writes every dataset of the grid as CSV under `root/data`, plus
/// `root/data/manifest.json` listing seeds, shift specs and file hashes.
pub fn generate_data(cfg: &ExperimentConfig, root: &Path) -> LabResult<DataManifest> {
    let data_root = root.join("data");
    io::ensure_dir(&data_root)?;
    let mut files = Vec::new();
    let mut write = |rel: String, role: &str, seed: u64, shift: Option<ShiftSpec>, ds: &Dataset| -> LabResult<()> {
        let path = data_root.join(&rel);
        if let Some(parent) = path.parent() {
            io::ensure_dir(parent)?;
        }
        let text = io::format_csv(ds);
        io::write_atomic(&path, text.as_bytes())?;
        files.push(DataFile {
            path: rel,
            role: role.into(),
            seed,
            shift,
            sha256: io::sha256_hex(text.as_bytes()),
        });
        Ok(())
    };
    for &seed in &cfg.adapt.seeds {
        write(
            format!("seed-{seed}/source.csv"),
            "source",
            seed,
            None,
            &source_domain(cfg, seed)?,
        )?;
        for intensity in cfg.data.levels() {
            let domain = target_domain(cfg, seed, intensity)?;
            let shift = (!cfg.data.external()).then(|| shift_spec(cfg, seed, intensity));
            let stem = format!("seed-{seed}/{}-{intensity}", cfg.data.shift_name());
            write(format!("{stem}/target.csv"), "target", seed, shift, &domain.target)?;
            write(format!("{stem}/train.csv"), "train", seed, shift, &domain.train)?;
            write(format!("{stem}/holdout.csv"), "holdout", seed, shift, &domain.holdout)?;
        }
    }
    let manifest = DataManifest {
        tool: "ancon".into(),
        version: TOOL_VERSION.into(),
        config_hash: cfg.hash(),
        data: cfg.data.clone(),
        seeds: cfg.adapt.seeds.clone(),
        files,
    };
    io::write_atomic(
        &data_root.join("manifest.json"),
        io::to_json_pretty(&manifest).as_bytes(),
    )?;
    Ok(manifest)
}
