//! Aggregation over seeds: `table.csv`, `series.csv` and a terminal table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ancon_core::metrics::SelectionCriterion;
use ancon_core::selftrain::Strategy;

use crate::error::{LabError, LabResult};
use crate::experiment::{self, RunSummary};
use crate::io;

/// Grid cell without the seed.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct CellKey {
    pub shift: String,
    pub intensity: u8,
    pub strategy: Strategy,
    pub lambda: String,
    pub beta: String,
}

impl CellKey {
    fn of(s: &RunSummary) -> Self {
        let (lambda, beta) = if s.spec.strategy.uses_ensemble() {
            (s.spec.lambda.to_string(), s.spec.beta.to_string())
        } else {
            (String::new(), String::new())
        };
        Self {
            shift: s.shift.clone(),
            intensity: s.spec.intensity,
            strategy: s.spec.strategy,
            lambda,
            beta,
        }
    }

    pub fn label(&self) -> String {
        if self.lambda.is_empty() {
            self.strategy.name().into()
        } else {
            format!("{}(λ={},β={})", self.strategy.name(), self.lambda, self.beta)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

/// Metric names and extractors used in `table.csv`.
pub fn metric_values(s: &RunSummary) -> Vec<(String, Option<f64>)> {
    let mut out = vec![
        ("initial_accuracy".to_string(), s.initial_accuracy),
        ("final_accuracy".to_string(), s.final_accuracy),
        ("peak_accuracy".to_string(), s.peak_accuracy),
        ("degradation".to_string(), s.degradation()),
        ("initial_ece".to_string(), s.initial_ece),
        ("final_ece".to_string(), s.final_ece),
    ];
    for c in SelectionCriterion::ALL {
        let sel = s.selected(c);
        out.push((format!("selected_accuracy.{}", c.name()), sel.and_then(|x| x.accuracy)));
        out.push((format!("selected_ece.{}", c.name()), sel.and_then(|x| x.ece)));
    }
    out
}

pub type Table = BTreeMap<CellKey, BTreeMap<String, Stat>>;

pub fn aggregate(summaries: &[RunSummary]) -> Table {
    let mut raw: BTreeMap<CellKey, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for s in summaries {
        let cell = raw.entry(CellKey::of(s)).or_default();
        for (name, v) in metric_values(s) {
            if let Some(v) = v {
                cell.entry(name).or_default().push(v);
            }
        }
    }
    raw.into_iter()
        .map(|(k, m)| (k, m.into_iter().filter_map(|(n, v)| Some((n, Stat::of(&v)?))).collect()))
        .collect()
}

fn key_fields(k: &CellKey) -> [String; 5] {
    [
        k.strategy.name().into(),
        k.lambda.clone(),
        k.beta.clone(),
        k.shift.clone(),
        k.intensity.to_string(),
    ]
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> LabResult<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let err = |e: csv::Error| LabError::Config(format!("csv: {e}"));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    w.into_inner().map_err(|e| LabError::Config(format!("csv: {e}")))
}

const KEY_HEADER: [&str; 5] = ["strategy", "lambda", "beta", "shift", "intensity"];

/// Per cell and epoch: target accuracies and ECEs over seeds.
pub type Series = BTreeMap<(CellKey, usize), [Vec<f64>; 2]>;

pub fn series(root: &Path, summaries: &[RunSummary]) -> LabResult<Series> {
    let mut out = Series::new();
    for s in summaries {
        let path = experiment::run_dir(root, &s.id).join("eval.csv");
        if !path.exists() {
            continue;
        }
        for row in experiment::read_eval(&path)? {
            let e = out.entry((CellKey::of(s), row.epoch)).or_default();
            e[0].push(row.accuracy);
            e[1].push(row.ece);
        }
    }
    Ok(out)
}

/// Writes `table.csv` and `series.csv` under `root` and returns the text table.
pub fn write_report(root: &Path) -> LabResult<String> {
    let summaries = experiment::load_summaries(root)?;
    let table = aggregate(&summaries);

    let mut rows = Vec::new();
    for (k, metrics) in &table {
        for (name, st) in metrics {
            let mut row = key_fields(k).to_vec();
            row.extend([name.clone(), st.mean.to_string(), st.std.to_string(), st.n.to_string()]);
            rows.push(row);
        }
    }
    let header: Vec<&str> = KEY_HEADER
        .iter()
        .copied()
        .chain(["metric", "mean", "std", "n"])
        .collect();
    io::write_atomic(&root.join("table.csv"), &csv_bytes(&header, rows)?)?;

    let mut rows = Vec::new();
    for ((k, epoch), [acc, ece]) in series(root, &summaries)? {
        for (name, values) in [("target_accuracy", acc), ("target_ece", ece)] {
            let st = Stat::of(&values).expect("nonempty");
            let mut row = key_fields(&k).to_vec();
            row.extend([
                epoch.to_string(),
                name.into(),
                st.mean.to_string(),
                st.std.to_string(),
                st.n.to_string(),
            ]);
            rows.push(row);
        }
    }
    let header: Vec<&str> = KEY_HEADER
        .iter()
        .copied()
        .chain(["epoch", "metric", "mean", "std", "n"])
        .collect();
    io::write_atomic(&root.join("series.csv"), &csv_bytes(&header, rows)?)?;

    Ok(render(&table))
}

fn cell(stats: &BTreeMap<String, Stat>, name: &str, scale: f64) -> String {
    match stats.get(name) {
        Some(s) => format!("{:.2}±{:.2}", s.mean * scale, s.std * scale),
        None => "-".into(),
    }
}

/// Terminal table: accuracy at the InfoMax-selected epoch, final ECE and
/// degradation, in percent.
pub fn render(table: &Table) -> String {
    if table.is_empty() {
        return "no completed runs\n".into();
    }
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:>3} {:<28} {:>13} {:>13} {:>13} {:>3}",
        "shift", "lvl", "strategy", "acc(infomax)", "final ece", "degradation", "n"
    );
    for (k, m) in table {
        let n = m
            .get("final_accuracy")
            .or_else(|| m.get("initial_accuracy"))
            .map_or(0, |s| s.n);
        let _ = writeln!(
            out,
            "{:<16} {:>3} {:<28} {:>13} {:>13} {:>13} {:>3}",
            k.shift,
            k.intensity,
            k.label(),
            cell(m, "selected_accuracy.infomax", 100.0),
            cell(m, "final_ece", 100.0),
            cell(m, "degradation", 100.0),
            n
        );
    }
    out
}
