//! On-disk formats.
//!
//! Datasets are comma-separated, one row per instance, features first and an
//! optional integer label as the last column. Checkpoints are text:
//!
//! ```text
//! # ancon-checkpoint v1
//! d=<dim> k=<classes> epoch=<epoch>
//! <K values of feature row 0>
//! ...
//! <K values of feature row d-1>
//! ```
//!
//! Values are written with Rust's shortest round-trip float formatting, so a
//! checkpoint reads back bit-identical. Ensemble banks are CSV with header
//! `instance,c0,..,c{K-1},visits`.

use std::fs;
use std::io::Write;
use std::path::Path;

use ancon_core::ancon::EnsembleBank;
use ancon_core::data::Dataset;
use ancon_core::LinearParams;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{LabError, LabResult};

pub const CHECKPOINT_HEADER: &str = "# ancon-checkpoint v1";

pub fn ensure_dir(path: &Path) -> LabResult<()> {
    fs::create_dir_all(path).map_err(|e| LabError::io(path, e))
}

pub fn read_text(path: &Path) -> LabResult<String> {
    fs::read_to_string(path).map_err(|e| LabError::io(path, e))
}

/// Writes through a sibling temporary file and a rename, so readers never see
/// a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> LabResult<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(|e| LabError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| LabError::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> LabResult<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| LabError::Parse {
        path: path.into(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> LabResult<()> {
    let mut line = serde_json::to_string(value).expect("plain data serializes");
    line.push('\n');
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| LabError::io(path, e))?;
    f.write_all(line.as_bytes()).map_err(|e| LabError::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> LabResult<Vec<T>> {
    let text = read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| LabError::Parse {
                path: path.into(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Parses dataset CSV text. `name` is used in error messages and provenance.
pub fn parse_csv(text: &str, has_labels: bool, has_header: bool, name: &Path) -> LabResult<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut dim = None;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let err = |line: usize, message: String| LabError::Parse {
            path: name.into(),
            line,
            message,
        };
        let rec = rec.map_err(|e| err(i + 1, e.to_string()))?;
        let line = rec.position().map_or(i + 1, |p| p.line() as usize);
        let cols = rec.len() - usize::from(has_labels);
        if cols == 0 || (has_labels && rec.len() < 2) {
            return Err(err(line, "row has no feature columns".into()));
        }
        match dim {
            None => dim = Some(cols),
            Some(d) if d != cols => {
                return Err(err(line, format!("ragged row: expected {d} features, found {cols}")));
            }
            _ => {}
        }
        for (j, cell) in rec.iter().take(cols).enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| err(line, format!("column {}: `{cell}` is not a number", j + 1)))?;
            features.push(v);
        }
        if has_labels {
            let cell = &rec[cols];
            labels.push(
                cell.parse::<usize>()
                    .map_err(|_| err(line, format!("label `{cell}` is not a nonnegative integer")))?,
            );
        }
    }
    let Some(dim) = dim else {
        return Err(ancon_core::Error::EmptyDataset.into());
    };
    Ok(Dataset::new(
        dim,
        features,
        has_labels.then_some(labels),
        name.display().to_string(),
    )?)
}

pub fn load_csv(path: &Path, has_labels: bool, has_header: bool) -> LabResult<Dataset> {
    parse_csv(&read_text(path)?, has_labels, has_header, path)
}

pub fn format_csv(dataset: &Dataset) -> String {
    let mut out = String::new();
    for i in 0..dataset.len() {
        let row: Vec<String> = dataset.row(i).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        if let Some(labels) = dataset.labels() {
            out.push(',');
            out.push_str(&labels[i].to_string());
        }
        out.push('\n');
    }
    out
}

pub fn write_csv(path: &Path, dataset: &Dataset) -> LabResult<()> {
    write_atomic(path, format_csv(dataset).as_bytes())
}

pub fn format_checkpoint(params: &LinearParams, epoch: usize) -> String {
    let mut out = format!(
        "{CHECKPOINT_HEADER}\nd={} k={} epoch={epoch}\n",
        params.dim(),
        params.classes()
    );
    for row in params.weights().chunks(params.classes()) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_checkpoint(text: &str, name: &Path) -> LabResult<(LinearParams, usize)> {
    let err = |line: usize, message: &str| LabError::Parse {
        path: name.into(),
        line,
        message: message.into(),
    };
    let mut lines = text.lines();
    if lines.next() != Some(CHECKPOINT_HEADER) {
        return Err(err(1, "missing checkpoint header"));
    }
    let shape = lines.next().ok_or_else(|| err(2, "missing shape line"))?;
    let mut dim = None;
    let mut classes = None;
    let mut epoch = None;
    for field in shape.split_whitespace() {
        let (key, value) = field.split_once('=').ok_or_else(|| err(2, "malformed shape field"))?;
        let value: usize = value.parse().map_err(|_| err(2, "shape value is not an integer"))?;
        match key {
            "d" => dim = Some(value),
            "k" => classes = Some(value),
            "epoch" => epoch = Some(value),
            _ => return Err(err(2, "unknown shape field")),
        }
    }
    let (Some(dim), Some(classes), Some(epoch)) = (dim, classes, epoch) else {
        return Err(err(2, "shape line needs d, k and epoch"));
    };
    let mut weights = Vec::with_capacity(dim * classes);
    for (i, line) in lines.enumerate() {
        let row = line
            .split_whitespace()
            .map(str::parse::<f64>)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| err(i + 3, "non-numeric weight"))?;
        if row.len() != classes {
            return Err(err(i + 3, "row length differs from k"));
        }
        weights.extend(row);
    }
    if weights.len() != dim * classes {
        return Err(err(dim + 2, "number of rows differs from d"));
    }
    Ok((LinearParams::from_weights(dim, classes, weights)?, epoch))
}

pub fn write_checkpoint(path: &Path, params: &LinearParams, epoch: usize) -> LabResult<()> {
    write_atomic(path, format_checkpoint(params, epoch).as_bytes())
}

pub fn read_checkpoint(path: &Path) -> LabResult<(LinearParams, usize)> {
    parse_checkpoint(&read_text(path)?, path)
}

pub fn format_bank(bank: &EnsembleBank) -> String {
    let k = bank.classes();
    let mut out = String::from("instance");
    for c in 0..k {
        out.push_str(&format!(",c{c}"));
    }
    out.push_str(",visits\n");
    for i in 0..bank.instances() {
        out.push_str(&i.to_string());
        for v in bank.counts(i) {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push(',');
        out.push_str(&bank.visits(i).to_string());
        out.push('\n');
    }
    out
}

pub fn parse_bank(text: &str, name: &Path) -> LabResult<EnsembleBank> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let width = reader
        .headers()
        .map_err(|e| LabError::Parse {
            path: name.into(),
            line: 1,
            message: e.to_string(),
        })?
        .len();
    if width < 4 {
        return Err(LabError::Parse {
            path: name.into(),
            line: 1,
            message: "bank needs at least two classes".into(),
        });
    }
    let classes = width - 2;
    let mut counts = Vec::new();
    let mut visits = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let err = |message: String| LabError::Parse {
            path: name.into(),
            line: i + 2,
            message,
        };
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let values = rec
            .iter()
            .skip(1)
            .map(str::parse::<f64>)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| err(e.to_string()))?;
        counts.extend_from_slice(&values[..classes]);
        visits.push(values[classes]);
    }
    Ok(EnsembleBank::from_parts(classes, counts, visits)?)
}

pub fn write_bank(path: &Path, bank: &EnsembleBank) -> LabResult<()> {
    write_atomic(path, format_bank(bank).as_bytes())
}

pub fn read_bank(path: &Path) -> LabResult<EnsembleBank> {
    parse_bank(&read_text(path)?, path)
}
