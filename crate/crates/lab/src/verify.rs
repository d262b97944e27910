//! Numerical verification of the guarantees, written to `verify.csv`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ancon_core::theory::{self, Check, VerifyConfig};

use crate::error::{LabError, LabResult};
use crate::io;

/// Deliberate defects used to show the suite can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Fault {
    /// Negates the exponent function of the concentration bounds.
    XiSign,
}

fn flipped_xi(z: f64) -> f64 {
    -theory::xi(z)
}

pub fn run(config: &VerifyConfig, fault: Option<Fault>) -> LabResult<Vec<Check>> {
    let xi_fn: fn(f64) -> f64 = match fault {
        None => theory::xi,
        Some(Fault::XiSign) => flipped_xi,
    };
    Ok(theory::verify_suite(config, xi_fn)?)
}

pub fn write_csv(path: &Path, checks: &[Check]) -> LabResult<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let err = |e: csv::Error| LabError::io(path, std::io::Error::other(e));
    w.write_record(["config_id", "quantity", "value", "bound", "pass"])
        .map_err(err)?;
    for c in checks {
        w.write_record([
            c.config_id.clone(),
            c.quantity.clone(),
            c.value.to_string(),
            c.bound.map(|b| b.to_string()).unwrap_or_default(),
            c.pass.to_string(),
        ])
        .map_err(err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| LabError::io(path, std::io::Error::other(e.to_string())))?;
    io::write_atomic(path, &bytes)
}

/// Pass counts per quantity, one line each.
pub fn summary(checks: &[Check]) -> String {
    let mut by: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for c in checks {
        let e = by.entry(c.quantity.as_str()).or_default();
        e.0 += usize::from(c.pass);
        e.1 += 1;
    }
    let mut out = String::new();
    for (q, (pass, total)) in by {
        let tag = if pass == total { "ok  " } else { "FAIL" };
        let _ = writeln!(out, "{tag} {q:<32} {pass}/{total}");
    }
    out
}

pub fn failures(checks: &[Check]) -> usize {
    checks.iter().filter(|c| !c.pass).count()
}
