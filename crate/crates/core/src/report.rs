//! Experiment report plumbing: named scalars tagged with the operation
//! that produced them, invariant bookkeeping, and deterministic JSON
//! output. Wall-clock timings go to a separate file so the main report is
//! byte-identical across runs with the same seed.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;

pub const SCHEMA_VERSION: &str = "1";

/// One reported scalar, tagged with the operation that produced it.
#[derive(Debug, Clone, Serialize)]
pub struct Scalar {
    pub value: f64,
    pub operation: String,
}

/// Deterministic experiment report: config echo, tagged scalars in sorted
/// order, free-form notes, and the list of violated invariants.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub schema_version: String,
    pub crate_version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub scalars: BTreeMap<String, Scalar>,
    pub notes: Vec<String>,
    pub invariant_failures: Vec<String>,
}

impl ExperimentReport {
    pub fn new(config: serde_json::Value, seed: u64) -> Self {
        ExperimentReport {
            schema_version: SCHEMA_VERSION.into(),
            crate_version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config,
            scalars: BTreeMap::new(),
            notes: Vec::new(),
            invariant_failures: Vec::new(),
        }
    }

    pub fn put(&mut self, name: &str, value: f64, operation: &str) {
        self.scalars
            .insert(name.to_string(), Scalar { value, operation: operation.to_string() });
    }

    pub fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    /// Records an invariant check; failures are named in the report and
    /// drive the process exit code.
    pub fn check(&mut self, invariant: &str, holds: bool) {
        if !holds {
            self.invariant_failures.push(invariant.to_string());
        }
    }

    pub fn ok(&self) -> bool {
        self.invariant_failures.is_empty()
    }

    /// Merges another report's scalars (prefixed), notes, and failures.
    pub fn absorb(&mut self, prefix: &str, other: ExperimentReport) {
        for (k, v) in other.scalars {
            self.scalars.insert(format!("{prefix}.{k}"), v);
        }
        for n in other.notes {
            self.notes.push(format!("{prefix}: {n}"));
        }
        for f in other.invariant_failures {
            self.invariant_failures.push(format!("{prefix}: {f}"));
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Writes wall-clock timings (seconds) as their own JSON file, keeping the
/// main report deterministic.
pub fn write_timing(path: &Path, entries: &[(String, f64)]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let map: BTreeMap<&str, f64> =
        entries.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    std::fs::write(path, serde_json::to_string_pretty(&map)? + "\n")?;
    Ok(())
}
