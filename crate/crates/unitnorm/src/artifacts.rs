//! Files a run leaves behind.
//!
//! Nothing here records wall-clock time or paths, so the same settings always
//! produce byte-identical summaries.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use unitnorm_core::optimizer::{Candidate, EpochRecord, LrSearch};
use unitnorm_core::{RunResult, UpdateRule};

pub const HISTORY_HEADER: &str = "epoch,train_error,val_error,lr";

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    text.push('\n');
    fs::write(path, text)
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_error, r.val_error, r.lr));
    }
    out
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> io::Result<()> {
    fs::File::create(path)?.write_all(history_csv(history).as_bytes())
}

/// Outcome of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub rule: UpdateRule,
    pub depth: usize,
    pub test_error: Option<f64>,
    pub base_lr: Option<f64>,
    pub epochs: usize,
    pub diverged: bool,
}

impl RunSummary {
    pub fn new(seed: u64, rule: UpdateRule, depth: usize, run: &RunResult) -> Self {
        RunSummary {
            seed,
            rule,
            depth,
            test_error: run.test_error,
            base_lr: run.base_lr,
            epochs: run.epochs_run,
            diverged: run.diverged,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub seed: u64,
    pub rule: UpdateRule,
    pub depth: usize,
    pub candidates: Vec<Candidate>,
    pub selected: Option<f64>,
}

impl SearchReport {
    pub fn new(seed: u64, rule: UpdateRule, depth: usize, search: LrSearch) -> Self {
        SearchReport { seed, rule, depth, candidates: search.candidates, selected: search.selected }
    }
}

/// Aggregate over the seeds of a protocol run. Mean and standard deviation
/// cover the runs that did not diverge and are `None` if all of them did.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub rule: UpdateRule,
    pub depth: usize,
    pub mean_test_error: Option<f64>,
    pub std_test_error: Option<f64>,
    pub n_valid_runs: usize,
    pub per_run: Vec<RunSummary>,
}

impl ProtocolReport {
    pub fn new(rule: UpdateRule, depth: usize, runs: &[(u64, RunResult)]) -> Self {
        let per_run: Vec<RunSummary> = runs.iter().map(|(s, r)| RunSummary::new(*s, rule, depth, r)).collect();
        let stats = unitnorm_core::optimizer::summarize(runs.to_vec()).ok();
        ProtocolReport {
            rule,
            depth,
            mean_test_error: stats.as_ref().map(|s| s.mean_test_error),
            std_test_error: stats.as_ref().map(|s| s.std_test_error),
            n_valid_runs: stats.map_or(0, |s| s.n_valid_runs),
            per_run,
        }
    }
}
