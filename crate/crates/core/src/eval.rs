//! Metrics over checkpoint runs: overall and per-label accuracies, invalid
//! fractions, leaderboards, and the template-mismatch decrease ratio.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::CheckpointRun;
use crate::labels::LabelTriple;
use crate::parser::compare;

/// Accuracy summary for one run (or one ensemble configuration).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub overall_acc: f64,
    pub event_acc: f64,
    pub useful_acc: f64,
    pub aid_acc: f64,
    /// Fraction of final parses with any absent field.
    pub invalid_fraction: f64,
    pub n_samples: usize,
}

/// Score a run against ground truth, on final (post-regeneration) parses.
pub fn score_run(run: &CheckpointRun, truths: &BTreeMap<String, LabelTriple>) -> Result<Metrics> {
    if run.samples.is_empty() {
        return Err(Error::InvalidConfig("cannot score an empty run".into()));
    }
    let mut overall = 0usize;
    let mut event = 0usize;
    let mut useful = 0usize;
    let mut aid = 0usize;
    let mut invalid = 0usize;
    for sample in &run.samples {
        let truth = truths
            .get(&sample.sample_id)
            .ok_or_else(|| Error::MissingTruth(sample.sample_id.clone()))?;
        let result = compare(&sample.final_parse, truth);
        overall += result.overall_correct as usize;
        event += result.event_correct as usize;
        useful += result.useful_correct as usize;
        aid += result.aid_correct as usize;
        invalid += (!sample.final_parse.valid) as usize;
    }
    let n = run.samples.len();
    Ok(Metrics {
        overall_acc: overall as f64 / n as f64,
        event_acc: event as f64 / n as f64,
        useful_acc: useful as f64 / n as f64,
        aid_acc: aid as f64 / n as f64,
        invalid_fraction: invalid as f64 / n as f64,
        n_samples: n,
    })
}

/// Top-k runs by overall accuracy, descending; ties broken by endpoint name
/// ascending.
pub fn leaderboard(
    runs: &[CheckpointRun],
    truths: &BTreeMap<String, LabelTriple>,
    k: usize,
) -> Result<Vec<(String, Metrics)>> {
    let mut entries = Vec::with_capacity(runs.len());
    for run in runs {
        entries.push((run.endpoint.name.clone(), score_run(run, truths)?));
    }
    entries.sort_by(|a, b| {
        b.1.overall_acc
            .total_cmp(&a.1.overall_acc)
            .then_with(|| a.0.cmp(&b.0))
    });
    entries.truncate(k);
    Ok(entries)
}

/// Relative accuracy drop when inference uses a different prompt template
/// than fine-tuning: `(same - different) / same`.
pub fn decrease_ratio(acc_same_template: f64, acc_diff_template: f64) -> Result<f64> {
    if acc_same_template <= 0.0 {
        return Err(Error::UndefinedRatio(format!(
            "decrease ratio needs a positive same-template accuracy, got {acc_same_template}"
        )));
    }
    Ok((acc_same_template - acc_diff_template) / acc_same_template)
}

/// Performance of `a` relative to `b`: `a / b`.
pub fn relative_performance(a: f64, b: f64) -> Result<f64> {
    if b <= 0.0 {
        return Err(Error::UndefinedRatio(format!(
            "relative performance needs a positive reference, got {b}"
        )));
    }
    Ok(a / b)
}

/// Relative improvement of `a` over `b`: `(a - b) / b`.
pub fn improvement(a: f64, b: f64) -> Result<f64> {
    Ok(relative_performance(a, b)? - 1.0)
}

/// Format a ratio as a percentage rounded half-up to one decimal, e.g.
/// `0.145187` becomes `14.5%`.
pub fn format_pct(ratio: f64) -> String {
    format!("{:.1}%", round_pct(ratio))
}

/// Percentage value rounded half-up to one decimal place.
pub fn round_pct(ratio: f64) -> f64 {
    (ratio * 1000.0).round() / 10.0
}
