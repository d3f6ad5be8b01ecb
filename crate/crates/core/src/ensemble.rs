//! Top-N checkpoint selection and the two majority-vote schemes, plus the
//! N = 1..15 sweep.
//!
//! Vote type 1 ([`VoteType::Triple`]) counts whole label triples; vote type 2
//! ([`VoteType::PerLabel`]) votes each label independently, so its outcome may
//! differ from every individual prediction. Absent fields participate as a
//! distinct value, and ties go to the highest-ranked checkpoint among the
//! tied candidates.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{leaderboard, Metrics};
use crate::infer::CheckpointRun;
use crate::labels::{LabelTriple, PartialLabelTriple};
use crate::parser::compare_labels;

/// The two majority-vote schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VoteType {
    /// Type 1: majority over whole label triples.
    #[serde(rename = "triple")]
    Triple,
    /// Type 2: independent majority per label.
    #[serde(rename = "per_label")]
    PerLabel,
}

impl VoteType {
    pub const BOTH: [VoteType; 2] = [VoteType::Triple, VoteType::PerLabel];

    pub fn name(self) -> &'static str {
        match self {
            VoteType::Triple => "triple",
            VoteType::PerLabel => "per_label",
        }
    }
}

impl std::fmt::Display for VoteType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One ensemble configuration: how many checkpoints, which scheme, and the
/// ranking that orders them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub n: usize,
    pub vote: VoteType,
    /// Checkpoint names by overall accuracy descending (evaluator tie rule).
    pub ranking: Vec<String>,
}

/// Majority value with rank-based tie-breaking: among candidates with the
/// maximal count, the one predicted by the highest-ranked input wins.
fn vote_values<T: Eq + Hash + Clone>(values: &[T]) -> T {
    debug_assert!(!values.is_empty());
    let mut counts: HashMap<&T, usize> = HashMap::with_capacity(values.len());
    for value in values {
        *counts.entry(value).or_insert(0) += 1;
    }
    let max = counts.values().copied().max().expect("non-empty");
    values
        .iter()
        .find(|value| counts[*value] == max)
        .expect("some value has the max count")
        .clone()
}

/// Vote type 1: the whole triple with the highest occurrence count among the
/// predictions, listed in checkpoint-ranking order.
pub fn vote_triple(preds: &[PartialLabelTriple]) -> Result<PartialLabelTriple> {
    if preds.is_empty() {
        return Err(Error::InvalidConfig("cannot vote over zero predictions".into()));
    }
    Ok(vote_values(preds))
}

/// Vote type 2: each of the three fields voted independently.
pub fn vote_per_label(preds: &[PartialLabelTriple]) -> Result<PartialLabelTriple> {
    if preds.is_empty() {
        return Err(Error::InvalidConfig("cannot vote over zero predictions".into()));
    }
    let events: Vec<Option<String>> = preds.iter().map(|p| p.event.clone()).collect();
    let usefuls: Vec<Option<bool>> = preds.iter().map(|p| p.useful).collect();
    let aids: Vec<Option<String>> = preds.iter().map(|p| p.aid.clone()).collect();
    Ok(PartialLabelTriple {
        event: vote_values(&events),
        useful: vote_values(&usefuls),
        aid: vote_values(&aids),
    })
}

/// Score an ensemble: per sample, gather the top-n checkpoints' final parses
/// in ranking order, vote, and compare against ground truth.
pub fn ensemble_accuracy(
    runs: &[CheckpointRun],
    truths: &BTreeMap<String, LabelTriple>,
    config: &EnsembleConfig,
) -> Result<Metrics> {
    if config.n == 0 {
        return Err(Error::InvalidConfig("ensemble size must be >= 1".into()));
    }
    if config.n > config.ranking.len() {
        return Err(Error::InvalidConfig(format!(
            "ensemble size {} exceeds ranking length {}",
            config.n,
            config.ranking.len()
        )));
    }

    let by_name: HashMap<&str, &CheckpointRun> = runs
        .iter()
        .map(|run| (run.endpoint.name.as_str(), run))
        .collect();
    let mut top_runs = Vec::with_capacity(config.n);
    for name in &config.ranking[..config.n] {
        let run = by_name.get(name.as_str()).ok_or_else(|| {
            Error::InvalidConfig(format!("ranking names unknown run {name:?}"))
        })?;
        let index: HashMap<&str, &PartialLabelTriple> = run
            .samples
            .iter()
            .map(|s| (s.sample_id.as_str(), &s.final_parse.labels))
            .collect();
        if index.len() != run.samples.len() {
            return Err(Error::InvalidConfig(format!(
                "run {name:?} has duplicate sample ids"
            )));
        }
        top_runs.push((name.clone(), index));
    }

    let lead = runs
        .iter()
        .find(|r| r.endpoint.name == config.ranking[0])
        .expect("top-ranked run resolved above");
    let mut overall = 0usize;
    let mut event = 0usize;
    let mut useful = 0usize;
    let mut aid = 0usize;
    let mut invalid = 0usize;
    for sample in &lead.samples {
        let mut preds = Vec::with_capacity(config.n);
        for (name, index) in &top_runs {
            let labels = index.get(sample.sample_id.as_str()).ok_or_else(|| {
                Error::MissingSample {
                    run: name.clone(),
                    sample: sample.sample_id.clone(),
                }
            })?;
            preds.push((*labels).clone());
        }
        let voted = match config.vote {
            VoteType::Triple => vote_triple(&preds)?,
            VoteType::PerLabel => vote_per_label(&preds)?,
        };
        let truth = truths
            .get(&sample.sample_id)
            .ok_or_else(|| Error::MissingTruth(sample.sample_id.clone()))?;
        let result = compare_labels(&voted, truth);
        overall += result.overall_correct as usize;
        event += result.event_correct as usize;
        useful += result.useful_correct as usize;
        aid += result.aid_correct as usize;
        invalid += (!voted.is_complete()) as usize;
    }
    let n = lead.samples.len();
    Ok(Metrics {
        overall_acc: overall as f64 / n as f64,
        event_acc: event as f64 / n as f64,
        useful_acc: useful as f64 / n as f64,
        aid_acc: aid as f64 / n as f64,
        invalid_fraction: invalid as f64 / n as f64,
        n_samples: n,
    })
}

/// One point of the ensemble sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n: usize,
    pub vote: VoteType,
    pub metrics: Metrics,
}

/// Sweep both vote types over n = 1..=n_max (truncated to the number of
/// runs). The ranking comes from the evaluator leaderboard.
pub fn sweep_n(
    runs: &[CheckpointRun],
    truths: &BTreeMap<String, LabelTriple>,
    n_max: usize,
) -> Result<Vec<SweepPoint>> {
    if runs.is_empty() {
        return Ok(Vec::new());
    }
    let ranking: Vec<String> = leaderboard(runs, truths, runs.len())?
        .into_iter()
        .map(|(name, _)| name)
        .collect();
    let upper = n_max.min(runs.len());
    let mut points = Vec::with_capacity(2 * upper);
    for n in 1..=upper {
        for vote in VoteType::BOTH {
            let config = EnsembleConfig {
                n,
                vote,
                ranking: ranking.clone(),
            };
            points.push(SweepPoint {
                n,
                vote,
                metrics: ensemble_accuracy(runs, truths, &config)?,
            });
        }
    }
    Ok(points)
}

/// Write the sweep as CSV for plotting.
pub fn write_sweep_csv(points: &[SweepPoint], mut sink: impl Write) -> std::io::Result<()> {
    writeln!(sink, "n,vote_type,overall_acc,event_acc,useful_acc,aid_acc")?;
    for p in points {
        writeln!(
            sink,
            "{},{},{},{},{},{}",
            p.n, p.vote, p.metrics.overall_acc, p.metrics.event_acc, p.metrics.useful_acc,
            p.metrics.aid_acc
        )?;
    }
    Ok(())
}

/// Best (n, overall accuracy) per vote type, lowest n winning ties.
pub fn sweep_argmax(points: &[SweepPoint]) -> Vec<(VoteType, usize, f64)> {
    VoteType::BOTH
        .iter()
        .filter_map(|&vote| {
            points
                .iter()
                .filter(|p| p.vote == vote)
                .max_by(|a, b| {
                    a.metrics
                        .overall_acc
                        .total_cmp(&b.metrics.overall_acc)
                        .then_with(|| b.n.cmp(&a.n))
                })
                .map(|p| (vote, p.n, p.metrics.overall_acc))
        })
        .collect()
}
