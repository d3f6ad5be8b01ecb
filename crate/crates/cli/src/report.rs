//! Report generation: leaderboard, per-run metrics, the template-mismatch
//! decrease table, and the ensemble sweep. Everything is derived from
//! persisted run files alone, so regenerating a deleted report reproduces it
//! byte for byte.

use std::fmt::Write as _;

use crisisml_core::ensemble::{sweep_argmax, SweepPoint};
use crisisml_core::eval::{decrease_ratio, format_pct, Metrics};
use crisisml_core::infer::CheckpointRun;
use crisisml_core::TemplateId;

pub struct ReportInputs<'a> {
    pub runs: &'a [CheckpointRun],
    /// The template the checkpoints were fine-tuned for.
    pub primary_template: TemplateId,
    /// The mismatched inference template paired against it.
    pub mismatch_template: TemplateId,
    pub leaderboard: &'a [(String, Metrics)],
    pub sweep: &'a [SweepPoint],
    pub per_run: &'a [RunRow],
}

/// One row of the all-runs table.
pub struct RunRow {
    pub name: String,
    pub template: TemplateId,
    pub metrics: Metrics,
    pub one_shot_invalid_fraction: f64,
    pub excluded: bool,
}

pub fn render_markdown(inputs: &ReportInputs<'_>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Checkpoint run report\n");

    if inputs.runs.is_empty() {
        let _ = writeln!(out, "No runs found.");
        return out;
    }

    let _ = writeln!(
        out,
        "## Leaderboard (top {}, template {})\n",
        inputs.leaderboard.len(),
        inputs.primary_template
    );
    let _ = writeln!(
        out,
        "| rank | checkpoint | overall | event | useful | aid | invalid |"
    );
    let _ = writeln!(out, "|---|---|---|---|---|---|---|");
    for (rank, (name, m)) in inputs.leaderboard.iter().enumerate() {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} |",
            rank + 1,
            name,
            format_pct(m.overall_acc),
            format_pct(m.event_acc),
            format_pct(m.useful_acc),
            format_pct(m.aid_acc),
            format_pct(m.invalid_fraction),
        );
    }

    let _ = writeln!(out, "\n## All runs\n");
    let _ = writeln!(
        out,
        "| checkpoint | template | overall | event | useful | aid | invalid | one-shot invalid | excluded |"
    );
    let _ = writeln!(out, "|---|---|---|---|---|---|---|---|---|");
    for row in inputs.per_run {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            row.name,
            row.template,
            format_pct(row.metrics.overall_acc),
            format_pct(row.metrics.event_acc),
            format_pct(row.metrics.useful_acc),
            format_pct(row.metrics.aid_acc),
            format_pct(row.metrics.invalid_fraction),
            format_pct(row.one_shot_invalid_fraction),
            row.excluded,
        );
    }

    let pairs = mismatch_pairs(inputs.per_run, inputs.primary_template, inputs.mismatch_template);
    if !pairs.is_empty() {
        let _ = writeln!(
            out,
            "\n## Template mismatch ({} vs {})\n",
            inputs.primary_template, inputs.mismatch_template
        );
        let _ = writeln!(
            out,
            "| checkpoint | same template | different template | decrease ratio |"
        );
        let _ = writeln!(out, "|---|---|---|---|");
        for (name, same, diff) in &pairs {
            let ratio = decrease_ratio(*same, *diff)
                .map(format_pct)
                .unwrap_or_else(|_| "n/a".to_owned());
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} |",
                name,
                format_pct(*same),
                format_pct(*diff),
                ratio,
            );
        }
    }

    if !inputs.sweep.is_empty() {
        let _ = writeln!(out, "\n## Ensemble sweep\n");
        for (vote, n, acc) in sweep_argmax(inputs.sweep) {
            let _ = writeln!(
                out,
                "- best {} vote: n = {} at overall {}",
                vote,
                n,
                format_pct(acc)
            );
        }
        let _ = writeln!(out, "\nFull curve in `sweep.csv`.");
    }
    out
}

/// (name, same-template overall, mismatch-template overall) for every
/// checkpoint that ran under both templates.
pub fn mismatch_pairs(
    rows: &[RunRow],
    primary: TemplateId,
    mismatch: TemplateId,
) -> Vec<(String, f64, f64)> {
    let mut pairs = Vec::new();
    for row in rows.iter().filter(|r| r.template == primary) {
        if let Some(other) = rows
            .iter()
            .find(|r| r.name == row.name && r.template == mismatch)
        {
            pairs.push((
                row.name.clone(),
                row.metrics.overall_acc,
                other.metrics.overall_acc,
            ));
        }
    }
    pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    pairs
}

pub fn render_metrics_csv(rows: &[RunRow]) -> String {
    let mut out = String::from(
        "checkpoint,template,overall_acc,event_acc,useful_acc,aid_acc,invalid_fraction,one_shot_invalid_fraction,excluded,n_samples\n",
    );
    for row in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            row.name,
            row.template,
            row.metrics.overall_acc,
            row.metrics.event_acc,
            row.metrics.useful_acc,
            row.metrics.aid_acc,
            row.metrics.invalid_fraction,
            row.one_shot_invalid_fraction,
            row.excluded,
            row.metrics.n_samples,
        );
    }
    out
}
