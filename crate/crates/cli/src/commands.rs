//! The build / infer / ensemble / report pipeline commands, plus the
//! scripted mock endpoint host.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use crisisml_core::dataset::{build_instances, export_instances, split_dataset};
use crisisml_core::ensemble::{sweep_argmax, sweep_n, write_sweep_csv};
use crisisml_core::eval::{format_pct, leaderboard, score_run};
use crisisml_core::infer::{load_runs_dir, run_experiment, run_file_name, CheckpointRun};
use crisisml_core::labels::{load_records, save_records, LabelTriple, TweetRecord};
use crisisml_core::manifest::{
    created_at_unix, file_digest, read_json, write_json, BuildManifest, ExperimentManifest,
    ARTIFACT_VERSION,
};
use crisisml_core::mock::{MockScript, MockServer};
use crisisml_core::templates::{template_digests, TemplateId};
use crisisml_core::{truth_map, Error};

use crate::report::{render_markdown, render_metrics_csv, ReportInputs, RunRow};

const INSTANCES_FILE: &str = "instances.jsonl";
const TRAIN_RECORDS_FILE: &str = "train_records.jsonl";
const INFERENCE_RECORDS_FILE: &str = "inference_records.jsonl";
const MANIFEST_FILE: &str = "manifest.json";

fn load_records_file(path: &Path) -> anyhow::Result<Vec<TweetRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let records = load_records(file).with_context(|| format!("loading {}", path.display()))?;
    Ok(records)
}

fn save_records_file(records: &[TweetRecord], path: &Path) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    save_records(records, &mut buf).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Stage 1: corpus in, instruction instances and manifest out. With a train
/// fraction the corpus is split first and instances come from the train
/// partition; otherwise the whole corpus is converted and also used for
/// inference.
pub fn cmd_build(
    corpus: &Path,
    out: &Path,
    seed: u64,
    train_fraction: Option<f64>,
) -> anyhow::Result<()> {
    let records = load_records_file(corpus)?;
    if records.is_empty() {
        anyhow::bail!(Error::InvalidConfig(format!(
            "{}: corpus has no records",
            corpus.display()
        )));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let (train, inference): (Vec<TweetRecord>, Vec<TweetRecord>) = match train_fraction {
        Some(fraction) => split_dataset(&records, fraction, seed)?,
        None => (records.clone(), records.clone()),
    };
    let instances = build_instances(&train);

    let instances_path = out.join(INSTANCES_FILE);
    let mut buf = Vec::new();
    let written = export_instances(&instances, &mut buf).map_err(|e| Error::io(&instances_path, e))?;
    fs::write(&instances_path, buf).map_err(|e| Error::io(&instances_path, e))?;

    if train_fraction.is_some() {
        save_records_file(&train, &out.join(TRAIN_RECORDS_FILE))?;
    }
    save_records_file(&inference, &out.join(INFERENCE_RECORDS_FILE))?;

    let manifest = BuildManifest {
        corpus_path: corpus.display().to_string(),
        corpus_digest: file_digest(corpus)?,
        record_count: records.len(),
        instance_count: written,
        seed: train_fraction.map(|_| seed),
        train_fraction,
        train_count: train_fraction.map(|_| train.len()),
        test_count: train_fraction.map(|_| inference.len()),
        template_digests: template_digests(),
        instances_path: INSTANCES_FILE.to_owned(),
        inference_records_path: INFERENCE_RECORDS_FILE.to_owned(),
        created_at_unix: created_at_unix(),
        artifact_version: ARTIFACT_VERSION.to_owned(),
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;

    println!(
        "built {} instances from {} records ({} used for training){}",
        written,
        records.len(),
        train.len(),
        match train_fraction {
            Some(f) => format!(", {} held out for inference (fraction {f}, seed {seed})", inference.len()),
            None => String::new(),
        }
    );
    println!("manifest: {}", out.join(MANIFEST_FILE).display());
    Ok(())
}

/// Stage 3: drive every endpoint over the inference records, persist runs
/// and per-run metrics, and print one summary line per endpoint.
pub fn cmd_infer(
    manifest_path: &Path,
    endpoints_path: &Path,
    template: TemplateId,
    runs_dir: &Path,
) -> anyhow::Result<()> {
    let build: BuildManifest = read_json(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let records_path = base.join(&build.inference_records_path);
    let records = load_records_file(&records_path)?;
    let endpoints = crate::config::EndpointsFile::load(endpoints_path)?;

    let runs = run_experiment(&endpoints, &records, template, runs_dir)?;

    let manifest = ExperimentManifest {
        endpoints: endpoints.clone(),
        template,
        template_digest: template.digest(),
        records_path: records_path.display().to_string(),
        records_digest: file_digest(&records_path)?,
        created_at_unix: created_at_unix(),
        artifact_version: ARTIFACT_VERSION.to_owned(),
    };
    write_json(&runs_dir.join(MANIFEST_FILE), &manifest)?;

    let truths = truth_map(&records);
    for run in &runs {
        let metrics = score_run(run, &truths)?;
        let stem = run_file_name(&run.endpoint.name, run.template);
        let stem = stem.trim_end_matches(".jsonl");
        write_json(&runs_dir.join(format!("{stem}.metrics.json")), &metrics)?;
        if run.excluded_from_regeneration {
            log::warn!(
                "{}: {} of one-shot responses invalid; excluded from regeneration",
                run.endpoint.name,
                format_pct(run.one_shot_invalid_fraction)
            );
        }
        println!(
            "{} [{}]: overall {}, invalid {}, excluded={}",
            run.endpoint.name,
            run.template,
            format_pct(metrics.overall_acc),
            format_pct(metrics.invalid_fraction),
            run.excluded_from_regeneration
        );
    }
    Ok(())
}

/// Runs plus ground truth for a persisted experiment directory.
fn load_scored_dir(
    runs_dir: &Path,
) -> anyhow::Result<(Vec<CheckpointRun>, BTreeMap<String, LabelTriple>)> {
    let runs = load_runs_dir(runs_dir)?;
    if runs.is_empty() {
        return Ok((runs, BTreeMap::new()));
    }
    let manifest: ExperimentManifest = read_json(&runs_dir.join(MANIFEST_FILE))
        .context("runs directory has no readable manifest.json (run `infer` first)")?;
    let records = load_records_file(Path::new(&manifest.records_path))?;
    Ok((runs, truth_map(&records)))
}

/// Sweep the majority-vote ensemble over n = 1..=n_max for both vote types.
pub fn cmd_ensemble(
    runs_dir: &Path,
    n_max: usize,
    out: &Path,
    template: TemplateId,
) -> anyhow::Result<()> {
    let (all_runs, truths) = load_scored_dir(runs_dir)?;
    let runs: Vec<CheckpointRun> = all_runs
        .into_iter()
        .filter(|r| r.template == template)
        .collect();
    if n_max > runs.len() {
        log::warn!(
            "n_max {} exceeds the {} available {} runs; sweep truncated",
            n_max,
            runs.len(),
            template
        );
    }
    let points = sweep_n(&runs, &truths, n_max)?;
    let mut buf = Vec::new();
    write_sweep_csv(&points, &mut buf).map_err(|e| Error::io(out, e))?;
    fs::write(out, buf).map_err(|e| Error::io(out, e))?;
    println!("wrote {} sweep points to {}", points.len(), out.display());
    for (vote, n, acc) in sweep_argmax(&points) {
        println!("best {vote} vote: n = {n} at overall {}", format_pct(acc));
    }
    Ok(())
}

/// Emit report.md plus metrics.csv and sweep.csv, derived purely from the
/// persisted runs.
pub fn cmd_report(runs_dir: &Path, out: &Path, template: TemplateId) -> anyhow::Result<()> {
    let (runs, truths) = load_scored_dir(runs_dir)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut rows = Vec::with_capacity(runs.len());
    for run in &runs {
        rows.push(RunRow {
            name: run.endpoint.name.clone(),
            template: run.template,
            metrics: score_run(run, &truths)?,
            one_shot_invalid_fraction: run.one_shot_invalid_fraction,
            excluded: run.excluded_from_regeneration,
        });
    }
    rows.sort_by(|a, b| {
        b.metrics
            .overall_acc
            .total_cmp(&a.metrics.overall_acc)
            .then_with(|| a.name.cmp(&b.name))
            .then_with(|| a.template.cmp(&b.template))
    });

    let primary: Vec<CheckpointRun> = runs
        .iter()
        .filter(|r| r.template == template)
        .cloned()
        .collect();
    let top10 = leaderboard(&primary, &truths, 10)?;
    let sweep = sweep_n(&primary, &truths, 15)?;

    let inputs = ReportInputs {
        runs: &runs,
        primary_template: template,
        mismatch_template: TemplateId::T5MultiInst,
        leaderboard: &top10,
        sweep: &sweep,
        per_run: &rows,
    };
    let md_path = out.join("report.md");
    fs::write(&md_path, render_markdown(&inputs)).map_err(|e| Error::io(&md_path, e))?;

    let csv_path = out.join("metrics.csv");
    fs::write(&csv_path, render_metrics_csv(&rows)).map_err(|e| Error::io(&csv_path, e))?;

    let sweep_path = out.join("sweep.csv");
    let mut buf = Vec::new();
    write_sweep_csv(&sweep, &mut buf).map_err(|e| Error::io(&sweep_path, e))?;
    fs::write(&sweep_path, buf).map_err(|e| Error::io(&sweep_path, e))?;

    println!(
        "report over {} runs written to {}",
        runs.len(),
        md_path.display()
    );
    Ok(())
}

/// Host the scripted mock endpoint, e.g. to try the pipeline without GPUs.
pub fn cmd_mock_serve(
    script_path: &Path,
    records_path: Option<&Path>,
    addr: &str,
) -> anyhow::Result<()> {
    let script = MockScript::from_file(script_path)?;
    let corpus: Vec<(String, String)> = match records_path {
        Some(path) => load_records_file(path)?
            .into_iter()
            .map(|r| (r.id, r.text))
            .collect(),
        None => Vec::new(),
    };
    let server = MockServer::bind(addr, script, &corpus)
        .map_err(|e| Error::io(PathBuf::from(addr), e))?;
    println!("mock endpoint listening on {}", server.base_url());
    println!("press Ctrl-C to stop");
    loop {
        std::thread::sleep(std::time::Duration::from_secs(3600));
    }
}
