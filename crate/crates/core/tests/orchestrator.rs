//! End-to-end orchestrator tests against the scripted in-process endpoint:
//! regeneration semantics, the exclusion rule, persistence, resume, and
//! scheduling-independence of the persisted bytes.

use std::collections::BTreeMap;

use crisisml_core::infer::{
    load_run, run_checkpoint, run_experiment, save_run, CompletionClient, EndpointConfig,
};
use crisisml_core::labels::{AidType, EventType, LabelTriple, TweetRecord};
use crisisml_core::mock::{MockScript, MockServer};
use crisisml_core::{render_prompt, render_target, TemplateId};

fn truth() -> LabelTriple {
    LabelTriple {
        event: EventType::from_canonical("FLOOD").unwrap(),
        useful: true,
        aid: AidType::from_canonical("RESPONSE EFFORTS").unwrap(),
    }
}

fn records(n: usize) -> Vec<TweetRecord> {
    (0..n)
        .map(|i| TweetRecord {
            id: i.to_string(),
            text: format!("tweet-{i:03} about flooding"),
            truth: truth(),
        })
        .collect()
}

fn corpus_pairs(records: &[TweetRecord]) -> Vec<(String, String)> {
    records
        .iter()
        .map(|r| (r.id.clone(), r.text.clone()))
        .collect()
}

fn valid_response() -> String {
    render_target(TemplateId::T4Multi, &truth())
}

fn endpoint(name: &str, url: &str, concurrency: usize) -> EndpointConfig {
    let mut cfg = EndpointConfig::new(name, url);
    cfg.max_concurrency = concurrency;
    cfg.transport_retries = 0;
    cfg
}

#[test]
fn regeneration_stops_at_first_valid_parse() {
    let record = &records(1)[0];
    for k in 0..=4usize {
        let mut script = MockScript::default();
        let mut responses = vec!["invalid".to_string(); k];
        responses.push(valid_response());
        script.samples.insert(record.id.clone(), responses);
        let server = MockServer::start(script, &corpus_pairs(std::slice::from_ref(record))).unwrap();
        let client = CompletionClient::new(endpoint("e", &server.base_url(), 1)).unwrap();
        let prompt = render_prompt(TemplateId::T4Multi, &record.text);
        let result = client.generate_with_regeneration(&record.id, &prompt);
        assert_eq!(result.attempts_used, k as u32 + 1, "k = {k}");
        assert!(result.final_parse.valid, "k = {k}");
        assert_eq!(server.request_count(), k + 1);
    }
}

#[test]
fn regeneration_gives_up_after_five_attempts() {
    let record = &records(1)[0];
    let mut script = MockScript::default();
    script
        .samples
        .insert(record.id.clone(), vec!["invalid".to_string(); 5]);
    let server = MockServer::start(script, &corpus_pairs(std::slice::from_ref(record))).unwrap();
    let client = CompletionClient::new(endpoint("e", &server.base_url(), 1)).unwrap();
    let prompt = render_prompt(TemplateId::T4Multi, &record.text);
    let result = client.generate_with_regeneration(&record.id, &prompt);
    assert_eq!(result.attempts_used, 5);
    assert!(!result.final_parse.valid);
    assert_eq!(server.request_count(), 5);
}

#[test]
fn majority_invalid_one_shot_excludes_the_run_without_phase_two() {
    let records = records(50);
    // 30 of 50 samples answer garbage forever: one-shot invalid 60%.
    let mut script = MockScript::default();
    for (i, r) in records.iter().enumerate() {
        let response = if i < 30 { "garbage".to_string() } else { valid_response() };
        script.samples.insert(r.id.clone(), vec![response]);
    }
    let server = MockServer::start(script, &corpus_pairs(&records)).unwrap();
    let run = run_checkpoint(
        &endpoint("e", &server.base_url(), 4),
        &records,
        TemplateId::T4Multi,
    )
    .unwrap();
    assert!(run.excluded_from_regeneration);
    assert!((run.one_shot_invalid_fraction - 0.6).abs() < 1e-12);
    assert!(run.samples.iter().all(|s| s.attempts_used == 1));
    assert_eq!(server.request_count(), 50, "no second-phase requests");
}

#[test]
fn fully_valid_one_shot_skips_regeneration() {
    let records = records(10);
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let script = MockScript::uniform(&ids, &valid_response());
    let server = MockServer::start(script, &corpus_pairs(&records)).unwrap();
    let run = run_checkpoint(
        &endpoint("e", &server.base_url(), 2),
        &records,
        TemplateId::T4Multi,
    )
    .unwrap();
    assert!(!run.excluded_from_regeneration);
    assert_eq!(run.one_shot_invalid_fraction, 0.0);
    assert!(run.samples.iter().all(|s| s.attempts_used == 1));
    assert_eq!(server.request_count(), 10);
}

#[test]
fn minority_invalid_samples_recover_on_attempt_two() {
    let records = records(10);
    let mut script = MockScript::default();
    for (i, r) in records.iter().enumerate() {
        let responses = if i < 2 {
            vec!["garbage".to_string(), valid_response()]
        } else {
            vec![valid_response()]
        };
        script.samples.insert(r.id.clone(), responses);
    }
    let server = MockServer::start(script, &corpus_pairs(&records)).unwrap();
    let run = run_checkpoint(
        &endpoint("e", &server.base_url(), 3),
        &records,
        TemplateId::T4Multi,
    )
    .unwrap();
    assert!(!run.excluded_from_regeneration);
    assert!((run.one_shot_invalid_fraction - 0.2).abs() < 1e-12);
    for (i, sample) in run.samples.iter().enumerate() {
        let expected = if i < 2 { 2 } else { 1 };
        assert_eq!(sample.attempts_used, expected, "sample {i}");
        assert!(sample.final_parse.valid);
    }
    // 10 one-shot requests plus 2 regenerations.
    assert_eq!(server.request_count(), 12);
}

#[test]
fn unreachable_endpoint_degrades_to_an_excluded_run() {
    let records = records(4);
    // Nothing listens on port 9; connects fail fast.
    let run = run_checkpoint(
        &endpoint("dead", "http://127.0.0.1:9", 2),
        &records,
        TemplateId::T4Multi,
    )
    .unwrap();
    assert!(run.excluded_from_regeneration);
    assert_eq!(run.one_shot_invalid_fraction, 1.0);
    assert!(run
        .samples
        .iter()
        .all(|s| s.attempts.len() == 1 && s.attempts[0].is_empty()));
}

#[test]
fn persisted_runs_are_identical_across_concurrency_levels() {
    let records = records(20);
    let mut script = MockScript::default();
    for (i, r) in records.iter().enumerate() {
        let responses = if i % 5 == 0 {
            vec!["garbage".to_string(), "garbage".to_string(), valid_response()]
        } else {
            vec![valid_response()]
        };
        script.samples.insert(r.id.clone(), responses);
    }
    let server = MockServer::start(script, &corpus_pairs(&records)).unwrap();

    let mut bytes = Vec::new();
    for concurrency in [1usize, 8] {
        server.reset_counters();
        let dir = tempfile::tempdir().unwrap();
        let run = run_checkpoint(
            &endpoint("ckpt", &server.base_url(), concurrency),
            &records,
            TemplateId::T4Multi,
        )
        .unwrap();
        let path = save_run(&run, dir.path()).unwrap();
        bytes.push(std::fs::read(path).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn save_then_load_round_trips_the_run() {
    let records = records(6);
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let mut script = MockScript::uniform(&ids, &valid_response());
    script
        .samples
        .insert("0".into(), vec!["garbage".into(), valid_response()]);
    let server = MockServer::start(script, &corpus_pairs(&records)).unwrap();
    let run = run_checkpoint(
        &endpoint("ckpt", &server.base_url(), 1),
        &records,
        TemplateId::T4Multi,
    )
    .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = save_run(&run, dir.path()).unwrap();
    let loaded = load_run(&path).unwrap();
    assert_eq!(loaded.endpoint, run.endpoint);
    assert_eq!(loaded.template, run.template);
    assert_eq!(loaded.excluded_from_regeneration, run.excluded_from_regeneration);
    assert_eq!(loaded.one_shot_invalid_fraction, run.one_shot_invalid_fraction);
    assert_eq!(loaded.samples.len(), run.samples.len());
    for (a, b) in loaded.samples.iter().zip(run.samples.iter()) {
        assert_eq!(a, b);
    }
}

#[test]
fn experiments_run_every_endpoint_and_resume_from_disk() {
    let records = records(5);
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let script = MockScript::uniform(&ids, &valid_response());
    let server = MockServer::start(script, &corpus_pairs(&records)).unwrap();
    let endpoints = vec![
        endpoint("alpha", &server.base_url(), 1),
        endpoint("beta", &server.base_url(), 1),
    ];

    let dir = tempfile::tempdir().unwrap();
    let runs = run_experiment(&endpoints, &records, TemplateId::T4Multi, dir.path()).unwrap();
    assert_eq!(runs.len(), 2);
    assert_eq!(server.request_count(), 10);

    // A second invocation resumes from the persisted runs: no new requests.
    let resumed = run_experiment(&endpoints, &records, TemplateId::T4Multi, dir.path()).unwrap();
    assert_eq!(resumed.len(), 2);
    assert_eq!(server.request_count(), 10);

    let duplicate = vec![
        endpoint("alpha", &server.base_url(), 1),
        endpoint("alpha", &server.base_url(), 1),
    ];
    assert!(run_experiment(&duplicate, &records, TemplateId::T4Multi, dir.path()).is_err());
}

#[test]
fn auth_token_env_is_forwarded_as_bearer_header() {
    let record = &records(1)[0];
    let ids = vec![record.id.clone()];
    let script = MockScript::uniform(&ids, &valid_response());
    let server = MockServer::start(script, &corpus_pairs(std::slice::from_ref(record))).unwrap();
    std::env::set_var(crisisml_core::infer::AUTH_TOKEN_ENV, "sesame");
    let client = CompletionClient::new(endpoint("e", &server.base_url(), 1)).unwrap();
    std::env::remove_var(crisisml_core::infer::AUTH_TOKEN_ENV);
    let prompt = render_prompt(TemplateId::T4Multi, &record.text);
    client.generate_once(&prompt);
    assert_eq!(server.last_authorization().as_deref(), Some("Bearer sesame"));
}

#[test]
fn mock_serves_exact_scripted_strings() {
    let record = &records(1)[0];
    let scripted = r#"{"event type": "HURRICANE", "useful": True, "humanitarian aid type": "DONATION AND OLUNTEERING"}"#;
    let mut script = MockScript::default();
    script.samples.insert(record.id.clone(), vec![scripted.into()]);
    let server = MockServer::start(script, &corpus_pairs(std::slice::from_ref(record))).unwrap();
    let client = CompletionClient::new(endpoint("e", &server.base_url(), 1)).unwrap();
    let prompt = render_prompt(TemplateId::T4Multi, &record.text);
    assert_eq!(client.generate_once(&prompt), scripted);
}

#[test]
fn template_mismatch_branch_degrades_validity() {
    let records = records(6);
    let mut script = MockScript::default();
    for r in &records {
        script.samples.insert(r.id.clone(), vec![valid_response()]);
        script.inst_samples.insert(
            r.id.clone(),
            vec!["[INST]\nUseful\": False\nuseful\": False.".to_string(); 1],
        );
    }
    let server = MockServer::start(script, &corpus_pairs(&records)).unwrap();

    let matched = run_checkpoint(
        &endpoint("ckpt", &server.base_url(), 1),
        &records,
        TemplateId::T4Multi,
    )
    .unwrap();
    let mismatched = run_checkpoint(
        &endpoint("ckpt", &server.base_url(), 1),
        &records,
        TemplateId::T5MultiInst,
    )
    .unwrap();
    assert_eq!(matched.one_shot_invalid_fraction, 0.0);
    assert_eq!(mismatched.one_shot_invalid_fraction, 1.0);
    assert!(mismatched.excluded_from_regeneration);

    let truths: BTreeMap<String, LabelTriple> =
        records.iter().map(|r| (r.id.clone(), r.truth)).collect();
    let same = crisisml_core::eval::score_run(&matched, &truths).unwrap();
    let diff = crisisml_core::eval::score_run(&mismatched, &truths).unwrap();
    assert!(same.overall_acc > diff.overall_acc);
}
