//! Drives generation against checkpoint completion endpoints: the per-sample
//! regeneration loop, per-checkpoint runs with the >50% one-shot exclusion
//! rule, and resumable multi-endpoint experiments.
//!
//! Wire protocol: `POST {base_url}/v1/completions` with a JSON body
//! `{model, prompt, temperature, max_tokens}`; the endpoint answers
//! `{"choices": [{"text": ...}]}`. Transport failures are retried up to a
//! budget and then recorded as an empty completion, so network flakiness
//! consumes attempts instead of wedging a run.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{PartialLabelTriple, TweetRecord};
use crate::lora::AdaptationTarget;
use crate::parser::{parse_response, ParsedResponse};
use crate::templates::{render_prompt, RenderedPrompt, TemplateId};

/// Maximum generation attempts per sample, the one-shot included.
pub const MAX_ATTEMPTS: u32 = 5;

/// Environment variable whose value is forwarded as a bearer token.
pub const AUTH_TOKEN_ENV: &str = "CRISISML_API_TOKEN";

/// One checkpoint endpoint and its sampling/transport settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    /// Checkpoint identity, e.g. fine-tune setting plus epoch.
    pub name: String,
    pub base_url: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: u32,
    #[serde(default = "default_request_timeout_ms")]
    pub request_timeout_ms: u64,
    #[serde(default = "default_max_concurrency")]
    pub max_concurrency: usize,
    /// Transport retries per attempt before falling back to an empty
    /// completion.
    #[serde(default = "default_transport_retries")]
    pub transport_retries: u32,
    /// Which layers the checkpoint's fine-tuning adapted (QKVO or
    /// ALL_LINEAR); pure metadata carried into manifests.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adaptation: Option<AdaptationTarget>,
}

fn default_temperature() -> f64 {
    0.7
}
fn default_max_new_tokens() -> u32 {
    256
}
fn default_request_timeout_ms() -> u64 {
    30_000
}
fn default_max_concurrency() -> usize {
    1
}
fn default_transport_retries() -> u32 {
    2
}

impl EndpointConfig {
    pub fn new(name: impl Into<String>, base_url: impl Into<String>) -> Self {
        EndpointConfig {
            name: name.into(),
            base_url: base_url.into(),
            temperature: default_temperature(),
            max_new_tokens: default_max_new_tokens(),
            request_timeout_ms: default_request_timeout_ms(),
            max_concurrency: default_max_concurrency(),
            transport_retries: default_transport_retries(),
            adaptation: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "._-@".contains(c))
        {
            return Err(Error::InvalidConfig(format!(
                "endpoint name {:?} must be non-empty and file-name safe",
                self.name
            )));
        }
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return Err(Error::InvalidConfig(format!(
                "base_url {:?} must start with http:// or https://",
                self.base_url
            )));
        }
        if self.max_concurrency == 0 {
            return Err(Error::InvalidConfig("max_concurrency must be >= 1".into()));
        }
        if self.temperature < 0.0 {
            return Err(Error::InvalidConfig("temperature must be >= 0".into()));
        }
        Ok(())
    }

    pub fn request_timeout(&self) -> Duration {
        Duration::from_millis(self.request_timeout_ms)
    }
}

/// One generation attempt for one sample.
#[derive(Debug, Clone)]
pub struct GenerationAttempt {
    pub sample_id: String,
    /// 1-based, never above [`MAX_ATTEMPTS`].
    pub attempt_index: u32,
    pub raw: String,
    pub parsed: ParsedResponse,
}

/// Final state of one sample after the (re)generation loop.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleResult {
    pub sample_id: String,
    /// Raw completion text of every attempt, in order.
    pub attempts: Vec<String>,
    /// Parse of the stopping attempt; fields are never merged across
    /// attempts.
    pub final_parse: ParsedResponse,
    pub attempts_used: u32,
}

/// All predictions and bookkeeping for one checkpoint endpoint.
#[derive(Debug, Clone)]
pub struct CheckpointRun {
    pub endpoint: EndpointConfig,
    pub template: TemplateId,
    /// Per-sample results in test-set order.
    pub samples: Vec<SampleResult>,
    /// Fraction of phase-1 parses with any absent field.
    pub one_shot_invalid_fraction: f64,
    /// True exactly when more than half of the one-shot responses were
    /// invalid; excluded runs keep their phase-1 parses untouched.
    pub excluded_from_regeneration: bool,
}

impl CheckpointRun {
    pub fn sample(&self, id: &str) -> Option<&SampleResult> {
        self.samples.iter().find(|s| s.sample_id == id)
    }
}

#[derive(Debug)]
struct TransportError(String);

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    text: String,
}

/// Blocking HTTP client for one endpoint.
pub struct CompletionClient {
    http: reqwest::blocking::Client,
    endpoint: EndpointConfig,
    url: String,
    auth_token: Option<String>,
}

impl CompletionClient {
    pub fn new(endpoint: EndpointConfig) -> Result<Self> {
        endpoint.validate()?;
        let http = reqwest::blocking::Client::builder()
            .timeout(endpoint.request_timeout())
            .connect_timeout(endpoint.request_timeout())
            .build()
            .map_err(|e| Error::InvalidConfig(format!("http client: {e}")))?;
        let url = format!("{}/v1/completions", endpoint.base_url.trim_end_matches('/'));
        Ok(CompletionClient {
            http,
            endpoint,
            url,
            auth_token: std::env::var(AUTH_TOKEN_ENV).ok(),
        })
    }

    pub fn endpoint(&self) -> &EndpointConfig {
        &self.endpoint
    }

    fn request_completion(&self, prompt: &str) -> std::result::Result<String, TransportError> {
        let body = CompletionRequest {
            model: &self.endpoint.name,
            prompt,
            temperature: self.endpoint.temperature,
            max_tokens: self.endpoint.max_new_tokens,
        };
        let mut request = self.http.post(&self.url).json(&body);
        if let Some(token) = &self.auth_token {
            request = request.bearer_auth(token);
        }
        let response = request.send().map_err(|e| TransportError(e.to_string()))?;
        if !response.status().is_success() {
            return Err(TransportError(format!("http status {}", response.status())));
        }
        let decoded: CompletionResponse = response
            .json()
            .map_err(|e| TransportError(format!("body: {e}")))?;
        decoded
            .choices
            .into_iter()
            .next()
            .map(|c| c.text)
            .ok_or_else(|| TransportError("empty choices".into()))
    }

    /// One generation. Transport failures are retried up to the configured
    /// budget, then the sample falls back to an empty completion (which
    /// parses to all-absent).
    pub fn generate_once(&self, prompt: &RenderedPrompt) -> String {
        let mut last_err = None;
        for _ in 0..=self.endpoint.transport_retries {
            match self.request_completion(&prompt.body) {
                Ok(text) => return text,
                Err(e) => last_err = Some(e),
            }
        }
        log::warn!(
            "endpoint {}: transport failed after {} retries ({}); recording empty response",
            self.endpoint.name,
            self.endpoint.transport_retries,
            last_err.map(|e| e.0).unwrap_or_default()
        );
        String::new()
    }

    /// Generate until the parse is valid or the attempt budget is exhausted,
    /// whichever comes first. Returns the stopping attempt's parse.
    pub fn generate_with_regeneration(
        &self,
        sample_id: &str,
        prompt: &RenderedPrompt,
    ) -> SampleResult {
        self.regenerate(sample_id, prompt, Vec::new())
    }

    /// Continue the regeneration loop for a sample with `prior` attempts
    /// already consumed (phase-1 generation counts as attempt 1).
    fn regenerate(
        &self,
        sample_id: &str,
        prompt: &RenderedPrompt,
        prior: Vec<GenerationAttempt>,
    ) -> SampleResult {
        let mut attempts = prior;
        loop {
            let last_valid = attempts.last().map(|a| a.parsed.valid).unwrap_or(false);
            if last_valid || attempts.len() as u32 >= MAX_ATTEMPTS {
                break;
            }
            let raw = self.generate_once(prompt);
            let parsed = parse_response(&raw);
            attempts.push(GenerationAttempt {
                sample_id: sample_id.to_owned(),
                attempt_index: attempts.len() as u32 + 1,
                raw,
                parsed,
            });
        }
        let final_parse = attempts
            .last()
            .map(|a| a.parsed.clone())
            .unwrap_or_else(|| parse_response(""));
        SampleResult {
            sample_id: sample_id.to_owned(),
            attempts_used: attempts.len() as u32,
            attempts: attempts.into_iter().map(|a| a.raw).collect(),
            final_parse,
        }
    }
}

/// Run `f` over `items` with at most `workers` threads, preserving input
/// order in the result.
fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = workers.max(1).min(items.len().max(1));
    let cursor = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = cursor.fetch_add(1, Ordering::SeqCst);
                if index >= items.len() {
                    break;
                }
                let result = f(&items[index]);
                *slots[index].lock().unwrap() = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("worker filled slot"))
        .collect()
}

/// Run one checkpoint over the test set.
///
/// Phase 1 issues exactly one generation per sample. If more than half of
/// those parses are invalid the run is marked excluded and kept as is;
/// otherwise only the invalid samples re-enter the regeneration loop, with
/// the phase-1 generation counting as attempt 1.
pub fn run_checkpoint(
    endpoint: &EndpointConfig,
    test_set: &[TweetRecord],
    template: TemplateId,
) -> Result<CheckpointRun> {
    if test_set.is_empty() {
        return Err(Error::InvalidConfig("test set must be non-empty".into()));
    }
    let client = CompletionClient::new(endpoint.clone())?;
    let prompts: Vec<(String, RenderedPrompt)> = test_set
        .iter()
        .map(|r| (r.id.clone(), render_prompt(template, &r.text)))
        .collect();

    let one_shot: Vec<GenerationAttempt> =
        parallel_map(&prompts, endpoint.max_concurrency, |(id, prompt)| {
            let raw = client.generate_once(prompt);
            let parsed = parse_response(&raw);
            GenerationAttempt {
                sample_id: id.clone(),
                attempt_index: 1,
                raw,
                parsed,
            }
        });

    let invalid_count = one_shot.iter().filter(|a| !a.parsed.valid).count();
    let one_shot_invalid_fraction = invalid_count as f64 / test_set.len() as f64;
    let excluded = 2 * invalid_count > test_set.len();

    let samples = if excluded {
        one_shot
            .into_iter()
            .map(|attempt| SampleResult {
                sample_id: attempt.sample_id.clone(),
                final_parse: attempt.parsed.clone(),
                attempts: vec![attempt.raw],
                attempts_used: 1,
            })
            .collect()
    } else {
        let jobs: Vec<(usize, GenerationAttempt)> = one_shot.into_iter().enumerate().collect();
        parallel_map(&jobs, endpoint.max_concurrency, |(index, attempt)| {
            if attempt.parsed.valid {
                SampleResult {
                    sample_id: attempt.sample_id.clone(),
                    final_parse: attempt.parsed.clone(),
                    attempts: vec![attempt.raw.clone()],
                    attempts_used: 1,
                }
            } else {
                client.regenerate(
                    &attempt.sample_id,
                    &prompts[*index].1,
                    vec![attempt.clone()],
                )
            }
        })
    };

    log::info!(
        "run {} ({}): {} samples, one-shot invalid {:.1}%{}",
        endpoint.name,
        template,
        samples.len(),
        one_shot_invalid_fraction * 100.0,
        if excluded { ", excluded" } else { "" }
    );

    Ok(CheckpointRun {
        endpoint: endpoint.clone(),
        template,
        samples,
        one_shot_invalid_fraction,
        excluded_from_regeneration: excluded,
    })
}

/// Run every endpoint, persisting each completed run under `runs_dir` so a
/// crashed experiment resumes from the runs already on disk.
pub fn run_experiment(
    endpoints: &[EndpointConfig],
    test_set: &[TweetRecord],
    template: TemplateId,
    runs_dir: &Path,
) -> Result<Vec<CheckpointRun>> {
    let mut names: Vec<&str> = endpoints.iter().map(|e| e.name.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    if names.len() != endpoints.len() {
        return Err(Error::InvalidConfig(
            "endpoint names must be unique within an experiment".into(),
        ));
    }
    fs::create_dir_all(runs_dir).map_err(|e| Error::io(runs_dir, e))?;

    let mut runs = Vec::with_capacity(endpoints.len());
    for endpoint in endpoints {
        let path = runs_dir.join(run_file_name(&endpoint.name, template));
        if path.exists() {
            log::info!("resuming: {} already present", path.display());
            runs.push(load_run(&path)?);
            continue;
        }
        let run = run_checkpoint(endpoint, test_set, template)?;
        save_run(&run, runs_dir)?;
        runs.push(run);
    }
    Ok(runs)
}

/// `<endpoint>.<template>.jsonl`, so same- and different-template runs of one
/// checkpoint can live in the same directory.
pub fn run_file_name(endpoint_name: &str, template: TemplateId) -> String {
    format!("{endpoint_name}.{}.jsonl", template.name())
}

fn meta_file_name(endpoint_name: &str, template: TemplateId) -> String {
    format!("{endpoint_name}.{}.meta.json", template.name())
}

/// Persisted per-sample line. The line format deliberately excludes endpoint
/// settings so files are byte-identical regardless of request scheduling.
#[derive(Debug, Serialize, Deserialize)]
struct SampleLine {
    sample_id: String,
    attempts: Vec<String>,
    #[serde(rename = "final")]
    final_labels: PartialLabelTriple,
    valid: bool,
    attempts_used: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct RunMeta {
    endpoint: EndpointConfig,
    template: TemplateId,
    template_digest: String,
}

/// Write `runs/<endpoint>.<template>.jsonl` plus its config sidecar. The
/// data file is written to a temporary name and renamed, so a crash never
/// leaves a half-written run to resume from.
pub fn save_run(run: &CheckpointRun, runs_dir: &Path) -> Result<PathBuf> {
    let path = runs_dir.join(run_file_name(&run.endpoint.name, run.template));
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        for sample in &run.samples {
            let line = SampleLine {
                sample_id: sample.sample_id.clone(),
                attempts: sample.attempts.clone(),
                final_labels: sample.final_parse.labels.clone(),
                valid: sample.final_parse.valid,
                attempts_used: sample.attempts_used,
            };
            writeln!(
                file,
                "{}",
                serde_json::to_string(&line).expect("sample line serializes")
            )
            .map_err(|e| Error::io(&tmp, e))?;
        }
    }
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;

    let meta = RunMeta {
        endpoint: run.endpoint.clone(),
        template: run.template,
        template_digest: run.template.digest(),
    };
    let meta_path = runs_dir.join(meta_file_name(&run.endpoint.name, run.template));
    fs::write(
        &meta_path,
        serde_json::to_string_pretty(&meta).expect("meta serializes"),
    )
    .map_err(|e| Error::io(&meta_path, e))?;
    Ok(path)
}

/// Load a persisted run from its `.jsonl` path, using the meta sidecar for
/// the endpoint config. One-shot statistics are recomputed from attempt 1 of
/// every sample.
pub fn load_run(path: &Path) -> Result<CheckpointRun> {
    let stem = path
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.strip_suffix(".jsonl"))
        .ok_or_else(|| Error::invalid_file(path, "expected a .jsonl run file"))?;
    let meta_path = path.with_file_name(format!("{stem}.meta.json"));
    let meta_raw = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: RunMeta = serde_json::from_str(&meta_raw)
        .map_err(|e| Error::invalid_file(&meta_path, e.to_string()))?;

    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (index, line) in raw.lines().enumerate() {
        let parsed: SampleLine = serde_json::from_str(line).map_err(|e| {
            Error::invalid_file(path, format!("line {}: {e}", index + 1))
        })?;
        if parsed.attempts.len() as u32 != parsed.attempts_used {
            return Err(Error::invalid_file(
                path,
                format!(
                    "line {}: attempts_used {} does not match {} recorded attempts",
                    index + 1,
                    parsed.attempts_used,
                    parsed.attempts.len()
                ),
            ));
        }
        samples.push(SampleResult {
            final_parse: ParsedResponse {
                raw: parsed.attempts.last().cloned().unwrap_or_default(),
                labels: parsed.final_labels,
                valid: parsed.valid,
            },
            sample_id: parsed.sample_id,
            attempts: parsed.attempts,
            attempts_used: parsed.attempts_used,
        });
    }
    if samples.is_empty() {
        return Err(Error::invalid_file(path, "run has no samples"));
    }
    let invalid_count = samples
        .iter()
        .filter(|s| !parse_response(&s.attempts[0]).valid)
        .count();
    let one_shot_invalid_fraction = invalid_count as f64 / samples.len() as f64;
    Ok(CheckpointRun {
        endpoint: meta.endpoint,
        template: meta.template,
        excluded_from_regeneration: 2 * invalid_count > samples.len(),
        one_shot_invalid_fraction,
        samples,
    })
}

/// Load every run (any template) persisted in a directory, sorted by file
/// name for determinism.
pub fn load_runs_dir(runs_dir: &Path) -> Result<Vec<CheckpointRun>> {
    let mut paths = Vec::new();
    let entries = fs::read_dir(runs_dir).map_err(|e| Error::io(runs_dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(runs_dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("jsonl") {
            paths.push(path);
        }
    }
    paths.sort();
    paths.iter().map(|p| load_run(p)).collect()
}
