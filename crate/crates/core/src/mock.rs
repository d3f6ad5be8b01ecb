//! In-process scripted completion endpoint for deterministic pipeline tests.
//!
//! The server speaks the same `POST .../v1/completions` protocol as
//! [`crate::infer::CompletionClient`]. A script maps sample ids to a list of
//! responses served in attempt order (the list's last entry repeats once
//! exhausted). Requests are matched to samples by locating the sample's tweet
//! text inside the prompt, so scheduling order never changes what a sample
//! receives. Prompts containing `[INST]` can be answered from a separate
//! script branch to imitate template-mismatch behavior.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scripted responses, loadable from JSON.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockScript {
    /// When set, responses are served purely by request ordinal and the
    /// sample matching below is skipped.
    #[serde(default)]
    pub ordinal: Option<Vec<String>>,
    /// Sample id to responses in attempt order.
    #[serde(default)]
    pub samples: BTreeMap<String, Vec<String>>,
    /// Fallback responses for unmatched samples.
    #[serde(default)]
    pub default: Vec<String>,
    /// Overrides used when the prompt contains `[INST]`.
    #[serde(default)]
    pub inst_samples: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub inst_default: Option<Vec<String>>,
}

impl MockScript {
    /// Script every sample with the same single response.
    pub fn uniform(corpus_ids: &[String], response: &str) -> Self {
        MockScript {
            samples: corpus_ids
                .iter()
                .map(|id| (id.clone(), vec![response.to_owned()]))
                .collect(),
            ..MockScript::default()
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&raw).map_err(|e| Error::invalid_file(path, e.to_string()))
    }
}

struct MockState {
    script: MockScript,
    /// (sample text, sample id), longest text first so substring matching is
    /// unambiguous when one tweet contains another.
    texts: Vec<(String, String)>,
    counters: Mutex<HashMap<(bool, String), usize>>,
    ordinal_cursor: AtomicUsize,
    requests: AtomicUsize,
    last_authorization: Mutex<Option<String>>,
}

impl MockState {
    fn response_for(&self, prompt: &str) -> String {
        if let Some(list) = &self.script.ordinal {
            let index = self.ordinal_cursor.fetch_add(1, Ordering::SeqCst);
            return list.get(index.min(list.len().saturating_sub(1))).cloned().unwrap_or_default();
        }
        let inst = prompt.contains("[INST]");
        let sample_id = self
            .texts
            .iter()
            .find(|(text, _)| prompt.contains(text))
            .map(|(_, id)| id.clone());

        let (branch, list): (String, &[String]) = match (&sample_id, inst) {
            (Some(id), true) if self.script.inst_samples.contains_key(id) => {
                (format!("inst:{id}"), &self.script.inst_samples[id])
            }
            (_, true) if self.script.inst_default.is_some() => (
                "inst:__default".into(),
                self.script.inst_default.as_deref().unwrap(),
            ),
            (Some(id), _) if self.script.samples.contains_key(id) => {
                (format!("plain:{id}"), &self.script.samples[id])
            }
            _ => ("plain:__default".into(), &self.script.default),
        };
        let mut counters = self.counters.lock().unwrap();
        let counter = counters.entry((inst, branch)).or_insert(0);
        let index = *counter;
        *counter += 1;
        list.get(index.min(list.len().saturating_sub(1)))
            .cloned()
            .unwrap_or_default()
    }
}

/// Handle to a running mock endpoint; shuts down on drop.
pub struct MockServer {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    state: Arc<MockState>,
    handle: Option<JoinHandle<()>>,
}

impl MockServer {
    /// Start on an ephemeral local port. `corpus` pairs sample ids with
    /// their tweet texts for prompt matching; ordinal-mode scripts may pass
    /// an empty corpus.
    pub fn start(script: MockScript, corpus: &[(String, String)]) -> std::io::Result<MockServer> {
        Self::bind(("127.0.0.1", 0), script, corpus)
    }

    /// Start on an explicit address, e.g. `127.0.0.1:8732`.
    pub fn bind(
        addr: impl std::net::ToSocketAddrs,
        script: MockScript,
        corpus: &[(String, String)],
    ) -> std::io::Result<MockServer> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let mut texts: Vec<(String, String)> = corpus
            .iter()
            .map(|(id, text)| (text.clone(), id.clone()))
            .collect();
        texts.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.1.cmp(&b.1)));
        let state = Arc::new(MockState {
            script,
            texts,
            counters: Mutex::new(HashMap::new()),
            ordinal_cursor: AtomicUsize::new(0),
            requests: AtomicUsize::new(0),
            last_authorization: Mutex::new(None),
        });
        let shutdown = Arc::new(AtomicBool::new(false));

        let accept_state = Arc::clone(&state);
        let accept_shutdown = Arc::clone(&shutdown);
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if accept_shutdown.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let state = Arc::clone(&accept_state);
                std::thread::spawn(move || handle_connection(stream, &state));
            }
        });

        Ok(MockServer {
            addr,
            shutdown,
            state,
            handle: Some(handle),
        })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Total completion requests served so far.
    pub fn request_count(&self) -> usize {
        self.state.requests.load(Ordering::SeqCst)
    }

    /// Rewind every attempt sequence to its start, as if the server had just
    /// been started. The request count is kept.
    pub fn reset_counters(&self) {
        self.state.counters.lock().unwrap().clear();
        self.state.ordinal_cursor.store(0, Ordering::SeqCst);
    }

    /// The `Authorization` header of the most recent request, if any.
    pub fn last_authorization(&self) -> Option<String> {
        self.state.last_authorization.lock().unwrap().clone()
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        // Nudge the accept loop awake.
        let _ = TcpStream::connect(self.addr);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn handle_connection(mut stream: TcpStream, state: &MockState) {
    let _ = stream.set_read_timeout(Some(Duration::from_secs(5)));
    let Some((headers, body)) = read_request(&mut stream) else {
        return;
    };
    *state.last_authorization.lock().unwrap() = headers
        .lines()
        .find_map(|line| {
            let (name, value) = line.split_once(':')?;
            name.eq_ignore_ascii_case("authorization")
                .then(|| value.trim().to_owned())
        });
    let prompt = serde_json::from_slice::<serde_json::Value>(&body)
        .ok()
        .and_then(|v| v.get("prompt").and_then(|p| p.as_str()).map(str::to_owned));
    let Some(prompt) = prompt else {
        let _ = write_response(&mut stream, 400, "{\"error\":\"missing prompt\"}");
        return;
    };
    state.requests.fetch_add(1, Ordering::SeqCst);
    let text = state.response_for(&prompt);
    let body = serde_json::json!({ "choices": [ { "text": text } ] }).to_string();
    let _ = write_response(&mut stream, 200, &body);
}

/// Read headers plus a `Content-Length` body. Returns `None` for connections
/// that close without sending a request (e.g. the shutdown nudge).
fn read_request(stream: &mut TcpStream) -> Option<(String, Vec<u8>)> {
    let mut buffer = Vec::new();
    let mut chunk = [0u8; 4096];
    let header_end = loop {
        if let Some(pos) = find_subsequence(&buffer, b"\r\n\r\n") {
            break pos + 4;
        }
        match stream.read(&mut chunk) {
            Ok(0) => return None,
            Ok(n) => buffer.extend_from_slice(&chunk[..n]),
            Err(_) => return None,
        }
    };
    let headers = String::from_utf8_lossy(&buffer[..header_end]).to_string();
    let content_length = headers
        .lines()
        .find_map(|line| {
            let (name, value) = line.split_once(':')?;
            name.eq_ignore_ascii_case("content-length")
                .then(|| value.trim().parse::<usize>().ok())?
        })
        .unwrap_or(0);
    let mut body = buffer[header_end..].to_vec();
    while body.len() < content_length {
        match stream.read(&mut chunk) {
            Ok(0) => break,
            Ok(n) => body.extend_from_slice(&chunk[..n]),
            Err(_) => return None,
        }
    }
    body.truncate(content_length);
    Some((headers, body))
}

fn find_subsequence(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack
        .windows(needle.len())
        .position(|window| window == needle)
}

fn write_response(stream: &mut TcpStream, status: u16, body: &str) -> std::io::Result<()> {
    let reason = if status == 200 { "OK" } else { "Bad Request" };
    write!(
        stream,
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )?;
    stream.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn post(url: &str, prompt: &str) -> String {
        let client = reqwest::blocking::Client::new();
        let response: serde_json::Value = client
            .post(format!("{url}/v1/completions"))
            .json(&serde_json::json!({
                "model": "m", "prompt": prompt, "temperature": 0.0, "max_tokens": 8
            }))
            .send()
            .unwrap()
            .json()
            .unwrap();
        response["choices"][0]["text"].as_str().unwrap().to_owned()
    }

    #[test]
    fn serves_scripted_responses_per_sample_in_attempt_order() {
        let mut script = MockScript::default();
        script
            .samples
            .insert("a".into(), vec!["first".into(), "second".into()]);
        let corpus = vec![("a".into(), "tweet alpha".into())];
        let server = MockServer::start(script, &corpus).unwrap();
        let url = server.base_url();
        assert_eq!(post(&url, "text: tweet alpha\n### Response:\n"), "first");
        assert_eq!(post(&url, "text: tweet alpha\n### Response:\n"), "second");
        // Exhausted lists repeat their last entry.
        assert_eq!(post(&url, "text: tweet alpha\n### Response:\n"), "second");
        assert_eq!(server.request_count(), 3);
    }

    #[test]
    fn inst_prompts_use_the_mismatch_branch() {
        let mut script = MockScript::default();
        script.samples.insert("a".into(), vec!["clean".into()]);
        script
            .inst_samples
            .insert("a".into(), vec!["garbled".into()]);
        let corpus = vec![("a".into(), "tweet alpha".into())];
        let server = MockServer::start(script, &corpus).unwrap();
        let url = server.base_url();
        assert_eq!(post(&url, "text: tweet alpha\n### Response:\n"), "clean");
        assert_eq!(post(&url, "[INST] Text: tweet alpha [/INST]"), "garbled");
    }

    #[test]
    fn ordinal_mode_ignores_sample_matching() {
        let script = MockScript {
            ordinal: Some(vec!["one".into(), "two".into()]),
            ..MockScript::default()
        };
        let server = MockServer::start(script, &[]).unwrap();
        let url = server.base_url();
        assert_eq!(post(&url, "anything"), "one");
        assert_eq!(post(&url, "anything"), "two");
        assert_eq!(post(&url, "anything"), "two");
    }

    #[test]
    fn unmatched_prompts_fall_back_to_default() {
        let script = MockScript {
            default: vec!["fallback".into()],
            ..MockScript::default()
        };
        let server = MockServer::start(script, &[]).unwrap();
        assert_eq!(post(&server.base_url(), "unknown"), "fallback");
    }
}
