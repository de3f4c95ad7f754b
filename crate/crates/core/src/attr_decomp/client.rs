use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{build_prompt, mock_decompose, parse_response, serialize_result, validate};
use super::{DecompositionResult, PromptError, ValidationReport, Verdict};

#[derive(Debug, Clone, Error, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransportError {
    #[error("request failed: {0}")]
    Request(String),
    #[error("HTTP status {0}")]
    Status(u16),
    #[error("response has no first-choice message content")]
    MissingContent,
}

/// A chat-completion backend. `prompt` is sent as a single user message.
pub trait ChatClient {
    fn complete(&self, prompt: &str, seed: u64) -> Result<String, TransportError>;
}

impl<C: ChatClient + ?Sized> ChatClient for &C {
    fn complete(&self, prompt: &str, seed: u64) -> Result<String, TransportError> {
        (**self).complete(prompt, seed)
    }
}

/// Offline client answering with [`mock_decompose`] of the caption embedded
/// in the prompt.
#[derive(Debug, Default, Clone, Copy)]
pub struct MockClient;

impl MockClient {
    fn caption_of(prompt: &str) -> Option<String> {
        let marker = "Input Caption:\n\"";
        let start = prompt.rfind(marker)? + marker.len();
        let end = prompt[start..].rfind("\"\n\nOutput:")? + start;
        let mut out = String::with_capacity(end - start);
        let mut chars = prompt[start..end].chars();
        while let Some(c) = chars.next() {
            match c {
                '\\' => out.extend(chars.next()),
                c => out.push(c),
            }
        }
        Some(out)
    }
}

impl ChatClient for MockClient {
    fn complete(&self, prompt: &str, seed: u64) -> Result<String, TransportError> {
        let caption = Self::caption_of(prompt)
            .ok_or_else(|| TransportError::Request("prompt has no caption slot".into()))?;
        Ok(serialize_result(&mock_decompose(&caption, seed)))
    }
}

/// Endpoint settings for a chat-completions style service.
#[cfg(feature = "http")]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmEndpoint {
    pub url: String,
    pub model: String,
    #[serde(default)]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

#[cfg(feature = "http")]
fn default_timeout_secs() -> u64 {
    120
}

#[cfg(feature = "http")]
pub struct HttpChatClient {
    endpoint: LlmEndpoint,
    agent: ureq::Agent,
}

#[cfg(feature = "http")]
impl HttpChatClient {
    pub fn new(endpoint: LlmEndpoint) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(endpoint.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self { endpoint, agent }
    }

    /// Request body; temperature is pinned to 0.
    pub fn request_body(&self, prompt: &str) -> serde_json::Value {
        serde_json::json!({
            "model": self.endpoint.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt}],
        })
    }
}

#[cfg(feature = "http")]
impl ChatClient for HttpChatClient {
    fn complete(&self, prompt: &str, _seed: u64) -> Result<String, TransportError> {
        let mut req = self
            .agent
            .post(&self.endpoint.url)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.endpoint.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(self.request_body(prompt))
            .map_err(|e| TransportError::Request(e.to_string()))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(TransportError::Status(status));
        }
        let body: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| TransportError::Request(e.to_string()))?;
        body.pointer("/choices/0/message/content")
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or(TransportError::MissingContent)
    }
}

/// Exponential backoff between attempts: `base * factor^(attempt-1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Backoff {
    pub base: Duration,
    pub factor: f64,
}

impl Backoff {
    pub const NONE: Backoff = Backoff {
        base: Duration::ZERO,
        factor: 1.0,
    };

    pub fn delay(&self, attempt: u32) -> Duration {
        self.base.mul_f64(self.factor.powi(attempt.saturating_sub(1) as i32))
    }
}

impl Default for Backoff {
    fn default() -> Self {
        Backoff {
            base: Duration::from_millis(500),
            factor: 2.0,
        }
    }
}

/// One request/response exchange, persisted for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub attempt: u32,
    pub caption: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecomposeOutcome {
    pub result: DecompositionResult,
    pub report: ValidationReport,
    pub attempt_count: u32,
    pub transcript: Vec<TranscriptEntry>,
}

#[derive(Debug, Error)]
pub enum DecomposeError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("transport failed after {attempts} attempts: {last}")]
    Transport {
        attempts: u32,
        last: TransportError,
        transcript: Vec<TranscriptEntry>,
    },
    #[error("all {attempts} attempts were rejected")]
    AllRejected {
        attempts: u32,
        /// Report of the last parseable reply, if any.
        report: Option<ValidationReport>,
        transcript: Vec<TranscriptEntry>,
    },
}

impl DecomposeError {
    pub fn transcript(&self) -> &[TranscriptEntry] {
        match self {
            DecomposeError::Prompt(_) => &[],
            DecomposeError::Transport { transcript, .. } | DecomposeError::AllRejected { transcript, .. } => {
                transcript
            }
        }
    }
}

/// Decomposes `caption` with up to `retries` extra attempts.
///
/// Transport failures, unparseable replies and rejected validations all
/// trigger a retry after `backoff`. Attempt `k` uses seed `seed + k - 1`.
pub fn decompose<C: ChatClient + ?Sized>(
    client: &C,
    caption: &str,
    retries: u32,
    seed: u64,
    a_max: usize,
    backoff: Backoff,
) -> Result<DecomposeOutcome, DecomposeError> {
    let prompt = build_prompt(caption)?;
    let mut transcript = Vec::new();
    let mut last_transport = None;
    let mut last_report = None;
    let attempts = retries + 1;
    for attempt in 1..=attempts {
        if attempt > 1 {
            let d = backoff.delay(attempt - 1);
            if !d.is_zero() {
                std::thread::sleep(d);
            }
        }
        let mut entry = TranscriptEntry {
            attempt,
            caption: caption.to_string(),
            response: None,
            error: None,
            verdict: None,
        };
        match client.complete(&prompt, seed.wrapping_add(u64::from(attempt - 1))) {
            Err(e) => {
                entry.error = Some(e.to_string());
                last_transport = Some(e);
            }
            Ok(raw) => {
                entry.response = Some(raw.clone());
                last_transport = None;
                match parse_response(&raw) {
                    Err(e) => entry.error = Some(e.to_string()),
                    Ok(result) => {
                        let report = validate(caption, &result, a_max);
                        entry.verdict = Some(report.verdict);
                        if report.accepted() {
                            transcript.push(entry);
                            return Ok(DecomposeOutcome {
                                result,
                                report,
                                attempt_count: attempt,
                                transcript,
                            });
                        }
                        last_report = Some(report);
                    }
                }
            }
        }
        transcript.push(entry);
    }
    match last_transport {
        Some(last) => Err(DecomposeError::Transport {
            attempts,
            last,
            transcript,
        }),
        None => Err(DecomposeError::AllRejected {
            attempts,
            report: last_report,
            transcript,
        }),
    }
}

/// Runs [`decompose`] over `(id, caption)` pairs with at most `concurrency`
/// requests in flight. Results come back in input order.
pub fn decompose_many<C: ChatClient + Sync + ?Sized>(
    client: &C,
    captions: &[(String, String)],
    concurrency: usize,
    retries: u32,
    seed: u64,
    a_max: usize,
    backoff: Backoff,
) -> Vec<(String, Result<DecomposeOutcome, DecomposeError>)> {
    let n = captions.len();
    let slots: Vec<Mutex<Option<Result<DecomposeOutcome, DecomposeError>>>> =
        (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = concurrency.clamp(1, n.max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = decompose(client, &captions[i].1, retries, seed, a_max, backoff);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    captions
        .iter()
        .zip(slots)
        .map(|((id, _), slot)| {
            let r = slot.into_inner().expect("slot lock").expect("every slot filled");
            (id.clone(), r)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::DEFAULT_A_MAX;
    use super::*;

    struct Scripted {
        replies: Mutex<Vec<Result<String, TransportError>>>,
    }

    impl ChatClient for Scripted {
        fn complete(&self, _prompt: &str, _seed: u64) -> Result<String, TransportError> {
            self.replies.lock().unwrap().remove(0)
        }
    }

    #[test]
    fn mock_client_round_trip() {
        let caption = r#"a "red" car, near the gate"#;
        let out = decompose(&MockClient, caption, 0, 4, DEFAULT_A_MAX, Backoff::NONE).unwrap();
        assert_eq!(out.result, mock_decompose(caption, 4));
        assert_eq!(out.attempt_count, 1);
        assert!(out.report.accepted());
    }

    #[test]
    fn garbage_then_valid() {
        let client = Scripted {
            replies: Mutex::new(vec![
                Ok("garbage".into()),
                Err(TransportError::Status(503)),
                Ok(serialize_result(&mock_decompose("a ship", 0))),
            ]),
        };
        let out = decompose(&client, "a ship", 2, 0, DEFAULT_A_MAX, Backoff::NONE).unwrap();
        assert_eq!(out.attempt_count, 3);
        assert_eq!(out.transcript.len(), 3);
        assert!(out.transcript[1].error.as_deref().unwrap().contains("503"));
    }

    #[test]
    fn exhausting_retries() {
        let client = Scripted {
            replies: Mutex::new(vec![Ok("nope".into()), Ok("{}".into())]),
        };
        match decompose(&client, "a ship", 1, 0, DEFAULT_A_MAX, Backoff::NONE) {
            Err(DecomposeError::AllRejected { attempts, transcript, .. }) => {
                assert_eq!(attempts, 2);
                assert_eq!(transcript.len(), 2);
            }
            other => panic!("unexpected {other:?}"),
        }
        let client = Scripted {
            replies: Mutex::new(vec![Err(TransportError::Request("down".into()))]),
        };
        assert!(matches!(
            decompose(&client, "a ship", 0, 0, DEFAULT_A_MAX, Backoff::NONE),
            Err(DecomposeError::Transport { attempts: 1, .. })
        ));
    }

    #[test]
    fn backoff_grows() {
        let b = Backoff {
            base: Duration::from_millis(100),
            factor: 2.0,
        };
        assert_eq!(b.delay(1), Duration::from_millis(100));
        assert_eq!(b.delay(3), Duration::from_millis(400));
    }

    #[test]
    fn many_preserves_order() {
        let caps: Vec<(String, String)> = (0..20)
            .map(|i| (format!("id{i}"), format!("a small boat number{i}, near pier {i}")))
            .collect();
        let out = decompose_many(&MockClient, &caps, 4, 0, 1, DEFAULT_A_MAX, Backoff::NONE);
        for ((id, r), (eid, cap)) in out.iter().zip(&caps) {
            assert_eq!(id, eid);
            assert_eq!(r.as_ref().unwrap().result, mock_decompose(cap, 1));
        }
    }
}
