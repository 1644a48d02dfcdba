//! HTTP critique client.
//!
//! Sends a rendered (context, response, ground truth) triple to a
//! chat-completions endpoint and parses the structured hint the critic
//! returns. The result type is the same [`CritiqueResult`] the synthetic
//! oracle produces, so either source can feed pair generation.

use std::collections::HashMap;
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use rpo_core::env::{Critic, CritiqueResult, Segment, Task};
use rpo_core::experiment::CritiqueEndpoint;
use rpo_core::policy::{HintId, Vocab};
use rpo_core::RpoError;
use serde::{Deserialize, Serialize};
use serde_json::json;

/// First retry waits this long; each later retry doubles it.
pub const BACKOFF_BASE_MS: u64 = 500;
pub const BACKOFF_FACTOR: u64 = 2;

const EXCERPT_CHARS: usize = 120;

pub const SYSTEM_PROMPT: &str = "You are a factuality critic. You receive a context id, a generated \
response and the ground-truth response, each as a list of integer token ids. Compare them slot by \
slot. Reply with exactly one JSON object and nothing else, of the form \
{\"segments\":[{\"position\":<int>,\"severity\":<float in [0,1]>,\"correct_token\":<int>}],\
\"hint_position\":<int>,\"hint_token\":<int>}. List every mismatched slot in `segments`. The hint \
must correct the most severe mismatch. If the response matches the ground truth, reply \
{\"segments\":[]}.";

#[derive(Debug, thiserror::Error)]
pub enum CritiqueError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("transport error talking to {url}: {message}")]
    Transport { url: String, message: String },
    #[error("critique service at {url} returned HTTP {status}: {body}")]
    Service { url: String, status: u16, body: String },
    #[error("could not parse critique response ({message}) near: {excerpt}")]
    Parse { message: String, excerpt: String },
    #[error("critique response out of range: {0}")]
    Validation(String),
}

impl From<CritiqueError> for RpoError {
    fn from(e: CritiqueError) -> Self {
        RpoError::Critique(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CritiqueError>;

/// Assistant content plus how many retries it took to get it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawCritique {
    pub content: String,
    pub retries: u32,
}

fn excerpt(s: &str) -> String {
    let mut out: String = s.chars().take(EXCERPT_CHARS).collect();
    if s.chars().count() > EXCERPT_CHARS {
        out.push('…');
    }
    out
}

fn endpoint_url(ep: &CritiqueEndpoint) -> String {
    format!("{}/chat/completions", ep.base_url.trim_end_matches('/'))
}

fn check_endpoint(ep: &CritiqueEndpoint) -> Result<()> {
    ep.validate().map_err(|e| CritiqueError::Config(e.to_string()))
}

fn api_key(ep: &CritiqueEndpoint) -> Result<String> {
    match std::env::var(&ep.api_key_env) {
        Ok(k) if !k.is_empty() => Ok(k),
        _ => Err(CritiqueError::Config(format!(
            "environment variable {} holding the critique API key is not set",
            ep.api_key_env
        ))),
    }
}

fn build_client(ep: &CritiqueEndpoint) -> Result<reqwest::blocking::Client> {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_millis(ep.timeout_ms))
        .build()
        .map_err(|e| CritiqueError::Config(format!("building HTTP client: {e}")))
}

pub fn user_message(rendered_ctx: &str, rendered_resp: &str, rendered_gt: &str) -> String {
    format!("Context: {rendered_ctx}\nResponse: {rendered_resp}\nGround truth: {rendered_gt}")
}

pub fn request_body(ep: &CritiqueEndpoint, rendered_ctx: &str, rendered_resp: &str, rendered_gt: &str) -> serde_json::Value {
    json!({
        "model": ep.model_name,
        "messages": [
            {"role": "system", "content": SYSTEM_PROMPT},
            {"role": "user", "content": user_message(rendered_ctx, rendered_resp, rendered_gt)},
        ],
        "temperature": 0,
    })
}

fn extract_content(url: &str, body: &str) -> Result<String> {
    let v: serde_json::Value = serde_json::from_str(body).map_err(|e| CritiqueError::Parse {
        message: format!("response from {url} is not JSON: {e}"),
        excerpt: excerpt(body),
    })?;
    v.pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_owned)
        .ok_or_else(|| CritiqueError::Parse {
            message: "missing choices[0].message.content".into(),
            excerpt: excerpt(body),
        })
}

fn send_with_retries(
    client: &reqwest::blocking::Client,
    ep: &CritiqueEndpoint,
    key: &str,
    body: &serde_json::Value,
) -> Result<RawCritique> {
    let url = endpoint_url(ep);
    let mut retries = 0u32;
    let mut delay = BACKOFF_BASE_MS;
    loop {
        let resp = client
            .post(&url)
            .bearer_auth(key)
            .json(body)
            .send()
            .map_err(|e| CritiqueError::Transport {
                url: url.clone(),
                message: e.to_string(),
            })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| CritiqueError::Transport {
            url: url.clone(),
            message: e.to_string(),
        })?;
        if status.is_success() {
            return Ok(RawCritique {
                content: extract_content(&url, &text)?,
                retries,
            });
        }
        let retryable = status.as_u16() == 429 || status.is_server_error();
        if !retryable || retries >= ep.max_retries {
            return Err(CritiqueError::Service {
                url,
                status: status.as_u16(),
                body: excerpt(&text),
            });
        }
        thread::sleep(Duration::from_millis(delay));
        delay = delay.saturating_mul(BACKOFF_FACTOR);
        retries += 1;
    }
}

/// One blocking round trip, with backoff on 429/5xx.
pub fn request_critique(
    ep: &CritiqueEndpoint,
    rendered_ctx: &str,
    rendered_resp: &str,
    rendered_gt: &str,
) -> Result<RawCritique> {
    check_endpoint(ep)?;
    let key = api_key(ep)?;
    let client = build_client(ep)?;
    let body = request_body(ep, rendered_ctx, rendered_resp, rendered_gt);
    send_with_retries(&client, ep, &key, &body)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireSegment {
    position: i64,
    severity: f64,
    correct_token: i64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireCritique {
    segments: Vec<WireSegment>,
    #[serde(default)]
    hint_position: Option<i64>,
    #[serde(default)]
    hint_token: Option<i64>,
}

/// Byte range of the first balanced `{...}` in `text`, honouring string
/// literals and escapes.
fn first_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, c) in text[start..].char_indices() {
        if in_str {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_str = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

fn check_index(what: &str, v: i64, bound: usize) -> Result<usize> {
    if v < 0 || v as u64 >= bound as u64 {
        return Err(CritiqueError::Validation(format!("{what} {v} outside [0, {bound})")));
    }
    Ok(v as usize)
}

/// Parses a critic reply into a [`CritiqueResult`] for responses over `vocab`.
///
/// Segments are returned sorted by position. When the reply omits the hint,
/// the most severe segment's `correct_token` is used (lowest position on ties).
pub fn parse_critique_response(text: &str, vocab: &Vocab) -> Result<CritiqueResult> {
    let obj = first_object(text).ok_or_else(|| CritiqueError::Parse {
        message: "no JSON object found".into(),
        excerpt: excerpt(text),
    })?;
    let wire: WireCritique = serde_json::from_str(obj).map_err(|e| CritiqueError::Parse {
        message: e.to_string(),
        excerpt: excerpt(obj),
    })?;

    let mut segments = Vec::with_capacity(wire.segments.len());
    let mut corrections = Vec::with_capacity(wire.segments.len());
    for s in &wire.segments {
        let position = check_index("segment position", s.position, vocab.max_len)?;
        let token = check_index("correct_token", s.correct_token, vocab.size)?;
        if !s.severity.is_finite() || !(0.0..=1.0).contains(&s.severity) {
            return Err(CritiqueError::Validation(format!(
                "severity {} at position {position} must lie in [0, 1]",
                s.severity
            )));
        }
        if segments.iter().any(|x: &Segment| x.position == position) {
            return Err(CritiqueError::Validation(format!("duplicate segment at position {position}")));
        }
        segments.push(Segment {
            position,
            severity: s.severity,
        });
        corrections.push((position, token));
    }
    let mut order: Vec<usize> = (0..segments.len()).collect();
    order.sort_by_key(|&i| segments[i].position);
    let segments: Vec<Segment> = order.iter().map(|&i| segments[i]).collect();
    let corrections: Vec<(usize, usize)> = order.iter().map(|&i| corrections[i]).collect();

    let hint = match (wire.hint_position, wire.hint_token) {
        (Some(p), Some(t)) => {
            let position = check_index("hint_position", p, vocab.max_len)?;
            let target_token = check_index("hint_token", t, vocab.size)?;
            if !segments.iter().any(|s| s.position == position) {
                return Err(CritiqueError::Validation(format!(
                    "hint_position {position} does not name a listed segment"
                )));
            }
            Some(HintId { position, target_token })
        }
        (None, None) => {
            let mut best: Option<usize> = None;
            for (i, s) in segments.iter().enumerate() {
                if best.is_none_or(|b| s.severity > segments[b].severity) {
                    best = Some(i);
                }
            }
            best.map(|i| HintId {
                position: corrections[i].0,
                target_token: corrections[i].1,
            })
        }
        _ => {
            return Err(CritiqueError::Parse {
                message: "hint_position and hint_token must appear together".into(),
                excerpt: excerpt(obj),
            })
        }
    };

    Ok(CritiqueResult {
        hint,
        w_hal: CritiqueResult::severity_weight(&segments),
        segments,
    })
}

pub fn render_context(context_id: usize) -> String {
    format!("context {context_id}")
}

pub fn render_tokens(y: &[usize]) -> String {
    serde_json::to_string(y).expect("token list serialises")
}

/// One item of a concurrent batch; `id` is echoed back with the result.
#[derive(Clone, Debug)]
pub struct CritiqueRequest {
    pub id: u64,
    pub context_id: usize,
    pub response: Vec<usize>,
}

/// [`Critic`] backed by a chat-completions endpoint.
#[derive(Debug)]
pub struct HttpCritic {
    endpoint: CritiqueEndpoint,
    key: String,
    client: reqwest::blocking::Client,
}

impl HttpCritic {
    /// Resolves the API key once; a missing key is a configuration error.
    pub fn new(endpoint: CritiqueEndpoint) -> Result<Self> {
        check_endpoint(&endpoint)?;
        let key = api_key(&endpoint)?;
        let client = build_client(&endpoint)?;
        Ok(HttpCritic { endpoint, key, client })
    }

    pub fn endpoint(&self) -> &CritiqueEndpoint {
        &self.endpoint
    }

    /// Round trip plus parse; also returns the retry count.
    pub fn critique_raw(&self, task: &Task, context_id: usize, y: &[usize]) -> Result<(CritiqueResult, u32)> {
        task.check(context_id, y)
            .map_err(|e| CritiqueError::Validation(e.to_string()))?;
        let body = request_body(
            &self.endpoint,
            &render_context(context_id),
            &render_tokens(y),
            &render_tokens(&task.gt[context_id]),
        );
        let raw = send_with_retries(&self.client, &self.endpoint, &self.key, &body)?;
        let parsed = parse_critique_response(&raw.content, &task.vocab)?;
        Ok((parsed, raw.retries))
    }

    /// Issues every request with at most `max_in_flight` outstanding; results
    /// are keyed by request id, independent of completion order.
    pub fn critique_batch(&self, task: &Task, requests: &[CritiqueRequest]) -> HashMap<u64, Result<CritiqueResult>> {
        let queue = Mutex::new(requests.iter());
        let results = Mutex::new(HashMap::with_capacity(requests.len()));
        let workers = self.endpoint.max_in_flight.min(requests.len()).max(1);
        thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let next = queue.lock().expect("queue lock").next();
                    let Some(req) = next else { break };
                    let out = self
                        .critique_raw(task, req.context_id, &req.response)
                        .map(|(r, _)| r);
                    results.lock().expect("results lock").insert(req.id, out);
                });
            }
        });
        results.into_inner().expect("results lock")
    }
}

impl Critic for HttpCritic {
    fn critique(&self, task: &Task, context_id: usize, y: &[usize]) -> rpo_core::Result<CritiqueResult> {
        Ok(self.critique_raw(task, context_id, y)?.0)
    }
}
