//! Judge clients: a yes/no or 1..10 oracle queried with a fixed prompt.
//!
//! [`MockJudge`] is deterministic and offline. [`RemoteJudge`] speaks a
//! minimal chat-completion HTTP contract with the image inlined as base64.

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Duration;

use base64::Engine;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::image_bytes;

pub const IMAGE_JUDGE_PROMPT: &str = "Is this a non-pathological image? Answer yes or no.";
pub const TEXT_JUDGE_PROMPT: &str =
    "Does this description involve non-human organisms? Answer yes or no.";
pub const SCORE_PROMPT: &str =
    "Rate semantic similarity 1-10 between the response and the reference caption. \
Reply with a single integer.";

pub const ENDPOINT_ENV: &str = "PATHVLM_JUDGE_ENDPOINT";
pub const API_KEY_ENV: &str = "PATHVLM_JUDGE_API_KEY";

/// Organism cues the mock text judge treats as non-human.
pub const ORGANISM_KEYWORDS: &[&str] = &[
    "murine",
    "mouse",
    "mice",
    "rat",
    "rats",
    "rodent",
    "canine",
    "dog",
    "dogs",
    "feline",
    "cat",
    "cats",
    "porcine",
    "pig",
    "pigs",
    "swine",
    "bovine",
    "cow",
    "cattle",
    "equine",
    "horse",
    "ovine",
    "sheep",
    "zebrafish",
    "drosophila",
    "primate",
    "monkey",
    "macaque",
    "rabbit",
    "hamster",
    "avian",
    "chicken",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeTask {
    NonPathImage,
    NonHumanText,
    AlignmentScore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JudgeRequest {
    pub task: JudgeTask,
    pub record_id: String,
    pub prompt: String,
    pub text: Option<String>,
    pub reference: Option<String>,
    pub image_ref: Option<String>,
}

/// Returns the judge's raw reply. Implementations must tolerate
/// concurrent calls.
pub trait JudgeClient: Send + Sync {
    fn complete(&self, req: &JudgeRequest) -> Result<String>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Yes,
    No,
}

/// Leading `yes` / `no` as a whole word, case-insensitive, after optional
/// whitespace. Anything else is not a verdict.
pub fn parse_verdict(raw: &str) -> Option<Verdict> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(?i)^\s*(yes|no)\b").expect("static regex"));
    let m = re.captures(raw)?;
    if m[1].eq_ignore_ascii_case("yes") {
        Some(Verdict::Yes)
    } else {
        Some(Verdict::No)
    }
}

/// First integer in the reply, clamped to `1..=10`.
pub fn parse_score(raw: &str) -> Option<u8> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"-?\d+").expect("static regex"));
    let m = re.find(raw)?;
    let v: i64 = m
        .as_str()
        .parse()
        .unwrap_or(if m.as_str().starts_with('-') {
            i64::MIN
        } else {
            i64::MAX
        });
    Some(v.clamp(1, 10) as u8)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetryPolicy {
    /// Extra attempts after the first one.
    pub retry_budget: usize,
    /// Base delay between attempts, doubled each retry.
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retry_budget: 2,
            backoff_ms: 0,
        }
    }
}

fn with_retries<T>(
    judge: &dyn JudgeClient,
    req: &JudgeRequest,
    policy: &RetryPolicy,
    parse: impl Fn(&str) -> Option<T>,
) -> Result<(T, String)> {
    let mut last = String::new();
    for attempt in 0..=policy.retry_budget {
        if attempt > 0 && policy.backoff_ms > 0 {
            let factor = 1u64 << (attempt - 1).min(16);
            std::thread::sleep(Duration::from_millis(
                policy.backoff_ms.saturating_mul(factor),
            ));
        }
        match judge.complete(req) {
            Ok(raw) => match parse(&raw) {
                Some(v) => return Ok((v, raw)),
                None => last = format!("unparseable reply `{}`", raw.trim()),
            },
            Err(e) => last = e.to_string(),
        }
    }
    Err(Error::Judge(format!(
        "record `{}`: {} attempts failed, last: {last}",
        req.record_id,
        policy.retry_budget + 1
    )))
}

pub fn ask_verdict(
    judge: &dyn JudgeClient,
    req: &JudgeRequest,
    policy: &RetryPolicy,
) -> Result<(Verdict, String)> {
    with_retries(judge, req, policy, parse_verdict)
}

pub fn ask_score(judge: &dyn JudgeClient, req: &JudgeRequest, policy: &RetryPolicy) -> Result<u8> {
    with_retries(judge, req, policy, parse_score).map(|(s, _)| s)
}

/// Offline judge with fixed rules: image requests are `yes` when the record
/// id or image reference contains a tag; text requests are `yes` when the
/// text contains an organism keyword; score requests grade token overlap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MockJudge {
    pub image_tags: Vec<String>,
    pub organism_keywords: Vec<String>,
}

impl Default for MockJudge {
    fn default() -> Self {
        Self {
            image_tags: vec!["xray_".to_string()],
            organism_keywords: ORGANISM_KEYWORDS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl JudgeClient for MockJudge {
    fn complete(&self, req: &JudgeRequest) -> Result<String> {
        let yes_no = |b: bool| if b { "yes" } else { "no" }.to_string();
        match req.task {
            JudgeTask::NonPathImage => {
                let image_ref = req.image_ref.as_deref().unwrap_or("");
                Ok(yes_no(self.image_tags.iter().any(|t| {
                    req.record_id.contains(t.as_str()) || image_ref.contains(t.as_str())
                })))
            }
            JudgeTask::NonHumanText => {
                let text = words(req.text.as_deref().unwrap_or(""));
                Ok(yes_no(
                    self.organism_keywords
                        .iter()
                        .any(|k| text.iter().any(|w| w == k)),
                ))
            }
            JudgeTask::AlignmentScore => {
                let response = words(req.text.as_deref().unwrap_or(""));
                let reference = words(req.reference.as_deref().unwrap_or(""));
                if reference.is_empty() {
                    return Ok("1".into());
                }
                let hits = reference.iter().filter(|w| response.contains(w)).count();
                let score = 1.0 + 9.0 * hits as f64 / reference.len() as f64;
                Ok(format!("{}", score.round() as u8))
            }
        }
    }
}

/// Judge backed by a closure, handy for scripted replies.
pub struct FnJudge<F>(pub F);

impl<F> JudgeClient for FnJudge<F>
where
    F: Fn(&JudgeRequest) -> Result<String> + Send + Sync,
{
    fn complete(&self, req: &JudgeRequest) -> Result<String> {
        (self.0)(req)
    }
}

#[derive(Clone, Debug)]
pub struct RemoteJudge {
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    /// Resolves relative image references.
    pub base_dir: Option<PathBuf>,
}

impl RemoteJudge {
    /// Endpoint and key come from the environment; the endpoint falls back
    /// to `endpoint` when the variable is unset.
    pub fn from_env(
        endpoint: Option<&str>,
        model: &str,
        timeout: Duration,
        base_dir: Option<PathBuf>,
    ) -> Result<Self> {
        let endpoint = std::env::var(ENDPOINT_ENV)
            .ok()
            .or_else(|| endpoint.map(str::to_string))
            .ok_or_else(|| {
                Error::Config(format!(
                    "remote judge needs an endpoint (set {ENDPOINT_ENV})"
                ))
            })?;
        Ok(Self {
            endpoint,
            model: model.to_string(),
            api_key: std::env::var(API_KEY_ENV).ok(),
            timeout,
            base_dir,
        })
    }

    fn body(&self, req: &JudgeRequest) -> Result<serde_json::Value> {
        let mut text = req.prompt.clone();
        if let Some(t) = &req.text {
            text.push_str("\n\n");
            text.push_str(t);
        }
        if let Some(r) = &req.reference {
            text.push_str("\n\nReference caption:\n");
            text.push_str(r);
        }
        let mut content = vec![serde_json::json!({"type": "text", "text": text})];
        if let (JudgeTask::NonPathImage, Some(image_ref)) = (req.task, &req.image_ref) {
            let bytes = image_bytes(image_ref, self.base_dir.as_deref())?;
            let b64 = base64::engine::general_purpose::STANDARD.encode(bytes);
            content.push(serde_json::json!({
                "type": "image_url",
                "image_url": {"url": format!("data:image/png;base64,{b64}")}
            }));
        }
        Ok(serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": content}],
            "temperature": 0,
        }))
    }
}

impl JudgeClient for RemoteJudge {
    fn complete(&self, req: &JudgeRequest) -> Result<String> {
        let body = self.body(req)?;
        let mut call = ureq::post(&self.endpoint).timeout(self.timeout);
        if let Some(key) = &self.api_key {
            call = call.set("Authorization", &format!("Bearer {key}"));
        }
        let reply: serde_json::Value = call
            .send_json(body)
            .map_err(|e| Error::Judge(format!("request to {} failed: {e}", self.endpoint)))?
            .into_json()
            .map_err(|e| Error::Judge(format!("reply is not JSON: {e}")))?;
        reply["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::Judge("reply has no choices[0].message.content".into()))
    }
}
