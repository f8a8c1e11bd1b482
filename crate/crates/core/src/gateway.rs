//! Uniform completion interface over remote chat-completion services and
//! deterministic scripted mocks.
//!
//! Mock policies are pure functions of (request, seed). They read the
//! side-band metadata attached to each request - never the rendered persona
//! text - so they stay valid under masking and template changes.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::persona::SimilarityLevel;
use crate::prompt::{Role, Turn};
use crate::seeding::{fnv1a, splitmix64};

pub const AUDIT_SCHEMA_VERSION: u32 = 1;

/// Temperature grid for sweep experiments; the default everywhere else is 0.
pub const TEMPERATURE_SWEEP: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    PersonaGeneration,
    QaBaseline,
    QaExposure,
    DefeasibleInitial,
    DefeasibleRevision,
}

impl RequestKind {
    fn is_defeasible(self) -> bool {
        matches!(
            self,
            RequestKind::DefeasibleInitial | RequestKind::DefeasibleRevision
        )
    }
}

/// Per-request metadata for mock resolution, carried alongside the rendered
/// turns.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SideBand {
    pub option_labels: Vec<String>,
    pub truth_label: Option<String>,
    pub in_group_label: Option<String>,
    pub out_group_label: Option<String>,
    pub first_peer_label: Option<String>,
    pub last_peer_label: Option<String>,
    pub base_persona_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub turns: Vec<Turn>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub request_tag: String,
    pub kind: RequestKind,
    pub sideband: SideBand,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<()> {
        if self.turns.is_empty() {
            return Err(Error::Domain("request has no turns".into()));
        }
        if !self.temperature.is_finite() || !(0.0..=2.0).contains(&self.temperature) {
            return Err(Error::Domain(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub latency_ms: u64,
    pub attempt_count: u32,
    pub backend_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    First,
    Last,
}

/// Scripted response for replay, keyed by request tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub text: String,
    pub attempt_count: u32,
    pub backend_id: String,
}

#[derive(Debug, Clone)]
pub enum MockPolicy {
    TruthOracle,
    InGroupFollower,
    OutGroupFollower,
    PositionFollower(Position),
    UniformRandom(u64),
    ScriptedReplay(HashMap<String, ReplayEntry>),
}

impl MockPolicy {
    pub fn slug(&self) -> String {
        match self {
            MockPolicy::TruthOracle => "truth_oracle".into(),
            MockPolicy::InGroupFollower => "in_group_follower".into(),
            MockPolicy::OutGroupFollower => "out_group_follower".into(),
            MockPolicy::PositionFollower(Position::First) => "position_follower_first".into(),
            MockPolicy::PositionFollower(Position::Last) => "position_follower_last".into(),
            MockPolicy::UniformRandom(_) => "uniform_random".into(),
            MockPolicy::ScriptedReplay(_) => "scripted_replay".into(),
        }
    }

    fn respond(&self, req: &ChatRequest) -> Result<MockReply> {
        if let MockPolicy::ScriptedReplay(fixture) = self {
            let entry = fixture.get(&req.request_tag).ok_or_else(|| {
                Error::Policy(format!("no scripted entry for tag {}", req.request_tag))
            })?;
            return Ok(MockReply {
                text: entry.text.clone(),
                attempt_count: entry.attempt_count,
                backend_id: Some(entry.backend_id.clone()),
            });
        }
        if req.kind == RequestKind::PersonaGeneration {
            return Ok(MockReply::plain(synthesize_variants(req)?));
        }
        let text = match self {
            MockPolicy::TruthOracle => {
                if req.kind.is_defeasible() {
                    "Unknown".to_string()
                } else {
                    required_truth(req)?
                }
            }
            MockPolicy::InGroupFollower => {
                follow(req, req.sideband.in_group_label.as_deref())?
            }
            MockPolicy::OutGroupFollower => {
                follow(req, req.sideband.out_group_label.as_deref())?
            }
            MockPolicy::PositionFollower(Position::First) => {
                follow(req, req.sideband.first_peer_label.as_deref())?
            }
            MockPolicy::PositionFollower(Position::Last) => {
                follow(req, req.sideband.last_peer_label.as_deref())?
            }
            MockPolicy::UniformRandom(seed) => {
                let labels = &req.sideband.option_labels;
                if labels.is_empty() {
                    return Err(Error::Policy(format!(
                        "uniform_random needs option labels on {}",
                        req.request_tag
                    )));
                }
                let idx = splitmix64(*seed ^ fnv1a(&req.request_tag)) as usize % labels.len();
                labels[idx].clone()
            }
            MockPolicy::ScriptedReplay(_) => unreachable!("handled above"),
        };
        Ok(MockReply::plain(text))
    }
}

struct MockReply {
    text: String,
    attempt_count: u32,
    backend_id: Option<String>,
}

impl MockReply {
    fn plain(text: String) -> Self {
        MockReply {
            text,
            attempt_count: 1,
            backend_id: None,
        }
    }
}

fn required_truth(req: &ChatRequest) -> Result<String> {
    req.sideband.truth_label.clone().ok_or_else(|| {
        Error::Policy(format!("request {} carries no truth label", req.request_tag))
    })
}

/// Follower behavior: adopt that side's label where it exists; otherwise
/// answer neutrally (the truth for QA stages, "Unknown" for judgments).
fn follow(req: &ChatRequest, side_label: Option<&str>) -> Result<String> {
    if let Some(label) = side_label {
        return Ok(label.to_string());
    }
    if req.kind.is_defeasible() {
        return Ok("Unknown".to_string());
    }
    required_truth(req)
}

fn synthesize_variants(req: &ChatRequest) -> Result<String> {
    let base = req.sideband.base_persona_text.as_deref().ok_or_else(|| {
        Error::Policy(format!(
            "persona generation request {} carries no base persona text",
            req.request_tag
        ))
    })?;
    let mut out = String::new();
    for level in SimilarityLevel::ALL {
        out.push_str(&format!(
            "{}: A {} counterpart of the base persona: {}\n",
            level.field_name(),
            level.keyword(),
            base
        ));
    }
    Ok(out)
}

/// Resolve a mock policy against a request, returning the raw answer text.
pub fn mock_answer(policy: &MockPolicy, req: &ChatRequest) -> Result<String> {
    policy.respond(req).map(|r| r.text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub factor: f64,
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay_ms: 1000,
            factor: 2.0,
            jitter: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub base_url: String,
    pub model_id: String,
    pub api_key_env: String,
    pub timeout_s: u64,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

enum Backend {
    Mock(MockPolicy),
    Remote {
        cfg: RemoteConfig,
        client: reqwest::blocking::Client,
        api_key: String,
    },
}

/// Shareable completion front end with bounded in-flight requests and an
/// optional request/response audit mirror.
pub struct Gateway {
    backend: Backend,
    limiter: Limiter,
    audit: Option<Mutex<BufWriter<File>>>,
    backend_id: String,
    model_id: String,
    default_temperature: f64,
}

impl Gateway {
    pub fn mock(policy: MockPolicy) -> Gateway {
        let backend_id = format!("mock:{}", policy.slug());
        Gateway {
            backend: Backend::Mock(policy),
            limiter: Limiter::new(usize::MAX),
            audit: None,
            backend_id,
            model_id: "mock".into(),
            default_temperature: 0.0,
        }
    }

    /// Remote backend; resolves the credential up front so a missing key
    /// fails before any network attempt.
    pub fn remote(cfg: RemoteConfig) -> Result<Gateway> {
        let api_key = std::env::var(&cfg.api_key_env).map_err(|_| {
            Error::Config(format!(
                "missing credential: env var {} is not set",
                cfg.api_key_env
            ))
        })?;
        if cfg.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be positive".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_s))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        let backend_id = format!("remote:{}", cfg.model_id);
        let model_id = cfg.model_id.clone();
        let limiter = Limiter::new(cfg.max_in_flight);
        Ok(Gateway {
            backend: Backend::Remote {
                cfg,
                client,
                api_key,
            },
            limiter,
            audit: None,
            backend_id,
            model_id,
            default_temperature: 0.0,
        })
    }

    pub fn with_audit(mut self, path: &Path) -> Result<Gateway> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        self.audit = Some(Mutex::new(BufWriter::new(file)));
        Ok(self)
    }

    pub fn with_default_temperature(mut self, t: f64) -> Gateway {
        self.default_temperature = t;
        self
    }

    pub fn backend_id(&self) -> &str {
        &self.backend_id
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn default_temperature(&self) -> f64 {
        self.default_temperature
    }

    pub fn is_mock(&self) -> bool {
        matches!(self.backend, Backend::Mock(_))
    }

    pub fn complete(&self, req: &ChatRequest) -> Result<ChatResponse> {
        req.validate()?;
        let _slot = self.limiter.acquire();
        let started = Instant::now();
        let response = match &self.backend {
            Backend::Mock(policy) => {
                let reply = policy.respond(req)?;
                ChatResponse {
                    text: reply.text,
                    latency_ms: started.elapsed().as_millis() as u64,
                    attempt_count: reply.attempt_count,
                    backend_id: reply.backend_id.unwrap_or_else(|| self.backend_id.clone()),
                }
            }
            Backend::Remote {
                cfg,
                client,
                api_key,
            } => {
                let (text, attempts) = remote_complete(cfg, client, api_key, req)?;
                ChatResponse {
                    text,
                    latency_ms: started.elapsed().as_millis() as u64,
                    attempt_count: attempts,
                    backend_id: self.backend_id.clone(),
                }
            }
        };
        if let Some(audit) = &self.audit {
            let entry = AuditEntry {
                schema_version: AUDIT_SCHEMA_VERSION,
                request_tag: req.request_tag.clone(),
                kind: req.kind,
                model_id: req.model_id.clone(),
                temperature: req.temperature,
                request_turns: req.turns.clone(),
                response_text: response.text.clone(),
                attempt_count: response.attempt_count,
                latency_ms: response.latency_ms,
                backend_id: response.backend_id.clone(),
            };
            let line = serde_json::to_string(&entry)
                .map_err(|e| Error::Protocol(format!("audit serialize: {e}")))?;
            let mut w = audit.lock().expect("audit lock");
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| {
                Error::io("audit.jsonl", e)
            })?;
        }
        Ok(response)
    }
}

fn remote_complete(
    cfg: &RemoteConfig,
    client: &reqwest::blocking::Client,
    api_key: &str,
    req: &ChatRequest,
) -> Result<(String, u32)> {
    let url = format!(
        "{}/chat/completions",
        cfg.base_url.trim_end_matches('/')
    );
    let messages: Vec<serde_json::Value> = req
        .turns
        .iter()
        .map(|t| serde_json::json!({ "role": t.role.as_str(), "content": t.text }))
        .collect();
    let body = serde_json::json!({
        "model": req.model_id,
        "messages": messages,
        "temperature": req.temperature,
        "max_tokens": req.max_output_tokens,
    });
    let mut attempt_log = Vec::new();
    let max_attempts = cfg.retry.max_attempts.max(1);
    for attempt in 1..=max_attempts {
        match client
            .post(&url)
            .bearer_auth(api_key)
            .json(&body)
            .send()
        {
            Ok(resp) => {
                let status = resp.status();
                if status.is_success() {
                    let value: serde_json::Value = resp
                        .json()
                        .map_err(|e| Error::Protocol(format!("response body: {e}")))?;
                    let text = value
                        .pointer("/choices/0/message/content")
                        .and_then(|v| v.as_str())
                        .ok_or_else(|| {
                            Error::Protocol(format!(
                                "missing choices[0].message.content in response for {}",
                                req.request_tag
                            ))
                        })?;
                    return Ok((text.to_string(), attempt));
                }
                let retryable = status.as_u16() == 429 || status.is_server_error();
                attempt_log.push(format!("attempt {attempt}: HTTP {status}"));
                if !retryable {
                    return Err(Error::Transport {
                        attempts: attempt,
                        msg: format!("HTTP {status} from {url}"),
                        attempt_log,
                    });
                }
            }
            Err(e) => {
                attempt_log.push(format!("attempt {attempt}: {e}"));
            }
        }
        if attempt < max_attempts {
            std::thread::sleep(backoff_delay(&cfg.retry, attempt));
        }
    }
    Err(Error::Transport {
        attempts: max_attempts,
        msg: format!("retries exhausted against {url}"),
        attempt_log,
    })
}

fn backoff_delay(rp: &RetryPolicy, attempt: u32) -> Duration {
    let base = rp.base_delay_ms as f64 * rp.factor.powi(attempt as i32 - 1);
    let jitter = 1.0 + rp.jitter * (rand::thread_rng().gen::<f64>() * 2.0 - 1.0);
    Duration::from_millis((base * jitter).max(0.0) as u64)
}

/// One mirrored request/response pair, sufficient to replay a run offline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub schema_version: u32,
    pub request_tag: String,
    pub kind: RequestKind,
    pub model_id: String,
    pub temperature: f64,
    pub request_turns: Vec<Turn>,
    pub response_text: String,
    pub attempt_count: u32,
    pub latency_ms: u64,
    pub backend_id: String,
}

pub fn read_audit(path: &Path) -> Result<Vec<AuditEntry>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: AuditEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            msg: format!("bad audit entry: {e}"),
        })?;
        entries.push(entry);
    }
    Ok(entries)
}

/// Index audit entries by request tag for scripted replay. Later entries win
/// so a resumed run's re-requests shadow earlier ones.
pub fn replay_fixture(entries: &[AuditEntry]) -> HashMap<String, ReplayEntry> {
    let mut map = HashMap::new();
    for e in entries {
        map.insert(
            e.request_tag.clone(),
            ReplayEntry {
                text: e.response_text.clone(),
                attempt_count: e.attempt_count,
                backend_id: e.backend_id.clone(),
            },
        );
    }
    map
}

/// Counting semaphore bounding in-flight completions.
struct Limiter {
    max: usize,
    in_flight: Mutex<usize>,
    cv: Condvar,
}

struct LimiterGuard<'a>(&'a Limiter);

impl Limiter {
    fn new(max: usize) -> Limiter {
        Limiter {
            max: max.max(1),
            in_flight: Mutex::new(0),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> LimiterGuard<'_> {
        let mut n = self.in_flight.lock().expect("limiter lock");
        while *n >= self.max {
            n = self.cv.wait(n).expect("limiter wait");
        }
        *n += 1;
        LimiterGuard(self)
    }
}

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().expect("limiter lock");
        *n -= 1;
        self.0.cv.notify_one();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn qa_request(kind: RequestKind) -> ChatRequest {
        ChatRequest {
            model_id: "mock".into(),
            turns: vec![Turn {
                role: Role::User,
                text: "Question: ?".into(),
            }],
            temperature: 0.0,
            max_output_tokens: 16,
            request_tag: "t1:exposure:1".into(),
            kind,
            sideband: SideBand {
                option_labels: vec!["(A)".into(), "(B)".into(), "(C)".into()],
                truth_label: Some("(B)".into()),
                in_group_label: Some("(A)".into()),
                out_group_label: Some("(C)".into()),
                first_peer_label: Some("(C)".into()),
                last_peer_label: Some("(A)".into()),
                base_persona_text: None,
            },
        }
    }

    #[test]
    fn truth_oracle_returns_truth_label() {
        let req = qa_request(RequestKind::QaExposure);
        assert_eq!(mock_answer(&MockPolicy::TruthOracle, &req).unwrap(), "(B)");
    }

    #[test]
    fn followers_use_sideband_not_text() {
        let req = qa_request(RequestKind::QaExposure);
        assert_eq!(
            mock_answer(&MockPolicy::InGroupFollower, &req).unwrap(),
            "(A)"
        );
        assert_eq!(
            mock_answer(&MockPolicy::OutGroupFollower, &req).unwrap(),
            "(C)"
        );
        assert_eq!(
            mock_answer(&MockPolicy::PositionFollower(Position::First), &req).unwrap(),
            "(C)"
        );
        assert_eq!(
            mock_answer(&MockPolicy::PositionFollower(Position::Last), &req).unwrap(),
            "(A)"
        );
    }

    #[test]
    fn followers_fall_back_to_truth_on_baseline() {
        let mut req = qa_request(RequestKind::QaBaseline);
        req.sideband.in_group_label = None;
        req.sideband.out_group_label = None;
        req.sideband.first_peer_label = None;
        req.sideband.last_peer_label = None;
        assert_eq!(
            mock_answer(&MockPolicy::InGroupFollower, &req).unwrap(),
            "(B)"
        );
    }

    #[test]
    fn missing_metadata_is_a_policy_error() {
        let mut req = qa_request(RequestKind::QaExposure);
        req.sideband = SideBand::default();
        assert!(matches!(
            mock_answer(&MockPolicy::TruthOracle, &req),
            Err(Error::Policy(_))
        ));
        assert!(matches!(
            mock_answer(&MockPolicy::UniformRandom(1), &req),
            Err(Error::Policy(_))
        ));
    }

    #[test]
    fn uniform_random_is_reproducible_and_tag_sensitive() {
        let req = qa_request(RequestKind::QaExposure);
        let a = mock_answer(&MockPolicy::UniformRandom(7), &req).unwrap();
        let b = mock_answer(&MockPolicy::UniformRandom(7), &req).unwrap();
        assert_eq!(a, b);
        let mut req2 = req.clone();
        req2.request_tag = "t2:exposure:1".into();
        let mut saw_other = false;
        for tag in 0..50 {
            req2.request_tag = format!("t{tag}:exposure:1");
            if mock_answer(&MockPolicy::UniformRandom(7), &req2).unwrap() != a {
                saw_other = true;
                break;
            }
        }
        assert!(saw_other);
    }

    #[test]
    fn persona_generation_synthesis_carries_all_six_fields() {
        let mut req = qa_request(RequestKind::PersonaGeneration);
        req.sideband = SideBand {
            base_persona_text: Some("A lighthouse keeper.".into()),
            ..SideBand::default()
        };
        let text = mock_answer(&MockPolicy::TruthOracle, &req).unwrap();
        for level in SimilarityLevel::ALL {
            assert!(text.contains(level.field_name()));
        }
        assert!(crate::persona::parse_variant_fields(&text).is_ok());
    }

    #[test]
    fn scripted_replay_misses_are_policy_errors() {
        let policy = MockPolicy::ScriptedReplay(HashMap::new());
        let req = qa_request(RequestKind::QaExposure);
        assert!(matches!(
            mock_answer(&policy, &req),
            Err(Error::Policy(_))
        ));
    }

    #[test]
    fn missing_credential_fails_before_any_network_attempt() {
        std::env::remove_var("TRIADIC_TEST_NO_SUCH_KEY");
        let cfg = RemoteConfig {
            base_url: "http://192.0.2.1:1".into(),
            model_id: "m".into(),
            api_key_env: "TRIADIC_TEST_NO_SUCH_KEY".into(),
            timeout_s: 1,
            max_in_flight: 1,
            retry: RetryPolicy::default(),
        };
        let started = Instant::now();
        match Gateway::remote(cfg) {
            Err(Error::Config(msg)) => assert!(msg.contains("TRIADIC_TEST_NO_SUCH_KEY")),
            other => panic!("expected config error, got {other:?}"),
        }
        assert!(started.elapsed() < Duration::from_millis(500));
    }

    #[test]
    fn limiter_bounds_concurrency() {
        let limiter = Arc::new(Limiter::new(3));
        let current = Arc::new(AtomicUsize::new(0));
        let high_water = Arc::new(AtomicUsize::new(0));
        let mut handles = Vec::new();
        for _ in 0..16 {
            let (l, c, h) = (limiter.clone(), current.clone(), high_water.clone());
            handles.push(std::thread::spawn(move || {
                let _g = l.acquire();
                let now = c.fetch_add(1, Ordering::SeqCst) + 1;
                h.fetch_max(now, Ordering::SeqCst);
                std::thread::sleep(Duration::from_millis(5));
                c.fetch_sub(1, Ordering::SeqCst);
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
        assert!(high_water.load(Ordering::SeqCst) <= 3);
        assert!(high_water.load(Ordering::SeqCst) >= 2);
    }
}
