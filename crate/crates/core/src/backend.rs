//! Chat-completion backends.
//!
//! [`ChatBackend`] is the one call every agent turn goes through. Three
//! implementations exist: [`ScriptedBackend`] replays canned replies keyed
//! by who is asking and at which protocol step, [`HttpBackend`] speaks the
//! OpenAI-compatible `/chat/completions` wire format, and
//! [`DeploymentPool`] spreads questions over several HTTP deployments.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::rng::SplitMix64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend unavailable after {attempts} attempt(s): {last}")]
    Unavailable { attempts: u32, last: String },
    #[error("request rejected with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("script exhausted for {key}")]
    ScriptExhausted { key: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagePart {
    pub media_type: String,
    pub data: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<ImagePart>,
}

impl ChatMessage {
    pub fn system(text: impl Into<String>) -> Self {
        Self { role: ChatRole::System, text: text.into(), images: vec![] }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self { role: ChatRole::User, text: text.into(), images: vec![] }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self { role: ChatRole::Assistant, text: text.into(), images: vec![] }
    }

    pub fn with_images(mut self, images: Vec<ImagePart>) -> Self {
        self.images = images;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<Vec<String>>,
}

impl GenerationParams {
    /// Agent turns.
    pub fn agent() -> Self {
        Self { temperature: 0.7, max_tokens: 1024, stop: None }
    }

    /// Recruiter calls and answer-extraction re-asks.
    pub fn deterministic() -> Self {
        Self { temperature: 0.0, max_tokens: 1024, stop: None }
    }
}

/// Protocol steps a call can be made from. The scripted backend keys
/// replies on these names.
pub mod stage {
    pub const ANALYSIS: &str = "analysis";
    pub const ANALYSIS_RETRY: &str = "analysis_retry";
    pub const WEIGHTS: &str = "weights";
    pub const ASSESSMENT: &str = "assessment";
    pub const COORDINATION: &str = "coordination";
    pub const DIRECTED: &str = "directed";
    pub const ACKNOWLEDGE: &str = "acknowledge";
    pub const VERIFY: &str = "verify";
    pub const MONITOR: &str = "monitor";
    pub const FINAL: &str = "final";
    pub const ANSWER_RETRY: &str = "answer_retry";
    pub const SYNTHESIS: &str = "synthesis";
}

/// Who is calling and from where in the protocol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallContext {
    pub question_id: String,
    pub agent_id: String,
    pub stage: String,
    /// The other party of a pairwise step (recipient, target, sender).
    pub peer: Option<String>,
    pub seed: u64,
}

impl CallContext {
    pub fn new(question_id: &str, agent_id: &str, stage: &str, seed: u64) -> Self {
        Self {
            question_id: question_id.to_string(),
            agent_id: agent_id.to_string(),
            stage: stage.to_string(),
            peer: None,
            seed,
        }
    }

    pub fn with_peer(mut self, peer: &str) -> Self {
        self.peer = Some(peer.to_string());
        self
    }

    pub fn key(&self) -> String {
        match &self.peer {
            Some(p) => format!("{}/{}/{}->{}", self.question_id, self.agent_id, self.stage, p),
            None => format!("{}/{}/{}", self.question_id, self.agent_id, self.stage),
        }
    }

    fn fingerprint(&self) -> u64 {
        // FNV-1a over the key, mixed with the seed.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.key().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h ^ self.seed
    }
}

pub trait ChatBackend: Send + Sync {
    fn complete(
        &self,
        ctx: &CallContext,
        messages: &[ChatMessage],
        params: &GenerationParams,
    ) -> Result<String, BackendError>;
}

/// Non-empty, system first, and no empty message without images.
pub fn check_messages(messages: &[ChatMessage]) -> Result<(), BackendError> {
    let first = messages.first().ok_or_else(|| BackendError::InvalidRequest("message list is empty".into()))?;
    if first.role != ChatRole::System {
        return Err(BackendError::InvalidRequest("first message must have role system".into()));
    }
    if let Some(i) = messages.iter().position(|m| m.text.is_empty() && m.images.is_empty()) {
        return Err(BackendError::InvalidRequest(format!("message {i} has no text and no images")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Scripted backend

/// One group of replies. Unset fields match anything; the most specific
/// matching entry with replies left answers first.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peer: Option<String>,
    pub replies: Vec<String>,
}

impl ScriptEntry {
    pub fn new(replies: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self { replies: replies.into_iter().map(Into::into).collect(), ..Self::default() }
    }

    pub fn question(mut self, q: &str) -> Self {
        self.question = Some(q.into());
        self
    }

    pub fn agent(mut self, a: &str) -> Self {
        self.agent = Some(a.into());
        self
    }

    pub fn stage(mut self, s: &str) -> Self {
        self.stage = Some(s.into());
        self
    }

    pub fn peer(mut self, p: &str) -> Self {
        self.peer = Some(p.into());
        self
    }

    fn matches(&self, ctx: &CallContext) -> bool {
        let ok = |want: &Option<String>, have: Option<&str>| want.as_deref().is_none_or(|w| Some(w) == have);
        ok(&self.question, Some(&ctx.question_id))
            && ok(&self.agent, Some(&ctx.agent_id))
            && ok(&self.stage, Some(&ctx.stage))
            && ok(&self.peer, ctx.peer.as_deref())
    }

    fn specificity(&self) -> usize {
        [&self.question, &self.agent, &self.stage, &self.peer].iter().filter(|f| f.is_some()).count()
    }
}

/// Canned replies for the scripted backend; loadable from JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Script {
    /// Reply for calls no entry covers. Without it such calls fail with
    /// `ScriptExhausted`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<String>,
    #[serde(default)]
    pub entries: Vec<ScriptEntry>,
}

impl Script {
    pub fn with_default(reply: impl Into<String>) -> Self {
        Self { default: Some(reply.into()), entries: vec![] }
    }

    pub fn push(mut self, entry: ScriptEntry) -> Self {
        self.entries.push(entry);
        self
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("reading script {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| BackendError::Config(format!("parsing script {}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordedCall {
    pub ctx: CallContext,
    pub messages: Vec<ChatMessage>,
    pub params: GenerationParams,
}

/// Replays a [`Script`]. Each instance keeps its own cursors, so give
/// every session a fresh one.
#[derive(Debug)]
pub struct ScriptedBackend {
    script: Script,
    order: Vec<usize>,
    cursors: Mutex<Vec<usize>>,
    calls: Mutex<Vec<RecordedCall>>,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        let mut order: Vec<usize> = (0..script.entries.len()).collect();
        // Stable: equal specificity keeps file order.
        order.sort_by_key(|&i| std::cmp::Reverse(script.entries[i].specificity()));
        let cursors = Mutex::new(vec![0; script.entries.len()]);
        Self { script, order, cursors, calls: Mutex::new(Vec::new()) }
    }

    /// Every call made so far, in order.
    pub fn calls(&self) -> Vec<RecordedCall> {
        self.calls.lock().unwrap().clone()
    }

    pub fn calls_at(&self, stage: &str) -> Vec<RecordedCall> {
        self.calls().into_iter().filter(|c| c.ctx.stage == stage).collect()
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(
        &self,
        ctx: &CallContext,
        messages: &[ChatMessage],
        params: &GenerationParams,
    ) -> Result<String, BackendError> {
        check_messages(messages)?;
        self.calls.lock().unwrap().push(RecordedCall {
            ctx: ctx.clone(),
            messages: messages.to_vec(),
            params: params.clone(),
        });
        let mut cursors = self.cursors.lock().unwrap();
        for &i in &self.order {
            let entry = &self.script.entries[i];
            if entry.matches(ctx) && cursors[i] < entry.replies.len() {
                cursors[i] += 1;
                return Ok(entry.replies[cursors[i] - 1].clone());
            }
        }
        self.script.default.clone().ok_or_else(|| BackendError::ScriptExhausted { key: ctx.key() })
    }
}

// ---------------------------------------------------------------------------
// Retry policy

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_secs: f64,
    pub multiplier: f64,
    /// Relative jitter; 0.2 means each delay is scaled by a factor in
    /// [0.8, 1.2].
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 5, base_delay_secs: 1.0, multiplier: 2.0, jitter: 0.2 }
    }
}

impl RetryPolicy {
    /// Delay before retry `k` (1-based), without jitter.
    pub fn nominal_delay(&self, k: u32) -> Duration {
        let exp = k.saturating_sub(1) as i32;
        Duration::from_secs_f64(self.base_delay_secs * self.multiplier.powi(exp))
    }

    pub fn jittered_delay(&self, k: u32, rng: &mut SplitMix64) -> Duration {
        let factor = 1.0 + self.jitter * (2.0 * rng.next_f64() - 1.0);
        self.nominal_delay(k).mul_f64(factor.max(0.0))
    }
}

/// Outcome of one attempt that did not succeed.
#[derive(Debug, Clone, PartialEq)]
pub struct AttemptError {
    pub status: Option<u16>,
    pub message: String,
}

impl AttemptError {
    pub fn status(status: u16, message: impl Into<String>) -> Self {
        Self { status: Some(status), message: message.into() }
    }

    pub fn transport(message: impl Into<String>) -> Self {
        Self { status: None, message: message.into() }
    }

    /// 429, 5xx and transport failures are worth another try.
    pub fn is_retryable(&self) -> bool {
        match self.status {
            None => true,
            Some(s) => s == 429 || (500..=599).contains(&s),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retried<T> {
    pub value: T,
    pub retries: u32,
    pub delays: Vec<Duration>,
}

/// Runs `attempt` until it succeeds, hits a non-retryable error, or
/// `policy.max_retries` retries are used up.
pub fn with_retries<T>(
    policy: &RetryPolicy,
    rng: &mut SplitMix64,
    sleep: &dyn Fn(Duration),
    mut attempt: impl FnMut(u32) -> Result<T, AttemptError>,
) -> Result<Retried<T>, BackendError> {
    let mut delays = Vec::new();
    let mut retries = 0u32;
    loop {
        match attempt(retries) {
            Ok(value) => return Ok(Retried { value, retries, delays }),
            Err(e) if !e.is_retryable() => {
                return Err(BackendError::Rejected { status: e.status.unwrap_or_default(), body: e.message })
            }
            Err(e) if retries >= policy.max_retries => {
                let last = match e.status {
                    Some(s) => format!("status {s}: {}", e.message),
                    None => e.message,
                };
                return Err(BackendError::Unavailable { attempts: retries + 1, last });
            }
            Err(e) => {
                retries += 1;
                let delay = policy.jittered_delay(retries, rng);
                tracing::debug!(retry = retries, ?delay, error = %e.message, "retrying");
                sleep(delay);
                delays.push(delay);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// HTTP deployments

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentConfig {
    pub name: String,
    pub endpoint_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the API key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credentials_env: Option<String>,
}

#[derive(Debug)]
pub struct Deployment {
    pub name: String,
    pub endpoint_url: url::Url,
    pub model_name: String,
    pub credentials_env: Option<String>,
    request_count: AtomicU64,
    failure_count: AtomicU64,
}

impl Deployment {
    pub fn new(cfg: &DeploymentConfig) -> Result<Self, BackendError> {
        let endpoint_url = url::Url::parse(&cfg.endpoint_url)
            .map_err(|e| BackendError::Config(format!("deployment {}: bad endpoint_url: {e}", cfg.name)))?;
        if !matches!(endpoint_url.scheme(), "http" | "https") {
            return Err(BackendError::Config(format!("deployment {}: endpoint_url must be http(s)", cfg.name)));
        }
        Ok(Self {
            name: cfg.name.clone(),
            endpoint_url,
            model_name: cfg.model_name.clone(),
            credentials_env: cfg.credentials_env.clone(),
            request_count: AtomicU64::new(0),
            failure_count: AtomicU64::new(0),
        })
    }

    pub fn request_count(&self) -> u64 {
        self.request_count.load(Ordering::Relaxed)
    }

    pub fn failure_count(&self) -> u64 {
        self.failure_count.load(Ordering::Relaxed)
    }

    fn completions_url(&self) -> String {
        format!("{}/chat/completions", self.endpoint_url.as_str().trim_end_matches('/'))
    }
}

/// OpenAI-compatible request body. Images become data-URL content parts.
pub fn request_body(model: &str, messages: &[ChatMessage], params: &GenerationParams) -> serde_json::Value {
    let msgs: Vec<_> = messages
        .iter()
        .map(|m| {
            let content = if m.images.is_empty() {
                json!(m.text)
            } else {
                let mut parts = Vec::new();
                if !m.text.is_empty() {
                    parts.push(json!({"type": "text", "text": m.text}));
                }
                for img in &m.images {
                    parts.push(json!({
                        "type": "image_url",
                        "image_url": {"url": format!("data:{};base64,{}", img.media_type, img.data)}
                    }));
                }
                json!(parts)
            };
            json!({"role": m.role, "content": content})
        })
        .collect();
    let mut body = json!({
        "model": model,
        "messages": msgs,
        "temperature": params.temperature,
        "max_tokens": params.max_tokens,
    });
    if let Some(stop) = &params.stop {
        body["stop"] = json!(stop);
    }
    body
}

/// Pulls `choices[0].message.content` out of a response body. Content may
/// be a string or a list of text parts.
pub fn reply_text(body: &serde_json::Value) -> Option<String> {
    let content = body.get("choices")?.get(0)?.get("message")?.get("content")?;
    match content {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Array(parts) => {
            Some(parts.iter().filter_map(|p| p.get("text").and_then(|t| t.as_str())).collect::<Vec<_>>().join(""))
        }
        _ => None,
    }
}

type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

/// A blocking client bound to one deployment.
#[derive(Clone)]
pub struct HttpBackend {
    deployment: Arc<Deployment>,
    client: reqwest::blocking::Client,
    policy: RetryPolicy,
    sleeper: Sleeper,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend").field("deployment", &self.deployment.name).field("policy", &self.policy).finish()
    }
}

fn http_client() -> Result<reqwest::blocking::Client, BackendError> {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(180))
        .build()
        .map_err(|e| BackendError::Config(format!("building HTTP client: {e}")))
}

impl HttpBackend {
    pub fn new(deployment: Arc<Deployment>, policy: RetryPolicy) -> Result<Self, BackendError> {
        Ok(Self { deployment, client: http_client()?, policy, sleeper: Arc::new(std::thread::sleep) })
    }

    /// Replaces the sleep used between retries.
    pub fn with_sleeper(mut self, sleeper: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleeper = Arc::new(sleeper);
        self
    }

    pub fn deployment(&self) -> &Deployment {
        &self.deployment
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<String, AttemptError> {
        let dep = &self.deployment;
        dep.request_count.fetch_add(1, Ordering::Relaxed);
        let result = self.send(body);
        if result.is_err() {
            dep.failure_count.fetch_add(1, Ordering::Relaxed);
        }
        result
    }

    fn send(&self, body: &serde_json::Value) -> Result<String, AttemptError> {
        let mut req = self.client.post(self.deployment.completions_url()).json(body);
        if let Some(var) = &self.deployment.credentials_env {
            match std::env::var(var) {
                Ok(key) => req = req.bearer_auth(key),
                Err(_) => tracing::warn!(env = %var, "credential variable not set; sending without auth"),
            }
        }
        let resp = req.send().map_err(|e| AttemptError::transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| AttemptError::transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(AttemptError::status(status, text));
        }
        // A 2xx with an unusable body is treated like a transport fault.
        let json: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| AttemptError::transport(format!("invalid JSON body: {e}")))?;
        reply_text(&json).ok_or_else(|| AttemptError::transport("response has no choices[0].message.content"))
    }

    /// Like `complete`, but also reports how many retries were needed.
    pub fn complete_traced(
        &self,
        ctx: &CallContext,
        messages: &[ChatMessage],
        params: &GenerationParams,
    ) -> Result<Retried<String>, BackendError> {
        check_messages(messages)?;
        let body = request_body(&self.deployment.model_name, messages, params);
        let mut rng = SplitMix64::new(ctx.fingerprint());
        let sleeper = self.sleeper.clone();
        with_retries(&self.policy, &mut rng, &*sleeper, |_| self.attempt(&body))
    }
}

impl ChatBackend for HttpBackend {
    fn complete(
        &self,
        ctx: &CallContext,
        messages: &[ChatMessage],
        params: &GenerationParams,
    ) -> Result<String, BackendError> {
        self.complete_traced(ctx, messages, params).map(|r| r.value)
    }
}

/// Round-robin deployment index for a question.
pub fn pool_assign(pool_size: usize, question_index: usize) -> usize {
    assert!(pool_size >= 1, "pool must have at least one deployment");
    question_index % pool_size
}

/// Several deployments shared by concurrent sessions.
#[derive(Debug, Clone)]
pub struct DeploymentPool {
    backends: Vec<HttpBackend>,
}

impl DeploymentPool {
    pub fn new(configs: &[DeploymentConfig], policy: RetryPolicy) -> Result<Self, BackendError> {
        if configs.is_empty() {
            return Err(BackendError::Config("deployment pool is empty".into()));
        }
        let client = http_client()?;
        let backends = configs
            .iter()
            .map(|cfg| {
                Ok(HttpBackend {
                    deployment: Arc::new(Deployment::new(cfg)?),
                    client: client.clone(),
                    policy: policy.clone(),
                    sleeper: Arc::new(std::thread::sleep),
                })
            })
            .collect::<Result<Vec<_>, BackendError>>()?;
        Ok(Self { backends })
    }

    pub fn len(&self) -> usize {
        self.backends.len()
    }

    pub fn is_empty(&self) -> bool {
        self.backends.is_empty()
    }

    pub fn assign(&self, question_index: usize) -> (usize, &HttpBackend) {
        let i = pool_assign(self.backends.len(), question_index);
        (i, &self.backends[i])
    }

    pub fn deployments(&self) -> impl Iterator<Item = &Deployment> {
        self.backends.iter().map(|b| b.deployment())
    }
}

/// How a run obtains its backend, as written in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Scripted {
        script_path: std::path::PathBuf,
    },
    Http {
        deployments: Vec<DeploymentConfig>,
        #[serde(default)]
        retry: RetryPolicy,
    },
}

/// Hands each session its backend.
#[derive(Debug, Clone)]
pub enum BackendSource {
    /// A fresh [`ScriptedBackend`] per session.
    Scripted(Arc<Script>),
    Pool(DeploymentPool),
}

impl BackendSource {
    pub fn from_spec(spec: &BackendSpec, base_dir: Option<&Path>) -> Result<Self, BackendError> {
        match spec {
            BackendSpec::Scripted { script_path } => {
                let path = match base_dir {
                    Some(dir) if script_path.is_relative() => dir.join(script_path),
                    _ => script_path.clone(),
                };
                Ok(BackendSource::Scripted(Arc::new(Script::load(&path)?)))
            }
            BackendSpec::Http { deployments, retry } => {
                Ok(BackendSource::Pool(DeploymentPool::new(deployments, retry.clone())?))
            }
        }
    }

    pub fn pool_size(&self) -> usize {
        match self {
            BackendSource::Scripted(_) => 1,
            BackendSource::Pool(p) => p.len(),
        }
    }

    /// Backend for the question at `question_index`, plus the deployment
    /// index it was assigned to.
    pub fn for_question(&self, question_index: usize) -> (usize, Arc<dyn ChatBackend>) {
        match self {
            BackendSource::Scripted(script) => (0, Arc::new(ScriptedBackend::new(Script::clone(script)))),
            BackendSource::Pool(pool) => {
                let (i, b) = pool.assign(question_index);
                (i, Arc::new(b.clone()))
            }
        }
    }

    /// Request/failure counters per deployment name.
    pub fn deployment_stats(&self) -> BTreeMap<String, (u64, u64)> {
        match self {
            BackendSource::Scripted(_) => BTreeMap::new(),
            BackendSource::Pool(p) => {
                p.deployments().map(|d| (d.name.clone(), (d.request_count(), d.failure_count()))).collect()
            }
        }
    }
}
