//! Completion providers, the caching and rate-limited client around them,
//! and parsing of completions into relation predictions.

use std::collections::HashMap;
use std::fmt;
use std::num::NonZeroU32;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use governor::clock::{Clock, DefaultClock};
use governor::{DefaultDirectRateLimiter, Quota, RateLimiter};
use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

use crate::cache::{now_rfc3339, stable_key, CacheEntry, CacheError, FileCache};
use crate::corpus::{RelationLabel, RelationSchema};
use crate::prompt::{CharHeuristicEstimator, PromptTemplates, TokenEstimator};

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("prompt needs {estimate} tokens, budget is {budget}")]
    BudgetExceeded { estimate: usize, budget: usize },
    #[error("provider `{provider}` failed: {message}")]
    Provider { provider: String, message: String },
    #[error("provider returned an empty completion")]
    EmptyResponse,
    #[error("prompt does not follow the demonstration layout: {0}")]
    UnparseablePrompt(String),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    MockOracle,
    MockEcho,
    Http,
}

impl fmt::Display for ProviderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProviderKind::MockOracle => "mock_oracle",
            ProviderKind::MockEcho => "mock_echo",
            ProviderKind::Http => "http",
        })
    }
}

impl std::str::FromStr for ProviderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mock_oracle" => Ok(ProviderKind::MockOracle),
            "mock_echo" => Ok(ProviderKind::MockEcho),
            "http" => Ok(ProviderKind::Http),
            other => Err(format!("unknown provider `{other}`")),
        }
    }
}

/// Completion settings. Defaults reproduce deterministic decoding with a
/// 4,097-token input window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub provider: ProviderKind,
    pub model_name: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub top_p: f64,
    pub frequency_penalty: f64,
    pub presence_penalty: f64,
    pub input_budget_tokens: usize,
    /// Requests per minute; 0 disables rate limiting.
    pub requests_per_minute: u32,
    pub max_in_flight: usize,
    pub max_retries: u32,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            provider: ProviderKind::MockOracle,
            model_name: "text-davinci-003".into(),
            temperature: 0.0,
            max_output_tokens: 256,
            top_p: 1.0,
            frequency_penalty: 0.0,
            presence_penalty: 0.0,
            input_budget_tokens: 4097,
            requests_per_minute: 0,
            max_in_flight: 4,
            max_retries: 3,
        }
    }
}

/// Error from a single provider attempt.
#[derive(Debug, Clone)]
pub struct ProviderFailure {
    pub transient: bool,
    pub message: String,
}

impl ProviderFailure {
    pub fn transient(message: impl Into<String>) -> Self {
        Self {
            transient: true,
            message: message.into(),
        }
    }

    pub fn permanent(message: impl Into<String>) -> Self {
        Self {
            transient: false,
            message: message.into(),
        }
    }
}

pub trait LlmProvider: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, config: &LlmConfig, prompt: &str) -> Result<String, ProviderFailure>;
}

/// Returns the prompt verbatim.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockEcho;

impl LlmProvider for MockEcho {
    fn name(&self) -> &str {
        "mock_echo"
    }

    fn complete(&self, _config: &LlmConfig, prompt: &str) -> Result<String, ProviderFailure> {
        Ok(prompt.to_string())
    }
}

/// Answers with the label of the demonstration closest to the test block.
#[derive(Debug, Clone)]
pub struct MockOracle {
    templates: PromptTemplates,
    null_name: String,
}

impl MockOracle {
    pub fn new(templates: PromptTemplates, null_name: impl Into<String>) -> Self {
        Self {
            templates,
            null_name: null_name.into(),
        }
    }
}

/// Reads the last demonstration label line above the final test cue. With
/// no demonstrations the answer is the NULL sentinel.
pub fn mock_oracle_complete(
    prompt: &str,
    templates: &PromptTemplates,
    null_name: &str,
) -> Result<String, LlmError> {
    let mut lines = prompt.lines().rev().skip_while(|l| l.trim().is_empty());
    match lines.next() {
        Some(last) if templates.is_cue_line(last) => {}
        _ => {
            return Err(LlmError::UnparseablePrompt(
                "prompt does not end with a relation cue".into(),
            ))
        }
    }
    Ok(lines
        .find_map(|line| templates.parse_label_line(line))
        .unwrap_or(null_name)
        .to_string())
}

impl LlmProvider for MockOracle {
    fn name(&self) -> &str {
        "mock_oracle"
    }

    fn complete(&self, _config: &LlmConfig, prompt: &str) -> Result<String, ProviderFailure> {
        mock_oracle_complete(prompt, &self.templates, &self.null_name)
            .map_err(|e| ProviderFailure::permanent(e.to_string()))
    }
}

type ScriptFn = dyn Fn(&str) -> Result<String, ProviderFailure> + Send + Sync;

/// Test provider driven by a closure.
pub struct ScriptedLlm {
    name: String,
    script: Box<ScriptFn>,
}

impl ScriptedLlm {
    pub fn new(
        name: impl Into<String>,
        script: impl Fn(&str) -> Result<String, ProviderFailure> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            script: Box::new(script),
        }
    }

    pub fn constant(text: &str) -> Self {
        let text = text.to_string();
        Self::new("scripted", move |_| Ok(text.clone()))
    }
}

impl LlmProvider for ScriptedLlm {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, _config: &LlmConfig, prompt: &str) -> Result<String, ProviderFailure> {
        (self.script)(prompt)
    }
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    temperature: f64,
    max_tokens: u32,
    top_p: f64,
    frequency_penalty: f64,
    presence_penalty: f64,
}

#[derive(Deserialize)]
struct CompletionResponse {
    text: String,
}

/// Completion endpoint reached over HTTP.
pub struct HttpLlm {
    name: String,
    url: String,
    token: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpLlm {
    pub const URL_ENV: &'static str = "REICL_LLM_URL";
    pub const TOKEN_ENV: &'static str = "REICL_LLM_TOKEN";

    pub fn new(url: impl Into<String>, token: Option<String>) -> Self {
        let url = url.into();
        Self {
            name: format!("http:{url}"),
            url,
            token,
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(120))
                .build()
                .expect("http client"),
        }
    }

    pub fn from_env() -> Result<Self, LlmError> {
        let url = std::env::var(Self::URL_ENV).map_err(|_| LlmError::Provider {
            provider: "http".into(),
            message: format!("{} is not set", Self::URL_ENV),
        })?;
        Ok(Self::new(url, std::env::var(Self::TOKEN_ENV).ok()))
    }
}

impl LlmProvider for HttpLlm {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, config: &LlmConfig, prompt: &str) -> Result<String, ProviderFailure> {
        let body = CompletionRequest {
            model: &config.model_name,
            prompt,
            temperature: config.temperature,
            max_tokens: config.max_output_tokens,
            top_p: config.top_p,
            frequency_penalty: config.frequency_penalty,
            presence_penalty: config.presence_penalty,
        };
        let mut req = self.client.post(&self.url).json(&body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req
            .send()
            .map_err(|e| ProviderFailure::transient(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let message = format!("status {status}");
            return Err(if status.as_u16() == 429 || status.is_server_error() {
                ProviderFailure::transient(message)
            } else {
                ProviderFailure::permanent(message)
            });
        }
        resp.json::<CompletionResponse>()
            .map(|r| r.text)
            .map_err(|e| ProviderFailure::permanent(format!("bad response body: {e}")))
    }
}

/// Builds the provider selected by `config`.
pub fn provider_for(
    config: &LlmConfig,
    templates: &PromptTemplates,
    schema: &RelationSchema,
) -> Result<Box<dyn LlmProvider>, LlmError> {
    Ok(match config.provider {
        ProviderKind::MockEcho => Box::new(MockEcho),
        ProviderKind::MockOracle => {
            Box::new(MockOracle::new(templates.clone(), schema.null_name()))
        }
        ProviderKind::Http => Box::new(HttpLlm::from_env()?),
    })
}

/// Exponential backoff for transient failures.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        self.base_delay
            .saturating_mul(2u32.saturating_pow(attempt))
            .min(self.max_delay)
    }

    /// Runs `op` until it succeeds, fails permanently (`.0 == false`), or
    /// exhausts the retry budget.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, (bool, String)>) -> Result<T, String> {
        let mut attempt = 0;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err((transient, message)) => {
                    if !transient || attempt >= self.max_retries {
                        return Err(format!("{message} (after {} attempts)", attempt + 1));
                    }
                    let delay = self.delay(attempt);
                    tracing::warn!(attempt = attempt + 1, ?delay, %message, "transient failure, retrying");
                    std::thread::sleep(delay);
                    attempt += 1;
                }
            }
        }
    }
}

/// Counting semaphore bounding concurrent provider calls.
struct InFlight {
    free: Mutex<usize>,
    cv: Condvar,
}

impl InFlight {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> InFlightGuard<'_> {
        let mut free = self.free.lock();
        while *free == 0 {
            self.cv.wait(&mut free);
        }
        *free -= 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock() += 1;
        self.0.cv.notify_one();
    }
}

/// Provider wrapper adding budget checks, the response cache, retries, rate
/// limiting and an in-flight bound. Safe to share across threads.
pub struct LlmClient {
    config: LlmConfig,
    provider: Box<dyn LlmProvider>,
    estimator: Box<dyn TokenEstimator>,
    cache: Option<FileCache>,
    retry: RetryPolicy,
    limiter: Option<DefaultDirectRateLimiter>,
    in_flight: InFlight,
    // Serializes identical prompts when no file cache is attached.
    memo: Mutex<HashMap<String, std::sync::Arc<Mutex<Option<String>>>>>,
    calls: AtomicUsize,
}

impl LlmClient {
    pub fn new(config: LlmConfig, provider: Box<dyn LlmProvider>) -> Self {
        let limiter = NonZeroU32::new(config.requests_per_minute)
            .map(|rpm| RateLimiter::direct(Quota::per_minute(rpm).allow_burst(NonZeroU32::MIN)));
        let retry = RetryPolicy {
            max_retries: config.max_retries,
            ..RetryPolicy::default()
        };
        Self {
            in_flight: InFlight::new(config.max_in_flight),
            config,
            provider,
            estimator: Box::new(CharHeuristicEstimator),
            cache: None,
            retry,
            limiter,
            memo: Mutex::default(),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_cache(mut self, cache: FileCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_estimator(mut self, estimator: Box<dyn TokenEstimator>) -> Self {
        self.estimator = estimator;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn config(&self) -> &LlmConfig {
        &self.config
    }

    pub fn provider_name(&self) -> &str {
        self.provider.name()
    }

    pub fn estimator(&self) -> &dyn TokenEstimator {
        self.estimator.as_ref()
    }

    /// Number of provider invocations (including retries) so far.
    pub fn provider_calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn cache_key(&self, prompt: &str) -> String {
        let config = serde_json::to_string(&self.config).expect("config serializes");
        stable_key([config.as_str(), self.provider.name(), prompt])
    }

    fn cacheable(&self) -> bool {
        self.config.temperature == 0.0
    }

    pub fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        let estimate = self.estimator.estimate(prompt);
        if estimate > self.config.input_budget_tokens {
            return Err(LlmError::BudgetExceeded {
                estimate,
                budget: self.config.input_budget_tokens,
            });
        }
        if !self.cacheable() {
            return self.call_provider(prompt);
        }
        let key = self.cache_key(prompt);
        match &self.cache {
            Some(cache) => {
                let lock = cache.key_lock(&key);
                let _guard = lock.lock();
                if let Some(entry) = cache.get(&key)? {
                    return Ok(entry.completion);
                }
                let completion = self.call_provider(prompt)?;
                cache.put(&CacheEntry {
                    key,
                    query: prompt.to_string(),
                    completion: completion.clone(),
                    provider: self.provider.name().to_string(),
                    created_at: now_rfc3339(),
                })?;
                Ok(completion)
            }
            None => {
                let slot = self.memo.lock().entry(key).or_default().clone();
                let mut slot = slot.lock();
                if let Some(done) = slot.as_ref() {
                    return Ok(done.clone());
                }
                let completion = self.call_provider(prompt)?;
                *slot = Some(completion.clone());
                Ok(completion)
            }
        }
    }

    fn call_provider(&self, prompt: &str) -> Result<String, LlmError> {
        let _slot = self.in_flight.acquire();
        let completion = self
            .retry
            .run(|| {
                if let Some(limiter) = &self.limiter {
                    while let Err(not_until) = limiter.check() {
                        std::thread::sleep(not_until.wait_time_from(DefaultClock::default().now()));
                    }
                }
                self.calls.fetch_add(1, Ordering::SeqCst);
                self.provider
                    .complete(&self.config, prompt)
                    .map_err(|f| (f.transient, f.message))
            })
            .map_err(|message| LlmError::Provider {
                provider: self.provider.name().to_string(),
                message,
            })?;
        if completion.trim().is_empty() {
            return Err(LlmError::EmptyResponse);
        }
        Ok(completion)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Exact,
    Normalized,
    FallbackNull,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub test_id: String,
    pub label: RelationLabel,
    pub raw_completion: String,
    pub parse_status: ParseStatus,
}

fn normalize(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

/// Maps a completion to a schema label: exact match of the first line, then
/// a unique case/punctuation-insensitive match within it, else NULL.
pub fn parse_prediction(test_id: &str, completion: &str, schema: &RelationSchema) -> Prediction {
    let labels = schema.all_labels();
    let first_line = completion
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or("");
    let bare = first_line.strip_suffix('.').unwrap_or(first_line).trim();
    let make = |label: RelationLabel, parse_status| Prediction {
        test_id: test_id.to_string(),
        label,
        raw_completion: completion.to_string(),
        parse_status,
    };
    if let Some(label) = labels.iter().find(|l| l.verbalize() == bare) {
        return make(label.clone(), ParseStatus::Exact);
    }
    let line = normalize(first_line);
    let matched: Vec<(String, &RelationLabel)> = labels
        .iter()
        .map(|l| (normalize(&l.verbalize()), l))
        .filter(|(n, _)| !n.is_empty() && line.contains(n.as_str()))
        .collect();
    // A match that is a substring of a longer match is not independent
    // evidence for a second label.
    let maximal: Vec<&RelationLabel> = matched
        .iter()
        .filter(|(n, _)| {
            !matched
                .iter()
                .any(|(other, _)| other.len() > n.len() && other.contains(n.as_str()))
        })
        .map(|(_, l)| *l)
        .collect();
    if let [only] = maximal.as_slice() {
        return make((*only).clone(), ParseStatus::Normalized);
    }
    if maximal.len() > 1 {
        tracing::debug!(test_id, candidates = maximal.len(), "ambiguous completion");
    }
    make(schema.null_label(), ParseStatus::FallbackNull)
}
