//! Logprob provider backed by an OpenAI-compatible completions endpoint.
//!
//! Each sequence is scored with one request in echo mode: the prompt is sent
//! as token ids with `max_tokens: 0`, and the server returns the logprob of
//! every echoed token plus the top `n` alternatives at each position.
//! Responses are cached on disk, keyed by a SHA-256 of the request, so
//! interrupted experiments can resume without re-querying.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use tempnorm_core::backends::{LogprobMatrix, LogprobProvider, LogprobRow, ProviderCapability, SparseRow};
use tempnorm_core::{Error, Result, Scalar, TokenId};

fn default_top_logprobs() -> usize {
    5
}

fn default_timeout() -> u64 {
    60
}

fn default_retries() -> u32 {
    3
}

fn default_in_flight() -> usize {
    4
}

fn default_backoff() -> u64 {
    250
}

fn default_log_base() -> String {
    "e".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpConfig {
    /// Base URL up to and including the API version, e.g.
    /// `http://localhost:8000/v1`.
    pub base_url: String,
    pub model: String,
    pub vocab_size: usize,
    /// Alternatives requested per position. At or above `vocab_size` the
    /// provider declares full distributions.
    #[serde(default = "default_top_logprobs")]
    pub top_logprobs: usize,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Retries after the first attempt for timeouts, connection errors,
    /// 429 and 5xx responses.
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub retry_backoff_ms: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    pub cache_dir: Option<PathBuf>,
    /// Prepended to every prompt so the first scored token has a context.
    pub bos_token: Option<TokenId>,
    /// Base of the server's logprobs: `"e"`, `"10"` or `"2"`.
    #[serde(default = "default_log_base")]
    pub log_base: String,
}

impl HttpConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    fn to_natural(&self) -> Result<f64> {
        match self.log_base.as_str() {
            "e" => Ok(1.0),
            "10" => Ok(std::f64::consts::LN_10),
            "2" => Ok(std::f64::consts::LN_2),
            other => Err(Error::InvalidParameter(format!("unsupported log base `{other}`"))),
        }
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(n: usize) -> Self {
        Self { free: Mutex::new(n), cv: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("gate mutex poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("gate mutex poisoned");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("gate mutex poisoned") += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    logprobs: Option<Logprobs>,
}

#[derive(Debug, Deserialize)]
struct Logprobs {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    top_logprobs: Option<Vec<Option<HashMap<String, f64>>>>,
}

fn provider_error(message: impl Into<String>, retriable: bool) -> Error {
    Error::Provider { message: message.into(), retriable }
}

/// Parses `"token_id:123"`, the form servers use when asked to return
/// tokens as ids.
pub fn parse_token_id(s: &str) -> Result<TokenId> {
    s.strip_prefix("token_id:")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| provider_error(format!("expected `token_id:N`, server sent `{s}`"), false))
}

#[derive(Debug)]
pub struct HttpProvider {
    config: HttpConfig,
    client: Client,
    api_key: Option<String>,
    gate: Gate,
    scale: f64,
}

impl HttpProvider {
    pub fn new(config: HttpConfig) -> Result<Self> {
        if config.vocab_size < 2 {
            return Err(Error::InvalidParameter("vocab_size must be >= 2".into()));
        }
        if config.top_logprobs == 0 || config.max_in_flight == 0 {
            return Err(Error::InvalidParameter("top_logprobs and max_in_flight must be >= 1".into()));
        }
        let scale = config.to_natural()?;
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::InvalidParameter(format!("environment variable `{var}` with the API key is not set"))
            })?),
            None => None,
        };
        if let Some(dir) = &config.cache_dir {
            fs::create_dir_all(dir)?;
        }
        let client = Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| provider_error(format!("building HTTP client: {e}"), false))?;
        let gate = Gate::new(config.max_in_flight);
        Ok(Self { config, client, api_key, gate, scale })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn request_body(&self, prompt: &[TokenId]) -> Value {
        json!({
            "model": self.config.model,
            "prompt": prompt,
            "echo": true,
            "max_tokens": 0,
            "logprobs": self.config.top_logprobs,
            "return_tokens_as_token_ids": true,
        })
    }

    fn cache_path(&self, body: &Value) -> Option<PathBuf> {
        let dir = self.config.cache_dir.as_ref()?;
        let key = json!({ "base_url": self.config.base_url, "request": body });
        let digest = Sha256::digest(key.to_string().as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        Some(dir.join(format!("{hex}.json")))
    }

    /// Response text for `body`, from cache or the server.
    fn fetch(&self, body: &Value) -> Result<String> {
        let cache = self.cache_path(body);
        if let Some(path) = &cache {
            if let Ok(text) = fs::read_to_string(path) {
                return Ok(text);
            }
        }
        let text = self.post_with_retries(body)?;
        if let Some(path) = &cache {
            // Write-then-rename so concurrent writers of one key never leave
            // a torn file behind.
            let dir = path.parent().expect("cache files live in a directory");
            let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
            tmp.write_all(text.as_bytes())?;
            tmp.persist(path).map_err(|e| Error::Io(e.error))?;
        }
        Ok(text)
    }

    fn post_with_retries(&self, body: &Value) -> Result<String> {
        let url = format!("{}/completions", self.config.base_url.trim_end_matches('/'));
        let mut attempt = 0;
        loop {
            let result = {
                let _permit = self.gate.acquire();
                self.post_once(&url, body)
            };
            match result {
                Err(Error::Provider { retriable: true, .. }) if attempt < self.config.max_retries => {
                    attempt += 1;
                    thread::sleep(Duration::from_millis(self.config.retry_backoff_ms << (attempt - 1).min(6)));
                }
                Err(Error::Provider { retriable: true, message }) => {
                    return Err(provider_error(
                        format!("giving up after {} attempts: {message}", attempt + 1),
                        true,
                    ));
                }
                other => return other,
            }
        }
    }

    fn post_once(&self, url: &str, body: &Value) -> Result<String> {
        let mut req = self.client.post(url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            let retriable = e.is_timeout() || e.is_connect() || e.is_request();
            provider_error(format!("request to {url} failed: {e}"), retriable)
        })?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| provider_error(format!("reading response body: {e}"), e.is_timeout()))?;
        if status.is_success() {
            Ok(text)
        } else {
            let retriable = status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error();
            Err(provider_error(format!("server returned {status}: {text}"), retriable))
        }
    }

    fn parse_rows<F: Scalar>(&self, text: &str, full_prompt: &[TokenId], ctx_len: usize) -> Result<Vec<LogprobRow<F>>> {
        let resp: CompletionResponse =
            serde_json::from_str(text).map_err(|e| provider_error(format!("malformed response: {e}"), false))?;
        let lp = resp
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.logprobs)
            .ok_or_else(|| provider_error("response has no logprobs", false))?;
        let ids = lp.tokens.iter().map(|s| parse_token_id(s)).collect::<Result<Vec<_>>>()?;
        if ids != full_prompt {
            return Err(provider_error("server echoed different tokens than were sent", false));
        }
        let top = lp.top_logprobs.unwrap_or_default();
        if lp.token_logprobs.len() != ids.len() || top.len() != ids.len() {
            return Err(provider_error("logprob arrays do not match the token count", false));
        }
        let cap = self.capability();
        let mut rows = Vec::with_capacity(ids.len() - ctx_len);
        for i in ctx_len..ids.len() {
            let observed = lp.token_logprobs[i]
                .ok_or_else(|| provider_error(format!("no logprob for position {i}"), false))?;
            let mut entries: Vec<(TokenId, F)> = Vec::new();
            for (k, &v) in top[i].iter().flatten() {
                entries.push((parse_token_id(k)?, F::lit(v * self.scale)));
            }
            if !entries.iter().any(|e| e.0 == ids[i]) {
                entries.push((ids[i], F::lit(observed * self.scale)));
            }
            let row = SparseRow::from_entries(entries, cap.n, cap.vocab_size)?;
            rows.push(if cap.is_full() {
                match row.to_full() {
                    Some(full) => LogprobRow::Full(full?),
                    None => {
                        return Err(provider_error(
                            format!("position {i} does not cover the declared vocabulary"),
                            false,
                        ))
                    }
                }
            } else {
                LogprobRow::Sparse(row)
            });
        }
        Ok(rows)
    }
}

impl<F: Scalar> LogprobProvider<F> for HttpProvider {
    fn capability(&self) -> ProviderCapability {
        ProviderCapability::top_n(self.config.top_logprobs, self.config.vocab_size)
    }

    fn provide(&self, _id: &str, prompt: &[TokenId], tokens: &[TokenId]) -> Result<LogprobMatrix<F>> {
        let mut full: Vec<TokenId> = self.config.bos_token.into_iter().collect();
        full.extend_from_slice(prompt);
        let ctx_len = full.len();
        if ctx_len == 0 {
            return Err(Error::InvalidParameter(
                "the server reports no distribution for the first token; set `bos_token` or use a prompt".into(),
            ));
        }
        full.extend_from_slice(tokens);
        let body = self.request_body(&full);
        let text = self.fetch(&body)?;
        let rows = self.parse_rows(&text, &full, ctx_len)?;
        LogprobMatrix::new(tokens.to_vec(), rows, prompt.len())
    }
}

impl HttpProvider {
    /// Capability without naming the scalar type.
    pub fn capability(&self) -> ProviderCapability {
        <Self as LogprobProvider<f64>>::capability(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_ids_parse() {
        assert_eq!(parse_token_id("token_id:42").unwrap(), 42);
        assert!(parse_token_id("hello").is_err());
        assert!(parse_token_id("token_id:-1").is_err());
    }

    #[test]
    fn config_defaults() {
        let c: HttpConfig =
            serde_json::from_str(r#"{"base_url": "http://x/v1", "model": "m", "vocab_size": 10}"#).unwrap();
        assert_eq!(c.top_logprobs, 5);
        assert_eq!(c.max_retries, 3);
        assert!(serde_json::from_str::<HttpConfig>(r#"{"base_url": "u", "model": "m", "vocab_size": 3, "bogus": 1}"#).is_err());
    }

    #[test]
    fn missing_key_variable_is_config_error() {
        let c = HttpConfig {
            api_key_env: Some("TEMPNORM_TEST_UNSET_VARIABLE".into()),
            ..serde_json::from_str(r#"{"base_url": "http://x/v1", "model": "m", "vocab_size": 10}"#).unwrap()
        };
        assert!(matches!(HttpProvider::new(c), Err(Error::InvalidParameter(_))));
    }
}
