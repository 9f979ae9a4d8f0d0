use std::io::Read;
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::time::Duration;

use log::{debug, warn};
use rand::Rng;

use super::wire::WireRequest;
use super::Transport;
use crate::error::{Error, Result};

const MAX_RESPONSE_BYTES: u64 = 512 * 1024 * 1024;

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
pub struct ConcurrencyLimit {
    permits: Mutex<usize>,
    freed: Condvar,
}

impl ConcurrencyLimit {
    pub fn new(permits: usize) -> Arc<Self> {
        Arc::new(Self {
            permits: Mutex::new(permits.max(1)),
            freed: Condvar::new(),
        })
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut free = self.permits.lock().unwrap_or_else(|p| p.into_inner());
        while *free == 0 {
            free = self.freed.wait(free).unwrap_or_else(|p| p.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

pub struct Permit<'a>(&'a ConcurrencyLimit);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap_or_else(|p| p.into_inner()) += 1;
        self.0.freed.notify_one();
    }
}

/// Process-wide limit shared by every [`HttpTransport`] that does not get its own.
pub fn global_limiter() -> Arc<ConcurrencyLimit> {
    static GLOBAL: OnceLock<Arc<ConcurrencyLimit>> = OnceLock::new();
    GLOBAL.get_or_init(|| ConcurrencyLimit::new(8)).clone()
}

#[derive(Clone, Debug)]
pub struct RetryPolicy {
    /// Total attempts are `max_retries + 1`.
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_millis(250),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    /// Exponential backoff with jitter in `[delay/2, delay]`.
    fn delay(&self, retry: u32) -> Duration {
        let exp = self.base_delay.saturating_mul(1u32 << retry.min(16));
        let capped = exp.min(self.max_delay);
        let jitter: f64 = rand::rng().random_range(0.5..=1.0);
        capped.mul_f64(jitter)
    }
}

enum Attempt {
    Done(Vec<u8>),
    Retryable(String),
    Fatal(Error),
}

/// Blocking HTTP client for an OpenAI-compatible server.
///
/// Retries transport failures, 5xx and 429; any other non-2xx status is a
/// caller bug and fails immediately.
pub struct HttpTransport {
    base_url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
    retry: RetryPolicy,
    limit: Arc<ConcurrencyLimit>,
}

impl HttpTransport {
    pub fn new(base_url: &str, api_key: Option<String>, timeout: Duration, retry: RetryPolicy) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key,
            agent,
            retry,
            limit: global_limiter(),
        }
    }

    pub fn with_limit(mut self, limit: Arc<ConcurrencyLimit>) -> Self {
        self.limit = limit;
        self
    }

    fn url(&self, path: &str) -> String {
        // Accept endpoints configured with or without the trailing /v1.
        match self.base_url.strip_suffix("/v1") {
            Some(root) => format!("{root}{path}"),
            None => format!("{}{path}", self.base_url),
        }
    }

    fn attempt(&self, url: &str, body: Option<&[u8]>) -> Attempt {
        let sent = match body {
            Some(body) => {
                let mut request = self.agent.post(url).header("Content-Type", "application/json");
                if let Some(key) = &self.api_key {
                    request = request.header("Authorization", format!("Bearer {key}"));
                }
                request.send(body)
            }
            None => {
                let mut request = self.agent.get(url);
                if let Some(key) = &self.api_key {
                    request = request.header("Authorization", format!("Bearer {key}"));
                }
                request.call()
            }
        };
        let mut response = match sent {
            Ok(r) => r,
            Err(e) => return Attempt::Retryable(e.to_string()),
        };
        let status = response.status().as_u16();
        let mut bytes = Vec::new();
        if let Err(e) = response
            .body_mut()
            .as_reader()
            .take(MAX_RESPONSE_BYTES)
            .read_to_end(&mut bytes)
        {
            return Attempt::Retryable(format!("reading body: {e}"));
        }
        match status {
            200..=299 => Attempt::Done(bytes),
            429 | 500..=599 => Attempt::Retryable(format!("status {status}")),
            _ => Attempt::Fatal(Error::RequestRejected {
                status,
                body: String::from_utf8_lossy(&bytes).chars().take(512).collect(),
            }),
        }
    }
}

impl HttpTransport {
    /// POSTs a JSON body to `path` under the base URL, with retries.
    pub fn post(&self, path: &str, body: &[u8]) -> Result<Vec<u8>> {
        self.execute(path, Some(body))
    }

    pub fn get(&self, path: &str) -> Result<Vec<u8>> {
        self.execute(path, None)
    }

    fn execute(&self, path: &str, body: Option<&[u8]>) -> Result<Vec<u8>> {
        let url = self.url(path);
        let attempts = self.retry.max_retries + 1;
        let mut last_error = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let wait = self.retry.delay(attempt - 1);
                debug!("retrying {url} in {wait:?} (attempt {})", attempt + 1);
                std::thread::sleep(wait);
            }
            let outcome = {
                let _permit = self.limit.acquire();
                self.attempt(&url, body)
            };
            match outcome {
                Attempt::Done(bytes) => return Ok(bytes),
                Attempt::Fatal(err) => return Err(err),
                Attempt::Retryable(msg) => {
                    warn!("{url}: {msg}");
                    last_error = msg;
                }
            }
        }
        Err(Error::RetryExhausted { attempts, last_error })
    }
}

impl Transport for HttpTransport {
    fn send(&self, req: &WireRequest) -> Result<Vec<u8>> {
        self.post(req.route.path(), &serde_json::to_vec(&req.body)?)
    }
}
