use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use base64::Engine;
use sha2::{Digest, Sha256};

use super::AskError;

/// Environment variable holding the bearer token of the HTTP provider.
pub const API_KEY_ENV: &str = "APU_LVLM_API_KEY";

#[derive(Debug, Clone, PartialEq)]
pub enum ProviderError {
    /// Network or server failure; retried.
    Transport(String),
    /// The provider asked us to slow down; retried.
    RateLimited,
    /// Not worth retrying (bad request, missing mock file, ...).
    Fatal(String),
}

/// Something that turns an image and a prompt into response text.
pub trait AnnotationProvider: Send + Sync {
    fn complete(&self, image: &[u8], prompt: &str) -> Result<String, ProviderError>;
}

pub fn image_digest(image: &[u8]) -> String {
    hex::encode(Sha256::digest(image))
}

/// Cache file stem for an (image, prompt) pair.
pub fn cache_key(image: &[u8], prompt: &str) -> String {
    let mut h = Sha256::new();
    h.update(Sha256::digest(image));
    h.update(Sha256::digest(prompt.as_bytes()));
    hex::encode(h.finalize())
}

/// Serves `<dir>/<sha256 of image bytes>.txt`.
#[derive(Clone, Debug)]
pub struct MockProvider {
    dir: PathBuf,
}

impl MockProvider {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        MockProvider { dir: dir.into() }
    }

    pub fn response_path(&self, image: &[u8]) -> PathBuf {
        self.dir.join(format!("{}.txt", image_digest(image)))
    }
}

impl AnnotationProvider for MockProvider {
    fn complete(&self, image: &[u8], _prompt: &str) -> Result<String, ProviderError> {
        let path = self.response_path(image);
        fs::read_to_string(&path).map_err(|e| ProviderError::Fatal(format!("{}: {e}", path.display())))
    }
}

/// Chat-style HTTP endpoint taking one text part and one inline image part.
pub struct HttpProvider {
    endpoint: String,
    model: Option<String>,
    token: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpProvider {
    /// Reads the bearer token from [`API_KEY_ENV`].
    pub fn new(endpoint: impl Into<String>, model: Option<String>, timeout: Duration) -> Result<Self, AskError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| AskError::Config(e.to_string()))?;
        Ok(HttpProvider { endpoint: endpoint.into(), model, token: std::env::var(API_KEY_ENV).ok(), client })
    }

    pub fn request_body(&self, image: &[u8], prompt: &str) -> serde_json::Value {
        let data = base64::engine::general_purpose::STANDARD.encode(image);
        let mime = if image.starts_with(&[0xFF, 0xD8]) { "image/jpeg" } else { "image/png" };
        let mut body = serde_json::json!({
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "text", "text": prompt},
                    {"type": "image_url", "image_url": {"url": format!("data:{mime};base64,{data}")}}
                ]
            }]
        });
        if let Some(m) = &self.model {
            body["model"] = serde_json::Value::String(m.clone());
        }
        body
    }
}

/// Pulls the text out of common chat response layouts.
fn response_text(v: &serde_json::Value) -> Option<String> {
    if let Some(s) = v.pointer("/choices/0/message/content").and_then(|c| c.as_str()) {
        return Some(s.to_string());
    }
    match v.get("content") {
        Some(serde_json::Value::String(s)) => Some(s.clone()),
        Some(serde_json::Value::Array(parts)) => {
            let text: Vec<&str> = parts.iter().filter_map(|p| p.get("text").and_then(|t| t.as_str())).collect();
            (!text.is_empty()).then(|| text.join(""))
        }
        _ => v.get("text").and_then(|t| t.as_str()).map(str::to_string),
    }
}

impl AnnotationProvider for HttpProvider {
    fn complete(&self, image: &[u8], prompt: &str) -> Result<String, ProviderError> {
        let mut req = self.client.post(&self.endpoint).json(&self.request_body(image, prompt));
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        let resp = req.send().map_err(|e| ProviderError::Transport(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 {
            return Err(ProviderError::RateLimited);
        }
        if status.is_server_error() {
            return Err(ProviderError::Transport(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(ProviderError::Fatal(format!("HTTP {status}")));
        }
        let v: serde_json::Value = resp.json().map_err(|e| ProviderError::Transport(e.to_string()))?;
        response_text(&v).ok_or_else(|| ProviderError::Fatal("response has no text content".into()))
    }
}

/// Exponential backoff: waits `base * factor^k` before attempt `k + 2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetryPolicy {
    pub base: Duration,
    pub factor: f64,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { base: Duration::from_secs(1), factor: 2.0, max_attempts: 5 }
    }
}

impl RetryPolicy {
    pub fn delay(&self, retry: u32) -> Duration {
        self.base.mul_f64(self.factor.powi(retry as i32))
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut n = self.permits.lock().unwrap();
        while *n == 0 {
            n = self.cv.wait(n).unwrap();
        }
        *n -= 1;
        SemaphoreGuard(self)
    }
}

struct SemaphoreGuard<'a>(&'a Semaphore);

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// Provider front end with a content-addressed response cache, retries and a
/// bound on in-flight requests. Safe to share across threads.
pub struct AskClient {
    provider: Arc<dyn AnnotationProvider>,
    cache_dir: Option<PathBuf>,
    cache_lock: Mutex<()>,
    retry: RetryPolicy,
    slots: Semaphore,
    provider_calls: AtomicUsize,
}

impl AskClient {
    pub fn new(provider: Arc<dyn AnnotationProvider>, cache_dir: Option<PathBuf>, retry: RetryPolicy, max_in_flight: usize) -> Self {
        AskClient {
            provider,
            cache_dir,
            cache_lock: Mutex::new(()),
            retry,
            slots: Semaphore { permits: Mutex::new(max_in_flight.max(1)), cv: Condvar::new() },
            provider_calls: AtomicUsize::new(0),
        }
    }

    /// Number of times the underlying provider was invoked.
    pub fn provider_calls(&self) -> usize {
        self.provider_calls.load(Ordering::SeqCst)
    }

    fn cache_path(&self, image: &[u8], prompt: &str) -> Option<PathBuf> {
        self.cache_dir.as_ref().map(|d| d.join(format!("{}.txt", cache_key(image, prompt))))
    }

    fn read_cache(&self, path: &Path) -> Option<String> {
        let _g = self.cache_lock.lock().unwrap();
        fs::read_to_string(path).ok()
    }

    fn write_cache(&self, path: &Path, text: &str) -> Result<(), AskError> {
        let _g = self.cache_lock.lock().unwrap();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, text)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn query(&self, image: &[u8], prompt: &str) -> Result<String, AskError> {
        let cache = self.cache_path(image, prompt);
        if let Some(hit) = cache.as_deref().and_then(|p| self.read_cache(p)) {
            return Ok(hit);
        }
        let text = {
            let _slot = self.slots.acquire();
            self.query_with_retries(image, prompt)?
        };
        if let Some(p) = &cache {
            self.write_cache(p, &text)?;
        }
        Ok(text)
    }

    fn query_with_retries(&self, image: &[u8], prompt: &str) -> Result<String, AskError> {
        let attempts = self.retry.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.retry.delay(attempt - 1));
            }
            self.provider_calls.fetch_add(1, Ordering::SeqCst);
            match self.provider.complete(image, prompt) {
                Ok(text) => return Ok(text),
                Err(ProviderError::Fatal(m)) => return Err(AskError::Provider(m)),
                Err(ProviderError::RateLimited) => {
                    log::debug!("rate limited, attempt {}", attempt + 1);
                    last = "rate limited".into();
                }
                Err(ProviderError::Transport(m)) => {
                    log::debug!("transport error on attempt {}: {m}", attempt + 1);
                    last = m;
                }
            }
        }
        Err(AskError::Transport { attempts, message: last })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Counting {
        calls: AtomicUsize,
        fail_first: usize,
        error: ProviderError,
    }

    impl AnnotationProvider for Counting {
        fn complete(&self, _image: &[u8], prompt: &str) -> Result<String, ProviderError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                Err(self.error.clone())
            } else {
                Ok(format!("echo {prompt}"))
            }
        }
    }

    fn fast() -> RetryPolicy {
        RetryPolicy { base: Duration::ZERO, factor: 2.0, max_attempts: 5 }
    }

    fn counting(fail_first: usize, error: ProviderError) -> Arc<Counting> {
        Arc::new(Counting { calls: AtomicUsize::new(0), fail_first, error })
    }

    #[test]
    fn mock_passthrough() {
        let dir = tempfile::tempdir().unwrap();
        let image = b"not really a png";
        let mock = MockProvider::new(dir.path());
        fs::write(mock.response_path(image), "canned").unwrap();
        assert_eq!(mock.complete(image, "p").unwrap(), "canned");
        assert!(matches!(mock.complete(b"other", "p"), Err(ProviderError::Fatal(_))));
    }

    #[test]
    fn cache_hit_skips_provider() {
        let dir = tempfile::tempdir().unwrap();
        let provider = counting(0, ProviderError::RateLimited);
        let client = AskClient::new(provider.clone(), Some(dir.path().to_path_buf()), fast(), 4);
        assert_eq!(client.query(b"img", "hello").unwrap(), "echo hello");
        assert_eq!(client.query(b"img", "hello").unwrap(), "echo hello");
        assert_eq!(provider.calls.load(Ordering::SeqCst), 1);
        // A fresh client over the same directory also never calls out.
        let provider2 = counting(0, ProviderError::RateLimited);
        let client2 = AskClient::new(provider2.clone(), Some(dir.path().to_path_buf()), fast(), 4);
        client2.query(b"img", "hello").unwrap();
        assert_eq!(provider2.calls.load(Ordering::SeqCst), 0);
        client2.query(b"img", "other prompt").unwrap();
        assert_eq!(provider2.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn retry_exhaustion() {
        let provider = counting(usize::MAX, ProviderError::Transport("boom".into()));
        let client = AskClient::new(provider.clone(), None, fast(), 4);
        match client.query(b"img", "p") {
            Err(AskError::Transport { attempts, message }) => {
                assert_eq!(attempts, 5);
                assert_eq!(message, "boom");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(provider.calls.load(Ordering::SeqCst), 5);
    }

    #[test]
    fn rate_limit_recovers() {
        let provider = counting(3, ProviderError::RateLimited);
        let client = AskClient::new(provider.clone(), None, fast(), 4);
        assert_eq!(client.query(b"img", "p").unwrap(), "echo p");
        assert_eq!(client.provider_calls(), 4);
    }

    #[test]
    fn fatal_is_not_retried() {
        let provider = counting(usize::MAX, ProviderError::Fatal("400".into()));
        let client = AskClient::new(provider.clone(), None, fast(), 4);
        assert!(matches!(client.query(b"img", "p"), Err(AskError::Provider(_))));
        assert_eq!(client.provider_calls(), 1);
    }

    #[test]
    fn backoff_schedule() {
        let r = RetryPolicy::default();
        assert_eq!(r.delay(0), Duration::from_secs(1));
        assert_eq!(r.delay(3), Duration::from_secs(8));
    }

    #[test]
    fn in_flight_bound() {
        struct Slow {
            now: AtomicUsize,
            peak: AtomicUsize,
        }
        impl AnnotationProvider for Slow {
            fn complete(&self, _: &[u8], _: &str) -> Result<String, ProviderError> {
                let n = self.now.fetch_add(1, Ordering::SeqCst) + 1;
                self.peak.fetch_max(n, Ordering::SeqCst);
                std::thread::sleep(Duration::from_millis(20));
                self.now.fetch_sub(1, Ordering::SeqCst);
                Ok(String::new())
            }
        }
        let slow = Arc::new(Slow { now: AtomicUsize::new(0), peak: AtomicUsize::new(0) });
        let client = Arc::new(AskClient::new(slow.clone(), None, fast(), 2));
        let handles: Vec<_> = (0..8)
            .map(|i| {
                let c = client.clone();
                std::thread::spawn(move || c.query(&[i as u8], "p").unwrap())
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(slow.peak.load(Ordering::SeqCst) <= 2);
    }

    #[test]
    fn request_body_shape() {
        let p = HttpProvider { endpoint: String::new(), model: None, token: None, client: reqwest::blocking::Client::new() };
        let body = p.request_body(&[0x89, 0x50], "hi");
        let content = body["messages"][0]["content"].as_array().unwrap();
        assert_eq!(content.len(), 2);
        assert_eq!(content[0]["text"], "hi");
        assert!(content[1]["image_url"]["url"].as_str().unwrap().starts_with("data:image/png;base64,"));
        assert!(body.get("model").is_none());
    }

    #[test]
    fn response_layouts() {
        let v = serde_json::json!({"choices": [{"message": {"content": "a"}}]});
        assert_eq!(response_text(&v).unwrap(), "a");
        let v = serde_json::json!({"content": [{"type": "text", "text": "b"}]});
        assert_eq!(response_text(&v).unwrap(), "b");
    }
}
